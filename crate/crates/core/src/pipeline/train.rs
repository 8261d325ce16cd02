//! Mini-batch SGD training, checkpoint capture/restore and prediction.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, NamedTensor, BN_MEAN_PREFIX, BN_VAR_PREFIX, MOMENTUM_PREFIX};
use super::config::RunConfig;
use super::data::{augment, batch_tensors, SamplePair};
use crate::losses::{hybrid_loss, LossBreakdown};
use crate::metrics::ConfusionCounts;
use crate::network::Model;
use crate::nn::{store_precision, Ctx, Group, ParamId, ParamStore};
use crate::tensor::{BatchNormMode, Tensor};
use crate::{Error, Result};

/// How the learning rate falls after each `lr_step` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrDecay {
    /// Multiply by `lr_factor` at every step boundary.
    Compound,
    /// Drop once to `lr_factor·lr` after the first boundary.
    Once,
}

impl FromStr for LrDecay {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "compound" => Ok(LrDecay::Compound),
            "once" => Ok(LrDecay::Once),
            _ => Err(format!("unknown lr decay {s:?} (compound|once)")),
        }
    }
}

impl fmt::Display for LrDecay {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            LrDecay::Compound => "compound",
            LrDecay::Once => "once",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr_step: usize,
    pub lr_factor: f64,
    pub lr_decay: LrDecay,
    /// Learning-rate multiplier of the [`Group::Head`] parameters.
    pub head_lr_mult: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch: 2,
            epochs: 20,
            lr_step: 20,
            lr_factor: 0.1,
            lr_decay: LrDecay::Compound,
            head_lr_mult: 10.0,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.head_lr_mult > 0.0 && self.lr_factor > 0.0) {
            return bad("lr, lr_factor and head_lr_mult must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay be nonnegative");
        }
        if self.lr_step == 0 {
            return bad("lr_step must be at least 1");
        }
        // batch norm at the coarsest level (1×1) needs two samples per batch
        if self.batch < 2 {
            return bad("batch must be at least 2");
        }
        Ok(())
    }

    /// Learning rate of 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = (epoch.max(1) - 1) / self.lr_step;
        match self.lr_decay {
            LrDecay::Compound => self.lr * self.lr_factor.powi(drops as i32),
            LrDecay::Once if drops > 0 => self.lr * self.lr_factor,
            LrDecay::Once => self.lr,
        }
    }
}

/// SGD with momentum and L2 weight decay added to the gradient:
/// `v ← μv + (g + λp)`, `p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore) -> Self {
        Sgd { velocity: store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }

    /// Applies one update. Parameters absent from `grads` are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], cfg: &TrainConfig, lr: f64) {
        for (id, g) in grads {
            let rate = match store.param(*id).group {
                Group::Backbone => lr,
                Group::Head => lr * cfg.head_lr_mult,
            };
            let v = self.velocity[id.index()].data_mut();
            let p = store.value_mut(*id).data_mut();
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *v = store_precision(cfg.momentum * *v + g + cfg.weight_decay * *p);
                *p = store_precision(*p - rate * *v);
            }
        }
    }
}

/// Loss terms summed over the fused map and the weighted side maps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TermTotals {
    pub wbce: f64,
    pub ssim: f64,
    pub siou: f64,
}

impl TermTotals {
    pub fn from_breakdown(b: &LossBreakdown, alpha: &[f64]) -> Self {
        let mut t = TermTotals { wbce: b.fused.wbce, ssim: b.fused.ssim, siou: b.fused.siou };
        for (s, &a) in b.sides.iter().zip(alpha) {
            t.wbce += a * s.wbce;
            t.ssim += a * s.ssim;
            t.siou += a * s.siou;
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub terms: TermTotals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: f64,
    pub fused: f64,
    pub sides: Vec<f64>,
    pub terms: TermTotals,
    /// F1 of the fused output at threshold 0.5 on the (augmented) batches
    /// seen during the epoch, in training mode.
    pub train_f1: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={} steps={} loss={} fused={} wbce={} ssim={} siou={} train_f1={}",
            self.epoch, self.lr, self.steps, self.loss, self.fused, self.terms.wbce, self.terms.ssim, self.terms.siou, self.train_f1
        )?;
        for (k, s) in self.sides.iter().enumerate() {
            write!(f, " side{}={s}", k + 1)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One line per epoch; floats printed in shortest round-trip form.
    pub fn to_text(&self) -> String {
        self.epochs.iter().map(|e| format!("{e}\n")).collect()
    }
}

/// Model, parameters and optimizer state of one training run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub sgd: Sgd,
    pub step: u64,
    pub epoch: usize,
}

impl Trainer {
    /// Fresh parameters drawn from `cfg.train.seed`.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.train.seed);
        let model = Model::new(cfg.model.clone(), &mut store)?;
        let sgd = Sgd::new(&store);
        Ok(Trainer { cfg, model, store, sgd, step: 0, epoch: 0 })
    }

    /// One forward/backward/update on `batch`.
    pub fn train_step(&mut self, batch: &[&SamplePair], lr: f64) -> Result<(StepRecord, ConfusionCounts)> {
        let (t1, t2, gt) = batch_tensors(batch)?;
        let mut ctx = Ctx::new(&self.store, BatchNormMode::Train);
        let (a, b) = (ctx.g.constant(t1), ctx.g.constant(t2));
        let out = self.model.forward(&mut ctx, a, b)?;
        let (loss, breakdown) = hybrid_loss(&mut ctx.g, &out, &gt, &self.cfg.loss)?;
        let step = self.step + 1;
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {} at epoch {} step {step} (lr {lr}); fused terms {:?}",
                breakdown.total, self.epoch, breakdown.fused
            )));
        }
        let mut counts = ConfusionCounts::default();
        for (&z, &g) in ctx.g.value(out.fused).data().iter().zip(gt.data()) {
            match (z >= 0.0, g == 1.0) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
        ctx.g.backward(loss)?;
        let grads = ctx.param_grads();
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {} at epoch {} step {step}",
                self.store.param(*id).name,
                self.epoch
            )));
        }
        let bn = ctx.take_bn_updates();
        drop(ctx);
        self.store.apply_bn_updates(&bn);
        self.sgd.step(&mut self.store, &grads, &self.cfg.train, lr);
        self.step = step;
        let terms = TermTotals::from_breakdown(&breakdown, &self.cfg.loss.alpha);
        Ok((StepRecord { step, epoch: self.epoch, lr, loss: breakdown, terms }, counts))
    }

    /// The next epoch over `data`: seeded shuffle, optional augmentation,
    /// batches of `train.batch` (a trailing single sample is dropped).
    pub fn run_epoch(&mut self, data: &[SamplePair], log: &mut TrainLog) -> Result<EpochRecord> {
        if data.len() < 2 {
            return Err(Error::Config(format!("training needs at least 2 pairs, got {}", data.len())));
        }
        self.epoch += 1;
        let epoch = self.epoch;
        let lr = self.cfg.train.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut rec = EpochRecord {
            epoch,
            lr,
            steps: 0,
            loss: 0.0,
            fused: 0.0,
            sides: vec![0.0; crate::network::LEVELS],
            terms: TermTotals::default(),
            train_f1: 0.0,
        };
        let mut counts = ConfusionCounts::default();
        for chunk in order.chunks(self.cfg.train.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let augmented: Vec<SamplePair>;
            let batch: Vec<&SamplePair> = if self.cfg.train.augment {
                augmented = chunk.iter().map(|&i| augment(&data[i], &mut rng)).collect();
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &data[i]).collect()
            };
            let (s, c) = self.train_step(&batch, lr)?;
            counts.merge(&c);
            rec.steps += 1;
            rec.loss += s.loss.total;
            rec.fused += s.loss.fused.total();
            for (acc, side) in rec.sides.iter_mut().zip(&s.loss.sides) {
                *acc += side.total();
            }
            rec.terms.wbce += s.terms.wbce;
            rec.terms.ssim += s.terms.ssim;
            rec.terms.siou += s.terms.siou;
            log.steps.push(s);
        }
        let n = rec.steps.max(1) as f64;
        rec.loss /= n;
        rec.fused /= n;
        rec.sides.iter_mut().for_each(|v| *v /= n);
        rec.terms.wbce /= n;
        rec.terms.ssim /= n;
        rec.terms.siou /= n;
        rec.train_f1 = counts.f1();
        log.epochs.push(rec.clone());
        Ok(rec)
    }

    /// Runs the remaining epochs up to `train.epochs`.
    pub fn fit(&mut self, data: &[SamplePair], mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        while self.epoch < self.cfg.train.epochs {
            let rec = self.run_epoch(data, &mut log)?;
            on_epoch(&rec);
        }
        Ok(log)
    }

    pub fn predict(&self, pairs: &[SamplePair], threshold: f64) -> Result<Vec<Prediction>> {
        predict(&self.model, &self.store, pairs, threshold)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = state_checkpoint(&self.store);
        for (p, v) in self.store.params().iter().zip(&self.sgd.velocity) {
            ck.push(NamedTensor::from_f64(format!("{MOMENTUM_PREFIX}{}", p.name), v.shape(), v.data()));
        }
        ck.push_text("config", &self.cfg.to_text());
        ck.push_text("progress", &format!("step={}\nepoch={}\n", self.step, self.epoch));
        ck
    }

    /// Rebuilds the run stored in `ck`, including optimizer state.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig::parse(&ck.text("config")?)?;
        let mut t = Trainer::new(cfg)?;
        load_state(ck, &mut t.store)?;
        for (p, v) in t.store.params().iter().zip(t.sgd.velocity.iter_mut()) {
            let name = format!("{MOMENTUM_PREFIX}{}", p.name);
            *v = expect_tensor(ck, &name, p.value.shape())?;
        }
        let progress = ck.text("progress")?;
        for line in progress.lines() {
            let bad = || Error::Data(format!("bad progress line {line:?}"));
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            match k {
                "step" => t.step = v.parse().map_err(|_| bad())?,
                "epoch" => t.epoch = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        let expected = 2 * t.store.len() + 2 * t.store.buffers().len() + 2;
        if ck.tensors.len() != expected {
            return Err(Error::Data(format!("checkpoint holds {} tensors, the stored config implies {expected}", ck.tensors.len())));
        }
        Ok(t)
    }
}

/// Parameters and batch-norm statistics of `store`, in registration order.
pub fn state_checkpoint(store: &ParamStore) -> Checkpoint {
    let mut ck = Checkpoint::default();
    for p in store.params() {
        ck.push(NamedTensor::from_f64(p.name.clone(), p.value.shape(), p.value.data()));
    }
    for b in store.buffers() {
        ck.push(NamedTensor::from_f64(format!("{BN_MEAN_PREFIX}{}", b.name), &[b.mean.len()], &b.mean));
        ck.push(NamedTensor::from_f64(format!("{BN_VAR_PREFIX}{}", b.name), &[b.var.len()], &b.var));
    }
    ck
}

fn expect_tensor(ck: &Checkpoint, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = ck.get(name).ok_or_else(|| Error::Data(format!("checkpoint does not match the model: missing tensor {name}")))?;
    if t.shape != shape {
        return Err(Error::Data(format!("checkpoint does not match the model: tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
    }
    Ok(Tensor::new(shape.to_vec(), t.to_f64())?)
}

/// Copies parameters and batch-norm statistics from `ck` into `store`,
/// failing on the first tensor that is missing or differently shaped.
pub fn load_state(ck: &Checkpoint, store: &mut ParamStore) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.param(id);
        let t = expect_tensor(ck, &p.name, p.value.shape())?;
        *store.value_mut(id) = t;
    }
    for b in store.buffers_mut() {
        let c = b.mean.len();
        b.mean = expect_tensor(ck, &format!("{BN_MEAN_PREFIX}{}", b.name), &[c])?.into_data();
        b.var = expect_tensor(ck, &format!("{BN_VAR_PREFIX}{}", b.name), &[c])?.into_data();
    }
    Ok(())
}

/// Change probability and binary map for one input pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub h: usize,
    pub w: usize,
    pub prob: Vec<f64>,
    /// `prob ≥ threshold`.
    pub mask: Vec<u8>,
}

/// `sigmoid` of the fused output in evaluation mode, one pair at a time.
pub fn predict(model: &Model, store: &ParamStore, pairs: &[SamplePair], threshold: f64) -> Result<Vec<Prediction>> {
    pairs
        .iter()
        .map(|p| {
            let (t1, t2, _) = batch_tensors(&[p])?;
            let mut ctx = Ctx::new(store, BatchNormMode::Eval);
            let (a, b) = (ctx.g.constant(t1), ctx.g.constant(t2));
            let out = model.forward(&mut ctx, a, b)?;
            let prob = ctx.g.sigmoid(out.fused)?;
            let prob = ctx.g.value(prob).data().to_vec();
            if prob.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("{}: non-finite probability", p.id)));
            }
            let (h, w) = p.size();
            Ok(Prediction { id: p.id.clone(), h, w, mask: prob.iter().map(|&v| u8::from(v >= threshold)).collect(), prob })
        })
        .collect()
}
