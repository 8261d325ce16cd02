//! Parameter registry, forward context and the basic parameterized layers
//! shared by the encoder, decoder and heads.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::gradcheck::{GradCheck, GradCheckReport};
use crate::tensor::{BatchNormMode, BatchStats, Graph, Result, Tensor, Var};

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    /// The Siamese encoder (would carry pretrained weights).
    Backbone,
    /// Everything initialized from scratch.
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: Group,
}

/// Running batch-norm statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl RunningStats {
    /// `running ← (1-m)·running + m·batch`, with the unbiased batch variance.
    pub fn update(&mut self, stats: &BatchStats, momentum: f64) {
        let corr = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = store_precision((1.0 - momentum) * self.mean[c] + momentum * stats.mean[c]);
            self.var[c] = store_precision((1.0 - momentum) * self.var[c] + momentum * stats.var[c] * corr);
        }
    }
}

/// Stored parameters are kept at 32-bit precision so checkpoints round-trip
/// exactly; arithmetic runs in 64-bit.
pub fn store_precision(v: f64) -> f64 {
    v as f32 as f64
}

/// Owns every trainable tensor and batch-norm buffer, in registration order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<RunningStats>,
    by_name: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new(), by_name: HashMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, group: Group) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let value = value.map(store_precision);
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, group });
        ParamId(self.params.len() - 1)
    }

    /// Registers a tensor drawn from `U(-bound, bound)`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, group: Group) -> ParamId {
        let t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        self.register(name, t, group)
    }

    /// Registers a normal tensor truncated to two standard deviations.
    pub fn trunc_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, group: Group) -> ParamId {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let v = Tensor::randn(&[1], 1.0, &mut self.rng).item();
            if v.abs() <= 2.0 {
                data.push(v * std);
            }
        }
        let t = Tensor::new(shape.to_vec(), data).expect("shape");
        self.register(name, t, group)
    }

    pub fn buffer(&mut self, name: impl Into<String>, channels: usize) -> BufferId {
        self.buffers.push(RunningStats { name: name.into(), mean: vec![0.0; channels], var: vec![1.0; channels] });
        BufferId(self.buffers.len() - 1)
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn buffers(&self) -> &[RunningStats] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [RunningStats] {
        &mut self.buffers
    }

    pub fn running(&self, id: BufferId) -> &RunningStats {
        &self.buffers[id.0]
    }

    pub fn apply_bn_updates(&mut self, updates: &[(BufferId, BatchStats)]) {
        for (id, st) in updates {
            self.buffers[id.0].update(st, BN_MOMENTUM);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// A single forward evaluation: a fresh graph, lazily bound parameter
/// leaves, the batch-norm mode, and a per-parameter record of which
/// stream tags read it.
pub struct Ctx<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    reads: Vec<u8>,
    tag: u8,
    pub mode: BatchNormMode,
    bn_updates: Vec<(BufferId, BatchStats)>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, mode: BatchNormMode) -> Self {
        Self::with_graph(Graph::new(), store, mode)
    }

    pub fn with_graph(g: Graph, store: &'s ParamStore, mode: BatchNormMode) -> Self {
        Ctx { g, store, bound: vec![None; store.len()], reads: vec![0; store.len()], tag: 0, mode, bn_updates: Vec::new() }
    }

    pub fn into_graph(self) -> Graph {
        self.g
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// The graph leaf holding parameter `id`, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        self.reads[id.0] |= self.tag;
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.value(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Binds parameter `id` to an existing node (used by gradient checks).
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Tags subsequent parameter reads (bit flags).
    pub fn set_tag(&mut self, tag: u8) {
        self.tag = tag;
    }

    /// Bit flags of the tags under which `id` has been read.
    pub fn read_tags(&self, id: ParamId) -> u8 {
        self.reads[id.0]
    }

    pub fn record_bn(&mut self, id: BufferId, stats: BatchStats) {
        self.bn_updates.push((id, stats));
    }

    pub fn take_bn_updates(&mut self) -> Vec<(BufferId, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradient of every bound parameter after `g.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.g.grad(v).map(|t| (ParamId(i), t.clone()))
            })
            .collect()
    }
}

/// Dense layer over the last axis; weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool, group: Group) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = store.uniform(format!("{name}.weight"), &[inp, out], bound, group);
        let b = bias.then(|| store.register(format!("{name}.bias"), Tensor::zeros(&[out]), group));
        Linear { w, b }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let y = ctx.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.p(b);
                ctx.g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        group: Group,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = store.uniform(format!("{name}.weight"), &[cout, cin, k, k], bound, group);
        let b = bias.then(|| store.register(format!("{name}.bias"), Tensor::zeros(&[cout]), group));
        Conv2d { w, b, stride, pad }
    }

    pub fn pointwise(store: &mut ParamStore, name: &str, cin: usize, cout: usize, group: Group) -> Self {
        Self::new(store, name, cin, cout, 1, 1, 0, true, group)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let b = self.b.map(|b| ctx.p(b));
        ctx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed convolution; weight stored `[Cin, Cout, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, group: Group) -> Self {
        let bound = 1.0 / ((cout * k * k) as f64).sqrt();
        let w = store.uniform(format!("{name}.weight"), &[cin, cout, k, k], bound, group);
        let b = Some(store.register(format!("{name}.bias"), Tensor::zeros(&[cout]), group));
        ConvTranspose2d { w, b, stride, pad }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let b = self.b.map(|b| ctx.p(b));
        ctx.g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: Group) -> Self {
        LayerNorm {
            gamma: store.register(format!("{name}.weight"), Tensor::ones(&[dim]), group),
            beta: store.register(format!("{name}.bias"), Tensor::zeros(&[dim]), group),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        ctx.g.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: BufferId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: Group) -> Self {
        BatchNorm2d {
            gamma: store.register(format!("{name}.weight"), Tensor::ones(&[channels]), group),
            beta: store.register(format!("{name}.bias"), Tensor::zeros(&[channels]), group),
            running: store.buffer(name.to_string(), channels),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        let rs = ctx.store().running(self.running);
        let (y, stats) = ctx.g.batch_norm(x, g, b, &rs.mean, &rs.var, BN_EPS, ctx.mode)?;
        if let Some(st) = stats {
            ctx.record_bn(self.running, st);
        }
        Ok(y)
    }
}

/// Random-weight contraction `mean(w ⊙ out)`, turning any output into a
/// scalar whose gradient exercises every element. Averaging keeps the
/// scalar small, so finite-difference roundoff stays well below the
/// relative-error floor where the true gradient vanishes.
pub fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(out).numel() as f64;
    let w = Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng).map(|v| v / n);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

/// Gradient-checks a parameterized module with respect to its inputs and
/// the listed parameters (all parameters when `params` is `None`).
/// `forward` maps the input nodes to a tensor, which is probed with
/// `check.seed` unless already scalar.
pub fn check_module<F>(
    store: &ParamStore,
    mode: BatchNormMode,
    inputs: &[Tensor],
    params: Option<&[ParamId]>,
    check: &GradCheck,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let ids: Vec<ParamId> = match params {
        Some(p) => p.to_vec(),
        None => store.ids().collect(),
    };
    let mut all = inputs.to_vec();
    all.extend(ids.iter().map(|&id| store.value(id).clone()));
    let n_in = inputs.len();
    let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let mut ctx = Ctx::with_graph(std::mem::take(g), store, mode);
        for (&id, &v) in ids.iter().zip(&vars[n_in..]) {
            ctx.bind(id, v);
        }
        let out = forward(&mut ctx, &vars[..n_in]);
        *g = ctx.into_graph();
        let out = out?;
        if g.value(out).numel() == 1 && g.shape(out).is_empty() {
            Ok(out)
        } else {
            probe(g, out, check.seed)
        }
    };
    check.run(f, &all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_are_shared_within_a_context() {
        let mut store = ParamStore::new(0);
        let lin = Linear::new(&mut store, "fc", 3, 2, true, Group::Head);
        let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
        let a = ctx.p(lin.w);
        let b = ctx.p(lin.w);
        assert_eq!(a, b);
        assert_eq!(store.len(), 2);
        assert_eq!(store.find("fc.bias"), lin.b);
    }

    #[test]
    fn read_tags_accumulate() {
        let mut store = ParamStore::new(0);
        let lin = Linear::new(&mut store, "fc", 3, 2, false, Group::Head);
        let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
        ctx.set_tag(1);
        ctx.p(lin.w);
        ctx.set_tag(2);
        ctx.p(lin.w);
        assert_eq!(ctx.read_tags(lin.w), 3);
    }

    #[test]
    fn stored_values_are_single_precision() {
        let mut store = ParamStore::new(3);
        let id = store.uniform("w", &[16], 1.0, Group::Head);
        assert!(store.value(id).data().iter().all(|&v| v == v as f32 as f64));
    }

    #[test]
    fn running_stats_momentum() {
        let mut rs = RunningStats { name: "bn".into(), mean: vec![0.0], var: vec![1.0] };
        rs.update(&BatchStats { mean: vec![1.0], var: vec![0.5], count: 2 }, 0.1);
        assert_eq!(rs.mean[0], store_precision(0.1));
        assert_eq!(rs.var[0], store_precision(0.9 + 0.1 * 1.0));
    }
}
