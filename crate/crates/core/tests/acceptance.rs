//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed; exits nonzero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swincd::losses::{class_weights, siou_loss, ssim_loss, wbce};
use swincd::metrics::{self, ConfusionCounts};
use swincd::network::{sharing_violations, Model, ModelConfig, ShapeReport, LEVELS};
use swincd::nn::{Ctx, ParamStore};
use swincd::oracle::{gradient_suite, SuiteConfig};
use swincd::pipeline::{synth_dataset, tile, Checkpoint, Raster, RunConfig, SamplePair, Trainer};
use swincd::tensor::{BatchNormMode, Graph, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Duration, limit_s: u64, what: &str) -> Result<(), String> {
    ensure(t.as_secs() < limit_s, || format!("{what} took {:.1}s (limit {limit_s}s)", t.as_secs_f64()))
}

fn gradient_oracles() -> Outcome {
    let start = Instant::now();
    let reps = gradient_suite(&SuiteConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let failed: Vec<String> = reps.iter().filter(|r| !r.passed()).map(|r| format!("{} ({:.2e})", r.name, r.worst)).collect();
    ensure(failed.is_empty(), || format!("breached: {}", failed.join(", ")))?;
    let few: Vec<&str> = reps.iter().filter(|r| r.instances < 5).map(|r| r.name.as_str()).collect();
    ensure(few.is_empty(), || format!("fewer than 5 instances: {few:?}"))?;
    within(elapsed, 300, "suite")?;
    let worst = reps.iter().map(|r| r.worst).fold(0.0, f64::max);
    Ok(format!("{} components, worst relative error {worst:.2e}, {:.1}s", reps.len(), elapsed.as_secs_f64()))
}

/// The desk-scale run used in place of the full-dataset benchmarks.
pub fn overfit_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.train.batch = 8;
    c.train.epochs = 200;
    c.train.lr = 1e-2;
    c.train.lr_step = 200;
    c.train.augment = false;
    c
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let data = synth_dataset(8, 64, 1).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(overfit_config()).map_err(|e| e.to_string())?;
    let log = t.fit(&data, |_| {}).map_err(|e| e.to_string())?;
    ensure(log.steps.len() == 200, || format!("{} steps", log.steps.len()))?;
    let preds = t.predict(&data, 0.5).map_err(|e| e.to_string())?;
    let mut c = ConfusionCounts::default();
    for (p, d) in preds.iter().zip(&data) {
        c.merge(&metrics::confusion(&p.mask, &d.mask.data).map_err(|e| e.to_string())?);
    }
    let first = log.steps[0].loss.total;
    let last = log.steps[199].loss.total;
    let ratio = first / last;
    let elapsed = start.elapsed();
    ensure(c.f1() > 0.95, || format!("training-set F1 {:.4}", c.f1()))?;
    ensure(ratio >= 10.0, || format!("loss {first:.4} -> {last:.4} is only {ratio:.2}x"))?;
    within(elapsed, 900, "overfit run")?;
    Ok(format!("F1 {:.4}, loss {first:.3} -> {last:.4} ({ratio:.0}x), {:.0}s", c.f1(), elapsed.as_secs_f64()))
}

fn structure() -> Outcome {
    let cfg = ModelConfig { input_size: (256, 256), ..ModelConfig::toy() };
    let mut store = ParamStore::new(0);
    let model = Model::new(cfg.clone(), &mut store).map_err(|e| e.to_string())?;
    let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let t1 = ctx.g.constant(Tensor::uniform(&[1, 3, 256, 256], 0.0, 1.0, &mut r));
    let t2 = ctx.g.constant(Tensor::uniform(&[1, 3, 256, 256], 0.0, 1.0, &mut r));
    let trace = model.forward_traced(&mut ctx, t1, t2).map_err(|e| e.to_string())?;
    let rep = ShapeReport::from_trace(&ctx, &trace);
    let bad = rep.violations(&cfg, 1);
    ensure(bad.is_empty(), || bad.join("; "))?;
    let c = cfg.base_dim;
    let sides: Vec<usize> = rep.pyramid.iter().map(|s| s[2]).collect();
    ensure(sides == [64, 32, 16, 8, 4], || format!("level sides {sides:?}"))?;
    ensure(rep.pyramid.iter().all(|s| s[1] == c), || "non-uniform encoder width".into())?;
    let b = cfg.branch_dim();
    ensure(rep.sum.iter().chain(&rep.diff).all(|s| s[1] == b), || format!("branch width is not {b}"))?;
    ensure(rep.sides.len() == 5 && rep.sides.iter().chain([&rep.fused]).all(|s| s == &[1, 1, 256, 256]), || "side outputs".into())?;
    Ok(format!("levels {sides:?} x {c}ch, branches {b}ch, 5 sides + fused at 256x256"))
}

fn loss_analytics() -> Outcome {
    let gt1 = Tensor::ones(&[2, 1, 16, 16]);
    let mut g = Graph::new();
    let p = g.constant(Tensor::full(&[2, 1, 16, 16], 0.5));
    let v = siou_loss(&mut g, p, &gt1).map_err(|e| e.to_string())?;
    let siou = g.value(v).item();
    ensure((siou - 0.5).abs() <= 1e-9, || format!("soft IoU loss {siou}"))?;

    let mut r = ChaCha8Rng::seed_from_u64(4);
    let gt = Tensor::new(vec![1, 1, 16, 16], (0..256).map(|_| r.gen_range(0..2) as f64).collect()).unwrap();
    let same = g.constant(gt.clone());
    let v = ssim_loss(&mut g, same, &gt, 11, 1e-4).map_err(|e| e.to_string())?;
    let ssim = g.value(v).item();
    ensure(ssim.abs() <= 1e-9, || format!("SSIM loss of identical maps {ssim}"))?;

    let z = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
    let v = wbce(&mut g, z, &gt, &Tensor::ones(&[1, 1, 16, 16]), 1e-7).map_err(|e| e.to_string())?;
    let ce = g.value(v).item();
    ensure((ce - std::f64::consts::LN_2).abs() <= 1e-9, || format!("cross-entropy at 0.5 {ce}"))?;

    let w = class_weights([0.75, 0.25]);
    ensure((w[0] - 2.0 / 3.0).abs() <= 1e-12 && (w[1] - 2.0).abs() <= 1e-12, || format!("class weights {w:?}"))?;
    Ok(format!("siou {siou}, ssim {ssim:.1e}, wbce {ce:.12}, weights [{:.12}, {:.12}]", w[0], w[1]))
}

struct Naive {
    tp: u64,
    fp: u64,
    tn: u64,
    fn_: u64,
}

fn naive_counts(pred: &[u8], gt: &[u8]) -> Naive {
    let mut n = Naive { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for i in 0..pred.len() {
        if pred[i] == 1 && gt[i] == 1 {
            n.tp += 1;
        } else if pred[i] == 1 {
            n.fp += 1;
        } else if gt[i] == 1 {
            n.fn_ += 1;
        } else {
            n.tn += 1;
        }
    }
    n
}

fn div(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn naive_mba(pred: &[u8], gt: &[u8], s: usize) -> f64 {
    let at = |y: isize, x: isize| gt[y as usize * s + x as usize];
    let mut boundary = Vec::new();
    for y in 0..s as isize {
        for x in 0..s as isize {
            let v = at(y, x);
            let nb = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)];
            if nb.iter().any(|&(yy, xx)| yy >= 0 && xx >= 0 && yy < s as isize && xx < s as isize && at(yy, xx) != v) {
                boundary.push((y, x));
            }
        }
    }
    if boundary.is_empty() {
        let n = naive_counts(pred, gt);
        return div(n.tp + n.tn, pred.len() as u64);
    }
    let mut total = 0.0;
    for r in [1isize, 3, 5, 7] {
        let (mut inside, mut right) = (0u64, 0u64);
        for y in 0..s as isize {
            for x in 0..s as isize {
                if boundary.iter().any(|&(by, bx)| (by - y).abs().max((bx - x).abs()) <= r) {
                    inside += 1;
                    let i = y as usize * s + x as usize;
                    right += u64::from(pred[i] == gt[i]);
                }
            }
        }
        total += div(right, inside);
    }
    total / 4.0
}

fn metric_oracles() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let s = 32;
    let thresholds = metrics::default_thresholds();
    for case in 0..100 {
        // vary the change fraction so empty and full masks also occur
        let pg: f64 = [0.0, 0.02, 0.3, 0.5, 1.0][case % 5];
        let gt: Vec<u8> = (0..s * s).map(|_| u8::from(r.gen_bool(pg))).collect();
        let prob: Vec<f64> = (0..s * s).map(|_| (r.gen_range(0..=100) as f64) / 100.0).collect();
        let pred = metrics::binarize(&prob, 0.5);
        let c = metrics::confusion(&pred, &gt).map_err(|e| e.to_string())?;
        let n = naive_counts(&pred, &gt);
        ensure((c.tp, c.fp, c.tn, c.fn_) == (n.tp, n.fp, n.tn, n.fn_), || format!("case {case}: counts differ"))?;
        let p = div(n.tp, n.tp + n.fp);
        let rc = div(n.tp, n.tp + n.fn_);
        let f1 = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        let iou = div(n.tp, n.tp + n.fp + n.fn_);
        let oa = div(n.tp + n.tn, (s * s) as u64);
        for (name, got, want) in
            [("P", c.precision(), p), ("R", c.recall(), rc), ("F1", c.f1(), f1), ("IoU", c.iou(), iou), ("OA", c.oa(), oa)]
        {
            ensure((got - want).abs() <= 1e-12, || format!("case {case}: {name} {got} vs {want}"))?;
        }
        ensure((c.f1() - 2.0 * c.iou() / (1.0 + c.iou())).abs() <= 1e-12, || format!("case {case}: F1/IoU identity"))?;

        let roc = metrics::roc_curve(&prob, &gt, &thresholds).map_err(|e| e.to_string())?;
        for (&t, &(fpr, tpr)) in thresholds.iter().zip(&roc) {
            let at: Vec<u8> = prob.iter().map(|&v| u8::from(v >= t)).collect();
            let n = naive_counts(&at, &gt);
            let want = (div(n.fp, n.fp + n.tn), div(n.tp, n.tp + n.fn_));
            ensure((fpr - want.0).abs() <= 1e-12 && (tpr - want.1).abs() <= 1e-12, || format!("case {case}: ROC at {t}"))?;
        }

        let m = metrics::mba(&pred, &gt, s, s).map_err(|e| e.to_string())?;
        let want = naive_mba(&pred, &gt, s);
        ensure((m - want).abs() <= 1e-12, || format!("case {case}: mBA {m} vs {want}"))?;
    }
    Ok("100 random 32x32 pairs: counts exact, ratios/ROC/mBA within 1e-12".into())
}

fn tiling() -> Outcome {
    let blank =
        SamplePair::new("scene", Raster::filled(1024, 1024, 3, 0), Raster::filled(1024, 1024, 3, 0), Raster::filled(1024, 1024, 1, 0))
            .map_err(|e| e.to_string())?;
    let mut counts = Vec::new();
    for pairs in [445, 64, 128] {
        let mut n = 0;
        for _ in 0..pairs {
            n += tile(&blank, 256).map_err(|e| e.to_string())?.len();
        }
        counts.push(n);
    }
    let total: usize = counts.iter().sum();
    ensure(counts == [7120, 1024, 2048] && total == 10192, || format!("tiles {counts:?} = {total}"))?;
    Ok(format!("637 scenes -> {} + {} + {} = {total} tiles", counts[0], counts[1], counts[2]))
}

fn determinism() -> Outcome {
    let data = synth_dataset(4, 64, 9).map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 3;
    let run = || -> Result<Trainer, String> {
        let mut t = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
        t.fit(&data, |_| {}).map_err(|e| e.to_string())?;
        Ok(t)
    };
    let (a, b) = (run()?, run()?);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    a.checkpoint().save(&p1).map_err(|e| e.to_string())?;
    ensure(a.checkpoint() == b.checkpoint(), || "two identical runs ended in different states".into())?;
    let reloaded = Trainer::from_checkpoint(&Checkpoint::load(&p1).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    reloaded.checkpoint().save(&p2).map_err(|e| e.to_string())?;
    let (b1, b2) = (std::fs::read(&p1).map_err(|e| e.to_string())?, std::fs::read(&p2).map_err(|e| e.to_string())?);
    ensure(b1 == b2, || "save -> load -> save changed the file".into())?;
    let before = a.predict(&data, 0.5).map_err(|e| e.to_string())?;
    let after = reloaded.predict(&data, 0.5).map_err(|e| e.to_string())?;
    ensure(before == after, || "predictions changed after reload".into())?;
    Ok(format!("state identical across runs, checkpoint of {} bytes round-trips, predictions identical", b1.len()))
}

fn determinism_logs() -> Outcome {
    let data = synth_dataset(4, 64, 9).map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 3;
    let log = || -> Result<String, String> {
        let mut t = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
        let log = t.fit(&data, |_| {}).map_err(|e| e.to_string())?;
        Ok(log.to_text())
    };
    let (a, b) = (log()?, log()?);
    ensure(a == b, || "loss logs differ".into())?;
    Ok(String::new())
}

fn weight_sharing() -> Outcome {
    let mut store = ParamStore::new(3);
    let model = Model::new(ModelConfig::toy(), &mut store).map_err(|e| e.to_string())?;
    let img = Tensor::uniform(&[2, 3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
        let mut ctx = Ctx::new(&store, mode);
        let (t1, t2) = (ctx.g.constant(img.clone()), ctx.g.constant(img.clone()));
        let tr = model.forward_traced(&mut ctx, t1, t2).map_err(|e| e.to_string())?;
        for k in 0..LEVELS {
            ensure(ctx.g.value(tr.pyramid_t1.levels[k]) == ctx.g.value(tr.pyramid_t2.levels[k]), || {
                format!("level {} pyramids differ", k + 1)
            })?;
            ensure(ctx.g.value(tr.enhanced.diff_base[k]).data().iter().all(|&v| v == 0.0), || {
                format!("level {} difference base nonzero", k + 1)
            })?;
        }
        let v = sharing_violations(&model, &ctx);
        ensure(v.is_empty(), || format!("encoder parameters not shared: {v:?}"))?;
    }
    Ok("pyramids bit-identical, difference base maps exactly zero, every encoder weight read by both dates".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 gradient oracle suite", gradient_oracles),
        ("2 overfit substitute", overfit),
        ("3 structural fidelity", structure),
        ("4 loss analytics", loss_analytics),
        ("5 metric oracle equivalence", metric_oracles),
        ("6 tiling identity", tiling),
        ("7 determinism and persistence", || {
            determinism_logs()?;
            determinism().map(|d| format!("loss logs identical, {d}"))
        }),
        ("8 weight-sharing audit", weight_sharing),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail} [{:.1}s]", start.elapsed().as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{:.1}s]", start.elapsed().as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
