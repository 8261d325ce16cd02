//! Boundary-aware hybrid objective: weighted cross-entropy, patch SSIM and
//! soft IoU per output map, summed over the fused and side outputs.
//!
//! Ground-truth masks are `[N, 1, H, W]` tensors holding exactly 0 or 1.
//! Each loss is a custom graph op with a hand-derived backward pass.

use crate::metrics::label_boundary;
use crate::network::{SideOutputs, LEVELS};
use crate::tensor::{invalid, CustomOp, Graph, Result, Tensor, TensorError, Var};

/// Where the class frequencies of the balancing term come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrequencySource {
    /// Measured on the masks of each training batch.
    Batch,
    /// Fixed `[background, change]` fractions, e.g. measured once on the
    /// whole training split.
    Fixed([f64; 2]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub boundary_weight: f64,
    pub ssim_patch: usize,
    pub ssim_eps: f64,
    /// Weight of each side output; the fused output always has weight 1.
    pub alpha: [f64; LEVELS],
    pub prob_clamp: f64,
    pub frequencies: FrequencySource,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            boundary_weight: 2.0,
            ssim_patch: 11,
            ssim_eps: 1e-4,
            alpha: [1.0; LEVELS],
            prob_clamp: 1e-7,
            frequencies: FrequencySource::Batch,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.boundary_weight >= 0.0) {
            return invalid("loss_config", "boundary_weight must be nonnegative");
        }
        if self.ssim_patch == 0 || self.ssim_patch % 2 == 0 {
            return invalid("loss_config", format!("ssim_patch {} must be odd", self.ssim_patch));
        }
        if !(self.ssim_eps > 0.0) {
            return invalid("loss_config", "ssim_eps must be positive");
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return invalid("loss_config", "prob_clamp must lie in (0, 0.5)");
        }
        if self.alpha.iter().any(|&a| !(a >= 0.0)) {
            return invalid("loss_config", "alpha weights must be nonnegative");
        }
        if let FrequencySource::Fixed(f) = self.frequencies {
            if f.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return invalid("loss_config", "fixed class frequencies must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

fn mask_dims(gt: &Tensor) -> Result<(usize, usize, usize)> {
    let s = gt.shape();
    if s.len() != 4 || s[1] != 1 {
        return invalid("mask", format!("expected [N,1,H,W], got {s:?}"));
    }
    if let Some(v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return invalid("mask", format!("mask value {v} is not 0 or 1"));
    }
    Ok((s[0], s[2], s[3]))
}

/// `[background, change]` pixel fractions of a mask batch.
pub fn class_frequencies(gt: &Tensor) -> Result<[f64; 2]> {
    mask_dims(gt)?;
    let n = gt.numel() as f64;
    let pos = gt.data().iter().filter(|&&v| v == 1.0).count() as f64;
    Ok([(n - pos) / n, pos / n])
}

/// 1 where some 4-neighbor inside the same image has a different label.
pub fn boundary_map(gt: &Tensor) -> Result<Vec<bool>> {
    let (n, h, w) = mask_dims(gt)?;
    Ok(gt.data().chunks(h * w).take(n).flat_map(|m| label_boundary(m, h, w)).collect())
}

/// Balancing weight of each class: `median(f) / f_l`, where the median of
/// two entries is their mean. A class with zero frequency gets no weight
/// (it labels no pixel); when only one class is present its weight is 1.
pub fn class_weights(freq: [f64; 2]) -> [f64; 2] {
    if freq[0] == 0.0 || freq[1] == 0.0 {
        return [1.0, 1.0];
    }
    let median = 0.5 * (freq[0] + freq[1]);
    [median / freq[0], median / freq[1]]
}

/// Per-pixel weights: class balancing plus `w0` on label boundaries.
pub fn compute_weights(gt: &Tensor, freq: [f64; 2], w0: f64) -> Result<Tensor> {
    let boundary = boundary_map(gt)?;
    let cw = class_weights(freq);
    let data = gt.data().iter().zip(&boundary).map(|(&g, &b)| cw[g as usize] + if b { w0 } else { 0.0 }).collect();
    Tensor::new(gt.shape().to_vec(), data)
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch { op, a: a.to_vec(), b: b.to_vec() });
    }
    Ok(())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
struct WbceOp {
    gt: Tensor,
    weights: Tensor,
    clamp: f64,
}

impl CustomOp for WbceOp {
    fn name(&self) -> &'static str {
        "wbce"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let z = inputs[0];
        let n = z.numel() as f64;
        let go = grad.item();
        let d = z
            .data()
            .iter()
            .zip(self.gt.data())
            .zip(self.weights.data())
            .map(|((&z, &g), &w)| {
                let p = sigmoid(z);
                if p < self.clamp || p > 1.0 - self.clamp {
                    0.0
                } else {
                    go * w * (p - g) / n
                }
            })
            .collect();
        vec![Some(Tensor::new(z.shape().to_vec(), d).expect("shape"))]
    }
}

/// Weighted two-class cross-entropy on logits, averaged over pixels.
pub fn wbce(g: &mut Graph, logits: Var, gt: &Tensor, weights: &Tensor, clamp: f64) -> Result<Var> {
    same_shape("wbce", g.shape(logits), gt.shape())?;
    same_shape("wbce", weights.shape(), gt.shape())?;
    let z = g.value(logits);
    let mut acc = 0.0;
    for ((&z, &y), &w) in z.data().iter().zip(gt.data()).zip(weights.data()) {
        let p = sigmoid(z).clamp(clamp, 1.0 - clamp);
        acc -= w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    let out = Tensor::scalar(acc / z.numel() as f64);
    g.custom(&[logits], out, Box::new(WbceOp { gt: gt.clone(), weights: weights.clone(), clamp }))
}

/// Sums of every `n×n` window fully inside an `h×w` plane, row-major over
/// the `(h-n+1)×(w-n+1)` window origins.
fn window_sums(x: &[f64], h: usize, w: usize, n: usize) -> Vec<f64> {
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = x[y * w + ox..y * w + ox + n].iter().sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (oy..oy + n).map(|y| rows[y * ow + ox]).sum();
        }
    }
    out
}

/// Adjoint of [`window_sums`]: every pixel receives the sum of the values of
/// the windows that contain it.
fn window_sums_adjoint(c: &[f64], h: usize, w: usize, n: usize) -> Vec<f64> {
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut cols = vec![0.0; h * ow];
    for y in 0..h {
        let lo = y.saturating_sub(n - 1);
        let hi = y.min(oh - 1);
        for ox in 0..ow {
            cols[y * ow + ox] = (lo..=hi).map(|oy| c[oy * ow + ox]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(n - 1);
            let hi = x.min(ow - 1);
            out[y * w + x] = cols[y * ow + lo..=y * ow + hi].iter().sum();
        }
    }
    out
}

/// Per-window SSIM pieces for one plane.
struct SsimWindows {
    s: Vec<f64>,
    /// Coefficients with `dS/dx_i = a + b·y_i + c·x_i` summed over windows.
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, n: usize, eps: f64, need_grad: bool) -> SsimWindows {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let [sx, sy, sxx, syy, sxy] = [x, y, &xx, &yy, &xy].map(|v| window_sums(v, h, w, n));
    let k = (n * n) as f64;
    let len = sx.len();
    let mut out = SsimWindows { s: Vec::with_capacity(len), a: Vec::new(), b: Vec::new(), c: Vec::new() };
    for i in 0..len {
        let (mx, my) = (sx[i] / k, sy[i] / k);
        let vx = sxx[i] / k - mx * mx;
        let vy = syy[i] / k - my * my;
        let cxy = sxy[i] / k - mx * my;
        let a = 2.0 * mx * my + eps;
        let b = 2.0 * cxy + eps;
        let c = mx * mx + my * my + eps;
        let d = vx + vy + eps;
        let s = a * b / (c * d);
        out.s.push(s);
        if need_grad {
            let ds_dmx = s * (2.0 * my / a - 2.0 * mx / c);
            let ds_dcxy = s * 2.0 / b;
            let ds_dvx = -s / d;
            out.a.push((ds_dmx - ds_dcxy * my - 2.0 * ds_dvx * mx) / k);
            out.b.push(ds_dcxy / k);
            out.c.push(2.0 * ds_dvx / k);
        }
    }
    out
}

#[derive(Debug)]
struct SsimOp {
    gt: Tensor,
    patch: usize,
    eps: f64,
}

fn planes(shape: &[usize]) -> (usize, usize, usize) {
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    (shape.iter().product::<usize>() / (h * w), h, w)
}

impl CustomOp for SsimOp {
    fn name(&self) -> &'static str {
        "ssim_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (np, h, w) = planes(x.shape());
        let n = self.patch;
        let windows = (np * (h - n + 1) * (w - n + 1)) as f64;
        let scale = -grad.item() / windows;
        let mut out = vec![0.0; x.numel()];
        for p in 0..np {
            let r = p * h * w..(p + 1) * h * w;
            let (xp, yp) = (&x.data()[r.clone()], &self.gt.data()[r.clone()]);
            let win = ssim_plane(xp, yp, h, w, n, self.eps, true);
            let a = window_sums_adjoint(&win.a, h, w, n);
            let b = window_sums_adjoint(&win.b, h, w, n);
            let c = window_sums_adjoint(&win.c, h, w, n);
            for (i, o) in out[r].iter_mut().enumerate() {
                *o = scale * (a[i] + b[i] * yp[i] + c[i] * xp[i]);
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), out).expect("shape"))]
    }
}

/// `1 - mean SSIM` over all dense `n×n` windows fully inside each plane.
pub fn ssim_loss(g: &mut Graph, prob: Var, gt: &Tensor, patch: usize, eps: f64) -> Result<Var> {
    same_shape("ssim_loss", g.shape(prob), gt.shape())?;
    let x = g.value(prob);
    if x.rank() < 2 {
        return invalid("ssim_loss", "expected an image batch");
    }
    let (np, h, w) = planes(x.shape());
    if h < patch || w < patch {
        return invalid("ssim_loss", format!("{h}x{w} map is smaller than the {patch}x{patch} patch"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..np {
        let r = p * h * w..(p + 1) * h * w;
        let win = ssim_plane(&x.data()[r.clone()], &gt.data()[r], h, w, patch, eps, false);
        count += win.s.len();
        total += win.s.iter().sum::<f64>();
    }
    let out = Tensor::scalar(1.0 - total / count as f64);
    g.custom(&[prob], out, Box::new(SsimOp { gt: gt.clone(), patch, eps }))
}

pub const SIOU_GUARD: f64 = 1e-8;

#[derive(Debug)]
struct SiouOp {
    gt: Tensor,
}

fn siou_parts(p: &[f64], g: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&p, &g) in p.iter().zip(g) {
        inter += p * g;
        union += p + g - p * g;
    }
    (inter, union + SIOU_GUARD)
}

impl CustomOp for SiouOp {
    fn name(&self) -> &'static str {
        "siou_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let p = inputs[0];
        let n = p.shape()[0];
        let per = p.numel() / n;
        let scale = -grad.item() / n as f64;
        let mut out = vec![0.0; p.numel()];
        for b in 0..n {
            let r = b * per..(b + 1) * per;
            let (pb, gb) = (&p.data()[r.clone()], &self.gt.data()[r.clone()]);
            let (i, u) = siou_parts(pb, gb);
            for (o, &g) in out[r].iter_mut().zip(gb) {
                *o = scale * (g / u - i * (1.0 - g) / (u * u));
            }
        }
        vec![Some(Tensor::new(p.shape().to_vec(), out).expect("shape"))]
    }
}

/// `1 - Σpg / Σ(p+g-pg)` per sample, averaged over the batch.
pub fn siou_loss(g: &mut Graph, prob: Var, gt: &Tensor) -> Result<Var> {
    same_shape("siou_loss", g.shape(prob), gt.shape())?;
    let p = g.value(prob);
    let n = p.shape()[0];
    let per = p.numel() / n;
    let mut total = 0.0;
    for b in 0..n {
        let r = b * per..(b + 1) * per;
        let (i, u) = siou_parts(&p.data()[r.clone()], &gt.data()[r]);
        total += 1.0 - i / u;
    }
    let out = Tensor::scalar(total / n as f64);
    g.custom(&[prob], out, Box::new(SiouOp { gt: gt.clone() }))
}

/// Values of the three terms for one output map.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TermValues {
    pub wbce: f64,
    pub ssim: f64,
    pub siou: f64,
}

impl TermValues {
    pub fn total(&self) -> f64 {
        self.wbce + self.ssim + self.siou
    }
}

/// Unweighted per-map terms, fused map first.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub fused: TermValues,
    pub sides: Vec<TermValues>,
    pub total: f64,
}

/// Sum of the three terms for one logit map, plus their values.
pub fn map_loss(g: &mut Graph, logits: Var, gt: &Tensor, weights: &Tensor, cfg: &LossConfig) -> Result<(Var, TermValues)> {
    let l1 = wbce(g, logits, gt, weights, cfg.prob_clamp)?;
    let p = g.sigmoid(logits)?;
    let l2 = ssim_loss(g, p, gt, cfg.ssim_patch, cfg.ssim_eps)?;
    let l3 = siou_loss(g, p, gt)?;
    let terms = TermValues { wbce: g.value(l1).item(), ssim: g.value(l2).item(), siou: g.value(l3).item() };
    let s = g.add(l1, l2)?;
    Ok((g.add(s, l3)?, terms))
}

/// Deeply supervised total `L(P^f) + Σ α_s L(P^s)`.
pub fn hybrid_loss(g: &mut Graph, outputs: &SideOutputs, gt: &Tensor, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if outputs.sides.len() != LEVELS {
        return invalid("hybrid_loss", format!("expected {LEVELS} side outputs, got {}", outputs.sides.len()));
    }
    let freq = match cfg.frequencies {
        FrequencySource::Batch => class_frequencies(gt)?,
        FrequencySource::Fixed(f) => f,
    };
    let weights = compute_weights(gt, freq, cfg.boundary_weight)?;
    let (mut total, fused) = map_loss(g, outputs.fused, gt, &weights, cfg)?;
    let mut sides = Vec::with_capacity(LEVELS);
    for (&side, &alpha) in outputs.sides.iter().zip(&cfg.alpha) {
        let (l, t) = map_loss(g, side, gt, &weights, cfg)?;
        let l = g.scale(l, alpha)?;
        total = g.add(total, l)?;
        sides.push(t);
    }
    let value = g.value(total).item();
    Ok((total, LossBreakdown { fused, sides, total: value }))
}
