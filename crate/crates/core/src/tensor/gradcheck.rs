//! Central-difference gradient oracle.
//!
//! The checked function rebuilds its graph from scratch on every evaluation,
//! so the numeric side never touches the recorded adjoints.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Floor of the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen elements per parameter.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: DEFAULT_STEP, tol: DEFAULT_TOL, max_elements: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub param: usize,
    pub checked: usize,
    /// Elements whose `±h` probes straddle a ReLU kink.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

impl GradCheck {
    pub fn with_tol(tol: f64) -> Self {
        GradCheck { tol, ..Self::default() }
    }

    /// Compares reverse-mode gradients of the scalar `f` against central
    /// differences `(f(θ+h) - f(θ-h)) / 2h` for every parameter tensor.
    /// Elements whose two probes land on different sides of a ReLU kink are
    /// skipped and counted. A breach of tolerance is reported, not raised.
    pub fn run<F>(&self, f: F, params: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        self.run_skipping(f, params, |_, _, _| false)
    }

    /// As [`GradCheck::run`], omitting elements for which
    /// `skip(param, element, value)` holds (e.g. kinks of piecewise ops).
    pub fn run_skipping<F, S>(&self, f: F, params: &[Tensor], skip: S) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
        S: Fn(usize, usize, f64) -> bool,
    {
        let analytic = analytic_grads(&f, params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut reports = Vec::with_capacity(params.len());
        let mut work: Vec<Tensor> = params.to_vec();
        for (pi, p) in params.iter().enumerate() {
            let n = p.numel();
            let elems: Vec<usize> = match self.max_elements {
                Some(k) if k < n => {
                    let mut v = sample(&mut rng, n, k).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..n).collect(),
            };
            let mut rep =
                ParamCheck { param: pi, checked: 0, skipped_kinks: 0, max_rel_error: 0.0, worst_element: 0, analytic: 0.0, numeric: 0.0 };
            for e in elems {
                let x0 = p.data()[e];
                if skip(pi, e, x0) {
                    continue;
                }
                work[pi].data_mut()[e] = x0 + self.step;
                let (fp, kp) = eval_scalar(&f, &work)?;
                work[pi].data_mut()[e] = x0 - self.step;
                let (fm, km) = eval_scalar(&f, &work)?;
                work[pi].data_mut()[e] = x0;
                if kp != km {
                    rep.skipped_kinks += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * self.step);
                let a = analytic[pi].data()[e];
                let err = relative_error(a, numeric);
                rep.checked += 1;
                if err > rep.max_rel_error || rep.checked == 1 {
                    rep.max_rel_error = err;
                    rep.worst_element = e;
                    rep.analytic = a;
                    rep.numeric = numeric;
                }
            }
            reports.push(rep);
        }
        Ok(GradCheckReport { tol: self.tol, params: reports })
    }
}

fn eval_scalar<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    Ok((v.item(), g.relu_pattern()))
}

/// Reverse-mode gradients of `f` at `params`; zeros where `f` does not
/// depend on a parameter.
pub fn analytic_grads<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars.iter().zip(params).map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()))).collect())
}
