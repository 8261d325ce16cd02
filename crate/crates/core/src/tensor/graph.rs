use super::kernels::{self, ConvGeom};
use super::{invalid, strides, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation defined outside this module. The node's forward value is
/// computed by the caller; only the adjoint is delegated here.
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;

    /// One optional gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel batch statistics produced by a train-mode batch norm.
/// `var` is the biased estimate used for normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Option<Vec<usize>>),
    Sub(Var, Var, Option<Vec<usize>>),
    Mul(Var, Var, Option<Vec<usize>>),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        train: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_channels: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        // geometry of the adjoint convolution (output plane -> input plane)
        geom: ConvGeom,
        in_channels: usize,
    },
    PoolContrast {
        x: Var,
        m: usize,
    },
    SumChannel(Var),
    GlobalAvgPool(Var),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Roll2d {
        x: Var,
        axes: (usize, usize),
        shift: (isize, isize),
    },
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Record of executed primitives. Nodes are appended in execution order,
/// which is a topological order of the computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT2))
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x * INV_SQRT2)) + x * pdf
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Which side of zero every ReLU input lies on. Two evaluations with
    /// equal patterns lie on the same smooth piece of the computation.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(x) = n.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    /// Registers a node whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(name, output, Op::Custom(inputs.to_vec(), op), inputs)
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<(Tensor, Option<Vec<usize>>)> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok((Tensor::new(av.shape().to_vec(), data)?, None));
        }
        let map = kernels::broadcast_map(av.shape(), bv.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            a: av.shape().to_vec(),
            b: bv.shape().to_vec(),
        })?;
        let bd = bv.data();
        let data = av.data().iter().zip(&map).map(|(&x, &j)| f(x, bd[j])).collect();
        Ok((Tensor::new(av.shape().to_vec(), data)?, Some(map)))
    }

    /// `a + b`, with `b` broadcast against `a` along size-1 or missing leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b, map), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b, map), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b, map), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        self.push("scale", t, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push("relu", t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(x), &[x])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu);
        self.push("gelu", t, Op::Gelu(x), &[x])
    }

    // ---- linear algebra ------------------------------------------------

    /// Matrix product over the last two axes. `a: [.., m, k]`; `b` is either
    /// `[k, n]` (shared across the batch) or `[.., k, n]` with the same
    /// leading axes as `a`. A rank-1 `a` is not accepted.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch { op: "matmul", a: ash.clone(), b: bsh.clone() };
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead = &ash[..ash.len() - 2];
        let b_batched = bsh.len() > 2;
        if b_batched && &bsh[..bsh.len() - 2] != lead {
            return Err(mismatch());
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                let bs = if b_batched { &bd[i * k * n..(i + 1) * k * n] } else { bd };
                kernels::gemm_nn(&ad[i * m * k..(i + 1) * m * k], bs, &mut out[i * m * n..(i + 1) * m * n], m, k, n);
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(shape, out)?;
        self.push("matmul", t, Op::MatMul { a, b, batch, b_batched, m, k, n }, &[a, b])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if axis >= sh.len() {
            return Err(TensorError::InvalidAxis { op: "softmax", axis, rank: sh.len() });
        }
        let outer: usize = sh[..axis].iter().product();
        let len = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(xd[base + j * inner]);
                }
                let mut s = 0.0;
                for j in 0..len {
                    let e = (xd[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= s;
                }
            }
        }
        let t = Tensor::new(sh, out)?;
        self.push("softmax", t, Op::Softmax { x, outer, len, inner }, &[x])
    }

    // ---- normalization -------------------------------------------------

    /// Normalizes over the last axis, then applies `gamma`, `beta` (both `[D]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let d = *sh.last().ok_or_else(|| TensorError::InvalidAxis { op: "layer_norm", axis: 0, rank: 0 })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch { op: "layer_norm", a: sh, b: self.shape(gamma).to_vec() });
        }
        if eps <= 0.0 {
            return invalid("layer_norm", "eps must be positive");
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let t = Tensor::new(sh, out)?;
        self.push("layer_norm", t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Batch normalization of `[N,C,H,W]` per channel. Train mode normalizes
    /// with batch statistics and returns them so the caller can update its
    /// running estimates; eval mode uses `running_mean`/`running_var`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        mode: BatchNormMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 4 {
            return invalid("batch_norm", format!("expected rank-4 input, got {sh:?}"));
        }
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ShapeMismatch { op: "batch_norm", a: sh, b: self.shape(gamma).to_vec() });
        }
        let hw = h * w;
        let count = n * hw;
        if mode == BatchNormMode::Train && count == 1 {
            return invalid("batch_norm", "train mode needs more than one value per channel");
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        match mode {
            BatchNormMode::Train => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut v = 0.0;
                    for b in 0..n {
                        v += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = v / count as f64;
                }
            }
            BatchNormMode::Eval => {
                mean.copy_from_slice(running_mean);
                var.copy_from_slice(running_var);
            }
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let hv = (xd[i] - mean[ch]) * rstd[ch];
                    xhat[i] = hv;
                    out[i] = hv * gd[ch] + bd[ch];
                }
            }
        }
        let t = Tensor::new(sh, out)?;
        let train = mode == BatchNormMode::Train;
        let v = self.push("batch_norm", t, Op::BatchNorm { x, gamma, beta, xhat, rstd, train }, &[x, gamma, beta])?;
        let stats = train.then_some(BatchStats { mean, var, count });
        Ok((v, stats))
    }

    // ---- convolution -------------------------------------------------

    /// Cross-correlation of `x: [N,Cin,H,W]` with `w: [Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let mismatch = || TensorError::ShapeMismatch { op: "conv2d", a: xs.clone(), b: ws.clone() };
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(mismatch());
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(mismatch());
            }
        }
        if stride == 0 {
            return invalid("conv2d", "stride must be at least 1");
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let out_h = conv_extent("conv2d", h, kh, stride, pad)?;
        let out_w = conv_extent("conv2d", wd, kw, stride, pad)?;
        let geom = ConvGeom { channels: cin, h, w: wd, kh, kw, stride, pad, out_h, out_w };
        let plane = out_h * out_w;
        let mut out = vec![0.0; n * cout * plane];
        {
            let xd = self.value(x).data();
            let wdata = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            let mut cols = vec![0.0; geom.cols_rows() * plane];
            for s in 0..n {
                kernels::im2col(&xd[s * cin * h * wd..(s + 1) * cin * h * wd], &geom, &mut cols);
                let o = &mut out[s * cout * plane..(s + 1) * cout * plane];
                if let Some(bias) = bias {
                    for (co, chunk) in o.chunks_mut(plane).enumerate() {
                        chunk.fill(bias[co]);
                    }
                }
                kernels::gemm_nn(wdata, &cols, o, cout, geom.cols_rows(), plane);
            }
        }
        let t = Tensor::new(vec![n, cout, out_h, out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom, out_channels: cout }, &inputs)
    }

    /// Transposed convolution of `x: [N,Cin,H,W]` with `w: [Cin,Cout,kh,kw]`;
    /// output extent `(H-1)·stride - 2·pad + kh`. This is exactly the adjoint
    /// of [`Graph::conv2d`] with the same weight tensor.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let mismatch = || TensorError::ShapeMismatch { op: "conv_transpose2d", a: xs.clone(), b: ws.clone() };
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(mismatch());
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(mismatch());
            }
        }
        if stride == 0 {
            return invalid("conv_transpose2d", "stride must be at least 1");
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let full_h = (h - 1) * stride + kh;
        let full_w = (wd - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return invalid("conv_transpose2d", "padding consumes the whole output");
        }
        let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
        // the forward conv this transposes maps [Cout,oh,ow] -> [Cin,h,w]
        let geom = ConvGeom { channels: cout, h: oh, w: ow, kh, kw, stride, pad, out_h: h, out_w: wd };
        if conv_extent("conv_transpose2d", oh, kh, stride, pad)? != h || conv_extent("conv_transpose2d", ow, kw, stride, pad)? != wd {
            return invalid("conv_transpose2d", "inconsistent geometry");
        }
        let plane_in = h * wd;
        let plane_out = oh * ow;
        let mut out = vec![0.0; n * cout * plane_out];
        {
            let xd = self.value(x).data();
            let wdata = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            let rows = geom.cols_rows();
            let mut cols = vec![0.0; rows * plane_in];
            for s in 0..n {
                cols.fill(0.0);
                // cols = Wᵀ · x, with W viewed as [Cin, Cout·kh·kw]
                kernels::gemm_tn(wdata, &xd[s * cin * plane_in..(s + 1) * cin * plane_in], &mut cols, rows, cin, plane_in);
                let o = &mut out[s * cout * plane_out..(s + 1) * cout * plane_out];
                if let Some(bias) = bias {
                    for (co, chunk) in o.chunks_mut(plane_out).enumerate() {
                        chunk.fill(bias[co]);
                    }
                }
                kernels::col2im(&cols, &geom, o);
            }
        }
        let t = Tensor::new(vec![n, cout, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv_transpose2d", t, Op::ConvTranspose2d { x, w, b, geom, in_channels: cin }, &inputs)
    }

    /// `x - AvgPool_m(x)` with stride 1, same-size output, and averages taken
    /// over in-bounds elements only.
    pub fn avg_pool_contrast(&mut self, x: Var, m: usize) -> Result<Var> {
        if m == 0 || m % 2 == 0 {
            return invalid("avg_pool_contrast", format!("window must be odd and positive, got {m}"));
        }
        let sh = self.shape(x).to_vec();
        if sh.len() != 4 {
            return invalid("avg_pool_contrast", format!("expected rank-4 input, got {sh:?}"));
        }
        let (h, w) = (sh[2], sh[3]);
        let planes = sh[0] * sh[1];
        let xd = self.value(x).data();
        let mut pooled = vec![0.0; xd.len()];
        kernels::box_average(xd, planes, h, w, m, &mut pooled);
        let out: Vec<f64> = xd.iter().zip(&pooled).map(|(a, b)| a - b).collect();
        let t = Tensor::new(sh, out)?;
        self.push("avg_pool_contrast", t, Op::PoolContrast { x, m }, &[x])
    }

    // ---- reductions ----------------------------------------------------

    fn rank4(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        let sh = self.shape(x);
        if sh.len() != 4 {
            return invalid(op, format!("expected rank-4 input, got {sh:?}"));
        }
        Ok([sh[0], sh[1], sh[2], sh[3]])
    }

    /// `[N,C,H,W] -> [N,1,H,W]`.
    pub fn sum_channel(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4("sum_channel", x)?;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        for b in 0..n {
            for ch in 0..c {
                let src = &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (o, v) in out[b * hw..(b + 1) * hw].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let t = Tensor::new(vec![n, 1, h, w], out)?;
        self.push("sum_channel", t, Op::SumChannel(x), &[x])
    }

    /// `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4("global_avg_pool", x)?;
        let hw = h * w;
        let xd = self.value(x).data();
        let out = (0..n * c).map(|i| xd[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let t = Tensor::new(vec![n, c, 1, 1], out)?;
        self.push("global_avg_pool", t, Op::GlobalAvgPool(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    // ---- index remapping -----------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let mut seen = vec![false; sh.len()];
        if axes.len() != sh.len() || axes.iter().any(|&a| a >= sh.len() || std::mem::replace(&mut seen[a], true)) {
            return invalid("permute", format!("{axes:?} is not a permutation of rank {}", sh.len()));
        }
        let map = kernels::permute_map(&sh, axes);
        let xd = self.value(x).data();
        let out = map.iter().map(|&i| xd[i]).collect();
        let t = Tensor::new(axes.iter().map(|&a| sh[a]).collect(), out)?;
        self.push("permute", t, Op::Permute(x, axes.to_vec()), &[x])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| TensorError::Invalid { op: "concat", msg: "no inputs".into() })?).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis { op: "concat", axis, rank: first.len() });
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(TensorError::ShapeMismatch { op: "concat", a: first.clone(), b: s.to_vec() });
            }
            widths.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &wdt) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[o * wdt..(o + 1) * wdt]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        self.push("concat", t, Op::Concat { parts: parts.to_vec(), outer, widths }, parts)
    }

    /// Channel concatenation of `[N,C_i,H,W]` tensors.
    pub fn concat_channel(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 1)
    }

    /// Cyclic shift along two axes: `out[(i + dy) mod h, (j + dx) mod w] = in[i, j]`.
    pub fn roll2d(&mut self, x: Var, axes: (usize, usize), shift: (isize, isize)) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if axes.0 >= sh.len() || axes.1 >= sh.len() || axes.0 == axes.1 {
            return Err(TensorError::InvalidAxis { op: "roll2d", axis: axes.0.max(axes.1), rank: sh.len() });
        }
        let out = roll_data(self.value(x).data(), &sh, axes, shift);
        let t = Tensor::new(sh, out)?;
        self.push("roll2d", t, Op::Roll2d { x, axes, shift }, &[x])
    }

    /// Selects rows of a `[R, K]` table: output `[index.len(), K]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let sh = self.shape(table).to_vec();
        if sh.len() != 2 || index.iter().any(|&i| i >= sh[0]) {
            return invalid("gather_rows", format!("bad index for table {sh:?}"));
        }
        let k = sh[1];
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * k);
        for &i in index {
            out.extend_from_slice(&td[i * k..(i + 1) * k]);
        }
        let t = Tensor::new(vec![index.len(), k], out)?;
        self.push("gather_rows", t, Op::GatherRows { table, index: index.to_vec() }, &[table])
    }

    // ---- reverse pass --------------------------------------------------

    /// Propagates adjoints of the scalar `loss` to every leaf that requires
    /// a gradient. Gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (v, contrib) in self.local_adjoints(i, &g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_adjoints(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data).expect("adjoint shape");
        let reduce_b = |b: Var, map: &Option<Vec<usize>>, gb: Vec<f64>| -> Tensor {
            match map {
                None => like(b, gb),
                Some(map) => {
                    let mut acc = vec![0.0; val(b).numel()];
                    for (&j, v) in map.iter().zip(gb) {
                        acc[j] += v;
                    }
                    like(b, acc)
                }
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b, map) => vec![(*a, g.clone()), (*b, reduce_b(*b, map, gd.to_vec()))],
            Op::Sub(a, b, map) => vec![(*a, g.clone()), (*b, reduce_b(*b, map, gd.iter().map(|v| -v).collect()))],
            Op::Mul(a, b, map) => {
                let ad = val(*a).data();
                let bd = val(*b).data();
                let bval = |k: usize| match map {
                    None => bd[k],
                    Some(m) => bd[m[k]],
                };
                let ga = (0..gd.len()).map(|k| gd[k] * bval(k)).collect();
                let gb = gd.iter().zip(ad).map(|(g, a)| g * a).collect();
                vec![(*a, like(*a, ga)), (*b, reduce_b(*b, map, gb))]
            }
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * s))],
            Op::Relu(x) => {
                let xd = val(*x).data();
                vec![(*x, like(*x, gd.iter().zip(xd).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()))]
            }
            Op::Sigmoid(x) => {
                let yd = node.value.data();
                vec![(*x, like(*x, gd.iter().zip(yd).map(|(g, y)| g * y * (1.0 - y)).collect()))]
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                vec![(*x, like(*x, gd.iter().zip(xd).map(|(g, &x)| g * gelu_grad(x)).collect()))]
            }
            Op::MatMul { a, b, batch, b_batched, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = val(*a).data();
                let bd = val(*b).data();
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                for s in 0..*batch {
                    let gs = &gd[s * m * n..(s + 1) * m * n];
                    let (bs, gbs) = if *b_batched { (&bd[s * k * n..(s + 1) * k * n], s * k * n) } else { (bd, 0) };
                    kernels::gemm_nt(gs, bs, &mut ga[s * m * k..(s + 1) * m * k], m, n, k);
                    kernels::gemm_tn(&ad[s * m * k..(s + 1) * m * k], gs, &mut gb[gbs..gbs + k * n], k, m, n);
                }
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Softmax { x, outer, len, inner } => {
                let yd = node.value.data();
                let mut gx = vec![0.0; yd.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..*len {
                            dot += yd[base + j * inner] * gd[base + j * inner];
                        }
                        for j in 0..*len {
                            let k = base + j * inner;
                            gx[k] = yd[k] * (gd[k] - dot);
                        }
                    }
                }
                vec![(*x, like(*x, gx))]
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = val(*gamma).data();
                let d = gam.len();
                let rows = xhat.len() / d;
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; d];
                let mut gbt = vec![0.0; d];
                for r in 0..rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let k = r * d + j;
                        let dh = gd[k] * gam[j];
                        m1 += dh;
                        m2 += dh * xhat[k];
                        gg[j] += gd[k] * xhat[k];
                        gbt[j] += gd[k];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let k = r * d + j;
                        gx[k] = rstd[r] * (gd[k] * gam[j] - m1 - xhat[k] * m2);
                    }
                }
                vec![(*x, like(*x, gx)), (*gamma, like(*gamma, gg)), (*beta, like(*beta, gbt))]
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let sh = val(*x).shape();
                let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
                let gam = val(*gamma).data();
                let count = (n * hw) as f64;
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; c];
                let mut gbt = vec![0.0; c];
                for ch in 0..c {
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for k in base..base + hw {
                            gg[ch] += gd[k] * xhat[k];
                            gbt[ch] += gd[k];
                        }
                    }
                    let (m1, m2) = if *train { (gbt[ch] * gam[ch] / count, gg[ch] * gam[ch] / count) } else { (0.0, 0.0) };
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for k in base..base + hw {
                            gx[k] = rstd[ch] * (gd[k] * gam[ch] - m1 - xhat[k] * m2);
                        }
                    }
                }
                vec![(*x, like(*x, gx)), (*gamma, like(*gamma, gg)), (*beta, like(*beta, gbt))]
            }
            Op::Conv2d { x, w, b, geom, out_channels } => {
                let cout = *out_channels;
                let xd = val(*x).data();
                let wd = val(*w).data();
                let n = val(*x).shape()[0];
                let plane = geom.cols_len();
                let rows = geom.cols_rows();
                let in_sz = geom.channels * geom.h * geom.w;
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut cols = vec![0.0; rows * plane];
                let mut dcols = vec![0.0; rows * plane];
                for s in 0..n {
                    let gs = &gd[s * cout * plane..(s + 1) * cout * plane];
                    kernels::im2col(&xd[s * in_sz..(s + 1) * in_sz], geom, &mut cols);
                    kernels::gemm_nt(gs, &cols, &mut gw, cout, plane, rows);
                    dcols.fill(0.0);
                    kernels::gemm_tn(wd, gs, &mut dcols, rows, cout, plane);
                    kernels::col2im(&dcols, geom, &mut gx[s * in_sz..(s + 1) * in_sz]);
                }
                let mut out = vec![(*x, like(*x, gx)), (*w, like(*w, gw))];
                if let Some(b) = b {
                    out.push((*b, like(*b, channel_sums(gd, n, cout, plane))));
                }
                out
            }
            Op::ConvTranspose2d { x, w, b, geom, in_channels } => {
                let cin = *in_channels;
                let cout = geom.channels;
                let xd = val(*x).data();
                let wd = val(*w).data();
                let n = val(*x).shape()[0];
                let plane_in = geom.cols_len();
                let plane_out = geom.h * geom.w;
                let rows = geom.cols_rows();
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut cols = vec![0.0; rows * plane_in];
                for s in 0..n {
                    kernels::im2col(&gd[s * cout * plane_out..(s + 1) * cout * plane_out], geom, &mut cols);
                    let xs = &xd[s * cin * plane_in..(s + 1) * cin * plane_in];
                    kernels::gemm_nn(wd, &cols, &mut gx[s * cin * plane_in..(s + 1) * cin * plane_in], cin, rows, plane_in);
                    kernels::gemm_nt(xs, &cols, &mut gw, cin, plane_in, rows);
                }
                let mut out = vec![(*x, like(*x, gx)), (*w, like(*w, gw))];
                if let Some(b) = b {
                    out.push((*b, like(*b, channel_sums(gd, n, cout, plane_out))));
                }
                out
            }
            Op::PoolContrast { x, m } => {
                let sh = val(*x).shape();
                let (h, w) = (sh[2], sh[3]);
                let mut gx = gd.to_vec();
                let mut pooled = vec![0.0; gd.len()];
                kernels::box_average_adjoint(gd, sh[0] * sh[1], h, w, *m, &mut pooled);
                for (a, p) in gx.iter_mut().zip(pooled) {
                    *a -= p;
                }
                vec![(*x, like(*x, gx))]
            }
            Op::SumChannel(x) => {
                let sh = val(*x).shape();
                let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
                let mut gx = vec![0.0; n * c * hw];
                for b in 0..n {
                    for ch in 0..c {
                        gx[(b * c + ch) * hw..(b * c + ch + 1) * hw].copy_from_slice(&gd[b * hw..(b + 1) * hw]);
                    }
                }
                vec![(*x, like(*x, gx))]
            }
            Op::GlobalAvgPool(x) => {
                let sh = val(*x).shape();
                let hw = sh[2] * sh[3];
                let gx = (0..val(*x).numel()).map(|k| gd[k / hw] / hw as f64).collect();
                vec![(*x, like(*x, gx))]
            }
            Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).shape(), gd[0]))],
            Op::MeanAll(x) => {
                let n = val(*x).numel() as f64;
                vec![(*x, Tensor::full(val(*x).shape(), gd[0] / n))]
            }
            Op::Reshape(x) => vec![(*x, like(*x, gd.to_vec()))],
            Op::Permute(x, axes) => {
                let map = kernels::permute_map(val(*x).shape(), axes);
                let mut gx = vec![0.0; gd.len()];
                for (k, &src) in map.iter().enumerate() {
                    gx[src] = gd[k];
                }
                vec![(*x, like(*x, gx))]
            }
            Op::Concat { parts, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for (&p, &wdt) in parts.iter().zip(widths) {
                    let mut gp = Vec::with_capacity(outer * wdt);
                    for o in 0..*outer {
                        gp.extend_from_slice(&gd[o * row + off..o * row + off + wdt]);
                    }
                    off += wdt;
                    out.push((p, like(p, gp)));
                }
                out
            }
            Op::Roll2d { x, axes, shift } => {
                let gx = roll_data(gd, val(*x).shape(), *axes, (-shift.0, -shift.1));
                vec![(*x, like(*x, gx))]
            }
            Op::GatherRows { table, index } => {
                let k = val(*table).shape()[1];
                let mut gt = vec![0.0; val(*table).numel()];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..k {
                        gt[i * k + j] += gd[r * k + j];
                    }
                }
                vec![(*table, like(*table, gt))]
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grads = op.backward(&ins, &node.value, g);
                inputs.iter().zip(grads).filter_map(|(&v, g)| g.map(|g| (v, g))).collect()
            }
        }
    }
}

fn conv_extent(op: &'static str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k || (padded - k) % stride != 0 {
        return invalid(op, format!("extent {size} with kernel {k}, stride {stride}, pad {pad} is not integral"));
    }
    Ok((padded - k) / stride + 1)
}

fn channel_sums(g: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += g[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
        }
    }
    out
}

fn roll_data(data: &[f64], shape: &[usize], axes: (usize, usize), shift: (isize, isize)) -> Vec<f64> {
    let st = strides(shape);
    let (ha, wa) = axes;
    let (h, w) = (shape[ha] as isize, shape[wa] as isize);
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; shape.len()];
    for (k, &v) in data.iter().enumerate() {
        let mut rem = k;
        for (ax, s) in st.iter().enumerate() {
            idx[ax] = rem / s;
            rem %= s;
        }
        let ny = (idx[ha] as isize + shift.0).rem_euclid(h) as usize;
        let nx = (idx[wa] as isize + shift.1).rem_euclid(w) as usize;
        let dst = k - idx[ha] * st[ha] - idx[wa] * st[wa] + ny * st[ha] + nx * st[wa];
        out[dst] = v;
    }
    out
}
