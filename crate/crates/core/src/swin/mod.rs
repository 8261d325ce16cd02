//! Swin-style transformer primitives over token grids laid out `[N, h, w, C]`.
//!
//! Blocks alternate regular and cyclically shifted windows; in the shifted
//! case an additive mask keeps tokens that were not contiguous before the
//! shift from attending to each other.

use crate::nn::{Conv2d, Ctx, Group, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{invalid, Result, Tensor, Var};

/// Additive surrogate for `-inf` in attention masks.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct SwinStageConfig {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    /// Number of blocks; even, so regular and shifted windows pair up.
    pub depth: usize,
    pub mlp_ratio: usize,
    pub rel_bias: bool,
}

impl SwinStageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return invalid("swin", format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.depth % 2 != 0 {
            return invalid("swin", format!("depth {} must be even to pair W/SW blocks", self.depth));
        }
        if self.window == 0 || self.mlp_ratio == 0 {
            return invalid("swin", "window and mlp_ratio must be positive");
        }
        Ok(())
    }
}

/// Window geometry for one feature extent. Maps no larger than the window
/// use a single unshifted window covering the whole map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowLayout {
    pub fn new(h: usize, w: usize, window: usize, shifted: bool) -> Result<Self> {
        let (window, shift) = if h.min(w) <= window { (h.min(w), 0) } else { (window, if shifted { window / 2 } else { 0 }) };
        if window == 0 || h % window != 0 || w % window != 0 {
            return invalid("window_partition", format!("{h}x{w} map is not divisible into {window}x{window} windows"));
        }
        Ok(WindowLayout { h, w, window, shift })
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn num_windows(&self) -> usize {
        (self.h / self.window) * (self.w / self.window)
    }

    /// Connectivity-group id of every position of the shifted grid.
    pub fn group_ids(&self) -> Vec<usize> {
        let region = |i: usize, n: usize| {
            if i < n - self.window {
                0
            } else if i < n - self.shift {
                1
            } else {
                2
            }
        };
        let mut ids = Vec::with_capacity(self.h * self.w);
        for r in 0..self.h {
            for c in 0..self.w {
                ids.push(region(r, self.h) * 3 + region(c, self.w));
            }
        }
        ids
    }

    /// `[num_windows, T, T]` additive mask, or `None` without a shift.
    pub fn attention_mask(&self) -> Option<Tensor> {
        if self.shift == 0 {
            return None;
        }
        let ids = self.group_ids();
        let m = self.window;
        let t = self.tokens();
        let (nh, nw) = (self.h / m, self.w / m);
        let mut data = Vec::with_capacity(nh * nw * t * t);
        for wy in 0..nh {
            for wx in 0..nw {
                let win: Vec<usize> = (0..t).map(|k| ids[(wy * m + k / m) * self.w + wx * m + k % m]).collect();
                for a in &win {
                    for b in &win {
                        data.push(if a == b { 0.0 } else { MASK_NEG });
                    }
                }
            }
        }
        Some(Tensor::new(vec![nh * nw, t, t], data).expect("mask shape"))
    }
}

fn grid_shape(ctx: &Ctx, x: Var) -> Result<[usize; 4]> {
    let s = ctx.g.shape(x);
    if s.len() != 4 {
        return invalid("swin", format!("expected [N,h,w,C] tokens, got {s:?}"));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// `[N,h,w,C] -> [N·nw, M·M, C]`, cyclically shifting first when the layout
/// is shifted.
pub fn window_partition(ctx: &mut Ctx, x: Var, layout: &WindowLayout) -> Result<Var> {
    let [n, h, w, c] = grid_shape(ctx, x)?;
    if (h, w) != (layout.h, layout.w) {
        return invalid("window_partition", format!("layout is {}x{}, input {h}x{w}", layout.h, layout.w));
    }
    let m = layout.window;
    let s = layout.shift as isize;
    let x = if s > 0 { ctx.g.roll2d(x, (1, 2), (-s, -s))? } else { x };
    let x = ctx.g.reshape(x, &[n, h / m, m, w / m, m, c])?;
    let x = ctx.g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    ctx.g.reshape(x, &[n * layout.num_windows(), m * m, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(ctx: &mut Ctx, windows: Var, layout: &WindowLayout, n: usize) -> Result<Var> {
    let c = *ctx.g.shape(windows).last().unwrap_or(&0);
    let m = layout.window;
    let (h, w) = (layout.h, layout.w);
    let x = ctx.g.reshape(windows, &[n, h / m, w / m, m, m, c])?;
    let x = ctx.g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = ctx.g.reshape(x, &[n, h, w, c])?;
    let s = layout.shift as isize;
    if s > 0 {
        ctx.g.roll2d(x, (1, 2), (s, s))
    } else {
        Ok(x)
    }
}

/// Multi-head self-attention within windows of `T = M²` tokens.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub rel_bias: Option<ParamId>,
    rel_index: Vec<usize>,
    pub heads: usize,
    pub window: usize,
}

/// Index into the `(2M-1)²` relative-offset table for every token pair.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let t = m * m;
    let mut idx = Vec::with_capacity(t * t);
    for a in 0..t {
        for b in 0..t {
            let dy = (a / m) as isize - (b / m) as isize + m as isize - 1;
            let dx = (a % m) as isize - (b % m) as isize + m as isize - 1;
            idx.push(dy as usize * (2 * m - 1) + dx as usize);
        }
    }
    idx
}

impl WindowAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, window: usize, rel_bias: bool, group: Group) -> Self {
        let q = Linear::new(store, &format!("{name}.q"), dim, dim, true, group);
        let k = Linear::new(store, &format!("{name}.k"), dim, dim, true, group);
        let v = Linear::new(store, &format!("{name}.v"), dim, dim, true, group);
        let proj = Linear::new(store, &format!("{name}.proj"), dim, dim, true, group);
        let span = 2 * window - 1;
        let rel_bias = rel_bias.then(|| store.trunc_normal(format!("{name}.rel_bias"), &[span * span, heads], 0.02, group));
        WindowAttention { q, k, v, proj, rel_bias, rel_index: relative_position_index(window), heads, window }
    }

    /// Output and attention weights `[B, heads, T, T]`.
    pub fn forward_with_weights(&self, ctx: &mut Ctx, x: Var, mask: Option<&Tensor>) -> Result<(Var, Var)> {
        let s = ctx.g.shape(x).to_vec();
        if s.len() != 3 {
            return invalid("window_mhsa", format!("expected [B,T,C], got {s:?}"));
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        if t != self.window * self.window || c % self.heads != 0 {
            return invalid("window_mhsa", format!("{t} tokens of width {c} do not fit window {} with {} heads", self.window, self.heads));
        }
        let hd = c / self.heads;
        let q = self.q.forward(ctx, x)?;
        let q = ctx.g.reshape(q, &[b, t, self.heads, hd])?;
        let q = ctx.g.permute(q, &[0, 2, 1, 3])?;
        let k = self.k.forward(ctx, x)?;
        let k = ctx.g.reshape(k, &[b, t, self.heads, hd])?;
        let kt = ctx.g.permute(k, &[0, 2, 3, 1])?;
        let v = self.v.forward(ctx, x)?;
        let v = ctx.g.reshape(v, &[b, t, self.heads, hd])?;
        let v = ctx.g.permute(v, &[0, 2, 1, 3])?;

        let logits = ctx.g.matmul(q, kt)?;
        let mut logits = ctx.g.scale(logits, 1.0 / (hd as f64).sqrt())?;
        if let Some(table) = self.rel_bias {
            let table = ctx.p(table);
            let bias = ctx.g.gather_rows(table, &self.rel_index)?;
            let bias = ctx.g.reshape(bias, &[t, t, self.heads])?;
            let bias = ctx.g.permute(bias, &[2, 0, 1])?;
            logits = ctx.g.add(logits, bias)?;
        }
        if let Some(mask) = mask {
            let ms = mask.shape();
            if ms.len() != 3 || ms[1] != t || ms[2] != t || b % ms[0] != 0 {
                return invalid("window_mhsa", format!("mask {ms:?} does not match {b} windows of {t} tokens"));
            }
            let nw = ms[0];
            let mv = ctx.g.constant(mask.clone().reshape(&[nw, 1, t, t])?);
            let l = ctx.g.reshape(logits, &[b / nw, nw, self.heads, t, t])?;
            let l = ctx.g.add(l, mv)?;
            logits = ctx.g.reshape(l, &[b, self.heads, t, t])?;
        }
        let attn = ctx.g.softmax(logits, 3)?;
        let out = ctx.g.matmul(attn, v)?;
        let out = ctx.g.permute(out, &[0, 2, 1, 3])?;
        let out = ctx.g.reshape(out, &[b, t, c])?;
        Ok((self.proj.forward(ctx, out)?, attn))
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, x, mask)?.0)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, group: Group) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, group),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, group),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.g.gelu(h)?;
        self.fc2.forward(ctx, h)
    }
}

/// One pre-norm transformer block: windowed attention residual followed by
/// MLP residual.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub layout: WindowLayout,
    mask: Option<Tensor>,
}

impl SwinBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &SwinStageConfig, layout: WindowLayout, group: Group) -> Self {
        SwinBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim, group),
            attn: WindowAttention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads, layout.window, cfg.rel_bias, group),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim, group),
            mlp: Mlp::new(store, &format!("{name}.mlp"), cfg.dim, cfg.dim * cfg.mlp_ratio, group),
            mask: layout.attention_mask(),
            layout,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let [n, ..] = grid_shape(ctx, x)?;
        let y = self.norm1.forward(ctx, x)?;
        let win = window_partition(ctx, y, &self.layout)?;
        let win = self.attn.forward(ctx, win, self.mask.as_ref())?;
        let y = window_reverse(ctx, win, &self.layout, n)?;
        let x = ctx.g.add(x, y)?;
        let y = self.norm2.forward(ctx, x)?;
        let y = self.mlp.forward(ctx, y)?;
        ctx.g.add(x, y)
    }
}

/// A stack of blocks alternating regular and shifted windows at a fixed
/// `h×w` resolution. A stage of depth 2 is one W/SW block pair.
#[derive(Debug, Clone)]
pub struct SwinStage {
    pub blocks: Vec<SwinBlock>,
}

impl SwinStage {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &SwinStageConfig, h: usize, w: usize, group: Group) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let layout = WindowLayout::new(h, w, cfg.window, i % 2 == 1)?;
            blocks.push(SwinBlock::new(store, &format!("{name}.{i}"), cfg, layout, group));
        }
        Ok(SwinStage { blocks })
    }

    pub fn forward(&self, ctx: &mut Ctx, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// Non-overlapping 4×4 patch projection, `[N,3,H,W] -> [N,H/4,W/4,dim]`.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub norm: LayerNorm,
    pub patch: usize,
}

pub const PATCH: usize = 4;

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, dim: usize, group: Group) -> Self {
        PatchEmbed {
            proj: Conv2d::new(store, &format!("{name}.proj"), in_ch, dim, PATCH, PATCH, 0, true, group),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim, group),
            patch: PATCH,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, img: Var) -> Result<Var> {
        let s = ctx.g.shape(img).to_vec();
        if s.len() != 4 || s[2] % self.patch != 0 || s[3] % self.patch != 0 {
            return invalid("patch_embed", format!("image {s:?} is not divisible into {0}x{0} patches", self.patch));
        }
        let x = self.proj.forward(ctx, img)?;
        let x = ctx.g.permute(x, &[0, 2, 3, 1])?;
        self.norm.forward(ctx, x)
    }
}

/// 2× downsampling: concatenates each 2×2 neighborhood (4C), normalizes,
/// and projects to 2C.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: Group) -> Self {
        PatchMerge {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim, group),
            reduction: Linear::new(store, &format!("{name}.reduction"), 4 * dim, 2 * dim, false, group),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let [n, h, w, c] = grid_shape(ctx, x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return invalid("patch_merge", format!("odd extent {h}x{w}"));
        }
        let x = ctx.g.reshape(x, &[n, h / 2, 2, w / 2, 2, c])?;
        let x = ctx.g.permute(x, &[0, 1, 3, 4, 2, 5])?;
        let x = ctx.g.reshape(x, &[n, h / 2, w / 2, 4 * c])?;
        let x = self.norm.forward(ctx, x)?;
        self.reduction.forward(ctx, x)
    }
}

/// 2× upsampling: projects C to 4C and spreads each token's four C-slices
/// over a 2×2 block (row-major within the block).
#[derive(Debug, Clone)]
pub struct PatchUnmerge {
    pub expand: Linear,
}

impl PatchUnmerge {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: Group) -> Self {
        PatchUnmerge { expand: Linear::new(store, &format!("{name}.expand"), dim, 4 * dim, false, group) }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let [n, h, w, c] = grid_shape(ctx, x)?;
        let x = self.expand.forward(ctx, x)?;
        let x = ctx.g.reshape(x, &[n, h, w, 2, 2, c])?;
        let x = ctx.g.permute(x, &[0, 1, 3, 2, 4, 5])?;
        ctx.g.reshape(x, &[n, 2 * h, 2 * w, c])
    }
}

/// `[N,h,w,C] -> [N,C,h,w]`.
pub fn tokens_to_nchw(ctx: &mut Ctx, x: Var) -> Result<Var> {
    ctx.g.permute(x, &[0, 3, 1, 2])
}

/// `[N,C,h,w] -> [N,h,w,C]`.
pub fn nchw_to_tokens(ctx: &mut Ctx, x: Var) -> Result<Var> {
    ctx.g.permute(x, &[0, 2, 3, 1])
}
