//! The change-detection network: a weight-shared Swin encoder over both
//! acquisition dates, sum/difference contrast enhancement, attention-gated
//! fusion per level, a top-down transformer decoder, and deeply supervised
//! side heads fused into the final prediction.
//!
//! Feature maps between modules are `[N, C, h, w]`; inside transformer
//! stages they are token grids `[N, h, w, C]`.

use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Ctx, Group, LayerNorm, ParamId, ParamStore};
use crate::swin::{nchw_to_tokens, tokens_to_nchw, PatchEmbed, PatchMerge, PatchUnmerge, SwinStage, SwinStageConfig, WindowLayout, PATCH};
use crate::tensor::{invalid, Result, Tensor, Var};

pub const LEVELS: usize = 5;

/// Total downsampling of the coarsest level relative to the input.
pub const MAX_STRIDE: usize = PATCH << (LEVELS - 1);

/// How side features are brought back to input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// One learned transposed convolution per level (kernel 2s, stride s).
    Deconv,
    /// Learned 1×1 projection followed by fixed bilinear upsampling.
    Bilinear,
}

impl std::str::FromStr for HeadKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "deconv" => Ok(HeadKind::Deconv),
            "bilinear" => Ok(HeadKind::Bilinear),
            _ => Err(format!("unknown head kind {s:?} (expected deconv or bilinear)")),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Deconv => "deconv",
            HeadKind::Bilinear => "bilinear",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Uniform channel width `C` after projection; also the width of the
    /// first encoder stage.
    pub base_dim: usize,
    /// Encoder blocks per level (each even).
    pub stage_depths: [usize; LEVELS],
    pub stage_heads: [usize; LEVELS],
    pub window: usize,
    /// Blocks in each decoder stage.
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub pool_sizes: Vec<usize>,
    pub input_size: (usize, usize),
    pub rel_bias: bool,
    pub head_kind: HeadKind,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale configuration: 64×64 input, C=16, 4×4 windows.
    pub fn toy() -> Self {
        ModelConfig {
            base_dim: 16,
            stage_depths: [2; LEVELS],
            stage_heads: [2, 4, 8, 16, 32],
            window: 4,
            decoder_depth: 2,
            decoder_heads: 2,
            pool_sizes: vec![3, 5, 7, 9],
            input_size: (64, 64),
            rel_bias: true,
            head_kind: HeadKind::Deconv,
            mlp_ratio: 4,
        }
    }

    /// Native encoder width at each level: C, 2C, 4C, 8C, 16C.
    pub fn encoder_dims(&self) -> [usize; LEVELS] {
        std::array::from_fn(|k| self.base_dim << k)
    }

    /// Spatial extent `(h, w)` of each level.
    pub fn level_sides(&self) -> [(usize, usize); LEVELS] {
        let (h, w) = self.input_size;
        std::array::from_fn(|k| (h / (PATCH << k), w / (PATCH << k)))
    }

    /// Upsampling factor from each level back to the input.
    pub fn level_strides(&self) -> [usize; LEVELS] {
        std::array::from_fn(|k| PATCH << k)
    }

    /// Number of channels of each enhanced branch.
    pub fn branch_dim(&self) -> usize {
        self.base_dim * (1 + self.pool_sizes.len())
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return invalid("model_config", format!("input {h}x{w} must be a positive multiple of {MAX_STRIDE}"));
        }
        if self.base_dim == 0 {
            return invalid("model_config", "base_dim must be positive");
        }
        if self.decoder_depth % 2 != 0 {
            return invalid("model_config", format!("decoder_depth {} must be even", self.decoder_depth));
        }
        if let Some(m) = self.pool_sizes.iter().find(|&&m| m % 2 == 0) {
            return invalid("model_config", format!("pool size {m} must be odd"));
        }
        let dims = self.encoder_dims();
        for (k, &(lh, lw)) in self.level_sides().iter().enumerate() {
            self.stage(dims[k], self.stage_heads[k], self.stage_depths[k]).validate()?;
            WindowLayout::new(lh, lw, self.window, false)?;
        }
        self.stage(self.base_dim, self.decoder_heads, self.decoder_depth).validate()
    }

    fn stage(&self, dim: usize, heads: usize, depth: usize) -> SwinStageConfig {
        SwinStageConfig { dim, heads, window: self.window, depth, mlp_ratio: self.mlp_ratio, rel_bias: self.rel_bias }
    }
}

/// Five feature maps, finest first, each `[N, C, h_k, w_k]`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// Enhanced features per level: the 5C-channel branches and their C-channel
/// base maps before contrast concatenation.
#[derive(Debug, Clone)]
pub struct Enhanced {
    pub sum: Vec<Var>,
    pub diff: Vec<Var>,
    pub sum_base: Vec<Var>,
    pub diff_base: Vec<Var>,
}

/// Side logits `P^1..P^5` and fused logits, all `[N, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct SideOutputs {
    pub sides: Vec<Var>,
    pub fused: Var,
}

impl SideOutputs {
    /// Fused output first, then the side outputs.
    pub fn all(&self) -> Vec<Var> {
        std::iter::once(self.fused).chain(self.sides.iter().copied()).collect()
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub pyramid_t1: FeaturePyramid,
    pub pyramid_t2: FeaturePyramid,
    pub enhanced: Enhanced,
    pub attended: Vec<Var>,
    pub spatial_gates: Vec<Var>,
    pub decoded: Vec<Var>,
    pub outputs: SideOutputs,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub embed: PatchEmbed,
    pub merges: Vec<PatchMerge>,
    pub stages: Vec<SwinStage>,
    pub norms: Vec<LayerNorm>,
    pub projections: Vec<Conv2d>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let dims = cfg.encoder_dims();
        let sides = cfg.level_sides();
        let bb = Group::Backbone;
        let embed = PatchEmbed::new(store, "encoder.embed", 3, dims[0], bb);
        let mut merges = Vec::new();
        let mut stages = Vec::new();
        let mut norms = Vec::new();
        let mut projections = Vec::new();
        for k in 0..LEVELS {
            if k > 0 {
                merges.push(PatchMerge::new(store, &format!("encoder.merge{k}"), dims[k - 1], bb));
            }
            let sc = cfg.stage(dims[k], cfg.stage_heads[k], cfg.stage_depths[k]);
            stages.push(SwinStage::new(store, &format!("encoder.stage{}", k + 1), &sc, sides[k].0, sides[k].1, bb)?);
            norms.push(LayerNorm::new(store, &format!("encoder.norm{}", k + 1), dims[k], bb));
        }
        for k in 0..LEVELS {
            projections.push(Conv2d::pointwise(store, &format!("encoder.proj{}", k + 1), dims[k], cfg.base_dim, Group::Head));
        }
        Ok(Encoder { embed, merges, stages, norms, projections })
    }

    pub fn forward(&self, ctx: &mut Ctx, img: Var) -> Result<FeaturePyramid> {
        let mut x = self.embed.forward(ctx, img)?;
        let mut levels = Vec::with_capacity(LEVELS);
        for k in 0..LEVELS {
            if k > 0 {
                x = self.merges[k - 1].forward(ctx, x)?;
            }
            x = self.stages[k].forward(ctx, x)?;
            let e = self.norms[k].forward(ctx, x)?;
            let e = tokens_to_nchw(ctx, e)?;
            levels.push(self.projections[k].forward(ctx, e)?);
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Conv1×1 → BN → ReLU followed by local-contrast maps for one branch.
#[derive(Debug, Clone)]
pub struct ContrastBranch {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ContrastBranch {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        ContrastBranch {
            conv: Conv2d::pointwise(store, &format!("{name}.conv"), dim, dim, Group::Head),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), dim, Group::Head),
        }
    }

    /// Returns (concatenated output, base map).
    pub fn forward(&self, ctx: &mut Ctx, x: Var, pools: &[usize]) -> Result<(Var, Var)> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        let base = ctx.g.relu(y)?;
        let mut parts = vec![base];
        for &m in pools {
            parts.push(ctx.g.avg_pool_contrast(base, m)?);
        }
        Ok((ctx.g.concat_channel(&parts)?, base))
    }
}

#[derive(Debug, Clone)]
pub struct DfeLevel {
    pub sum: ContrastBranch,
    pub diff: ContrastBranch,
}

/// Attention-gated fusion of one level's enhanced branches.
#[derive(Debug, Clone)]
pub struct Pam {
    pub fuse: Conv2d,
    pub bn: BatchNorm2d,
    pub spatial: Conv2d,
    pub channel: Conv2d,
    pub out: Conv2d,
}

impl Pam {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, dim: usize) -> Self {
        let g = Group::Head;
        Pam {
            fuse: Conv2d::pointwise(store, &format!("{name}.fuse"), in_dim, dim, g),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), dim, g),
            spatial: Conv2d::pointwise(store, &format!("{name}.spatial"), 1, 1, g),
            channel: Conv2d::pointwise(store, &format!("{name}.channel"), dim, dim, g),
            out: Conv2d::pointwise(store, &format!("{name}.out"), dim, dim, g),
        }
    }

    /// Returns (output, spatial gate `[N,1,h,w]`).
    pub fn forward(&self, ctx: &mut Ctx, sum: Var, diff: Var) -> Result<(Var, Var)> {
        let (a, b) = (ctx.g.shape(sum), ctx.g.shape(diff));
        if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
            return invalid("pam", format!("branch shapes {a:?} and {b:?} are not aligned"));
        }
        let x = ctx.g.concat_channel(&[sum, diff])?;
        let f = self.fuse.forward(ctx, x)?;
        let f = self.bn.forward(ctx, f)?;
        let f = ctx.g.relu(f)?;

        let s = ctx.g.sum_channel(f)?;
        let s = self.spatial.forward(ctx, s)?;
        let sgate = ctx.g.sigmoid(s)?;
        let f_sa = ctx.g.mul(f, sgate)?;

        let c = ctx.g.global_avg_pool(f)?;
        let c = self.channel.forward(ctx, c)?;
        let cgate = ctx.g.sigmoid(c)?;
        let f_ca = ctx.g.mul(f, cgate)?;

        let y = ctx.g.add(f_sa, f_ca)?;
        let y = ctx.g.add(y, f)?;
        Ok((self.out.forward(ctx, y)?, sgate))
    }
}

/// Top-down pyramid: each coarser decoded map passes a transformer stage,
/// is unmerged to the next resolution and added to that level's features.
#[derive(Debug, Clone)]
pub struct Decoder {
    /// `stages[k]` runs at the resolution of level `k + 1` (0-based).
    pub stages: Vec<SwinStage>,
    pub unmerges: Vec<PatchUnmerge>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let sides = cfg.level_sides();
        let sc = cfg.stage(cfg.base_dim, cfg.decoder_heads, cfg.decoder_depth);
        let mut stages = Vec::new();
        let mut unmerges = Vec::new();
        for k in 0..LEVELS - 1 {
            let (h, w) = sides[k + 1];
            stages.push(SwinStage::new(store, &format!("decoder.stage{}", k + 1), &sc, h, w, Group::Head)?);
            unmerges.push(PatchUnmerge::new(store, &format!("decoder.unmerge{}", k + 1), cfg.base_dim, Group::Head));
        }
        Ok(Decoder { stages, unmerges })
    }

    /// Decoded maps, finest first.
    pub fn forward(&self, ctx: &mut Ctx, attended: &[Var]) -> Result<Vec<Var>> {
        if attended.len() != LEVELS {
            return invalid("decoder", format!("expected {LEVELS} levels, got {}", attended.len()));
        }
        let mut out = vec![attended[LEVELS - 1]];
        for k in (0..LEVELS - 1).rev() {
            let prev = *out.last().expect("nonempty");
            let t = nchw_to_tokens(ctx, prev)?;
            let t = self.stages[k].forward(ctx, t)?;
            let t = self.unmerges[k].forward(ctx, t)?;
            let up = tokens_to_nchw(ctx, t)?;
            if ctx.g.shape(up) != ctx.g.shape(attended[k]) {
                return invalid(
                    "decoder",
                    format!("level {} upsampled to {:?} but features are {:?}", k + 1, ctx.g.shape(up), ctx.g.shape(attended[k])),
                );
            }
            out.push(ctx.g.add(up, attended[k])?);
        }
        out.reverse();
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub enum SideHead {
    Deconv(ConvTranspose2d),
    Bilinear { proj: Conv2d, kernel: Tensor, stride: usize },
}

/// Fixed `[1,1,2s,2s]` transposed-convolution kernel performing bilinear
/// interpolation by factor `s`.
pub fn bilinear_kernel(s: usize) -> Tensor {
    let k = 2 * s;
    let center = s as f64 - 0.5;
    let tap = |i: usize| 1.0 - (i as f64 - center).abs() / s as f64;
    let data = (0..k * k).map(|i| tap(i / k) * tap(i % k)).collect();
    Tensor::new(vec![1, 1, k, k], data).expect("kernel shape")
}

impl SideHead {
    pub fn new(store: &mut ParamStore, name: &str, kind: HeadKind, dim: usize, stride: usize) -> Self {
        match kind {
            HeadKind::Deconv => SideHead::Deconv(ConvTranspose2d::new(store, name, dim, 1, 2 * stride, stride, stride / 2, Group::Head)),
            HeadKind::Bilinear => {
                SideHead::Bilinear { proj: Conv2d::pointwise(store, name, dim, 1, Group::Head), kernel: bilinear_kernel(stride), stride }
            }
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            SideHead::Deconv(d) => d.forward(ctx, x),
            SideHead::Bilinear { proj, kernel, stride } => {
                let y = proj.forward(ctx, x)?;
                let k = ctx.g.constant(kernel.clone());
                ctx.g.conv_transpose2d(y, k, None, *stride, stride / 2)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub dfe: Vec<DfeLevel>,
    pub pam: Vec<Pam>,
    pub decoder: Decoder,
    pub heads: Vec<SideHead>,
    pub fusion: Conv2d,
}

impl Model {
    /// Registers every parameter in `store`, in a fixed order.
    pub fn new(cfg: ModelConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(store, &cfg)?;
        let c = cfg.base_dim;
        let dfe = (1..=LEVELS)
            .map(|k| DfeLevel {
                sum: ContrastBranch::new(store, &format!("dfe{k}.sum"), c),
                diff: ContrastBranch::new(store, &format!("dfe{k}.diff"), c),
            })
            .collect();
        let pam = (1..=LEVELS).map(|k| Pam::new(store, &format!("pam{k}"), 2 * cfg.branch_dim(), c)).collect();
        let decoder = Decoder::new(store, &cfg)?;
        let heads = cfg
            .level_strides()
            .iter()
            .enumerate()
            .map(|(k, &s)| SideHead::new(store, &format!("head{}", k + 1), cfg.head_kind, c, s))
            .collect();
        let fusion = Conv2d::pointwise(store, "fusion", LEVELS, 1, Group::Head);
        Ok(Model { cfg, encoder, dfe, pam, decoder, heads, fusion })
    }

    fn check_image(&self, ctx: &Ctx, img: Var) -> Result<()> {
        let s = ctx.g.shape(img);
        let (h, w) = self.cfg.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return invalid("model", format!("expected [N,3,{h},{w}] image, got {s:?}"));
        }
        Ok(())
    }

    /// Both pyramids from the shared encoder. Parameter reads are tagged 1
    /// for the first date and 2 for the second.
    pub fn sfe(&self, ctx: &mut Ctx, t1: Var, t2: Var) -> Result<(FeaturePyramid, FeaturePyramid)> {
        self.check_image(ctx, t1)?;
        self.check_image(ctx, t2)?;
        if ctx.g.shape(t1) != ctx.g.shape(t2) {
            return invalid("model", "the two dates differ in shape");
        }
        ctx.set_tag(1);
        let p1 = self.encoder.forward(ctx, t1);
        ctx.set_tag(2);
        let p2 = self.encoder.forward(ctx, t2);
        ctx.set_tag(0);
        Ok((p1?, p2?))
    }

    pub fn dfe(&self, ctx: &mut Ctx, e1: &FeaturePyramid, e2: &FeaturePyramid) -> Result<Enhanced> {
        if e1.levels.len() != LEVELS || e2.levels.len() != LEVELS {
            return invalid("dfe", "pyramids must have five levels");
        }
        let mut out = Enhanced { sum: Vec::new(), diff: Vec::new(), sum_base: Vec::new(), diff_base: Vec::new() };
        for (k, lvl) in self.dfe.iter().enumerate() {
            let (a, b) = (e1.levels[k], e2.levels[k]);
            if ctx.g.shape(a) != ctx.g.shape(b) {
                return invalid("dfe", format!("level {} misaligned: {:?} vs {:?}", k + 1, ctx.g.shape(a), ctx.g.shape(b)));
            }
            let s = ctx.g.add(a, b)?;
            let d = ctx.g.sub(a, b)?;
            let (s, sb) = lvl.sum.forward(ctx, s, &self.cfg.pool_sizes)?;
            let (d, db) = lvl.diff.forward(ctx, d, &self.cfg.pool_sizes)?;
            out.sum.push(s);
            out.diff.push(d);
            out.sum_base.push(sb);
            out.diff_base.push(db);
        }
        Ok(out)
    }

    pub fn heads(&self, ctx: &mut Ctx, decoded: &[Var]) -> Result<SideOutputs> {
        let sides = self.heads.iter().zip(decoded).map(|(h, &x)| h.forward(ctx, x)).collect::<Result<Vec<_>>>()?;
        let cat = ctx.g.concat_channel(&sides)?;
        let fused = self.fusion.forward(ctx, cat)?;
        Ok(SideOutputs { sides, fused })
    }

    pub fn forward_traced(&self, ctx: &mut Ctx, t1: Var, t2: Var) -> Result<Trace> {
        let (p1, p2) = self.sfe(ctx, t1, t2)?;
        let enhanced = self.dfe(ctx, &p1, &p2)?;
        let mut attended = Vec::with_capacity(LEVELS);
        let mut spatial_gates = Vec::with_capacity(LEVELS);
        for k in 0..LEVELS {
            let (a, g) = self.pam[k].forward(ctx, enhanced.sum[k], enhanced.diff[k])?;
            attended.push(a);
            spatial_gates.push(g);
        }
        let decoded = self.decoder.forward(ctx, &attended)?;
        let outputs = self.heads(ctx, &decoded)?;
        Ok(Trace { pyramid_t1: p1, pyramid_t2: p2, enhanced, attended, spatial_gates, decoded, outputs })
    }

    pub fn forward(&self, ctx: &mut Ctx, t1: Var, t2: Var) -> Result<SideOutputs> {
        Ok(self.forward_traced(ctx, t1, t2)?.outputs)
    }

    /// Parameters of the shared encoder.
    pub fn encoder_params(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids().filter(|&id| store.param(id).name.starts_with("encoder.")).collect()
    }
}

/// Names of encoder parameters not read by both date streams during the
/// forward pass recorded in `ctx`. Empty when sharing is strict.
pub fn sharing_violations(model: &Model, ctx: &Ctx) -> Vec<String> {
    let store = ctx.store();
    model.encoder_params(store).into_iter().filter(|&id| ctx.read_tags(id) != 3).map(|id| store.param(id).name.clone()).collect()
}

/// Shapes of every stage for one input, as checked by the shape audit.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeReport {
    pub pyramid: Vec<Vec<usize>>,
    pub sum: Vec<Vec<usize>>,
    pub diff: Vec<Vec<usize>>,
    pub attended: Vec<Vec<usize>>,
    pub decoded: Vec<Vec<usize>>,
    pub sides: Vec<Vec<usize>>,
    pub fused: Vec<usize>,
}

impl ShapeReport {
    pub fn from_trace(ctx: &Ctx, t: &Trace) -> Self {
        let shapes = |v: &[Var]| v.iter().map(|&x| ctx.g.shape(x).to_vec()).collect::<Vec<_>>();
        ShapeReport {
            pyramid: shapes(&t.pyramid_t1.levels),
            sum: shapes(&t.enhanced.sum),
            diff: shapes(&t.enhanced.diff),
            attended: shapes(&t.attended),
            decoded: shapes(&t.decoded),
            sides: shapes(&t.outputs.sides),
            fused: ctx.g.shape(t.outputs.fused).to_vec(),
        }
    }

    /// Lists every deviation from the expected telescope for a batch of `n`
    /// `h×w` inputs.
    pub fn violations(&self, cfg: &ModelConfig, n: usize) -> Vec<String> {
        fn expect(bad: &mut Vec<String>, what: String, got: &[usize], want: Vec<usize>) {
            if got != want.as_slice() {
                bad.push(format!("{what}: got {got:?}, want {want:?}"));
            }
        }
        if self.pyramid.len() != LEVELS {
            return vec![format!("pyramid has {} levels, want {LEVELS}", self.pyramid.len())];
        }
        let mut bad = Vec::new();
        let c = cfg.base_dim;
        let (h, w) = cfg.input_size;
        let b = cfg.branch_dim();
        for (k, &(lh, lw)) in cfg.level_sides().iter().enumerate() {
            let l = k + 1;
            expect(&mut bad, format!("level {l} encoder"), &self.pyramid[k], vec![n, c, lh, lw]);
            expect(&mut bad, format!("level {l} sum branch"), &self.sum[k], vec![n, b, lh, lw]);
            expect(&mut bad, format!("level {l} difference branch"), &self.diff[k], vec![n, b, lh, lw]);
            expect(&mut bad, format!("level {l} attention"), &self.attended[k], vec![n, c, lh, lw]);
            expect(&mut bad, format!("level {l} decoder"), &self.decoded[k], vec![n, c, lh, lw]);
            expect(&mut bad, format!("side output {l}"), &self.sides[k], vec![n, 1, h, w]);
            if k > 0 && (self.pyramid[k - 1][2] != 2 * self.pyramid[k][2] || self.pyramid[k - 1][3] != 2 * self.pyramid[k][3]) {
                bad.push(format!("level {l} does not halve level {k}"));
            }
        }
        expect(&mut bad, "fused output".into(), &self.fused, vec![n, 1, h, w]);
        bad
    }
}

#[cfg(test)]
mod tests;
