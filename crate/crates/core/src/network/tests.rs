use super::*;
use crate::nn::check_module;
use crate::tensor::gradcheck::GradCheck;
use crate::tensor::BatchNormMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy_model(seed: u64) -> (Model, ParamStore) {
    let mut store = ParamStore::new(seed);
    let model = Model::new(ModelConfig::toy(), &mut store).unwrap();
    (model, store)
}

fn image(n: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[n, 3, 64, 64], -1.0, 1.0, &mut rng(seed))
}

fn zero_param(store: &mut ParamStore, id: ParamId) {
    let s = store.value(id).shape().to_vec();
    *store.value_mut(id) = Tensor::zeros(&s);
}

#[test]
fn config_validation() {
    let cfg = ModelConfig::toy();
    cfg.validate().unwrap();
    assert_eq!(cfg.level_sides(), [(16, 16), (8, 8), (4, 4), (2, 2), (1, 1)]);
    assert_eq!(cfg.encoder_dims(), [16, 32, 64, 128, 256]);
    assert_eq!(cfg.branch_dim(), 80);

    let mut bad = cfg.clone();
    bad.input_size = (60, 60);
    assert!(bad.validate().is_err());
    let mut bad = cfg.clone();
    bad.decoder_depth = 3;
    assert!(bad.validate().is_err());
    let mut bad = cfg.clone();
    bad.pool_sizes = vec![3, 4];
    assert!(bad.validate().is_err());
    let mut ok = cfg.clone();
    ok.input_size = (128, 256);
    ok.validate().unwrap();
    // 10x10 at the fourth level cannot be tiled by 4x4 windows
    let mut bad = cfg;
    bad.input_size = (320, 320);
    assert!(bad.validate().is_err());
}

#[test]
fn toy_forward_shapes_finite_and_shared() {
    let (model, store) = toy_model(1);
    let mut ctx = Ctx::new(&store, BatchNormMode::Train);
    let t1 = ctx.g.constant(image(2, 10));
    let t2 = ctx.g.constant(image(2, 11));
    let tr = model.forward_traced(&mut ctx, t1, t2).unwrap();
    let rep = ShapeReport::from_trace(&ctx, &tr);
    assert!(rep.violations(&model.cfg, 2).is_empty(), "{:?}", rep.violations(&model.cfg, 2));
    for v in tr.outputs.all() {
        assert!(ctx.g.value(v).is_finite());
    }
    assert!(sharing_violations(&model, &ctx).is_empty());
    assert!(!model.encoder_params(&store).is_empty());
}

#[test]
fn wrong_input_size_is_rejected() {
    let (model, store) = toy_model(1);
    let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
    let t1 = ctx.g.constant(Tensor::zeros(&[1, 3, 32, 32]));
    assert!(model.forward(&mut ctx, t1, t1).is_err());
}

#[test]
fn identical_dates_give_identical_pyramids_and_zero_difference() {
    let (model, store) = toy_model(2);
    for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
        let mut ctx = Ctx::new(&store, mode);
        let img = image(2, 3);
        let t1 = ctx.g.constant(img.clone());
        let t2 = ctx.g.constant(img);
        let tr = model.forward_traced(&mut ctx, t1, t2).unwrap();
        for k in 0..LEVELS {
            assert_eq!(ctx.g.value(tr.pyramid_t1.levels[k]), ctx.g.value(tr.pyramid_t2.levels[k]));
            assert!(ctx.g.value(tr.enhanced.diff_base[k]).data().iter().all(|&v| v == 0.0));
            assert!(ctx.g.value(tr.enhanced.diff[k]).data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn swapping_dates_swaps_pyramids() {
    let (model, store) = toy_model(4);
    let (a, b) = (image(1, 5), image(1, 6));
    let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
    let (va, vb) = (ctx.g.constant(a), ctx.g.constant(b));
    let (p1, p2) = model.sfe(&mut ctx, va, vb).unwrap();
    let (q1, q2) = model.sfe(&mut ctx, vb, va).unwrap();
    for k in 0..LEVELS {
        assert_eq!(ctx.g.value(p1.levels[k]), ctx.g.value(q2.levels[k]));
        assert_eq!(ctx.g.value(p2.levels[k]), ctx.g.value(q1.levels[k]));
    }
}

#[test]
fn constant_base_map_has_zero_contrast() {
    let mut store = ParamStore::new(0);
    let br = ContrastBranch::new(&mut store, "b", 2);
    // a 1x1 weight of zero leaves only the bias, which is constant over space
    zero_param(&mut store, br.conv.w);
    *store.value_mut(br.conv.b.unwrap()) = Tensor::new(vec![2], vec![0.7, 1.3]).unwrap();
    let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
    let x = ctx.g.constant(Tensor::uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut rng(1)));
    let (y, base) = br.forward(&mut ctx, x, &[3, 5, 7, 9]).unwrap();
    assert_eq!(ctx.g.shape(y), &[1, 10, 8, 8]);
    let yv = ctx.g.value(y).data();
    assert!(yv[2 * 64..].iter().all(|&v| v == 0.0));
    assert_eq!(&yv[..2 * 64], ctx.g.value(base).data());
}

fn pam_inputs(seed: u64, n: usize, h: usize) -> (Tensor, Tensor) {
    pam_inputs_c(seed, n, h, 10)
}

fn pam_inputs_c(seed: u64, n: usize, h: usize, c: usize) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    (Tensor::randn(&[n, c, h, h], 1.0, &mut r), Tensor::randn(&[n, c, h, h], 1.0, &mut r))
}

#[test]
fn pam_gates_in_open_unit_interval_and_constant_field() {
    let mut store = ParamStore::new(1);
    let pam = Pam::new(&mut store, "p", 20, 4);
    let (s, d) = pam_inputs(2, 2, 4);
    let mut ctx = Ctx::new(&store, BatchNormMode::Train);
    let (sv, dv) = (ctx.g.constant(s), ctx.g.constant(d));
    let (_, gate) = pam.forward(&mut ctx, sv, dv).unwrap();
    assert!(ctx.g.value(gate).data().iter().all(|&g| g > 0.0 && g < 1.0));

    // spatially constant inputs give a spatially constant gate
    let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
    let c: Vec<f64> = (0..10).flat_map(|ch| std::iter::repeat(ch as f64 * 0.1 - 0.5).take(16)).collect();
    let cv = ctx.g.constant(Tensor::new(vec![1, 10, 4, 4], c).unwrap());
    let (_, gate) = pam.forward(&mut ctx, cv, cv).unwrap();
    let gv = ctx.g.value(gate).data();
    assert!(gv.iter().all(|&g| g == gv[0]));
}

#[test]
fn pam_with_zeroed_gates_is_scaled_residual() {
    let mut store = ParamStore::new(3);
    let pam = Pam::new(&mut store, "p", 20, 4);
    for id in [pam.spatial.w, pam.spatial.b.unwrap(), pam.channel.w, pam.channel.b.unwrap()] {
        zero_param(&mut store, id);
    }
    let (s, d) = pam_inputs(5, 2, 4);
    let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
    let (sv, dv) = (ctx.g.constant(s), ctx.g.constant(d));
    let (out, _) = pam.forward(&mut ctx, sv, dv).unwrap();

    let x = ctx.g.concat_channel(&[sv, dv]).unwrap();
    let f = pam.fuse.forward(&mut ctx, x).unwrap();
    let f = pam.bn.forward(&mut ctx, f).unwrap();
    let f = ctx.g.relu(f).unwrap();
    let f2 = ctx.g.scale(f, 2.0).unwrap();
    let want = pam.out.forward(&mut ctx, f2).unwrap();
    assert!(ctx.g.value(out).max_abs_diff(ctx.g.value(want)) < 1e-12);
}

#[test]
fn pam_rejects_misaligned_branches() {
    let mut store = ParamStore::new(3);
    let pam = Pam::new(&mut store, "p", 20, 4);
    let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
    let a = ctx.g.constant(Tensor::zeros(&[1, 10, 4, 4]));
    let b = ctx.g.constant(Tensor::zeros(&[1, 10, 2, 2]));
    assert!(pam.forward(&mut ctx, a, b).is_err());
}

#[test]
fn decoder_zero_in_zero_out_and_telescope() {
    let (model, mut store) = toy_model(6);
    for u in &model.decoder.unmerges {
        zero_param(&mut store, u.expand.w);
    }
    let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
    let fa: Vec<Var> = model.cfg.level_sides().iter().map(|&(h, w)| ctx.g.constant(Tensor::zeros(&[1, 16, h, w]))).collect();
    let fp = model.decoder.forward(&mut ctx, &fa).unwrap();
    for (k, &v) in fp.iter().enumerate() {
        assert!(ctx.g.value(v).data().iter().all(|&x| x == 0.0));
        if k < LEVELS - 1 {
            assert_eq!(ctx.g.shape(v)[2], 2 * ctx.g.shape(fp[k + 1])[2]);
        }
    }
}

#[test]
fn coarsest_level_reaches_finest_decoded_map() {
    let (model, store) = toy_model(7);
    let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
    let mut r = rng(8);
    let fa: Vec<Var> = model.cfg.level_sides().iter().map(|&(h, w)| ctx.g.leaf(Tensor::randn(&[1, 16, h, w], 1.0, &mut r))).collect();
    let fp = model.decoder.forward(&mut ctx, &fa).unwrap();
    let m = ctx.g.mean_all(fp[0]).unwrap();
    ctx.g.backward(m).unwrap();
    let g = ctx.g.grad(fa[LEVELS - 1]).unwrap();
    assert!(g.data().iter().any(|&v| v.abs() > 1e-8));

    // finite-difference confirmation on one coarse element
    let eval = |delta: f64| {
        let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
        let mut r = rng(8);
        let mut ts: Vec<Tensor> = model.cfg.level_sides().iter().map(|&(h, w)| Tensor::randn(&[1, 16, h, w], 1.0, &mut r)).collect();
        ts[LEVELS - 1].data_mut()[3] += delta;
        let fa: Vec<Var> = ts.into_iter().map(|t| ctx.g.constant(t)).collect();
        let fp = model.decoder.forward(&mut ctx, &fa).unwrap();
        let m = ctx.g.mean_all(fp[0]).unwrap();
        ctx.g.value(m).item()
    };
    let numeric = (eval(1e-3) - eval(-1e-3)) / 2e-3;
    assert!(numeric.abs() > 1e-8);
    assert!((numeric - g.data()[3]).abs() <= 1e-4 * numeric.abs().max(g.data()[3].abs()));
}

#[test]
fn zero_features_give_half_probability() {
    let (model, store) = toy_model(9);
    let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
    let fp: Vec<Var> = model.cfg.level_sides().iter().map(|&(h, w)| ctx.g.constant(Tensor::zeros(&[1, 16, h, w]))).collect();
    let out = model.heads(&mut ctx, &fp).unwrap();
    assert_eq!(out.sides.len(), 5);
    for v in out.all() {
        assert_eq!(ctx.g.shape(v), &[1, 1, 64, 64]);
        let p = ctx.g.sigmoid(v).unwrap();
        assert!(ctx.g.value(p).data().iter().all(|&x| x == 0.5));
    }
}

#[test]
fn bilinear_head_upsamples_constants_in_the_interior() {
    let k = bilinear_kernel(4);
    assert_eq!(k.shape(), &[1, 1, 8, 8]);
    let store = ParamStore::new(0);
    let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
    let x = ctx.g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let kv = ctx.g.constant(k);
    let y = ctx.g.conv_transpose2d(x, kv, None, 4, 2).unwrap();
    assert_eq!(ctx.g.shape(y), &[1, 1, 12, 12]);
    let yv = ctx.g.value(y).data();
    for r in 2..10 {
        for c in 2..10 {
            assert!((yv[r * 12 + c] - 1.0).abs() < 1e-12);
        }
    }

    let mut cfg = ModelConfig::toy();
    cfg.head_kind = HeadKind::Bilinear;
    let mut store = ParamStore::new(1);
    let model = Model::new(cfg, &mut store).unwrap();
    let mut ctx = Ctx::new(&store, BatchNormMode::Train);
    let t = ctx.g.constant(image(2, 1));
    let out = model.forward(&mut ctx, t, t).unwrap();
    assert_eq!(ctx.g.shape(out.fused), &[2, 1, 64, 64]);
}

#[test]
fn eval_forward_is_pure_and_per_sample() {
    let (model, store) = toy_model(11);
    let (a, b) = (image(1, 12), image(1, 13));
    let run = |a: &Tensor, b: &Tensor| {
        let mut ctx = Ctx::new(&store, BatchNormMode::Eval);
        let (va, vb) = (ctx.g.constant(a.clone()), ctx.g.constant(b.clone()));
        let out = model.forward(&mut ctx, va, vb).unwrap();
        ctx.g.value(out.fused).clone()
    };
    let once = run(&a, &b);
    assert_eq!(once, run(&a, &b));

    let dup = |t: &Tensor| {
        let mut d = t.data().to_vec();
        d.extend_from_slice(t.data());
        Tensor::new(vec![2, 3, 64, 64], d).unwrap()
    };
    let twice = run(&dup(&a), &dup(&b));
    assert_eq!(&twice.data()[..4096], once.data());
    assert_eq!(&twice.data()[4096..], once.data());
}

#[test]
fn groups_split_encoder_from_new_layers() {
    let (model, store) = toy_model(0);
    for id in store.ids() {
        let p = store.param(id);
        let backbone = p.name.starts_with("encoder.") && !p.name.starts_with("encoder.proj");
        assert_eq!(p.group == Group::Backbone, backbone, "{}", p.name);
    }
    assert_eq!(model.encoder_params(&store).len(), store.params().iter().filter(|p| p.name.starts_with("encoder.")).count());
}

// ---- gradients ----------------------------------------------------------

#[test]
fn grad_pam() {
    for seed in 0..5 {
        let mut store = ParamStore::new(seed);
        let pam = Pam::new(&mut store, "p", 40, 4);
        let (s, d) = pam_inputs_c(seed + 40, 2, 4, 20);
        let check = GradCheck { seed, max_elements: Some(20), ..GradCheck::default() };
        let rep = check_module(&store, BatchNormMode::Train, &[s, d], None, &check, |ctx, v| Ok(pam.forward(ctx, v[0], v[1])?.0)).unwrap();
        assert!(rep.passed(), "seed {seed}: {:?}", rep.params);
    }
}

#[test]
fn grad_contrast_branch_and_heads() {
    for seed in 0..5 {
        let mut store = ParamStore::new(seed);
        let br = ContrastBranch::new(&mut store, "b", 3);
        let head = SideHead::new(&mut store, "h", HeadKind::Deconv, 9, 2);
        let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng(seed + 50));
        let check = GradCheck { seed, max_elements: Some(20), ..GradCheck::default() };
        let rep = check_module(&store, BatchNormMode::Train, &[x], None, &check, |ctx, v| {
            let (y, _) = br.forward(ctx, v[0], &[3, 5])?;
            head.forward(ctx, y)
        })
        .unwrap();
        assert!(rep.passed(), "seed {seed}: {:?}", rep.params);
    }
}
