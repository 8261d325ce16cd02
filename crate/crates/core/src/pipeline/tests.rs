use super::train::{load_state, state_checkpoint, LrDecay, Sgd};
use super::*;
use crate::network::ModelConfig;
use crate::nn::{Group, ParamStore};
use crate::tensor::Tensor;

fn small_cfg() -> RunConfig {
    let mut c = RunConfig::default();
    c.model = ModelConfig { base_dim: 4, stage_heads: [1, 1, 2, 2, 4], decoder_heads: 1, mlp_ratio: 2, ..ModelConfig::toy() };
    c.train.epochs = 2;
    c
}

#[test]
fn lr_schedule_boundaries() {
    let c = TrainConfig::default();
    let lrs: Vec<f64> = [1, 20, 21, 40, 41].iter().map(|&e| c.lr_at(e)).collect();
    let want = [1e-3, 1e-3, 1e-4, 1e-4, 1e-5];
    for (a, b) in lrs.iter().zip(want) {
        assert!((a - b).abs() <= 1e-18, "{lrs:?}");
    }
    let once = TrainConfig { lr_decay: LrDecay::Once, ..TrainConfig::default() };
    assert_eq!(once.lr_at(20), 1e-3);
    assert!((once.lr_at(41) - 1e-4).abs() < 1e-18);
}

fn scalar_store(p: f64, group: Group) -> ParamStore {
    let mut s = ParamStore::new(0);
    s.register("p", Tensor::new(vec![1], vec![p]).unwrap(), group);
    s
}

#[test]
fn sgd_hand_steps() {
    // loss ½p², gradient p; lr 0.1, no momentum, no decay → p ← 0.9p
    let mut s = scalar_store(2.0, Group::Backbone);
    let id = s.ids().next().unwrap();
    let plain = TrainConfig { momentum: 0.0, weight_decay: 0.0, ..TrainConfig::default() };
    let mut opt = Sgd::new(&s);
    for _ in 0..3 {
        let p = s.value(id).item();
        opt.step(&mut s, &[(id, Tensor::new(vec![1], vec![p]).unwrap())], &plain, 0.1);
        assert_eq!(s.value(id).item(), (0.9 * p) as f32 as f64);
    }

    // with weight decay λ the step is p ← p − lr(p + λp)
    let mut s = scalar_store(1.0, Group::Backbone);
    let decay = TrainConfig { momentum: 0.0, ..TrainConfig::default() };
    let mut opt = Sgd::new(&s);
    opt.step(&mut s, &[(id, Tensor::new(vec![1], vec![1.0]).unwrap())], &decay, 0.1);
    assert_eq!(s.value(id).item(), (1.0 - 0.1 * (1.0 + 5e-4)) as f32 as f64);

    // momentum: second velocity μ·g1 + g2; head group runs at 10× rate
    let mut s = scalar_store(1.0, Group::Head);
    let heavy = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
    let mut opt = Sgd::new(&s);
    let g = |v: f64| [(id, Tensor::new(vec![1], vec![v]).unwrap())];
    opt.step(&mut s, &g(1.0), &heavy, 0.01);
    opt.step(&mut s, &g(1.0), &heavy, 0.01);
    let want = 1.0 - 0.1 * 1.0 - 0.1 * 1.9;
    assert!((s.value(id).item() - want).abs() < 1e-6);
}

#[test]
fn untrained_zero_fusion_predicts_all_change() {
    let mut t = Trainer::new(small_cfg()).unwrap();
    for name in ["fusion.weight", "fusion.bias"] {
        let id = t.store.find(name).unwrap();
        let shape = t.store.value(id).shape().to_vec();
        *t.store.value_mut(id) = Tensor::zeros(&shape);
    }
    let data = synth_dataset(1, 64, 3).unwrap();
    let p = t.predict(&data, 0.5).unwrap();
    assert!(p[0].prob.iter().all(|&v| v == 0.5));
    assert!(p[0].mask.iter().all(|&v| v == 1));
}

#[test]
fn training_checkpoint_and_reload() {
    let data = synth_dataset(4, 64, 11).unwrap();
    let mut a = Trainer::new(small_cfg()).unwrap();
    let log = a.fit(&data, |_| {}).unwrap();
    assert_eq!(log.epochs.len(), 2);
    assert_eq!(log.steps.len(), 4);
    assert!(log.steps.iter().all(|s| s.loss.total.is_finite()));

    // same seed and config: identical trajectory
    let mut b = Trainer::new(small_cfg()).unwrap();
    assert_eq!(b.fit(&data, |_| {}).unwrap().to_text(), log.to_text());

    let ck = a.checkpoint();
    let bytes = ck.to_bytes();
    let reloaded = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(reloaded.checkpoint().to_bytes(), bytes);
    assert_eq!((reloaded.step, reloaded.epoch), (4, 2));
    let before = a.predict(&data, 0.5).unwrap();
    let after = reloaded.predict(&data, 0.5).unwrap();
    assert_eq!(before, after);
    assert!(before.iter().flat_map(|p| &p.prob).all(|v| (0.0..=1.0).contains(v)));

    // resuming one more epoch matches continuing the original run
    let mut cont = Trainer::from_checkpoint(&ck).unwrap();
    cont.cfg.train.epochs = 3;
    a.cfg.train.epochs = 3;
    assert_eq!(cont.fit(&data, |_| {}).unwrap().to_text(), a.fit(&data, |_| {}).unwrap().to_text());
}

#[test]
fn mismatched_model_rejected_by_name() {
    let t = Trainer::new(small_cfg()).unwrap();
    let ck = state_checkpoint(&t.store);
    let mut other = small_cfg();
    other.model.base_dim = 8;
    other.model.stage_heads = [2, 2, 4, 4, 8];
    let mut o = Trainer::new(other).unwrap();
    let err = load_state(&ck, &mut o.store).unwrap_err().to_string();
    assert!(err.contains("encoder.embed"), "{err}");
}

#[test]
fn non_finite_loss_aborts() {
    let data = synth_dataset(2, 64, 1).unwrap();
    let mut t = Trainer::new(small_cfg()).unwrap();
    let id = t.store.find("fusion.bias").unwrap();
    *t.store.value_mut(id) = Tensor::full(&[1], f64::NAN);
    let refs: Vec<&SamplePair> = data.iter().collect();
    let r = t.train_step(&refs, 1e-3);
    assert!(matches!(r, Err(crate::Error::Numeric(_))), "{r:?}");
}
