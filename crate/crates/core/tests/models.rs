//! Network shapes, input gradients, guide behaviour and training runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdp_core::config::{Backbone, ModelConfig, RunConfig};
use sdp_core::dataset::collect;
use sdp_core::env::TRANSITION_DIM;
use sdp_core::models::{ModelKind, Network};
use sdp_core::training::{train_model, TrainingData};
use sdp_core::{seed, Error};
use sdp_nn::{central_difference, decode_checkpoint, GradCheckReport, Graph, Tensor};

const H: usize = 8;

fn arch(backbone: Backbone) -> ModelConfig {
    ModelConfig { backbone, blocks: 3, channels: 4, kernel: 3, embed_dim: 8, hidden: 16 }
}

fn rng(s: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(s)
}

fn random_input(r: &mut ChaCha8Rng, b: usize, h: usize) -> Vec<f64> {
    (0..b * h * TRANSITION_DIM).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// `Σ w·net(x)` and its input gradient.
fn weighted_output(net: &Network<f64>, x: &[f64], ks: &[usize], w: &[f64]) -> (f64, Vec<f64>) {
    let mut g = Graph::frozen(&net.params);
    let xi = g.input(Tensor::from_f64(&[ks.len(), net.horizon, TRANSITION_DIM], x).unwrap(), true);
    let y = net.forward(&mut g, xi, ks).unwrap();
    let shape = g.value(y).unwrap().shape().to_vec();
    let wn = g.constant(Tensor::from_f64(&shape, w).unwrap());
    let p = g.mul(y, wn).unwrap();
    let s = g.sum(p).unwrap();
    let v = g.value(s).unwrap().data()[0];
    let grads = g.backward(s).unwrap();
    (v, grads.node(xi).unwrap().to_vec())
}

fn check_input_gradient(net: &Network<f64>, seed_: u64) -> GradCheckReport {
    let mut r = rng(seed_);
    let ks = [3, 40];
    let x = random_input(&mut r, 2, net.horizon);
    let n_out = net.predict(&x, &ks).unwrap().len();
    let w: Vec<f64> = (0..n_out).map(|_| r.random_range(-1.0..1.0)).collect();
    let (_, grad) = weighted_output(net, &x, &ks, &w);
    let mut f = |z: &[f64]| net.predict(z, &ks).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let mut rep = GradCheckReport::default();
    for _ in 0..60 {
        let c = r.random_range(0..x.len());
        rep.record(c, grad[c], central_difference(&mut f, &x, c, 1e-5), 1e-6);
    }
    rep
}

#[test]
fn output_shapes_and_finiteness() {
    let mut r = rng(0);
    for bb in [Backbone::Conv, Backbone::Mlp] {
        for (kind, per) in [(ModelKind::Dynamics, H * 10), (ModelKind::Value, 1), (ModelKind::Safety, 2 * H)] {
            let net = Network::<f64>::new(kind, arch(bb), H, &mut r);
            let x = random_input(&mut r, 3, H);
            let y = net.predict(&x, &[1, 25, 50]).unwrap();
            assert_eq!(y.len(), 3 * per);
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }
    let full = Network::<f32>::new(ModelKind::Safety, RunConfig::default().model, 16, &mut r);
    assert_eq!(full.predict(&random_input(&mut r, 1, 16), &[1]).unwrap().len(), 32);
}

#[test]
fn models_are_deterministic_functions() {
    let mut r = rng(1);
    let net = Network::<f64>::new(ModelKind::Dynamics, arch(Backbone::Conv), H, &mut r);
    let x = random_input(&mut r, 2, H);
    assert_eq!(net.predict(&x, &[5, 6]).unwrap(), net.predict(&x, &[5, 6]).unwrap());
    assert_ne!(net.predict(&x, &[5, 6]).unwrap(), net.predict(&x, &[7, 6]).unwrap());
}

#[test]
fn safety_softmax_rows_sum_to_one() {
    let mut r = rng(2);
    for bb in [Backbone::Conv, Backbone::Mlp] {
        let net = Network::<f32>::new(ModelKind::Safety, arch(bb), H, &mut r);
        let logits = net.predict(&random_input(&mut r, 4, H), &[1, 2, 3, 4]).unwrap();
        for pair in logits.chunks(2) {
            let m = pair[0].max(pair[1]);
            let (a, b) = ((pair[0] - m).exp(), (pair[1] - m).exp());
            assert!(((a + b) / (a + b) - 1.0).abs() < 1e-6);
            let p: f64 = a / (a + b) + b / (a + b);
            assert!((p - 1.0).abs() < 1e-6);
        }
        let safe: Vec<f64> = net.guide_value(&random_input(&mut r, 4, H), &[1, 2, 3, 4]).unwrap();
        assert!(safe.iter().all(|&v| v <= 0.0));
    }
}

#[test]
fn denoiser_input_gradient_matches_finite_differences() {
    let mut r = rng(3);
    for bb in [Backbone::Conv, Backbone::Mlp] {
        let net = Network::<f64>::new(ModelKind::Dynamics, arch(bb), H, &mut r);
        let rep = check_input_gradient(&net, 30);
        assert!(rep.passes(1e-3), "{bb:?}: {rep:?}");
    }
}

#[test]
fn guide_gradients_match_finite_differences() {
    let mut r = rng(4);
    for bb in [Backbone::Conv, Backbone::Mlp] {
        for kind in [ModelKind::Value, ModelKind::Safety] {
            let mut net = Network::<f64>::new(kind, arch(bb), H, &mut r);
            net.value_offset = -20.0;
            net.value_scale = 7.0;
            let ks = [2, 17];
            let x = random_input(&mut r, 2, H);
            let (vals, grad) = net.guide_value_and_grad(&x, &ks).unwrap();
            assert_eq!(vals, net.guide_value(&x, &ks).unwrap());
            let mut f = |z: &[f64]| net.guide_value(z, &ks).unwrap().iter().sum::<f64>();
            let mut rep = GradCheckReport::default();
            for _ in 0..60 {
                let c = r.random_range(0..x.len());
                rep.record(c, grad[c], central_difference(&mut f, &x, c, 1e-5), 1e-6);
            }
            assert!(rep.passes(1e-3), "{bb:?} {kind}: {rep:?}");
        }
    }
    let full = Network::<f64>::new(ModelKind::Safety, RunConfig::default().model, 16, &mut r);
    let rep = check_input_gradient(&full, 31);
    assert!(rep.passes(1e-3), "{rep:?}");
}

#[test]
fn value_head_emits_reward_units() {
    let mut r = rng(5);
    let mut net = Network::<f64>::new(ModelKind::Value, arch(Backbone::Conv), H, &mut r);
    let x = random_input(&mut r, 3, H);
    let raw = net.predict(&x, &[1, 2, 3]).unwrap();
    net.value_offset = -15.0;
    net.value_scale = 4.0;
    let scaled = net.predict(&x, &[1, 2, 3]).unwrap();
    for (a, b) in raw.iter().zip(&scaled) {
        assert!((b - (4.0 * a - 15.0)).abs() < 1e-9);
    }
}

#[test]
fn safety_ascent_increases_log_probability() {
    let mut r = rng(6);
    for bb in [Backbone::Conv, Backbone::Mlp] {
        let net = Network::<f64>::new(ModelKind::Safety, arch(bb), H, &mut r);
        let ks = [10, 30, 49];
        let mut x = random_input(&mut r, 3, H);
        let mut prev = net.guide_value(&x, &ks).unwrap();
        for _ in 0..10 {
            let (_, grad) = net.guide_value_and_grad(&x, &ks).unwrap();
            x.iter_mut().zip(&grad).for_each(|(v, g)| *v += 1e-3 * g);
            let now = net.guide_value(&x, &ks).unwrap();
            for (a, b) in now.iter().zip(&prev) {
                assert!(a > b, "{bb:?}: {a} <= {b}");
            }
            prev = now;
        }
    }
}

#[test]
fn saturated_safe_classifier_has_flat_gradient() {
    let mut r = rng(7);
    let mut net = Network::<f64>::new(ModelKind::Safety, arch(Backbone::Conv), H, &mut r);
    let bias = net.params.find("head.b").unwrap();
    for (i, b) in net.params.get_mut(bias).value.iter_mut().enumerate() {
        *b = if i % 2 == 0 { 40.0 } else { -40.0 };
    }
    let x = random_input(&mut r, 2, H);
    let (vals, grad) = net.guide_value_and_grad(&x, &[1, 20]).unwrap();
    assert!(vals.iter().all(|v| v.abs() < 1e-6));
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "gradient norm {norm}");
}

#[test]
fn dynamics_model_is_not_a_guide() {
    let net = Network::<f64>::new(ModelKind::Dynamics, arch(Backbone::Conv), H, &mut rng(8));
    assert!(net.guide_value(&vec![0.0; H * 10], &[1]).is_err());
}

fn tiny_run() -> (RunConfig, TrainingData) {
    let mut cfg = RunConfig::default();
    cfg.data.episodes = 6;
    cfg.data.steps = 30;
    cfg.plan.horizon = H;
    cfg.model = arch(Backbone::Conv);
    cfg.train.steps = 20;
    cfg.train.batch = 8;
    cfg.train.eval_every = 5;
    cfg.train.eval_windows = 16;
    cfg.seed = 4;
    let ds = collect(&cfg).unwrap();
    let data = TrainingData::prepare(&ds, &cfg).unwrap();
    (cfg, data)
}

#[test]
fn one_step_changes_parameters() {
    let (mut cfg, data) = tiny_run();
    cfg.train.steps = 1;
    for (tag, kind) in ModelKind::ALL.into_iter().enumerate() {
        let out = train_model(kind, &data, &cfg, &mut |_| {}).unwrap();
        let mut init = seed::rng(cfg.seed, &[seed::tag::INIT, cfg.train.seed, tag as u64]);
        let fresh = Network::<f32>::new(kind, cfg.model, H, &mut init);
        let before = fresh.params.flat_values();
        let after = out.net.params.flat_values();
        assert_eq!(before.len(), after.len());
        assert!(before.iter().zip(&after).any(|(a, b)| a != b), "{kind}");
        assert_eq!(out.curve.len(), 1);
    }
}

#[test]
fn fixed_seed_gives_identical_curves_and_checkpoints() {
    let (cfg, data) = tiny_run();
    for kind in ModelKind::ALL {
        let mut seen = Vec::new();
        let a = train_model(kind, &data, &cfg, &mut |p| seen.push(*p)).unwrap();
        let b = train_model(kind, &data, &cfg, &mut |_| {}).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(seen, a.curve);
        assert_eq!(a.curve.iter().map(|p| p.step).collect::<Vec<_>>(), vec![5, 10, 15, 20]);
        assert_eq!(a.encode().unwrap(), b.encode().unwrap());
        assert!(a.curve.iter().all(|p| p.train_loss.is_finite() && p.heldout_loss >= 0.0));
    }
    let mut other = cfg;
    other.train.seed = 1;
    let c = train_model(ModelKind::Value, &data, &other, &mut |_| {}).unwrap();
    let a = train_model(ModelKind::Value, &data, &cfg, &mut |_| {}).unwrap();
    assert_ne!(a.curve, c.curve);
}

#[test]
fn checkpoints_roundtrip_and_check_their_kind() {
    let (cfg, data) = tiny_run();
    let out = train_model(ModelKind::Value, &data, &cfg, &mut |_| {}).unwrap();
    let ck = decode_checkpoint(&out.encode().unwrap()).unwrap();
    let (net, meta) = Network::from_checkpoint(&ck, ModelKind::Value).unwrap();
    assert_eq!(meta.horizon, H);
    assert_eq!(meta.normalizer, data.normalizer);
    let x = random_input(&mut rng(9), 2, H);
    assert_eq!(net.predict(&x, &[1, 3]).unwrap(), out.net.predict(&x, &[1, 3]).unwrap());
    match Network::from_checkpoint(&ck, ModelKind::Safety) {
        Err(Error::KindMismatch { expected, found }) => assert_eq!((expected.as_str(), found.as_str()), ("safety", "value")),
        other => panic!("expected a kind mismatch, got {other:?}"),
    }
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let (mut cfg, data) = tiny_run();
    cfg.train.lr = 1e30;
    cfg.train.weight_decay = 0.0;
    match train_model(ModelKind::Dynamics, &data, &cfg, &mut |_| {}) {
        Err(Error::Diverged { step, detail }) => {
            assert!(step >= 1);
            assert!(!detail.is_empty());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.curve)),
    }
}
