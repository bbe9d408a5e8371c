use alloc::vec;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::distributions::{GaussianParams, PROB_FLOOR};
use crate::envs::{Env, EnvKind};
use crate::gradcheck::check_param_gradients;
use crate::optim::AdamState;
use crate::replay::{Episode, ReplayBuffer, ReplayLayout};

fn small_config(fusion: FusionMode, family: LatentFamily) -> ModelConfig {
    let mut c = ModelConfig::new(2, 6, 1);
    c.crop_size = 4;
    c.fusion = fusion;
    c.family = family;
    c.deter = 5;
    c.hidden = 7;
    c.embed = 4;
    c
}

fn random_batch(views: usize, image: usize, action_dim: usize, b: usize, l: usize, seed: u64) -> EpisodeBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = ReplayLayout {
        views,
        steps: l,
        height: image,
        width: image,
        action_dim,
    };
    EpisodeBatch {
        batch: b,
        length: l,
        layout,
        images: (0..b * l * layout.frame_len()).map(|_| rng.random()).collect(),
        actions: (0..b * l * action_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        rewards: (0..b * l).map(|_| rng.random_range(-1.0..1.0)).collect(),
        origins: (0..b).map(|i| (i as u64, 0)).collect(),
    }
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

#[test]
fn fusion_mode_parsing() {
    for s in ["poe", "channel_stack", "single_view:2"] {
        assert_eq!(s.parse::<FusionMode>().unwrap().to_string(), s);
    }
    assert!("single_view:x".parse::<FusionMode>().is_err());
    let mut c = ModelConfig::new(2, 24, 1);
    c.fusion = FusionMode::SingleView(3);
    assert!(c.validate().is_err());
    c.fusion = FusionMode::SingleView(0);
    assert!(c.validate().is_err());
}

#[test]
fn recurrent_step_zero_weights_and_determinism() {
    let cfg = ModelConfig::new(2, 24, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (wm, mut ps) = WorldModel::new::<f64>(cfg, &mut rng).unwrap();
    let run = |ps: &ParamSet<f64>, z: f64| {
        let g = Graph::new();
        let vars = ps.bind(&g, false);
        let mut st = wm.initial_state(&g, 3);
        st.stoch.value = g.constant(&Tensor::full(&[3, 32], z));
        let a = g.constant(&Tensor::full(&[3, 1], z));
        let h = wm.recurrent_step(&g, &vars, st, a).unwrap();
        g.value(h)
    };
    assert_eq!(run(&ps, 0.3), run(&ps, 0.3));
    for id in [wm.gru.input_weight, wm.gru.hidden_weight, wm.gru.bias] {
        ps.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    assert!(run(&ps, 0.0).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gradient_through_five_recurrent_steps() {
    let cfg = small_config(FusionMode::Poe, LatentFamily::Gaussian { dim: 3 });
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (wm, ps) = WorldModel::new::<f64>(cfg, &mut rng).unwrap();
    let ids = [wm.gru.input_weight, wm.gru.hidden_weight, wm.gru.bias];
    let mut inputs: Vec<Tensor<f64>> = ids.iter().map(|&i| ps.tensor(i).clone()).collect();
    inputs.push(random_tensor(&mut rng, &[5, 2, 3], 1.0));
    inputs.push(random_tensor(&mut rng, &[5, 2, 1], 1.0));
    inputs.push(random_tensor(&mut rng, &[2, 5], 0.5));
    let probes: Vec<(usize, usize)> = (0..inputs.len())
        .flat_map(|p| (0..inputs[p].len()).step_by(3).map(move |i| (p, i)))
        .collect();
    let wm_ref = &wm;
    let report = check_param_gradients(
        |g, v| {
            let mut vars: Vec<Var> = (0..ps.len()).map(|i| g.constant(ps.tensor(i))).collect();
            for (k, &id) in ids.iter().enumerate() {
                vars[id] = v[k];
            }
            let mut st = wm_ref.initial_state(g, 2);
            st.deter = v[5];
            for t in 0..5 {
                st.stoch.value = g.reshape(g.slice_rows(g.reshape(v[3], &[10, 3])?, 2 * t, 2 * t + 2)?, &[2, 3])?;
                let a = g.slice_rows(g.reshape(v[4], &[10, 1])?, 2 * t, 2 * t + 2)?;
                st.deter = wm_ref.recurrent_step(g, &vars, st, a)?;
            }
            Ok(g.sum(g.square(st.deter)))
        },
        &inputs,
        &probes,
        1e-4,
        &[],
    )
    .unwrap();
    assert!(report.passed(), "max rel error {}", report.max_rel_error());
}

#[test]
fn representation_std_floor_and_categorical_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for family in [LatentFamily::Gaussian { dim: 32 }, LatentFamily::Categorical { factors: 8, classes: 8 }] {
        let mut cfg = ModelConfig::new(2, 24, 1);
        cfg.family = family;
        let (wm, ps) = WorldModel::new::<f64>(cfg, &mut rng).unwrap();
        let g = Graph::new();
        let vars = ps.bind(&g, false);
        let h = g.constant(&random_tensor(&mut rng, &[4, 64], 3.0));
        let x = g.constant(&random_tensor(&mut rng, &[4, 256], 5.0));
        let p = wm.represent_view(&g, &vars, h, x).unwrap();
        let again = wm.represent_view(&g, &vars, h, x).unwrap();
        match (p, again) {
            (LatentParams::Gaussian(p), LatentParams::Gaussian(q)) => {
                assert!(g.data(p.std).iter().all(|&s| s >= 0.1));
                assert_eq!(g.value(p.mean), g.value(q.mean));
            }
            (LatentParams::Categorical(p), LatentParams::Categorical(_)) => {
                let probs = g.data(p.probs(&g)).to_vec();
                for row in probs.chunks(8) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
            _ => unreachable!(),
        }
    }
}

#[test]
fn fuse_posteriors_identity_and_precision_additivity() {
    let cfg = ModelConfig::new(2, 24, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (wm, _) = WorldModel::new::<f64>(cfg, &mut rng).unwrap();
    let g = Graph::<f64>::new();
    assert!(wm.fuse_posteriors(&g, &[]).is_err());
    let mu = [0.3, -1.0, 2.0];
    let sd = [[0.5, 1.0, 2.0], [1.5, 0.2, 0.7]];
    let experts: Vec<LatentParams> = (0..2)
        .map(|v| {
            LatentParams::Gaussian(GaussianParams {
                mean: g.constant(&Tensor::from_f64(&[1, 3], &mu.map(|m| m * (v as f64 + 1.0))).unwrap()),
                std: g.constant(&Tensor::from_f64(&[1, 3], &sd[v]).unwrap()),
            })
        })
        .collect();
    assert_eq!(wm.fuse_posteriors(&g, &experts[..1]).unwrap(), experts[0]);
    let LatentParams::Gaussian(f) = wm.fuse_posteriors(&g, &experts).unwrap() else {
        unreachable!()
    };
    for d in 0..3 {
        let p: Vec<f64> = (0..2).map(|v| 1.0 / (sd[v][d] * sd[v][d])).collect();
        let fused_var = g.data(f.std)[d].powi(2);
        assert!((1.0 / fused_var - (p[0] + p[1])).abs() < 1e-9);
        let mean = (mu[d] * p[0] + 2.0 * mu[d] * p[1]) / (p[0] + p[1]);
        assert!((g.data(f.mean)[d] - mean).abs() < 1e-9);
    }
}

#[test]
fn duplicate_views_halve_variance_or_leave_categorical_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for family in [LatentFamily::Gaussian { dim: 32 }, LatentFamily::Categorical { factors: 8, classes: 8 }] {
        let mut cfg = ModelConfig::new(2, 24, 1);
        cfg.family = family;
        let (wm, ps) = WorldModel::new::<f64>(cfg, &mut rng).unwrap();
        let g = Graph::new();
        let vars = ps.bind(&g, false);
        let h = g.constant(&random_tensor(&mut rng, &[3, 64], 1.0));
        let x = random_tensor(&mut rng, &[3, 256], 1.0);
        let single = wm.represent_view(&g, &vars, h, g.constant(&x)).unwrap();
        let doubled = Tensor::new(&[6, 256], [x.data(), x.data()].concat()).unwrap();
        let fused = wm.posterior(&g, &vars, h, g.constant(&doubled)).unwrap();
        match (single, fused) {
            (LatentParams::Gaussian(s), LatentParams::Gaussian(f)) => {
                for (a, b) in g.data(s.std).iter().zip(g.data(f.std).iter()) {
                    assert!((b * b - 0.5 * a * a).abs() < 1e-12);
                }
                for (a, b) in g.data(s.mean).iter().zip(g.data(f.mean).iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            (LatentParams::Categorical(s), LatentParams::Categorical(f)) => {
                let (sp, fp) = (s.probs(&g), f.probs(&g));
                let (ps_, pf) = (g.data(sp).to_vec(), g.data(fp).to_vec());
                for (a, b) in ps_.iter().zip(&pf) {
                    assert!((a.max(PROB_FLOOR) - b).abs() < 1e-9);
                }
            }
            _ => unreachable!(),
        }
    }
}

#[test]
fn prior_family_matches_and_kl_is_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for family in [LatentFamily::Gaussian { dim: 32 }, LatentFamily::Categorical { factors: 8, classes: 8 }] {
        let mut cfg = ModelConfig::new(2, 24, 1);
        cfg.family = family;
        let (wm, ps) = WorldModel::new::<f64>(cfg, &mut rng).unwrap();
        let g = Graph::new();
        let vars = ps.bind(&g, false);
        let h = g.constant(&random_tensor(&mut rng, &[100, 64], 3.0));
        let x = g.constant(&random_tensor(&mut rng, &[100, 256], 1.0));
        let post = wm.represent_view(&g, &vars, h, x).unwrap();
        let prior = wm.transition_predict(&g, &vars, h).unwrap();
        assert_eq!(
            core::mem::discriminant(&post),
            core::mem::discriminant(&prior)
        );
        let kl = distributions::kl_divergence(&g, &post, &prior).unwrap();
        assert_eq!(g.shape(kl), [100]);
        assert!(g.data(kl).iter().all(|v| v.is_finite() && *v >= -1e-9));
    }
}

#[test]
fn reward_head_zero_weights_and_gradient() {
    let cfg = small_config(FusionMode::Poe, LatentFamily::Gaussian { dim: 3 });
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (wm, mut ps) = WorldModel::new::<f64>(cfg, &mut rng).unwrap();
    let feat = random_tensor(&mut rng, &[4, 8], 1.0);
    let target = random_tensor(&mut rng, &[4, 1], 1.0);
    let ids: Vec<usize> = wm.reward.layers.iter().flat_map(|l| [l.weight, l.bias]).collect();
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&i| ps.tensor(i).clone()).collect();
    let probes: Vec<(usize, usize)> = (0..inputs.len())
        .flat_map(|p| (0..inputs[p].len()).step_by(2).map(move |i| (p, i)))
        .collect();
    let report = check_param_gradients(
        |g, v| {
            let mut vars: Vec<Var> = (0..ps.len()).map(|i| g.constant(ps.tensor(i))).collect();
            for (k, &id) in ids.iter().enumerate() {
                vars[id] = v[k];
            }
            let pred = wm.predict_reward(g, &vars, g.constant(&feat))?;
            Ok(g.mean(g.squared_error(pred, g.constant(&target))?))
        },
        &inputs,
        &probes,
        1e-4,
        &[],
    )
    .unwrap();
    assert!(report.passed(), "max rel error {}", report.max_rel_error());

    for &id in &ids {
        ps.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let g = Graph::new();
    let vars = ps.bind(&g, false);
    let pred = wm.predict_reward(&g, &vars, g.constant(&feat)).unwrap();
    assert!(g.data(pred).iter().all(|&v| v == 0.0));
}

#[test]
fn reward_head_fits_constant_reward() {
    let cfg = ModelConfig::new(2, 24, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (wm, mut ps) = WorldModel::new::<f32>(cfg, &mut rng).unwrap();
    let mut adam = AdamState::new(&ps);
    let ids: Vec<usize> = wm.reward.layers.iter().flat_map(|l| [l.weight, l.bias]).collect();
    for _ in 0..200 {
        let feats = random_tensor(&mut rng, &[16, 96], 1.0).cast::<f32>();
        let g = Graph::new();
        let vars = ps.bind(&g, true);
        let pred = wm.predict_reward(&g, &vars, g.constant(&feats)).unwrap();
        let loss = g.mean(g.square(g.add_scalar(pred, -1.0)));
        let mut grads = g.backward(loss).unwrap();
        // only the reward head is being fit
        let keep: Vec<Option<Tensor<f32>>> = (0..ps.len())
            .map(|i| ids.contains(&i).then(|| grads.get(i).unwrap().clone()))
            .collect();
        grads = crate::autodiff::GradientMap::from_entries(keep);
        crate::optim::adam_step(&mut ps, &grads, &mut adam, &crate::optim::AdamConfig::default()).unwrap();
    }
    let g = Graph::new();
    let vars = ps.bind(&g, false);
    let fresh = random_tensor(&mut rng, &[32, 96], 1.0).cast::<f32>();
    let pred = wm.predict_reward(&g, &vars, g.constant(&fresh)).unwrap();
    let mean = g.data(pred).iter().map(|&v| v as f64).sum::<f64>() / 32.0;
    assert!((mean - 1.0).abs() < 0.05, "mean prediction {mean}");
}

#[test]
fn contrastive_counting_and_positive_sets() {
    let cfg = ModelConfig::new(2, 24, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (wm, _) = WorldModel::new::<f32>(cfg.clone(), &mut rng).unwrap();
    let batch = random_batch(2, 24, 1, 1, 4, 1);
    let cb = wm.build_contrastive_batch::<f32>(&batch, &mut rng).unwrap();
    assert_eq!(cb.len(), 8);
    assert_eq!(cb.positives.len(), 4);
    for (t, set) in cb.positives.iter().enumerate() {
        assert_eq!(set.len(), 2);
        // candidate j shows step j / V
        assert!(set.iter().all(|&j| j / 2 == t));
    }

    let short = random_batch(2, 24, 1, 3, 1, 2);
    assert!(wm.build_contrastive_batch::<f32>(&short, &mut rng).is_err());

    let mut single = cfg;
    single.fusion = FusionMode::SingleView(1);
    let (wm1, _) = WorldModel::new::<f32>(single, &mut rng).unwrap();
    let batch = random_batch(2, 24, 1, 2, 3, 3);
    let cb = wm1.build_contrastive_batch::<f32>(&batch, &mut rng).unwrap();
    assert_eq!(cb.len(), 6);
    assert!(cb.positives.iter().enumerate().all(|(i, s)| s == &vec![i]));
}

#[test]
fn channel_stack_uses_shared_crop_offsets() {
    let mut cfg = ModelConfig::new(2, 24, 1);
    cfg.fusion = FusionMode::ChannelStack;
    cfg.crop_jitter = None;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (wm, _) = WorldModel::new::<f32>(cfg, &mut rng).unwrap();
    assert_eq!(wm.config.input_dim(), 512);
    // identical views in both channels must give identical halves
    let mut batch = random_batch(2, 24, 1, 2, 3, 4);
    let n = 24 * 24;
    for rec in batch.images.chunks_mut(2 * n) {
        let (a, b) = rec.split_at_mut(n);
        b.copy_from_slice(a);
    }
    let obs = wm.observations::<f32>(&batch, true, &mut rng).unwrap();
    for row in obs.posterior.data().chunks(512) {
        assert_eq!(row[..256], row[256..]);
    }
}

fn micro_setup(family: LatentFamily) -> (WorldModel, ParamSet<f64>, Observations<f64>, ContrastiveBatch<f64>) {
    micro_setup_with(family, true)
}

fn micro_setup_with(family: LatentFamily, balance_kl: bool) -> (WorldModel, ParamSet<f64>, Observations<f64>, ContrastiveBatch<f64>) {
    let mut cfg = ModelConfig::new(2, 24, 1);
    cfg.family = family;
    cfg.balance_kl = balance_kl;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (wm, ps) = WorldModel::new::<f64>(cfg, &mut rng).unwrap();
    let batch = random_batch(2, 24, 1, 2, 3, 5);
    let obs = wm.observations(&batch, true, &mut rng).unwrap();
    let cb = wm.build_contrastive_batch(&batch, &mut rng).unwrap();
    (wm, ps, obs, cb)
}

#[test]
fn end_to_end_objective_matches_finite_differences() {
    // balancing reroutes gradients through stop-gradients, which finite
    // differences of the loss value cannot see; its split is checked below
    let (wm, ps, obs, cb) = micro_setup_with(LatentFamily::Gaussian { dim: 32 }, false);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let non_decoder = wm.non_decoder_params(ps.len());
    let probes: Vec<(usize, usize)> = (0..10)
        .map(|_| {
            let p = non_decoder[rng.random_range(0..non_decoder.len())];
            (p, rng.random_range(0..ps.tensor(p).len()))
        })
        .collect();
    let report = check_param_gradients(
        |g, vars| {
            let mut noise = ChaCha8Rng::seed_from_u64(99);
            let lv = wm.loss(g, vars, &obs, &cb, &mut noise)?;
            g.add(lv.nce, lv.kl)
        },
        ps.tensors(),
        &probes,
        1e-3,
        &[],
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
}

#[test]
fn balanced_kl_splits_the_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut cfg = ModelConfig::new(2, 24, 1);
    cfg.family = LatentFamily::Gaussian { dim: 3 };
    cfg.free_nats = 0.0;
    let (wm, _) = WorldModel::new::<f64>(cfg, &mut rng).unwrap();
    let inputs: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&mut rng, &[2, 3], 1.0)).collect();
    let gauss = |g: &Graph<f64>, m: Var, s: Var| {
        LatentParams::Gaussian(GaussianParams {
            mean: m,
            std: g.add_scalar(g.softplus(s), 0.1),
        })
    };
    let probes: Vec<(usize, usize)> = (0..4).flat_map(|p| (0..6).map(move |i| (p, i))).collect();
    let plain = check_param_gradients(
        |g, v| Ok(g.mean(distributions::kl_divergence(g, &gauss(g, v[0], v[1]), &gauss(g, v[2], v[3]))?)),
        &inputs,
        &probes,
        1e-6,
        &[],
    )
    .unwrap();
    let g = Graph::new();
    let v: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
    let loss = wm.balanced_kl(&g, &gauss(&g, v[0], v[1]), &gauss(&g, v[2], v[3])).unwrap();
    let grads = g.backward(loss).unwrap();
    for e in &plain.entries {
        // posterior parameters get 1 − α of the gradient, prior parameters α
        let w = if e.param < 2 { 0.2 } else { 0.8 };
        let analytic = grads.get(e.param).unwrap().data()[e.index];
        assert!((analytic - w * e.numeric).abs() < 1e-6, "{e:?}");
    }
}

#[test]
fn free_nats_floor_the_kl_and_its_gradient() {
    let mut cfg = ModelConfig::new(2, 24, 1);
    cfg.family = LatentFamily::Gaussian { dim: 2 };
    let (mut wm, _) = WorldModel::new::<f64>(cfg, &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
    let kl_at = |wm: &WorldModel, mean: f64| {
        let g = Graph::<f64>::new();
        let m = g.param(0, &Tensor::from_f64(&[1, 2], &[mean, mean]).unwrap());
        let std = g.constant(&Tensor::full(&[1, 2], 1.0));
        let zero = g.constant(&Tensor::zeros(&[1, 2]));
        let q = LatentParams::Gaussian(GaussianParams { mean: m, std });
        let p = LatentParams::Gaussian(GaussianParams { mean: zero, std });
        let kl = wm.balanced_kl(&g, &q, &p).unwrap();
        let value = g.item(kl);
        let grad = g.backward(kl).unwrap().get(0).map_or(0.0, |t| t.data()[0]);
        (value, grad)
    };
    // KL of the pair is mean² nats: 0.25 below a 1-nat floor, 4 above it
    wm.config.free_nats = 1.0;
    assert_eq!(kl_at(&wm, 0.5), (1.0, 0.0));
    let above = kl_at(&wm, 2.0);
    wm.config.free_nats = 0.0;
    assert_eq!(above, kl_at(&wm, 2.0));
    assert!((above.0 - 4.0).abs() < 1e-12);
}

#[test]
fn training_crops_stay_within_the_jitter() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (jitter, lo, hi) in [(Some(0), 4, 4), (Some(2), 2, 6), (Some(9), 0, 8), (None, 0, 8)] {
        let mut cfg = ModelConfig::new(2, 24, 1);
        cfg.crop_jitter = jitter;
        let (wm, _) = WorldModel::new::<f32>(cfg, &mut rng).unwrap();
        let (mut seen_lo, mut seen_hi) = (usize::MAX, 0);
        for _ in 0..500 {
            let (x, y) = wm.offset(true, &mut rng);
            seen_lo = seen_lo.min(x).min(y);
            seen_hi = seen_hi.max(x).max(y);
        }
        assert_eq!((seen_lo, seen_hi), (lo, hi), "{jitter:?}");
        assert_eq!(wm.offset(false, &mut rng), (4, 4));
    }
}

#[test]
fn reconstruction_gradient_stops_at_the_decoder() {
    for family in [LatentFamily::Gaussian { dim: 32 }, LatentFamily::Categorical { factors: 8, classes: 8 }] {
        let (wm, ps, obs, cb) = micro_setup(family);
        let g = Graph::new();
        let vars = ps.bind(&g, true);
        let lv = wm.loss(&g, &vars, &obs, &cb, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let recon = g.value(lv.reconstruction).item();
        assert!((0.0..=1.0).contains(&recon));
        let grads = g.backward(lv.reconstruction).unwrap();
        for id in wm.non_decoder_params(ps.len()) {
            let gt = grads.get(id).unwrap();
            assert!(gt.data().iter().all(|v| v.to_bits() == 0), "{}", ps.name(id));
        }
        let decoder_norm: f64 = wm
            .decoder_params
            .clone()
            .map(|id| grads.get(id).unwrap().data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!(decoder_norm > 0.0);
    }
}

#[test]
fn decoder_output_in_unit_range() {
    let (wm, ps, _, _) = micro_setup(LatentFamily::Gaussian { dim: 32 });
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let g = Graph::new();
    let vars = ps.bind(&g, false);
    let feat = g.constant(&random_tensor(&mut rng, &[5, 96], 50.0));
    let out = wm.decode(&g, &vars, feat).unwrap();
    assert_eq!(g.shape(out), [5, 512]);
    assert!(g.data(out).iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn total_gradient_ignores_decoder_weights() {
    let (wm, mut ps, obs, cb) = micro_setup(LatentFamily::Gaussian { dim: 32 });
    let grads_of_total = |ps: &ParamSet<f64>| {
        let g = Graph::new();
        let vars = ps.bind(&g, true);
        let lv = wm.loss(&g, &vars, &obs, &cb, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        g.backward(lv.total).unwrap()
    };
    let before = grads_of_total(&ps);
    for id in wm.decoder_params.clone() {
        ps.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = -*v + 0.25);
    }
    let after = grads_of_total(&ps);
    for id in wm.non_decoder_params(ps.len()) {
        assert_eq!(before.get(id), after.get(id), "{}", ps.name(id));
    }
}

#[test]
fn zero_overshoot_is_one_step_nce_plus_one_step_kl() {
    let mut cfg = ModelConfig::new(2, 24, 1);
    cfg.overshoot = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (wm, ps) = WorldModel::new::<f64>(cfg, &mut rng).unwrap();
    let batch = random_batch(2, 24, 1, 2, 4, 6);
    let obs = wm.observations(&batch, true, &mut rng).unwrap();
    let cb = wm.build_contrastive_batch(&batch, &mut rng).unwrap();
    let g = Graph::new();
    let vars = ps.bind(&g, false);
    let lv = wm.loss(&g, &vars, &obs, &cb, &mut rng).unwrap();
    let cands = wm.embed(&g, &vars, g.constant(&cb.candidates)).unwrap();
    let nce = wm.nce_term(&g, &vars, lv.stoch, cands, &cb.positives).unwrap();
    assert!((g.item(nce) - g.item(lv.nce)).abs() < 1e-12);

    // the single KL term pairs every posterior with the one-step prior
    let filter_post = wm.posterior(
        &g,
        &vars,
        g.slice_rows(lv.deter, 0, 2).unwrap(),
        g.slice_rows(g.constant(&obs.posterior), 0, 4).unwrap(),
    );
    assert!(filter_post.is_ok());
    assert!(g.item(lv.kl).is_finite() && g.item(lv.kl) >= 0.0);
}

#[test]
fn identical_seeds_give_identical_loss_sequences() {
    let run = || {
        let env = Env::new(EnvKind::DualPendulum);
        let layout = ReplayLayout {
            views: 2,
            steps: 21,
            height: 24,
            width: 24,
            action_dim: 1,
        };
        let mut buf = ReplayBuffer::new(layout, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for id in 0..3 {
            let ep = Episode::record(&env, id, id, 20, 2, |_, _, _| vec![rng.random_range(-1.0..1.0)]);
            buf.append(ep).unwrap();
        }
        let (wm, mut ps) = WorldModel::new::<f32>(ModelConfig::new(2, 24, 1), &mut rng).unwrap();
        let mut adam = AdamState::new(&ps);
        (0..3)
            .map(|_| {
                let batch = buf.sample_batch(4, 8, &mut rng).unwrap();
                train_step(&wm, &mut ps, &mut adam, &batch, &mut rng).unwrap().losses
            })
            .collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().all(|l| l.is_finite()));
}
