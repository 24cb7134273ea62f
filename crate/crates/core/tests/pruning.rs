use metatrack::autodiff::{grad, Tensor};
use metatrack::gradcheck::{numeric_gradient, relative_error};
use metatrack::metalearn::*;
use metatrack::network::{batch_inputs, flatten, Architecture, ConvSpec, ModelParams};
use metatrack::pruning::*;
use metatrack::simworld::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 3x4x4 input, conv 2ch 3x3, conv 3ch 2x2/2, fc 4, fc 2.
fn small_arch() -> Architecture {
    Architecture {
        input_channels: 3,
        input_height: 4,
        input_width: 4,
        convs: vec![
            ConvSpec {
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            ConvSpec {
                out_channels: 3,
                kernel: 2,
                stride: 2,
                padding: 0,
            },
        ],
        fcs: vec![4, 2],
        leaky_slope: 0.1,
    }
}

fn random_theta(arch: &Architecture, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = ModelParams::init(arch, &mut rng).unwrap();
    let tensors = base
        .tensors()
        .into_iter()
        .map(|t| Tensor::param(t.data().iter().map(|v| v + rng.random::<f64>() * 0.2 - 0.1).collect(), t.shape()).unwrap())
        .collect();
    ModelParams::from_tensors(arch, tensors).unwrap()
}

fn random_dataset(arch: &Architecture, kind: DatasetKind, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let samples = (0..n)
        .map(|i| LabeledPatch {
            x: (0..arch.input_len()).map(|_| rng.random::<f64>()).collect(),
            label: if i % 3 == 0 { Label::Positive } else { Label::Negative },
            source_box: BBox::new(0.0, 0.0, 1.0, 1.0),
            iou_with_gt: 0.0,
        })
        .collect();
    Dataset::new(kind, samples)
}

fn trajectory(arch: &Architecture, k_on: usize, seed: u64) -> EpisodeTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meta = MetaParams::with_constant_rates(random_theta(arch, seed + 1), LrMode::PerParameter, 2, k_on, 0.5).unwrap();
    let traj = EpisodeTrajectory {
        video: 0,
        frames: [0, 1, 2, 3, 4, 5],
        d_init: random_dataset(arch, DatasetKind::Init, 5, &mut rng),
        d_on: OnlineCollection {
            dataset: random_dataset(arch, DatasetKind::Online, 4, &mut rng),
            estimated: Vec::new(),
            candidates: Vec::new(),
        },
        d_test_std: random_dataset(arch, DatasetKind::TestStd, 3, &mut rng),
        d_test_hard: None,
        thetas_init: Vec::new(),
        thetas_on: Vec::new(),
    };
    replay_episode(&meta, &traj, &MetaConfig::default(), &mut rng, false).unwrap().trajectory
}

fn random_masks(arch: &Architecture, seed: u64) -> ChannelMaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ChannelMaskSet::from_values(arch.channel_counts().iter().map(|&c| (0..c).map(|_| rng.random::<f64>() * 1.5 - 0.25).collect()).collect()).unwrap()
}

fn total_channels(arch: &Architecture) -> f64 {
    arch.channel_counts().iter().sum::<usize>() as f64
}

/// Direct formula from plain forward passes.
fn lasso_reference(data: &Dataset, masks: &ChannelMaskSet, theta: &ModelParams, lambda: f64, selection: &[usize]) -> f64 {
    let arch = theta.arch();
    let refs: Vec<&[f64]> = data.samples.iter().map(|s| s.x.as_slice()).collect();
    let x = batch_inputs(arch, &refs).unwrap();
    let plain = theta.forward(&x).unwrap().features;
    let masked = theta.forward_masked(&x, masks).unwrap().features;
    let n = data.len();
    let mut recon = 0.0;
    for &l in selection {
        let per = plain[l].numel() / n;
        for i in 0..n {
            let a = &plain[l].data()[i * per..(i + 1) * per];
            let b = &masked[l].data()[i * per..(i + 1) * per];
            recon += a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt() / n as f64;
        }
    }
    let l1: f64 = masks.values().iter().flatten().map(|v| v.abs()).sum();
    lambda * l1 + recon
}

#[test]
fn default_selection_is_last_conv_and_fcs() {
    assert_eq!(default_selection(&small_arch()), vec![1, 2, 3]);
    assert_eq!(default_selection(&Architecture::compact()), vec![1, 2, 3]);
}

#[test]
fn identity_masks_cost_only_the_penalty() {
    let arch = small_arch();
    let traj = trajectory(&arch, 2, 1);
    let ones = ChannelMaskSet::ones(&arch);
    let sel = default_selection(&arch);
    let l = lasso_loss(&traj.d_init, &ones, traj.theta_init_final(), 0.05, &sel).unwrap().item().unwrap();
    assert!((l - 0.05 * total_channels(&arch)).abs() < 1e-12);
    assert_eq!(lasso_loss(&traj.d_init, &ones, traj.theta_init_final(), 0.0, &sel).unwrap().item().unwrap(), 0.0);
    let empty = Dataset::new(DatasetKind::Init, Vec::new());
    assert!(lasso_loss(&empty, &ones, traj.theta_init_final(), 0.05, &sel).is_err());
    assert!(lasso_loss(&traj.d_init, &ones, traj.theta_init_final(), 0.05, &[9]).is_err());
}

#[test]
fn lasso_matches_reference() {
    let arch = small_arch();
    let traj = trajectory(&arch, 2, 2);
    for seed in 0..4 {
        let masks = random_masks(&arch, seed);
        let sel = [0, 1, 2, 3];
        let got = lasso_loss(&traj.d_init, &masks, traj.theta_init_final(), 0.3, &sel).unwrap().item().unwrap();
        let want = lasso_reference(&traj.d_init, &masks, traj.theta_init_final(), 0.3, &sel);
        assert!((got - want).abs() < 1e-10 * want.max(1.0), "{got} vs {want}");
    }
}

#[test]
fn episode_loss_expands_into_lasso_terms() {
    let arch = small_arch();
    let sel = default_selection(&arch);
    for k_on in [1, 3] {
        let traj = trajectory(&arch, k_on, 3 + k_on as u64);
        let masks = random_masks(&arch, 4);
        let lambda = 0.2;
        let mut want = lasso_reference(&traj.d_init, &masks, traj.theta_init_final(), lambda, &sel);
        for theta in &traj.thetas_on[1..] {
            want += lasso_reference(&traj.d_on.dataset, &masks, theta, lambda, &sel);
        }
        want += lasso_reference(&traj.d_test_std, &masks, traj.theta_on_final(), lambda, &sel);
        let got = episode_prune_loss(&traj, &masks, lambda, &sel).unwrap().item().unwrap();
        assert!((got - want).abs() < 1e-10 * want, "k_on {k_on}: {got} vs {want}");

        let ones = episode_prune_loss(&traj, &ChannelMaskSet::ones(&arch), lambda, &sel).unwrap().item().unwrap();
        assert!((ones - lambda * (k_on + 2) as f64 * total_channels(&arch)).abs() < 1e-12);
    }
}

#[test]
fn episode_loss_gradient_matches_finite_differences() {
    let arch = small_arch();
    let traj = trajectory(&arch, 2, 7);
    let sel = default_selection(&arch);
    let masks = random_masks(&arch, 8);
    let point: Vec<Vec<f64>> = masks.values();
    let leaves: Vec<Tensor> = point.iter().map(|v| Tensor::param(v.clone(), &[v.len()]).unwrap()).collect();
    let loss = episode_prune_loss(&traj, &ChannelMaskSet::new(leaves.clone()).unwrap(), 0.1, &sel).unwrap();
    let analytic = flatten(&grad(&loss, &leaves, false).unwrap());
    let f = |p: &[Vec<f64>]| episode_prune_loss(&traj, &ChannelMaskSet::from_values(p.to_vec())?, 0.1, &sel)?.item();
    let numeric: Vec<f64> = numeric_gradient(f, &point, 1e-6).unwrap().concat();
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn constant_predictor_returns_its_bias() {
    let arch = small_arch();
    let traj = trajectory(&arch, 1, 9);
    let phi = PrunerParams::init(&arch, &PrunerShape::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let bias = [0.25, -0.5, 0.75, 2.0];
    let tensors: Vec<Tensor> = phi
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let v = if i % 4 == 3 { bias[i / 4] } else { 0.0 };
            Tensor::param(vec![v; t.numel()], t.shape()).unwrap()
        })
        .collect();
    let phi = phi.with_tensors(tensors).unwrap();
    let masks = predict_masks(&traj.d_init, traj.theta_init_final(), &phi).unwrap();
    for (l, v) in masks.values().iter().enumerate() {
        assert!(v.iter().all(|&x| x == bias[l]));
    }
}

fn leaky(v: f64, s: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        s * v
    }
}

/// Pools and runs each layer's MLP one sample at a time.
fn predictor_reference(data: &Dataset, theta: &ModelParams, phi: &PrunerParams) -> Vec<Vec<f64>> {
    let arch = theta.arch();
    let counts = arch.channel_counts();
    let mut sums: Vec<Vec<f64>> = counts.iter().map(|&c| vec![0.0; c]).collect();
    for s in &data.samples {
        let x = batch_inputs(arch, &[s.x.as_slice()]).unwrap();
        let feats = theta.forward(&x).unwrap().features;
        for (l, f) in feats.iter().enumerate() {
            let c = counts[l];
            let hw = f.numel() / c;
            let pooled: Vec<f64> = (0..c).map(|ch| f.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
            let m = &phi.layers[l];
            let h = m.b1.numel();
            let hidden: Vec<f64> = (0..h)
                .map(|j| leaky(m.b1.data()[j] + (0..c).map(|i| pooled[i] * m.w1.data()[i * h + j]).sum::<f64>(), phi.leaky_slope))
                .collect();
            for o in 0..c {
                sums[l][o] += m.b2.data()[o] + (0..h).map(|j| hidden[j] * m.w2.data()[j * c + o]).sum::<f64>();
            }
        }
    }
    let n = data.len() as f64;
    sums.iter().map(|v| v.iter().map(|x| x / n).collect()).collect()
}

#[test]
fn predictor_matches_per_sample_loop() {
    let arch = small_arch();
    let traj = trajectory(&arch, 1, 10);
    let phi = PrunerParams::init(&arch, &PrunerShape::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    // larger output weights so the inputs matter
    let phi = phi
        .with_tensors(phi.tensors().iter().map(|t| Tensor::param(t.data().iter().map(|v| v * 30.0).collect(), t.shape()).unwrap()).collect())
        .unwrap();
    let mut three = traj.d_init.clone();
    three.samples.truncate(3);
    let got = predict_masks(&three, traj.theta_init_final(), &phi).unwrap().values();
    let want = predictor_reference(&three, traj.theta_init_final(), &phi);
    for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let mut one = traj.d_init.clone();
    one.samples.truncate(1);
    let single = predict_masks(&one, traj.theta_init_final(), &phi).unwrap().values();
    assert_eq!(single.concat().len(), total_channels(&arch) as usize);
    for (a, b) in single.iter().flatten().zip(predictor_reference(&one, traj.theta_init_final(), &phi).iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(predict_masks(&Dataset::new(DatasetKind::Init, Vec::new()), traj.theta_init_final(), &phi).is_err());
}

#[test]
fn initial_predictor_is_near_identity() {
    let arch = small_arch();
    let traj = trajectory(&arch, 2, 11);
    let sel = default_selection(&arch);
    let phi = PrunerParams::init(&arch, &PrunerShape::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let masks = predict_masks(&traj.d_init, traj.theta_init_final(), &phi).unwrap();
    assert!(masks.values().iter().flatten().all(|v| (v - 1.0).abs() < 0.1));
    let (loss, _, _) = prune_gradient(&phi, std::slice::from_ref(&traj), 0.0, &sel, None).unwrap();
    assert!(loss < 0.5, "{loss}");

    // with zero output weights the masks are exactly one: zero loss and gradient
    let exact = phi
        .with_tensors(
            phi.tensors()
                .iter()
                .enumerate()
                .map(|(i, t)| if i % 4 == 2 { Tensor::param(vec![0.0; t.numel()], t.shape()).unwrap() } else { t.clone() })
                .collect(),
        )
        .unwrap();
    let (loss, _, g) = prune_gradient(&exact, &[traj], 0.0, &sel, None).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn predictor_gradient_matches_finite_differences() {
    let arch = small_arch();
    let traj = trajectory(&arch, 2, 12);
    let sel = default_selection(&arch);
    let phi = PrunerParams::init(&arch, &PrunerShape::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (_, _, analytic) = prune_gradient(&phi, std::slice::from_ref(&traj), 0.05, &sel, None).unwrap();
    let f = |p: &[Vec<f64>]| {
        let m = predict_masks(&traj.d_init, traj.theta_init_final(), &phi.unflatten_like(&p[0])?)?;
        episode_prune_loss(&traj, &m, 0.05, &sel)?.item()
    };
    let numeric = numeric_gradient(f, &[phi.flatten()], 1e-6).unwrap().remove(0);
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn dropout_only_applies_when_training() {
    let arch = small_arch();
    let traj = trajectory(&arch, 1, 13);
    let phi = PrunerParams::init(&arch, &PrunerShape::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let pooled = pooled_features(&traj.d_init, traj.theta_init_final()).unwrap();
    let eval_a = predict_from_pooled(&pooled, &phi, None).unwrap().values();
    let eval_b = predict_masks(&traj.d_init, traj.theta_init_final(), &phi).unwrap().values();
    assert_eq!(eval_a, eval_b);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let train = predict_from_pooled(&pooled, &phi, Some(&mut rng)).unwrap().values();
    assert_ne!(train, eval_a);
}

#[test]
fn threshold_tie_break_and_counts() {
    let soft = ChannelMaskSet::from_values(vec![vec![0.5; 4], vec![0.5; 6], vec![1.0, 1.0]]).unwrap();
    let t = threshold_masks(&soft, ThresholdPolicy::TopFraction(0.5)).unwrap();
    assert_eq!(t.masks.values(), vec![vec![1.0, 1.0, 0.0, 0.0], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0], vec![1.0, 1.0]]);
    assert!((t.prune_rate - 5.0 / 12.0).abs() < 1e-12);

    let low = threshold_masks(&soft, ThresholdPolicy::Absolute(0.1)).unwrap();
    assert_eq!(low.prune_rate, 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let values: Vec<Vec<f64>> = [5, 7, 9, 2].iter().map(|&c| (0..c).map(|_| rng.random::<f64>()).collect()).collect();
    let soft = ChannelMaskSet::from_values(values.clone()).unwrap();
    let t = threshold_masks(&soft, ThresholdPolicy::Absolute(0.4)).unwrap();
    let below = values[..3].iter().flatten().filter(|&&v| v < 0.4).count();
    let clamped = t.clamped_layers.len();
    assert_eq!(clamped, 0);
    assert!((t.prune_rate - below as f64 / 23.0).abs() < 1e-12);
}

#[test]
fn threshold_never_empties_a_layer() {
    let soft = ChannelMaskSet::from_values(vec![vec![0.1, 0.3, 0.2], vec![0.9, 0.8], vec![0.0, 0.0]]).unwrap();
    let t = threshold_masks(&soft, ThresholdPolicy::Absolute(0.5)).unwrap();
    assert_eq!(t.masks.values()[0], vec![0.0, 1.0, 0.0]);
    assert_eq!(t.masks.values()[2], vec![1.0, 1.0]);
    assert_eq!(t.clamped_layers, vec![0]);
    let all = threshold_masks(&soft, ThresholdPolicy::TopFraction(1.0)).unwrap();
    assert!(all.masks.active().iter().all(|l| l.iter().any(|&k| k)));
    assert!(threshold_masks(&ChannelMaskSet::from_values(vec![vec![f64::NAN]]).unwrap(), ThresholdPolicy::Absolute(0.5)).is_err());
}

#[test]
fn oracle_extremes() {
    let arch = small_arch();
    let traj = trajectory(&arch, 2, 14);
    let sel = default_selection(&arch);
    let cfg = OracleConfig {
        iters: 40,
        step: 0.01,
        patience: 10,
    };
    let (masks, hist) = oracle_masks(&traj, 0.0, &sel, &cfg).unwrap();
    assert_eq!(hist[0], 0.0);
    assert!(hist.iter().all(|&v| v < 1e-9));
    assert!(masks.values().iter().flatten().all(|&v| (v - 1.0).abs() < 1e-9));

    let strong = OracleConfig {
        iters: 150,
        step: 0.02,
        patience: 10,
    };
    let lambda = 2.0;
    let (masks, hist) = oracle_masks(&traj, lambda, &sel, &strong).unwrap();
    let mean = masks.l1() / total_channels(&arch);
    assert!(mean < 0.1, "mean |beta| {mean}");
    let penalty = lambda * 4.0 * masks.l1();
    assert!(hist.last().unwrap() - penalty > penalty, "reconstruction should dominate");
    assert!(hist.last().unwrap() < &hist[0]);
}

#[test]
fn oracle_beats_an_untrained_predictor() {
    let arch = small_arch();
    let traj = trajectory(&arch, 2, 15);
    let sel = default_selection(&arch);
    let lambda = 0.3;
    let cfg = OracleConfig {
        iters: 200,
        step: 0.01,
        patience: 10,
    };
    let (oracle, hist) = oracle_masks(&traj, lambda, &sel, &cfg).unwrap();
    let phi = PrunerParams::init(&arch, &PrunerShape::default(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let predicted = predict_masks(&traj.d_init, traj.theta_init_final(), &phi).unwrap();
    let p = episode_prune_loss(&traj, &predicted, lambda, &sel).unwrap().item().unwrap();
    let o = episode_prune_loss(&traj, &oracle, lambda, &sel).unwrap().item().unwrap();
    assert_eq!(o, *hist.last().unwrap());
    assert!(o <= p, "{o} > {p}");
}

#[test]
fn oracle_reports_divergence() {
    let arch = small_arch();
    let traj = trajectory(&arch, 1, 16);
    let cfg = OracleConfig {
        iters: 100,
        step: 50.0,
        patience: 3,
    };
    assert!(matches!(oracle_masks(&traj, 1.0, &default_selection(&arch), &cfg), Err(metatrack::Error::Diverged(_) | metatrack::Error::NonFinite { .. })));
}

fn sweep_l1(lambda: f64, seed: u64) -> f64 {
    let set = generate_video_set(
        &SimConfig {
            num_videos: 4,
            ..SimConfig::default()
        },
        seed,
    )
    .unwrap();
    let mcfg = MetaConfig {
        k_init: 1,
        k_on: 1,
        hard_examples: false,
        online_from_ground_truth: true,
        ..MetaConfig::default()
    };
    let arch = Architecture::compact();
    let meta = MetaParams::init(&arch, &mcfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let phi = PrunerParams::init(&arch, &PrunerShape::default(), &mut ChaCha8Rng::seed_from_u64(seed + 1)).unwrap();
    let cfg = PrunerTrainConfig {
        lambda,
        steps: 8,
        batch: 1,
        adam: AdamConfig {
            lr: 0.02,
            ..AdamConfig::default()
        },
        ..PrunerTrainConfig::default()
    };
    let mut last = f64::NAN;
    let mut state = AdamState::default();
    train_pruner(&phi, &meta, &set, &[0, 1, 2, 3], &mcfg, &cfg, &mut state, &mut ChaCha8Rng::seed_from_u64(seed + 2), |r, _| {
        last = r.mask_l1;
        Ok(())
    })
    .unwrap();
    last
}

#[test]
fn larger_lambda_gives_sparser_masks() {
    for seed in [40, 41] {
        let l1: Vec<f64> = [0.0, 0.5, 5.0].iter().map(|&l| sweep_l1(l, seed)).collect();
        assert!(l1.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {l1:?}");
    }
}

#[test]
fn prune_report_counts() {
    let arch = Architecture::compact();
    let soft = ChannelMaskSet::from_values(arch.channel_counts().iter().map(|&c| (0..c).map(|i| i as f64).collect()).collect()).unwrap();
    let t = threshold_masks(&soft, ThresholdPolicy::TopFraction(0.5)).unwrap();
    let (layers, before, after) = prune_report(&arch, &t.masks).unwrap();
    assert_eq!(layers.iter().map(|l| l.kept).collect::<Vec<_>>(), vec![2, 4, 8, 2]);
    assert_eq!(before, arch.flop_count(None));
    assert!(after * 2 < before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn identity_reconstruction_is_zero(seed in 0u64..500) {
        let arch = small_arch();
        let theta = random_theta(&arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_dataset(&arch, DatasetKind::Init, 3, &mut rng);
        let l = lasso_loss(&data, &ChannelMaskSet::ones(&arch), &theta, 0.0, &[0, 1, 2, 3]).unwrap().item().unwrap();
        prop_assert_eq!(l, 0.0);
    }

    #[test]
    fn predictor_ignores_sample_order(seed in 0u64..500) {
        let arch = small_arch();
        let traj = trajectory(&arch, 1, seed);
        let phi = PrunerParams::init(&arch, &PrunerShape::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = predict_masks(&traj.d_init, traj.theta_init_final(), &phi).unwrap().values();
        let mut rev = traj.d_init.clone();
        rev.samples.reverse();
        let b = predict_masks(&rev, traj.theta_init_final(), &phi).unwrap().values();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn thresholding_keeps_every_layer(values in proptest::collection::vec(proptest::collection::vec(-1.0f64..2.0, 1..6), 2..5), t in -1.0f64..2.0, rate in 0.0f64..1.0) {
        let soft = ChannelMaskSet::from_values(values.clone()).unwrap();
        for policy in [ThresholdPolicy::Absolute(t), ThresholdPolicy::TopFraction(rate)] {
            let out = threshold_masks(&soft, policy).unwrap();
            prop_assert!(out.masks.active().iter().all(|l| l.iter().any(|&k| k)));
            prop_assert!(out.masks.active().last().unwrap().iter().all(|&k| k));
            prop_assert!((0.0..1.0).contains(&out.prune_rate));
        }
    }
}
