use metatrack::autodiff::{
    backward, backward_create_graph, forward_primitive, grad, grad_with_schedule, Primitive, Schedule, Tensor,
};
use metatrack::gradcheck::{numeric_gradient, relative_error, FD_STEP};
use metatrack::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

/// Values bounded away from zero, for kinks and domains.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = 0.2 + rng.random::<f64>();
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn positive(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| 0.3 + rng.random::<f64>()).collect()
}

/// Reduces a primitive's output to a scalar with fixed random weights.
fn weighted(out: &Tensor, weights_seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = Tensor::new(randn(&mut rng, out.numel()), out.shape())?;
    out.mul(&w).map(|t| t.sum())
}

fn check_primitive(prim: Primitive, inputs: Vec<(Vec<f64>, Vec<usize>)>) {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|(_, s)| s.clone()).collect();
    let point: Vec<Vec<f64>> = inputs.into_iter().map(|(d, _)| d).collect();

    let leaves: Vec<Tensor> = point.iter().zip(&shapes).map(|(d, s)| Tensor::param(d.clone(), s).unwrap()).collect();
    let loss = weighted(&forward_primitive(&prim, &leaves).unwrap(), 99).unwrap();
    let grads = backward(&loss).unwrap();

    let f = |p: &[Vec<f64>]| -> Result<f64> {
        let ts: Vec<Tensor> = p.iter().zip(&shapes).map(|(d, s)| Tensor::new(d.clone(), s)).collect::<Result<_>>()?;
        weighted(&forward_primitive(&prim, &ts)?, 99)?.item()
    };
    let numeric = numeric_gradient(f, &point, FD_STEP).unwrap();
    for (leaf, fd) in leaves.iter().zip(&numeric) {
        let analytic = grads.get_or_zeros(leaf).to_vec();
        let err = relative_error(&analytic, fd);
        assert!(err < 1e-4, "{prim:?}: relative error {err:e}");
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = &mut rng;
    check_primitive(Primitive::MatMul, vec![(randn(r, 6), vec![2, 3]), (randn(r, 12), vec![3, 4])]);
    check_primitive(
        Primitive::Conv2d { stride: 1, padding: 0 },
        vec![(randn(r, 2 * 2 * 5 * 5), vec![2, 2, 5, 5]), (randn(r, 3 * 2 * 3 * 3), vec![3, 2, 3, 3])],
    );
    check_primitive(
        Primitive::Conv2d { stride: 2, padding: 1 },
        vec![(randn(r, 2 * 6 * 7), vec![1, 2, 6, 7]), (randn(r, 2 * 2 * 3 * 3), vec![2, 2, 3, 3])],
    );
    check_primitive(Primitive::Add, vec![(randn(r, 6), vec![2, 3]), (randn(r, 6), vec![2, 3])]);
    check_primitive(Primitive::Sub, vec![(randn(r, 6), vec![2, 3]), (randn(r, 6), vec![2, 3])]);
    check_primitive(Primitive::Mul, vec![(randn(r, 6), vec![2, 3]), (randn(r, 6), vec![2, 3])]);
    // channel-axis broadcast, as used by masks and biases
    check_primitive(
        Primitive::Mul,
        vec![(randn(r, 2 * 3 * 2 * 2), vec![2, 3, 2, 2]), (randn(r, 3), vec![3, 1, 1])],
    );
    check_primitive(Primitive::Div, vec![(randn(r, 4), vec![4]), (away_from_zero(r, 4), vec![4])]);
    check_primitive(Primitive::Relu, vec![(away_from_zero(r, 8), vec![8])]);
    check_primitive(Primitive::LeakyRelu { slope: 0.01 }, vec![(away_from_zero(r, 8), vec![2, 4])]);
    check_primitive(Primitive::Softmax { axis: 1 }, vec![(randn(r, 6), vec![2, 3])]);
    check_primitive(Primitive::Softmax { axis: 0 }, vec![(randn(r, 6), vec![2, 3])]);
    check_primitive(Primitive::LogSoftmax { axis: 1 }, vec![(randn(r, 8), vec![4, 2])]);
    check_primitive(Primitive::Log, vec![(positive(r, 5), vec![5])]);
    check_primitive(Primitive::Exp, vec![(randn(r, 5), vec![5])]);
    check_primitive(Primitive::Sqrt, vec![(positive(r, 5), vec![5])]);
    check_primitive(Primitive::Square, vec![(randn(r, 5), vec![5])]);
    check_primitive(Primitive::Sum, vec![(randn(r, 6), vec![3, 2])]);
    check_primitive(Primitive::Mean, vec![(randn(r, 6), vec![3, 2])]);
    check_primitive(Primitive::L1Norm, vec![(away_from_zero(r, 6), vec![6])]);
    check_primitive(Primitive::L2Norm, vec![(randn(r, 6), vec![6])]);
    check_primitive(Primitive::EuclideanDistance, vec![(randn(r, 4), vec![4]), (randn(r, 4), vec![4])]);
    check_primitive(Primitive::MaxWithZero, vec![(away_from_zero(r, 6), vec![6])]);
    check_primitive(Primitive::SpatialAveragePool, vec![(randn(r, 2 * 3 * 4 * 4), vec![2, 3, 4, 4])]);
    check_primitive(
        Primitive::Concat { axis: 1 },
        vec![(randn(r, 4), vec![2, 2]), (randn(r, 6), vec![2, 3])],
    );
    check_primitive(Primitive::Reshape { shape: vec![3, 2] }, vec![(randn(r, 6), vec![2, 3])]);
    check_primitive(
        Primitive::Dropout {
            keep: 0.5,
            train: true,
            seed: 3,
        },
        vec![(randn(r, 10), vec![10])],
    );
}

#[test]
fn definitional_examples() {
    let relu = forward_primitive(&Primitive::Relu, &[Tensor::vector(vec![-1.0, 0.0, 2.0])]).unwrap();
    assert_eq!(relu.data(), &[0.0, 0.0, 2.0]);

    let sm = forward_primitive(&Primitive::Softmax { axis: 0 }, &[Tensor::vector(vec![0.0, 0.0])]).unwrap();
    assert_eq!(sm.data(), &[0.5, 0.5]);

    let x = Tensor::new((1..=9).map(f64::from).collect(), &[1, 1, 3, 3]).unwrap();
    let k = Tensor::new(vec![1.0], &[1, 1, 1, 1]).unwrap();
    let y = forward_primitive(&Primitive::Conv2d { stride: 1, padding: 0 }, &[x.clone(), k]).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_eq!(y.data(), x.data());
}

#[test]
fn quadratic_gradient_and_constant_root() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let root = x.mul(&x).unwrap().sum();
    let g = backward(&root).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0]);

    let c = Tensor::vector(vec![3.0, 4.0]).sum();
    assert!(backward(&c).unwrap().is_empty());
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let unused = Tensor::param(vec![5.0; 3], &[3]).unwrap();
    let root = x.square().sum();
    let g = grad(&root, &[x, unused.clone()], false).unwrap();
    assert_eq!(g[1].data(), &[0.0; 3]);
    assert_eq!(backward(&root).unwrap().get_or_zeros(&unused).data(), &[0.0; 3]);
}

#[test]
fn errors_are_structured() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(backward(&x), Err(Error::NonScalarRoot(s)) if s == vec![2]));

    assert!(matches!(Primitive::by_name("fft"), Err(Error::UnsupportedOp(name)) if name == "fft"));
    assert!(Primitive::by_name("conv2d").is_ok());

    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    match a.matmul(&b) {
        Err(Error::ShapeMismatch { op, shapes }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let msg = a.add(&Tensor::zeros(&[4])).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
}

#[test]
fn unrolled_step_on_quadratic_matches_closed_form() {
    // L(t) = t^2, t' = t - a * 2t; d L(t') / d a = -4 t^2 (1 - 2a)
    let theta = Tensor::param(vec![1.0], &[1]).unwrap();
    let alpha = Tensor::param(vec![0.1], &[1]).unwrap();
    let inner = theta.square().sum();
    let g = grad(&inner, std::slice::from_ref(&theta), true).unwrap().remove(0);
    let updated = theta.sub(&alpha.mul(&g).unwrap()).unwrap();
    assert!((updated.data()[0] - 0.8).abs() < 1e-15);
    let outer = updated.square().sum();
    let d = grad(&outer, &[alpha, theta], false).unwrap();
    assert!((d[0].data()[0] - (-3.2)).abs() < 1e-12, "{:?}", d[0]);
    // d/dt (1-2a)^2 t^2 = 2 (1-2a)^2 t
    assert!((d[1].data()[0] - 2.0 * 0.64).abs() < 1e-12);
}

/// Tiny two-parameter model: loss(t; x, y) = mean((t0 * x + t1 - y)^2) passed
/// through a softplus-like smooth term so second derivatives are non-trivial.
fn tiny_loss(t: &Tensor, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let w = t.slice(0, 0, 1)?;
    let b = t.slice(0, 1, 1)?;
    let pred = x.mul(&w)?.add(&b)?;
    let r = pred.sub(y)?;
    Ok(r.square().mean().add(&pred.exp().mean().scale(0.1))?)
}

fn unrolled(theta0: &Tensor, alphas: &[Tensor], create_graph: bool) -> Result<Tensor> {
    let xa = Tensor::vector(vec![0.5, -1.0, 2.0]);
    let ya = Tensor::vector(vec![1.0, 0.0, 2.5]);
    let xb = Tensor::vector(vec![1.5, 0.2]);
    let yb = Tensor::vector(vec![2.0, 0.7]);
    let mut t = theta0.clone();
    for a in alphas {
        let l = tiny_loss(&t, &xa, &ya)?;
        let g = grad(&l, std::slice::from_ref(&t), create_graph)?.remove(0);
        t = t.sub(&a.mul(&g)?)?;
    }
    tiny_loss(&t, &xb, &yb)
}

#[test]
fn zero_step_sizes_give_plain_gradient() {
    let theta = Tensor::param(vec![0.3, -0.2], &[2]).unwrap();
    let alphas = vec![Tensor::param(vec![0.0, 0.0], &[2]).unwrap(); 2];
    let meta = unrolled(&theta, &alphas, true).unwrap();
    let meta_grad = grad(&meta, std::slice::from_ref(&theta), false).unwrap().remove(0);

    let plain_theta = Tensor::param(vec![0.3, -0.2], &[2]).unwrap();
    let xb = Tensor::vector(vec![1.5, 0.2]);
    let yb = Tensor::vector(vec![2.0, 0.7]);
    let plain = tiny_loss(&plain_theta, &xb, &yb).unwrap();
    let plain_grad = grad(&plain, &[plain_theta], false).unwrap().remove(0);
    assert!(relative_error(meta_grad.data(), plain_grad.data()) < 1e-14);
}

#[test]
fn two_step_meta_gradient_matches_finite_differences() {
    let point = vec![vec![0.3, -0.2], vec![0.05, 0.1], vec![0.08, -0.03]];
    let leaves: Vec<Tensor> = point.iter().map(|p| Tensor::param(p.clone(), &[2]).unwrap()).collect();
    let meta = unrolled(&leaves[0], &leaves[1..], true).unwrap();
    let analytic = grad(&meta, &leaves, false).unwrap();

    let f = |p: &[Vec<f64>]| -> Result<f64> {
        let ts: Vec<Tensor> = p.iter().map(|v| Tensor::param(v.clone(), &[2])).collect::<Result<_>>()?;
        unrolled(&ts[0], &ts[1..], false)?.item()
    };
    let numeric = numeric_gradient(f, &point, FD_STEP).unwrap();
    for (a, n) in analytic.iter().zip(&numeric) {
        let err = relative_error(a.data(), n);
        assert!(err < 1e-4, "meta-gradient relative error {err:e}");
    }
}

/// A composite exercising every op family; used for gradient-of-gradient checks.
fn composite(x: &Tensor, k: &Tensor, w: &Tensor) -> Result<Tensor> {
    let feat = x.conv2d(k, 2, 1)?.leaky_relu(0.1); // [1,2,2,2]
    let pooled = feat.spatial_average_pool()?; // [1,2]
    let flat = feat.reshape(&[1, 8])?;
    let both = Tensor::concat(&[flat, pooled], 1)?; // [1,10]
    let logits = both.matmul(w)?; // [1,3]
    let ls = logits.log_softmax(1)?;
    let sm = logits.softmax(1)?;
    let picked = ls.index_select(&[0, 0])?.slice(1, 1, 2)?; // [2,2]
    let norm = logits.l2_norm()?;
    let scaled = logits.div(&norm.broadcast_to(&[1, 3])?)?;
    Ok(picked
        .sum()
        .add(&sm.square().sum())?
        .add(&scaled.exp().sum().log()?)?
        .add(&x.abs().sum().scale(0.01))?
        .add(&both.sum_axis_keep(1)?.sqrt()?.sum())?)
}

#[test]
fn gradient_of_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xv: Vec<f64> = away_from_zero(&mut rng, 16).iter().map(|v| v.abs()).collect();
    let kv = positive(&mut rng, 2 * 9);
    let wv = randn(&mut rng, 30);
    let probe = randn(&mut rng, 16 + 18 + 30);

    // s(x,k,w) = <grad_{x,k,w} composite, probe>
    let first_grad_dot = |p: &[Vec<f64>], create_graph: bool| -> Result<(Tensor, Vec<Tensor>)> {
        let x = Tensor::param(p[0].clone(), &[1, 1, 4, 4])?;
        let k = Tensor::param(p[1].clone(), &[2, 1, 3, 3])?;
        let w = Tensor::param(p[2].clone(), &[10, 3])?;
        let c = composite(&x, &k, &w)?;
        let gs = grad(&c, &[x.clone(), k.clone(), w.clone()], create_graph)?;
        let flat = Tensor::concat(
            &[gs[0].reshape(&[16])?, gs[1].reshape(&[18])?, gs[2].reshape(&[30])?],
            0,
        )?;
        let s = flat.mul(&Tensor::vector(probe.clone()))?.sum();
        Ok((s, vec![x, k, w]))
    };

    let point = vec![xv, kv, wv];
    let (s, leaves) = first_grad_dot(&point, true).unwrap();
    let second = grad(&s, &leaves, false).unwrap();
    let numeric = numeric_gradient(|p| first_grad_dot(p, false)?.0.item(), &point, FD_STEP).unwrap();
    for (a, n) in second.iter().zip(&numeric) {
        let err = relative_error(a.data(), n);
        assert!(err < 1e-4, "second-order relative error {err:e}");
    }

    // backward_create_graph exposes the same linked gradients
    let x = Tensor::param(point[0].clone(), &[1, 1, 4, 4]).unwrap();
    let k = Tensor::param(point[1].clone(), &[2, 1, 3, 3]).unwrap();
    let w = Tensor::param(point[2].clone(), &[10, 3]).unwrap();
    let c = composite(&x, &k, &w).unwrap();
    let gs = backward_create_graph(&c).unwrap();
    assert!(gs.get(&w).unwrap().requires_grad());
}

#[test]
fn schedule_permutation_does_not_change_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::param(positive(&mut rng, 16), &[1, 1, 4, 4]).unwrap();
    let k = Tensor::param(positive(&mut rng, 18), &[2, 1, 3, 3]).unwrap();
    let w = Tensor::param(randn(&mut rng, 30), &[10, 3]).unwrap();
    let c = composite(&x, &k, &w).unwrap();
    let wrt = [x, k, w];
    let base = grad_with_schedule(&c, &wrt, false, Schedule::Default).unwrap();
    for seed in 0..8 {
        let other = grad_with_schedule(&c, &wrt, false, Schedule::Shuffled(seed)).unwrap();
        for (a, b) in base.iter().zip(&other) {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn dropout_identity_and_determinism() {
    let x = Tensor::vector((0..20).map(f64::from).collect());
    let keep_all = Primitive::Dropout {
        keep: 1.0,
        train: true,
        seed: 1,
    };
    assert_eq!(forward_primitive(&keep_all, std::slice::from_ref(&x)).unwrap().data(), x.data());
    let half = Primitive::Dropout {
        keep: 0.5,
        train: true,
        seed: 42,
    };
    let a = forward_primitive(&half, std::slice::from_ref(&x)).unwrap();
    let b = forward_primitive(&half, std::slice::from_ref(&x)).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(a.data().iter().any(|&v| v == 0.0));
    let eval = Primitive::Dropout {
        keep: 0.5,
        train: false,
        seed: 42,
    };
    assert_eq!(forward_primitive(&eval, &[x.clone()]).unwrap().data(), x.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_chain_gradients_match_fd(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = vec![randn(&mut rng, m * k), randn(&mut rng, k * n)];
        let build = |p: &[Vec<f64>], leaf: bool| -> Result<(Tensor, Vec<Tensor>)> {
            let mk = |d: &Vec<f64>, s: &[usize]| if leaf { Tensor::param(d.clone(), s) } else { Tensor::new(d.clone(), s) };
            let a = mk(&p[0], &[m, k])?;
            let b = mk(&p[1], &[k, n])?;
            let y = a.matmul(&b)?.leaky_relu(0.3).exp().sum();
            Ok((y, vec![a, b]))
        };
        let (y, leaves) = build(&point, true).unwrap();
        let analytic = grad(&y, &leaves, false).unwrap();
        let numeric = numeric_gradient(|p| build(p, false)?.0.item(), &point, FD_STEP).unwrap();
        for (a, fd) in analytic.iter().zip(&numeric) {
            // leaky_relu kinks are measure-zero; guard with a loose elementwise check
            prop_assert!(relative_error(a.data(), fd) < 1e-3);
        }
    }
}
