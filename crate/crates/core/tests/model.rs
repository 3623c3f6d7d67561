use evsel_core::grounding::{adapt, anchor_responses};
use evsel_core::math::{sigmoid, softplus};
use evsel_core::oracle::random_problem;
use evsel_core::params::ParamGroup;
use evsel_core::predictor::{self, forward, forward_cached, loss_and_grad, predict_subset};
use evsel_core::synthbag::stream_rng;
use evsel_core::training::{budget_loss, composite_loss, grounding_loss};
use evsel_core::{AnchorBank, Bag, GroundingParams, InjectionMode, PredictorParams, Split};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

type R = Xoshiro256PlusPlus;

fn gaussian(rng: &mut R, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || scale * rng.sample::<f64, _>(StandardNormal))
}

fn bag_from(features: Array2<f64>) -> Bag {
    let n = features.nrows();
    Bag {
        id: "t".into(),
        features,
        coords: Array2::zeros((n, 2)),
        label: 0,
        planted: Vec::new(),
        split: Split::Test,
    }
}

fn random_host(rng: &mut R, d: usize, hidden: usize, classes: usize) -> PredictorParams {
    PredictorParams {
        w1: gaussian(rng, (hidden, d), 0.7),
        w2: Array1::from_shape_simple_fn(hidden, || rng.sample::<f64, _>(StandardNormal)),
        wc: gaussian(rng, (classes, d), 0.7),
        b: Array1::from_shape_simple_fn(classes, || rng.sample::<f64, _>(StandardNormal)),
    }
}

/// `|a - b| / max(|a|, |b|, 1)`.
fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[test]
fn host_gradients_match_central_differences() {
    let mut rng = R::seed_from_u64(21);
    let h = 1e-5;
    for draw in 0..20 {
        let mode = InjectionMode::ALL[draw % 3];
        let (n, d, classes) = (rng.random_range(1..=6), rng.random_range(2..=5), rng.random_range(2..=4));
        let host = random_host(&mut rng, d, 3, classes);
        let bag = bag_from(gaussian(&mut rng, (n, d), 1.0));
        let gates: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let label = rng.random_range(0..classes);
        let ce = |p: &PredictorParams, g: &[f64]| loss_and_grad(p, &bag, Some(g), mode, label).unwrap().loss;
        let lg = loss_and_grad(&host, &bag, Some(&gates), mode, label).unwrap();

        let analytic = lg.params.flatten();
        let mut k = 0;
        for (t, len) in host.tensors().iter().map(|(_, t)| t.len()).enumerate() {
            for j in 0..len {
                let (mut up, mut down) = (host.clone(), host.clone());
                up.tensors_mut()[t][j] += h;
                down.tensors_mut()[t][j] -= h;
                let fd = (ce(&up, &gates) - ce(&down, &gates)) / (2.0 * h);
                assert!(rel(analytic[k], fd) <= 1e-5, "{mode:?} tensor {t}[{j}]: {} vs {fd}", analytic[k]);
                k += 1;
            }
        }
        for i in 0..n {
            let (mut up, mut down) = (gates.clone(), gates.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (ce(&host, &up) - ce(&host, &down)) / (2.0 * h);
            assert!(rel(lg.gates[i], fd) <= 1e-5, "{mode:?} gate {i}: {} vs {fd}", lg.gates[i]);
        }
    }
}

#[test]
fn structural_cases() {
    let mut rng = R::seed_from_u64(22);
    let host = random_host(&mut rng, 4, 3, 3);
    for mode in InjectionMode::ALL {
        let one = bag_from(gaussian(&mut rng, (1, 4), 1.0));
        assert_eq!(forward(&host, &one, None, mode).unwrap().attention, vec![1.0]);
        assert_eq!(
            predict_subset(&host, &one, &[0]).unwrap().probs,
            forward(&host, &one, None, mode).unwrap().probs
        );
    }
    let zero = PredictorParams::zeros(3, 2, 2);
    let bag = bag_from(ndarray::arr2(&[[1.0, 2.0, 3.0], [3.0, 0.0, -1.0]]));
    let out = forward(&zero, &bag, None, InjectionMode::AttentionBias).unwrap();
    assert_eq!(out.attention, vec![0.5, 0.5]);
    assert_eq!(out.bag_repr, vec![2.0, 1.0, 1.0]);
}

#[test]
fn keep_and_remove_match_row_reslicing() {
    let mut rng = R::seed_from_u64(23);
    for _ in 0..50 {
        let n = rng.random_range(2..=30);
        let host = random_host(&mut rng, 5, 4, 3);
        let bag = bag_from(gaussian(&mut rng, (n, 5), 1.0));
        let keep: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
        if keep.is_empty() || keep.len() == n {
            continue;
        }
        let remove: Vec<usize> = (0..n).filter(|i| !keep.contains(i)).collect();
        for s in [&keep, &remove] {
            let mut rows = Array2::zeros((s.len(), 5));
            for (dst, &i) in s.iter().enumerate() {
                for k in 0..5 {
                    rows[[dst, k]] = bag.features[[i, k]];
                }
            }
            let reference = forward_cached(&host, rows.view(), None, InjectionMode::AttentionBias).unwrap();
            let got = predict_subset(&host, &bag, s).unwrap();
            for (a, b) in got.probs.iter().zip(&reference.out.probs) {
                assert!((a - b).abs() <= 1e-14);
            }
            assert_eq!(got.class, reference.out.predicted());
        }
    }
}

#[test]
fn full_subset_equals_ungated_forward() {
    let mut rng = R::seed_from_u64(24);
    let host = random_host(&mut rng, 4, 3, 3);
    let bag = bag_from(gaussian(&mut rng, (9, 4), 1.0));
    let all: Vec<usize> = (0..9).collect();
    let full = forward(&host, &bag, None, InjectionMode::Hybrid).unwrap();
    assert_eq!(predict_subset(&host, &bag, &all).unwrap().probs, full.probs);
}

#[test]
fn adapter_matches_dense_matrix() {
    let mut rng = stream_rng(25, 0);
    for _ in 0..30 {
        let (d, rank, n) = (rng.random_range(2..=12), rng.random_range(1..=4), rng.random_range(1..=10));
        let mut p = GroundingParams::init(&mut rng, d, rank, d);
        p.u = Array2::from_shape_simple_fn((d, rank), || rng.sample::<f64, _>(StandardNormal));
        let h = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
        let dense = Array2::<f64>::eye(d) + p.u.dot(&p.v.t());
        let e = adapt(&p, h.view()).e;
        for i in 0..n {
            let y = dense.dot(&h.row(i));
            let norm = y.dot(&y).sqrt();
            for k in 0..d {
                assert!((e[[i, k]] - y[k] / norm).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn adapter_is_continuous_at_initialization() {
    let mut rng = stream_rng(26, 0);
    let mut p = GroundingParams::init(&mut rng, 6, 2, 6);
    let h = Array2::from_shape_simple_fn((4, 6), || rng.sample::<f64, _>(StandardNormal));
    let u = Array2::from_shape_simple_fn((6, 2), || rng.sample::<f64, _>(StandardNormal));
    let plain = adapt(&p, h.view()).e;
    let mut prev = f64::INFINITY;
    for eps in [1e-1, 1e-2, 1e-3, 1e-4, 1e-6] {
        p.u = &u * eps;
        let dist = (&adapt(&p, h.view()).e - &plain).mapv(f64::abs).sum();
        assert!(dist < prev);
        prev = dist;
    }
    assert!(prev < 1e-4);
    let row = ndarray::arr2(&[[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]]);
    p.u.fill(0.0);
    assert_eq!(adapt(&p, row.view()).e.row(0).to_vec(), vec![0.6, 0.8, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn response_closed_forms() {
    let mut rng = stream_rng(27, 0);
    let p = GroundingParams::init(&mut rng, 2, 1, 2);
    let bank = AnchorBank {
        names: vec!["a".into()],
        vectors: ndarray::arr2(&[[1.0, 0.0]]),
    };
    let delta_angle = 0.15_f64.acos();
    let x = ndarray::arr2(&[[1.0, 0.0], [-2.0, 0.0], [delta_angle.cos(), delta_angle.sin()]]);
    let r = anchor_responses(&p, x.view(), &bank).unwrap().r;
    assert!((r[[0, 0]] - 0.998_887_463_967_139_8).abs() < 1e-12);
    assert!((r[[1, 0]] - 1.010_291_939_077_728_9e-4).abs() < 1e-15);
    assert!((r[[2, 0]] - 0.5).abs() < 1e-12);
}

#[test]
fn budget_loss_values_and_gradient() {
    assert_eq!(budget_loss(&[0.03; 4], 0.05).value, 0.0);
    assert!((budget_loss(&[0.15; 4], 0.05).value - 0.01).abs() < 1e-15);
    let mut rng = R::seed_from_u64(28);
    let h = 1e-6;
    for _ in 0..50 {
        let n = rng.random_range(1..=20);
        let pi: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.9)).collect();
        let rho = rng.random_range(0.0..0.3);
        let g = budget_loss(&pi, rho).d_pi;
        for i in 0..n {
            let (mut up, mut down) = (pi.clone(), pi.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (budget_loss(&up, rho).value - budget_loss(&down, rho).value) / (2.0 * h);
            assert!(rel(g[i], fd) <= 1e-6);
        }
    }
}

#[test]
fn grounding_loss_values_and_gradients() {
    let r = Array2::from_elem((3, 2), 0.4);
    assert_eq!(grounding_loss(&[0.0; 3], &r, &[1.0, 2.0]).value, 1.0);
    let covered = ndarray::arr2(&[[1.0, 1.0], [0.2, 0.3]]);
    assert_eq!(grounding_loss(&[1.0, 0.5], &covered, &[1.0, 2.0]).value, 0.0);

    let mut rng = R::seed_from_u64(29);
    let h = 1e-6;
    for _ in 0..40 {
        let (n, m) = (rng.random_range(1..=12), rng.random_range(1..=5));
        let pi: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let r = Array2::from_shape_simple_fn((n, m), || rng.random_range(0.05..0.95));
        let alpha: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
        let g = grounding_loss(&pi, &r, &alpha);
        let f = |pi: &[f64], r: &Array2<f64>, a: &[f64]| grounding_loss(pi, r, a).value;
        for i in 0..n {
            let (mut up, mut down) = (pi.clone(), pi.clone());
            up[i] += h;
            down[i] -= h;
            assert!(rel(g.d_pi[i], (f(&up, &r, &alpha) - f(&down, &r, &alpha)) / (2.0 * h)) <= 1e-6);
            for k in 0..m {
                let (mut up, mut down) = (r.clone(), r.clone());
                up[[i, k]] += h;
                down[[i, k]] -= h;
                let fd = (f(&pi, &up, &alpha) - f(&pi, &down, &alpha)) / (2.0 * h);
                assert!(rel(g.d_r[[i, k]], fd) <= 1e-6);
            }
        }
        for k in 0..m {
            let (mut up, mut down) = (alpha.clone(), alpha.clone());
            up[k] += h;
            down[k] -= h;
            assert!(rel(g.d_alpha[k], (f(&pi, &r, &up) - f(&pi, &r, &down)) / (2.0 * h)) <= 1e-6);
        }
    }
}

#[test]
fn composite_gradient_matches_central_differences() {
    let mut rng = stream_rng(30, 0);
    let h = 1e-6;
    for draw in 0..6 {
        let (model, bag, anchors, cfg) = random_problem(&mut rng, InjectionMode::ALL[draw % 3]);
        let t = 0.7;
        let total = |m: &evsel_core::Model| composite_loss(m, &bag, &anchors, &cfg, t).unwrap().0.total;
        let grad = composite_loss(&model, &bag, &anchors, &cfg, t).unwrap().1;
        for (gi, (name, g)) in grad.tensors().into_iter().enumerate() {
            let (mut diff, mut norm) = (0.0_f64, 0.0_f64);
            for (j, &a) in g.iter().enumerate() {
                let (mut up, mut down) = (model.clone(), model.clone());
                up.tensors_mut()[gi][j] += h;
                down.tensors_mut()[gi][j] -= h;
                let fd = (total(&up) - total(&down)) / (2.0 * h);
                diff += (a - fd).powi(2);
                norm += a.powi(2).max(fd.powi(2));
            }
            let err = diff.sqrt() / norm.sqrt().max(1e-8);
            assert!(err <= 1e-4, "{name}: relative error {err}");
        }
    }
}

#[test]
fn zero_penalty_weights_reduce_to_cross_entropy() {
    let mut rng = stream_rng(31, 0);
    for draw in 0..9 {
        let (model, bag, anchors, mut cfg) = random_problem(&mut rng, InjectionMode::ALL[draw % 3]);
        let (c, _) = composite_loss(&model, &bag, &anchors, &cfg, 0.8).unwrap();
        assert!(c.budget >= 0.0 && c.ground >= 0.0 && c.total >= c.task);
        cfg.lambda_budget = 0.0;
        cfg.lambda_ground = 0.0;
        let (c, _) = composite_loss(&model, &bag, &anchors, &cfg, 0.8).unwrap();
        let pi = model.evidence(&bag, &anchors, 0.8).unwrap().pi().to_vec();
        let ce = loss_and_grad(&model.host, &bag, Some(&pi), model.mode, bag.label).unwrap().loss;
        assert_eq!(c.total, ce);
    }
}

#[test]
fn class_weights_are_softplus_of_raw() {
    let mut w = evsel_core::ClassAnchorWeights::zeros(2, 3);
    w.raw[[1, 2]] = -3.0;
    let a = w.alpha(1);
    assert_eq!(a[0], softplus(0.0));
    assert!((a[2] - (1.0 + (-3.0_f64).exp()).ln()).abs() < 1e-15);
    assert_eq!(sigmoid(0.0), 0.5);
}

fn host_and_bag() -> impl Strategy<Value = (PredictorParams, Array2<f64>, Vec<usize>)> {
    (1usize..=12, 1usize..=5, any::<u64>()).prop_map(|(n, d, seed)| {
        let mut rng = R::seed_from_u64(seed);
        let host = random_host(&mut rng, d, 3, 3);
        let features = gaussian(&mut rng, (n, d), 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        (host, features, perm)
    })
}

proptest! {
    #[test]
    fn unit_gates_are_bitwise_identity((host, features, _) in host_and_bag()) {
        let ones = vec![1.0; features.nrows()];
        let plain = forward_cached(&host, features.view(), None, InjectionMode::AttentionBias).unwrap().out;
        for mode in InjectionMode::ALL {
            let gated = forward_cached(&host, features.view(), Some(&ones), mode).unwrap().out;
            prop_assert_eq!(&gated, &plain);
        }
    }

    #[test]
    fn pooling_is_permutation_invariant((host, features, perm) in host_and_bag()) {
        let n = features.nrows();
        let mut shuffled = features.clone();
        for (dst, &src) in perm.iter().enumerate() {
            shuffled.row_mut(dst).assign(&features.row(src));
        }
        let a = forward_cached(&host, features.view(), None, InjectionMode::AttentionBias).unwrap().out;
        let b = forward_cached(&host, shuffled.view(), None, InjectionMode::AttentionBias).unwrap().out;
        for (x, y) in a.probs.iter().zip(&b.probs) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        for dst in 0..n {
            prop_assert!((b.attention[dst] - a.attention[perm[dst]]).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_is_a_distribution((host, features, _) in host_and_bag(), g in 0.0..=1.0f64) {
        let gates = vec![g; features.nrows()];
        for mode in InjectionMode::ALL {
            let out = forward_cached(&host, features.view(), Some(&gates), mode).unwrap().out;
            prop_assert!(out.attention.iter().all(|a| (0.0..=1.0).contains(a)));
            prop_assert!((out.attention.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn uniform_bias_gates_leave_attention_unchanged((host, features, _) in host_and_bag(), g in 0.01..=1.0f64) {
        let gates = vec![g; features.nrows()];
        let plain = forward_cached(&host, features.view(), None, InjectionMode::AttentionBias).unwrap().out;
        let biased = forward_cached(&host, features.view(), Some(&gates), InjectionMode::AttentionBias).unwrap().out;
        for (x, y) in plain.attention.iter().zip(&biased.attention) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn gate_floor_is_respected() {
    assert_eq!(predictor::GATE_FLOOR, 1e-6);
    let mut rng = R::seed_from_u64(32);
    let host = random_host(&mut rng, 3, 2, 2);
    let bag = bag_from(gaussian(&mut rng, (3, 3), 1.0));
    let out = forward(&host, &bag, Some(&[0.0, 1.0, 1.0]), InjectionMode::AttentionBias).unwrap();
    assert!(out.attention[0] > 0.0 && out.attention[0] < 1e-5);
}
