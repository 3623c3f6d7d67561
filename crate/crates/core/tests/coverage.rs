use evsel_core::coverage::{
    class_utility, coverage, curvature, curvature_factor, greedy_max, indicator, marginal, subset_utility,
    GREEDY_FACTOR,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn instance(rng: &mut Xoshiro256PlusPlus, n: usize, m: usize) -> (Array2<f64>, Vec<f64>) {
    let r = Array2::from_shape_simple_fn((n, m), || rng.random::<f64>());
    let alpha = (0..m).map(|_| rng.random_range(0.0..2.0)).collect();
    (r, alpha)
}

/// Direct product form, no logs.
fn naive_utility(pi: &[f64], r: &Array2<f64>, alpha: &[f64]) -> f64 {
    (0..r.ncols())
        .map(|m| {
            let miss: f64 = (0..r.nrows()).map(|i| 1.0 - pi[i] * r[[i, m]]).product();
            alpha[m] * (1.0 - miss)
        })
        .sum()
}

fn subsets(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0u32..1 << n).map(move |mask| (0..n).filter(|&i| mask >> i & 1 == 1).collect())
}

fn exhaustive_opt(r: &Array2<f64>, alpha: &[f64], k: usize) -> f64 {
    let k = k.min(r.nrows());
    subsets(r.nrows())
        .filter(|s| s.len() == k)
        .map(|s| naive_utility(&indicator(&s, r.nrows()), r, alpha))
        .fold(0.0, f64::max)
}

#[test]
fn hand_examples() {
    let r = ndarray::arr2(&[[0.5], [0.5]]);
    assert_eq!(coverage(&[0.0, 0.0], r.view()), vec![0.0]);
    assert!((coverage(&[1.0, 1.0], r.view())[0] - 0.75).abs() < 1e-15);
    assert_eq!(marginal(&[0.0, 0.0], r.view(), &[1.0]), vec![0.5, 0.5]);
    assert!((marginal(&[1.0, 0.0], r.view(), &[1.0])[1] - 0.25).abs() < 1e-15);
    assert_eq!(class_utility(&[0.3, 0.9], r.view(), &[0.0]), 0.0);

    let r = ndarray::arr2(&[[0.9, 0.0], [0.0, 0.9], [0.5, 0.5]]);
    assert_eq!(greedy_max(r.view(), &[1.0, 1.0], 1), vec![2]);
    let two = greedy_max(r.view(), &[1.0, 1.0], 2);
    assert_eq!(two, vec![2, 0]);
    assert!((subset_utility(&two, r.view(), &[1.0, 1.0]) - 1.45).abs() < 1e-12);
}

#[test]
fn curvature_hand_examples() {
    let private = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
    assert_eq!(curvature(private.view(), &[1.0, 1.0]).unwrap(), 0.0);
    let redundant = ndarray::arr2(&[[1.0], [1.0]]);
    assert_eq!(curvature(redundant.view(), &[1.0]).unwrap(), 1.0);
    assert!(curvature(redundant.view(), &[0.0]).is_err());
}

#[test]
fn utility_matches_direct_products() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
    for _ in 0..200 {
        let (n, m) = (rng.random_range(1..=40), rng.random_range(1..=8));
        let (r, alpha) = instance(&mut rng, n, m);
        let pi: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let a = class_utility(&pi, r.view(), &alpha);
        let b = naive_utility(&pi, &r, &alpha);
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn raising_a_gate_never_lowers_utility() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(12);
    for _ in 0..1000 {
        let (n, m) = (rng.random_range(1..=20), rng.random_range(1..=8));
        let (r, alpha) = instance(&mut rng, n, m);
        let pi: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let i = rng.random_range(0..n);
        let mut up = pi.clone();
        up[i] = rng.random_range(pi[i]..=1.0);
        assert!(class_utility(&up, r.view(), &alpha) >= class_utility(&pi, r.view(), &alpha));
    }
}

#[test]
fn marginal_matches_central_differences() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(13);
    let h = 1e-6;
    for _ in 0..100 {
        let (n, m) = (rng.random_range(1..=50), rng.random_range(1..=8));
        let (r, alpha) = instance(&mut rng, n, m);
        let pi: Vec<f64> = (0..n).map(|_| rng.random_range(h..1.0 - h)).collect();
        let closed = marginal(&pi, r.view(), &alpha);
        for i in 0..n {
            let (mut up, mut down) = (pi.clone(), pi.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (naive_utility(&up, &r, &alpha) - naive_utility(&down, &r, &alpha)) / (2.0 * h);
            let err = (closed[i] - fd).abs() / closed[i].abs().max(fd.abs()).max(1.0);
            assert!(err <= 1e-6, "instance N={n} i={i}: {} vs {fd}", closed[i]);
        }
    }
}

#[test]
fn subset_utility_equals_indicator_utility() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(14);
    for _ in 0..300 {
        let (n, m) = (rng.random_range(1..=30), rng.random_range(1..=8));
        let (r, alpha) = instance(&mut rng, n, m);
        let s: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.4)).collect();
        let a = subset_utility(&s, r.view(), &alpha);
        let b = class_utility(&indicator(&s, n), r.view(), &alpha);
        assert!((a - b).abs() <= 1e-12);
    }
    let r = ndarray::arr2(&[[1.0, 0.2], [0.3, 1.0], [0.1, 0.1]]);
    assert_eq!(subset_utility(&[], r.view(), &[1.0, 2.0]), 0.0);
    assert!((subset_utility(&[0, 1, 2], r.view(), &[1.0, 2.0]) - 3.0).abs() < 1e-15);
}

#[test]
fn greedy_meets_both_guarantees_against_enumeration() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(15);
    for _ in 0..250 {
        let n = rng.random_range(1..=12);
        let m = rng.random_range(1..=6);
        let k = rng.random_range(1..=4);
        let (r, alpha) = instance(&mut rng, n, m);
        let g = greedy_max(r.view(), &alpha, k);
        assert_eq!(g.len(), k.min(n));
        let ug = naive_utility(&indicator(&g, n), &r, &alpha);
        let opt = exhaustive_opt(&r, &alpha, k);
        assert!(ug >= GREEDY_FACTOR * opt - 1e-12, "greedy {ug} opt {opt}");
        if n <= 10 {
            let factor = curvature_factor(curvature(r.view(), &alpha).unwrap());
            assert!(ug >= factor * opt - 1e-12, "greedy {ug} opt {opt} factor {factor}");
        }
    }
}

fn small_instance() -> impl Strategy<Value = (Array2<f64>, Vec<f64>, u32, u32, usize)> {
    (1usize..=10, 1usize..=6).prop_flat_map(|(n, m)| {
        (
            proptest::collection::vec(0.0..=1.0f64, n * m),
            proptest::collection::vec(0.0..3.0f64, m),
            any::<u32>(),
            any::<u32>(),
            0..n,
        )
            .prop_map(move |(r, alpha, a, b, i)| {
                (Array2::from_shape_vec((n, m), r).unwrap(), alpha, a, b, i)
            })
    })
}

proptest! {
    #[test]
    fn coverage_is_monotone_submodular((r, alpha, a, b, i) in small_instance()) {
        let n = r.nrows();
        let mask = (1u32 << n) - 1;
        let t_mask = (a & mask) & !(1 << i);
        let s_mask = t_mask & b;
        let to_set = |mk: u32| (0..n).filter(|&j| mk >> j & 1 == 1).collect::<Vec<_>>();
        let (s, t) = (to_set(s_mask), to_set(t_mask));
        let u = |x: &[usize]| subset_utility(x, r.view(), &alpha);
        let with = |x: &[usize]| { let mut y = x.to_vec(); y.push(i); y };
        prop_assert!(u(&s) <= u(&t) + 1e-12);
        prop_assert!(u(&with(&s)) - u(&s) >= u(&with(&t)) - u(&t) - 1e-12);
    }

    #[test]
    fn coverage_stays_in_unit_interval(
        (r, alpha, _a, _b, _i) in small_instance(),
        gates in proptest::collection::vec(0.0..=1.0f64, 10),
    ) {
        let pi = &gates[..r.nrows()];
        for v in coverage(pi, r.view()) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let total: f64 = alpha.iter().sum();
        let u = class_utility(pi, r.view(), &alpha);
        prop_assert!(u >= 0.0 && u <= total + 1e-12);
        for g in marginal(pi, r.view(), &alpha) {
            prop_assert!(g >= 0.0 && g <= total + 1e-12);
        }
    }

    #[test]
    fn curvature_lies_in_unit_interval((r, alpha, _a, _b, _i) in small_instance()) {
        let Ok(k) = curvature(r.view(), &alpha) else {
            prop_assert_eq!(subset_utility(&(0..r.nrows()).collect::<Vec<_>>(), r.view(), &alpha), 0.0);
            return Ok(());
        };
        prop_assert!((0.0..=1.0).contains(&k));
        let f = curvature_factor(k);
        prop_assert!(f >= GREEDY_FACTOR - 1e-12 && f <= 1.0);
    }
}
