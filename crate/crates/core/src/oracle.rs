//! Brute-force oracle suites shared by the test-suite and the `oracle`
//! subcommand. Each suite draws its own random instances from a seed and
//! counts violations of the property it checks.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coverage;
use crate::diagnostics::{build_audit_instance, interventional_bound_audit, recoverability_bound_audit};
use crate::error::Result;
use crate::params::ParamGroup;
use crate::predictor::{self, InjectionMode, PredictorParams};
use crate::recovery::{self, Provenance, RecoveryConfig};
use crate::synthbag::{stream_rng, AnchorBank, Bag, Rng64, Split};
use crate::training::{composite_loss, Model, TrainConfig};

/// Tolerances the suites check against.
pub mod tol {
    /// Slack on submodularity and monotonicity comparisons.
    pub const SUBMODULAR: f64 = 1e-12;
    /// Relative error of the closed-form coverage marginal.
    pub const MARGINAL: f64 = 1e-6;
    /// Step of the central differences on the class utility.
    pub const MARGINAL_STEP: f64 = 1e-6;
    /// Per-group relative error of the composite-loss gradient.
    pub const COMPOSITE: f64 = 1e-4;
    pub const COMPOSITE_STEP: f64 = 1e-6;
    /// Slack on the approximation-ratio comparisons.
    pub const GREEDY: f64 = 1e-12;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub suite: String,
    pub checked: usize,
    pub violations: usize,
    /// Largest observed error (suite-specific; 0 for exact checks).
    pub max_error: f64,
    /// Wall-clock time; not serialized so reports stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.checked > 0
    }
}

fn timed(suite: &str, f: impl FnOnce() -> Result<(usize, usize, f64)>) -> Result<OracleResult> {
    let start = Instant::now();
    let (checked, violations, max_error) = f()?;
    Ok(OracleResult {
        suite: suite.to_string(),
        checked,
        violations,
        max_error,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Responses in (0, 1) and weights in [0.1, 2).
pub fn random_instance(rng: &mut Rng64, n: usize, m: usize) -> (Array2<f64>, Vec<f64>) {
    let r = Array2::from_shape_simple_fn((n, m), || rng.random_range(0.0..1.0));
    let alpha = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
    (r, alpha)
}

fn random_subset(rng: &mut Rng64, pool: &[usize], p: f64) -> Vec<usize> {
    pool.iter().copied().filter(|_| rng.random_bool(p)).collect()
}

/// `Delta(i|S) >= Delta(i|T)` and `U(S) <= U(T)` on random `S ⊂ T`, `i ∉ T`.
pub fn submodularity(seed: u64, triples: usize) -> Result<OracleResult> {
    timed("submodularity", || {
        let mut rng = stream_rng(seed, 1);
        let mut violations = 0;
        let mut worst = 0.0_f64;
        let per_instance = 50;
        let mut done = 0;
        while done < triples {
            let n = rng.random_range(2..=20);
            let m = rng.random_range(1..=8);
            let (r, alpha) = random_instance(&mut rng, n, m);
            for _ in 0..per_instance.min(triples - done) {
                let i = rng.random_range(0..n);
                let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                let (pt, ps) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                let t = random_subset(&mut rng, &others, pt);
                let s = random_subset(&mut rng, &t, ps);
                let u = |set: &[usize]| coverage::subset_utility(set, r.view(), &alpha);
                let with = |set: &[usize]| {
                    let mut v = set.to_vec();
                    v.push(i);
                    v
                };
                let gain_s = u(&with(&s)) - u(&s);
                let gain_t = u(&with(&t)) - u(&t);
                worst = worst.max(gain_t - gain_s).max(u(&s) - u(&t));
                if gain_s < gain_t - tol::SUBMODULAR || u(&s) > u(&t) + tol::SUBMODULAR {
                    violations += 1;
                }
                done += 1;
            }
        }
        Ok((done, violations, worst.max(0.0)))
    })
}

/// Closed-form marginal vs central differences of the class utility.
///
/// The error is `|a - b| / max(|a|, |b|, 1)`, i.e. relative for marginals of
/// unit scale and absolute below.
pub fn marginal_fd(seed: u64, instances: usize, max_n: usize) -> Result<OracleResult> {
    timed("marginal_fd", || {
        let mut rng = stream_rng(seed, 2);
        let mut violations = 0;
        let mut worst = 0.0_f64;
        let mut checked = 0;
        let h = tol::MARGINAL_STEP;
        for _ in 0..instances {
            let n = rng.random_range(1..=max_n);
            let m = rng.random_range(1..=8);
            let (r, alpha) = random_instance(&mut rng, n, m);
            let pi: Vec<f64> = (0..n).map(|_| rng.random_range(h..1.0 - h)).collect();
            let closed = coverage::marginal(&pi, r.view(), &alpha);
            for i in 0..n {
                let mut up = pi.clone();
                let mut down = pi.clone();
                up[i] += h;
                down[i] -= h;
                let fd = (coverage::class_utility(&up, r.view(), &alpha)
                    - coverage::class_utility(&down, r.view(), &alpha))
                    / (2.0 * h);
                let err = (closed[i] - fd).abs() / closed[i].abs().max(fd.abs()).max(1.0);
                worst = worst.max(err);
                if err > tol::MARGINAL {
                    violations += 1;
                }
                checked += 1;
            }
        }
        Ok((checked, violations, worst))
    })
}

fn best_subset_utility(r: &Array2<f64>, alpha: &[f64], k: usize) -> f64 {
    let n = r.nrows();
    (0u32..1 << n)
        .filter(|mask| mask.count_ones() as usize == k.min(n))
        .map(|mask| {
            let s: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
            coverage::subset_utility(&s, r.view(), alpha)
        })
        .fold(0.0, f64::max)
}

/// Greedy vs exhaustive optimum under both the `1 - 1/e` and the
/// curvature-aware guarantees. `max_error` is the largest shortfall of
/// `U(greedy) / U(opt)` below the curvature bound (negative when slack).
pub fn greedy_certification(seed: u64, instances: usize, max_n: usize, max_k: usize) -> Result<OracleResult> {
    timed("greedy_certification", || {
        let mut rng = stream_rng(seed, 3);
        let mut violations = 0;
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..instances {
            let n = rng.random_range(1..=max_n);
            let m = rng.random_range(1..=6);
            let k = rng.random_range(1..=max_k);
            let (r, alpha) = random_instance(&mut rng, n, m);
            let greedy = coverage::greedy_max(r.view(), &alpha, k);
            let u_greedy = coverage::subset_utility(&greedy, r.view(), &alpha);
            let u_opt = best_subset_utility(&r, &alpha, k);
            let kappa = coverage::curvature(r.view(), &alpha)?;
            let factor = coverage::curvature_factor(kappa);
            if u_greedy < coverage::GREEDY_FACTOR * u_opt - tol::GREEDY || u_greedy < factor * u_opt - tol::GREEDY {
                violations += 1;
            }
            if u_opt > 0.0 {
                worst = worst.max(factor - u_greedy / u_opt);
            }
        }
        Ok((instances, violations, worst))
    })
}

/// A small random model with every parameter group away from its
/// initialization, plus a 3-patch bag and a matching anchor bank.
pub fn random_problem(rng: &mut Rng64, mode: InjectionMode) -> (Model, Bag, AnchorBank, TrainConfig) {
    let (d, classes, m) = (4, 3, 3);
    let cfg = TrainConfig {
        host_hidden: 3,
        selector_hidden: 3,
        adapter_rank: 2,
        mode,
        seed: rng.random(),
        budget: 0.05,
        ..TrainConfig::default()
    };
    let mut model = Model::init(classes, d, m, d, &cfg);
    for t in model.tensors_mut() {
        for x in t.iter_mut() {
            *x = 0.6 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    model.grounding.bridge_input = if rng.random_bool(0.5) {
        crate::grounding::BridgeInput::Raw
    } else {
        crate::grounding::BridgeInput::Adapted
    };
    let mut vectors = Array2::from_shape_simple_fn((m, d), || rng.sample::<f64, _>(StandardNormal));
    for mut row in vectors.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    let anchors = AnchorBank {
        names: (0..m).map(|k| format!("a{k}")).collect(),
        vectors,
    };
    let bag = Bag {
        id: "oracle".into(),
        features: Array2::from_shape_simple_fn((3, d), || rng.sample::<f64, _>(StandardNormal)),
        coords: Array2::from_shape_simple_fn((3, 2), || rng.random_range(0.0..10.0)),
        label: rng.random_range(0..classes),
        planted: Vec::new(),
        split: Split::Train,
    };
    (model, bag, anchors, cfg)
}

fn total_loss(model: &Model, bag: &Bag, anchors: &AnchorBank, cfg: &TrainConfig, t: f64) -> Result<f64> {
    Ok(composite_loss(model, bag, anchors, cfg, t)?.0.total)
}

/// Per-parameter-group gradient check of the composite loss. Each group's
/// error is `||g - g_fd|| / max(||g||, ||g_fd||, 1e-8)`.
pub fn composite_gradient(seed: u64, draws: usize) -> Result<OracleResult> {
    timed("composite_gradient", || {
        let mut rng = stream_rng(seed, 4);
        let mut violations = 0;
        let mut checked = 0;
        let mut worst = 0.0_f64;
        let h = tol::COMPOSITE_STEP;
        for draw in 0..draws {
            let mode = InjectionMode::ALL[draw % 3];
            let (model, bag, anchors, cfg) = random_problem(&mut rng, mode);
            let t = rng.random_range(0.4..1.0);
            let (_, grad) = composite_loss(&model, &bag, &anchors, &cfg, t)?;
            let analytic = grad.tensors();
            for (gi, (_, g)) in analytic.iter().enumerate() {
                let mut diff = 0.0;
                let mut na = 0.0;
                let mut nf = 0.0;
                for j in 0..g.len() {
                    let mut up = model.clone();
                    let mut down = model.clone();
                    up.tensors_mut()[gi][j] += h;
                    down.tensors_mut()[gi][j] -= h;
                    let fd = (total_loss(&up, &bag, &anchors, &cfg, t)? - total_loss(&down, &bag, &anchors, &cfg, t)?)
                        / (2.0 * h);
                    diff += (g[j] - fd).powi(2);
                    na += g[j] * g[j];
                    nf += fd * fd;
                }
                let err = diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-8);
                worst = worst.max(err);
                if err > tol::COMPOSITE {
                    violations += 1;
                }
                checked += 1;
            }
        }
        Ok((checked, violations, worst))
    })
}

/// Forward with all-one gates equals the ungated forward bitwise.
pub fn identity_gates(seed: u64, bags: usize) -> Result<OracleResult> {
    timed("identity_gates", || {
        let mut rng = stream_rng(seed, 5);
        let mut violations = 0;
        for _ in 0..bags {
            let n = rng.random_range(1..=40);
            let d = rng.random_range(1..=16);
            let (hidden, classes) = (rng.random_range(1..=8), rng.random_range(2..=5));
            let host = PredictorParams::init(&mut rng, d, hidden, classes);
            let features = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
            let ones = vec![1.0; n];
            let plain = predictor::forward_cached(&host, features.view(), None, InjectionMode::AttentionBias)?;
            for mode in InjectionMode::ALL {
                let gated = predictor::forward_cached(&host, features.view(), Some(&ones), mode)?;
                let same = gated.out.logits.iter().zip(&plain.out.logits).all(|(a, b)| a.to_bits() == b.to_bits())
                    && gated.out.attention.iter().zip(&plain.out.attention).all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    violations += 1;
                }
            }
        }
        Ok((bags * InjectionMode::ALL.len(), violations, 0.0))
    })
}

/// Threshold-plus-repair contract: coverage reached or saturation flagged,
/// thresholded members exactly `{pi > tau}`, every repair pick maximizes the
/// recomputed marginal, and repeated runs agree.
pub fn recovery_contract(seed: u64, instances: usize) -> Result<OracleResult> {
    timed("recovery_contract", || {
        let mut rng = stream_rng(seed, 6);
        let mut violations = 0;
        let cfg = RecoveryConfig::default();
        for _ in 0..instances {
            let n = rng.random_range(1..=30);
            let m = rng.random_range(1..=6);
            let (r, alpha) = random_instance(&mut rng, n, m);
            let pi: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let out = recovery::recover(&pi, r.view(), &alpha, &cfg)?;
            let again = recovery::recover(&pi, r.view(), &alpha, &cfg)?;
            let mut ok = out == again;
            ok &= out.coverage >= cfg.coverage_target || out.saturated;
            let above: Vec<usize> = (0..n).filter(|&i| pi[i] > cfg.threshold).collect();
            let seeded: Vec<usize> = out
                .indices
                .iter()
                .zip(&out.provenance)
                .filter(|(_, p)| **p != Provenance::Repaired)
                .map(|(&i, _)| i)
                .collect();
            ok &= if above.is_empty() {
                seeded == vec![crate::math::argmax(&pi)]
            } else {
                seeded == above
            };
            let mut selected = coverage::indicator(&seeded, n);
            for (&i, p) in out.indices.iter().zip(&out.provenance) {
                if *p != Provenance::Repaired {
                    continue;
                }
                let gains = coverage::marginal(&selected, r.view(), &alpha);
                let best = (0..n)
                    .filter(|&j| selected[j] == 0.0)
                    .map(|j| gains[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                ok &= selected[i] == 0.0 && gains[i] == best;
                selected[i] = 1.0;
            }
            if !ok {
                violations += 1;
            }
        }
        Ok((instances, violations, 0.0))
    })
}

/// Interventional bound on constructed additive instances (every subset
/// enumerated) and the gate-margin bound on random hosts.
pub fn bound_audits(seed: u64, instances: usize, max_n: usize) -> Result<OracleResult> {
    timed("bound_audits", || {
        let mut rng = stream_rng(seed, 7);
        let mut checked = 0;
        let mut violations = 0;
        let mut worst = 0.0_f64;
        for j in 0..instances {
            let n = rng.random_range(1..=max_n.min(16));
            let inst = build_audit_instance(seed.wrapping_add(j as u64), n, 4, 8, 3)?;
            let all: Vec<Vec<usize>> = (0u32..1 << n)
                .map(|mask| (0..n).filter(|&i| mask >> i & 1 == 1).collect())
                .collect();
            let rep = interventional_bound_audit(&inst, &all);
            checked += rep.checked;
            violations += rep.violations;
            worst = worst.max(rep.max_ratio);
        }
        for j in 0..instances {
            let n = rng.random_range(1..=max_n);
            let d = 6;
            let host = PredictorParams::init(&mut rng, d, 4, 3);
            let bag = Bag {
                id: format!("audit{j}"),
                features: Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal)),
                coords: Array2::zeros((n, 2)),
                label: 0,
                planted: Vec::new(),
                split: Split::Test,
            };
            let pi: Vec<f64> = Array1::from_shape_simple_fn(n, || rng.random_range(0.0..1.0)).to_vec();
            let subset: Vec<usize> = (0..n).filter(|&i| pi[i] > 0.5).collect();
            let class = predictor::forward(&host, &bag, None, InjectionMode::FeatureReweight)?.predicted();
            let rep = recoverability_bound_audit(&host, &bag, &pi, &subset, class, 0.5, 100, seed)?;
            checked += 1;
            if !rep.holds {
                violations += 1;
            }
        }
        Ok((checked, violations, worst))
    })
}

/// Every suite. `quick` keeps bags at N <= 10 and trims instance counts.
pub fn run_all(seed: u64, quick: bool) -> Result<Vec<OracleResult>> {
    let max_n = if quick { 10 } else { 50 };
    Ok(vec![
        submodularity(seed, 10_000)?,
        marginal_fd(seed, 100, max_n)?,
        greedy_certification(seed, if quick { 200 } else { 500 }, if quick { 10 } else { 12 }, 4)?,
        composite_gradient(seed, 20)?,
        identity_gates(seed, 100)?,
        recovery_contract(seed, 500)?,
        bound_audits(seed, 10, 10)?,
    ])
}
