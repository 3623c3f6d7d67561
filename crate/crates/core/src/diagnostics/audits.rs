//! Constructive checks of the coverage-residual and gate-margin bounds.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coverage;
use crate::error::{ensure, Result};
use crate::predictor::{self, InjectionMode, PredictorParams};
use crate::synthbag::{stream_rng, Bag};

/// Additive bag model `f(X) = Q g(X) + b` with `g(X) = sum_i w_i h_i`,
/// features in the span of orthonormal anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditInstance {
    pub r: Array2<f64>,
    pub alpha: Vec<f64>,
    pub weights: Vec<f64>,
    pub features: Array2<f64>,
    pub head: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Patch `i` expresses anchor `m` with coefficient proportional to `r_im`.
pub fn build_audit_instance(seed: u64, n: usize, m: usize, d: usize, classes: usize) -> Result<AuditInstance> {
    ensure!(n >= 1 && n <= 16, Contract, "audit instances enumerate subsets; need 1 <= N <= 16");
    ensure!(m >= 1 && m <= d, Contract, "need 1 <= M <= d for orthonormal anchors");
    let mut rng = stream_rng(seed, 0xA0D17);
    let mut anchors = Array2::<f64>::zeros((m, d));
    for k in 0..m {
        let mut v = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
        for j in 0..k {
            let proj = v.dot(&anchors.row(j));
            v.scaled_add(-proj, &anchors.row(j));
        }
        let nv = v.dot(&v).sqrt();
        anchors.row_mut(k).assign(&(v / nv));
    }
    let r = Array2::from_shape_simple_fn((n, m), || rng.random_range(0.01..0.99));
    let alpha: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let scale: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut coef = r.clone();
    for mut row in coef.rows_mut() {
        for (c, s) in row.iter_mut().zip(&scale) {
            *c *= s;
        }
    }
    let features = coef.dot(&anchors);
    let head = Array2::from_shape_simple_fn((classes, d), || rng.sample::<f64, _>(StandardNormal));
    let bias = Array1::from_shape_simple_fn(classes, || rng.sample::<f64, _>(StandardNormal));
    Ok(AuditInstance {
        r,
        alpha,
        weights,
        features,
        head,
        bias,
    })
}

impl AuditInstance {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Representation of the omitted patches, `g(X) - g(X_S)`.
    fn omitted(&self, subset: &[usize]) -> Array1<f64> {
        let mut keep = vec![false; self.len()];
        for &i in subset {
            keep[i] = true;
        }
        let mut g = Array1::zeros(self.features.ncols());
        for i in (0..self.len()).filter(|&i| !keep[i]) {
            g.scaled_add(self.weights[i], &self.features.row(i));
        }
        g
    }

    fn residual(&self, subset: &[usize]) -> f64 {
        let v = coverage::coverage(&coverage::indicator(subset, self.len()), self.r.view());
        self.alpha.iter().zip(&v).map(|(a, v)| a * (1.0 - v)).sum()
    }

    pub fn predict(&self, subset: &[usize]) -> Array1<f64> {
        let mut g = Array1::zeros(self.features.ncols());
        for &i in subset {
            g.scaled_add(self.weights[i], &self.features.row(i));
        }
        self.head.dot(&g) + &self.bias
    }

    /// Frobenius norm of the head, an upper bound on its Lipschitz constant.
    pub fn lipschitz(&self) -> f64 {
        self.head.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Smallest `eta` making the anchor bank `eta`-complete, by enumeration.
    pub fn eta(&self) -> f64 {
        let n = self.len();
        (0u32..1 << n)
            .map(|mask| {
                let s: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
                let lhs = norm(&self.omitted(&s));
                lhs / self.residual(&s)
            })
            .fold(0.0, f64::max)
    }
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionalAudit {
    pub checked: usize,
    pub violations: usize,
    pub eta: f64,
    pub lipschitz: f64,
    /// Largest `lhs / rhs` over subsets with positive right-hand side.
    pub max_ratio: f64,
}

/// Checks `||f(X) - f(X_S)|| <= L_q * eta * sum_m alpha_m (1 - v_m(1_S))`
/// for each subset.
pub fn interventional_bound_audit(inst: &AuditInstance, subsets: &[Vec<usize>]) -> InterventionalAudit {
    let eta = inst.eta();
    let lq = inst.lipschitz();
    let full: Vec<usize> = (0..inst.len()).collect();
    let f_full = inst.predict(&full);
    let mut violations = 0;
    let mut max_ratio = 0.0_f64;
    for s in subsets {
        let lhs = norm(&(&f_full - &inst.predict(s)));
        let rhs = lq * eta * inst.residual(s);
        if lhs > rhs * (1.0 + 1e-12) + 1e-12 {
            violations += 1;
        }
        if rhs > 0.0 {
            max_ratio = max_ratio.max(lhs / rhs);
        }
    }
    InterventionalAudit {
        checked: subsets.len(),
        violations,
        eta,
        lipschitz: lq,
        max_ratio,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverabilityAudit {
    pub lhs: f64,
    pub rhs: f64,
    pub l_hat: f64,
    /// `||pi - 1_S||_2`.
    pub distance: f64,
    /// `min_i |pi_i - tau|`.
    pub min_margin: f64,
    pub holds: bool,
}

fn phi_and_grad(host: &PredictorParams, bag: &Bag, gates: &[f64], class: usize) -> Result<(f64, Vec<f64>)> {
    let cache = predictor::forward_cached(host, bag.features.view(), Some(gates), InjectionMode::FeatureReweight)?;
    let p = &cache.out.probs;
    let dlogits: Vec<f64> = (0..p.len())
        .map(|k| p[class] * (f64::from(k == class) - p[k]))
        .collect();
    let back = predictor::backward(host, &cache, &dlogits);
    Ok((p[class], back.gates))
}

/// Gate-margin bound `|F(pi) - F(1_S)| <= L_hat ||pi - 1_S||` under feature
/// reweighting, with `F` the probability of `class` and `L_hat` the largest
/// gradient norm over `points` gate vectors (half on the segment between
/// `pi` and `1_S`, half uniform in the cube, plus both endpoints).
pub fn recoverability_bound_audit(
    host: &PredictorParams,
    bag: &Bag,
    pi: &[f64],
    subset: &[usize],
    class: usize,
    threshold: f64,
    points: usize,
    seed: u64,
) -> Result<RecoverabilityAudit> {
    let n = bag.len();
    ensure!(pi.len() == n, Contract, "gate vector length {} != N = {n}", pi.len());
    let target = coverage::indicator(subset, n);
    let mut rng = stream_rng(seed, crate::math::fnv1a64(bag.id.as_bytes()));
    let mut probes = vec![pi.to_vec(), target.clone()];
    for j in 0..points {
        probes.push(if j % 2 == 0 {
            let t: f64 = rng.random();
            pi.iter().zip(&target).map(|(a, b)| a + t * (b - a)).collect()
        } else {
            (0..n).map(|_| rng.random::<f64>()).collect()
        });
    }
    let mut l_hat = 0.0_f64;
    for g in &probes {
        let (_, grad) = phi_and_grad(host, bag, g, class)?;
        l_hat = l_hat.max(grad.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    let (f_pi, _) = phi_and_grad(host, bag, pi, class)?;
    let (f_s, _) = phi_and_grad(host, bag, &target, class)?;
    let distance = pi.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let lhs = (f_pi - f_s).abs();
    let rhs = l_hat * distance;
    Ok(RecoverabilityAudit {
        lhs,
        rhs,
        l_hat,
        distance,
        min_margin: pi.iter().map(|p| (p - threshold).abs()).fold(f64::INFINITY, f64::min),
        holds: lhs <= rhs + 1e-12,
    })
}
