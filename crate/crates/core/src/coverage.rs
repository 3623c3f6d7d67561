//! Noisy-OR coverage, class utility, closed-form marginals, curvature and
//! greedy maximization.
//!
//! For gates `pi` and responses `r` (`N x M`):
//!
//! ```text
//! v_m(pi)   = 1 - prod_i (1 - pi_i r_im)
//! U_c(pi)   = sum_m alpha_cm v_m(pi)
//! dU/dpi_i  = sum_m alpha_cm r_im prod_{j != i} (1 - pi_j r_jm)
//! ```
//!
//! Restricted to binary indicators `U_c` is a monotone submodular set
//! function. Products are accumulated as sums of `ln_1p(-pi_i r_im)`; exact
//! zero factors are tracked separately so saturated anchors stay exact.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::softplus;

/// Learnable nonnegative class-anchor weights, `alpha = softplus(raw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAnchorWeights {
    /// `C x M` free parameters.
    pub raw: Array2<f64>,
}

impl ClassAnchorWeights {
    pub fn zeros(classes: usize, anchors: usize) -> Self {
        Self {
            raw: Array2::zeros((classes, anchors)),
        }
    }

    pub fn classes(&self) -> usize {
        self.raw.nrows()
    }

    pub fn anchors(&self) -> usize {
        self.raw.ncols()
    }

    /// Effective weights `alpha_c` for class `c`.
    pub fn alpha(&self, class: usize) -> Vec<f64> {
        self.raw.row(class).iter().map(|&w| softplus(w)).collect()
    }
}

impl crate::params::ParamGroup for ClassAnchorWeights {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![("class_weights.raw", self.raw.as_slice().unwrap())]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.raw.as_slice_mut().unwrap()]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.classes(), self.anchors())
    }
}

/// Per-anchor log of the non-zero product factors and count of zero factors.
struct LogProducts {
    log: Vec<f64>,
    zeros: Vec<usize>,
}

fn log_products(pi: &[f64], r: ArrayView2<'_, f64>) -> LogProducts {
    let m = r.ncols();
    let mut log = vec![0.0; m];
    let mut zeros = vec![0; m];
    for (i, &p) in pi.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (k, &rim) in r.row(i).iter().enumerate() {
            let q = p * rim;
            if q >= 1.0 {
                zeros[k] += 1;
            } else {
                log[k] += (-q).ln_1p();
            }
        }
    }
    LogProducts { log, zeros }
}

fn check(pi: &[f64], r: ArrayView2<'_, f64>) {
    debug_assert_eq!(pi.len(), r.nrows(), "gate/response length mismatch");
}

/// `v_m(pi)` for every anchor.
pub fn coverage(pi: &[f64], r: ArrayView2<'_, f64>) -> Vec<f64> {
    check(pi, r);
    let lp = log_products(pi, r);
    lp.log
        .iter()
        .zip(&lp.zeros)
        .map(|(&l, &z)| if z > 0 { 1.0 } else { -l.exp_m1() })
        .collect()
}

/// `U_c(pi) = sum_m alpha_m v_m(pi)`.
pub fn class_utility(pi: &[f64], r: ArrayView2<'_, f64>, alpha: &[f64]) -> f64 {
    coverage(pi, r).iter().zip(alpha).map(|(v, a)| a * v).sum()
}

/// `prod_{j != i} (1 - pi_j r_jm)` for every patch `i` and anchor `m`.
pub fn leave_one_out(pi: &[f64], r: ArrayView2<'_, f64>) -> Array2<f64> {
    check(pi, r);
    let lp = log_products(pi, r);
    let (n, m) = r.dim();
    Array2::from_shape_fn((n, m), |(i, k)| {
        let q = pi[i] * r[[i, k]];
        match (lp.zeros[k], q >= 1.0) {
            (0, _) => (lp.log[k] - (-q).ln_1p()).exp(),
            (1, true) => lp.log[k].exp(),
            _ => 0.0,
        }
    })
}

/// Closed-form `dU_c / dpi_i` for every patch.
pub fn marginal(pi: &[f64], r: ArrayView2<'_, f64>, alpha: &[f64]) -> Vec<f64> {
    let loo = leave_one_out(pi, r);
    loo.rows()
        .into_iter()
        .zip(r.rows())
        .map(|(others, ri)| {
            others
                .iter()
                .zip(ri.iter())
                .zip(alpha)
                .map(|((o, rim), a)| a * rim * o)
                .sum()
        })
        .collect()
}

/// `U_c(S)` evaluated directly from the product form.
pub fn subset_utility(subset: &[usize], r: ArrayView2<'_, f64>, alpha: &[f64]) -> f64 {
    (0..r.ncols())
        .map(|k| {
            let uncovered: f64 = subset.iter().map(|&i| 1.0 - r[[i, k]]).product();
            alpha[k] * (1.0 - uncovered)
        })
        .sum()
}

/// Binary indicator of `subset` over `n` patches.
pub fn indicator(subset: &[usize], n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for &i in subset {
        v[i] = 1.0;
    }
    v
}

/// Greedy maximization of `U_c` under `|S| <= k`, in selection order.
///
/// Each step adds the patch with the largest one-step gain; ties go to the
/// lowest index.
pub fn greedy_max(r: ArrayView2<'_, f64>, alpha: &[f64], k: usize) -> Vec<usize> {
    let candidates: Vec<usize> = (0..r.nrows()).collect();
    greedy_from(r, alpha, &[], &candidates, k)
}

/// Greedy extension of `start` by up to `k` picks drawn from `candidates`.
pub fn greedy_from(
    r: ArrayView2<'_, f64>,
    alpha: &[f64],
    start: &[usize],
    candidates: &[usize],
    k: usize,
) -> Vec<usize> {
    let m = r.ncols();
    let mut uncovered = vec![1.0; m];
    for &i in start {
        for (u, &rim) in uncovered.iter_mut().zip(r.row(i)) {
            *u *= 1.0 - rim;
        }
    }
    let mut taken = vec![false; r.nrows()];
    for &i in start {
        taken[i] = true;
    }
    let mut pool = candidates.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let mut picks = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for &i in pool.iter().filter(|&&i| !taken[i]) {
            let gain: f64 = (0..m).map(|c| alpha[c] * r[[i, c]] * uncovered[c]).sum();
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        let Some((i, _)) = best else { break };
        taken[i] = true;
        for (u, &rim) in uncovered.iter_mut().zip(r.row(i)) {
            *u *= 1.0 - rim;
        }
        picks.push(i);
    }
    picks
}

/// Total curvature `kappa = 1 - min_i [U(V) - U(V \ i)] / U({i})` over items
/// with positive singleton utility, clamped to [0, 1].
pub fn curvature(r: ArrayView2<'_, f64>, alpha: &[f64]) -> Result<f64> {
    let n = r.nrows();
    let all: Vec<usize> = (0..n).collect();
    let full = subset_utility(&all, r, alpha);
    let mut ratio_min = f64::INFINITY;
    for i in 0..n {
        let single = subset_utility(&[i], r, alpha);
        if single <= 0.0 {
            continue;
        }
        let rest: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let gain = full - subset_utility(&rest, r, alpha);
        ratio_min = ratio_min.min(gain / single);
    }
    if ratio_min.is_infinite() {
        return Err(Error::CurvatureUndefined);
    }
    Ok((1.0 - ratio_min).clamp(0.0, 1.0))
}

/// Curvature-aware greedy factor `(1 - e^{-kappa}) / kappa`, equal to 1 at 0.
pub fn curvature_factor(kappa: f64) -> f64 {
    if kappa < 1e-12 {
        1.0
    } else {
        -(-kappa).exp_m1() / kappa
    }
}

/// Greedy guarantee `1 - 1/e`.
pub const GREEDY_FACTOR: f64 = 1.0 - 1.0 / std::f64::consts::E;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub kappa: f64,
    pub factor: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn coverage_closed_forms() {
        let r = arr2(&[[0.5, 0.3], [0.5, 0.9]]);
        assert_eq!(coverage(&[0.0, 0.0], r.view()), vec![0.0, 0.0]);
        let v = coverage(&[1.0, 1.0], r.view());
        assert!((v[0] - 0.75).abs() < 1e-15);
        let single = arr2(&[[0.5]]);
        assert!((coverage(&[1.0], single.view())[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn utility_is_weighted_sum() {
        // v = (0.75, 0.5)
        let r = arr2(&[[0.5, 0.5], [0.5, 0.0]]);
        let u = class_utility(&[1.0, 1.0], r.view(), &[2.0, 1.0]);
        assert!((u - 2.0).abs() < 1e-15);
        assert_eq!(class_utility(&[0.3, 0.9], r.view(), &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn marginal_closed_forms() {
        let r = arr2(&[[0.5], [0.5]]);
        assert_eq!(marginal(&[0.0, 0.0], r.view(), &[1.0]), vec![0.5, 0.5]);
        assert_eq!(marginal(&[1.0, 0.0], r.view(), &[1.0])[1], 0.25);
    }

    #[test]
    fn saturated_anchor_blocks_other_contributions() {
        let r = arr2(&[[1.0, 0.2], [0.4, 0.6], [0.7, 0.1]]);
        let pi = [1.0, 0.5, 0.3];
        assert_eq!(coverage(&pi, r.view())[0], 1.0);
        // Only anchor 0 weighted: every patch other than the saturating one
        // has zero marginal.
        let g = marginal(&pi, r.view(), &[1.0, 0.0]);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
        assert!(g[0] > 0.0);
    }

    #[test]
    fn subset_utility_edges() {
        let r = arr2(&[[1.0, 0.0], [0.2, 1.0], [0.3, 0.3]]);
        assert_eq!(subset_utility(&[], r.view(), &[1.0, 2.0]), 0.0);
        assert_eq!(subset_utility(&[0, 1, 2], r.view(), &[1.0, 2.0]), 3.0);
    }

    #[test]
    fn greedy_hand_example() {
        let r = arr2(&[[0.9, 0.0], [0.0, 0.9], [0.5, 0.5]]);
        assert_eq!(greedy_max(r.view(), &[1.0, 1.0], 1), vec![2]);
        let picks = greedy_max(r.view(), &[1.0, 1.0], 2);
        assert_eq!(picks, vec![2, 0]);
        assert!((subset_utility(&picks, r.view(), &[1.0, 1.0]) - 1.45).abs() < 1e-12);
    }

    #[test]
    fn curvature_extremes() {
        let modular = arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(curvature(modular.view(), &[1.0, 1.0, 1.0]).unwrap(), 0.0);
        let redundant = arr2(&[[1.0], [1.0]]);
        assert_eq!(curvature(redundant.view(), &[1.0]).unwrap(), 1.0);
        let dead = arr2(&[[0.0], [0.0]]);
        assert!(matches!(curvature(dead.view(), &[1.0]), Err(Error::CurvatureUndefined)));
        assert_eq!(curvature_factor(0.0), 1.0);
        assert!((curvature_factor(1.0) - GREEDY_FACTOR).abs() < 1e-15);
    }

    #[test]
    fn class_weights_are_nonnegative() {
        let mut w = ClassAnchorWeights::zeros(2, 3);
        w.raw[[1, 2]] = -40.0;
        assert!(w.alpha(1).iter().all(|&a| a >= 0.0));
        assert!((w.alpha(0)[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
