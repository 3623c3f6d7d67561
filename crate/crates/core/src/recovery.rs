//! Threshold-plus-repair discrete recovery.
//!
//! Starting from `S = {i : pi_i > tau}` (or the single arg-max gate when that
//! is empty), the repair loop adds the non-selected patch with the largest
//! noisy-OR marginal `dU_c/dpi_i` evaluated at the indicator of `S`, until
//! the minimum coverage over the target anchors reaches `c`.

use std::io::Write;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::coverage;
use crate::error::{ensure, Error, Result};
use crate::math::argmax;
use crate::predictor::{self, InjectionMode, PredictorParams};
use crate::synthbag::Bag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    pub threshold: f64,
    pub coverage_target: f64,
    /// Maximum number of repaired additions; `None` means up to `N`.
    pub max_add: Option<usize>,
    /// Disable to return the thresholded subset unrepaired.
    pub repair: bool,
    /// Anchors whose weight is below `anchor_floor * max_m alpha_m` are
    /// excluded from the coverage target. Zero targets every anchor.
    pub anchor_floor: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            coverage_target: 0.95,
            max_add: None,
            repair: true,
            anchor_floor: 0.0,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.threshold > 0.0 && self.threshold < 1.0,
            Config,
            "threshold must lie in (0, 1)"
        );
        ensure!(
            self.coverage_target > 0.0 && self.coverage_target <= 1.0,
            Config,
            "coverage_target must lie in (0, 1]"
        );
        ensure!(
            (0.0..=1.0).contains(&self.anchor_floor),
            Config,
            "anchor_floor must lie in [0, 1]"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Thresholded,
    Fallback,
    Repaired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSubset {
    /// Selected indices: thresholded members ascending, then repairs in order.
    pub indices: Vec<usize>,
    pub provenance: Vec<Provenance>,
    /// Minimum coverage over the target anchors at termination.
    pub coverage: f64,
    /// True when repair stopped before reaching the coverage target.
    pub saturated: bool,
    /// Minimum target coverage before repair and after each addition.
    pub coverage_trace: Vec<f64>,
}

impl EvidenceSubset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn sorted(&self) -> Vec<usize> {
        let mut s = self.indices.clone();
        s.sort_unstable();
        s
    }
}

/// Anchors counted by the coverage target.
pub fn target_anchors(alpha: &[f64], floor: f64) -> Vec<usize> {
    let max = alpha.iter().copied().fold(0.0_f64, f64::max);
    if floor <= 0.0 || max <= 0.0 {
        return (0..alpha.len()).collect();
    }
    (0..alpha.len()).filter(|&m| alpha[m] >= floor * max).collect()
}

fn min_coverage(v: &[f64], targets: &[usize]) -> f64 {
    targets.iter().map(|&m| v[m]).fold(f64::INFINITY, f64::min)
}

/// Recovers a discrete evidence subset from gates `pi`, responses `r` and
/// the predicted-class anchor weights `alpha`.
pub fn recover(pi: &[f64], r: ArrayView2<'_, f64>, alpha: &[f64], cfg: &RecoveryConfig) -> Result<EvidenceSubset> {
    let n = pi.len();
    ensure!(n >= 1, Contract, "cannot recover evidence from an empty bag");
    ensure!(r.nrows() == n, Contract, "responses have {} rows for N = {n}", r.nrows());
    ensure!(alpha.len() == r.ncols(), Contract, "alpha length != number of anchors");
    cfg.validate()?;

    let mut indices: Vec<usize> = (0..n).filter(|&i| pi[i] > cfg.threshold).collect();
    let mut provenance = vec![Provenance::Thresholded; indices.len()];
    if indices.is_empty() {
        indices.push(argmax(pi));
        provenance.push(Provenance::Fallback);
    }
    let targets = target_anchors(alpha, cfg.anchor_floor);
    let mut selected = coverage::indicator(&indices, n);
    let mut cov = min_coverage(&coverage::coverage(&selected, r), &targets);
    let mut trace = vec![cov];

    if cfg.repair {
        let cap = cfg.max_add.unwrap_or(n);
        let mut added = 0;
        while cov < cfg.coverage_target && added < cap && indices.len() < n {
            let gains = coverage::marginal(&selected, r, alpha);
            let mut best: Option<usize> = None;
            for i in (0..n).filter(|&i| selected[i] == 0.0) {
                if best.is_none_or(|b| gains[i] > gains[b]) {
                    best = Some(i);
                }
            }
            let Some(i) = best else { break };
            selected[i] = 1.0;
            indices.push(i);
            provenance.push(Provenance::Repaired);
            added += 1;
            cov = min_coverage(&coverage::coverage(&selected, r), &targets);
            trace.push(cov);
        }
    }
    Ok(EvidenceSubset {
        indices,
        provenance,
        coverage: cov,
        saturated: cfg.repair && cov < cfg.coverage_target,
        coverage_trace: trace,
    })
}

/// `|Phi(X_pi) - Phi(X_S)|` where `Phi` is the probability of `class`.
pub fn cd_gap_for_class(
    host: &PredictorParams,
    bag: &Bag,
    pi: &[f64],
    subset: &[usize],
    mode: InjectionMode,
    class: usize,
) -> Result<f64> {
    let continuous = predictor::forward(host, bag, Some(pi), mode)?;
    let discrete = predictor::predict_subset(host, bag, subset)?;
    Ok((continuous.probs[class] - discrete.probs[class]).abs())
}

/// C-D gap with `Phi` frozen to the class predicted on the full ungated bag.
pub fn cd_gap(host: &PredictorParams, bag: &Bag, pi: &[f64], subset: &[usize], mode: InjectionMode) -> Result<f64> {
    let class = predictor::forward(host, bag, None, mode)?.predicted();
    cd_gap_for_class(host, bag, pi, subset, mode, class)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub bag_id: String,
    pub indices: Vec<usize>,
    pub provenance: Vec<Provenance>,
    pub coverage: f64,
    pub saturated: bool,
}

impl EvidenceRecord {
    pub fn new(bag_id: &str, subset: &EvidenceSubset) -> Self {
        Self {
            bag_id: bag_id.to_string(),
            indices: subset.indices.clone(),
            provenance: subset.provenance.clone(),
            coverage: subset.coverage,
            saturated: subset.saturated,
        }
    }
}

/// One JSON object per line.
pub fn write_evidence(path: &Path, records: &[EvidenceRecord]) -> Result<()> {
    let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for rec in records {
        let line = serde_json::to_string(rec)?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
