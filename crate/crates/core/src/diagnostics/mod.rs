//! Sufficiency / necessity / recoverability diagnostics, budget-matched
//! baselines, minimal sufficient subsets, stability, localization, bound
//! audits and the sweep/ablation harnesses.

mod audits;
mod baselines;
mod experiments;
mod minimal;
mod stability;

pub use audits::{
    build_audit_instance, interventional_bound_audit, recoverability_bound_audit, AuditInstance,
    InterventionalAudit, RecoverabilityAudit,
};
pub use baselines::{baseline_subset, budget_k, gce_discrete_subset, top_k, BaselineRule};
pub use experiments::{
    ablation_suite, budget_sweep, diagnose, AblationRow, AblationRung, AuditSummary, DiagnosticsConfig,
    DiagnosticsReport, EvidenceMetrics, RecoverabilitySummary, RecoveredEvidence, SweepRow, DEFAULT_SWEEP_BUDGETS,
    REPORT_SCHEMA_VERSION,
};
pub use minimal::{minimal_subset_search, summarize_minimal, MinimalBagResult, MinimalSubsetReport, SearchPolicy};
pub use stability::{stability, stability_from_sets, StabilityProtocol, StabilityReport};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::predictor::{self, Forward};
use crate::recovery::{self, EvidenceSubset, RecoveryConfig};
use crate::synthbag::{AnchorBank, Bag};
use crate::training::Model;

/// Unweighted mean of per-class F1 over all `classes`; classes that are never
/// predicted (or never present) contribute 0.
pub fn macro_f1(labels: &[usize], predicted: &[usize], classes: usize) -> f64 {
    if classes == 0 {
        return 0.0;
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&y, &p) in labels.iter().zip(predicted) {
        if y == p {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let sum: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if tp[c] == 0 || denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    sum / classes as f64
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// `|A ∩ B| / |A ∪ B|`; two empty sets have Jaccard 1.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let sa: std::collections::BTreeSet<_> = a.iter().collect();
    let sb: std::collections::BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// `2 |S ∩ P| / (|S| + |P|)`.
pub fn dice(s: &[usize], p: &[usize]) -> f64 {
    let ss: std::collections::BTreeSet<_> = s.iter().collect();
    let sp: std::collections::BTreeSet<_> = p.iter().collect();
    let denom = ss.len() + sp.len();
    if denom == 0 {
        return 1.0;
    }
    2.0 * ss.intersection(&sp).count() as f64 / denom as f64
}

/// Indices of `0..n` not in `subset`, ascending.
pub fn complement(subset: &[usize], n: usize) -> Vec<usize> {
    let mut keep = vec![true; n];
    for &i in subset {
        keep[i] = false;
    }
    (0..n).filter(|&i| keep[i]).collect()
}

/// Everything the diagnostics need about one bag under a trained model.
#[derive(Debug, Clone)]
pub struct BagContext<'a> {
    pub bag: &'a Bag,
    /// Ungated host forward on the full bag.
    pub full: Forward,
    /// Class predicted on the full bag; `Phi` is its probability.
    pub class: usize,
    pub pi: Option<Vec<f64>>,
    pub r: Option<Array2<f64>>,
    /// Anchor weights of the full-bag predicted class.
    pub alpha: Vec<f64>,
}

impl BagContext<'_> {
    pub fn phi_full(&self) -> f64 {
        self.full.probs[self.class]
    }

    pub fn recover(&self, cfg: &RecoveryConfig) -> Option<Result<EvidenceSubset>> {
        let (pi, r) = (self.pi.as_ref()?, self.r.as_ref()?);
        Some(recovery::recover(pi, r.view(), &self.alpha, cfg))
    }
}

pub fn bag_context<'a>(model: &Model, bag: &'a Bag, anchors: &AnchorBank) -> Result<BagContext<'a>> {
    let full = predictor::forward(&model.host, bag, None, model.mode)?;
    let class = full.predicted();
    let alpha = model.class_weights.alpha(class);
    let (pi, r) = if model.gating {
        let ev = model.evidence(bag, anchors, model.temperature)?;
        (Some(ev.pi().to_vec()), Some(ev.r().clone()))
    } else {
        (None, None)
    };
    Ok(BagContext {
        bag,
        full,
        class,
        pi,
        r,
        alpha,
    })
}

pub fn bag_contexts<'a>(model: &Model, bags: &[&'a Bag], anchors: &AnchorBank) -> Result<Vec<BagContext<'a>>> {
    crate::parallel::map(bags, |b| bag_context(model, b, anchors))
        .into_iter()
        .collect()
}

/// Per-bag intervention outcomes for one evidence rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagSnr {
    pub bag_id: String,
    pub keep_class: usize,
    pub keep_prob_drop: f64,
    pub complement_class: Option<usize>,
    pub complement_prob_drop: Option<f64>,
    pub cd_gap: Option<f64>,
    pub evidence_fraction: f64,
}

/// Aggregate S/N/R diagnostics. Macro-F1 based metrics follow the
/// keep-only / complement conventions; `*_prob_drop` fields report the mean
/// drop of the full-bag predicted-class probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub num_bags: usize,
    pub full_macro_f1: f64,
    pub evidence_sufficiency: f64,
    pub keep_only_drop: f64,
    /// `None` when every complement is empty.
    pub complement_degradation: Option<f64>,
    pub empty_complements: usize,
    pub cd_gap_mean: Option<f64>,
    pub cd_gap_median: Option<f64>,
    pub evidence_fraction: f64,
    pub keep_prob_drop: f64,
    pub complement_prob_drop: Option<f64>,
    /// Fraction of bags whose evidence is delta_s-sufficient.
    pub frac_sufficient: f64,
    /// Fraction of bags with a nonempty complement that are delta_n-necessary.
    pub frac_necessary: Option<f64>,
    /// Fraction of gated bags that are delta_r-recoverable.
    pub frac_recoverable: Option<f64>,
    pub thresholds: SnrThresholds,
}

/// Per-bag tolerances on predicted-class probability changes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnrThresholds {
    /// `|Phi(X) - Phi(X_S)| <= delta_s`
    pub delta_s: f64,
    /// `Phi(X) - Phi(X_{not S}) >= delta_n`
    pub delta_n: f64,
    /// `|Phi(X_pi) - Phi(X_S)| <= delta_r`
    pub delta_r: f64,
}

impl Default for SnrThresholds {
    fn default() -> Self {
        Self {
            delta_s: 0.05,
            delta_n: 0.05,
            delta_r: 0.05,
        }
    }
}

fn fraction(flags: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for f in flags {
        hit += usize::from(f);
        total += 1;
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Evaluates keep-only, complement and C-D interventions for `evidence`
/// (one nonempty subset per context).
pub fn snr_evaluate(
    model: &Model,
    contexts: &[BagContext<'_>],
    evidence: &[Vec<usize>],
    thresholds: &SnrThresholds,
) -> Result<(SnrReport, Vec<BagSnr>)> {
    ensure!(
        contexts.len() == evidence.len(),
        Contract,
        "{} contexts for {} evidence sets",
        contexts.len(),
        evidence.len()
    );
    ensure!(evidence.iter().all(|s| !s.is_empty()), Contract, "evidence subsets must be nonempty");
    let pairs: Vec<(&BagContext<'_>, &Vec<usize>)> = contexts.iter().zip(evidence).collect();
    let per_bag: Vec<BagSnr> = crate::parallel::map(&pairs, |(ctx, s)| -> Result<BagSnr> {
        let n = ctx.bag.len();
        let keep = predictor::predict_subset(&model.host, ctx.bag, s)?;
        let comp = complement(s, n);
        let (complement_class, complement_prob_drop) = if comp.is_empty() {
            (None, None)
        } else {
            let p = predictor::predict_subset(&model.host, ctx.bag, &comp)?;
            (Some(p.class), Some(ctx.phi_full() - p.probs[ctx.class]))
        };
        let cd_gap = match &ctx.pi {
            Some(pi) => {
                let cont = predictor::forward(&model.host, ctx.bag, Some(pi), model.mode)?;
                Some((cont.probs[ctx.class] - keep.probs[ctx.class]).abs())
            }
            None => None,
        };
        Ok(BagSnr {
            bag_id: ctx.bag.id.clone(),
            keep_class: keep.class,
            keep_prob_drop: ctx.phi_full() - keep.probs[ctx.class],
            complement_class,
            complement_prob_drop,
            cd_gap,
            evidence_fraction: s.len() as f64 / n as f64,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let classes = model.num_classes();
    let labels: Vec<usize> = contexts.iter().map(|c| c.bag.label).collect();
    let full_pred: Vec<usize> = contexts.iter().map(|c| c.class).collect();
    let keep_pred: Vec<usize> = per_bag.iter().map(|b| b.keep_class).collect();
    let full_macro_f1 = macro_f1(&labels, &full_pred, classes);
    let evidence_sufficiency = macro_f1(&labels, &keep_pred, classes);

    let with_comp: Vec<usize> = (0..per_bag.len())
        .filter(|&i| per_bag[i].complement_class.is_some())
        .collect();
    let complement_degradation = (!with_comp.is_empty()).then(|| {
        let l: Vec<usize> = with_comp.iter().map(|&i| labels[i]).collect();
        let f: Vec<usize> = with_comp.iter().map(|&i| full_pred[i]).collect();
        let c: Vec<usize> = with_comp.iter().map(|&i| per_bag[i].complement_class.unwrap()).collect();
        macro_f1(&l, &f, classes) - macro_f1(&l, &c, classes)
    });
    let gaps: Vec<f64> = per_bag.iter().filter_map(|b| b.cd_gap).collect();
    let comp_drops: Vec<f64> = per_bag.iter().filter_map(|b| b.complement_prob_drop).collect();
    let fractions: Vec<f64> = per_bag.iter().map(|b| b.evidence_fraction).collect();
    let keep_drops: Vec<f64> = per_bag.iter().map(|b| b.keep_prob_drop).collect();
    let report = SnrReport {
        num_bags: per_bag.len(),
        full_macro_f1,
        evidence_sufficiency,
        keep_only_drop: full_macro_f1 - evidence_sufficiency,
        complement_degradation,
        empty_complements: per_bag.len() - with_comp.len(),
        cd_gap_mean: mean(&gaps),
        cd_gap_median: median(&gaps),
        evidence_fraction: mean(&fractions).unwrap_or(0.0),
        keep_prob_drop: mean(&keep_drops).unwrap_or(0.0),
        complement_prob_drop: mean(&comp_drops),
        frac_sufficient: fraction(keep_drops.iter().map(|d| d.abs() <= thresholds.delta_s)).unwrap_or(0.0),
        frac_necessary: fraction(comp_drops.iter().map(|d| *d >= thresholds.delta_n)),
        frac_recoverable: fraction(gaps.iter().map(|g| *g <= thresholds.delta_r)),
        thresholds: *thresholds,
    };
    Ok((report, per_bag))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub bags: usize,
}

/// Planted-evidence localization; bags without planted indices are skipped,
/// and `None` means no bag had ground truth.
pub fn localization(evidence: &[Vec<usize>], planted: &[&[usize]]) -> Option<LocalizationReport> {
    let mut d = Vec::new();
    let mut p = Vec::new();
    let mut r = Vec::new();
    for (s, truth) in evidence.iter().zip(planted) {
        if truth.is_empty() {
            continue;
        }
        let hits = s.iter().filter(|i| truth.contains(i)).count() as f64;
        d.push(dice(s, truth));
        p.push(if s.is_empty() { 0.0 } else { hits / s.len() as f64 });
        r.push(hits / truth.len() as f64);
    }
    Some(LocalizationReport {
        dice: mean(&d)?,
        precision: mean(&p)?,
        recall: mean(&r)?,
        bags: d.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn macro_f1_hand_example() {
        // class 0: tp 1, fp 2, fn 1 -> 0.4; class 1: tp 1, fp 1, fn 1 -> 0.5;
        // class 2: tp 0 -> 0
        let labels = [0, 0, 1, 1, 2];
        let pred = [0, 1, 1, 0, 0];
        let f = macro_f1(&labels, &pred, 3);
        let want = (0.4 + 0.5 + 0.0) / 3.0;
        assert!((f - want).abs() < 1e-15, "{f} vs {want}");
        assert_eq!(macro_f1(&[0, 1, 1], &[0, 1, 1], 2), 1.0);
    }

    #[test]
    fn set_metrics() {
        assert_eq!(jaccard(&[1, 2, 3], &[3, 2, 1]), 1.0);
        assert_eq!(jaccard(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(dice(&[1, 2], &[2, 1]), 1.0);
        assert_eq!(dice(&[1], &[2]), 0.0);
        assert!((dice(&[1, 2], &[2, 3]) - 0.5).abs() < 1e-15);
        assert_eq!(complement(&[0, 2], 4), vec![1, 3]);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn localization_without_ground_truth_is_unavailable() {
        assert!(localization(&[vec![1]], &[&[]]).is_none());
        let rep = localization(&[vec![1, 2], vec![0]], &[&[1, 2], &[5]]).unwrap();
        assert_eq!(rep.bags, 2);
        assert!((rep.dice - 0.5).abs() < 1e-15);
        assert!((rep.precision - 0.5).abs() < 1e-15);
        assert!((rep.recall - 0.5).abs() < 1e-15);
    }
}
