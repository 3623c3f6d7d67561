use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    bag_contexts, baseline_subset, build_audit_instance, interventional_bound_audit, localization, median,
    minimal_subset_search, recoverability_bound_audit, snr_evaluate, stability, summarize_minimal, BagContext,
    BagSnr, BaselineRule, InterventionalAudit, LocalizationReport, MinimalSubsetReport, SearchPolicy, SnrReport,
    SnrThresholds, StabilityProtocol, StabilityReport,
};
use crate::error::{ensure, Result};
use crate::predictor::InjectionMode;
use crate::recovery::RecoveryConfig;
use crate::selector::AnnealSchedule;
use crate::synthbag::{Dataset, Split};
use crate::training::{gate_stats, train, Model, TrainConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_SWEEP_BUDGETS: [f64; 6] = [0.01, 0.02, 0.05, 0.10, 0.20, 1.00];
const OPERATING_BUDGET: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub split: Split,
    pub budget_fraction: f64,
    pub seed: u64,
    pub rules: Vec<BaselineRule>,
    pub thresholds: SnrThresholds,
    pub minimal_k: Vec<usize>,
    pub minimal_policies: Vec<SearchPolicy>,
    pub drop_tol: f64,
    /// Number of constructed instances for the interventional bound audit.
    pub audit_instances: usize,
    /// Patches per audit instance; every subset is enumerated.
    pub audit_patches: usize,
    pub recoverability_points: usize,
    /// Empty disables the stability study.
    pub stability_seeds: Vec<u64>,
    pub stability_protocol: StabilityProtocol,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            budget_fraction: OPERATING_BUDGET,
            seed: 42,
            rules: BaselineRule::ALL.to_vec(),
            thresholds: SnrThresholds::default(),
            minimal_k: vec![8, 16, 32],
            minimal_policies: SearchPolicy::ALL.to_vec(),
            drop_tol: 0.05,
            audit_instances: 10,
            audit_patches: 10,
            recoverability_points: 100,
            stability_seeds: Vec::new(),
            stability_protocol: StabilityProtocol::SelectorReinit,
        }
    }
}

impl DiagnosticsConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.budget_fraction > 0.0 && self.budget_fraction <= 1.0,
            Config,
            "budget_fraction must lie in (0, 1]"
        );
        ensure!(self.drop_tol >= 0.0, Config, "drop_tol must be nonnegative");
        ensure!(self.minimal_k.iter().all(|&k| k >= 1), Config, "minimal_k entries must be positive");
        ensure!(
            (1..=16).contains(&self.audit_patches),
            Config,
            "audit_patches must lie in 1..=16"
        );
        ensure!(
            self.stability_seeds.is_empty() || self.stability_seeds.len() >= 2,
            Config,
            "stability needs at least two seeds"
        );
        Ok(())
    }
}

/// Recovered (unmatched) GCE evidence and its diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredEvidence {
    pub snr: SnrReport,
    pub saturated: usize,
    pub repaired_bags: usize,
    pub localization: Option<LocalizationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverabilitySummary {
    pub bags: usize,
    pub violations: usize,
    pub median_distance: Option<f64>,
    pub median_margin: Option<f64>,
    pub median_l_hat: Option<f64>,
    pub median_slack: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub interventional: Vec<InterventionalAudit>,
    pub interventional_violations: usize,
    pub recoverability: Option<RecoverabilitySummary>,
}

/// Everything `diagnose` computes for one checkpoint and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub schema_version: u32,
    pub config: DiagnosticsConfig,
    pub recovery: RecoveryConfig,
    pub mode: InjectionMode,
    pub gating: bool,
    pub num_bags: usize,
    /// Macro-F1 of the deployed (gated when available) model.
    pub macro_f1: f64,
    pub accuracy: f64,
    pub mean_gate: f64,
    pub recovered: Option<RecoveredEvidence>,
    /// Budget-matched comparison keyed by rule name.
    pub budget_matched: BTreeMap<String, SnrReport>,
    pub localization: BTreeMap<String, Option<LocalizationReport>>,
    pub minimal_subsets: Vec<MinimalSubsetReport>,
    pub stability: Option<Vec<StabilityReport>>,
    pub audits: AuditSummary,
    pub per_bag: Vec<BagSnr>,
}

fn recovered_evidence(
    model: &Model,
    ctxs: &[BagContext<'_>],
    recovery: &RecoveryConfig,
    thresholds: &SnrThresholds,
) -> Result<Option<(RecoveredEvidence, Vec<BagSnr>, Vec<Vec<usize>>)>> {
    if !model.gating {
        return Ok(None);
    }
    let subsets = ctxs
        .iter()
        .map(|c| c.recover(recovery).expect("gated context"))
        .collect::<Result<Vec<_>>>()?;
    let sets: Vec<Vec<usize>> = subsets.iter().map(|s| s.sorted()).collect();
    let (snr, per_bag) = snr_evaluate(model, ctxs, &sets, thresholds)?;
    let planted: Vec<&[usize]> = ctxs.iter().map(|c| c.bag.planted.as_slice()).collect();
    let rec = RecoveredEvidence {
        snr,
        saturated: subsets.iter().filter(|s| s.saturated).count(),
        repaired_bags: subsets
            .iter()
            .filter(|s| s.provenance.contains(&crate::recovery::Provenance::Repaired))
            .count(),
        localization: localization(&sets, &planted),
    };
    Ok(Some((rec, per_bag, sets)))
}

fn recoverability_summary(
    model: &Model,
    ctxs: &[BagContext<'_>],
    sets: &[Vec<usize>],
    recovery: &RecoveryConfig,
    cfg: &DiagnosticsConfig,
) -> Result<RecoverabilitySummary> {
    let pairs: Vec<(&BagContext<'_>, &Vec<usize>)> = ctxs.iter().zip(sets).collect();
    let audits = crate::parallel::map(&pairs, |(c, s)| {
        recoverability_bound_audit(
            &model.host,
            c.bag,
            c.pi.as_ref().expect("gated context"),
            s,
            c.class,
            recovery.threshold,
            cfg.recoverability_points,
            cfg.seed,
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&super::RecoverabilityAudit) -> f64| median(&audits.iter().map(f).collect::<Vec<_>>());
    Ok(RecoverabilitySummary {
        bags: audits.len(),
        violations: audits.iter().filter(|a| !a.holds).count(),
        median_distance: col(|a| a.distance),
        median_margin: col(|a| a.min_margin),
        median_l_hat: col(|a| a.l_hat),
        median_slack: col(|a| a.rhs - a.lhs),
    })
}

/// Runs the full diagnostic suite. `train_cfg` is needed only when
/// stability seeds are configured.
pub fn diagnose(
    model: &Model,
    ds: &Dataset,
    recovery: &RecoveryConfig,
    cfg: &DiagnosticsConfig,
    train_cfg: Option<&TrainConfig>,
) -> Result<DiagnosticsReport> {
    cfg.validate()?;
    recovery.validate()?;
    let bags = ds.split(cfg.split);
    ensure!(!bags.is_empty(), Contract, "split {:?} has no bags", cfg.split);
    let ctxs = bag_contexts(model, &bags, &ds.anchors)?;
    let stats = gate_stats(model, &bags, &ds.anchors)?;

    let recovered = recovered_evidence(model, &ctxs, recovery, &cfg.thresholds)?;
    let planted: Vec<&[usize]> = bags.iter().map(|b| b.planted.as_slice()).collect();
    let mut budget_matched = BTreeMap::new();
    let mut loc = BTreeMap::new();
    for &rule in &cfg.rules {
        if rule.needs_gates() && !model.gating {
            continue;
        }
        let sets = crate::parallel::map(&ctxs, |c| {
            baseline_subset(rule, model, c, recovery, cfg.budget_fraction, cfg.seed)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (snr, _) = snr_evaluate(model, &ctxs, &sets, &cfg.thresholds)?;
        budget_matched.insert(rule.as_str().to_string(), snr);
        loc.insert(rule.as_str().to_string(), localization(&sets, &planted));
    }

    let mut minimal_subsets = Vec::new();
    for &k in &cfg.minimal_k {
        for &policy in &cfg.minimal_policies {
            if policy == SearchPolicy::SufficientPrefix && !model.gating {
                continue;
            }
            let results = crate::parallel::map(&ctxs, |c| {
                minimal_subset_search(model, c, k, policy, cfg.drop_tol, cfg.seed)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            minimal_subsets.push(summarize_minimal(k, policy, &results));
        }
    }

    let stability = match (cfg.stability_seeds.is_empty(), train_cfg) {
        (true, _) => None,
        (false, None) => {
            return Err(crate::error::Error::Config(
                "stability seeds configured without a training config".into(),
            ))
        }
        (false, Some(tc)) => {
            let rules: Vec<BaselineRule> = cfg
                .rules
                .iter()
                .copied()
                .filter(|r| model.gating || !r.needs_gates())
                .collect();
            Some(stability(
                model,
                ds,
                cfg.split,
                tc,
                recovery,
                cfg.budget_fraction,
                &rules,
                &cfg.stability_seeds,
                cfg.stability_protocol,
            )?)
        }
    };

    let interventional: Vec<InterventionalAudit> = (0..cfg.audit_instances)
        .map(|j| {
            let inst = build_audit_instance(cfg.seed.wrapping_add(j as u64), cfg.audit_patches, 4, 8, 3)?;
            let n = cfg.audit_patches;
            let all: Vec<Vec<usize>> = (0u32..1 << n)
                .map(|mask| (0..n).filter(|&i| mask >> i & 1 == 1).collect())
                .collect();
            Ok(interventional_bound_audit(&inst, &all))
        })
        .collect::<Result<_>>()?;
    let recoverability = match &recovered {
        Some((_, _, sets)) => Some(recoverability_summary(model, &ctxs, sets, recovery, cfg)?),
        None => None,
    };

    let (recovered, per_bag) = match recovered {
        Some((rec, per_bag, _)) => (Some(rec), per_bag),
        None => (None, Vec::new()),
    };
    Ok(DiagnosticsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        recovery: recovery.clone(),
        mode: model.mode,
        gating: model.gating,
        num_bags: bags.len(),
        macro_f1: stats.macro_f1,
        accuracy: stats.accuracy,
        mean_gate: stats.mean_gate,
        recovered,
        budget_matched,
        localization: loc,
        minimal_subsets,
        stability,
        audits: AuditSummary {
            interventional_violations: interventional.iter().map(|a| a.violations).sum(),
            interventional,
            recoverability,
        },
        per_bag,
    })
}

/// Headline metrics of a trained model with its recovered evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceMetrics {
    pub macro_f1: f64,
    pub evidence_fraction: Option<f64>,
    pub cd_gap: Option<f64>,
    pub complement_degradation: Option<f64>,
    pub evidence_sufficiency: Option<f64>,
}

fn evidence_metrics(model: &Model, ds: &Dataset, recovery: &RecoveryConfig, cfg: &DiagnosticsConfig) -> Result<EvidenceMetrics> {
    let bags = ds.split(cfg.split);
    let stats = gate_stats(model, &bags, &ds.anchors)?;
    let ctxs = bag_contexts(model, &bags, &ds.anchors)?;
    let rec = recovered_evidence(model, &ctxs, recovery, &cfg.thresholds)?;
    Ok(match rec {
        Some((r, _, _)) => EvidenceMetrics {
            macro_f1: stats.macro_f1,
            evidence_fraction: Some(r.snr.evidence_fraction),
            cd_gap: r.snr.cd_gap_mean,
            complement_degradation: r.snr.complement_degradation,
            evidence_sufficiency: Some(r.snr.evidence_sufficiency),
        },
        None => EvidenceMetrics {
            macro_f1: stats.macro_f1,
            evidence_fraction: None,
            cd_gap: None,
            complement_degradation: None,
            evidence_sufficiency: None,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: f64,
    pub operating_point: bool,
    #[serde(flatten)]
    pub metrics: EvidenceMetrics,
    /// Largest per-epoch mean budget loss seen during training.
    pub max_budget_loss: f64,
}

/// Retrains once per budget `rho` with a shared seed.
pub fn budget_sweep(
    ds: &Dataset,
    train_cfg: &TrainConfig,
    recovery: &RecoveryConfig,
    cfg: &DiagnosticsConfig,
    budgets: &[f64],
) -> Result<Vec<SweepRow>> {
    budgets
        .iter()
        .map(|&rho| {
            let tc = TrainConfig {
                budget: rho,
                ..train_cfg.clone()
            };
            let state = train(ds, &tc)?;
            Ok(SweepRow {
                budget: rho,
                operating_point: (rho - OPERATING_BUDGET).abs() < 1e-12,
                metrics: evidence_metrics(&state.model, ds, recovery, cfg)?,
                max_budget_loss: state.log.iter().map(|l| l.train_budget).fold(0.0, f64::max),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRung {
    BackboneOnly,
    NaiveSelector,
    PlusBudget,
    PlusRecovery,
    PlusGrounding,
    Full,
}

impl AblationRung {
    pub const LADDER: [AblationRung; 6] = [
        AblationRung::BackboneOnly,
        AblationRung::NaiveSelector,
        AblationRung::PlusBudget,
        AblationRung::PlusRecovery,
        AblationRung::PlusGrounding,
        AblationRung::Full,
    ];

    /// Training and recovery settings for this rung, derived from the full
    /// configuration.
    pub fn configure(self, full: &TrainConfig, recovery: &RecoveryConfig) -> (TrainConfig, RecoveryConfig) {
        let mut tc = full.clone();
        let mut rc = recovery.clone();
        if self == AblationRung::BackboneOnly {
            tc.gating = false;
            return (tc, rc);
        }
        let rank = Self::LADDER.iter().position(|&r| r == self).unwrap();
        let at_least = |r: AblationRung| rank >= Self::LADDER.iter().position(|&x| x == r).unwrap();
        if !at_least(AblationRung::PlusBudget) {
            tc.lambda_budget = 0.0;
        }
        if !at_least(AblationRung::PlusRecovery) {
            rc.repair = false;
        }
        if !at_least(AblationRung::PlusGrounding) {
            tc.lambda_ground = 0.0;
        }
        if self != AblationRung::Full {
            tc.constrain_bridge = false;
            tc.temperature = AnnealSchedule::constant(full.temperature.start);
        }
        (tc, rc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub rung: AblationRung,
    #[serde(flatten)]
    pub metrics: EvidenceMetrics,
}

/// Trains each rung of the ladder with the shared seed in `train_cfg`.
pub fn ablation_suite(
    ds: &Dataset,
    train_cfg: &TrainConfig,
    recovery: &RecoveryConfig,
    cfg: &DiagnosticsConfig,
) -> Result<Vec<AblationRow>> {
    AblationRung::LADDER
        .iter()
        .map(|&rung| {
            let (tc, rc) = rung.configure(train_cfg, recovery);
            let state = train(ds, &tc)?;
            Ok(AblationRow {
                rung,
                metrics: evidence_metrics(&state.model, ds, &rc, cfg)?,
            })
        })
        .collect()
}
