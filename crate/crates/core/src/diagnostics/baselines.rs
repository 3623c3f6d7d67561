use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::BagContext;
use crate::coverage;
use crate::error::{Error, Result};
use crate::math::fnv1a64;
use crate::predictor;
use crate::recovery::RecoveryConfig;
use crate::synthbag::stream_rng;
use crate::training::Model;

/// Evidence rules compared at a matched budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineRule {
    RandomK,
    AttentionTopk,
    GradientTopk,
    OcclusionTopk,
    GceSoftThreshold,
    GceDiscrete,
}

impl BaselineRule {
    pub const ALL: [BaselineRule; 6] = [
        BaselineRule::RandomK,
        BaselineRule::AttentionTopk,
        BaselineRule::GradientTopk,
        BaselineRule::OcclusionTopk,
        BaselineRule::GceSoftThreshold,
        BaselineRule::GceDiscrete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineRule::RandomK => "random_k",
            BaselineRule::AttentionTopk => "attention_topk",
            BaselineRule::GradientTopk => "gradient_topk",
            BaselineRule::OcclusionTopk => "occlusion_topk",
            BaselineRule::GceSoftThreshold => "gce_soft_threshold",
            BaselineRule::GceDiscrete => "gce_discrete",
        }
    }

    /// Rules that read gates and so need a gated model.
    pub fn needs_gates(self) -> bool {
        matches!(self, BaselineRule::GceSoftThreshold | BaselineRule::GceDiscrete)
    }
}

impl std::str::FromStr for BaselineRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline rule '{s}'")))
    }
}

/// `k = max(1, round(fraction * n))`, capped at `n`.
pub fn budget_k(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

/// First `k` indices by descending score; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn gradient_saliency(model: &Model, ctx: &BagContext<'_>) -> Result<Vec<f64>> {
    let cache = predictor::forward_cached(&model.host, ctx.bag.features.view(), None, model.mode)?;
    let mut onehot = vec![0.0; model.num_classes()];
    onehot[ctx.class] = 1.0;
    let back = predictor::backward(&model.host, &cache, &onehot);
    Ok(back
        .features
        .rows()
        .into_iter()
        .map(|row| row.dot(&row).sqrt())
        .collect())
}

fn occlusion_drops(model: &Model, ctx: &BagContext<'_>) -> Result<Vec<f64>> {
    let n = ctx.bag.len();
    let base = ctx.phi_full();
    if n == 1 {
        return Ok(vec![base]);
    }
    (0..n)
        .map(|i| {
            let rest: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let p = predictor::predict_subset(&model.host, ctx.bag, &rest)?;
            Ok(base - p.probs[ctx.class])
        })
        .collect()
}

/// Recovered subset trimmed or greedily extended to exactly `k` members.
pub fn gce_discrete_subset(ctx: &BagContext<'_>, recovery: &RecoveryConfig, k: usize) -> Result<Vec<usize>> {
    let r = ctx
        .r
        .as_ref()
        .ok_or_else(|| Error::Contract("gce_discrete needs a gated model".into()))?;
    let recovered = ctx.recover(recovery).expect("gated context")?;
    let n = ctx.bag.len();
    let s = recovered.indices;
    Ok(if s.len() > k {
        coverage::greedy_from(r.view(), &ctx.alpha, &[], &s, k)
    } else if s.len() < k {
        let rest = super::complement(&s, n);
        let mut out = s.clone();
        out.extend(coverage::greedy_from(r.view(), &ctx.alpha, &s, &rest, k - s.len()));
        out
    } else {
        s
    })
}

/// Budget-matched evidence subset (`k` from [`budget_k`]) for one bag.
pub fn baseline_subset(
    rule: BaselineRule,
    model: &Model,
    ctx: &BagContext<'_>,
    recovery: &RecoveryConfig,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = ctx.bag.len();
    let k = budget_k(n, fraction);
    let no_gates = || Error::Contract(format!("{} needs a gated model", rule.as_str()));
    match rule {
        BaselineRule::RandomK => {
            let mut rng = stream_rng(seed, fnv1a64(ctx.bag.id.as_bytes()));
            Ok(sample(&mut rng, n, k).into_vec())
        }
        BaselineRule::AttentionTopk => Ok(top_k(&ctx.full.attention, k)),
        BaselineRule::GradientTopk => Ok(top_k(&gradient_saliency(model, ctx)?, k)),
        BaselineRule::OcclusionTopk => Ok(top_k(&occlusion_drops(model, ctx)?, k)),
        BaselineRule::GceSoftThreshold => Ok(top_k(ctx.pi.as_ref().ok_or_else(no_gates)?, k)),
        BaselineRule::GceDiscrete => gce_discrete_subset(ctx, recovery, k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_k_rounds_and_clamps() {
        assert_eq!(budget_k(40, 0.05), 2);
        assert_eq!(budget_k(10, 0.05), 1);
        assert_eq!(budget_k(3, 1.0), 3);
        assert_eq!(budget_k(90, 0.05), 5);
        assert_eq!(budget_k(1, 0.01), 1);
    }

    #[test]
    fn top_k_breaks_ties_low() {
        assert_eq!(top_k(&[0.1, 0.5, 0.5, 0.9], 3), vec![3, 1, 2]);
        assert_eq!(top_k(&[0.0; 4], 2), vec![0, 1]);
    }

    #[test]
    fn rule_names_round_trip() {
        for r in BaselineRule::ALL {
            assert_eq!(r.as_str().parse::<BaselineRule>().unwrap(), r);
        }
        assert!("nope".parse::<BaselineRule>().is_err());
    }
}
