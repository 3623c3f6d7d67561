use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{mean, top_k, BagContext};
use crate::coverage;
use crate::error::{Error, Result};
use crate::math::fnv1a64;
use crate::predictor;
use crate::synthbag::stream_rng;
use crate::training::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchPolicy {
    /// Greedy coverage-marginal prefix for the full-bag predicted class.
    SufficientPrefix,
    AttentionTopk,
    RandomTopk,
}

impl SearchPolicy {
    pub const ALL: [SearchPolicy; 3] = [
        SearchPolicy::SufficientPrefix,
        SearchPolicy::AttentionTopk,
        SearchPolicy::RandomTopk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SearchPolicy::SufficientPrefix => "sufficient_prefix",
            SearchPolicy::AttentionTopk => "attention_topk",
            SearchPolicy::RandomTopk => "random_topk",
        }
    }
}

impl std::str::FromStr for SearchPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown search policy '{s}'")))
    }
}

/// Disjoint sufficient subsets found in one bag, with probability drops of
/// the full-bag predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalBagResult {
    pub bag_id: String,
    pub subsets: Vec<Vec<usize>>,
    /// Drop when keeping only the first subset.
    pub keep_only_drop: Option<f64>,
    /// `remove_union[j]`: drop after removing the union of the first `j + 1`
    /// subsets (`None` when fewer subsets exist or nothing would remain).
    pub remove_union: [Option<f64>; 3],
}

fn candidate(
    policy: SearchPolicy,
    ctx: &BagContext<'_>,
    pool: &[usize],
    k: usize,
    rng: &mut crate::synthbag::Rng64,
) -> Result<Vec<usize>> {
    Ok(match policy {
        SearchPolicy::SufficientPrefix => {
            let r = ctx
                .r
                .as_ref()
                .ok_or_else(|| Error::Contract("sufficient_prefix needs anchor responses".into()))?;
            coverage::greedy_from(r.view(), &ctx.alpha, &[], pool, k)
        }
        SearchPolicy::AttentionTopk => {
            let scores: Vec<f64> = pool.iter().map(|&i| ctx.full.attention[i]).collect();
            top_k(&scores, k).into_iter().map(|j| pool[j]).collect()
        }
        SearchPolicy::RandomTopk => sample(rng, pool.len(), k).into_iter().map(|j| pool[j]).collect(),
    })
}

/// Repeatedly proposes a size-`k` subset from the remaining pool and accepts
/// it while it keeps the full-bag predicted class with probability drop at
/// most `drop_tol`.
pub fn minimal_subset_search(
    model: &Model,
    ctx: &BagContext<'_>,
    k: usize,
    policy: SearchPolicy,
    drop_tol: f64,
    seed: u64,
) -> Result<MinimalBagResult> {
    let n = ctx.bag.len();
    let base = ctx.phi_full();
    let mut rng = stream_rng(seed, fnv1a64(ctx.bag.id.as_bytes()) ^ 0x5B5E7);
    let mut pool: Vec<usize> = (0..n).collect();
    let mut subsets = Vec::new();
    while k >= 1 && k <= pool.len() {
        let s = candidate(policy, ctx, &pool, k, &mut rng)?;
        let pred = predictor::predict_subset(&model.host, ctx.bag, &s)?;
        if pred.class != ctx.class || base - pred.probs[ctx.class] > drop_tol {
            break;
        }
        pool.retain(|i| !s.contains(i));
        subsets.push(s);
    }

    let keep_only_drop = match subsets.first() {
        Some(s) => Some(base - predictor::predict_subset(&model.host, ctx.bag, s)?.probs[ctx.class]),
        None => None,
    };
    let mut remove_union = [None; 3];
    let mut removed = vec![false; n];
    for (j, s) in subsets.iter().take(3).enumerate() {
        for &i in s {
            removed[i] = true;
        }
        let rest: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();
        if !rest.is_empty() {
            let p = predictor::predict_subset(&model.host, ctx.bag, &rest)?;
            remove_union[j] = Some(base - p.probs[ctx.class]);
        }
    }
    Ok(MinimalBagResult {
        bag_id: ctx.bag.id.clone(),
        subsets,
        keep_only_drop,
        remove_union,
    })
}

/// Aggregate columns of the minimal-subset table for one `(k, policy)`.
/// Drops are probabilities of the full-bag predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalSubsetReport {
    pub k: usize,
    pub policy: SearchPolicy,
    pub bags: usize,
    pub subsets_per_bag: f64,
    pub frac_at_least_2: f64,
    pub frac_at_least_3: f64,
    pub keep_only_drop: Option<f64>,
    pub remove_union_1: Option<f64>,
    pub remove_union_2: Option<f64>,
    pub remove_union_3: Option<f64>,
}

pub fn summarize_minimal(k: usize, policy: SearchPolicy, results: &[MinimalBagResult]) -> MinimalSubsetReport {
    let bags = results.len().max(1) as f64;
    let counts: Vec<usize> = results.iter().map(|r| r.subsets.len()).collect();
    let frac = |m: usize| counts.iter().filter(|&&c| c >= m).count() as f64 / bags;
    let keep: Vec<f64> = results.iter().filter_map(|r| r.keep_only_drop).collect();
    let ru = |j: usize| {
        let v: Vec<f64> = results.iter().filter_map(|r| r.remove_union[j]).collect();
        mean(&v)
    };
    MinimalSubsetReport {
        k,
        policy,
        bags: results.len(),
        subsets_per_bag: counts.iter().sum::<usize>() as f64 / bags,
        frac_at_least_2: frac(2),
        frac_at_least_3: frac(3),
        keep_only_drop: mean(&keep),
        remove_union_1: ru(0),
        remove_union_2: ru(1),
        remove_union_3: ru(2),
    }
}
