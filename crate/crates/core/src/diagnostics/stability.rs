use serde::{Deserialize, Serialize};

use super::{bag_contexts, baseline_subset, jaccard, BaselineRule};
use crate::error::{ensure, Result};
use crate::recovery::RecoveryConfig;
use crate::synthbag::{Dataset, Split};
use crate::training::{gated_predictions, train, train_from, Model, TrainConfig, TrainScope, TrainState};

/// How each seed perturbs the trained model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityProtocol {
    /// Re-draw the selector and adapter and retrain them on the frozen host.
    #[default]
    SelectorReinit,
    /// Retrain every parameter group from a fresh seed.
    FullRetrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub rule: BaselineRule,
    pub protocol: StabilityProtocol,
    pub seeds: Vec<u64>,
    pub jaccard: f64,
    pub flip_rate: f64,
}

/// Mean pairwise Jaccard over seed pairs and bags, and the fraction of bags
/// whose predicted class is not identical across seeds.
///
/// `sets[s][b]` is the evidence for bag `b` under seed `s`; `preds[s][b]`
/// the corresponding prediction.
pub fn stability_from_sets(sets: &[Vec<Vec<usize>>], preds: &[Vec<usize>]) -> Result<(f64, f64)> {
    ensure!(sets.len() >= 2, Contract, "stability needs at least two seeds");
    ensure!(sets.len() == preds.len(), Contract, "sets and predictions disagree on seed count");
    let bags = sets[0].len();
    ensure!(
        sets.iter().all(|s| s.len() == bags) && preds.iter().all(|p| p.len() == bags),
        Contract,
        "every seed must cover the same bags"
    );
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            for bag in 0..bags {
                total += jaccard(&sets[a][bag], &sets[b][bag]);
                count += 1;
            }
        }
    }
    let flips = (0..bags)
        .filter(|&bag| preds.iter().any(|p| p[bag] != preds[0][bag]))
        .count();
    Ok((total / count.max(1) as f64, flips as f64 / bags.max(1) as f64))
}

fn perturbed(base: &Model, ds: &Dataset, cfg: &TrainConfig, seed: u64, protocol: StabilityProtocol) -> Result<Model> {
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let state = match protocol {
        StabilityProtocol::SelectorReinit => {
            let mut model = base.clone();
            model.reinit_selector(seed);
            train_from(ds, &cfg, TrainState::from_model(model), TrainScope::SelectorOnly)?
        }
        StabilityProtocol::FullRetrain => train(ds, &cfg)?,
    };
    Ok(state.model)
}

/// Evidence stability of each rule across perturbed retrains, evaluated on
/// `split` at budget `fraction`.
#[allow(clippy::too_many_arguments)]
pub fn stability(
    base: &Model,
    ds: &Dataset,
    split: Split,
    cfg: &TrainConfig,
    recovery: &RecoveryConfig,
    fraction: f64,
    rules: &[BaselineRule],
    seeds: &[u64],
    protocol: StabilityProtocol,
) -> Result<Vec<StabilityReport>> {
    ensure!(seeds.len() >= 2, Contract, "stability needs at least two seeds");
    let bags = ds.split(split);
    let models: Vec<Model> = seeds
        .iter()
        .map(|&s| perturbed(base, ds, cfg, s, protocol))
        .collect::<Result<_>>()?;
    let mut preds = Vec::with_capacity(models.len());
    let mut contexts = Vec::with_capacity(models.len());
    for m in &models {
        preds.push(gated_predictions(m, &bags, &ds.anchors)?.into_iter().map(|p| p.0).collect::<Vec<_>>());
        contexts.push(bag_contexts(m, &bags, &ds.anchors)?);
    }
    rules
        .iter()
        .map(|&rule| {
            let sets: Vec<Vec<Vec<usize>>> = models
                .iter()
                .zip(&contexts)
                .map(|(m, ctxs)| {
                    ctxs.iter()
                        .map(|c| baseline_subset(rule, m, c, recovery, fraction, cfg.seed))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            let (jaccard, flip_rate) = stability_from_sets(&sets, &preds)?;
            Ok(StabilityReport {
                rule,
                protocol,
                seeds: seeds.to_vec(),
                jaccard,
                flip_rate,
            })
        })
        .collect()
}
