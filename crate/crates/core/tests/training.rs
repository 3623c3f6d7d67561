use evsel_core::diagnostics::{
    ablation_suite, bag_context, budget_sweep, AblationRung, DiagnosticsConfig, StabilityProtocol,
};
use evsel_core::params::ParamGroup;
use evsel_core::predictor::{forward, forward_cached};
use evsel_core::recovery::cd_gap;
use evsel_core::synthbag::generate_dataset;
use evsel_core::training::{gate_stats, train};
use evsel_core::{BaselineRule, Dataset, GenConfig, RecoveryConfig, Split, TrainConfig};
use ndarray::Array2;

fn small(num_bags: usize) -> Dataset {
    generate_dataset(&GenConfig {
        num_bags,
        ..GenConfig::default()
    })
    .unwrap()
}

fn desk() -> Dataset {
    generate_dataset(&GenConfig::default()).unwrap()
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let ds = small(30);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let state = train(&ds, &cfg).unwrap();
    assert_eq!(state.model, evsel_core::Model::for_dataset(&ds, &cfg));
    assert!(state.log.is_empty());
}

#[test]
fn same_seed_gives_bitwise_identical_parameters() {
    let ds = small(60);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let a = train(&ds, &cfg).unwrap();
    let b = train(&ds, &cfg).unwrap();
    let bits = |m: &evsel_core::Model| m.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.model), bits(&b.model));
    assert_eq!(a.log, b.log);
    let other = train(&ds, &TrainConfig { seed: 7, ..cfg }).unwrap();
    assert_ne!(bits(&a.model), bits(&other.model));
}

#[test]
fn vacuous_budget_has_zero_penalty() {
    let ds = small(60);
    let cfg = TrainConfig {
        epochs: 3,
        budget: 1.0,
        ..TrainConfig::default()
    };
    let state = train(&ds, &cfg).unwrap();
    assert!(state.log.iter().all(|l| l.train_budget == 0.0));
}

#[test]
fn noiseless_desk_is_learned_perfectly() {
    let ds = generate_dataset(&GenConfig::noiseless()).unwrap();
    let cfg = TrainConfig::default();
    let state = train(&ds, &cfg).unwrap();
    assert_eq!(state.log.len(), 15);
    let last = state.log.last().unwrap();
    assert_eq!(last.val_accuracy, 1.0);
    assert!((0.5 * cfg.budget..=3.0 * cfg.budget).contains(&last.val_mean_gate), "{}", last.val_mean_gate);
}

#[test]
fn trained_gap_matches_two_forward_paths() {
    let ds = small(120);
    let state = train(
        &ds,
        &TrainConfig {
            epochs: 4,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let model = &state.model;
    let rc = RecoveryConfig::default();
    for bag in ds.split(Split::Test) {
        let ctx = bag_context(model, bag, &ds.anchors).unwrap();
        let subset = ctx.recover(&rc).unwrap().unwrap().sorted();
        let pi = ctx.pi.clone().unwrap();

        let class = forward_cached(&model.host, bag.features.view(), None, model.mode)
            .unwrap()
            .out
            .predicted();
        let continuous = forward(&model.host, bag, Some(&pi), model.mode).unwrap().probs[class];
        let mut rows = Array2::zeros((subset.len(), bag.dim()));
        for (dst, &i) in subset.iter().enumerate() {
            rows.row_mut(dst).assign(&bag.features.row(i));
        }
        let discrete = forward_cached(&model.host, rows.view(), None, model.mode)
            .unwrap()
            .out
            .probs[class];
        let gap = cd_gap(&model.host, bag, &pi, &subset, model.mode).unwrap();
        assert!((gap - (continuous - discrete).abs()).abs() <= 1e-12);
    }
}

#[test]
fn ablation_ladder_orderings() {
    let ds = desk();
    let rows = ablation_suite(&ds, &TrainConfig::default(), &RecoveryConfig::default(), &DiagnosticsConfig::default())
        .unwrap();
    let get = |r: AblationRung| &rows.iter().find(|x| x.rung == r).unwrap().metrics;
    let backbone = get(AblationRung::BackboneOnly);
    assert!(backbone.cd_gap.is_none() && backbone.evidence_fraction.is_none());
    let naive = get(AblationRung::NaiveSelector);
    let budget = get(AblationRung::PlusBudget);
    let full = get(AblationRung::Full);
    assert!(budget.cd_gap.unwrap() < naive.cd_gap.unwrap());
    assert!(full.cd_gap.unwrap() < naive.cd_gap.unwrap());
    assert!(full.complement_degradation.unwrap() > naive.complement_degradation.unwrap());
    assert!(full.evidence_sufficiency.unwrap() > naive.evidence_sufficiency.unwrap());
}

fn sweep() -> Vec<evsel_core::diagnostics::SweepRow> {
    budget_sweep(
        &desk(),
        &TrainConfig::default(),
        &RecoveryConfig::default(),
        &DiagnosticsConfig::default(),
        &evsel_core::diagnostics::DEFAULT_SWEEP_BUDGETS,
    )
    .unwrap()
}

#[test]
fn sweep_marks_operating_point_and_vacuous_budget() {
    let rows = sweep();
    let marked: Vec<f64> = rows.iter().filter(|r| r.operating_point).map(|r| r.budget).collect();
    assert_eq!(marked, vec![0.05]);
    let last = rows.last().unwrap();
    assert_eq!((last.budget, last.max_budget_loss), (1.0, 0.0));
    let first = rows.first().unwrap();
    assert!(last.metrics.evidence_fraction.unwrap() > first.metrics.evidence_fraction.unwrap());
}

/// Measured at seed 42: 0.0710, 0.0710, 0.0708, 0.0712, 0.0711, 0.0806.
/// Gates settle near the planted fraction whatever the budget, so the
/// ordering is flat within noise below rho = 1.
#[test]
#[ignore = "not reproduced at desk scale; see the decisions ledger"]
fn evidence_fraction_is_nondecreasing_in_budget() {
    let rows = sweep();
    for w in rows.windows(2) {
        assert!(
            w[1].metrics.evidence_fraction >= w[0].metrics.evidence_fraction,
            "rho {} -> {}",
            w[0].budget,
            w[1].budget
        );
    }
}

/// Measured at seed 42 with seeds [42, 1, 2]: gce_discrete 0.56 vs
/// attention_topk 0.75 under full retraining.
#[test]
#[ignore = "not reproduced at desk scale; see the decisions ledger"]
fn gce_evidence_is_more_stable_than_attention() {
    let ds = desk();
    let cfg = TrainConfig::default();
    let state = train(&ds, &cfg).unwrap();
    let reports = evsel_core::diagnostics::stability(
        &state.model,
        &ds,
        Split::Test,
        &cfg,
        &RecoveryConfig::default(),
        0.05,
        &[BaselineRule::AttentionTopk, BaselineRule::GceDiscrete],
        &[42, 1, 2],
        StabilityProtocol::FullRetrain,
    )
    .unwrap();
    assert!(reports[1].jaccard > reports[0].jaccard, "{reports:?}");
}

#[test]
fn selector_reinit_keeps_host_evidence_fixed() {
    let ds = small(90);
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let state = train(&ds, &cfg).unwrap();
    let reports = evsel_core::diagnostics::stability(
        &state.model,
        &ds,
        Split::Test,
        &cfg,
        &RecoveryConfig::default(),
        0.05,
        &[BaselineRule::AttentionTopk, BaselineRule::GceDiscrete],
        &[3, 4],
        StabilityProtocol::SelectorReinit,
    )
    .unwrap();
    assert_eq!(reports[0].jaccard, 1.0);
    assert!((0.0..=1.0).contains(&reports[1].jaccard));
    let stats = gate_stats(&state.model, &ds.split(Split::Test), &ds.anchors).unwrap();
    assert!((0.0..=1.0).contains(&stats.mean_gate));
}
