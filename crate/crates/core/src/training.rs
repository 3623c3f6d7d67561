//! Joint training of host, grounding, selector and class-anchor weights.
//!
//! The per-bag objective is
//!
//! ```text
//! L = CE(host(X gated by pi), y) + lambda_b * budget(pi) + lambda_g * ground(pi, r, alpha_y)
//! budget(pi)           = max(mean(pi) - rho, 0)^2
//! ground(pi, r, alpha) = sum_m alpha_m (1 - v_m(pi)) / sum_m alpha_m
//! ```
//!
//! The grounding term is the normalized uncovered anchor mass of the true
//! class. Bags are processed one at a time (variable length), optimized with
//! AdamW under global-norm clipping and an optional cosine schedule.

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::coverage::{self, ClassAnchorWeights};
use crate::error::{ensure, Error, Result};
use crate::grounding::{self, Adapted, BridgeInput, GroundingParams, Responses};
use crate::math::sigmoid;
use crate::params::{clip_grad_norm, cosine_lr, AdamW, ParamGroup};
use crate::predictor::{self, InjectionMode, PredictorParams};
use crate::selector::{self, AnnealSchedule, GateCache, GateVector, SelectorParams};
use crate::synthbag::{stream_rng, Bag, Dataset, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub cosine_schedule: bool,
    pub lambda_budget: f64,
    pub lambda_ground: f64,
    /// Evidence budget `rho`.
    pub budget: f64,
    pub mode: InjectionMode,
    pub max_train_patches: usize,
    pub seed: u64,
    /// When false the host is trained alone, without gates.
    pub gating: bool,
    pub temperature: AnnealSchedule,
    pub host_hidden: usize,
    pub selector_hidden: usize,
    pub adapter_rank: usize,
    pub gamma: f64,
    pub delta: f64,
    pub bridge_input: BridgeInput,
    pub constrain_bridge: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            grad_clip: 5.0,
            cosine_schedule: true,
            lambda_budget: 0.1,
            lambda_ground: 0.5,
            budget: 0.05,
            mode: InjectionMode::AttentionBias,
            max_train_patches: 512,
            seed: 42,
            gating: true,
            temperature: AnnealSchedule::default(),
            host_hidden: predictor::DEFAULT_HIDDEN,
            selector_hidden: selector::DEFAULT_HIDDEN,
            adapter_rank: grounding::DEFAULT_RANK,
            gamma: grounding::DEFAULT_GAMMA,
            delta: grounding::DEFAULT_DELTA,
            bridge_input: BridgeInput::Raw,
            constrain_bridge: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda_budget >= 0.0, Config, "lambda_budget must be >= 0");
        ensure!(self.lambda_ground >= 0.0, Config, "lambda_ground must be >= 0");
        ensure!(self.budget >= 0.0, Config, "budget must be >= 0");
        ensure!(self.learning_rate > 0.0, Config, "learning_rate must be > 0");
        ensure!(self.max_train_patches >= 1, Config, "max_train_patches must be >= 1");
        ensure!(
            self.temperature.start > 0.0 && self.temperature.end > 0.0,
            Config,
            "temperatures must be positive"
        );
        ensure!(self.gamma > 0.0, Config, "gamma must be positive");
        ensure!(self.adapter_rank >= 1, Config, "adapter_rank must be >= 1");
        Ok(())
    }
}

/// Every parameter group of the wrapped predictor plus its fixed settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub host: PredictorParams,
    pub grounding: GroundingParams,
    pub selector: SelectorParams,
    pub class_weights: ClassAnchorWeights,
    pub mode: InjectionMode,
    /// Selector temperature used at inference.
    pub temperature: f64,
    pub gating: bool,
}

impl ParamGroup for Model {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut t = self.host.tensors();
        t.extend(self.grounding.tensors());
        t.extend(self.selector.tensors());
        t.extend(self.class_weights.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.host.tensors_mut();
        t.extend(self.grounding.tensors_mut());
        t.extend(self.selector.tensors_mut());
        t.extend(self.class_weights.tensors_mut());
        t
    }

    fn zeros_like(&self) -> Self {
        Self {
            host: self.host.zeros_like(),
            grounding: self.grounding.zeros_like(),
            selector: self.selector.zeros_like(),
            class_weights: self.class_weights.zeros_like(),
            ..self.clone()
        }
    }
}

/// Gates, responses and caches for one bag.
#[derive(Debug, Clone)]
pub struct EvidenceView {
    pub adapted: Adapted,
    pub gate_cache: GateCache,
    pub responses: Responses,
}

impl EvidenceView {
    pub fn gates(&self) -> &GateVector {
        &self.gate_cache.gates
    }

    pub fn pi(&self) -> &[f64] {
        &self.gate_cache.gates.pi
    }

    pub fn r(&self) -> &Array2<f64> {
        &self.responses.r
    }
}

impl Model {
    pub fn init(num_classes: usize, dim: usize, num_anchors: usize, anchor_dim: usize, cfg: &TrainConfig) -> Self {
        let mut rng = stream_rng(cfg.seed, 0x5EED);
        let host = PredictorParams::init(&mut rng, dim, cfg.host_hidden, num_classes);
        let mut grounding = GroundingParams::init(&mut rng, dim, cfg.adapter_rank, anchor_dim);
        grounding.gamma = cfg.gamma;
        grounding.delta = cfg.delta;
        grounding.bridge_input = cfg.bridge_input;
        let selector = SelectorParams::init(&mut rng, dim, cfg.selector_hidden);
        Self {
            host,
            grounding,
            selector,
            class_weights: ClassAnchorWeights::zeros(num_classes, num_anchors),
            mode: cfg.mode,
            temperature: cfg.temperature.end,
            gating: cfg.gating,
        }
    }

    pub fn for_dataset(ds: &Dataset, cfg: &TrainConfig) -> Self {
        Self::init(ds.num_classes, ds.feature_dim, ds.anchors.len(), ds.anchors.dim(), cfg)
    }

    /// Re-draws the selector head (and adapter) from `seed`, leaving the rest.
    pub fn reinit_selector(&mut self, seed: u64) {
        let mut rng = stream_rng(seed, 0x5E1E);
        let dim = self.host.dim();
        self.selector = SelectorParams::init(&mut rng, dim, self.selector.w1.nrows());
        let fresh = GroundingParams::init(&mut rng, dim, self.grounding.rank(), self.grounding.bridge_dim());
        self.grounding.u = fresh.u;
        self.grounding.v = fresh.v;
    }

    pub fn num_classes(&self) -> usize {
        self.host.classes()
    }

    pub fn evidence(&self, bag: &Bag, anchors: &crate::synthbag::AnchorBank, temperature: f64) -> Result<EvidenceView> {
        let h = bag.features.view();
        let adapted = grounding::adapt(&self.grounding, h);
        let gate_cache = selector::gates_cached(&self.selector, adapted.e.view(), bag.coords.view(), temperature)?;
        let bridge_in = match self.grounding.bridge_input {
            BridgeInput::Raw => h,
            BridgeInput::Adapted => adapted.e.view(),
        };
        let responses = grounding::anchor_responses(&self.grounding, bridge_in, anchors)?;
        Ok(EvidenceView {
            adapted,
            gate_cache,
            responses,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BudgetLoss {
    pub value: f64,
    pub d_pi: Vec<f64>,
}

/// `max(mean(pi) - rho, 0)^2` and its gradient.
pub fn budget_loss(pi: &[f64], rho: f64) -> BudgetLoss {
    let n = pi.len().max(1) as f64;
    let excess = (pi.iter().sum::<f64>() / n - rho).max(0.0);
    BudgetLoss {
        value: excess * excess,
        d_pi: vec![2.0 * excess / n; pi.len()],
    }
}

#[derive(Debug, Clone)]
pub struct GroundLoss {
    pub value: f64,
    pub d_pi: Vec<f64>,
    pub d_r: Array2<f64>,
    pub d_alpha: Vec<f64>,
}

const ALPHA_MASS_FLOOR: f64 = 1e-12;

/// Normalized uncovered anchor mass `sum_m alpha_m (1 - v_m) / sum_m alpha_m`.
pub fn grounding_loss(pi: &[f64], r: &Array2<f64>, alpha: &[f64]) -> GroundLoss {
    let (n, m) = r.dim();
    let mass: f64 = alpha.iter().sum();
    let denom = mass.max(ALPHA_MASS_FLOOR);
    let v = coverage::coverage(pi, r.view());
    let uncovered: Vec<f64> = v.iter().map(|x| 1.0 - x).collect();
    let value = alpha.iter().zip(&uncovered).map(|(a, u)| a * u).sum::<f64>() / denom;
    let d_pi: Vec<f64> = coverage::marginal(pi, r.view(), alpha)
        .into_iter()
        .map(|g| -g / denom)
        .collect();
    let d_alpha = if mass > ALPHA_MASS_FLOOR {
        uncovered.iter().map(|u| (u - value) / denom).collect()
    } else {
        uncovered.iter().map(|u| u / denom).collect()
    };
    // dv_m / dr_im = pi_i prod_{j != i} (1 - pi_j r_jm)
    let loo = coverage::leave_one_out(pi, r.view());
    let mut d_r = Array2::zeros((n, m));
    for ((i, k), slot) in d_r.indexed_iter_mut() {
        *slot = -alpha[k] * pi[i] * loo[[i, k]] / denom;
    }
    GroundLoss {
        value,
        d_pi,
        d_r,
        d_alpha,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub task: f64,
    pub budget: f64,
    pub ground: f64,
    pub mean_gate: f64,
}

/// The composite objective and its gradient for every parameter group.
pub fn composite_loss(
    model: &Model,
    bag: &Bag,
    anchors: &crate::synthbag::AnchorBank,
    cfg: &TrainConfig,
    temperature: f64,
) -> Result<(LossComponents, Model)> {
    let mut grad = model.zeros_like();
    if !model.gating {
        let task = predictor::loss_and_grad(&model.host, bag, None, model.mode, bag.label)?;
        grad.host = task.params;
        let comps = LossComponents {
            total: task.loss,
            task: task.loss,
            mean_gate: 1.0,
            ..Default::default()
        };
        return Ok((comps, grad));
    }

    let ev = model.evidence(bag, anchors, temperature)?;
    let pi = ev.pi();
    let task = predictor::loss_and_grad(&model.host, bag, Some(pi), model.mode, bag.label)?;
    grad.host = task.params;

    let budget = budget_loss(pi, cfg.budget);
    let alpha = model.class_weights.alpha(bag.label);
    let ground = grounding_loss(pi, ev.r(), &alpha);

    let d_pi: Vec<f64> = (0..pi.len())
        .map(|i| task.gates[i] + cfg.lambda_budget * budget.d_pi[i] + cfg.lambda_ground * ground.d_pi[i])
        .collect();
    let (dsel, mut de) = selector::gates_backward(&model.selector, &ev.gate_cache, &d_pi);
    grad.selector = dsel;

    let h = bag.features.view();
    let dr = &ground.d_r * cfg.lambda_ground;
    let bridge_in = match model.grounding.bridge_input {
        BridgeInput::Raw => h,
        BridgeInput::Adapted => ev.adapted.e.view(),
    };
    let (dbridge, dx) = grounding::responses_backward(&model.grounding, bridge_in, anchors, &ev.responses, &dr);
    grad.grounding.bridge = dbridge;
    if model.grounding.bridge_input == BridgeInput::Adapted {
        de += &dx;
    }
    let (du, dv) = grounding::adapt_backward(&model.grounding, h, &ev.adapted, &de);
    grad.grounding.u = du;
    grad.grounding.v = dv;

    let raw = model.class_weights.raw.row(bag.label);
    for (k, g) in ground.d_alpha.iter().enumerate() {
        grad.class_weights.raw[[bag.label, k]] = cfg.lambda_ground * g * sigmoid(raw[k]);
    }

    let total = task.loss + cfg.lambda_budget * budget.value + cfg.lambda_ground * ground.value;
    let comps = LossComponents {
        total,
        task: task.loss,
        budget: budget.value,
        ground: ground.value,
        mean_gate: pi.iter().sum::<f64>() / pi.len() as f64,
    };
    Ok((comps, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_task: f64,
    pub train_budget: f64,
    pub train_ground: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    pub val_mean_gate: f64,
    /// Median over validation bags of the fraction of gates with |pi - 0.5| > 0.4.
    pub val_bimodal_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    /// Per-step total loss, in training order.
    pub step_losses: Vec<f64>,
}

/// Validation-time statistics of the gated model on `bags`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mean_gate: f64,
    pub bimodal_fraction: f64,
}

pub fn gated_predictions(model: &Model, bags: &[&Bag], anchors: &crate::synthbag::AnchorBank) -> Result<Vec<(usize, Option<GateVector>)>> {
    crate::parallel::map(bags, |bag| {
        if !model.gating {
            let out = predictor::forward(&model.host, bag, None, model.mode)?;
            return Ok((out.predicted(), None));
        }
        let ev = model.evidence(bag, anchors, model.temperature)?;
        let out = predictor::forward(&model.host, bag, Some(ev.pi()), model.mode)?;
        Ok((out.predicted(), Some(ev.gates().clone())))
    })
    .into_iter()
    .collect()
}

pub fn gate_stats(model: &Model, bags: &[&Bag], anchors: &crate::synthbag::AnchorBank) -> Result<GateStats> {
    let preds = gated_predictions(model, bags, anchors)?;
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let predicted: Vec<usize> = preds.iter().map(|p| p.0).collect();
    let correct = labels.iter().zip(&predicted).filter(|(a, b)| a == b).count();
    let mut means = Vec::new();
    let mut bimodal = Vec::new();
    for (_, g) in &preds {
        if let Some(g) = g {
            means.push(g.mean());
            let far = g.pi.iter().filter(|p| (*p - 0.5).abs() > 0.4).count();
            bimodal.push(far as f64 / g.len() as f64);
        }
    }
    Ok(GateStats {
        accuracy: correct as f64 / labels.len().max(1) as f64,
        macro_f1: crate::diagnostics::macro_f1(&labels, &predicted, model.num_classes()),
        mean_gate: if means.is_empty() { 1.0 } else { means.iter().sum::<f64>() / means.len() as f64 },
        bimodal_fraction: crate::diagnostics::median(&bimodal).unwrap_or(0.0),
    })
}

impl TrainState {
    pub fn new(ds: &Dataset, cfg: &TrainConfig) -> Self {
        let model = Model::for_dataset(ds, cfg);
        Self::from_model(model)
    }

    pub fn from_model(model: Model) -> Self {
        let n = model.num_params();
        Self {
            optimizer: AdamW::new(n, 0.0),
            model,
            epoch: 0,
            log: Vec::new(),
            step_losses: Vec::new(),
        }
    }
}

/// Which parameter groups receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    All,
    /// Host, bridge and class weights frozen; selector and adapter train.
    SelectorOnly,
}

/// Trains a fresh model on the train split of `ds`.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    let state = TrainState::new(ds, cfg);
    train_from(ds, cfg, state, TrainScope::All)
}

/// Continues training `state` for `cfg.epochs` epochs.
pub fn train_from(ds: &Dataset, cfg: &TrainConfig, mut state: TrainState, scope: TrainScope) -> Result<TrainState> {
    cfg.validate()?;
    state.optimizer.weight_decay = cfg.weight_decay;
    state.model.mode = cfg.mode;
    state.model.gating = cfg.gating;
    let train_bags = ds.split(Split::Train);
    let val_bags = ds.split(Split::Val);
    ensure!(!train_bags.is_empty() || cfg.epochs == 0, Contract, "dataset has no training bags");
    let total_steps = cfg.epochs * train_bags.len();
    let mut step = 0;
    let frozen = state.model.clone();

    for epoch in 0..cfg.epochs {
        let temperature = cfg.temperature.temperature(epoch, cfg.epochs)?;
        let mut order: Vec<usize> = (0..train_bags.len()).collect();
        let mut rng = stream_rng(cfg.seed, 0xE90C_0000 + epoch as u64);
        order.shuffle(&mut rng);
        let mut sums = LossComponents::default();
        let mut lr = cfg.learning_rate;

        for &bi in &order {
            let bag = train_bags[bi];
            let sampled;
            let bag = if bag.len() > cfg.max_train_patches {
                let mut rows = index::sample(&mut rng, bag.len(), cfg.max_train_patches).into_vec();
                rows.sort_unstable();
                sampled = bag.restrict(&rows);
                &sampled
            } else {
                bag
            };
            let (comps, mut grad) = composite_loss(&state.model, bag, &ds.anchors, cfg, temperature)?;
            if !comps.total.is_finite() || !grad.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    bag_id: bag.id.clone(),
                });
            }
            clip_grad_norm(&mut grad, cfg.grad_clip);
            lr = if cfg.cosine_schedule {
                cosine_lr(cfg.learning_rate, step, total_steps)
            } else {
                cfg.learning_rate
            };
            state.optimizer.update(&mut state.model, &grad, lr);
            if scope == TrainScope::SelectorOnly {
                state.model.host = frozen.host.clone();
                state.model.grounding.bridge = frozen.grounding.bridge.clone();
                state.model.class_weights = frozen.class_weights.clone();
            }
            if cfg.constrain_bridge {
                state.model.grounding.constrain_bridge();
            }
            if !state.model.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    bag_id: bag.id.clone(),
                });
            }
            sums.total += comps.total;
            sums.task += comps.task;
            sums.budget += comps.budget;
            sums.ground += comps.ground;
            state.step_losses.push(comps.total);
            step += 1;
        }

        state.model.temperature = temperature;
        let count = train_bags.len().max(1) as f64;
        let stats = if val_bags.is_empty() {
            GateStats {
                accuracy: f64::NAN,
                macro_f1: f64::NAN,
                mean_gate: f64::NAN,
                bimodal_fraction: f64::NAN,
            }
        } else {
            gate_stats(&state.model, &val_bags, &ds.anchors)?
        };
        state.log.push(EpochLog {
            epoch,
            temperature,
            learning_rate: lr,
            train_loss: sums.total / count,
            train_task: sums.task / count,
            train_budget: sums.budget / count,
            train_ground: sums.ground / count,
            val_accuracy: stats.accuracy,
            val_macro_f1: stats.macro_f1,
            val_mean_gate: stats.mean_gate,
            val_bimodal_fraction: stats.bimodal_fraction,
        });
        state.epoch += 1;
    }
    if cfg.epochs > 0 {
        state.model.temperature = cfg.temperature.temperature(cfg.epochs - 1, cfg.epochs)?;
    }
    Ok(state)
}
