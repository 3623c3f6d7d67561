//! Attention-pooling MIL host with analytic gradients.
//!
//! For patch features `h_i` the host scores `z_i = w2 . tanh(W1 h_i)`, pools
//! `bag = sum_i softmax(z)_i h_i` and classifies `logits = Wc bag + b`.
//!
//! Gates enter through one of three [`InjectionMode`]s:
//!
//! * `AttentionBias`: `z_i <- z_i + ln(max(pi_i, GATE_FLOOR))`
//! * `FeatureReweight`: `h_i <- pi_i * h_i` before scoring and pooling
//! * `Hybrid`: both, with the same gate vector
//!
//! With all gates equal to one every mode reproduces the ungated forward
//! bit for bit.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::math::{argmax, softmax_in_place, standard_layout};
use crate::params::ParamGroup;
use crate::synthbag::{Bag, Rng64};

/// Floor applied to gates before the logarithm in bias modes.
pub const GATE_FLOOR: f64 = 1e-6;

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    AttentionBias,
    FeatureReweight,
    Hybrid,
}

impl InjectionMode {
    pub const ALL: [InjectionMode; 3] = [
        InjectionMode::AttentionBias,
        InjectionMode::FeatureReweight,
        InjectionMode::Hybrid,
    ];

    fn biases(self) -> bool {
        matches!(self, InjectionMode::AttentionBias | InjectionMode::Hybrid)
    }

    fn reweights(self) -> bool {
        matches!(self, InjectionMode::FeatureReweight | InjectionMode::Hybrid)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InjectionMode::AttentionBias => "attention_bias",
            InjectionMode::FeatureReweight => "feature_reweight",
            InjectionMode::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for InjectionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attention_bias" => Ok(InjectionMode::AttentionBias),
            "feature_reweight" => Ok(InjectionMode::FeatureReweight),
            "hybrid" => Ok(InjectionMode::Hybrid),
            other => Err(format!("unknown injection mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    /// `h_dim x d` scorer projection.
    pub w1: Array2<f64>,
    /// `h_dim` scorer readout.
    pub w2: Array1<f64>,
    /// `C x d` classifier.
    pub wc: Array2<f64>,
    pub b: Array1<f64>,
}

impl PredictorParams {
    /// Gaussian `W1` with scale `1 / sqrt(d)`; `w2`, `Wc` and `b` start at zero,
    /// so initial attention is uniform and initial predictions are flat.
    pub fn init(rng: &mut Rng64, dim: usize, hidden: usize, classes: usize) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let w1 = Array2::from_shape_simple_fn((hidden, dim), || s * rng.sample::<f64, _>(StandardNormal));
        Self {
            w1,
            w2: Array1::zeros(hidden),
            wc: Array2::zeros((classes, dim)),
            b: Array1::zeros(classes),
        }
    }

    pub fn zeros(dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, dim)),
            w2: Array1::zeros(hidden),
            wc: Array2::zeros((classes, dim)),
            b: Array1::zeros(classes),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn classes(&self) -> usize {
        self.wc.nrows()
    }

    fn check_shapes(&self) -> Result<()> {
        ensure!(
            self.w2.len() == self.hidden()
                && self.wc.ncols() == self.dim()
                && self.b.len() == self.classes(),
            Contract,
            "predictor parameter shapes are inconsistent"
        );
        Ok(())
    }
}

impl ParamGroup for PredictorParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("host.w1", self.w1.as_slice().unwrap()),
            ("host.w2", self.w2.as_slice().unwrap()),
            ("host.wc", self.wc.as_slice().unwrap()),
            ("host.b", self.b.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.wc.as_slice_mut().unwrap(),
            self.b.as_slice_mut().unwrap(),
        ]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.hidden(), self.classes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub attention: Vec<f64>,
    pub bag_repr: Vec<f64>,
}

impl Forward {
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    gates: Option<Vec<f64>>,
    mode: InjectionMode,
    /// Features after reweighting (equal to the inputs otherwise).
    x: Array2<f64>,
    input: Array2<f64>,
    act: Array2<f64>,
    pub out: Forward,
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub params: PredictorParams,
    /// Gradient w.r.t. each gate; zero where the mode ignores gates.
    pub gates: Vec<f64>,
    /// Gradient w.r.t. the raw patch features.
    pub features: Array2<f64>,
}

fn check_gates(gates: Option<&[f64]>, n: usize) -> Result<()> {
    if let Some(g) = gates {
        ensure!(g.len() == n, Contract, "gate vector has length {} for N = {n}", g.len());
        ensure!(
            g.iter().all(|p| (0.0..=1.0).contains(p)),
            Contract,
            "gates must lie in [0, 1]"
        );
    }
    Ok(())
}

/// Forward pass over an explicit feature matrix, keeping the cache.
pub fn forward_cached(
    params: &PredictorParams,
    features: ArrayView2<'_, f64>,
    gates: Option<&[f64]>,
    mode: InjectionMode,
) -> Result<ForwardCache> {
    params.check_shapes()?;
    let n = features.nrows();
    ensure!(n >= 1, Contract, "bag has no patches");
    ensure!(
        features.ncols() == params.dim(),
        Contract,
        "feature dim {} != host dim {}",
        features.ncols(),
        params.dim()
    );
    check_gates(gates, n)?;

    let mut x = features.to_owned();
    if let (Some(g), true) = (gates, mode.reweights()) {
        for (mut row, &p) in x.rows_mut().into_iter().zip(g) {
            row *= p;
        }
    }
    let act = x.dot(&params.w1.t()).mapv_into(f64::tanh);
    let mut attention = act.dot(&params.w2).to_vec();
    if let (Some(g), true) = (gates, mode.biases()) {
        for (z, &p) in attention.iter_mut().zip(g) {
            *z += p.max(GATE_FLOOR).ln();
        }
    }
    softmax_in_place(&mut attention);
    let alpha = Array1::from(attention.clone());
    let bag_repr = alpha.dot(&x);
    let logits = params.wc.dot(&bag_repr) + &params.b;
    let logits = logits.to_vec();
    let mut probs = logits.clone();
    softmax_in_place(&mut probs);
    Ok(ForwardCache {
        gates: gates.map(<[f64]>::to_vec),
        mode,
        x,
        input: features.to_owned(),
        act,
        out: Forward {
            logits,
            probs,
            attention,
            bag_repr: bag_repr.to_vec(),
        },
    })
}

pub fn forward(
    params: &PredictorParams,
    bag: &Bag,
    gates: Option<&[f64]>,
    mode: InjectionMode,
) -> Result<Forward> {
    forward_cached(params, bag.features.view(), gates, mode).map(|c| c.out)
}

/// Back-propagates an upstream gradient on the logits.
pub fn backward(params: &PredictorParams, cache: &ForwardCache, dlogits: &[f64]) -> Backward {
    let n = cache.x.nrows();
    let delta = Array1::from(dlogits.to_vec());
    let bag = Array1::from(cache.out.bag_repr.clone());
    let alpha = Array1::from(cache.out.attention.clone());

    let mut grad = params.zeros_like();
    grad.wc = standard_layout(
        delta
            .view()
            .insert_axis(Axis(1))
            .dot(&bag.view().insert_axis(Axis(0))),
    );
    grad.b = delta.clone();
    let dbag = params.wc.t().dot(&delta);

    let dalpha = cache.x.dot(&dbag);
    let mean = alpha.dot(&dalpha);
    let dz = &alpha * &(dalpha - mean);

    grad.w2 = cache.act.t().dot(&dz);
    // dpre = dz_i * w2 * (1 - act^2)
    let mut dpre = cache.act.mapv(|a| 1.0 - a * a);
    for (mut row, &g) in dpre.rows_mut().into_iter().zip(dz.iter()) {
        row *= g;
        row *= &params.w2;
    }
    grad.w1 = standard_layout(dpre.t().dot(&cache.x));
    let mut dx = dpre.dot(&params.w1);
    for (mut row, &a) in dx.rows_mut().into_iter().zip(alpha.iter()) {
        row.scaled_add(a, &dbag);
    }

    let mut dgates = vec![0.0; n];
    let mut dfeatures = dx.clone();
    if let Some(g) = &cache.gates {
        if cache.mode.reweights() {
            for i in 0..n {
                dgates[i] += dx.row(i).dot(&cache.input.row(i));
                dfeatures.row_mut(i).mapv_inplace(|v| v * g[i]);
            }
        }
        if cache.mode.biases() {
            for i in 0..n {
                if g[i] >= GATE_FLOOR {
                    dgates[i] += dz[i] / g[i];
                }
            }
        }
    }
    Backward {
        params: grad,
        gates: dgates,
        features: dfeatures,
    }
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub params: PredictorParams,
    pub gates: Vec<f64>,
}

/// Cross-entropy of `label` and its exact gradients.
pub fn loss_and_grad(
    params: &PredictorParams,
    bag: &Bag,
    gates: Option<&[f64]>,
    mode: InjectionMode,
    label: usize,
) -> Result<LossGrad> {
    ensure!(label < params.classes(), Contract, "label {label} >= C = {}", params.classes());
    let cache = forward_cached(params, bag.features.view(), gates, mode)?;
    let logits = &cache.out.logits;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = (lse - logits[label]).max(0.0);
    let mut dlogits = cache.out.probs.clone();
    dlogits[label] -= 1.0;
    let bw = backward(params, &cache, &dlogits);
    Ok(LossGrad {
        loss,
        params: bw.params,
        gates: bw.gates,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetPrediction {
    pub probs: Vec<f64>,
    pub class: usize,
}

/// Ungated prediction on the bag restricted to `subset`.
pub fn predict_subset(params: &PredictorParams, bag: &Bag, subset: &[usize]) -> Result<SubsetPrediction> {
    ensure!(!subset.is_empty(), Contract, "empty subset for bag `{}`", bag.id);
    let n = bag.len();
    ensure!(
        subset.iter().all(|&i| i < n),
        Contract,
        "subset index out of range for bag `{}` (N = {n})",
        bag.id
    );
    let mut seen = vec![false; n];
    for &i in subset {
        ensure!(!seen[i], Contract, "duplicate index {i} in subset");
        seen[i] = true;
    }
    let rows = bag.features.select(Axis(0), subset);
    let out = forward_cached(params, rows.view(), None, InjectionMode::AttentionBias)?.out;
    Ok(SubsetPrediction {
        class: out.predicted(),
        probs: out.probs,
    })
}
