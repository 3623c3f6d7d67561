//! Continuous inclusion gates and the temperature schedule.
//!
//! A two-layer tanh scorer maps `[e_i, c_i]` (adapted feature and per-bag
//! min-max normalized coordinates) to a score `s_i`; the gate is
//! `pi_i = sigmoid((s_i - nu) / T)`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::math::{sigmoid, standard_layout};
use crate::params::ParamGroup;
use crate::synthbag::Rng64;

pub const DEFAULT_HIDDEN: usize = 32;

/// Linear per-epoch annealing from `start` to `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.4 }
    }
}

impl AnnealSchedule {
    /// A schedule that never changes the temperature.
    pub fn constant(t: f64) -> Self {
        Self { start: t, end: t }
    }

    /// Temperature for `epoch` out of `total` epochs; `start` at epoch 0 and
    /// `end` at the last epoch.
    pub fn temperature(&self, epoch: usize, total: usize) -> Result<f64> {
        ensure!(epoch < total, Contract, "epoch {epoch} outside 0..{total}");
        if total == 1 {
            return Ok(self.start);
        }
        let frac = epoch as f64 / (total - 1) as f64;
        Ok(self.start + (self.end - self.start) * frac)
    }
}

/// Temperature under the default 1.0 -> 0.4 schedule.
pub fn anneal(epoch: usize, total_epochs: usize) -> Result<f64> {
    AnnealSchedule::default().temperature(epoch, total_epochs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    /// `hidden x (d + 2)`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    /// Output bias, stored as a length-1 array.
    pub b2: Array1<f64>,
    /// Centering constant subtracted from scores.
    pub nu: f64,
}

impl SelectorParams {
    /// `w2` starts at zero, so all initial gates are equal.
    pub fn init(rng: &mut Rng64, dim: usize, hidden: usize) -> Self {
        let fan1 = dim + 2;
        let s1 = 1.0 / (fan1 as f64).sqrt();
        Self {
            w1: Array2::from_shape_simple_fn((hidden, fan1), || s1 * rng.sample::<f64, _>(StandardNormal)),
            b1: Array1::zeros(hidden),
            w2: Array1::zeros(hidden),
            b2: Array1::zeros(1),
            nu: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols() - 2
    }
}

impl ParamGroup for SelectorParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("selector.w1", self.w1.as_slice().unwrap()),
            ("selector.b1", self.b1.as_slice().unwrap()),
            ("selector.w2", self.w2.as_slice().unwrap()),
            ("selector.b2", self.b2.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array1::zeros(self.w2.len()),
            b2: Array1::zeros(1),
            nu: self.nu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub pi: Vec<f64>,
    pub temperature: f64,
}

impl GateVector {
    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.pi.iter().sum::<f64>() / self.pi.len().max(1) as f64
    }
}

/// Per-bag min-max normalization of coordinates into [0, 1]; constant
/// columns map to 0.
pub fn normalize_coords(coords: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = coords.to_owned();
    for mut col in out.columns_mut() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        col.mapv_inplace(|x| if span > 0.0 { (x - lo) / span } else { 0.0 });
    }
    out
}

#[derive(Debug, Clone)]
pub struct GateCache {
    pub gates: GateVector,
    pub scores: Vec<f64>,
    input: Array2<f64>,
    act: Array2<f64>,
}

pub fn gates_cached(
    params: &SelectorParams,
    e: ArrayView2<'_, f64>,
    coords: ArrayView2<'_, f64>,
    temperature: f64,
) -> Result<GateCache> {
    ensure!(temperature > 0.0, Contract, "temperature must be positive, got {temperature}");
    ensure!(
        e.ncols() == params.input_dim(),
        Contract,
        "selector expects dim {}, got {}",
        params.input_dim(),
        e.ncols()
    );
    ensure!(coords.dim() == (e.nrows(), 2), Contract, "coords must be N x 2");
    let input = concatenate(Axis(1), &[e, normalize_coords(coords).view()])
        .expect("shapes checked above");
    let act = (input.dot(&params.w1.t()) + &params.b1).mapv_into(f64::tanh);
    let scores = (act.dot(&params.w2) + params.b2[0]).to_vec();
    let pi = scores
        .iter()
        .map(|s| sigmoid((s - params.nu) / temperature))
        .collect();
    Ok(GateCache {
        gates: GateVector { pi, temperature },
        scores,
        input,
        act,
    })
}

pub fn gates(
    params: &SelectorParams,
    e: ArrayView2<'_, f64>,
    coords: ArrayView2<'_, f64>,
    temperature: f64,
) -> Result<GateVector> {
    gates_cached(params, e, coords, temperature).map(|c| c.gates)
}

/// Back-propagates `d pi`. Returns parameter gradients and `d e`.
pub fn gates_backward(params: &SelectorParams, cache: &GateCache, dpi: &[f64]) -> (SelectorParams, Array2<f64>) {
    let t = cache.gates.temperature;
    let ds: Array1<f64> = cache
        .gates
        .pi
        .iter()
        .zip(dpi)
        .map(|(&p, &g)| g * p * (1.0 - p) / t)
        .collect();
    let mut grad = params.zeros_like();
    grad.w2 = cache.act.t().dot(&ds);
    grad.b2[0] = ds.sum();
    let mut dpre = cache.act.mapv(|a| 1.0 - a * a);
    for (mut row, &g) in dpre.rows_mut().into_iter().zip(ds.iter()) {
        row *= g;
        row *= &params.w2;
    }
    grad.w1 = standard_layout(dpre.t().dot(&cache.input));
    grad.b1 = dpre.sum_axis(Axis(0));
    let dinput = dpre.dot(&params.w1);
    let d = params.input_dim();
    (grad, dinput.slice(s![.., ..d]).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbag::stream_rng;

    #[test]
    fn schedule_matches_endpoints_and_midpoint() {
        assert_eq!(anneal(0, 15).unwrap(), 1.0);
        assert!((anneal(14, 15).unwrap() - 0.4).abs() < 1e-15);
        assert!((anneal(7, 15).unwrap() - 0.7).abs() < 1e-15);
        assert!(anneal(15, 15).is_err());
        assert_eq!(AnnealSchedule::constant(1.0).temperature(9, 15).unwrap(), 1.0);
    }

    #[test]
    fn gate_closed_forms() {
        let mut rng = stream_rng(0, 0);
        let mut p = SelectorParams::init(&mut rng, 3, 4);
        p.w2.fill(0.0);
        let e = Array2::zeros((2, 3));
        let c = Array2::zeros((2, 2));
        let g = gates(&p, e.view(), c.view(), 0.37).unwrap();
        assert_eq!(g.pi, vec![0.5, 0.5]);
        p.b2[0] = 0.4;
        let g = gates(&p, e.view(), c.view(), 0.4).unwrap();
        assert!((g.pi[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn lower_temperature_pushes_gates_away_from_half() {
        let mut rng = stream_rng(4, 0);
        let p = SelectorParams::init(&mut rng, 5, 6);
        let e = Array2::from_shape_simple_fn((20, 5), || rng.sample::<f64, _>(StandardNormal));
        let c = Array2::from_shape_simple_fn((20, 2), || rng.random::<f64>());
        let mut prev: Option<Vec<f64>> = None;
        for k in 0..=12 {
            let t = 1.0 - 0.05 * k as f64;
            let g = gates(&p, e.view(), c.view(), t).unwrap();
            if let Some(prev) = &prev {
                for (a, b) in prev.iter().zip(&g.pi) {
                    assert!((b - 0.5).abs() >= (a - 0.5).abs());
                }
            }
            prev = Some(g.pi);
        }
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        let mut rng = stream_rng(0, 0);
        let p = SelectorParams::init(&mut rng, 2, 2);
        let e = Array2::zeros((1, 2));
        let c = Array2::zeros((1, 2));
        assert!(gates(&p, e.view(), c.view(), 0.0).is_err());
    }

    #[test]
    fn coordinates_are_min_max_scaled() {
        let c = ndarray::arr2(&[[2.0, 5.0], [4.0, 5.0], [3.0, 5.0]]);
        let n = normalize_coords(c.view());
        assert_eq!(n.column(0).to_vec(), vec![0.0, 1.0, 0.5]);
        assert_eq!(n.column(1).to_vec(), vec![0.0, 0.0, 0.0]);
    }
}
