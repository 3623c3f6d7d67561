//! Low-rank residual adapter and the anchor bridge.
//!
//! The adapter maps `h_i` to `e_i = normalize((I + U V^T) h_i)`; `e_i` feeds
//! the selector. The bridge `B` maps patch features into anchor space, and the
//! patch-anchor response is
//!
//! ```text
//! r_im = sigmoid(gamma * (cos(B x_i, a_m) - delta))
//! ```
//!
//! where `x_i` is the raw feature `h_i` by default, or the adapted `e_i` when
//! [`BridgeInput::Adapted`] is selected.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::math::{sigmoid, standard_layout};
use crate::params::ParamGroup;
use crate::synthbag::{AnchorBank, Rng64};

pub const DEFAULT_GAMMA: f64 = 8.0;
pub const DEFAULT_DELTA: f64 = 0.15;
pub const DEFAULT_RANK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeInput {
    Raw,
    Adapted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingParams {
    /// `d x r`
    pub u: Array2<f64>,
    /// `d x r`
    pub v: Array2<f64>,
    /// `bridge_dim x d`
    pub bridge: Array2<f64>,
    pub gamma: f64,
    pub delta: f64,
    pub bridge_input: BridgeInput,
}

impl GroundingParams {
    /// `U = 0` and a small random `V`, so the adapter starts as pure
    /// normalization. The bridge starts as the identity when square.
    pub fn init(rng: &mut Rng64, dim: usize, rank: usize, bridge_dim: usize) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let v = Array2::from_shape_simple_fn((dim, rank), || s * rng.sample::<f64, _>(StandardNormal));
        let bridge = if bridge_dim == dim {
            Array2::eye(dim)
        } else {
            let mut b = Array2::from_shape_simple_fn((bridge_dim, dim), || {
                rng.sample::<f64, _>(StandardNormal)
            });
            normalize_rows(&mut b);
            b
        };
        Self {
            u: Array2::zeros((dim, rank)),
            v,
            bridge,
            gamma: DEFAULT_GAMMA,
            delta: DEFAULT_DELTA,
            bridge_input: BridgeInput::Raw,
        }
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn bridge_dim(&self) -> usize {
        self.bridge.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.rank() >= 1, Contract, "adapter rank must be >= 1");
        ensure!(self.gamma > 0.0, Contract, "gamma must be positive");
        ensure!(self.v.dim() == self.u.dim(), Contract, "U and V shapes differ");
        ensure!(self.bridge.ncols() == self.dim(), Contract, "bridge input dim mismatch");
        Ok(())
    }

    /// Rescales every bridge row to unit norm (rows of norm zero are left).
    pub fn constrain_bridge(&mut self) {
        normalize_rows(&mut self.bridge);
    }
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}

impl ParamGroup for GroundingParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("grounding.u", self.u.as_slice().unwrap()),
            ("grounding.v", self.v.as_slice().unwrap()),
            ("grounding.bridge", self.bridge.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.u.as_slice_mut().unwrap(),
            self.v.as_slice_mut().unwrap(),
            self.bridge.as_slice_mut().unwrap(),
        ]
    }

    fn zeros_like(&self) -> Self {
        Self {
            u: Array2::zeros(self.u.dim()),
            v: Array2::zeros(self.v.dim()),
            bridge: Array2::zeros(self.bridge.dim()),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adapted {
    /// `N x d`, unit rows except for degenerate patches (zero rows).
    pub e: Array2<f64>,
    /// Patches whose adapted vector had zero norm.
    pub degenerate: Vec<usize>,
    proj: Array2<f64>,
    norms: Array1<f64>,
}

pub fn adapt(params: &GroundingParams, h: ArrayView2<'_, f64>) -> Adapted {
    let proj = h.dot(&params.v);
    let y = &h + &proj.dot(&params.u.t());
    let mut e = y;
    let mut norms = Array1::zeros(e.nrows());
    let mut degenerate = Vec::new();
    for (i, mut row) in e.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        norms[i] = n;
        if n > 0.0 && n.is_finite() {
            row /= n;
        } else {
            row.fill(0.0);
            degenerate.push(i);
        }
    }
    Adapted {
        e,
        degenerate,
        proj,
        norms,
    }
}

/// Gradients of the adapter given `d e`. Returns `(dU, dV)`.
pub fn adapt_backward(
    params: &GroundingParams,
    h: ArrayView2<'_, f64>,
    cache: &Adapted,
    de: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut dy = de.clone();
    for (i, mut row) in dy.rows_mut().into_iter().enumerate() {
        let n = cache.norms[i];
        if n > 0.0 && n.is_finite() {
            let e = cache.e.row(i);
            let proj = e.dot(&row);
            row.scaled_add(-proj, &e);
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    let du = standard_layout(dy.t().dot(&cache.proj));
    let dproj = dy.dot(&params.u);
    let dv = standard_layout(h.t().dot(&dproj));
    (du, dv)
}

#[derive(Debug, Clone)]
pub struct Responses {
    /// `N x M`, entries in (0, 1).
    pub r: Array2<f64>,
    cos: Array2<f64>,
    bridged: Array2<f64>,
    bnorm: Array1<f64>,
}

/// `r_im = sigmoid(gamma (cos(B x_i, a_m) - delta))`; cosine with a zero
/// vector is taken as 0.
pub fn anchor_responses(
    params: &GroundingParams,
    x: ArrayView2<'_, f64>,
    bank: &AnchorBank,
) -> Result<Responses> {
    ensure!(
        bank.dim() == params.bridge_dim(),
        Contract,
        "anchor dim {} != bridge dim {}",
        bank.dim(),
        params.bridge_dim()
    );
    ensure!(x.ncols() == params.dim(), Contract, "bridge input dim mismatch");
    let bridged = x.dot(&params.bridge.t());
    let bnorm = bridged.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut cos = bridged.dot(&bank.vectors.t());
    for (mut row, &n) in cos.rows_mut().into_iter().zip(bnorm.iter()) {
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    let r = cos.mapv(|c| sigmoid(params.gamma * (c - params.delta)));
    Ok(Responses {
        r,
        cos,
        bridged,
        bnorm,
    })
}

/// Back-propagates `d r` to the bridge. Returns `(dB, dX)`.
pub fn responses_backward(
    params: &GroundingParams,
    x: ArrayView2<'_, f64>,
    bank: &AnchorBank,
    cache: &Responses,
    dr: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let gamma = params.gamma;
    let dcos = ndarray::Zip::from(dr)
        .and(&cache.r)
        .map_collect(|&g, &r| g * gamma * r * (1.0 - r));
    // d bridged_i = (dcos_i A - (dcos_i . cos_i) bhat_i) / |b_i|
    let mut db = dcos.dot(&bank.vectors);
    for i in 0..db.nrows() {
        let n = cache.bnorm[i];
        let mut row = db.row_mut(i);
        if n > 0.0 {
            let s = dcos.row(i).dot(&cache.cos.row(i));
            row.scaled_add(-s / n, &cache.bridged.row(i));
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    let dbridge = standard_layout(db.t().dot(&x));
    let dx = db.dot(&params.bridge);
    (dbridge, dx)
}
