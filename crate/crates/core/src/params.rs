//! Flat views over parameter groups and the AdamW optimizer.

/// A collection of trainable tensors exposed as flat slices in a fixed order.
pub trait ParamGroup: Sized {
    fn tensors(&self) -> Vec<(&'static str, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    /// Same structure, every trainable entry zero.
    fn zeros_like(&self) -> Self;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.flatten();
        let mut k = 0;
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x += scale * src[k];
                k += 1;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Rescales `grad` so that its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<P: ParamGroup>(grad: &mut P, max_norm: f64) -> f64 {
    let norm = grad.l2_norm();
    if max_norm > 0.0 && norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}

/// Adam with decoupled weight decay.
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)
/// ```
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn update<P: ParamGroup>(&mut self, params: &mut P, grad: &P, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let g = grad.flatten();
        assert_eq!(g.len(), self.m.len(), "optimizer/parameter size mismatch");
        let mut k = 0;
        for tensor in params.tensors_mut() {
            for w in tensor.iter_mut() {
                let gk = g[k];
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gk;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = self.m[k] / bc1;
                let vhat = self.v[k] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
                k += 1;
            }
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let progress = step as f64 / (total - 1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}
