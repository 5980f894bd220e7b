use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::Domain;
use crate::error::{KwsError, Result};
use crate::model::{ModelConfig, TapSet};
use crate::Real;

/// Synthetic/real classifier: per-frame linear projection, max over time.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvHeadParams<T> {
    pub weight: Array1<T>,
    pub bias: T,
}

impl<T: Real> AdvHeadParams<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: Array1::zeros(dim),
            bias: T::zero(),
        }
    }

    pub fn init(config: &ModelConfig, taps: &TapSet, seed: u64) -> Result<Self> {
        let dim = taps.feature_dim(config)?;
        let limit = (6.0 / (dim + 1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            weight: Array1::from_shape_fn(dim, |_| T::of(rng.gen_range(-limit..limit))),
            bias: T::zero(),
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim())
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weight.iter().all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &Self, factor: T) {
        self.weight.zip_mut_with(&other.weight, |d, &s| *d += factor * s);
        self.bias += factor * other.bias;
    }

    pub fn to_named_f32(&self) -> Vec<(String, ArrayD<f32>)> {
        vec![
            ("adv.weight".into(), self.weight.mapv(|v| v.as_f64() as f32).into_dyn()),
            ("adv.bias".into(), Array1::from_elem(1, self.bias.as_f64() as f32).into_dyn()),
        ]
    }

    pub fn from_tensors(tensors: &BTreeMap<String, ArrayD<f32>>) -> Result<Option<Self>> {
        let (Some(w), Some(b)) = (tensors.get("adv.weight"), tensors.get("adv.bias")) else {
            return Ok(None);
        };
        if w.ndim() != 1 || b.len() != 1 {
            return Err(KwsError::Checkpoint("adv.weight/adv.bias have unexpected shapes".into()));
        }
        Ok(Some(Self {
            weight: w.iter().map(|&v| T::of(v as f64)).collect(),
            bias: T::of(b.iter().next().copied().unwrap_or_default() as f64),
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvOutput<T> {
    pub logit: T,
    /// Frame achieving the max (earliest on ties).
    pub frame: usize,
}

/// `max_t (w . H_t + b)`.
pub fn adv_forward<T: Real>(features: &Array2<T>, head: &AdvHeadParams<T>) -> Result<AdvOutput<T>> {
    if features.nrows() == 0 {
        return Err(KwsError::Data("adversarial head needs at least one frame".into()));
    }
    if features.ncols() != head.dim() {
        return Err(KwsError::Shape(format!(
            "adversarial features have {} dims, head expects {}",
            features.ncols(),
            head.dim()
        )));
    }
    let projected = features.dot(&head.weight);
    let mut frame = 0;
    for (t, &v) in projected.iter().enumerate() {
        if v > projected[frame] {
            frame = t;
        }
    }
    Ok(AdvOutput {
        logit: projected[frame] + head.bias,
        frame,
    })
}

/// Sigmoid cross-entropy of the head logit against the domain, and `dloss/dlogit`.
pub fn head_loss<T: Real>(logit: T, domain: Domain) -> (T, T) {
    let y = T::of(domain.target());
    let loss = logit.max(T::zero()) - y * logit + (-logit.abs()).exp().ln_1p();
    let sigmoid = T::one() / (T::one() + (-logit).exp());
    (loss, sigmoid - y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvBackward<T> {
    pub loss: T,
    pub output: AdvOutput<T>,
    /// True gradients of the head loss w.r.t. the head parameters.
    pub head_grads: AdvHeadParams<T>,
    /// Gradient w.r.t. the features after reversal: `-lambda * dloss/dH`.
    pub feature_grads: Array2<T>,
}

impl<T: Real> AdvBackward<T> {
    pub fn correct(&self, domain: Domain) -> bool {
        (self.output.logit > T::zero()) == (domain == Domain::Synthetic)
    }
}

/// Head loss, head gradients and reversed feature gradients for one sequence.
pub fn adversarial_backward<T: Real>(
    features: &Array2<T>,
    head: &AdvHeadParams<T>,
    domain: Domain,
    lambda: f64,
) -> Result<AdvBackward<T>> {
    let output = adv_forward(features, head)?;
    let (loss, d_logit) = head_loss(output.logit, domain);
    let mut head_grads = head.zeros_like();
    head_grads.weight.assign(&features.row(output.frame));
    head_grads.weight.mapv_inplace(|v| v * d_logit);
    head_grads.bias = d_logit;

    let mut feature_grads = Array2::zeros(features.dim());
    let lambda = T::of(lambda);
    feature_grads
        .row_mut(output.frame)
        .zip_mut_with(&head.weight, |g, &w| *g = lambda * -(d_logit * w));
    Ok(AdvBackward {
        loss,
        output,
        head_grads,
        feature_grads,
    })
}
