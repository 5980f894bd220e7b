use serde::{Deserialize, Serialize};

use super::adversarial::AdvHeadParams;
use crate::error::{KwsError, Result};
use crate::model::ModelParams;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(KwsError::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Parameter containers the optimizer can walk as flat slices.
pub trait ParamTensors<T>: Clone {
    fn slices(&self) -> Vec<&[T]>;
    fn slices_mut(&mut self) -> Vec<&mut [T]>;
    fn zeroed(&self) -> Self;
}

impl<T: Real> ParamTensors<T> for ModelParams<T> {
    fn slices(&self) -> Vec<&[T]> {
        self.tensors()
            .into_iter()
            .map(|(_, t)| t.to_slice().expect("parameters are contiguous"))
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.tensors_mut()
            .into_iter()
            .map(|(_, t)| t.into_slice().expect("parameters are contiguous"))
            .collect()
    }

    fn zeroed(&self) -> Self {
        self.zeros_like()
    }
}

impl<T: Real> ParamTensors<T> for AdvHeadParams<T> {
    fn slices(&self) -> Vec<&[T]> {
        vec![
            self.weight.as_slice().expect("contiguous"),
            std::slice::from_ref(&self.bias),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.weight.as_slice_mut().expect("contiguous"),
            std::slice::from_mut(&mut self.bias),
        ]
    }

    fn zeroed(&self) -> Self {
        self.zeros_like()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<P> {
    first: P,
    second: P,
    steps: u64,
}

impl<P> Adam<P> {
    pub fn steps(&self) -> u64 {
        self.steps
    }
}

impl<P> Adam<P> {
    pub fn new<T: Real>(params: &P) -> Self
    where
        P: ParamTensors<T>,
    {
        Self {
            first: params.zeroed(),
            second: params.zeroed(),
            steps: 0,
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut P, grads: &P, cfg: &AdamConfig)
    where
        P: ParamTensors<T>,
    {
        self.steps += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let lr = T::of(cfg.learning_rate);
        let eps = T::of(cfg.epsilon);
        let c1 = T::one() - T::of(cfg.beta1.powi(self.steps as i32));
        let c2 = T::one() - T::of(cfg.beta2.powi(self.steps as i32));
        let tensors = params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.first.slices_mut())
            .zip(self.second.slices_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn is_finite<T: Real>(&self) -> bool
    where
        P: ParamTensors<T>,
    {
        self.first
            .slices()
            .into_iter()
            .chain(self.second.slices())
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut head = AdvHeadParams {
            weight: Array1::from(vec![1.0f64, -1.0, 0.5]),
            bias: 0.0,
        };
        let grads = AdvHeadParams {
            weight: Array1::from(vec![2.0, -0.1, 0.0]),
            bias: 3.0,
        };
        let mut opt = Adam::new(&head);
        opt.step(&mut head, &grads, &AdamConfig::default());
        assert!((head.weight[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((head.weight[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(head.weight[2], 0.5);
        assert!((head.bias + 1e-3).abs() < 1e-9);
        assert_eq!(opt.steps(), 1);
        assert!(opt.is_finite());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut head = AdvHeadParams {
            weight: Array1::from(vec![3.0f64, -2.0]),
            bias: 1.0,
        };
        let mut opt = Adam::new(&head);
        let cfg = AdamConfig::with_learning_rate(0.05);
        for _ in 0..2000 {
            let grads = AdvHeadParams {
                weight: head.weight.mapv(|w| 2.0 * w),
                bias: 2.0 * head.bias,
            };
            opt.step(&mut head, &grads, &cfg);
        }
        assert!(head.weight.iter().all(|w| w.abs() < 1e-2));
        assert!(head.bias.abs() < 1e-2);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(AdamConfig::default().validate().is_ok());
        assert!(AdamConfig::with_learning_rate(0.0).validate().is_err());
    }
}
