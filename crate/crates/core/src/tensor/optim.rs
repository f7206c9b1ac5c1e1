//! Trainable parameters, Adam, and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor plus its Adam moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        let n = tensor.len();
        Self {
            name: name.into(),
            tensor,
            adam_m: vec![T::zero(); n],
            adam_v: vec![T::zero(); n],
        }
    }
}

/// Ordered collection of every parameter of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.params.push(Parameter::new(name, tensor));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Same parameters, converted element-wise to another precision.
    /// Optimizer moments are carried over.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| {
            v.iter()
                .map(|x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect()
        };
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    adam_m: conv(&p.adam_m),
                    adam_v: conv(&p.adam_v),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            decay_factor: 0.1,
            decay_every_epochs: 25,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay_factor", "must lie in (0, 1]"));
        }
        if self.decay_every_epochs == 0 {
            return Err(Error::config("decay_every_epochs", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1/beta2", "must lie in [0, 1)"));
        }
        if self.eps_adam <= 0.0 {
            return Err(Error::config("eps_adam", "must be positive"));
        }
        Ok(())
    }
}

/// Step decay: `base_lr * decay_factor ^ floor(epoch / decay_every_epochs)`.
///
/// Evaluated as a division by the integer power of `1 / decay_factor` so that
/// decimal factors such as 0.1 land on the nearest double of the decimal
/// result (`1e-3` then `1e-4`, not `1.0000000000000002e-4`).
pub fn lr_at_epoch(cfg: &OptimizerConfig, epoch: usize) -> f64 {
    let k = (epoch / cfg.decay_every_epochs.max(1)) as i32;
    let inv = 1.0 / cfg.decay_factor;
    if inv == inv.round() {
        cfg.base_lr / inv.powi(k)
    } else {
        cfg.base_lr * cfg.decay_factor.powi(k)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps_adam,
            t: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update with the gradients currently stored on `params`,
    /// then zero them.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.t += 1;
        adam_step(params, lr, self.t, self.beta1, self.beta2, self.eps)
    }
}

/// One Adam update at step index `t` (1-based). A non-finite gradient aborts
/// before any parameter is touched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    lr: f64,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::config("t", "Adam step index starts at 1"));
    }
    for p in params.iter() {
        if let Some(g) = p.tensor.grad() {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` at flat index {i} is {}",
                    p.name, g[i]
                )));
            }
        }
    }
    let b1 = T::from_f64_lossy(beta1);
    let b2 = T::from_f64_lossy(beta2);
    let one = T::one();
    let bias1 = T::from_f64_lossy(1.0 - beta1.powi(t as i32));
    let bias2 = T::from_f64_lossy(1.0 - beta2.powi(t as i32));
    let lr = T::from_f64_lossy(lr);
    let eps = T::from_f64_lossy(eps);
    for p in params.iter_mut() {
        let Parameter {
            tensor,
            adam_m,
            adam_v,
            ..
        } = p;
        let Some(grad) = tensor.grad.take() else {
            continue;
        };
        for (((w, &g), m), v) in tensor
            .data
            .iter_mut()
            .zip(&grad)
            .zip(adam_m.iter_mut())
            .zip(adam_v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        tensor.grad = Some(grad);
        tensor.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value));
        s.get_mut(id).tensor.grad_mut()[0] = grad;
        s
    }

    #[test]
    fn schedule_hits_decimal_values() {
        let cfg = OptimizerConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0), 1e-3);
        assert_eq!(lr_at_epoch(&cfg, 24), 1e-3);
        assert_eq!(lr_at_epoch(&cfg, 25), 1e-4);
        assert_eq!(lr_at_epoch(&cfg, 50), 1e-5);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut s = single(0.7, 0.0);
        Adam::new(&OptimizerConfig::default())
            .step(&mut s, 1e-3)
            .unwrap();
        assert_eq!(s.get(ParamId(0)).tensor.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = single(0.0, 1.0);
        adam_step(&mut s, 1e-3, 1, 0.9, 0.999, 1e-8).unwrap();
        let w = s.get(ParamId(0)).tensor.data()[0];
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-18, "{w}");
        // gradient cleared
        assert_eq!(s.get(ParamId(0)).tensor.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let mut s = single(0.5, f64::NAN);
        let err = adam_step(&mut s, 1e-3, 1, 0.9, 0.999, 1e-8).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.get(ParamId(0)).tensor.data(), &[0.5]);
    }

    #[test]
    fn validates_decay() {
        let cfg = OptimizerConfig {
            decay_factor: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = OptimizerConfig {
            decay_every_epochs: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
