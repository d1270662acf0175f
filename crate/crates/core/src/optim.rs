//! RMSprop with inverse-time learning-rate decay and coupled L2 weight decay.
//!
//! The decay term is added to the gradient before it enters the mean-square
//! accumulator, exactly as if `wd/2·‖θ‖²` were part of the loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub rho: f64,
    pub epsilon: f64,
    /// L2 coefficient for parameters whose name starts with `fcn.`.
    pub weight_decay_fcn: f64,
    /// L2 coefficient for all other parameters.
    pub weight_decay_resnet: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_decay: 1e-3,
            rho: 0.9,
            epsilon: 1e-8,
            weight_decay_fcn: 1e-4,
            weight_decay_resnet: 1e-4,
            batch_size: 8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("epsilon", self.epsilon),
            ("weight_decay_fcn", self.weight_decay_fcn),
            ("weight_decay_resnet", self.weight_decay_resnet),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!(
                "rho must lie in (0, 1), got {}",
                self.rho
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn weight_decay_for(&self, name: &str) -> f64 {
        if name.starts_with("fcn.") {
            self.weight_decay_fcn
        } else {
            self.weight_decay_resnet
        }
    }

    /// `lr0 / (1 + decay·t)` for update step `t` (0-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        self.lr0 / (1.0 + self.lr_decay * t as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<T: Element> {
    pub cfg: OptimConfig,
    /// Number of updates applied so far.
    pub step: u64,
    /// Mean-square accumulators in parameter-store order.
    pub accumulators: Vec<Tensor<T>>,
}

impl<T: Element> RmsProp<T> {
    pub fn new(cfg: OptimConfig, params: &ParamStore<T>) -> Self {
        Self {
            cfg,
            step: 0,
            accumulators: params.iter().map(|p| p.value.zeros_like()).collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr_at(self.step)
    }

    /// One update from the gradients currently held in `params`. Aborts
    /// without modifying anything if a non-finite value would be produced.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.accumulators.len() != params.len()
            || self
                .accumulators
                .iter()
                .zip(params.iter())
                .any(|(a, p)| a.shape() != p.value.shape())
        {
            return Err(Error::invalid(
                "optimizer accumulators do not match the parameters",
            ));
        }
        let rho = T::from_f64_lossy(self.cfg.rho);
        let one_m = T::one() - rho;
        let eps = T::from_f64_lossy(self.cfg.epsilon);
        let lr = T::from_f64_lossy(self.lr());
        let mut updates = Vec::with_capacity(params.len());
        for (p, acc) in params.iter().zip(&self.accumulators) {
            if !p.trainable {
                updates.push(None);
                continue;
            }
            let wd = if p.decay_exempt {
                T::zero()
            } else {
                T::from_f64_lossy(self.cfg.weight_decay_for(&p.name))
            };
            let mut v = acc.data().to_vec();
            let mut theta = p.value.data().to_vec();
            for ((vi, th), &g) in v.iter_mut().zip(theta.iter_mut()).zip(p.grad.data()) {
                let gt = g + wd * *th;
                *vi = rho * *vi + one_m * gt * gt;
                *th = *th - lr * gt / (vi.sqrt() + eps);
            }
            if !theta.iter().chain(&v).all(|x| x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("RMSprop update of `{}` at step {}", p.name, self.step),
                });
            }
            updates.push(Some((v, theta)));
        }
        for ((p, acc), u) in params.iter_mut().zip(&mut self.accumulators).zip(updates) {
            if let Some((v, theta)) = u {
                acc.data_mut().copy_from_slice(&v);
                p.value.data_mut().copy_from_slice(&theta);
            }
        }
        self.step += 1;
        Ok(())
    }
}
