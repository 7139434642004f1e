use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{bail, Result};

/// Plain SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning_rate must be > 0, got {}", self.learning_rate);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1), got {}", self.momentum);
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bail!(Config, "weight_decay must be >= 0, got {}", self.weight_decay);
        }
        Ok(())
    }
}

/// `m ← μ·m + (g + λ·w)`, then `w ← w − η·m`, for every parameter.
pub fn sgd_step(params: &mut ParamStore, config: &OptimizerConfig) {
    for p in params.iter_mut() {
        let n = p.value().len();
        for i in 0..n {
            let w = p.value().data()[i];
            let g = p.gradient().data()[i] + config.weight_decay * w;
            let m = config.momentum * p.momentum().data()[i] + g;
            p.momentum_mut().data_mut()[i] = m;
            p.value_mut().data_mut()[i] = w - config.learning_rate * m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn single(value: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(value));
        store.get_mut(id).gradient_mut().data_mut()[0] = grad;
        store
    }

    #[test]
    fn plain_step() {
        let mut store = single(1.0, 2.0);
        let cfg = OptimizerConfig { learning_rate: 1.0, momentum: 0.0, weight_decay: 0.0 };
        sgd_step(&mut store, &cfg);
        assert_eq!(store.iter().next().unwrap().value().data()[0], -1.0);
    }

    #[test]
    fn momentum_recursion() {
        let mut store = single(0.0, 1.0);
        let cfg = OptimizerConfig { learning_rate: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut store, &cfg);
        sgd_step(&mut store, &cfg);
        let v = store.iter().next().unwrap().value().data()[0];
        assert!((v - (-0.29)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut store = single(0.7, 0.0);
        sgd_step(&mut store, &OptimizerConfig { learning_rate: 0.3, momentum: 0.9, weight_decay: 0.0 });
        assert_eq!(store.iter().next().unwrap().value().data()[0], 0.7);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = OptimizerConfig { learning_rate: 0.0, momentum: 0.9, weight_decay: 0.0 };
        assert!(bad.validate().is_err());
        let bad = OptimizerConfig { learning_rate: 0.1, momentum: 1.0, weight_decay: 0.0 };
        assert!(bad.validate().is_err());
    }
}
