use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradientMap, ParamKey, Tensor};
use crate::error::{Error, Result};

/// Adaptive-moment optimizer settings with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.01 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && 0.0 < self.beta1
            && self.beta1 < self.beta2
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid optimizer config {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW state: first and second moments per parameter plus a step count.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: OptimizerConfig,
    moments: BTreeMap<ParamKey, Moments>,
    step: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, moments: BTreeMap::new(), step: 0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Contract(format!("learning rate {lr} must be positive")));
        }
        self.config.learning_rate = lr;
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params`. `grads` must cover exactly the keys
    /// in `params`; anything not passed in is left untouched.
    pub fn step<'a, I>(&mut self, params: I, grads: &GradientMap) -> Result<()>
    where
        I: IntoIterator<Item = (ParamKey, &'a mut Tensor)>,
    {
        let params: Vec<(ParamKey, &mut Tensor)> = params.into_iter().collect();
        if params.len() != grads.len() || params.iter().any(|(k, _)| grads.get(*k).is_none()) {
            return Err(Error::Contract(format!(
                "optimizer got {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (key, p) in &params {
            let g = grads.get(*key).expect("checked above");
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "parameter {key:?} has shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }

        self.step += 1;
        let OptimizerConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps, weight_decay: wd } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (key, p) in params {
            let g = grads.get(key).expect("checked above").data();
            let st = self
                .moments
                .entry(key)
                .or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut st.m).zip(&mut st.v) {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use std::sync::Arc;

    fn grads_for(key: ParamKey, g: Tensor) -> GradientMap {
        let tape = Tape::new();
        let p = tape.param(key, Arc::new(g.clone()));
        let c = tape.constant(g);
        // d/dp sum(p * c) = c
        tape.backward(p.mul(c).sum()).unwrap()
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut p = Tensor::vector(vec![0.5, -1.5]);
        let before = p.clone();
        let g = grads_for(ParamKey(0), Tensor::vector(vec![0.0, 0.0]));
        opt.step([(ParamKey(0), &mut p)], &g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = OptimizerConfig { learning_rate: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut p = Tensor::scalar(2.0);
        let g = grads_for(ParamKey(0), Tensor::scalar(1.0));
        opt.step([(ParamKey(0), &mut p)], &g).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + eps)
        assert!((p.item() - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut opt = AdamW::new(OptimizerConfig::default()).unwrap();
        let mut p = Tensor::scalar(1.0);
        let g = grads_for(ParamKey(1), Tensor::scalar(1.0));
        assert!(opt.step([(ParamKey(0), &mut p)], &g).is_err());
        let mut wide = Tensor::vector(vec![1.0, 2.0]);
        let g = grads_for(ParamKey(0), Tensor::scalar(1.0));
        assert!(matches!(opt.step([(ParamKey(0), &mut wide)], &g), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = OptimizerConfig { beta1: 0.999, beta2: 0.9, ..Default::default() };
        assert!(AdamW::new(bad).is_err());
        let bad = OptimizerConfig { learning_rate: 0.0, ..Default::default() };
        assert!(AdamW::new(bad).is_err());
    }
}
