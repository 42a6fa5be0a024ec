//! Mini-batch SGD with momentum, weight decay and one optional decay step.

use crate::error::{invalid, Result};
use crate::graph::Gradients;
use crate::layers::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// The learning rate is multiplied by `lr_decay_factor` from this epoch
    /// (1-based) on.
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            lr_decay_epoch: None,
            lr_decay_factor: 0.1,
        }
    }
}

impl SgdConfig {
    /// A zero learning rate is accepted: it runs the schedule without
    /// touching the parameters.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return invalid(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return invalid(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_epoch {
            Some(e) if epoch >= e => self.learning_rate * self.lr_decay_factor,
            _ => self.learning_rate,
        }
    }
}

/// `v = momentum * v + g + weight_decay * p`, `p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Gradients,
}

impl Sgd {
    pub fn new(model: &Model, cfg: &SgdConfig) -> Self {
        Self { momentum: cfg.momentum, weight_decay: cfg.weight_decay, velocity: Gradients::zeros_like(&model.layers) }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != model.layers.len() {
            return invalid("gradients do not match the model");
        }
        for ((layer, g), v) in model.layers.iter_mut().zip(&grads.layers).zip(&mut self.velocity.layers) {
            for ((p, g), v) in layer.params_mut().into_iter().zip(g).zip(v) {
                if p.len() != g.len() {
                    return invalid("gradient buffer does not match parameter buffer");
                }
                for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *v = self.momentum * *v + g + self.weight_decay * *p;
                    *p -= lr * *v;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Affine, Layer, Stage};

    #[test]
    fn momentum_update_by_hand() {
        let mut m = Model::new(vec![Layer::Affine(Affine::zeros(1, 1))], vec![Stage::Layer(0)]).unwrap();
        let cfg = SgdConfig { momentum: 0.5, weight_decay: 0.0, ..SgdConfig::default() };
        let mut opt = Sgd::new(&m, &cfg);
        let g = Gradients { layers: vec![vec![vec![1.0], vec![2.0]]] };
        opt.step(&mut m, &g, 0.1).unwrap();
        opt.step(&mut m, &g, 0.1).unwrap();
        // v1 = 1, v2 = 1.5 -> w = -0.25; bias: v1 = 2, v2 = 3 -> -0.5
        assert!((m.flat_params()[0] + 0.25).abs() < 1e-15);
        assert!((m.flat_params()[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn validation_and_decay() {
        assert!(SgdConfig { batch_size: 0, ..SgdConfig::default() }.validate().is_err());
        assert!(SgdConfig { learning_rate: -1.0, ..SgdConfig::default() }.validate().is_err());
        assert!(SgdConfig { learning_rate: 0.0, ..SgdConfig::default() }.validate().is_ok());
        let c = SgdConfig { learning_rate: 1.0, lr_decay_epoch: Some(3), lr_decay_factor: 0.1, ..SgdConfig::default() };
        assert_eq!(c.learning_rate_at(2), 1.0);
        assert_eq!(c.learning_rate_at(3), 0.1);
    }
}
