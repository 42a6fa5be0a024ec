//! Per-channel batch normalization over `[b, c, h, w]` tensors.
//!
//! Forward is pure; running statistics are folded in separately with
//! [`BatchNorm2d::update_running_stats`] so a forward pass can be repeated
//! (gradient checks, evaluation) without side effects.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnSaved {
    mode: Mode,
    shape: [usize; 4],
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl BatchNorm2d {
    /// Identity transform: unit scale, zero shift, unit running variance.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BnSaved)> {
        let [b, c, h, w] = x.dims4()?;
        if c != self.channels() {
            return invalid(format!("batch norm has {} channels, input has {c}", self.channels()));
        }
        let plane = h * w;
        let count = (b * plane) as f64;
        let mut batch_mean = vec![0.0; c];
        let mut batch_var = vec![0.0; c];
        for ch in 0..c {
            let values = || (0..b).flat_map(move |s| x.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane].iter());
            let mean = values().sum::<f64>() / count;
            batch_mean[ch] = mean;
            batch_var[ch] = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        }
        let (mean, var) = match mode {
            Mode::Train => (&batch_mean, &batch_var),
            Mode::Eval => (&self.running_mean, &self.running_var),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (i, &v) in x.data().iter().enumerate() {
            let ch = (i / plane) % c;
            xhat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = self.gamma[ch] * xhat[i] + self.beta[ch];
        }
        let saved = BnSaved { mode, shape: [b, c, h, w], xhat, inv_std, batch_mean, batch_var };
        Ok((Tensor::new(x.shape().to_vec(), out)?, saved))
    }

    /// Exponential moving average update; the variance uses the unbiased
    /// batch estimate.
    pub fn update_running_stats(&mut self, saved: &BnSaved) {
        let [b, _, h, w] = saved.shape;
        let count = (b * h * w) as f64;
        let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..self.channels() {
            self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * saved.batch_mean[ch];
            self.running_var[ch] =
                (1.0 - self.momentum) * self.running_var[ch] + self.momentum * saved.batch_var[ch] * correction;
        }
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(&self, dy: &Tensor, saved: &BnSaved) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let [b, c, h, w] = saved.shape;
        if dy.shape() != saved.shape {
            return invalid(format!("batch norm upstream {:?} does not match saved {:?}", dy.shape(), saved.shape));
        }
        let plane = h * w;
        let count = (b * plane) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (i, &g) in dy.data().iter().enumerate() {
            let ch = (i / plane) % c;
            dgamma[ch] += g * saved.xhat[i];
            dbeta[ch] += g;
        }
        let mut dx = vec![0.0; dy.len()];
        for (i, &g) in dy.data().iter().enumerate() {
            let ch = (i / plane) % c;
            let scale = self.gamma[ch] * saved.inv_std[ch];
            dx[i] = match saved.mode {
                Mode::Eval => g * scale,
                // dgamma / dbeta double as sum(dy * xhat) and sum(dy).
                Mode::Train => scale * (g - dbeta[ch] / count - saved.xhat[i] * dgamma[ch] / count),
            };
        }
        Ok((Tensor::new(dy.shape().to_vec(), dx)?, dgamma, dbeta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_normalizes_each_channel() {
        let x = Tensor::new(vec![2, 2, 1, 2], vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, -10.0, -10.0]).unwrap();
        let bn = BatchNorm2d::new(2);
        let (y, saved) = bn.forward(&x, Mode::Train).unwrap();
        let ch0: Vec<f64> = [0, 1, 4, 5].iter().map(|&i| y.data()[i]).collect();
        assert!(ch0.iter().sum::<f64>().abs() < 1e-12);
        let var: f64 = ch0.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 5.0 / (5.0 + 1e-5)).abs() < 1e-9);
        let mut bn2 = bn.clone();
        bn2.update_running_stats(&saved);
        assert!((bn2.running_mean[0] - 0.4).abs() < 1e-12);
        assert!((bn2.running_mean[1] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean = vec![1.0];
        bn.running_var = vec![4.0 - 1e-5];
        let (y, _) = bn.forward(&x, Mode::Eval).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12 && (y.data()[1] - 1.5).abs() < 1e-12);
        assert!(bn.forward(&Tensor::zeros(vec![1, 2, 1, 1]).unwrap(), Mode::Eval).is_err());
    }
}
