//! High-order local attention block.
//!
//! Two branches produce attention coefficients in `(0, 1)`:
//!
//! * global: squeeze-and-excitation (spatial mean, reduce, ReLU, expand,
//!   sigmoid), then every coefficient above the per-sample channel mean is
//!   clamped down to that mean;
//! * local: optional input batch norm, second-order Volterra convolution
//!   (3x3, stride 1, pad 1), batch norm, sigmoid.
//!
//! They are fused as `y = a + b - a*b` (always in `(max(a, b), 1)`) and the
//! block returns `x * y`. Everything here is deterministic.

use rand::Rng;

use crate::efficient::{ConvSaved, UniqueKernel, VolterraConvLayer};
use crate::error::{invalid, Result};
use crate::norm::{BatchNorm2d, BnSaved, Mode};
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HlaConfig {
    pub channels: usize,
    pub reduction_ratio: usize,
    pub use_input_batchnorm: bool,
}

impl HlaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction_ratio == 0 || self.channels < self.reduction_ratio || !self.channels.is_multiple_of(self.reduction_ratio) {
            return invalid(format!(
                "channels ({}) must be a positive multiple of the reduction ratio ({})",
                self.channels, self.reduction_ratio
            ));
        }
        Ok(())
    }

    pub fn reduced(&self) -> usize {
        self.channels / self.reduction_ratio
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `min(a_i, mean(a))` for every coefficient.
pub fn channel_mean_clamp(a: &[f64]) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let m = a.iter().sum::<f64>() / a.len() as f64;
    a.iter().map(|&v| if v <= m { v } else { m }).collect()
}

/// `a + b - a*b`.
pub fn shake_combine(a: f64, b: f64) -> f64 {
    a + b - a * b
}

/// Parameters of one block. The Volterra layer is tied to a fixed spatial size.
#[derive(Debug, Clone)]
pub struct HlaParams {
    pub config: HlaConfig,
    /// `reduced x channels`, row-major.
    pub se_reduce_w: Vec<f64>,
    pub se_reduce_b: Vec<f64>,
    /// `channels x reduced`, row-major.
    pub se_expand_w: Vec<f64>,
    pub se_expand_b: Vec<f64>,
    pub volterra: VolterraConvLayer,
    pub bn: BatchNorm2d,
    pub input_bn: Option<BatchNorm2d>,
}

#[derive(Debug, Clone)]
pub struct HlaSaved {
    mode: Mode,
    x: Tensor,
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    se_raw: Vec<f64>,
    se: Vec<f64>,
    input_bn: Option<BnSaved>,
    conv: ConvSaved,
    bn: BnSaved,
    local: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HlaGrads {
    pub se_reduce_w: Vec<f64>,
    pub se_reduce_b: Vec<f64>,
    pub se_expand_w: Vec<f64>,
    pub se_expand_b: Vec<f64>,
    pub volterra: Vec<UniqueKernel>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub input_bn: Option<(Vec<f64>, Vec<f64>)>,
}

impl HlaGrads {
    /// Gradient buffers in the order of [`HlaParams::params_mut`].
    pub fn into_buffers(self) -> Vec<Vec<f64>> {
        let mut out = vec![self.se_reduce_w, self.se_reduce_b, self.se_expand_w, self.se_expand_b];
        for k in self.volterra {
            let bias = k.bias;
            out.push(k.weights().to_vec());
            out.push(vec![bias]);
        }
        out.push(self.bn_gamma);
        out.push(self.bn_beta);
        if let Some((g, b)) = self.input_bn {
            out.push(g);
            out.push(b);
        }
        out
    }
}

impl HlaParams {
    /// All parameters zero, batch norms at identity.
    pub fn zeros(config: HlaConfig, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let cr = config.reduced();
        let geometry = ConvGeometry::square(c, height, width, 3, 1)?;
        Ok(Self {
            config,
            se_reduce_w: vec![0.0; cr * c],
            se_reduce_b: vec![0.0; cr],
            se_expand_w: vec![0.0; c * cr],
            se_expand_b: vec![0.0; c],
            volterra: VolterraConvLayer::zeros(geometry, c, 2)?,
            bn: BatchNorm2d::new(c),
            input_bn: config.use_input_batchnorm.then(|| BatchNorm2d::new(c)),
        })
    }

    pub fn random(config: HlaConfig, height: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(config, height, width)?;
        let c = config.channels;
        let cr = config.reduced();
        let fill = |v: &mut [f64], fan_in: usize, rng: &mut dyn rand::RngCore| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            v.iter_mut().for_each(|w| *w = rng.gen_range(-bound..=bound));
        };
        fill(&mut p.se_reduce_w, c, rng);
        fill(&mut p.se_expand_w, cr, rng);
        p.volterra = VolterraConvLayer::random(*p.volterra.geometry(), c, 2, rng)?;
        Ok(p)
    }

    /// Mutable parameter slices in a fixed order: SE reduce weights, bias,
    /// SE expand weights, bias, then per Volterra output channel its weights
    /// and bias, then batch-norm scale and shift, then the input batch norm's.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.se_reduce_w,
            &mut self.se_reduce_b,
            &mut self.se_expand_w,
            &mut self.se_expand_b,
        ];
        for k in self.volterra.kernels_mut() {
            let (weights, bias) = k.params_mut();
            out.push(weights);
            out.push(std::slice::from_mut(bias));
        }
        out.push(&mut self.bn.gamma);
        out.push(&mut self.bn.beta);
        if let Some(bn) = &mut self.input_bn {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out
    }

    fn check(&self, x: &Tensor) -> Result<[usize; 4]> {
        let dims = x.dims4()?;
        let g = self.volterra.geometry();
        if dims[1] != self.config.channels || dims[2] != g.in_h || dims[3] != g.in_w {
            return invalid(format!(
                "attention block expects [_, {}, {}, {}], got {:?}",
                self.config.channels,
                g.in_h,
                g.in_w,
                x.shape()
            ));
        }
        Ok(dims)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, HlaSaved)> {
        let [b, c, h, w] = self.check(x)?;
        let cr = self.config.reduced();
        let plane = h * w;

        // Global branch.
        let pooled: Vec<f64> = x.data().chunks_exact(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        let mut hidden_pre = vec![0.0; b * cr];
        for s in 0..b {
            for o in 0..cr {
                let row = &self.se_reduce_w[o * c..(o + 1) * c];
                hidden_pre[s * cr + o] = self.se_reduce_b[o] + row.iter().zip(&pooled[s * c..(s + 1) * c]).map(|(a, v)| a * v).sum::<f64>();
            }
        }
        let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
        let mut se_raw = vec![0.0; b * c];
        for s in 0..b {
            for o in 0..c {
                let row = &self.se_expand_w[o * cr..(o + 1) * cr];
                let z = self.se_expand_b[o] + row.iter().zip(&hidden[s * cr..(s + 1) * cr]).map(|(a, v)| a * v).sum::<f64>();
                se_raw[s * c + o] = sigmoid(z);
            }
        }
        let se: Vec<f64> = se_raw.chunks_exact(c).flat_map(channel_mean_clamp).collect();

        // Local branch.
        let (conv_in, input_bn) = match &self.input_bn {
            Some(bn) => {
                let (y, saved) = bn.forward(x, mode)?;
                (y, Some(saved))
            }
            None => (x.clone(), None),
        };
        let (conv_out, conv) = self.volterra.forward(&conv_in)?;
        let (normed, bn) = self.bn.forward(&conv_out, mode)?;
        let local: Vec<f64> = normed.data().iter().map(|&v| sigmoid(v)).collect();

        let out = apply_attention_raw(x.data(), &se, &local, plane);
        let saved = HlaSaved { mode, x: x.clone(), pooled, hidden_pre, hidden, se_raw, se, input_bn, conv, bn, local };
        Ok((Tensor::new(vec![b, c, h, w], out)?, saved))
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running statistics.
    pub fn update_running_stats(&mut self, saved: &HlaSaved) {
        if saved.mode != Mode::Train {
            return;
        }
        self.bn.update_running_stats(&saved.bn);
        if let (Some(bn), Some(s)) = (&mut self.input_bn, &saved.input_bn) {
            bn.update_running_stats(s);
        }
    }

    pub fn backward(&self, dout: &Tensor, saved: &HlaSaved) -> Result<(Tensor, HlaGrads)> {
        let [b, c, h, w] = saved.x.dims4()?;
        if dout.shape() != saved.x.shape() {
            return invalid(format!("upstream {:?} does not match block output {:?}", dout.shape(), saved.x.shape()));
        }
        let cr = self.config.reduced();
        let plane = h * w;
        let x = saved.x.data();
        let g = dout.data();

        // out = x * (a + l - a l)
        let mut dx = vec![0.0; x.len()];
        let mut d_se = vec![0.0; b * c];
        let mut d_local_pre = vec![0.0; x.len()];
        for i in 0..x.len() {
            let a = saved.se[i / plane];
            let l = saved.local[i];
            dx[i] = g[i] * shake_combine(a, l);
            let dy = g[i] * x[i];
            d_se[i / plane] += dy * (1.0 - l);
            // sigmoid'
            d_local_pre[i] = dy * (1.0 - a) * l * (1.0 - l);
        }

        // Local branch.
        let (d_conv_out, bn_gamma, bn_beta) = self.bn.backward(&Tensor::new(vec![b, c, h, w], d_local_pre)?, &saved.bn)?;
        let conv_grads = self.volterra.backward(&d_conv_out, &saved.conv)?;
        let (d_conv_in, input_bn) = match (&self.input_bn, &saved.input_bn) {
            (Some(bn), Some(s)) => {
                let (d, gg, gb) = bn.backward(&conv_grads.input, s)?;
                (d, Some((gg, gb)))
            }
            _ => (conv_grads.input, None),
        };
        for (a, v) in dx.iter_mut().zip(d_conv_in.data()) {
            *a += v;
        }

        // Global branch: clamp, sigmoid, expand, ReLU, reduce, mean pool.
        let mut d_raw = vec![0.0; b * c];
        for s in 0..b {
            let raw = &saved.se_raw[s * c..(s + 1) * c];
            let mean = raw.iter().sum::<f64>() / c as f64;
            let mut d_mean = 0.0;
            for i in 0..c {
                let da = d_se[s * c + i];
                if raw[i] <= mean {
                    d_raw[s * c + i] += da;
                } else {
                    d_mean += da;
                }
            }
            for i in 0..c {
                d_raw[s * c + i] += d_mean / c as f64;
            }
        }
        let mut se_expand_w = vec![0.0; c * cr];
        let mut se_expand_b = vec![0.0; c];
        let mut d_hidden = vec![0.0; b * cr];
        for s in 0..b {
            for o in 0..c {
                let a = saved.se_raw[s * c + o];
                let dz = d_raw[s * c + o] * a * (1.0 - a);
                se_expand_b[o] += dz;
                for k in 0..cr {
                    se_expand_w[o * cr + k] += dz * saved.hidden[s * cr + k];
                    d_hidden[s * cr + k] += dz * self.se_expand_w[o * cr + k];
                }
            }
        }
        let mut se_reduce_w = vec![0.0; cr * c];
        let mut se_reduce_b = vec![0.0; cr];
        let mut d_pooled = vec![0.0; b * c];
        for s in 0..b {
            for o in 0..cr {
                if saved.hidden_pre[s * cr + o] <= 0.0 {
                    continue;
                }
                let dz = d_hidden[s * cr + o];
                se_reduce_b[o] += dz;
                for k in 0..c {
                    se_reduce_w[o * c + k] += dz * saved.pooled[s * c + k];
                    d_pooled[s * c + k] += dz * self.se_reduce_w[o * c + k];
                }
            }
        }
        for (i, d) in dx.iter_mut().enumerate() {
            *d += d_pooled[i / plane] / plane as f64;
        }

        let grads = HlaGrads {
            se_reduce_w,
            se_reduce_b,
            se_expand_w,
            se_expand_b,
            volterra: conv_grads.kernels,
            bn_gamma,
            bn_beta,
            input_bn,
        };
        Ok((Tensor::new(vec![b, c, h, w], dx)?, grads))
    }
}

fn apply_attention_raw(x: &[f64], se: &[f64], local: &[f64], plane: usize) -> Vec<f64> {
    x.iter().zip(local).enumerate().map(|(i, (&v, &l))| v * shake_combine(se[i / plane], l)).collect()
}

/// `x * (a + b' - a b')` with `a` (`[b, c]`) broadcast over spatial positions.
pub fn apply_attention(x: &Tensor, se: &[f64], local: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    if se.len() != b * c || local.shape() != x.shape() {
        return invalid("attention coefficients do not match the input");
    }
    Tensor::new(x.shape().to_vec(), apply_attention_raw(x.data(), se, local.data(), h * w))
}

/// Per-sample, per-channel global coefficients (`[b, c]` row-major).
pub fn se_branch(x: &Tensor, params: &HlaParams) -> Result<Vec<f64>> {
    let (_, saved) = params.forward(x, Mode::Eval)?;
    Ok(saved.se)
}

/// Per-position local coefficients, same shape as `x`.
pub fn local_branch(x: &Tensor, params: &HlaParams, mode: Mode) -> Result<Tensor> {
    let (_, saved) = params.forward(x, mode)?;
    Tensor::new(x.shape().to_vec(), saved.local)
}

pub fn hla_forward(x: &Tensor, params: &HlaParams, mode: Mode) -> Result<Tensor> {
    Ok(params.forward(x, mode)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_examples() {
        let out = channel_mean_clamp(&[0.2, 0.4, 0.6]);
        for (o, e) in out.iter().zip([0.2, 0.4, 0.4]) {
            assert!((o - e).abs() < 1e-15);
        }
        assert_eq!(channel_mean_clamp(&[0.3; 4]), vec![0.3; 4]);
    }

    #[test]
    fn combine_examples() {
        assert_eq!(shake_combine(0.5, 0.5), 0.75);
        assert_eq!(shake_combine(0.0, 0.3), 0.3);
    }

    #[test]
    fn config_validation() {
        let ok = HlaConfig { channels: 8, reduction_ratio: 4, use_input_batchnorm: false };
        assert!(ok.validate().is_ok());
        assert!(HlaConfig { reduction_ratio: 3, ..ok }.validate().is_err());
        assert!(HlaConfig { reduction_ratio: 16, ..ok }.validate().is_err());
        assert!(HlaConfig { reduction_ratio: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn zero_block_scales_by_three_quarters() {
        let cfg = HlaConfig { channels: 4, reduction_ratio: 2, use_input_batchnorm: true };
        let p = HlaParams::zeros(cfg, 3, 3).unwrap();
        let x = Tensor::new(vec![2, 4, 3, 3], (0..72).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let y = hla_forward(&x, &p, mode).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!((a - 0.75 * b).abs() < 1e-15);
            }
            assert!(local_branch(&x, &p, mode).unwrap().data().iter().all(|&v| v == 0.5));
        }
        assert!(se_branch(&x, &p).unwrap().iter().all(|&v| v == 0.5));
        assert!(hla_forward(&Tensor::zeros(vec![1, 4, 2, 3]).unwrap(), &p, Mode::Eval).is_err());
    }

    #[test]
    fn unit_coefficients_are_identity() {
        let x = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|v| v as f64 - 3.5).collect()).unwrap();
        let ones = Tensor::filled(vec![1, 2, 2, 2], 1.0).unwrap();
        assert_eq!(apply_attention(&x, &[1.0, 1.0], &ones).unwrap(), x);
    }
}
