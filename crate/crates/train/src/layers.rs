//! Trainable layers and the fixed sequential model used by the demo.

use rand::Rng;
use volterra_core::{HlaParams, Tensor, VolterraConvLayer};

use crate::error::{invalid, Result};

/// Fully connected layer on `[b, inputs]` (any trailing shape is flattened).
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weight: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    pub fn random(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let mut a = Self::zeros(inputs, outputs);
        let bound = 1.0 / (inputs as f64).sqrt();
        a.weight.iter_mut().for_each(|w| *w = rng.gen_range(-bound..=bound));
        a
    }

    fn batch(&self, x: &Tensor) -> Result<usize> {
        let b = x.shape()[0];
        if x.len() != b * self.inputs {
            return invalid(format!("affine layer expects {} features per sample, input shape {:?}", self.inputs, x.shape()));
        }
        Ok(b)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.batch(x)?;
        let mut out = Vec::with_capacity(b * self.outputs);
        for row in x.data().chunks_exact(self.inputs) {
            for (o, w) in self.weight.chunks_exact(self.inputs).enumerate() {
                out.push(self.bias[o] + w.iter().zip(row).map(|(a, v)| a * v).sum::<f64>());
            }
        }
        Ok(Tensor::new(vec![b, self.outputs], out)?)
    }

    /// Returns `(dx, dweight, dbias)`; `dx` has the shape of `x`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let b = self.batch(x)?;
        if dy.shape() != [b, self.outputs] {
            return invalid(format!("affine upstream {:?} does not match [{b}, {}]", dy.shape(), self.outputs));
        }
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.outputs];
        for s in 0..b {
            let row = &x.data()[s * self.inputs..(s + 1) * self.inputs];
            let drow = &mut dx[s * self.inputs..(s + 1) * self.inputs];
            for o in 0..self.outputs {
                let g = dy.data()[s * self.outputs + o];
                db[o] += g;
                let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                let gw = &mut dw[o * self.inputs..(o + 1) * self.inputs];
                for i in 0..self.inputs {
                    gw[i] += g * row[i];
                    drow[i] += g * w[i];
                }
            }
        }
        Ok((Tensor::new(x.shape().to_vec(), dx)?, dw, db))
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(VolterraConvLayer),
    Hla(HlaParams),
    Affine(Affine),
}

impl Layer {
    /// Parameter buffers in a fixed order; gradients use the same order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Conv(c) => c
                .kernels_mut()
                .iter_mut()
                .flat_map(|k| {
                    let (w, b) = k.params_mut();
                    [w, std::slice::from_mut(b)]
                })
                .collect(),
            Layer::Hla(h) => h.params_mut(),
            Layer::Affine(a) => vec![&mut a.weight, &mut a.bias],
        }
    }

    /// Lengths of the buffers returned by [`Layer::params_mut`].
    pub fn buffer_lengths(&self) -> Vec<usize> {
        let kernels = |c: &VolterraConvLayer| c.kernels().iter().flat_map(|k| [k.weights().len(), 1]).collect::<Vec<_>>();
        match self {
            Layer::Conv(c) => kernels(c),
            Layer::Hla(h) => {
                let mut out = vec![h.se_reduce_w.len(), h.se_reduce_b.len(), h.se_expand_w.len(), h.se_expand_b.len()];
                out.extend(kernels(&h.volterra));
                out.extend([h.bn.gamma.len(), h.bn.beta.len()]);
                if let Some(bn) = &h.input_bn {
                    out.extend([bn.gamma.len(), bn.beta.len()]);
                }
                out
            }
            Layer::Affine(a) => vec![a.weight.len(), a.bias.len()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.buffer_lengths().iter().sum()
    }
}

/// One step of a sequential model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Apply the layer with this index.
    Layer(usize),
    Relu,
    GlobalAvgPool,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub stages: Vec<Stage>,
}

impl Model {
    pub fn new(layers: Vec<Layer>, stages: Vec<Stage>) -> Result<Self> {
        for s in &stages {
            if let Stage::Layer(i) = s {
                if *i >= layers.len() {
                    return invalid(format!("stage refers to layer {i}, model has {}", layers.len()));
                }
            }
        }
        Ok(Self { layers, stages })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// All parameters concatenated in layer, then buffer order.
    pub fn flat_params(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            for b in l.params_mut() {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return invalid(format!("model has {} parameters, got {}", self.param_count(), p.len()));
        }
        let mut rest = p;
        for l in &mut self.layers {
            for b in l.params_mut() {
                let (head, tail) = rest.split_at(b.len());
                b.copy_from_slice(head);
                rest = tail;
            }
        }
        Ok(())
    }
}
