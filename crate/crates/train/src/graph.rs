//! Reverse-mode tape over the operations the demo model needs.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order. [`Graph::backward`] consumes the graph and walks it
//! once from the loss node down, accumulating adjoints into each node's
//! single input and parameter gradients into per-layer buffers.

use volterra_core::efficient::ConvSaved;
use volterra_core::{HlaSaved, Mode, Tensor};

use crate::error::{invalid, Error, Result};
use crate::layers::{Layer, Model, Stage};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Input,
    Conv { layer: usize, saved: Box<ConvSaved> },
    Hla { layer: usize, saved: Box<HlaSaved> },
    Affine { layer: usize },
    Relu,
    GlobalAvgPool,
    SoftmaxCe { labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    input: Option<NodeId>,
    value: Tensor,
}

pub struct Graph<'m> {
    layers: &'m [Layer],
    mode: Mode,
    nodes: Vec<Node>,
}

/// Per layer, per parameter buffer (in [`Layer::params_mut`] order).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(layers: &[Layer]) -> Self {
        Self { layers: layers.iter().map(|l| l.buffer_lengths().into_iter().map(|n| vec![0.0; n]).collect()).collect() }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flatten().flatten().copied().collect()
    }
}

/// Batch statistics seen by attention blocks during a training pass.
#[derive(Debug)]
pub struct RunningStats(Vec<(usize, HlaSaved)>);

impl<'m> Graph<'m> {
    pub fn new(model: &'m Model, mode: Mode) -> Self {
        Self { layers: &model.layers, mode, nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, input: Option<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, input, value });
        self.nodes.len() - 1
    }

    fn node(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes.get(id).map(|n| &n.value).ok_or_else(|| Error::InvalidArgument(format!("no node {id}")))
    }

    pub fn input(&mut self, x: Tensor) -> NodeId {
        self.push(Op::Input, None, x)
    }

    pub fn layer(&mut self, layer: usize, x: NodeId) -> Result<NodeId> {
        let input = self.node(x)?;
        let (op, value) = match self.layers.get(layer) {
            Some(Layer::Conv(c)) => {
                let (y, saved) = c.forward(input)?;
                (Op::Conv { layer, saved: Box::new(saved) }, y)
            }
            Some(Layer::Hla(h)) => {
                let (y, saved) = h.forward(input, self.mode)?;
                (Op::Hla { layer, saved: Box::new(saved) }, y)
            }
            Some(Layer::Affine(a)) => (Op::Affine { layer }, a.forward(input)?),
            None => return invalid(format!("no layer {layer}")),
        };
        Ok(self.push(op, Some(x), value))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.node(x)?.map(|v| v.max(0.0));
        Ok(self.push(Op::Relu, Some(x), y))
    }

    /// `[b, c, h, w] -> [b, c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.node(x)?;
        let [b, c, h, w] = t.dims4()?;
        let plane = (h * w) as f64;
        let y: Vec<f64> = t.data().chunks_exact(h * w).map(|p| p.iter().sum::<f64>() / plane).collect();
        let y = Tensor::new(vec![b, c], y)?;
        Ok(self.push(Op::GlobalAvgPool, Some(x), y))
    }

    /// Mean softmax cross-entropy of `[b, k]` logits; the value is `[1]`.
    pub fn softmax_ce(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let t = self.node(logits)?;
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return invalid(format!("logits {:?} do not match {} labels", t.shape(), labels.len()));
        }
        let k = t.shape()[1];
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return invalid(format!("label {l} out of range for {k} classes"));
        }
        let mut probs = Vec::with_capacity(t.len());
        let mut loss = 0.0;
        for (row, &label) in t.data().chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += sum.ln() + max - row[label];
            probs.extend(row.iter().map(|v| (v - max).exp() / sum));
        }
        let value = Tensor::new(vec![1], vec![loss / labels.len() as f64])?;
        Ok(self.push(Op::SoftmaxCe { labels: labels.to_vec(), probs }, Some(logits), value))
    }

    /// Runs the model's stages on `x`, returning the final node.
    pub fn run(&mut self, model: &Model, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        for stage in &model.stages {
            cur = match *stage {
                Stage::Layer(i) => self.layer(i, cur)?,
                Stage::Relu => self.relu(cur)?,
                Stage::GlobalAvgPool => self.global_avg_pool(cur)?,
            };
        }
        Ok(cur)
    }

    /// Adjoints of the scalar node `loss` with respect to every parameter.
    /// Nodes after `loss` are ignored.
    pub fn backward(self, loss: NodeId) -> Result<(Gradients, RunningStats)> {
        let root = self.node(loss)?;
        if root.len() != 1 {
            return invalid(format!("backward needs a scalar node, got shape {:?}", root.shape()));
        }
        let mut grads = Gradients::zeros_like(self.layers);
        let mut stats = Vec::new();
        let mut adjoints: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss] = Some(Tensor::filled(vec![1], 1.0)?);
        let mut nodes = self.nodes;
        nodes.truncate(loss + 1);

        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            let Some(dy) = adjoints[id].take() else {
                if let Op::Hla { layer, saved } = node.op {
                    stats.push((layer, *saved));
                }
                continue;
            };
            let Some(src) = node.input else { continue };
            let x = &nodes[src].value;
            let dx = match node.op {
                Op::Input => unreachable!("input nodes have no source"),
                Op::Conv { layer, saved } => {
                    let Layer::Conv(c) = &self.layers[layer] else { unreachable!() };
                    let g = c.backward(&dy, &saved)?;
                    let bufs = &mut grads.layers[layer];
                    for (k, kg) in g.kernels.iter().enumerate() {
                        add(&mut bufs[2 * k], kg.weights());
                        bufs[2 * k + 1][0] += kg.bias;
                    }
                    g.input
                }
                Op::Hla { layer, saved } => {
                    let Layer::Hla(h) = &self.layers[layer] else { unreachable!() };
                    let (dx, g) = h.backward(&dy, &saved)?;
                    for (acc, b) in grads.layers[layer].iter_mut().zip(g.into_buffers()) {
                        add(acc, &b);
                    }
                    stats.push((layer, *saved));
                    dx
                }
                Op::Affine { layer } => {
                    let Layer::Affine(a) = &self.layers[layer] else { unreachable!() };
                    let (dx, dw, db) = a.backward(x, &dy)?;
                    add(&mut grads.layers[layer][0], &dw);
                    add(&mut grads.layers[layer][1], &db);
                    dx
                }
                Op::Relu => {
                    let d = x.data().iter().zip(dy.data()).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                    Tensor::new(x.shape().to_vec(), d)?
                }
                Op::GlobalAvgPool => {
                    let plane = x.len() / dy.len();
                    let d = dy.data().iter().flat_map(|&g| std::iter::repeat_n(g / plane as f64, plane)).collect();
                    Tensor::new(x.shape().to_vec(), d)?
                }
                Op::SoftmaxCe { labels, mut probs } => {
                    let k = probs.len() / labels.len();
                    let scale = dy.data()[0] / labels.len() as f64;
                    for (s, &l) in labels.iter().enumerate() {
                        probs[s * k + l] -= 1.0;
                    }
                    probs.iter_mut().for_each(|p| *p *= scale);
                    Tensor::new(x.shape().to_vec(), probs)?
                }
            };
            match &mut adjoints[src] {
                Some(acc) => add(acc.data_mut(), dx.data()),
                slot => *slot = Some(dx),
            }
        }
        stats.reverse();
        Ok((grads, RunningStats(stats)))
    }
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Everything one forward and backward pass produces.
#[derive(Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub logits: Tensor,
    pub grads: Gradients,
    pub stats: RunningStats,
}

impl Model {
    /// Forward through all stages and the loss, then backward.
    pub fn step(&self, x: &Tensor, labels: &[usize], mode: Mode) -> Result<StepOutput> {
        let mut g = Graph::new(self, mode);
        let input = g.input(x.clone());
        let logits_id = g.run(self, input)?;
        let loss_id = g.softmax_ce(logits_id, labels)?;
        let loss = g.value(loss_id).data()[0];
        let logits = g.value(logits_id).clone();
        let (grads, stats) = g.backward(loss_id)?;
        Ok(StepOutput { loss, logits, grads, stats })
    }

    pub fn train_step(&self, x: &Tensor, labels: &[usize]) -> Result<StepOutput> {
        self.step(x, labels, Mode::Train)
    }

    pub fn loss_and_grads(&self, x: &Tensor, labels: &[usize], mode: Mode) -> Result<(f64, Gradients, RunningStats)> {
        let s = self.step(x, labels, mode)?;
        Ok((s.loss, s.grads, s.stats))
    }

    /// Logits for `x`, no tape kept beyond the call.
    pub fn predict(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new(self, mode);
        let input = g.input(x.clone());
        let out = g.run(self, input)?;
        Ok(g.nodes.swap_remove(out).value)
    }

    pub fn update_running_stats(&mut self, stats: &RunningStats) {
        for (layer, saved) in &stats.0 {
            if let Some(Layer::Hla(h)) = self.layers.get_mut(*layer) {
                h.update_running_stats(saved);
            }
        }
    }
}
