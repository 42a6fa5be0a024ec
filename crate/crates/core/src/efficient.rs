//! Volterra filtering over unique terms only.
//!
//! Order-`j` terms are built from order-`j-1` terms by one gathered multiply
//! per term ([`build_terms_progressive`]), and the input gradient is a fused
//! scatter-add driven by the same gather tables ([`scatter_term_grads`]).
//! [`VolterraConvLayer`] runs the filter on every im2col patch.
//!
//! Term and weight vectors are stored concatenated across orders
//! (`[order 1 | order 2 | ... | order r]`), each block aligned row-for-row
//! with the full position matrix of that order.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::index::{count_terms, index_set, IndexSet};
use crate::tensor::{col2im_accumulate, im2col, ConvGeometry, PatchMatrix, Tensor};

fn order_offsets(n: usize, order: usize) -> Result<Vec<usize>> {
    let mut offsets = vec![0];
    for j in 1..=order {
        let c = usize::try_from(count_terms(n, j)?).map_err(|_| Error::Overflow(format!("term count for n={n}, j={j}")))?;
        offsets.push(offsets.last().unwrap() + c);
    }
    Ok(offsets)
}

/// Per-order weights over unique terms plus a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct UniqueKernel {
    n: usize,
    offsets: Vec<usize>,
    weights: Vec<f64>,
    pub bias: f64,
}

impl UniqueKernel {
    /// `weights[j-1]` must have `C(n + j - 1, j)` entries.
    pub fn new(n: usize, weights: Vec<Vec<f64>>, bias: f64) -> Result<Self> {
        if n == 0 || weights.is_empty() {
            return invalid("unique kernel needs n >= 1 and at least one order");
        }
        let offsets = order_offsets(n, weights.len())?;
        for (j, w) in weights.iter().enumerate() {
            let want = offsets[j + 1] - offsets[j];
            if w.len() != want {
                return invalid(format!("order-{} weights need {want} entries for n={n}, got {}", j + 1, w.len()));
            }
        }
        Ok(Self { n, offsets, weights: weights.concat(), bias })
    }

    pub fn zeros(n: usize, order: usize) -> Result<Self> {
        if n == 0 || order == 0 {
            return invalid(format!("unique kernel needs n >= 1 and order >= 1, got n={n}, order={order}"));
        }
        let offsets = order_offsets(n, order)?;
        let total = *offsets.last().unwrap();
        Ok(Self { n, offsets, weights: vec![0.0; total], bias: 0.0 })
    }

    /// First order uniform in `±1/sqrt(n)`; order `j >= 2` uniform in
    /// `±1/C(n+j-1, j)` so a fresh layer behaves close to a linear one.
    pub fn random(n: usize, order: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut k = Self::zeros(n, order)?;
        let first = 1.0 / (n as f64).sqrt();
        for j in 1..=order {
            let range = k.offsets[j - 1]..k.offsets[j];
            let bound = if j == 1 { first } else { 1.0 / range.len() as f64 };
            for w in &mut k.weights[range] {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        Ok(k)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn order_weights(&self, j: usize) -> &[f64] {
        &self.weights[self.offsets[j - 1]..self.offsets[j]]
    }

    pub fn order_weights_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.weights[self.offsets[j - 1]..self.offsets[j]]
    }

    /// All orders concatenated.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Weights and bias, borrowed together.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut f64) {
        (&mut self.weights, &mut self.bias)
    }

    /// Weights plus bias; equals `C(n + r, r)`.
    pub fn param_count(&self) -> usize {
        self.weights.len() + 1
    }

    fn check(&self, idx: &IndexSet) -> Result<()> {
        if self.n != idx.n() || self.order() > idx.order() {
            return invalid(format!(
                "kernel (n={}, order={}) does not fit index set (n={}, order={})",
                self.n,
                self.order(),
                idx.n(),
                idx.order()
            ));
        }
        Ok(())
    }
}

/// Unique terms `x_S1 .. x_Sr` of one input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TermCache {
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl TermCache {
    pub fn order(&self, j: usize) -> &[f64] {
        &self.data[self.offsets[j - 1]..self.offsets[j]]
    }

    pub fn max_order(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n(&self) -> usize {
        self.offsets[1]
    }

    /// All orders concatenated.
    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    /// Allocated bytes of the term buffer.
    pub fn buffer_bytes(&self) -> usize {
        self.data.capacity() * std::mem::size_of::<f64>()
    }
}

/// Fills `out` (length `idx.total_terms()` or a prefix covering `order`
/// orders) with the unique terms of `x`, using gather table `variant` of each
/// order. Callers guarantee `x.len() == idx.n()`.
fn fill_terms(x: &[f64], idx: &IndexSet, order: usize, variant: usize, out: &mut [f64]) {
    out[..x.len()].copy_from_slice(x);
    for j in 2..=order {
        let (lower, upper) = out.split_at_mut(idx.offset(j));
        let prev = &lower[idx.offset(j - 1)..];
        let table = idx.pcms(j).variant(variant.min(j - 1));
        for (slot, e) in upper.iter_mut().zip(table) {
            *slot = x[e.position] * prev[e.prev_row];
        }
    }
}

/// Unique terms of every order up to `idx.order()`, built progressively with
/// the first gather table of each order.
pub fn build_terms_progressive(x: &[f64], idx: &IndexSet) -> Result<TermCache> {
    build_terms_with_variant(x, idx, 0)
}

/// As [`build_terms_progressive`] but through gather table `variant`
/// (clamped to `j - 1` for order `j`). Every variant yields the same terms.
pub fn build_terms_with_variant(x: &[f64], idx: &IndexSet, variant: usize) -> Result<TermCache> {
    if x.len() != idx.n() {
        return invalid(format!("input has length {}, index set expects {}", x.len(), idx.n()));
    }
    for p in idx.all_pcms() {
        for table in p.variants() {
            if table.len() != p.n_rows() {
                return Err(Error::Internal(format!("order-{} gather tables differ in length", p.order())));
            }
        }
    }
    let mut offsets: Vec<usize> = (1..=idx.order()).map(|j| idx.offset(j)).collect();
    offsets.push(idx.total_terms());
    let mut data = vec![0.0; idx.total_terms()];
    for j in 2..=idx.order() {
        let prev_len = idx.fpm(j - 1).n_rows();
        let bad = idx.pcms(j).variant(variant.min(j - 1)).iter().find(|e| e.position >= x.len() || e.prev_row >= prev_len);
        if let Some(e) = bad {
            return Err(Error::Internal(format!("order-{j} gather entry {e:?} is out of range")));
        }
    }
    fill_terms(x, idx, idx.order(), variant, &mut data);
    Ok(TermCache { offsets, data })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sum_j <w_Sj, x_Sj> + b`.
pub fn evc_forward(x: &[f64], k: &UniqueKernel, idx: &IndexSet) -> Result<f64> {
    k.check(idx)?;
    let cache = build_terms_progressive(x, idx)?;
    evc_forward_cached(&cache, k)
}

pub fn evc_forward_cached(cache: &TermCache, k: &UniqueKernel) -> Result<f64> {
    if cache.n() != k.n || cache.max_order() < k.order() {
        return invalid("term cache does not match kernel");
    }
    Ok(dot(&k.weights, &cache.data[..k.weights.len()]) + k.bias)
}

/// Weight gradients `upstream * x_Sj`; bias gradient `upstream`.
pub fn evc_grad_weights(cache: &TermCache, upstream: f64) -> UniqueKernel {
    UniqueKernel {
        n: cache.n(),
        offsets: cache.offsets.clone(),
        weights: cache.data.iter().map(|&t| t * upstream).collect(),
        bias: upstream,
    }
}

/// Adds `d(sum_k g[k] * x_S[k]) / dx` to `out`, where `term_grads` is
/// concatenated across orders `1..=order` like a term vector.
///
/// The first order passes straight through. For order `j >= 2`, each of the
/// `j` gather tables peels a different factor off every term; adding
/// `g[k] * x_S(j-1)[prev_row]` at `position` for all of them counts each
/// repeated factor with its multiplicity. Accumulation is in ascending term
/// row, then table, order.
pub fn scatter_term_grads(term_grads: &[f64], terms: &[f64], idx: &IndexSet, order: usize, out: &mut [f64]) {
    let n = idx.n();
    for (o, g) in out.iter_mut().zip(&term_grads[..n]) {
        *o += g;
    }
    for j in 2..=order {
        let grads = &term_grads[idx.order_range(j)];
        let prev = &terms[idx.order_range(j - 1)];
        let tables = idx.pcms(j).variants();
        for (k, &g) in grads.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for table in tables {
                let e = table[k];
                out[e.position] += g * prev[e.prev_row];
            }
        }
    }
}

/// `upstream * d(evc_forward)/dx`.
pub fn evc_grad_input(cache: &TermCache, k: &UniqueKernel, idx: &IndexSet, upstream: f64) -> Result<Vec<f64>> {
    k.check(idx)?;
    if cache.n() != idx.n() || cache.max_order() < k.order() {
        return invalid("term cache does not match index set");
    }
    let mut grad = vec![0.0; idx.n()];
    scatter_term_grads(&k.weights, &cache.data, idx, k.order(), &mut grad);
    grad.iter_mut().for_each(|g| *g *= upstream);
    Ok(grad)
}

/// Volterra filter applied to every im2col patch of the input, one unique
/// kernel per output channel. Terms are built once per patch and shared by
/// all output channels.
#[derive(Debug, Clone)]
pub struct VolterraConvLayer {
    geometry: ConvGeometry,
    order: usize,
    kernels: Vec<UniqueKernel>,
    index: Arc<IndexSet>,
}

/// State kept from forward for backward.
#[derive(Debug, Clone)]
pub struct ConvSaved {
    pub patches: PatchMatrix,
    /// `n_patches x total_terms`, row per patch.
    pub terms: Vec<f64>,
    pub batch: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    /// One gradient kernel per output channel (bias field holds the bias gradient).
    pub kernels: Vec<UniqueKernel>,
}

impl VolterraConvLayer {
    pub fn zeros(geometry: ConvGeometry, out_channels: usize, order: usize) -> Result<Self> {
        geometry.validate()?;
        if out_channels == 0 {
            return invalid("convolution needs at least one output channel");
        }
        let n = geometry.patch_len();
        let index = index_set(n, order)?;
        let kernels = vec![UniqueKernel::zeros(n, order)?; out_channels];
        Ok(Self { geometry, order, kernels, index })
    }

    pub fn random(geometry: ConvGeometry, out_channels: usize, order: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut layer = Self::zeros(geometry, out_channels, order)?;
        for k in &mut layer.kernels {
            *k = UniqueKernel::random(geometry.patch_len(), order, rng)?;
        }
        Ok(layer)
    }

    pub fn from_kernels(geometry: ConvGeometry, kernels: Vec<UniqueKernel>) -> Result<Self> {
        let first = kernels.first().ok_or_else(|| Error::InvalidArgument("no kernels given".into()))?;
        let order = first.order();
        if kernels.iter().any(|k| k.n != geometry.patch_len() || k.order() != order) {
            return invalid("all kernels must share the patch length and order of the geometry");
        }
        let index = index_set(geometry.patch_len(), order)?;
        Ok(Self { geometry, order, kernels, index })
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernels(&self) -> &[UniqueKernel] {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut [UniqueKernel] {
        &mut self.kernels
    }

    pub fn index(&self) -> &IndexSet {
        &self.index
    }

    pub fn param_count(&self) -> usize {
        self.kernels.iter().map(UniqueKernel::param_count).sum()
    }

    pub fn output_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.kernels.len(), self.geometry.out_h(), self.geometry.out_w()]
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ConvSaved)> {
        let patches = im2col(input, &self.geometry)?;
        let batch = input.shape()[0];
        let oc = self.kernels.len();
        let spatial = self.geometry.out_h() * self.geometry.out_w();
        let total = self.index.total_terms();
        let idx = &*self.index;
        let mut terms = vec![0.0; patches.n_patches * total];
        let mut per_patch = vec![0.0; patches.n_patches * oc];
        terms
            .par_chunks_mut(total)
            .zip(per_patch.par_chunks_mut(oc))
            .zip(patches.data.par_chunks(patches.patch_len))
            .with_min_len(16)
            .for_each(|((t, o), x)| {
                fill_terms(x, idx, self.order, 0, t);
                for (y, k) in o.iter_mut().zip(&self.kernels) {
                    *y = dot(&k.weights, t) + k.bias;
                }
            });
        let mut out = vec![0.0; batch * oc * spatial];
        for (p, ys) in per_patch.chunks_exact(oc).enumerate() {
            let (b, s) = (p / spatial, p % spatial);
            for (c, &y) in ys.iter().enumerate() {
                out[(b * oc + c) * spatial + s] = y;
            }
        }
        let output = Tensor::new(self.output_shape(batch), out)?;
        Ok((output, ConvSaved { patches, terms, batch }))
    }

    /// Input, weight and bias gradients for `upstream = dE/d(output)`.
    pub fn backward(&self, upstream: &Tensor, saved: &ConvSaved) -> Result<ConvGrads> {
        let oc = self.kernels.len();
        let spatial = self.geometry.out_h() * self.geometry.out_w();
        let total = self.index.total_terms();
        let np = saved.patches.n_patches;
        if upstream.shape() != self.output_shape(saved.batch).as_slice()
            || saved.terms.len() != np * total
            || np != saved.batch * spatial
            || saved.patches.geometry != self.geometry
        {
            return invalid(format!(
                "upstream {:?} and saved state do not match this layer's forward output {:?}",
                upstream.shape(),
                self.output_shape(saved.batch)
            ));
        }
        let up = upstream.data();
        let upstream_at = |p: usize, c: usize| up[((p / spatial) * oc + c) * spatial + p % spatial];

        let mut kernels: Vec<UniqueKernel> = self
            .kernels
            .iter()
            .map(|k| UniqueKernel { n: k.n, offsets: k.offsets.clone(), weights: vec![0.0; k.weights.len()], bias: 0.0 })
            .collect();
        for (p, t) in saved.terms.chunks_exact(total).enumerate() {
            for (c, g) in kernels.iter_mut().enumerate() {
                let u = upstream_at(p, c);
                if u == 0.0 {
                    continue;
                }
                g.bias += u;
                for (gw, &tv) in g.weights.iter_mut().zip(t) {
                    *gw += u * tv;
                }
            }
        }

        let n = self.geometry.patch_len();
        let idx = &*self.index;
        let mut patch_grads = vec![0.0; np * n];
        patch_grads
            .par_chunks_mut(n)
            .zip(saved.terms.par_chunks(total))
            .enumerate()
            .with_min_len(16)
            .for_each_init(
                || vec![0.0; total],
                |term_grads, (p, (dx, t))| {
                    term_grads.iter_mut().for_each(|g| *g = 0.0);
                    for (c, k) in self.kernels.iter().enumerate() {
                        let u = upstream_at(p, c);
                        if u != 0.0 {
                            for (g, &w) in term_grads.iter_mut().zip(&k.weights) {
                                *g += u * w;
                            }
                        }
                    }
                    scatter_term_grads(term_grads, t, idx, self.order, dx);
                },
            );
        let patch_grads = PatchMatrix::new(self.geometry, np, patch_grads)?;
        let input = col2im_accumulate(&patch_grads, &self.geometry, saved.batch)?;
        Ok(ConvGrads { input, kernels })
    }
}

pub fn conv2d_forward(input: &Tensor, layer: &VolterraConvLayer) -> Result<(Tensor, ConvSaved)> {
    layer.forward(input)
}

pub fn conv2d_backward(upstream: &Tensor, saved: &ConvSaved, layer: &VolterraConvLayer) -> Result<ConvGrads> {
    layer.backward(upstream, saved)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::IndexSet;

    #[test]
    fn progressive_terms_small() {
        let idx = IndexSet::build(2, 3).unwrap();
        let c = build_terms_progressive(&[1.0, 2.0], &idx).unwrap();
        assert_eq!(c.order(1), &[1.0, 2.0]);
        assert_eq!(c.order(2), &[1.0, 4.0, 2.0]);
        // FPM^3 rows: [0,0,0], [1,1,1], [0,1,1], [0,0,1].
        assert_eq!(c.order(3), &[1.0, 8.0, 4.0, 2.0]);
        let ones = build_terms_progressive(&[1.0; 2], &idx).unwrap();
        assert!(ones.flat().iter().all(|&v| v == 1.0));
        assert!(build_terms_progressive(&[1.0], &idx).is_err());
    }

    #[test]
    fn forward_examples() {
        let idx = IndexSet::build(2, 2).unwrap();
        let k = UniqueKernel::new(2, vec![vec![1.0, 1.0], vec![1.0, 1.0, 1.0]], 0.0).unwrap();
        assert_eq!(evc_forward(&[1.0, 2.0], &k, &idx).unwrap(), 10.0);
        let mut z = UniqueKernel::zeros(2, 2).unwrap();
        z.bias = 5.0;
        assert_eq!(evc_forward(&[3.0, -4.0], &z, &idx).unwrap(), 5.0);
        assert!(UniqueKernel::new(2, vec![vec![1.0, 1.0], vec![1.0]], 0.0).is_err());
    }

    #[test]
    fn gradient_examples() {
        let idx = IndexSet::build(2, 2).unwrap();
        let k = UniqueKernel::new(2, vec![vec![0.0, 0.0], vec![1.0, 1.0, 1.0]], 0.0).unwrap();
        let cache = build_terms_progressive(&[1.0, 2.0], &idx).unwrap();
        assert_eq!(evc_grad_input(&cache, &k, &idx, 1.0).unwrap(), vec![4.0, 5.0]);

        let lin = UniqueKernel::new(2, vec![vec![0.5, -3.0]], 0.0).unwrap();
        let idx1 = IndexSet::build(2, 1).unwrap();
        let c1 = build_terms_progressive(&[7.0, 8.0], &idx1).unwrap();
        assert_eq!(evc_grad_input(&c1, &lin, &idx1, 2.0).unwrap(), vec![1.0, -6.0]);

        let gw = evc_grad_weights(&cache, 1.0);
        assert_eq!(gw.weights(), cache.flat());
        assert_eq!(gw.bias, 1.0);
        let gz = evc_grad_weights(&cache, 0.0);
        assert!(gz.weights().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_matches_binomial() {
        let k = UniqueKernel::zeros(9, 3).unwrap();
        assert_eq!(k.param_count(), 220);
    }

    #[test]
    fn one_by_one_first_order_is_linear_conv() {
        let g = ConvGeometry::square(2, 2, 2, 1, 0).unwrap();
        let k0 = UniqueKernel::new(2, vec![vec![1.0, 2.0]], 0.5).unwrap();
        let k1 = UniqueKernel::new(2, vec![vec![-1.0, 0.0]], 0.0).unwrap();
        let layer = VolterraConvLayer::from_kernels(g, vec![k0, k1]).unwrap();
        let x = Tensor::new(vec![1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let (y, _) = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        let expect: Vec<f64> = (0..4).map(|s| x.data()[s] + 2.0 * x.data()[4 + s] + 0.5).chain((0..4).map(|s| -x.data()[s])).collect();
        assert_eq!(y.data(), expect.as_slice());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let g = ConvGeometry::square(1, 3, 3, 2, 0).unwrap();
        let layer = VolterraConvLayer::random(g, 2, 2, &mut rand::thread_rng()).unwrap();
        let x = Tensor::new(vec![1, 1, 3, 3], (0..9).map(|v| v as f64 * 0.1).collect()).unwrap();
        let (y, saved) = layer.forward(&x).unwrap();
        let grads = layer.backward(&Tensor::zeros(y.shape().to_vec()).unwrap(), &saved).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.kernels.iter().all(|k| k.bias == 0.0 && k.weights().iter().all(|&v| v == 0.0)));
        let wrong = Tensor::zeros(vec![1, 3, 2, 2]).unwrap();
        assert!(layer.backward(&wrong, &saved).is_err());
    }
}
