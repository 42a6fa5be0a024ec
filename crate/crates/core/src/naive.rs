//! Dense Volterra filtering over full Kronecker term vectors.
//!
//! This is the reference path: every order-`j` weight tensor holds all `n^j`
//! entries, including the repeated permutations of each product. It is used
//! to check the unique-term implementation and as the benchmark baseline, so
//! an element budget guards every allocation.

use crate::efficient::UniqueKernel;
use crate::error::{invalid, Error, Result};
use crate::index::FullPositionMatrix;

/// Default cap on the total number of Kronecker-term elements.
pub const DEFAULT_ELEMENT_BUDGET: u128 = 100_000_000;

/// Full weight tensors `W^(1) .. W^(r)` (row-major, `n^j` entries each) and a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseKernel {
    pub n: usize,
    pub weights: Vec<Vec<f64>>,
    pub bias: f64,
}

impl DenseKernel {
    pub fn zeros(n: usize, order: usize) -> Result<Self> {
        check_dims(n, order)?;
        let elements = kron_elements(n, order);
        if elements > DEFAULT_ELEMENT_BUDGET {
            return Err(Error::ResourceLimit { requested: elements, budget: DEFAULT_ELEMENT_BUDGET });
        }
        let weights = (1..=order).map(|j| vec![0.0; n.pow(j as u32)]).collect();
        Ok(Self { n, weights, bias: 0.0 })
    }

    pub fn order(&self) -> usize {
        self.weights.len()
    }

    fn validate(&self) -> Result<()> {
        check_dims(self.n, self.order())?;
        for (j, w) in self.weights.iter().enumerate() {
            if w.len() != self.n.pow(j as u32 + 1) {
                return invalid(format!("order-{} weights need {} entries, got {}", j + 1, self.n.pow(j as u32 + 1), w.len()));
            }
        }
        Ok(())
    }
}

fn check_dims(n: usize, order: usize) -> Result<()> {
    if n == 0 || order == 0 {
        return invalid(format!("dense Volterra filter needs n >= 1 and order >= 1, got n={n}, order={order}"));
    }
    Ok(())
}

fn kron_elements(n: usize, order: usize) -> u128 {
    (1..=order as u32).map(|j| (n as u128).saturating_pow(j)).fold(0u128, u128::saturating_add)
}

/// `x_R1 = x`, `x_Rj = x_R(j-1) ⊗ x` (leftmost index slowest).
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerTerms {
    pub terms: Vec<Vec<f64>>,
}

impl KroneckerTerms {
    pub fn order(&self, j: usize) -> &[f64] {
        &self.terms[j - 1]
    }

    /// Allocated bytes across all term buffers.
    pub fn buffer_bytes(&self) -> usize {
        self.terms.iter().map(|t| t.capacity() * std::mem::size_of::<f64>()).sum()
    }
}

pub fn kron_terms(x: &[f64], r: usize) -> Result<KroneckerTerms> {
    kron_terms_with_budget(x, r, DEFAULT_ELEMENT_BUDGET)
}

pub fn kron_terms_with_budget(x: &[f64], r: usize, budget: u128) -> Result<KroneckerTerms> {
    let n = x.len();
    check_dims(n, r)?;
    let requested = kron_elements(n, r);
    if requested > budget {
        return Err(Error::ResourceLimit { requested, budget });
    }
    let mut terms: Vec<Vec<f64>> = Vec::with_capacity(r);
    terms.push(x.to_vec());
    for _ in 1..r {
        let prev = terms.last().unwrap();
        let mut next = Vec::with_capacity(prev.len() * n);
        for &p in prev {
            next.extend(x.iter().map(|&v| p * v));
        }
        terms.push(next);
    }
    Ok(KroneckerTerms { terms })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_input(x: &[f64], k: &DenseKernel) -> Result<()> {
    k.validate()?;
    if x.len() != k.n {
        return invalid(format!("input has length {}, kernel expects {}", x.len(), k.n));
    }
    Ok(())
}

/// `sum_j <W^(j), x_Rj> + b`.
pub fn tvc_forward(x: &[f64], k: &DenseKernel) -> Result<f64> {
    check_input(x, k)?;
    let terms = kron_terms(x, k.order())?;
    Ok(tvc_forward_cached(&terms, k))
}

/// Forward pass over precomputed Kronecker terms.
pub fn tvc_forward_cached(terms: &KroneckerTerms, k: &DenseKernel) -> f64 {
    k.weights.iter().zip(&terms.terms).map(|(w, t)| dot(w, t)).sum::<f64>() + k.bias
}

/// Weight gradients `upstream * x_Rj` shaped like a [`DenseKernel`]; the
/// bias gradient is `upstream`.
pub fn tvc_grad_weights(x: &[f64], upstream: f64, r: usize) -> Result<DenseKernel> {
    let terms = kron_terms(x, r)?;
    Ok(DenseKernel {
        n: x.len(),
        weights: terms.terms.into_iter().map(|t| t.into_iter().map(|v| v * upstream).collect()).collect(),
        bias: upstream,
    })
}

/// Input gradient `upstream * (a_1 + sum_{j>=2} a_j x_R(j-1))`, where `a_j`
/// sums `W^(j)` over every choice of axis moved to the front, reshaped to
/// `n x n^(j-1)`.
///
/// The axis move is done by index arithmetic on the row-major buffer; the
/// `n^j x n` Jacobian is never formed.
pub fn tvc_grad_input(x: &[f64], k: &DenseKernel, upstream: f64) -> Result<Vec<f64>> {
    check_input(x, k)?;
    let n = k.n;
    let r = k.order();
    let terms = if r > 1 { Some(kron_terms(x, r - 1)?) } else { None };
    let mut grad = k.weights[0].clone();
    for j in 2..=r {
        let w = &k.weights[j - 1];
        let prev = terms.as_ref().unwrap().order(j - 1);
        for axis in 0..j {
            // Stride of `axis` in the row-major j-dimensional tensor.
            let stride = n.pow((j - 1 - axis) as u32);
            for (flat, &wv) in w.iter().enumerate() {
                let i = (flat / stride) % n;
                let rest = (flat / (stride * n)) * stride + flat % stride;
                grad[i] += wv * prev[rest];
            }
        }
    }
    grad.iter_mut().for_each(|g| *g *= upstream);
    Ok(grad)
}

/// Dense kernel whose forward pass equals the unique-term kernel's: each
/// unique weight sits at its non-decreasing tuple position, every other
/// permutation of that tuple stays zero.
pub fn embed_unique_weights(uk: &UniqueKernel, fpm_set: &[FullPositionMatrix]) -> Result<DenseKernel> {
    if fpm_set.len() < uk.order() {
        return invalid(format!("kernel of order {} needs {} position matrices, got {}", uk.order(), uk.order(), fpm_set.len()));
    }
    let mut dense = DenseKernel::zeros(uk.n(), uk.order())?;
    dense.bias = uk.bias;
    for j in 1..=uk.order() {
        let fpm = &fpm_set[j - 1];
        let w = uk.order_weights(j);
        if fpm.n() != uk.n() || fpm.order() != j || fpm.n_rows() != w.len() {
            return invalid(format!("position matrix of order {j} does not match the kernel (n={})", uk.n()));
        }
        let target = &mut dense.weights[j - 1];
        for (row, &wv) in fpm.rows().zip(w) {
            let flat = row.iter().fold(0, |acc, &i| acc * uk.n() + i);
            target[flat] = wv;
        }
    }
    Ok(dense)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kronecker_definition() {
        let t = kron_terms(&[1.0, 2.0], 3).unwrap();
        assert_eq!(t.order(1), &[1.0, 2.0]);
        assert_eq!(t.order(2), &[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(t.order(3), &[1.0, 2.0, 2.0, 4.0, 2.0, 4.0, 4.0, 8.0]);
        let s = kron_terms(&[3.0], 4).unwrap();
        assert_eq!(s.terms, vec![vec![3.0], vec![9.0], vec![27.0], vec![81.0]]);
    }

    #[test]
    fn budget_is_enforced() {
        let x = vec![1.0; 100];
        assert!(matches!(kron_terms_with_budget(&x, 3, 1000), Err(Error::ResourceLimit { .. })));
        assert!(matches!(kron_terms(&x, 5), Err(Error::ResourceLimit { .. })));
        assert!(kron_terms(&x, 0).is_err());
        assert!(DenseKernel::zeros(0, 1).is_err());
    }

    #[test]
    fn forward_examples() {
        let k = DenseKernel { n: 2, weights: vec![vec![1.0, 1.0], vec![1.0; 4]], bias: 0.0 };
        assert_eq!(tvc_forward(&[1.0, 2.0], &k).unwrap(), 12.0);
        let mut bias_only = DenseKernel::zeros(3, 2).unwrap();
        bias_only.bias = 7.0;
        assert_eq!(tvc_forward(&[0.3, -2.0, 9.0], &bias_only).unwrap(), 7.0);
        let linear = DenseKernel { n: 3, weights: vec![vec![1.0, -2.0, 0.5]], bias: 0.25 };
        assert_eq!(tvc_forward(&[2.0, 1.0, 4.0], &linear).unwrap(), 2.0 - 2.0 + 2.0 + 0.25);
        assert!(tvc_forward(&[1.0], &k).is_err());
    }

    #[test]
    fn weight_gradient_examples() {
        let g = tvc_grad_weights(&[1.0, 2.0], 1.0, 2).unwrap();
        assert_eq!(g.weights[1], vec![1.0, 2.0, 2.0, 4.0]);
        assert_eq!(g.bias, 1.0);
        let z = tvc_grad_weights(&[1.0, 2.0], 0.0, 3).unwrap();
        assert!(z.weights.iter().flatten().all(|&v| v == 0.0));
        let c = tvc_grad_weights(&[3.0], 2.0, 3).unwrap();
        assert_eq!(c.weights[2], vec![54.0]);
    }

    #[test]
    fn input_gradient_examples() {
        let linear = DenseKernel { n: 3, weights: vec![vec![1.0, -2.0, 0.5]], bias: 0.0 };
        assert_eq!(tvc_grad_input(&[9.0, 9.0, 9.0], &linear, 2.0).unwrap(), vec![2.0, -4.0, 1.0]);

        // Symmetric W2: gradient is W1 + 2 W2 x.
        let k = DenseKernel { n: 2, weights: vec![vec![1.0, -1.0], vec![2.0, 3.0, 3.0, -1.0]], bias: 0.0 };
        let x = [0.5, 2.0];
        let expect = [1.0 + 2.0 * (2.0 * 0.5 + 3.0 * 2.0), -1.0 + 2.0 * (3.0 * 0.5 - 1.0 * 2.0)];
        let got = tvc_grad_input(&x, &k, 1.5).unwrap();
        for (g, e) in got.iter().zip(expect) {
            assert!((g - 1.5 * e).abs() < 1e-12);
        }
    }
}
