//! Slow, obviously-correct reference computations.
//!
//! Nothing here depends on the kernel library: enumerations walk every
//! `n^r` tuple, the dense filter is evaluated as nested sums, and gradients
//! come from an explicit Jacobian or from central differences. Inputs and
//! outputs are plain slices and vectors.

/// Visits every tuple in `{0..n}^r` in row-major order.
pub fn for_each_tuple(n: usize, r: usize, mut f: impl FnMut(&[usize])) {
    if n == 0 {
        return;
    }
    let mut t = vec![0usize; r];
    loop {
        f(&t);
        let mut pos = r;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            t[pos] += 1;
            if t[pos] < n {
                break;
            }
            t[pos] = 0;
        }
    }
}

/// All non-decreasing `r`-tuples over `0..n`, by filtering every tuple.
pub fn multisets(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for_each_tuple(n, r, |t| {
        if t.windows(2).all(|w| w[0] <= w[1]) {
            out.push(t.to_vec());
        }
    });
    out
}

/// All strictly increasing `j`-tuples over `0..n`, by filtering every tuple.
pub fn strict_tuples(n: usize, j: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for_each_tuple(n, j, |t| {
        if t.windows(2).all(|w| w[0] < w[1]) {
            out.push(t.to_vec());
        }
    });
    out
}

/// Number of non-decreasing tuples, counted one by one.
pub fn count_multisets(n: usize, r: usize) -> u64 {
    let mut count = 0;
    for_each_tuple(n, r, |t| {
        if t.windows(2).all(|w| w[0] <= w[1]) {
            count += 1;
        }
    });
    count
}

/// Binomial coefficient from Pascal's triangle.
pub fn pascal(m: usize, k: usize) -> u128 {
    if k > m {
        return 0;
    }
    let mut row = vec![1u128];
    for _ in 0..m {
        let mut next = vec![1u128; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    row[k]
}

pub fn monomial(x: &[f64], tuple: &[usize]) -> f64 {
    tuple.iter().map(|&i| x[i]).product()
}

/// Dense filter as nested sums over every index tuple:
/// `sum_j sum_{i1..ij} W_j[i1..ij] x[i1]..x[ij] + bias`, with `W_j`
/// row-major of length `n^j`.
pub fn dense_forward(x: &[f64], weights: &[Vec<f64>], bias: f64) -> f64 {
    let n = x.len();
    let mut y = bias;
    for (j, w) in weights.iter().enumerate() {
        let mut flat = 0;
        for_each_tuple(n, j + 1, |t| {
            y += w[flat] * monomial(x, t);
            flat += 1;
        });
    }
    y
}

/// Jacobian of the order-`j` Kronecker term vector with respect to `x`,
/// as an `n^j x n` row-major matrix.
pub fn kronecker_jacobian(x: &[f64], j: usize) -> Vec<f64> {
    let n = x.len();
    let mut jac = Vec::with_capacity(n.pow(j as u32) * n);
    for_each_tuple(n, j, |t| {
        for m in 0..n {
            let mut d = 0.0;
            for k in 0..j {
                if t[k] == m {
                    d += t.iter().enumerate().filter(|&(l, _)| l != k).map(|(_, &i)| x[i]).product::<f64>();
                }
            }
            jac.push(d);
        }
    });
    jac
}

/// Input gradient `upstream * sum_j w_j^T J_j` through explicit Jacobians.
pub fn jacobian_input_grad(x: &[f64], weights: &[Vec<f64>], upstream: f64) -> Vec<f64> {
    let n = x.len();
    let mut grad = vec![0.0; n];
    for (j, w) in weights.iter().enumerate() {
        let jac = kronecker_jacobian(x, j + 1);
        for (row, &wv) in jac.chunks_exact(n).zip(w) {
            for (g, &d) in grad.iter_mut().zip(row) {
                *g += wv * d;
            }
        }
    }
    grad.iter_mut().for_each(|g| *g *= upstream);
    grad
}

/// Central differences of `f` at `p`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, p: &[f64], step: f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            q[i] = p[i] + step;
            let up = f(&q);
            q[i] = p[i] - step;
            let down = f(&q);
            q[i] = p[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Materializes the `n x prev_len` backward matrix by adding `w[k]` at
/// `(position, prev_row)` for every row `k` of every gather table, then
/// multiplies it by the previous-order terms.
pub fn alpha_back_grad(n: usize, tables: &[Vec<(usize, usize)>], w: &[f64], prev_terms: &[f64]) -> Vec<f64> {
    let cols = prev_terms.len();
    let mut alpha = vec![0.0; n * cols];
    for table in tables {
        for (&(pos, prev), &wv) in table.iter().zip(w) {
            alpha[pos * cols + prev] += wv;
        }
    }
    alpha.chunks_exact(cols).map(|row| row.iter().zip(prev_terms).map(|(a, t)| a * t).sum()).collect()
}

/// Receptive field of output pixel `(oy, ox)` of sample `b` in a
/// `[batch, c, h, w]` buffer, channel-major then kernel row then column,
/// zeros outside the image.
#[allow(clippy::too_many_arguments)]
pub fn receptive_field(
    input: &[f64],
    dims: [usize; 4],
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    b: usize,
    oy: usize,
    ox: usize,
) -> Vec<f64> {
    let [_, c, h, w] = dims;
    let mut out = Vec::with_capacity(c * kernel.0 * kernel.1);
    for ch in 0..c {
        for ky in 0..kernel.0 {
            for kx in 0..kernel.1 {
                let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                    out.push(0.0);
                } else {
                    out.push(input[((b * c + ch) * h + iy as usize) * w + ix as usize]);
                }
            }
        }
    }
    out
}

/// `|a - b| / max(|a|, |b|, tiny)`, zero when both are zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Largest elementwise relative error, with the scale taken over the whole
/// vector so near-zero entries do not dominate.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// As [`max_rel_err`], but the scale never drops below `floor`; for
/// gradients that vanish analytically and are pure rounding noise.
pub fn max_rel_err_floor(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(floor, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
