//! Speed and term-storage benchmarks of the unique-term (EVC) filter
//! against the dense Kronecker (TVC) baseline.
//!
//! The speed workload filters `batch x channels` vectors of length
//! `kh * kw` with `out_channels` kernels, the way a Volterra convolution
//! treats each input channel's patches. The space sweep uses the full patch
//! length `kh * kw * channels`.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use volterra_core::efficient::scatter_term_grads;
use volterra_core::index::{count_terms, IndexSet};
use volterra_core::naive::{kron_terms, DEFAULT_ELEMENT_BUDGET};
use volterra_core::{build_terms_progressive, embed_unique_weights, tvc_grad_input, DenseKernel, Error, UniqueKernel};

pub const SPEED_CSV_HEADER: &str = "impl,phase,order,n,batch,channels,median_ns,theory_ops,threads,status";

pub const SPACE_CSV_HEADER: &str = "order,n,kernel,channels,evc_terms,tvc_terms,evc_terms_total,tvc_terms_total,\
evc_bytes,tvc_bytes,evc_theory_bytes,tvc_theory_bytes,ratio,index_bytes,status";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub orders: Vec<usize>,
    pub kernel_sizes: Vec<(usize, usize)>,
    pub channels: usize,
    pub out_channels: usize,
    pub batch: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// 1 runs the kernels on the calling thread; more splits the vectors
    /// across the rayon pool.
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            orders: vec![1, 2, 3, 4],
            kernel_sizes: vec![(3, 3)],
            channels: 10,
            out_channels: 10,
            batch: 10,
            repetitions: 5,
            warmup: 1,
            threads: 1,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.repetitions < 3 {
            return bad(format!("repetitions must be at least 3, got {}", self.repetitions));
        }
        if self.warmup < 1 {
            return bad(format!("warmup must be at least 1, got {}", self.warmup));
        }
        if self.orders.is_empty() || self.orders.contains(&0) {
            return bad(format!("orders must be a non-empty list of positive integers, got {:?}", self.orders));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|&(h, w)| h == 0 || w == 0) {
            return bad(format!("kernel sizes must be non-empty and positive, got {:?}", self.kernel_sizes));
        }
        if self.channels == 0 || self.out_channels == 0 || self.batch == 0 || self.threads == 0 {
            return bad("channels, out_channels, batch and threads must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Impl {
    Tvc,
    Evc,
}

impl Impl {
    pub fn name(self) -> &'static str {
        match self {
            Impl::Tvc => "tvc",
            Impl::Evc => "evc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedRow {
    pub implementation: Impl,
    pub phase: Phase,
    pub order: usize,
    pub n: usize,
    pub batch: usize,
    pub channels: usize,
    /// `None` when the run was skipped.
    pub median_ns: Option<u128>,
    pub theory_ops: u128,
    pub threads: usize,
}

impl SpeedRow {
    pub fn csv(&self) -> String {
        let (median, status) = match self.median_ns {
            Some(ns) => (ns.to_string(), "ok"),
            None => (String::new(), "skipped"),
        };
        format!(
            "{},{},{},{},{},{},{median},{},{},{status}",
            self.implementation.name(),
            self.phase.name(),
            self.order,
            self.n,
            self.batch,
            self.channels,
            self.theory_ops,
            self.threads
        )
    }
}

/// `sum_j C(n+j-1, j)`: unique terms through order `r`.
pub fn evc_theory_ops(n: usize, r: usize) -> u128 {
    (1..=r).map(|j| count_terms(n, j).map_or(u128::MAX, u128::from)).fold(0, u128::saturating_add)
}

/// `sum_j n^j`: Kronecker terms through order `r`.
pub fn tvc_theory_ops(n: usize, r: usize) -> u128 {
    (1..=r as u32).map(|j| (n as u128).saturating_pow(j)).fold(0, u128::saturating_add)
}

/// Elements held by an index set: each order-`j` row stores `j` positions
/// in the position matrix plus `j` two-field gather entries.
fn index_elements(n: usize, r: usize) -> u128 {
    (1..=r).map(|j| count_terms(n, j).map_or(u128::MAX, |c| (c as u128).saturating_mul(3 * j as u128))).fold(0, u128::saturating_add)
}

/// Fails with a resource-limit error when the index set for `(n, r)` would
/// exceed the default element budget.
pub fn check_index_budget(n: usize, r: usize) -> Result<(), Error> {
    let requested = index_elements(n, r);
    if requested > DEFAULT_ELEMENT_BUDGET {
        return Err(Error::ResourceLimit { requested, budget: DEFAULT_ELEMENT_BUDGET });
    }
    Ok(())
}

fn median(mut samples: Vec<u128>) -> u128 {
    samples.sort_unstable();
    let mid = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        (samples[mid - 1] + samples[mid]) / 2
    }
}

/// Runs `f` `warmup` times untimed, then `repetitions` times timed, and
/// returns the median in nanoseconds.
fn time_median(warmup: usize, repetitions: usize, mut f: impl FnMut()) -> u128 {
    for _ in 0..warmup {
        f();
    }
    let samples = (0..repetitions)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos()
        })
        .collect();
    median(samples)
}

/// Identical random kernels and data for both implementations.
struct Workload {
    n: usize,
    order: usize,
    vectors: Vec<Vec<f64>>,
    /// `vectors.len() x out_channels` upstream gradients.
    upstream: Vec<Vec<f64>>,
    unique: Vec<UniqueKernel>,
    idx: IndexSet,
}

impl Workload {
    fn new(cfg: &BenchConfig, n: usize, order: usize, rng: &mut ChaCha8Rng) -> Result<Self, Error> {
        check_index_budget(n, order)?;
        let idx = IndexSet::build(n, order)?;
        let count = cfg.batch * cfg.channels;
        let mut uniform = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let vectors = (0..count).map(|_| uniform(n)).collect();
        let upstream = (0..count).map(|_| uniform(cfg.out_channels)).collect();
        let unique = (0..cfg.out_channels)
            .map(|_| {
                let weights = (1..=order).map(|j| uniform(count_terms(n, j).unwrap() as usize)).collect();
                UniqueKernel::new(n, weights, uniform(1)[0])
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { n, order, vectors, upstream, unique, idx })
    }

    /// Dense kernels with the same outputs, within the element budget.
    fn dense(&self) -> Result<Vec<DenseKernel>, Error> {
        let per_kernel = tvc_theory_ops(self.n, self.order);
        let requested = per_kernel.saturating_mul(self.unique.len() as u128 + 2);
        if requested > DEFAULT_ELEMENT_BUDGET {
            return Err(Error::ResourceLimit { requested, budget: DEFAULT_ELEMENT_BUDGET });
        }
        self.unique.iter().map(|k| embed_unique_weights(k, self.idx.fpms())).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn evc_forward_one(w: &Workload, x: &[f64], out: &mut [f64]) {
    let cache = build_terms_progressive(x, &w.idx).unwrap();
    for (y, k) in out.iter_mut().zip(&w.unique) {
        *y = dot(k.weights(), cache.flat()) + k.bias;
    }
}

fn tvc_forward_one(dense: &[DenseKernel], r: usize, x: &[f64], out: &mut [f64]) {
    let terms = kron_terms(x, r).unwrap();
    for (y, k) in out.iter_mut().zip(dense) {
        *y = k.weights.iter().zip(&terms.terms).map(|(wj, tj)| dot(wj, tj)).sum::<f64>() + k.bias;
    }
}

/// Weight gradients (flat, per output channel) and the input gradient of
/// one vector; terms are rebuilt from the input.
fn evc_backward_one(w: &Workload, x: &[f64], u: &[f64], grads: &mut [Vec<f64>], dx: &mut [f64]) {
    let cache = build_terms_progressive(x, &w.idx).unwrap();
    let terms = cache.flat();
    let mut term_grads = vec![0.0; terms.len()];
    for ((g, k), &uc) in grads.iter_mut().zip(&w.unique).zip(u) {
        for ((gv, &t), (tg, &wv)) in g.iter_mut().zip(terms).zip(term_grads.iter_mut().zip(k.weights())) {
            *gv += uc * t;
            *tg += uc * wv;
        }
    }
    dx.iter_mut().for_each(|v| *v = 0.0);
    scatter_term_grads(&term_grads, terms, &w.idx, w.order, dx);
}

fn tvc_backward_one(dense: &[DenseKernel], r: usize, x: &[f64], u: &[f64], grads: &mut [Vec<f64>], dx: &mut [f64]) {
    let terms = kron_terms(x, r).unwrap();
    let mut combined = DenseKernel { n: x.len(), weights: terms.terms.iter().map(|t| vec![0.0; t.len()]).collect(), bias: 0.0 };
    for ((g, k), &uc) in grads.iter_mut().zip(dense).zip(u) {
        let mut off = 0;
        for ((tj, wj), cj) in terms.terms.iter().zip(&k.weights).zip(&mut combined.weights) {
            for ((gv, &t), (c, &wv)) in g[off..off + tj.len()].iter_mut().zip(tj).zip(cj.iter_mut().zip(wj)) {
                *gv += uc * t;
                *c += uc * wv;
            }
            off += tj.len();
        }
    }
    dx.copy_from_slice(&tvc_grad_input(x, &combined, 1.0).unwrap());
}

/// Applies `run` to every vector, on the calling thread or split across the
/// pool, and returns the summed per-kernel gradients.
fn for_vectors<F>(w: &Workload, grad_len: usize, channels: usize, threads: usize, run: F) -> Vec<Vec<f64>>
where
    F: Fn(&[f64], &[f64], &mut [Vec<f64>], &mut [f64]) + Sync,
{
    let local = |range: std::ops::Range<usize>| {
        let mut grads = vec![vec![0.0; grad_len]; channels];
        let mut dx = vec![0.0; w.n];
        for i in range {
            run(&w.vectors[i], &w.upstream[i], &mut grads, &mut dx);
        }
        grads
    };
    let count = w.vectors.len();
    if threads <= 1 {
        return local(0..count);
    }
    let chunk = count.div_ceil(threads);
    (0..threads)
        .into_par_iter()
        .map(|t| local((t * chunk).min(count)..((t + 1) * chunk).min(count)))
        .reduce(
            || vec![vec![0.0; grad_len]; channels],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
                }
                a
            },
        )
}

fn forward_all<F>(w: &Workload, channels: usize, threads: usize, run: F) -> Vec<f64>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let mut out = vec![0.0; w.vectors.len() * channels];
    if threads <= 1 {
        for (x, y) in w.vectors.iter().zip(out.chunks_exact_mut(channels)) {
            run(x, y);
        }
    } else {
        out.par_chunks_mut(channels).zip(w.vectors.par_iter()).for_each(|(y, x)| run(x, y));
    }
    out
}

/// Median wall time of both implementations and phases for every
/// `(order, kernel)` pair. Dense runs past the element budget are reported
/// as skipped rows.
pub fn bench_speed(cfg: &BenchConfig) -> Result<Vec<SpeedRow>, Error> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &(kh, kw) in &cfg.kernel_sizes {
        for &r in &cfg.orders {
            let n = kh * kw;
            let row = |implementation, phase, median_ns| SpeedRow {
                implementation,
                phase,
                order: r,
                n,
                batch: cfg.batch,
                channels: cfg.channels,
                median_ns,
                theory_ops: match implementation {
                    Impl::Tvc => tvc_theory_ops(n, r),
                    Impl::Evc => evc_theory_ops(n, r),
                },
                threads: cfg.threads,
            };
            let w = match Workload::new(cfg, n, r, &mut rng) {
                Ok(w) => w,
                Err(Error::ResourceLimit { .. }) => {
                    for i in [Impl::Tvc, Impl::Evc] {
                        for p in [Phase::Forward, Phase::Backward] {
                            rows.push(row(i, p, None));
                        }
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            let oc = cfg.out_channels;
            let th = cfg.threads;
            let dense = match w.dense() {
                Ok(d) => Some(d),
                Err(Error::ResourceLimit { .. }) => None,
                Err(e) => return Err(e),
            };
            let tvc_fwd = dense.as_ref().map(|d| {
                time_median(cfg.warmup, cfg.repetitions, || {
                    std::hint::black_box(forward_all(&w, oc, th, |x, y| tvc_forward_one(d, r, x, y)));
                })
            });
            let evc_fwd = time_median(cfg.warmup, cfg.repetitions, || {
                std::hint::black_box(forward_all(&w, oc, th, |x, y| evc_forward_one(&w, x, y)));
            });
            let tvc_len = tvc_theory_ops(n, r) as usize;
            let tvc_bwd = dense.as_ref().map(|d| {
                time_median(cfg.warmup, cfg.repetitions, || {
                    std::hint::black_box(for_vectors(&w, tvc_len, oc, th, |x, u, g, dx| tvc_backward_one(d, r, x, u, g, dx)));
                })
            });
            let evc_len = w.idx.total_terms();
            let evc_bwd = time_median(cfg.warmup, cfg.repetitions, || {
                std::hint::black_box(for_vectors(&w, evc_len, oc, th, |x, u, g, dx| evc_backward_one(&w, x, u, g, dx)));
            });
            rows.push(row(Impl::Tvc, Phase::Forward, tvc_fwd));
            rows.push(row(Impl::Evc, Phase::Forward, Some(evc_fwd)));
            rows.push(row(Impl::Tvc, Phase::Backward, tvc_bwd));
            rows.push(row(Impl::Evc, Phase::Backward, Some(evc_bwd)));
        }
    }
    Ok(rows)
}

pub fn speed_csv(rows: &[SpeedRow]) -> String {
    let mut out = format!("{SPEED_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceRow {
    pub order: usize,
    pub n: usize,
    pub kernel: (usize, usize),
    pub channels: usize,
    /// Terms of the highest order alone.
    pub evc_terms: u128,
    pub tvc_terms: u128,
    /// Terms of orders `1..=order`.
    pub evc_terms_total: u128,
    pub tvc_terms_total: u128,
    /// Allocated bytes of the term buffers; `None` when skipped.
    pub evc_bytes: Option<usize>,
    pub tvc_bytes: Option<usize>,
    pub index_bytes: Option<usize>,
}

impl SpaceRow {
    /// Unique over Kronecker term totals.
    pub fn ratio(&self) -> f64 {
        self.evc_terms_total as f64 / self.tvc_terms_total as f64
    }

    pub fn status(&self) -> &'static str {
        match (self.evc_bytes, self.tvc_bytes) {
            (Some(_), Some(_)) => "ok",
            (Some(_), None) => "tvc-skipped",
            (None, Some(_)) => "evc-skipped",
            (None, None) => "skipped",
        }
    }

    pub fn csv(&self) -> String {
        let opt = |v: Option<usize>| v.map_or(String::new(), |b| b.to_string());
        format!(
            "{},{},{}x{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.order,
            self.n,
            self.kernel.0,
            self.kernel.1,
            self.channels,
            self.evc_terms,
            self.tvc_terms,
            self.evc_terms_total,
            self.tvc_terms_total,
            opt(self.evc_bytes),
            opt(self.tvc_bytes),
            self.evc_terms_total.saturating_mul(8),
            self.tvc_terms_total.saturating_mul(8),
            self.ratio(),
            opt(self.index_bytes),
            self.status()
        )
    }
}

/// Term storage of one input patch of length `kh * kw * channels` for every
/// `(order, kernel)` pair, measured from the allocated term buffers.
pub fn bench_space(cfg: &BenchConfig) -> Result<Vec<SpaceRow>, Error> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &(kh, kw) in &cfg.kernel_sizes {
        for &r in &cfg.orders {
            let n = kh * kw * cfg.channels;
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (evc_bytes, index_bytes) = match check_index_budget(n, r) {
                Ok(()) => {
                    let idx = IndexSet::build(n, r)?;
                    let cache = build_terms_progressive(&x, &idx)?;
                    (Some(cache.buffer_bytes()), Some(idx.pcm_bytes()))
                }
                Err(Error::ResourceLimit { .. }) => (None, None),
                Err(e) => return Err(e),
            };
            let tvc_bytes = match kron_terms(&x, r) {
                Ok(t) => Some(t.buffer_bytes()),
                Err(Error::ResourceLimit { .. }) => None,
                Err(e) => return Err(e),
            };
            rows.push(SpaceRow {
                order: r,
                n,
                kernel: (kh, kw),
                channels: cfg.channels,
                evc_terms: count_terms(n, r).map_or(u128::MAX, u128::from),
                tvc_terms: (n as u128).saturating_pow(r as u32),
                evc_terms_total: evc_theory_ops(n, r),
                tvc_terms_total: tvc_theory_ops(n, r),
                evc_bytes,
                tvc_bytes,
                index_bytes,
            });
        }
    }
    Ok(rows)
}

pub fn space_csv(rows: &[SpaceRow]) -> String {
    let mut out = format!("{SPACE_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig { orders: vec![1, 2, 3], channels: 2, out_channels: 2, batch: 2, repetitions: 3, ..Default::default() }
    }

    #[test]
    fn theory_columns() {
        assert_eq!(evc_theory_ops(9, 3), 9 + 45 + 165);
        assert_eq!(tvc_theory_ops(9, 3), 9 + 81 + 729);
        assert_eq!(evc_theory_ops(4, 1), tvc_theory_ops(4, 1));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![5, 1, 3]), 3);
        assert_eq!(median(vec![4, 1, 3, 2]), 2);
    }

    #[test]
    fn validation() {
        assert!(BenchConfig { repetitions: 2, ..small() }.validate().is_err());
        assert!(BenchConfig { warmup: 0, ..small() }.validate().is_err());
        assert!(BenchConfig { orders: vec![], ..small() }.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn speed_rows_cover_every_pair() {
        let rows = bench_speed(&small()).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().all(|r| r.median_ns.is_some()));
        let threaded = bench_speed(&BenchConfig { threads: 2, ..small() }).unwrap();
        assert!(threaded.iter().all(|r| r.threads == 2));
    }

    #[test]
    fn both_implementations_compute_the_same_thing() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Workload::new(&cfg, 9, 3, &mut rng).unwrap();
        let dense = w.dense().unwrap();
        let a = forward_all(&w, 2, 1, |x, y| evc_forward_one(&w, x, y));
        let b = forward_all(&w, 2, 1, |x, y| tvc_forward_one(&dense, 3, x, y));
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
        let mut dx_e = vec![0.0; 9];
        let mut dx_t = vec![0.0; 9];
        let mut ge = vec![vec![0.0; w.idx.total_terms()]; 2];
        let mut gt = vec![vec![0.0; 9 + 81 + 729]; 2];
        evc_backward_one(&w, &w.vectors[0], &w.upstream[0], &mut ge, &mut dx_e);
        tvc_backward_one(&dense, 3, &w.vectors[0], &w.upstream[0], &mut gt, &mut dx_t);
        for (p, q) in dx_e.iter().zip(&dx_t) {
            assert!((p - q).abs() <= 1e-10);
        }
    }

    #[test]
    fn oversized_dense_runs_are_skipped() {
        // 25^5 Kronecker terms times 12 dense buffers is past the budget.
        let cfg = BenchConfig { orders: vec![5], kernel_sizes: vec![(5, 5)], channels: 1, out_channels: 10, batch: 1, ..small() };
        let rows = bench_speed(&cfg).unwrap();
        let tvc: Vec<_> = rows.iter().filter(|r| r.implementation == Impl::Tvc).collect();
        assert!(tvc.iter().all(|r| r.median_ns.is_none() && r.csv().ends_with(",skipped")));
        assert!(rows.iter().filter(|r| r.implementation == Impl::Evc).all(|r| r.median_ns.is_some()));
    }

    #[test]
    fn space_rows() {
        let cfg = BenchConfig { orders: vec![1, 2, 3], kernel_sizes: vec![(5, 5)], channels: 1, ..small() };
        let rows = bench_space(&cfg).unwrap();
        assert_eq!(rows[2].evc_terms, 2925);
        assert_eq!(rows[2].tvc_terms, 15625);
        assert_eq!(rows[0].ratio(), 1.0);
        assert!(rows.windows(2).all(|w| w[1].ratio() < w[0].ratio()));
        assert_eq!(rows[2].evc_bytes, Some((25 + 325 + 2925) * 8));
        assert_eq!(rows[2].csv().split(',').count(), SPACE_CSV_HEADER.split(',').count());
    }
}
