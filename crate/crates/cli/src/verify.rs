//! Correctness suites behind `evc verify`.
//!
//! Each suite re-runs one module's invariants against the slow reference
//! computations in `volterra_oracle` and keeps every failing case with what
//! was observed and what was expected.

use std::fmt::{self, Display, Write as _};

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volterra_core::hla::shake_combine;
use volterra_core::index::{count_terms, IndexSet, ProgressiveComputationMatrices};
use volterra_core::{
    build_terms_progressive, build_terms_with_variant, check_pcm_reconstruction, col2im_accumulate,
    embed_unique_weights, evc_forward, evc_grad_input, im2col, tvc_forward, tvc_grad_input, ConvGeometry, DenseKernel,
    HlaConfig, HlaParams, Mode, PatchMatrix, Tensor, UniqueKernel, VolterraConvLayer,
};
use volterra_oracle::{
    central_diff, count_multisets, jacobian_input_grad, max_rel_err, max_rel_err_floor, monomial, multisets, pascal,
    rel_err,
};
use volterra_train::{model_grad_check, Affine, Layer, Model, Stage};

pub const CSV_HEADER: &str = "suite,module,cases,failures,max_error,tolerance,status";

/// Central-difference step for every finite-difference check.
const FD_STEP: f64 = 1e-5;

/// Relative errors of gradients that vanish analytically are measured
/// against at least this scale.
const GRAD_FLOOR: f64 = 1e-4;

/// Failures printed per suite in the text report.
const SHOWN_FAILURES: usize = 10;

/// Deliberate corruptions used to prove the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Points the first gather entry of the n=4, order-3 tables at the wrong input.
    Pcm,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random kernels per `(n, r)` point of the equivalence grids.
    pub cases_per_point: usize,
    pub combine_pairs: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, cases_per_point: 100, combine_pairs: 100_000, fault: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseFailure {
    pub case: String,
    pub observed: String,
    pub expected: String,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub module: &'static str,
    pub cases: usize,
    /// Largest error over all cases; zero for exact suites.
    pub max_error: f64,
    /// Zero for exact suites.
    pub tolerance: f64,
    /// Whether `max_error` is a gradient error.
    pub gradient: bool,
    pub failures: Vec<CaseFailure>,
}

impl SuiteResult {
    fn new(name: &'static str, module: &'static str, tolerance: f64, gradient: bool) -> Self {
        Self { name, module, cases: 0, max_error: 0.0, tolerance, gradient, failures: Vec::new() }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn fail(&mut self, case: impl Into<String>, observed: impl Display, expected: impl Display) {
        self.failures.push(CaseFailure { case: case.into(), observed: observed.to_string(), expected: expected.to_string() });
    }

    /// One case measured against the suite tolerance.
    fn error(&mut self, case: impl FnOnce() -> String, err: f64) {
        self.cases += 1;
        if err.is_nan() {
            self.max_error = f64::NAN;
        } else if !self.max_error.is_nan() {
            self.max_error = self.max_error.max(err);
        }
        if err.is_nan() || err > self.tolerance {
            let tol = self.tolerance;
            self.fail(case(), format!("relative error {err:.3e}"), format!("<= {tol:e}"));
        }
    }

    /// One exact case.
    fn exact<T: PartialEq + fmt::Debug>(&mut self, case: impl FnOnce() -> String, observed: T, expected: T) {
        self.cases += 1;
        if observed != expected {
            self.fail(case(), format!("{observed:?}"), format!("{expected:?}"));
        }
    }

    /// One case that must not return an error.
    fn ok<T, E: Display>(&mut self, case: impl FnOnce() -> String, result: Result<T, E>) -> Option<T> {
        match result {
            Ok(v) => Some(v),
            Err(e) => {
                self.cases += 1;
                self.fail(case(), e, "success");
                None
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn total_cases(&self) -> usize {
        self.suites.iter().map(|s| s.cases).sum()
    }

    pub fn total_failures(&self) -> usize {
        self.suites.iter().map(|s| s.failures.len()).sum()
    }

    pub fn max_gradient_error(&self) -> f64 {
        self.suites.iter().filter(|s| s.gradient).map(|s| s.max_error).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:<20} {:>9} {:>11} {:>9}  status", "suite", "module", "cases", "max_error", "tolerance");
        for s in &self.suites {
            let tol = if s.tolerance == 0.0 { "exact".to_string() } else { format!("{:.0e}", s.tolerance) };
            let status = if s.passed() { "ok".to_string() } else { format!("FAILED ({})", s.failures.len()) };
            let _ = writeln!(out, "{:<24} {:<20} {:>9} {:>11.3e} {:>9}  {status}", s.name, s.module, s.cases, s.max_error, tol);
        }
        for s in self.suites.iter().filter(|s| !s.passed()) {
            for f in s.failures.iter().take(SHOWN_FAILURES) {
                let _ = writeln!(
                    out,
                    "FAIL {} [{}] {}: observed {}, expected {}",
                    s.name, s.module, f.case, f.observed, f.expected
                );
            }
            if s.failures.len() > SHOWN_FAILURES {
                let _ = writeln!(out, "FAIL {} [{}] ... {} more", s.name, s.module, s.failures.len() - SHOWN_FAILURES);
            }
        }
        let _ = writeln!(
            out,
            "suites run: {}, cases: {}, failures: {}, max gradient error: {:.3e}",
            self.suites.len(),
            self.total_cases(),
            self.total_failures(),
            self.max_gradient_error()
        );
        let _ = writeln!(out, "{}", if self.passed() { "verify: OK" } else { "verify: FAILED" });
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for s in &self.suites {
            let _ = writeln!(
                out,
                "{},{},{},{},{:e},{:e},{}",
                s.name,
                s.module,
                s.cases,
                s.failures.len(),
                s.max_error,
                s.tolerance,
                if s.passed() { "pass" } else { "fail" }
            );
        }
        out
    }
}

/// Runs every suite in a fixed order.
pub fn run_all(opts: &VerifyOptions) -> VerifyReport {
    let seed = opts.seed;
    let suites = vec![
        counting(12, 6),
        position_matrices(8, 5),
        pcm_reconstruction(8, 5, opts.fault, seed),
        index_determinism(8, 5),
        forward_equivalence(seed, opts.cases_per_point),
        backward_equivalence(seed, opts.cases_per_point),
        finite_differences(seed, opts.cases_per_point),
        conv_layer_gradients(seed),
        jacobian_cross_check(seed),
        patch_adjoint(seed),
        hla_combine(seed, opts.combine_pairs),
        hla_gradients(seed),
        train_gradients(seed),
    ];
    VerifyReport { suites }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Unique kernel with every weight uniform in `[-1, 1)`, so high orders
/// carry as much weight as low ones.
fn unit_kernel(rng: &mut impl Rng, n: usize, r: usize) -> UniqueKernel {
    let weights = (1..=r).map(|j| uniform(rng, count_terms(n, j).unwrap() as usize)).collect();
    UniqueKernel::new(n, weights, rng.gen_range(-1.0..1.0)).unwrap()
}

/// Brute-force multiset counts against the closed forms.
pub fn counting(n_max: usize, r_max: usize) -> SuiteResult {
    let mut s = SuiteResult::new("counting", "index-gen", 0.0, false);
    for n in 1..=n_max {
        for r in 1..=r_max {
            let Some(got) = s.ok(|| format!("n={n} r={r}"), count_terms(n, r)) else { continue };
            s.exact(|| format!("count_terms n={n} r={r}"), got, count_multisets(n, r));
            let mut total = 1u128;
            for j in 1..=r {
                total += count_terms(n, j).unwrap() as u128;
            }
            s.exact(|| format!("1 + sum of counts n={n} r={r}"), total, pascal(n + r, r));
        }
    }
    s
}

/// Position-matrix rows against filtered enumeration of every tuple.
pub fn position_matrices(n_max: usize, r_max: usize) -> SuiteResult {
    let mut s = SuiteResult::new("position-matrices", "index-gen", 0.0, false);
    for n in 1..=n_max {
        for r in 1..=r_max {
            let Some(idx) = s.ok(|| format!("build n={n} r={r}"), IndexSet::build(n, r)) else { continue };
            let fpm = idx.fpm(r);
            let rows: Vec<Vec<usize>> = fpm.rows().map(<[usize]>::to_vec).collect();
            s.exact(|| format!("n={n} r={r} rows are non-decreasing"), rows.iter().all(|t| t.windows(2).all(|w| w[0] <= w[1])), true);
            let mut sorted = rows.clone();
            sorted.sort();
            sorted.dedup();
            s.exact(|| format!("n={n} r={r} rows are distinct"), sorted.len(), rows.len());
            s.exact(|| format!("n={n} r={r} row set"), sorted, multisets(n, r));
        }
    }
    s
}

fn corrupt(idx: &IndexSet) -> IndexSet {
    let p = idx.pcms(3);
    let mut variants = p.variants().to_vec();
    let e = &mut variants[0][0];
    e.position = (e.position + 1) % idx.n();
    idx.with_pcms(3, ProgressiveComputationMatrices::from_parts(3, idx.n(), variants))
}

/// Every gather table rebuilds its position matrix, and terms built through
/// any table equal the monomials of the position rows.
pub fn pcm_reconstruction(n_max: usize, r_max: usize, fault: Option<Fault>, seed: u64) -> SuiteResult {
    let mut s = SuiteResult::new("pcm-reconstruction", "index-gen", 1e-12, false);
    let mut rng = rng_for(seed, 3);
    for n in 1..=n_max {
        for r in 2..=r_max {
            let Some(mut idx) = s.ok(|| format!("build n={n} r={r}"), IndexSet::build(n, r)) else { continue };
            if fault == Some(Fault::Pcm) && n == 4 && r == 3 {
                idx = corrupt(&idx);
            }
            for j in 2..=r {
                let check = check_pcm_reconstruction(idx.pcms(j), idx.fpm(j - 1), idx.fpm(j));
                s.cases += 1;
                if let Err(e) = check {
                    s.fail(format!("n={n} r={r} order {j}"), e, "every gather row rebuilds its position row");
                }
            }
            let x = uniform(&mut rng, n);
            for v in 0..r {
                let Some(terms) = s.ok(|| format!("n={n} r={r} variant {v}"), build_terms_with_variant(&x, &idx, v)) else {
                    continue;
                };
                for j in 1..=r {
                    let want: Vec<f64> = idx.fpm(j).rows().map(|row| monomial(&x, row)).collect();
                    let err = max_rel_err(terms.order(j), &want);
                    s.error(|| format!("n={n} r={r} variant {v} order-{j} terms"), err);
                }
            }
        }
    }
    s
}

/// Re-generation is byte-identical and the export round-trips.
pub fn index_determinism(n_max: usize, r_max: usize) -> SuiteResult {
    let mut s = SuiteResult::new("index-determinism", "index-gen", 0.0, false);
    for n in 1..=n_max {
        for r in 1..=r_max {
            let (Ok(a), Ok(b)) = (IndexSet::build(n, r), IndexSet::build(n, r)) else {
                s.cases += 1;
                s.fail(format!("n={n} r={r}"), "build error", "success");
                continue;
            };
            let ja = serde_json::to_string(&a.export()).unwrap();
            let jb = serde_json::to_string(&b.export()).unwrap();
            s.exact(|| format!("n={n} r={r} json"), ja == jb, true);
            let back = IndexSet::import(&a.export()).map(|i| i == a);
            s.exact(|| format!("n={n} r={r} import"), back.map_err(|e| e.to_string()), Ok(true));
        }
    }
    s
}

/// Unique-term forward against the dense forward of the embedded kernel,
/// for kernels drawn by the library's initializer.
pub fn forward_equivalence(seed: u64, cases: usize) -> SuiteResult {
    let mut s = SuiteResult::new("forward-equivalence", "volterra-efficient", 1e-12, false);
    let mut rng = rng_for(seed, 5);
    for n in 2..=9 {
        for r in 1..=4 {
            let idx = IndexSet::build(n, r).unwrap();
            for case in 0..cases {
                let k = UniqueKernel::random(n, r, &mut rng).unwrap();
                let x = uniform(&mut rng, n);
                let label = || format!("n={n} r={r} case {case}");
                let Some(evc) = s.ok(label, evc_forward(&x, &k, &idx)) else { continue };
                let Some(tvc) = s.ok(label, embed_unique_weights(&k, idx.fpms()).and_then(|d| tvc_forward(&x, &d))) else {
                    continue;
                };
                s.error(label, rel_err(evc, tvc));
            }
        }
    }
    s
}

fn vector_case(rng: &mut impl Rng, n: usize, r: usize, idx: &IndexSet) -> (UniqueKernel, DenseKernel, Vec<f64>, f64) {
    let k = unit_kernel(rng, n, r);
    let dense = embed_unique_weights(&k, idx.fpms()).unwrap();
    let x = uniform(rng, n);
    (k, dense, x, rng.gen_range(-2.0..2.0))
}

/// Unique-term input gradients against dense input gradients.
pub fn backward_equivalence(seed: u64, cases: usize) -> SuiteResult {
    let mut s = SuiteResult::new("backward-equivalence", "volterra-efficient", 1e-10, true);
    let mut rng = rng_for(seed, 6);
    for n in 2..=9 {
        for r in 1..=4 {
            let idx = IndexSet::build(n, r).unwrap();
            for case in 0..cases {
                let (k, dense, x, u) = vector_case(&mut rng, n, r, &idx);
                let label = || format!("n={n} r={r} case {case}");
                let evc = build_terms_progressive(&x, &idx).and_then(|c| evc_grad_input(&c, &k, &idx, u));
                let Some(evc) = s.ok(label, evc) else { continue };
                let Some(tvc) = s.ok(label, tvc_grad_input(&x, &dense, u)) else { continue };
                s.error(label, max_rel_err(&evc, &tvc));
            }
        }
    }
    s
}

/// Both input gradients against central differences of their forward passes.
pub fn finite_differences(seed: u64, cases: usize) -> SuiteResult {
    let mut s = SuiteResult::new("finite-differences", "volterra-naive", 1e-6, true);
    let mut rng = rng_for(seed, 7);
    for n in 2..=9 {
        for r in 1..=4 {
            let idx = IndexSet::build(n, r).unwrap();
            for case in 0..cases {
                let (k, dense, x, u) = vector_case(&mut rng, n, r, &idx);
                let cache = build_terms_progressive(&x, &idx).unwrap();
                let evc = evc_grad_input(&cache, &k, &idx, u).unwrap();
                let tvc = tvc_grad_input(&x, &dense, u).unwrap();
                let fd_evc = central_diff(|p| u * evc_forward(p, &k, &idx).unwrap(), &x, FD_STEP);
                let fd_tvc = central_diff(|p| u * tvc_forward(p, &dense).unwrap(), &x, FD_STEP);
                s.error(|| format!("EVC n={n} r={r} case {case}"), max_rel_err(&evc, &fd_evc));
                s.error(|| format!("TVC n={n} r={r} case {case}"), max_rel_err(&tvc, &fd_tvc));
            }
        }
    }
    s
}

fn probe_loss(layer: &VolterraConvLayer, x: &Tensor, probe: &[f64]) -> f64 {
    let (y, _) = layer.forward(x).unwrap();
    y.data().iter().zip(probe).map(|(a, b)| a * b).sum()
}

/// Full convolution layer gradients (input, weights, bias) against central
/// differences of `<probe, layer(x)>`.
pub fn conv_layer_gradients(seed: u64) -> SuiteResult {
    let mut s = SuiteResult::new("conv-layer-gradients", "volterra-efficient", 1e-5, true);
    let mut rng = rng_for(seed, 8);
    // (channels, size, kernel, stride, pad, out channels, order)
    let setups = [
        (2, 5, (3, 3), 1, 1, 3, 1),
        (2, 5, (3, 3), 2, 1, 2, 2),
        (1, 6, (2, 3), 1, 0, 2, 3),
        (2, 4, (3, 3), 1, 1, 2, 3),
    ];
    for (c, size, kernel, stride, pad, oc, r) in setups {
        let label = format!("c={c} {size}x{size} k={}x{} stride={stride} pad={pad} oc={oc} r={r}", kernel.0, kernel.1);
        let geom = ConvGeometry::new(c, size, size, kernel, (stride, stride), (pad, pad)).unwrap();
        let mut layer = VolterraConvLayer::random(geom, oc, r, &mut rng).unwrap();
        for k in layer.kernels_mut() {
            k.weights_mut().iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        }
        let x = Tensor::new(vec![2, c, size, size], uniform(&mut rng, 2 * c * size * size)).unwrap();
        let (y, saved) = layer.forward(&x).unwrap();
        let probe = uniform(&mut rng, y.len());
        let grads = layer.backward(&Tensor::new(y.shape().to_vec(), probe.clone()).unwrap(), &saved).unwrap();

        let fd_x = central_diff(
            |p| probe_loss(&layer, &Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap(), &probe),
            x.data(),
            FD_STEP,
        );
        s.error(|| format!("{label} input"), max_rel_err(grads.input.data(), &fd_x));

        for ch in 0..oc {
            let mut params = layer.kernels()[ch].weights().to_vec();
            params.push(layer.kernels()[ch].bias);
            let mut probe_layer = layer.clone();
            let fd = central_diff(
                |p| {
                    let k = &mut probe_layer.kernels_mut()[ch];
                    let (w, b) = k.params_mut();
                    w.copy_from_slice(&p[..p.len() - 1]);
                    *b = p[p.len() - 1];
                    probe_loss(&probe_layer, &x, &probe)
                },
                &params,
                FD_STEP,
            );
            let mut analytic = grads.kernels[ch].weights().to_vec();
            analytic.push(grads.kernels[ch].bias);
            s.error(|| format!("{label} kernel {ch}"), max_rel_err(&analytic, &fd));
        }
    }
    s
}

/// Dense input gradient against the explicit `n^j x n` Jacobian: bitwise on
/// integer data, where every product and sum is exact, and to rounding on
/// real data.
pub fn jacobian_cross_check(seed: u64) -> SuiteResult {
    let mut s = SuiteResult::new("jacobian-cross-check", "volterra-naive", 1e-12, true);
    let mut rng = rng_for(seed, 9);
    for n in 1..=4usize {
        for r in 1..=3 {
            for case in 0..10 {
                let ints = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-3..=3) as f64).collect() };
                let weights: Vec<Vec<f64>> = (1..=r).map(|j| ints(&mut rng, n.pow(j as u32))).collect();
                let k = DenseKernel { n, weights, bias: 0.0 };
                let x = ints(&mut rng, n);
                let got = tvc_grad_input(&x, &k, 1.0).unwrap();
                s.exact(|| format!("integer n={n} r={r} case {case}"), got, jacobian_input_grad(&x, &k.weights, 1.0));

                let weights: Vec<Vec<f64>> = (1..=r).map(|j| uniform(&mut rng, n.pow(j as u32))).collect();
                let k = DenseKernel { n, weights, bias: 0.0 };
                let x = uniform(&mut rng, n);
                let u = rng.gen_range(-2.0..2.0);
                let got = tvc_grad_input(&x, &k, u).unwrap();
                s.error(|| format!("real n={n} r={r} case {case}"), max_rel_err(&got, &jacobian_input_grad(&x, &k.weights, u)));
            }
        }
    }
    s
}

/// `<im2col(x), P> == <x, col2im(P)>` for random `x` and `P`.
pub fn patch_adjoint(seed: u64) -> SuiteResult {
    let mut s = SuiteResult::new("patch-adjoint", "tensor-core", 1e-12, false);
    let mut rng = rng_for(seed, 10);
    let setups = [(1, 5, 5, (3, 3), (1, 1), (1, 1)), (3, 7, 6, (3, 2), (2, 1), (1, 0)), (2, 8, 8, (5, 5), (3, 3), (2, 2))];
    for (c, h, w, kernel, stride, pad) in setups {
        let geom = ConvGeometry::new(c, h, w, kernel, stride, pad).unwrap();
        for batch in 1..=3 {
            let x = Tensor::new(vec![batch, c, h, w], uniform(&mut rng, batch * c * h * w)).unwrap();
            let cols = im2col(&x, &geom).unwrap();
            let p = PatchMatrix::new(geom, cols.n_patches, uniform(&mut rng, cols.data.len())).unwrap();
            let back = col2im_accumulate(&p, &geom, batch).unwrap();
            let lhs: f64 = cols.data.iter().zip(&p.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
            s.error(|| format!("c={c} {h}x{w} k={kernel:?} stride={stride:?} pad={pad:?} batch={batch}"), rel_err(lhs, rhs));
        }
    }
    s
}

/// The combined attention lies strictly between the larger input and one.
pub fn hla_combine(seed: u64, pairs: usize) -> SuiteResult {
    let mut s = SuiteResult::new("hla-combine", "hla-block", 0.0, false);
    let mut rng = rng_for(seed, 11);
    for case in 0..pairs {
        let a: f64 = rng.sample(Open01);
        let b: f64 = rng.sample(Open01);
        let y = shake_combine(a, b);
        s.cases += 1;
        if !(y > a.max(b) && y < 1.0) {
            s.fail(format!("pair {case} a={a:e} b={b:e}"), y, format!("in ({:e}, 1)", a.max(b)));
        }
    }
    s
}

fn hla_probe_loss(p: &HlaParams, x: &Tensor, probe: &[f64], mode: Mode) -> f64 {
    let (y, _) = p.forward(x, mode).unwrap();
    y.data().iter().zip(probe).map(|(a, b)| a * b).sum()
}

/// Attention block at batch 2, 8 channels, 8x8: every input coordinate and
/// up to 64 coordinates of each parameter buffer against central differences.
pub fn hla_gradients(seed: u64) -> SuiteResult {
    let mut s = SuiteResult::new("hla-gradients", "hla-block", 1e-5, true);
    let mut rng = rng_for(seed, 12);
    let setups = [
        (HlaConfig { channels: 8, reduction_ratio: 4, use_input_batchnorm: false }, Mode::Train),
        (HlaConfig { channels: 8, reduction_ratio: 2, use_input_batchnorm: true }, Mode::Eval),
    ];
    for (config, mode) in setups {
        let label = format!("c=8 ratio={} input_bn={} {mode:?}", config.reduction_ratio, config.use_input_batchnorm);
        let (b, c, h, w) = (2, config.channels, 8, 8);
        let mut params = HlaParams::random(config, h, w, &mut rng).unwrap();
        // Zero biases put every SE coefficient on the clamp's kink.
        params.se_reduce_b.iter_mut().chain(&mut params.se_expand_b).for_each(|v| *v = rng.gen_range(-0.5..0.5));
        if mode == Mode::Eval {
            for bn in std::iter::once(&mut params.bn).chain(params.input_bn.as_mut()) {
                bn.running_mean.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
                bn.running_var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
            }
        }
        let len = b * c * h * w;
        let x = Tensor::new(vec![b, c, h, w], uniform(&mut rng, len)).unwrap();
        let probe = uniform(&mut rng, len);
        let (_, saved) = params.forward(&x, mode).unwrap();
        let (dx, grads) = params.backward(&Tensor::new(x.shape().to_vec(), probe.clone()).unwrap(), &saved).unwrap();

        let fd_x = central_diff(
            |p| hla_probe_loss(&params, &Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap(), &probe, mode),
            x.data(),
            FD_STEP,
        );
        s.error(|| format!("{label} input"), max_rel_err_floor(dx.data(), &fd_x, GRAD_FLOOR));

        for (bi, grad) in grads.into_buffers().iter().enumerate() {
            let coords: Vec<usize> =
                if grad.len() <= 64 { (0..grad.len()).collect() } else { (0..64).map(|_| rng.gen_range(0..grad.len())).collect() };
            let mut p = params.clone();
            let numeric: Vec<f64> = coords
                .iter()
                .map(|&i| {
                    let orig = p.params_mut()[bi][i];
                    p.params_mut()[bi][i] = orig + FD_STEP;
                    let up = hla_probe_loss(&p, &x, &probe, mode);
                    p.params_mut()[bi][i] = orig - FD_STEP;
                    let down = hla_probe_loss(&p, &x, &probe, mode);
                    p.params_mut()[bi][i] = orig;
                    (up - down) / (2.0 * FD_STEP)
                })
                .collect();
            let analytic: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
            s.error(|| format!("{label} parameter buffer {bi}"), max_rel_err_floor(&analytic, &numeric, GRAD_FLOOR));
        }
    }
    s
}

/// Tape gradients of small classifiers against central differences of the
/// mean cross-entropy.
pub fn train_gradients(seed: u64) -> SuiteResult {
    let mut s = SuiteResult::new("train-gradients", "autograd-train", 1e-5, true);
    let mut rng = rng_for(seed, 13);
    let input = |rng: &mut ChaCha8Rng, shape: Vec<usize>| {
        let len = shape.iter().product();
        Tensor::new(shape, uniform(rng, len)).unwrap()
    };

    let geom = ConvGeometry::new(2, 4, 4, (3, 3), (2, 2), (1, 1)).unwrap();
    let conv = VolterraConvLayer::random(geom, 3, 2, &mut rng).unwrap();
    let conv_model = Model::new(
        vec![Layer::Conv(conv), Layer::Affine(Affine::random(3, 2, &mut rng))],
        vec![Stage::Layer(0), Stage::Relu, Stage::GlobalAvgPool, Stage::Layer(1)],
    )
    .unwrap();
    let x = input(&mut rng, vec![2, 2, 4, 4]);
    let err = model_grad_check(&conv_model, &x, &[1, 0], Mode::Train, FD_STEP);
    if let Some(e) = s.ok(|| "conv classifier".into(), err) {
        s.error(|| "conv classifier".into(), e);
    }

    let cfg = HlaConfig { channels: 4, reduction_ratio: 2, use_input_batchnorm: true };
    let mut hla = HlaParams::random(cfg, 3, 3, &mut rng).unwrap();
    hla.se_reduce_b.iter_mut().chain(&mut hla.se_expand_b).for_each(|v| *v = rng.gen_range(-0.5..0.5));
    let hla_model = Model::new(
        vec![Layer::Hla(hla), Layer::Affine(Affine::random(4, 3, &mut rng))],
        vec![Stage::Layer(0), Stage::GlobalAvgPool, Stage::Layer(1)],
    )
    .unwrap();
    let x = input(&mut rng, vec![3, 4, 3, 3]);
    for mode in [Mode::Train, Mode::Eval] {
        let err = model_grad_check(&hla_model, &x, &[0, 1, 2], mode, FD_STEP);
        if let Some(e) = s.ok(|| format!("attention classifier {mode:?}"), err) {
            s.error(|| format!("attention classifier {mode:?}"), e);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(counting(5, 4).passed());
        assert!(position_matrices(4, 4).passed());
        assert!(pcm_reconstruction(5, 4, None, 1).passed());
        assert!(index_determinism(4, 3).passed());
        assert!(forward_equivalence(1, 2).passed());
        assert!(hla_combine(1, 1000).passed());
    }

    #[test]
    fn injected_fault_is_reported() {
        let s = pcm_reconstruction(5, 3, Some(Fault::Pcm), 1);
        assert!(!s.passed());
        assert!(s.failures.iter().all(|f| f.case.starts_with("n=4 r=3")));
    }

    #[test]
    fn report_totals() {
        let mut a = SuiteResult::new("a", "m", 1e-6, true);
        a.error(|| "x".into(), 2e-7);
        a.error(|| "y".into(), 3e-6);
        let b = SuiteResult::new("b", "m", 0.0, false);
        let r = VerifyReport { suites: vec![a, b] };
        assert_eq!(r.total_cases(), 2);
        assert_eq!(r.total_failures(), 1);
        assert_eq!(r.max_gradient_error(), 3e-6);
        assert!(r.to_text().contains("FAIL a [m] y: observed relative error 3.000e-6, expected <= 1e-6"));
        assert_eq!(r.to_csv().lines().nth(1), Some("a,m,2,1,3e-6,1e-6,fail"));
    }
}
