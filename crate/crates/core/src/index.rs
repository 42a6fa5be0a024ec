//! Position matrices for unique higher-order terms.
//!
//! A term of order `r` over an input of length `n` is a product
//! `x[i1] * x[i2] * ... * x[ir]` with `i1 <= i2 <= ... <= ir`. The structures
//! here enumerate those index tuples and the tables that build order-`r`
//! terms from order-`r-1` terms with a single gathered multiply:
//!
//! * [`NoIdenticalPositionMatrix`]: strictly increasing `j`-tuples, built by
//!   repeatedly shifting the last column and dropping rows that run off the
//!   end of the input.
//! * [`TotalRepeatingMatrices`]: ordered compositions of `r`; each one says
//!   how many times to repeat each column of a no-identical matrix.
//! * [`FullPositionMatrix`]: every non-decreasing `r`-tuple exactly once.
//! * [`ProgressiveComputationMatrices`]: `r` gather tables pairing a raw
//!   input position with a row of the order-`r-1` full matrix.
//!
//! All indices are 0-based. Every structure is immutable after construction;
//! [`index_set`] caches complete sets keyed on `(n, r)`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Exact binomial coefficient. Errors instead of wrapping on overflow.
pub fn binomial(m: u64, k: u64) -> Result<u64> {
    if k > m {
        return Ok(0);
    }
    let k = k.min(m - k);
    let mut acc: u128 = 1;
    for i in 1..=k as u128 {
        // C(m-k+i, i) = C(m-k+i-1, i-1) * (m-k+i) / i, exact at every step.
        acc = acc * (m as u128 - k as u128 + i) / i;
        if acc > u64::MAX as u128 {
            return Err(Error::Overflow(format!("binomial({m}, {k})")));
        }
    }
    Ok(acc as u64)
}

/// Number of unique order-`r` terms over `n` inputs: `C(n + r - 1, r)`.
pub fn count_terms(n: usize, r: usize) -> Result<u64> {
    if n == 0 || r == 0 {
        return invalid(format!("count_terms needs n >= 1 and r >= 1, got n={n}, r={r}"));
    }
    binomial(n as u64 + r as u64 - 1, r as u64)
}

/// Parameters of a unique-term filter of orders `1..=r` plus one bias:
/// `C(n + r, r)`.
pub fn count_params(n: usize, r: usize) -> Result<u64> {
    if n == 0 || r == 0 {
        return invalid(format!("count_params needs n >= 1 and r >= 1, got n={n}, r={r}"));
    }
    binomial(n as u64 + r as u64, r as u64)
}

/// Row-major integer matrix with a fixed column count.
fn rows_of(data: &[usize], cols: usize) -> impl ExactSizeIterator<Item = &[usize]> + '_ {
    data.chunks_exact(cols.max(1))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoIdenticalPositionMatrix {
    order: usize,
    n: usize,
    data: Vec<usize>,
}

impl NoIdenticalPositionMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.order
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.data[i * self.order..(i + 1) * self.order]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[usize]> + '_ {
        rows_of(&self.data, self.order)
    }

    /// One more column: every row is extended by `last + shift` for
    /// `shift = 1, 2, ...`, dropping rows whose new entry leaves `0..n`.
    fn extend(&self) -> Self {
        let mut data = Vec::new();
        for shift in 1..self.n {
            for row in self.rows() {
                let next = row[self.order - 1] + shift;
                if next < self.n {
                    data.extend_from_slice(row);
                    data.push(next);
                }
            }
        }
        Self { order: self.order + 1, n: self.n, data }
    }
}

/// Strictly increasing `j`-tuples over `0..n`. For `j > n` the result is
/// empty, which is a valid (degenerate) answer.
pub fn build_npm(n: usize, j: usize) -> Result<NoIdenticalPositionMatrix> {
    Ok(build_npm_chain(n, j)?.pop().expect("chain has j >= 1 entries"))
}

/// `[NPM^1, ..., NPM^j]`.
fn build_npm_chain(n: usize, j: usize) -> Result<Vec<NoIdenticalPositionMatrix>> {
    if n == 0 || j == 0 {
        return invalid(format!("no-identical position matrix needs n >= 1 and j >= 1, got n={n}, j={j}"));
    }
    let mut chain = vec![NoIdenticalPositionMatrix { order: 1, n, data: (0..n).collect() }];
    for _ in 1..j {
        let next = chain.last().unwrap().extend();
        chain.push(next);
    }
    Ok(chain)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TotalRepeatingMatrices {
    order: usize,
    parts: Vec<Vec<usize>>,
}

impl TotalRepeatingMatrices {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn parts(&self) -> &[Vec<usize>] {
        &self.parts
    }
}

/// Compositions of `r` into exactly `len` positive parts, lexicographically
/// descending.
fn compositions(r: usize, len: usize) -> Vec<Vec<usize>> {
    fn go(remaining: usize, slots: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in (1..=remaining - (slots - 1)).rev() {
            prefix.push(first);
            go(remaining - first, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    go(r, len, &mut Vec::with_capacity(len), &mut out);
    out
}

/// All `2^(r-1)` ordered compositions of `r`, grouped by ascending length.
///
/// Orders 3 and 4 use the published listings verbatim
/// (`[[3],[1,2],[2,1],[1,1,1]]` and
/// `[[4],[1,3],[3,1],[2,2],[2,1,1],[1,2,1],[1,1,2],[1,1,1,1]]`); from order 5
/// on, each length group is lexicographically descending.
pub fn build_trm(r: usize) -> Result<TotalRepeatingMatrices> {
    let parts: Vec<Vec<usize>> = match r {
        0 => return invalid("repeating matrices need order >= 1"),
        3 => vec![vec![3], vec![1, 2], vec![2, 1], vec![1, 1, 1]],
        4 => vec![
            vec![4],
            vec![1, 3],
            vec![3, 1],
            vec![2, 2],
            vec![2, 1, 1],
            vec![1, 2, 1],
            vec![1, 1, 2],
            vec![1, 1, 1, 1],
        ],
        _ => (1..=r).flat_map(|len| compositions(r, len)).collect(),
    };
    Ok(TotalRepeatingMatrices { order: r, parts })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullPositionMatrix {
    order: usize,
    n: usize,
    data: Vec<usize>,
}

impl FullPositionMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.order
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.data[i * self.order..(i + 1) * self.order]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[usize]> + '_ {
        rows_of(&self.data, self.order)
    }

    /// Row index of each tuple; tuples must be non-decreasing to be found.
    pub fn row_lookup(&self) -> HashMap<&[usize], usize> {
        self.rows().enumerate().map(|(i, row)| (row, i)).collect()
    }
}

/// Every non-decreasing `r`-tuple over `0..n`, exactly once.
///
/// For each composition `c` of `r` (in repeating-matrix order), takes the
/// no-identical matrix of order `len(c)` and repeats its column `k` `c[k]`
/// times; the blocks are stacked in that order.
pub fn build_fpm(n: usize, r: usize) -> Result<FullPositionMatrix> {
    let trm = build_trm(r)?;
    let npms = build_npm_chain(n, r)?;
    build_fpm_from(&trm, &npms)
}

fn build_fpm_from(trm: &TotalRepeatingMatrices, npms: &[NoIdenticalPositionMatrix]) -> Result<FullPositionMatrix> {
    let r = trm.order;
    let n = npms[0].n;
    let expected = count_terms(n, r)?;
    let mut data = Vec::with_capacity(expected as usize * r);
    for part in &trm.parts {
        for row in npms[part.len() - 1].rows() {
            for (&pos, &times) in row.iter().zip(part) {
                data.extend(std::iter::repeat_n(pos, times));
            }
        }
    }
    let fpm = FullPositionMatrix { order: r, n, data };
    if fpm.n_rows() as u64 != expected {
        return Err(Error::Internal(format!(
            "full position matrix for n={n}, r={r} has {} rows, expected {expected}",
            fpm.n_rows()
        )));
    }
    Ok(fpm)
}

/// One gather step: the term of row `k` equals
/// `x[position] * prev_terms[prev_row]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcmEntry {
    pub position: usize,
    pub prev_row: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgressiveComputationMatrices {
    order: usize,
    n: usize,
    variants: Vec<Vec<PcmEntry>>,
}

impl ProgressiveComputationMatrices {
    /// Assembles tables without checking them; see [`check_pcm_reconstruction`].
    pub fn from_parts(order: usize, n: usize, variants: Vec<Vec<PcmEntry>>) -> Self {
        Self { order, n, variants }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn variants(&self) -> &[Vec<PcmEntry>] {
        &self.variants
    }

    pub fn variant(&self, t: usize) -> &[PcmEntry] {
        &self.variants[t]
    }

    pub fn n_rows(&self) -> usize {
        self.variants.first().map_or(0, Vec::len)
    }
}

/// Gather tables building order-`r` terms from order-`r-1` terms.
///
/// Variant `i` peels column `i` off each row of `fpm_cur`; the remaining
/// tuple (re-sorted) is looked up in `fpm_prev`. Order 2 gives the full
/// matrix itself and its column swap.
pub fn build_pcms(fpm_prev: &FullPositionMatrix, fpm_cur: &FullPositionMatrix) -> Result<ProgressiveComputationMatrices> {
    let r = fpm_cur.order;
    if r < 2 || fpm_prev.order + 1 != r || fpm_prev.n != fpm_cur.n {
        return invalid(format!(
            "progressive tables need consecutive orders over the same n, got (order {}, n {}) and (order {}, n {})",
            fpm_prev.order, fpm_prev.n, fpm_cur.order, fpm_cur.n
        ));
    }
    let lookup = fpm_prev.row_lookup();
    let mut scratch = Vec::with_capacity(r - 1);
    let mut variants = Vec::with_capacity(r);
    for peel in 0..r {
        let mut table = Vec::with_capacity(fpm_cur.n_rows());
        for (k, row) in fpm_cur.rows().enumerate() {
            scratch.clear();
            scratch.extend(row.iter().enumerate().filter(|&(c, _)| c != peel).map(|(_, &v)| v));
            scratch.sort_unstable();
            let prev_row = *lookup.get(scratch.as_slice()).ok_or_else(|| {
                Error::Internal(format!("row {k} {row:?} minus column {peel} is missing from the order-{} matrix", r - 1))
            })?;
            table.push(PcmEntry { position: row[peel], prev_row });
        }
        variants.push(table);
    }
    Ok(ProgressiveComputationMatrices { order: r, n: fpm_cur.n, variants })
}

/// Checks that every variant rebuilds `fpm_cur` row for row: the multiset
/// `fpm_prev[prev_row] + {position}` must equal `fpm_cur[k]`.
pub fn check_pcm_reconstruction(
    pcms: &ProgressiveComputationMatrices,
    fpm_prev: &FullPositionMatrix,
    fpm_cur: &FullPositionMatrix,
) -> Result<()> {
    if pcms.variants.len() != fpm_cur.order {
        return Err(Error::Internal(format!(
            "expected {} variants, found {}",
            fpm_cur.order,
            pcms.variants.len()
        )));
    }
    let mut merged = Vec::with_capacity(fpm_cur.order);
    for (t, table) in pcms.variants.iter().enumerate() {
        if table.len() != fpm_cur.n_rows() {
            return Err(Error::Internal(format!(
                "variant {t} has {} rows, expected {}",
                table.len(),
                fpm_cur.n_rows()
            )));
        }
        for (k, e) in table.iter().enumerate() {
            if e.prev_row >= fpm_prev.n_rows() || e.position >= fpm_cur.n {
                return Err(Error::Internal(format!("variant {t} row {k} indexes out of range: {e:?}")));
            }
            merged.clear();
            merged.extend_from_slice(fpm_prev.row(e.prev_row));
            merged.push(e.position);
            merged.sort_unstable();
            if merged != fpm_cur.row(k) {
                return Err(Error::Internal(format!(
                    "variant {t} row {k} rebuilds {merged:?}, expected {:?}",
                    fpm_cur.row(k)
                )));
            }
        }
    }
    Ok(())
}

/// Everything needed to filter inputs of length `n` up to order `order`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    n: usize,
    order: usize,
    fpms: Vec<FullPositionMatrix>,
    pcms: Vec<ProgressiveComputationMatrices>,
    offsets: Vec<usize>,
}

impl IndexSet {
    pub fn build(n: usize, order: usize) -> Result<Self> {
        if n == 0 || order == 0 {
            return invalid(format!("index set needs n >= 1 and order >= 1, got n={n}, order={order}"));
        }
        let npms = build_npm_chain(n, order)?;
        let mut fpms = Vec::with_capacity(order);
        for r in 1..=order {
            fpms.push(build_fpm_from(&build_trm(r)?, &npms[..r])?);
        }
        let mut pcms = Vec::with_capacity(order.saturating_sub(1));
        for r in 2..=order {
            pcms.push(build_pcms(&fpms[r - 2], &fpms[r - 1])?);
        }
        Ok(Self::assemble(n, order, fpms, pcms))
    }

    fn assemble(n: usize, order: usize, fpms: Vec<FullPositionMatrix>, pcms: Vec<ProgressiveComputationMatrices>) -> Self {
        let mut offsets = vec![0];
        for f in &fpms {
            offsets.push(offsets.last().unwrap() + f.n_rows());
        }
        Self { n, order, fpms, pcms, offsets }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Full position matrix of order `j` (1-based).
    pub fn fpm(&self, j: usize) -> &FullPositionMatrix {
        &self.fpms[j - 1]
    }

    pub fn fpms(&self) -> &[FullPositionMatrix] {
        &self.fpms
    }

    /// Gather tables for order `j >= 2`.
    pub fn pcms(&self, j: usize) -> &ProgressiveComputationMatrices {
        &self.pcms[j - 2]
    }

    pub fn all_pcms(&self) -> &[ProgressiveComputationMatrices] {
        &self.pcms
    }

    /// Start of order `j`'s block inside a concatenated term vector.
    pub fn offset(&self, j: usize) -> usize {
        self.offsets[j - 1]
    }

    pub fn order_range(&self, j: usize) -> std::ops::Range<usize> {
        self.offsets[j - 1]..self.offsets[j]
    }

    /// Unique terms across all orders (bias excluded).
    pub fn total_terms(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Bytes held by the gather tables.
    pub fn pcm_bytes(&self) -> usize {
        self.pcms
            .iter()
            .flat_map(|p| p.variants.iter())
            .map(|v| v.len() * std::mem::size_of::<PcmEntry>())
            .sum()
    }

    pub fn with_pcms(&self, order: usize, pcms: ProgressiveComputationMatrices) -> Self {
        let mut out = self.clone();
        out.pcms[order - 2] = pcms;
        out
    }

    pub fn export(&self) -> IndexExport {
        IndexExport {
            n: self.n,
            order: self.order,
            fpm: self
                .fpms
                .iter()
                .map(|f| FpmExport { order: f.order, rows: f.rows().map(<[usize]>::to_vec).collect() })
                .collect(),
            pcms: self
                .pcms
                .iter()
                .map(|p| PcmsExport {
                    order: p.order,
                    variants: p
                        .variants
                        .iter()
                        .map(|v| v.iter().map(|e| [e.position, e.prev_row]).collect())
                        .collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a set from its JSON export, validating every table.
    pub fn import(export: &IndexExport) -> Result<Self> {
        let (n, order) = (export.n, export.order);
        if n == 0 || order == 0 || export.fpm.len() != order || export.pcms.len() != order - 1 {
            return invalid("index export has inconsistent order or matrix count");
        }
        let mut fpms = Vec::with_capacity(order);
        for (j, f) in export.fpm.iter().enumerate() {
            if f.order != j + 1 || f.rows.iter().any(|r| r.len() != j + 1 || r.iter().any(|&p| p >= n)) {
                return invalid(format!("full position matrix {} is malformed", j + 1));
            }
            let data = f.rows.iter().flatten().copied().collect();
            fpms.push(FullPositionMatrix { order: j + 1, n, data });
        }
        let mut pcms = Vec::with_capacity(order - 1);
        for (i, p) in export.pcms.iter().enumerate() {
            let r = i + 2;
            let variants = p
                .variants
                .iter()
                .map(|v| v.iter().map(|&[position, prev_row]| PcmEntry { position, prev_row }).collect())
                .collect();
            let table = ProgressiveComputationMatrices { order: r, n, variants };
            check_pcm_reconstruction(&table, &fpms[r - 2], &fpms[r - 1])?;
            pcms.push(table);
        }
        Ok(Self::assemble(n, order, fpms, pcms))
    }
}

/// JSON layout of an [`IndexSet`]:
///
/// ```text
/// {
///   "n": 3, "order": 2,
///   "fpm":  [ {"order": 1, "rows": [[0],[1],[2]]}, {"order": 2, "rows": [[0,0], ...]} ],
///   "pcms": [ {"order": 2, "variants": [ [[position, prev_row], ...], ... ]} ]
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexExport {
    pub n: usize,
    pub order: usize,
    pub fpm: Vec<FpmExport>,
    pub pcms: Vec<PcmsExport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpmExport {
    pub order: usize,
    pub rows: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcmsExport {
    pub order: usize,
    pub variants: Vec<Vec<[usize; 2]>>,
}

/// Shared, lazily built index set for `(n, order)`.
pub fn index_set(n: usize, order: usize) -> Result<Arc<IndexSet>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<IndexSet>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.lock().unwrap().get(&(n, order)) {
        return Ok(Arc::clone(hit));
    }
    let built = Arc::new(IndexSet::build(n, order)?);
    let mut guard = cache.lock().unwrap();
    Ok(Arc::clone(guard.entry((n, order)).or_insert(built)))
}
