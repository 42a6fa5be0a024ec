//! CIFAR-100 binary loader and in-memory datasets.
//!
//! A CIFAR-100 binary file is a plain sequence of 3074-byte records: one
//! coarse-label byte, one fine-label byte, then 3072 pixel bytes holding the
//! red, green and blue 32x32 planes in row-major order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use volterra_core::Tensor;

use crate::error::{invalid, Error, Result};

pub const IMAGE_BYTES: usize = 3 * 32 * 32;
pub const RECORD_BYTES: usize = 2 + IMAGE_BYTES;
pub const FINE_CLASSES: usize = 100;
pub const TRAIN_RECORDS: usize = 50_000;
pub const TEST_RECORDS: usize = 10_000;

/// Samples stored flat, `sample_shape` elements each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Fine labels to keep; kept samples are relabeled by their position in
    /// this list. `None` keeps all 100 classes.
    pub class_filter: Option<Vec<u8>>,
    /// Keep at most this many samples of each kept class, in file order.
    pub per_class_limit: Option<usize>,
    /// Fail unless the file holds exactly this many records.
    pub expected_records: Option<usize>,
}

impl Dataset {
    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Per-channel mean and standard deviation for `[c, ...]` samples.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.sample_shape[0];
        let plane = self.sample_len() / c;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, &v) in self.data.iter().enumerate() {
            let ch = (i / plane) % c;
            sum[ch] += v;
            sq[ch] += v * v;
        }
        let count = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(1e-8)).collect();
        (mean, std)
    }

    /// `(v - mean[c]) / std[c]` in place.
    pub fn standardize(&mut self, mean: &[f64], std: &[f64]) {
        let c = self.sample_shape[0];
        let plane = self.sample_len() / c;
        for (i, v) in self.data.iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = (*v - mean[ch]) / std[ch];
        }
    }

    /// Batches over `order` (indices into the dataset).
    pub fn batches_in(&self, order: &[usize], batch_size: usize) -> Result<Vec<DatasetBatch>> {
        if batch_size == 0 {
            return invalid("batch size must be at least 1");
        }
        order
            .chunks(batch_size)
            .map(|idx| {
                let mut shape = vec![idx.len()];
                shape.extend(&self.sample_shape);
                let data = idx.iter().flat_map(|&i| self.sample(i).iter().copied()).collect();
                Ok(DatasetBatch { images: Tensor::new(shape, data)?, labels: idx.iter().map(|&i| self.labels[i]).collect() })
            })
            .collect()
    }

    /// Batches in a seeded random order.
    pub fn shuffled_batches(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<DatasetBatch>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        self.batches_in(&order, batch_size)
    }

    pub fn batches(&self, batch_size: usize) -> Result<Vec<DatasetBatch>> {
        self.batches_in(&(0..self.len()).collect::<Vec<_>>(), batch_size)
    }
}

/// One record in the binary layout.
pub fn encode_record(coarse: u8, fine: u8, pixels: &[u8; IMAGE_BYTES]) -> Vec<u8> {
    let mut out = Vec::with_capacity(RECORD_BYTES);
    out.push(coarse);
    out.push(fine);
    out.extend_from_slice(pixels);
    out
}

pub fn parse_cifar100(bytes: &[u8], opts: &LoadOptions) -> Result<Dataset> {
    let whole = bytes.len() / RECORD_BYTES;
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Format {
            offset: (whole * RECORD_BYTES) as u64,
            message: format!("truncated record: {} trailing bytes, records are {RECORD_BYTES} bytes", bytes.len() % RECORD_BYTES),
        });
    }
    if let Some(expected) = opts.expected_records {
        if whole != expected {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!("expected {expected} records, file holds {whole}"),
            });
        }
    }
    let num_classes = opts.class_filter.as_ref().map_or(FINE_CLASSES, Vec::len);
    let mut relabel = [None; 256];
    match &opts.class_filter {
        Some(filter) => {
            for (new, &fine) in filter.iter().enumerate() {
                if usize::from(fine) >= FINE_CLASSES || relabel[usize::from(fine)].is_some() {
                    return invalid(format!("class filter entry {fine} is out of range or repeated"));
                }
                relabel[usize::from(fine)] = Some(new);
            }
        }
        None => (0..FINE_CLASSES).for_each(|c| relabel[c] = Some(c)),
    }
    let mut taken = vec![0usize; num_classes];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let fine = record[1];
        if usize::from(fine) >= FINE_CLASSES {
            return Err(Error::Format { offset: (r * RECORD_BYTES + 1) as u64, message: format!("fine label {fine} out of range") });
        }
        let Some(label) = relabel[usize::from(fine)] else { continue };
        if opts.per_class_limit.is_some_and(|limit| taken[label] >= limit) {
            continue;
        }
        taken[label] += 1;
        labels.push(label);
        data.extend(record[2..].iter().map(|&p| f64::from(p) / 255.0));
    }
    Ok(Dataset { sample_shape: vec![3, 32, 32], data, labels, num_classes })
}

pub fn load_cifar100(path: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|source| match source.kind() {
        std::io::ErrorKind::NotFound => Error::MissingDataset { path: path.to_path_buf(), layout: EXPECTED_LAYOUT.into() },
        _ => Error::Io { path: path.to_path_buf(), source },
    })?;
    parse_cifar100(&bytes, opts)
}

pub const EXPECTED_LAYOUT: &str = "<data_dir>/train.bin (50000 records) and <data_dir>/test.bin (10000 records), \
    each record 1 coarse-label byte, 1 fine-label byte and 3072 pixel bytes (R, G, B planes of 32x32), \
    as unpacked from cifar-100-binary.tar.gz";

/// Two Gaussian blobs in `dims` dimensions, `per_class` samples each,
/// centred at `-separation/2` and `+separation/2` along every axis.
pub fn synthetic_blobs(per_class: usize, dims: usize, separation: f64, rng: &mut impl Rng) -> Dataset {
    let mut data = Vec::with_capacity(2 * per_class * dims);
    let mut labels = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let label = i % 2;
        let centre = if label == 0 { -separation / 2.0 } else { separation / 2.0 };
        data.extend((0..dims).map(|_| centre + rng.sample::<f64, _>(StandardNormal)));
        labels.push(label);
    }
    Dataset { sample_shape: vec![dims], data, labels, num_classes: 2 }
}
