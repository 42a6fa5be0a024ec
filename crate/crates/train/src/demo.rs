//! The desk-scale classifier and its training loop.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volterra_core::{ConvGeometry, HlaConfig, HlaParams, Mode, Tensor, VolterraConvLayer};

use crate::config::{DemoConfig, ModelSpec};
use crate::data::{load_cifar100, Dataset, LoadOptions, TEST_RECORDS, TRAIN_RECORDS};
use crate::error::{invalid, Error, Result};
use crate::layers::{Affine, Layer, Model, Stage};
use crate::optim::{Sgd, SgdConfig};

pub const LOG_HEADER: &str = "epoch,train_loss,train_acc,test_acc,wall_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
}

impl EpochRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{:.3}", self.epoch, self.train_loss, self.train_acc, self.test_acc, self.wall_seconds)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<EpochRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.rows.last().map(|r| r.test_acc)
    }
}

/// Volterra conv (3 -> C, stride 2), ReLU, Volterra conv (C -> C, stride 2),
/// ReLU, attention block, global average pool, affine classifier. Sized for
/// 32x32 RGB inputs.
pub fn demo_model(spec: &ModelSpec, classes: usize, rng: &mut ChaCha8Rng) -> Result<Model> {
    let c = spec.channels;
    let conv1 = ConvGeometry::new(3, 32, 32, (3, 3), (2, 2), (1, 1))?;
    let conv2 = ConvGeometry::new(c, conv1.out_h(), conv1.out_w(), (3, 3), (2, 2), (1, 1))?;
    let hla = HlaConfig { channels: c, reduction_ratio: spec.hla_reduction, use_input_batchnorm: spec.hla_input_bn };
    let layers = vec![
        Layer::Conv(VolterraConvLayer::random(conv1, c, spec.conv_order, rng)?),
        Layer::Conv(VolterraConvLayer::random(conv2, c, spec.conv_order, rng)?),
        Layer::Hla(HlaParams::random(hla, conv2.out_h(), conv2.out_w(), rng)?),
        Layer::Affine(Affine::random(c, classes, rng)),
    ];
    let stages = vec![
        Stage::Layer(0),
        Stage::Relu,
        Stage::Layer(1),
        Stage::Relu,
        Stage::Layer(2),
        Stage::GlobalAvgPool,
        Stage::Layer(3),
    ];
    Model::new(layers, stages)
}

/// A single affine layer on flat feature vectors.
pub fn linear_model(features: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Model> {
    Model::new(vec![Layer::Affine(Affine::random(features, classes, rng))], vec![Stage::Layer(0)])
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

fn mean_ce_and_hits(logits: &Tensor, labels: &[usize]) -> (f64, usize) {
    let k = logits.shape()[1];
    let mut loss = 0.0;
    let mut hits = 0;
    for (row, &l) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += sum.ln() + max - row[l];
        hits += usize::from(argmax(row) == l);
    }
    (loss, hits)
}

/// Mean loss and accuracy in evaluation mode.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut hits = 0;
    for batch in data.batches(batch_size)? {
        let logits = model.predict(&batch.images, Mode::Eval)?;
        let (l, h) = mean_ce_and_hits(&logits, &batch.labels);
        loss += l;
        hits += h;
    }
    Ok((loss / data.len() as f64, hits as f64 / data.len() as f64))
}

/// Mini-batch SGD on `train`, evaluating on `test` after every epoch.
///
/// Row 0 is the evaluation of the initial model (training loss and accuracy
/// measured in evaluation mode); rows 1.. report the sample-weighted mean
/// training loss and accuracy seen during the epoch. Each row is written to
/// `sink` as soon as it is known. Batch order comes from a generator seeded
/// with `cfg.seed`, separate from the one used for initialization.
pub fn train(model: &mut Model, train: &Dataset, test: &Dataset, cfg: &SgdConfig, sink: &mut impl Write) -> Result<TrainingLog> {
    cfg.validate()?;
    if train.is_empty() {
        return invalid("training set is empty");
    }
    let io = |e| Error::Io { path: "<training log>".into(), source: e };
    let start = Instant::now();
    let mut log = TrainingLog::default();
    writeln!(sink, "{LOG_HEADER}").map_err(io)?;
    let (loss0, acc0) = evaluate(model, train, cfg.batch_size)?;
    let (_, test0) = evaluate(model, test, cfg.batch_size)?;
    let first = EpochRow { epoch: 0, train_loss: loss0, train_acc: acc0, test_acc: test0, wall_seconds: start.elapsed().as_secs_f64() };
    writeln!(sink, "{}", first.csv()).map_err(io)?;
    log.rows.push(first);

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0bad_cafe);
    let mut opt = Sgd::new(model, cfg);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for (b, batch) in train.shuffled_batches(cfg.batch_size, &mut order_rng)?.into_iter().enumerate() {
            let step = model.train_step(&batch.images, &batch.labels)?;
            if !step.loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss: step.loss });
            }
            hits += mean_ce_and_hits(&step.logits, &batch.labels).1;
            loss_sum += step.loss * batch.labels.len() as f64;
            opt.step(model, &step.grads, lr)?;
            model.update_running_stats(&step.stats);
        }
        let (_, test_acc) = evaluate(model, test, cfg.batch_size)?;
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            test_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        writeln!(sink, "{}", row.csv()).map_err(io)?;
        log.rows.push(row);
    }
    Ok(log)
}

/// Loads the configured CIFAR-100 subset, standardizes each colour channel
/// and trains the demo model on it.
pub fn train_demo(cfg: &DemoConfig, sink: &mut impl Write) -> Result<TrainingLog> {
    let classes = &cfg.data.classes;
    if classes.is_empty() {
        return invalid("the demo needs at least one class");
    }
    let load = |path: std::path::PathBuf, per_class: usize, records: Option<usize>| {
        load_cifar100(
            &path,
            &LoadOptions { class_filter: Some(classes.clone()), per_class_limit: Some(per_class), expected_records: records },
        )
    };
    let full = cfg.data.check_record_counts;
    let mut train_set = load(cfg.data.train_path(), cfg.data.train_per_class, full.then_some(TRAIN_RECORDS))?;
    let mut test_set = load(cfg.data.test_path(), cfg.data.test_per_class, full.then_some(TEST_RECORDS))?;
    if train_set.is_empty() {
        return invalid(format!("no training samples of classes {classes:?} in {}", cfg.data.train_path().display()));
    }
    // Both splits use training-set statistics.
    let (mean, std) = train_set.channel_stats();
    train_set.standardize(&mean, &std);
    test_set.standardize(&mean, &std);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.sgd.seed);
    let mut model = demo_model(&cfg.model, classes.len(), &mut init_rng)?;
    train(&mut model, &train_set, &test_set, &cfg.sgd, sink)
}
