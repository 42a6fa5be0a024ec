//! Flat `key = value` configuration for the training demo.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional and falls back to [`DemoConfig::default`]; unknown keys are
//! rejected. Keys:
//!
//! | key               | meaning                                              |
//! |-------------------|------------------------------------------------------|
//! | `seed`            | seeds initialization and batch order                 |
//! | `epochs`          | training epochs                                      |
//! | `batch_size`      | mini-batch size                                      |
//! | `learning_rate`   | SGD step size                                        |
//! | `momentum`        | SGD momentum                                         |
//! | `weight_decay`    | L2 coefficient added to every gradient               |
//! | `lr_decay_epoch`  | epoch from which the rate is scaled (`none` = never) |
//! | `lr_decay_factor` | scale applied from `lr_decay_epoch`                  |
//! | `data_dir`        | directory holding `train_file` and `test_file`       |
//! | `train_file`      | training records, relative to `data_dir`             |
//! | `test_file`       | test records, relative to `data_dir`                 |
//! | `classes`         | comma-separated fine labels to keep                  |
//! | `train_per_class` | training samples kept per class                      |
//! | `test_per_class`  | test samples kept per class                          |
//! | `check_record_counts` | require the full 50000 / 10000 record files (`true`/`false`) |
//! | `channels`        | width of both conv layers and the attention block   |
//! | `conv_order`      | Volterra order of the two conv layers                |
//! | `hla_reduction`   | SE reduction ratio of the attention block            |
//! | `hla_input_bn`    | batch norm ahead of the local branch (`true`/`false`) |

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::optim::SgdConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub channels: usize,
    pub conv_order: usize,
    pub hla_reduction: usize,
    pub hla_input_bn: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub data_dir: PathBuf,
    pub train_file: String,
    pub test_file: String,
    pub classes: Vec<u8>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub check_record_counts: bool,
}

impl DataConfig {
    pub fn train_path(&self) -> PathBuf {
        self.data_dir.join(&self.train_file)
    }

    pub fn test_path(&self) -> PathBuf {
        self.data_dir.join(&self.test_file)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub sgd: SgdConfig,
    pub data: DataConfig,
    pub model: ModelSpec,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                epochs: 20,
                batch_size: 25,
                seed: 1,
                lr_decay_epoch: Some(15),
                lr_decay_factor: 0.2,
            },
            data: DataConfig {
                data_dir: PathBuf::from("data/cifar-100-binary"),
                train_file: "train.bin".into(),
                test_file: "test.bin".into(),
                classes: vec![0, 1],
                train_per_class: 500,
                test_per_class: 100,
                check_record_counts: true,
            },
            model: ModelSpec { channels: 16, conv_order: 1, hla_reduction: 4, hla_input_bn: false },
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config { line, message: format!("bad value {value:?} for {key}") })
}

impl DemoConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| Error::Config { line, message: format!("expected key = value, got {trimmed:?}") })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "seed" => cfg.sgd.seed = parse(line, key, value)?,
                "epochs" => cfg.sgd.epochs = parse(line, key, value)?,
                "batch_size" => cfg.sgd.batch_size = parse(line, key, value)?,
                "learning_rate" => cfg.sgd.learning_rate = parse(line, key, value)?,
                "momentum" => cfg.sgd.momentum = parse(line, key, value)?,
                "weight_decay" => cfg.sgd.weight_decay = parse(line, key, value)?,
                "lr_decay_epoch" => {
                    cfg.sgd.lr_decay_epoch = if value == "none" { None } else { Some(parse(line, key, value)?) }
                }
                "lr_decay_factor" => cfg.sgd.lr_decay_factor = parse(line, key, value)?,
                "data_dir" => cfg.data.data_dir = PathBuf::from(value),
                "train_file" => cfg.data.train_file = value.to_string(),
                "test_file" => cfg.data.test_file = value.to_string(),
                "classes" => {
                    cfg.data.classes = value.split(',').map(|c| parse(line, key, c.trim())).collect::<Result<_>>()?
                }
                "train_per_class" => cfg.data.train_per_class = parse(line, key, value)?,
                "test_per_class" => cfg.data.test_per_class = parse(line, key, value)?,
                "check_record_counts" => cfg.data.check_record_counts = parse(line, key, value)?,
                "channels" => cfg.model.channels = parse(line, key, value)?,
                "conv_order" => cfg.model.conv_order = parse(line, key, value)?,
                "hla_reduction" => cfg.model.hla_reduction = parse(line, key, value)?,
                "hla_input_bn" => cfg.model.hla_input_bn = parse(line, key, value)?,
                other => return Err(Error::Config { line, message: format!("unknown key {other:?}") }),
            }
        }
        cfg.sgd.validate()?;
        Ok(cfg)
    }

    /// Reads `path`. A relative `data_dir` that does not exist from the
    /// working directory is tried against the parent of the config's
    /// directory, i.e. the repository root for files under `configs/`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::parse(&text)?;
        if cfg.data.data_dir.is_relative() && !cfg.data.data_dir.exists() {
            if let Some(root) = path.parent().and_then(Path::parent) {
                let candidate = root.join(&cfg.data.data_dir);
                if candidate.exists() {
                    cfg.data.data_dir = candidate;
                }
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = DemoConfig::parse("# demo\nseed = 7\nclasses = 3, 4\n\nlr_decay_epoch = none\nhla_input_bn = true\n").unwrap();
        assert_eq!(cfg.sgd.seed, 7);
        assert_eq!(cfg.data.classes, vec![3, 4]);
        assert_eq!(cfg.sgd.lr_decay_epoch, None);
        assert!(cfg.model.hla_input_bn);
        assert_eq!(cfg.sgd.epochs, DemoConfig::default().sgd.epochs);
    }

    #[test]
    fn shipped_demo_config_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.cfg");
        let cfg = DemoConfig::parse(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(cfg, DemoConfig::default());
    }

    #[test]
    fn reports_line_numbers() {
        assert!(matches!(DemoConfig::parse("seed = 1\nbogus = 2"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(DemoConfig::parse("epochs = ten"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(DemoConfig::parse("just words"), Err(Error::Config { line: 1, .. })));
        assert!(DemoConfig::parse("batch_size = 0").is_err());
    }
}
