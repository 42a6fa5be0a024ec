//! Training support for Volterra convolution and attention layers: a small
//! reverse-mode tape, SGD, a CIFAR-100 reader and a desk-scale demo.

pub mod config;
pub mod data;
pub mod demo;
pub mod error;
pub mod grad;
pub mod graph;
pub mod layers;
pub mod optim;

pub use config::{DataConfig, DemoConfig, ModelSpec};
pub use data::{load_cifar100, parse_cifar100, Dataset, DatasetBatch, LoadOptions};
pub use demo::{demo_model, linear_model, train, train_demo, EpochRow, TrainingLog, LOG_HEADER};
pub use error::{Error, Result};
pub use grad::{grad_check, model_grad_check};
pub use graph::{Gradients, Graph, NodeId, RunningStats, StepOutput};
pub use layers::{Affine, Layer, Model, Stage};
pub use optim::{Sgd, SgdConfig};
