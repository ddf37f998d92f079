//! Episodic triplet mining (ETM) for few-shot classification.
//!
//! The crate is organised around the training pipeline:
//!
//! - [`dataset`]: samples, class-disjoint splits, synthetic data and CSV I/O
//! - [`embedder`]: a small fully-connected embedding network with explicit backprop
//! - [`episodic`]: N-way episode sampling (support, query, unlabeled draws)
//! - [`mining`]: distance matrix, semi-hard positive/negative selection, hinge loss and its gradient
//! - [`semisup`]: pseudo-labeling of unlabeled draws and support augmentation
//! - [`proto`]: prototypical-loss baseline
//! - [`trainer`]: Adam, step-decay learning rate, episode loop and checkpoints
//! - [`evaluator`]: top-k vote inference and N-way K-shot accuracy reports
//! - [`experiment`]: end-to-end runs driven by a JSON config
//!
//! Data-parallel loops (distance rows, per-query mining, evaluation episodes)
//! run on rayon when the `parallel` feature is enabled. Every parallel path
//! produces bit-identical results to its sequential counterpart.

pub mod dataset;
pub mod embedder;
pub mod episodic;
pub mod error;
pub mod evaluator;
pub mod json;
pub mod experiment;
pub mod mining;
pub mod par;
pub mod proto;
pub mod semisup;
pub mod trainer;

pub use dataset::{ClassId, Dataset, Sample, SampleId, SplitSpec, SyntheticSpec};
pub use embedder::{EmbeddingNet, ForwardTrace, Gradients};
pub use episodic::{Episode, EpisodeConfig, UnlabeledMode};
pub use error::{EtmError, Result};
pub use evaluator::{EvalConfig, EvalReport, InferenceRule};
pub use mining::{DistanceMatrix, MiningConfig, QueryMining};
pub use par::Execution;
pub use trainer::{LossKind, TrainConfig, Trainer};
