//! End-to-end training: split, vector burn-in, cohort identification, augmented
//! training, prediction and checkpoints.

mod checkpoint;
mod model;
mod split;
mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::cohort::{CohortError, Search};
use crate::datagen::DataError;
use crate::encoders::{EncoderError, EncoderKind};
use crate::metrics::MetricError;
use crate::objectives::{LossWeights, ObjectiveError};
use crate::vecpool::{HnswParams, PoolError};

pub use checkpoint::{
    params_from_bytes, params_to_bytes, read_params, write_params, Checkpoint, LogRow, MetricsLog, AUX_FILE, CONFIG_FILE,
    LOG_FILE, LOG_HEADER, MAIN_FILE, PARAMS_MAGIC, POOL_FILE,
};
pub use model::{augmented_loss, burnin_loss, Architecture, LossVars};
pub use split::{split, Split};
pub use train::{
    augmented_train, burnin_train, compute_cohorts, evaluate_indices, probabilities, run, BurnIn, Cohorts, RunResult,
    Trained,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss in {phase} at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        phase: &'static str,
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("leakage: {count} evaluation ids present in the pool (first: {first})")]
    Leakage { count: usize, first: u64 },
    #[error("frozen parameters changed: {0}")]
    Frozen(String),
    #[error("checkpoint format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// True for numeric failures (divergence, non-finite gradients).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            PipelineError::Diverged { .. } | PipelineError::Autodiff(AutodiffError::NonFinite { .. })
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub encoder: EncoderKind,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub vocab_size: usize,
    pub max_len: usize,
    pub mlp_hidden: usize,
    pub head_depth: usize,
    /// Off: the augmented phase sees no neighbours (the base model).
    pub cohort: bool,
    /// Off: `h_a = 0`; negatives still feed the contrastive loss.
    pub aggregate: bool,
    pub search: Search,
    pub hnsw: HnswParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 5,
            dim: 64,
            batch_size: 128,
            lr: 1e-4,
            weights: LossWeights::default(),
            max_epochs: 100,
            patience: 20,
            seed: 0,
            encoder: EncoderKind::MeanPoolMlp,
            split: [0.6, 0.2, 0.2],
            vocab_size: 653,
            max_len: crate::encoders::DEFAULT_MAX_LEN,
            mlp_hidden: 64,
            head_depth: 1,
            cohort: true,
            aggregate: true,
            search: Search::Exact,
            hnsw: HnswParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size == 0 || self.dim == 0 || self.max_len == 0 || self.mlp_hidden == 0 {
            return bad("batch_size, dim, max_len and mlp_hidden must be positive".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.split.iter().any(|f| !(*f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must be non-negative and sum to 1", self.split));
        }
        if self.hnsw.m < 2 || self.hnsw.ef_construction == 0 || self.hnsw.ef_search == 0 {
            return bad("HNSW parameters must be positive (m >= 2)".into());
        }
        self.weights
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}

/// Sub-seed roles for the streams derived from the master seed.
pub(crate) mod roles {
    pub const SPLIT: u64 = 101;
    pub const AUX_INIT: u64 = 102;
    pub const MAIN_INIT: u64 = 103;
    pub const BURNIN_SHUFFLE: u64 = 104;
    pub const MAIN_SHUFFLE: u64 = 105;
    pub const HNSW: u64 = 106;
}
