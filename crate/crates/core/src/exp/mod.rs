//! Experiment configuration, dataset persistence, checkpoints and the
//! canned experiments behind the command-line tool.

mod checkpoint;
mod commands;
mod config;
mod data;
mod runner;

pub use checkpoint::Checkpoint;
pub use commands::{
    ablation_table, cmd_ablation, cmd_eval, cmd_generate, cmd_layer_analysis, cmd_train,
    layer_table, run_ablation, sign_test_wins, AblationCell, AblationTable, LayerRow, LayerTable,
    TrainOutcome, BIN_SLACK_NATS, DATA_CONFIG_FILE,
};
pub use checkpoint::{model_config_hash, ParamBlock, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{hex, sha256, ExperimentConfig, MetricsSection, PretextSection, ScenarioConfig, TrainSection};
pub use data::{read_eval_labels, read_meta, DataMeta, Datasets, META_FILE, SEALED_FILE};
pub use runner::{
    evaluate, evaluate_h_score, layer_metrics, predictions, run_variant, source_classes,
    source_labels, train_data, Variant,
};

use std::path::Path;

use thiserror::Error;

use crate::bownet::ModelError;
use crate::metrics::MetricsError;
use crate::synthgen::SynthError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum ExpError {
    /// Bad configuration or arguments (exit code 1).
    #[error("validation error: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("{what} hash mismatch: expected {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl ExpError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ExpError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 for validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExpError::Validation(_) => 1,
            _ => 2,
        }
    }
}
