//! Losses, gradient routing, the training loop and the inference rule.

mod losses;
mod run;
mod step;

pub use losses::{
    baseline_unida_loss, check_simplex, default_rho, entropy, infer, infer_index, loss_em,
    loss_em_value, loss_pretext, softmax_row, SIMPLEX_TOL, UNKNOWN,
};
pub use run::{train_run, EvalHook, RunSummary, TrainConfig, TrainData};
pub use step::{train_step, EntropyThreshold, StepBatch, StepRecord, TermSet, UnidaAlgo};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::bownet::{ModelError, ParamGroup};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite {term} loss ({value}) at iteration {iter}")]
    NonFinite {
        term: &'static str,
        value: f64,
        iter: usize,
    },
    #[error("histogram row {row} is not a distribution (sum {sum})")]
    NotSimplex { row: usize, sum: f64 },
    #[error("pretext label {label} outside 1..={max}")]
    LabelOutOfRange { label: usize, max: usize },
    #[error("empty {0} batch")]
    EmptyBatch(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("run log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the target entropy term inside the baseline UniDA loss.
    pub lambda_target_entropy: f64,
    pub weight_em: f64,
    pub weight_pretext: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_target_entropy: 0.1,
            weight_em: 1.0,
            weight_pretext: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, w) in [
            ("lambda_target_entropy", self.lambda_target_entropy),
            ("weight_em", self.weight_em),
            ("weight_pretext", self.weight_pretext),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// A goal step, then a subsidiary (pretext + L_em) step, per iteration.
    Alternating,
    /// All terms in one step per iteration.
    Joint,
}

/// The three terms of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Goal,
    Pretext,
    Em,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::Goal => "goal",
            Term::Pretext => "pretext",
            Term::Em => "em",
        }
    }
}

/// Parameter groups each term is allowed to update.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRoutingPolicy {
    pub goal: Vec<ParamGroup>,
    pub pretext: Vec<ParamGroup>,
    pub em: Vec<ParamGroup>,
}

impl Default for GradientRoutingPolicy {
    fn default() -> Self {
        use ParamGroup::*;
        Self {
            goal: vec![Backbone, GoalHead],
            pretext: vec![Backbone, Vocabulary, PostBlock, PretextHead],
            em: vec![Backbone, Vocabulary, PostBlock],
        }
    }
}

impl GradientRoutingPolicy {
    /// The default policy, optionally letting the goal term reach ψ's
    /// post-block.
    pub fn new(unfreeze_post_block: bool) -> Self {
        let mut p = Self::default();
        if unfreeze_post_block {
            p.goal.push(ParamGroup::PostBlock);
        }
        p
    }

    pub fn updates(&self, term: Term, group: ParamGroup) -> bool {
        match term {
            Term::Goal => &self.goal,
            Term::Pretext => &self.pretext,
            Term::Em => &self.em,
        }
        .contains(&group)
    }
}
