//! Convolutional backbone with per-block taps, the word-prototype block ψ,
//! goal and pretext heads, and the prototype-alignment score.

mod model;
mod vocab;

pub use model::{images_to_tensor, Forward, Model, ParamGroup, Want};
pub use vocab::{pas, pas_dataset, pas_of_vectors, soft_quantize, Pas, Vocabulary};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("feature has {got} channels, vocabulary expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("layer {layer} outside 1..={max}")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("model has no word-prototype block")]
    NoVocabulary,
    #[error("empty dataset")]
    EmptyDataset,
}

/// Where the pretext classifier reads its features from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretextRouting {
    /// `f_n ∘ ψ ∘ h`
    ThroughPsi,
    /// `f_n ∘ GAP ∘ h`, bypassing ψ.
    Backbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Output channels of each backbone block.
    pub widths: Vec<usize>,
    /// 1-based block after which the vocabulary is inserted.
    pub adapt_layer: usize,
    /// Number of word-prototypes K.
    pub vocab_size: usize,
    /// Whether ψ replaces the blocks after `adapt_layer`.
    pub use_psi: bool,
    pub pretext_routing: PretextRouting,
    /// Let the goal loss update ψ's post-block (the rest of ψ stays frozen).
    pub unfreeze_post_block: bool,
    /// Learning-rate multiplier for backbone blocks relative to new layers.
    pub backbone_lr_mult: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            widths: vec![16, 32, 64, 64],
            adapt_layer: 3,
            vocab_size: 32,
            use_psi: true,
            pretext_routing: PretextRouting::ThroughPsi,
            unfreeze_post_block: false,
            backbone_lr_mult: 0.1,
        }
    }
}

impl ModelConfig {
    /// Channel count N_d of the adapted tap.
    pub fn feature_dim(&self) -> usize {
        self.widths[self.adapt_layer - 1]
    }

    /// Backbone blocks instantiated: all of them without ψ, up to the
    /// adaptation layer with it.
    pub fn backbone_depth(&self) -> usize {
        if self.use_psi {
            self.adapt_layer
        } else {
            self.widths.len()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be non-empty and positive");
        }
        if self.adapt_layer == 0 || self.adapt_layer > self.widths.len() {
            return bad("adapt_layer must be within 1..=len(widths)");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        // Every block halves the map, and ψ's post-block halves once more.
        let halvings = self.backbone_depth() + usize::from(self.use_psi);
        if self.image_size == 0 || self.image_size % (1 << halvings) != 0 {
            return bad("image_size must be divisible by 2^(number of downsampling blocks)");
        }
        if !(self.backbone_lr_mult > 0.0) {
            return bad("backbone_lr_mult must be positive");
        }
        Ok(())
    }
}
