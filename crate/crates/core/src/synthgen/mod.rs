//! Procedural source/target image datasets with controllable domain and
//! category shift, and grid-shuffled instance-counting samples.

mod dataset;
mod export;
mod pretext;
mod render;
mod sealed;

pub use dataset::{generate_dataset, sample_at, GeneratedSet};
pub use export::{
    read_image_set, read_pretext_set, read_sealed, write_image_set, write_pretext_set,
    write_sealed, ImageRecord, PretextRecord, SealedRecord, PIXEL_MAGIC, PIXEL_VERSION,
};
pub use pretext::{procure_pretext, procure_pretext_with_label, PretextSample};
pub use render::{render_instance, BBox, Image, ImageSample, BACKGROUND_LEVEL, FOREGROUND_LEVEL};
pub use sealed::{SealedLabels, TrainingGuard};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ClassId = u32;

/// Number of classes the renderer knows how to draw.
pub const CLASS_UNIVERSE: ClassId = 10;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown class id {0} (universe has {CLASS_UNIVERSE} classes)")]
    UnknownClass(ClassId),
    #[error("label set for the {0:?} domain is empty")]
    EmptyLabelSet(Domain),
    #[error("dataset size must be positive")]
    EmptySize,
    #[error("grid size {0} is not a positive perfect square")]
    GridNotSquare(usize),
    #[error("image {h}x{w} cannot be split into a {g}x{g} grid")]
    GridDoesNotDivide { h: usize, w: usize, g: usize },
    #[error("pretext procurement needs at least {need} images, got {got}")]
    TooFewImages { need: usize, got: usize },
    #[error("pretext label {0} outside 1..={1}")]
    LabelOutOfRange(usize, usize),
    #[error("no valid crop after {0} instance resamples")]
    CropBudgetExhausted(usize),
    #[error("invalid style: {0}")]
    InvalidStyle(&'static str),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundTexture {
    Plain,
    Stripes,
    Speckle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Normal,
    Inverted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub domain: Domain,
    pub background: BackgroundTexture,
    pub polarity: Polarity,
    /// Gaussian pixel noise on the [0, 1] scale.
    pub noise_sigma: f64,
    /// Box-blur radius in pixels.
    pub blur_radius: usize,
}

impl DomainStyle {
    pub fn clean_source() -> Self {
        Self {
            domain: Domain::Source,
            background: BackgroundTexture::Plain,
            polarity: Polarity::Normal,
            noise_sigma: 0.0,
            blur_radius: 0,
        }
    }

    pub fn shifted_target() -> Self {
        Self {
            domain: Domain::Target,
            background: BackgroundTexture::Speckle,
            polarity: Polarity::Inverted,
            noise_sigma: 0.1,
            blur_radius: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SynthError::InvalidStyle("noise_sigma must be non-negative"));
        }
        Ok(())
    }

    /// True when the two styles would draw from different marginals.
    pub fn differs_in_appearance(&self, other: &Self) -> bool {
        self.background != other.background
            || self.polarity != other.polarity
            || self.noise_sigma != other.noise_sigma
            || self.blur_radius != other.blur_radius
    }
}

/// Source/target label sets and the derived shared/private partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    source: BTreeSet<ClassId>,
    target: BTreeSet<ClassId>,
}

impl ShiftSpec {
    pub fn new(
        source: impl IntoIterator<Item = ClassId>,
        target: impl IntoIterator<Item = ClassId>,
    ) -> Result<Self, SynthError> {
        let source: BTreeSet<_> = source.into_iter().collect();
        let target: BTreeSet<_> = target.into_iter().collect();
        if source.is_empty() {
            return Err(SynthError::EmptyLabelSet(Domain::Source));
        }
        if target.is_empty() {
            return Err(SynthError::EmptyLabelSet(Domain::Target));
        }
        if let Some(&c) = source.iter().chain(&target).find(|&&c| c >= CLASS_UNIVERSE) {
            return Err(SynthError::UnknownClass(c));
        }
        Ok(Self { source, target })
    }

    pub fn source_labels(&self) -> &BTreeSet<ClassId> {
        &self.source
    }

    pub fn target_labels(&self) -> &BTreeSet<ClassId> {
        &self.target
    }

    pub fn labels(&self, domain: Domain) -> &BTreeSet<ClassId> {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn shared(&self) -> BTreeSet<ClassId> {
        self.source.intersection(&self.target).copied().collect()
    }

    pub fn source_private(&self) -> BTreeSet<ClassId> {
        self.source.difference(&self.target).copied().collect()
    }

    pub fn target_private(&self) -> BTreeSet<ClassId> {
        self.target.difference(&self.source).copied().collect()
    }

    /// Fraction of target classes that are private to the target.
    pub fn openness(&self) -> f64 {
        self.target_private().len() as f64 / self.target.len() as f64
    }

    /// Index of a source class within the sorted source label set; this is
    /// the goal-classifier output unit for that class.
    pub fn source_index(&self, class: ClassId) -> Option<usize> {
        self.source.iter().position(|&c| c == class)
    }

    pub fn source_class_at(&self, index: usize) -> Option<ClassId> {
        self.source.iter().nth(index).copied()
    }
}

/// splitmix64 finalizer over `seed` and `index`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_of_standard_scenario() {
        let s = ShiftSpec::new(0..6, (0..4).chain(6..10)).unwrap();
        assert_eq!(s.shared(), (0..4).collect());
        assert_eq!(s.source_private(), [4, 5].into_iter().collect());
        assert_eq!(s.target_private(), (6..10).collect());
        assert_eq!(s.openness(), 0.5);
    }

    #[test]
    fn rejects_empty_and_unknown() {
        assert!(matches!(
            ShiftSpec::new([], [1]),
            Err(SynthError::EmptyLabelSet(Domain::Source))
        ));
        assert!(matches!(
            ShiftSpec::new([1], [12]),
            Err(SynthError::UnknownClass(12))
        ));
    }

    #[test]
    fn default_styles_differ() {
        assert!(DomainStyle::clean_source().differs_in_appearance(&DomainStyle::shifted_target()));
    }
}
