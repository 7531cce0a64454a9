use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    mix_seed, render_instance, ClassId, Domain, DomainStyle, ImageSample, SealedLabels, ShiftSpec,
    SynthError,
};

const LABEL_SALT: u64 = 0x6C61_6265_6C73;

/// A generated split. Target splits carry no labels in `samples`; their
/// classes sit in `sealed` for evaluation only.
#[derive(Clone, Debug)]
pub struct GeneratedSet {
    pub samples: Vec<ImageSample>,
    pub sealed: Option<SealedLabels>,
}

/// Class of sample `index`: labels are dealt round-robin in blocks of
/// `|labels|`, each block shuffled by its own seed, so any index can be
/// resolved without materializing the rest of the dataset.
fn class_at(labels: &[ClassId], seed: u64, index: usize) -> ClassId {
    let k = labels.len();
    let block = (index / k) as u64;
    let mut perm: Vec<ClassId> = labels.to_vec();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed ^ LABEL_SALT, block)));
    perm[index % k]
}

/// Regenerates sample `index` (with its label) from the dataset arguments.
pub fn sample_at(
    spec: &ShiftSpec,
    style: &DomainStyle,
    seed: u64,
    index: usize,
    size: usize,
) -> Result<ImageSample, SynthError> {
    let labels: Vec<ClassId> = spec.labels(style.domain).iter().copied().collect();
    if labels.is_empty() {
        return Err(SynthError::EmptyLabelSet(style.domain));
    }
    let class = class_at(&labels, seed, index);
    render_instance(class, style, mix_seed(seed, index as u64), size)
}

pub fn generate_dataset(
    spec: &ShiftSpec,
    style: &DomainStyle,
    n: usize,
    seed: u64,
    size: usize,
) -> Result<GeneratedSet, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptySize);
    }
    let mut samples = (0..n)
        .map(|i| sample_at(spec, style, seed, i, size))
        .collect::<Result<Vec<_>, _>>()?;
    let sealed = match style.domain {
        Domain::Source => None,
        Domain::Target => {
            let labels = samples
                .iter_mut()
                .map(|s| s.class_label.take().expect("rendered with label"))
                .collect();
            Some(SealedLabels::new(labels))
        }
    };
    Ok(GeneratedSet { samples, sealed })
}
