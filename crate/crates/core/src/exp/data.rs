use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{hex, ExperimentConfig};
use super::ExpError;
use crate::synthgen::{
    generate_dataset, mix_seed, procure_pretext, procure_pretext_with_label, read_image_set,
    read_pretext_set, read_sealed, write_image_set, write_pretext_set, write_sealed, Domain,
    ImageSample, PretextSample, SealedLabels, ShiftSpec,
};

const SALT_SOURCE: u64 = 11;
const SALT_TARGET: u64 = 12;
const SALT_EVAL: u64 = 13;
const SALT_PRETEXT_SOURCE: u64 = 14;
const SALT_PRETEXT_TARGET: u64 = 15;
const SALT_PRETEXT_EVAL: u64 = 16;

pub const SEALED_FILE: &str = "sealed_eval.json";
pub const META_FILE: &str = "meta.json";

/// All splits of one generated scenario. Target views carry no labels; the
/// evaluation labels live only in `sealed_eval`.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub spec: ShiftSpec,
    pub source_train: Vec<ImageSample>,
    pub target_train: Vec<ImageSample>,
    pub target_eval: Vec<ImageSample>,
    pub sealed_eval: SealedLabels,
    pub pretext_source: Vec<PretextSample>,
    pub pretext_target: Vec<PretextSample>,
    /// Built from held-out target evaluation images, `eval_per_bin` per
    /// instance count.
    pub pretext_eval: Vec<PretextSample>,
    pub data_hash: [u8; 32],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataMeta {
    pub data_hash: String,
    pub scenario: String,
    pub seed: u64,
    pub source_train: usize,
    pub target_train: usize,
    pub target_eval: usize,
    pub pretext_source: usize,
    pub pretext_target: usize,
    pub pretext_eval: usize,
}

impl Datasets {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self, ExpError> {
        cfg.validate()?;
        let spec = cfg.shift_spec()?;
        let sc = &cfg.scenario;
        let size = sc.image_size_px;
        let n = sc.train_images_per_domain;
        let seed = |salt| mix_seed(cfg.seed, salt);
        let source = generate_dataset(&spec, &sc.source_style, n, seed(SALT_SOURCE), size)?;
        // Target training labels are dropped here and never stored.
        let target = generate_dataset(&spec, &sc.target_style, n, seed(SALT_TARGET), size)?;
        let eval = generate_dataset(&spec, &sc.target_style, sc.eval_target_images, seed(SALT_EVAL), size)?;
        let p = &cfg.pretext;
        let ps = procure_pretext(&source.samples, p.grid_size, p.train_per_domain, seed(SALT_PRETEXT_SOURCE))?;
        let pt = procure_pretext(&target.samples, p.grid_size, p.train_per_domain, seed(SALT_PRETEXT_TARGET))?;
        let mut pe = Vec::with_capacity(p.grid_size * p.eval_per_bin);
        for y in 1..=p.grid_size {
            let s = mix_seed(seed(SALT_PRETEXT_EVAL), y as u64);
            pe.extend(procure_pretext_with_label(&eval.samples, p.grid_size, y, p.eval_per_bin, s)?);
        }
        Ok(Self {
            spec,
            source_train: source.samples,
            target_train: target.samples,
            target_eval: eval.samples,
            sealed_eval: eval.sealed.expect("target splits are sealed"),
            pretext_source: ps,
            pretext_target: pt,
            pretext_eval: pe,
            data_hash: cfg.data_hash(),
        })
    }

    pub fn meta(&self, cfg: &ExperimentConfig) -> DataMeta {
        DataMeta {
            data_hash: hex(&self.data_hash),
            scenario: cfg.scenario.name.clone(),
            seed: cfg.seed,
            source_train: self.source_train.len(),
            target_train: self.target_train.len(),
            target_eval: self.target_eval.len(),
            pretext_source: self.pretext_source.len(),
            pretext_target: self.pretext_target.len(),
            pretext_eval: self.pretext_eval.len(),
        }
    }

    pub fn write(&self, cfg: &ExperimentConfig, dir: &Path) -> Result<(), ExpError> {
        fs::create_dir_all(dir).map_err(|e| ExpError::io(dir, e))?;
        write_image_set(dir, "source_train", "train", &self.source_train)?;
        write_image_set(dir, "target_train", "train", &self.target_train)?;
        write_image_set(dir, "target_eval", "eval", &self.target_eval)?;
        write_sealed(&dir.join(SEALED_FILE), &self.sealed_eval)?;
        write_pretext_set(dir, "pretext_source", Domain::Source, &self.pretext_source)?;
        write_pretext_set(dir, "pretext_target", Domain::Target, &self.pretext_target)?;
        write_pretext_set(dir, "pretext_eval", Domain::Target, &self.pretext_eval)?;
        let meta = serde_json::to_string_pretty(&self.meta(cfg)).expect("meta serializes");
        let path = dir.join(META_FILE);
        fs::write(&path, meta + "\n").map_err(|e| ExpError::io(&path, e))
    }

    /// Loads training views only; the sealed evaluation labels are read by
    /// [`read_eval_labels`].
    pub fn read(cfg: &ExperimentConfig, dir: &Path) -> Result<Self, ExpError> {
        let meta = read_meta(dir)?;
        let expected = hex(&cfg.data_hash());
        if meta.data_hash != expected {
            return Err(ExpError::HashMismatch {
                what: "dataset",
                expected,
                found: meta.data_hash,
            });
        }
        let target_eval = read_image_set(dir, "target_eval")?;
        Ok(Self {
            spec: cfg.shift_spec()?,
            source_train: read_image_set(dir, "source_train")?,
            target_train: read_image_set(dir, "target_train")?,
            sealed_eval: SealedLabels::new(Vec::new()),
            target_eval,
            pretext_source: read_pretext_set(dir, "pretext_source")?,
            pretext_target: read_pretext_set(dir, "pretext_target")?,
            pretext_eval: read_pretext_set(dir, "pretext_eval")?,
            data_hash: cfg.data_hash(),
        })
    }
}

pub fn read_meta(dir: &Path) -> Result<DataMeta, ExpError> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| ExpError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| ExpError::Format(format!("{}: {e}", path.display())))
}

/// Evaluation-only access to the sealed target labels.
pub fn read_eval_labels(dir: &Path) -> Result<SealedLabels, ExpError> {
    Ok(read_sealed(&dir.join(SEALED_FILE))?)
}
