use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExpError;
use crate::autodiff::SgdConfig;
use crate::bownet::ModelConfig;
use crate::metrics::{ProbeConfig, TradeoffCriterion};
use crate::synthgen::{ClassId, Domain, DomainStyle, ShiftSpec};
use crate::train::{default_rho, LossWeights, Schedule, TrainConfig};

/// Everything one experiment needs, loaded from a sectioned TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub pretext: PretextSection,
    pub metrics: MetricsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub source_classes: Vec<ClassId>,
    pub target_classes: Vec<ClassId>,
    pub image_size_px: usize,
    pub train_images_per_domain: usize,
    pub eval_target_images: usize,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub schedule: Schedule,
    pub batch_size: usize,
    pub log_every_iters: usize,
    pub eval_every_iters: usize,
    pub sgd: SgdConfig,
    pub weights: LossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextSection {
    /// Number of grid cells N_gs (a perfect square).
    pub grid_size: usize,
    pub train_per_domain: usize,
    /// Held-out composites per instance-count bin.
    pub eval_per_bin: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    /// Rejection threshold in nats; `ln(|C_s|)/2` when absent.
    pub rho_nats: Option<f64>,
    /// Images per domain fed to the layer-wise probes.
    pub probe_images_per_domain: usize,
    pub probe: ProbeConfig,
    pub criterion: TradeoffCriterion,
}

impl Default for ExperimentConfig {
    /// The standard UniDA scenario.
    fn default() -> Self {
        Self {
            seed: 0,
            scenario: ScenarioConfig {
                name: "std-unida".into(),
                source_classes: (0..6).collect(),
                target_classes: (0..4).chain(6..10).collect(),
                image_size_px: 32,
                train_images_per_domain: 1200,
                eval_target_images: 600,
                source_style: DomainStyle::clean_source(),
                target_style: DomainStyle::shifted_target(),
            },
            model: ModelConfig::default(),
            train: TrainSection {
                schedule: Schedule::Alternating,
                batch_size: 36,
                log_every_iters: 50,
                eval_every_iters: 0,
                sgd: SgdConfig::default(),
                weights: LossWeights::default(),
            },
            pretext: PretextSection {
                grid_size: 4,
                train_per_domain: 1200,
                eval_per_bin: 200,
            },
            metrics: MetricsSection {
                rho_nats: None,
                probe_images_per_domain: 600,
                probe: ProbeConfig::default(),
                criterion: TradeoffCriterion::default(),
            },
        }
    }
}

fn invalid(field: &str, msg: &str) -> ExpError {
    ExpError::Validation(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExpError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExpError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn load(path: &Path) -> Result<Self, ExpError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExpError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ExpError> {
        let s = &self.scenario;
        if s.source_classes.is_empty() {
            return Err(invalid("scenario.source_classes", "must not be empty"));
        }
        if s.target_classes.is_empty() {
            return Err(invalid("scenario.target_classes", "must not be empty"));
        }
        let spec = self.shift_spec()?;
        if spec.shared().is_empty() {
            return Err(invalid("scenario.source_classes/target_classes", "shared class set is empty"));
        }
        if spec.target_private().is_empty() {
            return Err(invalid("scenario.target_classes", "needs at least one target-private class"));
        }
        if s.source_style.domain != Domain::Source {
            return Err(invalid("scenario.source_style.domain", "must be source"));
        }
        if s.target_style.domain != Domain::Target {
            return Err(invalid("scenario.target_style.domain", "must be target"));
        }
        s.source_style.validate().map_err(|e| invalid("scenario.source_style", &e.to_string()))?;
        s.target_style.validate().map_err(|e| invalid("scenario.target_style", &e.to_string()))?;
        if s.train_images_per_domain == 0 {
            return Err(invalid("scenario.train_images_per_domain", "must be positive"));
        }
        if s.eval_target_images == 0 {
            return Err(invalid("scenario.eval_target_images", "must be positive"));
        }
        if self.model.image_size != s.image_size_px {
            return Err(invalid("model.image_size", "must equal scenario.image_size_px"));
        }
        self.model.validate().map_err(|e| invalid("model", &e.to_string()))?;
        let t = &self.train;
        t.sgd.validate().map_err(|e| invalid("train.sgd", &e))?;
        t.weights.validate().map_err(|e| invalid("train.weights", &e.to_string()))?;
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be positive"));
        }
        let g = self.pretext.grid_size;
        let side = (g as f64).sqrt().round() as usize;
        if g < 2 || side * side != g {
            return Err(invalid("pretext.grid_size", "must be a perfect square ≥ 4"));
        }
        if s.image_size_px % side != 0 {
            return Err(invalid("pretext.grid_size", "grid side must divide the image size"));
        }
        if self.pretext.train_per_domain == 0 || self.pretext.eval_per_bin == 0 {
            return Err(invalid("pretext", "set sizes must be positive"));
        }
        if let Some(r) = self.metrics.rho_nats {
            if !(r > 0.0 && r.is_finite()) {
                return Err(invalid("metrics.rho_nats", "must be positive"));
            }
        }
        if self.metrics.probe_images_per_domain < 2 * crate::metrics::DIS_MIN_PER_DOMAIN {
            return Err(invalid("metrics.probe_images_per_domain", "must be at least 40"));
        }
        if !(self.metrics.probe.lr > 0.0) || self.metrics.probe.iterations == 0 {
            return Err(invalid("metrics.probe", "lr and iterations must be positive"));
        }
        self.metrics
            .criterion
            .validate()
            .map_err(|e| invalid("metrics.criterion", &e.to_string()))?;
        Ok(())
    }

    pub fn shift_spec(&self) -> Result<ShiftSpec, ExpError> {
        ShiftSpec::new(
            self.scenario.source_classes.iter().copied(),
            self.scenario.target_classes.iter().copied(),
        )
        .map_err(|e| invalid("scenario", &e.to_string()))
    }

    pub fn rho(&self) -> f64 {
        self.metrics
            .rho_nats
            .unwrap_or_else(|| default_rho(self.scenario.source_classes.len()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            sgd: self.train.sgd.clone(),
            weights: self.train.weights.clone(),
            schedule: self.train.schedule,
            batch_size: self.train.batch_size,
            log_every: self.train.log_every_iters,
            eval_every: self.train.eval_every_iters,
        }
    }

    /// Identifies the generated data: scenario, pretext section and seed.
    pub fn data_hash(&self) -> [u8; 32] {
        let key = serde_json::json!({
            "scenario": self.scenario,
            "pretext": self.pretext,
            "seed": self.seed,
        });
        sha256(key.to_string().as_bytes())
    }
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    let mut out = [0u8; 32];
    out.copy_from_slice(&Sha256::digest(bytes));
    out
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = ExperimentConfig::default().to_toml().replace("batch_size", "batch_sise");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(ExpError::Validation(_))));
    }

    #[test]
    fn empty_shared_set_names_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.target_classes = vec![6, 7];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("shared"), "{err}");
    }

    #[test]
    fn default_rho_matches_source_classes() {
        assert!((ExperimentConfig::default().rho() - 6f64.ln() / 2.0).abs() < 1e-15);
    }
}
