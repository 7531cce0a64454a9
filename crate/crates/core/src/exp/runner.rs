use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::Datasets;
use super::ExpError;
use crate::autodiff::Sgd;
use crate::bownet::{pas_dataset, Model};
use crate::metrics::{
    dis, entropy_bin_profile, h_score, ntr_from_features, predict, EvalManifest, HScore,
    LayerMetrics, MetricsReport,
};
use crate::synthgen::{mix_seed, ClassId, Image, SealedLabels};
use crate::train::{train_run, RunSummary, TrainConfig, TrainData, TrainError};

/// Rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    ArchOnly,
    ArchEm,
    PretextOnly,
    FullSpa,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::ArchOnly,
        Variant::ArchEm,
        Variant::PretextOnly,
        Variant::FullSpa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::ArchOnly => "arch_only",
            Variant::ArchEm => "arch_em",
            Variant::PretextOnly => "pretext_only",
            Variant::FullSpa => "full_spa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// (ψ present, L_em on, pretext on)
    pub fn components(self) -> (bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false),
            Variant::ArchOnly => (true, false, false),
            Variant::ArchEm => (true, true, false),
            Variant::PretextOnly => (false, false, true),
            Variant::FullSpa => (true, true, true),
        }
    }

    /// The configured training setup with this variant's components switched
    /// on or off; configured non-zero weights are kept for enabled terms.
    pub fn train_config(self, cfg: &ExperimentConfig) -> TrainConfig {
        let mut t = cfg.train_config();
        let (psi, em, pretext) = self.components();
        t.model.use_psi = psi;
        if !em {
            t.weights.weight_em = 0.0;
        }
        if !pretext {
            t.weights.weight_pretext = 0.0;
        }
        t
    }
}

/// Source-class index of every labeled source image.
pub fn source_labels(data: &Datasets) -> Result<Vec<usize>, ExpError> {
    data.source_train
        .iter()
        .map(|s| {
            s.class_label
                .and_then(|c| data.spec.source_index(c))
                .ok_or_else(|| ExpError::Format("source image without a source label".into()))
        })
        .collect()
}

pub fn train_data<'a>(data: &'a Datasets, grid_size: usize) -> Result<TrainData<'a>, ExpError> {
    Ok(TrainData {
        source: data.source_train.iter().map(|s| &s.pixels).collect(),
        source_labels: source_labels(data)?,
        num_classes: data.spec.source_labels().len(),
        target: data.target_train.iter().map(|s| &s.pixels).collect(),
        pretext_source: data.pretext_source.iter().collect(),
        pretext_target: data.pretext_target.iter().collect(),
        grid_size,
    })
}

/// Trains one variant. The optional `manifest` drives periodic H-score/PAS
/// logging; it is only read by the evaluation hook, outside training steps.
pub fn run_variant(
    cfg: &ExperimentConfig,
    data: &Datasets,
    variant: Variant,
    seed: u64,
    log: &mut dyn Write,
    manifest: Option<&EvalManifest>,
) -> Result<(Model, Sgd, RunSummary), ExpError> {
    let tc = variant.train_config(cfg);
    let td = train_data(data, cfg.pretext.grid_size)?;
    let mut hook = |m: &Model| -> Result<BTreeMap<String, f64>, TrainError> {
        let mut out = BTreeMap::new();
        if let Some(man) = manifest {
            let h = evaluate_h_score(cfg, data, m, man).map_err(|e| TrainError::Config(e.to_string()))?;
            out.insert("h_score".into(), h.h_score);
            out.insert("shared_acc".into(), h.shared_acc);
            out.insert("private_acc".into(), h.private_acc);
        }
        if m.has_psi() {
            let imgs: Vec<&Image> = data.target_eval.iter().map(|s| &s.pixels).collect();
            out.insert("pas".into(), pas_dataset(m, &imgs, m.config.adapt_layer)?);
        }
        Ok(out)
    };
    let hook_ref: Option<&mut crate::train::EvalHook> =
        if manifest.is_some() || tc.model.use_psi { Some(&mut hook) } else { None };
    Ok(train_run(&tc, &td, seed, log, hook_ref)?)
}

pub fn source_classes(data: &Datasets) -> Vec<ClassId> {
    data.spec.source_labels().iter().copied().collect()
}

pub fn evaluate_h_score(
    cfg: &ExperimentConfig,
    data: &Datasets,
    model: &Model,
    manifest: &EvalManifest,
) -> Result<HScore, ExpError> {
    let preds = predictions(cfg, data, model)?;
    Ok(h_score(&preds, manifest)?)
}

pub fn predictions(cfg: &ExperimentConfig, data: &Datasets, model: &Model) -> Result<Vec<ClassId>, ExpError> {
    let imgs: Vec<&Image> = data.target_eval.iter().map(|s| &s.pixels).collect();
    Ok(predict(model, &imgs, cfg.rho(), &source_classes(data))?)
}

/// H-score, PAS and the entropy-bin profile of a trained model.
pub fn evaluate(
    cfg: &ExperimentConfig,
    data: &Datasets,
    model: &Model,
    sealed: &SealedLabels,
) -> Result<MetricsReport, ExpError> {
    let manifest = EvalManifest::from_sealed(sealed, &data.spec);
    let h = evaluate_h_score(cfg, data, model, &manifest)?;
    let mut report = MetricsReport {
        h_score: h.h_score,
        shared_acc: h.shared_acc,
        private_acc: h.private_acc,
        ..MetricsReport::default()
    };
    if model.has_psi() {
        let imgs: Vec<&Image> = data.target_eval.iter().map(|s| &s.pixels).collect();
        report.pas = Some(pas_dataset(model, &imgs, model.config.adapt_layer)?);
        report.entropy_bins = entropy_bin_profile(model, &data.pretext_eval, cfg.pretext.grid_size)?;
    }
    Ok(report)
}

/// NTR and DIS of every backbone tap of `model`.
pub fn layer_metrics(
    cfg: &ExperimentConfig,
    data: &Datasets,
    model: &Model,
    sealed: &SealedLabels,
    seed: u64,
) -> Result<Vec<LayerMetrics>, ExpError> {
    let n = cfg.metrics.probe_images_per_domain;
    let labels = source_labels(data)?;
    let n_src = n.min(data.source_train.len());
    let src: Vec<&Image> = data.source_train[..n_src].iter().map(|s| &s.pixels).collect();
    let tgt: Vec<&Image> = data.target_train.iter().take(n).map(|s| &s.pixels).collect();
    let eval: Vec<&Image> = data.target_eval.iter().map(|s| &s.pixels).collect();
    let private = EvalManifest::from_sealed(sealed, &data.spec).private_flags();
    let classes = data.spec.source_labels().len();
    let mut out = Vec::new();
    for layer in 1..=model.depth() {
        let fs = model.pooled_tap(&src, layer)?;
        let ft = model.pooled_tap(&tgt, layer)?;
        let fe = model.pooled_tap(&eval, layer)?;
        let ntr = ntr_from_features(&fs, &labels[..n_src], classes, &fe, &private, cfg.rho(), &cfg.metrics.probe)?;
        let d = dis(&fs, &ft, mix_seed(seed, layer as u64), &cfg.metrics.probe)?;
        out.push(LayerMetrics { layer, ntr, dis: d.dis });
    }
    Ok(out)
}
