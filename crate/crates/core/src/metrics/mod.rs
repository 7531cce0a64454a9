//! Linear probing, negative-transfer risk, domain invariance, H-score, the
//! entropy-bin profile and Definition-1 layer selection.

mod probe;

pub use probe::{LinearProbe, ProbeConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bownet::{Model, ModelError};
use crate::synthgen::{ClassId, Image, PretextSample, SealedLabels, ShiftSpec};
use crate::train::{entropy, infer_index, UNKNOWN};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("linear probe did not converge (loss {start} -> {end} over the final 10%)")]
    ProbeNotConverged { start: f64, end: f64 },
    #[error("need at least {need} samples per domain, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("pretext bin y_ins = {0} has fewer than {1} samples")]
    SparseBin(usize, usize),
    #[error("need at least 2 trials per layer, got {0}")]
    TooFewTrials(usize),
}

/// Ground truth of the target evaluation split: `Some(class)` for shared
/// samples, `None` for target-private ones.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalManifest {
    pub truth: Vec<Option<ClassId>>,
}

impl EvalManifest {
    /// Opens sealed labels; panics if called from training code.
    pub fn from_sealed(sealed: &SealedLabels, spec: &ShiftSpec) -> Self {
        let src = spec.source_labels();
        Self {
            truth: sealed
                .open()
                .iter()
                .map(|c| src.contains(c).then_some(*c))
                .collect(),
        }
    }

    pub fn private_flags(&self) -> Vec<bool> {
        self.truth.iter().map(Option::is_none).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HScore {
    pub h_score: f64,
    pub shared_acc: f64,
    pub private_acc: f64,
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

/// Shared accuracy (exact class), private accuracy (predicted
/// [`UNKNOWN`]) and their harmonic mean.
pub fn h_score(predictions: &[ClassId], manifest: &EvalManifest) -> Result<HScore, MetricsError> {
    if predictions.len() != manifest.truth.len() {
        return Err(MetricsError::Invalid(format!(
            "{} predictions for {} manifest entries",
            predictions.len(),
            manifest.truth.len()
        )));
    }
    let (mut ns, mut cs, mut np, mut cp) = (0usize, 0usize, 0usize, 0usize);
    for (&p, t) in predictions.iter().zip(&manifest.truth) {
        match t {
            Some(c) => {
                ns += 1;
                cs += usize::from(p == *c);
            }
            None => {
                np += 1;
                cp += usize::from(p == UNKNOWN);
            }
        }
    }
    if ns == 0 || np == 0 {
        return Err(MetricsError::Empty("shared or private part of the manifest"));
    }
    let shared_acc = cs as f64 / ns as f64;
    let private_acc = cp as f64 / np as f64;
    Ok(HScore {
        h_score: harmonic_mean(shared_acc, private_acc),
        shared_acc,
        private_acc,
    })
}

/// Fraction of samples whose entropy decision `H(p) > rho` matches the
/// private flag.
pub fn ntr_from_probs(probs: &[Vec<f64>], private: &[bool], rho: f64) -> Result<f64, MetricsError> {
    if probs.is_empty() || probs.len() != private.len() {
        return Err(MetricsError::Empty("evaluation manifest"));
    }
    let hits = probs
        .iter()
        .zip(private)
        .filter(|(p, &unk)| (entropy(p) > rho) == unk)
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

/// NTR at tap(`layer`): a probe fit on pooled labeled source features, then
/// the entropy-threshold shared/private decision on target evaluation
/// features.
#[allow(clippy::too_many_arguments)]
pub fn ntr(
    model: &Model,
    layer: usize,
    source: &[&Image],
    source_labels: &[usize],
    eval: &[&Image],
    private: &[bool],
    rho: f64,
    probe: &ProbeConfig,
) -> Result<f64, MetricsError> {
    let fs = model.pooled_tap(source, layer)?;
    let fe = model.pooled_tap(eval, layer)?;
    ntr_from_features(&fs, source_labels, model.num_classes, &fe, private, rho, probe)
}

pub fn ntr_from_features(
    source: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    eval: &[Vec<f64>],
    private: &[bool],
    rho: f64,
    probe: &ProbeConfig,
) -> Result<f64, MetricsError> {
    if eval.is_empty() {
        return Err(MetricsError::Empty("evaluation manifest"));
    }
    let p = LinearProbe::fit(source, labels, classes, probe)?;
    let probs: Vec<Vec<f64>> = eval.iter().map(|f| p.probs(f)).collect();
    ntr_from_probs(&probs, private, rho)
}

/// Minimum samples per domain for a domain probe.
pub const DIS_MIN_PER_DOMAIN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dis {
    /// Symmetrized held-out domain-classification error.
    pub error: f64,
    pub a_distance: f64,
    pub dis: f64,
}

/// `d_A = 2(1 − 2ε)` and `γ_DIS = 1 − d_A/2 = 2ε`, with ε first folded onto
/// `[0, 1/2]`.
pub fn dis_from_error(raw_error: f64) -> Dis {
    let e = raw_error.min(1.0 - raw_error).clamp(0.0, 0.5);
    let a_distance = 2.0 * (1.0 - 2.0 * e);
    Dis {
        error: e,
        a_distance,
        dis: 1.0 - a_distance / 2.0,
    }
}

/// Domain invariance of two feature sets: each domain is split 50/50 (by a
/// shuffle seeded with `seed`), a logistic source-vs-target probe is fit on
/// the first halves and scored on the second.
pub fn dis(
    source: &[Vec<f64>],
    target: &[Vec<f64>],
    seed: u64,
    probe: &ProbeConfig,
) -> Result<Dis, MetricsError> {
    let fewest = source.len().min(target.len());
    if fewest < DIS_MIN_PER_DOMAIN {
        return Err(MetricsError::TooFewSamples { need: DIS_MIN_PER_DOMAIN, got: fewest });
    }
    let split = |set: &[Vec<f64>], salt: u64| {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ salt));
        let (a, b) = idx.split_at(set.len() / 2);
        (a.to_vec(), b.to_vec())
    };
    // The same salt for both domains keeps the result invariant under
    // swapping them.
    let (s_tr, s_te) = split(source, 0x5EED);
    let (t_tr, t_te) = split(target, 0x5EED);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &i in &s_tr {
        xs.push(source[i].clone());
        ys.push(0);
    }
    for &i in &t_tr {
        xs.push(target[i].clone());
        ys.push(1);
    }
    let p = LinearProbe::fit(&xs, &ys, 2, probe)?;
    let wrong = s_te.iter().filter(|&&i| p.predict(&source[i]) != 0).count()
        + t_te.iter().filter(|&&i| p.predict(&target[i]) != 1).count();
    Ok(dis_from_error(wrong as f64 / (s_te.len() + t_te.len()) as f64))
}

/// Minimum held-out pretext samples per bin.
pub const MIN_BIN_SIZE: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub y_ins: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

/// Per-bin mean and population std of image-level histogram entropies;
/// every bin `1..=grid_size` must hold at least `min_count` samples.
pub fn bin_profile(
    samples: &[(usize, f64)],
    grid_size: usize,
    min_count: usize,
) -> Result<Vec<BinStat>, MetricsError> {
    (1..=grid_size)
        .map(|y| {
            let v: Vec<f64> = samples.iter().filter(|s| s.0 == y).map(|s| s.1).collect();
            if v.len() < min_count.max(1) {
                return Err(MetricsError::SparseBin(y, min_count.max(1)));
            }
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            Ok(BinStat { y_ins: y, mean, std: var.sqrt(), count: v.len() })
        })
        .collect()
}

/// Entropy of the spatial mean of each `[K, H, W]` histogram field in a
/// batch `[N, K, H, W]`.
pub fn image_histogram_entropies(field: &crate::autodiff::Tensor) -> Vec<f64> {
    let sh = field.shape();
    let (n, k, s) = (sh[0], sh[1], sh[2] * sh[3]);
    let v = field.values();
    (0..n)
        .map(|ni| {
            let hist: Vec<f64> = (0..k)
                .map(|ki| v[(ni * k + ki) * s..(ni * k + ki + 1) * s].iter().sum::<f64>() / s as f64)
                .collect();
            entropy(&hist)
        })
        .collect()
}

/// Entropy-bin profile of a trained model on held-out pretext composites.
pub fn entropy_bin_profile(
    model: &Model,
    samples: &[PretextSample],
    grid_size: usize,
) -> Result<Vec<BinStat>, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty("pretext evaluation set"));
    }
    let imgs: Vec<&Image> = samples.iter().map(|s| &s.pixels).collect();
    let h = image_histogram_entropies(&model.histograms(&imgs)?);
    let pairs: Vec<(usize, f64)> = samples.iter().map(|s| s.y_ins).zip(h).collect();
    bin_profile(&pairs, grid_size, MIN_BIN_SIZE)
}

/// Whether adjacent bin means never drop by more than `slack`.
pub fn bins_monotone(bins: &[BinStat], slack: f64) -> bool {
    bins.windows(2).all(|w| w[1].mean >= w[0].mean - slack)
}

/// Definition-1 thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TradeoffCriterion {
    pub zeta_n: f64,
    pub zeta_d: f64,
    pub eps_n: f64,
    pub eps_d: f64,
    pub delta: f64,
    pub n_trials: usize,
}

impl Default for TradeoffCriterion {
    fn default() -> Self {
        Self {
            zeta_n: 0.7,
            zeta_d: 0.4,
            eps_n: 0.05,
            eps_d: 0.05,
            delta: 0.2,
            n_trials: 5,
        }
    }
}

impl TradeoffCriterion {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(unit(self.zeta_n) && unit(self.zeta_d) && unit(self.eps_n) && unit(self.eps_d)) {
            return Err(MetricsError::Invalid("thresholds must lie in [0, 1]".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(MetricsError::Invalid("delta must lie in (0, 1)".into()));
        }
        if self.n_trials < 2 {
            return Err(MetricsError::TooFewTrials(self.n_trials));
        }
        Ok(())
    }
}

/// Seed-resampled `(NTR, DIS)` pairs of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrials {
    pub layer: usize,
    pub trials: Vec<(f64, f64)>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Empirical probability that a layer meets both Definition-1 inequalities.
pub fn tradeoff_probability(t: &LayerTrials, c: &TradeoffCriterion) -> f64 {
    let ok = t
        .trials
        .iter()
        .filter(|(n, d)| *n <= c.zeta_n + c.eps_n && *d >= c.zeta_d - c.eps_d)
        .count();
    ok as f64 / t.trials.len() as f64
}

/// Among layers reaching probability `1 − δ`, the one maximizing
/// `mean(DIS) − mean(NTR)`, deeper on ties; `None` if no layer qualifies.
pub fn select_layer(table: &[LayerTrials], c: &TradeoffCriterion) -> Result<Option<usize>, MetricsError> {
    if let Some(t) = table.iter().find(|t| t.trials.len() < 2) {
        return Err(MetricsError::TooFewTrials(t.trials.len()));
    }
    let mut best: Option<(f64, usize)> = None;
    for t in table {
        if tradeoff_probability(t, c) < 1.0 - c.delta {
            continue;
        }
        let score = mean(t.trials.iter().map(|x| x.1)) - mean(t.trials.iter().map(|x| x.0));
        best = match best {
            Some((s, l)) if s > score || (s == score && l > t.layer) => Some((s, l)),
            _ => Some((score, t.layer)),
        };
    }
    Ok(best.map(|b| b.1))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks); `None`
/// when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, my) = (mean(rx.iter().copied()), mean(ry.iter().copied()));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Goal-head predictions on `images`, mapped to class ids.
pub fn predict(model: &Model, images: &[&Image], rho: f64, classes: &[ClassId]) -> Result<Vec<ClassId>, MetricsError> {
    Ok(model
        .goal_logits(images)?
        .iter()
        .map(|z| infer_index(&crate::train::softmax_row(z), rho).map_or(UNKNOWN, |i| classes[i]))
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub ntr: f64,
    pub dis: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub layers: Vec<LayerMetrics>,
    pub pas: Option<f64>,
    pub h_score: f64,
    pub shared_acc: f64,
    pub private_acc: f64,
    pub entropy_bins: Vec<BinStat>,
    pub selected_layer: Option<usize>,
}

impl MetricsReport {
    /// Re-checks every documented bound.
    pub fn within_bounds(&self) -> bool {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        self.layers.iter().all(|l| unit(l.ntr) && unit(l.dis))
            && self.pas.map_or(true, |p| (-1.0..=1.0).contains(&p))
            && unit(self.h_score)
            && unit(self.shared_acc)
            && unit(self.private_acc)
            && self.h_score <= (self.shared_acc + self.private_acc) / 2.0 + 1e-12
            && self.h_score <= 2.0 * self.shared_acc.min(self.private_acc) + 1e-12
    }
}
