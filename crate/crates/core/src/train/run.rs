use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::step::{train_step, EntropyThreshold, StepBatch, StepRecord, TermSet};
use super::{default_rho, GradientRoutingPolicy, LossWeights, Schedule, TrainError};
use crate::autodiff::{Sgd, SgdConfig};
use crate::bownet::{Model, ModelConfig};
use crate::synthgen::{mix_seed, Image, PretextSample, TrainingGuard};

/// Images used to calibrate prototype norms before the first step.
const CALIBRATION_IMAGES: usize = 64;

const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_PRETEXT_SOURCE: u64 = 3;
const STREAM_PRETEXT_TARGET: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub sgd: SgdConfig,
    pub weights: LossWeights,
    pub schedule: Schedule,
    pub batch_size: usize,
    /// Loss logging period in iterations (0 disables).
    pub log_every: usize,
    /// Evaluation-hook period in iterations (0: only at the end).
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.sgd.validate().map_err(TrainError::Config)?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.weights.weight_em > 0.0 && !self.model.use_psi {
            return Err(TrainError::Config("weight_em > 0 requires the vocabulary block".into()));
        }
        Ok(())
    }
}

/// Training views. Target images carry no labels.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub source: Vec<&'a Image>,
    /// Source-class indices aligned with `source`.
    pub source_labels: Vec<usize>,
    pub num_classes: usize,
    pub target: Vec<&'a Image>,
    pub pretext_source: Vec<&'a PretextSample>,
    pub pretext_target: Vec<&'a PretextSample>,
    pub grid_size: usize,
}

/// Called on a parameter snapshot, outside the training guard; returns named
/// metric values for the log.
pub type EvalHook<'a> = dyn FnMut(&Model) -> Result<BTreeMap<String, f64>, TrainError> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub records: Vec<StepRecord>,
    pub evals: Vec<(usize, BTreeMap<String, f64>)>,
    pub iterations: usize,
}

fn draw<'a, T: ?Sized>(items: &[&'a T], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a T> {
    if items.is_empty() {
        return Vec::new();
    }
    if n <= items.len() {
        index::sample(rng, items.len(), n).into_iter().map(|i| items[i]).collect()
    } else {
        (0..n).map(|_| items[rng.gen_range(0..items.len())]).collect()
    }
}

fn draw_labeled<'a>(
    items: &[&'a Image],
    labels: &[usize],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<&'a Image>, Vec<usize>) {
    let idx: Vec<usize> = if n <= items.len() {
        index::sample(rng, items.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..items.len())).collect()
    };
    (idx.iter().map(|&i| items[i]).collect(), idx.iter().map(|&i| labels[i]).collect())
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, id))
}

/// Trains a freshly initialized model for `config.sgd.total_iters`
/// iterations. Every random choice derives from `seed`; log lines differ
/// between identical runs only in `wall_time_s`.
pub fn train_run(
    config: &TrainConfig,
    data: &TrainData,
    seed: u64,
    log: &mut dyn Write,
    mut eval: Option<&mut EvalHook>,
) -> Result<(Model, Sgd, RunSummary), TrainError> {
    config.validate()?;
    if data.source.is_empty() || data.source.len() != data.source_labels.len() {
        return Err(TrainError::EmptyBatch("source"));
    }
    if data.target.is_empty() {
        return Err(TrainError::EmptyBatch("target"));
    }
    let mut model = Model::new(config.model.clone(), data.num_classes, data.grid_size, seed)?;
    if model.has_psi() {
        let warm: Vec<&Image> = data
            .source
            .iter()
            .take(CALIBRATION_IMAGES / 2)
            .chain(data.target.iter().take(CALIBRATION_IMAGES / 2))
            .copied()
            .collect();
        model.calibrate_vocabulary(&warm)?;
    }
    let algo = EntropyThreshold {
        lambda: config.weights.lambda_target_entropy,
        rho: default_rho(data.num_classes),
    };
    let policy = GradientRoutingPolicy::new(config.model.unfreeze_post_block);
    let mut opt = Sgd::new(config.sgd.clone());
    let (mut rs, mut rt) = (stream(seed, STREAM_SOURCE), stream(seed, STREAM_TARGET));
    let mut rps = stream(seed, STREAM_PRETEXT_SOURCE);
    let mut rpt = stream(seed, STREAM_PRETEXT_TARGET);
    let use_pretext = config.weights.weight_pretext > 0.0;
    let bs = config.batch_size;
    let start = Instant::now();
    let mut summary = RunSummary {
        records: Vec::new(),
        evals: Vec::new(),
        iterations: config.sgd.total_iters,
    };
    writeln!(
        log,
        "{}",
        json!({
            "event": "start",
            "seed": seed,
            "algo": "entropy_threshold",
            "use_psi": config.model.use_psi,
            "weight_em": config.weights.weight_em,
            "weight_pretext": config.weights.weight_pretext,
            "total_iters": config.sgd.total_iters,
        })
    )?;
    let total = config.sgd.total_iters;
    for iter in 0..total {
        let (src, labels) = draw_labeled(&data.source, &data.source_labels, bs, &mut rs);
        let tgt = draw(&data.target, bs, &mut rt);
        let (ps, pt) = if use_pretext {
            (draw(&data.pretext_source, bs, &mut rps), draw(&data.pretext_target, bs, &mut rpt))
        } else {
            (Vec::new(), Vec::new())
        };
        let batch = StepBatch {
            source: &src,
            source_labels: &labels,
            target: &tgt,
            pretext_source: &ps,
            pretext_target: &pt,
        };
        let rec = {
            let _guard = TrainingGuard::enter();
            let (w, p) = (&config.weights, &policy);
            match config.schedule {
                Schedule::Joint => train_step(&mut model, &algo, p, w, &mut opt, &batch, TermSet::ALL, iter)?,
                Schedule::Alternating => {
                    let mut r = train_step(&mut model, &algo, p, w, &mut opt, &batch, TermSet::GOAL, iter)?;
                    let sub = train_step(&mut model, &algo, p, w, &mut opt, &batch, TermSet::SUBSIDIARY, iter)?;
                    r.merge(&sub);
                    r
                }
            }
        };
        let done = iter + 1;
        if config.log_every > 0 && (done % config.log_every == 0 || done == total) {
            writeln!(
                log,
                "{}",
                json!({
                    "event": "step",
                    "iter": done,
                    "lr": config.sgd.lr_at(iter),
                    "losses": rec,
                    "wall_time_s": start.elapsed().as_secs_f64(),
                })
            )?;
        }
        summary.records.push(rec);
        if config.eval_every > 0 && done % config.eval_every == 0 && done != total {
            if let Some(hook) = eval.as_deref_mut() {
                let m = hook(&model)?;
                log_eval(log, done, &m, start)?;
                summary.evals.push((done, m));
            }
        }
    }
    if let Some(hook) = eval.as_deref_mut() {
        let m = hook(&model)?;
        log_eval(log, total, &m, start)?;
        summary.evals.push((total, m));
    }
    Ok((model, opt, summary))
}

fn log_eval(
    log: &mut dyn Write,
    iter: usize,
    metrics: &BTreeMap<String, f64>,
    start: Instant,
) -> Result<(), TrainError> {
    writeln!(
        log,
        "{}",
        json!({
            "event": "eval",
            "iter": iter,
            "metrics": metrics,
            "wall_time_s": start.elapsed().as_secs_f64(),
        })
    )?;
    Ok(())
}
