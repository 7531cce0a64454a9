use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{hex, ExperimentConfig};
use super::data::{read_eval_labels, read_meta, DataMeta, Datasets};
use super::runner::{evaluate, layer_metrics, predictions, run_variant, Variant};
use super::ExpError;
use crate::metrics::{
    bins_monotone, select_layer, spearman, EvalManifest, LayerMetrics, LayerTrials, MetricsReport,
    TradeoffCriterion,
};
use crate::synthgen::SealedLabels;
use crate::train::UNKNOWN;

/// Copy of the experiment config stored next to generated data, so that
/// evaluation can recover the scenario from the data directory alone.
pub const DATA_CONFIG_FILE: &str = "config.toml";

/// Tolerated drop between adjacent entropy-bin means.
pub const BIN_SLACK_NATS: f64 = 0.02;

fn create_dir(dir: &Path) -> Result<(), ExpError> {
    fs::create_dir_all(dir).map_err(|e| ExpError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), ExpError> {
    fs::write(path, text).map_err(|e| ExpError::io(path, e))
}

fn with_seed(mut cfg: ExperimentConfig, seed_override: Option<u64>) -> ExperimentConfig {
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    cfg
}

/// Generates every split and writes it to `out`.
pub fn cmd_generate(config: &Path, out: &Path, seed_override: Option<u64>) -> Result<DataMeta, ExpError> {
    let cfg = with_seed(ExperimentConfig::load(config)?, seed_override);
    let data = Datasets::generate(&cfg)?;
    data.write(&cfg, out)?;
    write_file(&out.join(DATA_CONFIG_FILE), &cfg.to_toml())?;
    Ok(data.meta(&cfg))
}

/// Loads the training views of `data_dir` and checks they were generated
/// from `cfg`'s scenario.
fn load_data(cfg: &ExperimentConfig, data_dir: &Path) -> Result<Datasets, ExpError> {
    Datasets::read(cfg, data_dir)
}

fn data_config(data_dir: &Path) -> Result<ExperimentConfig, ExpError> {
    ExperimentConfig::load(&data_dir.join(DATA_CONFIG_FILE))
}

/// Training seed: the override if given, else the config seed. The data
/// seed always comes from the data directory's config.
fn training_setup(
    config: &Path,
    data_dir: &Path,
) -> Result<(ExperimentConfig, Datasets), ExpError> {
    let cfg = ExperimentConfig::load(config)?;
    let data_cfg = data_config(data_dir)?;
    if data_cfg.data_hash() != cfg.data_hash() {
        return Err(ExpError::HashMismatch {
            what: "dataset",
            expected: hex(&cfg.data_hash()),
            found: hex(&data_cfg.data_hash()),
        });
    }
    let data = load_data(&cfg, data_dir)?;
    Ok((cfg, data))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn cmd_train(
    config: &Path,
    data_dir: &Path,
    out: &Path,
    variant: Variant,
    seed_override: Option<u64>,
) -> Result<TrainOutcome, ExpError> {
    let (cfg, data) = training_setup(config, data_dir)?;
    let seed = seed_override.unwrap_or(cfg.seed);
    create_dir(out)?;
    let log_path = out.join(format!("{}_seed{seed}.jsonl", variant.name()));
    let file = fs::File::create(&log_path).map_err(|e| ExpError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let (model, opt, summary) = run_variant(&cfg, &data, variant, seed, &mut log, None)?;
    log.flush().map_err(|e| ExpError::io(&log_path, e))?;
    let ck = Checkpoint::from_model(&model, &opt, data.data_hash, seed, summary.iterations as u64);
    let ck_path = out.join(format!("{}_seed{seed}.ckpt", variant.name()));
    ck.save(&ck_path)?;
    Ok(TrainOutcome { checkpoint: ck_path, log: log_path })
}

/// Evaluates a checkpoint on the sealed target split of `data_dir`; writes
/// `report.json`, `summary.csv` and per-sample `predictions.csv` to `out`.
pub fn cmd_eval(checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<MetricsReport, ExpError> {
    let ck = Checkpoint::load(checkpoint)?;
    let meta = read_meta(data_dir)?;
    if meta.data_hash != hex(&ck.data_hash) {
        return Err(ExpError::HashMismatch {
            what: "checkpoint/dataset",
            expected: hex(&ck.data_hash),
            found: meta.data_hash,
        });
    }
    let cfg = data_config(data_dir)?;
    let data = load_data(&cfg, data_dir)?;
    let model = ck.to_model()?;
    let sealed = read_eval_labels(data_dir)?;
    if sealed.len() != data.target_eval.len() {
        return Err(ExpError::Format("sealed manifest size differs from target_eval".into()));
    }
    let report = evaluate(&cfg, &data, &model, &sealed)?;
    create_dir(out)?;
    let manifest = EvalManifest::from_sealed(&sealed, &data.spec);
    let preds = predictions(&cfg, &data, &model)?;
    let mut csv = String::from("id,truth,prediction\n");
    for (i, (t, p)) in manifest.truth.iter().zip(&preds).enumerate() {
        let t = t.map_or("unknown".to_string(), |c| c.to_string());
        let p = if *p == UNKNOWN { "unknown".to_string() } else { p.to_string() };
        csv.push_str(&format!("{i},{t},{p}\n"));
    }
    write_file(&out.join("predictions.csv"), &csv)?;
    write_file(
        &out.join("report.json"),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    let pas = report.pas.map_or(String::new(), |p| format!("{p:.10}"));
    write_file(
        &out.join("summary.csv"),
        &format!(
            "h_score,shared_acc,private_acc,pas\n{:.10},{:.10},{:.10},{pas}\n",
            report.h_score, report.shared_acc, report.private_acc
        ),
    )?;
    Ok(report)
}

/// Per-layer mean ± population std of NTR and DIS, their Spearman
/// correlations with depth, and the Definition-1 selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<LayerRow>,
    pub spearman_ntr: Option<f64>,
    pub spearman_dis: Option<f64>,
    pub selected_layer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub ntr_mean: f64,
    pub ntr_std: f64,
    pub dis_mean: f64,
    pub dis_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Aggregates per-seed layer metrics (`per_seed[s][l]`).
pub fn layer_table(
    seeds: &[u64],
    per_seed: &[Vec<LayerMetrics>],
    criterion: &TradeoffCriterion,
) -> Result<LayerTable, ExpError> {
    if per_seed.len() < 2 {
        return Err(ExpError::Validation("layer analysis needs n_seeds >= 2".into()));
    }
    let depth = per_seed[0].len();
    let mut rows = Vec::new();
    let mut trials = Vec::new();
    for l in 0..depth {
        let ntr: Vec<f64> = per_seed.iter().map(|s| s[l].ntr).collect();
        let dis: Vec<f64> = per_seed.iter().map(|s| s[l].dis).collect();
        let (ntr_mean, ntr_std) = mean_std(&ntr);
        let (dis_mean, dis_std) = mean_std(&dis);
        rows.push(LayerRow { layer: per_seed[0][l].layer, ntr_mean, ntr_std, dis_mean, dis_std });
        trials.push(LayerTrials {
            layer: per_seed[0][l].layer,
            trials: ntr.into_iter().zip(dis).collect(),
        });
    }
    let depths: Vec<f64> = rows.iter().map(|r| r.layer as f64).collect();
    let ntr_means: Vec<f64> = rows.iter().map(|r| r.ntr_mean).collect();
    let dis_means: Vec<f64> = rows.iter().map(|r| r.dis_mean).collect();
    Ok(LayerTable {
        seeds: seeds.to_vec(),
        spearman_ntr: spearman(&depths, &ntr_means),
        spearman_dis: spearman(&depths, &dis_means),
        selected_layer: select_layer(&trials, criterion)?,
        rows,
    })
}

impl LayerTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,ntr_mean,ntr_std,dis_mean,dis_std\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.10},{:.10},{:.10},{:.10}\n",
                r.layer, r.ntr_mean, r.ntr_std, r.dis_mean, r.dis_std
            ));
        }
        s
    }
}

fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var("BOWUNIDA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

fn seeds_from(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Trains the baseline once per seed and measures NTR/DIS at every
/// backbone tap.
pub fn cmd_layer_analysis(
    config: &Path,
    data_dir: &Path,
    out: &Path,
    n_seeds: usize,
    seed_override: Option<u64>,
) -> Result<LayerTable, ExpError> {
    if n_seeds < 2 {
        return Err(ExpError::Validation("--n-seeds must be at least 2".into()));
    }
    let (cfg, data) = training_setup(config, data_dir)?;
    let sealed = read_eval_labels(data_dir)?;
    create_dir(out)?;
    let seeds = seeds_from(seed_override.unwrap_or(cfg.seed), n_seeds);
    let per_seed = thread_pool().install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let (model, _, _) = run_variant(&cfg, &data, Variant::Baseline, seed, &mut std::io::sink(), None)?;
                layer_metrics(&cfg, &data, &model, &sealed, seed)
            })
            .collect::<Result<Vec<_>, ExpError>>()
    })?;
    let mut crit = cfg.metrics.criterion.clone();
    crit.n_trials = n_seeds;
    let table = layer_table(&seeds, &per_seed, &crit)?;
    write_file(&out.join("layer_analysis.csv"), &table.to_csv())?;
    write_file(
        &out.join("layer_analysis.json"),
        &(serde_json::to_string_pretty(&table).expect("table serializes") + "\n"),
    )?;
    Ok(table)
}

/// One trained cell of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    /// Per variant, h-scores in `seeds` order.
    pub h_scores: BTreeMap<Variant, Vec<f64>>,
    pub means: BTreeMap<Variant, f64>,
    /// Seeds on which full_spa beats the baseline.
    pub spa_wins: usize,
    /// Mean h-score ordering full_spa > pretext_only ≥ arch_em ≥ baseline.
    pub ordering_holds: bool,
    /// At least 4/5 of the seeds (rounded up) favour full_spa.
    pub sign_test_passes: bool,
    pub cells: Vec<AblationCell>,
}

/// Paired wins of `a` over `b`.
pub fn sign_test_wins(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x > y).count()
}

pub fn ablation_table(seeds: &[u64], cells: Vec<AblationCell>) -> AblationTable {
    let mut h_scores: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
    for &v in &Variant::ALL {
        let row = seeds
            .iter()
            .filter_map(|&s| cells.iter().find(|c| c.variant == v && c.seed == s))
            .map(|c| c.report.h_score)
            .collect::<Vec<_>>();
        if !row.is_empty() {
            h_scores.insert(v, row);
        }
    }
    let means: BTreeMap<Variant, f64> = h_scores
        .iter()
        .map(|(&v, r)| (v, r.iter().sum::<f64>() / r.len() as f64))
        .collect();
    let m = |v| means.get(&v).copied().unwrap_or(f64::NAN);
    let ordering_holds = m(Variant::FullSpa) > m(Variant::PretextOnly)
        && m(Variant::PretextOnly) >= m(Variant::ArchEm)
        && m(Variant::ArchEm) >= m(Variant::Baseline);
    let empty = Vec::new();
    let spa_wins = sign_test_wins(
        h_scores.get(&Variant::FullSpa).unwrap_or(&empty),
        h_scores.get(&Variant::Baseline).unwrap_or(&empty),
    );
    let needed = (4 * seeds.len()).div_ceil(5);
    AblationTable {
        seeds: seeds.to_vec(),
        spa_wins,
        ordering_holds,
        sign_test_passes: m(Variant::FullSpa) - m(Variant::Baseline) > 0.0 && spa_wins >= needed,
        h_scores,
        means,
        cells,
    }
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant");
        for seed in &self.seeds {
            s.push_str(&format!(",seed_{seed}"));
        }
        s.push_str(",mean\n");
        for (v, row) in &self.h_scores {
            s.push_str(v.name());
            for x in row {
                s.push_str(&format!(",{x:.10}"));
            }
            s.push_str(&format!(",{:.10}\n", self.means[v]));
        }
        s
    }

    /// Seeds on which a variant's entropy bins are monotone within
    /// [`BIN_SLACK_NATS`].
    pub fn monotone_bin_seeds(&self, v: Variant) -> usize {
        self.cells
            .iter()
            .filter(|c| c.variant == v && !c.report.entropy_bins.is_empty())
            .filter(|c| bins_monotone(&c.report.entropy_bins, BIN_SLACK_NATS))
            .count()
    }

    /// Seeds on which PAS of `a` exceeds PAS of `b`.
    pub fn pas_wins(&self, a: Variant, b: Variant) -> usize {
        self.seeds
            .iter()
            .filter(|&&s| {
                let pas = |v| {
                    self.cells
                        .iter()
                        .find(|c| c.variant == v && c.seed == s)
                        .and_then(|c| c.report.pas)
                };
                matches!((pas(a), pas(b)), (Some(x), Some(y)) if x > y)
            })
            .count()
    }
}

/// Trains and evaluates every (variant, seed) cell; baseline cells also
/// carry per-layer NTR/DIS. Jobs run on the `BOWUNIDA_THREADS` pool and are
/// merged in sorted order.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    data: &Datasets,
    sealed: &SealedLabels,
    seeds: &[u64],
    variants: &[Variant],
    log_dir: Option<&Path>,
) -> Result<AblationTable, ExpError> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let mut cells = thread_pool().install(|| {
        jobs.par_iter()
            .map(|&(variant, seed)| {
                let (model, _, _) = match log_dir {
                    Some(dir) => {
                        let path = dir.join(format!("{}_seed{seed}.jsonl", variant.name()));
                        let f = fs::File::create(&path).map_err(|e| ExpError::io(&path, e))?;
                        let mut w = BufWriter::new(f);
                        let r = run_variant(cfg, data, variant, seed, &mut w, None)?;
                        w.flush().map_err(|e| ExpError::io(&path, e))?;
                        r
                    }
                    None => run_variant(cfg, data, variant, seed, &mut std::io::sink(), None)?,
                };
                let mut report = evaluate(cfg, data, &model, sealed)?;
                if variant == Variant::Baseline {
                    report.layers = layer_metrics(cfg, data, &model, sealed, seed)?;
                }
                Ok(AblationCell { variant, seed, report })
            })
            .collect::<Result<Vec<_>, ExpError>>()
    })?;
    cells.sort_by_key(|c| (c.variant, c.seed));
    Ok(ablation_table(seeds, cells))
}

pub fn cmd_ablation(
    config: &Path,
    data_dir: &Path,
    out: &Path,
    n_seeds: usize,
    seed_override: Option<u64>,
) -> Result<AblationTable, ExpError> {
    if n_seeds < 3 {
        return Err(ExpError::Validation("--n-seeds must be at least 3".into()));
    }
    let (cfg, data) = training_setup(config, data_dir)?;
    let sealed = read_eval_labels(data_dir)?;
    let seeds = seeds_from(seed_override.unwrap_or(cfg.seed), n_seeds);
    let logs = out.join("logs");
    create_dir(&logs)?;
    let table = run_ablation(&cfg, &data, &sealed, &seeds, &Variant::ALL, Some(&logs))?;
    write_file(&out.join("ablation.csv"), &table.to_csv())?;
    write_file(
        &out.join("ablation.json"),
        &(serde_json::to_string_pretty(&table).expect("table serializes") + "\n"),
    )?;
    Ok(table)
}
