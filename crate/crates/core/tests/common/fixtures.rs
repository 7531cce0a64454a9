use std::path::Path;

use bowunida::exp::ExperimentConfig;

/// A scenario small enough for end-to-end command tests.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 3;
    c.scenario.name = "tiny".into();
    c.scenario.image_size_px = 16;
    c.scenario.train_images_per_domain = 60;
    c.scenario.eval_target_images = 60;
    c.model.image_size = 16;
    c.model.widths = vec![4, 4, 8, 8];
    c.model.vocab_size = 6;
    c.train.batch_size = 4;
    c.train.log_every_iters = 1;
    c.train.sgd.total_iters = 3;
    c.pretext.train_per_domain = 40;
    c.pretext.eval_per_bin = 50;
    c.metrics.probe_images_per_domain = 40;
    c
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join("experiment.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}

/// JSON-lines log with the wall-clock fields removed.
pub fn log_without_wall_time(text: &str) -> Vec<serde_json::Value> {
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_s");
            v
        })
        .collect()
}
