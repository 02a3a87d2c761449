//! Desk-scale seed × ablation sweeps: train every combination, then score
//! the translated held-out source images with an oracle fitted once per task
//! on target-domain training data.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{TaskConfig, TaskData};
use crate::error::{Error, Result};
use crate::eval::{adaptation_accuracy, missing_modes};
use crate::networks::oracle::{gather, FitConfig, OracleClassifier};
use crate::trainer::{Ablation, RunPaths, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        let f = FitConfig::default();
        Self {
            channels: crate::networks::ModelConfig::default().oracle_channels,
            epochs: f.epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            seed: 0,
        }
    }
}

impl OracleSettings {
    fn fit_config(&self) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    /// Template; `seed` and `ablation` are overridden per run.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub ablations: Vec<Ablation>,
    #[serde(default)]
    pub oracle: OracleSettings,
    /// Minimum oracle confidence for a mode to count as covered.
    #[serde(default)]
    pub threshold: f64,
    /// Target test images in the fixed symmetry probe batch.
    #[serde(default = "default_probe")]
    pub probe_size: usize,
}

fn default_probe() -> usize {
    64
}

impl ExperimentConfig {
    /// Eight-mode ring, squares → disks, full model against the
    /// single-critic ablation.
    pub fn shapes8() -> Self {
        let task = TaskConfig::shapes8();
        let image = crate::networks::ImageShape::new(1, 16, 16);
        let mut train = TrainConfig::for_image(&image, 2000, 0);
        train.batch_size = 16;
        train.attention.half_width = 5.0;
        train.attention.half_height = 5.0;
        Self {
            task,
            train,
            seeds: (1..=5).collect(),
            ablations: vec![Ablation::Full, Ablation::NoD2],
            oracle: OracleSettings::default(),
            threshold: 0.0,
            probe_size: default_probe(),
        }
    }

    /// Digits → inverted digits with every loss ablation.
    pub fn digits() -> Self {
        let task = TaskConfig::digits_invert();
        let image = crate::networks::ImageShape::new(1, 16, 16);
        let mut train = TrainConfig::for_image(&image, 2000, 0);
        train.batch_size = 16;
        train.attention.half_width = 6.0;
        train.attention.half_height = 6.0;
        Self {
            task,
            train,
            seeds: (1..=5).collect(),
            ablations: vec![
                Ablation::Full,
                Ablation::NoCst,
                Ablation::NoSym,
                Ablation::NoD2,
            ],
            oracle: OracleSettings::default(),
            threshold: 0.0,
            probe_size: default_probe(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub ablation: Ablation,
    pub seed: u64,
    pub missing_count: usize,
    pub accuracy: f64,
    pub sym_start: f64,
    pub sym_end: f64,
    pub skipped_updates: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub ablation: Ablation,
    pub median_missing: f64,
    pub median_accuracy: f64,
    pub median_sym_start: f64,
    pub median_sym_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: String,
    pub oracle_accuracy: f64,
    pub runs: Vec<RunResult>,
    pub summary: Vec<AblationSummary>,
}

impl ExperimentReport {
    pub fn summary_for(&self, a: Ablation) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.ablation == a)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Oracle for a task, fitted on the target training split.
pub fn fit_oracle(
    data: &TaskData,
    classes: usize,
    s: &OracleSettings,
) -> Result<OracleClassifier<f32>> {
    let mut oracle = OracleClassifier::new(data.target.image, &s.channels, classes, s.seed);
    oracle.fit(&data.target.images, &data.target.labels, &s.fit_config())?;
    Ok(oracle)
}

/// Trains one configuration and scores it.
pub fn run_one(
    data: &TaskData,
    cfg: TrainConfig,
    oracle: &OracleClassifier<f32>,
    threshold: f64,
    probe: &crate::diffcore::Tensor<f32>,
    out: &RunPaths,
) -> Result<RunResult> {
    let t0 = Instant::now();
    let mut trainer = Trainer::for_task(cfg, data)?;
    let sym_start = trainer.probe_symmetry(probe)?;
    crate::trainer::run_steps(&mut trainer, data, out)?;
    let sym_end = trainer.probe_symmetry(probe)?;
    let translated = trainer.models.translate(
        &data.source_test.images,
        trainer.k(),
        trainer.cfg.batch_size,
        true,
    )?;
    let modes = missing_modes(&translated, oracle, threshold)?;
    let acc = adaptation_accuracy(&translated, &data.source_test.labels, oracle)?;
    Ok(RunResult {
        ablation: trainer.cfg.ablation,
        seed: trainer.cfg.seed,
        missing_count: modes.missing_count,
        accuracy: acc.top1,
        sym_start,
        sym_end,
        skipped_updates: trainer.opt.skipped(),
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Every (ablation, seed) pair, in that order. `out`, if given, receives one
/// run directory per pair.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: Option<&std::path::Path>,
) -> Result<ExperimentReport> {
    if cfg.seeds.is_empty() || cfg.ablations.is_empty() {
        return Err(Error::Config(
            "experiment needs at least one seed and one ablation".into(),
        ));
    }
    let data = cfg.task.build()?;
    let oracle = fit_oracle(&data, cfg.task.classes, &cfg.oracle)?;
    let oracle_accuracy = oracle.accuracy(&data.target_test.images, &data.target_test.labels)?;
    log::info!(
        "{}: oracle held-out accuracy {oracle_accuracy:.4}",
        cfg.task.name
    );
    let n_probe = cfg.probe_size.clamp(1, data.target_test.len());
    let probe = gather(&data.target_test.images, &(0..n_probe).collect::<Vec<_>>())?;

    let mut runs = Vec::new();
    for &ablation in &cfg.ablations {
        for &seed in &cfg.seeds {
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            tc.ablation = ablation;
            let paths = RunPaths {
                dir: out.map(|d| d.join(format!("{}-{ablation}-seed{seed}", cfg.task.name))),
            };
            let r = run_one(&data, tc, &oracle, cfg.threshold, &probe, &paths)?;
            log::info!(
                "{} {ablation} seed {seed}: missing {} acc {:.4} sym {:.4} -> {:.4} ({:.1}s)",
                cfg.task.name,
                r.missing_count,
                r.accuracy,
                r.sym_start,
                r.sym_end,
                r.seconds
            );
            runs.push(r);
        }
    }
    let summary = cfg
        .ablations
        .iter()
        .map(|&a| {
            let rs: Vec<&RunResult> = runs.iter().filter(|r| r.ablation == a).collect();
            let col =
                |f: fn(&RunResult) -> f64| median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            AblationSummary {
                ablation: a,
                median_missing: col(|r| r.missing_count as f64),
                median_accuracy: col(|r| r.accuracy),
                median_sym_start: col(|r| r.sym_start),
                median_sym_end: col(|r| r.sym_end),
            }
        })
        .collect();
    Ok(ExperimentReport {
        task: cfg.task.name.clone(),
        oracle_accuracy,
        runs,
        summary,
    })
}
