use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use attnxl::data::Dataset;
use attnxl::eval::{self, CentroidEmbedder, Embedder, OracleEmbedder};
use attnxl::experiments::{fit_oracle, ExperimentConfig};
use attnxl::trainer::{self, checkpoint, Ablation, RunPaths, Trainer};
use attnxl::verify;

#[derive(Parser, Debug)]
#[command(
    name = "attnxl",
    version,
    about = "Attention-guided unpaired image translation at desk scale"
)]
struct Cli {
    /// Default output directory for commands that write files.
    #[arg(long, global = true, env = "ATTNXL_OUT", default_value = "runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    Shapes8,
    Digits,
}

#[derive(clap::Args, Debug, Serialize)]
struct ConfigArgs {
    /// Experiment JSON (task, train template, oracle settings).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in experiment used when no --config is given.
    #[arg(long, value_enum, default_value = "shapes8")]
    preset: Preset,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))
            }
            None => Ok(match self.preset {
                Preset::Shapes8 => ExperimentConfig::shapes8(),
                Preset::Digits => ExperimentConfig::digits(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum EmbedderKind {
    /// Brightness centroid in pixel coordinates.
    Centroid,
    /// Oracle penultimate features, top two principal axes.
    Oracle,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference checks of every operator and the attention encoder.
    Gradcheck {
        #[arg(long, default_value_t = 10.0)]
        k: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Writes the task's four splits as record files.
    MakeData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains one model; writes metrics.jsonl, checkpoints and config.json.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Maps a dataset file (or a directory of them) through a trained model.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        chunk: usize,
        /// Normalize with running statistics instead of per-chunk statistics.
        #[arg(long)]
        running_stats: bool,
    },
    /// Prints score, mode and accuracy reports for a set of samples.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset file or directory of dataset files.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
    },
    /// Writes real and generated points as `x,y,mode,source` CSV.
    Scatter {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "centroid")]
        embedder: EmbedderKind,
    },
}

fn banner<T: Serialize>(command: &str, effective: &T) -> Result<()> {
    eprintln!("attnxl {command} {}", serde_json::to_string(effective)?);
    Ok(())
}

/// A single dataset file, or every `.dagn` file of a directory in name order.
fn load_samples(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "dagn"))
            .collect();
        files.sort();
        let parts = files
            .iter()
            .map(|f| Dataset::load(f).with_context(|| format!("loading {}", f.display())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::concat(&parts)?)
    } else {
        Ok(Dataset::load(path).with_context(|| format!("loading {}", path.display()))?)
    }
}

fn gradcheck(k: f64, seed: u64) -> Result<bool> {
    banner(
        "gradcheck",
        &serde_json::json!({ "k": k, "seed": seed, "epsilon": verify::EPSILON, "tolerance": verify::TOLERANCE }),
    )?;
    let outcomes = verify::full_suite(k, seed)?;
    println!("{}", serde_json::to_string_pretty(&outcomes)?);
    Ok(outcomes.iter().all(|o| o.passed))
}

fn make_data(cfg: &ConfigArgs, out: PathBuf) -> Result<()> {
    let exp = cfg.resolve()?;
    banner(
        "make-data",
        &serde_json::json!({ "task": exp.task, "out": out }),
    )?;
    let data = exp.task.build()?;
    std::fs::create_dir_all(&out)?;
    for (name, d) in [
        ("source", &data.source),
        ("target", &data.target),
        ("source_test", &data.source_test),
        ("target_test", &data.target_test),
    ] {
        d.save(&out.join(format!("{name}.dagn")))?;
    }
    std::fs::write(
        out.join("task.json"),
        serde_json::to_string_pretty(&exp.task)?,
    )?;
    println!(
        "{}",
        serde_json::json!({ "out": out, "n_train": data.source.len(), "n_test": data.source_test.len() })
    );
    Ok(())
}

fn train(
    cfg: &ConfigArgs,
    seed: Option<u64>,
    ablation: Option<Ablation>,
    steps: Option<u64>,
    out: PathBuf,
    resume: Option<PathBuf>,
) -> Result<()> {
    let exp = cfg.resolve()?;
    let mut tc = exp.train.clone();
    if let Some(s) = seed {
        tc.seed = s;
    }
    if let Some(a) = ablation {
        tc.ablation = a;
    }
    if let Some(n) = steps {
        tc.steps = n;
    }
    banner(
        "train",
        &serde_json::json!({ "task": exp.task, "train": tc, "out": out, "resume": resume }),
    )?;
    let data = exp.task.build()?;
    let mut tr = match &resume {
        Some(p) => {
            let mut tr = checkpoint::load(p, Some(&tc))?;
            tr.cfg.steps = tc.steps;
            tr
        }
        None => Trainer::for_task(tc.clone(), &data)?,
    };
    std::fs::create_dir_all(&out)?;
    trainer::write_config(&out.join("config.json"), &tc)?;
    let paths = RunPaths {
        dir: Some(out.clone()),
    };
    let history = trainer::run_steps(&mut tr, &data, &paths)?;
    println!(
        "{}",
        serde_json::json!({
            "steps": tr.step,
            "checkpoint": paths.last(),
            "final": history.last(),
            "skipped_updates": tr.opt.skipped(),
        })
    );
    Ok(())
}

fn translate(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    chunk: usize,
    running_stats: bool,
) -> Result<()> {
    banner(
        "translate",
        &serde_json::json!({ "checkpoint": ckpt, "input": input, "out": out, "chunk": chunk, "running_stats": running_stats }),
    )?;
    let tr = checkpoint::load(ckpt, None)?;
    let src = load_samples(input)?;
    let images = tr
        .models
        .translate(&src.images, tr.k(), chunk, !running_stats)?;
    let translated = Dataset::new(src.image, images, src.labels, src.classes)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    translated.save(out)?;
    println!(
        "{}",
        serde_json::json!({ "out": out, "n": translated.len() })
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    oracle_accuracy: f64,
    score: eval::ScoreReport,
    modes: eval::ModeReport,
    accuracy: eval::AccuracyReport,
}

fn evaluate(cfg: &ConfigArgs, samples: &Path, threshold: f64) -> Result<()> {
    let exp = cfg.resolve()?;
    banner(
        "eval",
        &serde_json::json!({ "task": exp.task, "oracle": exp.oracle, "samples": samples, "threshold": threshold }),
    )?;
    let s = load_samples(samples)?;
    if s.is_empty() {
        bail!(attnxl::Error::EmptyBatch);
    }
    let data = exp.task.build()?;
    let oracle = fit_oracle(&data, exp.task.classes, &exp.oracle)?;
    let out = EvalOutput {
        oracle_accuracy: oracle.accuracy(&data.target_test.images, &data.target_test.labels)?,
        score: eval::inception_score(&s.images, &oracle)?,
        modes: eval::missing_modes(&s.images, &oracle, threshold)?,
        accuracy: eval::adaptation_accuracy(&s.images, &s.labels, &oracle)?,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn scatter(cfg: &ConfigArgs, samples: &Path, out: &Path, kind: EmbedderKind) -> Result<()> {
    let exp = cfg.resolve()?;
    banner(
        "scatter",
        &serde_json::json!({ "task": exp.task, "oracle": exp.oracle, "samples": samples, "out": out, "embedder": kind }),
    )?;
    let s = load_samples(samples)?;
    let data = exp.task.build()?;
    let oracle = fit_oracle(&data, exp.task.classes, &exp.oracle)?;
    let reference = &data.target_test.images;
    let embedder: Box<dyn Embedder + '_> = match kind {
        EmbedderKind::Centroid => Box::new(CentroidEmbedder),
        EmbedderKind::Oracle => Box::new(OracleEmbedder::fit(&oracle, reference)?),
    };
    let rows = eval::emit_scatter(reference, &s.images, embedder.as_ref(), &oracle, out)?;
    println!("{}", serde_json::json!({ "out": out, "rows": rows }));
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let root = cli.out_root;
    match cli.command {
        Command::Gradcheck { k, seed } => return gradcheck(k, seed),
        Command::MakeData { cfg, out } => {
            make_data(&cfg, out.unwrap_or_else(|| root.join("data")))?
        }
        Command::Train {
            cfg,
            seed,
            ablation,
            steps,
            out,
            resume,
        } => train(
            &cfg,
            seed,
            ablation,
            steps,
            out.unwrap_or_else(|| root.join("train")),
            resume,
        )?,
        Command::Translate {
            checkpoint,
            input,
            out,
            chunk,
            running_stats,
        } => translate(&checkpoint, &input, &out, chunk, running_stats)?,
        Command::Eval {
            cfg,
            samples,
            threshold,
        } => evaluate(&cfg, &samples, threshold)?,
        Command::Scatter {
            cfg,
            samples,
            out,
            embedder,
        } => scatter(&cfg, &samples, &out, embedder)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
