//! Alternating minimax training: `D1 → D2 → F` once per step, Adam on every
//! parameter group, seeded batching, checkpoints and a JSONL metrics log.

pub mod adam;
pub mod checkpoint;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, DaeModel};
use crate::data::{BatchIter, Dataset, TaskData};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{
    adv_source, adv_target, consistency_loss, full_objective, symmetry_loss, DistanceMetric,
    LossBundle, LossTerms, LossWeights, Side,
};
use crate::networks::oracle::gather;
use crate::networks::{DiscriminatorModel, GeneratorModel, ImageShape, Mode, ModelConfig};
use adam::{AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Whole image as the single region, no localization.
    NoDae,
    NoCst,
    NoSym,
    NoD2,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoDae,
        Ablation::NoCst,
        Ablation::NoSym,
        Ablation::NoD2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoDae => "no_dae",
            Ablation::NoCst => "no_cst",
            Ablation::NoSym => "no_sym",
            Ablation::NoD2 => "no_d2",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation `{s}` (full, no_dae, no_cst, no_sym, no_d2)"
                ))
            })
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_lr() -> f64 {
    2e-4
}
fn default_batch() -> usize {
    64
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub weights: LossWeights,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    pub steps: u64,
    pub seed: u64,
    #[serde(default)]
    pub ablation: Ablation,
    pub attention: AttentionConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub distance: DistanceMetric,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Let consistency and symmetry also train the encoder. Off by default:
    /// the encoder can then satisfy both terms by collapsing its features.
    #[serde(default)]
    pub content_grads_to_encoder: bool,
}

impl TrainConfig {
    /// Defaults for a task geometry: batch 64, lr 2e-4, α = β = 1, γ = 0.1.
    pub fn for_image(image: &ImageShape, steps: u64, seed: u64) -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            steps,
            seed,
            ablation: Ablation::Full,
            attention: AttentionConfig::for_image(image),
            model: ModelConfig::default(),
            distance: DistanceMetric::L2,
            checkpoint_every: 0,
            content_grads_to_encoder: false,
        }
    }

    pub fn validate(&self, image: &ImageShape) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        let w = &self.weights;
        if [w.alpha, w.beta, w.gamma]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        self.attention.validate(image)?;
        self.model.validate(image)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Weights after the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        match self.ablation {
            Ablation::NoCst => w.alpha = 0.0,
            Ablation::NoSym => w.beta = 0.0,
            _ => {}
        }
        w
    }

    /// Fields that determine parameter shapes; checkpoints must agree on them.
    pub fn structure(&self) -> serde_json::Value {
        serde_json::json!({
            "ablation": self.ablation,
            "n_regions": self.attention.n_regions,
            "half_width": self.attention.half_width,
            "half_height": self.attention.half_height,
            "model": self.model,
        })
    }
}

/// `F = DAE ∘ G` plus both discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub dae: DaeModel<f32>,
    pub gen: GeneratorModel<f32>,
    pub d1: DiscriminatorModel<f32>,
    pub d2: DiscriminatorModel<f32>,
}

impl Models {
    pub fn new(cfg: &TrainConfig, image: ImageShape, classes: usize) -> Result<Self> {
        cfg.validate(&image)?;
        let s = cfg.seed.wrapping_mul(8);
        let dae = DaeModel::new(
            image,
            cfg.attention.clone(),
            &cfg.model,
            classes,
            cfg.ablation == Ablation::NoDae,
            s.wrapping_add(1),
        )?;
        let gen = GeneratorModel::new(
            dae.instance_shape(),
            dae.n_regions(),
            image,
            &cfg.model,
            s.wrapping_add(2),
        );
        let d1 = DiscriminatorModel::new(
            image,
            &cfg.model.discriminator_channels,
            "d1",
            s.wrapping_add(3),
        );
        let d2 = DiscriminatorModel::new(
            image,
            &cfg.model.discriminator_channels,
            "d2",
            s.wrapping_add(4),
        );
        Ok(Self { dae, gen, d1, d2 })
    }

    /// `F(x)` for an (n, c, h, w) batch, processed in chunks of `chunk`.
    /// With `batch_stats` each chunk is normalized by its own statistics
    /// (running statistics are left untouched); otherwise running
    /// statistics are used.
    pub fn translate(
        &self,
        images: &Tensor<f32>,
        k: f64,
        chunk: usize,
        batch_stats: bool,
    ) -> Result<Tensor<f32>> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let mode = if batch_stats { Mode::Train } else { Mode::Eval };
        let mut parts = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
            let mut m = self.clone();
            let mut tape = Tape::new();
            let pd = m.dae.net.bind(&mut tape, false);
            let pg = m.gen.net.bind(&mut tape, false);
            let x = tape.constant(gather(images, &idx)?);
            let inst = m.dae.encode_instances(&mut tape, &pd, x, k, mode)?;
            let y = m.gen.forward(&mut tape, &pg, &inst.instances, mode)?;
            let v = tape.value(y);
            for i in 0..idx.len() {
                parts.push(v.outer(i)?);
            }
        }
        Tensor::stack(&parts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerStates {
    pub dae: AdamState<f32>,
    pub gen: AdamState<f32>,
    pub d1: AdamState<f32>,
    pub d2: AdamState<f32>,
}

impl OptimizerStates {
    fn new(m: &Models) -> Self {
        Self {
            dae: AdamState::new(m.dae.net.params()),
            gen: AdamState::new(m.gen.net.params()),
            d1: AdamState::new(m.d1.net.params()),
            d2: AdamState::new(m.d2.net.params()),
        }
    }

    pub fn skipped(&self) -> u64 {
        self.dae.skipped + self.gen.skipped + self.d1.skipped + self.d2.skipped
    }
}

/// Which discriminator a D-step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Critic {
    D1,
    D2,
}

/// Everything a training run owns.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: Models,
    pub opt: OptimizerStates,
    pub step: u64,
    pub image: ImageShape,
    pub classes: usize,
    pub source_iter: BatchIter,
    pub target_iter: BatchIter,
}

/// Forward products of `F` on one batch pair, kept on the tape.
struct Forward {
    fake_s: Var,
    recon_t: Var,
    cst: Var,
    sym: Var,
    geo: Var,
    pd: Vec<Var>,
    pg: Vec<Var>,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        image: ImageShape,
        classes: usize,
        n_source: usize,
        n_target: usize,
    ) -> Result<Self> {
        let models = Models::new(&cfg, image, classes)?;
        let opt = OptimizerStates::new(&models);
        let source_iter = BatchIter::new(
            n_source,
            cfg.batch_size,
            cfg.seed.wrapping_mul(2).wrapping_add(101),
        )?;
        let target_iter = BatchIter::new(
            n_target,
            cfg.batch_size,
            cfg.seed.wrapping_mul(2).wrapping_add(102),
        )?;
        Ok(Self {
            cfg,
            models,
            opt,
            step: 0,
            image,
            classes,
            source_iter,
            target_iter,
        })
    }

    pub fn for_task(cfg: TrainConfig, data: &TaskData) -> Result<Self> {
        let classes = data.source.classes.max(data.target.classes);
        Self::new(
            cfg,
            data.source.image,
            classes,
            data.source.len(),
            data.target.len(),
        )
    }

    pub fn k(&self) -> f64 {
        self.cfg.attention.k_at(self.step)
    }

    fn forward_f(
        &mut self,
        tape: &mut Tape<f32>,
        s: &Tensor<f32>,
        labels: &[usize],
        t: &Tensor<f32>,
    ) -> Result<Forward> {
        let k = self.k();
        let m = &mut self.models;
        let pd = m.dae.net.bind(tape, true);
        let pg = m.gen.net.bind(tape, true);
        let s = tape.constant(s.clone());
        let t = tape.constant(t.clone());
        let inst_s = m.dae.encode_instances(tape, &pd, s, k, Mode::Train)?;
        let fake_s = m.gen.forward(tape, &pg, &inst_s.instances, Mode::Train)?;
        let inst_t = m.dae.encode_instances(tape, &pd, t, k, Mode::Train)?;
        let recon_t = m.gen.forward(tape, &pg, &inst_t.instances, Mode::Train)?;
        let (inst_fs, inst_ft, ref_s, ref_t) = if self.cfg.content_grads_to_encoder {
            let fs = m.dae.encode_instances(tape, &pd, fake_s, k, Mode::Train)?;
            let ft = m.dae.encode_instances(tape, &pd, recon_t, k, Mode::Train)?;
            (fs, ft, inst_s.clone(), inst_t.clone())
        } else {
            // The encoder is a fixed yardstick for these two terms; only G
            // is pushed by them.
            let frozen = m.dae.net.bind(tape, false);
            let fs = m
                .dae
                .encode_instances(tape, &frozen, fake_s, k, Mode::Train)?;
            let ft = m
                .dae
                .encode_instances(tape, &frozen, recon_t, k, Mode::Train)?;
            (fs, ft, inst_s.detached(tape), inst_t.detached(tape))
        };
        let cst = consistency_loss(tape, &ref_s, &inst_fs, self.cfg.distance)?;
        let sym = symmetry_loss(tape, &ref_t, &inst_ft, self.cfg.distance)?;
        let geo = m.dae.geo_regularizer(tape, &pd, &inst_s, labels)?;
        Ok(Forward {
            fake_s,
            recon_t,
            cst,
            sym,
            geo,
            pd,
            pg,
        })
    }

    /// One discriminator update on `real` vs a detached `fake`. Returns the
    /// discriminator-side loss.
    pub fn critic_step(
        &mut self,
        which: Critic,
        real: &Tensor<f32>,
        fake: &Tensor<f32>,
    ) -> Result<f64> {
        let adam = self.cfg.adam();
        let (d, st) = match which {
            Critic::D1 => (&mut self.models.d1, &mut self.opt.d1),
            Critic::D2 => (&mut self.models.d2, &mut self.opt.d2),
        };
        let mut tape = Tape::new();
        let p = d.net.bind(&mut tape, true);
        let r = tape.constant(real.clone());
        let f = tape.constant(fake.clone());
        let lr = d.forward(&mut tape, &p, r)?;
        let lf = d.forward(&mut tape, &p, f)?;
        let loss = match which {
            Critic::D1 => adv_source(&mut tape, lr, lf, Side::Discriminator)?,
            Critic::D2 => adv_target(&mut tape, lr, lf, Side::Discriminator)?,
        };
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{which:?} loss")));
        }
        tape.backward(loss)?;
        let grads = d.net.grads(&tape, &p);
        st.update(&adam, d.net.params_mut(), &grads)?;
        Ok(value)
    }

    /// `D1`, then `D2` (unless ablated), then `F`.
    pub fn train_step(
        &mut self,
        s: &Tensor<f32>,
        labels: &[usize],
        t: &Tensor<f32>,
    ) -> Result<LossBundle> {
        if s.shape().first() != Some(&labels.len()) {
            return Err(Error::CountMismatch {
                what: "source batch and labels",
                left: s.shape().first().copied().unwrap_or(0),
                right: labels.len(),
            });
        }
        let mut tape = Tape::new();
        let fw = self.forward_f(&mut tape, s, labels, t)?;
        let fake_s = tape.value(fw.fake_s).clone();
        let recon_t = tape.value(fw.recon_t).clone();

        self.critic_step(Critic::D1, t, &fake_s)?;
        let use_d2 = self.cfg.ablation != Ablation::NoD2;
        if use_d2 {
            self.critic_step(Critic::D2, t, &recon_t)?;
        }

        let m = &self.models;
        let p1 = m.d1.net.bind(&mut tape, false);
        let l1 = m.d1.forward(&mut tape, &p1, fw.fake_s)?;
        let real_dummy = l1;
        let adv_s = adv_source(&mut tape, real_dummy, l1, Side::Generator)?;
        let adv_t = if use_d2 {
            let p2 = m.d2.net.bind(&mut tape, false);
            let l2 = m.d2.forward(&mut tape, &p2, fw.recon_t)?;
            adv_target(&mut tape, l2, l2, Side::Generator)?
        } else {
            tape.constant(Tensor::scalar(0.0))
        };
        let terms = LossTerms {
            adv_s,
            adv_t,
            cst: fw.cst,
            sym: fw.sym,
            geo: fw.geo,
        };
        let w = self.cfg.effective_weights();
        let total = full_objective(&mut tape, &terms, &w)?;
        let item = |v: Var| tape.value(v).item() as f64;
        let bundle = LossBundle {
            adv_s: item(adv_s),
            adv_t: item(adv_t),
            cst: item(fw.cst),
            sym: item(fw.sym),
            geo: item(fw.geo),
            total: item(total),
        };
        if !bundle.total.is_finite() {
            return Err(Error::NonFinite("total".into()));
        }
        tape.backward(total)?;
        let adam = self.cfg.adam();
        let m = &mut self.models;
        let gd = m.dae.net.grads(&tape, &fw.pd);
        self.opt.dae.update(&adam, m.dae.net.params_mut(), &gd)?;
        let gg = m.gen.net.grads(&tape, &fw.pg);
        self.opt.gen.update(&adam, m.gen.net.params_mut(), &gg)?;
        self.step += 1;
        Ok(bundle)
    }

    /// Draws the next batch pair and runs [`Trainer::train_step`].
    pub fn step_on(&mut self, source: &Dataset, target: &Dataset) -> Result<LossBundle> {
        let is = self.source_iter.next_indices();
        let it = self.target_iter.next_indices();
        let s = gather(&source.images, &is)?;
        let labels: Vec<usize> = is.iter().map(|&i| source.labels[i]).collect();
        let t = gather(&target.images, &it)?;
        self.train_step(&s, &labels, &t)
    }

    /// Current symmetry loss on a fixed target batch, without updating
    /// anything (batch statistics, running statistics untouched).
    pub fn probe_symmetry(&self, t: &Tensor<f32>) -> Result<f64> {
        let k = self.k();
        let mut m = self.models.clone();
        let mut tape = Tape::new();
        let pd = m.dae.net.bind(&mut tape, false);
        let pg = m.gen.net.bind(&mut tape, false);
        let t = tape.constant(t.clone());
        let inst_t = m.dae.encode_instances(&mut tape, &pd, t, k, Mode::Train)?;
        let recon = m
            .gen
            .forward(&mut tape, &pg, &inst_t.instances, Mode::Train)?;
        let inst_r = m
            .dae
            .encode_instances(&mut tape, &pd, recon, k, Mode::Train)?;
        let sym = symmetry_loss(&mut tape, &inst_t, &inst_r, self.cfg.distance)?;
        Ok(tape.value(sym).item() as f64)
    }
}

/// Output locations of [`train_loop`].
#[derive(Clone, Debug, Default)]
pub struct RunPaths {
    pub dir: Option<PathBuf>,
}

impl RunPaths {
    pub fn metrics(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("metrics.jsonl"))
    }

    pub fn checkpoint(&self, step: u64) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("step_{step:06}.dagn")))
    }

    pub fn last(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("last.dagn"))
    }
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    step: u64,
    #[serde(flatten)]
    losses: &'a LossBundle,
}

/// Runs `cfg.steps` steps. Every step's losses go to `metrics.jsonl`;
/// checkpoints are written every `checkpoint_every` steps and at the end
/// (`last.dagn`). A non-finite loss aborts the run; the previous checkpoint
/// stays on disk.
pub fn train_loop(
    data: &TaskData,
    cfg: TrainConfig,
    out: &RunPaths,
) -> Result<(Trainer, Vec<LossBundle>)> {
    let mut trainer = Trainer::for_task(cfg, data)?;
    let history = run_steps(&mut trainer, data, out)?;
    Ok((trainer, history))
}

/// Continues `trainer` up to its configured step count.
pub fn run_steps(
    trainer: &mut Trainer,
    data: &TaskData,
    out: &RunPaths,
) -> Result<Vec<LossBundle>> {
    if let Some(d) = &out.dir {
        std::fs::create_dir_all(d)?;
    }
    let mut log = match out.metrics() {
        Some(p) => Some(BufWriter::new(
            File::options()
                .create(true)
                .append(trainer.step > 0)
                .write(true)
                .truncate(trainer.step == 0)
                .open(p)?,
        )),
        None => None,
    };
    let mut history = Vec::with_capacity((trainer.cfg.steps.saturating_sub(trainer.step)) as usize);
    while trainer.step < trainer.cfg.steps {
        let bundle = match trainer.step_on(&data.source, &data.target) {
            Ok(b) => b,
            Err(e) => {
                if let Some(l) = log.as_mut() {
                    l.flush()?;
                }
                log::error!(
                    "step {} aborted: {e}; last good checkpoint kept",
                    trainer.step
                );
                return Err(e);
            }
        };
        if let Some(l) = log.as_mut() {
            serde_json::to_writer(
                &mut *l,
                &MetricsLine {
                    step: trainer.step,
                    losses: &bundle,
                },
            )?;
            l.write_all(b"\n")?;
        }
        history.push(bundle);
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && trainer.step % every == 0 {
            if let Some(p) = out.checkpoint(trainer.step) {
                checkpoint::save(&p, trainer)?;
            }
        }
    }
    if let Some(mut l) = log {
        l.flush()?;
    }
    if let Some(p) = out.last() {
        checkpoint::save(&p, trainer)?;
    }
    Ok(history)
}

pub fn write_config(path: &Path, cfg: &TrainConfig) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}
