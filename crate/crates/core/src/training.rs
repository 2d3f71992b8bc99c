//! Pseudo-supervised alternating GAN training.
//!
//! Each step updates D once on `(I_inp, I_fake.detach())`, then E and G
//! jointly on the weighted generator objective. Reference, masks and
//! background all come from the source image, which is also the target.

use std::cell::Cell;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, RngState, FORMAT_TAG};
use crate::dataset::{make_pseudo_supervised_batch, Batch, DatasetIndex, SplitTag};
use crate::error::{Error, Result};
use crate::evaluation::psnr;
use crate::losses::{
    adversarial_loss_d, adversarial_loss_g, hair_loss, pixel_loss, style_reconstruction_loss,
    total_generator_objective, GeneratorAdversarial, GeneratorTerms, LossReport, LossWeights,
};
use crate::networks::{NetworkConfig, Networks, PerceptualConfig, PerceptualExtractor};
use crate::nn::{scalar, tensor_to_images};
use crate::optim::{Adam, AdamSnapshot};

/// Global gradient norm bound used when clipping is enabled.
pub const CLIP_NORM: f64 = 10.0;

/// Noise is drawn from this stream; epoch permutations use `EPOCH_STREAM_BASE + epoch`.
const NOISE_STREAM: u64 = 0;
const EVAL_STREAM: u64 = 1;
const EPOCH_STREAM_BASE: u64 = 1 << 32;

thread_local! {
    static TRAINING_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// True while the current thread holds a [`TrainingGuard`], e.g. inside [`Trainer::train_step`].
pub fn in_training_step() -> bool {
    TRAINING_DEPTH.with(|d| d.get() > 0)
}

/// Marks the current thread as training until dropped. Custom training loops hold one per step.
#[must_use]
pub struct TrainingGuard;

impl TrainingGuard {
    pub fn enter() -> Self {
        TRAINING_DEPTH.with(|d| d.set(d.get() + 1));
        TrainingGuard
    }
}

impl Drop for TrainingGuard {
    fn drop(&mut self) {
        TRAINING_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub data_root: PathBuf,
    pub split_fraction: f64,
    pub runs_dir: PathBuf,
    pub network: NetworkConfig,
    pub perceptual: PerceptualConfig,
    pub adversarial: GeneratorAdversarial,
    /// Clip the global gradient norm of each update to [`CLIP_NORM`].
    pub clip_gradients: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 55,
            lr_g: 1e-4,
            lr_d: 1e-4,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 1000,
            data_root: PathBuf::from("data"),
            split_fraction: 0.8,
            runs_dir: PathBuf::from("runs"),
            network: NetworkConfig::default(),
            perceptual: PerceptualConfig::default(),
            adversarial: GeneratorAdversarial::default(),
            clip_gradients: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.split_fraction > 0.0 && self.split_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "split_fraction must be in (0, 1], got {}",
                self.split_fraction
            )));
        }
        self.weights.validate()?;
        self.network.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// `ceil(n_train / batch_size)`.
    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.batch_size) as u64
    }
}

/// Everything a step reads or writes.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub nets: Networks,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub epoch: u64,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

pub struct Trainer {
    config: TrainConfig,
    state: TrainState,
    extractor: PerceptualExtractor,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        Self::new_on(config, DType::F32, &Device::Cpu)
    }

    pub fn new_on(config: TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let nets = Networks::new(&config.network, config.seed, dtype, device)?;
        let opt_g = Adam::new(&nets.synthesis_params(), config.lr_g)?;
        let opt_d = Adam::new(nets.discriminator_params(), config.lr_d)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(NOISE_STREAM);
        let extractor = PerceptualExtractor::new(&config.perceptual, dtype, device)?;
        Ok(Self {
            config,
            state: TrainState {
                nets,
                opt_g,
                opt_d,
                epoch: 0,
                step: 0,
                rng,
            },
            extractor,
        })
    }

    /// Resume from a training checkpoint. The stored network layout must match `config`.
    pub fn from_checkpoint(checkpoint: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let meta = &checkpoint.meta;
        if meta.network != config.network {
            return Err(Error::Checkpoint("network configuration differs from the checkpoint".into()));
        }
        let (Some(rng), Some((g_steps, d_steps))) = (&meta.rng, meta.optimizer_steps) else {
            return Err(Error::Checkpoint("inference-only checkpoint cannot resume training".into()));
        };
        let mut trainer = Self::new(config)?;
        let st = &mut trainer.state;
        st.nets.load_params(&checkpoint.tensors, true)?;
        st.opt_g.load_state(&checkpoint.tensors, "opt_g", g_steps)?;
        st.opt_d.load_state(&checkpoint.tensors, "opt_d", d_steps)?;
        st.epoch = meta.epoch;
        st.step = meta.step;
        st.rng = rng.restore()?;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn networks(&self) -> &Networks {
        &self.state.nets
    }

    pub fn extractor(&self) -> &PerceptualExtractor {
        &self.extractor
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let st = &self.state;
        let mut tensors = std::collections::HashMap::new();
        for (name, var) in st.nets.all_params() {
            tensors.insert(name, var.as_tensor().copy()?);
        }
        for (name, t) in st.opt_g.state_tensors("opt_g").into_iter().chain(st.opt_d.state_tensors("opt_d")) {
            tensors.insert(name, t);
        }
        Ok(Checkpoint {
            meta: CheckpointMeta {
                format: FORMAT_TAG.into(),
                network: st.nets.config.clone(),
                train: Some(self.config.clone()),
                epoch: st.epoch,
                step: st.step,
                rng: Some(RngState::capture(&st.rng)),
                optimizer_steps: Some((st.opt_g.steps(), st.opt_d.steps())),
            },
            tensors,
        })
    }

    /// One D update followed by one joint E+G update.
    ///
    /// On a non-finite loss or gradient the state is rolled back to what it
    /// was before the call and a numeric error carrying the step index is returned.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let _guard = TrainingGuard::enter();
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        if !batch.all_in(SplitTag::Train) {
            return Err(Error::Argument("training batch contains test-split samples".into()));
        }
        let step = self.state.step + 1;
        let rng_before = self.state.rng.clone();
        let d_before = self.state.opt_d.snapshot()?;
        match self.try_step(batch) {
            Ok(mut report) => {
                self.state.step = step;
                report.step = step;
                report.epoch = self.state.epoch;
                Ok(report)
            }
            Err(e) => {
                self.rollback(rng_before, &d_before)?;
                Err(e.at_step(step))
            }
        }
    }

    fn rollback(&mut self, rng: ChaCha8Rng, d: &AdamSnapshot) -> Result<()> {
        self.state.rng = rng;
        self.state.opt_d.restore(d)
    }

    fn try_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let st = &mut self.state;
        let nets = &st.nets;
        let clip = self.config.clip_gradients.then_some(CLIP_NORM);
        let t = batch.to_tensors(nets.dtype(), nets.device())?;

        let style = nets.encode_style(&t.hair)?;
        let noise = nets.sample_noise(&mut st.rng, batch.len())?;
        let out = nets.generator.forward(&noise, &t.target_mask, &t.background, &style)?;
        let fake = out.image;

        let real_scores = nets.discriminator.forward(&t.input)?;
        let fake_scores = nets.discriminator.forward(&fake.detach())?;
        let loss_d = adversarial_loss_d(&real_scores, &fake_scores)?;
        let adv_d = scalar(&loss_d)?;
        if !adv_d.is_finite() {
            return Err(Error::numeric("adv_d"));
        }
        let grads_d = loss_d.backward()?;
        check_grad_norm(&st.opt_d, &grads_d, "adv_d")?;
        st.opt_d.step(&grads_d, clip)?;

        // Pseudo-supervision: H_fake = I_fake * M_t is compared with H_ref.
        let hair_fake = fake.broadcast_mul(&t.target_mask)?;
        let terms = GeneratorTerms {
            adv: adversarial_loss_g(&nets.discriminator.forward(&fake)?, self.config.adversarial)?,
            hair: hair_loss(&t.hair, &hair_fake, &self.extractor, &self.config.weights)?,
            pix: pixel_loss(&t.input, &fake)?,
            style: style_reconstruction_loss(&style, &nets.encoder.forward(&hair_fake)?)?,
        };
        let (total, mut report) = total_generator_objective(&terms, &self.config.weights)?;
        let grads_g = total.backward()?;
        check_grad_norm(&st.opt_g, &grads_g, "total_g")?;
        st.opt_g.step(&grads_g, clip)?;
        report.adv_d = adv_d;
        Ok(report)
    }

    /// Generator output for a batch with noise from a fixed evaluation stream.
    pub fn reconstruct(&self, batch: &Batch) -> Result<Tensor> {
        let nets = &self.state.nets;
        let t = batch.to_tensors(nets.dtype(), nets.device())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(EVAL_STREAM);
        let noise = nets.sample_noise(&mut rng, batch.len())?;
        let style = nets.encode_style(&t.hair)?;
        Ok(nets
            .generator
            .forward(&noise, &t.target_mask, &t.background, &style)?
            .image
            .detach())
    }

    /// Mean PSNR between reconstructions and their source images.
    pub fn reconstruction_psnr(&self, batch: &Batch) -> Result<f64> {
        let fakes = tensor_to_images(&self.reconstruct(batch)?)?;
        let total: f64 = fakes
            .iter()
            .zip(&batch.samples)
            .map(|(f, s)| psnr(f, &s.image))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        Ok(total / batch.len() as f64)
    }
}

fn check_grad_norm(opt: &Adam, grads: &candle_core::backprop::GradStore, term: &str) -> Result<()> {
    if opt.grad_norm(grads)?.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("{term} gradient")))
    }
}

/// Deterministic permutation of the training ids for one epoch.
pub fn epoch_order(train_ids: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EPOCH_STREAM_BASE + epoch);
    let mut ids = train_ids.to_vec();
    ids.shuffle(&mut rng);
    ids
}

/// Append-only JSON-lines log of [`LossReport`]s.
pub struct TrainingLog {
    file: File,
}

impl TrainingLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    pub fn append(&mut self, report: &LossReport) -> Result<()> {
        let line = serde_json::to_string(report).expect("report serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io("log.jsonl", e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<LossReport>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::io(path, e)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    /// Reports of the steps run by this call (not earlier resumed ones).
    pub reports: Vec<LossReport>,
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("ckpt-{step}"))
}

/// Run `epochs * ceil(N_train / batch)` steps in total, writing `log.jsonl`
/// and `ckpt-<step>` files into `run_dir`. With `resume`, training continues
/// from that checkpoint and the log is appended to.
pub fn train(config: &TrainConfig, run_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let index = DatasetIndex::open_or_build(&config.data_root, config.split_fraction, config.seed)?;
    let train_ids = index.train_ids();
    if train_ids.is_empty() {
        return Err(Error::Config(format!("{}: no training samples", config.data_root.display())));
    }
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path, &Device::Cpu)?, config.clone())?,
        None => Trainer::new(config.clone())?,
    };
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut log = TrainingLog::open(run_dir.join("log.jsonl"))?;

    let per_epoch = config.steps_per_epoch(train_ids.len());
    let total = per_epoch * config.epochs as u64;
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    let mut order: Option<(u64, Vec<usize>)> = None;
    while trainer.step() < total {
        let step = trainer.step();
        let epoch = step / per_epoch;
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order = Some((epoch, epoch_order(&train_ids, config.seed, epoch)));
        }
        let ids = &order.as_ref().expect("set above").1;
        let start = (step % per_epoch) as usize * config.batch_size;
        let end = (start + config.batch_size).min(ids.len());
        let batch = make_pseudo_supervised_batch(&index, &ids[start..end])?;
        trainer.state.epoch = epoch;
        let report = trainer.train_step(&batch)?;
        log.append(&report)?;
        tracing::info!(
            step = report.step,
            epoch = report.epoch,
            total_g = report.total_g,
            adv_d = report.adv_d,
            "train step"
        );
        reports.push(report);
        let done = trainer.step();
        if done == total || (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) {
            let path = checkpoint_path(run_dir, done);
            trainer.checkpoint()?.save(&path)?;
            checkpoints.push(path);
        }
    }
    let final_checkpoint = match checkpoints.last() {
        Some(p) => p.clone(),
        None => {
            // Resumed at or past the end: re-export the current state.
            let path = checkpoint_path(run_dir, trainer.step());
            trainer.checkpoint()?.save(&path)?;
            checkpoints.push(path.clone());
            path
        }
    };
    Ok(TrainOutcome {
        final_checkpoint,
        checkpoints,
        reports,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmokeReport {
    pub n_images: usize,
    pub n_steps: usize,
    pub initial_psnr: f64,
    pub final_psnr: f64,
    pub reports: Vec<LossReport>,
}

impl SmokeReport {
    pub fn improved(&self) -> bool {
        self.final_psnr > self.initial_psnr
    }

    /// Trailing moving average of `L_pix` ending at 1-based step `end`.
    pub fn pix_moving_average(&self, end: usize, window: usize) -> Option<f64> {
        if window == 0 || end < window || end > self.reports.len() {
            return None;
        }
        let slice = &self.reports[end - window..end];
        Some(slice.iter().map(|r| r.pix).sum::<f64>() / window as f64)
    }
}

/// Overfit the first `n_images` training samples for `n_steps` steps and
/// compare reconstruction PSNR before and after.
pub fn overfit_smoke(config: &TrainConfig, n_images: usize, n_steps: usize) -> Result<SmokeReport> {
    let index = DatasetIndex::open_or_build(&config.data_root, config.split_fraction, config.seed)?;
    let mut trainer = Trainer::new(config.clone())?;
    trainer.overfit_smoke(&index, n_images, n_steps)
}

impl Trainer {
    pub fn overfit_smoke(&mut self, index: &DatasetIndex, n_images: usize, n_steps: usize) -> Result<SmokeReport> {
        if !(1..=32).contains(&n_images) {
            return Err(Error::Argument(format!("n_images must be in 1..=32, got {n_images}")));
        }
        let ids = index.train_ids();
        if ids.len() < n_images {
            return Err(Error::Argument(format!(
                "{n_images} images requested, only {} training samples",
                ids.len()
            )));
        }
        let all = make_pseudo_supervised_batch(index, &ids[..n_images])?;
        let batches: Vec<Batch> = all
            .samples
            .chunks(self.config.batch_size)
            .map(|c| Batch { samples: c.to_vec() })
            .collect();
        let initial_psnr = self.reconstruction_psnr(&all)?;
        let mut reports = Vec::with_capacity(n_steps);
        for i in 0..n_steps {
            let report = self.train_step(&batches[i % batches.len()])?;
            tracing::debug!(step = report.step, pix = report.pix, total_g = report.total_g, "smoke step");
            reports.push(report);
        }
        let final_psnr = self.reconstruction_psnr(&all)?;
        Ok(SmokeReport {
            n_images,
            n_steps,
            initial_psnr,
            final_psnr,
            reports,
        })
    }
}
