//! Matching-aware (GAN-CLS) adversarial training.
//!
//! Each iteration takes one discriminator Adam step on
//!
//! ```text
//! L_D = -mean log D(x, t) - 1/2 mean log(1 - D(x', t')) - 1/2 mean log(1 - D(G(z), t))
//! ```
//!
//! where `(x', t')` is a mismatched image/text pair, then one generator step
//! on `L_G = -mean log D(G(z'), t)` with fresh noise `z'`. Every
//! `swap_period`-th iteration the real and generated images trade places in
//! the first and last discriminator terms.
//!
//! All randomness of iteration `k` comes from a generator keyed by
//! `(seed, k)`, and the batch order of epoch `e` from one keyed by
//! `(seed, e)`. A run can therefore resume from any checkpoint and replay
//! exactly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, MODEL_MAGIC};
use crate::embedding::EmbeddingConfig;
use crate::engine::{AdamConfig, Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{init_params, Discriminator, Generator, ModelConfig, NoiseKind, Optimizer};
use crate::scalar::Scalar;
use crate::synth::{Dataset, DatasetRecord, Split};

/// Inputs to every logarithm in the losses are clamped below at this value.
pub const LOG_FLOOR: f64 = 1e-8;
/// Consecutive saturated iterations before a collapse warning.
pub const COLLAPSE_PATIENCE: u64 = 50;
const COLLAPSE_REAL: f64 = 0.99;
const COLLAPSE_FAKE: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchStrategy {
    /// Pairs the matching caption with another record's image.
    #[default]
    WrongImage,
    /// Pairs the real image with another record's caption.
    WrongCaption,
}

impl std::str::FromStr for MismatchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wrong_image" => Ok(MismatchStrategy::WrongImage),
            "wrong_caption" => Ok(MismatchStrategy::WrongCaption),
            other => Err(Error::contract(format!(
                "mismatch_strategy must be wrong_image or wrong_caption, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: u64,
    pub swap_period: u64,
    pub swap_enabled: bool,
    pub seed: u64,
    pub image_size: usize,
    pub mismatch_strategy: MismatchStrategy,
    /// Stops after this many iterations when nonzero.
    pub max_iters: u64,
    /// Checkpoint interval in iterations; zero writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub noise_dim: usize,
    pub reduced_text_dim: usize,
    pub g_channels: usize,
    pub d_channels: usize,
    pub joint_channels: usize,
    pub noise: NoiseKind,
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::desk(0);
        TrainConfig {
            batch_size: 64,
            lr_g: 0.0002,
            lr_d: 0.0001,
            beta1: 0.5,
            beta2: 0.5,
            epochs: 200,
            swap_period: 3,
            swap_enabled: true,
            seed: 0,
            image_size: model.image_size,
            mismatch_strategy: MismatchStrategy::WrongImage,
            max_iters: 0,
            checkpoint_every: 0,
            noise_dim: model.noise_dim,
            reduced_text_dim: model.reduced_text_dim,
            g_channels: model.g_channels,
            d_channels: model.d_channels,
            joint_channels: model.joint_channels,
            noise: model.noise,
            init_std: model.init_std,
        }
    }
}

fn parse_value<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

impl TrainConfig {
    /// Parses flat `key = value` lines; `#` starts a comment. Keys not set
    /// keep their defaults and unknown keys are errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected key = value, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(fail)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "batch_size" => self.batch_size = parse_value(v)?,
            "lr_g" => self.lr_g = parse_value(v)?,
            "lr_d" => self.lr_d = parse_value(v)?,
            "beta1" => self.beta1 = parse_value(v)?,
            "beta2" => self.beta2 = parse_value(v)?,
            "epochs" => self.epochs = parse_value(v)?,
            "swap_period" => self.swap_period = parse_value(v)?,
            "swap_enabled" => self.swap_enabled = parse_value(v)?,
            "seed" => self.seed = parse_value(v)?,
            "image_size" => self.image_size = parse_value(v)?,
            "mismatch_strategy" => self.mismatch_strategy = parse_value(v)?,
            "max_iters" => self.max_iters = parse_value(v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(v)?,
            "noise_dim" => self.noise_dim = parse_value(v)?,
            "reduced_text_dim" => self.reduced_text_dim = parse_value(v)?,
            "g_channels" => self.g_channels = parse_value(v)?,
            "d_channels" => self.d_channels = parse_value(v)?,
            "joint_channels" => self.joint_channels = parse_value(v)?,
            "noise" => self.noise = parse_value(v)?,
            "init_std" => self.init_std = parse_value(v)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Renders every field in the format [`TrainConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (k, v) in json.as_object().expect("struct serializes to an object") {
            let v = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.swap_period == 0 {
            return Err(Error::contract("swap_period must be at least 1"));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0 && self.lr_g.is_finite() && self.lr_d.is_finite()) {
            return Err(Error::contract("learning rates must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::contract("batchnorm needs a batch of at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        self.adam().validate()?;
        self.model_config(1).validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn model_config(&self, text_dim: usize) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            text_dim,
            noise_dim: self.noise_dim,
            reduced_text_dim: self.reduced_text_dim,
            g_channels: self.g_channels,
            d_channels: self.d_channels,
            joint_channels: self.joint_channels,
            noise: self.noise,
            init_std: self.init_std,
        }
    }
}

/// `L_D` over discriminator probabilities for the real, mismatched and fake inputs.
pub fn discriminator_loss<S: Scalar>(tape: &mut Tape<S>, real: Var, mismatch: Var, fake: Var) -> Result<Var> {
    let log_real = tape.clamped_log(real, LOG_FLOOR)?;
    let real_term = tape.mean(log_real)?;
    let not_mis = tape.one_minus(mismatch)?;
    let log_mis = tape.clamped_log(not_mis, LOG_FLOOR)?;
    let mis_term = tape.mean(log_mis)?;
    let not_fake = tape.one_minus(fake)?;
    let log_fake = tape.clamped_log(not_fake, LOG_FLOOR)?;
    let fake_term = tape.mean(log_fake)?;
    let a = tape.scale(real_term, -1.0)?;
    let b = tape.scale(mis_term, -0.5)?;
    let c = tape.scale(fake_term, -0.5)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Non-saturating `L_G = -mean log D(fake)`.
pub fn generator_loss<S: Scalar>(tape: &mut Tape<S>, fake: Var) -> Result<Var> {
    let l = tape.clamped_log(fake, LOG_FLOOR)?;
    let m = tape.mean(l)?;
    tape.scale(m, -1.0)
}

/// True when iteration `iter` (counted from 1) exchanges real and fake images.
pub fn is_swap_iteration(iter: u64, period: u64) -> bool {
    period > 0 && iter % period == 0
}

/// Returns the `(real slot, fake slot)` inputs of iteration `iter` and whether they were exchanged.
pub fn apply_label_swap<T>(iter: u64, real: T, fake: T, period: u64) -> Result<(T, T, bool)> {
    if iter == 0 || period == 0 {
        return Err(Error::contract("swap schedule counts iterations and periods from 1"));
    }
    if is_swap_iteration(iter, period) {
        Ok((fake, real, true))
    } else {
        Ok((real, fake, false))
    }
}

/// Picks a record from `pool` other than `index` whose caption differs from
/// that of `index`, so the pair is a genuine mismatch.
pub fn sample_mismatch(records: &[DatasetRecord], pool: &[usize], index: usize, rng: &mut impl Rng) -> Result<usize> {
    let own = &records[index].caption.text;
    let ok = |j: usize| j != index && records[j].caption.text != *own;
    for _ in 0..64 {
        let j = pool[rng.random_range(0..pool.len())];
        if ok(j) {
            return Ok(j);
        }
    }
    let candidates: Vec<usize> = pool.iter().copied().filter(|&j| ok(j)).collect();
    if candidates.is_empty() {
        return Err(Error::contract(format!("record {index} has no record with a different caption")));
    }
    Ok(candidates[rng.random_range(0..candidates.len())])
}

/// Inputs of one training iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    pub indices: Vec<usize>,
    /// Index of the record used for each row's mismatched pair.
    pub mismatch_indices: Vec<usize>,
    pub real: Tensor<S>,
    pub text: Tensor<S>,
    pub mismatch_images: Tensor<S>,
    pub mismatch_text: Tensor<S>,
    pub noise_d: Tensor<S>,
    pub noise_g: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub iter: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    /// Mean `D(x, t)` over the real images, wherever the swap placed them.
    pub d_real: f64,
    pub d_mismatch: f64,
    /// Mean `D(G(z), t)` over the generated images of the discriminator step.
    pub d_fake: f64,
    pub swap_applied: bool,
    pub collapse_warning: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainerMeta {
    config: TrainConfig,
    model: ModelConfig,
    embedding: EmbeddingConfig,
    iteration: u64,
    collapse_streak: u64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const EPOCH_STREAM: u64 = 1 << 63;

fn mean_of<S: Scalar>(tape: &Tape<S>, v: Var) -> f64 {
    let vals = tape.value(v);
    vals.iter().map(|x| x.as_f64()).sum::<f64>() / vals.len() as f64
}

#[derive(Clone, Debug)]
pub struct Trainer<S> {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub embedding: EmbeddingConfig,
    pub generator: Generator<S>,
    pub discriminator: Discriminator<S>,
    pub opt_g: Optimizer<S>,
    pub opt_d: Optimizer<S>,
    /// Completed iterations.
    pub iteration: u64,
    collapse_streak: u64,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: TrainConfig, embedding: &EmbeddingConfig) -> Result<Self> {
        config.validate()?;
        let model = config.model_config(embedding.dim);
        let (generator, discriminator) = init_params(config.seed, &model)?;
        let opt_g = Optimizer::new(&generator.params, config.adam(), config.lr_g)?;
        let opt_d = Optimizer::new(&discriminator.params, config.adam(), config.lr_d)?;
        Ok(Trainer {
            config,
            model,
            embedding: embedding.clone(),
            generator,
            discriminator,
            opt_g,
            opt_d,
            iteration: 0,
            collapse_streak: 0,
        })
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<Vec<usize>> {
        if ds.image_size != self.model.image_size {
            return Err(Error::contract(format!(
                "dataset images are {0}x{0}, model expects {1}x{1}",
                ds.image_size, self.model.image_size
            )));
        }
        if ds.embedding != self.embedding {
            return Err(Error::contract("dataset embedding settings differ from the trainer's"));
        }
        let train = ds.indices(Split::Train);
        if train.len() < self.config.batch_size {
            return Err(Error::contract(format!(
                "{} training records cannot fill a batch of {}",
                train.len(),
                self.config.batch_size
            )));
        }
        Ok(train)
    }

    /// Iterations the configured run lasts on `ds`.
    pub fn total_iterations(&self, ds: &Dataset) -> Result<u64> {
        let per_epoch = (self.check_dataset(ds)?.len() / self.config.batch_size) as u64;
        let total = per_epoch * self.config.epochs;
        Ok(match self.config.max_iters {
            0 => total,
            cap => total.min(cap),
        })
    }

    /// Assembles the batch of iteration `iter` (counted from 1).
    pub fn batch(&self, ds: &Dataset, iter: u64) -> Result<Batch<S>> {
        let train = self.check_dataset(ds)?;
        let b = self.config.batch_size;
        let per_epoch = (train.len() / b) as u64;
        let (epoch, slot) = ((iter - 1) / per_epoch, ((iter - 1) % per_epoch) as usize);
        let mut order = train.clone();
        order.shuffle(&mut stream_rng(self.config.seed, EPOCH_STREAM | epoch));
        let indices = order[slot * b..(slot + 1) * b].to_vec();

        let mut rng = stream_rng(self.config.seed, iter);
        let mismatch_indices = indices
            .iter()
            .map(|&i| sample_mismatch(&ds.records, &train, i, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let noise_d = self.model.sample_noise(b, &mut rng);
        let noise_g = self.model.sample_noise(b, &mut rng);

        let s = ds.image_size;
        let images = |ids: &[usize]| {
            let data = ids.iter().flat_map(|&i| ds.image::<S>(i)).collect();
            Tensor::new(vec![ids.len(), 3, s, s], data)
        };
        let texts = |ids: &[usize]| {
            let data = ids.iter().flat_map(|&i| ds.records[i].embedding.to_scalar::<S>()).collect();
            Tensor::new(vec![ids.len(), ds.embedding.dim], data)
        };
        let real = images(&indices)?;
        let text = texts(&indices)?;
        let (mismatch_images, mismatch_text) = match self.config.mismatch_strategy {
            MismatchStrategy::WrongImage => (images(&mismatch_indices)?, text.clone()),
            MismatchStrategy::WrongCaption => (real.clone(), texts(&mismatch_indices)?),
        };
        Ok(Batch {
            indices,
            mismatch_indices,
            real,
            text,
            mismatch_images,
            mismatch_text,
            noise_d,
            noise_g,
        })
    }

    /// Runs the next iteration on `ds`.
    pub fn step(&mut self, ds: &Dataset) -> Result<TrainStepReport> {
        let batch = self.batch(ds, self.iteration + 1)?;
        self.train_step(&batch)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &Batch<S>) -> Result<TrainStepReport> {
        let iter = self.iteration + 1;
        let swap = self.config.swap_enabled && is_swap_iteration(iter, self.config.swap_period);

        let mut tape = Tape::new();
        let gb = self.generator.bind(&mut tape, false);
        let z = tape.leaf(&batch.noise_d);
        let phi = tape.leaf(&batch.text);
        let fake = self.generator.forward(&mut tape, &gb, z, phi, Mode::Train)?;
        let db = self.discriminator.bind(&mut tape, true);
        let real = tape.leaf(&batch.real);
        let mis_img = tape.leaf(&batch.mismatch_images);
        let mis_txt = tape.leaf(&batch.mismatch_text);
        let (real_slot, fake_slot) = if swap { (fake.output, real) } else { (real, fake.output) };
        let d = &self.discriminator;
        let s_real = d.forward(&mut tape, &db, real_slot, phi, Mode::Train)?;
        let s_mis = d.forward(&mut tape, &db, mis_img, mis_txt, Mode::Train)?;
        let s_fake = d.forward(&mut tape, &db, fake_slot, phi, Mode::Train)?;
        let loss_d = discriminator_loss(&mut tape, s_real.probs, s_mis.probs, s_fake.probs)?;
        let grads = tape.backward(loss_d)?;
        self.opt_d.step(&mut self.discriminator.params, &grads, &db)?;
        self.generator.update_running_stats(&fake.moments);
        for s in [&s_real, &s_mis, &s_fake] {
            self.discriminator.update_running_stats(&s.moments);
        }
        let (on_real, on_fake) = if swap { (s_fake.probs, s_real.probs) } else { (s_real.probs, s_fake.probs) };
        let d_real = mean_of(&tape, on_real);
        let d_fake = mean_of(&tape, on_fake);
        let d_mismatch = mean_of(&tape, s_mis.probs);
        let loss_d = tape.value(loss_d)[0].as_f64();

        let mut tape = Tape::new();
        let gb = self.generator.bind(&mut tape, true);
        let db = self.discriminator.bind(&mut tape, false);
        let z = tape.leaf(&batch.noise_g);
        let phi = tape.leaf(&batch.text);
        let fake = self.generator.forward(&mut tape, &gb, z, phi, Mode::Train)?;
        let scores = self.discriminator.forward(&mut tape, &db, fake.output, phi, Mode::Train)?;
        let loss_g = generator_loss(&mut tape, scores.probs)?;
        let grads = tape.backward(loss_g)?;
        self.opt_g.step(&mut self.generator.params, &grads, &gb)?;
        let loss_g = tape.value(loss_g)[0].as_f64();

        if d_real > COLLAPSE_REAL && d_fake < COLLAPSE_FAKE {
            self.collapse_streak += 1;
        } else {
            self.collapse_streak = 0;
        }
        self.iteration = iter;
        Ok(TrainStepReport {
            iter,
            loss_d,
            loss_g,
            d_real,
            d_mismatch,
            d_fake,
            swap_applied: swap,
            collapse_warning: self.collapse_streak >= COLLAPSE_PATIENCE,
        })
    }

    /// Trains until the configured iteration count, handing each report to
    /// `on_report`. With a checkpoint path, saves every `checkpoint_every`
    /// iterations and at the end.
    pub fn run<F>(&mut self, ds: &Dataset, checkpoint: Option<&Path>, mut on_report: F) -> Result<()>
    where
        F: FnMut(&TrainStepReport) -> Result<()>,
    {
        let total = self.total_iterations(ds)?;
        while self.iteration < total {
            let report = self.step(ds)?;
            on_report(&report)?;
            let every = self.config.checkpoint_every;
            if let Some(path) = checkpoint {
                if every > 0 && self.iteration % every == 0 && self.iteration < total {
                    self.checkpoint()?.save(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.checkpoint()?.save(path)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<S>> {
        let meta = TrainerMeta {
            config: self.config.clone(),
            model: self.model.clone(),
            embedding: self.embedding.clone(),
            iteration: self.iteration,
            collapse_streak: self.collapse_streak,
        };
        let mut ck = Checkpoint::new(MODEL_MAGIC, &meta)?;
        ck.add_params(&self.generator.params, Some(&self.opt_g));
        ck.add_params(&self.discriminator.params, Some(&self.opt_d));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint<S>) -> Result<Self> {
        if ck.magic != MODEL_MAGIC {
            return Err(Error::contract("not a model checkpoint"));
        }
        let meta: TrainerMeta = ck.meta_as()?;
        let mut t = Trainer::new(meta.config, &meta.embedding)?;
        if t.model != meta.model {
            return Err(Error::contract("checkpoint model settings disagree with its training settings"));
        }
        ck.restore_params(&mut t.generator.params, Some(&mut t.opt_g))?;
        ck.restore_params(&mut t.discriminator.params, Some(&mut t.opt_d))?;
        t.iteration = meta.iteration;
        t.collapse_streak = meta.collapse_streak;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
