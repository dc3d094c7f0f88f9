//! Target-age sampling, the two-pass training step, the training loop with
//! resumable checkpoints, and pretraining of the frozen inversion encoder.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{fmt_f64, EncoderMode, KeyValues, TrainConfig};
use crate::encoder::{EncoderSpec, PyramidEncoder, SamModel};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorSpec};
use crate::losses::{step_objective, LossBreakdown, ObjectiveContext};
use crate::nn::ParamSet;
use crate::optim::{Adam, Ranger};
use crate::oracles::{sample_scene_codes, Oracles, PerceptualExtractor, PretrainReport, PretrainSchedule};
use crate::types::{flip_last_axis, AgeYears, Image, DEVICE, MAX_AGE, MIN_AGE};

/// Source age with probability `p_same`, otherwise a uniform draw on `[5, 100]`.
///
/// Always consumes one coin and at most one uniform draw from `rng`.
pub fn sample_target_age(rng: &mut ChaCha8Rng, source: AgeYears, p_same: f64) -> Result<AgeYears> {
    if !(0.0..=1.0).contains(&p_same) {
        return Err(Error::Range(format!("p_same {p_same} outside [0, 1]")));
    }
    if rng.gen::<f64>() < p_same {
        Ok(source.clamped())
    } else {
        Ok(AgeYears(rng.gen_range(MIN_AGE..=MAX_AGE)))
    }
}

/// Targets for a whole batch: one coin decides whether every target equals its
/// (clamped) source estimate; otherwise each target is drawn uniformly.
pub fn sample_batch_targets(rng: &mut ChaCha8Rng, sources: &[f64], p_same: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p_same) {
        return Err(Error::Range(format!("p_same {p_same} outside [0, 1]")));
    }
    if rng.gen::<f64>() < p_same {
        Ok(sources.iter().map(|s| s.clamp(MIN_AGE, MAX_AGE)).collect())
    } else {
        Ok(sources.iter().map(|_| rng.gen_range(MIN_AGE..=MAX_AGE)).collect())
    }
}

/// Images drawn from the generator: image `i` is `G(sample_latent(seeds[i]))`.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor,
    seeds: Vec<u64>,
}

impl Dataset {
    pub fn from_seeds(gen: &Generator, seeds: Vec<u64>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::Invalid("dataset must not be empty".into()));
        }
        let mut parts = Vec::new();
        for chunk in seeds.chunks(256) {
            parts.push(gen.synthesize_batch(&gen.sample_batch(chunk)?)?);
        }
        Ok(Self {
            images: Tensor::cat(&parts, 0)?,
            seeds,
        })
    }

    /// `n` images with seeds `base, base + 1, ...`.
    pub fn range(gen: &Generator, base: u64, n: usize) -> Result<Self> {
        Self::from_seeds(gen, (0..n as u64).map(|i| base + i).collect())
    }

    pub fn from_images(images: &[Image]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Invalid("dataset must not be empty".into()));
        }
        Ok(Self {
            images: Image::stack(images)?,
            seeds: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn image(&self, i: usize) -> Result<Image> {
        Ok(Image::from_tensor_unchecked(self.images.get(i)?))
    }

    pub fn select(&self, idx: &[usize]) -> Result<Tensor> {
        let idx: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx.clone(), idx.len(), &DEVICE)?;
        Ok(self.images.index_select(&idx, 0)?)
    }
}

/// Mutable training state: model, optimizer, random stream and counters.
pub struct Trainer {
    pub model: SamModel,
    pub oracles: Oracles,
    pub config: TrainConfig,
    ctx: ObjectiveContext,
    optimizer: Ranger,
    rng: ChaCha8Rng,
    step: u64,
    running_loss: f64,
}

const TRAIN_STREAM: u64 = 0x7a11_0000;

impl Trainer {
    /// A fresh run: aging encoder initialized from `config.seed`.
    pub fn new(
        generator: Arc<Generator>,
        inversion: PyramidEncoder,
        oracles: Oracles,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if config.resolution != generator.resolution() {
            return Err(Error::shape(generator.resolution(), config.resolution));
        }
        let aging = SamModel::fresh_aging_encoder(&generator, config.mode, config.seed)?;
        let model = SamModel::new(generator, aging, inversion, config.mode)?;
        Self::with_model(model, oracles, config)
    }

    fn with_model(model: SamModel, oracles: Oracles, config: TrainConfig) -> Result<Self> {
        let optimizer = Ranger::new(
            model.aging.trainable_params(),
            config.learning_rate,
            config.lookahead_k,
            config.lookahead_alpha,
        )?;
        let ctx = ObjectiveContext::from_config(&config, model.generator.average());
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ TRAIN_STREAM),
            model,
            oracles,
            ctx,
            optimizer,
            config,
            step: 0,
            running_loss: 0.0,
        })
    }

    /// Restores a run saved by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, oracles: Oracles) -> Result<Self> {
        let (model, config) = sam_from_checkpoint(ckpt, true)?;
        let mut t = Self::with_model(model, oracles, config)?;
        t.optimizer.load_state(ckpt)?;
        t.step = ckpt.metadata.parse_req("step")?;
        t.running_loss = ckpt.metadata.parse_req("running_loss")?;
        let seed = parse_hex32(ckpt.metadata.require("rng.seed")?)?;
        t.rng = ChaCha8Rng::from_seed(seed);
        t.rng.set_word_pos(ckpt.metadata.parse_req("rng.word_pos")?);
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Exponential moving average of the grand total.
    pub fn running_loss(&self) -> f64 {
        self.running_loss
    }

    /// One optimization step on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &Dataset) -> Result<LossBreakdown> {
        let b = self.config.batch_size;
        let idx: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..data.len())).collect();
        let flips: Vec<bool> = (0..b)
            .map(|_| self.rng.gen::<f64>() < self.config.flip_probability)
            .collect();
        let raw = data.select(&idx)?;
        let images = if flips.iter().any(|&f| f) {
            let rows = (0..b)
                .map(|i| {
                    let img = raw.get(i)?;
                    if flips[i] {
                        flip_last_axis(&img)
                    } else {
                        Ok(img)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&rows, 0)?
        } else {
            raw
        };
        let sources = self.oracles.age.predict_many(&images)?;
        let targets = sample_batch_targets(&mut self.rng, &sources, self.config.same_age_probability)?;
        self.train_on(&images, &sources, &targets)
    }

    /// One optimization step on an explicit batch.
    pub fn train_on(&mut self, images: &Tensor, sources: &[f64], targets: &[f64]) -> Result<LossBreakdown> {
        let step = self.step;
        let model = &self.model;
        let (grand, breakdown) = step_objective(images, sources, targets, &self.ctx, &self.oracles, |x, t| {
            model.transform_batch(x, t)
        })
        .map_err(|e| Error::AtStep {
            step,
            source: Box::new(e),
        })?;
        if !breakdown.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("{breakdown:?}"),
            });
        }
        let grads = grand.backward()?;
        self.optimizer.step(&grads)?;
        self.step += 1;
        self.running_loss = if self.step == 1 {
            breakdown.grand_total
        } else {
            0.98 * self.running_loss + 0.02 * breakdown.grand_total
        };
        Ok(breakdown)
    }

    /// The full resumable state.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = sam_checkpoint(&self.model, &self.config)?;
        c.metadata.set("step", self.step);
        c.metadata.set("running_loss", fmt_f64(self.running_loss));
        c.metadata.set("rng.seed", hex32(&self.rng.get_seed()));
        c.metadata.set("rng.word_pos", self.rng.get_word_pos());
        self.optimizer.save_state(&mut c);
        Ok(c)
    }
}

fn hex32(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_hex32(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Invalid(format!("bad rng seed `{s}`"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

fn copy_prefixed(dst: &mut KeyValues, prefix: &str, src: &KeyValues) {
    for k in src.keys() {
        dst.set(&format!("{prefix}{k}"), src.get(k).unwrap_or_default());
    }
}

fn strip_prefix(src: &KeyValues, prefix: &str) -> KeyValues {
    let mut out = KeyValues::default();
    for k in src.keys() {
        if let Some(rest) = k.strip_prefix(prefix) {
            out.set(rest, src.get(k).unwrap_or_default());
        }
    }
    out
}

/// Model-only checkpoint (no optimizer state): config, generator spec, both encoders.
pub fn sam_checkpoint(model: &SamModel, config: &TrainConfig) -> Result<Checkpoint> {
    let mut c = Checkpoint::new("sam");
    c.metadata.set("mode", model.mode);
    c.metadata.set("step", 0);
    let mut kv = KeyValues::default();
    config.write(&mut kv);
    copy_prefixed(&mut c.metadata, "train.", &kv);
    let mut kv = KeyValues::default();
    model.generator.spec().write(&mut kv);
    copy_prefixed(&mut c.metadata, "gen.", &kv);
    model.aging.spec().write(&mut c.metadata, "aging.");
    model.inversion.spec().write(&mut c.metadata, "inversion.");
    c.insert_params("aging.", model.aging.params())?;
    c.insert_params("inversion.", model.inversion.params())?;
    Ok(c)
}

/// Rebuilds the model stored in a `sam` checkpoint; `trainable` controls the aging encoder.
pub fn sam_from_checkpoint(c: &Checkpoint, trainable: bool) -> Result<(SamModel, TrainConfig)> {
    c.expect_kind("sam")?;
    let config = TrainConfig::from_kv(&strip_prefix(&c.metadata, "train."))?;
    let gen = Arc::new(Generator::new(GeneratorSpec::from_kv(&strip_prefix(&c.metadata, "gen."))?)?);
    let aging = PyramidEncoder::from_params(
        EncoderSpec::read(&c.metadata, "aging.")?,
        c.params("aging.")?,
        trainable,
    )?;
    let inversion = PyramidEncoder::from_params(
        EncoderSpec::read(&c.metadata, "inversion.")?,
        c.params("inversion.")?,
        false,
    )?;
    let mode: EncoderMode = c
        .metadata
        .require("mode")?
        .parse()
        .map_err(Error::Invalid)?;
    Ok((SamModel::new(gen, aging, inversion, mode)?, config))
}

/// Keeps the header and the first `rows` data lines of an existing metrics file.
fn truncate_csv(path: &Path, rows: u64) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for line in text.lines().take(rows as usize + 1) {
        out.push_str(line);
        out.push('\n');
    }
    Ok(out)
}

/// Runs the trainer up to `config.steps`, writing `losses.csv` and periodic
/// checkpoints (`ckpt_{step}.ckpt`) under `out_dir`, and `sam.ckpt` at the end.
pub fn train(trainer: &mut Trainer, data: &Dataset, out_dir: &Path) -> Result<Checkpoint> {
    if data.is_empty() {
        return Err(Error::Invalid("dataset must not be empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("losses.csv");
    let prefix = if trainer.step_count() > 0 && csv_path.exists() {
        truncate_csv(&csv_path, trainer.step_count())?
    } else {
        format!("{}\n", LossBreakdown::CSV_HEADER)
    };
    let mut csv = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    csv.write_all(prefix.as_bytes()).map_err(|e| Error::io(&csv_path, e))?;
    let every = trainer.config.checkpoint_every;
    while trainer.step_count() < trainer.config.steps {
        let step = trainer.step_count();
        let b = trainer.train_step(data)?;
        writeln!(csv, "{}", b.csv_row(step as usize)).map_err(|e| Error::AtStep {
            step,
            source: Box::new(Error::io(&csv_path, e)),
        })?;
        if every > 0 && trainer.step_count() % every == 0 {
            let path = out_dir.join(format!("ckpt_{}.ckpt", trainer.step_count()));
            trainer.checkpoint()?.save(&path).map_err(|e| Error::AtStep {
                step: trainer.step_count(),
                source: Box::new(e),
            })?;
        }
        if trainer.step_count() % 100 == 0 {
            log::info!(
                "step {} grand_total {:.5} (avg {:.5})",
                trainer.step_count(),
                b.grand_total,
                trainer.running_loss()
            );
        }
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    let ckpt = trainer.checkpoint()?;
    ckpt.save(&out_dir.join("sam.ckpt"))?;
    Ok(ckpt)
}

/// Settings of the inversion-encoder pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct InverterSchedule {
    pub schedule: PretrainSchedule,
    pub lambda_perceptual: f64,
    /// Weight of the latent supervision term `mean((E(G(w)) - w)^2)`.
    pub lambda_latent: f64,
}

impl Default for InverterSchedule {
    fn default() -> Self {
        Self {
            schedule: PretrainSchedule {
                steps: 1000,
                batch_size: 16,
                learning_rate: 2e-3,
                seed: 31,
            },
            lambda_perceptual: 0.5,
            lambda_latent: 1.0,
        }
    }
}

/// Trains the 3-plane inversion encoder on generator samples, then freezes it.
///
/// Half of each batch are `W` samples, half group-mixed codes, so both the
/// dataset images and edited outputs are covered. The report holds the mean
/// reconstruction MSE on held-out `W` samples (`recon_mse`).
pub fn pretrain_inverter(
    gen: &Generator,
    perceptual: &PerceptualExtractor,
    plan: &InverterSchedule,
) -> Result<(PyramidEncoder, PretrainReport)> {
    let s = &plan.schedule;
    let spec = EncoderSpec::new(3, gen.layers(), gen.dim(), gen.resolution());
    let enc = PyramidEncoder::new(spec.clone(), s.seed, true)?.with_offset(gen.average())?;
    let mut opt = Adam::new(enc.trainable_params(), s.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x1a7e);
    for step in 0..s.steps {
        let lr = if step * 3 >= s.steps * 2 {
            s.learning_rate * 0.2
        } else {
            s.learning_rate
        };
        opt.set_lr(lr);
        let half = s.batch_size / 2;
        let w_seeds: Vec<u64> = (0..s.batch_size - half).map(|_| rng.gen()).collect();
        let codes = Tensor::cat(
            &[&gen.sample_batch(&w_seeds)?, &sample_scene_codes(gen, &mut rng, half)?],
            0,
        )?;
        let images = gen.synthesize_batch(&codes)?;
        let pred = enc.forward(&images)?;
        let recon = gen.synthesize_batch(&pred)?;
        let pix = (&recon - &images)?.sqr()?.mean_all()?;
        let perc = crate::losses::perceptual_loss(&images, &recon, perceptual)?;
        let lat = (&pred - &codes)?.sqr()?.mean_all()?;
        let loss = ((pix + (perc * plan.lambda_perceptual)?)? + (lat * plan.lambda_latent)?)?;
        let grads = loss.backward()?;
        opt.step(&grads)?;
    }
    let frozen = PyramidEncoder::from_params(spec, enc.params().clone(), false)?;
    let mut report = PretrainReport::default();
    report
        .entries
        .push(("recon_mse".into(), inversion_mse(gen, &frozen, s.seed ^ 0x4e1d, 256)?));
    Ok((frozen, report))
}

/// Mean pixel MSE of `G(E(G(w)))` against `G(w)` over `n` held-out `W` samples.
pub fn inversion_mse(gen: &Generator, enc: &PyramidEncoder, seed: u64, n: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
    let mut total = 0.0;
    for chunk in seeds.chunks(64) {
        let images = gen.synthesize_batch(&gen.sample_batch(chunk)?)?;
        let recon = gen.synthesize_batch(&enc.forward(&images)?.detach())?;
        let per: f64 = (recon - &images)?
            .sqr()?
            .flatten_from(1)?
            .mean(1)?
            .sum_all()?
            .to_scalar()?;
        total += per;
    }
    Ok(total / n as f64)
}

/// Stores a frozen inversion encoder with its report.
pub fn inverter_checkpoint(enc: &PyramidEncoder, report: &PretrainReport) -> Result<Checkpoint> {
    let mut c = Checkpoint::new("inverter");
    enc.spec().write(&mut c.metadata, "");
    for (k, v) in &report.entries {
        c.metadata.set(&format!("report.{k}"), fmt_f64(*v));
    }
    c.insert_params("net.", enc.params())?;
    Ok(c)
}

pub fn inverter_from_checkpoint(c: &Checkpoint) -> Result<(PyramidEncoder, PretrainReport)> {
    c.expect_kind("inverter")?;
    let enc = PyramidEncoder::from_params(EncoderSpec::read(&c.metadata, "")?, c.params("net.")?, false)?;
    let mut report = PretrainReport::default();
    for k in c.metadata.keys() {
        if let Some(name) = k.strip_prefix("report.") {
            report.entries.push((name.to_string(), c.metadata.parse_req(k)?));
        }
    }
    Ok((enc, report))
}

/// Checksum of every parameter set a training run must leave untouched.
pub fn frozen_checksums(model: &SamModel, oracles: &Oracles) -> Result<Vec<(String, String)>> {
    let mut out = vec![
        ("generator".to_string(), model.generator.params().checksum()?),
        ("inversion".to_string(), model.inversion.params().checksum()?),
    ];
    out.extend(oracles.checksums()?);
    Ok(out)
}

/// Deep copy of the aging-encoder parameters.
pub fn snapshot(params: &ParamSet) -> Result<ParamSet> {
    params.deep_clone()
}

/// Variables of the aging encoder, in optimizer order.
pub fn aging_vars(model: &SamModel) -> Vec<(String, Var)> {
    model.aging.trainable_params()
}
