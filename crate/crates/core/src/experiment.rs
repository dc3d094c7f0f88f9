//! End-to-end experiment plumbing: one config record, fixed artifact layout.
//!
//! ```text
//! <out>/config.txt
//! <out>/oracles/{age,eval_age,identity,perceptual}.ckpt
//! <out>/inverter.ckpt
//! <out>/train/{losses.csv,sam.ckpt,ckpt_*.ckpt}
//! <out>/aging_accuracy.csv  <out>/identity_gap.csv  <out>/ablation.csv
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::checkpoint::Checkpoint;
use crate::config::{fmt_f64, parse_list, KeyValues, TrainConfig};
use crate::encoder::PyramidEncoder;
use crate::error::{Error, Result};
use crate::evaluation::{aging_accuracy, aging_accuracy_csv, identity_gap_csv, identity_vs_age_gap, write_text, EvalPlan};
use crate::generator::{Generator, GeneratorSpec};
use crate::oracles::{AgePredictor, IdentityEmbedder, Oracles, PerceptualExtractor, PretrainSchedule};
use crate::training::{
    inverter_checkpoint, inverter_from_checkpoint, pretrain_inverter, train, Dataset, InverterSchedule, Trainer,
};

/// Everything an experiment run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub generator: GeneratorSpec,
    pub train: TrainConfig,
    pub age_schedule: PretrainSchedule,
    pub eval_schedule: PretrainSchedule,
    pub identity_schedule: PretrainSchedule,
    pub age_width: usize,
    pub eval_width: usize,
    pub identity_crop: f64,
    pub perceptual_seed: u64,
    pub inverter: InverterSchedule,
    pub train_base: u64,
    pub train_size: usize,
    pub heldout_base: u64,
    pub heldout_size: usize,
    pub eval: EvalPlan,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let schedule = |seed| PretrainSchedule {
            steps: 800,
            batch_size: 32,
            learning_rate: 3e-3,
            seed,
        };
        Self {
            generator: GeneratorSpec::default(),
            train: TrainConfig::default(),
            age_schedule: schedule(11),
            eval_schedule: schedule(23),
            identity_schedule: schedule(13),
            age_width: 8,
            eval_width: 12,
            identity_crop: 0.7,
            perceptual_seed: 17,
            inverter: InverterSchedule::default(),
            train_base: 1_000_000,
            train_size: 1000,
            heldout_base: 9_000_000,
            heldout_size: 64,
            eval: EvalPlan::default(),
        }
    }
}

fn apply_schedule(s: &mut PretrainSchedule, kv: &KeyValues, prefix: &str) -> Result<()> {
    if let Some(v) = kv.parse_opt(&format!("{prefix}_steps"))? {
        s.steps = v;
    }
    if let Some(v) = kv.parse_opt(&format!("{prefix}_batch_size"))? {
        s.batch_size = v;
    }
    if let Some(v) = kv.parse_opt(&format!("{prefix}_lr"))? {
        s.learning_rate = v;
    }
    if let Some(v) = kv.parse_opt(&format!("{prefix}_seed"))? {
        s.seed = v;
    }
    if s.batch_size < 2 {
        return Err(Error::Range(format!("{prefix}_batch_size must be >= 2")));
    }
    Ok(())
}

fn write_schedule(s: &PretrainSchedule, kv: &mut KeyValues, prefix: &str) {
    kv.set(&format!("{prefix}_steps"), s.steps);
    kv.set(&format!("{prefix}_batch_size"), s.batch_size);
    kv.set(&format!("{prefix}_lr"), fmt_f64(s.learning_rate));
    kv.set(&format!("{prefix}_seed"), s.seed);
}

fn list_key(kv: &KeyValues, key: &str) -> Result<Option<Vec<f64>>> {
    kv.get(key)
        .map(|raw| parse_list(raw).map_err(|e| Error::Invalid(format!("key `{key}`: {e}"))))
        .transpose()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Overrides fields from a flat key set; unknown keys are rejected.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        let known = Self::default().to_kv();
        if let Some(k) = kv.keys().find(|k| known.get(k).is_none()) {
            return Err(Error::Invalid(format!("unknown config key `{k}`")));
        }
        self.generator.apply(kv)?;
        self.train.apply(kv)?;
        apply_schedule(&mut self.age_schedule, kv, "age")?;
        apply_schedule(&mut self.eval_schedule, kv, "eval_age")?;
        apply_schedule(&mut self.identity_schedule, kv, "identity")?;
        apply_schedule(&mut self.inverter.schedule, kv, "inverter")?;
        if let Some(v) = kv.parse_opt("age_width")? {
            self.age_width = v;
        }
        if let Some(v) = kv.parse_opt("eval_age_width")? {
            self.eval_width = v;
        }
        if let Some(v) = kv.parse_opt("identity_crop")? {
            self.identity_crop = v;
        }
        if let Some(v) = kv.parse_opt("perceptual_seed")? {
            self.perceptual_seed = v;
        }
        if let Some(v) = kv.parse_opt("inverter_lambda_perceptual")? {
            self.inverter.lambda_perceptual = v;
        }
        if let Some(v) = kv.parse_opt("inverter_lambda_latent")? {
            self.inverter.lambda_latent = v;
        }
        if let Some(v) = kv.parse_opt("train_base")? {
            self.train_base = v;
        }
        if let Some(v) = kv.parse_opt("train_size")? {
            self.train_size = v;
        }
        if let Some(v) = kv.parse_opt("heldout_base")? {
            self.heldout_base = v;
        }
        if let Some(v) = kv.parse_opt("heldout_size")? {
            self.heldout_size = v;
        }
        if let Some(v) = list_key(kv, "eval_targets")? {
            self.eval.targets = v;
        }
        if let Some(v) = list_key(kv, "eval_gaps")? {
            self.eval.gaps = v;
        }
        if let Some(v) = kv.parse_opt("eval_candidates")? {
            self.eval.n_candidates = v;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.resolution != self.generator.resolution {
            return Err(Error::Invalid(format!(
                "train resolution {} differs from generator resolution {}",
                self.train.resolution, self.generator.resolution
            )));
        }
        if self.train_size == 0 || self.heldout_size == 0 {
            return Err(Error::Range("dataset sizes must be >= 1".into()));
        }
        if self.age_width == self.eval_width && self.age_schedule.seed == self.eval_schedule.seed {
            return Err(Error::Invalid("evaluation predictor must differ from the training predictor".into()));
        }
        if !(self.identity_crop > 0.0 && self.identity_crop <= 1.0) {
            return Err(Error::Range("identity_crop must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        self.generator.write(&mut kv);
        // the generator owns `resolution`; the train config must agree
        self.train.write(&mut kv);
        write_schedule(&self.age_schedule, &mut kv, "age");
        write_schedule(&self.eval_schedule, &mut kv, "eval_age");
        write_schedule(&self.identity_schedule, &mut kv, "identity");
        write_schedule(&self.inverter.schedule, &mut kv, "inverter");
        kv.set("age_width", self.age_width);
        kv.set("eval_age_width", self.eval_width);
        kv.set("identity_crop", fmt_f64(self.identity_crop));
        kv.set("perceptual_seed", self.perceptual_seed);
        kv.set("inverter_lambda_perceptual", fmt_f64(self.inverter.lambda_perceptual));
        kv.set("inverter_lambda_latent", fmt_f64(self.inverter.lambda_latent));
        kv.set("train_base", self.train_base);
        kv.set("train_size", self.train_size);
        kv.set("heldout_base", self.heldout_base);
        kv.set("heldout_size", self.heldout_size);
        kv.set("eval_targets", join(&self.eval.targets));
        kv.set("eval_gaps", join(&self.eval.gaps));
        kv.set("eval_candidates", self.eval.n_candidates);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        c.apply(kv)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }
}

/// Paths of every artifact below one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn oracle(&self, name: &str) -> PathBuf {
        self.root.join("oracles").join(format!("{name}.ckpt"))
    }

    pub fn inverter(&self) -> PathBuf {
        self.root.join("inverter.ckpt")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn sam(&self) -> PathBuf {
        self.train_dir().join("sam.ckpt")
    }

    pub fn aging_accuracy(&self) -> PathBuf {
        self.root.join("aging_accuracy.csv")
    }

    pub fn identity_gap(&self) -> PathBuf {
        self.root.join("identity_gap.csv")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.csv")
    }
}

pub fn build_generator(cfg: &ExperimentConfig) -> Result<Arc<Generator>> {
    Ok(Arc::new(Generator::new(cfg.generator.clone())?))
}

pub fn training_data(gen: &Generator, cfg: &ExperimentConfig) -> Result<Dataset> {
    Dataset::range(gen, cfg.train_base, cfg.train_size)
}

pub fn heldout_data(gen: &Generator, cfg: &ExperimentConfig) -> Result<Dataset> {
    Dataset::range(gen, cfg.heldout_base, cfg.heldout_size)
}

/// Pretrains all four stand-ins and writes them under `oracles/`.
pub fn pretrain_oracles(gen: &Generator, cfg: &ExperimentConfig, layout: &Layout) -> Result<Oracles> {
    let res = gen.resolution();
    let age = AgePredictor::pretrain(gen, AgePredictor::spec_with_width(res, cfg.age_width), &cfg.age_schedule)?;
    log::info!("age predictor {:?}", age.report());
    let eval_age = AgePredictor::pretrain(gen, AgePredictor::spec_with_width(res, cfg.eval_width), &cfg.eval_schedule)?;
    log::info!("evaluation predictor {:?}", eval_age.report());
    let identity = IdentityEmbedder::pretrain(
        gen,
        IdentityEmbedder::default_spec(),
        cfg.identity_crop,
        &cfg.identity_schedule,
    )?;
    log::info!("identity embedder {:?}", identity.report());
    let perceptual = PerceptualExtractor::new(cfg.perceptual_seed)?;
    age.to_checkpoint()?.save(&layout.oracle("age"))?;
    eval_age.to_checkpoint()?.save(&layout.oracle("eval_age"))?;
    identity.to_checkpoint()?.save(&layout.oracle("identity"))?;
    perceptual.to_checkpoint()?.save(&layout.oracle("perceptual"))?;
    Ok(Oracles {
        age: Arc::new(age),
        identity: Arc::new(identity),
        perceptual: Arc::new(perceptual),
        eval_age: Arc::new(eval_age),
    })
}

pub fn load_oracles(layout: &Layout) -> Result<Oracles> {
    let load = |name: &str| {
        let path = layout.oracle(name);
        if !path.exists() {
            return Err(Error::Missing(format!("{} (run pretrain-oracles first)", path.display())));
        }
        Checkpoint::load(&path)
    };
    Ok(Oracles {
        age: Arc::new(AgePredictor::from_checkpoint(&load("age")?)?),
        identity: Arc::new(IdentityEmbedder::from_checkpoint(&load("identity")?)?),
        perceptual: Arc::new(PerceptualExtractor::from_checkpoint(&load("perceptual")?)?),
        eval_age: Arc::new(AgePredictor::from_checkpoint(&load("eval_age")?)?),
    })
}

pub fn pretrain_inversion(
    gen: &Generator,
    cfg: &ExperimentConfig,
    oracles: &Oracles,
    layout: &Layout,
) -> Result<PyramidEncoder> {
    let (enc, report) = pretrain_inverter(gen, &oracles.perceptual, &cfg.inverter)?;
    log::info!("inversion encoder {report:?}");
    inverter_checkpoint(&enc, &report)?.save(&layout.inverter())?;
    Ok(enc)
}

pub fn load_inversion(layout: &Layout) -> Result<PyramidEncoder> {
    let path = layout.inverter();
    if !path.exists() {
        return Err(Error::Missing(format!("{} (run pretrain-inverter first)", path.display())));
    }
    Ok(inverter_from_checkpoint(&Checkpoint::load(&path)?)?.0)
}

/// Oracles and inverter from `layout`, pretraining whichever is missing.
pub fn ensure_frozen(gen: &Generator, cfg: &ExperimentConfig, layout: &Layout) -> Result<(Oracles, PyramidEncoder)> {
    let oracles = match load_oracles(layout) {
        Ok(o) => o,
        Err(Error::Missing(_)) => pretrain_oracles(gen, cfg, layout)?,
        Err(e) => return Err(e),
    };
    let inversion = match load_inversion(layout) {
        Ok(e) => e,
        Err(Error::Missing(_)) => pretrain_inversion(gen, cfg, &oracles, layout)?,
        Err(e) => return Err(e),
    };
    Ok((oracles, inversion))
}

/// Trains the aging encoder into `layout.train_dir()`, resuming from `sam.ckpt`
/// when it exists and is behind the configured step count.
pub fn run_training(
    gen: &Arc<Generator>,
    cfg: &ExperimentConfig,
    oracles: &Oracles,
    inversion: &PyramidEncoder,
    layout: &Layout,
) -> Result<Trainer> {
    let data = training_data(gen, cfg)?;
    let mut trainer = if layout.sam().exists() {
        let mut t = Trainer::resume(&Checkpoint::load(&layout.sam())?, oracles.clone())?;
        t.config.steps = cfg.train.steps;
        t
    } else {
        Trainer::new(gen.clone(), inversion.clone(), oracles.clone(), cfg.train.clone())?
    };
    train(&mut trainer, &data, &layout.train_dir())?;
    Ok(trainer)
}

/// Full pipeline: frozen networks, training, `aging_accuracy.csv` and `identity_gap.csv`.
pub fn run_pipeline(cfg: &ExperimentConfig, layout: &Layout) -> Result<Trainer> {
    std::fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    cfg.to_kv().save(&layout.config())?;
    let gen = build_generator(cfg)?;
    let (oracles, inversion) = ensure_frozen(&gen, cfg, layout)?;
    let trainer = run_training(&gen, cfg, &oracles, &inversion, layout)?;
    let heldout = heldout_data(&gen, cfg)?;
    let acc = aging_accuracy(&trainer.model, &oracles.eval_age, &heldout, &cfg.eval.targets, cfg.eval.n_candidates)?;
    write_text(&layout.aging_accuracy(), &aging_accuracy_csv(&acc))?;
    let gap = identity_vs_age_gap(&trainer.model, &oracles.age, &oracles.identity, &heldout, &cfg.eval.gaps)?;
    write_text(&layout.identity_gap(), &identity_gap_csv(&gap))?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let mut c = ExperimentConfig::default();
        c.train.steps = 17;
        c.eval.targets = vec![20.0, 60.5];
        c.inverter.schedule.steps = 3;
        let back = ExperimentConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        let kv = KeyValues::parse("stepz=3").unwrap();
        assert!(ExperimentConfig::from_kv(&kv).is_err());
        let kv = KeyValues::parse("eval_age_width=8\neval_age_seed=11").unwrap();
        assert!(ExperimentConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn missing_artifacts_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        assert!(matches!(load_oracles(&layout), Err(Error::Missing(_))));
        assert!(matches!(load_inversion(&layout), Err(Error::Missing(_))));
    }
}
