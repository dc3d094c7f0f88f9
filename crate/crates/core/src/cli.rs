//! The `sam` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{
    fit_linear_direction, path_nonlinearity, pca_project, projection_csv, trace_age_path, traverse, LinearDirection,
    LinearFitOptions,
};
use crate::checkpoint::Checkpoint;
use crate::config::{fmt_f64, parse_grid, parse_list, KeyValues};
use crate::editing::{multimodal_transform, patch_edit, Patch, StyleLayerRange};
use crate::encoder::SamModel;
use crate::error::{Error, Result};
use crate::evaluation::{
    ablation_csv, ablation_run, aging_accuracy, aging_accuracy_csv, identity_gap_csv, identity_vs_age_gap,
    write_text, Variant,
};
use crate::experiment::{
    build_generator, ensure_frozen, heldout_data, load_oracles, pretrain_inversion,
    pretrain_oracles, run_training, training_data, ExperimentConfig, Layout,
};
use crate::imageio::{load_image, load_rgb, save_image};
use crate::training::sam_from_checkpoint;
use crate::types::{AgeYears, Image, LatentCode};

/// Default output directory when `--out` is not given.
pub const OUT_ENV: &str = "SAM_OUT";

#[derive(Parser, Debug)]
#[command(name = "sam", about = "Age transformation through a frozen style generator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct OutDir {
    /// Experiment directory [env: SAM_OUT, default: sam_out]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Trained `sam` checkpoint [default: <out>/train/sam.ckpt]
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the age predictors, identity embedder and perceptual extractor
    PretrainOracles {
        #[command(flatten)]
        dir: OutDir,
    },
    /// Pretrain the frozen inversion encoder
    PretrainInverter {
        #[command(flatten)]
        dir: OutDir,
    },
    /// Train the aging encoder (resumes from <out>/train/sam.ckpt)
    Train {
        #[command(flatten)]
        dir: OutDir,
        #[arg(long)]
        steps: Option<u64>,
        /// residual or direct
        #[arg(long)]
        mode: Option<String>,
    },
    /// Transform one image to a target age
    Transform {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        age: f64,
        /// Output image
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Latent trace over an age grid, with PCA projection and nonlinearity
    Trace {
        #[command(flatten)]
        dir: OutDir,
        #[command(flatten)]
        model: ModelArgs,
        /// Input images; held-out samples when omitted
        #[arg(long = "in", num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Held-out samples used when no input is given
        #[arg(long, default_value_t = 5)]
        count: usize,
        /// a:b:step
        #[arg(long, default_value = "5:100:5")]
        ages: String,
    },
    /// Fit the linear age direction on random latent samples
    FitLinear {
        #[command(flatten)]
        dir: OutDir,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 50.0)]
        threshold: f64,
    },
    /// Walk random latent samples along the fitted linear direction
    Traverse {
        #[command(flatten)]
        dir: OutDir,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        stride: f64,
    },
    /// Transform, then mix style rows from each reference
    Mix {
        #[command(flatten)]
        dir: OutDir,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        age: f64,
        #[arg(long, num_args = 1.., required = true)]
        refs: Vec<PathBuf>,
        /// Inclusive row range a:b [default: fine rows]
        #[arg(long)]
        layers: Option<StyleLayerRange>,
    },
    /// Paste a patch, then re-encode at the target age
    PatchEdit {
        #[command(flatten)]
        dir: OutDir,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        patch: PathBuf,
        /// Top-left corner x,y
        #[arg(long)]
        at: String,
        /// Target age [default: predicted source age]
        #[arg(long)]
        age: Option<f64>,
    },
    /// aging_accuracy.csv under nearest-age selection
    EvalAging {
        #[command(flatten)]
        dir: OutDir,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// identity_gap.csv over the configured age gaps
    EvalIdentity {
        #[command(flatten)]
        dir: OutDir,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train and evaluate each variant; writes ablation.csv
    Ablate {
        #[command(flatten)]
        dir: OutDir,
        /// Comma-separated: sam,direct,no_forward_reconstruction,no_cycle,no_reg,zero
        #[arg(long)]
        variants: Option<String>,
    },
}

/// Parses `argv` (including the program name) and runs it; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(v) => v,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, &cli.common) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn out_dir(dir: &OutDir) -> PathBuf {
    dir.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("sam_out"))
}

/// Defaults, then the experiment's saved config, then `--config`, then `--seed`.
fn load_config(common: &Common, layout: Option<&Layout>) -> Result<ExperimentConfig> {
    let mut kv = KeyValues::default();
    if let Some(l) = layout {
        if l.config().exists() {
            kv.merge(&KeyValues::load(&l.config())?);
        }
    }
    if let Some(p) = &common.config {
        kv.merge(&KeyValues::load(p)?);
    }
    if let Some(s) = common.seed {
        kv.set("seed", s);
    }
    ExperimentConfig::from_kv(&kv)
}

fn prepare(common: &Common, dir: &OutDir) -> Result<(ExperimentConfig, Layout)> {
    let layout = Layout::new(out_dir(dir));
    let cfg = load_config(common, Some(&layout))?;
    std::fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    cfg.to_kv().save(&layout.config())?;
    Ok((cfg, layout))
}

fn load_model(model: &ModelArgs, layout: &Layout) -> Result<SamModel> {
    let path = model.model.clone().unwrap_or_else(|| layout.sam());
    if !path.exists() {
        return Err(Error::Missing(format!("{} (run train first)", path.display())));
    }
    Ok(sam_from_checkpoint(&Checkpoint::load(&path)?, false)?.0)
}

fn parse_at(raw: &str) -> Result<(usize, usize)> {
    let v: Vec<usize> = parse_list(raw).map_err(|e| Error::Invalid(format!("--at: {e}")))?;
    match v.as_slice() {
        [x, y] => Ok((*x, *y)),
        _ => Err(Error::Invalid(format!("--at expects x,y, got `{raw}`"))),
    }
}

fn direction_path(layout: &Layout) -> PathBuf {
    layout.root.join("direction.ckpt")
}

fn dispatch(command: Command, common: &Common) -> Result<()> {
    match command {
        Command::PretrainOracles { dir } => {
            let (cfg, layout) = prepare(common, &dir)?;
            let gen = build_generator(&cfg)?;
            let o = pretrain_oracles(&gen, &cfg, &layout)?;
            println!("age {:?}", o.age.report().entries);
            println!("eval_age {:?}", o.eval_age.report().entries);
            println!("identity {:?}", o.identity.report().entries);
        }
        Command::PretrainInverter { dir } => {
            let (cfg, layout) = prepare(common, &dir)?;
            let gen = build_generator(&cfg)?;
            let oracles = load_oracles(&layout)?;
            pretrain_inversion(&gen, &cfg, &oracles, &layout)?;
            println!("wrote {}", layout.inverter().display());
        }
        Command::Train { dir, steps, mode } => {
            let layout = Layout::new(out_dir(&dir));
            let mut kv = KeyValues::default();
            if let Some(s) = steps {
                kv.set("steps", s);
            }
            if let Some(m) = mode {
                kv.set("mode", m);
            }
            let mut cfg = load_config(common, Some(&layout))?;
            cfg.apply(&kv)?;
            std::fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
            cfg.to_kv().save(&layout.config())?;
            let gen = build_generator(&cfg)?;
            let (oracles, inversion) = ensure_frozen(&gen, &cfg, &layout)?;
            let t = run_training(&gen, &cfg, &oracles, &inversion, &layout)?;
            println!("step {} running_loss {}", t.step_count(), fmt_f64(t.running_loss()));
        }
        Command::Transform {
            input,
            age,
            out,
            model,
        } => {
            let layout = Layout::new(out_dir(&OutDir { out: None }));
            let m = load_model(&model, &layout)?;
            let x = load_image(&input, m.generator.resolution())?;
            save_image(&out, &m.sam_transform(&x, AgeYears::target(age)?)?)?;
        }
        Command::Trace {
            dir,
            model,
            inputs,
            count,
            ages,
        } => {
            let (cfg, layout) = prepare(common, &dir)?;
            let m = load_model(&model, &layout)?;
            let oracles = load_oracles(&layout)?;
            let targets: Vec<AgeYears> = parse_grid(&ages)
                .map_err(Error::Invalid)?
                .into_iter()
                .map(AgeYears::target)
                .collect::<Result<_>>()?;
            let images = input_images(&inputs, count, &m, &cfg)?;
            let mut traces = Vec::new();
            let mut summary = String::from("image,nonlinearity\n");
            for (i, img) in images.iter().enumerate() {
                let t = trace_age_path(&m, &oracles.age, img, &targets)?;
                write_text(&layout.root.join(format!("trace_{i}.csv")), &t.to_csv()?)?;
                let nl = if t.len() >= 3 { fmt_f64(path_nonlinearity(&t)?) } else { String::new() };
                summary.push_str(&format!("{i},{nl}\n"));
                traces.push(t);
            }
            write_text(&layout.root.join("nonlinearity.csv"), &summary)?;
            if traces[0].len() >= 2 {
                let (_, coords) = pca_project(&traces, 0)?;
                write_text(&layout.root.join("projection.csv"), &projection_csv(&traces, &coords))?;
            }
            print!("{summary}");
        }
        Command::FitLinear {
            dir,
            samples,
            threshold,
        } => {
            let (cfg, layout) = prepare(common, &dir)?;
            let gen = build_generator(&cfg)?;
            let oracles = load_oracles(&layout)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x11ea);
            let seeds: Vec<u64> = (0..samples).map(|_| rng.gen()).collect();
            let mut codes = Vec::with_capacity(samples);
            let mut ages = Vec::with_capacity(samples);
            for chunk in seeds.chunks(128) {
                let batch = gen.sample_batch(chunk)?;
                ages.extend(oracles.age.predict_many(&gen.synthesize_batch(&batch)?)?.into_iter().map(AgeYears));
                codes.extend(LatentCode::unstack(&batch)?);
            }
            let opts = LinearFitOptions {
                threshold,
                ..LinearFitOptions::default()
            };
            let d = fit_linear_direction(&codes, &ages, &opts)?;
            d.to_checkpoint().save(&direction_path(&layout))?;
            println!("wrote {}", direction_path(&layout).display());
        }
        Command::Traverse {
            dir,
            count,
            steps,
            stride,
        } => {
            let (cfg, layout) = prepare(common, &dir)?;
            let gen = build_generator(&cfg)?;
            let oracles = load_oracles(&layout)?;
            let path = direction_path(&layout);
            if !path.exists() {
                return Err(Error::Missing(format!("{} (run fit-linear first)", path.display())));
            }
            let d = LinearDirection::from_checkpoint(&Checkpoint::load(&path)?)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x7a5e);
            let mut csv = String::from("sample,offset,predicted_age\n");
            for k in 0..count {
                let code = gen.sample_latent(rng.gen())?;
                let images = traverse(&gen, &code, &d, steps, stride)?;
                for (j, img) in images.iter().enumerate() {
                    let offset = (j as i64 - steps as i64) as f64 * stride;
                    save_image(&layout.root.join(format!("traverse_{k}_{j}.png")), img)?;
                    let age = oracles.age.predict_age(img)?;
                    csv.push_str(&format!("{k},{},{}\n", fmt_f64(offset), fmt_f64(age.0)));
                }
            }
            write_text(&layout.root.join("traverse.csv"), &csv)?;
        }
        Command::Mix {
            dir,
            model,
            input,
            age,
            refs,
            layers,
        } => {
            let layout = Layout::new(out_dir(&dir));
            let m = load_model(&model, &layout)?;
            let res = m.generator.resolution();
            let x = load_image(&input, res)?;
            let references = refs.iter().map(|p| load_image(p, res)).collect::<Result<Vec<_>>>()?;
            let layers = layers.unwrap_or_else(|| StyleLayerRange::default_for(m.generator.layers()));
            let outs = multimodal_transform(&m, &x, AgeYears::target(age)?, &references, layers)?;
            for (i, img) in outs.iter().enumerate() {
                save_image(&layout.root.join(format!("mix_{i}.png")), img)?;
            }
        }
        Command::PatchEdit {
            dir,
            model,
            input,
            patch,
            at,
            age,
        } => {
            let layout = Layout::new(out_dir(&dir));
            let m = load_model(&model, &layout)?;
            let (x0, y0) = parse_at(&at)?;
            let x = load_image(&input, m.generator.resolution())?;
            let (w, h, rgb) = load_rgb(&patch)?;
            let pasted = patch_edit(&x, &Patch::from_rgb8(w, h, &rgb)?, x0, y0)?;
            let target = match age {
                Some(a) => AgeYears::target(a)?,
                None => load_oracles(&layout)?.age.predict_age(&pasted)?.clamped(),
            };
            save_image(&layout.root.join("patched.png"), &pasted)?;
            save_image(&layout.root.join("patched_fused.png"), &m.sam_transform(&pasted, target)?)?;
        }
        Command::EvalAging { dir, model } => {
            let (cfg, layout) = prepare(common, &dir)?;
            let m = load_model(&model, &layout)?;
            let oracles = load_oracles(&layout)?;
            let heldout = heldout_data(&m.generator, &cfg)?;
            let rows = aging_accuracy(&m, &oracles.eval_age, &heldout, &cfg.eval.targets, cfg.eval.n_candidates)?;
            let csv = aging_accuracy_csv(&rows);
            write_text(&layout.aging_accuracy(), &csv)?;
            print!("{csv}");
        }
        Command::EvalIdentity { dir, model } => {
            let (cfg, layout) = prepare(common, &dir)?;
            let m = load_model(&model, &layout)?;
            let oracles = load_oracles(&layout)?;
            let heldout = heldout_data(&m.generator, &cfg)?;
            let rows = identity_vs_age_gap(&m, &oracles.age, &oracles.identity, &heldout, &cfg.eval.gaps)?;
            let csv = identity_gap_csv(&rows);
            write_text(&layout.identity_gap(), &csv)?;
            print!("{csv}");
        }
        Command::Ablate { dir, variants } => {
            let (cfg, layout) = prepare(common, &dir)?;
            let variants = match variants {
                Some(raw) => parse_list::<String>(&raw)
                    .map_err(Error::Invalid)?
                    .iter()
                    .map(|s| Variant::parse(s))
                    .collect::<Result<Vec<_>>>()?,
                None => Variant::standard_set(),
            };
            if variants.is_empty() {
                return Err(Error::Invalid("no variants given".into()));
            }
            let gen = build_generator(&cfg)?;
            let (oracles, inversion) = ensure_frozen(&gen, &cfg, &layout)?;
            let rows = ablation_run(
                &cfg.train,
                &variants,
                &gen,
                &inversion,
                &oracles,
                &training_data(&gen, &cfg)?,
                &heldout_data(&gen, &cfg)?,
                &cfg.eval,
                &layout.root.join("ablation"),
            )?;
            let csv = ablation_csv(&rows);
            write_text(&layout.ablation(), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn input_images(paths: &[PathBuf], count: usize, model: &SamModel, cfg: &ExperimentConfig) -> Result<Vec<Image>> {
    if !paths.is_empty() {
        return paths
            .iter()
            .map(|p| load_image(p, model.generator.resolution()))
            .collect();
    }
    if count == 0 {
        return Err(Error::Invalid("need at least one image to trace".into()));
    }
    let heldout = crate::training::Dataset::range(&model.generator, cfg.heldout_base, count)?;
    (0..count).map(|i| heldout.image(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["sam", "transform", "--in", "a.png", "--out", "b.png"]), 1);
        assert_eq!(run(["sam", "bogus"]), 1);
        assert_eq!(run(["sam", "train", "--stepz", "3"]), 1);
        assert_eq!(run(["sam", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["sam", "eval-aging", "--out", out]), 2);
        assert_eq!(run(["sam", "patch-edit", "--out", out, "--in", "x.png", "--patch", "p.png", "--at", "1"]), 2);
    }

    #[test]
    fn at_parsing() {
        assert_eq!(parse_at("3,4").unwrap(), (3, 4));
        assert!(parse_at("3").is_err());
    }
}
