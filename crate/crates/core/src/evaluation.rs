//! Evaluation protocols: aging accuracy under nearest-age selection, identity
//! similarity against the age gap, and ablation tables.

use std::path::Path;
use std::sync::Arc;

use crate::config::{fmt_f64, EncoderMode, LossTerm, LossWeights, TrainConfig};
use crate::encoder::{PyramidEncoder, SamModel};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::oracles::{AgePredictor, IdentityEmbedder, Oracles};
use crate::training::{train, Dataset, Trainer};
use crate::types::{MAX_AGE, MIN_AGE};

/// Index of the prediction closest to `target`; the lowest index wins ties.
pub fn select_nearest_age(predicted: &[f64], target: f64) -> Result<usize> {
    if predicted.is_empty() {
        return Err(Error::Invalid("no candidates to select from".into()));
    }
    let mut best = 0;
    let mut best_err = (predicted[0] - target).abs();
    for (i, p) in predicted.iter().enumerate().skip(1) {
        let err = (p - target).abs();
        if err < best_err {
            best = i;
            best_err = err;
        }
    }
    Ok(best)
}

/// `n` evenly spaced ages from 5 to 100 (just `[5]` when `n == 1`).
pub fn candidate_grid(n: usize) -> Result<Vec<f64>> {
    match n {
        0 => Err(Error::Range("need at least one candidate".into())),
        1 => Ok(vec![MIN_AGE]),
        _ => Ok((0..n)
            .map(|i| {
                if i == n - 1 {
                    MAX_AGE
                } else {
                    MIN_AGE + (MAX_AGE - MIN_AGE) * i as f64 / (n - 1) as f64
                }
            })
            .collect()),
    }
}

/// Predicted ages `(sources x candidates)` of the model outputs at every grid age.
pub fn candidate_predictions(
    model: &SamModel,
    predictor: &AgePredictor,
    data: &Dataset,
    grid: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let img = data.images().get(i)?.unsqueeze(0)?;
        let mut preds = Vec::with_capacity(grid.len());
        for chunk in grid.chunks(40) {
            let batch = img.broadcast_as((chunk.len(), img.dims()[1], img.dims()[2], img.dims()[3]))?.contiguous()?;
            let (_, y) = model.transform_batch(&batch, chunk)?;
            preds.extend(predictor.predict_many(&y)?);
        }
        out.push(preds);
    }
    Ok(out)
}

/// Mean absolute error per target after nearest-age selection over the candidate grid.
pub fn aging_accuracy(
    model: &SamModel,
    predictor: &AgePredictor,
    data: &Dataset,
    targets: &[f64],
    n_candidates: usize,
) -> Result<Vec<(f64, f64)>> {
    let grid = candidate_grid(n_candidates)?;
    let preds = candidate_predictions(model, predictor, data, &grid)?;
    accuracy_from_predictions(&preds, targets)
}

/// Per-target MAE from precomputed candidate predictions, summed in source order.
pub fn accuracy_from_predictions(preds: &[Vec<f64>], targets: &[f64]) -> Result<Vec<(f64, f64)>> {
    if preds.is_empty() {
        return Err(Error::Invalid("no sources to evaluate".into()));
    }
    targets
        .iter()
        .map(|&t| {
            let mut sum = 0.0;
            for p in preds {
                sum += (p[select_nearest_age(p, t)?] - t).abs();
            }
            Ok((t, sum / preds.len() as f64))
        })
        .collect()
}

/// Mean identity cosine between each input and its transform to `α_s + gap`
/// (targets clamped to the age range).
pub fn identity_vs_age_gap(
    model: &SamModel,
    predictor: &AgePredictor,
    embedder: &IdentityEmbedder,
    data: &Dataset,
    gaps: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let images = data.images();
    let sources = predictor.predict_many(images)?;
    gaps.iter()
        .map(|&g| {
            let targets: Vec<f64> = sources.iter().map(|s| (s + g).clamp(MIN_AGE, MAX_AGE)).collect();
            let mut sum = 0.0;
            let n = data.len();
            let mut start = 0;
            while start < n {
                let len = (n - start).min(32);
                let x = images.narrow(0, start, len)?;
                let (_, y) = model.transform_batch(&x, &targets[start..start + len])?;
                for c in embedder.cosine_batch(&x, &y)?.to_vec1::<f64>()? {
                    sum += c;
                }
                start += len;
            }
            Ok((g, sum / n as f64))
        })
        .collect()
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid("spearman needs two equal-length series of >= 2 values".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn aging_accuracy_csv(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("target,mae\n");
    for (t, m) in rows {
        s.push_str(&format!("{},{}\n", fmt_f64(*t), fmt_f64(*m)));
    }
    s
}

pub fn identity_gap_csv(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("gap,mean_cosine\n");
    for (g, c) in rows {
        s.push_str(&format!("{},{}\n", fmt_f64(*g), fmt_f64(*c)));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One training variant of an ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub mode: EncoderMode,
    pub disabled: Vec<LossTerm>,
    /// Replaces the configured loss weights when set.
    pub weights: Option<LossWeights>,
}

impl Variant {
    pub fn residual() -> Self {
        Self {
            name: "sam".into(),
            mode: EncoderMode::Residual,
            disabled: Vec::new(),
            weights: None,
        }
    }

    pub fn direct() -> Self {
        Self {
            name: "sam_direct".into(),
            mode: EncoderMode::Direct,
            ..Self::residual()
        }
    }

    pub fn without(term: LossTerm) -> Self {
        Self {
            name: format!("no_{term}"),
            disabled: vec![term],
            ..Self::residual()
        }
    }

    /// The residual model plus every knock-out and the direct variant.
    pub fn standard_set() -> Vec<Self> {
        vec![
            Self::residual(),
            Self::direct(),
            Self::without(LossTerm::ForwardReconstruction),
            Self::without(LossTerm::Cycle),
            Self::without(LossTerm::Regularization),
        ]
    }

    /// Parses `name`, `direct`, `no_cycle`, `no_forward_reconstruction`, `no_reg`, `zero`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sam" | "residual" => Ok(Self::residual()),
            "sam_direct" | "direct" => Ok(Self::direct()),
            "zero" => Ok(Self {
                name: "zero".into(),
                weights: Some(LossWeights::zero()),
                ..Self::residual()
            }),
            other => match other.strip_prefix("no_") {
                Some(term) => Ok(Self::without(term.parse().map_err(Error::Invalid)?)),
                None => Err(Error::Invalid(format!("unknown variant `{other}`"))),
            },
        }
    }

    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.mode = self.mode;
        c.disabled = self.disabled.clone();
        if let Some(w) = self.weights {
            c.loss_weights = w;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub mae: Vec<(f64, f64)>,
    pub cosine: Vec<(f64, f64)>,
}

impl AblationRow {
    pub fn mean_cosine(&self) -> f64 {
        self.cosine.iter().map(|(_, c)| c).sum::<f64>() / self.cosine.len().max(1) as f64
    }

    pub fn mean_mae(&self) -> f64 {
        self.mae.iter().map(|(_, m)| m).sum::<f64>() / self.mae.len().max(1) as f64
    }
}

/// What an ablation measures after training each variant.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPlan {
    pub targets: Vec<f64>,
    pub gaps: Vec<f64>,
    pub n_candidates: usize,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            targets: vec![10.0, 30.0, 50.0, 70.0, 90.0],
            gaps: vec![0.0, 20.0, 40.0, 60.0],
            n_candidates: 80,
        }
    }
}

/// Evaluates a trained model with the held-out predictor and the identity embedder.
pub fn evaluate(model: &SamModel, oracles: &Oracles, heldout: &Dataset, plan: &EvalPlan) -> Result<AblationRow> {
    Ok(AblationRow {
        variant: String::new(),
        mae: aging_accuracy(model, &oracles.eval_age, heldout, &plan.targets, plan.n_candidates)?,
        cosine: identity_vs_age_gap(model, &oracles.age, &oracles.identity, heldout, &plan.gaps)?,
    })
}

/// Trains every variant from the same seed and data, then evaluates each.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run(
    base: &TrainConfig,
    variants: &[Variant],
    generator: &Arc<Generator>,
    inversion: &PyramidEncoder,
    oracles: &Oracles,
    train_data: &Dataset,
    heldout: &Dataset,
    plan: &EvalPlan,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let config = v.config(base);
        let mut trainer = Trainer::new(generator.clone(), inversion.clone(), oracles.clone(), config)?;
        train(&mut trainer, train_data, &out_dir.join(&v.name))?;
        let mut row = evaluate(&trainer.model, oracles, heldout, plan)?;
        row.variant = v.name.clone();
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant");
    if let Some(r) = rows.first() {
        for (t, _) in &r.mae {
            s.push_str(&format!(",mae_{}", fmt_f64(*t)));
        }
        s.push_str(",mean_mae");
        for (g, _) in &r.cosine {
            s.push_str(&format!(",cos_gap_{}", fmt_f64(*g)));
        }
        s.push_str(",mean_cosine");
    }
    s.push('\n');
    for r in rows {
        s.push_str(&r.variant);
        for (_, m) in &r.mae {
            s.push_str(&format!(",{}", fmt_f64(*m)));
        }
        s.push_str(&format!(",{}", fmt_f64(r.mean_mae())));
        for (_, c) in &r.cosine {
            s.push_str(&format!(",{}", fmt_f64(*c)));
        }
        s.push_str(&format!(",{}", fmt_f64(r.mean_cosine())));
        s.push('\n');
    }
    s
}
