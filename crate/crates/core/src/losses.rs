//! Loss terms and their aggregation into the forward, cycle and total objectives.
//!
//! Conventions (all batch functions average over the batch):
//!
//! * pixel: `sqrt(sum(m * (x - y)^2) / (C*H*W))` per sample, `m` the region weights.
//! * perceptual: sum over pyramid levels of `sqrt(mean((F_k(x) - F_k(y))^2))`,
//!   evaluated separately on the center- and outer-masked images.
//! * identity: `w(Δ) * (1 - cos)`, computed as `w(Δ) * |e_x - e_y|^2 / 2` on unit
//!   embeddings so identical inputs give exactly zero.
//! * aging: `((α_t - A(y)) / 100)^2`.
//! * regularization: `mean((code - w̄)^2)` over all rows and coordinates.
//!
//! The square roots are shifted by `sqrt(ε)` so they are exactly zero at zero
//! difference and still differentiable there.

use candle_core::{Tensor, D};

use crate::config::{EncoderMode, LossTerm, LossWeights, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::resize_square;
use crate::oracles::{AgePredictor, IdentityEmbedder, Oracles, PerceptualExtractor};
use crate::types::{AgeYears, LatentCode, RegionMask, DEVICE, MAX_AGE, MIN_AGE};

const SQRT_EPS: f64 = 1e-20;

fn batched(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        3 => Ok(x.unsqueeze(0)?),
        4 => Ok(x.clone()),
        r => Err(Error::shape("(3, H, W) or (B, 3, H, W)", format!("rank {r}"))),
    }
}

fn same_shape(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::shape(format!("{:?}", x.dims()), format!("{:?}", y.dims())));
    }
    Ok(())
}

/// `sqrt(s + ε) - sqrt(ε)`: zero at zero, smooth everywhere.
fn soft_sqrt(s: &Tensor) -> Result<Tensor> {
    Ok(((s + SQRT_EPS)?.sqrt()? - SQRT_EPS.sqrt())?)
}

/// Per-sample weighted pixel distance `(B,)` with an `(H, W)` weight plane.
fn pixel_distance(x: &Tensor, y: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let sq = (x - y)?.sqr()?.broadcast_mul(weights)?;
    let s = (sq.flatten_from(1)?.sum(1)? / (c * h * w) as f64)?;
    soft_sqrt(&s)
}

/// Region-weighted L2 distance between two images (or batches, averaged).
pub fn pixel_loss(x: &Tensor, y: &Tensor, mask: &RegionMask) -> Result<Tensor> {
    same_shape(x, y)?;
    let (x, y) = (batched(x)?, batched(y)?);
    if x.dims()[2] != mask.resolution() || x.dims()[3] != mask.resolution() {
        return Err(Error::shape(mask.resolution(), x.dims()[2]));
    }
    Ok(pixel_distance(&x, &y, mask.tensor())?.mean_all()?)
}

fn perceptual_distance(x: &Tensor, y: &Tensor, f: &PerceptualExtractor) -> Result<Tensor> {
    let fx = f.features_batch(x)?;
    let fy = f.features_batch(y)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fx.iter().zip(&fy) {
        let d = soft_sqrt(&(a - b)?.sqr()?.flatten_from(1)?.mean(1)?)?;
        total = Some(match total {
            None => d,
            Some(t) => (t + d)?,
        });
    }
    total.ok_or_else(|| Error::Invalid("perceptual extractor has no levels".into()))
}

/// Sum over pyramid levels of feature-map L2 distances (batch mean).
pub fn perceptual_loss(x: &Tensor, y: &Tensor, f: &PerceptualExtractor) -> Result<Tensor> {
    same_shape(x, y)?;
    let (x, y) = (batched(x)?, batched(y)?);
    Ok(perceptual_distance(&x, &y, f)?.mean_all()?)
}

/// Perceptual loss evaluated on the center and outer parts of the images separately.
pub fn region_perceptual_loss(
    x: &Tensor,
    y: &Tensor,
    f: &PerceptualExtractor,
    mask: &RegionMask,
    center_weight: f64,
    outer_weight: f64,
) -> Result<Tensor> {
    same_shape(x, y)?;
    let (x, y) = (batched(x)?, batched(y)?);
    let (inner, outer) = mask.indicators()?;
    let part = |ind: &Tensor| -> Result<Tensor> {
        perceptual_distance(&x.broadcast_mul(ind)?, &y.broadcast_mul(ind)?, f)
    };
    let mut total = Tensor::zeros(x.dims()[0], crate::types::DTYPE, &DEVICE)?;
    if center_weight != 0.0 {
        total = (total + (part(&inner)? * center_weight)?)?;
    }
    if outer_weight != 0.0 {
        total = (total + (part(&outer)? * outer_weight)?)?;
    }
    Ok(total.mean_all()?)
}

/// `|α_s − α_t| / 100`.
pub fn delta_age(source: AgeYears, target: AgeYears) -> f64 {
    (source.0 - target.0).abs() / 100.0
}

/// Identity weight `0.25 cos(πΔ) + 0.75`, from 1 at Δ = 0 down to 0.5 at Δ = 1.
pub fn age_weight(delta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Range(format!("age delta {delta} outside [0, 1]")));
    }
    Ok(0.25 * (std::f64::consts::PI * delta).cos() + 0.75)
}

/// Identity weights for a batch; source estimates are clamped into the age range first.
pub fn identity_weights(sources: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    if sources.len() != targets.len() {
        return Err(Error::shape(sources.len(), targets.len()));
    }
    sources
        .iter()
        .zip(targets)
        .map(|(&s, &t)| {
            let s = s.clamp(MIN_AGE, MAX_AGE);
            age_weight(delta_age(AgeYears(s), AgeYears(t)))
        })
        .collect()
}

/// `w_i * (1 - cos(R(x_i), R(y_i)))` averaged over the batch, with fixed weights.
pub fn weighted_identity_loss(
    x: &Tensor,
    y: &Tensor,
    weights: &[f64],
    r: &IdentityEmbedder,
) -> Result<Tensor> {
    same_shape(x, y)?;
    let (x, y) = (batched(x)?, batched(y)?);
    let b = x.dims()[0];
    if weights.len() != b {
        return Err(Error::shape(b, weights.len()));
    }
    let ex = r.embed_batch(&x)?;
    let ey = r.embed_batch(&y)?;
    let half_sq = ((ex - ey)?.sqr()?.sum(D::Minus1)? * 0.5)?;
    let w = Tensor::from_slice(weights, b, &DEVICE)?;
    Ok((half_sq * w)?.mean_all()?)
}

/// Identity loss weighted by the age change between `sources` and `targets`.
pub fn identity_loss(
    x: &Tensor,
    y: &Tensor,
    sources: &[f64],
    targets: &[f64],
    r: &IdentityEmbedder,
) -> Result<Tensor> {
    weighted_identity_loss(x, y, &identity_weights(sources, targets)?, r)
}

/// `(α_t − A(y))²` in squared years, batch mean.
pub fn aging_loss(y: &Tensor, targets: &[f64], a: &AgePredictor) -> Result<Tensor> {
    let y = batched(y)?;
    let b = y.dims()[0];
    if targets.len() != b {
        return Err(Error::shape(b, targets.len()));
    }
    let t = Tensor::from_slice(targets, b, &DEVICE)?;
    let pred = a.predict_batch(&y)?;
    Ok((t - pred)?.sqr()?.mean_all()?)
}

/// Mean squared distance of `codes` (`(L, D)` or `(B, L, D)`) to `w̄`.
pub fn latent_regularization(codes: &Tensor, w_bar: &LatentCode) -> Result<Tensor> {
    let codes = match codes.rank() {
        2 => codes.unsqueeze(0)?,
        3 => codes.clone(),
        r => return Err(Error::shape("(L, D) or (B, L, D)", format!("rank {r}"))),
    };
    let dims = codes.dims();
    if dims[1] != w_bar.layers() || dims[2] != w_bar.dim() {
        return Err(Error::shape(
            format!("(_, {}, {})", w_bar.layers(), w_bar.dim()),
            format!("{dims:?}"),
        ));
    }
    Ok(codes.broadcast_sub(w_bar.tensor())?.sqr()?.mean_all()?)
}

/// Per-term values of one training step. `l2` and `lpips` already include
/// their region-split weights; `reg`, `id` and `age` are unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l2: f64,
    pub lpips: f64,
    pub reg: f64,
    pub id: f64,
    pub age: f64,
    pub cycle_total: f64,
    pub forward_total: f64,
    pub grand_total: f64,
    /// Mean `Δ_age` of the forward pass.
    pub delta_age: f64,
    /// Mean identity weight of the forward pass.
    pub id_weight: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "step,l2,lpips,reg,id,age,cycle_total,forward_total,grand_total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.l2,
            self.lpips,
            self.reg,
            self.id,
            self.age,
            self.cycle_total,
            self.forward_total,
            self.grand_total
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l2,
            self.lpips,
            self.reg,
            self.id,
            self.age,
            self.cycle_total,
            self.forward_total,
            self.grand_total,
            self.delta_age,
            self.id_weight,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// One pass of the model: the reference `x`, the output `y` and its latent codes.
pub struct PassSample<'a> {
    pub x: &'a Tensor,
    pub y: &'a Tensor,
    pub codes: &'a Tensor,
    /// Estimated age of each reference image.
    pub sources: &'a [f64],
    /// Age each output should have.
    pub targets: &'a [f64],
}

/// Differentiable total of one pass plus its per-term values.
pub struct PassLoss {
    pub total: Tensor,
    pub l2: f64,
    pub lpips: f64,
    pub reg: f64,
    pub id: f64,
    pub age: f64,
    pub delta_age: f64,
    pub id_weight: f64,
}

impl PassLoss {
    pub fn total_value(&self) -> Result<f64> {
        Ok(self.total.to_scalar::<f64>()?)
    }
}

/// Everything the objectives need besides the samples.
#[derive(Clone, Debug)]
pub struct ObjectiveContext {
    pub weights: LossWeights,
    pub center_fraction: f64,
    /// Losses are computed at `resolution / loss_downscale`.
    pub loss_downscale: usize,
    pub disabled: Vec<LossTerm>,
    pub w_bar: LatentCode,
    /// Years per unit of the aging term.
    pub age_unit: f64,
}

impl ObjectiveContext {
    pub fn from_config(config: &TrainConfig, w_bar: &LatentCode) -> Self {
        Self {
            weights: config.loss_weights.clone(),
            center_fraction: config.center_fraction,
            loss_downscale: config.loss_downscale,
            disabled: config.disabled.clone(),
            w_bar: w_bar.clone(),
            age_unit: config.age_loss_unit,
        }
    }

    pub fn is_disabled(&self, term: LossTerm) -> bool {
        self.disabled.contains(&term)
    }

    fn loss_resolution(&self, res: usize) -> Result<usize> {
        if self.loss_downscale == 0 || res % self.loss_downscale != 0 {
            return Err(Error::Range(format!(
                "loss downscale {} does not divide resolution {res}",
                self.loss_downscale
            )));
        }
        Ok(res / self.loss_downscale)
    }
}

/// `λ_l2·L2 + λ_lpips·LPIPS + λ_reg·L_reg + λ_id·L_ID + λ_age·L_age` for one pass.
///
/// `reconstruction` toggles the pixel and perceptual terms (switched off by the
/// forward-reconstruction knock-out).
pub fn pass_objective(
    sample: &PassSample,
    ctx: &ObjectiveContext,
    oracles: &Oracles,
    reconstruction: bool,
) -> Result<PassLoss> {
    let w = &ctx.weights;
    same_shape(sample.x, sample.y)?;
    let res = ctx.loss_resolution(sample.x.dims()[2])?;
    let (x, y) = if res == sample.x.dims()[2] {
        (sample.x.clone(), sample.y.clone())
    } else {
        (resize_square(sample.x, res)?, resize_square(sample.y, res)?)
    };
    let b = x.dims()[0];
    let zero = || Tensor::zeros((), crate::types::DTYPE, &DEVICE);
    let mask = RegionMask::new(res, ctx.center_fraction, 1.0, 1.0)?;
    let (inner, outer) = mask.indicators()?;

    let (l2, lpips) = if reconstruction {
        let plane = ((&inner * w.lambda_l2_center)? + (&outer * w.lambda_l2_outer)?)?;
        let l2 = pixel_distance(&x, &y, &plane)?.mean_all()?;
        let lp = region_perceptual_loss(
            &x,
            &y,
            &oracles.perceptual,
            &mask,
            w.lambda_lpips_center,
            w.lambda_lpips_outer,
        )?;
        (l2, lp)
    } else {
        (zero()?, zero()?)
    };
    let reg = if ctx.is_disabled(LossTerm::Regularization) {
        zero()?
    } else {
        latent_regularization(sample.codes, &ctx.w_bar)?
    };
    let id_weights = identity_weights(sample.sources, sample.targets)?;
    let id = weighted_identity_loss(&x, &y, &id_weights, &oracles.identity)?;
    let age = aging_loss(&y, sample.targets, &oracles.age)?;

    let total = ((((&l2 + &lpips)? + (&reg * w.lambda_reg)?)? + (&id * w.lambda_id)?)? + (&age * (w.lambda_age / (ctx.age_unit * ctx.age_unit)))?)?;
    let deltas: f64 = sample
        .sources
        .iter()
        .zip(sample.targets)
        .map(|(&s, &t)| delta_age(AgeYears(s.clamp(MIN_AGE, MAX_AGE)), AgeYears(t)))
        .sum();
    Ok(PassLoss {
        total,
        l2: l2.to_scalar()?,
        lpips: lpips.to_scalar()?,
        reg: reg.to_scalar()?,
        id: id.to_scalar()?,
        age: age.to_scalar()?,
        delta_age: deltas / b as f64,
        id_weight: id_weights.iter().sum::<f64>() / b as f64,
    })
}

/// The forward objective: output compared to the input at the sampled targets.
pub fn forward_objective(
    sample: &PassSample,
    ctx: &ObjectiveContext,
    oracles: &Oracles,
) -> Result<PassLoss> {
    pass_objective(
        sample,
        ctx,
        oracles,
        !ctx.is_disabled(LossTerm::ForwardReconstruction),
    )
}

/// The cycle objective: cycle output compared to the input at the source ages.
pub fn cycle_objective(
    sample: &PassSample,
    ctx: &ObjectiveContext,
    oracles: &Oracles,
) -> Result<PassLoss> {
    pass_objective(sample, ctx, oracles, true)
}

/// `forward_total + λ_cycle · cycle_total`.
pub fn total_objective(forward: &LossBreakdown, cycle: &LossBreakdown, weights: &LossWeights) -> f64 {
    forward.forward_total + weights.lambda_cycle * cycle.cycle_total
}

/// Combines the two passes into the logged breakdown.
pub fn combine(forward: &PassLoss, cycle: Option<&PassLoss>, weights: &LossWeights) -> Result<LossBreakdown> {
    let forward_total = forward.total_value()?;
    let cycle_total = match cycle {
        Some(c) => c.total_value()?,
        None => 0.0,
    };
    Ok(LossBreakdown {
        l2: forward.l2,
        lpips: forward.lpips,
        reg: forward.reg,
        id: forward.id,
        age: forward.age,
        cycle_total,
        forward_total,
        grand_total: forward_total + weights.lambda_cycle * cycle_total,
        delta_age: forward.delta_age,
        id_weight: forward.id_weight,
    })
}

/// Full two-pass objective of a batch: `(differentiable grand total, breakdown)`.
///
/// `model_fn(images, targets)` returns `(codes, outputs)` of the model.
pub fn step_objective<F>(
    images: &Tensor,
    sources: &[f64],
    targets: &[f64],
    ctx: &ObjectiveContext,
    oracles: &Oracles,
    mut model_fn: F,
) -> Result<(Tensor, LossBreakdown)>
where
    F: FnMut(&Tensor, &[f64]) -> Result<(Tensor, Tensor)>,
{
    let (codes, y_out) = model_fn(images, targets)?;
    let forward = forward_objective(
        &PassSample {
            x: images,
            y: &y_out,
            codes: &codes,
            sources,
            targets,
        },
        ctx,
        oracles,
    )?;
    let use_cycle = !ctx.is_disabled(LossTerm::Cycle) && ctx.weights.lambda_cycle != 0.0;
    let cycle = if use_cycle {
        let back: Vec<f64> = sources.iter().map(|s| s.clamp(MIN_AGE, MAX_AGE)).collect();
        let (codes_c, y_cycle) = model_fn(&y_out, &back)?;
        Some(cycle_objective(
            &PassSample {
                x: images,
                y: &y_cycle,
                codes: &codes_c,
                sources: &back,
                targets: &back,
            },
            ctx,
            oracles,
        )?)
    } else {
        None
    };
    let breakdown = combine(&forward, cycle.as_ref(), &ctx.weights)?;
    let grand = match &cycle {
        Some(c) => (&forward.total + (&c.total * ctx.weights.lambda_cycle)?)?,
        None => forward.total.clone(),
    };
    Ok((grand, breakdown))
}

/// True when the model is trained in the mode whose outputs do not depend on `w*`.
pub fn ignores_inversion(mode: EncoderMode) -> bool {
    mode == EncoderMode::Direct
}
