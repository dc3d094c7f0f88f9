//! Frozen auxiliary networks: the age predictor `A`, the identity embedder `R`
//! and the perceptual extractor `F`.
//!
//! The desk-scale stand-ins are small convolutional networks. `A` and `R` are
//! pretrained here on toy-generator scenes and then frozen; `F` is a fixed
//! random-weight pyramid.

use std::sync::Arc;

use candle_core::{Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{fmt_f64, parse_list, KeyValues};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::{center_crop, init_rng, resize_square, Conv2d, Linear, ParamSet};
use crate::optim::Adam;
use crate::types::{AgeYears, Image, DEVICE};

/// Strided convolutional trunk followed by a two-layer head on the flattened map.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNetSpec {
    pub input_resolution: usize,
    pub widths: [usize; 3],
    pub hidden: usize,
    pub outputs: usize,
}

impl ConvNetSpec {
    fn flat_features(&self) -> usize {
        let side = self.input_resolution / 8;
        self.widths[2] * side * side
    }

    fn write(&self, kv: &mut KeyValues) {
        kv.set("input_resolution", self.input_resolution);
        let w: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        kv.set("widths", w.join(","));
        kv.set("hidden", self.hidden);
        kv.set("outputs", self.outputs);
    }

    fn read(kv: &KeyValues) -> Result<Self> {
        let w: Vec<usize> = parse_list(kv.require("widths")?).map_err(Error::Invalid)?;
        if w.len() != 3 {
            return Err(Error::Invalid(format!("expected 3 widths, got {w:?}")));
        }
        Ok(Self {
            input_resolution: kv.parse_req("input_resolution")?,
            widths: [w[0], w[1], w[2]],
            hidden: kv.parse_req("hidden")?,
            outputs: kv.parse_req("outputs")?,
        })
    }
}

#[derive(Clone, Debug)]
struct ConvNet {
    spec: ConvNetSpec,
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
}

impl ConvNet {
    fn init(spec: &ConvNetSpec, seed: u64) -> Result<ParamSet> {
        if spec.input_resolution % 8 != 0 || spec.input_resolution == 0 {
            return Err(Error::Range(format!(
                "input resolution {} must be a positive multiple of 8",
                spec.input_resolution
            )));
        }
        let mut rng = init_rng(seed);
        let mut ps = ParamSet::new();
        let mut prev = 3;
        for (i, &w) in spec.widths.iter().enumerate() {
            Conv2d::init(&mut ps, &mut rng, &format!("conv{i}"), prev, w, 3, 1.7)?;
            prev = w;
        }
        Linear::init(&mut ps, &mut rng, "fc1", spec.flat_features(), spec.hidden, 1.7)?;
        Linear::init(&mut ps, &mut rng, "fc2", spec.hidden, spec.outputs, 1.0)?;
        Ok(ps)
    }

    fn load(spec: ConvNetSpec, ps: &ParamSet, trainable: bool) -> Result<Self> {
        let convs = (0..3)
            .map(|i| Conv2d::load(ps, &format!("conv{i}"), 2, 1, trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            fc1: Linear::load(ps, "fc1", trainable)?,
            fc2: Linear::load(ps, "fc2", trainable)?,
            spec,
        })
    }

    /// Expects inputs already at `input_resolution`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.silu()?;
        }
        let b = h.dims()[0];
        let h = h.reshape((b, self.spec.flat_features()))?;
        let h = self.fc1.forward(&h)?.silu()?;
        self.fc2.forward(&h)
    }
}

/// Draws toy scenes whose coarse, middle and fine rows come from independent
/// `W` samples, so scene parameters vary independently.
pub fn sample_scene_codes(gen: &Generator, rng: &mut ChaCha8Rng, n: usize) -> Result<Tensor> {
    let seeds = |rng: &mut ChaCha8Rng| -> Vec<u64> { (0..n).map(|_| rng.gen()).collect() };
    let (a, m, f) = (seeds(rng), seeds(rng), seeds(rng));
    compose_groups(gen, &gen.map_seeds(&a)?, &gen.map_seeds(&m)?, &gen.map_seeds(&f)?)
}

/// Builds `(n, L, D)` codes taking coarse rows from `coarse`, etc. (each `(n, D)`).
pub fn compose_groups(
    gen: &Generator,
    coarse: &Tensor,
    middle: &Tensor,
    fine: &Tensor,
) -> Result<Tensor> {
    let g = gen.groups();
    let rows: Vec<&Tensor> = (0..gen.layers())
        .map(|l| {
            if g.coarse.contains(&l) {
                coarse
            } else if g.middle.contains(&l) {
                middle
            } else {
                fine
            }
        })
        .collect();
    Ok(Tensor::stack(&rows, 1)?)
}

/// Training schedule shared by the stand-in pretraining loops.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl PretrainSchedule {
    /// Learning rate with a step decay over the final third of training.
    fn lr_at(&self, step: usize) -> f64 {
        if step * 3 >= self.steps * 2 {
            self.learning_rate * 0.2
        } else {
            self.learning_rate
        }
    }
}

/// Held-out statistics recorded when a stand-in is pretrained.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub entries: Vec<(String, f64)>,
}

impl PretrainReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    fn push(&mut self, key: &str, v: f64) {
        self.entries.push((key.to_string(), v));
    }

    fn write(&self, kv: &mut KeyValues) {
        for (k, v) in &self.entries {
            kv.set(&format!("report.{k}"), fmt_f64(*v));
        }
    }

    fn read(kv: &KeyValues) -> Result<Self> {
        let mut r = Self::default();
        for k in kv.keys() {
            if let Some(name) = k.strip_prefix("report.") {
                r.push(name, kv.parse_req(k)?);
            }
        }
        Ok(r)
    }
}

/// Age regressor `A`: image to years.
#[derive(Clone, Debug)]
pub struct AgePredictor {
    net: ConvNet,
    params: ParamSet,
    report: PretrainReport,
}

const AGE_CENTER: f64 = 52.5;
const AGE_SCALE: f64 = 47.5;

impl AgePredictor {
    pub fn spec_with_width(input_resolution: usize, width: usize) -> ConvNetSpec {
        ConvNetSpec {
            input_resolution,
            widths: [width, 2 * width, 2 * width],
            hidden: 64,
            outputs: 1,
        }
    }

    pub fn new(spec: ConvNetSpec, seed: u64, trainable: bool) -> Result<Self> {
        let params = ConvNet::init(&spec, seed)?;
        Self::from_params(spec, params, trainable, PretrainReport::default())
    }

    fn from_params(
        spec: ConvNetSpec,
        params: ParamSet,
        trainable: bool,
        report: PretrainReport,
    ) -> Result<Self> {
        if spec.outputs != 1 {
            return Err(Error::Invalid("age predictor has one output".into()));
        }
        Ok(Self {
            net: ConvNet::load(spec, &params, trainable)?,
            params,
            report,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn report(&self) -> &PretrainReport {
        &self.report
    }

    pub fn input_resolution(&self) -> usize {
        self.net.spec.input_resolution
    }

    /// Predicted ages `(B,)` in years; differentiable in `images`.
    pub fn predict_batch(&self, images: &Tensor) -> Result<Tensor> {
        let x = resize_square(images, self.net.spec.input_resolution)?;
        let raw = self.net.forward(&x)?;
        Ok((raw.flatten_all()? * AGE_SCALE)?.affine(1.0, AGE_CENTER)?)
    }

    pub fn predict_age(&self, image: &Image) -> Result<AgeYears> {
        let t = self.predict_batch(&image.tensor().unsqueeze(0)?)?;
        Ok(AgeYears(t.to_vec1::<f64>()?[0]))
    }

    pub fn predict_many(&self, images: &Tensor) -> Result<Vec<f64>> {
        Ok(self.predict_batch(images)?.to_vec1::<f64>()?)
    }

    /// Regression pretraining on toy scenes with exact ages, then frozen.
    pub fn pretrain(
        gen: &Generator,
        spec: ConvNetSpec,
        schedule: &PretrainSchedule,
    ) -> Result<Self> {
        let model = Self::new(spec.clone(), schedule.seed, true)?;
        let vars: Vec<_> = model
            .params
            .iter()
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect();
        let mut opt = Adam::new(vars, schedule.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0xa9e);
        for step in 0..schedule.steps {
            opt.set_lr(schedule.lr_at(step));
            let codes = sample_scene_codes(gen, &mut rng, schedule.batch_size)?;
            let images = gen.synthesize_batch(&codes)?;
            let ages = Tensor::from_vec(gen.true_ages(&codes)?, schedule.batch_size, &DEVICE)?;
            let pred = model.predict_batch(&images)?;
            let loss = ((pred - ages)? / 100.0)?.sqr()?.mean_all()?;
            let grads = loss.backward()?;
            opt.step(&grads)?;
        }
        let mut report = PretrainReport::default();
        report.push("heldout_mae", age_mae(gen, &model, schedule.seed ^ 0x4e1d, 512)?);
        Self::from_params(spec, model.params, false, report)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new("age_predictor");
        self.net.spec.write(&mut c.metadata);
        self.report.write(&mut c.metadata);
        c.insert_params("net.", &self.params)?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("age_predictor")?;
        let spec = ConvNetSpec::read(&c.metadata)?;
        Self::from_params(spec, c.params("net.")?, false, PretrainReport::read(&c.metadata)?)
    }
}

/// Mean absolute error of `predictor` over `n` held-out toy scenes.
pub fn age_mae(gen: &Generator, predictor: &AgePredictor, seed: u64, n: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut done = 0;
    while done < n {
        let b = (n - done).min(128);
        let codes = sample_scene_codes(gen, &mut rng, b)?;
        let pred = predictor.predict_many(&gen.synthesize_batch(&codes)?)?;
        let truth = gen.true_ages(&codes)?;
        total += pred.iter().zip(&truth).map(|(p, t)| (p - t).abs()).sum::<f64>();
        done += b;
    }
    Ok(total / n as f64)
}

/// Identity embedder `R`: center crop, resize, embed, normalize.
#[derive(Clone, Debug)]
pub struct IdentityEmbedder {
    net: ConvNet,
    params: ParamSet,
    crop_fraction: f64,
    report: PretrainReport,
}

impl IdentityEmbedder {
    pub fn default_spec() -> ConvNetSpec {
        ConvNetSpec {
            input_resolution: 24,
            widths: [16, 32, 32],
            hidden: 64,
            outputs: 32,
        }
    }

    pub fn new(spec: ConvNetSpec, crop_fraction: f64, seed: u64, trainable: bool) -> Result<Self> {
        let params = ConvNet::init(&spec, seed)?;
        Self::from_params(spec, params, crop_fraction, trainable, PretrainReport::default())
    }

    fn from_params(
        spec: ConvNetSpec,
        params: ParamSet,
        crop_fraction: f64,
        trainable: bool,
        report: PretrainReport,
    ) -> Result<Self> {
        if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
            return Err(Error::Range(format!("crop fraction {crop_fraction} outside (0, 1]")));
        }
        Ok(Self {
            net: ConvNet::load(spec, &params, trainable)?,
            params,
            crop_fraction,
            report,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn report(&self) -> &PretrainReport {
        &self.report
    }

    pub fn crop_fraction(&self) -> f64 {
        self.crop_fraction
    }

    /// Unit-norm embeddings `(B, E)`.
    pub fn embed_batch(&self, images: &Tensor) -> Result<Tensor> {
        let x = center_crop(images, self.crop_fraction)?;
        let x = resize_square(&x, self.net.spec.input_resolution)?;
        let e = self.net.forward(&x)?;
        let norm = e.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
        Ok(e.broadcast_div(&norm)?)
    }

    pub fn identity_embedding(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self
            .embed_batch(&image.tensor().unsqueeze(0)?)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    }

    /// Per-sample cosine similarity `(B,)` between two image batches.
    pub fn cosine_batch(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ea = self.embed_batch(a)?;
        let eb = self.embed_batch(b)?;
        Ok((ea * eb)?.sum(D::Minus1)?)
    }

    /// Contrastive pretraining: scenes sharing coarse and fine rows are the
    /// same identity; the middle rows (ring frequency) are the nuisance.
    pub fn pretrain(
        gen: &Generator,
        spec: ConvNetSpec,
        crop_fraction: f64,
        schedule: &PretrainSchedule,
    ) -> Result<Self> {
        let model = Self::new(spec.clone(), crop_fraction, schedule.seed, true)?;
        let vars: Vec<_> = model
            .params
            .iter()
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect();
        let mut opt = Adam::new(vars, schedule.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x1d);
        let n = schedule.batch_size;
        let temperature = 0.1;
        for step in 0..schedule.steps {
            opt.set_lr(schedule.lr_at(step));
            let (anchor, positive) = identity_pairs(gen, &mut rng, n)?;
            let ea = model.embed_batch(&gen.synthesize_batch(&anchor)?)?;
            let ep = model.embed_batch(&gen.synthesize_batch(&positive)?)?;
            let logits = (ea.matmul(&ep.t()?)? / temperature)?;
            let loss = (info_nce(&logits)? + info_nce(&logits.t()?)?)?;
            let grads = loss.backward()?;
            opt.step(&grads)?;
        }
        let (pos, neg) = identity_separation(gen, &model, schedule.seed ^ 0x5ca1e, 1000)?;
        let mut report = PretrainReport::default();
        report.push("positive_cosine", pos);
        report.push("negative_cosine", neg);
        Self::from_params(spec, model.params, crop_fraction, false, report)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new("identity_embedder");
        self.net.spec.write(&mut c.metadata);
        c.metadata.set("crop_fraction", fmt_f64(self.crop_fraction));
        self.report.write(&mut c.metadata);
        c.insert_params("net.", &self.params)?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("identity_embedder")?;
        let spec = ConvNetSpec::read(&c.metadata)?;
        Self::from_params(
            spec,
            c.params("net.")?,
            c.metadata.parse_req("crop_fraction")?,
            false,
            PretrainReport::read(&c.metadata)?,
        )
    }
}

/// Cross-entropy of each row of `logits` against its diagonal entry.
fn info_nce(logits: &Tensor) -> Result<Tensor> {
    let n = logits.dims()[0];
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let eye = Tensor::eye(n, crate::types::DTYPE, &DEVICE)?;
    let diag = (&shifted * eye)?.sum_keepdim(D::Minus1)?;
    Ok((lse - diag)?.mean_all()?)
}

/// `(anchor, positive)` codes sharing coarse and fine rows, with independent middle rows.
pub fn identity_pairs(gen: &Generator, rng: &mut ChaCha8Rng, n: usize) -> Result<(Tensor, Tensor)> {
    let seeds = |rng: &mut ChaCha8Rng| -> Vec<u64> { (0..n).map(|_| rng.gen()).collect() };
    let (c, f, m1, m2) = (seeds(rng), seeds(rng), seeds(rng), seeds(rng));
    let (c, f) = (gen.map_seeds(&c)?, gen.map_seeds(&f)?);
    Ok((
        compose_groups(gen, &c, &gen.map_seeds(&m1)?, &f)?,
        compose_groups(gen, &c, &gen.map_seeds(&m2)?, &f)?,
    ))
}

/// Mean cosine of same-identity pairs and of unrelated pairs over `n` samples each.
pub fn identity_separation(
    gen: &Generator,
    embedder: &IdentityEmbedder,
    seed: u64,
    n: usize,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg) = (0.0, 0.0);
    let mut done = 0;
    while done < n {
        let b = (n - done).min(125);
        let (a, p) = identity_pairs(gen, &mut rng, b)?;
        let other = sample_scene_codes(gen, &mut rng, b)?;
        let (ia, ip, io) = (
            gen.synthesize_batch(&a)?,
            gen.synthesize_batch(&p)?,
            gen.synthesize_batch(&other)?,
        );
        pos += embedder.cosine_batch(&ia, &ip)?.sum_all()?.to_scalar::<f64>()?;
        neg += embedder.cosine_batch(&ia, &io)?.sum_all()?.to_scalar::<f64>()?;
        done += b;
    }
    Ok((pos / n as f64, neg / n as f64))
}

/// Fixed random-weight convolutional pyramid standing in for a perceptual network.
///
/// Level schedule for input side `S`: `(8, S, S)`, `(16, S/2, S/2)`, `(32, S/4, S/4)`.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    convs: Vec<Conv2d>,
    params: ParamSet,
    seed: u64,
}

pub const PERCEPTUAL_WIDTHS: [usize; 3] = [8, 16, 32];
const PERCEPTUAL_STRIDES: [usize; 3] = [1, 2, 2];

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = init_rng(seed);
        let mut ps = ParamSet::new();
        let mut prev = 3;
        for (i, &w) in PERCEPTUAL_WIDTHS.iter().enumerate() {
            Conv2d::init(&mut ps, &mut rng, &format!("level{i}"), prev, w, 3, 1.7)?;
            prev = w;
        }
        Self::from_params(ps, seed)
    }

    fn from_params(params: ParamSet, seed: u64) -> Result<Self> {
        let convs = (0..PERCEPTUAL_WIDTHS.len())
            .map(|i| Conv2d::load(&params, &format!("level{i}"), PERCEPTUAL_STRIDES[i], 1, false))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            params,
            seed,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Shapes `(C, H, W)` of each level for an input of side `side`.
    pub fn level_shapes(side: usize) -> Vec<(usize, usize, usize)> {
        let mut s = side;
        PERCEPTUAL_WIDTHS
            .iter()
            .zip(PERCEPTUAL_STRIDES)
            .map(|(&c, stride)| {
                s = (s + stride - 1) / stride;
                (c, s, s)
            })
            .collect()
    }

    /// Feature maps of every level for a `(B, 3, H, W)` batch.
    pub fn features_batch(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = images.clone();
        for c in &self.convs {
            h = c.forward(&h)?.silu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn perceptual_features(&self, image: &Image) -> Result<Vec<Tensor>> {
        self.features_batch(&image.tensor().unsqueeze(0)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new("perceptual");
        c.metadata.set("seed", self.seed);
        c.insert_params("net.", &self.params)?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("perceptual")?;
        Self::from_params(c.params("net.")?, c.metadata.parse_req("seed")?)
    }
}

/// The frozen networks used by the losses, plus the held-out evaluation predictor.
#[derive(Clone, Debug)]
pub struct Oracles {
    pub age: Arc<AgePredictor>,
    pub identity: Arc<IdentityEmbedder>,
    pub perceptual: Arc<PerceptualExtractor>,
    pub eval_age: Arc<AgePredictor>,
}

impl Oracles {
    /// Checksums of every frozen parameter set, in a fixed order.
    pub fn checksums(&self) -> Result<Vec<(String, String)>> {
        Ok(vec![
            ("age".into(), self.age.params().checksum()?),
            ("identity".into(), self.identity.params().checksum()?),
            ("perceptual".into(), self.perceptual.params().checksum()?),
            ("eval_age".into(), self.eval_age.params().checksum()?),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorSpec;

    fn gen() -> Generator {
        Generator::new(GeneratorSpec {
            n_avg: 256,
            ..GeneratorSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let g = gen();
        let r = IdentityEmbedder::new(IdentityEmbedder::default_spec(), 0.7, 1, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs = g.synthesize_batch(&sample_scene_codes(&g, &mut rng, 4).unwrap()).unwrap();
        let e = r.embed_batch(&imgs).unwrap();
        for n in e.sqr().unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap() {
            assert!((n - 1.0).abs() < 1e-12);
        }
        let c = r.cosine_batch(&imgs, &imgs).unwrap().to_vec1::<f64>().unwrap();
        assert!(c.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn perceptual_self_difference_is_zero_and_shapes_follow_schedule() {
        let g = gen();
        let f = PerceptualExtractor::new(3).unwrap();
        let img = g.synthesize(&g.sample_latent(1).unwrap()).unwrap();
        let a = f.perceptual_features(&img).unwrap();
        let b = f.perceptual_features(&img).unwrap();
        let shapes = PerceptualExtractor::level_shapes(32);
        assert_eq!(shapes, vec![(8, 32, 32), (16, 16, 16), (32, 8, 8)]);
        for ((x, y), s) in a.iter().zip(&b).zip(&shapes) {
            assert_eq!(x.dims(), &[1, s.0, s.1, s.2]);
            let d = (x - y).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn pixel_permutation_changes_features() {
        let g = gen();
        let f = PerceptualExtractor::new(3).unwrap();
        let img = g.synthesize(&g.sample_latent(4).unwrap()).unwrap();
        let res = img.resolution();
        let data = img.to_vec().unwrap();
        // permute pixel positions with a fixed shuffle applied to all channels
        let mut order: Vec<usize> = (0..res * res).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut shuffled = vec![0.0; data.len()];
        for c in 0..3 {
            for (dst, &src) in order.iter().enumerate() {
                shuffled[c * res * res + dst] = data[c * res * res + src];
            }
        }
        let other = Image::from_vec(res, shuffled).unwrap();
        let a = f.perceptual_features(&img).unwrap();
        let b = f.perceptual_features(&other).unwrap();
        let diff: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap())
            .sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn predictor_is_deterministic_and_has_image_gradient() {
        let g = gen();
        let a = AgePredictor::new(AgePredictor::spec_with_width(32, 8), 5, false).unwrap();
        let img = g.synthesize(&g.sample_latent(2).unwrap()).unwrap();
        assert_eq!(a.predict_age(&img).unwrap(), a.predict_age(&img).unwrap());
        let var = candle_core::Var::from_tensor(&img.tensor().unsqueeze(0).unwrap()).unwrap();
        let out = a.predict_batch(var.as_tensor()).unwrap().sum_all().unwrap();
        let grads = out.backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap();
        let mag = g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(mag > 0.0);
        // frozen parameters are never part of the gradient store
        for (_, v) in a.params().iter() {
            assert!(grads.get(v.as_tensor()).is_none());
        }
    }

    #[test]
    fn checkpoints_round_trip() {
        let a = AgePredictor::new(AgePredictor::spec_with_width(32, 8), 5, false).unwrap();
        let back = AgePredictor::from_checkpoint(&a.to_checkpoint().unwrap()).unwrap();
        assert!(back.params().bit_eq(a.params()).unwrap());
        let r = IdentityEmbedder::new(IdentityEmbedder::default_spec(), 0.7, 1, false).unwrap();
        let back = IdentityEmbedder::from_checkpoint(&r.to_checkpoint().unwrap()).unwrap();
        assert!(back.params().bit_eq(r.params()).unwrap());
        assert_eq!(back.crop_fraction(), 0.7);
        let f = PerceptualExtractor::new(2).unwrap();
        let back = PerceptualExtractor::from_checkpoint(&f.to_checkpoint().unwrap()).unwrap();
        assert!(back.params().bit_eq(f.params()).unwrap());
    }

    #[test]
    fn pair_sampler_shares_identity_rows() {
        let g = gen();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, p) = identity_pairs(&g, &mut rng, 3).unwrap();
        let pa = g.scene_tensor(&a).unwrap().to_vec2::<f64>().unwrap();
        let pp = g.scene_tensor(&p).unwrap().to_vec2::<f64>().unwrap();
        for (x, y) in pa.iter().zip(&pp) {
            assert_eq!(x[0], y[0]);
            assert_eq!(x[2], y[2]);
            assert_eq!(x[4], y[4]);
            assert_ne!(x[3], y[3]);
        }
    }
}
