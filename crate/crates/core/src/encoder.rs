//! Pyramid encoders and the age-conditioned composition around the frozen generator.
//!
//! Both the frozen inversion encoder (3 input planes) and the trainable aging
//! encoder (4 input planes) share one architecture: a three-stage strided
//! backbone, a top-down feature pyramid, and one map2style head per style row.
//! Heads of the coarse rows read the deepest pyramid level, middle rows the
//! intermediate level and fine rows the shallowest one.

use std::sync::Arc;

use candle_core::Tensor;

use crate::config::{EncoderMode, KeyValues};
use crate::error::{Error, Result};
use crate::generator::{Generator, StyleGroups};
use crate::nn::{init_rng, Conv2d, Linear, ParamSet};
use crate::oracles::AgePredictor;
use crate::types::{AgeYears, ConditionedInput, Image, LatentCode, DEVICE, DTYPE};

/// Architecture of a pyramid encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub layers: usize,
    pub dim: usize,
    pub resolution: usize,
    pub stem: usize,
    pub stages: [usize; 3],
    pub pyramid: usize,
    pub head: usize,
    /// Gain of the final head projections; small values start the output near zero.
    pub output_gain: f64,
}

impl EncoderSpec {
    pub fn new(in_channels: usize, layers: usize, dim: usize, resolution: usize) -> Self {
        Self {
            in_channels,
            layers,
            dim,
            resolution,
            stem: 16,
            stages: [24, 32, 48],
            pyramid: 32,
            head: 32,
            output_gain: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution % 8 != 0 || self.resolution < 8 {
            return Err(Error::Range(format!(
                "encoder resolution {} must be a multiple of 8",
                self.resolution
            )));
        }
        if self.layers < 3 {
            return Err(Error::Range("encoder needs at least 3 style rows".into()));
        }
        Ok(())
    }

    pub fn write(&self, kv: &mut KeyValues, prefix: &str) {
        kv.set(&format!("{prefix}in_channels"), self.in_channels);
        kv.set(&format!("{prefix}layers"), self.layers);
        kv.set(&format!("{prefix}dim"), self.dim);
        kv.set(&format!("{prefix}resolution"), self.resolution);
        kv.set(&format!("{prefix}stem"), self.stem);
        let stages: Vec<String> = self.stages.iter().map(|s| s.to_string()).collect();
        kv.set(&format!("{prefix}stages"), stages.join(","));
        kv.set(&format!("{prefix}pyramid"), self.pyramid);
        kv.set(&format!("{prefix}head"), self.head);
        kv.set(&format!("{prefix}output_gain"), crate::config::fmt_f64(self.output_gain));
    }

    pub fn read(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let key = |k: &str| format!("{prefix}{k}");
        let stages: Vec<usize> = crate::config::parse_list(kv.require(&key("stages"))?)
            .map_err(Error::Invalid)?;
        if stages.len() != 3 {
            return Err(Error::Invalid(format!("expected 3 stage widths, got {stages:?}")));
        }
        let spec = Self {
            in_channels: kv.parse_req(&key("in_channels"))?,
            layers: kv.parse_req(&key("layers"))?,
            dim: kv.parse_req(&key("dim"))?,
            resolution: kv.parse_req(&key("resolution"))?,
            stem: kv.parse_req(&key("stem"))?,
            stages: [stages[0], stages[1], stages[2]],
            pyramid: kv.parse_req(&key("pyramid"))?,
            head: kv.parse_req(&key("head"))?,
            output_gain: kv.parse_req(&key("output_gain"))?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Pyramid level (0 = shallowest) read by each style row.
    pub fn head_levels(&self) -> Vec<usize> {
        let g = StyleGroups::for_layers(self.layers);
        (0..self.layers)
            .map(|l| {
                if g.coarse.contains(&l) {
                    2
                } else if g.middle.contains(&l) {
                    1
                } else {
                    0
                }
            })
            .collect()
    }

    /// Side length of pyramid level `level`.
    pub fn level_size(&self, level: usize) -> usize {
        self.resolution >> (level + 1)
    }
}

fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// One map2style head: stride-2 convolutions down to 1x1, then a projection to `D`.
#[derive(Clone, Debug)]
struct StyleHead {
    convs: Vec<Conv2d>,
    proj: Linear,
}

impl StyleHead {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = silu(&c.forward(&h)?)?;
        }
        let (b, c, hh, ww) = h.dims4()?;
        debug_assert_eq!((hh, ww), (1, 1));
        self.proj.forward(&h.reshape((b, c))?)
    }
}

fn head_conv_count(size: usize) -> usize {
    let mut n = 0;
    let mut s = size;
    while s > 1 {
        s = s.div_ceil(2);
        n += 1;
    }
    n
}

/// A feature-pyramid encoder producing `L` style vectors of dimension `D`.
#[derive(Clone, Debug)]
pub struct PyramidEncoder {
    spec: EncoderSpec,
    params: ParamSet,
    trainable: bool,
    stem: Conv2d,
    stages: [Conv2d; 3],
    laterals: [Conv2d; 3],
    heads: Vec<StyleHead>,
    offset: Option<Tensor>,
}

impl PyramidEncoder {
    /// Fresh seeded parameters for `spec`.
    pub fn init_params(spec: &EncoderSpec, seed: u64) -> Result<ParamSet> {
        spec.validate()?;
        let mut rng = init_rng(seed);
        let mut ps = ParamSet::new();
        let gain = 1.7;
        Conv2d::init(&mut ps, &mut rng, "stem", spec.in_channels, spec.stem, 3, gain)?;
        let mut prev = spec.stem;
        for (i, &w) in spec.stages.iter().enumerate() {
            Conv2d::init(&mut ps, &mut rng, &format!("stage{i}"), prev, w, 3, gain)?;
            prev = w;
        }
        for (i, &w) in spec.stages.iter().enumerate() {
            Conv2d::init(&mut ps, &mut rng, &format!("lateral{i}"), w, spec.pyramid, 1, 1.0)?;
        }
        for (l, level) in spec.head_levels().into_iter().enumerate() {
            let n = head_conv_count(spec.level_size(level));
            let mut c_in = spec.pyramid;
            for k in 0..n {
                Conv2d::init(&mut ps, &mut rng, &format!("head{l:02}.conv{k}"), c_in, spec.head, 3, gain)?;
                c_in = spec.head;
            }
            Linear::init(&mut ps, &mut rng, &format!("head{l:02}.proj"), c_in, spec.dim, spec.output_gain)?;
        }
        Ok(ps)
    }

    /// Builds the network over `params`. Frozen encoders read detached tensors.
    pub fn from_params(spec: EncoderSpec, params: ParamSet, trainable: bool) -> Result<Self> {
        spec.validate()?;
        let stem = Conv2d::load(&params, "stem", 1, 1, trainable)?;
        let stages = [
            Conv2d::load(&params, "stage0", 2, 1, trainable)?,
            Conv2d::load(&params, "stage1", 2, 1, trainable)?,
            Conv2d::load(&params, "stage2", 2, 1, trainable)?,
        ];
        let laterals = [
            Conv2d::load(&params, "lateral0", 1, 0, trainable)?,
            Conv2d::load(&params, "lateral1", 1, 0, trainable)?,
            Conv2d::load(&params, "lateral2", 1, 0, trainable)?,
        ];
        let mut heads = Vec::with_capacity(spec.layers);
        for (l, level) in spec.head_levels().into_iter().enumerate() {
            let n = head_conv_count(spec.level_size(level));
            let convs = (0..n)
                .map(|k| Conv2d::load(&params, &format!("head{l:02}.conv{k}"), 2, 1, trainable))
                .collect::<Result<Vec<_>>>()?;
            let proj = Linear::load(&params, &format!("head{l:02}.proj"), trainable)?;
            heads.push(StyleHead { convs, proj });
        }
        let offset = match params.var("latent_offset") {
            Ok(v) => Some(v.as_tensor().detach()),
            Err(_) => None,
        };
        Ok(Self {
            spec,
            params,
            trainable,
            stem,
            stages,
            laterals,
            heads,
            offset,
        })
    }

    pub fn new(spec: EncoderSpec, seed: u64, trainable: bool) -> Result<Self> {
        let params = Self::init_params(&spec, seed)?;
        Self::from_params(spec, params, trainable)
    }

    /// Adds a constant `(L, D)` offset to every output (stored, never trained).
    pub fn with_offset(self, offset: &LatentCode) -> Result<Self> {
        if offset.layers() != self.spec.layers || offset.dim() != self.spec.dim {
            return Err(Error::shape(
                format!("({}, {})", self.spec.layers, self.spec.dim),
                format!("({}, {})", offset.layers(), offset.dim()),
            ));
        }
        let mut params = self.params.clone();
        params.insert("latent_offset", offset.tensor().copy()?)?;
        Self::from_params(self.spec, params, self.trainable)
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Parameters the optimizer may update (everything but the constant offset).
    pub fn trainable_params(&self) -> Vec<(String, candle_core::Var)> {
        if !self.trainable {
            return Vec::new();
        }
        self.params
            .iter()
            .filter(|(n, _)| *n != "latent_offset")
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect()
    }

    /// Zeroes every head projection so the raw output is exactly zero.
    pub fn zero_output_layers(&self) -> Result<()> {
        for (name, var) in self.params.iter() {
            if name.contains(".proj.") {
                var.set(&Tensor::zeros(var.dims(), DTYPE, &DEVICE)?)?;
            }
        }
        Ok(())
    }

    /// Encodes a `(B, C, H, W)` batch into `(B, L, D)` codes.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.spec.in_channels || h != self.spec.resolution || w != self.spec.resolution {
            return Err(Error::shape(
                format!(
                    "(B, {}, {r}, {r})",
                    self.spec.in_channels,
                    r = self.spec.resolution
                ),
                format!("{:?}", x.dims()),
            ));
        }
        let h0 = silu(&self.stem.forward(x)?)?;
        let f0 = silu(&self.stages[0].forward(&h0)?)?;
        let f1 = silu(&self.stages[1].forward(&f0)?)?;
        let f2 = silu(&self.stages[2].forward(&f1)?)?;

        let p2 = self.laterals[2].forward(&f2)?;
        let p1 = upsample2(&p2)?.add(&self.laterals[1].forward(&f1)?)?;
        let p0 = upsample2(&p1)?.add(&self.laterals[0].forward(&f0)?)?;
        let levels = [p0, p1, p2];

        let outs = self
            .heads
            .iter()
            .zip(self.spec.head_levels())
            .map(|(head, level)| head.forward(&levels[level]))
            .collect::<Result<Vec<_>>>()?;
        let codes = Tensor::stack(&outs, 1)?;
        Ok(match &self.offset {
            Some(off) => codes.broadcast_add(off)?,
            None => codes,
        })
    }
}

fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
}

/// Stacks a `(B, 3, H, W)` batch with constant age planes `target / 100`.
pub fn condition_batch(images: &Tensor, targets: &[f64]) -> Result<Tensor> {
    let (b, _, h, w) = images.dims4()?;
    if targets.len() != b {
        return Err(Error::shape(b, targets.len()));
    }
    for &t in targets {
        AgeYears::target(t)?;
    }
    let planes: Vec<f64> = targets.iter().map(|t| t / 100.0).collect();
    let planes = Tensor::from_vec(planes, (b, 1, 1, 1), &DEVICE)?.broadcast_as((b, 1, h, w))?;
    Ok(Tensor::cat(&[images, &planes.contiguous()?], 1)?)
}

/// `x ⊕ α_t`: the image with its constant age plane appended.
pub fn condition(image: &Image, target: AgeYears) -> Result<ConditionedInput> {
    ConditionedInput::new(image, target)
}

/// The aging encoder, the frozen inversion encoder and the frozen generator.
#[derive(Clone, Debug)]
pub struct SamModel {
    pub generator: Arc<Generator>,
    pub aging: PyramidEncoder,
    pub inversion: PyramidEncoder,
    pub mode: EncoderMode,
}

impl SamModel {
    pub fn new(
        generator: Arc<Generator>,
        aging: PyramidEncoder,
        inversion: PyramidEncoder,
        mode: EncoderMode,
    ) -> Result<Self> {
        if inversion.is_trainable() {
            return Err(Error::Invalid("inversion encoder must be frozen".into()));
        }
        for (name, enc, channels) in [("aging", &aging, 4), ("inversion", &inversion, 3)] {
            let s = enc.spec();
            if s.in_channels != channels
                || s.layers != generator.layers()
                || s.dim != generator.dim()
                || s.resolution != generator.resolution()
            {
                return Err(Error::shape(
                    format!(
                        "{name} encoder ({channels}ch, L={}, D={}, res={})",
                        generator.layers(),
                        generator.dim(),
                        generator.resolution()
                    ),
                    format!("({}ch, L={}, D={}, res={})", s.in_channels, s.layers, s.dim, s.resolution),
                ));
            }
        }
        Ok(Self {
            generator,
            aging,
            inversion,
            mode,
        })
    }

    /// A fresh aging encoder for `generator`, seeded. Direct mode starts at `w̄`.
    pub fn fresh_aging_encoder(
        generator: &Generator,
        mode: EncoderMode,
        seed: u64,
    ) -> Result<PyramidEncoder> {
        let spec = EncoderSpec::new(4, generator.layers(), generator.dim(), generator.resolution());
        let enc = PyramidEncoder::new(spec, seed, true)?;
        match mode {
            EncoderMode::Residual => Ok(enc),
            EncoderMode::Direct => enc.with_offset(generator.average()),
        }
    }

    /// `w* = pSp(x)` for a batch. The encoder weights are frozen, but gradients
    /// still reach `images` (the cycle pass inverts the first output).
    pub fn invert_batch(&self, images: &Tensor) -> Result<Tensor> {
        self.inversion.forward(images)
    }

    pub fn invert(&self, image: &Image) -> Result<LatentCode> {
        self.check_resolution(image)?;
        let codes = self.invert_batch(&image.tensor().unsqueeze(0)?)?;
        Ok(LatentCode::from_tensor_unchecked(codes.get(0)?))
    }

    pub fn encode_age_residual(&self, x_age: &ConditionedInput) -> Result<LatentCode> {
        if self.mode != EncoderMode::Residual {
            return Err(Error::Invalid("residual encoding requires residual mode".into()));
        }
        let codes = self.aging.forward(&x_age.tensor().unsqueeze(0)?)?;
        Ok(LatentCode::from_tensor_unchecked(codes.get(0)?))
    }

    /// Final latent codes `(B, L, D)` for `images` at `targets`.
    pub fn latent_batch(&self, images: &Tensor, targets: &[f64]) -> Result<Tensor> {
        let x_age = condition_batch(images, targets)?;
        let out = self.aging.forward(&x_age)?;
        match self.mode {
            EncoderMode::Residual => Ok((out + self.invert_batch(images)?)?),
            EncoderMode::Direct => Ok(out),
        }
    }

    /// `(codes, images)` of the model applied to a batch.
    pub fn transform_batch(&self, images: &Tensor, targets: &[f64]) -> Result<(Tensor, Tensor)> {
        let codes = self.latent_batch(images, targets)?;
        let out = self.generator.synthesize_batch(&codes)?;
        Ok((codes, out))
    }

    pub fn sam_transform(&self, image: &Image, target: AgeYears) -> Result<Image> {
        self.check_resolution(image)?;
        let (_, out) = self.transform_batch(&image.tensor().unsqueeze(0)?, &[target.0])?;
        Ok(Image::from_tensor_unchecked(out.get(0)?))
    }

    /// Latent code of the transform, `E_age(x ⊕ t) (+ w*)`.
    pub fn transform_latent(&self, image: &Image, target: AgeYears) -> Result<LatentCode> {
        self.check_resolution(image)?;
        let codes = self.latent_batch(&image.tensor().unsqueeze(0)?, &[target.0])?;
        Ok(LatentCode::from_tensor_unchecked(codes.get(0)?))
    }

    /// Forward pass to `target`, then back to the estimated source age.
    pub fn sam_cycle(
        &self,
        image: &Image,
        target: AgeYears,
        predictor: &AgePredictor,
    ) -> Result<(Image, Image, AgeYears)> {
        self.check_resolution(image)?;
        let x = image.tensor().unsqueeze(0)?;
        let source = predictor.predict_batch(&x)?.detach();
        let source_age = AgeYears(source.flatten_all()?.to_vec1::<f64>()?[0]);
        let (_, y_out) = self.transform_batch(&x, &[target.0])?;
        let (_, y_cycle) = self.transform_batch(&y_out, &[source_age.clamped().0])?;
        Ok((
            Image::from_tensor_unchecked(y_out.get(0)?),
            Image::from_tensor_unchecked(y_cycle.get(0)?),
            source_age,
        ))
    }

    fn check_resolution(&self, image: &Image) -> Result<()> {
        if image.resolution() != self.generator.resolution() {
            return Err(Error::shape(self.generator.resolution(), image.resolution()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_conv_counts_reach_one_pixel() {
        assert_eq!(head_conv_count(1), 0);
        assert_eq!(head_conv_count(2), 1);
        assert_eq!(head_conv_count(4), 2);
        assert_eq!(head_conv_count(16), 4);
        assert_eq!(head_conv_count(3), 2);
    }

    #[test]
    fn output_shape_toy_and_full_latent() {
        for (l, d) in [(8, 64), (18, 512)] {
            let spec = EncoderSpec::new(4, l, d, 32);
            let enc = PyramidEncoder::new(spec, 1, false).unwrap();
            let x = Tensor::zeros((2, 4, 32, 32), DTYPE, &DEVICE).unwrap();
            assert_eq!(enc.forward(&x).unwrap().dims(), &[2, l, d]);
        }
    }

    #[test]
    fn heads_assign_coarse_rows_to_deepest_level() {
        let spec = EncoderSpec::new(4, 8, 64, 32);
        assert_eq!(spec.head_levels(), vec![2, 2, 2, 1, 1, 1, 0, 0]);
        assert_eq!(spec.level_size(2), 4);
    }

    #[test]
    fn heads_only_downsample_with_stride_two() {
        let spec = EncoderSpec::new(3, 8, 16, 32);
        let enc = PyramidEncoder::new(spec.clone(), 2, false).unwrap();
        for (head, level) in enc.heads.iter().zip(spec.head_levels()) {
            assert_eq!(head.convs.len(), head_conv_count(spec.level_size(level)));
            assert!(head.convs.iter().all(|c| c.out_channels() == spec.head));
        }
    }

    #[test]
    fn zeroed_heads_give_zero_codes() {
        let spec = EncoderSpec::new(4, 8, 16, 16);
        let enc = PyramidEncoder::new(spec, 3, true).unwrap();
        enc.zero_output_layers().unwrap();
        let x = Tensor::ones((1, 4, 16, 16), DTYPE, &DEVICE).unwrap();
        let out = enc.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_wrong_input_channels() {
        let enc = PyramidEncoder::new(EncoderSpec::new(4, 8, 16, 16), 3, false).unwrap();
        let x = Tensor::ones((1, 3, 16, 16), DTYPE, &DEVICE).unwrap();
        assert!(matches!(enc.forward(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn age_planes_follow_targets() {
        let x = Tensor::zeros((2, 3, 4, 4), DTYPE, &DEVICE).unwrap();
        let c = condition_batch(&x, &[50.0, 5.0]).unwrap();
        let v = c.narrow(1, 3, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v[..16].iter().all(|&p| p == 0.5));
        assert!(v[16..].iter().all(|&p| p == 0.05));
        assert!(condition_batch(&x, &[50.0, 101.0]).is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = EncoderSpec::new(4, 8, 64, 32);
        let mut kv = KeyValues::default();
        spec.write(&mut kv, "aging.");
        assert_eq!(EncoderSpec::read(&kv, "aging.").unwrap(), spec);
    }
}
