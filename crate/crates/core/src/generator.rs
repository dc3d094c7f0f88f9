//! Frozen style-based generator.
//!
//! The desk-scale generator is a two-layer mapping network `Z -> W` followed
//! by a procedural renderer. A latent code is read out per style group:
//! coarse rows set the disk position and radius, middle rows set the ring
//! frequency (the synthetic age), fine rows set the hue. Every readout is a
//! smooth function of the code, so the latent-to-image map is differentiable.

use std::f64::consts::PI;
use std::ops::Range;

use candle_core::{Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::{init_rng, normal_tensor, Linear, ParamSet};
use crate::types::{AgeYears, Image, LatentCode, DEVICE, DTYPE, MAX_AGE, MIN_AGE};

/// Range of the disk center offset along each axis (image coordinates in `[-1, 1]`).
pub const CENTER_RANGE: (f64, f64) = (-0.2, 0.2);
/// Range of the disk radius.
pub const RADIUS_RANGE: (f64, f64) = (0.6, 0.9);
/// Range of the ring frequency (rings per radius); maps affinely onto the age range.
pub const FREQUENCY_RANGE: (f64, f64) = (0.75, 3.0);
/// Range of the hue angle.
pub const HUE_RANGE: (f64, f64) = (0.0, 1.6 * PI);

const RING_AMPLITUDE: f64 = 0.55;
const TINT_AMPLITUDE: f64 = 0.3;
const BACKGROUND: f64 = -0.85;
const EDGE_SHARPNESS: f64 = 20.0;
/// Logistic slope turning a standardized projection into a near-uniform unit value.
const READOUT_SLOPE: f64 = 1.7;
const AVERAGE_STREAM: u64 = 0x5a5a_a5a5;

/// Shape and seed that pin a toy generator exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub layers: usize,
    pub dim: usize,
    pub resolution: usize,
    pub seed: u64,
    pub n_avg: usize,
    /// Negative slope of the mapping network's leaky ReLU; 1.0 makes it affine.
    pub mapping_slope: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            layers: 8,
            dim: 64,
            resolution: 32,
            seed: 7,
            n_avg: 4096,
            mapping_slope: 0.2,
        }
    }
}

impl GeneratorSpec {
    /// The full-scale latent shape (18 x 512) at toy resolution.
    pub fn full_shape() -> Self {
        Self {
            layers: 18,
            dim: 512,
            ..Self::default()
        }
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(v) = kv.parse_opt("layers")? {
            self.layers = v;
        }
        if let Some(v) = kv.parse_opt("dim")? {
            self.dim = v;
        }
        if let Some(v) = kv.parse_opt("resolution")? {
            self.resolution = v;
        }
        if let Some(v) = kv.parse_opt("generator_seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.parse_opt("n_avg")? {
            self.n_avg = v;
        }
        if let Some(v) = kv.parse_opt("mapping_slope")? {
            self.mapping_slope = v;
        }
        self.validate()
    }

    pub fn write(&self, kv: &mut KeyValues) {
        kv.set("layers", self.layers);
        kv.set("dim", self.dim);
        kv.set("resolution", self.resolution);
        kv.set("generator_seed", self.seed);
        kv.set("n_avg", self.n_avg);
        kv.set("mapping_slope", crate::config::fmt_f64(self.mapping_slope));
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut s = Self::default();
        s.apply(kv)?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 3 {
            return Err(Error::Range(format!("need at least 3 style layers, got {}", self.layers)));
        }
        if self.dim < 5 {
            return Err(Error::Range(format!("style dim must be >= 5, got {}", self.dim)));
        }
        if self.resolution < 4 {
            return Err(Error::Range(format!("resolution {} too small", self.resolution)));
        }
        if self.n_avg == 0 {
            return Err(Error::Range("n_avg must be >= 1".into()));
        }
        Ok(())
    }
}

/// Row ranges of the coarse, middle and fine style groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StyleGroups {
    pub coarse: Range<usize>,
    pub middle: Range<usize>,
    pub fine: Range<usize>,
}

impl StyleGroups {
    /// For 18 layers the 3/4/11 split of the full-scale encoder; otherwise
    /// an even split with the remainder going to the coarser groups.
    pub fn for_layers(layers: usize) -> Self {
        let (c, m) = if layers == 18 {
            (3, 4)
        } else {
            let base = layers / 3;
            let rem = layers % 3;
            (base + usize::from(rem > 0), base + usize::from(rem > 1))
        };
        Self {
            coarse: 0..c,
            middle: c..c + m,
            fine: c + m..layers,
        }
    }

    pub fn all(&self) -> [Range<usize>; 3] {
        [self.coarse.clone(), self.middle.clone(), self.fine.clone()]
    }
}

/// Scene parameters decoded from one latent code.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySceneParams {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub ring_frequency: f64,
    pub hue: f64,
}

/// Exact age of a toy scene: the ring frequency mapped affinely onto `[5, 100]`.
pub fn toy_true_age(params: &ToySceneParams) -> AgeYears {
    AgeYears(frequency_to_age(params.ring_frequency))
}

pub(crate) fn frequency_to_age(f: f64) -> f64 {
    let (lo, hi) = FREQUENCY_RANGE;
    MIN_AGE + (MAX_AGE - MIN_AGE) * (f - lo) / (hi - lo)
}

pub(crate) fn age_to_frequency(age: f64) -> f64 {
    let (lo, hi) = FREQUENCY_RANGE;
    lo + (hi - lo) * (age - MIN_AGE) / (MAX_AGE - MIN_AGE)
}

fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    if slope == 1.0 {
        return Ok(x.clone());
    }
    Ok(x.maximum(&(x * slope)?)?)
}

pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// The frozen generator `G`. Immutable after construction.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    groups: StyleGroups,
    params: ParamSet,
    map1: Linear,
    map2: Linear,
    /// `(D, 5)` unit readout directions: cx, cy, radius (coarse), frequency (middle), hue (fine).
    readout: Tensor,
    calib_mean: Tensor,
    calib_std: Tensor,
    param_lo: Tensor,
    param_span: Tensor,
    grid_u: Tensor,
    grid_v: Tensor,
    tint_phase: Tensor,
    average: LatentCode,
}

impl Generator {
    pub fn new(spec: GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        let mut rng = init_rng(spec.seed);
        let mut ps = ParamSet::new();
        Linear::init(&mut ps, &mut rng, "mapping.0", d, d, 2f64.sqrt())?;
        Linear::init(&mut ps, &mut rng, "mapping.1", d, d, 2f64.sqrt())?;
        // Non-zero biases so the average latent is not the origin.
        ps.insert("mapping.0.bias", normal_tensor(&mut rng, &[d], 0.2)?)?;
        ps.insert("mapping.1.bias", normal_tensor(&mut rng, &[d], 0.2)?)?;
        ps.insert("readout", orthonormal_columns(&mut rng, d, 5)?)?;

        let map1 = Linear::load(&ps, "mapping.0", false)?;
        let map2 = Linear::load(&ps, "mapping.1", false)?;
        let readout = ps.tensor("readout", false)?;

        let mut gen = Self {
            groups: StyleGroups::for_layers(spec.layers),
            params: ps,
            map1,
            map2,
            readout,
            calib_mean: Tensor::zeros((1, 5), DTYPE, &DEVICE)?,
            calib_std: Tensor::ones((1, 5), DTYPE, &DEVICE)?,
            param_lo: Tensor::from_vec(
                vec![CENTER_RANGE.0, CENTER_RANGE.0, RADIUS_RANGE.0, FREQUENCY_RANGE.0, HUE_RANGE.0],
                (1, 5),
                &DEVICE,
            )?,
            param_span: Tensor::from_vec(
                vec![
                    CENTER_RANGE.1 - CENTER_RANGE.0,
                    CENTER_RANGE.1 - CENTER_RANGE.0,
                    RADIUS_RANGE.1 - RADIUS_RANGE.0,
                    FREQUENCY_RANGE.1 - FREQUENCY_RANGE.0,
                    HUE_RANGE.1 - HUE_RANGE.0,
                ],
                (1, 5),
                &DEVICE,
            )?,
            grid_u: Tensor::zeros((1, 1, 1), DTYPE, &DEVICE)?,
            grid_v: Tensor::zeros((1, 1, 1), DTYPE, &DEVICE)?,
            tint_phase: Tensor::from_vec(
                vec![0.0, -2.0 * PI / 3.0, 2.0 * PI / 3.0],
                (1, 3),
                &DEVICE,
            )?,
            average: LatentCode::zeros(spec.layers, d)?,
            spec,
        };
        gen.build_grid()?;

        // Average latent and readout calibration share one pool of mapped samples.
        let pool = gen.mapped_stream(gen.spec.seed ^ AVERAGE_STREAM, gen.spec.n_avg)?;
        let w_bar = pool.mean(0)?;
        let proj = pool.matmul(&gen.readout)?;
        let mean = proj.mean_keepdim(0)?;
        let var = proj.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?;
        let std = (var + 1e-12)?.sqrt()?;
        gen.params.insert("calibration.mean", mean.clone())?;
        gen.params.insert("calibration.std", std.clone())?;
        gen.params.insert("average_latent", w_bar.clone())?;
        gen.calib_mean = gen.params.tensor("calibration.mean", false)?;
        gen.calib_std = gen.params.tensor("calibration.std", false)?;
        gen.average = gen.broadcast_w(&gen.params.tensor("average_latent", false)?)?;
        Ok(gen)
    }

    fn build_grid(&mut self) -> Result<()> {
        let res = self.spec.resolution;
        let coord: Vec<f64> = (0..res)
            .map(|i| (i as f64 + 0.5) / res as f64 * 2.0 - 1.0)
            .collect();
        let row = Tensor::from_vec(coord.clone(), (1, 1, res), &DEVICE)?;
        let col = Tensor::from_vec(coord, (1, res, 1), &DEVICE)?;
        self.grid_u = row.broadcast_as((1, res, res))?.contiguous()?;
        self.grid_v = col.broadcast_as((1, res, res))?.contiguous()?;
        Ok(())
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn layers(&self) -> usize {
        self.spec.layers
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    pub fn groups(&self) -> &StyleGroups {
        &self.groups
    }

    /// All frozen parameters, including the cached average latent.
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// The cached average latent `w̄` over `n_avg` mapped samples.
    pub fn average(&self) -> &LatentCode {
        &self.average
    }

    /// Maps one `z` vector into `W`.
    pub fn map_z(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.spec.dim {
            return Err(Error::shape(self.spec.dim, z.len()));
        }
        let z = Tensor::from_slice(z, (1, self.spec.dim), &DEVICE)?;
        Ok(self.map(&z)?.flatten_all()?.to_vec1::<f64>()?)
    }

    fn map(&self, z: &Tensor) -> Result<Tensor> {
        let slope = self.spec.mapping_slope;
        let h = leaky_relu(&self.map1.forward(z)?, slope)?;
        leaky_relu(&self.map2.forward(&h)?, slope)
    }

    /// `n` mapped samples `(n, D)` drawn from one seeded stream.
    fn mapped_stream(&self, seed: u64, n: usize) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.spec.dim;
        let z: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        self.map(&Tensor::from_vec(z, (n, d), &DEVICE)?)
    }

    fn broadcast_w(&self, w: &Tensor) -> Result<LatentCode> {
        let d = self.spec.dim;
        let styles = w
            .reshape((1, d))?
            .broadcast_as((self.spec.layers, d))?
            .contiguous()?;
        Ok(LatentCode::from_tensor_unchecked(styles))
    }

    /// A `W`-space sample: one mapped vector repeated on every style row.
    pub fn sample_latent(&self, seed: u64) -> Result<LatentCode> {
        let w = self.mapped_stream(seed, 1)?;
        self.broadcast_w(&w)
    }

    /// `(n, D)` mapped vectors; row `i` equals the `W` vector of `sample_latent(seeds[i])`.
    pub fn map_seeds(&self, seeds: &[u64]) -> Result<Tensor> {
        let d = self.spec.dim;
        let mut z = Vec::with_capacity(seeds.len() * d);
        for &s in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            z.extend((0..d).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
        }
        self.map(&Tensor::from_vec(z, (seeds.len(), d), &DEVICE)?)
    }

    /// `(n, L, D)` codes of `sample_latent` for each seed.
    pub fn sample_batch(&self, seeds: &[u64]) -> Result<Tensor> {
        let (l, d) = (self.spec.layers, self.spec.dim);
        let w = self.map_seeds(seeds)?.unsqueeze(1)?;
        Ok(w.broadcast_as((seeds.len(), l, d))?.contiguous()?)
    }

    /// Mean of the first `n_avg` samples of the stream seeded with `seed`.
    pub fn average_latent(&self, seed: u64, n_avg: usize) -> Result<LatentCode> {
        if n_avg == 0 {
            return Err(Error::Range("n_avg must be >= 1".into()));
        }
        let pool = self.mapped_stream(seed, n_avg)?;
        self.broadcast_w(&pool.mean(0)?)
    }

    /// Checks that `codes` is `(B, L, D)` for this generator.
    pub fn check_codes(&self, codes: &Tensor) -> Result<()> {
        let dims = codes.dims();
        if dims.len() != 3 || dims[1] != self.spec.layers || dims[2] != self.spec.dim {
            return Err(Error::shape(
                format!("(B, {}, {})", self.spec.layers, self.spec.dim),
                format!("{dims:?}"),
            ));
        }
        Ok(())
    }

    /// Decoded scene parameters `(B, 5)`: cx, cy, radius, frequency, hue.
    pub fn scene_tensor(&self, codes: &Tensor) -> Result<Tensor> {
        self.check_codes(codes)?;
        let g = &self.groups;
        let group_mean = |r: &Range<usize>| -> Result<Tensor> {
            Ok(codes.narrow(1, r.start, r.len())?.mean(1)?)
        };
        let coarse = group_mean(&g.coarse)?.matmul(&self.readout.narrow(1, 0, 3)?)?;
        let middle = group_mean(&g.middle)?.matmul(&self.readout.narrow(1, 3, 1)?)?;
        let fine = group_mean(&g.fine)?.matmul(&self.readout.narrow(1, 4, 1)?)?;
        let proj = Tensor::cat(&[&coarse, &middle, &fine], 1)?;
        let z = proj
            .broadcast_sub(&self.calib_mean)?
            .broadcast_div(&self.calib_std)?;
        let unit = sigmoid(&(z * READOUT_SLOPE)?)?;
        Ok(unit
            .broadcast_mul(&self.param_span)?
            .broadcast_add(&self.param_lo)?)
    }

    pub fn scene_params(&self, code: &LatentCode) -> Result<ToySceneParams> {
        let t = self.scene_tensor(&code.tensor().unsqueeze(0)?)?;
        let v = t.flatten_all()?.to_vec1::<f64>()?;
        Ok(ToySceneParams {
            center_x: v[0],
            center_y: v[1],
            radius: v[2],
            ring_frequency: v[3],
            hue: v[4],
        })
    }

    /// Exact toy ages of a batch of codes, `(B,)`.
    pub fn true_ages(&self, codes: &Tensor) -> Result<Vec<f64>> {
        let t = self.scene_tensor(codes)?;
        let f = t.narrow(1, 3, 1)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(f.into_iter().map(frequency_to_age).collect())
    }

    pub fn true_age(&self, code: &LatentCode) -> Result<AgeYears> {
        Ok(toy_true_age(&self.scene_params(code)?))
    }

    /// Renders `(B, L, D)` codes into `(B, 3, H, W)` images. Differentiable in `codes`.
    pub fn synthesize_batch(&self, codes: &Tensor) -> Result<Tensor> {
        let p = self.scene_tensor(codes)?;
        let b = p.dims()[0];
        let col = |i: usize| -> Result<Tensor> { Ok(p.narrow(1, i, 1)?.reshape((b, 1, 1))?) };
        let (cx, cy, radius, freq, hue) = (col(0)?, col(1)?, col(2)?, col(3)?, col(4)?);

        let du = self.grid_u.broadcast_sub(&cx)?;
        let dv = self.grid_v.broadcast_sub(&cy)?;
        let rho = ((du.sqr()? + dv.sqr()?)? + 1e-6)?
            .sqrt()?
            .broadcast_div(&radius)?;
        let mask = sigmoid(&((rho.neg()? + 1.0)? * EDGE_SHARPNESS)?)?;
        let ring = (rho.broadcast_mul(&freq)? * (2.0 * PI))?.cos()?;

        let tint = hue
            .reshape((b, 1))?
            .broadcast_add(&self.tint_phase)?
            .cos()?
            .reshape((b, 3, 1, 1))?;
        let inside = (ring.unsqueeze(1)? * RING_AMPLITUDE)?
            .broadcast_add(&(tint * TINT_AMPLITUDE)?)?;
        let img = (inside - BACKGROUND)?
            .broadcast_mul(&mask.unsqueeze(1)?)?
            + BACKGROUND;
        Ok(img?)
    }

    /// `G(code)`.
    pub fn synthesize(&self, code: &LatentCode) -> Result<Image> {
        let batch = self.synthesize_batch(&code.tensor().unsqueeze(0)?)?;
        Ok(Image::from_tensor_unchecked(batch.get(0)?))
    }

    /// Moves the middle rows along the frequency readout so the scene has ring frequency `f`.
    pub fn with_ring_frequency(&self, code: &LatentCode, f: f64) -> Result<LatentCode> {
        let (lo, hi) = FREQUENCY_RANGE;
        if !(f > lo && f < hi) {
            return Err(Error::Range(format!("frequency {f} outside ({lo}, {hi})")));
        }
        self.shift_readout(code, 3, (f - lo) / (hi - lo))
    }

    /// Same as [`Self::with_ring_frequency`] with the frequency given as an age.
    pub fn with_true_age(&self, code: &LatentCode, age: f64) -> Result<LatentCode> {
        self.with_ring_frequency(code, age_to_frequency(age))
    }

    fn shift_readout(&self, code: &LatentCode, column: usize, unit: f64) -> Result<LatentCode> {
        let rows = match column {
            0..=2 => self.groups.coarse.clone(),
            3 => self.groups.middle.clone(),
            _ => self.groups.fine.clone(),
        };
        let u = self.readout.narrow(1, column, 1)?.flatten_all()?;
        let mean = self.calib_mean.flatten_all()?.to_vec1::<f64>()?[column];
        let std = self.calib_std.flatten_all()?.to_vec1::<f64>()?[column];
        let logit = (unit / (1.0 - unit)).ln();
        let target = mean + std * logit / READOUT_SLOPE;
        let current = code
            .tensor()
            .narrow(0, rows.start, rows.len())?
            .mean(0)?
            .mul(&u)?
            .sum_all()?
            .to_scalar::<f64>()?;
        let delta = (&u * (target - current))?;
        let mut out = Vec::with_capacity(self.spec.layers);
        for l in 0..self.spec.layers {
            let row = code.tensor().get(l)?;
            out.push(if rows.contains(&l) { (row + &delta)? } else { row });
        }
        LatentCode::from_tensor(Tensor::stack(&out, 0)?)
    }
}

/// `rows x cols` matrix with orthonormal columns (Gram-Schmidt on Gaussian draws).
fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (c, b) in basis.iter().enumerate() {
        for r in 0..rows {
            data[r * cols + c] = b[r];
        }
    }
    Ok(Tensor::from_vec(data, (rows, cols), &DEVICE)?)
}

/// Per-image mean over channels, `(B, H, W)`; used by ring-count measurements.
pub fn channel_mean(images: &Tensor) -> Result<Tensor> {
    Ok(images.mean(D::Minus(3))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Generator {
        Generator::new(GeneratorSpec {
            n_avg: 512,
            ..GeneratorSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn synthesis_is_deterministic() {
        let g = small();
        let a = g.synthesize(g.average()).unwrap();
        let b = g.synthesize(g.average()).unwrap();
        assert!(a.bit_eq(&b).unwrap());
        assert_eq!(a.resolution(), 32);
    }

    #[test]
    fn rejects_wrong_shape() {
        let g = small();
        let code = LatentCode::zeros(7, 64).unwrap();
        assert!(matches!(g.synthesize(&code), Err(Error::Shape { .. })));
    }

    #[test]
    fn samples_are_w_space_and_seeded() {
        let g = small();
        let a = g.sample_latent(11).unwrap();
        let b = g.sample_latent(11).unwrap();
        assert!(a.bit_eq(&b).unwrap());
        let first = a.row(0).unwrap();
        for l in 1..a.layers() {
            assert_eq!(a.row(l).unwrap(), first);
        }
        assert!(!a.bit_eq(&g.sample_latent(12).unwrap()).unwrap());
    }

    #[test]
    fn single_sample_average_equals_sample() {
        let g = small();
        let avg = g.average_latent(99, 1).unwrap();
        assert!(avg.bit_eq(&g.sample_latent(99).unwrap()).unwrap());
        let again = g.average_latent(99, 300).unwrap();
        assert!(again.bit_eq(&g.average_latent(99, 300).unwrap()).unwrap());
    }

    #[test]
    fn affine_endpoints_of_true_age() {
        let mut p = ToySceneParams {
            center_x: 0.0,
            center_y: 0.0,
            radius: 0.7,
            ring_frequency: FREQUENCY_RANGE.0,
            hue: 1.0,
        };
        assert_eq!(toy_true_age(&p).0, 5.0);
        p.ring_frequency = FREQUENCY_RANGE.1;
        assert_eq!(toy_true_age(&p).0, 100.0);
        p.ring_frequency = 0.5 * (FREQUENCY_RANGE.0 + FREQUENCY_RANGE.1);
        assert!((toy_true_age(&p).0 - 52.5).abs() < 1e-12);
    }

    #[test]
    fn average_latent_decodes_to_mid_range() {
        let g = small();
        let p = g.scene_params(g.average()).unwrap();
        assert!((g.true_age(g.average()).unwrap().0 - 52.5).abs() < 1e-9);
        assert!(p.center_x.abs() < 1e-9 && p.center_y.abs() < 1e-9);
    }

    #[test]
    fn frequency_setter_hits_target() {
        let g = small();
        let code = g.sample_latent(5).unwrap();
        let moved = g.with_ring_frequency(&code, 2.0).unwrap();
        let p = g.scene_params(&moved).unwrap();
        assert!((p.ring_frequency - 2.0).abs() < 1e-9);
        let before = g.scene_params(&code).unwrap();
        assert_eq!(p.hue, before.hue);
        assert_eq!(p.radius, before.radius);
        assert!((g.true_age(&g.with_true_age(&code, 33.0).unwrap()).unwrap().0 - 33.0).abs() < 1e-9);
    }

    #[test]
    fn style_groups_split() {
        let g = StyleGroups::for_layers(8);
        assert_eq!((g.coarse, g.middle, g.fine), (0..3, 3..6, 6..8));
        let g = StyleGroups::for_layers(18);
        assert_eq!((g.coarse.clone(), g.middle.clone(), g.fine.clone()), (0..3, 3..7, 7..18));
        assert!(g.fine.contains(&8) && g.fine.contains(&9));
        let g = StyleGroups::for_layers(9);
        assert_eq!((g.coarse, g.middle, g.fine), (0..3, 3..6, 6..9));
    }

    #[test]
    fn images_stay_in_range() {
        let g = small();
        for s in 0..10 {
            let img = g.synthesize(&g.sample_latent(s).unwrap()).unwrap();
            assert!(img.to_vec().unwrap().iter().all(|v| v.abs() <= 1.0));
        }
    }
}
