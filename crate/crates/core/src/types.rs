//! Value types shared across the pipeline.
//!
//! Every tensor-backed type holds `f64` data on the CPU device. Batched
//! computations work on stacked tensors (`(B, 3, H, W)` images,
//! `(B, L, D)` codes); these types are the single-sample views.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub(crate) const DEVICE: Device = Device::Cpu;
pub(crate) const DTYPE: DType = DType::F64;

/// Lower bound of the supported age range, in years.
pub const MIN_AGE: f64 = 5.0;
/// Upper bound of the supported age range, in years.
pub const MAX_AGE: f64 = 100.0;

/// An age in years. Sampled targets live in `[MIN_AGE, MAX_AGE]`; predictions may not.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct AgeYears(pub f64);

impl AgeYears {
    /// A conditioning target; rejects values outside the supported range.
    pub fn target(years: f64) -> Result<Self> {
        if !(MIN_AGE..=MAX_AGE).contains(&years) {
            return Err(Error::Range(format!(
                "target age {years} outside [{MIN_AGE}, {MAX_AGE}]"
            )));
        }
        Ok(Self(years))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Clamp into the supported range, e.g. to condition on a predicted age.
    pub fn clamped(self) -> Self {
        Self(self.0.clamp(MIN_AGE, MAX_AGE))
    }
}

impl std::fmt::Display for AgeYears {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A square RGB image with values in `[-1, 1]`, stored as a `(3, H, W)` tensor.
#[derive(Clone, Debug)]
pub struct Image {
    planes: Tensor,
}

impl Image {
    pub fn from_tensor(planes: Tensor) -> Result<Self> {
        let dims = planes.dims().to_vec();
        if dims.len() != 3 || dims[0] != 3 || dims[1] != dims[2] || dims[1] == 0 {
            return Err(Error::shape("(3, N, N)", format!("{dims:?}")));
        }
        let planes = planes.to_dtype(DTYPE)?;
        let values = planes.flatten_all()?.to_vec1::<f64>()?;
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || v.abs() > 1.0 + 1e-9) {
            return Err(Error::Range(format!("pixel value {bad} outside [-1, 1]")));
        }
        Ok(Self { planes })
    }

    /// Wraps generator output that is in range by construction.
    pub(crate) fn from_tensor_unchecked(planes: Tensor) -> Self {
        Self { planes }
    }

    pub fn from_vec(resolution: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * resolution * resolution {
            return Err(Error::shape(
                3 * resolution * resolution,
                data.len(),
            ));
        }
        Self::from_tensor(Tensor::from_vec(data, (3, resolution, resolution), &DEVICE)?)
    }

    pub fn constant(resolution: usize, value: f64) -> Result<Self> {
        Self::from_vec(resolution, vec![value; 3 * resolution * resolution])
    }

    /// Decodes interleaved 8-bit RGB, mapping `[0, 255]` linearly onto `[-1, 1]`.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if width != height {
            return Err(Error::shape("square image", format!("{width}x{height}")));
        }
        if rgb.len() != width * height * 3 {
            return Err(Error::shape(width * height * 3, rgb.len()));
        }
        let n = width * height;
        let mut data = vec![0.0; 3 * n];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        Self::from_vec(width, data)
    }

    /// Interleaved 8-bit RGB.
    pub fn to_rgb8(&self) -> Result<Vec<u8>> {
        let res = self.resolution();
        let n = res * res;
        let data = self.to_vec()?;
        let mut out = vec![0u8; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                let v = ((data[c * n + i] + 1.0) * 127.5).round().clamp(0.0, 255.0);
                out[3 * i + c] = v as u8;
            }
        }
        Ok(out)
    }

    pub fn resolution(&self) -> usize {
        self.planes.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.planes
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.planes.flatten_all()?.to_vec1::<f64>()?)
    }

    pub fn flip_horizontal(&self) -> Result<Self> {
        Ok(Self {
            planes: flip_last_axis(&self.planes)?,
        })
    }

    /// Stacks images into a `(B, 3, H, W)` batch.
    pub fn stack(images: &[Image]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Invalid("cannot stack an empty image list".into()));
        }
        let res = images[0].resolution();
        if let Some(bad) = images.iter().find(|i| i.resolution() != res) {
            return Err(Error::shape(res, bad.resolution()));
        }
        let views: Vec<&Tensor> = images.iter().map(|i| &i.planes).collect();
        Ok(Tensor::stack(&views, 0)?)
    }

    pub fn unstack(batch: &Tensor) -> Result<Vec<Image>> {
        let n = batch.dims()[0];
        (0..n)
            .map(|i| Ok(Image::from_tensor_unchecked(batch.get(i)?)))
            .collect()
    }

    /// Bitwise equality of pixel data.
    pub fn bit_eq(&self, other: &Image) -> Result<bool> {
        let (a, b) = (self.to_vec()?, other.to_vec()?);
        Ok(a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

/// Reverses the last axis of a tensor.
pub(crate) fn flip_last_axis(t: &Tensor) -> Result<Tensor> {
    let w = *t.dims().last().expect("non-scalar tensor");
    let idx: Vec<u32> = (0..w as u32).rev().collect();
    let idx = Tensor::from_vec(idx, w, &DEVICE)?;
    Ok(t.index_select(&idx, t.rank() - 1)?)
}

/// An image with a constant fourth plane carrying `target / 100`.
#[derive(Clone, Debug)]
pub struct ConditionedInput {
    planes: Tensor,
    target: AgeYears,
}

impl ConditionedInput {
    pub fn new(image: &Image, target: AgeYears) -> Result<Self> {
        let target = AgeYears::target(target.0)?;
        let res = image.resolution();
        let age_plane = Tensor::full(target.0 / 100.0, (1, res, res), &DEVICE)?;
        let planes = Tensor::cat(&[image.tensor(), &age_plane], 0)?;
        Ok(Self { planes, target })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.planes
    }

    pub fn target(&self) -> AgeYears {
        self.target
    }

    /// The constant value of the age plane.
    pub fn age_plane_value(&self) -> Result<f64> {
        let plane = self.planes.get(3)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(plane[0])
    }

    /// Splits back into the image and its target age.
    pub fn strip(&self) -> Result<(Image, AgeYears)> {
        let image = Image::from_tensor_unchecked(self.planes.narrow(0, 0, 3)?);
        Ok((image, self.target))
    }
}

/// `L` style vectors of dimension `D`, stored as an `(L, D)` tensor.
#[derive(Clone, Debug)]
pub struct LatentCode {
    styles: Tensor,
}

impl LatentCode {
    pub fn from_tensor(styles: Tensor) -> Result<Self> {
        if styles.rank() != 2 {
            return Err(Error::shape("(L, D)", format!("{:?}", styles.dims())));
        }
        let styles = styles.to_dtype(DTYPE)?;
        let values = styles.flatten_all()?.to_vec1::<f64>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("latent code has non-finite entries".into()));
        }
        Ok(Self { styles })
    }

    pub(crate) fn from_tensor_unchecked(styles: Tensor) -> Self {
        Self { styles }
    }

    pub fn from_vec(layers: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != layers * dim {
            return Err(Error::shape(layers * dim, data.len()));
        }
        Self::from_tensor(Tensor::from_vec(data, (layers, dim), &DEVICE)?)
    }

    pub fn zeros(layers: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            styles: Tensor::zeros((layers, dim), DTYPE, &DEVICE)?,
        })
    }

    pub fn layers(&self) -> usize {
        self.styles.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.styles.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.styles
    }

    /// Row-major flattening, `L * D` values.
    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.styles.flatten_all()?.to_vec1::<f64>()?)
    }

    pub fn row(&self, layer: usize) -> Result<Vec<f64>> {
        Ok(self.styles.get(layer)?.to_vec1::<f64>()?)
    }

    pub fn add(&self, other: &LatentCode) -> Result<LatentCode> {
        self.check_same_shape(other)?;
        Ok(Self {
            styles: (&self.styles + &other.styles)?,
        })
    }

    pub fn check_same_shape(&self, other: &LatentCode) -> Result<()> {
        if self.styles.dims() != other.styles.dims() {
            return Err(Error::shape(
                format!("{:?}", self.styles.dims()),
                format!("{:?}", other.styles.dims()),
            ));
        }
        Ok(())
    }

    pub fn stack(codes: &[LatentCode]) -> Result<Tensor> {
        let views: Vec<&Tensor> = codes.iter().map(|c| &c.styles).collect();
        Ok(Tensor::stack(&views, 0)?)
    }

    pub fn unstack(batch: &Tensor) -> Result<Vec<LatentCode>> {
        (0..batch.dims()[0])
            .map(|i| Ok(LatentCode::from_tensor_unchecked(batch.get(i)?)))
            .collect()
    }

    pub fn bit_eq(&self, other: &LatentCode) -> Result<bool> {
        let (a, b) = (self.to_vec()?, other.to_vec()?);
        Ok(self.styles.dims() == other.styles.dims()
            && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

/// Per-pixel loss weights: one value inside a centered rectangle, another outside.
#[derive(Clone, Debug)]
pub struct RegionMask {
    weights: Tensor,
    center_weight: f64,
    outer_weight: f64,
    center: std::ops::Range<usize>,
}

impl RegionMask {
    /// Centered square spanning `center_fraction` of each side.
    pub fn new(
        resolution: usize,
        center_fraction: f64,
        center_weight: f64,
        outer_weight: f64,
    ) -> Result<Self> {
        if !(center_fraction > 0.0 && center_fraction <= 1.0) {
            return Err(Error::Range(format!(
                "center_fraction {center_fraction} outside (0, 1]"
            )));
        }
        if !(center_weight > 0.0 && outer_weight > 0.0) {
            return Err(Error::Range(format!(
                "mask weights must be positive, got ({center_weight}, {outer_weight})"
            )));
        }
        let side = ((center_fraction * resolution as f64).round() as usize).clamp(1, resolution);
        let start = (resolution - side) / 2;
        let center = start..start + side;
        let mut data = vec![outer_weight; resolution * resolution];
        for r in center.clone() {
            for c in center.clone() {
                data[r * resolution + c] = center_weight;
            }
        }
        Ok(Self {
            weights: Tensor::from_vec(data, (resolution, resolution), &DEVICE)?,
            center_weight,
            outer_weight,
            center,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.weights
    }

    pub fn resolution(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn center_weight(&self) -> f64 {
        self.center_weight
    }

    pub fn outer_weight(&self) -> f64 {
        self.outer_weight
    }

    /// Rows (and columns) covered by the center rectangle.
    pub fn center_span(&self) -> std::ops::Range<usize> {
        self.center.clone()
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.weights.flatten_all()?.to_vec1::<f64>()?)
    }

    /// Same geometry with both weights multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let res = self.resolution();
        let fraction = self.center.len() as f64 / res as f64;
        Self::new(
            res,
            fraction,
            self.center_weight * factor,
            self.outer_weight * factor,
        )
    }

    /// 0/1 indicator planes `(center, outer)` used to split losses by region.
    pub fn indicators(&self) -> Result<(Tensor, Tensor)> {
        let res = self.resolution();
        let mut inner = vec![0.0; res * res];
        for r in self.center.clone() {
            for c in self.center.clone() {
                inner[r * res + c] = 1.0;
            }
        }
        let outer: Vec<f64> = inner.iter().map(|v| 1.0 - v).collect();
        Ok((
            Tensor::from_vec(inner, (res, res), &DEVICE)?,
            Tensor::from_vec(outer, (res, res), &DEVICE)?,
        ))
    }
}

/// Builds the two-valued region weighting plane.
pub fn make_region_mask(
    resolution: usize,
    center_fraction: f64,
    center_weight: f64,
    outer_weight: f64,
) -> Result<RegionMask> {
    RegionMask::new(resolution, center_fraction, center_weight, outer_weight)
}
