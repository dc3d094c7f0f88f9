//! Style mixing on style rows and patch pasting.

use std::str::FromStr;

use candle_core::Tensor;

use crate::encoder::SamModel;
use crate::error::{Error, Result};
use crate::generator::StyleGroups;
use crate::types::{AgeYears, Image, LatentCode, DEVICE};

/// Inclusive row range `[start, end]` of a latent code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StyleLayerRange {
    pub start: usize,
    pub end: usize,
}

impl StyleLayerRange {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::Range(format!("layer range {start}:{end} is reversed")));
        }
        Ok(Self { start, end })
    }

    /// Rows 8-9 for 18-row codes, the fine group otherwise.
    pub fn default_for(layers: usize) -> Self {
        if layers == 18 {
            return Self { start: 8, end: 9 };
        }
        let fine = StyleGroups::for_layers(layers).fine;
        Self {
            start: fine.start,
            end: fine.end - 1,
        }
    }

    pub fn contains(&self, row: usize) -> bool {
        (self.start..=self.end).contains(&row)
    }

    fn check(&self, layers: usize) -> Result<()> {
        if self.end >= layers {
            return Err(Error::Range(format!(
                "layer range {}:{} out of bounds for {layers} rows",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

impl FromStr for StyleLayerRange {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| format!("expected `start:end`, got `{s}`"))?;
        let a = a.trim().parse().map_err(|_| format!("bad start in `{s}`"))?;
        let b = b.trim().parse().map_err(|_| format!("bad end in `{s}`"))?;
        Self::new(a, b).map_err(|e| e.to_string())
    }
}

/// Rows in `layers` from `reference`, all others from `base`.
pub fn style_mix(base: &LatentCode, reference: &LatentCode, layers: StyleLayerRange) -> Result<LatentCode> {
    base.check_same_shape(reference)?;
    layers.check(base.layers())?;
    let rows = (0..base.layers())
        .map(|l| {
            if layers.contains(l) {
                reference.tensor().get(l)
            } else {
                base.tensor().get(l)
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    LatentCode::from_tensor(Tensor::stack(&rows, 0)?)
}

/// Transforms `image` to `target`, then mixes the `layers` rows of each
/// reference's transformed code into it; one output per reference.
///
/// References are encoded at the same target age, so a reference equal to the
/// input reproduces the plain transform exactly.
pub fn multimodal_transform(
    model: &SamModel,
    image: &Image,
    target: AgeYears,
    references: &[Image],
    layers: StyleLayerRange,
) -> Result<Vec<Image>> {
    if references.is_empty() {
        return Err(Error::Invalid("at least one reference image is required".into()));
    }
    let target = AgeYears::target(target.0)?;
    let code = model.transform_latent(image, target)?;
    references
        .iter()
        .map(|r| {
            let rc = model.transform_latent(r, target)?;
            model.generator.synthesize(&style_mix(&code, &rc, layers)?)
        })
        .collect()
}

/// A rectangular RGB region in `[-1, 1]`, channel-major `(3, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(3 * width * height, data.len()));
        }
        if data.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Range("patch values must be finite and within [-1, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::shape(3 * width * height, rgb.len()));
        }
        let mut data = vec![0.0; rgb.len()];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * width * height + i] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        Self::new(width, height, data)
    }

    pub fn from_image(image: &Image) -> Result<Self> {
        let r = image.resolution();
        Self::new(r, r, image.to_vec()?)
    }
}

/// Overwrites the pixels under `patch` placed with its top-left corner at `(x, y)`.
pub fn patch_edit(image: &Image, patch: &Patch, x: usize, y: usize) -> Result<Image> {
    let res = image.resolution();
    if x + patch.width > res || y + patch.height > res {
        return Err(Error::Range(format!(
            "patch {}x{} at ({x}, {y}) does not fit a {res}x{res} image",
            patch.width, patch.height
        )));
    }
    let mut data = image.to_vec()?;
    for c in 0..3 {
        for r in 0..patch.height {
            for k in 0..patch.width {
                data[c * res * res + (y + r) * res + x + k] =
                    patch.data[c * patch.width * patch.height + r * patch.width + k];
            }
        }
    }
    Image::from_tensor(Tensor::from_vec(data, (3, res, res), &DEVICE)?)
}

/// Reads back the `width x height` region at `(x, y)`.
pub fn read_region(image: &Image, x: usize, y: usize, width: usize, height: usize) -> Result<Patch> {
    let res = image.resolution();
    if x + width > res || y + height > res {
        return Err(Error::Range("region out of bounds".into()));
    }
    let src = image.to_vec()?;
    let mut data = Vec::with_capacity(3 * width * height);
    for c in 0..3 {
        for r in 0..height {
            for k in 0..width {
                data.push(src[c * res * res + (y + r) * res + x + k]);
            }
        }
    }
    Patch::new(width, height, data)
}
