//! Parameter storage and the handful of layers the networks are built from.

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{DEVICE, DTYPE};

/// Named parameter tensors of one network, iterated in name order.
///
/// Values live in [`Var`]s so an optimizer can update them in place. Frozen
/// networks read them through detached tensors, which the autodiff graph
/// never tracks.
#[derive(Clone, Default)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
}

impl std::fmt::Debug for ParamSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamSet")
            .field("len", &self.vars.len())
            .field("numel", &self.numel())
            .finish()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let var = Var::from_tensor(&value.to_dtype(DTYPE)?)?;
        self.vars.insert(name.into(), var);
        Ok(())
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))
    }

    /// The tensor a layer should hold: tracked when trainable, detached otherwise.
    pub fn tensor(&self, name: &str, trainable: bool) -> Result<Tensor> {
        let var = self.var(name)?;
        Ok(if trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in var.as_tensor().flatten_all()?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex(&h.finalize()))
    }

    /// `(name, shape, values)` triples for serialization.
    pub fn to_arrays(&self) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                Ok((
                    k.clone(),
                    v.dims().to_vec(),
                    v.as_tensor().flatten_all()?.to_vec1::<f64>()?,
                ))
            })
            .collect()
    }

    pub fn from_arrays<'a>(
        arrays: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f64])>,
    ) -> Result<Self> {
        let mut ps = Self::new();
        for (name, shape, values) in arrays {
            ps.insert(name, Tensor::from_slice(values, shape, &DEVICE)?)?;
        }
        Ok(ps)
    }

    /// Overwrites every parameter of `self` with the same-named one of `other`.
    pub fn assign_from(&self, other: &ParamSet) -> Result<()> {
        for (name, var) in &self.vars {
            let src = other.var(name)?;
            if src.dims() != var.dims() {
                return Err(Error::shape(
                    format!("{name}{:?}", var.dims()),
                    format!("{:?}", src.dims()),
                ));
            }
            var.set(&src.as_tensor().copy()?)?;
        }
        Ok(())
    }

    /// Deep copy with fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut ps = Self::new();
        for (name, var) in &self.vars {
            ps.insert(name.clone(), var.as_tensor().copy()?)?;
        }
        Ok(ps)
    }

    /// Bitwise equality of all parameters (names, shapes and values).
    pub fn bit_eq(&self, other: &ParamSet) -> Result<bool> {
        if self.vars.len() != other.vars.len() {
            return Ok(false);
        }
        for ((na, a), (nb, b)) in self.vars.iter().zip(other.vars.iter()) {
            if na != nb || a.dims() != b.dims() {
                return Ok(false);
            }
            let va = a.as_tensor().flatten_all()?.to_vec1::<f64>()?;
            let vb = b.as_tensor().flatten_all()?.to_vec1::<f64>()?;
            if va.iter().zip(&vb).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Samples `N(0, std^2)` values into a tensor of the given shape.
pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &DEVICE)?)
}

pub(crate) fn zeros(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::zeros(shape, DTYPE, &DEVICE)?)
}

/// 3x3 (or k x k) convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Registers `{name}.weight` / `{name}.bias` with fan-in scaled normal init.
    pub fn init(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        gain: f64,
    ) -> Result<()> {
        let fan_in = (in_c * kernel * kernel) as f64;
        ps.insert(
            format!("{name}.weight"),
            normal_tensor(rng, &[out_c, in_c, kernel, kernel], gain / fan_in.sqrt())?,
        )?;
        ps.insert(format!("{name}.bias"), zeros(&[out_c])?)
    }

    pub fn load(
        ps: &ParamSet,
        name: &str,
        stride: usize,
        padding: usize,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Self {
            weight: ps.tensor(&format!("{name}.weight"), trainable)?,
            bias: ps.tensor(&format!("{name}.bias"), trainable)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Fully connected layer `y = x W^T + b` on `(B, in)` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn init(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_f: usize,
        out_f: usize,
        gain: f64,
    ) -> Result<()> {
        ps.insert(
            format!("{name}.weight"),
            normal_tensor(rng, &[out_f, in_f], gain / (in_f as f64).sqrt())?,
        )?;
        ps.insert(format!("{name}.bias"), zeros(&[out_f])?)
    }

    pub fn load(ps: &ParamSet, name: &str, trainable: bool) -> Result<Self> {
        Ok(Self {
            weight: ps.tensor(&format!("{name}.weight"), trainable)?,
            bias: ps.tensor(&format!("{name}.bias"), trainable)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Bilinear interpolation matrix `(out, in)` with half-pixel centers.
pub(crate) fn resize_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(input - 1);
        let frac = src - lo as f64;
        m[o * input + lo] += 1.0 - frac;
        m[o * input + hi] += frac;
    }
    m
}

/// Differentiable bilinear resize of `(B, C, H, W)` to `(B, C, out, out)`.
pub(crate) fn resize_square(x: &Tensor, out: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out && w == out {
        return Ok(x.clone());
    }
    let rw = Tensor::from_vec(resize_matrix(w, out), (out, w), &DEVICE)?;
    let rh = Tensor::from_vec(resize_matrix(h, out), (out, h), &DEVICE)?;
    let x = x.broadcast_matmul(&rw.t()?)?;
    Ok(rh.broadcast_matmul(&x)?)
}

/// Central square crop covering `fraction` of each side.
pub(crate) fn center_crop(x: &Tensor, fraction: f64) -> Result<Tensor> {
    let (_, _, h, _) = x.dims4()?;
    let side = ((fraction * h as f64).round() as usize).clamp(1, h);
    let start = (h - side) / 2;
    Ok(x.narrow(2, start, side)?.narrow(3, start, side)?)
}

/// A seeded generator for parameter initialization.
pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
