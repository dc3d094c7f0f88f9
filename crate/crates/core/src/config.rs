//! Flat `key=value` configuration files and the typed configs built from them.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered `key=value` record. Blank lines and `#` comments are ignored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Invalid(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Missing(key.to_string()))
    }

    /// Parses `key` if present.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Invalid(format!("key `{key}`: cannot parse `{raw}`: {e}"))),
        }
    }

    pub fn parse_req<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.parse_opt(key)?.ok_or_else(|| Error::Missing(key.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Copies every entry of `other` over this record.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }
}

/// Loss coefficients. Defaults are the published training values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_l2_center: f64,
    pub lambda_l2_outer: f64,
    pub lambda_lpips_center: f64,
    pub lambda_lpips_outer: f64,
    pub lambda_reg: f64,
    pub lambda_id: f64,
    pub lambda_age: f64,
    pub lambda_cycle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l2_center: 1.0,
            lambda_l2_outer: 0.25,
            lambda_lpips_center: 0.6,
            lambda_lpips_outer: 0.1,
            lambda_reg: 0.005,
            lambda_id: 0.1,
            lambda_age: 5.0,
            lambda_cycle: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_l2_center: 0.0,
            lambda_l2_outer: 0.0,
            lambda_lpips_center: 0.0,
            lambda_lpips_outer: 0.0,
            lambda_reg: 0.0,
            lambda_id: 0.0,
            lambda_age: 0.0,
            lambda_cycle: 0.0,
        }
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut f64); 8] {
        [
            ("lambda_l2_center", &mut self.lambda_l2_center),
            ("lambda_l2_outer", &mut self.lambda_l2_outer),
            ("lambda_lpips_center", &mut self.lambda_lpips_center),
            ("lambda_lpips_outer", &mut self.lambda_lpips_outer),
            ("lambda_reg", &mut self.lambda_reg),
            ("lambda_id", &mut self.lambda_id),
            ("lambda_age", &mut self.lambda_age),
            ("lambda_cycle", &mut self.lambda_cycle),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let mut copy = *self;
        for (name, v) in copy.fields_mut() {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::Range(format!("{name} must be a non-negative real, got {v}")));
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (name, slot) in self.fields_mut() {
            if let Some(v) = kv.parse_opt::<f64>(name)? {
                *slot = v;
            }
        }
        self.validate()
    }

    pub fn write(&self, kv: &mut KeyValues) {
        let mut copy = *self;
        for (name, v) in copy.fields_mut() {
            kv.set(name, fmt_f64(*v));
        }
    }
}

/// How the aging encoder output becomes the final latent code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    /// `G(E_age(x_age) + w*)`
    Residual,
    /// `G(E_age(x_age))`, no inversion offset.
    Direct,
}

impl FromStr for EncoderMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "residual" => Ok(Self::Residual),
            "direct" => Ok(Self::Direct),
            other => Err(format!("unknown mode `{other}` (residual|direct)")),
        }
    }
}

impl Display for EncoderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Residual => "residual",
            Self::Direct => "direct",
        })
    }
}

/// Loss groups that an ablation can switch off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LossTerm {
    /// Pixel and perceptual terms of the forward pass only.
    ForwardReconstruction,
    /// The whole cycle pass.
    Cycle,
    /// Latent regularization in both passes.
    Regularization,
}

impl FromStr for LossTerm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "forward_reconstruction" | "l2_lpips" => Ok(Self::ForwardReconstruction),
            "cycle" => Ok(Self::Cycle),
            "reg" | "w_reg" => Ok(Self::Regularization),
            other => Err(format!("unknown loss term `{other}`")),
        }
    }
}

impl Display for LossTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ForwardReconstruction => "forward_reconstruction",
            Self::Cycle => "cycle",
            Self::Regularization => "reg",
        })
    }
}

/// Settings of the aging-encoder training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub same_age_probability: f64,
    pub resolution: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub center_fraction: f64,
    pub flip_probability: f64,
    /// Integer factor by which generated images are downscaled before the losses.
    pub loss_downscale: usize,
    pub checkpoint_every: u64,
    pub mode: EncoderMode,
    pub disabled: Vec<LossTerm>,
    pub lookahead_k: u64,
    pub lookahead_alpha: f64,
    /// Years per unit of the aging loss inside the objective.
    pub age_loss_unit: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 6,
            learning_rate: 0.001,
            same_age_probability: 0.33,
            resolution: 32,
            seed: 0,
            loss_weights: LossWeights::default(),
            center_fraction: 0.5,
            flip_probability: 0.5,
            loss_downscale: 1,
            checkpoint_every: 0,
            mode: EncoderMode::Residual,
            disabled: Vec::new(),
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            age_loss_unit: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.same_age_probability) {
            return Err(Error::Range(format!(
                "p_same {} outside [0, 1]",
                self.same_age_probability
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Range("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Range(format!("lr {} invalid", self.learning_rate)));
        }
        if self.loss_downscale == 0 || self.resolution % self.loss_downscale != 0 {
            return Err(Error::Range(format!(
                "loss_downscale {} must divide resolution {}",
                self.loss_downscale, self.resolution
            )));
        }
        if self.lookahead_k == 0 || !(0.0..=1.0).contains(&self.lookahead_alpha) {
            return Err(Error::Range("lookahead settings invalid".into()));
        }
        if !(self.age_loss_unit > 0.0 && self.age_loss_unit.is_finite()) {
            return Err(Error::Range(format!("age_loss_unit {} must be positive", self.age_loss_unit)));
        }
        self.loss_weights.validate()
    }

    pub fn is_disabled(&self, term: LossTerm) -> bool {
        self.disabled.contains(&term)
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(v) = kv.parse_opt("steps")? {
            self.steps = v;
        }
        if let Some(v) = kv.parse_opt("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.parse_opt("lr")? {
            self.learning_rate = v;
        }
        if let Some(v) = kv.parse_opt("p_same")? {
            self.same_age_probability = v;
        }
        if let Some(v) = kv.parse_opt("resolution")? {
            self.resolution = v;
        }
        if let Some(v) = kv.parse_opt("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.parse_opt("center_fraction")? {
            self.center_fraction = v;
        }
        if let Some(v) = kv.parse_opt("flip_probability")? {
            self.flip_probability = v;
        }
        if let Some(v) = kv.parse_opt("loss_downscale")? {
            self.loss_downscale = v;
        }
        if let Some(v) = kv.parse_opt("checkpoint_every")? {
            self.checkpoint_every = v;
        }
        if let Some(v) = kv.parse_opt("mode")? {
            self.mode = v;
        }
        if let Some(v) = kv.parse_opt("lookahead_k")? {
            self.lookahead_k = v;
        }
        if let Some(v) = kv.parse_opt("lookahead_alpha")? {
            self.lookahead_alpha = v;
        }
        if let Some(v) = kv.parse_opt("age_loss_unit")? {
            self.age_loss_unit = v;
        }
        if let Some(raw) = kv.get("disabled") {
            self.disabled = parse_list(raw)
                .map_err(|e| Error::Invalid(format!("key `disabled`: {e}")))?;
        }
        self.loss_weights.apply(kv)?;
        self.validate()
    }

    pub fn write(&self, kv: &mut KeyValues) {
        kv.set("steps", self.steps);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", fmt_f64(self.learning_rate));
        kv.set("p_same", fmt_f64(self.same_age_probability));
        kv.set("resolution", self.resolution);
        kv.set("seed", self.seed);
        kv.set("center_fraction", fmt_f64(self.center_fraction));
        kv.set("flip_probability", fmt_f64(self.flip_probability));
        kv.set("loss_downscale", self.loss_downscale);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("mode", self.mode);
        kv.set("lookahead_k", self.lookahead_k);
        kv.set("lookahead_alpha", fmt_f64(self.lookahead_alpha));
        kv.set("age_loss_unit", fmt_f64(self.age_loss_unit));
        let disabled: Vec<String> = self.disabled.iter().map(|t| t.to_string()).collect();
        kv.set("disabled", disabled.join(","));
        self.loss_weights.write(kv);
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(kv)?;
        Ok(cfg)
    }
}

/// Comma-separated list; empty input yields an empty list.
pub fn parse_list<T: FromStr>(raw: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

/// Parses `a:b:step` into an inclusive arithmetic grid.
pub fn parse_grid(raw: &str) -> std::result::Result<Vec<f64>, String> {
    let parts: Vec<&str> = raw.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("expected a:b:step, got `{raw}`"));
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let (a, b, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0) || b < a {
        return Err(format!("grid `{raw}` must have step > 0 and b >= a"));
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| a + step * i as f64).collect())
}

/// Shortest round-tripping decimal form, used in every text artifact.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
