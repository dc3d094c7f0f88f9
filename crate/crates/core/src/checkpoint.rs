//! Single-file container for named `f64` arrays plus a `key=value` metadata record.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "SAMCKPT\0"
//! version      u32
//! meta_len     u64      followed by meta_len bytes of UTF-8 key=value text
//! array_count  u64
//! per array:   name_len u32, name, ndim u32, dims u64 * ndim, values f64 * prod(dims)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SAMCKPT\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named arrays and a metadata record; the unit every model artifact is stored as.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: KeyValues,
    pub arrays: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut metadata = KeyValues::default();
        metadata.set("kind", kind);
        Self {
            metadata,
            arrays: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> Option<&str> {
        self.metadata.get("kind")
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Invalid(format!(
                "expected a `{kind}` checkpoint, found {other:?}"
            ))),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        self.arrays.insert(name.into(), Array { shape, values });
    }

    /// Stores every parameter under `{prefix}{name}`.
    pub fn insert_params(&mut self, prefix: &str, params: &ParamSet) -> Result<()> {
        for (name, shape, values) in params.to_arrays()? {
            self.insert(format!("{prefix}{name}"), shape, values);
        }
        Ok(())
    }

    /// Collects the arrays stored under `prefix` back into a parameter set.
    pub fn params(&self, prefix: &str) -> Result<ParamSet> {
        let entries: Vec<(&str, &[usize], &[f64])> = self
            .arrays
            .iter()
            .filter_map(|(k, a)| {
                k.strip_prefix(prefix)
                    .map(|n| (n, a.shape.as_slice(), a.values.as_slice()))
            })
            .collect();
        if entries.is_empty() {
            return Err(Error::Missing(format!("arrays with prefix `{prefix}`")));
        }
        ParamSet::from_arrays(entries)
    }

    pub fn array(&self, name: &str) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Missing(format!("array {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = self.metadata.clone();
        meta.set("format_version", FORMAT_VERSION);
        let meta = meta.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, arr) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(arr.shape.len() as u32).to_le_bytes());
            for d in &arr.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &arr.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint container"));
        }
        let version = read_u32(&mut r).ok_or_else(|| bad("truncated version"))?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let meta_len = read_u64(&mut r).ok_or_else(|| bad("truncated metadata length"))? as usize;
        if r.len() < meta_len {
            return Err(bad("truncated metadata"));
        }
        let (meta, rest) = r.split_at(meta_len);
        r = rest;
        let meta = std::str::from_utf8(meta).map_err(|_| bad("metadata is not UTF-8"))?;
        let mut metadata = KeyValues::parse(meta)?;
        match metadata.parse_opt::<u32>("format_version")? {
            Some(v) if v == FORMAT_VERSION => {}
            Some(v) => {
                return Err(Error::Version {
                    found: v,
                    expected: FORMAT_VERSION,
                })
            }
            None => return Err(bad("metadata lacks format_version")),
        }
        // The header carries the version; keep the record identical to what was saved.
        let mut stripped = KeyValues::default();
        for k in metadata.keys().filter(|k| *k != "format_version") {
            stripped.set(k, metadata.get(k).unwrap_or_default());
        }
        metadata = stripped;

        let count = read_u64(&mut r).ok_or_else(|| bad("truncated array count"))?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r).ok_or_else(|| bad("truncated array name"))? as usize;
            if r.len() < name_len {
                return Err(bad("truncated array name"));
            }
            let (name, rest) = r.split_at(name_len);
            r = rest;
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("array name not UTF-8"))?;
            let ndim = read_u32(&mut r).ok_or_else(|| bad("truncated rank"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r).ok_or_else(|| bad("truncated shape"))? as usize);
            }
            let n: usize = shape.iter().product();
            if r.len() < n * 8 {
                return Err(bad("truncated array data"));
            }
            let (data, rest) = r.split_at(n * 8);
            r = rest;
            let values = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.insert(name, Array { shape, values });
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Option<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).ok()?;
    Some(u64::from_le_bytes(b))
}
