//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `HMOE`, `u32` version, `u32`-length config
//! text, `u32` tensor count, then per tensor a `u32`-length name, `u32` rank,
//! `u64` dims and the raw `f64` data.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::config::{parse_kv, render_kv, KvConfig};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"HMOE";
pub const FORMAT_VERSION: u32 = 1;

const MODEL_PREFIX: &str = "model.";
const STATE_PREFIX: &str = "adam.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// `key=value` lines.
    pub config: String,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

/// Everything in a checkpoint besides the model itself.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadedExtras {
    /// Non-model configuration entries, in file order.
    pub config: Vec<(String, String)>,
    /// Optimizer tensors (names starting with `adam.`), in file order.
    pub state: Vec<(String, Tensor<f64>)>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format_err(format!(
                "truncated file: need {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| format_err(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let push_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        push_str(&mut out, &self.config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            push_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(format_err(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let config = r.string("config block")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let name = r.string(&format!("name of tensor {i}"))?;
            let rank = r.u32(&format!("rank of {name}"))? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64(&format!("shape of {name}"))? as usize);
            }
            let n: usize = shape.iter().product();
            let bytes = r.take(n.saturating_mul(8), &format!("data of {name}"))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(format_err(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            version,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Model configuration stored under the `model.` keys.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for (k, v) in parse_kv(&self.config)? {
            if let Some(key) = k.strip_prefix(MODEL_PREFIX) {
                cfg.set_kv(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn extras(&self) -> Result<LoadedExtras> {
        let config = parse_kv(&self.config)?
            .into_iter()
            .filter(|(k, _)| !k.starts_with(MODEL_PREFIX))
            .collect();
        let state = self
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with(STATE_PREFIX))
            .cloned()
            .collect();
        Ok(LoadedExtras { config, state })
    }
}

impl<T: Scalar> Model<T> {
    /// Snapshot of the model followed by `extras`.
    pub fn to_checkpoint(&self, extras: &LoadedExtras) -> Checkpoint {
        let mut kv = self.cfg.to_kv("model");
        kv.extend(extras.config.iter().cloned());
        let mut tensors: Vec<(String, Tensor<f64>)> =
            self.params.iter().map(|p| (p.name.clone(), p.value.cast())).collect();
        tensors.extend(extras.state.iter().cloned());
        Checkpoint {
            version: FORMAT_VERSION,
            config: render_kv(&kv),
            tensors,
        }
    }

    /// Rebuilds a model from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, LoadedExtras)> {
        let mut model = Self::new(ckpt.model_config()?)?;
        let extras = model.load_params(ckpt)?;
        Ok((model, extras))
    }

    /// Overwrites the parameters of this model; the stored configuration
    /// must match this model's exactly.
    pub fn load_params(&mut self, ckpt: &Checkpoint) -> Result<LoadedExtras> {
        let stored = ckpt.model_config()?;
        if stored != self.cfg {
            let ours = self.cfg.to_kv("");
            let diff: Vec<String> = stored
                .to_kv("")
                .into_iter()
                .zip(ours)
                .filter(|(a, b)| a != b)
                .map(|((k, a), (_, b))| format!("{k}: checkpoint {a}, model {b}"))
                .collect();
            return Err(Error::Config(format!(
                "checkpoint configuration differs ({})",
                diff.join("; ")
            )));
        }
        let mut seen = vec![false; self.params.len()];
        for (name, t) in &ckpt.tensors {
            if name.starts_with(STATE_PREFIX) {
                continue;
            }
            let i = self
                .params
                .iter()
                .position(|p| &p.name == name)
                .ok_or_else(|| format_err(format!("unknown parameter `{name}`")))?;
            if seen[i] {
                return Err(format_err(format!("parameter `{name}` stored twice")));
            }
            seen[i] = true;
            self.params[i].set_value(t.cast())?;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(format_err(format!("parameter `{}` missing", self.params[i].name)));
        }
        ckpt.extras()
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>, extras: &LoadedExtras) -> Result<()> {
        self.to_checkpoint(extras).save(path)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Self, LoadedExtras)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
