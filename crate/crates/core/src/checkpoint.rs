//! Versioned binary checkpoints.
//!
//! ```text
//! "MMX1"  u32 version  u8 precision-bytes
//! u32 len, config text (key=value lines)
//! u32 count, then per tensor: u32 name-len, name, u32 rank, u64 dims[rank]
//! tensor data, little-endian, in manifest order
//! u8 has-optimizer
//!   u64 step, f64 lr, f64 beta1, f64 beta2, f64 eps, m arrays, v arrays
//! ```
//!
//! Probe-head tensors, when present, are part of the manifest under their
//! `probe.` names. Files are written to a temporary sibling and renamed, so a
//! crash never leaves a torn checkpoint behind.

use std::path::Path;

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig, ProbeHeads};
use crate::params::ParamStore;
use crate::scalar::{Precision, Scalar};
use crate::synthdata::write_atomic;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMX1";
pub const FORMAT_VERSION: u32 = 1;

pub fn config_to_text(c: &ModelConfig) -> String {
    format!(
        "modalities={}\nframes={}\nd_f={}\nd_h={}\nheight={}\nwidth={}\nbank_size={}\nclasses={}\nheads={}\ncontent={}\nfusion={}\nprecision={}\nseed={}\npos_on_values={}\n",
        c.n_modalities,
        c.frames,
        c.d_f,
        c.d_h,
        c.height,
        c.width,
        c.bank_size,
        c.classes,
        c.heads,
        c.content,
        c.fusion,
        c.precision.as_str(),
        c.seed,
        c.pos_on_values
    )
}

pub fn config_from_text(text: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    let bad = |k: &str, v: &str| Error::Checkpoint(format!("bad config value {k}={v}"));
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed config line '{line}'")))?;
        let num = || v.parse::<usize>().map_err(|_| bad(k, v));
        match k {
            "modalities" => c.n_modalities = num()?,
            "frames" => c.frames = num()?,
            "d_f" => c.d_f = num()?,
            "d_h" => c.d_h = num()?,
            "height" => c.height = num()?,
            "width" => c.width = num()?,
            "bank_size" => c.bank_size = num()?,
            "classes" => c.classes = num()?,
            "heads" => c.heads = num()?,
            "content" => c.content = v.parse().map_err(|_| bad(k, v))?,
            "fusion" => c.fusion = v.parse().map_err(|_| bad(k, v))?,
            "precision" => c.precision = v.parse().map_err(|_| bad(k, v))?,
            "seed" => c.seed = v.parse().map_err(|_| bad(k, v))?,
            "pos_on_values" => c.pos_on_values = v.parse().map_err(|_| bad(k, v))?,
            other => return Err(Error::Checkpoint(format!("unknown config key '{other}'"))),
        }
    }
    Ok(c)
}

/// Everything a checkpoint file holds, decoded.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    /// Every tensor in manifest order, model and probes alike.
    pub tensors: ParamStore<T>,
    pub adam: Option<AdamState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn has_probes(&self) -> bool {
        self.tensors.iter().any(|(_, p)| p.name.starts_with("probe."))
    }

    /// Rebuilds the model this checkpoint was written from.
    pub fn model(&self) -> Result<Model<T>> {
        let mut m = Model::new(self.config.clone())?;
        m.load_params(&self.tensors)?;
        Ok(m)
    }

    pub fn probes(&self) -> Result<Option<ProbeHeads<T>>> {
        if !self.has_probes() {
            return Ok(None);
        }
        let c = &self.config;
        let mut p = ProbeHeads::new(c.n_modalities, c.d_h, c.classes, c.seed)?;
        p.load_params(&self.tensors)?;
        Ok(Some(p))
    }
}

pub fn encode<T: Scalar>(model: &Model<T>, adam: Option<&AdamState<T>>, probes: Option<&ProbeHeads<T>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::PRECISION.byte_width() as u8);
    let text = config_to_text(model.config());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    let mut tensors: Vec<(&str, &Tensor<T>)> = model.params().iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    if let Some(p) = probes {
        tensors.extend(p.params().iter().map(|(_, p)| (p.name.as_str(), &p.value)));
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, t) in &tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    match adam {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            out.extend_from_slice(&a.step.to_le_bytes());
            for c in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                out.extend_from_slice(&c.to_le_bytes());
            }
            for buf in a.m.iter().chain(&a.v) {
                for &x in buf {
                    x.write_le(&mut out);
                }
            }
        }
    }
    out
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    adam: Option<&AdamState<T>>,
    probes: Option<&ProbeHeads<T>>,
) -> Result<()> {
    write_atomic(path, &encode(model, adam, probes))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let w = T::PRECISION.byte_width();
        let raw = self.take(n.checked_mul(w).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(w).map(T::read_le).collect())
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let width = r.u8()? as usize;
    if width != T::PRECISION.byte_width() {
        let found = if width == 8 { Precision::F64 } else { Precision::F32 };
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {} values, expected {}",
            found.as_str(),
            T::PRECISION.as_str()
        )));
    }
    let text_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config = config_from_text(text)?;

    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let mut tensors = ParamStore::new();
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let data = r.values::<T>(n)?;
        tensors
            .add(name.clone(), Tensor::new(shape, data)?)
            .map_err(|_| Error::Checkpoint(format!("duplicate tensor '{name}'")))?;
    }
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            // Optimizer moments cover the model parameters only, which come
            // first in the manifest.
            let sizes: Vec<usize> = tensors
                .iter()
                .filter(|(_, p)| !p.name.starts_with("probe."))
                .map(|(_, p)| p.value.numel())
                .collect();
            let m = sizes.iter().map(|&n| r.values::<T>(n)).collect::<Result<Vec<_>>>()?;
            let v = sizes.iter().map(|&n| r.values::<T>(n)).collect::<Result<Vec<_>>>()?;
            Some(AdamState { config, step, m, v })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config, tensors, adam })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Context {
        context: format!("reading {}", path.display()),
        source: Box::new(Error::Io(e)),
    })?;
    decode(&bytes)
}

/// Precision of the values stored in the checkpoint at `path`, read from the
/// header alone.
pub fn stored_precision(path: &Path) -> Result<Precision> {
    let bytes = std::fs::read(path).map_err(|e| Error::Context {
        context: format!("reading {}", path.display()),
        source: Box::new(Error::Io(e)),
    })?;
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    match bytes[8] {
        4 => Ok(Precision::F32),
        8 => Ok(Precision::F64),
        w => Err(Error::Checkpoint(format!("unknown value width {w}"))),
    }
}

/// Loads `path` into an existing model. Fails, naming the first tensor that
/// is missing or differs in shape, if the checkpoint does not fit.
pub fn restore<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<Checkpoint<T>> {
    let ckpt = load::<T>(path)?;
    for (_, p) in model.params().iter() {
        match ckpt.tensors.by_name(&p.name) {
            None => return Err(Error::Checkpoint(format!("tensor '{}' missing from checkpoint", p.name))),
            Some(t) if t.shape() != p.value.shape() => {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?} in checkpoint but {:?} in model",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )))
            }
            Some(_) => {}
        }
    }
    model.load_params(&ckpt.tensors)?;
    Ok(ckpt)
}
