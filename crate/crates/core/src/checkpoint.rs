//! Binary checkpoints and optimizer-state sidecars.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "NPA1"                      4-byte magic
//! version: u32                currently 1
//! payload:
//!   config_len: u32, config: UTF-8 TOML of the ModelConfig
//!   tensor_count: u32
//!   per tensor: name_len: u32, name: UTF-8, rank: u32, dims: rank x u32,
//!               data: numel x f32 (row-major)
//! checksum: u64               FNV-1a 64 of the payload bytes
//! ```
//!
//! The sidecar (`<checkpoint>.opt`) uses magic `"NPAS"`, the same version and
//! checksum scheme, and stores exact f64 optimizer state: step count, the
//! five AdamW hyperparameters, then the first and second moments per tensor.

use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;

use crate::config::ModelConfig;
use crate::data::write_atomic;
use crate::error::{NpaError, Result};
use crate::model::{NpaModel, ParamSet};
use crate::tensor::{AdamWConfig, OptimState, Tensor};

pub const MAGIC: &[u8; 4] = b"NPA1";
pub const SIDECAR_MAGIC: &[u8; 4] = b"NPAS";
pub const FORMAT_VERSION: u32 = 1;

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len_u32(&mut self, n: usize) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| NpaError::Checkpoint(format!("length {n} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.len_u32(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn header(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.str(name)?;
        self.len_u32(t.shape().len())?;
        for &d in t.shape() {
            self.len_u32(d)?;
        }
        Ok(())
    }
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
            .ok_or_else(|| NpaError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| NpaError::Checkpoint("invalid UTF-8 string".into()))
    }

    fn header(&mut self) -> Result<(String, Vec<usize>)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        if rank > 2 {
            return Err(NpaError::Checkpoint(format!("tensor `{name}` has rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        Ok((name, dims))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Split a framed file into its payload after verifying magic, version and
/// checksum.
fn unframe<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<&'a [u8]> {
    if bytes.len() < 16 {
        return Err(NpaError::Checkpoint("truncated file".into()));
    }
    if &bytes[..4] != magic {
        return Err(NpaError::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(NpaError::Checkpoint(format!(
            "unsupported format version {version}; this build reads version {FORMAT_VERSION}"
        )));
    }
    let (payload, tail) = bytes[8..].split_at(bytes.len() - 16);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = checksum(payload);
    if stored != actual {
        return Err(NpaError::Checkpoint(format!(
            "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
        )));
    }
    Ok(payload)
}

fn frame(magic: &[u8; 4], payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 16);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let sum = checksum(&payload);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn encode_checkpoint(model: &NpaModel) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.str(&model.config().to_toml())?;
    w.len_u32(model.params().len())?;
    for (name, t) in model.params().iter() {
        w.header(name, t)?;
        for &v in t.data() {
            w.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(frame(MAGIC, w.0))
}

/// Everything in a checkpoint, before the tensors are checked against the
/// config.
#[derive(Clone, Debug)]
pub struct CheckpointContents {
    pub version: u32,
    pub config: ModelConfig,
    pub params: ParamSet,
    pub checksum: u64,
    pub bytes: usize,
}

pub fn decode_contents(bytes: &[u8]) -> Result<CheckpointContents> {
    let payload = unframe(bytes, MAGIC)?;
    let mut r = Reader { bytes: payload, pos: 0 };
    let config = ModelConfig::from_toml(&r.str()?)
        .map_err(|e| NpaError::Checkpoint(format!("embedded config: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let (name, dims) = r.header()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| NpaError::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| NpaError::Checkpoint(format!("tensor `{name}`: {e}")))?;
        params.push(name, t);
    }
    if !r.done() {
        return Err(NpaError::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(CheckpointContents {
        version: FORMAT_VERSION,
        config,
        params,
        checksum: u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()),
        bytes: bytes.len(),
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NpaModel> {
    let c = decode_contents(bytes)?;
    NpaModel::from_parts(c.config, c.params)
}

pub fn save_checkpoint(model: &NpaModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<NpaModel> {
    decode_checkpoint(&read(path)?)
}

pub fn read_contents(path: &Path) -> Result<CheckpointContents> {
    decode_contents(&read(path)?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| NpaError::Checkpoint(format!("{}: {e}", path.display())))
}

/// The model as it will be after a save/load cycle.
pub fn round_to_f32(model: &NpaModel) -> NpaModel {
    let mut m = model.clone();
    for t in m.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    m
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

pub fn encode_optimizer(state: &OptimState, names: &[String]) -> Result<Vec<u8>> {
    if state.first_moment.len() != names.len() || state.second_moment.len() != names.len() {
        return Err(NpaError::invalid("optimizer state does not match parameter names"));
    }
    let mut w = Writer::default();
    w.u64(state.step_count);
    let c = &state.config;
    for v in [c.learning_rate, c.beta1, c.beta2, c.eps, c.weight_decay] {
        w.f64(v);
    }
    w.len_u32(names.len())?;
    for ((name, m), v) in names.iter().zip(&state.first_moment).zip(&state.second_moment) {
        w.header(name, m)?;
        for &x in m.data().iter().chain(v.data()) {
            w.f64(x);
        }
    }
    Ok(frame(SIDECAR_MAGIC, w.0))
}

pub fn decode_optimizer(bytes: &[u8]) -> Result<(OptimState, Vec<String>)> {
    let payload = unframe(bytes, SIDECAR_MAGIC)?;
    let mut r = Reader { bytes: payload, pos: 0 };
    let step_count = r.u64()?;
    let config = AdamWConfig {
        learning_rate: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
        weight_decay: r.f64()?,
    };
    let count = r.u32()? as usize;
    let (mut names, mut first, mut second) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..count {
        let (name, dims) = r.header()?;
        let numel: usize = dims.iter().product();
        let m = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let v = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        first.push(Tensor::new(dims.clone(), m)?);
        second.push(Tensor::new(dims, v)?);
        names.push(name);
    }
    if !r.done() {
        return Err(NpaError::Checkpoint("trailing bytes after optimizer state".into()));
    }
    Ok((
        OptimState {
            step_count,
            first_moment: first,
            second_moment: second,
            config,
        },
        names,
    ))
}

pub fn save_optimizer(state: &OptimState, names: &[String], path: &Path) -> Result<()> {
    write_atomic(path, &encode_optimizer(state, names)?)
}

/// Load a sidecar and check it lines up with `model`'s parameters.
pub fn load_optimizer(path: &Path, model: &NpaModel) -> Result<OptimState> {
    let (state, names) = decode_optimizer(&read(path)?)?;
    if names != model.params().names() {
        return Err(NpaError::Checkpoint("optimizer sidecar does not match the checkpoint's parameters".into()));
    }
    for (m, p) in state.first_moment.iter().zip(model.params().tensors()) {
        if m.shape() != p.shape() {
            return Err(NpaError::Checkpoint("optimizer moment shape mismatch".into()));
        }
    }
    Ok(state)
}
