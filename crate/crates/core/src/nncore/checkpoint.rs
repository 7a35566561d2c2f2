//! Binary checkpoint format.
//!
//! ```text
//! "MLNS"             4 bytes
//! version            u32
//! meta_len           u32, then meta_len bytes of JSON
//!                    {config, epoch, step, optimizer, optimizer_updates}
//! n_tensors          u32
//! per tensor:        ndim u32, dims u32 x ndim, values (f32 or f64 per config.precision)
//! crc32              u32 over every preceding byte
//! ```
//!
//! All integers and floats are little-endian. Tensors come in the order of
//! `Params::named` (embeddings, per-layer ln1/w_q/w_k/w_v/w_o/ln2/w1/w2,
//! final norm, head), followed by each optimizer slot in the same order.

use std::fs;
use std::path::Path;

use ndarray::ArrayViewD;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState, NnError, OptimState, Params, Precision, Real};

const MAGIC: &[u8; 4] = b"MLNS";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    epoch: u32,
    step: u64,
    optimizer: String,
    optimizer_updates: u64,
    n_slots: usize,
}

fn put_tensor<T: Real>(buf: &mut Vec<u8>, t: &ArrayViewD<'_, T>) {
    buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.iter() {
        x.put_le(buf);
    }
}

pub fn encode_checkpoint<T: Real>(state: &ModelState<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta = Meta {
        config: ModelConfig {
            precision: T::PRECISION,
            ..state.config.clone()
        },
        epoch: state.epoch,
        step: state.step,
        optimizer: state.optim.name.clone(),
        optimizer_updates: state.optim.updates,
        n_slots: state.optim.slots.len(),
    };
    let json = serde_json::to_vec(&meta).expect("meta serializes");
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut tensors = state.params.tensors();
    for s in &state.optim.slots {
        tensors.extend(s.tensors());
    }
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        put_tensor(&mut buf, t);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Writes atomically (temp file + rename) so a crash never leaves half a checkpoint.
pub fn save_checkpoint<T: Real>(state: &ModelState<T>, path: &Path) -> Result<(), NnError> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, encode_checkpoint(state))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// A checkpoint in whichever precision it was trained.
#[derive(Debug, Clone)]
pub enum AnyState {
    F32(ModelState<f32>),
    F64(ModelState<f64>),
}

impl AnyState {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyState::F32(s) => &s.config,
            AnyState::F64(s) => &s.config,
        }
    }

    pub fn epoch(&self) -> u32 {
        match self {
            AnyState::F32(s) => s.epoch,
            AnyState::F64(s) => s.epoch,
        }
    }

    /// Exact widening to f64 (used by every analysis).
    pub fn to_f64(&self) -> ModelState<f64> {
        match self {
            AnyState::F32(s) => s.cast(),
            AnyState::F64(s) => s.clone(),
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_params<T: Real>(cur: &mut Cursor<'_>, cfg: &ModelConfig) -> Result<Params<T>, NnError> {
    let mut p = Params::<T>::zeros(cfg);
    let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
    for (name, mut t) in names.iter().zip(p.tensors_mut()) {
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        if shape != t.shape() {
            return Err(NnError::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, config implies {:?}",
                t.shape()
            )));
        }
        let w = T::PRECISION.bytes();
        let bytes = cur.take(t.len() * w)?;
        for (x, chunk) in t.iter_mut().zip(bytes.chunks_exact(w)) {
            *x = T::get_le(chunk);
        }
    }
    Ok(p)
}

fn decode_typed<T: Real>(cur: &mut Cursor<'_>, meta: Meta) -> Result<ModelState<T>, NnError> {
    let params = read_params::<T>(cur, &meta.config)?;
    let slots = (0..meta.n_slots)
        .map(|_| read_params::<T>(cur, &meta.config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModelState {
        config: meta.config,
        params,
        optim: OptimState {
            name: meta.optimizer,
            updates: meta.optimizer_updates,
            slots,
        },
        epoch: meta.epoch,
        step: meta.step,
    })
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<AnyState, NnError> {
    if buf.len() < 16 {
        return Err(NnError::Checkpoint("file too short".into()));
    }
    if &buf[..4] != MAGIC {
        return Err(NnError::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let crc = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Err(NnError::Checkpoint("checksum mismatch (truncated or corrupted file)".into()));
    }
    let mut cur = Cursor { buf: body, pos: 4 };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = cur.u32()? as usize;
    let meta: Meta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| NnError::Checkpoint(format!("bad metadata: {e}")))?;
    meta.config.validate()?;
    let n_tensors = cur.u32()? as usize;
    let expected = (1 + meta.n_slots) * Params::<f32>::zeros(&meta.config).named().len();
    if n_tensors != expected {
        return Err(NnError::Checkpoint(format!("{n_tensors} tensors, expected {expected}")));
    }
    let state = match meta.config.precision {
        Precision::F32 => AnyState::F32(decode_typed(&mut cur, meta)?),
        Precision::F64 => AnyState::F64(decode_typed(&mut cur, meta)?),
    };
    if cur.pos != body.len() {
        return Err(NnError::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(state)
}

pub fn load_checkpoint(path: &Path) -> Result<AnyState, NnError> {
    let buf = fs::read(path)?;
    decode_checkpoint(&buf).map_err(|e| match e {
        NnError::Checkpoint(m) => NnError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads and refuses a checkpoint whose config differs from `expected`.
pub fn load_checkpoint_expect(path: &Path, expected: &ModelConfig) -> Result<AnyState, NnError> {
    let st = load_checkpoint(path)?;
    let diff = st.config().diff(expected);
    if !diff.is_empty() {
        return Err(NnError::ConfigMismatch(diff));
    }
    Ok(st)
}

/// Loads a checkpoint that must be in precision `T`.
pub fn load_checkpoint_typed<T: Real>(path: &Path) -> Result<ModelState<T>, NnError> {
    let st = load_checkpoint(path)?;
    let any: Box<dyn std::any::Any> = match st {
        AnyState::F32(s) => Box::new(s),
        AnyState::F64(s) => Box::new(s),
    };
    any.downcast::<ModelState<T>>()
        .map(|b| *b)
        .map_err(|_| NnError::Checkpoint(format!("checkpoint is not in {} precision", T::PRECISION)))
}
