//! Binary checkpoint format for [`TextParameterSet`].
//!
//! ```text
//! "NTPC" | version u32 = 1 | method u8 | N u32 | flags u8 | tensor_count u32
//! tensor_count × { rank u8 | rank × dim u32 | f32 payload, row-major }
//! epoch u32 | seed u64
//! ```
//!
//! Tensors are the learnable tensors in `TextParameterSet::learnable` order.
//! Flag bit 0 marks the random-name ablation; the N name-token overrides then
//! follow the learnable tensors. The fixed prompt of name tuning is not stored
//! and must be supplied on load.

use std::path::Path;

use ndarray::Array2;

use crate::classify::PromptSpec;
use crate::error::{Error, Result};
use crate::io::atomic::write_atomic;
use crate::io::bytes::ByteReader;
use crate::textparams::{Method, TextParameterSet};
use crate::tokens::TokenSequence;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NTPC";
pub const CHECKPOINT_VERSION: u32 = 1;
const FLAG_RANDOM_NAMES: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: TextParameterSet,
    pub epoch: u32,
    pub seed: u64,
}

fn push_tensor(out: &mut Vec<u8>, t: &Array2<f64>) {
    out.push(2);
    out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
    for v in t.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(params: &TextParameterSet, epoch: u32, seed: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(params.method().code());
    out.extend_from_slice(&(params.num_classes() as u32).to_le_bytes());
    let flags = if params.random_names() { FLAG_RANDOM_NAMES } else { 0 };
    out.push(flags);
    let learnable = params.learnable();
    let names = params.name_overrides().unwrap_or(&[]);
    out.extend_from_slice(&((learnable.len() + names.len()) as u32).to_le_bytes());
    for t in learnable {
        push_tensor(&mut out, t);
    }
    for n in names {
        push_tensor(&mut out, &n.rows().to_owned());
    }
    out.extend_from_slice(&epoch.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    out
}

fn read_tensor(r: &mut ByteReader<'_>) -> Result<Array2<f64>> {
    let rank = r.u8()?;
    if rank != 2 {
        return Err(Error::Format(format!("expected rank-2 tensor, got rank {rank}")));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let mut values = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        values.push(r.f32()? as f64);
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))
}

pub fn decode_checkpoint(bytes: &[u8], fixed_prompt: Option<PromptSpec>) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    if r.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let method = Method::from_code(r.u8()?)?;
    let n = r.u32()? as usize;
    let flags = r.u8()?;
    if flags & !FLAG_RANDOM_NAMES != 0 {
        return Err(Error::Format(format!("unknown checkpoint flags {flags:#x}")));
    }
    let count = r.u32()? as usize;
    let random_names = flags & FLAG_RANDOM_NAMES != 0;
    let name_count = if random_names { n } else { 0 };
    if count < name_count {
        return Err(Error::Format("tensor count smaller than class count".into()));
    }
    let mut tensors = (0..count)
        .map(|_| read_tensor(&mut r))
        .collect::<Result<Vec<_>>>()?;
    let epoch = r.u32()?;
    let seed = r.u64()?;
    r.finish()?;
    let names: Vec<TokenSequence> = tensors
        .split_off(count - name_count)
        .into_iter()
        .map(TokenSequence::from_rows)
        .collect();
    let params = TextParameterSet::from_tensors(
        method,
        n,
        tensors,
        fixed_prompt,
        random_names.then_some(names),
    )?;
    Ok(Checkpoint {
        params,
        epoch,
        seed,
    })
}

pub fn save_checkpoint(path: &Path, params: &TextParameterSet, epoch: u32, seed: u64) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, epoch, seed))
}

pub fn load_checkpoint(path: &Path, fixed_prompt: Option<PromptSpec>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, fixed_prompt)
}
