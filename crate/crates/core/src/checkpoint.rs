//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u64 JSON metadata length, the
//! metadata (model config, batch-norm running stats, normalization stats and
//! mode, epoch, seed, optimizer step), then a named-tensor table. Each tensor
//! record is: u16 name length, name bytes, u8 dtype (0 = f64), u8 rank,
//! u64 dims, then the row-major f64 little-endian payload. Files are written
//! to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::data::{NormMode, NormStats};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TSTModel};
use crate::tensor::{BnState, Tensor};
use crate::train::AdamState;

const MAGIC: &[u8; 8] = b"TSTCKPT\0";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormInfo {
    pub stats: NormStats,
    pub mode: NormMode,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TSTModel,
    pub norm: Option<NormInfo>,
    /// Completed epochs at save time.
    pub epoch: usize,
    /// Base seed of the run; together with the epoch counter this fully
    /// determines the remaining shuffle/mask/dropout streams.
    pub seed: u64,
    pub opt: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    bn: BTreeMap<String, BnState>,
    norm: Option<NormInfo>,
    epoch: usize,
    seed: u64,
    opt_step: Option<u64>,
}

fn write_tensor(out: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    if name.len() > u16::MAX as usize {
        return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
    }
    out.write_u16::<LittleEndian>(name.len() as u16)?;
    out.write_all(name.as_bytes())?;
    out.write_u8(DTYPE_F64)?;
    out.write_u8(t.shape().len() as u8)?;
    for &d in t.shape() {
        out.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in t.data() {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor(inp: &mut impl Read) -> Result<(String, Tensor)> {
    let name_len = inp.read_u16::<LittleEndian>()? as usize;
    let mut name = vec![0u8; name_len];
    inp.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?;
    let dtype = inp.read_u8()?;
    if dtype != DTYPE_F64 {
        return Err(Error::Checkpoint(format!("unsupported dtype {dtype} for '{name}'")));
    }
    let rank = inp.read_u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(inp.read_u64::<LittleEndian>()? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0; numel];
    for v in data.iter_mut() {
        *v = inp.read_f64::<LittleEndian>()?;
    }
    Ok((name, Tensor::new(shape, data)))
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let meta = Meta {
        config: ckpt.model.config.clone(),
        bn: ckpt.model.bn.clone(),
        norm: ckpt.norm.clone(),
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        opt_step: ckpt.opt.as_ref().map(|o| o.step),
    };
    let meta_bytes =
        serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let tmp = path.with_extension("tmp");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u64::<LittleEndian>(meta_bytes.len() as u64)?;
        out.write_all(&meta_bytes)?;

        let n_opt = ckpt.opt.as_ref().map_or(0, |o| o.m.len() + o.v.len());
        out.write_u64::<LittleEndian>((ckpt.model.params.len() + n_opt) as u64)?;
        for (name, t) in &ckpt.model.params {
            write_tensor(&mut out, &format!("p.{name}"), t)?;
        }
        if let Some(opt) = &ckpt.opt {
            for (name, t) in &opt.m {
                write_tensor(&mut out, &format!("om.{name}"), t)?;
            }
            for (name, t) in &opt.v {
                write_tensor(&mut out, &format!("ov.{name}"), t)?;
            }
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    inp.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let version = inp.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let meta_len = inp.read_u64::<LittleEndian>()? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    inp.read_exact(&mut meta_bytes)?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;

    let n_tensors = inp.read_u64::<LittleEndian>()? as usize;
    let mut params = BTreeMap::new();
    let mut opt_m = BTreeMap::new();
    let mut opt_v = BTreeMap::new();
    for _ in 0..n_tensors {
        let (name, t) = read_tensor(&mut inp)?;
        if let Some(rest) = name.strip_prefix("p.") {
            params.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("om.") {
            opt_m.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("ov.") {
            opt_v.insert(rest.to_string(), t);
        } else {
            return Err(Error::Checkpoint(format!("unknown tensor group in '{name}'")));
        }
    }

    // Validate the loaded tensors against the declared configuration by
    // comparing names and shapes with a reference construction.
    let reference = TSTModel::init(meta.config.clone(), 0)?;
    let ref_keys: Vec<&String> = reference.params.keys().collect();
    let got_keys: Vec<&String> = params.keys().collect();
    if ref_keys != got_keys {
        return Err(Error::Checkpoint(format!(
            "parameter set does not match config: expected {ref_keys:?}, found {got_keys:?}"
        )));
    }
    for (name, t) in &params {
        if t.shape() != reference.params[name].shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for '{name}': {:?} vs config-implied {:?}",
                t.shape(),
                reference.params[name].shape()
            )));
        }
    }

    let opt = meta.opt_step.map(|step| AdamState { step, m: opt_m, v: opt_v });
    Ok(Checkpoint {
        model: TSTModel { config: meta.config, params, bn: meta.bn },
        norm: meta.norm,
        epoch: meta.epoch,
        seed: meta.seed,
        opt,
    })
}

/// Names of parameters whose values differ, with the largest absolute
/// difference for each.
pub fn diff(a: &Checkpoint, b: &Checkpoint) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (name, ta) in &a.model.params {
        match b.model.params.get(name) {
            None => out.push((name.clone(), f64::INFINITY)),
            Some(tb) if ta.shape() != tb.shape() => out.push((name.clone(), f64::INFINITY)),
            Some(tb) => {
                let max = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f64, f64::max);
                if max > 0.0 {
                    out.push((name.clone(), max));
                }
            }
        }
    }
    for name in b.model.params.keys() {
        if !a.model.params.contains_key(name) {
            out.push((name.clone(), f64::INFINITY));
        }
    }
    out
}
