//! Versioned binary checkpoints: model config, training position, parameter
//! tensors, and (optionally) optimizer moments. Tensor payloads are stored
//! as little-endian f64 so a save/load round trip is bit-exact and resumed
//! runs match uninterrupted ones.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use indexmap::IndexMap;
use ndarray::Array2;

use super::{ModelConfig, ModelParams};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CKP1";
const FORMAT_VERSION: u32 = 1;

/// Optimizer moments carried across a resume.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptState {
    /// Number of optimizer steps already applied (bias-correction counter).
    pub t: u64,
    pub m: IndexMap<String, Array2<f64>>,
    pub v: IndexMap<String, Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
    /// Next training step to execute.
    pub step: u64,
    pub opt: Option<OptState>,
}

fn write_tensor_table<W: Write>(
    w: &mut W,
    tensors: &[(&str, &Array2<f64>)],
) -> Result<()> {
    let io = |e: std::io::Error| Error::Checkpoint(format!("write failed: {e}"));
    w.write_u32::<LE>(tensors.len() as u32).map_err(io)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_u32::<LE>(bytes.len() as u32).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        w.write_u32::<LE>(t.nrows() as u32).map_err(io)?;
        w.write_u32::<LE>(t.ncols() as u32).map_err(io)?;
        for &x in t.iter() {
            w.write_f64::<LE>(x).map_err(io)?;
        }
    }
    Ok(())
}

fn read_tensor_table<R: Read>(r: &mut R) -> Result<IndexMap<String, Array2<f64>>> {
    let io = |e: std::io::Error| Error::Checkpoint(format!("truncated checkpoint: {e}"));
    let count = r.read_u32::<LE>().map_err(io)?;
    let mut out = IndexMap::new();
    for _ in 0..count {
        let name_len = r.read_u32::<LE>().map_err(io)? as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!("implausible tensor name length {name_len}")));
        }
        let mut buf = vec![0u8; name_len];
        r.read_exact(&mut buf).map_err(io)?;
        let name = String::from_utf8(buf)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rows = r.read_u32::<LE>().map_err(io)? as usize;
        let cols = r.read_u32::<LE>().map_err(io)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.read_f64::<LE>().map_err(io)?);
        }
        let t = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape for {name}: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    Ok(out)
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::Checkpoint(format!("write failed: {e}"));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LE>(FORMAT_VERSION).map_err(io)?;
    let cfg = serde_json::to_vec(&ckpt.params.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
    w.write_u32::<LE>(cfg.len() as u32).map_err(io)?;
    w.write_all(&cfg).map_err(io)?;
    w.write_u64::<LE>(ckpt.seed).map_err(io)?;
    w.write_u64::<LE>(ckpt.step).map_err(io)?;
    let tensors: Vec<(&str, &Array2<f64>)> =
        ckpt.params.tensors().map(|(n, t)| (n, t.as_ref())).collect();
    write_tensor_table(&mut w, &tensors)?;
    match &ckpt.opt {
        None => w.write_u8(0).map_err(io)?,
        Some(opt) => {
            w.write_u8(1).map_err(io)?;
            w.write_u64::<LE>(opt.t).map_err(io)?;
            let m: Vec<(&str, &Array2<f64>)> =
                opt.m.iter().map(|(n, t)| (n.as_str(), t)).collect();
            write_tensor_table(&mut w, &m)?;
            let v: Vec<(&str, &Array2<f64>)> =
                opt.v.iter().map(|(n, t)| (n.as_str(), t)).collect();
            write_tensor_table(&mut w, &v)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let io = |e: std::io::Error| Error::Checkpoint(format!("truncated checkpoint: {e}"));
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.read_u32::<LE>().map_err(io)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let cfg_len = r.read_u32::<LE>().map_err(io)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf).map_err(io)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_buf)
        .map_err(|e| Error::Checkpoint(format!("bad config payload: {e}")))?;
    let seed = r.read_u64::<LE>().map_err(io)?;
    let step = r.read_u64::<LE>().map_err(io)?;
    let tensors = read_tensor_table(&mut r)?;
    let tensors: IndexMap<String, Arc<Array2<f64>>> =
        tensors.into_iter().map(|(n, t)| (n, Arc::new(t))).collect();
    let params = ModelParams::from_tensors(config, tensors);
    let opt = match r.read_u8().map_err(io)? {
        0 => None,
        1 => {
            let t = r.read_u64::<LE>().map_err(io)?;
            let m = read_tensor_table(&mut r)?;
            let v = read_tensor_table(&mut r)?;
            Some(OptState { t, m, v })
        }
        other => return Err(Error::Checkpoint(format!("bad optimizer-state flag {other}"))),
    };
    Ok(Checkpoint { params, seed, step, opt })
}
