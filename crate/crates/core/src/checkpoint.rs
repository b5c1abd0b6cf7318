//! Versioned model container.
//!
//! ```text
//! #cbit-ckpt v1
//! max_len=...            model config, one key=value per line
//! meta.<key>=...         optional free-form metadata
//! tensors <count>
//! <records>              name_len u32, name, rank u32, dims u64 x rank, f64 payload
//! ```
//!
//! All binary fields are little-endian. Records follow the canonical
//! parameter order, so writing the same model always yields the same bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use cbit_tensor::Tensor;

use crate::encoder::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &str = "#cbit-ckpt v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model, meta: &BTreeMap<String, String>) -> Result<()> {
    let c = &model.config;
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "max_len={}", c.max_len)?;
    writeln!(w, "dim={}", c.dim)?;
    writeln!(w, "layers={}", c.layers)?;
    writeln!(w, "heads={}", c.heads)?;
    writeln!(w, "num_items={}", c.num_items)?;
    writeln!(w, "dropout={}", c.dropout)?;
    writeln!(w, "key_padding_mask={}", c.key_padding_mask)?;
    writeln!(w, "init_std={}", c.init_std)?;
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(bad(format!("metadata entry {k:?} cannot be stored")));
        }
        writeln!(w, "meta.{k}={v}")?;
    }
    let entries = model.params.entries();
    writeln!(w, "tensors {}", entries.len())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(format!("bad value {v:?} for {key}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: BufRead>(r: &mut R) -> Result<Checkpoint> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(bad(format!("not a checkpoint (header {:?})", line.trim_end())));
    }
    let mut cfg = ModelConfig::default();
    let mut seen = Vec::new();
    let mut meta = BTreeMap::new();
    let count = loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("truncated header"));
        }
        let l = line.trim_end_matches('\n');
        if let Some(n) = l.strip_prefix("tensors ") {
            break parse_field::<usize>("tensors", n)?;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| bad(format!("bad header line {l:?}")))?;
        if let Some(mk) = k.strip_prefix("meta.") {
            meta.insert(mk.to_string(), v.to_string());
            continue;
        }
        match k {
            "max_len" => cfg.max_len = parse_field(k, v)?,
            "dim" => cfg.dim = parse_field(k, v)?,
            "layers" => cfg.layers = parse_field(k, v)?,
            "heads" => cfg.heads = parse_field(k, v)?,
            "num_items" => cfg.num_items = parse_field(k, v)?,
            "dropout" => cfg.dropout = parse_field(k, v)?,
            "key_padding_mask" => cfg.key_padding_mask = parse_field(k, v)?,
            "init_std" => cfg.init_std = parse_field(k, v)?,
            _ => return Err(bad(format!("unknown config key {k:?}"))),
        }
        seen.push(k.to_string());
    };
    for required in ["max_len", "dim", "layers", "heads", "num_items", "dropout", "key_padding_mask", "init_std"] {
        if !seen.iter().any(|s| s == required) {
            return Err(bad(format!("config block lacks {required}")));
        }
    }
    cfg.validate().map_err(|e| bad(e.to_string()))?;

    let layout = ModelParams::layout(&cfg);
    let expected = layout.entries();
    if count != expected.len() {
        return Err(bad(format!("{count} tensors, config implies {}", expected.len())));
    }
    let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(bad(format!("{name}: implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let want = expected
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| bad(format!("unexpected tensor {name:?}")))?;
        if want.1.as_slice() != shape.as_slice() {
            return Err(bad(format!("{name}: shape {shape:?}, config implies {:?}", want.1)));
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(bad(format!("duplicate tensor {name:?}")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }
    let params = layout.map_named(|name, _| tensors.remove(name).expect("every name checked above"));
    Ok(Checkpoint {
        model: Model::from_params(cfg, params)?,
        meta,
    })
}

pub fn save(path: &Path, model: &Model, meta: &BTreeMap<String, String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    read_checkpoint(&mut BufReader::new(f))
}
