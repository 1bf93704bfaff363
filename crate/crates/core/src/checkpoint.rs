//! Flat binary checkpoints of named `f64` arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "VIDPROP\0"
//! version  u32      1
//! count    u32      number of arrays
//! per array:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   data     f64 × product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VIDPROP\0";
pub const VERSION: u32 = 1;

pub fn write<W: Write>(mut out: W, entries: &[(String, Tensor)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("checkpoint is truncated".into())
    } else {
        Error::Io(e)
    }
}

pub fn read<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut input)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = read_u32(&mut input)? as usize;
        let shape = (0..ndim).map(|_| read_u64(&mut input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            input.read_exact(&mut b).map_err(truncated)?;
            data.push(f64::from_le_bytes(b));
        }
        entries.push((name, Tensor::new(&shape, data)?));
    }
    Ok(entries)
}

pub fn entries(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .named()
        .map(|(n, t)| (n.to_string(), Tensor::new(t.shape(), t.data().to_vec()).expect("valid stored tensor")))
        .collect()
}

pub fn save(path: &Path, stores: &[&ParamStore]) -> Result<()> {
    let all: Vec<(String, Tensor)> = stores.iter().flat_map(|s| entries(s)).collect();
    let mut buf = Vec::new();
    write(&mut buf, &all)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads every array of the checkpoint whose name belongs to `store`.
/// Errors if any parameter of `store` is missing from the file.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let all = read(std::fs::File::open(path)?)?;
    let wanted: Vec<(String, Tensor)> = all.into_iter().filter(|(n, _)| store.find(n).is_some()).collect();
    let missing: Vec<&str> = store
        .named()
        .map(|(n, _)| n)
        .filter(|n| !wanted.iter().any(|(w, _)| w == n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("checkpoint lacks parameters: {}", missing.join(", "))));
    }
    store.load_named(&wanted)
}
