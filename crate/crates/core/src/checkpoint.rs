//! Binary checkpoint of a [`ModelParams`].
//!
//! Layout (all integers little-endian): magic `ADRP`, format version `u32`, group count
//! `u64`, then per group the name length `u64`, the UTF-8 name, the rank `u64`, each
//! dimension `u64`, and the values as `f64`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamGroup};

pub const MAGIC: &[u8; 4] = b"ADRP";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, params: &ModelParams) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(params.groups.len() as u64).to_le_bytes())?;
    for g in &params.groups {
        out.write_all(&(g.name.len() as u64).to_le_bytes())?;
        out.write_all(g.name.as_bytes())?;
        out.write_all(&(g.shape.len() as u64).to_le_bytes())?;
        for &d in &g.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &g.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Parse { row: 0, column: 0, msg: msg.into() }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let v = read_u64(r)?;
    usize::try_from(v).map_err(|_| bad(format!("{what} {v} too large")))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelParams> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut ver = [0u8; 4];
    input.read_exact(&mut ver)?;
    let ver = u32::from_le_bytes(ver);
    if ver != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint format {ver}")));
    }
    let count = read_len(&mut input, "group count")?;
    let mut groups = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = read_len(&mut input, "name length")?;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("group name is not UTF-8"))?;
        let rank = read_len(&mut input, "rank")?;
        let shape = (0..rank).map(|_| read_len(&mut input, "dimension")).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("tensor size overflows"))?;
        let mut values = Vec::with_capacity(n.min(1 << 24));
        let mut b = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        groups.push(ParamGroup::new(name, shape, values)?);
    }
    Ok(ModelParams::new(groups))
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), params)
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
