//! `BFCK` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BFCK" | version: u8 | count: u32 |
//!   count x ( name_len: u32 | name: utf8 | rows: u32 | cols: u32 | rows*cols f64 )
//! ```

use std::path::Path;

use crate::error::Result;
use crate::fsutil::{self, put_f64s, put_u32, Reader};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"BFCK";
pub const VERSION: u8 = 1;

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Matrix)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u32(&mut out, tensors.len());
    for (name, m) in tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, m.rows());
        put_u32(&mut out, m.cols());
        put_f64s(&mut out, m.as_slice());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let mut r = Reader::new("checkpoint", bytes);
    r.magic(MAGIC)?;
    let version = r.u8()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.err("tensor name is not valid utf-8"))?
            .to_owned();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.f64s(rows * cols)?;
        out.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    r.finish()?;
    Ok(out)
}

pub fn save<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Matrix)>,
) -> Result<()> {
    fsutil::write_atomic(path, &encode(tensors))
}

pub fn load(path: &Path) -> Result<Vec<(String, Matrix)>> {
    decode(&fsutil::read(path)?)
}
