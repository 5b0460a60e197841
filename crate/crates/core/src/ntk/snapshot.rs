//! Kernel snapshot files.
//!
//! ```text
//! b"ENTK" | u32 version = 1 | u32 N | u32 n_out | u8 flags (bit 0: AL present)
//! n_out × (N × N f64, row-major)
//! N × u32 probe id | N × u16 CL | [N × u16 AL]
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::checkpoint::Reader;
use crate::ntk::ClassKernel;

const MAGIC: &[u8; 4] = b"ENTK";
const VERSION: u32 = 1;
const FLAG_AL: u8 = 1;

pub fn encode(k: &ClassKernel) -> Result<Vec<u8>> {
    let n = k.n();
    if k.cl.len() != n || k.al.as_ref().is_some_and(|a| a.len() != n) || k.blocks.iter().any(|b| b.rows != n || b.cols != n) {
        return Err(Error::shape("kernel snapshot", "blocks, ids and labels disagree on N"));
    }
    let mut out = Vec::with_capacity(17 + k.n_out() * n * n * 8 + n * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(k.n_out() as u32).to_le_bytes());
    out.push(if k.al.is_some() { FLAG_AL } else { 0 });
    for b in &k.blocks {
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for id in &k.probe_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for l in k.cl.iter().chain(k.al.iter().flatten()) {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ClassKernel> {
    let mut r = Reader::new(bytes, "kernel snapshot");
    if r.take(4)? != MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(&format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let n_out = r.u32()? as usize;
    let flags = r.u8()?;
    if flags & !FLAG_AL != 0 {
        return Err(r.err("unknown flag bits"));
    }
    let blocks = (0..n_out)
        .map(|_| Ok(Matrix::from_vec(n, n, r.f64s(n * n)?)))
        .collect::<Result<Vec<_>>>()?;
    let probe_ids = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let cl = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    let al = if flags & FLAG_AL != 0 {
        Some((0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    r.finish()?;
    Ok(ClassKernel {
        blocks,
        probe_ids,
        cl,
        al,
    })
}

pub fn save(k: &ClassKernel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(k)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ClassKernel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
