//! Binary checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"NTKF" | u32 version = 1
//! u32 slot_count, then per slot: u32 name_len | name bytes | u64 offset | u32 ndim | u64 dims...
//! u64 P | P × f64
//! u32 bn_count, then per layer: u32 channels | channels × f64 mean | channels × f64 var
//!        | f64 momentum | f64 eps
//! u8 buffer_mode (0 = with buffer, 1 = without)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::batchnorm::{BatchNormState, BufferMode};
use crate::model::network::ModelState;
use crate::params::{ParamLayout, ParamSlot, ParamVector};

const MAGIC: &[u8; 4] = b"NTKF";
const VERSION: u32 = 1;

pub fn encode(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let slots = state.params.layout().slots();
    out.extend_from_slice(&(slots.len() as u32).to_le_bytes());
    for slot in slots {
        out.extend_from_slice(&(slot.name.len() as u32).to_le_bytes());
        out.extend_from_slice(slot.name.as_bytes());
        out.extend_from_slice(&(slot.offset as u64).to_le_bytes());
        out.extend_from_slice(&(slot.shape.len() as u32).to_le_bytes());
        for d in &slot.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
    }
    out.extend_from_slice(&(state.params.len() as u64).to_le_bytes());
    for v in state.params.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(state.norms.len() as u32).to_le_bytes());
    for n in &state.norms {
        out.extend_from_slice(&(n.channels() as u32).to_le_bytes());
        for v in n.running_mean.iter().chain(&n.running_var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&n.momentum.to_le_bytes());
        out.extend_from_slice(&n.eps.to_le_bytes());
    }
    out.push(match state.mode {
        BufferMode::WithBuffer => 0,
        BufferMode::WithoutBuffer => 1,
    });
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format {
                what: self.what,
                detail: "unexpected end of file".into(),
            });
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn err(&self, detail: &str) -> Error {
        Error::Format {
            what: self.what,
            detail: detail.into(),
        }
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(self.err("trailing bytes"))
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(4)? != MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(&format!("unsupported version {version}")));
    }
    let slot_count = r.u32()? as usize;
    let mut slots = Vec::with_capacity(slot_count.min(1 << 16));
    for _ in 0..slot_count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("slot name is not UTF-8"))?;
        let offset = r.u64()? as usize;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        slots.push(ParamSlot { name, offset, shape });
    }
    let layout = ParamLayout::from_slots(slots)?;
    let p = r.u64()? as usize;
    if p != layout.total() {
        return Err(r.err("parameter count disagrees with layout"));
    }
    let params = ParamVector::from_data(layout, r.f64s(p)?)?;
    let bn_count = r.u32()? as usize;
    let mut norms = Vec::with_capacity(bn_count.min(1 << 16));
    for _ in 0..bn_count {
        let c = r.u32()? as usize;
        let running_mean = r.f64s(c)?;
        let running_var = r.f64s(c)?;
        let momentum = r.f64()?;
        let eps = r.f64()?;
        norms.push(BatchNormState {
            running_mean,
            running_var,
            momentum,
            eps,
        });
    }
    let mode = match r.u8()? {
        0 => BufferMode::WithBuffer,
        1 => BufferMode::WithoutBuffer,
        _ => return Err(r.err("unknown buffer mode")),
    };
    r.finish()?;
    Ok(ModelState { params, norms, mode })
}

pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
