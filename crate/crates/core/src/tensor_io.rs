//! Byte-level tensor records shared by the checkpoint and tensor-file
//! formats.
//!
//! A record is: `u16` name length, UTF-8 name, `u8` dtype code (0 = f32,
//! 1 = f64), `u8` rank, `u32` dims[rank], then raw little-endian data. The
//! unnamed variant drops the leading name fields. All integers are
//! little-endian. Truncation and bad tags produce a format error carrying
//! the absolute byte offset.

use crate::dtype::{DType, Element};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// A tensor of either supported dtype, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorPayload {
    pub fn dtype(&self) -> DType {
        match self {
            TensorPayload::F32(_) => DType::F32,
            TensorPayload::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorPayload::F32(t) => t.shape(),
            TensorPayload::F64(t) => t.shape(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            TensorPayload::F32(t) => t.cast(),
            TensorPayload::F64(t) => t.clone(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            TensorPayload::F32(t) => t.clone(),
            TensorPayload::F64(t) => t.cast(),
        }
    }
}

pub trait IntoPayload {
    fn into_payload(self) -> TensorPayload;
}

impl IntoPayload for Tensor<f32> {
    fn into_payload(self) -> TensorPayload {
        TensorPayload::F32(self)
    }
}

impl IntoPayload for Tensor<f64> {
    fn into_payload(self) -> TensorPayload {
        TensorPayload::F64(self)
    }
}

/// Offset-tracking reader over a byte slice.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(CoreError::Format {
                offset: self.offset(),
                reason: format!(
                    "truncated: need {n} bytes for {what}, {} left",
                    self.remaining()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let offset = self.offset();
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(CoreError::Format {
                offset,
                reason: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        Ok(())
    }
}

pub fn write_named(out: &mut Vec<u8>, name: &str, payload: &TensorPayload) {
    let name_bytes = name.as_bytes();
    assert!(name_bytes.len() <= u16::MAX as usize, "tensor name too long");
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(name_bytes);
    write_body(out, payload);
}

pub fn write_unnamed(out: &mut Vec<u8>, payload: &TensorPayload) {
    write_body(out, payload);
}

fn write_body(out: &mut Vec<u8>, payload: &TensorPayload) {
    let shape = payload.shape();
    assert!(shape.len() <= u8::MAX as usize, "rank too large");
    out.push(payload.dtype().code());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match payload {
        TensorPayload::F32(t) => f32::write_le(t.data(), out),
        TensorPayload::F64(t) => f64::write_le(t.data(), out),
    }
}

pub fn read_named(r: &mut ByteReader<'_>) -> Result<(String, TensorPayload)> {
    let name_len = r.u16("name length")? as usize;
    let offset = r.offset();
    let name_bytes = r.take(name_len, "tensor name")?;
    let name = std::str::from_utf8(name_bytes)
        .map_err(|_| CoreError::Format {
            offset,
            reason: "tensor name is not valid UTF-8".into(),
        })?
        .to_string();
    let payload = read_body(r)?;
    Ok((name, payload))
}

pub fn read_unnamed(r: &mut ByteReader<'_>) -> Result<TensorPayload> {
    read_body(r)
}

fn read_body(r: &mut ByteReader<'_>) -> Result<TensorPayload> {
    let dtype_offset = r.offset();
    let code = r.u8("dtype code")?;
    let dtype = DType::from_code(code).ok_or_else(|| CoreError::Format {
        offset: dtype_offset,
        reason: format!("unknown dtype code {code}"),
    })?;
    let rank = r.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("dimension")? as usize);
    }
    let numel: usize = shape.iter().product();
    let data_bytes = r.take(numel * dtype.size_bytes(), "tensor data")?;
    let payload = match dtype {
        DType::F32 => TensorPayload::F32(Tensor::from_vec(&shape, f32::read_le(data_bytes)?)?),
        DType::F64 => TensorPayload::F64(Tensor::from_vec(&shape, f64::read_le(data_bytes)?)?),
    };
    Ok(payload)
}
