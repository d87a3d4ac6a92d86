//! Little-endian binary tensor container.
//!
//! Clip file layout:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "QVC1"
//! 4       1           dtype: 0 = u8, 1 = f32 (2 = f64, checkpoints only)
//! 5       1           rank (3 = T,H,W or 4 = T,C,H,W)
//! 6       4 * rank    dims, u32 LE each
//! ..      n * size    payload, row-major, LE
//! ```
//!
//! Parameter checkpoints reuse the same tensor record after a `"QWT1"`
//! magic, a u32 record count and a u16-length-prefixed UTF-8 name per
//! record.

use sdsnet_tensor::{Element, Tensor};
use thiserror::Error;

pub const CLIP_MAGIC: &[u8; 4] = b"QVC1";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"QWT1";

/// Malformed container bytes; `offset` is where the problem was detected.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("format error at byte offset {offset}: {msg}")]
pub struct FormatError {
    pub offset: u64,
    pub msg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoredDType {
    U8 = 0,
    F32 = 1,
    F64 = 2,
}

impl StoredDType {
    fn size(self) -> usize {
        match self {
            StoredDType::U8 => 1,
            StoredDType::F32 => 4,
            StoredDType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(StoredDType::U8),
            1 => Some(StoredDType::F32),
            2 => Some(StoredDType::F64),
            _ => None,
        }
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn error(&self, offset: usize, msg: impl Into<String>) -> FormatError {
        FormatError { offset: offset as u64, msg: msg.into() }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            self.error(self.pos, format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<(), FormatError> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(self.error(self.pos - 4, format!("bad magic {got:?}, expected {:?}", std::str::from_utf8(magic).unwrap_or("?"))));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.bytes.len() {
            return Err(self.error(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// A decoded tensor record before conversion to a float type.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RawRecord {
    pub dtype: StoredDType,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
    /// Byte offset of the payload, for value-level diagnostics.
    pub payload_offset: u64,
}

impl RawRecord {
    pub(crate) fn into_tensor<T: Element>(self) -> Result<Tensor<T>, FormatError> {
        let offset = self.payload_offset;
        let data = self.values.into_iter().map(T::of).collect();
        Tensor::new(self.dims, data).map_err(|e| FormatError { offset, msg: e.to_string() })
    }
}

/// Reads `dtype | rank | dims | payload` at the current position.
pub(crate) fn read_record(r: &mut ByteReader<'_>, allowed_ranks: &[u8]) -> Result<RawRecord, FormatError> {
    let dtype_at = r.pos;
    let code = r.u8("dtype")?;
    let dtype = StoredDType::from_code(code).ok_or_else(|| r.error(dtype_at, format!("unknown dtype code {code}")))?;
    let rank_at = r.pos;
    let rank = r.u8("rank")?;
    if !allowed_ranks.contains(&rank) {
        return Err(r.error(rank_at, format!("rank {rank} not in {allowed_ranks:?}")));
    }
    let dims_at = r.pos;
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = r.u32("dims")? as usize;
        if d == 0 {
            return Err(r.error(dims_at, "zero-length dimension"));
        }
        dims.push(d);
    }
    let bytes = dims
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.error(dims_at, format!("dims {dims:?} overflow the addressable size")))?;
    let payload_offset = r.offset();
    let payload = r.take(bytes, "payload")?;
    let values = match dtype {
        StoredDType::U8 => payload.iter().map(|&b| b as f64 / 255.0).collect(),
        StoredDType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        StoredDType::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
    };
    Ok(RawRecord { dtype, dims, values, payload_offset })
}

pub(crate) fn write_record_header(out: &mut Vec<u8>, dtype: StoredDType, dims: &[usize]) {
    out.push(dtype as u8);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub(crate) fn write_float_payload<T: Element>(out: &mut Vec<u8>, t: &Tensor<T>) -> StoredDType {
    match T::DTYPE {
        sdsnet_tensor::DType::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            StoredDType::F32
        }
        sdsnet_tensor::DType::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
            StoredDType::F64
        }
    }
}

fn check_clip_dims(dims: &[usize]) -> Result<(), FormatError> {
    if !(dims.len() == 3 || dims.len() == 4) || dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(FormatError { offset: 5, msg: format!("clip dims {dims:?} must be rank 3 or 4 and fit u32") });
    }
    Ok(())
}

/// Serializes a float clip (values must lie in `[0, 1]`).
pub fn encode_clip(clip: &Tensor<f32>) -> Result<Vec<u8>, FormatError> {
    check_clip_dims(clip.dims())?;
    if let Some(i) = clip.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        let offset = 6 + 4 * clip.rank() + 4 * i;
        return Err(FormatError { offset: offset as u64, msg: format!("value {} outside [0,1]", clip.data()[i]) });
    }
    let mut out = Vec::with_capacity(6 + 4 * clip.rank() + 4 * clip.numel());
    out.extend_from_slice(CLIP_MAGIC);
    write_record_header(&mut out, StoredDType::F32, clip.dims());
    write_float_payload(&mut out, clip);
    Ok(out)
}

/// Serializes an 8-bit clip, as produced by a camera.
pub fn encode_clip_u8(dims: &[usize], pixels: &[u8]) -> Result<Vec<u8>, FormatError> {
    check_clip_dims(dims)?;
    if dims.iter().product::<usize>() != pixels.len() {
        return Err(FormatError { offset: 6, msg: format!("dims {dims:?} do not match {} pixels", pixels.len()) });
    }
    let mut out = Vec::with_capacity(6 + 4 * dims.len() + pixels.len());
    out.extend_from_slice(CLIP_MAGIC);
    write_record_header(&mut out, StoredDType::U8, dims);
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Parses a clip file. 8-bit payloads are scaled to `[0, 1]`.
pub fn decode_clip(bytes: &[u8]) -> Result<Tensor<f32>, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CLIP_MAGIC)?;
    let rec = read_record(&mut r, &[3, 4])?;
    if rec.dtype == StoredDType::F64 {
        return Err(FormatError { offset: 4, msg: "clip files store u8 or f32 only".into() });
    }
    r.finish()?;
    if rec.dtype == StoredDType::F32 {
        if let Some(i) = rec.values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(FormatError {
                offset: rec.payload_offset + 4 * i as u64,
                msg: format!("value {} outside [0,1]", rec.values[i]),
            });
        }
    }
    rec.into_tensor()
}
