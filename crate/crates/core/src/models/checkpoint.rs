//! Parameter checkpoints: `"QWT1"`, a little-endian u32 record count, then
//! per record a u16 name length, the UTF-8 name, and a tensor record in the
//! clip container layout (dtype code, rank, u32 dims, payload).

use std::fs;
use std::path::Path;

use sdsnet_tensor::Element;

use super::params::ParamStore;
use super::ModelError;
use crate::ingest::container::{read_record, write_float_payload, write_record_header, ByteReader, StoredDType};
use crate::ingest::{FormatError, WEIGHTS_MAGIC};

pub fn encode_checkpoint<T: Element>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.numel() * T::DTYPE.size_of());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dtype = match T::DTYPE {
            sdsnet_tensor::DType::F32 => StoredDType::F32,
            sdsnet_tensor::DType::F64 => StoredDType::F64,
        };
        write_record_header(&mut out, dtype, value.dims());
        write_float_payload(&mut out, value);
    }
    out
}

/// Parses a checkpoint, converting stored values to `T`.
pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<ParamStore<T>, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(WEIGHTS_MAGIC)?;
    let count = r.u32("record count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name_at = r.offset() as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.error(name_at, "parameter name is not UTF-8"))?
            .to_string();
        let record_at = r.offset() as usize;
        let rec = read_record(&mut r, &[1, 2, 3, 4, 5])?;
        if rec.dtype == StoredDType::U8 {
            return Err(r.error(record_at, format!("{name}: weights must be f32 or f64")));
        }
        entries.push((name, rec.into_tensor()?));
    }
    r.finish()?;
    let end = r.offset();
    ParamStore::from_named(entries).map_err(|e| FormatError { offset: end, msg: e.to_string() })
}

pub fn save_checkpoint<T: Element>(params: &ParamStore<T>, path: &Path) -> Result<(), ModelError> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| ModelError::Io { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<ParamStore<T>, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::Io { path: path.to_path_buf(), msg: e.to_string() })?;
    decode_checkpoint(&bytes).map_err(|e| ModelError::Io { path: path.to_path_buf(), msg: e.to_string() })
}
