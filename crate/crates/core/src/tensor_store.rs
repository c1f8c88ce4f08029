//! Binary container for named dense tensors (`.t2d`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "T2DTNSR1"
//! count    u32
//! record*  u32 name_len | name (UTF-8) | u8 dtype | u8 rank | u64 dims[rank] | payload
//! ```
//!
//! The payload length is implied by `product(dims) * dtype.size()`. f16
//! payloads are kept as raw bytes in [`TensorRecord`] and widened to f32 on
//! access.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use half::f16;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"T2DTNSR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    U8,
    I32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::U8 => 2,
            DType::I32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F16),
            2 => Ok(DType::U8),
            3 => Ok(DType::I32),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16 => 2,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::U8 => "u8",
            DType::I32 => "i32",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl TensorRecord {
    pub fn new(
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<usize>,
        payload: Vec<u8>,
    ) -> Result<Self> {
        let record = TensorRecord {
            name: name.into(),
            dtype,
            shape,
            payload,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, DType::F32, shape, payload)
    }

    /// Narrows `values` to IEEE half precision (round to nearest even).
    pub fn from_f32_as_f16(
        name: impl Into<String>,
        shape: Vec<usize>,
        values: &[f32],
    ) -> Result<Self> {
        let payload = values
            .iter()
            .flat_map(|v| f16::from_f32(*v).to_le_bytes())
            .collect();
        Self::new(name, DType::F16, shape, payload)
    }

    pub fn from_i32(name: impl Into<String>, shape: Vec<usize>, values: &[i32]) -> Result<Self> {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, DType::I32, shape, payload)
    }

    pub fn from_u8(name: impl Into<String>, shape: Vec<usize>, values: &[u8]) -> Result<Self> {
        Self::new(name, DType::U8, shape, values.to_vec())
    }

    /// A rank-1 u8 record holding UTF-8 text.
    pub fn from_str(name: impl Into<String>, text: &str) -> Result<Self> {
        Self::from_u8(name, vec![text.len()], text.as_bytes())
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self
            .shape
            .iter()
            .try_fold(self.dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.invalid("shape overflows"))?;
        if self.payload.len() != expected {
            return Err(self.invalid(format!(
                "payload is {} bytes, shape {:?} of {} needs {}",
                self.payload.len(),
                self.shape,
                self.dtype.name(),
                expected
            )));
        }
        if self.shape.len() > u8::MAX as usize {
            return Err(self.invalid("rank exceeds 255"));
        }
        if self.name.len() > u32::MAX as usize {
            return Err(self.invalid("name too long"));
        }
        Ok(())
    }

    /// Values as f32; f16 payloads are widened.
    pub fn to_f32(&self) -> Result<Vec<f32>> {
        match self.dtype {
            DType::F32 => Ok(self
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()),
            DType::F16 => Ok(self
                .payload
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect()),
            other => Err(self.invalid(format!("expected a float tensor, found {}", other.name()))),
        }
    }

    pub fn to_i32(&self) -> Result<Vec<i32>> {
        match self.dtype {
            DType::I32 => Ok(self
                .payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()),
            other => Err(self.invalid(format!("expected i32, found {}", other.name()))),
        }
    }

    pub fn to_text(&self) -> Result<String> {
        if self.dtype != DType::U8 {
            return Err(self.invalid("expected u8 text"));
        }
        String::from_utf8(self.payload.clone()).map_err(|_| self.invalid("text is not UTF-8"))
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidRecord {
            name: self.name.clone(),
            reason: reason.into(),
        }
    }
}

pub fn encode(records: &[TensorRecord]) -> Result<Vec<u8>> {
    let mut seen = HashSet::with_capacity(records.len());
    for record in records {
        record.validate()?;
        if !seen.insert(record.name.as_str()) {
            return Err(Error::DuplicateName(record.name.clone()));
        }
    }
    let count = u32::try_from(records.len())
        .map_err(|_| Error::InvalidParameter("too many records".into()))?;

    let body: usize = records
        .iter()
        .map(|r| 4 + r.name.len() + 2 + 8 * r.shape.len() + r.payload.len())
        .sum();
    let mut out = Vec::with_capacity(12 + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for record in records {
        out.extend_from_slice(&(record.name.len() as u32).to_le_bytes());
        out.extend_from_slice(record.name.as_bytes());
        out.push(record.dtype.code());
        out.push(record.shape.len() as u8);
        for &dim in &record.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        out.extend_from_slice(&record.payload);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                Error::CorruptContainer(format!("truncated {what} at byte {}", self.pos))
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut buf = [0u8; 8];
        buf.copy_from_slice(b);
        Ok(u64::from_le_bytes(buf))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<TensorRecord>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::UnrecognizedFormat);
    }
    let mut cur = Cursor {
        bytes,
        pos: MAGIC.len(),
    };
    let count = cur.u32("record count")? as usize;
    // Every record needs at least 6 bytes; reject absurd counts before allocating.
    if count > bytes.len() / 6 {
        return Err(Error::CorruptContainer(format!(
            "record count {count} exceeds file size"
        )));
    }
    let mut records = Vec::with_capacity(count);
    let mut seen = HashSet::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::CorruptContainer("record name is not UTF-8".into()))?
            .to_owned();
        let dtype = DType::from_code(cur.u8("dtype")?)?;
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let dim = usize::try_from(cur.u64("dims")?)
                .map_err(|_| Error::CorruptContainer("dimension overflows usize".into()))?;
            shape.push(dim);
        }
        let len = shape
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CorruptContainer(format!("shape of `{name}` overflows")))?;
        let payload = cur.take(len, "payload")?.to_vec();
        if !seen.insert(name.clone()) {
            return Err(Error::CorruptContainer(format!(
                "duplicate record `{name}`"
            )));
        }
        records.push(TensorRecord {
            name,
            dtype,
            shape,
            payload,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::CorruptContainer(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(records)
}

/// Validates every record, then writes the container in one shot.
pub fn write_container(path: impl AsRef<Path>, records: &[TensorRecord]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Vec<TensorRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Name-indexed view over a decoded container.
#[derive(Debug, Clone, Default)]
pub struct Container {
    records: Vec<TensorRecord>,
}

impl Container {
    pub fn new(records: Vec<TensorRecord>) -> Self {
        Container { records }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_container(path).map(Self::new)
    }

    pub fn records(&self) -> &[TensorRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TensorRecord> {
        self.records
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorRecord> {
        self.get(name)
            .ok_or_else(|| Error::MissingRecord(name.to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f32() {
        let rec = TensorRecord::from_f32("x", vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode(std::slice::from_ref(&rec)).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, vec![rec]);
        assert_eq!(back[0].to_f32().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn exact_layout() {
        let rec = TensorRecord::from_i32("ab", vec![1], &[-2]).unwrap();
        let bytes = encode(&[rec]).unwrap();
        let mut expected = b"T2DTNSR1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.push(3);
        expected.push(1);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&(-2i32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn empty_container() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn duplicate_names_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.t2d");
        let a = TensorRecord::from_f32("a", vec![1], &[1.0]).unwrap();
        let err = write_container(&path, &[a.clone(), a]).unwrap_err();
        assert!(matches!(err, Error::DuplicateName(ref n) if n == "a"));
        assert!(!path.exists());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&[]).unwrap();
        bytes[..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(decode(&bytes), Err(Error::UnrecognizedFormat)));
        assert!(matches!(decode(b"T2D"), Err(Error::UnrecognizedFormat)));
    }

    #[test]
    fn truncated_payload() {
        let rec = TensorRecord::from_f32("x", vec![3], &[1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&[rec]).unwrap();
        let err = decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::CorruptContainer(_)));
        assert!(err.to_string().starts_with("corrupt container"));
    }

    #[test]
    fn unknown_dtype_code() {
        let rec = TensorRecord::from_u8("x", vec![1], &[7]).unwrap();
        let mut bytes = encode(&[rec]).unwrap();
        // magic(8) + count(4) + name_len(4) + name(1) -> dtype byte
        bytes[17] = 9;
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedDtype(9))));
    }

    #[test]
    fn payload_length_checked() {
        let err = TensorRecord::new("x", DType::F32, vec![2], vec![0; 7]).unwrap_err();
        assert!(matches!(err, Error::InvalidRecord { .. }));
    }

    #[test]
    fn text_records() {
        let rec = TensorRecord::from_str("id", "img_0001").unwrap();
        assert_eq!(rec.to_text().unwrap(), "img_0001");
    }
}
