//! `.dna` dense-array container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! 0..8    magic  b"\x89DNA\r\n\x1a\n"
//! 8..12   u32    format version (1)
//! 12..20  u64    metadata length M in bytes
//! 20..28  u64    payload length L in bytes
//! 28..64  zero padding
//! 64..64+M       UTF-8 JSON {"dims":[..],"dtype":"float32|float64|uint8","layout":"row-major"}
//! 64+M..64+M+L   raw little-endian element payload
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"\x89DNA\r\n\x1a\n";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
    Uint8,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::Float32 => "float32",
            DType::Float64 => "float64",
            DType::Uint8 => "uint8",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Float64 => 8,
            DType::Uint8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::Float32,
            ArrayData::F64(_) => DType::Float64,
            ArrayData::U8(_) => DType::Uint8,
        }
    }
}

/// Row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseArray {
    dims: Vec<usize>,
    data: ArrayData,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    dims: Vec<usize>,
    dtype: DType,
    layout: String,
}

impl DenseArray {
    pub fn new(dims: Vec<usize>, data: ArrayData) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::validation(format!(
                "dims {dims:?} imply {expected} elements but data holds {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(dims, ArrayData::F64(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &ArrayData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            ArrayData::F64(v) => Ok(v),
            other => Err(Error::DtypeMismatch { expected: "float64", found: other.dtype().name() }),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            ArrayData::U8(v) => Ok(v),
            other => Err(Error::DtypeMismatch { expected: "uint8", found: other.dtype().name() }),
        }
    }

    /// Any floating dtype widened to `f64`.
    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        match &self.data {
            ArrayData::F64(v) => Ok(v.clone()),
            ArrayData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            ArrayData::U8(_) => Err(Error::DtypeMismatch { expected: "float32|float64", found: "uint8" }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&Metadata {
            dims: self.dims.clone(),
            dtype: self.dtype(),
            layout: "row-major".into(),
        })
        .expect("metadata serializes");
        let payload: Vec<u8> = match &self.data {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U8(v) => v.clone(),
        };
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.resize(HEADER_LEN, 0);
        out.extend_from_slice(&meta);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: &str| Error::Format { offset: offset as u64, message: message.into() };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(bytes.len(), "truncated header"));
        }
        if bytes[0..8] != MAGIC {
            return Err(fmt(0, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(fmt(8, &format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_len = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        let meta_end = HEADER_LEN.checked_add(meta_len).ok_or_else(|| fmt(12, "metadata length overflow"))?;
        if bytes.len() < meta_end {
            return Err(fmt(bytes.len(), "truncated metadata"));
        }
        let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
            .map_err(|e| fmt(HEADER_LEN, &format!("bad metadata: {e}")))?;
        if meta.layout != "row-major" {
            return Err(fmt(HEADER_LEN, &format!("unsupported layout {}", meta.layout)));
        }
        let count: usize = meta.dims.iter().product();
        if count * meta.dtype.size() != payload_len {
            return Err(fmt(20, "payload length disagrees with dims and dtype"));
        }
        let end = meta_end + payload_len;
        if bytes.len() < end {
            return Err(fmt(bytes.len(), "truncated payload"));
        }
        if bytes.len() > end {
            return Err(fmt(end, "trailing bytes after payload"));
        }
        let payload = &bytes[meta_end..end];
        let data = match meta.dtype {
            DType::Float32 => ArrayData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::Float64 => ArrayData::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::Uint8 => ArrayData::U8(payload.to_vec()),
        };
        Self::new(meta.dims, data)
    }
}

pub fn save_array(path: impl AsRef<Path>, array: &DenseArray) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, array.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_array(path: impl AsRef<Path>) -> Result<DenseArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DenseArray::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_2x3_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.dna");
        let a = DenseArray::new(vec![2, 3], ArrayData::F32(vec![1.0, -2.5, 3.25, 0.0, f32::MIN, 7.0])).unwrap();
        save_array(&path, &a).unwrap();
        let bytes = fs::read(&path).unwrap();
        let b = load_array(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes(), bytes);
    }

    #[test]
    fn empty_array_round_trips() {
        let a = DenseArray::new(vec![0], ArrayData::F64(vec![])).unwrap();
        assert_eq!(DenseArray::from_bytes(&a.to_bytes()).unwrap(), a);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let a = DenseArray::new(vec![4], ArrayData::U8(vec![1, 2, 3, 4])).unwrap();
        let bytes = a.to_bytes();
        for cut in [0, 10, HEADER_LEN + 3, bytes.len() - 1] {
            assert!(matches!(DenseArray::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn dtype_mismatch_is_typed() {
        let a = DenseArray::new(vec![1], ArrayData::U8(vec![9])).unwrap();
        assert!(matches!(a.as_f64(), Err(Error::DtypeMismatch { expected: "float64", found: "uint8" })));
    }

    #[test]
    fn header_is_64_bytes_then_json() {
        let a = DenseArray::from_f64(vec![1, 1], vec![0.5]).unwrap();
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..8], &MAGIC);
        assert_eq!(bytes[HEADER_LEN], b'{');
        assert_eq!(&bytes[bytes.len() - 8..], &0.5f64.to_le_bytes());
    }

    fn arb_array() -> impl Strategy<Value = DenseArray> {
        (prop::collection::vec(0usize..5, 1..=4), 0u8..3).prop_flat_map(|(dims, kind)| {
            let n: usize = dims.iter().product();
            let data = match kind {
                0 => prop::collection::vec(any::<f32>(), n).prop_map(ArrayData::F32).boxed(),
                1 => prop::collection::vec(any::<f64>(), n).prop_map(ArrayData::F64).boxed(),
                _ => prop::collection::vec(any::<u8>(), n).prop_map(ArrayData::U8).boxed(),
            };
            data.prop_map(move |d| DenseArray::new(dims.clone(), d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise_identity(a in arb_array()) {
            let bytes = a.to_bytes();
            let b = DenseArray::from_bytes(&bytes).unwrap();
            prop_assert_eq!(b.dims(), a.dims());
            prop_assert_eq!(b.to_bytes(), bytes);
        }
    }
}
