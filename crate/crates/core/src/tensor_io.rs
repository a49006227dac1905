//! Dense tensor container used for every array the engine exchanges.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic "ALCT"
//! 4       1           version (1)
//! 5       1           dtype (0=u8, 1=u16, 2=u32, 3=f32)
//! 6       1           ndim (1..=4)
//! 7       4 * ndim    dims
//! ..      prod(dims) * sizeof(dtype)  row-major payload
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ALCT";
pub const VERSION: u8 = 1;
pub const MAX_NDIM: usize = 4;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic: expected \"ALCT\"")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    U8,
    U16,
    U32,
    F32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::U8 => 0,
            DType::U16 => 1,
            DType::U32 => 2,
            DType::F32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TensorError> {
        match code {
            0 => Ok(DType::U8),
            1 => Ok(DType::U16),
            2 => Ok(DType::U32),
            3 => Ok(DType::F32),
            other => Err(TensorError::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
            DType::U32 | DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    U32(Vec<u32>),
    F32(Vec<f32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::U8(_) => DType::U8,
            TensorData::U16(_) => DType::U16,
            TensorData::U32(_) => DType::U32,
            TensorData::F32(_) => DType::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::U32(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An n-dimensional row-major array with a fixed scalar type.
#[derive(Debug, Clone)]
pub struct DenseTensor {
    dims: Vec<u32>,
    data: TensorData,
}

/// Bit-level equality so NaN payloads compare equal to themselves.
impl PartialEq for DenseTensor {
    fn eq(&self, other: &Self) -> bool {
        if self.dims != other.dims {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (a, b) => a == b,
        }
    }
}

impl DenseTensor {
    pub fn new(dims: Vec<u32>, data: TensorData) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > MAX_NDIM {
            return Err(TensorError::DimMismatch(format!(
                "ndim {} outside 1..={MAX_NDIM}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(TensorError::DimMismatch("zero-sized dimension".into()));
        }
        let count = element_count(&dims)?;
        if count != data.len() {
            return Err(TensorError::DimMismatch(format!(
                "dims {dims:?} describe {count} elements, data holds {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn header_len(&self) -> usize {
        7 + 4 * self.dims.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_len() + self.data.len() * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype().code());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(TensorError::BadMagic);
        }
        if bytes.len() < 7 {
            return Err(TensorError::TruncatedPayload {
                expected: 7,
                found: bytes.len(),
            });
        }
        if bytes[4] != VERSION {
            return Err(TensorError::UnsupportedVersion(bytes[4]));
        }
        let dtype = DType::from_code(bytes[5])?;
        let ndim = bytes[6] as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(TensorError::DimMismatch(format!("ndim {ndim} outside 1..={MAX_NDIM}")));
        }
        let header = 7 + 4 * ndim;
        if bytes.len() < header {
            return Err(TensorError::TruncatedPayload {
                expected: header,
                found: bytes.len(),
            });
        }
        let dims: Vec<u32> = bytes[7..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if dims.contains(&0) {
            return Err(TensorError::DimMismatch("zero-sized dimension".into()));
        }
        let count = element_count(&dims)?;
        let expected = count
            .checked_mul(dtype.size())
            .ok_or_else(|| TensorError::DimMismatch("payload size overflows".into()))?;
        let payload = &bytes[header..];
        if payload.len() < expected {
            return Err(TensorError::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(TensorError::DimMismatch(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let data = match dtype {
            DType::U8 => TensorData::U8(payload.to_vec()),
            DType::U16 => TensorData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::U32 => TensorData::U32(
                payload
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                    .collect(),
            ),
        };
        Ok(Self { dims, data })
    }
}

fn element_count(dims: &[u32]) -> Result<usize, TensorError> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d as usize)
            .ok_or_else(|| TensorError::DimMismatch("element count overflows".into()))
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseTensor, TensorError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    DenseTensor::from_bytes(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &DenseTensor) -> Result<(), TensorError> {
    let path = path.as_ref();
    let io_err = |source| TensorError::IoFailure {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    fs::write(path, tensor.to_bytes()).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smallest_u16_file_parses() {
        let mut bytes = b"ALCT".to_vec();
        bytes.extend_from_slice(&[1, 1, 2]);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for v in [1u16, 2, 3, 4] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let t = DenseTensor::from_bytes(&bytes).unwrap();
        assert_eq!(t.dims(), &[2, 2]);
        assert_eq!(t.data(), &TensorData::U16(vec![1, 2, 3, 4]));
        assert_eq!(t.to_bytes(), bytes);
    }

    #[test]
    fn short_payload_is_truncated() {
        let mut bytes = b"ALCT".to_vec();
        bytes.extend_from_slice(&[1, 1, 2]);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 6]);
        assert!(matches!(
            DenseTensor::from_bytes(&bytes),
            Err(TensorError::TruncatedPayload { expected: 8, found: 6 })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let t = DenseTensor::new(vec![2], TensorData::U8(vec![1, 2])).unwrap();
        let mut bytes = t.to_bytes();
        bytes.push(0);
        assert!(matches!(
            DenseTensor::from_bytes(&bytes),
            Err(TensorError::DimMismatch(_))
        ));
    }

    #[test]
    fn header_errors() {
        assert!(matches!(
            DenseTensor::from_bytes(b"NOPE\x01\x00\x01"),
            Err(TensorError::BadMagic)
        ));
        assert!(matches!(
            DenseTensor::from_bytes(b"ALCT\x02\x00\x01\x01\x00\x00\x00\x00"),
            Err(TensorError::UnsupportedVersion(2))
        ));
        assert!(matches!(
            DenseTensor::from_bytes(b"ALCT\x01\x09\x01\x01\x00\x00\x00\x00"),
            Err(TensorError::UnsupportedDtype(9))
        ));
        assert!(matches!(
            DenseTensor::from_bytes(b"ALCT\x01\x00\x01\x00\x00\x00\x00"),
            Err(TensorError::DimMismatch(_))
        ));
    }

    #[test]
    fn one_by_one_f32_is_19_bytes() {
        let t = DenseTensor::new(vec![1, 1], TensorData::F32(vec![0.5])).unwrap();
        assert_eq!(t.to_bytes().len(), 19);
    }

    #[test]
    fn nan_written_verbatim() {
        let nan = f32::from_bits(0x7fc0_1234);
        let t = DenseTensor::new(vec![2], TensorData::F32(vec![nan, 1.0])).unwrap();
        let back = DenseTensor::from_bytes(&t.to_bytes()).unwrap();
        match back.data() {
            TensorData::F32(v) => assert_eq!(v[0].to_bits(), 0x7fc0_1234),
            _ => unreachable!(),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/sp.alct");
        let t = DenseTensor::new(vec![2, 3], TensorData::U32(vec![0, 0, 1, 1, 2, u32::MAX])).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    fn arb_tensor() -> impl Strategy<Value = DenseTensor> {
        (prop::collection::vec(1u32..5, 1..=4), 0u8..4, any::<u64>()).prop_map(|(dims, code, seed)| {
            use rand::{Rng, SeedableRng};
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = match code {
                0 => TensorData::U8((0..n).map(|_| rng.gen()).collect()),
                1 => TensorData::U16((0..n).map(|_| rng.gen()).collect()),
                2 => TensorData::U32((0..n).map(|_| rng.gen()).collect()),
                _ => TensorData::F32((0..n).map(|_| f32::from_bits(rng.gen())).collect()),
            };
            DenseTensor::new(dims, data).unwrap()
        })
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exact(t in arb_tensor()) {
            let bytes = t.to_bytes();
            let back = DenseTensor::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
