//! Binary container for dense row-major tensors of up to four dimensions.
//!
//! Layout on disk, all integers little-endian: the magic bytes `DGPT`, a u32
//! format version (currently 1), a u32 dtype tag (0 = f32, 1 = f64), a u32
//! dimension count, one u64 extent per dimension, then the payload in
//! row-major order. Round trips preserve element bits exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Magic bytes at the start of every tensor file.
pub const MAGIC: [u8; 4] = *b"DGPT";

/// Format version this build reads and writes.
pub const FORMAT_VERSION: u32 = 1;

/// Maximum number of dimensions a tensor may have.
pub const MAX_DIMS: usize = 4;

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn element_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Error raised by tensor construction, reading, or writing.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic bytes {found:?}, expected {MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}, expected {FORMAT_VERSION}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u32),
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("shape {shape:?} implies {expected} elements but {actual} were provided")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("file truncated: expected {expected} more bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingData(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Payload of a [`DenseTensor`], kept in its on-disk element type.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A dense row-major tensor with one to four dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn validate_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.len() > MAX_DIMS {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("dimension count must be 1..={MAX_DIMS}"),
        });
    }
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "zero extents are not allowed".into(),
        });
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows usize".into(),
        })
}

impl DenseTensor {
    /// Builds an f32 tensor, validating shape and payload length.
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected = validate_shape(&shape)?;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: TensorData::F32(data),
        })
    }

    /// Builds an f64 tensor, validating shape and payload length.
    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = validate_shape(&shape)?;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: TensorData::F64(data),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Payload as f32 slice, or `None` when stored as f64.
    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::F64(_) => None,
        }
    }

    /// Payload as f64 slice, or `None` when stored as f32.
    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// Payload widened to f64 regardless of storage type.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

/// Writes a tensor to `path`, replacing any existing file.
pub fn save_tensor<P: AsRef<Path>>(tensor: &DenseTensor, path: P) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&tensor.dtype().tag().to_le_bytes())?;
    w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
    for &extent in &tensor.shape {
        w.write_all(&(extent as u64).to_le_bytes())?;
    }
    match &tensor.data {
        TensorData::F32(v) => {
            for &x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::F64(v) => {
            for &x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<(), TensorError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(TensorError::Truncated {
                expected: buf.len() - filled,
                actual: filled,
            });
        }
        filled += n;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, TensorError> {
    let mut buf = [0u8; 4];
    read_exact_or_truncated(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads a tensor from `path`, validating header and payload length.
pub fn load_tensor<P: AsRef<Path>>(path: P) -> Result<DenseTensor, TensorError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(TensorError::BadMagic { found: magic });
    }

    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(TensorError::UnsupportedVersion(version));
    }

    let dtype_tag = read_u32(&mut r)?;
    let dtype = Dtype::from_tag(dtype_tag).ok_or(TensorError::UnsupportedDtype(dtype_tag))?;

    let ndim = read_u32(&mut r)? as usize;
    if ndim == 0 || ndim > MAX_DIMS {
        return Err(TensorError::InvalidShape {
            shape: vec![],
            reason: format!("dimension count {ndim} outside 1..={MAX_DIMS}"),
        });
    }

    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut buf = [0u8; 8];
        read_exact_or_truncated(&mut r, &mut buf)?;
        let extent = u64::from_le_bytes(buf);
        if extent == 0 || extent > usize::MAX as u64 {
            return Err(TensorError::InvalidShape {
                shape: shape.clone(),
                reason: format!("extent {extent} out of range"),
            });
        }
        shape.push(extent as usize);
    }
    let count = validate_shape(&shape)?;
    let payload_bytes = count
        .checked_mul(dtype.element_size())
        .ok_or_else(|| TensorError::InvalidShape {
            shape: shape.clone(),
            reason: "payload size overflows usize".into(),
        })?;

    let mut payload = vec![0u8; payload_bytes];
    read_exact_or_truncated(&mut r, &mut payload)?;

    let mut probe = [0u8; 1];
    let extra = r.read(&mut probe)?;
    if extra != 0 {
        let rest = std::io::copy(&mut r, &mut std::io::sink())? as usize;
        return Err(TensorError::TrailingData(extra + rest));
    }

    let data = match dtype {
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(DenseTensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn roundtrip(tensor: &DenseTensor) -> DenseTensor {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.dgpt");
        save_tensor(tensor, &path).unwrap();
        load_tensor(&path).unwrap()
    }

    #[test]
    fn roundtrip_f32_all_ranks() {
        for shape in [vec![7], vec![3, 5], vec![2, 3, 4], vec![2, 2, 2, 3]] {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32) * 0.5 - 3.0).collect();
            let t = DenseTensor::from_f32(shape.clone(), data.clone()).unwrap();
            let back = roundtrip(&t);
            assert_eq!(back.shape(), shape.as_slice());
            assert_eq!(back.dtype(), Dtype::F32);
            let bits: Vec<u32> = back.as_f32().unwrap().iter().map(|x| x.to_bits()).collect();
            let orig: Vec<u32> = data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits, orig);
        }
    }

    #[test]
    fn roundtrip_f64_preserves_bits() {
        let data = vec![0.0, -0.0, 1.5e-300, -7.25, std::f64::consts::PI];
        let t = DenseTensor::from_f64(vec![5], data.clone()).unwrap();
        let back = roundtrip(&t);
        assert_eq!(back.dtype(), Dtype::F64);
        let bits: Vec<u64> = back.as_f64().unwrap().iter().map(|x| x.to_bits()).collect();
        let orig: Vec<u64> = data.iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, orig);
    }

    #[test]
    fn five_dims_rejected_before_write() {
        let err = DenseTensor::from_f32(vec![1, 1, 1, 1, 1], vec![0.0]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidShape { .. }));
    }

    #[test]
    fn zero_extent_rejected() {
        let err = DenseTensor::from_f32(vec![3, 0], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidShape { .. }));
    }

    #[test]
    fn length_mismatch_rejected() {
        let err = DenseTensor::from_f64(vec![2, 2], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { .. }));
    }

    #[test]
    fn truncated_payload_is_clean_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.dgpt");
        let t = DenseTensor::from_f32(vec![4, 4], vec![1.0; 16]).unwrap();
        save_tensor(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_tensor(&path).unwrap_err();
        assert!(matches!(err, TensorError::Truncated { .. }));
    }

    #[test]
    fn truncated_header_is_clean_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.dgpt");
        std::fs::write(&path, b"DGPT\x01\x00").unwrap();
        let err = load_tensor(&path).unwrap_err();
        assert!(matches!(err, TensorError::Truncated { .. }));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.dgpt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = load_tensor(&path).unwrap_err();
        assert!(matches!(err, TensorError::BadMagic { .. }));
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.dgpt");
        let mut f = File::create(&path).unwrap();
        f.write_all(&MAGIC).unwrap();
        f.write_all(&9u32.to_le_bytes()).unwrap();
        f.write_all(&0u32.to_le_bytes()).unwrap();
        f.write_all(&1u32.to_le_bytes()).unwrap();
        f.write_all(&1u64.to_le_bytes()).unwrap();
        f.write_all(&1.0f32.to_le_bytes()).unwrap();
        drop(f);
        let err = load_tensor(&path).unwrap_err();
        assert!(matches!(err, TensorError::UnsupportedVersion(9)));
    }

    #[test]
    fn unknown_dtype_tag_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.dgpt");
        let mut f = File::create(&path).unwrap();
        f.write_all(&MAGIC).unwrap();
        f.write_all(&FORMAT_VERSION.to_le_bytes()).unwrap();
        f.write_all(&2u32.to_le_bytes()).unwrap();
        f.write_all(&1u32.to_le_bytes()).unwrap();
        f.write_all(&1u64.to_le_bytes()).unwrap();
        drop(f);
        let err = load_tensor(&path).unwrap_err();
        assert!(matches!(err, TensorError::UnsupportedDtype(2)));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.dgpt");
        let t = DenseTensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap();
        save_tensor(&t, &path).unwrap();
        let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[0xAB, 0xCD]).unwrap();
        drop(f);
        let err = load_tensor(&path).unwrap_err();
        assert!(matches!(err, TensorError::TrailingData(2)));
    }

    #[test]
    fn widening_matches_storage() {
        let t32 = DenseTensor::from_f32(vec![2], vec![1.5, -2.25]).unwrap();
        assert_eq!(t32.to_f64_vec(), vec![1.5, -2.25]);
        let t64 = DenseTensor::from_f64(vec![2], vec![1.5, -2.25]).unwrap();
        assert_eq!(t64.to_f64_vec(), vec![1.5, -2.25]);
    }
}
