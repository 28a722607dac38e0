//! `EQKV` tensor files.
//!
//! Layout, all little-endian:
//!
//! | bytes | field                         |
//! |-------|-------------------------------|
//! | 4     | magic `EQKV`                  |
//! | 2     | version (u16, currently 1)    |
//! | 1     | dtype (1 = f32)               |
//! | 1     | ndim                          |
//! | 4·ndim| dims (u32 each)               |
//! | rest  | row-major f32 payload         |

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"EQKV";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("unsupported dtype {0}")]
    Dtype(u8),
    #[error("payload holds {actual} bytes, dims need {expected}")]
    Length { expected: u64, actual: u64 },
    #[error("expected a {expected}-d tensor, got {actual} dims")]
    Rank { expected: usize, actual: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self, TensorFileError> {
        let expected: u64 = dims.iter().map(|&d| u64::from(d)).product();
        if expected != data.len() as u64 {
            return Err(TensorFileError::Length {
                expected: expected * 4,
                actual: data.len() as u64 * 4,
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows() as u32, m.cols() as u32],
            data: m.data().iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix, TensorFileError> {
        if self.dims.len() != 2 {
            return Err(TensorFileError::Rank {
                expected: 2,
                actual: self.dims.len(),
            });
        }
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(TensorFileError::NonFinite(i));
        }
        let data = self.data.iter().map(|&x| f64::from(x)).collect();
        Ok(Matrix::new(self.dims[0] as usize, self.dims[1] as usize, data).expect("dims checked"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorFileError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(TensorFileError::Magic(magic));
        }
        let mut head = [0u8; 4];
        r.read_exact(&mut head)?;
        let version = u16::from_le_bytes([head[0], head[1]]);
        if version != VERSION {
            return Err(TensorFileError::Version(version));
        }
        if head[2] != DTYPE_F32 {
            return Err(TensorFileError::Dtype(head[2]));
        }
        let ndim = head[3] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            dims.push(u32::from_le_bytes(b));
        }
        let expected: u64 = dims.iter().map(|&d| u64::from(d)).product::<u64>() * 4;
        if expected != r.len() as u64 {
            return Err(TensorFileError::Length {
                expected,
                actual: r.len() as u64,
            });
        }
        let data = r
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self, TensorFileError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = TensorFile::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"EQKV");
        assert_eq!(&b[4..8], &[1, 0, 1, 2]);
        assert_eq!(&b[8..16], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(b.len(), 16 + 8);
        assert_eq!(TensorFile::from_bytes(&b).unwrap(), t);
    }

    #[test]
    fn rejects_corrupt_files() {
        let good = TensorFile::new(vec![2], vec![0.0, 1.0]).unwrap().to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(TensorFile::from_bytes(&bad), Err(TensorFileError::Magic(_))));
        let mut bad = good.clone();
        bad[6] = 2;
        assert!(matches!(TensorFile::from_bytes(&bad), Err(TensorFileError::Dtype(2))));
        assert!(matches!(
            TensorFile::from_bytes(&good[..good.len() - 1]),
            Err(TensorFileError::Length { .. })
        ));
        assert!(TensorFile::from_bytes(&good[..3]).is_err());
        assert!(TensorFile::new(vec![3], vec![0.0]).is_err());
    }

    #[test]
    fn matrix_conversion() {
        let t = TensorFile::new(vec![2, 2, 1], vec![0.0; 4]).unwrap();
        assert!(t.to_matrix().is_err());
        let t = TensorFile::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(t.to_matrix(), Err(TensorFileError::NonFinite(0))));
        let m = Matrix::new(2, 1, vec![0.5, -3.0]).unwrap();
        assert_eq!(TensorFile::from_matrix(&m).to_matrix().unwrap(), m);
    }
}
