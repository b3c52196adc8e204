//! Binary matrix files.
//!
//! Layout: `b"NLRA"`, version byte (1), precision byte (4 or 8), rows and
//! cols as little-endian `u64`, then `rows*cols` little-endian IEEE-754
//! scalars in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{Precision, Scalar};

pub const MAGIC: &[u8; 4] = b"NLRA";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 8 + 8;

/// A matrix file whose precision is only known after reading the header.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyMatrix {
    F32(Matrix<f32>),
    F64(Matrix<f64>),
}

impl AnyMatrix {
    pub fn precision(&self) -> Precision {
        match self {
            AnyMatrix::F32(_) => Precision::F32,
            AnyMatrix::F64(_) => Precision::F64,
        }
    }

    /// Wraps a typed matrix; the precision is taken from `T`.
    pub fn from_typed<T: Scalar>(m: &Matrix<T>) -> Self {
        match T::PRECISION_CODE {
            4 => AnyMatrix::F32(m.cast()),
            _ => AnyMatrix::F64(m.cast()),
        }
    }

    /// Unwraps to `T`, failing if the stored precision differs.
    pub fn to_typed<T: Scalar>(&self) -> Result<Matrix<T>> {
        if self.precision().code() != T::PRECISION_CODE {
            return Err(Error::Format(format!(
                "matrix holds {} data, expected {}",
                self.precision(),
                T::NAME
            )));
        }
        Ok(match self {
            AnyMatrix::F32(m) => m.cast(),
            AnyMatrix::F64(m) => m.cast(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            AnyMatrix::F32(m) => m.shape(),
            AnyMatrix::F64(m) => m.shape(),
        }
    }
}

impl From<Matrix<f32>> for AnyMatrix {
    fn from(m: Matrix<f32>) -> Self {
        AnyMatrix::F32(m)
    }
}

impl From<Matrix<f64>> for AnyMatrix {
    fn from(m: Matrix<f64>) -> Self {
        AnyMatrix::F64(m)
    }
}

pub fn encode<T: Scalar>(m: &Matrix<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.len() * T::PRECISION_CODE as usize);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::PRECISION_CODE);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &x in m.as_slice() {
        x.write_le(&mut out);
    }
    out
}

fn parse_header(bytes: &[u8]) -> Result<(Precision, usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("matrix header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected NLRA".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported matrix version {}", bytes[4])));
    }
    let precision = Precision::from_code(bytes[5])
        .ok_or_else(|| Error::Format(format!("unknown precision code {}", bytes[5])))?;
    let dim = |at: usize| -> Result<usize> {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[at..at + 8]);
        usize::try_from(u64::from_le_bytes(buf))
            .map_err(|_| Error::Format("dimension exceeds address space".into()))
    };
    Ok((precision, dim(6)?, dim(14)?))
}

fn decode_body<T: Scalar>(bytes: &[u8], rows: usize, cols: usize) -> Result<Matrix<T>> {
    let width = T::PRECISION_CODE as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let need = count
        .checked_mul(width)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    if bytes.len() != need {
        return Err(Error::Format(format!(
            "expected {need} bytes for {rows}x{cols} {}, found {}",
            T::NAME,
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(width)
        .map(T::read_le)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Decodes a matrix of a known precision; a precision mismatch is an error.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Matrix<T>> {
    let (precision, rows, cols) = parse_header(bytes)?;
    if precision.code() != T::PRECISION_CODE {
        return Err(Error::Format(format!(
            "file holds {precision} data, expected {}",
            T::NAME
        )));
    }
    decode_body(bytes, rows, cols)
}

pub fn decode_any(bytes: &[u8]) -> Result<AnyMatrix> {
    let (precision, rows, cols) = parse_header(bytes)?;
    Ok(match precision {
        Precision::F32 => AnyMatrix::F32(decode_body(bytes, rows, cols)?),
        Precision::F64 => AnyMatrix::F64(decode_body(bytes, rows, cols)?),
    })
}

pub fn write_matrix<T: Scalar>(mut w: impl Write, m: &Matrix<T>) -> Result<()> {
    w.write_all(&encode(m))?;
    Ok(())
}

pub fn read_matrix<T: Scalar>(mut r: impl Read) -> Result<Matrix<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, m: &Matrix<T>) -> Result<()> {
    std::fs::write(path, encode(m))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Matrix<T>> {
    decode(&std::fs::read(path)?)
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyMatrix> {
    decode_any(&std::fs::read(path)?)
}

pub fn save_any(path: impl AsRef<Path>, m: &AnyMatrix) -> Result<()> {
    match m {
        AnyMatrix::F32(m) => save(path, m),
        AnyMatrix::F64(m) => save(path, m),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes() {
        let m = Matrix::<f32>::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let bytes = encode(&m);
        assert_eq!(&bytes[..4], b"NLRA");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 4);
        assert_eq!(&bytes[6..14], &1u64.to_le_bytes());
        assert_eq!(&bytes[14..22], &3u64.to_le_bytes());
        assert_eq!(&bytes[22..26], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 22 + 12);
    }

    #[test]
    fn precision_mismatch() {
        let bytes = encode(&Matrix::<f64>::identity(2));
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_any(&bytes), Ok(AnyMatrix::F64(_))));
    }

    #[test]
    fn truncated_and_corrupt() {
        let mut bytes = encode(&Matrix::<f64>::identity(2));
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f64>(&bytes[..10]).is_err());
        bytes[0] = b'X';
        assert!(decode::<f64>(&bytes).is_err());
    }

    #[test]
    fn rejects_nan_payload() {
        let mut bytes = encode(&Matrix::<f64>::identity(1));
        bytes[22..30].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode::<f64>(&bytes), Err(Error::NonFinite(_))));
    }
}
