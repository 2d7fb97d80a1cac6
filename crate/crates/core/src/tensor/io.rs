//! QTNS binary tensor files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "QTNS" | dtype: u8 | rank: u8 | dims: rank x u32 | payload (row-major) | eps: f64 | zero_base: i32
//! ```
//!
//! dtype codes: 0 = u8, 1 = i8, 2 = i32, 3 = f32. Real tensors carry
//! `eps = 1.0` and `zero_base = 0` in the trailer.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{IntWidth, QTensor, QuantError, QuantParams, RTensor};

const MAGIC: &[u8; 4] = b"QTNS";

#[derive(Debug, Error)]
pub enum TensorFormatError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Invalid(#[from] QuantError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    Int(QTensor),
    Real(RTensor),
}

impl StoredTensor {
    pub fn into_int(self) -> Option<QTensor> {
        match self {
            StoredTensor::Int(q) => Some(q),
            StoredTensor::Real(_) => None,
        }
    }

    pub fn into_real(self) -> Option<RTensor> {
        match self {
            StoredTensor::Real(r) => Some(r),
            StoredTensor::Int(_) => None,
        }
    }
}

fn dtype_code(w: IntWidth) -> u8 {
    match w {
        IntWidth::U8 => 0,
        IntWidth::I8 => 1,
        IntWidth::I32 => 2,
    }
}

fn header(out: &mut Vec<u8>, code: u8, shape: &[usize]) {
    out.extend_from_slice(MAGIC);
    out.push(code);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub fn encode_qtensor(t: &QTensor) -> Vec<u8> {
    let width = t.qp().width();
    let mut out = Vec::new();
    header(&mut out, dtype_code(width), t.shape());
    for &v in t.data() {
        match width {
            IntWidth::U8 => out.push(v as u8),
            IntWidth::I8 => out.push(v as i8 as u8),
            IntWidth::I32 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out.extend_from_slice(&t.qp().eps.to_le_bytes());
    out.extend_from_slice(&t.qp().zero_base.to_le_bytes());
    out
}

pub fn encode_rtensor(t: &RTensor) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, 3, t.shape());
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&1.0f64.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out
}

pub fn write_qtensor(path: &Path, t: &QTensor) -> Result<(), TensorFormatError> {
    fs::File::create(path)?.write_all(&encode_qtensor(t))?;
    Ok(())
}

pub fn write_rtensor(path: &Path, t: &RTensor) -> Result<(), TensorFormatError> {
    fs::File::create(path)?.write_all(&encode_rtensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<StoredTensor, TensorFormatError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    read_tensor_from(&buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorFormatError> {
        let found = self.buf.len().saturating_sub(self.pos);
        if found < n {
            return Err(TensorFormatError::Truncated { expected: n, found });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], TensorFormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn read_tensor_from(buf: &[u8]) -> Result<StoredTensor, TensorFormatError> {
    let mut c = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = c.array()?;
    if &magic != MAGIC {
        return Err(TensorFormatError::BadMagic(magic));
    }
    let [code] = c.array::<1>()?;
    let [rank] = c.array::<1>()?;
    let shape: Vec<usize> = (0..rank)
        .map(|_| c.array::<4>().map(|b| u32::from_le_bytes(b) as usize))
        .collect::<Result<_, _>>()?;
    let n: usize = shape.iter().product();
    let elem = match code {
        0 | 1 => 1,
        2 | 3 => 4,
        other => return Err(TensorFormatError::BadDtype(other)),
    };
    let payload = c.take(n * elem)?;
    let eps = f64::from_le_bytes(c.array()?);
    let zero_base = i32::from_le_bytes(c.array()?);
    Ok(match code {
        0 => StoredTensor::Int(QTensor::new(
            shape,
            payload.iter().map(|&b| b as i32).collect(),
            QuantParams { zero_base, ..QuantParams::activation(eps) },
        )?),
        1 => {
            let data: Vec<i32> = payload.iter().map(|&b| b as i8 as i32).collect();
            // i8 payloads may use the full signed byte, not only the 128-level weight range
            let qp = if data.iter().all(|v| (-64..=63).contains(v)) {
                QuantParams::weight(eps, zero_base)
            } else {
                QuantParams { eps, levels: 256, signed: true, zero_base }
            };
            StoredTensor::Int(QTensor::new(shape, data, qp)?)
        }
        2 => StoredTensor::Int(QTensor::new(
            shape,
            payload.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().unwrap())).collect(),
            QuantParams { zero_base, ..QuantParams::accumulator(eps) },
        )?),
        _ => StoredTensor::Real(RTensor::new(
            shape,
            payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
        )?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_fixed() {
        let t = QTensor::new(vec![1, 2], vec![3, 250], QuantParams::activation(0.5)).unwrap();
        let bytes = encode_qtensor(&t);
        let mut expected = b"QTNS".to_vec();
        expected.extend_from_slice(&[0, 2, 1, 0, 0, 0, 2, 0, 0, 0, 3, 250]);
        expected.extend_from_slice(&0.5f64.to_le_bytes());
        expected.extend_from_slice(&0i32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(read_tensor_from(b"QTNX\0\0"), Err(TensorFormatError::BadMagic(_))));
        assert!(matches!(read_tensor_from(b"QTNS\x09\x00"), Err(TensorFormatError::BadDtype(9))));
        assert!(matches!(
            read_tensor_from(b"QTNS\x00\x01\x05\x00\x00\x00\x01"),
            Err(TensorFormatError::Truncated { .. })
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.qtns");
        let t = QTensor::new(vec![2, 2], vec![-64, 0, 5, 63], QuantParams::weight(0.01, -3)).unwrap();
        write_qtensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), StoredTensor::Int(t));
    }

    proptest! {
        #[test]
        fn roundtrip_any_tensor(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>(), eps in 1e-6f64..10.0, zb in -100i32..100) {
            let n: usize = dims.iter().product();
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 33) as i64 };
            let acc: Vec<i32> = (0..n).map(|_| next() as i32).collect();
            let act: Vec<i32> = (0..n).map(|_| (next() % 256).abs() as i32).collect();
            let real: Vec<f32> = (0..n).map(|_| next() as f32 * 1e-3).collect();
            for t in [
                QTensor::new(dims.clone(), acc, QuantParams { zero_base: zb, ..QuantParams::accumulator(eps) }).unwrap(),
                QTensor::new(dims.clone(), act, QuantParams { zero_base: zb, ..QuantParams::activation(eps) }).unwrap(),
            ] {
                prop_assert_eq!(read_tensor_from(&encode_qtensor(&t)).unwrap(), StoredTensor::Int(t));
            }
            let r = RTensor::new(dims, real).unwrap();
            prop_assert_eq!(read_tensor_from(&encode_rtensor(&r)).unwrap(), StoredTensor::Real(r));
        }
    }
}
