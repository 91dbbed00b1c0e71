//! Dense row-major tensors and the `QYT1` binary encoding.
//!
//! Layout of a `QYT1` record: the four magic bytes `QYT1`, one `u8` rank,
//! `rank` little-endian `u32` dimensions, then the values as little-endian
//! IEEE-754 `f32` in row-major order. Records can be concatenated; the model
//! weight blob is exactly that.

use std::io::{Read, Write};

use crate::error::{QuantError, Result};

pub const QYT1_MAGIC: &[u8; 4] = b"QYT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero dimensions, length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(QuantError::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    /// Internal constructor for results of kernels that cannot produce
    /// non-finite values from finite inputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn write_qyt<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, &self.shape)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_qyt_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.shape.len() + 4 * self.data.len());
        // Writing into a Vec cannot fail.
        self.write_qyt(&mut out).expect("in-memory write");
        out
    }

    pub fn read_qyt<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != QYT1_MAGIC {
            return Err(QuantError::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 4];
            r.read_exact(&mut d)?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(QuantError::Format(format!("zero dimension in shape {shape:?}")));
        }
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data).map_err(|e| QuantError::Format(e.to_string()))
    }

    /// Decodes one record starting at `offset` of `blob`.
    pub fn from_qyt_slice(blob: &[u8], offset: usize) -> Result<Self> {
        let tail = blob
            .get(offset..)
            .ok_or_else(|| QuantError::Format(format!("offset {offset} past end of blob")))?;
        Self::read_qyt(tail).map_err(|e| match e {
            QuantError::Io(_) => QuantError::Format(format!("truncated tensor at offset {offset}")),
            other => other,
        })
    }
}

/// Quantized integer codes; the code range is carried by the companion
/// [`QuantParams`](crate::quant::QuantParams).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<i32>) -> Self {
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(QuantError::ShapeMismatch(format!("zero dimension in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(QuantError::ShapeMismatch(format!(
            "shape {shape:?} holds {n} elements but data has {len}"
        )));
    }
    Ok(())
}

fn write_header<W: Write>(w: &mut W, shape: &[usize]) -> Result<()> {
    let rank = u8::try_from(shape.len())
        .map_err(|_| QuantError::Format(format!("rank {} exceeds 255", shape.len())))?;
    w.write_all(QYT1_MAGIC)?;
    w.write_all(&[rank])?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| QuantError::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(QuantError::NonFinite(1))
        ));
    }

    #[test]
    fn qyt_layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = t.to_qyt_bytes();
        let mut expected = b"QYT1".to_vec();
        expected.push(2);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(Tensor::read_qyt(&bytes[..]).unwrap(), t);
    }

    #[test]
    fn truncated_and_foreign_records_fail() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = t.to_qyt_bytes();
        assert!(Tensor::from_qyt_slice(&bytes[..bytes.len() - 1], 0).is_err());
        assert!(Tensor::read_qyt(&b"QYT2\x00"[..]).is_err());
        assert!(Tensor::from_qyt_slice(&bytes, bytes.len() + 4).is_err());
    }
}
