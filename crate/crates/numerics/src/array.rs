//! Row-major `f32` tensors.

use crate::error::{NumericsError, Result};

/// A dense row-major tensor of 32-bit floats.
///
/// A rank-0 tensor (empty shape) holds exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::ShapeMismatch { op: "NdArray::new", left: shape, right: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NumericsError::ShapeMismatch { op: "reshape", left: self.shape, right: shape.to_vec() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }

    pub fn ensure_shape(&self, op: &'static str, other: &[usize]) -> Result<()> {
        if self.shape == other {
            Ok(())
        } else {
            Err(NumericsError::ShapeMismatch { op, left: self.shape.clone(), right: other.to_vec() })
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// `self += alpha * other`; shapes must match.
    pub fn axpy(&mut self, alpha: f32, other: &NdArray) -> Result<()> {
        other.ensure_shape("axpy", &self.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() as f32
    }

    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f32)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }

    /// Concatenate tensors along axis 0. Trailing dimensions must agree.
    pub fn concat0(parts: &[&NdArray]) -> Result<Self> {
        let first = parts.first().ok_or(NumericsError::Empty { op: "concat" })?;
        if first.rank() == 0 {
            return Err(NumericsError::Invalid("concat of rank-0 tensors".into()));
        }
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            if p.rank() == 0 || &p.shape[1..] != tail {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Ok(Self { shape, data })
    }
}

/// Numerically stable softmax over a 1-D tensor.
pub fn softmax(logits: &NdArray) -> Result<NdArray> {
    let lsm = log_softmax(logits)?;
    Ok(lsm.map(f32::exp))
}

/// Numerically stable log-softmax over a 1-D tensor. The normalizer is
/// accumulated in `f64`.
pub fn log_softmax(logits: &NdArray) -> Result<NdArray> {
    if logits.rank() != 1 {
        return Err(NumericsError::Invalid(format!("softmax expects a 1-D tensor, got shape {:?}", logits.shape())));
    }
    if logits.is_empty() {
        return Err(NumericsError::Empty { op: "softmax" });
    }
    logits.ensure_finite("softmax")?;
    Ok(NdArray::from_vec(log_softmax_slice(logits.data())))
}

pub(crate) fn log_softmax_slice(x: &[f32]) -> Vec<f32> {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse: f64 = x.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln();
    x.iter().map(|&v| ((v - max) as f64 - lse) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(NdArray::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(NdArray::new(vec![], vec![1.0]).unwrap().item(), Some(1.0));
    }

    #[test]
    fn softmax_uniform_160() {
        let p = softmax(&NdArray::zeros(&[160])).unwrap();
        for &v in p.data() {
            assert!((v - 0.00625).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_two_point() {
        let p = softmax(&NdArray::from_vec(vec![0.0, 3f32.ln()])).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-6);
        assert!((p.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_errors() {
        assert!(softmax(&NdArray::from_vec(vec![])).is_err());
        assert!(softmax(&NdArray::from_vec(vec![1.0, f32::NAN])).is_err());
        assert!(softmax(&NdArray::from_vec(vec![1.0, f32::INFINITY])).is_err());
        assert!(softmax(&NdArray::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn concat_along_channels() {
        let a = NdArray::full(&[1, 2, 2], 1.0);
        let b = NdArray::full(&[2, 2, 2], 2.0);
        let c = NdArray::concat0(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        assert_eq!(c.data()[3], 1.0);
        assert_eq!(c.data()[4], 2.0);
        assert!(NdArray::concat0(&[&a, &NdArray::zeros(&[1, 3, 2])]).is_err());
    }
}
