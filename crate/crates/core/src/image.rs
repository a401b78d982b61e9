//! The image batch type shared by every stage of the pipeline.
//!
//! Batches are dense `[n, c, h, w]` tensors of `f64` pixels in `[0, 1]`.
//! Construction validates finiteness and range once so downstream code can
//! rely on the invariant instead of re-checking.

use crate::error::{Error, Result};
use ndarray::{Array3, Array4, ArrayView3, Axis};

/// A batch of images, shape `[n, c, h, w]`, pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    data: Array4<f64>,
}

impl ImageBatch {
    /// Wrap a tensor, validating that every value is finite and in `[0, 1]`.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite("image batch".into()));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "pixel value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { data })
    }

    /// Wrap a tensor after clamping values into `[0, 1]`.  Non-finite values
    /// are still rejected: they indicate a bug, not an out-of-range result.
    pub fn from_clamped(mut data: Array4<f64>) -> Result<Self> {
        for v in data.iter_mut() {
            if !v.is_finite() {
                return Err(Error::NonFinite("image batch".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { data })
    }

    /// Number of images in the batch.
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(n, c, h, w)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn array(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array4<f64> {
        self.data
    }

    /// View of one image, shape `[c, h, w]`.
    pub fn sample(&self, i: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), i)
    }

    /// Copy of one image as an owned `[c, h, w]` array.
    pub fn sample_owned(&self, i: usize) -> Array3<f64> {
        self.data.index_axis(Axis(0), i).to_owned()
    }

    /// Build a batch from per-sample `[c, h, w]` arrays (all same shape).
    pub fn from_samples(samples: &[Array3<f64>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch("from_samples".into()));
        }
        let (c, h, w) = samples[0].dim();
        let mut data = Array4::zeros((samples.len(), c, h, w));
        for (i, s) in samples.iter().enumerate() {
            if s.dim() != (c, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "sample {i} has shape {:?}, expected {:?}",
                    s.dim(),
                    (c, h, w)
                )));
            }
            data.index_axis_mut(Axis(0), i).assign(s);
        }
        Self::new(data)
    }

    /// Select a sub-batch by index.  Indices may repeat.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.len();
        for &i in indices {
            if i >= n {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of range for batch of {n}"
                )));
            }
        }
        Ok(Self {
            data: self.data.select(Axis(0), indices),
        })
    }

    /// Concatenate batches along the sample axis.
    pub fn concat(batches: &[&ImageBatch]) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::EmptyBatch("concat".into()));
        }
        let views: Vec<_> = batches.iter().map(|b| b.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::ShapeMismatch(format!("concat: {e}")))?;
        Ok(Self { data })
    }

    /// Largest absolute per-pixel difference to another batch.
    pub fn linf_distance(&self, other: &ImageBatch) -> Result<f64> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::ShapeMismatch(
                "linf_distance: batch shapes differ".into(),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn rejects_out_of_range_and_non_finite() {
        let mut a = Array4::zeros((1, 1, 2, 2));
        a[[0, 0, 0, 0]] = 1.5;
        assert!(ImageBatch::new(a.clone()).is_err());
        a[[0, 0, 0, 0]] = f64::NAN;
        assert!(ImageBatch::new(a.clone()).is_err());
        assert!(ImageBatch::from_clamped(a).is_err());
    }

    #[test]
    fn clamping_brings_values_into_range() {
        let mut a = Array4::zeros((1, 1, 2, 2));
        a[[0, 0, 0, 0]] = 1.5;
        a[[0, 0, 0, 1]] = -0.25;
        let b = ImageBatch::from_clamped(a).unwrap();
        assert_eq!(b.array()[[0, 0, 0, 0]], 1.0);
        assert_eq!(b.array()[[0, 0, 0, 1]], 0.0);
    }

    #[test]
    fn select_and_concat_round_trip() {
        let mut a = Array4::zeros((3, 1, 2, 2));
        for i in 0..3 {
            a[[i, 0, 0, 0]] = i as f64 / 10.0;
        }
        let b = ImageBatch::new(a).unwrap();
        let front = b.select(&[0]).unwrap();
        let back = b.select(&[1, 2]).unwrap();
        let glued = ImageBatch::concat(&[&front, &back]).unwrap();
        assert_eq!(glued, b);
    }
}
