use ndarray::Array3;

use crate::error::{Error, Result};

/// A single image in pixel space: channels x height x width, values in [0, 1].
///
/// All transforms consume and produce this representation. Classifier
/// normalization (mean/std) is *not* part of it; that belongs to the
/// classifier's preprocessing contract.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    /// Wraps a (C, H, W) array, validating the channel count and value range.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 1 or 3 channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!("empty image {h}x{w}")));
        }
        for &v in data.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!(
                    "pixel value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { data })
    }

    /// Wraps an array whose values are already known to lie in [0, 1].
    ///
    /// Used by transform internals, which clamp before constructing.
    pub(crate) fn from_clamped(data: Array3<f32>) -> Self {
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { data }
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Mean luminance, the reference point for contrast adjustment.
    ///
    /// Grayscale: plain pixel mean. RGB: mean of 0.299 R + 0.587 G + 0.114 B.
    pub fn mean_luminance(&self) -> f32 {
        let (c, h, w) = self.data.dim();
        let n = (h * w) as f64;
        if c == 1 {
            let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
            (sum / n) as f32
        } else {
            let weights = [0.299f64, 0.587, 0.114];
            let mut sum = 0.0f64;
            for (ch, &wt) in weights.iter().enumerate() {
                let s: f64 = self
                    .data
                    .index_axis(ndarray::Axis(0), ch)
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                sum += wt * s;
            }
            (sum / n) as f32
        }
    }

    /// Largest absolute pixel difference against another image of the same shape.
    pub fn max_abs_diff(&self, other: &ImageTensor) -> f32 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    #[test]
    fn rejects_bad_channel_count() {
        let data = Array3::<f32>::zeros((2, 4, 4));
        assert!(ImageTensor::new(data).is_err());
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let mut data = Array3::<f32>::zeros((1, 2, 2));
        data[[0, 0, 0]] = 1.5;
        assert!(ImageTensor::new(data).is_err());
    }

    #[test]
    fn grayscale_mean_luminance_is_pixel_mean() {
        let img = ImageTensor::new(arr3(&[[[0.2f32, 0.4], [0.6, 0.8]]])).unwrap();
        assert!((img.mean_luminance() - 0.5).abs() < 1e-7);
    }

    #[test]
    fn rgb_mean_luminance_uses_bt601_weights() {
        let mut data = Array3::<f32>::zeros((3, 1, 1));
        data[[0, 0, 0]] = 1.0; // R
        let img = ImageTensor::new(data).unwrap();
        assert!((img.mean_luminance() - 0.299).abs() < 1e-6);
    }
}
