//! Single images with a declared value range, and conversion to and from
//! network batches.

use serde::{Deserialize, Serialize};
use xmodal_nn::{Shape, Tensor};

use crate::error::{Error, Result};

/// Declared pixel interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// `[0, 1]`, used by the metrics.
    Unit,
    /// `[-1, 1]`, the network input/output range.
    Symmetric,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Symmetric => (-1.0, 1.0),
        }
    }

    /// Map `v` from `self` to `target` affinely.
    pub fn convert(self, v: f64, target: ValueRange) -> f64 {
        match (self, target) {
            (ValueRange::Unit, ValueRange::Symmetric) => 2.0 * v - 1.0,
            (ValueRange::Symmetric, ValueRange::Unit) => 0.5 * (v + 1.0),
            _ => v,
        }
    }
}

/// `C x H x W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    range: ValueRange,
}

impl ImageTensor {
    /// Values are clamped into `range`; NaN is rejected.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        range: ValueRange,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite {
                component: "image data".into(),
            });
        }
        let (lo, hi) = range.bounds();
        let data = data.into_iter().map(|v| v.clamp(lo, hi)).collect();
        Ok(Self {
            channels,
            height,
            width,
            data,
            range,
        })
    }

    pub fn filled(
        channels: usize,
        height: usize,
        width: usize,
        value: f64,
        range: ValueRange,
    ) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
            range,
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn to_range(&self, target: ValueRange) -> ImageTensor {
        if target == self.range {
            return self.clone();
        }
        ImageTensor {
            data: self
                .data
                .iter()
                .map(|&v| self.range.convert(v, target))
                .collect(),
            range: target,
            ..*self
        }
    }

    /// Per-pixel channel mean, `H x W`.
    pub fn luma(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(&self.data[c * plane..(c + 1) * plane]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.channels as f64);
        out
    }

    /// Batch of one in network layout.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, self.channels, self.height, self.width),
            self.data.clone(),
        )
        .expect("consistent dimensions")
    }

    /// Stack images (converted to `range`) into an `N x C x H x W` batch.
    pub fn batch(images: &[&ImageTensor], range: ValueRange) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Empty("image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != first.dims() {
                return Err(Error::Shape(format!(
                    "batch mixes {:?} and {:?} images",
                    first.dims(),
                    img.dims()
                )));
            }
            data.extend(img.data.iter().map(|&v| img.range.convert(v, range)));
        }
        Ok(Tensor::from_vec(
            Shape::new(images.len(), first.channels, first.height, first.width),
            data,
        )?)
    }

    /// Item `i` of a batch, interpreted as `range`.
    pub fn from_batch(batch: &Tensor, i: usize, range: ValueRange) -> Result<Self> {
        let s = batch.shape();
        if i >= s.n {
            return Err(Error::Shape(format!("item {i} of a batch of {}", s.n)));
        }
        Self::new(s.c, s.h, s.w, batch.sample(i).to_vec(), range)
    }

    /// Quantize a `[0,1]`-range copy to 8-bit RGB (grayscale is replicated).
    pub fn to_rgb8(&self) -> image::RgbImage {
        let unit = self.to_range(ValueRange::Unit);
        let plane = self.height * self.width;
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (idx, px) in img.pixels_mut().enumerate() {
            for ch in 0..3 {
                let c = if self.channels >= 3 { ch } else { 0 };
                let v = unit.data[c * plane + idx];
                px.0[ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        img
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut data = vec![0.0; 3 * plane];
        for (idx, px) in img.pixels().enumerate() {
            for ch in 0..3 {
                data[ch * plane + idx] = px.0[ch] as f64 / 255.0;
            }
        }
        Self::new(3, h, w, data, ValueRange::Unit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_conversion_round_trips() {
        let img = ImageTensor::new(1, 1, 3, vec![0.0, 0.25, 1.0], ValueRange::Unit).unwrap();
        let sym = img.to_range(ValueRange::Symmetric);
        assert_eq!(sym.data(), &[-1.0, -0.5, 1.0]);
        assert_eq!(sym.to_range(ValueRange::Unit), img);
    }

    #[test]
    fn rejects_nan_and_bad_dims() {
        assert!(ImageTensor::new(1, 1, 1, vec![f64::NAN], ValueRange::Unit).is_err());
        assert!(ImageTensor::new(1, 2, 2, vec![0.0; 3], ValueRange::Unit).is_err());
        assert!(ImageTensor::new(0, 2, 2, vec![], ValueRange::Unit).is_err());
    }

    #[test]
    fn values_are_clamped_into_range() {
        let img = ImageTensor::new(1, 1, 2, vec![-0.5, 1.5], ValueRange::Unit).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rgb8_round_trip_is_exact_on_quantized_values() {
        let data: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let img = ImageTensor::new(3, 2, 2, data, ValueRange::Unit).unwrap();
        let back = ImageTensor::from_rgb8(&img.to_rgb8()).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
