//! Planar RGB images with values in `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// `3 x height x width` raster stored plane by plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; CHANNELS * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for (c, v) in rgb.iter().enumerate() {
            img.plane_mut(c).fill(*v);
        }
        img
    }

    /// Wraps planar data, clamping into `[0, 1]`.
    pub fn from_planar(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![CHANNELS, height, width],
                got: vec![data.len()],
            });
        }
        data.iter_mut().for_each(|v| *v = clamp01(*v));
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamp(&mut self) {
        self.data.iter_mut().for_each(|v| *v = clamp01(*v));
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.height == other.height && self.width == other.width {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: vec![CHANNELS, self.height, self.width],
                got: vec![CHANNELS, other.height, other.width],
            })
        }
    }

    /// Stacks images into a `[n, 3, h, w]` tensor.
    pub fn batch<F: Real>(images: &[&ImageBuffer]) -> Result<Tensor<F>> {
        let first = images
            .first()
            .ok_or_else(|| crate::error::invalid("empty image batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            first.same_shape(img)?;
            data.extend(img.data.iter().map(|&v| F::c(v as f64)));
        }
        Tensor::from_vec(&[images.len(), CHANNELS, first.height, first.width], data)
    }

    /// Extracts image `index` from a `[n, 3, h, w]` tensor, clamped.
    pub fn from_tensor<F: Real>(t: &Tensor<F>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if c != CHANNELS || index >= n {
            return Err(Error::ShapeMismatch {
                expected: vec![n, CHANNELS, h, w],
                got: t.shape().to_vec(),
            });
        }
        let len = c * h * w;
        let data = t.data()[index * len..(index + 1) * len]
            .iter()
            .map(|v| v.f64() as f32)
            .collect();
        Self::from_planar(h, w, data)
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let mut out = Self::new(height, width);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let taps = |o: usize, scale: f64, n: usize| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, (src - i0 as f64) as f32)
        };
        let xs: Vec<_> = (0..width).map(|x| taps(x, sx, self.width)).collect();
        for c in 0..CHANNELS {
            for y in 0..height {
                let (y0, y1, fy) = taps(y, sy, self.height);
                for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
                    let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
                    out.set(c, y, x, top * (1.0 - fy) + bot * fy);
                }
            }
        }
        out
    }
}

#[inline]
pub(crate) fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_identity_and_constant() {
        let mut img = ImageBuffer::new(4, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 7) as f32 / 7.0;
        }
        assert_eq!(img.resize_bilinear(4, 4), img);
        let flat = ImageBuffer::filled(4, 4, [0.2, 0.4, 0.6]);
        let up = flat.resize_bilinear(16, 16);
        assert!(up.plane(1).iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn tensor_round_trip() {
        let img = ImageBuffer::filled(2, 3, [0.1, 0.5, 0.9]);
        let t: Tensor<f64> = ImageBuffer::batch(&[&img, &img]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 3]);
        let back = ImageBuffer::from_tensor(&t, 1).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn from_planar_clamps() {
        let img = ImageBuffer::from_planar(1, 1, vec![-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
        assert!(ImageBuffer::from_planar(1, 2, vec![0.0; 3]).is_err());
    }
}
