//! Row-major scalar image buffer.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A 2D field of intensities stored row-major, channels interleaved.
///
/// Pipeline code works on single-channel buffers; multi-channel buffers only
/// exist at the I/O boundary and for the final per-channel restoration.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> ImageBuffer<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        Self::with_channels(width, height, 1, data)
    }

    pub fn with_channels(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::EmptyImage);
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!("data length {} does not match {}x{}x{}", data.len(), width, height, channels)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("non-finite intensity".into()));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Single-channel buffer filled with `value`.
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self { width, height, channels: 1, data: vec![value; width * height] }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, T::zero())
    }

    /// Single-channel buffer with `f(x, y)` at column `x`, row `y`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, channels: 1, data }
    }

    pub(crate) fn from_raw_unchecked(width: usize, height: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self { width, height, channels: 1, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value at column `x`, row `y` of a single-channel buffer.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    /// Sample with coordinates clamped to the image (replicate-edge).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> T {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    /// Sample with coordinates wrapped around (periodic).
    #[inline]
    pub fn get_wrapped(&self, x: isize, y: isize) -> T {
        let xc = x.rem_euclid(self.width as isize) as usize;
        let yc = y.rem_euclid(self.height as isize) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { width: self.width, height: self.height, channels: self.channels, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.channels != other.channels {
            return Err(Error::DimensionMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::from_usize_lossy(self.data.len())
    }

    pub fn variance(&self) -> T {
        let m = self.mean();
        self.data.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::from_usize_lossy(self.data.len())
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    /// Sum of squared differences against `other`.
    pub fn sq_dist(&self, other: &Self) -> Result<T> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b) * (a - b)).sum())
    }

    pub fn mse(&self, other: &Self) -> Result<T> {
        Ok(self.sq_dist(other)? / T::from_usize_lossy(self.data.len()))
    }

    /// PSNR in dB for a unit dynamic range.
    pub fn psnr(&self, other: &Self) -> Result<T> {
        let mse = self.mse(other)?;
        if mse <= T::zero() {
            return Ok(T::infinity());
        }
        Ok(T::lit(-10.0) * mse.log10())
    }

    /// Sum of squared forward differences; a simple sharpness measure.
    pub fn gradient_energy(&self) -> T {
        let mut e = T::zero();
        for y in 0..self.height {
            for x in 0..self.width {
                let c = self.get(x, y);
                if x + 1 < self.width {
                    let d = self.get(x + 1, y) - c;
                    e = e + d * d;
                }
                if y + 1 < self.height {
                    let d = self.get(x, y + 1) - c;
                    e = e + d * d;
                }
            }
        }
        e
    }

    /// Sub-image `[x0, x0+w) x [y0, y0+h)` of a single-channel buffer.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::DimensionMismatch(format!("crop {}x{}+{}+{} outside {}x{}", w, h, x0, y0, self.width, self.height)));
        }
        Ok(Self::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }

    /// Replicate-pads by the given margins.
    pub fn pad_replicate(&self, left: usize, top: usize, right: usize, bottom: usize) -> Self {
        let w = self.width + left + right;
        let h = self.height + top + bottom;
        Self::from_fn(w, h, |x, y| self.get_clamped(x as isize - left as isize, y as isize - top as isize))
    }

    /// Extracts channel `c` as a single-channel buffer.
    pub fn channel(&self, c: usize) -> Self {
        assert!(c < self.channels, "channel index out of range");
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Self::from_raw_unchecked(self.width, self.height, data)
    }

    /// Interleaves single-channel planes into one multi-channel buffer.
    pub fn merge_channels(planes: &[Self]) -> Result<Self> {
        let first = planes.first().ok_or(Error::EmptyImage)?;
        for p in planes {
            if p.channels != 1 || p.dims() != first.dims() {
                return Err(Error::DimensionMismatch("channel planes differ in shape".into()));
            }
        }
        let n = first.width * first.height;
        let mut data = Vec::with_capacity(n * planes.len());
        for i in 0..n {
            for p in planes {
                data.push(p.data[i]);
            }
        }
        Self::with_channels(first.width, first.height, planes.len(), data)
    }

    /// Rec. 601 luminance for 3/4-channel buffers, first channel for gray+alpha.
    pub fn to_luma(&self) -> Self {
        match self.channels {
            1 => self.clone(),
            2 => self.channel(0),
            _ => {
                let (r, g, b) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
                let data = self.data.chunks_exact(self.channels).map(|px| r * px[0] + g * px[1] + b * px[2]).collect();
                Self::from_raw_unchecked(self.width, self.height, data)
            }
        }
    }

    /// Converts the scalar type.
    pub fn cast<U: Real>(&self) -> ImageBuffer<U> {
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(ImageBuffer::<f64>::new(3, 2, vec![0.0; 5]).is_err());
        assert!(ImageBuffer::<f64>::new(0, 2, vec![]).is_err());
        assert!(ImageBuffer::<f64>::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn channel_roundtrip() {
        let rgb = ImageBuffer::<f64>::with_channels(2, 1, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let planes: Vec<_> = (0..3).map(|c| rgb.channel(c)).collect();
        assert_eq!(planes[1].data(), &[0.2, 0.5]);
        assert_eq!(ImageBuffer::merge_channels(&planes).unwrap(), rgb);
        let luma = rgb.to_luma();
        assert!((luma.get(0, 0) - (0.299 * 0.1 + 0.587 * 0.2 + 0.114 * 0.3)).abs() < 1e-12);
    }

    #[test]
    fn pad_and_crop() {
        let img = ImageBuffer::<f64>::from_fn(3, 2, |x, y| (x + 10 * y) as f64);
        let p = img.pad_replicate(2, 1, 1, 3);
        assert_eq!(p.dims(), (6, 6));
        assert_eq!(p.get(0, 0), 0.0);
        assert_eq!(p.get(5, 5), 12.0);
        assert_eq!(p.crop(2, 1, 3, 2).unwrap(), img);
    }
}
