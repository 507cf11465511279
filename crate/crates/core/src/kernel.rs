//! Normalized blur kernels.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scalar::Real;

/// Square point-spread function with odd support, nonnegative weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel<T> {
    size: usize,
    weights: Vec<T>,
}

impl<T: Real> BlurKernel<T> {
    /// Validates an already-normalized kernel.
    pub fn new(size: usize, weights: Vec<T>) -> Result<Self> {
        check_shape(size, weights.len())?;
        if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::InvalidKernel("weights must be finite and nonnegative".into()));
        }
        let sum: T = weights.iter().copied().sum();
        if (sum - T::one()).abs() > T::sum_tolerance() {
            return Err(Error::InvalidKernel(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self { size, weights })
    }

    /// Clamps negatives to zero and rescales to unit sum.
    pub fn normalized(size: usize, mut weights: Vec<T>) -> Result<Self> {
        check_shape(size, weights.len())?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidKernel("non-finite weight".into()));
        }
        for w in weights.iter_mut() {
            *w = w.max(T::zero());
        }
        let sum: T = weights.iter().copied().sum();
        if sum <= T::zero() {
            return Err(Error::EmptyKernel);
        }
        for w in weights.iter_mut() {
            *w = *w / sum;
        }
        Ok(Self { size, weights })
    }

    /// The 1x1 identity kernel.
    pub fn delta() -> Self {
        Self::identity(1)
    }

    /// A `size`x`size` kernel with all mass at the center.
    pub fn identity(size: usize) -> Self {
        assert!(size % 2 == 1, "kernel size must be odd");
        let mut weights = vec![T::zero(); size * size];
        weights[size * size / 2] = T::one();
        Self { size, weights }
    }

    pub fn box_filter(size: usize) -> Self {
        assert!(size % 2 == 1, "kernel size must be odd");
        let w = T::one() / T::from_usize_lossy(size * size);
        Self { size, weights: vec![w; size * size] }
    }

    /// Sampled isotropic Gaussian, normalized over the support.
    pub fn gaussian(size: usize, sigma: f64) -> Self {
        assert!(size % 2 == 1, "kernel size must be odd");
        let r = (size / 2) as f64;
        let s2 = 2.0 * sigma * sigma;
        let raw: Vec<T> = (0..size * size)
            .map(|i| {
                let dy = (i / size) as f64 - r;
                let dx = (i % size) as f64 - r;
                T::lit((-(dx * dx + dy * dy) / s2).exp())
            })
            .collect();
        Self::normalized(size, raw).expect("gaussian has positive mass")
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.size / 2
    }

    #[inline]
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Weight at column `x`, row `y` of the support.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.weights[y * self.size + x]
    }

    /// Zero-pads (centered) to a larger odd size.
    pub fn padded_to(&self, size: usize) -> Self {
        assert!(size >= self.size && size % 2 == 1);
        let off = (size - self.size) / 2;
        let mut weights = vec![T::zero(); size * size];
        for y in 0..self.size {
            for x in 0..self.size {
                weights[(y + off) * size + x + off] = self.get(x, y);
            }
        }
        Self { size, weights }
    }

    /// Smallest odd centered window that holds all nonzero weights.
    pub fn trimmed(&self) -> Self {
        let r = self.radius() as isize;
        let mut reach = 0isize;
        for y in 0..self.size {
            for x in 0..self.size {
                if self.get(x, y) > T::zero() {
                    reach = reach.max((x as isize - r).abs()).max((y as isize - r).abs());
                }
            }
        }
        let size = 2 * reach as usize + 1;
        let off = (self.size - size) / 2;
        let weights = (0..size * size).map(|i| self.get(off + i % size, off + i / size)).collect();
        Self { size, weights }
    }

    /// Center of mass relative to the support center, as (x, y).
    pub fn center_of_mass(&self) -> (T, T) {
        let r = T::from_usize_lossy(self.radius());
        let mut cx = T::zero();
        let mut cy = T::zero();
        for y in 0..self.size {
            for x in 0..self.size {
                let w = self.get(x, y);
                cx = cx + w * T::from_usize_lossy(x);
                cy = cy + w * T::from_usize_lossy(y);
            }
        }
        (cx - r, cy - r)
    }

    /// Shannon entropy of the weights in nats.
    pub fn entropy(&self) -> T {
        self.weights.iter().filter(|w| **w > T::zero()).map(|&w| -w * w.ln()).sum()
    }

    pub fn as_image(&self) -> ImageBuffer<T> {
        ImageBuffer::from_raw_unchecked(self.size, self.size, self.weights.clone())
    }

    pub fn cast<U: Real>(&self) -> BlurKernel<U> {
        let w: Vec<U> = self.weights.iter().map(|v| U::lit(v.as_f64())).collect();
        BlurKernel::normalized(self.size, w).expect("cast preserves mass")
    }

    /// Plain-text form: header `h w`, then one row per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.size, self.size);
        for y in 0..self.size {
            let row: Vec<String> = (0..self.size).map(|x| format!("{:.12e}", self.get(x, y).as_f64())).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut next_usize = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {what}")))?
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
        };
        let h = next_usize("height")?;
        let w = next_usize("width")?;
        if h != w {
            return Err(Error::InvalidKernel(format!("kernel must be square, got {h}x{w}")));
        }
        let values: Vec<T> = text
            .split_whitespace()
            .skip(2)
            .map(|t| t.parse::<f64>().map(T::lit).map_err(|e| Error::Parse(format!("bad weight {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if values.len() != h * w {
            return Err(Error::Parse(format!("expected {} weights, found {}", h * w, values.len())));
        }
        Self::normalized(h, values)
    }
}

fn check_shape(size: usize, len: usize) -> Result<()> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::InvalidKernel(format!("size {size} is not odd")));
    }
    if len != size * size {
        return Err(Error::InvalidKernel(format!("expected {} weights, got {len}", size * size)));
    }
    Ok(())
}
