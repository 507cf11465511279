//! 2D FFT plumbing over rustfft, plus transfer functions of the linear
//! operators used by the frequency-domain solvers.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::gradient::Direction;
use crate::image::ImageBuffer;
use crate::kernel::BlurKernel;
use crate::scalar::Real;

/// Forward/inverse 2D transforms for a fixed `width` x `height` grid.
pub struct Fft2d<T: Real> {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> Fft2d<T> {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn run(&self, buf: &mut [Complex<T>], rows: &Arc<dyn Fft<T>>, cols: &Arc<dyn Fft<T>>) {
        debug_assert_eq!(buf.len(), self.len());
        rows.process(buf);
        let mut t = transpose(buf, self.width, self.height);
        cols.process(&mut t);
        let back = transpose(&t, self.height, self.width);
        buf.copy_from_slice(&back);
    }

    pub fn forward_in_place(&self, buf: &mut [Complex<T>]) {
        self.run(buf, &self.row_fwd, &self.col_fwd);
    }

    /// Unnormalized inverse transform.
    pub fn inverse_in_place(&self, buf: &mut [Complex<T>]) {
        self.run(buf, &self.row_inv, &self.col_inv);
    }

    pub fn forward_real(&self, data: &[T]) -> Vec<Complex<T>> {
        let mut buf: Vec<Complex<T>> = data.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.forward_in_place(&mut buf);
        buf
    }

    pub fn forward(&self, img: &ImageBuffer<T>) -> Vec<Complex<T>> {
        assert_eq!(img.dims(), self.dims(), "image does not match transform size");
        self.forward_real(img.data())
    }

    /// Inverse transform, returning the (normalized) real part.
    pub fn inverse_real(&self, mut spec: Vec<Complex<T>>) -> Vec<T> {
        self.inverse_in_place(&mut spec);
        let scale = T::one() / T::from_usize_lossy(self.len());
        spec.into_iter().map(|c| c.re * scale).collect()
    }

    pub fn inverse_image(&self, spec: Vec<Complex<T>>) -> ImageBuffer<T> {
        ImageBuffer::from_raw_unchecked(self.width, self.height, self.inverse_real(spec))
    }

    /// Transfer function of circular convolution with `k`, origin at the kernel center.
    pub fn kernel_otf(&self, k: &BlurKernel<T>) -> Vec<Complex<T>> {
        self.forward_real(&centered_to_origin(k.weights(), k.size(), self.width, self.height))
    }

    /// Transfer function of a forward-difference derivative.
    pub fn derivative_otf(&self, dir: Direction) -> Vec<Complex<T>> {
        let ex = exp_minus_one(self.width);
        let ey = exp_minus_one(self.height);
        let mut out = Vec::with_capacity(self.len());
        for v in 0..self.height {
            for u in 0..self.width {
                let dx = ex[u];
                let dy = ey[v];
                out.push(match dir {
                    Direction::X => dx,
                    Direction::Y => dy,
                    Direction::XX => dx * dx,
                    Direction::YY => dy * dy,
                    Direction::XY => dx * dy,
                });
            }
        }
        out
    }
}

/// `exp(2*pi*i*u/n) - 1`, the DFT symbol of `x[n+1] - x[n]`.
fn exp_minus_one<T: Real>(n: usize) -> Vec<Complex<T>> {
    (0..n)
        .map(|u| {
            let a = 2.0 * std::f64::consts::PI * u as f64 / n as f64;
            Complex::new(T::lit(a.cos() - 1.0), T::lit(a.sin()))
        })
        .collect()
}

fn transpose<T: Copy>(src: &[T], width: usize, height: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for x in 0..width {
        for y in 0..height {
            out.push(src[y * width + x]);
        }
    }
    out
}

/// Places a centered `size`x`size` stencil onto a `width`x`height` grid with its
/// center at index (0, 0), wrapping negative offsets.
pub fn centered_to_origin<T: Real>(weights: &[T], size: usize, width: usize, height: usize) -> Vec<T> {
    let r = (size / 2) as isize;
    let mut out = vec![T::zero(); width * height];
    for ky in 0..size {
        for kx in 0..size {
            let x = (kx as isize - r).rem_euclid(width as isize) as usize;
            let y = (ky as isize - r).rem_euclid(height as isize) as usize;
            out[y * width + x] = out[y * width + x] + weights[ky * size + kx];
        }
    }
    out
}

/// Inverse of [`centered_to_origin`]: reads a `size`x`size` window around the origin.
pub fn crop_around_origin<T: Real>(field: &[T], width: usize, height: usize, size: usize) -> Vec<T> {
    let r = (size / 2) as isize;
    let mut out = Vec::with_capacity(size * size);
    for ky in 0..size {
        for kx in 0..size {
            let x = (kx as isize - r).rem_euclid(width as isize) as usize;
            let y = (ky as isize - r).rem_euclid(height as isize) as usize;
            out.push(field[y * width + x]);
        }
    }
    out
}

/// Smallest integer `>= n` whose only prime factors are 2, 3 and 5.
pub fn next_fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let f = Fft2d::<f64>::new(6, 5);
        let data: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let back = f.inverse_real(f.forward_real(&data));
        for (a, b) in data.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_len() {
        assert_eq!(next_fast_len(7), 8);
        assert_eq!(next_fast_len(97), 100);
        assert_eq!(next_fast_len(125), 125);
    }

    #[test]
    fn origin_placement_inverts() {
        let w: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let field = centered_to_origin(&w, 3, 8, 7);
        assert_eq!(field[0], 4.0);
        assert_eq!(field[7 * 8 - 1], 0.0);
        assert_eq!(crop_around_origin(&field, 8, 7, 3), w);
    }
}
