//! Anti-aliased image pyramid and the kernel down-sampling law.
//!
//! Down-sampling a blurred image by `alpha` shrinks the kernel support by
//! `alpha` per axis (`k_alpha(u, v) = alpha^2 k(alpha u, alpha v)`), so a deep
//! enough level is blurred by an (approximate) delta. The schedule descends
//! in steps of `beta` until the kernel collapses to a single pixel.

use serde::{Deserialize, Serialize};

use crate::conv::gaussian_blur_xy;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::kernel::BlurKernel;
use crate::scalar::Real;

/// One rung of the pyramid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleLevel {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub kernel_size: usize,
    /// Ratio of finest-scale size to this level's size (`beta^(n - level)`).
    pub factor: f64,
}

/// Levels ordered coarsest to finest.
///
/// `levels[0]` is the prior level, whose kernel is a delta; the pipeline
/// restores `levels[1..]`, so `n_levels == levels.len() - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    pub beta: f64,
    pub n_levels: usize,
    pub levels: Vec<ScaleLevel>,
}

impl ScaleSchedule {
    pub fn finest(&self) -> &ScaleLevel {
        self.levels.last().expect("schedule is never empty")
    }

    pub fn coarsest(&self) -> &ScaleLevel {
        &self.levels[0]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}

/// Number of `beta` steps until `kernel_size / beta^n <= 1`.
pub fn levels_for_kernel(kernel_size: usize, beta: f64) -> usize {
    if kernel_size <= 1 {
        return 0;
    }
    ((kernel_size as f64).ln() / beta.ln() - 1e-9).ceil() as usize
}

fn odd_at_least(v: f64) -> usize {
    let s = (v - 1e-9).ceil().max(1.0) as usize;
    if s.is_multiple_of(2) {
        s + 1
    } else {
        s
    }
}

fn largest_odd_at_most(n: usize) -> usize {
    if n % 2 == 1 {
        n
    } else {
        n.saturating_sub(1).max(1)
    }
}

/// Plans the pyramid for an image of `width`x`height` and a `kernel_size` blur.
///
/// Level sizes are chained: each coarser level is `round(previous / beta)`.
pub fn build_schedule(width: usize, height: usize, kernel_size: usize, beta: f64, min_coarse_dim: usize) -> Result<ScaleSchedule> {
    if kernel_size == 0 || kernel_size.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("kernel size {kernel_size} must be odd")));
    }
    if !(beta > 1.0) {
        return Err(Error::InvalidConfig(format!("beta must be > 1, got {beta}")));
    }
    if kernel_size > width.min(height) {
        return Err(Error::KernelExceedsImage { kernel: kernel_size, width, height });
    }
    let n = levels_for_kernel(kernel_size, beta);
    let mut dims = vec![(width, height); n + 1];
    for level in (0..n).rev() {
        let (w, h) = dims[level + 1];
        dims[level] = (((w as f64 / beta).round() as usize).max(1), ((h as f64 / beta).round() as usize).max(1));
    }
    let (cw, ch) = dims[0];
    if n > 0 && cw.min(ch) < min_coarse_dim.max(2) {
        return Err(Error::InsufficientResolution { kernel_size, width: cw, height: ch });
    }
    let levels = dims
        .iter()
        .enumerate()
        .map(|(level, &(w, h))| {
            let factor = beta.powi((n - level) as i32);
            let kernel_size = if level == 0 { 1 } else { odd_at_least(kernel_size as f64 / factor).min(largest_odd_at_most(w.min(h))) };
            ScaleLevel { level, width: w, height: h, kernel_size, factor }
        })
        .collect();
    Ok(ScaleSchedule { beta, n_levels: n, levels })
}

/// Standard deviation of the anti-alias Gaussian for a given reduction factor.
pub fn antialias_sigma(factor: f64) -> f64 {
    if factor <= 1.0 {
        0.0
    } else {
        0.8 * (factor * factor - 1.0).sqrt()
    }
}

/// Gaussian pre-filter followed by bilinear sampling onto a `width`x`height` grid.
pub fn resample_to<T: Real>(img: &ImageBuffer<T>, width: usize, height: usize) -> Result<ImageBuffer<T>> {
    if width < 2 || height < 2 {
        return Err(Error::DegenerateOutput { width, height });
    }
    if (width, height) == img.dims() {
        return Ok(img.clone());
    }
    let fx = img.width() as f64 / width as f64;
    let fy = img.height() as f64 / height as f64;
    let smooth = gaussian_blur_xy(img, antialias_sigma(fx), antialias_sigma(fy));
    Ok(bilinear_resample(&smooth, width, height))
}

/// Bilinear sampling at pixel-center-aligned positions, no pre-filter.
pub fn bilinear_resample<T: Real>(img: &ImageBuffer<T>, width: usize, height: usize) -> ImageBuffer<T> {
    let fx = img.width() as f64 / width as f64;
    let fy = img.height() as f64 / height as f64;
    ImageBuffer::from_fn(width, height, |x, y| {
        let sx = ((x as f64 + 0.5) * fx - 0.5).max(0.0);
        let sy = ((y as f64 + 0.5) * fy - 0.5).max(0.0);
        sample_bilinear(img, sx, sy)
    })
}

/// Bilinear interpolation with replicate-edge clamping.
#[inline]
pub fn sample_bilinear<T: Real>(img: &ImageBuffer<T>, x: f64, y: f64) -> T {
    let x0 = x.floor();
    let y0 = y.floor();
    let tx = T::lit(x - x0);
    let ty = T::lit(y - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    let a = img.get_clamped(xi, yi);
    let b = img.get_clamped(xi + 1, yi);
    let c = img.get_clamped(xi, yi + 1);
    let d = img.get_clamped(xi + 1, yi + 1);
    let one = T::one();
    (a * (one - tx) + b * tx) * (one - ty) + (c * (one - tx) + d * tx) * ty
}

/// Reduces `img` by `factor` (output `round(input / factor)` per axis).
pub fn lowpass_downsample<T: Real>(img: &ImageBuffer<T>, factor: f64) -> Result<ImageBuffer<T>> {
    if !(factor >= 1.0) {
        return Err(Error::InvalidConfig(format!("down-sampling factor {factor} < 1")));
    }
    let w = (img.width() as f64 / factor).round() as usize;
    let h = (img.height() as f64 / factor).round() as usize;
    resample_to(img, w, h)
}

/// Builds the blurred-image pyramid for a schedule, finest first then chained coarser.
pub fn build_image_pyramid<T: Real>(img: &ImageBuffer<T>, schedule: &ScaleSchedule) -> Result<Vec<ImageBuffer<T>>> {
    let mut out = vec![img.clone(); schedule.levels.len()];
    for level in (0..schedule.levels.len() - 1).rev() {
        let l = &schedule.levels[level];
        out[level] = resample_to(&out[level + 1], l.width, l.height)?;
    }
    Ok(out)
}

/// Length of overlap between pixel `[i - 1/2, i + 1/2]` and cell `[a, b]`.
#[inline]
fn overlap(i: f64, a: f64, b: f64) -> f64 {
    ((i + 0.5).min(b) - (i - 0.5).max(a)).max(0.0)
}

/// Discrete `k_alpha(u, v) = alpha^2 k(alpha u, alpha v)`: area-weighted binning
/// of the kernel onto a grid `alpha` times coarser, then renormalized.
pub fn downsample_kernel<T: Real>(k: &BlurKernel<T>, alpha: f64) -> BlurKernel<T> {
    let alpha = alpha.max(1.0);
    let h = k.size();
    let n = odd_at_least(h as f64 / alpha);
    let r_in = (h / 2) as f64;
    let m = (n / 2) as isize;
    // separable overlap matrix: rows = output cells, cols = input pixels
    let weights: Vec<Vec<f64>> = (-m..=m)
        .map(|u| {
            let a = alpha * (u as f64 - 0.5);
            let b = alpha * (u as f64 + 0.5);
            (0..h).map(|i| overlap(i as f64 - r_in, a, b)).collect()
        })
        .collect();
    let mut out = vec![T::zero(); n * n];
    for (oy, wy) in weights.iter().enumerate() {
        for (ox, wx) in weights.iter().enumerate() {
            let mut s = 0.0;
            for (iy, &ay) in wy.iter().enumerate() {
                if ay == 0.0 {
                    continue;
                }
                for (ix, &ax) in wx.iter().enumerate() {
                    if ax != 0.0 {
                        s += ay * ax * k.get(ix, iy).as_f64();
                    }
                }
            }
            out[oy * n + ox] = T::lit(s);
        }
    }
    BlurKernel::normalized(n, out).expect("binning preserves mass")
}

/// L1 distance between `k` and a centered delta.
pub fn delta_distance<T: Real>(k: &BlurKernel<T>) -> T {
    let c = k.size() * k.size() / 2;
    k.weights().iter().enumerate().map(|(i, &w)| if i == c { (w - T::one()).abs() } else { w.abs() }).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_counts() {
        let beta = 3f64.log2();
        // ceil(ln 27 / ln beta) = ceil(7.16)
        let s = build_schedule(1024, 768, 27, beta, 5).unwrap();
        assert_eq!(s.n_levels, 8);
        // ceil(ln 51 / ln beta) = ceil(8.54)
        assert_eq!(build_schedule(1024, 768, 51, beta, 5).unwrap().n_levels, 9);
        let single = build_schedule(300, 200, 1, beta, 5).unwrap();
        assert_eq!(single.levels.len(), 1);
        assert_eq!(single.n_levels, 0);
    }

    #[test]
    fn schedule_invariants() {
        let s = build_schedule(1024, 768, 27, 3f64.log2(), 5).unwrap();
        assert_eq!(s.coarsest().kernel_size, 1);
        assert_eq!(s.finest().kernel_size, 27);
        assert_eq!((s.finest().width, s.finest().height), (1024, 768));
        for pair in s.levels.windows(2) {
            assert!(pair[0].kernel_size <= pair[1].kernel_size);
            assert!(pair[1].kernel_size % 2 == 1);
        }
        // chained rounding lands exactly on 20 rows at the prior level
        assert_eq!(s.coarsest().height, 20);
    }

    #[test]
    fn too_small_errors() {
        let err = build_schedule(40, 30, 27, 3f64.log2(), 5).unwrap_err();
        assert!(err.to_string().contains("insufficient resolution for kernel size"));
    }

    #[test]
    fn downsample_constant_and_identity() {
        let img = ImageBuffer::<f64>::filled(50, 40, 0.7);
        let d = lowpass_downsample(&img, 2.5).unwrap();
        assert_eq!(d.dims(), (20, 16));
        assert!(d.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        let ramp = ImageBuffer::<f64>::from_fn(30, 20, |x, y| (x * y) as f64 / 600.0);
        assert_eq!(lowpass_downsample(&ramp, 1.0).unwrap(), ramp);
        assert!(lowpass_downsample(&ramp, 20.0).is_err());
    }

    #[test]
    fn checkerboard_is_suppressed() {
        // the sigma = 0.8*sqrt(3) Gaussian attenuates the Nyquist frequency by exp(-sigma^2 pi^2 / 2) ~ 0.009
        let cb = ImageBuffer::<f64>::from_fn(64, 64, |x, y| ((x + y) % 2) as f64);
        let d = lowpass_downsample(&cb, 2.0).unwrap();
        let dev = d.data().iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max);
        assert!(dev <= 0.1, "max deviation {dev}");
    }

    #[test]
    fn kernel_law_fixed_points() {
        let d = BlurKernel::<f64>::identity(7);
        assert_eq!(delta_distance(&downsample_kernel(&d, 3.3)), 0.0);
        let g = BlurKernel::<f64>::gaussian(9, 2.0);
        let collapsed = downsample_kernel(&g, 9.0);
        assert_eq!(collapsed.size(), 1);
        assert_eq!(collapsed.weights(), &[1.0]);
        let same = downsample_kernel(&g, 1.0);
        assert!(same.weights().iter().zip(g.weights()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    /// Gaussian integrated over unit pixel cells (Simpson rule per axis).
    fn integrated_gaussian(size: usize, sigma: f64) -> Vec<f64> {
        let r = (size / 2) as f64;
        let pdf = |t: f64| (-t * t / (2.0 * sigma * sigma)).exp();
        let cell = |c: f64| {
            let n = 64;
            let h = 1.0 / n as f64;
            (0..=n)
                .map(|i| {
                    let w = if i == 0 || i == n {
                        1.0
                    } else if i % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    w * pdf(c - 0.5 + i as f64 * h)
                })
                .sum::<f64>()
                * h
                / 3.0
        };
        let axis: Vec<f64> = (0..size).map(|i| cell(i as f64 - r)).collect();
        let mut out: Vec<f64> = (0..size * size).map(|i| axis[i / size] * axis[i % size]).collect();
        let s: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= s);
        out
    }

    #[test]
    fn gaussian_scaling_law() {
        // k_alpha of a sigma=2 Gaussian at alpha=2 is a sigma=1 Gaussian; both sides discretized
        // by integrating over pixel cells
        let k = BlurKernel::<f64>::new(13, integrated_gaussian(13, 2.0)).unwrap();
        let d = downsample_kernel(&k, 2.0);
        assert_eq!(d.size(), 7);
        let reference = integrated_gaussian(7, 1.0);
        let l1: f64 = d.weights().iter().zip(&reference).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 <= 0.05, "L1 {l1}");
    }

    #[test]
    fn delta_distance_values() {
        assert_eq!(delta_distance(&BlurKernel::<f64>::delta()), 0.0);
        assert!((delta_distance(&BlurKernel::<f64>::box_filter(3)) - 16.0 / 9.0).abs() < 1e-12);
    }
}
