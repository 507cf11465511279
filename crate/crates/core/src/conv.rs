//! Spatial convolution, boundary handling and the small separable filters used
//! by the pyramid and the guided filter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{next_fast_len, Fft2d};
use crate::image::ImageBuffer;
use crate::kernel::BlurKernel;
use crate::scalar::Real;

/// How samples outside the image are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Clamp coordinates to the nearest edge pixel.
    Replicate,
    /// Wrap around, after blending the border towards its blurred version.
    PeriodicTaper,
    /// Plain wrap-around with no taper.
    Periodic,
}

/// Above this support the replicate-edge path switches to an FFT product on a padded grid.
const SPATIAL_LIMIT: usize = 15;

/// Convolves a single-channel image with `k`: `out(p) = sum_m k(m) img(p - m)`.
pub fn convolve2d<T: Real>(img: &ImageBuffer<T>, k: &BlurKernel<T>, boundary: Boundary) -> Result<ImageBuffer<T>> {
    check_support(img, k)?;
    match boundary {
        Boundary::Replicate if k.size() > SPATIAL_LIMIT => {
            let r = k.radius();
            let padded = img.pad_replicate(r, r, r, r);
            let full = convolve_circular_fft(&padded, k);
            full.crop(r, r, img.width(), img.height())
        }
        Boundary::Replicate => Ok(convolve_spatial(img, k, |x, y| img.get_clamped(x, y))),
        Boundary::Periodic => Ok(convolve_spatial(img, k, |x, y| img.get_wrapped(x, y))),
        Boundary::PeriodicTaper => {
            let tapered = edge_taper(img, k.size())?;
            Ok(convolve_spatial(&tapered, k, |x, y| tapered.get_wrapped(x, y)))
        }
    }
}

fn check_support<T: Real>(img: &ImageBuffer<T>, k: &BlurKernel<T>) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::InvalidImage("convolution expects a single channel".into()));
    }
    if k.size() > img.width() || k.size() > img.height() {
        return Err(Error::KernelExceedsImage { kernel: k.size(), width: img.width(), height: img.height() });
    }
    Ok(())
}

fn convolve_spatial<T: Real>(img: &ImageBuffer<T>, k: &BlurKernel<T>, sample: impl Fn(isize, isize) -> T) -> ImageBuffer<T> {
    let r = k.radius() as isize;
    let s = k.size();
    let taps: Vec<(isize, isize, T)> = (0..s * s)
        .filter_map(|i| {
            let w = k.weights()[i];
            (w != T::zero()).then(|| ((i % s) as isize - r, (i / s) as isize - r, w))
        })
        .collect();
    ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        taps.iter().fold(T::zero(), |acc, &(dx, dy, w)| acc + w * sample(x - dx, y - dy))
    })
}

/// Circular convolution computed as a spectral product.
pub fn convolve_circular_fft<T: Real>(img: &ImageBuffer<T>, k: &BlurKernel<T>) -> ImageBuffer<T> {
    let fft = Fft2d::new(img.width(), img.height());
    let kf = fft.kernel_otf(k);
    let mut xf = fft.forward(img);
    for (a, b) in xf.iter_mut().zip(&kf) {
        *a = *a * *b;
    }
    fft.inverse_image(xf)
}

/// Raised-cosine weight that is 0 at the border and 1 at distance `>= width` from it.
fn taper_profile(n: usize, width: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let d = i.min(n - 1 - i) as f64 + 0.5;
            let t = (d / width.max(1) as f64).min(1.0);
            (0.5 * std::f64::consts::PI * t).sin().powi(2)
        })
        .collect()
}

/// Blends the image border towards a circularly blurred copy so that the
/// periodic extension has no jump. Pixels farther than `width` from every
/// edge are left untouched.
pub fn edge_taper<T: Real>(img: &ImageBuffer<T>, width: usize) -> Result<ImageBuffer<T>> {
    let width = width.max(1);
    let blur_size = (width | 1).min(odd_floor(img.width().min(img.height())));
    let blurred = convolve_circular_fft(img, &BlurKernel::gaussian(blur_size, blur_size as f64 / 4.0));
    let ax = taper_profile(img.width(), width);
    let ay = taper_profile(img.height(), width);
    Ok(ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
        let a = T::lit(ax[x] * ay[y]);
        a * img.get(x, y) + (T::one() - a) * blurred.get(x, y)
    }))
}

fn odd_floor(n: usize) -> usize {
    if n % 2 == 1 {
        n
    } else {
        n.saturating_sub(1).max(1)
    }
}

/// Replicate-pads by `margin`, rounds the padded size up to an FFT-friendly
/// length and tapers the result. Returns the padded buffer and the offset of
/// the original image inside it.
pub fn pad_for_fft<T: Real>(img: &ImageBuffer<T>, margin: usize, taper: usize) -> Result<(ImageBuffer<T>, usize, usize)> {
    let w = next_fast_len(img.width() + 2 * margin);
    let h = next_fast_len(img.height() + 2 * margin);
    let left = (w - img.width()) / 2;
    let top = (h - img.height()) / 2;
    let padded = img.pad_replicate(left, top, w - img.width() - left, h - img.height() - top);
    Ok((edge_taper(&padded, taper)?, left, top))
}

fn gaussian_taps<T: Real>(sigma: f64) -> (isize, Vec<T>) {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    (r, raw.into_iter().map(|v| T::lit(v / s)).collect())
}

/// Separable Gaussian blur with replicate-edge boundary and per-axis sigma.
pub fn gaussian_blur_xy<T: Real>(img: &ImageBuffer<T>, sigma_x: f64, sigma_y: f64) -> ImageBuffer<T> {
    let mut out = img.clone();
    if sigma_x > 0.0 {
        let (r, taps) = gaussian_taps::<T>(sigma_x);
        let src = out;
        out = ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
            taps.iter().enumerate().fold(T::zero(), |acc, (i, &w)| acc + w * src.get_clamped(x as isize + i as isize - r, y as isize))
        });
    }
    if sigma_y > 0.0 {
        let (r, taps) = gaussian_taps::<T>(sigma_y);
        let src = out;
        out = ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
            taps.iter().enumerate().fold(T::zero(), |acc, (i, &w)| acc + w * src.get_clamped(x as isize, y as isize + i as isize - r))
        });
    }
    out
}

/// Isotropic [`gaussian_blur_xy`].
pub fn gaussian_blur<T: Real>(img: &ImageBuffer<T>, sigma: f64) -> ImageBuffer<T> {
    gaussian_blur_xy(img, sigma, sigma)
}

/// Mean over the `(2r+1)^2` window around each pixel, clipped to the image.
pub fn box_mean<T: Real>(img: &ImageBuffer<T>, radius: usize) -> ImageBuffer<T> {
    let (w, h) = img.dims();
    // integral image with a zero row/column in front
    let mut integral = vec![T::zero(); (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = T::zero();
        for x in 0..w {
            row = row + img.get(x, y);
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    ImageBuffer::from_fn(w, h, |x, y| {
        let x0 = x.saturating_sub(radius);
        let y0 = y.saturating_sub(radius);
        let x1 = (x + radius + 1).min(w);
        let y1 = (y + radius + 1).min(h);
        let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0] + integral[y0 * (w + 1) + x0];
        s / T::from_usize_lossy((x1 - x0) * (y1 - y0))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> ImageBuffer<f64> {
        ImageBuffer::from_fn(w, h, |x, y| ((x * 7 + y * 13) % 17) as f64 / 17.0)
    }

    #[test]
    fn identity_kernel() {
        let img = ramp(9, 8);
        for b in [Boundary::Replicate, Boundary::Periodic] {
            assert_eq!(convolve2d(&img, &BlurKernel::delta(), b).unwrap(), img);
        }
    }

    #[test]
    fn constant_preserved() {
        let img = ImageBuffer::<f64>::filled(20, 20, 0.3);
        let k = BlurKernel::gaussian(7, 1.5);
        for b in [Boundary::Replicate, Boundary::Periodic, Boundary::PeriodicTaper] {
            let out = convolve2d(&img, &k, b).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        }
    }

    #[test]
    fn impulse_box_plateau() {
        // direct summation oracle: the impulse spreads uniformly over its 3x3 neighbourhood
        let mut img = ImageBuffer::<f64>::zeros(11, 11);
        img.set(5, 5, 1.0);
        let out = convolve2d(&img, &BlurKernel::box_filter(3), Boundary::Replicate).unwrap();
        for y in 0..11 {
            for x in 0..11 {
                let expected = if (4..=6).contains(&x) && (4..=6).contains(&y) { 1.0 / 9.0 } else { 0.0 };
                assert!((out.get(x, y) - expected).abs() < 1e-15, "({x},{y})");
            }
        }
    }

    #[test]
    fn kernel_too_large() {
        let img = ImageBuffer::<f64>::zeros(5, 9);
        let err = convolve2d(&img, &BlurKernel::box_filter(7), Boundary::Replicate).unwrap_err();
        assert!(err.to_string().contains("kernel exceeds image support"));
    }

    #[test]
    fn large_kernel_fft_path_matches_spatial() {
        let img = ramp(40, 36);
        let k = BlurKernel::gaussian(17, 3.0);
        let fast = convolve2d(&img, &k, Boundary::Replicate).unwrap();
        let slow = convolve_spatial(&img, &k, |x, y| img.get_clamped(x, y));
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn taper_leaves_interior() {
        let img = ramp(40, 30);
        let t = edge_taper(&img, 5).unwrap();
        for y in 5..25 {
            for x in 5..35 {
                assert_eq!(t.get(x, y), img.get(x, y));
            }
        }
        assert_ne!(t.get(0, 0), img.get(0, 0));
    }

    #[test]
    fn box_mean_clips_window() {
        let img = ramp(6, 5);
        let m = box_mean(&img, 1);
        let expected = (img.get(0, 0) + img.get(1, 0) + img.get(0, 1) + img.get(1, 1)) / 4.0;
        assert!((m.get(0, 0) - expected).abs() < 1e-14);
    }
}
