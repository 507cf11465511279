//! Edge-preserving guided filter.

use crate::conv::box_mean;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scalar::Real;

/// Filters `img` with a local linear model of `guide` over `(2r+1)^2` windows.
///
/// `a = cov(guide, img) / (var(guide) + eps)`, `c = mean(img) - a mean(guide)`,
/// output `= mean(a) guide + mean(c)`.
pub fn guided_filter<T: Real>(img: &ImageBuffer<T>, guide: &ImageBuffer<T>, radius: usize, eps: f64) -> Result<ImageBuffer<T>> {
    img.ensure_same_shape(guide)?;
    if img.channels() != 1 {
        return Err(Error::InvalidImage("guided filter expects a single channel".into()));
    }
    if radius == 0 || !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("guided filter needs radius >= 1 and eps > 0, got {radius}, {eps}")));
    }
    let eps = T::lit(eps);
    let mean_i = box_mean(guide, radius);
    let mean_p = box_mean(img, radius);
    let corr_ip = box_mean(&guide.zip_map(img, |a, b| a * b)?, radius);
    let corr_ii = box_mean(&guide.map(|a| a * a), radius);
    let n = img.len();
    let mut a = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for i in 0..n {
        let (mi, mp) = (mean_i.data()[i], mean_p.data()[i]);
        let var = (corr_ii.data()[i] - mi * mi).max(T::zero());
        let cov = corr_ip.data()[i] - mi * mp;
        let ai = cov / (var + eps);
        a.push(ai);
        c.push(mp - ai * mi);
    }
    let (w, h) = img.dims();
    let mean_a = box_mean(&ImageBuffer::from_raw_unchecked(w, h, a), radius);
    let mean_c = box_mean(&ImageBuffer::from_raw_unchecked(w, h, c), radius);
    Ok(ImageBuffer::from_fn(w, h, |x, y| mean_a.get(x, y) * guide.get(x, y) + mean_c.get(x, y)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_fixed_point() {
        let img = ImageBuffer::<f64>::filled(20, 16, 0.42);
        let out = guided_filter(&img, &img, 3, 1e-4).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn large_eps_is_box_smoothing() {
        let img = ImageBuffer::<f64>::from_fn(24, 24, |x, y| ((x * 5 + y * 3) % 11) as f64 / 11.0);
        let out = guided_filter(&img, &img, 2, 1e12).unwrap();
        let oracle = box_mean(&box_mean(&img, 2), 2);
        for (a, b) in out.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn step_edge_preserved() {
        let img = ImageBuffer::<f64>::from_fn(40, 20, |x, _| if x < 20 { 0.2 } else { 0.8 });
        let out = guided_filter(&img, &img, 4, 1e-4).unwrap();
        let max_grad = |im: &ImageBuffer<f64>| (0..39).map(|x| (im.get(x + 1, 10) - im.get(x, 10)).abs()).fold(0.0, f64::max);
        assert!(max_grad(&out) >= 0.8 * max_grad(&img));
    }
}
