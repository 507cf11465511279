//! Synthetic degradations: blur plus additive Gaussian noise, and a
//! random-walk generator for camera-shake kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::{convolve2d, Boundary};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::kernel::BlurKernel;
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct SyntheticBlurSpec<T> {
    pub kernel: BlurKernel<T>,
    /// Standard deviation of the additive noise, in intensity units.
    pub noise_sigma: f64,
    pub seed: u64,
}

/// `convolve2d(x, k)` (replicate boundary) plus seeded white Gaussian noise.
pub fn synth_blur<T: Real>(x: &ImageBuffer<T>, spec: &SyntheticBlurSpec<T>) -> Result<ImageBuffer<T>> {
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
    }
    let mut out = convolve2d(x, &spec.kernel, Boundary::Replicate)?;
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for v in out.data_mut() {
            *v = *v + T::lit(normal.sample(&mut rng));
        }
    }
    Ok(out)
}

/// Camera-shake style kernel: a momentum random walk rasterized into a
/// `size`x`size` support and centered by its center of mass.
pub fn random_walk_kernel<T: Real>(size: usize, seed: u64) -> BlurKernel<T> {
    assert!(size % 2 == 1 && size >= 3, "kernel size must be odd and >= 3");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = 8 * size;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (mut vx, mut vy) = (angle.cos(), angle.sin());
    let (mut px, mut py) = (0.0f64, 0.0f64);
    let mut path = Vec::with_capacity(steps);
    for _ in 0..steps {
        path.push((px, py));
        vx += 0.35 * normal.sample(&mut rng);
        vy += 0.35 * normal.sample(&mut rng);
        // pull back towards the start so the path folds like real shake
        vx -= 0.02 * px;
        vy -= 0.02 * py;
        let n = (vx * vx + vy * vy).sqrt().max(1e-9);
        vx /= n;
        vy /= n;
        px += vx;
        py += vy;
    }
    let (min_x, max_x) = path.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (min_y, max_y) = path.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let extent = (max_x - min_x).max(max_y - min_y).max(1e-9);
    let target: f64 = rng.random_range(0.55..0.8) * (size as f64 - 3.0);
    let scale = target / extent;
    let mx = path.iter().map(|p| p.0).sum::<f64>() / path.len() as f64;
    let my = path.iter().map(|p| p.1).sum::<f64>() / path.len() as f64;
    let c = (size / 2) as f64;
    let mut w = vec![0.0f64; size * size];
    for &(x, y) in &path {
        let gx = (x - mx) * scale + c;
        let gy = (y - my) * scale + c;
        let x0 = gx.floor();
        let y0 = gy.floor();
        let (fx, fy) = (gx - x0, gy - y0);
        for (dx, dy, wt) in [(0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)), (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)] {
            let xi = x0 as isize + dx;
            let yi = y0 as isize + dy;
            if xi >= 0 && yi >= 0 && (xi as usize) < size && (yi as usize) < size {
                w[yi as usize * size + xi as usize] += wt;
            }
        }
    }
    BlurKernel::normalized(size, w.into_iter().map(T::lit).collect()).expect("walk deposits mass")
}
