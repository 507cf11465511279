//! Spatially varying blur as a weighted sum of projective warps of the sharp
//! image, `b = sum_i k_i H_i x`.
//!
//! The kernel weights are found by a Krylov solve of the regularized normal
//! equations (the blur is applied matrix-free through warps of the gradient
//! images), and the latent image by TV-ADMM whose x-update is solved the same
//! way, since the warp sum is no longer diagonal in the Fourier domain.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{AdmmConfig, DeblurConfig, PoseConfig, PostprocessConfig};
use crate::conv::{edge_taper, pad_for_fft, Boundary};
use crate::error::{Error, Result};
use crate::fft::Fft2d;
use crate::gradient::{derivative, derivative_adjoint, Direction};
use crate::image::ImageBuffer;
use crate::kernel::BlurKernel;
use crate::kernelest::{
    centering_shift, estimate_kernel, prune_components, shift_window, soft_threshold, CompensationField, KernelSolveParams,
};
use crate::nonblind::{run_admm, AdmmTrace};
use crate::pipeline::{blind_deblur_with, BlurModel, DeblurOutput, LevelContext, RunOptions};
use crate::scalar::Real;

/// Relative residual target of the weight solve.
pub const CG_TOLERANCE: f64 = 1e-5;
/// Iteration cap of the weight solve.
pub const CG_MAX_ITERATIONS: usize = 50;
/// A weight solve that ends above this relative residual counts as stagnated.
const STAGNATION: f64 = 0.5;
/// Sample positions this close to a pixel center snap onto it.
const SNAP: f64 = 1e-9;
/// Poses warped concurrently when nothing is cached.
const CHUNK: usize = 32;

/// How warps sample outside the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum WarpBorder {
    Replicate,
    Wrap,
}

fn axis_taps(q: f64, n: usize, border: WarpBorder) -> [(usize, f64); 2] {
    let mut f = q.floor();
    let mut t = q - f;
    if t < SNAP {
        t = 0.0;
    } else if t > 1.0 - SNAP {
        f += 1.0;
        t = 0.0;
    }
    let i0 = f as isize;
    let n = n as isize;
    let map = |i: isize| match border {
        WarpBorder::Replicate => i.clamp(0, n - 1) as usize,
        WarpBorder::Wrap => i.rem_euclid(n) as usize,
    };
    [(map(i0), 1.0 - t), (map(i0 + 1), t)]
}

/// Bilinear taps `(index, weight)` of the source position `hinv * (x, y, 1)`.
fn source_taps(hinv: &Matrix3<f64>, x: usize, y: usize, w: usize, h: usize, border: WarpBorder) -> [(usize, f64); 4] {
    let v = hinv * Vector3::new(x as f64, y as f64, 1.0);
    let [(x0, a0), (x1, a1)] = axis_taps(v.x / v.z, w, border);
    let [(y0, b0), (y1, b1)] = axis_taps(v.y / v.z, h, border);
    [(y0 * w + x0, a0 * b0), (y0 * w + x1, a1 * b0), (y1 * w + x0, a0 * b1), (y1 * w + x1, a1 * b1)]
}

fn warp_inv<T: Real>(img: &ImageBuffer<T>, hinv: &Matrix3<f64>, border: WarpBorder) -> ImageBuffer<T> {
    let (w, h) = img.dims();
    let src = img.data();
    ImageBuffer::from_fn(w, h, |x, y| {
        source_taps(hinv, x, y, w, h, border).iter().filter(|t| t.1 != 0.0).fold(T::zero(), |acc, &(i, c)| acc + src[i] * T::lit(c))
    })
}

fn warp_inv_adjoint<T: Real>(img: &ImageBuffer<T>, hinv: &Matrix3<f64>, border: WarpBorder) -> ImageBuffer<T> {
    let (w, h) = img.dims();
    let mut out = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let v = img.get(x, y);
            for (i, c) in source_taps(hinv, x, y, w, h, border) {
                if c != 0.0 {
                    out[i] = out[i] + v * T::lit(c);
                }
            }
        }
    }
    ImageBuffer::from_raw_unchecked(w, h, out)
}

fn invert(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    m.try_inverse().ok_or_else(|| Error::InvalidConfig("singular homography".into()))
}

/// `out(p) = img(H^-1 p)`, bilinear.
pub fn warp<T: Real>(img: &ImageBuffer<T>, homography: &Matrix3<f64>, border: WarpBorder) -> Result<ImageBuffer<T>> {
    Ok(warp_inv(img, &invert(homography)?, border))
}

/// Exact adjoint of [`warp`] for the same homography and border.
pub fn warp_adjoint<T: Real>(img: &ImageBuffer<T>, homography: &Matrix3<f64>, border: WarpBorder) -> Result<ImageBuffer<T>> {
    Ok(warp_inv_adjoint(img, &invert(homography)?, border))
}

/// One camera pose: rotation about the image center followed by a translation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Pose {
    pub rotation_deg: f64,
    pub tx: f64,
    pub ty: f64,
    /// Row-major homography from sharp to blurred coordinates.
    pub matrix: [[f64; 3]; 3],
}

fn to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
}

fn from_rows(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2])
}

fn translation(dx: f64, dy: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0)
}

/// Ordered set of homographies `H_i` on a `width`x`height` domain.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseBasis {
    width: usize,
    height: usize,
    poses: Vec<Pose>,
    matrices: Vec<Matrix3<f64>>,
    inverses: Vec<Matrix3<f64>>,
    identity: usize,
    /// `(rotations, radius)` for bases laid out by [`PoseBasis::grid`].
    grid: Option<(usize, usize)>,
}

impl PoseBasis {
    /// Basis from explicit homographies; one of them must be the identity.
    pub fn from_matrices(width: usize, height: usize, matrices: Vec<Matrix3<f64>>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage);
        }
        let identity = matrices
            .iter()
            .position(|m| (m - Matrix3::identity()).abs().max() < 1e-12)
            .ok_or_else(|| Error::InvalidConfig("pose basis must contain the identity".into()))?;
        let inverses = matrices.iter().map(invert).collect::<Result<Vec<_>>>()?;
        let c = Vector3::new((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, 1.0);
        let poses = matrices
            .iter()
            .map(|m| {
                let q = m * c;
                Pose { rotation_deg: m[(1, 0)].atan2(m[(0, 0)]).to_degrees(), tx: q.x / q.z - c.x, ty: q.y / q.z - c.y, matrix: to_rows(m) }
            })
            .collect();
        Ok(Self { width, height, poses, matrices, inverses, identity, grid: None })
    }

    /// Rotations about the center times a translation grid covering `kernel_size`.
    ///
    /// Ordering is rotation-major, then `ty`, then `tx`, so a translation-only
    /// basis enumerates kernel taps in row-major order.
    pub fn grid(width: usize, height: usize, kernel_size: usize, cfg: &PoseConfig) -> Result<Self> {
        cfg.validate()?;
        let radius = (kernel_size.max(1) - 1) as f64 / 2.0;
        let m = (radius / cfg.translation_step + 1e-9).floor() as i64;
        let n = cfg.rotation_steps.max(1);
        let angles: Vec<f64> =
            if n == 1 { vec![0.0] } else { (0..n).map(|j| cfg.rotation_extent_deg * (2.0 * j as f64 / (n - 1) as f64 - 1.0)).collect() };
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let mut matrices = Vec::with_capacity(n * ((2 * m + 1) * (2 * m + 1)) as usize);
        for &deg in &angles {
            let (s, c) = deg.to_radians().sin_cos();
            let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
            for ty in -m..=m {
                for tx in -m..=m {
                    let t = translation(cx + tx as f64 * cfg.translation_step, cy + ty as f64 * cfg.translation_step);
                    matrices.push(t * rot * translation(-cx, -cy));
                }
            }
        }
        let mut basis = Self::from_matrices(width, height, matrices)?;
        if cfg.translation_step == 1.0 {
            basis.grid = Some((angles.len(), m as usize));
        }
        Ok(basis)
    }

    /// Integer translations covering a `kernel_size` square.
    pub fn translations(width: usize, height: usize, kernel_size: usize) -> Result<Self> {
        Self::grid(width, height, kernel_size, &PoseConfig::translation_only())
    }

    /// Basis for one pyramid level of size `width`x`height` at `scale` of the finest level.
    ///
    /// Grid bases cover the level's kernel support (so translations shrink with
    /// the pyramid while rotations stay fixed); explicit homographies are
    /// conjugated by the level's pixel-center scaling.
    pub fn for_level(cfg: &PoseConfig, width: usize, height: usize, kernel_size: usize, scale: f64) -> Result<Self> {
        match &cfg.homographies {
            None => Self::grid(width, height, kernel_size, cfg),
            Some(list) => {
                let o = 0.5 * scale - 0.5;
                let a = Matrix3::new(scale, 0.0, o, 0.0, scale, o, 0.0, 0.0, 1.0);
                let a_inv = invert(&a)?;
                Self::from_matrices(width, height, list.iter().map(|r| a_inv * from_rows(r) * a).collect())
            }
        }
    }

    /// The same poses on a larger domain whose origin sits at `(-dx, -dy)`.
    pub fn shifted(&self, dx: f64, dy: f64, width: usize, height: usize) -> Self {
        let t = translation(dx, dy);
        let t_inv = translation(-dx, -dy);
        let matrices: Vec<Matrix3<f64>> = self.matrices.iter().map(|m| t * m * t_inv).collect();
        let inverses = self.inverses.iter().map(|m| t * m * t_inv).collect();
        let poses = self.poses.iter().zip(&matrices).map(|(p, m)| Pose { matrix: to_rows(m), ..p.clone() }).collect();
        Self { width, height, poses, matrices, inverses, identity: self.identity, grid: self.grid }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn identity_index(&self) -> usize {
        self.identity
    }

    pub fn matrix(&self, i: usize) -> &Matrix3<f64> {
        &self.matrices[i]
    }

    /// True when every pose is a pure integer translation.
    pub fn is_translation_only(&self) -> bool {
        self.matrices.iter().all(|m| {
            let lin = m.fixed_view::<2, 2>(0, 0);
            (lin - nalgebra::Matrix2::identity()).abs().max() < 1e-12
                && m[(2, 0)] == 0.0
                && m[(2, 1)] == 0.0
                && (m[(0, 2)] - m[(0, 2)].round()).abs() < 1e-9
                && (m[(1, 2)] - m[(1, 2)].round()).abs() < 1e-9
        })
    }

    /// Largest per-axis displacement `|p - H^-1 p|` over the domain corners.
    pub fn max_displacement(&self) -> f64 {
        let (w, h) = ((self.width - 1) as f64, (self.height - 1) as f64);
        let corners = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)];
        let mut best: f64 = 0.0;
        for inv in &self.inverses {
            for &(x, y) in &corners {
                let q = inv * Vector3::new(x, y, 1.0);
                best = best.max((q.x / q.z - x).abs()).max((q.y / q.z - y).abs());
            }
        }
        best
    }

    /// Odd side of the square that contains every pose's local blur footprint.
    pub fn support(&self) -> usize {
        2 * (self.max_displacement() - 1e-9).ceil().max(0.0) as usize + 1
    }

    fn check_dims<T: Real>(&self, img: &ImageBuffer<T>) -> Result<()> {
        if img.dims() != self.dims() {
            return Err(Error::DimensionMismatch(format!(
                "pose basis is defined on {}x{}, image is {}x{}",
                self.width,
                self.height,
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    /// Integer translation of pose `i`, if it is one.
    fn integer_translation(&self, i: usize) -> Option<(i64, i64)> {
        let m = &self.matrices[i];
        let lin = m.fixed_view::<2, 2>(0, 0);
        if (lin - nalgebra::Matrix2::identity()).abs().max() > 1e-12 || m[(2, 0)] != 0.0 || m[(2, 1)] != 0.0 {
            return None;
        }
        let (tx, ty) = (m[(0, 2)], m[(1, 2)]);
        ((tx - tx.round()).abs() < 1e-9 && (ty - ty.round()).abs() < 1e-9).then(|| (tx.round() as i64, ty.round() as i64))
    }
}

/// Nonnegative pose weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseWeights<T> {
    weights: Vec<T>,
}

impl<T: Real> PoseWeights<T> {
    /// Validates and normalizes raw weights.
    pub fn new(basis: &PoseBasis, weights: Vec<T>) -> Result<Self> {
        if weights.len() != basis.len() {
            return Err(Error::DimensionMismatch(format!("{} weights for {} poses", weights.len(), basis.len())));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::InvalidKernel("pose weights must be finite and nonnegative".into()));
        }
        let s: T = weights.iter().copied().sum();
        if !(s > T::zero()) {
            return Err(Error::EmptyKernel);
        }
        Ok(Self { weights: weights.into_iter().map(|w| w / s).collect() })
    }

    /// One-hot weight on the identity pose.
    pub fn identity(basis: &PoseBasis) -> Self {
        let mut weights = vec![T::zero(); basis.len()];
        weights[basis.identity_index()] = T::one();
        Self { weights }
    }

    /// Maps a kernel onto a translation basis (tap `(u, v)` from the center goes to translation `(u, v)`).
    pub fn from_kernel(basis: &PoseBasis, k: &BlurKernel<T>) -> Result<Self> {
        let r = k.radius() as i64;
        let mut weights = vec![T::zero(); basis.len()];
        let mut placed = T::zero();
        for (i, w) in weights.iter_mut().enumerate() {
            if let Some((tx, ty)) = basis.integer_translation(i) {
                if tx.abs() <= r && ty.abs() <= r {
                    *w = k.get((tx + r) as usize, (ty + r) as usize);
                    placed = placed + *w;
                }
            }
        }
        if (placed - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::InvalidKernel("kernel support exceeds the translation grid".into()));
        }
        Self::new(basis, weights)
    }

    /// Kernel form of weights on a translation-only basis.
    pub fn to_kernel(&self, basis: &PoseBasis) -> Option<BlurKernel<T>> {
        let (s, w) = translation_grid(basis, &self.weights)?;
        BlurKernel::new(s, w).ok()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// L1 distance to the identity one-hot.
    pub fn delta_distance(&self, basis: &PoseBasis) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let target = if i == basis.identity_index() { 1.0 } else { 0.0 };
                (w.as_f64() - target).abs()
            })
            .sum()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.weights.iter().map(|w| w.as_f64()).filter(|w| *w > 0.0).map(|w| -w * w.ln()).sum()
    }

    fn as_f64(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.as_f64()).collect()
    }

    /// JSON listing of every pose with its weight.
    pub fn to_json(&self, basis: &PoseBasis) -> String {
        #[derive(Serialize)]
        struct Entry<'a> {
            #[serde(flatten)]
            pose: &'a Pose,
            weight: f64,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            width: usize,
            height: usize,
            identity: usize,
            poses: Vec<Entry<'a>>,
        }
        let doc = Doc {
            width: basis.width,
            height: basis.height,
            identity: basis.identity,
            poses: basis.poses.iter().zip(&self.weights).map(|(pose, w)| Entry { pose, weight: w.as_f64() }).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("weights serialize")
    }
}

/// Values of a translation-only basis laid out as a square kernel grid.
fn translation_grid<T: Real>(basis: &PoseBasis, values: &[T]) -> Option<(usize, Vec<T>)> {
    let taps: Vec<(i64, i64)> = (0..basis.len()).map(|i| basis.integer_translation(i)).collect::<Option<_>>()?;
    let r = taps.iter().map(|(x, y)| x.abs().max(y.abs())).max().unwrap_or(0);
    let s = (2 * r + 1) as usize;
    let mut w = vec![T::zero(); s * s];
    for ((tx, ty), v) in taps.iter().zip(values) {
        let idx = (ty + r) as usize * s + (tx + r) as usize;
        w[idx] = w[idx] + *v;
    }
    Some((s, w))
}

/// `sum_i w_i warp_i(x)` over the nonzero weights, added in pose order.
fn pose_blur<T: Real>(x: &ImageBuffer<T>, weights: &[f64], basis: &PoseBasis, border: WarpBorder, adjoint: bool) -> ImageBuffer<T> {
    let active: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] != 0.0).collect();
    let (w, h) = x.dims();
    let mut acc = vec![T::zero(); w * h];
    for chunk in active.chunks(CHUNK) {
        let parts: Vec<ImageBuffer<T>> = chunk
            .par_iter()
            .map(|&i| if adjoint { warp_inv_adjoint(x, &basis.inverses[i], border) } else { warp_inv(x, &basis.inverses[i], border) })
            .collect();
        for (&i, part) in chunk.iter().zip(&parts) {
            let c = T::lit(weights[i]);
            for (a, v) in acc.iter_mut().zip(part.data()) {
                *a = *a + c * *v;
            }
        }
    }
    ImageBuffer::from_raw_unchecked(w, h, acc)
}

fn per_channel<T: Real>(x: &ImageBuffer<T>, f: impl Fn(&ImageBuffer<T>) -> ImageBuffer<T>) -> Result<ImageBuffer<T>> {
    if x.channels() == 1 {
        return Ok(f(x));
    }
    let planes: Vec<ImageBuffer<T>> = (0..x.channels()).map(|c| f(&x.channel(c))).collect();
    ImageBuffer::merge_channels(&planes)
}

/// `b = sum_i k_i H_i x` with replicate borders, per channel.
pub fn apply_pose_blur<T: Real>(x: &ImageBuffer<T>, w: &PoseWeights<T>, basis: &PoseBasis) -> Result<ImageBuffer<T>> {
    apply_pose_blur_bordered(x, w, basis, WarpBorder::Replicate)
}

pub fn apply_pose_blur_bordered<T: Real>(
    x: &ImageBuffer<T>,
    w: &PoseWeights<T>,
    basis: &PoseBasis,
    border: WarpBorder,
) -> Result<ImageBuffer<T>> {
    basis.check_dims(x)?;
    if w.len() != basis.len() {
        return Err(Error::DimensionMismatch(format!("{} weights for {} poses", w.len(), basis.len())));
    }
    let weights = w.as_f64();
    per_channel(x, |p| pose_blur(p, &weights, basis, border, false))
}

/// Adjoint of [`apply_pose_blur_bordered`] in `x`.
pub fn apply_pose_blur_adjoint<T: Real>(
    y: &ImageBuffer<T>,
    w: &PoseWeights<T>,
    basis: &PoseBasis,
    border: WarpBorder,
) -> Result<ImageBuffer<T>> {
    basis.check_dims(y)?;
    if w.len() != basis.len() {
        return Err(Error::DimensionMismatch(format!("{} weights for {} poses", w.len(), basis.len())));
    }
    let weights = w.as_f64();
    per_channel(y, |p| pose_blur(p, &weights, basis, border, true))
}

/// Poses sharing one homography up to an integer translation.
#[derive(Clone, Debug)]
struct PoseGroup {
    /// Inverse of the group's reference homography.
    inv: Matrix3<f64>,
    identity: bool,
    /// `(pose index, tx, ty)` relative to the reference.
    members: Vec<(usize, i64, i64)>,
}

impl PoseBasis {
    /// Splits the poses into groups `H_i = T(t_i) G` with integer `t_i`.
    fn groups(&self) -> Vec<PoseGroup> {
        let mut groups: Vec<(Matrix3<f64>, PoseGroup)> = Vec::new();
        for (i, m) in self.matrices.iter().enumerate() {
            let affine = m[(2, 0)] == 0.0 && m[(2, 1)] == 0.0 && m[(2, 2)] == 1.0;
            let found = affine
                .then(|| {
                    groups.iter().position(|(g, _)| {
                        let d = m - g;
                        d.fixed_view::<2, 2>(0, 0).abs().max() < 1e-12
                            && (d[(0, 2)] - d[(0, 2)].round()).abs() < 1e-9
                            && (d[(1, 2)] - d[(1, 2)].round()).abs() < 1e-9
                            && g[(2, 0)] == 0.0
                            && g[(2, 1)] == 0.0
                    })
                })
                .flatten();
            match found {
                Some(j) => {
                    let d = m - groups[j].0;
                    groups[j].1.members.push((i, d[(0, 2)].round() as i64, d[(1, 2)].round() as i64));
                }
                None => groups.push((
                    *m,
                    PoseGroup { inv: self.inverses[i], identity: (m - Matrix3::identity()).abs().max() < 1e-12, members: vec![(i, 0, 0)] },
                )),
            }
        }
        groups.into_iter().map(|(_, g)| g).collect()
    }
}

/// Periodic form of the pose blur used by the solvers: each group warps the
/// image once and applies its translations as a circular convolution.
struct Factored<T: Real> {
    width: usize,
    height: usize,
    fft: Fft2d<T>,
    groups: Vec<PoseGroup>,
}

impl<T: Real> Factored<T> {
    fn new(basis: &PoseBasis) -> Self {
        Self { width: basis.width, height: basis.height, fft: Fft2d::new(basis.width, basis.height), groups: basis.groups() }
    }

    fn warp(&self, g: usize, x: &ImageBuffer<T>) -> ImageBuffer<T> {
        let grp = &self.groups[g];
        if grp.identity {
            x.clone()
        } else {
            warp_inv(x, &grp.inv, WarpBorder::Wrap)
        }
    }

    fn warp_adjoint(&self, g: usize, x: &ImageBuffer<T>) -> ImageBuffer<T> {
        let grp = &self.groups[g];
        if grp.identity {
            x.clone()
        } else {
            warp_inv_adjoint(x, &grp.inv, WarpBorder::Wrap)
        }
    }

    fn offset(&self, tx: i64, ty: i64) -> usize {
        ty.rem_euclid(self.height as i64) as usize * self.width + tx.rem_euclid(self.width as i64) as usize
    }

    /// Transfer function of group `g`'s translation taps, `None` if all are zero.
    fn taps(&self, g: usize, k: &[f64]) -> Option<Vec<Complex<T>>> {
        let mut img = vec![T::zero(); self.width * self.height];
        let mut any = false;
        for &(i, tx, ty) in &self.groups[g].members {
            if k[i] != 0.0 {
                let o = self.offset(tx, ty);
                img[o] = img[o] + T::lit(k[i]);
                any = true;
            }
        }
        any.then(|| self.fft.forward_real(&img))
    }

    /// `out[i] = <T(t_i) G y, r>` for every pose `i` of group `g`, from `F(G y)` and `F r`.
    fn correlate(&self, g: usize, fy: &[Complex<T>], fr: &[Complex<T>], out: &mut [f64]) {
        let spec = fy.iter().zip(fr).map(|(a, b)| a.conj() * b).collect();
        let c = self.fft.inverse_real(spec);
        for &(i, tx, ty) in &self.groups[g].members {
            out[i] += c[self.offset(tx, ty)].as_f64();
        }
    }
}

fn accumulate<T: Real>(acc: &mut [Complex<T>], a: &[Complex<T>], b: &[Complex<T>]) {
    for ((o, x), y) in acc.iter_mut().zip(a).zip(b) {
        *o = *o + x * y;
    }
}

/// The blur `A_w` for fixed weights on a periodic domain.
struct PoseOperator<T: Real> {
    op: Factored<T>,
    /// `(group, taps)` for every group with nonzero weight.
    taps: Vec<(usize, Vec<Complex<T>>)>,
}

impl<T: Real> PoseOperator<T> {
    fn new(basis: &PoseBasis, weights: &[f64]) -> Self {
        let op = Factored::new(basis);
        let taps = (0..op.groups.len()).filter_map(|g| op.taps(g, weights).map(|t| (g, t))).collect();
        Self { op, taps }
    }

    /// `1 / (|sum_g taps_g|^2 + rho |D|^2)`: the normal operator with every
    /// group's warp dropped, exact for translation-only bases.
    fn circulant_inverse(&self, rho: f64) -> Vec<f64> {
        let n = self.op.fft.len();
        let mut k = vec![Complex::new(T::zero(), T::zero()); n];
        for (_, t) in &self.taps {
            for (a, b) in k.iter_mut().zip(t) {
                *a = *a + b;
            }
        }
        let dx = self.op.fft.derivative_otf(Direction::X);
        let dy = self.op.fft.derivative_otf(Direction::Y);
        (0..n).map(|i| 1.0 / (k[i].norm_sqr().as_f64() + rho * (dx[i].norm_sqr() + dy[i].norm_sqr()).as_f64())).collect()
    }

    fn apply(&self, x: &ImageBuffer<T>) -> ImageBuffer<T> {
        let parts: Vec<Vec<Complex<T>>> = self
            .taps
            .par_iter()
            .map(|(g, t)| {
                let mut f = self.op.fft.forward(&self.op.warp(*g, x));
                for (a, b) in f.iter_mut().zip(t) {
                    *a = *a * b;
                }
                f
            })
            .collect();
        let mut acc = vec![Complex::new(T::zero(), T::zero()); self.op.fft.len()];
        for p in &parts {
            for (a, b) in acc.iter_mut().zip(p) {
                *a = *a + b;
            }
        }
        self.op.fft.inverse_image(acc)
    }

    fn adjoint(&self, y: &ImageBuffer<T>) -> ImageBuffer<T> {
        let fy = self.op.fft.forward(y);
        let parts: Vec<ImageBuffer<T>> = self
            .taps
            .par_iter()
            .map(|(g, t)| {
                let spec = fy.iter().zip(t).map(|(a, b)| a * b.conj()).collect();
                self.op.warp_adjoint(*g, &self.op.fft.inverse_image(spec))
            })
            .collect();
        let (w, h) = (self.op.width, self.op.height);
        let mut acc = vec![T::zero(); w * h];
        for p in &parts {
            for (a, b) in acc.iter_mut().zip(p.data()) {
                *a = *a + *b;
            }
        }
        ImageBuffer::from_raw_unchecked(w, h, acc)
    }
}

/// The linear map `k -> (sum_i k_i H_i s)_s` for fixed source images `s` (the
/// gradients of the sharp estimate) on a periodic domain, applied without
/// forming a matrix.
pub struct PoseDictionary<T: Real> {
    op: Factored<T>,
    poses: usize,
    /// `spectra[g][s] = F(G_g sources[s])`
    spectra: Vec<Vec<Vec<Complex<T>>>>,
}

fn dot<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

impl<T: Real> PoseDictionary<T> {
    pub fn new(basis: &PoseBasis, sources: &[ImageBuffer<T>]) -> Result<Self> {
        for s in sources {
            basis.check_dims(s)?;
        }
        let op = Factored::new(basis);
        let spectra =
            (0..op.groups.len()).into_par_iter().map(|g| sources.iter().map(|s| op.fft.forward(&op.warp(g, s))).collect()).collect();
        Ok(Self { op, poses: basis.len(), spectra })
    }

    pub fn forward(&self, k: &[f64]) -> Vec<ImageBuffer<T>> {
        let taps: Vec<(usize, Vec<Complex<T>>)> =
            (0..self.op.groups.len()).into_par_iter().filter_map(|g| self.op.taps(g, k).map(|t| (g, t))).collect();
        let n_src = self.spectra.first().map_or(0, Vec::len);
        (0..n_src)
            .into_par_iter()
            .map(|s| {
                let mut acc = vec![Complex::new(T::zero(), T::zero()); self.op.fft.len()];
                for (g, t) in &taps {
                    accumulate(&mut acc, &self.spectra[*g][s], t);
                }
                self.op.fft.inverse_image(acc)
            })
            .collect()
    }

    pub fn adjoint(&self, r: &[ImageBuffer<T>]) -> Vec<f64> {
        let fr: Vec<Vec<Complex<T>>> = r.par_iter().map(|ri| self.op.fft.forward(ri)).collect();
        let parts: Vec<Vec<f64>> = (0..self.op.groups.len())
            .into_par_iter()
            .map(|g| {
                let mut out = vec![0.0; self.poses];
                for (fy, f) in self.spectra[g].iter().zip(&fr) {
                    self.op.correlate(g, fy, f, &mut out);
                }
                out
            })
            .collect();
        let mut out = vec![0.0; self.poses];
        for p in &parts {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out
    }
}

/// Convergence record of one Krylov solve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveReport {
    /// Relative residual `||rhs - A x|| / ||rhs||` after each iteration.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

impl SolveReport {
    pub fn iterations(&self) -> usize {
        self.residuals.len()
    }
}

fn vdot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate residual solve of a symmetric positive definite system. Like
/// conjugate gradients it needs one product per iteration, and its residual
/// norm never increases.
pub fn conjugate_residual(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    rhs: &[f64],
    x0: Vec<f64>,
    tolerance: f64,
    max_iterations: usize,
) -> (Vec<f64>, SolveReport) {
    let norm_b = vdot(rhs, rhs).sqrt();
    let mut report = SolveReport::default();
    if norm_b == 0.0 {
        report.converged = true;
        return (vec![0.0; rhs.len()], report);
    }
    let mut x = x0;
    let ax = apply(&x);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    if vdot(&r, &r).sqrt() / norm_b < tolerance {
        report.converged = true;
        return (x, report);
    }
    let mut ar = apply(&r);
    let mut p = r.clone();
    let mut ap = ar.clone();
    let mut rar = vdot(&r, &ar);
    for _ in 0..max_iterations {
        let app = vdot(&ap, &ap);
        if !(app > 0.0) {
            break;
        }
        let alpha = rar / app;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = vdot(&r, &r).sqrt() / norm_b;
        report.residuals.push(res);
        if res < tolerance {
            report.converged = true;
            break;
        }
        ar = apply(&r);
        let next = vdot(&r, &ar);
        let beta = next / rar;
        rar = next;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
            ap[i] = ar[i] + beta * ap[i];
        }
    }
    (x, report)
}

/// Preconditioned conjugate gradients for a symmetric positive definite
/// system; `precond` applies an approximate inverse.
pub fn preconditioned_cg(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    precond: impl Fn(&[f64]) -> Vec<f64>,
    rhs: &[f64],
    x0: Vec<f64>,
    tolerance: f64,
    max_iterations: usize,
) -> (Vec<f64>, SolveReport) {
    let norm_b = vdot(rhs, rhs).sqrt();
    let mut report = SolveReport::default();
    if norm_b == 0.0 {
        report.converged = true;
        return (vec![0.0; rhs.len()], report);
    }
    let mut x = x0;
    let ax = apply(&x);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    if vdot(&r, &r).sqrt() / norm_b < tolerance {
        report.converged = true;
        return (x, report);
    }
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = vdot(&r, &z);
    for _ in 0..max_iterations {
        let ap = apply(&p);
        let pap = vdot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = vdot(&r, &r).sqrt() / norm_b;
        report.residuals.push(res);
        if res < tolerance {
            report.converged = true;
            break;
        }
        z = precond(&r);
        let next = vdot(&r, &z);
        let beta = next / rz;
        rz = next;
        for i in 0..p.len() {
            p[i] = z[i] + beta * p[i];
        }
    }
    (x, report)
}

/// Output of [`estimate_nu_kernel`].
#[derive(Clone, Debug)]
pub struct NuKernelEstimate<T> {
    pub weights: PoseWeights<T>,
    pub compensation: CompensationField<T>,
    /// Objective after each (k, v) alternation.
    pub objective: Vec<f64>,
    pub solves: Vec<SolveReport>,
}

/// Clamps to nonnegative, zeros entries below the floor fraction of the peak
/// and normalizes. On a unit-step grid the uniform kernel clean-up also runs on
/// the translation marginal (weights summed over rotations): weak connected
/// components are dropped and the marginal is recentered, moving every
/// rotation slice alike.
fn postprocess_weights(k: &[f64], basis: &PoseBasis, post: &PostprocessConfig) -> Result<Vec<f64>> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonUniformNotConverged);
    }
    let peak = k.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::EmptyKernel);
    }
    let floor = post.floor_fraction * peak;
    let mut kept: Vec<f64> = k.iter().map(|&v| if v >= floor { v } else { 0.0 }).collect();
    if let Some((rotations, radius)) = basis.grid {
        let size = 2 * radius + 1;
        let cells = size * size;
        let mut marginal = vec![0.0; cells];
        for slice in kept.chunks(cells) {
            for (m, v) in marginal.iter_mut().zip(slice) {
                *m += v;
            }
        }
        prune_components(&mut marginal, size, post);
        let shift = centering_shift(&marginal, size);
        let slices: Vec<Vec<f64>> =
            kept.chunks(cells).map(|slice| slice.iter().zip(&marginal).map(|(v, m)| if *m > 0.0 { *v } else { 0.0 }).collect()).collect();
        let moved: Vec<f64> = slices.iter().flat_map(|sl| shift_window(sl, size, shift).unwrap_or_else(|| vec![0.0; cells])).collect();
        kept = if moved.iter().any(|v| *v > 0.0) { moved } else { slices.concat() };
        debug_assert_eq!(kept.len(), rotations * cells);
    }
    let s: f64 = kept.iter().sum();
    Ok(kept.into_iter().map(|v| v / s).collect())
}

/// Pose weights from `(x_hat, b)` in the gradient domain with a sparse
/// compensation field, alternating a regularized normal-equation solve for `k`
/// with soft-thresholding for `v`. Shares the objective and weighting of the
/// uniform estimator, with the kernel restricted to the basis.
///
/// A unit-step translation grid is a plain convolution, so it is handed to
/// [`estimate_kernel`] and the resulting kernel is mapped back onto the grid.
pub fn estimate_nu_kernel<T: Real>(
    x_hat: &ImageBuffer<T>,
    b: &ImageBuffer<T>,
    basis: &PoseBasis,
    params: &KernelSolveParams,
    v_init: Option<CompensationField<T>>,
) -> Result<NuKernelEstimate<T>> {
    x_hat.ensure_same_shape(b)?;
    basis.check_dims(x_hat)?;
    if !(params.data_weight > 0.0) {
        return Err(Error::InvalidConfig(format!("data weight must be > 0, got {}", params.data_weight)));
    }
    if let Some((1, radius)) = basis.grid {
        let uniform = KernelSolveParams { kernel_size: 2 * radius + 1, ..params.clone() };
        let est = estimate_kernel(x_hat, b, &uniform, v_init)?;
        return Ok(NuKernelEstimate {
            weights: PoseWeights::from_kernel(basis, &est.kernel)?,
            compensation: est.compensation,
            objective: est.objective,
            solves: Vec::new(),
        });
    }
    estimate_pose_weights(x_hat, b, basis, params, v_init)
}

/// Support-restricted solve over the pose dictionary with conjugate residuals.
fn estimate_pose_weights<T: Real>(
    x_hat: &ImageBuffer<T>,
    b: &ImageBuffer<T>,
    basis: &PoseBasis,
    params: &KernelSolveParams,
    v_init: Option<CompensationField<T>>,
) -> Result<NuKernelEstimate<T>> {
    let (w, h) = x_hat.dims();
    let taper = params.kernel_size.max(basis.support()).max(1);
    let xt = edge_taper(x_hat, taper)?;
    let bt = edge_taper(b, taper)?;
    let dirs = Direction::for_order(params.order);
    let gx: Vec<ImageBuffer<T>> = dirs.iter().map(|&d| derivative(&xt, d, Boundary::Periodic)).collect();
    let gb: Vec<ImageBuffer<T>> = dirs.iter().map(|&d| derivative(&bt, d, Boundary::Periodic)).collect();
    let energy: f64 = gx.iter().map(|g| dot(g, g)).sum();
    if !(energy > f64::EPSILON) {
        return Err(Error::DegenerateDataTerm);
    }
    let omega = params.data_weight / (energy * (params.kernel_size * params.kernel_size) as f64);
    let groups = basis.groups().len() as f64;
    let reg = 2.0 * groups * params.lambda_k / omega;
    let lambda_v = T::lit(params.lambda_v);
    let dict = PoseDictionary::new(basis, &gx)?;
    let mut v = match v_init {
        Some(v) if v.matches(params.order, (w, h)) => v,
        _ => CompensationField::zeros(params.order, w, h),
    };
    let apply = |k: &[f64]| -> Vec<f64> {
        let mut out = dict.adjoint(&dict.forward(k));
        for (o, ki) in out.iter_mut().zip(k) {
            *o += reg * ki;
        }
        out
    };
    let mut solves = Vec::new();
    let mut solve = |v: &CompensationField<T>, k0: Vec<f64>| -> Result<Vec<f64>> {
        let targets: Vec<ImageBuffer<T>> =
            gb.iter().zip(&v.members).map(|(g, (_, vd))| g.zip_map(vd, |a, c| a - c)).collect::<Result<_>>()?;
        let rhs = dict.adjoint(&targets);
        let (k, report) = conjugate_residual(apply, &rhs, k0, CG_TOLERANCE, CG_MAX_ITERATIONS);
        let stalled = !report.converged && report.residuals.last().is_some_and(|r| *r > STAGNATION);
        solves.push(report);
        if k.iter().any(|x| !x.is_finite()) || stalled {
            return Err(Error::NonUniformNotConverged);
        }
        Ok(k)
    };
    let mut k = solve(&v, PoseWeights::<T>::identity(basis).as_f64())?;
    let mut objective = Vec::with_capacity(params.inner_iterations);
    for it in 0..params.inner_iterations.max(1) {
        if it > 0 {
            k = solve(&v, k)?;
        }
        let bk = dict.forward(&k);
        let mut data = 0.0;
        for ((g, fk), (_, vd)) in gb.iter().zip(&bk).zip(v.members.iter_mut()) {
            let z = g.zip_map(fk, |a, c| a - c)?;
            *vd = z.map(|zi| soft_threshold(zi, lambda_v));
            data += z.data().iter().zip(vd.data()).map(|(a, c)| (*a - *c).as_f64().powi(2)).sum::<f64>();
        }
        let j = omega * (0.5 * data + params.lambda_v * v.l1().as_f64()) + params.lambda_k * vdot(&k, &k);
        if !j.is_finite() {
            return Err(Error::NonUniformNotConverged);
        }
        objective.push(j);
    }
    let k = solve(&v, k)?;
    let weights = PoseWeights::new(basis, postprocess_weights(&k, basis, &params.postprocess)?.into_iter().map(T::lit).collect())?;
    Ok(NuKernelEstimate { weights, compensation: v, objective, solves })
}

/// Non-uniform TV deconvolution, `min_x 1/2 ||A_k x - b||^2 + mu ||grad x||_1`.
///
/// Each channel is replicate-padded by the basis footprint, tapered, solved
/// with periodic warps, cropped and clamped to `[0, 1]`.
pub fn nu_tv_deblur<T: Real>(
    b: &ImageBuffer<T>,
    w: &PoseWeights<T>,
    basis: &PoseBasis,
    mu: f64,
    cfg: &AdmmConfig,
) -> Result<ImageBuffer<T>> {
    Ok(nu_tv_deblur_traced(b, w, basis, mu, cfg)?.0)
}

/// [`nu_tv_deblur`] that also returns the trace of the first channel.
pub fn nu_tv_deblur_traced<T: Real>(
    b: &ImageBuffer<T>,
    w: &PoseWeights<T>,
    basis: &PoseBasis,
    mu: f64,
    cfg: &AdmmConfig,
) -> Result<(ImageBuffer<T>, AdmmTrace)> {
    basis.check_dims(b)?;
    if w.len() != basis.len() {
        return Err(Error::DimensionMismatch(format!("{} weights for {} poses", w.len(), basis.len())));
    }
    let planes: Vec<ImageBuffer<T>> = (0..b.channels()).map(|c| b.channel(c)).collect();
    let solved: Vec<(ImageBuffer<T>, AdmmTrace)> =
        planes.par_iter().map(|p| nu_solve_padded(p, w, basis, mu, cfg)).collect::<Result<_>>()?;
    let trace = solved[0].1.clone();
    let out: Vec<ImageBuffer<T>> = solved.into_iter().map(|(x, _)| x).collect();
    let merged = if out.len() == 1 { out.into_iter().next().expect("one plane") } else { ImageBuffer::merge_channels(&out)? };
    Ok((merged.clamp01(), trace))
}

fn nu_solve_padded<T: Real>(
    b: &ImageBuffer<T>,
    w: &PoseWeights<T>,
    basis: &PoseBasis,
    mu: f64,
    cfg: &AdmmConfig,
) -> Result<(ImageBuffer<T>, AdmmTrace)> {
    let support = basis.support();
    let (padded, left, top) = pad_for_fft(b, support, support)?;
    let (pw, ph) = padded.dims();
    let pb = basis.shifted(left as f64, top as f64, pw, ph);
    let blur = PoseOperator::new(&pb, &w.as_f64());
    let rho = T::lit(cfg.rho);
    let to_img = |v: &[f64]| ImageBuffer::from_raw_unchecked(pw, ph, v.iter().map(|x| T::lit(*x)).collect());
    let to_vec = |img: &ImageBuffer<T>| -> Vec<f64> { img.data().iter().map(|x| x.as_f64()).collect() };
    let atb = blur.adjoint(&padded);
    let inv = blur.circulant_inverse(cfg.rho);
    let fft = &blur.op.fft;
    let precond = |v: &[f64]| -> Vec<f64> {
        let mut spec = fft.forward_real(&v.iter().map(|x| T::lit(*x)).collect::<Vec<_>>());
        for (a, m) in spec.iter_mut().zip(&inv) {
            *a = *a * T::lit(*m);
        }
        fft.inverse_real(spec).into_iter().map(|x| x.as_f64()).collect()
    };
    let normal = |v: &[f64]| -> Vec<f64> {
        let x = to_img(v);
        let mut out = blur.adjoint(&blur.apply(&x));
        for d in [Direction::X, Direction::Y] {
            let dd = derivative_adjoint(&derivative(&x, d, Boundary::Periodic), d, Boundary::Periodic);
            for (o, v) in out.data_mut().iter_mut().zip(dd.data()) {
                *o = *o + rho * *v;
            }
        }
        to_vec(&out)
    };
    let (state, trace) = run_admm(
        &padded,
        mu,
        cfg,
        |x_prev, z, u| {
            let mut rhs = atb.clone();
            for (i, d) in [Direction::X, Direction::Y].into_iter().enumerate() {
                let diff = z[i].zip_map(&u[i], |a, c| a - c)?;
                let adj = derivative_adjoint(&diff, d, Boundary::Periodic);
                for (r, v) in rhs.data_mut().iter_mut().zip(adj.data()) {
                    *r = *r + rho * *v;
                }
            }
            let (x, _) = preconditioned_cg(normal, precond, &to_vec(&rhs), to_vec(x_prev), cfg.cg_tolerance, cfg.cg_iterations);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::AdmmDiverged);
            }
            Ok(to_img(&x))
        },
        |x| 0.5 * blur.apply(x).sq_dist(&padded).expect("same shape").as_f64(),
    )?;
    Ok((state.x.crop(left, top, b.width(), b.height())?, trace))
}

/// Estimated pose weights together with the basis they refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct NuBlur<T> {
    pub basis: PoseBasis,
    pub weights: PoseWeights<T>,
}

impl<T: Real> NuBlur<T> {
    pub fn to_json(&self) -> String {
        self.weights.to_json(&self.basis)
    }

    /// Local point-spread functions sampled on a `regions`x`regions` grid of
    /// image locations, tiled into one image (each tile scaled to its peak).
    pub fn kernel_grid(&self, regions: usize) -> ImageBuffer<T> {
        render_kernel_grid(&self.weights, &self.basis, regions)
    }
}

/// See [`NuBlur::kernel_grid`].
pub fn render_kernel_grid<T: Real>(weights: &PoseWeights<T>, basis: &PoseBasis, regions: usize) -> ImageBuffer<T> {
    let regions = regions.max(1);
    let cell = basis.support().max(3);
    let c = (cell / 2) as f64;
    let side = regions * (cell + 1) + 1;
    let mut out = ImageBuffer::filled(side, side, T::lit(0.25));
    let (w, h) = basis.dims();
    for ry in 0..regions {
        for rx in 0..regions {
            let px = (rx as f64 + 0.5) * w as f64 / regions as f64 - 0.5;
            let py = (ry as f64 + 0.5) * h as f64 / regions as f64 - 0.5;
            let mut tile = vec![0.0; cell * cell];
            for (i, wi) in weights.weights().iter().enumerate() {
                let wi = wi.as_f64();
                if wi == 0.0 {
                    continue;
                }
                let q = basis.inverses[i] * Vector3::new(px, py, 1.0);
                let (dx, dy) = (px - q.x / q.z + c, py - q.y / q.z + c);
                let (x0, y0) = (dx.floor(), dy.floor());
                let (fx, fy) = (dx - x0, dy - y0);
                for (ox, oy, s) in [(0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)), (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)] {
                    let (tx, ty) = (x0 as isize + ox, y0 as isize + oy);
                    if tx >= 0 && ty >= 0 && (tx as usize) < cell && (ty as usize) < cell {
                        tile[ty as usize * cell + tx as usize] += wi * s;
                    }
                }
            }
            let peak = tile.iter().copied().fold(0.0, f64::max);
            let (ox, oy) = (1 + rx * (cell + 1), 1 + ry * (cell + 1));
            for y in 0..cell {
                for x in 0..cell {
                    let v = if peak > 0.0 { tile[y * cell + x] / peak } else { 0.0 };
                    out.set(ox + x, oy + y, T::lit(v));
                }
            }
        }
    }
    out
}

/// Projective pose-basis blur with the weight and TV solvers above.
#[derive(Clone, Debug)]
pub struct NuModel<'a> {
    pub cfg: &'a DeblurConfig,
}

impl NuModel<'_> {
    fn basis(&self, ctx: &LevelContext) -> Result<PoseBasis> {
        PoseBasis::for_level(&self.cfg.pose, ctx.width, ctx.height, ctx.kernel_size, ctx.scale)
    }
}

impl<T: Real> BlurModel<T> for NuModel<'_> {
    type Blur = NuBlur<T>;

    fn identity(&self, ctx: &LevelContext) -> Result<NuBlur<T>> {
        let basis = self.basis(ctx)?;
        Ok(NuBlur { weights: PoseWeights::identity(&basis), basis })
    }

    fn estimate(
        &self,
        x_hat: &ImageBuffer<T>,
        b: &ImageBuffer<T>,
        ctx: &LevelContext,
        order: usize,
        v: Option<CompensationField<T>>,
    ) -> Result<(NuBlur<T>, CompensationField<T>, Vec<f64>)> {
        let basis = self.basis(ctx)?;
        let params = if order == 1 {
            KernelSolveParams::preliminary(self.cfg, ctx.kernel_size)
        } else {
            KernelSolveParams::refinement(self.cfg, ctx.kernel_size)
        };
        let est = estimate_nu_kernel(x_hat, b, &basis, &params, v)?;
        Ok((NuBlur { basis, weights: est.weights }, est.compensation, est.objective))
    }

    fn restore(&self, b: &ImageBuffer<T>, blur: &NuBlur<T>, _ctx: &LevelContext) -> Result<(ImageBuffer<T>, f64)> {
        let (x, trace) = nu_tv_deblur_traced(b, &blur.weights, &blur.basis, self.cfg.mu, &self.cfg.admm)?;
        Ok((x, trace.objective.last().copied().unwrap_or(f64::NAN)))
    }

    fn summary(&self, blur: &NuBlur<T>) -> (f64, f64) {
        (blur.weights.entropy(), blur.weights.delta_distance(&blur.basis))
    }
}

/// Blind deblurring with the projective pose-basis model.
pub fn nu_blind_deblur<T: Real>(b: &ImageBuffer<T>, cfg: &DeblurConfig) -> Result<DeblurOutput<T, NuBlur<T>>> {
    nu_blind_deblur_with(b, cfg, &RunOptions::default())
}

pub fn nu_blind_deblur_with<T: Real>(b: &ImageBuffer<T>, cfg: &DeblurConfig, opts: &RunOptions) -> Result<DeblurOutput<T, NuBlur<T>>> {
    blind_deblur_with(&NuModel { cfg }, b, cfg, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::convolve2d;
    use crate::kernelest::estimate_kernel;
    use crate::nonblind::tv_deblur;
    use crate::pyramid::sample_bilinear;
    use crate::scenes::{render, SceneKind};
    use crate::synth::random_walk_kernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> ImageBuffer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0))
    }

    fn inner(a: &ImageBuffer<f64>, b: &ImageBuffer<f64>) -> f64 {
        dot(a, b)
    }

    fn rot_cfg(steps: usize) -> PoseConfig {
        PoseConfig { rotation_extent_deg: 2.0, rotation_steps: steps, translation_step: 1.0, homographies: None }
    }

    fn interior_max_diff(a: &ImageBuffer<f64>, b: &ImageBuffer<f64>, m: usize) -> f64 {
        let (w, h) = a.dims();
        let mut worst: f64 = 0.0;
        for y in m..h - m {
            for x in m..w - m {
                worst = worst.max((a.get(x, y) - b.get(x, y)).abs());
            }
        }
        worst
    }

    #[test]
    fn grid_layout() {
        let basis = PoseBasis::grid(40, 30, 5, &rot_cfg(5)).unwrap();
        assert_eq!(basis.len(), 5 * 25);
        let id = basis.identity_index();
        assert_eq!(id, 2 * 25 + 12);
        assert_eq!(basis.poses()[id].rotation_deg, 0.0);
        let t = PoseBasis::translations(20, 20, 7).unwrap();
        assert!(t.is_translation_only());
        assert_eq!(t.support(), 7);
        assert_eq!((t.poses()[0].tx, t.poses()[0].ty), (-3.0, -3.0));
        assert_eq!((t.poses()[1].tx, t.poses()[1].ty), (-2.0, -3.0));
        assert!(!basis.is_translation_only());
        // a 2 degree rotation at the corner of a 40x30 image moves about 0.87 px
        assert_eq!(basis.support(), 7);
    }

    #[test]
    fn identity_one_hot_is_identity() {
        let x = noise(23, 17, 1);
        let basis = PoseBasis::grid(23, 17, 5, &rot_cfg(3)).unwrap();
        let w = PoseWeights::identity(&basis);
        assert_eq!(apply_pose_blur(&x, &w, &basis).unwrap(), x);
    }

    #[test]
    fn translation_basis_matches_convolution() {
        let x = render::<f64>(SceneKind::City, 40, 36, 4);
        let k = random_walk_kernel::<f64>(5, 3);
        let basis = PoseBasis::translations(40, 36, 5).unwrap();
        let w = PoseWeights::from_kernel(&basis, &k).unwrap();
        let back = w.to_kernel(&basis).unwrap();
        assert!(back.weights().iter().zip(k.weights()).all(|(a, b)| (a - b).abs() < 1e-15));
        let a = apply_pose_blur(&x, &w, &basis).unwrap();
        let b = convolve2d(&x, &k, Boundary::Replicate).unwrap();
        assert!(interior_max_diff(&a, &b, 2) < 1e-6);
        let wrap = apply_pose_blur_bordered(&x, &w, &basis, WarpBorder::Wrap).unwrap();
        let per = convolve2d(&x, &k, Boundary::Periodic).unwrap();
        assert!(interior_max_diff(&wrap, &per, 0) < 1e-12);
    }

    #[test]
    fn rotation_matches_direct_warp() {
        let x = render::<f64>(SceneKind::Shapes, 48, 40, 2);
        let basis = PoseBasis::grid(48, 40, 1, &rot_cfg(5)).unwrap();
        assert_eq!(basis.len(), 5);
        let mut raw = vec![0.0; 5];
        raw[4] = 1.0;
        let w = PoseWeights::new(&basis, raw).unwrap();
        let out = apply_pose_blur(&x, &w, &basis).unwrap();
        let (cx, cy) = (23.5, 19.5);
        let (s, c) = (-2.0f64).to_radians().sin_cos();
        let want = ImageBuffer::from_fn(48, 40, |px, py| {
            let (dx, dy) = (px as f64 - cx, py as f64 - cy);
            sample_bilinear(&x, cx + c * dx - s * dy, cy + s * dx + c * dy)
        });
        assert!(interior_max_diff(&out, &want, 0) < 1e-9);
    }

    #[test]
    fn adjoint_dot_product() {
        let (w, h) = (31, 26);
        let basis = PoseBasis::grid(w, h, 5, &rot_cfg(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for border in [WarpBorder::Replicate, WarpBorder::Wrap] {
            for t in 0..10 {
                let x = noise(w, h, 100 + t);
                let y = noise(w, h, 200 + t);
                let weights = PoseWeights::new(&basis, (0..basis.len()).map(|_| rng.random::<f64>()).collect()).unwrap();
                let ax = apply_pose_blur_bordered(&x, &weights, &basis, border).unwrap();
                let aty = apply_pose_blur_adjoint(&y, &weights, &basis, border).unwrap();
                let (l, r) = (inner(&ax, &y), inner(&x, &aty));
                assert!((l - r).abs() <= 1e-6 * l.abs().max(1.0), "{l} vs {r}");
            }
        }
        let dict = PoseDictionary::new(&basis, &[noise(w, h, 7), noise(w, h, 8)]).unwrap();
        for t in 0..10 {
            let k: Vec<f64> = (0..basis.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = vec![noise(w, h, 300 + t), noise(w, h, 400 + t)];
            let bk = dict.forward(&k);
            let l: f64 = bk.iter().zip(&r).map(|(a, b)| inner(a, b)).sum();
            let rr = vdot(&k, &dict.adjoint(&r));
            assert!((l - rr).abs() <= 1e-6 * l.abs().max(1.0));
        }
    }

    #[test]
    fn factored_operator_matches_warps() {
        let (w, h) = (40, 34);
        let basis = PoseBasis::grid(w, h, 5, &rot_cfg(3)).unwrap();
        assert_eq!(basis.groups().len(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let weights: Vec<f64> = (0..basis.len()).map(|_| rng.random::<f64>()).collect();
        let pw = PoseWeights::new(&basis, weights).unwrap();
        let op = PoseOperator::new(&basis, &pw.as_f64());
        let x = noise(w, h, 1);
        let direct = apply_pose_blur_bordered(&x, &pw, &basis, WarpBorder::Wrap).unwrap();
        let m = basis.support();
        assert!(interior_max_diff(&op.apply(&x), &direct, m) < 1e-12);
        let y = noise(w, h, 2);
        let (l, r) = (inner(&op.apply(&x), &y), inner(&x, &op.adjoint(&y)));
        assert!((l - r).abs() <= 1e-9 * l.abs().max(1.0));
    }

    #[test]
    fn conjugate_residual_monotone() {
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let apply = |x: &[f64]| -> Vec<f64> {
            let mx: Vec<f64> = (0..n).map(|i| (0..n).map(|j| m[i * n + j] * x[j]).sum()).collect();
            (0..n).map(|j| (0..n).map(|i| m[i * n + j] * mx[i]).sum::<f64>() + 0.01 * x[j]).collect()
        };
        let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (x, rep) = conjugate_residual(apply, &rhs, vec![0.0; n], 1e-10, 400);
        assert!(rep.converged);
        assert!(rep.residuals.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-12)));
        let ax = apply(&x);
        let err = ax.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err < 1e-8 * vdot(&rhs, &rhs).sqrt());
    }

    fn params(h: usize) -> KernelSolveParams {
        KernelSolveParams::preliminary(&DeblurConfig::default(), h)
    }

    #[test]
    fn no_blur_gives_identity_weight() {
        let x = render::<f64>(SceneKind::Shapes, 128, 128, 1);
        let basis = PoseBasis::grid(128, 128, 5, &rot_cfg(3)).unwrap();
        let est = estimate_nu_kernel(&x, &x, &basis, &params(5), None).unwrap();
        let id = est.weights.weights()[basis.identity_index()];
        assert!(id >= 0.9, "{id} {:?}", est.weights.weights());
    }

    #[test]
    fn sparse_pose_recovery() {
        let x = render::<f64>(SceneKind::City, 64, 64, 6);
        let cfg = PoseConfig { rotation_extent_deg: 6.0, ..rot_cfg(3) };
        let basis = PoseBasis::grid(64, 64, 3, &cfg).unwrap();
        let mut raw = vec![0.0; basis.len()];
        raw[basis.identity_index()] = 0.5;
        raw[3] = 0.3;
        raw[basis.len() - 2] = 0.2;
        let truth = PoseWeights::new(&basis, raw).unwrap();
        let b = apply_pose_blur(&x, &truth, &basis).unwrap();
        let est = estimate_nu_kernel(&x, &b, &basis, &params(3), None).unwrap();
        let l1: f64 = est.weights.weights().iter().zip(truth.weights()).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 <= 0.1, "l1 error {l1}: {:?}", est.weights.weights());
        assert!(est.solves.iter().all(|s| s.residuals.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-9))));
    }

    #[test]
    fn translation_only_matches_uniform_kernel() {
        // the grid spans every periodic shift, so both solves have the same unknowns
        for (i, kind) in [SceneKind::City, SceneKind::Shapes, SceneKind::StillLife].into_iter().enumerate() {
            let n = 25;
            let x = render::<f64>(kind, n, n, i as u64);
            let k = random_walk_kernel::<f64>(7, 20 + i as u64);
            let b = convolve2d(&x, &k, Boundary::Replicate).unwrap();
            let p = params(n);
            let uni = estimate_kernel(&x, &b, &p, None).unwrap().kernel;
            let basis = PoseBasis::translations(n, n, n).unwrap();
            let nu = estimate_pose_weights(&x, &b, &basis, &p, None).unwrap().weights.to_kernel(&basis).unwrap();
            let diff = uni.weights().iter().zip(nu.weights()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-3, "{kind:?}: {diff}");
        }
    }

    #[test]
    fn translation_only_matches_uniform_tv() {
        let x = render::<f64>(SceneKind::Landscape, 48, 40, 3);
        let k = random_walk_kernel::<f64>(7, 4);
        let b = convolve2d(&x, &k, Boundary::Replicate).unwrap();
        let basis = PoseBasis::translations(48, 40, 7).unwrap();
        let w = PoseWeights::from_kernel(&basis, &k).unwrap();
        let cfg = AdmmConfig::default();
        let a = tv_deblur(&b, &k, 0.01, &cfg).unwrap();
        let n = nu_tv_deblur(&b, &w, &basis, 0.01, &cfg).unwrap();
        assert!(interior_max_diff(&a, &n, 3) <= 1e-3);
    }

    #[test]
    fn identity_weights_denoise_only() {
        let b = render::<f64>(SceneKind::Landscape, 48, 48, 1);
        let basis = PoseBasis::grid(48, 48, 3, &rot_cfg(3)).unwrap();
        let out = nu_tv_deblur(&b, &PoseWeights::identity(&basis), &basis, 0.01, &AdmmConfig::default()).unwrap();
        assert!(out.psnr(&b).unwrap() >= 30.0);
    }

    #[test]
    fn rotational_blur_is_reduced() {
        let x = render::<f64>(SceneKind::Shapes, 64, 64, 8);
        let cfg = PoseConfig { rotation_extent_deg: 4.0, rotation_steps: 9, ..rot_cfg(9) };
        let basis = PoseBasis::grid(64, 64, 1, &cfg).unwrap();
        let w = PoseWeights::new(&basis, vec![1.0; basis.len()]).unwrap();
        let b = apply_pose_blur(&x, &w, &basis).unwrap();
        let out = nu_tv_deblur(&b, &w, &basis, 0.002, &AdmmConfig::default()).unwrap();
        assert!(out.mse(&x).unwrap() <= 0.6 * b.mse(&x).unwrap());
    }

    #[test]
    fn level_basis_scaling() {
        let cfg = rot_cfg(5);
        let fine = PoseBasis::for_level(&cfg, 64, 64, 9, 1.0).unwrap();
        let coarse = PoseBasis::for_level(&cfg, 32, 32, 5, 2.0).unwrap();
        assert_eq!(fine.len(), 5 * 81);
        assert_eq!(coarse.len(), 5 * 25);
        let shift = Matrix3::new(1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let custom = PoseConfig { homographies: Some(vec![to_rows(&Matrix3::identity()), to_rows(&shift)]), ..cfg };
        let b = PoseBasis::for_level(&custom, 32, 32, 5, 2.0).unwrap();
        assert!((b.poses()[1].tx - 1.0).abs() < 1e-12);
        assert_eq!(b.identity_index(), 0);
    }

    #[test]
    fn kernel_grid_and_json() {
        let basis = PoseBasis::grid(40, 40, 3, &rot_cfg(3)).unwrap();
        let w = PoseWeights::new(&basis, (0..basis.len()).map(|i| (i % 4) as f64).collect()).unwrap();
        let blur = NuBlur { basis, weights: w };
        let g = blur.kernel_grid(3);
        let cell = blur.basis.support();
        assert_eq!(g.dims(), (3 * (cell + 1) + 1, 3 * (cell + 1) + 1));
        let v: serde_json::Value = serde_json::from_str(&blur.to_json()).unwrap();
        assert_eq!(v["poses"].as_array().unwrap().len(), blur.basis.len());
        let total: f64 = v["poses"].as_array().unwrap().iter().map(|p| p["weight"].as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_weights() {
        let basis = PoseBasis::translations(8, 8, 3).unwrap();
        assert!(matches!(PoseWeights::new(&basis, vec![0.0; 9]), Err(Error::EmptyKernel)));
        assert!(PoseWeights::new(&basis, vec![1.0; 4]).is_err());
        let mut neg = vec![0.1; 9];
        neg[0] = -0.1;
        assert!(PoseWeights::new(&basis, neg).is_err());
    }
}
