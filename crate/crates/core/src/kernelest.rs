//! Gradient-domain kernel estimation with a sparse compensation field.
//!
//! Minimizes
//! `J(k, v) = w (1/2 sum_d ||grad_d b - k * grad_d x - v_d||^2 + lambda_v ||v||_1) + lambda_k ||k||^2`
//! by alternating an exact frequency-domain solve for `k` (over the whole
//! periodic field) with element-wise shrinkage for `v`. The support crop and
//! clean-up run once, after the alternation.

use num_complex::Complex;

use crate::config::{DeblurConfig, PostprocessConfig};
use crate::conv::edge_taper;
use crate::error::{Error, Result};
use crate::fft::{crop_around_origin, Fft2d};
use crate::gradient::{Direction, GradientField};
use crate::image::ImageBuffer;
use crate::kernel::BlurKernel;
use crate::scalar::Real;

/// `sgn(z) max(0, |z| - lambda)`.
#[inline]
pub fn soft_threshold<T: Real>(z: T, lambda: T) -> T {
    let m = z.abs() - lambda;
    if m > T::zero() {
        z.signum() * m
    } else {
        T::zero()
    }
}

/// Gradient-shaped auxiliary layers, one per derivative direction.
#[derive(Clone, Debug, PartialEq)]
pub struct CompensationField<T> {
    pub members: Vec<(Direction, ImageBuffer<T>)>,
}

impl<T: Real> CompensationField<T> {
    pub fn zeros(order: usize, width: usize, height: usize) -> Self {
        Self { members: Direction::for_order(order).iter().map(|&d| (d, ImageBuffer::zeros(width, height))).collect() }
    }

    pub fn get(&self, dir: Direction) -> Option<&ImageBuffer<T>> {
        self.members.iter().find(|(d, _)| *d == dir).map(|(_, m)| m)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.members.first().map(|(_, m)| m.dims()).unwrap_or((0, 0))
    }

    pub fn l1(&self) -> T {
        self.members.iter().flat_map(|(_, m)| m.data()).map(|v| v.abs()).sum()
    }

    /// Fraction of nonzero entries over all members.
    pub fn nonzero_fraction(&self) -> f64 {
        let total: usize = self.members.iter().map(|(_, m)| m.len()).sum();
        let nz = self.members.iter().flat_map(|(_, m)| m.data()).filter(|v| **v != T::zero()).count();
        nz as f64 / total.max(1) as f64
    }

    pub(crate) fn matches(&self, order: usize, dims: (usize, usize)) -> bool {
        self.dims() == dims && self.members.iter().map(|(d, _)| *d).eq(Direction::for_order(order).iter().copied())
    }
}

/// Parameters of one [`estimate_kernel`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSolveParams {
    pub kernel_size: usize,
    /// Weight of `||k||^2`.
    pub lambda_k: f64,
    /// Shrinkage threshold for `v`.
    pub lambda_v: f64,
    /// Derivative order, 1 or 2.
    pub order: usize,
    pub inner_iterations: usize,
    /// Data-term scale `c`; the applied weight is `c / (||grad x_hat||^2 h^2)`.
    pub data_weight: f64,
    pub postprocess: PostprocessConfig,
}

impl KernelSolveParams {
    /// First-order estimate with `(lambda1, lambda2)`.
    pub fn preliminary(cfg: &DeblurConfig, kernel_size: usize) -> Self {
        Self {
            kernel_size,
            lambda_k: cfg.lambda1,
            lambda_v: cfg.lambda2,
            order: 1,
            inner_iterations: cfg.kernel_inner_iterations,
            data_weight: cfg.kernel_data_weight,
            postprocess: cfg.postprocess.clone(),
        }
    }

    /// Second-order estimate with `(lambda3, lambda4)`.
    pub fn refinement(cfg: &DeblurConfig, kernel_size: usize) -> Self {
        Self {
            kernel_size,
            lambda_k: cfg.lambda3,
            lambda_v: cfg.lambda4,
            order: 2,
            inner_iterations: cfg.kernel_inner_iterations,
            data_weight: cfg.kernel_data_weight,
            postprocess: cfg.postprocess.clone(),
        }
    }
}

/// Output of [`estimate_kernel`].
#[derive(Clone, Debug)]
pub struct KernelEstimate<T> {
    pub kernel: BlurKernel<T>,
    pub compensation: CompensationField<T>,
    /// `J(k, v)` after every (k, v) round.
    pub objective: Vec<f64>,
}

/// Spectra shared by the alternation: transforms of the gradients of `x` and `b`.
struct Spectra<T: Real> {
    fft: Fft2d<T>,
    dirs: Vec<Direction>,
    gx: Vec<Vec<Complex<T>>>,
    gb: Vec<Vec<Complex<T>>>,
    /// `sum_d |F grad_d x|^2`
    energy: Vec<T>,
}

impl<T: Real> Spectra<T> {
    fn new(x: &ImageBuffer<T>, b: &ImageBuffer<T>, order: usize) -> Result<Self> {
        x.ensure_same_shape(b)?;
        let fft = Fft2d::new(x.width(), x.height());
        let fx = fft.forward(x);
        let fb = fft.forward(b);
        let dirs = Direction::for_order(order).to_vec();
        let mut gx = Vec::new();
        let mut gb = Vec::new();
        let mut energy = vec![T::zero(); fft.len()];
        for &d in &dirs {
            let otf = fft.derivative_otf(d);
            let a: Vec<Complex<T>> = otf.iter().zip(&fx).map(|(o, f)| o * f).collect();
            for (e, v) in energy.iter_mut().zip(&a) {
                *e = *e + v.norm_sqr();
            }
            gx.push(a);
            gb.push(otf.iter().zip(&fb).map(|(o, f)| o * f).collect());
        }
        let peak = energy.iter().copied().fold(T::zero(), T::max);
        if !(peak > T::epsilon()) {
            return Err(Error::DegenerateDataTerm);
        }
        Ok(Self { fft, dirs, gx, gb, energy })
    }

    /// `c / (||grad x||^2 h^2)`: keeps the data/prior balance independent of
    /// image size, contrast and kernel support.
    fn data_weight(&self, c: f64, kernel_size: usize) -> f64 {
        let e = self.energy.iter().map(|v| v.as_f64()).sum::<f64>() / self.energy.len() as f64;
        c / (e * (kernel_size * kernel_size) as f64)
    }

    /// Exact minimizer of `J(., v)` over the full periodic field, as a spectrum.
    fn solve(&self, v: Option<&CompensationField<T>>, lambda_k: T) -> Vec<Complex<T>> {
        let n = self.fft.len();
        let mut num = vec![Complex::new(T::zero(), T::zero()); n];
        for (i, &d) in self.dirs.iter().enumerate() {
            let fv = v.and_then(|v| v.get(d)).map(|m| self.fft.forward(m));
            for p in 0..n {
                let mut rhs = self.gb[i][p];
                if let Some(fv) = &fv {
                    rhs = rhs - fv[p];
                }
                num[p] = num[p] + self.gx[i][p].conj() * rhs;
            }
        }
        let two_l = lambda_k + lambda_k;
        num.iter().zip(&self.energy).map(|(a, &e)| a / (e + two_l)).collect()
    }

    /// Spatial residuals `z_d = grad_d b - k * grad_d x` for a kernel spectrum.
    fn residuals(&self, fk: &[Complex<T>]) -> Vec<ImageBuffer<T>> {
        (0..self.dirs.len())
            .map(|i| {
                let spec = self.gb[i].iter().zip(&self.gx[i]).zip(fk).map(|((b, x), k)| b - x * k).collect();
                self.fft.inverse_image(spec)
            })
            .collect()
    }
}

/// Raw (uncropped, unprocessed) kernel field minimizing `J(., v)`, with its
/// origin at pixel (0, 0). Gradients are periodic forward differences.
pub fn solve_kernel_fft_raw<T: Real>(
    x: &ImageBuffer<T>,
    b: &ImageBuffer<T>,
    v: Option<&CompensationField<T>>,
    lambda_k: T,
    order: usize,
) -> Result<ImageBuffer<T>> {
    let s = Spectra::new(x, b, order)?;
    Ok(s.fft.inverse_image(s.solve(v, lambda_k)))
}

/// Closed-form kernel solve from precomputed gradient fields, cropped around
/// the circular origin and cleaned up.
pub fn solve_kernel_fft<T: Real>(
    grad_x: &GradientField<T>,
    grad_b: &GradientField<T>,
    v: &CompensationField<T>,
    lambda_k: T,
    kernel_size: usize,
    post: &PostprocessConfig,
) -> Result<BlurKernel<T>> {
    let (w, h) = grad_x.dims();
    if grad_b.dims() != (w, h) || v.dims() != (w, h) {
        return Err(Error::DimensionMismatch("gradient and compensation fields differ in size".into()));
    }
    let fft = Fft2d::new(w, h);
    let n = w * h;
    let mut num = vec![Complex::new(T::zero(), T::zero()); n];
    let mut den = vec![T::zero(); n];
    for d in grad_x.directions() {
        let (Some(gx), Some(gb), Some(vd)) = (grad_x.get(d), grad_b.get(d), v.get(d)) else {
            return Err(Error::DimensionMismatch(format!("missing {} member", d.name())));
        };
        let fx = fft.forward(gx);
        let fr = fft.forward(&gb.zip_map(vd, |a, c| a - c)?);
        for p in 0..n {
            num[p] = num[p] + fx[p].conj() * fr[p];
            den[p] = den[p] + fx[p].norm_sqr();
        }
    }
    if !(den.iter().copied().fold(T::zero(), T::max) > T::epsilon()) {
        return Err(Error::DegenerateDataTerm);
    }
    let two_l = lambda_k + lambda_k;
    let spec = num.iter().zip(&den).map(|(a, &e)| a / (e + two_l)).collect();
    let field = fft.inverse_image(spec);
    crop_and_clean(&field, kernel_size, post)
}

/// Picks the `size`x`size` window near the origin holding the most positive mass.
fn crop_peak_window<T: Real>(field: &ImageBuffer<T>, size: usize) -> Vec<T> {
    let (w, h) = field.dims();
    let fit = (w.min(h) - 1) / 2;
    let r = ((size / 2).min(fit)) as isize;
    let size = 2 * r as usize + 1;
    let reach = (fit as isize - r).clamp(0, r);
    let search = (2 * (r + reach) + 1) as usize;
    let big = crop_around_origin(field.data(), w, h, search);
    let pos = |x: usize, y: usize| big[y * search + x].max(T::zero());
    let mass = |cx: isize, cy: isize| {
        let mut s = T::zero();
        for y in (cy - r)..=(cy + r) {
            for x in (cx - r)..=(cx + r) {
                s = s + pos(x as usize, y as usize);
            }
        }
        s
    };
    let c = r + reach;
    let mut best = (mass(c, c), (c, c));
    for cy in (c - reach)..=(c + reach) {
        for cx in (c - reach)..=(c + reach) {
            let m = mass(cx, cy);
            if m > best.0 {
                best = (m, (cx, cy));
            }
        }
    }
    let (cx, cy) = best.1;
    let mut out = Vec::with_capacity(size * size);
    for y in (cy - r)..=(cy + r) {
        for x in (cx - r)..=(cx + r) {
            out.push(big[y as usize * search + x as usize]);
        }
    }
    out
}

fn crop_and_clean<T: Real>(field: &ImageBuffer<T>, kernel_size: usize, post: &PostprocessConfig) -> Result<BlurKernel<T>> {
    if kernel_size <= 1 {
        return Ok(BlurKernel::delta());
    }
    let raw = crop_peak_window(field, kernel_size);
    let size = (raw.len() as f64).sqrt().round() as usize;
    postprocess_kernel(&raw, size, post).map(|k| if k.size() < kernel_size { k.padded_to(kernel_size) } else { k })
}

/// Clamps, floors, prunes weak connected components, recenters and normalizes.
pub fn postprocess_kernel<T: Real>(raw: &[T], size: usize, post: &PostprocessConfig) -> Result<BlurKernel<T>> {
    if raw.len() != size * size || size.is_multiple_of(2) {
        return Err(Error::InvalidKernel(format!("raw field of {} values is not an odd {size}x{size} square", raw.len())));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::KernelSolveDiverged);
    }
    let mut k: Vec<T> = raw.iter().map(|&v| v.max(T::zero())).collect();
    let peak = k.iter().copied().fold(T::zero(), T::max);
    if !(peak > T::zero()) {
        return Err(Error::EmptyKernel);
    }
    let floor = peak * T::lit(post.floor_fraction);
    for v in &mut k {
        if *v < floor {
            *v = T::zero();
        }
    }

    prune_components(&mut k, size, post);
    let k = shift_window(&k, size, centering_shift(&k, size)).unwrap_or(k);
    BlurKernel::normalized(size, k)
}

/// Zeroes connected components lighter than `component_fraction` of the heaviest.
pub(crate) fn prune_components<T: Real>(k: &mut [T], size: usize, post: &PostprocessConfig) {
    let (labels, masses) = components(k, size);
    let heaviest = masses.iter().copied().fold(T::zero(), T::max);
    let keep: Vec<bool> = masses.iter().map(|&m| m == heaviest || m >= heaviest * T::lit(post.component_fraction)).collect();
    for (v, l) in k.iter_mut().zip(&labels) {
        if let Some(l) = l {
            if !keep[*l] {
                *v = T::zero();
            }
        }
    }
}

/// 8-connected components of the nonzero entries; returns per-pixel labels and per-label mass.
fn components<T: Real>(k: &[T], size: usize) -> (Vec<Option<usize>>, Vec<T>) {
    let mut labels = vec![None; k.len()];
    let mut masses = Vec::new();
    let mut stack = Vec::new();
    for start in 0..k.len() {
        if k[start] == T::zero() || labels[start].is_some() {
            continue;
        }
        let id = masses.len();
        let mut mass = T::zero();
        labels[start] = Some(id);
        stack.push(start);
        while let Some(p) = stack.pop() {
            mass = mass + k[p];
            let (x, y) = ((p % size) as isize, (p / size) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= size as isize || ny >= size as isize {
                        continue;
                    }
                    let q = ny as usize * size + nx as usize;
                    if k[q] != T::zero() && labels[q].is_none() {
                        labels[q] = Some(id);
                        stack.push(q);
                    }
                }
            }
        }
        masses.push(mass);
    }
    (labels, masses)
}

/// Integer shift `(sx, sy)` that moves the center of mass of a `size`x`size` window to the middle.
pub(crate) fn centering_shift<T: Real>(k: &[T], size: usize) -> (isize, isize) {
    let total: T = k.iter().copied().sum();
    let (mut mx, mut my) = (T::zero(), T::zero());
    for (i, &v) in k.iter().enumerate() {
        mx = mx + v * T::from_usize_lossy(i % size);
        my = my + v * T::from_usize_lossy(i / size);
    }
    let c = (size / 2) as f64;
    let sx = ((mx / total).as_f64() - c).round() as isize;
    let sy = ((my / total).as_f64() - c).round() as isize;
    (sx, sy)
}

/// `out(x, y) = k(x + sx, y + sy)`; mass pushed out of the window is dropped.
/// `None` when nothing would remain.
pub(crate) fn shift_window<T: Real>(k: &[T], size: usize, (sx, sy): (isize, isize)) -> Option<Vec<T>> {
    if sx == 0 && sy == 0 {
        return Some(k.to_vec());
    }
    let mut out = vec![T::zero(); k.len()];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let (fx, fy) = (x + sx, y + sy);
            if fx >= 0 && fy >= 0 && fx < size as isize && fy < size as isize {
                out[(y * size as isize + x) as usize] = k[(fy * size as isize + fx) as usize];
            }
        }
    }
    (!out.iter().all(|v| *v == T::zero())).then_some(out)
}

fn objective<T: Real>(res: &[ImageBuffer<T>], v: &CompensationField<T>, fk: &[Complex<T>], p: &KernelSolveParams, omega: f64) -> f64 {
    let mut data = 0.0;
    for (z, (_, vd)) in res.iter().zip(&v.members) {
        data += z.data().iter().zip(vd.data()).map(|(a, b)| (*a - *b).as_f64().powi(2)).sum::<f64>();
    }
    // Parseval: ||k||^2 = sum |Fk|^2 / n
    let kk: f64 = fk.iter().map(|c| c.norm_sqr().as_f64()).sum::<f64>() / fk.len() as f64;
    omega * (0.5 * data + p.lambda_v * v.l1().as_f64()) + p.lambda_k * kk
}

/// Alternates kernel and compensation updates starting from `v_init` (zeros if
/// absent or mismatched), then crops and cleans the kernel.
///
/// Both inputs are edge-tapered with a kernel-width border before the periodic model is applied.
pub fn estimate_kernel<T: Real>(
    x_hat: &ImageBuffer<T>,
    b: &ImageBuffer<T>,
    params: &KernelSolveParams,
    v_init: Option<CompensationField<T>>,
) -> Result<KernelEstimate<T>> {
    x_hat.ensure_same_shape(b)?;
    if params.kernel_size > x_hat.width() || params.kernel_size > x_hat.height() {
        return Err(Error::KernelExceedsImage { kernel: params.kernel_size, width: x_hat.width(), height: x_hat.height() });
    }
    let (w, h) = x_hat.dims();
    let taper = params.kernel_size.max(1);
    let xt = edge_taper(x_hat, taper)?;
    let bt = edge_taper(b, taper)?;
    let spectra = Spectra::new(&xt, &bt, params.order)?;
    let mut v = match v_init {
        Some(v) if v.matches(params.order, (w, h)) => v,
        _ => CompensationField::zeros(params.order, w, h),
    };
    if !(params.data_weight > 0.0) {
        return Err(Error::InvalidConfig(format!("data weight must be > 0, got {}", params.data_weight)));
    }
    let omega = spectra.data_weight(params.data_weight, params.kernel_size);
    let lambda_k = T::lit(params.lambda_k / omega);
    let lambda_v = T::lit(params.lambda_v);
    let mut objective_trace = Vec::with_capacity(params.inner_iterations);
    let mut fk = spectra.solve(Some(&v), lambda_k);
    for it in 0..params.inner_iterations.max(1) {
        if it > 0 {
            fk = spectra.solve(Some(&v), lambda_k);
        }
        let res = spectra.residuals(&fk);
        for ((_, vd), z) in v.members.iter_mut().zip(&res) {
            *vd = z.map(|zi| soft_threshold(zi, lambda_v));
        }
        let j = objective(&res, &v, &fk, params, omega);
        if !j.is_finite() {
            return Err(Error::KernelSolveDiverged);
        }
        objective_trace.push(j);
    }
    // final kernel is re-solved against the last v so (k, v) is a consistent pair
    let fk = spectra.solve(Some(&v), lambda_k);
    let field = spectra.fft.inverse_image(fk);
    if field.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::KernelSolveDiverged);
    }
    let kernel = crop_and_clean(&field, params.kernel_size, &params.postprocess)?;
    Ok(KernelEstimate { kernel, compensation: v, objective: objective_trace })
}
