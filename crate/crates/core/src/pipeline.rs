//! Coarse-to-fine blind deblurring: preliminary restoration over the pyramid,
//! full-resolution refinement, and the final per-channel non-blind solve.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::config::DeblurConfig;
use crate::error::{Error, Result};
use crate::guided::guided_filter;
use crate::image::ImageBuffer;
use crate::kernel::BlurKernel;
use crate::kernelest::{estimate_kernel, CompensationField, KernelSolveParams};
use crate::nonblind::tv_deblur_traced;
use crate::patchmatch::reconstruct_sharp;
use crate::pyramid::{build_image_pyramid, build_schedule, delta_distance, lowpass_downsample, ScaleSchedule};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Preliminary,
    Refinement,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Preliminary => "preliminary",
            Phase::Refinement => "refinement",
        }
    }
}

/// Where in the run a solver call happens.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelContext {
    pub phase: Phase,
    /// Pyramid level (the finest level during refinement).
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub kernel_size: usize,
    /// Size ratio of this level against the finest one (`<= 1`).
    pub scale: f64,
}

/// One alternation of (reconstruct, estimate, restore).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Kernel objective after the last inner round.
    pub kernel_objective: f64,
    /// Final TV objective of the non-blind step.
    pub tv_objective: f64,
    pub kernel_entropy: f64,
    pub delta_distance: f64,
}

/// Per-level (or per-refinement-iteration) record.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry<B> {
    pub phase: Phase,
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub kernel_size: usize,
    pub iterations: Vec<IterationRecord>,
    /// Blur estimate at the end of the entry.
    pub blur: B,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimings {
    pub preliminary: Duration,
    pub refinement: Duration,
    pub final_solve: Duration,
}

impl PhaseTimings {
    pub fn total(&self) -> Duration {
        self.preliminary + self.refinement + self.final_solve
    }
}

/// Named intermediate image, kept only when requested.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T> {
    pub name: String,
    pub image: ImageBuffer<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub keep_snapshots: bool,
}

/// Output of the blind pipeline for a blur model with estimate type `B`.
#[derive(Clone, Debug)]
pub struct DeblurOutput<T, B> {
    pub blur: B,
    pub latent: ImageBuffer<T>,
    pub trace: Vec<TraceEntry<B>>,
    pub timings: PhaseTimings,
    pub schedule: Option<ScaleSchedule>,
    pub snapshots: Vec<Snapshot<T>>,
}

/// Uniform-blur result: `blur` is the finest-scale kernel.
pub type DeblurResult<T> = DeblurOutput<T, BlurKernel<T>>;

impl<T: Real> DeblurResult<T> {
    pub fn kernel(&self) -> &BlurKernel<T> {
        &self.blur
    }
}

impl<T, B> DeblurOutput<T, B> {
    /// Trace as CSV: one row per alternation. Timings are excluded so the
    /// text is reproducible.
    pub fn trace_csv(&self) -> String {
        let mut s =
            String::from("phase,level,iteration,width,height,kernel_size,kernel_objective,tv_objective,kernel_entropy,delta_distance\n");
        for e in &self.trace {
            for r in &e.iterations {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{:e},{:e},{:e},{:e}",
                    e.phase.name(),
                    e.level,
                    r.iteration,
                    e.width,
                    e.height,
                    e.kernel_size,
                    r.kernel_objective,
                    r.tv_objective,
                    r.kernel_entropy,
                    r.delta_distance
                );
            }
        }
        s
    }
}

/// Estimation and restoration steps the pipeline is generic over.
pub trait BlurModel<T: Real> {
    type Blur: Clone;

    /// The no-blur estimate used to initialize each level.
    fn identity(&self, ctx: &LevelContext) -> Result<Self::Blur>;

    /// Blur estimate from a sharpened latent `x_hat` and the observation `b`.
    fn estimate(
        &self,
        x_hat: &ImageBuffer<T>,
        b: &ImageBuffer<T>,
        ctx: &LevelContext,
        order: usize,
        v: Option<CompensationField<T>>,
    ) -> Result<(Self::Blur, CompensationField<T>, Vec<f64>)>;

    /// Non-blind restoration; returns the image and its final objective.
    fn restore(&self, b: &ImageBuffer<T>, blur: &Self::Blur, ctx: &LevelContext) -> Result<(ImageBuffer<T>, f64)>;

    /// `(entropy, delta distance)` of an estimate, for the trace.
    fn summary(&self, blur: &Self::Blur) -> (f64, f64);
}

/// Spatially uniform blur: FFT kernel solve and TV-ADMM.
#[derive(Clone, Debug)]
pub struct UniformModel<'a> {
    pub cfg: &'a DeblurConfig,
}

impl<T: Real> BlurModel<T> for UniformModel<'_> {
    type Blur = BlurKernel<T>;

    fn identity(&self, _ctx: &LevelContext) -> Result<BlurKernel<T>> {
        Ok(BlurKernel::delta())
    }

    fn estimate(
        &self,
        x_hat: &ImageBuffer<T>,
        b: &ImageBuffer<T>,
        ctx: &LevelContext,
        order: usize,
        v: Option<CompensationField<T>>,
    ) -> Result<(BlurKernel<T>, CompensationField<T>, Vec<f64>)> {
        let params = if order == 1 {
            KernelSolveParams::preliminary(self.cfg, ctx.kernel_size)
        } else {
            KernelSolveParams::refinement(self.cfg, ctx.kernel_size)
        };
        let est = estimate_kernel(x_hat, b, &params, v)?;
        Ok((est.kernel, est.compensation, est.objective))
    }

    fn restore(&self, b: &ImageBuffer<T>, k: &BlurKernel<T>, _ctx: &LevelContext) -> Result<(ImageBuffer<T>, f64)> {
        let (x, trace) = tv_deblur_traced(b, k, self.cfg.mu, &self.cfg.admm)?;
        Ok((x, trace.objective.last().copied().unwrap_or(f64::NAN)))
    }

    fn summary(&self, k: &BlurKernel<T>) -> (f64, f64) {
        (k.entropy().as_f64(), delta_distance(k).as_f64())
    }
}

/// One level (or the refinement stage): `rounds` alternations starting from `x_l`.
#[allow(clippy::too_many_arguments)]
fn alternate<T: Real, M: BlurModel<T>>(
    model: &M,
    cfg: &DeblurConfig,
    b: &ImageBuffer<T>,
    mut x_l: ImageBuffer<T>,
    mut blur: M::Blur,
    ctx: &LevelContext,
    order: usize,
    mut prior: impl FnMut(&ImageBuffer<T>) -> Result<ImageBuffer<T>>,
    snapshots: &mut Option<&mut Vec<Snapshot<T>>>,
) -> Result<(ImageBuffer<T>, M::Blur, TraceEntry<M::Blur>)> {
    let mut v = None;
    let mut records = Vec::with_capacity(cfg.max_iteration);
    for it in 0..cfg.max_iteration {
        let x_pr = prior(&x_l)?;
        let x_hat = reconstruct_sharp(&x_l, &x_pr, &cfg.patch)?;
        let (next, comp, obj) = model.estimate(&x_hat, b, ctx, order, v.take())?;
        v = Some(comp);
        blur = next;
        let (restored, tv_obj) = model.restore(b, &blur, ctx)?;
        x_l = restored;
        let (entropy, dd) = model.summary(&blur);
        records.push(IterationRecord {
            iteration: it,
            kernel_objective: obj.last().copied().unwrap_or(f64::NAN),
            tv_objective: tv_obj,
            kernel_entropy: entropy,
            delta_distance: dd,
        });
        if let Some(s) = snapshots.as_deref_mut() {
            let tag = format!("{}-l{:02}-i{}", ctx.phase.name(), ctx.level, it);
            s.push(Snapshot { name: format!("{tag}-xhat"), image: x_hat });
            s.push(Snapshot { name: format!("{tag}-latent"), image: x_l.clone() });
        }
    }
    let entry = TraceEntry {
        phase: ctx.phase,
        level: ctx.level,
        width: ctx.width,
        height: ctx.height,
        kernel_size: ctx.kernel_size,
        iterations: records,
        blur: blur.clone(),
    };
    Ok((x_l, blur, entry))
}

fn single_channel<T: Real>(b: &ImageBuffer<T>) -> ImageBuffer<T> {
    if b.channels() == 1 {
        b.clone()
    } else {
        b.to_luma()
    }
}

/// Preliminary phase over the pyramid with an arbitrary blur model.
pub fn preliminary_restore_with<T: Real, M: BlurModel<T>>(
    model: &M,
    b: &ImageBuffer<T>,
    cfg: &DeblurConfig,
    opts: &RunOptions,
) -> Result<DeblurOutput<T, M::Blur>> {
    cfg.validate()?;
    let start = Instant::now();
    let b = single_channel(b);
    let schedule = build_schedule(b.width(), b.height(), cfg.kernel_size, cfg.beta, cfg.min_coarse_dim)?;
    let pyramid = build_image_pyramid(&b, &schedule)?;
    let mut snapshots = Vec::new();
    let mut x_pr = pyramid[0].clone();
    let finest = schedule.finest().clone();
    let mut blur = model.identity(&LevelContext {
        phase: Phase::Preliminary,
        level: finest.level,
        width: finest.width,
        height: finest.height,
        kernel_size: finest.kernel_size,
        scale: 1.0,
    })?;
    let mut trace = Vec::new();
    if opts.keep_snapshots {
        snapshots.push(Snapshot { name: "prior-l00".into(), image: x_pr.clone() });
    }
    for lvl in schedule.levels.iter().skip(1) {
        let ctx = LevelContext {
            phase: Phase::Preliminary,
            level: lvl.level,
            width: lvl.width,
            height: lvl.height,
            kernel_size: lvl.kernel_size,
            scale: lvl.width as f64 / finest.width as f64,
        };
        let b_l = &pyramid[lvl.level];
        let prior = x_pr.clone();
        let mut snap = opts.keep_snapshots.then_some(&mut snapshots);
        let (x_l, k, entry) = alternate(model, cfg, b_l, b_l.clone(), model.identity(&ctx)?, &ctx, 1, |_| Ok(prior.clone()), &mut snap)
            .map_err(|e| e.at_level(lvl.level))?;
        trace.push(entry);
        x_pr = x_l;
        blur = k;
    }
    Ok(DeblurOutput {
        blur,
        latent: x_pr,
        trace,
        timings: PhaseTimings { preliminary: start.elapsed(), ..Default::default() },
        schedule: Some(schedule),
        snapshots,
    })
}

/// Refinement at full resolution with an arbitrary blur model, starting from
/// `(x_tilde, blur)`. With `max_iteration = 0` the inputs are returned unchanged.
pub fn refine_restore_with<T: Real, M: BlurModel<T>>(
    model: &M,
    b: &ImageBuffer<T>,
    x_tilde: &ImageBuffer<T>,
    blur: M::Blur,
    cfg: &DeblurConfig,
    opts: &RunOptions,
) -> Result<DeblurOutput<T, M::Blur>> {
    cfg.validate()?;
    let start = Instant::now();
    let b = single_channel(b);
    if x_tilde.dims() != b.dims() || x_tilde.channels() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "refinement start {}x{}x{} does not match observation {}x{}",
            x_tilde.width(),
            x_tilde.height(),
            x_tilde.channels(),
            b.width(),
            b.height()
        )));
    }
    let ctx = LevelContext {
        phase: Phase::Refinement,
        level: crate::pyramid::levels_for_kernel(cfg.kernel_size, cfg.beta),
        width: b.width(),
        height: b.height(),
        kernel_size: cfg.kernel_size,
        scale: 1.0,
    };
    let mut snapshots = Vec::new();
    let mut snap = opts.keep_snapshots.then_some(&mut snapshots);
    let prior = |x_l: &ImageBuffer<T>| {
        let filtered = guided_filter(x_l, x_l, cfg.guided.radius, cfg.guided.eps)?;
        lowpass_downsample(&filtered, cfg.beta)
    };
    let (latent, blur, entry) = alternate(model, cfg, &b, x_tilde.clone(), blur, &ctx, 2, prior, &mut snap)?;
    // one trace entry per refinement iteration
    let trace = entry.iterations.iter().map(|r| TraceEntry { iterations: vec![r.clone()], ..entry.clone() }).collect();
    Ok(DeblurOutput {
        blur,
        latent,
        trace,
        timings: PhaseTimings { refinement: start.elapsed(), ..Default::default() },
        schedule: None,
        snapshots,
    })
}

/// Full pipeline with an arbitrary blur model: preliminary, refinement, and a
/// final per-channel restoration of the original (possibly color) input.
pub fn blind_deblur_with<T: Real, M: BlurModel<T>>(
    model: &M,
    b: &ImageBuffer<T>,
    cfg: &DeblurConfig,
    opts: &RunOptions,
) -> Result<DeblurOutput<T, M::Blur>> {
    let luma = single_channel(b);
    let pre = preliminary_restore_with(model, &luma, cfg, opts)?;
    let refined = refine_restore_with(model, &luma, &pre.latent, pre.blur.clone(), cfg, opts)?;
    let start = Instant::now();
    let ctx = LevelContext {
        phase: Phase::Refinement,
        level: refined.trace.last().map(|e| e.level).unwrap_or(0),
        width: b.width(),
        height: b.height(),
        kernel_size: cfg.kernel_size,
        scale: 1.0,
    };
    let planes: Vec<ImageBuffer<T>> = (0..b.channels()).map(|c| b.channel(c)).collect();
    let mut out = Vec::with_capacity(planes.len());
    for p in &planes {
        out.push(model.restore(p, &refined.blur, &ctx)?.0);
    }
    let latent = if out.len() == 1 { out.pop().expect("one plane") } else { ImageBuffer::merge_channels(&out)? };
    let mut trace = pre.trace;
    trace.extend(refined.trace);
    let mut snapshots = pre.snapshots;
    snapshots.extend(refined.snapshots);
    Ok(DeblurOutput {
        blur: refined.blur,
        latent,
        trace,
        timings: PhaseTimings {
            preliminary: pre.timings.preliminary,
            refinement: refined.timings.refinement,
            final_solve: start.elapsed(),
        },
        schedule: pre.schedule,
        snapshots,
    })
}

/// Coarse-to-fine restoration; returns the finest-level latent and kernel.
pub fn preliminary_restore<T: Real>(b: &ImageBuffer<T>, cfg: &DeblurConfig) -> Result<DeblurResult<T>> {
    preliminary_restore_with(&UniformModel { cfg }, b, cfg, &RunOptions::default())
}

/// Full-resolution refinement starting from `(x_tilde, kernel)`.
pub fn refine_restore<T: Real>(
    b: &ImageBuffer<T>,
    x_tilde: &ImageBuffer<T>,
    kernel: BlurKernel<T>,
    cfg: &DeblurConfig,
) -> Result<DeblurResult<T>> {
    refine_restore_with(&UniformModel { cfg }, b, x_tilde, kernel, cfg, &RunOptions::default())
}

/// Blind deblurring of a gray or color image with a spatially uniform kernel.
pub fn blind_deblur<T: Real>(b: &ImageBuffer<T>, cfg: &DeblurConfig) -> Result<DeblurResult<T>> {
    blind_deblur_with(&UniformModel { cfg }, b, cfg, &RunOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{render, SceneKind};

    #[test]
    fn refine_zero_iterations_is_noop() {
        let b = render::<f64>(SceneKind::Shapes, 64, 64, 1);
        let cfg = DeblurConfig { max_iteration: 0, ..DeblurConfig::default().with_kernel_size(5) };
        let k = BlurKernel::gaussian(5, 1.0);
        let r = refine_restore(&b, &b, k.clone(), &cfg).unwrap();
        assert_eq!(r.latent, b);
        assert_eq!(r.blur, k);
        assert!(r.trace.is_empty());
    }

    #[test]
    fn identity_blur_limit() {
        let b = render::<f64>(SceneKind::Shapes, 96, 96, 2);
        let cfg = DeblurConfig::default().with_kernel_size(5);
        let r = preliminary_restore(&b, &cfg).unwrap();
        assert!(delta_distance(r.kernel()) <= 0.1, "{}", delta_distance(r.kernel()));
        assert!(r.latent.psnr(&b).unwrap() >= 35.0, "{}", r.latent.psnr(&b).unwrap());
        assert_eq!(r.trace.len(), r.schedule.as_ref().unwrap().n_levels);
    }

    #[test]
    fn identity_blur_textured_keeps_psnr() {
        let b = render::<f64>(SceneKind::Landscape, 96, 96, 2);
        let cfg = DeblurConfig::default().with_kernel_size(5);
        let r = preliminary_restore(&b, &cfg).unwrap();
        assert!(r.latent.psnr(&b).unwrap() >= 35.0, "{}", r.latent.psnr(&b).unwrap());
    }

    #[test]
    fn trace_csv_rows() {
        let b = render::<f64>(SceneKind::StillLife, 64, 48, 2);
        let cfg = DeblurConfig::default().with_kernel_size(5);
        let r = blind_deblur(&b, &cfg).unwrap();
        let rows = r.trace_csv().lines().count() - 1;
        let levels = r.schedule.as_ref().unwrap().n_levels;
        assert_eq!(rows, (levels + 1) * cfg.max_iteration);
        assert_eq!(r.trace.len(), levels + cfg.max_iteration);
    }
}
