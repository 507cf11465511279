//! Sharp-image reconstruction by local self-example matching.
//!
//! Every patch of the current latent image looks for its nearest neighbour in
//! a small window of the coarser, sharper prior around its projected
//! position; the matched prior patches are pasted back with Hamming weights
//! and averaged where they overlap.

use rayon::prelude::*;

use crate::config::PatchConfig;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scalar::Real;

/// Separable 2D Hamming window.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightPatch<T> {
    pub size: usize,
    /// 1D profile `w(i) = 0.54 - 0.46 cos(2 pi i / (N - 1))`.
    pub profile: Vec<T>,
    /// `W(i, j) = w(i) w(j)`, row-major.
    pub weights: Vec<T>,
}

pub const HAMMING_THETA: f64 = 0.54;
pub const HAMMING_GAMMA: f64 = 0.46;

pub fn hamming_weights<T: Real>(n: usize) -> Result<WeightPatch<T>> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("Hamming window needs N >= 2, got {n}")));
    }
    let profile: Vec<T> = (0..n)
        .map(|i| {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64;
            T::lit(HAMMING_THETA - HAMMING_GAMMA * phase.cos())
        })
        .collect();
    let weights = (0..n * n).map(|k| profile[k / n] * profile[k % n]).collect();
    Ok(WeightPatch { size: n, profile, weights })
}

/// Anchor (top-left) positions of overlapping patches covering an image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
}

fn axis_anchors(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len - patch;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if *v.last().expect("at least one anchor") != last {
        v.push(last);
    }
    v
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if width < patch_size || height < patch_size {
            return Err(Error::DimensionMismatch(format!("{width}x{height} image is smaller than a {patch_size}x{patch_size} patch")));
        }
        Ok(Self {
            patch_size,
            stride,
            xs: axis_anchors(width, patch_size, stride.max(1)),
            ys: axis_anchors(height, patch_size, stride.max(1)),
        })
    }

    /// Anchors in raster order.
    pub fn anchors(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ys.iter().flat_map(move |&y| self.xs.iter().map(move |&x| (x, y)))
    }

    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of patches covering pixel `(x, y)`.
    pub fn coverage(&self, x: usize, y: usize) -> usize {
        let hits = |anchors: &[usize], p: usize| anchors.iter().filter(|&&a| a <= p && p < a + self.patch_size).count();
        hits(&self.xs, x) * hits(&self.ys, y)
    }
}

/// Best prior patch for one latent-image patch.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult<T> {
    /// Top-left of the patch in the latent image.
    pub source: (usize, usize),
    /// Top-left of the matched patch in the prior.
    pub matched: (usize, usize),
    /// Top-left the source projects to in the prior (before the window search).
    pub projected: (isize, isize),
    /// l2 distance between the two patches.
    pub distance: T,
    /// Number of candidate positions evaluated.
    pub candidates: usize,
}

/// Candidate range on one axis: offsets `-lo..=hi` around the projection, clipped.
fn candidate_range(projected: isize, lo: isize, hi: isize, prior_len: usize, patch: usize) -> (usize, usize) {
    let max_start = (prior_len - patch) as isize;
    let a = (projected - lo).max(0);
    let b = (projected + hi).min(max_start);
    if a > b {
        let c = projected.clamp(0, max_start) as usize;
        (c, c)
    } else {
        (a as usize, b as usize)
    }
}

/// Projects a top-left anchor at fine resolution onto the prior grid, keeping
/// patch centers aligned under the pixel-center resampling convention.
fn project(anchor: usize, half: usize, ratio: f64) -> isize {
    let center = (anchor + half) as f64;
    ((center + 0.5) / ratio - 0.5).round() as isize - half as isize
}

/// Offsets searched on each axis: `search_window - 2 * floor(patch / 2)` positions.
fn search_offsets(cfg: &PatchConfig) -> (isize, isize) {
    let n = (cfg.search_window - 2 * (cfg.patch_size / 2)).max(1) as isize;
    let lo = n / 2;
    (lo, n - 1 - lo)
}

/// Exhaustive nearest-neighbour scan in the local window of `x_pr` around the
/// projection of `anchor`. Ties go to the first candidate in raster order.
pub fn local_nn_search<T: Real>(
    x_l: &ImageBuffer<T>,
    x_pr: &ImageBuffer<T>,
    anchor: (usize, usize),
    cfg: &PatchConfig,
) -> Result<MatchResult<T>> {
    let p = cfg.patch_size;
    let (ax, ay) = anchor;
    if ax + p > x_l.width() || ay + p > x_l.height() {
        return Err(Error::AnchorOutOfBounds { x: ax, y: ay });
    }
    if x_pr.width() < p || x_pr.height() < p {
        return Err(Error::DimensionMismatch(format!("prior {}x{} is smaller than the patch", x_pr.width(), x_pr.height())));
    }
    let rx = x_l.width() as f64 / x_pr.width() as f64;
    let ry = x_l.height() as f64 / x_pr.height() as f64;
    let half = p / 2;
    let proj = (project(ax, half, rx), project(ay, half, ry));
    let (lo, hi) = search_offsets(cfg);
    let (x0, x1) = candidate_range(proj.0, lo, hi, x_pr.width(), p);
    let (y0, y1) = candidate_range(proj.1, lo, hi, x_pr.height(), p);

    let src: Vec<T> = (0..p * p).map(|k| x_l.get(ax + k % p, ay + k / p)).collect();
    let mut best = (T::infinity(), (x0, y0));
    let mut candidates = 0;
    for jy in y0..=y1 {
        for jx in x0..=x1 {
            candidates += 1;
            let mut d = T::zero();
            for dy in 0..p {
                let row = &x_pr.data()[(jy + dy) * x_pr.width() + jx..][..p];
                for (a, b) in row.iter().zip(&src[dy * p..(dy + 1) * p]) {
                    let e = *a - *b;
                    d = d + e * e;
                }
            }
            if d < best.0 {
                best = (d, (jx, jy));
            }
        }
    }
    Ok(MatchResult { source: anchor, matched: best.1, projected: proj, distance: best.0.sqrt(), candidates })
}

/// Matches every grid patch, in raster order of anchors.
pub fn match_patches<T: Real>(x_l: &ImageBuffer<T>, x_pr: &ImageBuffer<T>, cfg: &PatchConfig) -> Result<Vec<MatchResult<T>>> {
    let grid = PatchGrid::new(x_l.width(), x_l.height(), cfg.patch_size, cfg.stride)?;
    let anchors: Vec<(usize, usize)> = grid.anchors().collect();
    anchors.par_iter().map(|&a| local_nn_search(x_l, x_pr, a, cfg)).collect()
}

/// Hamming-weighted average of the matched prior patches placed at their source positions.
pub fn fuse_matches<T: Real>(
    width: usize,
    height: usize,
    x_pr: &ImageBuffer<T>,
    matches: &[MatchResult<T>],
    window: &WeightPatch<T>,
) -> ImageBuffer<T> {
    let p = window.size;
    let mut num = vec![T::zero(); width * height];
    let mut den = vec![T::zero(); width * height];
    // sequential reduction keeps the output bit-reproducible
    for m in matches {
        let (sx, sy) = m.source;
        let (mx, my) = m.matched;
        for dy in 0..p {
            for dx in 0..p {
                let w = window.weights[dy * p + dx];
                let idx = (sy + dy) * width + sx + dx;
                num[idx] = num[idx] + w * x_pr.get(mx + dx, my + dy);
                den[idx] = den[idx] + w;
            }
        }
    }
    let data = num.into_iter().zip(den).map(|(n, d)| n / d).collect();
    ImageBuffer::from_raw_unchecked(width, height, data)
}

/// Reconstructs a sharper version of `x_l` from the coarser prior `x_pr`.
pub fn reconstruct_sharp<T: Real>(x_l: &ImageBuffer<T>, x_pr: &ImageBuffer<T>, cfg: &PatchConfig) -> Result<ImageBuffer<T>> {
    Ok(reconstruct_with_matches(x_l, x_pr, cfg)?.0)
}

/// [`reconstruct_sharp`] that also returns the match field.
pub fn reconstruct_with_matches<T: Real>(
    x_l: &ImageBuffer<T>,
    x_pr: &ImageBuffer<T>,
    cfg: &PatchConfig,
) -> Result<(ImageBuffer<T>, Vec<MatchResult<T>>)> {
    let matches = match_patches(x_l, x_pr, cfg)?;
    let window = hamming_weights(cfg.patch_size)?;
    let out = fuse_matches(x_l.width(), x_l.height(), x_pr, &matches, &window);
    Ok((out, matches))
}

/// Two-channel image of match offsets (matched minus projected), mapped to
/// `[0, 1]` with 0.5 meaning no displacement.
pub fn match_offset_image<T: Real>(width: usize, height: usize, matches: &[MatchResult<T>], cfg: &PatchConfig) -> ImageBuffer<T> {
    let span = T::from_usize_lossy(cfg.search_window.max(1));
    let mut data = vec![T::lit(0.5); width * height * 2];
    for m in matches {
        let dx = T::lit((m.matched.0 as isize - m.projected.0) as f64);
        let dy = T::lit((m.matched.1 as isize - m.projected.1) as f64);
        let idx = (m.source.1 * width + m.source.0) * 2;
        data[idx] = T::lit(0.5) + dx / span;
        data[idx + 1] = T::lit(0.5) + dy / span;
    }
    ImageBuffer::with_channels(width, height, 2, data).expect("offset image has consistent shape")
}
