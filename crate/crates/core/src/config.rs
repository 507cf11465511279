//! Solver parameters. All fields have defaults and can be overridden from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Local self-example matching parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    /// Odd patch side.
    pub patch_size: usize,
    /// Anchor spacing; 2 gives a bit more than 50% overlap for 5x5 patches.
    pub stride: usize,
    /// Side of the square search region around the projected position.
    pub search_window: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { patch_size: 5, stride: 2, search_window: 10 }
    }
}

impl PatchConfig {
    pub fn overlap_fraction(&self) -> f64 {
        1.0 - self.stride as f64 / self.patch_size as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    /// Penalty parameter, fixed for the whole run.
    pub rho: f64,
    pub iterations: usize,
    /// Stop once `||grad x - z|| / sqrt(n)` drops below this.
    pub tolerance: f64,
    /// Iterative x-update of the pose-basis solver: iteration cap and relative residual target.
    pub cg_iterations: usize,
    pub cg_tolerance: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self { rho: 1.0, iterations: 30, tolerance: 1e-4, cg_iterations: 100, cg_tolerance: 1e-5 }
    }
}

/// Kernel clean-up thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    /// Entries below this fraction of the peak are zeroed.
    pub floor_fraction: f64,
    /// Connected components lighter than this fraction of the heaviest one are dropped.
    pub component_fraction: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { floor_fraction: 0.05, component_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidedConfig {
    pub radius: usize,
    pub eps: f64,
}

impl Default for GuidedConfig {
    fn default() -> Self {
        Self { radius: 4, eps: 1e-4 }
    }
}

/// Pose grid of the projective (spatially varying) blur model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseConfig {
    /// In-plane rotations span `[-extent, extent]` degrees about the image center.
    pub rotation_extent_deg: f64,
    /// Odd number of rotation samples (1 = translations only).
    pub rotation_steps: usize,
    /// Translation spacing in pixels; the grid covers the level's kernel support.
    pub translation_step: f64,
    /// Explicit full-resolution homographies (row-major 3x3) replacing the grid.
    pub homographies: Option<Vec<[[f64; 3]; 3]>>,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self { rotation_extent_deg: 2.0, rotation_steps: 5, translation_step: 1.0, homographies: None }
    }
}

impl PoseConfig {
    pub fn translation_only() -> Self {
        Self { rotation_steps: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation_steps.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("rotation_steps {} must be odd", self.rotation_steps)));
        }
        if !(self.rotation_extent_deg >= 0.0) || !(self.translation_step > 0.0) {
            return Err(Error::InvalidConfig("pose grid extents and steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeblurConfig {
    /// l2 kernel weight in the coarse-scale kernel estimate.
    pub lambda1: f64,
    /// Sparsity weight of the compensation field in the coarse-scale estimate.
    pub lambda2: f64,
    /// l2 kernel weight during refinement.
    pub lambda3: f64,
    /// Sparsity weight during refinement.
    pub lambda4: f64,
    /// TV weight of the non-blind step.
    pub mu: f64,
    /// Per-level pyramid scale factor.
    pub beta: f64,
    /// Alternations per scale (and refinement iterations).
    pub max_iteration: usize,
    /// Odd kernel support at the finest scale.
    pub kernel_size: usize,
    /// (k, v) alternations inside one kernel estimate.
    pub kernel_inner_iterations: usize,
    /// Scale of the gradient data term against `lambda1 ||k||^2`, before
    /// normalization by gradient energy and kernel area.
    pub kernel_data_weight: f64,
    /// Smallest allowed side of the coarsest (prior) level.
    pub min_coarse_dim: usize,
    pub patch: PatchConfig,
    pub admm: AdmmConfig,
    pub postprocess: PostprocessConfig,
    pub guided: GuidedConfig,
    pub pose: PoseConfig,
    /// Accepted for reproducibility bookkeeping; the pipeline itself draws no random numbers.
    pub seed: u64,
}

impl Default for DeblurConfig {
    fn default() -> Self {
        Self {
            lambda1: 5.0,
            lambda2: 0.05,
            lambda3: 5.0,
            lambda4: 0.05,
            mu: 0.01,
            beta: 3f64.log2(),
            max_iteration: 3,
            kernel_size: 27,
            kernel_inner_iterations: 4,
            kernel_data_weight: 15000.0,
            min_coarse_dim: 5,
            patch: PatchConfig::default(),
            admm: AdmmConfig::default(),
            postprocess: PostprocessConfig::default(),
            guided: GuidedConfig::default(),
            pose: PoseConfig::default(),
            seed: 0,
        }
    }
}

impl DeblurConfig {
    pub fn with_kernel_size(mut self, kernel_size: usize) -> Self {
        self.kernel_size = kernel_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("mu", self.mu),
            ("kernel_data_weight", self.kernel_data_weight),
            ("admm.rho", self.admm.rho),
            ("admm.cg_tolerance", self.admm.cg_tolerance),
            ("guided.eps", self.guided.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.beta > 1.0) {
            return Err(Error::InvalidConfig(format!("beta must be > 1, got {}", self.beta)));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("kernel_size {} is not odd", self.kernel_size)));
        }
        let p = &self.patch;
        if p.patch_size.is_multiple_of(2) || p.patch_size < 3 {
            return Err(Error::InvalidConfig(format!("patch_size {} must be odd and >= 3", p.patch_size)));
        }
        if p.search_window < p.patch_size {
            return Err(Error::InvalidConfig("search_window must be >= patch_size".into()));
        }
        if p.stride == 0 || p.stride > p.patch_size {
            return Err(Error::InvalidConfig("stride must be in 1..=patch_size".into()));
        }
        if self.guided.radius == 0 {
            return Err(Error::InvalidConfig("guided.radius must be >= 1".into()));
        }
        self.pose.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = DeblurConfig::default();
        assert_eq!((c.lambda1, c.lambda3, c.lambda2, c.lambda4, c.mu), (5.0, 5.0, 0.05, 0.05, 0.01));
        assert!((c.beta - 1.584_962_5).abs() < 1e-7);
        assert_eq!(c.max_iteration, 3);
        assert_eq!((c.patch.patch_size, c.patch.search_window), (5, 10));
        assert!(c.patch.overlap_fraction() >= 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn json_partial_override() {
        let c = DeblurConfig::from_json(r#"{"kernel_size": 15, "admm": {"iterations": 5}}"#).unwrap();
        assert_eq!(c.kernel_size, 15);
        assert_eq!(c.admm.iterations, 5);
        assert_eq!(c.admm.rho, 1.0);
        assert_eq!(DeblurConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn invalid_rejected() {
        for bad in [r#"{"beta": 1.0}"#, r#"{"mu": 0}"#, r#"{"kernel_size": 4}"#, r#"{"patch": {"patch_size": 4}}"#] {
            assert!(DeblurConfig::from_json(bad).is_err(), "{bad}");
        }
    }
}
