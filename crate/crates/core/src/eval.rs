//! Restoration quality metrics and benchmark reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::kernel::BlurKernel;
use crate::scalar::Real;

/// Error ratios below this count as a success.
pub const SUCCESS_THRESHOLD: f64 = 5.0;

/// `||x - x_khat||^2 / ||x - x_k||^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRatio {
    pub value: f64,
    /// True when the denominator was below the floor and replaced by it.
    pub floored: bool,
}

/// Error ratio of a restoration with an estimated kernel (`x_khat`) against the
/// restoration with the true kernel (`x_k`), both compared to the sharp `x`.
///
/// A vanishing denominator is floored at `eps * max(1, ||x||^2)` and flagged.
pub fn error_ratio<T: Real>(x: &ImageBuffer<T>, x_khat: &ImageBuffer<T>, x_k: &ImageBuffer<T>) -> Result<ErrorRatio> {
    let num = x.sq_dist(x_khat)?.as_f64();
    let den = x.sq_dist(x_k)?.as_f64();
    let norm: f64 = x.data().iter().map(|v| v.as_f64().powi(2)).sum();
    let floor = f64::EPSILON * norm.max(1.0);
    if den < floor {
        Ok(ErrorRatio { value: num / floor, floored: true })
    } else {
        Ok(ErrorRatio { value: num / den, floored: false })
    }
}

/// Maximum normalized cross-correlation over all integer shifts.
pub fn kernel_similarity<T: Real>(k1: &BlurKernel<T>, k2: &BlurKernel<T>) -> f64 {
    let s = k1.size().max(k2.size());
    let a = k1.padded_to(s);
    let b = k2.padded_to(s);
    let na = a.weights().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb = b.weights().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let s = s as isize;
    let mut best = f64::MIN;
    for dy in -(s - 1)..s {
        for dx in -(s - 1)..s {
            let mut acc = 0.0;
            for y in 0.max(dy)..s.min(s + dy) {
                for x in 0.max(dx)..s.min(s + dx) {
                    acc += a.get(x as usize, y as usize).as_f64() * b.get((x - dx) as usize, (y - dy) as usize).as_f64();
                }
            }
            best = best.max(acc);
        }
    }
    best / (na * nb)
}

/// One benchmark instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub name: String,
    pub error_ratio: f64,
    pub ratio_floored: bool,
    pub kernel_similarity: f64,
    pub psnr: f64,
    pub runtime_seconds: f64,
}

impl EvalRecord {
    pub fn success(&self) -> bool {
        self.error_ratio <= SUCCESS_THRESHOLD
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregate statistics of a report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub mean_ratio: f64,
    pub median_ratio: f64,
    pub worst_ratio: f64,
    /// Fraction of records with `r <= 5`.
    pub success_rate: f64,
    pub median_similarity: f64,
}

impl EvalReport {
    pub fn summary(&self) -> EvalSummary {
        let n = self.records.len();
        let ratios: Vec<f64> = self.records.iter().map(|r| r.error_ratio).collect();
        EvalSummary {
            count: n,
            mean_ratio: ratios.iter().sum::<f64>() / n.max(1) as f64,
            median_ratio: median(ratios.clone()),
            worst_ratio: ratios.iter().copied().fold(f64::NAN, f64::max),
            success_rate: self.records.iter().filter(|r| r.success()).count() as f64 / n.max(1) as f64,
            median_similarity: median(self.records.iter().map(|r| r.kernel_similarity).collect()),
        }
    }

    /// Per-record CSV with a header row. Numbers use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,error_ratio,ratio_floored,kernel_similarity,psnr,runtime_seconds\n");
        for r in &self.records {
            let _ =
                writeln!(s, "{},{},{},{},{},{}", r.name, r.error_ratio, r.ratio_floored, r.kernel_similarity, r.psnr, r.runtime_seconds);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Parse(format!("line {}: expected 6 fields, got {}", i + 1, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)));
            records.push(EvalRecord {
                name: f[0].to_string(),
                error_ratio: num(f[1])?,
                ratio_floored: f[2].parse().map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?,
                kernel_similarity: num(f[3])?,
                psnr: num(f[4])?,
                runtime_seconds: num(f[5])?,
            });
        }
        Ok(Self { records })
    }
}
