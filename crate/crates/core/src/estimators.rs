//! Center and scale estimators for per-product standardization.
//!
//! Quantiles use linear interpolation at position `(n - 1) * q` of the sorted
//! sample. The median is the middle order statistic for odd `n` and the mean of
//! the two middle order statistics for even `n`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normal-consistency constant for the median absolute deviation.
pub const MAD_NORMAL_CONSISTENCY: f64 = 1.4826;
/// Normal-consistency constant for the interquartile range.
pub const IQR_NORMAL_CONSISTENCY: f64 = 1.0 / 1.349;
/// Huber tuning constant for the robust standard deviation.
pub const HUBER_K: f64 = 1.5;
pub const HUBER_TOL: f64 = 1e-8;
pub const HUBER_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMethod {
    Mean,
    Median,
}

impl CenterMethod {
    pub const ALL: [CenterMethod; 2] = [CenterMethod::Mean, CenterMethod::Median];

    pub fn label(self) -> &'static str {
        match self {
            CenterMethod::Mean => "Mean",
            CenterMethod::Median => "Median",
        }
    }

    pub fn estimate(self, xs: &[f64]) -> Result<f64> {
        center(xs, self)
    }
}

impl fmt::Display for CenterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CenterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(CenterMethod::Mean),
            "median" => Ok(CenterMethod::Median),
            other => Err(Error::domain(format!(
                "unknown center method `{other}` (expected mean|median)"
            ))),
        }
    }
}

/// Scale estimator together with its tuning or consistency constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ScaleMethod {
    StdDev,
    RobustStdDev { k: f64 },
    Mad { c: f64 },
    Iqr { c: f64 },
}

impl ScaleMethod {
    pub const fn robust_std_dev() -> Self {
        ScaleMethod::RobustStdDev { k: HUBER_K }
    }

    pub const fn mad() -> Self {
        ScaleMethod::Mad {
            c: MAD_NORMAL_CONSISTENCY,
        }
    }

    pub const fn iqr() -> Self {
        ScaleMethod::Iqr {
            c: IQR_NORMAL_CONSISTENCY,
        }
    }

    /// The four estimators with their default constants, in table column order.
    pub fn defaults() -> [ScaleMethod; 4] {
        [
            ScaleMethod::iqr(),
            ScaleMethod::mad(),
            ScaleMethod::robust_std_dev(),
            ScaleMethod::StdDev,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            ScaleMethod::StdDev => "StdDev",
            ScaleMethod::RobustStdDev { .. } => "RStdDev",
            ScaleMethod::Mad { .. } => "MAD",
            ScaleMethod::Iqr { .. } => "IQR",
        }
    }

    /// Column index in the wide ARL table layout.
    pub fn column(&self) -> usize {
        match self {
            ScaleMethod::Iqr { .. } => 0,
            ScaleMethod::Mad { .. } => 1,
            ScaleMethod::RobustStdDev { .. } => 2,
            ScaleMethod::StdDev => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScaleMethod::StdDev => Ok(()),
            ScaleMethod::RobustStdDev { k } if k > 0.0 && k.is_finite() => Ok(()),
            ScaleMethod::Mad { c } | ScaleMethod::Iqr { c } if c > 0.0 && c.is_finite() => Ok(()),
            other => Err(Error::domain(format!(
                "{} constant must be positive and finite",
                other.label()
            ))),
        }
    }

    pub fn estimate(&self, xs: &[f64]) -> Result<f64> {
        match *self {
            ScaleMethod::StdDev => sample_std_dev(xs),
            ScaleMethod::RobustStdDev { k } => robust_std_dev(xs, k, HUBER_TOL, HUBER_MAX_ITER),
            ScaleMethod::Mad { c } => mad(xs, c),
            ScaleMethod::Iqr { c } => iqr(xs, c),
        }
    }

    /// Same estimator family with its consistency constant set to one.
    /// `StdDev` and `RobustStdDev` are returned unchanged.
    pub fn unscaled(self) -> Self {
        match self {
            ScaleMethod::Mad { .. } => ScaleMethod::Mad { c: 1.0 },
            ScaleMethod::Iqr { .. } => ScaleMethod::Iqr { c: 1.0 },
            other => other,
        }
    }
}

impl fmt::Display for ScaleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ScaleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stddev" | "sd" => Ok(ScaleMethod::StdDev),
            "rstd" | "rstddev" | "robust" => Ok(ScaleMethod::robust_std_dev()),
            "mad" => Ok(ScaleMethod::mad()),
            "iqr" => Ok(ScaleMethod::iqr()),
            other => Err(Error::domain(format!(
                "unknown scale method `{other}` (expected stddev|rstd|mad|iqr)"
            ))),
        }
    }
}

fn check_finite(xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::domain(format!("non-finite value at position {i}"))),
        None => Ok(()),
    }
}

fn require_len(xs: &[f64], needed: usize) -> Result<()> {
    if xs.len() < needed {
        return Err(Error::InsufficientData {
            needed,
            got: xs.len(),
        });
    }
    check_finite(xs)
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn median_of_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Quantile of an already sorted, non-empty sample.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = (v.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] + frac * (v[hi] - v[lo])
}

pub fn center(xs: &[f64], method: CenterMethod) -> Result<f64> {
    require_len(xs, 1)?;
    Ok(match method {
        CenterMethod::Mean => mean(xs),
        CenterMethod::Median => median_of_sorted(&sorted(xs)),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> Result<f64> {
    center(xs, CenterMethod::Median)
}

/// Standard deviation with the `n - 1` denominator.
pub fn sample_std_dev(xs: &[f64]) -> Result<f64> {
    require_len(xs, 2)?;
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Ok((ss / (xs.len() - 1) as f64).sqrt())
}

/// `c * median(|x - median(x)|)`.
pub fn mad(xs: &[f64], c: f64) -> Result<f64> {
    require_len(xs, 2)?;
    let med = median_of_sorted(&sorted(xs));
    let dev: Vec<f64> = xs.iter().map(|x| (x - med).abs()).collect();
    Ok(c * median_of_sorted(&sorted(&dev)))
}

/// `c * (Q3 - Q1)`.
pub fn iqr(xs: &[f64], c: f64) -> Result<f64> {
    require_len(xs, 2)?;
    let v = sorted(xs);
    Ok(c * (quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25)))
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E[psi_k(Z)^2]` for a standard normal `Z`, the Fisher-consistency target
/// of Huber's scale equation.
pub fn huber_beta(k: f64) -> f64 {
    let tail = 1.0 - std_normal_cdf(k);
    (2.0 * std_normal_cdf(k) - 1.0) - 2.0 * k * std_normal_pdf(k) + 2.0 * k * k * tail
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberFit {
    pub location: f64,
    pub scale: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Huber's Proposal 2: joint M-estimate of location and scale.
///
/// Starts from (median, normalized MAD); when the MAD is zero on non-constant
/// data the sample standard deviation seeds the scale instead. Iteration stops
/// once the relative change in scale drops below `tol`.
pub fn huber_proposal2(xs: &[f64], k: f64, tol: f64, max_iter: usize) -> Result<HuberFit> {
    require_len(xs, 2)?;
    if !(k > 0.0) || !(tol > 0.0) {
        return Err(Error::domain("huber tuning constant and tolerance must be positive"));
    }
    let v = sorted(xs);
    let mut loc = median_of_sorted(&v);
    if v[0] == v[v.len() - 1] {
        return Ok(HuberFit {
            location: loc,
            scale: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let mut scale = mad(xs, MAD_NORMAL_CONSISTENCY)?;
    if scale == 0.0 {
        scale = sample_std_dev(xs)?;
    }

    let target = (xs.len() - 1) as f64 * huber_beta(k);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut wsum = 0.0;
        let mut wxsum = 0.0;
        let mut psi2 = 0.0;
        for &x in xs {
            let r = (x - loc) / scale;
            let clipped = r.clamp(-k, k);
            psi2 += clipped * clipped;
            let w = if r.abs() <= k { 1.0 } else { k / r.abs() };
            wsum += w;
            wxsum += w * x;
        }
        let next_scale = scale * (psi2 / target).sqrt();
        loc = wxsum / wsum;
        let delta = (next_scale - scale).abs();
        scale = next_scale;
        if delta < tol * scale || scale == 0.0 {
            converged = true;
            break;
        }
    }
    Ok(HuberFit {
        location: loc,
        scale,
        iterations,
        converged,
    })
}

pub fn robust_std_dev(xs: &[f64], k: f64, tol: f64, max_iter: usize) -> Result<f64> {
    huber_proposal2(xs, k, tol, max_iter).map(|fit| fit.scale)
}
