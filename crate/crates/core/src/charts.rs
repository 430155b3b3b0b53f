//! Individuals/moving-range (IR) and EWMA control charts, plus run-length
//! bookkeeping.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bias constant of the moving range of two observations.
pub const D2: f64 = 1.128;
/// Upper moving-range limit factor for ranges of two.
pub const D4: f64 = 3.267;
/// Individuals limit multiplier, 3 / d2 rounded as tabulated.
pub const IR_MULTIPLIER: f64 = 2.66;
pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_WIDTH: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    Ir,
    Ewma,
}

impl ChartKind {
    pub fn label(self) -> &'static str {
        match self {
            ChartKind::Ir => "IR",
            ChartKind::Ewma => "EWMA",
        }
    }
}

impl fmt::Display for ChartKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ChartKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ir" => Ok(ChartKind::Ir),
            "ewma" => Ok(ChartKind::Ewma),
            other => Err(Error::domain(format!("unknown chart `{other}` (expected ir|ewma)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartPoint {
    pub value: f64,
    pub flag: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrLimits {
    pub center: f64,
    pub lcl: f64,
    pub ucl: f64,
    pub mr_bar: f64,
    pub mr_ucl: f64,
}

fn moving_ranges(series: &[f64]) -> Vec<f64> {
    series.windows(2).map(|w| (w[1] - w[0]).abs()).collect()
}

impl IrLimits {
    /// Phase-I limits: mean ± 2.66·MR̄, moving-range UCL 3.267·MR̄.
    pub fn estimate(series: &[f64]) -> Result<Self> {
        if series.len() < 3 {
            return Err(Error::InsufficientData {
                needed: 3,
                got: series.len(),
            });
        }
        let center = series.iter().sum::<f64>() / series.len() as f64;
        let mrs = moving_ranges(series);
        let mr_bar = mrs.iter().sum::<f64>() / mrs.len() as f64;
        if !(mr_bar > 0.0) {
            return Err(Error::DegenerateLimits(format!(
                "average moving range is {mr_bar} (constant series)"
            )));
        }
        Ok(IrLimits {
            center,
            lcl: center - IR_MULTIPLIER * mr_bar,
            ucl: center + IR_MULTIPLIER * mr_bar,
            mr_bar,
            mr_ucl: D4 * mr_bar,
        })
    }

    /// Limits for a process with known mean and standard deviation: center ± 3σ.
    pub fn known(center: f64, sigma: f64) -> Self {
        let mr_bar = D2 * sigma;
        IrLimits {
            center,
            lcl: center - 3.0 * sigma,
            ucl: center + 3.0 * sigma,
            mr_bar,
            mr_ucl: D4 * mr_bar,
        }
    }

    pub fn flags(&self, series: &[f64]) -> Vec<bool> {
        series.iter().map(|&v| v < self.lcl || v > self.ucl).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IrChart {
    pub center_line: f64,
    pub ucl: f64,
    pub lcl: f64,
    pub mr_bar: f64,
    pub mr_ucl: f64,
    /// Whether the limits were supplied rather than estimated from `points`.
    pub frozen: bool,
    pub points: Vec<ChartPoint>,
    /// `mr_points[i]` is the range between points `i` and `i + 1`.
    pub mr_points: Vec<ChartPoint>,
}

impl IrChart {
    pub fn limits(&self) -> IrLimits {
        IrLimits {
            center: self.center_line,
            lcl: self.lcl,
            ucl: self.ucl,
            mr_bar: self.mr_bar,
            mr_ucl: self.mr_ucl,
        }
    }

    pub fn flags(&self) -> Vec<bool> {
        self.points.iter().map(|p| p.flag).collect()
    }

    pub fn n_flagged(&self) -> usize {
        self.points.iter().filter(|p| p.flag).count()
    }

    pub fn any_signal(&self) -> bool {
        self.points.iter().chain(&self.mr_points).any(|p| p.flag)
    }
}

pub fn ir_chart(series: &[f64], limits_from: Option<&IrLimits>) -> Result<IrChart> {
    let (limits, frozen) = match limits_from {
        Some(l) => {
            if series.is_empty() {
                return Err(Error::InsufficientData { needed: 1, got: 0 });
            }
            (*l, true)
        }
        None => (IrLimits::estimate(series)?, false),
    };
    let points = series
        .iter()
        .map(|&value| ChartPoint {
            value,
            flag: value < limits.lcl || value > limits.ucl,
        })
        .collect();
    let mr_points = moving_ranges(series)
        .into_iter()
        .map(|value| ChartPoint {
            value,
            flag: value > limits.mr_ucl,
        })
        .collect();
    Ok(IrChart {
        center_line: limits.center,
        ucl: limits.ucl,
        lcl: limits.lcl,
        mr_bar: limits.mr_bar,
        mr_ucl: limits.mr_ucl,
        frozen,
        points,
        mr_points,
    })
}

/// Center and process sigma an EWMA chart is built around.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EwmaLimits {
    pub center: f64,
    pub sigma: f64,
}

impl EwmaLimits {
    /// Series mean, and sigma from the average moving range (MR̄ / d2).
    pub fn estimate(series: &[f64]) -> Result<Self> {
        if series.len() < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                got: series.len(),
            });
        }
        let center = series.iter().sum::<f64>() / series.len() as f64;
        let mrs = moving_ranges(series);
        let mr_bar = mrs.iter().sum::<f64>() / mrs.len() as f64;
        Ok(EwmaLimits {
            center,
            sigma: mr_bar / D2,
        })
    }
}

/// Half-width of the EWMA limits at step `i` (1-based).
pub fn ewma_half_width(lambda: f64, width: f64, sigma: f64, i: usize) -> f64 {
    let decay = (1.0 - lambda).powi(2 * i as i32);
    width * sigma * (lambda / (2.0 - lambda) * (1.0 - decay)).sqrt()
}

pub fn ewma_asymptotic_half_width(lambda: f64, width: f64, sigma: f64) -> f64 {
    width * sigma * (lambda / (2.0 - lambda)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EwmaChart {
    pub lambda: f64,
    pub width: f64,
    pub center: f64,
    pub sigma: f64,
    pub z0: f64,
    pub frozen: bool,
    pub values: Vec<f64>,
    pub z: Vec<f64>,
    /// `(lcl_i, ucl_i)` for each step.
    pub limits: Vec<(f64, f64)>,
    pub flags: Vec<bool>,
}

impl EwmaChart {
    pub fn n_flagged(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn any_signal(&self) -> bool {
        self.flags.iter().any(|&f| f)
    }
}

/// EWMA chart `z_i = λ·y_i + (1 − λ)·z_{i−1}` starting from the series mean
/// (estimation mode) or the supplied center (frozen mode).
pub fn ewma_chart(
    series: &[f64],
    lambda: f64,
    width: f64,
    limits_from: Option<EwmaLimits>,
) -> Result<EwmaChart> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::domain(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    if !(width > 0.0) {
        return Err(Error::domain(format!("limit width must be positive, got {width}")));
    }
    if series.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let (limits, frozen) = match limits_from {
        Some(l) => (l, true),
        None => (EwmaLimits::estimate(series)?, false),
    };
    let z0 = limits.center;
    let mut z = Vec::with_capacity(series.len());
    let mut bounds = Vec::with_capacity(series.len());
    let mut flags = Vec::with_capacity(series.len());
    let mut prev = z0;
    for (k, &y) in series.iter().enumerate() {
        let zi = lambda * y + (1.0 - lambda) * prev;
        let hw = ewma_half_width(lambda, width, limits.sigma, k + 1);
        let (lcl, ucl) = (limits.center - hw, limits.center + hw);
        z.push(zi);
        bounds.push((lcl, ucl));
        flags.push(zi < lcl || zi > ucl);
        prev = zi;
    }
    Ok(EwmaChart {
        lambda,
        width,
        center: limits.center,
        sigma: limits.sigma,
        z0,
        frozen,
        values: series.to_vec(),
        z,
        limits: bounds,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunLengthStats {
    pub run_lengths: Vec<usize>,
    pub arl: Option<f64>,
    pub n_signals: usize,
    /// Observations after the last signal, if any.
    pub censored_tail: Option<usize>,
}

/// Splits a flag sequence into run lengths: each run counts observations
/// since the previous signal (or the start) up to and including a signal.
pub fn run_lengths(flags: &[bool]) -> RunLengthStats {
    let mut runs = Vec::new();
    let mut current = 0usize;
    for &f in flags {
        current += 1;
        if f {
            runs.push(current);
            current = 0;
        }
    }
    let n_signals = runs.len();
    let arl = (n_signals > 0).then(|| runs.iter().sum::<usize>() as f64 / n_signals as f64);
    RunLengthStats {
        run_lengths: runs,
        arl,
        n_signals,
        censored_tail: (current > 0).then_some(current),
    }
}

/// CSV columns: index, value, center, lcl, ucl, flag, moving_range, mr_ucl, mr_flag.
pub fn write_ir_csv<W: Write>(chart: &IrChart, writer: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["index", "value", "center", "lcl", "ucl", "flag", "moving_range", "mr_ucl", "mr_flag"])?;
    for (i, p) in chart.points.iter().enumerate() {
        let (mr, mr_flag) = match i.checked_sub(1).map(|j| chart.mr_points[j]) {
            Some(m) => (m.value.to_string(), m.flag.to_string()),
            None => (String::new(), String::new()),
        };
        wtr.write_record([
            i.to_string(),
            p.value.to_string(),
            chart.center_line.to_string(),
            chart.lcl.to_string(),
            chart.ucl.to_string(),
            p.flag.to_string(),
            mr,
            chart.mr_ucl.to_string(),
            mr_flag,
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// CSV columns: index, value, z, center, lcl, ucl, flag.
pub fn write_ewma_csv<W: Write>(chart: &EwmaChart, writer: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["index", "value", "z", "center", "lcl", "ucl", "flag"])?;
    for i in 0..chart.z.len() {
        wtr.write_record([
            i.to_string(),
            chart.values[i].to_string(),
            chart.z[i].to_string(),
            chart.center.to_string(),
            chart.limits[i].0.to_string(),
            chart.limits[i].1.to_string(),
            chart.flags[i].to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn ir_example() {
        let c = ir_chart(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0], None).unwrap();
        assert_eq!(c.center_line, 1.5);
        assert_eq!(c.mr_bar, 1.0);
        assert_relative_eq!(c.ucl, 4.16, max_relative = 1e-12);
        assert_relative_eq!(c.lcl, -1.16, max_relative = 1e-12);
        assert_relative_eq!(c.mr_ucl, 3.267);
        assert_eq!(c.mr_points.len(), 5);
        assert!(!c.any_signal());
        assert!(c.lcl < c.center_line && c.center_line < c.ucl);
    }

    #[test]
    fn ir_degenerate_and_short() {
        assert!(matches!(ir_chart(&[2.0; 5], None), Err(Error::DegenerateLimits(_))));
        assert!(matches!(ir_chart(&[1.0, 2.0], None), Err(Error::InsufficientData { .. })));
        let frozen = IrLimits::known(0.0, 1.0);
        let c = ir_chart(&[3.5], Some(&frozen)).unwrap();
        assert!(c.frozen && c.points[0].flag && c.mr_points.is_empty());
    }

    #[test]
    fn ir_moving_range_flags() {
        let limits = IrLimits::known(0.0, 1.0);
        let c = ir_chart(&[-2.5, 2.5, 0.0], Some(&limits)).unwrap();
        assert_eq!(c.flags(), vec![false, false, false]);
        assert!(c.mr_points[0].flag && !c.mr_points[1].flag);
        assert!(c.any_signal());
    }

    #[test]
    fn ir_false_alarm_rate_at_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let series: Vec<f64> = (0..1_000_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = ir_chart(&series, Some(&IrLimits::known(0.0, 1.0))).unwrap();
        let frac = c.n_flagged() as f64 / series.len() as f64;
        assert!((frac - 0.0027).abs() < 0.0003, "{frac}");
    }

    #[test]
    fn ewma_examples() {
        let c = ewma_chart(&[4.0; 10], 0.2, 3.0, None).unwrap();
        assert!(c.z.iter().all(|&z| z == 4.0));
        assert!(!c.any_signal());

        let c = ewma_chart(&[0.0, 1.0], 0.2, 3.0, Some(EwmaLimits { center: 0.5, sigma: 1.0 })).unwrap();
        assert_relative_eq!(c.z[0], 0.4, max_relative = 1e-12);
        // 0.2 * 1 + 0.8 * 0.4
        assert_relative_eq!(c.z[1], 0.52, max_relative = 1e-12);

        assert_relative_eq!(ewma_asymptotic_half_width(0.2, 3.0, 1.0), 1.0, max_relative = 1e-12);
        assert!(ewma_chart(&[1.0, 2.0], 1.0, 3.0, None).is_err());
        assert!(ewma_chart(&[1.0, 2.0], 0.0, 3.0, None).is_err());
    }

    #[test]
    fn ewma_limits_widen_to_asymptote() {
        let asym = ewma_asymptotic_half_width(0.2, 3.0, 1.0);
        let widths: Vec<f64> = (1..=200).map(|i| ewma_half_width(0.2, 3.0, 1.0, i)).collect();
        // strict until (1 - λ)^(2i) falls below machine precision
        assert!(widths.windows(2).take(60).all(|w| w[1] > w[0]));
        assert!(widths.windows(2).all(|w| w[1] >= w[0]));
        assert!(widths[99..].iter().all(|w| (asym - w).abs() < 1e-9));
    }

    #[test]
    fn run_length_examples() {
        let r = run_lengths(&[false, false, true, false, true]);
        assert_eq!(r.run_lengths, vec![3, 2]);
        assert_eq!(r.arl, Some(2.5));
        assert_eq!(r.censored_tail, None);
        let r = run_lengths(&[true]);
        assert_eq!((r.run_lengths.clone(), r.arl), (vec![1], Some(1.0)));
        let r = run_lengths(&[false; 3]);
        assert_eq!((r.n_signals, r.arl, r.censored_tail), (0, None, Some(3)));
    }

    #[test]
    fn shewhart_arl_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let limits = IrLimits::known(0.0, 1.0);
        let mut runs = Vec::new();
        while runs.len() < 2_000 {
            let mut n = 0usize;
            loop {
                n += 1;
                let y: f64 = StandardNormal.sample(&mut rng);
                if y < limits.lcl || y > limits.ucl {
                    break;
                }
            }
            runs.push(n);
        }
        let arl = runs.iter().sum::<usize>() as f64 / runs.len() as f64;
        assert!((arl / 370.4 - 1.0).abs() < 0.05, "{arl}");
    }

    proptest! {
        #[test]
        fn ewma_recursion_identity(ys in prop::collection::vec(-100f64..100.0, 2..80), lambda in 0.01f64..0.99) {
            let c = ewma_chart(&ys, lambda, 3.0, None).unwrap();
            let mut prev = c.z0;
            for (y, z) in ys.iter().zip(&c.z) {
                prop_assert!(((z - prev) - lambda * (y - prev)).abs() < 1e-12 * (1.0 + y.abs() + prev.abs()) * 100.0);
                prev = *z;
            }
        }

        #[test]
        fn ir_flags_affine_invariant(ys in prop::collection::vec(-10f64..10.0, 1..50), a in 0.1f64..10.0, b in -5f64..5.0) {
            let lim = IrLimits { center: 0.3, lcl: -2.0, ucl: 2.5, mr_bar: 1.0, mr_ucl: 3.0 };
            let moved = IrLimits {
                center: a * lim.center + b,
                lcl: a * lim.lcl + b,
                ucl: a * lim.ucl + b,
                mr_bar: a * lim.mr_bar,
                mr_ucl: a * lim.mr_ucl,
            };
            let zs: Vec<f64> = ys.iter().map(|y| a * y + b).collect();
            // skip points sitting on a limit within rounding
            prop_assume!(ys.iter().all(|y| (y - lim.lcl).abs() > 1e-9 && (y - lim.ucl).abs() > 1e-9));
            prop_assert_eq!(lim.flags(&ys), moved.flags(&zs));
        }
    }
}
