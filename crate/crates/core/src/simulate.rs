//! Monte Carlo run-length studies for pooled short-run charts.
//!
//! A [`Scenario`] fixes the production schedule of a portfolio (which product
//! is made when, with which process factors) together with each product's
//! mean and standard deviation. Replicates redraw the measurements, optionally
//! contaminate them with a wide outlier process, shift the lots touched by a
//! root cause after the phase split, and chart the standardized stream.
//!
//! Replicate `r` draws from ChaCha8 seeded with the master seed on stream `r`,
//! so a study is bit-identical regardless of the rayon worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::charts::{
    ewma_chart, run_lengths, ChartKind, EwmaLimits, IrLimits, DEFAULT_LAMBDA, DEFAULT_WIDTH,
};
use crate::error::{Error, Result};
use crate::estimators::{robust_std_dev, CenterMethod, ScaleMethod, HUBER_K, HUBER_MAX_ITER, HUBER_TOL};
use crate::ingest::{load_portfolio, Observation, Portfolio, Schema};
use crate::standardize::{fit_product, Exclusion, ExclusionReason};

pub const DEFAULT_OUTLIER_PROB: f64 = 0.01;
pub const DEFAULT_OUTLIER_SD_MULTIPLE: f64 = 25.0;
pub const DEFAULT_PHASE_SPLIT: f64 = 0.75;
pub const DEFAULT_N_SIM: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledLot {
    pub lot_id: String,
    pub mfg_date: NaiveDate,
    pub factors: IndexMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioProduct {
    pub product_id: String,
    pub mu: f64,
    pub sigma: f64,
    pub lots: Vec<ScheduledLot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub products: Vec<ScenarioProduct>,
    pub factor_names: Vec<String>,
    pub outlier_prob: f64,
    pub outlier_sd_multiple: f64,
    pub phase_split: f64,
}

/// Number of production-ordered lots that belong to phase I.
pub fn phase_one_len(n: usize, phase_split: f64) -> usize {
    ((n as f64) * phase_split).floor() as usize
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.products.is_empty() {
            return Err(Error::domain("scenario has no products"));
        }
        for p in &self.products {
            if !(p.sigma > 0.0 && p.sigma.is_finite()) || !p.mu.is_finite() {
                return Err(Error::domain(format!(
                    "product `{}` needs finite mu and sigma > 0",
                    p.product_id
                )));
            }
            if p.lots.windows(2).any(|w| w[0].mfg_date > w[1].mfg_date) {
                return Err(Error::domain(format!(
                    "lot schedule of product `{}` is not chronological",
                    p.product_id
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return Err(Error::domain("outlier_prob must lie in [0, 1]"));
        }
        if !(self.outlier_sd_multiple > 0.0) {
            return Err(Error::domain("outlier_sd_multiple must be positive"));
        }
        if !(self.phase_split > 0.0 && self.phase_split < 1.0) {
            return Err(Error::domain("phase_split must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn n_lots(&self) -> usize {
        self.products.iter().map(|p| p.lots.len()).sum()
    }

    /// The schedule as a portfolio whose values are the product means.
    pub fn schedule(&self) -> Result<Portfolio> {
        let obs = self
            .products
            .iter()
            .flat_map(|p| {
                p.lots.iter().map(move |lot| Observation {
                    product_id: p.product_id.clone(),
                    lot_id: lot.lot_id.clone(),
                    mfg_date: lot.mfg_date,
                    value: p.mu,
                    factors: lot.factors.clone(),
                })
            })
            .collect();
        Portfolio::new(obs, self.factor_names.clone())
    }

    fn product(&self, id: &str) -> Option<&ScenarioProduct> {
        self.products.iter().find(|p| p.product_id == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedScenario {
    pub scenario: Scenario,
    /// Products left out of the scenario and why.
    pub dropped: Vec<Exclusion>,
}

/// Calibrates a scenario on real data: per-product median and robust standard
/// deviation, schedule copied lot for lot.
pub fn fit_scenario(p: &Portfolio) -> Result<FittedScenario> {
    let obs = p.observations();
    let mut products = Vec::new();
    let mut dropped = Vec::new();
    for (product_id, idx) in p.products() {
        let xs: Vec<f64> = idx.iter().map(|&i| obs[i].value).collect();
        if xs.len() < 2 {
            dropped.push(Exclusion {
                product_id: product_id.clone(),
                reason: ExclusionReason::TooFewLots,
            });
            continue;
        }
        let mu = CenterMethod::Median.estimate(&xs)?;
        let sigma = robust_std_dev(&xs, HUBER_K, HUBER_TOL, HUBER_MAX_ITER)?;
        if !(sigma > 0.0) {
            dropped.push(Exclusion {
                product_id: product_id.clone(),
                reason: ExclusionReason::ZeroScale,
            });
            continue;
        }
        let lots = idx
            .iter()
            .map(|&i| ScheduledLot {
                lot_id: obs[i].lot_id.clone(),
                mfg_date: obs[i].mfg_date,
                factors: obs[i].factors.clone(),
            })
            .collect();
        products.push(ScenarioProduct {
            product_id: product_id.clone(),
            mu,
            sigma,
            lots,
        });
    }
    if products.is_empty() {
        return Err(Error::domain("every product was dropped while fitting the scenario"));
    }
    Ok(FittedScenario {
        scenario: Scenario {
            products,
            factor_names: p.factor_names().to_vec(),
            outlier_prob: DEFAULT_OUTLIER_PROB,
            outlier_sd_multiple: DEFAULT_OUTLIER_SD_MULTIPLE,
            phase_split: DEFAULT_PHASE_SPLIT,
        },
        dropped,
    })
}

/// How many lots each synthetic product gets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LotCountSampler {
    Fixed { lots: usize },
    /// Rounded log-normal draw clamped to `[min, max]`. With `pin_max` the
    /// largest product is set to exactly `max` lots.
    LogNormal {
        median: f64,
        sigma: f64,
        min: usize,
        max: usize,
        #[serde(default)]
        pin_max: bool,
    },
}

impl LotCountSampler {
    fn sample(&self, rng: &mut impl Rng) -> usize {
        match *self {
            LotCountSampler::Fixed { lots } => lots,
            LotCountSampler::LogNormal {
                median,
                sigma,
                min,
                max,
                ..
            } => {
                let z: f64 = StandardNormal.sample(rng);
                let draw = (median.ln() + sigma * z).exp().round();
                (draw.max(min as f64).min(max as f64)) as usize
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_products: usize,
    pub lot_counts: LotCountSampler,
    pub date_range: (NaiveDate, NaiveDate),
    pub n_factors: usize,
    pub levels_per_factor: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// 147 products over one year, most with fewer than 10 lots and the
    /// largest with 173, seven process factors.
    pub fn portfolio_shaped(seed: u64) -> Self {
        SynthConfig {
            n_products: 147,
            lot_counts: LotCountSampler::LogNormal {
                median: 6.0,
                sigma: 1.3,
                min: 2,
                max: 173,
                pin_max: true,
            },
            date_range: (
                NaiveDate::from_ymd_opt(2025, 1, 1).expect("valid date"),
                NaiveDate::from_ymd_opt(2025, 12, 31).expect("valid date"),
            ),
            n_factors: 7,
            levels_per_factor: 8,
            seed,
        }
    }
}

/// How a synthetic factor's levels are assigned to lots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    /// One level per product (raw materials).
    PerProduct,
    /// Each product owns a small pool of levels; lots draw from it (tool copies).
    Pool,
    /// Drawn uniformly per lot (line, operator).
    PerLot,
}

/// Factor names of a synthetic portfolio and how each one is assigned.
pub fn synth_factor_names(n_factors: usize) -> Vec<(String, FactorKind)> {
    let n_varying = match n_factors {
        0 | 1 => 0,
        2 | 3 => 1,
        _ => 2,
    };
    let n_const = n_factors - n_varying;
    let mut out = Vec::with_capacity(n_factors);
    for i in 0..n_const {
        if i % 2 == 0 {
            out.push((format!("material{}", i / 2 + 1), FactorKind::PerProduct));
        } else {
            out.push((format!("tooling{}", i / 2 + 1), FactorKind::Pool));
        }
    }
    for name in ["line", "operator"].into_iter().take(n_varying) {
        out.push((name.to_string(), FactorKind::PerLot));
    }
    out
}

fn zipf_pick(rng: &mut impl Rng, levels: usize) -> usize {
    let total: f64 = (1..=levels).map(|l| 1.0 / l as f64).sum();
    let mut u = rng.random::<f64>() * total;
    for l in 0..levels {
        u -= 1.0 / (l + 1) as f64;
        if u < 0.0 {
            return l;
        }
    }
    levels - 1
}

/// Synthetic portfolio shaped like a plant's yearly product mix.
///
/// Product means are log-uniform on [20, 2000] with a coefficient of
/// variation uniform on [0.03, 0.12]. Materials keep one level per product and
/// each tooling factor gives a product a pool of up to four tools (two to four
/// Zipf draws, deduplicated) that its lots pick from uniformly. Zipf weights
/// make footprints differ. Line and operator are drawn uniformly per lot.
pub fn synth_portfolio(cfg: &SynthConfig) -> Result<Portfolio> {
    if cfg.n_products == 0 {
        return Err(Error::domain("n_products must be at least 1"));
    }
    let (start, end) = cfg.date_range;
    if end < start {
        return Err(Error::domain("date range ends before it starts"));
    }
    if cfg.n_factors > 0 && cfg.levels_per_factor == 0 {
        return Err(Error::domain("levels_per_factor must be at least 1"));
    }
    let span = (end - start).num_days() as u64;
    let factors = synth_factor_names(cfg.n_factors);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut counts: Vec<usize> = (0..cfg.n_products)
        .map(|_| cfg.lot_counts.sample(&mut rng))
        .collect();
    if let LotCountSampler::LogNormal { max, pin_max: true, .. } = cfg.lot_counts {
        let (imax, _) = counts
            .iter()
            .enumerate()
            .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
            .expect("non-empty");
        counts[imax] = max;
    }

    let mut obs = Vec::new();
    for (k, &n) in counts.iter().enumerate() {
        let product_id = format!("P{k:03}");
        let mu = (20f64.ln() + rng.random::<f64>() * (2000f64.ln() - 20f64.ln())).exp();
        let sigma = mu * (0.03 + 0.09 * rng.random::<f64>());
        let pools: Vec<Vec<usize>> = factors
            .iter()
            .map(|(_, kind)| match kind {
                FactorKind::PerProduct => vec![zipf_pick(&mut rng, cfg.levels_per_factor)],
                FactorKind::Pool => {
                    let size = rng.random_range(2..=4usize);
                    let mut pool: Vec<usize> =
                        (0..size).map(|_| zipf_pick(&mut rng, cfg.levels_per_factor)).collect();
                    pool.sort_unstable();
                    pool.dedup();
                    pool
                }
                FactorKind::PerLot => Vec::new(),
            })
            .collect();
        for j in 0..n {
            let day = rng.random_range(0..=span);
            let mut levels = IndexMap::with_capacity(factors.len());
            for ((name, _), pool) in factors.iter().zip(&pools) {
                let l = match pool.len() {
                    0 => rng.random_range(0..cfg.levels_per_factor),
                    1 => pool[0],
                    k => pool[rng.random_range(0..k)],
                };
                levels.insert(name.clone(), format!("{name}_{}", l + 1));
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            obs.push(Observation {
                product_id: product_id.clone(),
                lot_id: format!("{product_id}-{j:03}"),
                mfg_date: start + Days::new(day),
                value: mu + sigma * z,
                factors: levels,
            });
        }
    }
    Portfolio::new(obs, factors.into_iter().map(|(n, _)| n).collect())
}

/// Per-lot means, sigmas and product membership in production order.
struct Layout {
    portfolio: Portfolio,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    /// Positions of each product's lots, ascending.
    groups: Vec<Vec<usize>>,
}

impl Layout {
    fn new(s: &Scenario) -> Result<Self> {
        s.validate()?;
        let portfolio = s.schedule()?;
        let index: BTreeMap<&str, usize> = s
            .products
            .iter()
            .enumerate()
            .map(|(i, p)| (p.product_id.as_str(), i))
            .collect();
        let mut groups = vec![Vec::new(); s.products.len()];
        let mut mu = Vec::with_capacity(portfolio.len());
        let mut sigma = Vec::with_capacity(portfolio.len());
        for (pos, o) in portfolio.observations().iter().enumerate() {
            let k = index[o.product_id.as_str()];
            groups[k].push(pos);
            mu.push(s.products[k].mu);
            sigma.push(s.products[k].sigma);
        }
        Ok(Layout {
            portfolio,
            mu,
            sigma,
            groups,
        })
    }

    fn len(&self) -> usize {
        self.mu.len()
    }

    /// One stable draw. Every lot consumes the same three variates whether
    /// or not outliers are enabled.
    fn draw(&self, s: &Scenario, with_outliers: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let e: f64 = StandardNormal.sample(rng);
                let u: f64 = rng.random();
                let o: f64 = StandardNormal.sample(rng);
                let mut y = self.mu[i] + self.sigma[i] * e;
                if with_outliers && u < s.outlier_prob {
                    y += s.outlier_sd_multiple * self.sigma[i] * o;
                }
                y
            })
            .collect()
    }

    fn mask(&self, rc: &RootCause) -> Result<Vec<bool>> {
        root_cause_mask(&self.portfolio, rc)
    }
}

/// Simulated stable year: `y = mu + e` with `e ~ N(0, sigma^2)`, plus with
/// probability `outlier_prob` an outlier term with standard deviation
/// `outlier_sd_multiple * sigma` when `with_outliers` is set.
pub fn simulate_stable(s: &Scenario, with_outliers: bool, seed: u64) -> Result<Portfolio> {
    let layout = Layout::new(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = layout.draw(s, with_outliers, &mut rng);
    layout.portfolio.with_values(&values)
}

/// A process input whose failure shifts every lot carrying `level` of `factor_name`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootCause {
    pub id: String,
    pub factor_name: String,
    pub level: String,
    /// Shift sizes in units of each product's sigma.
    pub shift_multiples: Vec<f64>,
}

impl RootCause {
    pub fn affected_lots(&self, p: &Portfolio) -> usize {
        p.observations()
            .iter()
            .filter(|o| o.factor(&self.factor_name) == Some(self.level.as_str()))
            .count()
    }
}

fn root_cause_mask(p: &Portfolio, rc: &RootCause) -> Result<Vec<bool>> {
    if !p.factor_names().iter().any(|f| f == &rc.factor_name) {
        return Err(Error::domain(format!("unknown factor `{}`", rc.factor_name)));
    }
    let mask: Vec<bool> = p
        .observations()
        .iter()
        .map(|o| o.factor(&rc.factor_name) == Some(rc.level.as_str()))
        .collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::domain(format!(
            "level `{}` does not occur for factor `{}`",
            rc.level, rc.factor_name
        )));
    }
    Ok(mask)
}

/// Adds `shift_multiple * sigma_i` to every phase-II lot matching the root cause.
pub fn inject_root_cause(
    p: &Portfolio,
    s: &Scenario,
    rc: &RootCause,
    shift_multiple: f64,
    phase_split: f64,
) -> Result<Portfolio> {
    if !(phase_split > 0.0 && phase_split < 1.0) {
        return Err(Error::domain("phase_split must lie in (0, 1)"));
    }
    let mask = root_cause_mask(p, rc)?;
    let n1 = phase_one_len(p.len(), phase_split);
    let mut values = p.values();
    for (pos, obs) in p.observations().iter().enumerate().skip(n1) {
        if mask[pos] {
            let product = s.product(&obs.product_id).ok_or_else(|| {
                Error::domain(format!("product `{}` is not in the scenario", obs.product_id))
            })?;
            values[pos] += shift_multiple * product.sigma;
        }
    }
    p.with_values(&values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelFootprint {
    pub factor: String,
    pub level: String,
    pub lots: usize,
    pub products: usize,
}

/// Lot and product counts of every factor level.
pub fn level_footprints(p: &Portfolio) -> Vec<LevelFootprint> {
    let mut acc: BTreeMap<(&str, &str), (usize, BTreeSet<&str>)> = BTreeMap::new();
    for o in p.observations() {
        for (f, l) in &o.factors {
            let e = acc.entry((f.as_str(), l.as_str())).or_default();
            e.0 += 1;
            e.1.insert(o.product_id.as_str());
        }
    }
    acc.into_iter()
        .map(|((f, l), (lots, prods))| LevelFootprint {
            factor: f.to_string(),
            level: l.to_string(),
            lots,
            products: prods.len(),
        })
        .collect()
}

/// Where per-product centers and scales are fitted during a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryScope {
    /// Phase-I lots only; phase II is standardized with frozen summaries.
    PhaseOne,
    /// All lots of the year, shifted ones included. Limits still come from
    /// phase I and run lengths from phase II.
    #[default]
    FullSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyConfig {
    pub charts: Vec<ChartKind>,
    pub centers: Vec<CenterMethod>,
    pub scales: Vec<ScaleMethod>,
    pub root_causes: Vec<RootCause>,
    pub n_sim: usize,
    pub with_outliers: bool,
    pub master_seed: u64,
    pub lambda: f64,
    pub ewma_width: f64,
    pub summary_scope: SummaryScope,
}

impl StudyConfig {
    /// IR chart, both centers, the four default scales, no root causes.
    pub fn stable(n_sim: usize, with_outliers: bool, master_seed: u64) -> Self {
        StudyConfig {
            charts: vec![ChartKind::Ir],
            centers: CenterMethod::ALL.to_vec(),
            scales: ScaleMethod::defaults().to_vec(),
            root_causes: Vec::new(),
            n_sim,
            with_outliers,
            master_seed,
            lambda: DEFAULT_LAMBDA,
            ewma_width: DEFAULT_WIDTH,
            summary_scope: SummaryScope::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArlCell {
    pub chart: ChartKind,
    pub center: CenterMethod,
    pub scale: ScaleMethod,
    /// `None` for the stable (ARL₀) rows.
    pub root_cause: Option<String>,
    pub shift: f64,
    /// Mean over replicates of each replicate's mean run length.
    pub arl: Option<f64>,
    pub n_signals: usize,
    pub n_replicates: usize,
    pub n_replicates_with_signal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArlReport {
    pub cells: Vec<ArlCell>,
    pub seed: u64,
    pub n_sim: usize,
    pub with_outliers: bool,
    pub phase_one_lots: usize,
    pub phase_two_lots: usize,
}

impl ArlReport {
    pub fn cell(
        &self,
        chart: ChartKind,
        center: CenterMethod,
        scale: &str,
        root_cause: Option<&str>,
        shift: f64,
    ) -> Option<&ArlCell> {
        self.cells.iter().find(|c| {
            c.chart == chart
                && c.center == center
                && c.scale.label() == scale
                && c.root_cause.as_deref() == root_cause
                && c.shift == shift
        })
    }

    pub fn arl(
        &self,
        chart: ChartKind,
        center: CenterMethod,
        scale: &str,
        root_cause: Option<&str>,
        shift: f64,
    ) -> Option<f64> {
        self.cell(chart, center, scale, root_cause, shift).and_then(|c| c.arl)
    }
}

/// A data variant evaluated in every replicate: stable, or one root cause at one shift.
struct Variant {
    cause: Option<usize>,
    shift: f64,
}

#[derive(Clone, Copy, Default)]
struct CellTally {
    arl_sum: f64,
    with_signal: usize,
    n_signals: usize,
}

/// Fitted (center, scale) per product, `None` where the product is excluded.
fn fit_groups(
    values: &[f64],
    groups: &[Vec<usize>],
    upto: usize,
    cm: CenterMethod,
    sm: ScaleMethod,
) -> Vec<Option<(f64, f64)>> {
    let mut xs = Vec::new();
    groups
        .iter()
        .map(|g| {
            xs.clear();
            xs.extend(g.iter().take_while(|&&p| p < upto).map(|&p| values[p]));
            fit_product(&xs, cm, sm).ok()
        })
        .collect()
}

enum FrozenLimits {
    Ir(IrLimits),
    Ewma(EwmaLimits),
}

/// Runs the study. Per replicate: draw a stable year, shift phase II per
/// variant, fit per-product summaries (scope per `summary_scope`), estimate
/// chart limits on the standardized phase I and count run lengths over the
/// standardized phase II against those frozen limits.
pub fn arl_study(s: &Scenario, cfg: &StudyConfig) -> Result<ArlReport> {
    if cfg.n_sim == 0 {
        return Err(Error::domain("n_sim must be at least 1"));
    }
    for sm in &cfg.scales {
        sm.validate()?;
    }
    let layout = Layout::new(s)?;
    let n = layout.len();
    let n1 = phase_one_len(n, s.phase_split);
    if n1 < 3 || n1 >= n {
        return Err(Error::domain("phase split leaves an empty or tiny phase"));
    }
    let masks: Vec<Vec<bool>> = cfg
        .root_causes
        .iter()
        .map(|rc| layout.mask(rc))
        .collect::<Result<_>>()?;

    let mut variants = vec![Variant { cause: None, shift: 0.0 }];
    for (k, rc) in cfg.root_causes.iter().enumerate() {
        for &shift in &rc.shift_multiples {
            variants.push(Variant {
                cause: Some(k),
                shift,
            });
        }
    }
    let methods: Vec<(CenterMethod, ScaleMethod)> = cfg
        .centers
        .iter()
        .flat_map(|&c| cfg.scales.iter().map(move |&sm| (c, sm)))
        .collect();
    let n_cells = cfg.charts.len() * methods.len() * variants.len();
    let cell_index = |chart: usize, method: usize, variant: usize| {
        (chart * methods.len() + method) * variants.len() + variant
    };

    let replicate = |r: usize| -> Vec<Option<(f64, usize)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
        rng.set_stream(r as u64);
        let base = layout.draw(s, cfg.with_outliers, &mut rng);
        let data: Vec<Vec<f64>> = variants
            .iter()
            .map(|v| {
                let mut y = base.clone();
                if let Some(k) = v.cause {
                    for pos in n1..n {
                        if masks[k][pos] {
                            y[pos] += v.shift * layout.sigma[pos];
                        }
                    }
                }
                y
            })
            .collect();
        let mut out = vec![None; n_cells];
        let mut standardized: Vec<Option<f64>> = vec![None; n];
        let mut phase_one = Vec::with_capacity(n1);
        let mut phase_two = Vec::with_capacity(n - n1);
        for (mi, &(cm, sm)) in methods.iter().enumerate() {
            // phase-I fits never see the shift
            let frozen = (cfg.summary_scope == SummaryScope::PhaseOne)
                .then(|| fit_groups(&base, &layout.groups, n1, cm, sm));
            for (vi, y) in data.iter().enumerate() {
                let fits = match &frozen {
                    Some(f) => std::borrow::Cow::Borrowed(f),
                    None => std::borrow::Cow::Owned(fit_groups(y, &layout.groups, n, cm, sm)),
                };
                standardized.fill(None);
                for (g, fit) in layout.groups.iter().zip(fits.iter()) {
                    if let Some((c, sc)) = *fit {
                        for &pos in g {
                            standardized[pos] = Some((y[pos] - c) / sc);
                        }
                    }
                }
                phase_one.clear();
                phase_two.clear();
                phase_one.extend(standardized[..n1].iter().flatten());
                phase_two.extend(standardized[n1..].iter().flatten());
                if phase_two.is_empty() {
                    continue;
                }
                for (ci, chart) in cfg.charts.iter().enumerate() {
                    let limits = match chart {
                        ChartKind::Ir => IrLimits::estimate(&phase_one).ok().map(FrozenLimits::Ir),
                        ChartKind::Ewma => EwmaLimits::estimate(&phase_one).ok().map(FrozenLimits::Ewma),
                    };
                    let flags = match limits {
                        Some(FrozenLimits::Ir(l)) => l.flags(&phase_two),
                        Some(FrozenLimits::Ewma(l)) => {
                            match ewma_chart(&phase_two, cfg.lambda, cfg.ewma_width, Some(l)) {
                                Ok(c) => c.flags,
                                Err(_) => continue,
                            }
                        }
                        None => continue,
                    };
                    let rl = run_lengths(&flags);
                    out[cell_index(ci, mi, vi)] = rl.arl.map(|a| (a, rl.n_signals));
                }
            }
        }
        out
    };

    let per_replicate: Vec<Vec<Option<(f64, usize)>>> =
        (0..cfg.n_sim).into_par_iter().map(replicate).collect();

    let mut tallies = vec![CellTally::default(); n_cells];
    for rep in &per_replicate {
        for (t, cell) in tallies.iter_mut().zip(rep) {
            if let Some((arl, signals)) = *cell {
                t.arl_sum += arl;
                t.with_signal += 1;
                t.n_signals += signals;
            }
        }
    }

    let mut cells = Vec::with_capacity(n_cells);
    for (ci, &chart) in cfg.charts.iter().enumerate() {
        for (mi, &(center, scale)) in methods.iter().enumerate() {
            for (vi, v) in variants.iter().enumerate() {
                let t = tallies[cell_index(ci, mi, vi)];
                cells.push(ArlCell {
                    chart,
                    center,
                    scale,
                    root_cause: v.cause.map(|k| cfg.root_causes[k].id.clone()),
                    shift: v.shift,
                    arl: (t.with_signal > 0).then(|| t.arl_sum / t.with_signal as f64),
                    n_signals: t.n_signals,
                    n_replicates: cfg.n_sim,
                    n_replicates_with_signal: t.with_signal,
                });
            }
        }
    }
    Ok(ArlReport {
        cells,
        seed: cfg.master_seed,
        n_sim: cfg.n_sim,
        with_outliers: cfg.with_outliers,
        phase_one_lots: n1,
        phase_two_lots: n - n1,
    })
}

fn fmt_arl(arl: Option<f64>, decimals: usize) -> String {
    match arl {
        Some(a) => format!("{a:.decimals$}"),
        None => "NA".to_string(),
    }
}

fn outliers_label(report: &ArlReport) -> &'static str {
    if report.with_outliers {
        "incl."
    } else {
        "excl."
    }
}

/// One row per cell across `reports`. `root_causes` selects stable rows
/// (`false`) or root-cause rows (`true`).
pub fn write_long_csv<W: Write>(reports: &[&ArlReport], root_causes: bool, writer: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "chart",
        "outliers",
        "root_cause",
        "shift",
        "centre",
        "scale",
        "arl",
        "n_signals",
        "n_replicates",
        "n_replicates_with_signal",
    ])?;
    for report in reports {
        for c in report.cells.iter().filter(|c| c.root_cause.is_some() == root_causes) {
            wtr.write_record([
                c.chart.to_string(),
                outliers_label(report).to_string(),
                c.root_cause.clone().unwrap_or_default(),
                c.shift.to_string(),
                c.center.to_string(),
                c.scale.to_string(),
                fmt_arl(c.arl, 6),
                c.n_signals.to_string(),
                c.n_replicates.to_string(),
                c.n_replicates_with_signal.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Wide layout: one row per (chart, outliers, root cause, shift, centre), one
/// column per scale estimator (IQR, MAD, RStdDev, StdDev).
pub fn write_table_csv<W: Write>(reports: &[&ArlReport], root_causes: bool, writer: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["chart", "outliers"];
    if root_causes {
        header.extend(["root_cause", "sigma"]);
    }
    header.extend(["centre", "IQR", "MAD", "RStdDev", "StdDev"]);
    wtr.write_record(&header)?;

    for report in reports {
        let mut rows: Vec<(ChartKind, Option<String>, f64, CenterMethod)> = Vec::new();
        for c in report.cells.iter().filter(|c| c.root_cause.is_some() == root_causes) {
            let key = (c.chart, c.root_cause.clone(), c.shift, c.center);
            if !rows.contains(&key) {
                rows.push(key);
            }
        }
        // cells are grouped by method first; emit rows cause-major instead
        rows.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.total_cmp(&b.2))
                .then_with(|| a.3.cmp(&b.3))
        });
        for (chart, cause, shift, center) in rows {
            let mut cols = vec![String::new(); 4];
            for c in report.cells.iter().filter(|c| {
                c.chart == chart && c.root_cause == cause && c.shift == shift && c.center == center
            }) {
                cols[c.scale.column()] = fmt_arl(c.arl, 1);
            }
            let mut row = vec![chart.to_string(), outliers_label(report).to_string()];
            if root_causes {
                row.extend([cause.clone().unwrap_or_default(), shift.to_string()]);
            }
            row.push(center.to_string());
            row.extend(cols);
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Where the scenario's production schedule comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PortfolioSource {
    /// Generated portfolio, then calibrated like real data.
    Synthetic(SynthConfig),
    /// `SynthConfig::portfolio_shaped` with the given seed.
    Shaped { seed: u64 },
    /// Portfolio CSV; relative paths resolve against the scenario file.
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: Option<Schema>,
    },
    /// A fully specified scenario.
    Explicit(Scenario),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RootCauseSpec {
    pub id: String,
    #[serde(default)]
    pub factor: Option<String>,
    /// Explicit level. Without one, the level whose lot footprint is closest
    /// to `target_lots` is chosen.
    #[serde(default)]
    pub level: Option<String>,
    #[serde(default)]
    pub target_lots: Option<usize>,
    pub shifts: Vec<f64>,
}

fn scale_list<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<ScaleMethod>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Item {
        Name(String),
        Full(ScaleMethod),
    }
    Vec::<Item>::deserialize(d)?
        .into_iter()
        .map(|item| match item {
            Item::Name(s) => s.parse().map_err(serde::de::Error::custom),
            Item::Full(m) => Ok(m),
        })
        .collect()
}

fn default_outlier_prob() -> f64 {
    DEFAULT_OUTLIER_PROB
}
fn default_outlier_multiple() -> f64 {
    DEFAULT_OUTLIER_SD_MULTIPLE
}
fn default_phase_split() -> f64 {
    DEFAULT_PHASE_SPLIT
}
fn default_true() -> bool {
    true
}
fn default_charts() -> Vec<ChartKind> {
    vec![ChartKind::Ir]
}
fn default_centers() -> Vec<CenterMethod> {
    CenterMethod::ALL.to_vec()
}
fn default_scales() -> Vec<ScaleMethod> {
    ScaleMethod::defaults().to_vec()
}
fn default_n_sim() -> usize {
    DEFAULT_N_SIM
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

/// JSON document describing a simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub portfolio: PortfolioSource,
    #[serde(default = "default_outlier_prob")]
    pub outlier_prob: f64,
    #[serde(default = "default_outlier_multiple")]
    pub outlier_sd_multiple: f64,
    #[serde(default = "default_phase_split")]
    pub phase_split: f64,
    #[serde(default = "default_true")]
    pub with_outliers: bool,
    #[serde(default = "default_charts")]
    pub charts: Vec<ChartKind>,
    #[serde(default = "default_centers")]
    pub centers: Vec<CenterMethod>,
    #[serde(default = "default_scales", deserialize_with = "scale_list")]
    pub scales: Vec<ScaleMethod>,
    #[serde(default)]
    pub root_causes: Vec<RootCauseSpec>,
    #[serde(default = "default_n_sim")]
    pub n_sim: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub summary_scope: SummaryScope,
}

impl ScenarioSpec {
    /// Parses a spec, reporting the JSON path of the offending field on error.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::domain(format!("invalid scenario at `{path}`: {}", e.inner()))
        })
    }

    /// Builds the scenario. `base_dir` anchors relative CSV paths.
    pub fn build(&self, base_dir: &Path) -> Result<(Scenario, Vec<Exclusion>)> {
        let (mut scenario, dropped) = match &self.portfolio {
            PortfolioSource::Synthetic(cfg) => {
                let fitted = fit_scenario(&synth_portfolio(cfg)?)?;
                (fitted.scenario, fitted.dropped)
            }
            PortfolioSource::Shaped { seed } => {
                let fitted = fit_scenario(&synth_portfolio(&SynthConfig::portfolio_shaped(*seed))?)?;
                (fitted.scenario, fitted.dropped)
            }
            PortfolioSource::Csv { path, schema } => {
                let path = if path.is_relative() { base_dir.join(path) } else { path.clone() };
                let p = load_portfolio(&path, &schema.clone().unwrap_or_default())?;
                let fitted = fit_scenario(&p)?;
                (fitted.scenario, fitted.dropped)
            }
            PortfolioSource::Explicit(s) => (s.clone(), Vec::new()),
        };
        if !matches!(self.portfolio, PortfolioSource::Explicit(_)) {
            scenario.outlier_prob = self.outlier_prob;
            scenario.outlier_sd_multiple = self.outlier_sd_multiple;
            scenario.phase_split = self.phase_split;
        }
        scenario.validate().map_err(|e| Error::domain(format!("invalid scenario: {e}")))?;
        Ok((scenario, dropped))
    }

    pub fn resolve_root_causes(&self, scenario: &Scenario) -> Result<Vec<RootCause>> {
        let schedule = scenario.schedule()?;
        let footprints = level_footprints(&schedule);
        self.root_causes
            .iter()
            .enumerate()
            .map(|(i, spec)| resolve_root_cause(spec, &footprints).map_err(|e| {
                Error::domain(format!("invalid scenario at `root_causes[{i}]`: {e}"))
            }))
            .collect()
    }

    pub fn study_config(&self, root_causes: Vec<RootCause>, n_sim: usize, seed: u64) -> StudyConfig {
        StudyConfig {
            charts: self.charts.clone(),
            centers: self.centers.clone(),
            scales: self.scales.clone(),
            root_causes,
            n_sim,
            with_outliers: self.with_outliers,
            master_seed: seed,
            lambda: self.lambda,
            ewma_width: DEFAULT_WIDTH,
            summary_scope: self.summary_scope,
        }
    }
}

pub fn resolve_root_cause(spec: &RootCauseSpec, footprints: &[LevelFootprint]) -> Result<RootCause> {
    let candidates: Vec<&LevelFootprint> = footprints
        .iter()
        .filter(|f| spec.factor.as_ref().is_none_or(|name| &f.factor == name))
        .filter(|f| spec.level.as_ref().is_none_or(|level| &f.level == level))
        .collect();
    let chosen = match (&spec.level, spec.target_lots) {
        (Some(_), _) => candidates.first().copied(),
        (None, Some(target)) => candidates
            .iter()
            .min_by_key(|f| (f.lots.abs_diff(target), f.factor.clone(), f.level.clone()))
            .copied(),
        (None, None) => {
            return Err(Error::domain(format!(
                "root cause `{}` needs a level or target_lots",
                spec.id
            )))
        }
    };
    let chosen = chosen.ok_or_else(|| {
        Error::domain(format!(
            "root cause `{}`: no matching factor level in the portfolio",
            spec.id
        ))
    })?;
    Ok(RootCause {
        id: spec.id.clone(),
        factor_name: chosen.factor.clone(),
        level: chosen.level.clone(),
        shift_multiples: spec.shifts.clone(),
    })
}

impl fmt::Display for RootCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}={})", self.id, self.factor_name, self.level)
    }
}
