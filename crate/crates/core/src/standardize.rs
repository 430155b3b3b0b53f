//! Per-product standardization into one pooled, production-ordered series.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{CenterMethod, ScaleMethod};
use crate::ingest::{Portfolio, DATE_FORMAT};

/// Center and scale fitted to one product's lots.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProductSummary {
    pub product_id: String,
    pub n: usize,
    pub center: f64,
    pub scale: f64,
    pub center_method: CenterMethod,
    pub scale_method: ScaleMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    TooFewLots,
    ZeroScale,
    /// Frozen-summary mode only: the product has no summary from phase I.
    Unfitted,
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExclusionReason::TooFewLots => "too_few_lots",
            ExclusionReason::ZeroScale => "zero_scale",
            ExclusionReason::Unfitted => "unfitted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exclusion {
    pub product_id: String,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summaries {
    pub products: BTreeMap<String, ProductSummary>,
    pub excluded: Vec<Exclusion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedSeries {
    /// Standardized values in production order.
    pub values: Vec<f64>,
    /// Portfolio observation index of each value.
    pub source: Vec<usize>,
    pub summaries: BTreeMap<String, ProductSummary>,
    pub excluded: Vec<Exclusion>,
}

impl StandardizedSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Center and scale of one product's values, or why it cannot be standardized.
pub fn fit_product(
    xs: &[f64],
    cm: CenterMethod,
    sm: ScaleMethod,
) -> std::result::Result<(f64, f64), ExclusionReason> {
    if xs.len() < 2 {
        return Err(ExclusionReason::TooFewLots);
    }
    let center = cm.estimate(xs).map_err(|_| ExclusionReason::TooFewLots)?;
    let scale = sm.estimate(xs).map_err(|_| ExclusionReason::TooFewLots)?;
    if !(scale > 0.0) {
        return Err(ExclusionReason::ZeroScale);
    }
    Ok((center, scale))
}

pub fn summarize(p: &Portfolio, cm: CenterMethod, sm: ScaleMethod) -> Summaries {
    let obs = p.observations();
    let mut out = Summaries::default();
    for (product_id, idx) in p.products() {
        let xs: Vec<f64> = idx.iter().map(|&i| obs[i].value).collect();
        match fit_product(&xs, cm, sm) {
            Ok((center, scale)) => {
                out.products.insert(
                    product_id.clone(),
                    ProductSummary {
                        product_id: product_id.clone(),
                        n: xs.len(),
                        center,
                        scale,
                        center_method: cm,
                        scale_method: sm,
                    },
                );
            }
            Err(reason) => out.excluded.push(Exclusion {
                product_id: product_id.clone(),
                reason,
            }),
        }
    }
    out
}

pub fn standardize(p: &Portfolio, cm: CenterMethod, sm: ScaleMethod) -> Result<StandardizedSeries> {
    sm.validate()?;
    let summaries = summarize(p, cm, sm);
    let mut series = standardize_with(p, &summaries.products)?;
    series.excluded = summaries.excluded;
    Ok(series)
}

/// Standardizes with summaries fitted elsewhere (phase-II mode). Products
/// without a summary are excluded as `Unfitted`.
pub fn standardize_with(
    p: &Portfolio,
    summaries: &BTreeMap<String, ProductSummary>,
) -> Result<StandardizedSeries> {
    let mut values = Vec::with_capacity(p.len());
    let mut source = Vec::with_capacity(p.len());
    for (i, obs) in p.observations().iter().enumerate() {
        if let Some(s) = summaries.get(&obs.product_id) {
            values.push((obs.value - s.center) / s.scale);
            source.push(i);
        }
    }
    if values.is_empty() {
        return Err(Error::domain(
            "no product could be standardized (all excluded)",
        ));
    }
    let excluded = p
        .products()
        .keys()
        .filter(|id| !summaries.contains_key(*id))
        .map(|id| Exclusion {
            product_id: id.clone(),
            reason: ExclusionReason::Unfitted,
        })
        .collect();
    let used = summaries
        .iter()
        .filter(|(id, _)| p.products().contains_key(*id))
        .map(|(id, s)| (id.clone(), s.clone()))
        .collect();
    Ok(StandardizedSeries {
        values,
        source,
        summaries: used,
        excluded,
    })
}

/// Covariance of a mean/sd-standardized product with `n` lots: `(n-1)/n` on
/// the diagonal, `-1/n` elsewhere, times `sigma`.
pub fn standardized_covariance(n: usize, sigma: f64) -> Result<Vec<Vec<f64>>> {
    if n < 2 {
        return Err(Error::domain("covariance structure needs n >= 2"));
    }
    let nf = n as f64;
    Ok((0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { (nf - 1.0) / nf * sigma } else { -sigma / nf })
                .collect()
        })
        .collect())
}

/// CSV columns: order_index, product_id, lot_id, mfg_date, standardized_value.
pub fn write_series_csv<W: Write>(series: &StandardizedSeries, p: &Portfolio, writer: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["order_index", "product_id", "lot_id", "mfg_date", "standardized_value"])?;
    for (k, (&v, &i)) in series.values.iter().zip(&series.source).enumerate() {
        let obs = &p.observations()[i];
        wtr.write_record([
            k.to_string(),
            obs.product_id.clone(),
            obs.lot_id.clone(),
            obs.mfg_date.format(DATE_FORMAT).to_string(),
            v.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// CSV columns: product_id, n, center, scale, center_method, scale_method, excluded.
pub fn write_summaries_csv<W: Write>(series: &StandardizedSeries, writer: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["product_id", "n", "center", "scale", "center_method", "scale_method", "excluded"])?;
    for s in series.summaries.values() {
        wtr.write_record([
            s.product_id.clone(),
            s.n.to_string(),
            s.center.to_string(),
            s.scale.to_string(),
            s.center_method.to_string(),
            s.scale_method.to_string(),
            String::new(),
        ])?;
    }
    for e in &series.excluded {
        wtr.write_record([&e.product_id, "", "", "", "", "", &e.reason.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
