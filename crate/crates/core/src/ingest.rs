//! Portfolio CSV ingestion and the lot-level domain model.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Level assigned to an empty factor cell.
pub const MISSING_LEVEL: &str = "(missing)";
pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// One production lot: its lab measurement, date and process factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub product_id: String,
    pub lot_id: String,
    pub mfg_date: NaiveDate,
    pub value: f64,
    pub factors: IndexMap<String, String>,
}

impl Observation {
    pub fn factor(&self, name: &str) -> Option<&str> {
        self.factors.get(name).map(String::as_str)
    }
}

/// Column names for the four reserved fields. Every other column is a factor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub product: String,
    pub lot: String,
    pub date: String,
    pub value: String,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            product: "product_id".into(),
            lot: "lot_id".into(),
            date: "mfg_date".into(),
            value: "value".into(),
        }
    }
}

impl FromStr for Schema {
    type Err = Error;

    /// Parses `product=...,lot=...,date=...,value=...`; omitted keys keep defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut schema = Schema::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, col) = part
                .split_once('=')
                .ok_or_else(|| Error::domain(format!("schema entry `{part}` is not key=column")))?;
            let col = col.trim().to_string();
            match key.trim() {
                "product" => schema.product = col,
                "lot" => schema.lot = col,
                "date" => schema.date = col,
                "value" => schema.value = col,
                other => {
                    return Err(Error::domain(format!(
                        "unknown schema key `{other}` (expected product|lot|date|value)"
                    )))
                }
            }
        }
        Ok(schema)
    }
}

/// Observations held in production order with a per-product index.
#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    observations: Vec<Observation>,
    products: BTreeMap<String, Vec<usize>>,
    factor_names: Vec<String>,
}

/// Stable production order: by date, then lot id.
pub fn production_order(observations: &[Observation]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..observations.len()).collect();
    idx.sort_by(|&a, &b| {
        let (oa, ob) = (&observations[a], &observations[b]);
        oa.mfg_date
            .cmp(&ob.mfg_date)
            .then_with(|| oa.lot_id.cmp(&ob.lot_id))
    });
    idx
}

impl Portfolio {
    /// Validates and sorts the observations into production order.
    pub fn new(observations: Vec<Observation>, factor_names: Vec<String>) -> Result<Self> {
        let expected: HashSet<&str> = factor_names.iter().map(String::as_str).collect();
        if expected.len() != factor_names.len() {
            return Err(Error::domain("duplicate factor name"));
        }
        let mut keys = HashSet::new();
        for obs in &observations {
            if !obs.value.is_finite() {
                return Err(Error::domain(format!(
                    "non-finite value for lot `{}` of product `{}`",
                    obs.lot_id, obs.product_id
                )));
            }
            if obs.factors.len() != expected.len()
                || obs.factors.keys().any(|k| !expected.contains(k.as_str()))
            {
                return Err(Error::domain(format!(
                    "lot `{}` of product `{}` does not carry the portfolio factor set",
                    obs.lot_id, obs.product_id
                )));
            }
            if !keys.insert((obs.product_id.as_str(), obs.lot_id.as_str())) {
                return Err(Error::domain(format!(
                    "duplicate lot `{}` for product `{}`",
                    obs.lot_id, obs.product_id
                )));
            }
        }
        let order = production_order(&observations);
        let mut slots: Vec<Option<Observation>> = observations.into_iter().map(Some).collect();
        let observations: Vec<Observation> = order
            .into_iter()
            .map(|i| {
                let mut obs = slots[i].take().expect("permutation");
                // factor maps follow the portfolio's column order
                obs.factors.sort_by_cached_key(|k, _| {
                    factor_names.iter().position(|f| f == k).unwrap_or(usize::MAX)
                });
                obs
            })
            .collect();
        let mut products: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, obs) in observations.iter().enumerate() {
            products.entry(obs.product_id.clone()).or_default().push(i);
        }
        Ok(Portfolio {
            observations,
            products,
            factor_names,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Product id → observation indices, in production order.
    pub fn products(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.products
    }

    pub fn factor_names(&self) -> &[String] {
        &self.factor_names
    }

    /// Observation indices in production order. Always the identity, since
    /// observations are stored sorted.
    pub fn production_order(&self) -> Vec<usize> {
        production_order(&self.observations)
    }

    pub fn values(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.value).collect()
    }

    /// Same lots with new measurement values, given in production order.
    pub fn with_values(&self, values: &[f64]) -> Result<Portfolio> {
        if values.len() != self.len() {
            return Err(Error::domain(format!(
                "expected {} values, got {}",
                self.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite value at position {i}")));
        }
        let mut out = self.clone();
        for (obs, &v) in out.observations.iter_mut().zip(values) {
            obs.value = v;
        }
        Ok(out)
    }

    /// Sub-portfolio of the lots matching `keep`, still in production order.
    pub fn filter(&self, keep: impl Fn(&Observation) -> bool) -> Result<Portfolio> {
        let obs = self.observations.iter().filter(|o| keep(o)).cloned().collect();
        Portfolio::new(obs, self.factor_names.clone())
    }
}

pub fn load_portfolio(path: impl AsRef<Path>, schema: &Schema) -> Result<Portfolio> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_portfolio(file, path, schema)
}

/// Parses a portfolio CSV from any reader; `path` labels error messages.
pub fn read_portfolio<R: Read>(reader: R, path: impl Into<PathBuf>, schema: &Schema) -> Result<Portfolio> {
    let path = path.into();
    let csv_err = |source: csv::Error| Error::Csv {
        path: path.clone(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.clone(),
                column: name.to_string(),
            })
    };
    let product_col = column(&schema.product)?;
    let lot_col = column(&schema.lot)?;
    let date_col = column(&schema.date)?;
    let value_col = column(&schema.value)?;
    let reserved = [product_col, lot_col, date_col, value_col];
    let factor_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !reserved.contains(i))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut seen = HashSet::new();
    let mut observations = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let row_err = |message: String| Error::Row {
            path: path.clone(),
            line,
            message,
        };
        let field = |i: usize| record.get(i).unwrap_or("");
        let product_id = field(product_col).to_string();
        let lot_id = field(lot_col).to_string();
        if product_id.is_empty() || lot_id.is_empty() {
            return Err(row_err("empty product or lot id".into()));
        }
        let raw_date = field(date_col);
        let mfg_date = NaiveDate::parse_from_str(raw_date, DATE_FORMAT)
            .map_err(|_| row_err(format!("invalid date `{raw_date}` (expected YYYY-MM-DD)")))?;
        let raw_value = field(value_col);
        let value: f64 = raw_value
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| row_err(format!("invalid value `{raw_value}`")))?;
        if !seen.insert((product_id.clone(), lot_id.clone())) {
            return Err(Error::DuplicateKey {
                path: path.clone(),
                line,
                product_id,
                lot_id,
            });
        }
        let factors = factor_cols
            .iter()
            .map(|(i, name)| {
                let level = match field(*i) {
                    "" => MISSING_LEVEL.to_string(),
                    s => s.to_string(),
                };
                (name.clone(), level)
            })
            .collect();
        observations.push(Observation {
            product_id,
            lot_id,
            mfg_date,
            value,
            factors,
        });
    }
    let factor_names = factor_cols.into_iter().map(|(_, name)| name).collect();
    Portfolio::new(observations, factor_names)
}

/// Writes the portfolio as CSV with the given reserved column names, factors
/// following in portfolio order.
pub fn write_portfolio<W: Write>(p: &Portfolio, writer: W, schema: &Schema) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![
        schema.product.as_str(),
        schema.lot.as_str(),
        schema.date.as_str(),
        schema.value.as_str(),
    ];
    header.extend(p.factor_names().iter().map(String::as_str));
    wtr.write_record(&header)?;
    for obs in p.observations() {
        let mut row = vec![
            obs.product_id.clone(),
            obs.lot_id.clone(),
            obs.mfg_date.format(DATE_FORMAT).to_string(),
            obs.value.to_string(),
        ];
        row.extend(p.factor_names().iter().map(|f| obs.factors[f].clone()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_portfolio(p: &Portfolio, path: impl AsRef<Path>, schema: &Schema) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_portfolio(p, std::io::BufWriter::new(file), schema).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })
}
