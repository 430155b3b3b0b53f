//! Regression partition trees of standardized values against process factors.
//!
//! The manufacturing date is an ordinal predictor split by threshold; every
//! other factor is categorical and split into two level sets. Categorical
//! splits scan the levels sorted by mean response, which is exact for squared
//! error, so no subset enumeration is needed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Observation, Portfolio};
use crate::standardize::StandardizedSeries;

/// Name under which the manufacturing date appears as a predictor.
pub const DATE_PREDICTOR: &str = "mfg_date";

/// Gains closer than this (relative to the node's SS) count as ties.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Smallest accepted split gain, as a fraction of the root sum of squares.
    pub min_split_improvement: f64,
    pub max_splits: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 5,
            min_leaf: 5,
            min_split_improvement: 0.01,
            max_splits: 20,
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 || self.min_leaf == 0 {
            return Err(Error::domain("max_depth and min_leaf must be at least 1"));
        }
        if !(self.min_split_improvement >= 0.0 && self.min_split_improvement.is_finite()) {
            return Err(Error::domain("min_split_improvement must be a finite value >= 0"));
        }
        Ok(())
    }
}

/// How a split routes rows. The left child gets `date <= threshold` or the
/// low-mean level set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    Threshold { date: NaiveDate },
    Levels { left: Vec<String>, right: Vec<String> },
}

impl Rule {
    fn describe(&self, factor: &str, go_left: bool) -> String {
        match (self, go_left) {
            (Rule::Threshold { date }, true) => format!("{factor} <= {date}"),
            (Rule::Threshold { date }, false) => format!("{factor} > {date}"),
            (Rule::Levels { left, .. }, true) => format!("{factor} in {{{}}}", left.join(", ")),
            (Rule::Levels { right, .. }, false) => format!("{factor} in {{{}}}", right.join(", ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Split {
    pub factor: String,
    pub rule: Rule,
    pub ss_reduction: f64,
    /// Position in the growth sequence, starting at 0.
    pub order: usize,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Node {
    pub n: usize,
    pub mean: f64,
    /// Sum of squared deviations from `mean`.
    pub ss: f64,
    pub depth: usize,
    pub split: Option<Split>,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.split.is_none()
    }
}

/// Nodes live in an arena; index 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionTree {
    pub nodes: Vec<Node>,
    pub predictors: Vec<String>,
    pub params: TreeParams,
}

/// Best binary partition of a categorical factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalSplit {
    pub left: Vec<String>,
    pub right: Vec<String>,
    pub gain: f64,
}

struct Table {
    y: Vec<f64>,
    dates: Vec<NaiveDate>,
    /// (factor name, level code per row, level names)
    cats: Vec<(String, Vec<usize>, Vec<String>)>,
}

struct Candidate {
    factor: String,
    rule: Rule,
    gain: f64,
    left_rows: Vec<usize>,
    right_rows: Vec<usize>,
}

fn moments(y: &[f64], rows: &[usize]) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / n;
    let ss = rows.iter().map(|&r| (y[r] - mean).powi(2)).sum();
    (mean, ss)
}

/// Between-group sum of squares of a two-way split, from sums of centered values.
fn split_gain(sum_left: f64, n_left: usize, sum_total: f64, n_total: usize) -> f64 {
    let n_right = n_total - n_left;
    let sum_right = sum_total - sum_left;
    sum_left * sum_left / n_left as f64 + sum_right * sum_right / n_right as f64
        - sum_total * sum_total / n_total as f64
}

/// Scans prefix splits of `groups` (already in scan order) for the largest
/// gain; the earliest prefix wins ties. Returns (prefix length, gain).
fn scan_prefixes(groups: &[(usize, f64)], min_leaf: usize, eps: f64) -> Option<(usize, f64)> {
    let n_total: usize = groups.iter().map(|g| g.0).sum();
    let sum_total: f64 = groups.iter().map(|g| g.1).sum();
    let mut best: Option<(usize, f64)> = None;
    let (mut n_left, mut sum_left) = (0usize, 0.0);
    for (k, &(n, s)) in groups[..groups.len().saturating_sub(1)].iter().enumerate() {
        n_left += n;
        sum_left += s;
        if n_left < min_leaf || n_total - n_left < min_leaf {
            continue;
        }
        let gain = split_gain(sum_left, n_left, sum_total, n_total);
        if best.is_none_or(|(_, g)| gain > g + eps) {
            best = Some((k + 1, gain));
        }
    }
    best
}

/// Level groups sorted by mean response, ties by level name.
fn ordered_levels(per_level: BTreeMap<&str, (usize, f64)>) -> Vec<(&str, usize, f64)> {
    let mut levels: Vec<(&str, usize, f64)> =
        per_level.into_iter().map(|(l, (n, s))| (l, n, s)).collect();
    levels.sort_by(|a, b| {
        (a.2 / a.1 as f64)
            .total_cmp(&(b.2 / b.1 as f64))
            .then_with(|| a.0.cmp(b.0))
    });
    levels
}

/// Optimal two-way partition of the levels of one categorical factor under
/// squared error, honoring a minimum child size. `None` when no admissible
/// split exists.
pub fn categorical_split(ys: &[f64], levels: &[&str], min_leaf: usize) -> Option<CategoricalSplit> {
    assert_eq!(ys.len(), levels.len(), "one level per response");
    if ys.is_empty() {
        return None;
    }
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let mut per_level: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (&y, &l) in ys.iter().zip(levels) {
        let e = per_level.entry(l).or_default();
        e.0 += 1;
        e.1 += y - mean;
    }
    let ordered = ordered_levels(per_level);
    let groups: Vec<(usize, f64)> = ordered.iter().map(|g| (g.1, g.2)).collect();
    let ss: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let (k, gain) = scan_prefixes(&groups, min_leaf.max(1), TIE_EPS * ss)?;
    let names = |r: &[(&str, usize, f64)]| r.iter().map(|g| g.0.to_string()).collect();
    Some(CategoricalSplit {
        left: names(&ordered[..k]),
        right: names(&ordered[k..]),
        gain,
    })
}

impl Table {
    fn best_date_split(&self, rows: &[usize], mean: f64, min_leaf: usize, eps: f64) -> Option<Candidate> {
        let mut per_date: BTreeMap<NaiveDate, (usize, f64)> = BTreeMap::new();
        for &r in rows {
            let e = per_date.entry(self.dates[r]).or_default();
            e.0 += 1;
            e.1 += self.y[r] - mean;
        }
        let dates: Vec<NaiveDate> = per_date.keys().copied().collect();
        let groups: Vec<(usize, f64)> = per_date.into_values().collect();
        let (k, gain) = scan_prefixes(&groups, min_leaf, eps)?;
        let threshold = dates[k - 1];
        let (left_rows, right_rows) = rows.iter().partition(|&&r| self.dates[r] <= threshold);
        Some(Candidate {
            factor: DATE_PREDICTOR.to_string(),
            rule: Rule::Threshold { date: threshold },
            gain,
            left_rows,
            right_rows,
        })
    }

    fn best_level_split(
        &self,
        f: usize,
        rows: &[usize],
        mean: f64,
        min_leaf: usize,
        eps: f64,
    ) -> Option<Candidate> {
        let (name, codes, level_names) = &self.cats[f];
        let mut per_level: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
        for &r in rows {
            let e = per_level.entry(level_names[codes[r]].as_str()).or_default();
            e.0 += 1;
            e.1 += self.y[r] - mean;
        }
        let ordered = ordered_levels(per_level);
        let groups: Vec<(usize, f64)> = ordered.iter().map(|g| (g.1, g.2)).collect();
        let (k, gain) = scan_prefixes(&groups, min_leaf, eps)?;
        let mut go_left = vec![false; level_names.len()];
        let mut left = Vec::with_capacity(k);
        let mut right = Vec::with_capacity(ordered.len() - k);
        for (i, g) in ordered.iter().enumerate() {
            if i < k {
                go_left[level_names.iter().position(|l| l == g.0).expect("known level")] = true;
                left.push(g.0.to_string());
            } else {
                right.push(g.0.to_string());
            }
        }
        let (left_rows, right_rows) = rows.iter().partition(|&&r| go_left[codes[r]]);
        Some(Candidate {
            factor: name.clone(),
            rule: Rule::Levels { left, right },
            gain,
            left_rows,
            right_rows,
        })
    }

    /// Best split over all predictors; ties go to the lexicographically first
    /// predictor name.
    fn best_split(&self, rows: &[usize], mean: f64, ss: f64, min_leaf: usize) -> Option<Candidate> {
        let eps = TIE_EPS * ss;
        let mut candidates: Vec<Candidate> = Vec::new();
        candidates.extend(self.best_date_split(rows, mean, min_leaf, eps));
        for f in 0..self.cats.len() {
            candidates.extend(self.best_level_split(f, rows, mean, min_leaf, eps));
        }
        candidates.sort_by(|a, b| a.factor.cmp(&b.factor));
        let mut best: Option<Candidate> = None;
        for c in candidates {
            if best.as_ref().is_none_or(|b| c.gain > b.gain + eps) {
                best = Some(c);
            }
        }
        best
    }
}

/// Grows a tree best-first: the open leaf with the largest admissible gain is
/// split next until no leaf qualifies or `max_splits` is reached.
pub fn fit_tree(series: &StandardizedSeries, p: &Portfolio, params: &TreeParams) -> Result<PartitionTree> {
    params.validate()?;
    if p.factor_names().iter().any(|f| f == DATE_PREDICTOR) {
        return Err(Error::domain(format!(
            "factor name `{DATE_PREDICTOR}` clashes with the date predictor"
        )));
    }
    let obs = p.observations();
    let rows_obs: Vec<&Observation> = series.source.iter().map(|&i| &obs[i]).collect();
    let mut cats = Vec::with_capacity(p.factor_names().len());
    for name in p.factor_names() {
        let mut level_names: Vec<String> = Vec::new();
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut codes = Vec::with_capacity(rows_obs.len());
        for o in &rows_obs {
            let level = o
                .factor(name)
                .ok_or_else(|| Error::domain(format!("lot `{}` lacks factor `{name}`", o.lot_id)))?;
            let code = *index.entry(level).or_insert_with(|| {
                level_names.push(level.to_string());
                level_names.len() - 1
            });
            codes.push(code);
        }
        cats.push((name.clone(), codes, level_names));
    }
    let table = Table {
        y: series.values.clone(),
        dates: rows_obs.iter().map(|o| o.mfg_date).collect(),
        cats,
    };
    let mut predictors: Vec<String> = p.factor_names().to_vec();
    predictors.push(DATE_PREDICTOR.to_string());
    predictors.sort();
    Ok(grow(&table, predictors, *params))
}

fn grow(table: &Table, predictors: Vec<String>, params: TreeParams) -> PartitionTree {
    let mut nodes = Vec::new();
    if table.y.is_empty() {
        nodes.push(Node { n: 0, mean: 0.0, ss: 0.0, depth: 0, split: None });
        return PartitionTree { nodes, predictors, params };
    }
    let all: Vec<usize> = (0..table.y.len()).collect();
    let (mean, ss) = moments(&table.y, &all);
    let threshold = params.min_split_improvement * ss;
    nodes.push(Node { n: all.len(), mean, ss, depth: 0, split: None });

    // open leaves: (node index, rows, best candidate)
    let mut open: Vec<(usize, Candidate)> = Vec::new();
    let consider = |node: &Node, rows: &[usize]| -> Option<Candidate> {
        if node.depth >= params.max_depth || rows.len() < 2 * params.min_leaf {
            return None;
        }
        table
            .best_split(rows, node.mean, node.ss, params.min_leaf)
            .filter(|c| c.gain > TIE_EPS * node.ss && c.gain > 0.0 && c.gain >= threshold)
    };
    open.extend(consider(&nodes[0], &all).map(|c| (0, c)));

    let mut n_splits = 0;
    while n_splits < params.max_splits && !open.is_empty() {
        // largest gain, earliest node on ties
        let mut pick = 0;
        for (i, (idx, c)) in open.iter().enumerate() {
            let (best_idx, best) = (&open[pick].0, &open[pick].1);
            if c.gain > best.gain || (c.gain == best.gain && idx < best_idx) {
                pick = i;
            }
        }
        let (idx, cand) = open.swap_remove(pick);
        let depth = nodes[idx].depth + 1;
        let mut children = [0usize; 2];
        for (slot, rows) in [&cand.left_rows, &cand.right_rows].into_iter().enumerate() {
            let (mean, ss) = moments(&table.y, rows);
            let child = Node { n: rows.len(), mean, ss, depth, split: None };
            children[slot] = nodes.len();
            if let Some(c) = consider(&child, rows) {
                open.push((nodes.len(), c));
            }
            nodes.push(child);
        }
        nodes[idx].split = Some(Split {
            factor: cand.factor,
            rule: cand.rule,
            ss_reduction: cand.gain,
            order: n_splits,
            left: children[0],
            right: children[1],
        });
        n_splits += 1;
    }
    PartitionTree { nodes, predictors, params }
}

/// One row of the split list in a [`TreeReport`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitEntry {
    pub order: usize,
    pub node: usize,
    pub depth: usize,
    pub factor: String,
    pub rule: Rule,
    pub n: usize,
    pub ss_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeafEntry {
    pub node: usize,
    pub path: Vec<String>,
    pub n: usize,
    pub mean: f64,
    pub ss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Importance {
    pub factor: String,
    pub ss_reduction: f64,
    /// Share of the total reduction across all splits, in [0, 1].
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeReport {
    pub splits: Vec<SplitEntry>,
    pub leaves: Vec<LeafEntry>,
    pub importance: Vec<Importance>,
}

impl PartitionTree {
    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_leaf()).count()
    }

    /// Total within-leaf sum of squares.
    pub fn leaf_ss(&self) -> f64 {
        self.nodes.iter().filter(|n| n.is_leaf()).map(|n| n.ss).sum()
    }

    /// Splits in growth order.
    pub fn splits(&self) -> Vec<(usize, &Split)> {
        let mut out: Vec<(usize, &Split)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.split.as_ref().map(|s| (i, s)))
            .collect();
        out.sort_by_key(|(_, s)| s.order);
        out
    }

    pub fn first_split(&self) -> Option<&Split> {
        self.root().split.as_ref()
    }

    /// The earliest categorical split, used to facet plots.
    pub fn top_categorical(&self) -> Option<&Split> {
        self.splits()
            .into_iter()
            .map(|(_, s)| s)
            .find(|s| matches!(s.rule, Rule::Levels { .. }))
    }

    /// The earliest date threshold in the tree.
    pub fn first_date_threshold(&self) -> Option<NaiveDate> {
        self.splits().into_iter().find_map(|(_, s)| match s.rule {
            Rule::Threshold { date } => Some(date),
            Rule::Levels { .. } => None,
        })
    }

    /// Mean of the leaf an observation falls into. A level never seen at a
    /// node follows the child whose mean is closer to that node's mean.
    pub fn predict(&self, obs: &Observation) -> Result<f64> {
        let mut idx = 0;
        while let Some(split) = &self.nodes[idx].split {
            let go_left = match &split.rule {
                Rule::Threshold { date } => obs.mfg_date <= *date,
                Rule::Levels { left, right } => {
                    let level = obs.factor(&split.factor).ok_or_else(|| {
                        Error::domain(format!(
                            "observation `{}` lacks split factor `{}`",
                            obs.lot_id, split.factor
                        ))
                    })?;
                    if left.iter().any(|l| l == level) {
                        true
                    } else if right.iter().any(|l| l == level) {
                        false
                    } else {
                        let parent = self.nodes[idx].mean;
                        (self.nodes[split.left].mean - parent).abs()
                            <= (self.nodes[split.right].mean - parent).abs()
                    }
                }
            };
            idx = if go_left { split.left } else { split.right };
        }
        Ok(self.nodes[idx].mean)
    }

    pub fn describe(&self) -> TreeReport {
        let splits = self
            .splits()
            .into_iter()
            .map(|(i, s)| SplitEntry {
                order: s.order,
                node: i,
                depth: self.nodes[i].depth,
                factor: s.factor.clone(),
                rule: s.rule.clone(),
                n: self.nodes[i].n,
                ss_reduction: s.ss_reduction,
            })
            .collect::<Vec<_>>();

        let mut leaves = Vec::new();
        let mut stack = vec![(0usize, Vec::<String>::new())];
        while let Some((idx, path)) = stack.pop() {
            let node = &self.nodes[idx];
            match &node.split {
                None => leaves.push(LeafEntry {
                    node: idx,
                    path,
                    n: node.n,
                    mean: node.mean,
                    ss: node.ss,
                }),
                Some(s) => {
                    let mut right = path.clone();
                    right.push(s.rule.describe(&s.factor, false));
                    let mut left = path;
                    left.push(s.rule.describe(&s.factor, true));
                    stack.push((s.right, right));
                    stack.push((s.left, left));
                }
            }
        }

        let total: f64 = splits.iter().map(|s| s.ss_reduction).sum();
        let mut importance: Vec<Importance> = self
            .predictors
            .iter()
            .map(|f| {
                let r: f64 = splits.iter().filter(|s| &s.factor == f).map(|s| s.ss_reduction).sum();
                Importance {
                    factor: f.clone(),
                    ss_reduction: r,
                    share: if total > 0.0 { r / total } else { 0.0 },
                }
            })
            .collect();
        importance.sort_by(|a, b| b.ss_reduction.total_cmp(&a.ss_reduction).then_with(|| a.factor.cmp(&b.factor)));
        TreeReport {
            splits,
            leaves,
            importance,
        }
    }

    /// Indented plain-text rendering, one line per node.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut stack: Vec<(usize, usize, String)> = vec![(0, 0, "all lots".to_string())];
        while let Some((idx, indent, label)) = stack.pop() {
            let node = &self.nodes[idx];
            let _ = write!(
                out,
                "{}{label}: n={} mean={:.4} ss={:.4}",
                "  ".repeat(indent),
                node.n,
                node.mean,
                node.ss
            );
            match &node.split {
                Some(s) => {
                    let _ = writeln!(out, " (split #{} gain={:.4})", s.order + 1, s.ss_reduction);
                    stack.push((s.right, indent + 1, s.rule.describe(&s.factor, false)));
                    stack.push((s.left, indent + 1, s.rule.describe(&s.factor, true)));
                }
                None => out.push('\n'),
            }
        }
        out
    }

    /// Nested JSON: each node carries its children inline.
    pub fn to_json(&self) -> serde_json::Value {
        fn node_json(t: &PartitionTree, idx: usize) -> serde_json::Value {
            let n = &t.nodes[idx];
            let mut v = serde_json::json!({
                "n": n.n,
                "mean": n.mean,
                "ss": n.ss,
            });
            if let Some(s) = &n.split {
                v["split"] = serde_json::json!({
                    "factor": s.factor,
                    "rule": s.rule,
                    "ss_reduction": s.ss_reduction,
                    "order": s.order,
                    "left": node_json(t, s.left),
                    "right": node_json(t, s.right),
                });
            }
            v
        }
        serde_json::json!({
            "params": self.params,
            "predictors": self.predictors,
            "root": node_json(self, 0),
        })
    }
}

pub fn write_importance_csv<W: Write>(report: &TreeReport, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["factor", "ss_reduction", "share"])?;
    for imp in &report.importance {
        w.write_record([
            imp.factor.clone(),
            format!("{:.6}", imp.ss_reduction),
            format!("{:.6}", imp.share),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{CenterMethod, ScaleMethod};
    use crate::standardize::standardize;
    use indexmap::IndexMap;
    use proptest::prelude::*;

    fn obs(i: usize, value: f64, factors: &[(&str, &str)]) -> Observation {
        Observation {
            product_id: "P".into(),
            lot_id: format!("L{i:04}"),
            mfg_date: NaiveDate::from_ymd_opt(2025, 1, 1).unwrap() + chrono::Days::new(i as u64),
            value,
            factors: factors
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect::<IndexMap<_, _>>(),
        }
    }

    /// Raw values used as the response, in production order.
    fn raw_series(p: &Portfolio) -> StandardizedSeries {
        StandardizedSeries {
            values: p.values(),
            source: (0..p.len()).collect(),
            summaries: Default::default(),
            excluded: Vec::new(),
        }
    }

    fn two_level() -> Portfolio {
        let o: Vec<Observation> = (0..100)
            .map(|i| {
                let (lvl, y) = if i % 2 == 0 { ("a", 0.0) } else { ("b", 10.0) };
                obs(i, y, &[("tool", lvl)])
            })
            .collect();
        Portfolio::new(o, vec!["tool".into()]).unwrap()
    }

    #[test]
    fn two_level_example() {
        let p = two_level();
        let t = fit_tree(&raw_series(&p), &p, &TreeParams::default()).unwrap();
        assert_eq!(t.n_splits(), 1);
        let s = t.first_split().unwrap();
        assert_eq!(s.factor, "tool");
        assert_eq!(
            s.rule,
            Rule::Levels {
                left: vec!["a".into()],
                right: vec!["b".into()]
            }
        );
        assert_eq!(t.nodes[s.left].mean, 0.0);
        assert_eq!(t.nodes[s.right].mean, 10.0);

        let report = t.describe();
        assert_eq!(report.splits.len(), 1);
        assert_eq!(report.importance[0].factor, "tool");
        assert_eq!(report.importance[0].share, 1.0);

        assert_eq!(t.predict(&obs(0, 0.0, &[("tool", "a")])).unwrap(), 0.0);
        assert_eq!(t.predict(&obs(0, 0.0, &[("tool", "b")])).unwrap(), 10.0);
        // root mean 5 is equidistant; left wins the tie
        assert_eq!(t.predict(&obs(0, 0.0, &[("tool", "c")])).unwrap(), 0.0);
        assert!(t.predict(&obs(0, 0.0, &[("other", "a")])).is_err());
    }

    #[test]
    fn unseen_level_follows_closer_child() {
        // 30 lots at 0, 10 at 10: root mean 2.5 is closer to the left child
        let o: Vec<Observation> = (0..40)
            .map(|i| {
                let (lvl, y) = if i < 30 { ("a", 0.0) } else { ("b", 10.0) };
                obs(i, y, &[("tool", lvl)])
            })
            .collect();
        let p = Portfolio::new(o, vec!["tool".into()]).unwrap();
        let params = TreeParams { max_depth: 1, ..TreeParams::default() };
        let t = fit_tree(&raw_series(&p), &p, &params).unwrap();
        // the date split isolates the same rows, but "mfg_date" < "tool" wins the tie
        assert_eq!(t.first_split().unwrap().factor, "mfg_date");

        let o: Vec<Observation> = (0..40)
            .map(|i| {
                let (lvl, y) = if i % 4 == 0 { ("b", 10.0) } else { ("a", 0.0) };
                obs(i, y, &[("tool", lvl)])
            })
            .collect();
        let p = Portfolio::new(o, vec!["tool".into()]).unwrap();
        let t = fit_tree(&raw_series(&p), &p, &params).unwrap();
        assert_eq!(t.first_split().unwrap().factor, "tool");
        assert_eq!(t.predict(&obs(0, 0.0, &[("tool", "zzz")])).unwrap(), 0.0);
    }

    #[test]
    fn constant_response_is_single_leaf() {
        let o: Vec<Observation> = (0..20)
            .map(|i| obs(i, 3.0, &[("tool", if i % 3 == 0 { "a" } else { "b" })]))
            .collect();
        let p = Portfolio::new(o, vec!["tool".into()]).unwrap();
        let t = fit_tree(&raw_series(&p), &p, &TreeParams::default()).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert!(t.describe().splits.is_empty());
        assert_eq!(t.predict(&obs(0, 0.0, &[("tool", "q")])).unwrap(), 3.0);
        assert!(t.to_text().starts_with("all lots: n=20"));
    }

    #[test]
    fn date_split_reports_threshold() {
        let o: Vec<Observation> = (0..40)
            .map(|i| obs(i, if i < 25 { 0.0 } else { 4.0 }, &[("tool", "a")]))
            .collect();
        let p = Portfolio::new(o, vec!["tool".into()]).unwrap();
        let t = fit_tree(&raw_series(&p), &p, &TreeParams::default()).unwrap();
        let want = NaiveDate::from_ymd_opt(2025, 1, 25).unwrap();
        assert_eq!(t.first_split().unwrap().rule, Rule::Threshold { date: want });
        assert_eq!(t.first_date_threshold(), Some(want));
        assert!(t.to_text().contains("mfg_date <= 2025-01-25"));
        assert!(t.top_categorical().is_none());
    }

    #[test]
    fn min_leaf_and_validation() {
        let o: Vec<Observation> = (0..12)
            .map(|i| obs(i, if i == 0 { 100.0 } else { 0.0 }, &[("tool", if i == 0 { "x" } else { "y" })]))
            .collect();
        let p = Portfolio::new(o, vec!["tool".into()]).unwrap();
        let t = fit_tree(&raw_series(&p), &p, &TreeParams::default()).unwrap();
        for n in &t.nodes {
            assert!(n.n >= 5);
        }
        let bad = TreeParams {
            min_leaf: 0,
            ..TreeParams::default()
        };
        assert!(fit_tree(&raw_series(&p), &p, &bad).is_err());
    }

    #[test]
    fn json_and_importance_exports() {
        let p = two_level();
        let t = fit_tree(&raw_series(&p), &p, &TreeParams::default()).unwrap();
        let j = t.to_json();
        assert_eq!(j["root"]["split"]["factor"], "tool");
        assert_eq!(j["root"]["split"]["rule"]["kind"], "levels");
        assert_eq!(j["root"]["split"]["right"]["mean"], 10.0);
        let mut buf = Vec::new();
        write_importance_csv(&t.describe(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("factor,ss_reduction,share\ntool,2500.000000,1.000000\n"));
    }

    fn brute_force_gain(ys: &[f64], levels: &[&str]) -> f64 {
        let mut names: Vec<&str> = levels.to_vec();
        names.sort();
        names.dedup();
        let l = names.len();
        let total: f64 = ys.iter().sum();
        let n = ys.len();
        let mut best = 0.0f64;
        // fixing the last level on the right enumerates each partition once
        for mask in 1u32..(1 << (l - 1)) {
            let (mut nl, mut sl) = (0usize, 0.0);
            for (y, lv) in ys.iter().zip(levels) {
                let k = names.iter().position(|x| x == lv).unwrap();
                if mask >> k & 1 == 1 {
                    nl += 1;
                    sl += y;
                }
            }
            let sr = total - sl;
            let g = sl * sl / nl as f64 + sr * sr / (n - nl) as f64 - total * total / n as f64;
            best = best.max(g);
        }
        best
    }

    fn dataset() -> impl Strategy<Value = (Vec<f64>, Vec<String>)> {
        (2usize..=6).prop_flat_map(|l| {
            prop::collection::vec((0..l, -5.0f64..5.0), l..40).prop_map(move |rows| {
                let mut rows = rows;
                // make sure every level occurs at least once
                for (k, r) in rows.iter_mut().enumerate().take(l) {
                    r.0 = k;
                }
                let ys = rows.iter().map(|r| r.1).collect();
                let lv = rows.iter().map(|r| format!("l{}", r.0)).collect();
                (ys, lv)
            })
        })
    }

    fn build(ys: &[f64], dates: &[u64], tools: &[String], ops: &[String]) -> Portfolio {
        let o = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let mut x = obs(i, y, &[("tool", &tools[i]), ("op", &ops[i])]);
                x.mfg_date = NaiveDate::from_ymd_opt(2025, 1, 1).unwrap() + chrono::Days::new(dates[i]);
                x
            })
            .collect();
        Portfolio::new(o, vec!["tool".into(), "op".into()]).unwrap()
    }

    fn tree_data() -> impl Strategy<Value = (Vec<f64>, Vec<u64>, Vec<String>, Vec<String>)> {
        prop::collection::vec((-3.0f64..3.0, 0u64..30, 0usize..4, 0usize..3), 10..80).prop_map(|rows| {
            (
                rows.iter().map(|r| r.0).collect(),
                rows.iter().map(|r| r.1).collect(),
                rows.iter().map(|r| format!("t{}", r.2)).collect(),
                rows.iter().map(|r| format!("o{}", r.3)).collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn mean_ordering_matches_exhaustive((ys, lv) in dataset()) {
            let levels: Vec<&str> = lv.iter().map(String::as_str).collect();
            let got = categorical_split(&ys, &levels, 1).unwrap();
            let want = brute_force_gain(&ys, &levels);
            prop_assert!((got.gain - want).abs() <= 1e-9 * want.max(1.0), "{} vs {}", got.gain, want);
        }

        #[test]
        fn fitting_is_deterministic_and_ss_monotone((ys, d, t, o) in tree_data()) {
            let p = build(&ys, &d, &t, &o);
            let params = TreeParams { min_leaf: 2, min_split_improvement: 0.0, ..TreeParams::default() };
            let a = fit_tree(&raw_series(&p), &p, &params).unwrap();
            let b = fit_tree(&raw_series(&p), &p, &params).unwrap();
            prop_assert_eq!(&a, &b);
            // replay the growth order: each split lowers the leaf SS by its gain
            let mut ss = a.root().ss;
            for (i, s) in a.splits() {
                prop_assert!(s.ss_reduction > 0.0);
                let after = ss - a.nodes[i].ss + a.nodes[s.left].ss + a.nodes[s.right].ss;
                prop_assert!((ss - after - s.ss_reduction).abs() <= 1e-8 * ss.max(1.0));
                prop_assert!(after < ss);
                ss = after;
                prop_assert_eq!(a.nodes[s.left].n + a.nodes[s.right].n, a.nodes[i].n);
            }
            prop_assert!((ss - a.leaf_ss()).abs() <= 1e-8 * ss.max(1.0));
        }

        #[test]
        fn prediction_is_leaf_training_mean((ys, d, t, o) in tree_data()) {
            let p = build(&ys, &d, &t, &o);
            let params = TreeParams { min_leaf: 2, ..TreeParams::default() };
            let tree = fit_tree(&raw_series(&p), &p, &params).unwrap();
            let mut groups: BTreeMap<u64, (usize, f64)> = BTreeMap::new();
            for ob in p.observations() {
                let pred = tree.predict(ob).unwrap();
                let e = groups.entry(pred.to_bits()).or_default();
                e.0 += 1;
                e.1 += ob.value;
            }
            for (bits, (n, sum)) in groups {
                prop_assert!((f64::from_bits(bits) - sum / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tree_on_standardized_series_surfaces_shifted_tool() {
        let mut o = Vec::new();
        for prod in 0..6 {
            for j in 0..40 {
                let tool = if prod < 2 { "hot" } else { "cold" };
                let mut x = obs(j, 100.0 + prod as f64 + ((j * 7 + prod * 3) % 5) as f64 * 0.1, &[("tool", tool)]);
                x.product_id = format!("P{prod}");
                if tool == "hot" && j >= 30 {
                    x.value += 3.0;
                }
                o.push(x);
            }
        }
        let p = Portfolio::new(o, vec!["tool".into()]).unwrap();
        let s = standardize(&p, CenterMethod::Median, ScaleMethod::robust_std_dev()).unwrap();
        let t = fit_tree(&s, &p, &TreeParams::default()).unwrap();
        let report = t.describe();
        assert!(report.splits.iter().any(|e| e.factor == "tool"));
    }
}
