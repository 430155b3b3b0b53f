//! Command-line front end.
//!
//! Exit status: 0 when a run succeeds and nothing is out of control, 2 when a
//! chart signals, 1 on any error (argument errors included).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use crate::charts::{ewma_chart, ir_chart, write_ewma_csv, write_ir_csv, ChartKind, EwmaLimits, IrLimits};
use crate::estimators::{CenterMethod, ScaleMethod};
use crate::ingest::{load_portfolio, write_portfolio, Portfolio, Schema};
use crate::roottree::{fit_tree, write_importance_csv, PartitionTree, Rule, TreeParams};
use crate::simulate::{
    arl_study, fit_scenario, inject_root_cause, level_footprints, resolve_root_cause, simulate_stable,
    synth_portfolio, write_long_csv, write_table_csv, RootCauseSpec, ScenarioSpec, SynthConfig,
};
use crate::standardize::{standardize, standardize_with, summarize, write_series_csv, write_summaries_csv, StandardizedSeries};
use crate::svg::{ewma_svg, facet_svg, ir_svg, Facet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_SIGNAL: i32 = 2;

/// Short-run SPC for product portfolios.
#[derive(Debug, Parser)]
#[command(name = "shortrun", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Standardize every product and write the pooled series.
    Standardize {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        method: MethodArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Standardize, then chart the pooled series (exit 2 on any signal).
    Chart {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        method: MethodArgs,
        #[command(flatten)]
        chart: ChartArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run an ARL study described by a scenario file.
    Simulate {
        #[arg(long, value_name = "FILE")]
        scenario: PathBuf,
        /// Replicates; overrides the scenario's n_sim.
        #[arg(long)]
        nsim: Option<usize>,
        /// Master seed; overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Fit a partition tree of standardized values on the process factors.
    Tree {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        method: MethodArgs,
        #[command(flatten)]
        tree: TreeArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Chart with IR and EWMA; when anything signals, fit a tree and draw the
    /// facet view (exit 2), otherwise stop (exit 0).
    Report {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        method: MethodArgs,
        #[command(flatten)]
        tree: TreeArgs,
        #[arg(long, default_value_t = crate::charts::DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Write a synthetic portfolio CSV, optionally with a shifted factor level.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 147)]
        products: usize,
        /// Shift this level (FACTOR=LEVEL) in the final part of the year.
        #[arg(long, value_name = "FACTOR=LEVEL", conflicts_with = "shift_lots")]
        shift_level: Option<String>,
        /// Shift the level of FACTOR whose lot count is closest to N (FACTOR:N).
        #[arg(long, value_name = "FACTOR:N")]
        shift_lots: Option<String>,
        /// Shift size in multiples of each product's sigma.
        #[arg(long, default_value_t = 4.5)]
        shift: f64,
        /// Fraction of lots (production order) before the shift starts.
        #[arg(long, default_value_t = crate::simulate::DEFAULT_PHASE_SPLIT)]
        phase_split: f64,
        #[arg(long)]
        outliers: bool,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Portfolio CSV.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Column mapping, e.g. product=prod,lot=lot,date=date,value=y
    #[arg(long)]
    schema: Option<Schema>,
}

#[derive(Debug, Args)]
struct MethodArgs {
    #[arg(long, default_value = "median")]
    center: CenterMethod,
    /// stddev, rstd, mad or iqr
    #[arg(long, default_value = "rstd")]
    scale: ScaleMethod,
    /// Lots dated on or before this day fix the product summaries and chart limits.
    #[arg(long, value_name = "YYYY-MM-DD")]
    phase1_cutoff: Option<NaiveDate>,
}

#[derive(Debug, Args)]
struct ChartArgs {
    #[arg(long, default_value = "ir")]
    chart: ChartKind,
    #[arg(long, default_value_t = crate::charts::DEFAULT_LAMBDA)]
    lambda: f64,
}

#[derive(Debug, Args)]
struct TreeArgs {
    #[arg(long, default_value_t = TreeParams::default().max_depth)]
    max_depth: usize,
    #[arg(long, default_value_t = TreeParams::default().min_leaf)]
    min_leaf: usize,
    /// Smallest split gain as a fraction of the root sum of squares.
    #[arg(long, default_value_t = TreeParams::default().min_split_improvement)]
    min_improvement: f64,
    #[arg(long, default_value_t = TreeParams::default().max_splits)]
    max_splits: usize,
}

impl TreeArgs {
    fn params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
            min_split_improvement: self.min_improvement,
            max_splits: self.max_splits,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            EXIT_ERROR
        }
    }
}

/// Joins an error and its causes, skipping causes the previous message already ends with.
fn error_chain(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.ends_with(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

fn dispatch(cmd: Command) -> anyhow::Result<i32> {
    match cmd {
        Command::Standardize { input, method, out } => cmd_standardize(&input, &method, &out),
        Command::Chart {
            input,
            method,
            chart,
            out,
        } => cmd_chart(&input, &method, &chart, &out),
        Command::Simulate {
            scenario,
            nsim,
            seed,
            out,
        } => cmd_simulate(&scenario, nsim, seed, &out),
        Command::Tree {
            input,
            method,
            tree,
            out,
        } => cmd_tree(&input, &method, &tree, &out),
        Command::Report {
            input,
            method,
            tree,
            lambda,
            out,
        } => cmd_report(&input, &method, &tree, lambda, &out),
        Command::Synth {
            seed,
            products,
            shift_level,
            shift_lots,
            shift,
            phase_split,
            outliers,
            out,
        } => cmd_synth(seed, products, shift_level, shift_lots, shift, phase_split, outliers, &out),
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn load(input: &InputArgs) -> anyhow::Result<Portfolio> {
    let schema = input.schema.clone().unwrap_or_default();
    Ok(load_portfolio(&input.input, &schema)?)
}

/// Standardized series plus how many of its leading values are phase I.
struct Prepared {
    portfolio: Portfolio,
    series: StandardizedSeries,
    phase_one: usize,
}

fn prepare(input: &InputArgs, method: &MethodArgs) -> anyhow::Result<Prepared> {
    let portfolio = load(input)?;
    method.scale.validate()?;
    let Some(cutoff) = method.phase1_cutoff else {
        let series = standardize(&portfolio, method.center, method.scale)?;
        let phase_one = series.len();
        return Ok(Prepared {
            portfolio,
            series,
            phase_one,
        });
    };
    let early = portfolio.filter(|o| o.mfg_date <= cutoff)?;
    if early.is_empty() {
        bail!("no lots dated on or before the phase-1 cutoff {cutoff}");
    }
    let summaries = summarize(&early, method.center, method.scale);
    let mut series = standardize_with(&portfolio, &summaries.products)?;
    // keep the phase-I reason where there is one
    let mut excluded = summaries.excluded;
    for e in series.excluded.drain(..) {
        if !excluded.iter().any(|x| x.product_id == e.product_id) {
            excluded.push(e);
        }
    }
    excluded.sort_by(|a, b| a.product_id.cmp(&b.product_id));
    series.excluded = excluded;
    let obs = portfolio.observations();
    let phase_one = series
        .source
        .iter()
        .take_while(|&&i| obs[i].mfg_date <= cutoff)
        .count();
    if phase_one < 3 {
        bail!("only {phase_one} standardized lots on or before the phase-1 cutoff {cutoff}; need at least 3");
    }
    Ok(Prepared {
        portfolio,
        series,
        phase_one,
    })
}

fn write_series(p: &Prepared, out: &Path) -> anyhow::Result<()> {
    write_out(
        &out.join("standardized.csv"),
        &csv_bytes(|b| write_series_csv(&p.series, &p.portfolio, b))?,
    )?;
    write_out(
        &out.join("summaries.csv"),
        &csv_bytes(|b| write_summaries_csv(&p.series, b))?,
    )
}

fn cmd_standardize(input: &InputArgs, method: &MethodArgs, out: &Path) -> anyhow::Result<i32> {
    let p = prepare(input, method)?;
    write_series(&p, out)?;
    println!(
        "standardized {} lots of {} products ({} excluded) with {}/{}",
        p.series.len(),
        p.series.summaries.len(),
        p.series.excluded.len(),
        method.center,
        method.scale
    );
    Ok(EXIT_OK)
}

/// Charts the pooled series and writes CSV and SVG. Returns the number of flags.
fn chart_to_files(p: &Prepared, kind: ChartKind, lambda: f64, out: &Path) -> anyhow::Result<usize> {
    let values = &p.series.values;
    let frozen = p.phase_one < values.len();
    let divider = frozen.then_some(p.phase_one);
    let stem = format!("chart_{}", kind.label().to_ascii_lowercase());
    match kind {
        ChartKind::Ir => {
            let limits = if frozen {
                Some(IrLimits::estimate(&values[..p.phase_one]).context("phase-1 limits")?)
            } else {
                None
            };
            let chart = ir_chart(values, limits.as_ref())?;
            write_out(&out.join(format!("{stem}.csv")), &csv_bytes(|b| write_ir_csv(&chart, b))?)?;
            let svg = ir_svg(&chart, "IR chart of standardized values", divider);
            write_out(&out.join(format!("{stem}.svg")), svg.as_bytes())?;
            let n_mr = chart.mr_points.iter().filter(|m| m.flag).count();
            println!(
                "ir: {} points, {} individuals and {} moving ranges beyond limits [{:.4}, {:.4}]",
                chart.points.len(),
                chart.n_flagged(),
                n_mr,
                chart.lcl,
                chart.ucl
            );
            Ok(chart.n_flagged() + n_mr)
        }
        ChartKind::Ewma => {
            let limits = if frozen {
                Some(EwmaLimits::estimate(&values[..p.phase_one]).context("phase-1 limits")?)
            } else {
                None
            };
            let chart = ewma_chart(values, lambda, crate::charts::DEFAULT_WIDTH, limits)?;
            write_out(&out.join(format!("{stem}.csv")), &csv_bytes(|b| write_ewma_csv(&chart, b))?)?;
            let svg = ewma_svg(&chart, "EWMA chart of standardized values", divider);
            write_out(&out.join(format!("{stem}.svg")), svg.as_bytes())?;
            println!(
                "ewma: {} points, {} beyond limits (lambda {})",
                chart.z.len(),
                chart.n_flagged(),
                chart.lambda
            );
            Ok(chart.n_flagged())
        }
    }
}

fn cmd_chart(input: &InputArgs, method: &MethodArgs, chart: &ChartArgs, out: &Path) -> anyhow::Result<i32> {
    let p = prepare(input, method)?;
    write_series(&p, out)?;
    let flagged = chart_to_files(&p, chart.chart, chart.lambda, out)?;
    Ok(if flagged > 0 { EXIT_SIGNAL } else { EXIT_OK })
}

fn tree_to_files(p: &Prepared, args: &TreeArgs, out: &Path) -> anyhow::Result<PartitionTree> {
    let tree = fit_tree(&p.series, &p.portfolio, &args.params())?;
    let json = serde_json::to_string_pretty(&tree.to_json())? + "\n";
    write_out(&out.join("tree.json"), json.as_bytes())?;
    write_out(&out.join("tree.txt"), tree.to_text().as_bytes())?;
    let report = tree.describe();
    write_out(
        &out.join("importance.csv"),
        &csv_bytes(|b| write_importance_csv(&report, b))?,
    )?;
    print!("{}", tree.to_text());
    Ok(tree)
}

fn cmd_tree(input: &InputArgs, method: &MethodArgs, args: &TreeArgs, out: &Path) -> anyhow::Result<i32> {
    let p = prepare(input, method)?;
    tree_to_files(&p, args, out)?;
    Ok(EXIT_OK)
}

/// Standardized values grouped by the levels of `factor`, each split at `threshold`.
fn facets(p: &Prepared, factor: &str, threshold: Option<NaiveDate>) -> Vec<Facet> {
    let obs = p.portfolio.observations();
    let mut by_level: std::collections::BTreeMap<&str, Facet> = Default::default();
    for (&v, &i) in p.series.values.iter().zip(&p.series.source) {
        let o = &obs[i];
        let level = o.factor(factor).unwrap_or(crate::ingest::MISSING_LEVEL);
        let f = by_level.entry(level).or_insert_with(|| Facet {
            level: level.to_string(),
            before: Vec::new(),
            after: Vec::new(),
        });
        if threshold.is_some_and(|d| o.mfg_date > d) {
            f.after.push(v);
        } else {
            f.before.push(v);
        }
    }
    by_level.into_values().collect()
}

fn cmd_report(
    input: &InputArgs,
    method: &MethodArgs,
    args: &TreeArgs,
    lambda: f64,
    out: &Path,
) -> anyhow::Result<i32> {
    let p = prepare(input, method)?;
    write_series(&p, out)?;
    let flagged = chart_to_files(&p, ChartKind::Ir, lambda, out)? + chart_to_files(&p, ChartKind::Ewma, lambda, out)?;
    if flagged == 0 {
        println!("in control, no root-cause analysis performed");
        return Ok(EXIT_OK);
    }
    let tree = tree_to_files(&p, args, out)?;
    let report = tree.describe();
    let threshold = tree.first_date_threshold();
    match tree.top_categorical() {
        Some(split) => {
            let highlight = match &split.rule {
                Rule::Levels { right, .. } => right.clone(),
                Rule::Threshold { .. } => Vec::new(),
            };
            let svg = facet_svg(
                &split.factor,
                &facets(&p, &split.factor, threshold),
                threshold,
                &highlight,
                &format!("Standardized values by {}", split.factor),
            );
            write_out(&out.join("facets.svg"), svg.as_bytes())?;
            println!(
                "top factor: {} (high-mean levels: {})",
                split.factor,
                highlight.join(", ")
            );
        }
        None => println!("no categorical split; facet view skipped"),
    }
    if let Some(d) = threshold {
        println!("date threshold: {d}");
    }
    if let Some(top) = report.importance.first().filter(|i| i.ss_reduction > 0.0) {
        println!("most important: {} ({:.1}% of SS reduction)", top.factor, 100.0 * top.share);
    }
    Ok(EXIT_SIGNAL)
}

fn cmd_simulate(scenario_path: &Path, nsim: Option<usize>, seed: Option<u64>, out: &Path) -> anyhow::Result<i32> {
    let text = fs::read_to_string(scenario_path)
        .with_context(|| format!("reading {}", scenario_path.display()))?;
    let spec = ScenarioSpec::from_json(&text).with_context(|| scenario_path.display().to_string())?;
    let seed = seed
        .or(spec.seed)
        .ok_or_else(|| anyhow!("a seed is required: pass --seed or set `seed` in {}", scenario_path.display()))?;
    let n_sim = nsim.unwrap_or(spec.n_sim);
    let base = scenario_path.parent().unwrap_or(Path::new("."));
    let (scenario, dropped) = spec.build(base).with_context(|| scenario_path.display().to_string())?;
    let root_causes = spec
        .resolve_root_causes(&scenario)
        .with_context(|| scenario_path.display().to_string())?;

    // the main run carries the root causes; its stable rows fill one half of table1.csv
    let main_cfg = spec.study_config(root_causes.clone(), n_sim, seed);
    let main = arl_study(&scenario, &main_cfg)?;
    let mut other_cfg = spec.study_config(Vec::new(), n_sim, seed);
    other_cfg.with_outliers = !spec.with_outliers;
    let other = arl_study(&scenario, &other_cfg)?;
    let (without, with) = if spec.with_outliers { (&other, &main) } else { (&main, &other) };

    let mut files = vec!["arl0.csv", "table1.csv"];
    write_out(&out.join("arl0.csv"), &csv_bytes(|b| write_long_csv(&[without, with], false, b))?)?;
    write_out(&out.join("table1.csv"), &csv_bytes(|b| write_table_csv(&[without, with], false, b))?)?;
    if !root_causes.is_empty() {
        write_out(&out.join("arl1.csv"), &csv_bytes(|b| write_long_csv(&[&main], true, b))?)?;
        write_out(&out.join("table2.csv"), &csv_bytes(|b| write_table_csv(&[&main], true, b))?)?;
        files.extend(["arl1.csv", "table2.csv"]);
    }
    files.push("manifest.json");

    let schedule = scenario.schedule()?;
    let manifest = serde_json::json!({
        "program": "shortrun",
        "version": env!("CARGO_PKG_VERSION"),
        "scenario_file": scenario_path.file_name().map(|f| f.to_string_lossy().into_owned()),
        "seed": seed,
        "n_sim": n_sim,
        "with_outliers": spec.with_outliers,
        "summary_scope": spec.summary_scope,
        "charts": spec.charts,
        "centers": spec.centers,
        "scales": spec.scales,
        "lambda": spec.lambda,
        "portfolio": {
            "products": scenario.products.len(),
            "lots": scenario.n_lots(),
            "phase_one_lots": main.phase_one_lots,
            "phase_two_lots": main.phase_two_lots,
            "outlier_prob": scenario.outlier_prob,
            "outlier_sd_multiple": scenario.outlier_sd_multiple,
            "phase_split": scenario.phase_split,
            "dropped": dropped,
        },
        "root_causes": root_causes.iter().map(|rc| serde_json::json!({
            "id": rc.id,
            "factor": rc.factor_name,
            "level": rc.level,
            "affected_lots": rc.affected_lots(&schedule),
            "shifts": rc.shift_multiples,
        })).collect::<Vec<_>>(),
        "files": files,
    });
    write_out(
        &out.join("manifest.json"),
        (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes(),
    )?;
    println!(
        "{} replicates over {} products / {} lots; wrote {}",
        n_sim,
        scenario.products.len(),
        scenario.n_lots(),
        files.join(", ")
    );
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    seed: u64,
    products: usize,
    shift_level: Option<String>,
    shift_lots: Option<String>,
    shift: f64,
    phase_split: f64,
    outliers: bool,
    out: &Path,
) -> anyhow::Result<i32> {
    let mut cfg = SynthConfig::portfolio_shaped(seed);
    cfg.n_products = products;
    let scenario = {
        let mut s = fit_scenario(&synth_portfolio(&cfg)?)?.scenario;
        s.phase_split = phase_split;
        s
    };
    let mut portfolio = simulate_stable(&scenario, outliers, seed)?;
    let spec = match (shift_level, shift_lots) {
        (Some(fl), _) => {
            let (factor, level) = fl
                .split_once('=')
                .ok_or_else(|| anyhow!("--shift-level expects FACTOR=LEVEL, got `{fl}`"))?;
            Some(RootCauseSpec {
                id: "shift".into(),
                factor: Some(factor.trim().into()),
                level: Some(level.trim().into()),
                target_lots: None,
                shifts: vec![shift],
            })
        }
        (None, Some(fl)) => {
            let (factor, n) = fl
                .split_once(':')
                .ok_or_else(|| anyhow!("--shift-lots expects FACTOR:N, got `{fl}`"))?;
            let n: usize = n.trim().parse().with_context(|| format!("--shift-lots count `{n}`"))?;
            Some(RootCauseSpec {
                id: "shift".into(),
                factor: Some(factor.trim().into()),
                level: None,
                target_lots: Some(n),
                shifts: vec![shift],
            })
        }
        (None, None) => None,
    };
    if let Some(spec) = spec {
        let rc = resolve_root_cause(&spec, &level_footprints(&portfolio))?;
        portfolio = inject_root_cause(&portfolio, &scenario, &rc, shift, phase_split)?;
        eprintln!(
            "shifted {}={} by {shift} sigma after {:.0}% of lots ({} lots carry the level)",
            rc.factor_name,
            rc.level,
            100.0 * phase_split,
            rc.affected_lots(&portfolio)
        );
    }
    let mut buf = Vec::new();
    write_portfolio(&portfolio, &mut buf, &Schema::default())?;
    write_out(out, &buf)?;
    println!(
        "wrote {} lots of {} products to {}",
        portfolio.len(),
        portfolio.products().len(),
        out.display()
    );
    Ok(EXIT_OK)
}
