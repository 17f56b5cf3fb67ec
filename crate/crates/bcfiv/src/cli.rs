//! Command-line interface: `fit` (analyze one CSV), `simulate` (Monte Carlo
//! grids from a scenario file), and `tables` (merge runs side by side).
//!
//! Exit codes: 0 success, 1 user error, 2 internal error. Diagnostics go to
//! stderr; stdout carries only the final artifact-path summary. Artifacts
//! (CSV/JSON) are byte-identical across reruns with the same seed; wall
//! times go to a separate `timing.json` to keep the manifest deterministic.

use crate::dataset::{honest_split, load_csv, Schema};
use crate::error::{Error, Result};
use crate::estimators::infer_tree;
use crate::montecarlo::{
    aggregate, emit_table, results_from_csv, results_to_csv, run_all, DiscardPolicy,
    HarnessConfig, MonteCarloReport,
};
use crate::simgen::{Cell, Compliance, SimScenario};
use crate::subgroups::discover;
use crate::surfaces::{fit_surfaces, SurfaceConfig, Variant};
use crate::tree::CartConfig;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser, Debug)]
#[command(
    name = "bcfiv",
    version,
    about = "Heterogeneous complier-effect discovery and estimation with a binary instrument"
)]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the full discovery + honest-inference pipeline on a CSV.
    Fit(FitArgs),
    /// Run Monte Carlo scenario grids described by a config file.
    Simulate(SimulateArgs),
    /// Merge finished run directories (and external result CSVs) into
    /// side-by-side tables.
    Tables(TablesArgs),
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Input CSV path.
    #[arg(long)]
    pub input: PathBuf,
    /// Outcome column name.
    #[arg(long, default_value = "y")]
    pub outcome: String,
    /// Treatment-receipt column name.
    #[arg(long, default_value = "w")]
    pub treatment: String,
    /// Instrument column name.
    #[arg(long)]
    pub instrument: String,
    /// Comma-separated covariate columns (default: every other column).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Discovery target: bcf-iv (complier effects) or bcf-itt (ITT).
    #[arg(long, default_value = "bcf-iv", value_parser = parse_variant)]
    pub mode: Variant,
    /// Maximum discovery-tree depth.
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    /// Minimum inference rows per reported node.
    #[arg(long, default_value_t = 50)]
    pub min_node: usize,
    /// First-stage F threshold below which a node is discarded.
    #[arg(long, default_value_t = 10.0)]
    pub weak_f_threshold: f64,
    /// Fraction of rows assigned to the discovery half.
    #[arg(long, default_value_t = 0.5)]
    pub split_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// MCMC burn-in sweeps per surface fit.
    #[arg(long, default_value_t = 500)]
    pub burn: usize,
    /// Retained MCMC sweeps per surface fit.
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    #[arg(long, default_value_t = 200)]
    pub trees_prognostic: usize,
    #[arg(long, default_value_t = 50)]
    pub trees_treatment: usize,
    /// Output directory (default from BCFIV_OUT or ./bcfiv-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all available).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Scenario config file (key = value lines; see the scenarios/ folder).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Override the configured replicate count.
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TablesArgs {
    /// Finished run directories (each must contain manifest.json).
    #[arg(long, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    /// Externally produced replicate-result CSVs to fold in.
    #[arg(long)]
    pub external: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s {
        "bcf-iv" => Ok(Variant::BcfIv),
        "bcf-itt" => Ok(Variant::BcfItt),
        _ => Err("expected bcf-iv or bcf-itt".into()),
    }
}

fn out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os("BCFIV_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("bcfiv-out"))
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p.display().to_string(), e))
}

fn init_pool(jobs: Option<usize>) {
    if let Some(j) = jobs {
        // ignore "already initialized" on repeated calls in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    config: C,
    artifacts: Vec<String>,
}

fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &str,
    config: C,
    artifacts: &[PathBuf],
    wall_secs: f64,
) -> Result<()> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config,
        artifacts: artifacts
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    // wall time lives apart so the manifest stays byte-stable across reruns
    write_json(
        &dir.join("timing.json"),
        &serde_json::json!({ "wall_secs": wall_secs }),
    )
}

/// Entry point used by the binary. Returns the process exit code.
pub fn run(cfg: RunConfig) -> i32 {
    let outcome = match cfg.command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Tables(args) => cmd_tables(&args),
    };
    match outcome {
        Ok(artifacts) => {
            for a in artifacts {
                println!("{}", a.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {}", e);
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

#[derive(Serialize)]
struct FitConfigEcho {
    input: String,
    outcome: String,
    treatment: String,
    instrument: String,
    covariates: Vec<String>,
    mode: Variant,
    depth: usize,
    min_node: usize,
    weak_f_threshold: f64,
    split_ratio: f64,
    seed: u64,
    burn: usize,
    draws: usize,
    trees_prognostic: usize,
    trees_treatment: usize,
}

pub fn cmd_fit(args: &FitArgs) -> Result<Vec<PathBuf>> {
    let start = Instant::now();
    init_pool(args.jobs);
    let covariates = if args.covariates.is_empty() {
        infer_covariates(&args.input, &[&args.outcome, &args.treatment, &args.instrument])?
    } else {
        args.covariates.clone()
    };
    let schema = Schema {
        outcome: args.outcome.clone(),
        treatment: args.treatment.clone(),
        instrument: args.instrument.clone(),
        covariates: covariates.clone(),
        outcome_kind: None,
    };
    let data = load_csv(&args.input, &schema)?;
    let split = honest_split(&data, args.split_ratio, args.seed)?;

    let mut surface = SurfaceConfig::default()
        .with_chain(args.burn, args.draws)
        .with_seed(args.seed);
    surface.prognostic.q = args.trees_prognostic;
    surface.treatment.q = args.trees_treatment;
    let surfaces = fit_surfaces(&split.discovery, &surface, None)?;

    let cart = CartConfig {
        max_depth: args.depth,
        ..CartConfig::default()
    };
    let st = discover(
        split.discovery.x(),
        split.discovery.n(),
        split.discovery.p(),
        surfaces.discovery_targets(args.mode),
        &cart,
    )?;
    let annotated = infer_tree(&st, &split.inference, args.min_node, args.weak_f_threshold)?;

    let dir = out_dir(&args.out);
    ensure_dir(&dir)?;
    let tree_json = dir.join("tree.json");
    let tree_txt = dir.join("tree.txt");
    let surfaces_csv = dir.join("surfaces.csv");
    write_json(&tree_json, &annotated)?;
    write_text(&tree_txt, &annotated.render_text(&data.covariate_names))?;
    surfaces.write_csv(&surfaces_csv)?;
    let artifacts = vec![tree_json, tree_txt, surfaces_csv];
    write_manifest(
        &dir,
        "fit",
        FitConfigEcho {
            input: args.input.display().to_string(),
            outcome: args.outcome.clone(),
            treatment: args.treatment.clone(),
            instrument: args.instrument.clone(),
            covariates,
            mode: args.mode,
            depth: args.depth,
            min_node: args.min_node,
            weak_f_threshold: args.weak_f_threshold,
            split_ratio: args.split_ratio,
            seed: args.seed,
            burn: args.burn,
            draws: args.draws,
            trees_prognostic: args.trees_prognostic,
            trees_treatment: args.trees_treatment,
        },
        &artifacts,
        start.elapsed().as_secs_f64(),
    )?;
    let mut all = artifacts;
    all.push(dir.join("manifest.json"));
    Ok(all)
}

fn infer_covariates(path: &Path, reserved: &[&str]) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Schema(format!("cannot read {}: {}", path.display(), e)))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header: {}", e)))?;
    let cov: Vec<String> = headers
        .iter()
        .filter(|h| !reserved.contains(h))
        .map(|h| h.to_string())
        .collect();
    if cov.is_empty() {
        return Err(Error::Schema(
            "no covariate columns left after removing outcome/treatment/instrument".into(),
        ));
    }
    Ok(cov)
}

/// Parsed scenario file: harness keys plus the embedded scenario.
#[derive(Debug, Clone, Serialize)]
pub struct RunPlan {
    pub base: HarnessConfig,
    pub k_grid: Option<Vec<f64>>,
    pub gap_grid: Option<Vec<f64>>,
}

/// Split harness keys out of a scenario file; the rest is parsed as a
/// scenario description.
pub fn parse_run_file(text: &str) -> Result<RunPlan> {
    const HARNESS_KEYS: &[&str] = &[
        "replicates",
        "variants",
        "master_seed",
        "k_grid",
        "gap_grid",
        "burn",
        "draws",
        "min_node",
        "weak_f_threshold",
        "split_ratio",
        "max_depth",
        "min_leaf",
        "trees_prognostic",
        "trees_treatment",
        "trees_propensity",
        "trees_compliance",
        "discard_policy",
    ];
    let mut scenario_lines = Vec::new();
    let mut harness: Vec<(String, String)> = Vec::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        match line.split_once('=') {
            Some((k, v)) if HARNESS_KEYS.contains(&k.trim()) => {
                harness.push((k.trim().to_string(), v.trim().to_string()));
            }
            _ => scenario_lines.push(raw),
        }
    }
    let scenario = SimScenario::from_kv(&scenario_lines.join("\n"))?;
    let mut plan = RunPlan {
        base: HarnessConfig::desk_scale(scenario),
        k_grid: None,
        gap_grid: None,
    };
    let parse_list = |v: &str| -> Result<Vec<f64>> {
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Argument(format!("bad number '{}' in grid", s)))
            })
            .collect()
    };
    for (k, v) in harness {
        let num = || {
            v.parse::<f64>()
                .map_err(|_| Error::Argument(format!("key '{}' expects a number", k)))
        };
        match k.as_str() {
            "replicates" => plan.base.replicates = num()? as usize,
            "master_seed" => plan.base.master_seed = num()? as u64,
            "min_node" => plan.base.min_node = num()? as usize,
            "weak_f_threshold" => plan.base.weak_threshold = num()?,
            "split_ratio" => plan.base.split_ratio = num()?,
            "max_depth" => plan.base.cart.max_depth = num()? as usize,
            "min_leaf" => plan.base.cart.min_leaf = num()? as usize,
            "burn" => {
                let b = num()? as usize;
                let d = plan.base.surface.prognostic.n_draw;
                plan.base.surface = plan.base.surface.clone().with_chain(b, d);
            }
            "draws" => {
                let d = num()? as usize;
                let b = plan.base.surface.prognostic.n_burn;
                plan.base.surface = plan.base.surface.clone().with_chain(b, d);
            }
            "trees_prognostic" => plan.base.surface.prognostic.q = num()? as usize,
            "trees_treatment" => plan.base.surface.treatment.q = num()? as usize,
            "trees_propensity" => plan.base.surface.propensity.q = num()? as usize,
            "trees_compliance" => plan.base.surface.compliance.q = num()? as usize,
            "k_grid" => plan.k_grid = Some(parse_list(&v)?),
            "gap_grid" => plan.gap_grid = Some(parse_list(&v)?),
            "variants" => {
                plan.base.variants = v
                    .split(',')
                    .map(|s| parse_variant(s.trim()).map_err(Error::Argument))
                    .collect::<Result<_>>()?;
            }
            "discard_policy" => {
                plan.base.discard_policy = match v.as_str() {
                    "conservative-coverage" => DiscardPolicy::ConservativeCoverage,
                    "drop-units" => DiscardPolicy::DropUnits,
                    _ => {
                        return Err(Error::Argument(
                            "discard_policy expects conservative-coverage or drop-units".into(),
                        ))
                    }
                };
            }
            _ => unreachable!("key filtered above"),
        }
    }
    Ok(plan)
}

/// The heterogeneous truth cells of a scenario, as cells.
fn truth_cells_of(scenario: &SimScenario) -> Vec<Cell> {
    scenario
        .truth_cells()
        .iter()
        .map(|t| match t.name.as_str() {
            "l1" => Cell::L1,
            "l2" => Cell::L2,
            "l3" => Cell::L3,
            _ => Cell::L4,
        })
        .collect()
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<Vec<PathBuf>> {
    let start = Instant::now();
    init_pool(args.jobs);
    let text = std::fs::read_to_string(&args.scenario)
        .map_err(|e| Error::io(args.scenario.display().to_string(), e))?;
    let mut plan = parse_run_file(&text)?;
    if let Some(m) = args.replicates {
        plan.base.replicates = m;
    }
    let dir = out_dir(&args.out);
    ensure_dir(&dir)?;

    // expand the grid into labelled harness configs
    let mut cases: Vec<(String, HarnessConfig)> = Vec::new();
    if let Some(ks) = &plan.k_grid {
        for &k in ks {
            let mut cfg = plan.base.clone();
            cfg.scenario.k = k;
            cases.push((format!("{}", k), cfg));
        }
    } else if let Some(gaps) = &plan.gap_grid {
        for &g in gaps {
            let mut cfg = plan.base.clone();
            let (l1, l2) = (0.5 - g / 2.0, 0.5 + g / 2.0);
            cfg.scenario.compliance = Compliance::PerCell {
                l1,
                l2,
                default: 0.5,
            };
            cases.push((format!("{}:{}", l1, l2), cfg));
        }
    } else {
        cases.push(("run".into(), plan.base.clone()));
    }

    let mut artifacts = Vec::new();
    let mut reports: Vec<(String, MonteCarloReport)> = Vec::new();
    let mut failed = 0usize;
    for (label, cfg) in &cases {
        eprintln!(
            "running {} replicates at {} = {}",
            cfg.replicates,
            if plan.gap_grid.is_some() { "gap" } else { "k" },
            label
        );
        let results = run_all(cfg);
        failed += results.iter().filter(|r| r.error.is_some()).count();
        let res_path = dir.join(format!("results_{}.csv", label.replace(':', "_")));
        results_to_csv(&results, &res_path)?;
        artifacts.push(res_path);
        let truths = truth_cells_of(&cfg.scenario);
        for &variant in &cfg.variants {
            let report = aggregate(&results, variant, &truths, cfg.discard_policy)?;
            reports.push((label.clone(), report));
        }
    }
    if failed > 0 {
        eprintln!("warning: {} replicate(s) failed and were recorded", failed);
    }
    let table_path = dir.join("table.csv");
    let rows: Vec<(String, &MonteCarloReport)> = reports
        .iter()
        .map(|(label, rep)| (label.clone(), rep))
        .collect();
    emit_table(
        &table_path,
        if plan.gap_grid.is_some() { "compliance" } else { "k" },
        &rows,
    )?;
    artifacts.push(table_path);
    write_manifest(&dir, "simulate", &plan, &artifacts, start.elapsed().as_secs_f64())?;
    artifacts.push(dir.join("manifest.json"));
    Ok(artifacts)
}

pub fn cmd_tables(args: &TablesArgs) -> Result<Vec<PathBuf>> {
    let start = Instant::now();
    if args.runs.is_empty() && args.external.is_empty() {
        return Err(Error::Argument("nothing to merge: pass --runs or --external".into()));
    }
    let dir = out_dir(&args.out);
    ensure_dir(&dir)?;
    let mut merged = String::new();
    let mut header: Option<String> = None;
    for run in &args.runs {
        let manifest = run.join("manifest.json");
        if !manifest.exists() {
            return Err(Error::Schema(format!(
                "run directory {} is missing manifest.json",
                run.display()
            )));
        }
        let table = run.join("table.csv");
        let text = std::fs::read_to_string(&table)
            .map_err(|e| Error::io(table.display().to_string(), e))?;
        let mut lines = text.lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::Schema(format!("{} is empty", table.display())))?;
        match &header {
            None => {
                header = Some(head.to_string());
                merged.push_str("source,");
                merged.push_str(head);
                merged.push('\n');
            }
            Some(h) if h != head => {
                return Err(Error::Schema(format!(
                    "table schema mismatch: {} has columns [{}] but earlier runs had [{}]",
                    table.display(),
                    head,
                    h
                )));
            }
            _ => {}
        }
        let source = run
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| run.display().to_string());
        for line in lines {
            merged.push_str(&format!("{},{}\n", source, line));
        }
    }
    // fold in external replicate-result CSVs as aggregate rows
    for ext in &args.external {
        let results = results_from_csv(ext)?;
        let variants: Vec<Variant> = {
            let mut v: Vec<Variant> = results.iter().map(|r| r.variant).collect();
            v.dedup();
            v
        };
        for variant in variants {
            let report = aggregate(
                &results,
                variant,
                &[Cell::L1, Cell::L2],
                DiscardPolicy::ConservativeCoverage,
            )?;
            let source = ext
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "external".into());
            if header.is_none() {
                merged.push_str("source,label,variant,pooled_bias,pooled_mse,pooled_coverage\n");
                header = Some("external-only".into());
            }
            merged.push_str(&format!(
                "{},external,{},{},{},{}\n",
                source,
                match report.variant {
                    Variant::BcfIv => "bcf-iv",
                    Variant::BcfItt => "bcf-itt",
                },
                report.pooled.bias,
                report.pooled.mse,
                report.pooled.coverage
            ));
        }
    }
    let out_path = dir.join("merged.csv");
    write_text(&out_path, &merged)?;
    let artifacts = vec![out_path];
    write_manifest(
        &dir,
        "tables",
        serde_json::json!({
            "runs": args.runs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "external": args.external.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        }),
        &artifacts,
        start.elapsed().as_secs_f64(),
    )?;
    let mut all = artifacts;
    all.push(dir.join("manifest.json"));
    Ok(all)
}
