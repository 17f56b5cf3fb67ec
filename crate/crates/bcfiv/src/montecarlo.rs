//! Monte Carlo harness: replicate runner and metric aggregation (discovery
//! proportion, bias, MSE, coverage) over the synthetic scenarios.

use crate::dataset::honest_split;
use crate::error::{Error, Result};
use crate::estimators::infer_tree;
use crate::rng::derive_seed;
use crate::simgen::{generate, Cell, Robustness, SimScenario};
use crate::subgroups::{discover, match_truth};
use crate::surfaces::{fit_surfaces, SurfaceConfig, Variant};
use crate::tree::CartConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

/// How units whose every containing node was discarded enter the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscardPolicy {
    /// Exclude from bias/MSE, count as not covered (default).
    ConservativeCoverage,
    /// Exclude from every metric.
    DropUnits,
}

/// Full configuration of one Monte Carlo run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub scenario: SimScenario,
    pub variants: Vec<Variant>,
    /// Number of replicates M.
    pub replicates: usize,
    pub master_seed: u64,
    pub split_ratio: f64,
    pub cart: CartConfig,
    pub min_node: usize,
    pub weak_threshold: f64,
    pub surface: SurfaceConfig,
    pub discard_policy: DiscardPolicy,
}

impl HarnessConfig {
    /// Desk-scale defaults: chains sized so a full grid finishes on a
    /// workstation while discovery quality stays close to long-chain runs.
    pub fn desk_scale(scenario: SimScenario) -> Self {
        let surface = SurfaceConfig::default();
        let mut surface = surface.with_chain(200, 300);
        surface.prognostic.q = 75;
        surface.treatment.q = 25;
        surface.propensity.q = 30;
        surface.compliance.q = 30;
        HarnessConfig {
            scenario,
            variants: vec![Variant::BcfIv],
            replicates: 50,
            master_seed: 20260823,
            split_ratio: 0.5,
            cart: CartConfig::default(),
            min_node: 50,
            weak_threshold: 10.0,
            surface,
            discard_policy: DiscardPolicy::ConservativeCoverage,
        }
    }
}

/// Per-unit outcome of one replicate, over the inference sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitRecord {
    pub cell: Cell,
    pub true_tau: f64,
    /// (point estimate, ci lower, ci upper) of the deepest live node, if any.
    pub estimate: Option<(f64, f64, f64)>,
}

/// Outcome of one replicate for one discovery variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub variant: Variant,
    pub truth_names: Vec<String>,
    pub discovered: Vec<bool>,
    pub units: Vec<UnitRecord>,
    pub runtime_secs: f64,
    /// A failed replicate is recorded, not dropped.
    pub error: Option<String>,
}

/// Run one replicate end to end: generate, split honestly, fit surfaces,
/// discover subgroups, run honest inference, and match against truth. All
/// requested variants reuse the same fitted surfaces.
pub fn run_replicate(cfg: &HarnessConfig, replicate: usize) -> Vec<ReplicateResult> {
    let start = Instant::now();
    let fallible = || -> Result<Vec<ReplicateResult>> {
        let mut scenario = cfg.scenario.clone();
        scenario.seed = derive_seed(cfg.master_seed, replicate as u64);
        let sd = generate(&scenario)?;
        let split_seed = derive_seed(cfg.master_seed, 0x5350_0000 + replicate as u64);
        let split = honest_split(&sd.dataset, cfg.split_ratio, split_seed)?;

        let surface_cfg = cfg
            .surface
            .clone()
            .with_seed(derive_seed(cfg.master_seed, 0x5355_0000 + replicate as u64));
        let propensity_override = match scenario.robustness {
            Robustness::MisspecifiedPropensity => Some(vec![0.5; split.discovery.n()]),
            _ => None,
        };
        let surfaces = fit_surfaces(&split.discovery, &surface_cfg, propensity_override)?;

        let truths = scenario.truth_cells();
        let truth_names: Vec<String> = truths.iter().map(|t| t.name.clone()).collect();
        let mut out = Vec::with_capacity(cfg.variants.len());
        for &variant in &cfg.variants {
            let targets = surfaces.discovery_targets(variant);
            let st = discover(
                split.discovery.x(),
                split.discovery.n(),
                split.discovery.p(),
                targets,
                &cfg.cart,
            )?;
            let annotated = infer_tree(&st, &split.inference, cfg.min_node, cfg.weak_threshold)?;
            let discovered = match_truth(&st, &truths);
            let units: Vec<UnitRecord> = split
                .inference_rows
                .iter()
                .enumerate()
                .map(|(row, &orig)| {
                    let est = annotated
                        .assign_unit(split.inference.row(row))
                        .and_then(|e| {
                            let tau = e.tau_hat?;
                            let (lo, hi) = e.ci95?;
                            Some((tau, lo, hi))
                        });
                    UnitRecord {
                        cell: sd.cell[orig],
                        true_tau: sd.true_tau[orig],
                        estimate: est,
                    }
                })
                .collect();
            out.push(ReplicateResult {
                replicate,
                variant,
                truth_names: truth_names.clone(),
                discovered,
                units,
                runtime_secs: start.elapsed().as_secs_f64(),
                error: None,
            });
        }
        Ok(out)
    };
    match fallible() {
        Ok(v) => v,
        Err(e) => cfg
            .variants
            .iter()
            .map(|&variant| ReplicateResult {
                replicate,
                variant,
                truth_names: Vec::new(),
                discovered: Vec::new(),
                units: Vec::new(),
                runtime_secs: start.elapsed().as_secs_f64(),
                error: Some(e.to_string()),
            })
            .collect(),
    }
}

/// Run all replicates on the rayon pool. Results are ordered by replicate
/// index regardless of completion order.
pub fn run_all(cfg: &HarnessConfig) -> Vec<ReplicateResult> {
    (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, r))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CellMetrics {
    pub bias: f64,
    pub mse: f64,
    pub coverage: f64,
    /// Average number of contributing units per replicate.
    pub units: f64,
}

/// Aggregated metrics for one variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub variant: Variant,
    pub m_requested: usize,
    pub m_successful: usize,
    pub m_failed: usize,
    pub per_cell: BTreeMap<Cell, CellMetrics>,
    /// Pooled over the scenario's heterogeneous truth cells.
    pub pooled: CellMetrics,
    /// Truth-cell name to discovery proportion.
    pub discovery: BTreeMap<String, f64>,
}

/// Average per-replicate metrics over successful replicates of one variant.
/// Per-replicate, per-cell: bias and MSE over units with an estimate;
/// coverage counts unestimated units as not covered (policy-dependent).
pub fn aggregate(
    results: &[ReplicateResult],
    variant: Variant,
    truth_cells: &[Cell],
    policy: DiscardPolicy,
) -> Result<MonteCarloReport> {
    let mine: Vec<&ReplicateResult> = results.iter().filter(|r| r.variant == variant).collect();
    let m_requested = mine.len();
    let ok: Vec<&&ReplicateResult> = mine.iter().filter(|r| r.error.is_none()).collect();
    if ok.is_empty() {
        return Err(Error::Report("no successful replicates to aggregate".into()));
    }

    let cells = [Cell::L1, Cell::L2, Cell::L3, Cell::L4];
    let mut acc: BTreeMap<Cell, (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = cells
        .iter()
        .map(|&c| (c, (vec![], vec![], vec![], vec![])))
        .collect();
    let mut pooled_acc: (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = Default::default();
    let mut discovery_counts: BTreeMap<String, usize> = BTreeMap::new();

    for r in &ok {
        for (name, &hit) in r.truth_names.iter().zip(&r.discovered) {
            *discovery_counts.entry(name.clone()).or_insert(0) += hit as usize;
        }
        let mut per_rep: BTreeMap<Cell, (f64, f64, usize, usize, usize)> = BTreeMap::new();
        // (sum err, sum sq err, n est, n covered, n total)
        for u in &r.units {
            let e = per_rep.entry(u.cell).or_insert((0.0, 0.0, 0, 0, 0));
            match u.estimate {
                Some((tau, lo, hi)) => {
                    e.0 += tau - u.true_tau;
                    e.1 += (tau - u.true_tau) * (tau - u.true_tau);
                    e.2 += 1;
                    e.3 += (lo <= u.true_tau && u.true_tau <= hi) as usize;
                    e.4 += 1;
                }
                None => {
                    // excluded from bias/MSE; coverage treatment is policy
                    if policy == DiscardPolicy::ConservativeCoverage {
                        e.4 += 1;
                    }
                }
            }
        }
        let mut pooled = (0.0, 0.0, 0usize, 0usize, 0usize);
        for (&cell, e) in &per_rep {
            if truth_cells.contains(&cell) {
                pooled.0 += e.0;
                pooled.1 += e.1;
                pooled.2 += e.2;
                pooled.3 += e.3;
                pooled.4 += e.4;
            }
            let slot = acc.get_mut(&cell).unwrap();
            if e.2 > 0 {
                slot.0.push(e.0 / e.2 as f64);
                slot.1.push(e.1 / e.2 as f64);
            }
            if e.4 > 0 {
                slot.2.push(e.3 as f64 / e.4 as f64);
            }
            slot.3.push(e.2 as f64);
        }
        if pooled.2 > 0 {
            pooled_acc.0.push(pooled.0 / pooled.2 as f64);
            pooled_acc.1.push(pooled.1 / pooled.2 as f64);
        }
        if pooled.4 > 0 {
            pooled_acc.2.push(pooled.3 as f64 / pooled.4 as f64);
        }
        pooled_acc.3.push(pooled.2 as f64);
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let to_metrics = |a: &(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)| CellMetrics {
        bias: mean(&a.0),
        mse: mean(&a.1),
        coverage: mean(&a.2),
        units: mean(&a.3),
    };
    let per_cell = acc.iter().map(|(&c, a)| (c, to_metrics(a))).collect();
    let discovery = discovery_counts
        .into_iter()
        .map(|(name, hits)| (name, hits as f64 / ok.len() as f64))
        .collect();
    Ok(MonteCarloReport {
        variant,
        m_requested,
        m_successful: ok.len(),
        m_failed: m_requested - ok.len(),
        per_cell,
        pooled: to_metrics(&pooled_acc),
        discovery,
    })
}

/// Write one CSV row per labelled report: per-cell and pooled metrics plus
/// discovery proportions. Grid drivers label rows by effect size or by the
/// compliance pair.
pub fn emit_table(
    path: impl AsRef<Path>,
    label_name: &str,
    rows: &[(String, &MonteCarloReport)],
) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Report("no reports to tabulate".into()));
    }
    let path = path.as_ref();
    let mut buf = String::new();
    buf.push_str(label_name);
    buf.push_str(",variant");
    for cell in ["l1", "l2", "l3", "l4", "pooled"] {
        buf.push_str(&format!(",{c}_bias,{c}_mse,{c}_coverage", c = cell));
    }
    let mut truth_names: Vec<String> = rows[0].1.discovery.keys().cloned().collect();
    truth_names.sort();
    for t in &truth_names {
        buf.push_str(&format!(",discovery_{}", t));
    }
    buf.push('\n');
    for (label, rep) in rows {
        buf.push_str(&format!(
            "{},{}",
            label,
            match rep.variant {
                Variant::BcfIv => "bcf-iv",
                Variant::BcfItt => "bcf-itt",
            }
        ));
        let cells = [Cell::L1, Cell::L2, Cell::L3, Cell::L4];
        for c in cells {
            let m = rep.per_cell.get(&c).cloned().unwrap_or_default();
            buf.push_str(&format!(",{},{},{}", m.bias, m.mse, m.coverage));
        }
        buf.push_str(&format!(
            ",{},{},{}",
            rep.pooled.bias, rep.pooled.mse, rep.pooled.coverage
        ));
        for t in &truth_names {
            buf.push_str(&format!(
                ",{}",
                rep.discovery.get(t).cloned().unwrap_or(f64::NAN)
            ));
        }
        buf.push('\n');
    }
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(buf.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Serialize replicate results to one CSV (also the ingestion format for
/// externally produced results). Two row kinds share the file: `unit` rows
/// carry per-unit truth and estimates, `discovery` rows carry truth-cell
/// hits.
pub fn results_to_csv(results: &[ReplicateResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf =
        String::from("kind,replicate,variant,cell,true_tau,tau_hat,ci_lo,ci_hi,truth,discovered,error\n");
    for r in results {
        let variant = match r.variant {
            Variant::BcfIv => "bcf-iv",
            Variant::BcfItt => "bcf-itt",
        };
        if let Some(err) = &r.error {
            buf.push_str(&format!(
                "error,{},{},,,,,,,,\"{}\"\n",
                r.replicate,
                variant,
                err.replace('"', "'")
            ));
            continue;
        }
        for (name, &hit) in r.truth_names.iter().zip(&r.discovered) {
            buf.push_str(&format!(
                "discovery,{},{},,,,,,{},{},\n",
                r.replicate, variant, name, hit as u8
            ));
        }
        for u in &r.units {
            match u.estimate {
                Some((tau, lo, hi)) => buf.push_str(&format!(
                    "unit,{},{},{},{},{},{},{},,,\n",
                    r.replicate,
                    variant,
                    u.cell.label(),
                    u.true_tau,
                    tau,
                    lo,
                    hi
                )),
                None => buf.push_str(&format!(
                    "unit,{},{},{},{},,,,,,\n",
                    r.replicate,
                    variant,
                    u.cell.label(),
                    u.true_tau
                )),
            }
        }
    }
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(buf.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read results written by [`results_to_csv`] (or an external tool following
/// the same schema) back into replicate records.
pub fn results_from_csv(path: impl AsRef<Path>) -> Result<Vec<ReplicateResult>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut by_key: BTreeMap<(usize, String), ReplicateResult> = BTreeMap::new();
    let parse_cell = |s: &str| match s {
        "l1" => Ok(Cell::L1),
        "l2" => Ok(Cell::L2),
        "l3" => Ok(Cell::L3),
        "l4" => Ok(Cell::L4),
        other => Err(Error::Schema(format!("unknown cell label '{}'", other))),
    };
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(11, ',').collect();
        if fields.len() < 11 {
            return Err(Error::Parse {
                row: lineno + 1,
                column: "row".into(),
                message: "expected 11 comma-separated fields".into(),
            });
        }
        let replicate: usize = fields[1].parse().map_err(|_| Error::Parse {
            row: lineno + 1,
            column: "replicate".into(),
            message: "expected an integer".into(),
        })?;
        let variant_name = fields[2].to_string();
        let variant = match variant_name.as_str() {
            "bcf-iv" => Variant::BcfIv,
            "bcf-itt" => Variant::BcfItt,
            other => {
                return Err(Error::Schema(format!("unknown variant '{}'", other)));
            }
        };
        let entry = by_key
            .entry((replicate, variant_name))
            .or_insert_with(|| ReplicateResult {
                replicate,
                variant,
                truth_names: Vec::new(),
                discovered: Vec::new(),
                units: Vec::new(),
                runtime_secs: 0.0,
                error: None,
            });
        match fields[0] {
            "unit" => {
                let num = |s: &str, what: &str| -> Result<f64> {
                    s.parse().map_err(|_| Error::Parse {
                        row: lineno + 1,
                        column: what.into(),
                        message: "expected a number".into(),
                    })
                };
                let estimate = if fields[5].is_empty() {
                    None
                } else {
                    Some((
                        num(fields[5], "tau_hat")?,
                        num(fields[6], "ci_lo")?,
                        num(fields[7], "ci_hi")?,
                    ))
                };
                entry.units.push(UnitRecord {
                    cell: parse_cell(fields[3])?,
                    true_tau: num(fields[4], "true_tau")?,
                    estimate,
                });
            }
            "discovery" => {
                entry.truth_names.push(fields[8].to_string());
                entry.discovered.push(fields[9] == "1");
            }
            "error" => {
                entry.error = Some(fields[10].trim_matches('"').to_string());
            }
            other => {
                return Err(Error::Schema(format!("unknown row kind '{}'", other)));
            }
        }
    }
    Ok(by_key.into_values().collect())
}
