//! A small Monte Carlo study: repeat the full pipeline over fresh samples
//! and report per-cell bias, MSE, and 95% interval coverage of the
//! per-unit effect estimates.
//!
//! Run with: cargo run --example monte_carlo

use bcfiv::montecarlo::{aggregate, run_all, HarnessConfig};
use bcfiv::simgen::{Cell, SimScenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = SimScenario {
        n: 1000,
        k: 1.0,
        ..SimScenario::default()
    };
    let mut cfg = HarnessConfig::desk_scale(scenario);
    cfg.replicates = 10;

    let results = run_all(&cfg);
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} replicate runs ({} failed)",
        results.len(),
        failed
    );

    for &variant in &cfg.variants {
        let report = aggregate(
            &results,
            variant,
            &[Cell::L1, Cell::L2],
            cfg.discard_policy,
        )?;
        println!("cell   bias      mse    coverage");
        for (cell, m) in &report.per_cell {
            println!(
                "{:>4} {:+.3}   {:.4}    {:.2}",
                cell.label(),
                m.bias,
                m.mse,
                m.coverage
            );
        }
        println!(
            "pooled {:+.3}   {:.4}    {:.2}",
            report.pooled.bias, report.pooled.mse, report.pooled.coverage
        );
        println!(
            "discovery rates: {:?}",
            report.discovery
        );
    }
    Ok(())
}
