//! Generate a synthetic dataset with heterogeneous complier effects and
//! write it to CSV, including the ground-truth columns used for scoring.
//!
//! Run with: cargo run --example generate_data -- [out.csv]

use bcfiv::simgen::{generate, oracle_cell_cace, SimScenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "synthetic.csv".into());

    let scenario = SimScenario {
        n: 2000,
        k: 0.5,
        seed: 7,
        ..SimScenario::default()
    };
    let data = generate(&scenario)?;
    data.write_csv(&path)?;

    println!("wrote {} rows to {}", data.dataset.n(), path);
    println!("true conditional effects by cell (x1, x2):");
    for (cell, tau) in oracle_cell_cace(&scenario) {
        println!("  {:>2}: {:+.3}", cell.label(), tau);
    }
    Ok(())
}
