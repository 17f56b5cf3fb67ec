//! The full honest pipeline on synthetic data: split the sample, fit the
//! outcome/compliance surfaces on the discovery half, grow the subgroup
//! tree, then estimate complier effects on the held-out inference half.
//!
//! Run with: cargo run --example fit_pipeline

use bcfiv::dataset::honest_split;
use bcfiv::estimators::infer_tree;
use bcfiv::simgen::{generate, SimScenario};
use bcfiv::subgroups::discover;
use bcfiv::surfaces::{fit_surfaces, SurfaceConfig, Variant};
use bcfiv::tree::CartConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = SimScenario {
        n: 2000,
        k: 1.0,
        seed: 3,
        ..SimScenario::default()
    };
    let data = generate(&scenario)?.dataset;
    let split = honest_split(&data, 0.5, 99)?;

    let mut cfg = SurfaceConfig::default().with_chain(150, 200).with_seed(5);
    cfg.prognostic.q = 60;
    cfg.treatment.q = 25;
    cfg.propensity.q = 30;
    cfg.compliance.q = 30;
    let surfaces = fit_surfaces(&split.discovery, &cfg, None)?;

    let st = discover(
        split.discovery.x(),
        split.discovery.n(),
        split.discovery.p(),
        surfaces.discovery_targets(Variant::BcfIv),
        &CartConfig::default(),
    )?;
    let annotated = infer_tree(&st, &split.inference, 50, 10.0)?;

    println!("discovered subgroups with held-out complier effects:");
    print!("{}", annotated.render_text(&data.covariate_names));
    Ok(())
}
