//! Fit the Bayesian tree ensemble to a nonlinear regression surface and
//! report in-sample fit plus the posterior for the noise level.
//!
//! Run with: cargo run --example bart_regression

use bcfiv::bart::{fit_bart, BartConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n = 500;
    let p = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut x = vec![0.0; n * p];
    let mut y = vec![0.0; n];
    for i in 0..n {
        for j in 0..p {
            x[i * p + j] = rng.gen::<f64>();
        }
        let (a, b) = (x[i * p], x[i * p + 1]);
        let noise: f64 = rng.gen::<f64>() - 0.5;
        // step function in two coordinates, third is irrelevant
        y[i] = if a < 0.5 { 1.0 } else { 3.0 } + if b < 0.5 { 0.0 } else { 2.0 } + noise;
    }

    let cfg = BartConfig {
        q: 50,
        n_burn: 200,
        n_draw: 300,
        seed: 42,
        ..BartConfig::default()
    };
    let fit = fit_bart(&x, n, p, &y, &cfg)?;

    let pred = fit.predict_mean(&x, n)?;
    let rmse = (y
        .iter()
        .zip(&pred)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    let sigmas = fit.sigma_draws();
    let sigma_mean = sigmas.iter().sum::<f64>() / sigmas.len() as f64;

    println!("in-sample RMSE: {:.3} (noise sd is ~0.289)", rmse);
    println!("posterior mean of sigma: {:.3}", sigma_mean);
    println!("tree-move acceptance rate: {:.2}", fit.acceptance_rate);
    Ok(())
}
