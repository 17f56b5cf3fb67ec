//! Model surfaces on the discovery sample: instrument propensity, the
//! intention-to-treat (ITT) effect, compliance, and the per-unit conditional
//! complier average causal effect (CACE).
//!
//! The continuous-outcome ITT surface uses the joint two-forest decomposition
//! (prognostic forest on the covariates plus the estimated propensity,
//! shrunken treatment forest on the covariates entering multiplied by the
//! instrument). Binary outcomes use a single probit fit with the instrument
//! as a feature, evaluated at both instrument values.

use crate::bart::{fit_bart_binary, fit_two_forest, BartConfig};
use crate::dataset::{Dataset, OutcomeKind};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Which fitted quantity feeds subgroup discovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Discover on per-unit CACE estimates.
    BcfIv,
    /// Discover on per-unit ITT estimates.
    BcfItt,
}

/// Discovery variant plus the outcome model family.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitMode {
    pub variant: Variant,
    pub outcome_kind: OutcomeKind,
}

/// Sampler settings for the four surface fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurfaceConfig {
    pub prognostic: BartConfig,
    pub treatment: BartConfig,
    pub propensity: BartConfig,
    pub compliance: BartConfig,
    /// Compliance-denominator floor protecting the discovery target.
    pub cace_floor: f64,
    pub seed: u64,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        let base = BartConfig::default();
        SurfaceConfig {
            prognostic: BartConfig {
                q: 200,
                ..base.clone()
            },
            treatment: BartConfig {
                q: 50,
                eta: 3.0,
                beta: 0.25,
                ..base.clone()
            },
            propensity: BartConfig {
                q: 50,
                ..base.clone()
            },
            compliance: BartConfig { q: 50, ..base },
            cace_floor: 0.05,
            seed: 0,
        }
    }
}

impl SurfaceConfig {
    /// Scale every sampler's chain length; used by the simulation harness to
    /// trade precision for wall time.
    pub fn with_chain(mut self, n_burn: usize, n_draw: usize) -> Self {
        for cfg in [
            &mut self.prognostic,
            &mut self.treatment,
            &mut self.propensity,
            &mut self.compliance,
        ] {
            cfg.n_burn = n_burn;
            cfg.n_draw = n_draw;
        }
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        for (i, cfg) in [
            &mut self.prognostic,
            &mut self.treatment,
            &mut self.propensity,
            &mut self.compliance,
        ]
        .into_iter()
        .enumerate()
        {
            cfg.seed = seed.wrapping_add(i as u64 + 1);
        }
        self
    }
}

/// Fitted per-unit surfaces over the discovery sample.
#[derive(Debug, Clone)]
pub struct Surfaces {
    pub pi_hat: Vec<f64>,
    pub itt_hat: Vec<f64>,
    pub mu_hat: Vec<f64>,
    pub pic_hat: Vec<f64>,
    pub cace_hat: Vec<f64>,
    /// Units where the compliance denominator was floored.
    pub floored: Vec<bool>,
    /// Posterior draws of the per-unit ITT (draw-major).
    pub itt_draws: Vec<Vec<f64>>,
    /// Posterior draws of the per-unit compliance (draw-major).
    pub pic_draws: Vec<Vec<f64>>,
}

impl Surfaces {
    /// The vector CART discovery runs on.
    pub fn discovery_targets(&self, variant: Variant) -> &[f64] {
        match variant {
            Variant::BcfIv => &self.cace_hat,
            Variant::BcfItt => &self.itt_hat,
        }
    }

    /// One row per discovery unit: propensity, ITT, compliance, CACE, flag.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut buf = String::from("pi_hat,itt_hat,pic_hat,cace_hat,floored\n");
        for i in 0..self.pi_hat.len() {
            buf.push_str(&format!(
                "{},{},{},{},{}\n",
                self.pi_hat[i],
                self.itt_hat[i],
                self.pic_hat[i],
                self.cace_hat[i],
                self.floored[i] as u8
            ));
        }
        f.write_all(buf.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn require_both_arms(z: &[u8], what: &str) -> Result<()> {
    let ones = z.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == z.len() {
        return Err(Error::Domain(format!(
            "{} requires both instrument arms to be present",
            what
        )));
    }
    Ok(())
}

/// Probit fit of the instrument on the covariates; posterior mean
/// probabilities clipped to [0.01, 0.99].
pub fn estimate_instrument_propensity(
    x: &[f64],
    n: usize,
    p: usize,
    z: &[u8],
    cfg: &BartConfig,
) -> Result<Vec<f64>> {
    require_both_arms(z, "propensity estimation")?;
    let zf: Vec<f64> = z.iter().map(|&v| v as f64).collect();
    let fit = fit_bart_binary(x, n, p, &zf, cfg)?;
    Ok(fit
        .in_sample_mean
        .iter()
        .map(|v| v.clamp(0.01, 0.99))
        .collect())
}

/// Append one extra feature column to a row-major matrix.
fn with_column(x: &[f64], n: usize, p: usize, col: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (p + 1));
    for i in 0..n {
        out.extend_from_slice(&x[i * p..(i + 1) * p]);
        out.push(col(i));
    }
    out
}

/// ITT surface: (itt_hat, mu_hat, draws). Continuous outcomes use the joint
/// two-forest sampler; binary outcomes difference one probit fit evaluated at
/// both instrument values.
#[allow(clippy::too_many_arguments)]
pub fn fit_itt_surface(
    x: &[f64],
    n: usize,
    p: usize,
    z: &[u8],
    y: &[f64],
    pi_hat: &[f64],
    outcome_kind: OutcomeKind,
    cfg: &SurfaceConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    require_both_arms(z, "the ITT fit")?;
    match outcome_kind {
        OutcomeKind::Continuous => {
            let fit = fit_two_forest(
                x,
                n,
                p,
                z,
                y,
                pi_hat,
                &cfg.prognostic,
                &cfg.treatment,
                cfg.seed,
            )?;
            Ok((fit.itt_hat, fit.mu_hat, fit.itt_draws))
        }
        OutcomeKind::Binary => {
            let xz = with_column(x, n, p, |i| z[i] as f64);
            let fit = fit_bart_binary(&xz, n, p + 1, y, &cfg.prognostic)?;
            let x1 = with_column(x, n, p, |_| 1.0);
            let x0 = with_column(x, n, p, |_| 0.0);
            let d1 = fit.predict_posterior(&x1, n)?;
            let d0 = fit.predict_posterior(&x0, n)?;
            let s = fit.draws.len();
            let draws: Vec<Vec<f64>> = (0..s)
                .map(|si| (0..n).map(|i| d1[i * s + si] - d0[i * s + si]).collect())
                .collect();
            let itt: Vec<f64> = (0..n)
                .map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / s as f64)
                .collect();
            let mu: Vec<f64> = (0..n)
                .map(|i| (0..s).map(|si| d0[i * s + si]).sum::<f64>() / s as f64)
                .collect();
            Ok((itt, mu, draws))
        }
    }
}

/// Compliance surface: probit fit of treatment receipt on [x, z];
/// pic_hat(x) = P(W=1 | z=1, x) - P(W=1 | z=0, x).
pub fn fit_compliance_surface(
    x: &[f64],
    n: usize,
    p: usize,
    z: &[u8],
    w: &[u8],
    cfg: &BartConfig,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    require_both_arms(z, "the compliance fit")?;
    let wf: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let xz = with_column(x, n, p, |i| z[i] as f64);
    let fit = fit_bart_binary(&xz, n, p + 1, &wf, cfg)?;
    let x1 = with_column(x, n, p, |_| 1.0);
    let x0 = with_column(x, n, p, |_| 0.0);
    let d1 = fit.predict_posterior(&x1, n)?;
    let d0 = fit.predict_posterior(&x0, n)?;
    let s = fit.draws.len();
    let draws: Vec<Vec<f64>> = (0..s)
        .map(|si| (0..n).map(|i| d1[i * s + si] - d0[i * s + si]).collect())
        .collect();
    let pic: Vec<f64> = (0..n)
        .map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / s as f64)
        .collect();
    Ok((pic, draws))
}

/// Elementwise CACE = ITT / compliance, flooring the denominator at
/// sign(pic) * floor where compliance is too small; floored units are
/// flagged, never dropped.
pub fn conditional_cace(
    itt_hat: &[f64],
    pic_hat: &[f64],
    floor: f64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if itt_hat.len() != pic_hat.len() {
        return Err(Error::Dimension {
            expected: itt_hat.len(),
            got: pic_hat.len(),
        });
    }
    if floor <= 0.0 {
        return Err(Error::Argument("denominator floor must be positive".into()));
    }
    let mut cace = Vec::with_capacity(itt_hat.len());
    let mut flags = Vec::with_capacity(itt_hat.len());
    for (&itt, &pic) in itt_hat.iter().zip(pic_hat) {
        if pic.abs() >= floor {
            cace.push(itt / pic);
            flags.push(false);
        } else {
            let denom = if pic < 0.0 { -floor } else { floor };
            cace.push(itt / denom);
            flags.push(true);
        }
    }
    Ok((cace, flags))
}

/// Fit all surfaces for one discovery sample. `propensity_override` replaces
/// the estimated instrument propensity (e.g. a constant vector for
/// misspecification checks).
pub fn fit_surfaces(
    d: &Dataset,
    cfg: &SurfaceConfig,
    propensity_override: Option<Vec<f64>>,
) -> Result<Surfaces> {
    let (x, n, p) = (d.x(), d.n(), d.p());
    let pi_hat = match propensity_override {
        Some(v) => {
            if v.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: v.len(),
                });
            }
            v
        }
        None => estimate_instrument_propensity(x, n, p, &d.z, &cfg.propensity)?,
    };
    let (itt_hat, mu_hat, itt_draws) =
        fit_itt_surface(x, n, p, &d.z, &d.y, &pi_hat, d.outcome_kind, cfg)?;
    let (pic_hat, pic_draws) = fit_compliance_surface(x, n, p, &d.z, &d.w, &cfg.compliance)?;
    let (cace_hat, floored) = conditional_cace(&itt_hat, &pic_hat, cfg.cace_floor)?;
    Ok(Surfaces {
        pi_hat,
        itt_hat,
        mu_hat,
        pic_hat,
        cace_hat,
        floored,
        itt_draws,
        pic_draws,
    })
}
