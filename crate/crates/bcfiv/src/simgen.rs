//! Synthetic data-generating processes with per-unit ground truth attached.
//!
//! Binary covariates, a binary instrument, one-sided noncompliance (units
//! assigned to control never receive treatment), standard-normal baseline
//! outcomes, and cell-structured complier effects on the four cells spanned
//! by the first two covariates.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::unit_stream;
use crate::subgroups::TruthCell;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

/// The four cells spanned by (x1, x2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cell {
    /// x1 = 0, x2 = 0
    L1,
    /// x1 = 1, x2 = 1
    L2,
    /// x1 = 0, x2 = 1
    L3,
    /// x1 = 1, x2 = 0
    L4,
}

impl Cell {
    pub fn of(x1: f64, x2: f64) -> Cell {
        match (x1 as u8, x2 as u8) {
            (0, 0) => Cell::L1,
            (1, 1) => Cell::L2,
            (0, 1) => Cell::L3,
            _ => Cell::L4,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Cell::L1 => "l1",
            Cell::L2 => "l2",
            Cell::L3 => "l3",
            Cell::L4 => "l4",
        }
    }

    pub fn truth(&self) -> TruthCell {
        let (v1, v2) = match self {
            Cell::L1 => (0, 0),
            Cell::L2 => (1, 1),
            Cell::L3 => (0, 1),
            Cell::L4 => (1, 0),
        };
        TruthCell::new(self.label(), vec![(0, v1), (1, v2)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Heterogeneity {
    /// Effects +k / -k on l1 / l2, zero elsewhere.
    Strong,
    /// Effects +k / -k / +k/2 / -k/2 on l1..l4.
    Slight,
}

/// Compliance rates: one constant, or a per-cell map for l1/l2 with a
/// default for the remaining cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Compliance {
    Constant(f64),
    PerCell { l1: f64, l2: f64, default: f64 },
}

impl Compliance {
    pub fn rate(&self, cell: Cell) -> f64 {
        match *self {
            Compliance::Constant(p) => p,
            Compliance::PerCell { l1, l2, default } => match cell {
                Cell::L1 => l1,
                Cell::L2 => l2,
                _ => default,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IttMode {
    /// Cell effects follow the heterogeneity table directly.
    HeterogeneousEffect,
    /// Cell effect is c / (cell compliance): the ITT is constant across
    /// cells while the complier effect varies.
    ConstantItt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Robustness {
    None,
    /// Instrument assignment depends on (x1, x2) through a logistic link.
    ConfoundedInstrument,
    /// Covariates drawn from a dichotomized equicorrelated Gaussian.
    CorrelatedCovariates,
    /// Generation is the randomized baseline; the analysis is expected to
    /// substitute a constant propensity instead of estimating one.
    MisspecifiedPropensity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimScenario {
    pub n: usize,
    pub p: usize,
    pub k: f64,
    pub heterogeneity: Heterogeneity,
    pub compliance: Compliance,
    pub itt_mode: IttMode,
    /// Constant-ITT level c (effect is c / cell compliance).
    pub constant_itt_c: f64,
    pub robustness: Robustness,
    /// Target pairwise correlation of the binary covariates under
    /// `CorrelatedCovariates`.
    pub correlation: f64,
    /// Logistic coefficient under `ConfoundedInstrument`.
    pub confounding_strength: f64,
    pub seed: u64,
}

impl Default for SimScenario {
    fn default() -> Self {
        SimScenario {
            n: 1000,
            p: 10,
            k: 0.5,
            heterogeneity: Heterogeneity::Strong,
            compliance: Compliance::Constant(0.75),
            itt_mode: IttMode::HeterogeneousEffect,
            constant_itt_c: 0.2,
            robustness: Robustness::None,
            correlation: 0.25,
            confounding_strength: 0.5,
            seed: 0,
        }
    }
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        let rates = match self.compliance {
            Compliance::Constant(p) => vec![p],
            Compliance::PerCell { l1, l2, default } => vec![l1, l2, default],
        };
        if rates.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::Argument("compliance rates must lie in (0, 1]".into()));
        }
        if self.k < 0.0 || self.p < 2 || self.n == 0 {
            return Err(Error::Argument(
                "need k >= 0, p >= 2 and a positive sample size".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.correlation) {
            return Err(Error::Argument("correlation must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// The true complier effect for a cell.
    pub fn cell_tau(&self, cell: Cell) -> f64 {
        match self.itt_mode {
            IttMode::HeterogeneousEffect => match (self.heterogeneity, cell) {
                (_, Cell::L1) => self.k,
                (_, Cell::L2) => -self.k,
                (Heterogeneity::Strong, _) => 0.0,
                (Heterogeneity::Slight, Cell::L3) => 0.5 * self.k,
                (Heterogeneity::Slight, Cell::L4) => -0.5 * self.k,
            },
            IttMode::ConstantItt => self.constant_itt_c / self.compliance.rate(cell),
        }
    }

    /// The cells that carry effects distinguishable from the rest of the
    /// population — the discovery targets for the harness.
    pub fn truth_cells(&self) -> Vec<TruthCell> {
        match self.itt_mode {
            IttMode::HeterogeneousEffect => match self.heterogeneity {
                Heterogeneity::Strong => vec![Cell::L1.truth(), Cell::L2.truth()],
                Heterogeneity::Slight => vec![
                    Cell::L1.truth(),
                    Cell::L2.truth(),
                    Cell::L3.truth(),
                    Cell::L4.truth(),
                ],
            },
            IttMode::ConstantItt => vec![Cell::L1.truth(), Cell::L2.truth()],
        }
    }

    /// Parse a plain-text `key = value` description (one pair per line,
    /// `#` comments allowed). Unknown keys are rejected so typos surface.
    pub fn from_kv(text: &str) -> Result<SimScenario> {
        let mut s = SimScenario::default();
        let mut cell = (None, None, None);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse {
                    row: lineno + 1,
                    column: line.to_string(),
                    message: "expected key = value".into(),
                }
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |msg: &str| Error::Parse {
                row: lineno + 1,
                column: key.to_string(),
                message: msg.to_string(),
            };
            let num = || value.parse::<f64>().map_err(|_| bad("expected a number"));
            match key {
                "n" => s.n = num()? as usize,
                "p" => s.p = num()? as usize,
                "k" => s.k = num()?,
                "seed" => s.seed = num()? as u64,
                "correlation" => s.correlation = num()?,
                "confounding_strength" => s.confounding_strength = num()?,
                "constant_itt_c" => s.constant_itt_c = num()?,
                "compliance" => s.compliance = Compliance::Constant(num()?),
                "compliance_l1" => cell.0 = Some(num()?),
                "compliance_l2" => cell.1 = Some(num()?),
                "compliance_default" => cell.2 = Some(num()?),
                "heterogeneity" => {
                    s.heterogeneity = match value {
                        "strong" => Heterogeneity::Strong,
                        "slight" => Heterogeneity::Slight,
                        _ => return Err(bad("expected strong or slight")),
                    }
                }
                "itt_mode" => {
                    s.itt_mode = match value {
                        "heterogeneous-effect" => IttMode::HeterogeneousEffect,
                        "constant-itt" => IttMode::ConstantItt,
                        _ => return Err(bad("expected heterogeneous-effect or constant-itt")),
                    }
                }
                "robustness" => {
                    s.robustness = match value {
                        "none" => Robustness::None,
                        "confounded-instrument" => Robustness::ConfoundedInstrument,
                        "correlated-covariates" => Robustness::CorrelatedCovariates,
                        "misspecified-propensity" => Robustness::MisspecifiedPropensity,
                        _ => return Err(bad("unknown robustness mode")),
                    }
                }
                _ => return Err(bad("unknown scenario key")),
            }
        }
        if cell.0.is_some() || cell.1.is_some() || cell.2.is_some() {
            s.compliance = Compliance::PerCell {
                l1: cell.0.unwrap_or(0.5),
                l2: cell.1.unwrap_or(0.5),
                default: cell.2.unwrap_or(0.5),
            };
        }
        s.validate()?;
        Ok(s)
    }
}

/// Observed data plus the generating truth, one row per unit.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub true_tau: Vec<f64>,
    pub true_compliance: Vec<f64>,
    pub cell: Vec<Cell>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Latent equicorrelation needed so that dichotomizing standard normals at
/// zero yields binary variables with the requested pairwise correlation
/// (tetrachoric inversion: binary corr = (2/pi) asin(latent corr)).
pub fn latent_correlation(binary_target: f64) -> f64 {
    (binary_target * std::f64::consts::PI / 2.0).sin()
}

/// Generate one dataset. Each unit draws from its own counter-based stream,
/// so growing `n` extends the sample without reshuffling earlier units.
pub fn generate(s: &SimScenario) -> Result<SyntheticDataset> {
    s.validate()?;
    let n = s.n;
    let p = s.p;
    let rho = latent_correlation(s.correlation);

    let mut x = Vec::with_capacity(n * p);
    let mut z = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut true_tau = Vec::with_capacity(n);
    let mut true_compliance = Vec::with_capacity(n);
    let mut cells = Vec::with_capacity(n);
    let mut y0s = Vec::with_capacity(n);
    let mut y1s = Vec::with_capacity(n);

    for i in 0..n {
        let mut rng = unit_stream(s.seed, i as u64);
        let row_start = x.len();
        if s.robustness == Robustness::CorrelatedCovariates {
            let common: f64 = StandardNormal.sample(&mut rng);
            for _ in 0..p {
                let own: f64 = StandardNormal.sample(&mut rng);
                let latent = rho.sqrt() * common + (1.0 - rho).sqrt() * own;
                x.push((latent > 0.0) as u8 as f64);
            }
        } else {
            for _ in 0..p {
                x.push((rng.gen::<f64>() < 0.5) as u8 as f64);
            }
        }
        let row = &x[row_start..row_start + p];
        let cell = Cell::of(row[0], row[1]);

        let p_z = if s.robustness == Robustness::ConfoundedInstrument {
            logistic(
                s.confounding_strength * (2.0 * row[0] - 1.0)
                    + s.confounding_strength * (2.0 * row[1] - 1.0),
            )
        } else {
            0.5
        };
        let zi = (rng.gen::<f64>() < p_z) as u8;

        let rate = s.compliance.rate(cell);
        // W(1); W(0) is identically zero (one-sided noncompliance)
        let w1 = (rng.gen::<f64>() < rate) as u8;
        let wi = if zi == 1 { w1 } else { 0 };

        let tau = s.cell_tau(cell);
        let y0: f64 = StandardNormal.sample(&mut rng);
        let y1 = y0 + w1 as f64 * tau;
        let yi = if zi == 1 { y1 } else { y0 };

        z.push(zi);
        w.push(wi);
        y.push(yi);
        true_tau.push(tau);
        true_compliance.push(rate);
        cells.push(cell);
        y0s.push(y0);
        y1s.push(y1);
    }

    let names = (1..=p).map(|j| format!("x{}", j)).collect();
    let dataset = Dataset::new(y, w, z, x, names, None)?;
    Ok(SyntheticDataset {
        dataset,
        true_tau,
        true_compliance,
        cell: cells,
        y0: y0s,
        y1: y1s,
    })
}

/// The exact effect per cell used during generation.
pub fn oracle_cell_cace(s: &SimScenario) -> BTreeMap<Cell, f64> {
    [Cell::L1, Cell::L2, Cell::L3, Cell::L4]
        .into_iter()
        .map(|c| (c, s.cell_tau(c)))
        .collect()
}

impl SyntheticDataset {
    /// Dump to CSV including the oracle columns.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let d = &self.dataset;
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut buf = String::new();
        for name in &d.covariate_names {
            buf.push_str(name);
            buf.push(',');
        }
        buf.push_str("z,w,y,true_tau,true_compliance,cell,y0,y1\n");
        for i in 0..d.n() {
            for v in d.row(i) {
                buf.push_str(&format!("{},", v));
            }
            buf.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                d.z[i],
                d.w[i],
                d.y[i],
                self.true_tau[i],
                self.true_compliance[i],
                self.cell[i].label(),
                self.y0[i],
                self.y1[i]
            ));
        }
        f.write_all(buf.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strong_effects_follow_cells() {
        let s = SimScenario {
            k: 1.0,
            ..SimScenario::default()
        };
        assert_eq!(s.cell_tau(Cell::L1), 1.0);
        assert_eq!(s.cell_tau(Cell::L2), -1.0);
        assert_eq!(s.cell_tau(Cell::L3), 0.0);
        assert_eq!(s.cell_tau(Cell::L4), 0.0);
    }

    #[test]
    fn slight_effects_follow_cells() {
        let s = SimScenario {
            k: 1.0,
            heterogeneity: Heterogeneity::Slight,
            ..SimScenario::default()
        };
        assert_eq!(s.cell_tau(Cell::L3), 0.5);
        assert_eq!(s.cell_tau(Cell::L4), -0.5);
    }

    #[test]
    fn constant_itt_divides_by_compliance() {
        let s = SimScenario {
            itt_mode: IttMode::ConstantItt,
            constant_itt_c: 0.2,
            compliance: Compliance::PerCell {
                l1: 0.25,
                l2: 0.75,
                default: 0.5,
            },
            ..SimScenario::default()
        };
        let oracle = oracle_cell_cace(&s);
        assert!((oracle[&Cell::L1] - 0.8).abs() < 1e-15);
        assert!((oracle[&Cell::L2] - 0.2 / 0.75).abs() < 1e-15);
        assert!((oracle[&Cell::L3] - 0.4).abs() < 1e-15);
        // ITT is constant: tau * compliance = c in every cell
        for (&c, &tau) in &oracle {
            assert!((tau * s.compliance.rate(c) - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_effect_gives_zero_truth() {
        let s = SimScenario {
            k: 0.0,
            ..SimScenario::default()
        };
        let sd = generate(&s).unwrap();
        assert!(sd.true_tau.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn potential_outcome_bookkeeping_is_exact() {
        let s = SimScenario {
            n: 500,
            k: 1.0,
            seed: 81,
            ..SimScenario::default()
        };
        let sd = generate(&s).unwrap();
        for i in 0..s.n {
            let d = &sd.dataset;
            // observed y equals the assigned-arm potential outcome
            let want = if d.z[i] == 1 { sd.y1[i] } else { sd.y0[i] };
            assert_eq!(d.y[i], want);
            // control-assigned units never receive treatment
            if d.z[i] == 0 {
                assert_eq!(d.w[i], 0);
            }
            // cell labels match (x1, x2)
            assert_eq!(sd.cell[i], Cell::of(d.row(i)[0], d.row(i)[1]));
        }
    }

    #[test]
    fn growing_n_extends_rather_than_reshuffles() {
        let short = generate(&SimScenario {
            n: 50,
            seed: 82,
            ..SimScenario::default()
        })
        .unwrap();
        let long = generate(&SimScenario {
            n: 200,
            seed: 82,
            ..SimScenario::default()
        })
        .unwrap();
        assert_eq!(&short.dataset.y, &long.dataset.y[..50]);
        assert_eq!(&short.dataset.z, &long.dataset.z[..50]);
        assert_eq!(&short.dataset.x()[..50 * 10], &long.dataset.x()[..50 * 10]);
    }

    #[test]
    fn empirical_compliance_tracks_configured_rates() {
        let s = SimScenario {
            n: 8000,
            compliance: Compliance::PerCell {
                l1: 0.25,
                l2: 0.75,
                default: 0.5,
            },
            seed: 83,
            ..SimScenario::default()
        };
        let sd = generate(&s).unwrap();
        for (cell, rate) in [(Cell::L1, 0.25), (Cell::L2, 0.75), (Cell::L3, 0.5)] {
            let mut taken = 0usize;
            let mut assigned = 0usize;
            for i in 0..s.n {
                if sd.cell[i] == cell && sd.dataset.z[i] == 1 {
                    assigned += 1;
                    taken += sd.dataset.w[i] as usize;
                }
            }
            let emp = taken as f64 / assigned as f64;
            let se = (rate * (1.0 - rate) / assigned as f64).sqrt();
            assert!(
                (emp - rate).abs() < 3.0 * se,
                "{:?}: {} vs {}",
                cell,
                emp,
                rate
            );
        }
    }

    #[test]
    fn confounded_instrument_shifts_assignment() {
        let s = SimScenario {
            n: 8000,
            robustness: Robustness::ConfoundedInstrument,
            seed: 84,
            ..SimScenario::default()
        };
        let sd = generate(&s).unwrap();
        let mut hi = (0usize, 0usize);
        let mut lo = (0usize, 0usize);
        for i in 0..s.n {
            let r = sd.dataset.row(i);
            let t = if r[0] == 1.0 && r[1] == 1.0 {
                &mut hi
            } else if r[0] == 0.0 && r[1] == 0.0 {
                &mut lo
            } else {
                continue;
            };
            t.0 += sd.dataset.z[i] as usize;
            t.1 += 1;
        }
        let p_hi = hi.0 as f64 / hi.1 as f64;
        let p_lo = lo.0 as f64 / lo.1 as f64;
        assert!((p_hi - logistic(1.0)).abs() < 0.05, "p_hi {}", p_hi);
        assert!((p_lo - logistic(-1.0)).abs() < 0.05, "p_lo {}", p_lo);
    }

    #[test]
    fn correlated_covariates_hit_target_correlation() {
        let s = SimScenario {
            n: 20000,
            robustness: Robustness::CorrelatedCovariates,
            correlation: 0.25,
            seed: 85,
            ..SimScenario::default()
        };
        let sd = generate(&s).unwrap();
        let d = &sd.dataset;
        let corr = |a: usize, b: usize| -> f64 {
            let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
            for i in 0..s.n {
                sa += d.row(i)[a];
                sb += d.row(i)[b];
                sab += d.row(i)[a] * d.row(i)[b];
            }
            let n = s.n as f64;
            let (ma, mb) = (sa / n, sb / n);
            (sab / n - ma * mb) / ((ma * (1.0 - ma)).sqrt() * (mb * (1.0 - mb)).sqrt())
        };
        for (a, b) in [(0, 1), (2, 7), (4, 9)] {
            let c = corr(a, b);
            assert!((c - 0.25).abs() < 0.05, "corr(x{},x{}) = {}", a + 1, b + 1, c);
        }
    }

    #[test]
    fn kv_round_trip_and_unknown_key() {
        let text = "
            # slight heterogeneity with a compliance gap
            n = 2000
            k = 0.5
            heterogeneity = slight
            compliance_l1 = 0.25
            compliance_l2 = 0.75
            seed = 7
        ";
        let s = SimScenario::from_kv(text).unwrap();
        assert_eq!(s.n, 2000);
        assert_eq!(s.heterogeneity, Heterogeneity::Slight);
        assert_eq!(
            s.compliance,
            Compliance::PerCell {
                l1: 0.25,
                l2: 0.75,
                default: 0.5
            }
        );
        assert!(SimScenario::from_kv("bogus = 1").is_err());
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let s = SimScenario {
            compliance: Compliance::Constant(0.0),
            ..SimScenario::default()
        };
        assert!(generate(&s).is_err());
        let s = SimScenario {
            k: -1.0,
            ..SimScenario::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn csv_dump_includes_oracle_columns() {
        let s = SimScenario {
            n: 20,
            seed: 86,
            ..SimScenario::default()
        };
        let sd = generate(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sim.csv");
        sd.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.ends_with("z,w,y,true_tau,true_compliance,cell,y0,y1"));
        assert_eq!(text.lines().count(), 21);
    }
}
