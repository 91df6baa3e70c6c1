//! Regional trajectory ensembles derived from a national ensemble.
//!
//! * Scale: every national path multiplied by the region's last observed
//!   ratio to the national TFR.
//! * Scale-AR(1): the ratio follows a mean-one AR(1) process along each
//!   trajectory, with a country-specific innovation scale.
//! * Persistence: the last observed regional value held flat.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Country, PeriodIndex, ScaleAr1Params, SeedRecord, TrajectorySet};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::stats::quantile_sorted;

/// Lower bound on projected regional TFR.
pub const DEFAULT_LOWER_BOUND: f64 = 0.5;
/// Innovation redraws tried before a value is clamped to the lower bound.
pub const MAX_RESAMPLES: usize = 100;
const CLAMP_OFFSET: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Scale,
    ScaleAr1,
    Persistence,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Scale => "scale",
            Method::ScaleAr1 => "scale-ar1",
            Method::Persistence => "persistence",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "scale" => Ok(Method::Scale),
            "scale-ar1" => Ok(Method::ScaleAr1),
            "persistence" => Ok(Method::Persistence),
            other => Err(Error::Usage(format!(
                "unknown method {other:?} (expected scale, scale-ar1 or persistence)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionConfig {
    pub method: Method,
    /// Required for Scale-AR(1); ignored otherwise.
    pub params: Option<ScaleAr1Params>,
    pub lower_bound: f64,
    pub seed: u64,
    /// Must match the national ensemble size when given.
    pub n_traj: Option<usize>,
}

impl ProjectionConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        ProjectionConfig {
            method,
            params: None,
            lower_bound: DEFAULT_LOWER_BOUND,
            seed,
            n_traj: None,
        }
    }

    pub fn with_params(mut self, params: ScaleAr1Params) -> Self {
        self.params = Some(params);
        self
    }
}

/// Regional ensembles keyed by region id.
pub type RegionalEnsembles = BTreeMap<String, TrajectorySet>;

/// Scale factor at the present period; region and national must both be
/// observed there.
fn scale_factor_at_present(country: &Country, region_id: &str) -> Result<f64> {
    let p = country.present();
    let national = country.national().get(p).filter(|v| *v > 0.0).ok_or_else(|| {
        Error::Data(format!("{}: national TFR missing at present period", country.country_id()))
    })?;
    let region = country.region(region_id).and_then(|r| r.get(p)).ok_or_else(|| {
        Error::Data(format!(
            "{region_id}: not observed at present period {}",
            country.periods()[p].label
        ))
    })?;
    Ok(region / national)
}

fn scaled(national: &TrajectorySet, region_id: &str, factor: f64) -> Result<TrajectorySet> {
    let paths = national.paths().iter().map(|v| factor * v).collect();
    TrajectorySet::new(region_id, national.horizon().to_vec(), national.n_traj(), paths, None)
}

pub fn project_scale(country: &Country, national: &TrajectorySet) -> Result<RegionalEnsembles> {
    country
        .regions()
        .iter()
        .map(|r| {
            let id = r.geography_id();
            let alpha = scale_factor_at_present(country, id)?;
            Ok((id.to_string(), scaled(national, id, alpha)?))
        })
        .collect()
}

/// Scale-factor and TFR paths of one region (trajectory × horizon).
#[derive(Debug, Clone)]
pub struct ScaleFactorPaths {
    pub alpha: Vec<f64>,
    pub tfr: Vec<f64>,
    /// Cells that hit the resample limit and were clamped.
    pub n_clamped: usize,
}

/// Runs the scale-factor recursion for one region over every national
/// trajectory. Trajectory `i` draws from stream `i` of the region's key.
pub fn simulate_scale_factors(
    region_id: &str,
    alpha_init: f64,
    phi: f64,
    sigma_c: f64,
    national: &TrajectorySet,
    lower_bound: f64,
    seed: u64,
) -> ScaleFactorPaths {
    let (n, h) = (national.n_traj(), national.n_periods());
    let mut alpha = vec![0.0; n * h];
    let mut tfr = vec![0.0; n * h];
    let mut n_clamped = 0;
    for i in 0..n {
        let mut rng = keyed_rng(seed, region_id, i as u64);
        let mut state = alpha_init;
        for t in 0..h {
            let f_nat = national.value(i, t);
            let mut accepted = None;
            let mut candidate = state;
            for _ in 0..MAX_RESAMPLES {
                let eps: f64 = rng.sample(StandardNormal);
                candidate = 1.0 + phi * (state - 1.0) + sigma_c * eps;
                let f = candidate * f_nat;
                if f > lower_bound {
                    accepted = Some(f);
                    break;
                }
            }
            state = candidate;
            let f = accepted.unwrap_or_else(|| {
                n_clamped += 1;
                lower_bound + CLAMP_OFFSET
            });
            alpha[i * h + t] = state;
            tfr[i * h + t] = f;
        }
    }
    ScaleFactorPaths {
        alpha,
        tfr,
        n_clamped,
    }
}

pub fn project_scale_ar1(
    country: &Country,
    national: &TrajectorySet,
    config: &ProjectionConfig,
) -> Result<RegionalEnsembles> {
    let params = config.params.as_ref().ok_or_else(|| {
        Error::Usage("Scale-AR(1) projection requires parameters".into())
    })?;
    if !(config.lower_bound > 0.0) {
        return Err(Error::Usage(format!("lower bound {} must be positive", config.lower_bound)));
    }
    let sigma_c = *params.sigma_c.get(country.country_id()).ok_or_else(|| {
        Error::Data(format!("no sigma_c for country {}", country.country_id()))
    })?;
    let inputs = country
        .regions()
        .iter()
        .map(|r| {
            let id = r.geography_id();
            params
                .alpha_init
                .get(id)
                .map(|a| (id.to_string(), *a))
                .ok_or_else(|| Error::Data(format!("no initial scale factor for region {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    inputs
        .into_par_iter()
        .map(|(id, a0)| {
            let sim = simulate_scale_factors(
                &id,
                a0,
                params.phi,
                sigma_c,
                national,
                config.lower_bound,
                config.seed,
            );
            let set = TrajectorySet::new(
                id.clone(),
                national.horizon().to_vec(),
                national.n_traj(),
                sim.tfr,
                None,
            )?;
            Ok((id, set))
        })
        .collect()
}

/// Flat projection at each region's value in the present period, replicated
/// `n_traj` times.
pub fn project_persistence(
    country: &Country,
    horizon: &[PeriodIndex],
    n_traj: usize,
) -> Result<RegionalEnsembles> {
    let p = country.present();
    country
        .regions()
        .iter()
        .map(|r| {
            let id = r.geography_id();
            let last = r.get(p).ok_or_else(|| {
                Error::Data(format!(
                    "{id}: not observed at present period {}",
                    country.periods()[p].label
                ))
            })?;
            let set = TrajectorySet::new(
                id,
                horizon.to_vec(),
                n_traj,
                vec![last; n_traj * horizon.len()],
                None,
            )?;
            Ok((id.to_string(), set))
        })
        .collect()
}

/// Projects every region of `country` with the configured method and stamps
/// the seed record on each output.
pub fn project(
    country: &Country,
    national: &TrajectorySet,
    config: &ProjectionConfig,
) -> Result<RegionalEnsembles> {
    if let Some(n) = config.n_traj {
        if n != national.n_traj() {
            return Err(Error::Data(format!(
                "{}: requested {n} trajectories but national ensemble has {}",
                country.country_id(),
                national.n_traj()
            )));
        }
    }
    let out = match config.method {
        Method::Scale => project_scale(country, national)?,
        Method::ScaleAr1 => project_scale_ar1(country, national, config)?,
        Method::Persistence => project_persistence(country, national.horizon(), national.n_traj())?,
    };
    let record = SeedRecord {
        seed: config.seed,
        method: config.method.name().to_string(),
    };
    Ok(out
        .into_iter()
        .map(|(k, v)| (k, v.with_seed_record(record.clone())))
        .collect())
}

/// Per-period summary quantiles of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub geography_id: String,
    pub period_label: String,
    pub median: f64,
    pub q10: f64,
    pub q90: f64,
    pub q025: f64,
    pub q975: f64,
}

pub fn quantile_summary(set: &TrajectorySet) -> Vec<QuantileRow> {
    set.horizon()
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let mut col = set.column(t);
            col.sort_by(f64::total_cmp);
            QuantileRow {
                geography_id: set.geography_id().to_string(),
                period_label: p.label.clone(),
                median: quantile_sorted(&col, 0.5),
                q10: quantile_sorted(&col, 0.10),
                q90: quantile_sorted(&col, 0.90),
                q025: quantile_sorted(&col, 0.025),
                q975: quantile_sorted(&col, 0.975),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{period_axis, TfrSeries};

    fn two_region_country(a: f64, b: f64) -> Country {
        let axis = period_axis(0, &["p0", "p1"]);
        Country::new(
            "C",
            TfrSeries::from_values("C", axis.clone(), &[2.5, 2.0]).unwrap(),
            vec![
                TfrSeries::from_values("A", axis.clone(), &[2.5 * a, 2.0 * a]).unwrap(),
                TfrSeries::from_values("B", axis, &[2.5 * b, 2.0 * b]).unwrap(),
            ],
        )
        .unwrap()
    }

    fn national(rows: &[Vec<f64>]) -> TrajectorySet {
        let labels: Vec<String> = (0..rows[0].len()).map(|k| format!("f{k}")).collect();
        TrajectorySet::from_rows("C", period_axis(2, &labels), rows).unwrap()
    }

    fn params(phi: f64, sigma_c: f64, alphas: &[(&str, f64)]) -> ScaleAr1Params {
        ScaleAr1Params {
            phi,
            sigma: 0.0452,
            sigma_c: [("C".to_string(), sigma_c)].into(),
            alpha_init: alphas.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            provenance: None,
        }
    }

    #[test]
    fn scale_multiplies_paths() {
        let c = two_region_country(1.5, 1.0);
        let out = project_scale(&c, &national(&[vec![2.0, 1.8]])).unwrap();
        let a = out["A"].path(0);
        assert!((a[0] - 3.0).abs() < 1e-12 && (a[1] - 2.7).abs() < 1e-12);
        assert_eq!(out["B"].paths(), &[2.0, 1.8]);
    }

    #[test]
    fn scale_preserves_order() {
        let c = two_region_country(1.1, 0.9);
        let nat = national(&[vec![2.0, 1.7, 1.9], vec![3.0, 1.2, 2.2]]);
        let out = project_scale(&c, &nat).unwrap();
        for i in 0..2 {
            for t in 0..3 {
                assert!(out["A"].value(i, t) > out["B"].value(i, t));
            }
        }
    }

    #[test]
    fn deterministic_decay_without_noise() {
        let c = two_region_country(1.2, 1.0);
        let nat = national(&[vec![2.0; 5]]);
        let config = ProjectionConfig::new(Method::ScaleAr1, 1).with_params(params(0.925, 0.0, &[("A", 1.2), ("B", 1.0)]));
        let out = project_scale_ar1(&c, &nat, &config).unwrap();
        // 1 + 0.2 * 0.925^k, iterated by hand: 1.185, 1.171125, 1.158290625
        let expected = [1.185, 1.171125, 1.158290625];
        for (k, e) in expected.iter().enumerate() {
            assert!((out["A"].value(0, k) / 2.0 - e).abs() < 1e-12);
        }
        assert_eq!(out["B"].paths(), nat.paths());
    }

    #[test]
    fn missing_alpha_init_is_error() {
        let c = two_region_country(1.2, 1.0);
        let config = ProjectionConfig::new(Method::ScaleAr1, 1).with_params(params(0.9, 0.01, &[("A", 1.2)]));
        let err = project_scale_ar1(&c, &national(&[vec![2.0]]), &config).unwrap_err();
        assert!(err.to_string().contains("region B"), "{err}");
    }

    #[test]
    fn lower_bound_enforced() {
        let c = two_region_country(0.5, 1.0);
        let nat = national(&vec![vec![0.9; 30]; 50]);
        let config = ProjectionConfig::new(Method::ScaleAr1, 3).with_params(params(0.9, 0.3, &[("A", 0.5), ("B", 1.0)]));
        let out = project_scale_ar1(&c, &nat, &config).unwrap();
        for set in out.values() {
            assert!(set.paths().iter().all(|v| *v > DEFAULT_LOWER_BOUND));
        }
        // a national path below the bound cannot be rescued by resampling
        let low = national(&[vec![0.01; 3]]);
        let sim = simulate_scale_factors("A", 1.0, 0.9, 0.01, &low, 0.5, 1);
        assert_eq!(sim.n_clamped, 3);
        assert!(sim.tfr.iter().all(|v| *v == 0.5 + CLAMP_OFFSET));
    }

    #[test]
    fn reproducible_and_keyed_by_region() {
        let c = two_region_country(1.1, 0.9);
        let nat = national(&vec![vec![2.0; 4]; 20]);
        let p = params(0.9, 0.05, &[("A", 1.1), ("B", 0.9)]);
        let config = ProjectionConfig::new(Method::ScaleAr1, 42).with_params(p.clone());
        let a = project(&c, &nat, &config).unwrap();
        let b = project(&c, &nat, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a["A"].seed_record().unwrap().seed, 42);

        let other = ProjectionConfig::new(Method::ScaleAr1, 43).with_params(p);
        assert_ne!(project(&c, &nat, &other).unwrap()["A"], a["A"]);
    }

    #[test]
    fn persistence_is_flat() {
        let axis = period_axis(0, &["p0", "p1"]);
        let c = Country::new(
            "C",
            TfrSeries::from_values("C", axis.clone(), &[2.5, 2.0]).unwrap(),
            vec![TfrSeries::from_values("A", axis, &[2.2, 1.9]).unwrap()],
        )
        .unwrap();
        let h = period_axis(2, &["f0", "f1", "f2", "f3"]);
        let out = project_persistence(&c, &h, 3).unwrap();
        assert_eq!(out["A"].paths(), &[1.9; 12]);
    }

    #[test]
    fn persistence_requires_present_value() {
        let axis = period_axis(0, &["p0", "p1"]);
        let c = Country::new(
            "C",
            TfrSeries::from_values("C", axis.clone(), &[2.5, 2.0]).unwrap(),
            vec![TfrSeries::new("A", axis, vec![Some(2.2), None]).unwrap()],
        )
        .unwrap();
        assert!(project_persistence(&c, &period_axis(2, &["f"]), 1).is_err());
        assert!(project_scale(&c, &national(&[vec![2.0]])).is_err());
    }

    #[test]
    fn n_traj_mismatch_rejected() {
        let c = two_region_country(1.0, 1.0);
        let mut config = ProjectionConfig::new(Method::Scale, 0);
        config.n_traj = Some(5);
        assert!(project(&c, &national(&[vec![2.0]]), &config).is_err());
    }

    #[test]
    fn quantile_rows_are_ordered() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![1.0 + i as f64 * 0.01, 2.0 - i as f64 * 0.005]).collect();
        let set = national(&rows);
        for q in quantile_summary(&set) {
            assert!(q.q025 <= q.q10 && q.q10 <= q.median && q.median <= q.q90 && q.q90 <= q.q975);
        }
    }
}
