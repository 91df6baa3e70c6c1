//! Synthetic countries whose regional scale factors follow the mean-one
//! AR(1) law. Used for recovery and calibration checks.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{period_axis, Country, PeriodIndex, TfrSeries, TrajectorySet};
use crate::error::Result;
use crate::rng::keyed_rng;
use crate::stats::sample_variance;

/// Shape of a synthetic panel.
#[derive(Debug, Clone)]
pub struct WorldSpec {
    pub phi: f64,
    pub sigma: f64,
    pub n_countries: usize,
    pub regions_per_country: usize,
    pub n_periods: usize,
    /// National levels are drawn uniformly from this range.
    pub national_range: (f64, f64),
    /// Per-period standard deviation of the national log random walk.
    pub national_log_sd: f64,
}

impl WorldSpec {
    pub fn new(phi: f64, sigma: f64) -> Self {
        WorldSpec {
            phi,
            sigma,
            n_countries: 50,
            regions_per_country: 10,
            n_periods: 60,
            national_range: (1.5, 6.0),
            national_log_sd: 0.02,
        }
    }
}

/// Five-year labels starting at 1950.
pub fn year_axis(n: usize) -> Vec<PeriodIndex> {
    let labels: Vec<String> = (0..n).map(|k| (1950 + 5 * k).to_string()).collect();
    period_axis(0, &labels)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn national_walk(rng: &mut ChaCha8Rng, start: f64, log_sd: f64, n: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(n);
    let mut level = start;
    for _ in 0..n {
        v.push(level);
        level *= (log_sd * normal(rng)).exp();
    }
    v
}

/// Stationary AR(1) scale-factor path started from the stationary law.
fn stationary_alpha(rng: &mut ChaCha8Rng, phi: f64, sigma: f64, n: usize) -> Vec<f64> {
    let sd0 = sigma / (1.0 - phi * phi).sqrt();
    let mut a = 1.0 + sd0 * normal(rng);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(a);
        a = 1.0 + phi * (a - 1.0) + sigma * normal(rng);
    }
    out
}

fn build_country(id: &str, periods: &[PeriodIndex], national: &[f64], alphas: &[Vec<f64>]) -> Result<Country> {
    let nat = TfrSeries::from_values(id, periods.to_vec(), national)?;
    let regions = alphas
        .iter()
        .enumerate()
        .map(|(r, a)| {
            let values: Vec<f64> = a.iter().zip(national).map(|(a, n)| (a * n).max(1e-6)).collect();
            TfrSeries::from_values(format!("{id}-r{r}"), periods.to_vec(), &values)
        })
        .collect::<Result<Vec<_>>>()?;
    Country::new(id, nat, regions)
}

/// Fully observed countries with stationary AR(1) scale factors.
pub fn ar1_world(spec: &WorldSpec, seed: u64) -> Result<Vec<Country>> {
    let periods = year_axis(spec.n_periods);
    (0..spec.n_countries)
        .map(|c| {
            let id = format!("C{c:03}");
            let mut rng = keyed_rng(seed, &id, 0);
            let (lo, hi) = spec.national_range;
            let start = rng.random_range(lo..hi);
            let national = national_walk(&mut rng, start, spec.national_log_sd, spec.n_periods);
            let alphas: Vec<Vec<f64>> = (0..spec.regions_per_country)
                .map(|_| stationary_alpha(&mut rng, spec.phi, spec.sigma, spec.n_periods))
                .collect();
            build_country(&id, &periods, &national, &alphas)
        })
        .collect()
}

/// A world observed past a cut, with national ensembles for the window
/// after it drawn from the same law as the national truth.
#[derive(Debug, Clone)]
pub struct HoldoutWorld {
    pub countries: Vec<Country>,
    pub national_traj: BTreeMap<String, TrajectorySet>,
    pub cut_label: String,
    pub horizon: usize,
}

/// `spec.n_periods` history periods up to and including the cut, then
/// `horizon` more. After the cut each country's scale factors move with
/// the country innovation scale `min(sigma^2, (1 - phi^2) Var(alpha at cut))`,
/// which is the law the projection assumes.
pub fn holdout_world(spec: &WorldSpec, horizon: usize, n_traj: usize, seed: u64) -> Result<HoldoutWorld> {
    let total = spec.n_periods + horizon;
    let periods = year_axis(total);
    let cut = spec.n_periods - 1;
    let mut countries = Vec::with_capacity(spec.n_countries);
    let mut national_traj = BTreeMap::new();
    for c in 0..spec.n_countries {
        let id = format!("C{c:03}");
        let mut rng = keyed_rng(seed, &id, 0);
        let (lo, hi) = spec.national_range;
        let start = rng.random_range(lo..hi);
        let national = national_walk(&mut rng, start, spec.national_log_sd, total);
        let mut alphas: Vec<Vec<f64>> = (0..spec.regions_per_country)
            .map(|_| stationary_alpha(&mut rng, spec.phi, spec.sigma, spec.n_periods))
            .collect();
        let at_cut: Vec<f64> = alphas.iter().map(|a| a[cut]).collect();
        let var = if at_cut.len() > 1 { sample_variance(&at_cut) } else { f64::INFINITY };
        let sigma_c = (spec.sigma * spec.sigma).min((1.0 - spec.phi * spec.phi) * var).sqrt();
        for a in &mut alphas {
            let mut state = a[cut];
            for _ in 0..horizon {
                state = 1.0 + spec.phi * (state - 1.0) + sigma_c * normal(&mut rng);
                a.push(state);
            }
        }
        countries.push(build_country(&id, &periods, &national, &alphas)?);

        let mut traj_rng = keyed_rng(seed, &id, 1);
        let mut paths = Vec::with_capacity(n_traj * horizon);
        for _ in 0..n_traj {
            let w = national_walk(&mut traj_rng, national[cut], spec.national_log_sd, horizon + 1);
            paths.extend_from_slice(&w[1..]);
        }
        let set = TrajectorySet::new(id.clone(), periods[cut + 1..].to_vec(), n_traj, paths, None)?;
        national_traj.insert(id, set);
    }
    Ok(HoldoutWorld {
        countries,
        national_traj,
        cut_label: periods[cut].label.clone(),
        horizon,
    })
}
