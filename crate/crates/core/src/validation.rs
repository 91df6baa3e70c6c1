//! Out-of-sample scoring of projection methods.
//!
//! Point forecasts are ensemble medians. CRPS is reported in the
//! "larger is better" orientation `0.5 E|X' - X''| - E|X - x|`, estimated by
//! resampling the ensemble. Interval coverage uses the (10, 90) and
//! (2.5, 97.5) empirical percentiles with inclusive endpoints.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::calibrate;
use crate::data::{Country, MomentSummary, TrajectorySet};
use crate::error::{Error, Result};
use crate::loess::DEFAULT_SPAN;
use crate::projection::{project, Method, ProjectionConfig, RegionalEnsembles, DEFAULT_LOWER_BOUND};
use crate::rng::keyed_rng;
use crate::stats::{mean, quantile_sorted, sorted};

pub const DEFAULT_N_MC: usize = 5000;

/// Mean absolute error and bias (truth minus forecast) over cells with an
/// observed truth.
pub fn mae_bias(point_forecasts: &[f64], truth: &[Option<f64>]) -> Result<(f64, f64)> {
    if point_forecasts.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} forecasts for {} truth cells",
            point_forecasts.len(),
            truth.len()
        )));
    }
    let (mut abs, mut signed, mut n) = (0.0, 0.0, 0usize);
    for (f, t) in point_forecasts.iter().zip(truth) {
        if let Some(t) = t {
            abs += (t - f).abs();
            signed += t - f;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("no observed truth to score against".into()));
    }
    Ok((abs / n as f64, signed / n as f64))
}

/// Monte Carlo CRPS drawing `n_mc` members with replacement for each of
/// X', X'' and X. A constant ensemble returns `-|c - truth|` exactly.
pub fn crps_with_rng<R: Rng + ?Sized>(ensemble: &[f64], truth: f64, n_mc: usize, rng: &mut R) -> f64 {
    assert!(!ensemble.is_empty(), "CRPS of an empty ensemble");
    let first = ensemble[0];
    if ensemble.iter().all(|v| *v == first) {
        return -(first - truth).abs();
    }
    let n = ensemble.len();
    let (mut spread, mut miss) = (0.0, 0.0);
    for _ in 0..n_mc {
        let a = ensemble[rng.random_range(0..n)];
        let b = ensemble[rng.random_range(0..n)];
        spread += (a - b).abs();
    }
    for _ in 0..n_mc {
        miss += (ensemble[rng.random_range(0..n)] - truth).abs();
    }
    0.5 * spread / n_mc as f64 - miss / n_mc as f64
}

pub fn crps(ensemble: &[f64], truth: f64, n_mc: usize, seed: u64) -> f64 {
    crps_with_rng(ensemble, truth, n_mc, &mut keyed_rng(seed, "crps", 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntervalLevel {
    P80,
    P95,
}

impl IntervalLevel {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            IntervalLevel::P80 => (0.10, 0.90),
            IntervalLevel::P95 => (0.025, 0.975),
        }
    }

    fn min_members(self) -> usize {
        match self {
            IntervalLevel::P80 => 10,
            IntervalLevel::P95 => 40,
        }
    }
}

/// Prediction interval of a sorted ensemble.
pub fn interval_sorted(sorted: &[f64], level: IntervalLevel) -> (f64, f64) {
    let (lo, hi) = level.bounds();
    (quantile_sorted(sorted, lo), quantile_sorted(sorted, hi))
}

/// Whether `truth` falls inside the inclusive interval. Non-degenerate
/// ensembles need enough members to resolve the interval's tail quantiles.
pub fn coverage(ensemble: &[f64], truth: f64, level: IntervalLevel) -> Result<bool> {
    let s = sorted(ensemble);
    if s.is_empty() {
        return Err(Error::Data("coverage of an empty ensemble".into()));
    }
    if s[0] != s[s.len() - 1] && s.len() < level.min_members() {
        return Err(Error::Data(format!(
            "{} members are too few for the {level:?} interval (need {})",
            s.len(),
            level.min_members()
        )));
    }
    let (lo, hi) = interval_sorted(&s, level);
    Ok(lo <= truth && truth <= hi)
}

/// Trajectory-wise unweighted mean over regions. Trajectory `i` of every
/// region must descend from the same national trajectory.
pub fn country_average_ensemble(regional: &RegionalEnsembles, geography_id: &str) -> Result<TrajectorySet> {
    let mut sets = regional.values();
    let first = sets
        .next()
        .ok_or_else(|| Error::Data("no regional ensembles to average".into()))?;
    for s in regional.values() {
        if s.horizon() != first.horizon() || s.n_traj() != first.n_traj() {
            return Err(Error::Data(format!(
                "ensemble {} is not aligned with {}",
                s.geography_id(),
                first.geography_id()
            )));
        }
    }
    let k = regional.len() as f64;
    let mut paths = vec![0.0; first.paths().len()];
    for s in regional.values() {
        for (acc, v) in paths.iter_mut().zip(s.paths()) {
            *acc += v;
        }
    }
    paths.iter_mut().for_each(|v| *v /= k);
    TrajectorySet::new(geography_id, first.horizon().to_vec(), first.n_traj(), paths, None)
}

/// Holdout window: periods after `cut_label` are hidden from calibration
/// and scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutSpec {
    pub cut_label: String,
    pub horizon: usize,
}

#[derive(Debug, Clone)]
pub struct HoldoutConfig {
    pub seed: u64,
    pub n_mc: usize,
    pub span: f64,
    pub lower_bound: f64,
}

impl HoldoutConfig {
    pub fn new(seed: u64) -> Self {
        HoldoutConfig {
            seed,
            n_mc: DEFAULT_N_MC,
            span: DEFAULT_SPAN,
            lower_bound: DEFAULT_LOWER_BOUND,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub mae: f64,
    pub bias: f64,
    pub crps: f64,
    /// Percent of truths inside the 80% interval.
    pub cov80: f64,
    pub cov95: f64,
    pub n_values: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    #[serde(flatten)]
    pub metrics: MetricBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedParameters {
    pub phi: f64,
    pub sigma: f64,
    pub moments: Option<MomentSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub holdout: HoldoutSpec,
    pub seed: u64,
    pub n_mc: usize,
    /// Present when Scale-AR(1) was among the methods.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_ar1_parameters: Option<CalibratedParameters>,
    pub marginal_tfr: Vec<MethodRow>,
    pub average_tfr: Vec<MethodRow>,
    /// Regions left out because they were not observed at the cut.
    pub skipped_regions: Vec<String>,
}

impl ValidationReport {
    pub fn marginal(&self, method: Method) -> Option<&MetricBlock> {
        self.marginal_tfr.iter().find(|r| r.method == method).map(|r| &r.metrics)
    }

    pub fn average(&self, method: Method) -> Option<&MetricBlock> {
        self.average_tfr.iter().find(|r| r.method == method).map(|r| &r.metrics)
    }
}

/// Score of one (geography, period) cell.
#[derive(Debug, Clone, Copy)]
struct CellScore {
    forecast: f64,
    truth: f64,
    crps: f64,
    in80: bool,
    in95: bool,
}

fn score_cell(column: &[f64], truth: f64, n_mc: usize, seed: u64, key: &str) -> CellScore {
    let s = sorted(column);
    let (lo80, hi80) = interval_sorted(&s, IntervalLevel::P80);
    let (lo95, hi95) = interval_sorted(&s, IntervalLevel::P95);
    let mut rng = keyed_rng(seed, key, 0);
    CellScore {
        forecast: quantile_sorted(&s, 0.5),
        truth,
        crps: crps_with_rng(&s, truth, n_mc, &mut rng),
        in80: lo80 <= truth && truth <= hi80,
        in95: lo95 <= truth && truth <= hi95,
    }
}

fn summarize(cells: &[CellScore]) -> Result<MetricBlock> {
    let forecasts: Vec<f64> = cells.iter().map(|c| c.forecast).collect();
    let truth: Vec<Option<f64>> = cells.iter().map(|c| Some(c.truth)).collect();
    let (mae, bias) = mae_bias(&forecasts, &truth)?;
    let pct = |f: fn(&CellScore) -> bool| 100.0 * cells.iter().filter(|c| f(c)).count() as f64 / cells.len() as f64;
    Ok(MetricBlock {
        mae,
        bias,
        crps: mean(&cells.iter().map(|c| c.crps).collect::<Vec<_>>()),
        cov80: pct(|c| c.in80),
        cov95: pct(|c| c.in95),
        n_values: cells.len(),
    })
}

struct CountryWindow {
    /// Truncated country restricted to regions observed at the cut.
    fit: Country,
    /// Full data of those regions, for truth.
    full: Country,
    held_out: Vec<String>,
    cut: usize,
    national: TrajectorySet,
}

/// Removes the holdout window, recalibrates Scale-AR(1) on what remains,
/// projects each method over the window and scores against the hidden data.
pub fn run_holdout(
    countries: &[Country],
    national_traj: &BTreeMap<String, TrajectorySet>,
    spec: &HoldoutSpec,
    methods: &[Method],
    config: &HoldoutConfig,
) -> Result<ValidationReport> {
    if spec.horizon == 0 {
        return Err(Error::Usage("holdout horizon must be at least 1".into()));
    }
    if methods.is_empty() {
        return Err(Error::Usage("no methods to validate".into()));
    }
    let mut windows = Vec::new();
    let mut skipped = Vec::new();
    for c in countries {
        let cut = c.national().position_of(&spec.cut_label).ok_or_else(|| {
            Error::Data(format!("{}: no period {:?}", c.country_id(), spec.cut_label))
        })?;
        if cut + spec.horizon >= c.periods().len() {
            return Err(Error::Data(format!(
                "{}: observed axis ends before the holdout window ({} periods after {})",
                c.country_id(),
                spec.horizon,
                spec.cut_label
            )));
        }
        let truncated = c.truncated(cut)?;
        let present = truncated.present();
        let keep: Vec<_> = c
            .regions()
            .iter()
            .filter(|r| {
                let ok = r.get(present).is_some();
                if !ok {
                    skipped.push(r.geography_id().to_string());
                }
                ok
            })
            .cloned()
            .collect();
        if keep.is_empty() {
            continue;
        }
        let full = Country::new(c.country_id(), c.national().clone(), keep)?;
        let held_out: Vec<String> = c.periods()[cut + 1..=cut + spec.horizon]
            .iter()
            .map(|p| p.label.clone())
            .collect();
        let labels: Vec<&str> = held_out.iter().map(String::as_str).collect();
        let national = national_traj
            .get(c.country_id())
            .ok_or_else(|| Error::Data(format!("{}: no national trajectories", c.country_id())))?
            .select_periods(&labels)?;
        windows.push(CountryWindow {
            fit: full.truncated(cut)?,
            full,
            held_out,
            cut,
            national,
        });
    }
    if windows.is_empty() {
        return Err(Error::Data("no region is observed at the cut period".into()));
    }

    let params = if methods.contains(&Method::ScaleAr1) {
        let fit_set: Vec<Country> = windows.iter().map(|w| w.fit.clone()).collect();
        Some(calibrate(&fit_set, config.span).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("insufficient pre-cut data for calibration: {m}")),
            other => other,
        })?)
    } else {
        None
    };

    let mut marginal_rows = Vec::new();
    let mut average_rows = Vec::new();
    for &method in methods {
        let mut proj = ProjectionConfig::new(method, config.seed);
        proj.lower_bound = config.lower_bound;
        if method == Method::ScaleAr1 {
            proj.params = params.clone();
        }
        // (key, ensemble column, truth) for every scored cell
        let mut marginal_jobs: Vec<(String, Vec<f64>, f64)> = Vec::new();
        let mut average_jobs: Vec<(String, Vec<f64>, f64)> = Vec::new();
        for w in &windows {
            let ensembles = project(&w.fit, &w.national, &proj)?;
            for region in w.full.regions() {
                let set = &ensembles[region.geography_id()];
                for k in 0..w.held_out.len() {
                    if let Some(truth) = region.get(w.cut + 1 + k) {
                        let key = format!("{method}/{}/{}", region.geography_id(), w.held_out[k]);
                        marginal_jobs.push((key, set.column(k), truth));
                    }
                }
            }
            let avg = country_average_ensemble(&ensembles, w.full.country_id())?;
            for k in 0..w.held_out.len() {
                let truths: Option<Vec<f64>> = w.full.regions().iter().map(|r| r.get(w.cut + 1 + k)).collect();
                if let Some(t) = truths {
                    let key = format!("{method}/average/{}/{}", w.full.country_id(), w.held_out[k]);
                    average_jobs.push((key, avg.column(k), mean(&t)));
                }
            }
        }
        let score = |jobs: &[(String, Vec<f64>, f64)]| -> Vec<CellScore> {
            jobs.par_iter()
                .map(|(key, col, truth)| score_cell(col, *truth, config.n_mc, config.seed, key))
                .collect()
        };
        marginal_rows.push(MethodRow {
            method,
            metrics: summarize(&score(&marginal_jobs))?,
        });
        average_rows.push(MethodRow {
            method,
            metrics: summarize(&score(&average_jobs))?,
        });
    }

    Ok(ValidationReport {
        holdout: spec.clone(),
        seed: config.seed,
        n_mc: config.n_mc,
        scale_ar1_parameters: params.map(|p| CalibratedParameters {
            phi: p.phi,
            sigma: p.sigma,
            moments: p.provenance,
        }),
        marginal_tfr: marginal_rows,
        average_tfr: average_rows,
        skipped_regions: skipped,
    })
}
