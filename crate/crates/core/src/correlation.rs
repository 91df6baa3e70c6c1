//! Between-region error correlation.
//!
//! Normalized forecast errors `e[r, t]` are computed from model trajectory
//! ensembles and turned into a correlation matrix by one of eleven
//! estimators:
//!
//! | id | estimator |
//! |----|-----------|
//! | 1, 2 | mean / median of the zero-truncated empirical off-diagonals |
//! | 3, 4 | posterior mean / mode of the intraclass correlation |
//! | 5, 6 | as 3, 4 after dividing errors by their global RMS |
//! | 7 | ratio of mean cross products to mean squares |
//! | 8 | truncated, PD-repaired empirical matrix shrunk toward U[0,1] prior |
//! | 9 | as 8 with per-region 1/T normalization |
//! | 10, 11 | elementwise posterior mean of a bivariate normal correlation |
//!
//! Methods 1-7 yield equicorrelation matrices. Every output has unit
//! diagonal and is certified positive definite.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{period_axis, Country, PeriodIndex, TrajectorySet};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::stats::{mean, median};

/// Fit phase of the national model a cell's error was computed under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "II")]
    II,
    #[serde(rename = "III")]
    III,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "II" | "2" => Ok(Phase::II),
            "III" | "3" => Ok(Phase::III),
            other => Err(Error::Data(format!("unknown phase {other:?}"))),
        }
    }
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::II => "II",
            Phase::III => "III",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    High,
    Low,
    Pooled,
}

/// Region × period matrix of normalized errors with missing cells.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedErrorPanel {
    region_ids: Vec<String>,
    periods: Vec<PeriodIndex>,
    cells: Vec<Option<(f64, Phase)>>,
}

impl NormalizedErrorPanel {
    pub fn new(
        region_ids: Vec<String>,
        periods: Vec<PeriodIndex>,
        cells: Vec<Option<(f64, Phase)>>,
    ) -> Result<Self> {
        if cells.len() != region_ids.len() * periods.len() {
            return Err(Error::Data(format!(
                "error panel: {} cells for {} regions x {} periods",
                cells.len(),
                region_ids.len(),
                periods.len()
            )));
        }
        if cells.iter().flatten().any(|(e, _)| !e.is_finite()) {
            return Err(Error::Data("error panel: non-finite error".into()));
        }
        Ok(NormalizedErrorPanel {
            region_ids,
            periods,
            cells,
        })
    }

    /// Panel from dense rows (`None` = missing), all cells tagged `phase`.
    pub fn from_rows(region_ids: Vec<String>, rows: &[Vec<Option<f64>>], phase: Phase) -> Result<Self> {
        let n_periods = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_periods) {
            return Err(Error::Data("error panel: ragged rows".into()));
        }
        let labels: Vec<String> = (0..n_periods).map(|t| format!("t{t}")).collect();
        let cells = rows.iter().flatten().map(|v| v.map(|e| (e, phase))).collect();
        Self::new(region_ids, period_axis(0, &labels), cells)
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn periods(&self) -> &[PeriodIndex] {
        &self.periods
    }

    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn get(&self, region: usize, period: usize) -> Option<f64> {
        self.cells[region * self.periods.len() + period].map(|(e, _)| e)
    }

    pub fn phase(&self, region: usize, period: usize) -> Option<Phase> {
        self.cells[region * self.periods.len() + period].map(|(_, p)| p)
    }

    pub fn n_present(&self) -> usize {
        self.cells.iter().flatten().count()
    }

    fn row(&self, region: usize) -> Vec<Option<f64>> {
        (0..self.n_periods()).map(|t| self.get(region, t)).collect()
    }

    /// Average number of observed periods over regions with any error.
    pub fn t_bar(&self) -> f64 {
        let counts: Vec<f64> = (0..self.n_regions())
            .map(|r| self.row(r).iter().flatten().count() as f64)
            .filter(|c| *c > 0.0)
            .collect();
        if counts.is_empty() {
            0.0
        } else {
            mean(&counts)
        }
    }

    /// Copy with every error divided by the root mean square of all errors.
    pub fn standardized(&self) -> NormalizedErrorPanel {
        let present: Vec<f64> = self.cells.iter().flatten().map(|(e, _)| *e).collect();
        let rms = (present.iter().map(|e| e * e).sum::<f64>() / present.len().max(1) as f64).sqrt();
        let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
        NormalizedErrorPanel {
            region_ids: self.region_ids.clone(),
            periods: self.periods.clone(),
            cells: self.cells.iter().map(|c| c.map(|(e, p)| (e * scale, p))).collect(),
        }
    }

    fn filtered(&self, keep: impl Fn(usize) -> bool) -> NormalizedErrorPanel {
        let n_t = self.n_periods();
        NormalizedErrorPanel {
            region_ids: self.region_ids.clone(),
            periods: self.periods.clone(),
            cells: self
                .cells
                .iter()
                .enumerate()
                .map(|(k, c)| if keep(k % n_t) { *c } else { None })
                .collect(),
        }
    }

    /// Combines two panels over the same regions and periods; cells present
    /// in both are an error.
    pub fn merge(&self, other: &NormalizedErrorPanel) -> Result<NormalizedErrorPanel> {
        if self.region_ids != other.region_ids || self.periods != other.periods {
            return Err(Error::Data("cannot merge panels with different axes".into()));
        }
        let cells = self
            .cells
            .iter()
            .zip(&other.cells)
            .map(|(a, b)| match (a, b) {
                (Some(_), Some(_)) => Err(Error::Data("overlapping error cells".into())),
                (a, b) => Ok(a.or(*b)),
            })
            .collect::<Result<_>>()?;
        Ok(NormalizedErrorPanel {
            region_ids: self.region_ids.clone(),
            periods: self.periods.clone(),
            cells,
        })
    }
}

/// Per-trajectory model standard deviations, keyed by region.
pub type ModelSd = BTreeMap<String, Vec<f64>>;

/// Mean over trajectories of `(observed - model) / sd` for every observed
/// (region, period) covered by a model trajectory set.
pub fn normalize_errors(
    observed: &Country,
    model_traj: &BTreeMap<String, TrajectorySet>,
    model_sd: &ModelSd,
    phase: Phase,
) -> Result<NormalizedErrorPanel> {
    let periods = observed.periods().to_vec();
    let mut region_ids = Vec::new();
    let mut cells = Vec::new();
    for region in observed.regions() {
        let id = region.geography_id();
        region_ids.push(id.to_string());
        let Some(set) = model_traj.get(id) else {
            cells.extend(std::iter::repeat_n(None, periods.len()));
            continue;
        };
        let sd = model_sd
            .get(id)
            .ok_or_else(|| Error::Data(format!("{id}: no model standard deviations")))?;
        if sd.len() != set.n_traj() {
            return Err(Error::Data(format!(
                "{id}: {} standard deviations for {} trajectories",
                sd.len(),
                set.n_traj()
            )));
        }
        if let Some(s) = sd.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("{id}: model standard deviation {s} must be positive")));
        }
        for (pos, p) in periods.iter().enumerate() {
            let cell = match (region.get(pos), set.position_of(&p.label)) {
                (Some(f), Some(t)) => {
                    let e = (0..set.n_traj()).map(|i| (f - set.value(i, t)) / sd[i]).sum::<f64>()
                        / set.n_traj() as f64;
                    Some((e, phase))
                }
                _ => None,
            };
            cells.push(cell);
        }
    }
    NormalizedErrorPanel::new(region_ids, periods, cells)
}

/// Normalization of the empirical correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// All three sums over the periods both regions share.
    PairwiseComplete,
    /// Cross product averaged over shared periods, each region's square
    /// averaged over its own periods.
    FixedT,
}

/// Symmetric matrix with undefined cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialMatrix {
    pub n: usize,
    pub cells: Vec<Option<f64>>,
}

impl PartialMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, v: Option<f64>) {
        self.cells[i * self.n + j] = v;
        self.cells[j * self.n + i] = v;
    }

    /// Defined values above the diagonal.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if let Some(v) = self.get(i, j) {
                    out.push(v);
                }
            }
        }
        out
    }

    /// Dense matrix with undefined off-diagonals set to the mean of the
    /// defined ones (0 when none are defined) and unit diagonal.
    pub fn filled(&self) -> DMatrix<f64> {
        let defined = self.off_diagonal();
        let fill = if defined.is_empty() { 0.0 } else { mean(&defined) };
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if i == j {
                1.0
            } else {
                self.get(i, j).unwrap_or(fill)
            }
        })
    }
}

const MIN_COMMON_PERIODS: usize = 2;

struct PairSums {
    common: usize,
    ss_r: f64,
    ss_s: f64,
    ss_rs: f64,
}

fn pair_sums(a: &[Option<f64>], b: &[Option<f64>]) -> PairSums {
    let mut s = PairSums {
        common: 0,
        ss_r: 0.0,
        ss_s: 0.0,
        ss_rs: 0.0,
    };
    for (x, y) in a.iter().zip(b) {
        if let (Some(x), Some(y)) = (x, y) {
            s.common += 1;
            s.ss_r += x * x;
            s.ss_s += y * y;
            s.ss_rs += x * y;
        }
    }
    s
}

/// Uncentered empirical correlation of region error rows. Pairs sharing
/// fewer than two periods are left undefined.
pub fn empirical_corr(panel: &NormalizedErrorPanel, normalization: Normalization) -> PartialMatrix {
    let n = panel.n_regions();
    let rows: Vec<Vec<Option<f64>>> = (0..n).map(|r| panel.row(r)).collect();
    let own_ms: Vec<f64> = rows
        .iter()
        .map(|r| {
            let v: Vec<f64> = r.iter().flatten().map(|e| e * e).collect();
            if v.is_empty() { 0.0 } else { mean(&v) }
        })
        .collect();
    let mut m = PartialMatrix {
        n,
        cells: vec![None; n * n],
    };
    for i in 0..n {
        m.set(i, i, Some(1.0));
        for j in i + 1..n {
            let s = pair_sums(&rows[i], &rows[j]);
            if s.common < MIN_COMMON_PERIODS {
                continue;
            }
            let v = match normalization {
                Normalization::PairwiseComplete => {
                    let d = s.ss_r.sqrt() * s.ss_s.sqrt();
                    (d > 0.0).then(|| s.ss_rs / d)
                }
                Normalization::FixedT => {
                    let d = own_ms[i].sqrt() * own_ms[j].sqrt();
                    (d > 0.0).then(|| (s.ss_rs / s.common as f64 / d).clamp(-1.0, 1.0))
                }
            };
            m.set(i, j, v);
        }
    }
    m
}

/// Estimated correlation matrix with its positive-definiteness certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationEstimate {
    pub region_ids: Vec<String>,
    pub a: DMatrix<f64>,
    pub method_id: u8,
    pub stratum: Stratum,
    /// Smallest eigenvalue of `a`.
    pub pd_certificate: f64,
    pub t_bar: f64,
}

pub fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

const EIGEN_FLOOR: f64 = 1e-8;
const REPAIR_ROUNDS: usize = 50;
const CERTIFY_TOL: f64 = 1e-10;

/// Nearest-correlation repair by eigenvalue clipping: eigenvalues below
/// 1e-8 are raised to 1e-8, the matrix is rebuilt and rescaled to unit
/// diagonal, up to 50 rounds. Returns the matrix and its smallest eigenvalue.
pub fn repair_pd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = m.nrows();
    let mut a = symmetrize(m);
    for _ in 0..REPAIR_ROUNDS {
        let eig = SymmetricEigen::new(a.clone());
        let min = eig.eigenvalues.min();
        if min >= CERTIFY_TOL {
            return Ok((a, min));
        }
        let clipped = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
        let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        let d: Vec<f64> = (0..n).map(|i| 1.0 / rebuilt[(i, i)].sqrt()).collect();
        a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { rebuilt[(i, j)] * d[i] * d[j] });
        a = symmetrize(&a);
    }
    let min = smallest_eigenvalue(&a);
    if min > 0.0 {
        Ok((a, min))
    } else {
        Err(Error::Numeric(format!(
            "positive-definite repair failed after {REPAIR_ROUNDS} rounds; smallest eigenvalue {min:e}"
        )))
    }
}

pub fn equicorrelation(n: usize, a: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { a })
}

/// Shrinks off-diagonals toward the U[0,1] prior:
/// `((T-1)/T) a + 1/(2T)`, diagonal held at 1.
pub fn shrink_toward_prior(a_star: &DMatrix<f64>, t_bar: f64) -> DMatrix<f64> {
    let w = (t_bar - 1.0) / t_bar;
    let prior = 1.0 / (2.0 * t_bar);
    DMatrix::from_fn(a_star.nrows(), a_star.ncols(), |i, j| {
        if i == j {
            1.0
        } else {
            w * a_star[(i, j)] + prior
        }
    })
}

const ICC_GRID: usize = 2048;

/// Log-likelihood of a common within-period correlation `rho` for unit
/// variance errors: in each period the m present errors are equicorrelated
/// normal, with eigenvalue 1+(m-1)rho along the mean and 1-rho elsewhere.
fn icc_log_likelihood(periods: &[(usize, f64, f64)], rho: f64) -> f64 {
    periods
        .iter()
        .map(|&(m, sum, sumsq)| {
            let m_f = m as f64;
            let between = sum * sum / m_f;
            let within = sumsq - between;
            let lam_b = 1.0 + (m_f - 1.0) * rho;
            let lam_w = 1.0 - rho;
            -0.5 * lam_b.ln() - 0.5 * (m_f - 1.0) * lam_w.ln() - 0.5 * between / lam_b - 0.5 * within / lam_w
        })
        .sum()
}

/// Posterior mean and mode of the intraclass correlation on [0, 1] under a
/// uniform prior, by midpoint-grid quadrature.
pub fn icc_posterior(panel: &NormalizedErrorPanel) -> (f64, f64) {
    let stats: Vec<(usize, f64, f64)> = (0..panel.n_periods())
        .filter_map(|t| {
            let v: Vec<f64> = (0..panel.n_regions()).filter_map(|r| panel.get(r, t)).collect();
            (v.len() >= 2).then(|| (v.len(), v.iter().sum(), v.iter().map(|e| e * e).sum()))
        })
        .collect();
    let grid: Vec<f64> = (0..ICC_GRID).map(|k| (k as f64 + 0.5) / ICC_GRID as f64).collect();
    let ll: Vec<f64> = grid.iter().map(|&rho| icc_log_likelihood(&stats, rho)).collect();
    let (mode_k, max) = ll
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (k, v)| if *v > acc.1 { (k, *v) } else { acc });
    let w: Vec<f64> = ll.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let post_mean = grid.iter().zip(&w).map(|(r, w)| r * w).sum::<f64>() / total;
    (post_mean, grid[mode_k])
}

/// Ratio of the mean pairwise cross product to the mean square, each over
/// non-missing terms.
pub fn cross_product_ratio(panel: &NormalizedErrorPanel) -> Option<f64> {
    let (mut b, mut nb, mut c, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for t in 0..panel.n_periods() {
        let v: Vec<f64> = (0..panel.n_regions()).filter_map(|r| panel.get(r, t)).collect();
        for (i, x) in v.iter().enumerate() {
            c += x * x;
            nc += 1;
            for y in &v[i + 1..] {
                b += x * y;
                nb += 1;
            }
        }
    }
    (nb > 0 && nc > 0 && c > 0.0).then(|| (b / nb as f64) / (c / nc as f64))
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson quadrature over `panels` equal sub-intervals.
fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize, tol: f64) -> f64 {
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|k| {
            let (lo, hi) = (a + h * k as f64, a + h * (k + 1) as f64);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            adaptive_simpson(&f, lo, hi, fa, fm, fb, whole, tol / panels as f64, 40)
        })
        .sum()
}

const RHO_MAX: f64 = 1.0 - 1e-9;

/// Posterior mean of a correlation on [0, 1] given sums of squares and
/// cross products of paired standardized errors, with exponent `t_exp` on
/// `(1-rho^2)^(-1/2)`.
///
/// Integrates over `u = -ln(1 - rho)` so the mass near rho = 1 is resolved;
/// the integrand is evaluated in log space relative to its maximum.
pub fn posterior_mean_correlation(ss_r: f64, ss_s: f64, ss_rs: f64, t_exp: f64) -> f64 {
    let log_g = |rho: f64| {
        let one_m = 1.0 - rho * rho;
        -0.5 * t_exp * one_m.ln() - (ss_r - 2.0 * rho * ss_rs + ss_s) / (2.0 * one_m)
    };
    let u_max = -(1.0 - RHO_MAX).ln();
    // log of the integrand in u, including the Jacobian e^{-u}
    let log_h = |u: f64| {
        let rho = -(-u).exp_m1();
        log_g(rho) - u
    };
    let scan = 4096;
    let peak = (0..=scan)
        .map(|k| log_h(u_max * k as f64 / scan as f64))
        .fold(f64::NEG_INFINITY, f64::max);
    let den = integrate(|u| (log_h(u) - peak).exp(), 0.0, u_max, 256, 1e-12);
    let num = integrate(|u| -(-u).exp_m1() * (log_h(u) - peak).exp(), 0.0, u_max, 256, 1e-12);
    (num / den).clamp(0.0, 1.0)
}

fn bayes_pairwise(panel: &NormalizedErrorPanel, extra: f64) -> PartialMatrix {
    let std = panel.standardized();
    let n = std.n_regions();
    let rows: Vec<Vec<Option<f64>>> = (0..n).map(|r| std.row(r)).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let s = pair_sums(&rows[i], &rows[j]);
            (s.common >= MIN_COMMON_PERIODS)
                .then(|| posterior_mean_correlation(s.ss_r, s.ss_s, s.ss_rs, s.common as f64 + extra))
        })
        .collect();
    let mut m = PartialMatrix {
        n,
        cells: vec![None; n * n],
    };
    for i in 0..n {
        m.set(i, i, Some(1.0));
    }
    for (&(i, j), v) in pairs.iter().zip(values) {
        m.set(i, j, v);
    }
    m
}

fn truncated(m: &PartialMatrix) -> PartialMatrix {
    PartialMatrix {
        n: m.n,
        cells: m.cells.iter().map(|c| c.map(|v| v.max(0.0))).collect(),
    }
}

fn certify(a: DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let min = smallest_eigenvalue(&a);
    if min >= CERTIFY_TOL {
        Ok((a, min))
    } else {
        repair_pd(&a)
    }
}

/// Estimates the between-region correlation matrix by method 1..=11.
pub fn estimate_a(panel: &NormalizedErrorPanel, method_id: u8) -> Result<CorrelationEstimate> {
    let n = panel.n_regions();
    if n < 2 {
        return Err(Error::Data(format!("correlation needs at least 2 regions, got {n}")));
    }
    let t_bar = panel.t_bar();
    let equi = |a: f64| equicorrelation(n, a);
    let a = match method_id {
        1 | 2 => {
            let off = truncated(&empirical_corr(panel, Normalization::PairwiseComplete)).off_diagonal();
            let v = if off.is_empty() {
                0.0
            } else if method_id == 1 {
                mean(&off)
            } else {
                median(&off)
            };
            equi(v)
        }
        3 | 4 => {
            let (m, mode) = icc_posterior(panel);
            equi(if method_id == 3 { m } else { mode })
        }
        5 | 6 => {
            let (m, mode) = icc_posterior(&panel.standardized());
            equi(if method_id == 5 { m } else { mode })
        }
        7 => equi(cross_product_ratio(panel).unwrap_or(0.0)),
        8 | 9 => {
            if t_bar < 1.0 {
                return Err(Error::Data("error panel has no observed cells".into()));
            }
            let norm = if method_id == 8 {
                Normalization::PairwiseComplete
            } else {
                Normalization::FixedT
            };
            let (a_star, _) = repair_pd(&truncated(&empirical_corr(panel, norm)).filled())?;
            shrink_toward_prior(&a_star, t_bar)
        }
        10 | 11 => bayes_pairwise(panel, if method_id == 10 { 0.0 } else { 1.0 }).filled(),
        other => return Err(Error::Usage(format!("correlation method {other} not in 1..=11"))),
    };
    let (a, pd_certificate) = certify(a)?;
    Ok(CorrelationEstimate {
        region_ids: panel.region_ids.clone(),
        a,
        method_id,
        stratum: Stratum::Pooled,
        pd_certificate,
        t_bar,
    })
}

/// Splits cells by whether the national TFR in their period is at or above
/// `threshold`. Periods are matched by label; cells in periods without a
/// national value go to neither panel.
pub fn split_by_tfr(
    panel: &NormalizedErrorPanel,
    observed: &Country,
    threshold: f64,
) -> (NormalizedErrorPanel, NormalizedErrorPanel) {
    let national: Vec<Option<f64>> = panel
        .periods
        .iter()
        .map(|p| observed.national().position_of(&p.label).and_then(|k| observed.national().get(k)))
        .collect();
    let high = panel.filtered(|t| national[t].is_some_and(|v| v >= threshold));
    let low = panel.filtered(|t| national[t].is_some_and(|v| v < threshold));
    (high, low)
}

pub const DEFAULT_TFR_THRESHOLD: f64 = 5.0;

/// Draws `n` vectors from N(0, diag(sigma) A diag(sigma)); rows are draws.
pub fn sample_correlated_errors(a: &DMatrix<f64>, sigma_t: &[f64], n: usize, seed: u64) -> Result<DMatrix<f64>> {
    let k = a.nrows();
    if a.ncols() != k || sigma_t.len() != k {
        return Err(Error::Data(format!(
            "dimension mismatch: A is {}x{}, sigma has {} entries",
            a.nrows(),
            a.ncols(),
            sigma_t.len()
        )));
    }
    if let Some(s) = sigma_t.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::Data(format!("standard deviation {s} must be positive")));
    }
    let cov = DMatrix::from_fn(k, k, |i, j| sigma_t[i] * a[(i, j)] * sigma_t[j]);
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut rng = keyed_rng(seed, "correlated-errors", 0);
    let mut out = DMatrix::zeros(n, k);
    let mut z = vec![0.0; k];
    for row in 0..n {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for i in 0..k {
            out[(row, i)] = (0..=i).map(|j| l[(i, j)] * z[j]).sum();
        }
    }
    Ok(out)
}

/// Loads an error panel from `region_id,period_label,error[,phase]` rows.
/// Empty errors mark missing cells; phase defaults to II.
pub fn load_error_panel(path: &Path) -> Result<NormalizedErrorPanel> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::file(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::file(path, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (ri, pi, ei) = match (col("region_id"), col("period_label"), col("error")) {
        (Some(r), Some(p), Some(e)) => (r, p, e),
        _ => return Err(Error::file(path, "expected columns region_id, period_label, error")),
    };
    let phi = col("phase");
    let mut regions: Vec<String> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut values: HashMap<(String, String), (f64, Phase)> = HashMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::file(path, e.to_string()))?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let region = rec.get(ri).unwrap_or("").to_string();
        let label = rec.get(pi).unwrap_or("").to_string();
        let raw = rec.get(ei).unwrap_or("");
        if !regions.contains(&region) {
            regions.push(region.clone());
        }
        if !labels.contains(&label) {
            labels.push(label.clone());
        }
        if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
            continue;
        }
        let e: f64 = raw
            .parse()
            .map_err(|_| Error::row(path, row, format!("cannot parse error value {raw:?}")))?;
        let phase = match phi.and_then(|k| rec.get(k)).filter(|s| !s.is_empty()) {
            Some(s) => s.parse().map_err(|err: Error| Error::row(path, row, err.to_string()))?,
            None => Phase::II,
        };
        if values.insert((region, label), (e, phase)).is_some() {
            return Err(Error::row(path, row, "duplicate (region, period) error"));
        }
    }
    let labels = crate::data::order_labels(labels);
    let mut cells = Vec::with_capacity(regions.len() * labels.len());
    for r in &regions {
        for l in &labels {
            cells.push(values.get(&(r.clone(), l.clone())).copied());
        }
    }
    NormalizedErrorPanel::new(regions, period_axis(0, &labels), cells).map_err(|e| Error::file(path, e.to_string()))
}

pub fn save_error_panel(panel: &NormalizedErrorPanel, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e.to_string()))?;
    let wrap = |e: csv::Error| Error::file(path, e.to_string());
    w.write_record(["region_id", "period_label", "error", "phase"]).map_err(wrap)?;
    for (r, id) in panel.region_ids.iter().enumerate() {
        for (t, p) in panel.periods.iter().enumerate() {
            let (e, ph) = match (panel.get(r, t), panel.phase(r, t)) {
                (Some(e), Some(ph)) => (e.to_string(), ph.as_str()),
                _ => (String::new(), ""),
            };
            w.write_record([id.as_str(), &p.label, &e, ph]).map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the matrix as delimited text with region ids as header.
pub fn save_matrix(est: &CorrelationEstimate, path: &Path) -> Result<()> {
    let mut text = String::from("region_id");
    for id in &est.region_ids {
        text.push(',');
        text.push_str(id);
    }
    text.push('\n');
    for (i, id) in est.region_ids.iter().enumerate() {
        text.push_str(id);
        for j in 0..est.region_ids.len() {
            text.push(',');
            text.push_str(&est.a[(i, j)].to_string());
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateSidecar {
    pub method_id: u8,
    pub stratum: Stratum,
    pub t_bar: f64,
    pub smallest_eigenvalue: f64,
    pub region_ids: Vec<String>,
}

impl From<&CorrelationEstimate> for EstimateSidecar {
    fn from(e: &CorrelationEstimate) -> Self {
        EstimateSidecar {
            method_id: e.method_id,
            stratum: e.stratum,
            t_bar: e.t_bar,
            smallest_eigenvalue: e.pd_certificate,
            region_ids: e.region_ids.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TfrSeries;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("R{k}")).collect()
    }

    fn panel(rows: &[&[f64]]) -> NormalizedErrorPanel {
        let rows: Vec<Vec<Option<f64>>> = rows.iter().map(|r| r.iter().map(|v| Some(*v)).collect()).collect();
        NormalizedErrorPanel::from_rows(ids(rows.len()), &rows, Phase::II).unwrap()
    }

    fn country(national: &[f64], regions: &[&[f64]]) -> Country {
        let labels: Vec<String> = (0..national.len()).map(|t| format!("t{t}")).collect();
        let axis = period_axis(0, &labels);
        Country::new(
            "C",
            TfrSeries::from_values("C", axis.clone(), national).unwrap(),
            regions
                .iter()
                .enumerate()
                .map(|(k, v)| TfrSeries::from_values(format!("R{k}"), axis.clone(), v).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn normalized_error_examples() {
        let c = country(&[2.0], &[&[2.0], &[2.0]]);
        let h = period_axis(0, &["t0"]);
        let traj: BTreeMap<String, TrajectorySet> = [
            ("R0".to_string(), TrajectorySet::from_rows("R0", h.clone(), &[vec![1.8], vec![2.2]]).unwrap()),
            ("R1".to_string(), TrajectorySet::from_rows("R1", h, &[vec![1.9], vec![1.95]]).unwrap()),
        ]
        .into();
        let sd: ModelSd = [("R0".to_string(), vec![0.1, 0.1]), ("R1".to_string(), vec![0.1, 0.05])].into();
        let p = normalize_errors(&c, &traj, &sd, Phase::III).unwrap();
        assert!(p.get(0, 0).unwrap().abs() < 1e-12);
        assert!((p.get(1, 0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(p.phase(1, 0), Some(Phase::III));

        let bad: ModelSd = [("R0".to_string(), vec![0.1, 0.0]), ("R1".to_string(), vec![0.1, 0.05])].into();
        assert!(normalize_errors(&c, &traj, &bad, Phase::II).is_err());
    }

    #[test]
    fn observed_equal_to_model_gives_zero() {
        let c = country(&[2.0, 1.9], &[&[2.1, 2.0], &[1.8, 1.7]]);
        let h = period_axis(0, &["t0", "t1"]);
        let traj: BTreeMap<String, TrajectorySet> = [
            ("R0".to_string(), TrajectorySet::from_rows("R0", h.clone(), &vec![vec![2.1, 2.0]; 3]).unwrap()),
            ("R1".to_string(), TrajectorySet::from_rows("R1", h, &vec![vec![1.8, 1.7]; 3]).unwrap()),
        ]
        .into();
        let sd: ModelSd = [("R0".to_string(), vec![0.2; 3]), ("R1".to_string(), vec![0.3; 3])].into();
        let p = normalize_errors(&c, &traj, &sd, Phase::II).unwrap();
        assert!((0..2).all(|r| (0..2).all(|t| p.get(r, t) == Some(0.0))));
    }

    #[test]
    fn empirical_examples() {
        let m = empirical_corr(&panel(&[&[1.0, 2.0], &[2.0, 1.0], &[1.0, 2.0], &[-2.0, 1.0]]), Normalization::PairwiseComplete);
        assert!((m.get(0, 1).unwrap() - 0.8).abs() < 1e-15);
        assert!((m.get(0, 2).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(m.get(0, 3), Some(0.0));
        assert_eq!(m.get(3, 3), Some(1.0));
    }

    #[test]
    fn too_few_common_periods_undefined() {
        let rows = vec![vec![Some(1.0), Some(2.0), None], vec![None, Some(1.0), Some(1.0)]];
        let p = NormalizedErrorPanel::from_rows(ids(2), &rows, Phase::II).unwrap();
        assert_eq!(empirical_corr(&p, Normalization::PairwiseComplete).get(0, 1), None);
    }

    #[test]
    fn fixed_t_differs_when_coverage_differs() {
        let rows = vec![
            vec![Some(3.0), Some(2.0), Some(3.0), Some(-1.0)],
            vec![None, Some(2.0), Some(2.5), Some(0.5)],
        ];
        let p = NormalizedErrorPanel::from_rows(ids(2), &rows, Phase::II).unwrap();
        let a = empirical_corr(&p, Normalization::PairwiseComplete).get(0, 1).unwrap();
        let b = empirical_corr(&p, Normalization::FixedT).get(0, 1).unwrap();
        // hand: common sums 4+7.5-0.5 = 11, ss0 = 4+9+1 = 14, ss1 = 4+6.25+0.25 = 10.5
        assert!((a - 11.0 / (14f64.sqrt() * 10.5f64.sqrt())).abs() < 1e-12);
        // fixed T: (11/3) / sqrt(23/4 * 10.5/3)
        assert!((b - (11.0 / 3.0) / ((23.0f64 / 4.0).sqrt() * (10.5f64 / 3.0).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn method_1_and_2_truncate() {
        // construct errors with empirical correlations {0.2, -0.3, 0.4}
        // via a direct PartialMatrix check of the aggregation
        let m = PartialMatrix {
            n: 3,
            cells: vec![Some(1.0), Some(0.2), Some(-0.3), Some(0.2), Some(1.0), Some(0.4), Some(-0.3), Some(0.4), Some(1.0)],
        };
        let off = truncated(&m).off_diagonal();
        assert!((mean(&off) - 0.2).abs() < 1e-15);
        assert!((median(&off) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn methods_one_to_seven_equicorrelated() {
        let p = panel(&[
            &[1.0, -0.5, 0.3, 1.2, -0.8, 0.1],
            &[0.8, -0.2, 0.5, 0.9, -1.0, 0.3],
            &[1.1, -0.7, -0.1, 1.4, -0.4, -0.2],
            &[0.2, 0.1, 0.6, 0.7, -0.9, 0.4],
        ]);
        for id in 1..=7 {
            let est = estimate_a(&p, id).unwrap();
            let a = est.a[(0, 1)];
            for i in 0..4 {
                assert_eq!(est.a[(i, i)], 1.0);
                for j in 0..4 {
                    if i != j {
                        assert!((est.a[(i, j)] - a).abs() < 1e-12, "method {id}");
                    }
                }
            }
            assert!(a > -1.0 / 3.0 && a < 1.0, "method {id}: {a}");
            assert!(est.pd_certificate > 0.0);
        }
    }

    #[test]
    fn method_8_worked_examples() {
        let half = equicorrelation(4, 0.5);
        let s = shrink_toward_prior(&half, 10.0);
        assert!((s[(0, 1)] - 0.5).abs() < 1e-12);
        assert_eq!(s[(2, 2)], 1.0);
        let id = DMatrix::<f64>::identity(3, 3);
        let s = shrink_toward_prior(&id, 10.0);
        assert!((s[(1, 2)] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn method_8_end_to_end() {
        // identical rows over 10 periods: A~ = 1 everywhere, repair leaves a
        // near-singular PD matrix, shrink keeps it PD
        let row = [0.5, -1.0, 0.3, 1.2, -0.7, 0.2, 0.9, -0.4, 0.1, -1.1];
        let est = estimate_a(&panel(&[&row, &row, &row]), 8).unwrap();
        assert_eq!(est.t_bar, 10.0);
        assert!(est.pd_certificate > 0.0);
        assert!((est.a[(0, 1)] - (0.9 * 1.0 + 0.05)).abs() < 1e-6);
    }

    #[test]
    fn undefined_cells_filled_with_mean() {
        let rows = vec![
            vec![Some(1.0), Some(2.0), Some(0.5), None, None],
            vec![Some(1.0), Some(1.5), Some(0.4), Some(0.3), Some(1.0)],
            vec![None, None, None, Some(0.5), Some(0.9)],
        ];
        let p = NormalizedErrorPanel::from_rows(ids(3), &rows, Phase::II).unwrap();
        let m = empirical_corr(&p, Normalization::PairwiseComplete);
        assert_eq!(m.get(0, 2), None);
        let filled = m.filled();
        let mean_def = (m.get(0, 1).unwrap() + m.get(1, 2).unwrap()) / 2.0;
        assert!((filled[(0, 2)] - mean_def).abs() < 1e-15);
        for id in [8, 9, 10, 11] {
            assert!(estimate_a(&p, id).unwrap().pd_certificate > 0.0);
        }
    }

    /// Plain trapezoid quadrature on a fine rho grid as an independent check.
    fn brute_posterior_mean(ss_r: f64, ss_s: f64, ss_rs: f64, t_exp: f64) -> f64 {
        let n = 400_000;
        let (mut num, mut den) = (0.0, 0.0);
        let lg = |rho: f64| {
            let om = 1.0 - rho * rho;
            -0.5 * t_exp * om.ln() - (ss_r - 2.0 * rho * ss_rs + ss_s) / (2.0 * om)
        };
        let peak = (0..n).map(|k| lg(k as f64 / n as f64 * RHO_MAX)).fold(f64::NEG_INFINITY, f64::max);
        for k in 0..=n {
            let rho = k as f64 / n as f64 * RHO_MAX;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            let g = (lg(rho) - peak).exp() * w;
            num += rho * g;
            den += g;
        }
        num / den
    }

    #[test]
    fn posterior_mean_matches_brute_force() {
        for (a, b, c, t) in [(10.0, 12.0, 5.0, 10.0), (30.0, 25.0, 20.0, 30.0), (8.0, 8.0, -2.0, 8.0), (5.0, 6.0, 0.5, 6.0)] {
            let fast = posterior_mean_correlation(a, b, c, t);
            let slow = brute_posterior_mean(a, b, c, t);
            assert!((fast - slow).abs() < 1e-4, "{fast} vs {slow}");
        }
    }

    #[test]
    fn posterior_concentrates_for_identical_errors() {
        let v = posterior_mean_correlation(40.0, 40.0, 40.0, 40.0);
        assert!(v > 0.9, "{v}");
    }

    #[test]
    fn split_routes_at_threshold() {
        let c = country(&[6.0, 5.0, 4.9, 3.0], &[&[6.1, 5.1, 5.0, 3.1], &[5.9, 4.9, 4.8, 2.9]]);
        let p = panel(&[&[0.1, 0.2, 0.3, 0.4], &[0.5, 0.6, 0.7, 0.8]]);
        let p = NormalizedErrorPanel { periods: c.periods().to_vec(), ..p };
        let (high, low) = split_by_tfr(&p, &c, 5.0);
        assert_eq!(high.n_present(), 4);
        assert_eq!(low.n_present(), 4);
        assert_eq!(high.get(0, 1), Some(0.2));
        assert_eq!(low.get(0, 1), None);

        let all_low = country(&[4.0, 3.0, 2.0, 1.5], &[&[4.0, 3.0, 2.0, 1.5], &[4.0, 3.0, 2.0, 1.5]]);
        let p2 = NormalizedErrorPanel { periods: all_low.periods().to_vec(), ..p.clone() };
        let (high, low) = split_by_tfr(&p2, &all_low, 5.0);
        assert_eq!(high.n_present(), 0);
        assert_eq!(low.n_present(), p2.n_present());
    }

    #[test]
    fn sampler_shapes_and_errors() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        assert!(sample_correlated_errors(&a, &[1.0], 10, 1).is_err());
        assert!(sample_correlated_errors(&a, &[1.0, 0.0], 10, 1).is_err());
        let draws = sample_correlated_errors(&a, &[2.0, 3.0], 200_000, 9).unwrap();
        let n = draws.nrows() as f64;
        let cov = (0..draws.nrows()).map(|k| draws[(k, 0)] * draws[(k, 1)]).sum::<f64>() / n;
        assert!((cov - 3.0).abs() < 0.1, "{cov}");
    }

    #[test]
    fn repair_fixes_indefinite_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, 0.9, 0.9, 1.0, -0.9, 0.9, -0.9, 1.0]);
        assert!(smallest_eigenvalue(&m) < 0.0);
        let (r, min) = repair_pd(&m).unwrap();
        assert!(min > 0.0);
        for i in 0..3 {
            assert!((r[(i, i)] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn error_panel_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![vec![Some(0.25), None, Some(-1.5)], vec![Some(0.1), Some(2.0), Some(0.3)]];
        let p = NormalizedErrorPanel::from_rows(ids(2), &rows, Phase::III).unwrap();
        let path = dir.path().join("e.csv");
        save_error_panel(&p, &path).unwrap();
        assert_eq!(load_error_panel(&path).unwrap(), p);
    }
}
