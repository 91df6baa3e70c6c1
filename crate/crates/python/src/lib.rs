//! Python bindings for the `subtfr` library.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use subtfr::calibration;
use subtfr::correlation::{self, NormalizedErrorPanel, Phase};
use subtfr::data::{self, period_axis, ScaleAr1Params, SeriesLayout};
use subtfr::loess::DEFAULT_SPAN;
use subtfr::projection::{self, Method, ProjectionConfig, DEFAULT_LOWER_BOUND};
use subtfr::validation::{self, HoldoutConfig, HoldoutSpec, IntervalLevel, DEFAULT_N_MC};

create_exception!(pysubtfr, SubtfrError, PyException);

fn err(e: subtfr::Error) -> PyErr {
    SubtfrError::new_err(e.to_string())
}

fn layout(s: &str) -> PyResult<SeriesLayout> {
    s.parse().map_err(err)
}

/// A country: national series plus regions on one period axis.
#[pyclass(name = "Country", module = "pysubtfr", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyCountry {
    inner: data::Country,
}

#[pymethods]
impl PyCountry {
    #[getter]
    fn country_id(&self) -> String {
        self.inner.country_id().to_string()
    }

    #[getter]
    fn period_labels(&self) -> Vec<String> {
        self.inner.periods().iter().map(|p| p.label.clone()).collect()
    }

    #[getter]
    fn region_ids(&self) -> Vec<String> {
        self.inner.regions().iter().map(|r| r.geography_id().to_string()).collect()
    }

    #[getter]
    fn national(&self) -> Vec<Option<f64>> {
        self.inner.national().values().to_vec()
    }

    fn region(&self, region_id: &str) -> PyResult<Vec<Option<f64>>> {
        self.inner
            .region(region_id)
            .map(|r| r.values().to_vec())
            .ok_or_else(|| SubtfrError::new_err(format!("no region {region_id}")))
    }

    /// Latest regional-to-national ratio where both are observed.
    fn last_scale_factor(&self, region_id: &str) -> Option<f64> {
        self.inner.last_scale_factor(region_id).map(|(_, a)| a)
    }

    fn __repr__(&self) -> String {
        format!("Country({:?}, regions={})", self.inner.country_id(), self.inner.n_regions())
    }
}

/// Trajectory ensemble of one geography.
#[pyclass(name = "TrajectorySet", module = "pysubtfr", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyTrajectorySet {
    inner: data::TrajectorySet,
}

#[pymethods]
impl PyTrajectorySet {
    /// `rows[i][t]` is trajectory `i` at period `labels[t]`.
    #[new]
    fn new(geography_id: &str, labels: Vec<String>, rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = data::TrajectorySet::from_rows(geography_id, period_axis(0, &labels), &rows).map_err(err)?;
        Ok(PyTrajectorySet { inner })
    }

    #[getter]
    fn geography_id(&self) -> String {
        self.inner.geography_id().to_string()
    }

    #[getter]
    fn period_labels(&self) -> Vec<String> {
        self.inner.horizon().iter().map(|p| p.label.clone()).collect()
    }

    #[getter]
    fn n_traj(&self) -> usize {
        self.inner.n_traj()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_traj()).map(|i| self.inner.path(i).to_vec()).collect()
    }

    fn column(&self, period: usize) -> PyResult<Vec<f64>> {
        if period >= self.inner.n_periods() {
            return Err(SubtfrError::new_err(format!("period {period} out of range")));
        }
        Ok(self.inner.column(period))
    }

    /// Per-period dicts with median, q10, q90, q025 and q975.
    fn quantiles(&self) -> Vec<BTreeMap<String, f64>> {
        projection::quantile_summary(&self.inner)
            .into_iter()
            .map(|r| {
                [("median", r.median), ("q10", r.q10), ("q90", r.q90), ("q025", r.q025), ("q975", r.q975)]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect()
            })
            .collect()
    }

    fn save(&self, path: PathBuf, overwrite: bool) -> PyResult<()> {
        data::save_trajectories(&self.inner, &path, overwrite).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.n_traj()
    }

    fn __repr__(&self) -> String {
        format!(
            "TrajectorySet({:?}, n_traj={}, periods={})",
            self.inner.geography_id(),
            self.inner.n_traj(),
            self.inner.n_periods()
        )
    }
}

/// Scale-AR(1) parameter set.
#[pyclass(name = "ScaleAr1Params", module = "pysubtfr", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyParams {
    inner: ScaleAr1Params,
}

#[pymethods]
impl PyParams {
    /// Global parameters; per-country and per-region values are derived
    /// from `countries` when given.
    #[new]
    #[pyo3(signature = (phi=ScaleAr1Params::DEFAULT_PHI, sigma=ScaleAr1Params::DEFAULT_SIGMA, countries=None))]
    fn new(phi: f64, sigma: f64, countries: Option<Vec<PyCountry>>) -> PyResult<Self> {
        let cs: Vec<data::Country> = countries.unwrap_or_default().into_iter().map(|c| c.inner).collect();
        let inner = calibration::params_from_global(calibration::GlobalAr1 { phi, sigma }, &cs);
        inner.validate().map_err(err)?;
        Ok(PyParams { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyParams {
            inner: ScaleAr1Params::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn phi(&self) -> f64 {
        self.inner.phi
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    #[getter]
    fn sigma_c(&self) -> BTreeMap<String, f64> {
        self.inner.sigma_c.clone()
    }

    #[getter]
    fn alpha_init(&self) -> BTreeMap<String, f64> {
        self.inner.alpha_init.clone()
    }

    /// (e_abs_alpha, e_abs_delta, tfr_at_min) when produced by calibration.
    #[getter]
    fn provenance(&self) -> Option<(f64, f64, f64)> {
        self.inner.provenance.as_ref().map(|p| (p.e_abs_alpha, p.e_abs_delta, p.tfr_at_min))
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("parameters serialize")
    }

    fn __repr__(&self) -> String {
        format!("ScaleAr1Params(phi={}, sigma={})", self.inner.phi, self.inner.sigma)
    }
}

#[pyfunction]
#[pyo3(signature = (path, layout="long"))]
fn load_series(path: PathBuf, layout: &str) -> PyResult<Vec<PyCountry>> {
    let cs = data::load_series(&path, self::layout(layout)?).map_err(err)?;
    Ok(cs.into_iter().map(|inner| PyCountry { inner }).collect())
}

#[pyfunction]
fn load_trajectories(path: PathBuf) -> PyResult<BTreeMap<String, PyTrajectorySet>> {
    let sets = data::load_trajectory_sets(&path).map_err(err)?;
    Ok(sets.into_iter().map(|(k, inner)| (k, PyTrajectorySet { inner })).collect())
}

/// Moment identities: returns (phi, sigma).
#[pyfunction]
fn derive_phi_sigma(e_abs_alpha: f64, e_abs_delta: f64) -> PyResult<(f64, f64)> {
    let g = calibration::derive_phi_sigma(e_abs_alpha, e_abs_delta).map_err(err)?;
    Ok((g.phi, g.sigma))
}

#[pyfunction]
#[pyo3(signature = (countries, span=DEFAULT_SPAN))]
fn calibrate(py: Python<'_>, countries: Vec<PyCountry>, span: f64) -> PyResult<PyParams> {
    let cs: Vec<data::Country> = countries.into_iter().map(|c| c.inner).collect();
    let inner = py.detach(|| calibration::calibrate(&cs, span)).map_err(err)?;
    Ok(PyParams { inner })
}

/// Regional ensembles keyed by region id.
#[pyfunction]
#[pyo3(signature = (country, national, method, seed=0, params=None, lower_bound=DEFAULT_LOWER_BOUND))]
fn project(
    py: Python<'_>,
    country: &PyCountry,
    national: &PyTrajectorySet,
    method: &str,
    seed: u64,
    params: Option<&PyParams>,
    lower_bound: f64,
) -> PyResult<BTreeMap<String, PyTrajectorySet>> {
    let method: Method = method.parse().map_err(err)?;
    let mut cfg = ProjectionConfig::new(method, seed);
    cfg.lower_bound = lower_bound;
    cfg.params = params.map(|p| p.inner.clone());
    let out = py
        .detach(|| projection::project(&country.inner, &national.inner, &cfg))
        .map_err(err)?;
    Ok(out.into_iter().map(|(k, inner)| (k, PyTrajectorySet { inner })).collect())
}

#[pyfunction]
fn country_average(regional: BTreeMap<String, PyTrajectorySet>, geography_id: &str) -> PyResult<PyTrajectorySet> {
    let m = regional.into_iter().map(|(k, v)| (k, v.inner)).collect();
    let inner = validation::country_average_ensemble(&m, geography_id).map_err(err)?;
    Ok(PyTrajectorySet { inner })
}

#[pyfunction]
fn mae_bias(forecasts: Vec<f64>, truth: Vec<Option<f64>>) -> PyResult<(f64, f64)> {
    validation::mae_bias(&forecasts, &truth).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (ensemble, truth, n_mc=DEFAULT_N_MC, seed=0))]
fn crps(ensemble: Vec<f64>, truth: f64, n_mc: usize, seed: u64) -> PyResult<f64> {
    if ensemble.is_empty() {
        return Err(SubtfrError::new_err("empty ensemble"));
    }
    Ok(validation::crps(&ensemble, truth, n_mc, seed))
}

/// `level` is 80 or 95.
#[pyfunction]
fn coverage(ensemble: Vec<f64>, truth: f64, level: u32) -> PyResult<bool> {
    let level = match level {
        80 => IntervalLevel::P80,
        95 => IntervalLevel::P95,
        other => return Err(SubtfrError::new_err(format!("level must be 80 or 95, got {other}"))),
    };
    validation::coverage(&ensemble, truth, level).map_err(err)
}

/// Runs a holdout validation and returns the report as JSON text.
#[pyfunction]
#[pyo3(signature = (countries, national, cut, horizon, methods=None, seed=1, n_mc=DEFAULT_N_MC))]
#[allow(clippy::too_many_arguments)]
fn run_holdout(
    py: Python<'_>,
    countries: Vec<PyCountry>,
    national: BTreeMap<String, PyTrajectorySet>,
    cut: String,
    horizon: usize,
    methods: Option<Vec<String>>,
    seed: u64,
    n_mc: usize,
) -> PyResult<String> {
    let methods: Vec<Method> = methods
        .unwrap_or_else(|| vec!["scale".into(), "scale-ar1".into(), "persistence".into()])
        .iter()
        .map(|m| m.parse())
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let cs: Vec<data::Country> = countries.into_iter().map(|c| c.inner).collect();
    let nat = national.into_iter().map(|(k, v)| (k, v.inner)).collect();
    let spec = HoldoutSpec { cut_label: cut, horizon };
    let mut cfg = HoldoutConfig::new(seed);
    cfg.n_mc = n_mc;
    let report = py
        .detach(|| validation::run_holdout(&cs, &nat, &spec, &methods, &cfg))
        .map_err(err)?;
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

/// Correlation matrix estimate from a region x period error table with
/// `None` for missing cells. Returns (matrix, smallest eigenvalue, T-bar).
#[pyfunction]
#[pyo3(signature = (region_ids, rows, method))]
fn estimate_correlation(
    region_ids: Vec<String>,
    rows: Vec<Vec<Option<f64>>>,
    method: u8,
) -> PyResult<(Vec<Vec<f64>>, f64, f64)> {
    let panel = NormalizedErrorPanel::from_rows(region_ids, &rows, Phase::III).map_err(err)?;
    let est = correlation::estimate_a(&panel, method).map_err(err)?;
    let n = est.a.nrows();
    let m = (0..n).map(|i| (0..n).map(|j| est.a[(i, j)]).collect()).collect();
    Ok((m, est.pd_certificate, est.t_bar))
}

#[pymodule]
fn pysubtfr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SubtfrError", m.py().get_type::<SubtfrError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyCountry>()?;
    m.add_class::<PyTrajectorySet>()?;
    m.add_class::<PyParams>()?;
    m.add_function(wrap_pyfunction!(load_series, m)?)?;
    m.add_function(wrap_pyfunction!(load_trajectories, m)?)?;
    m.add_function(wrap_pyfunction!(derive_phi_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(country_average, m)?)?;
    m.add_function(wrap_pyfunction!(mae_bias, m)?)?;
    m.add_function(wrap_pyfunction!(crps, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(run_holdout, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_correlation, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_wrappers() {
        let (phi, sigma) = derive_phi_sigma(0.09475, 0.03678).unwrap();
        assert!((phi - 0.92464).abs() < 5e-5 && (sigma - 0.04522).abs() < 5e-5);
        assert_eq!(mae_bias(vec![1.5, 1.5], vec![Some(2.0), Some(1.0)]).unwrap(), (0.5, 0.0));
        assert_eq!(crps(vec![2.0; 3], 2.5, 100, 0).unwrap(), -0.5);
        assert!(layout("wide").is_ok());
    }
}
