//! Domain containers and their delimited-text / JSON persistence.
//!
//! Periods are five-year bins identified by an ordinal index; labels are
//! carried along for output but only the ordinal defines ordering inside a
//! container. Across containers (series vs. trajectory files) periods are
//! matched by label.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PeriodIndex {
    pub index: i32,
    pub label: String,
}

impl PeriodIndex {
    pub fn new(index: i32, label: impl Into<String>) -> Self {
        PeriodIndex {
            index,
            label: label.into(),
        }
    }
}

/// Builds a consecutive axis from labels, starting at ordinal `first`.
pub fn period_axis<S: AsRef<str>>(first: i32, labels: &[S]) -> Vec<PeriodIndex> {
    labels
        .iter()
        .enumerate()
        .map(|(k, l)| PeriodIndex::new(first + k as i32, l.as_ref()))
        .collect()
}

fn check_axis(periods: &[PeriodIndex]) -> Result<()> {
    let mut seen = HashSet::new();
    for w in periods.windows(2) {
        if w[1].index != w[0].index + 1 {
            return Err(Error::Data(format!(
                "period indices {} and {} are not consecutive",
                w[0].index, w[1].index
            )));
        }
    }
    for p in periods {
        if !seen.insert(p.label.as_str()) {
            return Err(Error::Data(format!("duplicate period label {:?}", p.label)));
        }
    }
    Ok(())
}

/// Observed TFR of one geography over a period axis.
///
/// Present values are strictly positive and form one contiguous block;
/// missing cells can only precede or follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct TfrSeries {
    geography_id: String,
    periods: Vec<PeriodIndex>,
    values: Vec<Option<f64>>,
}

impl TfrSeries {
    pub fn new(
        geography_id: impl Into<String>,
        periods: Vec<PeriodIndex>,
        values: Vec<Option<f64>>,
    ) -> Result<Self> {
        let geography_id = geography_id.into();
        if periods.len() != values.len() {
            return Err(Error::Data(format!(
                "{geography_id}: {} periods but {} values",
                periods.len(),
                values.len()
            )));
        }
        check_axis(&periods)?;
        for (p, v) in periods.iter().zip(&values) {
            if let Some(v) = v {
                if !(v.is_finite() && *v > 0.0) {
                    return Err(Error::Data(format!(
                        "{geography_id}: non-positive TFR {v} at {}",
                        p.label
                    )));
                }
            }
        }
        let first = values.iter().position(Option::is_some);
        let last = values.iter().rposition(Option::is_some);
        if let (Some(a), Some(b)) = (first, last) {
            if let Some(k) = (a..=b).find(|&k| values[k].is_none()) {
                return Err(Error::Data(format!(
                    "{geography_id}: interior gap at period {}",
                    periods[k].label
                )));
            }
        }
        Ok(TfrSeries {
            geography_id,
            periods,
            values,
        })
    }

    /// Convenience constructor for a fully observed series.
    pub fn from_values(
        geography_id: impl Into<String>,
        periods: Vec<PeriodIndex>,
        values: &[f64],
    ) -> Result<Self> {
        Self::new(geography_id, periods, values.iter().copied().map(Some).collect())
    }

    pub fn geography_id(&self) -> &str {
        &self.geography_id
    }

    pub fn periods(&self) -> &[PeriodIndex] {
        &self.periods
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, pos: usize) -> Option<f64> {
        self.values.get(pos).copied().flatten()
    }

    pub fn position_of(&self, label: &str) -> Option<usize> {
        self.periods.iter().position(|p| p.label == label)
    }

    pub fn leading_missing(&self) -> usize {
        self.values.iter().take_while(|v| v.is_none()).count()
    }

    /// Position and value of the last observed period.
    pub fn last_observed(&self) -> Option<(usize, f64)> {
        let pos = self.values.iter().rposition(Option::is_some)?;
        Some((pos, self.values[pos].unwrap()))
    }

    /// Series restricted to positions `0..=pos`.
    pub fn truncated(&self, pos: usize) -> TfrSeries {
        let end = (pos + 1).min(self.values.len());
        TfrSeries {
            geography_id: self.geography_id.clone(),
            periods: self.periods[..end].to_vec(),
            values: self.values[..end].to_vec(),
        }
    }
}

/// A country: national series plus its regions on the same period axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Country {
    country_id: String,
    national: TfrSeries,
    regions: Vec<TfrSeries>,
}

impl Country {
    pub fn new(
        country_id: impl Into<String>,
        national: TfrSeries,
        regions: Vec<TfrSeries>,
    ) -> Result<Self> {
        let country_id = country_id.into();
        if regions.is_empty() {
            return Err(Error::Data(format!("{country_id}: country has no regions")));
        }
        if national.last_observed().is_none() {
            return Err(Error::Data(format!(
                "{country_id}: national series has no observed values"
            )));
        }
        let mut ids = HashSet::new();
        for r in &regions {
            if r.periods != national.periods {
                return Err(Error::Data(format!(
                    "{country_id}: region {} is not aligned with the national period axis",
                    r.geography_id
                )));
            }
            if !ids.insert(r.geography_id.as_str()) {
                return Err(Error::Data(format!(
                    "{country_id}: duplicate region {}",
                    r.geography_id
                )));
            }
        }
        Ok(Country {
            country_id,
            national,
            regions,
        })
    }

    pub fn country_id(&self) -> &str {
        &self.country_id
    }

    pub fn national(&self) -> &TfrSeries {
        &self.national
    }

    pub fn regions(&self) -> &[TfrSeries] {
        &self.regions
    }

    pub fn region(&self, region_id: &str) -> Option<&TfrSeries> {
        self.regions.iter().find(|r| r.geography_id == region_id)
    }

    /// Number of regions, R_c.
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn periods(&self) -> &[PeriodIndex] {
        &self.national.periods
    }

    /// Position of the last observed national period (the present, P).
    pub fn present(&self) -> usize {
        self.national.last_observed().map(|(p, _)| p).unwrap_or(0)
    }

    /// Latest ratio of regional to national TFR over periods where both are
    /// observed, with the period position it was taken at.
    pub fn last_scale_factor(&self, region_id: &str) -> Option<(usize, f64)> {
        let region = self.region(region_id)?;
        (0..region.len()).rev().find_map(|pos| {
            match (region.get(pos), self.national.get(pos)) {
                (Some(r), Some(n)) => Some((pos, r / n)),
                _ => None,
            }
        })
    }

    /// Copy of the country with every series cut after position `pos`.
    pub fn truncated(&self, pos: usize) -> Result<Country> {
        Country::new(
            self.country_id.clone(),
            self.national.truncated(pos),
            self.regions.iter().map(|r| r.truncated(pos)).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub method: String,
}

/// Ensemble of simulated TFR paths, stored row-major (trajectory × period).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    geography_id: String,
    horizon: Vec<PeriodIndex>,
    n_traj: usize,
    paths: Vec<f64>,
    seed_record: Option<SeedRecord>,
}

impl TrajectorySet {
    pub fn new(
        geography_id: impl Into<String>,
        horizon: Vec<PeriodIndex>,
        n_traj: usize,
        paths: Vec<f64>,
        seed_record: Option<SeedRecord>,
    ) -> Result<Self> {
        let geography_id = geography_id.into();
        if n_traj == 0 {
            return Err(Error::Data(format!("{geography_id}: no trajectories")));
        }
        if paths.len() != n_traj * horizon.len() {
            return Err(Error::Data(format!(
                "{geography_id}: expected {}x{} values, got {}",
                n_traj,
                horizon.len(),
                paths.len()
            )));
        }
        check_axis(&horizon)?;
        if let Some(v) = paths.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Data(format!(
                "{geography_id}: non-positive trajectory value {v}"
            )));
        }
        Ok(TrajectorySet {
            geography_id,
            horizon,
            n_traj,
            paths,
            seed_record,
        })
    }

    pub fn from_rows(
        geography_id: impl Into<String>,
        horizon: Vec<PeriodIndex>,
        rows: &[Vec<f64>],
    ) -> Result<Self> {
        let paths: Vec<f64> = rows.iter().flatten().copied().collect();
        if rows.iter().any(|r| r.len() != horizon.len()) {
            return Err(Error::Data("ragged trajectory rows".into()));
        }
        Self::new(geography_id, horizon, rows.len(), paths, None)
    }

    pub fn geography_id(&self) -> &str {
        &self.geography_id
    }

    pub fn horizon(&self) -> &[PeriodIndex] {
        &self.horizon
    }

    pub fn n_traj(&self) -> usize {
        self.n_traj
    }

    pub fn n_periods(&self) -> usize {
        self.horizon.len()
    }

    pub fn seed_record(&self) -> Option<&SeedRecord> {
        self.seed_record.as_ref()
    }

    pub fn paths(&self) -> &[f64] {
        &self.paths
    }

    pub fn path(&self, traj: usize) -> &[f64] {
        let h = self.horizon.len();
        &self.paths[traj * h..(traj + 1) * h]
    }

    pub fn value(&self, traj: usize, period: usize) -> f64 {
        self.paths[traj * self.horizon.len() + period]
    }

    /// All trajectory values at one horizon position.
    pub fn column(&self, period: usize) -> Vec<f64> {
        (0..self.n_traj).map(|i| self.value(i, period)).collect()
    }

    pub fn position_of(&self, label: &str) -> Option<usize> {
        self.horizon.iter().position(|p| p.label == label)
    }

    /// Restricts the set to the given horizon labels, in the given order.
    pub fn select_periods(&self, labels: &[&str]) -> Result<TrajectorySet> {
        let cols = labels
            .iter()
            .map(|l| {
                self.position_of(l).ok_or_else(|| {
                    Error::Data(format!(
                        "{}: trajectory set has no period {l:?}",
                        self.geography_id
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut paths = Vec::with_capacity(self.n_traj * cols.len());
        for i in 0..self.n_traj {
            paths.extend(cols.iter().map(|&c| self.value(i, c)));
        }
        let first = self.horizon.get(cols.first().copied().unwrap_or(0)).map_or(0, |p| p.index);
        Ok(TrajectorySet {
            geography_id: self.geography_id.clone(),
            horizon: period_axis(first, labels),
            n_traj: self.n_traj,
            paths,
            seed_record: self.seed_record.clone(),
        })
    }

    pub fn with_seed_record(mut self, record: SeedRecord) -> Self {
        self.seed_record = Some(record);
        self
    }
}

/// Provenance of a calibrated parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub e_abs_alpha: f64,
    pub e_abs_delta: f64,
    pub tfr_at_min: f64,
    pub span: f64,
    pub n_points: usize,
}

/// Scale-AR(1) parameters: global persistence and innovation scale, plus
/// per-country innovation scales and per-region starting scale factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleAr1Params {
    pub phi: f64,
    pub sigma: f64,
    #[serde(default)]
    pub sigma_c: BTreeMap<String, f64>,
    #[serde(default)]
    pub alpha_init: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<MomentSummary>,
}

impl ScaleAr1Params {
    /// Global values used when no calibration is supplied.
    pub const DEFAULT_PHI: f64 = 0.925;
    pub const DEFAULT_SIGMA: f64 = 0.0452;

    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(Error::Data(format!("phi = {} outside (0, 1)", self.phi)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Data(format!("sigma = {} must be positive", self.sigma)));
        }
        for (c, s) in &self.sigma_c {
            if !(*s >= 0.0 && *s <= self.sigma * (1.0 + 1e-12)) {
                return Err(Error::Data(format!(
                    "sigma_c[{c}] = {s} must lie in [0, sigma]"
                )));
            }
        }
        for (r, a) in &self.alpha_init {
            if !(*a > 0.0 && a.is_finite()) {
                return Err(Error::Data(format!("alpha_init[{r}] = {a} must be positive")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: ScaleAr1Params = serde_json::from_str(&text)
            .map_err(|e| Error::file(path, format!("invalid parameter file: {e}")))?;
        params.validate()?;
        Ok(params)
    }
}

/// Layout of a series file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesLayout {
    /// `country_id,region_id,period_label,tfr`, one row per cell.
    Long,
    /// `country_id,region_id,<period>...`, one row per geography.
    Wide,
}

impl std::str::FromStr for SeriesLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long" => Ok(SeriesLayout::Long),
            "wide" => Ok(SeriesLayout::Wide),
            other => Err(Error::Usage(format!("unknown layout {other:?}"))),
        }
    }
}

fn is_national_marker(region_id: &str, country_id: &str) -> bool {
    region_id.is_empty() || region_id.eq_ignore_ascii_case("national") || region_id == country_id
}

fn parse_cell(path: &Path, row: usize, raw: &str) -> Result<Option<f64>> {
    let raw = raw.trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| Error::row(path, row, format!("cannot parse TFR value {raw:?}")))?;
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::row(path, row, format!("non-positive TFR value {v}")));
    }
    Ok(Some(v))
}

/// Orders labels by their leading integer (e.g. the start year of
/// "1990-1995") when every label has one, else by first appearance.
pub(crate) fn order_labels(labels: Vec<String>) -> Vec<String> {
    let key = |l: &str| -> Option<i64> {
        let digits: String = l.trim().chars().take_while(|c| c.is_ascii_digit()).collect();
        digits.parse().ok()
    };
    if labels.iter().all(|l| key(l).is_some()) {
        let mut labels = labels;
        labels.sort_by(|a, b| key(a).cmp(&key(b)).then_with(|| a.cmp(b)));
        labels
    } else {
        labels
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize);
    match (e.into_kind(), row) {
        (csv::ErrorKind::Io(io), _) => Error::io(path, io),
        (kind, Some(row)) => Error::row(path, row, format!("{kind:?}")),
        (kind, None) => Error::file(path, format!("{kind:?}")),
    }
}

fn column(path: &Path, headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::file(path, format!("missing column {name:?}")))
}

struct Cell {
    row: usize,
    country: String,
    region: Option<String>,
    label: String,
    value: Option<f64>,
}

/// Loads observed series for one or more countries.
pub fn load_series(path: &Path, layout: SeriesLayout) -> Result<Vec<Country>> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let ci = column(path, &headers, "country_id")?;
    let ri = column(path, &headers, "region_id")?;
    let mut cells = Vec::new();
    let mut labels: Vec<String> = Vec::new();

    match layout {
        SeriesLayout::Long => {
            let pi = column(path, &headers, "period_label")?;
            let ti = column(path, &headers, "tfr")?;
            for rec in reader.records() {
                let rec = rec.map_err(|e| csv_error(path, e))?;
                let row = rec.position().map_or(0, |p| p.line() as usize);
                let country = rec.get(ci).unwrap_or("").to_string();
                let region = rec.get(ri).unwrap_or("");
                let label = rec.get(pi).unwrap_or("").to_string();
                if country.is_empty() || label.is_empty() {
                    return Err(Error::row(path, row, "empty country_id or period_label"));
                }
                let value = parse_cell(path, row, rec.get(ti).unwrap_or(""))?;
                if !labels.contains(&label) {
                    labels.push(label.clone());
                }
                cells.push(Cell {
                    row,
                    region: (!is_national_marker(region, &country)).then(|| region.to_string()),
                    country,
                    label,
                    value,
                });
            }
        }
        SeriesLayout::Wide => {
            let period_cols: Vec<usize> = (0..headers.len()).filter(|&k| k != ci && k != ri).collect();
            labels = period_cols.iter().map(|&k| headers[k].to_string()).collect();
            for rec in reader.records() {
                let rec = rec.map_err(|e| csv_error(path, e))?;
                let row = rec.position().map_or(0, |p| p.line() as usize);
                let country = rec.get(ci).unwrap_or("").to_string();
                let region = rec.get(ri).unwrap_or("");
                if country.is_empty() {
                    return Err(Error::row(path, row, "empty country_id"));
                }
                for &k in &period_cols {
                    cells.push(Cell {
                        row,
                        region: (!is_national_marker(region, &country)).then(|| region.to_string()),
                        country: country.clone(),
                        label: headers[k].to_string(),
                        value: parse_cell(path, row, rec.get(k).unwrap_or(""))?,
                    });
                }
            }
        }
    }

    let labels = match layout {
        SeriesLayout::Long => order_labels(labels),
        SeriesLayout::Wide => labels,
    };
    let position: HashMap<&str, usize> =
        labels.iter().enumerate().map(|(k, l)| (l.as_str(), k)).collect();
    if position.len() != labels.len() {
        return Err(Error::file(path, "duplicate period column"));
    }

    // country -> geography(None = national) -> position -> (value, row)
    type Grid = BTreeMap<Option<String>, BTreeMap<usize, (Option<f64>, usize)>>;
    let mut countries: Vec<(String, Grid)> = Vec::new();
    for cell in cells {
        let pos = position[cell.label.as_str()];
        let idx = match countries.iter().position(|(c, _)| *c == cell.country) {
            Some(i) => i,
            None => {
                countries.push((cell.country.clone(), BTreeMap::new()));
                countries.len() - 1
            }
        };
        let grid = countries[idx].1.entry(cell.region.clone()).or_default();
        if grid.insert(pos, (cell.value, cell.row)).is_some() {
            return Err(Error::row(
                path,
                cell.row,
                format!(
                    "duplicate entry for {} at period {}",
                    cell.region.as_deref().unwrap_or(&cell.country),
                    cell.label
                ),
            ));
        }
    }

    let mut out = Vec::with_capacity(countries.len());
    let mut seen_regions: HashMap<String, String> = HashMap::new();
    for (country_id, mut grid) in countries {
        let national = grid.remove(&None).ok_or_else(|| {
            Error::file(path, format!("country {country_id} has no national series"))
        })?;
        let lo = *national.keys().next().unwrap();
        let hi = *national.keys().next_back().unwrap();
        let axis = period_axis(lo as i32, &labels[lo..=hi]);
        let series_of = |id: &str, cells: &BTreeMap<usize, (Option<f64>, usize)>| -> Result<TfrSeries> {
            let mut values = vec![None; hi - lo + 1];
            for (&pos, &(v, row)) in cells {
                if pos < lo || pos > hi {
                    return Err(Error::row(
                        path,
                        row,
                        format!("{id}: period {} outside the national axis", labels[pos]),
                    ));
                }
                values[pos - lo] = v;
            }
            TfrSeries::new(id, axis.clone(), values).map_err(|e| Error::file(path, e.to_string()))
        };
        let national = series_of(&country_id, &national)?;
        let mut regions = Vec::new();
        for (region_id, cells) in &grid {
            let region_id = region_id.as_deref().unwrap();
            if let Some(other) = seen_regions.insert(region_id.to_string(), country_id.clone()) {
                return Err(Error::file(
                    path,
                    format!("region id {region_id} appears in countries {other} and {country_id}"),
                ));
            }
            regions.push(series_of(region_id, cells)?);
        }
        out.push(Country::new(country_id, national, regions).map_err(|e| Error::file(path, e.to_string()))?);
    }
    if out.is_empty() {
        return Err(Error::file(path, "no data rows"));
    }
    Ok(out)
}

fn create_file(path: &Path, overwrite: bool) -> Result<fs::File> {
    if !overwrite && path.exists() {
        return Err(Error::file(path, "file exists; set the force flag to overwrite"));
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes countries in the long layout (missing cells written empty).
pub fn save_series(countries: &[Country], path: &Path, overwrite: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path, overwrite)?);
    let wrap = |e: csv::Error| csv_error(path, e);
    w.write_record(["country_id", "region_id", "period_label", "tfr"]).map_err(wrap)?;
    for c in countries {
        for s in std::iter::once(c.national()).chain(c.regions()) {
            let region = if s.geography_id() == c.country_id() { "" } else { s.geography_id() };
            for (p, v) in s.periods().iter().zip(s.values()) {
                w.write_record([c.country_id(), region, &p.label, &fmt_opt(*v)]).map_err(wrap)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads every geography's trajectory ensemble from one file.
pub fn load_trajectory_sets(path: &Path) -> Result<BTreeMap<String, TrajectorySet>> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let gi = column(path, &headers, "geography_id")?;
    let ti = column(path, &headers, "trajectory_id")?;
    let pi = column(path, &headers, "period_label")?;
    let vi = column(path, &headers, "tfr")?;

    struct Acc {
        traj_ids: Vec<String>,
        traj_pos: HashMap<String, usize>,
        labels: Vec<String>,
        cells: HashMap<(usize, String), f64>,
    }
    let mut groups: BTreeMap<String, Acc> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let geo = rec.get(gi).unwrap_or("").to_string();
        let traj = rec.get(ti).unwrap_or("").to_string();
        let label = rec.get(pi).unwrap_or("").to_string();
        let value = parse_cell(path, row, rec.get(vi).unwrap_or(""))?
            .ok_or_else(|| Error::row(path, row, "missing trajectory value"))?;
        let acc = groups.entry(geo).or_insert_with(|| Acc {
            traj_ids: Vec::new(),
            traj_pos: HashMap::new(),
            labels: Vec::new(),
            cells: HashMap::new(),
        });
        let t = match acc.traj_pos.get(&traj) {
            Some(&t) => t,
            None => {
                acc.traj_ids.push(traj.clone());
                acc.traj_pos.insert(traj.clone(), acc.traj_ids.len() - 1);
                acc.traj_ids.len() - 1
            }
        };
        if !acc.labels.contains(&label) {
            acc.labels.push(label.clone());
        }
        if acc.cells.insert((t, label.clone()), value).is_some() {
            return Err(Error::row(
                path,
                row,
                format!("duplicate value for trajectory {traj} at period {label}"),
            ));
        }
    }
    if groups.is_empty() {
        return Err(Error::file(path, "no trajectory rows"));
    }

    let mut out = BTreeMap::new();
    for (geo, acc) in groups {
        let labels = order_labels(acc.labels);
        let mut paths = Vec::with_capacity(acc.traj_ids.len() * labels.len());
        for (t, id) in acc.traj_ids.iter().enumerate() {
            for l in &labels {
                let v = acc.cells.get(&(t, l.clone())).ok_or_else(|| {
                    Error::file(
                        path,
                        format!("{geo}: trajectory {id} has no value for period {l}"),
                    )
                })?;
                paths.push(*v);
            }
        }
        let set = TrajectorySet::new(geo.clone(), period_axis(0, &labels), acc.traj_ids.len(), paths, None)
            .map_err(|e| Error::file(path, e.to_string()))?;
        out.insert(geo, set);
    }
    Ok(out)
}

/// Loads a single-geography trajectory file.
pub fn load_trajectories(path: &Path) -> Result<TrajectorySet> {
    let mut sets = load_trajectory_sets(path)?;
    if sets.len() != 1 {
        return Err(Error::file(
            path,
            format!("expected one geography, found {}", sets.len()),
        ));
    }
    Ok(sets.pop_first().unwrap().1)
}

/// Writes one or more ensembles to a single file. Values are written in
/// shortest round-trip form so loading reproduces them bit for bit.
pub fn save_trajectory_sets<'a>(
    sets: impl IntoIterator<Item = &'a TrajectorySet>,
    path: &Path,
    overwrite: bool,
) -> Result<()> {
    let sets: Vec<&TrajectorySet> = sets.into_iter().collect();
    if let Some(s) = sets.iter().find(|s| s.horizon.is_empty()) {
        return Err(Error::file(path, format!("{}: empty horizon", s.geography_id)));
    }
    let mut w = csv::Writer::from_writer(create_file(path, overwrite)?);
    let wrap = |e: csv::Error| csv_error(path, e);
    w.write_record(["geography_id", "trajectory_id", "period_label", "tfr"]).map_err(wrap)?;
    for s in sets {
        for i in 0..s.n_traj {
            let id = (i + 1).to_string();
            for (t, p) in s.horizon.iter().enumerate() {
                w.write_record([s.geography_id.as_str(), &id, &p.label, &s.value(i, t).to_string()])
                    .map_err(wrap)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_trajectories(set: &TrajectorySet, path: &Path, overwrite: bool) -> Result<()> {
    save_trajectory_sets([set], path, overwrite)
}

/// Serializes a value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path, overwrite: bool) -> Result<()> {
    use std::io::Write;
    let mut f = create_file(path, overwrite)?;
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::file(path, format!("serialization failed: {e}")))?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::file(path, format!("invalid JSON: {e}")))
}
