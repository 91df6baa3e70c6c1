//! Command-line front end.
//!
//! Settings resolve as flag, then config file, then built-in default. Each
//! run writes a manifest next to its outputs recording the resolved
//! settings hash, seed and input digests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::calibration::{calibrate, params_from_global, GlobalAr1};
use crate::correlation::{
    estimate_a, load_error_panel, save_matrix, split_by_tfr, CorrelationEstimate, EstimateSidecar,
    NormalizedErrorPanel, Stratum, DEFAULT_TFR_THRESHOLD,
};
use crate::data::{
    load_series, load_trajectory_sets, save_trajectories, write_json, Country, ScaleAr1Params, SeriesLayout,
};
use crate::error::{Error, Result};
use crate::loess::DEFAULT_SPAN;
use crate::projection::{project, quantile_summary, Method, ProjectionConfig, QuantileRow, DEFAULT_LOWER_BOUND};
use crate::validation::{run_holdout, HoldoutConfig, HoldoutSpec, DEFAULT_N_MC};

const DEFAULT_SEED: u64 = 1;

#[derive(Parser, Debug)]
#[command(name = "subtfr", version, about = "Subnational TFR projection from national trajectory ensembles")]
struct Cli {
    /// Flat JSON file of default settings
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overwrite existing output files
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Calibrate Scale-AR(1) parameters from a series file
    #[command(name = "estimate-ar1")]
    EstimateAr1(EstimateArgs),
    /// Project regional trajectories from national ones
    Project(ProjectArgs),
    /// Estimate between-region error correlation matrices
    Correlate(CorrelateArgs),
    /// Score methods on a holdout window
    Validate(ValidateArgs),
    /// Write per-region fan-chart tables (and optional SVG)
    #[command(name = "plot-data")]
    PlotData(PlotArgs),
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    #[arg(long)]
    span: Option<f64>,
    /// long or wide
    #[arg(long)]
    layout: Option<String>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[arg(long)]
    method: Option<String>,
    #[arg(long, value_name = "FILE")]
    series: PathBuf,
    #[arg(long, value_name = "FILE")]
    national_traj: PathBuf,
    #[arg(long, value_name = "FILE")]
    params: Option<PathBuf>,
    /// Global persistence used when no parameter file is given
    #[arg(long)]
    phi: Option<f64>,
    /// Global innovation scale used when no parameter file is given
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lower_bound: Option<f64>,
    /// Expected ensemble size; must match the national file
    #[arg(long)]
    n_traj: Option<usize>,
    #[arg(long)]
    layout: Option<String>,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct CorrelateArgs {
    #[arg(long, value_name = "FILE")]
    errors: PathBuf,
    /// 1..11 or "all"
    #[arg(long)]
    method: String,
    /// Estimate separately for periods with national TFR above and below the threshold
    #[arg(long, requires = "series")]
    tfr_split: bool,
    /// Series file supplying national TFR for --tfr-split
    #[arg(long, value_name = "FILE")]
    series: Option<PathBuf>,
    #[arg(long)]
    tfr_threshold: Option<f64>,
    #[arg(long)]
    layout: Option<String>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long, value_name = "FILE")]
    series: PathBuf,
    #[arg(long, value_name = "FILE")]
    national_traj: PathBuf,
    /// Last period label kept for fitting
    #[arg(long)]
    cut: String,
    #[arg(long)]
    horizon: usize,
    /// Comma-separated list
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_mc: Option<usize>,
    #[arg(long)]
    span: Option<f64>,
    #[arg(long)]
    lower_bound: Option<f64>,
    #[arg(long)]
    layout: Option<String>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Quantile summary written by `project`
    #[arg(long, value_name = "FILE")]
    quantiles: PathBuf,
    #[arg(long, value_name = "FILE")]
    series: PathBuf,
    /// Comma-separated region ids; default is every region in the summary
    #[arg(long)]
    regions: Option<String>,
    #[arg(long)]
    svg: bool,
    #[arg(long)]
    layout: Option<String>,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let kind = match e.exit_code() {
                2 => "usage",
                4 => "numeric",
                _ => "data",
            };
            eprintln!("{}", json!({ "error": kind, "message": e.to_string() }));
            e.exit_code()
        }
    }
}

/// Flat key/value configuration.
#[derive(Debug, Default)]
struct Config {
    values: BTreeMap<String, Value>,
}

const CONFIG_KEYS: &[&str] = &[
    "seed", "span", "layout", "phi", "sigma", "lower_bound", "n_traj", "n_mc", "methods", "method",
    "tfr_threshold",
];

impl Config {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Config::default()) };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let values: BTreeMap<String, Value> = serde_json::from_str(&text)
            .map_err(|e| Error::Usage(format!("{}: config must be a flat JSON object: {e}", path.display())))?;
        for (k, v) in &values {
            if !CONFIG_KEYS.contains(&k.as_str()) {
                return Err(Error::Usage(format!("{}: unknown config key {k:?}", path.display())));
            }
            if v.is_object() || v.is_array() {
                return Err(Error::Usage(format!("{}: config key {k:?} must be a scalar", path.display())));
            }
        }
        Ok(Config { values })
    }

    fn f64(&self, key: &str, flag: Option<f64>, default: f64) -> Result<f64> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::Usage(format!("config key {key:?} must be a number"))),
        }
    }

    fn u64(&self, key: &str, flag: Option<u64>) -> Result<Option<u64>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| Error::Usage(format!("config key {key:?} must be a non-negative integer"))),
        }
    }

    fn string(&self, key: &str, flag: Option<&str>) -> Result<Option<String>> {
        if let Some(s) = flag {
            return Ok(Some(s.to_string()));
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(Error::Usage(format!("config key {key:?} must be a string"))),
        }
    }

    fn layout(&self, flag: Option<&str>) -> Result<SeriesLayout> {
        self.string("layout", flag)?
            .map_or(Ok(SeriesLayout::Long), |s| s.parse())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Record written alongside every run's outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub settings: BTreeMap<String, Value>,
    pub input_digests: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub timestamp: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn file_digest(path: &Path) -> Result<InputDigest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex(&Sha256::digest(&bytes)),
    })
}

/// `SOURCE_DATE_EPOCH` pins the timestamp for reproducible manifests.
fn timestamp() -> String {
    let t = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<u64>().ok())
        .map(|s| UNIX_EPOCH + Duration::from_secs(s))
        .unwrap_or_else(SystemTime::now);
    humantime::format_rfc3339_seconds(t).to_string()
}

struct Run {
    subcommand: &'static str,
    seed: Option<u64>,
    settings: BTreeMap<String, Value>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    force: bool,
}

impl Run {
    fn new(subcommand: &'static str, force: bool) -> Self {
        Run {
            subcommand,
            seed: None,
            settings: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            force,
        }
    }

    fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.settings.insert(key.to_string(), value.into());
    }

    /// Claims an output path, refusing to clobber without --force.
    fn output(&mut self, path: PathBuf) -> Result<PathBuf> {
        if path.exists() && !self.force {
            return Err(Error::file(&path, "file exists; pass --force to overwrite"));
        }
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn write_manifest(self, path: &Path) -> Result<()> {
        let digests = self.inputs.iter().map(|p| file_digest(p)).collect::<Result<Vec<_>>>()?;
        let canonical = serde_json::to_string(&self.settings).expect("settings serialize");
        let manifest = RunManifest {
            subcommand: self.subcommand.to_string(),
            config_hash: hex(&Sha256::digest(canonical.as_bytes())),
            seed: self.seed,
            settings: self.settings,
            input_digests: digests,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: timestamp(),
        };
        write_json(&manifest, path, true)
    }
}

/// Manifest path for a single-file output: `<stem>.manifest.json` beside it.
fn manifest_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn warn(msg: impl std::fmt::Display) {
    eprintln!("warning: {msg}");
}

fn run(cli: Cli) -> Result<()> {
    let config = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::EstimateAr1(a) => estimate_ar1(a, &config, cli.force),
        Command::Project(a) => project_cmd(a, &config, cli.force),
        Command::Correlate(a) => correlate(a, &config, cli.force),
        Command::Validate(a) => validate(a, &config, cli.force),
        Command::PlotData(a) => plot_data(a, &config, cli.force),
    }
}

fn estimate_ar1(a: EstimateArgs, config: &Config, force: bool) -> Result<()> {
    let mut run = Run::new("estimate-ar1", force);
    let span = config.f64("span", a.span, DEFAULT_SPAN)?;
    let layout = config.layout(a.layout.as_deref())?;
    run.set("span", span);
    run.set("layout", layout_name(layout));
    run.inputs.push(a.input.clone());
    ensure_parent(&a.out)?;
    let out = run.output(a.out.clone())?;

    let countries = load_series(&a.input, layout)?;
    let params = calibrate(&countries, span)?;
    write_json(&params, &out, true)?;
    run.write_manifest(&manifest_for(&a.out))
}

fn layout_name(l: SeriesLayout) -> &'static str {
    match l {
        SeriesLayout::Long => "long",
        SeriesLayout::Wide => "wide",
    }
}

fn project_cmd(a: ProjectArgs, config: &Config, force: bool) -> Result<()> {
    let mut run = Run::new("project", force);
    let method: Method = config
        .string("method", a.method.as_deref())?
        .ok_or_else(|| Error::Usage("--method is required (scale, scale-ar1 or persistence)".into()))?
        .parse()?;
    let seed = config.u64("seed", a.seed)?.unwrap_or(DEFAULT_SEED);
    let lower_bound = config.f64("lower_bound", a.lower_bound, DEFAULT_LOWER_BOUND)?;
    let n_traj = config.u64("n_traj", a.n_traj.map(|n| n as u64))?.map(|n| n as usize);
    let layout = config.layout(a.layout.as_deref())?;
    run.seed = Some(seed);
    run.set("method", method.name());
    run.set("seed", seed);
    run.set("lower_bound", lower_bound);
    run.set("layout", layout_name(layout));
    if let Some(n) = n_traj {
        run.set("n_traj", n);
    }
    run.inputs.push(a.series.clone());
    run.inputs.push(a.national_traj.clone());

    let countries = load_series(&a.series, layout)?;
    let national = load_trajectory_sets(&a.national_traj)?;

    let params = match (method, &a.params) {
        (Method::ScaleAr1, Some(p)) => {
            run.inputs.push(p.clone());
            Some(ScaleAr1Params::load(p)?)
        }
        (Method::ScaleAr1, None) => {
            let global = GlobalAr1 {
                phi: config.f64("phi", a.phi, ScaleAr1Params::DEFAULT_PHI)?,
                sigma: config.f64("sigma", a.sigma, ScaleAr1Params::DEFAULT_SIGMA)?,
            };
            run.set("phi", global.phi);
            run.set("sigma", global.sigma);
            let p = params_from_global(global, &countries);
            p.validate().map_err(|e| Error::Usage(e.to_string()))?;
            Some(p)
        }
        (m, Some(_)) => {
            warn(format!("--params is ignored by the {m} method"));
            None
        }
        (_, None) => None,
    };

    ensure_dir(&a.out_dir)?;
    let mut projected = Vec::new();
    for c in &countries {
        let Some(nat) = national.get(c.country_id()) else {
            warn(format!("{}: no national trajectories; country skipped", c.country_id()));
            continue;
        };
        let cfg = ProjectionConfig {
            method,
            params: params.clone(),
            lower_bound,
            seed,
            n_traj,
        };
        projected.push((c.country_id().to_string(), project(c, nat, &cfg)?));
    }
    if projected.is_empty() {
        return Err(Error::Data("no country in the series file has national trajectories".into()));
    }

    let quantiles_path = run.output(a.out_dir.join("quantiles.csv"))?;
    let mut rows = Vec::new();
    for (country, ensembles) in &projected {
        let dir = a.out_dir.join(country);
        ensure_dir(&dir)?;
        for (region, set) in ensembles {
            let path = run.output(dir.join(format!("{region}.csv")))?;
            save_trajectories(set, &path, true)?;
            rows.extend(quantile_summary(set));
        }
    }
    write_quantiles(&rows, &quantiles_path)?;
    run.write_manifest(&a.out_dir.join("manifest.json"))
}

fn write_quantiles(rows: &[QuantileRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::file(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_quantiles(path: &Path) -> Result<Vec<QuantileRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::file(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::file(path, e.to_string())))
        .collect()
}

/// The country whose regions include every region of the panel.
fn country_of_panel<'a>(panel: &NormalizedErrorPanel, countries: &'a [Country]) -> Result<&'a Country> {
    countries
        .iter()
        .find(|c| panel.region_ids().iter().all(|r| c.region(r).is_some()))
        .ok_or_else(|| Error::Data("no country in the series file contains every region of the error panel".into()))
}

fn correlate(a: CorrelateArgs, config: &Config, force: bool) -> Result<()> {
    let mut run = Run::new("correlate", force);
    let methods: Vec<u8> = match a.method.trim() {
        "all" => (1..=11).collect(),
        s => vec![s
            .parse::<u8>()
            .map_err(|_| Error::Usage(format!("--method must be 1..11 or all, got {s:?}")))?],
    };
    run.set("method", a.method.trim());
    run.inputs.push(a.errors.clone());
    let panel = load_error_panel(&a.errors)?;

    let mut strata: Vec<(&str, NormalizedErrorPanel)> = Vec::new();
    if a.tfr_split {
        let series = a.series.as_ref().expect("clap enforces --series");
        let layout = config.layout(a.layout.as_deref())?;
        let threshold = config.f64("tfr_threshold", a.tfr_threshold, DEFAULT_TFR_THRESHOLD)?;
        run.set("tfr_threshold", threshold);
        run.set("layout", layout_name(layout));
        run.inputs.push(series.clone());
        let countries = load_series(series, layout)?;
        let country = country_of_panel(&panel, &countries)?;
        let (high, low) = split_by_tfr(&panel, country, threshold);
        strata.push(("high", high));
        strata.push(("low", low));
    } else {
        strata.push(("", panel));
    }

    ensure_parent(&a.out)?;
    let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = a.out.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    let single = methods.len() == 1 && strata.len() == 1;
    for (tag, p) in &strata {
        for &m in &methods {
            let mut name = stem.clone();
            if methods.len() > 1 {
                name.push_str(&format!("_m{m}"));
            }
            if !tag.is_empty() {
                name.push('_');
                name.push_str(tag);
            }
            let matrix_path = if single { a.out.clone() } else { a.out.with_file_name(format!("{name}.{ext}")) };
            let matrix_path = run.output(matrix_path)?;
            let sidecar_path = run.output(a.out.with_file_name(format!("{name}.json")))?;
            let mut est: CorrelationEstimate = estimate_a(p, m)?;
            if !tag.is_empty() {
                est.stratum = if *tag == "high" { Stratum::High } else { Stratum::Low };
            }
            save_matrix(&est, &matrix_path)?;
            write_json(&EstimateSidecar::from(&est), &sidecar_path, true)?;
        }
    }
    run.write_manifest(&manifest_for(&a.out))
}

fn validate(a: ValidateArgs, config: &Config, force: bool) -> Result<()> {
    let mut run = Run::new("validate", force);
    let methods: Vec<Method> = config
        .string("methods", a.methods.as_deref())?
        .unwrap_or_else(|| "scale,scale-ar1,persistence".into())
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    let seed = config.u64("seed", a.seed)?.unwrap_or(DEFAULT_SEED);
    let n_mc = config.u64("n_mc", a.n_mc.map(|n| n as u64))?.map_or(DEFAULT_N_MC, |n| n as usize);
    let span = config.f64("span", a.span, DEFAULT_SPAN)?;
    let lower_bound = config.f64("lower_bound", a.lower_bound, DEFAULT_LOWER_BOUND)?;
    let layout = config.layout(a.layout.as_deref())?;
    if n_mc == 0 {
        return Err(Error::Usage("--n-mc must be positive".into()));
    }
    run.seed = Some(seed);
    run.set("methods", methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","));
    run.set("seed", seed);
    run.set("n_mc", n_mc);
    run.set("span", span);
    run.set("lower_bound", lower_bound);
    run.set("cut", a.cut.clone());
    run.set("horizon", a.horizon);
    run.set("layout", layout_name(layout));
    run.inputs.push(a.series.clone());
    run.inputs.push(a.national_traj.clone());
    ensure_parent(&a.out)?;
    let out = run.output(a.out.clone())?;

    let countries = load_series(&a.series, layout)?;
    let national = load_trajectory_sets(&a.national_traj)?;
    let spec = HoldoutSpec {
        cut_label: a.cut.clone(),
        horizon: a.horizon,
    };
    let cfg = HoldoutConfig {
        seed,
        n_mc,
        span,
        lower_bound,
    };
    let report = run_holdout(&countries, &national, &spec, &methods, &cfg)?;
    for r in &report.skipped_regions {
        warn(format!("{r}: not observed at the cut; excluded"));
    }
    write_json(&report, &out, true)?;
    run.write_manifest(&manifest_for(&a.out))
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn plot_data(a: PlotArgs, config: &Config, force: bool) -> Result<()> {
    let mut run = Run::new("plot-data", force);
    let layout = config.layout(a.layout.as_deref())?;
    run.set("layout", layout_name(layout));
    run.set("svg", a.svg);
    run.inputs.push(a.quantiles.clone());
    run.inputs.push(a.series.clone());
    let rows = read_quantiles(&a.quantiles)?;
    if rows.is_empty() {
        return Err(Error::file(&a.quantiles, "no quantile rows"));
    }
    let countries = load_series(&a.series, layout)?;

    let mut by_region: BTreeMap<&str, Vec<&QuantileRow>> = BTreeMap::new();
    for r in &rows {
        by_region.entry(r.geography_id.as_str()).or_default().push(r);
    }
    let wanted: Vec<String> = match &a.regions {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => by_region.keys().map(|s| s.to_string()).collect(),
    };
    run.set("regions", wanted.join(","));

    ensure_dir(&a.out_dir)?;
    let mut written = 0;
    for id in &wanted {
        let series = countries.iter().find_map(|c| c.region(id));
        let (Some(series), Some(q)) = (series, by_region.get(id.as_str())) else {
            warn(format!("{id}: no observed series or quantile summary; skipped"));
            continue;
        };
        let path = run.output(a.out_dir.join(format!("{id}.csv")))?;
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::file(&path, e.to_string()))?;
        let wrap = |e: csv::Error| Error::file(&path, e.to_string());
        w.write_record(["period_label", "observed", "median", "q10", "q90", "q025", "q975"]).map_err(wrap)?;
        for (p, v) in series.periods().iter().zip(series.values()) {
            w.write_record([p.label.as_str(), &fmt_cell(*v), "", "", "", "", ""]).map_err(wrap)?;
        }
        for r in q {
            w.write_record([
                r.period_label.as_str(),
                "",
                &r.median.to_string(),
                &r.q10.to_string(),
                &r.q90.to_string(),
                &r.q025.to_string(),
                &r.q975.to_string(),
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        if a.svg {
            let svg_path = run.output(a.out_dir.join(format!("{id}.svg")))?;
            let observed: Vec<f64> = series.values().iter().map(|v| v.unwrap_or(f64::NAN)).collect();
            fs::write(&svg_path, fan_chart_svg(id, &observed, q)).map_err(|e| Error::io(&svg_path, e))?;
        }
        written += 1;
    }
    if written == 0 {
        return Err(Error::Data("none of the requested regions could be plotted".into()));
    }
    run.write_manifest(&a.out_dir.join("manifest.json"))
}

/// Minimal fan chart: 95% and 80% bands, median, and the observed series on
/// a shared x axis of period positions.
fn fan_chart_svg(title: &str, observed: &[f64], q: &[&QuantileRow]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let n = observed.len() + q.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in observed.iter().filter(|v| v.is_finite()).chain(q.iter().flat_map(|r| [&r.q025, &r.q975])) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n.max(2) - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let offset = observed.len();
    let band = |lower: fn(&QuantileRow) -> f64, upper: fn(&QuantileRow) -> f64| {
        let mut pts: Vec<String> = q.iter().enumerate().map(|(k, r)| format!("{:.2},{:.2}", x(offset + k), y(upper(r)))).collect();
        pts.extend(q.iter().enumerate().rev().map(|(k, r)| format!("{:.2},{:.2}", x(offset + k), y(lower(r)))));
        pts.join(" ")
    };
    let line = |pts: Vec<(usize, f64)>| {
        pts.iter()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.2},{:.2}", x(*i), y(*v)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let observed_pts = line(observed.iter().copied().enumerate().collect());
    let median_pts = line(q.iter().enumerate().map(|(k, r)| (offset + k, r.median)).collect());
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <title>{title}</title>\n\
         <text x=\"{pad}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{title}  TFR {lo:.2} to {hi:.2}</text>\n\
         <polygon points=\"{b95}\" fill=\"#c6dbef\"/>\n\
         <polygon points=\"{b80}\" fill=\"#6baed6\"/>\n\
         <polyline points=\"{median_pts}\" fill=\"none\" stroke=\"#08306b\" stroke-width=\"2\"/>\n\
         <polyline points=\"{observed_pts}\" fill=\"none\" stroke=\"#000\" stroke-width=\"1.5\"/>\n\
         </svg>\n",
        b95 = band(|r| r.q025, |r| r.q975),
        b80 = band(|r| r.q10, |r| r.q90),
    )
}
