use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use subtfr::correlation::{save_error_panel, NormalizedErrorPanel, Phase};
use subtfr::data::{period_axis, save_series, save_trajectory_sets, TrajectorySet};
use subtfr::synthetic::{holdout_world, WorldSpec};

fn subtfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subtfr")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    series: PathBuf,
    /// National trajectories over the last three observed periods.
    holdout_traj: PathBuf,
    /// National trajectories beyond the last observed period.
    future_traj: PathBuf,
    cut: String,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let mut spec = WorldSpec::new(0.9, 0.05);
    spec.n_countries = 10;
    spec.regions_per_country = 4;
    spec.n_periods = 12;
    let world = holdout_world(&spec, 3, 100, 11).unwrap();
    let series = root.join("series.csv");
    save_series(&world.countries, &series, false).unwrap();
    let holdout_traj = root.join("holdout.csv");
    save_trajectory_sets(world.national_traj.values(), &holdout_traj, false).unwrap();
    let n = world.countries[0].periods().len();
    let future: Vec<TrajectorySet> = world
        .national_traj
        .values()
        .map(|t| {
            let labels: Vec<String> = (0..4).map(|k| (1950 + 5 * (n + k)).to_string()).collect();
            let paths: Vec<f64> = (0..t.n_traj()).flat_map(|i| {
                let p = t.path(i);
                vec![p[0], p[1], p[2], p[2]]
            }).collect();
            TrajectorySet::new(t.geography_id(), period_axis(0, &labels), t.n_traj(), paths, None).unwrap()
        })
        .collect();
    let future_traj = root.join("future.csv");
    save_trajectory_sets(&future, &future_traj, false).unwrap();
    Fixture {
        _dir: dir,
        root,
        series,
        holdout_traj,
        future_traj,
        cut: world.cut_label,
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn estimate_ar1_writes_params_and_manifest() {
    let f = fixture();
    let out = f.root.join("params.json");
    let o = subtfr(&["estimate-ar1", "--input", s(&f.series), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let p = json(&out);
    for key in ["phi", "sigma", "sigma_c", "alpha_init", "provenance"] {
        assert!(p.get(key).is_some(), "missing {key}");
    }
    assert!(p["provenance"]["tfr_at_min"].is_number());
    let m = json(&f.root.join("params.manifest.json"));
    assert_eq!(m["subcommand"], "estimate-ar1");
    assert_eq!(m["input_digests"].as_array().unwrap().len(), 1);
    assert_eq!(m["input_digests"][0]["sha256"].as_str().unwrap().len(), 64);

    // refuses to overwrite without --force
    let again = subtfr(&["estimate-ar1", "--input", s(&f.series), "--out", s(&out)]);
    assert_eq!(again.status.code(), Some(3));
    let forced = subtfr(&["--force", "estimate-ar1", "--input", s(&f.series), "--out", s(&out)]);
    assert!(forced.status.success());
}

#[test]
fn validate_requires_national_trajectories() {
    let f = fixture();
    let o = subtfr(&["validate", "--series", s(&f.series), "--cut", &f.cut, "--horizon", "3", "--out", "r.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--national-traj"));
}

#[test]
fn unknown_flag_and_subcommand() {
    let o = subtfr(&["project", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("usage"));
    assert_eq!(subtfr(&["nonsense"]).status.code(), Some(2));
    assert_eq!(subtfr(&["--help"]).status.code(), Some(0));
}

#[test]
fn validate_report_layout() {
    let f = fixture();
    let out = f.root.join("v").join("report.json");
    let o = subtfr(&[
        "validate", "--series", s(&f.series), "--national-traj", s(&f.holdout_traj), "--cut", &f.cut,
        "--horizon", "3", "--methods", "scale,scale-ar1,persistence", "--n-mc", "300", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out);
    assert_eq!(r["marginal_tfr"].as_array().unwrap().len(), 3);
    assert_eq!(r["average_tfr"].as_array().unwrap().len(), 3);
    let row = &r["marginal_tfr"][1];
    assert_eq!(row["method"], "scale-ar1");
    assert_eq!(row["n_values"], 10 * 4 * 3);
    for k in ["mae", "bias", "crps", "cov80", "cov95"] {
        assert!(row[k].is_number());
    }
    assert!(r["scale_ar1_parameters"]["phi"].is_number());
}

#[test]
fn validate_rejects_window_past_the_data() {
    let f = fixture();
    let o = subtfr(&[
        "validate", "--series", s(&f.series), "--national-traj", s(&f.holdout_traj), "--cut", &f.cut,
        "--horizon", "5", "--out", s(&f.root.join("r.json")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let err: Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "data");
}

#[test]
fn project_writes_regions_quantiles_and_manifest() {
    let f = fixture();
    let out = f.root.join("proj");
    let o = subtfr(&[
        "project", "--method", "scale-ar1", "--series", s(&f.series), "--national-traj", s(&f.future_traj),
        "--seed", "3", "--out-dir", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("C000").join("C000-r0.csv").exists());
    assert!(out.join("manifest.json").exists());
    let q = std::fs::read_to_string(out.join("quantiles.csv")).unwrap();
    let mut lines = q.lines();
    assert_eq!(lines.next().unwrap(), "geography_id,period_label,median,q10,q90,q025,q975");
    assert_eq!(lines.count(), 10 * 4 * 4);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["seed"], 3);
    assert_eq!(m["settings"]["phi"], 0.925);
}

#[test]
fn params_with_scale_method_warns() {
    let f = fixture();
    let params = f.root.join("p.json");
    assert!(subtfr(&["estimate-ar1", "--input", s(&f.series), "--out", s(&params)]).status.success());
    let o = subtfr(&[
        "project", "--method", "scale", "--params", s(&params), "--series", s(&f.series), "--national-traj",
        s(&f.future_traj), "--out-dir", s(&f.root.join("p")),
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--params is ignored"));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let f = fixture();
    let cfg = f.root.join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 5, "method": "scale-ar1", "phi": 0.8}"#).unwrap();
    let run = |dir: &str, extra: &[&str]| {
        let out = f.root.join(dir);
        let mut args = vec!["--config", s(&cfg), "project", "--series", s(&f.series), "--national-traj", s(&f.future_traj), "--out-dir", s(&out)];
        args.extend_from_slice(extra);
        assert!(subtfr(&args).status.success());
        json(&out.join("manifest.json"))
    };
    let from_config = run("a", &[]);
    assert_eq!(from_config["seed"], 5);
    assert_eq!(from_config["settings"]["phi"], 0.8);
    let overridden = run("b", &["--seed", "6", "--phi", "0.9"]);
    assert_eq!(overridden["seed"], 6);
    assert_eq!(overridden["settings"]["phi"], 0.9);
    assert_ne!(from_config["config_hash"], overridden["config_hash"]);

    std::fs::write(&cfg, r#"{"colour": "blue"}"#).unwrap();
    let o = subtfr(&["--config", s(&cfg), "estimate-ar1", "--input", s(&f.series), "--out", s(&f.root.join("x.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numeric_failure_exit_code() {
    // scale factors flip every period, so the implied persistence is negative
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("alt.csv");
    let mut text = String::from("country_id,region_id,period_label,tfr\n");
    for c in 0..6 {
        for t in 0..6 {
            let n = 2.0 + 0.5 * c as f64;
            text.push_str(&format!("K{c},,{},{n}\n", 1950 + 5 * t));
            for r in 0..3 {
                let sign = if (t + r) % 2 == 0 { 1.0 } else { -1.0 };
                let a = 1.0 + sign * (0.05 + 0.01 * r as f64);
                text.push_str(&format!("K{c},K{c}-{r},{},{}\n", 1950 + 5 * t, a * n));
            }
        }
    }
    std::fs::write(&path, text).unwrap();
    let o = subtfr(&["estimate-ar1", "--input", s(&path), "--out", s(&dir.path().join("p.json"))]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

fn write_error_panel(path: &Path) {
    let ids = (0..4).map(|r| format!("C000-r{r}")).collect();
    let labels: Vec<String> = (0..8).map(|k| (1950 + 5 * k).to_string()).collect();
    let cells = (0..4)
        .flat_map(|r| (0..8).map(move |t| Some((((r * 7 + t * 3) % 5) as f64 / 2.0 - 1.0, Phase::III))))
        .collect();
    let panel = NormalizedErrorPanel::new(ids, period_axis(0, &labels), cells).unwrap();
    save_error_panel(&panel, path).unwrap();
}

#[test]
fn correlate_single_all_and_split() {
    let f = fixture();
    let errors = f.root.join("errors.csv");
    write_error_panel(&errors);

    let one = f.root.join("a8.csv");
    assert!(subtfr(&["correlate", "--errors", s(&errors), "--method", "8", "--out", s(&one)]).status.success());
    let text = std::fs::read_to_string(&one).unwrap();
    assert!(text.starts_with("region_id,C000-r0,C000-r1,C000-r2,C000-r3\n"));
    let side = json(&f.root.join("a8.json"));
    assert_eq!(side["method_id"], 8);
    assert!(side["smallest_eigenvalue"].as_f64().unwrap() > 0.0);
    assert_eq!(side["t_bar"], 8.0);

    let all = f.root.join("all.csv");
    assert!(subtfr(&["correlate", "--errors", s(&errors), "--method", "all", "--out", s(&all)]).status.success());
    for m in 1..=11 {
        assert!(f.root.join(format!("all_m{m}.csv")).exists());
        assert!(f.root.join(format!("all_m{m}.json")).exists());
    }

    let split = f.root.join("split.csv");
    let o = subtfr(&[
        "correlate", "--errors", s(&errors), "--method", "1", "--tfr-split", "--series", s(&f.series),
        "--tfr-threshold", "0.1", "--out", s(&split),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&f.root.join("split_high.json"))["stratum"], "high");
    assert!(f.root.join("split_low.csv").exists());

    assert_eq!(subtfr(&["correlate", "--errors", s(&errors), "--method", "12", "--out", s(&f.root.join("z.csv"))]).status.code(), Some(2));
    assert_eq!(subtfr(&["correlate", "--errors", s(&errors), "--method", "1", "--tfr-split", "--out", "z.csv"]).status.code(), Some(2));
}

#[test]
fn plot_data_tables() {
    let f = fixture();
    let proj = f.root.join("proj");
    assert!(subtfr(&["project", "--method", "scale", "--series", s(&f.series), "--national-traj", s(&f.future_traj), "--out-dir", s(&proj)]).status.success());
    let out = f.root.join("plots");
    let o = subtfr(&[
        "plot-data", "--quantiles", s(&proj.join("quantiles.csv")), "--series", s(&f.series), "--regions",
        "C001-r2,NOPE", "--svg", "--out-dir", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("NOPE"));
    assert!(out.join("C001-r2.svg").exists());
    assert!(!out.join("NOPE.csv").exists());

    let series = std::fs::read_to_string(&f.series).unwrap();
    let observed: Vec<(String, String)> = series
        .lines()
        .filter(|l| l.starts_with("C001,C001-r2,"))
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[2].to_string(), c[3].to_string())
        })
        .collect();
    let table = std::fs::read_to_string(out.join("C001-r2.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), observed.len() + 4);
    for (row, (label, v)) in rows.iter().zip(&observed) {
        assert_eq!((row[0], row[1]), (label.as_str(), v.as_str()));
    }
    for row in &rows[observed.len()..] {
        let q: Vec<f64> = row[2..].iter().map(|v| v.parse().unwrap()).collect();
        assert!(q[1] <= q[0] && q[0] <= q[2] && q[3] <= q[1] && q[2] <= q[4]);
    }
}
