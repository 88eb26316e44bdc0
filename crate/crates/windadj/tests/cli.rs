use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use windadj::core::rng::{standard_normals, stream};
use windadj::core::simgen::{study_plan_config, Study, ValidationConfig};
use windadj::core::{Calendar, Site, SpatioTemporalField};
use windadj::io::{load_field_auto, save_field_auto, Values};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_windadj"));
    c.arg("--quiet");
    c
}

fn run(dir: &Path, cmd: &str, cfg: &Value, extra: &[&str]) -> Output {
    let path = dir.join(format!("{cmd}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    bin().arg(cmd).arg("--config").arg(&path).args(extra).output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn start() -> chrono::NaiveDate {
    chrono::NaiveDate::from_ymd_opt(2001, 1, 1).unwrap()
}

fn grid(n: usize) -> Vec<Site> {
    (0..n * n).map(|k| Site::new(k as u32, (k % n) as f64 * 0.5, (k / n) as f64 * 0.5)).collect()
}

/// Positive, right-skewed daily speeds with a seasonal cycle and a shared
/// regional component.
fn skewed_field(days: usize, seed: u64, scale: f64) -> SpatioTemporalField {
    let sites = grid(3);
    let n = sites.len();
    let cal = Calendar::new(start(), days);
    let mut rng = stream(seed, 0, 0);
    let mut values = vec![0.0; n * days];
    for t in 0..days {
        let common = standard_normals(&mut rng, 1)[0];
        let own = standard_normals(&mut rng, n);
        let season = 1.0 + 0.25 * (2.0 * std::f64::consts::PI * t as f64 / 365.25).sin();
        for i in 0..n {
            let z = 0.7 * common + 0.7 * own[i];
            values[i * days + t] = scale * (5.0 + 0.2 * i as f64) * season * (0.35 * z).exp();
        }
    }
    SpatioTemporalField::new(sites, cal, values).unwrap()
}

fn model() -> Value {
    json!({"transform_cov": "matern", "k_harmonics": 1})
}

#[test]
fn fit_constant_field_has_flat_climatology() {
    let dir = tempfile::tempdir().unwrap();
    let f = SpatioTemporalField::new(grid(2), Calendar::new(start(), 400), vec![5.0; 1600]).unwrap();
    save_field_auto(&dir.path().join("obs.csv"), &f).unwrap();
    let cfg = json!({"schema_version": 1, "fit": {"obs": "obs.csv", "out_dir": "out", "model": model()}});
    ok(run(dir.path(), "fit", &cfg, &[]));
    let summary = std::fs::read_to_string(dir.path().join("out/summary.txt")).unwrap();
    assert!(summary.contains("largest amplitude 0.000000 m/s"), "{summary}");
    assert!(summary.contains("covariance: skipped"));
}

#[test]
fn fit_reduces_skewness_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    save_field_auto(&dir.path().join("obs.csv"), &skewed_field(3 * 365, 1, 1.0)).unwrap();
    save_field_auto(&dir.path().join("sim.bin"), &skewed_field(3 * 365, 2, 1.1)).unwrap();
    let cfg = json!({
        "schema_version": 1,
        "seed": 7,
        "fit": {"obs": "obs.csv", "sim": "sim.bin", "out_dir": "out", "model": model()}
    });
    ok(run(dir.path(), "fit", &cfg, &[]));
    let bundle = read_json(&dir.path().join("out/fit.json"));
    assert_eq!(bundle["seed"], 7);
    let median_abs = |key: &str| {
        let mut v: Vec<f64> = bundle["fields"]["obs"]["sites"]
            .as_object()
            .unwrap()
            .values()
            .map(|s| s[key].as_f64().unwrap().abs())
            .collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(median_abs("skewness_after") < median_abs("skewness_before"));
    let first = std::fs::read(dir.path().join("out/fit.json")).unwrap();
    let first_summary = std::fs::read(dir.path().join("out/summary.txt")).unwrap();
    ok(run(dir.path(), "fit", &cfg, &[]));
    assert_eq!(first, std::fs::read(dir.path().join("out/fit.json")).unwrap());
    assert_eq!(first_summary, std::fs::read(dir.path().join("out/summary.txt")).unwrap());
}

fn adjust_cfg(method: &str, clusters: Option<&str>) -> Value {
    let mut s = json!({
        "obs_hist": "obs.csv",
        "sim_hist": "sim.csv",
        "sim_future": "future.csv",
        "method": method,
        "output": format!("adj_{method}.csv"),
        "report": format!("adj_{method}.json"),
        "model": model(),
    });
    if let Some(c) = clusters {
        s["clusters"] = json!(c);
    }
    json!({"schema_version": 1, "adjust": s})
}

#[test]
fn m_with_zero_bias_returns_input() {
    let dir = tempfile::tempdir().unwrap();
    let hist = skewed_field(3 * 365, 3, 1.0);
    save_field_auto(&dir.path().join("obs.csv"), &hist).unwrap();
    save_field_auto(&dir.path().join("sim.csv"), &hist).unwrap();
    let future = skewed_field(365, 4, 1.0);
    save_field_auto(&dir.path().join("future.csv"), &future).unwrap();
    ok(run(dir.path(), "adjust", &adjust_cfg("M", None), &[]));
    let out = load_field_auto(&dir.path().join("adj_M.csv"), Values::Speeds).unwrap();
    assert_eq!(out.values(), future.values());
    let report = read_json(&dir.path().join("adj_M.json"));
    assert_eq!(report["method"], "M");
    assert_eq!(report["clamped"], 0);
}

#[test]
fn tc_needs_a_cluster_file() {
    let dir = tempfile::tempdir().unwrap();
    let hist = skewed_field(400, 5, 1.0);
    for name in ["obs.csv", "sim.csv", "future.csv"] {
        save_field_auto(&dir.path().join(name), &hist).unwrap();
    }
    let out = run(dir.path(), "adjust", &adjust_cfg("TC", None), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("clusters.csv"));
    let out = run(dir.path(), "adjust", &adjust_cfg("TC", Some("missing/clusters.csv")), &[]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing/clusters.csv") && err.contains("not found"), "{err}");
}

/// One study simulation, shifted to positive values.
fn study_fixture(dir: &Path) {
    let cfg = ValidationConfig { regions_x: 2, regions_y: 2, per_side: 4, ..ValidationConfig::default() };
    let study = Study::new(cfg).unwrap();
    let (obs, sim) = study.fields(3).unwrap();
    let low = obs.values().iter().chain(sim.values()).fold(0.0f64, |m, &v| m.min(v));
    let shift = |f: &SpatioTemporalField| f.map_values(|_, _, v| v - low + 1.0).unwrap();
    let (obs, sim) = (shift(&obs), shift(&sim));
    let cut = obs.calendar().date(50);
    let (oh, of) = obs.split_by_date(cut).unwrap();
    let (sh, sf) = sim.split_by_date(cut).unwrap();
    for (name, f) in [("obs.csv", oh), ("holdout.csv", of), ("sim.csv", sh), ("future.csv", sf)] {
        save_field_auto(&dir.join(name), &f).unwrap();
    }
}

#[test]
fn tc_beats_mn_on_study_fixture() {
    let dir = tempfile::tempdir().unwrap();
    study_fixture(dir.path());
    let model = serde_json::to_value(windadj::config::ModelSettings::from(study_plan_config())).unwrap();
    let fit = json!({"schema_version": 1, "fit": {"obs": "obs.csv", "sim": "sim.csv", "out_dir": "fit", "model": model}});
    ok(run(dir.path(), "fit", &fit, &["--mode", "anomaly"]));
    let mut kl = Vec::new();
    for (method, clusters) in [("MN", None), ("TC", Some("fit/clusters.csv"))] {
        let mut cfg = adjust_cfg(method, clusters);
        cfg["adjust"]["model"] = model.clone();
        cfg["adjust"]["holdout_obs"] = json!("holdout.csv");
        ok(run(dir.path(), "adjust", &cfg, &["--mode", "anomaly"]));
        let report = read_json(&dir.path().join(format!("adj_{method}.json")));
        assert_eq!(report["mode"], "anomaly");
        kl.push(report["kl_holdout"]["value"].as_f64().unwrap());
    }
    assert!(kl[1] <= kl[0], "TC {} vs MN {}", kl[1], kl[0]);
}

#[test]
fn validate_rows_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "schema_version": 1,
        "seed": 3,
        "validate": {"output": "v.csv", "regions_x": 2, "regions_y": 2, "per_side": 4, "n_sims": 3}
    });
    let t0 = std::time::Instant::now();
    ok(run(dir.path(), "validate", &cfg, &[]));
    assert!(t0.elapsed().as_secs() < 300);
    let csv = std::fs::read_to_string(dir.path().join("v.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 6);
    assert!(csv.starts_with("sim_id,method,kl,kl_ratio_vs_mv\n"));
    let summary = read_json(&dir.path().join("v.json"));
    assert_eq!(summary["seed"], 3);
    assert_eq!(summary["mode"], "anomaly");
    ok(run(dir.path(), "validate", &cfg, &["--threads", "2"]));
    assert_eq!(csv, std::fs::read_to_string(dir.path().join("v.csv")).unwrap());
}

#[test]
fn kl_record_keys() {
    let dir = tempfile::tempdir().unwrap();
    save_field_auto(&dir.path().join("a.bin"), &skewed_field(300, 6, 1.0)).unwrap();
    save_field_auto(&dir.path().join("b.bin"), &skewed_field(300, 7, 1.2)).unwrap();
    let cfg = json!({"schema_version": 1, "seed": 9, "kl": {"estimate": "a.bin", "truth": "b.bin", "output": "kl.json"}});
    ok(run(dir.path(), "kl", &cfg, &[]));
    let v = read_json(&dir.path().join("kl.json"));
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["floored_pairs", "k", "m", "m_prime", "seed", "value"]);
    assert_eq!(v["k"], 17);
    assert_eq!(v["m"], 300);
    assert!(v["value"].as_f64().unwrap() > 0.0);
}

fn energy_fixture(dir: &Path, future_factor: f64, tariff: f64) -> Value {
    let sites = grid(2);
    let cal = Calendar::new(start(), 200);
    let hist = SpatioTemporalField::from_fn(sites, cal, |i, t| 3.0 + 0.5 * i as f64 + (t % 10) as f64 * 0.2).unwrap();
    let future = hist.map_values(|_, _, v| v * future_factor).unwrap();
    save_field_auto(&dir.join("hist.csv"), &hist).unwrap();
    save_field_auto(&dir.join("future.csv"), &future).unwrap();
    std::fs::write(
        dir.join("curves.csv"),
        "turbine,hub_height_m,rotor_d_m,rated_kw,cut_in,rated_speed,cut_out\nbig,100,110,3000,3,12,25\nsmall,80,90,2000,3,12,25\n",
    )
    .unwrap();
    std::fs::write(
        dir.join("farm.csv"),
        format!("site_id,turbine,count,tariff_per_kwh\n0,big,10,{tariff}\n1,small,5,{tariff}\n3,big,2,{tariff}\n"),
    )
    .unwrap();
    json!({
        "schema_version": 1,
        "energy": {
            "hist": "hist.csv",
            "future": "future.csv",
            "power_curves": "curves.csv",
            "farm": "farm.csv",
            "shear": {"alpha": 1.0 / 7.0},
            "n_draws": 5,
            "output": "delta.csv"
        }
    })
}

fn deltas(dir: &Path) -> Vec<(String, f64)> {
    std::fs::read_to_string(dir.join("delta.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[0].to_string(), c[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn energy_identical_inputs_give_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = energy_fixture(dir.path(), 1.0, 0.05);
    ok(run(dir.path(), "energy", &cfg, &[]));
    let d = deltas(dir.path());
    assert_eq!(d.len(), 4);
    assert!(d.iter().all(|(_, v)| *v == 0.0));
}

#[test]
fn energy_stronger_winds_and_tariff_linearity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = energy_fixture(dir.path(), 1.1, 0.05);
    ok(run(dir.path(), "energy", &cfg, &[]));
    let base = deltas(dir.path());
    assert!(base.iter().all(|(_, v)| *v > 0.0), "{base:?}");
    let cfg = energy_fixture(dir.path(), 1.1, 0.10);
    ok(run(dir.path(), "energy", &cfg, &[]));
    let doubled = deltas(dir.path());
    let (a, b) = (base.last().unwrap().1, doubled.last().unwrap().1);
    assert!((b - 2.0 * a).abs() < 1e-9 * a);
    let report = read_json(&dir.path().join("delta.json"));
    assert_eq!(report["shear"].as_array().unwrap().len(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("kl").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), "kl", &json!({"schema_version": 1, "bogus": 1}), &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), "kl", &json!({"schema_version": 2}), &[]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = json!({"schema_version": 1, "kl": {"estimate": "none.csv", "truth": "none.csv", "output": "kl.json"}});
    assert_eq!(run(dir.path(), "kl", &cfg, &[]).status.code(), Some(3));
    std::fs::write(dir.path().join("bad.csv"), "site_id,lon,lat,date,speed_mps\n0,0,0,2000-01-01,-1.0\n").unwrap();
    let cfg = json!({"schema_version": 1, "fit": {"obs": "bad.csv", "out_dir": "out"}});
    let out = run(dir.path(), "fit", &cfg, &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("negative wind speed"));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let event: Value = serde_json::from_str(stderr.lines().next().unwrap()).unwrap();
    assert_eq!(event["level"], "error");
    assert_eq!(event["exit_code"], 3);
}
