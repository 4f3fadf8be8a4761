use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use capmin_cli::commands::{cmd_capminv, cmd_evaluate, cmd_pmap, cmd_profile, cmd_report, cmd_sweep_k, cmd_train};
use capmin_cli::{Config, Context, Format};

fn capmin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capmin"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.train.epochs = 8;
    cfg.capmin.k_range = [10, 33];
    cfg.capminv.start_k = 12;
    cfg.capminv.phi_range = [0, 3];
    cfg.variation.rho = 0.05;
    cfg
}

fn trained(dir: &Path, cfg: Config, format: Format) -> Context {
    let ctx = Context::new(cfg, Some(dir.to_path_buf()), None, format);
    cmd_train(&ctx).unwrap();
    cmd_profile(&ctx).unwrap();
    ctx
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"version": 9}"#).unwrap();
    let out = capmin(&["--config", cfg.to_str().unwrap(), "size"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));

    let missing = dir.path().join("nope.json");
    assert_eq!(capmin(&["--config", missing.to_str().unwrap(), "size"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_3_and_name_producer() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    for (verb, producer) in [
        ("sweep-k", "capmin train"),
        ("size", "capmin profile"),
        ("report", "capmin sweep-k"),
    ] {
        let out = capmin(&["--out", out_dir, verb]);
        assert_eq!(out.status.code(), Some(3), "{verb}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(producer), "{verb}: {err}");
    }
}

#[test]
fn unknown_verb_is_rejected() {
    let out = capmin(&["frobnicate"]);
    assert!(!out.status.success());
}

#[test]
fn full_set_without_variation_matches_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.variation.rho = 0.0;
    cfg.capmin.k_range = [33, 33];
    let ctx = trained(dir.path(), cfg, Format::Csv);
    let baseline = cmd_evaluate(&ctx).unwrap().accuracy;
    let row = &cmd_sweep_k(&ctx).unwrap()[0];
    assert_eq!(row.accuracy_clean.to_bits(), baseline.to_bits());
    assert_eq!(row.accuracy_variation_mean.to_bits(), baseline.to_bits());
    assert_eq!(row.accuracy_variation_std, 0.0);
}

#[test]
fn sweep_rows_are_consistent_and_phi_zero_matches() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = trained(dir.path(), small_config(), Format::Csv);
    let rows = cmd_sweep_k(&ctx).unwrap();
    assert_eq!(rows.len(), 24);
    let vth = ctx.cfg.circuit.vth;
    for w in rows.windows(2) {
        assert!(w[0].k > w[1].k);
        assert!(w[1].capacitance_f <= w[0].capacitance_f);
    }
    for r in &rows {
        assert_eq!(r.energy_j, 0.5 * r.capacitance_f * vth * vth);
    }
    cmd_pmap(&ctx).unwrap();
    let merged = cmd_capminv(&ctx).unwrap();
    let start = rows.iter().find(|r| r.k == 12).unwrap();
    assert_eq!(merged[0].phi, 0);
    assert_eq!(merged[0].accuracy_mean.to_bits(), start.accuracy_variation_mean.to_bits());
    assert!(merged.iter().all(|r| r.capacitance_f == start.capacitance_f));
    assert_eq!(merged.iter().map(|r| r.k_v).collect::<Vec<_>>(), vec![12, 11, 10, 9]);

    let report = cmd_report(&ctx).unwrap();
    assert_eq!(report.sweep_k, rows);
    assert!(dir.path().join("report_k.svg").is_file());
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("experiment,x_name,x,accuracy_mean,accuracy_std,capacitance_f\n"));
    let header = fs::read_to_string(dir.path().join("sweep_k.csv")).unwrap();
    assert!(header.starts_with(
        "k,q_first,q_last,capacitance_f,latency_s,energy_j,accuracy_clean,accuracy_variation_mean,accuracy_variation_std\n"
    ));
}

#[test]
fn json_format_round_trips_through_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.capmin.k_range = [10, 14];
    cfg.report.svg = false;
    let ctx = trained(dir.path(), cfg, Format::Json);
    let rows = cmd_sweep_k(&ctx).unwrap();
    cmd_pmap(&ctx).unwrap();
    cmd_capminv(&ctx).unwrap();
    assert!(dir.path().join("sweep_k.json").is_file());
    assert!(!dir.path().join("sweep_k.csv").exists());
    let report = cmd_report(&ctx).unwrap();
    assert_eq!(report.sweep_k, rows);
    assert!(!dir.path().join("report_k.svg").exists());
}

#[test]
fn stale_pmap_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = trained(dir.path(), small_config(), Format::Csv);
    cmd_pmap(&ctx).unwrap();
    let mut other = ctx.clone();
    other.cfg.capminv.start_k = 9;
    assert!(cmd_capminv(&other).is_err());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(Config::default(), Some(dir.path().to_path_buf()), Some(99), Format::Csv);
    assert_eq!(ctx.cfg.seeds.master, 99);
}
