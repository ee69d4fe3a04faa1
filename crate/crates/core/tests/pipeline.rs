use std::fs;
use std::path::Path;
use std::process::Command;

use acdc_kmpc::edmd::{fit_model, TrainingDataset};
use acdc_kmpc::gssa::{read_lifted_csv, reference_vector};
use acdc_kmpc::harness::{self, ControllerKind, HarnessConfig};
use acdc_kmpc::kmpc::{KmpcController, MpcConfig};
use acdc_kmpc::params::nominal_inputs;
use acdc_kmpc::plant::PlantMode;

const BIN: &str = env!("CARGO_BIN_EXE_acdc-kmpc");

fn cli(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

fn small_config() -> HarnessConfig {
    HarnessConfig { train_periods: 60, validation_periods: 8, mode: PlantMode::Averaged, ..HarnessConfig::default() }
}

#[test]
fn cli_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.toml"), "train_periods = 60\nvalidation_periods = 8\nmode = \"averaged\"\n").unwrap();

    let out = cli(d, &["train", "--config", "cfg.toml", "--seed", "1", "--out", "data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(d.join("data/raw.csv")).unwrap().lines().count(), 6001);
    assert_eq!(read_lifted_csv(&fs::read_to_string(d.join("data/lifted.csv")).unwrap()).unwrap().len(), 61);

    let out = cli(d, &["fit", "data", "--out", "m.txt"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = cli(d, &["validate", "--config", "cfg.toml", "--model", "m.txt", "--seed", "2", "--out", "val.csv"]);
    assert!(out.status.success());
    let val = fs::read_to_string(d.join("val.csv")).unwrap();
    assert!(val.starts_with("k,t,z3_pred,z3_meas,i_hat,i_meas,err_v,err_i"));
    assert_eq!(val.lines().count(), 1 + 8 - 3 + 1);

    let out = cli(d, &["run", "--config", "cfg.toml", "--controller", "kmpc", "--model", "m.txt", "--out", "k", "--svg"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["waveform.csv", "lifted.csv", "diagnostics.csv", "metrics.toml", "waveform.svg", "lifted.svg"] {
        assert!(d.join("k").join(f).exists(), "missing {f}");
    }

    let out = cli(d, &["run", "--config", "cfg.toml", "--controller", "pi_pr", "--out", "pi"]);
    assert!(out.status.success(), "pi_pr needs no model");

    let out = cli(d, &["metrics", "k/waveform.csv", "--config", "cfg.toml", "--controller", "kmpc", "--out", "again.toml"]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(d.join("again.toml")).unwrap(), fs::read_to_string(d.join("k/metrics.toml")).unwrap());
}

#[test]
fn cli_usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(cli(d, &["run", "--bogus"]).status.code(), Some(2));
    assert_eq!(cli(d, &["run", "--controller", "pid"]).status.code(), Some(2));
    fs::write(d.join("bad.toml"), "no_such_key = 3\n").unwrap();
    assert_eq!(cli(d, &["run", "--config", "bad.toml"]).status.code(), Some(2));
    fs::write(d.join("bad2.toml"), "duration = [").unwrap();
    assert_eq!(cli(d, &["train", "--config", "bad2.toml", "--out", "x"]).status.code(), Some(2));
    assert_eq!(cli(d, &["run", "--controller", "kmpc"]).status.code(), Some(2), "kmpc without a model");
    assert_ne!(cli(d, &["fit", "missing", "--out", "m.txt"]).status.code(), Some(0));
}

#[test]
fn metrics_survive_serialization() {
    let cfg = HarnessConfig { controller: ControllerKind::IdaPbc, ..small_config() };
    let run = harness::run_closed_loop(&cfg, None).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    harness::write_closed_loop(tmp.path(), &run, false).unwrap();
    let rows = harness::read_waveform_csv(&fs::read_to_string(tmp.path().join("waveform.csv")).unwrap()).unwrap();
    assert_eq!(rows, run.waveform);
    let again = harness::compute_metrics(&rows, &cfg.plant, &cfg.scenario(), cfg.pf_min).unwrap();
    assert_eq!(again, run.metrics);
    assert_eq!(harness::read_metrics(&tmp.path().join("metrics.toml")).unwrap(), run.metrics);
}

#[test]
fn controllers_share_the_plant_until_they_act() {
    let first: Vec<_> = [ControllerKind::IdaPbc, ControllerKind::PiPr]
        .into_iter()
        .map(|c| harness::run_closed_loop(&HarnessConfig { controller: c, ..small_config() }, None).unwrap().waveform[0])
        .collect();
    assert_eq!((first[0].t, first[0].i, first[0].v), (first[1].t, first[1].i, first[1].v));
}

#[test]
fn zero_amplitude_training_is_flagged() {
    let cfg = HarnessConfig { amplitude: 0.0, ..small_config() };
    let run = harness::run_training(&cfg).unwrap();
    let lifts: Vec<_> = run.lifted.iter().map(|r| r.z).collect();
    let fit = fit_model(&TrainingDataset::from_lifts(&lifts, &run.inputs).unwrap(), cfg.ridge).unwrap();
    assert!(fit.report.rank_deficient);
}

/// With the fitted model standing in for the plant there is no model error,
/// so the loop must settle on the weighted reference components.
#[test]
fn kmpc_tracks_reference_on_its_own_model() {
    let cfg = HarnessConfig { train_periods: 400, ..small_config() };
    let run = harness::run_training(&cfg).unwrap();
    let lifts: Vec<_> = run.lifted.iter().map(|r| r.z).collect();
    let model = fit_model(&TrainingDataset::from_lifts(&lifts, &run.inputs).unwrap(), cfg.ridge).unwrap().model;
    let p = cfg.plant;
    let mut ctrl = KmpcController::new(model.clone(), MpcConfig::new(&p, cfg.pf_min).unwrap(), nominal_inputs(&p)).unwrap();
    let r = reference_vector(&p);
    // Start from a lifted state seen in training, away from the reference.
    let mut z = lifts[lifts.len() / 2];
    let start = (z.v_mean() - r.v_mean()).abs();
    for _ in 0..60 {
        let (u, d) = ctrl.step(&z).unwrap();
        assert!(d.kkt_max <= 1e-6);
        z = model.step(&z, u);
    }
    let end = (z.v_mean() - r.v_mean()).abs();
    assert!(end < 0.05 * start.max(1.0), "|z3 - V_d| went from {start} to {end}");
}
