use std::fs;
use std::path::Path;

use pfl::cli::{parse_config_str, preset, read_snapshot, run, write_snapshot, RunConfig, PRESETS};
use pfl::physics::SaturationState;

fn small(dir: &Path) -> RunConfig {
    let text = format!(
        "preset = \"two_phase_bc\"\n[grid]\ncells = [6, 6]\n[time]\nt_end = 0.2\n[output]\ndir = \"{}\"\nsnapshots = [0.1, 0.2]\n",
        dir.display()
    );
    parse_config_str(&text).unwrap()
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn repeated_runs_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(&small(a.path())).unwrap();
    run(&small(b.path())).unwrap();
    assert!(ra.checks.iter().all(|c| c.passed), "{:?}", ra.checks);
    let fa = csv_files(a.path());
    let fb = csv_files(b.path());
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for expected in ["alg2_t000.1000.csv", "fv_t000.2000.csv", "compare_t000.2000.csv", "fv_diagnostics.csv"] {
        assert!(names.contains(&expected), "{names:?}");
    }
    assert_eq!(fa, fb);
}

#[test]
fn archived_config_reproduces_the_run_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run(&cfg).unwrap();
    let archived = fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert_eq!(parse_config_str(&archived).unwrap(), cfg);
}

#[test]
fn presets_round_trip_through_toml() {
    for name in PRESETS {
        let cfg = preset(name).unwrap();
        assert_eq!(parse_config_str(&cfg.to_toml()).unwrap(), cfg, "{name}");
    }
}

#[test]
fn snapshots_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let state = SaturationState::from_interior(3, 4, |k| vec![0.1 * k as f64 + 1.0 / 3.0, 1e-17 * k as f64]);
    let points = vec![[0.125, 0.5], [0.375, 0.5], [0.625, 0.5], [0.875, 0.5]];
    write_snapshot(&state, &points, &path).unwrap();
    let (p, s) = read_snapshot(&path).unwrap();
    assert_eq!(p, points);
    assert_eq!(s, state);
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(parse_config_str("preset = \"two_phase_bc\"\n[alg2]\nrho = 3\n").is_err());
}
