//! Experiment drivers end to end: config files, emitted files, the
//! smallness gate and a few closed-form expectations.

use adhesion_core::harness::emit::{parse_ensemble, parse_field};
use adhesion_core::harness::{run_contraction, run_couple, run_pde, run_poc_scan, run_thresholds, ExperimentConfig, Report, Table};
use adhesion_core::Error;

const BASE: &str = r#"
[model]
d = 1
sigma_plus = 1.0
sigma_minus = 0.8
alpha_plus = 0.5
alpha_minus = 0.7
eta_scale = 0.05
potential = [{ k = [1], u = 1.0, v = 0.6 }]

[numerics]
n = 200
dt = 0.01
k_max = 4
horizon = 1.0
snapshot_every = 10
grid_cells = 512
n_ladder = [16, 32]
times = [0.5]

[run]
seed = 3
repeats = 3
workers = 2

[initial]
p_plus = 0.7
profile = [{ k = [1], u = 0.3, v = 0.3 }]
"#;

#[test]
fn config_file_to_written_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("pde.toml");
    std::fs::write(&cfg_path, BASE).unwrap();
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let out = run_pde(&cfg).unwrap();
    let out_dir = dir.path().join("out");
    out.write(&out_dir).unwrap();

    let report = Report::parse(&std::fs::read_to_string(out_dir.join("report.txt")).unwrap()).unwrap();
    assert_eq!(report, out.report);
    assert_eq!(report.get("experiment"), Some("pde"));
    assert!(report.get_f64("mass_drift").unwrap() < 1e-12);
    let table = Table::parse_csv(&std::fs::read_to_string(out_dir.join("trajectory.csv")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 11);
    let field = parse_field(&std::fs::read_to_string(out_dir.join("field.txt")).unwrap()).unwrap();
    assert_eq!(field.time(), 1.0);
    assert!((field.total_mass() - 1.0).abs() < 1e-12);
    assert!(ExperimentConfig::load(&dir.path().join("missing.toml")).is_err());
}

#[test]
fn gate_refuses_then_labels_exploratory() {
    // flat start: the homogeneous state is stationary however strong the pull
    let strong = BASE
        .replace("eta_scale = 0.05", "eta_scale = 5.0")
        .replace("profile = [{ k = [1], u = 0.3, v = 0.3 }]", "");
    let cfg = ExperimentConfig::from_toml(&strong).unwrap();
    assert!(matches!(run_couple(&cfg), Err(Error::GateRefused(_))));
    assert!(matches!(run_poc_scan(&cfg), Err(Error::GateRefused(_))));
    assert!(matches!(run_contraction(&cfg), Err(Error::GateRefused(_))));

    let allowed = strong.replace("workers = 2", "workers = 2\nallow_exploratory = true");
    let cfg = ExperimentConfig::from_toml(&allowed).unwrap();
    assert_eq!(run_couple(&cfg).unwrap().report.get("label"), Some("exploratory"));
    let cfg = ExperimentConfig::from_toml(BASE).unwrap();
    assert_eq!(run_couple(&cfg).unwrap().report.get("label"), Some("theorem regime"));
}

#[test]
fn identical_data_do_not_separate() {
    let cfg = ExperimentConfig::from_toml(BASE).unwrap();
    let out = run_contraction(&cfg).unwrap();
    let t = out.table("contraction").unwrap();
    assert!(t.column("w1_x").unwrap().iter().all(|&w| w == 0.0));
    assert!(t.column("w1_y").unwrap().iter().all(|&w| w == 0.0));
}

/// Copies started from another spin law: the spin mismatch relaxes at the
/// total flip rate.
#[test]
fn spin_mismatch_relaxes() {
    let text = BASE
        .replace("horizon = 1.0", "horizon = 3.0")
        .replace("n = 200", "n = 2000")
        .replace("p_plus = 0.7\nprofile = [{ k = [1], u = 0.3, v = 0.3 }]", "p_plus = 0.9\nsecond_p_plus = 0.1");
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let out = run_couple(&cfg).unwrap();
    let t = out.table("coupling").unwrap();
    let (time, y) = (t.column("t").unwrap(), t.column("y_bound").unwrap());
    let rate = cfg.rates().unwrap().total();
    // spins sit at distance 2, so the mismatch starts at 2 * 0.8 and decays
    // like exp(-rate t)
    assert!((y[0] - 1.6).abs() < 0.1, "initial mismatch {}", y[0]);
    let last = y.len() - 1;
    let expected = 1.6 * (-rate * time[last]).exp();
    assert!((y[last] - expected).abs() < 0.06, "{} vs {expected}", y[last]);

    let dir = tempfile::tempdir().unwrap();
    out.write(dir.path()).unwrap();
    let (copies, seed) = parse_ensemble(&std::fs::read_to_string(dir.path().join("copies.txt")).unwrap()).unwrap();
    assert_eq!(seed, 3);
    assert_eq!(copies.len(), 2000);
}

#[test]
fn threshold_report_lists_modes() {
    let cfg = ExperimentConfig::from_toml(BASE).unwrap();
    let out = run_thresholds(&cfg).unwrap();
    let back = Report::parse(&out.report.render()).unwrap();
    let modes = back.section("modes").unwrap();
    assert_eq!(modes.rows.len(), 4);
    let eta_star = back.get_f64("eta_star").unwrap();
    let values = modes.column("eta_k").unwrap();
    assert_eq!(values.iter().cloned().fold(f64::INFINITY, f64::min), eta_star);
}
