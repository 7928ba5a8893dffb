//! Worker-count override through the environment. Kept in its own binary
//! because it mutates process state.

use adhesion_core::harness::{run_simulate, ExperimentConfig};
use adhesion_core::Error;

#[test]
fn env_overrides_configured_workers() {
    let cfg = ExperimentConfig::from_toml(
        "[model]\nd = 1\nsigma_plus = 1.0\nsigma_minus = 1.0\nalpha_plus = 0.5\nalpha_minus = 0.5\n\
         [numerics]\nn = 32\ndt = 0.01\nhorizon = 0.1\n[run]\nworkers = 3\n",
    )
    .unwrap();
    assert_eq!(cfg.workers().unwrap(), 3);
    std::env::set_var("ADHESION_WORKERS", "1");
    assert_eq!(cfg.workers().unwrap(), 1);
    let one = run_simulate(&cfg).unwrap();
    std::env::set_var("ADHESION_WORKERS", "4");
    assert_eq!(run_simulate(&cfg).unwrap().files(), one.files());
    std::env::set_var("ADHESION_WORKERS", "many");
    assert!(matches!(run_simulate(&cfg), Err(Error::Config(_))));
    std::env::remove_var("ADHESION_WORKERS");
}
