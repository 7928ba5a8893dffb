//! Experiment configuration, read from TOML with sections `[model]`,
//! `[numerics]`, `[run]` and `[initial]`.
//!
//! ```toml
//! [model]
//! d = 1
//! sigma_plus = 1.0
//! sigma_minus = 1.0
//! alpha_plus = 0.5
//! alpha_minus = 0.5
//! eta_scale = 0.05
//! potential = [{ k = [1], u = 1.0, v = 1.0 }]
//!
//! [numerics]
//! n = 512
//! dt = 0.005
//! horizon = 5.0
//!
//! [run]
//! seed = 7
//! repeats = 20
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfield::{ProfileTerm, SpectralField};
use crate::particles::{DiffusionSpec, ForceMethod};
use crate::potential::{PotentialMode, PotentialSpec};
use crate::spin::{FlipRates, SpinLaw};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub sigma_plus: f64,
    pub sigma_minus: f64,
    pub alpha_plus: f64,
    pub alpha_minus: f64,
    #[serde(default = "one")]
    pub eta_scale: f64,
    #[serde(default)]
    pub potential: Vec<PotentialMode>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsConfig {
    /// Particle count for single runs.
    pub n: usize,
    pub dt: f64,
    /// Spectral cutoff `|k|_inf <= k_max`.
    pub k_max: u32,
    pub horizon: f64,
    /// Steps between recorded rows.
    pub snapshot_every: usize,
    /// Partition-of-unity width; `N^-1/2` when absent.
    pub delta: Option<f64>,
    /// Lyapunov regularization; `N^-5` when absent.
    pub lyapunov_a: Option<f64>,
    pub force_method: ForceMethod,
    /// Cells per axis for gridded transport and density comparisons.
    pub grid_cells: usize,
    /// Particle counts of the propagation-of-chaos scan.
    pub n_ladder: Vec<usize>,
    /// Times at which the scan records distances.
    pub times: Vec<f64>,
    /// Interaction strengths of the bifurcation sweep, as multiples of the
    /// critical threshold.
    pub eta_ratio_min: f64,
    pub eta_ratio_max: f64,
    pub eta_steps: usize,
    /// Continuation step of the Newton branch, as a multiple of the threshold.
    pub newton_step_ratio: f64,
    /// Size of the kernel-direction seed for Newton and the PDE perturbation.
    pub seed_amplitude: f64,
    pub newton_tol: f64,
    /// Threshold separating nontrivial from homogeneous terminal amplitudes.
    pub onset_amplitude: f64,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            n: 256,
            dt: 1e-3,
            k_max: 8,
            horizon: 1.0,
            snapshot_every: 100,
            delta: None,
            lyapunov_a: None,
            force_method: ForceMethod::Spectral,
            grid_cells: 4096,
            n_ladder: vec![64, 128, 256, 512, 1024, 2048],
            times: vec![1.0],
            eta_ratio_min: 0.5,
            eta_ratio_max: 1.5,
            eta_steps: 11,
            newton_step_ratio: 0.01,
            seed_amplitude: 0.05,
            newton_tol: 1e-10,
            onset_amplitude: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub repeats: usize,
    /// Worker threads; `ADHESION_WORKERS` overrides, 0 means all cores.
    pub workers: usize,
    /// Run even when the smallness bound fails; results are then labeled
    /// exploratory.
    pub allow_exploratory: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            repeats: 200,
            workers: 0,
            allow_exploratory: false,
        }
    }
}

/// Initial law: spin law `p_plus` with a cosine profile on top of a flat
/// density. `second_*` describe the comparison datum for contraction runs
/// and, through `second_p_plus`, the copy spin law for coupled runs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    /// Defaults to the stationary spin law.
    pub p_plus: Option<f64>,
    pub profile: Vec<ProfileTerm>,
    pub second_p_plus: Option<f64>,
    pub second_profile: Vec<ProfileTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub initial: InitialConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let m = &self.model;
        if !(1..=2).contains(&m.d) {
            return bad("model.d must be 1 or 2");
        }
        self.diffusion()?;
        self.rates()?;
        self.potential()?;
        let n = &self.numerics;
        if !(n.horizon >= 0.0) {
            return bad("numerics.horizon must be non-negative");
        }
        if !(n.dt > 0.0) {
            return bad("numerics.dt must be positive");
        }
        if n.k_max < 1 {
            return bad("numerics.k_max must be at least 1");
        }
        if n.times.iter().any(|t| !(*t >= 0.0)) {
            return bad("numerics.times must be non-negative");
        }
        if n.n_ladder.iter().any(|&k| k < 2) || n.n < 1 {
            return bad("particle counts must be positive");
        }
        if !(n.newton_step_ratio > 0.0) || !(n.eta_ratio_max > n.eta_ratio_min) || !(n.eta_ratio_min >= 0.0) {
            return bad("eta ratio range and newton_step_ratio must be positive and ordered");
        }
        if self.run.repeats < 1 {
            return bad("run.repeats must be at least 1");
        }
        for p in [self.initial.p_plus, self.initial.second_p_plus].into_iter().flatten() {
            SpinLaw::new(p).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn diffusion(&self) -> Result<DiffusionSpec> {
        DiffusionSpec::new(self.model.sigma_plus, self.model.sigma_minus)
    }

    pub fn rates(&self) -> Result<FlipRates> {
        FlipRates::new(self.model.alpha_plus, self.model.alpha_minus)
    }

    pub fn potential(&self) -> Result<PotentialSpec> {
        PotentialSpec::new(self.model.d, self.model.potential.clone(), self.model.eta_scale)
    }

    fn law(&self, p: Option<f64>) -> Result<SpinLaw> {
        match p {
            Some(p) => SpinLaw::new(p),
            None => Ok(self.rates()?.stationary()),
        }
    }

    /// Initial density at the configured cutoff.
    pub fn initial_field(&self) -> Result<SpectralField> {
        SpectralField::product_form(
            self.model.d,
            self.numerics.k_max,
            self.law(self.initial.p_plus)?,
            &self.initial.profile,
        )
    }

    /// Comparison density; falls back to the first datum's profile when the
    /// second profile is empty and no second law is given.
    pub fn second_field(&self) -> Result<SpectralField> {
        let law = self.law(self.initial.second_p_plus.or(self.initial.p_plus))?;
        let profile = if self.initial.second_profile.is_empty() && self.initial.second_p_plus.is_none() {
            &self.initial.profile
        } else {
            &self.initial.second_profile
        };
        SpectralField::product_form(self.model.d, self.numerics.k_max, law, profile)
    }

    /// Worker count after the `ADHESION_WORKERS` override.
    pub fn workers(&self) -> Result<usize> {
        match std::env::var("ADHESION_WORKERS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("ADHESION_WORKERS must be an integer, got {v:?}"))),
            Err(_) => Ok(self.run.workers),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[model]
d = 1
sigma_plus = 1.0
sigma_minus = 0.8
alpha_plus = 0.5
alpha_minus = 0.7
eta_scale = 0.05
potential = [{ k = [1], u = 1.0, v = 0.5 }]

[numerics]
n = 128
dt = 0.01
n_ladder = [64, 128]

[run]
seed = 11
repeats = 4

[initial]
profile = [{ k = [1], u = 0.3, v = 0.1 }]
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.numerics.n, 128);
        assert_eq!(cfg.numerics.k_max, 8);
        assert_eq!(cfg.run.seed, 11);
        assert!(!cfg.run.allow_exploratory);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let f = cfg.initial_field().unwrap();
        assert!((f.total_mass() - 1.0).abs() < 1e-15);
        assert_eq!(cfg.second_field().unwrap(), f);
    }

    #[test]
    fn rejects_bad_values() {
        let bad_d = SAMPLE.replace("d = 1", "d = 3");
        assert!(matches!(ExperimentConfig::from_toml(&bad_d), Err(Error::Config(_))));
        let bad_rate = SAMPLE.replace("alpha_plus = 0.5", "alpha_plus = -0.5");
        assert!(ExperimentConfig::from_toml(&bad_rate).is_err());
        let unknown = SAMPLE.replace("seed = 11", "seed = 11\nspeed = 2");
        assert!(ExperimentConfig::from_toml(&unknown).is_err());
    }
}
