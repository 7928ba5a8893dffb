//! The `N`-particle system: Euler-Maruyama positions with exactly simulated
//! spin flips, and its empirical measure.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::meanfield::SpectralField;
use crate::potential::PotentialSpec;
use crate::rng::{particle_streams, Channel};
use crate::spin::{FlipRates, Spin, SpinClock, SpinLaw};
use crate::torus::{self, normalization};

/// Per-type diffusion coefficients `sigma(+1)`, `sigma(-1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSpec {
    sigma_plus: f64,
    sigma_minus: f64,
}

impl DiffusionSpec {
    pub fn new(sigma_plus: f64, sigma_minus: f64) -> Result<Self> {
        if !(sigma_plus > 0.0 && sigma_minus > 0.0 && sigma_plus.is_finite() && sigma_minus.is_finite()) {
            return Err(invalid("diffusion coefficients must be positive"));
        }
        Ok(Self {
            sigma_plus,
            sigma_minus,
        })
    }

    pub fn sigma(&self, y: Spin) -> f64 {
        match y {
            Spin::Plus => self.sigma_plus,
            Spin::Minus => self.sigma_minus,
        }
    }

    pub fn sigma_plus(&self) -> f64 {
        self.sigma_plus
    }

    pub fn sigma_minus(&self) -> f64 {
        self.sigma_minus
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_plus.min(self.sigma_minus)
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_plus.max(self.sigma_minus)
    }

    /// Lipschitz constant of `sigma` on `{+1, -1}` with the metric `|y - q|`.
    pub fn lip(&self) -> f64 {
        (self.sigma_plus - self.sigma_minus).abs() / 2.0
    }

    pub fn swapped(&self) -> Self {
        Self {
            sigma_plus: self.sigma_minus,
            sigma_minus: self.sigma_plus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceMethod {
    /// Pairwise `O(N^2)` summation.
    Direct,
    /// Mode-by-mode structure factors, `O(N * modes)`; exact for cosine series.
    #[default]
    Spectral,
}

/// Positions (flat, `N * d`) and spins at a common time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    d: usize,
    positions: Vec<f64>,
    spins: Vec<Spin>,
    t: f64,
}

impl ParticleEnsemble {
    pub fn new(d: usize, positions: Vec<f64>, spins: Vec<Spin>, t: f64) -> Result<Self> {
        if d == 0 {
            return Err(invalid("dimension must be >= 1"));
        }
        if spins.is_empty() || positions.len() != spins.len() * d {
            return Err(invalid("need N >= 1 and N * d coordinates"));
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(invalid("non-finite position"));
        }
        Ok(Self {
            d,
            positions: positions.into_iter().map(torus::wrap).collect(),
            spins,
            t,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.d..(i + 1) * self.d]
    }

    pub fn spins(&self) -> &[Spin] {
        &self.spins
    }

    pub(crate) fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    pub(crate) fn spins_mut(&mut self) -> &mut [Spin] {
        &mut self.spins
    }

    pub(crate) fn set_time(&mut self, t: f64) {
        self.t = t;
    }

    pub fn empirical(&self) -> EmpiricalMeasure {
        EmpiricalMeasure {
            d: self.d,
            positions: self.positions.clone(),
            spins: self.spins.clone(),
        }
    }
}

/// How to draw the initial particle states.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// Uniform positions, independent spins with the given law.
    Uniform(SpinLaw),
    /// Deterministic lattice; the first `round(N p_plus)` particles are `+1`.
    Lattice(SpinLaw),
    /// Independent draws from a density.
    Field(SpectralField),
    /// Given states.
    States(ParticleEnsemble),
}

impl InitialCondition {
    pub fn sample(&self, d: usize, n: usize, seed: u64, run: u64) -> Result<ParticleEnsemble> {
        if n == 0 {
            return Err(invalid("need at least one particle"));
        }
        match self {
            InitialCondition::Uniform(law) => {
                let mut positions = Vec::with_capacity(n * d);
                let mut spins = Vec::with_capacity(n);
                for mut r in particle_streams(seed, run, n, Channel::Init) {
                    positions.extend((0..d).map(|_| r.random::<f64>()));
                    spins.push(if r.random::<f64>() < law.p_plus() { Spin::Plus } else { Spin::Minus });
                }
                ParticleEnsemble::new(d, positions, spins, 0.0)
            }
            InitialCondition::Lattice(law) => {
                let side = (n as f64).powf(1.0 / d as f64).ceil() as usize;
                let mut positions = Vec::with_capacity(n * d);
                for i in 0..n {
                    let mut flat = i;
                    let mut c = vec![0.0; d];
                    for slot in c.iter_mut().rev() {
                        *slot = (flat % side) as f64 / side as f64;
                        flat /= side;
                    }
                    positions.extend(c);
                }
                let plus = (n as f64 * law.p_plus()).round() as usize;
                let spins = (0..n).map(|i| if i < plus { Spin::Plus } else { Spin::Minus }).collect();
                ParticleEnsemble::new(d, positions, spins, 0.0)
            }
            InitialCondition::Field(f) => {
                if f.dim() != d {
                    return Err(invalid("initial density has the wrong dimension"));
                }
                let mut positions = Vec::with_capacity(n * d);
                let mut spins = Vec::with_capacity(n);
                for mut r in particle_streams(seed, run, n, Channel::Init) {
                    let (x, y) = f.sample_state(&mut r)?;
                    positions.extend(x);
                    spins.push(y);
                }
                ParticleEnsemble::new(d, positions, spins, f.time())
            }
            InitialCondition::States(e) => {
                if e.dim() != d || e.len() != n {
                    return Err(invalid("loaded states do not match d and N"));
                }
                Ok(e.clone())
            }
        }
    }
}

/// Uniform atomic measure on the states of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    d: usize,
    positions: Vec<f64>,
    spins: Vec<Spin>,
}

impl EmpiricalMeasure {
    pub fn new(d: usize, positions: Vec<f64>, spins: Vec<Spin>) -> Result<Self> {
        let e = ParticleEnsemble::new(d, positions, spins, 0.0)?;
        Ok(e.empirical())
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.d..(i + 1) * self.d]
    }

    pub fn spins(&self) -> &[Spin] {
        &self.spins
    }

    /// Type marginal as a spin law.
    pub fn type_marginal(&self) -> SpinLaw {
        let plus = self.spins.iter().filter(|&&y| y == Spin::Plus).count();
        SpinLaw::new(plus as f64 / self.len() as f64).expect("fraction in [0,1]")
    }

    /// `(position, weight)` atoms of the `x`-marginal in `d = 1`.
    pub fn circle_atoms(&self) -> Result<Vec<(f64, f64)>> {
        if self.d != 1 {
            return Err(invalid("circle atoms need d = 1"));
        }
        let w = self.weight();
        Ok(self.positions.iter().map(|&x| (x, w)).collect())
    }

    /// `integral g d mu = (1/N) sum_i g(x_i, y_i)`.
    pub fn integrate(&self, g: impl Fn(&[f64], Spin) -> f64) -> f64 {
        (0..self.len())
            .map(|i| g(self.position(i), self.spins[i]))
            .sum::<f64>()
            * self.weight()
    }
}

/// `(1/N) sum_j F(X_i - X_j, Y_j)` by direct summation in index order.
pub fn pairwise_forces(ens: &ParticleEnsemble, spec: &PotentialSpec) -> Vec<f64> {
    let d = ens.d;
    let n = ens.len();
    let mut out = vec![0.0; n * d];
    if spec.is_zero() {
        return out;
    }
    let inv_n = 1.0 / n as f64;
    out.par_chunks_mut(d).enumerate().for_each(|(i, acc)| {
        let xi = ens.position(i);
        let mut r = [0.0f64; 8];
        let mut f = [0.0f64; 8];
        for j in 0..n {
            torus::displacement_into(xi, ens.position(j), &mut r[..d]);
            spec.force_into(&r[..d], ens.spins[j], &mut f[..d]);
            for c in 0..d {
                acc[c] += f[c];
            }
        }
        acc.iter_mut().for_each(|a| *a *= inv_n);
    });
    out
}

fn phase(kappa: &[i64], x: &[f64]) -> Complex64 {
    let arg: f64 = kappa.iter().zip(x).map(|(&k, &xc)| k as f64 * xc).sum();
    let (s, c) = (2.0 * std::f64::consts::PI * arg).sin_cos();
    Complex64::new(c, s)
}

/// Same sum as [`pairwise_forces`] through structure factors
/// `S(kappa) = (1/N) sum_j a_{k, Y_j} exp(-2 pi i kappa . X_j)`.
pub fn spectral_forces(ens: &ParticleEnsemble, spec: &PotentialSpec) -> Vec<f64> {
    let d = ens.d;
    let n = ens.len();
    let mut out = vec![0.0; n * d];
    if spec.is_zero() {
        return out;
    }
    let inv_n = 1.0 / n as f64;
    let mut kappa = vec![0i64; d];
    for m in spec.modes() {
        let (au, av) = (m.u * spec.eta_scale(), m.v * spec.eta_scale());
        if au == 0.0 && av == 0.0 {
            continue;
        }
        let nz: Vec<usize> = (0..d).filter(|&c| m.k[c] != 0).collect();
        let patterns = 1usize << nz.len();
        // 1 / 2^m from expanding the cosine product
        let weight = 1.0 / (normalization(&m.k) * normalization(&m.k));
        for p in 0..patterns {
            for (kc, &k) in kappa.iter_mut().zip(&m.k) {
                *kc = k as i64;
            }
            for (bit, &c) in nz.iter().enumerate() {
                if p >> bit & 1 == 1 {
                    kappa[c] = -kappa[c];
                }
            }
            let mut s = Complex64::new(0.0, 0.0);
            for j in 0..n {
                let a = if ens.spins[j] == Spin::Plus { au } else { av };
                if a != 0.0 {
                    s += a * phase(&kappa, ens.position(j)).conj();
                }
            }
            s *= inv_n;
            let kappa = &kappa;
            out.par_chunks_mut(d).enumerate().for_each(|(i, acc)| {
                let z = phase(kappa, ens.position(i)) * s;
                // Re(2 pi i kappa z) = -2 pi kappa Im z
                for c in 0..d {
                    acc[c] -= weight * 2.0 * std::f64::consts::PI * kappa[c] as f64 * z.im;
                }
            });
        }
    }
    out
}

pub fn forces(ens: &ParticleEnsemble, spec: &PotentialSpec, method: ForceMethod) -> Vec<f64> {
    match method {
        ForceMethod::Direct => pairwise_forces(ens, spec),
        ForceMethod::Spectral => spectral_forces(ens, spec),
    }
}

/// A particle ensemble together with its per-particle random streams and
/// spin clocks.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    ens: ParticleEnsemble,
    clocks: Vec<SpinClock>,
    brownian: Vec<ChaCha8Rng>,
    spin_streams: Vec<ChaCha8Rng>,
    t0: f64,
    steps_taken: u64,
    dt: f64,
    noiseless: bool,
}

impl ParticleSystem {
    pub fn new(ens: ParticleEnsemble, rates: &FlipRates, dt: f64, seed: u64, run: u64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt must be positive"));
        }
        let n = ens.len();
        let brownian = particle_streams(seed, run, n, Channel::Brownian);
        let mut spin_streams = particle_streams(seed, run, n, Channel::Spin);
        let clocks = ens
            .spins
            .iter()
            .zip(spin_streams.iter_mut())
            .map(|(&y, r)| SpinClock::start(y, ens.t, rates, r))
            .collect();
        Ok(Self {
            t0: ens.t,
            ens,
            clocks,
            brownian,
            spin_streams,
            steps_taken: 0,
            dt,
            noiseless: false,
        })
    }

    /// Drops the Brownian term (spins still flip); only meant for tests.
    #[doc(hidden)]
    pub fn set_noiseless(&mut self, noiseless: bool) {
        self.noiseless = noiseless;
    }

    pub fn ensemble(&self) -> &ParticleEnsemble {
        &self.ens
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self) -> f64 {
        self.ens.t
    }

    /// Advances by one step of size `dt`.
    pub fn step(
        &mut self,
        spec: &PotentialSpec,
        diff: &DiffusionSpec,
        rates: &FlipRates,
        method: ForceMethod,
    ) -> Result<()> {
        if spec.dim() != self.ens.d {
            return Err(invalid("potential dimension mismatch"));
        }
        let d = self.ens.d;
        let dt = self.dt;
        let t = self.ens.t;
        let t1 = self.t0 + (self.steps_taken + 1) as f64 * dt;
        let f = forces(&self.ens, spec, method);
        let noiseless = self.noiseless;
        self.ens
            .positions
            .par_chunks_mut(d)
            .zip(self.ens.spins.par_iter_mut())
            .zip(self.clocks.par_iter_mut())
            .zip(self.brownian.par_iter_mut())
            .zip(self.spin_streams.par_iter_mut())
            .zip(f.par_chunks(d))
            .for_each(|(((((x, y), clock), bro), sp), fi)| {
                let mut qv = 0.0;
                clock.advance(y, t, t1, rates, sp, |s, len| qv += diff.sigma(s).powi(2) * len);
                let amp = qv.sqrt();
                for c in 0..d {
                    let xi: f64 = bro.sample(StandardNormal);
                    let noise = if noiseless { 0.0 } else { amp * xi };
                    x[c] = torus::wrap(x[c] + fi[c] * dt + noise);
                }
            });
        if self.ens.positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::Integrator(format!("non-finite position at t = {t1}")));
        }
        self.steps_taken += 1;
        self.ens.t = t1;
        Ok(())
    }

    pub fn run_steps(
        &mut self,
        steps: usize,
        spec: &PotentialSpec,
        diff: &DiffusionSpec,
        rates: &FlipRates,
        method: ForceMethod,
    ) -> Result<()> {
        for _ in 0..steps {
            self.step(spec, diff, rates, method)?;
        }
        Ok(())
    }
}

/// Default step bound `1e-3 * min(1, 1/eta, 1/(alpha_1 + alpha_-1))`.
pub fn default_dt_max(eta: f64, rates: &FlipRates) -> f64 {
    let mut m: f64 = 1.0;
    if eta > 0.0 {
        m = m.min(1.0 / eta);
    }
    1e-3 * m.min(1.0 / rates.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::PotentialMode;
    use std::f64::consts::PI;

    fn spec2() -> PotentialSpec {
        PotentialSpec::new(
            2,
            vec![
                PotentialMode { k: vec![1, 0], u: 0.7, v: -0.2 },
                PotentialMode { k: vec![1, 2], u: 0.3, v: 0.5 },
                PotentialMode { k: vec![0, 3], u: -0.4, v: 0.1 },
            ],
            1.3,
        )
        .unwrap()
    }

    fn ensemble(d: usize, n: usize, seed: u64) -> ParticleEnsemble {
        InitialCondition::Uniform(SpinLaw::new(0.4).unwrap())
            .sample(d, n, seed, 0)
            .unwrap()
    }

    #[test]
    fn diffusion_spec() {
        assert!(DiffusionSpec::new(0.0, 1.0).is_err());
        let s = DiffusionSpec::new(1.0, 0.6).unwrap();
        assert_eq!(s.sigma_min(), 0.6);
        assert!((s.lip() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn direct_and_spectral_agree() {
        let ens = ensemble(2, 300, 4);
        let a = pairwise_forces(&ens, &spec2());
        let b = spectral_forces(&ens, &spec2());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn coincident_particles_feel_nothing() {
        let ens = ParticleEnsemble::new(2, [0.3, 0.6].repeat(5), vec![Spin::Plus; 5], 0.0).unwrap();
        assert!(pairwise_forces(&ens, &spec2()).iter().all(|&f| f == 0.0));
        assert!(spectral_forces(&ens, &spec2()).iter().all(|&f| f.abs() < 1e-13));
    }

    #[test]
    fn momentum_balance_for_shared_potential() {
        let shared = PotentialSpec::new(
            2,
            vec![
                PotentialMode { k: vec![1, 0], u: 0.7, v: 0.7 },
                PotentialMode { k: vec![1, 2], u: 0.3, v: 0.3 },
            ],
            1.0,
        )
        .unwrap();
        let ens = ensemble(2, 200, 9);
        let f = pairwise_forces(&ens, &shared);
        for c in 0..2 {
            let total: f64 = f.iter().skip(c).step_by(2).sum();
            assert!(total.abs() < 1e-12 * 200.0 * 10.0);
        }
    }

    #[test]
    fn two_particle_force_is_direct_call() {
        let spec = PotentialSpec::new(1, vec![PotentialMode { k: vec![1], u: 1.0, v: 0.0 }], 1.0).unwrap();
        let ens = ParticleEnsemble::new(1, vec![0.1, 0.35], vec![Spin::Plus, Spin::Plus], 0.0).unwrap();
        let f = pairwise_forces(&ens, &spec);
        let direct = spec.force(&[torus::wrap_signed(0.1 - 0.35)], Spin::Plus)[0] / 2.0;
        assert_eq!(f[0], direct);
        // noiseless step reproduces the drift
        let rates = FlipRates::new(0.0, 1.0).unwrap();
        let mut sys = ParticleSystem::new(ens, &rates, 1e-3, 1, 0).unwrap();
        sys.set_noiseless(true);
        sys.step(&spec, &DiffusionSpec::new(1.0, 1.0).unwrap(), &rates, ForceMethod::Direct).unwrap();
        let x = sys.ensemble().position(0)[0];
        assert!((x - (0.1 + direct * 1e-3)).abs() < 1e-15);
        assert!((direct - 0.5 * (-2.0 * PI * (2.0 * PI * -0.25f64).sin())).abs() < 1e-12);
    }

    #[test]
    fn empirical_measure() {
        let ens = ParticleEnsemble::new(1, vec![0.2], vec![Spin::Minus], 0.0).unwrap();
        let e = ens.empirical();
        assert_eq!(e.weight(), 1.0);
        assert_eq!(e.type_marginal().p_plus(), 0.0);
        let ens = ParticleEnsemble::new(1, vec![0.1, 0.3, 0.7], vec![Spin::Plus, Spin::Minus, Spin::Plus], 0.0).unwrap();
        let e = ens.empirical();
        assert!((e.type_marginal().p_plus() - 2.0 / 3.0).abs() < 1e-15);
        assert!((e.integrate(|x, _| x[0]) - 1.1 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn lattice_initial_condition() {
        let e = InitialCondition::Lattice(SpinLaw::new(0.25).unwrap()).sample(2, 16, 0, 0).unwrap();
        assert_eq!(e.position(5), &[0.25, 0.25]);
        assert_eq!(e.spins().iter().filter(|&&s| s == Spin::Plus).count(), 4);
    }

    #[test]
    fn bit_reproducible() {
        let rates = FlipRates::new(1.0, 2.0).unwrap();
        let diff = DiffusionSpec::new(1.0, 0.5).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut sys = ParticleSystem::new(ensemble(2, 50, 3), &rates, 1e-3, 3, 0).unwrap();
                sys.run_steps(50, &spec2(), &diff, &rates, ForceMethod::Spectral).unwrap();
                sys.ensemble().clone()
            })
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn single_particle_diffuses() {
        let rates = FlipRates::new(1.0, 1.0).unwrap();
        let diff = DiffusionSpec::new(0.3, 0.3).unwrap();
        let spec = PotentialSpec::new(1, vec![PotentialMode { k: vec![1], u: 5.0, v: 5.0 }], 1.0).unwrap();
        // N = 1: the only force term is F(0, y) = 0
        let mut incr = Vec::new();
        for run in 0..2000 {
            let ens = ParticleEnsemble::new(1, vec![0.5], vec![Spin::Plus], 0.0).unwrap();
            let mut sys = ParticleSystem::new(ens, &rates, 0.01, 77, run).unwrap();
            sys.run_steps(10, &spec, &diff, &rates, ForceMethod::Direct).unwrap();
            incr.push(sys.ensemble().position(0)[0] - 0.5);
        }
        let mean = incr.iter().sum::<f64>() / incr.len() as f64;
        let var = incr.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / incr.len() as f64;
        // variance 0.09 * 0.1 with ~3% relative standard error
        assert!((var - 0.009).abs() < 0.15 * 0.009);
    }

    #[test]
    fn default_dt() {
        let rates = FlipRates::new(1.0, 1.0).unwrap();
        assert!((default_dt_max(4.0, &rates) - 2.5e-4).abs() < 1e-18);
        assert!((default_dt_max(0.0, &rates) - 5e-4).abs() < 1e-18);
    }
}
