//! Reflection coupling between the particle system and independent
//! mean-field copies, with optimally coupled spins, plus the distance
//! diagnostics used to monitor it.
//!
//! Per pair `i`, with `D = Xbar - X` (minimal representative) and
//! `e = D / |D|`:
//!
//! ```text
//! dX    = drift dt + sigma(Y)    (phi_r(D) (I - 2 e e^T) dB + phi_s(D) dB~)
//! dXbar = drift dt + sigma(Ybar) (phi_r(D) dB             + phi_s(D) dB~)
//! ```
//!
//! Spins: once `Y = Ybar` the partner follows every flip of `Y`. While they
//! differ, `Ybar` runs its own clock on the coupling stream; whichever flips
//! first makes them equal and they stay glued. The disagreement probability
//! then decays exactly like `exp(-(alpha_1 + alpha_-1) t)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::meanfield::DriftPath;
use crate::particles::{forces, DiffusionSpec, EmpiricalMeasure, ForceMethod, ParticleEnsemble};
use crate::potential::PotentialSpec;
use crate::rng::{particle_streams, Channel};
use crate::spin::{couple_spins, FlipRates, Spin, SpinClock, SpinLaw};
use crate::torus::{self, comparison_f_unchecked};

/// Smooth weights `phi_r = sin(pi h / 2)`, `phi_s = cos(pi h / 2)` with a
/// quintic smoothstep `h` rising from 0 at `delta / 2` to 1 at `delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionOfUnity {
    delta: f64,
}

impl PartitionOfUnity {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(invalid("delta must be positive"));
        }
        Ok(Self { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn h(&self, r: f64) -> f64 {
        let lo = 0.5 * self.delta;
        if r <= lo {
            return 0.0;
        }
        if r >= self.delta {
            return 1.0;
        }
        let s = (r - lo) / lo;
        s * s * s * (s * (6.0 * s - 15.0) + 10.0)
    }

    /// `(phi_r, phi_s)` at distance `r`; exactly `(0, 1)` and `(1, 0)`
    /// outside the transition band.
    pub fn weights(&self, r: f64) -> (f64, f64) {
        let h = self.h(r);
        if h == 0.0 {
            (0.0, 1.0)
        } else if h == 1.0 {
            (1.0, 0.0)
        } else {
            (0.5 * std::f64::consts::PI * h).sin_cos()
        }
    }
}

/// `v - 2 <e, v> e`.
pub fn reflect(v: &[f64], e: &[f64]) -> Result<Vec<f64>> {
    if v.len() != e.len() {
        return Err(invalid("dimension mismatch"));
    }
    let norm2: f64 = e.iter().map(|x| x * x).sum();
    if (norm2.sqrt() - 1.0).abs() > 1e-12 {
        return Err(invalid("reflection direction must be a unit vector"));
    }
    let dot: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
    Ok(v.iter().zip(e).map(|(a, b)| a - 2.0 * dot * b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovParams {
    pub a: f64,
    pub delta: f64,
}

impl LyapunovParams {
    pub fn new(a: f64, delta: f64) -> Result<Self> {
        if !(a > 0.0 && delta > 0.0) {
            return Err(invalid("a and delta must be positive"));
        }
        Ok(Self { a, delta })
    }

    /// `a = N^-5`, `delta = N^-1/2`.
    pub fn default_for(n: usize) -> Self {
        let n = n as f64;
        Self {
            a: n.powi(-5),
            delta: n.powf(-0.5),
        }
    }
}

/// One row of the coupling diagnostics table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingDiagnostics {
    pub t: f64,
    pub lyapunov: f64,
    pub x_bound: f64,
    pub y_bound: f64,
    pub min_pair_dist: f64,
    pub spin_disagreement_fraction: f64,
}

/// Partners for initial spins under the optimal coupling of `law_y` and
/// `law_ybar`, drawn from the coupling streams.
pub fn coupled_initial_spins(spins: &[Spin], law_y: SpinLaw, law_ybar: SpinLaw, seed: u64, run: u64) -> Vec<Spin> {
    spins
        .iter()
        .zip(particle_streams(seed, run, spins.len(), Channel::Coupling))
        .map(|(&y, mut r)| couple_spins(y, law_y, law_ybar, &mut r))
        .collect()
}

#[derive(Debug, Clone)]
pub struct CouplingState {
    x: ParticleEnsemble,
    xbar: Vec<f64>,
    ybar: Vec<Spin>,
    clocks: Vec<SpinClock>,
    /// Partner clocks; `None` once the pair is glued.
    bar_clocks: Vec<Option<SpinClock>>,
    brownian: Vec<ChaCha8Rng>,
    independent: Vec<ChaCha8Rng>,
    spin_streams: Vec<ChaCha8Rng>,
    coupling_streams: Vec<ChaCha8Rng>,
    partition: PartitionOfUnity,
    t0: f64,
    steps_taken: u64,
    dt: f64,
}

impl CouplingState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        particles: ParticleEnsemble,
        xbar: Vec<f64>,
        ybar: Vec<Spin>,
        rates: &FlipRates,
        dt: f64,
        delta: f64,
        seed: u64,
        run: u64,
    ) -> Result<Self> {
        let n = particles.len();
        let d = particles.dim();
        if xbar.len() != n * d || ybar.len() != n {
            return Err(invalid("particle and copy ensembles differ in size"));
        }
        if !(dt > 0.0) {
            return Err(invalid("dt must be positive"));
        }
        let t0 = particles.time();
        let mut spin_streams = particle_streams(seed, run, n, Channel::Spin);
        // the partner clock shares the coupling stream with the initial spin draw,
        // advanced past it so the two uses never overlap
        let mut coupling_streams = particle_streams(seed, run, n, Channel::Coupling);
        for r in coupling_streams.iter_mut() {
            r.set_word_pos(1 << 20);
        }
        let clocks = particles
            .spins()
            .iter()
            .zip(spin_streams.iter_mut())
            .map(|(&y, r)| SpinClock::start(y, t0, rates, r))
            .collect();
        let bar_clocks = particles
            .spins()
            .iter()
            .zip(&ybar)
            .zip(coupling_streams.iter_mut())
            .map(|((&y, &yb), r)| (y != yb).then(|| SpinClock::start(yb, t0, rates, r)))
            .collect();
        Ok(Self {
            x: particles,
            xbar: xbar.into_iter().map(torus::wrap).collect(),
            ybar,
            clocks,
            bar_clocks,
            brownian: particle_streams(seed, run, n, Channel::Brownian),
            independent: particle_streams(seed, run, n, Channel::Independent),
            spin_streams,
            coupling_streams,
            partition: PartitionOfUnity::new(delta)?,
            t0,
            steps_taken: 0,
            dt,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub fn time(&self) -> f64 {
        self.x.time()
    }

    pub fn particles(&self) -> &ParticleEnsemble {
        &self.x
    }

    pub fn copy_positions(&self) -> &[f64] {
        &self.xbar
    }

    pub fn copy_spins(&self) -> &[Spin] {
        &self.ybar
    }

    pub fn copies_empirical(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::new(self.dim(), self.xbar.clone(), self.ybar.clone()).expect("valid copies")
    }

    fn separation(&self, i: usize, out: &mut [f64]) -> f64 {
        let d = self.dim();
        torus::displacement_into(&self.xbar[i * d..(i + 1) * d], self.x.position(i), out);
        out.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// One coupled Euler-Maruyama step.
    pub fn coupled_step(
        &mut self,
        spec: &PotentialSpec,
        diff: &DiffusionSpec,
        rates: &FlipRates,
        path: &DriftPath,
        method: ForceMethod,
    ) -> Result<()> {
        let d = self.dim();
        if spec.dim() != d || path.dim() != d {
            return Err(invalid("dimension mismatch"));
        }
        path.check_refines(self.dt)?;
        let t = self.time();
        let j = path.index_at(t)?;
        let t1 = self.t0 + (self.steps_taken + 1) as f64 * self.dt;
        let f = forces(&self.x, spec, method);
        let n = self.len();
        let mut sep = [0.0f64; 8];
        let mut bbar = [0.0f64; 8];
        let mut xi = [0.0f64; 8];
        let mut xi2 = [0.0f64; 8];
        for i in 0..n {
            let r = self.separation(i, &mut sep[..d]);
            let (phi_r, phi_s) = if r < 1e-14 { (0.0, 1.0) } else { self.partition.weights(r) };
            path.drift_into(j, &self.xbar[i * d..(i + 1) * d], &mut bbar[..d]);

            let (qv, qv_bar) = self.advance_spins(i, t, t1, diff, rates);

            for c in 0..d {
                xi[c] = self.brownian[i].sample(StandardNormal);
                xi2[c] = self.independent[i].sample(StandardNormal);
            }
            let dot: f64 = if r < 1e-14 {
                0.0
            } else {
                (0..d).map(|c| sep[c] / r * xi[c]).sum()
            };
            let (amp, amp_bar) = (qv.sqrt(), qv_bar.sqrt());
            let x = &mut self.x.positions_mut()[i * d..(i + 1) * d];
            for c in 0..d {
                let reflected = if r < 1e-14 { xi[c] } else { xi[c] - 2.0 * dot * sep[c] / r };
                x[c] = torus::wrap(x[c] + f[i * d + c] * self.dt + amp * (phi_r * reflected + phi_s * xi2[c]));
            }
            let xb = &mut self.xbar[i * d..(i + 1) * d];
            for c in 0..d {
                xb[c] = torus::wrap(xb[c] + bbar[c] * self.dt + amp_bar * (phi_r * xi[c] + phi_s * xi2[c]));
            }
        }
        if self.x.positions().iter().chain(&self.xbar).any(|v| !v.is_finite()) {
            return Err(crate::Error::Integrator(format!("non-finite position at t = {t1}")));
        }
        self.steps_taken += 1;
        self.x.set_time(t1);
        Ok(())
    }

    /// Runs both spins of pair `i` over `[t, t1]`; returns the two
    /// integrated `sigma^2`.
    fn advance_spins(&mut self, i: usize, t: f64, t1: f64, diff: &DiffusionSpec, rates: &FlipRates) -> (f64, f64) {
        let mut qv = 0.0;
        let mut qv_bar = 0.0;
        let mut now = t;
        let y = &mut self.x.spins_mut()[i];
        if let Some(bar) = self.bar_clocks[i].as_mut() {
            loop {
                let ty = self.clocks[i].next_flip();
                let tb = bar.next_flip();
                let next = ty.min(tb);
                if next > t1 {
                    qv += diff.sigma(*y).powi(2) * (t1 - now);
                    qv_bar += diff.sigma(self.ybar[i]).powi(2) * (t1 - now);
                    return (qv, qv_bar);
                }
                qv += diff.sigma(*y).powi(2) * (next - now);
                qv_bar += diff.sigma(self.ybar[i]).powi(2) * (next - now);
                now = next;
                if ty <= tb {
                    self.clocks[i].fire(y, rates, &mut self.spin_streams[i]);
                } else {
                    bar.fire(&mut self.ybar[i], rates, &mut self.coupling_streams[i]);
                }
                if *y == self.ybar[i] {
                    break;
                }
            }
            self.bar_clocks[i] = None;
        }
        self.clocks[i].advance(y, now, t1, rates, &mut self.spin_streams[i], |s, len| {
            let v = diff.sigma(s).powi(2) * len;
            qv += v;
            qv_bar += v;
        });
        self.ybar[i] = *y;
        (qv, qv_bar)
    }

    /// `(1/N) sum_i f(sqrt(|D_i|^2 + a))`.
    pub fn lyapunov(&self, params: &LyapunovParams) -> f64 {
        let d = self.dim();
        let mut sep = [0.0f64; 8];
        (0..self.len())
            .map(|i| {
                let r = self.separation(i, &mut sep[..d]);
                comparison_f_unchecked((r * r + params.a).sqrt(), d)
            })
            .sum::<f64>()
            / self.len() as f64
    }

    /// `((1/N) sum |X_i - Xbar_i|, (1/N) sum 2 * 1{Y_i != Ybar_i})`.
    pub fn w1_upper_bound(&self) -> (f64, f64) {
        let d = self.dim();
        let mut sep = [0.0f64; 8];
        let n = self.len() as f64;
        let x = (0..self.len()).map(|i| self.separation(i, &mut sep[..d])).sum::<f64>() / n;
        (x, 2.0 * self.spin_disagreement_fraction())
    }

    pub fn spin_disagreement_fraction(&self) -> f64 {
        self.x
            .spins()
            .iter()
            .zip(&self.ybar)
            .filter(|(a, b)| a != b)
            .count() as f64
            / self.len() as f64
    }

    pub fn min_pair_dist(&self) -> f64 {
        let d = self.dim();
        let mut sep = [0.0f64; 8];
        (0..self.len())
            .map(|i| self.separation(i, &mut sep[..d]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn diagnostics(&self, params: &LyapunovParams) -> CouplingDiagnostics {
        let (x_bound, y_bound) = self.w1_upper_bound();
        CouplingDiagnostics {
            t: self.time(),
            lyapunov: self.lyapunov(params),
            x_bound,
            y_bound,
            min_pair_dist: self.min_pair_dist(),
            spin_disagreement_fraction: self.spin_disagreement_fraction(),
        }
    }
}
