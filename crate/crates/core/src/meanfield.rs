//! Mean-field limit: a pseudospectral solver for the two-species
//! aggregation-diffusion-exchange system on `T^d` and a sampler of
//! independent McKean-Vlasov copies driven by the solved density.
//!
//! Time stepping is exponential Euler: diffusion and exchange are integrated
//! exactly per cosine mode (a 2x2 matrix exponential), the transport term
//! `-div(rho B)` is frozen over the step. Stationary states of the PDE are
//! exact fixed points of the scheme.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::particles::DiffusionSpec;
use crate::potential::PotentialSpec;
use crate::rng::{particle_streams, Channel};
use crate::spectral::{grid_size_for, CosineLayout, FftGrid};
use crate::spin::{FlipRates, Spin, SpinClock, SpinLaw};
use crate::torus::{self, basis_eval_slice, cos_product_gradient, cube_indices, normalization, TorusPoint};

/// One term `amplitude * prod_i cos(2 pi k_i x_i)` of an initial profile,
/// with separate amplitudes for the two species.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTerm {
    pub k: Vec<u32>,
    pub u: f64,
    pub v: f64,
}

/// Cosine coefficients of `(u, v)` for all `k` with `|k|_inf <= k_max`,
/// stored row-major in `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    d: usize,
    k_max: u32,
    u: Vec<f64>,
    v: Vec<f64>,
    t: f64,
}

impl SpectralField {
    pub fn new(d: usize, k_max: u32, u: Vec<f64>, v: Vec<f64>, t: f64) -> Result<Self> {
        if d == 0 || d > 3 {
            return Err(invalid(format!("unsupported dimension {d}")));
        }
        let len = (k_max as usize + 1).pow(d as u32);
        if u.len() != len || v.len() != len {
            return Err(invalid(format!("expected {len} coefficients per species")));
        }
        if u.iter().chain(&v).any(|c| !c.is_finite()) {
            return Err(invalid("non-finite coefficient"));
        }
        Ok(Self { d, k_max, u, v, t })
    }

    /// Spatially constant state with species masses given by `law`.
    pub fn homogeneous(d: usize, k_max: u32, law: SpinLaw) -> Result<Self> {
        let len = (k_max as usize + 1).pow(d as u32);
        let mut u = vec![0.0; len];
        let mut v = vec![0.0; len];
        u[0] = law.p_plus();
        v[0] = law.p_minus();
        Self::new(d, k_max, u, v, 0.0)
    }

    /// `u = p_plus (1 + sum a_j prod cos)`, `v = p_minus (1 + sum b_j prod cos)`.
    pub fn product_form(d: usize, k_max: u32, law: SpinLaw, profile: &[ProfileTerm]) -> Result<Self> {
        let mut f = Self::homogeneous(d, k_max, law)?;
        for term in profile {
            if term.k.iter().all(|&c| c == 0) {
                return Err(invalid("profile terms must have k != 0"));
            }
            let nk = normalization(&term.k);
            let (cu, cv) = f.coefficient(&term.k).ok_or_else(|| {
                invalid(format!("profile mode {:?} exceeds k_max {}", term.k, k_max))
            })?;
            f.set_coefficient(
                &term.k,
                cu + law.p_plus() * term.u / nk,
                cv + law.p_minus() * term.v / nk,
            )?;
        }
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn k_max(&self) -> u32 {
        self.k_max
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn indices(&self) -> Vec<Vec<u32>> {
        cube_indices(self.d, self.k_max)
    }

    pub fn index(&self, k: &[u32]) -> Option<usize> {
        if k.len() != self.d || k.iter().any(|&c| c > self.k_max) {
            return None;
        }
        let side = self.k_max as usize + 1;
        Some(k.iter().fold(0usize, |acc, &c| acc * side + c as usize))
    }

    pub fn coefficient(&self, k: &[u32]) -> Option<(f64, f64)> {
        self.index(k).map(|i| (self.u[i], self.v[i]))
    }

    pub fn set_coefficient(&mut self, k: &[u32], u: f64, v: f64) -> Result<()> {
        let i = self
            .index(k)
            .ok_or_else(|| invalid(format!("mode {k:?} outside the field")))?;
        self.u[i] = u;
        self.v[i] = v;
        Ok(())
    }

    /// `(integral of u, integral of v)`.
    pub fn masses(&self) -> (f64, f64) {
        (self.u[0], self.v[0])
    }

    pub fn total_mass(&self) -> f64 {
        self.u[0] + self.v[0]
    }

    /// Species masses normalized to a probability pair.
    pub fn spin_law(&self) -> Result<SpinLaw> {
        SpinLaw::new((self.u[0] / self.total_mass()).clamp(0.0, 1.0))
    }

    pub fn swapped_species(&self) -> Self {
        Self {
            d: self.d,
            k_max: self.k_max,
            u: self.v.clone(),
            v: self.u.clone(),
            t: self.t,
        }
    }

    /// Same field with a different cutoff (truncating or zero-padding).
    pub fn resized(&self, k_max: u32) -> Self {
        let len = (k_max as usize + 1).pow(self.d as u32);
        let mut out = Self {
            d: self.d,
            k_max,
            u: vec![0.0; len],
            v: vec![0.0; len],
            t: self.t,
        };
        for (i, k) in self.indices().into_iter().enumerate() {
            if let Some(j) = out.index(&k) {
                out.u[j] = self.u[i];
                out.v[j] = self.v[i];
            }
        }
        out
    }

    /// Largest absolute coefficient difference over the common modes.
    pub fn max_coefficient_diff(&self, other: &SpectralField) -> f64 {
        let k = self.k_max.max(other.k_max);
        let a = self.resized(k);
        let b = other.resized(k);
        a.u.iter()
            .zip(&b.u)
            .chain(a.v.iter().zip(&b.v))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// Pointwise densities `(u(x), v(x))`.
    pub fn evaluate(&self, x: &[f64]) -> (f64, f64) {
        let mut su = 0.0;
        let mut sv = 0.0;
        for (i, k) in self.indices().iter().enumerate() {
            if self.u[i] == 0.0 && self.v[i] == 0.0 {
                continue;
            }
            let w = basis_eval_slice(k, x);
            su += self.u[i] * w;
            sv += self.v[i] * w;
        }
        (su, sv)
    }

    /// Densities on the grid `j / n`, row-major.
    pub fn grid_values(&self, n: usize) -> (Vec<f64>, Vec<f64>) {
        let n = n.max(2 * self.k_max as usize + 2);
        let grid = FftGrid::new(self.d, n).expect("valid grid");
        let layout = grid.layout(self.k_max).expect("resolved grid");
        (grid.synthesize(&layout, &self.u), grid.synthesize(&layout, &self.v))
    }

    /// Smallest density value of either species on an `n`-grid.
    pub fn min_density(&self, n: usize) -> f64 {
        let (u, v) = self.grid_values(n);
        u.iter().chain(&v).copied().fold(f64::INFINITY, f64::min)
    }

    /// Exact masses of the cells `[j/n, (j+1)/n)^d`, row-major.
    pub fn cell_masses(&self, n: usize) -> (Vec<f64>, Vec<f64>) {
        let km = self.k_max as usize;
        // cell integrals of cos(2 pi k x) per 1-d cell
        let table: Vec<Vec<f64>> = (0..=km)
            .map(|k| {
                (0..n)
                    .map(|j| {
                        let (a, b) = (j as f64 / n as f64, (j + 1) as f64 / n as f64);
                        if k == 0 {
                            b - a
                        } else {
                            let w = 2.0 * std::f64::consts::PI * k as f64;
                            ((w * b).sin() - (w * a).sin()) / w
                        }
                    })
                    .collect()
            })
            .collect();
        let cells = n.pow(self.d as u32);
        let mut mu = vec![0.0; cells];
        let mut mv = vec![0.0; cells];
        let mut coords = vec![0usize; self.d];
        for (i, k) in self.indices().iter().enumerate() {
            if self.u[i] == 0.0 && self.v[i] == 0.0 {
                continue;
            }
            let nk = normalization(k);
            for c in 0..cells {
                let mut flat = c;
                for slot in coords.iter_mut().rev() {
                    *slot = flat % n;
                    flat /= n;
                }
                let w: f64 = nk * k
                    .iter()
                    .zip(&coords)
                    .map(|(&kk, &j)| table[kk as usize][j])
                    .product::<f64>();
                mu[c] += self.u[i] * w;
                mv[c] += self.v[i] * w;
            }
        }
        (mu, mv)
    }

    /// Draws one state `(x, y)` from the normalized density by rejection
    /// against the coefficient-sum bound.
    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<f64>, Spin)> {
        let total = self.total_mass();
        if !(total > 0.0) {
            return Err(invalid("cannot sample from a field with non-positive mass"));
        }
        let y = if rng.random::<f64>() * total < self.u[0] {
            Spin::Plus
        } else {
            Spin::Minus
        };
        let c = if y == Spin::Plus { &self.u } else { &self.v };
        let ks = self.indices();
        let bound: f64 = c[0] + ks
            .iter()
            .zip(c)
            .skip(1)
            .map(|(k, ci)| ci.abs() * normalization(k))
            .sum::<f64>();
        let mut x = vec![0.0; self.d];
        for _ in 0..100_000 {
            x.iter_mut().for_each(|xi| *xi = rng.random::<f64>());
            let dens: f64 = ks.iter().zip(c).map(|(k, ci)| ci * basis_eval_slice(k, &x)).sum();
            if rng.random::<f64>() * bound < dens {
                return Ok((x, y));
            }
        }
        Err(Error::Domain("rejection sampling did not terminate".into()))
    }
}

/// Per-step drift coefficients of a solved trajectory, for driving copies.
///
/// The drift during `[t0 + j dt, t0 + (j+1) dt)` is
/// `sum_k g_j(k) grad prod_i cos(2 pi k_i x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftPath {
    d: usize,
    t0: f64,
    dt: f64,
    modes: Vec<Vec<u32>>,
    coeffs: Vec<Vec<f64>>,
}

impl DriftPath {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.coeffs.len()
    }

    pub fn start(&self) -> f64 {
        self.t0
    }

    pub fn end(&self) -> f64 {
        self.t0 + self.coeffs.len() as f64 * self.dt
    }

    /// Checks that a sampler step `dt` is a whole multiple of the path step.
    pub fn check_refines(&self, dt: f64) -> Result<usize> {
        let ratio = dt / self.dt;
        let m = ratio.round();
        if m < 1.0 || (ratio - m).abs() > 1e-9 * m {
            return Err(invalid(format!(
                "sampler step {dt} is not a multiple of the density step {}",
                self.dt
            )));
        }
        Ok(m as usize)
    }

    /// Step index covering time `t` (a step start).
    pub fn index_at(&self, t: f64) -> Result<usize> {
        let s = (t - self.t0) / self.dt;
        let j = s.round();
        if j < 0.0 || (s - j).abs() > 1e-6 || j as usize >= self.coeffs.len() {
            return Err(invalid(format!(
                "time {t} is not covered by the density path [{}, {})",
                self.t0,
                self.end()
            )));
        }
        Ok(j as usize)
    }

    pub fn drift_into(&self, step: usize, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut g = [0.0f64; 8];
        for (k, c) in self.modes.iter().zip(&self.coeffs[step]) {
            if *c == 0.0 {
                continue;
            }
            cos_product_gradient(k, x, &mut g[..self.d]);
            for (o, gj) in out.iter_mut().zip(&g[..self.d]) {
                *o += c * gj;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ModeExp {
    e: [[f64; 2]; 2],
    p: [[f64; 2]; 2],
}

/// `exp(M)` and `exp(M) - I` for a 2x2 matrix with real eigenvalues.
fn expm2(m: [[f64; 2]; 2]) -> ([[f64; 2]; 2], [[f64; 2]; 2]) {
    let mean = 0.5 * (m[0][0] + m[1][1]);
    let half = 0.5 * (m[0][0] - m[1][1]);
    let s2 = half * half + m[0][1] * m[1][0];
    let s = s2.max(0.0).sqrt();
    let b = [[half, m[0][1]], [m[1][0], -half]];
    // cosh-part minus one, and the sinh(s)/s weight, both scaled by e^mean
    let (c_m1, sh) = if s > 1e-8 {
        (
            0.5 * ((mean + s).exp_m1() + (mean - s).exp_m1()),
            ((mean + s).exp() - (mean - s).exp()) / (2.0 * s),
        )
    } else {
        let em = mean.exp();
        (mean.exp_m1() + em * s2 / 2.0, em * (1.0 + s2 / 6.0))
    };
    let mut e = [[0.0; 2]; 2];
    let mut em1 = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let diag = if i == j { 1.0 } else { 0.0 };
            em1[i][j] = c_m1 * diag + sh * b[i][j];
            e[i][j] = em1[i][j] + diag;
        }
    }
    (e, em1)
}

fn mat_inv_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = inv[i][0] * b[0][j] + inv[i][1] * b[1][j];
        }
    }
    out
}

/// Pseudospectral solver for one parameter set, cutoff and step.
#[derive(Debug)]
pub struct PdeSolver {
    d: usize,
    k_max: u32,
    dt: f64,
    rates: FlipRates,
    diff: DiffusionSpec,
    exchange: bool,
    grid: FftGrid,
    layout: CosineLayout,
    modes: Vec<ModeExp>,
    /// `(coefficient index, k, eta*mult_U, eta*mult_V)` over the potential support.
    support: Vec<(usize, Vec<u32>, f64, f64)>,
}

impl PdeSolver {
    pub fn new(
        spec: &PotentialSpec,
        diff: &DiffusionSpec,
        rates: &FlipRates,
        k_max: u32,
        dt: f64,
    ) -> Result<Self> {
        Self::build(spec, diff, rates, k_max, dt, true, 0)
    }

    /// Solver on a synthesis grid of at least `grid_min` points per axis.
    pub fn with_grid(
        spec: &PotentialSpec,
        diff: &DiffusionSpec,
        rates: &FlipRates,
        k_max: u32,
        dt: f64,
        grid_min: usize,
    ) -> Result<Self> {
        Self::build(spec, diff, rates, k_max, dt, true, grid_min)
    }

    /// Solver with the exchange terms switched off; only meant for testing
    /// the diffusion and transport parts in isolation.
    #[doc(hidden)]
    pub fn without_exchange(
        spec: &PotentialSpec,
        diff: &DiffusionSpec,
        rates: &FlipRates,
        k_max: u32,
        dt: f64,
    ) -> Result<Self> {
        Self::build(spec, diff, rates, k_max, dt, false, 0)
    }

    fn build(
        spec: &PotentialSpec,
        diff: &DiffusionSpec,
        rates: &FlipRates,
        k_max: u32,
        dt: f64,
        exchange: bool,
        grid_min: usize,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt must be positive"));
        }
        if k_max == 0 {
            return Err(invalid("k_max must be >= 1"));
        }
        let d = spec.dim();
        let grid = FftGrid::new(d, grid_size_for((3 * k_max as usize + 1).max(grid_min)))?;
        let layout = grid.layout(k_max)?;
        let (a1, am1) = if exchange {
            (rates.alpha_plus(), rates.alpha_minus())
        } else {
            (0.0, 0.0)
        };
        let modes = cube_indices(d, k_max)
            .iter()
            .map(|k| {
                let lam = torus::laplace_symbol(k);
                let l = [
                    [-(diff.sigma_plus().powi(2) / 2.0 * lam + a1), am1],
                    [a1, -(diff.sigma_minus().powi(2) / 2.0 * lam + am1)],
                ];
                let m = [[l[0][0] * dt, l[0][1] * dt], [l[1][0] * dt, l[1][1] * dt]];
                let (e, em1) = expm2(m);
                let p = if lam == 0.0 {
                    [[0.0; 2]; 2]
                } else {
                    mat_inv_mul(l, em1)
                };
                ModeExp { e, p }
            })
            .collect();
        let side = k_max as usize + 1;
        let support = spec
            .modes()
            .iter()
            .filter(|m| m.k.iter().all(|&c| c <= k_max))
            .map(|m| {
                let idx = m.k.iter().fold(0usize, |acc, &c| acc * side + c as usize);
                let (mu, mv) = spec.convolution_multipliers(&m.k);
                (idx, m.k.clone(), spec.eta_scale() * mu, spec.eta_scale() * mv)
            })
            .collect();
        Ok(Self {
            d,
            k_max,
            dt,
            rates: *rates,
            diff: *diff,
            exchange,
            grid,
            layout,
            modes,
            support,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn k_max(&self) -> u32 {
        self.k_max
    }

    fn check(&self, field: &SpectralField) -> Result<()> {
        if field.dim() != self.d || field.k_max() != self.k_max {
            return Err(invalid("field layout does not match the solver"));
        }
        Ok(())
    }

    /// Drift coefficients `g(k) N_k` on the potential support.
    fn drift_coefficients(&self, field: &SpectralField) -> Vec<f64> {
        self.support
            .iter()
            .map(|(i, k, mu, mv)| (mu * field.u[*i] + mv * field.v[*i]) * normalization(k))
            .collect()
    }

    /// Transport terms `-div(u B)`, `-div(v B)` projected on the cosine
    /// basis, plus `max |B|` and the minimum grid density.
    fn transport(&self, field: &SpectralField) -> (Vec<f64>, Vec<f64>, f64, f64) {
        let len = field.u.len();
        let ug = self.grid.synthesize(&self.layout, &field.u);
        let vg = self.grid.synthesize(&self.layout, &field.v);
        let min_density = ug.iter().chain(&vg).copied().fold(f64::INFINITY, f64::min);
        let mut g = vec![0.0; len];
        for (i, _, mu, mv) in &self.support {
            g[*i] = mu * field.u[*i] + mv * field.v[*i];
        }
        if g.iter().all(|&c| c == 0.0) {
            return (vec![0.0; len], vec![0.0; len], 0.0, min_density);
        }
        let gspec = self.grid.spectrum_from_cosine(&self.layout, &g);
        let mut div_u = vec![num_complex::Complex64::new(0.0, 0.0); self.grid.len()];
        let mut div_v = div_u.clone();
        let mut b2 = vec![0.0; self.grid.len()];
        for axis in 0..self.d {
            let b = self
                .grid
                .values_from_spectrum(self.grid.differentiate(&gspec, axis));
            for (acc, bj) in b2.iter_mut().zip(&b) {
                *acc += bj * bj;
            }
            let fu: Vec<f64> = ug.iter().zip(&b).map(|(x, y)| x * y).collect();
            let fv: Vec<f64> = vg.iter().zip(&b).map(|(x, y)| x * y).collect();
            let du = self.grid.differentiate(&self.grid.analyze(&fu), axis);
            let dv = self.grid.differentiate(&self.grid.analyze(&fv), axis);
            for (acc, z) in div_u.iter_mut().zip(du) {
                *acc += z;
            }
            for (acc, z) in div_v.iter_mut().zip(dv) {
                *acc += z;
            }
        }
        let nu: Vec<f64> = self
            .grid
            .project_cosine(&self.layout, &div_u)
            .into_iter()
            .map(|c| -c)
            .collect();
        let nv: Vec<f64> = self
            .grid
            .project_cosine(&self.layout, &div_v)
            .into_iter()
            .map(|c| -c)
            .collect();
        let max_b = b2.iter().copied().fold(0.0, f64::max).sqrt();
        (nu, nv, max_b, min_density)
    }

    /// Right-hand side of the time-independent system, per coefficient.
    pub fn residual(&self, field: &SpectralField) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(field)?;
        let (nu, nv, _, _) = self.transport(field);
        let (a1, am1) = if self.exchange {
            (self.rates.alpha_plus(), self.rates.alpha_minus())
        } else {
            (0.0, 0.0)
        };
        let ks = field.indices();
        let mut ru = Vec::with_capacity(ks.len());
        let mut rv = Vec::with_capacity(ks.len());
        for (i, k) in ks.iter().enumerate() {
            let lam = torus::laplace_symbol(k);
            let (u, v) = (field.u[i], field.v[i]);
            ru.push(-(self.diff.sigma_plus().powi(2) / 2.0 * lam + a1) * u + am1 * v + nu[i]);
            rv.push(a1 * u - (self.diff.sigma_minus().powi(2) / 2.0 * lam + am1) * v + nv[i]);
        }
        Ok((ru, rv))
    }

    /// One exponential-Euler step. Also returns the minimum grid density
    /// of the input state.
    pub fn step_with_monitor(&self, field: &SpectralField) -> Result<(SpectralField, f64)> {
        self.check(field)?;
        let (nu, nv, max_b, min_density) = self.transport(field);
        if min_density < -1e-6 {
            return Err(Error::Integrator(format!(
                "density undershoot {min_density:e} at t = {}",
                field.t
            )));
        }
        if max_b * self.dt * self.k_max as f64 > 0.5 {
            log::warn!(
                "transport CFL heuristic exceeded: max|B| dt K = {:.3}",
                max_b * self.dt * self.k_max as f64
            );
        }
        let len = field.u.len();
        let mut u = vec![0.0; len];
        let mut v = vec![0.0; len];
        // mode 0: total mass is carried over unchanged
        let q = field.u[0] + field.v[0];
        if self.exchange {
            let uc = self.rates.alpha_minus() / self.rates.total();
            let decay = (-self.rates.total() * self.dt).exp();
            u[0] = uc * q + (field.u[0] - uc * q) * decay;
            v[0] = q - u[0];
        } else {
            u[0] = field.u[0];
            v[0] = field.v[0];
        }
        for i in 1..len {
            let m = &self.modes[i];
            let (x, y) = (field.u[i], field.v[i]);
            u[i] = m.e[0][0] * x + m.e[0][1] * y + m.p[0][0] * nu[i] + m.p[0][1] * nv[i];
            v[i] = m.e[1][0] * x + m.e[1][1] * y + m.p[1][0] * nu[i] + m.p[1][1] * nv[i];
        }
        if u.iter().chain(&v).any(|c| !c.is_finite()) {
            return Err(Error::Integrator(format!(
                "non-finite coefficient after step at t = {}",
                field.t
            )));
        }
        let next = SpectralField {
            d: self.d,
            k_max: self.k_max,
            u,
            v,
            t: field.t + self.dt,
        };
        Ok((next, min_density))
    }

    pub fn step(&self, field: &SpectralField) -> Result<SpectralField> {
        self.step_with_monitor(field).map(|(f, _)| f)
    }
}

/// One step from scratch (builds a solver; use [`PdeSolver`] for loops).
pub fn pde_step(
    field: &SpectralField,
    spec: &PotentialSpec,
    diff: &DiffusionSpec,
    rates: &FlipRates,
    dt: f64,
) -> Result<SpectralField> {
    PdeSolver::new(spec, diff, rates, field.k_max(), dt)?.step(field)
}

#[derive(Debug, Clone)]
pub struct PdeTrajectory {
    pub snapshots: Vec<SpectralField>,
    pub drift: DriftPath,
    /// Largest `|total mass - initial total mass|` seen along the run.
    pub mass_drift: f64,
    /// Smallest grid density seen along the run.
    pub min_density: f64,
}

impl PdeTrajectory {
    pub fn last(&self) -> &SpectralField {
        self.snapshots.last().expect("trajectory is never empty")
    }
}

/// Number of steps of size `dt` in `horizon`, requiring an exact fit.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(horizon >= 0.0) || !(dt > 0.0) {
        return Err(invalid("need horizon >= 0 and dt > 0"));
    }
    let s = horizon / dt;
    let n = s.round();
    if (s - n).abs() > 1e-6 {
        return Err(invalid(format!("horizon {horizon} is not a multiple of dt {dt}")));
    }
    Ok(n as usize)
}

/// Runs the solver over `[t0, t0 + horizon]`, keeping every
/// `snapshot_every`-th state (the first and last are always kept).
pub fn solve(
    field0: &SpectralField,
    spec: &PotentialSpec,
    diff: &DiffusionSpec,
    rates: &FlipRates,
    horizon: f64,
    dt: f64,
    snapshot_every: usize,
) -> Result<PdeTrajectory> {
    let solver = PdeSolver::new(spec, diff, rates, field0.k_max(), dt)?;
    solve_with(&solver, field0, horizon, snapshot_every)
}

pub fn solve_with(
    solver: &PdeSolver,
    field0: &SpectralField,
    horizon: f64,
    snapshot_every: usize,
) -> Result<PdeTrajectory> {
    let steps = step_count(horizon, solver.dt)?;
    let every = snapshot_every.max(1);
    let t0 = field0.t;
    let m0 = field0.total_mass();
    let mut snapshots = vec![field0.clone()];
    let mut coeffs = Vec::with_capacity(steps);
    let mut cur = field0.clone();
    let mut mass_drift: f64 = 0.0;
    let mut min_density = f64::INFINITY;
    for s in 1..=steps {
        coeffs.push(solver.drift_coefficients(&cur));
        let (mut next, md) = solver.step_with_monitor(&cur)?;
        next.t = t0 + s as f64 * solver.dt;
        min_density = min_density.min(md);
        mass_drift = mass_drift.max((next.total_mass() - m0).abs());
        if s % every == 0 || s == steps {
            snapshots.push(next.clone());
        }
        cur = next;
    }
    min_density = min_density.min(cur.min_density(solver.grid.n()));
    if min_density < -1e-8 {
        log::warn!("density undershoot {min_density:e} during solve");
    }
    Ok(PdeTrajectory {
        snapshots,
        drift: DriftPath {
            d: solver.d,
            t0,
            dt: solver.dt,
            modes: solver.support.iter().map(|s| s.1.clone()).collect(),
            coeffs,
        },
        mass_drift,
        min_density,
    })
}

/// Newton iteration for a stationary state with the mass of `seed`
/// (homogeneous state with unit mass when no seed is given).
///
/// Unknowns are all `u` coefficients and the non-constant `v` coefficients;
/// the constant `v` coefficient is fixed by the total mass.
pub fn stationary_fixed_point(
    spec: &PotentialSpec,
    diff: &DiffusionSpec,
    rates: &FlipRates,
    k_max: u32,
    tol: f64,
    seed: Option<&SpectralField>,
) -> Result<SpectralField> {
    if !(tol > 0.0) {
        return Err(invalid("tol must be positive"));
    }
    let d = spec.dim();
    let start = match seed {
        Some(f) => f.resized(k_max),
        None => SpectralField::homogeneous(d, k_max, rates.stationary())?,
    };
    // dt only affects the stepping tables, not the residual
    let solver = PdeSolver::new(spec, diff, rates, k_max, 1.0)?;
    let len = start.u.len();
    let mass = start.total_mass();
    let pack = |f: &SpectralField| -> DVector<f64> {
        DVector::from_iterator(2 * len - 1, f.u.iter().copied().chain(f.v[1..].iter().copied()))
    };
    let unpack = |z: &DVector<f64>| -> SpectralField {
        let mut f = start.clone();
        f.u.copy_from_slice(&z.as_slice()[..len]);
        f.v[1..].copy_from_slice(&z.as_slice()[len..]);
        f.v[0] = mass - f.u[0];
        f
    };
    let eval = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let (ru, rv) = solver.residual(&unpack(z))?;
        Ok(DVector::from_iterator(2 * len - 1, ru.into_iter().chain(rv.into_iter().skip(1))))
    };
    let mut z = pack(&start);
    let mut r = eval(&z)?;
    let mut history = vec![r.norm()];
    let max_iter = 60;
    for _ in 0..max_iter {
        if r.norm() < tol {
            return Ok(unpack(&z));
        }
        let n = z.len();
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let h = 1e-7 * z[j].abs().max(1e-2);
            let mut zp = z.clone();
            zp[j] += h;
            let rp = eval(&zp)?;
            jac.set_column(j, &((rp - &r) / h));
        }
        let step = jac
            .lu()
            .solve(&(-&r))
            .ok_or_else(|| Error::NonConvergence {
                iterations: history.len(),
                last_residual: r.norm(),
                residuals: history.clone(),
            })?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &z + &step * lambda;
            let rt = eval(&trial)?;
            if rt.norm() < r.norm() || rt.norm() < tol {
                z = trial;
                r = rt;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        history.push(r.norm());
        if !accepted {
            break;
        }
    }
    if r.norm() < tol {
        return Ok(unpack(&z));
    }
    Err(Error::NonConvergence {
        iterations: history.len(),
        last_residual: r.norm(),
        residuals: history,
    })
}

/// Independent McKean-Vlasov copies driven by a precomputed [`DriftPath`].
///
/// Copy `i` uses the Brownian and spin streams of index `i`, the same
/// layout as particle `i` of a particle system with the same seed.
#[derive(Debug, Clone)]
pub struct MeanFieldCopies {
    d: usize,
    positions: Vec<f64>,
    spins: Vec<Spin>,
    clocks: Vec<SpinClock>,
    brownian: Vec<ChaCha8Rng>,
    spin_streams: Vec<ChaCha8Rng>,
    t0: f64,
    steps_taken: u64,
    dt: f64,
}

impl MeanFieldCopies {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        positions: Vec<f64>,
        spins: Vec<Spin>,
        rates: &FlipRates,
        t0: f64,
        dt: f64,
        seed: u64,
        run: u64,
    ) -> Result<Self> {
        let n = spins.len();
        if n == 0 || positions.len() != n * d {
            return Err(invalid("positions and spins sizes disagree"));
        }
        if !(dt > 0.0) {
            return Err(invalid("dt must be positive"));
        }
        let brownian = particle_streams(seed, run, n, Channel::Brownian);
        let mut spin_streams = particle_streams(seed, run, n, Channel::Spin);
        let clocks = spins
            .iter()
            .zip(spin_streams.iter_mut())
            .map(|(&y, r)| SpinClock::start(y, t0, rates, r))
            .collect();
        Ok(Self {
            d,
            positions: positions.into_iter().map(torus::wrap).collect(),
            spins,
            clocks,
            brownian,
            spin_streams,
            t0,
            steps_taken: 0,
            dt,
        })
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.t0 + self.steps_taken as f64 * self.dt
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn spins(&self) -> &[Spin] {
        &self.spins
    }

    pub fn position(&self, i: usize) -> TorusPoint {
        TorusPoint::new(self.positions[i * self.d..(i + 1) * self.d].to_vec()).expect("wrapped")
    }

    /// One Euler-Maruyama step with exact spin events.
    pub fn step(&mut self, path: &DriftPath, diff: &DiffusionSpec, rates: &FlipRates) -> Result<()> {
        if path.dim() != self.d {
            return Err(invalid("drift path dimension mismatch"));
        }
        path.check_refines(self.dt)?;
        let t = self.time();
        let j = path.index_at(t)?;
        let t1 = self.t0 + (self.steps_taken + 1) as f64 * self.dt;
        let d = self.d;
        let mut b = [0.0f64; 8];
        for i in 0..self.spins.len() {
            let x = &mut self.positions[i * d..(i + 1) * d];
            path.drift_into(j, x, &mut b[..d]);
            let mut qv = 0.0;
            self.clocks[i].advance(
                &mut self.spins[i],
                t,
                t1,
                rates,
                &mut self.spin_streams[i],
                |y, len| qv += diff.sigma(y).powi(2) * len,
            );
            let amp = qv.sqrt();
            for (c, xc) in x.iter_mut().enumerate() {
                let xi: f64 = self.brownian[i].sample(StandardNormal);
                *xc = torus::wrap(*xc + b[c] * self.dt + amp * xi);
            }
        }
        self.steps_taken += 1;
        Ok(())
    }
}

/// Samples `n` copies of `(X_0, Y_0)` from `rho0` and runs them along `path`
/// until its end. Returns the final copies.
#[allow(clippy::too_many_arguments)]
pub fn sample_copy(
    rho0: &SpectralField,
    path: &DriftPath,
    diff: &DiffusionSpec,
    rates: &FlipRates,
    n: usize,
    dt: f64,
    seed: u64,
    run: u64,
) -> Result<MeanFieldCopies> {
    let m = path.check_refines(dt)?;
    let mut init = particle_streams(seed, run, n, Channel::Init);
    let mut positions = Vec::with_capacity(n * rho0.dim());
    let mut spins = Vec::with_capacity(n);
    for r in init.iter_mut() {
        let (x, y) = rho0.sample_state(r)?;
        positions.extend(x);
        spins.push(y);
    }
    let mut copies = MeanFieldCopies::new(rho0.dim(), positions, spins, rates, path.start(), dt, seed, run)?;
    for _ in 0..path.steps() / m {
        copies.step(path, diff, rates)?;
    }
    Ok(copies)
}
