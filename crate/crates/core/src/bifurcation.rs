//! Bifurcation of stationary states from the homogeneous equilibrium
//! `(u_c, v_c) = (alpha_-1, alpha_1) / (alpha_1 + alpha_-1)`.
//!
//! Throughout this module the interaction strength `eta` is explicit and
//! multiplies the *unscaled* potential coefficients; the `eta_scale` stored
//! in a [`PotentialSpec`] is ignored. The multipliers entering the
//! linearized symbol are the convolution multipliers
//! (`U * w_k = U_hat(k) w_k`), which is what the nonlinear map and the PDE
//! actually apply.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::meanfield::{PdeSolver, SpectralField};
use crate::particles::DiffusionSpec;
use crate::potential::PotentialSpec;
use crate::spin::FlipRates;
use crate::torus::{self, cube_indices};

/// Per-mode quantities at a nonzero index `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeData {
    pub k: Vec<u32>,
    /// `|2 pi k|^2`.
    pub lambda: f64,
    /// `D_l(k) = (sigma(l)^2 / 2) |2 pi k|^2 + alpha_l`.
    pub d_plus: f64,
    pub d_minus: f64,
    /// Basis coefficients `<U, w_k>`, `<V, w_k>`.
    pub u_coeff: f64,
    pub v_coeff: f64,
    /// Convolution multipliers.
    pub u_mult: f64,
    pub v_mult: f64,
}

pub fn mode_data(k: &[u32], spec: &PotentialSpec, diff: &DiffusionSpec, rates: &FlipRates) -> Result<ModeData> {
    if k.len() != spec.dim() {
        return Err(invalid("mode dimension mismatch"));
    }
    if k.iter().all(|&c| c == 0) {
        return Err(invalid("mode k = 0 has no threshold"));
    }
    let lambda = torus::laplace_symbol(k);
    let (u_coeff, v_coeff) = spec.basis_coefficients(k);
    let (u_mult, v_mult) = spec.convolution_multipliers(k);
    Ok(ModeData {
        k: k.to_vec(),
        lambda,
        d_plus: diff.sigma_plus().powi(2) / 2.0 * lambda + rates.alpha_plus(),
        d_minus: diff.sigma_minus().powi(2) / 2.0 * lambda + rates.alpha_minus(),
        u_coeff,
        v_coeff,
        u_mult,
        v_mult,
    })
}

/// A critical threshold; `positive` records whether the denominator
/// bracket is positive (only then is `value` a genuine threshold).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub value: f64,
    pub bracket: f64,
    pub positive: bool,
}

/// `eta_k = A (D1 D-1 - a1 a-1) / (|2 pi k|^2 [a1 V (D1 + a-1) + a-1 U (D-1 + a1)])`
/// for given multipliers `u_hat`, `v_hat`.
pub fn threshold_formula(
    lambda: f64,
    d_plus: f64,
    d_minus: f64,
    rates: &FlipRates,
    u_hat: f64,
    v_hat: f64,
) -> Threshold {
    let (a1, am1) = (rates.alpha_plus(), rates.alpha_minus());
    let bracket = a1 * v_hat * (d_plus + am1) + am1 * u_hat * (d_minus + a1);
    let num = rates.total() * (d_plus * d_minus - a1 * am1);
    let value = if bracket == 0.0 {
        f64::INFINITY
    } else {
        num / (lambda * bracket)
    };
    Threshold {
        value,
        bracket,
        positive: bracket > 0.0,
    }
}

pub fn eta_k(k: &[u32], spec: &PotentialSpec, diff: &DiffusionSpec, rates: &FlipRates) -> Result<Threshold> {
    let m = mode_data(k, spec, diff, rates)?;
    Ok(threshold_formula(m.lambda, m.d_plus, m.d_minus, rates, m.u_mult, m.v_mult))
}

fn symbol_from(m: &ModeData, eta: f64, rates: &FlipRates) -> [[f64; 2]; 2] {
    let uc = rates.alpha_minus() / rates.total();
    let vc = rates.alpha_plus() / rates.total();
    let a = eta * m.lambda;
    [
        [
            1.0 - a * uc * m.u_mult / m.d_plus,
            -(rates.alpha_minus() + a * uc * m.v_mult) / m.d_plus,
        ],
        [
            -(rates.alpha_plus() + a * vc * m.u_mult) / m.d_minus,
            1.0 - a * vc * m.v_mult / m.d_minus,
        ],
    ]
}

/// Linearized symbol `M(k, eta)` of the stationary map in mode `k`.
pub fn symbol_m(
    k: &[u32],
    eta: f64,
    spec: &PotentialSpec,
    diff: &DiffusionSpec,
    rates: &FlipRates,
) -> Result<[[f64; 2]; 2]> {
    Ok(symbol_from(&mode_data(k, spec, diff, rates)?, eta, rates))
}

/// `det M(k, eta)` with the `eta^2` terms cancelled analytically:
/// `det M = [D1 D-1 - a1 a-1 - eta |2 pi k|^2 (a-1 U (D-1 + a1) + a1 V (D1 + a-1)) / A] / (D1 D-1)`.
///
/// Agrees with [`det2`] of [`symbol_m`] but keeps full relative accuracy
/// when `eta |2 pi k|^2` is large, where the entry products cancel.
pub fn symbol_det(
    k: &[u32],
    eta: f64,
    spec: &PotentialSpec,
    diff: &DiffusionSpec,
    rates: &FlipRates,
) -> Result<f64> {
    let m = mode_data(k, spec, diff, rates)?;
    let (a1, am1) = (rates.alpha_plus(), rates.alpha_minus());
    let prod = m.d_plus * m.d_minus;
    let bracket = am1 * m.u_mult * (m.d_minus + a1) + a1 * m.v_mult * (m.d_plus + am1);
    Ok((prod - a1 * am1 - eta * m.lambda * bracket / rates.total()) / prod)
}

pub fn det2(m: &[[f64; 2]; 2]) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Unit null-vector candidate `(-M12, M11)`, or `(M22, -M21)` when `M12 = 0`.
pub fn null_vector(m: &[[f64; 2]; 2]) -> (f64, f64) {
    let (a, b) = if m[0][1] != 0.0 {
        (-m[0][1], m[0][0])
    } else {
        (m[1][1], -m[1][0])
    };
    let n = (a * a + b * b).sqrt();
    if n == 0.0 {
        (1.0, 0.0)
    } else {
        (a / n, b / n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeThreshold {
    pub mode: ModeData,
    pub threshold: Threshold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdReport {
    pub k_max: u32,
    pub modes: Vec<ModeThreshold>,
    pub k_star: Option<Vec<u32>>,
    pub eta_star: Option<f64>,
    /// (i): the minimal positive threshold is attained by a single mode.
    pub simple: bool,
    /// (ii): the bracket at `k*` is positive.
    pub positive: bool,
    /// (iii): the self-adjointness identity holds at `k*`.
    pub self_adjoint: bool,
    /// Relative residual of the identity checked for (iii).
    pub identity_residual: f64,
    pub null_vector: Option<(f64, f64)>,
    /// Transversality quantity for the unit null vector.
    pub q: Option<f64>,
    /// Set when `|q| < 1e-10`: transversality is then not asserted.
    pub q_small: bool,
    /// Modes tied with `k*` within the relative tolerance.
    pub ties: Vec<Vec<u32>>,
}

/// Scans `0 < |k|_inf <= k_max` and evaluates the bifurcation conditions
/// at the smallest positive threshold.
pub fn threshold_report(
    spec: &PotentialSpec,
    diff: &DiffusionSpec,
    rates: &FlipRates,
    k_max: u32,
) -> Result<ThresholdReport> {
    if k_max < 1 {
        return Err(invalid("k_max must be >= 1"));
    }
    let modes: Vec<ModeThreshold> = cube_indices(spec.dim(), k_max)
        .into_iter()
        .skip(1)
        .map(|k| {
            let mode = mode_data(&k, spec, diff, rates)?;
            let threshold = threshold_formula(mode.lambda, mode.d_plus, mode.d_minus, rates, mode.u_mult, mode.v_mult);
            Ok(ModeThreshold { mode, threshold })
        })
        .collect::<Result<_>>()?;
    let best = modes
        .iter()
        .filter(|m| m.threshold.positive && m.threshold.value.is_finite())
        .min_by(|a, b| a.threshold.value.total_cmp(&b.threshold.value));
    let mut report = ThresholdReport {
        k_max,
        modes: modes.clone(),
        k_star: None,
        eta_star: None,
        simple: false,
        positive: false,
        self_adjoint: false,
        identity_residual: f64::NAN,
        null_vector: None,
        q: None,
        q_small: false,
        ties: Vec::new(),
    };
    let Some(best) = best else {
        return Ok(report);
    };
    let eta = best.threshold.value;
    report.ties = modes
        .iter()
        .filter(|m| m.threshold.positive && (m.threshold.value - eta).abs() <= 1e-9 * eta.abs())
        .map(|m| m.mode.k.clone())
        .collect();
    report.simple = report.ties.len() == 1;
    report.positive = best.threshold.positive;
    report.k_star = Some(best.mode.k.clone());
    report.eta_star = Some(eta);

    let m = &best.mode;
    let (a1, am1) = (rates.alpha_plus(), rates.alpha_minus());
    let lhs = (am1 * m.d_minus - a1 * m.d_plus) * (a1 * m.v_mult * (m.d_plus + am1) + am1 * m.u_mult * (m.d_minus + a1));
    let rhs = (m.d_plus * m.d_minus - a1 * am1) * (a1 * m.u_mult * m.d_plus - am1 * m.v_mult * m.d_minus);
    let scale = (am1 * m.d_minus).abs().max((a1 * m.d_plus).abs())
        * (a1 * m.v_mult.abs() * (m.d_plus + am1) + am1 * m.u_mult.abs() * (m.d_minus + a1))
        .max((m.d_plus * m.d_minus) * (a1 * m.u_mult.abs() * m.d_plus + am1 * m.v_mult.abs() * m.d_minus))
        .max(f64::MIN_POSITIVE);
    report.identity_residual = (lhs - rhs).abs() / scale;
    report.self_adjoint = report.identity_residual <= 1e-9;

    let sym = symbol_from(m, eta, rates);
    let (h1, h2) = null_vector(&sym);
    let uc = am1 / rates.total();
    let vc = a1 / rates.total();
    let q = uc * m.d_minus * (m.u_mult * h1 * h1 + m.v_mult * h1 * h2)
        + vc * m.d_plus * (m.u_mult * h1 * h2 + m.v_mult * h2 * h2);
    report.null_vector = Some((h1, h2));
    report.q = Some(q);
    report.q_small = q.abs() < 1e-10;
    Ok(report)
}

/// Zero-mean even perturbation `(m, n)` of the homogeneous state.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationField {
    d: usize,
    k_max: u32,
    m: Vec<f64>,
    n: Vec<f64>,
}

impl PerturbationField {
    pub fn zero(d: usize, k_max: u32) -> Self {
        let len = (k_max as usize + 1).pow(d as u32);
        Self {
            d,
            k_max,
            m: vec![0.0; len],
            n: vec![0.0; len],
        }
    }

    /// `eps * (h1, h2) w_k`.
    pub fn single_mode(d: usize, k_max: u32, k: &[u32], h: (f64, f64), eps: f64) -> Result<Self> {
        let mut p = Self::zero(d, k_max);
        p.set(k, eps * h.0, eps * h.1)?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn k_max(&self) -> u32 {
        self.k_max
    }

    fn index(&self, k: &[u32]) -> Option<usize> {
        if k.len() != self.d || k.iter().any(|&c| c > self.k_max) {
            return None;
        }
        let side = self.k_max as usize + 1;
        Some(k.iter().fold(0usize, |acc, &c| acc * side + c as usize))
    }

    pub fn get(&self, k: &[u32]) -> Option<(f64, f64)> {
        self.index(k).map(|i| (self.m[i], self.n[i]))
    }

    pub fn set(&mut self, k: &[u32], m: f64, n: f64) -> Result<()> {
        let i = self.index(k).ok_or_else(|| invalid(format!("mode {k:?} outside the field")))?;
        if i == 0 {
            return Err(invalid("perturbations have no constant mode"));
        }
        self.m[i] = m;
        self.n[i] = n;
        Ok(())
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn n(&self) -> &[f64] {
        &self.n
    }

    /// `sqrt(m(k)^2 + n(k)^2)`.
    pub fn amplitude(&self, k: &[u32]) -> f64 {
        self.get(k).map(|(a, b)| (a * a + b * b).sqrt()).unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        self.m.iter().chain(&self.n).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `(u_c + m, v_c + n)` as a density field.
    pub fn to_field(&self, rates: &FlipRates) -> SpectralField {
        let law = rates.stationary();
        let mut u = self.m.clone();
        let mut v = self.n.clone();
        u[0] = law.p_plus();
        v[0] = law.p_minus();
        SpectralField::new(self.d, self.k_max, u, v, 0.0).expect("consistent layout")
    }

    /// Non-constant part of a field.
    pub fn from_field(field: &SpectralField) -> Self {
        let mut m = field.u().to_vec();
        let mut n = field.v().to_vec();
        m[0] = 0.0;
        n[0] = 0.0;
        Self {
            d: field.dim(),
            k_max: field.k_max(),
            m,
            n,
        }
    }

    fn pack(&self) -> DVector<f64> {
        DVector::from_iterator(
            2 * (self.m.len() - 1),
            self.m[1..].iter().chain(&self.n[1..]).copied(),
        )
    }

    fn unpack(&self, z: &DVector<f64>) -> Self {
        let h = self.m.len() - 1;
        let mut out = self.clone();
        out.m[1..].copy_from_slice(&z.as_slice()[..h]);
        out.n[1..].copy_from_slice(&z.as_slice()[h..]);
        out
    }
}

/// Evaluator of the nonlinear stationary map at a fixed `eta`.
#[derive(Debug)]
pub struct PhiMap {
    solver: PdeSolver,
    d_plus: Vec<f64>,
    d_minus: Vec<f64>,
    rates: FlipRates,
}

impl PhiMap {
    pub fn new(
        eta: f64,
        spec: &PotentialSpec,
        diff: &DiffusionSpec,
        rates: &FlipRates,
        k_max: u32,
        grid_n: usize,
    ) -> Result<Self> {
        if grid_n < 4 * k_max as usize {
            return Err(invalid("grid_n must be at least 4 k_max"));
        }
        let scaled = spec.with_eta_scale(eta.abs())?;
        if eta < 0.0 {
            return Err(invalid("eta must be non-negative"));
        }
        let solver = PdeSolver::with_grid(&scaled, diff, rates, k_max, 1.0, grid_n)?;
        let ks = cube_indices(spec.dim(), k_max);
        let d_plus = ks
            .iter()
            .map(|k| diff.sigma_plus().powi(2) / 2.0 * torus::laplace_symbol(k) + rates.alpha_plus())
            .collect();
        let d_minus = ks
            .iter()
            .map(|k| diff.sigma_minus().powi(2) / 2.0 * torus::laplace_symbol(k) + rates.alpha_minus())
            .collect();
        Ok(Self {
            solver,
            d_plus,
            d_minus,
            rates: *rates,
        })
    }

    /// `Phi((m, n), eta)`; equals minus the stationary residual divided by `D_l(k)`.
    pub fn eval(&self, r: &PerturbationField) -> Result<PerturbationField> {
        if r.k_max != self.solver.k_max() {
            return Err(invalid("perturbation cutoff does not match"));
        }
        let (ru, rv) = self.solver.residual(&r.to_field(&self.rates))?;
        let mut out = PerturbationField::zero(r.d, r.k_max);
        for i in 1..ru.len() {
            out.m[i] = -ru[i] / self.d_plus[i];
            out.n[i] = -rv[i] / self.d_minus[i];
        }
        Ok(out)
    }
}

pub fn phi_map(
    r: &PerturbationField,
    eta: f64,
    spec: &PotentialSpec,
    diff: &DiffusionSpec,
    rates: &FlipRates,
    grid_n: usize,
) -> Result<PerturbationField> {
    PhiMap::new(eta, spec, diff, rates, r.k_max, grid_n)?.eval(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchPoint {
    pub eta: f64,
    pub field: PerturbationField,
    pub amplitude: f64,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchOptions {
    /// Size of the kernel-direction seed.
    pub seed_amplitude: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Amplitudes below this count as the trivial solution.
    pub collapse: f64,
}

impl Default for BranchOptions {
    fn default() -> Self {
        Self {
            seed_amplitude: 0.1,
            tol: 1e-10,
            max_iter: 50,
            collapse: 1e-8,
        }
    }
}

/// Newton iteration for `Phi(., eta) = 0` from `start`; returns the last
/// iterate and the residual history.
pub fn newton_solve(map: &PhiMap, start: &PerturbationField, opts: &BranchOptions) -> Result<(PerturbationField, Vec<f64>)> {
    let eval = |z: &DVector<f64>| -> Result<DVector<f64>> { Ok(map.eval(&start.unpack(z))?.pack()) };
    let mut z = start.pack();
    let mut r = eval(&z)?;
    let mut history = vec![r.norm()];
    for _ in 0..opts.max_iter {
        if r.norm() < opts.tol {
            break;
        }
        let n = z.len();
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let h = 1e-7 * z[j].abs().max(1e-3);
            let mut zp = z.clone();
            zp[j] += h;
            jac.set_column(j, &((eval(&zp)? - &r) / h));
        }
        let Some(step) = jac.lu().solve(&(-&r)) else {
            break;
        };
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &z + &step * lambda;
            let rt = eval(&trial)?;
            if rt.norm() < r.norm() {
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
    if r.norm() < opts.tol {
        Ok((start.unpack(&z), history))
    } else {
        Err(Error::NonConvergence {
            iterations: history.len(),
            last_residual: r.norm(),
            residuals: history,
        })
    }
}

/// Newton from the kernel seed, doubling the seed (up to `MAX_DOUBLINGS`
/// times) while the iteration lands on the trivial solution. Returns the
/// seed used for the last attempt and its outcome; a collapse is reported
/// as a converged trivial solution.
fn seeded_solve(
    map: &PhiMap,
    seed: &PerturbationField,
    k_star: &[u32],
    opts: &BranchOptions,
) -> (PerturbationField, Result<(PerturbationField, Vec<f64>)>) {
    const MAX_DOUBLINGS: usize = 8;
    let mut trivial = None;
    let mut start = seed.clone();
    for _ in 0..=MAX_DOUBLINGS {
        match newton_solve(map, &start, opts) {
            Ok((field, hist)) if field.amplitude(k_star) >= opts.collapse => return (start, Ok((field, hist))),
            Ok(res) => {
                trivial.get_or_insert(res);
            }
            Err(_) => {}
        }
        start.m.iter_mut().chain(start.n.iter_mut()).for_each(|c| *c *= 2.0);
    }
    match trivial {
        Some(res) => (seed.clone(), Ok(res)),
        None => (seed.clone(), newton_solve(map, seed, opts)),
    }
}

/// Natural-parameter continuation over `steps` equally spaced values from
/// `eta_start` to `eta_end`. The first point, and any point following a
/// collapse to the trivial solution, is seeded from the kernel direction of
/// `M(k*, eta_*)` (see [`seeded_solve`] for the seed escalation). A Newton
/// failure ends the branch.
#[allow(clippy::too_many_arguments)]
pub fn newton_branch(
    eta_start: f64,
    eta_end: f64,
    steps: usize,
    spec: &PotentialSpec,
    diff: &DiffusionSpec,
    rates: &FlipRates,
    k_max: u32,
    opts: &BranchOptions,
) -> Result<Vec<BranchPoint>> {
    if steps < 1 {
        return Err(invalid("need at least one continuation step"));
    }
    let report = threshold_report(spec, diff, rates, k_max)?;
    let k_star = report
        .k_star
        .clone()
        .ok_or_else(|| invalid("no positive threshold in the scanned box"))?;
    let h = report.null_vector.expect("present with k*");
    let seed = PerturbationField::single_mode(spec.dim(), k_max, &k_star, h, opts.seed_amplitude)?;
    let grid_n = 4 * k_max as usize;
    let mut out = Vec::with_capacity(steps);
    let mut prev: Option<PerturbationField> = None;
    for s in 0..steps {
        let eta = if steps == 1 {
            eta_start
        } else {
            eta_start + (eta_end - eta_start) * s as f64 / (steps - 1) as f64
        };
        let map = PhiMap::new(eta, spec, diff, rates, k_max, grid_n)?;
        let (start, attempt) = match &prev {
            Some(p) => (p.clone(), newton_solve(&map, p, opts)),
            None => seeded_solve(&map, &seed, &k_star, opts),
        };
        match attempt {
            Ok((field, hist)) => {
                let amplitude = field.amplitude(&k_star);
                let collapsed = amplitude < opts.collapse;
                out.push(BranchPoint {
                    eta,
                    amplitude,
                    residual: *hist.last().unwrap(),
                    converged: true,
                    field: field.clone(),
                });
                prev = if collapsed { None } else { Some(field) };
            }
            Err(Error::NonConvergence { last_residual, .. }) => {
                log::warn!("branch truncated at eta = {eta}: Newton residual {last_residual:e}");
                out.push(BranchPoint {
                    eta,
                    amplitude: f64::NAN,
                    residual: last_residual,
                    converged: false,
                    field: start,
                });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
