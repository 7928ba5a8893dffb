//! Interaction potentials `U`, `V` as finite cosine series and the force
//! kernel `F(., +1) = grad U`, `F(., -1) = grad V`.
//!
//! Coefficients are stored in raw form: `U(x) = sum_k a_k prod_i cos(2 pi k_i x_i)`.
//! Two derived scalings appear elsewhere:
//!
//! * basis coefficient `<U, w_k> = a_k / N_k` (what the orthonormal basis sees),
//! * convolution multiplier `a_k / 2^{m(k)} = <U, w_k> / N_k`, with `m(k)` the
//!   number of nonzero components, so that `U * w_k = multiplier * w_k`.
//!
//! The effective potential used by simulators is `eta_scale * U`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::meanfield::SpectralField;
use crate::spin::Spin;
use crate::torus::{self, cos_product_gradient, cube_indices, diameter, TorusPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialMode {
    pub k: Vec<u32>,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSpec {
    d: usize,
    modes: Vec<PotentialMode>,
    eta_scale: f64,
}

/// Lower (grid) and upper (analytic) estimates of the constant `eta` in
/// `|F(x,y) - F(w,y)| <= eta f(|x - w|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    pub grid_lower: f64,
    pub analytic_upper: f64,
    /// Set when the grid search did not exceed the analytic bound.
    pub certified: bool,
}

impl LipschitzEstimate {
    /// The value used for gating: the analytic upper bound.
    pub fn eta(&self) -> f64 {
        self.analytic_upper
    }
}

impl PotentialSpec {
    pub fn new(d: usize, modes: Vec<PotentialMode>, eta_scale: f64) -> Result<Self> {
        if d == 0 || d > 8 {
            return Err(invalid(format!("unsupported dimension {d}")));
        }
        if !(eta_scale >= 0.0 && eta_scale.is_finite()) {
            return Err(invalid("eta_scale must be finite and >= 0"));
        }
        for (i, m) in modes.iter().enumerate() {
            if m.k.len() != d {
                return Err(invalid(format!("mode {:?} has wrong dimension", m.k)));
            }
            if m.k.iter().all(|&c| c == 0) {
                return Err(invalid("the constant mode k = 0 carries no force"));
            }
            if !(m.u.is_finite() && m.v.is_finite()) {
                return Err(invalid("potential coefficients must be finite"));
            }
            if modes[..i].iter().any(|o| o.k == m.k) {
                return Err(invalid(format!("duplicate mode {:?}", m.k)));
            }
        }
        Ok(Self {
            d,
            modes,
            eta_scale,
        })
    }

    pub fn zero(d: usize) -> Self {
        Self {
            d,
            modes: Vec::new(),
            eta_scale: 0.0,
        }
    }

    /// Same coefficients with a different overall strength.
    pub fn with_eta_scale(&self, eta_scale: f64) -> Result<Self> {
        Self::new(self.d, self.modes.clone(), eta_scale)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn modes(&self) -> &[PotentialMode] {
        &self.modes
    }

    pub fn eta_scale(&self) -> f64 {
        self.eta_scale
    }

    pub fn is_zero(&self) -> bool {
        self.eta_scale == 0.0 || self.modes.iter().all(|m| m.u == 0.0 && m.v == 0.0)
    }

    /// Largest mode component present.
    pub fn max_component(&self) -> u32 {
        self.modes
            .iter()
            .flat_map(|m| m.k.iter().copied())
            .max()
            .unwrap_or(0)
    }

    fn raw(&self, k: &[u32]) -> (f64, f64) {
        self.modes
            .iter()
            .find(|m| m.k == k)
            .map(|m| (m.u, m.v))
            .unwrap_or((0.0, 0.0))
    }

    /// Unscaled basis coefficients `(<U, w_k>, <V, w_k>)`.
    pub fn basis_coefficients(&self, k: &[u32]) -> (f64, f64) {
        let (u, v) = self.raw(k);
        let nk = torus::normalization(k);
        (u / nk, v / nk)
    }

    /// Unscaled convolution multipliers: `U * w_k = mult_U(k) w_k`.
    pub fn convolution_multipliers(&self, k: &[u32]) -> (f64, f64) {
        let (u, v) = self.raw(k);
        let nk = torus::normalization(k);
        (u / (nk * nk), v / (nk * nk))
    }

    /// Effective force `F(r, y)` for a minimal displacement `r`.
    pub fn force_into(&self, r: &[f64], y: Spin, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        if self.eta_scale == 0.0 {
            return;
        }
        let mut g = [0.0f64; 8];
        for m in &self.modes {
            let a = match y {
                Spin::Plus => m.u,
                Spin::Minus => m.v,
            } * self.eta_scale;
            if a == 0.0 {
                continue;
            }
            cos_product_gradient(&m.k, r, &mut g[..self.d]);
            for (o, gj) in out.iter_mut().zip(&g[..self.d]) {
                *o += a * gj;
            }
        }
    }

    pub fn force(&self, r: &[f64], y: Spin) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.force_into(r, y, &mut out);
        out
    }

    /// Coefficient-sum bound on the operator norm of the Hessians of the
    /// effective `U` and `V`.
    pub fn hessian_bound(&self) -> f64 {
        let four_pi2 = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
        let (mut su, mut sv) = (0.0, 0.0);
        for m in &self.modes {
            let k2: f64 = m.k.iter().map(|&c| (c as f64).powi(2)).sum();
            su += m.u.abs() * four_pi2 * k2;
            sv += m.v.abs() * four_pi2 * k2;
        }
        self.eta_scale * su.max(sv)
    }

    /// Grid lower bound and analytic upper bound on `eta`.
    ///
    /// The upper bound combines `|F(x)-F(w)| <= sup|D^2| |x-w|` with
    /// `|x-w| <= (sqrt d / 2) f(|x-w|)`.
    pub fn estimate_eta(&self, grid_n: usize) -> Result<LipschitzEstimate> {
        if grid_n < 16 {
            return Err(invalid("grid_n must be >= 16"));
        }
        if self.is_zero() {
            return Ok(LipschitzEstimate {
                grid_lower: 0.0,
                analytic_upper: 0.0,
                certified: true,
            });
        }
        let d = self.d;
        let analytic_upper = diameter(d) * self.hessian_bound();
        let nodes: Vec<Vec<f64>> = cube_indices(d, grid_n as u32 - 1)
            .into_iter()
            .map(|k| k.iter().map(|&j| j as f64 / grid_n as f64).collect())
            .collect();
        let mut grid_lower: f64 = 0.0;
        for y in [Spin::Plus, Spin::Minus] {
            let forces: Vec<Vec<f64>> = nodes.iter().map(|x| self.force(x, y)).collect();
            for (a, (xa, fa)) in nodes.iter().zip(&forces).enumerate() {
                for (xb, fb) in nodes[a + 1..].iter().zip(&forces[a + 1..]) {
                    let r = torus::distance_slices(xa, xb);
                    let denom = torus::comparison_f(r, d)?;
                    let num = fa
                        .iter()
                        .zip(fb)
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum::<f64>()
                        .sqrt();
                    grid_lower = grid_lower.max(num / denom);
                }
            }
        }
        Ok(LipschitzEstimate {
            grid_lower,
            analytic_upper,
            certified: grid_lower <= analytic_upper * (1.0 + 1e-12),
        })
    }

    /// Effective drift `(F ⊛ rho)(x) = grad(U * u + V * v)(x)`, evaluated
    /// from the cosine coefficients of `rho` through the convolution
    /// multipliers. Exact for band-limited densities.
    pub fn mean_field_drift(&self, x: &TorusPoint, rho: &SpectralField) -> Result<Vec<f64>> {
        if x.dim() != self.d || rho.dim() != self.d {
            return Err(invalid("dimension mismatch in mean_field_drift"));
        }
        let mut out = vec![0.0; self.d];
        let mut g = [0.0f64; 8];
        for m in &self.modes {
            let Some((uk, vk)) = rho.coefficient(&m.k) else {
                continue;
            };
            let (mu, mv) = self.convolution_multipliers(&m.k);
            let gk = self.eta_scale * (mu * uk + mv * vk);
            if gk == 0.0 {
                continue;
            }
            let nk = torus::normalization(&m.k);
            cos_product_gradient(&m.k, x.coords(), &mut g[..self.d]);
            for (o, gj) in out.iter_mut().zip(&g[..self.d]) {
                *o += gk * nk * gj;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin::SpinLaw;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn cos1(u: f64, v: f64, scale: f64) -> PotentialSpec {
        PotentialSpec::new(1, vec![PotentialMode { k: vec![1], u, v }], scale).unwrap()
    }

    fn two_d() -> PotentialSpec {
        PotentialSpec::new(
            2,
            vec![
                PotentialMode { k: vec![1, 0], u: 0.7, v: -0.2 },
                PotentialMode { k: vec![1, 2], u: 0.3, v: 0.5 },
                PotentialMode { k: vec![0, 1], u: -0.4, v: 0.1 },
            ],
            0.8,
        )
        .unwrap()
    }

    #[test]
    fn force_vanishes_at_origin() {
        for spec in [cos1(1.0, -2.0, 1.0), two_d()] {
            let zero = vec![0.0; spec.dim()];
            for y in [Spin::Plus, Spin::Minus] {
                assert!(spec.force(&zero, y).iter().all(|&f| f == 0.0));
            }
        }
    }

    #[test]
    fn single_mode_force_value() {
        let f = cos1(1.0, 0.0, 1.0).force(&[0.25], Spin::Plus);
        assert!((f[0] + 2.0 * PI).abs() < 1e-12);
        assert_eq!(cos1(1.0, 0.0, 1.0).force(&[0.25], Spin::Minus)[0], 0.0);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(PotentialSpec::new(1, vec![PotentialMode { k: vec![0], u: 1.0, v: 1.0 }], 1.0).is_err());
        assert!(PotentialSpec::new(1, vec![], -1.0).is_err());
        let dup = vec![
            PotentialMode { k: vec![1], u: 1.0, v: 1.0 },
            PotentialMode { k: vec![1], u: 2.0, v: 1.0 },
        ];
        assert!(PotentialSpec::new(1, dup, 1.0).is_err());
        assert!(PotentialSpec::new(2, vec![PotentialMode { k: vec![1], u: 1.0, v: 1.0 }], 1.0).is_err());
    }

    #[test]
    fn eta_examples() {
        let z = PotentialSpec::zero(1).estimate_eta(16).unwrap();
        assert_eq!((z.grid_lower, z.analytic_upper, z.certified), (0.0, 0.0, true));

        let e = cos1(1.0, 0.0, 1.0).estimate_eta(64).unwrap();
        assert!((e.analytic_upper - 2.0 * PI * PI).abs() < 1e-12);
        assert!(e.grid_lower <= e.analytic_upper);
        assert!(e.certified);
        assert!(e.grid_lower > 0.5 * e.analytic_upper);

        let e2 = cos1(2.0, 0.0, 1.0).estimate_eta(64).unwrap();
        assert!((e2.analytic_upper - 2.0 * e.analytic_upper).abs() < 1e-12);
        assert!((e2.grid_lower - 2.0 * e.grid_lower).abs() < 1e-12);

        assert!(PotentialSpec::zero(1).estimate_eta(8).is_err());
    }

    #[test]
    fn eta_certified_in_2d() {
        let e = two_d().estimate_eta(16).unwrap();
        assert!(e.certified && e.grid_lower > 0.0);
    }

    #[test]
    fn force_bounded_by_eta_f() {
        let spec = two_d();
        let eta = spec.estimate_eta(16).unwrap().eta();
        let n = 40;
        for i in 0..n {
            for j in 0..n {
                let x = [i as f64 / n as f64, j as f64 / n as f64];
                let mut r = [0.0; 2];
                torus::displacement_into(&x, &[0.0, 0.0], &mut r);
                let dist = (r[0] * r[0] + r[1] * r[1]).sqrt();
                let bound = eta * torus::comparison_f(dist, 2).unwrap();
                for y in [Spin::Plus, Spin::Minus] {
                    let f = spec.force(&r, y);
                    let norm = (f[0] * f[0] + f[1] * f[1]).sqrt();
                    assert!(norm <= bound + 1e-12);
                    assert!(bound <= eta + 1e-12);
                }
            }
        }
    }

    #[test]
    fn coefficient_scalings() {
        let spec = cos1(1.0, 0.0, 1.0);
        let (u, _) = spec.basis_coefficients(&[1]);
        assert!((u - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        let (mu, _) = spec.convolution_multipliers(&[1]);
        assert!((mu - 0.5).abs() < 1e-15);
        assert_eq!(spec.basis_coefficients(&[3]), (0.0, 0.0));
    }

    fn single_mode_density(mass: f64) -> SpectralField {
        // rho(., +1) = mass (1 + cos 2 pi x), rho(., -1) = (1 - mass)
        let mut f = SpectralField::homogeneous(1, 4, SpinLaw::new(mass).unwrap()).unwrap();
        f.set_coefficient(&[1], mass / 2f64.sqrt(), 0.0).unwrap();
        f
    }

    #[test]
    fn drift_of_homogeneous_density_vanishes() {
        let spec = cos1(1.3, -0.4, 1.0);
        let rho = SpectralField::homogeneous(1, 8, SpinLaw::new(0.3).unwrap()).unwrap();
        for i in 0..20 {
            let x = TorusPoint::new(vec![i as f64 / 20.0]).unwrap();
            assert!(spec.mean_field_drift(&x, &rho).unwrap().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn drift_single_mode_closed_form() {
        let uc = 0.6;
        let spec = cos1(1.0, 0.0, 1.0);
        let rho = single_mode_density(uc);
        for i in 0..50 {
            let x = i as f64 / 50.0;
            let b = spec
                .mean_field_drift(&TorusPoint::new(vec![x]).unwrap(), &rho)
                .unwrap()[0];
            let expect = -uc * PI * (2.0 * PI * x).sin();
            assert!((b - expect).abs() < 1e-13);
            // crosscheck by quadrature of the defining convolution
            let n = 256;
            let quad: f64 = (0..n)
                .map(|j| {
                    let z = (j as f64 + 0.5) / n as f64;
                    let dens = uc * (1.0 + (2.0 * PI * z).cos());
                    let mut r = [0.0];
                    torus::displacement_into(&[x], &[z], &mut r);
                    spec.force(&r, Spin::Plus)[0] * dens
                })
                .sum::<f64>()
                / n as f64;
            assert!((quad - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn drift_swap_symmetry() {
        let spec = two_d();
        let swapped = PotentialSpec::new(
            2,
            spec.modes()
                .iter()
                .map(|m| PotentialMode { k: m.k.clone(), u: m.v, v: m.u })
                .collect(),
            spec.eta_scale(),
        )
        .unwrap();
        let mut rho = SpectralField::homogeneous(2, 3, SpinLaw::new(0.4).unwrap()).unwrap();
        rho.set_coefficient(&[1, 0], 0.05, -0.02).unwrap();
        rho.set_coefficient(&[1, 2], 0.01, 0.03).unwrap();
        rho.set_coefficient(&[0, 1], -0.04, 0.02).unwrap();
        let sw = rho.swapped_species();
        let x = TorusPoint::new(vec![0.17, 0.61]).unwrap();
        let a = spec.mean_field_drift(&x, &rho).unwrap();
        let b = swapped.mean_field_drift(&x, &sw).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn spectral_drift_matches_quadrature_2d() {
        let spec = two_d();
        let mut rho = SpectralField::homogeneous(2, 3, SpinLaw::new(0.4).unwrap()).unwrap();
        rho.set_coefficient(&[1, 0], 0.05, -0.02).unwrap();
        rho.set_coefficient(&[1, 2], 0.01, 0.03).unwrap();
        rho.set_coefficient(&[2, 1], -0.04, 0.02).unwrap();
        let n = 24;
        let (gu, gv) = rho.grid_values(n);
        let x = [0.31, 0.77];
        let mut quad = [0.0; 2];
        for i in 0..n {
            for j in 0..n {
                let z = [i as f64 / n as f64, j as f64 / n as f64];
                let mut r = [0.0; 2];
                torus::displacement_into(&x, &z, &mut r);
                let fu = spec.force(&r, Spin::Plus);
                let fv = spec.force(&r, Spin::Minus);
                let idx = i * n + j;
                for c in 0..2 {
                    quad[c] += (fu[c] * gu[idx] + fv[c] * gv[idx]) / (n * n) as f64;
                }
            }
        }
        let b = spec
            .mean_field_drift(&TorusPoint::new(x.to_vec()).unwrap(), &rho)
            .unwrap();
        for c in 0..2 {
            assert!((b[c] - quad[c]).abs() < 1e-8, "{} vs {}", b[c], quad[c]);
        }
    }

    proptest! {
        #[test]
        fn force_is_odd(x in -0.5f64..0.5, y in -0.5f64..0.5) {
            let spec = two_d();
            for s in [Spin::Plus, Spin::Minus] {
                let a = spec.force(&[x, y], s);
                let b = spec.force(&[-x, -y], s);
                prop_assert!((a[0] + b[0]).abs() < 1e-13 && (a[1] + b[1]).abs() < 1e-13);
            }
        }

        #[test]
        fn action_reaction(x in proptest::collection::vec(0.0f64..1.0, 2),
                           w in proptest::collection::vec(0.0f64..1.0, 2)) {
            let spec = two_d();
            let mut r1 = [0.0; 2];
            let mut r2 = [0.0; 2];
            torus::displacement_into(&x, &w, &mut r1);
            torus::displacement_into(&w, &x, &mut r2);
            for s in [Spin::Plus, Spin::Minus] {
                let a = spec.force(&r1, s);
                let b = spec.force(&r2, s);
                prop_assert!((a[0] + b[0]).abs() < 1e-12 && (a[1] + b[1]).abs() < 1e-12);
            }
        }
    }
}
