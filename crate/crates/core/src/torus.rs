//! Geometry of the flat unit torus `T^d = R^d / Z^d`.
//!
//! Points are stored as unit-cell representatives in `[0,1)^d`. Distances are
//! computed coordinate-wise: the unit cell is a product, so the minimal
//! integer shift can be chosen independently per axis.

use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};

/// Maps a real coordinate onto its representative in `[0, 1)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let r = x - x.floor();
    // x slightly below an integer can round up to exactly 1.0
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Minimal representative of a coordinate difference, in `[-1/2, 1/2)`.
///
/// A difference of exactly `±1/2` maps to `-1/2`.
#[inline]
pub fn wrap_signed(delta: f64) -> f64 {
    let r = delta - (delta + 0.5).floor();
    if r >= 0.5 {
        r - 1.0
    } else {
        r
    }
}

/// Writes the minimal representative of `x - w` into `out`.
#[inline]
pub fn displacement_into(x: &[f64], w: &[f64], out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(x).zip(w) {
        *o = wrap_signed(a - b);
    }
}

/// Torus distance between two coordinate slices of equal length.
#[inline]
pub fn distance_slices(x: &[f64], w: &[f64]) -> f64 {
    x.iter()
        .zip(w)
        .map(|(a, b)| {
            let r = wrap_signed(a - b);
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// Diameter of the unit torus in dimension `d`.
#[inline]
pub fn diameter(d: usize) -> f64 {
    (d as f64).sqrt() / 2.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

impl TorusPoint {
    /// Builds a point, wrapping every coordinate into `[0,1)`.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(invalid("torus point needs dimension >= 1"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(invalid("torus point coordinates must be finite"));
        }
        Ok(Self {
            coords: coords.into_iter().map(wrap).collect(),
        })
    }

    pub fn origin(d: usize) -> Self {
        Self {
            coords: vec![0.0; d.max(1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

fn check_dims(x: &TorusPoint, w: &TorusPoint) -> Result<()> {
    if x.dim() != w.dim() {
        return Err(invalid(format!(
            "dimension mismatch: {} vs {}",
            x.dim(),
            w.dim()
        )));
    }
    Ok(())
}

pub fn torus_distance(x: &TorusPoint, w: &TorusPoint) -> Result<f64> {
    check_dims(x, w)?;
    Ok(distance_slices(&x.coords, &w.coords))
}

/// Representative of `x - w` in `[-1/2, 1/2)^d`.
pub fn torus_displacement(x: &TorusPoint, w: &TorusPoint) -> Result<Vec<f64>> {
    check_dims(x, w)?;
    let mut out = vec![0.0; x.dim()];
    displacement_into(&x.coords, &w.coords, &mut out);
    Ok(out)
}

/// `sin(pi r / sqrt(d))` without the domain check.
#[inline]
pub fn comparison_f_unchecked(r: f64, d: usize) -> f64 {
    (PI * r / (d as f64).sqrt()).sin()
}

/// The comparison function `f(r) = sin(pi r / sqrt(d))` on `[0, sqrt(d)/2]`.
///
/// Two-sided equivalent to the identity: `(2/sqrt d) r <= f(r) <= (pi/sqrt d) r`.
pub fn comparison_f(r: f64, d: usize) -> Result<f64> {
    if d == 0 {
        return Err(invalid("dimension must be >= 1"));
    }
    let diam = diameter(d);
    if !(0.0..=diam * (1.0 + 1e-12)).contains(&r) {
        return Err(Error::Domain(format!(
            "comparison function argument {r} outside [0, {diam}]"
        )));
    }
    Ok(comparison_f_unchecked(r.min(diam), d))
}

/// Index of an even-subspace cosine basis function `w_k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BasisIndex {
    k: Vec<u32>,
}

impl BasisIndex {
    pub fn new(k: Vec<u32>) -> Result<Self> {
        if k.is_empty() {
            return Err(invalid("basis index needs dimension >= 1"));
        }
        Ok(Self { k })
    }

    pub fn zero(d: usize) -> Self {
        Self { k: vec![0; d] }
    }

    pub fn components(&self) -> &[u32] {
        &self.k
    }

    pub fn dim(&self) -> usize {
        self.k.len()
    }

    pub fn is_zero(&self) -> bool {
        self.k.iter().all(|&c| c == 0)
    }

    /// Number of nonzero components.
    pub fn support_size(&self) -> u32 {
        self.k.iter().filter(|&&c| c != 0).count() as u32
    }

    /// `N_k = prod_i (2 - delta_{k_i,0})^{1/2}`.
    pub fn norm_factor(&self) -> f64 {
        normalization(&self.k)
    }

    /// `|2 pi k|^2`.
    pub fn laplace_symbol(&self) -> f64 {
        laplace_symbol(&self.k)
    }

    pub fn max_component(&self) -> u32 {
        self.k.iter().copied().max().unwrap_or(0)
    }
}

#[inline]
pub(crate) fn normalization(k: &[u32]) -> f64 {
    let m = k.iter().filter(|&&c| c != 0).count() as i32;
    2f64.powi(m).sqrt()
}

#[inline]
pub(crate) fn laplace_symbol(k: &[u32]) -> f64 {
    let s: f64 = k.iter().map(|&c| (c as f64) * (c as f64)).sum();
    4.0 * PI * PI * s
}

/// `w_k(x) = N_k prod_i cos(2 pi k_i x_i)`.
pub fn basis_eval(k: &BasisIndex, x: &TorusPoint) -> Result<f64> {
    if k.dim() != x.dim() {
        return Err(invalid("basis index and point dimensions differ"));
    }
    Ok(basis_eval_slice(&k.k, &x.coords))
}

#[inline]
pub(crate) fn basis_eval_slice(k: &[u32], x: &[f64]) -> f64 {
    normalization(k)
        * k.iter()
            .zip(x)
            .map(|(&ki, &xi)| (2.0 * PI * ki as f64 * xi).cos())
            .product::<f64>()
}

/// Gradient of `prod_i cos(2 pi k_i x_i)` (without `N_k`), written into `out`.
#[inline]
pub(crate) fn cos_product_gradient(k: &[u32], x: &[f64], out: &mut [f64]) {
    let d = k.len();
    let mut c = [0.0f64; 8];
    let mut s = [0.0f64; 8];
    debug_assert!(d <= 8);
    for i in 0..d {
        let (si, ci) = (2.0 * PI * k[i] as f64 * x[i]).sin_cos();
        c[i] = ci;
        s[i] = si;
    }
    for j in 0..d {
        let mut g = -2.0 * PI * k[j] as f64 * s[j];
        for (i, ci) in c[..d].iter().enumerate() {
            if i != j {
                g *= ci;
            }
        }
        out[j] = g;
    }
}

/// All multi-indices `k` with `0 <= k_i <= k_max`, in row-major order.
pub fn cube_indices(d: usize, k_max: u32) -> Vec<Vec<u32>> {
    let side = k_max as usize + 1;
    let total = side.pow(d as u32);
    (0..total)
        .map(|mut flat| {
            let mut k = vec![0u32; d];
            for slot in k.iter_mut().rev() {
                *slot = (flat % side) as u32;
                flat /= side;
            }
            k
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(c: &[f64]) -> TorusPoint {
        TorusPoint::new(c.to_vec()).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert!((torus_distance(&p(&[0.3]), &p(&[0.9])).unwrap() - 0.4).abs() < 1e-15);
        let diag = torus_distance(&p(&[0.0, 0.0]), &p(&[0.5, 0.5])).unwrap();
        assert!((diag - 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(torus_distance(&p(&[0.42]), &p(&[0.42])).unwrap(), 0.0);
        assert!(torus_distance(&p(&[0.1]), &p(&[0.1, 0.2])).is_err());
    }

    #[test]
    fn displacement_examples() {
        let a = torus_displacement(&p(&[0.1]), &p(&[0.9])).unwrap();
        assert!((a[0] - 0.2).abs() < 1e-15);
        let b = torus_displacement(&p(&[0.9]), &p(&[0.1])).unwrap();
        assert!((b[0] + 0.2).abs() < 1e-15);
        let z = torus_displacement(&p(&[0.25, 0.5]), &p(&[0.25, 0.5])).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
        // half-open tie convention
        assert_eq!(wrap_signed(0.5), -0.5);
        assert_eq!(wrap_signed(-0.5), -0.5);
    }

    #[test]
    fn wrap_stays_in_unit_cell() {
        assert_eq!(wrap(-1e-18), 0.0);
        assert_eq!(wrap(1.0), 0.0);
        assert!((wrap(-0.25) - 0.75).abs() < 1e-15);
        assert!((wrap(3.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn comparison_examples() {
        assert_eq!(comparison_f(0.0, 3).unwrap(), 0.0);
        for d in 1..=4 {
            assert!((comparison_f(diameter(d), d).unwrap() - 1.0).abs() < 1e-15);
        }
        assert!((comparison_f(0.25, 1).unwrap() - 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert!(matches!(comparison_f(0.6, 1), Err(Error::Domain(_))));
        assert!(matches!(comparison_f(-0.1, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn linear_equivalence_on_samples() {
        for d in 1..=3 {
            let diam = diameter(d);
            for i in 0..=10_000 {
                let r = diam * i as f64 / 10_000.0;
                let f = comparison_f(r, d).unwrap();
                let sd = (d as f64).sqrt();
                assert!(2.0 / sd * r <= f + 1e-15, "lower bound at r={r}");
                assert!(f <= PI / sd * r + 1e-15, "upper bound at r={r}");
            }
        }
    }

    #[test]
    fn basis_examples() {
        assert_eq!(
            basis_eval(&BasisIndex::zero(2), &p(&[0.3, 0.7])).unwrap(),
            1.0
        );
        let k1 = BasisIndex::new(vec![1]).unwrap();
        assert!((basis_eval(&k1, &p(&[0.0])).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(basis_eval(&k1, &p(&[0.25])).unwrap().abs() < 1e-15);
        let k = BasisIndex::new(vec![2, 0, 3]).unwrap();
        assert!((k.norm_factor() - 2.0).abs() < 1e-15);
    }

    fn orthonormality(d: usize) {
        let n = 32usize;
        let idx = cube_indices(d, 8);
        let nodes = cube_indices(d, n as u32 - 1);
        let w = 1.0 / (nodes.len() as f64);
        // w_k evaluated at every node, reused for all pairs
        let vals: Vec<Vec<f64>> = idx
            .iter()
            .map(|k| {
                nodes
                    .iter()
                    .map(|node| {
                        let x: Vec<f64> = node.iter().map(|&j| j as f64 / n as f64).collect();
                        basis_eval_slice(k, &x)
                    })
                    .collect()
            })
            .collect();
        for (a, va) in vals.iter().enumerate() {
            for (b, vb) in vals.iter().enumerate() {
                let ip: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum::<f64>() * w;
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (ip - expect).abs() < 1e-10,
                    "<w_{:?}, w_{:?}> = {ip}",
                    idx[a],
                    idx[b]
                );
            }
        }
    }

    #[test]
    fn basis_is_orthonormal_d1() {
        orthonormality(1);
    }

    #[test]
    fn basis_is_orthonormal_d2() {
        orthonormality(2);
    }

    #[test]
    fn subadditivity_on_grid() {
        let n = 64;
        let origin = [0.0];
        for i in 0..n {
            for j in 0..n {
                let x = [i as f64 / n as f64];
                let y = [j as f64 / n as f64];
                let lhs = comparison_f(distance_slices(&x, &y), 1).unwrap();
                let rhs = comparison_f(distance_slices(&x, &origin), 1).unwrap()
                    + comparison_f(distance_slices(&y, &origin), 1).unwrap();
                assert!(lhs <= rhs + 1e-14);
            }
        }
    }

    fn pt(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, d)
    }

    proptest! {
        #[test]
        fn metric_axioms(a in pt(2), b in pt(2), c in pt(2)) {
            let ab = distance_slices(&a, &b);
            let ba = distance_slices(&b, &a);
            let bc = distance_slices(&b, &c);
            let ac = distance_slices(&a, &c);
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!(ac <= ab + bc + 1e-14);
            prop_assert_eq!(distance_slices(&a, &a), 0.0);
            prop_assert!(ab <= diameter(2) + 1e-15);
            if a != b { prop_assert!(ab > 0.0); }
        }

        #[test]
        fn subadditivity_random(x in pt(2), y in pt(2)) {
            let o = [0.0, 0.0];
            let lhs = comparison_f(distance_slices(&x, &y), 2).unwrap();
            let rhs = comparison_f(distance_slices(&x, &o), 2).unwrap()
                + comparison_f(distance_slices(&y, &o), 2).unwrap();
            prop_assert!(lhs <= rhs + 1e-14);
        }

        #[test]
        fn displacement_norm_matches_distance(x in pt(3), w in pt(3)) {
            let mut out = [0.0; 3];
            displacement_into(&x, &w, &mut out);
            let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - distance_slices(&x, &w)).abs() < 1e-15);
            prop_assert!(out.iter().all(|v| (-0.5..0.5).contains(v)));
        }
    }
}
