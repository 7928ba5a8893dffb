//! Wasserstein-1 distances on `T^1`, `T^d`, `{+1, -1}` and the product space
//! with cost `|x - p| + 2 * 1{y != q}`.

use crate::error::{invalid, Result};
use crate::meanfield::SpectralField;
use crate::particles::EmpiricalMeasure;
use crate::spin::{spin_w1, Spin};
use crate::torus::{self, diameter};

/// Exact `W1` between weighted atoms on the circle.
///
/// Uses `W1 = min_a integral |F_mu - F_nu - a|`; the minimizer is a
/// weighted median of the CDF difference over the arcs between atoms.
pub fn w1_circle(mu: &[(f64, f64)], nu: &[(f64, f64)]) -> Result<f64> {
    let mass_mu: f64 = mu.iter().map(|a| a.1).sum();
    let mass_nu: f64 = nu.iter().map(|a| a.1).sum();
    if mu.iter().chain(nu).any(|a| !(a.1 >= 0.0) || !a.0.is_finite()) {
        return Err(invalid("atoms need finite positions and non-negative weights"));
    }
    if (mass_mu - mass_nu).abs() > 1e-9 * mass_mu.max(mass_nu).max(1.0) {
        return Err(invalid(format!("unequal masses {mass_mu} and {mass_nu}")));
    }
    let mut events: Vec<(f64, f64)> = mu
        .iter()
        .map(|&(x, w)| (torus::wrap(x), w))
        .chain(nu.iter().map(|&(x, w)| (torus::wrap(x), -w)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    // (CDF difference, arc length) pieces, starting at 0 with difference 0
    let mut pieces = Vec::with_capacity(events.len() + 1);
    let mut g = 0.0;
    let mut prev = 0.0;
    for &(x, w) in &events {
        if x > prev {
            pieces.push((g, x - prev));
        }
        g += w;
        prev = x;
    }
    if prev < 1.0 {
        pieces.push((g, 1.0 - prev));
    }
    let alpha = weighted_median(&mut pieces.clone());
    Ok(pieces.iter().map(|&(g, len)| len * (g - alpha).abs()).sum())
}

fn weighted_median(items: &mut [(f64, f64)]) -> f64 {
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = items.iter().map(|a| a.1).sum();
    let mut acc = 0.0;
    for &(v, w) in items.iter() {
        acc += w;
        if acc >= 0.5 * total {
            return v;
        }
    }
    items.last().map(|a| a.0).unwrap_or(0.0)
}

/// Minimum-cost perfect matching on an `n x n` cost function
/// (shortest augmenting paths with potentials). Returns the assignment
/// `row -> column` and its total cost.
pub fn solve_assignment(n: usize, cost: impl Fn(usize, usize) -> f64) -> (Vec<usize>, f64) {
    // 1-based arrays; column 0 is the virtual root
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost(i, j)).sum();
    (assign, total)
}

/// Exact `W1` between two uniform `N`-atom measures on `T^d`
/// (flat coordinate arrays of length `N * d`).
pub fn w1_assignment(mu: &[f64], nu: &[f64], d: usize) -> Result<f64> {
    if d == 0 || !mu.len().is_multiple_of(d) || mu.len() != nu.len() || mu.is_empty() {
        return Err(invalid("need equal, non-empty atom sets of dimension d"));
    }
    let n = mu.len() / d;
    let (_, total) = solve_assignment(n, |i, j| {
        torus::distance_slices(&mu[i * d..(i + 1) * d], &nu[j * d..(j + 1) * d])
    });
    Ok(total / n as f64)
}

fn product_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, i: usize, j: usize) -> f64 {
    let flip = if mu.spins()[i] != nu.spins()[j] { 2.0 } else { 0.0 };
    torus::distance_slices(mu.position(i), nu.position(j)) + flip
}

/// Exact `W1` on the product space for equal-size empirical measures.
pub fn w1_product(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.len() != nu.len() || mu.dim() != nu.dim() {
        return Err(invalid("empirical measures differ in size or dimension"));
    }
    let (_, total) = solve_assignment(mu.len(), |i, j| product_cost(mu, nu, i, j));
    Ok(total / mu.len() as f64)
}

/// `(W1 of x-marginals, W1 of type marginals)`. The circle method is used
/// in `d = 1` (any sizes), the assignment solver otherwise.
pub fn marginal_w1(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<(f64, f64)> {
    if mu.dim() != nu.dim() {
        return Err(invalid("dimension mismatch"));
    }
    let x = if mu.dim() == 1 {
        w1_circle(&mu.circle_atoms()?, &nu.circle_atoms()?)?
    } else {
        w1_assignment(mu.positions(), nu.positions(), mu.dim())?
    };
    Ok((x, spin_w1(mu.type_marginal(), nu.type_marginal())))
}

/// `x`-marginal of a `d = 1` field as `n` cell-midpoint atoms carrying the
/// exact normalized cell masses.
pub fn field_circle_atoms(field: &SpectralField, n: usize) -> Result<Vec<(f64, f64)>> {
    if field.dim() != 1 {
        return Err(invalid("circle atoms need d = 1"));
    }
    let (mu, mv) = field.cell_masses(n);
    let total = field.total_mass();
    Ok(mu
        .iter()
        .zip(&mv)
        .enumerate()
        .map(|(j, (a, b))| ((j as f64 + 0.5) / n as f64, ((a + b) / total).max(0.0)))
        .collect())
}

/// `W1` between the `x`-marginal of a `d = 1` field and weighted atoms.
pub fn w1_field_vs_atoms(field: &SpectralField, n: usize, atoms: &[(f64, f64)]) -> Result<f64> {
    let mut grid = field_circle_atoms(field, n)?;
    renormalize(&mut grid);
    w1_circle(&grid, atoms)
}

fn renormalize(atoms: &mut [(f64, f64)]) {
    let s: f64 = atoms.iter().map(|a| a.1).sum();
    atoms.iter_mut().for_each(|a| a.1 /= s);
}

/// Result of the entropic solver: a certified bracket on `W1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornResult {
    /// Dual objective of a c-concave pair: a lower bound.
    pub lower: f64,
    /// Cost of the plan rounded onto the exact marginals: an upper bound.
    pub upper: f64,
    pub gap: f64,
}

impl SinkhornResult {
    pub fn estimate(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

fn log_sum_exp(vals: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = vals.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn with epsilon scaling down to `1e-3 * diameter`
/// between weighted atoms on `T^d` (flat coordinates).
pub fn sinkhorn_w1(
    mu_pts: &[f64],
    mu_w: &[f64],
    nu_pts: &[f64],
    nu_w: &[f64],
    d: usize,
) -> Result<SinkhornResult> {
    if d == 0 || mu_pts.len() != mu_w.len() * d || nu_pts.len() != nu_w.len() * d {
        return Err(invalid("point and weight arrays disagree"));
    }
    let sa: f64 = mu_w.iter().sum();
    let sb: f64 = nu_w.iter().sum();
    if (sa - sb).abs() > 1e-9 || mu_w.iter().chain(nu_w).any(|w| !(*w >= 0.0)) {
        return Err(invalid("measures must be non-negative with equal mass"));
    }
    let keep = |w: &[f64]| -> Vec<usize> { (0..w.len()).filter(|&i| w[i] > 0.0).collect() };
    let ia = keep(mu_w);
    let ib = keep(nu_w);
    let a: Vec<f64> = ia.iter().map(|&i| mu_w[i] / sa).collect();
    let b: Vec<f64> = ib.iter().map(|&j| nu_w[j] / sb).collect();
    let (n, m) = (a.len(), b.len());
    let mut c = vec![0.0; n * m];
    for (r, &i) in ia.iter().enumerate() {
        for (s, &j) in ib.iter().enumerate() {
            c[r * m + s] = torus::distance_slices(&mu_pts[i * d..(i + 1) * d], &nu_pts[j * d..(j + 1) * d]);
        }
    }
    let la: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let eps_final = 1e-3 * diameter(d);
    let mut eps = diameter(d);
    loop {
        for _ in 0..2000 {
            for r in 0..n {
                f[r] = -eps * log_sum_exp((0..m).map(|s| lb[s] + (g[s] - c[r * m + s]) / eps));
            }
            for s in 0..m {
                g[s] = -eps * log_sum_exp((0..n).map(|r| la[r] + (f[r] - c[r * m + s]) / eps));
            }
            // after the g-update the column marginals are exact; check rows
            let err: f64 = (0..n)
                .map(|r| {
                    let row: f64 = (0..m)
                        .map(|s| (la[r] + lb[s] + (f[r] + g[s] - c[r * m + s]) / eps).exp())
                        .sum();
                    (row - a[r]).abs()
                })
                .sum();
            if err < 1e-10 {
                break;
            }
        }
        if eps <= eps_final {
            break;
        }
        eps = (eps * 0.5).max(eps_final);
    }
    // c-transform pair for a feasible dual
    let gc: Vec<f64> = (0..m)
        .map(|s| (0..n).map(|r| c[r * m + s] - f[r]).fold(f64::INFINITY, f64::min))
        .collect();
    let fc: Vec<f64> = (0..n)
        .map(|r| (0..m).map(|s| c[r * m + s] - gc[s]).fold(f64::INFINITY, f64::min))
        .collect();
    let lower = a.iter().zip(&fc).map(|(x, y)| x * y).sum::<f64>()
        + b.iter().zip(&gc).map(|(x, y)| x * y).sum::<f64>();
    // rounding onto the marginals
    let mut plan: Vec<f64> = (0..n * m)
        .map(|idx| {
            let (r, s) = (idx / m, idx % m);
            (la[r] + lb[s] + (f[r] + g[s] - c[idx]) / eps).exp()
        })
        .collect();
    for r in 0..n {
        let row: f64 = plan[r * m..(r + 1) * m].iter().sum();
        if row > a[r] {
            let scale = a[r] / row;
            plan[r * m..(r + 1) * m].iter_mut().for_each(|p| *p *= scale);
        }
    }
    for s in 0..m {
        let col: f64 = (0..n).map(|r| plan[r * m + s]).sum();
        if col > b[s] {
            let scale = b[s] / col;
            (0..n).for_each(|r| plan[r * m + s] *= scale);
        }
    }
    let ra: Vec<f64> = (0..n).map(|r| a[r] - plan[r * m..(r + 1) * m].iter().sum::<f64>()).collect();
    let rb: Vec<f64> = (0..m).map(|s| b[s] - (0..n).map(|r| plan[r * m + s]).sum::<f64>()).collect();
    let deficit: f64 = ra.iter().sum();
    if deficit > 0.0 {
        for r in 0..n {
            for s in 0..m {
                plan[r * m + s] += ra[r] * rb[s] / deficit;
            }
        }
    }
    let upper: f64 = plan.iter().zip(&c).map(|(p, x)| p * x).sum();
    Ok(SinkhornResult {
        lower,
        upper,
        gap: upper - lower,
    })
}

/// `W1` between the `x`-marginals of two fields on `T^2` (or `T^1`), via
/// exact cell masses on an `n`-grid and the entropic solver.
pub fn w1_fields_gridded(a: &SpectralField, b: &SpectralField, n: usize) -> Result<SinkhornResult> {
    if a.dim() != b.dim() {
        return Err(invalid("dimension mismatch"));
    }
    let d = a.dim();
    let cells = n.pow(d as u32);
    let mut pts = Vec::with_capacity(cells * d);
    for c in 0..cells {
        let mut flat = c;
        let mut x = vec![0.0; d];
        for slot in x.iter_mut().rev() {
            *slot = ((flat % n) as f64 + 0.5) / n as f64;
            flat /= n;
        }
        pts.extend(x);
    }
    let weights = |f: &SpectralField| -> Vec<f64> {
        let (u, v) = f.cell_masses(n);
        let w: Vec<f64> = u.iter().zip(&v).map(|(x, y)| (x + y).max(0.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    };
    sinkhorn_w1(&pts, &weights(a), &pts, &weights(b), d)
}

/// Spin of atom `i` as `+1`/`-1` for reporting.
pub fn spin_value(s: Spin) -> i8 {
    s.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Channel};
    use rand::Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute(n: usize, cost: impl Fn(usize, usize) -> f64) -> f64 {
        permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn circle_examples() {
        assert!((w1_circle(&[(0.1, 1.0)], &[(0.8, 1.0)]).unwrap() - 0.3).abs() < 1e-15);
        let a = [(0.2, 0.5), (0.7, 0.5)];
        assert_eq!(w1_circle(&a, &a).unwrap(), 0.0);
        let b = [(0.25, 0.5), (0.75, 0.5)];
        let c = [(0.0, 0.5), (0.5, 0.5)];
        assert!((w1_circle(&c, &b).unwrap() - 0.25).abs() < 1e-15);
        assert!(w1_circle(&[(0.1, 1.0)], &[(0.2, 0.5)]).is_err());
    }

    #[test]
    fn assignment_examples() {
        let a = [0.0, 0.0, 0.5, 0.0];
        let b = [0.1, 0.0, 0.6, 0.0];
        assert!((w1_assignment(&a, &b, 2).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(w1_assignment(&a, &a, 2).unwrap(), 0.0);
        assert!(w1_assignment(&a, &b[..2], 2).is_err());
    }

    #[test]
    fn product_examples() {
        let mu = EmpiricalMeasure::new(1, vec![0.1, 0.4], vec![Spin::Plus, Spin::Minus]).unwrap();
        let nu = EmpiricalMeasure::new(1, vec![0.1, 0.4], vec![Spin::Minus, Spin::Plus]).unwrap();
        // swapping partners costs 0.3 each, keeping them costs 2 each
        assert!((w1_product(&mu, &nu).unwrap() - 0.3).abs() < 1e-15);
        let nu = EmpiricalMeasure::new(1, vec![0.1, 0.4], vec![Spin::Minus, Spin::Minus]).unwrap();
        let mu2 = EmpiricalMeasure::new(1, vec![0.1, 0.4], vec![Spin::Plus, Spin::Plus]).unwrap();
        assert!((w1_product(&mu2, &nu).unwrap() - 2.0).abs() < 1e-15);
        let (x, y) = marginal_w1(&mu2, &mu2).unwrap();
        assert_eq!((x, y), (0.0, 0.0));
    }

    #[test]
    fn solvers_match_enumeration() {
        let mut rng = stream(12, 0, 0, Channel::Init);
        for trial in 0..60 {
            let n = 1 + trial % 6;
            let d = 1 + trial % 2;
            let mut draw = |len: usize| (0..len).map(|_| rng.random::<f64>()).collect::<Vec<f64>>();
            let a = draw(n * d);
            let b = draw(n * d);
            let sa: Vec<Spin> = draw(n).iter().map(|&u| if u < 0.5 { Spin::Plus } else { Spin::Minus }).collect();
            let sb: Vec<Spin> = draw(n).iter().map(|&u| if u < 0.5 { Spin::Plus } else { Spin::Minus }).collect();
            let oracle = brute(n, |i, j| torus::distance_slices(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d])) / n as f64;
            assert!((w1_assignment(&a, &b, d).unwrap() - oracle).abs() < 1e-10);
            if d == 1 {
                let ca: Vec<(f64, f64)> = a.iter().map(|&x| (x, 1.0 / n as f64)).collect();
                let cb: Vec<(f64, f64)> = b.iter().map(|&x| (x, 1.0 / n as f64)).collect();
                assert!((w1_circle(&ca, &cb).unwrap() - oracle).abs() < 1e-10);
            }
            let mu = EmpiricalMeasure::new(d, a.clone(), sa).unwrap();
            let nu = EmpiricalMeasure::new(d, b.clone(), sb).unwrap();
            let oracle = brute(n, |i, j| product_cost(&mu, &nu, i, j)) / n as f64;
            assert!((w1_product(&mu, &nu).unwrap() - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn sinkhorn_brackets_exact_value() {
        let mut rng = stream(13, 0, 0, Channel::Init);
        let n = 12;
        let a: Vec<f64> = (0..2 * n).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..2 * n).map(|_| rng.random()).collect();
        let w = vec![1.0 / n as f64; n];
        let exact = w1_assignment(&a, &b, 2).unwrap();
        let s = sinkhorn_w1(&a, &w, &b, &w, 2).unwrap();
        assert!(s.lower <= exact + 1e-12 && exact <= s.upper + 1e-12);
        assert!(s.gap < 5e-3, "gap {}", s.gap);
    }

    #[test]
    fn gridded_fields() {
        use crate::meanfield::ProfileTerm;
        use crate::spin::SpinLaw;
        let law = SpinLaw::new(0.5).unwrap();
        let f = SpectralField::product_form(2, 2, law, &[ProfileTerm { k: vec![1, 0], u: 0.5, v: 0.5 }]).unwrap();
        let g = SpectralField::homogeneous(2, 2, law).unwrap();
        let same = w1_fields_gridded(&f, &f, 8).unwrap();
        assert!(same.upper < 1e-2 && same.lower <= 1e-12);
        let r = w1_fields_gridded(&f, &g, 8).unwrap();
        // 1-d problem along x: compare with the circle method on the same cells
        let a1 = SpectralField::product_form(1, 2, law, &[ProfileTerm { k: vec![1], u: 0.5, v: 0.5 }]).unwrap();
        let b1 = SpectralField::homogeneous(1, 2, law).unwrap();
        let exact = w1_circle(&field_circle_atoms(&a1, 8).unwrap(), &field_circle_atoms(&b1, 8).unwrap()).unwrap();
        assert!(r.lower <= exact + 1e-9 && exact <= r.upper + 1e-9);
    }
}
