//! FFT plumbing between even-subspace cosine coefficients and periodic
//! grids on `T^d` (`d <= 2` in practice, any `d` supported).
//!
//! A cosine coefficient `c(k)` of `w_k` corresponds to the complex
//! exponential coefficients `c(k) / N_k` at every sign pattern of `k`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Result};
use crate::torus::{cube_indices, normalization};

/// Smallest power of two that is at least `min`.
pub fn grid_size_for(min: usize) -> usize {
    min.max(2).next_power_of_two()
}

pub(crate) struct FftGrid {
    d: usize,
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftGrid").field("d", &self.d).field("n", &self.n).finish()
    }
}

/// Grid slots of every sign pattern of each cosine index in a cube.
#[derive(Debug, Clone)]
pub(crate) struct CosineLayout {
    pub norms: Vec<f64>,
    pub slots: Vec<Vec<usize>>,
}

impl FftGrid {
    pub fn new(d: usize, n: usize) -> Result<Self> {
        if d == 0 || n < 2 {
            return Err(invalid("grid needs d >= 1 and n >= 2"));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            d,
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    /// Signed wavenumber stored at 1-d slot `j`.
    pub fn wavenumber(&self, j: usize) -> i64 {
        if j < self.n / 2 {
            j as i64
        } else {
            j as i64 - self.n as i64
        }
    }

    fn slot_1d(&self, kappa: i64) -> usize {
        kappa.rem_euclid(self.n as i64) as usize
    }

    /// Signed wavevector of a flat slot.
    pub fn wavevector(&self, mut flat: usize, out: &mut [i64]) {
        for o in out.iter_mut().rev() {
            *o = self.wavenumber(flat % self.n);
            flat /= self.n;
        }
    }

    pub fn layout(&self, k_max: u32) -> Result<CosineLayout> {
        if 2 * k_max as usize >= self.n {
            return Err(invalid(format!(
                "grid of size {} cannot resolve modes up to {}",
                self.n, k_max
            )));
        }
        let mut norms = Vec::new();
        let mut slots = Vec::new();
        for k in cube_indices(self.d, k_max) {
            norms.push(normalization(&k));
            let nz: Vec<usize> = (0..self.d).filter(|&i| k[i] != 0).collect();
            let mut s = Vec::with_capacity(1 << nz.len());
            for pattern in 0..(1usize << nz.len()) {
                let mut flat = 0usize;
                for (i, &ki) in k.iter().enumerate() {
                    let mut kappa = ki as i64;
                    if let Some(pos) = nz.iter().position(|&z| z == i) {
                        if pattern >> pos & 1 == 1 {
                            kappa = -kappa;
                        }
                    }
                    flat = flat * self.n + self.slot_1d(kappa);
                }
                s.push(flat);
            }
            slots.push(s);
        }
        Ok(CosineLayout {
            norms,
            slots,
        })
    }

    /// In-place multidimensional transform, unnormalized.
    pub fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.inv } else { &self.fwd };
        let n = self.n;
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for axis in 0..self.d {
            let stride = n.pow((self.d - 1 - axis) as u32);
            let block = stride * n;
            for start in (0..data.len()).step_by(block) {
                for offset in 0..stride {
                    let base = start + offset;
                    for (j, l) in line.iter_mut().enumerate() {
                        *l = data[base + j * stride];
                    }
                    plan.process(&mut line);
                    for (j, l) in line.iter().enumerate() {
                        data[base + j * stride] = *l;
                    }
                }
            }
        }
    }

    /// Exponential coefficients of `sum_k c(k) w_k`.
    pub fn spectrum_from_cosine(&self, layout: &CosineLayout, coeffs: &[f64]) -> Vec<Complex64> {
        let mut spec = vec![Complex64::new(0.0, 0.0); self.len()];
        for ((c, nk), slots) in coeffs.iter().zip(&layout.norms).zip(&layout.slots) {
            let val = Complex64::new(c / nk, 0.0);
            for &s in slots {
                spec[s] = val;
            }
        }
        spec
    }

    /// Grid values (real part) of an exponential spectrum.
    pub fn values_from_spectrum(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut spec, true);
        spec.into_iter().map(|z| z.re).collect()
    }

    pub fn synthesize(&self, layout: &CosineLayout, coeffs: &[f64]) -> Vec<f64> {
        self.values_from_spectrum(self.spectrum_from_cosine(layout, coeffs))
    }

    /// Exponential coefficients of grid values.
    pub fn analyze(&self, values: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.transform(&mut data, false);
        let scale = 1.0 / self.len() as f64;
        data.iter_mut().for_each(|z| *z *= scale);
        data
    }

    /// Orthogonal projection onto the cosine basis: `N_k * mean_sigma Re c(sigma k)`.
    pub fn project_cosine(&self, layout: &CosineLayout, spec: &[Complex64]) -> Vec<f64> {
        layout
            .norms
            .iter()
            .zip(&layout.slots)
            .map(|(nk, slots)| {
                let sum: f64 = slots.iter().map(|&s| spec[s].re).sum();
                nk * sum / slots.len() as f64
            })
            .collect()
    }

    /// Multiplies a spectrum by `2 pi i kappa_axis` (partial derivative).
    pub fn differentiate(&self, spec: &[Complex64], axis: usize) -> Vec<Complex64> {
        let mut kv = vec![0i64; self.d];
        spec.iter()
            .enumerate()
            .map(|(flat, z)| {
                self.wavevector(flat, &mut kv);
                let kappa = kv[axis];
                // the Nyquist slot has no consistent sign; real data needs it zeroed
                if 2 * kappa.unsigned_abs() as usize == self.n {
                    return Complex64::new(0.0, 0.0);
                }
                z * Complex64::new(0.0, 2.0 * PI * kappa as f64)
            })
            .collect()
    }
}
