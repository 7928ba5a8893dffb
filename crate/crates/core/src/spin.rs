//! Two-state phenotype dynamics: exact event simulation, the closed-form
//! marginal law, and the optimal (comonotone) coupling on `{+1, -1}`.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Spin {
    Plus,
    Minus,
}

impl Spin {
    pub fn value(self) -> i8 {
        match self {
            Spin::Plus => 1,
            Spin::Minus => -1,
        }
    }

    pub fn from_value(v: i64) -> Result<Self> {
        match v {
            1 => Ok(Spin::Plus),
            -1 => Ok(Spin::Minus),
            _ => Err(Error::Parse(format!("spin must be +1 or -1, got {v}"))),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Spin::Plus => Spin::Minus,
            Spin::Minus => Spin::Plus,
        }
    }
}

/// Constant flip rates: `alpha_plus` for `+1 -> -1`, `alpha_minus` for `-1 -> +1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipRates {
    alpha_plus: f64,
    alpha_minus: f64,
}

impl FlipRates {
    pub fn new(alpha_plus: f64, alpha_minus: f64) -> Result<Self> {
        if !(alpha_plus >= 0.0 && alpha_minus >= 0.0)
            || !alpha_plus.is_finite()
            || !alpha_minus.is_finite()
        {
            return Err(invalid("flip rates must be finite and non-negative"));
        }
        if alpha_plus + alpha_minus <= 0.0 {
            return Err(invalid("flip rates must not both vanish"));
        }
        Ok(Self {
            alpha_plus,
            alpha_minus,
        })
    }

    pub fn alpha_plus(&self) -> f64 {
        self.alpha_plus
    }

    pub fn alpha_minus(&self) -> f64 {
        self.alpha_minus
    }

    pub fn total(&self) -> f64 {
        self.alpha_plus + self.alpha_minus
    }

    /// Rate of leaving state `y`.
    pub fn rate_out(&self, y: Spin) -> f64 {
        match y {
            Spin::Plus => self.alpha_plus,
            Spin::Minus => self.alpha_minus,
        }
    }

    /// Same dynamics with the roles of the two states exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            alpha_plus: self.alpha_minus,
            alpha_minus: self.alpha_plus,
        }
    }

    /// Stationary law `(alpha_minus, alpha_plus) / total`.
    pub fn stationary(&self) -> SpinLaw {
        SpinLaw {
            p_plus: self.alpha_minus / self.total(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinLaw {
    p_plus: f64,
}

impl SpinLaw {
    pub fn new(p_plus: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_plus) {
            return Err(invalid(format!("probability {p_plus} outside [0, 1]")));
        }
        Ok(Self { p_plus })
    }

    pub fn from_pair(p_plus: f64, p_minus: f64) -> Result<Self> {
        if (p_plus + p_minus - 1.0).abs() > 1e-12 || !(0.0..=1.0).contains(&p_minus) {
            return Err(invalid("spin law must be a probability pair"));
        }
        Self::new(p_plus)
    }

    pub fn point_mass(y: Spin) -> Self {
        Self {
            p_plus: if y == Spin::Plus { 1.0 } else { 0.0 },
        }
    }

    pub fn p_plus(&self) -> f64 {
        self.p_plus
    }

    pub fn p_minus(&self) -> f64 {
        1.0 - self.p_plus
    }

    pub fn prob(&self, y: Spin) -> f64 {
        match y {
            Spin::Plus => self.p_plus(),
            Spin::Minus => self.p_minus(),
        }
    }
}

/// Marginal law at time `t` of the two-state chain started from `law0`.
pub fn evolve_law(law0: SpinLaw, rates: &FlipRates, t: f64) -> Result<SpinLaw> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("negative time {t}")));
    }
    let decay = (-rates.total() * t).exp();
    let p = decay * law0.p_plus + rates.alpha_minus / rates.total() * (-(-rates.total() * t).exp_m1());
    Ok(SpinLaw {
        p_plus: p.clamp(0.0, 1.0),
    })
}

/// `W1` on `{+1, -1}` with cost `|y - q| = 2 * 1{y != q}`.
pub fn spin_w1(a: SpinLaw, b: SpinLaw) -> f64 {
    2.0 * (a.p_plus - b.p_plus).abs()
}

/// Exponential holding time in state `y`; infinite for an absorbing state.
pub fn holding_time<R: Rng + ?Sized>(y: Spin, rates: &FlipRates, rng: &mut R) -> f64 {
    let rate = rates.rate_out(y);
    if rate == 0.0 {
        return f64::INFINITY;
    }
    let e: f64 = rng.sample(Exp1);
    e / rate
}

/// Lazily generated flip times of one spin, kept across step windows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinClock {
    next_flip: f64,
}

impl SpinClock {
    /// Clock for a spin in state `y` at time `t0`.
    pub fn start<R: Rng + ?Sized>(y: Spin, t0: f64, rates: &FlipRates, rng: &mut R) -> Self {
        Self {
            next_flip: t0 + holding_time(y, rates, rng),
        }
    }

    pub fn next_flip(&self) -> f64 {
        self.next_flip
    }

    /// Performs the pending flip of `y` at `next_flip` and draws the next one.
    pub fn fire<R: Rng + ?Sized>(&mut self, y: &mut Spin, rates: &FlipRates, rng: &mut R) {
        let now = self.next_flip;
        *y = y.flipped();
        self.next_flip = now + holding_time(*y, rates, rng);
    }

    /// Runs the spin from `t0` to `t1`, flipping `y` at every event in
    /// `(t0, t1]`. `segment(spin, length)` is called for each constant piece.
    pub fn advance<R: Rng + ?Sized>(
        &mut self,
        y: &mut Spin,
        t0: f64,
        t1: f64,
        rates: &FlipRates,
        rng: &mut R,
        mut segment: impl FnMut(Spin, f64),
    ) {
        let mut now = t0;
        while self.next_flip <= t1 {
            segment(*y, self.next_flip - now);
            now = self.next_flip;
            *y = y.flipped();
            self.next_flip = now + holding_time(*y, rates, rng);
        }
        segment(*y, t1 - now);
    }
}

/// Flip times of a spin started in `y0`, strictly increasing, in `(0, horizon]`.
pub fn sample_flips<R: Rng + ?Sized>(
    y0: Spin,
    rates: &FlipRates,
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(horizon >= 0.0) {
        return Err(Error::Domain(format!("negative horizon {horizon}")));
    }
    let mut out = Vec::new();
    let mut y = y0;
    let mut t = 0.0;
    loop {
        let next = t + holding_time(y, rates, rng);
        if next > horizon {
            return Ok(out);
        }
        if next > t {
            out.push(next);
        }
        t = next;
        y = y.flipped();
    }
}

/// Comonotone coupling with a caller-supplied uniform `v` in `[0, 1)`.
///
/// The uniform is placed inside the quantile interval of `y` under
/// `law_y`, and the partner is read off the quantile function of `law_ybar`
/// (`-1` occupies `[0, p_minus)`).
pub fn couple_spins_with_uniform(y: Spin, law_y: SpinLaw, law_ybar: SpinLaw, v: f64) -> Spin {
    let q = law_y.p_minus();
    let u = match y {
        Spin::Minus => v * q,
        Spin::Plus => q + v * (1.0 - q),
    };
    if u < law_ybar.p_minus() {
        Spin::Minus
    } else {
        Spin::Plus
    }
}

/// Draws the optimally coupled partner of `y`.
pub fn couple_spins<R: Rng + ?Sized>(y: Spin, law_y: SpinLaw, law_ybar: SpinLaw, rng: &mut R) -> Spin {
    couple_spins_with_uniform(y, law_y, law_ybar, rng.random::<f64>())
}
