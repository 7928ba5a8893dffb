//! The experiment drivers behind the CLI subcommands.
//!
//! Every driver returns an [`Output`]: a key-value report plus named tables
//! and text snapshots. Repeats run on a dedicated worker pool and are
//! assembled by run index, so the rendered files do not depend on the
//! worker count.

use std::path::Path;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::emit::{ensemble_to_text, field_to_text, write_text, Report, Table};
use crate::bifurcation::{self, newton_branch, BranchOptions, PerturbationField, ThresholdReport};
use crate::coupling::{coupled_initial_spins, CouplingState, LyapunovParams};
use crate::error::{Error, Result};
use crate::meanfield::{self, step_count, PdeSolver, PdeTrajectory, SpectralField};
use crate::particles::{DiffusionSpec, InitialCondition, ParticleSystem};
use crate::potential::PotentialSpec;
use crate::spin::{spin_w1, FlipRates, SpinLaw};
use crate::transport::{field_circle_atoms, marginal_w1, w1_circle, w1_field_vs_atoms, w1_fields_gridded};

/// Contraction constants of the two stability results, with sign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBounds {
    /// Lipschitz constant used for the bounds (analytic upper estimate).
    pub eta: f64,
    /// Grid lower estimate of the same constant.
    pub eta_lower: f64,
    /// `(2 pi / d)(sigma_min^2 pi - eta sqrt d)`.
    pub c0: f64,
    /// `2 sigma_min^2 pi^2 / d - (3 pi / 2) eta`.
    pub c_star: f64,
    /// `alpha_1 + alpha_-1`.
    pub mixing: f64,
}

impl RateBounds {
    pub fn compute(spec: &PotentialSpec, diff: &DiffusionSpec, rates: &FlipRates) -> Result<Self> {
        let d = spec.dim() as f64;
        let grid = if spec.dim() == 1 { 256 } else { 24 };
        let est = spec.estimate_eta(grid)?;
        let eta = est.eta();
        let s2 = diff.sigma_min().powi(2);
        let pi = std::f64::consts::PI;
        Ok(Self {
            eta,
            eta_lower: est.grid_lower,
            c0: 2.0 * pi / d * (s2 * pi - eta * d.sqrt()),
            c_star: 2.0 * s2 * pi * pi / d - 1.5 * pi * eta,
            mixing: rates.total(),
        })
    }

    /// `min(c0, alpha_1 + alpha_-1)`.
    pub fn chaos_rate(&self) -> f64 {
        self.c0.min(self.mixing)
    }

    /// `min(c_*, alpha_1 + alpha_-1)`.
    pub fn contraction_rate(&self) -> f64 {
        self.c_star.min(self.mixing)
    }

    fn record(&self, r: &mut Report) {
        r.set_f64("eta_upper", self.eta);
        r.set_f64("eta_lower", self.eta_lower);
        r.set_f64("c0", self.c0);
        r.set_f64("c_star", self.c_star);
        r.set_f64("mixing_rate", self.mixing);
    }
}

/// Label for a run whose guarantee needs `bound > 0`.
fn gate(name: &str, bound: f64, allow_exploratory: bool) -> Result<&'static str> {
    if bound > 0.0 {
        Ok("theorem regime")
    } else if allow_exploratory {
        log::warn!("{name} = {bound:e} is not positive; running as exploratory");
        Ok("exploratory")
    } else {
        Err(Error::GateRefused(format!(
            "{name} = {bound:e} is not positive; set run.allow_exploratory to run anyway"
        )))
    }
}

/// Report, tables and text files produced by one experiment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Output {
    pub report: Report,
    pub tables: Vec<(String, Table)>,
    pub texts: Vec<(String, String)>,
}

impl Output {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rendered files as `(file name, contents)`, in a fixed order.
    pub fn files(&self) -> Vec<(String, String)> {
        let mut out = vec![("report.txt".to_string(), self.report.render())];
        out.extend(self.tables.iter().map(|(n, t)| (format!("{n}.csv"), t.to_csv())));
        out.extend(self.texts.iter().cloned());
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, body) in self.files() {
            write_text(&dir.join(name), &body)?;
        }
        Ok(())
    }
}

fn pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers()?)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn header(cfg: &ExperimentConfig, experiment: &str) -> Report {
    let mut r = Report::default();
    r.set("experiment", experiment);
    r.set("seed", cfg.run.seed);
    r.set("d", cfg.model.d);
    r
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Exponential decay rate `-d log w / dt` fitted over the samples with
/// `w > floor`.
pub fn fit_decay_rate(t: &[f64], w: &[f64], floor: f64) -> f64 {
    fit_tail_rate(t, w, floor, 0.0)
}

/// As [`fit_decay_rate`], restricted to the last `1 - skip` fraction of the
/// samples above the floor.
pub fn fit_tail_rate(t: &[f64], w: &[f64], floor: f64, skip: f64) -> f64 {
    let (ts, ls): (Vec<f64>, Vec<f64>) = t
        .iter()
        .zip(w)
        .filter(|(_, &v)| v > floor)
        .map(|(&a, &v)| (a, v.ln()))
        .unzip();
    let first = (skip * ts.len() as f64).floor() as usize;
    if ts.len() - first < 2 {
        return f64::NAN;
    }
    -fit_slope(&ts[first..], &ls[first..])
}

/// x-marginal distance between two densities: exact circle transport on
/// cell masses in one dimension, entropic estimate otherwise.
pub fn field_w1(a: &SpectralField, b: &SpectralField, cells: usize) -> Result<f64> {
    if a.dim() == 1 {
        w1_circle(&field_circle_atoms(a, cells)?, &field_circle_atoms(b, cells)?)
    } else {
        Ok(w1_fields_gridded(a, b, cells)?.estimate())
    }
}

/// Step indices at which `times` are reached.
fn record_steps(times: &[f64], dt: f64) -> Result<Vec<usize>> {
    times.iter().map(|&t| step_count(t, dt)).collect()
}

/// Particle system from the configured initial density.
pub fn run_simulate(cfg: &ExperimentConfig) -> Result<Output> {
    let (spec, diff, rates) = (cfg.potential()?, cfg.diffusion()?, cfg.rates()?);
    let num = &cfg.numerics;
    let steps = step_count(num.horizon, num.dt)?;
    let init = InitialCondition::Field(cfg.initial_field()?);
    let pool = pool(cfg)?;
    pool.install(|| {
        let ens = init.sample(cfg.model.d, num.n, cfg.run.seed, 0)?;
        let mut sys = ParticleSystem::new(ens, &rates, num.dt, cfg.run.seed, 0)?;
        let mut table = Table::new(&["t", "plus_fraction", "mean_cos", "mean_sin"]);
        let row = |s: &ParticleSystem| {
            let e = s.ensemble();
            let plus = e.empirical().type_marginal().p_plus();
            let n = e.len() as f64;
            let angle = |i: usize| 2.0 * std::f64::consts::PI * e.position(i)[0];
            let c = (0..e.len()).map(|i| angle(i).cos()).sum::<f64>() / n;
            let s_ = (0..e.len()).map(|i| angle(i).sin()).sum::<f64>() / n;
            vec![e.time(), plus, c, s_]
        };
        table.push(row(&sys));
        for s in 1..=steps {
            sys.step(&spec, &diff, &rates, num.force_method)?;
            if s % num.snapshot_every.max(1) == 0 || s == steps {
                table.push(row(&sys));
            }
        }
        let mut report = header(cfg, "simulate");
        RateBounds::compute(&spec, &diff, &rates)?.record(&mut report);
        report.set("n", num.n);
        report.set_f64("t_end", sys.time());
        Ok(Output {
            report,
            tables: vec![("summary".into(), table)],
            texts: vec![("ensemble.txt".into(), ensemble_to_text(sys.ensemble(), cfg.run.seed))],
        })
    })
}

fn pde_table(traj: &PdeTrajectory) -> Table {
    let mut t = Table::new(&["t", "mass_u", "mass_v", "total_mass", "max_coeff"]);
    for f in &traj.snapshots {
        let (mu, mv) = f.masses();
        let amp = f.u()[1..]
            .iter()
            .chain(&f.v()[1..])
            .fold(0.0f64, |m, c| m.max(c.abs()));
        t.push(vec![f.time(), mu, mv, f.total_mass(), amp]);
    }
    t
}

/// Mean-field PDE from the configured initial density.
pub fn run_pde(cfg: &ExperimentConfig) -> Result<Output> {
    let (spec, diff, rates) = (cfg.potential()?, cfg.diffusion()?, cfg.rates()?);
    let num = &cfg.numerics;
    let traj = meanfield::solve(&cfg.initial_field()?, &spec, &diff, &rates, num.horizon, num.dt, num.snapshot_every)?;
    let mut report = header(cfg, "pde");
    report.set("k_max", num.k_max);
    report.set_f64("mass_drift", traj.mass_drift);
    report.set_f64("min_density", traj.min_density);
    Ok(Output {
        report,
        tables: vec![("trajectory".into(), pde_table(&traj))],
        texts: vec![("field.txt".into(), field_to_text(traj.last()))],
    })
}

/// Spin laws of the particles and of the copies; the copy density shares the
/// particle profile so that `Xbar_0 = X_0` has the right law.
fn coupled_laws(cfg: &ExperimentConfig) -> Result<(SpinLaw, SpinLaw, SpectralField)> {
    let rates = cfg.rates()?;
    let law = cfg.initial.p_plus.map(SpinLaw::new).transpose()?.unwrap_or(rates.stationary());
    let law_bar = cfg.initial.second_p_plus.map(SpinLaw::new).transpose()?.unwrap_or(law);
    if law != law_bar && cfg.initial.profile.iter().any(|p| p.u != p.v) {
        return Err(Error::Config(
            "coupled runs with different spin laws need a spin-independent profile (u == v)".into(),
        ));
    }
    let copy_field = SpectralField::product_form(cfg.model.d, cfg.numerics.k_max, law_bar, &cfg.initial.profile)?;
    Ok((law, law_bar, copy_field))
}

fn start_coupling(
    cfg: &ExperimentConfig,
    n: usize,
    run: u64,
    law: SpinLaw,
    law_bar: SpinLaw,
    rates: &FlipRates,
) -> Result<CouplingState> {
    let num = &cfg.numerics;
    let field = SpectralField::product_form(cfg.model.d, num.k_max, law, &cfg.initial.profile)?;
    let ens = InitialCondition::Field(field).sample(cfg.model.d, n, cfg.run.seed, run)?;
    let ybar = coupled_initial_spins(ens.spins(), law, law_bar, cfg.run.seed, run);
    let xbar = ens.positions().to_vec();
    let delta = num.delta.unwrap_or(LyapunovParams::default_for(n).delta);
    CouplingState::new(ens, xbar, ybar, rates, num.dt, delta, cfg.run.seed, run)
}

fn lyapunov_params(cfg: &ExperimentConfig, n: usize) -> Result<LyapunovParams> {
    let def = LyapunovParams::default_for(n);
    LyapunovParams::new(
        cfg.numerics.lyapunov_a.unwrap_or(def.a),
        cfg.numerics.delta.unwrap_or(def.delta),
    )
}

/// One coupled particle/copy run with diagnostics.
pub fn run_couple(cfg: &ExperimentConfig) -> Result<Output> {
    let (spec, diff, rates) = (cfg.potential()?, cfg.diffusion()?, cfg.rates()?);
    let num = &cfg.numerics;
    let bounds = RateBounds::compute(&spec, &diff, &rates)?;
    let label = gate("c0", bounds.c0, cfg.run.allow_exploratory)?;
    let (law, law_bar, copy_field) = coupled_laws(cfg)?;
    let traj = meanfield::solve(&copy_field, &spec, &diff, &rates, num.horizon, num.dt, usize::MAX)?;
    let params = lyapunov_params(cfg, num.n)?;
    let steps = step_count(num.horizon, num.dt)?;
    let pool = pool(cfg)?;
    pool.install(|| {
        let mut st = start_coupling(cfg, num.n, 0, law, law_bar, &rates)?;
        let mut table = Table::new(&["t", "lyapunov", "x_bound", "y_bound", "min_pair_dist", "spin_disagreement_fraction"]);
        let row = |st: &CouplingState| {
            let g = st.diagnostics(&params);
            vec![g.t, g.lyapunov, g.x_bound, g.y_bound, g.min_pair_dist, g.spin_disagreement_fraction]
        };
        table.push(row(&st));
        for s in 1..=steps {
            st.coupled_step(&spec, &diff, &rates, &traj.drift, num.force_method)?;
            if s % num.snapshot_every.max(1) == 0 || s == steps {
                table.push(row(&st));
            }
        }
        let mut report = header(cfg, "couple");
        bounds.record(&mut report);
        report.set("label", label);
        report.set("n", num.n);
        report.set_f64("lyapunov_a", params.a);
        report.set_f64("delta", params.delta);
        report.set_f64("mass_drift", traj.mass_drift);
        let copies = crate::particles::ParticleEnsemble::new(
            st.dim(),
            st.copy_positions().to_vec(),
            st.copy_spins().to_vec(),
            st.time(),
        )?;
        Ok(Output {
            report,
            tables: vec![("coupling".into(), table)],
            texts: vec![
                ("ensemble.txt".into(), ensemble_to_text(st.particles(), cfg.run.seed)),
                ("copies.txt".into(), ensemble_to_text(&copies, cfg.run.seed)),
            ],
        })
    })
}

/// Distances recorded at one time of one repeat.
#[derive(Debug, Clone, Copy)]
struct ChaosSample {
    law: f64,
    sample: f64,
    x_bound: f64,
    y_bound: f64,
}

/// Propagation-of-chaos scan over the particle-count ladder.
///
/// Columns: `w1_law` is the x-marginal distance between the particles and
/// the PDE density (one dimension only), `w1_sample` the distance between
/// the particles and their coupled mean-field copies, and `x_bound`,
/// `y_bound` the coupling upper bounds. Means come with standard errors.
pub fn run_poc_scan(cfg: &ExperimentConfig) -> Result<Output> {
    let (spec, diff, rates) = (cfg.potential()?, cfg.diffusion()?, cfg.rates()?);
    let num = &cfg.numerics;
    let bounds = RateBounds::compute(&spec, &diff, &rates)?;
    let label = gate("c0", bounds.c0, cfg.run.allow_exploratory)?;
    if num.times.is_empty() || num.n_ladder.is_empty() {
        return Err(Error::Config("poc-scan needs numerics.times and numerics.n_ladder".into()));
    }
    let (law, law_bar, copy_field) = coupled_laws(cfg)?;
    let record = record_steps(&num.times, num.dt)?;
    let horizon_steps = *record.iter().max().unwrap();
    let traj = meanfield::solve(&copy_field, &spec, &diff, &rates, horizon_steps as f64 * num.dt, num.dt, 1)?;
    let repeats = cfg.run.repeats;
    let jobs: Vec<(usize, usize)> = (0..num.n_ladder.len())
        .flat_map(|i| (0..repeats).map(move |r| (i, r)))
        .collect();
    let pool = pool(cfg)?;
    let results: Vec<Vec<ChaosSample>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, r)| {
                let n = num.n_ladder[i];
                let run = ((i as u64) << 32) | r as u64;
                let mut st = start_coupling(cfg, n, run, law, law_bar, &rates)?;
                let mut out = vec![None; record.len()];
                for s in 0..=horizon_steps {
                    if s > 0 {
                        st.coupled_step(&spec, &diff, &rates, &traj.drift, num.force_method)?;
                    }
                    for (slot, _) in record.iter().enumerate().filter(|(_, &k)| k == s) {
                        let emp = st.particles().empirical();
                        let lawd = if cfg.model.d == 1 {
                            w1_field_vs_atoms(&traj.snapshots[s], num.grid_cells, &emp.circle_atoms()?)?
                        } else {
                            f64::NAN
                        };
                        let (sample, _) = marginal_w1(&emp, &st.copies_empirical())?;
                        let (x_bound, y_bound) = st.w1_upper_bound();
                        out[slot] = Some(ChaosSample {
                            law: lawd,
                            sample,
                            x_bound,
                            y_bound,
                        });
                    }
                }
                Ok(out.into_iter().map(|o| o.expect("every record step is visited")).collect())
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut table = Table::new(&[
        "n",
        "t",
        "repeats",
        "w1_law_mean",
        "w1_law_se",
        "w1_sample_mean",
        "w1_sample_se",
        "x_bound_mean",
        "x_bound_se",
        "y_bound_mean",
        "y_bound_se",
    ]);
    let mut final_law = Vec::new();
    let mut final_sample = Vec::new();
    let last_slot = record
        .iter()
        .enumerate()
        .max_by_key(|(_, &k)| k)
        .map(|(j, _)| j)
        .unwrap();
    for (i, &n) in num.n_ladder.iter().enumerate() {
        let runs = &results[i * repeats..(i + 1) * repeats];
        for (slot, &t) in num.times.iter().enumerate() {
            let pick = |f: fn(&ChaosSample) -> f64| mean_se(&runs.iter().map(|r| f(&r[slot])).collect::<Vec<_>>());
            let (lm, ls) = pick(|c| c.law);
            let (sm, ss) = pick(|c| c.sample);
            let (xm, xs) = pick(|c| c.x_bound);
            let (ym, ys) = pick(|c| c.y_bound);
            table.push(vec![n as f64, t, repeats as f64, lm, ls, sm, ss, xm, xs, ym, ys]);
            if slot == last_slot {
                final_law.push(lm);
                final_sample.push(sm);
            }
        }
    }
    let mut report = header(cfg, "poc-scan");
    bounds.record(&mut report);
    report.set("label", label);
    report.set("repeats", repeats);
    report.set_f64("mass_drift", traj.mass_drift);
    if num.n_ladder.len() >= 2 {
        let logn: Vec<f64> = num.n_ladder.iter().map(|&n| (n as f64).ln()).collect();
        let slope = |w: &[f64]| fit_slope(&logn, &w.iter().map(|v| v.ln()).collect::<Vec<_>>());
        if cfg.model.d == 1 {
            report.set_f64("slope_w1_law", slope(&final_law));
        }
        report.set_f64("slope_w1_sample", slope(&final_sample));
    }
    Ok(Output {
        report,
        tables: vec![("poc".into(), table)],
        texts: Vec::new(),
    })
}

/// Distance between two PDE solutions over time.
pub fn run_contraction(cfg: &ExperimentConfig) -> Result<Output> {
    let (spec, diff, rates) = (cfg.potential()?, cfg.diffusion()?, cfg.rates()?);
    let num = &cfg.numerics;
    let bounds = RateBounds::compute(&spec, &diff, &rates)?;
    let label = gate("c_star", bounds.c_star, cfg.run.allow_exploratory)?;
    let (a0, b0) = (cfg.initial_field()?, cfg.second_field()?);
    let every = num.snapshot_every.max(1);
    let pool = pool(cfg)?;
    let (ta, tb) = pool.install(|| {
        rayon::join(
            || meanfield::solve(&a0, &spec, &diff, &rates, num.horizon, num.dt, every),
            || meanfield::solve(&b0, &spec, &diff, &rates, num.horizon, num.dt, every),
        )
    });
    let (ta, tb) = (ta?, tb?);
    let mut table = Table::new(&["t", "w1_x", "w1_y"]);
    let rows: Vec<Vec<f64>> = pool.install(|| {
        ta.snapshots
            .par_iter()
            .zip(&tb.snapshots)
            .map(|(a, b)| {
                let wx = field_w1(a, b, num.grid_cells)?;
                let wy = spin_w1(a.spin_law()?, b.spin_law()?);
                Ok(vec![a.time(), wx, wy])
            })
            .collect::<Result<_>>()
    })?;
    rows.into_iter().for_each(|r| table.push(r));
    let t = table.column("t").unwrap();
    let wx = table.column("w1_x").unwrap();
    let wy = table.column("w1_y").unwrap();
    let monotone = wx.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-14);
    let mut report = header(cfg, "contract");
    bounds.record(&mut report);
    report.set("label", label);
    report.set_f64("rate_floor", bounds.contraction_rate() / 7.0);
    report.set_f64("rate_x_tail", fit_tail_rate(&t, &wx, 1e-13, 0.5));
    report.set_f64("rate_y", fit_decay_rate(&t, &wy, 1e-13));
    report.set("monotone_x", monotone);
    report.set_f64("mass_drift", ta.mass_drift.max(tb.mass_drift));
    Ok(Output {
        report,
        tables: vec![("contraction".into(), table)],
        texts: Vec::new(),
    })
}

/// Spectral amplitude `sqrt(u_k^2 + v_k^2)` of mode `k`.
pub fn mode_amplitude(field: &SpectralField, k: &[u32]) -> f64 {
    field.coefficient(k).map(|(u, v)| (u * u + v * v).sqrt()).unwrap_or(0.0)
}

fn threshold_table(report: &ThresholdReport, d: usize) -> Table {
    let mut cols: Vec<String> = (0..d).map(|c| format!("k{c}")).collect();
    cols.extend(
        ["lambda", "d_plus", "d_minus", "u_coeff", "v_coeff", "u_mult", "v_mult", "eta_k", "positive"]
            .map(String::from),
    );
    let mut t = Table {
        columns: cols,
        rows: Vec::new(),
    };
    for m in &report.modes {
        let mut row: Vec<f64> = m.mode.k.iter().map(|&c| c as f64).collect();
        row.extend([
            m.mode.lambda,
            m.mode.d_plus,
            m.mode.d_minus,
            m.mode.u_coeff,
            m.mode.v_coeff,
            m.mode.u_mult,
            m.mode.v_mult,
            m.threshold.value,
            if m.threshold.positive { 1.0 } else { 0.0 },
        ]);
        t.push(row);
    }
    t
}

fn record_thresholds(r: &mut Report, tr: &ThresholdReport) {
    r.set("k_max", tr.k_max);
    match (&tr.k_star, tr.eta_star) {
        (Some(k), Some(eta)) => {
            r.set("k_star", format!("{k:?}"));
            r.set_f64("eta_star", eta);
        }
        _ => r.set("k_star", "none"),
    }
    r.set("simple", tr.simple);
    r.set("positive", tr.positive);
    r.set("self_adjoint", tr.self_adjoint);
    r.set_f64("identity_residual", tr.identity_residual);
    if let (Some((h1, h2)), Some(q)) = (tr.null_vector, tr.q) {
        r.set_f64("null_h1", h1);
        r.set_f64("null_h2", h2);
        r.set_f64("transversality", q);
        r.set("transversality_small", tr.q_small);
    }
    if tr.ties.len() > 1 {
        r.set("ties", format!("{:?}", tr.ties));
    }
}

/// Critical thresholds of the base potential (`eta_scale` is ignored).
pub fn run_thresholds(cfg: &ExperimentConfig) -> Result<Output> {
    let (spec, diff, rates) = (cfg.potential()?, cfg.diffusion()?, cfg.rates()?);
    let tr = bifurcation::threshold_report(&spec, &diff, &rates, cfg.numerics.k_max)?;
    let mut report = header(cfg, "thresholds");
    record_thresholds(&mut report, &tr);
    report.sections.push(("modes".into(), threshold_table(&tr, cfg.model.d)));
    Ok(Output {
        report,
        tables: Vec::new(),
        texts: Vec::new(),
    })
}

/// Terminal state, its mode-`k` amplitude and the mass drift of a PDE run
/// at strength `eta` from the homogeneous state plus `seed`.
#[allow(clippy::too_many_arguments)]
pub fn pde_terminal_amplitude(
    eta: f64,
    spec: &PotentialSpec,
    diff: &DiffusionSpec,
    rates: &FlipRates,
    seed: &PerturbationField,
    k: &[u32],
    horizon: f64,
    dt: f64,
) -> Result<(SpectralField, f64, f64)> {
    let solver = PdeSolver::new(&spec.with_eta_scale(eta)?, diff, rates, seed.k_max(), dt)?;
    let traj = meanfield::solve_with(&solver, &seed.to_field(rates), horizon, usize::MAX)?;
    let last = traj.last().clone();
    let amp = mode_amplitude(&last, k);
    Ok((last, amp, traj.mass_drift))
}

/// Sweep of the interaction strength across the critical threshold, by
/// Newton continuation and by long PDE runs.
pub fn run_bifurcation_sweep(cfg: &ExperimentConfig) -> Result<Output> {
    let (spec, diff, rates) = (cfg.potential()?, cfg.diffusion()?, cfg.rates()?);
    let num = &cfg.numerics;
    let tr = bifurcation::threshold_report(&spec, &diff, &rates, num.k_max)?;
    let (k_star, eta_star) = match (&tr.k_star, tr.eta_star) {
        (Some(k), Some(e)) => (k.clone(), e),
        _ => return Err(Error::Domain("no positive threshold in the scanned box".into())),
    };
    let h = tr.null_vector.expect("present with k*");
    let steps = num.eta_steps.max(2);
    let etas: Vec<f64> = (0..steps)
        .map(|i| eta_star * (num.eta_ratio_min + (num.eta_ratio_max - num.eta_ratio_min) * i as f64 / (steps - 1) as f64))
        .collect();
    let opts = BranchOptions {
        seed_amplitude: num.seed_amplitude,
        tol: num.newton_tol,
        ..BranchOptions::default()
    };
    let seed = PerturbationField::single_mode(cfg.model.d, num.k_max, &k_star, h, num.seed_amplitude)?;
    let pool = pool(cfg)?;

    // continuation from the top of the range downwards
    let branch_steps = ((num.eta_ratio_max - num.eta_ratio_min) / num.newton_step_ratio).round() as usize + 1;
    let mut branch = newton_branch(
        eta_star * num.eta_ratio_max,
        eta_star * num.eta_ratio_min,
        branch_steps,
        &spec,
        &diff,
        &rates,
        num.k_max,
        &opts,
    )?;
    branch.reverse();

    let pde: Vec<(SpectralField, f64, f64)> = pool.install(|| {
        etas.par_iter()
            .map(|&eta| pde_terminal_amplitude(eta, &spec, &diff, &rates, &seed, &k_star, num.horizon, num.dt))
            .collect::<Result<_>>()
    })?;

    let mut table = Table::new(&["eta", "eta_ratio", "pde_amplitude", "newton_amplitude", "newton_residual", "newton_converged"]);
    let mut branch_csv = Table::new(&["eta", "amplitude", "residual", "converged"]);
    for p in &branch {
        branch_csv.push(vec![p.eta, p.amplitude, p.residual, if p.converged { 1.0 } else { 0.0 }]);
    }
    for (i, &eta) in etas.iter().enumerate() {
        let nb = branch
            .iter()
            .min_by(|a, b| (a.eta - eta).abs().total_cmp(&(b.eta - eta).abs()));
        table.push(vec![
            eta,
            eta / eta_star,
            pde[i].1,
            nb.map_or(f64::NAN, |p| p.amplitude),
            nb.map_or(f64::NAN, |p| p.residual),
            nb.map_or(0.0, |p| if p.converged { 1.0 } else { 0.0 }),
        ]);
    }

    // onset: first grid value with a nontrivial amplitude, refined by bisection
    let above = |a: f64| a > num.onset_amplitude;
    let mut mass_drift = pde.iter().map(|p| p.2).fold(0.0f64, f64::max);
    let pde_onset = match pde.iter().position(|p| above(p.1)) {
        Some(0) | None => f64::NAN,
        Some(j) => {
            let (mut lo, mut hi) = (etas[j - 1], etas[j]);
            while hi - lo > 1e-3 * eta_star {
                let mid = 0.5 * (lo + hi);
                let (_, a, drift) = pde_terminal_amplitude(mid, &spec, &diff, &rates, &seed, &k_star, num.horizon, num.dt)?;
                mass_drift = mass_drift.max(drift);
                if above(a) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        }
    };
    let newton_onset = branch
        .iter()
        .filter(|p| p.converged && p.amplitude > opts.collapse)
        .map(|p| p.eta)
        .fold(f64::INFINITY, f64::min);

    let mut report = header(cfg, "bifurcate");
    record_thresholds(&mut report, &tr);
    report.set_f64("pde_onset", pde_onset);
    report.set_f64("mass_drift", mass_drift);
    report.set_f64("newton_onset", if newton_onset.is_finite() { newton_onset } else { f64::NAN });
    if let (Some(top), Some(nb)) = (pde.last(), branch.last()) {
        if nb.converged && (nb.eta - etas[steps - 1]).abs() <= 1e-9 * eta_star {
            let w = field_w1(&top.0, &nb.field.to_field(&rates), num.grid_cells)?;
            report.set_f64("top_pde_newton_w1", w);
        }
    }
    Ok(Output {
        report,
        tables: vec![("sweep".into(), table), ("branch".into(), branch_csv)],
        texts: Vec::new(),
    })
}
