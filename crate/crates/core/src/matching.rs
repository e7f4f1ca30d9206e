//! Synthesis of matching priors through the finite-space reweighting map.
//!
//! The map lifts mass onto parameter points whose coverage falls short and
//! renormalizes; its fixed points (under the `max` convention) are exactly
//! the matching priors. A damped iteration drives the search; convergence is
//! reported, never assumed.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{z_map, CoverageReport};
use crate::credible::CredibleFamily;
use crate::error::{Error, Result};
use crate::measure::{w1_1d, DiscreteMeasure, ParameterGrid};
use crate::model::Model;

/// Sign convention for the clipped coverage gap `z+` in the update.
///
/// Under `Max` (`z+ = max(0, z)`), mass moves toward coverage-deficient
/// points and fixed points are matching priors. `PaperLiteralMin`
/// (`z+ = min(0, z)`) is the literal printed formula, kept selectable for
/// study; its updates can degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlusConvention {
    Max,
    PaperLiteralMin,
}

impl PlusConvention {
    fn clip(self, z: f64) -> f64 {
        match self {
            PlusConvention::Max => z.max(0.0),
            PlusConvention::PaperLiteralMin => z.min(0.0),
        }
    }
}

/// One application of the reweighting map:
/// `pi'(s) = (pi(s) + z+_s) / sum_t (pi(t) + z+_t)`.
pub fn q_map(
    model: &Model,
    family: &dyn CredibleFamily,
    prior: &DiscreteMeasure,
    convention: PlusConvention,
) -> Result<DiscreteMeasure> {
    let report = z_map(model, family, prior)?;
    q_update(prior, &report, convention)
}

/// The reweighting formula applied to an existing coverage report.
pub fn q_update(
    prior: &DiscreteMeasure,
    report: &CoverageReport,
    convention: PlusConvention,
) -> Result<DiscreteMeasure> {
    let raw: Vec<f64> = prior
        .mass()
        .iter()
        .zip(&report.z)
        .map(|(&p, &z)| p + convention.clip(z))
        .collect();
    let denom: f64 = raw.iter().sum();
    if !(denom > 1e-12) {
        return Err(Error::DegenerateUpdate(format!(
            "update denominator {denom} is not positive"
        )));
    }
    if raw.iter().any(|&v| v < 0.0) {
        return Err(Error::DegenerateUpdate(
            "update produced a negative mass".into(),
        ));
    }
    DiscreteMeasure::new(
        prior.grid().clone(),
        raw.iter().map(|v| v / denom).collect(),
    )
}

/// Schedule of region parameters driven by one knob `a`:
/// `eta = a`, `delta = a`, `gamma = a^4`, `beta = 1/a`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Schedule {
    pub eta: f64,
    pub delta: f64,
    pub gamma: f64,
    pub beta: f64,
}

/// Builds the schedule and validates `max(1/beta, eta, delta, gamma) < eps <
/// alpha` together with `F' = delta eta - beta C gamma > 0`.
pub fn param_schedule(a: f64, alpha: f64, eps: f64, c: f64) -> Result<Schedule> {
    if !(a > 0.0) {
        return Err(Error::ParameterViolation("schedule knob a must be positive".into()));
    }
    let s = Schedule { eta: a, delta: a, gamma: a.powi(4), beta: 1.0 / a };
    if !(eps < alpha) {
        return Err(Error::ParameterViolation(format!(
            "epsilon < alpha fails: {eps} >= {alpha}"
        )));
    }
    let lhs = (1.0 / s.beta).max(s.eta).max(s.delta).max(s.gamma);
    if !(lhs < eps) {
        return Err(Error::ParameterViolation(format!(
            "max(1/beta, eta, delta, gamma) < epsilon fails: {lhs} >= {eps}"
        )));
    }
    let f_prime = s.delta * s.eta - s.beta * c * s.gamma;
    if !(f_prime > 0.0) {
        return Err(Error::ParameterViolation(format!(
            "F' = delta*eta - beta*C*gamma fails: {f_prime} <= 0"
        )));
    }
    Ok(s)
}

/// Membership in the boundary-mass class:
/// `pi([0, a] union [1 - a, 1]) <= 1 - b`.
pub fn agd_membership(prior: &DiscreteMeasure, a: f64, b: f64) -> bool {
    let tail: f64 = prior
        .grid()
        .points()
        .iter()
        .zip(prior.mass())
        .filter(|(&t, _)| t <= a || t >= 1.0 - a)
        .map(|(_, &m)| m)
        .sum();
    tail <= 1.0 - b
}

/// Near-uniformity check for grids on `[0, 1]`: more than 1000 points, and
/// every interval of length above 0.01 (endpoints scanned on the grid plus
/// half-cells) holds a point fraction within 1% of its length.
pub fn ffin_check(grid: &ParameterGrid) -> bool {
    let n = grid.len();
    if n <= 1000 {
        return false;
    }
    let pts = grid.points();
    // candidate endpoints: points and cell edges, clipped to [0, 1]
    let mut cands: Vec<f64> = Vec::with_capacity(3 * n);
    for (i, &p) in pts.iter().enumerate() {
        let half = 0.5 * grid.cell_weights()[i];
        cands.push((p - half).max(0.0));
        cands.push(p);
        cands.push((p + half).min(1.0));
    }
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cands.dedup();
    // counting ranks per candidate: points <= e and points < e
    let le: Vec<usize> = cands.iter().map(|&e| pts.partition_point(|&p| p <= e)).collect();
    let lt: Vec<usize> = cands.iter().map(|&e| pts.partition_point(|&p| p < e)).collect();
    let total = n as f64;
    for i in 0..cands.len() {
        for j in (i + 1)..cands.len() {
            let len = cands[j] - cands[i];
            if len <= 0.01 {
                continue;
            }
            let count = (le[j] - lt[i]) as f64;
            if count <= 0.99 * len * total || count >= 1.01 * len * total {
                return false;
            }
        }
    }
    true
}

/// Initial prior for the solver.
#[derive(Debug, Clone)]
pub enum SolverInit {
    Uniform,
    Custom(DiscreteMeasure),
}

/// Solver knobs: damping, stopping, the z+ convention, and the schedule.
///
/// `polish` switches on the active-set refinement that runs after the damped
/// loop: the plain iteration tends to limit-cycle around the equalizing
/// prior (mass chases the coverage-deficient band as it drifts), so the
/// support-restricted system `z = 0` is finished off by damped Gauss-Newton.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub damping: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub init: SolverInit,
    pub plus_convention: PlusConvention,
    pub schedule_a: f64,
    pub posterior_map_c: f64,
    pub restarts: usize,
    pub seed: u64,
    pub polish: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iters: 5000,
            tol: crate::coverage::MATCHING_TOL,
            init: SolverInit::Uniform,
            plus_convention: PlusConvention::Max,
            schedule_a: 0.02,
            posterior_map_c: 1.0,
            restarts: 3,
            seed: 0,
            polish: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::ParameterViolation("damping must lie in (0, 1]".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::ParameterViolation("tol must be positive".into()));
        }
        Ok(())
    }
}

/// One iteration record: the max coverage gap seen at the iterate and the
/// W1 step taken to leave it (zero on the final row).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub max_z: f64,
    pub w1_step: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub prior: DiscreteMeasure,
    pub report: CoverageReport,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    pub iters: usize,
    pub restarts_used: usize,
}

/// Damped fixed-point iteration `pi <- (1 - lambda) pi + lambda Q(pi)`,
/// stopping when `max_z <= tol` or the iteration budget runs out. Up to
/// `restarts` fresh starts from seeded random interior priors follow a
/// failed run. Nonconvergence is an outcome, not an error.
pub fn solve_matching(
    model: &Model,
    family: &dyn CredibleFamily,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut start = match &cfg.init {
        SolverInit::Uniform => DiscreteMeasure::uniform(model.grid().clone()),
        SolverInit::Custom(p) => p.clone(),
    };
    let mut best: Option<SolveResult> = None;
    for attempt in 0..=cfg.restarts {
        let mut run = run_iteration(model, family, cfg, &start, attempt)?;
        if cfg.polish {
            refine_in_place(model, family, cfg, &mut run)?;
        }
        let done = run.converged;
        let better = match &best {
            None => true,
            Some(b) => run.report.max_z < b.report.max_z,
        };
        if better {
            best = Some(run);
        }
        if done {
            break;
        }
        // fresh interior start: exponential weights keep every point charged
        let w: Vec<f64> = (0..model.grid().len())
            .map(|_| -(rng.gen::<f64>().max(1e-12)).ln())
            .collect();
        start = DiscreteMeasure::from_weights(model.grid().clone(), &w)?;
    }
    Ok(best.expect("at least one attempt runs"))
}

/// Replace the run's prior by the polished one when polishing helps; leaves
/// already-stationary priors untouched.
fn refine_in_place(
    model: &Model,
    family: &dyn CredibleFamily,
    cfg: &SolverConfig,
    run: &mut SolveResult,
) -> Result<()> {
    // skip if already a fixed point (z <= 0 everywhere makes q_map exact)
    if run.report.max_z <= 0.0 {
        return Ok(());
    }
    match polish::active_set_polish(model, family, &run.prior) {
        Ok(Some(prior)) => {
            let report = z_map(model, family, &prior)?;
            if report.max_z <= run.report.max_z || report.max_z <= cfg.tol {
                run.converged = report.max_z <= cfg.tol;
                run.prior = prior;
                run.report = report;
            }
        }
        // best effort: a failed polish never spoils the damped result
        Ok(None) | Err(_) => {}
    }
    Ok(())
}

mod polish {
    //! Coarse-to-fine complementarity refinement of the fixed-point
    //! condition.
    //!
    //! At a matching prior the coverage gap vanishes on the support and
    //! stays nonpositive elsewhere; exact credibility forces `pi_i z_i = 0`
    //! pointwise, a nonlinear complementarity system. Its solutions here
    //! are atomic (the gap profile is shaped by a few region parameters per
    //! datum, so its zero set is isolated points), which the damped loop
    //! smears into bands and orbits. The refinement solves the system by
    //! Levenberg-damped Gauss-Newton on Fischer-Burmeister residuals
    //! `phi_i = sqrt(pi_i^2 + z_i^2) - pi_i + z_i` over every grid point,
    //! with the movable masses restricted to a lattice that starts coarse
    //! and is refined around the surviving support, so mass can collapse
    //! onto atoms without crawling cell by cell.

    use super::*;

    const SUBSOLVE_TARGET: f64 = 1e-12;
    const MAX_VARS: usize = 320;
    const FD_STEP: f64 = 1e-7;

    pub(super) fn active_set_polish(
        model: &Model,
        family: &dyn CredibleFamily,
        start: &DiscreteMeasure,
    ) -> Result<Option<DiscreteMeasure>> {
        let grid = start.grid().clone();
        let n = grid.len();
        let mut stride = (n / 64).max(1);
        let mut vars: Vec<usize> = lattice(n, stride);
        let mut w = condense(start.mass(), &vars, n);
        loop {
            fb_newton(model, family, &grid, &mut w, &vars)?;
            if stride == 1 {
                break;
            }
            let prev = stride;
            stride = (stride / 4).max(1);
            vars = refine_vars(&w, n, prev, stride);
            if vars.is_empty() {
                return Ok(None);
            }
        }
        for v in w.iter_mut() {
            if *v < 1e-13 {
                *v = 0.0;
            }
        }
        if !(w.iter().sum::<f64>() > 0.0) {
            return Ok(None);
        }
        Ok(Some(DiscreteMeasure::from_weights(grid, &w)?))
    }

    fn lattice(n: usize, stride: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..n).step_by(stride).collect();
        if *out.last().unwrap() != n - 1 {
            out.push(n - 1);
        }
        out
    }

    /// Move all mass onto the variable set: each grid point contributes to
    /// its nearest variable.
    fn condense(mass: &[f64], vars: &[usize], n: usize) -> Vec<f64> {
        let mut w = vec![0.0f64; n];
        for i in 0..n {
            if mass[i] == 0.0 {
                continue;
            }
            let k = match vars.binary_search(&i) {
                Ok(_) => i,
                Err(pos) => {
                    if pos == 0 {
                        vars[0]
                    } else if pos == vars.len() {
                        vars[vars.len() - 1]
                    } else if i - vars[pos - 1] <= vars[pos] - i {
                        vars[pos - 1]
                    } else {
                        vars[pos]
                    }
                }
            };
            w[k] += mass[i];
        }
        w
    }

    /// Next variable set: everything within the previous lattice cell of a
    /// surviving support atom, at the new stride.
    fn refine_vars(w: &[f64], n: usize, prev_stride: usize, stride: usize) -> Vec<usize> {
        let total: f64 = w.iter().sum();
        let mut keep = vec![false; n];
        for i in 0..n {
            if w[i] > 1e-12 * total {
                let lo = i.saturating_sub(prev_stride);
                let hi = (i + prev_stride).min(n - 1);
                let mut j = lo;
                while j <= hi {
                    keep[j] = true;
                    j += stride;
                }
                keep[i] = true;
            }
        }
        let mut vars: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
        if vars.len() > MAX_VARS {
            // keep the heaviest neighborhoods
            vars.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap());
            vars.truncate(MAX_VARS);
            vars.sort_unstable();
        }
        vars
    }

    /// Levenberg-damped Gauss-Newton on the complementarity residuals over
    /// the whole grid, moving only the masses in `vars`.
    fn fb_newton(
        model: &Model,
        family: &dyn CredibleFamily,
        grid: &crate::measure::GridRef,
        w: &mut Vec<f64>,
        vars: &[usize],
    ) -> Result<()> {
        let n = grid.len();
        let k = vars.len();
        if k == 0 {
            return Ok(());
        }
        let fb = |p: f64, z: f64| (p * p + z * z).sqrt() - p + z;
        let eval = |w: &[f64]| -> Result<Vec<f64>> {
            let pi = DiscreteMeasure::from_weights(grid.clone(), w)?;
            let rep = z_map(model, family, &pi)?;
            Ok((0..n).map(|i| fb(pi.mass()[i], rep.z[i])).collect())
        };
        let norm2 = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();

        let mut r = eval(w)?;
        let mut mu = 1e-8;
        for _step in 0..60 {
            if norm2(&r).sqrt() <= SUBSOLVE_TARGET {
                break;
            }
            let mut jac = vec![0.0f64; n * k];
            for (col, &i) in vars.iter().enumerate() {
                let mut wp = w.clone();
                wp[i] += FD_STEP;
                let rp = eval(&wp)?;
                for row in 0..n {
                    jac[row * k + col] = (rp[row] - r[row]) / FD_STEP;
                }
            }
            let mut jtj = vec![0.0f64; k * k];
            let mut jtr = vec![0.0f64; k];
            for a in 0..k {
                for b in a..k {
                    let mut acc = 0.0;
                    for row in 0..n {
                        acc += jac[row * k + a] * jac[row * k + b];
                    }
                    jtj[a * k + b] = acc;
                    jtj[b * k + a] = acc;
                }
                jtr[a] = (0..n).map(|row| jac[row * k + a] * r[row]).sum();
            }
            let base = norm2(&r);
            let mut accepted = false;
            for _try in 0..14 {
                let mut lhs = jtj.clone();
                let scale: f64 = (0..k).map(|d| jtj[d * k + d]).sum::<f64>() / k as f64;
                for d in 0..k {
                    lhs[d * k + d] += mu * scale.max(1e-12);
                }
                let Some(delta) = solve_dense(&mut lhs, &jtr, k) else {
                    mu *= 10.0;
                    continue;
                };
                let mut wt = w.clone();
                for (col, &i) in vars.iter().enumerate() {
                    wt[i] = (wt[i] - delta[col]).max(0.0);
                }
                let total: f64 = wt.iter().sum();
                if !(total > 0.0) {
                    mu *= 10.0;
                    continue;
                }
                for v in wt.iter_mut() {
                    *v /= total;
                }
                let rt = eval(&wt)?;
                if norm2(&rt) < base {
                    *w = wt;
                    r = rt;
                    mu = (mu / 3.0).max(1e-14);
                    accepted = true;
                    break;
                }
                mu *= 4.0;
            }
            if !accepted {
                break;
            }
        }
        Ok(())
    }

    /// Gaussian elimination with partial pivoting; `a` is row-major k x k.
    fn solve_dense(a: &mut [f64], b: &[f64], k: usize) -> Option<Vec<f64>> {
        let mut x = b.to_vec();
        for col in 0..k {
            let mut piv = col;
            let mut best = a[col * k + col].abs();
            for row in col + 1..k {
                let v = a[row * k + col].abs();
                if v > best {
                    best = v;
                    piv = row;
                }
            }
            if best <= 1e-300 {
                return None;
            }
            if piv != col {
                for c in 0..k {
                    a.swap(col * k + c, piv * k + c);
                }
                x.swap(col, piv);
            }
            let d = a[col * k + col];
            for row in col + 1..k {
                let f = a[row * k + col] / d;
                if f == 0.0 {
                    continue;
                }
                for c in col..k {
                    a[row * k + c] -= f * a[col * k + c];
                }
                x[row] -= f * x[col];
            }
        }
        for col in (0..k).rev() {
            let mut acc = x[col];
            for c in col + 1..k {
                acc -= a[col * k + c] * x[c];
            }
            x[col] = acc / a[col * k + col];
        }
        Some(x)
    }
}

fn run_iteration(
    model: &Model,
    family: &dyn CredibleFamily,
    cfg: &SolverConfig,
    start: &DiscreteMeasure,
    attempt: usize,
) -> Result<SolveResult> {
    let lambda = cfg.damping;
    let mut prior = start.clone();
    let mut trace = Vec::new();
    let mut iters = 0;
    // The iteration can orbit the equalizing prior; remember the best pass.
    // Later passes of equal quality win: off-support mass keeps decaying
    // through the orbit, which leaves a cleaner landscape for refinement.
    let mut min_mz = f64::INFINITY;
    let mut best: Option<DiscreteMeasure> = None;
    loop {
        let report = z_map(model, family, &prior)?;
        min_mz = min_mz.min(report.max_z);
        if report.max_z <= min_mz * (1.0 + 1e-3) || best.is_none() {
            best = Some(prior.clone());
        }
        if report.max_z <= cfg.tol || iters >= cfg.max_iters {
            let converged = report.max_z <= cfg.tol;
            trace.push(TraceRow { iter: iters, max_z: report.max_z, w1_step: 0.0 });
            let (prior, report) = if converged {
                (prior, report)
            } else {
                // hand back the best iterate seen, not wherever the orbit
                // happened to stop
                let best_prior = best.expect("loop ran at least once");
                let best_report = z_map(model, family, &best_prior)?;
                (best_prior, best_report)
            };
            return Ok(SolveResult {
                prior,
                report,
                trace,
                converged,
                iters,
                restarts_used: attempt,
            });
        }
        let q = q_update(&prior, &report, cfg.plus_convention)?;
        let mixed: Vec<f64> = prior
            .mass()
            .iter()
            .zip(q.mass())
            .map(|(&p, &qm)| (1.0 - lambda) * p + lambda * qm)
            .collect();
        let next = DiscreteMeasure::new(prior.grid().clone(), mixed)?;
        let step = w1_1d(&prior, &next)?;
        trace.push(TraceRow { iter: iters, max_z: report.max_z, w1_step: step });
        prior = next;
        iters += 1;
    }
}
