//! Credible-region constructions.
//!
//! Alongside the usual credible balls and HPD regions, this module builds
//! their relaxed variants (Lipschitz acceptance fields with exact
//! credibility) and the perturbed regions obtained by averaging relaxed
//! fields over a band of levels and subtracting the exact-credibility
//! correction.
//!
//! A region is represented by its acceptance probability field
//! `psi: Theta -> [0, 1]`; the randomized set it stands for contains `theta`
//! with probability `psi(theta)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{
    lipschitz_quotient, same_grid, DensityField, DiscreteMeasure, GridMeasure, GridRef,
};
use crate::model::{embed_indices, Model};
use crate::posterior::{
    perturb_prior, posterior, posterior_density, PerturbationKind, PerturbationSystem,
};

/// Acceptance probability function of a randomized region at level `1 - alpha`.
#[derive(Debug, Clone)]
pub struct AcceptanceField {
    grid: GridRef,
    psi: Vec<f64>,
    alpha: f64,
}

impl AcceptanceField {
    pub fn new(grid: GridRef, psi: Vec<f64>, alpha: f64) -> Result<Self> {
        if psi.len() != grid.len() {
            return Err(Error::InvalidMeasure("field length != grid size".into()));
        }
        let mut psi = psi;
        for v in psi.iter_mut() {
            if !v.is_finite() || *v < -1e-9 || *v > 1.0 + 1e-9 {
                return Err(Error::InvalidMeasure(format!(
                    "acceptance value {v} outside [0, 1]"
                )));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { grid, psi, alpha })
    }

    pub fn grid(&self) -> &GridRef {
        &self.grid
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn value(&self, i: usize) -> f64 {
        self.psi[i]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lipschitz_quotient(&self) -> f64 {
        lipschitz_quotient(&self.grid, &self.psi)
    }

    /// Credibility of the field under a measure on the same grid.
    pub fn credibility(&self, mu: &GridMeasure) -> f64 {
        mu.integrate(&self.psi)
    }

    /// Restrict to a subgrid given the index of each subgrid point here.
    pub fn restrict(&self, grid: GridRef, index_map: &[usize]) -> Result<Self> {
        let psi = index_map.iter().map(|&j| self.psi[j]).collect();
        Self::new(grid, psi, self.alpha)
    }
}

/// Grid-level support: indices where the field exceeds the threshold.
pub fn support_of(field: &AcceptanceField, threshold: f64) -> Result<Vec<usize>> {
    if !(threshold >= 0.0) {
        return Err(Error::DomainError("threshold must be nonnegative".into()));
    }
    Ok((0..field.psi.len())
        .filter(|&i| field.psi[i] > threshold)
        .collect())
}

/// The trivial randomized family (empty set with probability `alpha`, the
/// whole space otherwise): `psi` identically `1 - alpha`.
pub fn trivial_region(alpha: f64, grid: &GridRef) -> Result<AcceptanceField> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::ParameterViolation("alpha must lie in (0, 1)".into()));
    }
    AcceptanceField::new(grid.clone(), vec![1.0 - alpha; grid.len()], alpha)
}

/// A usual credible ball: smallest closed ball around the mean holding
/// `1 - alpha` mass.
#[derive(Debug, Clone)]
pub struct BallRegion {
    pub center: f64,
    pub radius: f64,
    pub field: AcceptanceField,
}

pub fn credible_ball(mu: &GridMeasure, alpha: f64) -> Result<BallRegion> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::ParameterViolation("alpha must lie in (0, 1)".into()));
    }
    let grid = mu.grid().clone();
    let center = mu.mean();
    let masses = mu.point_masses();
    let dist: Vec<f64> = grid.points().iter().map(|t| (t - center).abs()).collect();
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap());

    let target = 1.0 - alpha;
    let mut cum = 0.0;
    let mut radius = dist[*order.last().unwrap()];
    let mut k = 0;
    while k < order.len() {
        let d = dist[order[k]];
        // the ball of radius d picks up every atom at distance exactly d
        while k < order.len() && dist[order[k]] == d {
            cum += masses[order[k]];
            k += 1;
        }
        if cum >= target {
            radius = d;
            break;
        }
    }
    let psi: Vec<f64> = dist.iter().map(|&d| if d <= radius { 1.0 } else { 0.0 }).collect();
    let field = AcceptanceField::new(grid, psi, alpha)?;
    Ok(BallRegion { center, radius, field })
}

/// A usual HPD region: highest density level retaining `1 - alpha` mass.
/// Ties at the critical level are all included.
#[derive(Debug, Clone)]
pub struct HpdRegion {
    pub level: f64,
    pub field: AcceptanceField,
}

pub fn hpd_region(mu: &DensityField, alpha: f64) -> Result<HpdRegion> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::ParameterViolation("alpha must lie in (0, 1)".into()));
    }
    let grid = mu.grid().clone();
    let rho = mu.values();
    let masses: Vec<f64> = rho
        .iter()
        .zip(grid.cell_weights())
        .map(|(v, w)| v * w)
        .collect();
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| rho[b].partial_cmp(&rho[a]).unwrap());

    let target = 1.0 - alpha;
    let mut cum = 0.0;
    let mut level = rho[*order.last().unwrap()];
    let mut k = 0;
    while k < order.len() {
        let d = rho[order[k]];
        while k < order.len() && rho[order[k]] == d {
            cum += masses[order[k]];
            k += 1;
        }
        if cum >= target {
            level = d;
            break;
        }
    }
    let psi: Vec<f64> = rho.iter().map(|&v| if v >= level { 1.0 } else { 0.0 }).collect();
    let field = AcceptanceField::new(grid, psi, alpha)?;
    Ok(HpdRegion { level, field })
}

/// Prefix-sum structure for integrals of clamped ramps against point masses.
struct RampSolver {
    keys: Vec<f64>,
    pmass: Vec<f64>,
    pkey_mass: Vec<f64>,
    total: f64,
}

impl RampSolver {
    fn new(keys_raw: &[f64], masses: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..keys_raw.len()).collect();
        order.sort_by(|&a, &b| keys_raw[a].partial_cmp(&keys_raw[b]).unwrap());
        let keys: Vec<f64> = order.iter().map(|&i| keys_raw[i]).collect();
        let mut pmass = Vec::with_capacity(keys.len() + 1);
        let mut pkey_mass = Vec::with_capacity(keys.len() + 1);
        pmass.push(0.0);
        pkey_mass.push(0.0);
        for &i in &order {
            pmass.push(pmass.last().unwrap() + masses[i]);
            pkey_mass.push(pkey_mass.last().unwrap() + keys_raw[i] * masses[i]);
        }
        let total = *pmass.last().unwrap();
        Self { keys, pmass, pkey_mass, total }
    }

    /// `sum_i m_i clamp(r - k_i, 0, 1)`; nondecreasing and 1-Lipschitz in `r`.
    fn ramp_up(&self, r: f64) -> f64 {
        let i1 = self.keys.partition_point(|&k| k <= r - 1.0);
        let i2 = self.keys.partition_point(|&k| k < r);
        let full = self.pmass[i1];
        let band_m = self.pmass[i2] - self.pmass[i1];
        let band_km = self.pkey_mass[i2] - self.pkey_mass[i1];
        full + r * band_m - band_km
    }

    /// `sum_i m_i clamp(k_i + 1 - u, 0, 1)`; nonincreasing and 1-Lipschitz in `u`.
    fn ramp_down(&self, u: f64) -> f64 {
        let i1 = self.keys.partition_point(|&k| k <= u - 1.0);
        let i2 = self.keys.partition_point(|&k| k < u);
        let full = self.total - self.pmass[i2];
        let band_m = self.pmass[i2] - self.pmass[i1];
        let band_km = self.pkey_mass[i2] - self.pkey_mass[i1];
        full + band_km + (1.0 - u) * band_m
    }

    fn max_key(&self) -> f64 {
        *self.keys.last().unwrap()
    }
}

/// Least `r` with `pred(r)` true; `pred` must be monotone (false then true).
fn bisect_least(mut lo: f64, mut hi: f64, tol: f64, pred: impl Fn(f64) -> bool) -> f64 {
    debug_assert!(pred(hi));
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Greatest `r` with `pred(r)` true; `pred` must be monotone (true then false).
fn bisect_greatest(mut lo: f64, mut hi: f64, tol: f64, pred: impl Fn(f64) -> bool) -> f64 {
    debug_assert!(pred(lo));
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if pred(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// A relaxed credible ball: `psi = min(1, max(0, r* - beta |theta - M(mu)|))`
/// with `r*` the least level making the field exactly `1 - alpha` credible.
#[derive(Debug, Clone)]
pub struct RelaxedBallRegion {
    pub center: f64,
    pub r_star: f64,
    pub field: AcceptanceField,
}

pub fn relaxed_ball(
    mu: &GridMeasure,
    alpha: f64,
    beta: f64,
    bisect_tol: f64,
) -> Result<RelaxedBallRegion> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::ParameterViolation("alpha must lie in (0, 1)".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::ParameterViolation("slope beta must be positive".into()));
    }
    let center = mu.mean();
    let solver = ball_solver(mu, center, beta);
    let r_star = relaxed_ball_level(&solver, alpha, bisect_tol)?;
    let field = relaxed_ball_field(mu.grid(), center, beta, r_star, alpha)?;
    Ok(RelaxedBallRegion { center, r_star, field })
}

fn ball_solver(mu: &GridMeasure, center: f64, beta: f64) -> RampSolver {
    let keys: Vec<f64> = mu
        .grid()
        .points()
        .iter()
        .map(|t| beta * (t - center).abs())
        .collect();
    RampSolver::new(&keys, &mu.point_masses())
}

fn relaxed_ball_level(solver: &RampSolver, alpha: f64, tol: f64) -> Result<f64> {
    let target = 1.0 - alpha;
    let hi = solver.max_key() + 1.0;
    if solver.ramp_up(hi) < target {
        return Err(Error::InvalidMeasure(format!(
            "total mass {} cannot reach credibility {target}",
            solver.total
        )));
    }
    Ok(bisect_least(0.0, hi, tol, |r| solver.ramp_up(r) >= target))
}

fn relaxed_ball_field(
    grid: &GridRef,
    center: f64,
    beta: f64,
    r_star: f64,
    alpha: f64,
) -> Result<AcceptanceField> {
    let psi: Vec<f64> = grid
        .points()
        .iter()
        .map(|t| (r_star - beta * (t - center).abs()).clamp(0.0, 1.0))
        .collect();
    AcceptanceField::new(grid.clone(), psi, alpha)
}

/// A relaxed HPD region: piecewise-linear in the density with effective
/// slope `beta_hat = beta / max(1, Lip(rho))`, at the highest level keeping
/// exact `1 - alpha` credibility.
#[derive(Debug, Clone)]
pub struct RelaxedHpdRegion {
    pub d_star: f64,
    pub beta_hat: f64,
    pub field: AcceptanceField,
}

pub fn relaxed_hpd(
    mu: &DensityField,
    alpha: f64,
    beta: f64,
    bisect_tol: f64,
) -> Result<RelaxedHpdRegion> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::ParameterViolation("alpha must lie in (0, 1)".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::ParameterViolation("slope beta must be positive".into()));
    }
    if mu.values().iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidDensity("density field is identically zero".into()));
    }
    let beta_hat = beta / lipschitz_quotient(mu.grid(), mu.values()).max(1.0);
    let solver = hpd_solver(mu, beta_hat);
    let u_star = relaxed_hpd_level(&solver, alpha, bisect_tol * beta_hat.min(1.0))?;
    let d_star = u_star / beta_hat;
    let field = relaxed_hpd_field(mu, beta_hat, d_star, alpha)?;
    Ok(RelaxedHpdRegion { d_star, beta_hat, field })
}

fn hpd_solver(mu: &DensityField, beta_hat: f64) -> RampSolver {
    let keys: Vec<f64> = mu.values().iter().map(|&v| beta_hat * v).collect();
    let masses: Vec<f64> = mu
        .values()
        .iter()
        .zip(mu.grid().cell_weights())
        .map(|(v, w)| v * w)
        .collect();
    RampSolver::new(&keys, &masses)
}

/// Solves for the scaled level `u* = beta_hat d*`.
fn relaxed_hpd_level(solver: &RampSolver, alpha: f64, tol: f64) -> Result<f64> {
    let target = 1.0 - alpha;
    if solver.ramp_down(0.0) < target {
        return Err(Error::InvalidMeasure(format!(
            "total mass {} cannot reach credibility {target}",
            solver.total
        )));
    }
    let hi = solver.max_key() + 1.0;
    Ok(bisect_greatest(0.0, hi, tol, |u| solver.ramp_down(u) >= target))
}

fn relaxed_hpd_field(
    mu: &DensityField,
    beta_hat: f64,
    d_star: f64,
    alpha: f64,
) -> Result<AcceptanceField> {
    let psi: Vec<f64> = mu
        .values()
        .iter()
        .map(|&v| (1.0 - beta_hat * (d_star - v)).clamp(0.0, 1.0))
        .collect();
    AcceptanceField::new(mu.grid().clone(), psi, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionKind {
    Ball,
    Hpd,
    RelaxedBall,
    RelaxedHpd,
    PerturbedBall,
    PerturbedHpd,
}

impl RegionKind {
    pub fn base(self) -> BaseKind {
        match self {
            RegionKind::Ball | RegionKind::RelaxedBall | RegionKind::PerturbedBall => {
                BaseKind::Ball
            }
            RegionKind::Hpd | RegionKind::RelaxedHpd | RegionKind::PerturbedHpd => BaseKind::Hpd,
        }
    }

    pub fn is_perturbed(self) -> bool {
        matches!(self, RegionKind::PerturbedBall | RegionKind::PerturbedHpd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseKind {
    Ball,
    Hpd,
}

/// Parameters of the region constructions.
///
/// `posterior_map_c` is the Lipschitz constant of the posterior map used in
/// the run-time check `F' = delta eta - beta C gamma > 0` for perturbed
/// kinds; it comes from configuration (or an empirical estimate), never from
/// a closed form.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegionConfig {
    pub kind: RegionKind,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub eta: f64,
    pub gamma: f64,
    pub n_z: usize,
    pub bisect_tol: f64,
    pub posterior_map_c: f64,
}

impl RegionConfig {
    pub fn new(kind: RegionKind, alpha: f64) -> Self {
        Self {
            kind,
            alpha,
            beta: 4.0,
            delta: 0.5 * alpha,
            eta: 0.5,
            gamma: 1e-8,
            n_z: 33,
            bisect_tol: 1e-10,
            posterior_map_c: 1.0,
        }
    }

    pub fn f_prime(&self) -> f64 {
        self.delta * self.eta - self.beta * self.posterior_map_c * self.gamma
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::ParameterViolation("alpha must lie in (0, 1)".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::ParameterViolation("beta must be positive".into()));
        }
        if !(self.bisect_tol > 0.0) {
            return Err(Error::ParameterViolation("bisect_tol must be positive".into()));
        }
        if self.kind.is_perturbed() {
            if !(self.delta > 0.0 && self.delta < self.alpha) {
                return Err(Error::ParameterViolation(
                    "delta must lie in (0, alpha)".into(),
                ));
            }
            if !(self.eta > 0.0 && self.eta < 1.0) {
                return Err(Error::ParameterViolation("eta must lie in (0, 1)".into()));
            }
            if self.n_z < 3 {
                return Err(Error::ParameterViolation("n_z must be at least 3".into()));
            }
            let fp = self.f_prime();
            if !(fp > 0.0) {
                return Err(Error::ParameterViolation(format!(
                    "F' = delta*eta - beta*C*gamma = {fp} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Quadrature nodes and weights for the level average over `[delta eta, delta]`.
///
/// The averaging density is the symmetric triangle on that interval (the
/// scaled copy of a continuous density supported on `[eta, 1]`). Composite
/// trapezoid nodes; with an odd count the kink sits on a node, and weights
/// are normalized to a exact convex combination.
fn level_nodes(delta: f64, eta: f64, n_z: usize) -> Vec<(f64, f64)> {
    let a = delta * eta;
    let b = delta;
    let c = 0.5 * (a + b);
    let halfwidth = 0.5 * (b - a);
    let peak = 1.0 / halfwidth;
    let density = |z: f64| (1.0 - (z - c).abs() / halfwidth).max(0.0) * peak;
    let h = (b - a) / (n_z - 1) as f64;
    let mut nodes: Vec<(f64, f64)> = (0..n_z)
        .map(|k| {
            let z = a + k as f64 * h;
            let trap = if k == 0 || k == n_z - 1 { 0.5 } else { 1.0 };
            (z, trap * h * density(z))
        })
        .collect();
    let total: f64 = nodes.iter().map(|(_, w)| w).sum();
    for (_, w) in nodes.iter_mut() {
        *w /= total;
    }
    nodes
}

/// Level-averaged relaxed field: the acceptance field
/// `psi_tilde = integral of psi^{alpha - z} against the level density`.
///
/// Has credibility at least `1 - alpha` under the base posterior, with
/// margin about the mean of the level density.
pub fn averaged_field(
    post_base: &GridMeasure,
    base: BaseKind,
    cfg: &RegionConfig,
) -> Result<AcceptanceField> {
    cfg.validate()?;
    if !(cfg.delta > 0.0 && cfg.delta < cfg.alpha && cfg.eta > 0.0 && cfg.eta < 1.0) {
        return Err(Error::ParameterViolation(
            "level averaging needs delta in (0, alpha) and eta in (0, 1)".into(),
        ));
    }
    let grid = post_base.grid().clone();
    let nodes = level_nodes(cfg.delta, cfg.eta, cfg.n_z.max(3));
    let mut psi = vec![0.0f64; grid.len()];
    match base {
        BaseKind::Ball => {
            let center = post_base.mean();
            let solver = ball_solver(post_base, center, cfg.beta);
            for &(z, w) in &nodes {
                let r = {
                    let level_alpha = cfg.alpha - z;
                    let target = 1.0 - level_alpha;
                    let hi = solver.max_key() + 1.0;
                    if solver.ramp_up(hi) < target {
                        return Err(Error::InvalidMeasure(
                            "posterior mass cannot reach the averaged level".into(),
                        ));
                    }
                    bisect_least(0.0, hi, cfg.bisect_tol, |r| solver.ramp_up(r) >= target)
                };
                for (i, t) in grid.points().iter().enumerate() {
                    psi[i] += w * (r - cfg.beta * (t - center).abs()).clamp(0.0, 1.0);
                }
            }
        }
        BaseKind::Hpd => {
            let GridMeasure::Density(rho) = post_base else {
                return Err(Error::InvalidDensity(
                    "relaxed HPD needs an absolutely continuous posterior".into(),
                ));
            };
            let beta_hat = cfg.beta / lipschitz_quotient(rho.grid(), rho.values()).max(1.0);
            let solver = hpd_solver(rho, beta_hat);
            for &(z, w) in &nodes {
                let u = relaxed_hpd_level_at(&solver, cfg.alpha - z, cfg.bisect_tol * beta_hat.min(1.0))?;
                for (i, &v) in rho.values().iter().enumerate() {
                    psi[i] += w * (beta_hat * v + 1.0 - u).clamp(0.0, 1.0);
                }
            }
        }
    }
    AcceptanceField::new(grid, psi, cfg.alpha)
}

fn relaxed_hpd_level_at(solver: &RampSolver, alpha: f64, tol: f64) -> Result<f64> {
    let target = 1.0 - alpha;
    if solver.ramp_down(0.0) < target {
        return Err(Error::InvalidMeasure(
            "posterior mass cannot reach the averaged level".into(),
        ));
    }
    let hi = solver.max_key() + 1.0;
    Ok(bisect_greatest(0.0, hi, tol, |u| solver.ramp_down(u) >= target))
}

/// Exact-credibility correction: the largest downward shift `R` keeping
/// `integral of max(0, psi_tilde - R)` at least `1 - alpha` under `post`.
///
/// The shifted-credibility map is monotone nonincreasing and 1-Lipschitz, so
/// bisection pins `R` to `tol` and the credibility of the shifted field to
/// the same accuracy. Always lands in `[0, alpha]`.
pub fn correction_r(
    psi_tilde: &AcceptanceField,
    post: &GridMeasure,
    alpha: f64,
    tol: f64,
) -> Result<f64> {
    if !same_grid(psi_tilde.grid(), post.grid()) {
        return Err(Error::GridMismatch);
    }
    let masses = post.point_masses();
    let shifted_credibility = |r: f64| -> f64 {
        psi_tilde
            .psi()
            .iter()
            .zip(&masses)
            .map(|(&p, &m)| (p - r).max(0.0) * m)
            .sum()
    };
    let target = 1.0 - alpha;
    let at_zero = shifted_credibility(0.0);
    if at_zero < target - 1e-12 {
        return Err(Error::CredibilityDeficit { credibility: at_zero, required: target });
    }
    if at_zero <= target {
        return Ok(0.0);
    }
    Ok(bisect_greatest(0.0, 1.0, tol, |r| {
        shifted_credibility(r) >= target
    }))
}

/// A perturbed region together with its intermediate pieces.
#[derive(Debug, Clone)]
pub struct PerturbedParts {
    pub psi_tilde: AcceptanceField,
    pub correction: f64,
    pub field: AcceptanceField,
}

/// Perturbed region when base and true posterior share one grid: the
/// level-averaged field minus the exact-credibility correction.
pub fn perturbed_region(
    post_base: &GridMeasure,
    post_true: &GridMeasure,
    base: BaseKind,
    cfg: &RegionConfig,
) -> Result<PerturbedParts> {
    let psi_tilde = averaged_field(post_base, base, cfg)?;
    shift_by_correction(psi_tilde, post_true, cfg)
}

fn shift_by_correction(
    psi_tilde: AcceptanceField,
    post_true: &GridMeasure,
    cfg: &RegionConfig,
) -> Result<PerturbedParts> {
    let r = correction_r(&psi_tilde, post_true, cfg.alpha, cfg.bisect_tol)?;
    let psi: Vec<f64> = psi_tilde.psi().iter().map(|&p| (p - r).max(0.0)).collect();
    let field = AcceptanceField::new(psi_tilde.grid().clone(), psi, cfg.alpha)?;
    Ok(PerturbedParts { psi_tilde, correction: r, field })
}

/// A family of credible regions: one acceptance field per (prior, datum).
pub trait CredibleFamily {
    fn alpha(&self) -> f64;
    fn acceptance(&self, prior: &DiscreteMeasure, x: usize) -> Result<AcceptanceField>;
}

/// The trivial family; exactly credible and exactly matching for any prior.
#[derive(Debug, Clone)]
pub struct TrivialFamily {
    pub alpha: f64,
    pub grid: GridRef,
}

impl CredibleFamily for TrivialFamily {
    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn acceptance(&self, _prior: &DiscreteMeasure, _x: usize) -> Result<AcceptanceField> {
        trivial_region(self.alpha, &self.grid)
    }
}

struct ConvCtx {
    model: Model,
    /// extended-grid index of each original grid point
    index_map: Vec<usize>,
}

/// The working family: any [`RegionKind`] applied to the posterior of the
/// (possibly perturbed) prior, with the exact-credibility correction for
/// perturbed kinds taken against the unperturbed posterior.
pub struct RegionFamily {
    model: Arc<Model>,
    cfg: RegionConfig,
    sys: PerturbationSystem,
    ctx: Option<ConvCtx>,
}

impl RegionFamily {
    /// Builds the family; for a convolution system the model is extended to
    /// the default 1-fattening of the parameter interval.
    pub fn new(model: Arc<Model>, cfg: RegionConfig, sys: PerturbationSystem) -> Result<Self> {
        Self::with_fattening(model, cfg, sys, 1.0)
    }

    /// Same, with an explicit supermodel fattening pad (must cover `gamma`).
    pub fn with_fattening(
        model: Arc<Model>,
        cfg: RegionConfig,
        sys: PerturbationSystem,
        pad: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let ctx = match sys.kind {
            PerturbationKind::Trivial => {
                if cfg.kind.base() == BaseKind::Hpd {
                    return Err(Error::InvalidDensity(
                        "HPD kinds need the convolution perturbation system".into(),
                    ));
                }
                None
            }
            PerturbationKind::Convolution => {
                if pad < sys.gamma {
                    return Err(Error::ParameterViolation(
                        "supermodel pad must cover gamma".into(),
                    ));
                }
                let (ext_grid, _) = model.grid().fattened(pad)?;
                let ext_grid = Arc::new(ext_grid);
                let ext_model = model.supermodel_extend(&ext_grid)?;
                let index_map = embed_indices(model.grid(), &ext_grid)?;
                Some(ConvCtx { model: ext_model, index_map })
            }
        };
        Ok(Self { model, cfg, sys, ctx })
    }

    pub fn config(&self) -> &RegionConfig {
        &self.cfg
    }

    pub fn system(&self) -> &PerturbationSystem {
        &self.sys
    }

    /// Posterior of the perturbed prior, on the grid the base field lives on.
    fn base_posterior(&self, prior: &DiscreteMeasure, x: usize) -> Result<GridMeasure> {
        match (&self.sys.kind, &self.ctx) {
            (PerturbationKind::Trivial, _) => {
                Ok(GridMeasure::Discrete(posterior(&self.model, prior, x)?))
            }
            (PerturbationKind::Convolution, Some(ctx)) => {
                let perturbed = perturb_prior(prior, &self.sys, ctx.model.grid())?;
                match perturbed {
                    GridMeasure::Density(density) => Ok(GridMeasure::Density(posterior_density(
                        &ctx.model, &density, x,
                    )?)),
                    GridMeasure::Discrete(_) => unreachable!("convolution always densifies"),
                }
            }
            (PerturbationKind::Convolution, None) => unreachable!("ctx built with system"),
        }
    }

    /// Bring a field from the base grid back to the model grid.
    fn restrict(&self, field: AcceptanceField) -> Result<AcceptanceField> {
        match &self.ctx {
            None => Ok(field),
            Some(ctx) => field.restrict(self.model.grid().clone(), &ctx.index_map),
        }
    }

    /// The perturbed construction with intermediates, on the model grid.
    pub fn perturbed_parts(&self, prior: &DiscreteMeasure, x: usize) -> Result<PerturbedParts> {
        let post_base = self.base_posterior(prior, x)?;
        let psi_tilde = self.restrict(averaged_field(&post_base, self.cfg.kind.base(), &self.cfg)?)?;
        let post_true = GridMeasure::Discrete(posterior(&self.model, prior, x)?);
        shift_by_correction(psi_tilde, &post_true, &self.cfg)
    }
}

#[allow(clippy::needless_range_loop)]
impl CredibleFamily for RegionFamily {
    fn alpha(&self) -> f64 {
        self.cfg.alpha
    }

    fn acceptance(&self, prior: &DiscreteMeasure, x: usize) -> Result<AcceptanceField> {
        match self.cfg.kind {
            RegionKind::Ball => {
                let post = self.base_posterior(prior, x)?;
                self.restrict(credible_ball(&post, self.cfg.alpha)?.field)
            }
            RegionKind::Hpd => {
                let post = self.base_posterior(prior, x)?;
                let GridMeasure::Density(rho) = post else {
                    return Err(Error::InvalidDensity(
                        "HPD needs an absolutely continuous posterior".into(),
                    ));
                };
                self.restrict(hpd_region(&rho, self.cfg.alpha)?.field)
            }
            RegionKind::RelaxedBall => {
                let post = self.base_posterior(prior, x)?;
                self.restrict(
                    relaxed_ball(&post, self.cfg.alpha, self.cfg.beta, self.cfg.bisect_tol)?.field,
                )
            }
            RegionKind::RelaxedHpd => {
                let post = self.base_posterior(prior, x)?;
                let GridMeasure::Density(rho) = post else {
                    return Err(Error::InvalidDensity(
                        "relaxed HPD needs an absolutely continuous posterior".into(),
                    ));
                };
                self.restrict(
                    relaxed_hpd(&rho, self.cfg.alpha, self.cfg.beta, self.cfg.bisect_tol)?.field,
                )
            }
            RegionKind::PerturbedBall | RegionKind::PerturbedHpd => {
                Ok(self.perturbed_parts(prior, x)?.field)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::ParameterGrid;
    use crate::model::Model;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid01(n: usize) -> GridRef {
        Arc::new(ParameterGrid::uniform(0.0, 1.0, n).unwrap())
    }

    fn flat_pm1(n: usize) -> (GridRef, GridMeasure) {
        let g = Arc::new(ParameterGrid::uniform(-1.0, 1.0, n).unwrap());
        let f = DensityField::new(g.clone(), vec![0.5; n]).unwrap();
        (g, GridMeasure::Density(f))
    }

    fn random_prior(g: &GridRef, rng: &mut ChaCha8Rng) -> DiscreteMeasure {
        let w: Vec<f64> = (0..g.len()).map(|_| rng.gen::<f64>() + 1e-4).collect();
        DiscreteMeasure::from_weights(g.clone(), &w).unwrap()
    }

    /// The two-bump mixture family with exact cell-overlap discretization.
    fn mixture(grid: &GridRef, c: f64) -> GridMeasure {
        let overlap =
            |lo: f64, hi: f64, a: f64, b: f64| -> f64 { (hi.min(b) - lo.max(a)).max(0.0) };
        let w: Vec<f64> = grid
            .points()
            .iter()
            .zip(grid.cell_weights())
            .map(|(&t, &cw)| {
                let lo = t - 0.5 * cw;
                let hi = t + 0.5 * cw;
                (1.0 - c) * overlap(lo, hi, -0.1, 0.1) / 0.2
                    + c * (overlap(lo, hi, -11.0, -10.0) + overlap(lo, hi, 10.0, 11.0)) / 2.0
            })
            .collect();
        GridMeasure::Discrete(DiscreteMeasure::from_weights(grid.clone(), &w).unwrap())
    }

    #[test]
    fn ball_uniform_density() {
        let g = grid01(4000);
        let f = DensityField::new(g.clone(), vec![1.0; 4000]).unwrap();
        let ball = credible_ball(&GridMeasure::Density(f), 0.5).unwrap();
        assert!((ball.center - 0.5).abs() < 1e-9);
        assert!((ball.radius - 0.25).abs() < 1e-3);
    }

    #[test]
    fn ball_of_dirac_has_zero_radius() {
        let g = grid01(99);
        let d = DiscreteMeasure::dirac(g.clone(), 40).unwrap();
        let ball = credible_ball(&GridMeasure::Discrete(d), 0.3).unwrap();
        assert_eq!(ball.radius, 0.0);
        assert_eq!(ball.field.value(40), 1.0);
        assert_eq!(ball.field.value(41), 0.0);
    }

    #[test]
    fn ball_jump_radius_on_mixture() {
        let g = Arc::new(ParameterGrid::uniform(-11.0, 11.0, 2200).unwrap());
        let hi = credible_ball(&mixture(&g, 0.6), 0.5).unwrap();
        assert!(hi.radius >= 10.0, "radius {}", hi.radius);
        let lo = credible_ball(&mixture(&g, 0.4), 0.5).unwrap();
        assert!(lo.radius <= 0.1, "radius {}", lo.radius);
    }

    #[test]
    fn ball_mass_reaches_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid01(257);
        for _ in 0..10 {
            let mu = GridMeasure::Discrete(random_prior(&g, &mut rng));
            let ball = credible_ball(&mu, 0.2).unwrap();
            assert!(ball.field.credibility(&mu) >= 0.8 - 1e-12);
        }
    }

    #[test]
    fn hpd_linear_density() {
        let g = grid01(4000);
        let vals: Vec<f64> = g.points().iter().map(|t| 2.0 * t).collect();
        let f = DensityField::from_values_normalized(g.clone(), &vals).unwrap();
        let hpd = hpd_region(&f, 0.25).unwrap();
        assert!((hpd.level - 1.0).abs() < 2e-3, "level {}", hpd.level);
        let sup = support_of(&hpd.field, 0.0).unwrap();
        let left = g.point(sup[0]);
        assert!((left - 0.5).abs() <= g.max_cell());
        assert_eq!(*sup.last().unwrap(), g.len() - 1);
    }

    #[test]
    fn hpd_constant_density_includes_everything() {
        let g = grid01(64);
        let f = DensityField::new(g.clone(), vec![1.0; 64]).unwrap();
        let hpd = hpd_region(&f, 0.37).unwrap();
        assert!(hpd.field.psi().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hpd_sine_flip_supports() {
        let cells = 60;
        let g = Arc::new(ParameterGrid::uniform(0.0, 2.0 * std::f64::consts::PI, cells).unwrap());
        let c = 0.2;
        let h = g.max_cell();
        let pi = std::f64::consts::PI;
        for (sign, lo_t, hi_t) in [(1.0, 0.0, pi), (-1.0, pi, 2.0 * pi)] {
            let vals: Vec<f64> = g.points().iter().map(|t| 2.0 + sign * c * t.sin()).collect();
            let f = DensityField::from_values_normalized(g.clone(), &vals).unwrap();
            let hpd = hpd_region(&f, 0.5).unwrap();
            let sup = support_of(&hpd.field, 0.0).unwrap();
            let left = g.point(sup[0]);
            let right = g.point(*sup.last().unwrap());
            assert!((left - lo_t).abs() <= h + 1e-12, "left {left} vs {lo_t}");
            assert!((right - hi_t).abs() <= h + 1e-12, "right {right} vs {hi_t}");
        }
    }

    #[test]
    fn relaxed_ball_dirac() {
        let g = grid01(301);
        let d = GridMeasure::Discrete(DiscreteMeasure::dirac(g.clone(), 150).unwrap());
        for alpha in [0.1, 0.5, 0.9] {
            let r = relaxed_ball(&d, alpha, 4.0, 1e-10).unwrap();
            assert!((r.r_star - (1.0 - alpha)).abs() < 1e-9);
            assert!((r.field.value(150) - (1.0 - alpha)).abs() < 1e-9);
        }
    }

    #[test]
    fn relaxed_ball_flat_posterior_figure() {
        let (g, flat) = flat_pm1(800);
        let r = relaxed_ball(&flat, 0.5, 4.0, 1e-10).unwrap();
        assert!((r.r_star - 2.5).abs() < 1e-8, "r* {}", r.r_star);
        for (i, &t) in g.points().iter().enumerate() {
            let expect = (2.5 - 4.0 * t.abs()).clamp(0.0, 1.0);
            assert!((r.field.value(i) - expect).abs() < 1e-8);
        }
        // support = |theta| < 0.625
        let sup = support_of(&r.field, 0.0).unwrap();
        for &i in &sup {
            assert!(g.point(i).abs() < 0.625);
        }
        for i in 0..g.len() {
            if g.point(i).abs() < 0.625 - 1e-9 {
                assert!(sup.contains(&i));
            }
        }
    }

    #[test]
    fn relaxed_ball_exact_credibility_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = grid01(257);
        for _ in 0..20 {
            let mu = GridMeasure::Discrete(random_prior(&g, &mut rng));
            let r = relaxed_ball(&mu, 0.1, 6.0, 1e-10).unwrap();
            let cred = r.field.credibility(&mu);
            assert!((cred - 0.9).abs() < 1e-8, "credibility {cred}");
            assert!(r.field.lipschitz_quotient() <= 6.0 * (1.0 + 1e-6));
        }
    }

    #[test]
    fn relaxed_ball_nesting_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let g = grid01(129);
        for _ in 0..10 {
            let mu = GridMeasure::Discrete(random_prior(&g, &mut rng));
            let tight = relaxed_ball(&mu, 0.3, 5.0, 1e-10).unwrap();
            let loose = relaxed_ball(&mu, 0.1, 5.0, 1e-10).unwrap();
            for i in 0..g.len() {
                assert!(loose.field.value(i) >= tight.field.value(i) - 1e-9);
            }
        }
    }

    #[test]
    fn relaxed_hpd_linear_density_oracle() {
        // closed form for the density 2 theta, beta = 4, alpha = 1/4:
        // effective slope 2, level solving 12 d^2 - 6 d - 11 = 0
        let g = grid01(4096);
        let vals: Vec<f64> = g.points().iter().map(|t| 2.0 * t).collect();
        let f = DensityField::from_values_normalized(g.clone(), &vals).unwrap();
        let r = relaxed_hpd(&f, 0.25, 4.0, 1e-12).unwrap();
        let d_oracle = (6.0 + 564.0_f64.sqrt()) / 24.0;
        assert!((r.beta_hat - 2.0).abs() < 1e-6);
        assert!((r.d_star - d_oracle).abs() < 2e-3, "d* {} vs {}", r.d_star, d_oracle);
        // psi = 1 exactly where the density clears the level
        for (i, &t) in g.points().iter().enumerate() {
            if 2.0 * t >= r.d_star {
                assert_eq!(r.field.value(i), 1.0);
            }
        }
        let cred = r.field.credibility(&GridMeasure::Density(f));
        assert!((cred - 0.75).abs() < 1e-8);
    }

    #[test]
    fn relaxed_hpd_constant_density() {
        let g = grid01(100);
        let f = DensityField::new(g.clone(), vec![1.0; 100]).unwrap();
        let r = relaxed_hpd(&f, 0.25, 4.0, 1e-10).unwrap();
        for i in 0..100 {
            assert!((r.field.value(i) - 0.75).abs() < 1e-8);
        }
    }

    #[test]
    fn relaxed_hpd_exact_credibility_random_smooth() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let g = grid01(513);
        for _ in 0..20 {
            // smooth random density: positive trigonometric polynomial
            let (a, b, c) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let vals: Vec<f64> = g
                .points()
                .iter()
                .map(|t| 1.2 + a * (3.0 * t).sin() + b * (5.0 * t + c).cos() * 0.5)
                .map(|v| v.max(1e-3))
                .collect();
            let f = DensityField::from_values_normalized(g.clone(), &vals).unwrap();
            let beta = 3.0;
            let r = relaxed_hpd(&f, 0.2, beta, 1e-10).unwrap();
            let cred = r.field.credibility(&GridMeasure::Density(f));
            assert!((cred - 0.8).abs() < 1e-8, "credibility {cred}");
            assert!(r.field.lipschitz_quotient() <= beta * (1.0 + 1e-6));
        }
    }

    #[test]
    fn trivial_region_cases() {
        let g = grid01(16);
        let f = trivial_region(0.5, &g).unwrap();
        assert!(f.psi().iter().all(|&v| v == 0.5));
        let mu = GridMeasure::Discrete(DiscreteMeasure::uniform(g.clone()));
        assert!((f.credibility(&mu) - 0.5).abs() < 1e-12);
        assert!(trivial_region(1.2, &g).is_err());
    }

    #[test]
    fn support_of_cases() {
        let g = grid01(10);
        let zero = AcceptanceField::new(g.clone(), vec![0.0; 10], 0.5).unwrap();
        assert!(support_of(&zero, 0.0).unwrap().is_empty());
        let mut psi = vec![0.0; 10];
        psi[3] = 1.0;
        psi[4] = 1.0;
        let ind = AcceptanceField::new(g.clone(), psi, 0.5).unwrap();
        assert_eq!(support_of(&ind, 0.0).unwrap(), vec![3, 4]);
        assert!(support_of(&ind, -0.1).is_err());
    }

    #[test]
    fn averaged_field_collapses_when_band_degenerates() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let g = grid01(257);
        let mu = GridMeasure::Discrete(random_prior(&g, &mut rng));
        let alpha = 0.3;
        let delta = 0.1;
        let cfg = RegionConfig {
            beta: 5.0,
            delta,
            eta: 0.999999,
            gamma: 1e-12,
            n_z: 3,
            ..RegionConfig::new(RegionKind::PerturbedBall, alpha)
        };
        let avg = averaged_field(&mu, BaseKind::Ball, &cfg).unwrap();
        let base = relaxed_ball(&mu, alpha - delta, 5.0, 1e-10).unwrap();
        let sup_diff: f64 = avg
            .psi()
            .iter()
            .zip(base.field.psi())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(sup_diff < 1e-4, "sup diff {sup_diff}");
    }

    #[test]
    fn averaged_field_figure1_against_dense_quadrature() {
        let (g, flat) = flat_pm1(800);
        let cfg = RegionConfig {
            beta: 4.0,
            delta: 0.25,
            eta: 0.25,
            gamma: 1e-9,
            ..RegionConfig::new(RegionKind::PerturbedBall, 0.5)
        };
        let avg = averaged_field(&flat, BaseKind::Ball, &cfg).unwrap();

        // dense-quadrature oracle: closed-form level r*(z) = 2.5 + 4 z for a
        // flat posterior on [-1, 1], triangular level density on [1/16, 1/4]
        let a = cfg.delta * cfg.eta;
        let b = cfg.delta;
        let center = 0.5 * (a + b);
        let halfwidth = 0.5 * (b - a);
        let pdf = |z: f64| (1.0 - (z - center).abs() / halfwidth).max(0.0) / halfwidth;
        let n_dense = 40001;
        let hz = (b - a) / (n_dense - 1) as f64;
        for probe in [0usize, 100, 200, 300, 399, 400, 500, 700] {
            let t = g.point(probe);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for k in 0..n_dense {
                let z = a + k as f64 * hz;
                let w = if k == 0 || k == n_dense - 1 { 0.5 } else { 1.0 } * hz * pdf(z);
                acc += w * (2.5 + 4.0 * z - 4.0 * t.abs()).clamp(0.0, 1.0);
                wsum += w;
            }
            let oracle = acc / wsum;
            assert!(
                (avg.value(probe) - oracle).abs() < 1e-3,
                "theta {t}: {} vs {oracle}",
                avg.value(probe)
            );
        }

        // the averaged field dominates the alpha-level relaxed ball
        let base = relaxed_ball(&flat, 0.5, 4.0, 1e-10).unwrap();
        for i in 0..g.len() {
            assert!(avg.value(i) >= base.field.value(i) - 1e-9);
        }
    }

    #[test]
    fn correction_of_constant_one_field_is_alpha() {
        let g = grid01(50);
        let mu = GridMeasure::Discrete(DiscreteMeasure::uniform(g.clone()));
        let ones = AcceptanceField::new(g.clone(), vec![1.0; 50], 0.3).unwrap();
        let r = correction_r(&ones, &mu, 0.3, 1e-10).unwrap();
        assert!((r - 0.3).abs() < 1e-9, "R {r}");
    }

    #[test]
    fn correction_vanishes_at_exact_credibility() {
        let g = grid01(50);
        let mu = GridMeasure::Discrete(DiscreteMeasure::uniform(g.clone()));
        let field = trivial_region(0.4, &g).unwrap(); // credibility exactly 0.6
        let r = correction_r(&field, &mu, 0.4, 1e-10).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn correction_rejects_deficient_fields() {
        let g = grid01(50);
        let mu = GridMeasure::Discrete(DiscreteMeasure::uniform(g.clone()));
        let low = AcceptanceField::new(g.clone(), vec![0.2; 50], 0.3).unwrap();
        assert!(matches!(
            correction_r(&low, &mu, 0.3, 1e-10),
            Err(Error::CredibilityDeficit { .. })
        ));
    }

    #[test]
    fn perturbed_region_figure1_and_correction_oracle() {
        let (g, flat) = flat_pm1(800);
        let cfg = RegionConfig {
            beta: 4.0,
            delta: 0.25,
            eta: 0.25,
            gamma: 1e-9,
            ..RegionConfig::new(RegionKind::PerturbedBall, 0.5)
        };
        let parts = perturbed_region(&flat, &flat, BaseKind::Ball, &cfg).unwrap();
        // defining property, checked against an independently coded integral
        let dense: f64 = g
            .points()
            .iter()
            .enumerate()
            .map(|(i, _)| (parts.psi_tilde.value(i) - parts.correction).max(0.0) * 0.5)
            .sum::<f64>()
            * g.max_cell();
        assert!((dense - 0.5).abs() < 1e-8, "shifted credibility {dense}");
        assert!(parts.correction >= 0.0 && parts.correction <= 0.5);
        for i in 0..g.len() {
            assert!(parts.field.value(i) <= parts.psi_tilde.value(i) + 1e-15);
        }
        assert!(parts.field.lipschitz_quotient() <= 4.0 * (1.0 + 1e-6));
    }

    #[test]
    fn perturbed_region_identity_when_correction_zero() {
        // a field already at exact credibility: R = 0 and the field passes
        // through
        let g = grid01(64);
        let mu = GridMeasure::Discrete(DiscreteMeasure::uniform(g.clone()));
        let psi_tilde = trivial_region(0.25, &g).unwrap();
        let cfg = RegionConfig::new(RegionKind::PerturbedBall, 0.25);
        let parts = shift_by_correction(psi_tilde.clone(), &mu, &cfg).unwrap();
        assert_eq!(parts.correction, 0.0);
        assert_eq!(parts.field.psi(), psi_tilde.psi());
    }

    #[test]
    fn perturbed_region_constant_one_becomes_level() {
        let g = grid01(64);
        let mu = GridMeasure::Discrete(DiscreteMeasure::uniform(g.clone()));
        let ones = AcceptanceField::new(g.clone(), vec![1.0; 64], 0.3).unwrap();
        let cfg = RegionConfig::new(RegionKind::PerturbedBall, 0.3);
        let parts = shift_by_correction(ones, &mu, &cfg).unwrap();
        for i in 0..64 {
            assert!((parts.field.value(i) - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn perturbed_family_exact_credibility_trivial_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let g = grid01(257);
        let model = Arc::new(Model::bernoulli(g.clone()).unwrap());
        let cfg = RegionConfig { gamma: 1e-9, ..RegionConfig::new(RegionKind::PerturbedBall, 0.1) };
        let fam = RegionFamily::new(model.clone(), cfg, PerturbationSystem::trivial()).unwrap();
        for _ in 0..20 {
            let prior = random_prior(&g, &mut rng);
            for x in 0..2 {
                let parts = fam.perturbed_parts(&prior, x).unwrap();
                let post = GridMeasure::Discrete(posterior(&model, &prior, x).unwrap());
                let cred = parts.field.credibility(&post);
                assert!((cred - 0.9).abs() < 1e-6, "credibility {cred}");
                assert!(parts.psi_tilde.credibility(&post) > 0.9);
                assert!(parts.correction >= 0.0 && parts.correction <= 0.1 + 1e-12);
            }
        }
    }

    #[test]
    fn perturbed_family_exact_credibility_convolution_hpd() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let g = grid01(257);
        let model = Arc::new(Model::bernoulli(g.clone()).unwrap());
        let sys = PerturbationSystem::convolution(0.005).unwrap();
        let cfg = RegionConfig {
            beta: 1.0,
            delta: 0.05,
            eta: 0.5,
            gamma: sys.gamma,
            posterior_map_c: 2.0,
            ..RegionConfig::new(RegionKind::PerturbedHpd, 0.1)
        };
        let fam = RegionFamily::new(model.clone(), cfg, sys).unwrap();
        for _ in 0..3 {
            let prior = random_prior(&g, &mut rng);
            for x in 0..2 {
                let parts = fam.perturbed_parts(&prior, x).unwrap();
                let post = GridMeasure::Discrete(posterior(&model, &prior, x).unwrap());
                let cred = parts.field.credibility(&post);
                assert!((cred - 0.9).abs() < 1e-6, "credibility {cred}");
                assert!(parts.field.lipschitz_quotient() <= 1.0 * (1.0 + 1e-6));
            }
        }
    }

    #[test]
    fn hpd_density_floor_for_perturbed_fields() {
        // essinf of the density over the perturbed-HPD support stays above
        // the (alpha - eps)-HPD floor minus eps * Lip(rho)
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let g = grid01(1024);
        let alpha = 0.2;
        let eps = 0.1;
        let cfg = RegionConfig {
            beta: 1.0 / eps + 1.0,
            delta: 0.09,
            eta: 0.5,
            gamma: 1e-12,
            ..RegionConfig::new(RegionKind::PerturbedHpd, alpha)
        };
        for _ in 0..10 {
            let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
            let vals: Vec<f64> = g
                .points()
                .iter()
                .map(|t| 1.0 + 0.8 * a * (4.0 * t).sin() + 0.5 * b * (7.0 * t).cos())
                .map(|v| v.max(1e-3))
                .collect();
            let rho = DensityField::from_values_normalized(g.clone(), &vals).unwrap();
            let mu = GridMeasure::Density(rho.clone());
            let parts = perturbed_region(&mu, &mu, BaseKind::Hpd, &cfg).unwrap();
            let sup = support_of(&parts.field, 0.0).unwrap();
            let floor_tau = sup
                .iter()
                .map(|&i| rho.values()[i])
                .fold(f64::INFINITY, f64::min);
            let usual = hpd_region(&rho, alpha - eps).unwrap();
            let usual_sup = support_of(&usual.field, 0.0).unwrap();
            let floor_usual = usual_sup
                .iter()
                .map(|&i| rho.values()[i])
                .fold(f64::INFINITY, f64::min);
            let lip = crate::measure::lipschitz_quotient(rho.grid(), rho.values());
            let slack = 2.0 * lip * g.max_cell();
            assert!(
                floor_tau >= floor_usual - eps * lip - slack,
                "floor {floor_tau} vs {floor_usual} - {}",
                eps * lip
            );
        }
    }

    #[test]
    fn region_config_validation() {
        let mut cfg = RegionConfig::new(RegionKind::PerturbedBall, 0.1);
        cfg.gamma = 1.0; // F' goes negative
        assert!(matches!(cfg.validate(), Err(Error::ParameterViolation(_))));
        let ok = RegionConfig { gamma: 1e-9, ..RegionConfig::new(RegionKind::PerturbedBall, 0.1) };
        assert!(ok.validate().is_ok());
        let plain = RegionConfig { gamma: 1.0, ..RegionConfig::new(RegionKind::RelaxedBall, 0.1) };
        assert!(plain.validate().is_ok(), "F' check only gates perturbed kinds");
    }

    #[test]
    fn hpd_kind_requires_convolution_system() {
        let g = grid01(32);
        let model = Arc::new(Model::bernoulli(g).unwrap());
        let cfg = RegionConfig { gamma: 1e-9, ..RegionConfig::new(RegionKind::PerturbedHpd, 0.1) };
        assert!(matches!(
            RegionFamily::new(model, cfg, PerturbationSystem::trivial()),
            Err(Error::InvalidDensity(_))
        ));
    }
}
