//! Bayes updating on grids and the convolution system of prior perturbations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{
    same_grid, DensityField, DiscreteMeasure, GridMeasure, GridRef,
};
use crate::model::Model;

/// Marginal distribution of the data: `m(x) = sum_theta q(theta, x) nu(x) pi(theta)`.
pub fn marginal(model: &Model, prior: &DiscreteMeasure) -> Result<Vec<f64>> {
    if !same_grid(model.grid(), prior.grid()) {
        return Err(Error::GridMismatch);
    }
    let out = (0..model.n_x())
        .map(|x| {
            let nu = model.sample_space().nu(x);
            prior
                .mass()
                .iter()
                .enumerate()
                .map(|(i, &p)| model.q(i, x) * p)
                .sum::<f64>()
                * nu
        })
        .collect();
    Ok(out)
}

/// Posterior given `x`: masses proportional to `q(theta, x) pi(theta)`.
///
/// Refuses to produce a posterior when the marginal mass at `x` vanishes;
/// no arbitrary version is ever chosen.
pub fn posterior(model: &Model, prior: &DiscreteMeasure, x: usize) -> Result<DiscreteMeasure> {
    if !same_grid(model.grid(), prior.grid()) {
        return Err(Error::GridMismatch);
    }
    let weights: Vec<f64> = prior
        .mass()
        .iter()
        .enumerate()
        .map(|(i, &p)| model.q(i, x) * p)
        .collect();
    let norm: f64 = weights.iter().sum();
    if !(norm > 0.0) {
        return Err(Error::PosteriorUndefined { x });
    }
    DiscreteMeasure::new(
        prior.grid().clone(),
        weights.iter().map(|w| w / norm).collect(),
    )
}

/// Posterior density for an absolutely continuous prior, quadrature-normalized.
pub fn posterior_density(model: &Model, prior: &DensityField, x: usize) -> Result<DensityField> {
    if !same_grid(model.grid(), prior.grid()) {
        return Err(Error::GridMismatch);
    }
    let raw: Vec<f64> = prior
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * model.q(i, x))
        .collect();
    let z: f64 = raw
        .iter()
        .zip(prior.grid().cell_weights())
        .map(|(v, w)| v * w)
        .sum();
    if !(z > 0.0) {
        return Err(Error::PosteriorUndefined { x });
    }
    DensityField::from_values_normalized(prior.grid().clone(), &raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    /// Identity map: the perturbed prior is the prior itself.
    Trivial,
    /// Convolution with the scaled triangular kernel.
    Convolution,
}

/// A system of prior perturbations `pi -> pi_gamma`.
///
/// The convolution system uses the symmetric triangular kernel
/// `g(t) = 1 - |t|` on `[-1, 1]`: mean zero, unit mass, support in the unit
/// ball, Lipschitz with slope 1 and peak 1.
#[derive(Debug, Clone, Copy)]
pub struct PerturbationSystem {
    pub kind: PerturbationKind,
    pub gamma: f64,
}

impl PerturbationSystem {
    pub fn trivial() -> Self {
        Self { kind: PerturbationKind::Trivial, gamma: 0.0 }
    }

    pub fn convolution(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::ParameterViolation("gamma must be positive".into()));
        }
        Ok(Self { kind: PerturbationKind::Convolution, gamma })
    }

    /// Kernel `g(t) = 1 - |t|` on `[-1, 1]`.
    pub fn kernel(t: f64) -> f64 {
        (1.0 - t.abs()).max(0.0)
    }

    pub const KERNEL_LIP: f64 = 1.0;
    pub const KERNEL_SUP: f64 = 1.0;

    /// Non-expansiveness constant `D(gamma)` of the system.
    pub fn d_const(&self) -> f64 {
        1.0
    }

    /// Reported stability constant `D'(gamma) = gamma^{-1} max(Lip g, sup g)`.
    pub fn d_prime(&self) -> f64 {
        Self::KERNEL_LIP.max(Self::KERNEL_SUP) / self.gamma
    }

    /// Slope of the scaled kernel `gamma^{-1} g(./gamma)`; bounds the
    /// Lipschitz quotient of any perturbed-prior density.
    pub fn kernel_slope_bound(&self) -> f64 {
        Self::KERNEL_LIP / (self.gamma * self.gamma)
    }
}

/// Perturb a prior through the system. The trivial system passes the prior
/// through unchanged (no densification); the convolution system returns the
/// kernel-smoothed density on `target`, which must cover the
/// `gamma`-fattening of the prior's support.
pub fn perturb_prior(
    prior: &DiscreteMeasure,
    sys: &PerturbationSystem,
    target: &GridRef,
) -> Result<GridMeasure> {
    match sys.kind {
        PerturbationKind::Trivial => Ok(GridMeasure::Discrete(prior.clone())),
        PerturbationKind::Convolution => {
            let gamma = sys.gamma;
            let support = prior.support_indices();
            if support.is_empty() {
                return Err(Error::InvalidMeasure("prior has empty support".into()));
            }
            let lo_s = prior.grid().point(support[0]);
            let hi_s = prior.grid().point(*support.last().unwrap());
            let slack = 1e-12 * (1.0 + gamma);
            if target.lo() > lo_s - gamma + slack || target.hi() < hi_s + gamma - slack {
                return Err(Error::DomainError(format!(
                    "target [{}, {}] does not cover the gamma-fattening [{}, {}]",
                    target.lo(),
                    target.hi(),
                    lo_s - gamma,
                    hi_s + gamma
                )));
            }
            let src = prior.grid().points();
            let mass = prior.mass();
            let mut values = vec![0.0f64; target.len()];
            for (t_idx, &t) in target.points().iter().enumerate() {
                // only source atoms within the kernel window contribute
                let lo_idx = src.partition_point(|&p| p < t - gamma);
                let mut acc = 0.0;
                for j in lo_idx..src.len() {
                    if src[j] > t + gamma {
                        break;
                    }
                    if mass[j] > 0.0 {
                        acc += mass[j] * PerturbationSystem::kernel((t - src[j]) / gamma);
                    }
                }
                values[t_idx] = acc / gamma;
            }
            let field = DensityField::from_values_normalized(target.clone(), &values)?;
            Ok(GridMeasure::Density(field))
        }
    }
}

/// Empirical Lipschitz constant of the posterior map `pi -> P^x_pi` in W1,
/// over seeded random prior pairs. Used as the default for the config
/// constant `C` when none is supplied.
pub fn estimate_posterior_map_lipschitz(model: &Model, n_pairs: usize, seed: u64) -> Result<f64> {
    use crate::measure::w1_1d;
    use rand::prelude::*;
    let grid = model.grid().clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for _ in 0..n_pairs {
        let wa: Vec<f64> = (0..grid.len()).map(|_| rng.gen::<f64>() + 1e-6).collect();
        let wb: Vec<f64> = (0..grid.len()).map(|_| rng.gen::<f64>() + 1e-6).collect();
        let mu = DiscreteMeasure::from_weights(grid.clone(), &wa)?;
        let nu = DiscreteMeasure::from_weights(grid.clone(), &wb)?;
        let base = w1_1d(&mu, &nu)?;
        if base <= 0.0 {
            continue;
        }
        for x in 0..model.n_x() {
            let pa = match posterior(model, &mu, x) {
                Ok(p) => p,
                Err(Error::PosteriorUndefined { .. }) => continue,
                Err(e) => return Err(e),
            };
            let pb = match posterior(model, &nu, x) {
                Ok(p) => p,
                Err(Error::PosteriorUndefined { .. }) => continue,
                Err(e) => return Err(e),
            };
            best = best.max(w1_1d(&pa, &pb)? / base);
        }
    }
    Ok(best.max(1.0))
}
