//! JSON run configuration shared by the library and the batch front end.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::credible::{RegionConfig, RegionKind};
use crate::error::{Error, Result};
use crate::matching::{param_schedule, PlusConvention, SolverConfig, SolverInit};
use crate::measure::{DiscreteMeasure, GridRef, ParameterGrid};
use crate::model::{Model, SampleSpace};
use crate::posterior::{
    estimate_posterior_map_lipschitz, PerturbationKind, PerturbationSystem,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { lo: 0.0, hi: 1.0, n: 1024 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSpaceConfig {
    pub labels: Vec<String>,
    pub nu: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_model_name")]
    pub model: String,
    #[serde(default)]
    pub sample_space: Option<SampleSpaceConfig>,
    #[serde(default)]
    pub q: Option<Vec<Vec<f64>>>,
}

fn default_model_name() -> String {
    "bernoulli".into()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            model: default_model_name(),
            sample_space: None,
            q: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub kind: PerturbationKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    1e-4
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self { kind: PerturbationKind::Trivial, gamma: default_gamma() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionConfigIn {
    #[serde(default = "default_kind")]
    pub kind: RegionKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_n_z")]
    pub n_z: usize,
    #[serde(default = "default_bisect_tol")]
    pub bisect_tol: f64,
    #[serde(default)]
    pub posterior_map_c: Option<f64>,
}

fn default_kind() -> RegionKind {
    RegionKind::PerturbedBall
}

fn default_alpha() -> f64 {
    0.1
}

fn default_n_z() -> usize {
    33
}

fn default_bisect_tol() -> f64 {
    1e-10
}

impl Default for RegionConfigIn {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            alpha: default_alpha(),
            beta: None,
            delta: None,
            eta: None,
            gamma: None,
            n_z: default_n_z(),
            bisect_tol: default_bisect_tol(),
            posterior_map_c: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfigIn {
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_init")]
    pub init: String,
    #[serde(default = "default_convention")]
    pub plus_convention: PlusConvention,
    #[serde(default)]
    pub schedule_a: Option<f64>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub posterior_map_c: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_damping() -> f64 {
    0.5
}

fn default_max_iters() -> usize {
    5000
}

fn default_tol() -> f64 {
    crate::coverage::MATCHING_TOL
}

fn default_init() -> String {
    "uniform".into()
}

fn default_convention() -> PlusConvention {
    PlusConvention::Max
}

fn default_eps() -> f64 {
    0.03
}

fn default_restarts() -> usize {
    3
}

impl Default for SolverConfigIn {
    fn default() -> Self {
        Self {
            damping: default_damping(),
            max_iters: default_max_iters(),
            tol: default_tol(),
            init: default_init(),
            plus_convention: default_convention(),
            schedule_a: None,
            eps: default_eps(),
            posterior_map_c: None,
            seed: 0,
            restarts: default_restarts(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DemoConfig {
    #[serde(default)]
    pub c_min: Option<f64>,
    #[serde(default)]
    pub c_max: Option<f64>,
    #[serde(default)]
    pub c_step: Option<f64>,
    #[serde(default)]
    pub c: Option<f64>,
}

/// Top-level run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub region: RegionConfigIn,
    #[serde(default)]
    pub solver: SolverConfigIn,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    #[serde(default)]
    pub x: Option<usize>,
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default)]
    pub demo: DemoConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn build_grid(&self) -> Result<GridRef> {
        Ok(Arc::new(ParameterGrid::uniform(
            self.model.grid.lo,
            self.model.grid.hi,
            self.model.grid.n,
        )?))
    }

    pub fn build_model(&self) -> Result<Model> {
        let grid = self.build_grid()?;
        match self.model.model.as_str() {
            "bernoulli" => Model::bernoulli(grid),
            "table" => {
                let space = self
                    .model
                    .sample_space
                    .as_ref()
                    .ok_or_else(|| Error::Config("table model needs sample_space".into()))?;
                let q = self
                    .model
                    .q
                    .as_ref()
                    .ok_or_else(|| Error::Config("table model needs q".into()))?;
                let space = SampleSpace::new(space.labels.clone(), space.nu.clone())?;
                Model::from_table(grid, space, q.clone())
            }
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn build_perturbation(&self) -> Result<PerturbationSystem> {
        match self.perturbation.kind {
            PerturbationKind::Trivial => Ok(PerturbationSystem::trivial()),
            PerturbationKind::Convolution => {
                PerturbationSystem::convolution(self.perturbation.gamma)
            }
        }
    }

    /// Resolve the region parameters: explicit fields win, otherwise the
    /// schedule fills them in, otherwise defaults. The constant `C` falls
    /// back to the empirical posterior-map estimate.
    pub fn build_region_config(&self, model: &Model) -> Result<RegionConfig> {
        let alpha = self.region.alpha;
        let mut cfg = RegionConfig::new(self.region.kind, alpha);
        cfg.n_z = self.region.n_z;
        cfg.bisect_tol = self.region.bisect_tol;
        if let Some(a) = self.solver.schedule_a {
            let c = self.resolve_c(model)?;
            let s = param_schedule(a, alpha, self.solver.eps, c)?;
            cfg.beta = s.beta;
            cfg.delta = s.delta;
            cfg.eta = s.eta;
            cfg.gamma = s.gamma;
            cfg.posterior_map_c = c;
        } else {
            cfg.posterior_map_c = self.resolve_c(model)?;
        }
        if let Some(v) = self.region.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.region.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.region.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.region.gamma {
            cfg.gamma = v;
        } else if self.perturbation.kind == PerturbationKind::Convolution {
            cfg.gamma = self.perturbation.gamma;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_c(&self, model: &Model) -> Result<f64> {
        if let Some(c) = self.region.posterior_map_c.or(self.solver.posterior_map_c) {
            return Ok(c);
        }
        estimate_posterior_map_lipschitz(model, 8, self.solver.seed)
    }

    pub fn build_solver_config(&self, grid: &GridRef) -> Result<SolverConfig> {
        let init = match self.solver.init.as_str() {
            "uniform" => SolverInit::Uniform,
            other => {
                // "custom:<json array of weights>" keeps the config flat
                if let Some(body) = other.strip_prefix("custom:") {
                    let weights: Vec<f64> = serde_json::from_str(body)
                        .map_err(|e| Error::Config(format!("bad custom init: {e}")))?;
                    SolverInit::Custom(DiscreteMeasure::from_weights(grid.clone(), &weights)?)
                } else {
                    return Err(Error::Config(format!("unknown solver init {other:?}")));
                }
            }
        };
        Ok(SolverConfig {
            damping: self.solver.damping,
            max_iters: self.solver.max_iters,
            tol: self.solver.tol,
            init,
            plus_convention: self.solver.plus_convention,
            schedule_a: self.solver.schedule_a.unwrap_or(0.02),
            posterior_map_c: self.region.posterior_map_c.or(self.solver.posterior_map_c).unwrap_or(1.0),
            restarts: self.solver.restarts,
            seed: self.solver.seed,
            polish: true,
        })
    }
}
