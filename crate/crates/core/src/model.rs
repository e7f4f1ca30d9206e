//! Dominated statistical models on finite sample spaces.
//!
//! A [`Model`] stores the conditional density table `q[theta][x]` against a
//! finite dominating measure. The Bernoulli model is built in; arbitrary
//! tables can be ingested, and a model with strictly positive densities can
//! be extended to a larger grid through a normalized Lipschitz extension.

use crate::error::{Error, Result};
use crate::measure::{kahan_sum, lipschitz_quotient, GridRef, ParameterGrid};

const ROW_TOL: f64 = 1e-9;
const TABLE_TOL: f64 = 1e-6;

/// A finite sample space with dominating-measure weights.
#[derive(Debug, Clone)]
pub struct SampleSpace {
    labels: Vec<String>,
    nu_weights: Vec<f64>,
}

impl SampleSpace {
    pub fn new(labels: Vec<String>, nu_weights: Vec<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::DomainError("sample space is empty".into()));
        }
        if labels.len() != nu_weights.len() {
            return Err(Error::DomainError("labels/nu length mismatch".into()));
        }
        if nu_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::DomainError("nu weights must be positive".into()));
        }
        let mut sorted = labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != labels.len() {
            return Err(Error::DomainError("sample points must be distinct".into()));
        }
        Ok(Self { labels, nu_weights })
    }

    /// Counting measure on the given labels.
    pub fn counting(labels: Vec<String>) -> Result<Self> {
        let n = labels.len();
        Self::new(labels, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn nu(&self, j: usize) -> f64 {
        self.nu_weights[j]
    }

    pub fn nu_weights(&self) -> &[f64] {
        &self.nu_weights
    }
}

/// A dominated model: density table `q[i][j] = q(theta_i, x_j)` with every
/// row integrating to one under the dominating measure.
#[derive(Debug, Clone)]
pub struct Model {
    grid: GridRef,
    sample_space: SampleSpace,
    q: Vec<Vec<f64>>,
}

impl Model {
    /// Build a model, requiring each row to integrate to 1 within `1e-9`.
    pub fn new(grid: GridRef, sample_space: SampleSpace, q: Vec<Vec<f64>>) -> Result<Self> {
        Self::validate_shape(&grid, &sample_space, &q)?;
        for (i, row) in q.iter().enumerate() {
            let total = row_integral(row, &sample_space);
            if (total - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidDensity(format!(
                    "row {i} integrates to {total}"
                )));
            }
        }
        Ok(Self { grid, sample_space, q })
    }

    /// Ingest an externally supplied table. Rows within `1e-6` of 1 are
    /// renormalized; anything further off is rejected.
    pub fn from_table(grid: GridRef, sample_space: SampleSpace, q: Vec<Vec<f64>>) -> Result<Self> {
        Self::validate_shape(&grid, &sample_space, &q)?;
        let mut q = q;
        for (i, row) in q.iter_mut().enumerate() {
            let total = row_integral(row, &sample_space);
            if (total - 1.0).abs() > TABLE_TOL {
                return Err(Error::InvalidDensity(format!(
                    "row {i} integrates to {total}, outside the 1e-6 ingestion tolerance"
                )));
            }
            if total != 1.0 {
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        Self::new(grid, sample_space, q)
    }

    /// The Bernoulli model on a grid contained in `[0, 1]`:
    /// `q(theta, 1) = theta`, `q(theta, 0) = 1 - theta`, counting measure.
    pub fn bernoulli(grid: GridRef) -> Result<Self> {
        if grid.points()[0] < 0.0 || *grid.points().last().unwrap() > 1.0 {
            return Err(Error::DomainError(
                "Bernoulli model needs a grid inside [0, 1]".into(),
            ));
        }
        let space = SampleSpace::counting(vec!["0".into(), "1".into()])?;
        let q = grid
            .points()
            .iter()
            .map(|&t| vec![1.0 - t, t])
            .collect();
        Self::new(grid, space, q)
    }

    fn validate_shape(grid: &ParameterGrid, space: &SampleSpace, q: &[Vec<f64>]) -> Result<()> {
        if q.len() != grid.len() {
            return Err(Error::InvalidDensity("table rows != grid size".into()));
        }
        for row in q {
            if row.len() != space.len() {
                return Err(Error::InvalidDensity("table cols != sample space size".into()));
            }
            if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidDensity("densities must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> &GridRef {
        &self.grid
    }

    pub fn sample_space(&self) -> &SampleSpace {
        &self.sample_space
    }

    pub fn n_x(&self) -> usize {
        self.sample_space.len()
    }

    pub fn q(&self, theta_index: usize, x_index: usize) -> f64 {
        self.q[theta_index][x_index]
    }

    pub fn row(&self, theta_index: usize) -> &[f64] {
        &self.q[theta_index]
    }

    /// Density slice `theta -> q(theta, x)` for a fixed sample point.
    pub fn slice(&self, x_index: usize) -> Vec<f64> {
        self.q.iter().map(|row| row[x_index]).collect()
    }

    /// Reported Lipschitz constant of the model: the worst discrete slope of
    /// any slice `theta -> q(theta, x)`.
    pub fn lipschitz_constant(&self) -> f64 {
        (0..self.n_x())
            .map(|x| lipschitz_quotient(&self.grid, &self.slice(x)))
            .fold(0.0, f64::max)
    }

    /// Extend to a larger grid containing this model's points: each slice is
    /// extended by the inf-formula Lipschitz extension and the rows are
    /// renormalized by `Z(theta)`. On shared points the table is carried over
    /// verbatim.
    pub fn supermodel_extend(&self, target: &GridRef) -> Result<Model> {
        if self.q.iter().any(|row| row.iter().any(|&v| v <= 0.0)) {
            return Err(Error::UnboundedLogDensity);
        }
        let index_map = embed_indices(&self.grid, target)?;
        let m = self.lipschitz_constant();
        let slices: Vec<Vec<f64>> = (0..self.n_x())
            .map(|x| mcshane_extend(self.grid.points(), &self.slice(x), m, target))
            .collect::<Result<_>>()?;

        let mut in_base = vec![usize::MAX; target.len()];
        for (i, &j) in index_map.iter().enumerate() {
            in_base[j] = i;
        }
        let mut q = Vec::with_capacity(target.len());
        for j in 0..target.len() {
            if in_base[j] != usize::MAX {
                q.push(self.q[in_base[j]].clone());
                continue;
            }
            let raw: Vec<f64> = (0..self.n_x()).map(|x| slices[x][j]).collect();
            let z = row_integral(&raw, &self.sample_space);
            q.push(raw.iter().map(|v| v / z).collect());
        }
        Model::new(target.clone(), self.sample_space.clone(), q)
    }
}

fn row_integral(row: &[f64], space: &SampleSpace) -> f64 {
    kahan_sum(row.iter().zip(space.nu_weights()).map(|(q, nu)| q * nu))
}

/// Indices of `base` points inside `target` (exact value match required).
pub fn embed_indices(base: &ParameterGrid, target: &ParameterGrid) -> Result<Vec<usize>> {
    base.points()
        .iter()
        .map(|&p| {
            target
                .exact_index(p)
                .ok_or_else(|| Error::DomainError(format!("target grid misses base point {p}")))
        })
        .collect()
}

/// McShane's Lipschitz extension: `f_hat(x) = min over e of f(e) + M d(x, e)`.
///
/// Agrees with `f` on base points present in the target (verbatim), is
/// `M`-Lipschitz, and attains the same minimum as `f` on the base.
pub fn mcshane_extend(
    base_points: &[f64],
    values: &[f64],
    m: f64,
    target: &ParameterGrid,
) -> Result<Vec<f64>> {
    if base_points.is_empty() {
        return Err(Error::EmptyExtensionBase);
    }
    if base_points.len() != values.len() {
        return Err(Error::DomainError("base points/values length mismatch".into()));
    }
    if !(m >= 0.0) || !m.is_finite() {
        return Err(Error::ParameterViolation("extension slope M must be finite and nonnegative".into()));
    }
    for i in 0..base_points.len() {
        for k in 0..i {
            let d = (base_points[i] - base_points[k]).abs();
            if (values[i] - values[k]).abs() > m * d * (1.0 + 1e-12) {
                return Err(Error::ParameterViolation(format!(
                    "f is not {m}-Lipschitz on the base (pair {k}, {i})"
                )));
            }
        }
    }
    let out = target
        .points()
        .iter()
        .map(|&x| {
            // exact base hit: carry the value over bit-for-bit
            if let Some(k) = base_points
                .iter()
                .position(|&e| e == x)
            {
                return values[k];
            }
            base_points
                .iter()
                .zip(values)
                .map(|(&e, &f)| f + m * (x - e).abs())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(out)
}
