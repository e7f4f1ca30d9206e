//! Grids over a compact interval, probability measures on them, and
//! Wasserstein-1 machinery.
//!
//! Two measure representations coexist: [`DiscreteMeasure`] (atoms on grid
//! points) and [`DensityField`] (density values against midpoint-cell
//! quadrature weights). Most region constructions accept either through
//! [`GridMeasure`].

use std::sync::Arc;

use crate::error::{Error, Result};

const MASS_TOL: f64 = 1e-12;
const QUAD_TOL: f64 = 1e-9;

/// Compensated (Kahan) sum, so that validation tolerances measure the data
/// and not the summation order.
pub(crate) fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// An ordered quadrature grid over a compact interval `[lo, hi]`.
///
/// `cell_weights` are Lebesgue cell lengths (midpoint rule); they must be
/// positive and sum to `hi - lo`. The metric is Euclidean distance on R.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGrid {
    points: Vec<f64>,
    cell_weights: Vec<f64>,
    lo: f64,
    hi: f64,
}

pub type GridRef = Arc<ParameterGrid>;

impl ParameterGrid {
    pub fn new(points: Vec<f64>, cell_weights: Vec<f64>, lo: f64, hi: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidGrid("grid has no points".into()));
        }
        if points.len() != cell_weights.len() {
            return Err(Error::InvalidGrid("points/cell_weights length mismatch".into()));
        }
        if !(lo < hi) {
            return Err(Error::InvalidGrid(format!("empty interval [{lo}, {hi}]")));
        }
        if points.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidGrid("points must be strictly increasing".into()));
        }
        if points[0] < lo || *points.last().unwrap() > hi {
            return Err(Error::InvalidGrid("points leave [lo, hi]".into()));
        }
        if cell_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidGrid("cell weights must be positive".into()));
        }
        let total = kahan_sum(cell_weights.iter().copied());
        if (total - (hi - lo)).abs() > MASS_TOL * (1.0 + hi - lo) {
            return Err(Error::InvalidGrid(format!(
                "cell weights sum to {total}, expected {}",
                hi - lo
            )));
        }
        Ok(Self { points, cell_weights, lo, hi })
    }

    /// Uniform midpoint grid: `n` cells of width `(hi-lo)/n`, one point at
    /// the center of each. Points stay strictly inside `(lo, hi)`.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGrid("n must be positive".into()));
        }
        let h = (hi - lo) / n as f64;
        let points = (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect();
        Self::new(points, vec![h; n], lo, hi)
    }

    /// Grid from explicit points with equal cell weights `(hi-lo)/n`.
    pub fn from_points(points: Vec<f64>, lo: f64, hi: f64) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::InvalidGrid("grid has no points".into()));
        }
        let w = (hi - lo) / n as f64;
        Self::new(points, vec![w; n], lo, hi)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn cell_weights(&self) -> &[f64] {
        &self.cell_weights
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn point(&self, i: usize) -> f64 {
        self.points[i]
    }

    /// Largest cell width; the "one grid cell" unit in grid-level assertions.
    pub fn max_cell(&self) -> f64 {
        self.cell_weights.iter().cloned().fold(0.0, f64::max)
    }

    /// Index of the grid point closest to `x`.
    pub fn nearest_index(&self, x: f64) -> usize {
        match self.points.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
            Ok(i) => i,
            Err(i) => {
                if i == 0 {
                    0
                } else if i == self.points.len() {
                    self.points.len() - 1
                } else if (x - self.points[i - 1]).abs() <= (self.points[i] - x).abs() {
                    i - 1
                } else {
                    i
                }
            }
        }
    }

    /// Index of the grid point exactly equal to `x`, if any.
    pub fn exact_index(&self, x: f64) -> Option<usize> {
        self.points
            .binary_search_by(|p| p.partial_cmp(&x).unwrap())
            .ok()
    }

    /// True when the grid is a uniform midpoint lattice (within fp dust).
    pub fn is_uniform(&self) -> bool {
        let h = self.cell_weights[0];
        self.cell_weights.iter().all(|&w| (w - h).abs() <= 1e-12 * h)
            && self
                .points
                .windows(2)
                .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h)
    }

    /// Extend a uniform grid by whole cells on both sides so that the new
    /// interval covers the `pad`-fattening of `[lo, hi]`. Returns the new grid
    /// and the index offset of the original points inside it. Original points
    /// are carried over bit-exactly.
    pub fn fattened(&self, pad: f64) -> Result<(Self, usize)> {
        if !(pad >= 0.0) {
            return Err(Error::DomainError("pad must be nonnegative".into()));
        }
        if !self.is_uniform() {
            return Err(Error::InvalidGrid("fattened() requires a uniform grid".into()));
        }
        let h = self.cell_weights[0];
        let k = (pad / h).ceil() as usize + 1;
        let n = self.len();
        let mut points = Vec::with_capacity(n + 2 * k);
        for i in 0..k {
            points.push(self.points[0] - (k - i) as f64 * h);
        }
        points.extend_from_slice(&self.points);
        for i in 1..=k {
            points.push(self.points[n - 1] + i as f64 * h);
        }
        let lo = self.lo - k as f64 * h;
        let hi = self.hi + k as f64 * h;
        let grid = Self::new(points, vec![h; n + 2 * k], lo, hi)?;
        Ok((grid, k))
    }
}

/// True when two measures may be compared index by index.
pub fn same_grid(a: &ParameterGrid, b: &ParameterGrid) -> bool {
    std::ptr::eq(a, b) || a.points == b.points
}

/// A probability measure supported on grid points.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    grid: GridRef,
    mass: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(grid: GridRef, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != grid.len() {
            return Err(Error::InvalidMeasure("mass length != grid size".into()));
        }
        let mut mass = mass;
        for m in mass.iter_mut() {
            if *m < 0.0 {
                if *m < -1e-15 {
                    return Err(Error::InvalidMeasure(format!("negative mass {m}")));
                }
                *m = 0.0;
            }
        }
        let total = kahan_sum(mass.iter().copied());
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!("masses sum to {total}")));
        }
        Ok(Self { grid, mass })
    }

    /// Normalize arbitrary nonnegative weights into a probability measure.
    pub fn from_weights(grid: GridRef, weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidMeasure("weights must be finite and nonnegative".into()));
        }
        let total = kahan_sum(weights.iter().copied());
        if !(total > 0.0) {
            return Err(Error::InvalidMeasure("weights sum to zero".into()));
        }
        let mass = weights.iter().map(|w| w / total).collect();
        Self::new(grid, mass)
    }

    /// Point mass at grid index `i`.
    pub fn dirac(grid: GridRef, i: usize) -> Result<Self> {
        if i >= grid.len() {
            return Err(Error::InvalidMeasure(format!("dirac index {i} out of range")));
        }
        let mut mass = vec![0.0; grid.len()];
        mass[i] = 1.0;
        Self::new(grid, mass)
    }

    /// Discretized Lebesgue measure: mass proportional to cell weights.
    pub fn uniform(grid: GridRef) -> Self {
        let w = grid.cell_weights().to_vec();
        Self::from_weights(grid, &w).expect("cell weights are positive")
    }

    pub fn grid(&self) -> &GridRef {
        &self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn mean(&self) -> f64 {
        self.grid
            .points()
            .iter()
            .zip(&self.mass)
            .map(|(t, m)| t * m)
            .sum()
    }

    pub fn support_indices(&self) -> Vec<usize> {
        (0..self.mass.len()).filter(|&i| self.mass[i] > 0.0).collect()
    }
}

/// An absolutely continuous measure: density values against the grid's
/// quadrature weights.
#[derive(Debug, Clone)]
pub struct DensityField {
    grid: GridRef,
    values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: GridRef, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidDensity("values length != grid size".into()));
        }
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidDensity("density values must be finite and nonnegative".into()));
        }
        let total = kahan_sum(values.iter().zip(grid.cell_weights()).map(|(v, w)| v * w));
        if (total - 1.0).abs() > QUAD_TOL {
            return Err(Error::InvalidDensity(format!(
                "quadrature integral is {total}, expected 1"
            )));
        }
        Ok(Self { grid, values })
    }

    /// Normalize arbitrary nonnegative values into a density field.
    pub fn from_values_normalized(grid: GridRef, values: &[f64]) -> Result<Self> {
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidDensity("density values must be finite and nonnegative".into()));
        }
        let total = kahan_sum(values.iter().zip(grid.cell_weights()).map(|(v, w)| v * w));
        if !(total > 0.0) {
            return Err(Error::InvalidDensity("density integrates to zero".into()));
        }
        let scaled: Vec<f64> = values.iter().map(|v| v / total).collect();
        Self::new(grid, scaled)
    }

    pub fn grid(&self) -> &GridRef {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Per-point quadrature masses `values[i] * cell_weights[i]`, renormalized
    /// into a `DiscreteMeasure`.
    pub fn to_discrete(&self) -> DiscreteMeasure {
        let w: Vec<f64> = self
            .values
            .iter()
            .zip(self.grid.cell_weights())
            .map(|(v, w)| v * w)
            .collect();
        DiscreteMeasure::from_weights(self.grid.clone(), &w).expect("valid density masses")
    }

    pub fn mean(&self) -> f64 {
        self.grid
            .points()
            .iter()
            .zip(self.values.iter().zip(self.grid.cell_weights()))
            .map(|(t, (v, w))| t * v * w)
            .sum()
    }
}

/// Either measure representation on a shared grid.
#[derive(Debug, Clone)]
pub enum GridMeasure {
    Discrete(DiscreteMeasure),
    Density(DensityField),
}

impl GridMeasure {
    pub fn grid(&self) -> &GridRef {
        match self {
            GridMeasure::Discrete(m) => m.grid(),
            GridMeasure::Density(f) => f.grid(),
        }
    }

    /// Per-grid-point masses (quadrature masses for densities).
    pub fn point_masses(&self) -> Vec<f64> {
        match self {
            GridMeasure::Discrete(m) => m.mass().to_vec(),
            GridMeasure::Density(f) => f
                .values()
                .iter()
                .zip(f.grid().cell_weights())
                .map(|(v, w)| v * w)
                .collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            GridMeasure::Discrete(m) => m.mean(),
            GridMeasure::Density(f) => f.mean(),
        }
    }

    /// Integral of a per-point field against this measure.
    pub fn integrate(&self, field: &[f64]) -> f64 {
        debug_assert_eq!(field.len(), self.grid().len());
        match self {
            GridMeasure::Discrete(m) => field.iter().zip(m.mass()).map(|(f, m)| f * m).sum(),
            GridMeasure::Density(d) => field
                .iter()
                .zip(d.values().iter().zip(d.grid().cell_weights()))
                .map(|(f, (v, w))| f * v * w)
                .sum(),
        }
    }

    pub fn atoms(&self) -> Vec<(f64, f64)> {
        self.grid()
            .points()
            .iter()
            .copied()
            .zip(self.point_masses())
            .collect()
    }
}

/// Mean of a measure (`M(mu)`).
pub fn mean_of(mu: &GridMeasure) -> f64 {
    mu.mean()
}

/// Wasserstein-1 distance between two discrete measures on the same grid,
/// via the CDF formula `∫ |F_a - F_b|`.
pub fn w1_1d(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
    if !same_grid(a.grid(), b.grid()) {
        return Err(Error::GridMismatch);
    }
    let pts = a.grid().points();
    let mut cum = 0.0;
    let mut dist = 0.0;
    for i in 0..pts.len() - 1 {
        cum += a.mass()[i] - b.mass()[i];
        dist += cum.abs() * (pts[i + 1] - pts[i]);
    }
    Ok(dist)
}

/// CDF-based W1 for arbitrary atom lists on the line. Total masses must agree.
pub fn w1_atoms(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut events: Vec<(f64, f64)> = Vec::with_capacity(a.len() + b.len());
    events.extend(a.iter().map(|&(x, m)| (x, m)));
    events.extend(b.iter().map(|&(x, m)| (x, -m)));
    events.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    let mut cum = 0.0;
    let mut dist = 0.0;
    let mut i = 0;
    while i < events.len() {
        let x = events[i].0;
        while i < events.len() && events[i].0 == x {
            cum += events[i].1;
            i += 1;
        }
        if i < events.len() {
            dist += cum.abs() * (events[i].0 - x);
        }
    }
    dist
}

/// Total-variation distance between discrete measures on the same grid.
pub fn tv_distance(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
    if !same_grid(a.grid(), b.grid()) {
        return Err(Error::GridMismatch);
    }
    Ok(a.mass()
        .iter()
        .zip(b.mass())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / 2.0)
}

const FLOW_MAX_ATOMS: usize = 4096;

/// Exact optimal-transport cost between two balanced atom lists, solved as a
/// min-cost flow by successive shortest paths with potentials.
///
/// Independent of [`w1_1d`]: it never looks at CDFs, only at pairwise
/// distances, so the two routes cross-check each other.
pub fn w1_flow(a_atoms: &[(f64, f64)], b_atoms: &[(f64, f64)]) -> Result<f64> {
    let cost = |i: usize, j: usize| (a_atoms[i].0 - b_atoms[j].0).abs();
    w1_flow_with_cost(
        &a_atoms.iter().map(|&(_, m)| m).collect::<Vec<_>>(),
        &b_atoms.iter().map(|&(_, m)| m).collect::<Vec<_>>(),
        cost,
    )
}

struct FlowArc {
    to: usize,
    cap: f64,
    cost: f64,
    rev: usize,
}

struct FlowGraph {
    adj: Vec<Vec<FlowArc>>,
}

impl FlowGraph {
    fn new(n: usize) -> Self {
        Self { adj: (0..n).map(|_| Vec::new()).collect() }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: f64, cost: f64) {
        let rev_from = self.adj[to].len();
        let rev_to = self.adj[from].len();
        self.adj[from].push(FlowArc { to, cap, cost, rev: rev_from });
        self.adj[to].push(FlowArc { to: from, cap: 0.0, cost: -cost, rev: rev_to });
    }
}

/// Min-cost transport for explicit supplies/demands under an arbitrary
/// nonnegative cost function, by successive shortest augmenting paths with
/// Johnson potentials.
pub fn w1_flow_with_cost(
    supply: &[f64],
    demand: &[f64],
    cost: impl Fn(usize, usize) -> f64,
) -> Result<f64> {
    let n = supply.len();
    let m = demand.len();
    if n == 0 || m == 0 {
        return Err(Error::DomainError("transport inputs must be nonempty".into()));
    }
    if n > FLOW_MAX_ATOMS || m > FLOW_MAX_ATOMS {
        return Err(Error::DomainError(format!(
            "atom count exceeds {FLOW_MAX_ATOMS}"
        )));
    }
    let total_a = kahan_sum(supply.iter().copied());
    let total_b = kahan_sum(demand.iter().copied());
    if (total_a - total_b).abs() > MASS_TOL * (1.0 + total_a.abs().max(total_b.abs())) {
        return Err(Error::UnbalancedTransport { total_a, total_b });
    }

    // Nodes: 0..n sources, n..n+m sinks, then super-source and super-sink.
    let s = n + m;
    let t = n + m + 1;
    let v_count = n + m + 2;
    let mut g = FlowGraph::new(v_count);
    for (i, &a) in supply.iter().enumerate() {
        g.add_edge(s, i, a, 0.0);
    }
    for (j, &b) in demand.iter().enumerate() {
        g.add_edge(n + j, t, b, 0.0);
    }
    for i in 0..n {
        for j in 0..m {
            g.add_edge(i, n + j, f64::INFINITY, cost(i, j));
        }
    }

    let eps = 1e-15 * total_a.max(1.0);
    let mut phi = vec![0.0f64; v_count];
    let mut total_cost = 0.0;
    // Every augmentation zeroes at least one residual along its path. Paths
    // may bottleneck on interior backward arcs, so the count is not bounded
    // by n + m; cap generously and fail loudly rather than return a wrong
    // cost.
    let max_rounds = 1000 + 50 * (n + m);
    let mut round = 0;
    loop {
        round += 1;
        if round > max_rounds {
            return Err(Error::DomainError(
                "transport solver exceeded its augmentation budget".into(),
            ));
        }
        // Dense Dijkstra with reduced costs.
        let inf = f64::INFINITY;
        let mut dist = vec![inf; v_count];
        let mut done = vec![false; v_count];
        let mut prev: Vec<(usize, usize)> = vec![(usize::MAX, usize::MAX); v_count];
        dist[s] = 0.0;
        loop {
            let mut u = usize::MAX;
            let mut best = inf;
            for v in 0..v_count {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            for (k, arc) in g.adj[u].iter().enumerate() {
                if arc.cap <= eps {
                    continue;
                }
                let rc = (arc.cost + phi[u] - phi[arc.to]).max(0.0);
                let nd = dist[u] + rc;
                if nd < dist[arc.to] {
                    dist[arc.to] = nd;
                    prev[arc.to] = (u, k);
                }
            }
        }
        if !dist[t].is_finite() {
            break; // all demand met (up to dust)
        }
        for v in 0..v_count {
            if dist[v].is_finite() {
                phi[v] += dist[v];
            }
        }
        // Bottleneck along s -> t path.
        let mut push = f64::INFINITY;
        let mut v = t;
        while v != s {
            let (u, k) = prev[v];
            push = push.min(g.adj[u][k].cap);
            v = u;
        }
        if !(push > eps) {
            break;
        }
        let mut v = t;
        while v != s {
            let (u, k) = prev[v];
            let rev = g.adj[u][k].rev;
            g.adj[u][k].cap -= push;
            g.adj[v][rev].cap += push;
            total_cost += push * g.adj[u][k].cost;
            v = u;
        }
    }
    Ok(total_cost)
}

/// Indices within distance `< eps` of the subset, plus the subset itself.
pub fn fatten_indices(grid: &ParameterGrid, subset: &[usize], eps: f64) -> Result<Vec<usize>> {
    if !(eps >= 0.0) {
        return Err(Error::DomainError("eps must be nonnegative".into()));
    }
    if subset.is_empty() {
        return Ok(Vec::new());
    }
    let mut sub_pts: Vec<f64> = subset.iter().map(|&i| grid.point(i)).collect();
    sub_pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut in_set = vec![false; grid.len()];
    for &i in subset {
        in_set[i] = true;
    }
    for (j, &t) in grid.points().iter().enumerate() {
        if in_set[j] {
            continue;
        }
        let k = sub_pts.partition_point(|&p| p < t);
        let mut d = f64::INFINITY;
        if k < sub_pts.len() {
            d = d.min(sub_pts[k] - t);
        }
        if k > 0 {
            d = d.min(t - sub_pts[k - 1]);
        }
        if d < eps {
            in_set[j] = true;
        }
    }
    Ok((0..grid.len()).filter(|&j| in_set[j]).collect())
}

/// Discrete Lipschitz quotient: max slope between adjacent grid points.
pub fn lipschitz_quotient(grid: &ParameterGrid, values: &[f64]) -> f64 {
    debug_assert_eq!(values.len(), grid.len());
    let pts = grid.points();
    let mut best: f64 = 0.0;
    for i in 0..values.len().saturating_sub(1) {
        let q = (values[i + 1] - values[i]).abs() / (pts[i + 1] - pts[i]);
        best = best.max(q);
    }
    best
}
