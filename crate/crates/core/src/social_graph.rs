//! The social-influence graph `A`: a positive row-stochastic matrix mapping
//! private utilities `u` to public (influenced) utilities `v = A u`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result, SboError};

pub const DEFAULT_DELTA_A: f64 = 0.01;
const ROW_SUM_TOL: f64 = 1e-9;

/// Hyperparameters of the regularised row-wise Dirichlet prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphPrior {
    /// Entry floor `δ_A`.
    pub delta_a: f64,
    /// Tikhonov weight `ξ` on `‖A‖²_F`.
    pub xi: f64,
    /// Dirichlet concentration per row.
    pub kappa: Vec<f64>,
}

impl GraphPrior {
    /// `ξ = 1/(4n²)` (inside the `ξ < 1/(2n²)` regime) and
    /// `κ_i = 1 + δ²/n² − 2ξδ²`.
    pub fn default_for(n: usize) -> Self {
        Self::with_floor(n, DEFAULT_DELTA_A)
    }

    pub fn with_floor(n: usize, delta_a: f64) -> Self {
        let nf = n as f64;
        let xi = 1.0 / (4.0 * nf * nf);
        let kappa = 1.0 + delta_a * delta_a / (nf * nf) - 2.0 * xi * delta_a * delta_a;
        Self {
            delta_a,
            xi,
            kappa: vec![kappa; n],
        }
    }

    pub fn flat(n: usize) -> Self {
        Self {
            delta_a: DEFAULT_DELTA_A,
            xi: 0.0,
            kappa: vec![1.0; n],
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.delta_a > 0.0 && self.delta_a * n as f64 <= 1.0) {
            return arg(format!("entry floor {} infeasible for n = {n}", self.delta_a));
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return arg("xi must be a nonnegative finite number");
        }
        if self.kappa.len() != n || self.kappa.iter().any(|k| !(*k >= 1.0)) {
            return arg("kappa needs one value >= 1 per row");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocialGraph {
    matrix: DMatrix<f64>,
    prior: GraphPrior,
}

/// Outcome of [`validate`]; never fails, only reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphReport {
    pub n: usize,
    pub floor_ok: bool,
    pub rows_ok: bool,
    pub condition_number: f64,
    pub invertible: bool,
    /// `‖A⁻¹‖₂` when invertible.
    pub inverse_norm: Option<f64>,
    /// Whether `1 ≤ ‖A⁻¹‖₂ ≤ n` holds.
    pub inverse_norm_within_bounds: Option<bool>,
}

impl GraphReport {
    pub fn valid(&self) -> bool {
        self.floor_ok && self.rows_ok
    }
}

pub const MAX_CONDITION: f64 = 1e12;

/// Projects each row onto `{a : a_j ≥ δ, Σ a_j = 1}` by clipping small entries
/// to the floor and rescaling the rest.
pub fn floor_rows(matrix: &DMatrix<f64>, delta_a: f64) -> DMatrix<f64> {
    let n = matrix.ncols();
    let mut out = matrix.clone();
    for i in 0..matrix.nrows() {
        let mut clipped = vec![false; n];
        loop {
            let free_mass: f64 = (0..n).filter(|&j| !clipped[j]).map(|j| out[(i, j)].max(0.0)).sum();
            let budget = 1.0 - delta_a * clipped.iter().filter(|c| **c).count() as f64;
            let mut changed = false;
            for j in 0..n {
                if clipped[j] {
                    out[(i, j)] = delta_a;
                } else if free_mass > 0.0 {
                    out[(i, j)] = out[(i, j)].max(0.0) * budget / free_mass;
                } else {
                    let free = clipped.iter().filter(|c| !**c).count() as f64;
                    out[(i, j)] = budget / free;
                }
            }
            for j in 0..n {
                if !clipped[j] && out[(i, j)] < delta_a {
                    clipped[j] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }
    out
}

impl SocialGraph {
    /// Validates the floor and row sums.
    pub fn new(matrix: DMatrix<f64>, prior: GraphPrior) -> Result<Self> {
        let n = matrix.nrows();
        if n == 0 || matrix.ncols() != n {
            return arg(format!("graph must be square and nonempty, got {}x{}", n, matrix.ncols()));
        }
        prior.validate(n)?;
        let g = Self { matrix, prior };
        let report = g.report();
        if !report.rows_ok {
            return arg("graph rows must sum to 1");
        }
        if !report.floor_ok {
            return arg(format!("graph entries must be at least {}", g.prior.delta_a));
        }
        Ok(g)
    }

    /// Floors then renormalises `matrix` before validating.
    pub fn floored(matrix: DMatrix<f64>, prior: GraphPrior) -> Result<Self> {
        let delta = prior.delta_a;
        Self::new(floor_rows(&matrix, delta), prior)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return arg("graph rows must all have length n");
        }
        let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        Self::new(m, GraphPrior::default_for(n))
    }

    /// Row-uniform graph, the prior mode.
    pub fn uniform(n: usize, prior: GraphPrior) -> Self {
        Self {
            matrix: DMatrix::from_element(n, n, 1.0 / n as f64),
            prior,
        }
    }

    /// Skips validation; used for solver iterates that respect the constraints
    /// up to tolerance.
    pub(crate) fn from_parts_unchecked(matrix: DMatrix<f64>, prior: GraphPrior) -> Self {
        Self { matrix, prior }
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn prior(&self) -> &GraphPrior {
        &self.prior
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n())
            .map(|i| self.matrix.row(i).iter().cloned().collect())
            .collect()
    }

    fn report(&self) -> GraphReport {
        validate(self)
    }
}

/// `v = A u`.
pub fn convolve(g: &SocialGraph, u: &[f64]) -> Result<Vec<f64>> {
    if !g.report().valid() {
        return Err(SboError::State("convolution with an invalid graph".into()));
    }
    if u.len() != g.n() {
        return arg(format!("utility vector has {} entries, graph has {}", u.len(), g.n()));
    }
    let v = g.matrix() * DVector::from_column_slice(u);
    Ok(v.iter().cloned().collect())
}

/// Unnormalised log prior `−ξ‖A‖²_F + Σ_ij (κ_i − 1) log A_ij`.
pub fn log_prior(g: &SocialGraph) -> Result<f64> {
    let a = g.matrix();
    if a.iter().any(|v| *v <= 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    let report = g.report();
    if !report.rows_ok {
        return arg("log prior of a graph whose rows do not sum to 1");
    }
    if !report.floor_ok {
        return arg(format!("graph entry below the floor {}", g.prior().delta_a));
    }
    Ok(log_prior_unchecked(a, g.prior()))
}

pub(crate) fn log_prior_unchecked(a: &DMatrix<f64>, prior: &GraphPrior) -> f64 {
    let mut total = -prior.xi * a.norm_squared();
    for i in 0..a.nrows() {
        let k1 = prior.kappa[i] - 1.0;
        if k1 != 0.0 {
            total += k1 * a.row(i).iter().map(|v| v.ln()).sum::<f64>();
        }
    }
    total
}

pub fn validate(g: &SocialGraph) -> GraphReport {
    let a = g.matrix();
    let n = a.nrows();
    let floor_ok = a.iter().all(|v| *v >= g.prior().delta_a - 1e-12);
    let rows_ok = (0..n).all(|i| (a.row(i).sum() - 1.0).abs() <= ROW_SUM_TOL);
    let sv = a.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let invertible = condition_number < MAX_CONDITION;
    let inverse_norm = invertible.then(|| 1.0 / smin);
    let inverse_norm_within_bounds =
        inverse_norm.map(|v| v >= 1.0 - 1e-9 && v <= n as f64 + 1e-9);
    GraphReport {
        n,
        floor_ok,
        rows_ok,
        condition_number,
        invertible,
        inverse_norm,
        inverse_norm_within_bounds,
    }
}

/// Row-wise Dirichlet(κ_i) draw, floored and renormalised.
pub fn sample_prior(n: usize, seed: u64) -> Result<SocialGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_prior_with(n, GraphPrior::default_for(n), &mut rng)
}

pub fn sample_prior_with<R: rand::Rng + ?Sized>(
    n: usize,
    prior: GraphPrior,
    rng: &mut R,
) -> Result<SocialGraph> {
    if n == 0 {
        return arg("graph needs at least one agent");
    }
    prior.validate(n)?;
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let gamma = Gamma::new(prior.kappa[i], 1.0)
            .map_err(|e| SboError::Argument(format!("bad concentration: {e}")))?;
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        for j in 0..n {
            m[(i, j)] = if total > 0.0 { draws[j] / total } else { 1.0 / n as f64 };
        }
    }
    SocialGraph::floored(m, prior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::Rng;

    fn truth() -> SocialGraph {
        SocialGraph::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4]]).unwrap()
    }

    #[test]
    fn convolve_examples() {
        let near_id = SocialGraph::floored(DMatrix::identity(2, 2), GraphPrior::default_for(2)).unwrap();
        let u = [0.7, -0.2];
        let v = convolve(&near_id, &u).unwrap();
        let span = 0.9;
        for (a, b) in v.iter().zip(&u) {
            assert!((a - b).abs() <= DEFAULT_DELTA_A * span + 1e-12);
        }
        assert_eq!(convolve(&truth(), &[1.0, 0.0]).unwrap(), vec![0.9, 0.6]);
        let c = convolve(&truth(), &[0.25, 0.25]).unwrap();
        assert_eq!(c, vec![0.25, 0.25]);
        assert!(convolve(&truth(), &[1.0]).is_err());
    }

    #[test]
    fn invalid_graph_is_a_state_error() {
        let bad = SocialGraph::from_parts_unchecked(dmatrix![0.5, 0.6; 0.5, 0.5], GraphPrior::default_for(2));
        assert!(matches!(convolve(&bad, &[1.0, 0.0]), Err(SboError::State(_))));
    }

    #[test]
    fn floor_projection_respects_floor() {
        let g = SocialGraph::floored(DMatrix::identity(3, 3), GraphPrior::default_for(3)).unwrap();
        for v in g.matrix().iter() {
            assert!(*v >= DEFAULT_DELTA_A - 1e-15);
        }
        assert!((g.matrix()[(0, 0)] - 0.98).abs() < 1e-12);
    }

    #[test]
    fn log_prior_examples() {
        let n = 3;
        let eps = 0.1;
        let prior = GraphPrior {
            delta_a: DEFAULT_DELTA_A,
            xi: 0.0,
            kappa: vec![1.0 + eps; n],
        };
        let g = SocialGraph::uniform(n, prior);
        let want = (n * n) as f64 * eps * (1.0 / n as f64).ln();
        assert!((log_prior(&g).unwrap() - want).abs() < 1e-12);

        let g = SocialGraph::new(truth().matrix().clone(), GraphPrior::flat(2)).unwrap();
        assert_eq!(log_prior(&g).unwrap(), 0.0);

        let below = SocialGraph::from_parts_unchecked(dmatrix![0.995, 0.005; 0.5, 0.5], GraphPrior::default_for(2));
        assert!(matches!(log_prior(&below), Err(SboError::Argument(_))));
        let zero = SocialGraph::from_parts_unchecked(dmatrix![1.0, 0.0; 0.5, 0.5], GraphPrior::default_for(2));
        assert_eq!(log_prior(&zero).unwrap(), f64::NEG_INFINITY);
        let rows = SocialGraph::from_parts_unchecked(dmatrix![0.7, 0.7; 0.5, 0.5], GraphPrior::default_for(2));
        assert!(matches!(log_prior(&rows), Err(SboError::Argument(_))));
    }

    #[test]
    fn validate_examples() {
        let r = validate(&truth());
        assert!(r.valid() && r.invertible);
        // det = 0.3; singular values of A⁻¹ put ‖A⁻¹‖₂ at 3.7551, above n = 2
        let norm = r.inverse_norm.unwrap();
        assert!((norm - 3.755_118_924).abs() < 1e-6, "{norm}");
        assert_eq!(r.inverse_norm_within_bounds, Some(false));
        let row = vec![0.5, 0.3, 0.2];
        let washy = SocialGraph::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let r = validate(&washy);
        assert!(r.valid());
        assert!(!r.invertible);
        assert_eq!(r.inverse_norm, None);

        let single = SocialGraph::from_rows(&[vec![1.0]]).unwrap();
        let r = validate(&single);
        assert!(r.valid() && r.invertible);
        assert!((r.inverse_norm.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.inverse_norm_within_bounds, Some(true));
    }

    #[test]
    fn sample_prior_is_deterministic_and_valid() {
        assert_eq!(sample_prior(4, 9).unwrap(), sample_prior(4, 9).unwrap());
        assert_ne!(sample_prior(4, 9).unwrap(), sample_prior(4, 10).unwrap());
        for seed in 0..1000 {
            let g = sample_prior(3, seed).unwrap();
            for i in 0..3 {
                assert!((g.matrix().row(i).sum() - 1.0).abs() <= 1e-9);
            }
            assert!(g.matrix().min() >= DEFAULT_DELTA_A - 1e-12);
        }
    }

    #[test]
    fn concentrated_prior_is_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 3;
        let mut close = 0;
        for _ in 0..200 {
            let prior = GraphPrior {
                kappa: vec![1000.0; n],
                ..GraphPrior::default_for(n)
            };
            let g = sample_prior_with(n, prior, &mut rng).unwrap();
            let dev = g.matrix().iter().map(|v| (v - 1.0 / 3.0).abs()).fold(0.0, f64::max);
            if dev < 0.1 {
                close += 1;
            }
        }
        assert!(close as f64 >= 0.95 * 200.0, "{close}/200");
    }

    #[test]
    fn convolution_is_linear_and_range_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..1000 {
            let n = 1 + seed as usize % 5;
            let g = sample_prior(n, seed).unwrap();
            let l = 1.5;
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-l..l)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-l..l)).collect();
            let v = convolve(&g, &u).unwrap();
            assert!(v.iter().all(|x| x.abs() <= l));
            let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mix: Vec<f64> = u.iter().zip(&w).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = convolve(&g, &mix).unwrap();
            let cw = convolve(&g, &w).unwrap();
            for k in 0..n {
                assert!((lhs[k] - (alpha * v[k] + beta * cw[k])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn log_prior_is_concave_on_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..200 {
            let n = 2 + seed as usize % 3;
            let a = sample_prior(n, 2 * seed).unwrap();
            let b = sample_prior(n, 2 * seed + 1).unwrap();
            let lam: f64 = rng.random_range(0.01..0.99);
            let mid = SocialGraph::floored(
                a.matrix() * lam + b.matrix() * (1.0 - lam),
                GraphPrior::default_for(n),
            )
            .unwrap();
            let lhs = log_prior(&mid).unwrap();
            let rhs = lam * log_prior(&a).unwrap() + (1.0 - lam) * log_prior(&b).unwrap();
            assert!(lhs >= rhs - 1e-9);
        }
    }

    #[test]
    fn inverse_norm_lower_bound_holds() {
        for seed in 0..100 {
            let r = validate(&sample_prior(3, seed).unwrap());
            if let Some(norm) = r.inverse_norm {
                assert!(norm >= 1.0 - 1e-9);
            }
        }
    }
}
