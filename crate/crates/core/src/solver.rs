//! Dense log-barrier interior-point solver for the small concave programs
//! behind MAP fitting and confidence bounds.
//!
//! Programs maximise a concave objective subject to constraints of the form
//! `g(x) ≥ 0` with `g` concave: quadratic-form balls `xᵀMx ≤ L²`, concave
//! lower bounds `f(x) ≥ c`, boxes, and eliminated simplex rows. A phase-I
//! problem finds a strictly feasible start when the warm start is not one.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

/// A smooth concave function of the full unknown vector.
pub trait ConcaveFn: Send + Sync {
    /// Value and gradient (`grad` is overwritten).
    fn value_grad(&self, x: &DVector<f64>, grad: &mut DVector<f64>) -> f64;
    /// Adds `scale · ∇²f(x)` to `hess`.
    fn add_hessian(&self, x: &DVector<f64>, scale: f64, hess: &mut DMatrix<f64>);
    fn value(&self, x: &DVector<f64>) -> f64 {
        let mut g = DVector::zeros(x.len());
        self.value_grad(x, &mut g)
    }
}

#[derive(Clone)]
pub enum Objective {
    Linear(DVector<f64>),
    Concave(Arc<dyn ConcaveFn>),
}

#[derive(Clone)]
pub enum Constraint {
    /// `x_Iᵀ M x_I ≤ bound` for the listed indices `I`; `M` must be PSD.
    QuadBall {
        indices: Vec<usize>,
        matrix: Arc<DMatrix<f64>>,
        bound: f64,
    },
    /// `f(x) ≥ threshold`.
    LowerBound {
        func: Arc<dyn ConcaveFn>,
        threshold: f64,
    },
    /// `lo ≤ x_k ≤ hi`.
    Box { index: usize, lo: f64, hi: f64 },
    /// The eliminated entry `1 − Σ_{k∈I} x_k` of a simplex row lies in `[lo, hi]`.
    SimplexRow { indices: Vec<usize>, lo: f64, hi: f64 },
}

impl fmt::Debug for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::QuadBall { indices, bound, .. } => {
                write!(f, "QuadBall(|I|={}, bound={bound})", indices.len())
            }
            Constraint::LowerBound { threshold, .. } => write!(f, "LowerBound({threshold})"),
            Constraint::Box { index, lo, hi } => write!(f, "Box(x{index} in [{lo}, {hi}])"),
            Constraint::SimplexRow { indices, lo, hi } => {
                write!(f, "SimplexRow({indices:?} in [{lo}, {hi}])")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub kkt_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Initial barrier weight on the objective.
    pub tau0: f64,
    /// Growth of the objective weight (decrease of the barrier parameter).
    pub tau_factor: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-6,
            max_outer: 50,
            max_inner: 100,
            tau0: 1.0,
            tau_factor: 20.0,
        }
    }
}

#[derive(Clone)]
pub struct ConvexProgram {
    pub dim: usize,
    /// Named blocks of the unknown vector, for diagnostics.
    pub layout: Vec<(String, Range<usize>)>,
    pub objective: Objective,
    pub constraints: Vec<Constraint>,
    pub settings: SolverSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub newton_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_violation: f64,
    pub dual_violation: f64,
    pub complementarity: f64,
    pub multipliers: Vec<f64>,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.stationarity
            .max(self.primal_violation)
            .max(self.dual_violation)
            .max(self.complementarity)
    }
}

/// Per-constraint evaluation of `g`, `∇g` (sparse) and curvature.
struct ConstraintState {
    value: f64,
    grad: DVector<f64>,
}

impl ConvexProgram {
    pub fn new(dim: usize, objective: Objective) -> Self {
        Self {
            dim,
            layout: vec![("x".into(), 0..dim)],
            objective,
            constraints: Vec::new(),
            settings: SolverSettings::default(),
        }
    }

    pub fn with_constraint(mut self, c: Constraint) -> Self {
        self.constraints.push(c);
        self
    }

    pub fn objective_value(&self, x: &DVector<f64>) -> f64 {
        match &self.objective {
            Objective::Linear(c) => c.dot(x),
            Objective::Concave(f) => f.value(x),
        }
    }

    fn objective_grad(&self, x: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        match &self.objective {
            Objective::Linear(c) => {
                grad.copy_from(c);
                c.dot(x)
            }
            Objective::Concave(f) => f.value_grad(x, grad),
        }
    }

    fn objective_hessian(&self, x: &DVector<f64>, scale: f64, hess: &mut DMatrix<f64>) {
        if let Objective::Concave(f) = &self.objective {
            f.add_hessian(x, scale, hess);
        }
    }

    /// Number of scalar inequalities `g_k ≥ 0`.
    fn count(&self) -> usize {
        self.constraints
            .iter()
            .map(|c| match c {
                Constraint::Box { .. } | Constraint::SimplexRow { .. } => 2,
                _ => 1,
            })
            .sum()
    }

    /// Values of every scalar inequality.
    pub fn constraint_values(&self, x: &DVector<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        for c in &self.constraints {
            match c {
                Constraint::QuadBall {
                    indices,
                    matrix,
                    bound,
                } => out.push(bound - quad_form(matrix, indices, x)),
                Constraint::LowerBound { func, threshold } => out.push(func.value(x) - threshold),
                Constraint::Box { index, lo, hi } => {
                    out.push(x[*index] - lo);
                    out.push(hi - x[*index]);
                }
                Constraint::SimplexRow { indices, lo, hi } => {
                    let rest = 1.0 - indices.iter().map(|&k| x[k]).sum::<f64>();
                    out.push(rest - lo);
                    out.push(hi - rest);
                }
            }
        }
        out
    }

    /// Values and gradients of every scalar inequality.
    fn constraint_states(&self, x: &DVector<f64>) -> Vec<ConstraintState> {
        let n = self.dim;
        let mut out = Vec::with_capacity(self.count());
        for c in &self.constraints {
            match c {
                Constraint::QuadBall {
                    indices,
                    matrix,
                    bound,
                } => {
                    let mut grad = DVector::zeros(n);
                    let mut q = 0.0;
                    for (a, &ia) in indices.iter().enumerate() {
                        let mut row = 0.0;
                        for (b, &ib) in indices.iter().enumerate() {
                            row += matrix[(a, b)] * x[ib];
                        }
                        q += x[ia] * row;
                        grad[ia] = -2.0 * row;
                    }
                    out.push(ConstraintState {
                        value: bound - q,
                        grad,
                    });
                }
                Constraint::LowerBound { func, threshold } => {
                    let mut grad = DVector::zeros(n);
                    let v = func.value_grad(x, &mut grad);
                    out.push(ConstraintState {
                        value: v - threshold,
                        grad,
                    });
                }
                Constraint::Box { index, lo, hi } => {
                    let mut g1 = DVector::zeros(n);
                    g1[*index] = 1.0;
                    let g2 = -&g1;
                    out.push(ConstraintState {
                        value: x[*index] - lo,
                        grad: g1,
                    });
                    out.push(ConstraintState {
                        value: hi - x[*index],
                        grad: g2,
                    });
                }
                Constraint::SimplexRow { indices, lo, hi } => {
                    let rest = 1.0 - indices.iter().map(|&k| x[k]).sum::<f64>();
                    let mut g1 = DVector::zeros(n);
                    for &k in indices {
                        g1[k] = -1.0;
                    }
                    let g2 = -&g1;
                    out.push(ConstraintState {
                        value: rest - lo,
                        grad: g1,
                    });
                    out.push(ConstraintState {
                        value: hi - rest,
                        grad: g2,
                    });
                }
            }
        }
        out
    }

    /// Adds `Σ_k w_k ∇²g_k` to `hess`, where `weights` follow the scalar order.
    fn add_constraint_hessians(&self, x: &DVector<f64>, weights: &[f64], hess: &mut DMatrix<f64>) {
        let mut k = 0;
        for c in &self.constraints {
            match c {
                Constraint::QuadBall {
                    indices, matrix, ..
                } => {
                    let w = weights[k];
                    for (a, &ia) in indices.iter().enumerate() {
                        for (b, &ib) in indices.iter().enumerate() {
                            hess[(ia, ib)] -= 2.0 * w * matrix[(a, b)];
                        }
                    }
                    k += 1;
                }
                Constraint::LowerBound { func, .. } => {
                    func.add_hessian(x, weights[k], hess);
                    k += 1;
                }
                Constraint::Box { .. } | Constraint::SimplexRow { .. } => k += 2,
            }
        }
    }

    pub fn is_strictly_feasible(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim && self.constraint_values(x).iter().all(|g| *g > 0.0)
    }
}

fn quad_form(m: &DMatrix<f64>, indices: &[usize], x: &DVector<f64>) -> f64 {
    let mut q = 0.0;
    for (a, &ia) in indices.iter().enumerate() {
        let mut row = 0.0;
        for (b, &ib) in indices.iter().enumerate() {
            row += m[(a, b)] * x[ib];
        }
        q += x[ia] * row;
    }
    q
}

/// Solves `(−H) Δ = g` with escalating diagonal regularisation.
fn newton_direction(neg_hess: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let n = grad.len();
    let scale = (0..n).map(|i| neg_hess[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let mut reg = 0.0;
    for _ in 0..12 {
        let mut m = neg_hess.clone();
        if reg > 0.0 {
            for i in 0..n {
                m[(i, i)] += reg;
            }
        }
        if let Some(chol) = m.cholesky() {
            let d = chol.solve(grad);
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        reg = if reg == 0.0 { 1e-12 * scale } else { reg * 100.0 };
    }
    None
}

/// Internal barrier problem: the program plus an optional phase-I slack
/// variable `s` appended at index `dim`, turning each `g_k ≥ 0` into
/// `g_k − s ≥ 0` and the objective into `s`.
struct Barrier<'a> {
    program: &'a ConvexProgram,
    phase_one: bool,
}

impl Barrier<'_> {
    fn width(&self) -> usize {
        self.program.dim + usize::from(self.phase_one)
    }

    fn split<'x>(&self, x: &'x DVector<f64>) -> (DVector<f64>, f64) {
        if self.phase_one {
            let d = self.program.dim;
            (x.rows(0, d).into_owned(), x[d])
        } else {
            (x.clone(), 0.0)
        }
    }

    fn slacks(&self, x: &DVector<f64>) -> Vec<f64> {
        let (core, s) = self.split(x);
        let mut g = self.program.constraint_values(&core);
        if self.phase_one {
            for v in g.iter_mut() {
                *v -= s;
            }
            // keeps phase I bounded
            g.push(1.0 - s);
        }
        g
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        if self.phase_one {
            x[self.program.dim]
        } else {
            self.program.objective_value(x)
        }
    }

    /// Barrier merit `τ f + Σ log g_k`, or `-inf` outside the domain.
    fn merit(&self, x: &DVector<f64>, tau: f64) -> f64 {
        let g = self.slacks(x);
        if g.iter().any(|v| !(*v > 0.0)) {
            return f64::NEG_INFINITY;
        }
        tau * self.objective(x) + g.iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Gradient and Hessian of the merit.
    fn derivatives(&self, x: &DVector<f64>, tau: f64) -> (DVector<f64>, DMatrix<f64>, Vec<f64>) {
        let w = self.width();
        let d = self.program.dim;
        let (core, s) = self.split(x);
        let mut grad = DVector::zeros(w);
        let mut hess = DMatrix::zeros(w, w);

        if self.phase_one {
            grad[d] = tau;
        } else {
            let mut g = DVector::zeros(d);
            self.program.objective_grad(&core, &mut g);
            grad.rows_mut(0, d).axpy(tau, &g, 1.0);
            self.program.objective_hessian(&core, tau, &mut hess);
        }

        let states = self.program.constraint_states(&core);
        let mut weights = Vec::with_capacity(states.len());
        let mut values = Vec::with_capacity(states.len() + 1);
        for st in &states {
            let g = st.value - s;
            values.push(g);
            let inv = 1.0 / g;
            weights.push(inv);
            // ∇ log g = ∇g / g ; ∇² log g = ∇²g / g − ∇g ∇gᵀ / g²
            let nz: Vec<usize> = (0..d).filter(|&k| st.grad[k] != 0.0).collect();
            for &a in &nz {
                grad[a] += st.grad[a] * inv;
            }
            let inv2 = inv * inv;
            for &a in &nz {
                let ga = st.grad[a] * inv2;
                for &b in &nz {
                    hess[(a, b)] -= ga * st.grad[b];
                }
            }
            if self.phase_one {
                // ∂/∂s of log(g − s) = −1/g
                grad[d] -= inv;
                hess[(d, d)] -= inv2;
                for &a in &nz {
                    let c = st.grad[a] * inv2;
                    hess[(a, d)] += c;
                    hess[(d, a)] += c;
                }
            }
        }
        self.program.add_constraint_hessians(&core, &weights, &mut hess);
        if self.phase_one {
            let g = 1.0 - s;
            values.push(g);
            grad[d] -= 1.0 / g;
            hess[(d, d)] -= 1.0 / (g * g);
        }
        (grad, hess, values)
    }

    /// Full Newton steps near the centre, where the merit can no longer
    /// rank points but the quadratic model still can.
    fn polish(&self, x: &mut DVector<f64>, tau: f64, mut dir: DVector<f64>, steps: &mut usize) {
        for _ in 0..3 {
            let trial = &*x + &dir;
            if !self.merit(&trial, tau).is_finite() {
                return;
            }
            *x = trial;
            let (grad, hess, _) = self.derivatives(x, tau);
            let Some(next) = newton_direction(&-hess, &grad) else {
                return;
            };
            *steps += 1;
            let dec = grad.dot(&next);
            if !(dec > 0.0) || dec >= 0.25 {
                return;
            }
            dir = next;
        }
    }

    /// Centering step: Newton on the barrier merit at fixed `tau`.
    fn center(&self, x: &mut DVector<f64>, tau: f64, max_inner: usize, steps: &mut usize) -> bool {
        let mut merit = self.merit(x, tau);
        for _ in 0..max_inner {
            let (grad, hess, _) = self.derivatives(x, tau);
            let neg = -hess;
            let Some(dir) = newton_direction(&neg, &grad) else {
                return false;
            };
            *steps += 1;
            let decrement = grad.dot(&dir);
            // the merit is only known to a few ulps of its magnitude
            let floor = 1e-9_f64.max(1e-13 * merit.abs());
            if !(decrement > 0.0) {
                return true;
            }
            if decrement * 0.5 <= floor {
                self.polish(x, tau, dir, steps);
                return true;
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial = &*x + &dir * alpha;
                let m = self.merit(&trial, tau);
                if m.is_finite() && m >= merit + 0.01 * alpha * decrement {
                    *x = trial;
                    merit = m;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // no progress possible at machine precision
                if decrement * 0.5 <= 1e3 * floor {
                    self.polish(x, tau, dir, steps);
                    return true;
                }
                return false;
            }
            if self.phase_one && x[self.program.dim] > 0.0 {
                return true;
            }
        }
        false
    }
}

/// Finds a strictly feasible point, starting from `x0`.
fn phase_one(p: &ConvexProgram, x0: &DVector<f64>, steps: &mut usize) -> Option<DVector<f64>> {
    if p.is_strictly_feasible(x0) {
        return Some(x0.clone());
    }
    let g = p.constraint_values(x0);
    let min_g = g.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut x = DVector::zeros(p.dim + 1);
    x.rows_mut(0, p.dim).copy_from(x0);
    x[p.dim] = min_g - 1.0;
    let barrier = Barrier {
        program: p,
        phase_one: true,
    };
    let mut tau = 1.0;
    for _ in 0..p.settings.max_outer {
        barrier.center(&mut x, tau, p.settings.max_inner, steps);
        if x[p.dim] > 0.0 {
            let core = x.rows(0, p.dim).into_owned();
            if p.is_strictly_feasible(&core) {
                return Some(core);
            }
        }
        let m = (g.len() + 1) as f64;
        if m / tau < 1e-12 {
            break;
        }
        tau *= p.settings.tau_factor;
    }
    None
}

/// Maximises the program from `warm_start` (or the origin).
pub fn solve(p: &ConvexProgram, warm_start: Option<&DVector<f64>>) -> Result<SolveResult> {
    if let Some(w) = warm_start {
        if w.len() != p.dim {
            return arg(format!(
                "warm start has length {}, program has {} unknowns",
                w.len(),
                p.dim
            ));
        }
    }
    let x0 = warm_start.cloned().unwrap_or_else(|| DVector::zeros(p.dim));
    let mut steps = 0;
    let Some(mut x) = phase_one(p, &x0, &mut steps) else {
        return Ok(SolveResult {
            objective: p.objective_value(&x0),
            x: x0,
            status: SolveStatus::Infeasible,
            kkt_residual: f64::INFINITY,
            newton_steps: steps,
        });
    };
    let barrier = Barrier {
        program: p,
        phase_one: false,
    };
    let target = p.settings.kkt_tol;
    let mut tau = p.settings.tau0;
    let mut status = SolveStatus::MaxIter;
    for _ in 0..p.settings.max_outer {
        let centered = barrier.center(&mut x, tau, p.settings.max_inner, &mut steps);
        if 1.0 / tau <= target {
            if centered {
                status = SolveStatus::Optimal;
            }
            break;
        }
        tau *= p.settings.tau_factor;
    }
    let kkt = ipm_residual(p, &x, tau);
    if status == SolveStatus::Optimal && kkt > p.settings.kkt_tol {
        status = SolveStatus::MaxIter;
    }
    Ok(SolveResult {
        objective: p.objective_value(&x),
        x,
        status,
        kkt_residual: kkt,
        newton_steps: steps,
    })
}

/// KKT residual using the central-path multipliers `λ_k = 1/(τ g_k)`;
/// stationarity is relative to the objective gradient.
fn ipm_residual(p: &ConvexProgram, x: &DVector<f64>, tau: f64) -> f64 {
    let mut grad = DVector::zeros(p.dim);
    p.objective_grad(x, &mut grad);
    let scale = grad.amax().max(1.0);
    let states = p.constraint_states(x);
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for st in &states {
        let lambda = 1.0 / (tau * st.value);
        grad.axpy(lambda, &st.grad, 1.0);
        primal = primal.max(-st.value);
        comp = comp.max((lambda * st.value).abs());
    }
    (grad.amax() / scale).max(primal).max(comp)
}

/// Stationarity, feasibility and complementarity residuals at `candidate`.
///
/// Multipliers are the nonnegative least-squares fit of
/// `∇f + Σ λ_k ∇g_k ≈ 0` jointly with `λ_k g_k ≈ 0`.
pub fn check_kkt(p: &ConvexProgram, candidate: &DVector<f64>) -> Result<KktReport> {
    if candidate.len() != p.dim {
        return arg(format!(
            "candidate has length {}, program layout has {}",
            candidate.len(),
            p.dim
        ));
    }
    let mut grad = DVector::zeros(p.dim);
    p.objective_grad(candidate, &mut grad);
    let states = p.constraint_states(candidate);
    let k = states.len();
    let mut a = DMatrix::zeros(p.dim + k, k);
    let mut b = DVector::zeros(p.dim + k);
    for (j, st) in states.iter().enumerate() {
        a.view_mut((0, j), (p.dim, 1)).copy_from(&st.grad);
        a[(p.dim + j, j)] = st.value.max(0.0);
    }
    b.rows_mut(0, p.dim).copy_from(&(-&grad));
    let lambda = nnls(&a, &b);
    let mut station = grad.clone();
    for (j, st) in states.iter().enumerate() {
        station.axpy(lambda[j], &st.grad, 1.0);
    }
    let primal = states.iter().map(|s| (-s.value).max(0.0)).fold(0.0, f64::max);
    let comp = states
        .iter()
        .zip(lambda.iter())
        .map(|(s, l)| (l * s.value).abs())
        .fold(0.0, f64::max);
    Ok(KktReport {
        stationarity: station.amax(),
        primal_violation: primal,
        dual_violation: lambda.iter().map(|l| (-l).max(0.0)).fold(0.0, f64::max),
        complementarity: comp,
        multipliers: lambda.iter().cloned().collect(),
    })
}

/// Lawson-Hanson nonnegative least squares `min ‖Aλ − b‖, λ ≥ 0`.
fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let k = a.ncols();
    let mut x = DVector::zeros(k);
    let mut passive = vec![false; k];
    let tol = 1e-12 * (1.0 + a.amax() * b.amax());
    for _ in 0..3 * k + 10 {
        let w = a.transpose() * (b - a * &x);
        let cand = (0..k)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        match cand {
            Some(j) if w[j] > tol => passive[j] = true,
            _ => break,
        }
        loop {
            let idx: Vec<usize> = (0..k).filter(|&j| passive[j]).collect();
            let sub = a.select_columns(&idx);
            let z_sub = match (sub.transpose() * &sub).cholesky() {
                Some(c) => c.solve(&(sub.transpose() * b)),
                None => sub.clone().svd(true, true).solve(b, 1e-14).unwrap_or_else(|_| DVector::zeros(idx.len())),
            };
            if z_sub.iter().all(|v| *v > 0.0) {
                for (pos, &j) in idx.iter().enumerate() {
                    x[j] = z_sub[pos];
                }
                break;
            }
            let mut alpha = 1.0f64;
            for (pos, &j) in idx.iter().enumerate() {
                if z_sub[pos] <= 0.0 {
                    alpha = alpha.min(x[j] / (x[j] - z_sub[pos]));
                }
            }
            for (pos, &j) in idx.iter().enumerate() {
                x[j] += alpha * (z_sub[pos] - x[j]);
                if x[j] <= 1e-15 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    x
}
