//! MAP fitting, confidence-set programs and the optimistic acquisition.
//!
//! Utilities are represented by their values at the queried points. Every
//! program keeps each agent's values inside the kernel norm ball
//! `Uᵀ K⁻¹ U ≤ L²`; confidence sets add lower bounds on the achieved
//! log-likelihoods. The graph enters bilinearly through `v = A u`, so the
//! coupled programs alternate between a utility step (graph fixed) and a
//! graph step (utilities fixed).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::GsfRule;
use crate::error::{arg, Result, SboError};
use crate::kernels::{gram, stable_inverse, KernelSpec};
use crate::likelihood::{
    free_from_graph, graph_from_free, merge_terms, GraphStepFn, LikFn, Mix, PairTerm, TermBlock,
};
use crate::point::{halton, Domain, OptionPoint};
use crate::preference::{Channel, VoteRecord};
use crate::social_graph::{log_prior_unchecked, GraphPrior, SocialGraph};
use crate::solver::{solve, Constraint, ConvexProgram, Objective, SolveStatus, SolverSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaMode {
    Fixed,
    SqrtGrowth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta0: f64,
    pub mode: BetaMode,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.5,
            mode: BetaMode::Fixed,
        }
    }
}

/// Confidence radii for the joint, private-only and public-only sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Betas {
    pub joint: f64,
    pub private: f64,
    pub public: f64,
}

pub fn beta(schedule: &BetaSchedule, private_count: usize, public_count: usize) -> Betas {
    let b = schedule.beta0;
    match schedule.mode {
        BetaMode::Fixed => Betas {
            joint: b,
            private: b,
            public: b,
        },
        BetaMode::SqrtGrowth => Betas {
            joint: b * ((1 + private_count + public_count) as f64).sqrt(),
            private: b * ((1 + private_count) as f64).sqrt(),
            public: b * ((1 + public_count) as f64).sqrt(),
        },
    }
}

impl Betas {
    /// Radii for a model class whose norm bound is `factor` times the base one.
    pub fn scaled(self, factor: f64) -> Self {
        Self {
            joint: self.joint * factor,
            private: self.private * factor,
            public: self.public * factor,
        }
    }
}

/// How private utilities, public utilities and the graph are tied together.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    /// `v = A u` with `A` estimated.
    Coupled,
    /// `v = A u` with `A` given.
    KnownGraph(SocialGraph),
    /// `u` from private votes and `v` from public votes, untied.
    Independent,
    /// One utility shared by everyone, fitted on all public outcomes.
    Pooled,
}

/// Growing record of queried points and votes.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteData {
    n: usize,
    points: Vec<OptionPoint>,
    votes: Vec<VoteRecord>,
    pairs: Vec<(usize, usize)>,
}

impl VoteData {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            points: Vec::new(),
            votes: Vec::new(),
            pairs: Vec::new(),
        }
    }

    pub fn from_votes(n: usize, votes: &[VoteRecord]) -> Result<Self> {
        let mut d = Self::new(n);
        for v in votes {
            d.push(v.clone())?;
        }
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn points(&self) -> &[OptionPoint] {
        &self.points
    }

    pub fn votes(&self) -> &[VoteRecord] {
        &self.votes
    }

    pub fn index_of(&self, x: &OptionPoint) -> Option<usize> {
        self.points.iter().position(|p| p == x)
    }

    /// Registers a point without votes; returns its index.
    pub fn add_point(&mut self, x: &OptionPoint) -> usize {
        match self.index_of(x) {
            Some(k) => k,
            None => {
                self.points.push(x.clone());
                self.points.len() - 1
            }
        }
    }

    pub fn push(&mut self, v: VoteRecord) -> Result<()> {
        v.validate(self.n)?;
        if let Some(p) = self.points.first() {
            if p.dim() != v.x.dim() {
                return arg("vote dimension differs from earlier points");
            }
        }
        let a = self.add_point(&v.x);
        let b = self.add_point(&v.xp);
        self.pairs.push((a, b));
        self.votes.push(v);
        Ok(())
    }

    pub fn count(&self, channel: Channel) -> usize {
        self.votes.iter().filter(|v| v.channel == channel).count()
    }

    fn terms(&self, channel: Channel, pooled: bool) -> Vec<PairTerm> {
        merge_terms(
            self.votes
                .iter()
                .zip(&self.pairs)
                .filter(|(v, _)| v.channel == channel)
                .map(|(v, (a, b))| (*a, *b, v.outcomes.as_slice())),
            pooled,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub n: usize,
    pub domain: Domain,
    /// Aggregation parameter of the welfare function.
    pub rho: f64,
    pub kernel: KernelSpec,
    /// Per-agent kernel overrides; the shared kernel is used when absent.
    #[serde(default)]
    pub agent_kernels: Option<Vec<KernelSpec>>,
    pub norm_bound: f64,
    pub beta: BetaSchedule,
    pub prior: GraphPrior,
    pub solver: SolverSettings,
    /// Coordinate-ascent sweeps for MAP fits.
    pub map_sweeps: usize,
    /// Utility steps per confidence program (graph steps in between).
    pub bound_sweeps: usize,
    pub sweep_tol: f64,
    pub acq_candidates: usize,
    pub acq_refine: usize,
    /// Refined candidates whose acquisition is solved exactly.
    pub acq_exact: usize,
    pub refine_min_step: f64,
}

impl InferenceConfig {
    pub fn new(n: usize, domain: Domain) -> Self {
        Self {
            n,
            domain,
            rho: 1.0,
            kernel: KernelSpec::rbf(DEFAULT_LENGTHSCALE),
            agent_kernels: None,
            norm_bound: 1.5,
            beta: BetaSchedule::default(),
            prior: GraphPrior::default_for(n),
            solver: SolverSettings::default(),
            map_sweeps: 5,
            bound_sweeps: 2,
            sweep_tol: 1e-6,
            acq_candidates: 128,
            acq_refine: 8,
            acq_exact: 3,
            refine_min_step: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return arg("need at least one agent");
        }
        self.domain.validate()?;
        GsfRule::new(self.rho, self.n)?;
        self.kernel.validate()?;
        if let Some(ks) = &self.agent_kernels {
            if ks.len() != self.n {
                return arg("agent_kernels needs one kernel per agent");
            }
            for k in ks {
                k.validate()?;
            }
        }
        if !(self.norm_bound > 0.0 && self.norm_bound.is_finite()) {
            return arg("norm_bound must be positive");
        }
        if !(self.beta.beta0 > 0.0) {
            return arg("beta0 must be positive");
        }
        self.prior.validate(self.n)?;
        if self.acq_candidates == 0 || self.bound_sweeps == 0 || self.map_sweeps == 0 {
            return arg("candidate and sweep counts must be positive");
        }
        Ok(())
    }
}

/// Softplus-inverse of 1, the usual initial lengthscale of GP libraries.
pub const DEFAULT_LENGTHSCALE: f64 = std::f64::consts::LN_2;

/// Kernel and utility values needed to predict at new points.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub kernels: Vec<KernelSpec>,
    pub unit_points: Vec<OptionPoint>,
    /// Row `r` is `K_r⁻¹ U_r`.
    pub alpha: DMatrix<f64>,
}

impl Predictor {
    fn new(kernels: Vec<KernelSpec>, unit_points: Vec<OptionPoint>, kinv: &[Arc<DMatrix<f64>>], values: &DMatrix<f64>) -> Self {
        let rows = values.nrows();
        let m = values.ncols();
        let mut alpha = DMatrix::zeros(rows, m);
        for r in 0..rows {
            let a = kinv[r].as_ref() * values.row(r).transpose();
            alpha.row_mut(r).copy_from(&a.transpose());
        }
        Self {
            kernels,
            unit_points,
            alpha,
        }
    }

    /// Predicted values for every row at a unit-cube point.
    pub fn predict(&self, unit: &OptionPoint) -> Vec<f64> {
        (0..self.alpha.nrows())
            .map(|r| {
                let k = &self.kernels[r];
                self.unit_points
                    .iter()
                    .enumerate()
                    .map(|(p, q)| self.alpha[(r, p)] * k.eval_unchecked(unit.coords(), q.coords()))
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapEstimate {
    pub points: Vec<OptionPoint>,
    /// Private utilities at the points, one row per modelled utility.
    pub u: DMatrix<f64>,
    /// Public utilities at the points, one row per agent.
    pub v: DMatrix<f64>,
    pub graph: Option<SocialGraph>,
    pub log_posterior: f64,
    pub ll_private: f64,
    pub ll_public: f64,
    pub log_prior: f64,
    /// Public-only fit, the centre of the public confidence set.
    pub v_public_only: DMatrix<f64>,
    pub ll_public_only: f64,
    pub norm_bound: f64,
    pub u_predictor: Predictor,
    pub v_predictor: Predictor,
    pub v_public_only_predictor: Predictor,
}

impl MapEstimate {
    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn predict_u(&self, domain: &Domain, x: &OptionPoint) -> Vec<f64> {
        self.u_predictor.predict(&domain.to_unit(x))
    }

    pub fn predict_v(&self, domain: &Domain, x: &OptionPoint) -> Vec<f64> {
        self.v_predictor.predict(&domain.to_unit(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Upper,
    Lower,
}

/// Which confidence set a width is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WidthChannel {
    /// Private utilities over the joint set.
    U,
    /// Public utilities over the public-only set.
    V,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WidthReport {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub x: OptionPoint,
    pub acquisition: f64,
}

/// Point set extended by extra prediction points, with per-row inverse Gram
/// matrices.
struct Extended {
    m: usize,
    unit: Vec<OptionPoint>,
    extra_index: Vec<usize>,
    u_kinv: Vec<Arc<DMatrix<f64>>>,
    agent_kinv: Vec<Arc<DMatrix<f64>>>,
}

/// Inference context: configuration plus the current hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub config: InferenceConfig,
    pub kind: ModelKind,
    pub norm_bound: f64,
}

/// Per-fit precomputation over a dataset.
struct Workspace<'a> {
    inf: &'a Inference,
    n: usize,
    rows: usize,
    unit: Vec<OptionPoint>,
    u_kernels: Vec<KernelSpec>,
    agent_kernels: Vec<KernelSpec>,
    u_kinv: Vec<Arc<DMatrix<f64>>>,
    agent_kinv: Vec<Arc<DMatrix<f64>>>,
    private: Arc<Vec<PairTerm>>,
    public: Arc<Vec<PairTerm>>,
    pooled: Arc<Vec<PairTerm>>,
    norm_bound: f64,
    private_count: usize,
    public_count: usize,
}

fn inverse_grams(kernels: &[KernelSpec], unit: &[OptionPoint]) -> Result<Vec<Arc<DMatrix<f64>>>> {
    let mut out: Vec<Arc<DMatrix<f64>>> = Vec::with_capacity(kernels.len());
    for (r, k) in kernels.iter().enumerate() {
        if let Some(prev) = (0..r).find(|&q| kernels[q] == *k) {
            out.push(out[prev].clone());
            continue;
        }
        if unit.is_empty() {
            out.push(Arc::new(DMatrix::zeros(0, 0)));
        } else {
            out.push(Arc::new(stable_inverse(&gram(k, unit)?)?.inverse));
        }
    }
    Ok(out)
}

fn shrink_into_ball(values: &mut DMatrix<f64>, kinv: &[Arc<DMatrix<f64>>], bound: f64) {
    let target = 0.99 * bound;
    for r in 0..values.nrows() {
        let row = values.row(r).transpose();
        let q = (row.transpose() * kinv[r].as_ref() * &row)[(0, 0)];
        if q > target * target {
            let s = target / q.sqrt();
            values.row_mut(r).scale_mut(s);
        }
    }
}

fn flatten(values: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        values.len(),
        (0..values.nrows()).flat_map(|r| (0..values.ncols()).map(move |c| (r, c))).map(|(r, c)| values[(r, c)]),
    )
}

fn unflatten(x: &DVector<f64>, offset: usize, rows: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, m, |r, c| x[offset + r * m + c])
}

impl Inference {
    pub fn new(config: InferenceConfig, kind: ModelKind) -> Result<Self> {
        config.validate()?;
        if let ModelKind::KnownGraph(g) = &kind {
            if g.n() != config.n {
                return arg("known graph size differs from the number of agents");
            }
        }
        Ok(Self {
            norm_bound: config.norm_bound,
            config,
            kind,
        })
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    /// Number of modelled private utilities.
    pub fn rows(&self) -> usize {
        if self.kind == ModelKind::Pooled {
            1
        } else {
            self.config.n
        }
    }

    pub fn rule(&self) -> GsfRule {
        GsfRule::new(self.config.rho, self.rows()).expect("validated rho")
    }

    fn agent_kernel_list(&self) -> Vec<KernelSpec> {
        match &self.config.agent_kernels {
            Some(ks) => ks.clone(),
            None => vec![self.config.kernel.clone(); self.config.n],
        }
    }

    fn workspace(&self, data: &VoteData) -> Result<Workspace<'_>> {
        if data.n() != self.config.n {
            return arg("dataset and model disagree on the number of agents");
        }
        let unit: Vec<OptionPoint> = data.points().iter().map(|p| self.config.domain.to_unit(p)).collect();
        let agent_kernels = self.agent_kernel_list();
        let u_kernels = if self.kind == ModelKind::Pooled {
            vec![self.config.kernel.clone()]
        } else {
            agent_kernels.clone()
        };
        let u_kinv = inverse_grams(&u_kernels, &unit)?;
        let agent_kinv = if u_kernels == agent_kernels {
            u_kinv.clone()
        } else {
            inverse_grams(&agent_kernels, &unit)?
        };
        Ok(Workspace {
            inf: self,
            n: self.config.n,
            rows: self.rows(),
            unit,
            u_kernels,
            agent_kernels,
            u_kinv,
            agent_kinv,
            private: Arc::new(data.terms(Channel::Private, false)),
            public: Arc::new(data.terms(Channel::Public, false)),
            pooled: Arc::new(data.terms(Channel::Public, true)),
            norm_bound: self.norm_bound,
            private_count: data.count(Channel::Private),
            public_count: data.count(Channel::Public),
        })
    }

    /// MAP estimate of utilities and graph, warm-started from `warm`.
    pub fn fit_map(&self, data: &VoteData, warm: Option<&MapEstimate>) -> Result<MapEstimate> {
        if data.count(Channel::Public) == 0 {
            return Err(SboError::State("fit_map needs at least one public vote".into()));
        }
        self.fit_map_any(data, warm)
    }

    /// MAP fit that also accepts an empty dataset (all-zero utilities).
    pub(crate) fn fit_map_any(&self, data: &VoteData, warm: Option<&MapEstimate>) -> Result<MapEstimate> {
        let ws = self.workspace(data)?;
        ws.fit_map(warm)
    }

    /// Upper or lower confidence bound on agent `agent`'s private utility at `x`.
    pub fn confidence_bound(
        &self,
        data: &VoteData,
        est: &MapEstimate,
        x: &OptionPoint,
        agent: usize,
        direction: Direction,
    ) -> Result<f64> {
        let ws = self.workspace(data)?;
        if agent >= ws.rows {
            return arg(format!("agent {agent} out of range"));
        }
        let ext = ws.extend(&[x.clone()])?;
        let sign = if direction == Direction::Upper { 1.0 } else { -1.0 };
        let target = [(agent, ext.extra_index[0], sign)];
        let (val, _) = ws.optimise_u(&ext, est, &target)?;
        Ok(sign * val)
    }

    /// Optimistic improvement of the social utility at `x` over `x_prev`.
    pub fn acquisition_value(&self, data: &VoteData, est: &MapEstimate, x: &OptionPoint, x_prev: &OptionPoint) -> Result<f64> {
        let ws = self.workspace(data)?;
        ws.acquisition(est, x, x_prev)
    }

    /// Confidence-set diameter of the per-agent utility gap between `x` and `x_prev`.
    pub fn projection_width(
        &self,
        data: &VoteData,
        est: &MapEstimate,
        x: &OptionPoint,
        x_prev: &OptionPoint,
        channel: WidthChannel,
    ) -> Result<WidthReport> {
        let ws = self.workspace(data)?;
        ws.width(est, x, x_prev, channel)
    }

    /// Doubles the norm bound when the MAP fit at twice the bound is
    /// better by more than the confidence radius. Returns the bound and the
    /// estimate fitted at it.
    /// Confidence radii at the current norm bound. The radius grows linearly
    /// with the bound relative to the configured one.
    pub fn betas(&self, data: &VoteData) -> Betas {
        beta(&self.config.beta, data.count(Channel::Private), data.count(Channel::Public))
            .scaled(self.norm_bound / self.config.norm_bound)
    }

    pub fn adapt_norm_bound(&self, data: &VoteData, est: &MapEstimate) -> Result<(f64, MapEstimate)> {
        let mut doubled = self.clone();
        doubled.norm_bound = 2.0 * self.norm_bound;
        let wide = doubled.fit_map_any(data, Some(est))?;
        let b = doubled.betas(data);
        if est.log_posterior < wide.log_posterior - b.joint {
            Ok((doubled.norm_bound, wide))
        } else {
            Ok((self.norm_bound, est.clone()))
        }
    }

    /// Picks the lengthscale with the smallest mean held-out negative
    /// log-likelihood. At most `max_folds` votes are held out, spread evenly
    /// over the record. Ties go to the larger lengthscale.
    pub fn tune_kernel_loocv(&self, data: &VoteData, grid: &[f64], max_folds: usize) -> Result<KernelSpec> {
        if grid.is_empty() {
            return arg("empty lengthscale grid");
        }
        if grid.len() == 1 {
            return Ok(self.config.kernel.with_lengthscale(grid[0]));
        }
        let votes = data.votes();
        if votes.len() < 3 {
            return arg("leave-one-out tuning needs at least three votes");
        }
        let folds = max_folds.max(1).min(votes.len());
        let held: Vec<usize> = (0..folds).map(|k| k * votes.len() / folds).collect();
        let mut order: Vec<f64> = grid.to_vec();
        order.sort_by(|a, b| b.total_cmp(a));
        let mut best: Option<(f64, f64)> = None;
        for &ls in &order {
            let mut inf = self.clone();
            inf.config.kernel = self.config.kernel.with_lengthscale(ls);
            inf.config.agent_kernels = None;
            inf.config.map_sweeps = inf.config.map_sweeps.min(2);
            let mut score = 0.0;
            let mut used = 0usize;
            let mut warm: Option<MapEstimate> = None;
            for &h in &held {
                let rest: Vec<VoteRecord> = votes
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != h)
                    .map(|(_, v)| v.clone())
                    .collect();
                let sub = VoteData::from_votes(data.n(), &rest)?;
                if sub.count(Channel::Public) == 0 {
                    continue;
                }
                let fit = inf.fit_map_any(&sub, warm.as_ref())?;
                score -= inf.held_out_loglik(&fit, &votes[h]);
                used += 1;
                warm = Some(fit);
            }
            if used == 0 {
                continue;
            }
            let mean = score / used as f64;
            if best.map_or(true, |(s, _)| mean < s - 1e-9) {
                best = Some((mean, ls));
            }
        }
        let ls = best.map_or(order[0], |(_, l)| l);
        Ok(self.config.kernel.with_lengthscale(ls))
    }

    fn held_out_loglik(&self, fit: &MapEstimate, v: &VoteRecord) -> f64 {
        let d = &self.config.domain;
        let (fa, fb) = match v.channel {
            Channel::Private => (fit.predict_u(d, &v.x), fit.predict_u(d, &v.xp)),
            Channel::Public => (fit.predict_v(d, &v.x), fit.predict_v(d, &v.xp)),
        };
        (0..v.outcomes.len())
            .map(|i| {
                let r = i.min(fa.len() - 1);
                crate::preference::outcome_loglik(fa[r] - fb[r], v.prefers_x(i))
            })
            .sum()
    }

    /// Screens low-discrepancy candidates with a quadratic surrogate of the
    /// confidence set, refines the best by pattern search and solves the
    /// acquisition program exactly for the top few.
    pub fn propose<R: Rng + ?Sized>(
        &self,
        data: &VoteData,
        est: &MapEstimate,
        x_prev: &OptionPoint,
        rng: &mut R,
    ) -> Result<Proposal> {
        let ws = self.workspace(data)?;
        ws.propose(est, x_prev, rng)
    }
}

impl Workspace<'_> {
    fn m(&self) -> usize {
        self.unit.len()
    }

    fn betas(&self) -> Betas {
        beta(&self.inf.config.beta, self.private_count, self.public_count)
            .scaled(self.norm_bound / self.inf.config.norm_bound)
    }

    fn settings(&self) -> SolverSettings {
        self.inf.config.solver.clone()
    }

    fn extend(&self, extra: &[OptionPoint]) -> Result<Extended> {
        let mut unit = self.unit.clone();
        let mut extra_index = Vec::with_capacity(extra.len());
        for x in extra {
            if x.dim() != self.inf.config.domain.dim() {
                return arg("point dimension differs from the domain");
            }
            let ux = self.inf.config.domain.to_unit(x);
            match unit.iter().position(|p| p.sq_dist(&ux) < 1e-20) {
                Some(k) => extra_index.push(k),
                None => {
                    unit.push(ux);
                    extra_index.push(unit.len() - 1);
                }
            }
        }
        let (u_kinv, agent_kinv) = if unit.len() == self.m() {
            (self.u_kinv.clone(), self.agent_kinv.clone())
        } else {
            let u = inverse_grams(&self.u_kernels, &unit)?;
            let a = if self.u_kernels == self.agent_kernels {
                u.clone()
            } else {
                inverse_grams(&self.agent_kernels, &unit)?
            };
            (u, a)
        };
        Ok(Extended {
            m: unit.len(),
            unit,
            extra_index,
            u_kinv,
            agent_kinv,
        })
    }

    fn balls(&self, offset: usize, rows: usize, m: usize, kinv: &[Arc<DMatrix<f64>>]) -> Vec<Constraint> {
        let l2 = self.norm_bound * self.norm_bound;
        (0..rows)
            .map(|r| Constraint::QuadBall {
                indices: (offset + r * m..offset + (r + 1) * m).collect(),
                matrix: kinv[r].clone(),
                bound: l2,
            })
            .collect()
    }

    fn block(&self, terms: &Arc<Vec<PairTerm>>, mix: Mix, offset: usize, stride: usize, rows: usize) -> TermBlock {
        TermBlock {
            terms: terms.clone(),
            mix,
            offset,
            stride,
            rows,
        }
    }

    fn graph_constraints(&self) -> Vec<Constraint> {
        let n = self.n;
        let delta = self.inf.config.prior.delta_a;
        let hi = 1.0 - (n as f64 - 1.0) * delta;
        let mut cs = Vec::new();
        for i in 0..n {
            let idx: Vec<usize> = (0..n - 1).map(|j| i * (n - 1) + j).collect();
            for &k in &idx {
                cs.push(Constraint::Box { index: k, lo: delta, hi });
            }
            cs.push(Constraint::SimplexRow { indices: idx, lo: delta, hi });
        }
        cs
    }

    fn fixed_graph(&self) -> Option<DMatrix<f64>> {
        match &self.inf.kind {
            ModelKind::KnownGraph(g) => Some(g.matrix().clone()),
            _ => None,
        }
    }

    /// Warm utility values at the (extended) unit points.
    fn warm_values(&self, pred: Option<&Predictor>, unit: &[OptionPoint], rows: usize, kinv: &[Arc<DMatrix<f64>>]) -> DMatrix<f64> {
        let m = unit.len();
        let mut vals = DMatrix::zeros(rows, m);
        if let Some(p) = pred {
            if p.alpha.nrows() == rows {
                for (c, x) in unit.iter().enumerate() {
                    let v = p.predict(x);
                    for r in 0..rows {
                        vals[(r, c)] = v[r];
                    }
                }
            }
        }
        shrink_into_ball(&mut vals, kinv, self.norm_bound);
        vals
    }

    fn check(&self, res: &crate::solver::SolveResult, what: &str) -> Result<()> {
        if res.status == SolveStatus::Infeasible {
            return Err(SboError::State(format!("{what}: solver reported an infeasible program")));
        }
        if res.x.iter().any(|v| !v.is_finite()) {
            return Err(SboError::Numeric {
                message: format!("{what}: non-finite solution"),
                condition: f64::INFINITY,
            });
        }
        Ok(())
    }

    fn solve_graph_step(&self, f: GraphStepFn, extra: Vec<Constraint>, theta: &DVector<f64>) -> Result<Option<DVector<f64>>> {
        let n = self.n;
        let mut p = ConvexProgram::new(n * (n - 1), Objective::Concave(Arc::new(f)));
        p.settings = self.settings();
        p.constraints = self.graph_constraints();
        p.constraints.extend(extra);
        let r = solve(&p, Some(theta))?;
        if r.status == SolveStatus::Infeasible || r.x.iter().any(|v| !v.is_finite()) {
            return Ok(None);
        }
        Ok(Some(r.x))
    }

    fn fit_map(&self, warm: Option<&MapEstimate>) -> Result<MapEstimate> {
        let m = self.m();
        let n = self.n;
        let rows = self.rows;
        let cfg = &self.inf.config;
        let kind = &self.inf.kind;

        let mut u = self.warm_values(warm.map(|w| &w.u_predictor), &self.unit, rows, &self.u_kinv);
        let mut graph: Option<DMatrix<f64>> = match kind {
            ModelKind::Coupled => Some(
                warm.and_then(|w| w.graph.as_ref())
                    .map(|g| g.matrix().clone())
                    .unwrap_or_else(|| DMatrix::from_element(n, n, 1.0 / n as f64)),
            ),
            ModelKind::KnownGraph(g) => Some(g.matrix().clone()),
            _ => None,
        };

        let (v, ll_private, ll_public);
        if m == 0 {
            v = DMatrix::zeros(n, 0);
            ll_private = 0.0;
            ll_public = 0.0;
        } else {
            match kind {
                ModelKind::Coupled | ModelKind::KnownGraph(_) => {
                    let mut prev = f64::NEG_INFINITY;
                    let sweeps = if matches!(kind, ModelKind::Coupled) && n > 1 { cfg.map_sweeps } else { 1 };
                    for _ in 0..sweeps {
                        let a = graph.as_ref().expect("graph present");
                        let f = LikFn {
                            blocks: vec![
                                self.block(&self.private, Mix::Direct, 0, m, rows),
                                self.block(&self.public, Mix::Graph(a.clone()), 0, m, rows),
                            ],
                            constant: 0.0,
                        };
                        let mut p = ConvexProgram::new(rows * m, Objective::Concave(Arc::new(f)));
                        p.settings = self.settings();
                        p.constraints = self.balls(0, rows, m, &self.u_kinv);
                        let r = solve(&p, Some(&flatten(&u)))?;
                        self.check(&r, "MAP utility step")?;
                        u = unflatten(&r.x, 0, rows, m);
                        if !matches!(kind, ModelKind::Coupled) || n == 1 {
                            break;
                        }
                        let gf = GraphStepFn::new(&self.public, &u, Some(cfg.prior.clone()), 0.0);
                        if let Some(th) = self.solve_graph_step(gf, vec![], &free_from_graph(a))? {
                            graph = Some(graph_from_free(&th, n));
                        }
                        let a = graph.as_ref().expect("graph present");
                        let obj = self.ll_direct(&self.private, &u) + self.ll_graph(&self.public, a, &u)
                            + log_prior_unchecked(a, &cfg.prior);
                        if (obj - prev).abs() < cfg.sweep_tol {
                            break;
                        }
                        prev = obj;
                    }
                    let a = graph.as_ref().expect("graph present");
                    v = a * &u;
                    ll_private = self.ll_direct(&self.private, &u);
                    ll_public = self.ll_graph(&self.public, a, &u);
                }
                ModelKind::Independent => {
                    let wv = self.warm_values(warm.map(|w| &w.v_predictor), &self.unit, n, &self.agent_kinv);
                    let f = LikFn {
                        blocks: vec![
                            self.block(&self.private, Mix::Direct, 0, m, rows),
                            self.block(&self.public, Mix::Direct, rows * m, m, n),
                        ],
                        constant: 0.0,
                    };
                    let mut p = ConvexProgram::new((rows + n) * m, Objective::Concave(Arc::new(f)));
                    p.settings = self.settings();
                    p.constraints = self.balls(0, rows, m, &self.u_kinv);
                    p.constraints.extend(self.balls(rows * m, n, m, &self.agent_kinv));
                    let mut x0 = flatten(&u).as_slice().to_vec();
                    x0.extend_from_slice(flatten(&wv).as_slice());
                    let r = solve(&p, Some(&DVector::from_vec(x0)))?;
                    self.check(&r, "MAP fit")?;
                    u = unflatten(&r.x, 0, rows, m);
                    v = unflatten(&r.x, rows * m, n, m);
                    ll_private = self.ll_direct(&self.private, &u);
                    ll_public = self.ll_direct(&self.public, &v);
                }
                ModelKind::Pooled => {
                    let f = LikFn {
                        blocks: vec![self.block(&self.pooled, Mix::Direct, 0, m, 1)],
                        constant: 0.0,
                    };
                    let mut p = ConvexProgram::new(m, Objective::Concave(Arc::new(f)));
                    p.settings = self.settings();
                    p.constraints = self.balls(0, 1, m, &self.u_kinv);
                    let r = solve(&p, Some(&flatten(&u)))?;
                    self.check(&r, "MAP fit")?;
                    u = unflatten(&r.x, 0, 1, m);
                    v = DMatrix::from_fn(n, m, |_, c| u[(0, c)]);
                    ll_private = 0.0;
                    ll_public = self.ll_direct(&self.pooled, &u);
                }
            }
        }

        let (v_pub, ll_pub_only) = if m == 0 {
            (DMatrix::zeros(n, 0), 0.0)
        } else if matches!(kind, ModelKind::Independent) {
            (v.clone(), ll_public)
        } else {
            let w0 = self.warm_values(warm.map(|w| &w.v_public_only_predictor), &self.unit, n, &self.agent_kinv);
            let f = LikFn {
                blocks: vec![self.block(&self.public, Mix::Direct, 0, m, n)],
                constant: 0.0,
            };
            let mut p = ConvexProgram::new(n * m, Objective::Concave(Arc::new(f)));
            p.settings = self.settings();
            p.constraints = self.balls(0, n, m, &self.agent_kinv);
            let r = solve(&p, Some(&flatten(&w0)))?;
            self.check(&r, "public-only fit")?;
            let vp = unflatten(&r.x, 0, n, m);
            let ll = self.ll_direct(&self.public, &vp);
            (vp, ll)
        };

        let lp = match (&graph, kind) {
            (Some(a), ModelKind::Coupled) | (Some(a), ModelKind::KnownGraph(_)) => log_prior_unchecked(a, &cfg.prior),
            _ => 0.0,
        };
        let social = match kind {
            ModelKind::Coupled => graph.map(|a| SocialGraph::from_parts_unchecked(a, cfg.prior.clone())),
            ModelKind::KnownGraph(g) => Some(g.clone()),
            _ => None,
        };
        let v_kernels_kinv = &self.agent_kinv;
        let v_predictor = match kind {
            ModelKind::Pooled => Predictor::new(
                vec![self.u_kernels[0].clone(); n],
                self.unit.clone(),
                &vec![self.u_kinv[0].clone(); n],
                &v,
            ),
            ModelKind::Independent => Predictor::new(self.agent_kernels.clone(), self.unit.clone(), v_kernels_kinv, &v),
            _ => {
                // v = A u holds for predictions as well
                let up = Predictor::new(self.u_kernels.clone(), self.unit.clone(), &self.u_kinv, &u);
                let a = social.as_ref().expect("coupled models carry a graph").matrix();
                Predictor {
                    kernels: up.kernels.clone(),
                    unit_points: up.unit_points.clone(),
                    alpha: a * &up.alpha,
                }
            }
        };
        let mut v_predictor = v_predictor;
        if !matches!(kind, ModelKind::Pooled | ModelKind::Independent) && self.u_kernels.windows(2).any(|w| w[0] != w[1]) {
            // mixed kernels: fall back to interpolating the public values
            v_predictor = Predictor::new(self.agent_kernels.clone(), self.unit.clone(), v_kernels_kinv, &v);
        }
        Ok(MapEstimate {
            points: Vec::new(),
            u_predictor: Predictor::new(self.u_kernels.clone(), self.unit.clone(), &self.u_kinv, &u),
            v_public_only_predictor: Predictor::new(self.agent_kernels.clone(), self.unit.clone(), v_kernels_kinv, &v_pub),
            v_predictor,
            log_posterior: ll_private + ll_public + lp,
            ll_private,
            ll_public,
            log_prior: lp,
            v_public_only: v_pub,
            ll_public_only: ll_pub_only,
            norm_bound: self.norm_bound,
            graph: social,
            u,
            v,
        })
        .map(|mut e| {
            e.points = self.unit.iter().map(|p| self.inf.config.domain.from_unit(p.coords())).collect();
            e
        })
    }

    fn ll_direct(&self, terms: &[PairTerm], u: &DMatrix<f64>) -> f64 {
        terms.iter().map(|t| t.value(u[(t.row, t.a)] - u[(t.row, t.b)])).sum()
    }

    fn ll_graph(&self, terms: &[PairTerm], a: &DMatrix<f64>, u: &DMatrix<f64>) -> f64 {
        terms
            .iter()
            .map(|t| {
                let d: f64 = (0..u.nrows()).map(|j| a[(t.row, j)] * (u[(j, t.a)] - u[(j, t.b)])).sum();
                t.value(d)
            })
            .sum()
    }

    /// Maximises `Σ coef · U[row, point]` over the joint confidence set of
    /// private utilities. Returns the value and the maximising values.
    fn optimise_u(&self, ext: &Extended, est: &MapEstimate, target: &[(usize, usize, f64)]) -> Result<(f64, DMatrix<f64>)> {
        let cfg = &self.inf.config;
        let m = ext.m;
        let rows = self.rows;
        let n = self.n;
        let b = self.betas();
        let mut c = DVector::zeros(rows * m);
        for &(r, p, w) in target {
            c[r * m + p] += w;
        }
        let mut u = self.warm_values(Some(&est.u_predictor), &ext.unit, rows, &ext.u_kinv);
        let balls = self.balls(0, rows, m, &ext.u_kinv);

        match &self.inf.kind {
            ModelKind::Pooled => {
                let f = Arc::new(LikFn {
                    blocks: vec![self.block(&self.pooled, Mix::Direct, 0, m, 1)],
                    constant: 0.0,
                });
                let mut p = ConvexProgram::new(m, Objective::Linear(c.clone()));
                p.settings = self.settings();
                p.constraints = balls;
                if !self.pooled.is_empty() {
                    p.constraints.push(Constraint::LowerBound { func: f, threshold: est.ll_public - b.public });
                }
                let r = solve(&p, Some(&flatten(&u)))?;
                self.check(&r, "confidence program")?;
                Ok((c.dot(&r.x), unflatten(&r.x, 0, 1, m)))
            }
            ModelKind::Independent => {
                let f = Arc::new(LikFn {
                    blocks: vec![self.block(&self.private, Mix::Direct, 0, m, rows)],
                    constant: 0.0,
                });
                let mut p = ConvexProgram::new(rows * m, Objective::Linear(c.clone()));
                p.settings = self.settings();
                p.constraints = balls;
                if !self.private.is_empty() {
                    p.constraints.push(Constraint::LowerBound { func: f, threshold: est.ll_private - b.private });
                }
                let r = solve(&p, Some(&flatten(&u)))?;
                self.check(&r, "confidence program")?;
                Ok((c.dot(&r.x), unflatten(&r.x, 0, rows, m)))
            }
            ModelKind::Coupled | ModelKind::KnownGraph(_) => {
                let known = self.fixed_graph();
                let mut a = known
                    .clone()
                    .or_else(|| est.graph.as_ref().map(|g| g.matrix().clone()))
                    .unwrap_or_else(|| DMatrix::from_element(n, n, 1.0 / n as f64));
                let joint_threshold = est.log_posterior - b.joint;
                let mut best = f64::NEG_INFINITY;
                let sweeps = if known.is_none() && n > 1 { cfg.bound_sweeps } else { 1 };
                for s in 0..sweeps {
                    let lp = log_prior_unchecked(&a, &cfg.prior);
                    let joint = Arc::new(LikFn {
                        blocks: vec![
                            self.block(&self.private, Mix::Direct, 0, m, rows),
                            self.block(&self.public, Mix::Graph(a.clone()), 0, m, rows),
                        ],
                        constant: lp,
                    });
                    let publ = Arc::new(LikFn {
                        blocks: vec![self.block(&self.public, Mix::Graph(a.clone()), 0, m, rows)],
                        constant: 0.0,
                    });
                    let mut p = ConvexProgram::new(rows * m, Objective::Linear(c.clone()));
                    p.settings = self.settings();
                    p.constraints = balls.clone();
                    if !self.private.is_empty() || !self.public.is_empty() {
                        p.constraints.push(Constraint::LowerBound { func: joint, threshold: joint_threshold });
                    }
                    if !self.private.is_empty() {
                        let privf = Arc::new(LikFn {
                            blocks: vec![self.block(&self.private, Mix::Direct, 0, m, rows)],
                            constant: 0.0,
                        });
                        p.constraints.push(Constraint::LowerBound { func: privf, threshold: est.ll_private - b.private });
                    }
                    if !self.public.is_empty() {
                        p.constraints.push(Constraint::LowerBound { func: publ, threshold: est.ll_public - b.public });
                    }
                    let r = solve(&p, Some(&flatten(&u)))?;
                    if r.status == SolveStatus::Infeasible && s > 0 {
                        break;
                    }
                    self.check(&r, "confidence program")?;
                    let val = c.dot(&r.x);
                    u = unflatten(&r.x, 0, rows, m);
                    let improved = val > best + cfg.sweep_tol;
                    best = best.max(val);
                    if !improved || s + 1 == sweeps {
                        break;
                    }
                    // graph step: maximise slack of the public and joint constraints
                    let priv_ll = self.ll_direct(&self.private, &u);
                    let pub_terms = self.public.as_slice();
                    let obj = GraphStepFn::new(pub_terms, &u, Some(cfg.prior.clone()), 0.0);
                    let pub_only = GraphStepFn::new(pub_terms, &u, None, 0.0);
                    let joint_a = GraphStepFn::new(pub_terms, &u, Some(cfg.prior.clone()), priv_ll);
                    let extra = vec![
                        Constraint::LowerBound { func: Arc::new(pub_only), threshold: est.ll_public - b.public },
                        Constraint::LowerBound { func: Arc::new(joint_a), threshold: joint_threshold },
                    ];
                    match self.solve_graph_step(obj, extra, &free_from_graph(&a))? {
                        Some(th) => a = graph_from_free(&th, n),
                        None => break,
                    }
                }
                Ok((best, u))
            }
        }
    }

    /// Maximises `Σ coef · V[agent, point]` over the public-only set.
    fn optimise_v(&self, ext: &Extended, est: &MapEstimate, target: &[(usize, usize, f64)]) -> Result<f64> {
        let m = ext.m;
        let n = self.n;
        let b = self.betas();
        let mut c = DVector::zeros(n * m);
        for &(r, p, w) in target {
            c[r * m + p] += w;
        }
        let v = self.warm_values(Some(&est.v_public_only_predictor), &ext.unit, n, &ext.agent_kinv);
        let f = Arc::new(LikFn {
            blocks: vec![self.block(&self.public, Mix::Direct, 0, m, n)],
            constant: 0.0,
        });
        let mut p = ConvexProgram::new(n * m, Objective::Linear(c.clone()));
        p.settings = self.settings();
        p.constraints = self.balls(0, n, m, &ext.agent_kinv);
        if !self.public.is_empty() {
            p.constraints.push(Constraint::LowerBound { func: f, threshold: est.ll_public_only - b.public });
        }
        let r = solve(&p, Some(&flatten(&v)))?;
        self.check(&r, "public confidence program")?;
        Ok(c.dot(&r.x))
    }

    fn width(&self, est: &MapEstimate, x: &OptionPoint, x_prev: &OptionPoint, channel: WidthChannel) -> Result<WidthReport> {
        let ext = self.extend(&[x.clone(), x_prev.clone()])?;
        let (ia, ib) = (ext.extra_index[0], ext.extra_index[1]);
        let rows = match channel {
            WidthChannel::U => self.rows,
            WidthChannel::V => self.n,
        };
        if ia == ib {
            return Ok(WidthReport {
                lower: vec![0.0; rows],
                upper: vec![0.0; rows],
                width: 0.0,
            });
        }
        let mut lower = Vec::with_capacity(rows);
        let mut upper = Vec::with_capacity(rows);
        for r in 0..rows {
            let up = [(r, ia, 1.0), (r, ib, -1.0)];
            let lo = [(r, ia, -1.0), (r, ib, 1.0)];
            let (hi, lo) = match channel {
                WidthChannel::U => (self.optimise_u(&ext, est, &up)?.0, -self.optimise_u(&ext, est, &lo)?.0),
                WidthChannel::V => (self.optimise_v(&ext, est, &up)?, -self.optimise_v(&ext, est, &lo)?),
            };
            upper.push(hi);
            lower.push(lo.min(hi));
        }
        let width = upper.iter().zip(&lower).map(|(h, l)| (h - l) * (h - l)).sum::<f64>().sqrt();
        Ok(WidthReport { lower, upper, width })
    }

    fn acquisition(&self, est: &MapEstimate, x: &OptionPoint, x_prev: &OptionPoint) -> Result<f64> {
        let ext = self.extend(&[x.clone(), x_prev.clone()])?;
        let (ia, ib) = (ext.extra_index[0], ext.extra_index[1]);
        if ia == ib {
            return Ok(0.0);
        }
        let rule = self.inf.rule();
        let domain = &self.inf.config.domain;
        let mut wa = rule.agent_weights(&est.predict_u(domain, x));
        let mut wb = rule.agent_weights(&est.predict_u(domain, x_prev));
        let mut best = f64::NEG_INFINITY;
        for pass in 0..2 {
            let target: Vec<(usize, usize, f64)> = (0..self.rows)
                .flat_map(|r| [(r, ia, wa[r]), (r, ib, -wb[r])])
                .collect();
            let (_, u) = self.optimise_u(&ext, est, &target)?;
            let ua: Vec<f64> = (0..self.rows).map(|r| u[(r, ia)]).collect();
            let ub: Vec<f64> = (0..self.rows).map(|r| u[(r, ib)]).collect();
            let value = rule.aggregate_unchecked(&ua) - rule.aggregate_unchecked(&ub);
            best = best.max(value);
            let (na, nb) = (rule.agent_weights(&ua), rule.agent_weights(&ub));
            if pass == 1 || (na == wa && nb == wb) {
                break;
            }
            wa = na;
            wb = nb;
        }
        Ok(best)
    }

    /// Quadratic surrogate of the acquisition for screening candidates.
    fn surrogate(&self, est: &MapEstimate) -> Result<Surrogate> {
        let m = self.m();
        let rows = self.rows;
        let dim = rows * m;
        let mut prec = DMatrix::zeros(dim, dim);
        if m > 0 {
            let f = match &self.inf.kind {
                ModelKind::Pooled => LikFn {
                    blocks: vec![self.block(&self.pooled, Mix::Direct, 0, m, 1)],
                    constant: 0.0,
                },
                ModelKind::Independent => LikFn {
                    blocks: vec![self.block(&self.private, Mix::Direct, 0, m, rows)],
                    constant: 0.0,
                },
                _ => {
                    let a = est
                        .graph
                        .as_ref()
                        .map(|g| g.matrix().clone())
                        .unwrap_or_else(|| DMatrix::from_element(self.n, self.n, 1.0 / self.n as f64));
                    LikFn {
                        blocks: vec![
                            self.block(&self.private, Mix::Direct, 0, m, rows),
                            self.block(&self.public, Mix::Graph(a), 0, m, rows),
                        ],
                        constant: 0.0,
                    }
                }
            };
            use crate::solver::ConcaveFn;
            f.add_hessian(&flatten(&est.u), -1.0, &mut prec);
            let l2 = self.norm_bound * self.norm_bound;
            for r in 0..rows {
                let k = &self.u_kinv[r];
                for i in 0..m {
                    for j in 0..m {
                        prec[(r * m + i, r * m + j)] += k[(i, j)] / l2;
                    }
                }
            }
        }
        let cov = if dim == 0 {
            DMatrix::zeros(0, 0)
        } else {
            let mut p = prec.clone();
            let scale = (0..dim).map(|i| p[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
            let mut reg = 0.0;
            loop {
                if let Some(ch) = p.clone().cholesky() {
                    break ch.inverse();
                }
                reg = if reg == 0.0 { 1e-10 * scale } else { reg * 10.0 };
                p = prec.clone();
                for i in 0..dim {
                    p[(i, i)] += reg;
                }
            }
        };
        let b = self.betas();
        Ok(Surrogate {
            cov,
            u: flatten(&est.u),
            beta: b.joint,
        })
    }

    fn surrogate_value(&self, s: &Surrogate, est: &MapEstimate, unit_x: &OptionPoint, prev_index: Option<usize>, prev_pred: &[f64], prev_weights: &[f64]) -> f64 {
        let m = self.m();
        let rows = self.rows;
        let rule = self.inf.rule();
        let l2 = self.norm_bound * self.norm_bound;
        let pred = est.u_predictor.predict(unit_x);
        let w = rule.agent_weights(&pred);
        let mut g = DVector::zeros(rows * m);
        let mut extra_var = 0.0;
        for r in 0..rows {
            let k = &self.u_kernels[r];
            let kx = DVector::from_iterator(m, self.unit.iter().map(|p| k.eval_unchecked(unit_x.coords(), p.coords())));
            let cvec = if m > 0 { self.u_kinv[r].as_ref() * &kx } else { kx.clone() };
            let s2 = (k.eval_unchecked(unit_x.coords(), unit_x.coords()) - kx.dot(&cvec)).max(0.0);
            for p in 0..m {
                g[r * m + p] += w[r] * cvec[p];
            }
            if let Some(ib) = prev_index {
                g[r * m + ib] -= prev_weights[r];
            }
            extra_var += w[r] * w[r] * s2 * l2;
        }
        let mean: f64 = if m > 0 { g.dot(&s.u) } else { 0.0 };
        let mean = if prev_index.is_none() {
            mean - prev_pred.iter().zip(prev_weights).map(|(a, b)| a * b).sum::<f64>()
        } else {
            mean
        };
        let var = if m > 0 { (g.transpose() * &s.cov * &g)[(0, 0)] } else { 0.0 } + extra_var;
        mean + (2.0 * s.beta * var.max(0.0)).sqrt()
    }

    fn propose<R: Rng + ?Sized>(&self, est: &MapEstimate, x_prev: &OptionPoint, rng: &mut R) -> Result<Proposal> {
        let cfg = &self.inf.config;
        let domain = &cfg.domain;
        let d = domain.dim();
        let sur = self.surrogate(est)?;
        let unit_prev = domain.to_unit(x_prev);
        let prev_index = self.unit.iter().position(|p| p.sq_dist(&unit_prev) < 1e-20);
        let prev_pred = est.u_predictor.predict(&unit_prev);
        let prev_weights = self.inf.rule().agent_weights(&prev_pred);
        let score = |u: &[f64]| -> f64 {
            let up = OptionPoint(u.to_vec());
            if up.sq_dist(&unit_prev) < 1e-12 {
                return f64::NEG_INFINITY;
            }
            self.surrogate_value(&sur, est, &up, prev_index, &prev_pred, &prev_weights)
        };

        let shift: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let mut cands: Vec<Vec<f64>> = halton(cfg.acq_candidates, d, &shift);
        for p in &self.unit {
            cands.push(p.0.clone());
        }
        let mut scored: Vec<(f64, Vec<f64>)> = cands.into_iter().map(|c| (score(&c), c)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        scored.truncate(cfg.acq_refine.max(1));

        let mut refined: Vec<(f64, Vec<f64>)> = Vec::new();
        for (mut val, mut u) in scored {
            let mut step = 0.05;
            while step >= cfg.refine_min_step {
                let mut moved = false;
                for k in 0..d {
                    for dir in [1.0, -1.0] {
                        let mut t = u.clone();
                        t[k] = (t[k] + dir * step).clamp(0.0, 1.0);
                        let v = score(&t);
                        if v > val + 1e-12 {
                            val = v;
                            u = t;
                            moved = true;
                        }
                    }
                }
                if !moved {
                    step *= 0.5;
                }
            }
            if !refined.iter().any(|(_, r)| OptionPoint(r.clone()).sq_dist(&OptionPoint(u.clone())) < 1e-12) {
                refined.push((val, u));
            }
        }
        refined.sort_by(|a, b| b.0.total_cmp(&a.0));
        refined.truncate(cfg.acq_exact.max(1));

        let mut best: Option<Proposal> = None;
        for (_, u) in refined {
            let x = domain.from_unit(&u);
            if &x == x_prev {
                continue;
            }
            let acq = self.acquisition(est, &x, x_prev)?;
            if best.as_ref().map_or(true, |b| acq > b.acquisition) {
                best = Some(Proposal { x, acquisition: acq });
            }
        }
        match best {
            Some(p) => Ok(p),
            None => {
                // every candidate collapsed onto the previous point
                let u: Vec<f64> = unit_prev.0.iter().map(|v| if *v < 0.5 { v + 0.5 } else { v - 0.5 }).collect();
                let x = domain.from_unit(&u);
                let acq = self.acquisition(est, &x, x_prev)?;
                Ok(Proposal { x, acquisition: acq })
            }
        }
    }
}

struct Surrogate {
    cov: DMatrix<f64>,
    u: DVector<f64>,
    beta: f64,
}
