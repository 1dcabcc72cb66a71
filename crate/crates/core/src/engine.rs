//! Round-by-round state machine: propose a pair, take the public vote,
//! decide whether a private vote is needed, refit, and report.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result, SboError};
use crate::inference::{
    BetaMode, BetaSchedule, Inference, InferenceConfig, MapEstimate, ModelKind, VoteData, WidthChannel,
    DEFAULT_LENGTHSCALE,
};
use crate::kernels::KernelSpec;
use crate::point::{Domain, OptionPoint};
use crate::preference::{Channel, VoteRecord};
use crate::sim::{oracle_vote, regret_series, SyntheticTask};
use crate::social_graph::{validate, GraphPrior, SocialGraph};
use crate::solver::SolverSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Sbo,
    Oracle,
    SingleAgent,
    Independent,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Sbo,
        BaselineKind::Oracle,
        BaselineKind::SingleAgent,
        BaselineKind::Independent,
    ];

    /// Whether the baseline ever asks for private votes.
    pub fn queries_private(self) -> bool {
        matches!(self, BaselineKind::Sbo | BaselineKind::Independent)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Sbo => "sbo",
            BaselineKind::Oracle => "oracle",
            BaselineKind::SingleAgent => "single",
            BaselineKind::Independent => "independent",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = SboError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sbo" => Ok(BaselineKind::Sbo),
            "oracle" => Ok(BaselineKind::Oracle),
            "single" | "single_agent" => Ok(BaselineKind::SingleAgent),
            "independent" => Ok(BaselineKind::Independent),
            other => arg(format!("unknown baseline {other:?}")),
        }
    }
}

fn default_rho() -> f64 {
    1.0
}
fn default_q() -> f64 {
    0.5
}
fn default_kernel() -> KernelSpec {
    KernelSpec::rbf(DEFAULT_LENGTHSCALE)
}
fn default_norm_bound() -> f64 {
    1.5
}
fn default_beta0() -> f64 {
    0.5
}
fn default_beta_mode() -> BetaMode {
    BetaMode::Fixed
}
fn default_acq_candidates() -> usize {
    128
}
fn default_true() -> bool {
    true
}
fn default_retune_every() -> usize {
    5
}
fn default_grid() -> Vec<f64> {
    vec![0.05, 0.1, 0.2, 0.4, DEFAULT_LENGTHSCALE]
}
fn default_loo_folds() -> usize {
    6
}
fn default_baseline() -> BaselineKind {
    BaselineKind::Sbo
}

/// Session configuration as accepted from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub n: usize,
    pub domain: Domain,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_kernel")]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub agent_kernels: Option<Vec<KernelSpec>>,
    #[serde(default = "default_norm_bound")]
    pub norm_bound: f64,
    #[serde(default = "default_beta0")]
    pub beta0: f64,
    #[serde(default = "default_beta_mode")]
    pub beta_mode: BetaMode,
    #[serde(default = "default_acq_candidates")]
    pub acq_candidates: usize,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default = "default_baseline")]
    pub baseline: BaselineKind,
    /// Graph rows for the oracle baseline.
    #[serde(default)]
    pub known_graph: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_true")]
    pub adapt_norm: bool,
    /// Leave-one-out kernel tuning cadence in rounds; 0 disables it.
    #[serde(default = "default_retune_every")]
    pub retune_every: usize,
    #[serde(default = "default_grid")]
    pub lengthscale_grid: Vec<f64>,
    #[serde(default = "default_loo_folds")]
    pub loo_folds: usize,
    /// Ask for a private vote every round.
    #[serde(default)]
    pub force_private: bool,
    /// Optional human-readable option labels for front ends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl SessionConfig {
    pub fn new(n: usize, domain: Domain) -> Self {
        Self {
            n,
            domain,
            rho: default_rho(),
            q: default_q(),
            seed: 0,
            kernel: default_kernel(),
            agent_kernels: None,
            norm_bound: default_norm_bound(),
            beta0: default_beta0(),
            beta_mode: default_beta_mode(),
            acq_candidates: default_acq_candidates(),
            solver: SolverSettings::default(),
            baseline: BaselineKind::Sbo,
            known_graph: None,
            adapt_norm: true,
            retune_every: default_retune_every(),
            lengthscale_grid: default_grid(),
            loo_folds: default_loo_folds(),
            force_private: false,
            labels: None,
        }
    }

    /// Configuration for a simulated run of `kind` on `task`.
    pub fn for_task(task: &SyntheticTask, kind: BaselineKind, seed: u64) -> Self {
        let mut c = Self::new(task.n, task.domain.clone());
        c.rho = task.rho;
        c.seed = seed;
        c.baseline = kind;
        if kind == BaselineKind::Oracle {
            c.known_graph = Some(task.graph.rows());
        }
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| SboError::Argument(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// Checks every field; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: SboError| -> SboError {
            let msg = match e {
                SboError::Argument(m) | SboError::State(m) | SboError::Protocol(m) | SboError::Infeasible(m) => m,
                SboError::Numeric { message, .. } => message,
            };
            SboError::Argument(format!("{name}: {msg}"))
        };
        if self.n == 0 {
            return arg("n: need at least one agent");
        }
        self.domain.validate().map_err(|e| field("domain", e))?;
        crate::aggregation::gsf_weights(self.rho, self.n).map_err(|e| field("rho", e))?;
        if !(self.q > 0.0 && self.q < 1.0) {
            return arg("q: must lie in (0, 1)");
        }
        self.kernel.validate().map_err(|e| field("kernel", e))?;
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return arg("beta0: must be positive");
        }
        if !(self.norm_bound > 0.0 && self.norm_bound.is_finite()) {
            return arg("norm_bound: must be positive");
        }
        if self.acq_candidates == 0 {
            return arg("acq_candidates: must be positive");
        }
        if self.lengthscale_grid.iter().any(|l| !(*l > 0.0)) {
            return arg("lengthscale_grid: lengthscales must be positive");
        }
        if let Some(ls) = &self.labels {
            if ls.is_empty() {
                return arg("labels: empty label list");
            }
        }
        match (self.baseline, &self.known_graph) {
            (BaselineKind::Oracle, None) => return arg("known_graph: the oracle baseline needs the true graph"),
            (_, Some(rows)) => {
                let g = SocialGraph::from_rows(rows).map_err(|e| field("known_graph", e))?;
                if g.n() != self.n {
                    return arg("known_graph: size differs from n");
                }
            }
            _ => {}
        }
        self.inference_config().validate().map_err(|e| field("config", e))?;
        Ok(())
    }

    pub fn inference_config(&self) -> InferenceConfig {
        let mut c = InferenceConfig::new(self.n, self.domain.clone());
        c.rho = self.rho;
        c.kernel = self.kernel.clone();
        c.agent_kernels = self.agent_kernels.clone();
        c.norm_bound = self.norm_bound;
        c.beta = BetaSchedule {
            beta0: self.beta0,
            mode: self.beta_mode,
        };
        c.prior = GraphPrior::default_for(self.n);
        c.solver = self.solver.clone();
        c.acq_candidates = self.acq_candidates;
        c
    }

    fn model_kind(&self) -> Result<ModelKind> {
        Ok(match self.baseline {
            BaselineKind::Sbo => ModelKind::Coupled,
            BaselineKind::Independent => ModelKind::Independent,
            BaselineKind::SingleAgent => ModelKind::Pooled,
            BaselineKind::Oracle => {
                let rows = self
                    .known_graph
                    .as_ref()
                    .ok_or_else(|| SboError::Argument("known_graph: missing".into()))?;
                ModelKind::KnownGraph(SocialGraph::from_rows(rows)?)
            }
        })
    }
}

/// `w_u ≥ max(t^{−q}, w_v)`.
pub fn needs_private(w_u: f64, w_v: f64, t: usize, q: f64) -> bool {
    let threshold = (t.max(1) as f64).powf(-q);
    w_u >= threshold.max(w_v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub x: OptionPoint,
    pub acq: f64,
    /// `None` when the round never asked whether to query private votes.
    pub w_u: Option<f64>,
    pub w_v: Option<f64>,
    pub threshold: f64,
    pub private: bool,
    pub regret: Option<f64>,
    pub cum_regret: Option<f64>,
    pub simple_regret: Option<f64>,
    pub qu_count: usize,
    /// Per-agent bounds on the private utility gap between `x` and the
    /// previous point, when widths were computed. Not exported to CSV.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gap_lower: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gap_upper: Vec<f64>,
}

pub const TRACE_HEADER: &str = "t,x,acq,w_u,w_v,threshold,private,regret,cum_regret,simple_regret,qu_count";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.t,
            r.x.joined(),
            r.acq,
            opt(r.w_u),
            opt(r.w_v),
            r.threshold,
            u8::from(r.private),
            opt(r.regret),
            opt(r.cum_regret),
            opt(r.simple_regret),
            r.qu_count
        ));
    }
    out
}

/// Fills the regret columns from the task's ground truth.
pub fn compute_metrics(task: &SyntheticTask, trace: &mut [TraceRow]) {
    let xs: Vec<OptionPoint> = trace.iter().map(|r| r.x.clone()).collect();
    let s = regret_series(task, &xs);
    for (k, r) in trace.iter_mut().enumerate() {
        r.regret = Some(s.instant[k]);
        r.cum_regret = Some(s.cumulative[k]);
        r.simple_regret = Some(s.simple[k]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    AwaitingPublic,
    AwaitingPrivate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingRound {
    pub x: OptionPoint,
    pub acq: f64,
    pub w_u: Option<f64>,
    pub w_v: Option<f64>,
    pub threshold: f64,
    pub private: bool,
    pub gap_lower: Vec<f64>,
    pub gap_upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub config: SessionConfig,
    pub inference: Inference,
    pub data: VoteData,
    /// Completed rounds.
    pub round: usize,
    /// `x_0, x_1, …` in query order.
    pub queried: Vec<OptionPoint>,
    pub phase: Phase,
    pub pending: Option<PendingRound>,
    pub estimate: MapEstimate,
    pub rng: ChaCha8Rng,
    pub trace: Vec<TraceRow>,
    pub warnings: Vec<String>,
}

impl SessionState {
    pub fn new(config: SessionConfig) -> Result<Self> {
        config.validate()?;
        let kind = config.model_kind()?;
        let mut warnings = Vec::new();
        if let ModelKind::KnownGraph(g) = &kind {
            if !validate(g).invertible {
                warnings.push("known graph is singular; private utilities are not identifiable".into());
            }
        }
        let inference = Inference::new(config.inference_config(), kind)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let x0 = config.domain.sample_uniform(&mut rng);
        let data = VoteData::new(config.n);
        let estimate = inference.fit_map_any(&data, None)?;
        Ok(Self {
            config,
            inference,
            data,
            round: 0,
            queried: vec![x0],
            phase: Phase::Idle,
            pending: None,
            estimate,
            rng,
            trace: Vec::new(),
            warnings,
        })
    }

    pub fn x_prev(&self) -> &OptionPoint {
        self.queried.last().expect("x_0 always present")
    }

    pub fn private_count(&self) -> usize {
        self.data.count(Channel::Private)
    }

    pub fn public_count(&self) -> usize {
        self.data.count(Channel::Public)
    }

    pub fn awaiting(&self) -> Option<Channel> {
        match self.phase {
            Phase::Idle => None,
            Phase::AwaitingPublic => Some(Channel::Public),
            Phase::AwaitingPrivate => Some(Channel::Private),
        }
    }

    /// The pair `(x_t, x_{t−1})` of the open round, if any.
    pub fn current_pair(&self) -> Option<(OptionPoint, OptionPoint)> {
        self.pending.as_ref().map(|p| (p.x.clone(), self.x_prev().clone()))
    }

    /// Proposes `x_t` for the next round; repeated calls return the open pair.
    pub fn propose_next(&mut self) -> Result<OptionPoint> {
        if let Some(p) = &self.pending {
            return Ok(p.x.clone());
        }
        let x_prev = self.x_prev().clone();
        let prop = self
            .inference
            .propose(&self.data, &self.estimate, &x_prev, &mut self.rng)?;
        self.pending = Some(PendingRound {
            x: prop.x.clone(),
            acq: prop.acquisition,
            w_u: None,
            w_v: None,
            threshold: ((self.round + 1) as f64).powf(-self.config.q),
            private: false,
            gap_lower: Vec::new(),
            gap_upper: Vec::new(),
        });
        self.phase = Phase::AwaitingPublic;
        Ok(prop.x)
    }

    fn check_vote(&self, v: &VoteRecord) -> Result<()> {
        let expected = match self.phase {
            Phase::Idle => return Err(SboError::Protocol("no pair is open; propose first".into())),
            Phase::AwaitingPublic => Channel::Public,
            Phase::AwaitingPrivate => Channel::Private,
        };
        if v.channel != expected {
            return Err(SboError::Protocol(format!(
                "round {} expects a {:?} vote, got {:?}",
                self.round + 1,
                expected,
                v.channel
            )));
        }
        let (x, xp) = self.current_pair().expect("pending pair");
        if v.t != self.round + 1 {
            return Err(SboError::Protocol(format!("vote for round {} during round {}", v.t, self.round + 1)));
        }
        if v.x != x || v.xp != xp {
            return Err(SboError::Protocol("vote pair differs from the open pair".into()));
        }
        v.validate(self.config.n)
    }

    pub fn ingest_vote(&mut self, v: VoteRecord) -> Result<()> {
        self.check_vote(&v)?;
        let channel = v.channel;
        self.data.push(v)?;
        self.estimate = self.inference.fit_map(&self.data, Some(&self.estimate))?;
        match channel {
            Channel::Public => {
                let private = self.decide_private()?;
                if private {
                    self.phase = Phase::AwaitingPrivate;
                } else {
                    self.close_round()?;
                }
            }
            Channel::Private => self.close_round()?,
        }
        Ok(())
    }

    fn decide_private(&mut self) -> Result<bool> {
        let kind = self.config.baseline;
        let t = self.round + 1;
        let (x, xp) = self.current_pair().expect("pending pair");
        let mut w = (None, None);
        let mut gaps = (Vec::new(), Vec::new());
        let private = if !kind.queries_private() {
            false
        } else if self.config.force_private {
            true
        } else {
            let wu = self
                .inference
                .projection_width(&self.data, &self.estimate, &x, &xp, WidthChannel::U)?;
            let wv = self
                .inference
                .projection_width(&self.data, &self.estimate, &x, &xp, WidthChannel::V)?;
            w = (Some(wu.width), Some(wv.width));
            gaps = (wu.lower, wu.upper);
            needs_private(wu.width, wv.width, t, self.config.q)
        };
        let p = self.pending.as_mut().expect("pending round");
        p.w_u = w.0;
        p.w_v = w.1;
        p.private = private;
        p.gap_lower = gaps.0;
        p.gap_upper = gaps.1;
        Ok(private)
    }

    fn close_round(&mut self) -> Result<()> {
        let p = self.pending.take().expect("pending round");
        self.round += 1;
        self.queried.push(p.x.clone());
        self.phase = Phase::Idle;
        self.adapt()?;
        self.trace.push(TraceRow {
            t: self.round,
            x: p.x,
            acq: p.acq,
            w_u: p.w_u,
            w_v: p.w_v,
            threshold: p.threshold,
            private: p.private,
            regret: None,
            cum_regret: None,
            simple_regret: None,
            qu_count: self.private_count(),
            gap_lower: p.gap_lower,
            gap_upper: p.gap_upper,
        });
        Ok(())
    }

    fn adapt(&mut self) -> Result<()> {
        if self.config.adapt_norm {
            let (bound, est) = self.inference.adapt_norm_bound(&self.data, &self.estimate)?;
            if bound != self.inference.norm_bound {
                self.inference.norm_bound = bound;
                self.estimate = est;
            }
        }
        let every = self.config.retune_every;
        if every > 0
            && self.round % every == 0
            && self.data.votes().len() >= 3
            && self.config.agent_kernels.is_none()
            && self.config.lengthscale_grid.len() > 1
        {
            let k = self
                .inference
                .tune_kernel_loocv(&self.data, &self.config.lengthscale_grid, self.config.loo_folds)?;
            if k != self.inference.config.kernel {
                self.inference.config.kernel = k;
                self.estimate = self.inference.fit_map(&self.data, Some(&self.estimate))?;
            }
        }
        Ok(())
    }

    /// Queried point with the highest aggregated MAP utility; ties go to the
    /// earliest round.
    pub fn consensus_estimate(&self) -> Result<OptionPoint> {
        if self.round == 0 {
            return Err(SboError::State("no round has been completed".into()));
        }
        let rule = self.inference.rule();
        let d = &self.config.domain;
        let mut best: Option<(f64, &OptionPoint)> = None;
        for x in &self.queried {
            let s = rule.aggregate_unchecked(&self.estimate.predict_u(d, x));
            if best.map_or(true, |(b, _)| s > b + 1e-12) {
                best = Some((s, x));
            }
        }
        Ok(best.expect("queried is never empty").1.clone())
    }

    pub fn trace_csv(&self) -> String {
        trace_to_csv(&self.trace)
    }
}

/// Output of a simulated run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceRow>,
    pub state: SessionState,
}

/// Seed of the voting-oracle stream for a run seed.
pub fn vote_stream_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x5851_F42D)
}

/// Runs `iters` rounds of `config` against the task's simulated voters.
pub fn run_with_config(task: &SyntheticTask, config: SessionConfig, iters: usize) -> Result<RunOutput> {
    let mut state = SessionState::new(config)?;
    let mut votes = ChaCha8Rng::seed_from_u64(vote_stream_seed(state.config.seed));
    for _ in 0..iters {
        let x = state.propose_next()?;
        let xp = state.x_prev().clone();
        let t = state.round + 1;
        state.ingest_vote(oracle_vote(task, t, &x, &xp, Channel::Public, &mut votes))?;
        if state.phase == Phase::AwaitingPrivate {
            state.ingest_vote(oracle_vote(task, t, &x, &xp, Channel::Private, &mut votes))?;
        }
    }
    let mut trace = state.trace.clone();
    compute_metrics(task, &mut trace);
    state.trace = trace.clone();
    Ok(RunOutput { trace, state })
}

pub fn run_baseline(kind: BaselineKind, task: &SyntheticTask, iters: usize, seed: u64) -> Result<RunOutput> {
    run_with_config(task, SessionConfig::for_task(task, kind, seed), iters)
}
