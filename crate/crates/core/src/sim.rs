//! Synthetic tasks with known utilities and graph, a simulated voting
//! oracle, and regret metrics.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::GsfRule;
use crate::error::{arg, Result, SboError};
use crate::point::{halton, Domain, OptionPoint};
use crate::preference::{bt_prob, Channel, VoteRecord};
use crate::social_graph::{sample_prior, GraphPrior, SocialGraph};

/// Weighted Gaussian bump. With `normalised` the bump is a probability
/// density with standard deviation `sigma` in every coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub weight: f64,
    pub center: Vec<f64>,
    pub sigma: f64,
    pub normalised: bool,
}

impl Bump {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        let mut v = self.weight * (-sq / (2.0 * self.sigma * self.sigma)).exp();
        if self.normalised {
            v /= (self.sigma * (2.0 * PI).sqrt()).powi(x.len() as i32);
        }
        v
    }
}

/// `N(x; μ, σ)` with `σ` the standard deviation.
pub fn gaussian_density(x: f64, mean: f64, sd: f64) -> f64 {
    Bump {
        weight: 1.0,
        center: vec![mean],
        sigma: sd,
        normalised: true,
    }
    .eval(&[x])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityFn {
    pub bumps: Vec<Bump>,
    #[serde(default)]
    pub offset: f64,
}

impl UtilityFn {
    pub fn eval(&self, x: &OptionPoint) -> f64 {
        self.offset + self.bumps.iter().map(|b| b.eval(x.coords())).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphPreset {
    WishyWashy,
    Altruist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskSpec {
    Toy1,
    RandomGmm { n: usize, d: usize, seed: u64 },
    GraphPreset(GraphPreset),
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskSpec::Toy1 => write!(f, "toy1"),
            TaskSpec::RandomGmm { n, d, seed } => write!(f, "random_gmm({n},{d},{seed})"),
            TaskSpec::GraphPreset(GraphPreset::WishyWashy) => write!(f, "graph_preset(wishy-washy)"),
            TaskSpec::GraphPreset(GraphPreset::Altruist) => write!(f, "graph_preset(altruist)"),
        }
    }
}

impl FromStr for TaskSpec {
    type Err = SboError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "toy1" {
            return Ok(TaskSpec::Toy1);
        }
        let inner = |prefix: &str| -> Option<&str> {
            s.strip_prefix(prefix)
                .and_then(|r| r.strip_prefix('('))
                .and_then(|r| r.strip_suffix(')'))
        };
        if let Some(args) = inner("random_gmm") {
            let parts: Vec<&str> = args.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return arg("random_gmm takes (n, d, seed)");
            }
            let num = |p: &str| p.parse::<u64>().map_err(|_| SboError::Argument(format!("bad number {p:?}")));
            let (n, d, seed) = (num(parts[0])? as usize, num(parts[1])? as usize, num(parts[2])?);
            if n == 0 || d == 0 || d > 16 {
                return arg("random_gmm needs n >= 1 and 1 <= d <= 16");
            }
            return Ok(TaskSpec::RandomGmm { n, d, seed });
        }
        if let Some(kind) = inner("graph_preset") {
            return match kind.trim() {
                "wishy-washy" | "wishy_washy" => Ok(TaskSpec::GraphPreset(GraphPreset::WishyWashy)),
                "altruist" => Ok(TaskSpec::GraphPreset(GraphPreset::Altruist)),
                other => arg(format!("unknown graph preset {other:?}")),
            };
        }
        arg(format!("unknown task {s:?}"))
    }
}

/// A task with ground truth, for simulation only.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub name: String,
    pub domain: Domain,
    pub n: usize,
    pub utilities: Vec<UtilityFn>,
    pub graph: SocialGraph,
    pub rho: f64,
    pub grid: Vec<OptionPoint>,
    /// Social utility on the grid.
    pub social: Vec<f64>,
    pub x_star: OptionPoint,
    pub s_star: f64,
}

pub const GRID_1D: usize = 4001;
pub const GRID_ND: usize = 8192;

fn toy1_utilities() -> Vec<UtilityFn> {
    let mix = |parts: &[(f64, f64, f64)]| UtilityFn {
        bumps: parts
            .iter()
            .map(|&(w, mu, sd)| Bump {
                weight: w,
                center: vec![mu],
                sigma: sd,
                normalised: true,
            })
            .collect(),
        offset: 0.0,
    };
    vec![
        mix(&[(0.3, 0.35, 0.05), (1.2, 0.45, 0.18), (0.8, 0.75, 0.1)]),
        mix(&[(0.5, 0.25, 0.1), (0.8, 0.65, 0.15), (0.4, 0.85, 0.05)]),
    ]
}

pub fn toy1_graph() -> SocialGraph {
    SocialGraph::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4]]).expect("valid graph")
}

pub fn make_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    match spec {
        TaskSpec::Toy1 => SyntheticTask::build("toy1".into(), Domain::unit(1), toy1_utilities(), toy1_graph(), 1.0),
        TaskSpec::GraphPreset(kind) => {
            let rows = match kind {
                GraphPreset::WishyWashy => vec![vec![0.6, 0.4], vec![0.6, 0.4]],
                GraphPreset::Altruist => vec![vec![0.9, 0.1], vec![0.5, 0.5]],
            };
            let g = SocialGraph::from_rows(&rows)?;
            SyntheticTask::build(spec.to_string(), Domain::unit(1), toy1_utilities(), g, 1.0)
        }
        TaskSpec::RandomGmm { n, d, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let utilities = (0..*n)
                .map(|_| UtilityFn {
                    bumps: (0..3)
                        .map(|_| Bump {
                            weight: rng.random_range(0.5..2.0),
                            center: (0..*d).map(|_| rng.random::<f64>()).collect(),
                            sigma: rng.random_range(0.08..0.25),
                            normalised: false,
                        })
                        .collect(),
                    offset: 0.0,
                })
                .collect();
            let g = sample_prior(*n, seed.wrapping_add(1))?;
            SyntheticTask::build(spec.to_string(), Domain::unit(*d), utilities, g, 1.0)
        }
    }
}

impl SyntheticTask {
    pub fn build(name: String, domain: Domain, utilities: Vec<UtilityFn>, graph: SocialGraph, rho: f64) -> Result<Self> {
        let n = utilities.len();
        if graph.n() != n {
            return arg("graph and utilities disagree on the number of agents");
        }
        GsfRule::new(rho, n)?;
        let d = domain.dim();
        let grid: Vec<OptionPoint> = if d == 1 {
            (0..GRID_1D)
                .map(|k| domain.from_unit(&[k as f64 / (GRID_1D - 1) as f64]))
                .collect()
        } else {
            halton(GRID_ND, d, &vec![0.0; d]).iter().map(|u| domain.from_unit(u)).collect()
        };
        let mut task = Self {
            name,
            domain,
            n,
            utilities,
            graph,
            rho,
            grid,
            social: Vec::new(),
            x_star: OptionPoint(vec![]),
            s_star: 0.0,
        };
        task.social = task.grid.iter().map(|x| task.social_utility(x)).collect();
        let best = argmax(&task.social);
        task.x_star = task.grid[best].clone();
        task.s_star = task.social[best];
        task.refine_optimum();
        Ok(task)
    }

    /// Local refinement of the grid optimum by coordinate golden-section
    /// style bisection, so regrets of off-grid queries stay nonnegative.
    fn refine_optimum(&mut self) {
        let mut x = self.x_star.clone();
        let mut best = self.s_star;
        let mut step = 1.0 / (GRID_1D as f64);
        while step > 1e-9 {
            let mut moved = false;
            for k in 0..x.dim() {
                for dir in [1.0, -1.0] {
                    let mut t = x.clone();
                    let span = self.domain.upper[k] - self.domain.lower[k];
                    t.0[k] = (t.0[k] + dir * step * span).clamp(self.domain.lower[k], self.domain.upper[k]);
                    let v = self.social_utility(&t);
                    if v > best {
                        best = v;
                        x = t;
                        moved = true;
                    }
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        self.x_star = x;
        self.s_star = best;
    }

    /// The same task under a different aggregation parameter.
    pub fn with_rho(self, rho: f64) -> Result<Self> {
        Self::build(self.name, self.domain, self.utilities, self.graph, rho)
    }

    pub fn private_utilities(&self, x: &OptionPoint) -> Vec<f64> {
        self.utilities.iter().map(|u| u.eval(x)).collect()
    }

    pub fn public_utilities(&self, x: &OptionPoint) -> Vec<f64> {
        let u = self.private_utilities(x);
        let a = self.graph.matrix();
        (0..self.n).map(|i| (0..self.n).map(|j| a[(i, j)] * u[j]).sum()).collect()
    }

    pub fn rule(&self) -> GsfRule {
        GsfRule::new(self.rho, self.n).expect("validated at construction")
    }

    pub fn social_utility(&self, x: &OptionPoint) -> f64 {
        self.rule().aggregate_unchecked(&self.private_utilities(x))
    }

    /// Grid argmax of the aggregate of public utilities.
    pub fn corrupted_consensus(&self) -> OptionPoint {
        let rule = self.rule();
        let vals: Vec<f64> = self.grid.iter().map(|x| rule.aggregate_unchecked(&self.public_utilities(x))).collect();
        self.grid[argmax(&vals)].clone()
    }

    pub fn regret(&self, x: &OptionPoint) -> f64 {
        (self.s_star - self.social_utility(x)).max(0.0)
    }

    pub fn truth_matrix(&self) -> &DMatrix<f64> {
        self.graph.matrix()
    }

    pub fn prior(&self) -> GraphPrior {
        GraphPrior::default_for(self.n)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

/// Simulated votes: agent `i` prefers `x` with probability
/// `σ(f_i(x) − f_i(x′))`, `f = u` for private and `f = A u` for public votes.
pub fn oracle_vote<R: Rng + ?Sized>(
    task: &SyntheticTask,
    t: usize,
    x: &OptionPoint,
    xp: &OptionPoint,
    channel: Channel,
    rng: &mut R,
) -> VoteRecord {
    let (fx, fxp) = match channel {
        Channel::Private => (task.private_utilities(x), task.private_utilities(xp)),
        Channel::Public => (task.public_utilities(x), task.public_utilities(xp)),
    };
    let outcomes = fx
        .iter()
        .zip(&fxp)
        .map(|(a, b)| u8::from(rng.random::<f64>() < bt_prob(a - b)))
        .collect();
    VoteRecord {
        t,
        x: x.clone(),
        xp: xp.clone(),
        channel,
        outcomes,
    }
}

/// Instantaneous, cumulative and simple regret for a query sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretSeries {
    pub instant: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub simple: Vec<f64>,
}

pub fn regret_series(task: &SyntheticTask, queries: &[OptionPoint]) -> RegretSeries {
    let instant: Vec<f64> = queries.iter().map(|x| task.regret(x)).collect();
    let mut cumulative = Vec::with_capacity(instant.len());
    let mut simple = Vec::with_capacity(instant.len());
    let (mut c, mut s) = (0.0, f64::INFINITY);
    for r in &instant {
        c += r;
        s = s.min(*r);
        cumulative.push(c);
        simple.push(s);
    }
    RegretSeries {
        instant,
        cumulative,
        simple,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy1_consensus_shift() {
        let task = make_task(&TaskSpec::Toy1).unwrap();
        assert!((task.x_star.0[0] - 0.82).abs() <= 0.02, "{:?}", task.x_star);
        // density-with-std reading puts the corrupted optimum at 0.3545
        let c = task.corrupted_consensus();
        assert!((c.0[0] - 0.3545).abs() <= 1e-3, "{c:?}");
    }

    #[test]
    fn toy1_grid_maximum_is_unique() {
        let task = make_task(&TaskSpec::Toy1).unwrap();
        let max = task.social.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(task.social.iter().filter(|v| **v == max).count(), 1);
    }

    #[test]
    fn task_names_parse() {
        assert_eq!("toy1".parse::<TaskSpec>().unwrap(), TaskSpec::Toy1);
        assert_eq!(
            "random_gmm(3, 2, 7)".parse::<TaskSpec>().unwrap(),
            TaskSpec::RandomGmm { n: 3, d: 2, seed: 7 }
        );
        assert_eq!(
            "graph_preset(altruist)".parse::<TaskSpec>().unwrap(),
            TaskSpec::GraphPreset(GraphPreset::Altruist)
        );
        assert!("toy2".parse::<TaskSpec>().is_err());
        assert!("graph_preset(selfish)".parse::<TaskSpec>().is_err());
        for s in ["toy1", "random_gmm(3,2,7)", "graph_preset(wishy-washy)"] {
            assert_eq!(s.parse::<TaskSpec>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn wishy_washy_graph_is_singular() {
        let task = make_task(&TaskSpec::GraphPreset(GraphPreset::WishyWashy)).unwrap();
        assert!(!crate::social_graph::validate(&task.graph).invertible);
    }

    #[test]
    fn random_tasks_are_reproducible() {
        let spec = TaskSpec::RandomGmm { n: 3, d: 2, seed: 11 };
        let a = make_task(&spec).unwrap();
        let b = make_task(&spec).unwrap();
        assert_eq!(a.utilities, b.utilities);
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.grid.len(), GRID_ND);
    }

    #[test]
    fn vote_rates() {
        let task = make_task(&TaskSpec::Toy1).unwrap();
        let x = OptionPoint::scalar(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wins: usize = (0..10_000)
            .map(|_| oracle_vote(&task, 1, &x, &x, Channel::Private, &mut rng).outcomes[0] as usize)
            .sum();
        assert!((wins as f64 / 10_000.0 - 0.5).abs() <= 0.02);

        // u(0) − u(1) = 10·(1 − e^{−50})
        let gap = SyntheticTask::build(
            "gap".into(),
            Domain::unit(1),
            vec![UtilityFn {
                bumps: vec![Bump {
                    weight: 10.0,
                    center: vec![0.0],
                    sigma: 0.1,
                    normalised: false,
                }],
                offset: 0.0,
            }],
            SocialGraph::from_rows(&[vec![1.0]]).unwrap(),
            1.0,
        )
        .unwrap();
        let (a, b) = (OptionPoint::scalar(0.0), OptionPoint::scalar(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wins: usize = (0..10_000)
            .map(|_| oracle_vote(&gap, 1, &a, &b, Channel::Private, &mut rng).outcomes[0] as usize)
            .sum();
        assert!(wins as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn same_stream_same_record() {
        let task = make_task(&TaskSpec::Toy1).unwrap();
        let (x, xp) = (OptionPoint::scalar(0.2), OptionPoint::scalar(0.7));
        let a = oracle_vote(&task, 3, &x, &xp, Channel::Public, &mut ChaCha8Rng::seed_from_u64(9));
        let b = oracle_vote(&task, 3, &x, &xp, Channel::Public, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn near_identity_public_matches_private() {
        let mut task = make_task(&TaskSpec::Toy1).unwrap();
        task.graph = SocialGraph::floored(DMatrix::identity(2, 2), GraphPrior::default_for(2)).unwrap();
        let (x, xp) = (OptionPoint::scalar(0.45), OptionPoint::scalar(0.6));
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let rate = |ch, rng: &mut ChaCha8Rng| {
            (0..10_000).map(|_| oracle_vote(&task, 1, &x, &xp, ch, rng).outcomes[0] as f64).sum::<f64>() / 10_000.0
        };
        let p = rate(Channel::Public, &mut r1);
        let q = rate(Channel::Private, &mut r2);
        assert!((p - q).abs() <= 0.02, "{p} vs {q}");
    }

    #[test]
    fn regret_definitions() {
        let task = make_task(&TaskSpec::Toy1).unwrap();
        let at_opt = regret_series(&task, &vec![task.x_star.clone(); 5]);
        assert!(at_opt.instant.iter().chain(&at_opt.cumulative).chain(&at_opt.simple).all(|r| *r == 0.0));
        let qs: Vec<OptionPoint> = [0.1, 0.5, 0.3, 0.8, 0.05].iter().map(|x| OptionPoint::scalar(*x)).collect();
        let s = regret_series(&task, &qs);
        for t in 0..qs.len() {
            let m = s.instant[..=t].iter().cloned().fold(f64::INFINITY, f64::min);
            assert!((s.simple[t] - m).abs() <= 1e-12);
            if t > 0 {
                assert!(s.cumulative[t] >= s.cumulative[t - 1]);
            }
        }
    }
}
