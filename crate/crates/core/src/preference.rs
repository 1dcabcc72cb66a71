//! Bradley-Terry vote model and the log-likelihoods built on it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result, SboError};
use crate::point::OptionPoint;
use crate::social_graph::{log_prior, SocialGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Public,
    Private,
}

/// One round's pairwise votes on a single channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub t: usize,
    pub x: OptionPoint,
    pub xp: OptionPoint,
    pub channel: Channel,
    /// `outcomes[i] == 1` iff agent `i` preferred `x` over `xp`.
    pub outcomes: Vec<u8>,
}

impl VoteRecord {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.x == self.xp {
            return arg("a vote needs two distinct points");
        }
        if self.x.dim() != self.xp.dim() {
            return arg("vote points have different dimensions");
        }
        if self.outcomes.len() != n {
            return arg(format!(
                "vote has {} outcomes, expected one per agent ({n})",
                self.outcomes.len()
            ));
        }
        if self.outcomes.iter().any(|o| *o > 1) {
            return arg("outcomes must be 0 or 1");
        }
        Ok(())
    }

    pub fn prefers_x(&self, agent: usize) -> bool {
        self.outcomes[agent] == 1
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("vote records always serialise")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| SboError::Argument(format!("bad vote record: {e}")))
    }
}

/// Candidate utility values for every agent at a fixed list of points.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityValues {
    pub points: Vec<OptionPoint>,
    /// `n × m`, row per agent, column per point.
    pub values: DMatrix<f64>,
    pub norm_bound: f64,
}

impl UtilityValues {
    pub fn new(points: Vec<OptionPoint>, values: DMatrix<f64>, norm_bound: f64) -> Result<Self> {
        if values.ncols() != points.len() {
            return arg(format!(
                "{} value columns for {} points",
                values.ncols(),
                points.len()
            ));
        }
        if !(norm_bound > 0.0) {
            return arg("norm bound must be positive");
        }
        Ok(Self {
            points,
            values,
            norm_bound,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.values.nrows()
    }

    pub fn index_of(&self, x: &OptionPoint) -> Option<usize> {
        self.points.iter().position(|p| p == x)
    }

    pub fn value(&self, agent: usize, x: &OptionPoint) -> Option<f64> {
        self.index_of(x).map(|k| self.values[(agent, k)])
    }

    fn pair_indices(&self, v: &VoteRecord) -> Result<(usize, usize)> {
        let missing = |p: &OptionPoint| {
            SboError::State(format!("no stored utility value at point [{}]", p.joined()))
        };
        let a = self.index_of(&v.x).ok_or_else(|| missing(&v.x))?;
        let b = self.index_of(&v.xp).ok_or_else(|| missing(&v.xp))?;
        if v.outcomes.len() != self.n_agents() {
            return arg(format!(
                "vote has {} outcomes for {} agents",
                v.outcomes.len(),
                self.n_agents()
            ));
        }
        Ok((a, b))
    }
}

/// `σ(z) = 1 / (1 + e^{−z})`.
pub fn bt_prob(delta_u: f64) -> f64 {
    if delta_u >= 0.0 {
        1.0 / (1.0 + (-delta_u).exp())
    } else {
        let e = delta_u.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Log-probability of one binary outcome given the utility gap `d = u(x) − u(x′)`.
#[inline]
pub(crate) fn outcome_loglik(d: f64, prefers_x: bool) -> f64 {
    // o·d − log(1 + e^d)
    if prefers_x {
        -softplus(-d)
    } else {
        -softplus(d)
    }
}

/// Sum over votes and agents of the Bradley-Terry log-probability of the
/// observed outcomes.
pub fn dataset_loglik(values: &UtilityValues, votes: &[VoteRecord]) -> Result<f64> {
    let mut total = 0.0;
    for v in votes {
        let (a, b) = values.pair_indices(v)?;
        for i in 0..values.n_agents() {
            let d = values.values[(i, a)] - values.values[(i, b)];
            total += outcome_loglik(d, v.prefers_x(i));
        }
    }
    Ok(total)
}

/// Gradient of [`dataset_loglik`] with respect to every stored value.
pub fn dataset_loglik_grad(values: &UtilityValues, votes: &[VoteRecord]) -> Result<DMatrix<f64>> {
    let mut g = DMatrix::zeros(values.values.nrows(), values.values.ncols());
    for v in votes {
        let (a, b) = values.pair_indices(v)?;
        for i in 0..values.n_agents() {
            let d = values.values[(i, a)] - values.values[(i, b)];
            let o = if v.prefers_x(i) { 1.0 } else { 0.0 };
            let r = o - bt_prob(d);
            g[(i, a)] += r;
            g[(i, b)] -= r;
        }
    }
    Ok(g)
}

/// Private log-likelihood of `u` plus public log-likelihood of `v` plus the
/// graph log-prior. Uniform priors on the utilities are dropped.
pub fn joint_log_posterior(
    u: &UtilityValues,
    graph: &SocialGraph,
    v: &UtilityValues,
    private: &[VoteRecord],
    public: &[VoteRecord],
) -> Result<f64> {
    if private.iter().any(|r| r.channel != Channel::Private)
        || public.iter().any(|r| r.channel != Channel::Public)
    {
        return arg("vote channel does not match the dataset it was passed in");
    }
    if u.n_agents() != graph.n() || v.n_agents() != graph.n() {
        return arg("utility and graph sizes differ");
    }
    Ok(dataset_loglik(u, private)? + dataset_loglik(v, public)? + log_prior(graph)?)
}
