//! Generalised Gini social-evaluation welfare function (GSF) and the classic
//! aggregation rules it interpolates between.
//!
//! The GSF applies geometric weights `w_i ∝ ρ^{i-1}` to the utilities sorted in
//! ascending order, so the worst-off agent always carries the largest weight.
//! `ρ = 1` is utilitarian (the mean); `ρ → 0` approaches egalitarian (the min).

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsfRule {
    rho: f64,
    weights: Vec<f64>,
}

/// Normalised geometric weights `ρ^{i-1} / Σ_j ρ^{j-1}`.
pub fn gsf_weights(rho: f64, n: usize) -> Result<Vec<f64>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return arg(format!("rho must lie in (0, 1], got {rho}"));
    }
    if n == 0 {
        return arg("aggregation needs at least one agent");
    }
    let raw: Vec<f64> = (0..n).map(|i| rho.powi(i as i32)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

impl GsfRule {
    pub fn new(rho: f64, n: usize) -> Result<Self> {
        Ok(Self {
            rho,
            weights: gsf_weights(rho, n)?,
        })
    }

    pub fn utilitarian(n: usize) -> Self {
        Self::new(1.0, n).expect("n >= 1")
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Agent indices ordered by ascending utility; ties keep agent order.
    pub fn ascending_order(u: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..u.len()).collect();
        idx.sort_by(|&a, &b| u[a].total_cmp(&u[b]));
        idx
    }

    /// Weight each agent receives under the ordering induced by `u`.
    ///
    /// With these weights frozen, `Σ_i w_i u_i` equals [`aggregate`] at `u` and
    /// is linear in `u`.
    pub fn agent_weights(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        for (rank, agent) in Self::ascending_order(u).into_iter().enumerate() {
            out[agent] = self.weights[rank];
        }
        out
    }

    pub fn aggregate(&self, u: &[f64]) -> Result<f64> {
        if u.len() != self.n() {
            return arg(format!(
                "utility vector has {} entries, rule expects {}",
                u.len(),
                self.n()
            ));
        }
        Ok(self.aggregate_unchecked(u))
    }

    pub(crate) fn aggregate_unchecked(&self, u: &[f64]) -> f64 {
        Self::ascending_order(u)
            .into_iter()
            .zip(&self.weights)
            .map(|(agent, w)| w * u[agent])
            .sum()
    }
}

/// `wᵀ · sort_ascending(u)`.
pub fn aggregate(rule: &GsfRule, u: &[f64]) -> Result<f64> {
    rule.aggregate(u)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceRule {
    Utilitarian,
    Egalitarian,
    /// `min_i u_i / w_i` with positive weights.
    Chebyshev(Vec<f64>),
}

pub fn reference_aggregate(kind: &ReferenceRule, u: &[f64]) -> Result<f64> {
    if u.is_empty() {
        return arg("empty utility vector");
    }
    match kind {
        ReferenceRule::Utilitarian => Ok(u.iter().sum::<f64>() / u.len() as f64),
        ReferenceRule::Egalitarian => Ok(u.iter().cloned().fold(f64::INFINITY, f64::min)),
        ReferenceRule::Chebyshev(w) => {
            if w.len() != u.len() {
                return arg("chebyshev weights and utilities differ in length");
            }
            if w.iter().any(|v| *v <= 0.0) {
                return arg("chebyshev weights must be positive");
            }
            Ok(u.iter()
                .zip(w)
                .map(|(a, b)| a / b)
                .fold(f64::INFINITY, f64::min))
        }
    }
}
