//! Decision points and the box-shaped option domain.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

/// A candidate decision `x` inside the option domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OptionPoint(pub Vec<f64>);

impl OptionPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        Self(coords)
    }

    pub fn scalar(x: f64) -> Self {
        Self(vec![x])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn sq_dist(&self, other: &OptionPoint) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Coordinates joined by `;`, the CSV cell format.
    pub fn joined(&self) -> String {
        self.0
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let d = Self { lower, upper };
        d.validate()?;
        Ok(d)
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() {
            return arg("domain must have at least one dimension");
        }
        if self.lower.len() != self.upper.len() {
            return arg("domain bounds have different lengths");
        }
        for (lo, hi) in self.lower.iter().zip(&self.upper) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return arg(format!("degenerate domain interval [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &OptionPoint) -> bool {
        x.dim() == self.dim()
            && x.0
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Maps a domain point into the unit cube.
    pub fn to_unit(&self, x: &OptionPoint) -> OptionPoint {
        OptionPoint(
            x.0.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
                .collect(),
        )
    }

    /// Maps a unit-cube point back into the domain.
    pub fn from_unit(&self, u: &[f64]) -> OptionPoint {
        OptionPoint(
            u.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(v, (lo, hi))| lo + v.clamp(0.0, 1.0) * (hi - lo))
                .collect(),
        )
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> OptionPoint {
        let u: Vec<f64> = (0..self.dim()).map(|_| rng.random::<f64>()).collect();
        self.from_unit(&u)
    }
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut index: u64, base: u32) -> f64 {
    let b = base as f64;
    let mut inv = 1.0 / b;
    let mut out = 0.0;
    while index > 0 {
        out += (index % base as u64) as f64 * inv;
        index /= base as u64;
        inv /= b;
    }
    out
}

/// First `count` Halton points in `[0,1)^dim`, shifted modulo 1 by `shift`
/// (Cranley-Patterson rotation). Index 0 is skipped.
pub fn halton(count: usize, dim: usize, shift: &[f64]) -> Vec<Vec<f64>> {
    assert!(dim <= PRIMES.len(), "halton supports up to {} dims", PRIMES.len());
    (1..=count as u64)
        .map(|i| {
            (0..dim)
                .map(|k| {
                    let v = radical_inverse(i, PRIMES[k]) + shift.get(k).copied().unwrap_or(0.0);
                    v - v.floor()
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_roundtrip() {
        let d = Domain::new(vec![15.0, 0.3], vec![35.0, 1.5]).unwrap();
        let x = OptionPoint(vec![22.5, 0.8]);
        let back = d.from_unit(d.to_unit(&x).coords());
        assert!(back.sq_dist(&x) < 1e-24);
    }

    #[test]
    fn rejects_degenerate_box() {
        assert!(Domain::new(vec![1.0], vec![1.0]).is_err());
        assert!(Domain::new(vec![0.0, 0.0], vec![1.0]).is_err());
    }

    #[test]
    fn van_der_corput_prefix() {
        let pts = halton(3, 1, &[0.0]);
        assert_eq!(pts, vec![vec![0.5], vec![0.25], vec![0.75]]);
    }
}
