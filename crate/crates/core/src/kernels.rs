//! Kernel functions, Gram matrices and the dueling (pair) kernel.
//!
//! Stationary kernels are normalised so that `k(x, x) = variance <= 1`; every
//! utility in a norm ball of radius `L` is then bounded by `L` pointwise.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result, SboError};
use crate::point::OptionPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Rbf,
    Matern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// One shared lengthscale, or one per input dimension.
    pub lengthscale: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(default = "unit_variance")]
    pub variance: f64,
}

fn unit_variance() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn rbf(lengthscale: f64) -> Self {
        Self {
            kind: KernelKind::Rbf,
            lengthscale: vec![lengthscale],
            nu: None,
            variance: 1.0,
        }
    }

    pub fn matern(lengthscale: f64, nu: f64) -> Self {
        Self {
            kind: KernelKind::Matern,
            lengthscale: vec![lengthscale],
            nu: Some(nu),
            variance: 1.0,
        }
    }

    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            lengthscale: vec![1.0],
            nu: None,
            variance: 1.0,
        }
    }

    pub fn with_lengthscale(&self, lengthscale: f64) -> Self {
        Self {
            lengthscale: vec![lengthscale; self.lengthscale.len().max(1)],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscale.is_empty() {
            return arg("kernel needs at least one lengthscale");
        }
        if self.lengthscale.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return arg("kernel lengthscales must be positive");
        }
        if !(self.variance > 0.0 && self.variance <= 1.0) {
            return arg(format!(
                "kernel variance must lie in (0, 1], got {}",
                self.variance
            ));
        }
        if self.kind == KernelKind::Matern {
            match self.nu {
                Some(nu) if nu == 1.5 || nu == 2.5 => {}
                Some(nu) => return arg(format!("matern smoothness {nu} unsupported (use 1.5 or 2.5)")),
                None => return arg("matern kernel requires nu"),
            }
        }
        Ok(())
    }

    fn scale(&self, k: usize) -> f64 {
        if self.lengthscale.len() == 1 {
            self.lengthscale[0]
        } else {
            self.lengthscale[k]
        }
    }

    fn check_dims(&self, x: &OptionPoint, y: &OptionPoint) -> Result<()> {
        if x.dim() != y.dim() {
            return arg(format!("point dimensions differ: {} vs {}", x.dim(), y.dim()));
        }
        if self.lengthscale.len() != 1 && self.lengthscale.len() != x.dim() {
            return arg(format!(
                "kernel has {} lengthscales but points have dimension {}",
                self.lengthscale.len(),
                x.dim()
            ));
        }
        Ok(())
    }

    /// Kernel value without dimension checks. Callers guarantee shapes.
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Linear => {
                let dot: f64 = x
                    .iter()
                    .zip(y)
                    .enumerate()
                    .map(|(k, (a, b))| a * b / (self.scale(k) * self.scale(k)))
                    .sum();
                self.variance * dot
            }
            KernelKind::Rbf | KernelKind::Matern => {
                let r2: f64 = x
                    .iter()
                    .zip(y)
                    .enumerate()
                    .map(|(k, (a, b))| {
                        let d = (a - b) / self.scale(k);
                        d * d
                    })
                    .sum();
                if self.kind == KernelKind::Rbf {
                    return self.variance * (-0.5 * r2).exp();
                }
                let r = r2.sqrt();
                let value = match self.nu {
                    Some(nu) if nu == 1.5 => {
                        let s = 3f64.sqrt() * r;
                        (1.0 + s) * (-s).exp()
                    }
                    _ => {
                        let s = 5f64.sqrt() * r;
                        (1.0 + s + s * s / 3.0) * (-s).exp()
                    }
                };
                self.variance * value
            }
        }
    }
}

/// `k(x, y)`.
pub fn kernel_eval(spec: &KernelSpec, x: &OptionPoint, y: &OptionPoint) -> Result<f64> {
    spec.validate()?;
    spec.check_dims(x, y)?;
    Ok(spec.eval_unchecked(x.coords(), y.coords()))
}

/// Kernel on pairs: `k(x, y) + k(x', y')`.
pub fn dueling_kernel_eval(
    spec: &KernelSpec,
    pair: (&OptionPoint, &OptionPoint),
    other: (&OptionPoint, &OptionPoint),
) -> Result<f64> {
    Ok(kernel_eval(spec, pair.0, other.0)? + kernel_eval(spec, pair.1, other.1)?)
}

/// Symmetric PSD matrix of kernel values over a point list.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub matrix: DMatrix<f64>,
    /// Smallest diagonal loading tried by [`stable_inverse`].
    pub jitter: f64,
}

pub const DEFAULT_JITTER: f64 = 1e-6;
pub const MAX_JITTER: f64 = 1e-2;

impl GramMatrix {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        Self {
            matrix,
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }
}

pub fn gram(spec: &KernelSpec, points: &[OptionPoint]) -> Result<GramMatrix> {
    if points.is_empty() {
        return arg("gram matrix over an empty point list");
    }
    spec.validate()?;
    for p in points {
        spec.check_dims(&points[0], p)?;
    }
    let m = points.len();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = spec.eval_unchecked(points[i].coords(), points[j].coords());
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(GramMatrix::from_matrix(k))
}

/// Inverse of a jittered Gram matrix together with the loading that worked.
#[derive(Debug, Clone)]
pub struct StableInverse {
    pub inverse: DMatrix<f64>,
    pub jitter: f64,
}

/// Condition estimate below which an unloaded factorisation is accepted.
const WELL_CONDITIONED: f64 = 1e6;

/// `(K + jitter I)^{-1}`.
///
/// A well-conditioned matrix is inverted as is (jitter 0). Otherwise the
/// jitter escalates ×10 from the matrix's starting value up to
/// [`MAX_JITTER`] until a Cholesky factorisation succeeds.
pub fn stable_inverse(g: &GramMatrix) -> Result<StableInverse> {
    let k = &g.matrix;
    if k.nrows() != k.ncols() {
        return arg(format!("non-square matrix {}x{}", k.nrows(), k.ncols()));
    }
    let m = k.nrows();
    let mut jitter = 0.0;
    let mut last_condition = f64::INFINITY;
    while jitter <= MAX_JITTER * (1.0 + 1e-9) {
        let mut loaded = k.clone();
        for i in 0..m {
            loaded[(i, i)] += jitter;
        }
        if let Some(chol) = loaded.clone().cholesky() {
            let l = chol.l_dirty();
            let diag: Vec<f64> = (0..m).map(|i| l[(i, i)] * l[(i, i)]).collect();
            let max = diag.iter().cloned().fold(0.0, f64::max);
            let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            last_condition = max / min;
            let accept = if jitter == 0.0 {
                last_condition < WELL_CONDITIONED
            } else {
                min > 0.0 && last_condition.is_finite()
            };
            if accept {
                let mut inverse = chol.inverse();
                // symmetrise round-off
                for i in 0..m {
                    for j in 0..i {
                        let s = 0.5 * (inverse[(i, j)] + inverse[(j, i)]);
                        inverse[(i, j)] = s;
                        inverse[(j, i)] = s;
                    }
                }
                return Ok(StableInverse { inverse, jitter });
            }
        }
        jitter = if jitter == 0.0 {
            g.jitter.max(f64::MIN_POSITIVE)
        } else {
            jitter * 10.0
        };
    }
    Err(SboError::Numeric {
        message: format!("cholesky failed up to jitter {MAX_JITTER:e}"),
        condition: last_condition,
    })
}
