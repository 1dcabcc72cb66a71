//! Concave log-likelihood and log-prior pieces in the solver's vector form.
//!
//! Votes are merged into [`PairTerm`]s: for a canonical pair `a < b` and an
//! outcome row, `wins` counts preferences for `a` out of `count` outcomes.
//! Each term contributes `wins·d − count·softplus(d)` where `d` is a linear
//! function of the unknowns.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::preference::{bt_prob, softplus};
use crate::social_graph::GraphPrior;
use crate::solver::ConcaveFn;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct PairTerm {
    pub a: usize,
    pub b: usize,
    pub row: usize,
    pub wins: f64,
    pub count: f64,
}

impl PairTerm {
    #[inline]
    pub fn value(&self, d: f64) -> f64 {
        self.wins * d - self.count * softplus(d)
    }

    #[inline]
    pub fn slope(&self, d: f64) -> f64 {
        self.wins - self.count * bt_prob(d)
    }

    #[inline]
    pub fn curvature(&self, d: f64) -> f64 {
        let s = bt_prob(d);
        -self.count * s * (1.0 - s)
    }
}

/// Merges `(a, b, outcomes)` triples into canonical terms. With `pooled`
/// every outcome is attributed to row 0.
pub(crate) fn merge_terms<'a>(
    votes: impl IntoIterator<Item = (usize, usize, &'a [u8])>,
    pooled: bool,
) -> Vec<PairTerm> {
    let mut acc: BTreeMap<(usize, usize, usize), (f64, f64)> = BTreeMap::new();
    for (a, b, outcomes) in votes {
        for (i, o) in outcomes.iter().enumerate() {
            let row = if pooled { 0 } else { i };
            let won = f64::from(*o);
            let (key, w) = if a < b {
                ((row, a, b), won)
            } else {
                ((row, b, a), 1.0 - won)
            };
            let e = acc.entry(key).or_insert((0.0, 0.0));
            e.0 += w;
            e.1 += 1.0;
        }
    }
    acc.into_iter()
        .map(|((row, a, b), (wins, count))| PairTerm {
            a,
            b,
            row,
            wins,
            count,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub(crate) enum Mix {
    /// `d = x[row, a] − x[row, b]`.
    Direct,
    /// `d = Σ_j G[row, j] (x[j, a] − x[j, b])`.
    Graph(DMatrix<f64>),
}

/// A set of terms over a block of the unknown vector laid out row-major as
/// `rows × stride`.
#[derive(Debug, Clone)]
pub(crate) struct TermBlock {
    pub terms: Arc<Vec<PairTerm>>,
    pub mix: Mix,
    pub offset: usize,
    pub stride: usize,
    pub rows: usize,
}

impl TermBlock {
    fn coefficients(&self, t: &PairTerm, out: &mut Vec<(usize, f64)>) {
        out.clear();
        match &self.mix {
            Mix::Direct => {
                let base = self.offset + t.row * self.stride;
                out.push((base + t.a, 1.0));
                out.push((base + t.b, -1.0));
            }
            Mix::Graph(g) => {
                for j in 0..self.rows {
                    let w = g[(t.row, j)];
                    let base = self.offset + j * self.stride;
                    out.push((base + t.a, w));
                    out.push((base + t.b, -w));
                }
            }
        }
    }
}

/// Sum of term blocks plus a constant.
#[derive(Debug, Clone)]
pub(crate) struct LikFn {
    pub blocks: Vec<TermBlock>,
    pub constant: f64,
}

impl ConcaveFn for LikFn {
    fn value_grad(&self, x: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        grad.fill(0.0);
        let mut total = self.constant;
        let mut coef = Vec::new();
        for block in &self.blocks {
            for t in block.terms.iter() {
                block.coefficients(t, &mut coef);
                let d: f64 = coef.iter().map(|(k, c)| c * x[*k]).sum();
                total += t.value(d);
                let s = t.slope(d);
                for (k, c) in &coef {
                    grad[*k] += s * c;
                }
            }
        }
        total
    }

    fn add_hessian(&self, x: &DVector<f64>, scale: f64, hess: &mut DMatrix<f64>) {
        let mut coef = Vec::new();
        for block in &self.blocks {
            for t in block.terms.iter() {
                block.coefficients(t, &mut coef);
                let d: f64 = coef.iter().map(|(k, c)| c * x[*k]).sum();
                let h = scale * t.curvature(d);
                for (k, ck) in &coef {
                    for (l, cl) in &coef {
                        hess[(*k, *l)] += h * ck * cl;
                    }
                }
            }
        }
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let mut total = self.constant;
        let mut coef = Vec::new();
        for block in &self.blocks {
            for t in block.terms.iter() {
                block.coefficients(t, &mut coef);
                let d: f64 = coef.iter().map(|(k, c)| c * x[*k]).sum();
                total += t.value(d);
            }
        }
        total
    }
}

/// Graph rows parameterised by their first `n − 1` entries; the last entry
/// of each row is `1 − Σ` of the others.
pub(crate) fn graph_from_free(theta: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut rest = 1.0;
        for j in 0..n - 1 {
            let v = theta[i * (n - 1) + j];
            a[(i, j)] = v;
            rest -= v;
        }
        a[(i, n - 1)] = rest;
    }
    a
}

pub(crate) fn free_from_graph(a: &DMatrix<f64>) -> DVector<f64> {
    let n = a.nrows();
    DVector::from_iterator(
        n * (n - 1),
        (0..n).flat_map(|i| (0..n - 1).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]),
    )
}

/// Public log-likelihood of `A·U` with `U` fixed, plus the graph log-prior,
/// plus a constant, as a function of the free graph entries.
#[derive(Debug, Clone)]
pub(crate) struct GraphStepFn {
    pub n: usize,
    /// Per term: the per-agent utility gaps `U_j(a) − U_j(b)`.
    pub gaps: Vec<(PairTerm, Vec<f64>)>,
    pub prior: Option<GraphPrior>,
    pub with_likelihood: bool,
    pub constant: f64,
}

impl GraphStepFn {
    pub fn new(terms: &[PairTerm], u: &DMatrix<f64>, prior: Option<GraphPrior>, constant: f64) -> Self {
        let n = u.nrows();
        let gaps = terms
            .iter()
            .map(|t| (*t, (0..n).map(|j| u[(j, t.a)] - u[(j, t.b)]).collect()))
            .collect();
        Self {
            n,
            gaps,
            prior,
            with_likelihood: true,
            constant,
        }
    }

    fn entry_terms(&self, i: usize, a: f64) -> (f64, f64, f64) {
        let p = self.prior.as_ref().expect("checked by caller");
        let k1 = p.kappa[i] - 1.0;
        (
            -p.xi * a * a + k1 * a.ln(),
            -2.0 * p.xi * a + k1 / a,
            -2.0 * p.xi - k1 / (a * a),
        )
    }
}

impl ConcaveFn for GraphStepFn {
    fn value_grad(&self, x: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        let n = self.n;
        let f = n - 1;
        grad.fill(0.0);
        let a = graph_from_free(x, n);
        let mut total = self.constant;
        if self.with_likelihood {
            for (t, gap) in &self.gaps {
                let d: f64 = (0..n).map(|j| a[(t.row, j)] * gap[j]).sum();
                total += t.value(d);
                let s = t.slope(d);
                for j in 0..f {
                    grad[t.row * f + j] += s * (gap[j] - gap[n - 1]);
                }
            }
        }
        if self.prior.is_some() {
            for i in 0..n {
                let (vl, dl, _) = self.entry_terms(i, a[(i, n - 1)]);
                total += vl;
                for j in 0..f {
                    let (v, dv, _) = self.entry_terms(i, a[(i, j)]);
                    total += v;
                    grad[i * f + j] += dv - dl;
                }
            }
        }
        total
    }

    fn add_hessian(&self, x: &DVector<f64>, scale: f64, hess: &mut DMatrix<f64>) {
        let n = self.n;
        let f = n - 1;
        let a = graph_from_free(x, n);
        if self.with_likelihood {
            for (t, gap) in &self.gaps {
                let d: f64 = (0..n).map(|j| a[(t.row, j)] * gap[j]).sum();
                let h = scale * t.curvature(d);
                for j in 0..f {
                    let cj = gap[j] - gap[n - 1];
                    for k in 0..f {
                        hess[(t.row * f + j, t.row * f + k)] += h * cj * (gap[k] - gap[n - 1]);
                    }
                }
            }
        }
        if self.prior.is_some() {
            for i in 0..n {
                let (_, _, hl) = self.entry_terms(i, a[(i, n - 1)]);
                for j in 0..f {
                    let (_, _, hj) = self.entry_terms(i, a[(i, j)]);
                    hess[(i * f + j, i * f + j)] += scale * hj;
                    for k in 0..f {
                        hess[(i * f + j, i * f + k)] += scale * hl;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: &dyn ConcaveFn, x: &DVector<f64>) {
        let n = x.len();
        let mut g = DVector::zeros(n);
        f.value_grad(x, &mut g);
        let mut h = DMatrix::zeros(n, n);
        f.add_hessian(x, 1.0, &mut h);
        let eps = 1e-5;
        for k in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += eps;
            xm[k] -= eps;
            let fd = (f.value(&xp) - f.value(&xm)) / (2.0 * eps);
            assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + g[k].abs()), "grad {k}: {fd} vs {}", g[k]);
            let mut gp = DVector::zeros(n);
            let mut gm = DVector::zeros(n);
            f.value_grad(&xp, &mut gp);
            f.value_grad(&xm, &mut gm);
            for l in 0..n {
                let fd = (gp[l] - gm[l]) / (2.0 * eps);
                assert!((fd - h[(l, k)]).abs() <= 1e-5 * (1.0 + h[(l, k)].abs()), "hess {l},{k}");
            }
        }
    }

    #[test]
    fn merging_canonicalises_pairs() {
        let o1 = [1u8, 0];
        let o2 = [1u8, 1];
        let t = merge_terms([(2, 0, &o1[..]), (0, 2, &o2[..])], false);
        assert_eq!(t.len(), 2);
        // row 0: (2 beat 0) → 0 won 0 of 1; then 0 won 1 of 1
        assert_eq!(t[0], PairTerm { a: 0, b: 2, row: 0, wins: 1.0, count: 2.0 });
        assert_eq!(t[1], PairTerm { a: 0, b: 2, row: 1, wins: 2.0, count: 2.0 });
        let pooled = merge_terms([(0, 1, &o1[..])], true);
        assert_eq!(pooled, vec![PairTerm { a: 0, b: 1, row: 0, wins: 1.0, count: 2.0 }]);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let terms = Arc::new(vec![
            PairTerm { a: 0, b: 1, row: 0, wins: 2.0, count: 3.0 },
            PairTerm { a: 1, b: 2, row: 1, wins: 0.0, count: 1.0 },
        ]);
        let g = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.2, 0.8]);
        let f = LikFn {
            blocks: vec![
                TermBlock { terms: terms.clone(), mix: Mix::Direct, offset: 0, stride: 3, rows: 2 },
                TermBlock { terms, mix: Mix::Graph(g), offset: 0, stride: 3, rows: 2 },
            ],
            constant: 0.5,
        };
        let x = DVector::from_vec(vec![0.3, -0.4, 1.1, 0.2, 0.9, -1.3]);
        fd_check(&f, &x);

        let u = DMatrix::from_row_slice(3, 3, &[0.3, -0.4, 1.1, 0.2, 0.9, -1.3, 0.5, 0.0, 0.1]);
        let t3 = vec![
            PairTerm { a: 0, b: 1, row: 0, wins: 2.0, count: 3.0 },
            PairTerm { a: 0, b: 2, row: 2, wins: 1.0, count: 1.0 },
        ];
        let gs = GraphStepFn::new(&t3, &u, Some(GraphPrior::default_for(3)), 0.0);
        let theta = DVector::from_vec(vec![0.5, 0.3, 0.2, 0.6, 0.3, 0.3]);
        fd_check(&gs, &theta);
    }

    #[test]
    fn free_parameterisation_roundtrip() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.6, 0.4]);
        let th = free_from_graph(&a);
        assert_eq!(th.as_slice(), &[0.9, 0.6]);
        assert!((graph_from_free(&th, 2) - a).amax() < 1e-15);
    }
}
