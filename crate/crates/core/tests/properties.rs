use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use sbo_core::kernels::{gram, stable_inverse, KernelSpec};
use sbo_core::point::{Domain, OptionPoint};
use sbo_core::preference::{bt_prob, dataset_loglik, Channel, UtilityValues, VoteRecord};
use sbo_core::social_graph::{convolve, log_prior, sample_prior, SocialGraph};
use sbo_core::solver::{solve, Constraint, ConvexProgram, Objective, SolveStatus};

fn points(m: usize) -> Vec<OptionPoint> {
    (0..m).map(|k| OptionPoint::scalar(k as f64 / m as f64)).collect()
}

/// Votes over `m` points from raw index pairs and outcome bits.
fn votes_from(raw: &[(usize, usize, Vec<u8>)], m: usize) -> Vec<VoteRecord> {
    let pts = points(m);
    raw.iter()
        .enumerate()
        .map(|(t, (a, b, o))| {
            let a = a % m;
            let b = (a + 1 + b % (m - 1)) % m;
            VoteRecord {
                t: t + 1,
                x: pts[a].clone(),
                xp: pts[b].clone(),
                channel: Channel::Public,
                outcomes: o.clone(),
            }
        })
        .collect()
}

fn instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<(usize, usize, Vec<u8>)>)> {
    (1usize..4, 2usize..6).prop_flat_map(|(n, m)| {
        (
            Just(n),
            Just(m),
            prop::collection::vec(-3.0f64..3.0, n * m),
            prop::collection::vec((0usize..100, 0usize..100, prop::collection::vec(0u8..2, n)), 0..10),
        )
    })
}

fn loglik(n: usize, m: usize, vals: &[f64], votes: &[VoteRecord]) -> f64 {
    let uv = UtilityValues::new(points(m), DMatrix::from_row_slice(n, m, vals), 10.0).unwrap();
    dataset_loglik(&uv, votes).unwrap()
}

proptest! {
    #[test]
    fn bt_prob_is_a_monotone_probability(a in -40.0f64..40.0, b in -40.0f64..40.0) {
        let (pa, pb) = (bt_prob(a), bt_prob(b));
        prop_assert!(pa > 0.0 || a < -35.0);
        prop_assert!(pa <= 1.0);
        if a < b {
            prop_assert!(pa <= pb);
        }
        prop_assert!((bt_prob(-a) - (1.0 - pa)).abs() <= 1e-15);
    }

    #[test]
    fn loglik_is_a_log_probability((n, m, vals, raw) in instance()) {
        let votes = votes_from(&raw, m);
        prop_assert!(loglik(n, m, &vals, &votes) <= 0.0);
    }

    #[test]
    fn loglik_sees_only_differences((n, m, vals, raw) in instance(), agent in 0usize..4, c in -5.0f64..5.0) {
        let votes = votes_from(&raw, m);
        let agent = agent % n;
        let mut shifted = vals.clone();
        for k in 0..m {
            shifted[agent * m + k] += c;
        }
        prop_assert!((loglik(n, m, &vals, &votes) - loglik(n, m, &shifted, &votes)).abs() <= 1e-10);
    }

    #[test]
    fn loglik_is_concave_on_segments((n, m, a, raw) in instance(), seed in prop::collection::vec(-3.0f64..3.0, 20)) {
        let votes = votes_from(&raw, m);
        let b: Vec<f64> = (0..a.len()).map(|k| seed[k % seed.len()] * (1.0 + k as f64 * 0.1)).collect();
        let at = |s: f64| {
            let v: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (1.0 - s) * x + s * y).collect();
            loglik(n, m, &v, &votes)
        };
        for s in [0.25, 0.5, 0.75] {
            let h = 0.1;
            prop_assert!(at(s + h) - 2.0 * at(s) + at(s - h) <= 1e-9);
        }
    }

    #[test]
    fn vote_records_round_trip(raw in prop::collection::vec((0usize..100, 0usize..100, prop::collection::vec(0u8..2, 3)), 1..5)) {
        for v in votes_from(&raw, 4) {
            prop_assert_eq!(VoteRecord::from_json_line(&v.to_json_line()).unwrap(), v);
        }
    }

    #[test]
    fn convolution_preserves_the_range(n in 1usize..6, seed in 0u64..10_000, u in prop::collection::vec(-5.0f64..5.0, 6)) {
        let g = sample_prior(n, seed).unwrap();
        let u = &u[..n];
        let v = convolve(&g, u).unwrap();
        let lo = u.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for x in v {
            prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        }
        for i in 0..n {
            prop_assert!((g.matrix().row(i).sum() - 1.0).abs() <= 1e-9);
            prop_assert!(g.matrix().row(i).iter().all(|a| *a >= 0.01 - 1e-12));
        }
    }

    #[test]
    fn log_prior_is_concave(n in 1usize..5, s1 in 0u64..10_000, s2 in 0u64..10_000, lambda in 0.01f64..0.99) {
        let a = sample_prior(n, s1).unwrap();
        let b = sample_prior(n, s2).unwrap();
        let mix = SocialGraph::floored(a.matrix() * lambda + b.matrix() * (1.0 - lambda), a.prior().clone()).unwrap();
        let rhs = lambda * log_prior(&a).unwrap() + (1.0 - lambda) * log_prior(&b).unwrap();
        prop_assert!(log_prior(&mix).unwrap() >= rhs - 1e-9);
    }

    #[test]
    fn gram_matrices_are_symmetric_psd(xs in prop::collection::vec(0.0f64..1.0, 1..8), ls in 0.05f64..2.0) {
        let pts: Vec<OptionPoint> = xs.iter().map(|x| OptionPoint::scalar(*x)).collect();
        let k = gram(&KernelSpec::rbf(ls), &pts).unwrap().matrix;
        prop_assert!((&k - k.transpose()).amax() <= 1e-15);
        let eig = k.clone().symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() >= -1e-9);
    }

    #[test]
    fn stable_inverse_inverts_well_conditioned_grams(xs in prop::collection::vec(0.0f64..1.0, 1..6)) {
        // spread points keep the Gram matrix well conditioned
        let pts: Vec<OptionPoint> = xs.iter().enumerate().map(|(k, x)| OptionPoint::scalar(k as f64 + 0.3 * x)).collect();
        let g = gram(&KernelSpec::rbf(0.5), &pts).unwrap();
        let inv = stable_inverse(&g).unwrap();
        let n = pts.len();
        prop_assert_eq!(inv.jitter, 0.0);
        prop_assert!((&g.matrix * &inv.inverse - DMatrix::identity(n, n)).amax() <= 1e-6);
    }

    #[test]
    fn unit_cube_mapping_round_trips(lo in -10.0f64..0.0, width in 0.1f64..20.0, t in 0.0f64..1.0) {
        let d = Domain::new(vec![lo], vec![lo + width]).unwrap();
        let x = d.from_unit(&[t]);
        prop_assert!(d.contains(&x));
        prop_assert!((d.to_unit(&x).coords()[0] - t).abs() <= 1e-12);
    }
}

fn ball_program(c: &[f64], radius: f64) -> ConvexProgram {
    let n = c.len();
    ConvexProgram::new(n, Objective::Linear(DVector::from_column_slice(c))).with_constraint(Constraint::QuadBall {
        indices: (0..n).collect(),
        matrix: Arc::new(DMatrix::identity(n, n)),
        bound: radius * radius,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn linear_objective_on_a_ball_reaches_radius_times_norm(
        c in prop::collection::vec(-3.0f64..3.0, 2..4),
        scale in 0.1f64..50.0,
        radius in 0.5f64..3.0,
    ) {
        for k in [1.0, scale] {
            let ck: Vec<f64> = c.iter().map(|v| v * k).collect();
            let best = radius * ck.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r = solve(&ball_program(&ck, radius), None).unwrap();
            prop_assert_eq!(r.status, SolveStatus::Optimal);
            prop_assert!(r.x.norm() <= radius);
            // the barrier stops with a duality gap of at most 1e-6
            prop_assert!(r.objective <= best + 1e-9 && r.objective >= best - 2e-6, "{} vs {}", r.objective, best);
        }
    }

    #[test]
    fn solver_is_deterministic_and_improves_on_warm_starts(c in prop::collection::vec(-3.0f64..3.0, 2..4), w in prop::collection::vec(-0.5f64..0.5, 4)) {
        let p = ball_program(&c, 1.0);
        let warm = DVector::from_column_slice(&w[..c.len()]);
        let a = solve(&p, Some(&warm)).unwrap();
        let b = solve(&p, Some(&warm)).unwrap();
        prop_assert_eq!(a.status, b.status);
        prop_assert_eq!(a.x.clone(), b.x.clone());
        prop_assert!(a.objective >= p.objective_value(&warm) - 1e-9);
    }
}
