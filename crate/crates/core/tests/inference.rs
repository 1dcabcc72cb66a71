use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbo_core::inference::{
    beta, BetaMode, BetaSchedule, Direction, Inference, InferenceConfig, MapEstimate, ModelKind, VoteData, WidthChannel,
};
use sbo_core::engine::{SessionConfig, SessionState};
use sbo_core::kernels::KernelSpec;
use sbo_core::point::{Domain, OptionPoint};
use sbo_core::preference::{Channel, VoteRecord};
use sbo_core::sim::{make_task, oracle_vote, TaskSpec};
use sbo_core::SboError;

fn p(x: f64) -> OptionPoint {
    OptionPoint::scalar(x)
}

fn vote(t: usize, x: f64, xp: f64, channel: Channel, outcomes: &[u8]) -> VoteRecord {
    VoteRecord {
        t,
        x: p(x),
        xp: p(xp),
        channel,
        outcomes: outcomes.to_vec(),
    }
}

fn coupled(n: usize) -> Inference {
    Inference::new(InferenceConfig::new(n, Domain::unit(1)), ModelKind::Coupled).unwrap()
}

fn fitted(inf: &Inference, votes: &[VoteRecord]) -> (VoteData, MapEstimate) {
    let data = VoteData::from_votes(inf.n(), votes).unwrap();
    let est = inf.fit_map(&data, None).unwrap();
    (data, est)
}

/// Chain of public and private toy votes from the simulated task.
fn toy_votes(rounds: usize, seed: u64) -> Vec<VoteRecord> {
    let task = make_task(&TaskSpec::Toy1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..=rounds).map(|k| (0.13 + 0.37 * k as f64) % 1.0).collect();
    let mut out = Vec::new();
    for t in 1..=rounds {
        let (x, xp) = (p(xs[t]), p(xs[t - 1]));
        out.push(oracle_vote(&task, t, &x, &xp, Channel::Public, &mut rng));
        if t % 2 == 1 {
            out.push(oracle_vote(&task, t, &x, &xp, Channel::Private, &mut rng));
        }
    }
    out
}

#[test]
fn beta_schedules() {
    let fixed = BetaSchedule::default();
    for (a, b) in [(0, 0), (3, 7), (100, 1000)] {
        let r = beta(&fixed, a, b);
        assert_eq!((r.joint, r.private, r.public), (0.5, 0.5, 0.5));
    }
    let growth = BetaSchedule {
        beta0: 0.5,
        mode: BetaMode::SqrtGrowth,
    };
    let r = beta(&growth, 0, 0);
    assert_eq!((r.joint, r.private, r.public), (0.5, 0.5, 0.5));
    let r = beta(&growth, 99, 0);
    assert!((r.private - 5.0).abs() < 1e-12);
    assert!((r.joint - 5.0).abs() < 1e-12);
    assert_eq!(r.public, 0.5);
    assert!(beta(&growth, 10, 10).joint >= beta(&growth, 9, 10).joint);
}

#[test]
fn radii_scale_with_the_norm_bound() {
    let mut inf = coupled(1);
    let data = VoteData::from_votes(1, &[vote(1, 0.8, 0.2, Channel::Public, &[1])]).unwrap();
    assert_eq!(inf.betas(&data).joint, 0.5);
    inf.norm_bound *= 4.0;
    assert!((inf.betas(&data).joint - 2.0).abs() < 1e-12);
}

#[test]
fn fit_needs_a_public_vote() {
    let inf = coupled(1);
    let data = VoteData::from_votes(1, &[vote(1, 0.8, 0.2, Channel::Private, &[1])]).unwrap();
    assert!(matches!(inf.fit_map(&data, None), Err(SboError::State(_))));
}

#[test]
fn single_public_vote_orders_the_pair() {
    let inf = coupled(1);
    let (data, est) = fitted(&inf, &[vote(1, 0.8, 0.2, Channel::Public, &[1])]);
    let (a, b) = (data.index_of(&p(0.8)).unwrap(), data.index_of(&p(0.2)).unwrap());
    assert!(est.v[(0, a)] > est.v[(0, b)]);
}

#[test]
fn public_only_data_leaves_the_graph_at_the_prior_mode() {
    let inf = coupled(2);
    let votes = [
        vote(1, 0.8, 0.2, Channel::Public, &[1, 0]),
        vote(2, 0.5, 0.8, Channel::Public, &[0, 1]),
    ];
    let (_, est) = fitted(&inf, &votes);
    let g = est.graph.expect("coupled model has a graph");
    for v in g.matrix().iter() {
        assert!((v - 0.5).abs() <= 1e-3, "{}", g.matrix());
    }
}

#[test]
fn symmetric_votes_give_equal_values() {
    let inf = coupled(1);
    let votes = [
        vote(1, 0.7, 0.3, Channel::Public, &[1]),
        vote(2, 0.3, 0.7, Channel::Public, &[1]),
    ];
    let (data, est) = fitted(&inf, &votes);
    let (a, b) = (data.index_of(&p(0.7)).unwrap(), data.index_of(&p(0.3)).unwrap());
    assert!((est.v[(0, a)] - est.v[(0, b)]).abs() <= 1e-3);
}

#[test]
fn public_values_follow_the_graph() {
    let inf = coupled(2);
    let (_, est) = fitted(&inf, &toy_votes(6, 1));
    let a = est.graph.as_ref().unwrap().matrix();
    let diff = (a * &est.u - &est.v).amax();
    assert!(diff <= 1e-6, "v - A u = {diff}");
}

#[test]
fn bounds_without_votes_are_the_norm_ball() {
    let inf = coupled(1);
    let data = VoteData::new(1);
    let state = SessionState::new(SessionConfig::new(1, Domain::unit(1))).unwrap();
    let up = inf.confidence_bound(&data, &state.estimate, &p(0.4), 0, Direction::Upper).unwrap();
    let lo = inf.confidence_bound(&data, &state.estimate, &p(0.4), 0, Direction::Lower).unwrap();
    assert!((up - 1.5).abs() <= 1e-5, "{up}");
    assert!((lo + 1.5).abs() <= 1e-5, "{lo}");
}

#[test]
fn bounds_sandwich_the_map_prediction() {
    let inf = coupled(2);
    let (data, est) = fitted(&inf, &toy_votes(6, 2));
    let domain = Domain::unit(1);
    for x in [p(0.13), p(0.5), p(0.95)] {
        let map = est.predict_u(&domain, &x);
        for agent in 0..2 {
            let up = inf.confidence_bound(&data, &est, &x, agent, Direction::Upper).unwrap();
            let lo = inf.confidence_bound(&data, &est, &x, agent, Direction::Lower).unwrap();
            assert!(lo <= map[agent] + 1e-5 && map[agent] <= up + 1e-5, "{lo} {} {up}", map[agent]);
        }
    }
}

#[test]
fn heavily_voted_points_have_narrower_bounds() {
    let inf = coupled(1);
    let mut votes = Vec::new();
    for t in 1..=12 {
        let (x, xp) = if t % 2 == 0 { (0.2, 0.25) } else { (0.25, 0.2) };
        votes.push(vote(t, x, xp, Channel::Public, &[u8::from(t % 3 == 0)]));
        votes.push(vote(t, x, xp, Channel::Private, &[u8::from(t % 3 != 0)]));
    }
    let (data, est) = fitted(&inf, &votes);
    let spread = |x: f64| {
        let up = inf.confidence_bound(&data, &est, &p(x), 0, Direction::Upper).unwrap();
        let lo = inf.confidence_bound(&data, &est, &p(x), 0, Direction::Lower).unwrap();
        up - lo
    };
    // only differences are identified, so compare the gap to a neighbour
    let near = inf
        .projection_width(&data, &est, &p(0.2), &p(0.25), WidthChannel::U)
        .unwrap()
        .width;
    let far = inf
        .projection_width(&data, &est, &p(0.9), &p(0.25), WidthChannel::U)
        .unwrap()
        .width;
    assert!(near < far, "{near} vs {far}");
    assert!(spread(0.2) <= spread(0.9) + 1e-6);
}

#[test]
fn acquisition_examples() {
    // a single function of norm L has f(x) - f(x') <= L sqrt(2 - 2k(x, x'))
    let mut cfg = InferenceConfig::new(2, Domain::unit(1));
    cfg.kernel = KernelSpec::rbf(0.05);
    let short = Inference::new(cfg, ModelKind::Coupled).unwrap();
    let state = SessionState::new(SessionConfig::new(2, Domain::unit(1))).unwrap();
    let empty = VoteData::new(2);
    let a = short.acquisition_value(&empty, &state.estimate, &p(0.3), &p(0.7)).unwrap();
    assert!((a - 1.5 * 2f64.sqrt()).abs() <= 1e-5, "{a}");
    let inf = coupled(2);
    let k = (-0.4f64.powi(2) / (2.0 * std::f64::consts::LN_2.powi(2))).exp();
    let a = inf.acquisition_value(&empty, &state.estimate, &p(0.3), &p(0.7)).unwrap();
    assert!((a - 1.5 * (2.0 * (1.0 - k)).sqrt()).abs() <= 1e-5, "{a}");
    let (data, est) = fitted(&inf, &toy_votes(5, 3));
    let same = inf.acquisition_value(&data, &est, &p(0.4), &p(0.4)).unwrap();
    assert!(same.abs() <= 1e-6, "{same}");
    let rule = inf.rule();
    let domain = Domain::unit(1);
    for (x, xp) in [(0.8, 0.2), (0.1, 0.6), (0.45, 0.5)] {
        let acq = inf.acquisition_value(&data, &est, &p(x), &p(xp)).unwrap();
        let point = rule.aggregate(&est.predict_u(&domain, &p(x))).unwrap()
            - rule.aggregate(&est.predict_u(&domain, &p(xp))).unwrap();
        assert!(acq >= point - 1e-5, "{acq} < {point}");
    }
}

#[test]
fn width_examples() {
    let inf = coupled(2);
    let state = SessionState::new(SessionConfig::new(2, Domain::unit(1))).unwrap();
    let empty = VoteData::new(2);
    let w = inf
        .projection_width(&empty, &state.estimate, &p(0.1), &p(0.9), WidthChannel::U)
        .unwrap();
    assert!(w.width <= 4.0 * 1.5 * 2f64.sqrt() + 1e-6);
    assert!(w.width > 0.0);
    let (data, est) = fitted(&inf, &toy_votes(5, 4));
    for channel in [WidthChannel::U, WidthChannel::V] {
        let same = inf.projection_width(&data, &est, &p(0.3), &p(0.3), channel).unwrap();
        assert!(same.width.abs() <= 1e-6);
    }
}

#[test]
fn width_grows_with_beta() {
    let votes = toy_votes(5, 5);
    let mut widths = Vec::new();
    for beta0 in [0.25, 0.5, 1.0] {
        let mut cfg = InferenceConfig::new(2, Domain::unit(1));
        cfg.beta.beta0 = beta0;
        let inf = Inference::new(cfg, ModelKind::Coupled).unwrap();
        let (data, est) = fitted(&inf, &votes);
        widths.push(inf.projection_width(&data, &est, &p(0.8), &p(0.35), WidthChannel::U).unwrap().width);
    }
    assert!(widths[0] <= widths[1] + 1e-5 && widths[1] <= widths[2] + 1e-5, "{widths:?}");
}

#[test]
fn benign_data_keeps_the_norm_bound() {
    let inf = coupled(2);
    let (data, est) = fitted(&inf, &toy_votes(4, 6));
    let (bound, _) = inf.adapt_norm_bound(&data, &est).unwrap();
    assert_eq!(bound, 1.5);
}

#[test]
fn loocv_edge_cases() {
    let inf = coupled(1);
    let votes = [
        vote(1, 0.7, 0.3, Channel::Public, &[1]),
        vote(2, 0.3, 0.7, Channel::Public, &[1]),
        vote(3, 0.5, 0.3, Channel::Public, &[0]),
        vote(4, 0.3, 0.5, Channel::Public, &[0]),
    ];
    let data = VoteData::from_votes(1, &votes).unwrap();
    assert!(matches!(inf.tune_kernel_loocv(&data, &[], 6), Err(SboError::Argument(_))));
    assert_eq!(inf.tune_kernel_loocv(&data, &[0.3], 6).unwrap().lengthscale, vec![0.3]);
    let short = VoteData::from_votes(1, &votes[..2]).unwrap();
    assert!(inf.tune_kernel_loocv(&short, &[0.1, 0.3], 6).is_err());
}

#[test]
fn loocv_ties_go_to_the_largest_lengthscale() {
    let inf = coupled(1);
    // every pair is voted both ways, so no lengthscale explains the data better
    let mut votes = Vec::new();
    for (t, (x, xp)) in [(0.1, 0.6), (0.6, 0.1), (0.3, 0.9), (0.9, 0.3)].into_iter().enumerate() {
        votes.push(vote(t + 1, x, xp, Channel::Public, &[1]));
    }
    let data = VoteData::from_votes(1, &votes).unwrap();
    let k = inf.tune_kernel_loocv(&data, &[0.05, 0.2, 0.4], 6).unwrap();
    assert_eq!(k.lengthscale, vec![0.4]);
}
