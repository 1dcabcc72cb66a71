use sbo::session::{EventKind, LiveSession, SessionError, Winner};
use sbo::store::{read_log, EventStore};
use sbo_core::engine::SessionConfig;
use sbo_core::point::Domain;
use sbo_core::preference::Channel;

fn session() -> LiveSession {
    let mut c = SessionConfig::new(2, Domain::unit(1));
    c.seed = 9;
    c.acq_candidates = 16;
    LiveSession::create("s1".into(), c, vec!["a".into(), "b".into()]).unwrap()
}

fn play_round(s: &mut LiveSession, winners: [Winner; 2]) {
    let round = s.round();
    while s.round() == round {
        let channel = s.next_pair().awaiting;
        s.submit_vote(0, channel, winners[0], "a").unwrap();
        s.submit_vote(1, channel, winners[1], "b").unwrap();
    }
}

#[test]
fn event_log_shape() {
    let mut s = session();
    assert_eq!(s.events().len(), 2);
    assert_eq!(s.events()[0].kind, EventKind::Created);
    assert_eq!(s.events()[1].kind, EventKind::PairProposed);
    play_round(&mut s, [Winner::X, Winner::XPrev]);
    let kinds: Vec<EventKind> = s.events().iter().map(|e| e.kind).collect();
    assert_eq!(kinds.iter().filter(|k| **k == EventKind::RoundClosed).count(), 1);
    assert_eq!(*kinds.last().unwrap(), EventKind::PairProposed);
    for (k, e) in s.events().iter().enumerate() {
        assert_eq!(e.seq, k as u64);
    }
}

#[test]
fn replay_reproduces_the_session() {
    let mut s = session();
    for k in 0..4 {
        let w = if k % 2 == 0 { [Winner::X, Winner::X] } else { [Winner::XPrev, Winner::X] };
        play_round(&mut s, w);
    }
    let r = LiveSession::replay(s.events()).unwrap();
    assert_eq!(r, s);
    assert_eq!(r.trace_csv(), s.trace_csv());
}

#[test]
fn rejected_ballots_do_not_enter_the_log() {
    let mut s = session();
    let before = s.events().len();
    assert!(matches!(
        s.submit_vote(0, Channel::Public, Winner::X, "b"),
        Err(SessionError::Unauthorized(_))
    ));
    assert!(matches!(
        s.submit_vote(0, Channel::Private, Winner::X, "a"),
        Err(SessionError::Engine(_))
    ));
    s.submit_vote(0, Channel::Public, Winner::X, "a").unwrap();
    assert!(matches!(
        s.submit_vote(0, Channel::Public, Winner::X, "a"),
        Err(SessionError::Conflict(_))
    ));
    assert_eq!(s.events().len(), before + 1);
}

#[test]
fn store_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let store = EventStore::open(dir.path().join("logs")).unwrap();
    let mut s = session();
    store.append(&s.id, s.events()).unwrap();
    let from = s.events().len();
    play_round(&mut s, [Winner::X, Winner::X]);
    store.append(&s.id, &s.events()[from..]).unwrap();
    store.append(&s.id, &[]).unwrap();

    assert_eq!(store.ids().unwrap(), vec!["s1".to_string()]);
    assert_eq!(store.load("s1").unwrap(), s.events());
    assert_eq!(LiveSession::replay(&store.load("s1").unwrap()).unwrap(), s);

    let path = store.path_for("s1");
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();

    let swapped = [lines[1], lines[0]].into_iter().chain(lines[2..].iter().copied()).collect::<Vec<_>>().join("\n");
    std::fs::write(&path, swapped).unwrap();
    assert!(matches!(read_log(&path), Err(SessionError::Log(m)) if m.contains("out of order")));

    std::fs::write(&path, format!("{}\n{{broken", lines[0])).unwrap();
    assert!(matches!(read_log(&path), Err(SessionError::Log(m)) if m.contains("line 2")));

    assert!(matches!(store.load("missing"), Err(SessionError::Log(_))));
}

#[test]
fn replay_rejects_divergent_logs() {
    let mut s = session();
    play_round(&mut s, [Winner::X, Winner::X]);
    assert!(matches!(LiveSession::replay(&[]), Err(SessionError::Log(_))));
    assert!(matches!(LiveSession::replay(&s.events()[1..]), Err(SessionError::Log(_))));

    // a tampered proposal no longer matches what the engine derives
    let mut events = s.events().to_vec();
    let at = events.iter().position(|e| e.kind == EventKind::PairProposed).unwrap();
    events[at].payload["x"] = serde_json::json!([0.123456]);
    assert!(matches!(LiveSession::replay(&events), Err(SessionError::Log(m)) if m.contains("diverges")));

    // a vote filed under the wrong round
    let mut events = s.events().to_vec();
    let at = events.iter().position(|e| e.kind == EventKind::VoteSubmitted).unwrap();
    events[at].payload["round"] = serde_json::json!(7);
    assert!(matches!(LiveSession::replay(&events), Err(SessionError::Log(m)) if m.contains("round 7")));
}
