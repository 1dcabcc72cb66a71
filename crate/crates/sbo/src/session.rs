//! A live voting session: collects individual ballots into vote records,
//! drives the engine, and keeps an append-only event log for replay.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use sbo_core::engine::{SessionConfig, SessionState};
use sbo_core::point::OptionPoint;
use sbo_core::preference::{Channel, VoteRecord};
use sbo_core::SboError;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("{0}")]
    Engine(#[from] SboError),
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("corrupt event log: {0}")]
    Log(String),
}

pub type SessionResult<T> = Result<T, SessionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Created,
    PairProposed,
    VoteSubmitted,
    RoundClosed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub payload: Value,
}

impl SessionEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("events always serialise")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    X,
    XPrev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CreatedPayload {
    id: String,
    config: SessionConfig,
    voter_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PairPayload {
    round: usize,
    x: OptionPoint,
    x_prev: OptionPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VotePayload {
    round: usize,
    agent: usize,
    channel: Channel,
    winner: Winner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClosedPayload {
    round: usize,
    private: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextPair {
    pub round: usize,
    pub x: OptionPoint,
    pub x_prev: OptionPoint,
    pub awaiting: Channel,
    pub voted_agents: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteAck {
    pub round: usize,
    pub accepted: bool,
    /// True when this ballot completed its phase.
    pub phase_closed: bool,
    pub awaiting: Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub round: usize,
    pub consensus: OptionPoint,
    pub points: Vec<OptionPoint>,
    /// MAP private utilities, one list per agent, aligned with `points`.
    pub map_utilities: Vec<Vec<f64>>,
    pub w_u: Option<f64>,
    pub w_v: Option<f64>,
    pub private_query_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiveSession {
    pub id: String,
    pub state: SessionState,
    pub voter_tokens: Vec<String>,
    /// Ballots of the open phase; `Some(true)` means `x` won.
    ballots: Vec<Option<bool>>,
    events: Vec<SessionEvent>,
}

impl LiveSession {
    pub fn create(id: String, config: SessionConfig, voter_tokens: Vec<String>) -> SessionResult<Self> {
        if voter_tokens.len() != config.n {
            return Err(SboError::Argument("one voter token per agent is required".into()).into());
        }
        let payload = serde_json::to_value(CreatedPayload {
            id: id.clone(),
            config: config.clone(),
            voter_tokens: voter_tokens.clone(),
        })
        .expect("config serialises");
        let n = config.n;
        let state = SessionState::new(config)?;
        let mut s = Self {
            id,
            state,
            voter_tokens,
            ballots: vec![None; n],
            events: Vec::new(),
        };
        s.push(EventKind::Created, payload);
        s.open_round()?;
        Ok(s)
    }

    /// Rebuilds a session from its event log and checks that every derived
    /// event matches the recorded one.
    pub fn replay(events: &[SessionEvent]) -> SessionResult<Self> {
        let first = events.first().ok_or_else(|| SessionError::Log("empty log".into()))?;
        if first.kind != EventKind::Created {
            return Err(SessionError::Log("log does not start with a created event".into()));
        }
        let created: CreatedPayload =
            serde_json::from_value(first.payload.clone()).map_err(|e| SessionError::Log(e.to_string()))?;
        let mut s = Self::create(created.id, created.config, created.voter_tokens)?;
        for ev in &events[1..] {
            if ev.kind == EventKind::VoteSubmitted {
                let v: VotePayload =
                    serde_json::from_value(ev.payload.clone()).map_err(|e| SessionError::Log(e.to_string()))?;
                if v.round != s.round() {
                    return Err(SessionError::Log(format!("vote for round {} replayed in round {}", v.round, s.round())));
                }
                s.apply_vote(v.agent, v.channel, v.winner)?;
            }
        }
        if s.events != events {
            let at = s.events.iter().zip(events).position(|(a, b)| a != b).unwrap_or(s.events.len().min(events.len()));
            return Err(SessionError::Log(format!("replay diverges from the log at event {at}")));
        }
        Ok(s)
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    /// Current round number, starting at 1.
    pub fn round(&self) -> usize {
        self.state.round + 1
    }

    fn push(&mut self, kind: EventKind, payload: Value) {
        let seq = self.events.len() as u64;
        self.events.push(SessionEvent { seq, kind, payload });
    }

    fn open_round(&mut self) -> SessionResult<()> {
        let x = self.state.propose_next()?;
        let payload = PairPayload {
            round: self.round(),
            x,
            x_prev: self.state.x_prev().clone(),
        };
        self.push(EventKind::PairProposed, serde_json::to_value(payload).expect("pair serialises"));
        Ok(())
    }

    pub fn next_pair(&self) -> NextPair {
        let (x, x_prev) = self.state.current_pair().expect("a live session always has an open pair");
        NextPair {
            round: self.round(),
            x,
            x_prev,
            awaiting: self.state.awaiting().expect("open pair"),
            voted_agents: (0..self.ballots.len()).filter(|&i| self.ballots[i].is_some()).collect(),
            labels: self.state.config.labels.clone(),
        }
    }

    /// Records one agent's ballot; `token` is checked against the agent's
    /// voter token.
    pub fn submit_vote(&mut self, agent: usize, channel: Channel, winner: Winner, token: &str) -> SessionResult<VoteAck> {
        let expected = self
            .voter_tokens
            .get(agent)
            .ok_or_else(|| SboError::Argument(format!("agent {agent} is out of range")))?;
        if expected != token {
            return Err(SessionError::Unauthorized(format!("bad token for agent {agent}")));
        }
        self.apply_vote(agent, channel, winner)
    }

    fn apply_vote(&mut self, agent: usize, channel: Channel, winner: Winner) -> SessionResult<VoteAck> {
        let n = self.state.config.n;
        if agent >= n {
            return Err(SboError::Argument(format!("agent {agent} is out of range")).into());
        }
        let awaiting = self.state.awaiting().expect("open pair");
        if channel != awaiting {
            return Err(SboError::Protocol(format!(
                "round {} is collecting {:?} votes",
                self.round(),
                awaiting
            ))
            .into());
        }
        if self.ballots[agent].is_some() {
            return Err(SessionError::Conflict(format!("agent {agent} already voted in this phase")));
        }
        let round = self.round();
        self.ballots[agent] = Some(winner == Winner::X);
        let payload = VotePayload {
            round,
            agent,
            channel,
            winner,
        };
        self.push(EventKind::VoteSubmitted, serde_json::to_value(payload).expect("vote serialises"));
        if self.ballots.iter().any(Option::is_none) {
            return Ok(VoteAck {
                round,
                accepted: true,
                phase_closed: false,
                awaiting,
            });
        }
        let (x, xp) = self.state.current_pair().expect("open pair");
        let record = VoteRecord {
            t: round,
            x,
            xp,
            channel,
            outcomes: self.ballots.iter().map(|b| u8::from(b.unwrap_or(false))).collect(),
        };
        self.ballots = vec![None; n];
        self.state.ingest_vote(record)?;
        if self.state.pending.is_none() {
            let private = self.state.trace.last().is_some_and(|r| r.private);
            let payload = ClosedPayload { round, private };
            self.push(EventKind::RoundClosed, serde_json::to_value(payload).expect("close serialises"));
            self.open_round()?;
        }
        Ok(VoteAck {
            round: self.round(),
            accepted: true,
            phase_closed: true,
            awaiting: self.state.awaiting().expect("open pair"),
        })
    }

    pub fn estimate(&self) -> SessionResult<Estimate> {
        let consensus = self.state.consensus_estimate()?;
        let domain = &self.state.config.domain;
        let est = &self.state.estimate;
        let points = self.state.queried.clone();
        let mut map_utilities = vec![Vec::with_capacity(points.len()); est.rows()];
        for x in &points {
            for (r, v) in est.predict_u(domain, x).into_iter().enumerate() {
                map_utilities[r].push(v);
            }
        }
        let last = self.state.trace.last();
        Ok(Estimate {
            round: self.state.round,
            consensus,
            points,
            map_utilities,
            w_u: last.and_then(|r| r.w_u),
            w_v: last.and_then(|r| r.w_v),
            private_query_count: self.state.private_count(),
        })
    }

    pub fn trace_csv(&self) -> String {
        self.state.trace_csv()
    }
}
