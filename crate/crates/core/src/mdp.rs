//! States, actions, rewards, transitions and the interaction history.

use thiserror::Error;

use crate::feeder::{FeederError, FeederTopology, TAP_STEP};

/// Tolerance for checking a stored reward against its recomputation.
pub const REWARD_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("timestamp {got} does not follow {last}")]
    NonMonotoneTimestamp { last: u64, got: u64 },
    #[error("record {k}: taps do not follow from the previous state and action")]
    ChainBroken { k: u64 },
    #[error("stored reward {stored} differs from recomputed {recomputed}")]
    RewardMismatch { stored: f64, recomputed: f64 },
    #[error("next taps do not equal current taps plus the action")]
    ActionMismatch,
    #[error("squared voltages must be positive and finite")]
    BadVoltage,
    #[error(transparent)]
    Feeder(#[from] FeederError),
}

/// MDP state: tap positions of every LTC and squared voltages at buses 1..N.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub positions: Vec<i32>,
    pub v: Vec<f64>,
}

impl SystemState {
    pub fn new(positions: Vec<i32>, v: Vec<f64>) -> Result<Self, MdpError> {
        if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(MdpError::BadVoltage);
        }
        Ok(Self { positions, v })
    }

    pub fn ratios(&self, topology: &FeederTopology) -> Result<Vec<f64>, FeederError> {
        topology.ratios(&self.positions)
    }
}

/// Tap changes, one entry per LTC, in position steps.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TapAction {
    pub steps: Vec<i32>,
}

impl TapAction {
    pub fn hold(n_ltc: usize) -> Self {
        Self {
            steps: vec![0; n_ltc],
        }
    }

    pub fn ratio_changes(&self) -> Vec<f64> {
        self.steps.iter().map(|&s| s as f64 * TAP_STEP).collect()
    }

    pub fn is_hold(&self) -> bool {
        self.steps.iter().all(|&s| s == 0)
    }

    /// Positions after applying this action to `positions`.
    pub fn apply(&self, positions: &[i32]) -> Vec<i32> {
        positions.iter().zip(&self.steps).map(|(p, d)| p + d).collect()
    }
}

/// `−(1/N)·‖v_next − v_star‖₂`.
pub fn reward(v_next: &[f64], v_star: &[f64]) -> Result<f64, MdpError> {
    if v_next.len() != v_star.len() || v_next.is_empty() {
        return Err(MdpError::LengthMismatch {
            left: v_next.len(),
            right: v_star.len(),
        });
    }
    let sq: f64 = v_next
        .iter()
        .zip(v_star)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(-sq.sqrt() / v_next.len() as f64)
}

/// Finite-horizon discounted sum `Σ γ^k r_k`. Requires `0 ≤ γ < 1`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    assert!((0.0..1.0).contains(&gamma), "discount must lie in [0, 1)");
    rewards
        .iter()
        .rev()
        .fold(0.0, |acc, r| r + gamma * acc)
}

/// A validated `(s, a, r, s')` tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: SystemState,
    pub a: TapAction,
    pub r: f64,
    pub s_next: SystemState,
}

impl Transition {
    /// Rejects tuples whose taps do not chain or whose reward disagrees with
    /// `reward(s_next.v, v_star)` beyond [`REWARD_TOL`].
    pub fn new(
        s: SystemState,
        a: TapAction,
        r: f64,
        s_next: SystemState,
        v_star: &[f64],
    ) -> Result<Self, MdpError> {
        if a.steps.len() != s.positions.len() || a.apply(&s.positions) != s_next.positions {
            return Err(MdpError::ActionMismatch);
        }
        let recomputed = reward(&s_next.v, v_star)?;
        if (recomputed - r).abs() > REWARD_TOL {
            return Err(MdpError::RewardMismatch {
                stored: r,
                recomputed,
            });
        }
        Ok(Self { s, a, r, s_next })
    }
}

/// One step of the history: the state at step `k`, the action taken in it
/// and the reward observed after that action.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub k: u64,
    /// Minutes since the start of the run.
    pub timestamp: u64,
    pub state: SystemState,
    pub action: TapAction,
    pub reward: f64,
}

/// Append-only, chained log of records with an optional retention window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    records: Vec<HistoryRecord>,
    retention: Option<usize>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps at most `records` of the most recent entries.
    pub fn with_retention(records: usize) -> Self {
        Self {
            records: Vec::new(),
            retention: Some(records),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[HistoryRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }

    /// Record with step index `k`, if retained.
    pub fn get(&self, k: u64) -> Option<&HistoryRecord> {
        let first = self.records.first()?.k;
        let idx = k.checked_sub(first)? as usize;
        self.records.get(idx).filter(|r| r.k == k)
    }

    /// The transition starting at step `k`: needs records `k` and `k + 1`.
    pub fn transition(&self, k: u64) -> Option<Transition> {
        let cur = self.get(k)?;
        let next = self.get(k + 1)?;
        Some(Transition {
            s: cur.state.clone(),
            a: cur.action.clone(),
            r: cur.reward,
            s_next: next.state.clone(),
        })
    }

    /// Validates and appends a record.
    pub fn append(&mut self, record: HistoryRecord) -> Result<(), MdpError> {
        if let Some(last) = self.records.last() {
            if record.timestamp <= last.timestamp {
                return Err(MdpError::NonMonotoneTimestamp {
                    last: last.timestamp,
                    got: record.timestamp,
                });
            }
            if record.k != last.k + 1
                || last.action.apply(&last.state.positions) != record.state.positions
            {
                return Err(MdpError::ChainBroken { k: record.k });
            }
        }
        if record.action.steps.len() != record.state.positions.len() {
            return Err(MdpError::LengthMismatch {
                left: record.action.steps.len(),
                right: record.state.positions.len(),
            });
        }
        self.records.push(record);
        if let Some(limit) = self.retention {
            if self.records.len() > limit {
                let excess = self.records.len() - limit;
                self.records.drain(..excess);
            }
        }
        Ok(())
    }
}

/// Functional form of [`History::append`].
pub fn append_history(mut h: History, record: HistoryRecord) -> Result<History, MdpError> {
    h.append(record)?;
    Ok(h)
}
