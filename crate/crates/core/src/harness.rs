//! Episode execution and metrics.
//!
//! Each step `k` observes `s_k = (taps_k, v_k)` with `v_k` solved from the
//! step's injections, asks the controller for a move, applies it, and solves
//! the next step's injections under the new taps to obtain `r_k`. Loads are
//! piecewise constant over a step. A warm-up phase holds all taps while the
//! history fills; only the steps after it are logged and scored.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::control::{ControlDecision, ControlError, Controller, StepContext};
use crate::feeder::FeederError;
use crate::feeder::FeederTopology;
use crate::loads::{LoadError, LoadProfile};
use crate::mdp::{reward, History, HistoryRecord, MdpError, SystemState};
use crate::powerflow::{EnvironmentSolver, PowerFlowError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("episode log is empty")]
    EmptyLog,
    #[error("load profile has {got} steps, episode needs {needed}")]
    ProfileTooShort { needed: usize, got: usize },
    #[error("profile has {got} buses, feeder has {expected}")]
    ProfileMismatch { expected: usize, got: usize },
    #[error("{source_name}:{line}:{column}: {message}")]
    Parse {
        source_name: String,
        line: u64,
        column: u64,
        message: String,
    },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Load(#[from] LoadError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    /// Steps run with all taps held before scoring starts.
    pub warmup_steps: usize,
    /// Scored steps.
    pub steps: usize,
    pub steps_per_day: usize,
    pub solver: EnvironmentSolver,
    pub v_star: Vec<f64>,
    pub v_low: f64,
    pub v_high: f64,
    /// History retention in records; `None` keeps everything.
    pub history_retention: Option<usize>,
}

impl EpisodeConfig {
    /// One scored day after `warmup_days` of warm-up, 5-minute steps.
    pub fn days(n: usize, warmup_days: usize, scored_days: usize) -> Self {
        Self {
            warmup_steps: warmup_days * 288,
            steps: scored_days * 288,
            steps_per_day: 288,
            solver: EnvironmentSolver::default(),
            v_star: vec![1.0; n],
            v_low: 0.9,
            v_high: 1.1,
            history_retention: Some(7 * 288),
        }
    }
}

/// One scored step: state `s_k`, action `a_k`, and `r_k` computed from the
/// voltages `v_next` the action led to.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub k: u64,
    pub timestamp: u64,
    pub positions: Vec<i32>,
    /// Squared voltages of `s_k`.
    pub v: Vec<f64>,
    pub action: Vec<i32>,
    /// Squared voltages of `s_{k+1}`.
    pub v_next: Vec<f64>,
    pub reward: f64,
    pub decision: ControlDecision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub controller: String,
    pub steps_per_day: usize,
    pub step_minutes: u32,
    pub records: Vec<EpisodeRecord>,
}

impl EpisodeLog {
    pub fn rewards(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.reward).collect()
    }

    pub fn positions(&self) -> Vec<Vec<i32>> {
        self.records.iter().map(|r| r.positions.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryMetrics {
    pub controller: String,
    /// Mean reward over all scored steps.
    pub rho: f64,
    pub rho_per_day: Vec<f64>,
    /// Number of (step, LTC) pairs with a tap move.
    pub tap_changes: usize,
    /// Total tap positions travelled.
    pub tap_travel: u64,
    /// Steps whose resulting voltages leave `[v_low, v_high]` somewhere.
    pub violation_steps: usize,
    pub lstdq_calls: usize,
    pub lstdq_iterations: Vec<usize>,
    pub learning_seconds: f64,
    /// Wall time of each relearning round.
    pub relearn_seconds: Vec<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub log: EpisodeLog,
    pub metrics: SummaryMetrics,
    pub history: History,
    /// Set when the environment solver failed and the episode stopped early.
    pub failure: Option<String>,
}

/// Mean reward of each day of the log (a trailing partial day included).
pub fn daily_mean_reward(log: &EpisodeLog) -> Result<Vec<f64>, HarnessError> {
    if log.records.is_empty() {
        return Err(HarnessError::EmptyLog);
    }
    Ok(log
        .records
        .chunks(log.steps_per_day.max(1))
        .map(|day| day.iter().map(|r| r.reward).sum::<f64>() / day.len() as f64)
        .collect())
}

fn summarize(
    log: &EpisodeLog,
    cfg: &EpisodeConfig,
    controller: &dyn Controller,
    started: Instant,
) -> SummaryMetrics {
    let rewards = log.rewards();
    let rho = if rewards.is_empty() {
        0.0
    } else {
        rewards.iter().sum::<f64>() / rewards.len() as f64
    };
    let stats = controller.learning_stats();
    SummaryMetrics {
        controller: log.controller.clone(),
        rho,
        rho_per_day: daily_mean_reward(log).unwrap_or_default(),
        tap_changes: log
            .records
            .iter()
            .map(|r| r.action.iter().filter(|&&a| a != 0).count())
            .sum(),
        tap_travel: log
            .records
            .iter()
            .flat_map(|r| r.action.iter())
            .map(|a| a.unsigned_abs() as u64)
            .sum(),
        violation_steps: log
            .records
            .iter()
            .filter(|r| {
                r.v_next
                    .iter()
                    .any(|v| !(cfg.v_low..=cfg.v_high).contains(&v.sqrt()))
            })
            .count(),
        lstdq_calls: stats.map_or(0, |s| s.lstdq_calls()),
        lstdq_iterations: stats.map_or_else(Vec::new, |s| s.iterations()),
        learning_seconds: stats.map_or(0.0, |s| s.wall_time().as_secs_f64()),
        relearn_seconds: stats.map_or_else(Vec::new, |s| {
            s.reports.iter().map(|r| r.elapsed.as_secs_f64()).collect()
        }),
        wall_seconds: started.elapsed().as_secs_f64(),
    }
}

/// Runs warm-up plus scored steps of `profile` under `controller`.
pub fn run_episode(
    topology: &FeederTopology,
    profile: &LoadProfile,
    controller: &mut dyn Controller,
    cfg: &EpisodeConfig,
) -> Result<EpisodeOutcome, HarnessError> {
    let started = Instant::now();
    let total = cfg.warmup_steps + cfg.steps;
    if profile.len() < total + 1 {
        return Err(HarnessError::ProfileTooShort {
            needed: total + 1,
            got: profile.len(),
        });
    }
    if profile.n_buses() != topology.n() {
        return Err(HarnessError::ProfileMismatch {
            expected: topology.n(),
            got: profile.n_buses(),
        });
    }
    let mut history = match cfg.history_retention {
        Some(n) => History::with_retention(n),
        None => History::new(),
    };
    let mut log = EpisodeLog {
        controller: controller.name().to_string(),
        steps_per_day: cfg.steps_per_day,
        step_minutes: profile.step_minutes,
        records: Vec::with_capacity(cfg.steps),
    };
    let minutes = profile.step_minutes as u64;
    let n_ltc = topology.ltc_count();

    let mut positions = topology.neutral_positions();
    let mut v = match cfg
        .solver
        .solve(topology, &topology.ratios(&positions)?, &profile.steps[0])
    {
        Ok(state) => state.v,
        Err(e) => {
            let metrics = summarize(&log, cfg, controller, started);
            return Ok(EpisodeOutcome {
                log,
                metrics,
                history,
                failure: Some(format!("step 0: {e}")),
            });
        }
    };
    let mut failure = None;
    for k in 0..total {
        let state = SystemState::new(positions.clone(), v.clone())?;
        let decision = if k < cfg.warmup_steps {
            ControlDecision::hold(n_ltc)
        } else {
            let truth = controller.needs_truth().then(|| &profile.steps[k + 1]);
            controller.decide(&StepContext {
                k: k as u64,
                state: &state,
                history: &history,
                next_injections: truth,
            })?
        };
        let action = decision.action();
        let next_positions = action.apply(&positions);
        let next_v = match topology.ratios(&next_positions).map_err(PowerFlowError::from).and_then(
            |taps| cfg.solver.solve(topology, &taps, &profile.steps[k + 1]),
        ) {
            Ok(s) => s.v,
            Err(e) => {
                failure = Some(format!("step {}: {e}", k + 1));
                break;
            }
        };
        let r = reward(&next_v, &cfg.v_star)?;
        history.append(HistoryRecord {
            k: k as u64,
            timestamp: k as u64 * minutes,
            state,
            action: action.clone(),
            reward: r,
        })?;
        if k >= cfg.warmup_steps {
            log.records.push(EpisodeRecord {
                k: k as u64,
                timestamp: k as u64 * minutes,
                positions: positions.clone(),
                v: v.clone(),
                action: action.steps,
                v_next: next_v.clone(),
                reward: r,
                decision,
            });
        }
        positions = next_positions;
        v = next_v;
    }
    let metrics = summarize(&log, cfg, controller, started);
    Ok(EpisodeOutcome {
        log,
        metrics,
        history,
        failure,
    })
}

/// Fraction of steps on which two logs hold identical tap positions after
/// acting.
pub fn tap_agreement(a: &EpisodeLog, b: &EpisodeLog) -> f64 {
    let n = a.records.len().min(b.records.len());
    if n == 0 {
        return 0.0;
    }
    let same = a
        .records
        .iter()
        .zip(&b.records)
        .filter(|(x, y)| {
            let px: Vec<i32> = x.positions.iter().zip(&x.action).map(|(p, d)| p + d).collect();
            let py: Vec<i32> = y.positions.iter().zip(&y.action).map(|(p, d)| p + d).collect();
            px == py
        })
        .count();
    same as f64 / n as f64
}
