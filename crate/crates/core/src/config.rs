//! TOML run configuration.
//!
//! Top-level keys are the controller constants (`K`, `J`, `D`, `gamma`, ...)
//! plus `controller`; the tables `[episode]` and `[loads]` and the array
//! `[[tap_windows]]` describe the simulation around it.

use serde::{Deserialize, Serialize};

use std::sync::Arc;

use crate::control::{
    ControlError, Controller, ControllerConfig, ControllerKind, ConventionalController,
    ExhaustiveController, LearnMode, RlController,
};
use crate::feeder::{FeederTopology, FeederError};
use crate::harness::{EpisodeConfig, HarnessError};
use crate::loads::LoadConfig;
use crate::powerflow::{EnvironmentSolver, SweepOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    #[default]
    Sweep,
    Linear,
}

impl EnvKind {
    pub fn solver(self) -> EnvironmentSolver {
        match self {
            Self::Sweep => EnvironmentSolver::Sweep(SweepOptions::default()),
            Self::Linear => EnvironmentSolver::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSettings {
    /// Days run with taps held before scoring, filling the history.
    pub warmup_days: usize,
    /// Scored days.
    pub days: usize,
    pub env: EnvKind,
    /// History retention in days.
    pub retention_days: usize,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self {
            warmup_days: 5,
            days: 1,
            env: EnvKind::Sweep,
            retention_days: 7,
        }
    }
}

/// Position window override for the LTC on line `line`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapWindow {
    pub line: usize,
    pub pos_min: i32,
    pub pos_max: i32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub controller: Option<ControllerKind>,
    pub control: ControllerConfig,
    pub episode: EpisodeSettings,
    pub loads: LoadConfig,
    pub tap_windows: Vec<TapWindow>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Outer {
    controller: Option<ControllerKind>,
    #[serde(default)]
    episode: EpisodeSettings,
    #[serde(default)]
    loads: LoadConfig,
    #[serde(default)]
    tap_windows: Vec<TapWindow>,
}

fn toml_err(source: &str, text: &str, e: toml::de::Error) -> HarnessError {
    let (line, column) = e.span().map_or((0, 0), |span| {
        let before = &text[..span.start.min(text.len())];
        let line = before.matches('\n').count() + 1;
        let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
        (line as u64, column as u64)
    });
    HarnessError::Parse {
        source_name: source.to_string(),
        line,
        column,
        message: e.message().to_string(),
    }
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self, HarnessError> {
        Self::parse_over(text, source, &Self::default())
    }

    /// Parses `text` with every key it omits taken from `base`.
    pub fn parse_over(text: &str, source: &str, base: &RunConfig) -> Result<Self, HarnessError> {
        let config_err =
            |e: toml::de::Error| HarnessError::Config(format!("{source}: {}", e.message()));
        let to_table = |v: Result<toml::Table, toml::ser::Error>| {
            v.map_err(|e| HarnessError::Config(format!("{source}: {e}")))
        };
        let user: toml::Table = toml::from_str(text).map_err(|e| toml_err(source, text, e))?;
        let mut control = to_table(toml::Table::try_from(&base.control))?;
        let mut episode = to_table(toml::Table::try_from(&base.episode))?;
        let mut loads = to_table(toml::Table::try_from(&base.loads))?;
        let mut outer = toml::Table::new();
        if let Some(kind) = base.controller {
            outer.insert("controller".into(), kind.as_str().into());
        }
        let windows: Vec<toml::Value> = base
            .tap_windows
            .iter()
            .map(|w| toml::Value::try_from(w).expect("tap window serializes"))
            .collect();
        outer.insert("tap_windows".into(), windows.into());
        for (key, value) in user {
            match (key.as_str(), value) {
                ("episode", toml::Value::Table(t)) => episode.extend(t),
                ("loads", toml::Value::Table(t)) => loads.extend(t),
                ("controller" | "tap_windows", v) => {
                    outer.insert(key, v);
                }
                (_, v) => {
                    control.insert(key, v);
                }
            }
        }
        outer.insert("episode".into(), episode.into());
        outer.insert("loads".into(), loads.into());
        let outer: Outer = outer.try_into().map_err(config_err)?;
        let control: ControllerConfig = control.try_into().map_err(config_err)?;
        control
            .validate()
            .map_err(|m| HarnessError::Config(format!("{source}: {m}")))?;
        Ok(Self {
            controller: outer.controller,
            control,
            episode: outer.episode,
            loads: outer.loads,
            tap_windows: outer.tap_windows,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies the configured tap windows to `topology`.
    pub fn apply_windows(&self, topology: &FeederTopology) -> Result<FeederTopology, FeederError> {
        let windows: Vec<_> = self
            .tap_windows
            .iter()
            .map(|w| (w.line, w.pos_min, w.pos_max))
            .collect();
        topology.with_tap_windows(&windows)
    }

    pub fn episode_config(&self, n: usize, env: EnvKind) -> EpisodeConfig {
        let spd = self.control.steps_per_day;
        EpisodeConfig {
            warmup_steps: self.episode.warmup_days * spd,
            steps: self.episode.days * spd,
            steps_per_day: spd,
            solver: env.solver(),
            v_star: self.control.v_star_for(n),
            v_low: self.control.v_low,
            v_high: self.control.v_high,
            history_retention: Some(self.episode.retention_days.max(self.control.window_days + 1) * spd),
        }
    }

    /// Builds the controller of `kind`; the learner starts relearning once
    /// the warm-up has filled the history.
    pub fn build_controller(
        &self,
        kind: ControllerKind,
        topology: Arc<FeederTopology>,
        env: EnvKind,
        seed: u64,
        mode: LearnMode,
    ) -> Result<Box<dyn Controller>, ControlError> {
        let c = &self.control;
        Ok(match kind {
            ControllerKind::Rl => Box::new(
                RlController::new(topology, c.clone(), seed)?
                    .learn_from((self.episode.warmup_days * c.steps_per_day) as u64)
                    .with_mode(mode),
            ),
            ControllerKind::Conventional => {
                Box::new(ConventionalController::new(topology, c.v_low, c.v_high))
            }
            ControllerKind::Exhaustive => {
                let v_star = c.v_star_for(topology.n());
                Box::new(ExhaustiveController::new(
                    topology,
                    v_star,
                    c.enumeration_budget,
                    env.solver(),
                ))
            }
        })
    }

    /// Load settings sized to cover warm-up, scored days and one extra step.
    pub fn load_config(&self) -> LoadConfig {
        let mut loads = self.loads.clone();
        loads.days = loads.days.max(self.episode.warmup_days + self.episode.days + 1);
        loads
    }
}
