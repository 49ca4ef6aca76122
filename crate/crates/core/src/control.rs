//! Tap-setting controllers: the learned policy with deadband, a conventional
//! range-violation scheme and an exhaustive full-knowledge search.

use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, info};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{FeederError, FeederTopology, TapChanger};
use crate::learner::{
    action_value, greedy_action, select_base_transitions, sequential_learn, FeatureMap,
    HistoryWindow, LearnError, LearnReport, LstdqParams, SequentialConfig, WeightVector,
};
use crate::mdp::{reward, History, MdpError, SystemState, TapAction};
use crate::powerflow::{
    estimate_voltage_under_taps, EnvironmentSolver, Injections, PowerFlowError, VoltageState,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("{combinations} tap combinations exceed the enumeration budget of {budget}")]
    BudgetExceeded { combinations: u128, budget: u64 },
    #[error("exhaustive search needs the true injections of the next step")]
    MissingTruth,
    #[error("no tap combination produced a converged power flow")]
    NoFeasibleCombination,
    #[error("learning task panicked")]
    LearnerPanicked,
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Rl,
    Conventional,
    Exhaustive,
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Rl => "rl",
            Self::Conventional => "conventional",
            Self::Exhaustive => "exhaustive",
        }
    }
}

/// RBF center placement for one LTC: `κ` centers `(start + step·i)²·1_N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterSpec {
    pub ltc: usize,
    pub start: f64,
    pub step: f64,
}

/// Controller and learning constants. Field names in config files follow
/// the `serde` renames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Relearn period in steps.
    #[serde(rename = "K")]
    pub k_period: usize,
    /// Round-robin sweeps; `None` picks 1 for a single LTC and 3 otherwise.
    #[serde(rename = "J")]
    pub sweeps: Option<usize>,
    /// Virtual transitions per batch.
    #[serde(rename = "D")]
    pub batch_size: usize,
    /// Minimum action-value gain before a tap moves.
    pub epsilon_deadband: f64,
    pub gamma: f64,
    pub epsilon_converge: f64,
    pub c: f64,
    pub sigma: f64,
    pub kappa: usize,
    pub center_start: f64,
    pub center_step: f64,
    /// Per-LTC replacements of `center_start`/`center_step`.
    pub centers: Vec<CenterSpec>,
    /// Reference squared voltages; all ones when absent.
    pub v_star: Option<Vec<f64>>,
    pub v_low: f64,
    pub v_high: f64,
    pub max_lstdq_iterations: usize,
    pub window_days: usize,
    /// Width of the sampled time-of-day interval; defaults to `K`.
    pub window_interval: Option<usize>,
    pub steps_per_day: usize,
    pub enumeration_budget: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            k_period: 24,
            sweeps: None,
            batch_size: 6000,
            epsilon_deadband: 1e-4,
            gamma: 0.9,
            epsilon_converge: 1e-5,
            c: 0.1,
            sigma: 1.0,
            kappa: 21,
            center_start: 0.895,
            center_step: 0.005,
            centers: Vec::new(),
            v_star: None,
            v_low: 0.9,
            v_high: 1.1,
            max_lstdq_iterations: 50,
            window_days: 5,
            window_interval: None,
            steps_per_day: 288,
            enumeration_budget: 1_000_000,
        }
    }
}

impl ControllerConfig {
    pub fn sweeps_for(&self, n_ltc: usize) -> usize {
        self.sweeps.unwrap_or(if n_ltc <= 1 { 1 } else { 3 })
    }

    pub fn v_star_for(&self, n: usize) -> Vec<f64> {
        self.v_star.clone().unwrap_or_else(|| vec![1.0; n])
    }

    pub fn lstdq_params(&self) -> LstdqParams {
        LstdqParams {
            gamma: self.gamma,
            epsilon: self.epsilon_converge,
            c: self.c,
            max_iterations: self.max_lstdq_iterations,
        }
    }

    pub fn history_window(&self) -> HistoryWindow {
        HistoryWindow {
            days: self.window_days,
            interval: self.window_interval.unwrap_or(self.k_period),
            steps_per_day: self.steps_per_day,
        }
    }

    pub fn feature_maps(&self, topology: &FeederTopology) -> Result<Vec<FeatureMap>, LearnError> {
        if let Some(c) = self.centers.iter().find(|c| c.ltc >= topology.ltc_count()) {
            return Err(LearnError::BadFeatureMap(format!(
                "center override for LTC {} but the feeder has {}",
                c.ltc,
                topology.ltc_count()
            )));
        }
        (0..topology.ltc_count())
            .map(|l| {
                let (start, step) = self
                    .centers
                    .iter()
                    .find(|c| c.ltc == l)
                    .map_or((self.center_start, self.center_step), |c| (c.start, c.step));
                FeatureMap::uniform(topology, l, self.kappa, start, step, self.sigma)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k_period < 1 || self.batch_size < 1 || self.sweeps == Some(0) {
            return Err("K, J and D must be at least 1".into());
        }
        if self.epsilon_deadband.is_nan() || self.epsilon_deadband < 0.0 {
            return Err("epsilon_deadband must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err("gamma must lie in [0, 1)".into());
        }
        if !(self.epsilon_converge > 0.0 && self.c > 0.0 && self.sigma > 0.0) || self.kappa < 1 {
            return Err("epsilon_converge, c, sigma and kappa must be positive".into());
        }
        if self.v_low.partial_cmp(&self.v_high) != Some(std::cmp::Ordering::Less) {
            return Err("v_low must be below v_high".into());
        }
        Ok(())
    }
}

/// Per-LTC outcome of one control instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlDecision {
    pub steps: Vec<i32>,
    /// Whether each LTC left its hold action.
    pub moved: Vec<bool>,
    /// Value of the preferred move (controller-specific scale).
    pub greedy_values: Vec<f64>,
    /// Value of holding.
    pub incumbent_values: Vec<f64>,
}

impl ControlDecision {
    pub fn hold(n_ltc: usize) -> Self {
        Self {
            steps: vec![0; n_ltc],
            moved: vec![false; n_ltc],
            greedy_values: vec![0.0; n_ltc],
            incumbent_values: vec![0.0; n_ltc],
        }
    }

    pub fn action(&self) -> TapAction {
        TapAction {
            steps: self.steps.clone(),
        }
    }
}

/// What a controller sees at step `k`. `next_injections` is only populated
/// for controllers granted full system knowledge.
pub struct StepContext<'a> {
    pub k: u64,
    pub state: &'a SystemState,
    pub history: &'a History,
    pub next_injections: Option<&'a Injections>,
}

pub trait Controller {
    fn name(&self) -> &str;

    fn decide(&mut self, ctx: &StepContext<'_>) -> Result<ControlDecision, ControlError>;

    /// Whether [`StepContext::next_injections`] must be supplied.
    fn needs_truth(&self) -> bool {
        false
    }

    fn learning_stats(&self) -> Option<&LearningStats> {
        None
    }
}

/// Keeps every tap where it is.
#[derive(Debug, Default, Clone)]
pub struct HoldController;

impl Controller for HoldController {
    fn name(&self) -> &str {
        "hold"
    }

    fn decide(&mut self, ctx: &StepContext<'_>) -> Result<ControlDecision, ControlError> {
        Ok(ControlDecision::hold(ctx.state.positions.len()))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningStats {
    pub reports: Vec<LearnReport>,
}

impl LearningStats {
    pub fn lstdq_calls(&self) -> usize {
        self.reports.iter().map(|r| r.lstdq_calls).sum()
    }

    pub fn iterations(&self) -> Vec<usize> {
        self.reports
            .iter()
            .flat_map(|r| r.iterations.iter().copied())
            .collect()
    }

    pub fn wall_time(&self) -> Duration {
        self.reports.iter().map(|r| r.elapsed).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnMode {
    /// Learning runs inside the step that triggers it.
    Sync,
    /// Learning runs on a worker thread; the actor keeps the previous weights
    /// until the new snapshot is published.
    Background,
}

type LearnJob = JoinHandle<Result<(Vec<WeightVector>, LearnReport), LearnError>>;

/// Learned tap-setting policy with periodic batch relearning.
pub struct RlController {
    topology: Arc<FeederTopology>,
    cfg: ControllerConfig,
    v_star: Vec<f64>,
    feature_maps: Arc<Vec<FeatureMap>>,
    weights: Arc<Vec<WeightVector>>,
    rng: ChaCha8Rng,
    learn_from: u64,
    mode: LearnMode,
    pending: Option<LearnJob>,
    stats: LearningStats,
}

impl RlController {
    pub fn new(
        topology: Arc<FeederTopology>,
        cfg: ControllerConfig,
        seed: u64,
    ) -> Result<Self, ControlError> {
        let feature_maps = cfg.feature_maps(&topology)?;
        let weights = feature_maps
            .iter()
            .map(|fm| WeightVector::zeros(fm.dim()))
            .collect();
        Ok(Self {
            v_star: cfg.v_star_for(topology.n()),
            topology,
            cfg,
            feature_maps: Arc::new(feature_maps),
            weights: Arc::new(weights),
            rng: ChaCha8Rng::seed_from_u64(seed),
            learn_from: 0,
            mode: LearnMode::Sync,
            pending: None,
            stats: LearningStats::default(),
        })
    }

    /// Suppresses learning before step `k` (history warm-up).
    pub fn learn_from(mut self, k: u64) -> Self {
        self.learn_from = k;
        self
    }

    pub fn with_mode(mut self, mode: LearnMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_weights(mut self, weights: Vec<WeightVector>) -> Self {
        self.weights = Arc::new(weights);
        self
    }

    pub fn weights(&self) -> &[WeightVector] {
        &self.weights
    }

    pub fn feature_maps(&self) -> &[FeatureMap] {
        &self.feature_maps
    }

    fn sequential_config(&self) -> SequentialConfig {
        SequentialConfig {
            sweeps: self.cfg.sweeps_for(self.topology.ltc_count()),
            batch_size: self.cfg.batch_size,
            lstdq: self.cfg.lstdq_params(),
            v_star: self.v_star.clone(),
        }
    }

    fn collect_finished(&mut self, block: bool) -> Result<(), ControlError> {
        let ready = self
            .pending
            .as_ref()
            .is_some_and(|job| block || job.is_finished());
        if ready {
            let job = self.pending.take().expect("checked above");
            let (weights, report) = job.join().map_err(|_| ControlError::LearnerPanicked)??;
            self.weights = Arc::new(weights);
            self.stats.reports.push(report);
        }
        Ok(())
    }

    /// Relearns all weights from the history window ending at `k`.
    pub fn learn(&mut self, k: u64, history: &History) -> Result<(), ControlError> {
        let base = select_base_transitions(history, k, &self.cfg.history_window(), &self.v_star)?;
        if base.is_empty() {
            debug!("step {k}: no base transitions, skipping learning");
            return Ok(());
        }
        let cfg = self.sequential_config();
        match self.mode {
            LearnMode::Sync => {
                let mut weights = self.weights.as_ref().clone();
                let report = sequential_learn(
                    &self.topology,
                    &base,
                    &self.feature_maps,
                    &mut weights,
                    &cfg,
                    &mut self.rng,
                )?;
                info!(
                    "step {k}: learned from {} base transitions, iterations {:?}",
                    base.len(),
                    report.iterations
                );
                self.weights = Arc::new(weights);
                self.stats.reports.push(report);
            }
            LearnMode::Background => {
                self.collect_finished(true)?;
                let topology = Arc::clone(&self.topology);
                let fms = Arc::clone(&self.feature_maps);
                let mut weights = self.weights.as_ref().clone();
                let mut rng = ChaCha8Rng::seed_from_u64(self.rng.next_u64());
                self.pending = Some(std::thread::spawn(move || {
                    let report =
                        sequential_learn(&topology, &base, &fms, &mut weights, &cfg, &mut rng)?;
                    Ok((weights, report))
                }));
            }
        }
        Ok(())
    }

    /// Learns if `k` is a relearn instant, then acts greedily per LTC unless
    /// the value gain over holding is within the deadband.
    pub fn rl_step(
        &mut self,
        k: u64,
        s_k: &SystemState,
        history: &History,
    ) -> Result<ControlDecision, ControlError> {
        self.collect_finished(false)?;
        if k >= self.learn_from && k.is_multiple_of(self.cfg.k_period as u64) {
            self.learn(k, history)?;
        }
        let n_ltc = self.topology.ltc_count();
        let mut decision = ControlDecision::hold(n_ltc);
        for l in 0..n_ltc {
            let fm = &self.feature_maps[l];
            let w = &self.weights[l];
            let (best, best_value) = greedy_action(fm, w, &self.topology, s_k)?;
            let hold_value = action_value(fm, w, &self.topology, s_k, 0)?;
            decision.greedy_values[l] = best_value;
            decision.incumbent_values[l] = hold_value;
            if best_value - hold_value > self.cfg.epsilon_deadband {
                decision.steps[l] = best;
                decision.moved[l] = best != 0;
            }
        }
        Ok(decision)
    }
}

impl Controller for RlController {
    fn name(&self) -> &str {
        "rl"
    }

    fn decide(&mut self, ctx: &StepContext<'_>) -> Result<ControlDecision, ControlError> {
        self.rl_step(ctx.k, ctx.state, ctx.history)
    }

    fn learning_stats(&self) -> Option<&LearningStats> {
        Some(&self.stats)
    }
}

impl Drop for RlController {
    fn drop(&mut self) {
        if let Some(job) = self.pending.take() {
            let _ = job.join();
        }
    }
}

fn worst_violation(mags: &[f64], buses: &[usize], v_low: f64, v_high: f64) -> (f64, f64) {
    // (largest undervoltage, largest overvoltage) among `buses`
    buses.iter().fold((0.0f64, 0.0f64), |(under, over), &b| {
        let m = mags[b - 1];
        (under.max(v_low - m), over.max(m - v_high))
    })
}

/// Range-violation scheme: when any magnitude leaves `[v_low, v_high]`, each
/// LTC with a violation downstream moves one position, in whichever
/// direction the tap-change estimate says shrinks that worst violation.
pub fn conventional_step(
    topology: &FeederTopology,
    s: &SystemState,
    v_low: f64,
    v_high: f64,
) -> Result<ControlDecision, ControlError> {
    assert!(v_low < v_high);
    let n_ltc = topology.ltc_count();
    let mut decision = ControlDecision::hold(n_ltc);
    let mags: Vec<f64> = s.v.iter().map(|v| v.sqrt()).collect();
    if mags.iter().all(|m| (v_low..=v_high).contains(m)) {
        return Ok(decision);
    }
    let taps = s.ratios(topology)?;
    let current = VoltageState {
        v: s.v.clone(),
        v0: topology.v0(),
    };
    for (l, ltc) in topology.ltcs().iter().enumerate() {
        let buses = topology.downstream_buses(ltc.line());
        let (under, over) = worst_violation(&mags, &buses, v_low, v_high);
        let worst = under.max(over);
        decision.incumbent_values[l] = -worst;
        decision.greedy_values[l] = -worst;
        if worst <= 0.0 {
            continue;
        }
        let mut best: Option<(i32, f64)> = None;
        for delta in [-1, 1] {
            let pos = s.positions[l] + delta;
            if !ltc.contains(pos) {
                continue;
            }
            let mut positions = s.positions.clone();
            positions[l] = pos;
            let probe = estimate_voltage_under_taps(
                topology,
                &current,
                &taps,
                &topology.ratios(&positions)?,
            )?;
            let (u, o) = worst_violation(&probe.magnitudes(), &buses, v_low, v_high);
            let score = u.max(o);
            if best.is_none_or(|(_, b)| score < b) {
                best = Some((delta, score));
            }
        }
        if let Some((delta, score)) = best {
            decision.greedy_values[l] = -score;
            if score < worst {
                decision.steps[l] = delta;
                decision.moved[l] = true;
            }
        }
    }
    Ok(decision)
}

#[derive(Debug, Clone)]
pub struct ConventionalController {
    topology: Arc<FeederTopology>,
    v_low: f64,
    v_high: f64,
}

impl ConventionalController {
    pub fn new(topology: Arc<FeederTopology>, v_low: f64, v_high: f64) -> Self {
        Self {
            topology,
            v_low,
            v_high,
        }
    }
}

impl Controller for ConventionalController {
    fn name(&self) -> &str {
        "conventional"
    }

    fn decide(&mut self, ctx: &StepContext<'_>) -> Result<ControlDecision, ControlError> {
        conventional_step(&self.topology, ctx.state, self.v_low, self.v_high)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveResult {
    pub positions: Vec<i32>,
    pub reward: f64,
    pub evaluations: usize,
}

/// Enumerates every tap combination in `windows`, solving the power flow
/// for each, and returns the best reward. Ties go to the lexicographically
/// smallest position vector. Combinations whose power flow fails are skipped.
pub fn exhaustive_step(
    topology: &FeederTopology,
    inj: &Injections,
    v_star: &[f64],
    windows: &[TapChanger],
    budget: u64,
    solver: &EnvironmentSolver,
) -> Result<ExhaustiveResult, ControlError> {
    let combinations: u128 = windows.iter().map(|w| w.window_len() as u128).product();
    if combinations > budget as u128 {
        return Err(ControlError::BudgetExceeded {
            combinations,
            budget,
        });
    }
    let mut positions: Vec<i32> = windows.iter().map(|w| w.pos_min()).collect();
    let mut best: Option<(Vec<i32>, f64)> = None;
    let mut evaluations = 0;
    loop {
        evaluations += 1;
        let taps = topology.ratios(&positions)?;
        if let Ok(state) = solver.solve(topology, &taps, inj) {
            let r = reward(&state.v, v_star)?;
            if best.as_ref().is_none_or(|(_, b)| r > *b) {
                best = Some((positions.clone(), r));
            }
        }
        // odometer, last LTC fastest
        let mut i = windows.len();
        loop {
            if i == 0 {
                let (positions, reward) = best.ok_or(ControlError::NoFeasibleCombination)?;
                return Ok(ExhaustiveResult {
                    positions,
                    reward,
                    evaluations,
                });
            }
            i -= 1;
            if positions[i] < windows[i].pos_max() {
                positions[i] += 1;
                break;
            }
            positions[i] = windows[i].pos_min();
        }
    }
}

/// Per-step exhaustive search with full knowledge of the next injections.
#[derive(Debug, Clone)]
pub struct ExhaustiveController {
    topology: Arc<FeederTopology>,
    v_star: Vec<f64>,
    budget: u64,
    solver: EnvironmentSolver,
}

impl ExhaustiveController {
    pub fn new(
        topology: Arc<FeederTopology>,
        v_star: Vec<f64>,
        budget: u64,
        solver: EnvironmentSolver,
    ) -> Self {
        Self {
            topology,
            v_star,
            budget,
            solver,
        }
    }
}

impl Controller for ExhaustiveController {
    fn name(&self) -> &str {
        "exhaustive"
    }

    fn needs_truth(&self) -> bool {
        true
    }

    fn decide(&mut self, ctx: &StepContext<'_>) -> Result<ControlDecision, ControlError> {
        let inj = ctx.next_injections.ok_or(ControlError::MissingTruth)?;
        let best = exhaustive_step(
            &self.topology,
            inj,
            &self.v_star,
            self.topology.ltcs(),
            self.budget,
            &self.solver,
        )?;
        let n_ltc = self.topology.ltc_count();
        let mut decision = ControlDecision::hold(n_ltc);
        for l in 0..n_ltc {
            decision.steps[l] = best.positions[l] - ctx.state.positions[l];
            decision.moved[l] = decision.steps[l] != 0;
            decision.greedy_values[l] = best.reward;
        }
        Ok(decision)
    }
}
