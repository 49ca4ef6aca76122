//! Batch learning of per-LTC action-value functions.
//!
//! Each LTC `l` gets a linear approximation `Q(s, a) = φ(s, a)ᵀ w` whose
//! feature vector is split into one segment per tap position in the LTC's
//! window. An action selects the segment of the position it leads to; the
//! segment holds `[1, exp(−‖ṽ − v̄_1‖/σ²), …, exp(−‖ṽ − v̄_κ‖/σ²)]` where ṽ
//! is the voltage profile re-estimated with LTC `l` at its neutral position.
//! The distance is the plain (unsquared) Euclidean norm.
//!
//! Training data come from [`generate_virtual_transitions`], which replays
//! historical transitions under different tap actions using
//! [`estimate_voltage_under_taps`], and are fitted by [`lstdq`].

use std::time::{Duration, Instant};

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{feasible_actions, FeederError, FeederTopology, TapChanger};
use crate::mdp::{reward, History, MdpError, SystemState, TapAction, Transition};
use crate::powerflow::{estimate_voltage_under_taps, PowerFlowError, VoltageState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("no base transitions available")]
    EmptyHistory,
    #[error("empty transition batch")]
    EmptyBatch,
    #[error("LTC {ltc}: move of {delta} from position {position} leaves the window")]
    ActionNotInSet { ltc: usize, position: i32, delta: i32 },
    #[error("least-squares system is numerically singular")]
    NumericallySingular,
    #[error("invalid feature map: {0}")]
    BadFeatureMap(String),
    #[error("expected one feature map and weight vector per LTC ({expected}), got {got}")]
    MissingWeights { expected: usize, got: usize },
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Orders position changes by preference on ties: fewest steps first, then
/// ascending.
pub fn tie_break_order(mut deltas: Vec<i32>) -> Vec<i32> {
    deltas.sort_by_key(|d| (d.abs(), *d));
    deltas
}

/// `κ` centers `(start + step·i)² · 1_N` for `i = 1..=κ`.
pub fn uniform_centers(n: usize, kappa: usize, start: f64, step: f64) -> Vec<Vec<f64>> {
    (1..=kappa)
        .map(|i| {
            let m = start + step * i as f64;
            vec![m * m; n]
        })
        .collect()
}

/// RBF feature layout for one LTC.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    ltc: usize,
    pos_min: i32,
    pos_max: i32,
    centers: Vec<Vec<f64>>,
    sigma: f64,
}

impl FeatureMap {
    pub fn new(
        ltc: usize,
        tap: &TapChanger,
        centers: Vec<Vec<f64>>,
        sigma: f64,
    ) -> Result<Self, LearnError> {
        if centers.is_empty() {
            return Err(LearnError::BadFeatureMap("at least one center required".into()));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(LearnError::BadFeatureMap(format!("sigma must be positive, got {sigma}")));
        }
        let n = centers[0].len();
        if centers
            .iter()
            .any(|c| c.len() != n || c.iter().any(|x| !x.is_finite()))
        {
            return Err(LearnError::BadFeatureMap("centers must be finite and of equal length".into()));
        }
        Ok(Self {
            ltc,
            pos_min: tap.pos_min(),
            pos_max: tap.pos_max(),
            centers,
            sigma,
        })
    }

    /// Standard layout for LTC `ltc` of `topology`: κ centers
    /// `(start + step·i)²·1_N`.
    pub fn uniform(
        topology: &FeederTopology,
        ltc: usize,
        kappa: usize,
        start: f64,
        step: f64,
        sigma: f64,
    ) -> Result<Self, LearnError> {
        let tap = topology.ltcs().get(ltc).ok_or(LearnError::MissingWeights {
            expected: topology.ltc_count(),
            got: ltc,
        })?;
        Self::new(ltc, tap, uniform_centers(topology.n(), kappa, start, step), sigma)
    }

    pub fn ltc(&self) -> usize {
        self.ltc
    }

    pub fn kappa(&self) -> usize {
        self.centers.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Segment length `κ + 1`.
    pub fn block_len(&self) -> usize {
        self.centers.len() + 1
    }

    /// Number of segments, one per window position.
    pub fn n_actions(&self) -> usize {
        (self.pos_max - self.pos_min + 1) as usize
    }

    /// Feature length `f = (κ + 1)·|A|`.
    pub fn dim(&self) -> usize {
        self.block_len() * self.n_actions()
    }

    /// Window positions, in segment order.
    pub fn positions(&self) -> Vec<i32> {
        (self.pos_min..=self.pos_max).collect()
    }

    /// Feasible moves from `position`, in tie-break order.
    pub fn actions_from(&self, position: i32) -> Vec<i32> {
        let tap = TapChanger::new(0, self.pos_min, self.pos_max).expect("validated window");
        tie_break_order(feasible_actions(position, &tap))
    }

    /// Segment selected by moving `delta` steps from `position`.
    pub fn segment(&self, position: i32, delta: i32) -> Result<usize, LearnError> {
        let target = position + delta;
        if !(self.pos_min..=self.pos_max).contains(&target) {
            return Err(LearnError::ActionNotInSet {
                ltc: self.ltc,
                position,
                delta,
            });
        }
        Ok((target - self.pos_min) as usize)
    }

    /// ṽ: voltages re-estimated with this LTC at its neutral position.
    pub fn reference_voltages(
        &self,
        topology: &FeederTopology,
        s: &SystemState,
    ) -> Result<Vec<f64>, LearnError> {
        let taps = s.ratios(topology)?;
        let mut neutral_positions = s.positions.clone();
        neutral_positions[self.ltc] = 0.clamp(self.pos_min, self.pos_max);
        if neutral_positions[self.ltc] == s.positions[self.ltc] {
            return Ok(s.v.clone());
        }
        let neutral = topology.ratios(&neutral_positions)?;
        let dag = VoltageState {
            v: s.v.clone(),
            v0: topology.v0(),
        };
        Ok(estimate_voltage_under_taps(topology, &dag, &taps, &neutral)?.v)
    }

    /// `[1, exp(−‖ṽ − v̄_1‖/σ²), …]`.
    pub fn rbf(&self, v_tilde: &[f64]) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        std::iter::once(1.0)
            .chain(self.centers.iter().map(|c| {
                let dist = c
                    .iter()
                    .zip(v_tilde)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                (-dist / s2).exp()
            }))
            .collect()
    }

    /// The nonzero segment content for state `s`.
    pub fn state_block(
        &self,
        topology: &FeederTopology,
        s: &SystemState,
    ) -> Result<Vec<f64>, LearnError> {
        Ok(self.rbf(&self.reference_voltages(topology, s)?))
    }

    /// Full feature vector `φ(s, a)` of length [`dim`](Self::dim).
    pub fn feature_vector(
        &self,
        topology: &FeederTopology,
        s: &SystemState,
        delta: i32,
    ) -> Result<Vec<f64>, LearnError> {
        let seg = self.segment(s.positions[self.ltc], delta)?;
        let block = self.state_block(topology, s)?;
        let mut phi = vec![0.0; self.dim()];
        let bl = self.block_len();
        phi[seg * bl..(seg + 1) * bl].copy_from_slice(&block);
        Ok(phi)
    }
}

/// Linear action-value parameters for one LTC.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(self.0.iter().map(|w| w * alpha).collect())
    }
}

/// Serialized form of a weight vector with its feature layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSnapshot {
    pub ltc: usize,
    pub kappa: usize,
    pub sigma: f64,
    /// Tap positions, one per feature segment.
    pub actions: Vec<i32>,
    pub w: Vec<f64>,
}

impl WeightSnapshot {
    pub fn new(fm: &FeatureMap, w: &WeightVector) -> Self {
        Self {
            ltc: fm.ltc,
            kappa: fm.kappa(),
            sigma: fm.sigma,
            actions: fm.positions(),
            w: w.0.clone(),
        }
    }

    /// Weight vector, checked against `fm`'s layout.
    pub fn weights_for(&self, fm: &FeatureMap) -> Result<WeightVector, LearnError> {
        if self.ltc != fm.ltc
            || self.kappa != fm.kappa()
            || self.actions != fm.positions()
            || self.w.len() != fm.dim()
        {
            return Err(LearnError::BadFeatureMap("snapshot layout does not match".into()));
        }
        Ok(WeightVector(self.w.clone()))
    }
}

fn segment_value(block: &[f64], segment: usize, w: &[f64]) -> f64 {
    let bl = block.len();
    w[segment * bl..(segment + 1) * bl]
        .iter()
        .zip(block)
        .map(|(a, b)| a * b)
        .sum()
}

/// First maximizer over `candidates` (already in tie-break order).
fn best_segment(block: &[f64], candidates: &[usize], w: &[f64]) -> (usize, f64) {
    let mut best = (candidates[0], segment_value(block, candidates[0], w));
    for &seg in &candidates[1..] {
        let v = segment_value(block, seg, w);
        if v > best.1 {
            best = (seg, v);
        }
    }
    best
}

/// `φ(s, a)ᵀ w` for a single move.
pub fn action_value(
    fm: &FeatureMap,
    w: &WeightVector,
    topology: &FeederTopology,
    s: &SystemState,
    delta: i32,
) -> Result<f64, LearnError> {
    let seg = fm.segment(s.positions[fm.ltc], delta)?;
    Ok(segment_value(&fm.state_block(topology, s)?, seg, &w.0))
}

/// Greedy move for one LTC and its action value. Ties go to the smallest
/// move, then the lower one.
pub fn greedy_action(
    fm: &FeatureMap,
    w: &WeightVector,
    topology: &FeederTopology,
    s: &SystemState,
) -> Result<(i32, f64), LearnError> {
    let block = fm.state_block(topology, s)?;
    let pos = s.positions[fm.ltc];
    let deltas = fm.actions_from(pos);
    let segments: Vec<usize> = deltas
        .iter()
        .map(|&d| fm.segment(pos, d))
        .collect::<Result<_, _>>()?;
    let (seg, value) = best_segment(&block, &segments, &w.0);
    Ok((fm.positions()[seg] - pos, value))
}

/// A batch of transitions generated for one focal LTC.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub ltc: usize,
    pub transitions: Vec<Transition>,
}

/// Replays `base` under `action` instead of the recorded one: the next-state
/// voltages are re-estimated from the recorded next state, assuming the same
/// injections.
pub fn virtual_transition(
    topology: &FeederTopology,
    base: &Transition,
    action: &TapAction,
    v_star: &[f64],
) -> Result<Transition, LearnError> {
    let target = action.apply(&base.s.positions);
    let taps_ddag = topology.ratios(&target)?;
    let taps_dag = topology.ratios(&base.s_next.positions)?;
    let v_dag = VoltageState {
        v: base.s_next.v.clone(),
        v0: topology.v0(),
    };
    let v = estimate_voltage_under_taps(topology, &v_dag, &taps_dag, &taps_ddag)?.v;
    let r = reward(&v, v_star)?;
    let s_next = SystemState::new(target, v)?;
    Ok(Transition::new(base.s.clone(), action.clone(), r, s_next, v_star)?)
}

/// Builds a batch of `size` virtual transitions for LTC `focal`.
///
/// Base transitions are drawn uniformly with replacement. The focal LTC's
/// move is uniform over its feasible moves; every other LTC moves greedily
/// under its own current weights.
#[allow(clippy::too_many_arguments)]
pub fn generate_virtual_transitions<R: Rng + ?Sized>(
    topology: &FeederTopology,
    base: &[Transition],
    size: usize,
    v_star: &[f64],
    focal: usize,
    feature_maps: &[FeatureMap],
    weights: &[WeightVector],
    rng: &mut R,
) -> Result<TransitionBatch, LearnError> {
    let n_ltc = topology.ltc_count();
    for got in [feature_maps.len(), weights.len()] {
        if got != n_ltc {
            return Err(LearnError::MissingWeights {
                expected: n_ltc,
                got,
            });
        }
    }
    let mut transitions = Vec::with_capacity(size);
    if size == 0 {
        return Ok(TransitionBatch {
            ltc: focal,
            transitions,
        });
    }
    if base.is_empty() {
        return Err(LearnError::EmptyHistory);
    }
    let mut greedy_cache: Vec<Option<Vec<i32>>> = vec![None; base.len()];
    for _ in 0..size {
        let idx = rng.random_range(0..base.len());
        let b = &base[idx];
        if greedy_cache[idx].is_none() {
            let mut steps = vec![0; n_ltc];
            for (m, (fm, w)) in feature_maps.iter().zip(weights).enumerate() {
                if m != focal {
                    steps[m] = greedy_action(fm, w, topology, &b.s)?.0;
                }
            }
            greedy_cache[idx] = Some(steps);
        }
        let mut steps = greedy_cache[idx].clone().expect("filled above");
        let choices = feasible_actions(b.s.positions[focal], &topology.ltcs()[focal]);
        steps[focal] = choices[rng.random_range(0..choices.len())];
        transitions.push(virtual_transition(
            topology,
            b,
            &TapAction { steps },
            v_star,
        )?);
    }
    Ok(TransitionBatch {
        ltc: focal,
        transitions,
    })
}

/// Constants of the policy-iteration loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstdqParams {
    pub gamma: f64,
    /// Stop once `‖w_{i+1} − w_i‖₂ ≤ epsilon`.
    pub epsilon: f64,
    /// Diagonal preconditioner seeding `B`.
    pub c: f64,
    pub max_iterations: usize,
}

impl Default for LstdqParams {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            epsilon: 1e-5,
            c: 0.1,
            max_iterations: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstdqOutcome {
    pub w: WeightVector,
    /// Number of least-squares solves performed.
    pub iterations: usize,
    /// False when `max_iterations` was hit; `w` is then the last iterate.
    pub converged: bool,
    pub last_change: f64,
}

/// One sample in block-sparse form: `φ(s, a)` is `block` placed at
/// `segment`; the candidate next actions all share `next_block` and differ
/// only in segment, listed in tie-break order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub block: Vec<f64>,
    pub segment: usize,
    pub reward: f64,
    pub next_block: Vec<f64>,
    pub next_segments: Vec<usize>,
}

/// Policy iteration with LSTDQ evaluation over pre-encoded samples.
pub fn lstdq_encoded(
    n_segments: usize,
    samples: &[EncodedSample],
    params: &LstdqParams,
    w_init: &WeightVector,
) -> Result<LstdqOutcome, LearnError> {
    assert!((0.0..1.0).contains(&params.gamma), "discount must lie in [0, 1)");
    assert!(params.epsilon > 0.0 && params.c > 0.0);
    let first = samples.first().ok_or(LearnError::EmptyBatch)?;
    let bl = first.block.len();
    let dim = bl * n_segments;
    if w_init.len() != dim {
        return Err(LearnError::BadFeatureMap(format!(
            "initial weights have length {}, expected {dim}",
            w_init.len()
        )));
    }

    // The policy-independent part of B and all of b are fixed across iterations.
    let mut base = DMatrix::<f64>::identity(dim, dim) * params.c;
    let mut b = DVector::<f64>::zeros(dim);
    for smp in samples {
        let o = smp.segment * bl;
        for (i, &pi) in smp.block.iter().enumerate() {
            b[o + i] += pi * smp.reward;
            for (j, &pj) in smp.block.iter().enumerate() {
                base[(o + i, o + j)] += pi * pj;
            }
        }
    }

    let mut w = w_init.0.clone();
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;
    while iterations < params.max_iterations {
        let mut mat = base.clone();
        for smp in samples {
            let (next_seg, _) = best_segment(&smp.next_block, &smp.next_segments, &w);
            let (o, on) = (smp.segment * bl, next_seg * bl);
            for (i, &pi) in smp.block.iter().enumerate() {
                let gpi = params.gamma * pi;
                for (j, &pj) in smp.next_block.iter().enumerate() {
                    mat[(o + i, on + j)] -= gpi * pj;
                }
            }
        }
        let next = mat.lu().solve(&b).ok_or(LearnError::NumericallySingular)?;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(LearnError::NumericallySingular);
        }
        iterations += 1;
        last_change = next
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        w = next.iter().copied().collect();
        if last_change <= params.epsilon {
            return Ok(LstdqOutcome {
                w: WeightVector(w),
                iterations,
                converged: true,
                last_change,
            });
        }
    }
    Ok(LstdqOutcome {
        w: WeightVector(w),
        iterations,
        converged: false,
        last_change,
    })
}

/// Encodes a batch against `fm` for [`lstdq_encoded`].
pub fn encode_batch(
    batch: &TransitionBatch,
    fm: &FeatureMap,
    topology: &FeederTopology,
) -> Result<Vec<EncodedSample>, LearnError> {
    let l = fm.ltc;
    batch
        .transitions
        .iter()
        .map(|t| {
            let pos_next = t.s_next.positions[l];
            Ok(EncodedSample {
                block: fm.state_block(topology, &t.s)?,
                segment: fm.segment(t.s.positions[l], t.a.steps[l])?,
                reward: t.r,
                next_block: fm.state_block(topology, &t.s_next)?,
                next_segments: fm
                    .actions_from(pos_next)
                    .into_iter()
                    .map(|d| fm.segment(pos_next, d))
                    .collect::<Result<_, _>>()?,
            })
        })
        .collect()
}

/// LSPI for a single LTC, warm-started from `w_init`.
pub fn lstdq(
    batch: &TransitionBatch,
    fm: &FeatureMap,
    topology: &FeederTopology,
    params: &LstdqParams,
    w_init: &WeightVector,
) -> Result<LstdqOutcome, LearnError> {
    if batch.transitions.is_empty() {
        return Err(LearnError::EmptyBatch);
    }
    let samples = encode_batch(batch, fm, topology)?;
    lstdq_encoded(fm.n_actions(), &samples, params, w_init)
}

/// Which past records feed the virtual transition generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistoryWindow {
    /// How many previous days to look back.
    pub days: usize,
    /// Width of the time-of-day interval, in steps, starting at the current step.
    pub interval: usize,
    pub steps_per_day: usize,
}

impl Default for HistoryWindow {
    fn default() -> Self {
        Self {
            days: 5,
            interval: 24,
            steps_per_day: 288,
        }
    }
}

/// Transitions from the same time-of-day interval on previous days.
pub fn select_base_transitions(
    history: &History,
    k_now: u64,
    window: &HistoryWindow,
    v_star: &[f64],
) -> Result<Vec<Transition>, LearnError> {
    let mut out = Vec::new();
    for day in 1..=window.days as u64 {
        let Some(start) = k_now.checked_sub(day * window.steps_per_day as u64) else {
            break;
        };
        for k in start..start + window.interval as u64 {
            if let Some(t) = history.transition(k) {
                out.push(Transition::new(t.s, t.a, t.r, t.s_next, v_star)?);
            }
        }
    }
    Ok(out)
}

/// Settings of the round-robin learning loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialConfig {
    /// Round-robin sweeps `J`.
    pub sweeps: usize,
    /// Virtual transitions per batch `D`.
    pub batch_size: usize,
    pub lstdq: LstdqParams,
    pub v_star: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearnReport {
    pub lstdq_calls: usize,
    pub iterations: Vec<usize>,
    pub all_converged: bool,
    pub elapsed: Duration,
}

/// Round-robin LSPI over all LTCs for `cfg.sweeps` sweeps, each LTC fitted on
/// a fresh batch and warm-started from its current weights.
pub fn sequential_learn<R: Rng + ?Sized>(
    topology: &FeederTopology,
    base: &[Transition],
    feature_maps: &[FeatureMap],
    weights: &mut [WeightVector],
    cfg: &SequentialConfig,
    rng: &mut R,
) -> Result<LearnReport, LearnError> {
    assert!(cfg.sweeps >= 1, "at least one sweep");
    let started = Instant::now();
    let mut report = LearnReport {
        all_converged: true,
        ..Default::default()
    };
    for _ in 0..cfg.sweeps {
        for l in 0..topology.ltc_count() {
            let batch = generate_virtual_transitions(
                topology,
                base,
                cfg.batch_size,
                &cfg.v_star,
                l,
                feature_maps,
                weights,
                rng,
            )?;
            let outcome = lstdq(&batch, &feature_maps[l], topology, &cfg.lstdq, &weights[l])?;
            if !outcome.converged {
                warn!(
                    "LTC {l}: LSTDQ stopped after {} iterations (change {:.3e})",
                    outcome.iterations, outcome.last_change
                );
            }
            debug!("LTC {l}: {} LSTDQ iterations", outcome.iterations);
            report.lstdq_calls += 1;
            report.iterations.push(outcome.iterations);
            report.all_converged &= outcome.converged;
            weights[l] = outcome.w;
        }
    }
    report.elapsed = started.elapsed();
    Ok(report)
}
