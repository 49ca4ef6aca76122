//! Radial feeder topology, tap changers and the tap-dependent incidence
//! matrices of the linearized branch flow model.
//!
//! Buses are numbered `0..=N` with bus 0 the substation (an ideal voltage
//! source). Lines are stored directed away from bus 0, so line `ℓ = (i, j)`
//! always has `i` as the parent of `j`. For a tap-changer line the tap sits
//! on the parent side: the secondary sees `v_i / t²`.

use std::collections::{HashSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ratio change per tap position (5/8 %).
pub const TAP_STEP: f64 = 0.00625;
/// Lowest physical tap position.
pub const MIN_POSITION: i32 = -16;
/// Highest physical tap position.
pub const MAX_POSITION: i32 = 16;

const RATIO_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeederError {
    #[error("feeder is not radial: {0}")]
    NotRadial(String),
    #[error("feeder is disconnected: bus {0} is unreachable from the substation")]
    Disconnected(usize),
    #[error("duplicate line {0}")]
    DuplicateLine(String),
    #[error("tap changer references unknown line id {0}")]
    LtcOnUnknownLine(usize),
    #[error("line {id}: bus {bus} outside 0..={max}")]
    BusOutOfRange { id: usize, bus: usize, max: usize },
    #[error("line {0}: resistance and reactance must be finite and non-negative")]
    BadImpedance(usize),
    #[error("substation squared voltage must be positive, got {0}")]
    BadSubstationVoltage(f64),
    #[error("invalid tap window [{pos_min}, {pos_max}]")]
    BadTapWindow { pos_min: i32, pos_max: i32 },
    #[error("tap position {0} outside [-16, 16]")]
    PositionOutOfRange(i32),
    #[error("tap ratio {ratio} on line {line} outside [{min}, {max}]")]
    TapOutOfRange {
        line: usize,
        ratio: f64,
        min: f64,
        max: f64,
    },
    #[error("expected {expected} tap values, got {got}")]
    TapCountMismatch { expected: usize, got: usize },
}

/// Maps an integer tap position to its winding ratio, `1 + 0.00625·pos`.
pub fn tap_position_to_ratio(pos: i32) -> Result<f64, FeederError> {
    if !(MIN_POSITION..=MAX_POSITION).contains(&pos) {
        return Err(FeederError::PositionOutOfRange(pos));
    }
    Ok(1.0 + TAP_STEP * pos as f64)
}

/// Nearest integer position for a ratio, if the ratio sits on the tap grid.
pub fn ratio_to_position(ratio: f64) -> Option<i32> {
    let pos = ((ratio - 1.0) / TAP_STEP).round();
    if (1.0 + TAP_STEP * pos - ratio).abs() > 1e-9 {
        return None;
    }
    let pos = pos as i32;
    (MIN_POSITION..=MAX_POSITION).contains(&pos).then_some(pos)
}

/// A load tap changer installed on one line, with its allowed position window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapChanger {
    line: usize,
    pos_min: i32,
    pos_max: i32,
}

impl TapChanger {
    /// `line` is the zero-based index into [`FeederTopology::lines`].
    pub fn new(line: usize, pos_min: i32, pos_max: i32) -> Result<Self, FeederError> {
        if pos_min > pos_max || pos_min < MIN_POSITION || pos_max > MAX_POSITION {
            return Err(FeederError::BadTapWindow { pos_min, pos_max });
        }
        Ok(Self {
            line,
            pos_min,
            pos_max,
        })
    }

    pub fn line(&self) -> usize {
        self.line
    }

    pub fn pos_min(&self) -> i32 {
        self.pos_min
    }

    pub fn pos_max(&self) -> i32 {
        self.pos_max
    }

    pub fn window_len(&self) -> usize {
        (self.pos_max - self.pos_min + 1) as usize
    }

    pub fn contains(&self, pos: i32) -> bool {
        (self.pos_min..=self.pos_max).contains(&pos)
    }

    pub fn positions(&self) -> std::ops::RangeInclusive<i32> {
        self.pos_min..=self.pos_max
    }

    pub fn ratio_bounds(&self) -> (f64, f64) {
        (
            1.0 + TAP_STEP * self.pos_min as f64,
            1.0 + TAP_STEP * self.pos_max as f64,
        )
    }

    pub fn accepts_ratio(&self, ratio: f64) -> bool {
        let (lo, hi) = self.ratio_bounds();
        ratio.is_finite() && ratio >= lo - RATIO_TOL && ratio <= hi + RATIO_TOL
    }
}

/// Position changes (in tap steps) that keep `pos` inside the window,
/// ascending. Contains 0 whenever `pos` is itself in the window.
pub fn feasible_actions(pos: i32, ltc: &TapChanger) -> Vec<i32> {
    (ltc.pos_min - pos..=ltc.pos_max - pos).collect()
}

/// Ratio-valued form of [`feasible_actions`].
pub fn feasible_ratio_changes(ratio: f64, ltc: &TapChanger) -> Vec<f64> {
    let pos = ((ratio - 1.0) / TAP_STEP).round() as i32;
    feasible_actions(pos, ltc)
        .into_iter()
        .map(|d| d as f64 * TAP_STEP)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtcSpec {
    pub pos_min: i32,
    pub pos_max: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ltc: Option<LtcSpec>,
}

/// Unvalidated feeder description, as stored in feeder JSON files.
///
/// `buses` is `N`, the number of buses excluding the substation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederDescription {
    pub v0: f64,
    pub buses: usize,
    pub lines: Vec<LineSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

/// A validated radial feeder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederTopology {
    v0: f64,
    n: usize,
    lines: Vec<Line>,
    ltcs: Vec<TapChanger>,
    /// Line feeding each bus; `None` for bus 0.
    parent_line: Vec<Option<usize>>,
    child_lines: Vec<Vec<usize>>,
    /// Lines in breadth-first order from the substation.
    order: Vec<usize>,
    /// `ltc_of_line[ℓ]` is the tap changer index of line ℓ, if any.
    ltc_of_line: Vec<Option<usize>>,
}

/// Checks radiality and connectivity and orients every line away from bus 0.
pub fn validate_topology(desc: &FeederDescription) -> Result<FeederTopology, FeederError> {
    if !(desc.v0.is_finite() && desc.v0 > 0.0) {
        return Err(FeederError::BadSubstationVoltage(desc.v0));
    }
    let n = desc.buses;
    if desc.lines.len() != n {
        return Err(FeederError::NotRadial(format!(
            "{} lines for {} non-substation buses",
            desc.lines.len(),
            n
        )));
    }
    let mut ids = HashSet::new();
    let mut pairs = HashSet::new();
    for l in &desc.lines {
        for bus in [l.from, l.to] {
            if bus > n {
                return Err(FeederError::BusOutOfRange {
                    id: l.id,
                    bus,
                    max: n,
                });
            }
        }
        if !(l.r.is_finite() && l.x.is_finite() && l.r >= 0.0 && l.x >= 0.0) {
            return Err(FeederError::BadImpedance(l.id));
        }
        if !ids.insert(l.id) {
            return Err(FeederError::DuplicateLine(format!("id {}", l.id)));
        }
        let key = (l.from.min(l.to), l.from.max(l.to));
        if !pairs.insert(key) {
            return Err(FeederError::DuplicateLine(format!(
                "buses ({}, {})",
                l.from, l.to
            )));
        }
        if l.from == l.to {
            return Err(FeederError::NotRadial(format!("self-loop on line {}", l.id)));
        }
    }

    // Union-find cycle check.
    let mut uf: Vec<usize> = (0..=n).collect();
    fn find(uf: &mut [usize], mut a: usize) -> usize {
        while uf[a] != a {
            uf[a] = uf[uf[a]];
            a = uf[a];
        }
        a
    }
    for l in &desc.lines {
        let (a, b) = (find(&mut uf, l.from), find(&mut uf, l.to));
        if a == b {
            return Err(FeederError::NotRadial(format!(
                "line {} closes a cycle",
                l.id
            )));
        }
        uf[a] = b;
    }

    let mut adjacency = vec![Vec::new(); n + 1];
    for (idx, l) in desc.lines.iter().enumerate() {
        adjacency[l.from].push(idx);
        adjacency[l.to].push(idx);
    }
    let mut lines: Vec<Line> = desc
        .lines
        .iter()
        .map(|l| Line {
            id: l.id,
            from: l.from,
            to: l.to,
            r: l.r,
            x: l.x,
        })
        .collect();
    let mut parent_line = vec![None; n + 1];
    let mut child_lines = vec![Vec::new(); n + 1];
    let mut visited = vec![false; n + 1];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::from([0usize]);
    visited[0] = true;
    while let Some(bus) = queue.pop_front() {
        for &idx in &adjacency[bus] {
            let line = &mut lines[idx];
            let other = if line.from == bus { line.to } else { line.from };
            if visited[other] {
                continue;
            }
            if line.from != bus {
                std::mem::swap(&mut line.from, &mut line.to);
            }
            visited[other] = true;
            parent_line[other] = Some(idx);
            child_lines[bus].push(idx);
            order.push(idx);
            queue.push_back(other);
        }
    }
    if let Some(bus) = visited.iter().position(|v| !v) {
        return Err(FeederError::Disconnected(bus));
    }

    let mut ltcs = Vec::new();
    let mut ltc_of_line = vec![None; n];
    for (idx, l) in desc.lines.iter().enumerate() {
        if let Some(spec) = &l.ltc {
            ltc_of_line[idx] = Some(ltcs.len());
            ltcs.push(TapChanger::new(idx, spec.pos_min, spec.pos_max)?);
        }
    }

    Ok(FeederTopology {
        v0: desc.v0,
        n,
        lines,
        ltcs,
        parent_line,
        child_lines,
        order,
        ltc_of_line,
    })
}

impl FeederTopology {
    /// Squared substation voltage.
    pub fn v0(&self) -> f64 {
        self.v0
    }

    /// Number of non-substation buses.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn ltcs(&self) -> &[TapChanger] {
        &self.ltcs
    }

    pub fn ltc_count(&self) -> usize {
        self.ltcs.len()
    }

    pub fn parent_line(&self, bus: usize) -> Option<usize> {
        self.parent_line[bus]
    }

    pub fn child_lines(&self, bus: usize) -> &[usize] {
        &self.child_lines[bus]
    }

    /// Lines ordered so every line comes after the line feeding its parent bus.
    pub fn sweep_order(&self) -> &[usize] {
        &self.order
    }

    pub fn ltc_on_line(&self, line: usize) -> Option<usize> {
        self.ltc_of_line[line]
    }

    /// Replaces position windows, keyed by line id.
    pub fn with_tap_windows(&self, windows: &[(usize, i32, i32)]) -> Result<Self, FeederError> {
        let mut out = self.clone();
        for &(id, lo, hi) in windows {
            let idx = self
                .lines
                .iter()
                .position(|l| l.id == id)
                .ok_or(FeederError::LtcOnUnknownLine(id))?;
            let ltc = self.ltc_of_line[idx].ok_or(FeederError::LtcOnUnknownLine(id))?;
            out.ltcs[ltc] = TapChanger::new(idx, lo, hi)?;
        }
        Ok(out)
    }

    /// Buses in the subtree fed by line `line` (its receiving bus included).
    pub fn downstream_buses(&self, line: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![self.lines[line].to];
        while let Some(bus) = stack.pop() {
            out.push(bus);
            stack.extend(self.child_lines[bus].iter().map(|&l| self.lines[l].to));
        }
        out.sort_unstable();
        out
    }

    /// Tap ratios for integer positions, checked against each window.
    pub fn ratios(&self, positions: &[i32]) -> Result<Vec<f64>, FeederError> {
        self.check_tap_count(positions.len())?;
        positions
            .iter()
            .zip(&self.ltcs)
            .map(|(&p, ltc)| {
                let ratio = tap_position_to_ratio(p)?;
                self.check_ratio(ltc, ratio)?;
                Ok(ratio)
            })
            .collect()
    }

    pub fn neutral_positions(&self) -> Vec<i32> {
        self.ltcs.iter().map(|l| 0.clamp(l.pos_min, l.pos_max)).collect()
    }

    /// Per-line coefficient on the parent voltage: `1/t²` for tap lines, else 1.
    pub fn line_coefficients(&self, taps: &[f64]) -> Result<Vec<f64>, FeederError> {
        self.check_tap_count(taps.len())?;
        let mut coef = vec![1.0; self.n];
        for (ltc, &t) in self.ltcs.iter().zip(taps) {
            self.check_ratio(ltc, t)?;
            coef[ltc.line] = 1.0 / (t * t);
        }
        Ok(coef)
    }

    fn check_tap_count(&self, got: usize) -> Result<(), FeederError> {
        if got != self.ltcs.len() {
            return Err(FeederError::TapCountMismatch {
                expected: self.ltcs.len(),
                got,
            });
        }
        Ok(())
    }

    fn check_ratio(&self, ltc: &TapChanger, ratio: f64) -> Result<(), FeederError> {
        if !ltc.accepts_ratio(ratio) {
            let (min, max) = ltc.ratio_bounds();
            return Err(FeederError::TapOutOfRange {
                line: self.lines[ltc.line].id,
                ratio,
                min,
                max,
            });
        }
        Ok(())
    }

    /// Description with lines in stored (parent→child) orientation.
    pub fn to_description(&self) -> FeederDescription {
        FeederDescription {
            v0: self.v0,
            buses: self.n,
            lines: self
                .lines
                .iter()
                .enumerate()
                .map(|(idx, l)| LineSpec {
                    id: l.id,
                    from: l.from,
                    to: l.to,
                    r: l.r,
                    x: l.x,
                    ltc: self.ltc_of_line[idx].map(|k| LtcSpec {
                        pos_min: self.ltcs[k].pos_min,
                        pos_max: self.ltcs[k].pos_max,
                    }),
                })
                .collect(),
        }
    }
}

/// `M(t)` (buses 1..N × lines) and `m(t)` (the substation row).
#[derive(Debug, Clone, PartialEq)]
pub struct IncidencePair {
    pub big_m: DMatrix<f64>,
    pub small_m: DVector<f64>,
}

/// Builds the tap-dependent reduced incidence matrix and its removed first row.
pub fn incidence_matrices(
    topology: &FeederTopology,
    taps: &[f64],
) -> Result<IncidencePair, FeederError> {
    let coef = topology.line_coefficients(taps)?;
    let n = topology.n;
    let mut full = DMatrix::zeros(n + 1, n);
    for (idx, line) in topology.lines.iter().enumerate() {
        full[(line.from, idx)] = coef[idx];
        full[(line.to, idx)] = -1.0;
    }
    Ok(IncidencePair {
        small_m: full.row(0).transpose(),
        big_m: full.rows(1, n).into_owned(),
    })
}
