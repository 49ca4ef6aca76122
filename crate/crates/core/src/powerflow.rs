//! Power flow on radial feeders.
//!
//! Three solvers share the tree ordering of [`FeederTopology`]:
//!
//! * [`lindistflow_solve`] — the lossless linearized model. Every row of
//!   `M(t)ᵀ v + m(t) v0 = 2 diag(r) M⁻¹ p + 2 diag(x) M⁻¹ q` reads
//!   `c_ℓ v_i − v_j = 2 (r_ℓ P_ℓ + x_ℓ Q_ℓ)` for line `ℓ = (i, j)`, with
//!   `c_ℓ = 1/t_ℓ²` on tap lines, so it is solved by substitution from the
//!   substation outwards.
//! * [`sweep_ac_solve`] — backward/forward sweep on the full branch flow
//!   equations with losses, used as ground truth.
//! * [`estimate_voltage_under_taps`] — re-estimates voltages after a tap
//!   change from measured voltages alone; injections never enter.

use thiserror::Error;

use crate::feeder::{FeederError, FeederTopology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error("expected vectors of length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite injection at bus {0}")]
    NonFiniteInjection(usize),
    #[error("sweep did not converge within {0} iterations")]
    NotConverged(usize),
    #[error("linear system is singular")]
    SingularSystem,
}

/// Active and reactive injections at buses 1..N (positive = generation).
#[derive(Debug, Clone, PartialEq)]
pub struct Injections {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Injections {
    pub fn zeros(n: usize) -> Self {
        Self {
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            p: self.p.iter().map(|x| x * alpha).collect(),
            q: self.q.iter().map(|x| x * alpha).collect(),
        }
    }

    fn check(&self, n: usize) -> Result<(), PowerFlowError> {
        for len in [self.p.len(), self.q.len()] {
            if len != n {
                return Err(PowerFlowError::LengthMismatch { expected: n, got: len });
            }
        }
        if let Some(i) = self
            .p
            .iter()
            .zip(&self.q)
            .position(|(p, q)| !(p.is_finite() && q.is_finite()))
        {
            return Err(PowerFlowError::NonFiniteInjection(i + 1));
        }
        Ok(())
    }
}

/// Squared voltage magnitudes at buses 1..N plus the substation value.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageState {
    pub v: Vec<f64>,
    pub v0: f64,
}

impl VoltageState {
    /// Voltage magnitudes `√v`.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.sqrt()).collect()
    }

    fn at(&self, bus: usize) -> f64 {
        if bus == 0 {
            self.v0
        } else {
            self.v[bus - 1]
        }
    }
}

/// Subtree sums of `-injection`: the flow on each line in the lossless model,
/// i.e. `M⁻¹ p` for the plain incidence matrix.
pub fn lossless_line_flows(topology: &FeederTopology, inj: &[f64]) -> Vec<f64> {
    let lines = topology.lines();
    let mut flow = vec![0.0; lines.len()];
    for &idx in topology.sweep_order().iter().rev() {
        let to = lines[idx].to;
        let downstream: f64 = topology.child_lines(to).iter().map(|&c| flow[c]).sum();
        flow[idx] = downstream - inj[to - 1];
    }
    flow
}

/// Solves the tap-aware LinDistFlow model.
pub fn lindistflow_solve(
    topology: &FeederTopology,
    taps: &[f64],
    inj: &Injections,
) -> Result<VoltageState, PowerFlowError> {
    let coef = topology.line_coefficients(taps)?;
    inj.check(topology.n())?;
    let p_flow = lossless_line_flows(topology, &inj.p);
    let q_flow = lossless_line_flows(topology, &inj.q);
    let lines = topology.lines();
    let mut out = VoltageState {
        v: vec![0.0; topology.n()],
        v0: topology.v0(),
    };
    for &idx in topology.sweep_order() {
        let line = &lines[idx];
        let drop = 2.0 * (line.r * p_flow[idx] + line.x * q_flow[idx]);
        out.v[line.to - 1] = coef[idx] * out.at(line.from) - drop;
    }
    Ok(out)
}

/// Convergence settings for [`sweep_ac_solve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    /// Maximum change of any voltage magnitude between sweeps.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// Backward/forward sweep on the branch flow equations, flat start.
///
/// Backward pass: sending-end flows `P_ℓ = P_recv + r_ℓ (P_recv² + Q_recv²)/v_j`
/// with `P_recv` the receiving-end flow. Forward pass: with `u = c_ℓ v_i` the
/// secondary-side squared voltage,
/// `v_j = u − 2(r P_ℓ + x Q_ℓ) + (r² + x²)(P_ℓ² + Q_ℓ²)/u`.
pub fn sweep_ac_solve(
    topology: &FeederTopology,
    taps: &[f64],
    inj: &Injections,
    opts: SweepOptions,
) -> Result<VoltageState, PowerFlowError> {
    let coef = topology.line_coefficients(taps)?;
    inj.check(topology.n())?;
    let lines = topology.lines();
    let order = topology.sweep_order();
    let mut state = VoltageState {
        v: vec![topology.v0(); topology.n()],
        v0: topology.v0(),
    };
    let mut p_send = vec![0.0; lines.len()];
    let mut q_send = vec![0.0; lines.len()];
    // squared current as seen from the receiving end
    let mut current_recv = vec![0.0; lines.len()];

    for _ in 0..opts.max_iter {
        for &idx in order.iter().rev() {
            let line = &lines[idx];
            let to = line.to;
            let mut p_recv = -inj.p[to - 1];
            let mut q_recv = -inj.q[to - 1];
            for &c in topology.child_lines(to) {
                p_recv += p_send[c];
                q_recv += q_send[c];
            }
            let current_sq = (p_recv * p_recv + q_recv * q_recv) / state.v[to - 1];
            current_recv[idx] = current_sq;
            p_send[idx] = p_recv + line.r * current_sq;
            q_send[idx] = q_recv + line.x * current_sq;
        }

        let mut max_change: f64 = 0.0;
        for &idx in order {
            let line = &lines[idx];
            let u = coef[idx] * state.at(line.from);
            let (p, q) = (p_send[idx], q_send[idx]);
            let z_sq = line.r * line.r + line.x * line.x;
            let v_new = u - 2.0 * (line.r * p + line.x * q) + z_sq * (p * p + q * q) / u;
            if !(v_new.is_finite() && v_new > 0.0) {
                return Err(PowerFlowError::NotConverged(opts.max_iter));
            }
            let old = state.v[line.to - 1];
            max_change = max_change.max((v_new.sqrt() - old.sqrt()).abs());
            state.v[line.to - 1] = v_new;
        }
        if max_change < opts.tol {
            // A fixed point is a solution only if both ends see the same
            // current; heavy overloads otherwise settle on a spurious
            // high-voltage point.
            let consistent = order.iter().all(|&idx| {
                let line = &lines[idx];
                let u = coef[idx] * state.at(line.from);
                let (p, q) = (p_send[idx], q_send[idx]);
                let sending = (p * p + q * q) / u;
                (sending - current_recv[idx]).abs() <= 1e-6 * sending.max(1.0)
            });
            return if consistent {
                Ok(state)
            } else {
                Err(PowerFlowError::NotConverged(opts.max_iter))
            };
        }
    }
    Err(PowerFlowError::NotConverged(opts.max_iter))
}

/// Solver used to realize the environment (or as exhaustive-search truth).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvironmentSolver {
    Sweep(SweepOptions),
    Linear,
}

impl Default for EnvironmentSolver {
    fn default() -> Self {
        Self::Sweep(SweepOptions::default())
    }
}

impl EnvironmentSolver {
    pub fn solve(
        &self,
        topology: &FeederTopology,
        taps: &[f64],
        inj: &Injections,
    ) -> Result<VoltageState, PowerFlowError> {
        match self {
            Self::Sweep(opts) => sweep_ac_solve(topology, taps, inj, *opts),
            Self::Linear => lindistflow_solve(topology, taps, inj),
        }
    }
}

/// Estimates squared voltages after moving taps from `taps_dag` to
/// `taps_ddag`, holding the injection-driven right-hand side fixed:
/// `M(t‡)ᵀ v‡ + m(t‡) v0 = M(t†)ᵀ v† + m(t†) v0`.
///
/// Line by line this is `c‡ v‡_i − v‡_j = c† v†_i − v†_j`, solved outwards.
pub fn estimate_voltage_under_taps(
    topology: &FeederTopology,
    v_dag: &VoltageState,
    taps_dag: &[f64],
    taps_ddag: &[f64],
) -> Result<VoltageState, PowerFlowError> {
    let coef_dag = topology.line_coefficients(taps_dag)?;
    let coef_ddag = topology.line_coefficients(taps_ddag)?;
    if v_dag.v.len() != topology.n() {
        return Err(PowerFlowError::LengthMismatch {
            expected: topology.n(),
            got: v_dag.v.len(),
        });
    }
    let lines = topology.lines();
    let mut out = VoltageState {
        v: vec![0.0; topology.n()],
        v0: v_dag.v0,
    };
    for &idx in topology.sweep_order() {
        let line = &lines[idx];
        let rhs = coef_dag[idx] * v_dag.at(line.from) - v_dag.at(line.to);
        out.v[line.to - 1] = coef_ddag[idx] * out.at(line.from) - rhs;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{validate_topology, FeederDescription, LineSpec, LtcSpec};

    fn two_bus(ltc: bool) -> FeederTopology {
        validate_topology(&FeederDescription {
            v0: 1.0,
            buses: 1,
            lines: vec![LineSpec {
                id: 1,
                from: 0,
                to: 1,
                r: 0.01,
                x: 0.01,
                ltc: ltc.then_some(LtcSpec {
                    pos_min: -16,
                    pos_max: 16,
                }),
            }],
        })
        .unwrap()
    }

    #[test]
    fn zero_injection_is_flat() {
        let t = two_bus(false);
        let inj = Injections::zeros(1);
        assert_eq!(lindistflow_solve(&t, &[], &inj).unwrap().v, vec![1.0]);
        assert_eq!(
            sweep_ac_solve(&t, &[], &inj, SweepOptions::default()).unwrap().v,
            vec![1.0]
        );
    }

    #[test]
    fn two_bus_hand_value() {
        let t = two_bus(false);
        let inj = Injections {
            p: vec![-0.1],
            q: vec![-0.1],
        };
        let v = lindistflow_solve(&t, &[], &inj).unwrap();
        assert!((v.v[0] - 0.996).abs() < 1e-14);
    }

    #[test]
    fn tap_scales_secondary() {
        let t = two_bus(true);
        let v = lindistflow_solve(&t, &[0.95], &Injections::zeros(1)).unwrap();
        assert!((v.v[0] - 1.0 / (0.95 * 0.95)).abs() < 1e-14);
    }

    #[test]
    fn voltage_collapse_does_not_converge() {
        let t = two_bus(false);
        let inj = Injections {
            p: vec![-100.0],
            q: vec![0.0],
        };
        assert!(matches!(
            sweep_ac_solve(&t, &[], &inj, SweepOptions::default()),
            Err(PowerFlowError::NotConverged(_))
        ));
    }

    #[test]
    fn sweep_gap_shrinks_quadratically() {
        let t = two_bus(false);
        let base = Injections {
            p: vec![-0.2],
            q: vec![-0.1],
        };
        let gaps: Vec<f64> = [1.0, 0.5, 0.25]
            .iter()
            .map(|&a| {
                let inj = base.scaled(a);
                let lin = lindistflow_solve(&t, &[], &inj).unwrap();
                let ac = sweep_ac_solve(&t, &[], &inj, SweepOptions::default()).unwrap();
                (lin.v[0] - ac.v[0]).abs()
            })
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2]);
        // halving the load should divide the loss-driven gap by about four
        let ratio = gaps[1] / gaps[2];
        assert!((3.5..4.6).contains(&ratio), "ratio {ratio}");
        let bound = 2.0 * (0.01 * 0.04 + 0.01 * 0.01);
        assert!(gaps[0] < bound);
    }

    #[test]
    fn estimator_identity_and_exactness() {
        let t = two_bus(true);
        let inj = Injections {
            p: vec![-0.3],
            q: vec![-0.1],
        };
        let v = lindistflow_solve(&t, &[1.0], &inj).unwrap();
        assert_eq!(estimate_voltage_under_taps(&t, &v, &[1.0], &[1.0]).unwrap(), v);
        let moved = estimate_voltage_under_taps(&t, &v, &[1.0], &[0.925]).unwrap();
        let direct = lindistflow_solve(&t, &[0.925], &inj).unwrap();
        assert!((moved.v[0] - direct.v[0]).abs() < 1e-14);
    }
}
