//! Synthetic load profiles.
//!
//! An hourly system-total shape is scaled so its maximum equals the target,
//! linearly interpolated to the control step, multiplied step by step by
//! Gaussian noise with mean 1, and split across load buses by fixed weights.
//! Every load bus runs at the same lagging power factor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::powerflow::Injections;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoadError {
    #[error("degenerate load shape: {0}")]
    DegenerateShape(String),
    #[error("bad bus weights: {0}")]
    BadWeights(String),
}

/// Residential weekday curve with morning and evening peaks, 24 hourly
/// points, relative units.
pub const RESIDENTIAL_SHAPE: [f64; 24] = [
    0.42, 0.38, 0.36, 0.35, 0.36, 0.42, 0.58, 0.74, 0.78, 0.70, 0.64, 0.62, 0.61, 0.60, 0.62,
    0.68, 0.80, 0.93, 1.00, 0.98, 0.90, 0.78, 0.62, 0.50,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadConfig {
    /// Hourly shape of the system total; treated as periodic.
    pub hourly_shape: Vec<f64>,
    /// Number of times the shape is repeated.
    pub days: usize,
    /// Peak system total active load (p.u.).
    pub max_total: f64,
    /// Standard deviation of the multiplicative noise.
    pub noise_std: f64,
    /// Fixed split over `load_buses`; drawn from a flat Dirichlet when absent.
    pub bus_weights: Option<Vec<f64>>,
    /// Buses (1-based) that carry load; all buses when empty.
    pub load_buses: Vec<usize>,
    pub power_factor: f64,
    pub step_minutes: u32,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self {
            hourly_shape: RESIDENTIAL_SHAPE.to_vec(),
            days: 7,
            max_total: 1.0,
            noise_std: 0.02,
            bus_weights: None,
            load_buses: Vec::new(),
            power_factor: 0.95,
            step_minutes: 5,
        }
    }
}

/// Per-step injections at buses 1..N.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    pub step_minutes: u32,
    pub steps: Vec<Injections>,
}

impl LoadProfile {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn n_buses(&self) -> usize {
        self.steps.first().map_or(0, |s| s.p.len())
    }

    /// Total active load per step (positive).
    pub fn total_load(&self) -> Vec<f64> {
        self.steps.iter().map(|s| -s.p.iter().sum::<f64>()).collect()
    }
}

/// Noise-free system total at each step: scaled and interpolated shape.
pub fn expected_totals(cfg: &LoadConfig) -> Result<Vec<f64>, LoadError> {
    let shape = &cfg.hourly_shape;
    if shape.len() < 2 {
        return Err(LoadError::DegenerateShape("fewer than two points".into()));
    }
    if shape.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(LoadError::DegenerateShape("values must be finite and non-negative".into()));
    }
    let peak = shape.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(LoadError::DegenerateShape("shape is identically zero".into()));
    }
    if cfg.step_minutes == 0 || 60 % cfg.step_minutes != 0 {
        return Err(LoadError::DegenerateShape(format!(
            "step of {} minutes does not divide an hour",
            cfg.step_minutes
        )));
    }
    let per_hour = (60 / cfg.step_minutes) as usize;
    let hours = shape.len() * cfg.days;
    let scale = cfg.max_total / peak;
    let at = |h: usize| shape[h % shape.len()] * scale;
    Ok((0..hours * per_hour)
        .map(|step| {
            let h = step / per_hour;
            let frac = (step % per_hour) as f64 / per_hour as f64;
            at(h) + (at(h + 1) - at(h)) * frac
        })
        .collect())
}

fn bus_weights(cfg: &LoadConfig, load_buses: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, LoadError> {
    match &cfg.bus_weights {
        Some(w) => {
            if w.len() != load_buses.len() {
                return Err(LoadError::BadWeights(format!(
                    "{} weights for {} load buses",
                    w.len(),
                    load_buses.len()
                )));
            }
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(LoadError::BadWeights("weights must be non-negative".into()));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(LoadError::BadWeights(format!("weights sum to {sum}")));
            }
            Ok(w.clone())
        }
        None => {
            let draws: Vec<f64> = load_buses.iter().map(|_| Exp1.sample(rng)).collect();
            let sum: f64 = draws.iter().sum();
            Ok(draws.into_iter().map(|d: f64| d / sum).collect())
        }
    }
}

/// Builds a seeded load profile for a feeder with `n` non-substation buses.
pub fn synthesize_loads(cfg: &LoadConfig, n: usize, seed: u64) -> Result<LoadProfile, LoadError> {
    let totals = expected_totals(cfg)?;
    let load_buses: Vec<usize> = if cfg.load_buses.is_empty() {
        (1..=n).collect()
    } else {
        cfg.load_buses.clone()
    };
    if load_buses.iter().any(|&b| b == 0 || b > n) {
        return Err(LoadError::BadWeights("load bus outside 1..=N".into()));
    }
    if !(cfg.power_factor > 0.0 && cfg.power_factor <= 1.0) {
        return Err(LoadError::DegenerateShape("power factor must lie in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = bus_weights(cfg, &load_buses, &mut rng)?;
    let noise = Normal::new(1.0, cfg.noise_std)
        .map_err(|e| LoadError::DegenerateShape(format!("noise: {e}")))?;
    let q_ratio = cfg.power_factor.acos().tan();
    let steps = totals
        .into_iter()
        .map(|total| {
            let total = total * noise.sample(&mut rng);
            let mut inj = Injections::zeros(n);
            for (&bus, &w) in load_buses.iter().zip(&weights) {
                let p = total * w;
                inj.p[bus - 1] = -p;
                inj.q[bus - 1] = -p * q_ratio;
            }
            inj
        })
        .collect();
    Ok(LoadProfile {
        step_minutes: cfg.step_minutes,
        steps,
    })
}
