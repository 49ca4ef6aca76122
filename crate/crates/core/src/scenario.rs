//! Built-in single-phase reductions of the IEEE 13-node and 123-node test
//! feeders, with matching load and controller settings.
//!
//! 13-node bus order: 650 (substation), 632, 633, 634, 645, 646, 671, 680,
//! 684, 611, 652, 692, 675; 5 MVA / 4.16 kV base, one LTC on 650–632.
//!
//! 123-node: node 150 is the substation and the remaining nodes are numbered
//! in ascending IEEE order; 1 MVA / 4.16 kV base; LTCs on 150–149, 9–14,
//! 25–26 and 160–67.

use crate::control::{CenterSpec, ControllerConfig};
use crate::feeder::FeederTopology;
use crate::harness::HarnessError;
use crate::io::parse_feeder_json;
use crate::loads::LoadConfig;

pub const IEEE13_JSON: &str = include_str!("../data/ieee13.json");
pub const IEEE123_JSON: &str = include_str!("../data/ieee123.json");

/// IEEE bus labels of the 13-node reduction, index = internal bus number.
pub const IEEE13_LABELS: [u32; 13] = [650, 632, 633, 634, 645, 646, 671, 680, 684, 611, 652, 692, 675];

pub fn ieee13() -> FeederTopology {
    parse_feeder_json(IEEE13_JSON, "ieee13.json").expect("built-in feeder is valid")
}

pub fn ieee123() -> FeederTopology {
    parse_feeder_json(IEEE123_JSON, "ieee123.json").expect("built-in feeder is valid")
}

/// Looks up a built-in feeder by name.
pub fn builtin_feeder(name: &str) -> Option<FeederTopology> {
    match name {
        "ieee13" => Some(ieee13()),
        "ieee123" => Some(ieee123()),
        _ => None,
    }
}

/// Parses a feeder file, or a built-in name such as `ieee13`.
pub fn resolve_feeder(spec: &str) -> Result<FeederTopology, HarnessError> {
    match builtin_feeder(spec) {
        Some(t) => Ok(t),
        None => crate::io::load_feeder_file(std::path::Path::new(spec)),
    }
}

/// Nominal 13-node load totals (kW, kvar); the synthetic day peaks at them.
pub const IEEE13_NOMINAL_KW: f64 = 3466.0;
pub const IEEE13_NOMINAL_KVAR: f64 = 2102.0;

/// Spot loads of the 13-node feeder (kW) with the distributed 632–671 load
/// split between its ends, normalized. The peak and the power factor match
/// the nominal totals.
pub fn ieee13_loads() -> LoadConfig {
    let kw = [(1, 100.0), (3, 400.0), (4, 170.0), (5, 230.0), (6, 1255.0), (9, 170.0), (10, 128.0), (11, 170.0), (12, 843.0)];
    let total: f64 = kw.iter().map(|(_, p)| p).sum();
    LoadConfig {
        max_total: IEEE13_NOMINAL_KW / 5000.0,
        power_factor: IEEE13_NOMINAL_KW / IEEE13_NOMINAL_KW.hypot(IEEE13_NOMINAL_KVAR),
        load_buses: kw.iter().map(|(b, _)| *b).collect(),
        bus_weights: Some(kw.iter().map(|(_, p)| p / total).collect()),
        ..LoadConfig::default()
    }
}

pub fn ieee13_controller() -> ControllerConfig {
    ControllerConfig::default()
}

/// Nominal 123-node load totals (kW, kvar).
pub const IEEE123_NOMINAL_KW: f64 = 3490.0;
pub const IEEE123_NOMINAL_KVAR: f64 = 1920.0;

/// Loads spread over every 123-node bus with seeded weights, peaking at the
/// nominal totals.
pub fn ieee123_loads() -> LoadConfig {
    LoadConfig {
        max_total: IEEE123_NOMINAL_KW / 1000.0,
        power_factor: IEEE123_NOMINAL_KW / IEEE123_NOMINAL_KW.hypot(IEEE123_NOMINAL_KVAR),
        ..LoadConfig::default()
    }
}

/// Fewer, wider-spaced centers; the substation LTC sees lower voltages.
pub fn ieee123_controller() -> ControllerConfig {
    ControllerConfig {
        sweeps: Some(3),
        batch_size: 3600,
        kappa: 11,
        center_start: 0.94,
        center_step: 0.01,
        centers: vec![CenterSpec {
            ltc: 3,
            start: 0.89,
            step: 0.01,
        }],
        ..ControllerConfig::default()
    }
}

/// Run settings matching a built-in feeder name; generic defaults otherwise.
pub fn base_run_config(feeder: &str) -> crate::config::RunConfig {
    use crate::config::RunConfig;
    match feeder {
        "ieee13" => RunConfig {
            control: ieee13_controller(),
            loads: ieee13_loads(),
            ..RunConfig::default()
        },
        "ieee123" => RunConfig {
            control: ieee123_controller(),
            loads: ieee123_loads(),
            ..RunConfig::default()
        },
        _ => RunConfig::default(),
    }
}
