//! File formats: feeder JSON, injection and profile CSVs, history logs,
//! episode outputs and weight snapshots.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::feeder::{validate_topology, FeederDescription, FeederTopology};
use crate::harness::{EpisodeLog, HarnessError};
use crate::loads::LoadProfile;
use crate::mdp::{History, HistoryRecord, SystemState, TapAction};
use crate::powerflow::{Injections, VoltageState};

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn read_to_string(path: &Path) -> Result<String, HarnessError> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| io_err(path, e))?;
    Ok(s)
}

fn csv_err(source: &str, e: csv::Error) -> HarnessError {
    let line = e.position().map_or(0, |p| p.line());
    HarnessError::Parse {
        source_name: source.to_string(),
        line,
        column: 0,
        message: e.to_string(),
    }
}

fn field_err(source: &str, line: u64, column: usize, message: impl Into<String>) -> HarnessError {
    HarnessError::Parse {
        source_name: source.to_string(),
        line,
        column: column as u64 + 1,
        message: message.into(),
    }
}

/// Parses and validates a feeder description.
pub fn parse_feeder_json(text: &str, source: &str) -> Result<FeederTopology, HarnessError> {
    let desc: FeederDescription =
        serde_json::from_str(text).map_err(|e| HarnessError::Parse {
            source_name: source.to_string(),
            line: e.line() as u64,
            column: e.column() as u64,
            message: e.to_string(),
        })?;
    Ok(validate_topology(&desc)?)
}

pub fn load_feeder_file(path: &Path) -> Result<FeederTopology, HarnessError> {
    parse_feeder_json(&read_to_string(path)?, &path.display().to_string())
}

/// Canonical JSON form: lines oriented away from the substation.
pub fn feeder_to_json(topology: &FeederTopology) -> String {
    serde_json::to_string_pretty(&topology.to_description()).expect("feeder serializes")
}

pub fn write_feeder_file(path: &Path, topology: &FeederTopology) -> Result<(), HarnessError> {
    std::fs::write(path, feeder_to_json(topology) + "\n").map_err(|e| io_err(path, e))
}

fn parse_f64(source: &str, line: u64, col: usize, s: &str) -> Result<f64, HarnessError> {
    s.trim()
        .parse()
        .map_err(|_| field_err(source, line, col, format!("expected a number, got {s:?}")))
}

fn parse_int<T: std::str::FromStr>(
    source: &str,
    line: u64,
    col: usize,
    s: &str,
) -> Result<T, HarnessError> {
    s.trim()
        .parse()
        .map_err(|_| field_err(source, line, col, format!("expected an integer, got {s:?}")))
}

fn check_header(
    source: &str,
    reader: &mut csv::Reader<impl Read>,
    expected: &[&str],
) -> Result<(), HarnessError> {
    let header = reader.headers().map_err(|e| csv_err(source, e))?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(HarnessError::SchemaMismatch(format!(
            "{source}: expected columns {expected:?}, got {got:?}"
        )));
    }
    Ok(())
}

/// Reads `bus,p,q` rows; buses not listed have zero injection.
pub fn read_injections_csv(
    reader: impl Read,
    n: usize,
    source: &str,
) -> Result<Injections, HarnessError> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(source, &mut rdr, &["bus", "p", "q"])?;
    let mut inj = Injections::zeros(n);
    let mut seen = vec![false; n];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(source, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bus: usize = parse_int(source, line, 0, &rec[0])?;
        if bus == 0 || bus > n {
            return Err(field_err(source, line, 0, format!("bus {bus} outside 1..={n}")));
        }
        if std::mem::replace(&mut seen[bus - 1], true) {
            return Err(field_err(source, line, 0, format!("bus {bus} listed twice")));
        }
        inj.p[bus - 1] = parse_f64(source, line, 1, &rec[1])?;
        inj.q[bus - 1] = parse_f64(source, line, 2, &rec[2])?;
    }
    Ok(inj)
}

pub fn load_injections_file(path: &Path, n: usize) -> Result<Injections, HarnessError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_injections_csv(f, n, &path.display().to_string())
}

/// Writes `bus,V` rows of voltage magnitudes.
pub fn write_voltages_csv(writer: impl Write, state: &VoltageState) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| HarnessError::SchemaMismatch(e.to_string());
    w.write_record(["bus", "V"]).map_err(wrap)?;
    for (i, m) in state.magnitudes().iter().enumerate() {
        w.write_record([(i + 1).to_string(), m.to_string()]).map_err(wrap)?;
    }
    w.flush().map_err(|e| HarnessError::SchemaMismatch(e.to_string()))
}

/// Writes a profile as `step,bus,p,q` rows, every bus at every step.
pub fn write_profile_csv(writer: impl Write, profile: &LoadProfile) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| HarnessError::SchemaMismatch(e.to_string());
    w.write_record(["step", "bus", "p", "q"]).map_err(wrap)?;
    for (k, inj) in profile.steps.iter().enumerate() {
        for b in 0..inj.p.len() {
            w.write_record([
                k.to_string(),
                (b + 1).to_string(),
                inj.p[b].to_string(),
                inj.q[b].to_string(),
            ])
            .map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| HarnessError::SchemaMismatch(e.to_string()))
}

/// Reads `step,bus,p,q` rows. Steps must be numbered from 0 without gaps;
/// omitted buses carry zero injection.
pub fn read_profile_csv(
    reader: impl Read,
    n: usize,
    step_minutes: u32,
    source: &str,
) -> Result<LoadProfile, HarnessError> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(source, &mut rdr, &["step", "bus", "p", "q"])?;
    let mut steps: Vec<Injections> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(source, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let step: usize = parse_int(source, line, 0, &rec[0])?;
        let bus: usize = parse_int(source, line, 1, &rec[1])?;
        if bus == 0 || bus > n {
            return Err(field_err(source, line, 1, format!("bus {bus} outside 1..={n}")));
        }
        if step > steps.len() {
            return Err(field_err(source, line, 0, format!("step {step} skips ahead")));
        }
        if step == steps.len() {
            steps.push(Injections::zeros(n));
        }
        steps[step].p[bus - 1] = parse_f64(source, line, 2, &rec[2])?;
        steps[step].q[bus - 1] = parse_f64(source, line, 3, &rec[3])?;
    }
    Ok(LoadProfile {
        step_minutes,
        steps,
    })
}

pub fn load_profile_csv(path: &Path, n: usize, step_minutes: u32) -> Result<LoadProfile, HarnessError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_profile_csv(f, n, step_minutes, &path.display().to_string())
}

fn history_header(n_ltc: usize, n: usize) -> Vec<String> {
    let mut h = vec!["k".to_string(), "timestamp".to_string()];
    h.extend((1..=n_ltc).map(|i| format!("pos_{i}")));
    h.extend((1..=n).map(|i| format!("v_{i}")));
    h.extend((1..=n_ltc).map(|i| format!("a_{i}")));
    h.push("r".into());
    h
}

/// History log: `k,timestamp,pos_1..,v_1..,a_1..,r`; `v` squared, actions
/// in tap steps.
pub fn write_history_csv(writer: impl Write, history: &History) -> Result<(), HarnessError> {
    let Some(first) = history.records().first() else {
        return Err(HarnessError::EmptyLog);
    };
    let (n_ltc, n) = (first.state.positions.len(), first.state.v.len());
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| HarnessError::SchemaMismatch(e.to_string());
    w.write_record(history_header(n_ltc, n)).map_err(wrap)?;
    for r in history.records() {
        let mut row = vec![r.k.to_string(), r.timestamp.to_string()];
        row.extend(r.state.positions.iter().map(|p| p.to_string()));
        row.extend(r.state.v.iter().map(|v| v.to_string()));
        row.extend(r.action.steps.iter().map(|a| a.to_string()));
        row.push(r.reward.to_string());
        w.write_record(row).map_err(wrap)?;
    }
    w.flush().map_err(|e| HarnessError::SchemaMismatch(e.to_string()))
}

/// Reads a history log, re-validating the chain while appending.
pub fn read_history_csv(reader: impl Read, source: &str) -> Result<History, HarnessError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(source, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let n_ltc = header.iter().filter(|h| h.starts_with("pos_")).count();
    let n = header.iter().filter(|h| h.starts_with("v_")).count();
    if header != history_header(n_ltc, n) {
        return Err(HarnessError::SchemaMismatch(format!(
            "{source}: unexpected history columns {header:?}"
        )));
    }
    let mut history = History::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(source, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let k: u64 = parse_int(source, line, 0, &rec[0])?;
        let timestamp: u64 = parse_int(source, line, 1, &rec[1])?;
        let positions = (0..n_ltc)
            .map(|i| parse_int(source, line, 2 + i, &rec[2 + i]))
            .collect::<Result<Vec<i32>, _>>()?;
        let v = (0..n)
            .map(|i| parse_f64(source, line, 2 + n_ltc + i, &rec[2 + n_ltc + i]))
            .collect::<Result<Vec<f64>, _>>()?;
        let off = 2 + n_ltc + n;
        let steps = (0..n_ltc)
            .map(|i| parse_int(source, line, off + i, &rec[off + i]))
            .collect::<Result<Vec<i32>, _>>()?;
        let reward = parse_f64(source, line, off + n_ltc, &rec[off + n_ltc])?;
        let state = SystemState::new(positions, v)
            .map_err(|e| field_err(source, line, 2 + n_ltc, e.to_string()))?;
        history
            .append(HistoryRecord {
                k,
                timestamp,
                state,
                action: TapAction { steps },
                reward,
            })
            .map_err(|e| field_err(source, line, 0, e.to_string()))?;
    }
    Ok(history)
}

/// Per-step episode log: positions before acting, magnitudes, action,
/// reward and the controller's value diagnostics.
pub fn write_episode_csv(writer: impl Write, log: &EpisodeLog) -> Result<(), HarnessError> {
    let Some(first) = log.records.first() else {
        return Err(HarnessError::EmptyLog);
    };
    let (n_ltc, n) = (first.positions.len(), first.v.len());
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| HarnessError::SchemaMismatch(e.to_string());
    let mut header = vec!["k".to_string(), "timestamp".to_string()];
    header.extend((1..=n_ltc).map(|i| format!("pos_{i}")));
    header.extend((1..=n).map(|i| format!("V_{i}")));
    header.extend((1..=n_ltc).map(|i| format!("a_{i}")));
    header.push("r".into());
    header.extend((1..=n_ltc).map(|i| format!("greedy_{i}")));
    header.extend((1..=n_ltc).map(|i| format!("hold_{i}")));
    w.write_record(&header).map_err(wrap)?;
    for r in &log.records {
        let mut row = vec![r.k.to_string(), r.timestamp.to_string()];
        row.extend(r.positions.iter().map(|p| p.to_string()));
        row.extend(r.v.iter().map(|v| v.sqrt().to_string()));
        row.extend(r.action.iter().map(|a| a.to_string()));
        row.push(r.reward.to_string());
        row.extend(r.decision.greedy_values.iter().map(|x| x.to_string()));
        row.extend(r.decision.incumbent_values.iter().map(|x| x.to_string()));
        w.write_record(row).map_err(wrap)?;
    }
    w.flush().map_err(|e| HarnessError::SchemaMismatch(e.to_string()))
}

/// Plot-ready comparison tables: tap positions and rewards of several
/// controllers side by side, aligned by step.
pub fn write_comparison_csvs(dir: &Path, logs: &[&EpisodeLog]) -> Result<(), HarnessError> {
    let Some(first) = logs.first() else {
        return Err(HarnessError::EmptyLog);
    };
    let wrap = |e: csv::Error| HarnessError::SchemaMismatch(e.to_string());
    let open = |name: &str| {
        let path = dir.join(name);
        File::create(&path).map_err(|e| io_err(&path, e))
    };

    let mut taps = csv::Writer::from_writer(open("taps.csv")?);
    let mut rewards = csv::Writer::from_writer(open("rewards.csv")?);
    let n_ltc = first.records.first().map_or(0, |r| r.positions.len());
    let mut th = vec!["k".to_string(), "minutes".to_string()];
    let mut rh = th.clone();
    for log in logs {
        th.extend((1..=n_ltc).map(|i| format!("{}_pos_{i}", log.controller)));
        rh.push(log.controller.clone());
    }
    taps.write_record(&th).map_err(wrap)?;
    rewards.write_record(&rh).map_err(wrap)?;
    for (i, rec) in first.records.iter().enumerate() {
        let head = [rec.k.to_string(), rec.timestamp.to_string()];
        let mut trow = head.to_vec();
        let mut rrow = head.to_vec();
        for log in logs {
            let r = &log.records[i];
            trow.extend(
                r.positions
                    .iter()
                    .zip(&r.action)
                    .map(|(p, a)| (p + a).to_string()),
            );
            rrow.push(r.reward.to_string());
        }
        taps.write_record(trow).map_err(wrap)?;
        rewards.write_record(rrow).map_err(wrap)?;
    }
    taps.flush().map_err(|e| io_err(dir, e))?;
    rewards.flush().map_err(|e| io_err(dir, e))?;

    for log in logs {
        let mut w = csv::Writer::from_writer(open(&format!("voltages_{}.csv", log.controller))?);
        let n = log.records.first().map_or(0, |r| r.v_next.len());
        let mut header = vec!["k".to_string(), "minutes".to_string()];
        header.extend((1..=n).map(|i| format!("V_{i}")));
        w.write_record(&header).map_err(wrap)?;
        for r in &log.records {
            let mut row = vec![r.k.to_string(), r.timestamp.to_string()];
            row.extend(r.v_next.iter().map(|v| v.sqrt().to_string()));
            w.write_record(row).map_err(wrap)?;
        }
        w.flush().map_err(|e| io_err(dir, e))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}
