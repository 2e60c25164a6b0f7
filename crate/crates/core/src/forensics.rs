//! Post-hoc analysis of recorded trajectories: ingest, differentiate,
//! evaluate allocations and margins per step, and rank violations.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::barrier::{barrier_eval, BarrierConfig};
use crate::dynamics::{wrap_angle, AgentState, ControlInput, InputBounds};
use crate::error::{Error, Result};
use crate::learning::{header_positions, parse_field};
use crate::responsibility::{racbf_margin, worst_case_margin, Responsibility, Side};
use crate::sim::{fmt_f, TrajectoryLog};

pub const MIN_SAMPLES: usize = 5;
/// Margins below `-VIOLATION_TOL` count as violations.
pub const VIOLATION_TOL: f64 = 1e-9;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Position and yaw series on a common uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    pub ids: Vec<String>,
    pub times: Vec<f64>,
    pub dt: f64,
    /// `[agent][step] = (x, y, theta)`
    pub samples: Vec<Vec<[f64; 3]>>,
}

/// Full states and inputs on a uniform grid, `[step][agent]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicSeries {
    pub ids: Vec<String>,
    pub times: Vec<f64>,
    pub dt: f64,
    pub states: Vec<Vec<AgentState>>,
    pub inputs: Vec<Vec<ControlInput>>,
}

impl KinematicSeries {
    pub fn from_log(log: &TrajectoryLog) -> Self {
        Self {
            ids: (0..log.agents()).map(|k| k.to_string()).collect(),
            times: log.records.iter().map(|r| r.t).collect(),
            dt: log.dt,
            states: log.records.iter().map(|r| r.states.clone()).collect(),
            inputs: log.records.iter().map(|r| r.inputs.clone()).collect(),
        }
    }

    pub fn agents(&self) -> usize {
        self.ids.len()
    }
}

struct AgentRows {
    id: String,
    rows: Vec<(f64, Vec<f64>)>,
}

/// Parse per-agent rows with the given value columns, check each agent's
/// time grid, and intersect the grids.
fn read_rows<R: Read>(r: R, value_cols: &[&str]) -> Result<(Vec<String>, Vec<f64>, f64, Vec<Vec<Vec<f64>>>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let mut required = vec!["t", "agent_id"];
    required.extend_from_slice(value_cols);
    let pos = header_positions(&header, &required)?;
    let scenario_col = header.iter().position(|h| h.trim() == "scenario_id");
    let mut scenario: Option<String> = None;
    let mut agents: Vec<AgentRows> = Vec::new();
    let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Schema(format!("malformed row {}: {e}", row + 2)))?;
        let line = row as u64 + 2;
        if let Some(c) = scenario_col {
            let s = rec.get(c).unwrap_or("").to_string();
            match &scenario {
                None => scenario = Some(s),
                Some(prev) if *prev != s => {
                    return Err(Error::Schema(format!(
                        "line {line}: file mixes scenarios '{prev}' and '{s}'; analyze one at a time"
                    )))
                }
                _ => {}
            }
        }
        let t = parse_field(&rec, pos[0], "t", line)?;
        let id = rec.get(pos[1]).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::Schema(format!("line {line}: empty agent_id")));
        }
        let vals = value_cols
            .iter()
            .enumerate()
            .map(|(k, name)| parse_field(&rec, pos[k + 2], name, line))
            .collect::<Result<Vec<_>>>()?;
        let a = *by_id.entry(id.clone()).or_insert_with(|| {
            agents.push(AgentRows { id: id.clone(), rows: Vec::new() });
            agents.len() - 1
        });
        if let Some(&(prev, _)) = agents[a].rows.last() {
            if t <= prev {
                return Err(Error::Schema(format!(
                    "line {line}: timestamps for agent {id} are not strictly increasing ({t} after {prev})"
                )));
            }
        }
        agents[a].rows.push((t, vals));
    }
    if agents.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 agents, found {}", agents.len())));
    }
    let mut dt = None;
    for a in &agents {
        if a.rows.len() < 2 {
            return Err(Error::InvalidArgument(format!("agent {} has fewer than 2 samples", a.id)));
        }
        let d0 = a.rows[1].0 - a.rows[0].0;
        for w in a.rows.windows(2) {
            let d = w[1].0 - w[0].0;
            if (d - d0).abs() > 1e-6 * d0 {
                return Err(Error::Schema(format!(
                    "agent {}: non-uniform timestamps (step {d} at t={} vs {d0})",
                    a.id, w[0].0
                )));
            }
        }
        match dt {
            None => dt = Some(d0),
            Some(prev) if (prev - d0).abs() > 1e-6 * prev => {
                return Err(Error::Schema(format!("agent {} sampled at {d0} s, others at {prev} s", a.id)));
            }
            _ => {}
        }
    }
    let dt = dt.expect("at least two agents");
    let start = agents.iter().map(|a| a.rows[0].0).fold(f64::NEG_INFINITY, f64::max);
    let end = agents.iter().map(|a| a.rows.last().unwrap().0).fold(f64::INFINITY, f64::min);
    let tol = 1e-6 * dt;
    if start > end + tol {
        return Err(Error::InvalidArgument(format!(
            "agents' time ranges do not overlap (latest start {start}, earliest end {end})"
        )));
    }
    let times: Vec<f64> = agents[0].rows.iter().map(|r| r.0).filter(|&t| t >= start - tol && t <= end + tol).collect();
    let mut values = Vec::with_capacity(agents.len());
    for a in &agents {
        let first = a
            .rows
            .iter()
            .position(|r| (r.0 - times[0]).abs() <= tol)
            .ok_or_else(|| Error::Schema(format!("agent {} is not sampled on the common grid", a.id)))?;
        let slice = &a.rows[first..];
        if slice.len() < times.len() || slice.iter().zip(&times).any(|(r, &t)| (r.0 - t).abs() > tol) {
            return Err(Error::Schema(format!("agent {} is not sampled on the common grid", a.id)));
        }
        values.push(slice[..times.len()].iter().map(|r| r.1.clone()).collect());
    }
    Ok((agents.into_iter().map(|a| a.id).collect(), times, dt, values))
}

/// Read `t, agent_id, x, y, theta` (extra columns ignored) and align agents
/// on the intersection of their time ranges.
pub fn read_trajectory_csv<R: Read>(r: R) -> Result<RawTrajectory> {
    let (ids, times, dt, values) = read_rows(r, &["x", "y", "theta"])?;
    if times.len() < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "common time grid has {} samples, need at least {MIN_SAMPLES}",
            times.len()
        )));
    }
    let samples = values
        .into_iter()
        .map(|rows| rows.into_iter().map(|v| [v[0], v[1], v[2]]).collect())
        .collect();
    Ok(RawTrajectory { ids, times, dt, samples })
}

pub fn ingest_trajectory_csv(path: &Path) -> Result<RawTrajectory> {
    let f = std::fs::File::open(path)?;
    read_trajectory_csv(std::io::BufReader::new(f))
}

/// Read a simulator trajectory log that already carries speeds and inputs
/// (`v`, `a`, `omega` columns) for exact replay.
pub fn read_log_csv<R: Read>(r: R) -> Result<KinematicSeries> {
    let (ids, times, dt, values) = read_rows(r, &["x", "y", "v", "theta", "a", "omega"])?;
    let steps = times.len();
    let mut states = vec![Vec::with_capacity(ids.len()); steps];
    let mut inputs = vec![Vec::with_capacity(ids.len()); steps];
    for rows in &values {
        for (k, v) in rows.iter().enumerate() {
            states[k].push(AgentState::new(v[0], v[1], v[2], v[3]));
            inputs[k].push(ControlInput::new(v[4], v[5]));
        }
    }
    Ok(KinematicSeries { ids, times, dt, states, inputs })
}

fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = x.len();
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            x[i - h..=i + h].iter().sum::<f64>() / (2 * h + 1) as f64
        })
        .collect()
}

/// Second-order derivative stencil: central inside, one-sided at the ends.
fn derivative(x: &[f64], dt: f64) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            if i == 0 {
                (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * dt)
            } else if i == n - 1 {
                (3.0 * x[n - 1] - 4.0 * x[n - 2] + x[n - 3]) / (2.0 * dt)
            } else {
                (x[i + 1] - x[i - 1]) / (2.0 * dt)
            }
        })
        .collect()
}

fn unwrap(theta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(theta.len());
    let mut acc = theta[0];
    out.push(acc);
    for w in theta.windows(2) {
        acc += wrap_angle(w[1] - w[0]);
        out.push(acc);
    }
    out
}

/// Smooth positions and unwrapped yaw with a centered moving average
/// (window shrinks symmetrically at the ends), then difference. Speed is the
/// velocity projected on the heading; acceleration and yaw rate come from a
/// second differencing stage.
pub fn differentiate(raw: &RawTrajectory, window: usize) -> Result<KinematicSeries> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("smoothing window must be odd and >= 1, got {window}")));
    }
    let n = raw.times.len();
    if n < window.max(3) {
        return Err(Error::InvalidArgument(format!("series of {n} samples is shorter than the window {window}")));
    }
    let dt = raw.dt;
    let mut states = vec![Vec::with_capacity(raw.ids.len()); n];
    let mut inputs = vec![Vec::with_capacity(raw.ids.len()); n];
    for series in &raw.samples {
        let col = |k: usize| series.iter().map(|s| s[k]).collect::<Vec<_>>();
        let x = moving_average(&col(0), window);
        let y = moving_average(&col(1), window);
        let th = moving_average(&unwrap(&col(2)), window);
        let (dx, dy) = (derivative(&x, dt), derivative(&y, dt));
        let v: Vec<f64> = (0..n).map(|k| dx[k] * th[k].cos() + dy[k] * th[k].sin()).collect();
        let a = derivative(&v, dt);
        let w = derivative(&th, dt);
        for k in 0..n {
            states[k].push(AgentState::new(x[k], y[k], v[k], th[k]));
            inputs[k].push(ControlInput::new(a[k], w[k]));
        }
    }
    Ok(KinematicSeries {
        ids: raw.ids.clone(),
        times: raw.times.clone(),
        dt,
        states,
        inputs,
    })
}

/// Ordered-pair evaluation at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub step: usize,
    pub t: f64,
    pub agent: usize,
    pub other: usize,
    pub gamma: f64,
    pub c: f64,
    pub margin: f64,
    pub worst_case_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSummary {
    pub agent: usize,
    pub id: String,
    /// Integral over time of the violated part of the agent's smallest
    /// margin, in m s^-1 * s.
    pub integrated_violation: f64,
    pub first_violation: Option<f64>,
    pub peak_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForensicReport {
    pub ids: Vec<String>,
    pub dt: f64,
    pub records: Vec<PairRecord>,
    pub summaries: Vec<AgentSummary>,
}

impl ForensicReport {
    /// Per-step smallest margin of `agent` over all other agents.
    pub fn min_margins(&self, agent: usize) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        let mut last_step = usize::MAX;
        for r in self.records.iter().filter(|r| r.agent == agent) {
            if r.step != last_step {
                out.push((r.t, r.margin));
                last_step = r.step;
            } else {
                let e = out.last_mut().unwrap();
                e.1 = e.1.min(r.margin);
            }
        }
        out
    }
}

fn summarize(records: &[PairRecord], ids: &[String], dt: f64) -> Vec<AgentSummary> {
    let mut per: Vec<AgentSummary> = ids
        .iter()
        .enumerate()
        .map(|(k, id)| AgentSummary {
            agent: k,
            id: id.clone(),
            integrated_violation: 0.0,
            first_violation: None,
            peak_violation: 0.0,
        })
        .collect();
    let mut by_step: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for r in records {
        let e = by_step.entry((r.agent, r.step)).or_insert((r.t, f64::INFINITY));
        e.1 = e.1.min(r.margin);
    }
    for (&(agent, _), &(t, m)) in &by_step {
        if m < -VIOLATION_TOL {
            let s = &mut per[agent];
            s.integrated_violation += -m * dt;
            s.peak_violation = s.peak_violation.max(-m);
            if s.first_violation.is_none() {
                s.first_violation = Some(t);
            }
        }
    }
    per
}

/// Evaluate allocation, constraint value, margin and worst-case margin for
/// every ordered pair at every step.
pub fn analyze(series: &KinematicSeries, model: &dyn Responsibility, cfg: &BarrierConfig, bounds: &InputBounds) -> Result<ForensicReport> {
    let n = series.agents();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 agents, found {n}")));
    }
    let mut records = Vec::with_capacity(series.times.len() * n * (n - 1));
    for (step, (&t, states)) in series.times.iter().zip(&series.states).enumerate() {
        let inputs = &series.inputs[step];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let eval = barrier_eval(states[i], states[j], cfg);
                let terms = racbf_margin(Side::I, &eval, inputs[i], model, states[i], states[j], cfg);
                records.push(PairRecord {
                    step,
                    t,
                    agent: i,
                    other: j,
                    gamma: terms.gamma,
                    c: terms.c,
                    margin: terms.margin,
                    worst_case_margin: worst_case_margin(&eval, inputs[i], bounds, cfg),
                });
            }
        }
    }
    let summaries = summarize(&records, &series.ids, series.dt);
    Ok(ForensicReport {
        ids: series.ids.clone(),
        dt: series.dt,
        records,
        summaries,
    })
}

pub const ATTRIBUTION_LABEL: &str =
    "interpretive aid only: agents ranked by integrated constraint violation; not a determination of fault";

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub label: &'static str,
    /// Violating agents, most culpable first.
    pub ranking: Vec<AgentSummary>,
}

/// Rank violating agents by integrated violation, then peak violation, then
/// agent id.
pub fn attribute(report: &ForensicReport) -> Attribution {
    let mut ranking: Vec<AgentSummary> = report
        .summaries
        .iter()
        .filter(|s| s.integrated_violation > 0.0)
        .cloned()
        .collect();
    ranking.sort_by(|a, b| {
        b.integrated_violation
            .total_cmp(&a.integrated_violation)
            .then(b.peak_violation.total_cmp(&a.peak_violation))
            .then(a.id.cmp(&b.id))
    });
    Attribution {
        label: ATTRIBUTION_LABEL,
        ranking,
    }
}

pub const SERIES_HEADER: [&str; 9] = [
    "schema_version", "step", "t", "agent_id", "other_id", "gamma", "c", "margin", "worst_case_margin",
];
pub const SUMMARY_HEADER: [&str; 7] = [
    "schema_version", "rank", "agent_id", "integrated_violation", "first_violation_time", "peak_violation", "note",
];

pub fn write_series_csv<W: Write>(report: &ForensicReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SERIES_HEADER)?;
    let v = REPORT_SCHEMA_VERSION.to_string();
    for r in &report.records {
        out.write_record([
            v.clone(),
            r.step.to_string(),
            fmt_f(r.t),
            report.ids[r.agent].clone(),
            report.ids[r.other].clone(),
            fmt_f(r.gamma),
            fmt_f(r.c),
            fmt_f(r.margin),
            fmt_f(r.worst_case_margin),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// One row per agent; ranked agents first with their rank, the rest with an
/// empty rank.
pub fn write_summary_csv<W: Write>(report: &ForensicReport, attribution: &Attribution, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER)?;
    let v = REPORT_SCHEMA_VERSION.to_string();
    let row = |rank: String, s: &AgentSummary| {
        vec![
            v.clone(),
            rank,
            s.id.clone(),
            fmt_f(s.integrated_violation),
            s.first_violation.map(fmt_f).unwrap_or_default(),
            fmt_f(s.peak_violation),
            attribution.label.to_string(),
        ]
    };
    for (k, s) in attribution.ranking.iter().enumerate() {
        out.write_record(row((k + 1).to_string(), s))?;
    }
    for s in &report.summaries {
        if !attribution.ranking.iter().any(|r| r.agent == s.agent) {
            out.write_record(row(String::new(), s))?;
        }
    }
    out.flush()?;
    Ok(())
}
