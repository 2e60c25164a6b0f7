//! Scenario construction, scripted nominal/expert controllers, the closed
//! loop, and suite-level metrics.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::barrier::{barrier_value, global_barrier, BarrierConfig};
use crate::dynamics::{step_rk4, wrap_angle, AgentState, ControlInput, InputBounds};
use crate::error::{Error, Result};
use crate::filter::{pair_constraints, safety_filter_weighted, FilterMode, DEFAULT_SLACK_WEIGHT};
use crate::responsibility::Responsibility;

/// Initial-state admission margin on the global barrier, meters.
pub const ADMISSION_MARGIN: f64 = 0.05;
/// Margins above `-MARGIN_TOL` count as satisfied (QP round-off).
pub const MARGIN_TOL: f64 = 1e-9;
const REJECTION_BUDGET: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    CarFollow,
    Intersection,
    Merge,
    Random,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::CarFollow,
        ScenarioKind::Intersection,
        ScenarioKind::Merge,
        ScenarioKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::CarFollow => "car_follow",
            ScenarioKind::Intersection => "intersection",
            ScenarioKind::Merge => "merge",
            ScenarioKind::Random => "random",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown scenario kind '{s}', expected one of: car_follow, intersection, merge, random"
                ))
            })
    }
}

/// Polyline centerline with a drivable corridor of `width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub centerline: Vec<[f64; 2]>,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneProjection {
    /// Arc length of the closest point.
    pub s: f64,
    /// Unsigned distance to the centerline.
    pub distance: f64,
}

impl Lane {
    pub fn new(centerline: Vec<[f64; 2]>, width: f64) -> Self {
        assert!(centerline.len() >= 2, "lane needs at least two points");
        Self { centerline, width }
    }

    fn segments(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        self.centerline.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn length(&self) -> f64 {
        self.segments().map(|(a, b)| (b[0] - a[0]).hypot(b[1] - a[1])).sum()
    }

    pub fn project(&self, p: [f64; 2]) -> LaneProjection {
        let mut best = LaneProjection {
            s: 0.0,
            distance: f64::INFINITY,
        };
        let mut s0 = 0.0;
        for (a, b) in self.segments() {
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            let t = (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
            let q = [a[0] + t * d[0], a[1] + t * d[1]];
            let dist = (p[0] - q[0]).hypot(p[1] - q[1]);
            if dist < best.distance {
                best = LaneProjection {
                    s: s0 + t * len2.sqrt(),
                    distance: dist,
                };
            }
            s0 += len2.sqrt();
        }
        best
    }

    /// Point at arc length `s`, extrapolating past either end.
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let mut s0 = 0.0;
        let n = self.centerline.len() - 1;
        for (k, (a, b)) in self.segments().enumerate() {
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            if s <= s0 + len || k == n - 1 {
                let t = if k == 0 { (s - s0) / len } else { ((s - s0) / len).max(0.0) };
                return [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            }
            s0 += len;
        }
        unreachable!()
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let a = self.point_at(s);
        let b = self.point_at(s + 1e-3);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.project(p).distance <= 0.5 * self.width
    }
}

/// Piecewise-linear target speed over time, held constant past the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedProfile {
    pub knots: Vec<(f64, f64)>,
}

impl SpeedProfile {
    pub fn constant(v: f64) -> Self {
        Self {
            knots: vec![(0.0, v)],
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        let k = &self.knots;
        if t <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            if t <= w[1].0 {
                let r = (t - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + r * (w[1].1 - w[0].1);
            }
        }
        k[k.len() - 1].1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentPlan {
    pub lane: usize,
    pub profile: SpeedProfile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub kind: ScenarioKind,
    pub initial: Vec<AgentState>,
    pub lanes: Vec<Lane>,
    pub plans: Vec<AgentPlan>,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    pub ego: usize,
}

impl Scenario {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn on_road(&self, p: [f64; 2]) -> bool {
        self.lanes.iter().any(|l| l.contains(p))
    }
}

/// Sampling ranges for [`build_scenario`]. Speeds in m/s, distances in m,
/// rates in m/s^2, times in s.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioParams {
    pub horizon: f64,
    pub dt: f64,
    pub lane_width: f64,
    /// Initial speed range for every agent.
    pub speed: (f64, f64),
    /// Car-following center gap.
    pub gap: (f64, f64),
    /// Target speed increase the follower (ego) wants over its initial speed.
    pub speedup: (f64, f64),
    /// Leader (or crossing agent) braking event: rate, start time, duration.
    pub brake_rate: (f64, f64),
    pub brake_start: (f64, f64),
    pub brake_duration: (f64, f64),
    /// Difference in arrival times at the conflict point for crossing and
    /// merging scenes.
    pub arrival_offset: (f64, f64),
    /// Agent count for the random kind (2..=6).
    pub agents: usize,
    /// Half-width of the square the random kind samples positions in.
    pub arena: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            horizon: 10.0,
            dt: 0.1,
            lane_width: 3.5,
            speed: (4.0, 8.0),
            gap: (10.0, 20.0),
            speedup: (1.0, 3.0),
            brake_rate: (0.5, 2.0),
            brake_start: (0.0, 4.0),
            brake_duration: (1.0, 3.0),
            arrival_offset: (-0.5, 0.5),
            agents: 2,
            arena: 20.0,
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let ranges = [
            ("speed", self.speed),
            ("gap", self.gap),
            ("speedup", self.speedup),
            ("brake_rate", self.brake_rate),
            ("brake_start", self.brake_start),
            ("brake_duration", self.brake_duration),
            ("arrival_offset", self.arrival_offset),
        ];
        for (name, r) in ranges {
            if !range_ok(r) {
                return Err(Error::InvalidArgument(format!("range {name} = {r:?} is not ordered")));
            }
        }
        if self.speed.0 < 0.0 || self.brake_rate.0 < 0.0 || self.brake_duration.0 < 0.0 {
            return Err(Error::InvalidArgument("speeds, brake rates and durations must be nonnegative".into()));
        }
        if !(self.dt > 0.0 && self.horizon >= self.dt) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < dt <= horizon, got dt = {}, horizon = {}",
                self.dt, self.horizon
            )));
        }
        if !(self.lane_width > 0.0) || !(self.arena > 0.0) {
            return Err(Error::InvalidArgument("lane width and arena must be positive".into()));
        }
        if !(2..=6).contains(&self.agents) {
            return Err(Error::InvalidArgument(format!("agents must be in 2..=6, got {}", self.agents)));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn braking_profile(rng: &mut ChaCha8Rng, v0: f64, p: &ScenarioParams) -> SpeedProfile {
    let rate = draw(rng, p.brake_rate);
    let start = draw(rng, p.brake_start);
    let dur = draw(rng, p.brake_duration);
    let v_end = (v0 - rate * dur).max(0.5_f64.min(v0));
    SpeedProfile {
        knots: vec![(0.0, v0), (start, v0), (start + dur.max(1e-3), v_end)],
    }
}

fn sample_candidate(kind: ScenarioKind, p: &ScenarioParams, rng: &mut ChaCha8Rng) -> (Vec<AgentState>, Vec<Lane>, Vec<AgentPlan>) {
    let w = p.lane_width;
    match kind {
        ScenarioKind::CarFollow => {
            let lane = Lane::new(vec![[-50.0, 0.0], [400.0, 0.0]], w);
            let v_f = draw(rng, p.speed);
            let v_l = draw(rng, p.speed);
            let gap = draw(rng, p.gap);
            let follower = AgentState::new(0.0, 0.0, v_f, 0.0);
            let leader = AgentState::new(gap, 0.0, v_l, 0.0);
            let plans = vec![
                AgentPlan {
                    lane: 0,
                    profile: SpeedProfile::constant(v_f + draw(rng, p.speedup)),
                },
                AgentPlan {
                    lane: 0,
                    profile: braking_profile(rng, v_l, p),
                },
            ];
            (vec![follower, leader], vec![lane], plans)
        }
        ScenarioKind::Intersection => {
            let east = Lane::new(vec![[-200.0, 0.0], [200.0, 0.0]], w);
            let north_bound = rng.random_bool(0.5);
            let cross = if north_bound {
                Lane::new(vec![[0.0, -200.0], [0.0, 200.0]], w)
            } else {
                Lane::new(vec![[0.0, 200.0], [0.0, -200.0]], w)
            };
            let v_e = draw(rng, p.speed);
            let v_c = draw(rng, p.speed);
            // Ego reaches the crossing after ~2-4 s; the other agent arrives
            // with a small offset.
            let t_e = rng.random_range(2.0..4.0);
            let t_c = (t_e + draw(rng, p.arrival_offset)).max(0.8);
            let ego = AgentState::new(-v_e * t_e, 0.0, v_e, 0.0);
            let d_c = v_c * t_c;
            let other = if north_bound {
                AgentState::new(0.0, -d_c, v_c, std::f64::consts::FRAC_PI_2)
            } else {
                AgentState::new(0.0, d_c, v_c, -std::f64::consts::FRAC_PI_2)
            };
            let plans = vec![
                AgentPlan {
                    lane: 0,
                    profile: SpeedProfile::constant(v_e + draw(rng, p.speedup)),
                },
                AgentPlan {
                    lane: 1,
                    profile: braking_profile(rng, v_c, p),
                },
            ];
            (vec![ego, other], vec![east, cross], plans)
        }
        ScenarioKind::Merge => {
            let main = Lane::new(vec![[-200.0, 0.0], [400.0, 0.0]], w);
            let ramp_angle: f64 = rng.random_range(0.15..0.3);
            let ramp_len = 80.0;
            let start = [-ramp_len * ramp_angle.cos(), -ramp_len * ramp_angle.sin()];
            let ramp = Lane::new(vec![start, [0.0, 0.0], [400.0, 0.0]], w);
            let v_e = draw(rng, p.speed);
            let v_m = draw(rng, p.speed);
            let t_e = rng.random_range(2.0..4.0);
            let t_m = (t_e + draw(rng, p.arrival_offset)).max(0.8);
            let d_e = v_e * t_e;
            let ego = AgentState::new(-d_e * ramp_angle.cos(), -d_e * ramp_angle.sin(), v_e, ramp_angle);
            let other = AgentState::new(-v_m * t_m, 0.0, v_m, 0.0);
            let plans = vec![
                AgentPlan {
                    lane: 1,
                    profile: SpeedProfile::constant(v_e + draw(rng, p.speedup)),
                },
                AgentPlan {
                    lane: 0,
                    profile: braking_profile(rng, v_m, p),
                },
            ];
            (vec![ego, other], vec![main, ramp], plans)
        }
        ScenarioKind::Random => {
            let mut lanes = Vec::new();
            let mut states = Vec::new();
            let mut plans = Vec::new();
            for k in 0..p.agents {
                let x = rng.random_range(-p.arena..p.arena);
                let y = rng.random_range(-p.arena..p.arena);
                let th = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let v = draw(rng, p.speed);
                let (s, c) = th.sin_cos();
                lanes.push(Lane::new(vec![[x - 200.0 * c, y - 200.0 * s], [x + 400.0 * c, y + 400.0 * s]], w));
                states.push(AgentState::new(x, y, v, th));
                plans.push(AgentPlan {
                    lane: k,
                    profile: if k == 0 {
                        SpeedProfile::constant(v + draw(rng, p.speedup))
                    } else {
                        braking_profile(rng, v, p)
                    },
                });
            }
            (states, lanes, plans)
        }
    }
}

/// Deterministic scenario for `(kind, params, seed)`. Candidates are drawn
/// until the initial global barrier clears [`ADMISSION_MARGIN`] and every
/// agent starts inside its lane.
pub fn build_scenario(kind: ScenarioKind, params: &ScenarioParams, seed: u64, cfg: &BarrierConfig) -> Result<Scenario> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((kind as u64 + 1) << 56));
    for _ in 0..REJECTION_BUDGET {
        let (initial, lanes, plans) = sample_candidate(kind, params, &mut rng);
        let on_road = initial
            .iter()
            .zip(&plans)
            .all(|(s, p)| lanes[p.lane].contains(s.position()));
        if !on_road {
            continue;
        }
        if global_barrier(&initial, cfg)? < ADMISSION_MARGIN {
            continue;
        }
        return Ok(Scenario {
            id: format!("{}-{seed:06}", kind.name()),
            kind,
            initial,
            lanes,
            plans,
            horizon: params.horizon,
            dt: params.dt,
            seed,
            ego: 0,
        });
    }
    Err(Error::RejectionBudget {
        kind: kind.name().into(),
        attempts: REJECTION_BUDGET,
    })
}

const SPEED_GAIN: f64 = 1.0;
const HEADING_GAIN: f64 = 1.5;
const LATERAL_LOOKAHEAD: f64 = 5.0;

/// Lane-keeping plus speed-tracking input, clamped to the input box.
pub fn nominal_input(state: AgentState, plan: &AgentPlan, lanes: &[Lane], t: f64, bounds: &InputBounds) -> ControlInput {
    let lane = &lanes[plan.lane];
    let proj = lane.project(state.position());
    let look = lane.point_at(proj.s + LATERAL_LOOKAHEAD + 0.5 * state.v.abs());
    let desired = (look[1] - state.y).atan2(look[0] - state.x);
    let omega = HEADING_GAIN * wrap_angle(desired - state.theta);
    let a = SPEED_GAIN * (plan.profile.at(t) - state.v);
    bounds.clamp(ControlInput::new(a, omega))
}

/// Nominal input filtered with the ground-truth allocation.
pub fn expert_controller(
    scene: &[AgentState],
    agent: usize,
    gamma_star: &dyn Responsibility,
    plan: &AgentPlan,
    lanes: &[Lane],
    t: f64,
    cfg: &BarrierConfig,
    bounds: &InputBounds,
) -> Result<ControlInput> {
    let u_nom = nominal_input(scene[agent], plan, lanes, t, bounds);
    let r = safety_filter_weighted(scene, agent, u_nom, FilterMode::Learned(gamma_star), cfg, bounds, DEFAULT_SLACK_WEIGHT)?;
    Ok(r.input)
}

#[derive(Clone, Copy, Debug)]
pub enum Controller<'a> {
    /// Nominal tracking input, unfiltered.
    Nominal,
    /// Nominal (plus the ego bias) passed through a safety filter.
    Filtered(FilterMode<'a>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub barrier: BarrierConfig,
    pub bounds: InputBounds,
    /// Extra desired acceleration for the ego agent, m/s^2.
    pub ego_accel_bias: f64,
    pub slack_weight: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            barrier: BarrierConfig::default(),
            bounds: InputBounds::default(),
            ego_accel_bias: 1.0,
            slack_weight: DEFAULT_SLACK_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub states: Vec<AgentState>,
    pub desired: Vec<ControlInput>,
    pub inputs: Vec<ControlInput>,
    /// Barrier value for every unordered pair `(i, j)`, `i < j`.
    pub pair_barriers: Vec<(usize, usize, f64)>,
    pub global_barrier: f64,
    /// Per agent: allocation and margin against the agent with the
    /// smallest margin, under the rollout's evaluation mode.
    pub gamma: Vec<f64>,
    pub margin: Vec<f64>,
    pub binding_other: Vec<usize>,
    /// Per agent: largest filter slack (zero for unfiltered agents).
    pub slack: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub scenario_id: String,
    pub dt: f64,
    pub ego: usize,
    pub records: Vec<StepRecord>,
}

impl TrajectoryLog {
    pub fn agents(&self) -> usize {
        self.records.first().map_or(0, |r| r.states.len())
    }

    pub fn min_global_barrier(&self) -> f64 {
        self.records.iter().map(|r| r.global_barrier).fold(f64::INFINITY, f64::min)
    }

    /// Path length of an agent's positions.
    pub fn distance(&self, agent: usize) -> f64 {
        self.records
            .windows(2)
            .map(|w| {
                let a = w[0].states[agent];
                let b = w[1].states[agent];
                (b.x - a.x).hypot(b.y - a.y)
            })
            .sum()
    }
}

/// A rollout that stopped early; carries everything logged before the
/// failure.
#[derive(Debug)]
pub struct RolloutFailure {
    pub error: Error,
    pub log: TrajectoryLog,
}

impl fmt::Display for RolloutFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rollout of {} aborted after {} records: {}", self.log.scenario_id, self.log.records.len(), self.error)
    }
}

impl std::error::Error for RolloutFailure {}

impl From<RolloutFailure> for Error {
    fn from(f: RolloutFailure) -> Self {
        Error::Generation(f.to_string())
    }
}

/// Evaluate per-agent margins under `mode` at the applied inputs.
fn evaluate_margins(
    states: &[AgentState],
    inputs: &[ControlInput],
    mode: FilterMode<'_>,
    cfg: &RolloutConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)> {
    let n = states.len();
    let mut gamma = vec![0.0; n];
    let mut margin = vec![f64::INFINITY; n];
    let mut binding = vec![0; n];
    for i in 0..n {
        for c in pair_constraints(states, i, mode, &cfg.barrier, &cfg.bounds)? {
            let m = c.margin(inputs[i]);
            if m < margin[i] {
                margin[i] = m;
                gamma[i] = c.gamma;
                binding[i] = c.other;
            }
        }
    }
    Ok((gamma, margin, binding))
}

/// Run one scenario in closed loop. Each agent's controller is given by
/// `controllers`; all margins are logged under `eval_mode`. Inputs are held
/// constant over each step and all agents are integrated with RK4.
pub fn run_closed_loop(
    scenario: &Scenario,
    controllers: &[Controller<'_>],
    eval_mode: FilterMode<'_>,
    cfg: &RolloutConfig,
) -> std::result::Result<TrajectoryLog, RolloutFailure> {
    let n = scenario.initial.len();
    let mut log = TrajectoryLog {
        scenario_id: scenario.id.clone(),
        dt: scenario.dt,
        ego: scenario.ego,
        records: Vec::with_capacity(scenario.steps() + 1),
    };
    if controllers.len() != n {
        return Err(RolloutFailure {
            error: Error::InvalidArgument(format!("{} controllers for {n} agents", controllers.len())),
            log,
        });
    }
    let mut states = scenario.initial.clone();
    for step in 0..=scenario.steps() {
        let t = step as f64 * scenario.dt;
        match rollout_step(scenario, controllers, eval_mode, cfg, &states, t) {
            Ok(rec) => {
                let inputs = rec.inputs.clone();
                log.records.push(rec);
                if step == scenario.steps() {
                    break;
                }
                for (s, u) in states.iter_mut().zip(&inputs) {
                    match step_rk4(*s, *u, scenario.dt) {
                        Ok(next) => *s = next,
                        Err(error) => return Err(RolloutFailure { error, log }),
                    }
                }
            }
            Err(error) => return Err(RolloutFailure { error, log }),
        }
    }
    Ok(log)
}

fn rollout_step(
    scenario: &Scenario,
    controllers: &[Controller<'_>],
    eval_mode: FilterMode<'_>,
    cfg: &RolloutConfig,
    states: &[AgentState],
    t: f64,
) -> Result<StepRecord> {
    let n = states.len();
    let mut desired = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n);
    let mut slack = Vec::with_capacity(n);
    for (i, ctrl) in controllers.iter().enumerate() {
        let mut u = nominal_input(states[i], &scenario.plans[i], &scenario.lanes, t, &cfg.bounds);
        if i == scenario.ego {
            u.a += cfg.ego_accel_bias;
        }
        desired.push(u);
        match ctrl {
            Controller::Nominal => {
                inputs.push(cfg.bounds.clamp(u));
                slack.push(0.0);
            }
            Controller::Filtered(mode) => {
                let r = safety_filter_weighted(states, i, u, *mode, &cfg.barrier, &cfg.bounds, cfg.slack_weight)?;
                inputs.push(r.input);
                slack.push(r.slack.iter().copied().fold(0.0, f64::max));
            }
        }
    }
    let mut pair_barriers = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pair_barriers.push((i, j, barrier_value(states[i], states[j], &cfg.barrier)));
        }
    }
    let global = pair_barriers.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
    let (gamma, margin, binding_other) = evaluate_margins(states, &inputs, eval_mode, cfg)?;
    Ok(StepRecord {
        t,
        states: states.to_vec(),
        desired,
        inputs,
        pair_barriers,
        global_barrier: global,
        gamma,
        margin,
        binding_other,
        slack,
    })
}

/// Controller assignment for suite experiments: the ego runs `mode`, every
/// other agent is an expert filtered with the ground-truth allocation.
pub fn suite_controllers<'a>(scenario: &Scenario, mode: FilterMode<'a>, others: &'a dyn Responsibility) -> Vec<Controller<'a>> {
    (0..scenario.initial.len())
        .map(|i| {
            if i == scenario.ego {
                Controller::Filtered(mode)
            } else {
                Controller::Filtered(FilterMode::Learned(others))
            }
        })
        .collect()
}

/// Roll out every scenario in parallel; results keep suite order.
pub fn run_suite(
    scenarios: &[Scenario],
    mode: FilterMode<'_>,
    others: &dyn Responsibility,
    cfg: &RolloutConfig,
) -> Result<Vec<TrajectoryLog>> {
    scenarios
        .par_iter()
        .map(|sc| {
            let ctrls = suite_controllers(sc, mode, others);
            run_closed_loop(sc, &ctrls, mode, cfg).map_err(Error::from)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Fraction of (step, agent) records with a negative constraint margin.
    pub constraint_violation_rate: f64,
    /// Fraction of runs whose global barrier goes negative.
    pub safety_violation_rate: f64,
    /// Fraction of ego records outside every lane corridor.
    pub offroad_time_fraction: f64,
    /// Mean ego path length per run, meters.
    pub distance_covered: f64,
    pub runs: usize,
}

/// Suite metrics. `scenarios[k]` supplies the road geometry for `logs[k]`.
pub fn compute_metrics(logs: &[TrajectoryLog], scenarios: &[Scenario]) -> Result<Metrics> {
    if logs.is_empty() {
        return Err(Error::InvalidArgument("no logs to score".into()));
    }
    if logs.len() != scenarios.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logs but {} scenarios",
            logs.len(),
            scenarios.len()
        )));
    }
    let mut margin_total = 0usize;
    let mut margin_bad = 0usize;
    let mut unsafe_runs = 0usize;
    let mut ego_records = 0usize;
    let mut offroad = 0usize;
    let mut distance = 0.0;
    for (log, sc) in logs.iter().zip(scenarios) {
        for r in &log.records {
            margin_total += r.margin.len();
            margin_bad += r.margin.iter().filter(|&&m| m < -MARGIN_TOL).count();
            ego_records += 1;
            if !sc.on_road(r.states[log.ego].position()) {
                offroad += 1;
            }
        }
        if log.records.iter().any(|r| r.global_barrier < 0.0) {
            unsafe_runs += 1;
        }
        distance += log.distance(log.ego);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Metrics {
        constraint_violation_rate: ratio(margin_bad, margin_total),
        safety_violation_rate: ratio(unsafe_runs, logs.len()),
        offroad_time_fraction: ratio(offroad, ego_records),
        distance_covered: distance / logs.len() as f64,
        runs: logs.len(),
    })
}

/// Build `count` scenarios of one kind with consecutive seeds.
pub fn build_suite(kind: ScenarioKind, count: usize, params: &ScenarioParams, seed: u64, cfg: &BarrierConfig) -> Result<Vec<Scenario>> {
    (0..count as u64).map(|k| build_scenario(kind, params, seed.wrapping_add(k), cfg)).collect()
}

/// Trajectory CSV header, one row per (step, agent).
pub const TRAJECTORY_HEADER: [&str; 17] = [
    "scenario_id", "step", "t", "agent_id", "x", "y", "v", "theta", "a_des", "omega_des", "a", "omega",
    "gamma", "margin", "binding_other", "slack", "global_barrier",
];

pub fn write_trajectory_csv<W: std::io::Write>(logs: &[TrajectoryLog], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRAJECTORY_HEADER)?;
    for log in logs {
        for (step, r) in log.records.iter().enumerate() {
            for i in 0..r.states.len() {
                let s = r.states[i];
                out.write_record([
                    log.scenario_id.clone(),
                    step.to_string(),
                    fmt_f(r.t),
                    i.to_string(),
                    fmt_f(s.x),
                    fmt_f(s.y),
                    fmt_f(s.v),
                    fmt_f(s.theta),
                    fmt_f(r.desired[i].a),
                    fmt_f(r.desired[i].omega),
                    fmt_f(r.inputs[i].a),
                    fmt_f(r.inputs[i].omega),
                    fmt_f(r.gamma[i]),
                    fmt_f(r.margin[i]),
                    r.binding_other[i].to_string(),
                    fmt_f(r.slack[i]),
                    fmt_f(r.global_barrier),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Shortest representation that round-trips exactly.
pub fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

pub const METRICS_HEADER: [&str; 7] = [
    "suite",
    "mode",
    "validation_constraint_violation",
    "closed_loop_safety_violation",
    "time_spent_off_road",
    "distance_covered",
    "closed_loop_constraint_violation",
];
