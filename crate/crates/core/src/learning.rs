//! Demonstration datasets, the hinge-relaxed inverse-constraint loss with its
//! entropy surrogate, the training loop, and the feasible-input diagnostic.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::barrier::{barrier_eval, BarrierConfig};
use crate::dynamics::{wrap_angle, AgentState, ControlInput, InputBounds};
use crate::error::{Error, Result};
use crate::filter::{pair_constraints, FilterMode};
use crate::mlp::Mlp;
use crate::responsibility::{c_term, features, GammaModel, Responsibility, Side, DEFAULT_SLOPES, FEATURE_DIM, HIDDEN_WIDTH};
use crate::sim::{build_scenario, fmt_f, run_closed_loop, Controller, RolloutConfig, ScenarioKind, ScenarioParams, MARGIN_TOL};

/// Discretized input box, row-major in `(a, omega)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrid {
    pub delta: [f64; 2],
    points: Vec<ControlInput>,
}

impl InputGrid {
    pub fn new(bounds: &InputBounds, delta_a: f64, delta_omega: f64) -> Result<Self> {
        bounds.validate()?;
        if !(delta_a > 0.0 && delta_omega > 0.0 && delta_a.is_finite() && delta_omega.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid spacing must be positive, got ({delta_a}, {delta_omega})"
            )));
        }
        let axis = |max: f64, d: f64| -> Vec<f64> {
            let k = (max / d + 1e-9).floor() as i64;
            (-k..=k).map(|i| (i as f64 * d).clamp(-max, max)).collect()
        };
        let a = axis(bounds.a_max, delta_a);
        let w = axis(bounds.omega_max, delta_omega);
        let points = a
            .iter()
            .flat_map(|&a| w.iter().map(move |&w| ControlInput::new(a, w)))
            .collect();
        Ok(Self {
            delta: [delta_a, delta_omega],
            points,
        })
    }

    pub fn default_for(bounds: &InputBounds) -> Result<Self> {
        Self::new(bounds, 0.25, 0.1)
    }

    pub fn points(&self) -> &[ControlInput] {
        &self.points
    }
}

/// One time step of a multi-agent demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub scenario_id: String,
    pub timestamp: f64,
    pub scene: Vec<AgentState>,
    pub joint_input: Vec<ControlInput>,
}

impl Demonstration {
    pub fn validate(&self, bounds: &InputBounds) -> Result<()> {
        if self.scene.len() != self.joint_input.len() {
            return Err(Error::InvalidArgument(format!(
                "{} states but {} inputs in {} at t={}",
                self.scene.len(),
                self.joint_input.len(),
                self.scenario_id,
                self.timestamp
            )));
        }
        if let Some(u) = self.joint_input.iter().find(|u| !bounds.contains(**u)) {
            return Err(Error::InvalidArgument(format!("input {u:?} outside the box in {}", self.scenario_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Weight on the batch mean of `gamma^2`.
    pub gamma_norm_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub theta_max: f64,
    pub hidden: Vec<usize>,
    pub slopes: Vec<f64>,
    /// Multiplier on the fan-in uniform initialization.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 10.0,
            lambda3: 0.01,
            gamma_norm_weight: 1.0,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 64,
            seed: 0,
            theta_max: 100f64.to_radians(),
            hidden: vec![HIDDEN_WIDTH, HIDDEN_WIDTH],
            slopes: DEFAULT_SLOPES.to_vec(),
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("gamma_norm_weight", self.gamma_norm_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.theta_max > 0.0 && self.theta_max <= std::f64::consts::PI) {
            return Err(Error::InvalidArgument(format!("theta_max must be in (0, pi], got {}", self.theta_max)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.slopes.len() != self.hidden.len() {
            return Err(Error::InvalidArgument(format!(
                "{} slopes for {} hidden layers",
                self.slopes.len(),
                self.hidden.len()
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Unordered agent pair at one demonstration step, with both constraint
/// values precomputed at the recorded inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub scenario_id: String,
    pub timestamp: f64,
    pub agents: (usize, usize),
    pub states: (AgentState, AgentState),
    pub inputs: (ControlInput, ControlInput),
    pub c: (f64, f64),
}

impl TrainingPair {
    pub fn heading_difference(&self) -> f64 {
        wrap_angle(self.states.1.theta - self.states.0.theta).abs()
    }
}

pub fn training_pairs(demos: &[Demonstration], cfg: &BarrierConfig) -> Vec<TrainingPair> {
    let mut out = Vec::new();
    for d in demos {
        let n = d.scene.len();
        for i in 0..n {
            for j in i + 1..n {
                let (si, sj) = (d.scene[i], d.scene[j]);
                let (ui, uj) = (d.joint_input[i], d.joint_input[j]);
                let eval = barrier_eval(si, sj, cfg);
                out.push(TrainingPair {
                    scenario_id: d.scenario_id.clone(),
                    timestamp: d.timestamp,
                    agents: (i, j),
                    states: (si, sj),
                    inputs: (ui, uj),
                    c: (c_term(Side::I, &eval, ui, 2, cfg), c_term(Side::J, &eval, uj, 2, cfg)),
                });
            }
        }
    }
    out
}

/// Keep pairs whose absolute heading difference is at most `theta_max`.
pub fn heading_filter(pairs: &[TrainingPair], theta_max: f64) -> Vec<TrainingPair> {
    pairs
        .iter()
        .filter(|p| p.heading_difference() <= theta_max + 1e-12)
        .cloned()
        .collect()
}

/// Split by scenario so no scenario contributes to both sides. Returns
/// `(train, held_out)`.
pub fn split_by_scenario(pairs: &[TrainingPair], held_out_fraction: f64, seed: u64) -> (Vec<TrainingPair>, Vec<TrainingPair>) {
    let mut ids: Vec<&str> = pairs
        .iter()
        .map(|p| p.scenario_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = ((ids.len() as f64) * held_out_fraction).round() as usize;
    let held: BTreeSet<&str> = ids[..n_held.min(ids.len())].iter().copied().collect();
    let (h, t): (Vec<_>, Vec<_>) = pairs.iter().cloned().partition(|p| held.contains(p.scenario_id.as_str()));
    (t, h)
}

/// A learned allocation sitting on a tight demonstration constraint flips
/// the hinge on and off at round-off level; the reported rate ignores
/// violations below this, in m/s.
pub const HINGE_REPORT_TOL: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub norm: f64,
    pub hinge: f64,
    pub sum_penalty: f64,
    pub regularizer: f64,
    /// Fraction of pairs with a constraint hinge violated by more than
    /// [`HINGE_REPORT_TOL`].
    pub hinge_rate: f64,
    pub mean_gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    /// Parameter gradient; empty for [`GammaModel::Zero`].
    pub grad: Vec<f64>,
    pub breakdown: LossBreakdown,
}

/// Batch in network-ready form: columns `0..m` are agent `i` of each pair,
/// columns `m..2m` agent `j`.
struct Batch {
    x: DMatrix<f64>,
    c: Vec<f64>,
    m: usize,
}

fn assemble(pairs: &[&TrainingPair]) -> Batch {
    let m = pairs.len();
    let mut x = DMatrix::zeros(FEATURE_DIM, 2 * m);
    let mut c = vec![0.0; 2 * m];
    for (k, p) in pairs.iter().enumerate() {
        let fi = features(p.states.0, p.states.1).network_input();
        let fj = features(p.states.1, p.states.0).network_input();
        for r in 0..FEATURE_DIM {
            x[(r, k)] = fi[r];
            x[(r, m + k)] = fj[r];
        }
        c[k] = p.c.0;
        c[m + k] = p.c.1;
    }
    Batch { x, c, m }
}

fn loss_terms(gamma: &[f64], batch: &Batch, cfg: &TrainConfig, lambda3: f64) -> (f64, Vec<f64>, LossBreakdown) {
    let m = batch.m;
    let n = 2 * m;
    let mut d = vec![0.0; n];
    let mut b = LossBreakdown::default();
    let mut sq = 0.0;
    let mut any_active = 0usize;
    for k in 0..m {
        let (gi, gj) = (gamma[k], gamma[m + k]);
        let mut active = false;
        for idx in [k, m + k] {
            let g = gamma[idx];
            sq += g * g;
            d[idx] += cfg.gamma_norm_weight * 2.0 * g / n as f64;
            let viol = g - batch.c[idx];
            if viol > 0.0 {
                b.hinge += cfg.lambda1 * viol;
                d[idx] += cfg.lambda1;
            }
            if viol > HINGE_REPORT_TOL {
                active = true;
            }
            b.regularizer -= lambda3 * g;
            d[idx] -= lambda3;
        }
        if active {
            any_active += 1;
        }
        let s = gi + gj;
        if s < 0.0 {
            b.sum_penalty += cfg.lambda2 * (-s);
            d[k] -= cfg.lambda2;
            d[m + k] -= cfg.lambda2;
        }
    }
    b.norm = cfg.gamma_norm_weight * sq / n as f64;
    b.hinge_rate = any_active as f64 / m as f64;
    b.mean_gamma = gamma.iter().sum::<f64>() / n as f64;
    (b.norm + b.hinge + b.sum_penalty + b.regularizer, d, b)
}

fn loss_on(batch: &Batch, model: &GammaModel, cfg: &TrainConfig, lambda3: f64) -> LossEval {
    match model {
        GammaModel::Zero => {
            let gamma = vec![0.0; 2 * batch.m];
            let (value, _, breakdown) = loss_terms(&gamma, batch, cfg, lambda3);
            LossEval {
                value,
                grad: Vec::new(),
                breakdown,
            }
        }
        GammaModel::Mlp(net) => mlp_loss(batch, net, cfg, lambda3),
    }
}

fn mlp_loss(batch: &Batch, net: &Mlp, cfg: &TrainConfig, lambda3: f64) -> LossEval {
    let (out, tape) = net.forward_batch(&batch.x);
    let (value, d, breakdown) = loss_terms(out.as_slice(), batch, cfg, lambda3);
    let grad = net.backward_batch(&tape, &DVector::from_vec(d));
    LossEval { value, grad, breakdown }
}

fn check_batch(batch: &[TrainingPair]) -> Result<Vec<&TrainingPair>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("loss needs a non-empty batch".into()));
    }
    Ok(batch.iter().collect())
}

/// Mean-square norm term plus the constraint hinge and pairwise-sum hinge.
pub fn hinge_loss(batch: &[TrainingPair], model: &GammaModel, cfg: &TrainConfig) -> Result<LossEval> {
    let refs = check_batch(batch)?;
    Ok(loss_on(&assemble(&refs), model, cfg, 0.0))
}

/// [`hinge_loss`] plus `-lambda3 * sum(gamma)`.
pub fn regularized_loss(batch: &[TrainingPair], model: &GammaModel, cfg: &TrainConfig) -> Result<LossEval> {
    let refs = check_batch(batch)?;
    Ok(loss_on(&assemble(&refs), model, cfg, cfg.lambda3))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Full-dataset regularized loss after the epoch.
    pub loss: f64,
    pub hinge_rate: f64,
    pub mean_gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: GammaModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub pairs_used: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * grad[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * grad[k] * grad[k];
            params[k] -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Full-dataset loss, evaluated in fixed-size chunks in parallel and reduced
/// in order. The norm term uses the mean over the whole dataset.
fn dataset_loss(batches: &[Batch], net: &Mlp, cfg: &TrainConfig) -> LossBreakdown {
    let parts: Vec<(LossBreakdown, usize)> = batches
        .par_iter()
        .map(|b| {
            let (out, _) = net.forward_batch(&b.x);
            let (_, _, br) = loss_terms(out.as_slice(), b, cfg, cfg.lambda3);
            (br, b.m)
        })
        .collect();
    let total: usize = parts.iter().map(|p| p.1).sum();
    let mut acc = LossBreakdown::default();
    let mut active = 0.0;
    for (b, m) in &parts {
        let w = *m as f64 / total as f64;
        acc.norm += b.norm * w;
        acc.hinge += b.hinge;
        acc.sum_penalty += b.sum_penalty;
        acc.regularizer += b.regularizer;
        active += b.hinge_rate * *m as f64;
        acc.mean_gamma += b.mean_gamma * w;
    }
    acc.hinge_rate = active / total as f64;
    acc
}

fn total(b: &LossBreakdown) -> f64 {
    b.norm + b.hinge + b.sum_penalty + b.regularizer
}

/// Adam on minibatches from a seeded small-random initialization. The pairs
/// are heading-filtered first; the parameters with the lowest full-dataset
/// loss are returned.
pub fn train(pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = heading_filter(pairs, cfg.theta_max);
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training pairs left after the heading filter".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut widths = vec![FEATURE_DIM];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(1);
    let mut net = Mlp::random(&widths, &cfg.slopes, cfg.init_scale, &mut rng);
    let mut params = net.params();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);

    const EVAL_CHUNK: usize = 512;
    let eval_batches: Vec<Batch> = data
        .chunks(EVAL_CHUNK)
        .map(|c| assemble(&c.iter().collect::<Vec<_>>()))
        .collect();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let initial = dataset_loss(&eval_batches, &net, cfg);
    let mut best = (0usize, total(&initial), params.clone());
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&TrainingPair> = idx.iter().map(|&k| &data[k]).collect();
            let batch = assemble(&refs);
            let eval = mlp_loss(&batch, &net, cfg, cfg.lambda3);
            if !eval.value.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("minibatch loss {} ({:?})", eval.value, eval.breakdown),
                });
            }
            adam.step(&mut params, &eval.grad);
            net.set_params(&params);
        }
        let b = dataset_loss(&eval_batches, &net, cfg);
        let loss = total(&b);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("dataset loss {loss} ({b:?})"),
            });
        }
        log.push(EpochLog {
            epoch,
            loss,
            hinge_rate: b.hinge_rate,
            mean_gamma: b.mean_gamma,
        });
        if loss < best.1 {
            best = (epoch, loss, params.clone());
        }
    }
    net.set_params(&best.2);
    Ok(TrainOutcome {
        model: GammaModel::Mlp(net),
        log,
        best_epoch: best.0,
        best_loss: best.1,
        pairs_used: data.len(),
    })
}

/// Fraction of grid inputs for `agent` that satisfy every pairwise
/// responsibility-aware constraint under `model`.
pub fn feasible_input_fraction(
    scene: &[AgentState],
    agent: usize,
    model: &dyn Responsibility,
    grid: &InputGrid,
    cfg: &BarrierConfig,
    bounds: &InputBounds,
) -> Result<f64> {
    if grid.points().is_empty() {
        return Err(Error::InvalidArgument("empty input grid".into()));
    }
    let cons = pair_constraints(scene, agent, FilterMode::Learned(model), cfg, bounds)?;
    let ok = grid
        .points()
        .iter()
        .filter(|&&u| cons.iter().all(|c| c.margin(u) >= 0.0))
        .count();
    Ok(ok as f64 / grid.points().len() as f64)
}

/// Fraction of (pair, agent) entries whose recorded input violates the
/// constraint family of `mode`.
pub fn validation_violation_rate(pairs: &[TrainingPair], mode: FilterMode<'_>, cfg: &BarrierConfig, bounds: &InputBounds) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no validation pairs".into()));
    }
    let bad: usize = pairs
        .par_iter()
        .map(|p| {
            let mut bad = 0;
            for (ego, other, u) in [(p.states.0, p.states.1, p.inputs.0), (p.states.1, p.states.0, p.inputs.1)] {
                let cons = pair_constraints(&[ego, other], 0, mode, cfg, bounds).expect("two-agent scene");
                if cons[0].margin(u) < -MARGIN_TOL {
                    bad += 1;
                }
            }
            bad
        })
        .sum();
    Ok(bad as f64 / (2 * pairs.len()) as f64)
}

/// Composition of a synthetic demonstration suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSpec {
    pub entries: Vec<(ScenarioKind, usize)>,
    pub params: ScenarioParams,
}

impl SuiteSpec {
    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One audit row: agent `agent` against `other` at a demonstration step.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub scenario_id: String,
    pub timestamp: f64,
    pub agent: usize,
    pub other: usize,
    pub c: f64,
    pub gamma_star: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub demonstrations: Vec<Demonstration>,
    pub audit: Vec<AuditRow>,
    /// Candidate scenarios dropped because an expert needed slack.
    pub rejected: usize,
}

const GENERATION_ATTEMPTS: u64 = 20;

/// Roll out every suite scenario with all agents acting as experts under
/// `gamma_star` and record each step as a demonstration. A scenario in which
/// some expert cannot satisfy its constraint without slack is redrawn.
pub fn generate_synthetic_dataset(
    suite: &SuiteSpec,
    gamma_star: &dyn Responsibility,
    seed: u64,
    rollout: &RolloutConfig,
) -> Result<GeneratedDataset> {
    if suite.is_empty() {
        return Err(Error::InvalidArgument("scenario suite is empty".into()));
    }
    let mut jobs = Vec::new();
    for (kind_idx, &(kind, count)) in suite.entries.iter().enumerate() {
        for k in 0..count as u64 {
            jobs.push((kind, seed.wrapping_mul(1_000_003).wrapping_add(((kind_idx as u64) << 32) + k * GENERATION_ATTEMPTS)));
        }
    }
    let cfg = RolloutConfig {
        ego_accel_bias: 0.0,
        ..*rollout
    };
    let results: Vec<Result<(Vec<Demonstration>, Vec<AuditRow>, usize)>> = jobs
        .par_iter()
        .map(|&(kind, base)| {
            for attempt in 0..GENERATION_ATTEMPTS {
                let sc = build_scenario(kind, &suite.params, base + attempt, &cfg.barrier)?;
                let ctrls = vec![Controller::Filtered(FilterMode::Learned(gamma_star)); sc.initial.len()];
                let log = run_closed_loop(&sc, &ctrls, FilterMode::Learned(gamma_star), &cfg)?;
                if log.records.iter().any(|r| r.slack.iter().any(|&s| s > 0.0)) {
                    continue;
                }
                let mut demos = Vec::with_capacity(log.records.len());
                let mut audit = Vec::new();
                for r in &log.records {
                    let d = Demonstration {
                        scenario_id: sc.id.clone(),
                        timestamp: r.t,
                        scene: r.states.clone(),
                        joint_input: r.inputs.clone(),
                    };
                    for (i, &ego) in d.scene.iter().enumerate() {
                        for c in pair_constraints(&d.scene, i, FilterMode::Learned(gamma_star), &cfg.barrier, &cfg.bounds)? {
                            let margin = c.margin(d.joint_input[i]);
                            let _ = ego;
                            audit.push(AuditRow {
                                scenario_id: sc.id.clone(),
                                timestamp: r.t,
                                agent: i,
                                other: c.other,
                                c: margin + c.gamma,
                                gamma_star: c.gamma,
                                margin,
                            });
                        }
                    }
                    demos.push(d);
                }
                if let Some(bad) = audit.iter().find(|a| a.margin < -MARGIN_TOL) {
                    return Err(Error::Generation(format!(
                        "expert margin {} < 0 for agent {} in {} at t={}",
                        bad.margin, bad.agent, bad.scenario_id, bad.timestamp
                    )));
                }
                return Ok((demos, audit, attempt as usize));
            }
            Err(Error::Generation(format!(
                "{kind} expert needed slack in {GENERATION_ATTEMPTS} consecutive candidates (seed base {base})"
            )))
        })
        .collect();
    let mut out = GeneratedDataset {
        demonstrations: Vec::new(),
        audit: Vec::new(),
        rejected: 0,
    };
    for r in results {
        let (d, a, rej) = r?;
        out.demonstrations.extend(d);
        out.audit.extend(a);
        out.rejected += rej;
    }
    Ok(out)
}

pub const DATASET_HEADER: [&str; 9] = ["scenario_id", "t", "agent_idx", "x", "y", "v", "theta", "a", "omega"];

pub fn write_dataset_csv<W: Write>(demos: &[Demonstration], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(DATASET_HEADER)?;
    for d in demos {
        for (k, (s, u)) in d.scene.iter().zip(&d.joint_input).enumerate() {
            out.write_record([
                d.scenario_id.clone(),
                fmt_f(d.timestamp),
                k.to_string(),
                fmt_f(s.x),
                fmt_f(s.y),
                fmt_f(s.v),
                fmt_f(s.theta),
                fmt_f(u.a),
                fmt_f(u.omega),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Column positions of `required` in a CSV header, or a schema error naming
/// the first missing column.
pub fn header_positions(header: &csv::StringRecord, required: &[&str]) -> Result<Vec<usize>> {
    required
        .iter()
        .map(|name| {
            header
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
        })
        .collect()
}

pub fn parse_field(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<f64> {
    let raw = rec.get(idx).unwrap_or("").trim();
    let v: f64 = raw
        .parse()
        .map_err(|_| Error::Schema(format!("line {line}: column '{name}' has non-numeric value '{raw}'")))?;
    if !v.is_finite() {
        return Err(Error::Schema(format!("line {line}: column '{name}' is not finite")));
    }
    Ok(v)
}

/// Read a dataset written by [`write_dataset_csv`]. Rows are grouped by
/// `(scenario_id, t)` in order of first appearance; agent indices within a
/// step must be `0..n` without gaps.
pub fn read_dataset_csv<R: Read>(r: R) -> Result<Vec<Demonstration>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let pos = header_positions(&header, &DATASET_HEADER)?;
    let mut groups: Vec<(String, f64, BTreeMap<usize, (AgentState, ControlInput)>)> = Vec::new();
    let mut index: BTreeMap<(String, u64), usize> = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row as u64 + 2;
        let id = rec.get(pos[0]).unwrap_or("").to_string();
        let t = parse_field(&rec, pos[1], "t", line)?;
        let agent: usize = rec
            .get(pos[2])
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::Schema(format!("line {line}: agent_idx is not a nonnegative integer")))?;
        let vals: Vec<f64> = (3..9).map(|k| parse_field(&rec, pos[k], DATASET_HEADER[k], line)).collect::<Result<_>>()?;
        let key = (id.clone(), t.to_bits());
        let g = *index.entry(key).or_insert_with(|| {
            groups.push((id.clone(), t, BTreeMap::new()));
            groups.len() - 1
        });
        let state = AgentState::new(vals[0], vals[1], vals[2], vals[3]);
        if groups[g].2.insert(agent, (state, ControlInput::new(vals[4], vals[5]))).is_some() {
            return Err(Error::Schema(format!("line {line}: duplicate agent {agent} in {id} at t={t}")));
        }
    }
    groups
        .into_iter()
        .map(|(id, t, agents)| {
            if agents.keys().enumerate().any(|(k, &a)| k != a) {
                return Err(Error::Schema(format!("agent indices in {id} at t={t} are not contiguous from 0")));
            }
            let (scene, joint_input) = agents.into_values().unzip();
            Ok(Demonstration {
                scenario_id: id,
                timestamp: t,
                scene,
                joint_input,
            })
        })
        .collect()
}

pub const AUDIT_HEADER: [&str; 7] = ["scenario_id", "t", "agent_idx", "other_idx", "c", "gamma_star", "margin"];

pub fn write_audit_csv<W: Write>(rows: &[AuditRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(AUDIT_HEADER)?;
    for a in rows {
        out.write_record([
            a.scenario_id.clone(),
            fmt_f(a.timestamp),
            a.agent.to_string(),
            a.other.to_string(),
            fmt_f(a.c),
            fmt_f(a.gamma_star),
            fmt_f(a.margin),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_training_log_csv<W: Write>(log: &[EpochLog], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "loss", "hinge_rate", "mean_gamma"])?;
    for e in log {
        out.write_record([e.epoch.to_string(), fmt_f(e.loss), fmt_f(e.hinge_rate), fmt_f(e.mean_gamma)])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(c: (f64, f64), dtheta: f64) -> TrainingPair {
        TrainingPair {
            scenario_id: "s".into(),
            timestamp: 0.0,
            agents: (0, 1),
            states: (AgentState::new(0.0, 0.0, 5.0, 0.0), AgentState::new(8.0, 0.0, 5.0, dtheta)),
            inputs: (ControlInput::ZERO, ControlInput::ZERO),
            c,
        }
    }

    #[test]
    fn hand_evaluated_hinge() {
        let cfg = TrainConfig::default();
        let l = hinge_loss(&[pair((0.5, -0.2), 0.0)], &GammaModel::Zero, &cfg).unwrap();
        assert!((l.value - 0.2).abs() < 1e-15);
        let l = hinge_loss(&[pair((0.5, 0.2), 0.0)], &GammaModel::Zero, &cfg).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(hinge_loss(&[], &GammaModel::Zero, &cfg).is_err());
    }

    #[test]
    fn regularizer_is_linear() {
        // A network with only an output bias k is the constant function k.
        let mut net = Mlp::zeros(&[FEATURE_DIM, 4, 1], &[0.1]);
        net.layers[1].bias[0] = 0.2;
        let model = GammaModel::Mlp(net);
        let cfg = TrainConfig { lambda3: 0.5, ..TrainConfig::default() };
        let batch: Vec<_> = (0..3).map(|_| pair((1.0, 1.0), 0.0)).collect();
        let h = hinge_loss(&batch, &model, &cfg).unwrap().value;
        let r = regularized_loss(&batch, &model, &cfg).unwrap().value;
        assert!((r - h - (-0.5 * 2.0 * 3.0 * 0.2)).abs() < 1e-12);
        let cfg0 = TrainConfig { lambda3: 0.0, ..cfg };
        assert_eq!(regularized_loss(&batch, &model, &cfg0).unwrap(), hinge_loss(&batch, &model, &cfg0).unwrap());
    }

    #[test]
    fn heading_filter_rules() {
        let pairs = vec![pair((0.0, 0.0), std::f64::consts::PI), pair((0.0, 0.0), 0.0)];
        let kept = heading_filter(&pairs, 100f64.to_radians());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].heading_difference(), 0.0);
        assert_eq!(heading_filter(&pairs, std::f64::consts::PI).len(), 2);
    }

    #[test]
    fn grid_counts() {
        let g = InputGrid::new(&InputBounds::default(), 0.25, 0.1).unwrap();
        assert_eq!(g.points().len(), 693);
        assert!(InputGrid::new(&InputBounds::default(), 0.0, 0.1).is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let demos = vec![
            Demonstration {
                scenario_id: "a".into(),
                timestamp: 0.1,
                scene: vec![AgentState::new(1.0, 2.0, 3.0, 0.1), AgentState::new(-1.0, 0.5, 2.0, -0.2)],
                joint_input: vec![ControlInput::new(0.3, -0.1), ControlInput::new(-1.0, 0.0)],
            },
            Demonstration {
                scenario_id: "b".into(),
                timestamp: 0.0,
                scene: vec![AgentState::new(1.0 / 3.0, 2.0, 3.0, 0.1), AgentState::new(0.0, 0.0, 0.0, 0.0)],
                joint_input: vec![ControlInput::new(0.3, -0.1), ControlInput::ZERO],
            },
        ];
        let mut buf = Vec::new();
        write_dataset_csv(&demos, &mut buf).unwrap();
        assert_eq!(read_dataset_csv(buf.as_slice()).unwrap(), demos);
        let bad = "scenario_id,t,agent_idx,x,y,v,theta,a\n";
        let err = read_dataset_csv(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("omega"), "{err}");
    }

    #[test]
    fn split_keeps_scenarios_whole() {
        let mut pairs = Vec::new();
        for s in 0..10 {
            for t in 0..3 {
                let mut p = pair((0.0, 0.0), 0.0);
                p.scenario_id = format!("s{s}");
                p.timestamp = t as f64;
                pairs.push(p);
            }
        }
        let (train, held) = split_by_scenario(&pairs, 0.2, 1);
        assert_eq!(held.len(), 6);
        assert_eq!(train.len(), 24);
        let held_ids: BTreeSet<_> = held.iter().map(|p| &p.scenario_id).collect();
        assert!(train.iter().all(|p| !held_ids.contains(&p.scenario_id)));
    }
}
