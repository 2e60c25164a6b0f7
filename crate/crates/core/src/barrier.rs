//! Flow-projected pairwise barrier functions.
//!
//! For a pair of agents the barrier is the smallest clearance the two would
//! reach over `[0, T]` if both idled, less a minimum separation:
//!
//! ```text
//!   h_ij(x) = softmin_{tau in grid} d(phi_tau(x_i), phi_tau(x_j)) - d_bar
//! ```
//!
//! The soft minimum is a log-sum-exp with temperature `rho`, so it
//! under-approximates the hard minimum by at most `ln(K) / rho` for a grid
//! of `K` points. The global barrier is the hard minimum across pairs.

use serde::{Deserialize, Serialize};

use crate::dynamics::{drift, idle_flow, idle_flow_jacobian, AgentState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarrierConfig {
    /// Minimum clearance between footprints, meters.
    pub d_bar: f64,
    /// Projection horizon, seconds.
    pub horizon: f64,
    /// Spacing of the flow grid, seconds.
    pub flow_dt: f64,
    /// Soft-min temperature, 1/meters.
    pub rho: f64,
    /// Disc footprint radius shared by all agents, meters.
    pub radius: f64,
    /// Slope of the linear extended class-K function.
    pub alpha_slope: f64,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self {
            d_bar: 0.4,
            horizon: 1.0,
            flow_dt: 0.01,
            rho: 20.0,
            radius: 1.0,
            alpha_slope: 0.5,
        }
    }
}

impl BarrierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::InvalidArgument(format!("barrier {what} out of range: {v}")))
        };
        if !(self.d_bar > 0.0 && self.d_bar.is_finite()) {
            return bad("d_bar", self.d_bar);
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon", self.horizon);
        }
        if !(self.flow_dt > 0.0 && self.flow_dt <= self.horizon) {
            return bad("flow_dt", self.flow_dt);
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho", self.rho);
        }
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return bad("radius", self.radius);
        }
        if !(self.alpha_slope > 0.0 && self.alpha_slope.is_finite()) {
            return bad("alpha_slope", self.alpha_slope);
        }
        Ok(())
    }

    /// Number of points `K` on the flow grid `{0, flow_dt, ..., T}`.
    pub fn grid_len(&self) -> usize {
        (self.horizon / self.flow_dt).round() as usize + 1
    }

    pub fn grid(&self) -> impl Iterator<Item = f64> + '_ {
        let k = self.grid_len();
        (0..k).map(move |n| (n as f64 * self.flow_dt).min(self.horizon))
    }

    /// Linear extended class-K function.
    pub fn alpha(&self, h: f64) -> f64 {
        self.alpha_slope * h
    }

    /// Worst-case gap between soft and hard minimum on the flow grid.
    pub fn softmin_bias_bound(&self) -> f64 {
        (self.grid_len() as f64).ln() / self.rho
    }
}

/// Value, gradients and Lie derivatives of one pairwise barrier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierEval {
    pub value: f64,
    pub grad_i: [f64; 4],
    pub grad_j: [f64; 4],
    pub lf: f64,
    pub lg_i: [f64; 2],
    pub lg_j: [f64; 2],
}

impl BarrierEval {
    /// `dh/dt` for a realized joint input.
    pub fn hdot(&self, u_i: [f64; 2], u_j: [f64; 2]) -> f64 {
        self.lf + dot2(self.lg_i, u_i) + dot2(self.lg_j, u_j)
    }
}

pub(crate) fn dot2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn pairwise_distance(si: AgentState, sj: AgentState, ri: f64, rj: f64) -> f64 {
    (si.x - sj.x).hypot(si.y - sj.y) - (ri + rj)
}

/// Log-sum-exp soft minimum, shifted by the hard minimum for stability.
pub fn softmin(values: &[f64], rho: f64) -> Result<f64> {
    Ok(softmin_with_weights(values, rho)?.0)
}

/// Soft minimum together with its partial derivatives (a softmax over
/// `-rho * values`, summing to one).
pub fn softmin_with_weights(values: &[f64], rho: f64) -> Result<(f64, Vec<f64>)> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("softmin of an empty list".into()));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
    }
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut weights: Vec<f64> = values.iter().map(|v| (-rho * (v - m)).exp()).collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    Ok((m - sum.ln() / rho, weights))
}

fn grid_distances(si: AgentState, sj: AgentState, cfg: &BarrierConfig) -> Vec<f64> {
    cfg.grid()
        .map(|tau| pairwise_distance(idle_flow(si, tau), idle_flow(sj, tau), cfg.radius, cfg.radius))
        .collect()
}

/// Hard minimum clearance over the flow grid, minus `d_bar`, and the grid
/// time at which it is attained.
pub fn hard_barrier_value(si: AgentState, sj: AgentState, cfg: &BarrierConfig) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    for (tau, d) in cfg.grid().zip(grid_distances(si, sj, cfg)) {
        if d < best.0 {
            best = (d, tau);
        }
    }
    (best.0 - cfg.d_bar, best.1)
}

pub fn barrier_value(si: AgentState, sj: AgentState, cfg: &BarrierConfig) -> f64 {
    let d = grid_distances(si, sj, cfg);
    softmin(&d, cfg.rho).expect("flow grid is never empty") - cfg.d_bar
}

pub fn barrier_eval(si: AgentState, sj: AgentState, cfg: &BarrierConfig) -> BarrierEval {
    let taus: Vec<f64> = cfg.grid().collect();
    let mut dists = Vec::with_capacity(taus.len());
    let mut rel = Vec::with_capacity(taus.len());
    for &tau in &taus {
        let pi = idle_flow(si, tau);
        let pj = idle_flow(sj, tau);
        let dx = pi.x - pj.x;
        let dy = pi.y - pj.y;
        let n = dx.hypot(dy);
        dists.push(n - 2.0 * cfg.radius);
        // Distance gradient is undefined for coincident centers; use zero.
        rel.push(if n > 1e-12 { [dx / n, dy / n] } else { [0.0, 0.0] });
    }
    let (soft, weights) = softmin_with_weights(&dists, cfg.rho).expect("flow grid is never empty");

    let mut grad_i = [0.0; 4];
    let mut grad_j = [0.0; 4];
    for ((&tau, &w), e) in taus.iter().zip(&weights).zip(&rel) {
        if w == 0.0 {
            continue;
        }
        let ji = idle_flow_jacobian(si, tau);
        let jj = idle_flow_jacobian(sj, tau);
        for c in 0..4 {
            grad_i[c] += w * (e[0] * ji[0][c] + e[1] * ji[1][c]);
            grad_j[c] -= w * (e[0] * jj[0][c] + e[1] * jj[1][c]);
        }
    }

    let fi = drift(si);
    let fj = drift(sj);
    let lf: f64 = (0..4).map(|c| grad_i[c] * fi[c] + grad_j[c] * fj[c]).sum();
    BarrierEval {
        value: soft - cfg.d_bar,
        grad_i,
        grad_j,
        lf,
        lg_i: [grad_i[2], grad_i[3]],
        lg_j: [grad_j[2], grad_j[3]],
    }
}

/// Hard minimum of the pairwise barriers over all unordered pairs.
pub fn global_barrier(scene: &[AgentState], cfg: &BarrierConfig) -> Result<f64> {
    if scene.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "global barrier needs at least 2 agents, got {}",
            scene.len()
        )));
    }
    let mut h = f64::INFINITY;
    for i in 0..scene.len() {
        for j in i + 1..scene.len() {
            h = h.min(barrier_value(scene[i], scene[j], cfg));
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cfg0() -> BarrierConfig {
        BarrierConfig {
            radius: 0.0,
            ..BarrierConfig::default()
        }
    }

    #[test]
    fn distance_examples() {
        let a = AgentState::new(0.0, 0.0, 0.0, 0.0);
        let b = AgentState::new(3.0, 4.0, 0.0, 0.0);
        assert!((pairwise_distance(a, b, 0.5, 0.5) - 4.0).abs() < 1e-15);
        assert_eq!(pairwise_distance(a, a, 1.0, 1.0), -2.0);
        assert_eq!(pairwise_distance(a, b, 0.0, 0.0), 5.0);
    }

    #[test]
    fn softmin_examples() {
        let s = softmin(&[0.0, 0.0], 20.0).unwrap();
        assert!((s + 2f64.ln() / 20.0).abs() < 1e-15);
        assert!((s + 0.034657).abs() < 1e-6);
        assert_eq!(softmin(&[1.7], 3.0).unwrap(), 1.7);
        assert_eq!(softmin(&[1.7], 300.0).unwrap(), 1.7);
        let s = softmin(&[1.0, 2.0], 10.0).unwrap();
        assert!(s <= 1.0 && s >= 1.0 - 2f64.ln() / 10.0);
        // Closed form: -ln(e^-10 + e^-20)/10.
        let direct = -((-10.0f64).exp() + (-20.0f64).exp()).ln() / 10.0;
        assert!((s - direct).abs() < 1e-12);
        assert!(softmin(&[], 1.0).is_err());
    }

    #[test]
    fn head_on_against_grid_oracle() {
        let cfg = cfg0();
        assert_eq!(cfg.grid_len(), 101);
        let si = AgentState::new(0.0, 0.0, 1.0, 0.0);
        let sj = AgentState::new(10.0, 0.0, 1.0, PI);
        let (hard, tau) = hard_barrier_value(si, sj, &cfg);
        assert!((hard - 7.6).abs() < 1e-12);
        assert!((tau - 1.0).abs() < 1e-12);
        let soft = barrier_value(si, sj, &cfg);
        assert!(soft <= hard + 1e-12);
        assert!(soft >= hard - (101f64).ln() / cfg.rho);
    }

    #[test]
    fn stationary_pair() {
        let cfg = cfg0();
        let si = AgentState::new(0.0, 0.0, 0.0, 0.3);
        let sj = AgentState::new(5.0, 0.0, 0.0, -1.0);
        let soft = barrier_value(si, sj, &cfg);
        // All grid points give 5 - 0.4; soft-min of K equal entries is 4.6 - ln(K)/rho.
        assert!((soft - (4.6 - cfg.softmin_bias_bound())).abs() < 1e-12);
        let ev = barrier_eval(si, sj, &cfg);
        assert!(ev.lg_i[0].abs() > 0.1);
        assert!(ev.lg_i[1].abs() < 1e-12 && ev.lg_j[1].abs() < 1e-12);
    }

    #[test]
    fn receding_min_at_start() {
        let cfg = cfg0();
        let si = AgentState::new(0.0, 0.0, 2.0, PI);
        let sj = AgentState::new(6.0, 0.0, 3.0, 0.0);
        let (_, tau) = hard_barrier_value(si, sj, &cfg);
        assert_eq!(tau, 0.0);
    }

    #[test]
    fn head_on_mirror_symmetry() {
        let cfg = BarrierConfig::default();
        let si = AgentState::new(-5.0, 0.0, 3.0, 0.0);
        let sj = AgentState::new(5.0, 0.0, 3.0, PI);
        let ev = barrier_eval(si, sj, &cfg);
        assert!((ev.grad_i[0] + ev.grad_j[0]).abs() < 1e-12);
        assert!((ev.value - barrier_value(si, sj, &cfg)).abs() < 1e-12);
    }

    #[test]
    fn global_barrier_pairs() {
        let cfg = BarrierConfig::default();
        let a = AgentState::new(0.0, 0.0, 1.0, 0.0);
        let b = AgentState::new(20.0, 0.0, 1.0, 0.0);
        let c = AgentState::new(23.0, 1.0, 1.0, 0.0);
        assert!(global_barrier(&[a], &cfg).is_err());
        assert_eq!(global_barrier(&[a, b], &cfg).unwrap(), barrier_value(a, b, &cfg));
        let pairs = [barrier_value(a, b, &cfg), barrier_value(a, c, &cfg), barrier_value(b, c, &cfg)];
        let brute = pairs.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(brute, pairs[2]);
        assert_eq!(global_barrier(&[a, b, c], &cfg).unwrap(), brute);
        assert_eq!(global_barrier(&[c, a, b], &cfg).unwrap(), brute);
    }

    #[test]
    fn config_validation() {
        assert!(BarrierConfig::default().validate().is_ok());
        let bad = BarrierConfig { flow_dt: 2.0, ..BarrierConfig::default() };
        assert!(bad.validate().is_err());
        let bad = BarrierConfig { rho: 0.0, ..BarrierConfig::default() };
        assert!(bad.validate().is_err());
    }
}
