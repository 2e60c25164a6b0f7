//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use racbf::dynamics::{AgentState, ControlInput, InputBounds};
use racbf::responsibility::Responsibility;

/// Constant allocation for every ordered pair.
pub struct ConstGamma(pub f64);

impl Responsibility for ConstGamma {
    fn gamma(&self, _: AgentState, _: AgentState) -> f64 {
        self.0
    }
}

pub fn random_state<R: Rng>(rng: &mut R, extent: f64) -> AgentState {
    AgentState::new(
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
        rng.random_range(0.0..10.0),
        rng.random_range(-3.1..3.1),
    )
}

/// Pair at least `min_gap` apart (centers), at most `extent` per axis.
pub fn random_pair<R: Rng>(rng: &mut R, extent: f64, min_gap: f64) -> (AgentState, AgentState) {
    loop {
        let a = random_state(rng, extent);
        let b = random_state(rng, extent);
        if (a.x - b.x).hypot(a.y - b.y) >= min_gap {
            return (a, b);
        }
    }
}

pub fn random_input<R: Rng>(rng: &mut R, bounds: &InputBounds) -> ControlInput {
    ControlInput::new(
        rng.random_range(-bounds.a_max..=bounds.a_max),
        rng.random_range(-bounds.omega_max..=bounds.omega_max),
    )
}

/// Central difference of a scalar function of a 4-vector.
pub fn fd_grad4(f: impl Fn([f64; 4]) -> f64, x: [f64; 4], h: f64) -> [f64; 4] {
    let mut g = [0.0; 4];
    for k in 0..4 {
        let mut up = x;
        let mut dn = x;
        up[k] += h;
        dn[k] -= h;
        g[k] = (f(up) - f(dn)) / (2.0 * h);
    }
    g
}

/// `|a - b| <= rel * max(|a|, |b|) + abs`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

/// Enumerate the four box vertices of `lg . u`.
pub fn vertex_min(lg: [f64; 2], bounds: &InputBounds) -> f64 {
    let mut best = f64::INFINITY;
    for sa in [-1.0, 1.0] {
        for sw in [-1.0, 1.0] {
            best = best.min(lg[0] * (sa * bounds.a_max) + lg[1] * (sw * bounds.omega_max));
        }
    }
    best
}
