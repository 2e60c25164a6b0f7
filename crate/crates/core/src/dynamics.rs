//! Planar unicycle dynamics.
//!
//! Each agent carries the state `(x, y, v, theta)` and is driven by the
//! input `(a, omega)`:
//!
//! ```text
//!   d/dt [x, y, v, theta] = [v cos(theta), v sin(theta), 0, 0] + [[0,0],[0,0],[1,0],[0,1]] [a, omega]
//! ```
//!
//! The zero-input ("idle") flow of this system is available in closed form,
//! which the barrier module uses to project states forward.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, v: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            v,
            theta: wrap_angle(theta),
        }
    }

    pub fn from_array(s: [f64; 4]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }

    /// State as `[x, y, v, theta]` without re-wrapping.
    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.v, self.theta]
    }

    pub fn position(self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub a: f64,
    pub omega: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput { a: 0.0, omega: 0.0 };

    pub fn new(a: f64, omega: f64) -> Self {
        Self { a, omega }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.a, self.omega]
    }

    pub fn is_finite(self) -> bool {
        self.a.is_finite() && self.omega.is_finite()
    }
}

/// Symmetric box `|a| <= a_max`, `|omega| <= omega_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputBounds {
    pub a_max: f64,
    pub omega_max: f64,
}

impl Default for InputBounds {
    fn default() -> Self {
        Self {
            a_max: 4.0,
            omega_max: 1.0,
        }
    }
}

impl InputBounds {
    pub fn new(a_max: f64, omega_max: f64) -> Result<Self> {
        let b = Self { a_max, omega_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_max > 0.0 && self.a_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "a_max must be positive and finite, got {}",
                self.a_max
            )));
        }
        if !(self.omega_max > 0.0 && self.omega_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "omega_max must be positive and finite, got {}",
                self.omega_max
            )));
        }
        Ok(())
    }

    pub fn clamp(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            a: u.a.clamp(-self.a_max, self.a_max),
            omega: u.omega.clamp(-self.omega_max, self.omega_max),
        }
    }

    pub fn contains(&self, u: ControlInput) -> bool {
        u.a.abs() <= self.a_max && u.omega.abs() <= self.omega_max
    }

    pub fn lower(&self) -> [f64; 2] {
        [-self.a_max, -self.omega_max]
    }

    pub fn upper(&self) -> [f64; 2] {
        [self.a_max, self.omega_max]
    }
}

/// Drift term `f(x)`.
pub fn drift(state: AgentState) -> [f64; 4] {
    let (s, c) = state.theta.sin_cos();
    [state.v * c, state.v * s, 0.0, 0.0]
}

/// Actuation matrix `g(x)`; constant for the unicycle.
pub fn actuation(_state: AgentState) -> [[f64; 2]; 4] {
    [[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
}

pub fn unicycle_deriv(state: AgentState, input: ControlInput) -> [f64; 4] {
    let f = drift(state);
    let g = actuation(state);
    let u = input.to_array();
    let mut out = f;
    for (row, o) in g.iter().zip(out.iter_mut()) {
        *o += row[0] * u[0] + row[1] * u[1];
    }
    out
}

fn add_scaled(s: [f64; 4], k: [f64; 4], h: f64) -> AgentState {
    // Intermediate RK stages are not wrapped; only the final state is.
    AgentState {
        x: s[0] + h * k[0],
        y: s[1] + h * k[1],
        v: s[2] + h * k[2],
        theta: s[3] + h * k[3],
    }
}

/// One classical Runge-Kutta step with the input held constant over `dt`.
pub fn step_rk4(state: AgentState, input: ControlInput, dt: f64) -> Result<AgentState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "dt must be positive, got {dt}"
        )));
    }
    if !state.is_finite() {
        return Err(Error::NonFinite(format!("state {state:?}")));
    }
    if !input.is_finite() {
        return Err(Error::NonFinite(format!("input {input:?}")));
    }
    let s = state.to_array();
    let k1 = unicycle_deriv(state, input);
    let k2 = unicycle_deriv(add_scaled(s, k1, dt / 2.0), input);
    let k3 = unicycle_deriv(add_scaled(s, k2, dt / 2.0), input);
    let k4 = unicycle_deriv(add_scaled(s, k3, dt), input);
    let mut next = [0.0; 4];
    for i in 0..4 {
        next[i] = s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    let out = AgentState::from_array(next);
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("integrated state {out:?}")));
    }
    Ok(out)
}

/// Flow of the zero-input backup controller after `tau` seconds.
pub fn idle_flow(state: AgentState, tau: f64) -> AgentState {
    let (s, c) = state.theta.sin_cos();
    AgentState {
        x: state.x + state.v * tau * c,
        y: state.y + state.v * tau * s,
        v: state.v,
        theta: state.theta,
    }
}

/// Jacobian of [`idle_flow`] with respect to the initial state, rows and
/// columns ordered `(x, y, v, theta)`.
pub fn idle_flow_jacobian(state: AgentState, tau: f64) -> [[f64; 4]; 4] {
    let (s, c) = state.theta.sin_cos();
    let v = state.v;
    [
        [1.0, 0.0, tau * c, -v * tau * s],
        [0.0, 1.0, tau * s, v * tau * c],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}
