//! Decentralized safety filter: each agent minimally modifies its own
//! desired input subject to one constraint per other agent.

use nalgebra::{DMatrix, DVector};

use crate::barrier::{barrier_eval, dot2, BarrierConfig, BarrierEval};
use crate::dynamics::{AgentState, ControlInput, InputBounds};
use crate::error::{Error, Result};
use crate::learning::InputGrid;
use crate::qp::{solve_qp, ActiveConstraint, QpProblem, QpSolution};
use crate::responsibility::{box_infimum, Responsibility};

pub const DEFAULT_SLACK_WEIGHT: f64 = 1e4;

/// Constraint family enforced by the filter.
#[derive(Clone, Copy)]
pub enum FilterMode<'a> {
    /// Responsibility-aware constraint with a given allocation.
    Learned(&'a dyn Responsibility),
    /// Responsibility-aware constraint with `gamma == 0`.
    EvenSplit,
    /// Robust constraint against any admissible input of the other agent.
    WorstCase,
}

impl std::fmt::Debug for FilterMode<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FilterMode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            FilterMode::Learned(_) => "learned",
            FilterMode::EvenSplit => "even",
            FilterMode::WorstCase => "worst",
        }
    }
}

/// One pairwise constraint on the ego input, affine in `u`:
/// `margin(u) = lg . u + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairConstraint {
    pub other: usize,
    pub eval: BarrierEval,
    pub gamma: f64,
    pub lg: [f64; 2],
    pub offset: f64,
}

impl PairConstraint {
    pub fn margin(&self, u: ControlInput) -> f64 {
        dot2(self.lg, u.to_array()) + self.offset
    }
}

/// Build the constraints on `ego`'s input. The barrier is always evaluated
/// with the ego on side `i`.
pub fn pair_constraints(
    scene: &[AgentState],
    ego: usize,
    mode: FilterMode<'_>,
    cfg: &BarrierConfig,
    bounds: &InputBounds,
) -> Result<Vec<PairConstraint>> {
    if scene.len() < 2 {
        return Err(Error::InvalidArgument("filter needs at least two agents".into()));
    }
    if ego >= scene.len() {
        return Err(Error::InvalidArgument(format!(
            "ego index {ego} out of range for {} agents",
            scene.len()
        )));
    }
    let me = scene[ego];
    Ok(scene
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != ego)
        .map(|(j, &other)| {
            let eval = barrier_eval(me, other, cfg);
            let alpha = cfg.alpha(eval.value);
            let (gamma, offset) = match mode {
                FilterMode::Learned(model) => {
                    let g = model.gamma(me, other);
                    (g, 0.5 * (alpha + eval.lf) - g)
                }
                FilterMode::EvenSplit => (0.0, 0.5 * (alpha + eval.lf)),
                FilterMode::WorstCase => (0.0, eval.lf + alpha + box_infimum(eval.lg_j, bounds)),
            };
            PairConstraint {
                other: j,
                eval,
                gamma,
                lg: eval.lg_i,
                offset,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub input: ControlInput,
    /// One entry per other agent, in scene order.
    pub slack: Vec<f64>,
    pub active_set: Vec<ActiveConstraint>,
    /// `|u - u_des|^2 + slack_weight * sum(slack^2)`.
    pub objective_value: f64,
    pub constraints: Vec<PairConstraint>,
    pub qp: QpSolution,
}

impl FilterResult {
    /// Smallest constraint margin at the returned input.
    pub fn min_margin(&self) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.margin(self.input))
            .fold(f64::INFINITY, f64::min)
    }
}

/// QP whose solution is the filtered input for the given constraints.
pub fn filter_problem(
    constraints: &[PairConstraint],
    u_des: ControlInput,
    bounds: &InputBounds,
    slack_weight: Option<f64>,
) -> QpProblem {
    let m = constraints.len();
    QpProblem {
        hessian: DMatrix::from_diagonal_element(2, 2, 2.0),
        linear: DVector::from_vec(vec![-2.0 * u_des.a, -2.0 * u_des.omega]),
        constraints: DMatrix::from_fn(m, 2, |r, c| constraints[r].lg[c]),
        rhs: DVector::from_iterator(m, constraints.iter().map(|c| -c.offset)),
        lower: Some(DVector::from_row_slice(&bounds.lower())),
        upper: Some(DVector::from_row_slice(&bounds.upper())),
        slack_weight,
    }
}

pub fn safety_filter(
    scene: &[AgentState],
    ego: usize,
    u_des: ControlInput,
    mode: FilterMode<'_>,
    cfg: &BarrierConfig,
    bounds: &InputBounds,
) -> Result<FilterResult> {
    safety_filter_weighted(scene, ego, u_des, mode, cfg, bounds, DEFAULT_SLACK_WEIGHT)
}

pub fn safety_filter_weighted(
    scene: &[AgentState],
    ego: usize,
    u_des: ControlInput,
    mode: FilterMode<'_>,
    cfg: &BarrierConfig,
    bounds: &InputBounds,
    slack_weight: f64,
) -> Result<FilterResult> {
    if !u_des.is_finite() {
        return Err(Error::NonFinite(format!("desired input {u_des:?}")));
    }
    let constraints = pair_constraints(scene, ego, mode, cfg, bounds)?;
    let problem = filter_problem(&constraints, u_des, bounds, Some(slack_weight));
    let qp = solve_qp(&problem)?;
    // A feasible desired input is its own projection; return it bit-exact.
    // Otherwise clamp away last-ulp excursions from the box.
    let input = if bounds.contains(u_des) && constraints.iter().all(|c| c.margin(u_des) >= 0.0) {
        u_des
    } else {
        bounds.clamp(ControlInput::new(qp.x[0], qp.x[1]))
    };
    let des = [u_des.a, u_des.omega];
    Ok(FilterResult {
        input,
        slack: qp.slack.clone(),
        active_set: qp.active_set.clone(),
        objective_value: qp.objective + des[0] * des[0] + des[1] * des[1],
        constraints,
        qp,
    })
}

/// Filter objective at a candidate input, using the smallest slack that
/// makes every constraint hold.
pub fn penalized_objective(
    constraints: &[PairConstraint],
    u: ControlInput,
    u_des: ControlInput,
    slack_weight: f64,
) -> f64 {
    let da = u.a - u_des.a;
    let dw = u.omega - u_des.omega;
    let slack: f64 = constraints.iter().map(|c| (-c.margin(u)).max(0.0).powi(2)).sum();
    da * da + dw * dw + slack_weight * slack
}

/// Exhaustive search over a discretized input box. Picks the grid point
/// nearest `u_des` among those satisfying every constraint, or the point of
/// largest minimum margin when none does.
pub fn brute_force_filter(
    scene: &[AgentState],
    ego: usize,
    u_des: ControlInput,
    mode: FilterMode<'_>,
    cfg: &BarrierConfig,
    bounds: &InputBounds,
    grid: &InputGrid,
) -> Result<ControlInput> {
    let constraints = pair_constraints(scene, ego, mode, cfg, bounds)?;
    Ok(brute_force_select(&constraints, u_des, grid))
}

pub fn brute_force_select(constraints: &[PairConstraint], u_des: ControlInput, grid: &InputGrid) -> ControlInput {
    let mut best_feasible: Option<(f64, ControlInput)> = None;
    let mut best_margin: Option<(f64, ControlInput)> = None;
    for &u in grid.points() {
        let m = constraints
            .iter()
            .map(|c| c.margin(u))
            .fold(f64::INFINITY, f64::min);
        if m >= 0.0 {
            let d = (u.a - u_des.a).powi(2) + (u.omega - u_des.omega).powi(2);
            if best_feasible.is_none_or(|(bd, _)| d < bd) {
                best_feasible = Some((d, u));
            }
        }
        if best_margin.is_none_or(|(bm, _)| m > bm) {
            best_margin = Some((m, u));
        }
    }
    best_feasible
        .or(best_margin)
        .map(|(_, u)| u)
        .expect("input grid is never empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::responsibility::GammaModel;

    fn bounds() -> InputBounds {
        InputBounds::default()
    }

    #[test]
    fn far_apart_input_unchanged() {
        let cfg = BarrierConfig::default();
        let scene = [AgentState::new(0.0, 0.0, 5.0, 0.0), AgentState::new(60.0, 0.0, 5.0, 0.0)];
        let u_des = ControlInput::new(1.0, 0.2);
        for mode in [FilterMode::EvenSplit, FilterMode::WorstCase, FilterMode::Learned(&GammaModel::Zero)] {
            let r = safety_filter(&scene, 0, u_des, mode, &cfg, &bounds()).unwrap();
            assert_eq!(r.input, u_des, "{mode:?}");
            assert!(r.slack.iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn ego_out_of_range() {
        let cfg = BarrierConfig::default();
        let scene = [AgentState::new(0.0, 0.0, 5.0, 0.0), AgentState::new(60.0, 0.0, 5.0, 0.0)];
        assert!(safety_filter(&scene, 2, ControlInput::ZERO, FilterMode::EvenSplit, &cfg, &bounds()).is_err());
        assert!(safety_filter(&scene[..1], 0, ControlInput::ZERO, FilterMode::EvenSplit, &cfg, &bounds()).is_err());
    }

    #[test]
    fn closing_follower_brakes() {
        let cfg = BarrierConfig::default();
        // Follower closing at 6 m/s on a leader 9 m ahead.
        let scene = [AgentState::new(0.0, 0.0, 10.0, 0.0), AgentState::new(9.0, 0.0, 4.0, 0.0)];
        let u_des = ControlInput::new(1.0, 0.0);
        let r = safety_filter(&scene, 0, u_des, FilterMode::EvenSplit, &cfg, &bounds()).unwrap();
        assert!(r.input.a < u_des.a);
        // The heading derivative is symmetric here; only acceleration moves.
        assert!(r.input.omega.abs() < 1e-9);
        assert!(r.min_margin() >= -1e-9 || r.slack.iter().any(|&s| s > 0.0));
    }

    #[test]
    fn input_grid_spacing() {
        let g = InputGrid::new(&bounds(), 0.25, 0.1).unwrap();
        assert_eq!(g.points().len(), 33 * 21);
        assert!(g.points().iter().all(|&u| bounds().contains(u)));
    }

    #[test]
    fn brute_force_contracts() {
        let cfg = BarrierConfig::default();
        let grid = InputGrid::new(&bounds(), 0.25, 0.1).unwrap();
        let scene = [AgentState::new(0.0, 0.0, 5.0, 0.0), AgentState::new(60.0, 0.0, 5.0, 0.0)];
        let u = brute_force_filter(&scene, 0, ControlInput::new(1.1, 0.23), FilterMode::EvenSplit, &cfg, &bounds(), &grid).unwrap();
        assert!((u.a - 1.0).abs() < 1e-12 && (u.omega - 0.2).abs() < 1e-12);

        // No grid point can satisfy: pick the maximum margin point.
        let c = PairConstraint {
            other: 1,
            eval: barrier_eval(scene[0], scene[1], &cfg),
            gamma: 0.0,
            lg: [1.0, 0.5],
            offset: -100.0,
        };
        let u = brute_force_select(&[c], ControlInput::ZERO, &grid);
        assert!((u.a - 4.0).abs() < 1e-12 && (u.omega - 1.0).abs() < 1e-12);
    }
}
