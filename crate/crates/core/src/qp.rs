//! Dense strictly convex QP solver for the small programs built by the
//! safety filter.
//!
//! ```text
//!   minimize    1/2 x' H x + f' x + w * sum(s^2)
//!   subject to  A x + s >= b,   lower <= x <= upper,   s >= 0
//! ```
//!
//! The slack block is only introduced when the program without slack is
//! infeasible, so slack stays exactly zero whenever it is not needed.
//! Both programs are solved with the Goldfarb-Idnani dual active-set
//! method, which starts from the unconstrained minimizer, needs no feasible
//! start and detects infeasibility. Violated constraints are added in
//! lowest-index order.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// `n x n`, symmetric positive definite.
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// `m x n`, rows of `A x >= b`.
    pub constraints: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
    /// Penalty per squared unit of slack; `None` disables slack.
    pub slack_weight: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ActiveConstraint {
    Linear(usize),
    Lower(usize),
    Upper(usize),
    SlackFloor(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One entry per linear constraint, all zero unless `used_slack`.
    pub slack: Vec<f64>,
    pub active_set: Vec<ActiveConstraint>,
    /// Lagrange multipliers aligned with `active_set`.
    pub multipliers: Vec<f64>,
    pub objective: f64,
    pub used_slack: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    /// `max |mu * r| / max(1, |mu|)` over active constraints.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.nrows()
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.hessian.ncols() != n || self.linear.len() != n {
            return bad(format!("objective dimensions inconsistent with n = {n}"));
        }
        if self.constraints.ncols() != n && self.constraints.nrows() > 0 {
            return bad(format!(
                "constraint matrix has {} columns, expected {n}",
                self.constraints.ncols()
            ));
        }
        if self.rhs.len() != self.constraints.nrows() {
            return bad("constraint rhs length mismatch".into());
        }
        for b in [&self.lower, &self.upper].into_iter().flatten() {
            if b.len() != n {
                return bad("bound length mismatch".into());
            }
        }
        if let (Some(lo), Some(hi)) = (&self.lower, &self.upper) {
            if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
                return bad("lower bound exceeds upper bound".into());
            }
        }
        if (&self.hessian - self.hessian.transpose()).amax() > 1e-12 * (1.0 + self.hessian.amax()) {
            return bad("hessian is not symmetric".into());
        }
        let finite = self.hessian.iter().chain(self.linear.iter()).chain(self.constraints.iter()).chain(self.rhs.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("QP data".into()));
        }
        if let Some(w) = self.slack_weight {
            if !(w > 0.0 && w.is_finite()) {
                return bad(format!("slack weight must be positive, got {w}"));
            }
        }
        Ok(())
    }

    fn base_objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }
}

/// Constraint rows in the solver's internal order: linear, lower, upper.
fn stacked_rows(p: &QpProblem, n_vars: usize, with_slack: bool) -> (DMatrix<f64>, DVector<f64>, Vec<ActiveConstraint>) {
    let n = p.dim();
    let m = p.n_constraints();
    let mut rows: Vec<(Vec<f64>, f64, ActiveConstraint)> = Vec::new();
    for k in 0..m {
        let mut r = vec![0.0; n_vars];
        for c in 0..n {
            r[c] = p.constraints[(k, c)];
        }
        if with_slack {
            r[n + k] = 1.0;
        }
        rows.push((r, p.rhs[k], ActiveConstraint::Linear(k)));
    }
    if let Some(lo) = &p.lower {
        for c in 0..n {
            let mut r = vec![0.0; n_vars];
            r[c] = 1.0;
            rows.push((r, lo[c], ActiveConstraint::Lower(c)));
        }
    }
    if let Some(hi) = &p.upper {
        for c in 0..n {
            let mut r = vec![0.0; n_vars];
            r[c] = -1.0;
            rows.push((r, -hi[c], ActiveConstraint::Upper(c)));
        }
    }
    if with_slack {
        for k in 0..m {
            let mut r = vec![0.0; n_vars];
            r[n + k] = 1.0;
            rows.push((r, 0.0, ActiveConstraint::SlackFloor(k)));
        }
    }
    let mat = DMatrix::from_fn(rows.len(), n_vars, |r, c| rows[r].0[c]);
    let rhs = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let tags = rows.into_iter().map(|r| r.2).collect();
    (mat, rhs, tags)
}

struct DualResult {
    x: DVector<f64>,
    active: Vec<usize>,
    multipliers: Vec<f64>,
    iterations: usize,
}

/// Goldfarb-Idnani dual active-set iteration for
/// `min 1/2 x'Gx + a'x  s.t.  C x >= b`.
fn dual_active_set(g: &DMatrix<f64>, a: &DVector<f64>, c: &DMatrix<f64>, b: &DVector<f64>) -> Result<DualResult> {
    let n = g.nrows();
    let m = c.nrows();
    let ginv = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("hessian is not positive definite".into()))?
        .inverse();
    let rows: Vec<DVector<f64>> = (0..m).map(|k| c.row(k).transpose()).collect();
    let row_scale: Vec<f64> = rows.iter().map(|r| r.norm().max(1e-300)).collect();

    let mut x = -(&ginv * a);
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let max_iter = 50 * (n + m + 1);
    let mut iterations = 0;
    let feas_tol = |k: usize, x: &DVector<f64>| 1e-12 * (1.0 + b[k].abs() + row_scale[k] * x.amax());

    loop {
        let violated = (0..m).find(|&k| !active.contains(&k) && rows[k].dot(&x) - b[k] < -feas_tol(k, &x));
        let Some(p) = violated else { break };
        let np = &rows[p];
        let mut up = 0.0;
        let mut sp = np.dot(&x) - b[p];
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::IterationLimit {
                    iterations,
                    detail: format!("active set {active:?}, adding constraint {p}, violation {sp:e}"),
                });
            }
            let q = active.len();
            let (z, r) = if q == 0 {
                (&ginv * np, DVector::zeros(0))
            } else {
                let nmat = DMatrix::from_fn(n, q, |i, l| rows[active[l]][i]);
                let gn = &ginv * &nmat;
                let mmat = nmat.transpose() * &gn;
                let w = gn.transpose() * np;
                let r = mmat
                    .clone()
                    .cholesky()
                    .map(|ch| ch.solve(&w))
                    .or_else(|| mmat.clone().lu().solve(&w))
                    .ok_or_else(|| Error::InvalidArgument("active constraints lost independence".into()))?;
                let z = &ginv * (np - &nmat * &r);
                (z, r)
            };
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for l in 0..q {
                if r[l] > 0.0 {
                    let t = mult[l] / r[l];
                    if t < t1 {
                        t1 = t;
                        drop_at = Some(l);
                    }
                }
            }
            let zn = z.dot(np);
            let scale = np.dot(&(&ginv * np));
            let t2 = if zn > 1e-12 * scale { -sp / zn } else { f64::INFINITY };

            if t1.is_infinite() && t2.is_infinite() {
                return Err(Error::Infeasible(format!(
                    "constraint {p} cannot be satisfied together with active set {active:?}"
                )));
            }
            if t2.is_infinite() {
                for l in 0..q {
                    mult[l] -= t1 * r[l];
                }
                up += t1;
                let l = drop_at.unwrap();
                active.remove(l);
                mult.remove(l);
                continue;
            }
            let t = t1.min(t2);
            x += t * &z;
            for l in 0..q {
                mult[l] -= t * r[l];
            }
            up += t;
            if t2 <= t1 {
                active.push(p);
                mult.push(up);
                break;
            }
            let l = drop_at.unwrap();
            active.remove(l);
            mult.remove(l);
            sp = np.dot(&x) - b[p];
        }
    }

    // Re-solve the equality-constrained system on the final active set to
    // remove accumulated rounding from the incremental updates.
    if !active.is_empty() {
        let q = active.len();
        let nmat = DMatrix::from_fn(n, q, |i, l| rows[active[l]][i]);
        let gn = &ginv * &nmat;
        let mmat = nmat.transpose() * &gn;
        let ba = DVector::from_iterator(q, active.iter().map(|&k| b[k]));
        let rhs = &ba + gn.transpose() * a;
        if let Some(u) = mmat.clone().cholesky().map(|ch| ch.solve(&rhs)) {
            let xp = &ginv * (&nmat * &u - a);
            let ok = u.iter().all(|&v| v >= -1e-10)
                && (0..m).all(|k| rows[k].dot(&xp) - b[k] >= -feas_tol(k, &xp) * 10.0);
            if ok {
                x = xp;
                mult = u.iter().map(|v| v.max(0.0)).collect();
            }
        }
    }

    // Report active constraints in index order.
    let mut pairs: Vec<(usize, f64)> = active.into_iter().zip(mult).collect();
    pairs.sort_by_key(|p| p.0);
    Ok(DualResult {
        x,
        active: pairs.iter().map(|p| p.0).collect(),
        multipliers: pairs.iter().map(|p| p.1).collect(),
        iterations,
    })
}

pub fn solve_qp(p: &QpProblem) -> Result<QpSolution> {
    p.validate()?;
    let n = p.dim();
    let m = p.n_constraints();

    let (c, b, tags) = stacked_rows(p, n, false);
    match dual_active_set(&p.hessian, &p.linear, &c, &b) {
        Ok(res) => {
            return Ok(QpSolution {
                objective: p.base_objective(&res.x),
                slack: vec![0.0; m],
                active_set: res.active.iter().map(|&k| tags[k]).collect(),
                multipliers: res.multipliers,
                x: res.x,
                used_slack: false,
                iterations: res.iterations,
            })
        }
        Err(Error::Infeasible(msg)) if p.slack_weight.is_none() => return Err(Error::Infeasible(msg)),
        Err(Error::Infeasible(_)) => {}
        Err(e) => return Err(e),
    }

    let w = p.slack_weight.expect("checked above");
    let nv = n + m;
    let mut g = DMatrix::zeros(nv, nv);
    g.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
    for k in 0..m {
        g[(n + k, n + k)] = 2.0 * w;
    }
    let mut a = DVector::zeros(nv);
    a.rows_mut(0, n).copy_from(&p.linear);
    let (c, b, tags) = stacked_rows(p, nv, true);
    let res = dual_active_set(&g, &a, &c, &b)?;
    let x = res.x.rows(0, n).into_owned();
    let slack: Vec<f64> = (0..m).map(|k| res.x[n + k].max(0.0)).collect();
    Ok(QpSolution {
        objective: p.base_objective(&x) + w * slack.iter().map(|s| s * s).sum::<f64>(),
        x,
        slack,
        active_set: res.active.iter().map(|&k| tags[k]).collect(),
        multipliers: res.multipliers,
        used_slack: true,
        iterations: res.iterations,
    })
}

/// KKT residuals of `sol` recomputed from the problem data. Inactive
/// constraints carry zero multipliers.
pub fn kkt_residuals(p: &QpProblem, sol: &QpSolution) -> KktResiduals {
    let n = p.dim();
    let m = p.n_constraints();
    let mut grad_x = &p.hessian * &sol.x + &p.linear;
    let mut grad_s: Vec<f64> = match p.slack_weight {
        Some(w) if sol.used_slack => sol.slack.iter().map(|s| 2.0 * w * s).collect(),
        _ => vec![0.0; m],
    };
    let mut dual: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for (tag, &mu) in sol.active_set.iter().zip(&sol.multipliers) {
        dual = dual.max(-mu);
        let (value, residual) = match *tag {
            ActiveConstraint::Linear(k) => {
                for c in 0..n {
                    grad_x[c] -= mu * p.constraints[(k, c)];
                }
                if sol.used_slack {
                    grad_s[k] -= mu;
                }
                (mu, p.constraints.row(k).transpose().dot(&sol.x) + sol.slack[k] - p.rhs[k])
            }
            ActiveConstraint::Lower(c) => {
                grad_x[c] -= mu;
                (mu, sol.x[c] - p.lower.as_ref().unwrap()[c])
            }
            ActiveConstraint::Upper(c) => {
                grad_x[c] += mu;
                (mu, p.upper.as_ref().unwrap()[c] - sol.x[c])
            }
            ActiveConstraint::SlackFloor(k) => {
                grad_s[k] -= mu;
                (mu, sol.slack[k])
            }
        };
        // Scaled by the multiplier so large slack penalties do not inflate it.
        comp = comp.max((value * residual).abs() / value.abs().max(1.0));
    }
    let mut primal: f64 = 0.0;
    for k in 0..m {
        let r = p.constraints.row(k).transpose().dot(&sol.x) + sol.slack[k] - p.rhs[k];
        primal = primal.max(-r);
    }
    if let Some(lo) = &p.lower {
        for c in 0..n {
            primal = primal.max(lo[c] - sol.x[c]);
        }
    }
    if let Some(hi) = &p.upper {
        for c in 0..n {
            primal = primal.max(sol.x[c] - hi[c]);
        }
    }
    for &s in &sol.slack {
        primal = primal.max(-s);
    }
    let stationarity = grad_x.amax().max(grad_s.iter().fold(0.0, |acc: f64, g| acc.max(g.abs())));
    KktResiduals {
        stationarity,
        primal: primal.max(0.0),
        dual: dual.max(0.0),
        complementarity: comp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_problem(u_des: [f64; 2]) -> QpProblem {
        QpProblem {
            hessian: DMatrix::identity(2, 2),
            linear: DVector::from_vec(vec![-u_des[0], -u_des[1]]),
            constraints: DMatrix::zeros(0, 2),
            rhs: DVector::zeros(0),
            lower: None,
            upper: None,
            slack_weight: None,
        }
    }

    #[test]
    fn unconstrained_returns_target() {
        let sol = solve_qp(&identity_problem([2.0, -1.0])).unwrap();
        assert!((sol.x[0] - 2.0).abs() < 1e-14 && (sol.x[1] + 1.0).abs() < 1e-14);
        assert!(sol.active_set.is_empty());
    }

    #[test]
    fn inactive_half_space() {
        let mut p = identity_problem([2.0, 0.0]);
        p.constraints = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        p.rhs = DVector::from_vec(vec![-1.0]);
        let sol = solve_qp(&p).unwrap();
        assert_eq!(sol.x.as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn projection_onto_half_space() {
        let mut p = identity_problem([2.0, 0.0]);
        p.constraints = DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]);
        p.rhs = DVector::from_vec(vec![-1.0]);
        let sol = solve_qp(&p).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-14 && sol.x[1].abs() < 1e-14);
        assert_eq!(sol.active_set, vec![ActiveConstraint::Linear(0)]);
        assert!(kkt_residuals(&p, &sol).max() < 1e-12);
    }

    #[test]
    fn box_clipping() {
        let mut p = identity_problem([9.0, -9.0]);
        p.lower = Some(DVector::from_vec(vec![-4.0, -1.0]));
        p.upper = Some(DVector::from_vec(vec![4.0, 1.0]));
        let sol = solve_qp(&p).unwrap();
        assert_eq!(sol.x.as_slice(), &[4.0, -1.0]);
        assert_eq!(sol.active_set, vec![ActiveConstraint::Lower(1), ActiveConstraint::Upper(0)]);
    }

    #[test]
    fn infeasible_without_slack() {
        let mut p = identity_problem([0.0, 0.0]);
        // x0 >= 2 and x0 <= 1.
        p.constraints = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        p.rhs = DVector::from_vec(vec![2.0, -1.0]);
        assert!(matches!(solve_qp(&p), Err(Error::Infeasible(_))));

        p.slack_weight = Some(1e4);
        let sol = solve_qp(&p).unwrap();
        assert!(sol.used_slack);
        assert!(sol.slack.iter().all(|&s| s >= 0.0));
        assert!((sol.slack[0] + sol.slack[1] - 1.0).abs() < 1e-9);
        assert!(kkt_residuals(&p, &sol).max() < 1e-8);
    }

    #[test]
    fn slack_unused_when_feasible() {
        let mut p = identity_problem([3.0, 0.0]);
        p.constraints = DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]);
        p.rhs = DVector::from_vec(vec![-1.0]);
        p.slack_weight = Some(1e4);
        let sol = solve_qp(&p).unwrap();
        assert!(!sol.used_slack);
        assert!(sol.slack.iter().all(|&s| s == 0.0));
        assert!((sol.x[0] - 2.0).abs() < 1e-12 && (sol.x[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let mut p = identity_problem([0.0, 0.0]);
        p.hessian[(1, 1)] = -1.0;
        assert!(solve_qp(&p).is_err());
    }
}
