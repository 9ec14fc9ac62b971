//! Exact small-scale QP solver: ground truth for the closed-form
//! projections, expert-data generator, and the "simultaneous enforcement"
//! baseline (with optional quadratic slack).
//!
//! `minimize |u - u_ref|^2 subject to a_i . u >= c_i` is solved by
//! enumerating active subsets (the constraint cap keeps this at <= 256
//! subsets), solving each equality-constrained system, and keeping the
//! feasible candidate with minimal objective and nonnegative multipliers.
//! Infeasibility is certified by the same exhaustive enumeration.

use thiserror::Error;

use crate::dynamics::{Episode, Scenario};
use crate::geometry::Halfspace;
use crate::linalg::{self, dot};

pub const MAX_CONTROL_DIM: usize = 3;
pub const MAX_CONSTRAINTS: usize = 8;

const FEAS_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("no control satisfies all hard constraints")]
    Infeasible,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub u_ref: Vec<f64>,
    pub constraints: Vec<Halfspace>,
    /// `None` = hard constraints. `Some(w)` minimizes
    /// `|u - u_ref|^2 + w * sum_i s_i^2` with `a_i . u >= c_i - s_i`.
    pub slack_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: Vec<f64>,
    /// Indices into `constraints` active at the optimum.
    pub active_set: Vec<usize>,
    /// Multiplier per active constraint (same order as `active_set`).
    pub multipliers: Vec<f64>,
    pub objective: f64,
    /// Number of candidate subsets skipped as numerically singular.
    pub skipped_ill_conditioned: usize,
}

impl QpProblem {
    pub fn hard(u_ref: Vec<f64>, constraints: Vec<Halfspace>) -> Self {
        Self { u_ref, constraints, slack_weight: None }
    }

    pub fn with_slack(u_ref: Vec<f64>, constraints: Vec<Halfspace>, weight: f64) -> Self {
        Self { u_ref, constraints, slack_weight: Some(weight) }
    }

    fn check(&self) -> Result<(), QpError> {
        let m = self.u_ref.len();
        if m == 0 || m > MAX_CONTROL_DIM {
            return Err(QpError::InvalidProblem(format!(
                "control dimension {} outside 1..={}",
                m, MAX_CONTROL_DIM
            )));
        }
        if self.constraints.len() > MAX_CONSTRAINTS {
            return Err(QpError::InvalidProblem(format!(
                "{} constraints exceeds cap {}",
                self.constraints.len(),
                MAX_CONSTRAINTS
            )));
        }
        if let Some(row) = self.constraints.iter().find(|h| h.a.len() != m) {
            return Err(QpError::InvalidProblem(format!(
                "constraint {} has normal length {} != control dim {}",
                row.constraint_id,
                row.a.len(),
                m
            )));
        }
        if let Some(w) = self.slack_weight {
            if w < 0.0 {
                return Err(QpError::InvalidProblem("slack weight must be >= 0".into()));
            }
        }
        Ok(())
    }
}

pub fn solve(problem: &QpProblem) -> Result<QpSolution, QpError> {
    problem.check()?;
    match problem.slack_weight {
        None => solve_hard(problem),
        Some(w) => solve_slack(problem, w),
    }
}

fn objective(u: &[f64], u_ref: &[f64]) -> f64 {
    linalg::dist_sq(u, u_ref)
}

fn solve_hard(problem: &QpProblem) -> Result<QpSolution, QpError> {
    let k = problem.constraints.len();
    let mut best: Option<QpSolution> = None;
    let mut skipped = 0usize;
    for mask in 0u32..(1 << k) {
        let subset: Vec<usize> = (0..k).filter(|&i| mask & (1 << i) != 0).collect();
        let candidate = if subset.is_empty() {
            Some((problem.u_ref.clone(), Vec::new()))
        } else {
            // Equality-constrained solve: u = u_ref + A_S^T lambda with
            // (A_S A_S^T) lambda = c_S - A_S u_ref.
            let gram: Vec<Vec<f64>> = subset
                .iter()
                .map(|&i| {
                    subset
                        .iter()
                        .map(|&j| dot(&problem.constraints[i].a, &problem.constraints[j].a))
                        .collect()
                })
                .collect();
            let rhs: Vec<f64> = subset
                .iter()
                .map(|&i| problem.constraints[i].c - dot(&problem.constraints[i].a, &problem.u_ref))
                .collect();
            match linalg::solve_dense(&gram, &rhs, PIVOT_TOL) {
                None => {
                    skipped += 1;
                    None
                }
                Some(lambda) => {
                    if lambda.iter().any(|&l| l < -FEAS_TOL) {
                        None
                    } else {
                        let mut u = problem.u_ref.clone();
                        for (&i, &l) in subset.iter().zip(&lambda) {
                            linalg::axpy(l, &problem.constraints[i].a, &mut u);
                        }
                        Some((u, lambda))
                    }
                }
            }
        };
        if let Some((u, lambda)) = candidate {
            let feasible = problem
                .constraints
                .iter()
                .all(|h| h.margin(&u) >= -FEAS_TOL);
            if feasible {
                let obj = objective(&u, &problem.u_ref);
                let better = best.as_ref().map_or(true, |b| obj < b.objective);
                if better {
                    best = Some(QpSolution {
                        u,
                        active_set: subset,
                        multipliers: lambda,
                        objective: obj,
                        skipped_ill_conditioned: 0,
                    });
                }
            }
        }
    }
    match best {
        Some(mut sol) => {
            sol.skipped_ill_conditioned = skipped;
            Ok(sol)
        }
        None => Err(QpError::Infeasible),
    }
}

/// Quadratic-slack relaxation. With the slack eliminated in closed form
/// (`s_i = ReLU(c_i - a_i . u)`), the objective becomes an unconstrained
/// piecewise quadratic; each candidate "violated set" S yields the linear
/// system `(I + w sum_S a_i^T a_i) u = u_ref + w sum_S c_i a_i^T`.
fn solve_slack(problem: &QpProblem, w: f64) -> Result<QpSolution, QpError> {
    let k = problem.constraints.len();
    let m = problem.u_ref.len();
    let mut best: Option<(f64, Vec<f64>, Vec<usize>)> = None;
    let mut skipped = 0usize;
    for mask in 0u32..(1 << k) {
        let subset: Vec<usize> = (0..k).filter(|&i| mask & (1 << i) != 0).collect();
        let mut mat = vec![vec![0.0; m]; m];
        for (i, row) in mat.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let mut rhs = problem.u_ref.clone();
        for &i in &subset {
            let h = &problem.constraints[i];
            for r in 0..m {
                for c in 0..m {
                    mat[r][c] += w * h.a[r] * h.a[c];
                }
            }
            linalg::axpy(w * h.c, &h.a, &mut rhs);
        }
        let u = match linalg::solve_dense(&mat, &rhs, PIVOT_TOL) {
            Some(u) => u,
            None => {
                skipped += 1;
                continue;
            }
        };
        // Consistency: constraints in S are violated, others satisfied.
        let consistent = (0..k).all(|i| {
            let r = problem.constraints[i].c - dot(&problem.constraints[i].a, &u);
            if subset.contains(&i) {
                r >= -FEAS_TOL
            } else {
                r <= FEAS_TOL
            }
        });
        if consistent {
            let slack_pen: f64 = subset
                .iter()
                .map(|&i| {
                    let r = problem.constraints[i].c - dot(&problem.constraints[i].a, &u);
                    w * r.max(0.0).powi(2)
                })
                .sum();
            let obj = objective(&u, &problem.u_ref) + slack_pen;
            if best.as_ref().map_or(true, |(b, _, _)| obj < *b) {
                best = Some((obj, u, subset));
            }
        }
    }
    match best {
        Some((obj, u, subset)) => {
            let multipliers: Vec<f64> = subset
                .iter()
                .map(|&i| {
                    let r = problem.constraints[i].c - dot(&problem.constraints[i].a, &u);
                    2.0 * w * r.max(0.0)
                })
                .collect();
            Ok(QpSolution {
                u,
                active_set: subset,
                multipliers,
                objective: obj,
                skipped_ill_conditioned: skipped,
            })
        }
        // The smooth unconstrained problem always has a consistent subset;
        // reaching this would mean systematic conditioning failure.
        None => Err(QpError::InvalidProblem("slack relaxation found no consistent region".into())),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpertError {
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// The constraint set the expert enforces. The manipulation expert tracks
/// the end-effector reference and enforces only the obstacle constraint,
/// leaving the joint-limit constraints to the learned safety layer.
pub fn expert_constraints(
    scenario: &Scenario,
    x: &[f64],
    episode: &Episode,
) -> Result<Vec<Halfspace>, crate::geometry::GeometryError> {
    let gains = scenario.expert_gains();
    let mut hs = scenario.compile_halfspaces(x, &gains, episode)?;
    if matches!(scenario.config, crate::dynamics::ScenarioConfig::Manipulation(_)) {
        hs.truncate(1);
    }
    let bounds = scenario.bound_halfspaces(hs.len());
    if hs.len() + bounds.len() <= MAX_CONSTRAINTS {
        hs.extend(bounds);
    }
    Ok(hs)
}

/// Ground-truth control: the scenario reference controller filtered through
/// the hard QP over the expert's constraint set.
pub fn expert_control(
    scenario: &Scenario,
    x: &[f64],
    episode: &Episode,
) -> Result<Vec<f64>, ExpertError> {
    let u_ref = scenario.reference_control(x, episode);
    let constraints = expert_constraints(scenario, x, episode)?;
    let sol = solve(&QpProblem::hard(u_ref, constraints))?;
    Ok(sol.u)
}
