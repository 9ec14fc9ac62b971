//! Benchmark systems (unicycle, two-link manipulator, curvilinear bicycle),
//! their barrier functions with hand-coded Lie derivatives, and the scenario
//! posets.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{compile_halfspace, Barrier, BarrierKind, Gains, GeometryError, Halfspace};
use crate::linalg::wrap_angle;
use crate::poset::{LinearExtension, SafetyPoset};

pub const EPS_FRAME: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("curvilinear frame singular at s={s:.3}, d={d:.3} (1 - d*kappa <= {eps:.1e})", eps = EPS_FRAME)]
    FrameSingularity { s: f64, d: f64 },
    #[error("non-finite state encountered")]
    NonFiniteState,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Control-affine dynamics `x' = f(x) + g(x) u`.
pub trait ControlAffine {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn drift(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError>;
    /// n x m input map.
    fn input_map(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, DynamicsError>;
    /// State rows forming the configuration block used by the isotropy
    /// (C2) check.
    fn config_rows(&self) -> Vec<usize>;

    fn derivative(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        let mut dx = self.drift(x)?;
        let g = self.input_map(x)?;
        for (row, d) in g.iter().zip(dx.iter_mut()) {
            *d += crate::linalg::dot(row, u);
        }
        Ok(dx)
    }

    /// Rows of g restricted to the configuration block.
    fn config_block(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, DynamicsError> {
        let g = self.input_map(x)?;
        Ok(self.config_rows().into_iter().map(|r| g[r].clone()).collect())
    }
}

// ---------------------------------------------------------------------------
// Unicycle
// ---------------------------------------------------------------------------

/// State (x, y, theta, v); controls (angular velocity, acceleration).
#[derive(Debug, Clone, Copy, Default)]
pub struct Unicycle;

impl ControlAffine for Unicycle {
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn drift(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        let (theta, v) = (x[2], x[3]);
        Ok(vec![v * theta.cos(), v * theta.sin(), 0.0, 0.0])
    }
    fn input_map(&self, _x: &[f64]) -> Result<Vec<Vec<f64>>, DynamicsError> {
        Ok(vec![
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
    }
    fn config_rows(&self) -> Vec<usize> {
        // heading/speed channels: the directly actuated block
        vec![2, 3]
    }
}

/// Obstacle-avoidance barrier `b = (x - x0)^2 + (y - y0)^2 - R^2` for the
/// unicycle. Relative degree two: position is unaffected by the controls
/// directly.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UnicycleObstacleBarrier {
    pub x0: f64,
    pub y0: f64,
    pub radius: f64,
}

impl Barrier for UnicycleObstacleBarrier {
    fn kind(&self) -> BarrierKind {
        BarrierKind::SecondOrder
    }
    fn value(&self, x: &[f64]) -> f64 {
        (x[0] - self.x0).powi(2) + (x[1] - self.y0).powi(2) - self.radius.powi(2)
    }
    fn lie_f(&self, x: &[f64]) -> f64 {
        let (dx, dy, theta, v) = (x[0] - self.x0, x[1] - self.y0, x[2], x[3]);
        2.0 * v * (dx * theta.cos() + dy * theta.sin())
    }
    fn lie_g(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0, 0.0]
    }
    fn lie_f2(&self, x: &[f64]) -> f64 {
        2.0 * x[3] * x[3]
    }
    fn lie_g_lie_f(&self, x: &[f64]) -> Vec<f64> {
        let (dx, dy, theta, v) = (x[0] - self.x0, x[1] - self.y0, x[2], x[3]);
        vec![
            2.0 * v * (-dx * theta.sin() + dy * theta.cos()),
            2.0 * (dx * theta.cos() + dy * theta.sin()),
        ]
    }
}

// ---------------------------------------------------------------------------
// Two-link manipulator
// ---------------------------------------------------------------------------

/// State (theta1, omega1, theta2, omega2); controls are joint angular
/// accelerations.
#[derive(Debug, Clone, Copy, Default)]
pub struct TwoLinkArm;

impl ControlAffine for TwoLinkArm {
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn drift(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        Ok(vec![x[1], 0.0, x[3], 0.0])
    }
    fn input_map(&self, _x: &[f64]) -> Result<Vec<Vec<f64>>, DynamicsError> {
        Ok(vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, 1.0],
        ])
    }
    fn config_rows(&self) -> Vec<usize> {
        // velocity channels, where the actuation is identity
        vec![1, 3]
    }
}

/// Relative joint angle wrapped to [-pi, pi).
pub fn relative_joint_angle(x: &[f64]) -> f64 {
    wrap_angle(x[2] - x[0])
}

/// End-effector obstacle barrier using the absolute-angle forward
/// kinematics `p = (l1 cos t1 + l2 cos t2, l1 sin t1 + l2 sin t2)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TipObstacleBarrier {
    pub x0: f64,
    pub y0: f64,
    pub radius: f64,
    pub l1: f64,
    pub l2: f64,
}

impl TipObstacleBarrier {
    fn tip(&self, x: &[f64]) -> (f64, f64) {
        (
            self.l1 * x[0].cos() + self.l2 * x[2].cos(),
            self.l1 * x[0].sin() + self.l2 * x[2].sin(),
        )
    }

    /// (db/dtheta1, db/dtheta2)
    fn config_grad(&self, x: &[f64]) -> (f64, f64) {
        let (px, py) = self.tip(x);
        let (ex, ey) = (px - self.x0, py - self.y0);
        let d1 = 2.0 * self.l1 * (-ex * x[0].sin() + ey * x[0].cos());
        let d2 = 2.0 * self.l2 * (-ex * x[2].sin() + ey * x[2].cos());
        (d1, d2)
    }
}

impl Barrier for TipObstacleBarrier {
    fn kind(&self) -> BarrierKind {
        BarrierKind::SecondOrder
    }
    fn value(&self, x: &[f64]) -> f64 {
        let (px, py) = self.tip(x);
        (px - self.x0).powi(2) + (py - self.y0).powi(2) - self.radius.powi(2)
    }
    fn lie_f(&self, x: &[f64]) -> f64 {
        let (d1, d2) = self.config_grad(x);
        d1 * x[1] + d2 * x[3]
    }
    fn lie_g(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0, 0.0]
    }
    fn lie_f2(&self, x: &[f64]) -> f64 {
        let (px, py) = self.tip(x);
        let (ex, ey) = (px - self.x0, py - self.y0);
        let (w1, w2) = (x[1], x[3]);
        // second derivatives of b in the joint angles
        let d11 = 2.0 * self.l1 * (self.l1 - ex * x[0].cos() - ey * x[0].sin());
        let d22 = 2.0 * self.l2 * (self.l2 - ex * x[2].cos() - ey * x[2].sin());
        let d12 = 2.0 * self.l1 * self.l2 * (x[2] - x[0]).cos();
        d11 * w1 * w1 + 2.0 * d12 * w1 * w2 + d22 * w2 * w2
    }
    fn lie_g_lie_f(&self, x: &[f64]) -> Vec<f64> {
        let (d1, d2) = self.config_grad(x);
        vec![d1, d2]
    }
}

/// Lower joint-angle limit `b = phi - phi_min` on the relative angle
/// `phi = wrap(theta2 - theta1)`, with `phi'' = u2 - u1`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JointAngleMinBarrier {
    pub phi_min: f64,
}

impl Barrier for JointAngleMinBarrier {
    fn kind(&self) -> BarrierKind {
        BarrierKind::SecondOrder
    }
    fn value(&self, x: &[f64]) -> f64 {
        relative_joint_angle(x) - self.phi_min
    }
    fn lie_f(&self, x: &[f64]) -> f64 {
        x[3] - x[1]
    }
    fn lie_g(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0, 0.0]
    }
    fn lie_f2(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn lie_g_lie_f(&self, _x: &[f64]) -> Vec<f64> {
        vec![-1.0, 1.0]
    }
}

/// Upper joint-angle limit `b = phi_max - phi`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JointAngleMaxBarrier {
    pub phi_max: f64,
}

impl Barrier for JointAngleMaxBarrier {
    fn kind(&self) -> BarrierKind {
        BarrierKind::SecondOrder
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.phi_max - relative_joint_angle(x)
    }
    fn lie_f(&self, x: &[f64]) -> f64 {
        x[1] - x[3]
    }
    fn lie_g(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0, 0.0]
    }
    fn lie_f2(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn lie_g_lie_f(&self, _x: &[f64]) -> Vec<f64> {
        vec![1.0, -1.0]
    }
}

// ---------------------------------------------------------------------------
// Curvilinear bicycle
// ---------------------------------------------------------------------------

/// Kinematic bicycle geometry and the reference track.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BicycleParams {
    /// Rear-axle-to-CG distance.
    pub l_r: f64,
    /// Front-axle-to-CG distance (wheelbase split).
    pub l_f_wb: f64,
    /// Piecewise-constant curvature: (segment length, kappa). States past
    /// the last segment keep its curvature.
    pub track: Vec<(f64, f64)>,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self { l_r: 1.5, l_f_wb: 1.5, track: vec![(1e9, 0.0)] }
    }
}

impl BicycleParams {
    pub fn curvature(&self, s: f64) -> f64 {
        let mut acc = 0.0;
        for &(len, kappa) in &self.track {
            acc += len;
            if s < acc {
                return kappa;
            }
        }
        self.track.last().map(|&(_, k)| k).unwrap_or(0.0)
    }

    /// Slip angle beta = atan(l_r / (l_f_wb + l_r) * tan(delta)).
    pub fn slip_angle(&self, delta: f64) -> f64 {
        (self.slip_ratio() * delta.tan()).atan()
    }

    fn slip_ratio(&self) -> f64 {
        self.l_r / (self.l_f_wb + self.l_r)
    }

    /// d beta / d delta.
    pub fn slip_angle_deriv(&self, delta: f64) -> f64 {
        let r = self.slip_ratio();
        let t = delta.tan();
        let sec2 = 1.0 + t * t;
        r * sec2 / (1.0 + r * r * t * t)
    }
}

/// State (s, d, mu, v, delta); controls (steering rate, acceleration).
#[derive(Debug, Clone)]
pub struct CurvilinearBicycle {
    pub params: BicycleParams,
}

impl CurvilinearBicycle {
    fn frame_factor(&self, x: &[f64]) -> Result<f64, DynamicsError> {
        let w = 1.0 - x[1] * self.params.curvature(x[0]);
        if w <= EPS_FRAME {
            Err(DynamicsError::FrameSingularity { s: x[0], d: x[1] })
        } else {
            Ok(w)
        }
    }
}

impl ControlAffine for CurvilinearBicycle {
    fn state_dim(&self) -> usize {
        5
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn drift(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        let w = self.frame_factor(x)?;
        let (mu, v, delta) = (x[2], x[3], x[4]);
        let kappa = self.params.curvature(x[0]);
        let beta = self.params.slip_angle(delta);
        let course = mu + beta;
        Ok(vec![
            v * course.cos() / w,
            v * course.sin(),
            (v / self.params.l_r) * beta.sin() - kappa * v * course.cos() / w,
            0.0,
            0.0,
        ])
    }
    fn input_map(&self, _x: &[f64]) -> Result<Vec<Vec<f64>>, DynamicsError> {
        Ok(vec![
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ])
    }
    fn config_rows(&self) -> Vec<usize> {
        // speed/steering channels
        vec![3, 4]
    }
}

/// Shared helper for lateral barriers of the form `b = sign * d + offset`.
/// `sign = -1` gives left-boundary style (`b = offset - d`), `sign = +1`
/// right-boundary style (`b = d + offset`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LateralBarrier {
    pub sign: f64,
    pub offset: f64,
    pub params: BicycleParams,
}

impl LateralBarrier {
    pub fn left(offset: f64, params: BicycleParams) -> Self {
        Self { sign: -1.0, offset, params }
    }
    pub fn right(offset: f64, params: BicycleParams) -> Self {
        Self { sign: 1.0, offset, params }
    }
}

impl Barrier for LateralBarrier {
    fn kind(&self) -> BarrierKind {
        BarrierKind::SecondOrder
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.sign * x[1] + self.offset
    }
    fn lie_f(&self, x: &[f64]) -> f64 {
        let (mu, v, delta) = (x[2], x[3], x[4]);
        self.sign * v * (mu + self.params.slip_angle(delta)).sin()
    }
    fn lie_g(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0, 0.0]
    }
    fn lie_f2(&self, x: &[f64]) -> f64 {
        // grad(L_f b) dotted with the drift; only the mu-row contributes.
        let (mu, v, delta) = (x[2], x[3], x[4]);
        let kappa = self.params.curvature(x[0]);
        let w = 1.0 - x[1] * kappa;
        let beta = self.params.slip_angle(delta);
        let course = mu + beta;
        let mu_dot = (v / self.params.l_r) * beta.sin() - kappa * v * course.cos() / w;
        self.sign * v * course.cos() * mu_dot
    }
    fn lie_g_lie_f(&self, x: &[f64]) -> Vec<f64> {
        let (mu, v, delta) = (x[2], x[3], x[4]);
        let beta = self.params.slip_angle(delta);
        let course = mu + beta;
        vec![
            self.sign * v * course.cos() * self.params.slip_angle_deriv(delta),
            self.sign * course.sin(),
        ]
    }
}

/// Collision barrier in the curvilinear frame:
/// `b = (s - s0)^2 + (d - d0)^2 - R^2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvilinearObstacleBarrier {
    pub s0: f64,
    pub d0: f64,
    pub radius: f64,
    pub params: BicycleParams,
}

impl CurvilinearObstacleBarrier {
    /// grad of L_f b over the full state, treating kappa'(s) = 0 (exact on
    /// piecewise-constant segments).
    fn grad_lie_f(&self, x: &[f64]) -> Vec<f64> {
        let (s, d, mu, v, delta) = (x[0], x[1], x[2], x[3], x[4]);
        let kappa = self.params.curvature(s);
        let w = 1.0 - d * kappa;
        let beta = self.params.slip_angle(delta);
        let course = mu + beta;
        let (es, ed) = (s - self.s0, d - self.d0);
        let d_s = 2.0 * v * course.cos() / w;
        let d_d = 2.0 * es * v * course.cos() * kappa / (w * w) + 2.0 * v * course.sin();
        let d_mu = -2.0 * es * v * course.sin() / w + 2.0 * ed * v * course.cos();
        let d_v = 2.0 * es * course.cos() / w + 2.0 * ed * course.sin();
        let d_delta = self.params.slip_angle_deriv(delta)
            * (-2.0 * es * v * course.sin() / w + 2.0 * ed * v * course.cos());
        vec![d_s, d_d, d_mu, d_v, d_delta]
    }
}

impl Barrier for CurvilinearObstacleBarrier {
    fn kind(&self) -> BarrierKind {
        BarrierKind::SecondOrder
    }
    fn value(&self, x: &[f64]) -> f64 {
        (x[0] - self.s0).powi(2) + (x[1] - self.d0).powi(2) - self.radius.powi(2)
    }
    fn lie_f(&self, x: &[f64]) -> f64 {
        let (s, d, mu, v, delta) = (x[0], x[1], x[2], x[3], x[4]);
        let kappa = self.params.curvature(s);
        let w = 1.0 - d * kappa;
        let course = mu + self.params.slip_angle(delta);
        2.0 * (s - self.s0) * v * course.cos() / w + 2.0 * (d - self.d0) * v * course.sin()
    }
    fn lie_g(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0, 0.0]
    }
    fn lie_f2(&self, x: &[f64]) -> f64 {
        let grad = self.grad_lie_f(x);
        let sys = CurvilinearBicycle { params: self.params.clone() };
        let f = sys.drift(x).expect("lie_f2 evaluated at singular frame");
        crate::linalg::dot(&grad, &f)
    }
    fn lie_g_lie_f(&self, x: &[f64]) -> Vec<f64> {
        let grad = self.grad_lie_f(x);
        // control columns: u1 -> delta row, u2 -> v row
        vec![grad[4], grad[3]]
    }
}

/// Speed upper bound `b = v_max - v`; first order since `v' = u2`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpeedMaxBarrier {
    pub v_max: f64,
}

impl Barrier for SpeedMaxBarrier {
    fn kind(&self) -> BarrierKind {
        BarrierKind::FirstOrder
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.v_max - x[3]
    }
    fn lie_f(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn lie_g(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0, -1.0]
    }
}

/// Speed lower bound `b = v - v_min`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpeedMinBarrier {
    pub v_min: f64,
}

impl Barrier for SpeedMinBarrier {
    fn kind(&self) -> BarrierKind {
        BarrierKind::FirstOrder
    }
    fn value(&self, x: &[f64]) -> f64 {
        x[3] - self.v_min
    }
    fn lie_f(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn lie_g(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0, 1.0]
    }
}

// ---------------------------------------------------------------------------
// Scenario posets
// ---------------------------------------------------------------------------

/// Navigation: three mutually incomparable obstacle constraints.
pub fn navigation_poset() -> SafetyPoset {
    SafetyPoset::antichain(3)
}

/// Manipulation: obstacle (0) below jointMin (1) and jointMax (2).
pub fn manipulation_poset() -> SafetyPoset {
    SafetyPoset::new(3, [(0, 1), (0, 2)]).unwrap()
}

/// Driving, two levels: laneL (0) and laneR (1) below obstacle (2).
pub fn driving2_poset() -> SafetyPoset {
    SafetyPoset::new(3, [(0, 2), (1, 2)]).unwrap()
}

/// Driving, four levels: {CL_L (0), CL_R (1)} < {vMin (2), vMax (3)}
/// < {laneL (4), laneR (5)} < {obstacle (6)}.
pub fn driving4_poset() -> SafetyPoset {
    let tiers: [&[usize]; 4] = [&[0, 1], &[2, 3], &[4, 5], &[6]];
    let mut rel = Vec::new();
    for k in 0..tiers.len() - 1 {
        for &lo in tiers[k] {
            for &hi in tiers[k + 1] {
                rel.push((lo, hi));
            }
        }
    }
    SafetyPoset::new(7, rel).unwrap()
}

// ---------------------------------------------------------------------------
// Scenario configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

fn default_nav_obstacles() -> Vec<ObstacleSpec> {
    vec![
        ObstacleSpec { x: 3.5, y: 0.55, radius: 0.8 },
        ObstacleSpec { x: 5.0, y: -0.55, radius: 0.8 },
        ObstacleSpec { x: 6.5, y: 0.55, radius: 0.8 },
    ]
}

/// Not paper values: the paper leaves obstacle placement, joint limits, and
/// most driving geometry unspecified; everything here is a repo default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum ScenarioConfig {
    Navigation(NavigationConfig),
    Manipulation(ManipulationConfig),
    Driving(DrivingConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NavigationConfig {
    pub obstacles: Vec<ObstacleSpec>,
    pub dt: f64,
    pub horizon: usize,
    pub noise_frac: f64,
    /// Fixed expert gains (kappa1, kappa2) per obstacle constraint.
    pub expert_kappa: (f64, f64),
    pub cruise_speed: f64,
    pub goal_x: f64,
    pub start_y_range: (f64, f64),
    pub goal_y_range: (f64, f64),
    /// Obstacle radius inflation used only when compiling control
    /// constraints: a discrete-time robustness margin absorbing Euler error
    /// and post-layer noise, so the measured barrier stays nonnegative.
    pub enforce_margin: f64,
    /// Per-channel actuator saturation |u_j| <= limit, applied by the plant
    /// to every policy and posed as halfspaces in the simultaneous QP.
    pub control_limits: Vec<f64>,
}

impl Default for NavigationConfig {
    fn default() -> Self {
        Self {
            obstacles: default_nav_obstacles(),
            dt: 0.05,
            horizon: 360,
            noise_frac: 0.1,
            expert_kappa: (4.0, 4.0),
            cruise_speed: 1.2,
            goal_x: 10.0,
            start_y_range: (-1.0, 1.0),
            goal_y_range: (-1.0, 1.0),
            enforce_margin: 0.2,
            control_limits: vec![2.0, 1.5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ManipulationConfig {
    pub l1: f64,
    pub l2: f64,
    pub obstacle: ObstacleSpec,
    pub phi_min: f64,
    pub phi_max: f64,
    pub dt: f64,
    pub horizon: usize,
    pub noise_frac: f64,
    pub expert_kappa: (f64, f64),
    /// Obstacle radius inflation for control constraints only (discrete-time
    /// robustness margin).
    pub enforce_margin_obstacle: f64,
    /// Tightening of the enforced joint-angle window relative to the
    /// measured limits.
    pub enforce_margin_phi: f64,
    /// Per-channel actuator saturation |u_j| <= limit.
    pub control_limits: Vec<f64>,
}

impl Default for ManipulationConfig {
    fn default() -> Self {
        Self {
            l1: 1.0,
            l2: 1.0,
            obstacle: ObstacleSpec { x: 1.3, y: 1.3, radius: 0.5 },
            phi_min: -2.0,
            phi_max: 2.0,
            dt: 0.05,
            horizon: 370,
            noise_frac: 0.1,
            expert_kappa: (1.0, 1.0),
            enforce_margin_obstacle: 0.15,
            enforce_margin_phi: 0.12,
            control_limits: vec![6.0, 6.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DrivingConfig {
    pub four_level: bool,
    pub bicycle: BicycleParams,
    /// Lane half-width.
    pub lane_half_width: f64,
    /// Centerline tolerance (four-level only).
    pub centerline_tol: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub v_ref: f64,
    pub obstacle_radius: f64,
    pub obstacle_s_range: (f64, f64),
    pub obstacle_d_range: (f64, f64),
    pub dt: f64,
    pub horizon: usize,
    pub noise_frac: f64,
    pub expert_kappa: (f64, f64),
    /// Obstacle radius inflation for control constraints only (discrete-time
    /// robustness margin).
    pub enforce_margin_obstacle: f64,
    /// Shrinkage of the enforced lane/centerline half-widths relative to the
    /// measured ones.
    pub enforce_margin_lane: f64,
    /// Per-channel actuator saturation |u_j| <= limit (steer rate, accel).
    pub control_limits: Vec<f64>,
}

impl Default for DrivingConfig {
    fn default() -> Self {
        Self {
            four_level: false,
            bicycle: BicycleParams::default(),
            lane_half_width: 2.0,
            centerline_tol: 0.5,
            v_min: 2.0,
            v_max: 12.0,
            v_ref: 7.0,
            obstacle_radius: 1.8,
            obstacle_s_range: (20.0, 30.0),
            obstacle_d_range: (-0.3, 0.3),
            dt: 0.05,
            horizon: 400,
            noise_frac: 0.1,
            expert_kappa: (1.0, 1.0),
            enforce_margin_obstacle: 0.6,
            enforce_margin_lane: 0.1,
            control_limits: vec![0.8, 4.0],
        }
    }
}

impl ScenarioConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioConfig::Navigation(_) => "navigation",
            ScenarioConfig::Manipulation(_) => "manipulation",
            ScenarioConfig::Driving(c) => {
                if c.four_level {
                    "driving4"
                } else {
                    "driving2"
                }
            }
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "navigation" => Some(ScenarioConfig::Navigation(NavigationConfig::default())),
            "manipulation" => Some(ScenarioConfig::Manipulation(ManipulationConfig::default())),
            "driving2" => Some(ScenarioConfig::Driving(DrivingConfig::default())),
            "driving4" => Some(ScenarioConfig::Driving(DrivingConfig {
                four_level: true,
                ..DrivingConfig::default()
            })),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

enum SystemModel {
    Unicycle(Unicycle),
    Arm(TwoLinkArm),
    Bicycle(CurvilinearBicycle),
}

/// Episode-level task context: initial state and goal features. The obstacle
/// layout is per-episode for driving and fixed by config otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub x0: Vec<f64>,
    pub goal: Vec<f64>,
    /// Driving only: per-episode obstacle (s0, d0).
    pub obstacle: Option<(f64, f64)>,
}

/// A benchmark system bound to its barriers, poset, and reference
/// controller.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub poset: SafetyPoset,
    system: SystemModel,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Self {
        let (poset, system) = match &config {
            ScenarioConfig::Navigation(_) => {
                (navigation_poset(), SystemModel::Unicycle(Unicycle))
            }
            ScenarioConfig::Manipulation(_) => (manipulation_poset(), SystemModel::Arm(TwoLinkArm)),
            ScenarioConfig::Driving(c) => {
                let poset = if c.four_level { driving4_poset() } else { driving2_poset() };
                (poset, SystemModel::Bicycle(CurvilinearBicycle { params: c.bicycle.clone() }))
            }
        };
        Self { config, poset, system }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        ScenarioConfig::by_name(name).map(Self::new)
    }

    pub fn name(&self) -> &'static str {
        self.config.name()
    }

    pub fn system(&self) -> &dyn ControlAffine {
        match &self.system {
            SystemModel::Unicycle(s) => s,
            SystemModel::Arm(s) => s,
            SystemModel::Bicycle(s) => s,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.system().state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.system().control_dim()
    }

    pub fn n_constraints(&self) -> usize {
        self.poset.len()
    }

    pub fn dt(&self) -> f64 {
        match &self.config {
            ScenarioConfig::Navigation(c) => c.dt,
            ScenarioConfig::Manipulation(c) => c.dt,
            ScenarioConfig::Driving(c) => c.dt,
        }
    }

    pub fn horizon(&self) -> usize {
        match &self.config {
            ScenarioConfig::Navigation(c) => c.horizon,
            ScenarioConfig::Manipulation(c) => c.horizon,
            ScenarioConfig::Driving(c) => c.horizon,
        }
    }

    pub fn noise_frac(&self) -> f64 {
        match &self.config {
            ScenarioConfig::Navigation(c) => c.noise_frac,
            ScenarioConfig::Manipulation(c) => c.noise_frac,
            ScenarioConfig::Driving(c) => c.noise_frac,
        }
    }

    pub fn expert_gains(&self) -> Vec<Gains> {
        let (k1, k2) = match &self.config {
            ScenarioConfig::Navigation(c) => c.expert_kappa,
            ScenarioConfig::Manipulation(c) => c.expert_kappa,
            ScenarioConfig::Driving(c) => c.expert_kappa,
        };
        vec![Gains::from_effective(k1, k2); self.n_constraints()]
    }

    pub fn constraint_labels(&self) -> Vec<String> {
        match &self.config {
            ScenarioConfig::Navigation(c) => {
                (0..c.obstacles.len()).map(|i| format!("obstacle{}", i)).collect()
            }
            ScenarioConfig::Manipulation(_) => {
                vec!["obstacle".into(), "jointMin".into(), "jointMax".into()]
            }
            ScenarioConfig::Driving(c) => {
                if c.four_level {
                    vec![
                        "centerL".into(),
                        "centerR".into(),
                        "vMin".into(),
                        "vMax".into(),
                        "laneL".into(),
                        "laneR".into(),
                        "obstacle".into(),
                    ]
                } else {
                    vec!["laneL".into(), "laneR".into(), "obstacle".into()]
                }
            }
        }
    }

    /// Builds the barrier set for an episode. Driving obstacles live in the
    /// episode; everything else is config-fixed.
    pub fn barriers(&self, episode: &Episode) -> Vec<Box<dyn Barrier>> {
        self.build_barriers(episode, false)
    }

    /// Barrier set used to compile control constraints: the same geometry as
    /// [`Scenario::barriers`] but tightened by the configured enforcement
    /// margins. Measurement always uses the unmargined barriers.
    pub fn control_barriers(&self, episode: &Episode) -> Vec<Box<dyn Barrier>> {
        self.build_barriers(episode, true)
    }

    fn build_barriers(&self, episode: &Episode, enforce: bool) -> Vec<Box<dyn Barrier>> {
        match &self.config {
            ScenarioConfig::Navigation(c) => {
                let margin = if enforce { c.enforce_margin } else { 0.0 };
                c.obstacles
                    .iter()
                    .map(|o| {
                        Box::new(UnicycleObstacleBarrier {
                            x0: o.x,
                            y0: o.y,
                            radius: o.radius + margin,
                        }) as Box<dyn Barrier>
                    })
                    .collect()
            }
            ScenarioConfig::Manipulation(c) => {
                let (m_obs, m_phi) = if enforce {
                    (c.enforce_margin_obstacle, c.enforce_margin_phi)
                } else {
                    (0.0, 0.0)
                };
                vec![
                    Box::new(TipObstacleBarrier {
                        x0: c.obstacle.x,
                        y0: c.obstacle.y,
                        radius: c.obstacle.radius + m_obs,
                        l1: c.l1,
                        l2: c.l2,
                    }),
                    Box::new(JointAngleMinBarrier { phi_min: c.phi_min + m_phi }),
                    Box::new(JointAngleMaxBarrier { phi_max: c.phi_max - m_phi }),
                ]
            }
            ScenarioConfig::Driving(c) => {
                let (m_obs, m_lane) = if enforce {
                    (c.enforce_margin_obstacle, c.enforce_margin_lane)
                } else {
                    (0.0, 0.0)
                };
                let (s0, d0) = episode.obstacle.unwrap_or((1e6, 0.0));
                let obstacle = Box::new(CurvilinearObstacleBarrier {
                    s0,
                    d0,
                    radius: c.obstacle_radius + m_obs,
                    params: c.bicycle.clone(),
                }) as Box<dyn Barrier>;
                let lane_l =
                    Box::new(LateralBarrier::left(c.lane_half_width - m_lane, c.bicycle.clone()))
                        as Box<dyn Barrier>;
                let lane_r =
                    Box::new(LateralBarrier::right(c.lane_half_width - m_lane, c.bicycle.clone()))
                        as Box<dyn Barrier>;
                if c.four_level {
                    vec![
                        Box::new(LateralBarrier::left(
                            c.centerline_tol - m_lane,
                            c.bicycle.clone(),
                        )),
                        Box::new(LateralBarrier::right(
                            c.centerline_tol - m_lane,
                            c.bicycle.clone(),
                        )),
                        Box::new(SpeedMinBarrier { v_min: c.v_min }),
                        Box::new(SpeedMaxBarrier { v_max: c.v_max }),
                        lane_l,
                        lane_r,
                        obstacle,
                    ]
                } else {
                    vec![lane_l, lane_r, obstacle]
                }
            }
        }
    }

    pub fn barrier_values(&self, x: &[f64], episode: &Episode) -> Vec<f64> {
        self.barriers(episode).iter().map(|b| b.value(x)).collect()
    }

    pub fn compile_halfspaces(
        &self,
        x: &[f64],
        gains: &[Gains],
        episode: &Episode,
    ) -> Result<Vec<Halfspace>, GeometryError> {
        self.control_barriers(episode)
            .iter()
            .enumerate()
            .map(|(id, b)| compile_halfspace(b.as_ref(), &gains[id], x, id))
            .collect()
    }

    /// Per-channel actuator saturation limits applied by the plant.
    pub fn control_limits(&self) -> Vec<f64> {
        match &self.config {
            ScenarioConfig::Navigation(c) => c.control_limits.clone(),
            ScenarioConfig::Manipulation(c) => c.control_limits.clone(),
            ScenarioConfig::Driving(c) => c.control_limits.clone(),
        }
    }

    /// Actuator saturation expressed as control halfspaces (u_j >= -lim and
    /// -u_j >= -lim), with constraint ids continuing after `start_id`.
    pub fn bound_halfspaces(&self, start_id: usize) -> Vec<Halfspace> {
        let m = self.control_dim();
        let limits = self.control_limits();
        let mut out = Vec::with_capacity(2 * m);
        for (j, &lim) in limits.iter().enumerate().take(m) {
            let mut lo = vec![0.0; m];
            lo[j] = 1.0;
            out.push(Halfspace { a: lo, c: -lim, constraint_id: start_id + 2 * j });
            let mut hi = vec![0.0; m];
            hi[j] = -1.0;
            out.push(Halfspace { a: hi, c: -lim, constraint_id: start_id + 2 * j + 1 });
        }
        out
    }

    /// Constraint indices whose minimum defines the task-level safety
    /// margin (obstacle constraints).
    pub fn safety_indices(&self) -> Vec<usize> {
        match &self.config {
            ScenarioConfig::Navigation(c) => (0..c.obstacles.len()).collect(),
            ScenarioConfig::Manipulation(_) => vec![0],
            ScenarioConfig::Driving(c) => vec![if c.four_level { 6 } else { 2 }],
        }
    }

    /// Lane-boundary constraint indices (driving only).
    pub fn lane_indices(&self) -> Option<(usize, usize)> {
        match &self.config {
            ScenarioConfig::Driving(c) => Some(if c.four_level { (4, 5) } else { (0, 1) }),
            _ => None,
        }
    }

    /// Joint-angle limits (manipulation only).
    pub fn phi_limits(&self) -> Option<(f64, f64)> {
        match &self.config {
            ScenarioConfig::Manipulation(c) => Some((c.phi_min, c.phi_max)),
            _ => None,
        }
    }

    pub fn derivative(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        self.system().derivative(x, u)
    }

    /// One explicit-Euler step.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        let dx = self.derivative(x, u)?;
        let next: Vec<f64> = x.iter().zip(&dx).map(|(xi, di)| xi + self.dt() * di).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFiniteState);
        }
        Ok(next)
    }

    pub fn feature_dim(&self) -> usize {
        match &self.config {
            ScenarioConfig::Navigation(_) => 5,
            ScenarioConfig::Manipulation(_) => 6,
            ScenarioConfig::Driving(_) => 5,
        }
    }

    /// Policy input features: state plus goal context.
    pub fn features(&self, x: &[f64], episode: &Episode) -> Vec<f64> {
        match &self.config {
            ScenarioConfig::Navigation(_) => {
                let (gx, gy) = (episode.goal[0], episode.goal[1]);
                vec![gx - x[0], gy - x[1], x[2].cos(), x[2].sin(), x[3]]
            }
            ScenarioConfig::Manipulation(_) => vec![
                x[0],
                x[1],
                x[2],
                x[3],
                episode.goal[0] - x[0],
                episode.goal[1] - x[2],
            ],
            ScenarioConfig::Driving(c) => vec![x[1], x[2], x[3] - c.v_ref, x[4], x[3]],
        }
    }

    /// State-feedback reference controller; the expert projects this
    /// through the hard QP over all scenario constraints.
    pub fn reference_control(&self, x: &[f64], episode: &Episode) -> Vec<f64> {
        match &self.config {
            ScenarioConfig::Navigation(c) => {
                let (dx, dy) = (episode.goal[0] - x[0], episode.goal[1] - x[1]);
                let dist = (dx * dx + dy * dy).sqrt();
                let heading_err = wrap_angle(dy.atan2(dx) - x[2]);
                let v_des = (0.8 * dist).min(c.cruise_speed);
                vec![2.0 * heading_err, 1.5 * (v_des - x[3])]
            }
            ScenarioConfig::Manipulation(_) => {
                let kp = 4.0;
                let kd = 4.0;
                vec![
                    kp * wrap_angle(episode.goal[0] - x[0]) - kd * x[1],
                    kp * wrap_angle(episode.goal[1] - x[2]) - kd * x[3],
                ]
            }
            ScenarioConfig::Driving(c) => {
                let delta_des = -0.12 * x[1] - 0.8 * x[2];
                vec![2.0 * (delta_des - x[4]), 1.0 * (c.v_ref - x[3])]
            }
        }
    }

    /// Samples a test/training episode. Deterministic given the RNG state.
    pub fn sample_episode<R: Rng>(&self, rng: &mut R) -> Episode {
        match &self.config {
            ScenarioConfig::Navigation(c) => {
                let y0 = rng.gen_range(c.start_y_range.0..=c.start_y_range.1);
                let yg = rng.gen_range(c.goal_y_range.0..=c.goal_y_range.1);
                Episode {
                    x0: vec![0.0, y0, 0.0, 1.0],
                    goal: vec![c.goal_x, yg],
                    obstacle: None,
                }
            }
            ScenarioConfig::Manipulation(c) => {
                // start folded near phi = 0, goal spread toward the obstacle
                // side; goal phi occasionally exceeds the joint window
                let t1 = rng.gen_range(-0.4..0.4);
                let t2 = t1 + rng.gen_range(-0.3..0.3);
                let g1 = rng.gen_range(0.2..1.2);
                let g2 = g1 + rng.gen_range(0.6..2.1);
                let _ = c;
                Episode { x0: vec![t1, 0.0, t2, 0.0], goal: vec![g1, g2], obstacle: None }
            }
            ScenarioConfig::Driving(c) => {
                let s0 = rng.gen_range(0.0..10.0);
                let d = rng.gen_range(-0.5..0.5);
                let ds = rng.gen_range(c.obstacle_s_range.0..=c.obstacle_s_range.1);
                let d_obs = rng.gen_range(c.obstacle_d_range.0..=c.obstacle_d_range.1);
                Episode {
                    x0: vec![s0, d, 0.0, c.v_ref, 0.0],
                    goal: vec![c.v_ref],
                    obstacle: Some((s0 + ds, d_obs)),
                }
            }
        }
    }

    /// Control scale per channel, used to size the 10% execution noise.
    /// Defined as the per-channel max |u| over an expert dataset; this is a
    /// fallback used before a dataset exists.
    pub fn nominal_control_scale(&self) -> Vec<f64> {
        match &self.config {
            ScenarioConfig::Navigation(_) => vec![2.0, 2.0],
            ScenarioConfig::Manipulation(_) => vec![4.0, 4.0],
            ScenarioConfig::Driving(_) => vec![1.0, 5.0],
        }
    }

    /// Head extensions: canonical lexicographic enumeration first, cycling
    /// when more heads than extensions are requested.
    pub fn head_extensions(&self, h: usize) -> Vec<LinearExtension> {
        let base = self.poset.enumerate_linear_extensions(h.max(1));
        (0..h).map(|i| base[i % base.len()].clone()).collect()
    }

    pub fn default_head_count(&self) -> usize {
        match &self.config {
            ScenarioConfig::Navigation(_) => 6,
            ScenarioConfig::Manipulation(_) => 2,
            ScenarioConfig::Driving(_) => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::isotropy_deviation;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FD_STEP: f64 = 1e-6;

    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += FD_STEP;
                xm[i] -= FD_STEP;
                (f(&xp) - f(&xm)) / (2.0 * FD_STEP)
            })
            .collect()
    }

    /// Checks all hand-coded Lie derivatives of a barrier against finite
    /// differences of its value through the system fields.
    fn check_barrier_lie_derivatives(
        barrier: &dyn Barrier,
        system: &dyn ControlAffine,
        x: &[f64],
        rel_tol: f64,
    ) {
        let f = system.drift(x).unwrap();
        let g = system.input_map(x).unwrap();
        let m = system.control_dim();

        let grad_b = fd_grad(&|y| barrier.value(y), x);
        let lie_f_fd = crate::linalg::dot(&grad_b, &f);
        let scale = lie_f_fd.abs().max(1.0);
        assert!(
            (barrier.lie_f(x) - lie_f_fd).abs() / scale <= rel_tol,
            "lie_f {} vs fd {}",
            barrier.lie_f(x),
            lie_f_fd
        );

        let lie_g = barrier.lie_g(x);
        for j in 0..m {
            let col: Vec<f64> = g.iter().map(|row| row[j]).collect();
            let fd = crate::linalg::dot(&grad_b, &col);
            assert!((lie_g[j] - fd).abs() / fd.abs().max(1.0) <= rel_tol);
        }

        if barrier.kind() == BarrierKind::SecondOrder {
            let grad_lf = fd_grad(&|y| barrier.lie_f(y), x);
            let lf2_fd = crate::linalg::dot(&grad_lf, &f);
            assert!(
                (barrier.lie_f2(x) - lf2_fd).abs() / lf2_fd.abs().max(1.0) <= rel_tol,
                "lie_f2 {} vs fd {}",
                barrier.lie_f2(x),
                lf2_fd
            );
            let lglf = barrier.lie_g_lie_f(x);
            for j in 0..m {
                let col: Vec<f64> = g.iter().map(|row| row[j]).collect();
                let fd = crate::linalg::dot(&grad_lf, &col);
                assert!(
                    (lglf[j] - fd).abs() / fd.abs().max(1.0) <= rel_tol,
                    "lie_g_lie_f[{}] {} vs fd {}",
                    j,
                    lglf[j],
                    fd
                );
            }
        }
    }

    #[test]
    fn unicycle_field_examples() {
        let sys = Unicycle;
        let d = sys.derivative(&[0.0, 0.0, 0.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(d, vec![1.0, 0.0, 0.0, 0.0]);

        let d = sys
            .derivative(&[0.0, 0.0, std::f64::consts::FRAC_PI_2, 2.0], &[0.5, -1.0])
            .unwrap();
        assert_relative_eq!(d[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(d[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(d[2], 0.5, epsilon = 1e-12);
        assert_relative_eq!(d[3], -1.0, epsilon = 1e-12);

        let d = sys.derivative(&[1.0, 2.0, 0.7, 0.0], &[0.0, 0.0]).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unicycle_obstacle_barrier_values() {
        let b = UnicycleObstacleBarrier { x0: 3.0, y0: 0.0, radius: 1.0 };
        assert_relative_eq!(b.value(&[0.0, 0.0, 0.0, 0.0]), 8.0, epsilon = 1e-12);
        assert_relative_eq!(b.value(&[2.0, 0.0, 0.3, 1.0]), 0.0, epsilon = 1e-12);
        assert_relative_eq!(b.value(&[3.0, 0.0, 0.0, 0.0]), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn unicycle_first_order_compile_is_degree_mismatch() {
        // L_g b = 0: position channels are unactuated.
        struct FirstOrderView(UnicycleObstacleBarrier);
        impl Barrier for FirstOrderView {
            fn kind(&self) -> BarrierKind {
                BarrierKind::FirstOrder
            }
            fn value(&self, x: &[f64]) -> f64 {
                self.0.value(x)
            }
            fn lie_f(&self, x: &[f64]) -> f64 {
                self.0.lie_f(x)
            }
            fn lie_g(&self, x: &[f64]) -> Vec<f64> {
                self.0.lie_g(x)
            }
        }
        let b = FirstOrderView(UnicycleObstacleBarrier { x0: 3.0, y0: 0.0, radius: 1.0 });
        let err = compile_halfspace(&b, &Gains::default(), &[0.0, 0.0, 0.0, 1.0], 0).unwrap_err();
        assert!(matches!(err, GeometryError::RelativeDegreeMismatch { constraint_id: 0 }));
    }

    #[test]
    fn manipulator_field_and_wrap() {
        let sys = TwoLinkArm;
        let d = sys.derivative(&[0.0, 1.0, 0.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(d, vec![1.0, 0.0, -1.0, 0.0]);
        let d = sys.derivative(&[0.1, 0.0, 0.2, 0.0], &[2.0, 3.0]).unwrap();
        assert_eq!(d[1], 2.0);
        assert_eq!(d[3], 3.0);

        let pi = std::f64::consts::PI;
        assert_relative_eq!(relative_joint_angle(&[0.0, 0.0, 3.0 * pi, 0.0]), -pi, epsilon = 1e-12);
    }

    #[test]
    fn tip_barrier_boundary_example() {
        let b = TipObstacleBarrier { x0: 3.0, y0: 0.0, radius: 1.0, l1: 1.0, l2: 1.0 };
        assert_relative_eq!(b.value(&[0.0, 0.0, 0.0, 0.0]), 0.0, epsilon = 1e-12);
        let far = TipObstacleBarrier { x0: 100.0, y0: 0.0, radius: 1.0, l1: 1.0, l2: 1.0 };
        assert!(far.value(&[0.5, 0.0, 1.0, 0.0]) > 9000.0);
    }

    #[test]
    fn joint_limit_normals() {
        let x = [0.2, 0.1, 0.5, -0.3];
        let bmin = JointAngleMinBarrier { phi_min: -2.0 };
        let bmax = JointAngleMaxBarrier { phi_max: 2.0 };
        assert_eq!(bmin.lie_g_lie_f(&x), vec![-1.0, 1.0]);
        assert_eq!(bmax.lie_g_lie_f(&x), vec![1.0, -1.0]);
        // midpoint symmetry
        let mid = [0.0, 0.0, 0.0, 0.0];
        assert_relative_eq!(bmin.value(&mid), bmax.value(&mid), epsilon = 1e-12);
        // phi at the max limit
        let at_max = [0.0, 0.0, 2.0, 0.0];
        assert_relative_eq!(bmax.value(&at_max), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn bicycle_straight_track() {
        let sys = CurvilinearBicycle { params: BicycleParams::default() };
        let d = sys.derivative(&[0.0, 0.0, 0.0, 5.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(d[0], 5.0, epsilon = 1e-12);
        assert_relative_eq!(d[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(d[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn bicycle_frame_singularity() {
        let params = BicycleParams { track: vec![(1e9, 0.5)], ..BicycleParams::default() };
        let sys = CurvilinearBicycle { params };
        let err = sys.derivative(&[0.0, 2.0, 0.0, 5.0, 0.0], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, DynamicsError::FrameSingularity { .. }));
    }

    #[test]
    fn positive_steering_turns_left_on_straight_track() {
        let sys = CurvilinearBicycle { params: BicycleParams::default() };
        let d = sys.derivative(&[0.0, 0.0, 0.0, 5.0, 0.3], &[0.0, 0.0]).unwrap();
        assert!(d[2] > 0.0, "mu_dot = {}", d[2]);
    }

    #[test]
    fn lie_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let uni = Unicycle;
        let arm = TwoLinkArm;
        let bike = CurvilinearBicycle { params: BicycleParams::default() };
        for _ in 0..1000 {
            let xu: Vec<f64> = vec![
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.2..3.0),
            ];
            let ob = UnicycleObstacleBarrier {
                x0: rng.gen_range(-2.0..2.0),
                y0: rng.gen_range(-2.0..2.0),
                radius: 1.0,
            };
            check_barrier_lie_derivatives(&ob, &uni, &xu, 1e-5);

            let xa: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let tip = TipObstacleBarrier {
                x0: rng.gen_range(-2.0..2.0),
                y0: rng.gen_range(-2.0..2.0),
                radius: 0.5,
                l1: 1.0,
                l2: 1.0,
            };
            check_barrier_lie_derivatives(&tip, &arm, &xa, 1e-5);
            check_barrier_lie_derivatives(&JointAngleMinBarrier { phi_min: -2.0 }, &arm, &xa, 1e-5);
            check_barrier_lie_derivatives(&JointAngleMaxBarrier { phi_max: 2.0 }, &arm, &xa, 1e-5);

            let xb: Vec<f64> = vec![
                rng.gen_range(0.0..50.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(2.0..10.0),
                rng.gen_range(-0.5..0.5),
            ];
            let col = CurvilinearObstacleBarrier {
                s0: rng.gen_range(0.0..50.0),
                d0: rng.gen_range(-1.0..1.0),
                radius: 1.0,
                params: BicycleParams::default(),
            };
            check_barrier_lie_derivatives(&col, &bike, &xb, 1e-5);
            check_barrier_lie_derivatives(
                &LateralBarrier::left(2.0, BicycleParams::default()),
                &bike,
                &xb,
                1e-5,
            );
            check_barrier_lie_derivatives(
                &LateralBarrier::right(2.0, BicycleParams::default()),
                &bike,
                &xb,
                1e-5,
            );
            check_barrier_lie_derivatives(&SpeedMaxBarrier { v_max: 12.0 }, &bike, &xb, 1e-5);
            check_barrier_lie_derivatives(&SpeedMinBarrier { v_min: 2.0 }, &bike, &xb, 1e-5);
        }
    }

    #[test]
    fn speed_barrier_halfspace_sign() {
        let cfg = DrivingConfig::default();
        let b = SpeedMaxBarrier { v_max: cfg.v_max };
        let kappa = 1.5;
        let g = Gains::from_effective(kappa, 1.0);
        let x = [0.0, 0.0, 0.0, 10.0, 0.0];
        let h = compile_halfspace(&b, &g, &x, 0).unwrap();
        assert_eq!(h.a, vec![0.0, -1.0]);
        // a.u >= c  <=>  u2 <= kappa (v_max - v)
        assert_relative_eq!(h.c, -kappa * (cfg.v_max - 10.0), epsilon = 1e-9);
    }

    #[test]
    fn isotropy_per_system() {
        let arm = TwoLinkArm;
        let g = arm.config_block(&[0.0; 4]).unwrap();
        assert_relative_eq!(isotropy_deviation(&g), 0.0, epsilon = 1e-15);

        let uni = Unicycle;
        let gu = uni.config_block(&[0.0, 0.0, 0.3, 1.0]).unwrap();
        // heading/speed block of the unicycle is identity in this encoding
        assert_relative_eq!(isotropy_deviation(&gu), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn euler_rollout_conserves_invariants_with_zero_control() {
        let nav = Scenario::by_name("navigation").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = nav.sample_episode(&mut rng);
        let mut x = ep.x0.clone();
        for _ in 0..100 {
            x = nav.step(&x, &[0.0, 0.0]).unwrap();
        }
        assert_relative_eq!(x[3], ep.x0[3], epsilon = 1e-12); // v constant

        let arm = Scenario::by_name("manipulation").unwrap();
        let mut y = vec![0.1, 0.4, -0.2, 0.3];
        for _ in 0..100 {
            y = arm.step(&y, &[0.0, 0.0]).unwrap();
        }
        assert_relative_eq!(y[1], 0.4, epsilon = 1e-12);
        assert_relative_eq!(y[3], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn scenario_posets_shapes() {
        assert_eq!(navigation_poset().count_linear_extensions(), 6);
        assert_eq!(manipulation_poset().count_linear_extensions(), 2);
        assert_eq!(driving2_poset().count_linear_extensions(), 2);
        let d4 = driving4_poset();
        assert_eq!(d4.maximal_elements(), vec![6]);
        // tiers are internally incomparable
        assert!(d4.incomparable(0, 1).unwrap());
        assert!(d4.incomparable(2, 3).unwrap());
        assert!(d4.incomparable(4, 5).unwrap());
        assert!(d4.precedes(0, 6));
    }

    #[test]
    fn manipulation_extensions_start_with_obstacle() {
        let m = Scenario::by_name("manipulation").unwrap();
        for e in m.head_extensions(2) {
            assert_eq!(e.order()[0], 0);
        }
    }

    #[test]
    fn scenario_config_round_trip() {
        for name in ["navigation", "manipulation", "driving2", "driving4"] {
            let cfg = ScenarioConfig::by_name(name).unwrap();
            assert_eq!(cfg.name(), name);
            let json = serde_json::to_string(&cfg).unwrap();
            let back: ScenarioConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(back.name(), name);
        }
    }

    #[test]
    fn compiled_halfspaces_cover_all_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for name in ["navigation", "manipulation", "driving2", "driving4"] {
            let sc = Scenario::by_name(name).unwrap();
            let ep = sc.sample_episode(&mut rng);
            let gains = sc.expert_gains();
            let hs = sc.compile_halfspaces(&ep.x0, &gains, &ep).unwrap();
            assert_eq!(hs.len(), sc.n_constraints());
            for (i, h) in hs.iter().enumerate() {
                assert_eq!(h.constraint_id, i);
            }
        }
    }
}
