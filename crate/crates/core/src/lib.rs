//! Poset-structured safety composition for control-affine systems.
//!
//! Safety constraints are expressed as control barrier functions, compiled
//! per-state into halfspaces in control space, and enforced by closed-form
//! sequential projection along linear extensions of a safety poset. Multiple
//! projection heads are combined by convex mixture or (Gumbel-)hard selection,
//! trained by imitation with analytic gradients, and verified in closed loop
//! against an exact active-set QP oracle.

pub mod composition;
pub mod dynamics;
pub mod geometry;
pub mod learner;
pub mod linalg;
pub mod poset;
pub mod qp;
pub mod sim;

pub use composition::{HeadCombiner, OverrideEvent, ProjectionHead};
pub use geometry::{Gains, Halfspace, ProjectionJacobian};
pub use poset::{LinearExtension, SafetyPoset};
pub use qp::QpProblem;
