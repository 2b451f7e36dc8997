//! Chart-atlas Riemannian manifolds with boundary, at desk scale.
//!
//! The crate builds discretized manifolds-with-boundary out of ball / half-ball
//! coordinate charts carrying symbolic metric coefficient fields, glues two of
//! them along a boundary diffeomorphism, extends the metric of the first past
//! the interface, constructs a (1+eps)-Lipschitz collar reflection, and applies
//! a conformal deformation driven by annulus-crossing certificates so that the
//! resulting metric is geodesically complete up to the computational window.
//! Completeness and curvature diagnostics (length spaces, Hopf-Rinow proxies,
//! geodesic shooting, Riccati evolution, exhaustion/cutoff fields) run on the
//! same mesh substrate.

pub mod atlas;
pub mod cli;
pub mod complete;
pub mod expr;
pub mod extend;
pub mod field;
pub mod geodesy;
pub mod glue;
pub mod lengthspace;
pub mod linalg;
pub mod report;
pub mod scenario;
pub mod specfile;

pub use expr::ExprAst;
