//! Discrete-dual minimal-residual (DDMRes) solver for weak advection-reaction
//! problems posed in `L^p` Banach spaces, `1 < p < infinity`.
//!
//! The method seeks `u_n` in a trial space `U_n` minimizing the discrete dual
//! residual norm `|| f - B u_n ||_{(V_m)*}` over a test space `V_m` normed by
//! `W^q`-type norms (`1/p + 1/q = 1`). The minimizer is computed from the
//! equivalent monotone mixed system
//!
//! ```text
//! < J_V(r_m), v > + b(u_n, v) = < f, v >   for all v in V_m,
//! b(w, r_m)                  = 0           for all w in U_n,
//! ```
//!
//! where `J_V` is the duality map of `V_m` and `b` the weak advection-reaction
//! form. The crate provides meshes (1-D intervals, 2-D flow-aligned triangle
//! meshes), discrete spaces, assembly, duality maps, the nonlinear solver,
//! compatible optimal test spaces, and the experiment harness exposed by the
//! `ddmres` binary.

pub mod duality;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod mesh;
pub mod problem;
pub mod solver;
pub mod spaces;

pub use error::DdmresError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, DdmresError>;
