//! Crate-wide error type.

use thiserror::Error;

/// Errors shared by all modules.
#[derive(Debug, Error)]
pub enum DdmresError {
    /// Interval mesh endpoints are not increasing or a node list is invalid.
    #[error("invalid interval mesh: {0}")]
    InvalidInterval(String),

    /// 2-D mesh is structurally invalid (orientation, area, connectivity, flux jump).
    #[error("invalid triangle mesh: {0}")]
    InvalidMesh(String),

    /// A face flux `beta . n` falls in the ambiguous band between the exact-zero
    /// tolerance and the crossing tolerance.
    #[error("ambiguous face classification for face {face}: |beta.n|/|beta| = {relative_flux:e}")]
    AmbiguousFace { face: usize, relative_flux: f64 },

    /// The downstream ordering of a 2-D mesh contains a cycle.
    #[error("flow-order cycle detected; {remaining} triangles unordered")]
    CycleDetected { remaining: usize },

    /// A point lies outside the mesh domain.
    #[error("point {0} outside the mesh domain")]
    OutOfDomain(f64),

    /// Requested polynomial degree is too low for the operation.
    #[error("polynomial degree {got} too low: {context}")]
    DegreeTooLow { got: usize, context: String },

    /// A test space does not satisfy the outflow boundary constraint.
    #[error("nonconforming test space: {0}")]
    NonconformingTestSpace(String),

    /// Gram matrix failed the positive-definiteness check.
    #[error("Gram matrix not positive definite: {0}")]
    SingularGram(String),

    /// The Friedrichs-type positivity assumption does not hold (only the
    /// Omega-filling setting applies) so a priori constants are unavailable.
    #[error("positivity assumption unavailable: {0}")]
    AssumptionUnavailable(String),

    /// Duality map normalization `||v||^(2-q)` is singular (`||v|| = 0`, `eps = 0`).
    #[error("singular duality-map normalization at q = {q}")]
    SingularNormalization { q: f64 },

    /// Newton iteration failed to converge.
    #[error("Newton diverged: {0}")]
    NewtonDiverged(String),

    /// Linear system singular to working precision.
    #[error("singular linear system: {0}")]
    SingularSystem(String),

    /// Advection coefficient changes sign strictly inside a mesh element.
    #[error("advection coefficient vanishes inside element {element}")]
    BetaVanishesInsideElement { element: usize },

    /// 2-D test-function trace data over-determines an element inconsistently.
    #[error("inconsistent trace on element {element}: mismatch {mismatch:e}")]
    InconsistentTrace { element: usize, mismatch: f64 },

    /// Rate fit impossible (non-positive errors or too few rows).
    #[error("degenerate rate fit: {0}")]
    DegenerateFit(String),

    /// Invalid user-supplied configuration or CLI argument.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// File I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
