use thiserror::Error;

/// Errors produced by mesh generation, assembly, and the solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid material: {0}")]
    InvalidMaterial(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error(
        "wall thickness {thickness} is not resolvable with {elements_per_cell} elements per cell edge: {detail}"
    )]
    Resolution {
        thickness: f64,
        elements_per_cell: usize,
        detail: String,
    },

    #[error("mesh format error at line {line}: {detail}")]
    MeshFormat { line: usize, detail: String },

    #[error("periodic pairing failed: {0}")]
    Pairing(String),

    #[error("element {element} is inverted (det J = {det_j:.3e} at a quadrature point)")]
    InvertedElement { element: usize, det_j: f64 },

    #[error("inconsistent periodic constraint graph: {0}")]
    Constraint(String),

    #[error(
        "iterative solver did not converge within {iterations} iterations (residual {residual:.3e}, target {target:.3e}){context}"
    )]
    SolverFailure {
        iterations: usize,
        residual: f64,
        target: f64,
        context: String,
    },

    #[error("matrix is not positive definite on the constrained subspace (p^T K p = {curvature:.3e}){context}")]
    IndefiniteSystem { curvature: f64, context: String },

    #[error(
        "cell-problem consistency violated: mean of the second-order source term is {deviation:.3e} relative to the classical tensor scale (tolerance {tolerance:.1e}); the classical tensor passed in does not belong to these fluctuation fields"
    )]
    Consistency { deviation: f64, tolerance: f64 },

    #[error(
        "tensor symmetry violated during Voigt packing: |{lhs} - {rhs}| = {deviation:.3e} exceeds {tolerance:.3e} (worst pair)"
    )]
    Packing {
        lhs: String,
        rhs: String,
        deviation: f64,
        tolerance: f64,
    },

    #[error("specimen specification invalid: {0}")]
    InvalidSpecimen(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
