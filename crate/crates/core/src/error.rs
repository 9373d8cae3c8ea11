use thiserror::Error;

use crate::geometry::Point;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("point ({}, {}) is outside the domain", .0[0], .0[1])]
    PointOutsideDomain(Point),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("point ({}, {}) is too close to the boundary to interpolate", .0[0], .0[1])]
    PointTooCloseToBoundary(Point),
    #[error("stencil at node ({0}, {1}) leaves the domain")]
    StencilExitsDomain(usize, usize),
    #[error("nonpositive value {value} at node {node}")]
    NonpositiveInputValue { node: usize, value: f64 },
    #[error("malformed field header: {0}")]
    MalformedHeader(String),
    #[error("value count mismatch: expected {expected}, found {found}")]
    ValueCountMismatch { expected: usize, found: usize },
    #[error("expression error: {0}")]
    Expression(String),
    #[error("ellipticity violated at ({}, {}): smallest eigenvalue {eig} < {zeta}", .at[0], .at[1])]
    EllipticityViolation { at: Point, eig: f64, zeta: f64 },
    #[error("coefficient a(x) = {value} is not positive at ({}, {})", .at[0], .at[1])]
    NonpositiveSource { at: Point, value: f64 },
    #[error("beta = 1 is not supported (pure eigenvalue problem)")]
    BetaOneRejected,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("Newton iteration diverged: residual {residual:e} after {iterations} iterations")]
    NewtonDivergence { iterations: usize, residual: f64 },
    #[error("positivity lost: min u = {min_u:e}")]
    PositivityLoss { min_u: f64 },
    #[error("linear solve failed: {0}")]
    LinearSolve(String),
    #[error("convergence study needs at least two resolutions")]
    NeedsTwoResolutions,
    #[error("no grid nodes in the requested region")]
    EmptyMask,
    #[error("degenerate hull: {0}")]
    DegenerateHull(String),
    #[error("harmonic concavity is undefined at the audited points")]
    UndefinedHarmonicConcavity,
    #[error("s = {0} reaches the singularity of b")]
    SDomainViolation(f64),
    #[error("maximizer lies within {distance:e} of the boundary (need {required:e})")]
    BoundaryMaximum { distance: f64, required: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("fit refused: {0}")]
    FitRefused(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable kebab-case name of the variant, used in reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidDomain(_) => "invalid-domain",
            Error::PointOutsideDomain(_) => "point-outside-domain",
            Error::InvalidGrid(_) => "invalid-grid",
            Error::PointTooCloseToBoundary(_) => "point-too-close-to-boundary",
            Error::StencilExitsDomain(..) => "stencil-exits-domain",
            Error::NonpositiveInputValue { .. } => "nonpositive-input-value",
            Error::MalformedHeader(_) => "malformed-header",
            Error::ValueCountMismatch { .. } => "value-count-mismatch",
            Error::Expression(_) => "expression",
            Error::EllipticityViolation { .. } => "ellipticity-violation",
            Error::NonpositiveSource { .. } => "nonpositive-source",
            Error::BetaOneRejected => "beta-one-rejected",
            Error::InvalidProblem(_) => "invalid-problem",
            Error::NewtonDivergence { .. } => "newton-divergence",
            Error::PositivityLoss { .. } => "positivity-loss",
            Error::LinearSolve(_) => "linear-solve",
            Error::NeedsTwoResolutions => "needs-two-resolutions",
            Error::EmptyMask => "empty-mask",
            Error::DegenerateHull(_) => "degenerate-hull",
            Error::UndefinedHarmonicConcavity => "undefined-harmonic-concavity",
            Error::SDomainViolation(_) => "s-domain-violation",
            Error::BoundaryMaximum { .. } => "boundary-maximum",
            Error::Config(_) => "config-parse",
            Error::FitRefused(_) => "fit-refused",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
