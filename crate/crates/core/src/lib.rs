//! Solver library for bilevel games with selection (BGS).
//!
//! A bilevel game with selection pairs an upper objective `f(x, y)` with a
//! lower objective `g(x, y)` whose minimizer in `y` may be non-unique and
//! degenerate. The leader minimizes `f(x, φ(x, y))` where the selection map
//! `φ` picks the critical point of `g(x, ·)` reached by gradient descent (or
//! its continuous-time gradient flow) started from `y`. This crate provides:
//!
//! * [`linalg`]: dense symmetric eigendecomposition, PSD pseudo-inverse
//!   application, conjugate gradient, and seeded random spectra;
//! * [`problems`]: the problem-oracle contract and two concrete families
//!   (a degenerate quadratic with closed-form equilibria, and a Mexican-hat
//!   landscape with a critical circle);
//! * [`unroll`]: finite gradient-descent maps and reverse-mode
//!   differentiation of the unrolled upper objective;
//! * [`correction`]: the implicit pseudo-inverse gradient correction that
//!   removes the finite-unrolling bias, with warm-started iterative solvers;
//! * [`solver`]: the outer loop combining warm start, unrolling, optional
//!   correction, and trace recording, plus the standard presets;
//! * [`flow`]: continuous-time verification: gradient-flow integration, the
//!   sensitivity ODE, the implicit Jacobian, and numerical probes for the
//!   Łojasiewicz inequality, the range condition, and exponential decay;
//! * [`check`]: finite-difference verification of every analytic derivative
//!   surface.
//!
//! All randomness flows through explicitly seeded generators ([`linalg::seeded_rng`]);
//! every operation is deterministic given its inputs.

pub mod check;
pub mod correction;
pub mod flow;
pub mod linalg;
pub mod problems;
pub mod solver;
pub mod unroll;

/// Errors shared by all modules.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// Malformed input: dimension mismatch, invalid parameter, non-finite data.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// An iterative routine failed to converge or produced non-finite values.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    /// A matrix required to be positive semi-definite has a genuinely negative eigenvalue.
    #[error("matrix is not positive semi-definite: {0}")]
    NotPsd(String),
    /// An iteration produced non-finite values (step size too large for the landscape).
    #[error("iteration diverged: {0}")]
    Diverged(String),
    /// The requested operation is not available at this problem size.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// The sensitivity system grew without bound (the flow limit is not a stable minimum).
    #[error("sensitivity integration diverged: {0}")]
    SensitivityDiverged(String),
    /// A caller-side precondition was violated.
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    /// The Hessian at the queried point has a negative eigenvalue beyond tolerance.
    #[error("not a local minimum: {0}")]
    NotLocalMin(String),
    /// Not enough data points for the requested fit or estimate.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

pub type Result<T> = std::result::Result<T, Error>;
