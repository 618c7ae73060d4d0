//! Numerical laboratory for fractional maximal operators, fractional-maximal
//! distribution functions, Lorentz and Orlicz norms, quasilinear elliptic
//! solvers with obstacles, and an empirical good-λ verification harness.
//!
//! Everything is generic over the scalar type ([`Real`], implemented for `f32`
//! and `f64`). The aliases at the crate root fix the scalar to `f64`.

pub mod distribution;
pub mod funcspaces;
pub mod grid;
pub mod io;
pub mod maximal;
pub mod numeric;
pub mod pde;
pub mod verify;

pub use numeric::Real;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid domain: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty region")]
    EmptyRegion,
    #[error("radius {radius} is below the grid spacing {h}")]
    RadiusTooSmall { radius: f64, h: f64 },
    #[error("order alpha = {0} outside the admissible range")]
    AlphaRange(f64),
    #[error("zero norm: {0}")]
    ZeroNorm(String),
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64, energy: Vec<f64> },
    #[error("infeasible obstacle data: {0}")]
    Infeasible(String),
    #[error("young function check failed: {0}")]
    Young(String),
    #[error("outside the {range}: {detail}")]
    OutOfRange { range: &'static str, detail: String },
    #[error("local comparison constant unavailable: {0}")]
    Unavailable(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Grid = grid::DomainGrid<f64>;
pub type Field = grid::ScalarField<f64>;
pub type VecField = grid::VectorField<f64>;
pub type Radii = maximal::RadiusSet<f64>;
pub type Maximal = maximal::MaximalResult<f64>;
pub type Levels = distribution::LevelGrid<f64>;
pub type Profile = distribution::LevelProfile<f64>;
pub type Young = funcspaces::YoungFn<f64>;
pub type Operator = pde::OperatorSpec<f64>;
pub type Problem = pde::ProblemSpec<f64>;
pub type Solution = pde::SolveReport<f64>;



