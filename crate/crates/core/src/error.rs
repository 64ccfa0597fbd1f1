use thiserror::Error;

use crate::characteristics::ExitRecord;
use crate::geometry::Projection;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("level-set gradient vanishes (|grad xi| = {norm:.3e})")]
    DegenerateGradient { norm: f64 },

    #[error("point lies {distance:.4} from the boundary, outside the projection collar")]
    OutsideCollar { distance: f64, candidate: Box<Projection> },

    #[error("boundary chart radius {radius:.3e} is below the floor {floor:.3e}")]
    ChartRadiusTooSmall { radius: f64, floor: f64 },

    #[error("trajectory left the domain at t = {:.6}", .0.exit_time)]
    ExitedDomain(Box<ExitRecord>),

    #[error("no boundary exit within horizon {horizon:.4}")]
    NoExitWithinHorizon { horizon: f64 },

    #[error("trajectory touches the boundary tangentially near xi = {xi:.3e}")]
    GrazingAmbiguous { xi: f64 },

    #[error("exit is grazing: |n . v_b| = {normal_velocity:.3e}")]
    GrazingSingularity { normal_velocity: f64 },

    #[error("weight radicand is negative ({value:.3e}); sign condition or convexity violated")]
    NegativeRadicand { value: f64 },

    #[error("quadrature under-resolved: {coarse:.6e} vs {fine:.6e} (tolerance {tolerance:.1e})")]
    QuadratureUnderresolved {
        coarse: f64,
        fine: f64,
        tolerance: f64,
    },

    #[error("exponent outside admissible window: {0}")]
    AdmissibilityViolation(String),

    #[error("diffuse-cycle truncation error {estimate:.3e} exceeds tolerance {tolerance:.1e}")]
    CycleBudgetExceeded { estimate: f64, tolerance: f64 },

    #[error("Neumann compatibility violated: integral of (rho - rho0) = {integral:.3e}")]
    CompatibilityViolation { integral: f64 },

    #[error("iterative solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    SolverDiverged { residual: f64, iterations: usize },

    #[error("config error at `{key}`: {message}")]
    Schema { key: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
