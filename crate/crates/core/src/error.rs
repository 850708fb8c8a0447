use thiserror::Error;

#[derive(Debug, Error)]
pub enum FsiError {
    #[error("coordinate {x} outside [0, {ell}]")]
    OutOfRange { x: f64, ell: f64 },
    #[error("derivative order {0} not supported (max 3)")]
    BadOrder(usize),
    #[error("infeasible curve: min d/dx eta_1 = {min_slope:e}")]
    Infeasible { min_slope: f64 },
    #[error("eta_1 not monotone near x = {x}")]
    NotMonotone { x: f64 },
    #[error("clamped boundary condition violated: {0}")]
    NotClamped(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("point ({0}, {1}) outside the domain")]
    OutsideDomain(f64, f64),
    #[error("datum has nonzero mean {mean:e} (tolerance {tol:e})")]
    NonzeroMean { mean: f64, tol: f64 },
    #[error("datum support leaves the admissible region: {0}")]
    SupportLeak(String),
    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("linear solver failure: {0}")]
    Solver(String),
    #[error("line search failed after {backtracks} backtracks")]
    LineSearch { backtracks: usize },
    #[error("curve leaves the extension band: max |eta_2| = {max_abs:.6} >= {limit:.6}")]
    BandExit { max_abs: f64, limit: f64 },
    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FsiError>;
