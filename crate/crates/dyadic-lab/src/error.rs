use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: d={left_d},M={left_m},R={left_r} vs d={right_d},M={right_m},R={right_r}")]
    GridMismatch {
        left_d: u32,
        left_m: u32,
        left_r: u32,
        right_d: u32,
        right_m: u32,
        right_r: u32,
    },

    #[error("cell level {level} exceeds grid capability (limit {limit})")]
    LevelOutOfRange { level: u32, limit: u32 },

    #[error("invalid cell index: {0}")]
    InvalidCell(String),

    #[error("input must be constant on level-{max_level} cells for this identity to be exact")]
    InputTooFine { max_level: u32 },

    #[error("weight values must be strictly positive (min value {min})")]
    NonPositiveWeight { min: f64 },

    #[error("per-node multiplier magnitude must be < 1 (got {0})")]
    DeltaOutOfRange(f64),

    #[error("power-weight exponent must be > -1 in dimension 1 (got {0})")]
    PowerExponent(f64),

    #[error("coefficient map incomplete: missing entry at level {level}, position {pos}")]
    MissingCoefficient { level: u32, pos: usize },

    #[error("sign pattern entry must be +1 or -1 (got {0})")]
    InvalidSign(f64),

    #[error("negative entry {value} in testing sequence at level {level}, position {pos}")]
    NegativeSequenceEntry { level: u32, pos: usize, value: f64 },

    #[error("map is not linear (relative deviation {0:.3e} on a random triple)")]
    NotLinear(f64),

    #[error("denominator form is singular or not positive definite")]
    SingularDenominator,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
