use alloc::string::String;
use alloc::vec::Vec;

use crate::expr::{EvalError, ParseError};
use crate::root::RootError;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Root(#[from] RootError),
    #[error("metric is not positive definite at x = {x:?}")]
    MetricDegenerate { x: Vec<f64> },
    #[error("speed {speed:e} is below the floor {floor:e}")]
    SpeedFloor { speed: f64, floor: f64 },
    #[error("dW/dv = {value:e} is below the threshold {threshold:e}")]
    DegenerateDerivative { value: f64, threshold: f64 },
    #[error("force construction requires n >= 3, got n = {0}")]
    Dimension(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0} is not monotone on the working range")]
    NotMonotone(String),
    #[error("tangent frame is rank deficient (Gram determinant {gram:e})")]
    RankDeficient { gram: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("spatial gradient mode does not match the field's declared arguments")]
    ModeMismatch,
    #[error("solution blows up near t = {t}")]
    BlowUp { t: f64 },
    #[error("opaque fields can only be evaluated over f64")]
    NotDifferentiable,
}
