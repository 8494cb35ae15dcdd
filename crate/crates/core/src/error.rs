use alloc::string::String;
use core::fmt;

/// Failures raised while evaluating a quasi-LPV model or its proxy.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// A vector or matrix argument had the wrong shape.
    Dimension { what: &'static str, expected: usize, found: usize },
    /// The scheduling proxy is undefined at the given state.
    Singular { component: &'static str, value: f64 },
    /// A measured scheduling vector left the scheduling set by more than the clamp tolerance.
    OutsideSchedulingSet { index: usize, value: f64, lower: f64, upper: f64 },
    /// A state left the physical domain of the plant.
    Domain(String),
    /// A configuration value was rejected.
    Invalid(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Dimension { what, expected, found } => {
                write!(f, "dimension mismatch for {what}: expected {expected}, found {found}")
            }
            ModelError::Singular { component, value } => {
                write!(f, "scheduling proxy singular at {component} = {value}")
            }
            ModelError::OutsideSchedulingSet { index, value, lower, upper } => {
                write!(f, "scheduling component {index} = {value} outside [{lower}, {upper}]")
            }
            ModelError::Domain(msg) => write!(f, "state outside plant domain: {msg}"),
            ModelError::Invalid(msg) => write!(f, "invalid model configuration: {msg}"),
        }
    }
}

impl core::error::Error for ModelError {}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), ModelError> {
    if expected == found {
        Ok(())
    } else {
        Err(ModelError::Dimension { what, expected, found })
    }
}
