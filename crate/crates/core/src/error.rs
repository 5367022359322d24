//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context} (expected {expected}, got {actual})")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("decimation factor from eta 1/{from} to 1/{to} is not a positive integer")]
    NonIntegerDecimation { from: u32, to: u32 },

    #[error("detector axis of {pixels} px is not divisible by decimation factor {factor}")]
    IndivisibleAxis { pixels: usize, factor: u32 },

    #[error("no feasible resolution level: {0}")]
    EmptySchedule(String),

    #[error("non-finite gradient for deformation coefficient {term_index} (component {component})")]
    NonFiniteGradient {
        term_index: usize,
        component: usize,
    },

    #[error("non-finite gradient for marker {marker_index}")]
    NonFiniteMarkerGradient { marker_index: usize },

    #[error("could not place {placed} of {requested} markers with minimum separation {min_separation} after {attempts} attempts")]
    PlacementFailed {
        requested: usize,
        placed: usize,
        min_separation: f64,
        attempts: usize,
    },

    #[error("Poisson noise requires non-negative intensities; frame {frame} pixel {pixel} is {value}")]
    NegativePoissonRate {
        frame: usize,
        pixel: usize,
        value: f64,
    },

    #[error("cannot threshold a constant image (value {0})")]
    ConstantImage(f64),

    #[error("trace fit is underdetermined: {unknowns} unknowns but only {observations} observations")]
    Underdetermined {
        unknowns: usize,
        observations: usize,
    },

    #[error("marker {index} at {location:?} lies outside the evaluation grid")]
    MarkerOutsideGrid { index: usize, location: Vec<f64> },

    #[error("in outer iteration {iteration}: {source}")]
    SolverStep {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}
