//! Marker localization and beam-induced deformation estimation for
//! parallel-beam tilt series.
//!
//! The library models fiducial markers as weighted point sources whose
//! projections are Gaussian peaks, and estimates a time-smooth polynomial
//! deformation field directly from the projection images: markers are
//! inserted one at a time by a conditional-gradient step and the marker
//! weights, deformation coefficients and marker positions are refined by
//! block coordinate descent, driven coarse-to-fine over a resolution
//! pyramid. A trace-based doming-model baseline, phantom simulation with
//! Gaussian/Poisson noise, and deformation-field error metrics round out
//! the toolbox.
//!
//! All numerics are generic over the scalar type (`f32` or `f64`) through
//! [`Scalar`]; concrete `f64` aliases are exported at the crate root.

pub mod baseline;
pub mod deform;
pub mod error;
pub mod evaluate;
pub mod forward;
pub mod geometry;
pub mod markers;
pub mod multires;
pub mod optim;
pub mod scalar;
pub mod simulate;
pub mod solver;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use deform::DeformationModel;
pub use forward::TiltStack;
pub use geometry::{Dim, SampleBox, TiltGeometry};
pub use markers::MarkerSet;
pub use multires::ResolutionSchedule;
pub use solver::{AlignmentResult, SolverConfig, SolverState};

/// Default scalar type used by the CLI and the test suites.
pub type Real = f64;

pub type MarkerSet64 = markers::MarkerSet<f64>;
pub type DeformationModel64 = deform::DeformationModel<f64>;
pub type TiltGeometry64 = geometry::TiltGeometry<f64>;
pub type TiltStack64 = forward::TiltStack<f64>;
pub type AlignmentResult64 = solver::AlignmentResult<f64>;

pub type MarkerSet32 = markers::MarkerSet<f32>;
pub type DeformationModel32 = deform::DeformationModel<f32>;
pub type TiltGeometry32 = geometry::TiltGeometry<f32>;
pub type TiltStack32 = forward::TiltStack<f32>;
