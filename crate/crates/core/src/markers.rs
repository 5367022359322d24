//! Weighted point-source marker configurations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Dim, SampleBox};
use crate::scalar::Scalar;

/// A weighted set of point markers inside a declared sample box.
///
/// Locations are `[x, y, z]` in sample units (2D samples keep `y = 0`);
/// weights live in `[0, 1]` and measure how much each marker contributes
/// to the projection data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSet<S> {
    dim: Dim,
    bounds: SampleBox<S>,
    locations: Vec<[S; 3]>,
    weights: Vec<S>,
}

impl<S: Scalar> MarkerSet<S> {
    pub fn empty(dim: Dim, bounds: SampleBox<S>) -> Self {
        Self {
            dim,
            bounds,
            locations: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn new(
        dim: Dim,
        bounds: SampleBox<S>,
        locations: Vec<[S; 3]>,
        weights: Vec<S>,
    ) -> Result<Self> {
        if locations.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                context: "marker locations vs weights".into(),
                expected: format!("{}", locations.len()),
                actual: format!("{}", weights.len()),
            });
        }
        let mut set = Self::empty(dim, bounds);
        for (r, w) in locations.into_iter().zip(weights) {
            set.push(r, w)?;
        }
        Ok(set)
    }

    /// Appends one marker, validating the weight range, the bounding box
    /// and (for 2D) the in-plane constraint `y = 0`.
    pub fn push(&mut self, location: [S; 3], weight: S) -> Result<()> {
        if weight < S::zero() || weight > S::one() || !weight.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "marker weight {weight} outside [0, 1]"
            )));
        }
        if location.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig("non-finite marker location".into()));
        }
        if self.dim == Dim::Two && location[1] != S::zero() {
            return Err(Error::InvalidConfig(
                "2D markers must have y = 0".into(),
            ));
        }
        if !self.bounds.contains(&location) {
            return Err(Error::InvalidConfig(format!(
                "marker location {:?} outside the sample box",
                location.map(|c| c.to_f64().unwrap_or(f64::NAN))
            )));
        }
        self.locations.push(location);
        self.weights.push(weight);
        Ok(())
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn bounds(&self) -> &SampleBox<S> {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn locations(&self) -> &[[S; 3]] {
        &self.locations
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn location(&self, j: usize) -> [S; 3] {
        self.locations[j]
    }

    pub fn weight(&self, j: usize) -> S {
        self.weights[j]
    }

    pub fn set_weights(&mut self, weights: Vec<S>) -> Result<()> {
        if weights.len() != self.locations.len() {
            return Err(Error::ShapeMismatch {
                context: "replacement weights".into(),
                expected: format!("{}", self.locations.len()),
                actual: format!("{}", weights.len()),
            });
        }
        if weights
            .iter()
            .any(|w| *w < S::zero() || *w > S::one() || !w.is_finite())
        {
            return Err(Error::InvalidConfig("weight outside [0, 1]".into()));
        }
        self.weights = weights;
        Ok(())
    }

    /// Replaces marker positions in place (used by support refinement;
    /// refined locations may sit slightly outside the declared box, inside
    /// the refinement region, so only finiteness is enforced here).
    pub fn set_locations(&mut self, locations: Vec<[S; 3]>) -> Result<()> {
        if locations.len() != self.weights.len() {
            return Err(Error::ShapeMismatch {
                context: "replacement locations".into(),
                expected: format!("{}", self.weights.len()),
                actual: format!("{}", locations.len()),
            });
        }
        if locations.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig("non-finite marker location".into()));
        }
        self.locations = locations;
        Ok(())
    }

    /// Removes markers whose weight is strictly below `threshold`,
    /// preserving the order of survivors. Returns how many were removed.
    pub fn prune(&mut self, threshold: S) -> usize {
        let before = self.locations.len();
        let keep: Vec<bool> = self.weights.iter().map(|w| *w >= threshold).collect();
        let mut it = keep.iter();
        self.locations.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.weights.retain(|_| *it.next().unwrap());
        before - self.locations.len()
    }
}
