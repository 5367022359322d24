//! Deformation-field error metrics and marker matching.

use serde::{Deserialize, Serialize};

use crate::deform::DeformationModel;
use crate::error::{Error, Result};
use crate::geometry::SampleBox;
use crate::markers::MarkerSet;
use crate::scalar::Scalar;

/// Squared displacement-difference field sampled on a regular grid at t = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorField<S> {
    /// Grid nodes per axis; degenerate axes hold one node.
    pub grid_shape: [usize; 3],
    pub region: SampleBox<S>,
    /// Node spacing per axis (zero on degenerate axes).
    pub spacing: [S; 3],
    /// Values in x-fastest order: index = (iz·ny + iy)·nx + ix.
    pub values: Vec<S>,
}

impl<S: Scalar> ErrorField<S> {
    pub fn mean(&self) -> S {
        let mut acc = S::zero();
        for v in &self.values {
            acc += *v;
        }
        acc / S::from_usize_c(self.values.len())
    }

    fn axis_nodes(region: &SampleBox<S>, axis: usize, n: usize) -> Vec<S> {
        let lo = region.lo[axis];
        let hi = region.hi[axis];
        if n == 1 || hi <= lo {
            return vec![(lo + hi) / S::from_f64_c(2.0)];
        }
        (0..n)
            .map(|i| lo + (hi - lo) * S::from_usize_c(i) / S::from_usize_c(n - 1))
            .collect()
    }

    /// Value at the grid node nearest to `p`; `p` must lie inside the region.
    pub fn nearest_value(&self, p: &[S; 3]) -> Result<S> {
        if !self.region.contains(p) {
            return Err(Error::MarkerOutsideGrid {
                index: 0,
                location: p.iter().map(|c| c.to_f64().unwrap_or(f64::NAN)).collect(),
            });
        }
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let n = self.grid_shape[a];
            if n == 1 {
                continue;
            }
            let rel = (p[a] - self.region.lo[a]) / (self.region.hi[a] - self.region.lo[a]);
            let i = (rel * S::from_usize_c(n - 1)).round().to_f64().unwrap() as usize;
            idx[a] = i.min(n - 1);
        }
        let [nx, ny, _] = self.grid_shape;
        Ok(self.values[(idx[2] * ny + idx[1]) * nx + idx[0]])
    }
}

/// Pointwise squared norm of the difference between two displacement
/// fields at t = 1, over a grid spanning `region`.
pub fn deformation_error_field<S: Scalar>(
    gt: &DeformationModel<S>,
    est: &DeformationModel<S>,
    region: &SampleBox<S>,
    grid_shape: [usize; 3],
) -> Result<ErrorField<S>> {
    if gt.dim() != est.dim() {
        return Err(Error::ShapeMismatch {
            context: "deformation model dimension".into(),
            expected: format!("{:?}", gt.dim()),
            actual: format!("{:?}", est.dim()),
        });
    }
    if grid_shape.iter().any(|n| *n == 0) {
        return Err(Error::InvalidConfig("empty evaluation grid".into()));
    }
    let xs = ErrorField::axis_nodes(region, 0, grid_shape[0]);
    let ys = ErrorField::axis_nodes(region, 1, grid_shape[1]);
    let zs = ErrorField::axis_nodes(region, 2, grid_shape[2]);
    let one = S::one();
    let mut values = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                values.push(point_error(gt, est, &[x, y, z], one));
            }
        }
    }
    let mut spacing = [S::zero(); 3];
    let shape = [xs.len(), ys.len(), zs.len()];
    for a in 0..3 {
        if shape[a] > 1 {
            spacing[a] = region.extent(a) / S::from_usize_c(shape[a] - 1);
        }
    }
    Ok(ErrorField {
        grid_shape: shape,
        region: *region,
        spacing,
        values,
    })
}

/// `‖D_gt(r, t) - D_est(r, t)‖²` of the full displacement vectors.
pub fn point_error<S: Scalar>(
    gt: &DeformationModel<S>,
    est: &DeformationModel<S>,
    r: &[S; 3],
    t: S,
) -> S {
    let a = gt.eval(r, t);
    let b = est.eval(r, t);
    let mut acc = S::zero();
    for k in 0..3 {
        let d = a[k] - b[k];
        acc += d * d;
    }
    acc
}

/// One matched (estimate, ground truth) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair<S> {
    pub est: usize,
    pub gt: usize,
    pub distance: S,
}

/// Injective marker matching with leftovers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerMatching<S> {
    pub pairs: Vec<MatchedPair<S>>,
    /// Ground-truth markers with no estimate within the radius (misses).
    pub unmatched_gt: Vec<usize>,
    /// Estimated markers matching nothing (spurious detections).
    pub unmatched_est: Vec<usize>,
}

impl<S: Scalar> MarkerMatching<S> {
    pub fn total_distance(&self) -> S {
        let mut acc = S::zero();
        for p in &self.pairs {
            acc += p.distance;
        }
        acc
    }
}

/// Greedy nearest-neighbor injective matching: candidate pairs sorted by
/// ascending distance, accepted while both endpoints are free and the
/// distance is at most `radius`.
pub fn match_markers<S: Scalar>(
    est: &MarkerSet<S>,
    gt: &MarkerSet<S>,
    radius: S,
) -> Result<MarkerMatching<S>> {
    if radius <= S::zero() {
        return Err(Error::InvalidConfig("matching radius must be > 0".into()));
    }
    let mut candidates = Vec::with_capacity(est.len() * gt.len());
    for (i, a) in est.locations().iter().enumerate() {
        for (j, b) in gt.locations().iter().enumerate() {
            let mut d2 = S::zero();
            for k in 0..3 {
                let d = a[k] - b[k];
                d2 += d * d;
            }
            let d = d2.sqrt();
            if d <= radius {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut est_used = vec![false; est.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (d, i, j) in candidates {
        if est_used[i] || gt_used[j] {
            continue;
        }
        est_used[i] = true;
        gt_used[j] = true;
        pairs.push(MatchedPair {
            est: i,
            gt: j,
            distance: d,
        });
    }
    Ok(MarkerMatching {
        pairs,
        unmatched_gt: (0..gt.len()).filter(|j| !gt_used[*j]).collect(),
        unmatched_est: (0..est.len()).filter(|i| !est_used[*i]).collect(),
    })
}

/// Summary metrics of a deformation estimate against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport<S> {
    /// Mean squared field error over the whole grid.
    pub e_global: S,
    /// Mean squared field error at the ground-truth marker locations.
    pub e_markers: S,
    pub grid_shape: [usize; 3],
    pub grid_spacing: [S; 3],
    pub matching: Option<MarkerMatching<S>>,
}

/// Field mean plus nearest-node marker evaluation of a precomputed field.
pub fn summarize_errors<S: Scalar>(
    field: &ErrorField<S>,
    gt_markers: &MarkerSet<S>,
) -> Result<ErrorReport<S>> {
    let mut acc = S::zero();
    for (j, r) in gt_markers.locations().iter().enumerate() {
        acc += field.nearest_value(r).map_err(|_| Error::MarkerOutsideGrid {
            index: j,
            location: r.iter().map(|c| c.to_f64().unwrap_or(f64::NAN)).collect(),
        })?;
    }
    let e_markers = if gt_markers.is_empty() {
        S::zero()
    } else {
        acc / S::from_usize_c(gt_markers.len())
    };
    Ok(ErrorReport {
        e_global: field.mean(),
        e_markers,
        grid_shape: field.grid_shape,
        grid_spacing: field.spacing,
        matching: None,
    })
}

/// Full report straight from the two models: grid mean for the global
/// error and exact polynomial evaluation at each marker (no grid snapping).
pub fn error_report_from_models<S: Scalar>(
    gt: &DeformationModel<S>,
    est: &DeformationModel<S>,
    region: &SampleBox<S>,
    grid_shape: [usize; 3],
    gt_markers: &MarkerSet<S>,
) -> Result<ErrorReport<S>> {
    let field = deformation_error_field(gt, est, region, grid_shape)?;
    for (j, r) in gt_markers.locations().iter().enumerate() {
        if !region.contains(r) {
            return Err(Error::MarkerOutsideGrid {
                index: j,
                location: r.iter().map(|c| c.to_f64().unwrap_or(f64::NAN)).collect(),
            });
        }
    }
    let one = S::one();
    let mut acc = S::zero();
    for r in gt_markers.locations() {
        acc += point_error(gt, est, r, one);
    }
    let e_markers = if gt_markers.is_empty() {
        S::zero()
    } else {
        acc / S::from_usize_c(gt_markers.len())
    };
    Ok(ErrorReport {
        e_global: field.mean(),
        e_markers,
        grid_shape: field.grid_shape,
        grid_spacing: field.spacing,
        matching: None,
    })
}
