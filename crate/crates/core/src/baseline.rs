//! Doming-model baseline: nonlinear least squares on labelled marker traces.
//!
//! Instead of image data, the baseline consumes the projected location of
//! every marker in every frame (the trace) and fits initial marker
//! positions together with the polynomial deformation coefficients by
//! minimizing the squared trace misfit.

use serde::{Deserialize, Serialize};

use crate::deform::DeformationModel;
use crate::error::{Error, Result};
use crate::forward::projected_locations;
use crate::geometry::{SampleBox, TiltGeometry};
use crate::markers::MarkerSet;
use crate::optim::{minimize_bounded, Bounds, QuasiNewtonConfig};
use crate::scalar::Scalar;

/// Projected marker locations per (frame, marker) with a validity mask;
/// marker indices are consistent across frames (the labelling assumption).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerTraces<S> {
    n_frames: usize,
    /// `positions[j][t]` is the detector location `(u, v)` of marker `j`
    /// at frame `t`; `v` is unused for 2D samples.
    positions: Vec<Vec<[S; 2]>>,
    valid: Vec<Vec<bool>>,
}

impl<S: Scalar> MarkerTraces<S> {
    pub fn new(n_frames: usize, positions: Vec<Vec<[S; 2]>>, valid: Vec<Vec<bool>>) -> Result<Self> {
        if positions.len() != valid.len() {
            return Err(Error::ShapeMismatch {
                context: "trace positions vs validity".into(),
                expected: format!("{}", positions.len()),
                actual: format!("{}", valid.len()),
            });
        }
        for (j, (p, v)) in positions.iter().zip(&valid).enumerate() {
            if p.len() != n_frames || v.len() != n_frames {
                return Err(Error::ShapeMismatch {
                    context: format!("trace of marker {j}"),
                    expected: format!("{n_frames}"),
                    actual: format!("{}/{}", p.len(), v.len()),
                });
            }
        }
        Ok(Self {
            n_frames,
            positions,
            valid,
        })
    }

    pub fn n_markers(&self) -> usize {
        self.positions.len()
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn position(&self, marker: usize, frame: usize) -> [S; 2] {
        self.positions[marker][frame]
    }

    pub fn is_valid(&self, marker: usize, frame: usize) -> bool {
        self.valid[marker][frame]
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().flatten().filter(|v| **v).count()
    }

    pub fn mask_out(&mut self, marker: usize, frame: usize) {
        self.valid[marker][frame] = false;
    }
}

/// Exact traces of a known configuration (simulation ground truth): every
/// entry is the projected deformed marker location, all entries valid.
pub fn generate_traces<S: Scalar>(
    markers: &MarkerSet<S>,
    model: &DeformationModel<S>,
    geometry: &TiltGeometry<S>,
) -> MarkerTraces<S> {
    let n_frames = geometry.n_frames();
    let m = markers.len();
    let mut positions = vec![Vec::with_capacity(n_frames); m];
    for frame in 0..n_frames {
        for (j, q) in projected_locations(markers, model, geometry, frame)
            .into_iter()
            .enumerate()
        {
            positions[j].push(q);
        }
    }
    let valid = vec![vec![true; n_frames]; m];
    MarkerTraces {
        n_frames,
        positions,
        valid,
    }
}

/// Result of the trace fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DmFit<S> {
    pub markers: MarkerSet<S>,
    pub model: DeformationModel<S>,
    /// Final value of the squared trace misfit.
    pub residual: S,
    pub iterations: usize,
}

/// Fits initial marker locations and deformation coefficients to labelled
/// traces by bounded quasi-Newton descent over all unknowns jointly.
///
/// Markers are initialized by back-projecting each first valid observation
/// onto the z = 0 plane (clamped into `sample_box`); coefficients start at
/// zero. `model_template` fixes the polynomial structure; its coefficients
/// are ignored.
pub fn dm_fit<S: Scalar>(
    traces: &MarkerTraces<S>,
    geometry: &TiltGeometry<S>,
    model_template: &DeformationModel<S>,
    sample_box: &SampleBox<S>,
    coefficient_bound: S,
    qn: &QuasiNewtonConfig<S>,
) -> Result<DmFit<S>> {
    let m = traces.n_markers();
    let model0 = model_template.zeroed();
    let free_axes: Vec<usize> = match geometry.dim() {
        crate::geometry::Dim::Two => vec![0, 2],
        crate::geometry::Dim::Three => vec![0, 1, 2],
    };
    let n_free = free_axes.len();
    let unknowns = m * n_free + model0.n_params();
    // Each valid 2D observation constrains one coordinate, 3D two.
    let obs_per_entry = geometry.dim().as_usize() - 1;
    let observations = traces.n_valid() * obs_per_entry;
    if observations < unknowns {
        return Err(Error::Underdetermined {
            unknowns,
            observations,
        });
    }

    // Initialization: invert the projection of the first valid frame with
    // z = 0. For u = x cosθ + z sinθ this gives x = u / cosθ; the tilt-axis
    // coordinate is read off directly.
    let mut init_locations = Vec::with_capacity(m);
    for j in 0..m {
        let frame = (0..traces.n_frames)
            .find(|t| traces.is_valid(j, *t))
            .ok_or_else(|| Error::InvalidConfig(format!("marker {j} has no valid trace entry")))?;
        let q = traces.position(j, frame);
        let theta = geometry.angles_deg()[frame].to_radians();
        let mut r = [S::zero(); 3];
        let cos = theta.cos();
        r[geometry.perp_axis()] = if cos.abs() > S::from_f64_c(1e-6) {
            q[0] / cos
        } else {
            q[0]
        };
        if geometry.dim() == crate::geometry::Dim::Three {
            r[geometry.tilt_axis()] = q[1];
        }
        init_locations.push(sample_box.clamp(&r));
    }

    // Pack [marker coordinates..., deformation parameters...].
    let n_params = model0.n_params();
    let pack_len = m * n_free + n_params;
    let mut x0 = Vec::with_capacity(pack_len);
    for r in &init_locations {
        for &a in &free_axes {
            x0.push(r[a]);
        }
    }
    x0.extend(std::iter::repeat_n(S::zero(), n_params));

    let location_box = sample_box.inflated(
        S::from_f64_c(0.25)
            * (0..3)
                .map(|a| sample_box.extent(a))
                .fold(S::zero(), |acc, e| acc.max(e)),
    );
    let mut lo = Vec::with_capacity(pack_len);
    let mut hi = Vec::with_capacity(pack_len);
    for _ in 0..m {
        for &a in &free_axes {
            lo.push(location_box.lo[a]);
            hi.push(location_box.hi[a]);
        }
    }
    lo.extend(std::iter::repeat_n(-coefficient_bound, n_params));
    hi.extend(std::iter::repeat_n(coefficient_bound, n_params));
    let bounds = Bounds { lo, hi };

    let unpack = |x: &[S]| -> (Vec<[S; 3]>, DeformationModel<S>) {
        let mut locs = vec![[S::zero(); 3]; m];
        for (j, loc) in locs.iter_mut().enumerate() {
            for (i, &a) in free_axes.iter().enumerate() {
                loc[a] = x[j * n_free + i];
            }
        }
        let mut model = model0.clone();
        model
            .set_params(&x[m * n_free..])
            .expect("packed parameter length matches");
        (locs, model)
    };

    let objective = |x: &[S]| -> Result<(S, Vec<S>)> {
        let (locs, model) = unpack(x);
        let mut f = S::zero();
        let mut g = vec![S::zero(); pack_len];
        let two = S::from_f64_c(2.0);
        for frame in 0..traces.n_frames {
            let t = geometry.time(frame);
            let (du, dv) = geometry.projection_rows(frame);
            for (j, r) in locs.iter().enumerate() {
                if !traces.is_valid(j, frame) {
                    continue;
                }
                let d = model.eval(r, t);
                let p = [r[0] + d[0], r[1] + d[1], r[2] + d[2]];
                let q = geometry.project(frame, &p);
                let target = traces.position(j, frame);
                let e_u = q[0] - target[0];
                let e_v = if obs_per_entry == 2 {
                    q[1] - target[1]
                } else {
                    S::zero()
                };
                f += e_u * e_u + e_v * e_v;

                let jac = model.spatial_jacobian(r, t);
                for (i, &a) in free_axes.iter().enumerate() {
                    let mut cu = du[a];
                    let mut cv = dv[a];
                    for k in 0..3 {
                        cu += du[k] * jac[k][a];
                        cv += dv[k] * jac[k][a];
                    }
                    g[j * n_free + i] += two * (e_u * cu + e_v * cv);
                }
                let monos = model.param_monomials(r, t);
                for i in 0..n_params {
                    let (term, comp) = model.param_location(i);
                    g[m * n_free + i] +=
                        two * (e_u * du[comp] + e_v * dv[comp]) * monos[term];
                }
            }
        }
        Ok((f, g))
    };

    let solved = minimize_bounded(objective, x0, &bounds, qn)?;
    let (locations, model) = unpack(&solved.x);
    let mut markers = MarkerSet::empty(geometry.dim(), location_box);
    for r in &locations {
        markers.push(*r, S::one())?;
    }
    Ok(DmFit {
        markers,
        model,
        residual: solved.f,
        iterations: solved.iterations,
    })
}
