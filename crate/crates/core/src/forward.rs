//! Differentiable forward projection of marker configurations.
//!
//! A marker at sample location `r` with weight `w` projects at frame `t`
//! onto the detector point `q = A_θ (r + D_t(r))` and contributes a
//! peak-normalized Gaussian of standard deviation `σ_eff` around `q`,
//! scaled by `w`. Frames are sampled at detector pixel centers, which at
//! downsampling `1/f` coincide with every f-th full-resolution pixel
//! starting at index 0.
//!
//! Every Gaussian factor is rasterized only within a truncation window and
//! shifted down by its boundary value, so rendered frames are continuous
//! functions of marker positions and deformation parameters; analytic
//! gradients here are exact derivatives of the rendered values.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::DeformationModel;
use crate::error::{Error, Result};
use crate::geometry::TiltGeometry;
use crate::markers::MarkerSet;
use crate::scalar::Scalar;

/// How the rendering width responds to downsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaMode {
    /// `σ_eff = sqrt(τ_f² + τ_a²)`: the model matches data that were
    /// anti-alias filtered before decimation. Default.
    AntiAliased,
    /// `σ_eff = τ_f` at every resolution: sample the raw shape function
    /// on the coarse grid.
    ShapeOnly,
}

/// Rendering options shared by the forward pass and its gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions<S> {
    pub sigma_mode: SigmaMode,
    /// Gaussian support half-width in units of `σ_eff`.
    pub truncation_sigmas: S,
}

impl<S: Scalar> Default for RenderOptions<S> {
    fn default() -> Self {
        Self {
            sigma_mode: SigmaMode::AntiAliased,
            truncation_sigmas: S::from_f64_c(6.0),
        }
    }
}

impl<S: Scalar> RenderOptions<S> {
    /// Effective Gaussian width (sample units) at downsampling `1/eta_inv`.
    pub fn sigma_eff(&self, geometry: &TiltGeometry<S>, eta_inv: u32) -> S {
        let tau_f = geometry.shape_sigma();
        match self.sigma_mode {
            SigmaMode::ShapeOnly => tau_f,
            SigmaMode::AntiAliased => {
                if eta_inv <= 1 {
                    tau_f
                } else {
                    let tau_a = S::from_f64_c(eta_inv as f64 / 2.0) * geometry.pixel_size();
                    (tau_f * tau_f + tau_a * tau_a).sqrt()
                }
            }
        }
    }
}

/// A stack of projection frames tied to its acquisition geometry.
///
/// Frames are `(n_v, n_u)` arrays; 2D samples use line frames `(1, n_u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltStack<S> {
    geometry: TiltGeometry<S>,
    eta_inv: u32,
    frames: Vec<Array2<S>>,
}

impl<S: Scalar> TiltStack<S> {
    pub fn new(geometry: TiltGeometry<S>, eta_inv: u32, frames: Vec<Array2<S>>) -> Result<Self> {
        let shape = geometry.frame_shape(eta_inv)?;
        if frames.len() != geometry.n_frames() {
            return Err(Error::ShapeMismatch {
                context: "frame count".into(),
                expected: format!("{}", geometry.n_frames()),
                actual: format!("{}", frames.len()),
            });
        }
        for (t, f) in frames.iter().enumerate() {
            if f.dim() != shape {
                return Err(Error::ShapeMismatch {
                    context: format!("frame {t}"),
                    expected: format!("{shape:?}"),
                    actual: format!("{:?}", f.dim()),
                });
            }
        }
        Ok(Self {
            geometry,
            eta_inv,
            frames,
        })
    }

    pub fn zeros(geometry: TiltGeometry<S>, eta_inv: u32) -> Result<Self> {
        let shape = geometry.frame_shape(eta_inv)?;
        let frames = vec![Array2::zeros(shape); geometry.n_frames()];
        Ok(Self {
            geometry,
            eta_inv,
            frames,
        })
    }

    pub fn geometry(&self) -> &TiltGeometry<S> {
        &self.geometry
    }

    pub fn eta_inv(&self) -> u32 {
        self.eta_inv
    }

    pub fn frames(&self) -> &[Array2<S>] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [Array2<S>] {
        &mut self.frames
    }

    pub fn into_frames(self) -> Vec<Array2<S>> {
        self.frames
    }

    pub fn n_pixels(&self) -> usize {
        self.frames.iter().map(|f| f.len()).sum()
    }

    /// Sum of squared pixel values, accumulated in frame / row / column order.
    pub fn squared_norm(&self) -> S {
        let mut acc = S::zero();
        for f in &self.frames {
            for v in f.iter() {
                acc += *v * *v;
            }
        }
        acc
    }

    /// Pixelwise inner product with another stack of identical layout.
    pub fn dot(&self, other: &Self) -> Result<S> {
        self.check_same_layout(other)?;
        let mut acc = S::zero();
        for (a, b) in self.frames.iter().zip(&other.frames) {
            for (x, y) in a.iter().zip(b.iter()) {
                acc += *x * *y;
            }
        }
        Ok(acc)
    }

    pub fn check_same_layout(&self, other: &Self) -> Result<()> {
        if self.geometry != other.geometry || self.eta_inv != other.eta_inv {
            return Err(Error::ShapeMismatch {
                context: "tilt stack layout".into(),
                expected: format!("eta 1/{} with matching geometry", self.eta_inv),
                actual: format!("eta 1/{}", other.eta_inv),
            });
        }
        Ok(())
    }

    /// Applies `f` to every pixel.
    pub fn map_pixels(&self, f: impl Fn(S) -> S) -> Self {
        let frames = self.frames.iter().map(|fr| fr.mapv(|v| f(v))).collect();
        Self {
            geometry: self.geometry.clone(),
            eta_inv: self.eta_inv,
            frames,
        }
    }

    pub fn min_value(&self) -> S {
        let mut m = S::infinity();
        for f in &self.frames {
            for v in f.iter() {
                m = m.min(*v);
            }
        }
        m
    }

    pub fn mean_value(&self) -> S {
        let mut acc = S::zero();
        for f in &self.frames {
            for v in f.iter() {
                acc += *v;
            }
        }
        acc / S::from_usize_c(self.n_pixels())
    }
}

/// Projected detector locations `(u, v)` of every marker at one frame,
/// after applying the deformation field. Markers projecting outside the
/// detector are returned as-is; rendering clips them.
pub fn projected_locations<S: Scalar>(
    markers: &MarkerSet<S>,
    model: &DeformationModel<S>,
    geometry: &TiltGeometry<S>,
    frame: usize,
) -> Vec<[S; 2]> {
    let t = geometry.time(frame);
    markers
        .locations()
        .iter()
        .map(|r| {
            let d = model.eval(r, t);
            let p = [r[0] + d[0], r[1] + d[1], r[2] + d[2]];
            geometry.project(frame, &p)
        })
        .collect()
}

/// One truncated, boundary-shifted Gaussian factor along a detector axis:
/// values and derivatives at the pixel centers inside the support window.
struct AxisProfile<S> {
    /// First pixel index covered by the window.
    start: usize,
    /// `exp(-Δ²/2σ²) - K` per covered pixel.
    values: Vec<S>,
    /// d/dΔ of the unshifted Gaussian per covered pixel.
    derivs: Vec<S>,
}

impl<S: Scalar> AxisProfile<S> {
    /// `center` is the projected coordinate along this axis, in sample
    /// units; pixel `i` sits at `geometry.axis_coord(axis, i, eta_inv)`.
    fn build(
        geometry: &TiltGeometry<S>,
        axis: usize,
        eta_inv: u32,
        n: usize,
        center: S,
        sigma: S,
        trunc: S,
    ) -> Option<Self> {
        if n == 1 {
            // Degenerate axis of a 2D line detector: the factor is exactly 1.
            return Some(Self {
                start: 0,
                values: vec![S::one()],
                derivs: vec![S::zero()],
            });
        }
        let radius = trunc * sigma;
        let step = geometry.pixel_size() * S::from_usize_c(eta_inv as usize);
        let origin = geometry.axis_coord(axis, 0, eta_inv);
        // Indices with |coord - center| <= radius.
        let lo = ((center - radius - origin) / step).ceil();
        let hi = ((center + radius - origin) / step).floor();
        let lo = lo.to_f64().unwrap().max(0.0) as usize;
        let hi = hi.to_f64().unwrap().min((n - 1) as f64);
        if hi < 0.0 || lo as f64 > hi {
            return None;
        }
        let hi = hi as usize;
        let shift = (-(trunc * trunc) / S::from_f64_c(2.0)).exp();
        let inv_s2 = S::one() / (sigma * sigma);
        let half = S::from_f64_c(0.5);
        let mut values = Vec::with_capacity(hi - lo + 1);
        let mut derivs = Vec::with_capacity(hi - lo + 1);
        for i in lo..=hi {
            let delta = origin + step * S::from_usize_c(i) - center;
            let g = (-half * delta * delta * inv_s2).exp();
            values.push(g - shift);
            derivs.push(-delta * inv_s2 * g);
        }
        Some(Self {
            start: lo,
            values,
            derivs,
        })
    }
}

/// Renders one marker into `frame` (shape `(n_v, n_u)`).
fn splat_marker<S: Scalar>(
    frame: &mut Array2<S>,
    geometry: &TiltGeometry<S>,
    eta_inv: u32,
    q: [S; 2],
    weight: S,
    sigma: S,
    trunc: S,
) {
    let (n_v, n_u) = frame.dim();
    let Some(pu) = AxisProfile::build(geometry, 0, eta_inv, n_u, q[0], sigma, trunc) else {
        return;
    };
    let Some(pv) = AxisProfile::build(geometry, 1, eta_inv, n_v, q[1], sigma, trunc) else {
        return;
    };
    for (iv, bv) in pv.values.iter().enumerate() {
        let row = pv.start + iv;
        for (iu, au) in pu.values.iter().enumerate() {
            frame[(row, pu.start + iu)] += weight * *au * *bv;
        }
    }
}

/// Renders a full stack at downsampling `1/eta_inv`. An empty marker set
/// yields an all-zero stack.
pub fn render_stack<S: Scalar>(
    markers: &MarkerSet<S>,
    model: &DeformationModel<S>,
    geometry: &TiltGeometry<S>,
    eta_inv: u32,
    opts: &RenderOptions<S>,
) -> Result<TiltStack<S>> {
    let shape = geometry.frame_shape(eta_inv)?;
    let sigma = opts.sigma_eff(geometry, eta_inv);
    // Frames render independently; the ordered collect keeps the result
    // identical for any thread count.
    let frames: Vec<Array2<S>> = (0..geometry.n_frames())
        .into_par_iter()
        .map(|frame_idx| {
            let mut frame = Array2::zeros(shape);
            let q = projected_locations(markers, model, geometry, frame_idx);
            for (j, qj) in q.iter().enumerate() {
                splat_marker(
                    &mut frame,
                    geometry,
                    eta_inv,
                    *qj,
                    markers.weight(j),
                    sigma,
                    opts.truncation_sigmas,
                );
            }
            frame
        })
        .collect();
    TiltStack::new(geometry.clone(), eta_inv, frames)
}

/// Renders a single unit-weight marker at `r` (used by the insertion step
/// and the weight solve; `r` need not lie inside the declared sample box).
pub fn render_single<S: Scalar>(
    r: &[S; 3],
    model: &DeformationModel<S>,
    geometry: &TiltGeometry<S>,
    eta_inv: u32,
    opts: &RenderOptions<S>,
) -> Result<TiltStack<S>> {
    let mut stack = TiltStack::zeros(geometry.clone(), eta_inv)?;
    let sigma = opts.sigma_eff(geometry, eta_inv);
    for frame_idx in 0..geometry.n_frames() {
        let t = geometry.time(frame_idx);
        let d = model.eval(r, t);
        let q = geometry.project(frame_idx, &[r[0] + d[0], r[1] + d[1], r[2] + d[2]]);
        splat_marker(
            &mut stack.frames_mut()[frame_idx],
            geometry,
            eta_inv,
            q,
            S::one(),
            sigma,
            opts.truncation_sigmas,
        );
    }
    Ok(stack)
}

/// Inner product `⟨ψ(r), stack⟩` of a unit-weight marker's rendering with a
/// stack, computed window-by-window without materializing `ψ(r)`.
pub fn correlate_single<S: Scalar>(
    r: &[S; 3],
    model: &DeformationModel<S>,
    stack: &TiltStack<S>,
    opts: &RenderOptions<S>,
) -> S {
    let geometry = stack.geometry();
    let eta_inv = stack.eta_inv();
    let sigma = opts.sigma_eff(geometry, eta_inv);
    let trunc = opts.truncation_sigmas;
    let mut acc = S::zero();
    for frame_idx in 0..geometry.n_frames() {
        let t = geometry.time(frame_idx);
        let d = model.eval(r, t);
        let q = geometry.project(frame_idx, &[r[0] + d[0], r[1] + d[1], r[2] + d[2]]);
        let frame = &stack.frames()[frame_idx];
        let (n_v, n_u) = frame.dim();
        let Some(pu) = AxisProfile::build(geometry, 0, eta_inv, n_u, q[0], sigma, trunc) else {
            continue;
        };
        let Some(pv) = AxisProfile::build(geometry, 1, eta_inv, n_v, q[1], sigma, trunc) else {
            continue;
        };
        for (iv, bv) in pv.values.iter().enumerate() {
            let row = pv.start + iv;
            let mut row_acc = S::zero();
            for (iu, au) in pu.values.iter().enumerate() {
                row_acc += *au * frame[(row, pu.start + iu)];
            }
            acc += *bv * row_acc;
        }
    }
    acc
}

/// Squared-L2 data-fit loss and its residual stack `render - data`.
pub fn loss_and_residual<S: Scalar>(
    markers: &MarkerSet<S>,
    model: &DeformationModel<S>,
    data: &TiltStack<S>,
    opts: &RenderOptions<S>,
) -> Result<(S, TiltStack<S>)> {
    let mut residual = render_stack(markers, model, data.geometry(), data.eta_inv(), opts)?;
    let mut loss = S::zero();
    for (rf, df) in residual.frames_mut().iter_mut().zip(data.frames()) {
        for (r, d) in rf.iter_mut().zip(df.iter()) {
            *r -= *d;
            loss += *r * *r;
        }
    }
    Ok((loss, residual))
}

/// Which gradients [`loss_gradients`] should produce.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradRequest {
    pub weights: bool,
    pub locations: bool,
    pub params: bool,
}

impl GradRequest {
    pub fn all() -> Self {
        Self {
            weights: true,
            locations: true,
            params: true,
        }
    }
}

/// Analytic gradients of the squared-L2 loss.
#[derive(Debug, Clone)]
pub struct LossGradients<S> {
    pub loss: S,
    pub weights: Option<Vec<S>>,
    pub locations: Option<Vec<[S; 3]>>,
    pub params: Option<Vec<S>>,
}

/// Loss and requested analytic gradients with respect to marker weights,
/// marker locations and the free deformation parameters.
pub fn loss_gradients<S: Scalar>(
    markers: &MarkerSet<S>,
    model: &DeformationModel<S>,
    data: &TiltStack<S>,
    opts: &RenderOptions<S>,
    request: GradRequest,
) -> Result<LossGradients<S>> {
    let geometry = data.geometry();
    let eta_inv = data.eta_inv();
    let sigma = opts.sigma_eff(geometry, eta_inv);
    let trunc = opts.truncation_sigmas;
    let n_markers = markers.len();
    let n_params = model.n_params();
    let n_terms = model.n_terms();

    struct FramePartial<S> {
        loss: S,
        g_w: Vec<S>,
        g_r: Vec<[S; 3]>,
        g_p: Vec<S>,
    }

    let shape = geometry.frame_shape(eta_inv)?;
    let two = S::from_f64_c(2.0);
    let per_frame = |frame_idx: usize| -> FramePartial<S> {
        let mut partial = FramePartial {
            loss: S::zero(),
            g_w: vec![S::zero(); if request.weights { n_markers } else { 0 }],
            g_r: vec![[S::zero(); 3]; if request.locations { n_markers } else { 0 }],
            g_p: vec![S::zero(); if request.params { n_params } else { 0 }],
        };
        let t = geometry.time(frame_idx);
        let (du, dv) = geometry.projection_rows(frame_idx);

        // Forward pass: residual = render - data for this frame.
        let mut residual = Array2::<S>::zeros(shape);
        let q: Vec<[S; 2]> = projected_locations(markers, model, geometry, frame_idx);
        for (j, qj) in q.iter().enumerate() {
            splat_marker(
                &mut residual,
                geometry,
                eta_inv,
                *qj,
                markers.weight(j),
                sigma,
                trunc,
            );
        }
        for (r, d) in residual.iter_mut().zip(data.frames()[frame_idx].iter()) {
            *r -= *d;
            partial.loss += *r * *r;
        }
        if !(request.weights || request.locations || request.params) {
            return partial;
        }

        // Backward pass per marker.
        let (n_v, n_u) = shape;
        for (j, qj) in q.iter().enumerate() {
            let Some(pu) =
                AxisProfile::build(geometry, 0, eta_inv, n_u, qj[0], sigma, trunc)
            else {
                continue;
            };
            let Some(pv) =
                AxisProfile::build(geometry, 1, eta_inv, n_v, qj[1], sigma, trunc)
            else {
                continue;
            };
            // s0 = sum e*A*B, su = sum e*A'*B, sv = sum e*A*B'  (e = 2*residual)
            let mut s0 = S::zero();
            let mut su = S::zero();
            let mut sv = S::zero();
            for (iv, (bv, dbv)) in pv.values.iter().zip(&pv.derivs).enumerate() {
                let row = pv.start + iv;
                let mut row0 = S::zero();
                let mut row1 = S::zero();
                for (iu, (au, dau)) in pu.values.iter().zip(&pu.derivs).enumerate() {
                    let e = residual[(row, pu.start + iu)];
                    row0 += e * *au;
                    row1 += e * *dau;
                }
                s0 += *bv * row0;
                sv += *dbv * row0;
                su += *bv * row1;
            }
            s0 = s0 * two;
            su = su * two;
            sv = sv * two;

            if request.weights {
                partial.g_w[j] += s0;
            }
            if !(request.locations || request.params) {
                continue;
            }
            // d(loss)/dq: the axis profiles hold d/d(delta) with
            // delta = pixel - q, so d/dq flips the sign.
            let w = markers.weight(j);
            let gq_u = -w * su;
            let gq_v = -w * sv;
            let r_j = markers.location(j);

            if request.locations {
                let jac = model.spatial_jacobian(&r_j, t);
                for a in 0..3 {
                    // rows of A_theta * (I + J_D)
                    let mut cu = du[a];
                    let mut cv = dv[a];
                    for k in 0..3 {
                        cu += du[k] * jac[k][a];
                        cv += dv[k] * jac[k][a];
                    }
                    partial.g_r[j][a] += gq_u * cu + gq_v * cv;
                }
            }
            if request.params {
                let monos = model.param_monomials(&r_j, t);
                for (i, g) in partial.g_p.iter_mut().enumerate() {
                    let (m, k) = (i % n_terms, model.active_components()[i / n_terms]);
                    *g += (gq_u * du[k] + gq_v * dv[k]) * monos[m];
                }
            }
        }
        partial
    };

    let partials: Vec<FramePartial<S>> = (0..geometry.n_frames())
        .into_par_iter()
        .map(per_frame)
        .collect();

    // Fold in frame order so results are thread-count independent.
    let mut loss = S::zero();
    let mut g_w = vec![S::zero(); if request.weights { n_markers } else { 0 }];
    let mut g_r = vec![[S::zero(); 3]; if request.locations { n_markers } else { 0 }];
    let mut g_p = vec![S::zero(); if request.params { n_params } else { 0 }];
    for partial in partials {
        loss += partial.loss;
        for (a, b) in g_w.iter_mut().zip(&partial.g_w) {
            *a += *b;
        }
        for (a, b) in g_r.iter_mut().zip(&partial.g_r) {
            for k in 0..3 {
                a[k] = a[k] + b[k];
            }
        }
        for (a, b) in g_p.iter_mut().zip(&partial.g_p) {
            *a += *b;
        }
    }

    Ok(LossGradients {
        loss,
        weights: request.weights.then_some(g_w),
        locations: request.locations.then_some(g_r),
        params: request.params.then_some(g_p),
    })
}
