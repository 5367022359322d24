//! Anti-aliased downsampling and the coarse-to-fine resolution schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::TiltStack;
use crate::scalar::Scalar;

/// One level of the coarse-to-fine schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleLevel<S> {
    /// Downsampling factor as `1/η`; 1 is full resolution.
    pub eta_inv: u32,
    /// Outer-loop stopping tolerance on the loss decrease at this level.
    pub loss_tolerance: S,
}

/// Validated list of resolution levels, coarsest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionSchedule<S> {
    levels: Vec<ScheduleLevel<S>>,
    /// Levels removed because the coarse frame would fall below the
    /// minimum pixel count per axis.
    dropped: Vec<u32>,
}

/// Coarsest usable detector axis, in pixels.
pub const MIN_AXIS_PIXELS: usize = 8;

impl<S: Scalar> ResolutionSchedule<S> {
    pub fn levels(&self) -> &[ScheduleLevel<S>] {
        &self.levels
    }

    pub fn dropped(&self) -> &[u32] {
        &self.dropped
    }
}

/// Builds a schedule from downsampling factors `1/η` for frames of shape
/// `(n_v, n_u)`. Factors must describe strictly increasing resolutions
/// (strictly decreasing `1/η`); levels whose coarse frames would be
/// narrower than [`MIN_AXIS_PIXELS`] on any non-degenerate axis are
/// dropped and recorded. Factors that do not evenly divide an axis are
/// rejected.
pub fn make_resolution_schedule<S: Scalar>(
    frame_shape: (usize, usize),
    eta_invs: &[u32],
    loss_tolerance: S,
) -> Result<ResolutionSchedule<S>> {
    if eta_invs.is_empty() {
        return Err(Error::EmptySchedule("no downsampling factors given".into()));
    }
    if eta_invs.iter().any(|f| *f == 0) {
        return Err(Error::InvalidConfig("eta_inv factors must be >= 1".into()));
    }
    if eta_invs.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidConfig(
            "downsampling factors must go from coarse to fine (strictly decreasing 1/eta)".into(),
        ));
    }
    let axes = [frame_shape.1, frame_shape.0];
    let mut levels = Vec::new();
    let mut dropped = Vec::new();
    for &f in eta_invs {
        let mut coarse_min = usize::MAX;
        for &n in &axes {
            if n == 1 {
                continue; // degenerate axis of a line detector
            }
            if n % f as usize != 0 {
                return Err(Error::IndivisibleAxis {
                    pixels: n,
                    factor: f,
                });
            }
            coarse_min = coarse_min.min(n / f as usize);
        }
        if coarse_min < MIN_AXIS_PIXELS {
            dropped.push(f);
        } else {
            levels.push(ScheduleLevel {
                eta_inv: f,
                loss_tolerance,
            });
        }
    }
    if levels.is_empty() {
        return Err(Error::EmptySchedule(format!(
            "all factors {:?} leave fewer than {} px per axis for {:?} frames",
            eta_invs, MIN_AXIS_PIXELS, frame_shape
        )));
    }
    Ok(ResolutionSchedule { levels, dropped })
}

/// Downsamples a stack to `1/eta_inv_out` of full resolution: every frame
/// is convolved with an isotropic Gaussian of standard deviation `f/2`
/// input pixels (`f` the decimation factor, mirror boundary) and then
/// decimated keeping every f-th pixel starting at index 0.
pub fn downsample_stack<S: Scalar>(stack: &TiltStack<S>, eta_inv_out: u32) -> Result<TiltStack<S>> {
    let eta_in = stack.eta_inv();
    if eta_inv_out < eta_in || eta_inv_out % eta_in != 0 {
        return Err(Error::NonIntegerDecimation {
            from: eta_in,
            to: eta_inv_out,
        });
    }
    let f = (eta_inv_out / eta_in) as usize;
    if f == 1 {
        return Ok(stack.clone());
    }
    // Output shape is validated against the geometry up front.
    let out_shape = stack.geometry().frame_shape(eta_inv_out)?;
    let tau_a = f as f64 / 2.0;
    let kernel = gaussian_kernel::<S>(tau_a);
    let frames = stack
        .frames()
        .iter()
        .map(|frame| {
            let blurred = blur_separable(frame, &kernel);
            decimate(&blurred, f, out_shape)
        })
        .collect();
    TiltStack::new(stack.geometry().clone(), eta_inv_out, frames)
}

/// Normalized 1D Gaussian taps over radius `ceil(4σ)`.
fn gaussian_kernel<S: Scalar>(sigma: f64) -> Vec<S> {
    let radius = (4.0 * sigma).ceil() as i64;
    let mut taps = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for k in -radius..=radius {
        let v = (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        taps.push(v);
        sum += v;
    }
    taps.iter().map(|v| S::from_f64_c(v / sum)).collect()
}

/// Mirror index about the edge pixel centers (period `2(n-1)`).
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as i64 {
        j = period - j;
    }
    j as usize
}

fn blur_separable<S: Scalar>(frame: &Array2<S>, kernel: &[S]) -> Array2<S> {
    let (n_v, n_u) = frame.dim();
    let radius = (kernel.len() / 2) as i64;
    // Along u (columns).
    let mut pass_u = Array2::<S>::zeros((n_v, n_u));
    if n_u > 1 {
        for v in 0..n_v {
            for u in 0..n_u {
                let mut acc = S::zero();
                for (ki, w) in kernel.iter().enumerate() {
                    let src = reflect(u as i64 + ki as i64 - radius, n_u);
                    acc += *w * frame[(v, src)];
                }
                pass_u[(v, u)] = acc;
            }
        }
    } else {
        pass_u.assign(frame);
    }
    // Along v (rows).
    if n_v == 1 {
        return pass_u;
    }
    let mut out = Array2::<S>::zeros((n_v, n_u));
    for u in 0..n_u {
        for v in 0..n_v {
            let mut acc = S::zero();
            for (ki, w) in kernel.iter().enumerate() {
                let src = reflect(v as i64 + ki as i64 - radius, n_v);
                acc += *w * pass_u[(src, u)];
            }
            out[(v, u)] = acc;
        }
    }
    out
}

fn decimate<S: Scalar>(frame: &Array2<S>, f: usize, out_shape: (usize, usize)) -> Array2<S> {
    let (n_v, _) = frame.dim();
    let (m_v, m_u) = out_shape;
    let step_v = if n_v == 1 { 1 } else { f };
    let mut out = Array2::<S>::zeros(out_shape);
    for v in 0..m_v {
        for u in 0..m_u {
            out[(v, u)] = frame[(v * step_v, u * f)];
        }
    }
    out
}
