//! Tilt geometry: angles, times, detector grids and the parallel projection.
//!
//! Sample coordinates are always stored as `[x, y, z]`. A 2D sample lives in
//! the x–z plane with `y = 0`; its detector is a line of pixels. A 3D sample
//! tilts about one in-plane axis (default y) and projects onto a 2D detector
//! whose `u` axis is perpendicular to the tilt axis and whose `v` axis is the
//! tilt axis itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sample dimensionality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dim {
    Two,
    Three,
}

impl Dim {
    pub fn as_usize(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 3,
        }
    }
}

/// Axis-aligned box in sample coordinates. For 2D samples the y interval
/// is the degenerate `[0, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleBox<S> {
    pub lo: [S; 3],
    pub hi: [S; 3],
}

impl<S: Scalar> SampleBox<S> {
    pub fn new(lo: [S; 3], hi: [S; 3]) -> Self {
        Self { lo, hi }
    }

    /// 2D box over (x, z); the y interval collapses to zero.
    pub fn planar(x: (S, S), z: (S, S)) -> Self {
        Self {
            lo: [x.0, S::zero(), z.0],
            hi: [x.1, S::zero(), z.1],
        }
    }

    pub fn contains(&self, p: &[S; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }

    pub fn extent(&self, axis: usize) -> S {
        self.hi[axis] - self.lo[axis]
    }

    /// Box grown by `margin` on every axis with nonzero extent.
    pub fn inflated(&self, margin: S) -> Self {
        let mut out = *self;
        for a in 0..3 {
            if self.hi[a] > self.lo[a] {
                out.lo[a] = self.lo[a] - margin;
                out.hi[a] = self.hi[a] + margin;
            }
        }
        out
    }

    pub fn clamp(&self, p: &[S; 3]) -> [S; 3] {
        let mut out = *p;
        for a in 0..3 {
            out[a] = out[a].max(self.lo[a]).min(self.hi[a]);
        }
        out
    }
}

/// Acquisition geometry for one tilt series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltGeometry<S> {
    dim: Dim,
    angles_deg: Vec<S>,
    times: Vec<S>,
    /// Detector pixels as `[n_u, n_v]`; `n_v = 1` for 2D samples.
    detector_shape: [usize; 2],
    pixel_size: S,
    /// Standard deviation of the projected Gaussian shape function, in
    /// sample units.
    shape_sigma: S,
    /// Axis the sample rotates about (3D only): 0 = x, 1 = y.
    tilt_axis: usize,
}

impl<S: Scalar> TiltGeometry<S> {
    /// 2D geometry: a line detector of `n_detector` pixels.
    pub fn new_2d(
        angles_deg: Vec<S>,
        times: Vec<S>,
        n_detector: usize,
        pixel_size: S,
        shape_sigma: S,
    ) -> Result<Self> {
        Self::build(
            Dim::Two,
            angles_deg,
            times,
            [n_detector, 1],
            pixel_size,
            shape_sigma,
            1,
        )
    }

    /// 3D geometry: detector of `n_u` (tilt-perpendicular) by `n_v`
    /// (tilt-axis) pixels rotating about `tilt_axis` (0 = x, 1 = y).
    pub fn new_3d(
        angles_deg: Vec<S>,
        times: Vec<S>,
        detector_shape: [usize; 2],
        pixel_size: S,
        shape_sigma: S,
        tilt_axis: usize,
    ) -> Result<Self> {
        Self::build(
            Dim::Three,
            angles_deg,
            times,
            detector_shape,
            pixel_size,
            shape_sigma,
            tilt_axis,
        )
    }

    fn build(
        dim: Dim,
        angles_deg: Vec<S>,
        times: Vec<S>,
        detector_shape: [usize; 2],
        pixel_size: S,
        shape_sigma: S,
        tilt_axis: usize,
    ) -> Result<Self> {
        if angles_deg.len() != times.len() {
            return Err(Error::ShapeMismatch {
                context: "angles vs times".into(),
                expected: format!("{}", angles_deg.len()),
                actual: format!("{}", times.len()),
            });
        }
        if angles_deg.is_empty() {
            return Err(Error::InvalidGeometry("empty tilt schedule".into()));
        }
        if !strictly_monotone(&angles_deg) {
            return Err(Error::InvalidGeometry(
                "tilt angles must be strictly monotone".into(),
            ));
        }
        if !strictly_monotone(&times)
            || times[0] < S::zero()
            || times[times.len() - 1] > S::one()
        {
            return Err(Error::InvalidGeometry(
                "tilt times must be strictly monotone in [0, 1]".into(),
            ));
        }
        if pixel_size <= S::zero() {
            return Err(Error::InvalidGeometry("pixel_size must be > 0".into()));
        }
        if shape_sigma <= S::zero() {
            return Err(Error::InvalidGeometry("shape_sigma must be > 0".into()));
        }
        if detector_shape[0] == 0 || detector_shape[1] == 0 {
            return Err(Error::InvalidGeometry("empty detector".into()));
        }
        if dim == Dim::Two && detector_shape[1] != 1 {
            return Err(Error::InvalidGeometry(
                "2D samples use a line detector (n_v = 1)".into(),
            ));
        }
        if tilt_axis > 1 {
            return Err(Error::InvalidGeometry(
                "tilt axis must be in-plane (0 = x, 1 = y)".into(),
            ));
        }
        Ok(Self {
            dim,
            angles_deg,
            times,
            detector_shape,
            pixel_size,
            shape_sigma,
            tilt_axis,
        })
    }

    /// Uniform times `t_i = i / (n - 1)` (a single frame gets `t = 0`).
    pub fn uniform_times(n: usize) -> Vec<S> {
        if n == 1 {
            return vec![S::zero()];
        }
        (0..n)
            .map(|i| S::from_usize_c(i) / S::from_usize_c(n - 1))
            .collect()
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn n_frames(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn angles_deg(&self) -> &[S] {
        &self.angles_deg
    }

    pub fn times(&self) -> &[S] {
        &self.times
    }

    pub fn time(&self, frame: usize) -> S {
        self.times[frame]
    }

    pub fn detector_shape(&self) -> [usize; 2] {
        self.detector_shape
    }

    pub fn pixel_size(&self) -> S {
        self.pixel_size
    }

    pub fn shape_sigma(&self) -> S {
        self.shape_sigma
    }

    pub fn tilt_axis(&self) -> usize {
        self.tilt_axis
    }

    /// In-plane axis perpendicular to the tilt axis (the axis that mixes
    /// with z under rotation). For 2D samples this is x.
    pub fn perp_axis(&self) -> usize {
        1 - self.tilt_axis
    }

    /// Projection matrix row pair for `frame`: maps a sample point to
    /// detector coordinates `(u, v)`.
    ///
    /// `u = r[perp]·cosθ + r[z]·sinθ`, `v = r[tilt_axis]`. For 2D samples
    /// (tilt about y with y = 0) this reduces to `u = x·cosθ + z·sinθ`.
    pub fn project(&self, frame: usize, p: &[S; 3]) -> [S; 2] {
        let theta = self.angles_deg[frame].to_radians();
        let (sin, cos) = theta.sin_cos();
        [p[self.perp_axis()] * cos + p[2] * sin, p[self.tilt_axis]]
    }

    /// Derivative of `(u, v)` with respect to the sample point: returns
    /// `(du/dr, dv/dr)` as two 3-vectors.
    pub fn projection_rows(&self, frame: usize) -> ([S; 3], [S; 3]) {
        let theta = self.angles_deg[frame].to_radians();
        let (sin, cos) = theta.sin_cos();
        let mut du = [S::zero(); 3];
        let mut dv = [S::zero(); 3];
        du[self.perp_axis()] = cos;
        du[2] = sin;
        dv[self.tilt_axis] = S::one();
        (du, dv)
    }

    /// Detector pixel-center coordinate along one axis at downsampling
    /// `1/eta_inv`: coarse pixel `i` sits at fine pixel `i·eta_inv`, and the
    /// full-resolution grid is centered on the detector midline.
    pub fn axis_coord(&self, axis: usize, index: usize, eta_inv: u32) -> S {
        let n = self.detector_shape[axis];
        let half = S::from_usize_c(n - 1) / S::from_f64_c(2.0);
        (S::from_usize_c(index * eta_inv as usize) - half) * self.pixel_size
    }

    /// Number of detector pixels along `axis` at downsampling `1/eta_inv`.
    /// The degenerate 2D `v` axis always keeps its single pixel.
    pub fn axis_len(&self, axis: usize, eta_inv: u32) -> Result<usize> {
        let n = self.detector_shape[axis];
        if n == 1 {
            return Ok(1);
        }
        let f = eta_inv as usize;
        if f == 0 {
            return Err(Error::InvalidGeometry("eta_inv must be >= 1".into()));
        }
        if n % f != 0 {
            return Err(Error::IndivisibleAxis {
                pixels: n,
                factor: eta_inv,
            });
        }
        Ok(n / f)
    }

    /// Frame shape `(n_v, n_u)` at downsampling `1/eta_inv` (row = v).
    pub fn frame_shape(&self, eta_inv: u32) -> Result<(usize, usize)> {
        Ok((self.axis_len(1, eta_inv)?, self.axis_len(0, eta_inv)?))
    }
}

fn strictly_monotone<S: Scalar>(v: &[S]) -> bool {
    if v.len() < 2 {
        return true;
    }
    let up = v.windows(2).all(|w| w[1] > w[0]);
    let down = v.windows(2).all(|w| w[1] < w[0]);
    up || down
}

/// Equispaced angles over `[start, stop)` or `[start, stop]`.
pub fn angle_range<S: Scalar>(start_deg: S, stop_deg: S, count: usize, include_stop: bool) -> Vec<S> {
    if count == 1 {
        return vec![start_deg];
    }
    let denom = if include_stop { count - 1 } else { count };
    let step = (stop_deg - start_deg) / S::from_usize_c(denom);
    (0..count)
        .map(|i| start_deg + step * S::from_usize_c(i))
        .collect()
}
