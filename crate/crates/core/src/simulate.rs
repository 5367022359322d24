//! Phantom generation, electron-count scaling, noise and preprocessing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::deform::DeformationModel;
use crate::error::{Error, Result};
use crate::forward::TiltStack;
use crate::geometry::{Dim, SampleBox};
use crate::markers::MarkerSet;
use crate::scalar::Scalar;

/// Markers may not be placed closer than this many shape widths apart.
pub const MIN_SEPARATION_SIGMAS: f64 = 3.0;

const PLACEMENT_ATTEMPTS_PER_MARKER: usize = 10_000;

/// Specification of a random marker phantom.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec<S> {
    pub dim: Dim,
    /// Field of view; becomes the declared bounds of the marker set.
    pub fov: SampleBox<S>,
    pub marker_count: usize,
    /// Region markers are drawn from (a thin slab inside the FoV).
    pub marker_region: SampleBox<S>,
    /// Shape-function width, used for the minimum-separation rule.
    pub shape_sigma: S,
    pub ground_truth: DeformationModel<S>,
    pub seed: u64,
}

/// Draws the marker configuration and returns it with the ground-truth
/// deformation model attached to the spec. Placement is uniform in the
/// marker region with pairwise separation of at least
/// [`MIN_SEPARATION_SIGMAS`] shape widths; identical seeds give identical
/// phantoms.
pub fn make_phantom<S: Scalar>(spec: &PhantomSpec<S>) -> Result<(MarkerSet<S>, DeformationModel<S>)> {
    if spec.marker_count == 0 {
        return Err(Error::InvalidConfig("marker_count must be >= 1".into()));
    }
    for a in 0..3 {
        if spec.marker_region.lo[a] < spec.fov.lo[a] || spec.marker_region.hi[a] > spec.fov.hi[a] {
            return Err(Error::InvalidConfig(
                "marker region must lie inside the field of view".into(),
            ));
        }
    }
    let min_sep = S::from_f64_c(MIN_SEPARATION_SIGMAS) * spec.shape_sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut placed: Vec<[S; 3]> = Vec::with_capacity(spec.marker_count);
    let budget = PLACEMENT_ATTEMPTS_PER_MARKER * spec.marker_count;
    let mut attempts = 0;
    while placed.len() < spec.marker_count {
        if attempts >= budget {
            return Err(Error::PlacementFailed {
                requested: spec.marker_count,
                placed: placed.len(),
                min_separation: min_sep.to_f64().unwrap_or(f64::NAN),
                attempts,
            });
        }
        attempts += 1;
        let mut r = [S::zero(); 3];
        for a in 0..3 {
            let lo = spec.marker_region.lo[a];
            let hi = spec.marker_region.hi[a];
            if hi > lo {
                let u: f64 = rng.random();
                r[a] = lo + (hi - lo) * S::from_f64_c(u);
            } else {
                r[a] = lo;
            }
        }
        let ok = placed.iter().all(|p| {
            let mut d2 = S::zero();
            for a in 0..3 {
                let d = p[a] - r[a];
                d2 += d * d;
            }
            d2.sqrt() >= min_sep
        });
        if ok {
            placed.push(r);
        }
    }
    let weights = vec![S::one(); spec.marker_count];
    let markers = MarkerSet::new(spec.dim, spec.fov, placed, weights)?;
    Ok((markers, spec.ground_truth.clone()))
}

/// Quadratic doming field of the 2D length-unit phantom: displacement along
/// z only, `D_z = -(x + z + x² + z² + xz)·t` in raw coordinates.
pub fn ground_truth_2d_quadratic<S: Scalar>() -> DeformationModel<S> {
    let mut m = DeformationModel::new(
        Dim::Two,
        2,
        1,
        [true, false, true],
        [S::one(); 3],
        vec![2],
    )
    .expect("valid 2D basis");
    let c = S::from_f64_c(-1.0);
    m.set_coeff([0, 0, 0], 1, 2, S::zero()).unwrap();
    m.set_coeff([1, 0, 0], 1, 2, c).unwrap();
    m.set_coeff([0, 0, 1], 1, 2, c).unwrap();
    m.set_coeff([2, 0, 0], 1, 2, c).unwrap();
    m.set_coeff([0, 0, 2], 1, 2, c).unwrap();
    m.set_coeff([1, 0, 1], 1, 2, c).unwrap();
    m
}

/// Quadratic doming field of the 3D phantom: 200 nm of upward displacement
/// at the center decaying towards the edges, with (x, y) normalized by the
/// field-of-view half-width.
pub fn ground_truth_3d_quadratic<S: Scalar>(half_width: S) -> DeformationModel<S> {
    let mut m = DeformationModel::new(
        Dim::Three,
        2,
        1,
        [true, true, false],
        [half_width, half_width, S::one()],
        vec![2],
    )
    .expect("valid 3D basis");
    m.set_coeff([0, 0, 0], 1, 2, S::from_f64_c(200.0)).unwrap();
    m.set_coeff([2, 0, 0], 1, 2, S::from_f64_c(-100.0)).unwrap();
    m.set_coeff([0, 2, 0], 1, 2, S::from_f64_c(-100.0)).unwrap();
    m
}

/// Cubic variant of the 3D doming field.
pub fn ground_truth_3d_cubic<S: Scalar>(half_width: S) -> DeformationModel<S> {
    let mut m = DeformationModel::new(
        Dim::Three,
        3,
        1,
        [true, true, false],
        [half_width, half_width, S::one()],
        vec![2],
    )
    .expect("valid 3D basis");
    m.set_coeff([0, 0, 0], 1, 2, S::from_f64_c(200.0)).unwrap();
    m.set_coeff([2, 0, 0], 1, 2, S::from_f64_c(-50.0)).unwrap();
    m.set_coeff([0, 2, 0], 1, 2, S::from_f64_c(-50.0)).unwrap();
    m.set_coeff([1, 2, 0], 1, 2, S::from_f64_c(25.0)).unwrap();
    m.set_coeff([2, 1, 0], 1, 2, S::from_f64_c(25.0)).unwrap();
    m
}

/// Beer–Lambert electron-count model for gold beads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountModel<S> {
    /// Incident electron count per pixel.
    pub i0: S,
    /// Absorption potential of the bead material, volts.
    pub v_abs: S,
    /// Interaction constant, 1/(V·nm).
    pub interaction: S,
    /// Bead diameter, nm.
    pub bead_diameter: S,
}

impl<S: Scalar> CountModel<S> {
    /// Values for amorphous gold beads in a 300 keV beam.
    pub fn gold(i0: S) -> Self {
        Self {
            i0,
            v_abs: S::from_f64_c(5.39),
            interaction: S::from_f64_c(0.00653),
            bead_diameter: S::from_f64_c(15.0),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.i0 <= S::zero()
            || self.v_abs <= S::zero()
            || self.interaction <= S::zero()
            || self.bead_diameter <= S::zero()
        {
            return Err(Error::InvalidConfig(
                "count model parameters must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Expected count for a normalized marker intensity:
    /// `I = I₀·exp(-V·C·diameter·intensity)`.
    pub fn expected_count(&self, intensity: S) -> S {
        self.i0 * (-self.v_abs * self.interaction * self.bead_diameter * intensity).exp()
    }

    /// Inverse slope of the linearized count model: `I₀·(1 - exp(-V·C·d))`,
    /// the count depression of a unit-intensity marker peak.
    pub fn unit_contrast(&self) -> S {
        self.i0 - self.expected_count(S::one())
    }
}

/// Converts normalized marker intensities (≈ [0, 1]) into expected
/// electron counts, pixelwise.
pub fn scale_to_counts<S: Scalar>(stack: &TiltStack<S>, model: &CountModel<S>) -> Result<TiltStack<S>> {
    model.validate()?;
    Ok(stack.map_pixels(|v| model.expected_count(v)))
}

/// Undoes [`scale_to_counts`] linearly: `(I₀ - count) / unit contrast`.
/// Exact for intensities 0 and 1; compresses intermediate values slightly.
pub fn normalize_counts_linear<S: Scalar>(stack: &TiltStack<S>, model: &CountModel<S>) -> Result<TiltStack<S>> {
    model.validate()?;
    let contrast = model.unit_contrast();
    let i0 = model.i0;
    Ok(stack.map_pixels(|v| (i0 - v) / contrast))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseMode<S> {
    Gaussian { variance: S },
    Poisson,
}

/// Adds seeded noise. Gaussian noise is additive i.i.d.; Poisson draws a
/// count per pixel with the pixel value as its rate. Each frame uses its
/// own RNG stream so frames can be generated independently.
pub fn add_noise<S: Scalar>(stack: &TiltStack<S>, mode: NoiseMode<S>, seed: u64) -> Result<TiltStack<S>> {
    let mut out = stack.clone();
    match mode {
        NoiseMode::Gaussian { variance } => {
            if variance < S::zero() {
                return Err(Error::InvalidConfig("negative noise variance".into()));
            }
            let sigma = variance.sqrt();
            for (t, frame) in out.frames_mut().iter_mut().enumerate() {
                let mut rng = frame_rng(seed, t);
                for v in frame.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v += sigma * S::from_f64_c(n);
                }
            }
        }
        NoiseMode::Poisson => {
            for (t, frame) in out.frames_mut().iter_mut().enumerate() {
                let mut rng = frame_rng(seed, t);
                for (pixel, v) in frame.iter_mut().enumerate() {
                    let lambda = v.to_f64().unwrap_or(f64::NAN);
                    if !(lambda >= 0.0) {
                        return Err(Error::NegativePoissonRate {
                            frame: t,
                            pixel,
                            value: lambda,
                        });
                    }
                    *v = if lambda == 0.0 {
                        S::zero()
                    } else {
                        let draw: f64 = Poisson::new(lambda)
                            .map_err(|e| Error::InvalidConfig(format!("poisson rate: {e}")))?
                            .sample(&mut rng);
                        S::from_f64_c(draw)
                    };
                }
            }
        }
    }
    Ok(out)
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64 + 1);
    rng
}

/// The variance-stabilizing square-root transform `x ↦ 2√(x + 3/8)`.
pub fn anscombe<S: Scalar>(x: S) -> S {
    S::from_f64_c(2.0) * (x + S::from_f64_c(0.375)).sqrt()
}

/// How [`preprocess_counts`] normalizes the transformed data.
pub enum PreprocessMode<'a, S> {
    /// Background and bead levels from a segmentation of a noiseless
    /// reference stack of counts (markers are the low-count class).
    Simulated { reference: &'a TiltStack<S> },
    /// Subtract the stack mean and divide by a user-measured average bead
    /// intensity (the mean transformed marker value after subtraction,
    /// typically negative for absorbing beads).
    Experimental { bead_intensity: S },
}

/// Converts a stack of (noisy) electron counts into forward-model intensity
/// units: variance-stabilize, remove the background level and rescale so
/// the average marker pixel sits near one.
pub fn preprocess_counts<S: Scalar>(stack: &TiltStack<S>, mode: PreprocessMode<'_, S>) -> Result<TiltStack<S>> {
    match mode {
        PreprocessMode::Simulated { reference } => {
            stack.check_same_layout(reference)?;
            let shift = stack.min_value();
            let transformed = stack.map_pixels(|v| anscombe(v - shift));
            // Beads absorb, so the marker class is the low-count side of
            // the reference segmentation.
            let threshold = otsu_threshold(&collect_pixels(reference))?;
            let mut bead_sum = S::zero();
            let mut bead_n = 0usize;
            let mut bg_sum = S::zero();
            let mut bg_n = 0usize;
            for (rf, tf) in reference.frames().iter().zip(transformed.frames()) {
                for (r, v) in rf.iter().zip(tf.iter()) {
                    if *r < threshold {
                        bead_sum += *v;
                        bead_n += 1;
                    } else {
                        bg_sum += *v;
                        bg_n += 1;
                    }
                }
            }
            if bead_n == 0 || bg_n == 0 {
                return Err(Error::InvalidConfig(
                    "reference segmentation produced an empty class".into(),
                ));
            }
            let bg = bg_sum / S::from_usize_c(bg_n);
            let bead = bead_sum / S::from_usize_c(bead_n);
            let scale = bead - bg;
            Ok(transformed.map_pixels(|v| (v - bg) / scale))
        }
        PreprocessMode::Experimental { bead_intensity } => {
            if bead_intensity.is_zero() {
                return Err(Error::InvalidConfig("bead intensity must be nonzero".into()));
            }
            let min = stack.min_value();
            if min < S::from_f64_c(-0.375) {
                return Err(Error::InvalidConfig(format!(
                    "counts below -3/8 cannot be variance-stabilized (min {min})"
                )));
            }
            let transformed = stack.map_pixels(anscombe);
            let mean = transformed.mean_value();
            Ok(transformed.map_pixels(|v| (v - mean) / bead_intensity))
        }
    }
}

fn collect_pixels<S: Scalar>(stack: &TiltStack<S>) -> Vec<S> {
    let mut out = Vec::with_capacity(stack.n_pixels());
    for f in stack.frames() {
        out.extend(f.iter().copied());
    }
    out
}

const OTSU_BINS: usize = 256;

/// Threshold maximizing the between-class variance over a 256-bin
/// histogram. Ties resolve to the lower threshold; pixels at or above the
/// returned value belong to the upper class.
pub fn otsu_threshold<S: Scalar>(values: &[S]) -> Result<S> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("empty image".into()));
    }
    let mut min = values[0];
    let mut max = values[0];
    for v in values {
        min = min.min(*v);
        max = max.max(*v);
    }
    if !(max > min) {
        return Err(Error::ConstantImage(min.to_f64().unwrap_or(f64::NAN)));
    }
    let width = (max - min) / S::from_usize_c(OTSU_BINS);
    let mut histogram = [0usize; OTSU_BINS];
    for v in values {
        let bin = ((*v - min) / width).to_f64().unwrap() as usize;
        histogram[bin.min(OTSU_BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let mut weighted_total = 0.0;
    for (i, h) in histogram.iter().enumerate() {
        weighted_total += i as f64 * *h as f64;
    }
    let mut best_t = 0usize;
    let mut best_var = -1.0f64;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..OTSU_BINS - 1 {
        w0 += histogram[t] as f64;
        sum0 += t as f64 * histogram[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (weighted_total - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = t;
        }
    }
    Ok(min + width * S::from_usize_c(best_t + 1))
}
