//! Run configuration: a strict JSON document describing geometry, phantom,
//! noise, solver and schedule settings. Unknown keys are rejected.

use serde::Deserialize;
use sparsealign::deform::DeformationModel;
use sparsealign::forward::{RenderOptions, SigmaMode};
use sparsealign::geometry::{angle_range, Dim, SampleBox, TiltGeometry};
use sparsealign::multires::{make_resolution_schedule, ResolutionSchedule};
use sparsealign::optim::QuasiNewtonConfig;
use sparsealign::simulate::{
    ground_truth_2d_quadratic, ground_truth_3d_cubic, ground_truth_3d_quadratic, CountModel,
    NoiseMode, PhantomSpec,
};
use sparsealign::solver::SolverConfig;

use crate::error::{CliError, CliResult};

pub type Real = sparsealign::Real;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// 2 or 3.
    pub dimension: usize,
    pub geometry: GeometryConfig,
    pub sample: SampleConfig,
    #[serde(default)]
    pub phantom: Option<PhantomConfig>,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    pub model: ModelConfig,
    pub solver: SolverSection,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub angles_deg: AnglesConfig,
    /// Explicit per-frame times in [0, 1]; defaults to a uniform ramp.
    #[serde(default)]
    pub times: Option<Vec<Real>>,
    /// `[n_u]` for 2D samples, `[n_u, n_v]` for 3D.
    pub detector: Vec<usize>,
    pub pixel_size: Real,
    pub shape_sigma: Real,
    /// Tilt axis for 3D samples: "x" or "y".
    #[serde(default)]
    pub tilt_axis: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum AnglesConfig {
    Range {
        start: Real,
        stop: Real,
        count: usize,
        include_stop: bool,
    },
    List(Vec<Real>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    /// Field of view per axis; `y` must be omitted for 2D samples.
    pub fov: BoxConfig,
    /// Region the phantom draws markers from (defaults to the FoV).
    #[serde(default)]
    pub marker_region: Option<BoxConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub x: [Real; 2],
    #[serde(default)]
    pub y: Option<[Real; 2]>,
    pub z: [Real; 2],
}

impl BoxConfig {
    pub fn to_box(&self, dim: Dim) -> CliResult<SampleBox<Real>> {
        match (dim, self.y) {
            (Dim::Two, Some(_)) => Err(CliError::config(
                "2D configurations must not give a y extent",
            )),
            (Dim::Two, None) => Ok(SampleBox::planar(
                (self.x[0], self.x[1]),
                (self.z[0], self.z[1]),
            )),
            (Dim::Three, Some(y)) => Ok(SampleBox::new(
                [self.x[0], y[0], self.z[0]],
                [self.x[1], y[1], self.z[1]],
            )),
            (Dim::Three, None) => Err(CliError::config("3D configurations need a y extent")),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub marker_count: usize,
    /// "quadratic-2d", "doming-quadratic", "doming-cubic" or "none".
    pub deformation: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// "poisson" or {"gaussian": {"variance": ...}}.
    pub mode: NoiseModeConfig,
    pub counts: CountsConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModeConfig {
    #[serde(rename = "poisson")]
    Poisson,
    #[serde(rename = "gaussian")]
    Gaussian { variance: Real },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountsConfig {
    pub i0: Real,
    #[serde(default)]
    pub v_abs: Option<Real>,
    #[serde(default)]
    pub interaction: Option<Real>,
    #[serde(default)]
    pub bead_diameter: Option<Real>,
}

impl CountsConfig {
    pub fn to_model(&self) -> CountModel<Real> {
        let gold = CountModel::gold(self.i0);
        CountModel {
            i0: self.i0,
            v_abs: self.v_abs.unwrap_or(gold.v_abs),
            interaction: self.interaction.unwrap_or(gold.interaction),
            bead_diameter: self.bead_diameter.unwrap_or(gold.bead_diameter),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub spatial_degree: usize,
    pub temporal_degree: usize,
    /// Output components the fit solves for, e.g. ["z"].
    pub active_components: Vec<String>,
    /// Sample axes the polynomials may depend on, e.g. ["x", "y"].
    pub spatial_axes: Vec<String>,
    /// Divide x and y by the FoV half-width before evaluating monomials.
    #[serde(default)]
    pub normalize_xy: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub n_max: usize,
    /// Candidate nodes per axis, `[x, y, z]` (use 1 on degenerate axes).
    pub candidate_grid: [usize; 3],
    #[serde(default = "default_prune_threshold")]
    pub prune_threshold: Real,
    #[serde(default = "default_loss_tolerance")]
    pub loss_tolerance: Real,
    #[serde(default = "default_bcd_rounds")]
    pub bcd_rounds: usize,
    pub deformation_bound: Real,
    #[serde(default)]
    pub joint_refine: bool,
    #[serde(default)]
    pub quasi_newton: Option<QuasiNewtonSection>,
    /// "anti-aliased" (default) or "shape-only".
    #[serde(default)]
    pub sigma_mode: Option<String>,
}

fn default_prune_threshold() -> Real {
    0.1
}

fn default_loss_tolerance() -> Real {
    1e-6
}

fn default_bcd_rounds() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuasiNewtonSection {
    pub memory: usize,
    pub max_iterations: usize,
    pub grad_tolerance: Real,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Downsampling factors `1/η`, coarse to fine, e.g. [8, 4, 2].
    pub eta_inv: Vec<u32>,
    /// Per-level stopping tolerance; defaults to the solver tolerance.
    #[serde(default)]
    pub loss_tolerance: Option<Real>,
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> CliResult<()> {
        if self.dimension != 2 && self.dimension != 3 {
            return Err(CliError::config("dimension must be 2 or 3"));
        }
        let want = if self.dimension == 2 { 1 } else { 2 };
        if self.geometry.detector.len() != want {
            return Err(CliError::config(format!(
                "detector needs {want} axis length(s) for a {}D sample",
                self.dimension
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> Dim {
        if self.dimension == 2 {
            Dim::Two
        } else {
            Dim::Three
        }
    }

    pub fn fov(&self) -> CliResult<SampleBox<Real>> {
        self.sample.fov.to_box(self.dim())
    }

    pub fn angles(&self) -> Vec<Real> {
        match &self.geometry.angles_deg {
            AnglesConfig::Range {
                start,
                stop,
                count,
                include_stop,
            } => angle_range(*start, *stop, *count, *include_stop),
            AnglesConfig::List(list) => list.clone(),
        }
    }

    pub fn tilt_geometry(&self) -> CliResult<TiltGeometry<Real>> {
        let angles = self.angles();
        let times = match &self.geometry.times {
            Some(t) => t.clone(),
            None => TiltGeometry::uniform_times(angles.len()),
        };
        let g = &self.geometry;
        let out = match self.dim() {
            Dim::Two => TiltGeometry::new_2d(
                angles,
                times,
                g.detector[0],
                g.pixel_size,
                g.shape_sigma,
            ),
            Dim::Three => {
                let tilt_axis = match g.tilt_axis.as_deref() {
                    None | Some("y") => 1,
                    Some("x") => 0,
                    Some(other) => {
                        return Err(CliError::config(format!("unknown tilt axis {other:?}")))
                    }
                };
                TiltGeometry::new_3d(
                    angles,
                    times,
                    [g.detector[0], g.detector[1]],
                    g.pixel_size,
                    g.shape_sigma,
                    tilt_axis,
                )
            }
        };
        out.map_err(CliError::from)
    }

    /// Deformation basis used by the solver and baseline fits, with all
    /// coefficients zero.
    pub fn model_template(&self) -> CliResult<DeformationModel<Real>> {
        let dim = self.dim();
        let fov = self.fov()?;
        let axis_index = |name: &str| -> CliResult<usize> {
            match name {
                "x" => Ok(0),
                "y" => Ok(1),
                "z" => Ok(2),
                other => Err(CliError::config(format!("unknown axis {other:?}"))),
            }
        };
        let mut spatial_axes = [false; 3];
        for name in &self.model.spatial_axes {
            spatial_axes[axis_index(name)?] = true;
        }
        let mut active = Vec::new();
        for name in &self.model.active_components {
            active.push(axis_index(name)?);
        }
        let mut scale = [1.0; 3];
        if self.model.normalize_xy {
            scale[0] = fov.extent(0) / 2.0;
            if dim == Dim::Three {
                scale[1] = fov.extent(1) / 2.0;
            }
        }
        DeformationModel::new(
            dim,
            self.model.spatial_degree,
            self.model.temporal_degree,
            spatial_axes,
            scale,
            active,
        )
        .map_err(CliError::from)
    }

    pub fn phantom_spec(&self, seed: u64) -> CliResult<PhantomSpec<Real>> {
        let phantom = self
            .phantom
            .as_ref()
            .ok_or_else(|| CliError::config("config has no phantom section"))?;
        let dim = self.dim();
        let fov = self.fov()?;
        let region = match &self.sample.marker_region {
            Some(b) => b.to_box(dim)?,
            None => fov,
        };
        let half_width = fov.extent(0) / 2.0;
        let ground_truth = match phantom.deformation.as_str() {
            "quadratic-2d" => ground_truth_2d_quadratic(),
            "doming-quadratic" => ground_truth_3d_quadratic(half_width),
            "doming-cubic" => ground_truth_3d_cubic(half_width),
            "none" => self.model_template()?,
            other => {
                return Err(CliError::config(format!(
                    "unknown phantom deformation {other:?}"
                )))
            }
        };
        if ground_truth.dim() != dim {
            return Err(CliError::config(format!(
                "phantom deformation {:?} does not match dimension {}",
                phantom.deformation, self.dimension
            )));
        }
        Ok(PhantomSpec {
            dim,
            fov,
            marker_count: phantom.marker_count,
            marker_region: region,
            shape_sigma: self.geometry.shape_sigma,
            ground_truth,
            seed,
        })
    }

    pub fn noise_mode(&self) -> Option<NoiseMode<Real>> {
        self.noise.as_ref().map(|n| match n.mode {
            NoiseModeConfig::Poisson => NoiseMode::Poisson,
            NoiseModeConfig::Gaussian { variance } => NoiseMode::Gaussian { variance },
        })
    }

    pub fn solver_config(&self) -> CliResult<SolverConfig<Real>> {
        let s = &self.solver;
        let mut config = SolverConfig::new(s.candidate_grid);
        config.n_max = s.n_max;
        config.prune_threshold = s.prune_threshold;
        config.loss_tolerance = s.loss_tolerance;
        config.bcd_rounds = s.bcd_rounds;
        config.deformation_bound = s.deformation_bound;
        config.joint_refine = s.joint_refine;
        if let Some(qn) = &s.quasi_newton {
            config.quasi_newton = QuasiNewtonConfig {
                memory: qn.memory,
                max_iterations: qn.max_iterations,
                grad_tolerance: qn.grad_tolerance,
                ..Default::default()
            };
        }
        config.render = RenderOptions {
            sigma_mode: match s.sigma_mode.as_deref() {
                None | Some("anti-aliased") => SigmaMode::AntiAliased,
                Some("shape-only") => SigmaMode::ShapeOnly,
                Some(other) => {
                    return Err(CliError::config(format!("unknown sigma mode {other:?}")))
                }
            },
            ..Default::default()
        };
        Ok(config)
    }

    pub fn schedule(&self, frame_shape: (usize, usize)) -> CliResult<ResolutionSchedule<Real>> {
        let (etas, tol) = match &self.schedule {
            Some(s) => (
                s.eta_inv.clone(),
                s.loss_tolerance.unwrap_or(self.solver.loss_tolerance),
            ),
            None => (vec![1], self.solver.loss_tolerance),
        };
        make_resolution_schedule(frame_shape, &etas, tol).map_err(CliError::from)
    }
}
