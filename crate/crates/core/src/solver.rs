//! Joint marker localization and deformation estimation.
//!
//! The outer loop inserts one candidate marker per iteration by scanning a
//! coarse location grid for the rendering most anti-correlated with the
//! current residual (the linear minimization step of a conditional-gradient
//! method over marker measures). Each insertion is followed by block
//! coordinate descent: a box-constrained weight solve, pruning of
//! negligible markers, a bounded quasi-Newton fit of the deformation
//! coefficients, and a bounded refinement of all marker positions. A
//! coarse-to-fine driver repeats the whole loop over a resolution schedule,
//! warm-starting every level from the previous one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::DeformationModel;
use crate::error::{Error, Result};
use crate::evaluate::ErrorReport;
use crate::forward::{
    correlate_single, loss_and_residual, loss_gradients, render_single, GradRequest,
    RenderOptions, TiltStack,
};
use crate::geometry::SampleBox;
use crate::markers::MarkerSet;
use crate::multires::{downsample_stack, ResolutionSchedule};
use crate::optim::{minimize_bounded, Bounds, QuasiNewtonConfig};
use crate::scalar::Scalar;

/// Tunable parameters of the solver.
#[derive(Debug, Clone)]
pub struct SolverConfig<S> {
    /// Maximum outer iterations (marker insertions) per resolution level.
    pub n_max: usize,
    /// Candidate grid nodes per axis for the insertion scan; degenerate
    /// axes use a single node.
    pub candidate_grid_shape: [usize; 3],
    /// Markers with weight strictly below this are discarded.
    pub prune_threshold: S,
    /// Stop the outer loop when the absolute loss decrease between
    /// consecutive iterations falls below this.
    pub loss_tolerance: S,
    /// Block-coordinate-descent repetitions per outer iteration.
    pub bcd_rounds: usize,
    /// Region the support refinement may move markers in; `None` derives
    /// the sample box inflated by twice the shape width.
    pub refinement_box: Option<SampleBox<S>>,
    /// Symmetric box half-width on every deformation coefficient.
    pub deformation_bound: S,
    /// Append a fully corrective descent (weights, locations and
    /// coefficients jointly) to every BCD round. The separate blocks crawl
    /// along ill-conditioned coupled modes, most notably between a
    /// displacement-field offset and the marker positions; the joint block
    /// resolves them.
    pub joint_refine: bool,
    pub quasi_newton: QuasiNewtonConfig<S>,
    pub render: RenderOptions<S>,
}

impl<S: Scalar> SolverConfig<S> {
    pub fn new(candidate_grid_shape: [usize; 3]) -> Self {
        Self {
            n_max: 30,
            candidate_grid_shape,
            prune_threshold: S::from_f64_c(0.1),
            loss_tolerance: S::from_f64_c(1e-6),
            bcd_rounds: 1,
            refinement_box: None,
            deformation_bound: S::from_f64_c(10.0),
            joint_refine: false,
            quasi_newton: QuasiNewtonConfig::default(),
            render: RenderOptions::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_max < 1 {
            return Err(Error::InvalidConfig("n_max must be >= 1".into()));
        }
        if self.prune_threshold < S::zero() || self.prune_threshold >= S::one() {
            return Err(Error::InvalidConfig(
                "prune threshold must lie in [0, 1)".into(),
            ));
        }
        if self.loss_tolerance <= S::zero() {
            return Err(Error::InvalidConfig("loss tolerance must be > 0".into()));
        }
        if self.bcd_rounds < 1 {
            return Err(Error::InvalidConfig("bcd_rounds must be >= 1".into()));
        }
        if self.candidate_grid_shape.iter().any(|n| *n == 0) {
            return Err(Error::InvalidConfig("empty candidate grid".into()));
        }
        Ok(())
    }
}

/// Which point of the iteration a loss value was measured at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BcdStage {
    /// Loss of the warm-start state before any iteration.
    Entry,
    /// After inserting the new zero-weight marker (loss unchanged).
    Insert,
    /// After the weight solve.
    Weights,
    /// After pruning plus the follow-up weight re-solve (one unit).
    Prune,
    /// After the deformation coefficient fit.
    Deformation,
    /// After the marker support refinement.
    Support,
    /// After the optional final joint location + coefficient refinement.
    JointRefine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord<S> {
    pub eta_inv: u32,
    pub outer_iteration: usize,
    pub stage: BcdStage,
    pub loss: S,
}

/// Mutable state threaded through the outer loop.
#[derive(Debug, Clone)]
pub struct SolverState<S> {
    pub markers: MarkerSet<S>,
    pub model: DeformationModel<S>,
    /// Residual stack of the most recent loss evaluation.
    pub residual: Option<TiltStack<S>>,
    pub loss_history: Vec<LossRecord<S>>,
    pub eta_inv: u32,
    pub outer_iterations: usize,
    pub final_loss: S,
}

impl<S: Scalar> SolverState<S> {
    pub fn new(markers: MarkerSet<S>, model: DeformationModel<S>, eta_inv: u32) -> Self {
        Self {
            markers,
            model,
            residual: None,
            loss_history: Vec::new(),
            eta_inv,
            outer_iterations: 0,
            final_loss: S::infinity(),
        }
    }

    fn record(&mut self, outer_iteration: usize, stage: BcdStage, loss: S) {
        self.loss_history.push(LossRecord {
            eta_inv: self.eta_inv,
            outer_iteration,
            stage,
            loss,
        });
    }
}

/// Outcome of the candidate scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmoChoice<S> {
    pub location: [S; 3],
    /// `⟨∇ℓ(ϱ), ψ(r)⟩ = 2⟨ϱ, ψ(r)⟩` at the chosen node.
    pub value: S,
    pub linear_index: usize,
}

/// Grid node coordinates along one axis of `box_`, endpoints included.
fn grid_axis<S: Scalar>(box_: &SampleBox<S>, axis: usize, n: usize) -> Vec<S> {
    let lo = box_.lo[axis];
    let hi = box_.hi[axis];
    if n == 1 || hi <= lo {
        return vec![(lo + hi) / S::from_f64_c(2.0)];
    }
    (0..n)
        .map(|i| {
            let x = lo + (hi - lo) * S::from_usize_c(i) / S::from_usize_c(n - 1);
            x.max(lo).min(hi)
        })
        .collect()
}

/// Scans the candidate grid over `bounds` and returns the node whose
/// unit-weight rendering (under the current deformation model) has the
/// smallest inner product with the loss gradient. Ties break towards the
/// lowest linear index; the grid is traversed x-major, then y, then z.
pub fn lmo_select<S: Scalar>(
    residual: &TiltStack<S>,
    bounds: &SampleBox<S>,
    model: &DeformationModel<S>,
    grid_shape: [usize; 3],
    opts: &RenderOptions<S>,
) -> LmoChoice<S> {
    let xs = grid_axis(bounds, 0, grid_shape[0]);
    let ys = grid_axis(bounds, 1, grid_shape[1]);
    let zs = grid_axis(bounds, 2, grid_shape[2]);
    let two = S::from_f64_c(2.0);
    let (ny, nz) = (ys.len(), zs.len());
    let node = |index: usize| -> [S; 3] {
        [xs[index / (ny * nz)], ys[(index / nz) % ny], zs[index % nz]]
    };
    // Evaluate all nodes, then take the argmin sequentially so ties and
    // results are independent of the thread count.
    let values: Vec<S> = (0..xs.len() * ny * nz)
        .into_par_iter()
        .map(|index| two * correlate_single(&node(index), model, residual, opts))
        .collect();
    let mut best = LmoChoice {
        location: node(0),
        value: S::infinity(),
        linear_index: 0,
    };
    for (index, value) in values.into_iter().enumerate() {
        if value < best.value {
            best = LmoChoice {
                location: node(index),
                value,
                linear_index: index,
            };
        }
    }
    best
}

const WEIGHT_PG_MAX_ITERATIONS: usize = 500;
const WEIGHT_PG_TOLERANCE: f64 = 1e-10;

/// Solves the box-constrained linear least-squares problem for the marker
/// weights (locations and deformation fixed) by projected gradient with an
/// exact quadratic step, safeguarded to never increase the data-fit loss;
/// returns the new weight vector.
pub fn solve_weights<S: Scalar>(
    markers: &MarkerSet<S>,
    model: &DeformationModel<S>,
    data: &TiltStack<S>,
    opts: &RenderOptions<S>,
) -> Result<Vec<S>> {
    let m = markers.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    // Unit renderings and the quadratic form: G[j][k] = <psi_j, psi_k>,
    // c[j] = <psi_j, data>.
    let units: Vec<TiltStack<S>> = markers
        .locations()
        .iter()
        .map(|r| render_single(r, model, data.geometry(), data.eta_inv(), opts))
        .collect::<Result<_>>()?;
    let mut gram = vec![vec![S::zero(); m]; m];
    let mut c = vec![S::zero(); m];
    for j in 0..m {
        c[j] = units[j].dot(data)?;
        for k in j..m {
            let v = units[j].dot(&units[k])?;
            gram[j][k] = v;
            gram[k][j] = v;
        }
    }
    let quad = |w: &[S]| -> S {
        // ||Phi w||^2 - 2 w'c (the constant ||data||^2 cancels in comparisons)
        let mut f = S::zero();
        for j in 0..m {
            let mut gw = S::zero();
            for k in 0..m {
                gw += gram[j][k] * w[k];
            }
            f += w[j] * (gw - S::from_f64_c(2.0) * c[j]);
        }
        f
    };
    let grad = |w: &[S]| -> Vec<S> {
        (0..m)
            .map(|j| {
                let mut gw = S::zero();
                for k in 0..m {
                    gw += gram[j][k] * w[k];
                }
                S::from_f64_c(2.0) * (gw - c[j])
            })
            .collect()
    };
    let project = |w: &mut [S]| {
        for v in w.iter_mut() {
            *v = (*v).max(S::zero()).min(S::one());
        }
    };

    let mut w: Vec<S> = markers.weights().to_vec();
    project(&mut w);
    let entry = w.clone();
    let mut f = quad(&w);
    let tol = S::from_f64_c(WEIGHT_PG_TOLERANCE);
    for _ in 0..WEIGHT_PG_MAX_ITERATIONS {
        let g = grad(&w);
        // Projected-gradient stationarity measure.
        let mut stat = S::zero();
        for j in 0..m {
            let stepped = (w[j] - g[j]).max(S::zero()).min(S::one());
            stat = stat.max((w[j] - stepped).abs());
        }
        if stat <= tol {
            break;
        }
        // Exact minimizing step along -g for the unconstrained quadratic.
        let gg: S = g.iter().map(|v| *v * *v).sum();
        let mut ggg = S::zero();
        for j in 0..m {
            let mut gk = S::zero();
            for k in 0..m {
                gk += gram[j][k] * g[k];
            }
            ggg += g[j] * gk;
        }
        if !(ggg > S::zero()) {
            break;
        }
        let mut alpha = gg / (S::from_f64_c(2.0) * ggg);
        let mut advanced = false;
        for _ in 0..60 {
            let mut cand: Vec<S> = w.iter().zip(&g).map(|(wi, gi)| *wi - alpha * *gi).collect();
            project(&mut cand);
            if cand == w {
                break;
            }
            let fc = quad(&cand);
            if fc <= f {
                w = cand;
                f = fc;
                advanced = true;
                break;
            }
            alpha = alpha / S::from_f64_c(2.0);
        }
        if !advanced {
            break;
        }
    }

    // Finishing sweeps of exact per-coordinate box minimization; these are
    // monotone on the quadratic and land clamped coordinates exactly on
    // the bounds instead of within the gradient tolerance.
    for _ in 0..8 {
        let mut changed = false;
        for j in 0..m {
            if !(gram[j][j] > S::zero()) {
                continue;
            }
            let mut others = S::zero();
            for k in 0..m {
                if k != j {
                    others += gram[j][k] * w[k];
                }
            }
            let opt = ((c[j] - others) / gram[j][j]).max(S::zero()).min(S::one());
            if opt != w[j] {
                w[j] = opt;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // Safeguard against rounding disagreements between the quadratic form
    // and the rendered loss: keep the entry weights unless the rendered
    // loss actually improves.
    let rendered = |weights: &[S]| -> Result<S> {
        let mut trial = markers.clone();
        trial.set_weights(weights.to_vec())?;
        Ok(loss_and_residual(&trial, model, data, opts)?.0)
    };
    if rendered(&w)? <= rendered(&entry)? {
        Ok(w)
    } else {
        Ok(entry)
    }
}

/// Fits the free deformation coefficients by bounded quasi-Newton descent,
/// warm-started at the current coefficients. Never increases the loss; if
/// the search cannot improve, the entry model is returned.
pub fn fit_deformation<S: Scalar>(
    markers: &MarkerSet<S>,
    model: &DeformationModel<S>,
    data: &TiltStack<S>,
    opts: &RenderOptions<S>,
    coefficient_bound: S,
    qn: &QuasiNewtonConfig<S>,
) -> Result<DeformationModel<S>> {
    let n = model.n_params();
    if n == 0 || markers.is_empty() {
        return Ok(model.clone());
    }
    let bounds = Bounds::symmetric(n, coefficient_bound);
    let template = model.clone();
    let objective = |p: &[S]| -> Result<(S, Vec<S>)> {
        let mut trial = template.clone();
        trial.set_params(p)?;
        let out = loss_gradients(
            markers,
            &trial,
            data,
            opts,
            GradRequest {
                params: true,
                ..Default::default()
            },
        )?;
        let g = out.params.unwrap();
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            let (term_index, component) = template.param_location(i);
            return Err(Error::NonFiniteGradient {
                term_index,
                component,
            });
        }
        Ok((out.loss, g))
    };
    let entry_loss = loss_and_residual(markers, model, data, opts)?.0;
    let solved = minimize_bounded(objective, model.params(), &bounds, qn)?;
    if solved.f <= entry_loss {
        let mut out = model.clone();
        out.set_params(&solved.x)?;
        Ok(out)
    } else {
        Ok(model.clone())
    }
}

/// Refines all marker locations jointly inside `region` (weights and
/// deformation fixed) by bounded quasi-Newton descent. Returns the new
/// locations; the loss never increases.
pub fn refine_support<S: Scalar>(
    markers: &MarkerSet<S>,
    model: &DeformationModel<S>,
    data: &TiltStack<S>,
    opts: &RenderOptions<S>,
    region: &SampleBox<S>,
    qn: &QuasiNewtonConfig<S>,
) -> Result<Vec<[S; 3]>> {
    let m = markers.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    if (0..3).any(|a| region.hi[a] < region.lo[a]) {
        return Err(Error::InvalidConfig(
            "refinement region has inverted bounds".into(),
        ));
    }
    for (j, r) in markers.locations().iter().enumerate() {
        if !region.contains(r) {
            return Err(Error::InvalidConfig(format!(
                "marker {j} lies outside the refinement region"
            )));
        }
    }
    // Only axes with nonzero extent are free (y stays pinned for 2D).
    let free_axes: Vec<usize> = (0..3).filter(|a| region.hi[*a] > region.lo[*a]).collect();
    let n_free = free_axes.len();
    let pack = |locs: &[[S; 3]]| -> Vec<S> {
        let mut x = Vec::with_capacity(m * n_free);
        for r in locs {
            for &a in &free_axes {
                x.push(r[a]);
            }
        }
        x
    };
    let unpack = |x: &[S]| -> Vec<[S; 3]> {
        let mut locs: Vec<[S; 3]> = markers.locations().to_vec();
        for (j, loc) in locs.iter_mut().enumerate() {
            for (i, &a) in free_axes.iter().enumerate() {
                loc[a] = x[j * n_free + i];
            }
        }
        locs
    };
    let mut lo = Vec::with_capacity(m * n_free);
    let mut hi = Vec::with_capacity(m * n_free);
    for _ in 0..m {
        for &a in &free_axes {
            lo.push(region.lo[a]);
            hi.push(region.hi[a]);
        }
    }
    let bounds = Bounds { lo, hi };
    let template = markers.clone();
    let objective = |x: &[S]| -> Result<(S, Vec<S>)> {
        let mut trial = template.clone();
        trial.set_locations(unpack(x))?;
        let out = loss_gradients(
            &trial,
            model,
            data,
            opts,
            GradRequest {
                locations: true,
                ..Default::default()
            },
        )?;
        let gr = out.locations.unwrap();
        if let Some(j) = gr.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteMarkerGradient { marker_index: j });
        }
        let mut g = Vec::with_capacity(m * n_free);
        for gj in &gr {
            for &a in &free_axes {
                g.push(gj[a]);
            }
        }
        Ok((out.loss, g))
    };
    let entry_loss = loss_and_residual(markers, model, data, opts)?.0;
    let solved = minimize_bounded(objective, pack(markers.locations()), &bounds, qn)?;
    if solved.f <= entry_loss {
        Ok(unpack(&solved.x))
    } else {
        Ok(markers.locations().to_vec())
    }
}

/// Fully corrective refinement: one bounded quasi-Newton descent over the
/// marker weights, marker locations and deformation coefficients jointly.
/// Returns the refined marker set and model; the loss never increases.
pub fn joint_refine<S: Scalar>(
    markers: &MarkerSet<S>,
    model: &DeformationModel<S>,
    data: &TiltStack<S>,
    opts: &RenderOptions<S>,
    region: &SampleBox<S>,
    coefficient_bound: S,
    qn: &QuasiNewtonConfig<S>,
) -> Result<(MarkerSet<S>, DeformationModel<S>)> {
    let m = markers.len();
    if m == 0 {
        return Ok((markers.clone(), model.clone()));
    }
    let n_params = model.n_params();
    let free_axes: Vec<usize> = (0..3).filter(|a| region.hi[*a] > region.lo[*a]).collect();
    let n_free = free_axes.len();
    let total = m + m * n_free + n_params;
    let mut x0 = Vec::with_capacity(total);
    let mut lo = Vec::with_capacity(total);
    let mut hi = Vec::with_capacity(total);
    for &w in markers.weights() {
        x0.push(w);
        lo.push(S::zero());
        hi.push(S::one());
    }
    for r in markers.locations() {
        for &a in &free_axes {
            x0.push(r[a]);
            lo.push(region.lo[a]);
            hi.push(region.hi[a]);
        }
    }
    x0.extend_from_slice(&model.params());
    lo.extend(std::iter::repeat_n(-coefficient_bound, n_params));
    hi.extend(std::iter::repeat_n(coefficient_bound, n_params));
    let bounds = Bounds { lo, hi };

    let marker_template = markers.clone();
    let model_template = model.clone();
    let unpack = |x: &[S]| -> Result<(MarkerSet<S>, DeformationModel<S>)> {
        let mut trial_markers = marker_template.clone();
        trial_markers.set_weights(x[..m].to_vec())?;
        let mut locs = marker_template.locations().to_vec();
        for (j, loc) in locs.iter_mut().enumerate() {
            for (i, &a) in free_axes.iter().enumerate() {
                loc[a] = x[m + j * n_free + i];
            }
        }
        trial_markers.set_locations(locs)?;
        let mut trial_model = model_template.clone();
        trial_model.set_params(&x[m + m * n_free..])?;
        Ok((trial_markers, trial_model))
    };
    let objective = |x: &[S]| -> Result<(S, Vec<S>)> {
        let (trial_markers, trial_model) = unpack(x)?;
        let out = loss_gradients(
            &trial_markers,
            &trial_model,
            data,
            opts,
            GradRequest {
                weights: true,
                locations: true,
                params: true,
            },
        )?;
        let gw = out.weights.unwrap();
        let gr = out.locations.unwrap();
        let gp = out.params.unwrap();
        let mut g = Vec::with_capacity(total);
        g.extend_from_slice(&gw);
        for gj in &gr {
            for &a in &free_axes {
                g.push(gj[a]);
            }
        }
        g.extend_from_slice(&gp);
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            if i >= m + m * n_free {
                let (term_index, component) =
                    model_template.param_location(i - m - m * n_free);
                return Err(Error::NonFiniteGradient {
                    term_index,
                    component,
                });
            }
            return Err(Error::NonFiniteMarkerGradient {
                marker_index: if i < m { i } else { (i - m) / n_free },
            });
        }
        Ok((out.loss, g))
    };
    let entry_loss = loss_and_residual(markers, model, data, opts)?.0;
    let solved = minimize_bounded(objective, x0, &bounds, qn)?;
    if solved.f <= entry_loss {
        unpack(&solved.x)
    } else {
        Ok((markers.clone(), model.clone()))
    }
}

/// Runs the full insertion + block-coordinate-descent loop on one stack.
///
/// Terminates after `n_max` outer iterations or as soon as the absolute
/// loss change between consecutive outer iterations drops below the
/// configured tolerance. The returned state carries the loss measured
/// after every descent step.
pub fn run_sparsealign<S: Scalar>(
    data: &TiltStack<S>,
    config: &SolverConfig<S>,
    init_markers: MarkerSet<S>,
    init_model: DeformationModel<S>,
) -> Result<SolverState<S>> {
    config.validate()?;
    let opts = &config.render;
    let mut state = SolverState::new(init_markers, init_model, data.eta_inv());
    let refinement_box = config.refinement_box.unwrap_or_else(|| {
        state
            .markers
            .bounds()
            .inflated(S::from_f64_c(2.0) * data.geometry().shape_sigma())
    });

    let context = |iteration: usize| {
        move |e: Error| Error::SolverStep {
            iteration,
            source: Box::new(e),
        }
    };

    let (mut loss, mut residual) =
        loss_and_residual(&state.markers, &state.model, data, opts).map_err(context(0))?;
    state.record(0, BcdStage::Entry, loss);
    let mut previous_exit = loss;

    for n in 1..=config.n_max {
        let ctx = context(n);
        state.outer_iterations = n;

        // Insertion: one candidate marker from the grid scan, weight 0.
        let choice = lmo_select(
            &residual,
            state.markers.bounds(),
            &state.model,
            config.candidate_grid_shape,
            opts,
        );
        state
            .markers
            .push(choice.location, S::zero())
            .map_err(&ctx)?;
        state.record(n, BcdStage::Insert, loss);

        for _ in 0..config.bcd_rounds {
            // (a) weights
            let w = solve_weights(&state.markers, &state.model, data, opts).map_err(&ctx)?;
            state.markers.set_weights(w).map_err(&ctx)?;
            loss = loss_and_residual(&state.markers, &state.model, data, opts)
                .map_err(&ctx)?
                .0;
            state.record(n, BcdStage::Weights, loss);

            // (b) prune + re-solve as one unit. A marker below the weight
            // threshold can still carry real signal; removing it then would
            // raise the loss and destabilize the remaining descent steps, so
            // the unit is reverted when it degrades the fit. Such markers
            // stay around until the final prune of a full run.
            let before_prune = state.markers.clone();
            let removed = state.markers.prune(config.prune_threshold);
            if removed > 0 {
                let w = solve_weights(&state.markers, &state.model, data, opts).map_err(&ctx)?;
                state.markers.set_weights(w).map_err(&ctx)?;
                let pruned_loss = loss_and_residual(&state.markers, &state.model, data, opts)
                    .map_err(&ctx)?
                    .0;
                if pruned_loss <= loss {
                    loss = pruned_loss;
                } else {
                    state.markers = before_prune;
                }
            }
            state.record(n, BcdStage::Prune, loss);

            // (c) deformation coefficients
            state.model = fit_deformation(
                &state.markers,
                &state.model,
                data,
                opts,
                config.deformation_bound,
                &config.quasi_newton,
            )
            .map_err(&ctx)?;
            loss = loss_and_residual(&state.markers, &state.model, data, opts)
                .map_err(&ctx)?
                .0;
            state.record(n, BcdStage::Deformation, loss);

            // (d) support refinement
            let locations = refine_support(
                &state.markers,
                &state.model,
                data,
                opts,
                &refinement_box,
                &config.quasi_newton,
            )
            .map_err(&ctx)?;
            state.markers.set_locations(locations).map_err(&ctx)?;
            let (l, r) =
                loss_and_residual(&state.markers, &state.model, data, opts).map_err(&ctx)?;
            loss = l;
            residual = r;
            state.record(n, BcdStage::Support, loss);

            // (e) optional fully corrective block
            if config.joint_refine && !state.markers.is_empty() {
                let (refined, model) = joint_refine(
                    &state.markers,
                    &state.model,
                    data,
                    opts,
                    &refinement_box,
                    config.deformation_bound,
                    &config.quasi_newton,
                )
                .map_err(&ctx)?;
                state.markers = refined;
                state.model = model;
                let (l, r) =
                    loss_and_residual(&state.markers, &state.model, data, opts).map_err(&ctx)?;
                loss = l;
                residual = r;
                state.record(n, BcdStage::JointRefine, loss);
            }
        }

        let delta = (previous_exit - loss).abs();
        previous_exit = loss;
        if delta < config.loss_tolerance {
            break;
        }
    }

    state.final_loss = previous_exit;
    state.residual = Some(residual);
    Ok(state)
}

/// Loss trace of one resolution level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelTrace<S> {
    pub eta_inv: u32,
    pub outer_iterations: usize,
    pub final_loss: S,
    pub records: Vec<LossRecord<S>>,
}

/// Converged output of a coarse-to-fine run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentResult<S> {
    pub markers: MarkerSet<S>,
    pub model: DeformationModel<S>,
    pub levels: Vec<LevelTrace<S>>,
    /// Loss on the finest solved level after the final prune.
    pub final_loss: S,
    /// Deformation-field error metrics, when ground truth is available.
    pub metrics: Option<ErrorReport<S>>,
}

/// Solves coarse-to-fine over `schedule`: each level downsamples the full
/// data stack directly, runs the solver warm-started from the previous
/// level, and a final prune discards leftover low-weight markers.
pub fn run_coarse_to_fine<S: Scalar>(
    data_full: &TiltStack<S>,
    schedule: &ResolutionSchedule<S>,
    config: &SolverConfig<S>,
    init_markers: MarkerSet<S>,
    init_model: DeformationModel<S>,
) -> Result<AlignmentResult<S>> {
    let mut markers = init_markers;
    let mut model = init_model;
    let mut levels = Vec::with_capacity(schedule.levels().len());
    let mut last_data = None;
    for level in schedule.levels() {
        let data = downsample_stack(data_full, level.eta_inv)?;
        let mut level_config = config.clone();
        level_config.loss_tolerance = level.loss_tolerance;
        let state = run_sparsealign(&data, &level_config, markers, model)?;
        markers = state.markers;
        model = state.model;
        levels.push(LevelTrace {
            eta_inv: level.eta_inv,
            outer_iterations: state.outer_iterations,
            final_loss: state.final_loss,
            records: state.loss_history,
        });
        last_data = Some(data);
    }
    markers.prune(config.prune_threshold);
    let data = last_data.expect("schedule has at least one level");
    let final_loss = loss_and_residual(&markers, &model, &data, &config.render)?.0;
    Ok(AlignmentResult {
        markers,
        model,
        levels,
        final_loss,
        metrics: None,
    })
}
