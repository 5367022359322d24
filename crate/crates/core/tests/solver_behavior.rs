//! Behavioral tests of the descent steps and the full solver loop.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use sparsealign::deform::DeformationModel;
use sparsealign::forward::{loss_and_residual, render_stack, RenderOptions, TiltStack};
use sparsealign::geometry::{angle_range, Dim, SampleBox, TiltGeometry};
use sparsealign::markers::MarkerSet;
use sparsealign::simulate::{ground_truth_2d_quadratic, make_phantom, PhantomSpec};
use sparsealign::solver::{
    fit_deformation, refine_support, run_coarse_to_fine, run_sparsealign, BcdStage, SolverConfig,
};

fn fov_2d() -> SampleBox<f64> {
    SampleBox::planar((-0.5, 0.5), (-0.5, 0.5))
}

fn geo_2d(n_theta: usize) -> TiltGeometry<f64> {
    TiltGeometry::new_2d(
        angle_range(-70.0, 70.0, n_theta, false),
        TiltGeometry::uniform_times(n_theta),
        64,
        1.0 / 64.0,
        0.03125,
    )
    .unwrap()
}

fn phantom_spec(seed: u64) -> PhantomSpec<f64> {
    PhantomSpec {
        dim: Dim::Two,
        fov: fov_2d(),
        marker_count: 10,
        marker_region: SampleBox::planar((-0.4, 0.4), (-0.1, 0.1)),
        shape_sigma: 0.03125,
        ground_truth: ground_truth_2d_quadratic::<f64>(),
        seed,
    }
}

fn solver_config() -> SolverConfig<f64> {
    SolverConfig::new([64, 1, 64])
}

#[test]
fn fit_deformation_recovers_true_coefficients_from_nearby_start() {
    let geo = geo_2d(20);
    let opts = RenderOptions::default();
    let (markers, gt_model) = make_phantom(&phantom_spec(7)).unwrap();
    let data = render_stack(&markers, &gt_model, &geo, 1, &opts).unwrap();
    let mut start = gt_model.clone();
    let p_star = gt_model.params();
    let p0: Vec<f64> = p_star.iter().map(|v| 0.9 * v).collect();
    start.set_params(&p0).unwrap();
    let fitted = fit_deformation(&markers, &start, &data, &opts, 10.0, &Default::default())
        .unwrap();
    let p_fit = fitted.params();
    let scale = p_star.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = p_fit
        .iter()
        .zip(&p_star)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err < 1e-4 * scale, "coefficient error {err} vs scale {scale}");
}

#[test]
fn fit_deformation_is_stationary_at_zero_truth() {
    let geo = geo_2d(12);
    let opts = RenderOptions::default();
    let (markers, gt_model) = make_phantom(&phantom_spec(3)).unwrap();
    let zero = gt_model.zeroed();
    let data = render_stack(&markers, &zero, &geo, 1, &opts).unwrap();
    let fitted = fit_deformation(&markers, &zero, &data, &opts, 10.0, &Default::default())
        .unwrap();
    assert!(fitted.params().iter().all(|p| p.abs() < 1e-12));
}

#[test]
fn fit_deformation_never_increases_loss() {
    let geo = geo_2d(10);
    let opts = RenderOptions::default();
    let mut rng = StdRng::seed_from_u64(42);
    for _ in 0..20 {
        let m = rng.random_range(2..6);
        let locs: Vec<[f64; 3]> = (0..m)
            .map(|_| [rng.random_range(-0.4..0.4), 0.0, rng.random_range(-0.1..0.1)])
            .collect();
        let weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
        let markers = MarkerSet::new(Dim::Two, fov_2d(), locs, weights).unwrap();
        let mut model = ground_truth_2d_quadratic::<f64>();
        let p: Vec<f64> = (0..model.n_params()).map(|_| rng.random_range(-1.5..1.5)).collect();
        model.set_params(&p).unwrap();
        // Random data: rendered from a different random configuration.
        let m2 = rng.random_range(2..6);
        let locs2: Vec<[f64; 3]> = (0..m2)
            .map(|_| [rng.random_range(-0.4..0.4), 0.0, rng.random_range(-0.1..0.1)])
            .collect();
        let gen = MarkerSet::new(Dim::Two, fov_2d(), locs2, vec![1.0; m2]).unwrap();
        let data = render_stack(&gen, &ground_truth_2d_quadratic(), &geo, 1, &opts).unwrap();

        let entry = loss_and_residual(&markers, &model, &data, &opts).unwrap().0;
        let fitted =
            fit_deformation(&markers, &model, &data, &opts, 10.0, &Default::default()).unwrap();
        let exit = loss_and_residual(&markers, &fitted, &data, &opts).unwrap().0;
        assert!(exit <= entry, "exit {exit} > entry {entry}");
    }
}

#[test]
fn refine_support_reaches_subpixel_accuracy_from_grid_node() {
    let geo = geo_2d(16);
    let opts = RenderOptions::default();
    let model = ground_truth_2d_quadratic::<f64>().zeroed();
    // Off-grid truth; start from the nearest 64x64 grid node.
    let truth = [0.1234, 0.0, -0.0567];
    let gen = MarkerSet::new(Dim::Two, fov_2d(), vec![truth], vec![1.0]).unwrap();
    let data = render_stack(&gen, &model, &geo, 1, &opts).unwrap();
    let node = |v: f64| (v * 63.0 / 1.0).round() / 63.0; // nearest grid node of the LMO lattice
    let start = [node(truth[0] + 0.5) - 0.5, 0.0, node(truth[2] + 0.5) - 0.5];
    let markers = MarkerSet::new(Dim::Two, fov_2d(), vec![start], vec![1.0]).unwrap();
    let region = fov_2d().inflated(2.0 * 0.03125);
    let refined = refine_support(&markers, &model, &data, &opts, &region, &Default::default())
        .unwrap();
    let err = ((refined[0][0] - truth[0]).powi(2) + (refined[0][2] - truth[2]).powi(2)).sqrt();
    assert!(
        err < 0.1 / 64.0,
        "refined within {} px of truth",
        err * 64.0
    );
}

#[test]
fn refine_support_leaves_optimum_unchanged() {
    let geo = geo_2d(12);
    let opts = RenderOptions::default();
    let model = ground_truth_2d_quadratic::<f64>();
    let (markers, _) = make_phantom(&phantom_spec(5)).unwrap();
    let data = render_stack(&markers, &model, &geo, 1, &opts).unwrap();
    let region = fov_2d().inflated(2.0 * 0.03125);
    let refined = refine_support(&markers, &model, &data, &opts, &region, &Default::default())
        .unwrap();
    for (r, r0) in refined.iter().zip(markers.locations()) {
        for a in 0..3 {
            assert!(
                (r[a] - r0[a]).abs() < 1e-9,
                "already-optimal marker moved by {}",
                (r[a] - r0[a]).abs()
            );
        }
    }
}

#[test]
fn refine_support_moves_boundary_marker_inward() {
    let geo = geo_2d(12);
    let opts = RenderOptions::default();
    let model = ground_truth_2d_quadratic::<f64>().zeroed();
    let truth = [0.2, 0.0, 0.0];
    let gen = MarkerSet::new(Dim::Two, fov_2d(), vec![truth], vec![1.0]).unwrap();
    let data = render_stack(&gen, &model, &geo, 1, &opts).unwrap();
    // Start on the refinement-region boundary with the optimum inside.
    let region = SampleBox::planar((0.15, 0.3), (-0.05, 0.05));
    let start = [0.3, 0.0, 0.05];
    let markers = MarkerSet::new(Dim::Two, fov_2d(), vec![start], vec![1.0]).unwrap();
    let refined = refine_support(&markers, &model, &data, &opts, &region, &Default::default())
        .unwrap();
    assert!(refined[0][0] < 0.3 && refined[0][0] > 0.15);
    assert!((refined[0][0] - truth[0]).abs() < 1e-3);
}

#[test]
fn all_zero_data_terminates_after_one_iteration() {
    let geo = geo_2d(10);
    let data = TiltStack::zeros(geo, 1).unwrap();
    let config = solver_config();
    let state = run_sparsealign(
        &data,
        &config,
        MarkerSet::empty(Dim::Two, fov_2d()),
        ground_truth_2d_quadratic::<f64>().zeroed(),
    )
    .unwrap();
    assert_eq!(state.outer_iterations, 1);
    assert_eq!(state.final_loss, 0.0);
    assert!(state.markers.is_empty());
}

#[test]
fn phantom_markers_localized_within_one_pixel_by_iteration_15() {
    let geo = geo_2d(20);
    let opts = RenderOptions::default();
    let (gt_markers, gt_model) = make_phantom(&phantom_spec(7)).unwrap();
    let data = render_stack(&gt_markers, &gt_model, &geo, 1, &opts).unwrap();
    let mut config = solver_config();
    config.n_max = 15;
    let state = run_sparsealign(
        &data,
        &config,
        MarkerSet::empty(Dim::Two, fov_2d()),
        gt_model.zeroed(),
    )
    .unwrap();
    let matching = sparsealign::evaluate::match_markers(&state.markers, &gt_markers, 1.0 / 64.0)
        .unwrap();
    assert_eq!(
        matching.unmatched_gt.len(),
        0,
        "all phantom markers matched within one detector pixel"
    );
}

#[test]
fn bcd_stage_losses_are_non_increasing_within_iterations() {
    let geo = geo_2d(20);
    let opts = RenderOptions::default();
    for seed in [0u64, 1, 2, 3, 4] {
        let (gt_markers, gt_model) = make_phantom(&phantom_spec(seed)).unwrap();
        let data = render_stack(&gt_markers, &gt_model, &geo, 1, &opts).unwrap();
        let mut config = solver_config();
        config.n_max = 14;
        let state = run_sparsealign(
            &data,
            &config,
            MarkerSet::empty(Dim::Two, fov_2d()),
            gt_model.zeroed(),
        )
        .unwrap();
        for w in state.loss_history.windows(2) {
            if w[1].outer_iteration == w[0].outer_iteration && w[1].stage != BcdStage::Insert {
                assert!(
                    w[1].loss <= w[0].loss,
                    "seed {seed} iteration {}: {:?} {} -> {:?} {}",
                    w[1].outer_iteration,
                    w[0].stage,
                    w[0].loss,
                    w[1].stage,
                    w[1].loss
                );
            }
        }
    }
}

#[test]
fn weights_stay_in_unit_interval_over_a_full_run() {
    // MarkerSet::set_weights validates on every update, so a completed run
    // plus a valid end state certify the invariant; check the end state.
    let geo = geo_2d(20);
    let opts = RenderOptions::default();
    let (gt_markers, gt_model) = make_phantom(&phantom_spec(9)).unwrap();
    let data = render_stack(&gt_markers, &gt_model, &geo, 1, &opts).unwrap();
    let mut config = solver_config();
    config.n_max = 12;
    let state = run_sparsealign(
        &data,
        &config,
        MarkerSet::empty(Dim::Two, fov_2d()),
        gt_model.zeroed(),
    )
    .unwrap();
    assert!(state
        .markers
        .weights()
        .iter()
        .all(|w| (0.0..=1.0).contains(w)));
    assert!(state.markers.len() <= state.outer_iterations);
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let geo = geo_2d(16);
    let opts = RenderOptions::default();
    let (gt_markers, gt_model) = make_phantom(&phantom_spec(11)).unwrap();
    let data = render_stack(&gt_markers, &gt_model, &geo, 1, &opts).unwrap();
    let mut config = solver_config();
    config.n_max = 8;
    let run = || {
        run_sparsealign(
            &data,
            &config,
            MarkerSet::empty(Dim::Two, fov_2d()),
            gt_model.zeroed(),
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.loss_history.len(), b.loss_history.len());
    for (ra, rb) in a.loss_history.iter().zip(&b.loss_history) {
        assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
    }
    assert_eq!(a.markers, b.markers);
    assert_eq!(a.model.coeffs(), b.model.coeffs());
}

#[test]
fn single_level_schedule_equals_direct_run() {
    let geo = geo_2d(14);
    let opts = RenderOptions::default();
    let (gt_markers, gt_model) = make_phantom(&phantom_spec(13)).unwrap();
    let data = render_stack(&gt_markers, &gt_model, &geo, 1, &opts).unwrap();
    let mut config = solver_config();
    config.n_max = 8;
    let schedule =
        sparsealign::multires::make_resolution_schedule((1, 64), &[1], config.loss_tolerance)
            .unwrap();
    let direct = run_sparsealign(
        &data,
        &config,
        MarkerSet::empty(Dim::Two, fov_2d()),
        gt_model.zeroed(),
    )
    .unwrap();
    let ctf = run_coarse_to_fine(
        &data,
        &schedule,
        &config,
        MarkerSet::empty(Dim::Two, fov_2d()),
        gt_model.zeroed(),
    )
    .unwrap();
    assert_eq!(ctf.levels.len(), 1);
    assert_eq!(ctf.levels[0].records.len(), direct.loss_history.len());
    for (ra, rb) in ctf.levels[0].records.iter().zip(&direct.loss_history) {
        assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
    }
    // The driver applies the final prune on top of the direct state.
    let mut pruned = direct.markers.clone();
    pruned.prune(config.prune_threshold);
    assert_eq!(ctf.markers, pruned);
}

#[test]
fn warm_start_beats_cold_start_at_the_next_level() {
    let geo = geo_2d(16);
    let opts = RenderOptions::default();
    let (gt_markers, gt_model) = make_phantom(&phantom_spec(17)).unwrap();
    let data_full = render_stack(&gt_markers, &gt_model, &geo, 1, &opts).unwrap();
    let coarse = sparsealign::multires::downsample_stack(&data_full, 4).unwrap();
    let fine = sparsealign::multires::downsample_stack(&data_full, 2).unwrap();
    let mut config = solver_config();
    config.candidate_grid_shape = [32, 1, 32];
    config.n_max = 12;
    let coarse_state = run_sparsealign(
        &coarse,
        &config,
        MarkerSet::empty(Dim::Two, fov_2d()),
        gt_model.zeroed(),
    )
    .unwrap();
    let warm_loss = loss_and_residual(&coarse_state.markers, &coarse_state.model, &fine, &opts)
        .unwrap()
        .0;
    let cold_loss = loss_and_residual(
        &MarkerSet::empty(Dim::Two, fov_2d()),
        &gt_model.zeroed(),
        &fine,
        &opts,
    )
    .unwrap()
    .0;
    assert!(
        warm_loss < cold_loss,
        "warm {warm_loss} vs cold {cold_loss}"
    );
}

#[test]
fn solver_error_carries_iteration_context() {
    // A failure caught inside the loop surfaces with the iteration number
    // attached.
    let geo = geo_2d(10);
    let opts = RenderOptions::default();
    let (gt_markers, gt_model) = make_phantom(&phantom_spec(19)).unwrap();
    let data = render_stack(&gt_markers, &gt_model, &geo, 1, &opts).unwrap();
    let mut config = solver_config();
    // Refinement box that cannot contain the inserted marker: triggers a
    // bounds error inside minimize_bounded via inverted bounds.
    config.refinement_box = Some(SampleBox::new([0.3, 0.0, 0.3], [-0.3, 0.0, -0.3]));
    let err = run_sparsealign(
        &data,
        &config,
        MarkerSet::empty(Dim::Two, fov_2d()),
        ground_truth_2d_quadratic::<f64>().zeroed(),
    )
    .unwrap_err();
    match err {
        sparsealign::Error::SolverStep { iteration, .. } => assert_eq!(iteration, 1),
        other => panic!("expected SolverStep context, got {other}"),
    }
}
