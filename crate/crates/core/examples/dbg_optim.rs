use sparsealign::baseline::{dm_fit, generate_traces};
use sparsealign::evaluate::error_report_from_models;
use sparsealign::forward::{render_stack, RenderOptions};
use sparsealign::geometry::{angle_range, SampleBox, TiltGeometry};
use sparsealign::markers::MarkerSet;
use sparsealign::optim::QuasiNewtonConfig;
use sparsealign::simulate::{ground_truth_2d_quadratic, make_phantom, PhantomSpec};
use sparsealign::solver::{run_sparsealign, SolverConfig};
use sparsealign::Dim;
use std::time::Instant;

fn main() {
    let n_theta = 20;
    let geo = TiltGeometry::new_2d(
        angle_range(-70.0, 70.0, n_theta, false),
        TiltGeometry::uniform_times(n_theta),
        64, 1.0 / 64.0, 0.03125,
    ).unwrap();
    let fov = SampleBox::planar((-0.5, 0.5), (-0.5, 0.5));
    for seed in [7u64, 0, 5, 6, 8, 9] {
        let spec = PhantomSpec {
            dim: Dim::Two, fov, marker_count: 10,
            marker_region: SampleBox::planar((-0.4, 0.4), (-0.1, 0.1)),
            shape_sigma: 0.03125,
            ground_truth: ground_truth_2d_quadratic::<f64>(),
            seed,
        };
        let (gt_markers, gt_model) = make_phantom(&spec).unwrap();
        let opts = RenderOptions::default();
        let data = render_stack(&gt_markers, &gt_model, &geo, 1, &opts).unwrap();

        let t0 = Instant::now();
        // Phase 1: plain block descent to discover the support.
        let mut c1 = SolverConfig::new([64, 1, 64]);
        c1.n_max = 16;
        c1.loss_tolerance = 1e-9;
        let s1 = run_sparsealign(&data, &c1, MarkerSet::empty(Dim::Two, fov), gt_model.zeroed()).unwrap();
        // Clean hand-off: discard low-weight markers, re-solve weights.
        let mut markers = s1.markers.clone();
        markers.prune(0.1);
        let w = sparsealign::solver::solve_weights(&markers, &s1.model, &data, &opts).unwrap();
        markers.set_weights(w).unwrap();
        // Phase 2: polish with the joint block enabled.
        let mut c2 = c1.clone();
        c2.n_max = 10;
        c2.loss_tolerance = 1e-17;
        c2.joint_refine = true;
        c2.quasi_newton = QuasiNewtonConfig { max_iterations: 800, grad_tolerance: 1e-14, ..Default::default() };
        let s2 = run_sparsealign(&data, &c2, markers, s1.model.clone()).unwrap();
        let sa_time = t0.elapsed();

        let traces = generate_traces(&gt_markers, &gt_model, &geo);
        let qn = QuasiNewtonConfig { max_iterations: 2000, grad_tolerance: 1e-13, ..Default::default() };
        let dm = dm_fit(&traces, &geo, &gt_model, &fov, 10.0, &qn).unwrap();

        let grid = [1000, 1, 1000];
        let sa = error_report_from_models(&gt_model, &s2.model, &fov, grid, &gt_markers).unwrap();
        let dmr = error_report_from_models(&gt_model, &dm.model, &fov, grid, &gt_markers).unwrap();
        println!(
            "seed {seed}: SA loss {:.2e} ({:.1?}) E_m {:.2e} | DM E_m {:.2e} | ratio {:.3}",
            s2.final_loss, sa_time, sa.e_markers, dmr.e_markers, sa.e_markers / dmr.e_markers
        );
    }
}
