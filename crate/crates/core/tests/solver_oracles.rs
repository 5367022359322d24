//! Independent oracles for the solver building blocks: an exhaustive
//! naive candidate scan, unconstrained normal equations for the weight
//! solve, and naive loss accumulation.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use sparsealign::deform::DeformationModel;
use sparsealign::forward::{
    loss_and_residual, render_single, render_stack, RenderOptions, TiltStack,
};
use sparsealign::geometry::{angle_range, Dim, SampleBox, TiltGeometry};
use sparsealign::markers::MarkerSet;
use sparsealign::simulate::{ground_truth_2d_quadratic, make_phantom, PhantomSpec};
use sparsealign::solver::{lmo_select, solve_weights, SolverConfig};

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

fn zero_model_2d() -> DeformationModel<f64> {
    DeformationModel::new(Dim::Two, 2, 1, [true, false, true], [1.0; 3], vec![2]).unwrap()
}

/// Naive per-pixel single-marker rendering: evaluates the truncated,
/// boundary-shifted Gaussian at every detector pixel with no windowing or
/// separability shortcuts.
fn naive_single(
    r: &[f64; 3],
    model: &DeformationModel<f64>,
    geo: &TiltGeometry<f64>,
    opts: &RenderOptions<f64>,
) -> Vec<Vec<Vec<f64>>> {
    let sigma = opts.sigma_eff(geo, 1);
    let shift = (-(opts.truncation_sigmas * opts.truncation_sigmas) / 2.0).exp();
    let radius = opts.truncation_sigmas * sigma;
    let [n_u, n_v] = geo.detector_shape();
    let mut frames = Vec::new();
    for frame in 0..geo.n_frames() {
        let t = geo.times()[frame];
        let d = model.eval(r, t);
        let q = geo.project(frame, &[r[0] + d[0], r[1] + d[1], r[2] + d[2]]);
        let mut img = vec![vec![0.0; n_u]; n_v];
        for (iv, row) in img.iter_mut().enumerate() {
            let dv = if n_v == 1 {
                0.0
            } else {
                geo.axis_coord(1, iv, 1) - q[1]
            };
            let fv = if n_v == 1 {
                1.0
            } else if dv.abs() <= radius {
                (-dv * dv / (2.0 * sigma * sigma)).exp() - shift
            } else {
                0.0
            };
            for (iu, px) in row.iter_mut().enumerate() {
                let du = geo.axis_coord(0, iu, 1) - q[0];
                let fu = if du.abs() <= radius {
                    (-du * du / (2.0 * sigma * sigma)).exp() - shift
                } else {
                    0.0
                };
                *px = fu * fv;
            }
        }
        frames.push(img);
    }
    frames
}

/// Exhaustive scan, same node enumeration as the solver but rendered and
/// correlated with plain nested loops over all pixels.
fn naive_lmo(
    residual: &TiltStack<f64>,
    bounds: &SampleBox<f64>,
    model: &DeformationModel<f64>,
    grid_shape: [usize; 3],
    opts: &RenderOptions<f64>,
) -> (usize, [f64; 3], f64) {
    let nodes_along = |axis: usize, n: usize| -> Vec<f64> {
        let (lo, hi) = (bounds.lo[axis], bounds.hi[axis]);
        if n == 1 || hi <= lo {
            return vec![(lo + hi) / 2.0];
        }
        (0..n)
            .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).clamp(lo, hi))
            .collect()
    };
    let xs = nodes_along(0, grid_shape[0]);
    let ys = nodes_along(1, grid_shape[1]);
    let zs = nodes_along(2, grid_shape[2]);
    let geo = residual.geometry();
    let mut best = (0usize, [0.0; 3], f64::INFINITY);
    let mut index = 0usize;
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                let psi = naive_single(&[x, y, z], model, geo, opts);
                let mut ip = 0.0;
                for (t, img) in psi.iter().enumerate() {
                    for (iv, row) in img.iter().enumerate() {
                        for (iu, v) in row.iter().enumerate() {
                            ip += v * residual.frames()[t][(iv, iu)];
                        }
                    }
                }
                let value = 2.0 * ip;
                if value < best.2 {
                    best = (index, [x, y, z], value);
                }
                index += 1;
            }
        }
    }
    best
}

#[test]
fn lmo_matches_exhaustive_scan() {
    let geo = geo_2d(10);
    let opts = RenderOptions::default();
    let mut rng = StdRng::seed_from_u64(55);
    let grid = [24, 1, 24];
    for _ in 0..12 {
        // Random residual: data minus a random partial model.
        let m = rng.random_range(1..4);
        let locs: Vec<[f64; 3]> = (0..m)
            .map(|_| [rng.random_range(-0.4..0.4), 0.0, rng.random_range(-0.1..0.1)])
            .collect();
        let markers = MarkerSet::new(Dim::Two, fov_2d(), locs, vec![1.0; m]).unwrap();
        let model = zero_model_2d();
        let data = render_stack(&markers, &model, &geo, 1, &opts).unwrap();
        let partial = MarkerSet::new(
            Dim::Two,
            fov_2d(),
            vec![[rng.random_range(-0.3..0.3), 0.0, rng.random_range(-0.1..0.1)]],
            vec![rng.random_range(0.2..0.9)],
        )
        .unwrap();
        let (_, residual) = loss_and_residual(&partial, &model, &data, &opts).unwrap();

        let ours = lmo_select(&residual, &fov_2d(), &model, grid, &opts);
        let (naive_index, naive_loc, naive_value) =
            naive_lmo(&residual, &fov_2d(), &model, grid, &opts);
        assert_eq!(ours.linear_index, naive_index);
        assert_eq!(ours.location, naive_loc);
        assert!(
            (ours.value - naive_value).abs() <= 1e-9 * naive_value.abs().max(1.0),
            "value {} vs naive {}",
            ours.value,
            naive_value
        );
    }
}

#[test]
fn lmo_recovers_exact_grid_node() {
    let geo = geo_2d(10);
    let opts = RenderOptions::default();
    let model = zero_model_2d();
    let grid = [17, 1, 17];
    // Data is a unit marker placed exactly on a grid node.
    let node = |i: usize, n: usize| -> f64 { -0.5 + i as f64 / (n - 1) as f64 };
    let r0 = [node(11, 17), 0.0, node(9, 17)];
    let markers = MarkerSet::new(Dim::Two, fov_2d(), vec![r0], vec![1.0]).unwrap();
    let data = render_stack(&markers, &model, &geo, 1, &opts).unwrap();
    let empty = MarkerSet::empty(Dim::Two, fov_2d());
    let (_, residual) = loss_and_residual(&empty, &model, &data, &opts).unwrap();
    let choice = lmo_select(&residual, &fov_2d(), &model, grid, &opts);
    assert_eq!(choice.linear_index, 11 * 17 + 9);
    assert!((choice.location[0] - r0[0]).abs() < 1e-12);
    assert!((choice.location[2] - r0[2]).abs() < 1e-12);
}

#[test]
fn lmo_tie_breaks_to_lowest_index_on_zero_residual() {
    let geo = geo_2d(6);
    let opts = RenderOptions::default();
    let model = zero_model_2d();
    let residual = TiltStack::zeros(geo, 1).unwrap();
    let choice = lmo_select(&residual, &fov_2d(), &model, [9, 1, 9], &opts);
    assert_eq!(choice.linear_index, 0);
    assert_eq!(choice.value, 0.0);
}

#[test]
fn lmo_first_pick_on_phantom_is_central() {
    // With all deformation coefficients zero the model only matches the
    // data near the field-of-view center where displacements are smallest,
    // so the first insertion lands closer to the center than the average
    // marker.
    let geo = geo_2d(20);
    let opts = RenderOptions::default();
    let spec = PhantomSpec {
        dim: Dim::Two,
        fov: fov_2d(),
        marker_count: 10,
        marker_region: SampleBox::planar((-0.4, 0.4), (-0.1, 0.1)),
        shape_sigma: 0.03125,
        ground_truth: ground_truth_2d_quadratic::<f64>(),
        seed: 7,
    };
    let (gt_markers, gt_model) = make_phantom(&spec).unwrap();
    let data = render_stack(&gt_markers, &gt_model, &geo, 1, &opts).unwrap();
    let empty = MarkerSet::empty(Dim::Two, fov_2d());
    let (_, residual) = loss_and_residual(&empty, &gt_model.zeroed(), &data, &opts).unwrap();
    let choice = lmo_select(&residual, &fov_2d(), &gt_model.zeroed(), [64, 1, 64], &opts);
    let radius = |r: &[f64; 3]| (r[0] * r[0] + r[2] * r[2]).sqrt();
    let mean_radius: f64 =
        gt_markers.locations().iter().map(radius).sum::<f64>() / gt_markers.len() as f64;
    assert!(
        radius(&choice.location) < mean_radius,
        "first pick at radius {} vs mean marker radius {}",
        radius(&choice.location),
        mean_radius
    );
}

/// Unconstrained least-squares oracle by Gaussian elimination on the
/// normal equations built from naively rendered unit stacks.
fn normal_equations_oracle(
    markers: &MarkerSet<f64>,
    model: &DeformationModel<f64>,
    data: &TiltStack<f64>,
    opts: &RenderOptions<f64>,
) -> Vec<f64> {
    let geo = data.geometry();
    let m = markers.len();
    let stacks: Vec<Vec<Vec<Vec<f64>>>> = markers
        .locations()
        .iter()
        .map(|r| naive_single(r, model, geo, opts))
        .collect();
    let dot = |a: &Vec<Vec<Vec<f64>>>, b: &Vec<Vec<Vec<f64>>>| -> f64 {
        let mut acc = 0.0;
        for (fa, fb) in a.iter().zip(b) {
            for (ra, rb) in fa.iter().zip(fb) {
                for (x, y) in ra.iter().zip(rb) {
                    acc += x * y;
                }
            }
        }
        acc
    };
    let dot_data = |a: &Vec<Vec<Vec<f64>>>| -> f64 {
        let mut acc = 0.0;
        for (t, fa) in a.iter().enumerate() {
            for (iv, ra) in fa.iter().enumerate() {
                for (iu, x) in ra.iter().enumerate() {
                    acc += x * data.frames()[t][(iv, iu)];
                }
            }
        }
        acc
    };
    let mut aug = vec![vec![0.0; m + 1]; m];
    for j in 0..m {
        for k in 0..m {
            aug[j][k] = dot(&stacks[j], &stacks[k]);
        }
        aug[j][m] = dot_data(&stacks[j]);
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..m {
        let piv = (col..m)
            .max_by(|a, b| aug[*a][col].abs().partial_cmp(&aug[*b][col].abs()).unwrap())
            .unwrap();
        aug.swap(col, piv);
        let d = aug[col][col];
        for k in col..=m {
            aug[col][k] /= d;
        }
        for row in 0..m {
            if row != col {
                let f = aug[row][col];
                for k in col..=m {
                    aug[row][k] -= f * aug[col][k];
                }
            }
        }
    }
    (0..m).map(|j| aug[j][m]).collect()
}

#[test]
fn weight_solve_matches_normal_equations_on_interior_instances() {
    let geo = geo_2d(12);
    let opts = RenderOptions::default();
    let model = zero_model_2d();
    let mut rng = StdRng::seed_from_u64(99);
    for _ in 0..6 {
        // Well-separated markers with interior weights.
        let locs = vec![
            [rng.random_range(-0.4..-0.2), 0.0, rng.random_range(-0.1..0.1)],
            [rng.random_range(-0.05..0.05), 0.0, rng.random_range(-0.1..0.1)],
            [rng.random_range(0.2..0.4), 0.0, rng.random_range(-0.1..0.1)],
        ];
        let true_w = vec![
            rng.random_range(0.2..0.9),
            rng.random_range(0.2..0.9),
            rng.random_range(0.2..0.9),
        ];
        let gen = MarkerSet::new(Dim::Two, fov_2d(), locs.clone(), true_w.clone()).unwrap();
        let data = render_stack(&gen, &model, &geo, 1, &opts).unwrap();
        let state = MarkerSet::new(Dim::Two, fov_2d(), locs, vec![0.0; 3]).unwrap();
        let solved = solve_weights(&state, &model, &data, &opts).unwrap();
        let oracle = normal_equations_oracle(&state, &model, &data, &opts);
        for j in 0..3 {
            assert!(
                (solved[j] - oracle[j]).abs() < 1e-6,
                "weight {j}: {} vs oracle {}",
                solved[j],
                oracle[j]
            );
            assert!((solved[j] - true_w[j]).abs() < 1e-6);
        }
    }
}

#[test]
fn weight_solve_recovers_two_marker_split() {
    let geo = geo_2d(12);
    let opts = RenderOptions::default();
    let model = zero_model_2d();
    let locs = vec![[-0.25, 0.0, 0.05], [0.3, 0.0, -0.07]];
    let gen = MarkerSet::new(Dim::Two, fov_2d(), locs.clone(), vec![0.7, 0.3]).unwrap();
    let data = render_stack(&gen, &model, &geo, 1, &opts).unwrap();
    let state = MarkerSet::new(Dim::Two, fov_2d(), locs, vec![0.5, 0.5]).unwrap();
    let solved = solve_weights(&state, &model, &data, &opts).unwrap();
    assert!((solved[0] - 0.7).abs() < 1e-6, "{solved:?}");
    assert!((solved[1] - 0.3).abs() < 1e-6, "{solved:?}");
}

#[test]
fn weight_solve_clamps_to_upper_bound() {
    let geo = geo_2d(12);
    let opts = RenderOptions::default();
    let model = zero_model_2d();
    let loc = vec![[0.1, 0.0, 0.02]];
    let gen = MarkerSet::new(Dim::Two, fov_2d(), loc.clone(), vec![1.0]).unwrap();
    // Data twice as bright as a unit marker.
    let mut data = render_stack(&gen, &model, &geo, 1, &opts).unwrap();
    for f in data.frames_mut() {
        f.mapv_inplace(|v| 2.0 * v);
    }
    let state = MarkerSet::new(Dim::Two, fov_2d(), loc, vec![0.2]).unwrap();
    let solved = solve_weights(&state, &model, &data, &opts).unwrap();
    assert_eq!(solved[0], 1.0);
}

#[test]
fn weight_solve_zero_data_gives_zero_weights() {
    let geo = geo_2d(12);
    let opts = RenderOptions::default();
    let model = zero_model_2d();
    let state = MarkerSet::new(
        Dim::Two,
        fov_2d(),
        vec![[0.1, 0.0, 0.02], [-0.2, 0.0, -0.04]],
        vec![0.4, 0.9],
    )
    .unwrap();
    let data = TiltStack::zeros(geo, 1).unwrap();
    let solved = solve_weights(&state, &model, &data, &opts).unwrap();
    assert_eq!(solved, vec![0.0, 0.0]);
}

#[test]
fn loss_matches_naive_accumulation() {
    let geo = geo_2d(14);
    let opts = RenderOptions::default();
    let model = zero_model_2d();
    let mut rng = StdRng::seed_from_u64(404);
    let markers = MarkerSet::new(
        Dim::Two,
        fov_2d(),
        vec![[0.21, 0.0, 0.06], [-0.33, 0.0, -0.02]],
        vec![0.8, 0.55],
    )
    .unwrap();
    let mut data = render_stack(&markers, &model, &geo, 1, &opts).unwrap();
    for f in data.frames_mut() {
        f.mapv_inplace(|v| v + rng.random_range(-0.2..0.2));
    }
    let (loss, residual) = loss_and_residual(&markers, &model, &data, &opts).unwrap();
    // Naive: re-render via the single-marker path and accumulate per pixel.
    let mut naive = 0.0;
    let unit0 = render_single(&markers.location(0), &model, &geo, 1, &opts).unwrap();
    let unit1 = render_single(&markers.location(1), &model, &geo, 1, &opts).unwrap();
    for t in 0..geo_2d(14).n_frames() {
        for iu in 0..64 {
            let r = 0.8 * unit0.frames()[t][(0, iu)] + 0.55 * unit1.frames()[t][(0, iu)]
                - data.frames()[t][(0, iu)];
            naive += r * r;
            assert!((residual.frames()[t][(0, iu)] - r).abs() < 1e-12);
        }
    }
    assert!(
        (loss - naive).abs() <= 1e-12 * naive.abs(),
        "loss {loss} vs naive {naive}"
    );
}

#[test]
fn prune_contribution_verified_by_rerender() {
    let geo = geo_2d(12);
    let opts = RenderOptions::default();
    let model = zero_model_2d();
    let all = MarkerSet::new(
        Dim::Two,
        fov_2d(),
        vec![[0.1, 0.0, 0.03], [-0.2, 0.0, -0.05], [0.35, 0.0, 0.0]],
        vec![0.5, 0.05, 0.8],
    )
    .unwrap();
    let mut survivors = all.clone();
    let removed = survivors.prune(0.1);
    assert_eq!(removed, 1);
    let dropped = MarkerSet::new(
        Dim::Two,
        fov_2d(),
        vec![[-0.2, 0.0, -0.05]],
        vec![0.05],
    )
    .unwrap();
    let full = render_stack(&all, &model, &geo, 1, &opts).unwrap();
    let kept = render_stack(&survivors, &model, &geo, 1, &opts).unwrap();
    let gone = render_stack(&dropped, &model, &geo, 1, &opts).unwrap();
    for t in 0..full.frames().len() {
        for ((a, b), c) in full.frames()[t]
            .iter()
            .zip(kept.frames()[t].iter())
            .zip(gone.frames()[t].iter())
        {
            // Summation order differs between the two routes; equality is
            // expected only up to the last bits.
            assert!((*a - (*b + *c)).abs() <= 1e-14 * a.abs().max(1.0));
        }
    }
}

#[test]
fn solver_config_validation_rejects_bad_values() {
    let mut c = SolverConfig::<f64>::new([8, 1, 8]);
    c.prune_threshold = 1.0;
    let geo = geo_2d(4);
    let data = TiltStack::zeros(geo, 1).unwrap();
    let err = sparsealign::solver::run_sparsealign(
        &data,
        &c,
        MarkerSet::empty(Dim::Two, fov_2d()),
        zero_model_2d(),
    )
    .unwrap_err();
    assert!(matches!(err, sparsealign::Error::InvalidConfig(_)));
}
