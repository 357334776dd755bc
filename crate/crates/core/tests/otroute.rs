//! Solver checks against independent references: a closed form, a
//! linear-domain fixed-point iteration and exhaustive permutation search.

use ndarray::{array, Array1, Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roam_core::otroute::{
    diffuse_log_plan, exact_ot_oracle, graph_sinkhorn, permutation_oracle, sinkhorn, topk_dispatch,
    Marginals, SinkhornParams, Smoothing,
};
use roam_core::tokenizer::{build_region_graph, heat_kernel_weights, RegionGraph, TauMode};

fn random_cost(rng: &mut ChaCha8Rng, m: usize, e: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, e), |_| rng.gen_range(0.0..2.0))
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let v: Array1<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let s = v.sum();
    v / s
}

/// Classical Sinkhorn–Knopp in the linear domain, run far past convergence.
fn fixed_point_reference(
    c: &Array2<f64>,
    r: &Array1<f64>,
    q: &Array1<f64>,
    eps: f64,
    iters: usize,
) -> Array2<f64> {
    let k = c.mapv(|x| (-x / eps).exp());
    let mut u = Array1::<f64>::ones(r.len());
    let mut v = Array1::<f64>::ones(q.len());
    for _ in 0..iters {
        u = r / &k.dot(&v);
        v = q / &k.t().dot(&u);
    }
    let mut p = k;
    for ((i, j), x) in p.indexed_iter_mut() {
        *x *= u[i] * v[j];
    }
    p
}

fn ring_graph(m: usize, centroids: &Array2<f64>) -> RegionGraph<f64> {
    let g = build_region_graph(centroids.view(), 3.min(m - 1)).unwrap();
    heat_kernel_weights(g, centroids.view(), TauMode::Median).unwrap()
}

#[test]
fn constant_cost_gives_independent_coupling() {
    let c = Array2::from_elem((4, 3), 0.8);
    let marg = Marginals::new(array![0.1f64, 0.2, 0.3, 0.4], array![0.5, 0.3, 0.2]).unwrap();
    let plan = sinkhorn(c.view(), &marg, &SinkhornParams::fixed(0.1, 20)).unwrap();
    for ((i, j), &p) in plan.plan.indexed_iter() {
        assert!((p - marg.r[i] * marg.q[j]).abs() < 1e-15);
    }
}

#[test]
fn single_region_takes_the_capacity_vector() {
    let c = array![[0.3f64, 1.7, 0.2, 1.0]];
    let marg = Marginals::new(array![1.0], array![0.4, 0.3, 0.2, 0.1]).unwrap();
    let plan = sinkhorn(c.view(), &marg, &SinkhornParams::fixed(0.1, 5)).unwrap();
    for (p, q) in plan.plan.row(0).iter().zip(marg.q.iter()) {
        assert!((p - q).abs() < 1e-15);
    }
}

#[test]
fn two_by_two_matches_fixed_point_and_closed_form() {
    let c = array![[0.0f64, 1.0], [1.0, 0.0]];
    let marg = Marginals::uniform(2, 2).unwrap();
    let plan = sinkhorn(c.view(), &marg, &SinkhornParams::fixed(0.1, 50)).unwrap();
    let reference = fixed_point_reference(&c, &marg.r, &marg.q, 0.1, 10_000);
    // symmetric solution with cross-ratio exp(2/ε)
    let diag = 0.5 * 10f64.exp() / (1.0 + 10f64.exp());
    let closed = array![[diag, 0.5 - diag], [0.5 - diag, diag]];
    for ((a, b), c) in plan.plan.iter().zip(reference.iter()).zip(closed.iter()) {
        assert!((a - b).abs() < 1e-8, "{a} vs fixed point {b}");
        assert!((a - c).abs() < 1e-8, "{a} vs closed form {c}");
    }
}

#[test]
fn random_rectangular_matches_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = random_cost(&mut rng, 7, 3);
    let marg = Marginals::new(random_simplex(&mut rng, 7), random_simplex(&mut rng, 3)).unwrap();
    let plan = sinkhorn(c.view(), &marg, &SinkhornParams::converged(0.2, 50)).unwrap();
    let reference = fixed_point_reference(&c, &marg.r, &marg.q, 0.2, 10_000);
    for (a, b) in plan.plan.iter().zip(reference.iter()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn small_epsilon_approaches_the_assignment_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..5 {
        let c = random_cost(&mut rng, 5, 5);
        let marg = Marginals::uniform(5, 5).unwrap();
        let plan = sinkhorn(c.view(), &marg, &SinkhornParams::fixed(0.01, 2000)).unwrap();
        let (opt, _) = permutation_oracle(c.view()).unwrap();
        let got = plan.transport_cost(c.view());
        assert!((got - opt).abs() <= 1e-2, "entropic {got} vs exact {opt}");
    }
}

#[test]
fn oracle_lower_bounds_entropic_cost_and_gap_shrinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..4 {
        let c = random_cost(&mut rng, 4, 3);
        let marg =
            Marginals::new(random_simplex(&mut rng, 4), random_simplex(&mut rng, 3)).unwrap();
        let (opt, oplan) = exact_ot_oracle(c.view(), &marg).unwrap();
        for (s, r) in oplan.sum_axis(Axis(1)).iter().zip(marg.r.iter()) {
            assert!((s - r).abs() < 1e-12);
        }
        let mut last_gap = f64::INFINITY;
        for eps in [0.5, 0.1, 0.02] {
            let plan = sinkhorn(c.view(), &marg, &SinkhornParams::converged(eps, 500)).unwrap();
            let gap = plan.transport_cost(c.view()) - opt;
            assert!(gap >= -1e-9, "entropic plan below exact optimum by {gap}");
            assert!(gap <= last_gap + 1e-12);
            last_gap = gap;
        }
    }
}

#[test]
fn zero_lambda_is_plain_sinkhorn() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = random_cost(&mut rng, 12, 4);
    let centroids = Array2::from_shape_fn((12, 2), |_| rng.gen::<f64>());
    let graph = ring_graph(12, &centroids);
    let marg = Marginals::uniform(12, 4).unwrap();
    let params = SinkhornParams::fixed(0.1, 20);
    let smooth = Smoothing {
        lambda: 0.0,
        n_smooth: 3,
        schedule: None,
    };
    let a = graph_sinkhorn(c.view(), &marg, &params, &graph, &smooth).unwrap();
    let b = sinkhorn(c.view(), &marg, &params).unwrap();
    for (x, y) in a.plan.iter().zip(b.plan.iter()) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn lone_region_ignores_smoothing() {
    let c = array![[0.2f64, 1.4, 0.9]];
    let marg = Marginals::new(array![1.0], array![0.2, 0.3, 0.5]).unwrap();
    let graph = build_region_graph(array![[0.0, 0.0]].view(), 8).unwrap();
    let params = SinkhornParams::fixed(0.1, 20);
    let smooth = Smoothing {
        lambda: 0.9,
        n_smooth: 3,
        schedule: None,
    };
    let a = graph_sinkhorn(c.view(), &marg, &params, &graph, &smooth).unwrap();
    let b = sinkhorn(c.view(), &marg, &params).unwrap();
    for (x, y) in a.plan.iter().zip(b.plan.iter()) {
        assert!((x - y).abs() <= 1e-15);
    }
}

#[test]
fn identical_neighbour_rows_stay_identical() {
    let c = array![
        [0.1f64, 1.2, 0.7],
        [0.1, 1.2, 0.7],
        [1.5, 0.2, 0.4],
        [0.9, 0.9, 0.1]
    ];
    let graph =
        RegionGraph::from_neighbors(vec![vec![1, 2], vec![0, 2], vec![3], vec![2]]).unwrap();
    let marg = Marginals::uniform(4, 3).unwrap();
    let smooth = Smoothing {
        lambda: 0.3,
        n_smooth: 3,
        schedule: None,
    };
    let plan = graph_sinkhorn(
        c.view(),
        &marg,
        &SinkhornParams::fixed(0.1, 20),
        &graph,
        &smooth,
    )
    .unwrap();
    assert_eq!(plan.plan.row(0), plan.plan.row(1));
    let col = plan.plan.sum_axis(Axis(0));
    for (s, q) in col.iter().zip(marg.q.iter()) {
        assert!((s - q).abs() <= 1e-12);
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let c = array![[0.0f64, 1.0]];
    let marg = Marginals::new(array![1.0], array![0.5, 0.5]).unwrap();
    assert!(sinkhorn(c.view(), &marg, &SinkhornParams::fixed(0.0, 5)).is_err());
    assert!(sinkhorn(c.view(), &marg, &SinkhornParams::fixed(0.1, 0)).is_err());
    let bad = array![[f64::NAN, 1.0]];
    assert!(sinkhorn(bad.view(), &marg, &SinkhornParams::fixed(0.1, 5)).is_err());
    let graph = RegionGraph::<f64>::from_neighbors(vec![vec![1], vec![0]]).unwrap();
    let smooth = Smoothing {
        lambda: 0.3,
        n_smooth: 1,
        schedule: None,
    };
    assert!(graph_sinkhorn(
        c.view(),
        &marg,
        &SinkhornParams::fixed(0.1, 5),
        &graph,
        &smooth
    )
    .is_err());
}

#[test]
fn smoothing_runs_after_scheduled_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = random_cost(&mut rng, 6, 3);
    let centroids = Array2::from_shape_fn((6, 2), |_| rng.gen::<f64>());
    let graph = ring_graph(6, &centroids);
    let marg = Marginals::uniform(6, 3).unwrap();
    let smooth = Smoothing {
        lambda: 0.3,
        n_smooth: 3,
        schedule: None,
    };
    let plan = graph_sinkhorn(
        c.view(),
        &marg,
        &SinkhornParams::fixed(0.1, 20),
        &graph,
        &smooth,
    )
    .unwrap();
    let at: Vec<usize> = plan
        .residuals
        .iter()
        .filter(|r| r.smoothed)
        .map(|r| r.iter)
        .collect();
    assert_eq!(at, vec![5, 10, 15]);
    // diffusion on the very last pair still ends column-feasible
    let last = Smoothing {
        lambda: 0.5,
        n_smooth: 1,
        schedule: Some(vec![4]),
    };
    let plan = graph_sinkhorn(
        c.view(),
        &marg,
        &SinkhornParams::fixed(0.1, 4),
        &graph,
        &last,
    )
    .unwrap();
    for (s, q) in plan.plan.sum_axis(Axis(0)).iter().zip(marg.q.iter()) {
        assert!((s - q).abs() <= 1e-12);
    }
}

fn instance(seed: u64, m: usize, e: usize) -> (Array2<f64>, Marginals<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = random_cost(&mut rng, m, e);
    let marg = Marginals::new(random_simplex(&mut rng, m), random_simplex(&mut rng, e)).unwrap();
    (c, marg)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn column_marginal_is_exact_and_plan_positive(seed in any::<u64>(), m in 1usize..40, e in 1usize..9) {
        let (c, marg) = instance(seed, m, e);
        let plan = sinkhorn(c.view(), &marg, &SinkhornParams::fixed(0.1, 20)).unwrap();
        prop_assert!(plan.col_residual(&marg.q) <= 1e-12);
        prop_assert!(plan.plan.iter().all(|&p| p > 0.0));
        let conv = sinkhorn(c.view(), &marg, &SinkhornParams::converged(0.5, 20)).unwrap();
        prop_assert!(conv.row_residual(&marg.r) <= 1e-6);
    }

    #[test]
    fn constant_shift_leaves_plan_unchanged(seed in any::<u64>(), shift in -3.0f64..3.0) {
        let (c, marg) = instance(seed, 9, 4);
        let params = SinkhornParams::fixed(0.1, 20);
        let a = sinkhorn(c.view(), &marg, &params).unwrap();
        let shifted = c.mapv(|x| x + shift);
        let b = sinkhorn(shifted.view(), &marg, &params).unwrap();
        for (x, y) in a.plan.iter().zip(b.plan.iter()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn row_residual_never_increases_between_smoothing(seed in any::<u64>(), m in 2usize..30, e in 2usize..9) {
        let (c, marg) = instance(seed, m, e);
        let plan = sinkhorn(c.view(), &marg, &SinkhornParams::fixed(0.1, 40)).unwrap();
        for w in plan.residuals.windows(2) {
            prop_assert!(w[1].row <= w[0].row * (1.0 + 1e-9) + 1e-15, "{} -> {}", w[0].row, w[1].row);
        }
    }

    #[test]
    fn dispatch_rows_reproduce_supply(seed in any::<u64>(), m in 1usize..30, e in 1usize..9, k in 1usize..9) {
        let k = k.min(e);
        let (c, marg) = instance(seed, m, e);
        let plan = sinkhorn(c.view(), &marg, &SinkhornParams::fixed(0.1, 20)).unwrap();
        let d = topk_dispatch(plan.plan.view(), marg.r.view(), k).unwrap();
        for (row, r) in d.gamma.rows().into_iter().zip(marg.r.iter()) {
            prop_assert!((row.sum() - r).abs() <= 1e-12);
            prop_assert!(row.iter().filter(|&&g| g > 0.0).count() <= k);
        }
        prop_assert!((d.gamma.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn diffusion_stays_in_the_neighbourhood_hull(seed in any::<u64>(), m in 2usize..20, lambda in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = Array2::from_shape_fn((m, 4), |_| rng.gen_range(-30.0..0.0));
        let centroids = Array2::from_shape_fn((m, 2), |_| rng.gen::<f64>());
        let graph = ring_graph(m, &centroids);
        let out = diffuse_log_plan(l.view(), &graph, lambda);
        for i in 0..m {
            for j in 0..4 {
                let pool = std::iter::once(i).chain(graph.neighbors[i].iter().copied());
                let (lo, hi) = pool.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), n| (lo.min(l[[n, j]]), hi.max(l[[n, j]])));
                prop_assert!(out[[i, j]] >= lo - 1e-12 && out[[i, j]] <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn f32_solver_agrees_with_f64() {
    let (c, marg) = instance(99, 10, 4);
    let c32 = c.mapv(|x| x as f32);
    let marg32 = Marginals::new(marg.r.mapv(|x| x as f32), marg.q.mapv(|x| x as f32)).unwrap();
    let a = sinkhorn(c32.view(), &marg32, &SinkhornParams::fixed(0.1f32, 20)).unwrap();
    let b = sinkhorn(c.view(), &marg, &SinkhornParams::fixed(0.1, 20)).unwrap();
    for (x, y) in a.plan.iter().zip(b.plan.iter()) {
        assert!((*x as f64 - y).abs() < 1e-5);
    }
}

#[test]
fn smoothing_makes_block_structured_routing_more_coherent() {
    // two spatial clusters whose costs favour different expert pairs, buried
    // in per-region noise; diffusion should pull neighbours toward agreement
    let (m, e) = (64, 4);
    let mut wins = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let centroids = Array2::from_shape_fn((m, 2), |(i, k)| {
            let base = if k == 0 && i >= m / 2 { 10.0 } else { 0.0 };
            base + rng.gen_range(0.0..4.0)
        });
        let cost = Array2::from_shape_fn((m, e), |(i, j)| {
            let preferred = if i < m / 2 { j < 2 } else { j >= 2 };
            (if preferred { 0.6 } else { 1.0 }) + rng.gen_range(-0.5..0.5)
        });
        let marg = Marginals::uniform(m, e).unwrap();
        let topo = build_region_graph(centroids.view(), 6).unwrap();
        let graph = heat_kernel_weights(topo, centroids.view(), TauMode::Median).unwrap();
        let params = SinkhornParams::fixed(0.1, 20);
        let disagreement = |lambda: f64| {
            let smoothing = Smoothing {
                lambda,
                n_smooth: 3,
                schedule: None,
            };
            let plan = graph_sinkhorn(cost.view(), &marg, &params, &graph, &smoothing).unwrap();
            let dominant: Vec<usize> = plan
                .plan
                .rows()
                .into_iter()
                .map(|r| (0..e).fold(0, |b, j| if r[j] > r[b] { j } else { b }))
                .collect();
            let edges = graph.undirected_edges();
            edges
                .iter()
                .filter(|&&(a, b)| dominant[a] != dominant[b])
                .count() as f64
                / edges.len() as f64
        };
        if disagreement(0.3) <= disagreement(0.0) {
            wins += 1;
        }
    }
    assert!(wins >= 16, "smoothing helped on only {wins}/20 seeds");
}
