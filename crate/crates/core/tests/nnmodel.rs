use std::sync::Arc;

use ndarray::{array, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roam_core::autodiff::Tape;
use roam_core::bagio::{gen_synthetic_slide, PatchBag, SynthSpec};
use roam_core::nnmodel::{
    dropout_mask, expert_pool, fuse_and_classify, glorot_bound, gnn_forward, init_params,
    project_patches, register_params, roam_forward, roam_trace, route_log_plan, Mode, ModelParams,
    RoamConfig,
};
use roam_core::otroute::{graph_sinkhorn, Marginals, SinkhornParams, Smoothing};
use roam_core::tokenizer::{
    build_region_graph, heat_kernel_weights, tokenize_regions, RegionGraph, TauMode,
};

fn small_config() -> RoamConfig {
    RoamConfig {
        d_in: Some(8),
        d: 16,
        target_m: 16,
        k_nn: 4,
        n_experts: 4,
        top_k: 2,
        sinkhorn_iters: 10,
        d_attn: 8,
        head_hidden: 12,
        ..RoamConfig::default()
    }
}

fn small_bag(seed: u64) -> PatchBag<f64> {
    let spec = SynthSpec {
        patches_min: 80,
        patches_max: 120,
        d_in: 8,
        ..SynthSpec::default()
    };
    gen_synthetic_slide(&spec, (seed % 2) as usize, seed).unwrap()
}

fn set(params: &mut ModelParams<f64>, name: &str, f: impl Fn(&mut Array2<f64>)) {
    let t = params.tensors.iter_mut().find(|t| t.name == name).unwrap();
    f(&mut t.value);
}

#[test]
fn init_is_seeded_with_unit_prototypes_and_glorot_bounds() {
    let cfg = RoamConfig {
        d_in: Some(32),
        ..RoamConfig::default()
    };
    let a = init_params::<f64>(&cfg, 7).unwrap();
    assert_eq!(a, init_params::<f64>(&cfg, 7).unwrap());
    assert_ne!(a, init_params::<f64>(&cfg, 8).unwrap());
    for row in a.get("proto").unwrap().value.rows() {
        assert!((row.dot(&row) - 1.0).abs() < 1e-12);
    }
    let bound = (6.0f64 / (32.0 + 512.0)).sqrt();
    assert!((glorot_bound(32, 512) - bound).abs() < 1e-15);
    let w = &a.get("phi.weight").unwrap().value;
    let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max <= bound && max > 0.95 * bound);
    assert!(a.get("phi.bias").unwrap().value.iter().all(|&b| b == 0.0));
}

#[test]
fn zero_projection_gives_zero_features() {
    let cfg = small_config();
    let mut params = init_params::<f64>(&cfg, 1).unwrap();
    set(&mut params, "phi.weight", |w| w.fill(0.0));
    let bag = small_bag(1);
    let mut tape = Tape::new();
    let pv = register_params(&mut tape, &params);
    let x = tape.constant(bag.embeddings.clone());
    let h = project_patches(&mut tape, &pv, &params.slots, x, None);
    assert!(tape.value(h).iter().all(|&v| v == 0.0));
}

#[test]
fn inverted_dropout_preserves_the_mean() {
    let h = array![[0.3, 1.2, 2.0, 0.7]];
    let mut acc = Array2::<f64>::zeros((1, 4));
    for s in 0..10_000u64 {
        acc += &(&h * &dropout_mask::<f64>(1, 4, 0.25, s));
    }
    let mean = acc / 10_000.0;
    for (m, e) in mean.iter().zip(h.iter()) {
        assert!((m - e).abs() <= 0.02 * e, "{m} vs {e}");
    }
}

#[test]
fn gnn_limits() {
    let cfg = small_config();
    let mut params = init_params::<f64>(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = Array2::from_shape_simple_fn((5, 16), || rng.gen_range(-1.0..1.0));
    let run = |params: &ModelParams<f64>, h: &Array2<f64>, nb: Vec<Vec<usize>>| {
        let mut tape = Tape::new();
        let pv = register_params(&mut tape, params);
        let x = tape.constant(h.clone());
        let z = gnn_forward(&mut tape, &pv, &params.slots, x, Arc::new(nb));
        tape.value(z).clone()
    };
    // isolated node: the neighbour term vanishes
    let lone = run(
        &params,
        &h.slice(ndarray::s![0..1, ..]).to_owned(),
        vec![vec![]],
    );
    let mut manual = h.slice(ndarray::s![0..1, ..]).to_owned();
    for l in 0..2 {
        let w = &params.get(&format!("gnn.{l}.self")).unwrap().value;
        let b = &params.get(&format!("gnn.{l}.bias")).unwrap().value;
        manual = (manual.dot(&w.t()) + b).mapv(|v: f64| v.max(0.0));
    }
    assert!((&lone - &manual).iter().all(|d| d.abs() < 1e-12));
    // identical features on a complete graph give identical outputs
    let same = Array2::from_shape_fn((5, 16), |(_, j)| h[[0, j]]);
    let complete: Vec<Vec<usize>> = (0..5)
        .map(|i| (0..5).filter(|&j| j != i).collect())
        .collect();
    let z = run(&params, &same, complete.clone());
    for r in 1..5 {
        assert_eq!(z.row(r), z.row(0));
    }
    // without neighbour weights the graph is irrelevant
    for l in 0..2 {
        set(&mut params, &format!("gnn.{l}.neigh"), |w| w.fill(0.0));
    }
    let ring: Vec<Vec<usize>> = (0..5).map(|i| vec![(i + 1) % 5]).collect();
    assert_eq!(run(&params, &h, complete), run(&params, &h, ring));
}

fn pool_once(gamma: Array2<f64>, no_mod: bool) -> (Array2<f64>, Vec<Array2<f64>>, Array2<f64>) {
    let cfg = RoamConfig {
        n_experts: 2,
        no_ot_modulation: no_mod,
        ..small_config()
    };
    let mut params = init_params::<f64>(&cfg, 4).unwrap();
    for e in 0..2 {
        set(&mut params, &format!("expert.{e}.w"), |w| w.fill(0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h0 = Array2::from_shape_simple_fn((gamma.nrows(), 16), || rng.gen_range(-1.0..1.0));
    let mut tape = Tape::new();
    let pv = register_params(&mut tape, &params);
    let h = tape.constant(h0.clone());
    let g = tape.constant(gamma);
    let (o, betas) = expert_pool(&mut tape, &pv, &params.slots, h, g, &cfg);
    (
        tape.value(o).clone(),
        betas.iter().map(|&b| tape.value(b).clone()).collect(),
        h0,
    )
}

#[test]
fn pooling_weights() {
    // equal scores; dispatch mass 0.3 and 0.1 on expert 0, a single region on expert 1
    let gamma = array![[0.3, 0.0], [0.1, 0.2], [0.0, 0.0]];
    let (o, betas, h0) = pool_once(gamma.clone(), false);
    assert!((betas[0][[0, 0]] - 0.75).abs() < 1e-15 && (betas[0][[1, 0]] - 0.25).abs() < 1e-15);
    assert_eq!(betas[1].column(0).to_vec(), vec![0.0, 1.0, 0.0]);
    assert_eq!(o.row(1), h0.row(1));
    let (_, plain, _) = pool_once(gamma, true);
    assert!((plain[0][[0, 0]] - 0.5).abs() < 1e-15 && (plain[0][[1, 0]] - 0.5).abs() < 1e-15);
    // an empty support pools to zero
    let (o, _, _) = pool_once(array![[0.5, 0.0], [0.5, 0.0]], false);
    assert!(o.row(1).iter().all(|&v| v == 0.0));
}

fn fuse(params: &ModelParams<f64>, o: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut tape = Tape::new();
    let pv = register_params(&mut tape, params);
    let ov = tape.constant(o.clone());
    let (logits, g) = fuse_and_classify(&mut tape, &pv, &params.slots, ov);
    (tape.value(logits).clone(), tape.value(g).clone())
}

#[test]
fn fusion_properties() {
    let cfg = small_config();
    let mut params = init_params::<f64>(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let o = Array2::from_shape_simple_fn((4, 16), || rng.gen_range(-1.0..1.0));
    let (logits, g) = fuse(&params, &o);
    assert!((g.sum() - 1.0).abs() < 1e-12);
    set(&mut params, "gate.1.bias", |b| b.fill(3.5));
    let (shifted, g2) = fuse(&params, &o);
    assert!((&g - &g2).iter().all(|d| d.abs() < 1e-15));
    assert!((&logits - &shifted).iter().all(|d| d.abs() < 1e-12));
    // identical expert embeddings: the fused vector is that embedding
    let same = Array2::from_shape_fn((4, 16), |(_, j)| o[[0, j]]);
    let single = o.slice(ndarray::s![0..1, ..]).to_owned();
    let (a, _) = fuse(&params, &same);
    let (b, g1) = fuse(&params, &single);
    assert_eq!(g1, array![[1.0]]);
    assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn taped_routing_matches_the_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = 12;
    let cost = Array2::from_shape_simple_fn((m, 4), || rng.gen_range(0.0..2.0));
    let centroids = Array2::from_shape_simple_fn((m, 2), || rng.gen::<f64>());
    let graph = Arc::new(
        heat_kernel_weights(
            build_region_graph(centroids.view(), 4).unwrap(),
            centroids.view(),
            TauMode::Median,
        )
        .unwrap(),
    );
    let masses = Array1::from_shape_fn(m, |i| (i % 3 + 1) as f64);
    let marg = Marginals::from_masses(masses.view(), 4).unwrap();
    for (no_graph_reg, lambda) in [(false, 0.3), (true, 0.3), (false, 0.0)] {
        let cfg = RoamConfig {
            n_experts: 4,
            lambda_s: lambda,
            no_graph_reg,
            ..small_config()
        };
        let mut tape = Tape::new();
        let lk = tape.constant(cost.mapv(|c| -c / cfg.epsilon));
        let out = route_log_plan(&mut tape, lk, &marg.r, &cfg, &graph);
        let plan = tape.value(out).mapv(f64::exp);
        let smooth = Smoothing {
            lambda: if no_graph_reg { 0.0 } else { lambda },
            n_smooth: 3,
            schedule: None,
        };
        let params = SinkhornParams::fixed(cfg.epsilon, cfg.sinkhorn_iters);
        let reference = graph_sinkhorn(cost.view(), &marg, &params, &graph, &smooth).unwrap();
        for (a, b) in plan.iter().zip(reference.plan.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn capacity_prevents_collapse_that_softmax_allows() {
    let (m, e) = (30, 4);
    // expert 0 is strictly cheapest for every region
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cost = Array2::from_shape_fn((m, e), |(_, j)| {
        if j == 0 {
            0.05
        } else {
            rng.gen_range(0.8..1.6)
        }
    });
    let r = Array1::from_elem(m, 1.0 / m as f64);
    let graph = Arc::new(RegionGraph::from_neighbors(vec![vec![]; m]).unwrap());
    let load = |softmax: bool| {
        let cfg = RoamConfig {
            n_experts: e,
            softmax_routing: softmax,
            ..small_config()
        };
        let mut tape = Tape::new();
        let lk = tape.constant(cost.mapv(|c| -c / cfg.epsilon));
        let out = route_log_plan(&mut tape, lk, &r, &cfg, &graph);
        tape.value(out).mapv(f64::exp).sum_axis(Axis(0))
    };
    let ot = load(false);
    assert!(ot.iter().all(|&l| (l - 0.25).abs() <= 1e-9));
    let soft = load(true);
    let min = soft.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(min < 0.01 && soft[0] / min > 10.0);
}

#[test]
fn forward_is_deterministic_with_consistent_diagnostics() {
    let cfg = small_config();
    let params = init_params::<f64>(&cfg, 9).unwrap();
    let bag = small_bag(9);
    let (a, diag) = roam_forward(&bag, &params, &cfg, Mode::Eval).unwrap();
    let (b, _) = roam_forward(&bag, &params, &cfg, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert!((diag.loads.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    assert!(diag.loads.iter().all(|&l| l >= 0.0));
    assert!((diag.gates.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    assert!(diag.plan_load.iter().all(|&l| (l - 0.25).abs() <= 1e-12));
    assert_eq!(diag.dominant.len(), diag.n_regions);
    let (t1, _) = roam_forward(&bag, &params, &cfg, Mode::Train { seed: 1 }).unwrap();
    let (t2, _) = roam_forward(&bag, &params, &cfg, Mode::Train { seed: 1 }).unwrap();
    assert_eq!(t1, t2);
    assert_ne!(t1, a);
}

#[test]
fn logits_are_invariant_to_patch_order_and_similarity_transforms() {
    let cfg = small_config();
    let params = init_params::<f64>(&cfg, 10).unwrap();
    let bag = small_bag(10);
    let (base, _) = roam_forward(&bag, &params, &cfg, Mode::Eval).unwrap();
    let mut perm: Vec<usize> = (0..bag.len()).collect();
    perm.reverse();
    perm.swap(3, 40);
    let shuffled = bag.select(&perm);
    let (p, _) = roam_forward(&shuffled, &params, &cfg, Mode::Eval).unwrap();
    assert_eq!(p, base);
    let mut moved = bag.clone();
    moved.coords.mapv_inplace(|c| 37.5 * c);
    moved.coords.column_mut(0).mapv_inplace(|c| c + 1200.0);
    moved.coords.column_mut(1).mapv_inplace(|c| c - 310.0);
    let (q, _) = roam_forward(&moved, &params, &cfg, Mode::Eval).unwrap();
    assert!((&q - &base).iter().all(|d| d.abs() <= 1e-9));
}

#[test]
fn single_expert_reduces_to_mass_weighted_gated_attention() {
    let cfg = RoamConfig {
        n_experts: 1,
        top_k: 1,
        ..small_config()
    };
    let params = init_params::<f64>(&cfg, 12).unwrap();
    let bag = small_bag(12);
    let trace = roam_trace(&bag, &params, &cfg, Mode::Eval).unwrap();
    assert!(trace.diagnostics.dominant.iter().all(|&e| e == 0));

    let p = |n: &str| params.get(n).unwrap().value.clone();
    let lin = |x: &Array2<f64>, w: &str, b: &str| x.dot(&p(w).t()) + &p(b);
    let h = lin(&bag.embeddings, "phi.weight", "phi.bias").mapv(|v| v.max(0.0));
    let set = tokenize_regions(h.view(), bag.coords.view(), cfg.target_m).unwrap();
    let h0 = set.features;
    let r = set.layout.supply();
    let a = h0.dot(&p("expert.0.V").t()).mapv(f64::tanh);
    let b = h0
        .dot(&p("expert.0.U").t())
        .mapv(|v| 1.0 / (1.0 + (-v).exp()));
    let s = (a * b).dot(&p("expert.0.w").row(0));
    let smax = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let wts = Array1::from_shape_fn(s.len(), |m| r[m] * (s[m] - smax).exp());
    let beta = &wts / wts.sum();
    let o = beta.dot(&h0).insert_axis(Axis(0));
    let hid = lin(&o, "head.0.weight", "head.0.bias").mapv(|v| v.max(0.0));
    let logits = lin(&hid, "head.1.weight", "head.1.bias");
    for (x, y) in trace.logits().iter().zip(logits.row(0).iter()) {
        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
    }
}

#[test]
fn checkpoints_roundtrip_and_check_shapes() {
    let cfg = small_config();
    let mut params = init_params::<f64>(&cfg, 13).unwrap();
    params.round_to_f32();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    params.save(&path).unwrap();
    assert_eq!(ModelParams::<f64>::load(&path, &cfg).unwrap(), params);
    let other = RoamConfig {
        d: 24,
        ..cfg.clone()
    };
    assert!(ModelParams::<f64>::load(&path, &other).is_err());
    let mut bytes = params.encode_checkpoint();
    bytes[0] = b'X';
    assert!(ModelParams::<f64>::decode_checkpoint(&bytes, &cfg).is_err());
    let bytes = params.encode_checkpoint();
    assert!(ModelParams::<f64>::decode_checkpoint(&bytes[..bytes.len() - 3], &cfg).is_err());
}

#[test]
fn config_validation() {
    assert!(RoamConfig {
        top_k: 9,
        ..RoamConfig::default()
    }
    .validate()
    .is_err());
    assert!(RoamConfig {
        n_smooth: 30,
        ..RoamConfig::default()
    }
    .validate()
    .is_err());
    assert!(RoamConfig {
        epsilon: 0.0,
        ..RoamConfig::default()
    }
    .validate()
    .is_err());
    assert!(RoamConfig::default().validate().is_ok());
    let bag = small_bag(1);
    let cfg = RoamConfig {
        d_in: Some(9),
        ..small_config()
    };
    let params = init_params::<f64>(&cfg, 1).unwrap();
    assert!(roam_forward(&bag, &params, &cfg, Mode::Eval).is_err());
}
