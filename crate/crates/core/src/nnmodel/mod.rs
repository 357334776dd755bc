//! Learnable components and the end-to-end forward pass.
//!
//! The forward pass records onto an [`crate::autodiff::Tape`] so that training can
//! differentiate through the unrolled router: projection, region pooling,
//! the routing GNN, cosine costs, Sinkhorn with graph diffusion, top-k
//! dispatch, per-expert gated attention and the fusion head.

mod config;
mod params;

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::Serialize;

use crate::autodiff::{SoftmaxWeights, Tape, Var};
use crate::bagio::PatchBag;
use crate::error::{Error, Result};
use crate::otroute::{normalize_rows, smoothing_schedule, topk_mask, DispatchMatrix};
use crate::rng;
use crate::scalar::Scalar;
use crate::tokenizer::{
    build_region_graph, heat_kernel_weights, region_layout, RegionGraph, RegionLayout, TauMode,
};

pub use config::{RoamConfig, RoutingMode};
pub use params::{
    glorot_bound, init_params, param_layout, ModelParams, Slots, Tensor, CKPT_MAGIC, CKPT_VERSION,
};

/// Forward mode. Training applies dropout with a mask drawn from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Routing and pooling state of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForwardDiagnostics<T> {
    pub routing_mode: RoutingMode,
    pub n_regions: usize,
    /// Dense plan mass per expert, `Σ_m Π[m, e]`.
    pub plan_load: Vec<T>,
    /// Dispatched mass per expert, `Σ_m γ[m, e]`.
    pub loads: Vec<T>,
    /// Arg-max expert of each dispatch row.
    pub dominant: Vec<usize>,
    /// Pooling weights per expert over all regions (zero off-support).
    pub attention: Vec<Vec<T>>,
    /// Fusion gates.
    pub gates: Vec<T>,
    /// `‖Π1 − r‖∞` and `‖Πᵀ1 − q‖∞` of the dense plan.
    pub row_residual: T,
    pub col_residual: T,
    /// Zero-norm routing embeddings or prototypes (cosine taken as 0).
    pub zero_norm: usize,
}

/// A recorded forward pass, ready for [`crate::autodiff::Tape::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub tape: Tape<T>,
    /// `1 x C` logit row.
    pub logits: Var,
    pub layout: RegionLayout<T>,
    pub graph: Arc<RegionGraph<T>>,
    /// Dense plan `Π`.
    pub plan: Array2<T>,
    pub dispatch: DispatchMatrix<T>,
    pub diagnostics: ForwardDiagnostics<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn logits(&self) -> Array1<T> {
        self.tape.value(self.logits).row(0).to_owned()
    }
}

/// Places every parameter on the tape; the returned vars are indexed by slot.
pub fn register_params<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> Vec<Var> {
    params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(i, t.value.clone()))
        .collect()
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul_bt(x, w);
    tape.add_row(y, b)
}

/// Inverted-dropout mask: entries are `0` or `1/(1−p)`.
pub fn dropout_mask<T: Scalar>(rows: usize, cols: usize, p: f64, seed: u64) -> Array2<T> {
    if p <= 0.0 {
        return Array2::ones((rows, cols));
    }
    let mut rng = rng::stream(seed);
    let keep = T::lit(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.gen::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

/// `dropout(relu(x Wᵀ + b))`; pass no mask in eval mode.
pub fn project_patches<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &[Var],
    slots: &Slots,
    x: Var,
    mask: Option<Array2<T>>,
) -> Var {
    let pre = linear(tape, x, pv[slots.phi_w], pv[slots.phi_b]);
    let h = tape.relu(pre);
    match mask {
        Some(m) => tape.mul_const(h, m),
        None => h,
    }
}

/// Two GraphSAGE layers with unweighted neighbour means.
pub fn gnn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &[Var],
    slots: &Slots,
    h0: Var,
    neighbors: Arc<Vec<Vec<usize>>>,
) -> Var {
    let mut h = h0;
    for &(w_self, w_neigh, b) in &slots.gnn {
        let own = tape.matmul_bt(h, pv[w_self]);
        let mean = tape.neighbor_mean(h, neighbors.clone());
        let nb = tape.matmul_bt(mean, pv[w_neigh]);
        let sum = tape.add(own, nb);
        let pre = tape.add_row(sum, pv[b]);
        h = tape.relu(pre);
    }
    h
}

/// Log-plan of the routing step, recorded op by op. Mirrors
/// [`crate::otroute::graph_sinkhorn`] with a fixed unroll.
pub fn route_log_plan<T: Scalar>(
    tape: &mut Tape<T>,
    log_kernel: Var,
    r: &Array1<T>,
    cfg: &RoamConfig,
    graph: &Arc<RegionGraph<T>>,
) -> Var {
    let log_r = r.mapv(T::ln);
    if cfg.softmax_routing {
        return tape.log_row_project(log_kernel, &log_r);
    }
    let e = cfg.n_experts;
    let log_q = Array1::from_elem(e, -T::from_usize_lossy(e).ln());
    let iters = cfg.sinkhorn_iters;
    let schedule = if cfg.no_graph_reg {
        Vec::new()
    } else {
        cfg.smoothing_schedule
            .clone()
            .unwrap_or_else(|| smoothing_schedule(iters, cfg.n_smooth))
    };
    let lambda = T::lit(cfg.lambda_s);
    let mut x = log_kernel;
    for t in 1..=iters {
        x = tape.log_row_project(x, &log_r);
        x = tape.log_col_project(x, &log_q);
        let due = schedule.iter().filter(|&&s| s == t).count();
        for _ in 0..due {
            x = tape.diffuse(x, graph.clone(), lambda);
        }
        if due > 0 && t == iters {
            x = tape.log_col_project(x, &log_q);
        }
    }
    x
}

/// Per-expert gated-attention pooling over dispatch supports. Returns the
/// `E x d` expert embeddings and each expert's `M x 1` weights.
pub fn expert_pool<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &[Var],
    slots: &Slots,
    h0: Var,
    gamma: Var,
    cfg: &RoamConfig,
) -> (Var, Vec<Var>) {
    let mut pooled = Vec::with_capacity(slots.experts.len());
    let mut betas = Vec::with_capacity(slots.experts.len());
    for (e, &(v, u, w)) in slots.experts.iter().enumerate() {
        let tv = tape.matmul_bt(h0, pv[v]);
        let a = tape.tanh(tv);
        let su = tape.matmul_bt(h0, pv[u]);
        let b = tape.sigmoid(su);
        let gated = tape.mul(a, b);
        let scores = tape.matmul_bt(gated, pv[w]);
        let g_e = tape.column(gamma, e);
        let weights = if cfg.no_ot_modulation {
            SoftmaxWeights::Fixed(tape.value(g_e).mapv(|x| {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }))
        } else if cfg.detach_routing {
            SoftmaxWeights::Fixed(tape.value(g_e).clone())
        } else {
            SoftmaxWeights::Var(g_e)
        };
        let beta = tape.weighted_softmax(scores, weights);
        pooled.push(tape.matmul_at(beta, h0));
        betas.push(beta);
    }
    (tape.concat_rows(&pooled), betas)
}

/// Gated fusion of expert embeddings and the classifier head. Returns the
/// `1 x C` logits and the `E x 1` gates.
pub fn fuse_and_classify<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &[Var],
    slots: &Slots,
    o: Var,
) -> (Var, Var) {
    let [g0w, g0b, g1w, g1b] = slots.gate.map(|s| pv[s]);
    let hidden = linear(tape, o, g0w, g0b);
    let act = tape.tanh(hidden);
    let score = linear(tape, act, g1w, g1b);
    let ones = Array2::ones((tape.value(score).nrows(), 1));
    let gates = tape.weighted_softmax(score, SoftmaxWeights::Fixed(ones));
    let slide = tape.matmul_at(gates, o);
    let [h0w, h0b, h1w, h1b] = slots.head.map(|s| pv[s]);
    let z = linear(tape, slide, h0w, h0b);
    let z = tape.relu(z);
    (linear(tape, z, h1w, h1b), gates)
}

fn check_shapes<T: Scalar>(
    bag: &PatchBag<T>,
    params: &ModelParams<T>,
    cfg: &RoamConfig,
) -> Result<()> {
    cfg.validate()?;
    let (specs, _) = param_layout(cfg)?;
    if specs.len() != params.len()
        || specs
            .iter()
            .zip(&params.tensors)
            .any(|((n, s), t)| *n != t.name || *s != t.shape)
    {
        return Err(Error::DimensionMismatch(
            "parameters do not match the model config".into(),
        ));
    }
    let d_in = cfg.d_in()?;
    if bag.d_in() != d_in {
        return Err(Error::DimensionMismatch(format!(
            "bag has d_in {}, model expects {d_in}",
            bag.d_in()
        )));
    }
    Ok(())
}

/// Records the full forward pass of one bag.
pub fn roam_trace<T: Scalar>(
    bag: &PatchBag<T>,
    params: &ModelParams<T>,
    cfg: &RoamConfig,
    mode: Mode,
) -> Result<ForwardTrace<T>> {
    roam_trace_with_dispatch(bag, params, cfg, mode, None)
}

/// As [`roam_trace`], but pooling sees `frozen` as a constant dispatch
/// matrix instead of the routed one. Holding the dispatch fixed is the
/// function whose derivative a detached-routing backward pass computes.
pub fn roam_trace_with_dispatch<T: Scalar>(
    bag: &PatchBag<T>,
    params: &ModelParams<T>,
    cfg: &RoamConfig,
    mode: Mode,
    frozen: Option<&Array2<T>>,
) -> Result<ForwardTrace<T>> {
    check_shapes(bag, params, cfg)?;
    let slots = &params.slots;
    let mut tape = Tape::new();
    let pv = register_params(&mut tape, params);

    let x = tape.constant(bag.embeddings.clone());
    let mask = match mode {
        Mode::Train { seed } if cfg.dropout > 0.0 => {
            Some(dropout_mask(bag.len(), cfg.d, cfg.dropout, seed))
        }
        _ => None,
    };
    let h = project_patches(&mut tape, &pv, slots, x, mask);

    // raw embeddings order co-located patches, keeping the layout independent of the weights
    let layout = region_layout(bag.coords.view(), Some(bag.embeddings.view()), cfg.target_m)?;
    let members = Arc::new(layout.members.clone());
    let h0 = tape.segment_mean(h, members);
    let topology = build_region_graph(layout.centroids.view(), cfg.k_nn)?;
    let graph = Arc::new(heat_kernel_weights(
        topology,
        layout.centroids.view(),
        TauMode::Median,
    )?);
    let neighbors = Arc::new(graph.neighbors.clone());

    let z = if cfg.no_routing_gnn {
        h0
    } else {
        gnn_forward(&mut tape, &pv, slots, h0, neighbors)
    };
    let zero_norm = normalize_rows(tape.value(z).view()).1.len()
        + normalize_rows(params.value(slots.proto).view()).1.len();
    let zn = tape.row_normalize(z);
    let pn = tape.row_normalize(pv[slots.proto]);
    let cos = tape.matmul_bt(zn, pn);
    let inv_eps = T::one() / T::lit(cfg.epsilon);
    let log_kernel = tape.affine(cos, inv_eps, -inv_eps);

    let r = layout.supply();
    let log_plan = route_log_plan(&mut tape, log_kernel, &r, cfg, &graph);
    let plan_var = tape.exp(log_plan);
    let plan = tape.value(plan_var).clone();
    let kept = topk_mask(plan.view(), cfg.top_k);
    let gamma = tape.topk_rescale(plan_var, kept.clone(), r.clone());
    let gamma_value = tape.value(gamma).clone();

    let pooled_gamma = match frozen {
        Some(g) if g.dim() == gamma_value.dim() => tape.constant(g.clone()),
        Some(g) => {
            return Err(Error::DimensionMismatch(format!(
                "frozen dispatch is {:?}, routing produced {:?}",
                g.dim(),
                gamma_value.dim()
            )))
        }
        None => gamma,
    };
    let (o, betas) = expert_pool(&mut tape, &pv, slots, h0, pooled_gamma, cfg);
    let (logits, gates) = fuse_and_classify(&mut tape, &pv, slots, o);
    if tape.value(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "logits for slide {}",
            bag.slide_id
        )));
    }

    let n_regions = layout.n_regions();
    let supports = (0..cfg.n_experts)
        .map(|e| {
            (0..n_regions)
                .filter(|&m| gamma_value[[m, e]] > T::zero())
                .collect()
        })
        .collect();
    let dispatch = DispatchMatrix {
        gamma: gamma_value,
        kept,
        supports,
    };
    let q = T::one() / T::from_usize_lossy(cfg.n_experts);
    let row_residual = (plan.sum_axis(Axis(1)) - &r)
        .iter()
        .fold(T::zero(), |a, &v| a.max(v.abs()));
    let col_residual = plan
        .sum_axis(Axis(0))
        .iter()
        .fold(T::zero(), |a, &v| a.max((v - q).abs()));
    let diagnostics = ForwardDiagnostics {
        routing_mode: cfg.routing_mode(),
        n_regions,
        plan_load: plan.sum_axis(Axis(0)).to_vec(),
        loads: dispatch.loads(),
        dominant: dispatch.dominant_experts(),
        attention: betas
            .iter()
            .map(|&b| tape.value(b).column(0).to_vec())
            .collect(),
        gates: tape.value(gates).column(0).to_vec(),
        row_residual,
        col_residual,
        zero_norm,
    };
    Ok(ForwardTrace {
        tape,
        logits,
        layout,
        graph,
        plan,
        dispatch,
        diagnostics,
    })
}

/// Logits and diagnostics for one bag.
pub fn roam_forward<T: Scalar>(
    bag: &PatchBag<T>,
    params: &ModelParams<T>,
    cfg: &RoamConfig,
    mode: Mode,
) -> Result<(Array1<T>, ForwardDiagnostics<T>)> {
    let trace = roam_trace(bag, params, cfg, mode)?;
    Ok((trace.logits(), trace.diagnostics))
}
