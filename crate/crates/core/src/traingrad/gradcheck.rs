//! Central finite-difference check of the full backward pass.

use serde::Serialize;

use super::backward;
use crate::bagio::{gen_synthetic_slide, PatchBag, SynthSpec};
use crate::error::Result;
use crate::nnmodel::{roam_trace_with_dispatch, Mode, ModelParams, RoamConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates where both gradients are at most this large are not scored.
    pub min_grad: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            min_grad: 1e-6,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink (ReLU sign, top-k
    /// selection or zero-norm guard).
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

/// The small instance used for gradient checks: 40 patches of width 8,
/// `d = 16`, at most 9 regions, 3 experts, top-2, 8 Sinkhorn pairs.
pub fn tiny_instance(seed: u64) -> Result<(PatchBag<f64>, RoamConfig)> {
    let spec = SynthSpec {
        n_slides_per_class: 1,
        patches_min: 40,
        patches_max: 40,
        d_in: 8,
        seed,
        ..SynthSpec::default()
    };
    let bag = gen_synthetic_slide(&spec, 1, seed)?;
    let cfg = RoamConfig {
        d_in: Some(8),
        d: 16,
        target_m: 9,
        k_nn: 4,
        n_experts: 3,
        top_k: 2,
        sinkhorn_iters: 8,
        d_attn: 8,
        head_hidden: 16,
        ..RoamConfig::default()
    };
    Ok((bag, cfg))
}

fn loss_and_kinks(
    bag: &PatchBag<f64>,
    params: &ModelParams<f64>,
    cfg: &RoamConfig,
    mode: Mode,
    frozen: Option<&ndarray::Array2<f64>>,
    label: usize,
) -> Result<(f64, Vec<bool>)> {
    let mut trace = roam_trace_with_dispatch(bag, params, cfg, mode, frozen)?;
    let kinks = trace.tape.kink_signature();
    let loss = trace.tape.cross_entropy(trace.logits, label);
    Ok((trace.tape.scalar(loss), kinks))
}

/// Compares the analytic gradient with central differences at every
/// parameter coordinate. Under `detach_routing` the reference function
/// holds the dispatch matrix fixed, which is exactly what detaching means.
pub fn gradcheck(
    bag: &PatchBag<f64>,
    params: &ModelParams<f64>,
    cfg: &RoamConfig,
    label: usize,
    mode: Mode,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut trace = roam_trace_with_dispatch(bag, params, cfg, mode, None)?;
    let base_kinks = trace.tape.kink_signature();
    let frozen = cfg.detach_routing.then(|| trace.dispatch.gamma.clone());
    let (_, grads) = backward(&mut trace, params, label)?;

    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    for (slot, grad) in grads.tensors.iter().enumerate() {
        let mut check = TensorCheck {
            name: params.tensors[slot].name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst_index: None,
        };
        for (idx, &analytic) in grad.iter().enumerate() {
            let original = params.tensors[slot]
                .value
                .as_slice()
                .expect("standard layout")[idx];
            let mut at = |delta: f64| -> Result<(f64, Vec<bool>)> {
                probe.tensors[slot]
                    .value
                    .as_slice_mut()
                    .expect("standard layout")[idx] = original + delta;
                loss_and_kinks(bag, &probe, cfg, mode, frozen.as_ref(), label)
            };
            let (up, up_kinks) = at(opts.step)?;
            let (down, down_kinks) = at(-opts.step)?;
            probe.tensors[slot]
                .value
                .as_slice_mut()
                .expect("standard layout")[idx] = original;
            if up_kinks != base_kinks || down_kinks != base_kinks {
                check.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * opts.step);
            let scale = analytic.abs().max(numeric.abs());
            if scale <= opts.min_grad {
                continue;
            }
            check.checked += 1;
            let rel = (analytic - numeric).abs() / scale;
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = Some(idx);
            }
        }
        tensors.push(check);
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    let checked = tensors.iter().map(|t| t.checked).sum();
    Ok(GradCheckReport {
        tensors,
        max_rel_err,
        checked,
        passed: checked > 0 && max_rel_err <= opts.tol,
    })
}
