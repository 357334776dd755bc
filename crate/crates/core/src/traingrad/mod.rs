//! Gradients, optimisation, training loop and evaluation metrics.

mod gradcheck;
mod metrics;
mod optim;
mod train;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nnmodel::{ForwardTrace, ModelParams};
use crate::scalar::Scalar;

pub use gradcheck::{gradcheck, tiny_instance, GradCheckOptions, GradCheckReport, TensorCheck};
pub use metrics::{accuracy, auc, neighbor_disagreement, qwk, MetricsReport};
pub use optim::{adamw_step, AdamWState, LrSchedule, TrainConfig};
pub use train::{evaluate, train, train_on, EpochRecord, TrainOutcome};

/// One gradient per parameter tensor, in parameter order and storage shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    pub tensors: Vec<Array2<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self {
            tensors: params
                .tensors
                .iter()
                .map(|t| Array2::zeros(t.value.raw_dim()))
                .collect(),
        }
    }

    pub fn global_norm(&self) -> T {
        self.tensors
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, k: T) {
        for g in &mut self.tensors {
            g.mapv_inplace(|v| v * k);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    /// Rescales to `max_norm` when the global norm exceeds it. Returns the
    /// norm before clipping.
    pub fn clip(&mut self, max_norm: T) -> T {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Cross-entropy of the trace's logits against `label` and its gradient
/// with respect to every parameter, scaled by `loss_scale`.
pub fn backward_scaled<T: Scalar>(
    trace: &mut ForwardTrace<T>,
    params: &ModelParams<T>,
    label: usize,
    loss_scale: T,
) -> Result<(T, GradientSet<T>)> {
    let n_classes = trace.tape.value(trace.logits).ncols();
    if label >= n_classes {
        return Err(Error::invalid(format!(
            "label {label} outside {n_classes} classes"
        )));
    }
    let loss_var = trace.tape.cross_entropy(trace.logits, label);
    let loss = trace.tape.scalar(loss_var) * loss_scale;
    if !loss.is_finite() {
        let logits = trace.logits();
        return Err(Error::NonFinite(format!(
            "loss {loss}; logits {logits}; row residual {}; zero-norm vectors {}",
            trace.diagnostics.row_residual, trace.diagnostics.zero_norm
        )));
    }
    let raw = trace.tape.backward(loss_var, loss_scale, params.len());
    let tensors = raw
        .into_iter()
        .zip(&params.tensors)
        .map(|(g, t)| g.unwrap_or_else(|| Array2::zeros(t.value.raw_dim())))
        .collect();
    Ok((loss, GradientSet { tensors }))
}

/// Cross-entropy loss and its parameter gradient.
pub fn backward<T: Scalar>(
    trace: &mut ForwardTrace<T>,
    params: &ModelParams<T>,
    label: usize,
) -> Result<(T, GradientSet<T>)> {
    backward_scaled(trace, params, label, T::one())
}
