//! Capacity-constrained entropic optimal transport for region-to-expert
//! routing.
//!
//! The solver works on the log-plan `log Π = (f ⊕ g − C) / ε` with dual
//! potentials `f` (regions) and `g` (experts); the Gibbs kernel is never
//! formed in the linear domain. The column update runs last so the expert
//! capacity marginal `Πᵀ1 = q` holds to machine precision; the region
//! marginal carries the residual.

mod dispatch;
mod exact;
mod round;
mod sinkhorn;

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};

pub use dispatch::{topk_dispatch, topk_mask, DispatchMatrix};
pub use exact::{exact_ot_oracle, permutation_oracle};
pub use round::round_to_feasible;
pub use sinkhorn::{
    diffuse_log_plan, graph_sinkhorn, sinkhorn, smoothing_schedule, IterResidual, SinkhornParams,
    Smoothing, Stopping, TransportPlan,
};

/// Region supply `r` and expert capacity `q`, both strictly positive
/// probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals<T> {
    pub r: Array1<T>,
    pub q: Array1<T>,
}

fn simplex_tol<T: Scalar>(len: usize) -> T {
    T::lit(1e-12).max(T::epsilon() * T::from_usize_lossy(4 * len.max(1)))
}

impl<T: Scalar> Marginals<T> {
    pub fn new(r: Array1<T>, q: Array1<T>) -> Result<Self> {
        for (name, v) in [("r", &r), ("q", &q)] {
            if v.is_empty() {
                return Err(Error::invalid(format!("marginal {name} is empty")));
            }
            if v.iter().any(|&x| !(x > T::zero() && x.is_finite())) {
                return Err(Error::invalid(format!(
                    "marginal {name} has non-positive entries"
                )));
            }
            let s = v.sum();
            if (s - T::one()).abs() > simplex_tol::<T>(v.len()) {
                return Err(Error::invalid(format!(
                    "marginal {name} sums to {s}, not 1"
                )));
            }
        }
        Ok(Self { r, q })
    }

    pub fn uniform(m: usize, e: usize) -> Result<Self> {
        let r = Array1::from_elem(m, T::one() / T::from_usize_lossy(m.max(1)));
        let q = Array1::from_elem(e, T::one() / T::from_usize_lossy(e.max(1)));
        Self::new(r, q)
    }

    /// `r_m = A_m / ΣA`, `q_e = 1/E`.
    pub fn from_masses(masses: ArrayView1<T>, n_experts: usize) -> Result<Self> {
        let total = masses.sum();
        let r = masses.mapv(|a| a / total);
        let q = Array1::from_elem(n_experts, T::one() / T::from_usize_lossy(n_experts.max(1)));
        Self::new(r, q)
    }

    pub fn n_rows(&self) -> usize {
        self.r.len()
    }

    pub fn n_cols(&self) -> usize {
        self.q.len()
    }
}

/// Cosine dissimilarities `C[m, e] = 1 − cos(z_m, μ_e)`, in `[0, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T> {
    pub values: Array2<T>,
    /// Rows of `Z` (then prototypes, offset by `M`) with zero norm; their
    /// cosines were taken as 0.
    pub zero_norm: Vec<usize>,
}

/// Normalise rows to unit length. Rows with norm below `tiny` become zero
/// and are reported.
pub fn normalize_rows<T: Scalar>(x: ArrayView2<T>) -> (Array2<T>, Vec<usize>) {
    let tiny = T::min_positive_value().sqrt();
    let mut out = x.to_owned();
    let mut dead = Vec::new();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm > tiny {
            row.mapv_inplace(|v| v / norm);
        } else {
            row.fill(T::zero());
            dead.push(i);
        }
    }
    (out, dead)
}

pub fn cost_matrix<T: Scalar>(
    z: ArrayView2<T>,
    prototypes: ArrayView2<T>,
) -> Result<CostMatrix<T>> {
    if z.ncols() != prototypes.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "routing embeddings have width {}, prototypes {}",
            z.ncols(),
            prototypes.ncols()
        )));
    }
    let (zn, mut dead) = normalize_rows(z);
    let (pn, dead_p) = normalize_rows(prototypes);
    dead.extend(dead_p.into_iter().map(|i| i + z.nrows()));
    if !dead.is_empty() {
        log::warn!(
            "cost matrix: {} zero-norm vectors treated as cosine 0",
            dead.len()
        );
    }
    let values = zn
        .dot(&pn.t())
        .mapv(|c| (T::one() - c).max(T::zero()).min(T::lit(2.0)));
    Ok(CostMatrix {
        values,
        zero_norm: dead,
    })
}

/// Row-local routing without a capacity constraint:
/// `Π[m, :] = r_m · softmax(−C[m, :] / ε)`.
pub fn softmax_routing<T: Scalar>(
    cost: ArrayView2<T>,
    r: ArrayView1<T>,
    epsilon: T,
) -> Result<Array2<T>> {
    if cost.nrows() != r.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} cost rows for {} supplies",
            cost.nrows(),
            r.len()
        )));
    }
    if epsilon.is_nan() || epsilon <= T::zero() {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut out = cost.mapv(|c| -c / epsilon);
    for (mut row, &rm) in out.rows_mut().into_iter().zip(r.iter()) {
        let lse = log_sum_exp(row.iter().copied());
        row.mapv_inplace(|v| rm * (v - lse).exp());
    }
    Ok(out)
}

/// Per-expert mass `Σ_m Π[m, e]`.
pub fn expert_load<T: Scalar>(plan: ArrayView2<T>) -> Array1<T> {
    plan.sum_axis(Axis(0))
}

/// Long-format `region_id,expert,mass`; zero entries are skipped.
pub fn write_plan_csv<T: Scalar, W: Write>(plan: ArrayView2<T>, mut w: W) -> std::io::Result<()> {
    writeln!(w, "region_id,expert,mass")?;
    for ((m, e), &v) in plan.indexed_iter() {
        if v != T::zero() {
            writeln!(w, "{m},{e},{v:e}")?;
        }
    }
    Ok(())
}

/// Whitespace-separated dense dump, one region per line.
pub fn write_dense<T: Scalar, W: Write>(plan: ArrayView2<T>, mut w: W) -> std::io::Result<()> {
    for row in plan.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}
