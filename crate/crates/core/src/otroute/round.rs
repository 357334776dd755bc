//! Projection of an approximately feasible plan onto the transport polytope.

use ndarray::{Array2, ArrayView2, Axis};

use super::Marginals;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rounds a nonnegative plan onto `U(r, q)` (Altschuler, Weed and Rigollet).
/// Rows and columns that overshoot their marginal are scaled down, and the
/// remaining deficit is added back as a rank-one correction. The result
/// satisfies both marginals up to rounding and moves at most as far as the
/// input's marginal violation, so it is the fair object to cost against an
/// exact LP optimum.
pub fn round_to_feasible<T: Scalar>(
    plan: ArrayView2<T>,
    marginals: &Marginals<T>,
) -> Result<Array2<T>> {
    let (m, e) = plan.dim();
    if m != marginals.n_rows() || e != marginals.n_cols() {
        return Err(Error::DimensionMismatch(format!(
            "plan is {m}x{e}, marginals are {}x{}",
            marginals.n_rows(),
            marginals.n_cols()
        )));
    }
    if plan.iter().any(|&v| !v.is_finite() || v < T::zero()) {
        return Err(Error::invalid("plan must be finite and nonnegative"));
    }
    let mut x = plan.to_owned();
    for (mut row, &ri) in x.axis_iter_mut(Axis(0)).zip(marginals.r.iter()) {
        let s = row.sum();
        if s > ri {
            row.mapv_inplace(|v| v * ri / s);
        }
    }
    for (mut col, &qj) in x.axis_iter_mut(Axis(1)).zip(marginals.q.iter()) {
        let s = col.sum();
        if s > qj {
            col.mapv_inplace(|v| v * qj / s);
        }
    }
    let err_r = &marginals.r - &x.sum_axis(Axis(1));
    let err_q = &marginals.q - &x.sum_axis(Axis(0));
    let total = err_q.sum();
    if total > T::zero() {
        for i in 0..m {
            for j in 0..e {
                x[[i, j]] += err_r[i] * err_q[j] / total;
            }
        }
    }
    Ok(x)
}
