use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::{total_cmp, Scalar};

/// Sparse top-k dispatch `γ` with row sums equal to the region supply.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchMatrix<T> {
    pub gamma: Array2<T>,
    /// `true` where an entry survived top-k selection.
    pub kept: Array2<bool>,
    /// Support `S_e` of each expert, ascending region order.
    pub supports: Vec<Vec<usize>>,
}

impl<T: Scalar> DispatchMatrix<T> {
    /// Total dispatched mass per expert.
    pub fn loads(&self) -> Vec<T> {
        self.gamma.columns().into_iter().map(|c| c.sum()).collect()
    }

    /// Arg-max expert per region, ties to the lower index.
    pub fn dominant_experts(&self) -> Vec<usize> {
        dominant(self.gamma.view())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        super::write_plan_csv(self.gamma.view(), w)
    }
}

pub(crate) fn dominant<T: Scalar>(x: ArrayView2<T>) -> Vec<usize> {
    x.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (e, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = e;
                }
            }
            best
        })
        .collect()
}

/// Selection mask of the `k` largest entries per row; ties resolve to the
/// lower column index.
pub fn topk_mask<T: Scalar>(plan: ArrayView2<T>, k: usize) -> Array2<bool> {
    let mut mask = Array2::from_elem(plan.raw_dim(), false);
    for (row, mut out) in plan.rows().into_iter().zip(mask.rows_mut()) {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| total_cmp(row[b], row[a]).then(a.cmp(&b)));
        for &e in idx.iter().take(k) {
            out[e] = true;
        }
    }
    mask
}

/// Keep the `k` largest entries of each plan row and rescale them to sum to
/// `r_m`.
pub fn topk_dispatch<T: Scalar>(
    plan: ArrayView2<T>,
    r: ArrayView1<T>,
    k: usize,
) -> Result<DispatchMatrix<T>> {
    let (m, e) = plan.dim();
    if k == 0 || k > e {
        return Err(Error::invalid(format!(
            "top-k needs 1 <= k <= {e}, got {k}"
        )));
    }
    if r.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{} supplies for {m} plan rows",
            r.len()
        )));
    }
    let kept = topk_mask(plan, k);
    let mut gamma = Array2::zeros((m, e));
    for i in 0..m {
        let total: T = (0..e).filter(|&j| kept[[i, j]]).map(|j| plan[[i, j]]).sum();
        if total.is_nan() || total <= T::zero() {
            return Err(Error::invalid(format!(
                "row {i} has no positive mass among its top-{k} entries"
            )));
        }
        for j in (0..e).filter(|&j| kept[[i, j]]) {
            gamma[[i, j]] = r[i] * plan[[i, j]] / total;
        }
    }
    let supports = (0..e)
        .map(|j| (0..m).filter(|&i| gamma[[i, j]] > T::zero()).collect())
        .collect();
    Ok(DispatchMatrix {
        gamma,
        kept,
        supports,
    })
}
