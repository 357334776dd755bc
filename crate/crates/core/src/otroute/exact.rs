//! Exact (unregularised) OT on tiny instances, by enumeration. Used as the
//! `ε → 0` reference for the entropic solver.

use ndarray::{Array2, ArrayView2};

use super::Marginals;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_ROWS: usize = 8;
const MAX_COLS: usize = 4;

/// Square instance with uniform marginals: the optimum sits on a scaled
/// permutation matrix (Birkhoff), so enumerate all `n!` permutations.
pub fn permutation_oracle<T: Scalar>(cost: ArrayView2<T>) -> Result<(T, Array2<T>)> {
    let n = cost.nrows();
    if n != cost.ncols() || n == 0 {
        return Err(Error::DimensionMismatch(format!(
            "permutation oracle needs a square cost, got {:?}",
            cost.dim()
        )));
    }
    if n > MAX_ROWS {
        return Err(Error::InstanceTooLarge { rows: n, cols: n });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (T::infinity(), perm.clone());
    permute(&mut perm, 0, &mut |p| {
        let s: T = p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        if s < best.0 {
            best = (s, p.to_vec());
        }
    });
    let w = T::one() / T::from_usize_lossy(n);
    let mut plan = Array2::zeros((n, n));
    for (i, &j) in best.1.iter().enumerate() {
        plan[[i, j]] = w;
    }
    Ok((best.0 * w, plan))
}

fn permute(p: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

fn is_uniform<T: Scalar>(v: &ndarray::Array1<T>) -> bool {
    let u = T::one() / T::from_usize_lossy(v.len());
    v.iter().all(|&x| (x - u).abs() <= T::lit(1e-12))
}

/// Exact OT optimum `min ⟨Π, C⟩` over the transportation polytope.
///
/// Square uniform instances go through [`permutation_oracle`]; otherwise
/// every basic feasible solution (spanning tree of the bipartite support
/// graph) is enumerated, which limits the instance to `M ≤ 8`, `E ≤ 4`.
pub fn exact_ot_oracle<T: Scalar>(
    cost: ArrayView2<T>,
    marginals: &Marginals<T>,
) -> Result<(T, Array2<T>)> {
    let (m, e) = cost.dim();
    if m != marginals.n_rows() || e != marginals.n_cols() {
        return Err(Error::DimensionMismatch(format!(
            "cost {m}x{e} vs marginals {}x{}",
            marginals.n_rows(),
            marginals.n_cols()
        )));
    }
    if m == e && is_uniform(&marginals.r) && is_uniform(&marginals.q) && m <= MAX_ROWS {
        return permutation_oracle(cost);
    }
    if m > MAX_ROWS || e > MAX_COLS {
        return Err(Error::InstanceTooLarge { rows: m, cols: e });
    }
    let mut search = TreeSearch {
        cost: cost.view(),
        marginals,
        m,
        e,
        chosen: Vec::with_capacity(m + e - 1),
        best: None,
    };
    let parent: Vec<usize> = (0..m + e).collect();
    search.extend(0, parent);
    let (best_cost, plan) = search
        .best
        .ok_or_else(|| Error::invalid("no feasible basis found"))?;
    Ok((best_cost, plan))
}

struct TreeSearch<'a, T> {
    cost: ArrayView2<'a, T>,
    marginals: &'a Marginals<T>,
    m: usize,
    e: usize,
    chosen: Vec<(usize, usize)>,
    best: Option<(T, Array2<T>)>,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

impl<T: Scalar> TreeSearch<'_, T> {
    fn extend(&mut self, next_cell: usize, parent: Vec<usize>) {
        let need = self.m + self.e - 1;
        if self.chosen.len() == need {
            self.evaluate();
            return;
        }
        let cells = self.m * self.e;
        if cells - next_cell < need - self.chosen.len() {
            return;
        }
        for cell in next_cell..cells {
            if cells - cell < need - self.chosen.len() {
                break;
            }
            let (i, j) = (cell / self.e, cell % self.e);
            let mut p = parent.clone();
            let (a, b) = (find(&mut p, i), find(&mut p, self.m + j));
            if a == b {
                continue;
            }
            p[a] = b;
            self.chosen.push((i, j));
            self.extend(cell + 1, p);
            self.chosen.pop();
        }
    }

    /// Flows on a spanning tree are forced; peel leaves to recover them.
    fn evaluate(&mut self) {
        let (m, e) = (self.m, self.e);
        let mut balance: Vec<T> = self
            .marginals
            .r
            .iter()
            .copied()
            .chain(self.marginals.q.iter().map(|&q| -q))
            .collect();
        let mut alive = vec![true; self.chosen.len()];
        let mut degree = vec![0usize; m + e];
        for &(i, j) in &self.chosen {
            degree[i] += 1;
            degree[m + j] += 1;
        }
        let mut plan = Array2::zeros((m, e));
        let tol = T::lit(1e-12);
        for _ in 0..self.chosen.len() {
            let Some(k) = (0..self.chosen.len()).find(|&k| {
                let (i, j) = self.chosen[k];
                alive[k] && (degree[i] == 1 || degree[m + j] == 1)
            }) else {
                return;
            };
            let (i, j) = self.chosen[k];
            let flow = if degree[i] == 1 {
                balance[i]
            } else {
                -balance[m + j]
            };
            if flow < -tol {
                return;
            }
            plan[[i, j]] = flow.max(T::zero());
            balance[i] -= flow;
            balance[m + j] += flow;
            degree[i] -= 1;
            degree[m + j] -= 1;
            alive[k] = false;
        }
        let c = (&plan * &self.cost).sum();
        if self.best.as_ref().is_none_or(|(b, _)| c < *b) {
            self.best = Some((c, plan));
        }
    }
}
