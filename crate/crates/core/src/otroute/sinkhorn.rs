use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::Serialize;

use super::Marginals;
use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};
use crate::tokenizer::RegionGraph;

/// When the solver stops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stopping<T> {
    /// Exactly `iters` row/column pairs (training: static unroll).
    Fixed,
    /// At least `iters` pairs, then continue until the row residual is at
    /// most `tol` or `max_iters` pairs have run.
    Converge { tol: T, max_iters: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams<T> {
    pub epsilon: T,
    pub iters: usize,
    pub stopping: Stopping<T>,
}

impl<T: Scalar> SinkhornParams<T> {
    pub fn fixed(epsilon: T, iters: usize) -> Self {
        Self {
            epsilon,
            iters,
            stopping: Stopping::Fixed,
        }
    }

    /// Evaluation mode: residual `1e-9`, capped at `10 * iters`.
    pub fn converged(epsilon: T, iters: usize) -> Self {
        Self {
            epsilon,
            iters,
            stopping: Stopping::Converge {
                tol: T::lit(1e-9),
                max_iters: 10 * iters,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > T::zero() && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.iters == 0 {
            return Err(Error::invalid("sinkhorn needs at least one iteration"));
        }
        Ok(())
    }
}

/// Log-plan diffusion over the region graph, interleaved with Sinkhorn.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothing<T> {
    pub lambda: T,
    pub n_smooth: usize,
    /// 1-based pair indices after which to diffuse; `None` spaces
    /// `n_smooth` steps evenly.
    pub schedule: Option<Vec<usize>>,
}

/// Even spacing: after pairs `max(1, floor(T·j / (n+1)))`, `j = 1..=n`.
pub fn smoothing_schedule(iters: usize, n_smooth: usize) -> Vec<usize> {
    (1..=n_smooth)
        .map(|j| (iters * j / (n_smooth + 1)).max(1))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterResidual {
    pub iter: usize,
    /// `‖Π1 − r‖∞` after the pair.
    pub row: f64,
    /// `‖Πᵀ1 − q‖∞` after the pair.
    pub col: f64,
    pub smoothed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan<T> {
    pub plan: Array2<T>,
    pub log_plan: Array2<T>,
    pub residuals: Vec<IterResidual>,
    pub iterations: usize,
}

impl<T: Scalar> TransportPlan<T> {
    pub fn row_residual(&self, r: &Array1<T>) -> T {
        max_abs_diff(&self.plan.sum_axis(Axis(1)), r)
    }

    pub fn col_residual(&self, q: &Array1<T>) -> T {
        max_abs_diff(&self.plan.sum_axis(Axis(0)), q)
    }

    /// `⟨Π, C⟩`.
    pub fn transport_cost(&self, cost: ArrayView2<T>) -> T {
        (&self.plan * &cost).sum()
    }

    /// Residual trajectory as JSON lines.
    pub fn write_residuals_jsonl<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.residuals {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

fn max_abs_diff<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> T {
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |acc, (&x, &y)| acc.max((x - y).abs()))
}

/// Dual-potential state: `log Π[m, e] = base[m, e] + f[m] + g[e]`.
struct LogPlan<T> {
    base: Array2<T>,
    f: Array1<T>,
    g: Array1<T>,
    log_r: Array1<T>,
    log_q: Array1<T>,
}

impl<T: Scalar> LogPlan<T> {
    fn new(cost: ArrayView2<T>, marg: &Marginals<T>, epsilon: T) -> Self {
        Self {
            base: cost.mapv(|c| -c / epsilon),
            f: Array1::zeros(cost.nrows()),
            g: Array1::zeros(cost.ncols()),
            log_r: marg.r.mapv(T::ln),
            log_q: marg.q.mapv(T::ln),
        }
    }

    fn row_update(&mut self) {
        for (m, row) in self.base.rows().into_iter().enumerate() {
            let lse = log_sum_exp(row.iter().zip(self.g.iter()).map(|(&b, &g)| b + g));
            self.f[m] = self.log_r[m] - lse;
        }
    }

    fn col_update(&mut self) {
        for (e, col) in self.base.columns().into_iter().enumerate() {
            let lse = log_sum_exp(col.iter().zip(self.f.iter()).map(|(&b, &f)| b + f));
            self.g[e] = self.log_q[e] - lse;
        }
    }

    fn log_plan(&self) -> Array2<T> {
        let mut l = self.base.clone();
        for (mut row, &f) in l.rows_mut().into_iter().zip(self.f.iter()) {
            row.zip_mut_with(&self.g, |v, &g| *v = *v + f + g);
        }
        l
    }

    /// Blend every log-row with the weighted mean of its neighbours' log-rows
    /// and fold the result back into the base, resetting the potentials.
    /// Nodes without neighbours are left as they are.
    fn diffuse(&mut self, graph: &RegionGraph<T>, lambda: T) {
        self.base = diffuse_log_plan(self.log_plan().view(), graph, lambda);
        self.f.fill(T::zero());
        self.g.fill(T::zero());
    }

    fn residual(
        &self,
        iter: usize,
        smoothed: bool,
        r: &Array1<T>,
        q: &Array1<T>,
    ) -> (IterResidual, T) {
        let p = self.log_plan().mapv(T::exp);
        let row = max_abs_diff(&p.sum_axis(Axis(1)), r);
        let col = max_abs_diff(&p.sum_axis(Axis(0)), q);
        (
            IterResidual {
                iter,
                row: row.to_f64_lossy(),
                col: col.to_f64_lossy(),
                smoothed,
            },
            row,
        )
    }
}

/// One smoothing step on a log-plan:
/// `L[m, :] ← (1−λ) L[m, :] + λ Σ_{n∈N(m)} w_mn L[n, :]`.
/// Rows without neighbours are copied unchanged.
pub fn diffuse_log_plan<T: Scalar>(
    log_plan: ArrayView2<T>,
    graph: &RegionGraph<T>,
    lambda: T,
) -> Array2<T> {
    let mixed = graph.weighted_neighbor_sum(log_plan);
    let keep = T::one() - lambda;
    let mut next = log_plan.to_owned();
    for (m, (mut row, nb)) in next.rows_mut().into_iter().zip(mixed.rows()).enumerate() {
        if !graph.neighbors[m].is_empty() {
            row.zip_mut_with(&nb, |v, &n| *v = keep * *v + lambda * n);
        }
    }
    next
}

fn check_cost<T: Scalar>(cost: ArrayView2<T>, marg: &Marginals<T>) -> Result<()> {
    if cost.nrows() != marg.n_rows() || cost.ncols() != marg.n_cols() {
        return Err(Error::DimensionMismatch(format!(
            "cost is {}x{} but marginals are {}x{}",
            cost.nrows(),
            cost.ncols(),
            marg.n_rows(),
            marg.n_cols()
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    Ok(())
}

fn solve<T: Scalar>(
    cost: ArrayView2<T>,
    marg: &Marginals<T>,
    params: &SinkhornParams<T>,
    smoothing: Option<(&RegionGraph<T>, &Smoothing<T>)>,
) -> Result<TransportPlan<T>> {
    params.validate()?;
    check_cost(cost, marg)?;
    let mut schedule = match smoothing {
        Some((_, s)) => s
            .schedule
            .clone()
            .unwrap_or_else(|| smoothing_schedule(params.iters, s.n_smooth)),
        None => Vec::new(),
    };
    schedule.sort_unstable();
    if schedule.iter().any(|&s| s == 0 || s > params.iters) {
        return Err(Error::invalid(format!(
            "smoothing schedule {schedule:?} outside 1..={}",
            params.iters
        )));
    }

    let mut state = LogPlan::new(cost, marg, params.epsilon);
    let mut residuals = Vec::with_capacity(params.iters);
    let max_iters = match params.stopping {
        Stopping::Fixed => params.iters,
        Stopping::Converge { max_iters, .. } => max_iters.max(params.iters),
    };
    let mut t = 0;
    while t < max_iters {
        t += 1;
        state.row_update();
        state.col_update();
        let due = schedule.iter().filter(|&&s| s == t).count();
        let (res, row) = state.residual(t, due > 0, &marg.r, &marg.q);
        residuals.push(res);
        if let Some((graph, s)) = smoothing {
            for _ in 0..due {
                state.diffuse(graph, s.lambda);
            }
            if due > 0 && t == max_iters {
                // diffusion landed on the final pair: restore the capacities
                state.col_update();
            }
        }
        if let Stopping::Converge { tol, .. } = params.stopping {
            let pending = schedule.iter().any(|&s| s > t);
            if t >= params.iters && due == 0 && !pending && row <= tol {
                break;
            }
        }
    }
    let log_plan = state.log_plan();
    let plan = log_plan.mapv(T::exp);
    Ok(TransportPlan {
        plan,
        log_plan,
        residuals,
        iterations: t,
    })
}

/// Entropic OT `argmin ⟨Π,C⟩ + ε Σ Π(log Π − 1)` s.t. `Π1 = r`, `Πᵀ1 = q`.
pub fn sinkhorn<T: Scalar>(
    cost: ArrayView2<T>,
    marginals: &Marginals<T>,
    params: &SinkhornParams<T>,
) -> Result<TransportPlan<T>> {
    solve(cost, marginals, params, None)
}

/// Sinkhorn with log-plan diffusion over `graph` after scheduled pairs.
/// `λ = 0` reproduces [`sinkhorn`].
pub fn graph_sinkhorn<T: Scalar>(
    cost: ArrayView2<T>,
    marginals: &Marginals<T>,
    params: &SinkhornParams<T>,
    graph: &RegionGraph<T>,
    smoothing: &Smoothing<T>,
) -> Result<TransportPlan<T>> {
    if graph.n_nodes() != cost.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "graph has {} nodes but cost has {} rows",
            graph.n_nodes(),
            cost.nrows()
        )));
    }
    if !(smoothing.lambda >= T::zero() && smoothing.lambda <= T::one()) {
        return Err(Error::invalid(format!(
            "lambda_s must lie in [0, 1], got {}",
            smoothing.lambda
        )));
    }
    if smoothing.n_smooth > params.iters {
        return Err(Error::invalid("n_smooth cannot exceed the iteration count"));
    }
    solve(cost, marginals, params, Some((graph, smoothing)))
}
