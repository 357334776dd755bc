//! Wall-clock timing of the entropic solvers over an `(M, E, T)` grid.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use log::{info, warn};
use ndarray::Array2;
use rand::Rng;
use roam_core::otroute::{graph_sinkhorn, sinkhorn, Marginals, SinkhornParams, Smoothing};
use roam_core::rng::{derive_seed, stream};
use roam_core::tokenizer::{build_region_graph, heat_kernel_weights, TauMode};

use crate::config::usage;
use crate::BenchArgs;

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub solver: &'static str,
    pub m: usize,
    pub e: usize,
    pub t: usize,
    pub median_ms: f64,
}

impl Row {
    /// Nanoseconds per cost entry per iteration; flat when cost is linear in `M·E·T`.
    pub fn ns_per_cell(&self) -> f64 {
        self.median_ms * 1e6 / (self.m * self.e * self.t) as f64
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_ms(reps: usize, mut f: impl FnMut() -> anyhow::Result<()>) -> anyhow::Result<f64> {
    f()?;
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(samples))
}

pub fn measure(args: &BenchArgs, seed: u64) -> anyhow::Result<Vec<Row>> {
    if args.reps == 0 || args.m.contains(&0) || args.e.contains(&0) || args.t.contains(&0) {
        return Err(usage("bench sizes and --reps must be positive"));
    }
    let mut rows = Vec::new();
    for &m in &args.m {
        for &e in &args.e {
            let mut rng = stream(derive_seed(seed, &[m as u64, e as u64]));
            let cost = Array2::from_shape_simple_fn((m, e), || rng.gen_range(0.0..2.0));
            let centroids = Array2::from_shape_simple_fn((m, 2), || rng.gen_range(0.0..1.0));
            let graph = heat_kernel_weights(
                build_region_graph(centroids.view(), 8)?,
                centroids.view(),
                TauMode::Median,
            )?;
            let marg = Marginals::<f64>::uniform(m, e)?;
            for &t in &args.t {
                let params = SinkhornParams::fixed(0.1, t);
                let plain = time_ms(args.reps, || {
                    sinkhorn(cost.view(), &marg, &params)?;
                    Ok(())
                })?;
                rows.push(Row {
                    solver: "sinkhorn",
                    m,
                    e,
                    t,
                    median_ms: plain,
                });
                let smoothing = Smoothing {
                    lambda: 0.3,
                    n_smooth: 3.min(t),
                    schedule: None,
                };
                let smooth = time_ms(args.reps, || {
                    graph_sinkhorn(cost.view(), &marg, &params, &graph, &smoothing)?;
                    Ok(())
                })?;
                rows.push(Row {
                    solver: "graph_sinkhorn",
                    m,
                    e,
                    t,
                    median_ms: smooth,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[Row], mut w: W) -> std::io::Result<()> {
    writeln!(w, "solver,m,e,t,median_ms,ns_per_cell")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.3}",
            r.solver,
            r.m,
            r.e,
            r.t,
            r.median_ms,
            r.ns_per_cell()
        )?;
    }
    Ok(())
}

/// Ratios of solve time when `T` doubles with `M` and `E` held fixed.
pub fn doubling_ratios(rows: &[Row]) -> Vec<(&Row, f64)> {
    rows.iter()
        .filter_map(|a| {
            rows.iter()
                .find(|b| b.solver == a.solver && b.m == a.m && b.e == a.e && b.t == 2 * a.t)
                .map(|b| (a, b.median_ms / a.median_ms))
        })
        .collect()
}

pub fn run(args: &BenchArgs, seed: u64, out: &Path) -> anyhow::Result<()> {
    let rows = measure(args, seed)?;
    let path = out.join("bench.csv");
    let file =
        std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(&rows, std::io::BufWriter::new(file))?;
    write_csv(&rows, std::io::stdout().lock())?;

    for (row, ratio) in doubling_ratios(&rows) {
        if (ratio - 2.0).abs() > 0.6 {
            warn!(
                "{} M={} E={}: T {} -> {} scaled time by {ratio:.2}",
                row.solver,
                row.m,
                row.e,
                row.t,
                2 * row.t
            );
        }
    }
    let cells: Vec<f64> = rows.iter().map(Row::ns_per_cell).collect();
    let lo = cells.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cells.iter().copied().fold(0.0, f64::max);
    info!("per-cell cost ranges {lo:.2}..{hi:.2} ns across the grid");
    Ok(())
}
