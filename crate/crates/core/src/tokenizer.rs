//! Grid-binned region tokens and the kNN region graph.
//!
//! Patches are binned on a `G x G` grid in per-axis min-max normalised
//! coordinates (`G = ceil(sqrt(target_m))`). Non-empty cells become regions
//! in row-major order. Region features are member means, masses are member
//! counts, and centroids are means of the raw coordinates.

use std::cmp::Ordering;
use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::{total_cmp, Scalar};

/// Patch-to-region bookkeeping, independent of patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionLayout<T> {
    pub grid_side: usize,
    /// Patch index to region index.
    pub assignment: Vec<usize>,
    /// Member patches per region, in a canonical order that does not depend
    /// on the order patches were supplied in.
    pub members: Vec<Vec<usize>>,
    /// `(gx, gy)` grid cell of each region.
    pub cells: Vec<(usize, usize)>,
    /// Patch counts `A_m`.
    pub masses: Array1<T>,
    /// `M x 2` centroids in raw coordinate units.
    pub centroids: Array2<T>,
}

impl<T: Scalar> RegionLayout<T> {
    pub fn n_regions(&self) -> usize {
        self.members.len()
    }

    pub fn n_patches(&self) -> usize {
        self.assignment.len()
    }

    /// Region supply `r_m = A_m / N`.
    pub fn supply(&self) -> Array1<T> {
        let n = T::from_usize_lossy(self.n_patches());
        self.masses.mapv(|a| a / n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet<T> {
    pub layout: RegionLayout<T>,
    /// `M x d` mean features `H0`.
    pub features: Array2<T>,
}

fn unit_axis<T: Scalar>(coords: ArrayView2<T>, axis: usize) -> Vec<T> {
    let col = coords.column(axis);
    let lo = col.iter().copied().fold(T::infinity(), T::min);
    let hi = col.iter().copied().fold(T::neg_infinity(), T::max);
    let span = hi - lo;
    col.iter()
        .map(|&v| {
            if span > T::zero() {
                (v - lo) / span
            } else {
                T::lit(0.5)
            }
        })
        .collect()
}

fn cell_of<T: Scalar>(u: T, side: usize) -> usize {
    let idx = (u * T::from_usize_lossy(side))
        .floor()
        .to_usize()
        .unwrap_or(0);
    idx.min(side - 1)
}

fn row_cmp<T: Scalar>(a: ndarray::ArrayView1<T>, b: ndarray::ArrayView1<T>) -> Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| total_cmp(x, y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

/// Bins patches into regions. `tiebreak` rows (typically the patch
/// features) order co-located patches so that member order, and therefore
/// every floating-point sum over members, is permutation invariant.
pub fn region_layout<T: Scalar>(
    coords: ArrayView2<T>,
    tiebreak: Option<ArrayView2<T>>,
    target_m: usize,
) -> Result<RegionLayout<T>> {
    let n = coords.nrows();
    if n == 0 {
        return Err(Error::invalid("cannot tokenize an empty bag"));
    }
    if target_m == 0 {
        return Err(Error::invalid("target_m must be at least 1"));
    }
    if coords.ncols() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "coords have {} columns",
            coords.ncols()
        )));
    }
    if let Some(tb) = &tiebreak {
        if tb.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} tiebreak rows for {n} patches",
                tb.nrows()
            )));
        }
    }
    let side = (target_m as f64).sqrt().ceil() as usize;
    let u = unit_axis(coords, 0);
    let v = unit_axis(coords, 1);
    let cell_key: Vec<usize> = (0..n)
        .map(|i| cell_of(v[i], side) * side + cell_of(u[i], side))
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        cell_key[a]
            .cmp(&cell_key[b])
            .then_with(|| row_cmp(coords.row(a), coords.row(b)))
            .then_with(|| match &tiebreak {
                Some(tb) => row_cmp(tb.row(a), tb.row(b)),
                None => Ordering::Equal,
            })
            .then_with(|| a.cmp(&b))
    });

    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut cells = Vec::new();
    let mut assignment = vec![0usize; n];
    let mut last_key = usize::MAX;
    for &i in &order {
        if cell_key[i] != last_key {
            last_key = cell_key[i];
            members.push(Vec::new());
            cells.push((last_key % side, last_key / side));
        }
        assignment[i] = members.len() - 1;
        members.last_mut().expect("just pushed").push(i);
    }
    let masses = members
        .iter()
        .map(|m| T::from_usize_lossy(m.len()))
        .collect();
    let centroids = segment_mean(coords, &members);
    Ok(RegionLayout {
        grid_side: side,
        assignment,
        members,
        cells,
        masses,
        centroids,
    })
}

/// Mean of `values` rows per member list, summed in list order.
pub fn segment_mean<T: Scalar>(values: ArrayView2<T>, members: &[Vec<usize>]) -> Array2<T> {
    let mut out = Array2::zeros((members.len(), values.ncols()));
    for (mut row, group) in out.rows_mut().into_iter().zip(members) {
        for &i in group {
            row += &values.row(i);
        }
        let count = T::from_usize_lossy(group.len().max(1));
        row.mapv_inplace(|x| x / count);
    }
    out
}

/// Region tokens from projected patch features and raw coordinates.
pub fn tokenize_regions<T: Scalar>(
    projected: ArrayView2<T>,
    coords: ArrayView2<T>,
    target_m: usize,
) -> Result<RegionSet<T>> {
    if projected.nrows() != coords.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows for {} coordinate rows",
            projected.nrows(),
            coords.nrows()
        )));
    }
    let layout = region_layout(coords, Some(projected), target_m)?;
    let features = segment_mean(projected, &layout.members);
    Ok(RegionSet { layout, features })
}

/// Heat-kernel bandwidth selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauMode<T> {
    /// Median squared edge length over the slide's graph.
    Median,
    Fixed(T),
}

/// kNN graph over region centroids. Neighbour lists exclude the node itself.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGraph<T> {
    pub neighbors: Vec<Vec<usize>>,
    /// Row-stochastic edge weights aligned with `neighbors`.
    pub weights: Vec<Vec<T>>,
    /// Bandwidth used for the weights; `None` until weights are filled.
    pub tau: Option<T>,
}

impl<T: Scalar> RegionGraph<T> {
    /// Graph from explicit adjacency with uniform weights.
    pub fn from_neighbors(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let m = neighbors.len();
        for (i, list) in neighbors.iter().enumerate() {
            if list.iter().any(|&j| j >= m || j == i) {
                return Err(Error::invalid(format!("node {i} has an invalid neighbour")));
            }
        }
        let weights = neighbors
            .iter()
            .map(|l| vec![T::one() / T::from_usize_lossy(l.len().max(1)); l.len()])
            .collect();
        Ok(Self {
            neighbors,
            weights,
            tau: None,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    /// Undirected edges `(a, b)` with `a < b`, each listed once.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .neighbors
            .iter()
            .enumerate()
            .flat_map(|(m, list)| list.iter().map(move |&n| (m.min(n), m.max(n))))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// `out_m = sum_n w_mn x_n`, row by row.
    pub fn weighted_neighbor_sum(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut out = Array2::zeros(x.raw_dim());
        for (m, mut row) in out.rows_mut().into_iter().enumerate() {
            for (&n, &w) in self.neighbors[m].iter().zip(&self.weights[m]) {
                row.scaled_add(w, &x.row(n));
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "src,dst,weight")?;
        for (m, (list, ws)) in self.neighbors.iter().zip(&self.weights).enumerate() {
            for (n, wt) in list.iter().zip(ws) {
                writeln!(w, "{m},{n},{wt}")?;
            }
        }
        Ok(())
    }
}

fn sq_dist<T: Scalar>(c: ArrayView2<T>, a: usize, b: usize) -> T {
    let dx = c[[a, 0]] - c[[b, 0]];
    let dy = c[[a, 1]] - c[[b, 1]];
    dx * dx + dy * dy
}

/// Topology only: each node links to its `min(k_nn, M-1)` nearest other
/// centroids, ties going to the lower index. Weights start uniform.
pub fn build_region_graph<T: Scalar>(
    centroids: ArrayView2<T>,
    k_nn: usize,
) -> Result<RegionGraph<T>> {
    let m = centroids.nrows();
    if m == 0 {
        return Err(Error::invalid("region graph needs at least one node"));
    }
    let k = k_nn.min(m - 1);
    let neighbors = (0..m)
        .map(|i| {
            let mut others: Vec<(T, usize)> = (0..m)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(centroids, i, j), j))
                .collect();
            others.sort_by(|a, b| total_cmp(a.0, b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect();
    RegionGraph::from_neighbors(neighbors)
}

fn median<T: Scalar>(mut xs: Vec<T>) -> T {
    xs.sort_by(|a, b| total_cmp(*a, *b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / T::lit(2.0)
    }
}

/// Fills `w_mn ∝ exp(-|c_m - c_n|^2 / tau)`, normalised over each
/// neighbourhood.
pub fn heat_kernel_weights<T: Scalar>(
    mut graph: RegionGraph<T>,
    centroids: ArrayView2<T>,
    tau_mode: TauMode<T>,
) -> Result<RegionGraph<T>> {
    if centroids.nrows() != graph.n_nodes() {
        return Err(Error::DimensionMismatch(format!(
            "{} centroids for a graph with {} nodes",
            centroids.nrows(),
            graph.n_nodes()
        )));
    }
    let d2: Vec<Vec<T>> = graph
        .neighbors
        .iter()
        .enumerate()
        .map(|(m, list)| list.iter().map(|&n| sq_dist(centroids, m, n)).collect())
        .collect();
    let all: Vec<T> = d2.iter().flatten().copied().collect();
    let tau = match tau_mode {
        TauMode::Fixed(t) => {
            if !(t > T::zero() && t.is_finite()) {
                return Err(Error::invalid(format!("tau must be positive, got {t}")));
            }
            t
        }
        TauMode::Median => {
            let total: T = all.iter().copied().sum();
            if all.is_empty() || total <= T::zero() {
                T::one()
            } else {
                let med = median(all.clone());
                if med > T::zero() {
                    med
                } else {
                    total / T::from_usize_lossy(all.len())
                }
            }
        }
    };
    graph.weights = d2
        .iter()
        .map(|row| {
            let nearest = row.iter().copied().fold(T::infinity(), T::min);
            let raw: Vec<T> = row.iter().map(|&d| (-(d - nearest) / tau).exp()).collect();
            let z: T = raw.iter().copied().sum();
            raw.into_iter().map(|w| w / z).collect()
        })
        .collect();
    graph.tau = Some(tau);
    Ok(graph)
}

pub fn write_regions_csv<T: Scalar, W: Write>(
    layout: &RegionLayout<T>,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "region_id,x,y,mass")?;
    for m in 0..layout.n_regions() {
        writeln!(
            w,
            "{m},{},{},{}",
            layout.centroids[[m, 0]],
            layout.centroids[[m, 1]],
            layout.masses[m]
        )?;
    }
    Ok(())
}
