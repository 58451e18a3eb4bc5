//! Road-network adjacency and static transition matrices.

use std::path::Path;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Pairwise road-network distances, directed.
#[derive(Debug, Clone, Default)]
pub struct DistanceList {
    /// `(from, to, cost)` triples; node ids in `[0, N)`, costs finite `>= 0`.
    pub entries: Vec<(usize, usize, f64)>,
}

impl DistanceList {
    pub fn validate(&self, n: usize) -> Result<()> {
        for &(from, to, cost) in &self.entries {
            if from >= n || to >= n {
                return Err(Error::data(format!(
                    "distance entry ({from}, {to}) out of range for {n} nodes"
                )));
            }
            if !cost.is_finite() || cost < 0.0 {
                return Err(Error::data(format!(
                    "distance entry ({from}, {to}) has invalid cost {cost}"
                )));
            }
        }
        Ok(())
    }
}

/// Parses a distance CSV with header `from,to,cost`.
///
/// When `node_ids` is given, the `from`/`to` fields are looked up as labels
/// in it (the order defines node indices); otherwise they must already be
/// integer indices.
pub fn read_distance_csv(path: &Path, node_ids: Option<&[String]>) -> Result<DistanceList> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let lookup = |field: &str, row: usize| -> Result<usize> {
        match node_ids {
            Some(ids) => ids
                .iter()
                .position(|id| id == field)
                .ok_or_else(|| Error::data(format!("row {row}: unknown node id {field:?}"))),
            None => field
                .parse()
                .map_err(|_| Error::data(format!("row {row}: node id {field:?} is not an index"))),
        }
    };
    let mut entries = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() < 3 {
            return Err(Error::data(format!("row {row}: expected from,to,cost")));
        }
        let from = lookup(&record[0], row)?;
        let to = lookup(&record[1], row)?;
        let cost: f64 = record[2]
            .parse()
            .map_err(|_| Error::data(format!("row {row}: cost {:?} is not a number", &record[2])))?;
        entries.push((from, to, cost));
    }
    Ok(DistanceList { entries })
}

/// Thresholded Gaussian-kernel adjacency:
/// `A[i,j] = exp(-cost(i,j)^2 / sigma^2)` with `sigma` the population
/// standard deviation of all listed costs; entries below `kappa` become 0
/// and unlisted pairs stay 0. Duplicate entries: the last one wins.
pub fn gaussian_kernel_adjacency(
    distances: &DistanceList,
    n: usize,
    kappa: f64,
) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::config(format!("kappa = {kappa} must lie in [0, 1)")));
    }
    distances.validate(n)?;
    if distances.entries.is_empty() {
        return Err(Error::data("empty distance list"));
    }
    let costs: Vec<f64> = distances.entries.iter().map(|e| e.2).collect();
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / costs.len() as f64;
    if var == 0.0 {
        return Err(Error::data(
            "all listed costs are equal; Gaussian kernel width is zero",
        ));
    }
    let mut a = Array2::zeros((n, n));
    for &(from, to, cost) in &distances.entries {
        let w = (-cost * cost / var).exp();
        a[[from, to]] = if w < kappa { 0.0 } else { w };
    }
    Ok(a)
}

/// Binary connectivity adjacency: `A[i,j] = 1` iff `(i, j)` is listed.
pub fn connectivity_adjacency(edges: &[(usize, usize)], n: usize) -> Result<Array2<f64>> {
    let mut a = Array2::zeros((n, n));
    for &(from, to) in edges {
        if from >= n || to >= n {
            return Err(Error::data(format!(
                "edge ({from}, {to}) out of range for {n} nodes"
            )));
        }
        a[[from, to]] = 1.0;
    }
    Ok(a)
}

/// Static forward/backward transition matrices.
#[derive(Debug, Clone)]
pub struct TransitionSet {
    /// `A / rowsum(A)`; zero-degree rows stay all-zero.
    pub forward: Array2<f64>,
    /// `A^T / rowsum(A^T)`; zero-degree rows stay all-zero.
    pub backward: Array2<f64>,
}

impl TransitionSet {
    pub fn num_nodes(&self) -> usize {
        self.forward.nrows()
    }
}

/// Row-normalizes `A` and `A^T` into the transition pair.
pub fn transition_matrices(a: &Array2<f64>) -> TransitionSet {
    TransitionSet {
        forward: row_normalize(a.view()),
        backward: row_normalize(a.t()),
    }
}

fn row_normalize(a: ndarray::ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let s = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }
    out
}

/// Writes an adjacency (or any square) matrix as `.npy`.
pub fn save_adjacency(a: &Array2<f64>, path: &Path) -> Result<()> {
    ndarray_npy::write_npy(path, a)?;
    Ok(())
}

/// Reads an `N x N` matrix written by [`save_adjacency`].
pub fn load_adjacency(path: &Path) -> Result<Array2<f64>> {
    if !path.exists() {
        return Err(Error::data(format!("graph file {} missing", path.display())));
    }
    let a: Array2<f64> = ndarray_npy::read_npy(path)?;
    if a.nrows() != a.ncols() {
        return Err(Error::shape(format!(
            "adjacency must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(a)
}

/// Picks `size` nodes forming a connected induced subgraph (edges read as
/// undirected), growing breadth-first from the highest-degree node. Returns
/// the selected node indices in ascending order.
pub fn connected_subgraph_nodes(a: &Array2<f64>, size: usize) -> Result<Vec<usize>> {
    let n = a.nrows();
    if size == 0 || size > n {
        return Err(Error::config(format!(
            "cannot select {size} nodes from a {n}-node graph"
        )));
    }
    let degree = |i: usize| -> usize {
        (0..n)
            .filter(|&j| j != i && (a[[i, j]] != 0.0 || a[[j, i]] != 0.0))
            .count()
    };
    let seed = (0..n).max_by_key(|&i| (degree(i), n - i)).unwrap();
    let mut picked = Vec::with_capacity(size);
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::from([seed]);
    seen[seed] = true;
    while let Some(i) = queue.pop_front() {
        picked.push(i);
        if picked.len() == size {
            break;
        }
        for j in 0..n {
            if !seen[j] && (a[[i, j]] != 0.0 || a[[j, i]] != 0.0) {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    if picked.len() < size {
        return Err(Error::data(format!(
            "largest reachable component from node {seed} has only {} nodes (< {size})",
            picked.len()
        )));
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Induced submatrix over `nodes` (rows and columns).
pub fn induced_subgraph(a: &Array2<f64>, nodes: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((nodes.len(), nodes.len()), |(i, j)| {
        a[[nodes[i], nodes[j]]]
    })
}
