//! Stage I learning graph: a Gaussian kernel over shortest-path distances.
//!
//! The aggregation graph is deliberately *not* the physical one. Each node
//! keeps its `k_I` electrically nearest nodes, so a node deep inside an
//! unmeasured region still reaches a measured node within a few hops even
//! when all of its physical neighbors are unmeasured.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::feeder::DistanceTable;

/// Kernel adjacency with its row-normalized companion.
#[derive(Debug, Clone)]
pub struct AdjacencyA {
    /// Symmetric kernel weights with zero diagonal.
    pub a: Array2<f64>,
    /// Row-normalized weights; each row sums to 1 over its support.
    pub a_tilde: Array2<f64>,
    pub k_i: usize,
    /// Support of each row after symmetrization, ascending.
    pub neighbors: Vec<Vec<usize>>,
    /// Per-node bandwidth: the mean distance to the `k_I` nearest nodes.
    pub sigma: Vec<f64>,
}

/// Build the kernel adjacency from a distance table.
///
/// Row `i` gets `exp(−d_ij²/δ_i²)` for the `k_I` nearest nodes `j ≠ i`
/// (ties cut by lower node index), where `δ_i` is the mean of those `k_I`
/// distances; the matrix is then max-symmetrized, so a row may end up with
/// more than `k_I` nonzeros.
pub fn build_adjacency(d: &DistanceTable, k_i: usize) -> Result<AdjacencyA> {
    if k_i == 0 {
        return Err(Error::Config("neighbor count k_I must be at least 1".into()));
    }
    let n = d.n();
    let mut a = Array2::<f64>::zeros((n, n));
    let mut sigma = vec![0.0; n];
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (d.get(i, j), j))
            .filter(|(w, _)| w.is_finite())
            .collect();
        if cand.len() < k_i {
            return Err(Error::TooFewNeighbors(i + 1, k_i));
        }
        cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let near = &cand[..k_i];
        let delta = near.iter().map(|(w, _)| w).sum::<f64>() / k_i as f64;
        if !(delta > 0.0) {
            return Err(Error::Validation(format!(
                "node {}: zero kernel bandwidth (coincident nodes?)",
                i + 1
            )));
        }
        sigma[i] = delta;
        for &(w, j) in near {
            a[(i, j)] = (-(w * w) / (delta * delta)).exp();
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let m = a[(i, j)].max(a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
    let neighbors = (0..n)
        .map(|i| (0..n).filter(|&j| a[(i, j)] > 0.0).collect())
        .collect();
    let a_tilde = row_normalize(&a)?;
    Ok(AdjacencyA {
        a,
        a_tilde,
        k_i,
        neighbors,
        sigma,
    })
}

/// Divide each row by its sum. Fails on a zero row, which can only come
/// from a node no other node selected either.
pub fn row_normalize(a: &Array2<f64>) -> Result<Array2<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::ShapeMismatch {
            op: "row_normalize".into(),
            detail: format!("{}×{} matrix is not square", a.nrows(), a.ncols()),
        });
    }
    let mut out = a.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let s = row.sum();
        if !(s > 0.0) {
            return Err(Error::IsolatedNode(i + 1));
        }
        row.mapv_inplace(|x| x / s);
    }
    Ok(out)
}

/// Which nodes reach a measured node within `layers` hops of the
/// adjacency's support.
#[derive(Debug, Clone)]
pub struct CoverageReport {
    pub covered: Vec<bool>,
    pub pass: bool,
    pub layers: usize,
    pub k_i: usize,
}

/// Breadth-first sweep from the observed set over the adjacency support.
/// Failure is reported, not raised: a sparse `k_I` that misses coverage is
/// a modeling smell, not an invalid state.
pub fn coverage_check(adj: &AdjacencyA, observed: &[usize], layers: usize) -> CoverageReport {
    let n = adj.neighbors.len();
    let mut covered = vec![false; n];
    let mut frontier = Vec::new();
    for &o in observed {
        if !covered[o] {
            covered[o] = true;
            frontier.push(o);
        }
    }
    for _ in 0..layers {
        let mut next = Vec::new();
        for &u in &frontier {
            for &v in &adj.neighbors[u] {
                if !covered[v] {
                    covered[v] = true;
                    next.push(v);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    let pass = covered.iter().all(|&c| c);
    if !pass {
        let missing: Vec<usize> = covered
            .iter()
            .enumerate()
            .filter(|(_, &c)| !c)
            .map(|(i, _)| i + 1)
            .collect();
        log::warn!(
            "coverage gap at k_I = {}: nodes {missing:?} see no measurement within {layers} hops",
            adj.k_i
        );
    }
    CoverageReport {
        covered,
        pass,
        layers,
        k_i: adj.k_i,
    }
}

/// Smallest `k_I` whose adjacency covers every node within `layers` hops,
/// or `None` if even the densest buildable graph leaves a gap.
pub fn minimum_covering_k(
    d: &DistanceTable,
    observed: &[usize],
    layers: usize,
) -> Result<Option<usize>> {
    for k in 1..d.n() {
        let adj = match build_adjacency(d, k) {
            Ok(adj) => adj,
            Err(Error::TooFewNeighbors(..)) => break,
            Err(e) => return Err(e),
        };
        if coverage_check(&adj, observed, layers).pass {
            return Ok(Some(k));
        }
    }
    Ok(None)
}
