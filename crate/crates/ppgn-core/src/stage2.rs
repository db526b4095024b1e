//! Stage II network: label propagation over a similarity graph between
//! *samples*.
//!
//! Each sample's Stage I distribution is masked to the argmax node and its
//! physical neighbors, pairwise cosine similarities between those masked
//! vectors build a sparse graph B over all N samples, and two graph
//! convolutions over D^{−1/2}(I+B)D^{−1/2} propagate label information
//! from the labeled fraction to every row. Training is transductive: the
//! loss reads labeled rows only, but propagation touches all of them.

use std::fs;
use std::path::Path;

use ndarray::Axis;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::FeederGraph;
use crate::tensor::{self, Mat, ParamStore};

/// A Stage I distribution restricted to the argmax node and its physical
/// neighborhood.
#[derive(Debug, Clone)]
pub struct MaskedEmbedding {
    pub z_hat: Vec<f64>,
    /// Argmax node of the unmasked distribution (zero-based).
    pub p_star: usize,
}

/// Zero out every entry outside `{p*} ∪ physical neighbors of p*`.
pub fn mask_embedding(z: &[f64], g: &FeederGraph) -> MaskedEmbedding {
    let mut p_star = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, &v) in z.iter().enumerate() {
        if v > best {
            best = v;
            p_star = i;
        }
    }
    let mut z_hat = vec![0.0; z.len()];
    z_hat[p_star] = z[p_star];
    for j in g.physical_neighbors(p_star) {
        z_hat[j] = z[j];
    }
    MaskedEmbedding { z_hat, p_star }
}

/// Cosine similarity, with the zero-vector case pinned to 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity of a zero vector defined as 0");
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Sparse symmetric sample-similarity graph.
///
/// Row support comes from a union rule — pair (p, q) survives if it is in
/// the top `k_II` of row p *or* of row q — followed by weakest-edge
/// trimming on rows the union pushed past `2·k_II` entries, so every row
/// holds at most `2·k_II` nonzeros.
#[derive(Debug, Clone)]
pub struct SimilarityB {
    n: usize,
    k_ii: usize,
    /// Per-row `(column, similarity)` pairs, column-sorted; strictly
    /// positive values, zero diagonal, exactly symmetric.
    rows: Vec<Vec<(usize, f64)>>,
}

/// Build B from one embedding row per sample.
///
/// Similarities are floored at 0 (opposing raw-feature rows count as
/// dissimilar, and probability-vector inputs are never negative anyway);
/// zero similarities are dropped, which keeps mutually disjoint supports
/// producing an empty graph.
pub fn build_b(embeddings: &[Vec<f64>], k_ii: usize) -> Result<SimilarityB> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "similarity graph needs at least 2 samples, got {n}"
        )));
    }
    if k_ii == 0 {
        return Err(Error::Config("k_II must be at least 1".into()));
    }
    if k_ii >= n {
        log::warn!("k_II = {k_ii} ≥ N = {n}: B will be dense");
    }
    let dim = embeddings[0].len();
    for (p, e) in embeddings.iter().enumerate() {
        if e.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "build_b".into(),
                detail: format!("embedding {p} has {} entries, expected {dim}", e.len()),
            });
        }
    }
    let norms: Vec<f64> = embeddings
        .iter()
        .map(|e| e.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let take = k_ii.min(n - 1);
    // Top-k of every row, keeping the similarity alongside the index.
    let mut top: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for p in 0..n {
        let mut sims: Vec<(usize, f64)> = (0..n)
            .filter(|&q| q != p)
            .map(|q| {
                let s = if norms[p] == 0.0 || norms[q] == 0.0 {
                    0.0
                } else {
                    let dot: f64 = embeddings[p]
                        .iter()
                        .zip(&embeddings[q])
                        .map(|(x, y)| x * y)
                        .sum();
                    (dot / (norms[p] * norms[q])).max(0.0)
                };
                (q, s)
            })
            .collect();
        // Descending similarity, ties toward the lower sample index.
        sims.select_nth_unstable_by(take - 1, |a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        sims.truncate(take);
        top.push(sims);
    }
    // Union rule: pair (p, q) survives if either endpoint selected the
    // other. Normalize each selection to its unordered pair, then dedupe.
    let mut pairs: Vec<(usize, usize, f64)> = Vec::with_capacity(n * take);
    for (p, list) in top.iter().enumerate() {
        for &(q, sim) in list {
            if sim > 0.0 {
                pairs.push((p.min(q), p.max(q), sim));
            }
        }
    }
    pairs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    pairs.dedup_by_key(|&mut (p, q, _)| (p, q));
    // The union alone bounds row counts only on average: a row picked by
    // many peers collects unbounded incoming edges. Shed the weakest
    // edges of over-full rows until every row fits in 2·k_II, visiting
    // candidates in ascending similarity (index pair breaks ties).
    let cap = 2 * k_ii;
    let mut count = vec![0usize; n];
    for &(p, q, _) in &pairs {
        count[p] += 1;
        count[q] += 1;
    }
    if count.iter().any(|&c| c > cap) {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by(|&a, &b| {
            pairs[a]
                .2
                .total_cmp(&pairs[b].2)
                .then((pairs[a].0, pairs[a].1).cmp(&(pairs[b].0, pairs[b].1)))
        });
        let mut keep = vec![true; pairs.len()];
        let mut dropped = 0usize;
        for e in order {
            let (p, q, _) = pairs[e];
            if count[p] > cap || count[q] > cap {
                keep[e] = false;
                count[p] -= 1;
                count[q] -= 1;
                dropped += 1;
            }
        }
        log::warn!("similarity graph trimmed {dropped} over-cap edges (row cap {cap})");
        let mut kept = Vec::with_capacity(pairs.len() - dropped);
        for (e, pair) in pairs.into_iter().enumerate() {
            if keep[e] {
                kept.push(pair);
            }
        }
        pairs = kept;
    }
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (p, q, sim) in pairs {
        rows[p].push((q, sim));
        rows[q].push((p, sim));
    }
    for row in &mut rows {
        row.sort_by_key(|&(q, _)| q);
    }
    Ok(SimilarityB { n, k_ii, rows })
}

impl SimilarityB {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k_ii(&self) -> usize {
        self.k_ii
    }

    pub fn row(&self, p: usize) -> &[(usize, f64)] {
        &self.rows[p]
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.rows[p]
            .iter()
            .find(|&&(c, _)| c == q)
            .map_or(0.0, |&(_, s)| s)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// Degree of B̂ = I + B at row p.
    pub fn degree(&self, p: usize) -> f64 {
        1.0 + self.rows[p].iter().map(|&(_, s)| s).sum::<f64>()
    }

    /// The normalized propagation operator D^{−1/2}·B̂·D^{−1/2} as
    /// compressed sparse rows.
    pub fn propagation(&self) -> Csr {
        let inv_sqrt: Vec<f64> = (0..self.n).map(|p| 1.0 / self.degree(p).sqrt()).collect();
        let mut indptr = Vec::with_capacity(self.n + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for p in 0..self.n {
            let mut diag_done = false;
            for &(q, sim) in &self.rows[p] {
                if !diag_done && q > p {
                    indices.push(p);
                    data.push(inv_sqrt[p] * inv_sqrt[p]);
                    diag_done = true;
                }
                indices.push(q);
                data.push(sim * inv_sqrt[p] * inv_sqrt[q]);
            }
            if !diag_done {
                indices.push(p);
                data.push(inv_sqrt[p] * inv_sqrt[p]);
            }
            indptr.push(indices.len());
        }
        Csr {
            n: self.n,
            indptr,
            indices,
            data,
        }
    }
}

/// Square sparse matrix in compressed-sparse-row form.
#[derive(Debug, Clone)]
pub struct Csr {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl Csr {
    pub fn n(&self) -> usize {
        self.n
    }

    /// `self · dense`, row by row.
    pub fn matmul(&self, dense: &Mat) -> Result<Mat> {
        if dense.nrows() != self.n {
            return Err(Error::ShapeMismatch {
                op: "sparse matmul".into(),
                detail: format!("{}×{} · {}×{}", self.n, self.n, dense.nrows(), dense.ncols()),
            });
        }
        let mut out = Mat::zeros(dense.dim());
        for p in 0..self.n {
            let mut row = out.row_mut(p);
            for k in self.indptr[p]..self.indptr[p + 1] {
                row.scaled_add(self.data[k], &dense.row(self.indices[k]));
            }
        }
        Ok(out)
    }

    /// `v · self` for a row vector `v` (length n).
    pub fn left_multiply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for p in 0..self.n {
            if v[p] == 0.0 {
                continue;
            }
            for k in self.indptr[p]..self.indptr[p + 1] {
                out[self.indices[k]] += v[p] * self.data[k];
            }
        }
        out
    }

    /// Dense copy (tests and small diagnostics only).
    pub fn to_dense(&self) -> Mat {
        let mut out = Mat::zeros((self.n, self.n));
        for p in 0..self.n {
            for k in self.indptr[p]..self.indptr[p + 1] {
                out[(p, self.indices[k])] = self.data[k];
            }
        }
        out
    }
}

const B_FORMAT: &str = "ppgn-B-v1";

#[derive(Serialize, Deserialize)]
struct BFile {
    format: String,
    n: usize,
    k_ii: usize,
    /// Upper-triangle entries (p < q, similarity).
    triples: Vec<(usize, usize, f64)>,
}

pub fn write_b(path: &Path, b: &SimilarityB) -> Result<()> {
    let mut triples = Vec::with_capacity(b.nnz() / 2);
    for p in 0..b.n {
        for &(q, sim) in &b.rows[p] {
            if q > p {
                triples.push((p, q, sim));
            }
        }
    }
    let file = BFile {
        format: B_FORMAT.to_string(),
        n: b.n,
        k_ii: b.k_ii,
        triples,
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_b(path: &Path) -> Result<SimilarityB> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: BFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        source: e,
    })?;
    if file.format != B_FORMAT {
        return Err(Error::Validation(format!(
            "similarity graph format {:?} is not {B_FORMAT:?}",
            file.format
        )));
    }
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); file.n];
    for &(p, q, sim) in &file.triples {
        if p >= q || q >= file.n {
            return Err(Error::Validation(format!(
                "similarity entry ({p}, {q}) out of order or range"
            )));
        }
        if !(sim > 0.0 && sim.is_finite()) {
            return Err(Error::Validation(format!(
                "similarity entry ({p}, {q}) has invalid value {sim}"
            )));
        }
        rows[p].push((q, sim));
        rows[q].push((p, sim));
    }
    for row in &mut rows {
        row.sort_by_key(|&(q, _)| q);
    }
    Ok(SimilarityB {
        n: file.n,
        k_ii: file.k_ii,
        rows,
    })
}

/// Stage II parameters: `w1`, `w2` (graph convolutions, widths 3n), `wo`,
/// `bo` (output layer).
pub struct ThetaII {
    /// Node count of the feeder (output classes).
    pub n: usize,
    pub store: ParamStore,
}

impl ThetaII {
    pub fn init(n: usize, rng: &mut ChaCha8Rng) -> ThetaII {
        let mut store = ParamStore::new();
        store.insert("w1", tensor::glorot(6 * n, 3 * n, rng));
        store.insert("w2", tensor::glorot(3 * n, 3 * n, rng));
        store.insert("wo", tensor::glorot(3 * n, n, rng));
        store.insert("bo", Mat::zeros((1, n)));
        ThetaII { n, store }
    }
}

/// Flatten samples node-major into the N×6n Stage II input.
pub fn flatten_samples(xs: &[Mat]) -> Result<Mat> {
    if xs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (n, w) = xs[0].dim();
    let mut out = Mat::zeros((xs.len(), n * w));
    for (p, x) in xs.iter().enumerate() {
        if x.dim() != (n, w) {
            return Err(Error::ShapeMismatch {
                op: "flatten_samples".into(),
                detail: format!("sample {p} is {:?}, expected ({n}, {w})", x.dim()),
            });
        }
        for i in 0..n {
            for j in 0..w {
                out[(p, i * w + j)] = x[(i, j)];
            }
        }
    }
    Ok(out)
}

struct ForwardCacheII {
    /// Ŝ·C⁰, the loop-invariant first-layer input.
    sc0: Mat,
    c1: Mat,
    c2: Mat,
    z: Mat,
}

fn forward_stage2(store: &ParamStore, s_norm: &Csr, sc0: &Mat) -> Result<ForwardCacheII> {
    let u1 = tensor::matmul(sc0, store.value("w1"))?;
    let c1 = u1.mapv(|v| v.max(0.0));
    let y2 = tensor::matmul(&c1, store.value("w2"))?;
    let u2 = s_norm.matmul(&y2)?;
    if !u2.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("stage2 layer 2 pre-activation".into()));
    }
    let c2 = u2.mapv(|v| v.max(0.0));
    let g = tensor::add_rowvec(&tensor::matmul(&c2, store.value("wo"))?, store.value("bo"))?;
    let mut z = Mat::zeros(g.dim());
    for (p, row) in g.axis_iter(Axis(0)).enumerate() {
        let zrow = tensor::softmax(row)?;
        for (j, v) in zrow.iter().enumerate() {
            z[(p, j)] = *v;
        }
    }
    Ok(ForwardCacheII {
        sc0: sc0.clone(),
        c1,
        c2,
        z,
    })
}

/// Full Stage II forward pass: row-wise probability distributions over
/// nodes for every sample.
pub fn gcl_forward(c0: &Mat, b: &SimilarityB, theta: &ThetaII) -> Result<Mat> {
    let s_norm = b.propagation();
    let sc0 = s_norm.matmul(c0)?;
    let cache = forward_stage2(&theta.store, &s_norm, &sc0)?;
    Ok(cache.z)
}

/// Full-batch Stage II loss (labeled-row cross-entropy plus `λ·Σ‖θ‖²`)
/// with gradients left accumulated in `theta.store`.
pub fn grad_stage2(
    c0: &Mat,
    b: &SimilarityB,
    targets: &[usize],
    labeled: &[usize],
    theta: &mut ThetaII,
    lambda: f64,
) -> Result<f64> {
    let s_norm = b.propagation();
    let sc0 = s_norm.matmul(c0)?;
    let cache = forward_stage2(&theta.store, &s_norm, &sc0)?;
    theta.store.zero_grads();
    backward_stage2(&mut theta.store, &s_norm, &cache, targets, labeled)?;
    theta.store.add_l2_gradients(lambda);
    Ok(labeled_xent(&cache.z, targets, labeled) + lambda * theta.store.l2_sum())
}

/// Row-wise argmax with lowest-index tie-break.
pub fn predict_stage2(yhat: &Mat) -> Vec<usize> {
    (0..yhat.nrows())
        .map(|p| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in yhat.row(p).iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfigII {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for TrainConfigII {
    fn default() -> TrainConfigII {
        TrainConfigII {
            lambda: 5e-5,
            lr: 1e-3,
            epochs: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStatII {
    pub epoch: usize,
    pub loss: f64,
    pub labeled_acc: f64,
}

fn labeled_xent(z: &Mat, targets: &[usize], labeled: &[usize]) -> f64 {
    let mut total = 0.0;
    for &p in labeled {
        total -= z[(p, targets[p])].max(f64::MIN_POSITIVE).ln();
    }
    total / labeled.len() as f64
}

/// Full-batch transductive training: loss over labeled rows of Eq-style
/// cross entropy plus `λ·Σ‖θ‖²`, propagated over all N rows each step.
pub fn train_stage2(
    c0: &Mat,
    b: &SimilarityB,
    targets: &[usize],
    labeled: &[usize],
    theta: &mut ThetaII,
    config: &TrainConfigII,
) -> Result<Vec<EpochStatII>> {
    if labeled.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if c0.nrows() != b.n() || targets.len() != b.n() {
        return Err(Error::ShapeMismatch {
            op: "train_stage2".into(),
            detail: format!(
                "{} feature rows, {} targets, {} graph nodes",
                c0.nrows(),
                targets.len(),
                b.n()
            ),
        });
    }
    let s_norm = b.propagation();
    let sc0 = s_norm.matmul(c0)?;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let cache = forward_stage2(&theta.store, &s_norm, &sc0)
            .map_err(|e| Error::Diverged(format!("epoch {epoch}: {e}")))?;
        theta.store.zero_grads();
        let (xent, acc) = backward_stage2(
            &mut theta.store,
            &s_norm,
            &cache,
            targets,
            labeled,
        )?;
        theta.store.add_l2_gradients(config.lambda);
        let loss = xent + config.lambda * theta.store.l2_sum();
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: loss became {loss}")));
        }
        theta.store.adam_step(config.lr)?;
        history.push(EpochStatII {
            epoch,
            loss,
            labeled_acc: acc,
        });
    }
    Ok(history)
}

fn backward_stage2(
    store: &mut ParamStore,
    s_norm: &Csr,
    cache: &ForwardCacheII,
    targets: &[usize],
    labeled: &[usize],
) -> Result<(f64, f64)> {
    let xent = labeled_xent(&cache.z, targets, labeled);
    let preds = predict_stage2(&cache.z);
    let correct = labeled.iter().filter(|&&p| preds[p] == targets[p]).count();
    let m = labeled.len() as f64;

    // Loss terms exist only on labeled rows; all other rows of dG stay 0.
    let mut dg = Mat::zeros(cache.z.dim());
    for &p in labeled {
        for j in 0..cache.z.ncols() {
            dg[(p, j)] = cache.z[(p, j)] / m;
        }
        dg[(p, targets[p])] -= 1.0 / m;
    }

    {
        let dbo = dg.sum_axis(Axis(0)).insert_axis(Axis(0));
        store.grad_mut("bo").scaled_add(1.0, &dbo);
    }
    store
        .grad_mut("wo")
        .scaled_add(1.0, &cache.c2.t().dot(&dg));
    let dc2 = dg.dot(&store.value("wo").t());
    let mut du2 = dc2;
    du2.zip_mut_with(&cache.c2, |g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    // Ŝ is symmetric, so the adjoint of Y ↦ Ŝ·Y is Ŝ itself.
    let dy2 = s_norm.matmul(&du2)?;
    store
        .grad_mut("w2")
        .scaled_add(1.0, &cache.c1.t().dot(&dy2));
    let dc1 = dy2.dot(&store.value("w2").t());
    let mut du1 = dc1;
    du1.zip_mut_with(&cache.c1, |g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    store
        .grad_mut("w1")
        .scaled_add(1.0, &cache.sc0.t().dot(&du1));
    Ok((xent, correct as f64 / m))
}
