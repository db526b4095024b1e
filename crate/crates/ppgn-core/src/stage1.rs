//! Stage I network: local aggregation layers over the kernel adjacency,
//! followed by a global transform onto an n-way distribution over fault
//! locations.
//!
//! Each layer concatenates a node's own features with the weighted mean of
//! its neighbors' features and applies a learned linear map with relu; the
//! global transform flattens all node embeddings (node-major) through two
//! affine maps and a softmax. Training proceeds in alternating blocks:
//! several epochs moving only the layer weights, then several moving only
//! the global ones, both against the full objective.

use ndarray::{s, Array1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjacency::AdjacencyA;
use crate::error::{Error, Result};
use crate::fault::Sample;
use crate::tensor::{self, Mat, ParamStore};

/// Input features per node: three phase magnitudes and three angles.
pub const INPUT_WIDTH: usize = 6;

/// Shape metadata for the Stage I parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageIDims {
    /// Node count (= class count of the raw logits).
    pub n: usize,
    /// Per-layer output widths; the input width 6 is implicit.
    pub widths: Vec<usize>,
}

impl StageIDims {
    pub fn new(n: usize, layers: usize, hidden: usize) -> StageIDims {
        StageIDims {
            n,
            widths: vec![hidden; layers],
        }
    }

    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    fn width(&self, k: usize) -> usize {
        if k == 0 {
            INPUT_WIDTH
        } else {
            self.widths[k - 1]
        }
    }

    fn embedding_width(&self) -> usize {
        self.width(self.layers())
    }
}

/// Stage I parameters: `w1..wK` (layer maps, each `2·prev × next`), `wf`,
/// `bf`, `wo`, `bo` (global transform).
pub struct ThetaI {
    pub dims: StageIDims,
    pub store: ParamStore,
}

impl ThetaI {
    /// Glorot-initialized weights, zero biases.
    pub fn init(dims: StageIDims, rng: &mut ChaCha8Rng) -> ThetaI {
        let mut store = ParamStore::new();
        for k in 1..=dims.layers() {
            store.insert(
                &format!("w{k}"),
                tensor::glorot(2 * dims.width(k - 1), dims.width(k), rng),
            );
        }
        let n = dims.n;
        let emb = dims.embedding_width();
        store.insert("wf", tensor::glorot(n * emb, 2 * n, rng));
        store.insert("bf", Mat::zeros((1, 2 * n)));
        store.insert("wo", tensor::glorot(2 * n, n, rng));
        store.insert("bo", Mat::zeros((1, n)));
        ThetaI { dims, store }
    }

    /// Whether a parameter belongs to the local (layer) block, as opposed
    /// to the global transform block.
    pub fn is_local(name: &str) -> bool {
        let b = name.as_bytes();
        b.len() >= 2 && b[0] == b'w' && b[1..].iter().all(|c| c.is_ascii_digit())
    }
}

/// The aggregation operator as a matrix: row i holds `ã_ij/|N_i|` on the
/// support of node i, so `P·H` computes every node's neighbor mean in one
/// product.
pub fn propagation_matrix(adj: &AdjacencyA) -> Mat {
    let n = adj.a_tilde.nrows();
    let mut p = adj.a_tilde.clone();
    for i in 0..n {
        let deg = adj.neighbors[i].len() as f64;
        p.row_mut(i).mapv_inplace(|x| x / deg);
    }
    p
}

/// One aggregation layer on a single sample:
/// `relu([H ‖ P·H]·W)`.
pub fn local_aggregate_layer(h: &Mat, adj: &AdjacencyA, w: &Mat) -> Result<Mat> {
    let p = propagation_matrix(adj);
    let m = tensor::matmul(&p, h)?;
    let cat = tensor::concat_cols(&[h, &m])?;
    tensor::relu(&tensor::matmul(&cat, w)?)
}

/// Global transform of the final embeddings of one sample: logits
/// `f = (ĥ·wf + bf)·wo + bo` with ĥ the node-major flattening, and the
/// softmax distribution over nodes.
pub fn global_transform(hk: &Mat, theta: &ThetaI) -> Result<(Array1<f64>, Vec<f64>)> {
    let n = theta.dims.n;
    let emb = theta.dims.embedding_width();
    if hk.dim() != (n, emb) {
        return Err(Error::ShapeMismatch {
            op: "global_transform".into(),
            detail: format!("embedding {:?}, expected ({n}, {emb})", hk.dim()),
        });
    }
    let hat = hk
        .to_owned()
        .into_shape_with_order((1, n * emb))
        .expect("contiguous embedding");
    let g = tensor::add_rowvec(&tensor::matmul(&hat, theta.store.value("wf"))?, theta.store.value("bf"))?;
    let f = tensor::add_rowvec(&tensor::matmul(&g, theta.store.value("wo"))?, theta.store.value("bo"))?;
    let logits = f.row(0).to_owned();
    let z = tensor::softmax(logits.view())?;
    Ok((logits, z))
}

/// Node feature matrix of a sample.
pub fn sample_matrix(sample: &Sample) -> Mat {
    let n = sample.x.len();
    Mat::from_shape_fn((n, INPUT_WIDTH), |(i, j)| sample.x[i][j])
}

/// Training targets for Stage I: the faulted node, zero-based.
pub fn node_targets(samples: &[Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.meta.fault.node - 1).collect()
}

/// Everything the backward pass needs from a batched forward: the stacked
/// per-layer activations (`B·n` rows each), neighbor means, the hidden
/// global row `g`, logits, and softmax rows.
struct ForwardCache {
    hstacks: Vec<Mat>,
    mstacks: Vec<Mat>,
    hat: Mat,
    g: Mat,
    z: Mat,
}

pub(crate) fn stack_batch(xs: &[Mat], idx: &[usize], n: usize) -> Result<Mat> {
    if idx.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut out = Mat::zeros((idx.len() * n, INPUT_WIDTH));
    for (b, &i) in idx.iter().enumerate() {
        if xs[i].dim() != (n, INPUT_WIDTH) {
            return Err(Error::ShapeMismatch {
                op: "stage1 forward".into(),
                detail: format!("sample {i} is {:?}, expected ({n}, {INPUT_WIDTH})", xs[i].dim()),
            });
        }
        out.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&xs[i]);
    }
    Ok(out)
}

/// `block-diag(P)·H` for a stack of per-sample blocks.
pub(crate) fn blockwise(p: &Mat, h: &Mat, n: usize) -> Mat {
    let batch = h.nrows() / n;
    let mut out = Mat::zeros(h.dim());
    for b in 0..batch {
        let rows = s![b * n..(b + 1) * n, ..];
        out.slice_mut(rows).assign(&p.dot(&h.slice(rows)));
    }
    out
}

fn forward_batch(
    store: &ParamStore,
    dims: &StageIDims,
    p: &Mat,
    x0: Mat,
) -> Result<ForwardCache> {
    let n = dims.n;
    let batch = x0.nrows() / n;
    let mut hstacks = vec![x0];
    let mut mstacks = Vec::new();
    for k in 1..=dims.layers() {
        let h = &hstacks[k - 1];
        let m = blockwise(p, h, n);
        let w = store.value(&format!("w{k}"));
        let prev = dims.width(k - 1);
        let u = h.dot(&w.slice(s![..prev, ..])) + m.dot(&w.slice(s![prev.., ..]));
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("stage1 layer {k} pre-activation")));
        }
        hstacks.push(u.mapv(|v| v.max(0.0)));
        mstacks.push(m);
    }
    let emb = dims.embedding_width();
    let hat = hstacks[dims.layers()]
        .clone()
        .into_shape_with_order((batch, n * emb))
        .expect("contiguous stack");
    let g = tensor::add_rowvec(&tensor::matmul(&hat, store.value("wf"))?, store.value("bf"))?;
    let f = tensor::add_rowvec(&tensor::matmul(&g, store.value("wo"))?, store.value("bo"))?;
    let mut z = Mat::zeros(f.dim());
    for (b, row) in f.axis_iter(Axis(0)).enumerate() {
        let zrow = tensor::softmax(row)?;
        for (j, v) in zrow.iter().enumerate() {
            z[(b, j)] = *v;
        }
    }
    Ok(ForwardCache {
        hstacks,
        mstacks,
        hat,
        g,
        z,
    })
}

fn batch_xent(cache: &ForwardCache, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (b, &y) in targets.iter().enumerate() {
        total -= cache.z[(b, y)].max(f64::MIN_POSITIVE).ln();
    }
    total / targets.len() as f64
}

/// Mean cross-entropy of a labeled batch plus `λ·Σ‖θ‖²`.
pub fn loss_stage1(
    xs: &[Mat],
    targets: &[usize],
    idx: &[usize],
    adj: &AdjacencyA,
    theta: &ThetaI,
    lambda: f64,
) -> Result<f64> {
    let p = propagation_matrix(adj);
    let x0 = stack_batch(xs, idx, theta.dims.n)?;
    let cache = forward_batch(&theta.store, &theta.dims, &p, x0)?;
    let batch_targets: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
    Ok(batch_xent(&cache, &batch_targets) + lambda * theta.store.l2_sum())
}

/// Like [`loss_stage1`], but leaves the loss gradients (cross-entropy
/// plus regularizer) accumulated in `theta.store`.
pub fn grad_stage1(
    xs: &[Mat],
    targets: &[usize],
    idx: &[usize],
    adj: &AdjacencyA,
    theta: &mut ThetaI,
    lambda: f64,
) -> Result<f64> {
    let p = propagation_matrix(adj);
    let x0 = stack_batch(xs, idx, theta.dims.n)?;
    let cache = forward_batch(&theta.store, &theta.dims, &p, x0)?;
    let batch_targets: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
    theta.store.zero_grads();
    let dims = theta.dims.clone();
    let (xent, _) = backward_batch(&mut theta.store, &dims, &p, &cache, &batch_targets);
    theta.store.add_l2_gradients(lambda);
    Ok(xent + lambda * theta.store.l2_sum())
}

/// Backward pass over one batch; accumulates gradients of the mean
/// cross-entropy into the store (regularizer gradients are added by the
/// caller) and returns (mean xent, correct predictions).
fn backward_batch(
    store: &mut ParamStore,
    dims: &StageIDims,
    p: &Mat,
    cache: &ForwardCache,
    targets: &[usize],
) -> (f64, usize) {
    let n = dims.n;
    let batch = targets.len();
    let loss = batch_xent(cache, targets);
    let correct = targets
        .iter()
        .enumerate()
        .filter(|(b, &y)| argmax_row(&cache.z, *b) == y)
        .count();

    // d(mean xent)/df = (z − onehot)/batch.
    let mut df = cache.z.clone();
    for (b, &y) in targets.iter().enumerate() {
        df[(b, y)] -= 1.0;
    }
    df.mapv_inplace(|v| v / batch as f64);

    {
        let dbo = df.sum_axis(Axis(0)).insert_axis(Axis(0));
        store.grad_mut("bo").scaled_add(1.0, &dbo);
    }
    store
        .grad_mut("wo")
        .scaled_add(1.0, &cache.g.t().dot(&df));
    let dg = df.dot(&store.value("wo").t());
    {
        let dbf = dg.sum_axis(Axis(0)).insert_axis(Axis(0));
        store.grad_mut("bf").scaled_add(1.0, &dbf);
    }
    store
        .grad_mut("wf")
        .scaled_add(1.0, &cache.hat.t().dot(&dg));
    let dhat = dg.dot(&store.value("wf").t());
    let emb = dims.embedding_width();
    let mut dh = dhat
        .into_shape_with_order((batch * n, emb))
        .expect("contiguous gradient");

    for k in (1..=dims.layers()).rev() {
        // Mask through the relu using the stored layer output.
        let hk = &cache.hstacks[k];
        dh.zip_mut_with(hk, |g, &o| {
            if o <= 0.0 {
                *g = 0.0;
            }
        });
        let prev = dims.width(k - 1);
        let h = &cache.hstacks[k - 1];
        let m = &cache.mstacks[k - 1];
        let name = format!("w{k}");
        {
            let gw = store.grad_mut(&name);
            gw.slice_mut(s![..prev, ..]).scaled_add(1.0, &h.t().dot(&dh));
            gw.slice_mut(s![prev.., ..]).scaled_add(1.0, &m.t().dot(&dh));
        }
        let w = store.value(&name);
        let dm = dh.dot(&w.slice(s![prev.., ..]).t());
        let mut dprev = dh.dot(&w.slice(s![..prev, ..]).t());
        // Route the neighbor-mean gradient back through P: dH += Pᵀ·dM
        // per sample block.
        let pt = p.t().to_owned();
        dprev += &blockwise(&pt, &dm, n);
        dh = dprev;
    }
    (loss, correct)
}

fn argmax_row(z: &Mat, row: usize) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (j, &v) in z.row(row).iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

/// Hyperparameters for Stage I training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfigI {
    pub lambda: f64,
    pub lr: f64,
    /// Epochs per local-block phase.
    pub t1: usize,
    /// Epochs per global-block phase.
    pub t2: usize,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfigI {
    fn default() -> TrainConfigI {
        TrainConfigI {
            lambda: 5e-3,
            lr: 1e-3,
            t1: 10,
            t2: 10,
            epochs: 200,
            batch: 32,
            seed: 0,
        }
    }
}

/// Which parameter block an epoch updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Local,
    Global,
    Joint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean over batches of (mean xent + λΣ‖θ‖²).
    pub loss: f64,
    pub train_acc: f64,
}

/// Alternating block-coordinate training: T1 epochs on the layer weights,
/// then T2 on the global transform, repeating until the epoch budget.
pub fn train_stage1(
    xs: &[Mat],
    targets: &[usize],
    train_idx: &[usize],
    adj: &AdjacencyA,
    theta: &mut ThetaI,
    config: &TrainConfigI,
) -> Result<Vec<EpochStat>> {
    train_with_schedule(xs, targets, train_idx, adj, theta, config, false)
}

/// Plain joint training (every parameter each epoch); the baseline the
/// alternating schedule is compared against.
pub fn train_stage1_joint(
    xs: &[Mat],
    targets: &[usize],
    train_idx: &[usize],
    adj: &AdjacencyA,
    theta: &mut ThetaI,
    config: &TrainConfigI,
) -> Result<Vec<EpochStat>> {
    train_with_schedule(xs, targets, train_idx, adj, theta, config, true)
}

fn train_with_schedule(
    xs: &[Mat],
    targets: &[usize],
    train_idx: &[usize],
    adj: &AdjacencyA,
    theta: &mut ThetaI,
    config: &TrainConfigI,
    joint: bool,
) -> Result<Vec<EpochStat>> {
    if train_idx.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if config.t1 == 0 || config.t2 == 0 {
        return Err(Error::Config("phase lengths T1, T2 must be ≥ 1".into()));
    }
    let p = propagation_matrix(adj);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let phase = if joint {
            Phase::Joint
        } else if epoch % (config.t1 + config.t2) < config.t1 {
            Phase::Local
        } else {
            Phase::Global
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut correct = 0;
        for chunk in order.chunks(config.batch) {
            let x0 = stack_batch(xs, chunk, theta.dims.n)?;
            let cache = forward_batch(&theta.store, &theta.dims, &p, x0)
                .map_err(|e| Error::Diverged(format!("epoch {epoch}: {e}")))?;
            let batch_targets: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            theta.store.zero_grads();
            let (xent, batch_correct) =
                backward_batch(&mut theta.store, &theta.dims, &p, &cache, &batch_targets);
            theta.store.add_l2_gradients(config.lambda);
            let loss = xent + config.lambda * theta.store.l2_sum();
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}: loss became {loss}"
                )));
            }
            match phase {
                Phase::Joint => theta.store.adam_step(config.lr)?,
                Phase::Local => theta.store.adam_step_where(config.lr, ThetaI::is_local)?,
                Phase::Global => theta
                    .store
                    .adam_step_where(config.lr, |n| !ThetaI::is_local(n))?,
            }
            loss_sum += loss;
            batches += 1;
            correct += batch_correct;
        }
        history.push(EpochStat {
            epoch,
            phase,
            loss: loss_sum / batches as f64,
            train_acc: correct as f64 / order.len() as f64,
        });
    }
    Ok(history)
}

/// One sample's Stage I output.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Argmax node (zero-based), lowest index on ties.
    pub node: usize,
    /// Full softmax distribution over nodes.
    pub z: Vec<f64>,
}

/// Forward pass over any sample set, in memory-bounded chunks.
pub fn predict_stage1(xs: &[Mat], adj: &AdjacencyA, theta: &ThetaI) -> Result<Vec<Prediction>> {
    let p = propagation_matrix(adj);
    let n = theta.dims.n;
    let all: Vec<usize> = (0..xs.len()).collect();
    let mut out = Vec::with_capacity(xs.len());
    for chunk in all.chunks(512) {
        let x0 = stack_batch(xs, chunk, n)?;
        let cache = forward_batch(&theta.store, &theta.dims, &p, x0)?;
        for b in 0..chunk.len() {
            out.push(Prediction {
                node: argmax_row(&cache.z, b),
                z: cache.z.row(b).to_vec(),
            });
        }
    }
    Ok(out)
}
