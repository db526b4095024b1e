//! Reference baselines: a plain MLP over flattened samples and a graph
//! convolutional network over the symmetric-normalized physical
//! adjacency. Both consume the same splits and normalization as the main
//! model and train with Adam under an L2-regularized cross entropy.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::FeederGraph;
use crate::stage1::{blockwise, stack_batch, INPUT_WIDTH};
use crate::stage2::flatten_samples;
use crate::tensor::{self, Mat, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> BaselineConfig {
        BaselineConfig {
            lambda: 5e-3,
            lr: 1e-3,
            epochs: 200,
            batch: 32,
            seed: 0,
        }
    }
}

/// Two hidden ReLU layers, each halving the previous width:
/// 6n → 3n → ⌈3n/2⌉ → n logits.
pub struct MlpModel {
    pub n: usize,
    pub store: ParamStore,
}

impl MlpModel {
    pub fn init(n: usize, rng: &mut ChaCha8Rng) -> MlpModel {
        let w0 = 6 * n;
        let w1 = w0 / 2;
        let w2 = w1.div_ceil(2);
        let mut store = ParamStore::new();
        store.insert("w1", tensor::glorot(w0, w1, rng));
        store.insert("b1", Mat::zeros((1, w1)));
        store.insert("w2", tensor::glorot(w1, w2, rng));
        store.insert("b2", Mat::zeros((1, w2)));
        store.insert("w3", tensor::glorot(w2, n, rng));
        store.insert("b3", Mat::zeros((1, n)));
        MlpModel { n, store }
    }
}

struct MlpCache {
    x: Mat,
    h1: Mat,
    h2: Mat,
    z: Mat,
}

fn mlp_forward(store: &ParamStore, x: &Mat) -> Result<MlpCache> {
    let h1 = tensor::relu(&tensor::add_rowvec(
        &tensor::matmul(x, store.value("w1"))?,
        store.value("b1"),
    )?)?;
    let h2 = tensor::relu(&tensor::add_rowvec(
        &tensor::matmul(&h1, store.value("w2"))?,
        store.value("b2"),
    )?)?;
    let g = tensor::add_rowvec(&tensor::matmul(&h2, store.value("w3"))?, store.value("b3"))?;
    let mut z = Mat::zeros(g.dim());
    for (p, row) in g.axis_iter(Axis(0)).enumerate() {
        for (j, v) in tensor::softmax(row)?.iter().enumerate() {
            z[(p, j)] = *v;
        }
    }
    Ok(MlpCache {
        x: x.clone(),
        h1,
        h2,
        z,
    })
}

fn batch_xent(z: &Mat, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (p, &t) in targets.iter().enumerate() {
        total -= z[(p, t)].max(f64::MIN_POSITIVE).ln();
    }
    total / targets.len() as f64
}

fn mlp_backward(store: &mut ParamStore, cache: &MlpCache, targets: &[usize]) {
    let m = targets.len() as f64;
    let mut dg = cache.z.clone();
    for (p, &t) in targets.iter().enumerate() {
        dg[(p, t)] -= 1.0;
    }
    dg /= m;
    store
        .grad_mut("b3")
        .scaled_add(1.0, &dg.sum_axis(Axis(0)).insert_axis(Axis(0)));
    store
        .grad_mut("w3")
        .scaled_add(1.0, &cache.h2.t().dot(&dg));
    let mut du2 = dg.dot(&store.value("w3").t());
    du2.zip_mut_with(&cache.h2, |g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    store
        .grad_mut("b2")
        .scaled_add(1.0, &du2.sum_axis(Axis(0)).insert_axis(Axis(0)));
    store
        .grad_mut("w2")
        .scaled_add(1.0, &cache.h1.t().dot(&du2));
    let mut du1 = du2.dot(&store.value("w2").t());
    du1.zip_mut_with(&cache.h1, |g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    store
        .grad_mut("b1")
        .scaled_add(1.0, &du1.sum_axis(Axis(0)).insert_axis(Axis(0)));
    store
        .grad_mut("w1")
        .scaled_add(1.0, &cache.x.t().dot(&du1));
}

/// Train the MLP on flattened samples at the labeled indices.
pub fn train_mlp(
    model: &mut MlpModel,
    xs: &[Mat],
    targets: &[usize],
    train_idx: &[usize],
    config: &BaselineConfig,
) -> Result<Vec<f64>> {
    if train_idx.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let flat = flatten_samples(xs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(config.batch.max(1)) {
            let mut x = Mat::zeros((chunk.len(), flat.ncols()));
            let mut t = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).assign(&flat.row(i));
                t.push(targets[i]);
            }
            let cache = mlp_forward(&model.store, &x)
                .map_err(|e| Error::Diverged(format!("epoch {epoch}: {e}")))?;
            model.store.zero_grads();
            mlp_backward(&mut model.store, &cache, &t);
            model.store.add_l2_gradients(config.lambda);
            epoch_loss += batch_xent(&cache.z, &t) * chunk.len() as f64;
            seen += chunk.len();
            model.store.adam_step(config.lr)?;
        }
        losses.push(epoch_loss / seen as f64 + config.lambda * model.store.l2_sum());
    }
    Ok(losses)
}

/// Node predictions (0-based argmax) for every sample.
pub fn predict_mlp(model: &MlpModel, xs: &[Mat]) -> Result<Vec<usize>> {
    let flat = flatten_samples(xs)?;
    let cache = mlp_forward(&model.store, &flat)?;
    Ok(crate::stage2::predict_stage2(&cache.z))
}

/// Kipf-style propagation matrix D̂^{−1/2}(A + I)D̂^{−1/2} from a 0/1
/// adjacency.
pub fn gcn_propagation(adj01: &Mat) -> Result<Mat> {
    let n = adj01.nrows();
    if adj01.ncols() != n {
        return Err(Error::ShapeMismatch {
            op: "gcn_propagation".into(),
            detail: format!("{}×{}", adj01.nrows(), adj01.ncols()),
        });
    }
    let mut ahat = adj01.clone();
    for i in 0..n {
        ahat[(i, i)] += 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| ahat.row(i).sum()).collect();
    let mut out = ahat;
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] /= (deg[i] * deg[j]).sqrt();
        }
    }
    Ok(out)
}

/// 0/1 adjacency of the effective physical topology.
pub fn physical_adjacency01(g: &FeederGraph) -> Mat {
    let n = g.n();
    let mut a = Mat::zeros((n, n));
    for i in 0..n {
        for j in g.physical_neighbors(i) {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
    }
    a
}

const GCN_LAYERS: usize = 3;
const GCN_WIDTH: usize = 32;

/// Three graph convolutions of width 32 over a fixed propagation matrix,
/// with a flattened dense head mapping to node logits.
pub struct GcnModel {
    pub n: usize,
    pub s_phys: Mat,
    pub store: ParamStore,
}

impl GcnModel {
    pub fn init(s_phys: Mat, rng: &mut ChaCha8Rng) -> GcnModel {
        let n = s_phys.nrows();
        let mut store = ParamStore::new();
        let mut prev = INPUT_WIDTH;
        for l in 1..=GCN_LAYERS {
            store.insert(&format!("w{l}"), tensor::glorot(prev, GCN_WIDTH, rng));
            prev = GCN_WIDTH;
        }
        store.insert("wh", tensor::glorot(n * GCN_WIDTH, n, rng));
        store.insert("bh", Mat::zeros((1, n)));
        GcnModel { n, s_phys, store }
    }
}

struct GcnCache {
    /// Per layer: the propagated input Ŝ·H^{l−1} (stacked) and the
    /// activated output H^l.
    sh: Vec<Mat>,
    h: Vec<Mat>,
    hat: Mat,
    z: Mat,
}

fn gcn_forward(store: &ParamStore, s_phys: &Mat, stacked: &Mat, batch: usize) -> Result<GcnCache> {
    let n = s_phys.nrows();
    let mut h_prev = stacked.clone();
    let mut sh = Vec::with_capacity(GCN_LAYERS);
    let mut h = Vec::with_capacity(GCN_LAYERS);
    for l in 1..=GCN_LAYERS {
        let propagated = blockwise(s_phys, &h_prev, n);
        let u = tensor::matmul(&propagated, store.value(&format!("w{l}")))?;
        let act = tensor::relu(&u)?;
        sh.push(propagated);
        h.push(act.clone());
        h_prev = act;
    }
    let mut hat = Mat::zeros((batch, n * GCN_WIDTH));
    for b in 0..batch {
        for i in 0..n {
            for c in 0..GCN_WIDTH {
                hat[(b, i * GCN_WIDTH + c)] = h_prev[(b * n + i, c)];
            }
        }
    }
    let g = tensor::add_rowvec(&tensor::matmul(&hat, store.value("wh"))?, store.value("bh"))?;
    let mut z = Mat::zeros(g.dim());
    for (p, row) in g.axis_iter(Axis(0)).enumerate() {
        for (j, v) in tensor::softmax(row)?.iter().enumerate() {
            z[(p, j)] = *v;
        }
    }
    Ok(GcnCache { sh, h, hat, z })
}

fn gcn_backward(
    store: &mut ParamStore,
    s_phys: &Mat,
    cache: &GcnCache,
    targets: &[usize],
) -> Result<()> {
    let n = s_phys.nrows();
    let batch = targets.len();
    let m = batch as f64;
    let mut dg = cache.z.clone();
    for (p, &t) in targets.iter().enumerate() {
        dg[(p, t)] -= 1.0;
    }
    dg /= m;
    store
        .grad_mut("bh")
        .scaled_add(1.0, &dg.sum_axis(Axis(0)).insert_axis(Axis(0)));
    store
        .grad_mut("wh")
        .scaled_add(1.0, &cache.hat.t().dot(&dg));
    let dhat = dg.dot(&store.value("wh").t());
    let mut dh = Mat::zeros((batch * n, GCN_WIDTH));
    for b in 0..batch {
        for i in 0..n {
            for c in 0..GCN_WIDTH {
                dh[(b * n + i, c)] = dhat[(b, i * GCN_WIDTH + c)];
            }
        }
    }
    for l in (1..=GCN_LAYERS).rev() {
        let mut du = dh;
        du.zip_mut_with(&cache.h[l - 1], |g, &o| {
            if o <= 0.0 {
                *g = 0.0;
            }
        });
        store
            .grad_mut(&format!("w{l}"))
            .scaled_add(1.0, &cache.sh[l - 1].t().dot(&du));
        if l > 1 {
            let dsh = du.dot(&store.value(&format!("w{l}")).t());
            // Ŝ is symmetric, so the adjoint propagation is Ŝ again.
            dh = blockwise(s_phys, &dsh, n);
        } else {
            dh = Mat::zeros((0, 0));
        }
    }
    Ok(())
}

/// Train the GCN on the labeled indices.
pub fn train_gcn(
    model: &mut GcnModel,
    xs: &[Mat],
    targets: &[usize],
    train_idx: &[usize],
    config: &BaselineConfig,
) -> Result<Vec<f64>> {
    if train_idx.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = model.n;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(config.batch.max(1)) {
            let stacked = stack_batch(xs, chunk, n)?;
            let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let cache = gcn_forward(&model.store, &model.s_phys, &stacked, chunk.len())
                .map_err(|e| Error::Diverged(format!("epoch {epoch}: {e}")))?;
            model.store.zero_grads();
            gcn_backward(&mut model.store, &model.s_phys, &cache, &t)?;
            model.store.add_l2_gradients(config.lambda);
            epoch_loss += batch_xent(&cache.z, &t) * chunk.len() as f64;
            seen += chunk.len();
            model.store.adam_step(config.lr)?;
        }
        losses.push(epoch_loss / seen as f64 + config.lambda * model.store.l2_sum());
    }
    Ok(losses)
}

/// Node predictions (0-based argmax) for every sample.
pub fn predict_gcn(model: &GcnModel, xs: &[Mat]) -> Result<Vec<usize>> {
    let n = model.n;
    let all: Vec<usize> = (0..xs.len()).collect();
    let mut preds = Vec::with_capacity(xs.len());
    for chunk in all.chunks(512) {
        let stacked = stack_batch(xs, chunk, n)?;
        let cache = gcn_forward(&model.store, &model.s_phys, &stacked, chunk.len())?;
        preds.extend(crate::stage2::predict_stage2(&cache.z));
    }
    Ok(preds)
}
