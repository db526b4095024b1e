//! Dense-matrix compute layer shared by both network stages: checked
//! matrix algebra, softmax cross-entropy, Adam, finite-difference gradient
//! checking, and checkpoint I/O.
//!
//! Everything is 64-bit and single-threaded with fixed summation order, so
//! a (seed, data) pair reproduces training bit-for-bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Row-major dense matrix of 64-bit reals.
pub type Mat = Array2<f64>;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const CHECKPOINT_FORMAT: &str = "ppgn-ckpt-v1";

fn ensure_finite(op: &str, m: &Mat) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.into()))
    }
}

/// `a · b` with shape and finiteness checks.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.ncols() != b.nrows() {
        return Err(Error::ShapeMismatch {
            op: "matmul".into(),
            detail: format!(
                "{}×{} · {}×{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            ),
        });
    }
    ensure_finite("matmul lhs", a)?;
    ensure_finite("matmul rhs", b)?;
    let out = a.dot(b);
    ensure_finite("matmul output", &out)?;
    Ok(out)
}

/// Elementwise sum.
pub fn add(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "add".into(),
            detail: format!(
                "{}×{} + {}×{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            ),
        });
    }
    let out = a + b;
    ensure_finite("add output", &out)?;
    Ok(out)
}

/// Add a `1×c` bias row to every row of an `r×c` matrix.
pub fn add_rowvec(a: &Mat, bias: &Mat) -> Result<Mat> {
    if bias.nrows() != 1 || bias.ncols() != a.ncols() {
        return Err(Error::ShapeMismatch {
            op: "add_rowvec".into(),
            detail: format!(
                "{}×{} + bias {}×{}",
                a.nrows(),
                a.ncols(),
                bias.nrows(),
                bias.ncols()
            ),
        });
    }
    let out = a + bias;
    ensure_finite("add_rowvec output", &out)?;
    Ok(out)
}

/// Horizontal concatenation: same row count, columns appended in order.
pub fn concat_cols(parts: &[&Mat]) -> Result<Mat> {
    let rows = match parts.first() {
        Some(m) => m.nrows(),
        None => return Err(Error::EmptyBatch),
    };
    let cols: usize = parts.iter().map(|m| m.ncols()).sum();
    let mut out = Mat::zeros((rows, cols));
    let mut at = 0;
    for m in parts {
        if m.nrows() != rows {
            return Err(Error::ShapeMismatch {
                op: "concat_cols".into(),
                detail: format!("row counts {} vs {}", rows, m.nrows()),
            });
        }
        ensure_finite("concat_cols input", m)?;
        out.slice_mut(ndarray::s![.., at..at + m.ncols()])
            .assign(m);
        at += m.ncols();
    }
    Ok(out)
}

/// Elementwise `max(0, x)`. NaN inputs are rejected rather than silently
/// flushed to zero by the max.
pub fn relu(x: &Mat) -> Result<Mat> {
    ensure_finite("relu input", x)?;
    Ok(x.mapv(|v| v.max(0.0)))
}

/// Gradient of relu given its *output*: passes upstream where the output
/// is positive. (relu(x) > 0 ⇔ x > 0, and the kink at 0 takes
/// subgradient 0.)
pub fn relu_backward(output: &Mat, upstream: &Mat) -> Result<Mat> {
    if output.dim() != upstream.dim() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward".into(),
            detail: format!("{:?} vs {:?}", output.dim(), upstream.dim()),
        });
    }
    let mut g = upstream.clone();
    g.zip_mut_with(output, |u, &o| {
        if o <= 0.0 {
            *u = 0.0;
        }
    });
    Ok(g)
}

/// Max-shifted softmax with cross-entropy against a class index.
///
/// Returns `(−log z_y, z)`; the gradient with respect to the logits is
/// `z − onehot(y)`, left to the caller.
pub fn softmax_xent(logits: ArrayView1<f64>, target: usize) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if target >= logits.len() {
        return Err(Error::ShapeMismatch {
            op: "softmax_xent".into(),
            detail: format!("target {} out of {} classes", target, logits.len()),
        });
    }
    if !logits.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("softmax_xent logits".into()));
    }
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&f| (f - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let z: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    // −log z_y computed from the shifted form directly for accuracy.
    let loss = sum.ln() - (logits[target] - max);
    Ok((loss, z))
}

/// Softmax alone (unit-sum probability vector).
pub fn softmax(logits: ArrayView1<f64>) -> Result<Vec<f64>> {
    let (_, z) = softmax_xent(logits, 0)?;
    Ok(z)
}

/// Glorot-uniform initialization in `±√(6/(fan_in + fan_out))`.
pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..=limit))
}

#[derive(Clone)]
struct Entry {
    value: Mat,
    grad: Mat,
    m: Mat,
    v: Mat,
    t: u64,
}

/// Named parameters with paired gradient buffers and Adam moments.
///
/// The step counter is kept per parameter so that alternating schedules,
/// which freeze blocks for whole phases, keep each parameter's bias
/// correction consistent with how often it actually moved.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Register a parameter. Duplicate names are a construction bug.
    pub fn insert(&mut self, name: &str, value: Mat) {
        let dim = value.dim();
        let prev = self.entries.insert(
            name.to_string(),
            Entry {
                value,
                grad: Mat::zeros(dim),
                m: Mat::zeros(dim),
                v: Mat::zeros(dim),
                t: 0,
            },
        );
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    fn entry(&self, name: &str) -> &Entry {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn entry_mut(&mut self, name: &str) -> &mut Entry {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn value(&self, name: &str) -> &Mat {
        &self.entry(name).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Mat {
        &mut self.entry_mut(name).value
    }

    pub fn grad(&self, name: &str) -> &Mat {
        &self.entry(name).grad
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Mat {
        &mut self.entry_mut(name).grad
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(|s| s.as_str()).collect()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    /// Σ‖θ‖² over all parameters.
    pub fn l2_sum(&self) -> f64 {
        self.entries
            .values()
            .map(|e| e.value.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    /// Add the squared-L2 regularizer gradient `2λθ` to every gradient
    /// buffer.
    pub fn add_l2_gradients(&mut self, lambda: f64) {
        for e in self.entries.values_mut() {
            e.grad.scaled_add(2.0 * lambda, &e.value);
        }
    }

    /// One Adam update on every parameter.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        self.adam_step_where(lr, |_| true)
    }

    /// One Adam update restricted to parameters whose name satisfies
    /// `active`; frozen parameters keep value, moments, and step counter
    /// bit-identical.
    pub fn adam_step_where(&mut self, lr: f64, active: impl Fn(&str) -> bool) -> Result<()> {
        for (name, e) in self.entries.iter_mut() {
            if !active(name) {
                continue;
            }
            e.t += 1;
            let t = e.t as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            for ((th, g), (m, v)) in e
                .value
                .iter_mut()
                .zip(e.grad.iter())
                .zip(e.m.iter_mut().zip(e.v.iter_mut()))
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *th -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
            if !e.value.iter().all(|x| x.is_finite()) {
                return Err(Error::Diverged(format!("parameter {name} left finite range")));
            }
        }
        Ok(())
    }

    /// SHA-256 over name-sorted parameter values (little-endian bytes);
    /// used to prove models were not silently retrained between
    /// evaluations.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, e) in &self.entries {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for x in e.value.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_checkpoint(&self, rng: &ChaCha8Rng, meta: BTreeMap<String, String>) -> Checkpoint {
        let params = self
            .entries
            .iter()
            .map(|(name, e)| {
                (
                    name.clone(),
                    CheckpointParam {
                        rows: e.value.nrows(),
                        cols: e.value.ncols(),
                        values: e.value.iter().copied().collect(),
                        m: e.m.iter().copied().collect(),
                        v: e.v.iter().copied().collect(),
                        t: e.t,
                    },
                )
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            meta,
            rng: RngState::capture(rng),
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(ParamStore, ChaCha8Rng)> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!(
                "checkpoint format {:?} is not {CHECKPOINT_FORMAT:?}",
                ck.format
            )));
        }
        let mut store = ParamStore::new();
        for (name, p) in &ck.params {
            let size = p.rows * p.cols;
            if p.values.len() != size || p.m.len() != size || p.v.len() != size {
                return Err(Error::Validation(format!(
                    "checkpoint parameter {name}: {}×{} with {} values",
                    p.rows,
                    p.cols,
                    p.values.len()
                )));
            }
            let shape = (p.rows, p.cols);
            let make = |data: &[f64]| Mat::from_shape_vec(shape, data.to_vec()).unwrap();
            store.entries.insert(
                name.clone(),
                Entry {
                    value: make(&p.values),
                    grad: Mat::zeros(shape),
                    m: make(&p.m),
                    v: make(&p.v),
                    t: p.t,
                },
            );
        }
        Ok((store, ck.rng.restore()))
    }
}

/// Resumable RNG state (seed, stream, and position within the stream).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_lo: pos as u64,
            word_pos_hi: (pos >> 64) as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointParam {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub meta: BTreeMap<String, String>,
    pub rng: RngState,
    pub params: BTreeMap<String, CheckpointParam>,
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(ck).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        source: e,
    })
}

/// Compare the analytic gradients sitting in `store` against central
/// finite differences of `loss`, sampling up to `max_coords` coordinates
/// per parameter. Returns the largest relative error seen.
///
/// `loss` must be a deterministic pure evaluation — any internal
/// shuffling or gradient writes would corrupt the comparison.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut loss: F,
    h: f64,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let names: Vec<String> = store.entries.keys().cloned().collect();
    let mut worst = 0.0f64;
    for name in names {
        let size = store.entry(&name).value.len();
        let coords: Vec<usize> = if size <= max_coords {
            (0..size).collect()
        } else {
            (0..max_coords).map(|_| rng.gen_range(0..size)).collect()
        };
        for idx in coords {
            let analytic = store.entry(&name).grad.as_slice().unwrap()[idx];
            let old = store.entry(&name).value.as_slice().unwrap()[idx];
            store.entry_mut(&name).value.as_slice_mut().unwrap()[idx] = old + h;
            let up = loss(store)?;
            store.entry_mut(&name).value.as_slice_mut().unwrap()[idx] = old - h;
            let down = loss(store)?;
            store.entry_mut(&name).value.as_slice_mut().unwrap()[idx] = old;
            let numeric = (up - down) / (2.0 * h);
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
