//! End-to-end experiment orchestration: dataset persistence, arm
//! training, frozen-model evaluation (in-distribution and OOD), and the
//! CSV/manifest outputs.
//!
//! Evaluation never takes a mutable model: a [`TrainedBundle`] is read
//! behind `&self` everywhere, and its parameter checksum before and after
//! an evaluation proves no training happened on the side.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjacency::{build_adjacency, AdjacencyA};
use crate::baselines::{
    gcn_propagation, physical_adjacency01, predict_gcn, predict_mlp, train_gcn, train_mlp,
    BaselineConfig, GcnModel, MlpModel,
};
use crate::error::{Error, Result};
use crate::fault::{
    apply_normalization, calibrate_high, generate_dataset, normalize_dataset, NormStats, Sample,
    ScenarioGrid, SwitchScenario,
};
use crate::feeder::{load_feeder, DistanceWeight, FeederGraph};
use crate::metrics::{compute_metrics, stratified_split, MetricsReport};
use crate::stage1::{self, predict_stage1, StageIDims, ThetaI, TrainConfigI};
use crate::stage2::{
    build_b, flatten_samples, gcl_forward, mask_embedding, predict_stage2, ThetaII, TrainConfigII,
};
use crate::tensor::{Checkpoint, Mat, ParamStore};

// ---------------------------------------------------------------------------
// Dataset persistence

pub const DATA_FORMAT: &str = "ppgn-data-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    /// Feeder definition path as given at generation time, so downstream
    /// commands can reload the graph without re-stating it.
    pub feeder: String,
    /// SHA-256 of the feeder definition file the samples were built from.
    pub feeder_sha256: String,
    pub n: usize,
    pub class_count: usize,
    pub seed: u64,
    pub grid: ScenarioGrid,
    /// Present once the stored samples are normalized.
    pub norm: Option<NormStats>,
    pub count: usize,
}

pub fn feeder_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Write `manifest.json` + `samples.ndjson` (one sample per line) to a
/// directory.
pub fn write_dataset(dir: &Path, samples: &[Sample], manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mpath = dir.join("manifest.json");
    let text =
        serde_json::to_string_pretty(manifest).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(&mpath, text).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let spath = dir.join("samples.ndjson");
    let mut lines = String::new();
    for s in samples {
        lines.push_str(&serde_json::to_string(s).map_err(|e| Error::Validation(e.to_string()))?);
        lines.push('\n');
    }
    fs::write(&spath, lines).map_err(|e| Error::io(spath.display().to_string(), e))
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<Sample>, DatasetManifest)> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.display().to_string(),
        source: e,
    })?;
    if manifest.format != DATA_FORMAT {
        return Err(Error::Validation(format!(
            "dataset format {:?} is not {DATA_FORMAT:?}",
            manifest.format
        )));
    }
    let spath = dir.join("samples.ndjson");
    let text = fs::read_to_string(&spath).map_err(|e| Error::io(spath.display().to_string(), e))?;
    let mut samples = Vec::with_capacity(manifest.count);
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: spath.display().to_string(),
            source: e,
        })?);
    }
    if samples.len() != manifest.count {
        return Err(Error::Validation(format!(
            "manifest promises {} samples, file holds {}",
            manifest.count,
            samples.len()
        )));
    }
    Ok((samples, manifest))
}

// ---------------------------------------------------------------------------
// Prepared data

/// Normalized samples plus the per-sample views training consumes.
pub struct PreparedData {
    pub samples: Vec<Sample>,
    pub norm: NormStats,
    /// n×6 feature matrices, one per sample.
    pub xs: Vec<Mat>,
    /// 0-based faulted-node targets.
    pub node_targets: Vec<usize>,
    /// 1-based class labels.
    pub class_labels: Vec<usize>,
}

fn views(samples: &[Sample]) -> (Vec<Mat>, Vec<usize>, Vec<usize>) {
    let xs: Vec<Mat> = samples.iter().map(stage1::sample_matrix).collect();
    let node_targets = stage1::node_targets(samples);
    let class_labels = samples.iter().map(|s| s.label).collect();
    (xs, node_targets, class_labels)
}

/// Normalize a freshly generated dataset and derive training views.
pub fn prepare(g: &FeederGraph, mut samples: Vec<Sample>) -> Result<PreparedData> {
    let norm = normalize_dataset(&mut samples, g)?;
    let (xs, node_targets, class_labels) = views(&samples);
    Ok(PreparedData {
        samples,
        norm,
        xs,
        node_targets,
        class_labels,
    })
}

/// Normalize with frozen statistics (OOD evaluation path).
pub fn prepare_with(g: &FeederGraph, mut samples: Vec<Sample>, norm: &NormStats) -> PreparedData {
    apply_normalization(&mut samples, g, norm);
    let (xs, node_targets, class_labels) = views(&samples);
    PreparedData {
        samples,
        norm: norm.clone(),
        xs,
        node_targets,
        class_labels,
    }
}

// ---------------------------------------------------------------------------
// Arms

/// One experiment arm: which model answers for the fault location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Per-sample embedding network only.
    Stage1,
    /// Embedding network, joint training schedule (ablation of the
    /// alternating schedule).
    Stage1Joint,
    /// Full pipeline: embeddings → masked similarity graph → propagation.
    Stage12,
    /// Propagation network over a similarity graph built from raw
    /// features (no Stage I).
    Stage2,
    Mlp,
    Gcn,
}

impl Arm {
    pub fn parse(s: &str) -> Result<Arm> {
        match s {
            "stage1" => Ok(Arm::Stage1),
            "stage1_joint" => Ok(Arm::Stage1Joint),
            "stage12" | "stage1+2" => Ok(Arm::Stage12),
            "stage2" => Ok(Arm::Stage2),
            "mlp" => Ok(Arm::Mlp),
            "gcn" => Ok(Arm::Gcn),
            other => Err(Error::Config(format!(
                "unknown arm {other:?}; expected stage1, stage1_joint, stage12, stage2, mlp, gcn"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Stage1 => "stage1",
            Arm::Stage1Joint => "stage1_joint",
            Arm::Stage12 => "stage12",
            Arm::Stage2 => "stage2",
            Arm::Mlp => "mlp",
            Arm::Gcn => "gcn",
        }
    }

    /// OOD arms make sense for the trained pipeline, not the baselines.
    pub fn supports_ood(self) -> bool {
        !matches!(self, Arm::Mlp | Arm::Gcn)
    }
}

/// Hyperparameters shared by every arm of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmConfig {
    pub k_i: usize,
    pub k_ii: usize,
    pub stage1: TrainConfigI,
    pub stage2: TrainConfigII,
    pub baseline: BaselineConfig,
}

impl Default for ArmConfig {
    fn default() -> ArmConfig {
        ArmConfig {
            k_i: 3,
            k_ii: 120,
            stage1: TrainConfigI::default(),
            stage2: TrainConfigII::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

/// A trained arm, frozen. Everything evaluation needs is read-only.
pub struct TrainedBundle {
    pub arm: Arm,
    pub k_ii: usize,
    pub norm: NormStats,
    pub theta1: Option<ThetaI>,
    pub theta2: Option<ThetaII>,
    pub mlp: Option<MlpModel>,
    pub gcn: Option<GcnModel>,
}

impl TrainedBundle {
    /// Checksum over every parameter of every model in the bundle.
    pub fn checksum(&self) -> String {
        let mut parts = Vec::new();
        if let Some(t) = &self.theta1 {
            parts.push(t.store.checksum());
        }
        if let Some(t) = &self.theta2 {
            parts.push(t.store.checksum());
        }
        if let Some(m) = &self.mlp {
            parts.push(m.store.checksum());
        }
        if let Some(m) = &self.gcn {
            parts.push(m.store.checksum());
        }
        parts.join("|")
    }
}

// ---------------------------------------------------------------------------
// Bundle persistence

pub const BUNDLE_FORMAT: &str = "ppgn-bundle-v1";

/// Training provenance stored alongside a bundle checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleMeta {
    pub k_i: usize,
    pub seed: u64,
    pub beta: f64,
    pub feeder_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Stage1File {
    n: usize,
    widths: Vec<usize>,
    ck: Checkpoint,
}

#[derive(Serialize, Deserialize)]
struct Stage2File {
    n: usize,
    ck: Checkpoint,
}

#[derive(Serialize, Deserialize)]
struct BundleFile {
    format: String,
    arm: Arm,
    k_ii: usize,
    meta: BundleMeta,
    norm: NormStats,
    stage1: Option<Stage1File>,
    stage2: Option<Stage2File>,
}

/// Save a stage-arm bundle as a single JSON checkpoint. Baseline arms
/// carry no checkpoint format and are rejected.
pub fn save_bundle(path: &Path, bundle: &TrainedBundle, meta: &BundleMeta) -> Result<()> {
    if bundle.mlp.is_some() || bundle.gcn.is_some() {
        return Err(Error::Config(
            "baseline arms have no checkpoint format".into(),
        ));
    }
    let rng0 = ChaCha8Rng::seed_from_u64(0);
    let file = BundleFile {
        format: BUNDLE_FORMAT.into(),
        arm: bundle.arm,
        k_ii: bundle.k_ii,
        meta: meta.clone(),
        norm: bundle.norm.clone(),
        stage1: bundle.theta1.as_ref().map(|t| Stage1File {
            n: t.dims.n,
            widths: t.dims.widths.clone(),
            ck: t.store.to_checkpoint(&rng0, Default::default()),
        }),
        stage2: bundle.theta2.as_ref().map(|t| Stage2File {
            n: t.n,
            ck: t.store.to_checkpoint(&rng0, Default::default()),
        }),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_bundle(path: &Path) -> Result<(TrainedBundle, BundleMeta)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: BundleFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        source: e,
    })?;
    if file.format != BUNDLE_FORMAT {
        return Err(Error::Validation(format!(
            "bundle format {:?} is not {BUNDLE_FORMAT:?}",
            file.format
        )));
    }
    let restore = |ck: &Checkpoint| ParamStore::from_checkpoint(ck).map(|(store, _)| store);
    let bundle = TrainedBundle {
        arm: file.arm,
        k_ii: file.k_ii,
        norm: file.norm,
        theta1: match &file.stage1 {
            Some(s) => Some(ThetaI {
                dims: StageIDims {
                    n: s.n,
                    widths: s.widths.clone(),
                },
                store: restore(&s.ck)?,
            }),
            None => None,
        },
        theta2: match &file.stage2 {
            Some(s) => Some(ThetaII {
                n: s.n,
                store: restore(&s.ck)?,
            }),
            None => None,
        },
        mlp: None,
        gcn: None,
    };
    Ok((bundle, file.meta))
}

fn derive_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

/// Stage I distributions for every sample, masked to argmax neighborhoods.
fn masked_rows(
    xs: &[Mat],
    adj: &AdjacencyA,
    theta: &ThetaI,
    g: &FeederGraph,
) -> Result<Vec<Vec<f64>>> {
    let preds = predict_stage1(xs, adj, theta)?;
    Ok(preds
        .iter()
        .map(|p| mask_embedding(&p.z, g).z_hat)
        .collect())
}

/// Train one arm on the labeled subset.
pub fn train_bundle(
    arm: Arm,
    g: &FeederGraph,
    adj: &AdjacencyA,
    data: &PreparedData,
    labeled: &[usize],
    cfg: &ArmConfig,
    seed: u64,
) -> Result<TrainedBundle> {
    let mut bundle = TrainedBundle {
        arm,
        k_ii: cfg.k_ii,
        norm: data.norm.clone(),
        theta1: None,
        theta2: None,
        mlp: None,
        gcn: None,
    };
    let n = g.n();
    match arm {
        Arm::Stage1 | Arm::Stage1Joint | Arm::Stage12 => {
            let dims = stage1::StageIDims::new(n, 3, 32);
            let mut theta = ThetaI::init(dims, &mut derive_rng(seed, 0x5747_4531));
            let mut c1 = cfg.stage1.clone();
            c1.seed = seed;
            if arm == Arm::Stage1Joint {
                stage1::train_stage1_joint(
                    &data.xs,
                    &data.node_targets,
                    labeled,
                    adj,
                    &mut theta,
                    &c1,
                )?;
            } else {
                stage1::train_stage1(&data.xs, &data.node_targets, labeled, adj, &mut theta, &c1)?;
            }
            if arm == Arm::Stage12 {
                let rows = masked_rows(&data.xs, adj, &theta, g)?;
                let b = build_b(&rows, cfg.k_ii)?;
                let c0 = flatten_samples(&data.xs)?;
                let mut theta2 = ThetaII::init(n, &mut derive_rng(seed, 0x5747_4532));
                crate::stage2::train_stage2(
                    &c0,
                    &b,
                    &data.node_targets,
                    labeled,
                    &mut theta2,
                    &cfg.stage2,
                )?;
                bundle.theta2 = Some(theta2);
            }
            bundle.theta1 = Some(theta);
        }
        Arm::Stage2 => {
            let rows: Vec<Vec<f64>> = flatten_samples(&data.xs)?
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect();
            let b = build_b(&rows, cfg.k_ii)?;
            let c0 = flatten_samples(&data.xs)?;
            let mut theta2 = ThetaII::init(n, &mut derive_rng(seed, 0x5747_4532));
            crate::stage2::train_stage2(
                &c0,
                &b,
                &data.node_targets,
                labeled,
                &mut theta2,
                &cfg.stage2,
            )?;
            bundle.theta2 = Some(theta2);
        }
        Arm::Mlp => {
            let mut model = MlpModel::init(n, &mut derive_rng(seed, 0x5747_4533));
            let mut c = cfg.baseline.clone();
            c.seed = seed;
            train_mlp(&mut model, &data.xs, &data.node_targets, labeled, &c)?;
            bundle.mlp = Some(model);
        }
        Arm::Gcn => {
            let s_phys = gcn_propagation(&physical_adjacency01(g))?;
            let mut model = GcnModel::init(s_phys, &mut derive_rng(seed, 0x5747_4534));
            let mut c = cfg.baseline.clone();
            c.seed = seed;
            train_gcn(&mut model, &data.xs, &data.node_targets, labeled, &c)?;
            bundle.gcn = Some(model);
        }
    }
    Ok(bundle)
}

fn nodes_to_classes(g: &FeederGraph, nodes: &[usize]) -> Vec<usize> {
    nodes.iter().map(|&i| g.class_of_node(i) + 1).collect()
}

/// Node predictions (0-based) for every sample in `data`, using only
/// frozen parameters.
pub fn predict_bundle(
    bundle: &TrainedBundle,
    g: &FeederGraph,
    adj: &AdjacencyA,
    data: &PreparedData,
) -> Result<Vec<usize>> {
    match bundle.arm {
        Arm::Stage1 | Arm::Stage1Joint => {
            let theta = bundle.theta1.as_ref().expect("stage1 arm carries ThetaI");
            Ok(predict_stage1(&data.xs, adj, theta)?
                .into_iter()
                .map(|p| p.node)
                .collect())
        }
        Arm::Stage12 => {
            let theta = bundle.theta1.as_ref().expect("stage12 arm carries ThetaI");
            let theta2 = bundle.theta2.as_ref().expect("stage12 arm carries ThetaII");
            let rows = masked_rows(&data.xs, adj, theta, g)?;
            let b = build_b(&rows, bundle.k_ii)?;
            let c0 = flatten_samples(&data.xs)?;
            let z = gcl_forward(&c0, &b, theta2)?;
            Ok(predict_stage2(&z))
        }
        Arm::Stage2 => {
            let theta2 = bundle.theta2.as_ref().expect("stage2 arm carries ThetaII");
            let rows: Vec<Vec<f64>> = flatten_samples(&data.xs)?
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect();
            let b = build_b(&rows, bundle.k_ii)?;
            let c0 = flatten_samples(&data.xs)?;
            let z = gcl_forward(&c0, &b, theta2)?;
            Ok(predict_stage2(&z))
        }
        Arm::Mlp => predict_mlp(bundle.mlp.as_ref().expect("mlp arm carries model"), &data.xs),
        Arm::Gcn => predict_gcn(bundle.gcn.as_ref().expect("gcn arm carries model"), &data.xs),
    }
}

/// Score a frozen bundle on the evaluation rows of `data`.
pub fn eval_bundle(
    bundle: &TrainedBundle,
    g: &FeederGraph,
    adj: &AdjacencyA,
    data: &PreparedData,
    eval_idx: &[usize],
) -> Result<MetricsReport> {
    if eval_idx.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let nodes = predict_bundle(bundle, g, adj, data)?;
    let classes = nodes_to_classes(g, &nodes);
    let truth: Vec<usize> = eval_idx.iter().map(|&i| data.class_labels[i]).collect();
    let pred: Vec<usize> = eval_idx.iter().map(|&i| classes[i]).collect();
    compute_metrics(&truth, &pred, g)
}

// ---------------------------------------------------------------------------
// OOD scenarios

/// One evaluation-time distribution shift.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OodScenario {
    /// Shift the mean absolute load deviation up by `increment` (the
    /// training grid sits at MAD 0.53).
    Load { increment: f64 },
    /// Evaluate under altered switch states.
    Switch { scenario: SwitchScenario },
}

impl OodScenario {
    pub fn name(&self) -> String {
        match self {
            OodScenario::Load { increment } => format!("load:+{increment:.2}"),
            OodScenario::Switch { scenario } => format!("switch:{}", scenario.id),
        }
    }
}

/// Mean absolute deviation of the training load distribution.
pub const BASE_LOAD_MAD: f64 = 0.53;

fn fnv1a64(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Build the generation grid for an OOD arm from the training grid.
pub fn ood_grid(base: &ScenarioGrid, scenario: &OodScenario, draws: usize) -> Result<ScenarioGrid> {
    let mut grid = base.clone();
    grid.impedance_draws = draws;
    grid.min_per_class = 0;
    match scenario {
        OodScenario::Load { increment } => {
            if *increment <= 0.0 {
                return Err(Error::Config(format!(
                    "load MAD increment {increment} must be positive"
                )));
            }
            grid.load_high = calibrate_high(grid.load_low, BASE_LOAD_MAD + increment)?;
        }
        OodScenario::Switch { scenario } => {
            grid.switch_scenarios = vec![scenario.clone()];
        }
    }
    Ok(grid)
}

/// Deterministic seed for an OOD dataset, derived from the training seed
/// and the scenario name.
pub fn ood_seed(gen_seed: u64, scenario_name: &str) -> u64 {
    gen_seed ^ fnv1a64(scenario_name)
}

// ---------------------------------------------------------------------------
// Experiment config and results

pub const EXP_FORMAT: &str = "ppgn-exp-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub format: String,
    /// Feeder definition file.
    pub feeder: String,
    /// Load a stored dataset instead of generating (directory path).
    #[serde(default)]
    pub dataset: Option<String>,
    /// Generation grid when no dataset is given.
    #[serde(default)]
    pub grid: Option<ScenarioGrid>,
    #[serde(default)]
    pub gen_seed: u64,
    pub beta: f64,
    pub seeds: Vec<u64>,
    /// Arm names; see [`Arm::parse`].
    pub arms: Vec<String>,
    #[serde(default)]
    pub ood: Vec<OodScenario>,
    /// Impedance draws per (kind, node) for OOD datasets; defaults to a
    /// quarter of the training draws.
    #[serde(default)]
    pub ood_draws: Option<usize>,
    pub out_dir: String,
    #[serde(default)]
    pub params: ArmConfig,
}

pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        source: e,
    })?;
    validate_config(&cfg)?;
    Ok(cfg)
}

pub fn validate_config(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.format != EXP_FORMAT {
        return Err(Error::Config(format!(
            "experiment format {:?} is not {EXP_FORMAT:?}",
            cfg.format
        )));
    }
    if !(cfg.beta > 0.0 && cfg.beta <= 1.0) {
        return Err(Error::Config(format!(
            "label rate β = {} outside (0, 1]",
            cfg.beta
        )));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Config("at least one seed required".into()));
    }
    if cfg.arms.is_empty() {
        return Err(Error::Config("at least one arm required".into()));
    }
    for arm in &cfg.arms {
        Arm::parse(arm)?;
    }
    if cfg.dataset.is_none() && cfg.grid.is_none() {
        return Err(Error::Config(
            "either a dataset path or a generation grid is required".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub seed: u64,
    pub beta: f64,
    pub stage: String,
    pub f1: f64,
    pub lar: f64,
    pub lar1hop: f64,
    pub runtime_s: f64,
}

pub const RESULTS_HEADER: &str = "scenario,seed,beta,stage,f1,lar,lar1hop,runtime_s";

/// Render rows as CSV. Metric columns are deterministic under a fixed
/// config+seed; `runtime_s` is wall clock and should be masked before
/// byte-for-byte comparisons (see [`results_csv_canonical`]).
pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.3}\n",
            r.scenario, r.seed, r.beta, r.stage, r.f1, r.lar, r.lar1hop, r.runtime_s
        ));
    }
    out
}

/// CSV with the wall-clock column zeroed, for reproducibility checks.
pub fn results_csv_canonical(rows: &[ResultRow]) -> String {
    let canon: Vec<ResultRow> = rows
        .iter()
        .map(|r| ResultRow {
            runtime_s: 0.0,
            ..r.clone()
        })
        .collect();
    results_csv(&canon)
}

#[derive(Debug, Serialize)]
struct ExperimentManifest<'a> {
    format: &'a str,
    crate_version: &'a str,
    feeder_sha256: String,
    config: &'a ExperimentConfig,
    rows: usize,
}

/// Everything a finished (or partially finished) experiment produced.
pub struct ExperimentResults {
    pub rows: Vec<ResultRow>,
    pub out_dir: std::path::PathBuf,
}

fn write_outputs(cfg: &ExperimentConfig, rows: &[ResultRow]) -> Result<()> {
    let dir = Path::new(&cfg.out_dir);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let csv_path = dir.join("results.csv");
    fs::write(&csv_path, results_csv(rows))
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let manifest = ExperimentManifest {
        format: EXP_FORMAT,
        crate_version: env!("CARGO_PKG_VERSION"),
        feeder_sha256: feeder_sha256(Path::new(&cfg.feeder))?,
        config: cfg,
        rows: rows.len(),
    };
    let mpath = dir.join("manifest.json");
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(&mpath, text).map_err(|e| Error::io(mpath.display().to_string(), e))
}

/// Run every (arm × seed) cell plus the OOD arms, writing `results.csv`
/// and `manifest.json` under the config's output directory. Partial rows
/// are flushed to disk even when a later cell fails.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    validate_config(cfg)?;
    let mut rows = Vec::new();
    let outcome = run_cells(cfg, &mut rows);
    write_outputs(cfg, &rows)?;
    outcome.map(|()| ExperimentResults {
        rows,
        out_dir: Path::new(&cfg.out_dir).to_path_buf(),
    })
}

fn run_cells(cfg: &ExperimentConfig, rows: &mut Vec<ResultRow>) -> Result<()> {
    let g = load_feeder(Path::new(&cfg.feeder))?;
    let (samples, grid) = match (&cfg.dataset, &cfg.grid) {
        (Some(dir), _) => {
            let (samples, manifest) = read_dataset(Path::new(dir))?;
            if manifest.norm.is_some() {
                return Err(Error::Validation(
                    "stored dataset is already normalized; experiments expect raw samples".into(),
                ));
            }
            if manifest.feeder_sha256 != feeder_sha256(Path::new(&cfg.feeder))? {
                return Err(Error::Validation(
                    "dataset was generated from a different feeder definition".into(),
                ));
            }
            (samples, manifest.grid)
        }
        (None, Some(grid)) => (generate_dataset(&g, grid, cfg.gen_seed)?, grid.clone()),
        (None, None) => unreachable!("validate_config requires a data source"),
    };
    let data = prepare(&g, samples)?;
    let d = g.shortest_paths(DistanceWeight::Hop);
    let adj = build_adjacency(&d, cfg.params.k_i)?;

    // OOD datasets are shared across seeds and arms: generate once.
    let ood_draws = cfg
        .ood_draws
        .unwrap_or_else(|| (grid.impedance_draws / 4).max(1));
    let mut ood_sets = Vec::with_capacity(cfg.ood.len());
    for scenario in &cfg.ood {
        let name = scenario.name();
        let ood = ood_grid(&grid, scenario, ood_draws)?;
        let samples = generate_dataset(&g, &ood, ood_seed(cfg.gen_seed, &name))?;
        let prepared = prepare_with(&g, samples, &data.norm);
        ood_sets.push((name, prepared));
    }

    for &seed in &cfg.seeds {
        let (labeled, unlabeled) =
            stratified_split(&data.class_labels, g.class_count(), cfg.beta, seed)?;
        // β = 1 leaves nothing held out; fall back to training rows so
        // the pipeline-identity contract still has something to score.
        let eval_idx = if unlabeled.is_empty() {
            labeled.clone()
        } else {
            unlabeled.clone()
        };
        for arm_name in &cfg.arms {
            let arm = Arm::parse(arm_name)?;
            let start = Instant::now();
            let bundle = train_bundle(arm, &g, &adj, &data, &labeled, &cfg.params, seed)?;
            let report = eval_bundle(&bundle, &g, &adj, &data, &eval_idx)?;
            rows.push(ResultRow {
                scenario: "base".into(),
                seed,
                beta: cfg.beta,
                stage: arm.name().into(),
                f1: report.f1,
                lar: report.lar,
                lar1hop: report.lar_1hop,
                runtime_s: start.elapsed().as_secs_f64(),
            });
            if !arm.supports_ood() {
                continue;
            }
            let frozen = bundle.checksum();
            for (name, prepared) in &ood_sets {
                let start = Instant::now();
                let all: Vec<usize> = (0..prepared.samples.len()).collect();
                let report = eval_bundle(&bundle, &g, &adj, prepared, &all)?;
                rows.push(ResultRow {
                    scenario: name.clone(),
                    seed,
                    beta: cfg.beta,
                    stage: arm.name().into(),
                    f1: report.f1,
                    lar: report.lar,
                    lar1hop: report.lar_1hop,
                    runtime_s: start.elapsed().as_secs_f64(),
                });
            }
            if bundle.checksum() != frozen {
                return Err(Error::Validation(format!(
                    "parameters of arm {} changed during OOD evaluation",
                    arm.name()
                )));
            }
        }
    }
    Ok(())
}
