//! Command-line surface over the fault-location pipeline: dataset
//! generation, arm training, frozen-checkpoint evaluation, config-driven
//! sweeps, and influence coverage reports.
//!
//! Exit codes: 0 on success, 2 for configuration problems (bad flags,
//! malformed files, mismatched hashes), 3 for numeric failures inside the
//! simulator or the training loops.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use ppgn_core::adjacency::build_adjacency;
use ppgn_core::error::{Error, Result};
use ppgn_core::experiment::{
    eval_bundle, feeder_sha256, load_bundle, load_experiment_config, ood_grid, ood_seed, prepare,
    prepare_with, read_dataset, results_csv, run_experiment, save_bundle, train_bundle, Arm,
    ArmConfig, BundleMeta, DatasetManifest, ResultRow, DATA_FORMAT,
};
use ppgn_core::fault::{generate_dataset, Sample, ScenarioGrid, SwitchScenario};
use ppgn_core::feeder::{load_feeder, DistanceWeight, FeederGraph, SwitchState};
use ppgn_core::influence::influence_report_csv;
use ppgn_core::metrics::stratified_split;
use ppgn_core::experiment::OodScenario;

#[derive(Parser)]
#[command(name = "ppgn", version, about = "Two-stage graph-network fault location")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled fault dataset from a feeder definition.
    Gen {
        /// Feeder definition JSON.
        #[arg(long)]
        feeder: PathBuf,
        /// Output dataset directory (manifest.json + samples.ndjson).
        #[arg(long)]
        out: PathBuf,
        /// Scenario grid JSON controlling fault kinds, impedance draws,
        /// load range, and switch scenarios.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one arm on a stored dataset and write a checkpoint.
    Train {
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Which stage(s) to train.
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Label rate β in (0, 1]: the stratified share of samples whose
        /// labels training may see.
        #[arg(long)]
        labels: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a frozen checkpoint on a dataset or a derived OOD scenario.
    Eval {
        /// Dataset directory the scenario derives from.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// `base` scores the stored samples; `load:DP` regenerates them
        /// with mean load lifted by DP; `switch:IDX` toggles switch IDX
        /// away from its normal state.
        #[arg(long, default_value = "base")]
        scenario: String,
        /// Result CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a config-driven experiment sweep (label rates, arms, OOD).
    Sweep {
        /// Experiment config JSON (schema `ppgn-exp-v1`).
        #[arg(long)]
        config: PathBuf,
    },
    /// Report each node's total influence on the observed nodes under
    /// K-step aggregation.
    Influence {
        #[arg(long)]
        feeder: PathBuf,
        /// Neighbors per node in the constructed adjacency.
        #[arg(long = "kI")]
        k_i: usize,
        /// Aggregation depth (walk length).
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    /// Node-embedding network only.
    #[value(name = "1")]
    One,
    /// Sample-propagation stage over raw features.
    #[value(name = "2")]
    Two,
    /// Full two-stage pipeline.
    Both,
}

impl StageArg {
    fn arm(self) -> Arm {
        match self {
            StageArg::One => Arm::Stage1,
            StageArg::Two => Arm::Stage2,
            StageArg::Both => Arm::Stage12,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. }
        | Error::Validation(_)
        | Error::UnknownSwitch(_)
        | Error::Config(_)
        | Error::Io { .. } => 2,
        Error::Simulation(_)
        | Error::ShapeMismatch { .. }
        | Error::NonFinite(_)
        | Error::TooFewNeighbors(..)
        | Error::IsolatedNode(_)
        | Error::EmptyBatch
        | Error::Diverged(_)
        | Error::Infeasible(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            feeder,
            out,
            grid,
            seed,
        } => cmd_gen(&feeder, &out, &grid, seed),
        Command::Train {
            data,
            stage,
            labels,
            seed,
            out,
        } => cmd_train(&data, stage, labels, seed, &out),
        Command::Eval {
            data,
            ckpt,
            scenario,
            out,
        } => cmd_eval(&data, &ckpt, &scenario, &out),
        Command::Sweep { config } => cmd_sweep(&config),
        Command::Influence {
            feeder,
            k_i,
            layers,
            out,
        } => cmd_influence(&feeder, k_i, layers, &out),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn cmd_gen(feeder: &Path, out: &Path, grid_path: &Path, seed: u64) -> Result<()> {
    let text = fs::read_to_string(grid_path).map_err(|e| Error::Io {
        path: grid_path.display().to_string(),
        source: e,
    })?;
    let grid: ScenarioGrid = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: grid_path.display().to_string(),
        source: e,
    })?;
    let g = load_feeder(feeder)?;
    let samples = generate_dataset(&g, &grid, seed)?;
    let manifest = DatasetManifest {
        format: DATA_FORMAT.into(),
        feeder: feeder.display().to_string(),
        feeder_sha256: feeder_sha256(feeder)?,
        n: g.n(),
        class_count: g.class_count(),
        seed,
        grid,
        norm: None,
        count: samples.len(),
    };
    ppgn_core::experiment::write_dataset(out, &samples, &manifest)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

/// Load a dataset and the feeder it was generated from, verifying the
/// recorded hash so a stale or edited feeder file cannot slip through.
fn open_dataset(dir: &Path) -> Result<(Vec<Sample>, DatasetManifest, FeederGraph)> {
    let (samples, manifest) = read_dataset(dir)?;
    let recorded = PathBuf::from(&manifest.feeder);
    let fpath = if recorded.exists() {
        recorded
    } else {
        // Relocated tree: try the feeder file next to the dataset.
        let local = dir.join(recorded.file_name().unwrap_or_default());
        if !local.exists() {
            return Err(Error::Config(format!(
                "feeder {} recorded in the dataset manifest was not found",
                manifest.feeder
            )));
        }
        local
    };
    if feeder_sha256(&fpath)? != manifest.feeder_sha256 {
        return Err(Error::Validation(format!(
            "feeder {} no longer matches the dataset manifest hash",
            fpath.display()
        )));
    }
    let g = load_feeder(&fpath)?;
    Ok((samples, manifest, g))
}

fn cmd_train(data: &Path, stage: StageArg, labels: f64, seed: u64, out: &Path) -> Result<()> {
    if !(labels > 0.0 && labels <= 1.0) {
        return Err(Error::Config(format!("--labels {labels} outside (0, 1]")));
    }
    let (samples, manifest, g) = open_dataset(data)?;
    if manifest.norm.is_some() {
        return Err(Error::Validation(
            "stored dataset is already normalized; training expects raw samples".into(),
        ));
    }
    let prepared = prepare(&g, samples)?;
    let params = ArmConfig::default();
    let d = g.shortest_paths(DistanceWeight::Hop);
    let adj = build_adjacency(&d, params.k_i)?;
    let (labeled, _) = stratified_split(&prepared.class_labels, g.class_count(), labels, seed)?;
    let arm = stage.arm();
    let start = Instant::now();
    let bundle = train_bundle(arm, &g, &adj, &prepared, &labeled, &params, seed)?;
    let meta = BundleMeta {
        k_i: params.k_i,
        seed,
        beta: labels,
        feeder_sha256: manifest.feeder_sha256.clone(),
    };
    save_bundle(out, &bundle, &meta)?;
    println!(
        "trained {} on {} labeled samples in {:.1}s; checkpoint {}",
        arm.name(),
        labeled.len(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn parse_scenario(s: &str, g: &FeederGraph) -> Result<Option<OodScenario>> {
    if s == "base" {
        return Ok(None);
    }
    if let Some(dp) = s.strip_prefix("load:") {
        let increment: f64 = dp
            .parse()
            .map_err(|_| Error::Config(format!("bad load increment {dp:?}")))?;
        return Ok(Some(OodScenario::Load { increment }));
    }
    if let Some(idx) = s.strip_prefix("switch:") {
        let idx: usize = idx
            .parse()
            .map_err(|_| Error::Config(format!("switch scenario wants an index, got {idx:?}")))?;
        let sw = g
            .switches()
            .get(idx)
            .copied()
            .ok_or(Error::UnknownSwitch(idx))?;
        let toggled = match sw.normal {
            SwitchState::Open => SwitchState::Closed,
            SwitchState::Closed => SwitchState::Open,
        };
        return Ok(Some(OodScenario::Switch {
            scenario: SwitchScenario {
                id: format!("toggle{idx}"),
                states: vec![(idx, toggled)],
            },
        }));
    }
    Err(Error::Config(format!(
        "unknown scenario {s:?}; expected base, load:DP, or switch:IDX"
    )))
}

fn cmd_eval(data: &Path, ckpt: &Path, scenario: &str, out: &Path) -> Result<()> {
    let (samples, manifest, g) = open_dataset(data)?;
    let (bundle, meta) = load_bundle(ckpt)?;
    if meta.feeder_sha256 != manifest.feeder_sha256 {
        return Err(Error::Validation(
            "checkpoint and dataset come from different feeder definitions".into(),
        ));
    }
    let d = g.shortest_paths(DistanceWeight::Hop);
    let adj = build_adjacency(&d, meta.k_i)?;
    let start = Instant::now();
    let (name, prepared) = match parse_scenario(scenario, &g)? {
        None => {
            if manifest.norm.is_some() {
                return Err(Error::Validation(
                    "stored dataset is already normalized; evaluation applies the checkpoint's statistics itself".into(),
                ));
            }
            ("base".to_string(), prepare_with(&g, samples, &bundle.norm))
        }
        Some(sc) => {
            let sc_name = sc.name();
            let draws = (manifest.grid.impedance_draws / 4).max(1);
            let grid = ood_grid(&manifest.grid, &sc, draws)?;
            let ood = generate_dataset(&g, &grid, ood_seed(manifest.seed, &sc_name))?;
            (sc_name, prepare_with(&g, ood, &bundle.norm))
        }
    };
    let all: Vec<usize> = (0..prepared.samples.len()).collect();
    let frozen = bundle.checksum();
    let report = eval_bundle(&bundle, &g, &adj, &prepared, &all)?;
    if bundle.checksum() != frozen {
        return Err(Error::Validation(
            "parameters changed during evaluation".into(),
        ));
    }
    let row = ResultRow {
        scenario: name.clone(),
        seed: meta.seed,
        beta: meta.beta,
        stage: bundle.arm.name().into(),
        f1: report.f1,
        lar: report.lar,
        lar1hop: report.lar_1hop,
        runtime_s: start.elapsed().as_secs_f64(),
    };
    write_text(out, &results_csv(&[row]))?;
    println!(
        "{}: {} samples, F1 {:.4}, LAR {:.4}, LAR1hop {:.4}; results {}",
        name,
        report.n_test,
        report.f1,
        report.lar,
        report.lar_1hop,
        out.display()
    );
    Ok(())
}

fn cmd_sweep(config: &Path) -> Result<()> {
    let cfg = load_experiment_config(config)?;
    let res = run_experiment(&cfg)?;
    println!(
        "{} result rows written to {}",
        res.rows.len(),
        res.out_dir.display()
    );
    Ok(())
}

fn cmd_influence(feeder: &Path, k_i: usize, layers: usize, out: &Path) -> Result<()> {
    let g = load_feeder(feeder)?;
    let d = g.shortest_paths(DistanceWeight::Hop);
    let adj = build_adjacency(&d, k_i)?;
    let csv = influence_report_csv(&adj.a_tilde, &g.observed(), layers)?;
    write_text(out, &csv)?;
    let covered = csv.lines().skip(1).filter(|l| l.ends_with(",yes")).count();
    println!(
        "{covered}/{} nodes influence a sensor within {layers} steps; report {}",
        g.n(),
        out.display()
    );
    Ok(())
}
