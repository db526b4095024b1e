//! Scratch driver: run the experiment harness on the 36-node feeder and
//! print per-arm metrics. Usage:
//!
//!     cargo run --example probe -- [draws] [beta] [s1_epochs] [s2_epochs] [k_i] [k_ii] [arms] [t1] [t2] [batch] [lr]

use ppgn_core::experiment::{run_experiment, Arm, ArmConfig, ExperimentConfig, EXP_FORMAT};
use ppgn_core::fault::ScenarioGrid;

fn main() {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let get = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let draws: usize = get(0, "30").parse().unwrap();
    let beta: f64 = get(1, "0.15").parse().unwrap();
    let s1_epochs: usize = get(2, "60").parse().unwrap();
    let s2_epochs: usize = get(3, "100").parse().unwrap();
    let k_i: usize = get(4, "3").parse().unwrap();
    let k_ii: usize = get(5, "120").parse().unwrap();
    let arms: Vec<String> = get(6, "stage1,stage12,stage2,mlp,gcn,stage1_joint")
        .split(',')
        .map(str::to_string)
        .collect();

    let mut params = ArmConfig::default();
    params.k_i = k_i;
    params.k_ii = k_ii;
    params.stage1.epochs = s1_epochs;
    params.stage1.t1 = get(7, "10").parse().unwrap();
    params.stage1.t2 = get(8, "10").parse().unwrap();
    params.stage1.batch = get(9, "32").parse().unwrap();
    params.stage1.lr = get(10, "0.001").parse().unwrap();
    params.stage1.lambda = get(11, "0.005").parse().unwrap();
    let seed0: u64 = get(12, "1").parse().unwrap();
    params.stage2.epochs = s2_epochs;

    let cfg = ExperimentConfig {
        format: EXP_FORMAT.into(),
        feeder: concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/feeder36.json").into(),
        dataset: None,
        grid: Some(ScenarioGrid::new(draws)),
        gen_seed: 7,
        beta,
        seeds: vec![seed0, seed0 + 1, seed0 + 2],
        arms: arms.clone(),
        ood: vec![],
        ood_draws: None,
        out_dir: "/root/notes/probe-out".into(),
        params,
    };
    let start = std::time::Instant::now();
    let res = run_experiment(&cfg).unwrap();
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    println!("scenario,seed,stage,f1,lar,lar1hop,runtime_s");
    for r in &res.rows {
        println!(
            "{},{},{},{:.4},{:.4},{:.4},{:.1}",
            r.scenario, r.seed, r.stage, r.f1, r.lar, r.lar1hop, r.runtime_s
        );
    }
    for arm in &arms {
        let a = Arm::parse(arm).unwrap();
        let sel: Vec<&ppgn_core::ResultRow> = res
            .rows
            .iter()
            .filter(|r| r.stage == a.name() && r.scenario == "base")
            .collect();
        let mean = |f: fn(&ppgn_core::ResultRow) -> f64| {
            sel.iter().map(|r| f(r)).sum::<f64>() / sel.len() as f64
        };
        println!(
            "MEAN {:<13} lar {:.4}  lar1hop {:.4}  f1 {:.4}",
            a.name(),
            mean(|r| r.lar),
            mean(|r| r.lar1hop),
            mean(|r| r.f1)
        );
    }
}
