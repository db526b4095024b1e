//! Acceptance gates for the shipped claims, one test per claim. Each test
//! prints a `P<k> PASS` line with its headline numbers (visible under
//! `--nocapture`) and asserts its runtime budget.
//!
//! The heavyweight 36-node training cells are shared between gates via
//! lazies; tests are numbered so the default alphabetical order charges
//! each gate's budget with the cells it is the first to touch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ppgn_core::adjacency::{build_adjacency, AdjacencyA};
use ppgn_core::experiment::{
    eval_bundle, ood_grid, ood_seed, prepare, prepare_with, train_bundle, Arm, ArmConfig,
    OodScenario, PreparedData, TrainedBundle,
};
use ppgn_core::fault::{
    eq_sparsity_residual, generate_dataset, simulate_fault_full, FaultKind, FaultSpec,
    LoadScenario, SampleMeta, ScenarioGrid, SwitchScenario,
};
use ppgn_core::feeder::{load_feeder, DistanceWeight, FeederGraph, Phase, SwitchState};
use ppgn_core::influence::{
    influence_matrix, linear_aggregate, path_enumeration_oracle, physical_transition,
    total_observed_influence,
};
use ppgn_core::metrics::{compute_metrics, stratified_split, MetricsReport};
use ppgn_core::stage1::{grad_stage1, loss_stage1, StageIDims, ThetaI};
use ppgn_core::stage2::{build_b, gcl_forward, grad_stage2, mask_embedding, ThetaII};
use ppgn_core::tensor::{self, Mat};

fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn fixture(name: &str) -> FeederGraph {
    load_feeder(fixture_path(name)).unwrap()
}

fn report(tag: &str, elapsed: Duration, budget_s: f64, detail: &str) {
    let secs = elapsed.as_secs_f64();
    println!("{tag} PASS ({secs:.1}s < {budget_s:.0}s): {detail}");
    assert!(
        secs < budget_s,
        "{tag} exceeded its runtime budget: {secs:.1}s ≥ {budget_s:.0}s"
    );
}

// ---------------------------------------------------------------------------
// Shared 36-node cells

const SEEDS: [u64; 3] = [4, 5, 6];
const GEN_SEED: u64 = 7;

/// Stage hyperparameters for the ablation and baseline gates.
fn base_params() -> ArmConfig {
    let mut p = ArmConfig::default();
    p.stage2.epochs = 300;
    p
}

/// Long, large-batch schedule at which both training schedules converge;
/// used only for the alternating-vs-joint comparison.
fn schedule_params() -> ArmConfig {
    let mut p = base_params();
    p.stage1.epochs = 1200;
    p.stage1.batch = 128;
    p
}

struct F36 {
    g: FeederGraph,
    adj: AdjacencyA,
    data: PreparedData,
    grid: ScenarioGrid,
}

static FEEDER36: LazyLock<F36> = LazyLock::new(|| {
    let g = fixture("feeder36.json");
    let grid = ScenarioGrid::new(30);
    let samples = generate_dataset(&g, &grid, GEN_SEED).unwrap();
    let data = prepare(&g, samples).unwrap();
    let d = g.shortest_paths(DistanceWeight::Hop);
    let adj = build_adjacency(&d, base_params().k_i).unwrap();
    F36 { g, adj, data, grid }
});

struct Cell {
    bundle: TrainedBundle,
    report: MetricsReport,
}

fn run_cell(arm: Arm, beta: f64, seed: u64, params: &ArmConfig) -> Cell {
    let f = &*FEEDER36;
    let (labeled, unlabeled) =
        stratified_split(&f.data.class_labels, f.g.class_count(), beta, seed).unwrap();
    let bundle = train_bundle(arm, &f.g, &f.adj, &f.data, &labeled, params, seed).unwrap();
    let report = eval_bundle(&bundle, &f.g, &f.adj, &f.data, &unlabeled).unwrap();
    Cell { bundle, report }
}

type CellMap = BTreeMap<(&'static str, u64), Cell>;

fn run_cells(arms: &[Arm], beta: f64, params: &ArmConfig) -> CellMap {
    let mut map = BTreeMap::new();
    for &arm in arms {
        for &seed in &SEEDS {
            map.insert((arm.name(), seed), run_cell(arm, beta, seed, params));
        }
    }
    map
}

fn mean(cells: &CellMap, arm: Arm, get: impl Fn(&MetricsReport) -> f64) -> f64 {
    let sum: f64 = SEEDS.iter().map(|&s| get(&cells[&(arm.name(), s)].report)).sum();
    sum / SEEDS.len() as f64
}

/// Stage ablation cells at β = 15%: Stage I alone, the full pipeline, and
/// the propagation stage over raw features.
static ABLATION_CELLS: LazyLock<CellMap> = LazyLock::new(|| {
    run_cells(&[Arm::Stage1, Arm::Stage12, Arm::Stage2], 0.15, &base_params())
});

/// Baseline cells at β = 15% and all comparison arms at β = 25%.
static BASELINE15_CELLS: LazyLock<CellMap> =
    LazyLock::new(|| run_cells(&[Arm::Mlp, Arm::Gcn], 0.15, &base_params()));
static COMPARISON25_CELLS: LazyLock<CellMap> = LazyLock::new(|| {
    run_cells(&[Arm::Stage12, Arm::Mlp, Arm::Gcn], 0.25, &base_params())
});

/// Alternating vs joint schedule cells.
static SCHEDULE_CELLS: LazyLock<CellMap> = LazyLock::new(|| {
    run_cells(&[Arm::Stage1, Arm::Stage1Joint], 0.15, &schedule_params())
});

// ---------------------------------------------------------------------------

#[test]
fn p01_fault_physics_sparsity() {
    let t0 = Instant::now();
    let g = fixture("feeder13.json");
    let grid = ScenarioGrid::new(1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0_f64;
    let mut done = 0;
    while done < 100 {
        let node = rng.gen_range(1..=g.n());
        if node == g.slack() + 1 {
            continue;
        }
        let kind = FaultKind::ALL[rng.gen_range(0..FaultKind::ALL.len())];
        let at: Vec<Phase> = g.phases(node - 1).iter().collect();
        if at.len() < kind.phase_count() {
            continue;
        }
        let phases = if kind.phase_count() == 1 {
            vec![at[rng.gen_range(0..at.len())]]
        } else {
            let a = rng.gen_range(0..at.len());
            let mut b = rng.gen_range(0..at.len());
            while b == a {
                b = rng.gen_range(0..at.len());
            }
            vec![at[a], at[b]]
        };
        let spec = FaultSpec {
            node,
            kind,
            phases,
            zf_ohm: rng.gen_range(0.05..=20.0),
        };
        let loads = LoadScenario::uniform(g.n(), grid.load_low, grid.load_high, &mut rng).unwrap();
        let meta = SampleMeta {
            fault: spec.clone(),
            load_scale: loads.scales.clone(),
            switch_scenario: "base".into(),
            seed: done as u64,
        };
        let out = simulate_fault_full(&g, &loads, &spec, meta).unwrap();
        let (max_off, delta_inf) = eq_sparsity_residual(&g, &out).unwrap();
        assert!(
            max_off < 1e-8 * delta_inf,
            "fault {spec:?}: off-support residual {max_off:.3e} vs ‖Δ‖∞ {delta_inf:.3e}"
        );
        worst = worst.max(max_off / delta_inf);
        done += 1;
    }
    report(
        "P1",
        t0.elapsed(),
        10.0,
        &format!("off-support residual ≤ {worst:.2e}·‖Δ‖∞ over 100 random faults"),
    );
}

#[test]
fn p02_gradient_checks() {
    let t0 = Instant::now();
    let g = fixture("fig3.json");
    let d = g.shortest_paths(DistanceWeight::Hop);
    let adj = build_adjacency(&d, 2).unwrap();
    let n = g.n();
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    let mut worst1 = 0.0_f64;
    for _ in 0..20 {
        let batch = rng.gen_range(4..=12);
        let xs: Vec<Mat> = (0..batch)
            .map(|_| Mat::from_shape_fn((n, 6), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let targets: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
        let idx: Vec<usize> = (0..batch).collect();
        let mut theta = ThetaI::init(StageIDims::new(n, 3, 8), &mut rng);
        grad_stage1(&xs, &targets, &idx, &adj, &mut theta, 5e-3).unwrap();
        let dims = theta.dims.clone();
        let worst = tensor::grad_check(
            &mut theta.store,
            |s| {
                let tmp = ThetaI {
                    dims: dims.clone(),
                    store: s.clone(),
                };
                loss_stage1(&xs, &targets, &idx, &adj, &tmp, 5e-3)
            },
            1e-5,
            4,
            &mut rng,
        )
        .unwrap();
        assert!(worst < 1e-4, "stage I gradient check failed: {worst:.3e}");
        worst1 = worst1.max(worst);
    }

    let mut worst2 = 0.0_f64;
    for restart in 0..20 {
        let n2 = 3;
        let count = 12;
        let embeddings: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..n2).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let b = build_b(&embeddings, 3).unwrap();
        let c0 = Mat::from_shape_fn((count, 6 * n2), |_| rng.gen_range(-1.0..1.0));
        let targets: Vec<usize> = (0..count).map(|_| rng.gen_range(0..n2)).collect();
        let mut labeled: Vec<usize> = (0..count).filter(|_| rng.gen_bool(0.5)).collect();
        if labeled.is_empty() {
            labeled.push(restart % count);
        }
        let mut theta = ThetaII::init(n2, &mut rng);
        grad_stage2(&c0, &b, &targets, &labeled, &mut theta, 5e-5).unwrap();
        let worst = tensor::grad_check(
            &mut theta.store,
            |s| {
                let tmp = ThetaII {
                    n: n2,
                    store: s.clone(),
                };
                let z = gcl_forward(&c0, &b, &tmp)?;
                let mut xent = 0.0;
                for &r in &labeled {
                    xent -= z[(r, targets[r])].max(f64::MIN_POSITIVE).ln();
                }
                Ok(xent / labeled.len() as f64 + 5e-5 * s.l2_sum())
            },
            1e-5,
            4,
            &mut rng,
        )
        .unwrap();
        assert!(worst < 1e-4, "stage II gradient check failed: {worst:.3e}");
        worst2 = worst2.max(worst);
    }

    report(
        "P2",
        t0.elapsed(),
        60.0,
        &format!("worst relative error {worst1:.2e} (stage I), {worst2:.2e} (stage II), 20 restarts each"),
    );
}

#[test]
fn p03_random_walk_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let n = rng.gen_range(3..=8);
        let k = rng.gen_range(1..=5);
        let mut t = Mat::zeros((n, n));
        for i in 0..n {
            // Random sparse support, at least one edge per row.
            let support: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.6)).collect();
            let support = if support.is_empty() {
                vec![rng.gen_range(0..n)]
            } else {
                support
            };
            for &j in &support {
                t[(i, j)] = rng.gen_range(0.1..1.0);
            }
            let row_sum: f64 = t.row(i).sum();
            for j in 0..n {
                t[(i, j)] /= row_sum;
            }
        }
        let m = influence_matrix(&t, k).unwrap();
        for i in 0..n {
            for j in 0..n {
                let oracle = path_enumeration_oracle(&t, i, j, k).unwrap();
                let diff = (m.m[(i, j)] - oracle).abs();
                assert!(
                    diff < 1e-12,
                    "walk probability mismatch at ({i},{j}), n={n}, k={k}: {diff:.3e}"
                );
                worst = worst.max(diff);
            }
        }
    }

    // The K-step linear aggregate's input-output Jacobian is the K-step
    // walk probability, checked by central differences.
    let g = fixture("feeder13.json");
    let d = g.shortest_paths(DistanceWeight::Hop);
    let adj = build_adjacency(&d, 2).unwrap();
    let n = g.n();
    let k = 3;
    let h0 = Mat::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
    let walk = influence_matrix(&adj.a_tilde, k).unwrap();
    let h = 1e-6;
    let mut worst_fd = 0.0_f64;
    for j in 0..n {
        for col in 0..2 {
            let mut plus = h0.clone();
            plus[(j, col)] += h;
            let mut minus = h0.clone();
            minus[(j, col)] -= h;
            let hp = linear_aggregate(&adj.a_tilde, &plus, k).unwrap();
            let hm = linear_aggregate(&adj.a_tilde, &minus, k).unwrap();
            for i in 0..n {
                for c in 0..2 {
                    let fd = (hp[(i, c)] - hm[(i, c)]) / (2.0 * h);
                    let expect = if c == col { walk.m[(i, j)] } else { 0.0 };
                    let diff = (fd - expect).abs();
                    assert!(diff < 1e-6, "Jacobian mismatch at ({i},{c})←({j},{col}): {diff:.3e}");
                    worst_fd = worst_fd.max(diff);
                }
            }
        }
    }

    report(
        "P3",
        t0.elapsed(),
        30.0,
        &format!("oracle gap ≤ {worst:.2e} on 50 instances; Jacobian gap ≤ {worst_fd:.2e}"),
    );
}

#[test]
fn p04_kernel_adjacency_coverage() {
    let t0 = Instant::now();
    // Sensors sit two hops from the far end of the path fixture: a 1-step
    // walk on the physical graph carries no influence from the far node to
    // any observed node, while the kernel adjacency with k_I = 2 does.
    let g = fixture("fig3.json");
    let void = 0;
    let observed = g.observed();
    let phys = physical_transition(&g).unwrap();
    let phys_inf = total_observed_influence(&phys, &observed, 1).unwrap();
    assert_eq!(phys_inf[void], 0.0, "physical 1-step influence must vanish");

    let d = g.shortest_paths(DistanceWeight::Hop);
    let adj = build_adjacency(&d, 2).unwrap();
    let kern_inf = total_observed_influence(&adj.a_tilde, &observed, 1).unwrap();
    assert!(kern_inf[void] > 0.0, "kernel 1-step influence must be positive");

    report(
        "P4",
        t0.elapsed(),
        5.0,
        &format!(
            "void node influence: physical 0, kernel {:.3}",
            kern_inf[void]
        ),
    );
}

#[test]
fn p05_similarity_graph_structure() {
    let t0 = Instant::now();
    let g = fixture("feeder13.json");
    let d = g.shortest_paths(DistanceWeight::Hop);
    let n = g.n();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for set in 0..200 {
        let count = rng.gen_range(16..=40);
        let k_ii = rng.gen_range(2..=6);
        let mut argmaxes = Vec::with_capacity(count);
        let rows: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                let z: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
                let sum: f64 = z.iter().sum();
                let z: Vec<f64> = z.iter().map(|v| v / sum).collect();
                let masked = mask_embedding(&z, &g);
                argmaxes.push(masked.p_star);
                masked.z_hat
            })
            .collect();
        let b = build_b(&rows, k_ii).unwrap();
        for p in 0..count {
            assert!(b.get(p, p) == 0.0, "set {set}: diagonal must be zero");
            assert!(
                b.row(p).len() <= 2 * k_ii,
                "set {set}: row {p} has {} nonzeros > 2k = {}",
                b.row(p).len(),
                2 * k_ii
            );
            for &(q, sim) in b.row(p) {
                assert!(sim > 0.0);
                assert!(
                    b.get(q, p) == b.get(p, q),
                    "set {set}: asymmetry at ({p},{q})"
                );
                let hops = d.get(argmaxes[p], argmaxes[q]);
                assert!(
                    hops <= 2.0,
                    "set {set}: edge ({p},{q}) joins argmax nodes {} and {} at {hops} hops",
                    argmaxes[p],
                    argmaxes[q]
                );
            }
        }
    }
    report(
        "P5",
        t0.elapsed(),
        30.0,
        "symmetry, zero diagonal, 2k row cap, 2-hop locality on 200 random sets",
    );
}

#[test]
fn p06_stage_ablation_direction() {
    let t0 = Instant::now();
    let cells = &*ABLATION_CELLS;
    let hop12 = mean(cells, Arm::Stage12, |r| r.lar_1hop);
    let hop1 = mean(cells, Arm::Stage1, |r| r.lar_1hop);
    let lar12 = mean(cells, Arm::Stage12, |r| r.lar);
    let lar2 = mean(cells, Arm::Stage2, |r| r.lar);
    assert!(
        hop12 >= hop1,
        "1-hop accuracy regressed when adding the propagation stage: {hop12:.4} < {hop1:.4}"
    );
    assert!(
        lar12 >= lar2 + 0.10,
        "full pipeline does not clear the propagation-only stage by 10 points: {lar12:.4} vs {lar2:.4}"
    );
    report(
        "P6",
        t0.elapsed(),
        900.0,
        &format!(
            "LAR1hop I+II {hop12:.4} ≥ I {hop1:.4}; LAR I+II {lar12:.4} ≥ II-only {lar2:.4} + 0.10"
        ),
    );
}

#[test]
fn p07_low_label_superiority() {
    let t0 = Instant::now();
    let ppgn15 = mean(&ABLATION_CELLS, Arm::Stage12, |r| r.lar);
    let mlp15 = mean(&BASELINE15_CELLS, Arm::Mlp, |r| r.lar);
    let gcn15 = mean(&BASELINE15_CELLS, Arm::Gcn, |r| r.lar);
    assert!(
        ppgn15 >= mlp15 + 0.03 && ppgn15 >= gcn15 + 0.03,
        "pipeline does not clear both baselines by 3 points at β=15%: {ppgn15:.4} vs mlp {mlp15:.4}, gcn {gcn15:.4}"
    );
    let ppgn25 = mean(&COMPARISON25_CELLS, Arm::Stage12, |r| r.lar);
    let mlp25 = mean(&COMPARISON25_CELLS, Arm::Mlp, |r| r.lar);
    let gcn25 = mean(&COMPARISON25_CELLS, Arm::Gcn, |r| r.lar);
    assert!(
        ppgn25 >= mlp25 && ppgn25 >= gcn25,
        "pipeline falls behind a baseline at β=25%: {ppgn25:.4} vs mlp {mlp25:.4}, gcn {gcn25:.4}"
    );
    report(
        "P7",
        t0.elapsed(),
        1200.0,
        &format!(
            "β=15%: {ppgn15:.4} vs mlp {mlp15:.4} / gcn {gcn15:.4}; β=25%: {ppgn25:.4} vs {mlp25:.4} / {gcn25:.4}"
        ),
    );
}

#[test]
fn p08_alternating_noninferiority() {
    let t0 = Instant::now();
    let alt = mean(&SCHEDULE_CELLS, Arm::Stage1, |r| r.lar);
    let joint = mean(&SCHEDULE_CELLS, Arm::Stage1Joint, |r| r.lar);
    assert!(
        alt >= joint - 0.005,
        "alternating schedule is inferior: {alt:.4} < {joint:.4} − 0.005"
    );
    report(
        "P8",
        t0.elapsed(),
        900.0,
        &format!("LAR alternating {alt:.4} vs joint {joint:.4} (non-inferiority margin 0.005)"),
    );
}

#[test]
fn p09_ood_harness_contract() {
    let t0 = Instant::now();
    let f = &*FEEDER36;
    let cell = &ABLATION_CELLS[&(Arm::Stage12.name(), SEEDS[0])];
    let frozen = cell.bundle.checksum();

    // Normally-open tie switch; closing it adds a loop without isolating
    // any node.
    let tie = SwitchScenario {
        id: "tie35_closed".into(),
        states: vec![(5, SwitchState::Closed)],
    };
    let scenarios = vec![
        OodScenario::Load { increment: 0.05 },
        OodScenario::Load { increment: 0.10 },
        OodScenario::Load { increment: 0.15 },
        OodScenario::Load { increment: 0.20 },
        OodScenario::Switch { scenario: tie },
    ];
    let mut emitted = Vec::new();
    for scenario in &scenarios {
        let name = scenario.name();
        let grid = ood_grid(&f.grid, scenario, 6).unwrap();
        let samples = generate_dataset(&f.g, &grid, ood_seed(GEN_SEED, &name)).unwrap();
        let prepared = prepare_with(&f.g, samples, &cell.bundle.norm);
        let all: Vec<usize> = (0..prepared.samples.len()).collect();
        let r = eval_bundle(&cell.bundle, &f.g, &f.adj, &prepared, &all).unwrap();
        assert_eq!(r.n_test, prepared.samples.len());
        assert_eq!(r.per_class.len(), f.g.class_count());
        for v in [r.f1, r.lar, r.lar_1hop] {
            assert!((0.0..=1.0).contains(&v), "{name}: metric {v} out of range");
        }
        emitted.push(format!("{name} LAR {:.3}", r.lar));
    }
    assert_eq!(
        cell.bundle.checksum(),
        frozen,
        "parameters changed during OOD evaluation"
    );
    report(
        "P9",
        t0.elapsed(),
        600.0,
        &format!("frozen checksum held; {}", emitted.join(", ")),
    );
}

#[test]
fn p10_metrics_unit_suite() {
    let t0 = Instant::now();
    // Two merged classes on a 3-node path: {1,2} → class 1, {3} → class 2.
    let json = r#"{
      "format": "ppgn-feeder-v1",
      "nodes": [
        {"id": 1, "phases": "abc"},
        {"id": 2, "phases": "abc"},
        {"id": 3, "phases": "abc"}
      ],
      "branches": [
        {"from": 1, "to": 2, "y": [[[20,-40],[0,0],[0,0]],[[0,0],[20,-40],[0,0]],[[0,0],[0,0],[20,-40]]]},
        {"from": 2, "to": 3, "y": [[[20,-40],[0,0],[0,0]],[[0,0],[20,-40],[0,0]],[[0,0],[0,0],[20,-40]]]}
      ],
      "switches": [],
      "observed": [1, 2, 3],
      "slack": 1,
      "loads": [],
      "label_merge": [[1, 2]]
    }"#;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two_class.json");
    std::fs::write(&path, json).unwrap();
    let g2 = load_feeder(&path).unwrap();
    let r = compute_metrics(&[1, 1, 2, 2], &[1, 2, 2, 2], &g2).unwrap();
    assert!((r.f1 - 11.0 / 15.0).abs() < 1e-15, "F1 {} ≠ 11/15", r.f1);
    assert_eq!(r.lar, 0.75);
    assert_eq!(r.lar_1hop, 1.0);

    let g = fixture("feeder13.json");
    let c = g.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..1000 {
        let len = rng.gen_range(1..=40);
        let truth: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=c)).collect();
        let pred: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=c)).collect();
        let r = compute_metrics(&truth, &pred, &g).unwrap();
        assert!(
            r.lar <= r.lar_1hop,
            "exact accuracy exceeded 1-hop accuracy: {} > {}",
            r.lar,
            r.lar_1hop
        );
    }
    report(
        "P10",
        t0.elapsed(),
        5.0,
        "hand confusion example exact (F1 11/15, LAR 0.75, LAR1hop 1.0); LAR ≤ LAR1hop on 1000 random vectors",
    );
}
