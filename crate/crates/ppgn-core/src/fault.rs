//! Node-shunt fault simulation and labeled dataset generation.
//!
//! The network model is linear: loads are constant current injections, the
//! slack source is a Norton equivalent (a large shunt to the nominal source
//! voltage), and a fault is an admittance block added to the faulted node's
//! diagonal. Pre-fault and faulted states then come from two linear solves
//! against the same injection vector, which makes the sparsity of the
//! voltage-deviation equation an exactly checkable property: with constant
//! current loads, `Y·ΔU` is zero outside the faulted node's three rows.
//!
//! Node ids in this module's public types (`FaultSpec`, sample metadata,
//! scenario grids) are 1-based to match feeder files; dense vectors and
//! matrices are indexed by `id - 1` as everywhere else.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{FeederGraph, Phase, SwitchState, YBus};

/// Norton shunt admittance that models the slack source, siemens per phase.
pub const SLACK_SHUNT_S: f64 = 1e6;

/// Nominal source voltage magnitude, volts.
pub const NOMINAL_V: f64 = 1.0;

/// Balanced source voltage of a phase: `1∠0°, 1∠-120°, 1∠+120°`.
pub fn source_voltage(phase: Phase) -> Complex64 {
    let theta = match phase {
        Phase::A => 0.0,
        Phase::B => -2.0 * std::f64::consts::FRAC_PI_3,
        Phase::C => 2.0 * std::f64::consts::FRAC_PI_3,
    };
    Complex64::from_polar(NOMINAL_V, theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    /// Single phase to ground.
    #[serde(rename = "spg")]
    Spg,
    /// Double phase to ground, independent per-phase paths.
    #[serde(rename = "dpg")]
    Dpg,
    /// Phase to phase.
    #[serde(rename = "pp")]
    Pp,
}

impl FaultKind {
    pub const ALL: [FaultKind; 3] = [FaultKind::Spg, FaultKind::Dpg, FaultKind::Pp];

    pub fn phase_count(self) -> usize {
        match self {
            FaultKind::Spg => 1,
            FaultKind::Dpg | FaultKind::Pp => 2,
        }
    }
}

/// One fault event: where, what kind, which phases, through which impedance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    /// 1-based node id.
    pub node: usize,
    pub kind: FaultKind,
    pub phases: Vec<Phase>,
    pub zf_ohm: f64,
}

impl FaultSpec {
    fn validate(&self, g: &FeederGraph) -> Result<()> {
        if self.node == 0 || self.node > g.n() {
            return Err(Error::Validation(format!("fault node {} does not exist", self.node)));
        }
        if !(self.zf_ohm.is_finite() && self.zf_ohm > 0.0) {
            return Err(Error::Validation(format!(
                "fault impedance {} ohm is not positive",
                self.zf_ohm
            )));
        }
        if self.phases.len() != self.kind.phase_count() {
            return Err(Error::Validation(format!(
                "{:?} fault needs {} phase(s), got {}",
                self.kind,
                self.kind.phase_count(),
                self.phases.len()
            )));
        }
        if self.phases.len() == 2 && self.phases[0] == self.phases[1] {
            return Err(Error::Validation("fault phases must be distinct".into()));
        }
        let at = g.phases(self.node - 1);
        for &p in &self.phases {
            if !at.contains(p) {
                return Err(Error::Validation(format!(
                    "phase {} absent at node {}",
                    p, self.node
                )));
            }
        }
        Ok(())
    }
}

/// Voltages and the load injections they solve against. `c` holds the
/// physical injections only (loads, negated draws); the slack source current
/// is implicit in the Norton shunt, so `Y·U = C` holds on non-slack rows.
#[derive(Debug, Clone)]
pub struct NetworkState {
    pub u: DVector<Complex64>,
    pub c: DVector<Complex64>,
}

/// Per-node multiplicative load scale factors.
#[derive(Debug, Clone)]
pub struct LoadScenario {
    pub scales: Vec<f64>,
}

impl LoadScenario {
    pub fn nominal(n: usize) -> LoadScenario {
        LoadScenario { scales: vec![1.0; n] }
    }

    pub fn uniform(n: usize, low: f64, high: f64, rng: &mut ChaCha8Rng) -> Result<LoadScenario> {
        if !(low > 0.0 && high >= low && high.is_finite()) {
            return Err(Error::Config(format!(
                "load scale range ({low}, {high}) is not a positive interval"
            )));
        }
        let scales = (0..n).map(|_| rng.gen_range(low..=high)).collect();
        Ok(LoadScenario { scales })
    }
}

/// Upper bound `high` of a `Uniform(low, high)` load-scale distribution whose
/// mean absolute deviation from 1.0 equals `target_mad` (requires `low < 1`).
pub fn calibrate_high(low: f64, target_mad: f64) -> Result<f64> {
    if !(low > 0.0 && low < 1.0) {
        return Err(Error::Config(format!("low scale {low} must be in (0, 1)")));
    }
    let a = 1.0 - low;
    let disc = target_mad * target_mad - a * a + 2.0 * target_mad * a;
    if disc < 0.0 {
        return Err(Error::Config(format!(
            "mean absolute deviation {target_mad} unreachable with low = {low}"
        )));
    }
    Ok(1.0 + target_mad + disc.sqrt())
}

/// One labeled training sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    /// n×6 feature rows `[|V_a|, θ_a, |V_b|, θ_b, |V_c|, θ_c]`; rows of
    /// unobserved nodes are exactly zero.
    pub x: Vec<[f64; 6]>,
    /// 1-based label class.
    pub label: usize,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub fault: FaultSpec,
    pub load_scale: Vec<f64>,
    pub switch_scenario: String,
    pub seed: u64,
}

/// Everything a fault solve produces; `sample` is the masked view.
#[derive(Debug, Clone)]
pub struct FaultOutcome {
    pub prefault: NetworkState,
    pub faulted: NetworkState,
    /// The equivalent sparse injection `Δ = −delta_block·u_f`, supported on
    /// the faulted node's three rows.
    pub delta: DVector<Complex64>,
    pub sample: Sample,
}

// ---------------------------------------------------------------------------
// Linear solver

/// Prefactored Norton-augmented admittance system for repeated solves.
pub struct GridSolver {
    n: usize,
    slack: usize,
    a: DMatrix<Complex64>,
    lu: nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
    /// Norton injection at the slack rows.
    source: DVector<Complex64>,
    absent: Vec<bool>,
}

impl GridSolver {
    /// Augment the physical admittance matrix with the slack Norton shunt
    /// and unit diagonals on structurally absent phase rows, then factor.
    pub fn new(g: &FeederGraph, ybus: &YBus) -> Result<GridSolver> {
        if let Some(cut) = g.isolated_nodes() {
            let ids: Vec<String> = cut.iter().take(8).map(|i| (i + 1).to_string()).collect();
            return Err(Error::Simulation(format!(
                "nodes disconnected from the slack: {}",
                ids.join(", ")
            )));
        }
        let dim = 3 * g.n();
        let mut a = ybus.m.clone();
        let mut source = DVector::from_element(dim, Complex64::new(0.0, 0.0));
        let mut absent = vec![false; dim];
        for i in 0..g.n() {
            for p in Phase::ALL {
                let r = 3 * i + p.index();
                if !g.phases(i).contains(p) {
                    // Absent phase: keep the system square with U = 0 there.
                    a[(r, r)] = Complex64::new(1.0, 0.0);
                    absent[r] = true;
                } else if i == g.slack() {
                    a[(r, r)] += Complex64::new(SLACK_SHUNT_S, 0.0);
                    source[r] = Complex64::new(SLACK_SHUNT_S, 0.0) * source_voltage(p);
                }
            }
        }
        let lu = a.clone().lu();
        Ok(GridSolver {
            n: g.n(),
            slack: g.slack(),
            a,
            lu,
            source,
            absent,
        })
    }

    /// Solve for voltages given physical injections, with two steps of
    /// iterative refinement. The huge slack shunt inflates the matrix norm,
    /// so a plain LU solve leaves residuals a few orders of magnitude above
    /// what the sparsity checks need; refinement restores them.
    pub fn solve(&self, injections: &DVector<Complex64>) -> Result<DVector<Complex64>> {
        let b = injections + &self.source;
        let mut x = self
            .lu
            .solve(&b)
            .ok_or_else(|| Error::Simulation("singular admittance system".into()))?;
        for _ in 0..2 {
            let r = &b - &self.a * &x;
            match self.lu.solve(&r) {
                Some(dx) => x += dx,
                None => break,
            }
        }
        for (r, &gone) in self.absent.iter().enumerate() {
            if gone {
                x[r] = Complex64::new(0.0, 0.0);
            }
        }
        // Self-check via componentwise backward error |r| / (|A||x| + |b|),
        // which stays meaningful when the injections themselves vanish.
        let resid = &b - &self.a * &x;
        for r in 0..3 * self.n {
            if self.absent[r] || r / 3 == self.slack {
                continue;
            }
            let mut denom = b[r].norm();
            for c in 0..3 * self.n {
                denom += self.a[(r, c)].norm() * x[c].norm();
            }
            if denom == 0.0 {
                continue;
            }
            if !(resid[r].norm() / denom < 1e-10) {
                return Err(Error::Simulation(format!(
                    "solver backward error {:.3e} at row {r} exceeds 1e-10",
                    resid[r].norm() / denom
                )));
            }
        }
        Ok(x)
    }

    /// Norton-augmented matrix (for residual diagnostics).
    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.a
    }
}

/// Physical load injections under a load scenario: negated scaled draws.
pub fn load_injections(g: &FeederGraph, loads: &LoadScenario) -> Result<DVector<Complex64>> {
    if loads.scales.len() != g.n() {
        return Err(Error::Config(format!(
            "load scenario has {} scales for {} nodes",
            loads.scales.len(),
            g.n()
        )));
    }
    let mut c = DVector::from_element(3 * g.n(), Complex64::new(0.0, 0.0));
    for i in 0..g.n() {
        let s = loads.scales[i];
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("load scale {s} at node {} not positive", i + 1)));
        }
        let draw = g.load(i);
        for p in 0..3 {
            c[3 * i + p] = -draw[p] * s;
        }
    }
    Ok(c)
}

/// Solve the pre-fault network state under scaled constant-current loads.
pub fn solve_prefault(g: &FeederGraph, loads: &LoadScenario) -> Result<NetworkState> {
    let solver = GridSolver::new(g, &g.build_ybus())?;
    let c = load_injections(g, loads)?;
    let u = solver.solve(&c)?;
    Ok(NetworkState { u, c })
}

/// The 3×3 admittance block a fault adds to the faulted node's diagonal.
pub fn fault_admittance_delta(g: &FeederGraph, spec: &FaultSpec) -> Result<[[Complex64; 3]; 3]> {
    spec.validate(g)?;
    let yf = Complex64::new(1.0 / spec.zf_ohm, 0.0);
    let mut block = [[Complex64::new(0.0, 0.0); 3]; 3];
    match spec.kind {
        FaultKind::Spg => {
            let p = spec.phases[0].index();
            block[p][p] = yf;
        }
        FaultKind::Dpg => {
            for &ph in &spec.phases {
                block[ph.index()][ph.index()] = yf;
            }
        }
        FaultKind::Pp => {
            let (p, q) = (spec.phases[0].index(), spec.phases[1].index());
            block[p][p] = yf;
            block[q][q] = yf;
            block[p][q] = -yf;
            block[q][p] = -yf;
        }
    }
    Ok(block)
}

/// Simulate one fault and return the full solve (states, sparse injection,
/// masked sample). [`simulate_fault`] is the sample-only view.
pub fn simulate_fault_full(
    g: &FeederGraph,
    loads: &LoadScenario,
    spec: &FaultSpec,
    meta: SampleMeta,
) -> Result<FaultOutcome> {
    let ybus = g.build_ybus();
    let solver = GridSolver::new(g, &ybus)?;
    simulate_with(g, &ybus, &solver, loads, spec, meta)
}

/// Fault solve against a prefactored base system (dataset generation reuses
/// the pre-fault factorization across samples of one switch scenario).
pub(crate) fn simulate_with(
    g: &FeederGraph,
    ybus: &YBus,
    prefault_solver: &GridSolver,
    loads: &LoadScenario,
    spec: &FaultSpec,
    meta: SampleMeta,
) -> Result<FaultOutcome> {
    spec.validate(g)?;
    let c = load_injections(g, loads)?;
    let u0 = prefault_solver.solve(&c)?;

    let block = fault_admittance_delta(g, spec)?;
    let fi = spec.node - 1;
    let mut faulted_ybus = ybus.clone();
    for r in 0..3 {
        for col in 0..3 {
            faulted_ybus.m[(3 * fi + r, 3 * fi + col)] += block[r][col];
        }
    }
    let fault_solver = GridSolver::new(g, &faulted_ybus)?;
    let u = fault_solver.solve(&c)?;

    // Δ = −delta_block · u_f, the fault's equivalent injection.
    let mut delta = DVector::from_element(3 * g.n(), Complex64::new(0.0, 0.0));
    for r in 0..3 {
        let mut acc = Complex64::new(0.0, 0.0);
        for col in 0..3 {
            acc += block[r][col] * u[3 * fi + col];
        }
        delta[3 * fi + r] = -acc;
    }

    let x = sample_features(g, &u);
    let sample = Sample {
        x,
        label: g.class_of_node(fi) + 1,
        meta,
    };
    Ok(FaultOutcome {
        prefault: NetworkState { u: u0, c: c.clone() },
        faulted: NetworkState { u, c },
        delta,
        sample,
    })
}

/// Simulate one fault and emit the masked sample.
pub fn simulate_fault(g: &FeederGraph, loads: &LoadScenario, spec: &FaultSpec) -> Result<Sample> {
    let meta = SampleMeta {
        fault: spec.clone(),
        load_scale: loads.scales.clone(),
        switch_scenario: "base".into(),
        seed: 0,
    };
    Ok(simulate_fault_full(g, loads, spec, meta)?.sample)
}

/// Principal argument in `(−π, π]`.
fn principal_angle(z: Complex64) -> f64 {
    if z.norm() == 0.0 {
        return 0.0;
    }
    let theta = z.arg();
    if theta <= -std::f64::consts::PI {
        theta + 2.0 * std::f64::consts::PI
    } else {
        theta
    }
}

/// Feature rows from a voltage vector, zeros on unobserved rows.
pub fn sample_features(g: &FeederGraph, u: &DVector<Complex64>) -> Vec<[f64; 6]> {
    let mut x = vec![[0.0f64; 6]; g.n()];
    for i in 0..g.n() {
        if !g.is_observed(i) {
            continue;
        }
        for p in 0..3 {
            let v = u[3 * i + p];
            x[i][2 * p] = v.norm();
            x[i][2 * p + 1] = principal_angle(v);
        }
    }
    x
}

/// Off-support residual of the voltage-deviation equation: the largest
/// `|(Ŷ·ΔU)_r|` over rows `r` outside the faulted node's three rows, where
/// `Ŷ` is the Norton-augmented matrix both solves ran against, plus `‖Δ‖∞`
/// for scaling. With constant-current loads `ΔC = 0`, so in exact arithmetic
/// the off-support residual is zero.
pub fn eq_sparsity_residual(g: &FeederGraph, out: &FaultOutcome) -> Result<(f64, f64)> {
    let solver = GridSolver::new(g, &g.build_ybus())?;
    let du = &out.faulted.u - &out.prefault.u;
    let resid = solver.matrix() * du;
    let fi = out.sample.meta.fault.node - 1;
    let mut max_off = 0.0f64;
    for r in 0..3 * g.n() {
        if r / 3 == fi {
            continue;
        }
        max_off = max_off.max(resid[r].norm());
    }
    let delta_inf = out.delta.iter().map(|c| c.norm()).fold(0.0_f64, f64::max);
    Ok((max_off, delta_inf))
}

// ---------------------------------------------------------------------------
// Dataset generation

/// A named switch configuration to simulate under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwitchScenario {
    pub id: String,
    /// `(switch index, state)` overrides on top of the normal states.
    #[serde(default)]
    pub states: Vec<(usize, SwitchState)>,
}

impl SwitchScenario {
    pub fn base() -> SwitchScenario {
        SwitchScenario {
            id: "base".into(),
            states: Vec::new(),
        }
    }
}

/// Enumeration grid for dataset generation: fault kinds × candidate nodes ×
/// impedance draws × switch scenarios, with per-sample random loads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioGrid {
    /// Fault kinds to generate; empty means all three.
    #[serde(default)]
    pub kinds: Vec<FaultKind>,
    /// Candidate 1-based node ids; empty means every non-slack node.
    #[serde(default)]
    pub nodes: Vec<usize>,
    /// Fault impedance draws per (kind, node, scenario) combination.
    pub impedance_draws: usize,
    /// Fault impedance range in ohms.
    #[serde(default = "default_zf_range")]
    pub zf_range: (f64, f64),
    /// Load scale distribution `Uniform(low, high)`.
    #[serde(default = "default_load_low")]
    pub load_low: f64,
    #[serde(default = "default_load_high")]
    pub load_high: f64,
    #[serde(default)]
    pub switch_scenarios: Vec<SwitchScenario>,
    /// Required minimum samples per label class.
    #[serde(default = "default_min_per_class")]
    pub min_per_class: usize,
}

fn default_zf_range() -> (f64, f64) {
    (0.05, 20.0)
}

fn default_load_low() -> f64 {
    0.06
}

fn default_load_high() -> f64 {
    // calibrate_high(0.06, 0.53): mean |scale − 1| of 0.53.
    2.15745517768204
}

fn default_min_per_class() -> usize {
    1
}

impl ScenarioGrid {
    pub fn new(impedance_draws: usize) -> ScenarioGrid {
        ScenarioGrid {
            kinds: Vec::new(),
            nodes: Vec::new(),
            impedance_draws,
            zf_range: default_zf_range(),
            load_low: default_load_low(),
            load_high: default_load_high(),
            switch_scenarios: Vec::new(),
            min_per_class: default_min_per_class(),
        }
    }

    fn validate(&self, g: &FeederGraph) -> Result<()> {
        if self.impedance_draws == 0 {
            return Err(Error::Config("impedance_draws must be at least 1".into()));
        }
        let (lo, hi) = self.zf_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("fault impedance range ({lo}, {hi}) invalid")));
        }
        if !(self.load_low > 0.0 && self.load_high >= self.load_low) {
            return Err(Error::Config(format!(
                "load scale range ({}, {}) invalid",
                self.load_low, self.load_high
            )));
        }
        for &id in &self.nodes {
            if id == 0 || id > g.n() {
                return Err(Error::Config(format!("candidate node {id} does not exist")));
            }
        }
        Ok(())
    }

    fn effective_kinds(&self) -> Vec<FaultKind> {
        if self.kinds.is_empty() {
            FaultKind::ALL.to_vec()
        } else {
            self.kinds.clone()
        }
    }

    fn effective_nodes(&self, g: &FeederGraph) -> Vec<usize> {
        if self.nodes.is_empty() {
            (1..=g.n()).filter(|&id| id - 1 != g.slack()).collect()
        } else {
            self.nodes.clone()
        }
    }

    fn effective_scenarios(&self) -> Vec<SwitchScenario> {
        if self.switch_scenarios.is_empty() {
            vec![SwitchScenario::base()]
        } else {
            self.switch_scenarios.clone()
        }
    }
}

/// Pick fault phases for a kind among the phases present at a node. Returns
/// `None` when the node cannot host the kind (fewer than two phases).
fn pick_phases(kind: FaultKind, present: &[Phase], rng: &mut ChaCha8Rng) -> Option<Vec<Phase>> {
    match kind {
        FaultKind::Spg => {
            let p = present[rng.gen_range(0..present.len())];
            Some(vec![p])
        }
        FaultKind::Dpg | FaultKind::Pp => {
            if present.len() < 2 {
                return None;
            }
            let a = rng.gen_range(0..present.len());
            let mut b = rng.gen_range(0..present.len() - 1);
            if b >= a {
                b += 1;
            }
            let (lo, hi) = (a.min(b), a.max(b));
            Some(vec![present[lo], present[hi]])
        }
    }
}

/// Generate a labeled dataset over the scenario grid. Deterministic under
/// `seed`: sample `idx` draws from `ChaCha8(seed ^ idx)` regardless of
/// evaluation order.
pub fn generate_dataset(g: &FeederGraph, grid: &ScenarioGrid, seed: u64) -> Result<Vec<Sample>> {
    grid.validate(g)?;
    let kinds = grid.effective_kinds();
    let nodes = grid.effective_nodes(g);
    let scenarios = grid.effective_scenarios();

    let mut samples = Vec::new();
    let mut idx: u64 = 0;
    for scenario in &scenarios {
        let gs = g.apply_switch_states(&scenario.states)?;
        let ybus = gs.build_ybus();
        let solver = GridSolver::new(&gs, &ybus)?;
        for &kind in &kinds {
            for &node in &nodes {
                let present: Vec<Phase> = gs.phases(node - 1).iter().collect();
                if kind.phase_count() > present.len() {
                    continue;
                }
                for _ in 0..grid.impedance_draws {
                    let sample_seed = seed ^ idx;
                    idx += 1;
                    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
                    let loads =
                        LoadScenario::uniform(gs.n(), grid.load_low, grid.load_high, &mut rng)?;
                    let zf = rng.gen_range(grid.zf_range.0..=grid.zf_range.1);
                    let phases = pick_phases(kind, &present, &mut rng)
                        .expect("phase count checked above");
                    let spec = FaultSpec {
                        node,
                        kind,
                        phases,
                        zf_ohm: zf,
                    };
                    let meta = SampleMeta {
                        fault: spec.clone(),
                        load_scale: loads.scales.clone(),
                        switch_scenario: scenario.id.clone(),
                        seed: sample_seed,
                    };
                    let out = simulate_with(&gs, &ybus, &solver, &loads, &spec, meta)?;
                    samples.push(out.sample);
                }
            }
        }
    }

    // Every class must be reachable by the grid.
    let mut counts = vec![0usize; g.class_count()];
    for s in &samples {
        counts[s.label - 1] += 1;
    }
    for (cls, &count) in counts.iter().enumerate() {
        if count < grid.min_per_class {
            return Err(Error::Infeasible(format!(
                "class {} has {} sample(s), grid requires at least {}",
                cls + 1,
                count,
                grid.min_per_class
            )));
        }
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-feature-column statistics over observed rows.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

/// Compute per-column statistics over observed rows of all samples and
/// standardize those rows in place. Unobserved rows stay exactly zero.
pub fn normalize_dataset(samples: &mut [Sample], g: &FeederGraph) -> Result<NormStats> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let observed = g.observed();
    let count = (samples.len() * observed.len()) as f64;
    let mut mean = [0.0f64; 6];
    for s in samples.iter() {
        for &i in &observed {
            for col in 0..6 {
                mean[col] += s.x[i][col];
            }
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = [0.0f64; 6];
    for s in samples.iter() {
        for &i in &observed {
            for col in 0..6 {
                let d = s.x[i][col] - mean[col];
                var[col] += d * d;
            }
        }
    }
    let mut std = [0.0f64; 6];
    for col in 0..6 {
        let sd = (var[col] / count).sqrt();
        // Identical entries leave a tiny nonzero variance from summation
        // rounding; dividing by it would blow the column up to O(1) noise,
        // so treat anything below the rounding floor as degenerate.
        std[col] = if sd > 1e-12 * mean[col].abs().max(1.0) {
            sd
        } else {
            log::warn!("feature column {col} has zero variance; std clamped to 1");
            1.0
        };
    }
    let stats = NormStats { mean, std };
    apply_normalization(samples, g, &stats);
    Ok(stats)
}

/// Standardize observed rows with previously computed statistics (reused on
/// out-of-distribution evaluation sets).
pub fn apply_normalization(samples: &mut [Sample], g: &FeederGraph, stats: &NormStats) {
    for s in samples.iter_mut() {
        for i in 0..g.n() {
            if !g.is_observed(i) {
                continue;
            }
            for col in 0..6 {
                s.x[i][col] = (s.x[i][col] - stats.mean[col]) / stats.std[col];
            }
        }
    }
}
