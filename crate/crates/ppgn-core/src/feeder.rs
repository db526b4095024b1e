//! Physical feeder model: topology loading and validation, three-phase bus
//! admittance assembly, and shortest-path distance tables.
//!
//! Feeders are stored as versioned JSON (`ppgn-feeder-v1`). Node ids in the
//! file are 1-based and must be exactly `1..=n`; everywhere else in the crate
//! nodes are addressed by 0-based index (`id - 1`). The 3n×3n admittance
//! matrix is ordered node-major, phase-minor: row `3*i + p` is phase `p` of
//! node index `i`. Phases missing at a node keep their rows and columns, which
//! stay structurally zero, so the 3n indexing is uniform across feeders.

use std::collections::BinaryHeap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEEDER_FORMAT: &str = "ppgn-feeder-v1";

/// One of the three phases, in fixed `a, b, c` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "a")]
    A,
    #[serde(rename = "b")]
    B,
    #[serde(rename = "c")]
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn from_char(ch: char) -> Option<Phase> {
        match ch {
            'a' => Some(Phase::A),
            'b' => Some(Phase::B),
            'c' => Some(Phase::C),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::A => "a",
            Phase::B => "b",
            Phase::C => "c",
        })
    }
}

/// Set of phases present at a node, as a 3-bit mask in `a, b, c` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    fn parse(s: &str) -> Option<PhaseSet> {
        let mut mask = 0u8;
        for ch in s.chars() {
            let p = Phase::from_char(ch)?;
            let bit = 1 << p.index();
            if mask & bit != 0 {
                return None; // duplicate letter
            }
            mask |= bit;
        }
        if mask == 0 {
            None
        } else {
            Some(PhaseSet(mask))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwitchState {
    #[serde(rename = "open")]
    Open,
    #[serde(rename = "closed")]
    Closed,
}

/// A branch between two node indices with its 3×3 complex admittance block.
#[derive(Debug, Clone)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    /// Series admittance block in siemens, `y[row phase][col phase]`.
    pub y: [[Complex64; 3]; 3],
}

impl Branch {
    /// Mean series impedance magnitude over the branch's present phases
    /// (nonzero diagonal entries of the admittance block).
    pub fn impedance_magnitude(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for p in 0..3 {
            let y = self.y[p][p];
            if y.norm() > 0.0 {
                sum += 1.0 / y.norm();
                count += 1;
            }
        }
        sum / count as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Switch {
    pub branch: usize,
    pub normal: SwitchState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceWeight {
    /// Every branch counts 1.
    Hop,
    /// Branch weight is its mean series impedance magnitude in ohms.
    ImpedanceMagnitude,
}

/// Validated feeder: topology, phasing, switches, observability, loads, and
/// the label-merge map. Values are immutable after construction; deriving a
/// different switch configuration goes through [`FeederGraph::apply_switch_states`].
#[derive(Debug, Clone)]
pub struct FeederGraph {
    n: usize,
    phases: Vec<PhaseSet>,
    branches: Vec<Branch>,
    switches: Vec<Switch>,
    /// Current switch states, initialized to the normal states from the file.
    switch_states: Vec<SwitchState>,
    observed: Vec<bool>,
    slack: usize,
    /// Base-case constant-current load per node and phase, amperes.
    loads: Vec<[Complex64; 3]>,
    /// `class_of[i]` is the 0-based label class of node index `i`.
    class_of: Vec<usize>,
    /// Member node indices per class, classes ordered by smallest member.
    class_members: Vec<Vec<usize>>,
}

// ---------------------------------------------------------------------------
// File schema

#[derive(Deserialize)]
struct FeederFile {
    format: String,
    nodes: Vec<NodeSpec>,
    branches: Vec<BranchSpec>,
    #[serde(default)]
    switches: Vec<SwitchSpec>,
    observed: Vec<usize>,
    slack: usize,
    #[serde(default)]
    loads: Vec<LoadSpec>,
    #[serde(default)]
    label_merge: Vec<[usize; 2]>,
}

#[derive(Deserialize)]
struct NodeSpec {
    id: usize,
    phases: String,
}

#[derive(Deserialize)]
struct BranchSpec {
    from: usize,
    to: usize,
    /// 3×3 complex block, entries as `[re, im]` pairs in siemens.
    y: [[[f64; 2]; 3]; 3],
}

#[derive(Deserialize)]
struct SwitchSpec {
    branch: usize,
    state: SwitchState,
}

#[derive(Deserialize)]
struct LoadSpec {
    node: usize,
    /// Per-phase current draw as `[re, im]` pairs, amperes.
    current: [[f64; 2]; 3],
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

/// Load and validate a feeder file.
pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: FeederFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        source: e,
    })?;
    FeederGraph::from_file(file)
}

impl FeederGraph {
    fn from_file(file: FeederFile) -> Result<FeederGraph> {
        if file.format != FEEDER_FORMAT {
            return Err(invalid(format!(
                "unsupported feeder format {:?}, expected {:?}",
                file.format, FEEDER_FORMAT
            )));
        }
        let n = file.nodes.len();
        if n == 0 {
            return Err(invalid("feeder has no nodes"));
        }

        // Node ids must be exactly 1..=n so that id - 1 is a dense index.
        let mut phases = vec![None; n];
        for node in &file.nodes {
            if node.id == 0 || node.id > n {
                return Err(invalid(format!(
                    "node id {} outside 1..={}",
                    node.id, n
                )));
            }
            let set = PhaseSet::parse(&node.phases).ok_or_else(|| {
                invalid(format!(
                    "node {}: phases {:?} is not a nonempty subset of \"abc\"",
                    node.id, node.phases
                ))
            })?;
            if phases[node.id - 1].replace(set).is_some() {
                return Err(invalid(format!("duplicate node id {}", node.id)));
            }
        }
        let phases: Vec<PhaseSet> = phases.into_iter().map(|p| p.unwrap()).collect();

        let node_index = |id: usize, what: &str| -> Result<usize> {
            if id == 0 || id > n {
                Err(invalid(format!("{what} references unknown node {id}")))
            } else {
                Ok(id - 1)
            }
        };

        let mut branches = Vec::with_capacity(file.branches.len());
        for (bi, spec) in file.branches.iter().enumerate() {
            let from = node_index(spec.from, &format!("branch {bi}"))?;
            let to = node_index(spec.to, &format!("branch {bi}"))?;
            if from == to {
                return Err(invalid(format!("branch {bi} is a self-loop")));
            }
            let mut y = [[Complex64::new(0.0, 0.0); 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    let [re, im] = spec.y[r][c];
                    if !re.is_finite() || !im.is_finite() {
                        return Err(invalid(format!(
                            "branch {bi}: non-finite admittance entry ({r},{c})"
                        )));
                    }
                    y[r][c] = Complex64::new(re, im);
                }
            }
            // Reciprocity keeps the assembled Y exactly symmetric.
            for r in 0..3 {
                for c in (r + 1)..3 {
                    if y[r][c] != y[c][r] {
                        return Err(invalid(format!(
                            "branch {bi}: admittance block is not symmetric at ({r},{c})"
                        )));
                    }
                }
            }
            // Rows/columns of phases absent at either endpoint must be zero.
            for p in 0..3 {
                let ph = Phase::ALL[p];
                let present = phases[from].contains(ph) && phases[to].contains(ph);
                if !present {
                    for q in 0..3 {
                        if y[p][q] != Complex64::new(0.0, 0.0)
                            || y[q][p] != Complex64::new(0.0, 0.0)
                        {
                            return Err(invalid(format!(
                                "branch {bi}: nonzero admittance on phase {ph} absent at an endpoint"
                            )));
                        }
                    }
                }
            }
            if (0..3).all(|p| y[p][p].norm() == 0.0) {
                return Err(invalid(format!("branch {bi} has no phase with nonzero admittance")));
            }
            branches.push(Branch { from, to, y });
        }

        let mut switches = Vec::with_capacity(file.switches.len());
        let mut switch_states = Vec::with_capacity(file.switches.len());
        let mut governed = vec![false; branches.len()];
        for (si, spec) in file.switches.iter().enumerate() {
            if spec.branch >= branches.len() {
                return Err(invalid(format!(
                    "switch {si} references unknown branch {}",
                    spec.branch
                )));
            }
            if governed[spec.branch] {
                return Err(invalid(format!(
                    "branch {} has more than one switch",
                    spec.branch
                )));
            }
            governed[spec.branch] = true;
            switches.push(Switch {
                branch: spec.branch,
                normal: spec.state,
            });
            switch_states.push(spec.state);
        }

        let mut observed = vec![false; n];
        for &id in &file.observed {
            let i = node_index(id, "observed set")?;
            observed[i] = true;
        }
        let slack = node_index(file.slack, "slack")?;

        let mut loads = vec![[Complex64::new(0.0, 0.0); 3]; n];
        for spec in &file.loads {
            let i = node_index(spec.node, "load")?;
            for p in 0..3 {
                let [re, im] = spec.current[p];
                if !re.is_finite() || !im.is_finite() {
                    return Err(invalid(format!("load at node {}: non-finite current", spec.node)));
                }
                let c = Complex64::new(re, im);
                if c != Complex64::new(0.0, 0.0) && !phases[i].contains(Phase::ALL[p]) {
                    return Err(invalid(format!(
                        "load at node {} on phase {} absent at that node",
                        spec.node,
                        Phase::ALL[p]
                    )));
                }
                loads[i][p] = c;
            }
        }

        // Label-merge map: union-find over merged pairs, classes ordered by
        // smallest member index.
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for &[a, b] in &file.label_merge {
            let ia = node_index(a, "label_merge")?;
            let ib = node_index(b, "label_merge")?;
            if ia == ib {
                return Err(invalid(format!("label_merge pair ({a}, {b}) merges a node with itself")));
            }
            let (ra, rb) = (find(&mut parent, ia), find(&mut parent, ib));
            let (keep, drop) = (ra.min(rb), ra.max(rb));
            parent[drop] = keep;
        }
        let mut class_of = vec![usize::MAX; n];
        let mut class_members: Vec<Vec<usize>> = Vec::new();
        for i in 0..n {
            let root = find(&mut parent, i);
            if class_of[root] == usize::MAX {
                class_of[root] = class_members.len();
                class_members.push(Vec::new());
            }
            class_of[i] = class_of[root];
            class_members[class_of[i]].push(i);
        }

        let g = FeederGraph {
            n,
            phases,
            branches,
            switches,
            switch_states,
            observed,
            slack,
            loads,
            class_of,
            class_members,
        };

        // Connectivity under the normal switch states is a file invariant;
        // derived configurations are allowed to island (and warn downstream).
        if let Some(island) = g.isolated_nodes() {
            return Err(invalid(format!(
                "feeder is not connected under normal switch states; e.g. node {} is cut off",
                island[0] + 1
            )));
        }
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn phases(&self, node: usize) -> PhaseSet {
        self.phases[node]
    }

    pub fn is_observed(&self, node: usize) -> bool {
        self.observed[node]
    }

    /// Observed node indices in ascending order.
    pub fn observed(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.observed[i]).collect()
    }

    pub fn load(&self, node: usize) -> [Complex64; 3] {
        self.loads[node]
    }

    pub fn switches(&self) -> &[Switch] {
        &self.switches
    }

    pub fn switch_states(&self) -> &[SwitchState] {
        &self.switch_states
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Branches present under the current switch states.
    pub fn effective_branches(&self) -> impl Iterator<Item = &Branch> {
        let mut open = vec![false; self.branches.len()];
        for (si, sw) in self.switches.iter().enumerate() {
            if self.switch_states[si] == SwitchState::Open {
                open[sw.branch] = true;
            }
        }
        self.branches
            .iter()
            .enumerate()
            .filter_map(move |(bi, b)| if open[bi] { None } else { Some(b) })
    }

    /// Number of label classes `c`.
    pub fn class_count(&self) -> usize {
        self.class_members.len()
    }

    /// 0-based class of a node index.
    pub fn class_of_node(&self, node: usize) -> usize {
        self.class_of[node]
    }

    /// Node indices sharing a class, classes ordered by smallest member.
    pub fn class_members(&self, class: usize) -> &[usize] {
        &self.class_members[class]
    }

    /// Whether two classes are physically adjacent: some branch (under the
    /// current switch states) joins members of the two classes. A class is
    /// not adjacent to itself.
    pub fn classes_adjacent(&self, ci: usize, cj: usize) -> bool {
        if ci == cj {
            return false;
        }
        self.effective_branches().any(|b| {
            let (a, z) = (self.class_of[b.from], self.class_of[b.to]);
            (a == ci && z == cj) || (a == cj && z == ci)
        })
    }

    /// Neighbor node indices under the current switch states.
    pub fn physical_neighbors(&self, node: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .effective_branches()
            .filter_map(|b| {
                if b.from == node {
                    Some(b.to)
                } else if b.to == node {
                    Some(b.from)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Copy of the graph with the given `(switch index, state)` overrides.
    pub fn apply_switch_states(&self, states: &[(usize, SwitchState)]) -> Result<FeederGraph> {
        let mut out = self.clone();
        for &(si, state) in states {
            if si >= out.switch_states.len() {
                return Err(Error::UnknownSwitch(si));
            }
            out.switch_states[si] = state;
        }
        Ok(out)
    }

    /// Nodes unreachable from the slack under the current switch states, or
    /// `None` if the graph is connected.
    pub fn isolated_nodes(&self) -> Option<Vec<usize>> {
        let adj = self.adjacency_lists(DistanceWeight::Hop);
        let mut seen = vec![false; self.n];
        let mut stack = vec![self.slack];
        seen[self.slack] = true;
        while let Some(i) = stack.pop() {
            for &(j, _) in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        let cut: Vec<usize> = (0..self.n).filter(|&i| !seen[i]).collect();
        if cut.is_empty() {
            None
        } else {
            Some(cut)
        }
    }

    fn adjacency_lists(&self, weight: DistanceWeight) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n];
        for b in self.effective_branches() {
            let w = match weight {
                DistanceWeight::Hop => 1.0,
                DistanceWeight::ImpedanceMagnitude => b.impedance_magnitude(),
            };
            adj[b.from].push((b.to, w));
            adj[b.to].push((b.from, w));
        }
        adj
    }

    /// Assemble the 3n×3n bus admittance matrix from the effective branches.
    ///
    /// Off-diagonal blocks are the negated branch blocks, diagonal blocks the
    /// sum of incident blocks. The slack source is *not* folded in here; the
    /// solver adds its Norton equivalent. Logs a warning when a non-slack
    /// island exists (the matrix is then structurally singular).
    pub fn build_ybus(&self) -> YBus {
        let dim = 3 * self.n;
        let mut m = DMatrix::from_element(dim, dim, Complex64::new(0.0, 0.0));
        for b in self.effective_branches() {
            for r in 0..3 {
                for c in 0..3 {
                    let y = b.y[r][c];
                    if y == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    m[(3 * b.from + r, 3 * b.from + c)] += y;
                    m[(3 * b.to + r, 3 * b.to + c)] += y;
                    m[(3 * b.from + r, 3 * b.to + c)] -= y;
                    m[(3 * b.to + r, 3 * b.from + c)] -= y;
                }
            }
        }
        if let Some(cut) = self.isolated_nodes() {
            log::warn!(
                "feeder has {} node(s) disconnected from the slack (e.g. node {}); \
                 admittance matrix is singular on that island",
                cut.len(),
                cut[0] + 1
            );
        }
        YBus { n: self.n, m }
    }

    /// All-pairs shortest-path distances over the effective branches.
    pub fn shortest_paths(&self, weight: DistanceWeight) -> DistanceTable {
        let adj = self.adjacency_lists(weight);
        let n = self.n;
        let mut d = vec![f64::INFINITY; n * n];

        // Dijkstra from every source; branch weights are non-negative.
        #[derive(PartialEq)]
        struct Entry(f64, usize);
        impl Eq for Entry {}
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                // Reversed: BinaryHeap is a max-heap.
                other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
            }
        }
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }

        for src in 0..n {
            let dist = &mut d[src * n..(src + 1) * n];
            let mut heap = BinaryHeap::new();
            dist[src] = 0.0;
            heap.push(Entry(0.0, src));
            while let Some(Entry(du, u)) = heap.pop() {
                if du > dist[u] {
                    continue;
                }
                for &(v, w) in &adj[u] {
                    let cand = du + w;
                    if cand < dist[v] {
                        dist[v] = cand;
                        heap.push(Entry(cand, v));
                    }
                }
            }
        }
        // Per-source runs sum path weights in opposite orders, which is not
        // bit-associative; pin exact symmetry by keeping the smaller sum.
        for i in 0..n {
            for j in (i + 1)..n {
                let m = d[i * n + j].min(d[j * n + i]);
                d[i * n + j] = m;
                d[j * n + i] = m;
            }
        }
        DistanceTable { n, d }
    }
}

/// Three-phase bus admittance matrix, node-major phase-minor.
#[derive(Debug, Clone)]
pub struct YBus {
    n: usize,
    pub m: DMatrix<Complex64>,
}

impl YBus {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        3 * self.n
    }

    /// Row/column of `(node index, phase)`.
    pub fn idx(&self, node: usize, phase: Phase) -> usize {
        3 * node + phase.index()
    }
}

/// All-pairs shortest-path distances; `+inf` marks disconnected pairs.
#[derive(Debug, Clone)]
pub struct DistanceTable {
    n: usize,
    d: Vec<f64>,
}

impl DistanceTable {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    /// Scale every distance by a positive constant (useful in tests).
    pub fn scaled(&self, gamma: f64) -> DistanceTable {
        DistanceTable {
            n: self.n,
            d: self.d.iter().map(|x| x * gamma).collect(),
        }
    }

    pub fn from_raw(n: usize, d: Vec<f64>) -> DistanceTable {
        assert_eq!(d.len(), n * n);
        DistanceTable { n, d }
    }
}
