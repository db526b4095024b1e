//! Random-walk influence analysis.
//!
//! For linear neighborhood aggregation, the effect of node j's input on
//! node i's depth-K representation is exactly the probability that a
//! K-step random walk from i reaches j. This module computes those walk
//! probabilities, checks them against explicit path enumeration, measures
//! how much of each node's influence lands on the observed set, and
//! quantifies how strongly a sample-similarity graph keeps random walks
//! among same-label samples.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::feeder::FeederGraph;
use crate::stage2::Csr;
use crate::tensor::Mat;

/// K-step walk probabilities under a row-stochastic transition matrix.
#[derive(Debug, Clone)]
pub struct InfluenceMatrix {
    pub k: usize,
    /// `m[(i, j)]` = probability a K-step walk from i ends at j.
    pub m: Mat,
}

fn check_stochastic(transition: &Mat) -> Result<usize> {
    let (rows, cols) = transition.dim();
    if rows != cols {
        return Err(Error::ShapeMismatch {
            op: "influence_matrix".into(),
            detail: format!("transition matrix is {rows}×{cols}"),
        });
    }
    for i in 0..rows {
        let mut sum = 0.0;
        for j in 0..cols {
            let v = transition[(i, j)];
            if !(v >= 0.0) {
                return Err(Error::Validation(format!(
                    "transition entry ({i}, {j}) = {v} is negative or NaN"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::Validation(format!(
                "transition row {i} sums to {sum}, not 1"
            )));
        }
    }
    Ok(rows)
}

/// `transition^K`, with stochasticity validated on the way in.
pub fn influence_matrix(transition: &Mat, k: usize) -> Result<InfluenceMatrix> {
    let n = check_stochastic(transition)?;
    let mut m = Array2::eye(n);
    for _ in 0..k {
        m = m.dot(transition);
    }
    Ok(InfluenceMatrix { k, m })
}

/// Explicit sum over every length-K node sequence from i to j of the
/// product of traversed edge weights. Exponential in K — the sizes are
/// capped so this stays a usable oracle.
pub fn path_enumeration_oracle(transition: &Mat, i: usize, j: usize, k: usize) -> Result<f64> {
    let n = check_stochastic(transition)?;
    if n > 10 || k > 6 {
        return Err(Error::Infeasible(format!(
            "path enumeration over n = {n}, K = {k} is exponential; limits are n ≤ 10, K ≤ 6"
        )));
    }
    fn walk(t: &Mat, at: usize, j: usize, left: usize, acc: f64, total: &mut f64) {
        if left == 0 {
            if at == j {
                *total += acc;
            }
            return;
        }
        for next in 0..t.ncols() {
            let w = t[(at, next)];
            if w > 0.0 {
                walk(t, next, j, left - 1, acc * w, total);
            }
        }
    }
    let mut total = 0.0;
    walk(transition, i, j, k, 1.0, &mut total);
    Ok(total)
}

/// Per-node total influence landing on the observed set after K steps.
/// Nodes with zero total are invisible to the sensors at this depth.
pub fn total_observed_influence(
    transition: &Mat,
    observed: &[usize],
    k: usize,
) -> Result<Vec<f64>> {
    let inf = influence_matrix(transition, k)?;
    let n = inf.m.nrows();
    for &j in observed {
        if j >= n {
            return Err(Error::Validation(format!(
                "observed node index {j} out of range for n = {n}"
            )));
        }
    }
    let totals: Vec<f64> = (0..n)
        .map(|i| observed.iter().map(|&j| inf.m[(i, j)]).sum())
        .collect();
    let invisible: Vec<usize> = totals
        .iter()
        .enumerate()
        .filter(|&(_, &t)| t == 0.0)
        .map(|(i, _)| i + 1)
        .collect();
    if !invisible.is_empty() {
        log::warn!("nodes with zero observed influence at K = {k}: {invisible:?}");
    }
    Ok(totals)
}

/// Uniform random-walk transition over the physical (effective) topology.
pub fn physical_transition(g: &FeederGraph) -> Result<Mat> {
    let n = g.n();
    let mut t = Mat::zeros((n, n));
    for i in 0..n {
        let nbrs = g.physical_neighbors(i);
        if nbrs.is_empty() {
            return Err(Error::IsolatedNode(i + 1));
        }
        let w = 1.0 / nbrs.len() as f64;
        for j in nbrs {
            t[(i, j)] = w;
        }
    }
    Ok(t)
}

/// Fraction of an unlabeled sample's L-step walk mass that lands on
/// same-label samples, self excluded from both sides. Returns 0 when the
/// walk never leaves the sample (empty similarity row), since staying
/// put reveals nothing about the label.
pub fn label_influence_ratio(
    s_norm: &Csr,
    labels: &[usize],
    p: usize,
    l_steps: usize,
) -> Result<f64> {
    let n = s_norm.n();
    if labels.len() != n || p >= n {
        return Err(Error::ShapeMismatch {
            op: "label_influence_ratio".into(),
            detail: format!("{} labels, sample {p}, graph of {n}", labels.len()),
        });
    }
    let mut v = vec![0.0; n];
    v[p] = 1.0;
    for _ in 0..l_steps {
        v = s_norm.left_multiply(&v);
    }
    let mut same = 0.0;
    let mut reach = 0.0;
    for (q, &mass) in v.iter().enumerate() {
        if q == p {
            continue;
        }
        reach += mass;
        if labels[q] == labels[p] {
            same += mass;
        }
    }
    if reach == 0.0 {
        return Ok(0.0);
    }
    Ok(same / reach)
}

/// Mean label-influence ratio over a set of evaluation samples.
pub fn mean_label_influence_ratio(
    s_norm: &Csr,
    labels: &[usize],
    eval: &[usize],
    l_steps: usize,
) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for &p in eval {
        total += label_influence_ratio(s_norm, labels, p, l_steps)?;
    }
    Ok(total / eval.len() as f64)
}

/// Aggregation-only linear surrogate of the embedding network:
/// h^k = Ã·h^{k−1}. Its input-output Jacobian is exactly the K-step walk
/// probability, which the nonlinear network satisfies only structurally.
pub fn linear_aggregate(a_tilde: &Mat, h0: &Mat, k: usize) -> Result<Mat> {
    check_stochastic(a_tilde)?;
    if a_tilde.ncols() != h0.nrows() {
        return Err(Error::ShapeMismatch {
            op: "linear_aggregate".into(),
            detail: format!("{}×{} · {}×{}", a_tilde.nrows(), a_tilde.ncols(), h0.nrows(), h0.ncols()),
        });
    }
    let mut h = h0.clone();
    for _ in 0..k {
        h = a_tilde.dot(&h);
    }
    Ok(h)
}

/// One CSV line per node: 1-based id, total observed influence at depth
/// K, and whether any influence reaches a sensor.
pub fn influence_report_csv(transition: &Mat, observed: &[usize], k: usize) -> Result<String> {
    let totals = total_observed_influence(transition, observed, k)?;
    let mut out = String::from("node,total_observed_influence,covered\n");
    for (i, t) in totals.iter().enumerate() {
        out.push_str(&format!(
            "{},{:.12},{}\n",
            i + 1,
            t,
            if *t > 0.0 { "yes" } else { "no" }
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjacency::build_adjacency;
    use crate::feeder::DistanceWeight;
    use crate::stage1::{local_aggregate_layer, ThetaI, StageIDims};
    use crate::stage2::{build_b, mask_embedding};
    use crate::testutil::fixture;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stochastic(n: usize, rng: &mut ChaCha8Rng) -> Mat {
        loop {
            let mut t = Mat::from_shape_fn((n, n), |_| {
                if rng.gen_bool(0.6) {
                    rng.gen_range(0.05..1.0)
                } else {
                    0.0
                }
            });
            let sums: Vec<f64> = (0..n).map(|i| t.row(i).sum()).collect();
            if sums.iter().all(|&s| s > 0.0) {
                for i in 0..n {
                    for j in 0..n {
                        t[(i, j)] /= sums[i];
                    }
                }
                return t;
            }
        }
    }

    fn path3_transition() -> Mat {
        array![[0.0, 1.0, 0.0], [0.5, 0.0, 0.5], [0.0, 1.0, 0.0]]
    }

    #[test]
    fn zero_steps_is_identity() {
        let t = path3_transition();
        let m = influence_matrix(&t, 0).unwrap();
        assert_eq!(m.m, Array2::<f64>::eye(3));
    }

    #[test]
    fn two_step_walk_on_path() {
        let t = path3_transition();
        let m = influence_matrix(&t, 2).unwrap();
        // From the end node: out to the middle, then half back, half on.
        assert!((m.m[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(m.m[(0, 1)], 0.0);
        assert!((m.m[(0, 2)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn walk_rows_stay_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..5 {
            let t = random_stochastic(7, &mut rng);
            let m = influence_matrix(&t, 4).unwrap();
            for i in 0..7 {
                assert!((m.m.row(i).sum() - 1.0).abs() < 1e-10);
                assert!(m.m.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn non_stochastic_input_rejected() {
        let t = array![[0.5, 0.6], [0.5, 0.5]];
        assert!(matches!(influence_matrix(&t, 1), Err(Error::Validation(_))));
        let neg = array![[1.5, -0.5], [0.5, 0.5]];
        assert!(matches!(influence_matrix(&neg, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn oracle_single_edge_and_disconnection() {
        let t = array![[0.3, 0.7], [0.0, 1.0]];
        assert!((path_enumeration_oracle(&t, 0, 1, 1).unwrap() - 0.7).abs() < 1e-15);
        // Two self-absorbing components: no path crosses.
        let split = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(path_enumeration_oracle(&split, 0, 1, 3).unwrap(), 0.0);
    }

    #[test]
    fn oracle_matches_matrix_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..8 {
            let n = rng.gen_range(3..=8);
            let k = rng.gen_range(1..=5);
            let t = random_stochastic(n, &mut rng);
            let m = influence_matrix(&t, k).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let oracle = path_enumeration_oracle(&t, i, j, k).unwrap();
                    assert!(
                        (m.m[(i, j)] - oracle).abs() < 1e-12,
                        "({i}, {j}) power {} vs enumeration {oracle}",
                        m.m[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn oracle_rejects_large_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let t = random_stochastic(6, &mut rng);
        assert!(matches!(
            path_enumeration_oracle(&t, 0, 1, 7),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn full_observation_gives_unit_influence() {
        let t = path3_transition();
        let all: Vec<usize> = (0..3).collect();
        for total in total_observed_influence(&t, &all, 3).unwrap() {
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert_eq!(
            total_observed_influence(&t, &[], 3).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn kernel_adjacency_covers_the_void_node() {
        // Sensors sit 2 hops from the far end of the path; a 1-step walk
        // on the physical graph cannot reach them from there, while the
        // kernel-built adjacency with k_I = 2 jumps the gap.
        let g = fixture("fig3.json");
        let void = 0;
        let observed = g.observed();
        let phys = physical_transition(&g).unwrap();
        let phys_inf = total_observed_influence(&phys, &observed, 1).unwrap();
        assert_eq!(phys_inf[void], 0.0);

        let d = g.shortest_paths(DistanceWeight::Hop);
        let adj = build_adjacency(&d, 2).unwrap();
        let kern_inf = total_observed_influence(&adj.a_tilde, &observed, 1).unwrap();
        assert!(kern_inf[void] > 0.0);
    }

    #[test]
    fn influence_is_monotone_in_observed_set() {
        let g = fixture("feeder36.json");
        let d = g.shortest_paths(DistanceWeight::Hop);
        let adj = build_adjacency(&d, 3).unwrap();
        let small = g.observed();
        let mut big = small.clone();
        for extra in [0usize, 3, 13] {
            if !big.contains(&extra) {
                big.push(extra);
            }
        }
        for k in [1, 2, 3] {
            let a = total_observed_influence(&adj.a_tilde, &small, k).unwrap();
            let b = total_observed_influence(&adj.a_tilde, &big, k).unwrap();
            for i in 0..g.n() {
                assert!(b[i] >= a[i] - 1e-15);
            }
        }
    }

    #[test]
    fn isolated_sample_has_zero_ratio() {
        let b = build_b(
            &[
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            1,
        )
        .unwrap();
        assert_eq!(b.nnz(), 0);
        let s = b.propagation();
        let r = label_influence_ratio(&s, &[0, 0, 1], 0, 2).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn single_neighbor_same_label_ratio_is_one() {
        let b = build_b(&[vec![0.2, 0.8], vec![0.2, 0.8]], 1).unwrap();
        let s = b.propagation();
        for l_steps in [1, 2, 3] {
            let r = label_influence_ratio(&s, &[4, 4], 0, l_steps).unwrap();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_embeddings_raise_mean_label_ratio() {
        // Labels are fault nodes on the 13-node feeder. The masked
        // distributions concentrate on the label's neighborhood, while
        // the raw features drown the label signal under a shared
        // operating-point component, so walks over the raw-feature graph
        // mix labels far more.
        let g = fixture("feeder13.json");
        let n = g.n();
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let samples = 40;
        let labels: Vec<usize> = (0..samples).map(|p| p % n).collect();
        let base: Vec<f64> = (0..30).map(|_| rng.gen_range(0.5..1.0)).collect();
        let mut masked = Vec::with_capacity(samples);
        let mut raw = Vec::with_capacity(samples);
        for &y in &labels {
            let mut z = vec![0.0; n];
            for v in z.iter_mut() {
                *v = rng.gen_range(0.0..0.02);
            }
            z[y] = 0.75 + rng.gen_range(0.0..0.05);
            let sum: f64 = z.iter().sum();
            for v in z.iter_mut() {
                *v /= sum;
            }
            masked.push(mask_embedding(&z, &g).z_hat);
            let row: Vec<f64> = base
                .iter()
                .enumerate()
                .map(|(j, &b)| b + if j == y { 0.05 } else { 0.0 } + rng.gen_range(0.0..0.01))
                .collect();
            raw.push(row);
        }
        let eval: Vec<usize> = (0..samples).collect();
        let b_masked = build_b(&masked, 5).unwrap();
        let b_raw = build_b(&raw, 5).unwrap();
        let r_masked =
            mean_label_influence_ratio(&b_masked.propagation(), &labels, &eval, 2).unwrap();
        let r_raw = mean_label_influence_ratio(&b_raw.propagation(), &labels, &eval, 2).unwrap();
        assert!(
            r_masked > r_raw,
            "masked ratio {r_masked} not above raw ratio {r_raw}"
        );
    }

    #[test]
    fn linear_surrogate_jacobian_is_walk_probability() {
        let g = fixture("feeder13.json");
        let d = g.shortest_paths(DistanceWeight::Hop);
        let adj = build_adjacency(&d, 2).unwrap();
        let n = g.n();
        let k = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let h0 = Mat::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let walk = influence_matrix(&adj.a_tilde, k).unwrap();
        let h = 1e-6;
        for j in [0usize, 5, 12] {
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
                        assert!(
                            (fd - expect).abs() < 1e-6,
                            "∂h[{i},{c}]/∂h0[{j},{col}] = {fd}, walk gives {expect}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn nonlinear_sensitivity_respects_reachability() {
        // The full network adds concatenation and relu, so the Jacobian
        // is no longer the walk probability — but influence still cannot
        // leave the K-step reachability pattern of I + Ã.
        let g = fixture("fig3.json");
        let d = g.shortest_paths(DistanceWeight::Hop);
        let adj = build_adjacency(&d, 1).unwrap();
        let n = g.n();
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let dims = StageIDims::new(n, 2, 4);
        let theta = ThetaI::init(dims, &mut rng);
        let x = Mat::from_shape_fn((n, 6), |_| rng.gen_range(-1.0..1.0));
        let forward = |x: &Mat| -> Mat {
            let h1 = local_aggregate_layer(x, &adj, theta.store.value("w1")).unwrap();
            local_aggregate_layer(&h1, &adj, theta.store.value("w2")).unwrap()
        };
        let baseline = forward(&x);
        // Reachability under self + kernel neighbors, two layers deep.
        let mut reach = Array2::<f64>::eye(n);
        for _ in 0..2 {
            let mut next = reach.clone();
            for i in 0..n {
                for &j in &adj.neighbors[i] {
                    for t in 0..n {
                        if reach[(j, t)] != 0.0 {
                            next[(i, t)] = 1.0;
                        }
                    }
                }
            }
            reach = next;
        }
        for j in 0..n {
            let mut bumped = x.clone();
            for col in 0..6 {
                bumped[(j, col)] += 0.37;
            }
            let out = forward(&bumped);
            for i in 0..n {
                let moved = (0..baseline.ncols())
                    .any(|c| (out[(i, c)] - baseline[(i, c)]).abs() > 1e-12);
                if reach[(i, j)] == 0.0 {
                    assert!(!moved, "node {i} moved on unreachable input {j}");
                }
            }
        }
    }

    #[test]
    fn csv_report_shape() {
        let g = fixture("fig3.json");
        let phys = physical_transition(&g).unwrap();
        let csv = influence_report_csv(&phys, &g.observed(), 1).unwrap();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines[0], "node,total_observed_influence,covered");
        assert_eq!(lines.len(), 1 + g.n());
        assert!(lines[1].starts_with("1,") && lines[1].ends_with(",no"));
        // A sensor node observes itself after one hop? No — but its
        // physical neighbor is observed, so it stays covered.
        assert!(lines.iter().skip(1).any(|l| l.ends_with(",yes")));
    }
}
