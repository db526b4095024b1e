//! Localization metrics and the stratified label split.
//!
//! Classes are the merged label groups of the feeder (1-based). LAR is
//! micro accuracy over the test set; the 1-hop variant also credits a
//! prediction whose class is physically adjacent to the truth.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::FeederGraph;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStats {
    /// 1-based class id.
    pub class: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    /// True positives widened to physically adjacent classes.
    pub tp_adj: usize,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassStats>,
    /// Macro mean of per-class F over classes present in the truth.
    pub f1: f64,
    /// Micro accuracy Σ TP / N.
    pub lar: f64,
    /// Micro accuracy crediting class-adjacent predictions.
    pub lar_1hop: f64,
    /// The literal per-class ratio TP_i/(TP_i+FP_i+TN_i+FN_i) averaged
    /// over truth classes — kept as a debug column; it is bounded by 1/c
    /// and not comparable with the headline LAR.
    pub lar_per_class_mean: f64,
    pub n_test: usize,
}

/// Score 1-based class predictions against the truth.
pub fn compute_metrics(
    truth: &[usize],
    predicted: &[usize],
    g: &FeederGraph,
) -> Result<MetricsReport> {
    if truth.len() != predicted.len() {
        return Err(Error::ShapeMismatch {
            op: "compute_metrics".into(),
            detail: format!("{} truth labels vs {} predictions", truth.len(), predicted.len()),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let c = g.class_count();
    for &l in truth.iter().chain(predicted) {
        if l < 1 || l > c {
            return Err(Error::Validation(format!(
                "label {l} outside class range [1, {c}]"
            )));
        }
    }
    let n = truth.len();
    let mut per_class = Vec::with_capacity(c);
    for class in 1..=c {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        let mut tp_adj = 0;
        for (&t, &p) in truth.iter().zip(predicted) {
            if t == class {
                if p == class {
                    tp += 1;
                    tp_adj += 1;
                } else {
                    fn_ += 1;
                    if g.classes_adjacent(class - 1, p - 1) {
                        tp_adj += 1;
                    }
                }
            } else if p == class {
                fp += 1;
            }
        }
        let tn = n - tp - fp - fn_;
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassStats {
            class,
            tp,
            fp,
            tn,
            fn_,
            tp_adj,
            precision,
            recall,
            f,
        });
    }
    let present: Vec<&ClassStats> = per_class
        .iter()
        .filter(|s| truth.contains(&s.class))
        .collect();
    let f1 = present.iter().map(|s| s.f).sum::<f64>() / present.len() as f64;
    let lar = per_class.iter().map(|s| s.tp).sum::<usize>() as f64 / n as f64;
    let lar_1hop = per_class.iter().map(|s| s.tp_adj).sum::<usize>() as f64 / n as f64;
    let lar_per_class_mean = present
        .iter()
        .map(|s| s.tp as f64 / n as f64)
        .sum::<f64>()
        / present.len() as f64;
    Ok(MetricsReport {
        per_class,
        f1,
        lar,
        lar_1hop,
        lar_per_class_mean,
        n_test: n,
    })
}

/// Split sample indices into (labeled, unlabeled) with per-class
/// stratification: round-half-up of β·count, at least one per class,
/// drawn uniformly under the seed.
pub fn stratified_split(
    labels: &[usize],
    class_count: usize,
    beta: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!("label rate β = {beta} outside (0, 1]")));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); class_count + 1];
    for (idx, &l) in labels.iter().enumerate() {
        if l < 1 || l > class_count {
            return Err(Error::Validation(format!(
                "label {l} outside class range [1, {class_count}]"
            )));
        }
        members[l].push(idx);
    }
    if let Some(empty) = (1..=class_count).find(|&c| members[c].is_empty()) {
        return Err(Error::Validation(format!("class {empty} has no samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = Vec::new();
    for class in 1..=class_count {
        let mut pool = members[class].clone();
        let want = ((beta * pool.len() as f64 + 0.5).floor() as usize)
            .max(1)
            .min(pool.len());
        pool.shuffle(&mut rng);
        labeled.extend_from_slice(&pool[..want]);
    }
    labeled.sort_unstable();
    let mut is_labeled = vec![false; labels.len()];
    for &i in &labeled {
        is_labeled[i] = true;
    }
    let unlabeled: Vec<usize> = (0..labels.len()).filter(|&i| !is_labeled[i]).collect();
    Ok((labeled, unlabeled))
}
