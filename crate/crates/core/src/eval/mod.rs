//! Calibration, ranking and rationale-agreement metrics.

mod report;

pub use report::{
    evaluate, explain, explain_rationale, predict_all, reliability_csv, to_dot, DecodedGraph, Explanation, ExplainOptions, GraphRecord, Metrics,
    RationaleExplanation, RELIABILITY_CSV_HEADER,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::encode;
use crate::error::{ensure, Error, Result};
use crate::graph::Dataset;
use crate::model::GraphFnp;
use crate::nn::Mat;
use crate::rationale::rationale_embeddings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Zero for an empty bin.
    pub avg_confidence: f64,
    pub avg_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Fraction in [0, 1]; multiply by 100 for the percent convention.
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
    pub num_bins: usize,
}

/// Index of the bin `(b/B, (b+1)/B]` holding `c`. The product `c·B` can land
/// on the wrong side of a boundary, so the guess is nudged against the exact
/// boundary values.
fn bin_index(c: f64, num_bins: usize) -> usize {
    let b = num_bins as f64;
    let mut i = ((c * b).ceil() as usize).clamp(1, num_bins) - 1;
    while i > 0 && c <= i as f64 / b {
        i -= 1;
    }
    while i + 1 < num_bins && c > (i + 1) as f64 / b {
        i += 1;
    }
    i
}

/// Expected calibration error over `num_bins` equal-width bins on (0, 1].
pub fn ece(confidences: &[f64], correct: &[bool], num_bins: usize) -> Result<CalibrationReport> {
    ensure!(!confidences.is_empty(), Argument, "ece of an empty prediction set");
    ensure!(confidences.len() == correct.len(), Argument, "{} confidences but {} outcomes", confidences.len(), correct.len());
    ensure!(num_bins >= 1, Argument, "num_bins must be >= 1");
    if let Some(c) = confidences.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
        return Err(Error::Argument(format!("confidence {c} outside (0, 1]")));
    }
    let mut conf_sum = vec![0.0; num_bins];
    let mut hits = vec![0usize; num_bins];
    let mut counts = vec![0usize; num_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let i = bin_index(c, num_bins);
        conf_sum[i] += c;
        hits[i] += usize::from(ok);
        counts[i] += 1;
    }
    let n = confidences.len() as f64;
    let b = num_bins as f64;
    let mut total = 0.0;
    let bins = (0..num_bins)
        .map(|i| {
            let (avg_confidence, avg_accuracy) = if counts[i] == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[i] / counts[i] as f64, hits[i] as f64 / counts[i] as f64)
            };
            total += counts[i] as f64 / n * (avg_confidence - avg_accuracy).abs();
            CalibrationBin {
                lower: i as f64 / b,
                upper: (i + 1) as f64 / b,
                count: counts[i],
                avg_confidence,
                avg_accuracy,
            }
        })
        .collect();
    Ok(CalibrationReport { ece: total, bins, num_bins })
}

/// Area under the ROC curve from the rank statistic, with tied scores
/// sharing their average rank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    ensure!(scores.len() == labels.len(), Argument, "{} scores but {} labels", scores.len(), labels.len());
    ensure!(scores.iter().all(|s| s.is_finite()), Argument, "scores must be finite");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    ensure!(pos > 0 && neg > 0, Argument, "auroc needs both classes ({pos} positive, {neg} negative)");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks are 1-based: the run covers start+1 ..= end.
        let midrank = (start + 1 + end) as f64 / 2.0;
        rank_sum += midrank * order[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    #[default]
    Macro,
    Micro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RF1Report {
    pub k: usize,
    pub f1: f64,
    pub per_class_f1: Vec<f64>,
    pub distance: Distance,
    pub average: F1Average,
}

/// `1 − cos(a, b)`; a zero vector is orthogonal to everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

/// Majority class among the `k` nearest rationales. Distance ties are broken
/// by class so the result does not depend on the order of the bank; vote
/// ties go to the lower class.
pub fn knn_class(query: &[f64], rationales: &[Vec<f64>], class_of: &[usize], num_classes: usize, k: usize) -> Result<usize> {
    ensure!(rationales.len() == class_of.len(), Argument, "{} rationales but {} classes", rationales.len(), class_of.len());
    ensure!(k >= 1 && k <= rationales.len(), Argument, "k = {k} outside [1, {}]", rationales.len());
    let mut scored: Vec<(f64, usize)> = rationales.iter().zip(class_of).map(|(r, &c)| (cosine_distance(query, r), c)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes = vec![0usize; num_classes];
    for &(_, c) in &scored[..k] {
        ensure!(c < num_classes, Argument, "rationale class {c} outside [0, {num_classes})");
        votes[c] += 1;
    }
    Ok((0..num_classes).reduce(|best, c| if votes[c] > votes[best] { c } else { best }).unwrap_or(0))
}

/// F1 over classes. Classes absent from both predictions and labels score
/// zero in `per_class` and are left out of the macro average.
pub fn f1_scores(predicted: &[usize], truth: &[usize], num_classes: usize, average: F1Average) -> Result<(f64, Vec<f64>)> {
    ensure!(predicted.len() == truth.len() && !truth.is_empty(), Argument, "f1 needs equal, non-empty label lists");
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        ensure!(p < num_classes && t < num_classes, Argument, "label outside [0, {num_classes})");
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut per_class = vec![0.0; num_classes];
    let mut present = 0usize;
    let mut sum = 0.0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom > 0 {
            per_class[c] = 2.0 * tp[c] as f64 / denom as f64;
            sum += per_class[c];
            present += 1;
        }
    }
    let f1 = match average {
        F1Average::Macro => sum / present.max(1) as f64,
        // With one label per item, micro-F1 is accuracy.
        F1Average::Micro => tp.iter().sum::<usize>() as f64 / truth.len() as f64,
    };
    Ok((f1, per_class))
}

/// Rationale-F1: each test graph's embedding mean is labelled by its `k`
/// nearest rationale means under cosine distance.
pub fn rationale_f1(model: &GraphFnp, test: &Dataset, k: usize) -> Result<RF1Report> {
    rationale_f1_with(model, test, k, F1Average::Macro)
}

pub fn rationale_f1_with(model: &GraphFnp, test: &Dataset, k: usize, average: F1Average) -> Result<RF1Report> {
    model.require_rationales()?;
    ensure!(!test.is_empty(), Argument, "rationale_f1 on an empty dataset");
    let means: Vec<Vec<f64>> = rationale_embeddings(model).into_iter().map(|e| e.mean).collect();
    ensure!(k >= 1 && k <= means.len(), Argument, "k = {k} outside [1, {}]", means.len());
    let class_of = &model.rationales.class_of;
    let num_classes = model.config.num_classes;
    let predicted = test
        .graphs
        .par_iter()
        .map(|g| knn_class(&encode(model, g)?.1.mean, &means, class_of, num_classes, k))
        .collect::<Result<Vec<usize>>>()?;
    let truth: Vec<usize> = test.graphs.iter().map(|g| g.label).collect();
    let (f1, per_class_f1) = f1_scores(&predicted, &truth, num_classes, average)?;
    Ok(RF1Report {
        k,
        f1,
        per_class_f1,
        distance: Distance::Cosine,
        average,
    })
}

/// `0.25 · 1.1^i` up to 4.0, plus 1.0 so the identity is always a candidate.
pub fn default_temperature_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..).map(|i| 0.25 * 1.1f64.powi(i)).take_while(|t| *t <= 4.0).collect();
    grid.push(1.0);
    grid.sort_by(f64::total_cmp);
    grid
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows(logits: &Mat, temperature: f64) -> Mat {
    let mut out = logits / temperature;
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mean negative log-likelihood of `labels` under `softmax(logits / T)`.
pub fn nll(logits: &Mat, labels: &[usize], temperature: f64) -> Result<f64> {
    ensure!(logits.nrows() == labels.len() && !labels.is_empty(), Argument, "{} logit rows for {} labels", logits.nrows(), labels.len());
    ensure!(temperature > 0.0 && temperature.is_finite(), Argument, "temperature must be positive, got {temperature}");
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        ensure!(y < row.len(), Argument, "label {y} outside [0, {})", row.len());
        let scaled: Vec<f64> = row.iter().map(|x| x / temperature).collect();
        let max = scaled.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - scaled[y];
    }
    Ok(total / labels.len() as f64)
}

/// Grid temperature with the lowest NLL; the first of equal minima wins.
pub fn temperature_scale(logits: &Mat, labels: &[usize], grid: &[f64]) -> Result<f64> {
    ensure!(!grid.is_empty(), Argument, "empty temperature grid");
    ensure!(logits.iter().all(|x| x.is_finite()), Argument, "logits must be finite");
    let mut best = (f64::INFINITY, grid[0]);
    for &t in grid {
        let value = nll(logits, labels, t)?;
        if value < best.0 {
            best = (value, t);
        }
    }
    Ok(best.1)
}

/// Logits recovered from averaged probabilities, floored so a zero
/// probability stays finite.
pub fn logits_from_probs(probs: &[Vec<f64>]) -> Mat {
    let k = probs.first().map_or(0, Vec::len);
    Mat::from_shape_fn((probs.len(), k), |(i, j)| probs[i][j].max(1e-300).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scans bins by their interval bounds and averages per bin separately.
    fn brute_force_ece(conf: &[f64], correct: &[bool], num_bins: usize) -> f64 {
        let b = num_bins as f64;
        let mut out = 0.0;
        for i in 0..num_bins {
            let (lo, hi) = (i as f64 / b, (i + 1) as f64 / b);
            let members: Vec<usize> = (0..conf.len()).filter(|&j| conf[j] > lo && conf[j] <= hi).collect();
            if members.is_empty() {
                continue;
            }
            let m = members.len() as f64;
            let c = members.iter().map(|&j| conf[j]).sum::<f64>() / m;
            let a = members.iter().filter(|&&j| correct[j]).count() as f64 / m;
            out += m / conf.len() as f64 * (c - a).abs();
        }
        out
    }

    fn brute_force_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn ece_hand_cases() {
        let r = ece(&[1.0, 1.0, 0.5, 0.5], &[true, false, true, false], 2).unwrap();
        assert_eq!(r.ece, 0.25);
        assert_eq!(r.bins[0].count, 2);
        assert_eq!(r.bins[1].count, 2);
        assert_eq!(ece(&[1.0; 5], &[true; 5], 10).unwrap().ece, 0.0);
    }

    #[test]
    fn ece_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..1000 {
            let n = rng.random_range(1..60);
            let bins = rng.random_range(1..20);
            // Every few cases, snap confidences onto bin edges.
            let conf: Vec<f64> = (0..n)
                .map(|_| {
                    if case % 4 == 0 {
                        rng.random_range(1..=bins) as f64 / bins as f64
                    } else {
                        1.0 - rng.random::<f64>()
                    }
                })
                .collect();
            let correct: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            let r = ece(&conf, &correct, bins).unwrap();
            assert!((r.ece - brute_force_ece(&conf, &correct, bins)).abs() <= 1e-12, "case {case}");
            assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), n);
        }
    }

    #[test]
    fn ece_boundaries_are_right_closed() {
        assert_eq!(bin_index(0.3, 10), 2);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(1e-9, 10), 0);
    }

    #[test]
    fn ece_rejects_bad_input() {
        assert!(ece(&[], &[], 10).is_err());
        assert!(ece(&[0.5], &[true, false], 10).is_err());
        assert!(ece(&[0.0], &[true], 10).is_err());
        assert!(ece(&[1.5], &[true], 10).is_err());
        assert!(ece(&[0.5], &[true], 0).is_err());
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        let s = [0.3, 0.7, 0.7, 0.1, 0.9, 0.3];
        let l = [true, false, true, false, true, false];
        assert!((auroc(&s, &l).unwrap() - brute_force_auroc(&s, &l)).abs() < 1e-15);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    proptest! {
        #[test]
        fn auroc_matches_pairs_and_is_rank_invariant(
            data in prop::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((a - brute_force_auroc(&scores, &labels)).abs() < 1e-12);
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() - 3.0).collect();
            prop_assert_eq!(a, auroc(&warped, &labels).unwrap());
        }

        #[test]
        fn temperature_never_changes_argmax(
            values in prop::collection::vec(-8.0f64..8.0, 12),
            t in 0.05f64..20.0
        ) {
            let logits = Mat::from_shape_vec((4, 3), values).unwrap();
            let scaled = softmax_rows(&logits, t);
            for (a, b) in logits.rows().into_iter().zip(scaled.rows()) {
                let la: Vec<f64> = a.to_vec();
                let lb: Vec<f64> = b.to_vec();
                prop_assert_eq!(crate::fnp::argmax(&la), crate::fnp::argmax(&lb));
            }
        }

        #[test]
        fn fitted_temperature_beats_identity(
            values in prop::collection::vec(-5.0f64..5.0, 20),
            labels in prop::collection::vec(0usize..2, 10)
        ) {
            let logits = Mat::from_shape_vec((10, 2), values).unwrap();
            let grid = default_temperature_grid();
            let t = temperature_scale(&logits, &labels, &grid).unwrap();
            prop_assert!(nll(&logits, &labels, t).unwrap() <= nll(&logits, &labels, 1.0).unwrap());
        }
    }

    #[test]
    fn temperature_grid_shape() {
        let grid = default_temperature_grid();
        assert_eq!(grid[0], 0.25);
        assert!(grid.contains(&1.0));
        assert!(*grid.last().unwrap() <= 4.0 && *grid.last().unwrap() > 4.0 / 1.1);
        assert!(grid.windows(2).all(|w| w[0] <= w[1]));
        assert!(temperature_scale(&array![[1.0, 0.0]], &[0], &[]).is_err());
    }

    #[test]
    fn temperature_on_calibrated_logits() {
        // Labels drawn from softmax(logits) leave T = 1 near optimal.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 4000;
        let logits = Mat::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
        let probs = softmax_rows(&logits, 1.0);
        let labels: Vec<usize> = (0..n).map(|i| usize::from(rng.random::<f64>() < probs[[i, 1]])).collect();
        let t = temperature_scale(&logits, &labels, &default_temperature_grid()).unwrap();
        assert!(nll(&logits, &labels, t).unwrap() <= nll(&logits, &labels, 1.0).unwrap());
        assert!((0.8..1.25).contains(&t), "t = {t}");
    }

    #[test]
    fn knn_geometry_and_ties() {
        let bank = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(knn_class(&[0.9, 0.1], &bank, &[0, 1], 2, 1).unwrap(), 0);
        assert_eq!(knn_class(&[0.1, 0.9], &bank, &[0, 1], 2, 1).unwrap(), 1);
        // k = |R| on a balanced bank is a forced tie.
        assert_eq!(knn_class(&[0.1, 0.9], &bank, &[0, 1], 2, 2).unwrap(), 0);
        // Reordering the bank leaves the answer alone.
        let swapped = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(knn_class(&[0.1, 0.9], &swapped, &[1, 0], 2, 1).unwrap(), 1);
        assert!(knn_class(&[1.0, 0.0], &bank, &[0, 1], 2, 3).is_err());
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }

    #[test]
    fn f1_definitions() {
        let (f1, per) = f1_scores(&[0, 1, 1, 0], &[0, 1, 1, 0], 2, F1Average::Macro).unwrap();
        assert_eq!((f1, per), (1.0, vec![1.0, 1.0]));
        let (f1, per) = f1_scores(&[0, 0, 0, 0], &[0, 0, 1, 1], 2, F1Average::Macro).unwrap();
        assert!((per[0] - 2.0 / 3.0).abs() < 1e-15 && per[1] == 0.0);
        assert!((f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_scores(&[0, 0, 0, 0], &[0, 0, 1, 1], 2, F1Average::Micro).unwrap().0, 0.5);
    }

    #[test]
    fn rationale_f1_on_placed_embeddings() {
        use crate::graph::generate_ba_motif_dataset;
        use crate::model::{Ablation, ModelConfig};
        let ds = generate_ba_motif_dataset(8, (6, 8), 0).unwrap();
        let mut cfg = ModelConfig::for_dataset(&ds);
        cfg.latent_dim = 4;
        cfg.hidden_dim = 8;
        cfg.rationale_dim = 4;
        cfg.rationales_per_class = 2;
        let model = GraphFnp::new(cfg.clone(), 1).unwrap();
        let r = rationale_f1(&model, &ds, 1).unwrap();
        assert!((0.0..=1.0).contains(&r.f1));
        assert_eq!(r, rationale_f1(&model, &ds, 1).unwrap());
        // k = |R| with a balanced bank predicts class 0 everywhere.
        let all = rationale_f1_with(&model, &ds, 4, F1Average::Micro).unwrap();
        assert_eq!(all.f1, 0.5);
        assert!(rationale_f1(&model, &ds, 5).is_err());
        cfg.ablation.insert(Ablation::NoRationales);
        let plain = GraphFnp::new(cfg, 1).unwrap();
        assert!(matches!(rationale_f1(&plain, &ds, 1), Err(Error::Unsupported(_))));
    }
}
