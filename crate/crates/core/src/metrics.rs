//! Top-1 accuracy, one-vs-rest average precision and macro mAP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1_accuracy: f64,
    /// Mean of the defined per-class APs.
    pub macro_map: f64,
    /// `None` for classes without a positive example.
    pub per_class_ap: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub num_samples: usize,
}

/// Area under the precision-recall curve with all-points interpolation:
/// `Σ (r_k − r_{k−1}) · max_{j≥k} p_j` over the descending-score ranking.
/// Tied scores are ranked by input order. `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut points: Vec<f64> = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        if positive[i] {
            tp += 1;
        }
        points.push(tp as f64 / (k + 1) as f64);
    }
    let mut best = 0.0f64;
    for p in points.iter_mut().rev() {
        best = best.max(*p);
        *p = best;
    }
    // each positive advances recall by exactly 1/total
    let mut ap = 0.0;
    for (&i, p) in order.iter().zip(points) {
        if positive[i] {
            ap += p / total as f64;
        }
    }
    Some(ap)
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Metrics from per-sample class scores (any monotone transform of
/// probabilities) and true labels.
pub fn evaluate_scores(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::EmptySplit("no samples to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != classes) {
        return Err(Error::Shape(format!("score row of width {} for {classes} classes", row.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Index(format!("label {l} outside {classes} classes")));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (row, &l) in scores.iter().zip(labels) {
        confusion[l][argmax(row)] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class_ap: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            average_precision(&col, &pos)
        })
        .collect();
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let macro_map = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MetricsReport {
        top1_accuracy: correct as f64 / labels.len() as f64,
        macro_map,
        per_class_ap,
        confusion,
        num_samples: labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Enumerate every cutoff, take interpolated precision at each recall level.
    fn brute_force_ap(scores: &[f64], positive: &[bool]) -> f64 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let total = positive.iter().filter(|&&p| p).count() as f64;
        let pr: Vec<(f64, f64)> = (1..=order.len())
            .map(|k| {
                let tp = order[..k].iter().filter(|&&i| positive[i]).count() as f64;
                (tp / total, tp / k as f64)
            })
            .collect();
        let mut ap = 0.0;
        let mut last = 0.0;
        for &(r, _) in &pr {
            if r > last {
                let interp = pr.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
                ap += (r - last) * interp;
                last = r;
            }
        }
        ap
    }

    #[test]
    fn perfect_and_reversed() {
        let labels = vec![0, 1, 0, 1];
        let perfect: Vec<Vec<f64>> = labels.iter().map(|&l| if l == 0 { vec![0.9, 0.1] } else { vec![0.2, 0.8] }).collect();
        let r = evaluate_scores(&perfect, &labels, 2).unwrap();
        assert_eq!((r.top1_accuracy, r.macro_map), (1.0, 1.0));
        let reversed: Vec<Vec<f64>> = perfect.iter().map(|r| vec![r[1], r[0]]).collect();
        assert_eq!(evaluate_scores(&reversed, &labels, 2).unwrap().top1_accuracy, 0.0);
        assert!(matches!(evaluate_scores(&[], &[], 2), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn hand_built_three_class_ranking() {
        let scores = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.5, 0.4, 0.1],
            vec![0.1, 0.6, 0.3],
            vec![0.3, 0.3, 0.4],
            vec![0.2, 0.1, 0.7],
            vec![0.4, 0.5, 0.1],
        ];
        let labels = vec![0, 1, 1, 0, 2, 2];
        let r = evaluate_scores(&scores, &labels, 3).unwrap();
        // class 0 ranking: s0(+) s1 s5 s3(+) … → 1·½ + ½·½
        assert!((r.per_class_ap[0].unwrap() - 0.75).abs() < 1e-15);
        for c in 0..3 {
            let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            assert_eq!(r.per_class_ap[c].unwrap(), brute_force_ap(&col, &pos));
        }
        let mean = r.per_class_ap.iter().flatten().sum::<f64>() / 3.0;
        assert_eq!(r.macro_map, mean);
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 6);
    }

    #[test]
    fn class_without_positives_is_skipped() {
        let r = evaluate_scores(&[vec![0.9, 0.1, 0.0], vec![0.2, 0.8, 0.0]], &[0, 1], 3).unwrap();
        assert_eq!(r.per_class_ap[2], None);
        assert_eq!(r.macro_map, 1.0);
    }

    proptest! {
        #[test]
        fn matches_brute_force(raw in proptest::collection::vec((0u8..20, any::<bool>()), 1..40)) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 20.0).collect();
            let pos: Vec<bool> = raw.iter().map(|r| r.1).collect();
            match average_precision(&scores, &pos) {
                None => prop_assert!(!pos.contains(&true)),
                Some(ap) => {
                    prop_assert!((0.0..=1.0).contains(&ap));
                    prop_assert!((ap - brute_force_ap(&scores, &pos)).abs() < 1e-12);
                }
            }
        }
    }
}
