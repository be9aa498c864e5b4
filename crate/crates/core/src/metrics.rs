//! Evaluation metrics: Precision@k over slices, CLIP score, worst-group and
//! mean accuracy, AUROC.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SliceDataset;
use crate::matrix::{dot, normalized, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("ground truth has no slices")]
    EmptyGroundTruth,
    #[error("ground-truth slice {0} has no members")]
    EmptyGroundTruthSlice(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("evaluated set is empty")]
    EmptySet,
    #[error("dimension mismatch: expected {expected}, found {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("sample {id} has no {key:?} group tag")]
    MissingGroupTag { id: String, key: String },
    #[error("sample {0} has a group tag outside {{0, 1}} or a label outside the class list")]
    BadGroupTag(String),
    #[error("group cell {0} is empty")]
    EmptyCell(String),
    #[error("only one class present")]
    SingleClass,
    #[error("length mismatch: expected {expected}, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite score at position {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedSlice {
    pub name: String,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthSlices {
    pub slices: Vec<NamedSlice>,
}

/// Predicted slices with members ordered most-likely first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedSlices {
    pub slices: Vec<NamedSlice>,
}

/// Mean over ground-truth slices of the best top-k overlap among predicted
/// slices. A predicted slice shorter than k is scored over its full length.
pub fn precision_at_k(gt: &GroundTruthSlices, pred: &PredictedSlices, k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    if gt.slices.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let mut total = 0.0;
    for s in &gt.slices {
        if s.members.is_empty() {
            return Err(MetricsError::EmptyGroundTruthSlice(s.name.clone()));
        }
        let set: HashSet<usize> = s.members.iter().copied().collect();
        let best = pred
            .slices
            .iter()
            .map(|p| {
                let top = &p.members[..k.min(p.members.len())];
                if top.is_empty() {
                    0.0
                } else {
                    top.iter().filter(|m| set.contains(m)).count() as f64 / top.len() as f64
                }
            })
            .fold(0.0, f64::max);
        total += best;
    }
    Ok(total / gt.slices.len() as f64)
}

fn mean_cosine(attr: &[f64], rows: &Matrix) -> Result<f64, MetricsError> {
    if rows.rows() == 0 {
        return Err(MetricsError::EmptySet);
    }
    if rows.cols() != attr.len() {
        return Err(MetricsError::DimensionMismatch { expected: attr.len(), actual: rows.cols() });
    }
    let a = normalized(attr);
    Ok((0..rows.rows()).map(|i| dot(&a, &normalized(rows.row(i)))).sum::<f64>() / rows.rows() as f64)
}

/// Mean cosine to the correctly classified samples minus mean cosine to the
/// misclassified ones.
pub fn clip_score(attr: &[f64], correct: &Matrix, wrong: &Matrix) -> Result<f64, MetricsError> {
    Ok(mean_cosine(attr, correct)? - mean_cosine(attr, wrong)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAccuracy {
    pub cell: String,
    pub size: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub worst: f64,
    pub worst_cell: String,
    pub cells: Vec<CellAccuracy>,
}

fn check_predictions(dataset: &SliceDataset, predictions: &[usize]) -> Result<(), MetricsError> {
    if dataset.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    if predictions.len() != dataset.len() {
        return Err(MetricsError::LengthMismatch { expected: dataset.len(), actual: predictions.len() });
    }
    Ok(())
}

/// Accuracy per (class, group values...) cell and the minimum over cells.
/// Every class × tag-combination cell must be populated.
pub fn worst_group_accuracy_multi(
    dataset: &SliceDataset,
    predictions: &[usize],
    group_keys: &[&str],
) -> Result<GroupAccuracy, MetricsError> {
    check_predictions(dataset, predictions)?;
    // (class, tag values) -> (correct, total)
    let mut cells: BTreeMap<(usize, Vec<u8>), (usize, usize)> = BTreeMap::new();
    for class in 0..dataset.n_classes() {
        for combo in 0..(1usize << group_keys.len()) {
            let tags = (0..group_keys.len()).map(|b| ((combo >> (group_keys.len() - 1 - b)) & 1) as u8).collect();
            cells.insert((class, tags), (0, 0));
        }
    }
    for (s, &p) in dataset.samples.iter().zip(predictions) {
        let tags = group_keys
            .iter()
            .map(|k| {
                s.groups
                    .get(*k)
                    .copied()
                    .ok_or_else(|| MetricsError::MissingGroupTag { id: s.id.clone(), key: k.to_string() })
            })
            .collect::<Result<Vec<u8>, _>>()?;
        let e = cells
            .get_mut(&(s.label, tags))
            .ok_or_else(|| MetricsError::BadGroupTag(s.id.clone()))?;
        e.1 += 1;
        if p == s.label {
            e.0 += 1;
        }
    }
    let mut out = Vec::with_capacity(cells.len());
    for ((class, tags), (correct, total)) in cells {
        let mut name = format!("class={}", dataset.classes[class]);
        for (k, v) in group_keys.iter().zip(&tags) {
            name.push_str(&format!(",{k}={v}"));
        }
        if total == 0 {
            return Err(MetricsError::EmptyCell(name));
        }
        out.push(CellAccuracy { cell: name, size: total, accuracy: correct as f64 / total as f64 });
    }
    let worst = out
        .iter()
        .min_by(|a, b| a.accuracy.total_cmp(&b.accuracy))
        .expect("at least one class");
    Ok(GroupAccuracy { worst: worst.accuracy, worst_cell: worst.cell.clone(), cells: out })
}

pub fn worst_group_accuracy(
    dataset: &SliceDataset,
    predictions: &[usize],
    group_key: &str,
) -> Result<GroupAccuracy, MetricsError> {
    worst_group_accuracy_multi(dataset, predictions, &[group_key])
}

pub fn mean_accuracy(dataset: &SliceDataset, predictions: &[usize]) -> Result<f64, MetricsError> {
    check_predictions(dataset, predictions)?;
    let correct = dataset.samples.iter().zip(predictions).filter(|(s, &p)| s.label == p).count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Mann-Whitney AUROC from rank sums with mid-ranks for ties:
/// P(score⁺ > score⁻) + ½·P(tie).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { expected: scores.len(), actual: labels.len() });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // rank sums are kept doubled so every mid-rank stays an integer
    let mut pos_rank_sum2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mid2 = (start + 1 + end) as u128; // 2 × mean of ranks start+1..=end
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] != 0).count() as u128;
        pos_rank_sum2 += mid2 * pos_in_group;
        start = end;
    }
    let n_pos = n_pos as u128;
    let u2 = pos_rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EmbeddingMatrix, SampleRecord, Split};
    use proptest::prelude::*;

    fn slice(name: &str, m: &[usize]) -> NamedSlice {
        NamedSlice { name: name.into(), members: m.to_vec() }
    }

    #[test]
    fn precision_examples() {
        let gt = GroundTruthSlices { slices: vec![slice("g", &(0..10).collect::<Vec<_>>())] };
        let pred = PredictedSlices { slices: vec![slice("p", &(0..20).collect::<Vec<_>>())] };
        assert_eq!(precision_at_k(&gt, &pred, 10).unwrap(), 1.0);
        let disjoint = PredictedSlices { slices: vec![slice("p", &[50, 51, 52])] };
        assert_eq!(precision_at_k(&gt, &disjoint, 10).unwrap(), 0.0);
        // shorter predicted slice is scored over its length
        let short = PredictedSlices { slices: vec![slice("p", &[1, 2, 99])] };
        assert!((precision_at_k(&gt, &short, 10).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(precision_at_k(&GroundTruthSlices::default(), &pred, 10), Err(MetricsError::EmptyGroundTruth));
        assert_eq!(precision_at_k(&gt, &pred, 0), Err(MetricsError::InvalidK));
    }

    #[test]
    fn clip_examples() {
        let a = [1.0, 0.0];
        let c = Matrix::from_rows(&[[1.0, 0.0]]);
        let w = Matrix::from_rows(&[[0.0, 1.0]]);
        assert_eq!(clip_score(&a, &c, &w).unwrap(), 1.0);
        assert_eq!(clip_score(&a, &c, &c).unwrap(), 0.0);
        assert_eq!(clip_score(&[0.0, 0.0, 1.0], &Matrix::from_rows(&[[1.0, 2.0, 0.0]]), &Matrix::from_rows(&[[3.0, 0.0, 0.0]])).unwrap(), 0.0);
        assert_eq!(clip_score(&a, &Matrix::zeros(0, 2), &w), Err(MetricsError::EmptySet));
    }

    fn tagged(rows: &[(usize, u8, usize)]) -> (SliceDataset, Vec<usize>) {
        let ds = SliceDataset {
            name: "t".into(),
            classes: vec!["a".into(), "b".into()],
            split: Split::Test,
            samples: rows
                .iter()
                .enumerate()
                .map(|(i, &(label, g, _))| SampleRecord {
                    id: format!("s{i}"),
                    label,
                    prediction: label,
                    score: None,
                    groups: [("g".to_string(), g)].into_iter().collect(),
                })
                .collect(),
            features: EmbeddingMatrix::new(rows.len(), 1, vec![0.0; rows.len()]).unwrap(),
            vlr_image: None,
        };
        (ds, rows.iter().map(|r| r.2).collect())
    }

    #[test]
    fn wga_examples() {
        let (ds, pred) = tagged(&[(0, 0, 0), (0, 1, 0), (0, 1, 1), (1, 0, 1), (1, 1, 1)]);
        let g = worst_group_accuracy(&ds, &pred, "g").unwrap();
        assert_eq!(g.worst, 0.5);
        assert_eq!(g.worst_cell, "class=a,g=1");
        assert_eq!(g.cells.len(), 4);
        let perfect: Vec<usize> = ds.labels();
        assert_eq!(worst_group_accuracy(&ds, &perfect, "g").unwrap().worst, 1.0);
        assert!(matches!(worst_group_accuracy(&ds, &pred, "h"), Err(MetricsError::MissingGroupTag { .. })));
        let (ds, pred) = tagged(&[(0, 0, 0), (0, 1, 0), (1, 0, 1)]);
        assert_eq!(worst_group_accuracy(&ds, &pred, "g"), Err(MetricsError::EmptyCell("class=b,g=1".into())));
    }

    #[test]
    fn mean_accuracy_examples() {
        let rows: Vec<(usize, u8, usize)> = (0..10).map(|i| (i % 2, 0, if i < 7 { i % 2 } else { 1 - i % 2 })).collect();
        let (ds, pred) = tagged(&rows);
        assert!((mean_accuracy(&ds, &pred).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(mean_accuracy(&ds, &ds.labels()).unwrap(), 1.0);
        let wrong: Vec<usize> = ds.labels().iter().map(|l| 1 - l).collect();
        assert_eq!(mean_accuracy(&ds, &wrong).unwrap(), 0.0);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.5, 0.4], &[1, 1]), Err(MetricsError::SingleClass));
        assert_eq!(auroc(&[f64::NAN, 0.4], &[1, 0]), Err(MetricsError::NonFinite(0)));
    }

    fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn auroc_matches_pairs_and_is_rank_invariant(
            data in prop::collection::vec((0i32..20, 0u8..2), 2..80),
        ) {
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 7.0).collect();
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((a - pairwise_auroc(&scores, &labels)).abs() <= 1e-12);
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 1.0).collect();
            prop_assert_eq!(a, auroc(&transformed, &labels).unwrap());
        }

        #[test]
        fn precision_bounded_and_monotone(
            gt in prop::collection::vec(prop::collection::vec(0usize..30, 1..10), 1..4),
            pred in prop::collection::vec(prop::collection::vec(0usize..30, 0..10), 1..5),
            extra in prop::collection::vec(0usize..30, 0..10),
            k in 1usize..12,
        ) {
            let gt = GroundTruthSlices { slices: gt.iter().enumerate().map(|(i, m)| slice(&i.to_string(), m)).collect() };
            let dedup = |m: &Vec<usize>| { let mut seen = HashSet::new(); m.iter().copied().filter(|x| seen.insert(*x)).collect::<Vec<_>>() };
            let mut p = PredictedSlices { slices: pred.iter().enumerate().map(|(i, m)| slice(&i.to_string(), &dedup(m))).collect() };
            let before = precision_at_k(&gt, &p, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&before));
            p.slices.push(slice("extra", &dedup(&extra)));
            prop_assert!(precision_at_k(&gt, &p, k).unwrap() >= before);
        }

        #[test]
        fn clip_is_antisymmetric(
            a in prop::collection::vec(-1.0f64..1.0, 3),
            c in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..6),
            w in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..6),
        ) {
            let c = Matrix::from_rows(&c);
            let w = Matrix::from_rows(&w);
            prop_assert_eq!(clip_score(&a, &c, &w).unwrap(), -clip_score(&a, &w, &c).unwrap());
        }

        #[test]
        fn wga_never_exceeds_mean(rows in prop::collection::vec((0usize..2, 0u8..2, 0usize..2), 4..60)) {
            let (ds, pred) = tagged(&rows);
            if let Ok(g) = worst_group_accuracy(&ds, &pred, "g") {
                prop_assert!(g.worst <= mean_accuracy(&ds, &pred).unwrap() + 1e-15);
            }
        }
    }
}
