//! Correct-vs-wrong mean difference in the projected space and top-K sentence retrieval.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SliceDataset, TextCorpus};
use crate::matrix::{dot, mean_rows, normalized, Matrix};

pub const DEFAULT_TOP_K_NATURAL: usize = 200;
pub const DEFAULT_TOP_K_MEDICAL: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("evaluated sample set is empty")]
    EmptySet,
    #[error("row {index} does not belong to class {class_label}")]
    NotClassMember { index: usize, class_label: usize },
    #[error("class {class_label} has {n_correct} correct and {n_wrong} misclassified samples; need at least one of each")]
    DegenerateClass {
        class_label: usize,
        n_correct: usize,
        n_wrong: usize,
    },
    #[error("dimension mismatch: expected {expected}, found {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// How two vectors are compared everywhere in the pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Raw inner product.
    Dot,
    /// Inner product of l2-normalized vectors.
    #[default]
    Cosine,
}

impl Similarity {
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Dot => dot(a, b),
            Similarity::Cosine => dot(&normalized(a), &normalized(b)),
        }
    }

    /// Applies this mode's normalization to a vector.
    pub fn prepare(self, v: &[f64]) -> Vec<f64> {
        match self {
            Similarity::Dot => v.to_vec(),
            Similarity::Cosine => normalized(v),
        }
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::Dot => "dot",
            Similarity::Cosine => "cosine",
        })
    }
}

impl FromStr for Similarity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dot" => Ok(Similarity::Dot),
            "cosine" => Ok(Similarity::Cosine),
            other => Err(format!("unknown similarity mode {other:?} (expected dot|cosine)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaVector {
    pub class_label: usize,
    pub values: Vec<f64>,
    pub n_correct: usize,
    pub n_wrong: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSentence {
    #[serde(rename = "id")]
    pub sentence_id: String,
    pub text: String,
    pub similarity: f64,
    pub rank: usize,
}

/// Error rate over the members of a class, or over the whole class when `members` is `None`.
pub fn class_error_rate(
    dataset: &SliceDataset,
    class_label: usize,
    members: Option<&[usize]>,
) -> Result<f64, RetrievalError> {
    let owned;
    let members = match members {
        Some(m) => m,
        None => {
            owned = dataset.class_members(class_label);
            &owned
        }
    };
    if members.is_empty() {
        return Err(RetrievalError::EmptySet);
    }
    let mut wrong = 0usize;
    for &i in members {
        let s = &dataset.samples[i];
        if s.label != class_label {
            return Err(RetrievalError::NotClassMember { index: i, class_label });
        }
        if !s.is_correct() {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / members.len() as f64)
}

pub fn mean_difference(
    projected: &Matrix,
    dataset: &SliceDataset,
    class_label: usize,
) -> Result<DeltaVector, RetrievalError> {
    if projected.rows() != dataset.len() {
        return Err(RetrievalError::DimensionMismatch {
            expected: dataset.len(),
            actual: projected.rows(),
        });
    }
    let (correct, wrong): (Vec<usize>, Vec<usize>) = dataset
        .class_members(class_label)
        .into_iter()
        .partition(|&i| dataset.samples[i].is_correct());
    let dim = projected.cols();
    let mean_c = mean_rows(correct.iter().map(|&i| projected.row(i)), dim);
    let mean_w = mean_rows(wrong.iter().map(|&i| projected.row(i)), dim);
    match (mean_c, mean_w) {
        (Some(c), Some(w)) => Ok(DeltaVector {
            class_label,
            values: c.iter().zip(&w).map(|(a, b)| a - b).collect(),
            n_correct: correct.len(),
            n_wrong: wrong.len(),
        }),
        _ => Err(RetrievalError::DegenerateClass {
            class_label,
            n_correct: correct.len(),
            n_wrong: wrong.len(),
        }),
    }
}

/// Similarity of `query` against every corpus row.
pub fn corpus_similarities(
    query: &[f64],
    corpus: &TextCorpus,
    similarity: Similarity,
) -> Result<Vec<f64>, RetrievalError> {
    let dim = corpus.embeddings.dim();
    if query.len() != dim {
        return Err(RetrievalError::DimensionMismatch {
            expected: dim,
            actual: query.len(),
        });
    }
    let q = similarity.prepare(query);
    Ok((0..corpus.len())
        .map(|i| dot(&q, &similarity.prepare(&corpus.embeddings.row_f64(i))))
        .collect())
}

/// Best-first order: higher similarity, then lower corpus index.
fn rank_order(sims: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b))
}

pub fn retrieve_topk(
    delta: &DeltaVector,
    corpus: &TextCorpus,
    k: usize,
    similarity: Similarity,
) -> Result<Vec<RetrievedSentence>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let sims = corpus_similarities(&delta.values, corpus, similarity)?;
    let mut order: Vec<usize> = (0..sims.len()).collect();
    let k = k.min(order.len());
    let cmp = rank_order(&sims);
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, &cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(&cmp);
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(r, i)| RetrievedSentence {
            sentence_id: corpus.sentences[i].id.clone(),
            text: corpus.sentences[i].text.clone(),
            similarity: sims[i],
            rank: r + 1,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EmbeddingMatrix, SampleRecord, Sentence, Split};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn corpus(rows: &[[f32; 2]]) -> TextCorpus {
        TextCorpus::new(
            (0..rows.len())
                .map(|i| Sentence {
                    id: format!("s{}", i + 1),
                    text: format!("sentence {}", i + 1),
                })
                .collect(),
            EmbeddingMatrix::new(rows.len(), 2, rows.iter().flatten().copied().collect()).unwrap(),
        )
        .unwrap()
    }

    fn delta(v: &[f64]) -> DeltaVector {
        DeltaVector {
            class_label: 0,
            values: v.to_vec(),
            n_correct: 1,
            n_wrong: 1,
        }
    }

    fn dataset(rows: &[(usize, usize)]) -> SliceDataset {
        SliceDataset {
            name: "t".into(),
            classes: vec!["a".into(), "b".into()],
            split: Split::Validation,
            samples: rows
                .iter()
                .enumerate()
                .map(|(i, &(label, prediction))| SampleRecord {
                    id: format!("x{i}"),
                    label,
                    prediction,
                    score: None,
                    groups: BTreeMap::new(),
                })
                .collect(),
            features: EmbeddingMatrix::new(rows.len(), 1, vec![0.0; rows.len()]).unwrap(),
            vlr_image: None,
        }
    }

    #[test]
    fn error_rates() {
        let all_right = dataset(&[(0, 0), (0, 0)]);
        assert_eq!(class_error_rate(&all_right, 0, None).unwrap(), 0.0);
        let all_wrong = dataset(&[(0, 1), (0, 1)]);
        assert_eq!(class_error_rate(&all_wrong, 0, None).unwrap(), 1.0);
        let mut rows = vec![(0, 0); 7];
        rows.extend([(0, 1); 3]);
        assert!((class_error_rate(&dataset(&rows), 0, None).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(class_error_rate(&all_right, 1, None), Err(RetrievalError::EmptySet));
        assert_eq!(class_error_rate(&all_right, 0, Some(&[])), Err(RetrievalError::EmptySet));
        assert!(matches!(
            class_error_rate(&dataset(&[(1, 1)]), 0, Some(&[0])),
            Err(RetrievalError::NotClassMember { .. })
        ));
    }

    #[test]
    fn mean_difference_examples() {
        let ds = dataset(&[(0, 0), (0, 1)]);
        let p = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(mean_difference(&p, &ds, 0).unwrap().values, vec![0.0, 0.0]);

        let ds = dataset(&[(0, 0), (0, 0), (0, 1), (1, 1)]);
        let p = Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0], [0.0, 0.0], [9.0, 9.0]]);
        let d = mean_difference(&p, &ds, 0).unwrap();
        assert_eq!(d.values, vec![1.0, 1.0]);
        assert_eq!((d.n_correct, d.n_wrong), (2, 1));

        let ds = dataset(&[(0, 0), (0, 0)]);
        let p = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            mean_difference(&p, &ds, 0),
            Err(RetrievalError::DegenerateClass { n_wrong: 0, .. })
        ));
    }

    #[test]
    fn topk_examples() {
        let c = corpus(&[[1.0, 0.0], [0.0, 1.0]]);
        let top = retrieve_topk(&delta(&[1.0, 0.0]), &c, 1, Similarity::Cosine).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].sentence_id, "s1");
        assert_eq!(top[0].rank, 1);

        let all = retrieve_topk(&delta(&[1.0, 0.0]), &c, 5, Similarity::Dot).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![1, 2]);

        let ties = corpus(&[[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]);
        let top = retrieve_topk(&delta(&[1.0, 0.0]), &ties, 2, Similarity::Cosine).unwrap();
        assert_eq!(top[0].sentence_id, "s2");
        assert_eq!(top[1].sentence_id, "s3");
    }

    #[test]
    fn topk_errors() {
        let c = corpus(&[[1.0, 0.0]]);
        assert_eq!(
            retrieve_topk(&delta(&[1.0, 0.0, 0.0]), &c, 1, Similarity::Cosine),
            Err(RetrievalError::DimensionMismatch { expected: 2, actual: 3 })
        );
        assert_eq!(retrieve_topk(&delta(&[1.0, 0.0]), &c, 0, Similarity::Cosine), Err(RetrievalError::InvalidK));
    }

    #[test]
    fn similarity_mode_parsing() {
        assert_eq!("dot".parse::<Similarity>().unwrap(), Similarity::Dot);
        assert_eq!(Similarity::Cosine.to_string(), "cosine");
        assert!("l2".parse::<Similarity>().is_err());
    }

    proptest! {
        #[test]
        fn positive_scaling_keeps_ranking(seed in 0u64..1000, scale in 0.01f64..100.0, mode in prop_oneof![Just(Similarity::Dot), Just(Similarity::Cosine)]) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<[f32; 2]> = (0..40).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let c = corpus(&rows);
            let d = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let a = retrieve_topk(&delta(&d), &c, 10, mode).unwrap();
            let b = retrieve_topk(&delta(&[d[0] * scale, d[1] * scale]), &c, 10, mode).unwrap();
            let ids = |v: &[RetrievedSentence]| v.iter().map(|r| r.sentence_id.clone()).collect::<Vec<_>>();
            prop_assert_eq!(ids(&a), ids(&b));
        }

        #[test]
        fn mean_difference_ignores_sample_order(seed in 0u64..1000) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rows: Vec<((usize, usize), [f64; 2])> = (0..30)
                .map(|i| ((0, (i % 3 == 0) as usize), [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
                .collect();
            let eval = |rows: &[((usize, usize), [f64; 2])]| {
                let ds = dataset(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
                let p = Matrix::from_rows(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
                mean_difference(&p, &ds, 0).unwrap().values
            };
            let before = eval(&rows);
            rows.shuffle(&mut rng);
            let after = eval(&rows);
            for (a, b) in before.iter().zip(&after) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
