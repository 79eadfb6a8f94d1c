//! One-hot case-by-variant encoding.
//!
//! Every column stands for one complete trace variant of the training log,
//! so any row, however noisy, decodes to a variant that really occurred.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::log::{SimpleEventLog, TraceVariant};

/// Bijection between trace variants and matrix columns.
///
/// Columns are ordered by descending frequency, ties by lexicographic
/// activity sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantVocabulary {
    columns: Vec<TraceVariant>,
    index_of: HashMap<TraceVariant, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    columns: Vec<TraceVariant>,
}

impl Serialize for VariantVocabulary {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        VocabularyFile { columns: self.columns.clone() }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for VariantVocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = VocabularyFile::deserialize(deserializer)?;
        VariantVocabulary::from_columns(file.columns).map_err(serde::de::Error::custom)
    }
}

impl VariantVocabulary {
    /// Builds the vocabulary of `log` in its canonical column order.
    pub fn from_log(log: &SimpleEventLog) -> Self {
        let mut entries: Vec<(&TraceVariant, u64)> = log.iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let columns = entries.into_iter().map(|(v, _)| v.clone()).collect();
        Self::from_columns(columns).expect("log keys are distinct")
    }

    /// Builds a vocabulary from an explicit column list; fails on duplicates.
    pub fn from_columns(columns: Vec<TraceVariant>) -> Result<Self> {
        let mut index_of = HashMap::with_capacity(columns.len());
        for (i, v) in columns.iter().enumerate() {
            if index_of.insert(v.clone(), i).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate vocabulary variant {v}")));
            }
        }
        Ok(Self { columns, index_of })
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn variant(&self, column: usize) -> Option<&TraceVariant> {
        self.columns.get(column)
    }

    pub fn index_of(&self, variant: &TraceVariant) -> Option<usize> {
        self.index_of.get(variant).copied()
    }

    pub fn columns(&self) -> &[TraceVariant] {
        &self.columns
    }
}

/// `m x n` training matrix, one row per case.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMatrix {
    rows: Array2<f64>,
}

impl OneHotMatrix {
    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.rows.ncols()
    }

    pub fn column_sums(&self) -> Vec<u64> {
        self.rows
            .columns()
            .into_iter()
            .map(|c| c.sum().round() as u64)
            .collect()
    }
}

pub fn one_hot_encode(log: &SimpleEventLog) -> Result<(VariantVocabulary, OneHotMatrix)> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let vocab = VariantVocabulary::from_log(log);
    let m = log.n_cases() as usize;
    let mut rows = Array2::zeros((m, vocab.len()));
    let mut r = 0;
    for (j, variant) in vocab.columns().iter().enumerate() {
        for _ in 0..log.frequency(variant) {
            rows[[r, j]] = 1.0;
            r += 1;
        }
    }
    Ok((vocab, OneHotMatrix { rows }))
}

/// Variant of the largest coordinate; the lowest column wins ties.
pub fn decode_row<'v>(row: &[f64], vocab: &'v VariantVocabulary) -> Result<&'v TraceVariant> {
    if row.len() != vocab.len() {
        return Err(Error::Dimension(format!(
            "row has {} coordinates, vocabulary has {}",
            row.len(),
            vocab.len()
        )));
    }
    if row.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteOutput);
    }
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    vocab.variant(best).ok_or(Error::EmptyLog)
}

pub fn one_hot_decode(rows: ArrayView2<'_, f64>, vocab: &VariantVocabulary) -> Result<SimpleEventLog> {
    if rows.ncols() != vocab.len() && rows.nrows() > 0 {
        return Err(Error::Dimension(format!(
            "rows have {} columns, vocabulary has {}",
            rows.ncols(),
            vocab.len()
        )));
    }
    let mut counts = vec![0u64; vocab.len()];
    let mut scratch = Vec::with_capacity(vocab.len());
    for row in rows.rows() {
        scratch.clear();
        scratch.extend(row.iter().copied());
        let variant = decode_row(&scratch, vocab)?;
        counts[vocab.index_of(variant).expect("decoded from vocab")] += 1;
    }
    Ok(vocab.columns().iter().cloned().zip(counts).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn v(acts: &[&str]) -> TraceVariant {
        TraceVariant::new(acts.iter().copied())
    }

    fn two_variant_log() -> SimpleEventLog {
        SimpleEventLog::from_iter([(v(&["s1"]), 2), (v(&["s2"]), 1)])
    }

    #[test]
    fn encodes_rows_per_case() {
        let (vocab, m) = one_hot_encode(&two_variant_log()).unwrap();
        assert_eq!(vocab.columns(), &[v(&["s1"]), v(&["s2"])]);
        assert_eq!(m.rows(), &array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(m.column_sums(), vec![2, 1]);
    }

    #[test]
    fn single_case_is_one_by_one() {
        let (_, m) = one_hot_encode(&SimpleEventLog::from_iter([(v(&["a"]), 1)])).unwrap();
        assert_eq!(m.rows(), &array![[1.0]]);
    }

    #[test]
    fn empty_log_rejected() {
        assert!(matches!(one_hot_encode(&SimpleEventLog::new()), Err(Error::EmptyLog)));
    }

    #[test]
    fn vocabulary_order_frequency_then_lexicographic() {
        let log = SimpleEventLog::from_iter([(v(&["c"]), 3), (v(&["b"]), 5), (v(&["a"]), 3)]);
        let vocab = VariantVocabulary::from_log(&log);
        assert_eq!(vocab.columns(), &[v(&["b"]), v(&["a"]), v(&["c"])]);
    }

    #[test]
    fn decode_argmax_and_ties() {
        let vocab = VariantVocabulary::from_columns(vec![v(&["x"]), v(&["y"]), v(&["z"])]).unwrap();
        assert_eq!(decode_row(&[1.0, 0.0, 0.0], &vocab).unwrap(), &v(&["x"]));
        assert_eq!(decode_row(&[0.2, 0.9, 0.1], &vocab).unwrap(), &v(&["y"]));
        assert_eq!(decode_row(&[0.5, 0.5, 0.5], &vocab).unwrap(), &v(&["x"]));
        let two = VariantVocabulary::from_columns(vec![v(&["x"]), v(&["y"])]).unwrap();
        assert_eq!(decode_row(&[0.2, 0.9], &two).unwrap(), &v(&["y"]));
        assert_eq!(decode_row(&[0.5, 0.5], &two).unwrap(), &v(&["x"]));
    }

    #[test]
    fn decode_rejects_nan_and_wrong_length() {
        let vocab = VariantVocabulary::from_columns(vec![v(&["x"]), v(&["y"])]).unwrap();
        let err = decode_row(&[f64::NAN, 0.0], &vocab).unwrap_err();
        assert_eq!(err.to_string(), "non-finite generator output");
        assert!(matches!(decode_row(&[1.0], &vocab), Err(Error::Dimension(_))));
    }

    #[test]
    fn decode_inverts_encode_and_empty_rows() {
        let log = two_variant_log();
        let (vocab, m) = one_hot_encode(&log).unwrap();
        assert_eq!(one_hot_decode(m.rows().view(), &vocab).unwrap(), log);
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(one_hot_decode(empty.view(), &vocab).unwrap().is_empty());
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let vocab = VariantVocabulary::from_log(&two_variant_log());
        let json = serde_json::to_string(&vocab).unwrap();
        assert_eq!(json, r#"{"columns":[["s1"],["s2"]]}"#);
        let back: VariantVocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vocab);
        assert!(serde_json::from_str::<VariantVocabulary>(r#"{"columns":[["a"],["a"]]}"#).is_err());
    }

    fn arb_log() -> impl Strategy<Value = SimpleEventLog> {
        prop::collection::btree_map(
            prop::collection::vec("[a-e]", 1..5),
            1u64..6,
            1..8,
        )
        .prop_map(|m| m.into_iter().map(|(acts, c)| (TraceVariant(acts), c)).collect())
    }

    proptest! {
        #[test]
        fn encode_decode_identity(log in arb_log()) {
            let (vocab, m) = one_hot_encode(&log).unwrap();
            prop_assert_eq!(m.n_rows() as u64, log.n_cases());
            for row in m.rows().rows() {
                prop_assert_eq!(row.sum(), 1.0);
            }
            for (j, &s) in m.column_sums().iter().enumerate() {
                prop_assert_eq!(s, log.frequency(vocab.variant(j).unwrap()));
            }
            prop_assert_eq!(one_hot_decode(m.rows().view(), &vocab).unwrap(), log);
        }

        #[test]
        fn decoded_support_within_vocabulary(
            raw in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 5), 0..200)
        ) {
            let vocab = VariantVocabulary::from_columns(
                (0..5).map(|i| TraceVariant::new([format!("act{i}")])).collect(),
            ).unwrap();
            // softmax-like rows
            let mut rows = Array2::zeros((raw.len(), 5));
            for (i, r) in raw.iter().enumerate() {
                let z: f64 = r.iter().map(|x| x.exp()).sum();
                for (j, x) in r.iter().enumerate() {
                    rows[[i, j]] = x.exp() / z;
                }
            }
            let log = one_hot_decode(rows.view(), &vocab).unwrap();
            prop_assert_eq!(log.n_cases(), raw.len() as u64);
            for (variant, _) in log.iter() {
                prop_assert!(vocab.index_of(variant).is_some());
            }
        }
    }
}
