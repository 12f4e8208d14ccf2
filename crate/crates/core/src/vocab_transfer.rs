//! Moving a trained embedding table onto a different vocabulary.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::{segment_ids, Vocabulary, CONTINUATION_PREFIX};
use crate::toy_mlm::{truncated_normal, ModelCheckpoint, ModelError, INIT_STDDEV};

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("embedding matrix has {rows} rows but vocabulary has {vocab} tokens")]
    RowCountMismatch { rows: usize, vocab: usize },
    #[error("embedding width {found} does not match hidden size {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("non-finite value in embedding row {row}")]
    NonFinite { row: usize },
    #[error("embedding matrix is empty")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Row-per-token embedding table with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Array2<f32>);

impl EmbeddingMatrix {
    pub fn new(values: Array2<f32>) -> Result<Self, TransferError> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(TransferError::Empty);
        }
        if let Some(row) = values
            .rows()
            .into_iter()
            .position(|r| r.iter().any(|v| !v.is_finite()))
        {
            return Err(TransferError::NonFinite { row });
        }
        Ok(Self(values))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.0.row(i)
    }

    pub fn as_array(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntersectionStats {
    pub old_size: usize,
    pub new_size: usize,
    pub intersection_size: usize,
    /// `intersection_size / new_size`; sizes count regular tokens only.
    pub fraction: f64,
}

/// Regular tokens present in both vocabularies, by exact string match.
pub fn intersect_vocabularies(old: &Vocabulary, new: &Vocabulary) -> (BTreeSet<String>, IntersectionStats) {
    let shared: BTreeSet<String> = new
        .regular_tokens()
        .iter()
        .filter(|t| old.contains(t))
        .cloned()
        .collect();
    let new_size = new.regular_tokens().len();
    let fraction = if new_size == 0 {
        1.0
    } else {
        shared.len() as f64 / new_size as f64
    };
    let stats = IntersectionStats {
        old_size: old.regular_tokens().len(),
        new_size,
        intersection_size: shared.len(),
        fraction,
    };
    (shared, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Copied,
    SpecialCopied,
    Averaged,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token: String,
    pub id: u32,
    pub origin: Origin,
    pub pieces: Vec<String>,
    pub piece_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransplantSummary {
    pub copied: usize,
    pub special_copied: usize,
    pub averaged: usize,
    pub fallback: usize,
    pub intersection: IntersectionStats,
    pub new_token_init: NewTokenInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransplantReport {
    pub summary: TransplantSummary,
    pub tokens: Vec<TokenRecord>,
}

impl TransplantReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report") + "\n"
    }

    pub fn record(&self, token: &str) -> Option<&TokenRecord> {
        self.tokens.iter().find(|r| r.token == token)
    }
}

/// How rows for tokens outside the intersection are filled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NewTokenInit {
    /// Mean of the token's pieces under the old vocabulary.
    Mean,
    /// Fresh truncated-normal draws; provenance is still recorded.
    Random { seed: u64, std: f64 },
}

impl NewTokenInit {
    pub fn random(seed: u64) -> Self {
        NewTokenInit::Random { seed, std: INIT_STDDEV }
    }
}

/// Old-vocabulary pieces of a new token, or `None` if it cannot be segmented.
fn decompose(token: &str, old: &Vocabulary) -> Option<Vec<u32>> {
    let (surface, internal) = match token.strip_prefix(CONTINUATION_PREFIX) {
        Some(rest) if !rest.is_empty() => (rest, true),
        _ => (token, false),
    };
    segment_ids(surface, old, usize::MAX, internal)
}

fn mean_rows(m: &Array2<f32>, ids: &[u32]) -> Array1<f32> {
    let mut acc = vec![0f64; m.ncols()];
    for &id in ids {
        for (a, &v) in acc.iter_mut().zip(m.row(id as usize)) {
            *a += v as f64;
        }
    }
    let n = ids.len() as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

/// [`transplant_embeddings_with`] using mean initialization.
pub fn transplant_embeddings(
    old_vocab: &Vocabulary,
    old_emb: &EmbeddingMatrix,
    new_vocab: &Vocabulary,
) -> Result<(EmbeddingMatrix, TransplantReport), TransferError> {
    transplant_embeddings_with(old_vocab, old_emb, new_vocab, NewTokenInit::Mean)
}

/// Builds an embedding table for `new_vocab` from `old_emb`.
///
/// Specials and shared tokens copy their old row. Every other token takes
/// the mean of the rows of its greedy segmentation under `old_vocab`, or the
/// mean of the whole old table when it cannot be segmented.
pub fn transplant_embeddings_with(
    old_vocab: &Vocabulary,
    old_emb: &EmbeddingMatrix,
    new_vocab: &Vocabulary,
    init: NewTokenInit,
) -> Result<(EmbeddingMatrix, TransplantReport), TransferError> {
    if old_emb.rows() != old_vocab.len() {
        return Err(TransferError::RowCountMismatch {
            rows: old_emb.rows(),
            vocab: old_vocab.len(),
        });
    }
    let old = old_emb.as_array();
    let width = old_emb.width();
    let (_, stats) = intersect_vocabularies(old_vocab, new_vocab);
    let all_ids: Vec<u32> = (0..old_vocab.len() as u32).collect();
    let global_mean = mean_rows(old, &all_ids);

    let rows: Vec<(Array1<f32>, TokenRecord)> = new_vocab
        .tokens()
        .par_iter()
        .enumerate()
        .map(|(id, token)| {
            let (origin, ids) = match old_vocab.id(token) {
                Some(old_id) if Vocabulary::is_special(token) => (Origin::SpecialCopied, vec![old_id]),
                Some(old_id) => (Origin::Copied, vec![old_id]),
                None => match decompose(token, old_vocab) {
                    Some(ids) => (Origin::Averaged, ids),
                    None => (Origin::Fallback, Vec::new()),
                },
            };
            let row = match origin {
                Origin::Copied | Origin::SpecialCopied => old.row(ids[0] as usize).to_owned(),
                Origin::Averaged => mean_rows(old, &ids),
                Origin::Fallback => global_mean.clone(),
            };
            let pieces: Vec<String> = ids
                .iter()
                .map(|&i| old_vocab.token(i).expect("old id").to_string())
                .collect();
            let record = TokenRecord {
                token: token.clone(),
                id: id as u32,
                origin,
                piece_count: pieces.len(),
                pieces,
            };
            (row, record)
        })
        .collect();

    let mut out = Array2::<f32>::zeros((new_vocab.len(), width));
    let mut tokens = Vec::with_capacity(rows.len());
    for (i, (row, record)) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&row);
        tokens.push(record);
    }
    if let NewTokenInit::Random { seed, std } = init {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for record in &tokens {
            if matches!(record.origin, Origin::Averaged | Origin::Fallback) {
                out.row_mut(record.id as usize)
                    .mapv_inplace(|_| truncated_normal(&mut rng, std) as f32);
            }
        }
    }

    let count = |o: Origin| tokens.iter().filter(|r| r.origin == o).count();
    let summary = TransplantSummary {
        copied: count(Origin::Copied),
        special_copied: count(Origin::SpecialCopied),
        averaged: count(Origin::Averaged),
        fallback: count(Origin::Fallback),
        intersection: stats,
        new_token_init: init,
    };
    Ok((EmbeddingMatrix::new(out)?, TransplantReport { summary, tokens }))
}

/// Replaces the token embeddings of `old` for `new_vocab`. Every other
/// tensor is copied unchanged except the MLM output bias, which is
/// vocabulary-indexed and restarts at zero.
pub fn transplant_checkpoint(
    old: &ModelCheckpoint,
    new_vocab: &Vocabulary,
    init: NewTokenInit,
) -> Result<(ModelCheckpoint, TransplantReport), TransferError> {
    let old_emb = EmbeddingMatrix::new(old.params.token_embeddings.clone())?;
    if old_emb.width() != old.config.hidden_size {
        return Err(TransferError::WidthMismatch {
            expected: old.config.hidden_size,
            found: old_emb.width(),
        });
    }
    let (emb, report) = transplant_embeddings_with(&old.vocab, &old_emb, new_vocab, init)?;
    let mut config = old.config.clone();
    config.vocab_size = new_vocab.len();
    let mut params = old.params.clone();
    params.token_embeddings = emb.into_inner();
    params.mlm_output_bias = Array1::zeros(new_vocab.len());
    let ckpt = ModelCheckpoint::new(config, new_vocab.clone(), params)?;
    Ok((ckpt, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn vocab(tokens: &[&str]) -> Vocabulary {
        Vocabulary::from_regular_tokens(tokens.iter().copied()).unwrap()
    }

    fn seq_matrix(rows: usize, width: usize) -> EmbeddingMatrix {
        EmbeddingMatrix::new(Array2::from_shape_fn((rows, width), |(r, c)| (r * width + c) as f32 * 0.25 - 3.0))
            .unwrap()
    }

    #[test]
    fn intersection_examples() {
        let (shared, stats) = intersect_vocabularies(&vocab(&["a", "b"]), &vocab(&["b", "c"]));
        assert_eq!(shared.into_iter().collect::<Vec<_>>(), vec!["b"]);
        assert_eq!(stats.fraction, 0.5);
        let v = vocab(&["x", "y", "##z"]);
        assert_eq!(intersect_vocabularies(&v, &v).1.fraction, 1.0);
        let (shared, _) = intersect_vocabularies(&vocab(&["bi", "##rd"]), &vocab(&["bi", "##rd", "bird"]));
        assert_eq!(shared.len(), 2);
    }

    #[test]
    fn bird_is_mean_of_pieces() {
        let old_v = vocab(&["bi", "##rd"]);
        let new_v = vocab(&["bird", "bi"]);
        let old_e = seq_matrix(old_v.len(), 3);
        let (emb, report) = transplant_embeddings(&old_v, &old_e, &new_v).unwrap();
        let bird = new_v.id("bird").unwrap() as usize;
        let u = old_e.row(5);
        let v = old_e.row(6);
        for c in 0..3 {
            assert_eq!(emb.row(bird)[c], (u[c] + v[c]) / 2.0);
        }
        let rec = report.record("bird").unwrap();
        assert_eq!(rec.origin, Origin::Averaged);
        assert_eq!(rec.pieces, vec!["bi", "##rd"]);
        assert_eq!(report.record("bi").unwrap().origin, Origin::Copied);
        assert_eq!(report.record("[CLS]").unwrap().origin, Origin::SpecialCopied);
    }

    #[test]
    fn continuation_tokens_decompose_internally() {
        let old_v = vocab(&["r", "d", "##r", "##d"]);
        let new_v = vocab(&["##rd"]);
        let old_e = seq_matrix(old_v.len(), 2);
        let (_, report) = transplant_embeddings(&old_v, &old_e, &new_v).unwrap();
        assert_eq!(report.record("##rd").unwrap().pieces, vec!["##r", "##d"]);
    }

    #[test]
    fn unknown_chars_fall_back_to_global_mean() {
        let old_v = vocab(&["a", "b"]);
        let new_v = vocab(&["qzx"]);
        let old_e = EmbeddingMatrix::new(array![
            [1.0, 2.0],
            [3.0, 4.0],
            [5.0, 6.0],
            [7.0, 8.0],
            [9.0, 10.0],
            [11.0, 12.0],
            [13.0, 14.0]
        ])
        .unwrap();
        let (emb, report) = transplant_embeddings(&old_v, &old_e, &new_v).unwrap();
        assert_eq!(report.record("qzx").unwrap().origin, Origin::Fallback);
        assert_eq!(emb.row(5).to_vec(), vec![7.0, 8.0]);
        assert_eq!(report.summary.fallback, 1);
    }

    #[test]
    fn identity_transplant() {
        let v = vocab(&["a", "b", "##c"]);
        let e = seq_matrix(v.len(), 4);
        let (emb, report) = transplant_embeddings(&v, &e, &v).unwrap();
        assert_eq!(emb, e);
        assert_eq!(report.summary.copied + report.summary.special_copied, v.len());
    }

    #[test]
    fn errors() {
        let v = vocab(&["a"]);
        assert!(matches!(
            transplant_embeddings(&v, &seq_matrix(3, 2), &v),
            Err(TransferError::RowCountMismatch { rows: 3, vocab: 6 })
        ));
        let mut bad = Array2::<f32>::zeros((6, 2));
        bad[[4, 1]] = f32::NAN;
        assert!(matches!(EmbeddingMatrix::new(bad), Err(TransferError::NonFinite { row: 4 })));
    }

    #[test]
    fn report_json_shape() {
        let v = vocab(&["a"]);
        let (_, report) = transplant_embeddings(&v, &seq_matrix(v.len(), 2), &vocab(&["a", "aa"])).unwrap();
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert!(json["summary"].is_object());
        let tok = &json["tokens"][6];
        assert_eq!(tok["token"], "aa");
        assert_eq!(tok["origin"], "fallback");
        assert!(tok["pieces"].as_array().unwrap().is_empty());
    }
}
