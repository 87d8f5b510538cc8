//! How well a scorer agrees with human rankings, plus score diagnostics.

mod stats;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingKey, EmbeddingTable};
use crate::head::{HeadError, RewardHead};
use crate::pairgen::generate_pairs;
use crate::store::PreferenceDataset;

pub use stats::{score_stats, score_stats_with_limit, ScoreStats, EXACT_LIMIT, STANDARD_QUANTILES};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("EmptyEvalSet: no non-degenerate records to evaluate")]
    EmptyEvalSet,
    #[error("MissingEmbedding: {count} caption(s) lack embeddings, e.g. {}", examples.join(", "))]
    MissingEmbedding { count: usize, examples: Vec<String> },
    #[error("ZeroVector: cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("DimensionMismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("EmptyTable: no scores")]
    EmptyTable,
    #[error(transparent)]
    Head(#[from] HeadError),
}

impl EvalError {
    pub fn name(&self) -> &'static str {
        match self {
            EvalError::EmptyEvalSet => "EmptyEvalSet",
            EvalError::MissingEmbedding { .. } => "MissingEmbedding",
            EvalError::ZeroVector => "ZeroVector",
            EvalError::DimensionMismatch { .. } => "DimensionMismatch",
            EvalError::EmptyTable => "EmptyTable",
            EvalError::Head(e) => e.name(),
        }
    }
}

/// Scores for `(image_id, caption_id)`.
pub type CaptionScores = HashMap<(String, String), f64>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Count an image as correct only when the human best group is a single
    /// caption and the scorer picks exactly it.
    pub strict_best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceEvalReport {
    pub scorer: String,
    pub best_caption_accuracy: f64,
    pub pairwise_accuracy: f64,
    /// Records evaluated (one argmax decision each).
    pub n_records: usize,
    pub n_images: usize,
    pub n_pairs: usize,
    pub best_correct: usize,
    pub pairs_correct: usize,
    pub strict_best: bool,
    /// Every evaluated caption got the same score; the argmax then falls on
    /// the smallest caption id and the accuracy says nothing about the scorer.
    pub constant_scores: bool,
}

impl PreferenceEvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "scorer {}\nrecords {}\nimages {}\npairs {}\nbest_caption_accuracy {:.6} ({}/{})\npairwise_accuracy {:.6} ({}/{})\nstrict_best {}\n",
            self.scorer,
            self.n_records,
            self.n_images,
            self.n_pairs,
            self.best_caption_accuracy,
            self.best_correct,
            self.n_records,
            self.pairwise_accuracy,
            self.pairs_correct,
            self.n_pairs,
            self.strict_best,
        );
        if self.constant_scores {
            s.push_str("warning constant scores: best-caption choice is decided by caption id order\n");
        }
        s
    }
}

/// Compares `score` against every non-degenerate record of `store`.
///
/// Per record, the scorer's best caption (ties to the smallest caption id)
/// is correct when it lies in the human top group. Pairwise accuracy is the
/// fraction of the record's comparison pairs scored strictly in order.
pub fn evaluate_preferences(
    store: &PreferenceDataset,
    scorer: &str,
    score: impl Fn(&str, &str) -> Option<f64>,
    opts: EvalOptions,
) -> Result<PreferenceEvalReport, EvalError> {
    let mut missing = Vec::new();
    let mut missing_count = 0;
    let mut images = BTreeSet::new();
    let (mut records, mut best_correct, mut n_pairs, mut pairs_correct) = (0, 0, 0, 0);
    let mut first_score: Option<f64> = None;
    let mut constant = true;

    for rec in store.records().iter().filter(|r| !r.is_degenerate()) {
        let mut ids: Vec<&str> = rec.ranking.iter().flatten().map(String::as_str).collect();
        ids.sort_unstable();
        let mut scores: HashMap<&str, f64> = HashMap::with_capacity(ids.len());
        for &c in &ids {
            match score(&rec.image_id, c) {
                Some(s) => {
                    let f = *first_score.get_or_insert(s);
                    constant &= s == f;
                    scores.insert(c, s);
                }
                None => {
                    missing_count += 1;
                    if missing.len() < 5 {
                        missing.push(format!("{}/{c}", rec.image_id));
                    }
                }
            }
        }
        if scores.len() != ids.len() {
            continue;
        }
        let mut best = ids[0];
        for &c in &ids[1..] {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        let top = &rec.ranking[0];
        let hit = if opts.strict_best {
            top.len() == 1 && top[0] == best
        } else {
            top.iter().any(|c| c == best)
        };
        best_correct += hit as usize;
        records += 1;
        images.insert(rec.image_id.as_str());
        for p in generate_pairs(rec).expect("non-degenerate") {
            n_pairs += 1;
            pairs_correct += (scores[p.preferred.as_str()] > scores[p.dispreferred.as_str()]) as usize;
        }
    }
    if missing_count > 0 {
        return Err(EvalError::MissingEmbedding {
            count: missing_count,
            examples: missing,
        });
    }
    if records == 0 {
        return Err(EvalError::EmptyEvalSet);
    }
    Ok(PreferenceEvalReport {
        scorer: scorer.to_string(),
        best_caption_accuracy: best_correct as f64 / records as f64,
        pairwise_accuracy: if n_pairs == 0 {
            0.0
        } else {
            pairs_correct as f64 / n_pairs as f64
        },
        n_records: records,
        n_images: images.len(),
        n_pairs,
        best_correct,
        pairs_correct,
        strict_best: opts.strict_best,
        constant_scores: constant,
    })
}

/// Reward-head scores for every caption of `store` that has an embedding.
pub fn reward_head_scores(
    head: &RewardHead,
    store: &PreferenceDataset,
    table: &EmbeddingTable,
) -> Result<CaptionScores, EvalError> {
    let d = head.input_dim();
    let mut keys = Vec::new();
    let mut x = Vec::new();
    for c in store.captions() {
        if let Some(v) = table.caption(&c.image_id, &c.caption_id) {
            if v.len() != d {
                return Err(EvalError::Head(HeadError::DimensionMismatch {
                    expected: d,
                    found: v.len(),
                }));
            }
            x.extend(v.iter().map(|&f| f as f64));
            keys.push((c.image_id.clone(), c.caption_id.clone()));
        }
    }
    let scores = head.score_rows(x)?;
    Ok(keys.into_iter().zip(scores).collect())
}

/// Cosine-similarity baseline from separate image and text embeddings.
///
/// Text vectors are keyed by `(image_id, caption_id)`. Image vectors may be
/// keyed the same way or once per image by a pair key equal to the image id.
pub fn cosine_scores(
    store: &PreferenceDataset,
    image_table: &EmbeddingTable,
    text_table: &EmbeddingTable,
) -> Result<CaptionScores, EvalError> {
    let mut out = HashMap::new();
    for c in store.captions() {
        let img = image_table
            .caption(&c.image_id, &c.caption_id)
            .or_else(|| image_table.get(&EmbeddingKey::pair(&c.image_id)));
        let txt = text_table.caption(&c.image_id, &c.caption_id);
        if let (Some(u), Some(v)) = (img, txt) {
            out.insert(
                (c.image_id.clone(), c.caption_id.clone()),
                cosine_score_f32(u, v)?,
            );
        }
    }
    Ok(out)
}

pub fn cosine_score(u: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn cosine_score_f32(u: &[f32], v: &[f32]) -> Result<f64, EvalError> {
    let u: Vec<f64> = u.iter().map(|&a| a as f64).collect();
    let v: Vec<f64> = v.iter().map(|&a| a as f64).collect();
    cosine_score(&u, &v)
}
