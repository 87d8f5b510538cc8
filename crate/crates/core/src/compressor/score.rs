use std::path::Path;

use rayon::prelude::*;

use super::{CompressorError, ScoreProvenance, ScoreTable};
use crate::embedding::{open_embeddings, EmbeddingRecord};
use crate::head::RewardHead;

/// Records scored per batched forward pass.
pub const SCORE_CHUNK: usize = 2048;

fn score_chunk(
    head: &RewardHead,
    chunk: &[EmbeddingRecord],
    source: &str,
) -> Result<Vec<(String, f64)>, CompressorError> {
    let d = head.input_dim();
    let mut x = Vec::with_capacity(chunk.len() * d);
    let mut ids = Vec::with_capacity(chunk.len());
    for r in chunk {
        let id = r
            .key
            .pair_id()
            .ok_or_else(|| CompressorError::WrongKeyMode(source.to_string()))?;
        if r.vector.len() != d {
            return Err(CompressorError::DimensionMismatch {
                shard: source.to_string(),
                expected: d,
                found: r.vector.len(),
            });
        }
        x.extend(r.vector.iter().map(|&v| v as f64));
        ids.push(id.to_string());
    }
    let scores = head.score_rows(x)?;
    ids.into_iter()
        .zip(scores)
        .map(|(id, s)| {
            if s.is_finite() {
                Ok((id, s))
            } else {
                Err(CompressorError::NonFiniteScore { pair_id: id })
            }
        })
        .collect()
}

/// Scores in-memory records, in record order. Chunks run in parallel; the
/// result does not depend on the number of workers.
pub fn score_records(
    head: &RewardHead,
    records: &[EmbeddingRecord],
    provenance: ScoreProvenance,
) -> Result<ScoreTable, CompressorError> {
    let parts: Vec<Vec<(String, f64)>> = records
        .par_chunks(SCORE_CHUNK)
        .map(|c| score_chunk(head, c, "records"))
        .collect::<Result<_, _>>()?;
    ScoreTable::from_entries(provenance, parts.into_iter().flatten())
}

fn score_shard(head: &RewardHead, path: &Path) -> Result<Vec<(String, f64)>, CompressorError> {
    let name = path.display().to_string();
    let reader = open_embeddings(path)?;
    if let Some(d) = reader.dimension() {
        if d != head.input_dim() {
            return Err(CompressorError::DimensionMismatch {
                shard: name,
                expected: head.input_dim(),
                found: d,
            });
        }
    }
    let mut out = Vec::with_capacity(reader.record_count());
    let mut chunk = Vec::with_capacity(SCORE_CHUNK);
    for rec in reader {
        chunk.push(rec?);
        if chunk.len() == SCORE_CHUNK {
            out.extend(score_chunk(head, &chunk, &name)?);
            chunk.clear();
        }
    }
    out.extend(score_chunk(head, &chunk, &name)?);
    Ok(out)
}

/// Scores every record of every shard with an eval-mode forward pass.
/// Shards are processed in parallel and concatenated in argument order.
pub fn score_corpus(
    head: &RewardHead,
    shards: &[impl AsRef<Path> + Sync],
    provenance: ScoreProvenance,
) -> Result<ScoreTable, CompressorError> {
    let parts: Vec<Vec<(String, f64)>> = shards
        .par_iter()
        .map(|p| score_shard(head, p.as_ref()))
        .collect::<Result<_, _>>()?;
    ScoreTable::from_entries(provenance, parts.into_iter().flatten())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{write_shard, EmbeddingKey};
    use crate::head::{ForwardMode, HeadArchitecture};

    fn records(n: usize, d: usize) -> Vec<EmbeddingRecord> {
        (0..n)
            .map(|i| {
                EmbeddingRecord::new(
                    EmbeddingKey::pair(format!("p{i}")),
                    (0..d).map(|k| ((i * 31 + k * 7) % 17) as f32 / 8.0 - 1.0).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn zero_head_scores_zero() {
        let head = RewardHead::zeros(HeadArchitecture::default_for_input(4)).unwrap();
        let t = score_records(&head, &records(10, 4), ScoreProvenance::default()).unwrap();
        assert!(t.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn shards_match_single_forward() {
        let dir = tempfile::tempdir().unwrap();
        let head = RewardHead::init(HeadArchitecture::default_for_input(6), 2).unwrap();
        let recs = records(5000, 6);
        let a = dir.path().join("a.emb");
        let b = dir.path().join("b.emb");
        write_shard(&recs[..3000], &a, 6).unwrap();
        write_shard(&recs[3000..], &b, 6).unwrap();
        let t = score_corpus(&head, &[a, b], ScoreProvenance::default()).unwrap();
        assert_eq!(t.len(), 5000);
        for (r, (id, s)) in recs.iter().zip(t.iter()) {
            assert_eq!(r.key.pair_id(), Some(id));
            let single = head.forward(&r.vector, ForwardMode::Eval).unwrap();
            assert_eq!(single.to_bits(), s.to_bits());
        }
    }

    #[test]
    fn width_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.emb");
        write_shard(&records(3, 5), &a, 5).unwrap();
        let head = RewardHead::zeros(HeadArchitecture::default_for_input(6)).unwrap();
        assert!(matches!(
            score_corpus(&head, &[a], ScoreProvenance::default()),
            Err(CompressorError::DimensionMismatch { expected: 6, found: 5, .. })
        ));
    }
}
