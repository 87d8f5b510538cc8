//! Score tables.
//!
//! Binary form:
//!
//! ```text
//! magic "SIFTSCOR", u32 version, u64 provenance_len, provenance JSON,
//! u64 count, count × (u32 len, pair_id bytes), count × f64 score,
//! u64 checksum (first 8 bytes of SHA-256 over everything before it)
//! ```
//!
//! The text form is `pair_id<TAB>score` per line.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CompressorError;
use crate::digest::truncate_u64;

pub const SCORE_MAGIC: [u8; 8] = *b"SIFTSCOR";
pub const SCORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScoreProvenance {
    /// `reward-head`, `cosine` or a caller-chosen label.
    pub scorer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub provenance: ScoreProvenance,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl ScoreTable {
    /// Validates uniqueness and finiteness.
    pub fn new(
        provenance: ScoreProvenance,
        ids: Vec<String>,
        scores: Vec<f64>,
    ) -> Result<Self, CompressorError> {
        assert_eq!(ids.len(), scores.len(), "one score per id");
        let mut seen = HashSet::with_capacity(ids.len());
        for (id, s) in ids.iter().zip(&scores) {
            if !seen.insert(id.as_str()) {
                return Err(CompressorError::DuplicatePairId(id.clone()));
            }
            if !s.is_finite() {
                return Err(CompressorError::NonFiniteScore {
                    pair_id: id.clone(),
                });
            }
        }
        Ok(ScoreTable {
            provenance,
            ids,
            scores,
        })
    }

    pub fn from_entries(
        provenance: ScoreProvenance,
        entries: impl IntoIterator<Item = (String, f64)>,
    ) -> Result<Self, CompressorError> {
        let (ids, scores) = entries.into_iter().unzip();
        Self::new(provenance, ids, scores)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.ids.iter().map(String::as_str).zip(self.scores.iter().copied())
    }

    /// Applies `f` to every score.
    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> Result<Self, CompressorError> {
        Self::new(
            self.provenance.clone(),
            self.ids.clone(),
            self.scores.iter().map(|&s| f(s)).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let prov = serde_json::to_vec(&self.provenance).expect("provenance serializes");
        let mut out = Vec::with_capacity(40 + prov.len() + self.len() * 24);
        out.extend_from_slice(&SCORE_MAGIC);
        out.extend_from_slice(&SCORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(prov.len() as u64).to_le_bytes());
        out.extend_from_slice(&prov);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for s in &self.scores {
            out.extend_from_slice(&s.to_le_bytes());
        }
        let sum = truncate_u64(&Sha256::digest(&out));
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CompressorError> {
        let corrupt = |m: &str| CompressorError::CorruptScoreTable(m.to_string());
        let mut cur = Cursor { bytes, at: 0 };
        let mut take = |n: usize| cur.take(n).ok_or_else(|| corrupt("truncated"));
        if take(8)? != SCORE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != SCORE_VERSION {
            return Err(CompressorError::CorruptScoreTable(format!(
                "unsupported version {version}"
            )));
        }
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let prov_len = u64_at(take(8)?) as usize;
        let provenance: ScoreProvenance = serde_json::from_slice(take(prov_len)?)
            .map_err(|e| CompressorError::CorruptScoreTable(format!("provenance: {e}")))?;
        let count = u64_at(take(8)?) as usize;
        let mut ids = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            let n = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let id = std::str::from_utf8(take(n)?).map_err(|_| corrupt("pair id is not UTF-8"))?;
            ids.push(id.to_string());
        }
        let scores: Vec<f64> = take(count.checked_mul(8).ok_or_else(|| corrupt("count"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let stored = u64_at(take(8)?);
        let body_end = bytes.len() - 8;
        if cur.at != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        if stored != truncate_u64(&Sha256::digest(&bytes[..body_end])) {
            return Err(corrupt("checksum mismatch"));
        }
        Self::new(provenance, ids, scores)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CompressorError> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.persist(path).map_err(|e| CompressorError::Io(e.error))?;
        Ok(())
    }

    /// Reads either form, detected by magic.
    pub fn read(path: impl AsRef<Path>) -> Result<Self, CompressorError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.starts_with(&SCORE_MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            Self::read_text(BufReader::new(bytes.as_slice()))
        }
    }

    pub fn write_text(&self, w: impl Write) -> Result<(), CompressorError> {
        let mut w = BufWriter::new(w);
        for (id, s) in self.iter() {
            writeln!(w, "{id}\t{s:?}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_text(r: impl BufRead) -> Result<Self, CompressorError> {
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| {
                CompressorError::CorruptScoreTable(format!("line {}: {reason}", i + 1))
            };
            let (id, s) = line.split_once('\t').ok_or_else(|| bad("expected pair_id<TAB>score"))?;
            let s: f64 = s.trim().parse().map_err(|_| bad("score is not a number"))?;
            entries.push((id.to_string(), s));
        }
        Self::from_entries(
            ScoreProvenance {
                scorer: "text-import".into(),
                checkpoint_sha256: None,
            },
            entries,
        )
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len())?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Some(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ScoreTable {
        ScoreTable::from_entries(
            ScoreProvenance {
                scorer: "reward-head".into(),
                checkpoint_sha256: Some("ab".repeat(32)),
            },
            vec![("p1".into(), 0.1), ("p2".into(), -3.5e-300), ("p3".into(), 7.0)],
        )
        .unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let t = sample();
        assert_eq!(ScoreTable::from_bytes(&t.to_bytes()).unwrap(), t);
        let mut b = t.to_bytes();
        b[30] ^= 0x40;
        assert!(ScoreTable::from_bytes(&b).is_err());
    }

    #[test]
    fn text_round_trip_preserves_bits() {
        let t = sample();
        let mut buf = Vec::new();
        t.write_text(&mut buf).unwrap();
        let back = ScoreTable::read_text(buf.as_slice()).unwrap();
        assert_eq!(back.ids, t.ids);
        for (a, b) in back.scores.iter().zip(&t.scores) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_duplicates_and_nan() {
        let p = ScoreProvenance::default();
        assert!(matches!(
            ScoreTable::from_entries(p.clone(), vec![("a".into(), 1.0), ("a".into(), 2.0)]),
            Err(CompressorError::DuplicatePairId(_))
        ));
        assert!(matches!(
            ScoreTable::from_entries(p, vec![("a".into(), f64::NAN)]),
            Err(CompressorError::NonFiniteScore { .. })
        ));
    }
}
