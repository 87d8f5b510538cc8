//! JSON-lines embeddings for tests and demos.
//!
//! Each line is `{"pair_id": "...", "vector": [...]}` or
//! `{"image_id": "...", "caption_id": "...", "vector": [...]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingError, EmbeddingKey, EmbeddingRecord};

pub const MAX_TEXT_RECORDS: usize = 100_000;

#[derive(Serialize, Deserialize)]
struct Line {
    #[serde(flatten)]
    key: EmbeddingKey,
    vector: Vec<f32>,
}

pub struct JsonlReader {
    records: std::vec::IntoIter<EmbeddingRecord>,
    dimension: Option<usize>,
    len: usize,
}

impl JsonlReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    pub fn from_reader(r: impl BufRead) -> Result<Self, EmbeddingError> {
        let mut records = Vec::new();
        let mut dimension = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if records.len() == MAX_TEXT_RECORDS {
                return Err(EmbeddingError::TooManyTextRecords {
                    limit: MAX_TEXT_RECORDS,
                });
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| {
                EmbeddingError::CorruptShard(format!("line {}: {e}", i + 1))
            })?;
            let rec = EmbeddingRecord::new(parsed.key, parsed.vector);
            rec.check(*dimension.get_or_insert(rec.vector.len()))?;
            records.push(rec);
        }
        let len = records.len();
        Ok(JsonlReader {
            records: records.into_iter(),
            dimension,
            len,
        })
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Iterator for JsonlReader {
    type Item = Result<EmbeddingRecord, EmbeddingError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.records.next().map(Ok)
    }
}

pub fn write_jsonl<'a>(
    records: impl IntoIterator<Item = &'a EmbeddingRecord>,
    path: impl AsRef<Path>,
) -> Result<usize, EmbeddingError> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut n = 0;
    let mut dimension = None;
    for r in records {
        if n == MAX_TEXT_RECORDS {
            return Err(EmbeddingError::TooManyTextRecords {
                limit: MAX_TEXT_RECORDS,
            });
        }
        r.check(*dimension.get_or_insert(r.vector.len()))?;
        let line = Line {
            key: r.key.clone(),
            vector: r.vector.clone(),
        };
        serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}
