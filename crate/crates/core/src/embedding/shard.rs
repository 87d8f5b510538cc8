//! Binary embedding shard.
//!
//! ```text
//! offset  size        field
//! 0       8           magic "SIFTEMB\0"
//! 8       4           format version (u32 LE, currently 1)
//! 12      4           dimension d (u32 LE)
//! 16      8           record count n (u64 LE)
//! 24      1           key mode (0 = pair id, 1 = image/caption)
//! 25      8           key table length in bytes (u64 LE)
//! 33      ...         key table: per record, length-prefixed UTF-8 strings
//!                     (u32 LE length + bytes); one string in pair-id mode,
//!                     image id then caption id in caption mode
//! ...     n * d * 4   payload: f32 LE, record-major
//! ...     8           checksum (u64 LE)
//! ```
//!
//! Records have a fixed payload size, so record `i` starts at
//! `payload_offset + i * d * 4`. The checksum is the first eight bytes of
//! `SHA-256(SHA-256(key table) || SHA-256(payload))`, which lets a reader
//! verify it while streaming keys and payload through separate cursors.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{EmbeddingError, EmbeddingKey, EmbeddingRecord, KeyMode};
use crate::digest::truncate_u64;

pub const SHARD_MAGIC: [u8; 8] = *b"SIFTEMB\0";
pub const SHARD_VERSION: u32 = 1;
const HEADER_LEN: u64 = 33;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u32,
    pub dimension: usize,
    pub count: u64,
    pub key_mode: KeyMode,
    pub key_table_len: u64,
}

impl ShardHeader {
    pub fn payload_offset(&self) -> u64 {
        HEADER_LEN + self.key_table_len
    }

    pub fn record_bytes(&self) -> u64 {
        self.dimension as u64 * 4
    }

    pub fn checksum_offset(&self) -> u64 {
        self.payload_offset() + self.count * self.record_bytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardSummary {
    pub count: u64,
    pub checksum: u64,
}

fn combine_checksum(keys: Sha256, payload: Sha256) -> u64 {
    let mut outer = Sha256::new();
    outer.update(keys.finalize());
    outer.update(payload.finalize());
    truncate_u64(&outer.finalize())
}

fn encode_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Streaming shard writer. Keys are buffered in memory; the payload is
/// spooled to a temporary file beside the destination and the final file
/// is moved into place by `finish`.
pub struct ShardWriter {
    path: PathBuf,
    dimension: usize,
    key_mode: Option<KeyMode>,
    keys: Vec<u8>,
    seen: HashSet<EmbeddingKey>,
    payload: BufWriter<tempfile::NamedTempFile>,
    payload_hash: Sha256,
    count: u64,
    buf: Vec<u8>,
}

impl ShardWriter {
    pub fn create(path: impl AsRef<Path>, dimension: usize) -> Result<Self, EmbeddingError> {
        let path = path.as_ref().to_owned();
        let spool = tempfile::NamedTempFile::new_in(parent_dir(&path))?;
        Ok(ShardWriter {
            path,
            dimension,
            key_mode: None,
            keys: Vec::new(),
            seen: HashSet::new(),
            payload: BufWriter::new(spool),
            payload_hash: Sha256::new(),
            count: 0,
            buf: Vec::with_capacity(dimension * 4),
        })
    }

    pub fn push(&mut self, record: &EmbeddingRecord) -> Result<(), EmbeddingError> {
        record.check(self.dimension)?;
        let mode = *self.key_mode.get_or_insert(record.key.mode());
        if mode != record.key.mode() {
            return Err(EmbeddingError::MixedKeyModes(record.key.to_string()));
        }
        if !self.seen.insert(record.key.clone()) {
            return Err(EmbeddingError::DuplicateKey(record.key.to_string()));
        }
        match &record.key {
            EmbeddingKey::Pair { pair_id } => encode_str(&mut self.keys, pair_id),
            EmbeddingKey::Caption {
                image_id,
                caption_id,
            } => {
                encode_str(&mut self.keys, image_id);
                encode_str(&mut self.keys, caption_id);
            }
        }
        self.buf.clear();
        for v in &record.vector {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self.payload.write_all(&self.buf)?;
        self.payload_hash.update(&self.buf);
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<ShardSummary, EmbeddingError> {
        let mut spool = self.payload.into_inner().map_err(|e| e.into_error())?;
        spool.flush()?;
        spool.as_file_mut().seek(SeekFrom::Start(0))?;

        let key_hash = Sha256::new_with_prefix(&self.keys);
        let checksum = combine_checksum(key_hash, self.payload_hash);

        let out = tempfile::NamedTempFile::new_in(parent_dir(&self.path))?;
        let mut w = BufWriter::new(out);
        w.write_all(&SHARD_MAGIC)?;
        w.write_all(&SHARD_VERSION.to_le_bytes())?;
        w.write_all(&(self.dimension as u32).to_le_bytes())?;
        w.write_all(&self.count.to_le_bytes())?;
        w.write_all(&[self.key_mode.unwrap_or(KeyMode::PairId).to_byte()])?;
        w.write_all(&(self.keys.len() as u64).to_le_bytes())?;
        w.write_all(&self.keys)?;
        io::copy(spool.as_file_mut(), &mut w)?;
        w.write_all(&checksum.to_le_bytes())?;
        let out = w.into_inner().map_err(|e| e.into_error())?;
        out.as_file().sync_all()?;
        out.persist(&self.path).map_err(|e| EmbeddingError::Io(e.error))?;
        Ok(ShardSummary {
            count: self.count,
            checksum,
        })
    }
}

fn parent_dir(path: &Path) -> &Path {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

/// Writes `records` as a shard of the given dimension. The output bytes
/// depend only on the record sequence.
pub fn write_shard<'a>(
    records: impl IntoIterator<Item = &'a EmbeddingRecord>,
    path: impl AsRef<Path>,
    dimension: usize,
) -> Result<ShardSummary, EmbeddingError> {
    let mut w = ShardWriter::create(path, dimension)?;
    for r in records {
        w.push(r)?;
    }
    w.finish()
}

/// Streaming shard reader: keys and payload are read through two cursors,
/// so memory use does not grow with the record count.
pub struct ShardReader {
    header: ShardHeader,
    keys: BufReader<File>,
    key_offset: u64,
    payload: BufReader<File>,
    payload_offset: u64,
    key_hash: Sha256,
    payload_hash: Sha256,
    next_index: u64,
    finished: bool,
    buf: Vec<u8>,
}

impl ShardReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        let mut keys = BufReader::new(File::open(path)?);
        let mut head = [0u8; HEADER_LEN as usize];
        read_exact_at(&mut keys, &mut head, 0)?;
        if head[..8] != SHARD_MAGIC {
            return Err(EmbeddingError::BadMagic(path.display().to_string()));
        }
        let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
        if version != SHARD_VERSION {
            return Err(EmbeddingError::UnsupportedVersion(version));
        }
        let dimension = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(head[16..24].try_into().unwrap());
        let key_mode = KeyMode::from_byte(head[24])
            .ok_or_else(|| EmbeddingError::CorruptShard(format!("unknown key mode {}", head[24])))?;
        let key_table_len = u64::from_le_bytes(head[25..33].try_into().unwrap());
        let header = ShardHeader {
            version,
            dimension,
            count,
            key_mode,
            key_table_len,
        };

        let mut payload = BufReader::new(File::open(path)?);
        payload.seek(SeekFrom::Start(header.payload_offset()))?;
        Ok(ShardReader {
            header,
            keys,
            key_offset: HEADER_LEN,
            payload,
            payload_offset: header.payload_offset(),
            key_hash: Sha256::new(),
            payload_hash: Sha256::new(),
            next_index: 0,
            finished: false,
            buf: vec![0u8; dimension * 4],
        })
    }

    /// Opens a shard and insists on a particular dimension.
    pub fn open_expecting(path: impl AsRef<Path>, dimension: usize) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        let r = Self::open(path)?;
        if r.header.dimension != dimension {
            return Err(EmbeddingError::DimensionMismatch {
                key: path.display().to_string(),
                expected: dimension,
                found: r.header.dimension,
            });
        }
        Ok(r)
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    fn read_key_str(&mut self) -> Result<String, EmbeddingError> {
        let start = self.key_offset;
        let mut len = [0u8; 4];
        read_exact_at(&mut self.keys, &mut len, start)?;
        let n = u32::from_le_bytes(len) as usize;
        let mut bytes = vec![0u8; n];
        read_exact_at(&mut self.keys, &mut bytes, start)?;
        self.key_offset += 4 + n as u64;
        if self.key_offset > self.header.payload_offset() {
            return Err(EmbeddingError::CorruptShard(
                "key table overruns its declared length".into(),
            ));
        }
        self.key_hash.update(len);
        self.key_hash.update(&bytes);
        String::from_utf8(bytes)
            .map_err(|_| EmbeddingError::CorruptShard(format!("key at offset {start} is not UTF-8")))
    }

    fn read_record(&mut self) -> Result<EmbeddingRecord, EmbeddingError> {
        let key = match self.header.key_mode {
            KeyMode::PairId => EmbeddingKey::Pair {
                pair_id: self.read_key_str()?,
            },
            KeyMode::Caption => {
                let image_id = self.read_key_str()?;
                let caption_id = self.read_key_str()?;
                EmbeddingKey::Caption {
                    image_id,
                    caption_id,
                }
            }
        };
        let start = self.payload_offset;
        let mut buf = std::mem::take(&mut self.buf);
        let res = read_exact_at(&mut self.payload, &mut buf, start);
        self.buf = buf;
        res?;
        self.payload_offset += self.buf.len() as u64;
        self.payload_hash.update(&self.buf);
        let vector: Vec<f32> = self
            .buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(EmbeddingError::NonFiniteVector {
                key: key.to_string(),
            });
        }
        Ok(EmbeddingRecord { key, vector })
    }

    fn verify_checksum(&mut self) -> Result<(), EmbeddingError> {
        if self.key_offset != self.header.payload_offset() {
            return Err(EmbeddingError::CorruptShard(
                "key table length does not match its declared length".into(),
            ));
        }
        let mut stored = [0u8; 8];
        read_exact_at(&mut self.payload, &mut stored, self.payload_offset)?;
        let stored = u64::from_le_bytes(stored);
        let computed = combine_checksum(
            std::mem::take(&mut self.key_hash),
            std::mem::take(&mut self.payload_hash),
        );
        if stored != computed {
            return Err(EmbeddingError::ChecksumMismatch { stored, computed });
        }
        Ok(())
    }
}

impl Iterator for ShardReader {
    type Item = Result<EmbeddingRecord, EmbeddingError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        if self.next_index == self.header.count {
            self.finished = true;
            return match self.verify_checksum() {
                Ok(()) => None,
                Err(e) => Some(Err(e)),
            };
        }
        self.next_index += 1;
        let r = self.read_record();
        if r.is_err() {
            self.finished = true;
        }
        Some(r)
    }
}

/// `read_exact` that reports truncation as `TruncatedShard` at `offset`.
fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: u64) -> Result<(), EmbeddingError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => EmbeddingError::TruncatedShard { offset },
        _ => EmbeddingError::Io(e),
    })
}
