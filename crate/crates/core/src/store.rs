//! Images, candidate captions and human preference rankings.
//!
//! The durable form is an append-only log: a header line followed by one
//! JSON object per line (`image`, `caption` or `record`). Loading replays
//! every line through the same validation used by live appends, so a log
//! that loads is always internally consistent.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{validate_id, InvalidId};

pub const LOG_SCHEMA: &str = "sift-preference-log";
pub const LOG_VERSION: u32 = 1;
pub const MIN_CAPTIONS_PER_IMAGE: usize = 2;
pub const MAX_CAPTIONS_PER_IMAGE: usize = 16;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    InvalidId(#[from] InvalidId),
    #[error("UnknownImage: {0}")]
    UnknownImage(String),
    #[error("UnknownCaption: {caption_id} is not a caption of image {image_id}")]
    UnknownCaption { image_id: String, caption_id: String },
    #[error("DuplicateImage: {0}")]
    DuplicateImage(String),
    #[error("DuplicateCaption: {caption_id} already exists for image {image_id}")]
    DuplicateCaption { image_id: String, caption_id: String },
    #[error("DuplicateRecordId: {0}")]
    DuplicateRecordId(String),
    #[error("RankingNotPartition: {0}")]
    RankingNotPartition(String),
    #[error("InvalidCaption: {0}")]
    InvalidCaption(String),
    #[error("InvalidImage: {0}")]
    InvalidImage(String),
    #[error("TooFewCaptions: image {image_id} has {count} captions, at least {MIN_CAPTIONS_PER_IMAGE} required")]
    TooFewCaptions { image_id: String, count: usize },
    #[error("TooManyCaptions: image {0} already has {MAX_CAPTIONS_PER_IMAGE} captions")]
    TooManyCaptions(String),
    #[error("CaptionSetFrozen: image {0} already has preference records")]
    CaptionSetFrozen(String),
    #[error("InvalidCriteria: {0}")]
    InvalidCriteria(String),
    #[error("CorruptLog: line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("SchemaVersionMismatch: log has {found}, expected {expected}")]
    SchemaVersionMismatch { found: String, expected: String },
    #[error("StoreExists: {0}")]
    StoreExists(PathBuf),
    #[error("Io: {0}")]
    Io(#[from] io::Error),
}

impl StoreError {
    /// Short error name, as surfaced by the CLI.
    pub fn name(&self) -> &'static str {
        match self {
            StoreError::InvalidId(_) => "InvalidId",
            StoreError::UnknownImage(_) => "UnknownImage",
            StoreError::UnknownCaption { .. } => "UnknownCaption",
            StoreError::DuplicateImage(_) => "DuplicateImage",
            StoreError::DuplicateCaption { .. } => "DuplicateCaption",
            StoreError::DuplicateRecordId(_) => "DuplicateRecordId",
            StoreError::RankingNotPartition(_) => "RankingNotPartition",
            StoreError::InvalidCaption(_) => "InvalidCaption",
            StoreError::InvalidImage(_) => "InvalidImage",
            StoreError::TooFewCaptions { .. } => "TooFewCaptions",
            StoreError::TooManyCaptions(_) => "TooManyCaptions",
            StoreError::CaptionSetFrozen(_) => "CaptionSetFrozen",
            StoreError::InvalidCriteria(_) => "InvalidCriteria",
            StoreError::CorruptLog { .. } => "CorruptLog",
            StoreError::SchemaVersionMismatch { .. } => "SchemaVersionMismatch",
            StoreError::StoreExists(_) => "StoreExists",
            StoreError::Io(_) => "Io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageSource {
    DatasetNative,
    External,
}

/// Where a candidate caption came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionSource {
    DatasetSampled,
    ModelRewritten,
    HumanRewritten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub uri: String,
    pub source_tag: ImageSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionCandidate {
    pub caption_id: String,
    pub image_id: String,
    pub text: String,
    pub source: CaptionSource,
}

/// A 0-2 grade: absent, partial, full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Grade(u8);

impl Grade {
    pub const ABSENT: Grade = Grade(0);
    pub const PARTIAL: Grade = Grade(1);
    pub const FULL: Grade = Grade(2);

    pub fn new(value: u8) -> Result<Self, StoreError> {
        Grade::try_from(value)
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Grade {
    type Error = StoreError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        if value <= 2 {
            Ok(Grade(value))
        } else {
            Err(StoreError::InvalidCriteria(format!(
                "grade {value} outside 0..=2"
            )))
        }
    }
}

impl From<Grade> for u8 {
    fn from(g: Grade) -> u8 {
        g.0
    }
}

/// Per-caption checklist filled in by a labeler. Stored for reference only;
/// training consumes the ranking alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriteriaAnnotation {
    pub accuracy: bool,
    pub completeness: Grade,
    pub vividness: Grade,
    pub context: Grade,
}

/// One labeler's ranking of an image's captions. `ranking[0]` is the best
/// group; captions inside a group are tied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub record_id: String,
    pub image_id: String,
    pub labeler_id: String,
    pub ranking: Vec<Vec<String>>,
    #[serde(default)]
    pub criteria: BTreeMap<String, CriteriaAnnotation>,
    pub timestamp: DateTime<Utc>,
}

impl PreferenceRecord {
    /// Fewer than two rank groups: every caption is tied, no pair can be formed.
    pub fn is_degenerate(&self) -> bool {
        self.ranking.len() < 2
    }

    pub fn caption_count(&self) -> usize {
        self.ranking.iter().map(Vec::len).sum()
    }

    /// Checks the ranking is a partition of `captions`: groups non-empty,
    /// pairwise disjoint, and jointly covering every caption exactly once.
    pub fn check_partition<'a>(
        &self,
        captions: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), StoreError> {
        let expected: BTreeSet<&str> = captions.into_iter().collect();
        let mut seen = BTreeSet::new();
        if self.ranking.is_empty() {
            return Err(StoreError::RankingNotPartition("ranking is empty".into()));
        }
        for (g, group) in self.ranking.iter().enumerate() {
            if group.is_empty() {
                return Err(StoreError::RankingNotPartition(format!(
                    "rank group {g} is empty"
                )));
            }
            for id in group {
                if !expected.contains(id.as_str()) {
                    return Err(StoreError::UnknownCaption {
                        image_id: self.image_id.clone(),
                        caption_id: id.clone(),
                    });
                }
                if !seen.insert(id.as_str()) {
                    return Err(StoreError::RankingNotPartition(format!(
                        "caption {id} appears more than once"
                    )));
                }
            }
        }
        if let Some(missing) = expected.difference(&seen).next() {
            return Err(StoreError::RankingNotPartition(format!(
                "caption {missing} is not ranked"
            )));
        }
        for key in self.criteria.keys() {
            if !seen.contains(key.as_str()) {
                return Err(StoreError::InvalidCriteria(format!(
                    "criteria given for caption {key} which is not in the ranking"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub version: u32,
    pub store_id: String,
}

impl LogHeader {
    pub fn new(store_id: impl Into<String>) -> Self {
        LogHeader {
            schema: LOG_SCHEMA.to_owned(),
            version: LOG_VERSION,
            store_id: store_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum LogEntry {
    Image(ImageEntry),
    Caption(CaptionCandidate),
    Record(PreferenceRecord),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ImageSlot {
    entry: ImageEntry,
    captions: Vec<CaptionCandidate>,
    records: Vec<usize>,
}

/// In-memory preference dataset. Cloning yields an immutable snapshot that
/// can be shared across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceDataset {
    store_id: String,
    images: Vec<ImageSlot>,
    image_index: HashMap<String, usize>,
    records: Vec<PreferenceRecord>,
    record_index: HashMap<String, usize>,
}

impl PreferenceDataset {
    pub fn new(store_id: impl Into<String>) -> Self {
        PreferenceDataset {
            store_id: store_id.into(),
            images: Vec::new(),
            image_index: HashMap::new(),
            records: Vec::new(),
            record_index: HashMap::new(),
        }
    }

    pub fn store_id(&self) -> &str {
        &self.store_id
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty() && self.records.is_empty()
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn caption_count(&self) -> usize {
        self.images.iter().map(|s| s.captions.len()).sum()
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageEntry> {
        self.images.iter().map(|s| &s.entry)
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageEntry> {
        self.image_index
            .get(image_id)
            .map(|&i| &self.images[i].entry)
    }

    pub fn captions_of(&self, image_id: &str) -> Option<&[CaptionCandidate]> {
        self.image_index
            .get(image_id)
            .map(|&i| self.images[i].captions.as_slice())
    }

    pub fn captions(&self) -> impl Iterator<Item = &CaptionCandidate> {
        self.images.iter().flat_map(|s| s.captions.iter())
    }

    /// Records in append order.
    pub fn records(&self) -> &[PreferenceRecord] {
        &self.records
    }

    pub fn record(&self, record_id: &str) -> Option<&PreferenceRecord> {
        self.record_index.get(record_id).map(|&i| &self.records[i])
    }

    pub fn records_for_image(&self, image_id: &str) -> impl Iterator<Item = &PreferenceRecord> {
        let idx = self
            .image_index
            .get(image_id)
            .map(|&i| self.images[i].records.as_slice())
            .unwrap_or(&[]);
        idx.iter().map(move |&r| &self.records[r])
    }

    pub fn check_image(&self, image: &ImageEntry) -> Result<(), StoreError> {
        validate_id("image", &image.image_id)?;
        if image.uri.trim().is_empty() {
            return Err(StoreError::InvalidImage(format!(
                "image {} has an empty uri",
                image.image_id
            )));
        }
        if self.image_index.contains_key(&image.image_id) {
            return Err(StoreError::DuplicateImage(image.image_id.clone()));
        }
        Ok(())
    }

    pub fn check_caption(&self, caption: &CaptionCandidate) -> Result<(), StoreError> {
        validate_id("caption", &caption.caption_id)?;
        let slot = self.slot(&caption.image_id)?;
        if caption.text.trim().is_empty() {
            return Err(StoreError::InvalidCaption(format!(
                "caption {} has empty text",
                caption.caption_id
            )));
        }
        if !slot.records.is_empty() {
            return Err(StoreError::CaptionSetFrozen(caption.image_id.clone()));
        }
        if slot
            .captions
            .iter()
            .any(|c| c.caption_id == caption.caption_id)
        {
            return Err(StoreError::DuplicateCaption {
                image_id: caption.image_id.clone(),
                caption_id: caption.caption_id.clone(),
            });
        }
        if slot.captions.len() >= MAX_CAPTIONS_PER_IMAGE {
            return Err(StoreError::TooManyCaptions(caption.image_id.clone()));
        }
        Ok(())
    }

    /// Validates a record against the current state without mutating it.
    pub fn check_record(&self, rec: &PreferenceRecord) -> Result<(), StoreError> {
        validate_id("record", &rec.record_id)?;
        validate_id("labeler", &rec.labeler_id)?;
        let slot = self.slot(&rec.image_id)?;
        if self.record_index.contains_key(&rec.record_id) {
            return Err(StoreError::DuplicateRecordId(rec.record_id.clone()));
        }
        if slot.captions.len() < MIN_CAPTIONS_PER_IMAGE {
            return Err(StoreError::TooFewCaptions {
                image_id: rec.image_id.clone(),
                count: slot.captions.len(),
            });
        }
        rec.check_partition(slot.captions.iter().map(|c| c.caption_id.as_str()))
    }

    pub fn add_image(&mut self, image: ImageEntry) -> Result<(), StoreError> {
        self.check_image(&image)?;
        self.apply_image(image);
        Ok(())
    }

    pub fn add_caption(&mut self, caption: CaptionCandidate) -> Result<(), StoreError> {
        self.check_caption(&caption)?;
        self.apply_caption(caption);
        Ok(())
    }

    /// Appends a record; on error the dataset is left untouched.
    pub fn append_record(&mut self, rec: PreferenceRecord) -> Result<(), StoreError> {
        self.check_record(&rec)?;
        self.apply_record(rec);
        Ok(())
    }

    fn slot(&self, image_id: &str) -> Result<&ImageSlot, StoreError> {
        self.image_index
            .get(image_id)
            .map(|&i| &self.images[i])
            .ok_or_else(|| StoreError::UnknownImage(image_id.to_owned()))
    }

    fn apply_image(&mut self, image: ImageEntry) {
        self.image_index
            .insert(image.image_id.clone(), self.images.len());
        self.images.push(ImageSlot {
            entry: image,
            captions: Vec::new(),
            records: Vec::new(),
        });
    }

    fn apply_caption(&mut self, caption: CaptionCandidate) {
        let i = self.image_index[&caption.image_id];
        self.images[i].captions.push(caption);
    }

    fn apply_record(&mut self, rec: PreferenceRecord) {
        let i = self.image_index[&rec.image_id];
        let r = self.records.len();
        self.images[i].records.push(r);
        self.record_index.insert(rec.record_id.clone(), r);
        self.records.push(rec);
    }

    fn apply_entry(&mut self, entry: LogEntry) -> Result<(), StoreError> {
        match entry {
            LogEntry::Image(e) => self.add_image(e),
            LogEntry::Caption(c) => self.add_caption(c),
            LogEntry::Record(r) => self.append_record(r),
        }
    }

    /// Canonical log text: header, then every image followed by its
    /// captions, then every record in append order.
    pub fn to_log_string(&self) -> String {
        let mut out = String::new();
        let header = LogHeader::new(self.store_id.clone());
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for slot in &self.images {
            push_entry(&mut out, &LogEntry::Image(slot.entry.clone()));
            for c in &slot.captions {
                push_entry(&mut out, &LogEntry::Caption(c.clone()));
            }
        }
        for r in &self.records {
            push_entry(&mut out, &LogEntry::Record(r.clone()));
        }
        out
    }

    /// Replays log text. Line numbers in errors are 1-based.
    pub fn from_log_reader(reader: impl BufRead) -> Result<Self, StoreError> {
        let mut lines = reader.split(b'\n').enumerate();
        let header = match lines.next() {
            None => return Ok(PreferenceDataset::new("default")),
            Some((_, line)) => {
                let line = line?;
                parse_header(&line)?
            }
        };
        let mut data = PreferenceDataset::new(header.store_id);
        for (idx, line) in lines {
            let line = line?;
            let lineno = idx + 1;
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let entry: LogEntry =
                serde_json::from_slice(&line).map_err(|e| StoreError::CorruptLog {
                    line: lineno,
                    reason: e.to_string(),
                })?;
            data.apply_entry(entry).map_err(|e| StoreError::CorruptLog {
                line: lineno,
                reason: e.to_string(),
            })?;
        }
        Ok(data)
    }
}

fn push_entry(out: &mut String, entry: &LogEntry) {
    out.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
    out.push('\n');
}

fn parse_header(line: &[u8]) -> Result<LogHeader, StoreError> {
    let header: LogHeader = serde_json::from_slice(line).map_err(|e| StoreError::CorruptLog {
        line: 1,
        reason: format!("bad header: {e}"),
    })?;
    if header.schema != LOG_SCHEMA || header.version != LOG_VERSION {
        return Err(StoreError::SchemaVersionMismatch {
            found: format!("{} v{}", header.schema, header.version),
            expected: format!("{LOG_SCHEMA} v{LOG_VERSION}"),
        });
    }
    Ok(header)
}

fn entry_line(entry: &LogEntry) -> String {
    let mut s = serde_json::to_string(entry).expect("log entry serializes");
    s.push('\n');
    s
}

/// Loads a log file into memory.
pub fn load_store(path: impl AsRef<Path>) -> Result<PreferenceDataset, StoreError> {
    let file = File::open(path)?;
    PreferenceDataset::from_log_reader(BufReader::new(file))
}

/// Writes the canonical log for `data` to `path`, replacing it atomically.
pub fn export_store(data: &PreferenceDataset, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let path = path.as_ref();
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(data.to_log_string().as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
    Ok(())
}

/// A dataset backed by an append-only log file. All mutations go through
/// this single writer; each accepted append is flushed and synced before
/// the in-memory state changes.
#[derive(Debug)]
pub struct PreferenceStore {
    data: PreferenceDataset,
    path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
}

impl PreferenceStore {
    pub fn in_memory(store_id: impl Into<String>) -> Self {
        PreferenceStore {
            data: PreferenceDataset::new(store_id),
            path: None,
            writer: None,
        }
    }

    /// Creates a new log file with only a header. Fails if it already exists.
    pub fn create(path: impl AsRef<Path>, store_id: impl Into<String>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| match e.kind() {
                io::ErrorKind::AlreadyExists => StoreError::StoreExists(path.to_owned()),
                _ => StoreError::Io(e),
            })?;
        let data = PreferenceDataset::new(store_id);
        let header = LogHeader::new(data.store_id());
        let mut line = serde_json::to_string(&header).expect("header serializes");
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.sync_all()?;
        Ok(PreferenceStore {
            data,
            path: Some(path.to_owned()),
            writer: Some(BufWriter::new(file)),
        })
    }

    /// Replays an existing log and keeps it open for appends.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let data = load_store(path)?;
        let file = OpenOptions::new().append(true).open(path)?;
        if file.metadata()?.len() == 0 {
            let mut w = &file;
            let mut line = serde_json::to_string(&LogHeader::new(data.store_id()))
                .expect("header serializes");
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(PreferenceStore {
            data,
            path: Some(path.to_owned()),
            writer: Some(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn dataset(&self) -> &PreferenceDataset {
        &self.data
    }

    pub fn snapshot(&self) -> PreferenceDataset {
        self.data.clone()
    }

    pub fn add_image(&mut self, image: ImageEntry) -> Result<(), StoreError> {
        self.data.check_image(&image)?;
        self.persist(&LogEntry::Image(image.clone()))?;
        self.data.apply_image(image);
        Ok(())
    }

    pub fn add_caption(&mut self, caption: CaptionCandidate) -> Result<(), StoreError> {
        self.data.check_caption(&caption)?;
        self.persist(&LogEntry::Caption(caption.clone()))?;
        self.data.apply_caption(caption);
        Ok(())
    }

    pub fn append_record(&mut self, rec: PreferenceRecord) -> Result<(), StoreError> {
        self.data.check_record(&rec)?;
        self.persist(&LogEntry::Record(rec.clone()))?;
        self.data.apply_record(rec);
        Ok(())
    }

    /// Appends every entry of another dataset, in canonical order.
    pub fn import(&mut self, other: &PreferenceDataset) -> Result<usize, StoreError> {
        let mut n = 0;
        for slot in &other.images {
            if self.data.image(&slot.entry.image_id) != Some(&slot.entry) {
                self.add_image(slot.entry.clone())?;
                n += 1;
            }
            let existing = self
                .data
                .captions_of(&slot.entry.image_id)
                .map(|c| c.to_vec())
                .unwrap_or_default();
            for c in &slot.captions {
                if !existing.contains(c) {
                    self.add_caption(c.clone())?;
                    n += 1;
                }
            }
        }
        for r in &other.records {
            self.append_record(r.clone())?;
            n += 1;
        }
        Ok(n)
    }

    fn persist(&mut self, entry: &LogEntry) -> Result<(), StoreError> {
        if let Some(w) = self.writer.as_mut() {
            w.write_all(entry_line(entry).as_bytes())?;
            w.flush()?;
            w.get_ref().sync_data()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    pub(crate) fn ts(secs: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_700_000_000 + secs, 0).unwrap()
    }

    fn image(id: &str) -> ImageEntry {
        ImageEntry {
            image_id: id.into(),
            uri: format!("file:///images/{id}.jpg"),
            source_tag: ImageSource::DatasetNative,
        }
    }

    fn caption(image: &str, id: &str) -> CaptionCandidate {
        CaptionCandidate {
            caption_id: id.into(),
            image_id: image.into(),
            text: format!("caption {id}"),
            source: CaptionSource::DatasetSampled,
        }
    }

    fn record(id: &str, image: &str, ranking: &[&[&str]]) -> PreferenceRecord {
        PreferenceRecord {
            record_id: id.into(),
            image_id: image.into(),
            labeler_id: "alice".into(),
            ranking: ranking
                .iter()
                .map(|g| g.iter().map(|s| s.to_string()).collect())
                .collect(),
            criteria: BTreeMap::new(),
            timestamp: ts(0),
        }
    }

    fn abc() -> PreferenceDataset {
        let mut d = PreferenceDataset::new("t");
        d.add_image(image("img1")).unwrap();
        for c in ["a", "b", "c"] {
            d.add_caption(caption("img1", c)).unwrap();
        }
        d
    }

    #[test]
    fn accepts_total_order() {
        let mut d = abc();
        d.append_record(record("r1", "img1", &[&["a"], &["b"], &["c"]]))
            .unwrap();
        assert_eq!(d.record_count(), 1);
        assert!(!d.records()[0].is_degenerate());
    }

    #[test]
    fn duplicate_caption_in_ranking_is_rejected_without_mutation() {
        let mut d = abc();
        let before = d.clone();
        let err = d
            .append_record(record("r1", "img1", &[&["a"], &["a", "b"]]))
            .unwrap_err();
        assert!(matches!(err, StoreError::RankingNotPartition(_)), "{err}");
        assert_eq!(d, before);
    }

    #[test]
    fn omitted_caption_is_rejected() {
        let mut d = abc();
        let err = d
            .append_record(record("r1", "img1", &[&["a"], &["b"]]))
            .unwrap_err();
        assert!(matches!(err, StoreError::RankingNotPartition(_)));
    }

    #[test]
    fn empty_group_is_rejected() {
        let mut d = abc();
        let err = d
            .append_record(record("r1", "img1", &[&["a"], &[], &["b", "c"]]))
            .unwrap_err();
        assert!(matches!(err, StoreError::RankingNotPartition(_)));
    }

    #[test]
    fn all_tied_is_accepted_and_flagged() {
        let mut d = abc();
        d.append_record(record("r1", "img1", &[&["a", "b", "c"]]))
            .unwrap();
        assert!(d.records()[0].is_degenerate());
    }

    #[test]
    fn unknown_references_are_rejected() {
        let mut d = abc();
        assert!(matches!(
            d.append_record(record("r1", "nope", &[&["a"], &["b"]])),
            Err(StoreError::UnknownImage(_))
        ));
        assert!(matches!(
            d.append_record(record("r1", "img1", &[&["a"], &["b"], &["z"]])),
            Err(StoreError::UnknownCaption { .. })
        ));
        d.append_record(record("r1", "img1", &[&["a"], &["b"], &["c"]]))
            .unwrap();
        assert!(matches!(
            d.append_record(record("r1", "img1", &[&["c"], &["b"], &["a"]])),
            Err(StoreError::DuplicateRecordId(_))
        ));
        assert_eq!(d.record_count(), 1);
    }

    #[test]
    fn caption_limits() {
        let mut d = PreferenceDataset::new("t");
        d.add_image(image("i")).unwrap();
        d.add_caption(caption("i", "only")).unwrap();
        assert!(matches!(
            d.append_record(record("r", "i", &[&["only"]])),
            Err(StoreError::TooFewCaptions { .. })
        ));
        for k in 1..MAX_CAPTIONS_PER_IMAGE {
            d.add_caption(caption("i", &format!("c{k}"))).unwrap();
        }
        assert!(matches!(
            d.add_caption(caption("i", "overflow")),
            Err(StoreError::TooManyCaptions(_))
        ));
        let mut blank = caption("i", "blank");
        blank.text = "   ".into();
        assert!(d.add_caption(blank).is_err());
    }

    #[test]
    fn captions_freeze_once_ranked() {
        let mut d = abc();
        d.append_record(record("r1", "img1", &[&["a"], &["b"], &["c"]]))
            .unwrap();
        assert!(matches!(
            d.add_caption(caption("img1", "d")),
            Err(StoreError::CaptionSetFrozen(_))
        ));
    }

    #[test]
    fn grades_outside_range_fail_to_parse() {
        let ok: CriteriaAnnotation = serde_json::from_str(
            r#"{"accuracy":true,"completeness":2,"vividness":0,"context":1}"#,
        )
        .unwrap();
        assert_eq!(ok.completeness, Grade::FULL);
        let bad = serde_json::from_str::<CriteriaAnnotation>(
            r#"{"accuracy":true,"completeness":3,"vividness":0,"context":1}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn criteria_for_unranked_caption_rejected() {
        let mut d = abc();
        let mut r = record("r1", "img1", &[&["a"], &["b"], &["c"]]);
        r.criteria.insert(
            "zz".into(),
            CriteriaAnnotation {
                accuracy: true,
                completeness: Grade::FULL,
                vividness: Grade::FULL,
                context: Grade::FULL,
            },
        );
        assert!(d.append_record(r).is_err());
    }

    #[test]
    fn empty_file_is_empty_store() {
        let d = PreferenceDataset::from_log_reader(&b""[..]).unwrap();
        assert!(d.is_empty());
        let header_only = format!("{}\n", serde_json::to_string(&LogHeader::new("x")).unwrap());
        let d = PreferenceDataset::from_log_reader(header_only.as_bytes()).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.store_id(), "x");
    }

    #[test]
    fn truncated_last_line_names_the_line() {
        let mut d = abc();
        d.append_record(record("r1", "img1", &[&["a"], &["b"], &["c"]]))
            .unwrap();
        let text = d.to_log_string();
        let n_lines = text.lines().count();
        let cut = &text[..text.len() - 10];
        let err = PreferenceDataset::from_log_reader(cut.as_bytes()).unwrap_err();
        match err {
            StoreError::CorruptLog { line, .. } => assert_eq!(line, n_lines),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let text = r#"{"schema":"sift-preference-log","version":99,"store_id":"x"}"#;
        assert!(matches!(
            PreferenceDataset::from_log_reader(text.as_bytes()),
            Err(StoreError::SchemaVersionMismatch { .. })
        ));
    }

    #[test]
    fn durable_store_replays_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.log");
        let mut s = PreferenceStore::create(&path, "durable").unwrap();
        s.add_image(image("img1")).unwrap();
        for c in ["a", "b", "c"] {
            s.add_caption(caption("img1", c)).unwrap();
        }
        s.append_record(record("r1", "img1", &[&["b"], &["a", "c"]]))
            .unwrap();
        assert!(s
            .append_record(record("r2", "img1", &[&["b"], &["b"]]))
            .is_err());
        let loaded = load_store(&path).unwrap();
        assert_eq!(&loaded, s.dataset());
        drop(s);
        let mut reopened = PreferenceStore::open(&path).unwrap();
        reopened
            .append_record(record("r2", "img1", &[&["c"], &["a"], &["b"]]))
            .unwrap();
        assert_eq!(load_store(&path).unwrap().record_count(), 2);
        assert!(matches!(
            PreferenceStore::create(&path, "again"),
            Err(StoreError::StoreExists(_))
        ));
    }
}
