//! Task dispensing and submission, independent of HTTP.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sift_core::digest::{sha256, sha256_hex, truncate_u64};
use sift_core::ids::{validate_id, InvalidId};
use sift_core::rng::{self, Domain};
use sift_core::store::{CriteriaAnnotation, PreferenceRecord, PreferenceStore, StoreError};
use thiserror::Error;

use crate::clock::Clock;

pub const SCHEMA_VERSION: u32 = 1;

/// The four judging criteria shown with every task.
pub const CRITERIA: [CriterionText; 4] = [
    CriterionText {
        key: "accuracy",
        prompt: "Everything the caption states is actually visible in the image; nothing is made up.",
    },
    CriterionText {
        key: "completeness",
        prompt: "The caption names the image's principal objects and leaves out as few of them as it can.",
    },
    CriterionText {
        key: "vividness",
        prompt: "The caption gives particulars of those objects: how many there are, how they look, what they are doing, what state they are in.",
    },
    CriterionText {
        key: "context",
        prompt: "The caption says where the scene takes place or what is in the background.",
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CriterionText {
    pub key: &'static str,
    pub prompt: &'static str,
}

#[derive(Debug, Error)]
pub enum BoardError {
    #[error("UnknownLabeler: {0}")]
    UnknownLabeler(String),
    #[error("UnknownTask: {0}")]
    UnknownTask(String),
    #[error("NoTasksRemaining: nothing left for labeler {0}")]
    NoTasksRemaining(String),
    #[error("LeaseExpired: labeler {labeler_id} holds no active lease on task {task_id}")]
    LeaseExpired { task_id: String, labeler_id: String },
    #[error("SchemaVersionMismatch: payload has version {found}, service speaks {expected}")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    InvalidId(#[from] InvalidId),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl BoardError {
    pub fn name(&self) -> &'static str {
        match self {
            BoardError::UnknownLabeler(_) => "UnknownLabeler",
            BoardError::UnknownTask(_) => "UnknownTask",
            BoardError::NoTasksRemaining(_) => "NoTasksRemaining",
            BoardError::LeaseExpired { .. } => "LeaseExpired",
            BoardError::SchemaVersionMismatch { .. } => "SchemaVersionMismatch",
            BoardError::InvalidId(_) => "InvalidId",
            BoardError::Store(e) => e.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionView {
    pub caption_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaseView {
    pub labeler_id: String,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub schema_version: u32,
    pub task_id: String,
    pub image_id: String,
    pub image_uri: String,
    /// Service path that serves or redirects to the image.
    pub image_url: String,
    /// Captions in presentation order.
    pub captions: Vec<CaptionView>,
    /// Seed that produced the presentation order.
    pub shuffle_seed: u64,
    pub criteria: Vec<CriterionEntry>,
    pub lease: LeaseView,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionEntry {
    pub key: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionPayload {
    pub schema_version: u32,
    pub task_id: String,
    pub labeler_id: String,
    pub ranking: Vec<Vec<String>>,
    #[serde(default)]
    pub criteria: BTreeMap<String, CriteriaAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionAck {
    pub schema_version: u32,
    pub record_id: String,
    /// True when this was a retry of an already stored submission.
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub schema_version: u32,
    /// Rankable images times the replication factor.
    pub total_tasks: usize,
    /// Stored rankings that count towards `total_tasks`.
    pub annotated: usize,
    pub leased: usize,
    pub completed_images: usize,
    pub per_labeler: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
struct Lease {
    labeler_id: String,
    expires_at: DateTime<Utc>,
}

/// Leases, labelers and the preference store, with no HTTP concerns. The
/// service wraps it in a mutex, which linearizes every operation.
pub struct TaskBoard {
    store: PreferenceStore,
    clock: Arc<dyn Clock>,
    lease_ttl: Duration,
    replication: usize,
    seed: u64,
    labelers: BTreeSet<String>,
    /// Keyed by task id. Leases live only in memory: after a restart every
    /// task is free again, and accepted submissions are already in the log.
    leases: HashMap<String, Lease>,
}

impl TaskBoard {
    pub fn new(
        store: PreferenceStore,
        clock: Arc<dyn Clock>,
        lease_ttl: Duration,
        replication: usize,
        seed: u64,
    ) -> Self {
        let labelers = store
            .dataset()
            .records()
            .iter()
            .map(|r| r.labeler_id.clone())
            .collect();
        TaskBoard {
            store,
            clock,
            lease_ttl,
            replication: replication.max(1),
            seed,
            labelers,
            leases: HashMap::new(),
        }
    }

    pub fn store(&self) -> &PreferenceStore {
        &self.store
    }

    pub fn register_labeler(&mut self, labeler_id: &str) -> Result<bool, BoardError> {
        validate_id("labeler", labeler_id)?;
        Ok(self.labelers.insert(labeler_id.to_string()))
    }

    pub fn is_registered(&self, labeler_id: &str) -> bool {
        self.labelers.contains(labeler_id)
    }

    /// Stable record id for one labeler's ranking of one task, so retries
    /// map onto the same record.
    pub fn record_id(task_id: &str, labeler_id: &str) -> String {
        let h = sha256_hex(format!("{task_id}\n{labeler_id}").as_bytes());
        format!("rec-{}", &h[..20])
    }

    fn shuffle_seed(&self, task_id: &str) -> u64 {
        truncate_u64(&sha256(task_id.as_bytes())) ^ self.seed
    }

    fn eligible(&self, image_id: &str) -> bool {
        self.store
            .dataset()
            .captions_of(image_id)
            .is_some_and(|c| c.len() >= sift_core::store::MIN_CAPTIONS_PER_IMAGE)
    }

    fn labelers_of(&self, image_id: &str) -> BTreeSet<&str> {
        self.store
            .dataset()
            .records_for_image(image_id)
            .map(|r| r.labeler_id.as_str())
            .collect()
    }

    fn active_lease(&self, task_id: &str, now: DateTime<Utc>) -> Option<&Lease> {
        self.leases.get(task_id).filter(|l| l.expires_at > now)
    }

    /// Leases the next open task to `labeler_id`. A labeler asking again
    /// while holding an active lease gets the same task back.
    pub fn next_task(&mut self, labeler_id: &str) -> Result<AnnotationTask, BoardError> {
        if !self.is_registered(labeler_id) {
            return Err(BoardError::UnknownLabeler(labeler_id.to_string()));
        }
        let now = self.clock.now();
        self.leases.retain(|_, l| l.expires_at > now);

        let held = self
            .leases
            .iter()
            .filter(|(_, l)| l.labeler_id == labeler_id)
            .map(|(t, _)| t.clone())
            .min();
        let task_id = match held {
            Some(t) => t,
            None => {
                let data = self.store.dataset();
                let pick = data
                    .images()
                    .map(|i| i.image_id.as_str())
                    .find(|&img| {
                        let done = self.labelers_of(img);
                        self.eligible(img)
                            && done.len() < self.replication
                            && !done.contains(labeler_id)
                            && !self.leases.contains_key(img)
                    })
                    .map(str::to_string);
                let task_id =
                    pick.ok_or_else(|| BoardError::NoTasksRemaining(labeler_id.to_string()))?;
                self.leases.insert(
                    task_id.clone(),
                    Lease {
                        labeler_id: labeler_id.to_string(),
                        expires_at: now + self.lease_ttl,
                    },
                );
                task_id
            }
        };
        Ok(self.render(&task_id))
    }

    fn render(&self, task_id: &str) -> AnnotationTask {
        let data = self.store.dataset();
        let image = data.image(task_id).expect("tasks are images");
        let mut captions: Vec<CaptionView> = data
            .captions_of(task_id)
            .unwrap_or_default()
            .iter()
            .map(|c| CaptionView {
                caption_id: c.caption_id.clone(),
                text: c.text.clone(),
            })
            .collect();
        let shuffle_seed = self.shuffle_seed(task_id);
        captions.shuffle(&mut rng::stream(shuffle_seed, Domain::Task, 0));
        let lease = &self.leases[task_id];
        AnnotationTask {
            schema_version: SCHEMA_VERSION,
            task_id: task_id.to_string(),
            image_id: image.image_id.clone(),
            image_uri: image.uri.clone(),
            image_url: format!("/image/{}", image.image_id),
            captions,
            shuffle_seed,
            criteria: CRITERIA
                .iter()
                .map(|c| CriterionEntry {
                    key: c.key.to_string(),
                    prompt: c.prompt.to_string(),
                })
                .collect(),
            lease: LeaseView {
                labeler_id: lease.labeler_id.clone(),
                expires_at: lease.expires_at,
            },
        }
    }

    /// Stores a ranking. Retrying an accepted submission returns the same
    /// record id without storing anything.
    pub fn submit(&mut self, payload: SubmissionPayload) -> Result<SubmissionAck, BoardError> {
        if payload.schema_version != SCHEMA_VERSION {
            return Err(BoardError::SchemaVersionMismatch {
                found: payload.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        if !self.is_registered(&payload.labeler_id) {
            return Err(BoardError::UnknownLabeler(payload.labeler_id));
        }
        if self.store.dataset().image(&payload.task_id).is_none() {
            return Err(BoardError::UnknownTask(payload.task_id));
        }
        let record_id = Self::record_id(&payload.task_id, &payload.labeler_id);
        if self.store.dataset().record(&record_id).is_some() {
            return Ok(SubmissionAck {
                schema_version: SCHEMA_VERSION,
                record_id,
                duplicate: true,
            });
        }
        let now = self.clock.now();
        let holds = self
            .active_lease(&payload.task_id, now)
            .is_some_and(|l| l.labeler_id == payload.labeler_id);
        if !holds {
            return Err(BoardError::LeaseExpired {
                task_id: payload.task_id,
                labeler_id: payload.labeler_id,
            });
        }
        let record = PreferenceRecord {
            record_id: record_id.clone(),
            image_id: payload.task_id.clone(),
            labeler_id: payload.labeler_id,
            ranking: payload.ranking,
            criteria: payload.criteria,
            timestamp: now,
        };
        self.store.append_record(record)?;
        self.leases.remove(&payload.task_id);
        tracing::info!(task = %payload.task_id, record = %record_id, "submission stored");
        Ok(SubmissionAck {
            schema_version: SCHEMA_VERSION,
            record_id,
            duplicate: false,
        })
    }

    pub fn progress(&self) -> Progress {
        let now = self.clock.now();
        let data = self.store.dataset();
        let mut total = 0;
        let mut annotated = 0;
        let mut completed = 0;
        for img in data.images() {
            if !self.eligible(&img.image_id) {
                continue;
            }
            total += self.replication;
            let n = self.labelers_of(&img.image_id).len().min(self.replication);
            annotated += n;
            completed += (n == self.replication) as usize;
        }
        let mut per_labeler: BTreeMap<String, usize> = BTreeMap::new();
        for r in data.records() {
            *per_labeler.entry(r.labeler_id.clone()).or_default() += 1;
        }
        Progress {
            schema_version: SCHEMA_VERSION,
            total_tasks: total,
            annotated,
            leased: self.leases.values().filter(|l| l.expires_at > now).count(),
            completed_images: completed,
            per_labeler,
        }
    }
}
