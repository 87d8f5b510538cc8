//! Annotation service: hands out caption-ranking tasks to labelers under
//! time-limited leases and records their rankings in a preference store.
//!
//! A task is one image with its candidate captions. With a replication
//! factor `r`, each image is ranked by up to `r` distinct labelers.

mod board;
mod clock;
mod config;
mod http;

pub use board::{
    AnnotationTask, BoardError, CaptionView, CriterionText, LeaseView, Progress, SubmissionAck,
    SubmissionPayload, TaskBoard, CRITERIA, SCHEMA_VERSION,
};
pub use clock::{Clock, ManualClock, SystemClock};
pub use config::{ConfigError, ServiceConfig};
pub use http::{router, serve, AppState, ServeError};
