//! Streaming event deduplication and staged threat assessment for video
//! surveillance descriptions.
//!
//! Frame descriptions are embedded, collapsed into semantic clusters, and fed
//! to a reasoner that produces three-tier threat reports per time window.

pub mod cli;
pub mod cot;
pub mod dedup;
pub mod embedder;
pub mod eval;
pub mod event_model;
pub mod loss_math;
pub mod persistence;
pub mod stream;
pub mod textualizer;

mod codec;
mod http;

pub use cot::{CotError, Reasoner};
pub use dedup::{Classification, DedupError, EventCluster, IngestOutcome, KnowledgeBase, TimelineEntry};
pub use embedder::{cosine_sim, embed, EmbedError, EmbeddingVector, HashingEncoder, TextEncoder};
pub use eval::{compute_ap, compute_auc, MetricError};
pub use event_model::{EventRecord, HoipTuple, PipelineConfig, ThreatReport, Verdict};
pub use persistence::{replay_log, snapshot_load, snapshot_save, PersistenceError};
pub use stream::{FrameMessage, Pipeline, PipelineError, WindowReport};
pub use textualizer::render_description;
