//! Domain types shared across the pipeline and validation of inbound records.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::EmbeddingVector;

/// One human / object / interaction / place observation extracted from a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoipTuple {
    pub human: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    pub interaction: String,
    pub place: String,
    pub confidence: f64,
}

impl HoipTuple {
    pub fn new(
        human: impl Into<String>,
        object: Option<&str>,
        interaction: impl Into<String>,
        place: impl Into<String>,
        confidence: f64,
    ) -> Self {
        Self {
            human: human.into(),
            object: object.map(str::to_owned),
            interaction: interaction.into(),
            place: place.into(),
            confidence,
        }
    }
}

/// Action and place label sets a deployment accepts. An absent set accepts any label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    pub actions: Option<BTreeSet<String>>,
    pub places: Option<BTreeSet<String>>,
}

impl Vocabulary {
    pub fn new<A, P, S1, S2>(actions: A, places: P) -> Self
    where
        A: IntoIterator<Item = S1>,
        P: IntoIterator<Item = S2>,
        S1: Into<String>,
        S2: Into<String>,
    {
        Self {
            actions: Some(actions.into_iter().map(Into::into).collect()),
            places: Some(places.into_iter().map(Into::into).collect()),
        }
    }

    fn accepts_action(&self, action: &str) -> bool {
        self.actions.as_ref().is_none_or(|s| s.contains(action))
    }

    fn accepts_place(&self, place: &str) -> bool {
        self.places.as_ref().is_none_or(|s| s.contains(place))
    }
}

/// A timestamped textual event with its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub id: u64,
    pub timestamp: f64,
    pub frame_id: i64,
    pub description: String,
    pub embedding: EmbeddingVector,
    #[serde(default)]
    pub tuples: Vec<HoipTuple>,
}

/// Unvalidated record fields, as decoded from the wire or an event log.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub id: u64,
    pub timestamp: f64,
    pub frame_id: i64,
    pub description: String,
    pub embedding: Vec<f32>,
    pub tuples: Vec<HoipTuple>,
}

impl From<EventRecord> for RawRecord {
    fn from(r: EventRecord) -> Self {
        Self {
            id: r.id,
            timestamp: r.timestamp,
            frame_id: r.frame_id,
            description: r.description,
            embedding: r.embedding.into_values(),
            tuples: r.tuples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Normal,
    Suspicious,
    Threat,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Normal => "NORMAL",
            Verdict::Suspicious => "SUSPICIOUS",
            Verdict::Threat => "THREAT",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProducedBy {
    #[serde(rename = "LLM")]
    Llm,
    #[serde(rename = "RULE_FALLBACK")]
    RuleFallback,
}

/// Score cut points mapping a threat score onto a [`Verdict`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerdictBands {
    /// Scores strictly below this are NORMAL.
    pub suspicious_from: f64,
    /// Scores strictly above this are THREAT.
    pub threat_above: f64,
}

impl Default for VerdictBands {
    fn default() -> Self {
        Self {
            suspicious_from: 0.3,
            threat_above: 0.7,
        }
    }
}

impl VerdictBands {
    pub fn verdict(&self, score: f64) -> Verdict {
        if score < self.suspicious_from {
            Verdict::Normal
        } else if score > self.threat_above {
            Verdict::Threat
        } else {
            Verdict::Suspicious
        }
    }
}

/// A video-level threat assessment over one reporting window.
///
/// Field order matches the report output record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreatReport {
    pub window_start: f64,
    pub window_end: f64,
    pub threat_score: f64,
    pub verdict: Verdict,
    pub tier1_scene: String,
    pub tier2_semantics: String,
    pub tier3_narrative: String,
    pub supporting_event_ids: Vec<u64>,
    pub produced_by: ProducedBy,
}

/// Target sampling rates studied for offline runs, plus the achieved real-time rate.
pub const FPS_PRESETS: [f64; 4] = [1.875, 1.5, 1.25, 1.318];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Embedding dimension.
    pub dim: usize,
    /// Cosine-similarity threshold above which an event is redundant.
    pub tau_sim: f64,
    pub target_fps: f64,
    /// Seconds of stream time between periodic reports.
    pub reasoning_interval: f64,
    pub llm_endpoint: Option<String>,
    pub fallback_enabled: bool,
    /// When false every event opens its own cluster (ablation baseline).
    pub dedup_enabled: bool,
    pub bands: VerdictBands,
    pub vocabulary: Vocabulary,
    /// Bound of the queue between ingestion and processing.
    pub queue_capacity: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dim: 384,
            tau_sim: 0.90,
            target_fps: 1.25,
            reasoning_interval: 5.0,
            llm_endpoint: None,
            fallback_enabled: true,
            dedup_enabled: true,
            bands: VerdictBands::default(),
            vocabulary: Vocabulary::default(),
            queue_capacity: 1024,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("tau_sim must lie in (0, 1), got {0}")]
    Tau(f64),
    #[error("target_fps must be positive, got {0}")]
    Fps(f64),
    #[error("embedding dimension must be at least 8, got {0}")]
    Dim(usize),
    #[error("reasoning_interval must be positive, got {0}")]
    Interval(f64),
    #[error("verdict bands must satisfy 0 <= suspicious_from <= threat_above <= 1")]
    Bands,
    #[error("queue capacity must be positive")]
    Queue,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tau_sim > 0.0 && self.tau_sim < 1.0) {
            return Err(ConfigError::Tau(self.tau_sim));
        }
        if !(self.target_fps > 0.0 && self.target_fps.is_finite()) {
            return Err(ConfigError::Fps(self.target_fps));
        }
        if self.dim < 8 {
            return Err(ConfigError::Dim(self.dim));
        }
        if self.reasoning_interval.is_nan() || self.reasoning_interval <= 0.0 {
            return Err(ConfigError::Interval(self.reasoning_interval));
        }
        let b = self.bands;
        if !(0.0 <= b.suspicious_from && b.suspicious_from <= b.threat_above && b.threat_above <= 1.0) {
            return Err(ConfigError::Bands);
        }
        if self.queue_capacity == 0 {
            return Err(ConfigError::Queue);
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error("REJECT_EMPTY_DESCRIPTION: event description is empty")]
    EmptyDescription,
    #[error("REJECT_BAD_DIM: embedding has {actual} components, expected {expected}")]
    BadDim { expected: usize, actual: usize },
    #[error("REJECT_TIME_REGRESSION: timestamp {timestamp} precedes {previous}")]
    TimeRegression { previous: f64, timestamp: f64 },
    #[error("REJECT_BAD_TIMESTAMP: timestamp {0} is negative or not finite")]
    BadTimestamp(f64),
    #[error("REJECT_BAD_NORM: embedding norm {0} is not within 1e-3 of 1")]
    BadNorm(f64),
    #[error("REJECT_BAD_TUPLE: {0}")]
    BadTuple(String),
}

const NORM_TOLERANCE: f64 = 1e-6;
const RENORMALIZE_TOLERANCE: f64 = 1e-3;
const TIME_SLACK: f64 = 1e-6;

fn validate_tuple(t: &HoipTuple, vocab: &Vocabulary) -> Result<(), RecordError> {
    if t.human.trim().is_empty() {
        return Err(RecordError::BadTuple("empty human label".into()));
    }
    if t.interaction.trim().is_empty() || !vocab.accepts_action(&t.interaction) {
        return Err(RecordError::BadTuple(format!("unknown interaction {:?}", t.interaction)));
    }
    if t.place.trim().is_empty() || !vocab.accepts_place(&t.place) {
        return Err(RecordError::BadTuple(format!("unknown place {:?}", t.place)));
    }
    if !(0.0..=1.0).contains(&t.confidence) {
        return Err(RecordError::BadTuple(format!("confidence {} outside [0, 1]", t.confidence)));
    }
    Ok(())
}

/// Checks raw record fields against every record invariant.
///
/// `previous_timestamp` is the timestamp of the last accepted record in the same
/// stream. An embedding whose norm is within 1e-3 of one is renormalized; one
/// already within 1e-6 is kept bit-for-bit, which makes validation idempotent.
pub fn validate_record(
    raw: RawRecord,
    config: &PipelineConfig,
    previous_timestamp: Option<f64>,
) -> Result<EventRecord, RecordError> {
    if raw.description.trim().is_empty() {
        return Err(RecordError::EmptyDescription);
    }
    if raw.embedding.len() != config.dim {
        return Err(RecordError::BadDim {
            expected: config.dim,
            actual: raw.embedding.len(),
        });
    }
    if !(raw.timestamp >= 0.0 && raw.timestamp.is_finite()) {
        return Err(RecordError::BadTimestamp(raw.timestamp));
    }
    if let Some(prev) = previous_timestamp {
        if raw.timestamp < prev - TIME_SLACK {
            return Err(RecordError::TimeRegression {
                previous: prev,
                timestamp: raw.timestamp,
            });
        }
    }
    for t in &raw.tuples {
        validate_tuple(t, &config.vocabulary)?;
    }

    let mut values = raw.embedding;
    let norm = crate::embedder::l2_norm(&values);
    if !norm.is_finite() || (norm - 1.0).abs() > RENORMALIZE_TOLERANCE {
        return Err(RecordError::BadNorm(norm));
    }
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        for v in values.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
    let embedding = EmbeddingVector::from_unit(values).map_err(|_| RecordError::BadNorm(norm))?;

    Ok(EventRecord {
        id: raw.id,
        timestamp: raw.timestamp,
        frame_id: raw.frame_id,
        description: raw.description,
        embedding,
        tuples: raw.tuples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::embed;

    fn config(dim: usize) -> PipelineConfig {
        PipelineConfig {
            dim,
            ..PipelineConfig::default()
        }
    }

    fn raw(embedding: Vec<f32>) -> RawRecord {
        RawRecord {
            id: 3,
            timestamp: 2.0,
            frame_id: 60,
            description: "a man is running in a park".into(),
            embedding,
            tuples: vec![HoipTuple::new("man", None, "running", "park", 0.8)],
        }
    }

    #[test]
    fn slightly_off_norm_is_renormalized() {
        let mut v = vec![0.0f32; 8];
        v[0] = 1.0004;
        let rec = validate_record(raw(v), &config(8), None).unwrap();
        let n = crate::embedder::l2_norm(rec.embedding.values());
        assert!((n - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn far_off_norm_is_rejected() {
        let mut v = vec![0.0f32; 8];
        v[0] = 1.5;
        assert!(matches!(
            validate_record(raw(v), &config(8), None),
            Err(RecordError::BadNorm(_))
        ));
    }

    #[test]
    fn empty_description_rejected() {
        let mut r = raw(embed("x", 8).into_values());
        r.description = String::new();
        assert_eq!(validate_record(r, &config(8), None), Err(RecordError::EmptyDescription));
    }

    #[test]
    fn short_embedding_rejected() {
        let r = raw(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            validate_record(r, &config(8), None),
            Err(RecordError::BadDim { expected: 8, actual: 7 })
        );
    }

    #[test]
    fn time_regression_beyond_slack_rejected() {
        let r = raw(embed("x", 8).into_values());
        assert!(validate_record(r.clone(), &config(8), Some(2.0 + 5e-7)).is_ok());
        assert!(matches!(
            validate_record(r, &config(8), Some(2.1)),
            Err(RecordError::TimeRegression { .. })
        ));
    }

    #[test]
    fn vocabulary_and_confidence_checked() {
        let mut cfg = config(8);
        cfg.vocabulary = Vocabulary::new(["walking"], ["park"]);
        let r = raw(embed("x", 8).into_values());
        assert!(matches!(validate_record(r.clone(), &cfg, None), Err(RecordError::BadTuple(_))));

        let mut r2 = r;
        r2.tuples[0].interaction = "walking".into();
        r2.tuples[0].confidence = 1.2;
        assert!(matches!(validate_record(r2.clone(), &cfg, None), Err(RecordError::BadTuple(_))));
        r2.tuples[0].confidence = 1.0;
        assert!(validate_record(r2, &cfg, None).is_ok());
    }

    #[test]
    fn validation_is_idempotent() {
        let mut v = embed("a woman is holding a bag", 16).into_values();
        v[3] *= 1.0003;
        let once = validate_record(raw(v), &config(16), None).unwrap();
        let twice = validate_record(once.clone().into(), &config(16), None).unwrap();
        assert_eq!(once, twice);
        let bits = |r: &EventRecord| r.embedding.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&once), bits(&twice));
    }

    #[test]
    fn verdict_bands() {
        let b = VerdictBands::default();
        assert_eq!(b.verdict(0.29), Verdict::Normal);
        assert_eq!(b.verdict(0.3), Verdict::Suspicious);
        assert_eq!(b.verdict(0.7), Verdict::Suspicious);
        assert_eq!(b.verdict(0.71), Verdict::Threat);
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = PipelineConfig {
            tau_sim: 1.0,
            ..PipelineConfig::default()
        };
        assert_eq!(bad.validate(), Err(ConfigError::Tau(1.0)));
        let bad = PipelineConfig {
            target_fps: 0.0,
            ..PipelineConfig::default()
        };
        assert_eq!(bad.validate(), Err(ConfigError::Fps(0.0)));
    }
}
