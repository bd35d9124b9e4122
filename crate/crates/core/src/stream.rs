//! Frame-message ingestion, FPS sampling and the embed -> dedup -> reason pipeline.

use std::io::{BufRead, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::mpsc::sync_channel;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cot::{AssessmentInput, CotError, CurrentEvent, Reasoner};
use crate::dedup::{DedupError, KnowledgeBase, TimelineEntry};
use crate::embedder::{EmbedError, TextEncoder};
use crate::event_model::{validate_record, ConfigError, EventRecord, HoipTuple, PipelineConfig, RawRecord, ThreatReport};
use crate::persistence::{EventLogWriter, PersistenceError};
use crate::textualizer::render_description;

pub const DEFAULT_PORT: u16 = 7480;

/// One newline-delimited ingest record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMessage {
    pub ts: f64,
    pub frame_id: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desc: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hoip: Option<Vec<HoipTuple>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl FrameMessage {
    /// `desc` when present and non-blank, otherwise the rendered tuples.
    pub fn description(&self) -> String {
        match &self.desc {
            Some(d) if !d.trim().is_empty() => d.clone(),
            _ => render_description(self.hoip.as_deref().unwrap_or(&[])),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("MALFORMED: {0}")]
    Malformed(String),
    #[error("MISSING_CONTENT: record has neither desc nor hoip")]
    MissingContent,
}

pub fn decode_message(line: &[u8]) -> Result<FrameMessage, DecodeError> {
    let msg: FrameMessage = serde_json::from_slice(line).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    if !msg.ts.is_finite() {
        return Err(DecodeError::Malformed(format!("non-finite ts {}", msg.ts)));
    }
    if let Some(l) = msg.label {
        if l > 1 {
            return Err(DecodeError::Malformed(format!("label must be 0 or 1, got {l}")));
        }
    }
    let has_desc = msg.desc.as_deref().is_some_and(|d| !d.trim().is_empty());
    if !has_desc && msg.hoip.is_none() {
        return Err(DecodeError::MissingContent);
    }
    Ok(msg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleDecision {
    Keep,
    Drop,
}

/// Keeps the first frame of every `1 / target_fps` second window.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub window_len: f64,
    pub current_window_index: i64,
    pub kept_count: u64,
    pub dropped_count: u64,
}

impl SamplerState {
    pub fn new(target_fps: f64) -> Self {
        assert!(target_fps > 0.0, "target_fps must be positive");
        Self {
            window_len: 1.0 / target_fps,
            current_window_index: -1,
            kept_count: 0,
            dropped_count: 0,
        }
    }

    pub fn window_of(&self, ts: f64) -> i64 {
        (ts / self.window_len).floor() as i64
    }
}

pub fn fps_sample(msg: &FrameMessage, state: &mut SamplerState) -> SampleDecision {
    let w = state.window_of(msg.ts);
    if w > state.current_window_index {
        state.current_window_index = w;
        state.kept_count += 1;
        SampleDecision::Keep
    } else {
        state.dropped_count += 1;
        SampleDecision::Drop
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("embedding: {0}")]
    Embed(#[from] EmbedError),
    #[error("knowledge base: {0}")]
    Dedup(#[from] DedupError),
    #[error("reasoning: {0}")]
    Reasoning(#[from] CotError),
    #[error("persistence: {0}")]
    Persistence(#[from] PersistenceError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
}

/// A report plus the bookkeeping evaluation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowReport {
    pub report: ThreatReport,
    /// True if any message in the window was labeled 1; `None` when unlabeled.
    pub label: Option<bool>,
    pub event_ids: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipelineStats {
    pub received: u64,
    pub kept: u64,
    pub dropped: u64,
    pub malformed: u64,
    pub missing_content: u64,
    pub rejected: u64,
    pub reports: u64,
}

#[derive(Debug, Clone)]
struct OpenWindow {
    start: f64,
    end: f64,
    clusters: Vec<u64>,
    events: Vec<u64>,
    label: Option<bool>,
    current: CurrentEvent,
}

/// One stream's pipeline. Owns the stream's knowledge base (the single writer).
pub struct Pipeline {
    config: PipelineConfig,
    kb: KnowledgeBase,
    encoder: Box<dyn TextEncoder>,
    reasoner: Reasoner,
    sampler: SamplerState,
    next_event_id: u64,
    last_timestamp: Option<f64>,
    last_report_end: Option<f64>,
    window: Option<OpenWindow>,
    stats: PipelineStats,
    event_log: Option<EventLogWriter>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, encoder: Box<dyn TextEncoder>, reasoner: Reasoner) -> Result<Self, PipelineError> {
        config.validate()?;
        if encoder.dim() != config.dim {
            return Err(EmbedError::DimMismatch {
                left: encoder.dim(),
                right: config.dim,
            }
            .into());
        }
        Ok(Self {
            sampler: SamplerState::new(config.target_fps),
            kb: KnowledgeBase::new(config.clone()),
            config,
            encoder,
            reasoner,
            next_event_id: 0,
            last_timestamp: None,
            last_report_end: None,
            window: None,
            stats: PipelineStats::default(),
            event_log: None,
        })
    }

    /// Continues a stream from a restored knowledge base, as if the previous
    /// run had just emitted a report covering its last event.
    pub fn resume(kb: KnowledgeBase, encoder: Box<dyn TextEncoder>, reasoner: Reasoner) -> Result<Self, PipelineError> {
        let mut p = Self::new(kb.config().clone(), encoder, reasoner)?;
        p.next_event_id = kb.max_event_id().map_or(0, |m| m + 1);
        p.last_timestamp = kb.latest_timestamp();
        p.last_report_end = p.last_timestamp;
        if let Some(ts) = p.last_timestamp {
            p.sampler.current_window_index = p.sampler.window_of(ts);
        }
        p.kb = kb;
        Ok(p)
    }

    pub fn with_event_log(mut self, path: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        self.event_log = Some(EventLogWriter::open(path.into())?);
        Ok(self)
    }

    pub fn knowledge_base(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn into_knowledge_base(self) -> KnowledgeBase {
        self.kb
    }

    pub fn stats(&self) -> &PipelineStats {
        &self.stats
    }

    pub fn sampler(&self) -> &SamplerState {
        &self.sampler
    }

    pub fn reasoner(&self) -> &Reasoner {
        &self.reasoner
    }

    /// Samples `msg` and processes it if kept.
    pub fn process(&mut self, msg: FrameMessage) -> Result<Option<WindowReport>, PipelineError> {
        self.stats.received += 1;
        match fps_sample(&msg, &mut self.sampler) {
            SampleDecision::Keep => self.process_kept(msg),
            SampleDecision::Drop => {
                self.stats.dropped += 1;
                Ok(None)
            }
        }
    }

    /// Processes a message that already passed sampling.
    pub fn process_kept(&mut self, msg: FrameMessage) -> Result<Option<WindowReport>, PipelineError> {
        self.stats.kept += 1;
        let description = msg.description();
        let embedding = self.encoder.encode(&description)?;
        let raw = RawRecord {
            id: self.next_event_id,
            timestamp: msg.ts,
            frame_id: msg.frame_id,
            description,
            embedding: embedding.into_values(),
            tuples: msg.hoip.clone().unwrap_or_default(),
        };
        self.accept(raw, msg.label.map(|l| l == 1))
    }

    /// Replays a previously logged record, keeping its id and embedding.
    pub fn process_record(&mut self, record: EventRecord, label: Option<bool>) -> Result<Option<WindowReport>, PipelineError> {
        self.stats.received += 1;
        self.stats.kept += 1;
        self.accept(record.into(), label)
    }

    fn accept(&mut self, raw: RawRecord, label: Option<bool>) -> Result<Option<WindowReport>, PipelineError> {
        let frame_id = raw.frame_id;
        let record = match validate_record(raw, &self.config, self.last_timestamp) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("frame {frame_id} rejected: {e}");
                self.stats.rejected += 1;
                return Ok(None);
            }
        };
        if let Some(log) = self.event_log.as_mut() {
            log.append(&record)?;
        }
        let event_id = record.id;
        let ts = record.timestamp;
        let current = CurrentEvent {
            timestamp: ts,
            description: record.description.clone(),
        };
        let outcome = self.kb.ingest(record)?;
        self.next_event_id = self.next_event_id.max(event_id + 1);
        self.last_timestamp = Some(ts);

        let w = self.window.get_or_insert_with(|| OpenWindow {
            start: ts,
            end: ts,
            clusters: Vec::new(),
            events: Vec::new(),
            label: None,
            current: current.clone(),
        });
        w.end = ts;
        w.current = current;
        w.events.push(event_id);
        if !w.clusters.contains(&outcome.cluster_id()) {
            w.clusters.push(outcome.cluster_id());
        }
        if let Some(l) = label {
            w.label = Some(w.label.unwrap_or(false) || l);
        }

        let interval_due = self
            .last_report_end
            .is_none_or(|last| ts - last >= self.config.reasoning_interval);
        if outcome.is_novel() || interval_due {
            return self.emit().map(Some);
        }
        Ok(None)
    }

    /// Flushes a final report for events seen since the last one.
    pub fn finish(&mut self) -> Result<Option<WindowReport>, PipelineError> {
        if self.window.is_some() {
            self.emit().map(Some)
        } else {
            Ok(None)
        }
    }

    fn emit(&mut self) -> Result<WindowReport, PipelineError> {
        let w = self.window.take().expect("emit with an open window");
        let history = self.kb.timeline();
        let focus: Vec<TimelineEntry> = history
            .iter()
            .filter(|e| w.clusters.contains(&e.cluster_id))
            .cloned()
            .collect();
        let input = AssessmentInput {
            window_start: w.start,
            window_end: w.end,
            focus,
            history,
            current: Some(w.current),
        };
        let report = self.reasoner.assess(&input)?;
        self.last_report_end = Some(w.end);
        self.stats.reports += 1;
        Ok(WindowReport {
            report,
            label: w.label,
            event_ids: w.events,
        })
    }
}

/// Outcome of one [`run_pipeline`] call.
pub struct RunSummary {
    pub knowledge_base: KnowledgeBase,
    pub stats: PipelineStats,
}

/// Runs a whole source through `pipeline` as two stages joined by a bounded
/// queue: decode + sample on a reader thread, then embed, dedup and reason on
/// the calling thread. A full queue blocks the reader, so kept messages are
/// never dropped. Malformed lines are logged, counted and skipped.
pub fn run_pipeline<R, F>(source: R, mut pipeline: Pipeline, mut sink: F) -> Result<RunSummary, PipelineError>
where
    R: BufRead + Send,
    F: FnMut(&WindowReport) -> std::io::Result<()>,
{
    let capacity = pipeline.config.queue_capacity;
    let mut sampler = pipeline.sampler.clone();
    let (tx, rx) = sync_channel::<FrameMessage>(capacity);

    let (reader_stats, result) = std::thread::scope(|scope| {
        let reader = scope.spawn(move || {
            let mut stats = PipelineStats::default();
            for (i, line) in source.split(b'\n').enumerate() {
                let line = match line {
                    Ok(l) => l,
                    Err(e) => {
                        log::warn!("read error after line {i}: {e}");
                        break;
                    }
                };
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                stats.received += 1;
                let msg = match decode_message(&line) {
                    Ok(m) => m,
                    Err(DecodeError::MissingContent) => {
                        log::warn!("line {}: record has neither desc nor hoip", i + 1);
                        stats.missing_content += 1;
                        continue;
                    }
                    Err(e) => {
                        log::warn!("line {}: {e}", i + 1);
                        stats.malformed += 1;
                        continue;
                    }
                };
                if fps_sample(&msg, &mut sampler) == SampleDecision::Drop {
                    stats.dropped += 1;
                    continue;
                }
                if tx.send(msg).is_err() {
                    break;
                }
            }
            (stats, sampler)
        });

        let mut result = Ok(());
        for msg in rx.iter() {
            match pipeline.process_kept(msg) {
                Ok(Some(r)) => {
                    if let Err(e) = sink(&r) {
                        result = Err(e.into());
                        break;
                    }
                }
                Ok(None) => {}
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        drop(rx);
        (reader.join().expect("reader thread panicked"), result)
    });
    result?;
    let (stats, sampler) = reader_stats;
    if let Some(r) = pipeline.finish()? {
        sink(&r)?;
    }
    pipeline.sampler = sampler;
    pipeline.stats.received += stats.received;
    pipeline.stats.dropped += stats.dropped;
    pipeline.stats.malformed += stats.malformed;
    pipeline.stats.missing_content += stats.missing_content;
    Ok(RunSummary {
        stats: pipeline.stats.clone(),
        knowledge_base: pipeline.kb,
    })
}

/// Writes a report as one output line.
pub fn write_report_line<W: Write + ?Sized>(out: &mut W, report: &ThreatReport) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, report)?;
    out.write_all(b"\n")
}

/// Builds a fresh pipeline for each accepted connection.
pub type PipelineFactory = dyn Fn() -> Result<Pipeline, PipelineError> + Send + Sync;

/// Serves ingest connections; each connection is an independent stream with
/// its own knowledge base. At most `max_conns` connections run at once;
/// `connection_limit` stops the server after that many connections (tests).
pub fn serve(
    listener: TcpListener,
    factory: Arc<PipelineFactory>,
    output: Arc<Mutex<dyn Write + Send>>,
    max_conns: usize,
    connection_limit: Option<usize>,
    on_finished: Arc<dyn Fn(RunSummary) + Send + Sync>,
) -> std::io::Result<()> {
    let max_conns = max_conns.max(1);
    let active = Arc::new((Mutex::new(0usize), std::sync::Condvar::new()));
    let mut handles = Vec::new();
    for (n, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        {
            let (lock, cv) = &*active;
            let mut count = lock.lock().expect("connection counter poisoned");
            while *count >= max_conns {
                count = cv.wait(count).expect("connection counter poisoned");
            }
            *count += 1;
        }
        let factory = Arc::clone(&factory);
        let output = Arc::clone(&output);
        let active = Arc::clone(&active);
        let on_finished = Arc::clone(&on_finished);
        handles.push(std::thread::spawn(move || {
            handle_connection(stream, &*factory, &output, &*on_finished);
            let (lock, cv) = &*active;
            *lock.lock().expect("connection counter poisoned") -= 1;
            cv.notify_one();
        }));
        if connection_limit.is_some_and(|limit| n + 1 >= limit) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

fn handle_connection(
    stream: TcpStream,
    factory: &PipelineFactory,
    output: &Mutex<dyn Write + Send>,
    on_finished: &(dyn Fn(RunSummary) + Send + Sync),
) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    log::info!("connection from {peer}");
    let pipeline = match factory() {
        Ok(p) => p,
        Err(e) => {
            log::error!("cannot start pipeline for {peer}: {e}");
            return;
        }
    };
    let reader = std::io::BufReader::new(stream);
    let result = run_pipeline(reader, pipeline, |r| {
        let mut out = output.lock().expect("report output poisoned");
        write_report_line(&mut *out, &r.report)?;
        out.flush()
    });
    match result {
        Ok(summary) => {
            log::info!("connection {peer} closed: {:?}", summary.stats);
            on_finished(summary);
        }
        Err(e) => log::error!("connection {peer} failed: {e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cot::ThreatLexicon;
    use crate::embedder::HashingEncoder;
    use crate::event_model::{ProducedBy, VerdictBands};

    fn pipeline(config: PipelineConfig) -> Pipeline {
        let enc = Box::new(HashingEncoder::new(config.dim));
        Pipeline::new(config, enc, Reasoner::rule_based(ThreatLexicon::default(), VerdictBands::default())).unwrap()
    }

    fn msg(ts: f64, desc: &str) -> FrameMessage {
        FrameMessage {
            ts,
            frame_id: (ts * 30.0) as i64,
            desc: Some(desc.into()),
            hoip: None,
            label: None,
        }
    }

    #[test]
    fn decode_examples() {
        let m = decode_message(br#"{"ts":1.0,"frame_id":30,"desc":"a man is running in a park"}"#).unwrap();
        assert_eq!(m.frame_id, 30);
        assert_eq!(m.description(), "a man is running in a park");
        assert_eq!(
            decode_message(br#"{"ts":1.0,"frame_id":30}"#),
            Err(DecodeError::MissingContent)
        );
        assert!(matches!(
            decode_message(br#"{"ts":1.0,"frame_id":30,"de"#),
            Err(DecodeError::Malformed(_))
        ));
        assert!(decode_message(br#"{"ts":1.0,"frame_id":30,"desc":"x","camera":"north"}"#).is_ok());
        assert!(matches!(
            decode_message(br#"{"ts":1.0,"frame_id":30,"desc":"x","label":2}"#),
            Err(DecodeError::Malformed(_))
        ));
    }

    #[test]
    fn hoip_only_message_is_rendered() {
        let m = decode_message(
            br#"{"ts":0,"frame_id":0,"hoip":[{"human":"man","object":"knife","interaction":"holding","place":"park","confidence":0.9}]}"#,
        )
        .unwrap();
        assert_eq!(m.description(), "a man is holding a knife in a park");
    }

    #[test]
    fn sampler_keeps_first_frame_per_window() {
        let mut s = SamplerState::new(1.25);
        let kept: Vec<f64> = (0..60)
            .map(|i| f64::from(i) / 30.0)
            .filter(|&ts| fps_sample(&msg(ts, "x"), &mut s) == SampleDecision::Keep)
            .collect();
        assert_eq!(kept[0], 0.0);
        assert!(kept[1] >= 0.8 && kept[1] < 0.8 + 1.0 / 30.0 + 1e-9);
        assert_eq!(s.kept_count + s.dropped_count, 60);
    }

    #[test]
    fn sparse_input_all_kept() {
        let mut s = SamplerState::new(1.25);
        for i in 0..20 {
            assert_eq!(fps_sample(&msg(2.0 * f64::from(i), "x"), &mut s), SampleDecision::Keep);
        }
    }

    #[test]
    fn sixty_seconds_at_thirty_fps() {
        let mut s = SamplerState::new(1.25);
        for i in 0..1800 {
            fps_sample(&msg(f64::from(i) / 30.0, "x"), &mut s);
        }
        assert!((74..=76).contains(&s.kept_count), "{}", s.kept_count);
    }

    #[test]
    fn identical_stream_yields_one_cluster() {
        let mut p = pipeline(PipelineConfig::default());
        let mut reports = Vec::new();
        for i in 0..10 {
            if let Some(r) = p.process_kept(msg(f64::from(i), "a man is walking a dog in a park")).unwrap() {
                reports.push(r);
            }
        }
        reports.extend(p.finish().unwrap());
        assert_eq!(p.knowledge_base().cluster_count(), 1);
        // Novel trigger at t=0, interval at t=5, final flush.
        assert_eq!(reports.len(), 3);
        for r in &reports {
            assert_eq!(r.report.supporting_event_ids, vec![0]);
            assert_eq!(r.report.produced_by, ProducedBy::RuleFallback);
        }
    }

    #[test]
    fn alternating_disjoint_descriptions_make_two_clusters() {
        let mut p = pipeline(PipelineConfig::default());
        for i in 0..10 {
            let d = if i % 2 == 0 {
                "a man is walking a dog in a park"
            } else {
                "two cyclists race downhill on mountain trails"
            };
            p.process_kept(msg(f64::from(i), d)).unwrap();
        }
        assert_eq!(p.knowledge_base().cluster_count(), 2);
    }

    #[test]
    fn empty_stream_no_reports() {
        let p = pipeline(PipelineConfig::default());
        let mut n = 0;
        let summary = run_pipeline(std::io::Cursor::new(Vec::<u8>::new()), p, |_| {
            n += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(n, 0);
        assert!(summary.knowledge_base.is_empty());
    }

    #[test]
    fn malformed_lines_are_skipped_and_counted() {
        let input = b"{\"ts\":0,\"frame_id\":0,\"desc\":\"a man is walking in a park\"}\n{\"ts\":1,\"fr\n\
                      {\"ts\":2,\"frame_id\":2}\n{\"ts\":3,\"frame_id\":3,\"desc\":\"a man is walking in a park\"}\n";
        let p = pipeline(PipelineConfig::default());
        let summary = run_pipeline(std::io::Cursor::new(&input[..]), p, |_| Ok(())).unwrap();
        assert_eq!(summary.stats.malformed, 1);
        assert_eq!(summary.stats.missing_content, 1);
        assert_eq!(summary.stats.kept, 2);
        assert_eq!(summary.knowledge_base.event_count(), 2);
    }

    #[test]
    fn time_regression_is_rejected_not_fatal() {
        let mut p = pipeline(PipelineConfig::default());
        p.process_kept(msg(5.0, "a")).unwrap();
        assert!(p.process_kept(msg(1.0, "b")).unwrap().is_none());
        assert_eq!(p.stats().rejected, 1);
        assert_eq!(p.knowledge_base().event_count(), 1);
    }

    #[test]
    fn small_queue_never_drops_kept_messages() {
        let mut input = Vec::new();
        for i in 0..500 {
            input.extend_from_slice(
                format!("{{\"ts\":{},\"frame_id\":{i},\"desc\":\"event number {}\"}}\n", f64::from(i) * 2.0, i % 17)
                    .as_bytes(),
            );
        }
        let config = PipelineConfig {
            queue_capacity: 2,
            ..PipelineConfig::default()
        };
        let summary = run_pipeline(std::io::Cursor::new(input), pipeline(config), |_| Ok(())).unwrap();
        assert_eq!(summary.stats.kept, 500);
        assert_eq!(summary.knowledge_base.event_count(), 500);
    }
}
