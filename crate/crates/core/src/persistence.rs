//! Knowledge-base snapshots and the append-only event log.
//!
//! Snapshot layout (UTF-8, one record per line):
//!
//! ```text
//! E2T-SNAPSHOT v1
//! {"version":1,"dim":384,"tau":0.9,"dedup_enabled":true,"clusters":2,"next_cluster_id":2,"events":7}
//! {"cluster_id":0,"first_seen":..,"last_updated":..,"representative":{..},"centroid":"<b64 f64>","members":[..]}
//! ...
//! CRC32 1a2b3c4d
//! ```
//!
//! Member embeddings are base64 little-endian f32; centroids are base64
//! little-endian f64 so the stored mean survives the round trip exactly. The
//! trailing CRC-32 covers every byte before the `CRC32` line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;
use crate::dedup::{ClusterMember, DedupError, EventCluster, KnowledgeBase};
use crate::embedder::EmbeddingVector;
use crate::event_model::{validate_record, EventRecord, HoipTuple, PipelineConfig};

pub const SNAPSHOT_MAGIC: &str = "E2T-SNAPSHOT v";
pub const SNAPSHOT_VERSION: u32 = 1;
const CONSISTENCY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PersistenceError {
    #[error("IO_ERROR: {0}")]
    Io(#[from] std::io::Error),
    #[error("CORRUPT: {0}")]
    Corrupt(String),
    #[error("VERSION_UNSUPPORTED: snapshot version {0}")]
    VersionUnsupported(String),
    #[error("CONSISTENCY: {0}")]
    Consistency(String),
    #[error("MALFORMED: log line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("knowledge base: {0}")]
    Dedup(#[from] DedupError),
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotMeta {
    version: u32,
    dim: usize,
    tau: f64,
    dedup_enabled: bool,
    clusters: usize,
    next_cluster_id: u64,
    events: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RepresentativeRecord {
    event_id: u64,
    description: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MemberRecord {
    event_id: u64,
    timestamp: f64,
    frame_id: i64,
    description: String,
    embedding: EmbeddingVector,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tuples: Vec<HoipTuple>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterRecord {
    cluster_id: u64,
    first_seen: f64,
    last_updated: f64,
    representative: RepresentativeRecord,
    centroid: String,
    members: Vec<MemberRecord>,
}

fn encode_snapshot(kb: &KnowledgeBase) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("{SNAPSHOT_MAGIC}{SNAPSHOT_VERSION}\n").as_bytes());
    let meta = SnapshotMeta {
        version: SNAPSHOT_VERSION,
        dim: kb.dim(),
        tau: kb.config().tau_sim,
        dedup_enabled: kb.config().dedup_enabled,
        clusters: kb.cluster_count(),
        next_cluster_id: kb.next_cluster_id(),
        events: kb.event_count(),
    };
    serde_json::to_writer(&mut out, &meta).expect("metadata serializes");
    out.push(b'\n');
    for c in kb.clusters() {
        let rep = c.representative();
        let rec = ClusterRecord {
            cluster_id: c.cluster_id(),
            first_seen: c.first_seen(),
            last_updated: c.last_updated(),
            representative: RepresentativeRecord {
                event_id: rep.event_id,
                description: rep.description.clone(),
            },
            centroid: codec::encode_f64s(c.centroid()),
            members: c
                .members()
                .iter()
                .map(|m| MemberRecord {
                    event_id: m.event_id,
                    timestamp: m.timestamp,
                    frame_id: m.frame_id,
                    description: m.description.clone(),
                    embedding: m.embedding.clone(),
                    tuples: m.tuples.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec).expect("cluster serializes");
        out.push(b'\n');
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(format!("CRC32 {crc:08x}\n").as_bytes());
    out
}

/// Writes `kb` to `path` atomically (temporary file, fsync, rename).
pub fn snapshot_save(kb: &KnowledgeBase, path: impl AsRef<Path>) -> Result<(), PersistenceError> {
    let path = path.as_ref();
    let bytes = encode_snapshot(kb);
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "snapshot path has no file name"))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Snapshot bytes as [`snapshot_save`] would write them.
pub fn snapshot_bytes(kb: &KnowledgeBase) -> Vec<u8> {
    encode_snapshot(kb)
}

pub fn snapshot_load(path: impl AsRef<Path>) -> Result<KnowledgeBase, PersistenceError> {
    snapshot_load_with(path, &PipelineConfig::default())
}

/// Loads a snapshot; dimension, threshold and dedup mode come from the file,
/// every other setting from `base`.
pub fn snapshot_load_with(path: impl AsRef<Path>, base: &PipelineConfig) -> Result<KnowledgeBase, PersistenceError> {
    let bytes = std::fs::read(path)?;
    decode_snapshot(&bytes, base)
}

pub fn decode_snapshot(bytes: &[u8], base: &PipelineConfig) -> Result<KnowledgeBase, PersistenceError> {
    let header_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| PersistenceError::Corrupt("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| PersistenceError::Corrupt("header is not UTF-8".into()))?;
    let version = header
        .strip_prefix(SNAPSHOT_MAGIC)
        .ok_or_else(|| PersistenceError::Corrupt(format!("bad magic {header:?}")))?;
    if version != SNAPSHOT_VERSION.to_string() {
        return Err(PersistenceError::VersionUnsupported(version.to_owned()));
    }

    let body_end = bytes[..bytes.len().saturating_sub(1)]
        .iter()
        .rposition(|&b| b == b'\n')
        .map(|i| i + 1)
        .ok_or_else(|| PersistenceError::Corrupt("missing checksum line".into()))?;
    let trailer = std::str::from_utf8(&bytes[body_end..])
        .map_err(|_| PersistenceError::Corrupt("checksum line is not UTF-8".into()))?;
    let stored = trailer
        .trim_end_matches('\n')
        .strip_prefix("CRC32 ")
        .and_then(|h| u32::from_str_radix(h, 16).ok())
        .ok_or_else(|| PersistenceError::Corrupt(format!("bad checksum line {trailer:?}")))?;
    let actual = crc32fast::hash(&bytes[..body_end]);
    if stored != actual {
        return Err(PersistenceError::Corrupt(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }

    let body = std::str::from_utf8(&bytes[header_end + 1..body_end])
        .map_err(|_| PersistenceError::Corrupt("body is not UTF-8".into()))?;
    let mut lines = body.lines();
    let meta: SnapshotMeta = serde_json::from_str(lines.next().unwrap_or(""))
        .map_err(|e| PersistenceError::Corrupt(format!("metadata: {e}")))?;
    if meta.version != SNAPSHOT_VERSION {
        return Err(PersistenceError::VersionUnsupported(meta.version.to_string()));
    }
    let config = PipelineConfig {
        dim: meta.dim,
        tau_sim: meta.tau,
        dedup_enabled: meta.dedup_enabled,
        ..base.clone()
    };

    let mut clusters = Vec::with_capacity(meta.clusters);
    for (i, line) in lines.enumerate() {
        let rec: ClusterRecord =
            serde_json::from_str(line).map_err(|e| PersistenceError::Corrupt(format!("cluster record {i}: {e}")))?;
        clusters.push(rebuild_cluster(rec, meta.dim)?);
    }
    if clusters.len() != meta.clusters {
        return Err(PersistenceError::Corrupt(format!(
            "metadata lists {} clusters, file holds {}",
            meta.clusters,
            clusters.len()
        )));
    }
    let kb = KnowledgeBase::from_clusters(config, clusters, meta.next_cluster_id)?;
    if kb.event_count() != meta.events {
        return Err(PersistenceError::Corrupt(format!(
            "metadata lists {} events, file holds {}",
            meta.events,
            kb.event_count()
        )));
    }
    Ok(kb)
}

fn rebuild_cluster(rec: ClusterRecord, dim: usize) -> Result<EventCluster, PersistenceError> {
    let id = rec.cluster_id;
    let stored_centroid =
        codec::decode_f64s(&rec.centroid).map_err(|e| PersistenceError::Corrupt(format!("cluster {id} centroid: {e}")))?;
    let members: Vec<ClusterMember> = rec
        .members
        .into_iter()
        .map(|m| {
            if m.embedding.dim() != dim {
                return Err(PersistenceError::Corrupt(format!(
                    "cluster {id}: member {} has dimension {}",
                    m.event_id,
                    m.embedding.dim()
                )));
            }
            Ok(ClusterMember {
                event_id: m.event_id,
                timestamp: m.timestamp,
                frame_id: m.frame_id,
                description: m.description,
                embedding: m.embedding,
                tuples: m.tuples,
            })
        })
        .collect::<Result<_, _>>()?;
    let cluster = EventCluster::from_members(id, members, rec.last_updated)?;
    if stored_centroid.len() != cluster.centroid().len()
        || stored_centroid
            .iter()
            .zip(cluster.centroid())
            .any(|(a, b)| (a - b).abs() > CONSISTENCY_TOLERANCE)
    {
        return Err(PersistenceError::Consistency(format!("cluster {id}: centroid disagrees with members")));
    }
    if cluster.representative().event_id != rec.representative.event_id {
        return Err(PersistenceError::Consistency(format!(
            "cluster {id}: stored representative {} but members elect {}",
            rec.representative.event_id,
            cluster.representative().event_id
        )));
    }
    if cluster.first_seen() != rec.first_seen {
        return Err(PersistenceError::Consistency(format!("cluster {id}: first_seen disagrees with members")));
    }
    Ok(cluster)
}

/// Line-per-record event log, flushed after every append.
pub struct EventLogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl EventLogWriter {
    pub fn open(path: PathBuf) -> Result<Self, PersistenceError> {
        let f = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            out: BufWriter::new(f),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &EventRecord) -> Result<(), PersistenceError> {
        serde_json::to_writer(&mut self.out, record).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn append_log(record: &EventRecord, path: impl AsRef<Path>) -> Result<(), PersistenceError> {
    EventLogWriter::open(path.as_ref().to_path_buf())?.append(record)
}

/// Rebuilds the knowledge base by re-ingesting every logged record in order.
pub fn replay_log(path: impl AsRef<Path>, config: &PipelineConfig) -> Result<KnowledgeBase, PersistenceError> {
    let reader = BufReader::new(File::open(path)?);
    let mut kb = KnowledgeBase::new(config.clone());
    let mut last_ts = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| PersistenceError::Malformed { line: line_no, message };
        let record: EventRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let record = validate_record(record.into(), config, last_ts).map_err(|e| malformed(e.to_string()))?;
        last_ts = Some(record.timestamp);
        kb.ingest(record).map_err(|e| malformed(e.to_string()))?;
    }
    Ok(kb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::embed;

    fn cfg() -> PipelineConfig {
        PipelineConfig {
            dim: 16,
            tau_sim: 0.8,
            ..PipelineConfig::default()
        }
    }

    fn record(id: u64, text: &str) -> EventRecord {
        EventRecord {
            id,
            timestamp: id as f64 * 0.5,
            frame_id: id as i64,
            description: text.into(),
            embedding: embed(text, 16),
            tuples: vec![HoipTuple::new("man", None, "walking", "park", 0.7)],
        }
    }

    fn sample_kb() -> KnowledgeBase {
        let mut kb = KnowledgeBase::new(cfg());
        for (i, t) in ["alpha beta", "alpha beta", "gamma delta", "alpha beta gamma", "epsilon"]
            .iter()
            .enumerate()
        {
            kb.ingest(record(i as u64, t)).unwrap();
        }
        kb
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.snap");
        let kb = sample_kb();
        snapshot_save(&kb, &path).unwrap();
        let back = snapshot_load_with(&path, &cfg()).unwrap();
        assert_eq!(back, kb);
    }

    #[test]
    fn empty_kb_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.snap");
        let kb = KnowledgeBase::new(cfg());
        snapshot_save(&kb, &path).unwrap();
        assert!(snapshot_load_with(&path, &cfg()).unwrap().is_empty());
    }

    #[test]
    fn repeated_saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let kb = sample_kb();
        snapshot_save(&kb, &a).unwrap();
        snapshot_save(&kb, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let mut bytes = snapshot_bytes(&sample_kb());
        let at = bytes.windows(9).position(|w| w == b"embedding").unwrap() + 14;
        bytes[at] ^= 0x01;
        assert!(matches!(decode_snapshot(&bytes, &cfg()), Err(PersistenceError::Corrupt(_))));
    }

    #[test]
    fn future_version_unsupported() {
        let bytes = snapshot_bytes(&sample_kb());
        let text = String::from_utf8(bytes).unwrap().replacen("E2T-SNAPSHOT v1", "E2T-SNAPSHOT v2", 1);
        assert!(matches!(
            decode_snapshot(text.as_bytes(), &cfg()),
            Err(PersistenceError::VersionUnsupported(v)) if v == "2"
        ));
    }

    #[test]
    fn tampered_representative_fails_consistency() {
        let text = String::from_utf8(snapshot_bytes(&sample_kb())).unwrap();
        let body_end = text.trim_end_matches('\n').rfind('\n').unwrap() + 1;
        let body = text[..body_end].replacen(
            "\"representative\":{\"event_id\":0",
            "\"representative\":{\"event_id\":1",
            1,
        );
        let crc = crc32fast::hash(body.as_bytes());
        let forged = format!("{body}CRC32 {crc:08x}\n");
        assert!(matches!(
            decode_snapshot(forged.as_bytes(), &cfg()),
            Err(PersistenceError::Consistency(_))
        ));
    }

    #[test]
    fn log_replay_matches_live_kb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.log");
        let mut live = KnowledgeBase::new(cfg());
        for (i, t) in ["a b", "a b", "c d", "a b c"].iter().enumerate() {
            let r = record(i as u64, t);
            append_log(&r, &path).unwrap();
            live.ingest(r).unwrap();
        }
        assert_eq!(replay_log(&path, &cfg()).unwrap(), live);
    }

    #[test]
    fn empty_and_single_event_logs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.log");
        std::fs::write(&path, "").unwrap();
        assert!(replay_log(&path, &cfg()).unwrap().is_empty());
        append_log(&record(0, "solo"), &path).unwrap();
        assert_eq!(replay_log(&path, &cfg()).unwrap().cluster_count(), 1);
    }

    #[test]
    fn malformed_log_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.log");
        append_log(&record(0, "a"), &path).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        writeln!(f, "{{not json").unwrap();
        assert!(matches!(
            replay_log(&path, &cfg()),
            Err(PersistenceError::Malformed { line: 2, .. })
        ));
    }
}
