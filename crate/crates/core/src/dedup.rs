//! Online temporal event deduplication.
//!
//! The knowledge base keeps one cluster per distinct situation. A new event is
//! compared against every cluster's representative; if the best cosine
//! similarity is strictly above the threshold it joins that cluster, which then
//! recomputes its centroid (the arithmetic mean of all member embeddings) and
//! re-elects as representative the member closest to that centroid. Otherwise
//! the event opens a new cluster as its sole member and representative.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::embedder::{cosine_from_parts, l2_norm, EmbeddingVector};
use crate::event_model::{EventRecord, HoipTuple, PipelineConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DedupError {
    #[error("DIM_MISMATCH: embedding has {actual} components, knowledge base uses {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("EMPTY_CLUSTER: cluster has no members")]
    EmptyCluster,
    #[error("event {0} is already stored in the knowledge base")]
    DuplicateEvent(u64),
}

/// One stored event inside a cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMember {
    pub event_id: u64,
    pub timestamp: f64,
    pub frame_id: i64,
    pub description: String,
    pub embedding: EmbeddingVector,
    pub tuples: Vec<HoipTuple>,
}

impl From<EventRecord> for ClusterMember {
    fn from(r: EventRecord) -> Self {
        Self {
            event_id: r.id,
            timestamp: r.timestamp,
            frame_id: r.frame_id,
            description: r.description,
            embedding: r.embedding,
            tuples: r.tuples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Classification {
    Redundant { cluster_id: u64, similarity: f64 },
    Novel { best_similarity: Option<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventCluster {
    cluster_id: u64,
    members: Vec<ClusterMember>,
    sum: Vec<f64>,
    centroid: Vec<f64>,
    representative: usize,
    first_seen: f64,
    last_updated: f64,
    // Members sharing an embedding bit pattern share their centroid similarity,
    // so the election scans one slot per distinct vector, holding the index of
    // the member with the smallest event id.
    distinct: Vec<usize>,
    distinct_index: HashMap<Vec<u32>, usize>,
}

impl EventCluster {
    fn new(cluster_id: u64, first: ClusterMember) -> Self {
        let sum: Vec<f64> = first.embedding.values().iter().map(|&v| f64::from(v)).collect();
        let centroid = sum.clone();
        let ts = first.timestamp;
        let mut distinct_index = HashMap::new();
        distinct_index.insert(first.embedding.bit_pattern(), 0);
        Self {
            cluster_id,
            members: vec![first],
            sum,
            centroid,
            representative: 0,
            first_seen: ts,
            last_updated: ts,
            distinct: vec![0],
            distinct_index,
        }
    }

    /// Rebuilds a cluster from stored members, recomputing centroid and representative.
    pub(crate) fn from_members(
        cluster_id: u64,
        members: Vec<ClusterMember>,
        last_updated: f64,
    ) -> Result<Self, DedupError> {
        let mut it = members.into_iter();
        let first = it.next().ok_or(DedupError::EmptyCluster)?;
        let mut cluster = Self::new(cluster_id, first);
        for m in it {
            cluster.push_member(m);
        }
        cluster.refresh();
        cluster.last_updated = last_updated;
        Ok(cluster)
    }

    fn push_member(&mut self, m: ClusterMember) {
        for (s, &v) in self.sum.iter_mut().zip(m.embedding.values()) {
            *s += f64::from(v);
        }
        let idx = self.members.len();
        self.first_seen = self.first_seen.min(m.timestamp);
        let key = m.embedding.bit_pattern();
        match self.distinct_index.get(&key) {
            Some(&slot) => {
                if m.event_id < self.members[self.distinct[slot]].event_id {
                    self.distinct[slot] = idx;
                }
            }
            None => {
                self.distinct_index.insert(key, self.distinct.len());
                self.distinct.push(idx);
            }
        }
        self.members.push(m);
    }

    fn refresh(&mut self) {
        let m = self.members.len() as f64;
        self.centroid = self.sum.iter().map(|s| s / m).collect();
        let centroid_norm = self.centroid.iter().map(|c| c * c).sum::<f64>().sqrt();
        let mut best: Option<(f64, u64, usize)> = None;
        for &idx in &self.distinct {
            let member = &self.members[idx];
            let sim = centroid_similarity(member.embedding.values(), &self.centroid, centroid_norm);
            let better = match best {
                None => true,
                Some((bs, bid, _)) => sim > bs || (sim == bs && member.event_id < bid),
            };
            if better {
                best = Some((sim, member.event_id, idx));
            }
        }
        self.representative = best.map_or(0, |b| b.2);
    }

    pub fn cluster_id(&self) -> u64 {
        self.cluster_id
    }

    pub fn members(&self) -> &[ClusterMember] {
        &self.members
    }

    /// Mean of member embeddings; not renormalized.
    pub fn centroid(&self) -> &[f64] {
        &self.centroid
    }

    pub fn representative(&self) -> &ClusterMember {
        &self.members[self.representative]
    }

    pub fn first_seen(&self) -> f64 {
        self.first_seen
    }

    pub fn last_updated(&self) -> f64 {
        self.last_updated
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[inline]
fn centroid_similarity(member: &[f32], centroid: &[f64], centroid_norm: f64) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = member.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += f64::from(member[j]) * centroid[j];
        acc[1] += f64::from(member[j + 1]) * centroid[j + 1];
        acc[2] += f64::from(member[j + 2]) * centroid[j + 2];
        acc[3] += f64::from(member[j + 3]) * centroid[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..member.len() {
        tail += f64::from(member[j]) * centroid[j];
    }
    let d = (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
    cosine_from_parts(d, l2_norm(member), centroid_norm)
}

/// Elementwise mean of `members`.
pub fn compute_centroid(members: &[EmbeddingVector]) -> Result<Vec<f64>, DedupError> {
    let first = members.first().ok_or(DedupError::EmptyCluster)?;
    let dim = first.dim();
    let mut sum = vec![0.0f64; dim];
    for m in members {
        if m.dim() != dim {
            return Err(DedupError::DimMismatch { expected: dim, actual: m.dim() });
        }
        for (s, &v) in sum.iter_mut().zip(m.values()) {
            *s += f64::from(v);
        }
    }
    let n = members.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Index of the member most cosine-similar to `centroid`; ties go to the smallest event id.
pub fn select_representative(members: &[ClusterMember], centroid: &[f64]) -> Result<usize, DedupError> {
    if members.is_empty() {
        return Err(DedupError::EmptyCluster);
    }
    let centroid_norm = centroid.iter().map(|c| c * c).sum::<f64>().sqrt();
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, m) in members.iter().enumerate() {
        if m.embedding.dim() != centroid.len() {
            return Err(DedupError::DimMismatch {
                expected: centroid.len(),
                actual: m.embedding.dim(),
            });
        }
        let s = centroid_similarity(m.embedding.values(), centroid, centroid_norm);
        if s > best_sim || (s == best_sim && m.event_id < members[best].event_id) {
            best = i;
            best_sim = s;
        }
    }
    Ok(best)
}

/// What an ingest changed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IngestDelta {
    Created { cluster_id: u64 },
    Joined {
        cluster_id: u64,
        similarity: f64,
        previous_representative: u64,
        representative: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOutcome {
    pub delta: IngestDelta,
    /// The ordered list of representatives changed.
    pub timeline_changed: bool,
}

impl IngestOutcome {
    pub fn cluster_id(&self) -> u64 {
        match self.delta {
            IngestDelta::Created { cluster_id } | IngestDelta::Joined { cluster_id, .. } => cluster_id,
        }
    }

    pub fn is_novel(&self) -> bool {
        matches!(self.delta, IngestDelta::Created { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineEntry {
    /// First time the cluster was seen.
    pub timestamp: f64,
    pub last_updated: f64,
    pub description: String,
    pub cluster_id: u64,
    pub representative_event_id: u64,
    pub member_count: usize,
    pub tuples: Vec<HoipTuple>,
}

/// The event knowledge base: clusters plus a flat matrix of representative
/// embeddings scanned on every classification.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    clusters: BTreeMap<u64, EventCluster>,
    next_cluster_id: u64,
    config: PipelineConfig,
    event_index: HashMap<u64, u64>,
    // Column-major store of representatives: rep_columns[j][r] is coordinate j
    // of the representative of rep_ids[r]. Rows are in ascending cluster id.
    rep_columns: Vec<Vec<f32>>,
    rep_norms: Vec<f64>,
    rep_ids: Vec<u64>,
    rep_rows: HashMap<u64, usize>,
}

impl KnowledgeBase {
    pub fn new(config: PipelineConfig) -> Self {
        let dim = config.dim;
        Self {
            clusters: BTreeMap::new(),
            next_cluster_id: 0,
            config,
            event_index: HashMap::new(),
            rep_columns: vec![Vec::new(); dim],
            rep_norms: Vec::new(),
            rep_ids: Vec::new(),
            rep_rows: HashMap::new(),
        }
    }

    /// Assembles a knowledge base from already-built clusters.
    pub(crate) fn from_clusters(
        config: PipelineConfig,
        clusters: Vec<EventCluster>,
        next_cluster_id: u64,
    ) -> Result<Self, DedupError> {
        let mut kb = Self::new(config);
        kb.next_cluster_id = next_cluster_id;
        for c in clusters {
            for m in &c.members {
                if kb.event_index.insert(m.event_id, c.cluster_id).is_some() {
                    return Err(DedupError::DuplicateEvent(m.event_id));
                }
            }
            kb.clusters.insert(c.cluster_id, c);
        }
        let ids: Vec<u64> = kb.clusters.keys().copied().collect();
        for id in ids {
            kb.push_rep_row(id);
        }
        Ok(kb)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn next_cluster_id(&self) -> u64 {
        self.next_cluster_id
    }

    pub fn clusters(&self) -> impl Iterator<Item = &EventCluster> {
        self.clusters.values()
    }

    pub fn cluster(&self, id: u64) -> Option<&EventCluster> {
        self.clusters.get(&id)
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn event_count(&self) -> usize {
        self.event_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn cluster_of(&self, event_id: u64) -> Option<u64> {
        self.event_index.get(&event_id).copied()
    }

    pub fn contains_event(&self, event_id: u64) -> bool {
        self.event_index.contains_key(&event_id)
    }

    /// Latest timestamp recorded in the knowledge base.
    pub fn latest_timestamp(&self) -> Option<f64> {
        self.clusters
            .values()
            .flat_map(|c| c.members.iter().map(|m| m.timestamp))
            .reduce(f64::max)
    }

    pub fn max_event_id(&self) -> Option<u64> {
        self.event_index.keys().copied().max()
    }

    fn push_rep_row(&mut self, cluster_id: u64) {
        let rep = self.clusters[&cluster_id].representative().embedding.values();
        self.rep_rows.insert(cluster_id, self.rep_ids.len());
        self.rep_ids.push(cluster_id);
        self.rep_norms.push(l2_norm(rep));
        for (col, &x) in self.rep_columns.iter_mut().zip(rep) {
            col.push(x);
        }
    }

    fn update_rep_row(&mut self, cluster_id: u64) {
        let row = self.rep_rows[&cluster_id];
        let rep = self.clusters[&cluster_id].representative().embedding.values();
        self.rep_norms[row] = l2_norm(rep);
        for (col, &x) in self.rep_columns.iter_mut().zip(rep) {
            col[row] = x;
        }
    }

    /// `dot(q, rep)` for every stored representative, bit-identical to
    /// [`dot`]: each row keeps the same four lane sums over ascending
    /// coordinates plus the tail, combined the same way. Working column by
    /// column vectorizes across rows and skips the zero coordinates of `q`.
    fn rep_dots(&self, q: &[f32]) -> Vec<f64> {
        let rows = self.rep_ids.len();
        let split = q.len() / 4 * 4;
        let mut lanes = vec![0.0f64; 5 * rows];
        for (j, &qj) in q.iter().enumerate() {
            if qj == 0.0 {
                continue;
            }
            let lane = if j < split { j % 4 } else { 4 };
            let qj = f64::from(qj);
            for (acc, &r) in lanes[lane * rows..(lane + 1) * rows].iter_mut().zip(&self.rep_columns[j]) {
                *acc += qj * f64::from(r);
            }
        }
        let (l0, rest) = lanes.split_at(rows);
        let (l1, rest) = rest.split_at(rows);
        let (l2, rest) = rest.split_at(rows);
        let (l3, tail) = rest.split_at(rows);
        (0..rows)
            .map(|r| (l0[r] + l1[r]) + (l2[r] + l3[r]) + tail[r])
            .collect()
    }

    /// Classifies `v` against stored representatives with threshold `tau`.
    pub fn classify(&self, v: &EmbeddingVector, tau: f64) -> Result<Classification, DedupError> {
        let dim = self.config.dim;
        if v.dim() != dim {
            return Err(DedupError::DimMismatch { expected: dim, actual: v.dim() });
        }
        let q = v.values();
        let q_norm = l2_norm(q);
        let dots = self.rep_dots(q);
        let mut best: Option<(usize, f64)> = None;
        for (row, &d) in dots.iter().enumerate() {
            let s = cosine_from_parts(d, q_norm, self.rep_norms[row]);
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((row, s));
            }
        }
        Ok(match best {
            Some((row, s)) if s > tau => Classification::Redundant {
                cluster_id: self.rep_ids[row],
                similarity: s,
            },
            other => Classification::Novel {
                best_similarity: other.map(|b| b.1),
            },
        })
    }

    /// Adds one validated record. The knowledge base is left untouched on error.
    pub fn ingest(&mut self, record: EventRecord) -> Result<IngestOutcome, DedupError> {
        if record.embedding.dim() != self.config.dim {
            return Err(DedupError::DimMismatch {
                expected: self.config.dim,
                actual: record.embedding.dim(),
            });
        }
        if self.event_index.contains_key(&record.id) {
            return Err(DedupError::DuplicateEvent(record.id));
        }
        let class = if self.config.dedup_enabled {
            self.classify(&record.embedding, self.config.tau_sim)?
        } else {
            Classification::Novel { best_similarity: None }
        };
        let event_id = record.id;
        let timestamp = record.timestamp;
        match class {
            Classification::Novel { .. } => {
                let cluster_id = self.next_cluster_id;
                self.next_cluster_id += 1;
                self.clusters
                    .insert(cluster_id, EventCluster::new(cluster_id, record.into()));
                self.event_index.insert(event_id, cluster_id);
                self.push_rep_row(cluster_id);
                Ok(IngestOutcome {
                    delta: IngestDelta::Created { cluster_id },
                    timeline_changed: true,
                })
            }
            Classification::Redundant { cluster_id, similarity } => {
                let cluster = self.clusters.get_mut(&cluster_id).expect("classified cluster exists");
                let previous = cluster.representative().event_id;
                cluster.push_member(record.into());
                cluster.refresh();
                cluster.last_updated = timestamp;
                let current = cluster.representative().event_id;
                self.event_index.insert(event_id, cluster_id);
                if current != previous {
                    self.update_rep_row(cluster_id);
                }
                Ok(IngestOutcome {
                    delta: IngestDelta::Joined {
                        cluster_id,
                        similarity,
                        previous_representative: previous,
                        representative: current,
                    },
                    timeline_changed: current != previous,
                })
            }
        }
    }

    /// One entry per cluster, ordered by first-seen time then cluster id.
    pub fn timeline(&self) -> Vec<TimelineEntry> {
        let mut entries: Vec<TimelineEntry> = self.clusters.values().map(timeline_entry).collect();
        entries.sort_by(|a, b| {
            a.timestamp
                .total_cmp(&b.timestamp)
                .then(a.cluster_id.cmp(&b.cluster_id))
        });
        entries
    }
}

pub(crate) fn timeline_entry(c: &EventCluster) -> TimelineEntry {
    let rep = c.representative();
    TimelineEntry {
        timestamp: c.first_seen,
        last_updated: c.last_updated,
        description: rep.description.clone(),
        cluster_id: c.cluster_id,
        representative_event_id: rep.event_id,
        member_count: c.members.len(),
        tuples: rep.tuples.clone(),
    }
}

pub fn classify_event(v: &EmbeddingVector, kb: &KnowledgeBase, tau: f64) -> Result<Classification, DedupError> {
    kb.classify(v, tau)
}

pub fn ingest_event(record: EventRecord, kb: &mut KnowledgeBase) -> Result<IngestOutcome, DedupError> {
    kb.ingest(record)
}

pub fn timeline(kb: &KnowledgeBase) -> Vec<TimelineEntry> {
    kb.timeline()
}

/// Single-writer, many-reader handle. Readers always observe a fully applied ingest.
#[derive(Debug, Clone)]
pub struct SharedKnowledgeBase {
    inner: Arc<RwLock<KnowledgeBase>>,
}

impl SharedKnowledgeBase {
    pub fn new(kb: KnowledgeBase) -> Self {
        Self {
            inner: Arc::new(RwLock::new(kb)),
        }
    }

    pub fn ingest(&self, record: EventRecord) -> Result<IngestOutcome, DedupError> {
        self.inner.write().expect("knowledge base lock poisoned").ingest(record)
    }

    pub fn timeline(&self) -> Vec<TimelineEntry> {
        self.inner.read().expect("knowledge base lock poisoned").timeline()
    }

    /// A point-in-time copy.
    pub fn snapshot(&self) -> KnowledgeBase {
        self.inner.read().expect("knowledge base lock poisoned").clone()
    }
}
