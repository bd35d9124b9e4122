//! Detection metrics, a synthetic labeled stream generator and ablation runs.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cot::{score_entry, Reasoner, ThreatLexicon};
use crate::dedup::timeline_entry;
use crate::embedder::{cosine_sim, embed, HashingEncoder};
use crate::event_model::{HoipTuple, PipelineConfig, FPS_PRESETS};
use crate::stream::{decode_message, FrameMessage, Pipeline, PipelineError, WindowReport};
use crate::textualizer::render_description;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("DEGENERATE_LABELS: {0}")]
    DegenerateLabels(&'static str),
    #[error("score {0} is not finite")]
    NonFinite(f64),
}

fn check_finite(pairs: &[(f64, bool)]) -> Result<(), MetricError> {
    match pairs.iter().find(|p| !p.0.is_finite()) {
        Some(p) => Err(MetricError::NonFinite(p.0)),
        None => Ok(()),
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney).
pub fn compute_auc(pairs: &[(f64, bool)]) -> Result<f64, MetricError> {
    check_finite(pairs)?;
    let positives = pairs.iter().filter(|p| p.1).count() as u64;
    let negatives = pairs.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::DegenerateLabels("AUC needs both positive and negative labels"));
    }
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the Mann-Whitney U statistic, kept integral.
    let mut twice_u: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

/// Mean precision at the rank of each positive, ranking by descending score
/// with ties left in input order.
pub fn compute_ap(pairs: &[(f64, bool)]) -> Result<f64, MetricError> {
    check_finite(pairs)?;
    let positives = pairs.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Err(MetricError::DegenerateLabels("AP needs at least one positive label"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[b].0.total_cmp(&pairs[a].0));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if pairs[idx].1 {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Parameters of a synthetic labeled stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub events: usize,
    /// Frame rate of the generated stream.
    pub input_fps: f64,
    /// Probability a fresh event uses a threat template.
    pub threat_fraction: f64,
    /// Probability a message repeats the previous message verbatim.
    pub duplicate_rate: f64,
    /// Probability a fresh event's label is flipped (0 keeps the stream separable).
    pub label_noise: f64,
    /// Fresh templates are kept only if their embedding similarity to every
    /// earlier template stays at or below this value at `dim`.
    pub max_template_similarity: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            events: 200,
            input_fps: 30.0,
            threat_fraction: 0.3,
            duplicate_rate: 0.5,
            label_noise: 0.0,
            max_template_similarity: 0.8,
            dim: 384,
            seed: 7,
        }
    }
}

const HUMANS: [&str; 10] = [
    "man", "woman", "boy", "girl", "teenager", "elderly man", "elderly woman", "guard", "cyclist", "worker",
];
const OBJECTS: [&str; 12] = [
    "bag", "phone", "bottle", "umbrella", "box", "bicycle", "cart", "backpack", "stroller", "newspaper", "suitcase",
    "chair",
];
const NORMAL_ACTIONS: [&str; 8] = [
    "walking", "sitting", "standing", "talking", "waving", "carrying", "riding", "holding",
];
const THREAT_ACTIONS: [&str; 8] = [
    "stabbing", "shooting", "robbing", "fighting", "punching", "brandishing", "kicking", "stealing",
];
const THREAT_OBJECTS: [&str; 6] = ["knife", "gun", "bat", "crowbar", "bottle", "pipe"];
// Places without context modifiers in the shipped lexicon.
const PLACES: [&str; 10] = [
    "park", "street", "parking lot", "shopping mall", "train platform", "alley", "plaza", "office lobby",
    "bus stop", "warehouse",
];

fn random_template(rng: &mut ChaCha8Rng, threat: bool) -> HoipTuple {
    let human = *HUMANS.choose(rng).expect("non-empty");
    let place = *PLACES.choose(rng).expect("non-empty");
    let (action, object) = if threat {
        let object = rng.gen_bool(0.6).then(|| *THREAT_OBJECTS.choose(rng).expect("non-empty"));
        (*THREAT_ACTIONS.choose(rng).expect("non-empty"), object)
    } else {
        let object = rng.gen_bool(0.6).then(|| *OBJECTS.choose(rng).expect("non-empty"));
        (*NORMAL_ACTIONS.choose(rng).expect("non-empty"), object)
    };
    let confidence = f64::from(rng.gen_range(50u8..=99)) / 100.0;
    HoipTuple::new(human, object, action, place, confidence)
}

/// Deterministic labeled stream of normal and threat events with verbatim repeats.
///
/// Each fresh event draws a template not used before whose description stays
/// below `max_template_similarity` to all earlier templates. If no such
/// template turns up after a bounded search, an earlier template is reused.
pub fn generate_synthetic_stream(spec: &SyntheticSpec) -> Vec<FrameMessage> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut used: Vec<(String, crate::embedder::EmbeddingVector, HoipTuple, bool)> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut out: Vec<FrameMessage> = Vec::with_capacity(spec.events);

    for i in 0..spec.events {
        let ts = i as f64 / spec.input_fps;
        if let Some(prev) = out.last().cloned().filter(|_| rng.gen_bool(spec.duplicate_rate.clamp(0.0, 1.0))) {
            out.push(FrameMessage {
                ts,
                frame_id: i as i64,
                ..prev
            });
            continue;
        }
        let threat = rng.gen_bool(spec.threat_fraction.clamp(0.0, 1.0));
        let mut chosen = None;
        for _ in 0..200 {
            let t = random_template(&mut rng, threat);
            let d = render_description(std::slice::from_ref(&t));
            if seen.contains(&d) {
                continue;
            }
            let v = embed(&d, spec.dim);
            let close = used.iter().any(|(_, u, _, _)| {
                cosine_sim(&v, u).expect("same dimension") > spec.max_template_similarity
            });
            if !close {
                chosen = Some((d, v, t));
                break;
            }
        }
        let (tuple, label) = match chosen {
            Some((d, v, t)) => {
                seen.insert(d.clone());
                used.push((d, v, t.clone(), threat));
                (t, threat)
            }
            None => {
                let same_kind: Vec<_> = used.iter().filter(|u| u.3 == threat).collect();
                let pick = if same_kind.is_empty() {
                    used.choose(&mut rng).expect("at least one template exists")
                } else {
                    *same_kind.choose(&mut rng).expect("non-empty")
                };
                (pick.2.clone(), pick.3)
            }
        };
        let label = if rng.gen_bool(spec.label_noise.clamp(0.0, 1.0)) { !label } else { label };
        out.push(FrameMessage {
            ts,
            frame_id: i as i64,
            desc: Some(render_description(std::slice::from_ref(&tuple))),
            hoip: Some(vec![tuple]),
            label: Some(u8::from(label)),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub name: String,
    pub dedup: bool,
    /// `None` keeps every frame.
    pub fps: Option<f64>,
}

impl AblationConfig {
    pub fn new(dedup: bool, fps: Option<f64>) -> Self {
        let name = format!(
            "dedup={}/fps={}",
            if dedup { "on" } else { "off" },
            fps.map_or_else(|| "all".to_owned(), |f| f.to_string())
        );
        Self { name, dedup, fps }
    }

    /// Dedup on and off, each unsampled and at every FPS preset.
    pub fn default_matrix() -> Vec<Self> {
        let mut v = Vec::new();
        for dedup in [true, false] {
            v.push(Self::new(dedup, None));
            for fps in FPS_PRESETS {
                v.push(Self::new(dedup, Some(fps)));
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub kept_frames: u64,
    pub clusters: usize,
    pub reports: usize,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub events_per_second: f64,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub row: AblationRow,
    pub reports: Vec<WindowReport>,
    /// (frame id, score of the cluster the frame joined) for every kept frame.
    pub event_scores: Vec<(i64, f64)>,
}

/// Reads newline-delimited frame messages, skipping and logging bad lines.
pub fn decode_labeled_stream<R: BufRead>(source: R) -> std::io::Result<Vec<FrameMessage>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match decode_message(line.as_bytes()) {
            Ok(m) => out.push(m),
            Err(e) => log::warn!("line {}: {e}", i + 1),
        }
    }
    Ok(out)
}

/// Window scores and labels for metric computation; unlabeled windows are skipped.
pub fn window_pairs(reports: &[WindowReport]) -> Vec<(f64, bool)> {
    reports
        .iter()
        .filter_map(|r| r.label.map(|l| (r.report.threat_score, l)))
        .collect()
}

pub fn run_single(
    stream: &[FrameMessage],
    base: &PipelineConfig,
    config: &AblationConfig,
    lexicon: &ThreatLexicon,
) -> Result<AblationResult, PipelineError> {
    let pc = PipelineConfig {
        dedup_enabled: config.dedup,
        target_fps: config.fps.unwrap_or(base.target_fps),
        ..base.clone()
    };
    let reasoner = Reasoner::rule_based(lexicon.clone(), pc.bands);
    let mut pipeline = Pipeline::new(pc.clone(), Box::new(HashingEncoder::new(pc.dim)), reasoner)?;
    let mut reports = Vec::new();
    let mut ingested: Vec<(u64, i64)> = Vec::new();
    let started = Instant::now();
    for msg in stream {
        let frame_id = msg.frame_id;
        let before = pipeline.knowledge_base().event_count() as u64;
        let out = match config.fps {
            Some(_) => pipeline.process(msg.clone())?,
            None => pipeline.process_kept(msg.clone())?,
        };
        if pipeline.knowledge_base().event_count() as u64 > before {
            // Event ids are assigned sequentially from zero.
            ingested.push((before, frame_id));
        }
        reports.extend(out);
    }
    reports.extend(pipeline.finish()?);
    let elapsed = started.elapsed().as_secs_f64();
    let kb = pipeline.knowledge_base();
    let kept = pipeline.stats().kept;

    let event_scores = ingested
        .iter()
        .map(|&(event_id, frame_id)| {
            let cid = kb.cluster_of(event_id).expect("ingested event is indexed");
            let entry = timeline_entry(kb.cluster(cid).expect("indexed cluster exists"));
            (frame_id, score_entry(&entry, lexicon).score)
        })
        .collect();

    let pairs = window_pairs(&reports);
    let row = AblationRow {
        config: config.name.clone(),
        kept_frames: kept,
        clusters: kb.cluster_count(),
        reports: reports.len(),
        auc: compute_auc(&pairs).ok(),
        ap: compute_ap(&pairs).ok(),
        events_per_second: if elapsed > 0.0 { kept as f64 / elapsed } else { f64::INFINITY },
    };
    Ok(AblationResult {
        row,
        reports,
        event_scores,
    })
}

/// Runs every configuration, each on its own thread with its own pipeline.
pub fn run_ablation(
    stream: &[FrameMessage],
    base: &PipelineConfig,
    configs: &[AblationConfig],
    lexicon: &ThreatLexicon,
) -> Result<Vec<AblationResult>, PipelineError> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| scope.spawn(move || run_single(stream, base, c, lexicon)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    })
}

fn metric_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_owned(), |x| format!("{x:.6}"))
}

/// Comma-separated results table with a header row.
pub fn write_results_table<W: Write + ?Sized>(out: &mut W, rows: &[AblationRow]) -> std::io::Result<()> {
    writeln!(out, "config,kept_frames,clusters,auc,ap,events_per_second")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.1}",
            r.config,
            r.kept_frames,
            r.clusters,
            metric_cell(r.auc),
            metric_cell(r.ap),
            r.events_per_second
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(pos: &[f64], neg: &[f64]) -> Vec<(f64, bool)> {
        pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(compute_auc(&pairs(&[0.9, 0.8], &[0.7, 0.1])).unwrap(), 1.0);
        assert_eq!(compute_auc(&pairs(&[0.5, 0.5], &[0.5, 0.5])).unwrap(), 0.5);
        assert_eq!(compute_auc(&pairs(&[0.9, 0.4], &[0.6, 0.2])).unwrap(), 0.75);
        assert!(matches!(compute_auc(&pairs(&[0.9], &[])), Err(MetricError::DegenerateLabels(_))));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(compute_ap(&pairs(&[0.9, 0.8], &[0.2, 0.1])).unwrap(), 1.0);
        let p = vec![(0.9, false), (0.8, true), (0.7, false), (0.6, true)];
        assert_eq!(compute_ap(&p).unwrap(), 0.5);
        assert_eq!(compute_ap(&[(0.3, true)]).unwrap(), 1.0);
        assert!(matches!(compute_ap(&pairs(&[], &[0.1])), Err(MetricError::DegenerateLabels(_))));
    }

    #[test]
    fn ap_ties_follow_input_order() {
        assert_eq!(compute_ap(&[(0.5, true), (0.5, false)]).unwrap(), 1.0);
        assert_eq!(compute_ap(&[(0.5, false), (0.5, true)]).unwrap(), 0.5);
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert!(matches!(compute_auc(&[(f64::NAN, true), (0.1, false)]), Err(MetricError::NonFinite(_))));
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SyntheticSpec { events: 120, ..SyntheticSpec::default() };
        assert_eq!(generate_synthetic_stream(&spec), generate_synthetic_stream(&spec));
    }

    #[test]
    fn no_duplicates_means_distinct_descriptions() {
        let spec = SyntheticSpec {
            events: 100,
            duplicate_rate: 0.0,
            ..SyntheticSpec::default()
        };
        let s = generate_synthetic_stream(&spec);
        let distinct: HashSet<_> = s.iter().map(|m| m.desc.clone()).collect();
        assert_eq!(distinct.len(), 100);
    }

    #[test]
    fn duplicate_rate_half_gives_about_half_repeats() {
        let spec = SyntheticSpec {
            events: 100,
            duplicate_rate: 0.5,
            ..SyntheticSpec::default()
        };
        let s = generate_synthetic_stream(&spec);
        let repeats = s.windows(2).filter(|w| w[0].desc == w[1].desc).count();
        assert!((35..=65).contains(&repeats), "{repeats} repeats");
    }

    #[test]
    fn results_table_format() {
        let row = AblationRow {
            config: "dedup=on/fps=1.25".into(),
            kept_frames: 75,
            clusters: 12,
            reports: 20,
            auc: Some(1.0),
            ap: None,
            events_per_second: 12345.67,
        };
        let mut buf = Vec::new();
        write_results_table(&mut buf, &[row]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "config,kept_frames,clusters,auc,ap,events_per_second\ndedup=on/fps=1.25,75,12,1.000000,nan,12345.7\n"
        );
    }
}
