//! Deterministic lexicon-based threat scoring.

use std::fmt::Write as _;

use super::lexicon::ThreatLexicon;
use super::{format_clock, AssessmentInput};
use crate::dedup::TimelineEntry;
use crate::event_model::{ProducedBy, ThreatReport, VerdictBands};

/// Clusters scoring above this count toward the escalation bonus.
pub const ESCALATION_FLOOR: f64 = 0.5;

/// An (action, place) reading of one cluster and the score it earned.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredObservation {
    pub human: Option<String>,
    pub object: Option<String>,
    pub action: Option<String>,
    pub place: Option<String>,
    pub base: f64,
    pub modifier: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterScore {
    pub cluster_id: u64,
    pub score: f64,
    pub observations: Vec<ScoredObservation>,
}

fn place_from_clause(clause: &str) -> Option<String> {
    ["in a ", "in an ", "in the ", "at a ", "at the "]
        .iter()
        .filter_map(|m| clause.rfind(m).map(|i| (i, m.len())))
        .max_by_key(|&(i, _)| i)
        .map(|(i, len)| clause[i + len..].trim().to_owned())
        .filter(|p| !p.is_empty())
}

fn contains_phrase(haystack: &str, phrase: &str) -> bool {
    haystack.match_indices(phrase).any(|(i, _)| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + phrase.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

fn observe(action: Option<String>, place: Option<String>, lexicon: &ThreatLexicon) -> ScoredObservation {
    let base = match action.as_deref() {
        Some(a) => lexicon.base_score(a).unwrap_or_else(|| {
            log::warn!("UNKNOWN_ACTION: {a:?} is not in the lexicon; scoring 0");
            0.0
        }),
        None => 0.0,
    };
    let modifier = match (action.as_deref(), place.as_deref()) {
        (Some(a), Some(p)) => lexicon.modifier(a, p),
        _ => 1.0,
    };
    ScoredObservation {
        human: None,
        object: None,
        action,
        place,
        base,
        modifier,
        score: (base * modifier).clamp(0.0, 1.0),
    }
}

/// Scores one timeline entry from its representative's tuples, or from its
/// description text when the representative carries none.
pub fn score_entry(entry: &TimelineEntry, lexicon: &ThreatLexicon) -> ClusterScore {
    let mut observations: Vec<ScoredObservation> = if entry.tuples.is_empty() {
        let text = entry.description.to_lowercase();
        let actions = lexicon.actions_longest_first();
        text.split(';')
            .map(|clause| {
                let clause = clause.trim();
                let action = actions.iter().find(|a| contains_phrase(clause, a)).map(|a| (*a).to_owned());
                if action.is_none() {
                    log::warn!("UNKNOWN_ACTION: no lexicon action in {clause:?}; scoring 0");
                }
                observe(action, place_from_clause(clause), lexicon)
            })
            .collect()
    } else {
        entry
            .tuples
            .iter()
            .map(|t| {
                let mut o = observe(Some(t.interaction.clone()), Some(t.place.clone()), lexicon);
                o.human = Some(t.human.clone());
                o.object = t.object.clone();
                o
            })
            .collect()
    };
    if observations.is_empty() {
        observations.push(observe(None, None, lexicon));
    }
    let score = observations.iter().map(|o| o.score).fold(0.0, f64::max);
    ClusterScore {
        cluster_id: entry.cluster_id,
        score,
        observations,
    }
}

/// Highest cluster score plus the escalation bonus for every additional
/// cluster above [`ESCALATION_FLOOR`], clamped to [0, 1].
pub fn aggregate_score(cluster_scores: &[f64], escalation_bonus: f64) -> f64 {
    let max = cluster_scores.iter().copied().fold(0.0, f64::max);
    let threatening = cluster_scores.iter().filter(|&&s| s > ESCALATION_FLOOR).count();
    let extra = threatening.saturating_sub(1) as f64;
    (max + escalation_bonus * extra).clamp(0.0, 1.0)
}

fn describe(o: &ScoredObservation) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "human={}, object={}, interaction={}, place={}",
        o.human.as_deref().unwrap_or("?"),
        o.object.as_deref().unwrap_or("none"),
        o.action.as_deref().unwrap_or("unknown"),
        o.place.as_deref().unwrap_or("unknown"),
    );
    s
}

pub fn assess_rule_based(input: &AssessmentInput, lexicon: &ThreatLexicon, bands: &VerdictBands) -> ThreatReport {
    let scored: Vec<(&TimelineEntry, ClusterScore)> =
        input.focus.iter().map(|e| (e, score_entry(e, lexicon))).collect();
    let scores: Vec<f64> = scored.iter().map(|(_, c)| c.score).collect();
    let threat_score = aggregate_score(&scores, lexicon.escalation_bonus);
    let verdict = bands.verdict(threat_score);

    let mut tier1 = String::new();
    let mut tier2 = String::new();
    if scored.is_empty() {
        tier1.push_str("No events observed in this window.");
        tier2.push_str("Nothing to interpret.");
    }
    for (entry, cs) in &scored {
        for o in &cs.observations {
            let _ = writeln!(
                tier1,
                "[{}] cluster {}: {}",
                format_clock(entry.timestamp),
                entry.cluster_id,
                describe(o)
            );
            let _ = writeln!(
                tier2,
                "cluster {}: {} in {} -> base {:.2} x context {:.2} = {:.2}",
                entry.cluster_id,
                o.action.as_deref().unwrap_or("unknown action"),
                o.place.as_deref().unwrap_or("unknown place"),
                o.base,
                o.modifier,
                o.score
            );
        }
    }

    let mut tier3 = String::new();
    if input.history.is_empty() {
        tier3.push_str("No prior events.\n");
    }
    for e in &input.history {
        let _ = writeln!(
            tier3,
            "[{}] {} (cluster {}, {} observation{}, last seen {})",
            format_clock(e.timestamp),
            e.description,
            e.cluster_id,
            e.member_count,
            if e.member_count == 1 { "" } else { "s" },
            format_clock(e.last_updated)
        );
    }
    let threatening = scores.iter().filter(|&&s| s > ESCALATION_FLOOR).count();
    let _ = write!(
        tier3,
        "{} threatening cluster{} in window; overall score {:.2} ({})",
        threatening,
        if threatening == 1 { "" } else { "s" },
        threat_score,
        verdict
    );
    if threatening > 1 {
        let _ = write!(tier3, "; escalation across {threatening} distinct threats");
    }

    ThreatReport {
        window_start: input.window_start,
        window_end: input.window_end,
        threat_score,
        verdict,
        tier1_scene: tier1.trim_end().to_owned(),
        tier2_semantics: tier2.trim_end().to_owned(),
        tier3_narrative: tier3,
        supporting_event_ids: input.focus.iter().map(|e| e.representative_event_id).collect(),
        produced_by: ProducedBy::RuleFallback,
    }
}
