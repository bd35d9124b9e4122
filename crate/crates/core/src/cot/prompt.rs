use std::fmt::Write as _;

use super::{format_clock, CurrentEvent, TIER_HEADERS};
use crate::dedup::TimelineEntry;

pub const NO_PRIOR_EVENTS: &str = "(no prior events)";
pub const SCORE_SENTINEL: &str = "THREAT_SCORE:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    /// Opening line of the system message, before the tier instructions.
    pub role_line: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            role_line: "You are a video surveillance analyst. You receive a deduplicated, \
                        chronological timeline of events observed by a camera and the \
                        description of the current frame."
                .to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CotPrompt {
    pub system_instructions: String,
    pub timeline_block: String,
    pub current_event_block: String,
    pub required_sections: [&'static str; 3],
}

impl CotPrompt {
    pub fn user_message(&self) -> String {
        format!(
            "Event timeline:\n{}\n\nCurrent frame:\n{}",
            self.timeline_block, self.current_event_block
        )
    }
}

fn system_instructions(template: &PromptTemplate) -> String {
    let [t1, t2, t3] = TIER_HEADERS;
    let mut s = String::new();
    let _ = writeln!(s, "{}", template.role_line);
    let _ = writeln!(s, "Reason in three steps and answer with exactly these three sections, in order:");
    let _ = writeln!(
        s,
        "## {t1}\nIdentify the humans, objects, interactions and places in each event and \
         state how they relate."
    );
    let _ = writeln!(
        s,
        "## {t2}\nJudge each interaction in its context, using the place and the entities \
         involved to decide whether it is normal or threatening (a punch in a boxing ring is \
         not an assault in a park)."
    );
    let _ = writeln!(
        s,
        "## {t3}\nOrder the events in time, explain causal links and escalation, and state \
         the overall severity."
    );
    let _ = write!(
        s,
        "Finish with a final line of the form \"{SCORE_SENTINEL} <0.00-1.00>\" giving the \
         overall threat probability."
    );
    s
}

/// Deterministic prompt over the timeline (sorted chronologically) and the current frame.
pub fn build_prompt(timeline: &[TimelineEntry], current: &CurrentEvent, template: &PromptTemplate) -> CotPrompt {
    let mut entries: Vec<&TimelineEntry> = timeline.iter().collect();
    entries.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.cluster_id.cmp(&b.cluster_id)));
    let timeline_block = if entries.is_empty() {
        NO_PRIOR_EVENTS.to_owned()
    } else {
        entries
            .iter()
            .map(|e| format!("[{}] {}", format_clock(e.timestamp), e.description))
            .collect::<Vec<_>>()
            .join("\n")
    };
    CotPrompt {
        system_instructions: system_instructions(template),
        timeline_block,
        current_event_block: format!("[{}] {}", format_clock(current.timestamp), current.description),
        required_sections: TIER_HEADERS,
    }
}
