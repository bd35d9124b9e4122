//! Hierarchical chain-of-thought threat assessment.
//!
//! An assessment walks three tiers: decomposing each event into its entities,
//! interactions and places; judging each interaction in context; and weaving
//! the deduplicated timeline into a narrative with an overall score. The LLM
//! path asks a chat model to do this; the rule path does it from a lexicon.

mod lexicon;
mod llm;
mod parse;
mod prompt;
mod rules;

use thiserror::Error;

pub use lexicon::{LexiconError, ThreatLexicon, DEFAULT_LEXICON};
pub use llm::{assess_with_llm, LlmClient, LlmConfig};
pub use parse::{parse_llm_response, render_response, ParsedResponse};
pub use prompt::{build_prompt, CotPrompt, PromptTemplate, NO_PRIOR_EVENTS, SCORE_SENTINEL};
pub use rules::{aggregate_score, assess_rule_based, score_entry, ClusterScore, ScoredObservation, ESCALATION_FLOOR};

use crate::dedup::TimelineEntry;
use crate::event_model::{ThreatReport, VerdictBands};

pub const TIER_HEADERS: [&str; 3] = [
    "Relational Scene Decomposition",
    "Contextual Semantic Parsing",
    "Temporal Narrative Synthesis",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CotError {
    #[error("TIMEOUT: LLM request exceeded its deadline")]
    Timeout,
    #[error("TRANSPORT: {0}")]
    Transport(String),
    #[error("PARSE_FAILURE: {0}")]
    ParseFailure(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurrentEvent {
    pub timestamp: f64,
    pub description: String,
}

/// Everything one assessment needs.
#[derive(Debug, Clone, PartialEq)]
pub struct AssessmentInput {
    pub window_start: f64,
    pub window_end: f64,
    /// Clusters that received events in this window; these are scored.
    pub focus: Vec<TimelineEntry>,
    /// Full chronological timeline, used for narrative context.
    pub history: Vec<TimelineEntry>,
    pub current: Option<CurrentEvent>,
}

/// `HH:MM:SS` of whole seconds.
pub fn format_clock(seconds: f64) -> String {
    let total = if seconds.is_finite() && seconds > 0.0 { seconds.floor() as u64 } else { 0 };
    format!("{:02}:{:02}:{:02}", total / 3600, (total / 60) % 60, total % 60)
}

/// Chooses between the LLM and the rule scorer for each assessment.
pub struct Reasoner {
    lexicon: ThreatLexicon,
    bands: VerdictBands,
    llm: Option<LlmClient>,
    template: PromptTemplate,
    fallback_enabled: bool,
}

impl Reasoner {
    pub fn rule_based(lexicon: ThreatLexicon, bands: VerdictBands) -> Self {
        Self {
            lexicon,
            bands,
            llm: None,
            template: PromptTemplate::default(),
            fallback_enabled: true,
        }
    }

    pub fn with_llm(mut self, client: LlmClient, fallback_enabled: bool) -> Self {
        self.llm = Some(client);
        self.fallback_enabled = fallback_enabled;
        self
    }

    pub fn lexicon(&self) -> &ThreatLexicon {
        &self.lexicon
    }

    pub fn bands(&self) -> &VerdictBands {
        &self.bands
    }

    /// With fallback enabled this always returns a report.
    pub fn assess(&self, input: &AssessmentInput) -> Result<ThreatReport, CotError> {
        let Some(client) = &self.llm else {
            return Ok(assess_rule_based(input, &self.lexicon, &self.bands));
        };
        let current = input.current.clone().unwrap_or(CurrentEvent {
            timestamp: input.window_end,
            description: "no salient event".into(),
        });
        let prompt = build_prompt(&input.history, &current, &self.template);
        match assess_with_llm(&prompt, client, input, &self.bands) {
            Ok(r) => Ok(r),
            Err(e) if self.fallback_enabled => {
                log::warn!("LLM assessment failed ({e}); using rule fallback");
                Ok(assess_rule_based(input, &self.lexicon, &self.bands))
            }
            Err(e) => Err(e),
        }
    }
}
