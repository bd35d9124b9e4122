use super::prompt::SCORE_SENTINEL;
use super::{CotError, TIER_HEADERS};
use crate::event_model::ThreatReport;

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub tier1: String,
    pub tier2: String,
    pub tier3: String,
    pub score: f64,
}

fn clean_section(s: &str) -> String {
    let s = s.trim_start_matches(|c: char| c == ':' || c == '*' || c == '#' || c.is_whitespace());
    let mut s = s.trim_end_matches(|c: char| c == '*' || c == '#' || c.is_whitespace());
    // Drop a dangling enumerator that belonged to the next header ("2)", "3.").
    if let Some(stripped) = s.strip_suffix(')').or_else(|| s.strip_suffix('.')) {
        let digits = stripped.trim_end_matches(|c: char| c.is_ascii_digit());
        let rest = digits.trim_end_matches(['*', '#']);
        if digits.len() < stripped.len() && rest.ends_with(|c: char| c.is_whitespace()) {
            s = rest.trim_end();
        }
    }
    s.to_owned()
}

/// Splits an LLM answer on the three tier headers (case-insensitive, in order)
/// and reads the last `THREAT_SCORE:` value, clamped to [0, 1].
pub fn parse_llm_response(text: &str) -> Result<ParsedResponse, CotError> {
    // ASCII lowercasing keeps byte offsets aligned with `text`.
    let lower = text.to_ascii_lowercase();
    let mut bounds = Vec::with_capacity(3);
    for h in TIER_HEADERS {
        let at = lower
            .find(&h.to_ascii_lowercase())
            .ok_or_else(|| CotError::ParseFailure(format!("missing section {h:?}")))?;
        bounds.push((at, at + h.len()));
    }
    if !(bounds[0].0 < bounds[1].0 && bounds[1].0 < bounds[2].0) {
        return Err(CotError::ParseFailure("sections out of order".into()));
    }
    let sentinel = SCORE_SENTINEL.to_ascii_lowercase();
    let score_at = lower
        .rfind(&sentinel)
        .filter(|&i| i > bounds[2].1)
        .ok_or_else(|| CotError::ParseFailure("missing THREAT_SCORE line".into()))?;
    let token: String = text[score_at + sentinel.len()..]
        .trim_start_matches(|c: char| c == '*' || c.is_whitespace())
        .chars()
        .take_while(|c| !c.is_whitespace() && *c != '*')
        .collect();
    let score: f64 = token
        .parse()
        .map_err(|_| CotError::ParseFailure(format!("non-numeric threat score {token:?}")))?;
    if !score.is_finite() {
        return Err(CotError::ParseFailure(format!("non-finite threat score {token:?}")));
    }

    let tier1 = clean_section(&text[bounds[0].1..bounds[1].0]);
    let tier2 = clean_section(&text[bounds[1].1..bounds[2].0]);
    let tier3 = clean_section(&text[bounds[2].1..score_at]);
    for (name, body) in TIER_HEADERS.iter().zip([&tier1, &tier2, &tier3]) {
        if body.is_empty() {
            return Err(CotError::ParseFailure(format!("section {name:?} is empty")));
        }
    }
    Ok(ParsedResponse {
        tier1,
        tier2,
        tier3,
        score: score.clamp(0.0, 1.0),
    })
}

/// Renders a report in the response shape the parser accepts.
pub fn render_response(report: &ThreatReport) -> String {
    let [h1, h2, h3] = TIER_HEADERS;
    format!(
        "## {h1}\n{}\n\n## {h2}\n{}\n\n## {h3}\n{}\n\n{SCORE_SENTINEL} {}\n",
        report.tier1_scene, report.tier2_semantics, report.tier3_narrative, report.threat_score
    )
}
