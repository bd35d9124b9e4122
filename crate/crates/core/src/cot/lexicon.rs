use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

pub const DEFAULT_LEXICON: &str = include_str!("../../data/default_lexicon.tsv");
pub const DEFAULT_ESCALATION_BONUS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("lexicon: {0}")]
    Invalid(String),
    #[error("reading lexicon: {0}")]
    Io(#[from] std::io::Error),
}

/// Action base scores and place-dependent multipliers for the rule scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreatLexicon {
    pub action_scores: BTreeMap<String, f64>,
    pub context_modifiers: BTreeMap<(String, String), f64>,
    pub escalation_bonus: f64,
}

impl Default for ThreatLexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("shipped lexicon parses")
    }
}

impl ThreatLexicon {
    pub fn empty() -> Self {
        Self {
            action_scores: BTreeMap::new(),
            context_modifiers: BTreeMap::new(),
            escalation_bonus: DEFAULT_ESCALATION_BONUS,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut lex = Self::empty();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let err = |message: String| LexiconError::Parse { line: line_no, message };
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            let number = |s: &str| -> Result<f64, LexiconError> {
                s.parse::<f64>().map_err(|_| err(format!("invalid number {s:?}")))
            };
            match fields.as_slice() {
                ["action", action, score] => {
                    lex.action_scores.insert((*action).to_owned(), number(score)?);
                }
                ["modifier", action, place, mult] => {
                    lex.context_modifiers
                        .insert(((*action).to_owned(), (*place).to_owned()), number(mult)?);
                }
                ["escalation", bonus] => lex.escalation_bonus = number(bonus)?,
                _ => return Err(err(format!("unrecognized record {line:?}"))),
            }
        }
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<(), LexiconError> {
        for (a, s) in &self.action_scores {
            if !(0.0..=1.0).contains(s) {
                return Err(LexiconError::Invalid(format!("base score {s} for {a:?} outside [0, 1]")));
            }
        }
        for ((a, p), m) in &self.context_modifiers {
            if !m.is_finite() || *m < 0.0 {
                return Err(LexiconError::Invalid(format!("modifier {m} for ({a:?}, {p:?})")));
            }
        }
        if !self.escalation_bonus.is_finite() || self.escalation_bonus < 0.0 {
            return Err(LexiconError::Invalid(format!("escalation bonus {}", self.escalation_bonus)));
        }
        Ok(())
    }

    pub fn base_score(&self, action: &str) -> Option<f64> {
        self.action_scores.get(action).copied()
    }

    pub fn modifier(&self, action: &str, place: &str) -> f64 {
        self.context_modifiers
            .get(&(action.to_owned(), place.to_owned()))
            .copied()
            .unwrap_or(1.0)
    }

    /// Lexicon actions sorted longest first, for phrase matching in free text.
    pub(crate) fn actions_longest_first(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.action_scores.keys().map(String::as_str).collect();
        v.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_lexicon_loads() {
        let lex = ThreatLexicon::default();
        assert!(lex.action_scores.len() >= 20);
        assert_eq!(lex.base_score("punching"), Some(0.8));
        assert!(lex.modifier("punching", "boxing ring") < 1.0);
        assert_eq!(lex.modifier("punching", "park"), 1.0);
        assert_eq!(lex.escalation_bonus, 0.1);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = ThreatLexicon::parse("# c\naction\tpunching\tlots\n").unwrap_err();
        assert!(matches!(e, LexiconError::Parse { line: 2, .. }), "{e}");
        let e = ThreatLexicon::parse("verb\tx\t1\n").unwrap_err();
        assert!(matches!(e, LexiconError::Parse { line: 1, .. }));
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(matches!(
            ThreatLexicon::parse("action\tx\t1.5\n"),
            Err(LexiconError::Invalid(_))
        ));
        assert!(matches!(
            ThreatLexicon::parse("modifier\tx\ty\t-1\n"),
            Err(LexiconError::Invalid(_))
        ));
    }
}
