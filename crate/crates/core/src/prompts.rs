//! Task prompts (special token, discrete template, continuous prefix) and
//! parsing of query-side outputs into retrieval decisions.

use serde::{Deserialize, Serialize};

use crate::types::{Decision, Side, NO_QUERY};

pub const QG_TOKEN: &str = "<QG>";
pub const RG_TOKEN: &str = "<RG>";
/// Placeholder in discrete templates where the context is spliced.
pub const SLOT: &str = "[X]";

pub const DEFAULT_QUERY_TEMPLATE: &str = "Please generate a short query for this conversation: [X]";
pub const DEFAULT_RESPONSE_TEMPLATE: &str = "Please generate a response for the bot to reply the user: [X]";
pub const DEFAULT_CONTINUOUS_LENGTH: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariety {
    SpecialToken,
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptScheme {
    pub variety: PromptVariety,
    pub continuous_length: usize,
    pub query_template: String,
    pub response_template: String,
}

impl Default for PromptScheme {
    fn default() -> Self {
        Self {
            variety: PromptVariety::SpecialToken,
            continuous_length: DEFAULT_CONTINUOUS_LENGTH,
            query_template: DEFAULT_QUERY_TEMPLATE.into(),
            response_template: DEFAULT_RESPONSE_TEMPLATE.into(),
        }
    }
}

impl PromptScheme {
    pub fn special_token() -> Self {
        Self::default()
    }

    pub fn discrete() -> Self {
        Self { variety: PromptVariety::Discrete, ..Self::default() }
    }

    pub fn continuous(length: usize) -> Self {
        Self { variety: PromptVariety::Continuous, continuous_length: length, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        match self.variety {
            PromptVariety::Continuous if self.continuous_length == 0 => {
                Err(PromptError::Config("continuous_length must be positive".into()))
            }
            PromptVariety::Discrete => {
                split_template(&self.query_template)?;
                split_template(&self.response_template)?;
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// The prefix that precedes (or, for templates, surrounds) the context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptPrefix {
    Token(String),
    Template { before: String, after: String },
    /// `length` trainable embedding rows from the side's prefix table.
    Virtual { side: Side, length: usize },
}

impl PromptPrefix {
    pub fn virtual_len(&self) -> usize {
        match self {
            PromptPrefix::Virtual { length, .. } => *length,
            _ => 0,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt configuration error: {0}")]
    Config(String),
}

fn split_template(t: &str) -> Result<(String, String), PromptError> {
    if t.matches(SLOT).count() != 1 {
        return Err(PromptError::Config(format!("template must contain exactly one {SLOT}: {t:?}")));
    }
    let (before, after) = t.split_once(SLOT).expect("slot present");
    Ok((before.trim().to_string(), after.trim().to_string()))
}

pub fn render_prompt(scheme: &PromptScheme, side: Side) -> Result<PromptPrefix, PromptError> {
    scheme.validate()?;
    Ok(match scheme.variety {
        PromptVariety::SpecialToken => PromptPrefix::Token(
            match side {
                Side::Query => QG_TOKEN,
                Side::Response => RG_TOKEN,
            }
            .to_string(),
        ),
        PromptVariety::Discrete => {
            let template = match side {
                Side::Query => &scheme.query_template,
                Side::Response => &scheme.response_template,
            };
            let (before, after) = split_template(template)?;
            PromptPrefix::Template { before, after }
        }
        PromptVariety::Continuous => PromptPrefix::Virtual { side, length: scheme.continuous_length },
    })
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DecisionError {
    #[error("degenerate generation: empty query-side output")]
    Empty,
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Maps a decoded query-side output to a decision. The sentinel match ignores
/// case and whitespace variation.
pub fn parse_decision(decoded: &str) -> Result<Decision, DecisionError> {
    let trimmed = decoded.trim();
    if trimmed.is_empty() {
        return Err(DecisionError::Empty);
    }
    if normalize(trimmed) == normalize(NO_QUERY) {
        return Ok(Decision::NoQuery);
    }
    Ok(Decision::Query(trimmed.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn special_tokens_per_side() {
        let s = PromptScheme::special_token();
        assert_eq!(render_prompt(&s, Side::Query).unwrap(), PromptPrefix::Token("<QG>".into()));
        assert_eq!(render_prompt(&s, Side::Response).unwrap(), PromptPrefix::Token("<RG>".into()));
    }

    #[test]
    fn continuous_has_virtual_slots_only() {
        let p = render_prompt(&PromptScheme::continuous(10), Side::Query).unwrap();
        assert_eq!(p, PromptPrefix::Virtual { side: Side::Query, length: 10 });
        assert_eq!(p.virtual_len(), 10);
    }

    #[test]
    fn discrete_default_templates() {
        let s = PromptScheme::discrete();
        match render_prompt(&s, Side::Query).unwrap() {
            PromptPrefix::Template { before, after } => {
                assert_eq!(before, "Please generate a short query for this conversation:");
                assert_eq!(after, "");
            }
            other => panic!("unexpected {other:?}"),
        }
        match render_prompt(&s, Side::Response).unwrap() {
            PromptPrefix::Template { before, .. } => {
                assert_eq!(before, "Please generate a response for the bot to reply the user:")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn template_without_slot_is_config_error() {
        let s = PromptScheme { query_template: "no slot here".into(), ..PromptScheme::discrete() };
        assert!(matches!(render_prompt(&s, Side::Query), Err(PromptError::Config(_))));
        let s = PromptScheme { response_template: "[X] and [X]".into(), ..PromptScheme::discrete() };
        assert!(render_prompt(&s, Side::Response).is_err());
    }

    #[test]
    fn zero_length_continuous_rejected() {
        assert!(render_prompt(&PromptScheme::continuous(0), Side::Query).is_err());
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_decision("No Query").unwrap(), Decision::NoQuery);
        assert_eq!(parse_decision("no  query ").unwrap(), Decision::NoQuery);
        assert_eq!(
            parse_decision("weather in Beijing tomorrow").unwrap(),
            Decision::Query("weather in Beijing tomorrow".into())
        );
        assert_eq!(parse_decision("   "), Err(DecisionError::Empty));
        assert_eq!(parse_decision("No Query please").unwrap(), Decision::Query("No Query please".into()));
    }

    #[test]
    fn sides_are_distinct_for_every_variety() {
        for s in [PromptScheme::special_token(), PromptScheme::discrete(), PromptScheme::continuous(4)] {
            let q = render_prompt(&s, Side::Query).unwrap();
            let r = render_prompt(&s, Side::Response).unwrap();
            assert_ne!(q, r);
            assert_eq!(q, render_prompt(&s, Side::Query).unwrap());
        }
    }

    proptest! {
        #[test]
        fn sentinel_variants_parse_as_no_query(
            lead in "[ \t\n]{0,3}", mid in "[ \t]{1,4}", tail in "[ \t\n]{0,3}",
            upper in proptest::collection::vec(any::<bool>(), 7),
        ) {
            let word: String = "noquery".chars().zip(&upper)
                .map(|(c, u)| if *u { c.to_ascii_uppercase() } else { c }).collect();
            let s = format!("{lead}{}{mid}{}{tail}", &word[..2], &word[2..]);
            prop_assert_eq!(parse_decision(&s).unwrap(), Decision::NoQuery);
        }
    }
}
