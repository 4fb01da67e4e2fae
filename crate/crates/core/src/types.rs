//! Domain types shared across the pipeline: dialogues, annotations, task
//! instances, retrieval decisions and the multi-task loss weights.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::prompts::PromptPrefix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Bot => "bot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub text: String,
}

impl DialogueTurn {
    pub fn user(text: impl Into<String>) -> Self {
        Self { speaker: Speaker::User, text: text.into() }
    }

    pub fn bot(text: impl Into<String>) -> Self {
        Self { speaker: Speaker::Bot, text: text.into() }
    }
}

/// Supervision attached to one bot turn of an episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnAnnotation {
    pub turn_index: usize,
    pub needs_retrieval: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_knowledge: Option<String>,
    pub gold_response: String,
}

/// One annotated dialogue. Annotations point at bot turns; the context for
/// an annotation is every turn strictly before `turn_index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub turns: Vec<DialogueTurn>,
    pub annotations: Vec<TurnAnnotation>,
}

/// A single invariant failure found by [`validate_episode`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub turn_index: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.turn_index {
            Some(i) => write!(f, "{} (turn {}): {}", self.field, i, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// Checks every episode-level invariant and reports all failures. Never errors.
pub fn validate_episode(e: &Episode) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field, turn_index, message: String| {
        out.push(Violation { field, turn_index, message })
    };

    if e.id.trim().is_empty() {
        push("id", None, "episode id is empty".into());
    }
    for (i, t) in e.turns.iter().enumerate() {
        if t.text.trim().is_empty() {
            push("text", Some(i), "turn text is empty".into());
        }
    }

    let mut prev: Option<usize> = None;
    for a in &e.annotations {
        let idx = a.turn_index;
        match e.turns.get(idx) {
            None => push("turn_index", Some(idx), format!("no turn at index {idx}")),
            Some(t) if t.speaker != Speaker::Bot => {
                push("turn_index", Some(idx), "annotation must point at a bot turn".into())
            }
            Some(_) => {}
        }
        if let Some(p) = prev {
            if idx <= p {
                push("turn_index", Some(idx), format!("indices not strictly increasing ({p} then {idx})"));
            }
        }
        prev = Some(idx);

        match (&a.gold_query, a.needs_retrieval) {
            (None, true) => push("gold_query", Some(idx), "needs_retrieval but gold_query is absent".into()),
            (Some(q), true) if q.trim().is_empty() => {
                push("gold_query", Some(idx), "gold_query is empty".into())
            }
            (Some(_), false) => {
                push("gold_query", Some(idx), "gold_query present without needs_retrieval".into())
            }
            _ => {}
        }
        if a.gold_knowledge.is_some() && !a.needs_retrieval {
            push("gold_knowledge", Some(idx), "gold_knowledge present without needs_retrieval".into());
        }
        if a.gold_response.trim().is_empty() {
            push("gold_response", Some(idx), "gold_response is empty".into());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Rd,
    Qg,
    Rg,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Rd, TaskKind::Qg, TaskKind::Rg];

    pub fn side(self) -> Side {
        match self {
            TaskKind::Rd | TaskKind::Qg => Side::Query,
            TaskKind::Rg => Side::Response,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Rd => "RD",
            TaskKind::Qg => "QG",
            TaskKind::Rg => "RG",
        })
    }
}

/// Which of the two input formats an instance uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Query,
    Response,
}

/// Reserved separator between context and knowledge in response-side inputs.
pub const SEP: &str = "[SEP]";

/// The target text that encodes a negative retrieval decision.
pub const NO_QUERY: &str = "No Query";

/// Structured model input: prompt prefix, rendered context turns and, for the
/// response side, the knowledge segment (possibly empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceText {
    pub prefix: PromptPrefix,
    /// One entry per included turn, each already rendered as `speaker: text`.
    pub context_turns: Vec<String>,
    pub knowledge: Option<String>,
}

impl SourceText {
    pub fn context(&self) -> String {
        self.context_turns.join("; ")
    }

    /// Surface form of the input. Continuous prefixes have no surface text.
    pub fn render(&self) -> String {
        let context = self.context();
        let mut out = match &self.prefix {
            PromptPrefix::Token(tok) => format!("{tok} {context}"),
            PromptPrefix::Template { before, after } => join_nonempty(&[before, &context, after]),
            PromptPrefix::Virtual { .. } => context,
        };
        if let Some(k) = &self.knowledge {
            out.push(' ');
            out.push_str(SEP);
            if !k.is_empty() {
                out.push(' ');
                out.push_str(k);
            }
        }
        out
    }
}

pub(crate) fn join_nonempty(parts: &[&str]) -> String {
    parts.iter().map(|p| p.trim()).filter(|p| !p.is_empty()).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub episode_id: String,
    pub turn_index: usize,
    pub kind: TaskKind,
    pub source: SourceText,
    pub target: String,
    pub needs_retrieval: bool,
}

impl TaskInstance {
    /// Checks the per-kind invariants on the target and source.
    pub fn check(&self) -> Result<(), String> {
        match self.kind {
            TaskKind::Rd if self.target != NO_QUERY => Err(format!("RD target must be {NO_QUERY:?}")),
            TaskKind::Qg if self.target == NO_QUERY => Err("QG target must be a real query".into()),
            TaskKind::Rg if self.source.render().matches(SEP).count() != 1 => {
                Err("RG source must contain exactly one separator".into())
            }
            _ => Ok(()),
        }
    }
}

/// Parsed outcome of a query-side generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", content = "query_text", rename_all = "snake_case")]
pub enum Decision {
    NoQuery,
    Query(String),
}

impl Decision {
    /// Builds a `Query` decision; `None` for blank text.
    pub fn query(text: &str) -> Option<Self> {
        let t = text.trim();
        (!t.is_empty()).then(|| Decision::Query(t.to_string()))
    }

    pub fn is_query(&self) -> bool {
        matches!(self, Decision::Query(_))
    }

    pub fn query_text(&self) -> Option<&str> {
        match self {
            Decision::Query(q) => Some(q),
            Decision::NoQuery => None,
        }
    }

    /// Wire label used by the chat API.
    pub fn label(&self) -> &'static str {
        match self {
            Decision::NoQuery => "no_query",
            Decision::Query(_) => "query",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid loss weights: {0}")]
pub struct WeightsError(pub String);

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, WeightsError> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), WeightsError> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(WeightsError("weights must be finite and nonnegative".into()));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(WeightsError("at least one weight must be positive".into()));
        }
        Ok(())
    }

    /// Dusinc preset: alpha 0.2, beta = gamma = 1.
    pub fn dusinc() -> Self {
        Self { alpha: 0.2, beta: 1.0, gamma: 1.0 }
    }

    /// WizInt preset: alpha 1.2; beta and gamma are unreported and default to 1.
    pub fn wizint() -> Self {
        Self { alpha: 1.2, beta: 1.0, gamma: 1.0 }
    }

    pub fn for_kind(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::Rd => self.alpha,
            TaskKind::Qg => self.beta,
            TaskKind::Rg => self.gamma,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}
