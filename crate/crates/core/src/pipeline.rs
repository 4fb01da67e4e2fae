//! Inference orchestration: decide and query, search, then respond.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{context_segments, DEFAULT_MAX_CONTEXT_TURNS};
use crate::model::{DecodingConfig, Model, ModelError};
use crate::prompts::{parse_decision, render_prompt};
use crate::retrieval::{compose_knowledge, Retriever};
use crate::types::{Decision, DialogueTurn, Side, SourceText, Speaker, NO_QUERY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceMode {
    #[default]
    Auto,
    AlwaysRetrieve,
    NeverRetrieve,
}

impl ForceMode {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "auto" => Some(Self::Auto),
            "always" | "always_retrieve" => Some(Self::AlwaysRetrieve),
            "never" | "never_retrieve" => Some(Self::NeverRetrieve),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub rd_qg_ms: f64,
    pub search_ms: f64,
    pub rg_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceFlags {
    /// The model produced an empty response; `response` is "".
    pub empty_response: bool,
    /// The retriever failed and the turn continued without knowledge.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval_error: Option<String>,
}

/// Per-turn record. On the wire `decision` is `"no_query"` or `"query"` and
/// the query text travels in `query`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TraceWire", try_from = "TraceWire")]
pub struct TurnTrace {
    pub context_rendered: String,
    pub decision: Decision,
    pub knowledge: String,
    pub response: String,
    pub timings: Timings,
    pub flags: TraceFlags,
}

impl TurnTrace {
    pub fn query(&self) -> Option<&str> {
        self.decision.query_text()
    }

    /// NoQuery implies empty knowledge.
    pub fn check(&self) -> Result<(), String> {
        if !self.decision.is_query() && !self.knowledge.is_empty() {
            return Err("no_query turn carries knowledge".into());
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TraceWire {
    context_rendered: String,
    decision: String,
    query: Option<String>,
    knowledge: String,
    response: String,
    timings: Timings,
    #[serde(default)]
    flags: TraceFlags,
}

impl From<TurnTrace> for TraceWire {
    fn from(t: TurnTrace) -> Self {
        TraceWire {
            decision: t.decision.label().into(),
            query: t.decision.query_text().map(String::from),
            context_rendered: t.context_rendered,
            knowledge: t.knowledge,
            response: t.response,
            timings: t.timings,
            flags: t.flags,
        }
    }
}

impl TryFrom<TraceWire> for TurnTrace {
    type Error = String;

    fn try_from(w: TraceWire) -> Result<Self, String> {
        let decision = match (w.decision.as_str(), w.query) {
            ("no_query", None) => Decision::NoQuery,
            ("query", Some(q)) => Decision::query(&q).ok_or("blank query text")?,
            (d, q) => return Err(format!("inconsistent decision {d:?} with query {q:?}")),
        };
        let t = TurnTrace {
            context_rendered: w.context_rendered,
            decision,
            knowledge: w.knowledge,
            response: w.response,
            timings: w.timings,
            flags: w.flags,
        };
        t.check()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub max_context_turns: usize,
    pub query_decoding: DecodingConfig,
    pub response_decoding: DecodingConfig,
    pub search_limit: usize,
    /// Whitespace tokens of knowledge passed to response generation.
    pub knowledge_budget: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_context_turns: DEFAULT_MAX_CONTEXT_TURNS,
            query_decoding: DecodingConfig::greedy(16),
            response_decoding: DecodingConfig::greedy(32),
            search_limit: 3,
            knowledge_budget: 48,
        }
    }
}

/// What was known when a stage failed.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct PartialTrace {
    pub context_rendered: String,
    pub decision: Option<Decision>,
    pub knowledge: Option<String>,
    pub timings: Timings,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("pipeline contract violation: {0}")]
    Contract(String),
    #[error("{stage} failed: {source}")]
    Model {
        stage: &'static str,
        source: ModelError,
        partial: Box<PartialTrace>,
    },
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn respond(
    context: &[DialogueTurn],
    model: &Model,
    retriever: &dyn Retriever,
    cfg: &PipelineConfig,
) -> Result<TurnTrace, PipelineError> {
    respond_with_mode(context, model, retriever, cfg, ForceMode::Auto)
}

pub fn respond_with_mode(
    context: &[DialogueTurn],
    model: &Model,
    retriever: &dyn Retriever,
    cfg: &PipelineConfig,
    mode: ForceMode,
) -> Result<TurnTrace, PipelineError> {
    let last = context.last().ok_or_else(|| PipelineError::Contract("empty session context".into()))?;
    if last.speaker != Speaker::User {
        return Err(PipelineError::Contract("last turn must be from the user".into()));
    }
    if last.text.trim().is_empty() {
        return Err(PipelineError::Contract("empty user turn".into()));
    }
    let segments = context_segments(context, context.len() - 1, cfg.max_context_turns)
        .map_err(|e| PipelineError::Contract(e.to_string()))?;
    let prefix = |side| render_prompt(&model.scheme, side).map_err(|e| PipelineError::Contract(e.to_string()));
    let mut partial = PartialTrace { context_rendered: segments.join("; "), ..PartialTrace::default() };
    let fail = |stage, source, partial: &PartialTrace| PipelineError::Model { stage, source, partial: Box::new(partial.clone()) };

    let t0 = Instant::now();
    let decision = match mode {
        ForceMode::NeverRetrieve => Decision::NoQuery,
        ForceMode::Auto => {
            let src = SourceText { prefix: prefix(Side::Query)?, context_turns: segments.clone(), knowledge: None };
            let text = model.generate_text(&src, &cfg.query_decoding).map_err(|e| fail("query generation", e, &partial))?;
            // Empty output is treated as a negative decision.
            parse_decision(&text).unwrap_or(Decision::NoQuery)
        }
        ForceMode::AlwaysRetrieve => {
            let src = SourceText { prefix: prefix(Side::Query)?, context_turns: segments.clone(), knowledge: None };
            let mut dec = cfg.query_decoding.clone();
            dec.suppress_first.extend(model.tokenizer.encode(NO_QUERY).first());
            let text = model.generate_text(&src, &dec).map_err(|e| fail("query generation", e, &partial))?;
            match parse_decision(&text) {
                Ok(d @ Decision::Query(_)) => d,
                // Nothing usable was generated: search with the user's words.
                _ => Decision::Query(last.text.trim().to_string()),
            }
        }
    };
    partial.timings.rd_qg_ms = ms_since(t0);
    partial.decision = Some(decision.clone());

    let mut flags = TraceFlags::default();
    let t1 = Instant::now();
    let knowledge = match &decision {
        Decision::Query(q) => match retriever.search(q, cfg.search_limit) {
            Ok(r) => compose_knowledge(&r, cfg.knowledge_budget),
            Err(e) => {
                flags.retrieval_error = Some(e.to_string());
                String::new()
            }
        },
        Decision::NoQuery => String::new(),
    };
    partial.timings.search_ms = ms_since(t1);
    partial.knowledge = Some(knowledge.clone());

    let t2 = Instant::now();
    let src = SourceText { prefix: prefix(Side::Response)?, context_turns: segments, knowledge: Some(knowledge.clone()) };
    let response = model.generate_text(&src, &cfg.response_decoding).map_err(|e| fail("response generation", e, &partial))?;
    let response = response.trim().to_string();
    flags.empty_response = response.is_empty();
    partial.timings.rg_ms = ms_since(t2);

    Ok(TurnTrace { context_rendered: partial.context_rendered, decision, knowledge, response, timings: partial.timings, flags })
}
