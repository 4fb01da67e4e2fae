//! Runs a model over annotated episodes and assembles ablation tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_report, score_query_task, EvalError, EvalMode, MetricReport, QueryPrediction, ResponsePrediction};
use crate::corpus::{expand_all, Ablation, CorpusError};
use crate::model::{Checkpoint, CheckpointError, DecodingConfig, Model, ModelError};
use crate::prompts::parse_decision;
use crate::types::{Decision, Episode, TaskKind, NO_QUERY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Overrides the mode implied by the checkpoint's ablation.
    pub mode: Option<EvalMode>,
    pub query_decoding: DecodingConfig,
    pub response_decoding: DecodingConfig,
    pub run_query: bool,
    pub run_response: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: None,
            query_decoding: DecodingConfig::greedy(16),
            response_decoding: DecodingConfig::greedy(32),
            run_query: true,
            run_response: true,
        }
    }
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub episode_id: String,
    pub turn_index: usize,
    pub task: TaskKind,
    pub prediction: String,
    /// `"no_query"` or `"query"` for query-side records.
    pub decision: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Mode the ablation was trained for: configurations without the RD task
/// are evaluated as if every instance needs a query.
pub fn default_mode(ablation: Ablation) -> EvalMode {
    if ablation.drops_rd() {
        EvalMode::WithoutRd
    } else {
        EvalMode::WithRd
    }
}

pub fn evaluate_model(
    model: &Model,
    episodes: &[Episode],
    ablation: Ablation,
    max_context_turns: usize,
    opts: &EvalOptions,
) -> Result<(MetricReport, Vec<PredictionRecord>), HarnessError> {
    let mode = opts.mode.unwrap_or_else(|| default_mode(ablation));
    let instances = expand_all(episodes, &model.scheme, Ablation::Full, max_context_turns)?;
    let gold_queries: std::collections::HashMap<(&str, usize), Option<&str>> = episodes
        .iter()
        .flat_map(|e| e.annotations.iter().map(move |a| ((e.id.as_str(), a.turn_index), a.gold_query.as_deref())))
        .collect();

    let run_query = opts.run_query && !ablation.drops_qg();
    let run_response = opts.run_response && !ablation.drops_rg();
    let mut suppressed = opts.query_decoding.clone();
    suppressed.suppress_first.extend(model.tokenizer.encode(NO_QUERY).first());

    let mut records = Vec::new();
    let mut queries = Vec::new();
    let mut responses = Vec::new();
    for inst in &instances {
        match inst.kind {
            TaskKind::Rd | TaskKind::Qg if run_query => {
                let (text, decision) = match mode {
                    EvalMode::WithRd => {
                        let text = model.generate_text(&inst.source, &opts.query_decoding)?;
                        let d = parse_decision(&text).unwrap_or(Decision::NoQuery);
                        (text, d)
                    }
                    EvalMode::WithoutRd if inst.needs_retrieval => {
                        let text = model.generate_text(&inst.source, &suppressed)?;
                        let d = Decision::query(&text).unwrap_or(Decision::NoQuery);
                        (text, d)
                    }
                    EvalMode::WithoutRd => continue,
                };
                records.push(PredictionRecord {
                    episode_id: inst.episode_id.clone(),
                    turn_index: inst.turn_index,
                    task: inst.kind,
                    prediction: text.trim().to_string(),
                    decision: Some(decision.label().to_string()),
                });
                let gold = gold_queries.get(&(inst.episode_id.as_str(), inst.turn_index)).copied().flatten();
                queries.push(QueryPrediction {
                    decision,
                    needs_retrieval: inst.needs_retrieval,
                    gold_query: gold.map(str::to_string),
                });
            }
            TaskKind::Rg if run_response => {
                let mut source = inst.source.clone();
                if ablation.drops_knowledge() {
                    source.knowledge = Some(String::new());
                }
                let response = model.generate_text(&source, &opts.response_decoding)?.trim().to_string();
                records.push(PredictionRecord {
                    episode_id: inst.episode_id.clone(),
                    turn_index: inst.turn_index,
                    task: TaskKind::Rg,
                    prediction: response.clone(),
                    decision: None,
                });
                responses.push(ResponsePrediction {
                    response,
                    gold_response: inst.target.clone(),
                    knowledge: source.knowledge.unwrap_or_default(),
                });
            }
            _ => {}
        }
    }
    let scores = if run_query { Some(score_query_task(&queries, mode)?) } else { None };
    Ok((build_report(scores.as_ref(), &responses), records))
}

pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    episodes: &[Episode],
    opts: &EvalOptions,
) -> Result<(MetricReport, Vec<PredictionRecord>), HarnessError> {
    let model = ckpt.restore_model()?;
    evaluate_model(&model, episodes, ckpt.config.ablation, ckpt.config.max_context_turns, opts)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })
}

/// Column sets of the query-side ablation table, the response-side ablation
/// table and the retrieval-decision bias table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    QueryGeneration,
    ResponseGeneration,
    RetrievalDecision,
}

impl TableKind {
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            TableKind::QueryGeneration => &["Acc", "TPR", "TNR", "F1", "BLEU-1", "BLEU-2"],
            TableKind::ResponseGeneration => &["F1", "KF1", "BLEU-1", "BLEU-2", "DISTINCT-1", "DISTINCT-2"],
            TableKind::RetrievalDecision => &["TPR", "TNR"],
        }
    }

    pub fn default_rows(self) -> &'static [Ablation] {
        match self {
            TableKind::QueryGeneration => &Ablation::QG_TABLE,
            TableKind::ResponseGeneration => &Ablation::RG_TABLE,
            TableKind::RetrievalDecision => &[Ablation::Full],
        }
    }

    fn cells(self, r: &MetricReport) -> Vec<Option<f64>> {
        let rd = r.rd.as_ref();
        let qg = r.qg.as_ref();
        let rg = r.rg.as_ref();
        match self {
            TableKind::QueryGeneration => vec![
                rd.map(|m| m.acc),
                rd.and_then(|m| m.tpr),
                rd.and_then(|m| m.tnr),
                qg.map(|m| m.f1),
                qg.map(|m| m.bleu1),
                qg.map(|m| m.bleu2),
            ],
            TableKind::ResponseGeneration => vec![
                rg.map(|m| m.f1),
                rg.and_then(|m| m.kf1),
                rg.map(|m| m.bleu1),
                rg.map(|m| m.bleu2),
                rg.map(|m| m.distinct1),
                rg.map(|m| m.distinct2),
            ],
            TableKind::RetrievalDecision => vec![rd.and_then(|m| m.tpr), rd.and_then(|m| m.tnr)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: Ablation,
    pub label: String,
    pub present: bool,
    /// One cell per column; `None` renders as "--".
    pub cells: Vec<Option<f64>>,
    pub report: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: TableKind,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render_text(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.label.len()).chain(["Model".len()]).max().unwrap_or(5);
        let col_w = self.columns.iter().map(|c| c.len()).max().unwrap_or(6).max(7);
        let mut out = format!("{:<label_w$}", "Model");
        for c in &self.columns {
            let _ = write!(out, " | {c:>col_w$}");
        }
        out.push('\n');
        out.push_str(&"-".repeat(label_w + self.columns.len() * (col_w + 3)));
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<label_w$}", r.label);
            if !r.present {
                let _ = writeln!(out, " | absent ({})", r.note.as_deref().unwrap_or("no checkpoint"));
                continue;
            }
            for c in &r.cells {
                let cell = c.map_or_else(|| "--".to_string(), |v| format!("{:.1}%", v * 100.0));
                let _ = write!(out, " | {cell:>col_w$}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn checkpoint_path(dir: &Path, config: Ablation) -> std::path::PathBuf {
    dir.join(format!("{}.ckpt.json", config.name()))
}

/// One row per configuration, read from `<dir>/<name>.ckpt.json`. A missing
/// or unreadable checkpoint yields an absent row and the run continues.
pub fn run_ablation_matrix(
    dir: &Path,
    episodes: &[Episode],
    configs: &[Ablation],
    kind: TableKind,
    opts: &EvalOptions,
) -> Result<AblationTable, HarnessError> {
    let opts = EvalOptions {
        run_query: kind != TableKind::ResponseGeneration,
        run_response: kind == TableKind::ResponseGeneration,
        ..opts.clone()
    };
    let mut rows = Vec::with_capacity(configs.len());
    for &config in configs {
        let absent = |note: String| AblationRow {
            config,
            label: config.label().to_string(),
            present: false,
            cells: vec![None; kind.columns().len()],
            report: None,
            note: Some(note),
        };
        let path = checkpoint_path(dir, config);
        let ckpt = match Checkpoint::load(&path) {
            Ok(c) => c,
            Err(e) => {
                rows.push(absent(e.to_string()));
                continue;
            }
        };
        if ckpt.config.ablation != config {
            rows.push(absent(format!("checkpoint was trained as {}", ckpt.config.ablation.name())));
            continue;
        }
        let (report, _) = evaluate_checkpoint(&ckpt, episodes, &opts)?;
        rows.push(AblationRow {
            config,
            label: config.label().to_string(),
            present: true,
            cells: kind.cells(&report),
            report: Some(report),
            note: None,
        });
    }
    Ok(AblationTable { kind, columns: kind.columns().iter().map(|c| c.to_string()).collect(), rows })
}
