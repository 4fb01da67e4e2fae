//! Metric reports for the three tasks and the evaluation harness.

pub mod harness;
pub mod metrics;

use serde::{Deserialize, Serialize};

use crate::types::Decision;
use metrics::{bleu_n, distinct_n, tokenize, unigram_f1};

pub use harness::{
    evaluate_checkpoint, evaluate_model, run_ablation_matrix, write_predictions, AblationRow, AblationTable, EvalOptions,
    PredictionRecord, TableKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    WithRd,
    WithoutRd,
}

impl EvalMode {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "with_rd" => Some(Self::WithRd),
            "without_rd" => Some(Self::WithoutRd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QgMetrics {
    pub f1: f64,
    pub bleu1: f64,
    pub bleu2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdMetrics {
    pub acc: f64,
    /// `None` when the set has no retrieval-required instance.
    pub tpr: Option<f64>,
    /// `None` when the set has no retrieval-free instance.
    pub tnr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RgMetrics {
    pub f1: f64,
    /// Averaged over instances given non-empty knowledge; `None` if there are none.
    pub kf1: Option<f64>,
    pub bleu1: f64,
    pub bleu2: f64,
    pub distinct1: f64,
    pub distinct2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub required: usize,
    pub not_required: usize,
    pub rg: usize,
    pub rg_with_knowledge: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub qg: Option<QgMetrics>,
    pub rd: Option<RdMetrics>,
    pub rg: Option<RgMetrics>,
    pub counts: Counts,
}

impl MetricReport {
    /// Human-readable summary; absent metrics print as `--`.
    pub fn render_text(&self) -> String {
        let pct = |v: f64| format!("{:.1}%", v * 100.0);
        let opt = |v: Option<f64>| v.map_or_else(|| "--".to_string(), pct);
        let mut out = String::new();
        match &self.rd {
            Some(rd) => out.push_str(&format!("RD  acc {}  tpr {}  tnr {}\n", pct(rd.acc), opt(rd.tpr), opt(rd.tnr))),
            None => out.push_str("RD  --\n"),
        }
        match &self.qg {
            Some(q) => out.push_str(&format!("QG  f1 {}  bleu-1 {}  bleu-2 {}\n", pct(q.f1), pct(q.bleu1), pct(q.bleu2))),
            None => out.push_str("QG  --\n"),
        }
        match &self.rg {
            Some(r) => out.push_str(&format!(
                "RG  f1 {}  kf1 {}  bleu-1 {}  bleu-2 {}  distinct-1 {}  distinct-2 {}\n",
                pct(r.f1),
                opt(r.kf1),
                pct(r.bleu1),
                pct(r.bleu2),
                pct(r.distinct1),
                pct(r.distinct2)
            )),
            None => out.push_str("RG  --\n"),
        }
        let c = &self.counts;
        out.push_str(&format!(
            "instances: {} need retrieval, {} do not, {} responses ({} with knowledge)\n",
            c.required, c.not_required, c.rg, c.rg_with_knowledge
        ));
        out
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("evaluation contract violation at item {index}: {message}")]
    Contract { index: usize, message: String },
}

/// One query-side outcome with its gold annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub decision: Decision,
    pub needs_retrieval: bool,
    pub gold_query: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsePrediction {
    pub response: String,
    pub gold_response: String,
    /// The knowledge string the model was given.
    pub knowledge: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryScores {
    pub qg: Option<QgMetrics>,
    pub rd: Option<RdMetrics>,
    pub required: usize,
    pub not_required: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// QG metrics over retrieval-required instances only, where a NoQuery
/// prediction scores 0; RD metrics over all instances in `WithRd` mode. In
/// `WithoutRd` mode the system ran without a retrieval decision, so RD
/// metrics are not reported.
pub fn score_query_task(preds: &[QueryPrediction], mode: EvalMode) -> Result<QueryScores, EvalError> {
    let (mut f1, mut b1, mut b2) = (Vec::new(), Vec::new(), Vec::new());
    let (mut tp, mut tn, mut required, mut not_required) = (0usize, 0usize, 0usize, 0usize);
    for (index, p) in preds.iter().enumerate() {
        let gold = p.gold_query.as_deref().filter(|q| !q.trim().is_empty());
        if p.needs_retrieval != gold.is_some() {
            return Err(EvalError::Contract { index, message: "gold query must be present iff retrieval is needed".into() });
        }
        if let Some(gold) = gold {
            required += 1;
            tp += usize::from(p.decision.is_query());
            let (a, b, c) = match p.decision.query_text() {
                Some(q) => {
                    let (h, r) = (tokenize(q), tokenize(gold));
                    (unigram_f1(&h, &r), bleu_n(&h, &r, 1), bleu_n(&h, &r, 2))
                }
                None => (0.0, 0.0, 0.0),
            };
            f1.push(a);
            b1.push(b);
            b2.push(c);
        } else {
            not_required += 1;
            tn += usize::from(!p.decision.is_query());
        }
    }
    let qg = (required > 0).then(|| QgMetrics { f1: mean(&f1), bleu1: mean(&b1), bleu2: mean(&b2) });
    let rd = (mode == EvalMode::WithRd && !preds.is_empty()).then(|| RdMetrics {
        acc: (tp + tn) as f64 / preds.len() as f64,
        tpr: (required > 0).then(|| tp as f64 / required as f64),
        tnr: (not_required > 0).then(|| tn as f64 / not_required as f64),
    });
    Ok(QueryScores { qg, rd, required, not_required })
}

pub fn score_response_task(preds: &[ResponsePrediction]) -> Option<RgMetrics> {
    if preds.is_empty() {
        return None;
    }
    let hyps: Vec<Vec<String>> = preds.iter().map(|p| tokenize(&p.response)).collect();
    let (mut f1, mut b1, mut b2, mut kf1) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (p, h) in preds.iter().zip(&hyps) {
        let r = tokenize(&p.gold_response);
        f1.push(unigram_f1(h, &r));
        b1.push(bleu_n(h, &r, 1));
        b2.push(bleu_n(h, &r, 2));
        let k = tokenize(&p.knowledge);
        if !k.is_empty() {
            kf1.push(unigram_f1(h, &k));
        }
    }
    Some(RgMetrics {
        f1: mean(&f1),
        kf1: (!kf1.is_empty()).then(|| mean(&kf1)),
        bleu1: mean(&b1),
        bleu2: mean(&b2),
        distinct1: distinct_n(&hyps, 1),
        distinct2: distinct_n(&hyps, 2),
    })
}

pub fn build_report(query: Option<&QueryScores>, responses: &[ResponsePrediction]) -> MetricReport {
    MetricReport {
        qg: query.and_then(|q| q.qg),
        rd: query.and_then(|q| q.rd),
        rg: score_response_task(responses),
        counts: Counts {
            required: query.map_or(0, |q| q.required),
            not_required: query.map_or(0, |q| q.not_required),
            rg: responses.len(),
            rg_with_knowledge: responses.iter().filter(|r| !r.knowledge.trim().is_empty()).count(),
        },
    }
}
