//! Corpus ingestion (canonical JSON-lines episodes), context rendering,
//! expansion of episodes into task instances and epoch batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::prompts::{render_prompt, PromptError, PromptScheme};
use crate::types::{
    validate_episode, DialogueTurn, Episode, Side, SourceText, TaskInstance, TaskKind, NO_QUERY,
};

pub const DEFAULT_MAX_CONTEXT_TURNS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContextStyle {
    /// Only the turn immediately preceding the annotated bot turn.
    SingleTurn,
    #[default]
    MultiTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub style: ContextStyle,
    #[serde(default = "default_max_context_turns")]
    pub max_context_turns: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_context_turns() -> usize {
    DEFAULT_MAX_CONTEXT_TURNS
}

impl CorpusConfig {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            style: ContextStyle::MultiTurn,
            max_context_turns: DEFAULT_MAX_CONTEXT_TURNS,
            seed: 0,
        }
    }

    /// Context window after applying the style.
    pub fn context_turns(&self) -> usize {
        match self.style {
            ContextStyle::SingleTurn => 1,
            ContextStyle::MultiTurn => self.max_context_turns,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: malformed record (field `{field}`): {message}")]
    Malformed { line: usize, field: String, message: String },
    #[error("line {line}: invalid episode: {violation}")]
    Invalid { line: usize, violation: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Parses canonical JSON-lines text. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn parse_corpus(text: &str) -> Result<Vec<Episode>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let episode: Episode = serde_json::from_str(line).map_err(|e| {
            let message = e.to_string();
            Malformed::from_message(line_no, message)
        })?;
        if let Some(v) = validate_episode(&episode).into_iter().next() {
            return Err(CorpusError::Invalid { line: line_no, violation: v.to_string() });
        }
        out.push(episode);
    }
    Ok(out)
}

struct Malformed;

impl Malformed {
    fn from_message(line: usize, message: String) -> CorpusError {
        // serde_json reports "missing field `x`" / "unknown field `x`".
        let field = message
            .split('`')
            .nth(1)
            .filter(|_| message.contains("field `"))
            .unwrap_or("record")
            .to_string();
        CorpusError::Malformed { line, field, message }
    }
}

pub fn load_corpus(cfg: &CorpusConfig) -> Result<Vec<Episode>, CorpusError> {
    let text = fs::read_to_string(&cfg.path)
        .map_err(|source| CorpusError::Io { path: cfg.path.clone(), source })?;
    parse_corpus(&text)
}

pub fn serialize_episode(e: &Episode) -> String {
    serde_json::to_string(e).expect("episode serializes")
}

pub fn write_corpus(path: &Path, episodes: &[Episode]) -> std::io::Result<()> {
    let mut text = String::new();
    for e in episodes {
        text.push_str(&serialize_episode(e));
        text.push('\n');
    }
    fs::write(path, text)
}

/// The rendered `speaker: text` segments of the last `min(upto + 1, max_turns)`
/// turns ending at `upto`.
pub fn context_segments(
    turns: &[DialogueTurn],
    upto: usize,
    max_turns: usize,
) -> Result<Vec<String>, CorpusError> {
    if upto >= turns.len() {
        return Err(CorpusError::Contract(format!(
            "context end {upto} out of range for {} turns",
            turns.len()
        )));
    }
    if max_turns == 0 {
        return Err(CorpusError::Contract("max_turns must be at least 1".into()));
    }
    let start = (upto + 1).saturating_sub(max_turns);
    Ok(turns[start..=upto]
        .iter()
        .map(|t| format!("{}: {}", t.speaker.label(), t.text.trim()))
        .collect())
}

pub fn render_context(turns: &[DialogueTurn], upto: usize, max_turns: usize) -> Result<String, CorpusError> {
    Ok(context_segments(turns, upto, max_turns)?.join("; "))
}

/// Training configurations from the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    WoRd,
    WoRg,
    WoKnowledge,
    WoKnowledgeRd,
    WoQgRd,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::WoRd,
        Ablation::WoRg,
        Ablation::WoKnowledge,
        Ablation::WoKnowledgeRd,
        Ablation::WoQgRd,
    ];

    /// Rows of the query-generation ablation table.
    pub const QG_TABLE: [Ablation; 5] =
        [Ablation::Full, Ablation::WoRd, Ablation::WoRg, Ablation::WoKnowledge, Ablation::WoKnowledgeRd];

    /// Rows of the response-generation ablation table.
    pub const RG_TABLE: [Ablation; 3] = [Ablation::Full, Ablation::WoRd, Ablation::WoQgRd];

    pub fn drops_rd(self) -> bool {
        matches!(self, Ablation::WoRd | Ablation::WoKnowledgeRd | Ablation::WoQgRd)
    }

    pub fn drops_qg(self) -> bool {
        matches!(self, Ablation::WoQgRd)
    }

    pub fn drops_rg(self) -> bool {
        matches!(self, Ablation::WoRg)
    }

    pub fn drops_knowledge(self) -> bool {
        matches!(self, Ablation::WoKnowledge | Ablation::WoKnowledgeRd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WoRd => "wo_rd",
            Ablation::WoRg => "wo_rg",
            Ablation::WoKnowledge => "wo_knowledge",
            Ablation::WoKnowledgeRd => "wo_knowledge_rd",
            Ablation::WoQgRd => "wo_qg_rd",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "Full",
            Ablation::WoRd => "w/o RD",
            Ablation::WoRg => "w/o RG",
            Ablation::WoKnowledge => "w/o Knowledge",
            Ablation::WoKnowledgeRd => "w/o Knowledge & RD",
            Ablation::WoQgRd => "w/o QG & RD",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Expands each annotation into one query-side instance (RD or QG) and one
/// response-side instance (RG), subject to the ablation.
pub fn expand_instances(
    e: &Episode,
    scheme: &PromptScheme,
    ablation: Ablation,
    max_context_turns: usize,
) -> Result<Vec<TaskInstance>, CorpusError> {
    let query_prefix = render_prompt(scheme, Side::Query)?;
    let response_prefix = render_prompt(scheme, Side::Response)?;
    let mut out = Vec::with_capacity(e.annotations.len() * 2);

    for a in &e.annotations {
        let context_turns = if a.turn_index == 0 {
            Vec::new()
        } else {
            context_segments(&e.turns, a.turn_index - 1, max_context_turns)?
        };

        let (kind, target) = if a.needs_retrieval {
            let q = a.gold_query.as_deref().unwrap_or_default();
            (TaskKind::Qg, q.trim().to_string())
        } else {
            (TaskKind::Rd, NO_QUERY.to_string())
        };
        let dropped = match kind {
            TaskKind::Rd => ablation.drops_rd(),
            _ => ablation.drops_qg(),
        };
        if !dropped {
            out.push(TaskInstance {
                episode_id: e.id.clone(),
                turn_index: a.turn_index,
                kind,
                source: SourceText {
                    prefix: query_prefix.clone(),
                    context_turns: context_turns.clone(),
                    knowledge: None,
                },
                target,
                needs_retrieval: a.needs_retrieval,
            });
        }

        if !ablation.drops_rg() {
            let knowledge = if ablation.drops_knowledge() {
                String::new()
            } else {
                a.gold_knowledge.as_deref().unwrap_or_default().trim().to_string()
            };
            out.push(TaskInstance {
                episode_id: e.id.clone(),
                turn_index: a.turn_index,
                kind: TaskKind::Rg,
                source: SourceText {
                    prefix: response_prefix.clone(),
                    context_turns,
                    knowledge: Some(knowledge),
                },
                target: a.gold_response.trim().to_string(),
                needs_retrieval: a.needs_retrieval,
            });
        }
    }
    Ok(out)
}

pub fn expand_all(
    episodes: &[Episode],
    scheme: &PromptScheme,
    ablation: Ablation,
    max_context_turns: usize,
) -> Result<Vec<TaskInstance>, CorpusError> {
    let mut out = Vec::new();
    for e in episodes {
        out.extend(expand_instances(e, scheme, ablation, max_context_turns)?);
    }
    Ok(out)
}

/// Index batches for one epoch: a seeded global shuffle (tasks mixed), cut
/// into consecutive batches. The last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>, CorpusError> {
    if batch_size == 0 {
        return Err(CorpusError::Contract("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Lazily yields `(epoch, batch)` pairs across `epochs` epochs.
pub fn split_and_shuffle(
    n: usize,
    batch_size: usize,
    seed: u64,
    epochs: u64,
) -> Result<impl Iterator<Item = (u64, Vec<usize>)>, CorpusError> {
    if batch_size == 0 {
        return Err(CorpusError::Contract("batch size must be at least 1".into()));
    }
    Ok((0..epochs).flat_map(move |epoch| {
        epoch_batches(n, batch_size, seed, epoch)
            .expect("batch size checked")
            .into_iter()
            .map(move |b| (epoch, b))
    }))
}

/// Deterministic episode-level split into (train, held-out).
pub fn split_episodes(episodes: &[Episode], holdout_fraction: f64, seed: u64) -> (Vec<Episode>, Vec<Episode>) {
    let mut idx: Vec<usize> = (0..episodes.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = ((episodes.len() as f64) * holdout_fraction.clamp(0.0, 1.0)).round() as usize;
    let (hold, train) = idx.split_at(n_hold);
    let pick = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| episodes[i].clone()).collect::<Vec<_>>()
    };
    (pick(train), pick(hold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{TurnAnnotation, SEP};
    use proptest::prelude::*;

    fn turns() -> Vec<DialogueTurn> {
        vec![DialogueTurn::user("hi"), DialogueTurn::bot("hello"), DialogueTurn::user("weather?")]
    }

    #[test]
    fn render_context_examples() {
        assert_eq!(render_context(&[DialogueTurn::user("hi")], 0, 5).unwrap(), "user: hi");
        assert_eq!(render_context(&turns(), 2, 3).unwrap(), "user: hi; bot: hello; user: weather?");
        assert_eq!(render_context(&turns(), 2, 2).unwrap(), "bot: hello; user: weather?");
        assert!(matches!(render_context(&turns(), 3, 2), Err(CorpusError::Contract(_))));
    }

    fn annotated(needs: &[bool]) -> Episode {
        let mut turns = Vec::new();
        let mut annotations = Vec::new();
        for (i, &n) in needs.iter().enumerate() {
            turns.push(DialogueTurn::user(format!("question {i}")));
            turns.push(DialogueTurn::bot(format!("answer {i}")));
            annotations.push(TurnAnnotation {
                turn_index: 2 * i + 1,
                needs_retrieval: n,
                gold_query: n.then(|| format!("query {i}")),
                gold_knowledge: n.then(|| format!("fact {i}")),
                gold_response: format!("answer {i}"),
            });
        }
        Episode { id: "ep".into(), turns, annotations }
    }

    #[test]
    fn retrieval_annotation_expands_to_qg_and_rg() {
        let inst = expand_instances(&annotated(&[true]), &PromptScheme::default(), Ablation::Full, 5).unwrap();
        assert_eq!(inst.len(), 2);
        assert_eq!(inst[0].kind, TaskKind::Qg);
        assert_eq!(inst[0].target, "query 0");
        assert_eq!(inst[0].source.render(), "<QG> user: question 0");
        assert_eq!(inst[1].kind, TaskKind::Rg);
        assert_eq!(inst[1].source.render(), "<RG> user: question 0 [SEP] fact 0");
        for i in &inst {
            i.check().unwrap();
        }
    }

    #[test]
    fn no_retrieval_expands_to_rd_and_empty_knowledge() {
        let inst = expand_instances(&annotated(&[false]), &PromptScheme::default(), Ablation::Full, 5).unwrap();
        assert_eq!(inst.len(), 2);
        assert_eq!(inst[0].kind, TaskKind::Rd);
        assert_eq!(inst[0].target, "No Query");
        assert_eq!(inst[1].source.knowledge.as_deref(), Some(""));
        assert!(inst[1].source.render().ends_with(SEP));
    }

    #[test]
    fn ablations_filter_instances() {
        let e = annotated(&[true, true, true]);
        let s = PromptScheme::default();
        let wo_rg = expand_instances(&e, &s, Ablation::WoRg, 5).unwrap();
        assert_eq!(wo_rg.len(), 3);
        assert!(wo_rg.iter().all(|i| i.kind == TaskKind::Qg));

        let mixed = annotated(&[true, false]);
        let wo_rd = expand_instances(&mixed, &s, Ablation::WoRd, 5).unwrap();
        assert!(wo_rd.iter().all(|i| i.kind != TaskKind::Rd));
        assert_eq!(wo_rd.len(), 3);

        let wo_k = expand_instances(&mixed, &s, Ablation::WoKnowledge, 5).unwrap();
        assert!(wo_k.iter().filter(|i| i.kind == TaskKind::Rg).all(|i| i.source.knowledge.as_deref() == Some("")));

        let wo_qg_rd = expand_instances(&mixed, &s, Ablation::WoQgRd, 5).unwrap();
        assert!(wo_qg_rd.iter().all(|i| i.kind == TaskKind::Rg));
    }

    #[test]
    fn context_window_applies_to_later_turns() {
        let e = annotated(&[false, true, true]);
        let inst = expand_instances(&e, &PromptScheme::default(), Ablation::Full, 2).unwrap();
        let last = inst.iter().rev().find(|i| i.kind == TaskKind::Qg).unwrap();
        assert_eq!(last.source.context(), "bot: answer 1; user: question 2");
    }

    #[test]
    fn parse_empty_and_one_episode() {
        assert!(parse_corpus("").unwrap().is_empty());
        let line = serialize_episode(&annotated(&[true]));
        let eps = parse_corpus(&format!("{line}\n\n")).unwrap();
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].id, "ep");
    }

    #[test]
    fn missing_gold_response_names_field_and_line() {
        let text = format!(
            "{}\n{}\n",
            serialize_episode(&annotated(&[true])),
            r#"{"id":"x","turns":[{"speaker":"user","text":"a"},{"speaker":"bot","text":"b"}],"annotations":[{"turn_index":1,"needs_retrieval":false}]}"#
        );
        match parse_corpus(&text) {
            Err(CorpusError::Malformed { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "gold_response");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariant_violation_reported_with_line() {
        let mut e = annotated(&[true]);
        e.annotations[0].gold_query = None;
        let err = parse_corpus(&serialize_episode(&e)).unwrap_err();
        assert!(matches!(err, CorpusError::Invalid { line: 1, .. }));
        assert!(err.to_string().contains("gold_query"));
    }

    #[test]
    fn missing_file_is_io_error() {
        let cfg = CorpusConfig::new("/nonexistent/corpus.jsonl");
        assert!(matches!(load_corpus(&cfg), Err(CorpusError::Io { .. })));
    }

    #[test]
    fn batches_cover_each_instance_once() {
        let b = epoch_batches(10, 8, 3, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 2]);
        let mut all: Vec<_> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 8, 3, 0).unwrap());
        assert!(epoch_batches(10, 0, 3, 0).is_err());
    }

    #[test]
    fn seeds_and_epochs_change_order() {
        let a = epoch_batches(100, 8, 1, 0).unwrap().concat();
        let b = epoch_batches(100, 8, 2, 0).unwrap().concat();
        let c = epoch_batches(100, 8, 1, 1).unwrap().concat();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stream_spans_epochs() {
        let v: Vec<_> = split_and_shuffle(10, 4, 0, 2).unwrap().collect();
        assert_eq!(v.len(), 6);
        assert_eq!(v[3].0, 1);
    }

    #[test]
    fn split_is_partition() {
        let eps: Vec<Episode> = (0..10)
            .map(|i| Episode { id: format!("e{i}"), ..annotated(&[true]) })
            .collect();
        let (train, hold) = split_episodes(&eps, 0.2, 9);
        assert_eq!(train.len(), 8);
        assert_eq!(hold.len(), 2);
        assert!(hold.iter().all(|h| !train.iter().any(|t| t.id == h.id)));
    }

    fn arb_episode() -> impl Strategy<Value = Episode> {
        (1usize..4, proptest::collection::vec(any::<bool>(), 3), "[a-z]{1,6}").prop_map(|(n, flags, id)| {
            let mut e = annotated(&flags[..n]);
            e.id = id;
            e
        })
    }

    proptest! {
        #[test]
        fn canonical_roundtrip(e in arb_episode()) {
            let line = serialize_episode(&e);
            let parsed = parse_corpus(&line).unwrap();
            prop_assert_eq!(&parsed[0], &e);
            prop_assert_eq!(serialize_episode(&parsed[0]), line);
        }

        #[test]
        fn instance_count_and_kinds(e in arb_episode()) {
            let inst = expand_instances(&e, &PromptScheme::default(), Ablation::Full, 5).unwrap();
            prop_assert_eq!(inst.len(), 2 * e.annotations.len());
            for i in &inst {
                prop_assert!(i.check().is_ok());
                match i.kind {
                    TaskKind::Qg => prop_assert!(i.needs_retrieval),
                    TaskKind::Rd => prop_assert!(!i.needs_retrieval),
                    TaskKind::Rg => {}
                }
            }
        }

        #[test]
        fn separator_count_matches_turns(texts in proptest::collection::vec("[a-z]{1,5}( [a-z]{1,5}){0,3}", 1..8), max in 1usize..10) {
            let turns: Vec<_> = texts.iter().enumerate()
                .map(|(i, t)| if i % 2 == 0 { DialogueTurn::user(t.clone()) } else { DialogueTurn::bot(t.clone()) })
                .collect();
            let upto = turns.len() - 1;
            let rendered = render_context(&turns, upto, max).unwrap();
            let included = (upto + 1).min(max);
            prop_assert_eq!(rendered.matches("; ").count(), included - 1);
        }
    }
}
