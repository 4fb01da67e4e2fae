//! Knowledge acquisition: the retriever interface, a dataset-backed mock
//! and an HTTP search client.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::eval::metrics::{tokenize, unigram_f1};
use crate::types::Episode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub text: String,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KnowledgeResult {
    pub snippets: Vec<Snippet>,
    pub latency_ms: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RetrievalError {
    #[error("retrieval contract violation: {0}")]
    Contract(String),
    #[error("retrieval unavailable: {0}")]
    Unavailable(String),
}

pub trait Retriever: Send + Sync {
    fn search(&self, query: &str, limit: usize) -> Result<KnowledgeResult, RetrievalError>;
}

fn check_request(query: &str, limit: usize) -> Result<(), RetrievalError> {
    if query.trim().is_empty() {
        return Err(RetrievalError::Contract("empty query".into()));
    }
    if limit == 0 {
        return Err(RetrievalError::Contract("limit must be at least 1".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Entry {
    episode_id: String,
    turn_index: usize,
    query_tokens: Vec<String>,
    knowledge: String,
}

/// Looks up the gold knowledge whose gold query best overlaps the request.
#[derive(Debug, Clone, Default)]
pub struct MockRetriever {
    entries: Vec<Entry>,
}

impl MockRetriever {
    pub fn from_episodes(episodes: &[Episode]) -> Self {
        let mut entries = Vec::new();
        for e in episodes {
            for a in &e.annotations {
                if let (Some(q), Some(k)) = (&a.gold_query, &a.gold_knowledge) {
                    if k.trim().is_empty() {
                        continue;
                    }
                    entries.push(Entry {
                        episode_id: e.id.clone(),
                        turn_index: a.turn_index,
                        query_tokens: tokenize(q),
                        knowledge: k.clone(),
                    });
                }
            }
        }
        entries.sort_by(|a, b| a.episode_id.cmp(&b.episode_id).then(a.turn_index.cmp(&b.turn_index)));
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Retriever for MockRetriever {
    fn search(&self, query: &str, limit: usize) -> Result<KnowledgeResult, RetrievalError> {
        check_request(query, limit)?;
        let start = Instant::now();
        let q = tokenize(query);
        // Entries are sorted by (episode id, turn), so a strict comparison
        // keeps the smallest id among ties.
        let mut best: Option<(&Entry, f64)> = None;
        for e in &self.entries {
            let s = unigram_f1(&q, &e.query_tokens);
            if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
                best = Some((e, s));
            }
        }
        let snippets = best
            .map(|(e, _)| {
                vec![Snippet { text: e.knowledge.clone(), source_id: format!("{}#{}", e.episode_id, e.turn_index) }]
            })
            .unwrap_or_default();
        Ok(KnowledgeResult { snippets, latency_ms: start.elapsed().as_secs_f64() * 1e3 })
    }
}

/// A retriever that always fails; used to exercise degradation paths.
#[derive(Debug, Clone, Default)]
pub struct FailingRetriever;

impl Retriever for FailingRetriever {
    fn search(&self, query: &str, limit: usize) -> Result<KnowledgeResult, RetrievalError> {
        check_request(query, limit)?;
        Err(RetrievalError::Unavailable("retriever disabled".into()))
    }
}

pub const SEARCH_KEY_ENV: &str = "UNIRQR_SEARCH_KEY";

/// HTTP backend settings. Selectors are dotted paths with an optional `$.`
/// root, e.g. `$.data.results`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// URL template containing `{query}` and optionally `{limit}`.
    pub endpoint: String,
    pub results_selector: String,
    pub text_selector: String,
    pub source_selector: String,
    pub timeout_ms: u64,
    pub retries: u32,
    /// Header carrying the key read from `UNIRQR_SEARCH_KEY`, if set.
    pub auth_header: String,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            results_selector: "$.results".into(),
            text_selector: "text".into(),
            source_selector: "url".into(),
            timeout_ms: 3000,
            retries: 1,
            auth_header: "Authorization".into(),
        }
    }
}

pub struct HttpRetriever {
    cfg: HttpConfig,
    agent: ureq::Agent,
    key: Option<String>,
}

impl HttpRetriever {
    pub fn new(cfg: HttpConfig) -> Result<Self, RetrievalError> {
        Self::with_key(cfg, std::env::var(SEARCH_KEY_ENV).ok())
    }

    pub fn with_key(cfg: HttpConfig, key: Option<String>) -> Result<Self, RetrievalError> {
        if !cfg.endpoint.contains("{query}") {
            return Err(RetrievalError::Contract("endpoint template lacks {query}".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(Self { cfg, agent, key })
    }

    fn url(&self, query: &str, limit: usize) -> String {
        let q: String = url::form_urlencoded::byte_serialize(query.as_bytes()).collect();
        self.cfg.endpoint.replace("{query}", &q).replace("{limit}", &limit.to_string())
    }

    fn fetch(&self, url: &str) -> Result<serde_json::Value, RetrievalError> {
        let mut req = self.agent.get(url);
        if let Some(k) = &self.key {
            let value = if self.cfg.auth_header.eq_ignore_ascii_case("authorization") { format!("Bearer {k}") } else { k.clone() };
            req = req.header(self.cfg.auth_header.as_str(), value);
        }
        let mut resp = req.call().map_err(|e| RetrievalError::Unavailable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(RetrievalError::Unavailable(format!("HTTP {status}")));
        }
        resp.body_mut().read_json().map_err(|e| RetrievalError::Unavailable(format!("bad response body: {e}")))
    }
}

pub fn select<'a>(value: &'a serde_json::Value, selector: &str) -> Option<&'a serde_json::Value> {
    let path = selector.strip_prefix("$").unwrap_or(selector).trim_start_matches('.');
    if path.is_empty() {
        return Some(value);
    }
    path.split('.').try_fold(value, |v, key| match v {
        serde_json::Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get(i)),
        _ => v.get(key),
    })
}

fn as_text(v: Option<&serde_json::Value>) -> Option<String> {
    match v? {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Null => None,
        other => Some(other.to_string()),
    }
}

/// Maps a search response body to snippets, skipping entries without text.
pub fn map_results(body: &serde_json::Value, cfg: &HttpConfig, limit: usize) -> Result<Vec<Snippet>, RetrievalError> {
    let items = select(body, &cfg.results_selector)
        .and_then(|v| v.as_array())
        .ok_or_else(|| RetrievalError::Unavailable(format!("no array at {}", cfg.results_selector)))?;
    Ok(items
        .iter()
        .enumerate()
        .filter_map(|(i, item)| {
            let text = as_text(select(item, &cfg.text_selector)).filter(|t| !t.trim().is_empty())?;
            let source_id = as_text(select(item, &cfg.source_selector)).unwrap_or_else(|| i.to_string());
            Some(Snippet { text, source_id })
        })
        .take(limit)
        .collect())
}

impl Retriever for HttpRetriever {
    fn search(&self, query: &str, limit: usize) -> Result<KnowledgeResult, RetrievalError> {
        check_request(query, limit)?;
        let start = Instant::now();
        let url = self.url(query.trim(), limit);
        let mut attempt = 0;
        let body = loop {
            match self.fetch(&url) {
                Ok(b) => break b,
                Err(e) if attempt >= self.cfg.retries => return Err(e),
                Err(_) => attempt += 1,
            }
        };
        let snippets = map_results(&body, &self.cfg, limit)?;
        Ok(KnowledgeResult { snippets, latency_ms: start.elapsed().as_secs_f64() * 1e3 })
    }
}

/// Joins snippet texts with single spaces, keeping at most `budget_tokens`
/// whitespace tokens.
pub fn compose_knowledge(result: &KnowledgeResult, budget_tokens: usize) -> String {
    result
        .snippets
        .iter()
        .flat_map(|s| s.text.split_whitespace())
        .take(budget_tokens)
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{DialogueTurn, TurnAnnotation};
    use std::io::{BufRead, BufReader, Write};
    use std::net::TcpListener;

    fn ep(id: &str, query: &str, knowledge: &str) -> Episode {
        Episode {
            id: id.into(),
            turns: vec![DialogueTurn::user("q"), DialogueTurn::bot("a")],
            annotations: vec![TurnAnnotation {
                turn_index: 1,
                needs_retrieval: true,
                gold_query: Some(query.into()),
                gold_knowledge: Some(knowledge.into()),
                gold_response: "a".into(),
            }],
        }
    }

    fn texts(r: &KnowledgeResult) -> Vec<&str> {
        r.snippets.iter().map(|s| s.text.as_str()).collect()
    }

    #[test]
    fn mock_exact_match() {
        let m = MockRetriever::from_episodes(&[ep("e1", "weather beijing", "K1")]);
        let r = m.search("weather beijing", 3).unwrap();
        assert_eq!(texts(&r), vec!["K1"]);
        assert_eq!(r.snippets[0].source_id, "e1#1");
    }

    #[test]
    fn mock_zero_overlap_is_empty() {
        let m = MockRetriever::from_episodes(&[ep("e1", "weather beijing", "K1")]);
        assert!(m.search("zzz unseen terms", 3).unwrap().snippets.is_empty());
    }

    #[test]
    fn mock_ties_prefer_smaller_id() {
        let m = MockRetriever::from_episodes(&[ep("b", "weather paris", "KB"), ep("a", "weather rome", "KA")]);
        assert_eq!(texts(&m.search("weather", 1).unwrap()), vec!["KA"]);
        assert_eq!(texts(&m.search("weather paris", 1).unwrap()), vec!["KB"]);
    }

    #[test]
    fn contract_violations() {
        let m = MockRetriever::default();
        assert!(matches!(m.search("  ", 1), Err(RetrievalError::Contract(_))));
        assert!(matches!(m.search("x", 0), Err(RetrievalError::Contract(_))));
    }

    #[test]
    fn compose_examples() {
        let r = |xs: &[&str]| KnowledgeResult {
            snippets: xs.iter().map(|t| Snippet { text: t.to_string(), source_id: String::new() }).collect(),
            latency_ms: 0.0,
        };
        assert_eq!(compose_knowledge(&r(&["a b", "c"]), 10), "a b c");
        assert_eq!(compose_knowledge(&r(&["a b c d"]), 2), "a b");
        assert_eq!(compose_knowledge(&r(&[]), 5), "");
        assert_eq!(compose_knowledge(&r(&["a"]), 0), "");
    }

    #[test]
    fn selectors() {
        let v: serde_json::Value = serde_json::json!({"data": {"items": [{"t": "x"}, {"t": 3}]}});
        assert_eq!(select(&v, "$.data.items.1.t"), Some(&serde_json::json!(3)));
        assert_eq!(select(&v, "$"), Some(&v));
        assert_eq!(select(&v, "nope"), None);
    }

    /// Serves `responses` in order, one per connection, recording request heads.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut heads = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                        break;
                    }
                    head.push_str(&line);
                }
                heads.push(head);
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            heads
        });
        (format!("http://{addr}"), handle)
    }

    #[test]
    fn http_maps_results_and_truncates() {
        let body = r#"{"results":[{"text":"first fact","url":"u1"},{"text":""},{"text":"second","url":"u2"},{"text":"third"}]}"#;
        let (base, h) = serve(vec![(200, body.into())]);
        let cfg = HttpConfig { endpoint: format!("{base}/search?q={{query}}&n={{limit}}"), ..HttpConfig::default() };
        let r = HttpRetriever::with_key(cfg, Some("sekret".into())).unwrap().search("weather in paris", 2).unwrap();
        assert_eq!(texts(&r), vec!["first fact", "second"]);
        assert_eq!(r.snippets[1].source_id, "u2");
        let heads = h.join().unwrap();
        assert!(heads[0].starts_with("GET /search?q=weather+in+paris&n=2 "), "{}", heads[0]);
        assert!(heads[0].to_ascii_lowercase().contains("authorization: bearer sekret"));
    }

    #[test]
    fn http_retries_once_then_fails() {
        let (base, h) = serve(vec![(500, "{}".into()), (200, r#"{"results":[{"text":"ok"}]}"#.into())]);
        let cfg = HttpConfig { endpoint: format!("{base}/?q={{query}}"), ..HttpConfig::default() };
        let r = HttpRetriever::with_key(cfg, None).unwrap().search("x", 1).unwrap();
        assert_eq!(texts(&r), vec!["ok"]);
        h.join().unwrap();

        let (base, h) = serve(vec![(503, "{}".into()), (502, "{}".into())]);
        let cfg = HttpConfig { endpoint: format!("{base}/?q={{query}}"), ..HttpConfig::default() };
        let err = HttpRetriever::with_key(cfg, None).unwrap().search("x", 1).unwrap_err();
        assert!(matches!(err, RetrievalError::Unavailable(_)));
        h.join().unwrap();
    }

    #[test]
    fn http_unreachable_is_unavailable() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let cfg = HttpConfig { endpoint: format!("http://127.0.0.1:{port}/?q={{query}}"), timeout_ms: 500, ..HttpConfig::default() };
        assert!(matches!(HttpRetriever::with_key(cfg, None).unwrap().search("x", 1), Err(RetrievalError::Unavailable(_))));
    }

    #[test]
    fn template_without_query_rejected() {
        let cfg = HttpConfig { endpoint: "http://x/".into(), ..HttpConfig::default() };
        assert!(HttpRetriever::with_key(cfg, None).is_err());
    }
}
