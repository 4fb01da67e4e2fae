//! Sentence-level text metrics: unigram F1, BLEU-1/2, Distinct-n and
//! knowledge F1.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

/// Whitespace tokens; any token containing CJK characters is split into
/// single characters, so unsegmented Chinese text is scored per character.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for w in text.split_whitespace() {
        if w.chars().any(is_cjk) {
            out.extend(w.chars().map(String::from));
        } else {
            out.push(w.to_string());
        }
    }
    out
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF | 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x3000..=0x303F | 0xFF00..=0xFFEF | 0xAC00..=0xD7AF)
}

fn counts<T: Eq + Hash>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for i in items {
        *m.entry(i).or_insert(0) += 1;
    }
    m
}

fn ngrams<T>(tokens: &[T], n: usize) -> impl Iterator<Item = &[T]> {
    tokens.windows(n.max(1)).filter(move |_| n > 0)
}

/// Harmonic mean of multiset-overlap precision and recall. Both empty → 1;
/// exactly one empty → 0.
pub fn unigram_f1<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> f64 {
    match (hyp.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let rc = counts(reference.iter());
    let overlap: usize = counts(hyp.iter()).iter().map(|(t, c)| (*c).min(rc.get(t).copied().unwrap_or(0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Sentence BLEU over orders `1..=n` with uniform weights: clipped n-gram
/// precisions (add-one smoothing for orders above one), geometric mean, and a
/// brevity penalty when the hypothesis is shorter than the reference.
pub fn bleu_n<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> f64 {
    if hyp.is_empty() || n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let rc = counts(ngrams(reference, k));
        let hc = counts(ngrams(hyp, k));
        let matched: usize = hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum();
        let total = hyp.len().saturating_sub(k - 1);
        let p = if k == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let bp = if hyp.len() < reference.len() { (1.0 - reference.len() as f64 / hyp.len() as f64).exp() } else { 1.0 };
    bp * (log_sum / n as f64).exp()
}

/// Unique n-grams over total n-grams across a corpus of hypotheses.
pub fn distinct_n<T: Eq + Hash>(hyps: &[Vec<T>], n: usize) -> f64 {
    let mut unique: HashSet<&[T]> = HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        for g in ngrams(h, n) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// Unigram F1 between a response and the knowledge it was given.
pub fn knowledge_f1(response: &str, knowledge: &str) -> f64 {
    unigram_f1(&tokenize(response), &tokenize(knowledge))
}

pub fn f1_text(hyp: &str, reference: &str) -> f64 {
    unigram_f1(&tokenize(hyp), &tokenize(reference))
}

pub fn bleu_text(hyp: &str, reference: &str, n: usize) -> f64 {
    bleu_n(&tokenize(hyp), &tokenize(reference), n)
}
