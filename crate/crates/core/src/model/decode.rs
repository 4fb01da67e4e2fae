//! Autoregressive search over any next-token scorer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::log_softmax;
use super::tokenizer::EOS_ID;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingConfig {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    /// Token ids forbidden at the first decoding step.
    #[serde(skip)]
    pub suppress_first: Vec<usize>,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Greedy, max_new_tokens: 32, suppress_first: Vec::new() }
    }
}

impl DecodingConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { max_new_tokens, ..Self::default() }
    }

    pub fn beam(width: usize, max_new_tokens: usize) -> Self {
        Self { strategy: Strategy::Beam { width }, max_new_tokens, suppress_first: Vec::new() }
    }
}

/// Produces log-probabilities over the vocabulary given the tokens generated
/// so far (excluding the start marker).
pub trait NextToken {
    fn log_probs(&self, prefix: &[usize]) -> Vec<f64>;
}

impl<F: Fn(&[usize]) -> Vec<f64>> NextToken for F {
    fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        self(prefix)
    }
}

fn scored(scorer: &impl NextToken, prefix: &[usize], cfg: &DecodingConfig) -> Vec<f64> {
    let mut lp = scorer.log_probs(prefix);
    if prefix.is_empty() {
        for &b in &cfg.suppress_first {
            if let Some(v) = lp.get_mut(b) {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    lp
}

/// Index of the maximum; the lowest index wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Generated ids, without the end marker.
pub fn search(scorer: &impl NextToken, cfg: &DecodingConfig) -> Vec<usize> {
    match &cfg.strategy {
        Strategy::Greedy => greedy(scorer, cfg),
        Strategy::Beam { width } => beam(scorer, cfg, (*width).max(1)),
        Strategy::Sample { temperature, seed } => sample(scorer, cfg, *temperature, *seed),
    }
}

fn greedy(scorer: &impl NextToken, cfg: &DecodingConfig) -> Vec<usize> {
    let mut out = Vec::new();
    while out.len() < cfg.max_new_tokens {
        let next = argmax(&scored(scorer, &out, cfg));
        if next == EOS_ID {
            break;
        }
        out.push(next);
    }
    out
}

fn sample(scorer: &impl NextToken, cfg: &DecodingConfig, temperature: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    while out.len() < cfg.max_new_tokens {
        let lp = scored(scorer, &out, cfg);
        let probs: Vec<f64> = log_softmax(&lp.iter().map(|v| v / t).collect::<Vec<_>>()).iter().map(|v| v.exp()).collect();
        let mut u: f64 = rng.random();
        let mut next = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            if u < *p {
                next = i;
                break;
            }
            u -= p;
        }
        if next == EOS_ID {
            break;
        }
        out.push(next);
    }
    out
}

fn beam(scorer: &impl NextToken, cfg: &DecodingConfig, width: usize) -> Vec<usize> {
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut done: Vec<(Vec<usize>, f64)> = Vec::new();

    for _ in 0..cfg.max_new_tokens {
        let mut cands: Vec<(Vec<usize>, f64, usize)> = Vec::new();
        for (tokens, score) in &live {
            let lp = scored(scorer, tokens, cfg);
            let mut order: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(width) {
                cands.push((tokens.clone(), score + lp[tok], tok));
            }
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1));
        live.clear();
        for (mut tokens, score, tok) in cands.into_iter().take(width) {
            if tok == EOS_ID {
                done.push((tokens, score));
            } else {
                tokens.push(tok);
                live.push((tokens, score));
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    done.into_iter()
        .fold(None::<(Vec<usize>, f64)>, |best, c| match best {
            Some(b) if b.1 >= c.1 => Some(b),
            _ => Some(c),
        })
        .map(|(t, _)| t)
        .unwrap_or_default()
}
