//! Small templated corpus with greetings (no retrieval) and attribute
//! questions (retrieval), used for smoke training and fixtures.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::{DialogueTurn, Episode, TurnAnnotation};

const ENTITIES: [&str; 10] = ["paris", "rome", "tokyo", "cairo", "lima", "oslo", "delhi", "seoul", "berlin", "madrid"];
const ATTRIBUTES: [&str; 5] = ["weather", "population", "mayor", "currency", "river"];
const VALUES: [&str; 12] =
    ["sunny", "rainy", "cold", "large", "small", "old", "young", "blue", "green", "north", "south", "famous"];
const QUESTIONS: [&str; 3] = ["what is the {a} of {e}", "tell me the {a} in {e}", "do you know the {a} of {e}"];
const GREETINGS: [(&str, &str); 8] = [
    ("hi", "hello friend"),
    ("hello", "hi there"),
    ("good morning", "good morning to you"),
    ("hey there", "hey nice to see you"),
    ("how are you", "i am fine thanks"),
    ("thanks a lot", "you are welcome"),
    ("bye now", "goodbye and take care"),
    ("nice to meet you", "nice to meet you too"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub episodes: usize,
    /// Fraction of episodes whose annotated turn needs retrieval.
    pub retrieval_fraction: f64,
    /// Probability of an unannotated greeting exchange before the annotated turn.
    pub preamble_probability: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { episodes: 200, retrieval_fraction: 0.5, preamble_probability: 0.3, seed: 0 }
    }
}

/// Fixed attribute value for an entity, independent of the seed.
pub fn fact_value(entity: &str, attribute: &str) -> &'static str {
    let e = ENTITIES.iter().position(|x| *x == entity).unwrap_or(0);
    let a = ATTRIBUTES.iter().position(|x| *x == attribute).unwrap_or(0);
    VALUES[(e * 7 + a * 5) % VALUES.len()]
}

fn retrieval_turn(rng: &mut ChaCha8Rng) -> (String, TurnAnnotation) {
    let e = *ENTITIES.choose(rng).expect("non-empty");
    let a = *ATTRIBUTES.choose(rng).expect("non-empty");
    let v = fact_value(e, a);
    let question = QUESTIONS.choose(rng).expect("non-empty").replace("{a}", a).replace("{e}", e);
    let annotation = TurnAnnotation {
        turn_index: 0,
        needs_retrieval: true,
        gold_query: Some(format!("{e} {a}")),
        gold_knowledge: Some(format!("{e} {a} is {v}")),
        gold_response: format!("the {a} of {e} is {v}"),
    };
    (question, annotation)
}

fn greeting_turn(rng: &mut ChaCha8Rng) -> (String, TurnAnnotation) {
    let (u, b) = *GREETINGS.choose(rng).expect("non-empty");
    let annotation =
        TurnAnnotation { turn_index: 0, needs_retrieval: false, gold_query: None, gold_knowledge: None, gold_response: b.into() };
    (u.to_string(), annotation)
}

/// Exactly `round(episodes · retrieval_fraction)` episodes need retrieval,
/// interleaved by a seeded shuffle.
pub fn generate(cfg: &SyntheticConfig) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_retrieval = (cfg.episodes as f64 * cfg.retrieval_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut flags: Vec<bool> = (0..cfg.episodes).map(|i| i < n_retrieval).collect();
    rand::seq::SliceRandom::shuffle(flags.as_mut_slice(), &mut rng);

    flags
        .into_iter()
        .enumerate()
        .map(|(i, retrieval)| {
            let mut turns = Vec::new();
            if rng.random_bool(cfg.preamble_probability.clamp(0.0, 1.0)) {
                let (u, b) = *GREETINGS.choose(&mut rng).expect("non-empty");
                turns.push(DialogueTurn::user(u));
                turns.push(DialogueTurn::bot(b));
            }
            let (user, mut annotation) = if retrieval { retrieval_turn(&mut rng) } else { greeting_turn(&mut rng) };
            turns.push(DialogueTurn::user(user));
            annotation.turn_index = turns.len();
            turns.push(DialogueTurn::bot(annotation.gold_response.clone()));
            Episode { id: format!("syn-{i:04}"), turns, annotations: vec![annotation] }
        })
        .collect()
}
