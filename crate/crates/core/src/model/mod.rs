//! The unified encoder-decoder: tokenizer, backbone parameters, continuous
//! prompt tables, teacher-forced loss and generation.

pub mod checkpoint;
pub mod decode;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CheckpointError, TrainingState, CHECKPOINT_FORMAT};
pub use decode::{DecodingConfig, NextToken, Strategy};
pub use tensor::Matrix;
pub use tokenizer::Tokenizer;
pub use transformer::{BackboneKind, BackboneSpec, ParamStore};

use crate::prompts::{PromptPrefix, PromptScheme, PromptVariety};
use crate::types::{Side, SourceText, TaskInstance, TaskKind, SEP};
use tape::Tape;
use tensor::{log_softmax, sinusoidal_positions};
use tokenizer::{BOS_ID, EOS_ID};
use transformer::{Layout, Net};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("input too long: {needed} positions needed, {max} available")]
    InputTooLong { needed: usize, max: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid backbone: {0}")]
    Backbone(String),
    #[error("prompt scheme mismatch: {0}")]
    Scheme(String),
}

/// Model-ready source: token ids plus an optional continuous prefix that is
/// prepended to the encoder's input embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSource {
    pub ids: Vec<usize>,
    pub prefix: Option<(Side, usize)>,
}

impl EncodedSource {
    /// Length of the encoder input sequence, virtual slots included.
    pub fn embedded_len(&self) -> usize {
        self.ids.len() + self.prefix.map_or(0, |(_, n)| n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInstance {
    pub kind: TaskKind,
    pub source: EncodedSource,
    /// Target ids followed by the end marker.
    pub labels: Vec<usize>,
}

impl EncodedInstance {
    /// Decoder inputs: start marker followed by the target ids.
    pub fn decoder_inputs(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.labels.len());
        v.push(BOS_ID);
        v.extend_from_slice(&self.labels[..self.labels.len() - 1]);
        v
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: BackboneSpec,
    pub scheme: PromptScheme,
    pub tokenizer: Tokenizer,
    pub params: ParamStore,
    layout: Layout,
    positions: Matrix,
}

impl Model {
    pub fn new(spec: BackboneSpec, scheme: PromptScheme, tokenizer: Tokenizer, seed: u64) -> Result<Self, ModelError> {
        spec.validate().map_err(ModelError::Backbone)?;
        if spec.kind == BackboneKind::ExternalPretrained {
            return Err(ModelError::Backbone(
                "external_pretrained backbones are loaded through an adapter, not initialised here".into(),
            ));
        }
        scheme.validate().map_err(|e| ModelError::Scheme(e.to_string()))?;
        let prompt_len = (scheme.variety == PromptVariety::Continuous).then_some(scheme.continuous_length);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params) = Layout::init(&spec, tokenizer.len(), prompt_len, &mut rng);
        let positions = sinusoidal_positions(spec.max_positions, spec.model_dim);
        Ok(Self { spec, scheme, tokenizer, params, layout, positions })
    }

    /// Replaces the parameters, checking names and shapes against the layout.
    pub fn with_params(mut self, params: ParamStore) -> Result<Self, ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::Contract(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (mine, theirs) in self.params.entries.iter().zip(&params.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(ModelError::Contract(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
        }
        self.params = params;
        Ok(self)
    }

    pub fn prompt_table_id(&self, side: Side) -> Option<usize> {
        self.layout.prompt_table(side)
    }

    fn net(&self) -> Net<'_> {
        Net { spec: &self.spec, layout: &self.layout, params: &self.params, positions: &self.positions }
    }

    /// Converts a rendered source into ids, truncating the oldest context
    /// tokens when the input exceeds `max_positions`. The most recent turn,
    /// the prompt, the separator and the knowledge are never truncated.
    pub fn encode_input(&self, source: &SourceText) -> Result<EncodedSource, ModelError> {
        let tok = &self.tokenizer;
        let (mut head, mut tail, prefix) = (Vec::new(), Vec::new(), None);
        let prefix = match &source.prefix {
            PromptPrefix::Token(t) => {
                let id = tok.id(t).ok_or_else(|| ModelError::Scheme(format!("{t} not in vocabulary")))?;
                head.push(id);
                prefix
            }
            PromptPrefix::Template { before, after } => {
                head = tok.encode(before);
                tail = tok.encode(after);
                prefix
            }
            PromptPrefix::Virtual { side, length } => {
                let rows = self.layout.prompt_table(*side).map(|id| self.params.get(id).rows);
                if rows != Some(*length) {
                    return Err(ModelError::Scheme(format!(
                        "source wants {length} virtual slots, model has {rows:?}"
                    )));
                }
                Some((*side, *length))
            }
        };
        if let Some(k) = &source.knowledge {
            tail.push(tok.id(SEP).expect("reserved"));
            tail.extend(tok.encode(k));
        }

        let mut context = tok.encode(&source.context());
        let floor = source.context_turns.last().map_or(0, |t| tok.encode(t).len());
        let fixed = head.len() + tail.len() + prefix.map_or(0, |(_, n)| n);
        let max = self.spec.max_positions;
        if fixed + context.len() > max {
            let budget = max.saturating_sub(fixed);
            if budget < floor || fixed > max {
                return Err(ModelError::InputTooLong { needed: fixed + floor, max });
            }
            context.drain(..context.len() - budget);
        }

        let mut ids = head;
        ids.extend(context);
        ids.extend(tail);
        Ok(EncodedSource { ids, prefix })
    }

    pub fn encode_instance(&self, inst: &TaskInstance) -> Result<EncodedInstance, ModelError> {
        let source = self.encode_input(&inst.source)?;
        let mut labels = self.tokenizer.encode(&inst.target);
        if labels.is_empty() {
            return Err(ModelError::Contract(format!(
                "empty target for {}:{} ({})",
                inst.episode_id, inst.turn_index, inst.kind
            )));
        }
        labels.push(EOS_ID);
        if labels.len() > self.spec.max_positions {
            return Err(ModelError::InputTooLong { needed: labels.len(), max: self.spec.max_positions });
        }
        Ok(EncodedInstance { kind: inst.kind, source, labels })
    }

    fn build_loss(&self, tape: &mut Tape, inst: &EncodedInstance) -> tape::Var {
        let net = self.net();
        let memory = net.encode(tape, &inst.source.ids, inst.source.prefix.map(|(s, _)| s));
        let logits = net.decode(tape, memory, &inst.decoder_inputs());
        tape.cross_entropy(logits, &inst.labels)
    }

    /// Token-mean cross-entropy of one instance under teacher forcing.
    pub fn instance_loss(&self, inst: &EncodedInstance) -> f64 {
        let mut tape = Tape::new(self.params.len());
        let root = self.build_loss(&mut tape, inst);
        tape.value(root).data[0]
    }

    /// Per-instance losses for a batch.
    pub fn forward_loss(&self, batch: &[EncodedInstance]) -> Vec<f64> {
        batch.iter().map(|i| self.instance_loss(i)).collect()
    }

    /// Loss and `weight · ∂loss/∂θ` for one instance.
    pub fn loss_and_grads(&self, inst: &EncodedInstance, weight: f64) -> (f64, Vec<(usize, Matrix)>) {
        let mut tape = Tape::new(self.params.len());
        let root = self.build_loss(&mut tape, inst);
        let loss = tape.value(root).data[0];
        (loss, tape.backward(root, weight))
    }

    /// Encoder output for a source, reused across decoding steps.
    pub fn encode_memory(&self, source: &EncodedSource) -> Matrix {
        let mut tape = Tape::new(self.params.len());
        let out = self.net().encode(&mut tape, &source.ids, source.prefix.map(|(s, _)| s));
        tape.value(out).clone()
    }

    /// Next-token log-probabilities after `prefix` given encoder output.
    pub fn next_log_probs(&self, memory: &Matrix, prefix: &[usize]) -> Vec<f64> {
        let mut tape = Tape::new(self.params.len());
        let mem = tape.constant(memory.clone());
        let mut dec = Vec::with_capacity(prefix.len() + 1);
        dec.push(BOS_ID);
        dec.extend_from_slice(prefix);
        let logits = self.net().decode(&mut tape, mem, &dec);
        let lv = tape.value(logits);
        log_softmax(lv.row(lv.rows - 1))
    }

    /// Generated token ids (end marker excluded). The decoder length is capped
    /// at `max_positions`.
    pub fn generate(&self, source: &EncodedSource, cfg: &DecodingConfig) -> Vec<usize> {
        let memory = self.encode_memory(source);
        let capped = DecodingConfig {
            max_new_tokens: cfg.max_new_tokens.min(self.spec.max_positions - 1),
            ..cfg.clone()
        };
        let scorer = |prefix: &[usize]| self.next_log_probs(&memory, prefix);
        decode::search(&scorer, &capped)
    }

    pub fn generate_text(&self, source: &SourceText, cfg: &DecodingConfig) -> Result<String, ModelError> {
        let enc = self.encode_input(source)?;
        Ok(self.tokenizer.decode(&self.generate(&enc, cfg)))
    }
}
