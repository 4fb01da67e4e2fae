//! Pre-LN transformer encoder-decoder with sinusoidal positions and tied
//! input/output embeddings.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Matrix;
use crate::types::Side;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    TinyReference,
    ExternalPretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    /// Standard deviation for the continuous prompt tables.
    pub prompt_init_std: f64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            kind: BackboneKind::TinyReference,
            layers: 2,
            model_dim: 32,
            heads: 4,
            ffn_dim: 64,
            max_positions: 128,
            prompt_init_std: 0.02,
        }
    }
}

impl BackboneSpec {
    /// Two layers, width 16; used for gradient checks.
    pub fn micro() -> Self {
        Self { layers: 2, model_dim: 16, heads: 2, ffn_dim: 32, max_positions: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 || self.ffn_dim == 0 || self.max_positions < 2 {
            return Err("backbone dimensions must be positive (max_positions >= 2)".into());
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if !(self.prompt_init_std.is_finite() && self.prompt_init_std >= 0.0) {
            return Err("prompt_init_std must be finite and nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
}

/// Flat, ordered parameter set. Order and names are fixed by [`Layout`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    pub entries: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> &Matrix {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.entries[id].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn count_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.data.len()).sum()
    }

    fn add(&mut self, name: String, value: Matrix) -> usize {
        self.entries.push(NamedTensor { name, value });
        self.entries.len() - 1
    }
}

#[derive(Debug, Clone)]
struct Attn {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone)]
struct Ffn {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attn,
    ln_cross: Norm,
    cross_attn: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
pub struct Layout {
    embed: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    prompt_query: Option<usize>,
    prompt_response: Option<usize>,
}

pub const PROMPT_QUERY: &str = "prompt.query";
pub const PROMPT_RESPONSE: &str = "prompt.response";

struct Init<'a, R: Rng> {
    store: ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        self.store.add(name, Matrix::from_vec(rows, cols, data))
    }

    fn fill(&mut self, name: String, rows: usize, cols: usize, v: f64) -> usize {
        self.store.add(name, Matrix::filled(rows, cols, v))
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm { gain: self.fill(format!("{name}.gain"), 1, d, 1.0), bias: self.fill(format!("{name}.bias"), 1, d, 0.0) }
    }

    fn attn(&mut self, name: &str, d: usize, out_std: f64) -> Attn {
        let std = 1.0 / (d as f64).sqrt();
        Attn {
            wq: self.normal(format!("{name}.wq"), d, d, std),
            bq: self.fill(format!("{name}.bq"), 1, d, 0.0),
            wk: self.normal(format!("{name}.wk"), d, d, std),
            bk: self.fill(format!("{name}.bk"), 1, d, 0.0),
            wv: self.normal(format!("{name}.wv"), d, d, std),
            bv: self.fill(format!("{name}.bv"), 1, d, 0.0),
            wo: self.normal(format!("{name}.wo"), d, d, out_std),
            bo: self.fill(format!("{name}.bo"), 1, d, 0.0),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize, out_scale: f64) -> Ffn {
        Ffn {
            w1: self.normal(format!("{name}.w1"), d, f, 1.0 / (d as f64).sqrt()),
            b1: self.fill(format!("{name}.b1"), 1, f, 0.0),
            w2: self.normal(format!("{name}.w2"), f, d, out_scale / (f as f64).sqrt()),
            b2: self.fill(format!("{name}.b2"), 1, d, 0.0),
        }
    }
}

impl Layout {
    /// Allocates and initialises every parameter. `prompt_len` adds the two
    /// continuous prompt tables.
    pub fn init<R: Rng>(spec: &BackboneSpec, vocab: usize, prompt_len: Option<usize>, rng: &mut R) -> (Layout, ParamStore) {
        let d = spec.model_dim;
        let residual_scale = 1.0 / ((2 * spec.layers) as f64).sqrt();
        let out_std = residual_scale / (d as f64).sqrt();
        let mut init = Init { store: ParamStore::default(), rng };

        let embed = init.normal("embed".into(), vocab, d, 1.0 / (d as f64).sqrt());
        let encoder = (0..spec.layers)
            .map(|l| EncoderLayer {
                ln_attn: init.norm(&format!("enc.{l}.ln_attn"), d),
                attn: init.attn(&format!("enc.{l}.attn"), d, out_std),
                ln_ffn: init.norm(&format!("enc.{l}.ln_ffn"), d),
                ffn: init.ffn(&format!("enc.{l}.ffn"), d, spec.ffn_dim, residual_scale),
            })
            .collect();
        let enc_norm = init.norm("enc.ln_out", d);
        let decoder = (0..spec.layers)
            .map(|l| DecoderLayer {
                ln_self: init.norm(&format!("dec.{l}.ln_self"), d),
                self_attn: init.attn(&format!("dec.{l}.self_attn"), d, out_std),
                ln_cross: init.norm(&format!("dec.{l}.ln_cross"), d),
                cross_attn: init.attn(&format!("dec.{l}.cross_attn"), d, out_std),
                ln_ffn: init.norm(&format!("dec.{l}.ln_ffn"), d),
                ffn: init.ffn(&format!("dec.{l}.ffn"), d, spec.ffn_dim, residual_scale),
            })
            .collect();
        let dec_norm = init.norm("dec.ln_out", d);
        let (prompt_query, prompt_response) = match prompt_len {
            Some(n) => (
                Some(init.normal(PROMPT_QUERY.into(), n, d, spec.prompt_init_std)),
                Some(init.normal(PROMPT_RESPONSE.into(), n, d, spec.prompt_init_std)),
            ),
            None => (None, None),
        };
        let layout = Layout { embed, encoder, enc_norm, decoder, dec_norm, prompt_query, prompt_response };
        (layout, init.store)
    }

    pub fn prompt_table(&self, side: Side) -> Option<usize> {
        match side {
            Side::Query => self.prompt_query,
            Side::Response => self.prompt_response,
        }
    }
}

/// Forward passes over a parameter store.
pub struct Net<'a> {
    pub spec: &'a BackboneSpec,
    pub layout: &'a Layout,
    pub params: &'a ParamStore,
    pub positions: &'a Matrix,
}

impl Net<'_> {
    fn p(&self, t: &mut Tape, id: usize) -> Var {
        t.param(id, self.params.get(id))
    }

    fn norm(&self, t: &mut Tape, x: Var, n: &Norm) -> Var {
        let g = self.p(t, n.gain);
        let b = self.p(t, n.bias);
        t.layer_norm(x, g, b)
    }

    fn attention(&self, t: &mut Tape, x: Var, memory: Var, a: &Attn, causal: bool) -> Var {
        let (wq, bq, wk, bk, wv, bv, wo, bo) =
            (self.p(t, a.wq), self.p(t, a.bq), self.p(t, a.wk), self.p(t, a.bk), self.p(t, a.wv), self.p(t, a.bv), self.p(t, a.wo), self.p(t, a.bo));
        let q = t.linear(x, wq, bq);
        let k = t.linear(memory, wk, bk);
        let v = t.linear(memory, wv, bv);
        let h = t.attention(q, k, v, self.spec.heads, causal);
        t.linear(h, wo, bo)
    }

    fn ffn(&self, t: &mut Tape, x: Var, f: &Ffn) -> Var {
        let (w1, b1, w2, b2) = (self.p(t, f.w1), self.p(t, f.b1), self.p(t, f.w2), self.p(t, f.b2));
        let h = t.linear(x, w1, b1);
        let h = t.gelu(h);
        t.linear(h, w2, b2)
    }

    fn embed(&self, t: &mut Tape, ids: &[usize], prefix: Option<usize>) -> Var {
        let table = self.p(t, self.layout.embed);
        let tok = t.gather(table, ids);
        let tok = t.scale(tok, (self.spec.model_dim as f64).sqrt());
        let x = match prefix {
            Some(pid) => {
                let pv = self.p(t, pid);
                t.concat_rows(pv, tok)
            }
            None => tok,
        };
        let n = t.value(x).rows;
        t.shift(x, &self.positions.slice_rows(0, n))
    }

    /// Encoder output `[n × d]` for token ids, optionally preceded by a
    /// continuous prompt table.
    pub fn encode(&self, t: &mut Tape, ids: &[usize], prefix_side: Option<Side>) -> Var {
        let prefix = prefix_side.and_then(|s| self.layout.prompt_table(s));
        let mut x = self.embed(t, ids, prefix);
        for layer in &self.layout.encoder {
            let h = self.norm(t, x, &layer.ln_attn);
            let h = self.attention(t, h, h, &layer.attn, false);
            x = t.add(x, h);
            let h = self.norm(t, x, &layer.ln_ffn);
            let h = self.ffn(t, h, &layer.ffn);
            x = t.add(x, h);
        }
        self.norm(t, x, &self.layout.enc_norm)
    }

    /// Logits `[len(dec_ids) × vocab]` for teacher-forced decoder inputs.
    pub fn decode(&self, t: &mut Tape, memory: Var, dec_ids: &[usize]) -> Var {
        let mut y = self.embed(t, dec_ids, None);
        for layer in &self.layout.decoder {
            let h = self.norm(t, y, &layer.ln_self);
            let h = self.attention(t, h, h, &layer.self_attn, true);
            y = t.add(y, h);
            let h = self.norm(t, y, &layer.ln_cross);
            let h = self.attention(t, h, memory, &layer.cross_attn, false);
            y = t.add(y, h);
            let h = self.norm(t, y, &layer.ln_ffn);
            let h = self.ffn(t, h, &layer.ffn);
            y = t.add(y, h);
        }
        let y = self.norm(t, y, &self.layout.dec_norm);
        let table = self.p(t, self.layout.embed);
        t.matmul_bt(y, table)
    }
}
