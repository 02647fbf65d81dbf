//! Token vocabulary and the shared token/slot encoder.
//!
//! The encoder embeds tokens and mixes each position with its neighbours
//! inside a fixed window: `h_j = x_j + tanh(b + W [x_{j-r} .. x_{j+r}])`.
//! Slot names and dialog contexts go through the same parameter blocks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::codec::{self, FileKind};
use crate::corpus::DialogExample;
use crate::error::{Error, Result};
use crate::nn::{axpy, matvec, matvec_t_acc, outer_acc, tanh, Block, ParamStore};
use crate::rng::Rng;
use crate::schema::Schema;
use crate::text::tokenize;

pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";

/// Closed token vocabulary. Ids 0 and 1 are `[UNK]` and `[MASK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    pub const UNK_ID: u32 = 0;
    pub const MASK_ID: u32 = 1;

    /// Builds a vocabulary from explicit tokens (specials are prepended).
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut sorted: Vec<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_string())
            .filter(|t| t != UNK && t != MASK)
            .collect();
        sorted.sort();
        sorted.dedup();
        let mut all = vec![UNK.to_string(), MASK.to_string()];
        all.extend(sorted);
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens: all, index }
    }

    /// Every token of every context plus slot-name words and values.
    pub fn build<'a, I>(examples: I, schema: &Schema) -> Self
    where
        I: IntoIterator<Item = &'a DialogExample>,
    {
        let mut tokens: Vec<String> = Vec::new();
        for ex in examples {
            for turn in ex.context() {
                tokens.extend(turn.tokens().cloned());
            }
        }
        for slot in schema.slots() {
            for w in slot.name_words.iter().chain(&slot.value_set) {
                tokens.extend(tokenize(w));
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn ids<'a, I: IntoIterator<Item = &'a String>>(&self, tokens: I) -> Vec<u32> {
        tokens.into_iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EncoderConfig {
    /// Hidden width `d_h`.
    pub dim: usize,
    /// Neighbours mixed on each side.
    pub radius: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { dim: 32, radius: 2 }
    }
}

/// Block handles of the encoder inside a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoder {
    pub embedding: Block,
    pub mix_w: Block,
    pub mix_b: Block,
    pub dim: usize,
    pub radius: usize,
    pub vocab_size: usize,
}

/// Intermediate values of one encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub ids: Vec<u32>,
    pub x: Vec<f64>,
    pub mix: Vec<f64>,
    /// Output states, row-major `len x dim`.
    pub states: Vec<f64>,
}

impl EncoderTrace {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Encoder {
    pub const EMBEDDING: &'static str = "encoder.embedding";
    pub const MIX_W: &'static str = "encoder.mix_w";
    pub const MIX_B: &'static str = "encoder.mix_b";

    pub fn register(store: &mut ParamStore, vocab_size: usize, config: EncoderConfig) -> Self {
        let d = config.dim;
        let window = 2 * config.radius + 1;
        Self {
            embedding: store.add(Self::EMBEDDING, vocab_size, d),
            mix_w: store.add(Self::MIX_W, d, window * d),
            mix_b: store.add(Self::MIX_B, 1, d),
            dim: d,
            radius: config.radius,
            vocab_size,
        }
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            radius: self.radius,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        store.init_uniform(self.embedding, 0.5, rng);
        let fan_in = ((2 * self.radius + 1) * self.dim) as f64;
        store.init_uniform(self.mix_w, 0.5 / libm::sqrt(fan_in), rng);
    }

    fn window(&self, x: &[f64], j: usize, len: usize, out: &mut [f64]) {
        let d = self.dim;
        out.fill(0.0);
        for o in 0..=2 * self.radius {
            let pos = j as isize + o as isize - self.radius as isize;
            if pos >= 0 && (pos as usize) < len {
                let p = pos as usize;
                out[o * d..(o + 1) * d].copy_from_slice(&x[p * d..(p + 1) * d]);
            }
        }
    }

    pub fn forward(&self, store: &ParamStore, ids: &[u32]) -> EncoderTrace {
        let d = self.dim;
        let len = ids.len();
        let emb = store.get(self.embedding);
        let mut x = vec![0.0; len * d];
        for (j, &id) in ids.iter().enumerate() {
            let id = (id as usize).min(self.vocab_size - 1);
            x[j * d..(j + 1) * d].copy_from_slice(&emb[id * d..(id + 1) * d]);
        }
        let w = store.get(self.mix_w);
        let b = store.get(self.mix_b);
        let wd = (2 * self.radius + 1) * d;
        let mut win = vec![0.0; wd];
        let mut mix = vec![0.0; len * d];
        for j in 0..len {
            self.window(&x, j, len, &mut win);
            let row = &mut mix[j * d..(j + 1) * d];
            matvec(w, wd, &win, row);
            for (m, bi) in row.iter_mut().zip(b) {
                *m = tanh(*m + bi);
            }
        }
        let states = x.iter().zip(&mix).map(|(a, m)| a + m).collect();
        EncoderTrace {
            ids: ids.to_vec(),
            x,
            mix,
            states,
        }
    }

    /// Accumulates parameter gradients given the gradient of the output states.
    pub fn backward(&self, store: &ParamStore, trace: &EncoderTrace, dstates: &[f64], grads: &mut [f64]) {
        let d = self.dim;
        let len = trace.len();
        let wd = (2 * self.radius + 1) * d;
        let w = store.get(self.mix_w);
        let mut dx = dstates.to_vec();
        let mut win = vec![0.0; wd];
        let mut dpre = vec![0.0; d];
        for j in 0..len {
            let mix = &trace.mix[j * d..(j + 1) * d];
            let dh = &dstates[j * d..(j + 1) * d];
            let mut any = false;
            for k in 0..d {
                dpre[k] = dh[k] * (1.0 - mix[k] * mix[k]);
                any |= dpre[k] != 0.0;
            }
            if !any {
                continue;
            }
            self.window(&trace.x, j, len, &mut win);
            outer_acc(store.grad_mut(grads, self.mix_w), &dpre, &win);
            axpy(1.0, &dpre, store.grad_mut(grads, self.mix_b));
            let mut dwin = vec![0.0; wd];
            matvec_t_acc(w, wd, &dpre, &mut dwin);
            for o in 0..=2 * self.radius {
                let pos = j as isize + o as isize - self.radius as isize;
                if pos >= 0 && (pos as usize) < len {
                    let p = pos as usize;
                    axpy(1.0, &dwin[o * d..(o + 1) * d], &mut dx[p * d..(p + 1) * d]);
                }
            }
        }
        let gemb = store.grad_mut(grads, self.embedding);
        for (j, &id) in trace.ids.iter().enumerate() {
            let id = (id as usize).min(self.vocab_size - 1);
            axpy(1.0, &dx[j * d..(j + 1) * d], &mut gemb[id * d..(id + 1) * d]);
        }
    }

    /// Slot embedding: first half of the first state joined with the second
    /// half of the last state.
    pub fn pool_first_last(&self, trace: &EncoderTrace) -> Vec<f64> {
        let d = self.dim;
        let half = d / 2;
        let last = trace.len() - 1;
        let mut out = Vec::with_capacity(d);
        out.extend_from_slice(&trace.states[..half]);
        out.extend_from_slice(&trace.states[last * d + half..(last + 1) * d]);
        out
    }

    /// Routes the gradient of a pooled embedding back onto the states.
    pub fn pool_first_last_backward(&self, len: usize, dpooled: &[f64], dstates: &mut [f64]) {
        let d = self.dim;
        let half = d / 2;
        let last = len - 1;
        axpy(1.0, &dpooled[..half], &mut dstates[..half]);
        axpy(1.0, &dpooled[half..], &mut dstates[last * d + half..(last + 1) * d]);
    }
}

/// Encoder weights plus the vocabulary they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub vocab: Vocab,
    pub config: EncoderConfig,
    /// Holds exactly the three encoder blocks.
    pub store: ParamStore,
}

impl EncoderParams {
    /// Extracts the encoder blocks of a larger store.
    pub fn extract(vocab: &Vocab, encoder: &Encoder, store: &ParamStore) -> Self {
        let mut own = ParamStore::new();
        let enc = Encoder::register(&mut own, encoder.vocab_size, encoder.config());
        own.get_mut(enc.embedding).copy_from_slice(store.get(encoder.embedding));
        own.get_mut(enc.mix_w).copy_from_slice(store.get(encoder.mix_w));
        own.get_mut(enc.mix_b).copy_from_slice(store.get(encoder.mix_b));
        Self {
            vocab: vocab.clone(),
            config: encoder.config(),
            store: own,
        }
    }

    /// Writes these weights into `encoder`'s blocks of `store`.
    pub fn apply(&self, vocab: &Vocab, encoder: &Encoder, store: &mut ParamStore) -> Result<()> {
        if &self.vocab != vocab {
            return Err(Error::Shape(String::from(
                "encoder parameters were trained with a different vocabulary",
            )));
        }
        if self.config != encoder.config() {
            return Err(Error::Shape(format!(
                "encoder shape {:?} does not match {:?}",
                self.config,
                encoder.config()
            )));
        }
        for block in [encoder.embedding, encoder.mix_w, encoder.mix_b] {
            store.copy_block_from(block, &self.store)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        codec::encode(FileKind::Encoder, self.config, &self.vocab, &[], &self.store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file = codec::decode(bytes)?;
        if file.kind != FileKind::Encoder {
            return Err(Error::Data(String::from("file holds a full model, not encoder parameters")));
        }
        let mut store = ParamStore::new();
        Encoder::register(&mut store, file.vocab.len(), file.config);
        codec::load_into(&file.store, &mut store)?;
        Ok(Self {
            vocab: file.vocab,
            config: file.config,
            store,
        })
    }
}
