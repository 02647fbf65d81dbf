//! Native reference tracker.
//!
//! The shared encoder reads the current turn (system then user tokens).
//! For each slot, the pooled slot-name encoding attends over the turn
//! states. The slot encoding joined with its attention summary and the
//! mean state feeds a gate over none, dontcare and value and, for closed
//! slots, a scorer over the value set. Free-form slots point at
//! current-turn tokens instead.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::codec::{self, FileKind};
use crate::corpus::{DialogExample, SlotValues};
use crate::encoder::{Encoder, EncoderConfig, EncoderParams, EncoderTrace, Vocab};
use crate::error::{Error, Result};
use crate::model::{EpochStats, ModelOracle};
use crate::nn::{
    argmax, attend, attend_backward, axpy, bce_with_logit, cross_entropy, dot, matvec, matvec_t_acc, outer_acc,
    sigmoid, Block, ParamStore,
};
use crate::rng;
use crate::schema::{Schema, DONTCARE};
use crate::text::{detokenize, find_subsequence, tokenize};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ReferenceConfig {
    pub encoder: EncoderConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Gradients with a larger global norm are rescaled to this norm.
    pub clip_norm: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            learning_rate: 0.1,
            batch_size: 8,
            clip_norm: 5.0,
        }
    }
}

impl ReferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.encoder.dim;
        if d < 2 || d % 2 != 0 {
            return Err(Error::Config(format!("encoder width must be even and at least 2, got {d}")));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || !(self.clip_norm > 0.0) {
            return Err(Error::Config(String::from(
                "learning rate, batch size and clip norm must be positive",
            )));
        }
        Ok(())
    }
}

const GATE_NONE: usize = 0;
const GATE_DONTCARE: usize = 1;
const GATE_VALUE: usize = 2;

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: Block,
    b: Block,
    rows: usize,
    cols: usize,
}

impl Linear {
    fn register(store: &mut ParamStore, name: &str, rows: usize, cols: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), rows, cols),
            b: store.add(format!("{name}.b"), 1, rows),
            rows,
            cols,
        }
    }

    fn forward(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut y = store.get(self.b).to_vec();
        let mut wx = vec![0.0; self.rows];
        matvec(store.get(self.w), self.cols, x, &mut wx);
        axpy(1.0, &wx, &mut y);
        y
    }

    fn backward(&self, store: &ParamStore, x: &[f64], dy: &[f64], grads: &mut [f64], dx: &mut [f64]) {
        outer_acc(store.grad_mut(grads, self.w), dy, x);
        axpy(1.0, dy, store.grad_mut(grads, self.b));
        matvec_t_acc(store.get(self.w), self.cols, dy, dx);
    }
}

#[derive(Debug, Clone, Copy)]
struct SlotHeads {
    gate: Linear,
    /// Closed slots only.
    values: Option<Linear>,
    /// Free-form slots only: per-token score `w·h_j + b`.
    pointer: Option<Linear>,
}

/// Supervision of one slot in one example.
#[derive(Debug, Clone, PartialEq)]
struct SlotTarget {
    gate: usize,
    value: Option<usize>,
    span: Option<(usize, usize)>,
}

/// Per-slot cross-entropy/BCE tracker implementing [`ModelOracle`].
#[derive(Debug, Clone)]
pub struct ReferenceModel {
    schema: Arc<Schema>,
    vocab: Vocab,
    config: ReferenceConfig,
    store: ParamStore,
    encoder: Encoder,
    heads: Vec<SlotHeads>,
    slot_ids: Vec<Vec<u32>>,
    /// Slot embeddings under the current parameters.
    slot_cache: Vec<Vec<f64>>,
    /// Joined token form of known values mapped back to their original text.
    surface: BTreeMap<String, String>,
    pretrained: Option<Arc<EncoderParams>>,
    seed: u64,
}

const TAG_INIT: u64 = 0x4ef;

/// Compact join used when a decoded span has no known surface form:
/// no spaces around characters that tokenize on their own.
pub fn compact_join(tokens: &[String]) -> String {
    let mut out = String::new();
    let mut prev_glue = true;
    for t in tokens {
        let glue = t.chars().count() == 1 && !t.chars().all(char::is_alphanumeric);
        if !out.is_empty() && !glue && !prev_glue {
            out.push(' ');
        }
        out.push_str(t);
        prev_glue = glue;
    }
    out
}

impl ReferenceModel {
    pub fn new(schema: Arc<Schema>, vocab: Vocab, config: ReferenceConfig, seed: u64) -> Result<Self> {
        Self::build(schema, vocab, config, seed, None)
    }

    /// A model whose encoder starts from pretrained parameters.
    pub fn with_encoder(
        schema: Arc<Schema>,
        config: ReferenceConfig,
        pretrained: Arc<EncoderParams>,
        seed: u64,
    ) -> Result<Self> {
        let vocab = pretrained.vocab.clone();
        Self::build(schema, vocab, config, seed, Some(pretrained))
    }

    fn build(
        schema: Arc<Schema>,
        vocab: Vocab,
        config: ReferenceConfig,
        seed: u64,
        pretrained: Option<Arc<EncoderParams>>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.dim;
        let mut store = ParamStore::new();
        let encoder = Encoder::register(&mut store, vocab.len(), config.encoder);
        let feat = 3 * d;
        let heads: Vec<SlotHeads> = schema
            .slots()
            .iter()
            .map(|s| SlotHeads {
                gate: Linear::register(&mut store, &format!("ref.{}.gate", s.name), 3, feat),
                values: (!s.free_form).then(|| Linear::register(&mut store, &format!("ref.{}.values", s.name), s.value_set.len(), feat)),
                pointer: s.free_form.then(|| Linear::register(&mut store, &format!("ref.{}.pointer", s.name), 1, d)),
            })
            .collect();
        let mut r = rng::rng(seed, &[TAG_INIT]);
        encoder.init(&mut store, &mut r);
        let scale = 1.0 / libm::sqrt(feat as f64);
        for h in &heads {
            store.init_uniform(h.gate.w, scale, &mut r);
            if let Some(v) = h.values {
                store.init_uniform(v.w, scale, &mut r);
            }
            if let Some(p) = h.pointer {
                store.init_uniform(p.w, scale, &mut r);
            }
        }
        if let Some(p) = &pretrained {
            p.apply(&vocab, &encoder, &mut store)?;
        }
        let slot_ids = schema
            .slots()
            .iter()
            .map(|s| {
                let words: Vec<String> = s.name_words.iter().flat_map(|w| tokenize(w)).collect();
                vocab.ids(&words)
            })
            .collect();
        let mut surface = BTreeMap::new();
        for s in schema.slots() {
            for v in &s.value_set {
                surface.insert(detokenize(&tokenize(v)), v.clone());
            }
        }
        let mut model = Self {
            schema,
            vocab,
            config,
            store,
            encoder,
            heads,
            slot_ids,
            slot_cache: Vec::new(),
            surface,
            pretrained,
            seed,
        };
        model.refresh();
        Ok(model)
    }

    fn refresh(&mut self) {
        self.slot_cache = self
            .slot_ids
            .iter()
            .map(|ids| self.encoder.pool_first_last(&self.encoder.forward(&self.store, ids)))
            .collect();
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &ReferenceConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder_params(&self) -> EncoderParams {
        EncoderParams::extract(&self.vocab, &self.encoder, &self.store)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Replaces all parameters at once.
    pub fn set_parameters(&mut self, data: Vec<f64>) -> Result<()> {
        self.store.set_data(data)?;
        self.refresh();
        Ok(())
    }

    fn turn_tokens(example: &DialogExample) -> Vec<String> {
        example.current().tokens().cloned().collect()
    }

    fn targets(&self, example: &DialogExample, tokens: &[String]) -> Vec<SlotTarget> {
        self.schema
            .slots()
            .iter()
            .map(|spec| match example.turn_state().get(&spec.name) {
                None => SlotTarget { gate: GATE_NONE, value: None, span: None },
                Some(v) if v == DONTCARE => SlotTarget { gate: GATE_DONTCARE, value: None, span: None },
                Some(v) => {
                    let value = spec.value_set.iter().position(|x| x == v);
                    let needle = tokenize(v);
                    let span = if spec.free_form {
                        find_subsequence(tokens, &needle).map(|s| (s, s + needle.len()))
                    } else {
                        None
                    };
                    SlotTarget { gate: GATE_VALUE, value, span }
                }
            })
            .collect()
    }

    /// Loss of one example; with `grads`, also accumulates parameter
    /// gradients (scaled by `scale`) and slot-embedding gradients.
    fn example_pass(
        &self,
        example: &DialogExample,
        slot_emb: &[Vec<f64>],
        scale: f64,
        mut grads: Option<(&mut [f64], &mut [Vec<f64>])>,
    ) -> f64 {
        let store = &self.store;
        let d = self.config.encoder.dim;
        let tokens = Self::turn_tokens(example);
        let ids = self.vocab.ids(&tokens);
        let trace = self.encoder.forward(store, &ids);
        let len = trace.len();
        let states = &trace.states;
        let mut mean = vec![0.0; d];
        for h in states.chunks_exact(d) {
            axpy(1.0 / len as f64, h, &mut mean);
        }
        let targets = self.targets(example, &tokens);
        let mut d_states = vec![0.0; if grads.is_some() { len * d } else { 0 }];
        let mut d_mean = vec![0.0; d];
        let mut loss = 0.0;

        for (s, (heads, target)) in self.heads.iter().zip(&targets).enumerate() {
            let emb = &slot_emb[s];
            let att = attend(emb, states, d).expect("turns are non-empty");
            let mut f = Vec::with_capacity(3 * d);
            f.extend_from_slice(emb);
            f.extend_from_slice(&att.context);
            f.extend_from_slice(&mean);
            let mut d_f = vec![0.0; 3 * d];

            let gate_logits = heads.gate.forward(store, &f);
            let (l, probs) = cross_entropy(&gate_logits, target.gate);
            loss += l;
            if let Some((g, _)) = grads.as_mut() {
                let mut dy: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                dy[target.gate] -= scale;
                heads.gate.backward(store, &f, &dy, g, &mut d_f);
            }

            if let (Some(lin), Some(v)) = (heads.values, target.value) {
                let logits = lin.forward(store, &f);
                let (l, probs) = cross_entropy(&logits, v);
                loss += l;
                if let Some((g, _)) = grads.as_mut() {
                    let mut dy: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    dy[v] -= scale;
                    lin.backward(store, &f, &dy, g, &mut d_f);
                }
            }

            if let (Some(ptr), Some((start, end))) = (heads.pointer, target.span) {
                let w = store.get(ptr.w);
                let b = store.get(ptr.b)[0];
                let mut row_loss = 0.0;
                let mut dw = vec![0.0; d];
                let mut db = 0.0;
                for j in 0..len {
                    let h = &states[j * d..(j + 1) * d];
                    let y = if (start..end).contains(&j) { 1.0 } else { 0.0 };
                    let (l, g) = bce_with_logit(dot(w, h) + b, y);
                    row_loss += l;
                    if grads.is_some() {
                        let gs = g * scale / len as f64;
                        axpy(gs, h, &mut dw);
                        db += gs;
                        axpy(gs, w, &mut d_states[j * d..(j + 1) * d]);
                    }
                }
                loss += row_loss / len as f64;
                if let Some((g, _)) = grads.as_mut() {
                    axpy(1.0, &dw, store.grad_mut(g, ptr.w));
                    store.grad_mut(g, ptr.b)[0] += db;
                }
            }

            if let Some((_, d_emb)) = grads.as_mut() {
                axpy(1.0, &d_f[..d], &mut d_emb[s]);
                axpy(1.0, &d_f[2 * d..], &mut d_mean);
                attend_backward(emb, states, &att, &d_f[d..2 * d], &mut d_emb[s], &mut d_states);
            }
        }

        if let Some((g, _)) = grads {
            for ds in d_states.chunks_exact_mut(d) {
                axpy(1.0 / len as f64, &d_mean, ds);
            }
            self.encoder.backward(store, &trace, &d_states, g);
        }
        loss
    }

    fn slot_traces(&self) -> Vec<EncoderTrace> {
        self.slot_ids.iter().map(|ids| self.encoder.forward(&self.store, ids)).collect()
    }

    /// Mean loss and gradient of a batch.
    pub fn batch_gradient(&self, batch: &[&DialogExample]) -> (f64, Vec<f64>) {
        let d = self.config.encoder.dim;
        let traces = self.slot_traces();
        let emb: Vec<Vec<f64>> = traces.iter().map(|t| self.encoder.pool_first_last(t)).collect();
        let mut grads = self.store.zeros();
        let mut d_emb = vec![vec![0.0; d]; emb.len()];
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        for ex in batch {
            loss += scale * self.example_pass(ex, &emb, scale, Some((&mut grads, &mut d_emb)));
        }
        for (trace, de) in traces.iter().zip(&d_emb) {
            let mut ds = vec![0.0; trace.len() * d];
            self.encoder.pool_first_last_backward(trace.len(), de, &mut ds);
            self.encoder.backward(&self.store, trace, &ds, &mut grads);
        }
        (loss, grads)
    }

    fn decode_span(&self, tokens: &[String], probs: &[f64]) -> String {
        let best = argmax(probs);
        let (mut lo, mut hi) = (best, best + 1);
        while lo > 0 && probs[lo - 1] > 0.5 {
            lo -= 1;
        }
        while hi < probs.len() && probs[hi] > 0.5 {
            hi += 1;
        }
        let span = &tokens[lo..hi];
        self.surface
            .get(&detokenize(span))
            .cloned()
            .unwrap_or_else(|| compact_join(span))
    }

    fn learn_surface_forms(&mut self, examples: &[&DialogExample]) {
        for ex in examples {
            for v in ex.turn_state().values() {
                if v != DONTCARE {
                    self.surface.entry(detokenize(&tokenize(v))).or_insert_with(|| v.clone());
                }
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let extras: Vec<(String, String)> = self
            .surface
            .iter()
            .map(|(k, v)| (format!("surface:{k}"), v.clone()))
            .chain([(String::from("seed"), self.seed.to_string())])
            .collect();
        codec::encode(FileKind::Reference, self.config.encoder, &self.vocab, &extras, &self.store)
    }

    /// Restores a model saved by [`Self::to_bytes`]. Training settings come from `config`.
    pub fn from_bytes(schema: Arc<Schema>, config: ReferenceConfig, bytes: &[u8]) -> Result<Self> {
        let file = codec::decode(bytes)?;
        if file.kind != FileKind::Reference {
            return Err(Error::Data(String::from("file holds encoder parameters, not a model")));
        }
        let config = ReferenceConfig {
            encoder: file.config,
            ..config
        };
        let mut seed = 0;
        let mut surface = BTreeMap::new();
        for (k, v) in &file.extras {
            if let Some(form) = k.strip_prefix("surface:") {
                surface.insert(String::from(form), v.clone());
            } else if k == "seed" {
                seed = v.parse().map_err(|_| Error::Data(format!("invalid seed `{v}`")))?;
            }
        }
        let mut model = Self::new(schema, file.vocab, config, seed)?;
        codec::load_into(&file.store, &mut model.store)?;
        model.surface = surface;
        model.refresh();
        Ok(model)
    }
}

impl ModelOracle for ReferenceModel {
    fn fit_epoch(&mut self, examples: &[&DialogExample], _seed: u64) -> EpochStats {
        if examples.is_empty() {
            return EpochStats::default();
        }
        self.learn_surface_forms(examples);
        let mut step_losses = Vec::with_capacity(examples.len().div_ceil(self.config.batch_size));
        for batch in examples.chunks(self.config.batch_size) {
            let (loss, mut grads) = self.batch_gradient(batch);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                continue;
            }
            let norm = libm::sqrt(dot(&grads, &grads));
            if norm > self.config.clip_norm {
                let k = self.config.clip_norm / norm;
                grads.iter_mut().for_each(|g| *g *= k);
            }
            let backup = self.store.clone();
            self.store.sgd_step(&grads, self.config.learning_rate);
            if !self.store.all_finite() {
                self.store = backup;
                continue;
            }
            self.refresh();
            step_losses.push(loss);
        }
        let mean_loss = if step_losses.is_empty() {
            0.0
        } else {
            step_losses.iter().sum::<f64>() / step_losses.len() as f64
        };
        EpochStats { mean_loss, step_losses }
    }

    fn predict_turn(&self, example: &DialogExample) -> SlotValues {
        let store = &self.store;
        let d = self.config.encoder.dim;
        let tokens = Self::turn_tokens(example);
        let trace = self.encoder.forward(store, &self.vocab.ids(&tokens));
        let states = &trace.states;
        let len = trace.len();
        let mut mean = vec![0.0; d];
        for h in states.chunks_exact(d) {
            axpy(1.0 / len as f64, h, &mut mean);
        }
        let mut out = SlotValues::new();
        for ((spec, heads), emb) in self.schema.slots().iter().zip(&self.heads).zip(&self.slot_cache) {
            let att = attend(emb, states, d).expect("turns are non-empty");
            let mut f = Vec::with_capacity(3 * d);
            f.extend_from_slice(emb);
            f.extend_from_slice(&att.context);
            f.extend_from_slice(&mean);
            match argmax(&heads.gate.forward(store, &f)) {
                GATE_DONTCARE => {
                    out.insert(spec.name.clone(), String::from(DONTCARE));
                }
                GATE_VALUE => {
                    let value = if let Some(lin) = heads.values {
                        spec.value_set[argmax(&lin.forward(store, &f))].clone()
                    } else if let Some(ptr) = heads.pointer {
                        let w = store.get(ptr.w);
                        let b = store.get(ptr.b)[0];
                        let probs: Vec<f64> = states.chunks_exact(d).map(|h| sigmoid(dot(w, h) + b)).collect();
                        self.decode_span(&tokens, &probs)
                    } else {
                        continue;
                    };
                    out.insert(spec.name.clone(), value);
                }
                _ => {}
            }
        }
        out
    }

    fn example_loss(&self, example: &DialogExample) -> f64 {
        self.example_pass(example, &self.slot_cache, 1.0, None)
    }

    fn clone_untrained(&self, seed: u64) -> Self {
        Self::build(self.schema.clone(), self.vocab.clone(), self.config, seed, self.pretrained.clone())
            .expect("configuration was valid for the original")
    }
}
