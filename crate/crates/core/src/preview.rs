//! Schema-aware pretraining of the shared encoder.
//!
//! Two heads read the slot embedding and the context states: a span head
//! scoring the slot embedding joined with each token state, and an operation
//! head scoring it joined with its attention summary of the context. A
//! masked-token objective over natural dialogs is added with a
//! configurable weight.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::{Corpus, Dialog, DialogExample};
use crate::encoder::{Encoder, EncoderConfig, EncoderParams, EncoderTrace, Vocab};
use crate::error::{Error, Result};
use crate::nn::{
    attend, attend_backward, axpy, bce_with_logit, cross_entropy, dot, matvec, matvec_t_acc, outer_acc, sigmoid,
    softmax, tanh, Block, HeadBlocks, HeadParams, ParamStore,
};
use crate::rng;
use crate::schema::{Schema, DONTCARE};
use crate::text::{find_subsequence, tokenize};

/// Per-slot operation of a turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OpClass {
    Added,
    Deleted,
    Changed,
    NotMentioned,
    Refer,
    Dontcare,
}

impl OpClass {
    pub const ALL: [OpClass; 6] = [
        OpClass::Added,
        OpClass::Deleted,
        OpClass::Changed,
        OpClass::NotMentioned,
        OpClass::Refer,
        OpClass::Dontcare,
    ];

    /// Output index; the first four classes come first in both label sets.
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PreviewConfig {
    pub encoder: EncoderConfig,
    /// Adds the `refer` and `dontcare` operations.
    pub extended_ops: bool,
    /// Only the most recent tokens of the serialized context are kept.
    pub max_context_tokens: usize,
    pub mask_rate: f64,
    pub aux_weight: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PreviewConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            extended_ops: false,
            max_context_tokens: 256,
            mask_rate: 0.15,
            aux_weight: 0.5,
            epochs: 3,
            learning_rate: 0.1,
            batch_size: 8,
        }
    }
}

impl PreviewConfig {
    pub fn n_classes(&self) -> usize {
        if self.extended_ops {
            6
        } else {
            4
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.dim < 2 || e.dim % 2 != 0 {
            return Err(Error::Config(format!("encoder width must be even and at least 2, got {}", e.dim)));
        }
        if self.max_context_tokens == 0 || self.batch_size == 0 {
            return Err(Error::Config(String::from("context limit and batch size must be positive")));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask rate {} is outside [0, 1]", self.mask_rate)));
        }
        if !(self.aux_weight >= 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config(String::from("aux weight must be >= 0 and learning rate > 0")));
        }
        Ok(())
    }
}

/// All context turns, system before user, keeping the last `max_tokens`.
pub fn serialize_context(example: &DialogExample, max_tokens: usize) -> Vec<String> {
    let all: Vec<String> = example.context().iter().flat_map(|t| t.tokens().cloned()).collect();
    let skip = all.len().saturating_sub(max_tokens);
    all[skip..].to_vec()
}

/// Supervision of one turn example, one row per schema slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnTargets {
    pub context: Vec<String>,
    /// `spans[s][j] == 1` marks token `j` as part of slot `s`'s value.
    pub spans: Vec<Vec<u8>>,
    pub ops: Vec<OpClass>,
    /// Slots whose value string does not occur in the context.
    pub unlocatable: Vec<String>,
}

fn operation(example: &DialogExample, slot: &str, extended: bool, current_tokens: &[String]) -> OpClass {
    if example.current().cleared.contains(slot) {
        return OpClass::Deleted;
    }
    let Some(value) = example.turn_state().get(slot) else {
        return OpClass::NotMentioned;
    };
    let prev = example.prev_discourse_state();
    if extended {
        if value == DONTCARE {
            return OpClass::Dontcare;
        }
        let in_turn = find_subsequence(current_tokens, &tokenize(value)).is_some();
        let held_elsewhere = prev.iter().any(|(s, v)| s != slot && v == value);
        if !in_turn && held_elsewhere {
            return OpClass::Refer;
        }
    }
    match prev.get(slot) {
        None => OpClass::Added,
        Some(old) if old != value => OpClass::Changed,
        Some(_) => OpClass::NotMentioned,
    }
}

/// Span rows mark the first occurrence of each turn-level value; every
/// other slot gets an all-zero row.
pub fn derive_targets(example: &DialogExample, schema: &Schema, config: &PreviewConfig) -> TurnTargets {
    let context = serialize_context(example, config.max_context_tokens);
    let current_tokens: Vec<String> = example.current().tokens().cloned().collect();
    let mut spans = Vec::with_capacity(schema.len());
    let mut ops = Vec::with_capacity(schema.len());
    let mut unlocatable = Vec::new();
    for spec in schema.slots() {
        let mut row = vec![0u8; context.len()];
        if let Some(value) = example.turn_state().get(&spec.name) {
            if value != DONTCARE {
                let needle = tokenize(value);
                match find_subsequence(&context, &needle) {
                    Some(start) => row[start..start + needle.len()].fill(1),
                    None => unlocatable.push(spec.name.clone()),
                }
            }
        }
        spans.push(row);
        ops.push(operation(example, &spec.name, config.extended_ops, &current_tokens));
    }
    TurnTargets {
        context,
        spans,
        ops,
        unlocatable,
    }
}

/// Targets of every turn of a dialog, in turn order.
pub fn derive_dialog_targets(dialog: &Dialog, schema: &Schema, config: &PreviewConfig) -> Result<Vec<TurnTargets>> {
    Ok(dialog
        .examples(schema)?
        .iter()
        .map(|ex| derive_targets(ex, schema, config))
        .collect())
}

/// Slot embedding and context states produced by the shared encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub slot_embedding: Vec<f64>,
    /// Row-major, one row of the encoder width per context token.
    pub context_states: Vec<f64>,
    pub width: usize,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.context_states.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.context_states.is_empty()
    }
}

fn check_widths(slot_emb: &[f64], states: &[f64], head: &HeadParams<'_>) -> Result<usize> {
    head.check()?;
    let d = slot_emb.len();
    if d == 0 || head.input != 2 * d || states.len() % d != 0 {
        return Err(Error::Shape(format!(
            "head input {} does not fit a slot embedding of width {d} and {} state entries",
            head.input,
            states.len()
        )));
    }
    Ok(d)
}

/// Probability that each context token belongs to the slot's value.
pub fn span_head(slot_emb: &[f64], states: &[f64], head: &HeadParams<'_>) -> Result<Vec<f64>> {
    let d = check_widths(slot_emb, states, head)?;
    if head.output != 1 {
        return Err(Error::Shape(format!("span head must have one output, has {}", head.output)));
    }
    let mut x = vec![0.0; 2 * d];
    x[..d].copy_from_slice(slot_emb);
    Ok(states
        .chunks_exact(d)
        .map(|h| {
            x[d..].copy_from_slice(h);
            sigmoid(head.forward(&x).1[0])
        })
        .collect())
}

/// Distribution over operation classes.
pub fn cls_head(slot_emb: &[f64], states: &[f64], head: &HeadParams<'_>) -> Result<Vec<f64>> {
    let d = check_widths(slot_emb, states, head)?;
    let att = attend(slot_emb, states, d)?;
    let mut x = Vec::with_capacity(2 * d);
    x.extend_from_slice(slot_emb);
    x.extend_from_slice(&att.context);
    Ok(softmax(&head.forward(&x).1))
}

/// `out = W[:, col..col + x.len()] x` for a row-major `W` with `cols` columns.
fn sub_matvec(w: &[f64], cols: usize, col: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(&w[r * cols + col..r * cols + col + x.len()], x);
    }
}

fn sub_matvec_t_acc(w: &[f64], cols: usize, col: usize, dy: &[f64], dx: &mut [f64]) {
    for (r, g) in dy.iter().enumerate() {
        if *g != 0.0 {
            axpy(*g, &w[r * cols + col..r * cols + col + dx.len()], dx);
        }
    }
}

fn sub_outer_acc(dw: &mut [f64], cols: usize, col: usize, dy: &[f64], x: &[f64]) {
    for (r, g) in dy.iter().enumerate() {
        if *g != 0.0 {
            axpy(*g, x, &mut dw[r * cols + col..r * cols + col + x.len()]);
        }
    }
}

/// One training example with targets resolved to vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub ids: Vec<u32>,
    pub targets: TurnTargets,
    /// Natural examples also feed the masked-token objective.
    pub natural: bool,
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub seq: f64,
    pub cls: f64,
    /// `None` when no token of a natural example was masked.
    pub aux: Option<f64>,
    pub total: f64,
}

/// Encoder plus span, operation and masked-token heads in one store.
#[derive(Debug, Clone)]
pub struct PreviewModel {
    config: PreviewConfig,
    vocab: Vocab,
    store: ParamStore,
    encoder: Encoder,
    span: HeadBlocks,
    cls: HeadBlocks,
    lm_w: Block,
    lm_b: Block,
    slot_ids: Vec<Vec<u32>>,
}

const TAG_INIT: u64 = 0x9e1;
const TAG_SHUFFLE: u64 = 0x9e2;
const TAG_MASK: u64 = 0x9e3;

impl PreviewModel {
    /// The masked-token head starts at zero, so untrained predictions are uniform.
    pub fn new(vocab: Vocab, schema: &Schema, config: PreviewConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.dim;
        let v = vocab.len();
        let mut store = ParamStore::new();
        let encoder = Encoder::register(&mut store, v, config.encoder);
        let span = HeadBlocks::register(&mut store, "preview.span", 2 * d, 2 * d, 1);
        let cls = HeadBlocks::register(&mut store, "preview.cls", 2 * d, 2 * d, config.n_classes());
        let lm_w = store.add("preview.lm_w", v, d);
        let lm_b = store.add("preview.lm_b", 1, v);
        let mut r = rng::rng(seed, &[TAG_INIT]);
        encoder.init(&mut store, &mut r);
        span.init(&mut store, &mut r);
        cls.init(&mut store, &mut r);
        let slot_ids = schema
            .slots()
            .iter()
            .map(|s| {
                let words: Vec<String> = s.name_words.iter().flat_map(|w| tokenize(w)).collect();
                vocab.ids(&words)
            })
            .collect();
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            span,
            cls,
            lm_w,
            lm_b,
            slot_ids,
        })
    }

    pub fn config(&self) -> &PreviewConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn span_params(&self) -> HeadParams<'_> {
        self.span.view(&self.store)
    }

    pub fn cls_params(&self) -> HeadParams<'_> {
        self.cls.view(&self.store)
    }

    pub fn encoder_params(&self) -> EncoderParams {
        EncoderParams::extract(&self.vocab, &self.encoder, &self.store)
    }

    pub fn slot_embedding(&self, slot: usize) -> Vec<f64> {
        let trace = self.encoder.forward(&self.store, &self.slot_ids[slot]);
        self.encoder.pool_first_last(&trace)
    }

    pub fn encode(&self, slot: usize, context: &[String]) -> EncoderOutput {
        EncoderOutput {
            slot_embedding: self.slot_embedding(slot),
            context_states: self.encoder.forward(&self.store, &self.vocab.ids(context)).states,
            width: self.config.encoder.dim,
        }
    }

    pub fn prepare(&self, example: &DialogExample, schema: &Schema) -> PreparedExample {
        let targets = derive_targets(example, schema, &self.config);
        PreparedExample {
            ids: self.vocab.ids(&targets.context),
            targets,
            natural: !example.is_synthetic(),
        }
    }

    fn check_batch(&self, batch: &[PreparedExample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Data(String::from("empty pretraining batch")));
        }
        let n = self.slot_ids.len();
        for ex in batch {
            let t = &ex.targets;
            let aligned = !ex.ids.is_empty()
                && t.spans.len() == n
                && t.ops.len() == n
                && t.spans.iter().all(|r| r.len() == ex.ids.len())
                && t.ops.iter().all(|o| o.index() < self.config.n_classes());
            if !aligned {
                return Err(Error::Shape(String::from("targets are not aligned with the context or schema")));
            }
        }
        Ok(())
    }

    /// Mean span cross-entropy and mean operation cross-entropy.
    pub fn preview_losses(&self, batch: &[PreparedExample]) -> Result<(f64, f64)> {
        self.check_batch(batch)?;
        Ok(self.seq_cls_pass(batch, None))
    }

    /// Masked-token loss over natural examples; `None` when nothing was masked.
    pub fn aux_lm_loss(&self, batch: &[PreparedExample], mask_seed: u64) -> Result<Option<f64>> {
        if batch.is_empty() {
            return Err(Error::Data(String::from("empty auxiliary batch")));
        }
        Ok(self.aux_pass(batch, mask_seed, 0.0, None))
    }

    /// Total objective and, if `grads` is given, its gradient added into it.
    pub fn objective(&self, batch: &[PreparedExample], mask_seed: u64, grads: Option<&mut [f64]>) -> Result<Objective> {
        self.check_batch(batch)?;
        let w = self.config.aux_weight;
        let (seq, cls, aux) = match grads {
            Some(g) => {
                let (seq, cls) = self.seq_cls_pass(batch, Some(&mut *g));
                let aux = if w > 0.0 { self.aux_pass(batch, mask_seed, w, Some(g)) } else { None };
                (seq, cls, aux)
            }
            None => {
                let (seq, cls) = self.seq_cls_pass(batch, None);
                let aux = if w > 0.0 { self.aux_pass(batch, mask_seed, w, None) } else { None };
                (seq, cls, aux)
            }
        };
        Ok(Objective {
            seq,
            cls,
            aux,
            total: seq + cls + w * aux.unwrap_or(0.0),
        })
    }

    fn seq_cls_pass(&self, batch: &[PreparedExample], mut grads: Option<&mut [f64]>) -> (f64, f64) {
        let store = &self.store;
        let d = self.config.encoder.dim;
        let n_slots = self.slot_ids.len();
        let span = self.span.view(store);
        let (width, hid) = (span.input, span.hidden);
        let cls = self.cls.view(store);
        let n_classes = self.config.n_classes();

        let slot_traces: Vec<EncoderTrace> = self.slot_ids.iter().map(|ids| self.encoder.forward(store, ids)).collect();
        let slot_emb: Vec<Vec<f64>> = slot_traces.iter().map(|t| self.encoder.pool_first_last(t)).collect();
        // The span head's first layer splits into a slot part and a token part.
        let slot_pre: Vec<Vec<f64>> = slot_emb
            .iter()
            .map(|e| {
                let mut a = vec![0.0; hid];
                sub_matvec(span.w1, width, 0, e, &mut a);
                a
            })
            .collect();

        let training = grads.is_some();
        let mut d_emb = vec![vec![0.0; d]; if training { n_slots } else { 0 }];
        let mut d_slot_pre = vec![vec![0.0; hid]; if training { n_slots } else { 0 }];
        let (mut seq, mut cls_loss) = (0.0, 0.0);
        let b = batch.len() as f64;
        let mut hidden = vec![0.0; hid];
        let mut dhidden = vec![0.0; hid];

        for ex in batch {
            let trace = self.encoder.forward(store, &ex.ids);
            let len = trace.len();
            let states = &trace.states;
            let mut tok_pre = vec![0.0; len * hid];
            for j in 0..len {
                sub_matvec(span.w1, width, d, &states[j * d..(j + 1) * d], &mut tok_pre[j * hid..(j + 1) * hid]);
            }
            let mut d_states = vec![0.0; if training { len * d } else { 0 }];
            let mut d_tok_pre = vec![0.0; if training { len * hid } else { 0 }];
            let span_scale = 1.0 / (b * n_slots as f64 * len as f64);
            let cls_scale = 1.0 / (b * n_slots as f64);

            for s in 0..n_slots {
                let row = &ex.targets.spans[s];
                for j in 0..len {
                    let tp = &tok_pre[j * hid..(j + 1) * hid];
                    for k in 0..hid {
                        hidden[k] = tanh(slot_pre[s][k] + tp[k] + span.b1[k]);
                    }
                    let logit = dot(span.w2, &hidden) + span.b2[0];
                    let (l, g) = bce_with_logit(logit, f64::from(row[j]));
                    seq += l * span_scale;
                    if let Some(gr) = grads.as_deref_mut() {
                        let dl = g * span_scale;
                        axpy(dl, &hidden, store.grad_mut(gr, self.span.w2));
                        store.grad_mut(gr, self.span.b2)[0] += dl;
                        for k in 0..hid {
                            dhidden[k] = dl * span.w2[k] * (1.0 - hidden[k] * hidden[k]);
                        }
                        axpy(1.0, &dhidden, &mut d_slot_pre[s]);
                        axpy(1.0, &dhidden, &mut d_tok_pre[j * hid..(j + 1) * hid]);
                    }
                }

                let emb = &slot_emb[s];
                let att = attend(emb, states, d).expect("non-empty context of encoder width");
                let mut x = Vec::with_capacity(2 * d);
                x.extend_from_slice(emb);
                x.extend_from_slice(&att.context);
                let (h, logits) = cls.forward(&x);
                let label = ex.targets.ops[s].index();
                let (l, probs) = cross_entropy(&logits, label);
                cls_loss += l * cls_scale;
                if let Some(gr) = grads.as_deref_mut() {
                    let mut dlogits: Vec<f64> = probs.iter().map(|p| p * cls_scale).collect();
                    dlogits[label] -= cls_scale;
                    debug_assert_eq!(dlogits.len(), n_classes);
                    let mut dx = vec![0.0; 2 * d];
                    self.cls.backward(store, &x, &h, &dlogits, gr, &mut dx);
                    axpy(1.0, &dx[..d], &mut d_emb[s]);
                    attend_backward(emb, states, &att, &dx[d..], &mut d_emb[s], &mut d_states);
                }
            }

            if let Some(gr) = grads.as_deref_mut() {
                let gw1 = store.grad_mut(gr, self.span.w1);
                for j in 0..len {
                    let dt = &d_tok_pre[j * hid..(j + 1) * hid];
                    sub_outer_acc(gw1, width, d, dt, &states[j * d..(j + 1) * d]);
                    sub_matvec_t_acc(span.w1, width, d, dt, &mut d_states[j * d..(j + 1) * d]);
                }
                let gb1 = store.grad_mut(gr, self.span.b1);
                for dt in d_tok_pre.chunks_exact(hid) {
                    axpy(1.0, dt, gb1);
                }
                self.encoder.backward(store, &trace, &d_states, gr);
            }
        }

        if let Some(gr) = grads {
            for s in 0..n_slots {
                sub_outer_acc(store.grad_mut(gr, self.span.w1), width, 0, &d_slot_pre[s], &slot_emb[s]);
                sub_matvec_t_acc(span.w1, width, 0, &d_slot_pre[s], &mut d_emb[s]);
                let trace = &slot_traces[s];
                let mut ds = vec![0.0; trace.len() * d];
                self.encoder.pool_first_last_backward(trace.len(), &d_emb[s], &mut ds);
                self.encoder.backward(store, trace, &ds, gr);
            }
        }
        (seq, cls_loss)
    }

    fn aux_pass(&self, batch: &[PreparedExample], mask_seed: u64, weight: f64, mut grads: Option<&mut [f64]>) -> Option<f64> {
        let store = &self.store;
        let d = self.config.encoder.dim;
        let v = self.vocab.len();
        let mut r = rng::rng(mask_seed, &[TAG_MASK]);
        let masks: Vec<Vec<usize>> = batch
            .iter()
            .map(|ex| {
                if !ex.natural {
                    return Vec::new();
                }
                (0..ex.ids.len()).filter(|_| r.gen::<f64>() < self.config.mask_rate).collect()
            })
            .collect();
        let total: usize = masks.iter().map(Vec::len).sum();
        if total == 0 {
            return None;
        }
        let scale = 1.0 / total as f64;
        let lm_w = store.get(self.lm_w);
        let lm_b = store.get(self.lm_b);
        let mut loss = 0.0;
        let mut logits = vec![0.0; v];
        for (ex, masked) in batch.iter().zip(&masks) {
            if masked.is_empty() {
                continue;
            }
            let mut ids = ex.ids.clone();
            for &j in masked {
                ids[j] = Vocab::MASK_ID;
            }
            let trace = self.encoder.forward(store, &ids);
            let mut d_states = vec![0.0; if grads.is_some() { trace.len() * d } else { 0 }];
            for &j in masked {
                let h = &trace.states[j * d..(j + 1) * d];
                matvec(lm_w, d, h, &mut logits);
                axpy(1.0, lm_b, &mut logits);
                let target = ex.ids[j] as usize;
                let (l, probs) = cross_entropy(&logits, target);
                loss += l * scale;
                if let Some(gr) = grads.as_deref_mut() {
                    let g = weight * scale;
                    let mut dlogits: Vec<f64> = probs.iter().map(|p| p * g).collect();
                    dlogits[target] -= g;
                    outer_acc(store.grad_mut(gr, self.lm_w), &dlogits, h);
                    axpy(1.0, &dlogits, store.grad_mut(gr, self.lm_b));
                    matvec_t_acc(lm_w, d, &dlogits, &mut d_states[j * d..(j + 1) * d]);
                }
            }
            if let Some(gr) = grads.as_deref_mut() {
                self.encoder.backward(store, &trace, &d_states, gr);
            }
        }
        Some(loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub seq: f64,
    pub cls: f64,
    /// Mean over batches that masked at least one token.
    pub aux: Option<f64>,
    pub total: f64,
    pub skipped_aux_batches: usize,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub epochs: Vec<PretrainEpoch>,
    pub examples: usize,
    /// Turn-level values whose text was not found in their context.
    pub unlocatable: usize,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: PreviewModel,
    pub report: PretrainReport,
}

impl Pretrained {
    pub fn encoder_params(&self) -> EncoderParams {
        self.model.encoder_params()
    }
}

/// Minibatch SGD on the combined objective. Steps with a non-finite
/// gradient are skipped and counted.
pub fn pretrain(corpus: &Corpus, vocab: &Vocab, config: &PreviewConfig, seed: u64) -> Result<Pretrained> {
    if corpus.is_empty() {
        return Err(Error::Data(String::from("cannot pretrain on an empty corpus")));
    }
    let mut model = PreviewModel::new(vocab.clone(), corpus.schema(), *config, seed)?;
    let prepared: Vec<PreparedExample> = corpus.iter().map(|ex| model.prepare(ex, corpus.schema())).collect();
    let unlocatable = prepared.iter().map(|p| p.targets.unlocatable.len()).sum();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut grads = model.store.zeros();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::rng(seed, &[TAG_SHUFFLE, epoch as u64]));
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let (mut batches, mut aux_batches, mut skipped_steps) = (0usize, 0usize, 0usize);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<PreparedExample> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            grads.fill(0.0);
            let obj = model.objective(&batch, rng::derive_seed(seed, &[TAG_MASK, epoch as u64, bi as u64]), Some(&mut grads))?;
            if !obj.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                skipped_steps += 1;
                continue;
            }
            model.store.sgd_step(&grads, config.learning_rate);
            batches += 1;
            sums.0 += obj.seq;
            sums.1 += obj.cls;
            sums.3 += obj.total;
            if let Some(a) = obj.aux {
                sums.2 += a;
                aux_batches += 1;
            }
        }
        let n = batches.max(1) as f64;
        epochs.push(PretrainEpoch {
            epoch: epoch + 1,
            seq: sums.0 / n,
            cls: sums.1 / n,
            aux: (aux_batches > 0).then(|| sums.2 / aux_batches as f64),
            total: sums.3 / n,
            skipped_aux_batches: batches - aux_batches,
            skipped_steps,
        });
    }
    Ok(Pretrained {
        model,
        report: PretrainReport {
            epochs,
            examples: prepared.len(),
            unlocatable,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::*;
    use crate::corpus::Split;
    use crate::nn::ln;
    use crate::schema::fixtures::schema;
    use alloc::sync::Arc;
    use alloc::vec;

    fn cfg(dim: usize) -> PreviewConfig {
        PreviewConfig {
            encoder: EncoderConfig { dim, radius: 1 },
            ..PreviewConfig::default()
        }
    }

    #[test]
    fn golden_house_is_added_with_exact_span() {
        let s = schema();
        let ex = example(
            "d",
            vec![
                turn(1, "", "i need a hotel in the north", &[("hotel-area", "north")]),
                turn(2, "ok .", "also food at golden house please", &[("restaurant-name", "golden house")]),
            ],
            &s,
        );
        let t = derive_targets(&ex, &s, &PreviewConfig::default());
        let ri = s.slot_index("restaurant-name").unwrap();
        let start = t.context.iter().position(|w| w == "golden").unwrap();
        let expected: Vec<u8> = (0..t.context.len()).map(|j| u8::from(j == start || j == start + 1)).collect();
        assert_eq!(t.spans[ri], expected);
        assert_eq!(t.ops[ri], OpClass::Added);
        let ai = s.slot_index("hotel-area").unwrap();
        assert_eq!(t.ops[ai], OpClass::NotMentioned);
        assert!(t.spans[ai].iter().all(|&x| x == 0));
        assert!(t.unlocatable.is_empty());
    }

    #[test]
    fn silent_turn_and_first_match() {
        let s = schema();
        let ex = example("q", vec![turn(1, "", "hello there", &[])], &s);
        let t = derive_targets(&ex, &s, &PreviewConfig::default());
        assert!(t.ops.iter().all(|&o| o == OpClass::NotMentioned));
        assert!(t.spans.iter().flatten().all(|&x| x == 0));

        let ex = example("r", vec![turn(1, "", "north or north", &[("hotel-area", "north")])], &s);
        let t = derive_targets(&ex, &s, &PreviewConfig::default());
        assert_eq!(t.spans[s.slot_index("hotel-area").unwrap()], vec![1, 0, 0]);
    }

    #[test]
    fn changed_deleted_dontcare_refer() {
        let s = schema();
        let mut t3 = turn(3, "sure", "any area , no taxi", &[("hotel-area", "dontcare")]);
        t3.cleared.insert("taxi-destination".into());
        let ex = example(
            "x",
            vec![
                turn(1, "", "a taxi to nandos", &[("taxi-destination", "nandos")]),
                turn(2, "ok", "north please", &[("hotel-area", "north")]),
                t3,
                turn(4, "fine", "hotel in the south", &[("hotel-area", "south"), ("hotel-name", "nandos")]),
            ],
            &s,
        );
        let basic = PreviewConfig::default();
        let ext = PreviewConfig { extended_ops: true, ..basic };
        let area = s.slot_index("hotel-area").unwrap();
        let dest = s.slot_index("taxi-destination").unwrap();
        let name = s.slot_index("hotel-name").unwrap();

        let third = ex.prefix(3);
        let t = derive_targets(&third, &s, &basic);
        assert_eq!(t.ops[area], OpClass::Changed);
        assert_eq!(t.ops[dest], OpClass::Deleted);
        assert!(t.unlocatable.is_empty());
        assert_eq!(derive_targets(&third, &s, &ext).ops[area], OpClass::Dontcare);

        // hotel-name's value is not in turn 4 but taxi-destination held it
        let t = derive_targets(&ex, &s, &ext);
        assert_eq!(t.ops[name], OpClass::Refer);
        assert_eq!(t.ops[area], OpClass::Changed);
        assert_eq!(derive_targets(&ex, &s, &basic).ops[name], OpClass::Added);
    }

    #[test]
    fn unlocatable_values_are_counted() {
        let s = schema();
        let ex = example("u", vec![turn(1, "", "somewhere cheap", &[("hotel-area", "centre")])], &s);
        let t = derive_targets(&ex, &s, &PreviewConfig::default());
        assert_eq!(t.unlocatable, vec![String::from("hotel-area")]);
        assert!(t.spans.iter().flatten().all(|&x| x == 0));
    }

    #[test]
    fn context_truncation_keeps_latest_tokens() {
        let s = schema();
        let ex = example("c", vec![turn(1, "", "a b c", &[]), turn(2, "d", "e f", &[])], &s);
        let c = PreviewConfig { max_context_tokens: 4, ..PreviewConfig::default() };
        assert_eq!(serialize_context(&ex, c.max_context_tokens), vec!["c", "d", "e", "f"]);
    }

    fn zero_head(input: usize, output: usize, buf: &'_ [f64]) -> HeadParams<'_> {
        HeadParams {
            w1: &buf[..input * input],
            b1: &buf[..input],
            w2: &buf[..output * input],
            b2: &buf[..output],
            input,
            hidden: input,
            output,
        }
    }

    #[test]
    fn zero_heads_give_half_and_uniform() {
        let buf = vec![0.0; 64];
        let e = [0.3, -0.4];
        let states = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let p = span_head(&e, &states, &zero_head(4, 1, &buf)).unwrap();
        assert_eq!(p, vec![0.5; 3]);
        let q = cls_head(&e, &states, &zero_head(4, 4, &buf)).unwrap();
        assert_eq!(q, vec![0.25; 4]);
        assert!(span_head(&e, &states[..5], &zero_head(4, 1, &buf)).is_err());
        assert!(cls_head(&[1.0; 3], &states, &zero_head(4, 4, &buf)).is_err());
    }

    #[test]
    fn bce_and_ce_reference_values() {
        assert!((bce_with_logit(0.0, 1.0).0 - ln(2.0)).abs() < 1e-12);
        assert!((cross_entropy(&[0.0; 4], 1).0 - ln(4.0)).abs() < 1e-12);
        assert!(bce_with_logit(20.0, 1.0).0 < 1e-3 && bce_with_logit(-20.0, 0.0).0 < 1e-3);
    }

    fn tiny_corpus() -> Corpus {
        let s = Arc::new(schema());
        let exs = vec![
            example("a", vec![turn(1, "", "a hotel in the north", &[("hotel-area", "north")])], &s),
            example(
                "b",
                vec![
                    turn(1, "", "taxi from nandos", &[("taxi-departure", "nandos")]),
                    turn(2, "where to ?", "to the golden house at 17:15", &[("taxi-destination", "golden house"), ("taxi-leaveat", "17:15")]),
                ],
                &s,
            ),
        ];
        Corpus::new(exs, s, Split::Train).unwrap()
    }

    #[test]
    fn fast_span_path_matches_plain_head() {
        let c = tiny_corpus();
        let vocab = Vocab::build(c.iter(), c.schema());
        let m = PreviewModel::new(vocab, c.schema(), cfg(4), 3).unwrap();
        let ex = c.get("b").unwrap();
        let p = m.prepare(ex, c.schema());
        let mut total = 0.0;
        let n = c.schema().len();
        for s in 0..n {
            let out = m.encode(s, &p.targets.context);
            let probs = span_head(&out.slot_embedding, &out.context_states, &m.span_params()).unwrap();
            let mut row = 0.0;
            for (pj, y) in probs.iter().zip(&p.targets.spans[s]) {
                row += if *y == 1 { -ln(*pj) } else { -ln(1.0 - pj) };
            }
            total += row / probs.len() as f64;
        }
        let (seq, _) = m.preview_losses(&[p]).unwrap();
        assert!((seq - total / n as f64).abs() < 1e-10);
    }

    #[test]
    fn untrained_lm_is_uniform() {
        let c = tiny_corpus();
        let vocab = Vocab::build(c.iter(), c.schema());
        let v = vocab.len() as f64;
        let m = PreviewModel::new(vocab, c.schema(), PreviewConfig { mask_rate: 0.5, ..cfg(4) }, 3).unwrap();
        let batch: Vec<_> = c.iter().map(|e| m.prepare(e, c.schema())).collect();
        let l = m.aux_lm_loss(&batch, 1).unwrap().unwrap();
        assert!((l - ln(v)).abs() < 1e-12);
        let none = PreviewModel::new(m.vocab().clone(), c.schema(), PreviewConfig { mask_rate: 0.0, ..cfg(4) }, 3).unwrap();
        assert_eq!(none.aux_lm_loss(&batch, 1).unwrap(), None);
        assert!(m.aux_lm_loss(&[], 1).is_err());
        // synthetic examples never feed the masked-token objective
        let mut synth = batch.clone();
        synth.iter_mut().for_each(|p| p.natural = false);
        assert_eq!(m.aux_lm_loss(&synth, 1).unwrap(), None);
    }

    #[test]
    fn misaligned_targets_are_rejected() {
        let c = tiny_corpus();
        let vocab = Vocab::build(c.iter(), c.schema());
        let m = PreviewModel::new(vocab, c.schema(), cfg(4), 3).unwrap();
        let mut p = m.prepare(c.get("a").unwrap(), c.schema());
        p.targets.spans[0].pop();
        assert!(m.preview_losses(&[p]).is_err());
        assert!(m.preview_losses(&[]).is_err());
    }

    #[test]
    fn slot_and_context_share_weights() {
        let c = tiny_corpus();
        let vocab = Vocab::build(c.iter(), c.schema());
        let mut m = PreviewModel::new(vocab, c.schema(), cfg(4), 3).unwrap();
        let ctx: Vec<String> = vec!["departure".into()];
        let before = m.encode(0, &ctx);
        let word = m.vocab().id("departure") as usize;
        let emb = m.encoder().embedding;
        m.store_mut().get_mut(emb)[word * 4] += 1.0;
        let after = m.encode(0, &ctx);
        assert_ne!(before.slot_embedding, after.slot_embedding);
        assert_ne!(before.context_states, after.context_states);
    }

    #[test]
    fn zero_epochs_return_the_initialization() {
        let c = tiny_corpus();
        let vocab = Vocab::build(c.iter(), c.schema());
        let conf = PreviewConfig { epochs: 0, ..cfg(4) };
        let out = pretrain(&c, &vocab, &conf, 11).unwrap();
        let init = PreviewModel::new(vocab, c.schema(), conf, 11).unwrap();
        assert_eq!(out.encoder_params(), init.encoder_params());
        assert!(out.report.epochs.is_empty());
    }

    #[test]
    fn pretraining_lowers_the_objective_and_is_deterministic() {
        let c = tiny_corpus();
        let vocab = Vocab::build(c.iter(), c.schema());
        let conf = PreviewConfig { epochs: 30, batch_size: 2, learning_rate: 0.2, ..cfg(8) };
        let a = pretrain(&c, &vocab, &conf, 5).unwrap();
        let b = pretrain(&c, &vocab, &conf, 5).unwrap();
        assert_eq!(a.encoder_params(), b.encoder_params());
        let e = &a.report.epochs;
        assert!(e.last().unwrap().total < e[0].total);
        assert_eq!(a.report.examples, 2);
    }
}
