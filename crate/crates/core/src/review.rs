//! Hard-example selection and schema-based augmentation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom as _;
use rand::Rng as _;

use crate::corpus::{Corpus, DialogExample, SlotValues, Turn};
use crate::error::{Error, Result};
use crate::model::ModelOracle;
use crate::preview::{derive_targets, PreviewConfig};
use crate::rng::{self, Rng};
use crate::scheduler::{CurriculumHooks, EpochEvent};
use crate::schema::{Schema, DONTCARE};
use crate::text::{detokenize, find_subsequence, tokenize};

/// Loss and correctness of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub example_id: String,
    pub loss: f64,
    /// Predicted turn state equals the gold one.
    pub correct: bool,
}

pub fn evaluate_candidates<M: ModelOracle + ?Sized>(model: &M, examples: &[&DialogExample]) -> Vec<Candidate> {
    examples
        .iter()
        .map(|ex| Candidate {
            example_id: String::from(ex.example_id()),
            loss: model.example_loss(ex),
            correct: &model.predict_turn(ex) == ex.turn_state(),
        })
        .collect()
}

/// Number of examples taken from `count` at `fraction`, rounding up.
/// Products within 1e-9 of an integer count as that integer.
pub fn selection_size(fraction: f64, count: usize) -> usize {
    let x = fraction * count as f64;
    let near = libm::round(x);
    if (x - near).abs() < 1e-9 {
        near as usize
    } else {
        libm::ceil(x) as usize
    }
}

/// Highest-loss incorrect examples; ties go to the smaller id.
pub fn select_hard(candidates: &[Candidate], fraction: f64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("review fraction {fraction} is outside (0, 1]")));
    }
    if let Some(c) = candidates.iter().find(|c| !c.loss.is_finite()) {
        return Err(Error::Data(format!("example `{}` has a non-finite loss", c.example_id)));
    }
    let mut wrong: Vec<&Candidate> = candidates.iter().filter(|c| !c.correct).collect();
    wrong.sort_by(|a, b| b.loss.total_cmp(&a.loss).then_with(|| a.example_id.cmp(&b.example_id)));
    let k = selection_size(fraction, wrong.len());
    Ok(wrong[..k].iter().map(|c| c.example_id.clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Technique {
    SlotSubstitution,
    ValueReplacement,
    DialogRecombination,
}

impl Technique {
    pub const ALL: [Technique; 3] = [
        Technique::SlotSubstitution,
        Technique::ValueReplacement,
        Technique::DialogRecombination,
    ];

    fn code(self) -> &'static str {
        match self {
            Technique::SlotSubstitution => "ss",
            Technique::ValueReplacement => "vr",
            Technique::DialogRecombination => "rc",
        }
    }
}

/// What a technique changed.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Edit {
    SlotSubstitution {
        slot: String,
        target: String,
        word: String,
        replacement: String,
    },
    ValueReplacement {
        slot: String,
        old: String,
        new: String,
    },
    /// History of one example joined with the current turn of another.
    Recombination {
        history_from: String,
        turn_from: String,
    },
}

impl Edit {
    pub fn summary(&self) -> String {
        match self {
            Edit::SlotSubstitution { slot, target, word, replacement } => {
                format!("{slot} -> {target}: `{word}` -> `{replacement}`")
            }
            Edit::ValueReplacement { slot, old, new } => format!("{slot}: `{old}` -> `{new}`"),
            Edit::Recombination { history_from, turn_from } => {
                format!("history of {history_from} + current turn of {turn_from}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationRecord {
    pub example: DialogExample,
    pub technique: Technique,
    pub source_ids: Vec<String>,
    pub edit: Edit,
}

fn splice(tokens: &[String], at: usize, len: usize, with: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len() + with.len());
    out.extend_from_slice(&tokens[..at]);
    out.extend_from_slice(with);
    out.extend_from_slice(&tokens[at + len..]);
    out
}

fn with_current(example: &DialogExample, current: Turn, schema: &Schema) -> Option<DialogExample> {
    let mut context = example.history().to_vec();
    context.push(current);
    let id = String::from(example.example_id());
    DialogExample::new(id.clone(), id, context, true, schema).ok()
}

fn pick<T>(options: Vec<T>, rng: &mut Rng) -> Option<T> {
    if options.is_empty() {
        return None;
    }
    let i = rng.gen_range(0..options.len());
    options.into_iter().nth(i)
}

/// Moves a `dontcare` from a slot named in the current turn to an unmentioned
/// slot of the same domain, swapping the slot word in the utterance.
pub fn slot_substitution(example: &DialogExample, schema: &Schema, rng: &mut Rng) -> Option<AugmentationRecord> {
    let cur = example.current();
    let y = example.turn_state();
    // (slot, in user side, position, matched tokens, target, replacement tokens)
    let mut options = Vec::new();
    for (slot, value) in y {
        if value != DONTCARE {
            continue;
        }
        let spec = schema.slot(slot)?;
        let found = spec.name_words.iter().enumerate().find_map(|(wi, w)| {
            let wt = tokenize(w);
            find_subsequence(&cur.user, &wt)
                .map(|p| (true, p))
                .or_else(|| find_subsequence(&cur.system, &wt).map(|p| (false, p)))
                .map(|(user, p)| (wi, wt, user, p))
        });
        let Some((wi, wt, user, pos)) = found else { continue };
        for target in schema.domain_slots(&spec.domain) {
            if target.name == *slot || y.contains_key(&target.name) {
                continue;
            }
            let word = target.name_words.get(wi).unwrap_or(&target.name_words[0]);
            let rt = tokenize(word);
            if rt != wt && !rt.is_empty() {
                options.push((slot.clone(), user, pos, wt.clone(), target.name.clone(), rt));
            }
        }
    }
    let (slot, user, pos, wt, target, rt) = pick(options, rng)?;
    let mut turn = cur.clone();
    let side = if user { &mut turn.user } else { &mut turn.system };
    *side = splice(side, pos, wt.len(), &rt);
    turn.state.remove(&slot);
    turn.state.insert(target.clone(), String::from(DONTCARE));
    let new = with_current(example, turn, schema)?;
    Some(AugmentationRecord {
        example: new,
        technique: Technique::SlotSubstitution,
        source_ids: alloc::vec![String::from(example.example_id())],
        edit: Edit::SlotSubstitution {
            slot,
            target,
            word: detokenize(&wt),
            replacement: detokenize(&rt),
        },
    })
}

/// Lookup structures shared by the augmentation techniques.
#[derive(Debug, Clone)]
pub struct ReviewIndex<'a> {
    corpus: &'a Corpus,
    values: BTreeMap<String, BTreeSet<String>>,
    by_slots: BTreeMap<Vec<String>, Vec<usize>>,
}

impl<'a> ReviewIndex<'a> {
    pub fn new(corpus: &'a Corpus) -> Self {
        let mut values: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for spec in corpus.schema().slots() {
            values.entry(spec.name.clone()).or_default().extend(spec.value_set.iter().cloned());
        }
        let mut by_slots: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
        for (i, ex) in corpus.iter().enumerate() {
            for (slot, v) in ex.turn_state() {
                if v != DONTCARE {
                    values.entry(slot.clone()).or_default().insert(v.clone());
                }
            }
            let key: Vec<String> = ex.turn_state().keys().cloned().collect();
            if !key.is_empty() {
                by_slots.entry(key).or_default().push(i);
            }
        }
        Self { corpus, values, by_slots }
    }

    pub fn corpus(&self) -> &'a Corpus {
        self.corpus
    }

    /// Value set of the slot plus every value observed for it.
    pub fn known_values(&self, slot: &str) -> Option<&BTreeSet<String>> {
        self.values.get(slot)
    }
}

/// Replaces a value that occurs verbatim in the user utterance by another
/// known value of the same slot.
pub fn value_replacement(example: &DialogExample, index: &ReviewIndex<'_>, rng: &mut Rng) -> Option<AugmentationRecord> {
    let schema = index.corpus.schema();
    let cur = example.current();
    let y = example.turn_state();
    let locatable = |user: &[String]| -> BTreeSet<String> {
        y.iter()
            .filter(|(_, v)| *v != DONTCARE && find_subsequence(user, &tokenize(v)).is_some())
            .map(|(k, _)| k.clone())
            .collect()
    };
    let before = locatable(&cur.user);
    let mut options = Vec::new();
    for (slot, value) in y {
        if value == DONTCARE {
            continue;
        }
        let vt = tokenize(value);
        let Some(pos) = find_subsequence(&cur.user, &vt) else { continue };
        let Some(known) = index.known_values(slot) else { continue };
        if known.len() < 2 {
            continue;
        }
        for alt in known.iter().filter(|a| *a != value) {
            let at = tokenize(alt);
            if at.is_empty() {
                continue;
            }
            let user = splice(&cur.user, pos, vt.len(), &at);
            let others_intact = before
                .iter()
                .filter(|s| *s != slot)
                .all(|s| find_subsequence(&user, &tokenize(&y[s])).is_some());
            if others_intact {
                options.push((slot.clone(), value.clone(), alt.clone(), user));
            }
        }
    }
    let (slot, old, new, user) = pick(options, rng)?;
    let mut turn = cur.clone();
    turn.user = user;
    turn.state.insert(slot.clone(), new.clone());
    let ex = with_current(example, turn, schema)?;
    Some(AugmentationRecord {
        example: ex,
        technique: Technique::ValueReplacement,
        source_ids: alloc::vec![String::from(example.example_id())],
        edit: Edit::ValueReplacement { slot, old, new },
    })
}

fn stitch(history_from: &DialogExample, turn_from: &DialogExample, schema: &Schema) -> Option<DialogExample> {
    let mut turn = turn_from.current().clone();
    turn.index = history_from.turn_number();
    let mut ex = with_current(history_from, turn, schema)?;
    let id = format!("{}|rc|{}", history_from.example_id(), turn_from.example_id());
    ex = ex.renamed(id);
    Some(ex)
}

fn stitchable(a: &DialogExample, b: &DialogExample) -> bool {
    (a.turn_number() == 1 || !b.current().system.is_empty()) && (b.turn_number() == 1 || !a.current().system.is_empty())
}

/// Slots of the turn state whose value cannot be found anywhere in the
/// example's text.
fn unlocatable_slots(example: &DialogExample, schema: &Schema) -> BTreeSet<String> {
    let wide = PreviewConfig {
        max_context_tokens: usize::MAX,
        ..PreviewConfig::default()
    };
    derive_targets(example, schema, &wide).unlocatable.into_iter().collect()
}

/// A stitched turn may not lose a value it located through its own history,
/// as with a reference to an earlier slot or an offer it accepts.
fn stays_grounded(stitched: &DialogExample, turn_from: &DialogExample, schema: &Schema) -> bool {
    unlocatable_slots(stitched, schema).is_subset(&unlocatable_slots(turn_from, schema))
}

/// Partners tried per recombination before giving up.
const PARTNER_TRIES: usize = 8;

/// Exchanges current turns (and their turn states) between two examples
/// that mention the same slots. Returns both stitched examples.
pub fn dialog_recombination(
    example: &DialogExample,
    index: &ReviewIndex<'_>,
    rng: &mut Rng,
) -> Option<(AugmentationRecord, AugmentationRecord)> {
    let schema = index.corpus.schema();
    let key: Vec<String> = example.turn_state().keys().cloned().collect();
    let mut partners: Vec<&DialogExample> = index
        .by_slots
        .get(&key)?
        .iter()
        .map(|&i| &index.corpus.examples()[i])
        .filter(|b| b.example_id() != example.example_id() && stitchable(example, b))
        .filter(|b| b.current().user != example.current().user || b.turn_state() != example.turn_state())
        .collect();
    partners.shuffle(rng);
    let (b, a_new, b_new) = partners.into_iter().take(PARTNER_TRIES).find_map(|b| {
        let a_new = stitch(example, b, schema)?;
        let b_new = stitch(b, example, schema)?;
        (stays_grounded(&a_new, b, schema) && stays_grounded(&b_new, example, schema)).then_some((b, a_new, b_new))
    })?;
    let ids = alloc::vec![String::from(example.example_id()), String::from(b.example_id())];
    let rec = |ex: DialogExample, h: &DialogExample, t: &DialogExample| AugmentationRecord {
        example: ex,
        technique: Technique::DialogRecombination,
        source_ids: ids.clone(),
        edit: Edit::Recombination {
            history_from: String::from(h.example_id()),
            turn_from: String::from(t.example_id()),
        },
    };
    Some((rec(a_new, example, b), rec(b_new, b, example)))
}

/// Canonical text of an example's content, ignoring ids.
pub fn content_key(example: &DialogExample) -> String {
    let mut key = String::new();
    for t in example.context() {
        key.push_str(&format!("{}|{}|{}|", t.index, detokenize(&t.system), detokenize(&t.user)));
        for (k, v) in &t.state {
            key.push_str(&format!("{k}={v};"));
        }
        for k in &t.cleared {
            key.push_str(&format!("{k}=none;"));
        }
        key.push('\n');
    }
    key
}

/// Stateful augmentation across several rounds: ids stay unique and no
/// content is emitted twice.
#[derive(Debug, Clone)]
pub struct Augmenter<'a> {
    index: ReviewIndex<'a>,
    seen: BTreeSet<String>,
    ids: BTreeSet<String>,
    round: usize,
}

const TAG_AUGMENT: u64 = 0xa06;

impl<'a> Augmenter<'a> {
    pub fn new(corpus: &'a Corpus) -> Self {
        Self {
            seen: corpus.iter().map(content_key).collect(),
            ids: corpus.iter().map(|e| String::from(e.example_id())).collect(),
            index: ReviewIndex::new(corpus),
            round: 0,
        }
    }

    pub fn index(&self) -> &ReviewIndex<'a> {
        &self.index
    }

    fn admit(&mut self, mut record: AugmentationRecord, id: String, out: &mut Vec<AugmentationRecord>) -> bool {
        let key = content_key(&record.example);
        if self.ids.contains(&id) || self.seen.contains(&key) {
            return false;
        }
        record.example = record.example.renamed(id.clone());
        self.ids.insert(id);
        self.seen.insert(key);
        out.push(record);
        true
    }

    /// Round-robins the techniques over the hard examples until `budget`
    /// records or exhaustion. In pass `p`, example `i` uses technique
    /// `(i + p) mod 3`; after three passes every example has met every
    /// technique once.
    pub fn augment(&mut self, hard: &[&DialogExample], budget: usize, seed: u64) -> Vec<AugmentationRecord> {
        let round = self.round;
        self.round += 1;
        let schema = self.index.corpus.schema_arc().clone();
        let mut out = Vec::new();
        for pass in 0..Technique::ALL.len() {
            for (i, ex) in hard.iter().enumerate() {
                if out.len() >= budget {
                    break;
                }
                let technique = Technique::ALL[(i + pass) % 3];
                let mut r = rng::rng(
                    seed,
                    &[TAG_AUGMENT, round as u64, pass as u64, rng::stable_hash(ex.example_id())],
                );
                let tag = format!("{}{round}.{pass}", technique.code());
                match technique {
                    Technique::SlotSubstitution => {
                        if let Some(rec) = slot_substitution(ex, &schema, &mut r) {
                            self.admit(rec, format!("{}|{tag}", ex.example_id()), &mut out);
                        }
                    }
                    Technique::ValueReplacement => {
                        if let Some(rec) = value_replacement(ex, &self.index, &mut r) {
                            self.admit(rec, format!("{}|{tag}", ex.example_id()), &mut out);
                        }
                    }
                    Technique::DialogRecombination => {
                        if let Some((a, b)) = dialog_recombination(ex, &self.index, &mut r) {
                            let ia = format!("{}|{tag}|{}", a.source_ids[0], a.source_ids[1]);
                            let ib = format!("{}|{tag}|{}", a.source_ids[1], a.source_ids[0]);
                            self.admit(a, ia, &mut out);
                            if out.len() < budget {
                                self.admit(b, ib, &mut out);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// One-shot augmentation of corpus examples named by id.
pub fn augment_batch(hard_ids: &[String], corpus: &Corpus, budget: usize, seed: u64) -> Result<Vec<AugmentationRecord>> {
    let hard = hard_ids
        .iter()
        .map(|id| corpus.get(id).ok_or_else(|| Error::Data(format!("no example `{id}` to augment"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Augmenter::new(corpus).augment(&hard, budget, seed))
}

fn fail(record: &AugmentationRecord, why: &str) -> Error {
    Error::Data(format!("augmented example `{}`: {why}", record.example.example_id()))
}

fn same_except(a: &SlotValues, a_slot: &str, b: &SlotValues, b_slot: &str) -> bool {
    let strip = |m: &SlotValues, s: &str| -> SlotValues { m.iter().filter(|(k, _)| *k != s).map(|(k, v)| (k.clone(), v.clone())).collect() };
    strip(a, a_slot) == strip(b, b_slot)
}

/// Checks corpus invariants, the technique's postconditions and label
/// consistency of the touched slots. `source` resolves source ids.
pub fn validate_record<'s, F>(record: &AugmentationRecord, index: &ReviewIndex<'_>, source: F) -> Result<()>
where
    F: Fn(&str) -> Option<&'s DialogExample>,
{
    let schema = index.corpus.schema();
    let ex = &record.example;
    ex.check(schema)?;
    if record.source_ids.is_empty() {
        return Err(fail(record, "no source ids"));
    }
    let src = |i: usize| source(&record.source_ids[i]).ok_or_else(|| fail(record, "unknown source"));
    let y = ex.turn_state();
    match (&record.technique, &record.edit) {
        (Technique::SlotSubstitution, Edit::SlotSubstitution { slot, target, replacement, .. }) => {
            let s = src(0)?;
            let (from, to) = (schema.require(slot)?, schema.require(target)?);
            let ok = s.turn_state().get(slot).map(String::as_str) == Some(DONTCARE)
                && y.get(target).map(String::as_str) == Some(DONTCARE)
                && !y.contains_key(slot)
                && from.domain == to.domain
                && to.name_words.iter().any(|w| w == replacement)
                && {
                    let cur: Vec<String> = ex.current().tokens().cloned().collect();
                    find_subsequence(&cur, &tokenize(replacement)).is_some()
                }
                && same_except(s.turn_state(), slot, y, target)
                && s.history() == ex.history();
            if !ok {
                return Err(fail(record, "slot substitution postcondition"));
            }
        }
        (Technique::ValueReplacement, Edit::ValueReplacement { slot, old, new }) => {
            let s = src(0)?;
            let ok = s.turn_state().get(slot) == Some(old)
                && y.get(slot) == Some(new)
                && old != new
                && index.known_values(slot).is_some_and(|k| k.contains(new))
                && find_subsequence(&ex.current().user, &tokenize(new)).is_some()
                && same_except(s.turn_state(), slot, y, slot)
                && s.history() == ex.history()
                && !unlocatable_slots(ex, schema).contains(slot);
            if !ok {
                return Err(fail(record, "value replacement postcondition"));
            }
        }
        (Technique::DialogRecombination, Edit::Recombination { history_from, turn_from }) => {
            let h = source(history_from).ok_or_else(|| fail(record, "unknown history source"))?;
            let t = source(turn_from).ok_or_else(|| fail(record, "unknown turn source"))?;
            let keys = |m: &SlotValues| m.keys().cloned().collect::<Vec<_>>();
            let ok = record.source_ids.contains(history_from)
                && record.source_ids.contains(turn_from)
                && history_from != turn_from
                && h.history() == ex.history()
                && y == t.turn_state()
                && ex.current().user == t.current().user
                && keys(y) == keys(h.turn_state())
                && stays_grounded(ex, t, schema);
            if !ok {
                return Err(fail(record, "recombination postcondition"));
            }
        }
        _ => return Err(fail(record, "edit does not match technique")),
    }
    Ok(())
}

/// When review runs inside curriculum training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ReviewMode {
    /// After every unconverged stage epoch.
    Online,
    /// Once, after the last stage and before post-accumulation epochs.
    #[default]
    PostCl,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ReviewConfig {
    pub fraction: f64,
    /// Maximum augmented examples per review round.
    pub budget: usize,
    pub mode: ReviewMode,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        Self {
            fraction: 0.1,
            budget: 1000,
            mode: ReviewMode::PostCl,
        }
    }
}

/// Curriculum hooks that review hard examples and feed augmentations back.
#[derive(Debug, Clone)]
pub struct ReviewHook<'a> {
    config: ReviewConfig,
    augmenter: Augmenter<'a>,
    seed: u64,
    /// Every record emitted so far, in order.
    pub records: Vec<AugmentationRecord>,
}

impl<'a> ReviewHook<'a> {
    pub fn new(corpus: &'a Corpus, config: ReviewConfig, seed: u64) -> Result<Self> {
        if !(config.fraction > 0.0 && config.fraction <= 1.0) {
            return Err(Error::Config(format!("review fraction {} is outside (0, 1]", config.fraction)));
        }
        Ok(Self {
            config,
            augmenter: Augmenter::new(corpus),
            seed,
            records: Vec::new(),
        })
    }

    fn review<M: ModelOracle>(&mut self, model: &M, training_set: &[&DialogExample], salt: u64) -> Vec<DialogExample> {
        let candidates = evaluate_candidates(model, training_set);
        let hard_ids = select_hard(&candidates, self.config.fraction).expect("fraction validated, losses finite");
        let by_id: BTreeMap<&str, &DialogExample> = training_set.iter().map(|e| (e.example_id(), *e)).collect();
        let hard: Vec<&DialogExample> = hard_ids.iter().map(|id| by_id[id.as_str()]).collect();
        let records = self
            .augmenter
            .augment(&hard, self.config.budget, rng::derive_seed(self.seed, &[salt]));
        let examples = records.iter().map(|r| r.example.clone()).collect();
        self.records.extend(records);
        examples
    }
}

impl<'a, M: ModelOracle> CurriculumHooks<M> for ReviewHook<'a> {
    fn on_epoch_end(&mut self, event: &EpochEvent, model: &M, training_set: &[&DialogExample]) -> Vec<DialogExample> {
        if self.config.mode != ReviewMode::Online || event.converged {
            return Vec::new();
        }
        self.review(model, training_set, ((event.stage as u64) << 32) | event.epoch as u64)
    }

    fn before_post(&mut self, model: &M, training_set: &[&DialogExample]) -> Vec<DialogExample> {
        if self.config.mode != ReviewMode::PostCl {
            return Vec::new();
        }
        self.review(model, training_set, u64::MAX)
    }
}
