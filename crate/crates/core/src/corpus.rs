//! Dialog data model: turns, per-turn training examples and corpora.
//!
//! A [`DialogExample`] is one training unit for turn `t` of a dialog. It
//! owns the whole context up to and including `t`, the turn-level state of
//! every context turn, and the discourse-level state obtained by folding
//! [`accumulate_state`] over those turn states. Examples are only built
//! through validating constructors, so a live value always satisfies the
//! corpus invariants.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::schema::{Schema, NONE};

/// Slot name to value. `none` is never stored.
pub type SlotValues = BTreeMap<String, String>;

/// Folds one turn-level state into a discourse-level state.
///
/// Entries of `turn` overwrite entries of `prev`; `none` values in `turn`
/// are ignored.
pub fn accumulate_state(prev: &SlotValues, turn: &SlotValues, schema: &Schema) -> Result<SlotValues> {
    for slot in prev.keys().chain(turn.keys()) {
        schema.require(slot)?;
    }
    let mut next = prev.clone();
    for (slot, value) in turn {
        if value != NONE {
            next.insert(slot.clone(), value.clone());
        }
    }
    Ok(next)
}

/// One system/user exchange with its turn-level annotation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Turn {
    /// 1-based position in the dialog.
    pub index: usize,
    pub system: Vec<String>,
    pub user: Vec<String>,
    /// Turn-level state, `none` omitted.
    pub state: SlotValues,
    /// Slots explicitly annotated `none` in this turn.
    pub cleared: BTreeSet<String>,
}

impl Turn {
    pub fn new(index: usize, system: Vec<String>, user: Vec<String>, state: SlotValues) -> Self {
        let mut turn = Self {
            index,
            system,
            user,
            state: SlotValues::new(),
            cleared: BTreeSet::new(),
        };
        for (slot, value) in state {
            if value == NONE {
                turn.cleared.insert(slot);
            } else {
                turn.state.insert(slot, value);
            }
        }
        turn
    }

    /// System tokens followed by user tokens.
    pub fn tokens(&self) -> impl Iterator<Item = &String> {
        self.system.iter().chain(self.user.iter())
    }

    pub fn token_count(&self) -> usize {
        self.system.len() + self.user.len()
    }
}

/// Training unit for one turn: context, turn-level and discourse-level state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogExample {
    example_id: String,
    dialog_id: String,
    context: Vec<Turn>,
    prev_discourse_state: SlotValues,
    discourse_state: SlotValues,
    synthetic: bool,
}

impl DialogExample {
    pub fn new(
        example_id: impl Into<String>,
        dialog_id: impl Into<String>,
        context: Vec<Turn>,
        synthetic: bool,
        schema: &Schema,
    ) -> Result<Self> {
        let example_id = example_id.into();
        let (prev, current) = fold_context(&example_id, &context, schema)?;
        Ok(Self {
            example_id,
            dialog_id: dialog_id.into(),
            context,
            prev_discourse_state: prev,
            discourse_state: current,
            synthetic,
        })
    }

    pub fn example_id(&self) -> &str {
        &self.example_id
    }

    pub fn dialog_id(&self) -> &str {
        &self.dialog_id
    }

    /// Turns `1..=t`.
    pub fn context(&self) -> &[Turn] {
        &self.context
    }

    /// Turn number `t`.
    pub fn turn_number(&self) -> usize {
        self.context.len()
    }

    pub fn current(&self) -> &Turn {
        self.context.last().expect("context is non-empty")
    }

    pub fn history(&self) -> &[Turn] {
        &self.context[..self.context.len() - 1]
    }

    /// Turn-level state of the current turn.
    pub fn turn_state(&self) -> &SlotValues {
        &self.current().state
    }

    /// Discourse-level state before the current turn.
    pub fn prev_discourse_state(&self) -> &SlotValues {
        &self.prev_discourse_state
    }

    pub fn discourse_state(&self) -> &SlotValues {
        &self.discourse_state
    }

    /// Whether the example came from a synthetic generator rather than natural data.
    pub fn is_synthetic(&self) -> bool {
        self.synthetic
    }

    /// The example for turn `t` of the same dialog, `1 <= t <= turn_number()`.
    pub fn prefix(&self, t: usize) -> DialogExample {
        assert!(t >= 1 && t <= self.context.len(), "prefix {t} out of range");
        if t == self.context.len() {
            return self.clone();
        }
        let context = self.context[..t].to_vec();
        let mut prev = SlotValues::new();
        let mut current = SlotValues::new();
        for (i, turn) in context.iter().enumerate() {
            if i + 1 == t {
                prev = current.clone();
            }
            for (slot, value) in &turn.state {
                current.insert(slot.clone(), value.clone());
            }
        }
        DialogExample {
            example_id: format!("{}@{}", self.example_id, t),
            dialog_id: self.dialog_id.clone(),
            context,
            prev_discourse_state: prev,
            discourse_state: current,
            synthetic: self.synthetic,
        }
    }

    /// The same example under a new id (also used as its dialog id).
    pub fn renamed(&self, id: impl Into<String>) -> DialogExample {
        let id = id.into();
        DialogExample {
            dialog_id: id.clone(),
            example_id: id,
            ..self.clone()
        }
    }

    /// Re-checks every invariant from scratch.
    pub fn check(&self, schema: &Schema) -> Result<()> {
        let (prev, current) = fold_context(&self.example_id, &self.context, schema)?;
        if prev != self.prev_discourse_state || current != self.discourse_state {
            return Err(Error::Data(format!(
                "example `{}`: discourse state is not the accumulation of its turn states",
                self.example_id
            )));
        }
        Ok(())
    }
}

fn fold_context(id: &str, context: &[Turn], schema: &Schema) -> Result<(SlotValues, SlotValues)> {
    if context.is_empty() {
        return Err(Error::Data(format!("example `{id}` has an empty context")));
    }
    let mut prev = SlotValues::new();
    let mut current = SlotValues::new();
    for (i, turn) in context.iter().enumerate() {
        if turn.index != i + 1 {
            return Err(Error::Data(format!(
                "example `{id}`: turn {} found at position {}",
                turn.index,
                i + 1
            )));
        }
        if turn.user.is_empty() {
            return Err(Error::Data(format!("example `{id}`: turn {} has an empty user utterance", turn.index)));
        }
        if turn.system.is_empty() && turn.index > 1 {
            return Err(Error::Data(format!(
                "example `{id}`: turn {} has an empty system utterance",
                turn.index
            )));
        }
        if turn.state.values().any(|v| v == NONE) {
            return Err(Error::Data(format!("example `{id}`: turn state stores `none`")));
        }
        for slot in &turn.cleared {
            schema.require(slot)?;
        }
        prev = current;
        current = accumulate_state(&prev, &turn.state, schema)?;
    }
    Ok((prev, current))
}

/// A full dialog as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialog {
    pub dialog_id: String,
    pub turns: Vec<Turn>,
    pub synthetic: bool,
}

impl Dialog {
    /// Identifier of the example for turn `t`.
    pub fn example_id(dialog_id: &str, t: usize) -> String {
        format!("{dialog_id}#{t}")
    }

    /// One example per turn.
    pub fn examples(&self, schema: &Schema) -> Result<Vec<DialogExample>> {
        (1..=self.turns.len())
            .map(|t| {
                DialogExample::new(
                    Self::example_id(&self.dialog_id, t),
                    self.dialog_id.clone(),
                    self.turns[..t].to_vec(),
                    self.synthetic,
                    schema,
                )
            })
            .collect()
    }

    /// Discourse state after each turn.
    pub fn discourse_states(&self, schema: &Schema) -> Result<Vec<SlotValues>> {
        let mut state = SlotValues::new();
        let mut out = Vec::with_capacity(self.turns.len());
        for turn in &self.turns {
            state = accumulate_state(&state, &turn.state, schema)?;
            out.push(state.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// A set of examples sharing one schema.
#[derive(Debug, Clone)]
pub struct Corpus {
    examples: Vec<DialogExample>,
    schema: Arc<Schema>,
    split: Split,
    index: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new(examples: Vec<DialogExample>, schema: Arc<Schema>, split: Split) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, ex) in examples.iter().enumerate() {
            if index.insert(ex.example_id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate example id `{}`", ex.example_id)));
            }
        }
        Ok(Self {
            examples,
            schema,
            split,
            index,
        })
    }

    pub fn from_dialogs(dialogs: &[Dialog], schema: Arc<Schema>, split: Split) -> Result<Self> {
        let mut examples = Vec::new();
        for d in dialogs {
            examples.extend(d.examples(&schema)?);
        }
        Self::new(examples, schema, split)
    }

    pub fn examples(&self) -> &[DialogExample] {
        &self.examples
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn schema_arc(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, example_id: &str) -> Option<&DialogExample> {
        self.index.get(example_id).map(|&i| &self.examples[i])
    }

    pub fn iter(&self) -> core::slice::Iter<'_, DialogExample> {
        self.examples.iter()
    }

    /// Regroups examples into dialogs, keeping only the longest example of
    /// each dialog id (whose context carries every turn).
    pub fn dialogs(&self) -> Vec<Dialog> {
        let mut longest: BTreeMap<&str, &DialogExample> = BTreeMap::new();
        for ex in &self.examples {
            let entry = longest.entry(ex.dialog_id()).or_insert(ex);
            if ex.turn_number() > entry.turn_number() {
                *entry = ex;
            }
        }
        longest
            .into_values()
            .map(|ex| Dialog {
                dialog_id: ex.dialog_id.clone(),
                turns: ex.context.clone(),
                synthetic: ex.synthetic,
            })
            .collect()
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a DialogExample;
    type IntoIter = core::slice::Iter<'a, DialogExample>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}
