//! Slot inventory: domains, value sets, slot-name word sets.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Value meaning "slot has no value". Never stored in a turn state.
pub const NONE: &str = "none";
/// Value meaning "any value is acceptable".
pub const DONTCARE: &str = "dontcare";

/// Whether `value` is one of the two implicit special values.
pub fn is_special(value: &str) -> bool {
    value == NONE || value == DONTCARE
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpec {
    /// Full slot name, e.g. `taxi-departure`.
    pub name: String,
    pub domain: String,
    /// Known values. May be empty only for free-form slots.
    pub value_set: Vec<String>,
    /// Words that express the slot in an utterance. Never empty.
    pub name_words: Vec<String>,
    /// Name-like slots (hotel or restaurant names).
    pub is_named_entity: bool,
    /// Span-valued slot; the value set is open.
    pub free_form: bool,
}

/// Validated set of slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    domains: Vec<String>,
    slots: Vec<SlotSpec>,
    index: BTreeMap<String, usize>,
}

impl Schema {
    pub fn new(domains: Vec<String>, slots: Vec<SlotSpec>) -> Result<Self> {
        let mut seen_domains = BTreeSet::new();
        for d in &domains {
            if !seen_domains.insert(d.as_str()) {
                return Err(Error::Config(format!("duplicate domain `{d}`")));
            }
        }
        let mut index = BTreeMap::new();
        for (i, slot) in slots.iter().enumerate() {
            if index.insert(slot.name.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate slot `{}`", slot.name)));
            }
            if !seen_domains.contains(slot.domain.as_str()) {
                return Err(Error::Config(format!(
                    "slot `{}` names unknown domain `{}`",
                    slot.name, slot.domain
                )));
            }
            if slot.name_words.is_empty() || slot.name_words.iter().any(|w| w.trim().is_empty()) {
                return Err(Error::Config(format!(
                    "slot `{}` needs a non-empty name-word set",
                    slot.name
                )));
            }
            if slot.value_set.is_empty() && !slot.free_form {
                return Err(Error::Config(format!(
                    "categorical slot `{}` has an empty value set",
                    slot.name
                )));
            }
            if let Some(v) = slot.value_set.iter().find(|v| is_special(v)) {
                return Err(Error::Config(format!(
                    "slot `{}` lists the special value `{v}` in its value set",
                    slot.name
                )));
            }
        }
        Ok(Self {
            domains,
            slots,
            index,
        })
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn slots(&self) -> &[SlotSpec] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn slot(&self, name: &str) -> Option<&SlotSpec> {
        self.slot_index(name).map(|i| &self.slots[i])
    }

    /// Looks up a slot, failing with a schema violation that names the offender.
    pub fn require(&self, name: &str) -> Result<&SlotSpec> {
        self.slot(name)
            .ok_or_else(|| Error::Schema(format!("slot `{name}` is not in the schema")))
    }

    /// Slots of `domain`, in schema order.
    pub fn domain_slots<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a SlotSpec> + 'a {
        self.slots.iter().filter(move |s| s.domain == domain)
    }
}
