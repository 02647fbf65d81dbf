//! Template-based synthetic dialogs with a controllable difficulty mix.
//!
//! Easy turns state one value next to its slot word. Hard turns carry
//! several slots, named entities, long fillers, or values that are only
//! offered by the system or referenced through another slot.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::{Corpus, Dialog, SlotValues, Split, Turn};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::schema::{Schema, SlotSpec, DONTCARE};
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SlotDef {
    /// Short name; the full slot name is `{domain}-{name}`.
    pub name: String,
    pub values: Vec<String>,
    pub words: Vec<String>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub named_entity: bool,
    #[cfg_attr(feature = "serde", serde(default))]
    pub free_form: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DomainDef {
    pub name: String,
    pub slots: Vec<SlotDef>,
}

/// Utterance templates. Placeholders: `{word}`, `{value}`, `{word2}`,
/// `{value2}`, `{ref}` and `{domain}`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Templates {
    pub direct: Vec<String>,
    pub multi: Vec<String>,
    pub dontcare: Vec<String>,
    /// System utterance offering a value; the user accepts with `accept`.
    pub offer: Vec<String>,
    pub accept: Vec<String>,
    /// Value taken from another slot named by `{ref}`.
    pub reference: Vec<String>,
    pub change: Vec<String>,
    pub chitchat: Vec<String>,
    pub acks: Vec<String>,
    pub fillers: Vec<String>,
    /// Extra direct templates for specific full slot names.
    pub slot_specific: BTreeMap<String, Vec<String>>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for Templates {
    fn default() -> Self {
        let mut slot_specific = BTreeMap::new();
        slot_specific.insert(String::from("taxi-leaveat"), strings(&["i want to leave after {value}", "pick me up at {value} , i am leaving then"]));
        slot_specific.insert(String::from("taxi-arriveby"), strings(&["i need to arrive by {value}", "it has to have arrived by {value}"]));
        slot_specific.insert(String::from("taxi-departure"), strings(&["i am leaving from {value}", "the departure is {value}"]));
        slot_specific.insert(String::from("taxi-destination"), strings(&["i am going to {value}", "take me to {value} please"]));
        Self {
            direct: strings(&[
                "i want the {word} to be {value}",
                "the {word} should be {value}",
                "{value} for the {word} please",
                "can you find a {domain} with {word} {value} ?",
            ]),
            multi: strings(&[
                "i want the {word} to be {value} and the {word2} to be {value2}",
                "{word} {value} , and {word2} {value2} please",
            ]),
            dontcare: strings(&["i don't care about the {word}", "any {word} is fine"]),
            offer: strings(&["how about {value} for the {word} ?", "i can suggest {value} as the {word} ."]),
            accept: strings(&["yes , that works", "sounds good , book it", "sure , go with that"]),
            reference: strings(&[
                "the {word} should be the same as the {ref}",
                "make the {word} match the {ref}",
            ]),
            change: strings(&["actually , change the {word} to {value}", "sorry , i meant {value} for the {word}"]),
            chitchat: strings(&["thanks , that is all", "great , thank you", "that sounds lovely"]),
            acks: strings(&["ok .", "sure , anything else ?", "noted .", "alright , what else ?"]),
            fillers: strings(&[
                "i am visiting with my family next week and we want to plan everything in advance",
                "we have been to cambridge before but it was a long time ago",
                "my colleague recommended asking you since you know the town well",
            ]),
            slot_specific,
        }
    }
}

/// Generator settings. Rates are per-turn probabilities.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthConfig {
    pub dialogs: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    /// Values that are offered by the system or referenced through another slot.
    pub indirection_rate: f64,
    /// Chance that a mentioned slot is a named-entity slot.
    pub named_entity_rate: f64,
    pub multi_slot_rate: f64,
    pub dontcare_rate: f64,
    pub change_rate: f64,
    pub chitchat_rate: f64,
    /// Chance of a long filler sentence before the request.
    pub filler_rate: f64,
    /// Dialog ids are `{id_prefix}-{index}`.
    pub id_prefix: String,
    /// Marks generated dialogs as synthetic.
    pub synthetic: bool,
    pub domains: Vec<DomainDef>,
    pub templates: Templates,
}

fn slot_def(name: &str, values: &[&str], words: &[&str], named_entity: bool, free_form: bool) -> SlotDef {
    SlotDef {
        name: name.into(),
        values: strings(values),
        words: strings(words),
        named_entity,
        free_form,
    }
}

const HOTELS: [&str; 6] = ["acorn guest house", "alexander bed and breakfast", "hamilton lodge", "lovell lodge", "gonville hotel", "arbury lodge"];
const RESTAURANTS: [&str; 6] = ["golden house", "nandos", "pizza hut", "curry garden", "the copper kettle", "midsummer house"];
const LANDMARKS: [&str; 4] = ["cambridge station", "the museum of technology", "kings college", "the airport"];
const TIMES: [&str; 8] = ["08:30", "09:15", "10:00", "11:45", "13:30", "15:00", "17:15", "20:00"];
const AREAS: [&str; 5] = ["north", "south", "east", "west", "centre"];
const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];

impl Default for SynthConfig {
    fn default() -> Self {
        let places: Vec<&str> = LANDMARKS.iter().chain(&HOTELS).chain(&RESTAURANTS).copied().collect();
        Self {
            dialogs: 500,
            min_turns: 1,
            max_turns: 5,
            indirection_rate: 0.15,
            named_entity_rate: 0.3,
            multi_slot_rate: 0.2,
            dontcare_rate: 0.08,
            change_rate: 0.08,
            chitchat_rate: 0.08,
            filler_rate: 0.15,
            id_prefix: String::from("syn"),
            synthetic: true,
            domains: vec![
                DomainDef {
                    name: "taxi".into(),
                    slots: vec![
                        slot_def("departure", &places, &["departure", "from"], false, true),
                        slot_def("destination", &places, &["destination", "to"], false, true),
                        slot_def("leaveat", &TIMES, &["leave", "leaving", "left"], false, false),
                        slot_def("arriveby", &TIMES, &["arrive", "arriving", "arrived"], false, false),
                    ],
                },
                DomainDef {
                    name: "hotel".into(),
                    slots: vec![
                        slot_def("name", &HOTELS, &["hotel", "place"], true, true),
                        slot_def("area", &AREAS, &["area", "part"], false, false),
                        slot_def("pricerange", &PRICES, &["price", "budget"], false, false),
                        slot_def("stars", &["2", "3", "4", "5"], &["stars", "rating"], false, false),
                    ],
                },
                DomainDef {
                    name: "restaurant".into(),
                    slots: vec![
                        slot_def("name", &RESTAURANTS, &["restaurant", "venue"], true, true),
                        slot_def("food", &["chinese", "italian", "indian", "british", "french", "thai"], &["food", "cuisine"], false, false),
                        slot_def("area", &AREAS, &["area", "part"], false, false),
                        slot_def("pricerange", &PRICES, &["price", "budget"], false, false),
                    ],
                },
            ],
            templates: Templates::default(),
        }
    }
}

const PLACEHOLDERS: [&str; 6] = ["word", "value", "word2", "value2", "ref", "domain"];

fn check_template(t: &str, required: &[&str]) -> Result<()> {
    let mut rest = t;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Config(format!("unclosed placeholder in template `{t}`")))?;
        let name = &rest[open + 1..open + close];
        if !PLACEHOLDERS.contains(&name) {
            return Err(Error::Config(format!("unknown placeholder `{{{name}}}` in template `{t}`")));
        }
        rest = &rest[open + close + 1..];
    }
    for r in required {
        if !t.contains(&format!("{{{r}}}")) {
            return Err(Error::Config(format!("template `{t}` lacks `{{{r}}}`")));
        }
    }
    Ok(())
}

fn fill(t: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = String::from(t);
    for (k, v) in pairs {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

impl SynthConfig {
    pub fn schema(&self) -> Result<Schema> {
        let domains = self.domains.iter().map(|d| d.name.clone()).collect();
        let slots = self
            .domains
            .iter()
            .flat_map(|d| {
                d.slots.iter().map(move |s| SlotSpec {
                    name: format!("{}-{}", d.name, s.name),
                    domain: d.name.clone(),
                    value_set: s.values.clone(),
                    name_words: s.words.clone(),
                    is_named_entity: s.named_entity,
                    free_form: s.free_form,
                })
            })
            .collect();
        Schema::new(domains, slots)
    }

    pub fn validate(&self) -> Result<Schema> {
        if self.domains.is_empty() {
            return Err(Error::Config(String::from("the generator needs at least one domain")));
        }
        for d in &self.domains {
            if d.slots.len() < 2 {
                return Err(Error::Config(format!("domain `{}` needs at least two slots", d.name)));
            }
            for s in &d.slots {
                if s.values.is_empty() {
                    return Err(Error::Config(format!("slot `{}-{}` has no values to generate", d.name, s.name)));
                }
            }
        }
        if self.min_turns == 0 || self.min_turns > self.max_turns {
            return Err(Error::Config(format!("invalid turn range {}..={}", self.min_turns, self.max_turns)));
        }
        let rates = [
            self.indirection_rate,
            self.named_entity_rate,
            self.multi_slot_rate,
            self.dontcare_rate,
            self.change_rate,
            self.chitchat_rate,
            self.filler_rate,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(String::from("rates must lie in [0, 1]")));
        }
        if self.indirection_rate + self.multi_slot_rate + self.dontcare_rate + self.change_rate + self.chitchat_rate > 1.0 {
            return Err(Error::Config(String::from("turn kind rates sum to more than 1")));
        }
        let t = &self.templates;
        let groups: [(&str, &Vec<String>, &[&str]); 10] = [
            ("direct", &t.direct, &["word", "value"]),
            ("multi", &t.multi, &["word", "value", "word2", "value2"]),
            ("dontcare", &t.dontcare, &["word"]),
            ("offer", &t.offer, &["value"]),
            ("accept", &t.accept, &[]),
            ("reference", &t.reference, &["word", "ref"]),
            ("change", &t.change, &["word", "value"]),
            ("chitchat", &t.chitchat, &[]),
            ("acks", &t.acks, &[]),
            ("fillers", &t.fillers, &[]),
        ];
        for (name, list, required) in groups {
            if list.is_empty() && !matches!(name, "fillers") {
                return Err(Error::Config(format!("no `{name}` templates")));
            }
            for tpl in list {
                check_template(tpl, required)?;
            }
        }
        for tpl in t.accept.iter().chain(&t.chitchat).chain(&t.acks).chain(&t.fillers) {
            if tpl.contains('{') {
                return Err(Error::Config(format!("template `{tpl}` must not contain placeholders")));
            }
        }
        let schema = self.schema()?;
        for (slot, list) in &t.slot_specific {
            if schema.slot(slot).is_none() {
                return Err(Error::Config(format!("template group names unknown slot `{slot}`")));
            }
            for tpl in list {
                check_template(tpl, &["value"])?;
            }
        }
        Ok(schema)
    }
}

/// Generated dialogs and the schema they follow.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub schema: Arc<Schema>,
    pub dialogs: Vec<Dialog>,
}

impl SyntheticData {
    pub fn corpus(&self, split: Split) -> Result<Corpus> {
        Corpus::from_dialogs(&self.dialogs, self.schema.clone(), split)
    }
}

struct Generator<'a> {
    config: &'a SynthConfig,
    schema: &'a Schema,
    /// Other slots sharing at least one value, per slot.
    compatible: BTreeMap<&'a str, Vec<&'a str>>,
}

enum Kind {
    Chitchat,
    Dontcare,
    Multi,
    Indirect,
    Change,
    Direct,
}

impl<'a> Generator<'a> {
    fn new(config: &'a SynthConfig, schema: &'a Schema) -> Self {
        let mut compatible = BTreeMap::new();
        for a in schema.slots() {
            let va: BTreeSet<&String> = a.value_set.iter().collect();
            let others = schema
                .slots()
                .iter()
                .filter(|b| b.name != a.name && b.value_set.iter().any(|v| va.contains(v)))
                .map(|b| b.name.as_str())
                .collect();
            compatible.insert(a.name.as_str(), others);
        }
        Self { config, schema, compatible }
    }

    fn choose<'b>(&self, r: &mut Rng, xs: &'b [String]) -> &'b str {
        xs.choose(r).map(String::as_str).unwrap_or("")
    }

    /// A slot of the active domains not yet in `exclude`, biased by the named-entity rate.
    fn pick_slot(&self, r: &mut Rng, domains: &[&str], exclude: &BTreeSet<&str>) -> Option<&'a SlotSpec> {
        let open: Vec<&SlotSpec> = self
            .schema
            .slots()
            .iter()
            .filter(|s| domains.contains(&s.domain.as_str()) && !exclude.contains(s.name.as_str()))
            .collect();
        let (ne, plain): (Vec<&SlotSpec>, Vec<&SlotSpec>) = open.into_iter().partition(|s| s.is_named_entity);
        let want_ne = r.gen_bool(self.config.named_entity_rate);
        let pool = if (want_ne && !ne.is_empty()) || plain.is_empty() { ne } else { plain };
        let slot: &SlotSpec = pool.choose(r).copied()?;
        self.schema.slot(&slot.name)
    }

    fn word(&self, r: &mut Rng, slot: &SlotSpec) -> String {
        self.choose(r, &slot.name_words).to_string()
    }

    fn direct(&self, r: &mut Rng, slot: &SlotSpec, value: &str) -> String {
        let mut pool: Vec<&String> = self.config.templates.direct.iter().collect();
        if let Some(extra) = self.config.templates.slot_specific.get(&slot.name) {
            pool.extend(extra);
        }
        let tpl = pool.choose(r).copied().map(String::as_str).unwrap_or("{value}");
        let word = self.word(r, slot);
        fill(tpl, &[("word", &word), ("value", value), ("domain", &slot.domain)])
    }

    fn kind(&self, r: &mut Rng, t: usize) -> Kind {
        let c = self.config;
        let x: f64 = r.gen();
        let mut acc = 0.0;
        for (rate, kind) in [
            (if t > 1 { c.chitchat_rate } else { 0.0 }, Kind::Chitchat),
            (c.dontcare_rate, Kind::Dontcare),
            (c.multi_slot_rate, Kind::Multi),
            (c.indirection_rate, Kind::Indirect),
            (if t > 1 { c.change_rate } else { 0.0 }, Kind::Change),
        ] {
            acc += rate;
            if x < acc {
                return kind;
            }
        }
        Kind::Direct
    }

    fn dialog(&self, r: &mut Rng, id: String) -> Dialog {
        let c = self.config;
        let tpl = &c.templates;
        let n_domains = if self.schema.domains().len() > 1 && r.gen_bool(0.4) { 2 } else { 1 };
        let mut names: Vec<&str> = self.schema.domains().iter().map(String::as_str).collect();
        names.shuffle(r);
        let domains: Vec<&str> = names.into_iter().take(n_domains).collect();
        let n_turns = r.gen_range(c.min_turns..=c.max_turns);
        let mut discourse = SlotValues::new();
        let mut turns = Vec::with_capacity(n_turns);
        for t in 1..=n_turns {
            let mut system = if t == 1 { String::new() } else { self.choose(r, &tpl.acks).to_string() };
            let mut state = SlotValues::new();
            let mentioned: BTreeSet<&str> = discourse.keys().map(String::as_str).collect();
            let user = match self.kind(r, t) {
                Kind::Chitchat => self.choose(r, &tpl.chitchat).to_string(),
                Kind::Dontcare => match self.pick_slot(r, &domains, &mentioned) {
                    Some(slot) => {
                        state.insert(slot.name.clone(), String::from(DONTCARE));
                        let word = self.word(r, slot);
                        fill(self.choose(r, &tpl.dontcare), &[("word", &word), ("domain", &slot.domain)])
                    }
                    None => self.choose(r, &tpl.chitchat).to_string(),
                },
                Kind::Multi => {
                    let a = self.pick_slot(r, &domains, &mentioned);
                    let mut ex = mentioned.clone();
                    if let Some(a) = a {
                        ex.insert(a.name.as_str());
                    }
                    let b = self.pick_slot(r, &domains, &ex);
                    match (a, b) {
                        (Some(a), Some(b)) => {
                            let (va, vb) = (self.choose(r, &a.value_set), self.choose(r, &b.value_set));
                            state.insert(a.name.clone(), va.to_string());
                            state.insert(b.name.clone(), vb.to_string());
                            let (wa, wb) = (self.word(r, a), self.word(r, b));
                            fill(
                                self.choose(r, &tpl.multi),
                                &[("word", &wa), ("value", va), ("word2", &wb), ("value2", vb), ("domain", &a.domain)],
                            )
                        }
                        (Some(a), None) => {
                            let v = self.choose(r, &a.value_set);
                            state.insert(a.name.clone(), v.to_string());
                            self.direct(r, a, v)
                        }
                        _ => self.choose(r, &tpl.chitchat).to_string(),
                    }
                }
                Kind::Indirect => {
                    let slot = self.pick_slot(r, &domains, &mentioned);
                    let reference = slot.and_then(|s| {
                        let held: Vec<(&str, &String)> = self.compatible[s.name.as_str()]
                            .iter()
                            .filter_map(|o| discourse.get(*o).map(|v| (*o, v)))
                            .filter(|(_, v)| *v != DONTCARE && s.value_set.contains(v))
                            .collect();
                        held.choose(r).map(|(o, v)| (*o, (*v).clone()))
                    });
                    match (slot, reference) {
                        (Some(s), Some((other, v))) if r.gen_bool(0.5) => {
                            let other = self.schema.slot(other).expect("compatible slots exist");
                            let refword = format!("{} {}", other.domain, self.word(r, other));
                            state.insert(s.name.clone(), v);
                            let word = self.word(r, s);
                            fill(self.choose(r, &tpl.reference), &[("word", &word), ("ref", &refword), ("domain", &s.domain)])
                        }
                        (Some(s), _) if t > 1 => {
                            let v = self.choose(r, &s.value_set);
                            let word = self.word(r, s);
                            system = fill(self.choose(r, &tpl.offer), &[("word", &word), ("value", v), ("domain", &s.domain)]);
                            state.insert(s.name.clone(), v.to_string());
                            self.choose(r, &tpl.accept).to_string()
                        }
                        (Some(s), _) => {
                            let v = self.choose(r, &s.value_set);
                            state.insert(s.name.clone(), v.to_string());
                            self.direct(r, s, v)
                        }
                        _ => self.choose(r, &tpl.chitchat).to_string(),
                    }
                }
                Kind::Change => {
                    let held: Vec<&String> = discourse.keys().collect();
                    let target = held.choose(r).and_then(|s| self.schema.slot(s));
                    match target {
                        Some(s) if s.value_set.len() > 1 => {
                            let old = &discourse[&s.name];
                            let alts: Vec<String> = s.value_set.iter().filter(|v| *v != old).cloned().collect();
                            let v = self.choose(r, &alts).to_string();
                            let word = self.word(r, s);
                            let text = fill(self.choose(r, &tpl.change), &[("word", &word), ("value", &v), ("domain", &s.domain)]);
                            state.insert(s.name.clone(), v);
                            text
                        }
                        _ => self.choose(r, &tpl.chitchat).to_string(),
                    }
                }
                Kind::Direct => match self.pick_slot(r, &domains, &mentioned) {
                    Some(s) => {
                        let v = self.choose(r, &s.value_set);
                        state.insert(s.name.clone(), v.to_string());
                        self.direct(r, s, v)
                    }
                    None => self.choose(r, &tpl.chitchat).to_string(),
                },
            };
            let user = if !tpl.fillers.is_empty() && r.gen_bool(c.filler_rate) {
                format!("{} . {user}", self.choose(r, &tpl.fillers))
            } else {
                user
            };
            if t > 1 && system.is_empty() {
                system = String::from("ok .");
            }
            for (k, v) in &state {
                discourse.insert(k.clone(), v.clone());
            }
            turns.push(Turn::new(t, tokenize(&system), tokenize(&user), state));
        }
        Dialog {
            dialog_id: id,
            turns,
            synthetic: c.synthetic,
        }
    }
}

const TAG_DIALOG: u64 = 0x5e7;

/// Deterministic in `(config, seed)`. Each dialog draws from its own stream.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<SyntheticData> {
    let schema = config.validate()?;
    let generator = Generator::new(config, &schema);
    let width = format!("{}", config.dialogs.saturating_sub(1)).len().max(4);
    let dialogs = (0..config.dialogs)
        .map(|i| {
            let mut r = rng::rng(seed, &[TAG_DIALOG, i as u64]);
            generator.dialog(&mut r, format!("{}-{:0width$}", config.id_prefix, i))
        })
        .collect();
    Ok(SyntheticData {
        schema: Arc::new(schema),
        dialogs,
    })
}
