//! On-disk formats: dialogs, schemas and the line-delimited records every
//! command emits.
//!
//! Every line-delimited file holds one JSON object per line. Maps are
//! ordered, so identical inputs serialize to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use saclog_core::corpus::{accumulate_state, Dialog, SlotValues, Turn};
use saclog_core::difficulty::{DifficultyRecord, RuleFactors};
use saclog_core::model::Prediction;
use saclog_core::review::{AugmentationRecord, Edit, Technique};
use saclog_core::schema::{Schema, SlotSpec, NONE};
use saclog_core::text::{detokenize, tokenize};

use crate::error::{PipelineError, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

pub fn to_jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    write_bytes(path, to_jsonl(records).as_bytes())
}

/// Parses every non-blank line; errors carry `file:line`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = read_text(path)?;
    parse_jsonl(&text, &path.display().to_string())
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, name: &str) -> Result<Vec<(usize, T)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| PipelineError::Data(format!("{name}:{}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("values serialize");
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotRecord {
    pub name: String,
    pub domain: String,
    #[serde(default)]
    pub value_set: Vec<String>,
    pub name_words: Vec<String>,
    #[serde(default)]
    pub is_named_entity: bool,
    #[serde(default)]
    pub free_form: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaRecord {
    pub domains: Vec<String>,
    pub slots: Vec<SlotRecord>,
}

impl SchemaRecord {
    pub fn from_schema(schema: &Schema) -> Self {
        Self {
            domains: schema.domains().to_vec(),
            slots: schema
                .slots()
                .iter()
                .map(|s| SlotRecord {
                    name: s.name.clone(),
                    domain: s.domain.clone(),
                    value_set: s.value_set.clone(),
                    name_words: s.name_words.clone(),
                    is_named_entity: s.is_named_entity,
                    free_form: s.free_form,
                })
                .collect(),
        }
    }

    pub fn into_schema(self) -> saclog_core::Result<Schema> {
        let slots = self
            .slots
            .into_iter()
            .map(|s| SlotSpec {
                name: s.name,
                domain: s.domain,
                value_set: s.value_set,
                name_words: s.name_words,
                is_named_entity: s.is_named_entity,
                free_form: s.free_form,
            })
            .collect();
        Schema::new(self.domains, slots)
    }
}

/// A malformed schema file is a data error, whatever the core calls it.
pub fn read_schema(path: &Path) -> Result<Schema> {
    let record: SchemaRecord = read_json(path)?;
    record
        .into_schema()
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

pub fn write_schema(path: &Path, schema: &Schema) -> Result<()> {
    write_json(path, &SchemaRecord::from_schema(schema))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRecord {
    pub system: String,
    pub user: String,
    #[serde(default)]
    pub turn_state: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discourse_state: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogRecord {
    pub dialog_id: String,
    pub turns: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

impl DialogRecord {
    /// Writes `none` back for explicitly cleared slots and stores the
    /// recomputed discourse state on every turn.
    pub fn from_dialog(dialog: &Dialog, schema: &Schema) -> saclog_core::Result<Self> {
        let mut state = SlotValues::new();
        let mut turns = Vec::with_capacity(dialog.turns.len());
        for t in &dialog.turns {
            state = accumulate_state(&state, &t.state, schema)?;
            let mut turn_state = t.state.clone();
            for slot in &t.cleared {
                turn_state.insert(slot.clone(), NONE.to_string());
            }
            turns.push(TurnRecord {
                system: detokenize(&t.system),
                user: detokenize(&t.user),
                turn_state,
                discourse_state: Some(state.clone()),
            });
        }
        Ok(Self {
            dialog_id: dialog.dialog_id.clone(),
            turns,
            synthetic: dialog.synthetic,
        })
    }
}

/// Dialogs of one file plus the discourse-state mismatches that were
/// overruled by recomputation.
#[derive(Debug, Clone, Default)]
pub struct LoadedDialogs {
    pub dialogs: Vec<Dialog>,
    pub warnings: Vec<String>,
}

pub fn parse_dialogs(text: &str, name: &str, schema: &Schema) -> Result<LoadedDialogs> {
    let mut out = LoadedDialogs::default();
    let mut ids = BTreeMap::new();
    for (line, record) in parse_jsonl::<DialogRecord>(text, name)? {
        let here = format!("{name}:{line} (dialog `{}`)", record.dialog_id);
        if let Some(first) = ids.insert(record.dialog_id.clone(), line) {
            return Err(PipelineError::Data(format!("{here}: dialog id already used on line {first}")));
        }
        if record.turns.is_empty() {
            return Err(PipelineError::Data(format!("{here}: dialog has no turns")));
        }
        let mut turns = Vec::with_capacity(record.turns.len());
        let mut state = SlotValues::new();
        for (i, t) in record.turns.iter().enumerate() {
            let turn = Turn::new(i + 1, tokenize(&t.system), tokenize(&t.user), t.turn_state.clone());
            for slot in &turn.cleared {
                schema.require(slot).map_err(|e| PipelineError::from(e).at(&here))?;
            }
            state = accumulate_state(&state, &turn.state, schema).map_err(|e| PipelineError::from(e).at(&here))?;
            if let Some(given) = &t.discourse_state {
                let given: SlotValues = given.iter().filter(|(_, v)| *v != NONE).map(|(k, v)| (k.clone(), v.clone())).collect();
                if given != state {
                    let msg = format!("{here}: turn {} discourse_state differs from the accumulated state; using the accumulated state", i + 1);
                    log::warn!("{msg}");
                    out.warnings.push(msg);
                }
            }
            turns.push(turn);
        }
        let dialog = Dialog {
            dialog_id: record.dialog_id,
            turns,
            synthetic: record.synthetic,
        };
        dialog.examples(schema).map_err(|e| PipelineError::from(e).at(&here))?;
        out.dialogs.push(dialog);
    }
    Ok(out)
}

pub fn read_dialogs(path: &Path, schema: &Schema) -> Result<LoadedDialogs> {
    parse_dialogs(&read_text(path)?, &path.display().to_string(), schema)
}

pub fn dialogs_to_jsonl(dialogs: &[Dialog], schema: &Schema) -> Result<String> {
    let records = dialogs
        .iter()
        .map(|d| DialogRecord::from_dialog(d, schema))
        .collect::<saclog_core::Result<Vec<_>>>()?;
    Ok(to_jsonl(records))
}

pub fn write_dialogs(path: &Path, dialogs: &[Dialog], schema: &Schema) -> Result<()> {
    write_bytes(path, dialogs_to_jsonl(dialogs, schema)?.as_bytes())
}

/// One scored example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreLine {
    pub example_id: String,
    pub rule_raw: [usize; 4],
    pub rule_norm: [f64; 4],
    pub model_scores: Vec<f64>,
    pub model_mean: Option<f64>,
    pub hybrid: f64,
}

impl From<&DifficultyRecord> for ScoreLine {
    fn from(r: &DifficultyRecord) -> Self {
        Self {
            example_id: r.example_id.clone(),
            rule_raw: [r.rule.turn_number, r.rule.token_count, r.rule.named_entity_count, r.rule.changed_slot_count],
            rule_norm: r.rule.normalized,
            model_scores: r.model_scores.clone(),
            model_mean: r.model_mean,
            hybrid: r.hybrid,
        }
    }
}

impl From<ScoreLine> for DifficultyRecord {
    fn from(s: ScoreLine) -> Self {
        let [turn_number, token_count, named_entity_count, changed_slot_count] = s.rule_raw;
        Self {
            example_id: s.example_id,
            rule: RuleFactors {
                turn_number,
                token_count,
                named_entity_count,
                changed_slot_count,
                normalized: s.rule_norm,
            },
            model_scores: s.model_scores,
            model_mean: s.model_mean,
            hybrid: s.hybrid,
        }
    }
}

pub fn read_scores(path: &Path) -> Result<Vec<DifficultyRecord>> {
    let lines = read_jsonl::<ScoreLine>(path)?;
    for (line, s) in &lines {
        if !(0.0..=1.0).contains(&s.hybrid) {
            return Err(PipelineError::Data(format!(
                "{}:{line}: hybrid score {} is outside [0, 1]",
                path.display(),
                s.hybrid
            )));
        }
    }
    Ok(lines.into_iter().map(|(_, s)| s.into()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLine {
    pub example_id: String,
    pub turn_state: SlotValues,
    pub discourse_state: SlotValues,
}

impl From<&Prediction> for PredictionLine {
    fn from(p: &Prediction) -> Self {
        Self {
            example_id: p.example_id.clone(),
            turn_state: p.turn_state.clone(),
            discourse_state: p.discourse_state.clone(),
        }
    }
}

/// Provenance of one augmented example. `new_id` is the dialog id of the
/// emitted dialog; its last turn is the augmented one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceLine {
    pub new_id: String,
    pub technique: Technique,
    pub source_ids: Vec<String>,
    pub diff: Edit,
}

impl From<&AugmentationRecord> for ProvenanceLine {
    fn from(r: &AugmentationRecord) -> Self {
        Self {
            new_id: r.example.example_id().to_string(),
            technique: r.technique,
            source_ids: r.source_ids.clone(),
            diff: r.edit.clone(),
        }
    }
}

/// The context of each augmented example as a dialog of its own.
pub fn augmented_dialogs(records: &[AugmentationRecord]) -> Vec<Dialog> {
    records
        .iter()
        .map(|r| Dialog {
            dialog_id: r.example.example_id().to_string(),
            turns: r.example.context().to_vec(),
            synthetic: true,
        })
        .collect()
}

/// Writes augmented dialogs and their provenance sidecar side by side.
pub fn write_augmentations(dialogs_path: &Path, provenance_path: &Path, records: &[AugmentationRecord], schema: &Schema) -> Result<()> {
    write_dialogs(dialogs_path, &augmented_dialogs(records), schema)?;
    write_jsonl(provenance_path, records.iter().map(ProvenanceLine::from))
}
