//! Hybrid difficulty scoring: four rule factors, a cross-validated
//! model-accuracy term, and their weighted fusion.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::{Corpus, DialogExample};
use crate::error::{Error, Result};
use crate::model::{mentioned_slot_accuracy, train_baseline, ModelOracle};
use crate::rng;
use crate::schema::Schema;

/// Saturation points of the four rule factors: turn number, current-turn
/// tokens, named entities in the discourse state, changed slots.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct FactorMaxima(pub [f64; 4]);

impl Default for FactorMaxima {
    fn default() -> Self {
        Self([7.0, 50.0, 4.0, 6.0])
    }
}

impl FactorMaxima {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|&m| m > 0.0 && m.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("factor maxima must be positive, got {:?}", self.0)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleFactors {
    pub turn_number: usize,
    pub token_count: usize,
    pub named_entity_count: usize,
    pub changed_slot_count: usize,
    /// Each raw factor divided by its maximum, clamped to 1.
    pub normalized: [f64; 4],
}

impl RuleFactors {
    pub fn raw(&self) -> [f64; 4] {
        [
            self.turn_number as f64,
            self.token_count as f64,
            self.named_entity_count as f64,
            self.changed_slot_count as f64,
        ]
    }
}

pub fn normalize_factor(raw: f64, max: f64) -> f64 {
    if raw >= max {
        1.0
    } else {
        raw / max
    }
}

pub fn rule_factors(example: &DialogExample, schema: &Schema, maxima: &FactorMaxima) -> RuleFactors {
    let named_entity_count = example
        .discourse_state()
        .keys()
        .filter(|s| schema.slot(s).is_some_and(|spec| spec.is_named_entity))
        .count();
    let prev = example.prev_discourse_state();
    let changed_slot_count = example
        .turn_state()
        .iter()
        .filter(|(slot, value)| prev.get(*slot) != Some(*value))
        .count();
    let mut factors = RuleFactors {
        turn_number: example.turn_number(),
        token_count: example.current().token_count(),
        named_entity_count,
        changed_slot_count,
        normalized: [0.0; 4],
    };
    let raw = factors.raw();
    for i in 0..4 {
        factors.normalized[i] = normalize_factor(raw[i], maxima.0[i]);
    }
    factors
}

/// Orientation of the model term in the hybrid sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ModelTerm {
    /// `1 - accuracy`, so that every term grows with difficulty.
    #[default]
    Inverted,
    /// Accuracy as is.
    Raw,
}

/// Fusion weights: `term_weights[0]` for the model term, `term_weights[1..]` for the rule factors.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ScorerWeights {
    pub term_weights: [f64; 5],
    pub model_term: ModelTerm,
}

impl Default for ScorerWeights {
    fn default() -> Self {
        Self {
            term_weights: [0.2; 5],
            model_term: ModelTerm::Inverted,
        }
    }
}

impl ScorerWeights {
    pub fn new(term_weights: [f64; 5]) -> Result<Self> {
        let w = Self {
            term_weights,
            model_term: ModelTerm::Inverted,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.term_weights.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config(format!("weights must be non-negative, got {:?}", self.term_weights)));
        }
        let sum: f64 = self.term_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("weights must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// Whether the model term contributes at all.
    pub fn uses_model(&self) -> bool {
        self.term_weights[0] > 0.0
    }
}

/// Weighted fusion of the model term and the normalized rule factors.
pub fn hybrid_score(rule: &RuleFactors, model_mean: f64, weights: &ScorerWeights) -> Result<f64> {
    weights.validate()?;
    if !(0.0..=1.0).contains(&model_mean) {
        return Err(Error::Config(format!("model mean {model_mean} is outside [0, 1]")));
    }
    let model_term = match weights.model_term {
        ModelTerm::Inverted => 1.0 - model_mean,
        ModelTerm::Raw => model_mean,
    };
    let mut score = weights.term_weights[0] * model_term;
    for i in 0..4 {
        score += weights.term_weights[i + 1] * rule.normalized[i];
    }
    Ok(score.clamp(0.0, 1.0))
}

/// Settings of the cross-validated model term.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ScoringConfig {
    /// Number of folds.
    pub k: usize,
    /// Independently seeded models per fold.
    pub ensemble: usize,
    /// Training epochs of each fold model.
    pub epochs: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            k: 5,
            ensemble: 6,
            epochs: 3,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self, corpus_len: usize) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.k > corpus_len {
            return Err(Error::Config(format!("k = {} exceeds the corpus size {corpus_len}", self.k)));
        }
        if self.ensemble == 0 || self.epochs == 0 {
            return Err(Error::Config(String::from("ensemble and epochs must be positive")));
        }
        Ok(())
    }
}

/// Fold of every example. Examples are ordered by a stable hash of their id
/// and dealt round-robin, so fold sizes differ by at most one and do not
/// depend on corpus order.
pub fn assign_folds<'a, I>(ids: I, k: usize) -> BTreeMap<String, usize>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut keyed: Vec<(u64, &str)> = ids.into_iter().map(|id| (rng::stable_hash(id), id)).collect();
    keyed.sort();
    keyed
        .into_iter()
        .enumerate()
        .map(|(i, (_, id))| (String::from(id), i % k))
        .collect()
}

/// Bookkeeping of one (ensemble member, fold) training run.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldRun {
    pub member: usize,
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub held_out: Vec<(String, f64)>,
}

/// Per-example model scores plus the runs that produced them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelScoring {
    /// One score per ensemble member, in member order.
    pub scores: BTreeMap<String, Vec<f64>>,
    pub runs: Vec<FoldRun>,
}

/// All (member, fold) pairs, member-major.
pub fn fold_jobs(config: &ScoringConfig) -> Vec<(usize, usize)> {
    (0..config.ensemble)
        .flat_map(|m| (0..config.k).map(move |f| (m, f)))
        .collect()
}

const TAG_MEMBER: u64 = 0x3e3b;
const TAG_FOLD: u64 = 0xf01d;

/// Trains one model on every fold but `fold` and scores the held-out examples.
pub fn run_fold<M: ModelOracle>(
    prototype: &M,
    corpus: &Corpus,
    folds: &BTreeMap<String, usize>,
    config: &ScoringConfig,
    member: usize,
    fold: usize,
    seed: u64,
) -> Result<FoldRun> {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for ex in corpus {
        if folds[ex.example_id()] == fold {
            held.push(ex);
        } else {
            train.push(ex.clone());
        }
    }
    let mut model = prototype.clone_untrained(rng::derive_seed(seed, &[TAG_MEMBER, member as u64]));
    train_baseline(
        &mut model,
        &train,
        config.epochs,
        rng::derive_seed(seed, &[TAG_FOLD, member as u64, fold as u64]),
    )?;
    let held_out = held
        .iter()
        .map(|ex| {
            let pred = model.predict_turn(ex);
            (String::from(ex.example_id()), mentioned_slot_accuracy(&pred, ex.turn_state()))
        })
        .collect();
    Ok(FoldRun {
        member,
        fold,
        train_ids: train.iter().map(|e| String::from(e.example_id())).collect(),
        held_out,
    })
}

/// Collects fold runs (in any order) into per-example score lists.
pub fn merge_fold_runs(mut runs: Vec<FoldRun>, corpus: &Corpus, config: &ScoringConfig) -> Result<ModelScoring> {
    runs.sort_by_key(|r| (r.member, r.fold));
    let mut scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in &runs {
        for (id, s) in &run.held_out {
            scores.entry(id.clone()).or_default().push(*s);
        }
    }
    for ex in corpus {
        let n = scores.get(ex.example_id()).map_or(0, Vec::len);
        if n != config.ensemble {
            return Err(Error::Data(format!(
                "example `{}` received {n} model scores, expected {}",
                ex.example_id(),
                config.ensemble
            )));
        }
    }
    Ok(ModelScoring { scores, runs })
}

/// Cross-validated accuracies: every example is scored once per ensemble
/// member, each time by a model that never trained on it.
pub fn model_difficulty<M: ModelOracle>(
    corpus: &Corpus,
    prototype: &M,
    config: &ScoringConfig,
    seed: u64,
) -> Result<ModelScoring> {
    config.validate(corpus.len())?;
    let folds = assign_folds(corpus.iter().map(DialogExample::example_id), config.k);
    let runs = fold_jobs(config)
        .into_iter()
        .map(|(m, f)| run_fold(prototype, corpus, &folds, config, m, f, seed))
        .collect::<Result<Vec<_>>>()?;
    merge_fold_runs(runs, corpus, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyRecord {
    pub example_id: String,
    pub rule: RuleFactors,
    pub model_scores: Vec<f64>,
    /// Mean of `model_scores`; `None` when the model term was skipped.
    pub model_mean: Option<f64>,
    pub hybrid: f64,
}

/// Builds records from rule factors and (optionally) finished model scores.
pub fn combine_scores(
    corpus: &Corpus,
    scoring: Option<&ModelScoring>,
    weights: &ScorerWeights,
    maxima: &FactorMaxima,
) -> Result<Vec<DifficultyRecord>> {
    weights.validate()?;
    maxima.validate()?;
    if weights.uses_model() && scoring.is_none() {
        return Err(Error::Config(String::from("model weight is positive but no model scores were given")));
    }
    corpus
        .iter()
        .map(|ex| {
            let rule = rule_factors(ex, corpus.schema(), maxima);
            let model_scores = match scoring {
                Some(s) if weights.uses_model() => s.scores.get(ex.example_id()).cloned().ok_or_else(|| {
                    Error::Data(format!("no model scores for `{}`", ex.example_id()))
                })?,
                _ => Vec::new(),
            };
            let model_mean = if model_scores.is_empty() {
                None
            } else {
                Some(model_scores.iter().sum::<f64>() / model_scores.len() as f64)
            };
            let hybrid = hybrid_score(&rule, model_mean.unwrap_or(1.0), weights)?;
            Ok(DifficultyRecord {
                example_id: String::from(ex.example_id()),
                rule,
                model_scores,
                model_mean,
                hybrid,
            })
        })
        .collect()
}

/// Scores every example. Model runs are skipped when `term_weights[0]` is zero.
pub fn score_corpus<M: ModelOracle>(
    corpus: &Corpus,
    prototype: &M,
    weights: &ScorerWeights,
    maxima: &FactorMaxima,
    config: &ScoringConfig,
    seed: u64,
) -> Result<Vec<DifficultyRecord>> {
    weights.validate()?;
    let scoring = if weights.uses_model() {
        Some(model_difficulty(corpus, prototype, config, seed)?)
    } else {
        None
    };
    combine_scores(corpus, scoring.as_ref(), weights, maxima)
}
