//! The pluggable model contract, prediction and evaluation.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::corpus::{accumulate_state, Corpus, DialogExample, SlotValues};
use crate::error::{Error, Result};
use crate::rng;
use crate::scheduler::{LogEntry, Phase, StopCause, TrainingLog};
use crate::schema::{Schema, NONE};

/// Result of one pass over a training set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Anything trainable that can take part in scoring, scheduling and review.
///
/// Implementations must share no mutable state between instances so that
/// independent instances can train concurrently.
pub trait ModelOracle {
    /// Trains for one pass over `examples` in the given order. An empty
    /// list is a no-op returning zero loss.
    fn fit_epoch(&mut self, examples: &[&DialogExample], seed: u64) -> EpochStats;

    /// Turn-level state predicted for the current turn. Deterministic for
    /// fixed parameters.
    fn predict_turn(&self, example: &DialogExample) -> SlotValues;

    /// Finite, non-negative training loss of one example.
    fn example_loss(&self, example: &DialogExample) -> f64;

    /// A fresh, untrained instance with the same configuration.
    fn clone_untrained(&self, seed: u64) -> Self
    where
        Self: Sized;

    /// Informs the model of the current curriculum stage (`None` outside stages).
    fn set_stage(&mut self, _stage: Option<usize>) {}
}

/// Predicted states for one example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub example_id: String,
    pub turn_state: SlotValues,
    /// Accumulation of the predicted turn states of turns `1..=t`.
    pub discourse_state: SlotValues,
}

/// Predicts every turn of the example's context and accumulates them.
pub fn predict_example<M: ModelOracle + ?Sized>(model: &M, example: &DialogExample, schema: &Schema) -> Result<Prediction> {
    let t = example.turn_number();
    let mut discourse = SlotValues::new();
    let mut turn_state = SlotValues::new();
    for j in 1..=t {
        let prefix = if j == t { None } else { Some(example.prefix(j)) };
        turn_state = model.predict_turn(prefix.as_ref().unwrap_or(example));
        discourse = accumulate_state(&discourse, &turn_state, schema)?;
    }
    Ok(Prediction {
        example_id: String::from(example.example_id()),
        turn_state,
        discourse_state: discourse,
    })
}

pub fn predict_corpus<M: ModelOracle + ?Sized>(model: &M, corpus: &Corpus) -> Result<Vec<Prediction>> {
    corpus
        .iter()
        .map(|ex| predict_example(model, ex, corpus.schema()))
        .collect()
}

/// Joint goal accuracy: the fraction of examples whose whole discourse
/// state is predicted exactly.
pub fn jga(predictions: &[Prediction], gold: &Corpus) -> Result<f64> {
    let ids: BTreeSet<&str> = predictions.iter().map(|p| p.example_id.as_str()).collect();
    if ids.len() != predictions.len() || ids.len() != gold.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions ({} distinct) for {} gold examples",
            predictions.len(),
            ids.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Evaluation(String::from("empty gold corpus")));
    }
    let mut correct = 0usize;
    for p in predictions {
        let g = gold
            .get(&p.example_id)
            .ok_or_else(|| Error::Evaluation(format!("no gold example `{}`", p.example_id)))?;
        if &p.discourse_state == g.discourse_state() {
            correct += 1;
        }
    }
    Ok(correct as f64 / gold.len() as f64)
}

/// Fraction of gold mentioned slots (value not `none`) predicted exactly;
/// 1.0 when nothing is mentioned.
pub fn mentioned_slot_accuracy(pred: &SlotValues, gold: &SlotValues) -> f64 {
    let mentioned: Vec<(&String, &String)> = gold.iter().filter(|(_, v)| v.as_str() != NONE).collect();
    if mentioned.is_empty() {
        return 1.0;
    }
    let hits = mentioned.iter().filter(|(k, v)| pred.get(*k) == Some(*v)).count();
    hits as f64 / mentioned.len() as f64
}

/// Random-order training on the full set, logged like a curriculum run.
pub fn train_baseline<M: ModelOracle>(
    model: &mut M,
    examples: &[DialogExample],
    epochs: usize,
    seed: u64,
) -> Result<TrainingLog> {
    if epochs == 0 {
        return Err(Error::Config(String::from("baseline training needs at least one epoch")));
    }
    let mut log = TrainingLog::default();
    let mut order: Vec<&DialogExample> = examples.iter().collect();
    model.set_stage(None);
    for epoch in 0..epochs {
        order.shuffle(&mut rng::rng(seed, &[0xba5e, epoch as u64]));
        let stats = model.fit_epoch(&order, rng::derive_seed(seed, &[0xf17, epoch as u64]));
        log.push(LogEntry {
            phase: Phase::Baseline,
            stage: None,
            epoch: epoch + 1,
            mean_loss: stats.mean_loss,
            steps: stats.step_losses.len(),
            converged: false,
            cause: if epoch + 1 == epochs { StopCause::Budget } else { StopCause::Continue },
            set_size: order.len(),
            augmented: 0,
            step_losses: stats.step_losses,
        });
    }
    Ok(log)
}


#[cfg(test)]
mod tests {
    use super::testing::Memorizer;
    use super::*;
    use crate::corpus::fixtures::*;
    use crate::corpus::Split;
    use crate::schema::fixtures::schema;
    use alloc::string::ToString;
    use alloc::sync::Arc;
    use alloc::vec;

    #[test]
    fn mentioned_accuracy_cases() {
        let gold = state(&[("a", "x"), ("b", "y")]);
        assert_eq!(mentioned_slot_accuracy(&state(&[("a", "x")]), &gold), 0.5);
        assert_eq!(mentioned_slot_accuracy(&state(&[("z", "q")]), &SlotValues::new()), 1.0);
        let dc = state(&[("a", "dontcare")]);
        assert_eq!(mentioned_slot_accuracy(&dc, &dc), 1.0);
        assert_eq!(mentioned_slot_accuracy(&SlotValues::new(), &gold), 0.0);
    }

    fn corpus4() -> Corpus {
        let s = Arc::new(schema());
        let exs = vec![
            example("a", vec![turn(1, "", "north area", &[("hotel-area", "north")])], &s),
            example("b", vec![turn(1, "", "east area", &[("hotel-area", "east")])], &s),
            example("c", vec![turn(1, "", "hello", &[])], &s),
            example("d", vec![turn(1, "", "italian food", &[("restaurant-food", "italian")])], &s),
        ];
        Corpus::new(exs, s, Split::Valid).unwrap()
    }

    fn pred(id: &str, d: SlotValues) -> Prediction {
        Prediction {
            example_id: id.to_string(),
            turn_state: d.clone(),
            discourse_state: d,
        }
    }

    #[test]
    fn jga_counts_exact_discourse_matches() {
        let gold = corpus4();
        let perfect: Vec<Prediction> = gold.iter().map(|e| pred(e.example_id(), e.discourse_state().clone())).collect();
        assert_eq!(jga(&perfect, &gold).unwrap(), 1.0);
        let mut three = perfect.clone();
        three[0].discourse_state = state(&[("hotel-area", "south")]);
        assert_eq!(jga(&three, &gold).unwrap(), 0.75);
        // empty gold state matched by empty prediction is correct
        assert!(gold.get("c").unwrap().discourse_state().is_empty());
        let mut bad = perfect.clone();
        bad[1].example_id = "zz".to_string();
        assert!(jga(&bad, &gold).is_err());
        assert!(jga(&perfect[..3], &gold).is_err());
    }

    #[test]
    fn predict_example_accumulates_prefix_predictions() {
        let s = schema();
        let ex = example(
            "d",
            vec![
                turn(1, "", "north area", &[("hotel-area", "north")]),
                turn(2, "ok", "a taxi", &[("taxi-departure", "nandos")]),
            ],
            &s,
        );
        let mut m = Memorizer::default();
        m.fit_epoch(&[&ex.prefix(1), &ex], 0);
        let p = predict_example(&m, &ex, &s).unwrap();
        assert_eq!(&p.discourse_state, ex.discourse_state());
        assert_eq!(&p.turn_state, ex.turn_state());
    }

    #[test]
    fn baseline_rejects_zero_epochs_and_logs_each_epoch() {
        let c = corpus4();
        let mut m = Memorizer::default();
        assert!(train_baseline(&mut m, c.examples(), 0, 1).is_err());
        let log = train_baseline(&mut m, c.examples(), 3, 1).unwrap();
        assert_eq!(log.entries().len(), 3);
        assert_eq!(log.epochs_total(), 3);
        assert_eq!(log.entries()[2].cause, StopCause::Budget);
        assert_eq!(jga(&predict_corpus(&m, &c).unwrap(), &c).unwrap(), 1.0);
    }
}
