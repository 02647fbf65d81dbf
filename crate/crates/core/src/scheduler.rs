//! Baby-step curriculum: difficulty buckets, stagewise accumulation,
//! convergence monitoring and post-accumulation training.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::corpus::DialogExample;
use crate::difficulty::DifficultyRecord;
use crate::error::{Error, Result};
use crate::model::ModelOracle;
use crate::rng;

/// Bucket of a score in `[0, 1]` among `n` uniform intervals; 1.0 lands in the last one.
pub fn bucket_index(score: f64, n: usize) -> usize {
    let b = libm::floor(score * n as f64) as usize;
    b.min(n - 1)
}

/// Difficulty buckets, easiest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Curriculum {
    n_buckets: usize,
    buckets: Vec<Vec<String>>,
}

impl Curriculum {
    /// Distributes `(example_id, score)` pairs into `n` uniform score intervals.
    /// Within a bucket, examples are ordered by ascending (score, id).
    pub fn from_scores<'a, I>(scores: I, n: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        if n == 0 {
            return Err(Error::Config(String::from("bucket count must be at least 1")));
        }
        let mut buckets: Vec<Vec<(f64, &str)>> = vec![Vec::new(); n];
        for (id, score) in scores {
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::Config(format!("score {score} of `{id}` is outside [0, 1]")));
            }
            buckets[bucket_index(score, n)].push((score, id));
        }
        let buckets = buckets
            .into_iter()
            .map(|mut b| {
                b.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(y.1)));
                b.into_iter().map(|(_, id)| String::from(id)).collect()
            })
            .collect();
        Ok(Self { n_buckets: n, buckets })
    }

    pub fn n_buckets(&self) -> usize {
        self.n_buckets
    }

    pub fn buckets(&self) -> &[Vec<String>] {
        &self.buckets
    }

    /// Score interval `[lo, hi)` of bucket `b` (the last one is closed).
    pub fn boundaries(&self) -> Vec<(f64, f64)> {
        let n = self.n_buckets as f64;
        (0..self.n_buckets).map(|b| (b as f64 / n, (b + 1) as f64 / n)).collect()
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ids of the training set of stage `j`: buckets `0..=j`.
    pub fn stage_set(&self, j: usize) -> Vec<&str> {
        self.buckets[..=j].iter().flatten().map(String::as_str).collect()
    }
}

/// Buckets scored examples by hybrid score.
pub fn assign_buckets(records: &[DifficultyRecord], n: usize) -> Result<Curriculum> {
    Curriculum::from_scores(records.iter().map(|r| (r.example_id.as_str(), r.hybrid)), n)
}

/// When a stage stops: after `max_epochs_per_stage`, or once the last
/// `window_steps` step losses all sit at or below `loss_threshold` and have
/// stopped decreasing.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ConvergenceRule {
    pub max_epochs_per_stage: usize,
    pub loss_threshold: f64,
    pub window_steps: usize,
}

impl Default for ConvergenceRule {
    fn default() -> Self {
        Self {
            max_epochs_per_stage: 3,
            loss_threshold: 15.0,
            window_steps: 100,
        }
    }
}

impl ConvergenceRule {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs_per_stage == 0 || self.window_steps < 2 || !(self.loss_threshold > 0.0) {
            return Err(Error::Config(format!("invalid convergence rule {self:?}")));
        }
        Ok(())
    }
}

/// Least-squares slope of `ys` against their index.
///
/// Symmetric pairs are combined before summing, so a constant sequence has
/// a slope of exactly zero.
pub fn trend_slope(ys: &[f64]) -> f64 {
    let w = ys.len();
    if w < 2 {
        return 0.0;
    }
    let mut num = 0.0;
    for k in 0..w / 2 {
        let lever = (w - 1 - 2 * k) as f64 / 2.0;
        num += lever * (ys[w - 1 - k] - ys[k]);
    }
    let wf = w as f64;
    let denom = wf * (wf * wf - 1.0) / 12.0;
    num / denom
}

pub fn check_convergence(history: &[f64], rule: &ConvergenceRule) -> bool {
    if history.len() < rule.window_steps {
        return false;
    }
    let window = &history[history.len() - rule.window_steps..];
    window.iter().all(|&l| l <= rule.loss_threshold) && trend_slope(window) >= 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Phase {
    Warmup,
    Stage,
    Post,
    Baseline,
}

/// Why an epoch was the last of its phase, or `Continue`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StopCause {
    Continue,
    Converged,
    MaxEpochs,
    Budget,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LogEntry {
    pub phase: Phase,
    /// Bucket index for stage epochs.
    pub stage: Option<usize>,
    /// 1-based epoch within the phase (or stage).
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub converged: bool,
    pub cause: StopCause,
    /// Original examples in the training set.
    pub set_size: usize,
    /// Augmented examples in the training set.
    pub augmented: usize,
    pub step_losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn push(&mut self, entry: LogEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn epochs_total(&self) -> usize {
        self.entries.len()
    }

    pub fn from_entries(entries: Vec<LogEntry>) -> Self {
        Self { entries }
    }
}

/// Defaults: two full-data warm-up epochs, ten post-accumulation epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct CurriculumOptions {
    pub warmup_epochs: usize,
    pub post_epochs: usize,
    pub rule: ConvergenceRule,
}

impl Default for CurriculumOptions {
    fn default() -> Self {
        Self {
            warmup_epochs: 2,
            post_epochs: 10,
            rule: ConvergenceRule::default(),
        }
    }
}

/// Snapshot passed to hooks at the end of a stage epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochEvent {
    pub stage: usize,
    pub epoch: usize,
    pub converged: bool,
    pub mean_loss: f64,
}

/// Callbacks fired from the training loop. Returned examples join the
/// cumulative training set.
pub trait CurriculumHooks<M> {
    fn on_epoch_end(&mut self, _event: &EpochEvent, _model: &M, _training_set: &[&DialogExample]) -> Vec<DialogExample> {
        Vec::new()
    }

    /// Called once after the last stage, before post-accumulation epochs.
    fn before_post(&mut self, _model: &M, _training_set: &[&DialogExample]) -> Vec<DialogExample> {
        Vec::new()
    }
}

/// Hooks that do nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHooks;

impl<M> CurriculumHooks<M> for NoHooks {}

const TAG_WARMUP: u64 = 0x3a21;
const TAG_STAGE: u64 = 0x57a6;
const TAG_POST: u64 = 0x9057;
const TAG_FIT: u64 = 0xf17;

#[derive(Clone, Copy)]
enum Member {
    Base(usize),
    Extra(usize),
}

fn materialize<'a>(members: &[Member], base: &'a [&'a DialogExample], extra: &'a [DialogExample]) -> Vec<&'a DialogExample> {
    members
        .iter()
        .map(|m| match *m {
            Member::Base(i) => base[i],
            Member::Extra(i) => &extra[i],
        })
        .collect()
}

/// Runs warm-up, one stage per non-empty bucket, then post-accumulation
/// epochs on the full set. The model keeps its state across stages.
pub fn run_curriculum<M, H>(
    model: &mut M,
    examples: &[DialogExample],
    curriculum: &Curriculum,
    options: &CurriculumOptions,
    hooks: &mut H,
    seed: u64,
) -> Result<TrainingLog>
where
    M: ModelOracle,
    H: CurriculumHooks<M>,
{
    options.rule.validate()?;
    if curriculum.is_empty() {
        return Err(Error::Config(String::from("empty curriculum")));
    }
    let by_id: BTreeMap<&str, &DialogExample> = examples.iter().map(|e| (e.example_id(), e)).collect();
    let mut base: Vec<&DialogExample> = Vec::with_capacity(curriculum.len());
    let mut bucket_members: Vec<Vec<Member>> = Vec::with_capacity(curriculum.n_buckets());
    for bucket in curriculum.buckets() {
        let mut members = Vec::with_capacity(bucket.len());
        for id in bucket {
            let ex = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Data(format!("curriculum names unknown example `{id}`")))?;
            members.push(Member::Base(base.len()));
            base.push(ex);
        }
        bucket_members.push(members);
    }
    let full: Vec<Member> = (0..base.len()).map(Member::Base).collect();
    let mut extra: Vec<DialogExample> = Vec::new();
    let mut log = TrainingLog::default();

    model.set_stage(None);
    for epoch in 1..=options.warmup_epochs {
        let mut order = materialize(&full, &base, &extra);
        order.shuffle(&mut rng::rng(seed, &[TAG_WARMUP, epoch as u64]));
        let stats = model.fit_epoch(&order, rng::derive_seed(seed, &[TAG_FIT, TAG_WARMUP, epoch as u64]));
        log.push(LogEntry {
            phase: Phase::Warmup,
            stage: None,
            epoch,
            mean_loss: stats.mean_loss,
            steps: stats.step_losses.len(),
            converged: false,
            cause: if epoch == options.warmup_epochs { StopCause::Budget } else { StopCause::Continue },
            set_size: base.len(),
            augmented: 0,
            step_losses: stats.step_losses,
        });
    }

    let mut cumulative: Vec<Member> = Vec::with_capacity(base.len());
    let mut base_count = 0usize;
    for (stage, members) in bucket_members.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        cumulative.extend_from_slice(members);
        base_count += members.len();
        model.set_stage(Some(stage));
        let mut history: Vec<f64> = Vec::new();
        for epoch in 1..=options.rule.max_epochs_per_stage {
            let mut order = materialize(&cumulative, &base, &extra);
            order.shuffle(&mut rng::rng(seed, &[TAG_STAGE, stage as u64, epoch as u64]));
            let stats = model.fit_epoch(&order, rng::derive_seed(seed, &[TAG_FIT, TAG_STAGE, stage as u64, epoch as u64]));
            history.extend_from_slice(&stats.step_losses);
            let converged = check_convergence(&history, &options.rule);
            let cause = if converged {
                StopCause::Converged
            } else if epoch == options.rule.max_epochs_per_stage {
                StopCause::MaxEpochs
            } else {
                StopCause::Continue
            };
            log.push(LogEntry {
                phase: Phase::Stage,
                stage: Some(stage),
                epoch,
                mean_loss: stats.mean_loss,
                steps: stats.step_losses.len(),
                converged,
                cause,
                set_size: base_count,
                augmented: cumulative.len() - base_count,
                step_losses: stats.step_losses,
            });
            let event = EpochEvent {
                stage,
                epoch,
                converged,
                mean_loss: stats.mean_loss,
            };
            let set = materialize(&cumulative, &base, &extra);
            let added = hooks.on_epoch_end(&event, model, &set);
            for ex in added {
                cumulative.push(Member::Extra(extra.len()));
                extra.push(ex);
            }
            if converged {
                break;
            }
        }
    }

    model.set_stage(None);
    let set = materialize(&cumulative, &base, &extra);
    let added = hooks.before_post(model, &set);
    for ex in added {
        cumulative.push(Member::Extra(extra.len()));
        extra.push(ex);
    }
    for epoch in 1..=options.post_epochs {
        let mut order = materialize(&cumulative, &base, &extra);
        order.shuffle(&mut rng::rng(seed, &[TAG_POST, epoch as u64]));
        let stats = model.fit_epoch(&order, rng::derive_seed(seed, &[TAG_FIT, TAG_POST, epoch as u64]));
        log.push(LogEntry {
            phase: Phase::Post,
            stage: None,
            epoch,
            mean_loss: stats.mean_loss,
            steps: stats.step_losses.len(),
            converged: false,
            cause: if epoch == options.post_epochs { StopCause::Budget } else { StopCause::Continue },
            set_size: base_count,
            augmented: cumulative.len() - base_count,
            step_losses: stats.step_losses,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::*;
    use crate::corpus::SlotValues;
    use crate::model::EpochStats;
    use crate::schema::fixtures::schema;
    use alloc::string::ToString;

    #[test]
    fn bucket_floor_rule() {
        assert_eq!(bucket_index(0.05, 10), 0);
        assert_eq!(bucket_index(1.0, 10), 9);
        let got: Vec<usize> = [0.11, 0.95, 0.30].iter().map(|&s| bucket_index(s, 10)).collect();
        assert_eq!(got, vec![1, 9, 3]);
        assert_eq!(bucket_index(0.999, 1), 0);
    }

    #[test]
    fn curriculum_partition_and_order() {
        let scores = [("c", 0.15), ("a", 0.15), ("b", 0.12), ("z", 0.9), ("y", 1.0)];
        let c = Curriculum::from_scores(scores.iter().map(|(i, s)| (*i, *s)), 10).unwrap();
        assert_eq!(c.buckets()[1], vec!["b".to_string(), "a".to_string(), "c".to_string()]);
        assert_eq!(c.buckets()[9], vec!["z".to_string(), "y".to_string()]);
        assert_eq!(c.len(), 5);
        assert_eq!(c.stage_set(1).len(), 3);
        assert!(Curriculum::from_scores(scores.iter().map(|(i, s)| (*i, *s)), 0).is_err());
        assert!(Curriculum::from_scores([("x", 1.5)], 4).is_err());
        let again = Curriculum::from_scores(scores.iter().map(|(i, s)| (*i, *s)), 10).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.boundaries()[3], (0.3, 0.4));
    }

    #[test]
    fn convergence_traces() {
        let rule = ConvergenceRule {
            max_epochs_per_stage: 3,
            loss_threshold: 15.0,
            window_steps: 100,
        };
        assert!(check_convergence(&[10.0; 100], &rule));
        assert!(!check_convergence(&[20.0; 100], &rule));
        let ramp: Vec<f64> = (0..100).map(|i| 30.0 - 25.0 * i as f64 / 99.0).collect();
        assert!(!check_convergence(&ramp, &rule));
        assert!(!check_convergence(&[10.0; 99], &rule));
        // only the trailing window matters
        let mut late = vec![100.0; 50];
        late.extend_from_slice(&[0.1; 100]);
        assert!(check_convergence(&late, &rule));
        let rising: Vec<f64> = (0..100).map(|i| 1.0 + i as f64 * 0.01).collect();
        assert!(check_convergence(&rising, &rule));
    }

    #[test]
    fn slope_matches_textbook_formula() {
        let ys = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0];
        let n = ys.len() as f64;
        let xbar = (n - 1.0) / 2.0;
        let ybar: f64 = ys.iter().sum::<f64>() / n;
        let num: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - xbar) * (y - ybar)).sum();
        let den: f64 = (0..ys.len()).map(|i| (i as f64 - xbar) * (i as f64 - xbar)).sum();
        assert!((trend_slope(&ys) - num / den).abs() < 1e-12);
        assert_eq!(trend_slope(&[0.1; 100]), 0.0);
    }

    /// Counts epochs and reports a constant per-step loss.
    struct Flat {
        loss: f64,
        batch: usize,
        seen: Vec<usize>,
    }

    impl ModelOracle for Flat {
        fn fit_epoch(&mut self, examples: &[&DialogExample], _seed: u64) -> EpochStats {
            self.seen.push(examples.len());
            let steps = examples.len().div_ceil(self.batch);
            EpochStats {
                mean_loss: if examples.is_empty() { 0.0 } else { self.loss },
                step_losses: vec![self.loss; steps],
            }
        }
        fn predict_turn(&self, _example: &DialogExample) -> SlotValues {
            SlotValues::new()
        }
        fn example_loss(&self, _example: &DialogExample) -> f64 {
            self.loss
        }
        fn clone_untrained(&self, _seed: u64) -> Self {
            Flat { loss: self.loss, batch: self.batch, seen: Vec::new() }
        }
    }

    fn examples(n: usize) -> Vec<DialogExample> {
        let s = schema();
        (0..n)
            .map(|i| example(&alloc::format!("e{i:03}"), vec![turn(1, "", "hello", &[])], &s))
            .collect()
    }

    #[test]
    fn single_bucket_is_ordinary_training() {
        let exs = examples(20);
        let c = Curriculum::from_scores(exs.iter().map(|e| (e.example_id(), 0.5)), 1).unwrap();
        let mut m = Flat { loss: 50.0, batch: 1, seen: Vec::new() };
        let opts = CurriculumOptions { warmup_epochs: 0, post_epochs: 4, rule: ConvergenceRule::default() };
        let log = run_curriculum(&mut m, &exs, &c, &opts, &mut NoHooks, 3).unwrap();
        assert_eq!(log.epochs_total(), 3 + 4);
        assert!(m.seen.iter().all(|&n| n == 20));
    }

    #[test]
    fn zero_loss_model_converges_after_one_window() {
        let exs = examples(300);
        let c = Curriculum::from_scores(exs.iter().enumerate().map(|(i, e)| (e.example_id(), (i % 3) as f64 / 3.0 + 0.1)), 3).unwrap();
        let mut m = Flat { loss: 0.0, batch: 1, seen: Vec::new() };
        let opts = CurriculumOptions { warmup_epochs: 2, post_epochs: 1, rule: ConvergenceRule::default() };
        let log = run_curriculum(&mut m, &exs, &c, &opts, &mut NoHooks, 3).unwrap();
        let stages: Vec<&LogEntry> = log.entries().iter().filter(|e| e.phase == Phase::Stage).collect();
        assert_eq!(stages.len(), 3);
        assert!(stages.iter().all(|e| e.epoch == 1 && e.cause == StopCause::Converged));
        assert_eq!(stages.iter().map(|e| e.set_size).collect::<Vec<_>>(), vec![100, 200, 300]);
        assert!(log.epochs_total() <= 3 * 3 + 2 + 1);
    }

    #[test]
    fn empty_buckets_are_skipped_and_empty_curriculum_rejected() {
        let exs = examples(4);
        let c = Curriculum::from_scores(exs.iter().map(|e| (e.example_id(), 0.95)), 10).unwrap();
        let mut m = Flat { loss: 50.0, batch: 2, seen: Vec::new() };
        let opts = CurriculumOptions { warmup_epochs: 0, post_epochs: 0, rule: ConvergenceRule::default() };
        let log = run_curriculum(&mut m, &exs, &c, &opts, &mut NoHooks, 0).unwrap();
        assert!(log.entries().iter().all(|e| e.stage == Some(9)));
        let empty = Curriculum::from_scores(core::iter::empty(), 10).unwrap();
        assert!(run_curriculum(&mut m, &exs, &empty, &opts, &mut NoHooks, 0).is_err());
    }

    struct AddOne;
    impl CurriculumHooks<Flat> for AddOne {
        fn on_epoch_end(&mut self, event: &EpochEvent, _m: &Flat, set: &[&DialogExample]) -> Vec<DialogExample> {
            if event.converged { Vec::new() } else { vec![set[0].clone()] }
        }
    }

    #[test]
    fn hook_examples_join_the_cumulative_set() {
        let exs = examples(6);
        let c = Curriculum::from_scores(exs.iter().enumerate().map(|(i, e)| (e.example_id(), i as f64 / 6.0)), 2).unwrap();
        let mut m = Flat { loss: 50.0, batch: 1, seen: Vec::new() };
        let opts = CurriculumOptions { warmup_epochs: 0, post_epochs: 1, rule: ConvergenceRule::default() };
        let log = run_curriculum(&mut m, &exs, &c, &opts, &mut AddOne, 0).unwrap();
        // stage 0 sees 3, 4, 5 examples; stage 1 sees 9, 10, 11; post sees 12
        assert_eq!(m.seen, vec![3, 4, 5, 9, 10, 11, 12]);
        assert_eq!(log.entries().last().unwrap().augmented, 6);
    }
}
