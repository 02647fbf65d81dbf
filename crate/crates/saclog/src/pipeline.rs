//! The pipeline commands. Each one reads the configuration and files, and
//! writes its artifacts under the run directory.
//!
//! Run directory layout:
//!
//! ```text
//! config.resolved.toml          written by every command
//! manifest.jsonl                one line per command run; the only timestamps
//! corpus/{train,valid}.jsonl    ingest: normalized dialogs
//! corpus/schema.json
//! ingest-summary.json
//! scores.jsonl                  score: one record per training example
//! score-summary.json
//! folds.jsonl                   score: held-out bookkeeping per model run
//! curriculum.json               bucket
//! encoder.bin                   pretrain
//! pretrain-report.txt
//! train/<mode>-seed<seed>/      train: model.bin, log.jsonl, metrics.json,
//!                               predictions.jsonl, and for curriculum runs
//!                               with review augmented.jsonl + provenance.jsonl
//! augment/                      augment: augmented.jsonl, provenance.jsonl, summary.json
//! evaluate/<mode>-seed<seed>/   evaluate: predictions.jsonl, metrics.json
//! report.md, plots/*.svg        report
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use saclog_core::corpus::{Corpus, Dialog, DialogExample, Split};
use saclog_core::difficulty::{self, DifficultyRecord, FoldRun};
use saclog_core::encoder::{EncoderParams, Vocab};
use saclog_core::model::{jga, predict_corpus, train_baseline};
use saclog_core::preview::{pretrain, PretrainReport};
use saclog_core::refmodel::ReferenceModel;
use saclog_core::review::{augment_batch, evaluate_candidates, select_hard, AugmentationRecord, ReviewHook, ReviewMode};
use saclog_core::rng::derive_seed;
use saclog_core::scheduler::{assign_buckets, run_curriculum, Curriculum, NoHooks, TrainingLog};
use saclog_core::schema::Schema;
use saclog_core::synth::{generate_synthetic, SynthConfig};

use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};
use crate::formats::{self, PredictionLine, ScoreLine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Curriculum,
    Baseline,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Curriculum => "curriculum",
            Self::Baseline => "baseline",
        })
    }
}

/// Outcome of one training or evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: TrainMode,
    pub seed: u64,
    pub jga: f64,
    pub epochs_total: usize,
    pub augmented: usize,
    pub preview: bool,
}

/// Training and validation corpora over one schema.
#[derive(Debug, Clone)]
pub struct Data {
    pub schema: Arc<Schema>,
    pub train: Corpus,
    pub valid: Corpus,
    pub train_dialogs: Vec<Dialog>,
    pub valid_dialogs: Vec<Dialog>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub train_dialogs: usize,
    pub train_examples: usize,
    pub valid_dialogs: usize,
    pub valid_examples: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub examples: usize,
    pub model_runs: usize,
    /// Hybrid-score counts over ten equal-width bins of [0, 1].
    pub histogram: Vec<usize>,
    /// Pearson correlation of each term with the hybrid score: model
    /// difficulty, then the four rule factors. `null` when undefined.
    pub correlations: Vec<Option<f64>>,
}

/// Held-out bookkeeping of one cross-validation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldLine {
    pub member: usize,
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub held_out_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumFile {
    pub n_buckets: usize,
    pub boundaries: Vec<(f64, f64)>,
    pub buckets: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub model: String,
    pub candidates: usize,
    pub hard: usize,
    pub emitted: usize,
}

#[derive(Serialize)]
struct ManifestLine<'a> {
    command: &'a str,
    seed: u64,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    version: &'static str,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn summarize_scores(records: &[DifficultyRecord], model_runs: usize) -> ScoreSummary {
    let mut histogram = vec![0usize; 10];
    for r in records {
        histogram[saclog_core::scheduler::bucket_index(r.hybrid, 10)] += 1;
    }
    let hybrid: Vec<f64> = records.iter().map(|r| r.hybrid).collect();
    let mut correlations = Vec::with_capacity(5);
    let model: Option<Vec<f64>> = records.iter().map(|r| r.model_mean.map(|m| 1.0 - m)).collect();
    correlations.push(model.and_then(|m| pearson(&m, &hybrid)));
    for i in 0..4 {
        let f: Vec<f64> = records.iter().map(|r| r.rule.normalized[i]).collect();
        correlations.push(pearson(&f, &hybrid));
    }
    ScoreSummary {
        examples: records.len(),
        model_runs,
        histogram,
        correlations,
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
}

impl Pipeline {
    /// Validates the configuration; nothing is written until a command runs.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn out(&self) -> &Path {
        &self.config.paths.out
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out().join(rel)
    }

    pub fn run_dir(&self, kind: &str, mode: TrainMode) -> PathBuf {
        self.path(kind).join(format!("{mode}-seed{}", self.seed()))
    }

    fn begin(&self) -> Result<()> {
        formats::write_bytes(&self.path("config.resolved.toml"), self.config.to_resolved_toml().as_bytes())
    }

    /// Runs `f` and appends a manifest line on success.
    fn command<T>(&self, name: &str, f: impl FnOnce(&Self) -> Result<T>) -> Result<T> {
        let started = now_ms();
        let value = f(self)?;
        let line = ManifestLine {
            command: name,
            seed: self.seed(),
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
            version: env!("CARGO_PKG_VERSION"),
        };
        let path = self.path("manifest.jsonl");
        let mut text = std::fs::read_to_string(&path).unwrap_or_default();
        text.push_str(&formats::to_jsonl([line]));
        formats::write_bytes(&path, text.as_bytes())?;
        Ok(value)
    }

    pub fn load_data(&self) -> Result<Data> {
        let (schema, train_dialogs, valid_dialogs, warnings) = match &self.config.synthetic {
            Some(source) => {
                let train = generate_synthetic(&source.generator, source.seed)?;
                let valid_config = SynthConfig {
                    dialogs: source.valid_dialogs,
                    id_prefix: format!("{}-valid", source.generator.id_prefix),
                    ..source.generator.clone()
                };
                let valid = generate_synthetic(&valid_config, derive_seed(source.seed, &[1]))?;
                (train.schema, train.dialogs, valid.dialogs, Vec::new())
            }
            None => {
                let paths = &self.config.paths;
                let schema = formats::read_schema(paths.schema.as_deref().expect("validated"))?;
                let train = formats::read_dialogs(paths.corpus.as_deref().expect("validated"), &schema)?;
                let mut warnings = train.warnings;
                let valid = match &paths.valid {
                    Some(p) => {
                        let v = formats::read_dialogs(p, &schema)?;
                        warnings.extend(v.warnings);
                        v.dialogs
                    }
                    None => {
                        log::warn!("no validation dialogs configured; evaluating on the training dialogs");
                        train.dialogs.clone()
                    }
                };
                (Arc::new(schema), train.dialogs, valid, warnings)
            }
        };
        let train = Corpus::from_dialogs(&train_dialogs, schema.clone(), Split::Train)?;
        let valid = Corpus::from_dialogs(&valid_dialogs, schema.clone(), Split::Valid)?;
        if train.is_empty() {
            return Err(PipelineError::Data(String::from("the training corpus is empty")));
        }
        Ok(Data {
            schema,
            train,
            valid,
            train_dialogs,
            valid_dialogs,
            warnings,
        })
    }

    fn prototype(&self, data: &Data) -> Result<ReferenceModel> {
        let vocab = Vocab::build(data.train.iter(), &data.schema);
        Ok(ReferenceModel::new(data.schema.clone(), vocab, self.config.model, self.seed())?)
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| PipelineError::Runtime(e.to_string()))
    }

    pub fn ingest(&self) -> Result<IngestSummary> {
        self.command("ingest", |p| {
            let data = p.load_data()?;
            p.begin()?;
            formats::write_dialogs(&p.path("corpus/train.jsonl"), &data.train_dialogs, &data.schema)?;
            formats::write_dialogs(&p.path("corpus/valid.jsonl"), &data.valid_dialogs, &data.schema)?;
            formats::write_schema(&p.path("corpus/schema.json"), &data.schema)?;
            let summary = IngestSummary {
                train_dialogs: data.train_dialogs.len(),
                train_examples: data.train.len(),
                valid_dialogs: data.valid_dialogs.len(),
                valid_examples: data.valid.len(),
                warnings: data.warnings,
            };
            formats::write_json(&p.path("ingest-summary.json"), &summary)?;
            Ok(summary)
        })
    }

    /// Cross-validated model scores, with folds trained in parallel.
    pub fn model_scores(&self, data: &Data) -> Result<difficulty::ModelScoring> {
        let config = self.config.scoring.scoring();
        config.validate(data.train.len())?;
        let prototype = self.prototype(data)?;
        let folds = difficulty::assign_folds(data.train.iter().map(DialogExample::example_id), config.k);
        let jobs = difficulty::fold_jobs(&config);
        let seed = self.seed();
        let runs: Vec<FoldRun> = self.thread_pool()?.install(|| {
            jobs.par_iter()
                .map(|&(m, f)| difficulty::run_fold(&prototype, &data.train, &folds, &config, m, f, seed))
                .collect::<saclog_core::Result<Vec<_>>>()
        })?;
        Ok(difficulty::merge_fold_runs(runs, &data.train, &config)?)
    }

    pub fn score(&self) -> Result<Vec<DifficultyRecord>> {
        self.command("score", |p| {
            let data = p.load_data()?;
            let weights = p.config.scoring.weights();
            let scoring = if weights.uses_model() { Some(p.model_scores(&data)?) } else { None };
            let records = difficulty::combine_scores(&data.train, scoring.as_ref(), &weights, &p.config.scoring.maxima)?;
            let runs = scoring.as_ref().map_or(&[][..], |s| s.runs.as_slice());
            p.begin()?;
            formats::write_jsonl(&p.path("scores.jsonl"), records.iter().map(ScoreLine::from))?;
            formats::write_json(&p.path("score-summary.json"), &summarize_scores(&records, runs.len()))?;
            formats::write_jsonl(
                &p.path("folds.jsonl"),
                runs.iter().map(|r| FoldLine {
                    member: r.member,
                    fold: r.fold,
                    train_ids: r.train_ids.clone(),
                    held_out_ids: r.held_out.iter().map(|(id, _)| id.clone()).collect(),
                }),
            )?;
            Ok(records)
        })
    }

    fn read_scores(&self, data: &Data) -> Result<Vec<DifficultyRecord>> {
        let path = self.path("scores.jsonl");
        if !path.is_file() {
            return Err(PipelineError::Data(format!("{} is missing; run `score` first", path.display())));
        }
        let records = formats::read_scores(&path)?;
        let scored: std::collections::BTreeSet<&str> = records.iter().map(|r| r.example_id.as_str()).collect();
        if scored.len() != records.len() || data.train.iter().any(|e| !scored.contains(e.example_id())) || scored.len() != data.train.len() {
            return Err(PipelineError::Data(format!(
                "{} does not cover the training corpus exactly; rerun `score`",
                path.display()
            )));
        }
        Ok(records)
    }

    pub fn bucket(&self) -> Result<Curriculum> {
        self.command("bucket", |p| {
            let data = p.load_data()?;
            let curriculum = assign_buckets(&p.read_scores(&data)?, p.config.curriculum.n_buckets)?;
            p.begin()?;
            formats::write_json(
                &p.path("curriculum.json"),
                &CurriculumFile {
                    n_buckets: curriculum.n_buckets(),
                    boundaries: curriculum.boundaries(),
                    buckets: curriculum.buckets().to_vec(),
                },
            )?;
            Ok(curriculum)
        })
    }

    pub fn pretrain(&self) -> Result<PretrainReport> {
        self.command("pretrain", |p| {
            let data = p.load_data()?;
            let vocab = Vocab::build(data.train.iter(), &data.schema);
            let pretrained = pretrain(&data.train, &vocab, &p.config.preview_config(), p.seed())?;
            p.begin()?;
            formats::write_bytes(&p.path("encoder.bin"), &pretrained.encoder_params().to_bytes())?;
            formats::write_bytes(&p.path("pretrain-report.txt"), pretrain_report_text(&pretrained.report).as_bytes())?;
            Ok(pretrained.report)
        })
    }

    fn read_encoder(&self) -> Result<EncoderParams> {
        let path = self.path("encoder.bin");
        if !path.is_file() {
            return Err(PipelineError::Data(format!(
                "{} is missing; run `pretrain` first or disable [preview]",
                path.display()
            )));
        }
        let bytes = std::fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
        let params = EncoderParams::from_bytes(&bytes).map_err(|e| PipelineError::from(e).at(&path.display().to_string()))?;
        if params.config != self.config.model.encoder {
            return Err(PipelineError::Config(format!(
                "{} was pretrained with encoder {:?}, but [model] uses {:?}",
                path.display(),
                params.config,
                self.config.model.encoder
            )));
        }
        Ok(params)
    }

    pub fn train(&self, mode: TrainMode) -> Result<Metrics> {
        self.command("train", |p| p.train_inner(mode))
    }

    fn train_inner(&self, mode: TrainMode) -> Result<Metrics> {
        let data = self.load_data()?;
        let seed = self.seed();
        let mut records: Vec<AugmentationRecord> = Vec::new();
        let preview = mode == TrainMode::Curriculum && self.config.preview.enabled;
        let (model, log): (ReferenceModel, TrainingLog) = match mode {
            TrainMode::Baseline => {
                let mut model = self.prototype(&data)?;
                let log = train_baseline(&mut model, data.train.examples(), self.config.baseline_epochs(), seed)?;
                (model, log)
            }
            TrainMode::Curriculum => {
                let curriculum = assign_buckets(&self.read_scores(&data)?, self.config.curriculum.n_buckets)?;
                let mut model = if preview {
                    let encoder = Arc::new(self.read_encoder()?);
                    ReferenceModel::with_encoder(data.schema.clone(), self.config.model, encoder, seed)?
                } else {
                    self.prototype(&data)?
                };
                let options = self.config.curriculum.options();
                let log = if self.config.review.mode == ReviewMode::Off {
                    run_curriculum(&mut model, data.train.examples(), &curriculum, &options, &mut NoHooks, seed)?
                } else {
                    let mut hook = ReviewHook::new(&data.train, self.config.review, derive_seed(seed, &[0x4e71]))?;
                    let log = run_curriculum(&mut model, data.train.examples(), &curriculum, &options, &mut hook, seed)?;
                    records = hook.records;
                    log
                };
                (model, log)
            }
        };
        let predictions = predict_corpus(&model, &data.valid)?;
        let metrics = Metrics {
            mode,
            seed,
            jga: jga(&predictions, &data.valid)?,
            epochs_total: log.epochs_total(),
            augmented: records.len(),
            preview,
        };
        self.begin()?;
        let dir = self.run_dir("train", mode);
        formats::write_bytes(&dir.join("model.bin"), &model.to_bytes())?;
        formats::write_jsonl(&dir.join("log.jsonl"), log.entries())?;
        formats::write_jsonl(&dir.join("predictions.jsonl"), predictions.iter().map(PredictionLine::from))?;
        formats::write_json(&dir.join("metrics.json"), &metrics)?;
        if !records.is_empty() {
            formats::write_augmentations(&dir.join("augmented.jsonl"), &dir.join("provenance.jsonl"), &records, &data.schema)?;
        }
        Ok(metrics)
    }

    fn read_model(&self, data: &Data, mode: TrainMode) -> Result<(PathBuf, ReferenceModel)> {
        let path = self.run_dir("train", mode).join("model.bin");
        if !path.is_file() {
            return Err(PipelineError::Data(format!("{} is missing; run `train` first", path.display())));
        }
        let bytes = std::fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
        let model = ReferenceModel::from_bytes(data.schema.clone(), self.config.model, &bytes)
            .map_err(|e| PipelineError::from(e).at(&path.display().to_string()))?;
        Ok((path, model))
    }

    /// Reviews the training corpus with a trained model and writes the
    /// augmented dialogs with their provenance.
    pub fn augment(&self, mode: TrainMode) -> Result<Vec<AugmentationRecord>> {
        self.command("augment", |p| {
            let data = p.load_data()?;
            let (path, model) = p.read_model(&data, mode)?;
            let all: Vec<&DialogExample> = data.train.iter().collect();
            let candidates = evaluate_candidates(&model, &all);
            let hard = select_hard(&candidates, p.config.review.fraction)?;
            let records = augment_batch(&hard, &data.train, p.config.review.budget, p.seed())?;
            p.begin()?;
            let dir = p.path("augment");
            formats::write_augmentations(&dir.join("augmented.jsonl"), &dir.join("provenance.jsonl"), &records, &data.schema)?;
            let rel = path.strip_prefix(p.out()).unwrap_or(&path);
            formats::write_json(
                &dir.join("summary.json"),
                &AugmentSummary {
                    model: rel.display().to_string(),
                    candidates: candidates.len(),
                    hard: hard.len(),
                    emitted: records.len(),
                },
            )?;
            Ok(records)
        })
    }

    pub fn evaluate(&self, mode: TrainMode) -> Result<Metrics> {
        self.command("evaluate", |p| {
            let data = p.load_data()?;
            let (_, model) = p.read_model(&data, mode)?;
            let predictions = predict_corpus(&model, &data.valid)?;
            let train_log = p.run_dir("train", mode).join("log.jsonl");
            let epochs_total = formats::read_jsonl::<serde_json::Value>(&train_log).map_or(0, |l| l.len());
            let trained: Option<Metrics> = formats::read_json(&p.run_dir("train", mode).join("metrics.json")).ok();
            let metrics = Metrics {
                mode,
                seed: p.seed(),
                jga: jga(&predictions, &data.valid)?,
                epochs_total,
                augmented: trained.as_ref().map_or(0, |m| m.augmented),
                preview: trained.as_ref().is_some_and(|m| m.preview),
            };
            p.begin()?;
            let dir = p.run_dir("evaluate", mode);
            formats::write_jsonl(&dir.join("predictions.jsonl"), predictions.iter().map(PredictionLine::from))?;
            formats::write_json(&dir.join("metrics.json"), &metrics)?;
            Ok(metrics)
        })
    }

    pub fn report(&self) -> Result<crate::report::Report> {
        self.command("report", |p| crate::report::write_report(p.out()))
    }
}

pub fn pretrain_report_text(report: &PretrainReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("examples: {}\n", report.examples));
    s.push_str(&format!("unlocatable values: {}\n", report.unlocatable));
    s.push_str("epoch\tseq\tcls\taux\ttotal\tskipped_aux_batches\tskipped_steps\n");
    for e in &report.epochs {
        let aux = e.aux.map_or(String::from("-"), |a| format!("{a:.6}"));
        s.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{}\t{:.6}\t{}\t{}\n",
            e.epoch, e.seq, e.cls, aux, e.total, e.skipped_aux_batches, e.skipped_steps
        ));
    }
    s
}

/// Median of a non-empty list.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Metrics records grouped by mode.
pub fn metrics_by_mode(metrics: &[Metrics]) -> BTreeMap<TrainMode, Vec<&Metrics>> {
    let mut out: BTreeMap<TrainMode, Vec<&Metrics>> = BTreeMap::new();
    for m in metrics {
        out.entry(m.mode).or_default().push(m);
    }
    out
}
