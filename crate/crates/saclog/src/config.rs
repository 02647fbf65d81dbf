//! The pipeline configuration file.
//!
//! A single TOML file drives every command. Unknown keys are rejected and
//! missing keys take the defaults below. Relative paths are resolved
//! against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use saclog_core::difficulty::{FactorMaxima, ModelTerm, ScorerWeights, ScoringConfig};
use saclog_core::preview::PreviewConfig;
use saclog_core::refmodel::ReferenceConfig;
use saclog_core::review::ReviewConfig;
use saclog_core::scheduler::{ConvergenceRule, CurriculumOptions};
use saclog_core::synth::SynthConfig;

use crate::error::{PipelineError, Result};
use crate::formats::read_text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training dialogs. Required unless a synthetic source is configured.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Validation dialogs; the training dialogs are used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: None,
            valid: None,
            schema: None,
            out: PathBuf::from("run"),
        }
    }
}

/// Generated corpus used in place of dialog files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    /// Seed of the generator; independent of the pipeline seed.
    pub seed: u64,
    pub valid_dialogs: usize,
    pub generator: SynthConfig,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            seed: 0,
            valid_dialogs: 300,
            generator: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    /// Model term first, then the four rule factors.
    pub term_weights: [f64; 5],
    pub model_term: ModelTerm,
    pub maxima: FactorMaxima,
    pub k: usize,
    pub ensemble: usize,
    /// Training epochs of every cross-validation model.
    pub epochs: usize,
}

impl Default for ScoringSection {
    fn default() -> Self {
        let w = ScorerWeights::default();
        let s = ScoringConfig::default();
        Self {
            term_weights: w.term_weights,
            model_term: w.model_term,
            maxima: FactorMaxima::default(),
            k: s.k,
            ensemble: s.ensemble,
            epochs: s.epochs,
        }
    }
}

impl ScoringSection {
    pub fn weights(&self) -> ScorerWeights {
        ScorerWeights {
            term_weights: self.term_weights,
            model_term: self.model_term,
        }
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            k: self.k,
            ensemble: self.ensemble,
            epochs: self.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSection {
    pub n_buckets: usize,
    pub warmup_epochs: usize,
    pub post_epochs: usize,
    pub max_epochs_per_stage: usize,
    /// In the reference model's loss units (mean loss per minibatch).
    pub loss_threshold: f64,
    pub window_steps: usize,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        let o = CurriculumOptions::default();
        Self {
            n_buckets: 10,
            warmup_epochs: o.warmup_epochs,
            post_epochs: o.post_epochs,
            max_epochs_per_stage: o.rule.max_epochs_per_stage,
            loss_threshold: 1.0,
            window_steps: o.rule.window_steps,
        }
    }
}

impl CurriculumSection {
    pub fn options(&self) -> CurriculumOptions {
        CurriculumOptions {
            warmup_epochs: self.warmup_epochs,
            post_epochs: self.post_epochs,
            rule: ConvergenceRule {
                max_epochs_per_stage: self.max_epochs_per_stage,
                loss_threshold: self.loss_threshold,
                window_steps: self.window_steps,
            },
        }
    }
}

/// Pre-training settings. The encoder shape is shared with `[model]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreviewSection {
    /// Whether curriculum training starts from the pretrained encoder.
    pub enabled: bool,
    pub extended_ops: bool,
    pub max_context_tokens: usize,
    pub mask_rate: f64,
    pub aux_weight: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PreviewSection {
    fn default() -> Self {
        let p = PreviewConfig::default();
        Self {
            enabled: true,
            extended_ops: p.extended_ops,
            max_context_tokens: p.max_context_tokens,
            mask_rate: p.mask_rate,
            aux_weight: p.aux_weight,
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Baseline epochs; defaults to warm-up plus post-accumulation epochs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Upper bound on concurrent cross-validation trainings; 0 uses every core.
    pub workers: usize,
    pub paths: Paths,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSource>,
    pub scoring: ScoringSection,
    pub curriculum: CurriculumSection,
    pub model: ReferenceConfig,
    pub preview: PreviewSection,
    pub review: ReviewConfig,
    pub train: TrainSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            paths: Paths::default(),
            synthetic: None,
            scoring: ScoringSection::default(),
            curriculum: CurriculumSection::default(),
            model: ReferenceConfig::default(),
            preview: PreviewSection::default(),
            review: ReviewConfig::default(),
            train: TrainSection::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

impl PipelineConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut config: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        for p in [&mut config.paths.corpus, &mut config.paths.valid, &mut config.paths.schema]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if config.paths.out.is_relative() {
            config.paths.out = base.join(&config.paths.out);
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path).map_err(|e| config_err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| e.at(&path.display().to_string()))
    }

    /// Checks every setting and that configured input files exist.
    pub fn validate(&self) -> Result<()> {
        self.scoring.weights().validate()?;
        self.scoring.maxima.validate()?;
        if self.scoring.k < 2 || self.scoring.ensemble == 0 || self.scoring.epochs == 0 {
            return Err(config_err("scoring needs k >= 2, ensemble >= 1 and epochs >= 1"));
        }
        if self.curriculum.n_buckets == 0 {
            return Err(config_err("n_buckets must be positive"));
        }
        self.curriculum.options().rule.validate()?;
        if self.curriculum.warmup_epochs + self.curriculum.post_epochs == 0 && self.train.baseline_epochs.is_none() {
            return Err(config_err("baseline epochs default to warmup + post epochs, which is zero"));
        }
        if self.train.baseline_epochs == Some(0) {
            return Err(config_err("baseline_epochs must be positive"));
        }
        self.model.validate()?;
        self.preview_config().validate()?;
        if !(self.review.fraction > 0.0 && self.review.fraction <= 1.0) {
            return Err(config_err(format!("review fraction {} is outside (0, 1]", self.review.fraction)));
        }
        match (&self.synthetic, &self.paths.corpus, &self.paths.schema) {
            (Some(s), None, None) => {
                s.generator.validate()?;
                if self.paths.valid.is_some() {
                    return Err(config_err("paths.valid cannot be combined with a synthetic source"));
                }
            }
            (Some(_), _, _) => return Err(config_err("configure either [synthetic] or paths.corpus/paths.schema, not both")),
            (None, Some(_), Some(_)) => {}
            (None, _, _) => return Err(config_err("paths.corpus and paths.schema are required")),
        }
        for p in [&self.paths.corpus, &self.paths.valid, &self.paths.schema].into_iter().flatten() {
            if !p.is_file() {
                return Err(config_err(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn preview_config(&self) -> PreviewConfig {
        let p = &self.preview;
        PreviewConfig {
            encoder: self.model.encoder,
            extended_ops: p.extended_ops,
            max_context_tokens: p.max_context_tokens,
            mask_rate: p.mask_rate,
            aux_weight: p.aux_weight,
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
        }
    }

    pub fn baseline_epochs(&self) -> usize {
        self.train
            .baseline_epochs
            .unwrap_or(self.curriculum.warmup_epochs + self.curriculum.post_epochs)
    }

    /// The full configuration as TOML, with settings that keep the
    /// original method's published values marked as such.
    pub fn to_resolved_toml(&self) -> String {
        let body = toml::to_string(self).expect("config serializes");
        let mut table = String::new();
        let mut out = String::from("# Resolved configuration: every setting, defaults included.\n");
        for line in body.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') {
                table = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
            }
            let key = trimmed.split('=').next().unwrap_or("").trim();
            match method_default_note(&table, key) {
                Some(note) => out.push_str(&format!("{line}  # {note}\n")),
                None => {
                    out.push_str(line);
                    out.push('\n');
                }
            }
        }
        out.push_str("\n# Fixed architecture: the span and operation heads have one tanh hidden layer.\n");
        out
    }
}

/// Settings whose defaults are the published values of the original method.
fn method_default_note(table: &str, key: &str) -> Option<&'static str> {
    Some(match (table, key) {
        ("scoring", "maxima") => "method default 7/50/4/6",
        ("scoring", "k") => "method default: 5 folds",
        ("scoring", "ensemble") => "method default: 6 models",
        ("curriculum", "n_buckets") => "method default: 10 buckets",
        ("curriculum", "warmup_epochs") => "method default: 2 full-data epochs",
        ("curriculum", "post_epochs") => "method default: 10 extra epochs",
        ("curriculum", "max_epochs_per_stage") => "method default: 3",
        ("curriculum", "window_steps") => "method default: 100 steps",
        ("curriculum", "loss_threshold") => "method value is 15 in its own loss units; rescaled for the reference model",
        ("review", "fraction") => "method default: top 10%",
        ("review", "mode") => "method default: augment after curriculum training",
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_the_snapshot() {
        let mut c = PipelineConfig::default();
        c.synthetic = Some(SyntheticSource::default());
        c.paths.out = PathBuf::from("/tmp/run");
        let text = c.to_resolved_toml();
        assert!(text.contains("n_buckets = 10  # method default"));
        let back = PipelineConfig::parse(&text, Path::new("/")).unwrap();
        assert_eq!(back, c);
        back.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let base = Path::new("/");
        assert!(PipelineConfig::parse("colour = 3", base).is_err());
        assert!(PipelineConfig::parse("[scoring]\nkk = 3", base).is_err());
        let bad_weights = PipelineConfig::parse("[synthetic]\n[scoring]\nterm_weights = [0.5, 0.5, 0.5, 0.0, 0.0]", base).unwrap();
        assert!(matches!(bad_weights.validate(), Err(PipelineError::Config(_))));
        let missing = PipelineConfig::parse("[paths]\ncorpus = \"nope.jsonl\"\nschema = \"nope.json\"", base).unwrap();
        assert!(matches!(missing.validate(), Err(PipelineError::Config(m)) if m.contains("does not exist")));
        let neither = PipelineConfig::parse("", base).unwrap();
        assert!(neither.validate().is_err());
    }
}
