//! Experiment configuration: one flat `section.key=value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional
//! except `paths.output`; relative paths resolve against the directory of the
//! config file. Unknown and repeated keys are errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::corpus::CorpusSpec;
use crate::dvector::NetworkSpec;
use crate::error::{Error, Result};
use crate::fusion::FusionWeight;
use crate::train::TrainConfig;
use crate::triage::{BandGrid, TriagePolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub output: PathBuf,
    pub corpus: PathBuf,
    pub models: PathBuf,
    pub scores: PathBuf,
    pub reports: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSpec {
    /// Speakers per language held out of training for evaluation.
    pub eval_speakers: usize,
    pub targets: usize,
    pub nontargets: usize,
    pub enroll: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub network: NetworkSpec,
    pub train: TrainConfig,
}

/// Fusion weight used by triage and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaChoice {
    /// The best weight found by `fuse-sweep`.
    Swept,
    Fixed(FusionWeight),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriageConfig {
    pub lower: f64,
    pub upper: f64,
    pub alpha: AlphaChoice,
    pub grid: BandGrid,
    pub priors: Vec<f64>,
}

impl TriageConfig {
    pub fn policy(&self, alpha: FusionWeight) -> Result<TriagePolicy> {
        TriagePolicy::new(self.lower, self.upper, alpha)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostConfig {
    pub keyword_seconds: f64,
    pub query_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusSpec,
    pub trials: TrialSpec,
    pub td: ModelConfig,
    pub ti: ModelConfig,
    pub fusion_grid_step: f64,
    pub triage: TriageConfig,
    pub cost: CostConfig,
    /// Training-language sets for the cross-language matrix.
    pub xeval_models: Vec<Vec<usize>>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        parse_config(&text, &path.display().to_string(), base)
    }

    /// Replaces the experiment seed and every seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.td.train.seed = seed;
        self.ti.train.seed = seed;
        self
    }
}

fn parse_languages(value: &str) -> std::result::Result<Vec<usize>, String> {
    let langs: Vec<usize> = value
        .split('+')
        .map(|l| l.trim().parse::<usize>().map_err(|_| format!("invalid language {l:?}")))
        .collect::<std::result::Result<_, _>>()?;
    let unique: BTreeSet<usize> = langs.iter().copied().collect();
    if unique.len() != langs.len() {
        return Err(format!("repeated language in {value:?}"));
    }
    Ok(unique.into_iter().collect())
}

fn parse_list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| format!("invalid list entry {v:?}")))
        .collect()
}

struct Raw {
    seed: Option<u64>,
    corpus_seed: Option<u64>,
    td_seed: Option<u64>,
    ti_seed: Option<u64>,
    output: Option<PathBuf>,
    corpus_dir: Option<PathBuf>,
    models_dir: Option<PathBuf>,
    scores_dir: Option<PathBuf>,
    reports_dir: Option<PathBuf>,
    td_weights: Option<Vec<f64>>,
    ti_weights: Option<Vec<f64>>,
}

/// Parses and validates a config. `base` anchors relative paths.
pub fn parse_config(text: &str, source: &str, base: &Path) -> Result<ExperimentConfig> {
    let mut corpus = CorpusSpec::default();
    let mut trials = TrialSpec {
        eval_speakers: 10,
        targets: 400,
        nontargets: 4000,
        enroll: 3,
    };
    let mut td = ModelConfig {
        network: NetworkSpec::td_small(corpus.feature_dim),
        train: TrainConfig::default(),
    };
    let mut ti = ModelConfig {
        network: NetworkSpec::ti_small(corpus.feature_dim),
        train: TrainConfig::default(),
    };
    let mut fusion_grid_step = 0.05;
    let mut triage = TriageConfig {
        lower: 0.23,
        upper: 0.65,
        alpha: AlphaChoice::Swept,
        grid: BandGrid::default(),
        priors: vec![0.0, 0.5, 1.0],
    };
    let mut cost = CostConfig {
        keyword_seconds: 0.7,
        query_seconds: 3.0,
    };
    let mut xeval_models: Option<Vec<Vec<usize>>> = None;
    let mut raw = Raw {
        seed: None,
        corpus_seed: None,
        td_seed: None,
        ti_seed: None,
        output: None,
        corpus_dir: None,
        models_dir: None,
        scores_dir: None,
        reports_dir: None,
        td_weights: None,
        ti_weights: None,
    };

    let mut seen = BTreeSet::new();
    let mut line_count = 0;
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        line_count = line_no;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |m: String| Error::parse(source, line_no, m);
        let (key, value) = trimmed
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| err("expected section.key=value".into()))?;
        if value.is_empty() {
            return Err(err(format!("missing value for {key}")));
        }
        if !seen.insert(key.to_string()) {
            return Err(err(format!("duplicate key {key}")));
        }
        let bad = || err(format!("invalid value for {key}: {value}"));
        let count = || value.parse::<usize>().map_err(|_| bad());
        let real = || {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(bad)
        };
        let seed = || value.parse::<u64>().map_err(|_| bad());
        let path = || Some(base.join(value));

        if let Some(rest) = key.strip_prefix("td.").or_else(|| key.strip_prefix("ti.")) {
            let is_td = key.starts_with("td.");
            let model = if is_td { &mut td } else { &mut ti };
            match rest {
                "layers" => model.network.num_layers = count()?,
                "cells" => model.network.cells = count()?,
                "projection" => {
                    model.network.projection_dim = count()?;
                    model.network.output_dim = model.network.projection_dim;
                }
                "batch_speakers" => model.train.batch_speakers = count()?,
                "batch_utterances" => model.train.batch_utterances = count()?,
                "steps" => model.train.steps = count()?,
                "learning_rate" => model.train.learning_rate = real()?,
                "clip_norm" => model.train.clip_norm = real()?,
                "noise" => model.train.noise = real()?,
                "loss" => model.train.loss = value.parse().map_err(|_| bad())?,
                "seed" => {
                    let s = Some(seed()?);
                    if is_td {
                        raw.td_seed = s;
                    } else {
                        raw.ti_seed = s;
                    }
                }
                "language_weights" => {
                    let w = Some(parse_list::<f64>(value).map_err(err)?);
                    if is_td {
                        raw.td_weights = w;
                    } else {
                        raw.ti_weights = w;
                    }
                }
                _ => return Err(err(format!("unknown key {key}"))),
            }
            continue;
        }
        if let Some(lang) = key.strip_prefix("corpus.override.") {
            let lang = lang.parse::<usize>().map_err(|_| err(format!("invalid language in {key}")))?;
            corpus.utterance_overrides.insert(lang, count()?);
            continue;
        }
        match key {
            "experiment.seed" => raw.seed = Some(seed()?),
            "paths.output" => raw.output = path(),
            "paths.corpus" => raw.corpus_dir = path(),
            "paths.models" => raw.models_dir = path(),
            "paths.scores" => raw.scores_dir = path(),
            "paths.reports" => raw.reports_dir = path(),
            "corpus.languages" => corpus.languages = count()?,
            "corpus.speakers_per_language" => corpus.speakers_per_language = count()?,
            "corpus.utterances_per_speaker" => corpus.utterances_per_speaker = count()?,
            "corpus.keyword_frames" => corpus.keyword_frames = count()?,
            "corpus.query_frames" => corpus.query_frames = count()?,
            "corpus.feature_dim" => corpus.feature_dim = count()?,
            "corpus.voice_dim" => corpus.voice_dim = count()?,
            "corpus.language_shift_scale" => corpus.language_shift_scale = real()?,
            "corpus.speaker_scale" => corpus.speaker_scale = real()?,
            "corpus.utterance_noise_scale" => corpus.utterance_noise_scale = real()?,
            "corpus.content_scale" => corpus.content_scale = real()?,
            "corpus.channel_directions" => corpus.channel_directions = count()?,
            "corpus.channel_per_language" => corpus.channel_per_language = count()?,
            "corpus.channel_scale" => corpus.channel_scale = real()?,
            "corpus.seed" => raw.corpus_seed = Some(seed()?),
            "trials.eval_speakers" => trials.eval_speakers = count()?,
            "trials.targets" => trials.targets = count()?,
            "trials.nontargets" => trials.nontargets = count()?,
            "trials.enroll" => trials.enroll = count()?,
            "fusion.grid_step" => fusion_grid_step = real()?,
            "triage.lower" => triage.lower = real()?,
            "triage.upper" => triage.upper = real()?,
            "triage.alpha" => {
                triage.alpha = if value == "swept" {
                    AlphaChoice::Swept
                } else {
                    AlphaChoice::Fixed(FusionWeight::new(real()?).map_err(|e| err(e.to_string()))?)
                }
            }
            "triage.grid_min" => triage.grid.min = real()?,
            "triage.grid_max" => triage.grid.max = real()?,
            "triage.grid_step" => triage.grid.step = real()?,
            "triage.priors" => triage.priors = parse_list::<f64>(value).map_err(err)?,
            "cost.keyword_seconds" => cost.keyword_seconds = real()?,
            "cost.query_seconds" => cost.query_seconds = real()?,
            "xeval.models" => {
                xeval_models = Some(
                    value
                        .split(';')
                        .map(parse_languages)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(err)?,
                )
            }
            _ => return Err(err(format!("unknown key {key}"))),
        }
    }

    let end = |m: String| Error::parse(source, line_count, m);
    let output = raw
        .output
        .ok_or_else(|| end("missing required key paths.output".into()))?;
    let seed = raw.seed.unwrap_or(1);
    corpus.seed = raw.corpus_seed.unwrap_or(seed);
    td.train.seed = raw.td_seed.unwrap_or(seed);
    ti.train.seed = raw.ti_seed.unwrap_or(seed);
    td.network.input_dim = corpus.feature_dim;
    ti.network.input_dim = corpus.feature_dim;
    let uniform = vec![1.0; corpus.languages];
    td.train.language_weights = raw.td_weights.unwrap_or_else(|| uniform.clone());
    ti.train.language_weights = raw.ti_weights.unwrap_or_else(|| uniform.clone());

    let xeval_models = xeval_models.unwrap_or_else(|| {
        let all: Vec<usize> = (0..corpus.languages).collect();
        std::iter::once(all).chain((0..corpus.languages).map(|l| vec![l])).collect()
    });

    let config = ExperimentConfig {
        seed,
        paths: Paths {
            corpus: raw.corpus_dir.unwrap_or_else(|| output.join("corpus")),
            models: raw.models_dir.unwrap_or_else(|| output.join("models")),
            scores: raw.scores_dir.unwrap_or_else(|| output.join("scores")),
            reports: raw.reports_dir.unwrap_or_else(|| output.join("reports")),
            output,
        },
        corpus,
        trials,
        td,
        ti,
        fusion_grid_step,
        triage,
        cost,
        xeval_models,
    };
    validate(&config).map_err(|e| end(e.to_string()))?;
    Ok(config)
}

fn validate(c: &ExperimentConfig) -> Result<()> {
    c.corpus.validate()?;
    for (name, m) in [("td", &c.td), ("ti", &c.ti)] {
        m.network
            .validate()
            .map_err(|e| Error::Invalid(format!("{name} network: {e}")))?;
        m.train
            .validate()
            .map_err(|e| Error::Invalid(format!("{name} training: {e}")))?;
        if m.train.language_weights.len() > c.corpus.languages {
            return Err(Error::Invalid(format!(
                "{name}.language_weights lists {} languages, corpus has {}",
                m.train.language_weights.len(),
                c.corpus.languages
            )));
        }
    }
    if c.trials.eval_speakers == 0 || c.trials.eval_speakers >= c.corpus.speakers_per_language {
        return Err(Error::Invalid(format!(
            "trials.eval_speakers must be in 1..{}",
            c.corpus.speakers_per_language
        )));
    }
    if c.trials.enroll == 0 || c.trials.targets == 0 || c.trials.nontargets == 0 {
        return Err(Error::Invalid("trial counts must be at least 1".into()));
    }
    crate::fusion::alpha_grid(c.fusion_grid_step)?;
    TriagePolicy::new(c.triage.lower, c.triage.upper, FusionWeight::new(0.5)?)?;
    c.triage.grid.values()?;
    if c.triage.priors.is_empty() || c.triage.priors.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Invalid("triage.priors must be values in [0, 1]".into()));
    }
    if !(c.cost.keyword_seconds > 0.0 && c.cost.query_seconds > 0.0) {
        return Err(Error::Invalid("cost durations must be positive".into()));
    }
    if c.xeval_models.is_empty() {
        return Err(Error::Invalid("xeval.models must list at least one language set".into()));
    }
    for set in &c.xeval_models {
        if let Some(l) = set.iter().find(|&&l| l >= c.corpus.languages) {
            return Err(Error::Invalid(format!(
                "xeval language {l} outside corpus of {} languages",
                c.corpus.languages
            )));
        }
    }
    Ok(())
}
