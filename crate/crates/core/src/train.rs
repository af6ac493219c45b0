//! SGD training with MultiReader-style language sampling.
//!
//! Each step draws a language with probability proportional to its weight,
//! then `N` distinct speakers of that language and `M` distinct utterances
//! per speaker. Gradients are clipped to a global L2 norm before the update,
//! and the GE2E scale is floored at [`MIN_GE2E_SCALE`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::corpus::{Corpus, Utterance};
use crate::dvector::{init_network, NetworkSpec};
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, Provenance};
use crate::ge2e::{backward, Ge2eBatch, LossKind};
use crate::rng::SplitMix64;

pub const MIN_GE2E_SCALE: f64 = 1e-3;
const TAG_BATCH: u64 = 200;
const TAG_NOISE: u64 = 201;

/// Which part of each utterance the model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    KeywordOnly,
    KeywordPlusQuery,
}

impl Segment {
    pub fn features(self, utt: &Utterance) -> FeatureSequence {
        match self {
            Segment::KeywordOnly => utt.keyword.clone(),
            Segment::KeywordPlusQuery => utt.full(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Segment::KeywordOnly => "keyword",
            Segment::KeywordPlusQuery => "keyword+query",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_speakers: usize,
    pub batch_utterances: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub loss: LossKind,
    /// Sampling weight per language id; languages past the end weigh 0.
    pub language_weights: Vec<f64>,
    /// Standard deviation of optional additive white noise on batch features.
    pub noise: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_speakers: 4,
            batch_utterances: 4,
            steps: 2000,
            learning_rate: 0.01,
            clip_norm: 3.0,
            loss: LossKind::Softmax,
            language_weights: vec![1.0],
            noise: 0.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_speakers < 2 || self.batch_utterances < 2 {
            return Err(Error::Invalid(format!(
                "batch must be at least 2 x 2, got {} x {}",
                self.batch_speakers, self.batch_utterances
            )));
        }
        if self.steps == 0 {
            return Err(Error::Invalid("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Invalid("clip norm must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Invalid("noise must be nonnegative".into()));
        }
        if self.language_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid("language weights must be nonnegative".into()));
        }
        if !self.language_weights.iter().any(|&w| w > 0.0) {
            return Err(Error::Invalid("at least one language weight must be positive".into()));
        }
        Ok(())
    }

    /// Languages with positive weight.
    pub fn languages(&self) -> Vec<usize> {
        self.language_weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(l, _)| l)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub language: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<LossRecord>,
}

impl TrainOutcome {
    /// Loss trace CSV: `step,loss,language`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,loss,language\n");
        for r in &self.trace {
            let _ = writeln!(out, "{},{:.9},{}", r.step, r.loss, r.language);
        }
        out
    }

    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.trace[range];
        slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64
    }
}

/// Speakers usable for batches, per language: speaker id to utterance indices.
type SpeakerPools<'c> = BTreeMap<usize, Vec<(&'c str, Vec<usize>)>>;

fn speaker_pools<'c>(corpus: &'c Corpus, cfg: &TrainConfig) -> Result<SpeakerPools<'c>> {
    let mut by_speaker: BTreeMap<(usize, &str), Vec<usize>> = BTreeMap::new();
    for (i, u) in corpus.utterances().iter().enumerate() {
        by_speaker.entry((u.language, u.speaker.as_str())).or_default().push(i);
    }
    let mut pools: SpeakerPools = BTreeMap::new();
    for ((lang, spk), utts) in by_speaker {
        if utts.len() >= cfg.batch_utterances {
            pools.entry(lang).or_default().push((spk, utts));
        }
    }
    for lang in cfg.languages() {
        let have = pools.get(&lang).map_or(0, Vec::len);
        if have < cfg.batch_speakers {
            return Err(Error::Capacity(format!(
                "language {lang} has {have} speakers with at least {} utterances, batches need {}",
                cfg.batch_utterances, cfg.batch_speakers
            )));
        }
    }
    Ok(pools)
}

/// Draws one batch: `(language, utterance indices in speaker-major order)`.
fn draw_batch(rng: &mut SplitMix64, pools: &SpeakerPools, cfg: &TrainConfig) -> (usize, Vec<usize>) {
    let language = rng.weighted(&cfg.language_weights);
    let speakers = &pools[&language];
    let mut order: Vec<usize> = (0..speakers.len()).collect();
    partial_shuffle(rng, &mut order, cfg.batch_speakers);
    let mut picks = Vec::with_capacity(cfg.batch_speakers * cfg.batch_utterances);
    for &s in &order[..cfg.batch_speakers] {
        let mut utts = speakers[s].1.clone();
        partial_shuffle(rng, &mut utts, cfg.batch_utterances);
        picks.extend_from_slice(&utts[..cfg.batch_utterances]);
    }
    (language, picks)
}

/// Moves a uniform random `k`-subset to the front.
fn partial_shuffle<T>(rng: &mut SplitMix64, items: &mut [T], k: usize) {
    for i in 0..k.min(items.len()) {
        let j = i + rng.below(items.len() - i);
        items.swap(i, j);
    }
}

fn with_noise(f: FeatureSequence, rng: &mut SplitMix64, scale: f64) -> FeatureSequence {
    if scale == 0.0 {
        return f;
    }
    let data = f.data().iter().map(|v| v + scale * rng.gaussian()).collect();
    FeatureSequence::new(f.frames(), f.dim(), data, Provenance::Synthetic).expect("same shape")
}

pub fn train(corpus: &Corpus, spec: NetworkSpec, cfg: &TrainConfig, segment: Segment) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.spec().feature_dim != spec.input_dim {
        return Err(Error::Shape(format!(
            "corpus feature dim {} does not match network input dim {}",
            corpus.spec().feature_dim,
            spec.input_dim
        )));
    }
    let pools = speaker_pools(corpus, cfg)?;
    let mut params = init_network(spec, cfg.seed)?;
    let mut batch_rng = SplitMix64::stream(cfg.seed, &[TAG_BATCH]);
    let mut noise_rng = SplitMix64::stream(cfg.seed, &[TAG_NOISE]);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (language, picks) = draw_batch(&mut batch_rng, &pools, cfg);
        let features = picks
            .iter()
            .map(|&i| with_noise(segment.features(&corpus.utterances()[i]), &mut noise_rng, cfg.noise))
            .collect();
        let batch = Ge2eBatch::new(cfg.batch_speakers, cfg.batch_utterances, features)?;
        let (loss, mut grads) = backward(&params, &batch, cfg.loss)
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
                other => other,
            })?;
        let norm = grads.l2_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("step {step}: non-finite gradient norm")));
        }
        if norm > cfg.clip_norm {
            grads.scale(cfg.clip_norm / norm);
        }
        params.add_scaled(&grads, -cfg.learning_rate);
        params.ge2e_scale = params.ge2e_scale.max(MIN_GE2E_SCALE);
        trace.push(LossRecord { step, loss, language });
    }

    params.round_to_f32();
    let languages: Vec<String> = cfg.languages().iter().map(usize::to_string).collect();
    let checkpoint = Checkpoint::new(params)
        .with_meta("segment", segment.name())
        .with_meta("loss", cfg.loss.to_string())
        .with_meta("train_languages", languages.join("+"))
        .with_meta("steps", cfg.steps.to_string());
    Ok(TrainOutcome { checkpoint, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    fn corpus() -> Corpus {
        generate_corpus(&CorpusSpec {
            languages: 3,
            speakers_per_language: 6,
            utterances_per_speaker: 4,
            keyword_frames: 4,
            query_frames: 4,
            feature_dim: 5,
            voice_dim: 3,
            seed: 2,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    fn cfg(weights: Vec<f64>) -> TrainConfig {
        TrainConfig {
            batch_speakers: 3,
            batch_utterances: 2,
            steps: 12,
            language_weights: weights,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_language_weight_gives_monolingual_batches() {
        let out = train(&corpus(), NetworkSpec::td_small(5), &cfg(vec![0.0, 1.0, 0.0]), Segment::KeywordOnly)
            .unwrap();
        assert!(out.trace.iter().all(|r| r.language == 1));
        assert_eq!(out.checkpoint.meta["train_languages"], "1");
    }

    #[test]
    fn training_is_deterministic() {
        let c = corpus();
        let run = || train(&c, NetworkSpec::td_small(5), &cfg(vec![1.0, 1.0, 1.0]), Segment::KeywordPlusQuery).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.checkpoint.to_text(), b.checkpoint.to_text());
        assert!(a.checkpoint.params.ge2e_scale > 0.0);
    }

    #[test]
    fn capacity_and_config_errors() {
        let c = corpus();
        let mut big = cfg(vec![1.0]);
        big.batch_speakers = 7;
        assert!(matches!(
            train(&c, NetworkSpec::td_small(5), &big, Segment::KeywordOnly),
            Err(Error::Capacity(_))
        ));
        assert!(train(&c, NetworkSpec::td_small(5), &cfg(vec![0.0, 0.0]), Segment::KeywordOnly).is_err());
        assert!(matches!(
            train(&c, NetworkSpec::td_small(6), &cfg(vec![1.0]), Segment::KeywordOnly),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn scale_floor_holds_under_aggressive_updates() {
        let c = corpus();
        let mut aggressive = cfg(vec![1.0]);
        aggressive.learning_rate = 50.0;
        aggressive.clip_norm = 1e3;
        let out = train(&c, NetworkSpec::td_small(5), &aggressive, Segment::KeywordOnly);
        if let Ok(out) = out {
            assert!(out.checkpoint.params.ge2e_scale >= MIN_GE2E_SCALE as f32 as f64);
        }
    }

    #[test]
    fn trace_csv_header() {
        let out = train(&corpus(), NetworkSpec::td_small(5), &cfg(vec![1.0]), Segment::KeywordOnly).unwrap();
        let csv = out.trace_csv();
        assert!(csv.starts_with("step,loss,language\n0,"));
        assert_eq!(csv.lines().count(), 13);
    }
}
