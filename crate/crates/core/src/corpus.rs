//! Deterministic synthetic multilingual corpus and trial lists.
//!
//! Every utterance is a keyword segment followed by a query segment, both in
//! feature space. Each frame is
//!
//! ```text
//! projection * voice(speaker) + content(t) + noise
//! ```
//!
//! where `voice = language_shift + speaker_scale * z` lives in a low-dimensional
//! voice space. On top of that each utterance carries a constant channel
//! offset drawn along a few directions of a shared channel bank. Languages sit
//! on a ring over the bank: language `l` uses directions `l, l+1, ...` (mod
//! the bank size), so neighbours share a channel condition and a model that
//! only learned to ignore one language's channels is misled by most others.
//! Keyword content is a sinusoid bank shared by every speaker
//! (with a small per-utterance phase jitter) and query content is a per-utterance
//! random sinusoid bank. All draws come from [`SplitMix64`] streams keyed by
//! `(seed, tag, language, speaker, utterance)` so that changing one count
//! never perturbs the streams of unrelated speakers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, Provenance};
use crate::rng::SplitMix64;

const TAG_PROJECTION: u64 = 1;
const TAG_LANGUAGE: u64 = 2;
const TAG_SPEAKER: u64 = 3;
const TAG_UTTERANCE: u64 = 4;
const TAG_KEYWORD: u64 = 5;
const TAG_CHANNEL_BANK: u64 = 6;
const TAG_CHANNEL_UTTERANCE: u64 = 7;
const TAG_TRIAL_ENROLL: u64 = 10;
const TAG_TRIAL_TARGET: u64 = 11;
const TAG_TRIAL_NONTARGET: u64 = 12;

/// Sinusoids in each content bank.
const CONTENT_COMPONENTS: usize = 3;
const KEYWORD_PHASE_JITTER: f64 = 0.5;
const META_FORMAT: &str = "svtriage-corpus-1";

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub languages: usize,
    pub speakers_per_language: usize,
    pub utterances_per_speaker: usize,
    pub keyword_frames: usize,
    pub query_frames: usize,
    pub feature_dim: usize,
    pub voice_dim: usize,
    pub language_shift_scale: f64,
    pub speaker_scale: f64,
    pub utterance_noise_scale: f64,
    pub content_scale: f64,
    /// Size of the shared channel bank.
    pub channel_directions: usize,
    /// Bank directions active in each language.
    pub channel_per_language: usize,
    pub channel_scale: f64,
    pub seed: u64,
    /// Per-language utterances-per-speaker, replacing the global count.
    pub utterance_overrides: BTreeMap<usize, usize>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            languages: 5,
            speakers_per_language: 40,
            utterances_per_speaker: 12,
            keyword_frames: 10,
            query_frames: 20,
            feature_dim: 12,
            voice_dim: 6,
            language_shift_scale: 1.0,
            speaker_scale: 1.0,
            utterance_noise_scale: 2.0,
            content_scale: 1.0,
            channel_directions: 5,
            channel_per_language: 2,
            channel_scale: 1.0,
            seed: 1,
            utterance_overrides: BTreeMap::new(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("languages", self.languages),
            ("speakers_per_language", self.speakers_per_language),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("keyword_frames", self.keyword_frames),
            ("query_frames", self.query_frames),
            ("feature_dim", self.feature_dim),
            ("voice_dim", self.voice_dim),
            ("channel_directions", self.channel_directions),
            ("channel_per_language", self.channel_per_language),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Invalid(format!("corpus {name} must be at least 1")));
            }
        }
        let scales = [
            ("language_shift_scale", self.language_shift_scale),
            ("speaker_scale", self.speaker_scale),
            ("utterance_noise_scale", self.utterance_noise_scale),
            ("content_scale", self.content_scale),
            ("channel_scale", self.channel_scale),
        ];
        for (name, v) in scales {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid(format!(
                    "corpus {name} must be a nonnegative number, got {v}"
                )));
            }
        }
        if self.channel_per_language > self.channel_directions {
            return Err(Error::Invalid(format!(
                "corpus channel_per_language {} exceeds channel_directions {}",
                self.channel_per_language, self.channel_directions
            )));
        }
        for (&lang, &count) in &self.utterance_overrides {
            if lang >= self.languages {
                return Err(Error::Invalid(format!(
                    "utterance override for language {lang}, corpus has {}",
                    self.languages
                )));
            }
            if count == 0 {
                return Err(Error::Invalid(format!(
                    "utterance override for language {lang} must be at least 1"
                )));
            }
        }
        Ok(())
    }

    pub fn utterances_for(&self, language: usize) -> usize {
        self.utterance_overrides
            .get(&language)
            .copied()
            .unwrap_or(self.utterances_per_speaker)
    }
}

pub fn speaker_id(language: usize, speaker: usize) -> String {
    format!("L{language:02}S{speaker:03}")
}

pub fn utterance_id(language: usize, speaker: usize, utterance: usize) -> String {
    format!("L{language:02}S{speaker:03}U{utterance:03}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub language: usize,
    pub keyword: FeatureSequence,
    pub query: FeatureSequence,
}

impl Utterance {
    /// Keyword frames followed by query frames.
    pub fn full(&self) -> FeatureSequence {
        self.keyword
            .concat(&self.query)
            .expect("segments share a dimension")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    spec: CorpusSpec,
    utterances: Vec<Utterance>,
    index: HashMap<String, usize>,
}

/// Stateless view of the generative model for one spec.
#[derive(Debug, Clone)]
pub(crate) struct Generator<'a> {
    spec: &'a CorpusSpec,
    projection: Vec<f64>,
    keyword_freqs: [f64; CONTENT_COMPONENTS],
    keyword_amps: Vec<f64>,
    /// `channel_directions` unit rows of length `feature_dim`.
    channel_bank: Vec<f64>,
}

impl<'a> Generator<'a> {
    pub(crate) fn new(spec: &'a CorpusSpec) -> Self {
        let (fd, vd) = (spec.feature_dim, spec.voice_dim);
        let mut rng = SplitMix64::stream(spec.seed, &[TAG_PROJECTION]);
        let norm = 1.0 / (vd as f64).sqrt();
        let projection = (0..fd * vd).map(|_| rng.gaussian() * norm).collect();

        let mut rng = SplitMix64::stream(spec.seed, &[TAG_KEYWORD]);
        let mut keyword_freqs = [0.0; CONTENT_COMPONENTS];
        for f in &mut keyword_freqs {
            *f = rng.uniform(0.1, 0.8);
        }
        let keyword_amps = (0..CONTENT_COMPONENTS * fd).map(|_| rng.gaussian()).collect();

        let mut rng = SplitMix64::stream(spec.seed, &[TAG_CHANNEL_BANK]);
        let mut channel_bank = Vec::with_capacity(spec.channel_directions * fd);
        for _ in 0..spec.channel_directions {
            let row: Vec<f64> = (0..fd).map(|_| rng.gaussian()).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            channel_bank.extend(row.iter().map(|v| v / norm));
        }
        Self {
            spec,
            projection,
            keyword_freqs,
            keyword_amps,
            channel_bank,
        }
    }

    /// Indices of the bank directions active in `language`.
    pub(crate) fn channel_subset(&self, language: usize) -> Vec<usize> {
        let k = self.spec.channel_directions;
        let mut subset: Vec<usize> = (0..self.spec.channel_per_language)
            .map(|j| (language + j) % k)
            .collect();
        subset.sort_unstable();
        subset
    }

    /// Constant per-utterance channel offset in feature space.
    pub(crate) fn channel_offset(&self, language: usize, speaker: usize, utt: usize) -> Vec<f64> {
        let fd = self.spec.feature_dim;
        let mut rng = SplitMix64::stream(
            self.spec.seed,
            &[TAG_CHANNEL_UTTERANCE, language as u64, speaker as u64, utt as u64],
        );
        let mut offset = vec![0.0; fd];
        for k in self.channel_subset(language) {
            let c = rng.gaussian() * self.spec.channel_scale;
            for (o, d) in offset.iter_mut().zip(&self.channel_bank[k * fd..(k + 1) * fd]) {
                *o += c * d;
            }
        }
        offset
    }

    pub(crate) fn language_shift(&self, language: usize) -> Vec<f64> {
        let mut rng = SplitMix64::stream(self.spec.seed, &[TAG_LANGUAGE, language as u64]);
        (0..self.spec.voice_dim)
            .map(|_| rng.gaussian() * self.spec.language_shift_scale)
            .collect()
    }

    /// Latent voice vector of one speaker.
    pub(crate) fn voice(&self, language: usize, speaker: usize) -> Vec<f64> {
        let mut rng = SplitMix64::stream(
            self.spec.seed,
            &[TAG_SPEAKER, language as u64, speaker as u64],
        );
        self.language_shift(language)
            .into_iter()
            .map(|s| s + rng.gaussian() * self.spec.speaker_scale)
            .collect()
    }

    /// Voice vector mapped into feature space; added to every frame.
    pub(crate) fn speaker_component(&self, language: usize, speaker: usize) -> Vec<f64> {
        let voice = self.voice(language, speaker);
        self.projection
            .chunks_exact(self.spec.voice_dim)
            .map(|row| row.iter().zip(&voice).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn sinusoids(
        &self,
        frames: usize,
        freqs: &[f64],
        phases: &[f64],
        amps: &[f64],
        out: &mut [f64],
    ) {
        let fd = self.spec.feature_dim;
        for t in 0..frames {
            for k in 0..freqs.len() {
                let s = self.spec.content_scale * (freqs[k] * t as f64 + phases[k]).sin();
                let amp = &amps[k * fd..(k + 1) * fd];
                for (o, a) in out[t * fd..(t + 1) * fd].iter_mut().zip(amp) {
                    *o += s * a;
                }
            }
        }
    }

    pub(crate) fn utterance(&self, language: usize, speaker: usize, utt: usize) -> Utterance {
        let spec = self.spec;
        let fd = spec.feature_dim;
        let mut component = self.speaker_component(language, speaker);
        for (c, o) in component.iter_mut().zip(self.channel_offset(language, speaker, utt)) {
            *c += o;
        }
        let mut rng = SplitMix64::stream(
            spec.seed,
            &[TAG_UTTERANCE, language as u64, speaker as u64, utt as u64],
        );

        let jitter = rng.uniform(-KEYWORD_PHASE_JITTER, KEYWORD_PHASE_JITTER);
        let keyword_phases = [jitter; CONTENT_COMPONENTS];
        let mut query_freqs = [0.0; CONTENT_COMPONENTS];
        let mut query_phases = [0.0; CONTENT_COMPONENTS];
        for k in 0..CONTENT_COMPONENTS {
            query_freqs[k] = rng.uniform(0.05, 1.0);
            query_phases[k] = rng.uniform(0.0, std::f64::consts::TAU);
        }
        let query_amps: Vec<f64> = (0..CONTENT_COMPONENTS * fd).map(|_| rng.gaussian()).collect();

        let mut segment = |frames: usize, freqs: &[f64], phases: &[f64], amps: &[f64]| {
            let mut data: Vec<f64> = (0..frames).flat_map(|_| component.iter().copied()).collect();
            self.sinusoids(frames, freqs, phases, amps, &mut data);
            for v in &mut data {
                *v += rng.gaussian() * spec.utterance_noise_scale;
                *v = *v as f32 as f64;
            }
            FeatureSequence::new(frames, fd, data, Provenance::Synthetic).expect("consistent shape")
        };
        let keyword = segment(
            spec.keyword_frames,
            &self.keyword_freqs,
            &keyword_phases,
            &self.keyword_amps,
        );
        let query = segment(spec.query_frames, &query_freqs, &query_phases, &query_amps);

        Utterance {
            id: utterance_id(language, speaker, utt),
            speaker: speaker_id(language, speaker),
            language,
            keyword,
            query,
        }
    }
}

/// Generates the full corpus for `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let gen = Generator::new(spec);
    let mut utterances = Vec::new();
    for lang in 0..spec.languages {
        for spk in 0..spec.speakers_per_language {
            for utt in 0..spec.utterances_for(lang) {
                utterances.push(gen.utterance(lang, spk, utt));
            }
        }
    }
    Ok(Corpus::from_parts(spec.clone(), utterances))
}

impl Corpus {
    fn from_parts(spec: CorpusSpec, utterances: Vec<Utterance>) -> Self {
        let index = utterances
            .iter()
            .enumerate()
            .map(|(i, u)| (u.id.clone(), i))
            .collect();
        Self {
            spec,
            utterances,
            index,
        }
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&Utterance> {
        self.index
            .get(id)
            .map(|&i| &self.utterances[i])
            .ok_or_else(|| Error::Lookup(format!("utterance {id}")))
    }

    /// Utterances satisfying `keep`, in corpus order.
    pub fn filter(&self, keep: impl Fn(&Utterance) -> bool) -> Corpus {
        let utterances = self.utterances.iter().filter(|u| keep(u)).cloned().collect();
        Corpus::from_parts(self.spec.clone(), utterances)
    }

    pub fn select_languages(&self, languages: &[usize]) -> Corpus {
        self.filter(|u| languages.contains(&u.language))
    }

    /// Splits off the last `eval_speakers` speakers of every language as a
    /// held-out set; returns `(train, eval)`.
    pub fn split_speakers(&self, eval_speakers: usize) -> Result<(Corpus, Corpus)> {
        if eval_speakers >= self.spec.speakers_per_language {
            return Err(Error::Capacity(format!(
                "{eval_speakers} held-out speakers per language leaves no training speakers (have {})",
                self.spec.speakers_per_language
            )));
        }
        let cutoff = self.spec.speakers_per_language - eval_speakers;
        let rank = |u: &Utterance| -> usize { u.speaker[4..].parse().expect("generated speaker id") };
        Ok((
            self.filter(|u| rank(u) < cutoff),
            self.filter(|u| rank(u) >= cutoff),
        ))
    }

    /// Utterance ids grouped by speaker, speakers in sorted order.
    pub fn by_speaker(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut map: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for u in &self.utterances {
            map.entry(u.speaker.as_str()).or_default().push(u.id.as_str());
        }
        map
    }

    pub fn languages(&self) -> BTreeSet<usize> {
        self.utterances.iter().map(|u| u.language).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let feats = dir.join("feats");
        fs::create_dir_all(&feats).map_err(|e| Error::io(feats.display().to_string(), e))?;
        let s = &self.spec;
        let mut meta = String::new();
        let _ = writeln!(meta, "format={META_FORMAT}");
        let _ = writeln!(meta, "languages={}", s.languages);
        let _ = writeln!(meta, "speakers_per_language={}", s.speakers_per_language);
        let _ = writeln!(meta, "utterances_per_speaker={}", s.utterances_per_speaker);
        let _ = writeln!(meta, "keyword_frames={}", s.keyword_frames);
        let _ = writeln!(meta, "query_frames={}", s.query_frames);
        let _ = writeln!(meta, "feature_dim={}", s.feature_dim);
        let _ = writeln!(meta, "voice_dim={}", s.voice_dim);
        let _ = writeln!(meta, "language_shift_scale={}", s.language_shift_scale);
        let _ = writeln!(meta, "speaker_scale={}", s.speaker_scale);
        let _ = writeln!(meta, "utterance_noise_scale={}", s.utterance_noise_scale);
        let _ = writeln!(meta, "content_scale={}", s.content_scale);
        let _ = writeln!(meta, "channel_directions={}", s.channel_directions);
        let _ = writeln!(meta, "channel_per_language={}", s.channel_per_language);
        let _ = writeln!(meta, "channel_scale={}", s.channel_scale);
        let _ = writeln!(meta, "seed={}", s.seed);
        for (lang, count) in &s.utterance_overrides {
            let _ = writeln!(meta, "override.{lang}={count}");
        }
        let _ = writeln!(meta, "utterances={}", self.utterances.len());
        for (i, u) in self.utterances.iter().enumerate() {
            let _ = writeln!(meta, "utterance.{i}={} {} {}", u.id, u.speaker, u.language);
            u.keyword.write(&feats.join(format!("{}.kw.feat", u.id)))?;
            u.query.write(&feats.join(format!("{}.qy.feat", u.id)))?;
        }
        let path = dir.join("corpus.meta");
        fs::write(&path, meta).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let path = dir.join("corpus.meta");
        let name = path.display().to_string();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&name, e))?;
        let mut spec = CorpusSpec {
            utterance_overrides: BTreeMap::new(),
            ..CorpusSpec::default()
        };
        let mut entries: Vec<(usize, String, String, usize)> = Vec::new();
        let mut declared = None;
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(&name, line_no, "expected key=value"))?;
            let bad = |what: &str| Error::parse(&name, line_no, format!("invalid {what}: {value}"));
            let count = || value.parse::<usize>().map_err(|_| bad(key));
            let real = || value.parse::<f64>().map_err(|_| bad(key));
            match key {
                "format" if value == META_FORMAT => {}
                "format" => return Err(bad("format")),
                "languages" => spec.languages = count()?,
                "speakers_per_language" => spec.speakers_per_language = count()?,
                "utterances_per_speaker" => spec.utterances_per_speaker = count()?,
                "keyword_frames" => spec.keyword_frames = count()?,
                "query_frames" => spec.query_frames = count()?,
                "feature_dim" => spec.feature_dim = count()?,
                "voice_dim" => spec.voice_dim = count()?,
                "language_shift_scale" => spec.language_shift_scale = real()?,
                "speaker_scale" => spec.speaker_scale = real()?,
                "utterance_noise_scale" => spec.utterance_noise_scale = real()?,
                "content_scale" => spec.content_scale = real()?,
                "channel_directions" => spec.channel_directions = count()?,
                "channel_per_language" => spec.channel_per_language = count()?,
                "channel_scale" => spec.channel_scale = real()?,
                "seed" => spec.seed = value.parse().map_err(|_| bad("seed"))?,
                "utterances" => declared = Some(count()?),
                _ => {
                    if let Some(lang) = key.strip_prefix("override.") {
                        let lang = lang.parse().map_err(|_| bad("override language"))?;
                        spec.utterance_overrides.insert(lang, count()?);
                    } else if let Some(idx) = key.strip_prefix("utterance.") {
                        let idx = idx.parse().map_err(|_| bad("utterance index"))?;
                        let mut parts = value.split(' ');
                        let (Some(id), Some(spk), Some(lang), None) =
                            (parts.next(), parts.next(), parts.next(), parts.next())
                        else {
                            return Err(bad("utterance entry"));
                        };
                        let lang = lang.parse().map_err(|_| bad("utterance language"))?;
                        entries.push((idx, id.to_string(), spk.to_string(), lang));
                    } else {
                        return Err(Error::parse(&name, line_no, format!("unknown key {key}")));
                    }
                }
            }
        }
        spec.validate()?;
        entries.sort_by_key(|e| e.0);
        if declared != Some(entries.len()) || entries.iter().enumerate().any(|(i, e)| e.0 != i) {
            return Err(Error::parse(&name, 0, "utterance index is incomplete"));
        }
        let feats = dir.join("feats");
        let mut utterances = Vec::with_capacity(entries.len());
        for (_, id, speaker, language) in entries {
            let keyword =
                FeatureSequence::read(&feats.join(format!("{id}.kw.feat")), Provenance::Synthetic)?;
            let query =
                FeatureSequence::read(&feats.join(format!("{id}.qy.feat")), Provenance::Synthetic)?;
            utterances.push(Utterance {
                id,
                speaker,
                language,
                keyword,
                query,
            });
        }
        Ok(Corpus::from_parts(spec, utterances))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll_speaker: String,
    pub enroll_utterances: Vec<String>,
    pub test_utterance: String,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                t.enroll_speaker,
                t.enroll_utterances.join(","),
                t.test_utterance,
                if t.is_target { "tgt" } else { "non" }
            );
        }
        out
    }

    pub fn from_tsv(text: &str, source: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let err = |m: &str| Error::parse(source, n + 1, m);
            if fields.len() != 4 {
                return Err(err("expected 4 tab-separated fields"));
            }
            let is_target = match fields[3] {
                "tgt" => true,
                "non" => false,
                _ => return Err(err("label must be tgt or non")),
            };
            if fields[1].is_empty() {
                return Err(err("empty enrollment list"));
            }
            trials.push(Trial {
                enroll_speaker: fields[0].to_string(),
                enroll_utterances: fields[1].split(',').map(str::to_string).collect(),
                test_utterance: fields[2].to_string(),
                is_target,
            });
        }
        Ok(Self { trials })
    }
}

/// `n` distinct indices from `0..total`, ascending (Floyd's algorithm).
fn sample_distinct(rng: &mut SplitMix64, total: usize, n: usize) -> Vec<usize> {
    let mut chosen = BTreeSet::new();
    for j in total - n..total {
        let t = rng.below(j + 1);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    chosen.into_iter().collect()
}

/// Builds target and nontarget trials with a fixed enrollment set per speaker.
///
/// Each speaker with more than `enroll_per_speaker` utterances gets a seeded
/// random enrollment subset; the remaining utterances form its test pool.
/// Targets pair a speaker with its own test pool, nontargets with any other
/// speaker's test pool. Trials are drawn uniformly without replacement.
pub fn split_trials(
    corpus: &Corpus,
    target_trials: usize,
    nontarget_trials: usize,
    enroll_per_speaker: usize,
    seed: u64,
) -> Result<TrialList> {
    if enroll_per_speaker == 0 {
        return Err(Error::Invalid("enrollment needs at least one utterance".into()));
    }
    struct Pool<'c> {
        speaker: &'c str,
        enroll: Vec<String>,
        test: Vec<&'c str>,
    }
    let pools: Vec<Pool> = corpus
        .by_speaker()
        .into_iter()
        .enumerate()
        .filter(|(_, (_, utts))| utts.len() > enroll_per_speaker)
        .map(|(i, (speaker, mut utts))| {
            SplitMix64::stream(seed, &[TAG_TRIAL_ENROLL, i as u64]).shuffle(&mut utts);
            let test = utts.split_off(enroll_per_speaker);
            Pool {
                speaker,
                enroll: utts.into_iter().map(str::to_string).collect(),
                test,
            }
        })
        .collect();

    let total_test: usize = pools.iter().map(|p| p.test.len()).sum();
    let target_capacity = total_test;
    let nontarget_capacity: usize = pools.iter().map(|p| total_test - p.test.len()).sum();
    if target_trials > target_capacity {
        return Err(Error::Capacity(format!(
            "requested {target_trials} target trials but only {target_capacity} are available ({} short)",
            target_trials - target_capacity
        )));
    }
    if nontarget_trials > nontarget_capacity {
        return Err(Error::Capacity(format!(
            "requested {nontarget_trials} nontarget trials but only {nontarget_capacity} are available ({} short)",
            nontarget_trials - nontarget_capacity
        )));
    }

    let all_tests: Vec<(usize, &str)> = pools
        .iter()
        .enumerate()
        .flat_map(|(p, pool)| pool.test.iter().map(move |&u| (p, u)))
        .collect();
    let trial = |pool: usize, test: &str, is_target: bool| Trial {
        enroll_speaker: pools[pool].speaker.to_string(),
        enroll_utterances: pools[pool].enroll.clone(),
        test_utterance: test.to_string(),
        is_target,
    };

    let mut trials = Vec::with_capacity(target_trials + nontarget_trials);
    let mut rng = SplitMix64::stream(seed, &[TAG_TRIAL_TARGET]);
    for idx in sample_distinct(&mut rng, target_capacity, target_trials) {
        let (p, u) = all_tests[idx];
        trials.push(trial(p, u, true));
    }

    // Nontarget index space: pool p owns total_test - |test_p| consecutive slots,
    // enumerating every foreign test utterance in corpus order.
    let mut starts = Vec::with_capacity(pools.len());
    let mut acc = 0;
    for pool in &pools {
        starts.push(acc);
        acc += total_test - pool.test.len();
    }
    let mut rng = SplitMix64::stream(seed, &[TAG_TRIAL_NONTARGET]);
    for idx in sample_distinct(&mut rng, nontarget_capacity, nontarget_trials) {
        let p = starts.partition_point(|&s| s <= idx) - 1;
        let mut offset = idx - starts[p];
        let own_start = all_tests.partition_point(|&(q, _)| q < p);
        if offset >= own_start {
            offset += pools[p].test.len();
        }
        trials.push(trial(p, all_tests[offset].1, false));
    }
    Ok(TrialList { trials })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            languages: 2,
            speakers_per_language: 3,
            utterances_per_speaker: 4,
            keyword_frames: 5,
            query_frames: 7,
            feature_dim: 6,
            voice_dim: 3,
            seed: 7,
            ..CorpusSpec::default()
        }
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn mean_frame(f: &FeatureSequence) -> Vec<f64> {
        let mut m = vec![0.0; f.dim()];
        for row in f.rows() {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b / f.frames() as f64;
            }
        }
        m
    }

    #[test]
    fn counts_and_shapes() {
        let c = generate_corpus(&small_spec()).unwrap();
        assert_eq!(c.len(), 24);
        for u in c.utterances() {
            assert_eq!((u.keyword.frames(), u.keyword.dim()), (5, 6));
            assert_eq!((u.query.frames(), u.query.dim()), (7, 6));
        }
        assert!(c.by_speaker().values().all(|v| v.len() == 4));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            generate_corpus(&small_spec()).unwrap(),
            generate_corpus(&small_spec()).unwrap()
        );
        let other = CorpusSpec {
            seed: 8,
            ..small_spec()
        };
        assert_ne!(
            generate_corpus(&small_spec()).unwrap(),
            generate_corpus(&other).unwrap()
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            CorpusSpec {
                languages: 0,
                ..small_spec()
            },
            CorpusSpec {
                speaker_scale: -1.0,
                ..small_spec()
            },
            CorpusSpec {
                query_frames: 0,
                ..small_spec()
            },
        ] {
            assert!(matches!(generate_corpus(&bad), Err(Error::Invalid(_))));
        }
    }

    #[test]
    fn overrides_change_only_their_language() {
        let mut spec = small_spec();
        spec.utterance_overrides.insert(1, 2);
        let c = generate_corpus(&spec).unwrap();
        assert_eq!(c.len(), 3 * 4 + 3 * 2);
        let base = generate_corpus(&small_spec()).unwrap();
        assert_eq!(base.get("L00S001U002").unwrap(), c.get("L00S001U002").unwrap());
        assert_eq!(base.get("L01S001U001").unwrap(), c.get("L01S001U001").unwrap());
    }

    #[test]
    fn noiseless_same_speaker_components_match() {
        let spec = CorpusSpec {
            utterance_noise_scale: 0.0,
            channel_scale: 0.0,
            ..small_spec()
        };
        let gen = Generator::new(&spec);
        let a = gen.utterance(0, 1, 0);
        let b = gen.utterance(0, 1, 3);
        let component = gen.speaker_component(0, 1);
        // Remove the content trajectory by regenerating with content disabled.
        let flat = CorpusSpec {
            content_scale: 0.0,
            ..spec.clone()
        };
        let flat_gen = Generator::new(&flat);
        let fa = flat_gen.utterance(0, 1, 0);
        let fb = flat_gen.utterance(0, 1, 3);
        for row in fa.keyword.rows().chain(fb.query.rows()) {
            for (x, c) in row.iter().zip(&component) {
                assert_eq!(*x, *c as f32 as f64);
            }
        }
        let cos = cosine(&mean_frame(&fa.full()), &mean_frame(&fb.full()));
        assert!((cos - 1.0).abs() < 1e-12);
        // With content on, the two utterances still differ.
        assert_ne!(a.keyword, b.keyword);
    }

    #[test]
    fn channel_offsets_stay_in_the_language_subset() {
        let spec = CorpusSpec {
            languages: 6,
            channel_directions: 5,
            channel_per_language: 2,
            ..small_spec()
        };
        let gen = Generator::new(&spec);
        let fd = spec.feature_dim;
        let subsets: Vec<Vec<usize>> = (0..6).map(|l| gen.channel_subset(l)).collect();
        assert!(subsets.iter().all(|s| s.len() == 2 && s[0] < s[1] && s[1] < 5));
        assert_eq!(subsets[0], [0, 1]);
        assert_eq!(subsets[4], [0, 4]);
        assert_eq!(subsets[5], [0, 1]);
        for (k, row) in gen.channel_bank.chunks_exact(fd).enumerate() {
            assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12, "row {k}");
        }
        // The offset is orthogonal to everything orthogonal to its two directions.
        let offset = gen.channel_offset(2, 1, 0);
        let (d0, d1) = (subsets[2][0], subsets[2][1]);
        let basis = [&gen.channel_bank[d0 * fd..(d0 + 1) * fd], &gen.channel_bank[d1 * fd..(d1 + 1) * fd]];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let g = [[1.0, dot(basis[0], basis[1])], [dot(basis[0], basis[1]), 1.0]];
        let r = [dot(basis[0], &offset), dot(basis[1], &offset)];
        let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
        let c0 = (r[0] * g[1][1] - r[1] * g[0][1]) / det;
        let c1 = (r[1] * g[0][0] - r[0] * g[1][0]) / det;
        for i in 0..fd {
            assert!((offset[i] - c0 * basis[0][i] - c1 * basis[1][i]).abs() < 1e-12);
        }
        assert!(offset.iter().any(|v| *v != 0.0));
        assert_ne!(offset, gen.channel_offset(2, 1, 1));
        let silent = CorpusSpec { channel_scale: 0.0, ..spec.clone() };
        assert!(Generator::new(&silent).channel_offset(2, 1, 0).iter().all(|v| *v == 0.0));
        let bad = CorpusSpec { channel_per_language: 6, ..spec };
        assert!(matches!(generate_corpus(&bad), Err(Error::Invalid(_))));
    }

    #[test]
    fn same_speaker_voices_closer_than_different_speakers() {
        let spec = CorpusSpec {
            speakers_per_language: 30,
            voice_dim: 8,
            ..small_spec()
        };
        let gen = Generator::new(&spec);
        let voices: Vec<Vec<f64>> = (0..30).map(|s| gen.voice(0, s)).collect();
        assert_eq!(voices[3], gen.voice(0, 3));
        let mut cross = 0.0;
        let mut n = 0.0;
        for i in 0..30 {
            for j in i + 1..30 {
                cross += cosine(&voices[i], &voices[j]);
                n += 1.0;
            }
        }
        assert!(cross / n < 0.9);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = small_spec();
        spec.utterance_overrides.insert(0, 5);
        let c = generate_corpus(&spec).unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), c);
    }

    #[test]
    fn split_speakers_holds_out_tail() {
        let c = generate_corpus(&small_spec()).unwrap();
        let (train, eval) = c.split_speakers(1).unwrap();
        assert_eq!(train.by_speaker().len(), 4);
        assert_eq!(
            eval.by_speaker().keys().copied().collect::<Vec<_>>(),
            vec!["L00S002", "L01S002"]
        );
        assert!(c.split_speakers(3).is_err());
    }

    #[test]
    fn trials_have_requested_counts_and_labels() {
        let spec = CorpusSpec {
            speakers_per_language: 20,
            utterances_per_speaker: 8,
            ..small_spec()
        };
        let c = generate_corpus(&spec).unwrap();
        let t = split_trials(&c, 100, 100, 3, 11).unwrap();
        assert_eq!(t.trials.iter().filter(|t| t.is_target).count(), 100);
        assert_eq!(t.trials.iter().filter(|t| !t.is_target).count(), 100);
        assert!(t.trials.iter().all(|t| t.enroll_utterances.len() == 3));
        assert_eq!(t, split_trials(&c, 100, 100, 3, 11).unwrap());

        let enrolled: BTreeSet<&str> = t
            .trials
            .iter()
            .flat_map(|t| t.enroll_utterances.iter().map(String::as_str))
            .collect();
        for trial in &t.trials {
            assert!(!enrolled.contains(trial.test_utterance.as_str()));
            let test_spk = &c.get(&trial.test_utterance).unwrap().speaker;
            assert_eq!(trial.is_target, *test_spk == trial.enroll_speaker);
            for e in &trial.enroll_utterances {
                assert_eq!(c.get(e).unwrap().speaker, trial.enroll_speaker);
            }
        }
        let distinct: BTreeSet<(&str, &str)> = t
            .trials
            .iter()
            .map(|t| (t.enroll_speaker.as_str(), t.test_utterance.as_str()))
            .collect();
        assert_eq!(distinct.len(), 200);
    }

    #[test]
    fn exhaustive_trials_cover_every_pair() {
        let c = generate_corpus(&small_spec()).unwrap();
        // 6 speakers, 4 utterances, 1 enrolled: 3 test each, 18 total.
        let t = split_trials(&c, 18, 6 * 15, 1, 2).unwrap();
        let distinct: BTreeSet<(&str, &str)> = t
            .trials
            .iter()
            .map(|t| (t.enroll_speaker.as_str(), t.test_utterance.as_str()))
            .collect();
        assert_eq!(distinct.len(), 18 + 90);
    }

    #[test]
    fn trial_capacity_errors_name_shortfall() {
        let c = generate_corpus(&small_spec()).unwrap();
        match split_trials(&c, 19, 0, 1, 2) {
            Err(Error::Capacity(msg)) => assert!(msg.contains("1 short"), "{msg}"),
            other => panic!("expected capacity error, got {other:?}"),
        }
        assert!(matches!(split_trials(&c, 0, 0, 4, 2).map(|t| t.len()), Ok(0)));
        assert!(split_trials(&c, 1, 0, 4, 2).is_err());
    }

    #[test]
    fn trial_tsv_roundtrip() {
        let c = generate_corpus(&small_spec()).unwrap();
        let t = split_trials(&c, 5, 5, 2, 3).unwrap();
        let text = t.to_tsv();
        assert!(text.lines().next().unwrap().split('\t').count() == 4);
        assert_eq!(TrialList::from_tsv(&text, "mem").unwrap(), t);
        assert!(TrialList::from_tsv("a\tb\tc\tmaybe\n", "mem").is_err());
    }
}
