//! Enrollment and cosine trial scoring for the TD (keyword) and TI
//! (keyword followed by query) systems.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::corpus::{Corpus, TrialList};
use crate::dvector::{forward_embedding, EmbeddingVector, Parameters, EMBEDDING_NORM_TOLERANCE};
use crate::error::{Error, Result};
use crate::train::Segment;

/// Mean norms below this count as a zero vector.
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub td_embedding: EmbeddingVector,
    pub ti_embedding: Option<EmbeddingVector>,
    pub enrollment_utterances: Vec<String>,
}

/// One scored trial, as written to and read from score files.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub enroll_speaker: String,
    pub test_utterance: String,
    pub is_target: bool,
    pub td_score: f64,
    pub ti_score: Option<f64>,
}

/// L2-normalized mean of unit embeddings.
pub fn aggregate_enrollment(embeddings: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Invalid("enrollment needs at least one embedding".into()))?;
    if embeddings.len() == 1 {
        return Ok(first.clone());
    }
    let dim = first.dim();
    let mut mean = vec![0.0; dim];
    for e in embeddings {
        if e.dim() != dim {
            return Err(Error::Shape(format!(
                "enrollment embeddings of dim {dim} and {}",
                e.dim()
            )));
        }
        for (m, v) in mean.iter_mut().zip(e.values()) {
            *m += v;
        }
    }
    let n = embeddings.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    if crate::dvector::l2(&mean) < DEGENERATE_NORM {
        return Err(Error::DegenerateEnrollment);
    }
    EmbeddingVector::normalized(mean)
}

/// Dot product of two unit embeddings.
pub fn cosine_score(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    for e in [a, b] {
        let norm = e.norm();
        if !((norm - 1.0).abs() <= EMBEDDING_NORM_TOLERANCE) {
            return Err(Error::Contract(norm));
        }
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("cosine of dim {} and {}", a.dim(), b.dim())));
    }
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum())
}

struct EmbeddingCache<'a> {
    params: &'a Parameters,
    segment: Segment,
    corpus: &'a Corpus,
    cache: HashMap<String, EmbeddingVector>,
}

impl<'a> EmbeddingCache<'a> {
    fn new(params: &'a Parameters, segment: Segment, corpus: &'a Corpus) -> Result<Self> {
        if params.spec.input_dim != corpus.spec().feature_dim {
            return Err(Error::Shape(format!(
                "model input dim {} does not match corpus feature dim {}",
                params.spec.input_dim,
                corpus.spec().feature_dim
            )));
        }
        Ok(Self {
            params,
            segment,
            corpus,
            cache: HashMap::new(),
        })
    }

    fn get(&mut self, id: &str) -> Result<EmbeddingVector> {
        if let Some(e) = self.cache.get(id) {
            return Ok(e.clone());
        }
        let utt = self.corpus.get(id)?;
        let e = forward_embedding(self.params, &self.segment.features(utt))?;
        self.cache.insert(id.to_string(), e.clone());
        Ok(e)
    }

    fn enroll(&mut self, ids: &[String]) -> Result<EmbeddingVector> {
        let embeddings = ids.iter().map(|id| self.get(id)).collect::<Result<Vec<_>>>()?;
        aggregate_enrollment(&embeddings)
    }
}

/// Scores every trial with the TD model on keyword segments and, when given,
/// the TI model on keyword+query. Output order follows the trial list.
pub fn score_trials(
    td_model: &Parameters,
    ti_model: Option<&Parameters>,
    corpus: &Corpus,
    trials: &TrialList,
) -> Result<Vec<ScoredTrial>> {
    let mut td = EmbeddingCache::new(td_model, Segment::KeywordOnly, corpus)?;
    let mut ti = ti_model
        .map(|p| EmbeddingCache::new(p, Segment::KeywordPlusQuery, corpus))
        .transpose()?;
    let mut profiles: HashMap<String, SpeakerProfile> = HashMap::new();
    let mut out = Vec::with_capacity(trials.len());
    for trial in &trials.trials {
        let key = format!("{}\t{}", trial.enroll_speaker, trial.enroll_utterances.join(","));
        if !profiles.contains_key(&key) {
            let profile = SpeakerProfile {
                speaker_id: trial.enroll_speaker.clone(),
                td_embedding: td.enroll(&trial.enroll_utterances)?,
                ti_embedding: ti
                    .as_mut()
                    .map(|c| c.enroll(&trial.enroll_utterances))
                    .transpose()?,
                enrollment_utterances: trial.enroll_utterances.clone(),
            };
            profiles.insert(key.clone(), profile);
        }
        let profile = &profiles[&key];
        let td_score = cosine_score(&profile.td_embedding, &td.get(&trial.test_utterance)?)?;
        let ti_score = match (ti.as_mut(), &profile.ti_embedding) {
            (Some(cache), Some(enrolled)) => {
                Some(cosine_score(enrolled, &cache.get(&trial.test_utterance)?)?)
            }
            _ => None,
        };
        out.push(ScoredTrial {
            enroll_speaker: trial.enroll_speaker.clone(),
            test_utterance: trial.test_utterance.clone(),
            is_target: trial.is_target,
            td_score,
            ti_score,
        });
    }
    Ok(out)
}

/// Score file: `enroll_speaker<TAB>test_utt<TAB>tgt|non<TAB>td<TAB>ti`,
/// scores with 9 decimals, `-` for a missing TI score.
pub fn scores_to_tsv(scored: &[ScoredTrial]) -> String {
    let mut out = String::new();
    for s in scored {
        let ti = s
            .ti_score
            .map_or_else(|| "-".to_string(), |v| format!("{v:.9}"));
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.9}\t{}",
            s.enroll_speaker,
            s.test_utterance,
            if s.is_target { "tgt" } else { "non" },
            s.td_score,
            ti
        );
    }
    out
}

pub fn scores_from_tsv(text: &str, source: &str) -> Result<Vec<ScoredTrial>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |m: &str| Error::parse(source, n + 1, m);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(err("expected 5 tab-separated fields"));
        }
        let is_target = match f[2] {
            "tgt" => true,
            "non" => false,
            _ => return Err(err("label must be tgt or non")),
        };
        let parse = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| err("invalid score"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err("non-finite score"))
            }
        };
        out.push(ScoredTrial {
            enroll_speaker: f[0].to_string(),
            test_utterance: f[1].to_string(),
            is_target,
            td_score: parse(f[3])?,
            ti_score: if f[4] == "-" { None } else { Some(parse(f[4])?) },
        });
    }
    Ok(out)
}

/// `(targets, nontargets)` for a chosen score.
pub fn split_by_label(scored: &[ScoredTrial], score: impl Fn(&ScoredTrial) -> f64) -> (Vec<f64>, Vec<f64>) {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for s in scored {
        if s.is_target {
            targets.push(score(s));
        } else {
            nontargets.push(score(s));
        }
    }
    (targets, nontargets)
}
