//! Equal error rate, FAR/FRR curves and cross-language evaluation tables.
//!
//! Conventions: a trial is accepted when `score >= threshold`, so
//! `FRR(t) = #{target < t} / #target` and `FAR(t) = #{nontarget >= t} / #nontarget`.
//! Candidate thresholds are the distinct scores plus one point beyond each
//! end; the EER is read off where `FAR - FRR` changes sign, linearly
//! interpolating between the two neighbouring operating points. EERs are
//! fractions; percentages appear only in reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::corpus::{Corpus, TrialList};
use crate::dvector::Parameters;
use crate::error::{Error, Result};
use crate::scoring::score_trials;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub eer: f64,
    pub threshold: f64,
    pub num_targets: usize,
    pub num_nontargets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn check_classes(targets: &[f64], nontargets: &[f64]) -> Result<()> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Invalid(format!(
            "EER needs both classes, got {} target and {} nontarget scores",
            targets.len(),
            nontargets.len()
        )));
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    Ok(())
}

/// `(score, is_target)` pairs sorted ascending by score.
pub fn labeled_sorted(targets: &[f64], nontargets: &[f64]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = targets
        .iter()
        .map(|&s| (s, true))
        .chain(nontargets.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    all
}

fn curve_from_sorted(sorted: &[(f64, bool)], num_targets: usize, num_nontargets: usize) -> Vec<OperatingPoint> {
    let (nt, nn) = (num_targets as f64, num_nontargets as f64);
    let mut points = Vec::new();
    let (first, last) = (sorted[0].0, sorted[sorted.len() - 1].0);
    points.push(OperatingPoint {
        threshold: first - 1.0,
        far: 1.0,
        frr: 0.0,
    });
    let (mut targets_below, mut nontargets_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        points.push(OperatingPoint {
            threshold: s,
            far: (num_nontargets - nontargets_below) as f64 / nn,
            frr: targets_below as f64 / nt,
        });
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: last + 1.0,
        far: 0.0,
        frr: 1.0,
    });
    points
}

/// Interpolated FAR = FRR crossing of a curve that starts at FAR 1 / FRR 0
/// and ends at FAR 0 / FRR 1.
pub fn crossing(points: &[OperatingPoint]) -> (f64, f64) {
    let k = points
        .iter()
        .position(|p| p.far - p.frr <= 0.0)
        .expect("curve ends at FAR 0, FRR 1");
    let hi = points[k];
    let d_hi = hi.far - hi.frr;
    if d_hi == 0.0 || k == 0 {
        return (hi.far, hi.threshold);
    }
    let lo = points[k - 1];
    let d_lo = lo.far - lo.frr;
    let lambda = d_lo / (d_lo - d_hi);
    (
        lo.far + lambda * (hi.far - lo.far),
        lo.threshold + lambda * (hi.threshold - lo.threshold),
    )
}

/// EER of an already sorted, labeled score list with both classes present.
pub fn eer_from_sorted(sorted: &[(f64, bool)], num_targets: usize, num_nontargets: usize) -> EvalResult {
    let (eer, threshold) = crossing(&curve_from_sorted(sorted, num_targets, num_nontargets));
    EvalResult {
        eer,
        threshold,
        num_targets,
        num_nontargets,
    }
}

pub fn compute_eer(targets: &[f64], nontargets: &[f64]) -> Result<EvalResult> {
    check_classes(targets, nontargets)?;
    Ok(eer_from_sorted(
        &labeled_sorted(targets, nontargets),
        targets.len(),
        nontargets.len(),
    ))
}

/// Operating points along increasing thresholds, from FAR 1 / FRR 0 to
/// FAR 0 / FRR 1; one point per distinct score plus the two extremes.
pub fn far_frr_curve(targets: &[f64], nontargets: &[f64]) -> Result<Vec<OperatingPoint>> {
    check_classes(targets, nontargets)?;
    Ok(curve_from_sorted(
        &labeled_sorted(targets, nontargets),
        targets.len(),
        nontargets.len(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum System {
    Td,
    Ti,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Td => "td",
            System::Ti => "ti",
        }
    }
}

/// A TD/TI model pair trained on a set of languages.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub name: String,
    pub train_languages: Vec<usize>,
    pub td: Parameters,
    pub ti: Parameters,
}

#[derive(Debug, Clone)]
pub struct EvalSet {
    pub language: usize,
    pub corpus: Corpus,
    pub trials: TrialList,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixCell {
    pub model: String,
    pub train_languages: Vec<usize>,
    pub system: System,
    pub eval_language: usize,
    pub result: EvalResult,
    /// The model saw no training data of the evaluation language.
    pub cross_lingual: bool,
}

pub fn language_list(langs: &[usize]) -> String {
    langs.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
}

/// EER of every model on every evaluation set, TD and TI separately.
/// Cells are ordered model-major, then system, then evaluation set.
pub fn cross_eval_matrix(models: &[ModelPair], eval_sets: &[EvalSet]) -> Result<Vec<MatrixCell>> {
    let mut cells = Vec::with_capacity(models.len() * eval_sets.len() * 2);
    for model in models {
        let mut per_system: BTreeMap<System, Vec<MatrixCell>> = BTreeMap::new();
        for set in eval_sets {
            let locate = |e: Error| {
                Error::Invalid(format!(
                    "model {} on language {}: {e}",
                    model.name, set.language
                ))
            };
            let scored =
                score_trials(&model.td, Some(&model.ti), &set.corpus, &set.trials).map_err(locate)?;
            let split = |system: System| -> (Vec<f64>, Vec<f64>) {
                let mut t = Vec::new();
                let mut n = Vec::new();
                for s in &scored {
                    let v = match system {
                        System::Td => s.td_score,
                        System::Ti => s.ti_score.expect("TI scored"),
                    };
                    if s.is_target {
                        t.push(v)
                    } else {
                        n.push(v)
                    }
                }
                (t, n)
            };
            for system in [System::Td, System::Ti] {
                let (t, n) = split(system);
                let result = compute_eer(&t, &n).map_err(locate)?;
                per_system.entry(system).or_default().push(MatrixCell {
                    model: model.name.clone(),
                    train_languages: model.train_languages.clone(),
                    system,
                    eval_language: set.language,
                    result,
                    cross_lingual: !model.train_languages.contains(&set.language),
                });
            }
        }
        cells.extend(per_system.into_values().flatten());
    }
    Ok(cells)
}

/// `model,train_lang,system,eval_lang,eer_percent,cross_lingual`.
pub fn matrix_csv(cells: &[MatrixCell]) -> String {
    let mut out = String::from("model,train_lang,system,eval_lang,eer_percent,cross_lingual\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.2},{}",
            c.model,
            language_list(&c.train_languages),
            c.system.name(),
            c.eval_language,
            100.0 * c.result.eer,
            u8::from(c.cross_lingual)
        );
    }
    out
}

/// Plain-text table: one row per model and system, one column per
/// evaluation language, EER in percent. Cross-lingual cells carry a `*`.
pub fn matrix_table(cells: &[MatrixCell]) -> String {
    let langs: Vec<usize> = {
        let mut l: Vec<usize> = cells.iter().map(|c| c.eval_language).collect();
        l.sort_unstable();
        l.dedup();
        l
    };
    let mut rows: Vec<(String, BTreeMap<usize, &MatrixCell>)> = Vec::new();
    for c in cells {
        let label = format!("{}-{}", c.system.name().to_uppercase(), c.model);
        match rows.iter_mut().find(|(l, _)| *l == label) {
            Some((_, m)) => {
                m.insert(c.eval_language, c);
            }
            None => rows.push((label, BTreeMap::from([(c.eval_language, c)]))),
        }
    }
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:width$}", "system");
    for l in &langs {
        let _ = write!(out, " {:>8}", format!("lang{l}"));
    }
    out.push('\n');
    for (label, m) in &rows {
        let _ = write!(out, "{label:width$}");
        for l in &langs {
            match m.get(l) {
                Some(c) => {
                    let mark = if c.cross_lingual { "*" } else { " " };
                    let _ = write!(out, " {:>7.2}{mark}", 100.0 * c.result.eer);
                }
                None => out.push_str("        -"),
            }
        }
        out.push('\n');
    }
    out
}
