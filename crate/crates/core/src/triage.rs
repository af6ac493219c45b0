//! Confidence-band triage: keep the TD score when it is outside the band,
//! escalate to TD+TI fusion when it falls strictly inside.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fusion::{fuse, ti_scores, FusionWeight};
use crate::metrics::{eer_from_sorted, EvalResult};
use crate::scoring::ScoredTrial;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriagePolicy {
    lower: f64,
    upper: f64,
    alpha: FusionWeight,
}

impl TriagePolicy {
    pub fn new(lower: f64, upper: f64, alpha: FusionWeight) -> Result<Self> {
        if !(-1.0 <= lower && lower <= upper && upper <= 1.0) {
            return Err(Error::Invalid(format!(
                "triage band ({lower}, {upper}) must satisfy -1 <= lower <= upper <= 1"
            )));
        }
        Ok(Self { lower, upper, alpha })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn alpha(&self) -> FusionWeight {
        self.alpha
    }

    pub fn triggers(&self, td_score: f64) -> bool {
        self.lower < td_score && td_score < self.upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    ConfidentAccept,
    ConfidentReject,
    Trigger,
}

impl Decision {
    pub fn name(self) -> &'static str {
        match self {
            Decision::ConfidentAccept => "accept",
            Decision::ConfidentReject => "reject",
            Decision::Trigger => "trigger",
        }
    }
}

/// Scores on a band boundary count as confident.
pub fn triage_decide(td_score: f64, policy: &TriagePolicy) -> Decision {
    if td_score >= policy.upper {
        Decision::ConfidentAccept
    } else if td_score <= policy.lower {
        Decision::ConfidentReject
    } else {
        Decision::Trigger
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriagedTrial {
    pub trial: ScoredTrial,
    pub decision: Decision,
    pub final_score: f64,
    /// Only set when the trial triggered.
    pub ti_score: Option<f64>,
}

impl TriagedTrial {
    pub fn triggered(&self) -> bool {
        self.decision == Decision::Trigger
    }
}

pub fn apply_triage(scored: &[ScoredTrial], policy: &TriagePolicy) -> Result<Vec<TriagedTrial>> {
    apply_triage_with(scored, policy, |s| {
        Err(Error::IncompleteScores(format!(
            "triggered trial {} / {} has no TI score",
            s.enroll_speaker, s.test_utterance
        )))
    })
}

/// Like [`apply_triage`], calling `scorer` for triggered trials whose TI
/// score is missing.
pub fn apply_triage_with(
    scored: &[ScoredTrial],
    policy: &TriagePolicy,
    mut scorer: impl FnMut(&ScoredTrial) -> Result<f64>,
) -> Result<Vec<TriagedTrial>> {
    scored
        .iter()
        .map(|s| {
            let decision = triage_decide(s.td_score, policy);
            let (final_score, ti_score) = if decision == Decision::Trigger {
                let ti = match s.ti_score {
                    Some(v) => v,
                    None => scorer(s)?,
                };
                (fuse(s.td_score, ti, policy.alpha), Some(ti))
            } else {
                (s.td_score, None)
            };
            Ok(TriagedTrial {
                trial: s.clone(),
                decision,
                final_score,
                ti_score,
            })
        })
        .collect()
}

fn check_prior(prior: f64) -> Result<()> {
    if (0.0..=1.0).contains(&prior) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("prior {prior} outside [0, 1]")))
    }
}

/// `p * target_fraction + (1 - p) * nontarget_fraction` from trigger counts.
/// A class is only required when its weight is nonzero.
pub fn rate_from_counts(
    triggered_targets: usize,
    num_targets: usize,
    triggered_nontargets: usize,
    num_nontargets: usize,
    prior: f64,
) -> Result<f64> {
    check_prior(prior)?;
    let fraction = |hit: usize, total: usize, weight: f64, class: &str| -> Result<f64> {
        if weight == 0.0 {
            return Ok(0.0);
        }
        if total == 0 {
            return Err(Error::ClassCoverage(format!("no {class} trials for prior {prior}")));
        }
        Ok(weight * hit as f64 / total as f64)
    };
    Ok(fraction(triggered_targets, num_targets, prior, "target")?
        + fraction(triggered_nontargets, num_nontargets, 1.0 - prior, "nontarget")?)
}

pub fn trigger_rate(triaged: &[TriagedTrial], prior: f64) -> Result<f64> {
    let count = |target: bool| {
        let class = triaged.iter().filter(|t| t.trial.is_target == target);
        (class.clone().filter(|t| t.triggered()).count(), class.count())
    };
    let (tt, nt) = count(true);
    let (tn, nn) = count(false);
    rate_from_counts(tt, nt, tn, nn, prior)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub keyword_seconds: f64,
    pub query_seconds: f64,
    pub td_flops: f64,
    pub ti_flops: f64,
}

impl CostModel {
    pub fn new(keyword_seconds: f64, query_seconds: f64, td_flops: f64, ti_flops: f64) -> Result<Self> {
        if !(keyword_seconds > 0.0 && query_seconds > 0.0) {
            return Err(Error::Invalid("segment durations must be positive".into()));
        }
        if !(td_flops >= 0.0 && ti_flops >= 0.0) {
            return Err(Error::Invalid("flop counts must be nonnegative".into()));
        }
        Ok(Self {
            keyword_seconds,
            query_seconds,
            td_flops,
            ti_flops,
        })
    }

    /// Seconds until a decision, assuming both systems respond instantly.
    pub fn expected_latency(&self, rate: f64) -> Result<f64> {
        check_rate(rate)?;
        Ok(self.keyword_seconds + rate * self.query_seconds)
    }

    pub fn expected_flops(&self, rate: f64) -> Result<f64> {
        check_rate(rate)?;
        Ok(self.td_flops + rate * self.ti_flops)
    }

    pub fn full_utterance_seconds(&self) -> f64 {
        self.keyword_seconds + self.query_seconds
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("trigger rate {rate} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for BandGrid {
    fn default() -> Self {
        Self {
            min: -1.0,
            max: 1.0,
            step: 0.005,
        }
    }
}

impl BandGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0 && self.min < self.max) || !(self.min.is_finite() && self.max.is_finite()) {
            return Err(Error::Invalid(format!(
                "band grid needs step > 0 and min < max, got {self:?}"
            )));
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize;
        Ok((0..=n)
            .map(|k| (self.min + k as f64 * self.step).min(self.max))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatCell {
    pub lower: f64,
    pub upper: f64,
    pub eer: f64,
    pub threshold: f64,
    pub triggered_targets: usize,
    pub triggered_nontargets: usize,
    /// At prior 0.5.
    pub trigger_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub alpha: f64,
    pub num_targets: usize,
    pub num_nontargets: usize,
    pub cells: Vec<HeatCell>,
}

impl HeatMap {
    pub fn rate_at(&self, cell: &HeatCell, prior: f64) -> Result<f64> {
        rate_from_counts(
            cell.triggered_targets,
            self.num_targets,
            cell.triggered_nontargets,
            self.num_nontargets,
            prior,
        )
    }

    /// `lower,upper,eer,trigger_rate`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower,upper,eer,trigger_rate\n");
        for c in &self.cells {
            let _ = writeln!(out, "{:.4},{:.4},{:.6},{:.6}", c.lower, c.upper, c.eer, c.trigger_rate);
        }
        out
    }

    /// Lowest EER, ties broken by lower trigger rate, then grid order.
    pub fn min_eer_cell(&self) -> &HeatCell {
        self.cells
            .iter()
            .fold(None::<&HeatCell>, |best, c| match best {
                Some(b) if (b.eer, b.trigger_rate) <= (c.eer, c.trigger_rate) => Some(b),
                _ => Some(c),
            })
            .expect("heat map is never empty")
    }

    /// Lowest trigger rate among cells whose EER is at most `target_eer`.
    pub fn cheapest_within(&self, target_eer: f64) -> Option<&HeatCell> {
        self.cells
            .iter()
            .filter(|c| c.eer <= target_eer)
            .fold(None, |best: Option<&HeatCell>, c| match best {
                Some(b) if (b.trigger_rate, b.eer) <= (c.trigger_rate, c.eer) => Some(b),
                _ => Some(c),
            })
    }
}

/// Trials with labels, sorted once by TD and once by fused score.
struct SortedScores {
    num_targets: usize,
    num_nontargets: usize,
    /// `(td, fused, is_target)` sorted by td.
    by_td: Vec<(f64, f64, bool)>,
    /// `(fused, td, is_target)` sorted by fused.
    by_fused: Vec<(f64, f64, bool)>,
    target_td: Vec<f64>,
    nontarget_td: Vec<f64>,
}

impl SortedScores {
    fn new(scored: &[ScoredTrial], alpha: FusionWeight) -> Result<Self> {
        let ti = ti_scores(scored)?;
        let num_targets = scored.iter().filter(|s| s.is_target).count();
        let num_nontargets = scored.len() - num_targets;
        if num_targets == 0 || num_nontargets == 0 {
            return Err(Error::ClassCoverage(format!(
                "band sweep needs both classes, got {num_targets} target and {num_nontargets} nontarget trials"
            )));
        }
        let mut by_td: Vec<(f64, f64, bool)> = Vec::with_capacity(scored.len());
        for (s, ti) in scored.iter().zip(ti) {
            let fused = fuse(s.td_score, ti, alpha);
            if !(s.td_score.is_finite() && fused.is_finite()) {
                return Err(Error::Numeric("non-finite score".into()));
            }
            by_td.push((s.td_score, fused, s.is_target));
        }
        let mut by_fused: Vec<(f64, f64, bool)> = by_td.iter().map(|&(t, f, l)| (f, t, l)).collect();
        by_td.sort_by(|a, b| a.0.total_cmp(&b.0));
        by_fused.sort_by(|a, b| a.0.total_cmp(&b.0));
        let target_td = by_td.iter().filter(|x| x.2).map(|x| x.0).collect();
        let nontarget_td = by_td.iter().filter(|x| !x.2).map(|x| x.0).collect();
        Ok(Self {
            num_targets,
            num_nontargets,
            by_td,
            by_fused,
            target_td,
            nontarget_td,
        })
    }

    fn inside(sorted: &[f64], lower: f64, upper: f64) -> usize {
        let lo = sorted.partition_point(|&v| v <= lower);
        let hi = sorted.partition_point(|&v| v < upper);
        hi.saturating_sub(lo)
    }

    fn cell(&self, lower: f64, upper: f64, buf: &mut Vec<(f64, bool)>) -> HeatCell {
        buf.clear();
        let inside = |td: f64| lower < td && td < upper;
        let mut kept = self.by_td.iter().filter(|x| !inside(x.0)).map(|x| (x.0, x.2)).peekable();
        let mut fused = self.by_fused.iter().filter(|x| inside(x.1)).map(|x| (x.0, x.2)).peekable();
        loop {
            let next = match (kept.peek(), fused.peek()) {
                (Some(a), Some(b)) => {
                    if a.0 <= b.0 {
                        kept.next()
                    } else {
                        fused.next()
                    }
                }
                (Some(_), None) => kept.next(),
                (None, Some(_)) => fused.next(),
                (None, None) => break,
            };
            buf.extend(next);
        }
        let EvalResult { eer, threshold, .. } = eer_from_sorted(buf, self.num_targets, self.num_nontargets);
        let triggered_targets = Self::inside(&self.target_td, lower, upper);
        let triggered_nontargets = Self::inside(&self.nontarget_td, lower, upper);
        let trigger_rate = 0.5 * triggered_targets as f64 / self.num_targets as f64
            + 0.5 * triggered_nontargets as f64 / self.num_nontargets as f64;
        HeatCell {
            lower,
            upper,
            eer,
            threshold,
            triggered_targets,
            triggered_nontargets,
            trigger_rate,
        }
    }
}

/// EER of the triaged score set for a single band.
pub fn triaged_eer(scored: &[ScoredTrial], policy: &TriagePolicy) -> Result<EvalResult> {
    let triaged = apply_triage(scored, policy)?;
    let (mut t, mut n) = (Vec::new(), Vec::new());
    for x in &triaged {
        if x.trial.is_target {
            t.push(x.final_score);
        } else {
            n.push(x.final_score);
        }
    }
    crate::metrics::compute_eer(&t, &n)
}

/// Every band `lower <= upper` on the grid, lower-major.
pub fn sweep_bands(scored: &[ScoredTrial], grid: &BandGrid, alpha: FusionWeight) -> Result<HeatMap> {
    let values = grid.values()?;
    let sorted = SortedScores::new(scored, alpha)?;
    let mut buf = Vec::with_capacity(scored.len());
    let mut cells = Vec::with_capacity(values.len() * (values.len() + 1) / 2);
    for (i, &lower) in values.iter().enumerate() {
        for &upper in &values[i..] {
            cells.push(sorted.cell(lower, upper, &mut buf));
        }
    }
    Ok(HeatMap {
        alpha: alpha.alpha(),
        num_targets: sorted.num_targets,
        num_nontargets: sorted.num_nontargets,
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub prior: f64,
    pub trigger_rate: f64,
    pub eer: f64,
}

/// One `(trigger rate, EER)` point per band and prior, priors outermost.
pub fn prior_sensitivity_curve(heat: &HeatMap, priors: &[f64]) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::with_capacity(heat.cells.len() * priors.len());
    for &prior in priors {
        for c in &heat.cells {
            out.push(CurvePoint {
                prior,
                trigger_rate: heat.rate_at(c, prior)?,
                eer: c.eer,
            });
        }
    }
    Ok(out)
}

/// `prior,trigger_rate,eer`.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("prior,trigger_rate,eer\n");
    for p in points {
        let _ = writeln!(out, "{:.2},{:.6},{:.6}", p.prior, p.trigger_rate, p.eer);
    }
    out
}

pub const ENVELOPE_BIN_WIDTH: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeBin {
    pub prior: f64,
    /// Left edge of the trigger-rate bin.
    pub trigger_rate: f64,
    pub eer_min: f64,
    pub eer_max: f64,
    pub bands: usize,
}

/// Per prior, the min and max EER over bands whose trigger rate falls in
/// each bin of width [`ENVELOPE_BIN_WIDTH`]. Empty bins are omitted.
pub fn envelope(points: &[CurvePoint]) -> Vec<EnvelopeBin> {
    let last_bin = (1.0 / ENVELOPE_BIN_WIDTH).round() as i64 - 1;
    let mut bins: BTreeMap<(u64, i64), EnvelopeBin> = BTreeMap::new();
    for p in points {
        let bin = ((p.trigger_rate / ENVELOPE_BIN_WIDTH + 1e-9).floor() as i64).min(last_bin);
        bins.entry((p.prior.to_bits(), bin))
            .and_modify(|b| {
                b.eer_min = b.eer_min.min(p.eer);
                b.eer_max = b.eer_max.max(p.eer);
                b.bands += 1;
            })
            .or_insert(EnvelopeBin {
                prior: p.prior,
                trigger_rate: bin as f64 * ENVELOPE_BIN_WIDTH,
                eer_min: p.eer,
                eer_max: p.eer,
                bands: 1,
            });
    }
    let mut out: Vec<EnvelopeBin> = bins.into_values().collect();
    out.sort_by(|a, b| a.prior.total_cmp(&b.prior).then(a.trigger_rate.total_cmp(&b.trigger_rate)));
    out
}

/// `prior,trigger_rate,eer_min,eer_max,bands`.
pub fn envelope_csv(bins: &[EnvelopeBin]) -> String {
    let mut out = String::from("prior,trigger_rate,eer_min,eer_max,bands\n");
    for b in bins {
        let _ = writeln!(
            out,
            "{:.2},{:.2},{:.6},{:.6},{}",
            b.prior, b.trigger_rate, b.eer_min, b.eer_max, b.bands
        );
    }
    out
}

/// `enroll_speaker,test_utt,label,decision,td,ti,final`.
pub fn triaged_csv(triaged: &[TriagedTrial]) -> String {
    let mut out = String::from("enroll_speaker,test_utt,label,decision,td,ti,final\n");
    for t in triaged {
        let ti = t.ti_score.map_or_else(String::new, |v| format!("{v:.9}"));
        let _ = writeln!(
            out,
            "{},{},{},{},{:.9},{},{:.9}",
            t.trial.enroll_speaker,
            t.trial.test_utterance,
            if t.trial.is_target { "tgt" } else { "non" },
            t.decision.name(),
            t.trial.td_score,
            ti,
            t.final_score
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::compute_eer;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn alpha(a: f64) -> FusionWeight {
        FusionWeight::new(a).unwrap()
    }

    fn trial(td: f64, ti: f64, is_target: bool) -> ScoredTrial {
        ScoredTrial {
            enroll_speaker: "e".into(),
            test_utterance: "t".into(),
            is_target,
            td_score: td,
            ti_score: Some(ti),
        }
    }

    fn random_set(seed: u64, n: usize) -> Vec<ScoredTrial> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|i| {
                let is_target = i % 3 == 0;
                let shift = if is_target { 0.3 } else { 0.0 };
                // Quantized so that ties occur.
                let q = |v: f64| ((v * 50.0).round() / 50.0).clamp(-0.99, 0.99);
                trial(q(rng.uniform(-0.6, 0.6) + shift), q(rng.uniform(-0.6, 0.6) + shift), is_target)
            })
            .collect()
    }

    #[test]
    fn decision_rule_examples() {
        let p = TriagePolicy::new(0.23, 0.65, alpha(0.5)).unwrap();
        assert_eq!(triage_decide(0.9, &p), Decision::ConfidentAccept);
        assert_eq!(triage_decide(0.5, &p), Decision::Trigger);
        assert_eq!(triage_decide(0.65, &p), Decision::ConfidentAccept);
        assert_eq!(triage_decide(0.23, &p), Decision::ConfidentReject);
        assert_eq!(triage_decide(-0.4, &p), Decision::ConfidentReject);
        assert!(TriagePolicy::new(0.7, 0.2, alpha(0.5)).is_err());
        assert!(TriagePolicy::new(-1.5, 0.2, alpha(0.5)).is_err());
    }

    #[test]
    fn apply_triage_examples() {
        let s = vec![trial(0.1, 0.5, false), trial(0.3, 0.7, true), trial(0.9, 0.2, true)];
        let mixed = apply_triage(&s, &TriagePolicy::new(0.23, 0.65, alpha(0.5)).unwrap()).unwrap();
        let flags: Vec<bool> = mixed.iter().map(TriagedTrial::triggered).collect();
        assert_eq!(flags, [false, true, false]);
        assert!((mixed[1].final_score - 0.5).abs() < 1e-15);
        assert_eq!(mixed[0].ti_score, None);

        let empty = apply_triage(&s, &TriagePolicy::new(0.3, 0.3, alpha(0.5)).unwrap()).unwrap();
        assert!(empty.iter().all(|t| !t.triggered() && t.final_score == t.trial.td_score));
        let full = apply_triage(&s, &TriagePolicy::new(-1.0, 1.0, alpha(0.25)).unwrap()).unwrap();
        for t in &full {
            assert!(t.triggered());
            assert_eq!(t.final_score, fuse(t.trial.td_score, t.trial.ti_score.unwrap(), alpha(0.25)));
        }
    }

    #[test]
    fn missing_ti_only_matters_when_triggered() {
        let mut s = vec![trial(0.1, 0.5, false), trial(0.3, 0.7, true)];
        s[0].ti_score = None;
        let p = TriagePolicy::new(0.2, 0.65, alpha(0.5)).unwrap();
        assert!(apply_triage(&s, &p).is_ok());
        s[1].ti_score = None;
        assert!(matches!(apply_triage(&s, &p), Err(Error::IncompleteScores(_))));
        let mut calls = 0;
        let lazy = apply_triage_with(&s, &p, |_| {
            calls += 1;
            Ok(0.7)
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(lazy[1].ti_score, Some(0.7));
    }

    #[test]
    fn trigger_rate_examples() {
        assert!((rate_from_counts(2, 10, 4, 10, 0.5).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(rate_from_counts(2, 10, 4, 10, 1.0).unwrap(), 0.2);
        assert_eq!(rate_from_counts(2, 10, 4, 10, 0.0).unwrap(), 0.4);
        assert_eq!(rate_from_counts(2, 10, 0, 0, 1.0).unwrap(), 0.2);
        assert!(matches!(rate_from_counts(2, 10, 0, 0, 0.5), Err(Error::ClassCoverage(_))));
        assert!(rate_from_counts(2, 10, 4, 10, 1.5).is_err());
    }

    #[test]
    fn cost_model_examples() {
        let c = CostModel::new(0.7, 3.0, 10.0, 100.0).unwrap();
        assert!((c.expected_latency(0.27).unwrap() - 1.51).abs() < 1e-12);
        assert_eq!(c.expected_latency(0.0).unwrap(), 0.7);
        assert!((c.expected_latency(1.0).unwrap() - 3.7).abs() < 1e-12);
        assert_eq!(c.expected_flops(0.0).unwrap(), 10.0);
        assert_eq!(c.expected_flops(1.0).unwrap(), 110.0);
        assert!((c.expected_flops(0.27).unwrap() - 37.0).abs() < 1e-12);
        assert!(c.expected_latency(1.2).is_err());
        assert!(CostModel::new(0.0, 3.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn grid_values() {
        let g = BandGrid::default().values().unwrap();
        assert_eq!(g.len(), 401);
        assert_eq!(g[0], -1.0);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert!(BandGrid { min: 0.0, max: 0.0, step: 0.1 }.values().is_err());
        assert!(BandGrid { min: 0.0, max: 1.0, step: 0.0 }.values().is_err());
    }

    #[test]
    fn sweep_cells_match_direct_triage() {
        let s = random_set(3, 90);
        let grid = BandGrid { min: -1.0, max: 1.0, step: 0.1 };
        let heat = sweep_bands(&s, &grid, alpha(0.4)).unwrap();
        assert_eq!(heat.cells.len(), 21 * 22 / 2);
        for c in &heat.cells {
            let p = TriagePolicy::new(c.lower, c.upper, alpha(0.4)).unwrap();
            let direct = triaged_eer(&s, &p).unwrap();
            assert_eq!(c.eer, direct.eer);
            let rate = trigger_rate(&apply_triage(&s, &p).unwrap(), 0.5).unwrap();
            assert!((c.trigger_rate - rate).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_bands_reproduce_single_systems() {
        let s = random_set(4, 120);
        let heat = sweep_bands(&s, &BandGrid { min: -1.0, max: 1.0, step: 0.25 }, alpha(0.5)).unwrap();
        let (t, n) = crate::scoring::split_by_label(&s, |x| x.td_score);
        let td = compute_eer(&t, &n).unwrap().eer;
        let (ft, fnn) = crate::fusion::fused_scores(&s, alpha(0.5)).unwrap();
        let fused = compute_eer(&ft, &fnn).unwrap().eer;
        for c in &heat.cells {
            if c.lower == c.upper {
                assert_eq!(c.eer, td);
                assert_eq!(c.trigger_rate, 0.0);
            }
        }
        let full = heat.cells.iter().find(|c| c.lower == -1.0 && c.upper == 1.0).unwrap();
        assert_eq!(full.eer, fused);
        assert_eq!(full.trigger_rate, 1.0);
    }

    #[test]
    fn selectors() {
        let s = random_set(5, 150);
        let heat = sweep_bands(&s, &BandGrid { min: -1.0, max: 1.0, step: 0.1 }, alpha(0.5)).unwrap();
        let best = heat.min_eer_cell();
        assert!(heat.cells.iter().all(|c| c.eer >= best.eer));
        assert!(heat
            .cells
            .iter()
            .all(|c| c.eer > best.eer || c.trigger_rate >= best.trigger_rate));
        let cheap = heat.cheapest_within(best.eer).unwrap();
        assert_eq!(cheap.eer, best.eer);
        assert!(heat.cheapest_within(-1.0).is_none());
    }

    #[test]
    fn curve_and_envelope() {
        let s = random_set(6, 60);
        let heat = sweep_bands(&s, &BandGrid { min: -1.0, max: 1.0, step: 0.2 }, alpha(0.5)).unwrap();
        let pts = prior_sensitivity_curve(&heat, &[0.0, 0.5, 1.0]).unwrap();
        let n = heat.cells.len();
        assert_eq!(pts.len(), 3 * n);
        for i in 0..n {
            let (p0, p5, p1) = (pts[i], pts[n + i], pts[2 * n + i]);
            assert_eq!(p5.trigger_rate, heat.cells[i].trigger_rate);
            assert!(p5.trigger_rate >= p0.trigger_rate.min(p1.trigger_rate) - 1e-15);
            assert!(p5.trigger_rate <= p0.trigger_rate.max(p1.trigger_rate) + 1e-15);
            assert!(p0.eer == p5.eer && p5.eer == p1.eer);
        }
        let env = envelope(&pts);
        assert_eq!(env.iter().map(|b| b.bands).sum::<usize>(), pts.len());
        for b in &env {
            assert!(b.eer_min <= b.eer_max);
            assert!(b.trigger_rate >= 0.0 && b.trigger_rate < 1.0);
        }
        let csv = curve_csv(&pts);
        assert!(csv.starts_with("prior,trigger_rate,eer\n"));
        assert_eq!(csv.lines().count(), pts.len() + 1);
        assert!(heat.to_csv().starts_with("lower,upper,eer,trigger_rate\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn nested_bands_trigger_monotonically(
            seed in any::<u64>(),
            a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, d in -1.0f64..1.0,
            prior in 0.0f64..=1.0,
        ) {
            let s = random_set(seed, 40);
            let mut v = [a, b, c, d];
            v.sort_by(f64::total_cmp);
            let outer = TriagePolicy::new(v[0], v[3], alpha(0.5)).unwrap();
            let inner = TriagePolicy::new(v[1], v[2], alpha(0.5)).unwrap();
            let ro = trigger_rate(&apply_triage(&s, &outer).unwrap(), prior).unwrap();
            let ri = trigger_rate(&apply_triage(&s, &inner).unwrap(), prior).unwrap();
            prop_assert!(ri <= ro);
        }

        #[test]
        fn final_scores_are_td_or_fused(seed in any::<u64>(), lo in -1.0f64..0.5, width in 0.0f64..0.5, a in 0.0f64..=1.0) {
            let s = random_set(seed, 30);
            let p = TriagePolicy::new(lo, lo + width, alpha(a)).unwrap();
            for t in apply_triage(&s, &p).unwrap() {
                let fused = fuse(t.trial.td_score, t.trial.ti_score.unwrap(), alpha(a));
                prop_assert_eq!(t.triggered(), p.triggers(t.trial.td_score));
                prop_assert_eq!(t.final_score, if t.triggered() { fused } else { t.trial.td_score });
            }
        }
    }
}
