//! Linear score fusion of the TD and TI systems.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::{compute_eer, EvalResult};
use crate::scoring::ScoredTrial;

/// Weight on the TD score; the TI score gets `1 - alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeight(f64);

impl FusionWeight {
    pub fn new(alpha: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(Self(alpha))
        } else {
            Err(Error::Invalid(format!("fusion weight {alpha} outside [0, 1]")))
        }
    }

    pub fn alpha(self) -> f64 {
        self.0
    }
}

pub fn fuse(td: f64, ti: f64, weight: FusionWeight) -> f64 {
    weight.0 * td + (1.0 - weight.0) * ti
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub alpha: f64,
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionSweep {
    pub points: Vec<SweepPoint>,
    pub best: SweepPoint,
}

impl FusionSweep {
    /// `alpha,eer` with EER as a fraction.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,eer\n");
        for p in &self.points {
            let _ = writeln!(out, "{:.4},{:.6}", p.alpha, p.result.eer);
        }
        out
    }
}

/// Grid `0, step, 2*step, ...` up to 1, with 1 always included.
pub fn alpha_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Invalid(format!("fusion grid step {step} outside (0, 1]")));
    }
    let n = (1.0 / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|k| (k as f64 * step).min(1.0)).collect();
    if 1.0 - grid[grid.len() - 1] > 1e-12 {
        grid.push(1.0);
    } else {
        let last = grid.len() - 1;
        grid[last] = 1.0;
    }
    Ok(grid)
}

pub(crate) fn ti_scores(scored: &[ScoredTrial]) -> Result<Vec<f64>> {
    scored
        .iter()
        .map(|s| {
            s.ti_score.ok_or_else(|| {
                Error::IncompleteScores(format!(
                    "trial {} / {} has no TI score",
                    s.enroll_speaker, s.test_utterance
                ))
            })
        })
        .collect()
}

/// Fused `(targets, nontargets)`.
pub fn fused_scores(scored: &[ScoredTrial], weight: FusionWeight) -> Result<(Vec<f64>, Vec<f64>)> {
    let ti = ti_scores(scored)?;
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for (s, ti) in scored.iter().zip(ti) {
        let v = fuse(s.td_score, ti, weight);
        if s.is_target {
            targets.push(v);
        } else {
            nontargets.push(v);
        }
    }
    Ok((targets, nontargets))
}

/// EER at every grid weight. The best point is the lowest EER, ties going
/// to the smallest alpha.
pub fn sweep_fusion_weight(scored: &[ScoredTrial], step: f64) -> Result<FusionSweep> {
    let grid = alpha_grid(step)?;
    ti_scores(scored)?;
    let mut points = Vec::with_capacity(grid.len());
    for alpha in grid {
        let (t, n) = fused_scores(scored, FusionWeight::new(alpha)?)?;
        points.push(SweepPoint {
            alpha,
            result: compute_eer(&t, &n)?,
        });
    }
    let best = points
        .iter()
        .fold(None::<&SweepPoint>, |best, p| match best {
            Some(b) if b.result.eer <= p.result.eer => Some(b),
            _ => Some(p),
        })
        .cloned()
        .expect("grid is never empty");
    Ok(FusionSweep { points, best })
}
