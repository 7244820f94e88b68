//! Forecasting metrics over K-mode predictions.
//!
//! The best trajectory is always the one whose endpoint is closest to the
//! ground-truth endpoint (lowest index on ties); minADE is that
//! trajectory's average error, not the smallest average error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::PredictionSet;

/// A scene is a miss when its minFDE is strictly greater than this.
pub const MISS_THRESHOLD_M: f64 = 2.0;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check(pred: &PredictionSet, gt: &[[f64; 2]]) -> Result<()> {
    if pred.trajectories.is_empty() {
        return Err(Error::Dimension("prediction set has no trajectories".into()));
    }
    if let Some(t) = pred.trajectories.iter().find(|t| t.len() != gt.len() || t.is_empty()) {
        return Err(Error::Dimension(format!("trajectory has {} steps, ground truth {}", t.len(), gt.len())));
    }
    Ok(())
}

/// Smallest endpoint error and the index achieving it.
pub fn min_fde(pred: &PredictionSet, gt: &[[f64; 2]]) -> Result<(f64, usize)> {
    check(pred, gt)?;
    let end = gt[gt.len() - 1];
    let mut best = (f64::INFINITY, 0);
    for (j, t) in pred.trajectories.iter().enumerate() {
        let d = dist(t[t.len() - 1], end);
        if d < best.0 {
            best = (d, j);
        }
    }
    Ok(best)
}

/// Mean per-step error of the best-by-endpoint trajectory.
pub fn min_ade(pred: &PredictionSet, gt: &[[f64; 2]]) -> Result<f64> {
    let (_, j) = min_fde(pred, gt)?;
    let t = &pred.trajectories[j];
    Ok(t.iter().zip(gt).map(|(p, g)| dist(*p, *g)).sum::<f64>() / gt.len() as f64)
}

/// minFDE plus `(1 − p)²` of the best trajectory's probability.
pub fn brier_min_fde(pred: &PredictionSet, gt: &[[f64; 2]]) -> Result<f64> {
    let (fde, j) = min_fde(pred, gt)?;
    let p = pred.probs.get(j).copied().ok_or_else(|| Error::Dimension("missing probability".into()))?;
    Ok(fde + (1.0 - p).powi(2))
}

/// Fraction of scenes whose minFDE exceeds [`MISS_THRESHOLD_M`].
pub fn miss_rate(min_fdes: &[f64]) -> Result<f64> {
    if min_fdes.is_empty() {
        return Err(Error::Dimension("miss rate of an empty set".into()));
    }
    Ok(min_fdes.iter().filter(|&&d| d > MISS_THRESHOLD_M).count() as f64 / min_fdes.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub brier_min_fde: f64,
    pub miss_rate: f64,
    pub n_scenes: usize,
}

impl MetricReport {
    /// Scene-averaged metrics.
    pub fn evaluate<'a>(pairs: impl IntoIterator<Item = (&'a PredictionSet, &'a [[f64; 2]])>) -> Result<Self> {
        let (mut ade, mut brier, mut fdes) = (0.0, 0.0, Vec::new());
        for (pred, gt) in pairs {
            ade += min_ade(pred, gt)?;
            brier += brier_min_fde(pred, gt)?;
            fdes.push(min_fde(pred, gt)?.0);
        }
        let n = fdes.len();
        let miss_rate = miss_rate(&fdes)?;
        Ok(Self {
            min_ade: ade / n as f64,
            min_fde: fdes.iter().sum::<f64>() / n as f64,
            brier_min_fde: brier / n as f64,
            miss_rate,
            n_scenes: n,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Two aligned columns, one metric per line.
    pub fn to_table(&self) -> String {
        let rows = [
            ("minADE", format!("{:.4}", self.min_ade)),
            ("minFDE", format!("{:.4}", self.min_fde)),
            ("brier-minFDE", format!("{:.4}", self.brier_min_fde)),
            ("MR", format!("{:.4}", self.miss_rate)),
            ("scenes", self.n_scenes.to_string()),
        ];
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let v = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        rows.iter().map(|(k, val)| format!("{k:<w$}  {val:>v$}\n")).collect()
    }
}
