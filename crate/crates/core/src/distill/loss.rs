//! Batch concordance loss and the quadrant-correction penalty, with
//! analytic gradients w.r.t. the predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Sign;
use crate::model::AdvTriple;

/// Added to the concordance denominator.
pub const CCC_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadrantMode {
    /// L1 on each dimension whose sign disagrees.
    #[default]
    PerDimension,
    /// Full L1 on the item when any dimension's sign disagrees.
    Octant,
}

/// Loss value and its gradient w.r.t. each prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<[f64; 3]>,
}

/// `Σ_d (1 − ccc_d)`, each ccc taken over the batch axis.
pub fn ccc_loss(pred: &[AdvTriple], target: &[AdvTriple]) -> Result<LossTerm> {
    Ok(ccc_loss_detailed(pred, target)?.0)
}

/// As [`ccc_loss`], plus the guarded per-dimension ccc values.
pub fn ccc_loss_detailed(pred: &[AdvTriple], target: &[AdvTriple]) -> Result<(LossTerm, [f64; 3])> {
    check_batch(pred, target)?;
    if pred.len() < 2 {
        return Err(Error::invalid(format!("ccc loss needs a batch of at least 2, got {}", pred.len())));
    }
    let n = pred.len() as f64;
    let mut grad = vec![[0.0; 3]; pred.len()];
    let mut cccs = [0.0; 3];
    for d in 0..3 {
        let x: Vec<f64> = pred.iter().map(|p| p.to_array()[d]).collect();
        let y: Vec<f64> = target.iter().map(|p| p.to_array()[d]).collect();
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let cov = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        let gap = mx - my;
        let denom = vx + vy + gap * gap + CCC_GUARD;
        let ccc = 2.0 * cov / denom;
        cccs[d] = ccc;
        for (i, g) in grad.iter_mut().enumerate() {
            let d_cov = (y[i] - my) / n;
            let d_denom = 2.0 * (x[i] - mx) / n + 2.0 * gap / n;
            g[d] = -(2.0 * d_cov / denom - 2.0 * cov * d_denom / (denom * denom));
        }
    }
    let value = cccs.iter().map(|c| 1.0 - c).sum();
    Ok((LossTerm { value, grad }, cccs))
}

/// Extra L1 pull toward the target where signs about `neutral` disagree,
/// averaged over the batch. Zero signs agree with anything.
pub fn quadrant_loss(pred: &[AdvTriple], target: &[AdvTriple], neutral: f64, mode: QuadrantMode) -> Result<LossTerm> {
    check_batch(pred, target)?;
    if pred.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; pred.len()];
    for ((p, t), g) in pred.iter().zip(target).zip(&mut grad) {
        let (p, t) = (p.to_array(), t.to_array());
        let disagree: [bool; 3] = std::array::from_fn(|d| !Sign::of(p[d], neutral).agrees(Sign::of(t[d], neutral)));
        let active: [bool; 3] = match mode {
            QuadrantMode::PerDimension => disagree,
            QuadrantMode::Octant => [disagree.iter().any(|&b| b); 3],
        };
        for d in 0..3 {
            if active[d] {
                let diff = p[d] - t[d];
                value += diff.abs() / n;
                g[d] = diff.signum() / n;
            }
        }
    }
    Ok(LossTerm { value, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub neutral: f64,
    pub mode: QuadrantMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            neutral: crate::metrics::DEFAULT_NEUTRAL,
            mode: QuadrantMode::PerDimension,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ccc: f64,
    pub quadrant: f64,
    pub batch_ccc: [f64; 3],
}

/// `ccc_loss + λ · quadrant_loss` and its gradient.
pub fn total_loss(pred: &[AdvTriple], target: &[AdvTriple], cfg: &LossConfig) -> Result<(LossBreakdown, Vec<[f64; 3]>)> {
    let (c, batch_ccc) = ccc_loss_detailed(pred, target)?;
    let q = quadrant_loss(pred, target, cfg.neutral, cfg.mode)?;
    let mut grad = c.grad;
    if cfg.lambda != 0.0 {
        for (g, qg) in grad.iter_mut().zip(&q.grad) {
            for d in 0..3 {
                g[d] += cfg.lambda * qg[d];
            }
        }
    }
    let total = c.value + cfg.lambda * q.value;
    Ok((
        LossBreakdown {
            total,
            ccc: c.value,
            quadrant: q.value,
            batch_ccc,
        },
        grad,
    ))
}

fn check_batch(pred: &[AdvTriple], target: &[AdvTriple]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::invalid(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    if pred.iter().chain(target).any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("loss input".into()));
    }
    Ok(())
}
