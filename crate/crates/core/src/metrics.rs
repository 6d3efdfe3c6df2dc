//! Concordance and quadrant agreement, per batch or over a labelled manifest.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::manifest::Manifest;
use crate::io::wav::read_wav;
use crate::model::{AdvPredictor, AdvTriple};

pub const DEFAULT_NEUTRAL: f64 = 0.5;

/// Concordance correlation coefficient with population moments.
///
/// Both series constant and equal gives 1.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid(format!("ccc needs at least 2 items, got {}", x.len())));
    }
    let m = Moments::from_pairs(x.iter().copied().zip(y.iter().copied()));
    Ok(m.ccc())
}

/// Streaming first and second moments of a paired series.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov: f64,
}

impl Moments {
    /// Two-pass computation; exact symmetry in x and y.
    pub fn from_pairs(pairs: impl Iterator<Item = (f64, f64)> + Clone) -> Self {
        let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
        for (x, y) in pairs.clone() {
            n += 1;
            sx += x;
            sy += y;
        }
        if n == 0 {
            return Self::default();
        }
        let (mean_x, mean_y) = (sx / n as f64, sy / n as f64);
        let (mut vx, mut vy, mut c) = (0.0, 0.0, 0.0);
        for (x, y) in pairs {
            let (dx, dy) = (x - mean_x, y - mean_y);
            vx += dx * dx;
            vy += dy * dy;
            c += dx * dy;
        }
        let k = n as f64;
        Self {
            n,
            mean_x,
            mean_y,
            var_x: vx / k,
            var_y: vy / k,
            cov: c / k,
        }
    }

    pub fn ccc(&self) -> f64 {
        let gap = self.mean_x - self.mean_y;
        let denom = self.var_x + self.var_y + gap * gap;
        if denom == 0.0 {
            return 1.0;
        }
        2.0 * self.cov / denom
    }
}

/// Position of one coordinate relative to the neutral point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Negative,
    Zero,
    Positive,
}

impl Sign {
    pub fn of(value: f64, neutral: f64) -> Sign {
        if value > neutral {
            Sign::Positive
        } else if value < neutral {
            Sign::Negative
        } else {
            Sign::Zero
        }
    }

    /// Zero agrees with everything.
    pub fn agrees(self, other: Sign) -> bool {
        self == Sign::Zero || other == Sign::Zero || self == other
    }
}

pub fn quadrant(a: &AdvTriple, neutral: f64) -> [Sign; 3] {
    a.to_array().map(|v| Sign::of(v, neutral))
}

/// True when every dimension's sign agrees.
pub fn same_quadrant(a: &AdvTriple, b: &AdvTriple, neutral: f64) -> bool {
    quadrant(a, neutral)
        .iter()
        .zip(quadrant(b, neutral))
        .all(|(x, y)| x.agrees(y))
}

/// Paired predictions and references.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSeries {
    predicted: Vec<AdvTriple>,
    reference: Vec<AdvTriple>,
}

impl PredictionSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(predicted: Vec<AdvTriple>, reference: Vec<AdvTriple>) -> Result<Self> {
        if predicted.len() != reference.len() {
            return Err(Error::invalid("prediction and reference counts differ"));
        }
        let mut s = Self::new();
        for (p, r) in predicted.into_iter().zip(reference) {
            s.push(p, r)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, predicted: AdvTriple, reference: AdvTriple) -> Result<()> {
        if !predicted.is_finite() || !reference.is_finite() {
            return Err(Error::NonFinite("prediction series entry".into()));
        }
        self.predicted.push(predicted);
        self.reference.push(reference);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    pub fn predicted(&self) -> &[AdvTriple] {
        &self.predicted
    }

    pub fn reference(&self) -> &[AdvTriple] {
        &self.reference
    }

    /// CCC per dimension in A, D, V order.
    pub fn ccc(&self) -> Result<[f64; 3]> {
        if self.len() < 2 {
            return Err(Error::invalid(format!("ccc needs at least 2 items, got {}", self.len())));
        }
        let mut out = [0.0; 3];
        for (d, o) in out.iter_mut().enumerate() {
            let pairs = self
                .predicted
                .iter()
                .zip(&self.reference)
                .map(move |(p, r)| (p.to_array()[d], r.to_array()[d]));
            *o = Moments::from_pairs(pairs).ccc();
        }
        Ok(out)
    }

    pub fn quadrant_agreement_rate(&self, neutral: f64) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let hits = self
            .predicted
            .iter()
            .zip(&self.reference)
            .filter(|(p, r)| same_quadrant(p, r, neutral))
            .count();
        hits as f64 / self.len() as f64
    }

    /// Mean absolute error per dimension; debug only.
    pub fn mae(&self) -> [f64; 3] {
        let n = self.len().max(1) as f64;
        let mut acc = [0.0; 3];
        for (p, r) in self.predicted.iter().zip(&self.reference) {
            for (d, a) in acc.iter_mut().enumerate() {
                *a += (p.to_array()[d] - r.to_array()[d]).abs();
            }
        }
        acc.map(|a| a / n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub line: usize,
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ccc_arousal: f64,
    pub ccc_dominance: f64,
    pub ccc_valence: f64,
    pub quadrant_agreement_rate: f64,
    pub n: usize,
    pub skipped: usize,
    pub mae_debug: [f64; 3],
    pub errors: Vec<RowError>,
}

impl EvalReport {
    pub fn from_series(series: &PredictionSeries, neutral: f64, errors: Vec<RowError>) -> Result<Self> {
        let [a, d, v] = series.ccc()?;
        Ok(Self {
            ccc_arousal: a,
            ccc_dominance: d,
            ccc_valence: v,
            quadrant_agreement_rate: series.quadrant_agreement_rate(neutral),
            n: series.len(),
            skipped: errors.len(),
            mae_debug: series.mae(),
            errors,
        })
    }

    pub fn ccc(&self) -> [f64; 3] {
        [self.ccc_arousal, self.ccc_dominance, self.ccc_valence]
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Runs `model` over every manifest row and scores it against the row labels.
///
/// Unreadable rows (and rows the model rejects) are skipped and reported;
/// fewer than 2 scored rows is an error. Rows are split across `threads`
/// workers but results are gathered in manifest order.
pub fn evaluate_manifest<P: AdvPredictor + ?Sized>(
    model: &P,
    manifest: &Manifest,
    neutral: f64,
    threads: usize,
) -> Result<EvalReport> {
    let entries = manifest.entries();
    let threads = threads.clamp(1, entries.len().max(1));
    let chunk = entries.len().div_ceil(threads).max(1);
    let outcomes: Vec<Result<AdvTriple>> = std::thread::scope(|s| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|rows| {
                s.spawn(move || {
                    rows.iter()
                        .map(|e| read_wav(&manifest.resolve(e)).and_then(|w| model.predict(&w)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut series = PredictionSeries::new();
    let mut errors: Vec<RowError> = manifest
        .issues()
        .iter()
        .map(|i| RowError {
            line: i.line,
            path: PathBuf::new(),
            message: i.message.clone(),
        })
        .collect();
    for (e, outcome) in entries.iter().zip(outcomes) {
        match outcome.and_then(|p| series.push(p, e.target()).map(|_| ())) {
            Ok(()) => {}
            Err(err) => errors.push(RowError {
                line: e.line,
                path: e.audio_path.clone(),
                message: err.to_string(),
            }),
        }
    }
    if series.len() < 2 {
        return Err(Error::invalid(format!(
            "only {} usable manifest rows ({} skipped); need at least 2",
            series.len(),
            errors.len()
        )));
    }
    errors.sort_by_key(|e| e.line);
    EvalReport::from_series(&series, neutral, errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    fn standardized(n: usize, seed: u64) -> Vec<f64> {
        let x = random(n, seed);
        let mean = x.iter().sum::<f64>() / n as f64;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        x.iter().map(|v| (v - mean) / sd).collect()
    }

    #[test]
    fn identity_negation_and_shift() {
        let x = standardized(500, 1);
        assert!((ccc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((ccc(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        assert!((ccc(&x, &shifted).unwrap() - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn symmetric_and_bounded() {
        for seed in 0..1000 {
            let (x, y) = (random(20, seed), random(20, seed + 10_000));
            let (a, b) = (ccc(&x, &y).unwrap(), ccc(&y, &x).unwrap());
            assert_eq!(a, b);
            assert!((-1.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn scale_is_penalized() {
        let x = random(100, 3);
        for a in [0.5, 0.9, 1.1, 3.0] {
            let y: Vec<f64> = x.iter().map(|v| a * v).collect();
            assert!(ccc(&x, &y).unwrap() < 1.0);
        }
    }

    #[test]
    fn degenerate_cases() {
        assert_eq!(ccc(&[0.3; 5], &[0.3; 5]).unwrap(), 1.0);
        assert_eq!(ccc(&[0.3; 5], &[0.4; 5]).unwrap(), 0.0);
        assert_eq!(ccc(&[0.3; 5], &random(5, 1)).unwrap(), 0.0);
        assert!(ccc(&[1.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn quadrant_signs() {
        use Sign::*;
        assert_eq!(quadrant(&AdvTriple::new(0.7, 0.6, 0.4), 0.5), [Positive, Positive, Negative]);
        assert_eq!(quadrant(&AdvTriple::new(0.5, 0.5, 0.5), 0.5), [Zero; 3]);
        assert_eq!(quadrant(&AdvTriple::new(-0.2, 0.1, 0.0), 0.0), [Negative, Positive, Zero]);
        assert!(same_quadrant(&AdvTriple::new(0.5, 0.9, 0.1), &AdvTriple::new(0.1, 0.6, 0.2), 0.5));
        assert!(!same_quadrant(&AdvTriple::new(0.6, 0.9, 0.1), &AdvTriple::new(0.1, 0.6, 0.2), 0.5));
    }

    #[test]
    fn agreement_invariant_under_monotone_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = || AdvTriple::new(rng.random(), rng.random(), rng.random());
        let pairs: Vec<(AdvTriple, AdvTriple)> = (0..200).map(|_| (t(), t())).collect();
        let f = |v: f64| 0.5 + (v - 0.5).powi(3) * 4.0;
        let g = |a: AdvTriple| AdvTriple::from_array(a.to_array().map(f));
        let s1 = PredictionSeries::from_pairs(pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect()).unwrap();
        let s2 = PredictionSeries::from_pairs(pairs.iter().map(|p| g(p.0)).collect(), pairs.iter().map(|p| g(p.1)).collect()).unwrap();
        assert_eq!(s1.quadrant_agreement_rate(0.5), s2.quadrant_agreement_rate(0.5));
    }

    #[test]
    fn linear_corruption_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let refs: Vec<AdvTriple> = (0..200).map(|_| AdvTriple::new(rng.random(), rng.random(), rng.random())).collect();
        let preds: Vec<AdvTriple> = refs.iter().map(|r| AdvTriple::from_array(r.to_array().map(|v| 0.9 * v + 0.05))).collect();
        let got = PredictionSeries::from_pairs(preds.clone(), refs.clone()).unwrap().ccc().unwrap();
        for d in 0..3 {
            let x: Vec<f64> = preds.iter().map(|p| p.to_array()[d]).collect();
            let y: Vec<f64> = refs.iter().map(|p| p.to_array()[d]).collect();
            let n = x.len() as f64;
            let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
            let sxy = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n - mx * my;
            let sxx = x.iter().map(|a| a * a).sum::<f64>() / n - mx * mx;
            let syy = y.iter().map(|a| a * a).sum::<f64>() / n - my * my;
            let want = 2.0 * sxy / (sxx + syy + (mx - my).powi(2));
            assert!((got[d] - want).abs() < 1e-10);
        }
    }
}
