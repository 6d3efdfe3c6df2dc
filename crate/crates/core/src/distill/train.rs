//! Plain SGD distillation against a frozen teacher.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::distill::augment::{AugmentationConfig, BatchProducer};
use crate::distill::corpus::CorpusBuckets;
use crate::distill::loss::{total_loss, LossBreakdown, LossConfig, QuadrantMode};
use crate::distill::teacher::TeacherOracle;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::model::{AdvTriple, Wav2Small};
use crate::nn::{BatchStats, GradTape, Gradients, Mode};
use crate::scalar::Float;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub steps: u64,
    pub lambda: f64,
    pub neutral: f64,
    pub quadrant_mode: QuadrantMode,
    pub seed: u64,
    /// Checkpoint period in steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 5e-5,
            weight_decay: 0.0,
            momentum: 0.0,
            steps: 20_000,
            lambda: 1.0,
            neutral: 0.5,
            quadrant_mode: QuadrantMode::PerDimension,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainingConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            neutral: self.neutral,
            mode: self.quadrant_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return bad("weight_decay must be >= 0 and momentum in [0, 1)");
        }
        if !(self.lambda >= 0.0 && self.neutral.is_finite()) {
            return bad("lambda must be >= 0 and neutral finite");
        }
        Ok(())
    }
}

/// Stochastic gradient descent with optional momentum and L2 decay.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainingConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    }

    /// Updates every trainable parameter; returns the update's L2 norm.
    /// Nothing changes unless every parameter has a finite gradient.
    pub fn step(&mut self, model: &mut Wav2Small<T>, grads: &Gradients<T>) -> Result<f64> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        if let Some(p) = model.trainable_params().into_iter().find(|p| grads.get(p.name()).is_none()) {
            return Err(Error::State(format!("no gradient for {}", p.name())));
        }
        let (lr, mu, wd) = (T::lit(self.learning_rate), T::lit(self.momentum), T::lit(self.weight_decay));
        let mut norm = 0.0;
        for p in model.trainable_params_mut() {
            let g = grads.get(p.name()).expect("checked above");
            let v = (self.momentum != 0.0).then(|| {
                self.velocity
                    .entry(p.name().to_string())
                    .or_insert_with(|| vec![T::zero(); g.len()])
            });
            match v {
                Some(v) => {
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = mu * *vi + gi + wd * *w;
                        let d = lr * *vi;
                        norm += d.as_f64().powi(2);
                        *w -= d;
                    }
                }
                None => {
                    for (w, &gi) in p.data_mut().iter_mut().zip(g) {
                        let d = lr * (gi + wd * *w);
                        norm += d.as_f64().powi(2);
                        *w -= d;
                    }
                }
            }
        }
        Ok(norm.sqrt())
    }
}

/// One recorded forward/backward pass of the total loss.
pub struct LossEval<T> {
    pub loss: LossBreakdown,
    pub predictions: Vec<AdvTriple>,
    pub grads: Gradients<T>,
    pub batch_stats: Vec<BatchStats<T>>,
}

/// Train-mode loss and parameter gradients; the model is not modified.
pub fn loss_and_gradients<T: Float>(
    model: &Wav2Small<T>,
    batch: &[Waveform],
    targets: &[AdvTriple],
    cfg: &LossConfig,
) -> Result<LossEval<T>> {
    let mut tape = GradTape::new();
    let (out, batch_stats) = model.forward_recorded(batch, &mut tape)?;
    let predictions: Vec<AdvTriple> = (0..out.rows())
        .map(|r| {
            let row = out.row(r);
            AdvTriple::new(row[0].as_f64(), row[1].as_f64(), row[2].as_f64())
        })
        .collect();
    if predictions.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("student prediction".into()));
    }
    let (loss, grad) = total_loss(&predictions, targets, cfg)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss:?}")));
    }
    let g = Matrix::new(grad.len(), 3, grad.iter().flatten().map(|&v| T::lit(v)).collect())?;
    let grads = tape.backward(g)?;
    Ok(LossEval {
        loss,
        predictions,
        grads,
        batch_stats,
    })
}

/// Telemetry for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub ccc: f64,
    pub quadrant: f64,
    pub batch_ccc: [f64; 3],
    pub grad_norm: f64,
    pub update_norm: f64,
}

impl StepReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Labels `batch` with the teacher and takes one SGD step on the student.
///
/// Errors leave the model untouched, including batch-norm running statistics.
pub fn distill_step<T: Float>(
    model: &mut Wav2Small<T>,
    teacher: &TeacherOracle,
    batch: &[Waveform],
    loss_cfg: &LossConfig,
    opt: &mut Sgd<T>,
    step: u64,
) -> Result<StepReport> {
    if model.mode() != Mode::Train {
        return Err(Error::State("distill_step requires a train-mode model".into()));
    }
    let targets = teacher.predict_batch(batch)?;
    let eval = loss_and_gradients(model, batch, &targets, loss_cfg)?;
    let update_norm = opt.step(model, &eval.grads)?;
    model.apply_batch_stats(&eval.batch_stats)?;
    Ok(StepReport {
        step,
        loss: eval.loss.total,
        ccc: eval.loss.ccc,
        quadrant: eval.loss.quadrant,
        batch_ccc: eval.loss.batch_ccc,
        grad_norm: eval.grads.l2_norm(),
        update_norm,
    })
}

/// Progress events from [`run_distillation`].
pub enum TrainEvent<'a> {
    Step(&'a StepReport),
    /// The step failed (e.g. non-finite loss) and was skipped.
    Skipped { step: u64, error: &'a Error },
    Checkpoint { step: u64, model: &'a Wav2Small<f32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub skipped: u64,
    /// Batch CCC loss of every completed step, in order.
    pub ccc_history: Vec<f64>,
}

impl TrainSummary {
    /// Mean CCC loss over the `window` steps ending at `step` (1-based).
    pub fn running_average(&self, step: usize, window: usize) -> Option<f64> {
        if step == 0 || step > self.ccc_history.len() || window == 0 {
            return None;
        }
        let lo = step.saturating_sub(window);
        let s = &self.ccc_history[lo..step];
        Some(s.iter().sum::<f64>() / s.len() as f64)
    }
}

/// Runs `cfg.steps` distillation steps on batches from a background producer.
pub fn run_distillation(
    model: &mut Wav2Small<f32>,
    teacher: &TeacherOracle,
    buckets: Arc<CorpusBuckets>,
    aug: &AugmentationConfig,
    cfg: &TrainingConfig,
    mut observe: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    aug.validate()?;
    model.set_mode(Mode::Train);
    let mut opt = Sgd::from_config(cfg);
    let loss_cfg = cfg.loss();
    let producer = BatchProducer::spawn(buckets, aug.clone(), cfg.batch_size, 0, cfg.steps, 4)?;
    let mut summary = TrainSummary {
        steps: 0,
        skipped: 0,
        ccc_history: Vec::with_capacity(cfg.steps as usize),
    };
    for (i, batch) in producer.enumerate() {
        let step = i as u64 + 1;
        let batch = batch?;
        match distill_step(model, teacher, &batch, &loss_cfg, &mut opt, step) {
            Ok(r) => {
                summary.ccc_history.push(r.ccc);
                observe(TrainEvent::Step(&r))?;
            }
            Err(e @ Error::NonFinite(_)) => {
                summary.skipped += 1;
                observe(TrainEvent::Skipped { step, error: &e })?;
            }
            Err(e) => return Err(e),
        }
        summary.steps = step;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            observe(TrainEvent::Checkpoint { step, model })?;
        }
    }
    Ok(summary)
}
