//! Mini-batch training with SGD-momentum, evaluation, and the first-layer
//! ablation ladder.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::metrics::{metrics, Metrics};
use crate::model::{Cnn3dOptions, Model};
use crate::ops::{argmax_rows, softmax_cross_entropy};
use crate::optim::{Sgd, TrainConfig};
use crate::quant::percentile;

/// Percentile of first-epoch activations used as the frozen upper clip.
pub const CALIBRATION_PERCENTILE: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_oa: f64,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Trains `model` in place. Mini-batch order is drawn from `config.seed`; all
/// reductions are sequential, so a fixed seed gives bit-identical results.
///
/// Learned-range quantizers pass values through during epoch 0 and record them;
/// at the end of that epoch their upper clip is frozen at the 99.9th percentile.
pub fn train(model: &mut Model, set: &PatchSet, config: &TrainConfig) -> Result<History> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(&model.parameters());
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut history = History::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let calibrating = model.needs_calibration();
        let mut recorded: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut clamped = 0usize;
        for batch in order.chunks(config.batch_size) {
            let x = set.batch(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
            let (logits, tape) = model.forward(&x)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, t)| p == t).count();
            clamped += tape.clamped();
            if calibrating {
                for (layer, values) in tape.calibration_inputs() {
                    match recorded.iter_mut().find(|(l, _)| *l == layer) {
                        Some((_, v)) => v.extend_from_slice(values.values()),
                        None => recorded.push((layer, values.values().to_vec())),
                    }
                }
            }
            model.zero_grad();
            model.backward(tape, grad)?;
            sgd.step(&mut model.parameters_mut(), config, epoch)?;
        }
        if calibrating {
            freeze_calibration(model, recorded)?;
        }
        history.epochs.push(EpochRecord {
            epoch,
            lr: config.learning_rate(epoch),
            loss: loss_sum / set.len() as f64,
            train_oa: correct as f64 / set.len() as f64,
            clamped,
        });
    }
    Ok(history)
}

fn freeze_calibration(model: &mut Model, recorded: Vec<(usize, Vec<f64>)>) -> Result<()> {
    for (layer, mut state) in model.quant_states() {
        if state.calibrated {
            continue;
        }
        let Some((_, mut values)) = recorded.iter().find(|(l, _)| *l == layer).cloned() else {
            continue;
        };
        let hi = percentile(&mut values, CALIBRATION_PERCENTILE).unwrap_or(0.0);
        if hi > state.spec.clip_lo {
            state.spec.clip_hi = hi;
        }
        state.calibrated = true;
        model.set_quant_state(layer, state)?;
    }
    Ok(())
}

/// Predicted class per patch, in set order.
pub fn predict(model: &Model, set: &PatchSet, batch_size: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        out.extend(argmax_rows(&model.predict_logits(&set.batch(chunk))?));
    }
    Ok(out)
}

/// OA / AA / Kappa and the confusion matrix over `set`.
pub fn evaluate(model: &Model, set: &PatchSet) -> Result<Metrics> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let pred = predict(model, set, 256)?;
    metrics(&pred, &set.labels, model.spec().n_classes)
}

/// One configuration of the first-layer ablation ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationStep {
    pub label: String,
    pub options: Cnn3dOptions,
}

/// Cumulative CNN-3D ablation: baseline, then fewer first-layer channels,
/// larger spectral stride, `n_bits` activation quantization, and finally the
/// in-pixel transfer function.
pub fn ablation_steps(n_bits: u32) -> Vec<AblationStep> {
    let base = Cnn3dOptions::baseline();
    let channels = Cnn3dOptions { first_channels: 2, ..base.clone() };
    let stride = Cnn3dOptions { spectral_stride: 3, ..channels.clone() };
    let quant = Cnn3dOptions { quant_bits: Some(n_bits), ..stride.clone() };
    let custom = Cnn3dOptions { pip: true, ..quant.clone() };
    [
        ("baseline", base),
        ("channels 20->2", channels),
        ("spectral stride 1->3", stride),
        ("quantize activations", quant),
        ("custom transfer", custom),
    ]
    .into_iter()
    .map(|(label, options)| AblationStep { label: label.into(), options })
    .collect()
}
