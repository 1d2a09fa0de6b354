use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{check_bits, TrainConfig, FULL_PRECISION};
use super::data::Dataset;
use super::model::{EvalMode, Model};
use crate::autograd::{self, cross_entropy, sgd_step};
use crate::error::{Error, Result};
use crate::quant::{calibrate_ema, calibrate_minmax, fake_quantize, Granularity, Scheme};
use crate::tensor::Tensor;

/// Samples per evaluation batch.
const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch; absent for the initial entry.
    pub train_loss: Option<f64>,
    /// Full pass over the training set after the epoch.
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub samples: usize,
    pub epochs: Vec<EpochReport>,
}

impl TrainReport {
    pub fn final_metrics(&self) -> Metrics {
        let last = self.epochs.last().expect("report always has the initial entry");
        Metrics {
            accuracy: last.accuracy,
            loss: last.loss,
        }
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Predicted class of every sample, in dataset order.
pub fn predict(model: &Model, data: &Dataset, mode: EvalMode) -> Result<(Vec<usize>, Tensor)> {
    let logits = batched_logits(model, data, mode)?;
    let classes = logits.shape()[1];
    Ok((logits.data().chunks(classes).map(argmax).collect(), logits))
}

fn batched_logits(model: &Model, data: &Dataset, mode: EvalMode) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let starts: Vec<usize> = (0..data.len()).step_by(EVAL_BATCH).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let x = data.features().slice_rows(s, (s + EVAL_BATCH).min(data.len()))?;
            model.logits(&x, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = parts[0].shape()[1];
    let mut all = Vec::with_capacity(data.len() * classes);
    for p in parts {
        all.extend_from_slice(p.data());
    }
    Tensor::new([data.len(), classes], all)
}

/// Accuracy and mean cross-entropy over the whole dataset.
pub fn evaluate(model: &Model, data: &Dataset, mode: EvalMode) -> Result<Metrics> {
    let (pred, logits) = predict(model, data, mode)?;
    if logits.shape()[1] < data.num_classes() {
        return Err(Error::dim(format!(
            "model emits {} logits for a {}-class dataset",
            logits.shape()[1],
            data.num_classes()
        )));
    }
    let correct = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    let loss = cross_entropy(&logits, data.labels())? as f64;
    Ok(Metrics {
        accuracy: correct as f64 / data.len() as f64,
        loss,
    })
}

/// Quantization-aware training with plain SGD on the latent weights.
///
/// Each step runs the fake-quant forward, backpropagates with the
/// straight-through estimator, updates the weights and then folds the
/// observed activation ranges into the running EMA. Epoch shuffles come from
/// a ChaCha stream keyed by the model seed and the epoch number.
pub fn train(model: &mut Model, data: &Dataset, hyper: &TrainConfig) -> Result<TrainReport> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::arg("cannot train on an empty dataset"));
    }
    model.unfreeze();
    let first: Vec<usize> = (0..hyper.batch.min(data.len())).collect();
    model.calibrate_missing_acts(&data.batch(&first)?.0)?;

    let mut report = TrainReport {
        seed: model.seed,
        samples: data.len(),
        epochs: Vec::with_capacity(hyper.epochs + 1),
    };
    let initial = evaluate(model, data, EvalMode::Fake)?;
    report.epochs.push(EpochReport {
        epoch: 0,
        train_loss: None,
        accuracy: initial.accuracy,
        loss: initial.loss,
    });

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=hyper.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(hyper.batch) {
            let (x, y) = data.batch(chunk)?;
            let built = model.graph(Some(y), false)?;
            let loss_node = built.loss.expect("labels supplied");
            let (loss, tape) = autograd::forward(&built.graph, loss_node, std::slice::from_ref(&x), &model.params)
                .map_err(|e| Error::Training {
                    epoch,
                    message: e.to_string(),
                })?;
            let loss = loss.data()[0];
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("loss became {loss} at step {steps}"),
                });
            }
            let grads = autograd::backward(&tape, loss_node)?;
            if let Some((id, _)) = grads.params.iter().find(|(_, g)| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite gradient for parameter {id} at step {steps}"),
                });
            }
            sgd_step(&mut model.params, &grads, hyper.lr)?;

            for &(layer, node) in &built.layer_inputs {
                let l = &model.layers[layer];
                if !l.quantizes_acts() {
                    continue;
                }
                let current = l.act_params.as_ref().expect("calibrated before training");
                let observed = tape.value(node).expect("evaluated");
                // A degenerate batch (e.g. constant) keeps the previous range.
                if let Ok(next) = calibrate_ema(current, observed, model.ema_momentum) {
                    model.layers[layer].act_params = Some(next);
                }
            }
            loss_sum += loss as f64;
            steps += 1;
        }

        let m = evaluate(model, data, EvalMode::Fake)?;
        if !m.loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("evaluation loss became {}", m.loss),
            });
        }
        report.epochs.push(EpochReport {
            epoch,
            train_loss: Some(loss_sum / steps as f64),
            accuracy: m.accuracy,
            loss: m.loss,
        });
    }
    Ok(report)
}

/// Quantizes a trained FP32 model without retraining: per-channel min/max
/// for weights, per-tensor min/max over a calibration pass for activations.
/// The resulting weight params are frozen.
pub fn post_training_quantize(model: &Model, calib: &Dataset, bits: u8, scheme: Scheme) -> Result<Model> {
    check_bits("bits", bits).map_err(|_| Error::arg(format!("bit-width {bits} must be in [1, 8] or 32")))?;
    if !model.is_fp32() {
        return Err(Error::arg("post-training quantization needs an FP32 model"));
    }
    if calib.is_empty() {
        return Err(Error::arg("calibration set is empty"));
    }
    if bits == FULL_PRECISION {
        return Ok(model.clone());
    }

    // Layer inputs of the FP32 network over the whole calibration set.
    let mut samples: Vec<Vec<Tensor>> = vec![Vec::new(); model.layers.len()];
    for start in (0..calib.len()).step_by(EVAL_BATCH) {
        let x = calib.features().slice_rows(start, (start + EVAL_BATCH).min(calib.len()))?;
        let (_, inputs) = model.layer_inputs(&x, false)?;
        for (layer, t) in inputs {
            samples[layer].push(t);
        }
    }

    let mut out = model.clone();
    for i in 0..out.layers.len() {
        if !out.layers[i].spec.has_weights() {
            continue;
        }
        let spec = &mut out.layers[i].spec;
        spec.weight_bits = bits;
        spec.act_bits = bits;
        spec.scheme = scheme;
        let spec = *spec;
        if bits > 1 {
            let w = out.weight(i).expect("weight layer").clone();
            let params = calibrate_minmax(std::slice::from_ref(&w), bits, scheme, spec.granularity)?;
            *out.weight_mut(i).expect("weight layer") = fake_quantize(&w, &params)?;
            out.layers[i].weight_params = Some(params);
            out.layers[i].act_params =
                Some(calibrate_minmax(&samples[i], bits, scheme, Granularity::PerTensor)?);
        } else if spec.binary_scale {
            out.layers[i].frozen_scale = out.binary_scale(i);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::config::LayerSpec;
    use crate::engine::data::{gen_synthetic, SyntheticKind};

    fn fp32_mlp(seed: u64) -> Model {
        Model::new(&[LayerSpec::linear(2, 16), LayerSpec::relu(), LayerSpec::linear(16, 2)], seed, 0.9).unwrap()
    }

    fn hyper(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 0.1,
            epochs,
            batch: 32,
        }
    }

    #[test]
    fn zero_epochs_reports_initial_metrics() {
        let data = gen_synthetic(SyntheticKind::Blobs, 64, 1).unwrap();
        let mut m = fp32_mlp(1);
        let before = m.clone();
        let r = train(&mut m, &data, &hyper(0)).unwrap();
        assert_eq!(r.epochs.len(), 1);
        assert_eq!(r.epochs[0].epoch, 0);
        assert_eq!(m, before);
        assert_eq!(r.final_metrics(), evaluate(&m, &data, EvalMode::Fake).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = gen_synthetic(SyntheticKind::Blobs, 256, 2).unwrap();
        let (mut a, mut b) = (fp32_mlp(3), fp32_mlp(3));
        let ra = train(&mut a, &data, &hyper(3)).unwrap();
        let rb = train(&mut b, &data, &hyper(3)).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert!(ra.final_metrics().accuracy > 0.95, "{ra:?}");
        assert_eq!(ra.final_metrics(), evaluate(&a, &data, EvalMode::Fake).unwrap());
    }

    #[test]
    fn divergence_names_the_epoch() {
        let data = gen_synthetic(SyntheticKind::Blobs, 64, 2).unwrap();
        let mut m = fp32_mlp(3);
        let hot = TrainConfig {
            lr: 1e30,
            epochs: 5,
            batch: 8,
        };
        match train(&mut m, &data, &hot) {
            Err(Error::Training { epoch, .. }) => assert!((1..=5).contains(&epoch)),
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    #[test]
    fn ptq_identity_and_errors() {
        let data = gen_synthetic(SyntheticKind::Blobs, 64, 2).unwrap();
        let m = fp32_mlp(3);
        assert_eq!(post_training_quantize(&m, &data, 32, Scheme::Symmetric).unwrap(), m);
        assert!(post_training_quantize(&m, &data, 0, Scheme::Symmetric).is_err());
        let q = post_training_quantize(&m, &data, 8, Scheme::Symmetric).unwrap();
        assert!(post_training_quantize(&q, &data, 8, Scheme::Symmetric).is_err());
        let fake = evaluate(&q, &data, EvalMode::Fake).unwrap();
        let int = evaluate(&q, &data, EvalMode::Int).unwrap();
        assert_eq!(fake.accuracy, int.accuracy);
    }

    #[test]
    fn empty_dataset_errors() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        let m = fp32_mlp(1);
        let x = Tensor::new([1, 2], vec![0.0, 0.0]).unwrap();
        let one = Dataset::new(x, vec![0], 2, crate::engine::data::Split::Test).unwrap();
        assert!(evaluate(&m, &one, EvalMode::Fake).is_ok());
    }
}
