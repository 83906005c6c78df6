//! Supervised source training with label-smoothed cross-entropy.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::network::{sgd_step, ArchSpec, EncoderPath, LearningRates, ModelBundle, ParamKey};

/// Rows of `(1 - tau) * onehot + tau / K`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedLabels(Matrix);

impl SmoothedLabels {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

pub fn smooth_labels(labels: &[usize], class_count: usize, tau: f64) -> Result<SmoothedLabels> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::config("tau", format!("{tau} is outside [0, 1)")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(Error::Contract(format!("label {bad} outside [0, {class_count})")));
    }
    let off = tau / class_count as f64;
    let on = (1.0 - tau) + off;
    Ok(SmoothedLabels(Matrix::from_fn(labels.len(), class_count, |i, k| {
        if labels[i] == k {
            on
        } else {
            off
        }
    })))
}

/// Batch mean of `-sum_k target_k * log_softmax(logits)_k`.
pub fn soft_cross_entropy<K: Ord + Clone>(tape: &mut Tape<K>, logits: Var, targets: &Matrix) -> Result<Var> {
    let n = tape.value(logits).rows();
    if n == 0 {
        return Err(Error::Contract("cross-entropy of an empty batch".into()));
    }
    let log_p = tape.log_softmax_rows(logits);
    let t = tape.constant(targets.clone());
    let weighted = tape.mul(log_p, t)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / n as f64))
}

pub fn smoothed_ce_loss<K: Ord + Clone>(tape: &mut Tape<K>, logits: Var, targets: &SmoothedLabels) -> Result<Var> {
    soft_cross_entropy(tape, logits, targets.matrix())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub tau: f64,
    pub lr_backbone: f64,
    pub lr_classifier: f64,
    pub seed: u64,
    pub arch: ArchSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 200,
            tau: 0.1,
            lr_backbone: 1e-3,
            lr_classifier: 1e-2,
            seed: 0,
            arch: ArchSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub source_acc: f64,
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Full-batch SGD on the source set. Each record holds the loss and
/// accuracy of the forward pass that produced that epoch's update.
pub fn pretrain(source: &LabeledSet, cfg: &PretrainConfig) -> Result<(ModelBundle, Vec<PretrainEpoch>)> {
    if source.is_empty() {
        return Err(Error::Contract("source set is empty".into()));
    }
    let mut arch = cfg.arch.clone();
    arch.input_dim = source.feature_dim();
    arch.class_count = source.class_count();
    let mut model = ModelBundle::init(arch, cfg.seed)?;
    let targets = smooth_labels(source.labels(), source.class_count(), cfg.tau)?;
    let lrs = LearningRates {
        encoder: cfg.lr_backbone,
        classifier: cfg.lr_classifier,
        projector: 0.0,
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut tape: Tape<ParamKey> = Tape::new();
        let x = tape.constant(source.features().clone());
        let z = model.encode(&mut tape, x, EncoderPath::Main)?;
        let logits = model.classify(&mut tape, z)?;
        let loss = smoothed_ce_loss(&mut tape, logits, &targets)?;
        let loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::Numerical {
                epoch,
                term: "source cross-entropy".into(),
            });
        }
        let source_acc = accuracy(&tape.value(logits).argmax_rows(), source.labels());
        let grads = tape.backward(loss)?;
        sgd_step(&mut model, &grads, &lrs)?;
        history.push(PretrainEpoch {
            epoch,
            loss: loss_value,
            source_acc,
        });
    }
    model.sync_momentum();
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pair, ShiftSpec};

    #[test]
    fn zero_smoothing_is_one_hot() {
        let s = smooth_labels(&[1, 0, 2], 3, 0.0).unwrap();
        assert_eq!(s.matrix().row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(s.matrix().row(2), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn ten_classes_tau_point_one() {
        let s = smooth_labels(&[4], 10, 0.1).unwrap();
        let row = s.matrix().row(0);
        assert!((row[4] - 0.91).abs() < 1e-15);
        for (k, v) in row.iter().enumerate().filter(|(k, _)| *k != 4) {
            assert!((v - 0.01).abs() < 1e-15, "class {k}");
        }
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tau_out_of_range_is_config_error() {
        assert!(matches!(smooth_labels(&[0], 2, 1.0), Err(Error::Config { field: "tau", .. })));
        assert!(matches!(smooth_labels(&[0], 2, -0.1), Err(Error::Config { field: "tau", .. })));
    }

    fn ce_value(logits: &Matrix, targets: &SmoothedLabels) -> f64 {
        let mut tape: Tape<u8> = Tape::new();
        let l = tape.constant(logits.clone());
        let loss = smoothed_ce_loss(&mut tape, l, targets).unwrap();
        tape.scalar(loss)
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let t = smooth_labels(&[0, 2, 1], 4, 0.3).unwrap();
        let v = ce_value(&Matrix::filled(3, 4, 1.7), &t);
        assert!((v - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn loss_decreases_with_margin() {
        let t = smooth_labels(&[0], 3, 0.0).unwrap();
        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 5.0, 20.0, 100.0] {
            let v = ce_value(&Matrix::from_rows(&[[margin, 0.0, 0.0]]).unwrap(), &t);
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-40);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let spec = ShiftSpec::gauss_blobs(2, vec![0.0, 0.0], 10, 0.2, 0);
        let (src, _) = generate_pair(&spec).unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (model, hist) = pretrain(&src, &cfg).unwrap();
        assert!(hist.is_empty());
        assert_eq!(model, ModelBundle::init(cfg.arch.clone(), cfg.seed).unwrap());
    }
}
