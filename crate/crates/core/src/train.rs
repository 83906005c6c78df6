//! Adaptation loop, configuration, metrics and evaluation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape};
use crate::cidf::{
    extract_prototypes, intermediate_loss, refresh_due, select_intermediate, CycleSchedule, IntermediateSet,
};
use crate::cvcl::{augment_views, consistency_loss, momentum_predictions, momentum_update, AugSpec};
use crate::data::{format_f64, LabeledSet, TargetView};
use crate::error::{Error, Result};
use crate::idgt::{gap_loss, init_banks, mixup, sample_lambdas};
use crate::network::{sgd_step, ArchSpec, EncoderPath, LearningRates, ModelBundle, ParamKey};
use crate::par::Exec;
use crate::pretrain::{accuracy, PretrainConfig};
use crate::rng::{self, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// label smoothing
    pub tau: f64,
    /// cycle ratio of the refresh schedule
    pub alpha: f64,
    /// weight of the intermediate-sample loss
    pub gamma: f64,
    /// weight of the class-level consistency term
    pub epsilon: f64,
    pub n_m: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_classifier: f64,
    pub lr_projector: f64,
    /// mixup coefficients ~ Beta(beta, beta)
    pub beta: f64,
    /// fixed mixup coefficient in place of the Beta draws
    pub mixup_lambda: Option<f64>,
    /// neighbours in soft voting
    pub r: usize,
    /// momentum encoder decay
    pub omega: f64,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub aug: AugSpec,
    pub arch: ArchSpec,
    pub frozen_prototypes: bool,
    pub cyclic_filtering: bool,
    pub freeze_classifier: bool,
    pub source_epochs: usize,
    pub source_lr_backbone: f64,
    pub source_lr_classifier: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.1,
            alpha: 0.3,
            gamma: 0.1,
            epsilon: 0.01,
            n_m: 5,
            epochs: 100,
            batch_size: 32,
            lr_backbone: 1e-3,
            lr_classifier: 1e-2,
            lr_projector: 1e-2,
            beta: 1.0,
            mixup_lambda: None,
            r: 5,
            omega: 0.99,
            seed: 0,
            seeds: vec![0, 1, 2],
            aug: AugSpec::default(),
            arch: ArchSpec::default(),
            frozen_prototypes: false,
            cyclic_filtering: true,
            freeze_classifier: false,
            source_epochs: 200,
            source_lr_backbone: 1e-3,
            source_lr_classifier: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_backbone", self.lr_backbone),
            ("lr_classifier", self.lr_classifier),
            ("lr_projector", self.lr_projector),
            ("source_lr_backbone", self.source_lr_backbone),
            ("source_lr_classifier", self.source_lr_classifier),
            ("beta", self.beta),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("{v} must be > 0")));
            }
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config("tau", format!("{} is outside [0, 1)", self.tau)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha", format!("{} is outside (0, 1]", self.alpha)));
        }
        for (field, v) in [("gamma", self.gamma), ("epsilon", self.epsilon)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("{v} must be >= 0")));
            }
        }
        if let Some(l) = self.mixup_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config("mixup_lambda", format!("{l} is outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::config("omega", format!("{} is outside [0, 1]", self.omega)));
        }
        for (field, v) in [("n_m", self.n_m), ("batch_size", self.batch_size), ("r", self.r)] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        self.aug.validate()?;
        self.arch.validate()
    }

    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs: self.source_epochs,
            tau: self.tau,
            lr_backbone: self.source_lr_backbone,
            lr_classifier: self.source_lr_classifier,
            seed,
            arch: self.arch.clone(),
        }
    }

    pub fn learning_rates(&self) -> LearningRates {
        LearningRates {
            encoder: self.lr_backbone,
            classifier: if self.freeze_classifier { 0.0 } else { self.lr_classifier },
            projector: self.lr_projector,
        }
    }
}

/// Label-aware observer. The adaptation loop never sees labels; it hands
/// models and selections to the monitor, which may score them.
pub trait Monitor {
    fn target_accuracy(&self, model: &ModelBundle) -> Result<Option<f64>>;
    fn selection_accuracy(&self, set: &IntermediateSet) -> Option<f64>;
}

pub struct NoMonitor;

impl Monitor for NoMonitor {
    fn target_accuracy(&self, _: &ModelBundle) -> Result<Option<f64>> {
        Ok(None)
    }

    fn selection_accuracy(&self, _: &IntermediateSet) -> Option<f64> {
        None
    }
}

pub struct LabelMonitor<'a> {
    labeled: &'a LabeledSet,
}

impl<'a> LabelMonitor<'a> {
    pub fn new(labeled: &'a LabeledSet) -> Self {
        LabelMonitor { labeled }
    }
}

impl Monitor for LabelMonitor<'_> {
    fn target_accuracy(&self, model: &ModelBundle) -> Result<Option<f64>> {
        evaluate(model, self.labeled).map(Some)
    }

    fn selection_accuracy(&self, set: &IntermediateSet) -> Option<f64> {
        Some(set.accuracy(self.labeled.labels()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub l_int: f64,
    pub l_gap: f64,
    pub l_sam: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub target_accuracy: Option<f64>,
    /// accuracy of the intermediate set in force during this epoch
    pub intermediate_accuracy: Option<f64>,
    /// accuracy of the model's own argmax labels when the set was refreshed
    pub pseudo_label_accuracy: Option<f64>,
    pub refresh: bool,
}

pub const METRICS_HEADER: &str =
    "epoch,L_int,L_gap,L_sam,L_cls,L_total,target_accuracy,intermediate_accuracy,pseudo_label_accuracy,refresh";

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            format_f64(self.l_int),
            format_f64(self.l_gap),
            format_f64(self.l_sam),
            format_f64(self.l_cls),
            format_f64(self.l_total),
            opt(self.target_accuracy),
            opt(self.intermediate_accuracy),
            opt(self.pseudo_label_accuracy),
            u8::from(self.refresh),
        )
    }
}

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], out: &mut W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn save_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_metrics_csv(records, &mut out)?;
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub model: ModelBundle,
    pub history: Vec<MetricsRecord>,
    /// every intermediate set filtered during the run, in epoch order
    pub selections: Vec<IntermediateSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefreshAccuracy {
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_target_acc: Option<f64>,
    pub source_only_acc: Option<f64>,
    pub per_refresh_intermediate_acc: Vec<RefreshAccuracy>,
}

impl AdaptOutcome {
    pub fn summary(&self, source_only_acc: Option<f64>, monitor: &dyn Monitor) -> Summary {
        Summary {
            final_target_acc: self.history.last().and_then(|r| r.target_accuracy).or(source_only_acc),
            source_only_acc,
            per_refresh_intermediate_acc: self
                .selections
                .iter()
                .filter_map(|s| {
                    monitor.selection_accuracy(s).map(|accuracy| RefreshAccuracy {
                        epoch: s.epoch_selected(),
                        accuracy,
                    })
                })
                .collect(),
        }
    }
}

fn finite(epoch: usize, term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical {
            epoch,
            term: term.to_string(),
        })
    }
}

fn one_hot(labels: &[usize], k: usize) -> Matrix {
    Matrix::from_fn(labels.len(), k, |i, j| if labels[i] == j { 1.0 } else { 0.0 })
}

/// Adapts `source_model` to the unlabeled target data.
///
/// Per epoch: refilter the intermediate set at epoch 1 and on refresh
/// epochs (adding the intermediate loss in those epochs), then for each
/// shuffled mini-batch: soft-vote pseudo-labels from the banks, refresh the
/// banks, mix intermediate with target samples, build two views, update the
/// momentum encoder and take one SGD step on
/// `L_int + L_gap + L_sam + epsilon * L_cls`.
pub fn adapt(
    source_model: &ModelBundle,
    target: &TargetView,
    cfg: &TrainConfig,
    monitor: &dyn Monitor,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::Contract("target set is empty".into()));
    }
    let n_t = target.len();
    if cfg.r >= n_t {
        return Err(Error::config("r", format!("{} neighbours need more than {n_t} target samples", cfg.r)));
    }
    let schedule = CycleSchedule::new(cfg.epochs, cfg.alpha)?;
    log::info!(
        "refresh epochs {:?} ({} cycles implied by alpha = {})",
        schedule.refresh_epochs(),
        schedule.cycle_count(),
        cfg.alpha
    );

    let mut model = source_model.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut selections = Vec::new();
    if cfg.epochs == 0 {
        return Ok(AdaptOutcome {
            model,
            history,
            selections,
        });
    }
    model.reinit_projector(cfg.seed);
    model.sync_momentum();

    let k = model.arch().class_count;
    let frozen = extract_prototypes(source_model)?;
    let mut banks = init_banks(&model, target)?;
    let mut current = IntermediateSet::empty(k);
    let lrs = cfg.learning_rates();

    let mut batch_rng = rng::stream(cfg.seed, streams::BATCHING);
    let mut draw_rng = rng::stream(cfg.seed, streams::INTERMEDIATE_DRAW);
    let mut mix_rng = rng::stream(cfg.seed, streams::MIXUP);
    let mut aug_rng = rng::stream(cfg.seed, streams::AUGMENT);

    let features = target.features();
    let mut order: Vec<usize> = (0..n_t).collect();

    for epoch in 1..=cfg.epochs {
        let refresh = epoch == 1 || (cfg.cyclic_filtering && refresh_due(&schedule, epoch));
        let mut pseudo_label_accuracy = None;
        if refresh {
            let protos = if cfg.frozen_prototypes {
                frozen.clone()
            } else {
                extract_prototypes(&model)?
            };
            current = select_intermediate(&model, target, &protos, cfg.n_m)?.with_epoch(epoch);
            pseudo_label_accuracy = monitor.target_accuracy(&model)?;
            selections.push(current.clone());
        }
        let pool: Vec<(usize, usize)> = current.entries().map(|s| (s.id, s.class)).collect();

        order.shuffle(&mut batch_rng);
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        for ids in order.chunks(cfg.batch_size) {
            let b = ids.len();
            let x_t = features.select_rows(ids);
            let mut tape: Tape<ParamKey> = Tape::new();

            let l_int = if refresh {
                let picks: Vec<(usize, usize)> =
                    (0..b).map(|_| pool[draw_rng.random_range(0..pool.len())]).collect();
                let xs: Vec<usize> = picks.iter().map(|p| p.0).collect();
                let ys: Vec<usize> = picks.iter().map(|p| p.1).collect();
                intermediate_loss(&model, &mut tape, &features.select_rows(&xs), &ys, cfg.tau, cfg.gamma)?
            } else {
                tape.constant(Matrix::scalar(0.0))
            };

            // pseudo-labels from bank history, then the bank takes this batch
            let z_t = model.encode_plain(&x_t, EncoderPath::Main)?;
            let scores_t = model.classify_plain(&z_t)?.softmax_rows();
            let exclude: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
            let q_t = banks.soft_vote_batch(&z_t, cfg.r, &exclude, Exec::default())?;
            banks.update(ids, &z_t, &scores_t)?;

            let picks: Vec<(usize, usize)> = (0..b).map(|_| pool[draw_rng.random_range(0..pool.len())]).collect();
            let xs: Vec<usize> = picks.iter().map(|p| p.0).collect();
            let ys: Vec<usize> = picks.iter().map(|p| p.1).collect();
            let lambdas = match cfg.mixup_lambda {
                Some(l) => vec![l; b],
                None => sample_lambdas(&mut mix_rng, cfg.beta, b)?,
            };
            let mixed = mixup(&features.select_rows(&xs), &one_hot(&ys, k), &x_t, &q_t, &lambdas)?;
            let l_gap = gap_loss(&model, &mut tape, &mixed)?;

            let (x_a, x_b) = augment_views(&x_t, &cfg.aug, &mut aug_rng)?;
            let p_b = momentum_predictions(&model, &x_b)?;
            let con = consistency_loss(&model, &mut tape, &x_a, &x_b, &p_b, cfg.epsilon)?;

            let partial = tape.add(l_int, l_gap)?;
            let total = tape.add(partial, con.total)?;
            let values = [
                finite(epoch, "L_int", tape.scalar(l_int))?,
                finite(epoch, "L_gap", tape.scalar(l_gap))?,
                finite(epoch, "L_sam", tape.scalar(con.sample))?,
                finite(epoch, "L_cls", tape.scalar(con.class))?,
                finite(epoch, "L_total", tape.scalar(total))?,
            ];
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            batches += 1;

            let grads = tape.backward(total)?;
            momentum_update(&mut model, cfg.omega)?;
            sgd_step(&mut model, &grads, &lrs)?;
        }

        let mean = |i: usize| sums[i] / batches as f64;
        let record = MetricsRecord {
            epoch,
            l_int: mean(0),
            l_gap: mean(1),
            l_sam: mean(2),
            l_cls: mean(3),
            l_total: mean(4),
            target_accuracy: monitor.target_accuracy(&model)?,
            intermediate_accuracy: monitor.selection_accuracy(&current),
            pseudo_label_accuracy,
            refresh,
        };
        log::debug!("epoch {epoch}: total {:.5} acc {:?}", record.l_total, record.target_accuracy);
        history.push(record);
    }

    Ok(AdaptOutcome {
        model,
        history,
        selections,
    })
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(model: &ModelBundle, labeled: &LabeledSet) -> Result<f64> {
    Ok(accuracy(&model.predict(labeled.features())?, labeled.labels()))
}

/// Writes `id,is_intermediate,f0..f{D-1}` with the main encoder's features.
pub fn export_embeddings(
    model: &ModelBundle,
    features: &Matrix,
    intermediate: Option<&IntermediateSet>,
    path: &Path,
) -> Result<()> {
    let z = model.encode_plain(features, EncoderPath::Main)?;
    let mut flags = vec![false; z.rows()];
    if let Some(set) = intermediate {
        for id in set.ids() {
            flags[id] = true;
        }
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    let mut header = String::from("id,is_intermediate");
    for j in 0..z.cols() {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(out, "{header}")?;
    for (i, row) in z.row_iter().enumerate() {
        write!(out, "{i},{}", u8::from(flags[i]))?;
        for v in row {
            write!(out, ",{}", format_f64(*v))?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn config_errors_name_fields() {
        let bad = TrainConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "alpha", .. })));
        let bad = TrainConfig {
            lr_projector: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "lr_projector", .. })));
        let bad = TrainConfig {
            tau: 1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "tau", .. })));
    }

    #[test]
    fn config_json_partial_uses_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"alpha": 0.5, "n_m": 3}"#).unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.n_m, 3);
        assert_eq!(cfg.gamma, 0.1);
        assert_eq!(cfg.epsilon, 0.01);
    }

    #[test]
    fn metrics_row_format() {
        let r = MetricsRecord {
            epoch: 3,
            l_int: 0.0,
            l_gap: 0.5,
            l_sam: 0.25,
            l_cls: 1.0,
            l_total: 0.76,
            target_accuracy: Some(0.75),
            intermediate_accuracy: None,
            pseudo_label_accuracy: None,
            refresh: true,
        };
        let row = r.csv_row();
        assert!(row.starts_with("3,0.0000000000000000e0,5.0000000000000000e-1,"));
        assert!(row.ends_with(",7.5000000000000000e-1,,,1"));
        assert_eq!(row.split(',').count(), METRICS_HEADER.split(',').count());
    }
}
