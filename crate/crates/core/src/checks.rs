//! Randomized gradient checks of every loss term against central finite
//! differences.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, GradCheckReport, Matrix, Tape, Var};
use crate::cidf::intermediate_loss;
use crate::cvcl::{class_consistency_loss, consistency_loss, momentum_predictions, sample_consistency_loss};
use crate::error::{Error, Result};
use crate::idgt::{gap_loss, mixup, MixedBatch};
use crate::network::{ArchSpec, Component, EncoderPath, ModelBundle, ParamKey, ParamStore};
use crate::pretrain::{smooth_labels, smoothed_ce_loss};
use crate::rng;

pub const FD_STEP: f64 = 1e-5;

// stream for drawing check instances; kept apart from the training streams
const CHECK_STREAM: u64 = 90;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    SmoothedCe,
    Intermediate,
    Gap,
    Sample,
    Class,
    Combined,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::SmoothedCe,
        LossTerm::Intermediate,
        LossTerm::Gap,
        LossTerm::Sample,
        LossTerm::Class,
        LossTerm::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::SmoothedCe => "smoothed_ce",
            LossTerm::Intermediate => "intermediate",
            LossTerm::Gap => "gap",
            LossTerm::Sample => "sample",
            LossTerm::Class => "class",
            LossTerm::Combined => "combined",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config("loss", format!("unknown loss term `{s}`")))
    }
}

/// A small random model with random inputs for every loss.
#[derive(Clone, Debug)]
pub struct CheckInstance {
    pub model: ModelBundle,
    pub labels: Vec<usize>,
    pub x: Matrix,
    pub x_b: Matrix,
    /// momentum-branch predictions on `x_b`; a stop-gradient target, so it
    /// is fixed here rather than recomputed from perturbed parameters
    pub p_b: Matrix,
    pub mixed: MixedBatch,
    pub tau: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let normal = rand_distr::StandardNormal;
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(normal))
}

impl CheckInstance {
    /// Draws sizes `n <= 8`, `K <= 4`, `D <= 16` and all values from `seed`.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, CHECK_STREAM);
        let n = rng.random_range(2..=8);
        let k = rng.random_range(2..=4);
        let arch = ArchSpec {
            input_dim: rng.random_range(2..=4),
            encoder_hidden: vec![rng.random_range(3..=8)],
            feature_dim: rng.random_range(2..=16),
            class_count: k,
            projector_hidden: rng.random_range(3..=8),
            projector_out: rng.random_range(2..=6),
        };
        let d_in = arch.input_dim;
        let mut model = ModelBundle::init(arch, rng.random())?;
        // a momentum encoder that differs from the encoder exercises the
        // constant branch of the consistency terms
        let keys: Vec<ParamKey> = model.component(Component::Momentum).map(|(k, _)| *k).collect();
        for key in keys {
            let m = model.param_mut(&key).expect("listed key");
            for v in m.as_mut_slice() {
                *v += 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }

        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let x = gaussian_matrix(&mut rng, n, d_in);
        let x_b = gaussian_matrix(&mut rng, n, d_in);
        let x_m = gaussian_matrix(&mut rng, n, d_in);
        let q_m = Matrix::from_fn(n, k, |i, j| if labels[i] == j { 1.0 } else { 0.0 });
        let q_t = gaussian_matrix(&mut rng, n, k).softmax_rows();
        let lambdas: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let mixed = mixup(&x_m, &q_m, &x, &q_t, &lambdas)?;
        let p_b = momentum_predictions(&model, &x_b)?;
        Ok(CheckInstance {
            model,
            labels,
            x,
            x_b,
            p_b,
            mixed,
            tau: rng.random_range(0.0..0.5),
            gamma: rng.random_range(0.05..=1.0),
            epsilon: rng.random_range(0.01..=1.0),
        })
    }

    /// Records `term` on `tape` for `model`.
    pub fn record(&self, model: &ModelBundle, tape: &mut Tape<ParamKey>, term: LossTerm) -> Result<Var> {
        match term {
            LossTerm::SmoothedCe => {
                let x = tape.constant(self.x.clone());
                let z = model.encode(tape, x, EncoderPath::Main)?;
                let logits = model.classify(tape, z)?;
                let targets = smooth_labels(&self.labels, model.arch().class_count, self.tau)?;
                smoothed_ce_loss(tape, logits, &targets)
            }
            LossTerm::Intermediate => intermediate_loss(model, tape, &self.x, &self.labels, self.tau, self.gamma),
            LossTerm::Gap => gap_loss(model, tape, &self.mixed),
            LossTerm::Sample => sample_consistency_loss(model, tape, &self.x, &self.x_b),
            LossTerm::Class => {
                let xa = tape.constant(self.x.clone());
                let za = model.encode(tape, xa, EncoderPath::Main)?;
                let logits = model.classify(tape, za)?;
                let p_a = tape.softmax_rows(logits);
                let p_b = tape.constant(self.p_b.clone());
                class_consistency_loss(tape, p_a, p_b)
            }
            LossTerm::Combined => {
                let l_int = intermediate_loss(model, tape, &self.x, &self.labels, self.tau, self.gamma)?;
                let l_gap = gap_loss(model, tape, &self.mixed)?;
                let con = consistency_loss(model, tape, &self.x, &self.x_b, &self.p_b, self.epsilon)?;
                let partial = tape.add(l_int, l_gap)?;
                tape.add(partial, con.total)
            }
        }
    }

    pub fn loss(&self, model: &ModelBundle, term: LossTerm) -> Result<f64> {
        let mut tape = Tape::new();
        let v = self.record(model, &mut tape, term)?;
        Ok(tape.scalar(v))
    }

    /// Analytic gradient of `term` compared with finite differences over
    /// every parameter the term reaches.
    pub fn check(&self, term: LossTerm, step: f64) -> Result<GradCheckReport<ParamKey>> {
        let mut tape = Tape::new();
        let loss = self.record(&self.model, &mut tape, term)?;
        let grads = tape.backward(loss)?;
        let params: ParamStore = self
            .model
            .trainable_params()
            .into_iter()
            .filter(|(k, _)| grads.contains_key(k))
            .collect();
        finite_diff_check(
            |p| self.loss(&self.model.with_params(p)?, term),
            &params,
            &grads,
            step,
        )
    }
}

/// Worst relative error of `term` over `instances` random instances.
pub fn check_term(term: LossTerm, instances: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let inst = CheckInstance::random(seed.wrapping_add(i as u64))?;
        let report = inst.check(term, FD_STEP)?;
        if report.max_rel_err > worst {
            log::debug!("{term} instance {i}: {:.3e} at {:?}", report.max_rel_err, report.worst);
        }
        worst = worst.max(report.max_rel_err);
    }
    Ok(worst)
}
