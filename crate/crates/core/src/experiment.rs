//! Multi-seed benchmark: pretrain on source, adapt on target, compare.

use serde::{Deserialize, Serialize};

use crate::data::{generate_heldout_source, generate_pair, ShiftSpec};
use crate::error::Result;
use crate::par::{self, Exec};
use crate::pretrain::pretrain;
use crate::train::{adapt, evaluate, LabelMonitor, TrainConfig};

/// The 45-degree rotated two-moons task: 200 samples per class, noise 0.15.
pub fn rotated_moons() -> ShiftSpec {
    ShiftSpec::two_moons(45.0, 200, 0.15, 0)
}

/// Adaptation defaults, with a source schedule long enough for the MLP to
/// fit two-moons (the adaptation rates are too small to pretrain with).
pub fn benchmark_config() -> TrainConfig {
    TrainConfig {
        source_epochs: 1000,
        source_lr_backbone: 0.1,
        source_lr_classifier: 0.1,
        ..TrainConfig::default()
    }
}

/// Everything measured for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub heldout_source_acc: f64,
    pub source_only_acc: f64,
    pub adapted_acc: f64,
    /// intermediate-set accuracy at the last refresh of the cyclic run
    pub final_intermediate_acc: f64,
    /// argmax pseudo-label accuracy on the whole target at that refresh
    pub final_pseudo_label_acc: f64,
    /// intermediate-set accuracy of the run with a single epoch-1 selection
    pub noncyclic_intermediate_acc: f64,
    pub noncyclic_adapted_acc: f64,
}

impl SeedResult {
    pub fn gain(&self) -> f64 {
        self.adapted_acc - self.source_only_acc
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seeds: Vec<SeedResult>,
}

impl BenchmarkReport {
    pub fn mean_source_only(&self) -> f64 {
        mean(self.seeds.iter().map(|s| s.source_only_acc))
    }

    pub fn mean_adapted(&self) -> f64 {
        mean(self.seeds.iter().map(|s| s.adapted_acc))
    }

    pub fn mean_gain(&self) -> f64 {
        self.mean_adapted() - self.mean_source_only()
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        return 0.0;
    }
    it.sum::<f64>() / n as f64
}

/// One seed: data and model init both follow `seed`.
pub fn run_seed(data: &ShiftSpec, cfg: &TrainConfig, seed: u64) -> Result<SeedResult> {
    let mut spec = data.clone();
    spec.seed = seed;
    let (source, target) = generate_pair(&spec)?;
    let heldout = generate_heldout_source(&spec)?;

    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let (model, _) = pretrain(&source, &cfg.pretrain_config(seed))?;
    let source_only_acc = evaluate(&model, &target)?;
    let heldout_source_acc = evaluate(&model, &heldout)?;

    let monitor = LabelMonitor::new(&target);
    let view = target.unlabeled();
    let cyclic = adapt(&model, &view, &cfg, &monitor)?;
    let last = cyclic.selections.last().expect("epoch 1 always selects");
    let final_intermediate_acc = last.accuracy(target.labels());
    let final_pseudo_label_acc = cyclic
        .history
        .iter()
        .rev()
        .find_map(|r| r.pseudo_label_accuracy)
        .unwrap_or(source_only_acc);

    let mut single = cfg.clone();
    single.cyclic_filtering = false;
    let noncyclic = adapt(&model, &view, &single, &monitor)?;
    let noncyclic_intermediate_acc = noncyclic
        .selections
        .last()
        .expect("epoch 1 always selects")
        .accuracy(target.labels());

    Ok(SeedResult {
        seed,
        heldout_source_acc,
        source_only_acc,
        adapted_acc: evaluate(&cyclic.model, &target)?,
        final_intermediate_acc,
        final_pseudo_label_acc,
        noncyclic_intermediate_acc,
        noncyclic_adapted_acc: evaluate(&noncyclic.model, &target)?,
    })
}

/// Runs every seed in `cfg.seeds`; seeds are independent and run in parallel.
pub fn run_benchmark(data: &ShiftSpec, cfg: &TrainConfig, exec: Exec) -> Result<BenchmarkReport> {
    let results = par::map_range(exec, cfg.seeds.len(), |i| run_seed(data, cfg, cfg.seeds[i]));
    Ok(BenchmarkReport {
        seeds: results.into_iter().collect::<Result<_>>()?,
    })
}
