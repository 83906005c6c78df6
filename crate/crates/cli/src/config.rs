//! Training configuration from an optional JSON file plus flag overrides.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use side_core::train::TrainConfig;
use side_core::{Error, Result};

/// Every field is optional; a given flag overrides the config file, which
/// overrides the built-in defaults.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// JSON file with any subset of the training fields
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long = "n-m")]
    pub n_m: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_backbone: Option<f64>,
    #[arg(long)]
    pub lr_classifier: Option<f64>,
    #[arg(long)]
    pub lr_projector: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// fixed mixup coefficient instead of Beta draws
    #[arg(long)]
    pub mixup_lambda: Option<f64>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub jitter_sigma: Option<f64>,
    #[arg(long)]
    pub scale_range: Option<f64>,
    #[arg(long)]
    pub rotation_max_deg: Option<f64>,
    /// hidden widths of the encoder, comma separated
    #[arg(long, value_delimiter = ',')]
    pub encoder_hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub projector_hidden: Option<usize>,
    #[arg(long)]
    pub projector_out: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub frozen_prototypes: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub cyclic_filtering: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub freeze_classifier: Option<bool>,
    #[arg(long)]
    pub source_epochs: Option<usize>,
    #[arg(long)]
    pub source_lr_backbone: Option<f64>,
    #[arg(long)]
    pub source_lr_classifier: Option<f64>,
}

fn set<T>(slot: &mut T, value: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = value {
        *slot = v.clone();
    }
}

impl ConfigArgs {
    /// Defaults, then the config file, then flags; validated.
    pub fn resolve(&self) -> Result<TrainConfig> {
        self.resolve_over(TrainConfig::default())
    }

    /// Like `resolve`, with `base` standing in for the defaults when no
    /// config file is given.
    pub fn resolve_over(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config {
                    field: "config",
                    reason: format!("{}: {e}", path.display()),
                })?
            }
            None => base,
        };
        set(&mut cfg.tau, &self.tau);
        set(&mut cfg.alpha, &self.alpha);
        set(&mut cfg.gamma, &self.gamma);
        set(&mut cfg.epsilon, &self.epsilon);
        set(&mut cfg.n_m, &self.n_m);
        set(&mut cfg.epochs, &self.epochs);
        set(&mut cfg.batch_size, &self.batch_size);
        set(&mut cfg.lr_backbone, &self.lr_backbone);
        set(&mut cfg.lr_classifier, &self.lr_classifier);
        set(&mut cfg.lr_projector, &self.lr_projector);
        set(&mut cfg.beta, &self.beta);
        if self.mixup_lambda.is_some() {
            cfg.mixup_lambda = self.mixup_lambda;
        }
        set(&mut cfg.r, &self.r);
        set(&mut cfg.omega, &self.omega);
        set(&mut cfg.seed, &self.seed);
        set(&mut cfg.seeds, &self.seeds);
        set(&mut cfg.aug.jitter_sigma, &self.jitter_sigma);
        set(&mut cfg.aug.scale_range, &self.scale_range);
        set(&mut cfg.aug.rotation_max_deg, &self.rotation_max_deg);
        set(&mut cfg.arch.encoder_hidden, &self.encoder_hidden);
        set(&mut cfg.arch.feature_dim, &self.feature_dim);
        set(&mut cfg.arch.projector_hidden, &self.projector_hidden);
        set(&mut cfg.arch.projector_out, &self.projector_out);
        set(&mut cfg.frozen_prototypes, &self.frozen_prototypes);
        set(&mut cfg.cyclic_filtering, &self.cyclic_filtering);
        set(&mut cfg.freeze_classifier, &self.freeze_classifier);
        set(&mut cfg.source_epochs, &self.source_epochs);
        set(&mut cfg.source_lr_backbone, &self.source_lr_backbone);
        set(&mut cfg.source_lr_classifier, &self.source_lr_classifier);
        cfg.validate()?;
        Ok(cfg)
    }
}
