//! `side`: data generation, source training, adaptation and diagnostics.

mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use config::ConfigArgs;
use side_core::checks::{check_term, LossTerm};
use side_core::cidf::{extract_prototypes, select_intermediate};
use side_core::data::{generate_heldout_source, generate_pair, load_dataset, save_dataset, Manifest, Role, ShiftSpec};
use side_core::experiment::{benchmark_config, run_benchmark};
use side_core::network::ModelBundle;
use side_core::par::Exec;
use side_core::pretrain::pretrain;
use side_core::train::{adapt, evaluate, export_embeddings, save_metrics_csv, LabelMonitor, Monitor, NoMonitor};
use side_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "side", version, about = "Source-free domain adaptation on synthetic shifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FamilyArg {
    TwoMoons,
    GaussBlobs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write source, target and held-out source sets with their manifests
    GenData {
        #[arg(long, value_enum, default_value = "two-moons")]
        family: FamilyArg,
        /// target rotation for two-moons, degrees
        #[arg(long, default_value_t = 45.0)]
        rotation_deg: f64,
        /// target mean shift for gauss-blobs, comma separated
        #[arg(long, value_delimiter = ',', default_value = "3,0")]
        translation: Vec<f64>,
        /// classes for gauss-blobs (two-moons always has 2)
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 200)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0.15)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a source model on a labeled CSV
    Pretrain {
        #[arg(long)]
        source: PathBuf,
        /// checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// per-epoch `epoch,loss,source_acc` log
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Adapt a source checkpoint to unlabeled target data
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// receives model.json, metrics.csv, summary.json and intermediate.csv
        #[arg(long)]
        out_dir: PathBuf,
        /// do not score against the target labels, even if present
        #[arg(long)]
        blind: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Accuracy of a checkpoint on a labeled CSV
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the analytic loss gradients
    GradCheck {
        /// one of smoothed_ce, intermediate, gap, sample, class, combined, or all
        #[arg(long, default_value = "all")]
        loss: String,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write encoder features of a dataset as CSV
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// flag the samples the model would select, n_m per class
        #[arg(long = "n-m")]
        n_m: Option<usize>,
    },
    /// Source-only vs. adapted accuracy over `--seeds` on rotated two-moons
    Benchmark {
        #[arg(long, default_value_t = 45.0)]
        rotation_deg: f64,
        #[arg(long, default_value_t = 200)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0.15)]
        noise: f64,
        /// write the per-seed report here as well as to stdout
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Exit status for a failed command.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        Error::Numerical { .. } => 3,
        Error::Io(_) | Error::Parse { .. } | Error::Json(_) => 4,
        _ => 1,
    }
}

/// Names the file in I/O errors, which otherwise only carry the OS message.
fn at<T>(path: &Path, res: Result<T>) -> Result<T> {
    res.map_err(|err| match err {
        Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))),
        other => other,
    })
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn gen_data(spec: &ShiftSpec, out_dir: &Path) -> Result<()> {
    let (source, target) = generate_pair(spec)?;
    let heldout = generate_heldout_source(spec)?;
    at(out_dir, fs::create_dir_all(out_dir).map_err(Error::from))?;
    save_dataset(&source, &Manifest::new(spec, Role::Source), &out_dir.join("source.csv"))?;
    save_dataset(&target, &Manifest::new(spec, Role::Target), &out_dir.join("target.csv"))?;
    save_dataset(&heldout, &Manifest::new(spec, Role::Source), &out_dir.join("source_heldout.csv"))?;
    log::info!("wrote {} source and {} target samples to {}", source.len(), target.len(), out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            family,
            rotation_deg,
            translation,
            k,
            n_per_class,
            noise,
            seed,
            out_dir,
        } => {
            let spec = match family {
                FamilyArg::TwoMoons => ShiftSpec::two_moons(rotation_deg, n_per_class, noise, seed),
                FamilyArg::GaussBlobs => ShiftSpec::gauss_blobs(k, translation, n_per_class, noise, seed),
            };
            spec.validate()?;
            gen_data(&spec, &out_dir)
        }
        Command::Pretrain { source, out, log, cfg } => {
            let cfg = cfg.resolve()?;
            let (set, _) = at(&source, load_dataset(&source))?;
            let (model, history) = pretrain(&set, &cfg.pretrain_config(cfg.seed))?;
            if let Some(path) = log {
                let mut w = BufWriter::new(fs::File::create(path)?);
                writeln!(w, "epoch,loss,source_acc")?;
                for e in &history {
                    writeln!(w, "{},{},{}", e.epoch, e.loss, e.source_acc)?;
                }
                w.flush()?;
            }
            at(&out, model.save(&out))?;
            println!("source accuracy {:.4}", evaluate(&model, &set)?);
            Ok(())
        }
        Command::Adapt {
            model,
            target,
            out_dir,
            blind,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let source_model = at(&model, ModelBundle::load(&model))?;
            let (target, _) = at(&target, load_dataset(&target))?;
            let monitor: Box<dyn Monitor + '_> = if blind {
                Box::new(NoMonitor)
            } else {
                Box::new(LabelMonitor::new(&target))
            };
            let source_only = monitor.target_accuracy(&source_model)?;
            let outcome = adapt(&source_model, &target.unlabeled(), &cfg, monitor.as_ref())?;

            at(&out_dir, fs::create_dir_all(&out_dir).map_err(Error::from))?;
            outcome.model.save(&out_dir.join("model.json"))?;
            save_metrics_csv(&outcome.history, &out_dir.join("metrics.csv"))?;
            let mut dump = BufWriter::new(fs::File::create(out_dir.join("intermediate.csv"))?);
            for (i, set) in outcome.selections.iter().enumerate() {
                set.write_dump(&mut dump, i == 0)?;
            }
            dump.flush()?;
            let summary = outcome.summary(source_only, monitor.as_ref());
            write_json(&summary, &out_dir.join("summary.json"))?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(())
        }
        Command::Eval { model, data } => {
            let model = at(&model, ModelBundle::load(&model))?;
            let (set, _) = at(&data, load_dataset(&data))?;
            let acc = evaluate(&model, &set)?;
            println!("{}", serde_json::json!({ "accuracy": acc, "n": set.len() }));
            Ok(())
        }
        Command::GradCheck {
            loss,
            instances,
            seed,
            tol,
        } => {
            let terms = if loss == "all" {
                LossTerm::ALL.to_vec()
            } else {
                vec![loss.parse::<LossTerm>()?]
            };
            let mut failed = Vec::new();
            for term in terms {
                let worst = check_term(term, instances, seed)?;
                let ok = worst <= tol;
                println!("{term}: max relative error {worst:.3e} {}", if ok { "PASS" } else { "FAIL" });
                if !ok {
                    failed.push(term.name());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Contract(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::ExportEmbeddings { model, data, out, n_m } => {
            let model = at(&model, ModelBundle::load(&model))?;
            let (set, _) = at(&data, load_dataset(&data))?;
            let selection = match n_m {
                Some(n_m) => Some(select_intermediate(
                    &model,
                    &set.unlabeled(),
                    &extract_prototypes(&model)?,
                    n_m,
                )?),
                None => None,
            };
            at(&out, export_embeddings(&model, set.features(), selection.as_ref(), &out))
        }
        Command::Benchmark {
            rotation_deg,
            n_per_class,
            noise,
            out,
            cfg,
        } => {
            let cfg = cfg.resolve_over(benchmark_config())?;
            let spec = ShiftSpec::two_moons(rotation_deg, n_per_class, noise, 0);
            spec.validate()?;
            let report = run_benchmark(&spec, &cfg, Exec::default())?;
            for s in &report.seeds {
                println!(
                    "seed {}: source-only {:.4}, adapted {:.4}, gain {:+.4}",
                    s.seed,
                    s.source_only_acc,
                    s.adapted_acc,
                    s.gain()
                );
            }
            println!(
                "mean: source-only {:.4}, adapted {:.4}, gain {:+.4}",
                report.mean_source_only(),
                report.mean_adapted(),
                report.mean_gain()
            );
            if let Some(path) = out {
                write_json(&report, &path)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
