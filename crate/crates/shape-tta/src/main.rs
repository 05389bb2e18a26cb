//! Command-line entry point for the shape-guided test-time adaptation
//! pipeline: phantom synthesis, source pretraining, per-subject adaptation,
//! evaluation, and the full benchmark grid.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use shape_tta::bench;
use shape_tta::config::{ModeName, RunConfig};
use shape_tta::data::{self, Domain, PhantomSpec, SubjectVolume};
use shape_tta::engine;
use shape_tta::error::{Error, Result};
use shape_tta::metrics;
use shape_tta::segnet::ParameterStore;

#[derive(Parser)]
#[command(name = "shape-tta", version, about = "Shape-guided test-time adaptation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpecName {
    Cardiac,
    Blob,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainName {
    Source,
    Target,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run-config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override schedule.tta_init_epochs.
    #[arg(long)]
    epochs_init: Option<usize>,
    /// Override schedule.tta_shape_epochs.
    #[arg(long)]
    epochs_shape: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(e) = self.epochs_init {
            config.schedule.tta_init_epochs = e;
        }
        if let Some(e) = self.epochs_shape {
            config.schedule.tta_shape_epochs = e;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom subjects.
    Synth {
        /// Phantom family.
        #[arg(long, value_enum, default_value = "cardiac")]
        spec: SpecName,
        #[arg(long, default_value_t = 6)]
        subjects: usize,
        #[arg(long, value_enum)]
        domain: DomainName,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the source model on labeled volumes.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory of source .vol files.
        #[arg(long)]
        source_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Adapt a pretrained checkpoint to one unlabeled subject.
    Adapt {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Subject .vol file.
        #[arg(long)]
        subject: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeName,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score prediction volumes against ground truth.
    Evaluate {
        /// Prediction .vol file or directory.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth .vol file or directory (matched by file name).
        #[arg(long)]
        gt: PathBuf,
        /// Method name for the report rows.
        #[arg(long, default_value = "method")]
        method: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Full benchmark: synth + pretrain + all methods + comparison table.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    bench::init_thread_pool();
    match cli.command {
        Command::Synth { spec, subjects, domain, seed, out_dir } => {
            let spec = match spec {
                SpecName::Cardiac => PhantomSpec::default(),
                SpecName::Blob => PhantomSpec::blob(),
            };
            let domain = match domain {
                DomainName::Source => Domain::Source,
                DomainName::Target => Domain::Target,
            };
            let volumes = data::generate(&spec, subjects, domain, seed)?;
            std::fs::create_dir_all(&out_dir)?;
            for v in &volumes {
                let path = out_dir.join(format!("{}.vol", v.header.subject_id));
                v.save(&path)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Pretrain { config, source_dir, out_dir } => {
            let config = config.load()?;
            let subjects = load_volume_dir(&source_dir)?;
            let (store, trace) = engine::pretrain(
                &subjects,
                &config.network,
                &config.schedule,
                data::derive_seed(config.seed, "pretrain"),
            )?;
            std::fs::create_dir_all(&out_dir)?;
            store.save(&out_dir.join("checkpoint.ckpt"))?;
            std::fs::write(out_dir.join("pretrain_trace.csv"), engine::pretrain_trace_csv(&trace))?;
            println!(
                "pretrained {} epochs; loss {:.4} -> {:.4}; checkpoint at {}",
                trace.len(),
                trace.first().map(|r| r.loss).unwrap_or(f64::NAN),
                trace.last().map(|r| r.loss).unwrap_or(f64::NAN),
                out_dir.join("checkpoint.ckpt").display()
            );
            Ok(())
        }
        Command::Adapt { config, checkpoint, subject, mode, out_dir } => {
            let config = config.load()?;
            if config.schedule.tta_shape_epochs > 0
                && !mode.to_mode().has_shape_phase()
                && explicit_epochs_shape()
            {
                return Err(Error::Config(format!(
                    "mode {:?} has no shape phase; --epochs-shape does not apply",
                    mode
                )));
            }
            if !checkpoint.exists() {
                return Err(Error::Config(format!("checkpoint {} does not exist", checkpoint.display())));
            }
            let store = ParameterStore::load(&checkpoint)?;
            let subject_volume = SubjectVolume::load(&subject)?;
            let outcome = bench::run_adapt_mode(&config, &store, &subject_volume, mode)?;
            std::fs::create_dir_all(&out_dir)?;
            let id = &subject_volume.header.subject_id;
            outcome.store.save(&out_dir.join(format!("{}_adapted.ckpt", id)))?;
            let mut header = subject_volume.header.clone();
            header.has_image = false;
            header.has_labels = true;
            let pred = SubjectVolume { header, intensities: Vec::new(), labels: Some(outcome.predictions.clone()) };
            pred.save(&out_dir.join(format!("{}_pred.vol", id)))?;
            std::fs::write(out_dir.join(format!("{}_trace.csv", id)), engine::trace_csv(&outcome.trace))?;
            println!("adapted {} epochs; outputs under {}", outcome.trace.len(), out_dir.display());
            Ok(())
        }
        Command::Evaluate { pred, gt, method, out_dir } => {
            let preds = load_volume_files(&pred)?;
            let gts = load_volume_files(&gt)?;
            let single_pair = preds.len() == 1 && gts.len() == 1;
            let mut reports = Vec::new();
            for (name, pred_volume) in &preds {
                // directories pair by file stem, tolerating a `_pred` suffix
                let base = name.strip_suffix("_pred").unwrap_or(name);
                let matched = if single_pair {
                    gts.first()
                } else {
                    gts.iter().find(|(g, _)| g == base || g == name)
                };
                let Some((_, gt_volume)) = matched else {
                    return Err(Error::Config(format!("no ground-truth volume matches `{}`", name)));
                };
                let labels = pred_volume
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::VolumeFormat(format!("{} has no labels", name)))?;
                let truth = gt_volume
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::VolumeFormat(format!("ground truth {} has no labels", name)))?;
                let hd = &gt_volume.header;
                let num_classes = 1 + *truth.iter().max().unwrap_or(&0) as usize;
                reports.push(metrics::evaluate_volume(
                    &method,
                    &pred_volume.header.subject_id,
                    labels,
                    truth,
                    hd.slices,
                    hd.height,
                    hd.width,
                    num_classes.max(2),
                )?);
            }
            let rows = metrics::aggregate(&reports, &[&method]);
            let k = reports.first().map(|r| r.classes.len() + 1).unwrap_or(2);
            let names: Vec<String> = (1..k).map(|c| format!("C{}", c)).collect();
            let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            let table = metrics::render_table(&rows, &name_refs);
            print!("{}", table);
            if let Some(out_dir) = out_dir {
                std::fs::create_dir_all(&out_dir)?;
                std::fs::write(out_dir.join("metrics.csv"), metrics::render_csv(&reports))?;
                std::fs::write(out_dir.join("metrics_table.txt"), table)?;
            }
            Ok(())
        }
        Command::Bench { config, out_dir } => {
            let config = config.load()?;
            let result = bench::run_bench(&config, &out_dir)?;
            print!("{}", result.table_text);
            println!("artifacts under {}", out_dir.display());
            Ok(())
        }
    }
}

/// True when --epochs-shape appeared literally on the command line.
fn explicit_epochs_shape() -> bool {
    std::env::args().any(|a| a == "--epochs-shape" || a.starts_with("--epochs-shape="))
}

fn load_volume_dir(dir: &Path) -> Result<Vec<SubjectVolume>> {
    let volumes = load_volume_files(dir)?;
    if volumes.is_empty() {
        return Err(Error::EmptyDataset(format!("no .vol files under {}", dir.display())));
    }
    Ok(volumes.into_iter().map(|(_, v)| v).collect())
}

/// Load a .vol file or every .vol file in a directory, sorted by file name.
fn load_volume_files(path: &Path) -> Result<Vec<(String, SubjectVolume)>> {
    let mut out = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "vol").unwrap_or(false))
            .collect();
        entries.sort();
        for entry in entries {
            let name = entry.file_stem().unwrap_or_default().to_string_lossy().to_string();
            out.push((name, SubjectVolume::load(&entry)?));
        }
    } else {
        let name = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        out.push((name, SubjectVolume::load(path)?));
    }
    Ok(out)
}
