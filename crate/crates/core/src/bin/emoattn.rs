use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use emoattn::data::{corrupt_labels, export_dataset, make_batch, synth_dataset, CropSpec, Dataset, Sample};
use emoattn::diffcore::GradCheckOptions;
use emoattn::train::{
    ablate, classify_eval, evaluate, objective_gradcheck, parse_grid, train_from, write_ablation_csv,
    write_metrics_csv, write_run, AblationSpec, Checkpoint, MetricRow, TrainConfig,
};
use emoattn::{Error, Result};

#[derive(Parser)]
#[command(name = "emoattn", version, about = "Valence/arousal estimation with two-level attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides, applied in that order.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_text(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, learning_curve.csv, best.ckpt, last.ckpt and config.txt.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training manifest (image_path,valence,arousal,expression).
        #[arg(long)]
        train: PathBuf,
        /// Validation manifest, evaluated after every epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of a fresh model; `--set epochs=N` extends the run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// CCC and RMSE of a checkpoint on a manifest, with flip-averaged predictions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seven-class expression accuracy of a checkpoint with a classifier head.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a grid of configurations on seeded synthetic data with corrupted labels.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Grid such as `loss=mse,tukey;blocks=1,2,3`. `head_mode=single` runs both single-target models.
        #[arg(long, default_value = "")]
        grid: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        /// Share of training labels sign-flipped.
        #[arg(long, default_value_t = 0.1)]
        corruption: f64,
        #[arg(long, default_value_t = 2024)]
        data_seed: u64,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full training objective.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Synthetic samples in the checked batch.
        #[arg(long, default_value_t = 2)]
        samples: usize,
        /// Elements checked per parameter tensor.
        #[arg(long, default_value_t = 8)]
        max_elements: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Write a synthetic face dataset as PNGs plus manifest.csv.
    Synth {
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Share of regression labels sign-flipped.
        #[arg(long, default_value_t = 0.0)]
        corruption: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_data(path: &Path) -> Result<Dataset> {
    let (data, rejected) = Dataset::from_manifest(path)?;
    for r in &rejected {
        eprintln!("warning: {}: line {}: {}", path.display(), r.line, r.message);
    }
    if !rejected.is_empty() {
        eprintln!("warning: {} row(s) rejected", rejected.len());
    }
    Ok(data)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            train,
            val,
            out,
            resume,
        } => {
            let train_set = load_data(&train)?;
            let val_set = val.as_deref().map(load_data).transpose()?;
            let state = match resume {
                Some(p) => {
                    let mut s = Checkpoint::load(p)?;
                    for o in &config.overrides {
                        s.config.apply_text(o)?;
                    }
                    s
                }
                None => Checkpoint::initial(&config.resolve()?)?,
            };
            let outcome = train_from(state, &train_set, val_set.as_ref(), &mut |r| {
                let val = r
                    .val
                    .and_then(|v| v.ccc_mean())
                    .map(|c| format!("  val ccc {c:.4}"))
                    .unwrap_or_default();
                eprintln!("epoch {:>3}  lr {:.1e}  loss {:.5}{val}", r.epoch, r.lr, r.train_loss);
            })?;
            let files = write_run(&out, &outcome)?;
            eprintln!("wrote {}", files.metrics.parent().unwrap_or(&out).display());
        }
        Command::Eval { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = load_data(&data)?;
            let report = evaluate(&ck.network, &data)?;
            if report.degenerate {
                eprintln!("warning: constant predictions or labels; CCC reported as 0");
            }
            let row = MetricRow {
                split: "eval".into(),
                epoch: ck.epoch,
                report,
            };
            write_metrics_csv(output(out.as_deref())?, ck.config.head_mode, &[row])?;
        }
        Command::Classify { checkpoint, data } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = load_data(&data)?;
            let (acc, labeled) = classify_eval(&ck.network, &data)?;
            println!("accuracy {acc:.4} on {labeled} labeled samples");
        }
        Command::Ablate {
            config,
            grid,
            seeds,
            samples,
            corruption,
            data_seed,
            out,
        } => {
            let spec = AblationSpec {
                base: config.resolve()?,
                axes: parse_grid(&grid)?,
                seeds,
                samples,
                corruption,
                data_seed,
                ..AblationSpec::default()
            };
            let rows = ablate(&spec, &mut |row, seed, mode, r| {
                eprintln!("config {row} seed {seed} {mode}: epoch {} loss {:.5}", r.epoch, r.train_loss);
            })?;
            write_ablation_csv(output(out.as_deref())?, &spec.axes, &rows)?;
        }
        Command::Gradcheck {
            config,
            samples,
            max_elements,
            tolerance,
        } => {
            let cfg = config.resolve()?;
            let data = synth_dataset(samples.max(1), cfg.seed);
            let refs: Vec<&Sample> = data.samples.iter().collect();
            let batch = make_batch(&refs, &vec![CropSpec::CENTER; refs.len()])?;
            let report = objective_gradcheck(
                &cfg,
                &batch,
                &GradCheckOptions {
                    max_elements: Some(max_elements),
                    ..GradCheckOptions::default()
                },
            )?;
            for p in &report.params {
                println!(
                    "{:<40} checked {:>3} skipped {:>2} max rel err {:.2e}",
                    p.name, p.checked, p.skipped_nonsmooth, p.max_rel_error
                );
            }
            let ok = report.passes(tolerance);
            println!(
                "{} max relative error {:.3e} over {} elements ({} skipped at kinks)",
                if ok { "PASS" } else { "FAIL" },
                report.max_rel_error(),
                report.checked(),
                report.skipped()
            );
            return Ok(ok);
        }
        Command::Synth {
            count,
            seed,
            corruption,
            out,
        } => {
            let mut data = synth_dataset(count, seed);
            if corruption > 0.0 {
                corrupt_labels(&mut data, corruption, seed);
            }
            let manifest = export_dataset(&data, &out)?;
            println!("{}", manifest.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonFinite { .. } = e {
                eprintln!("hint: lower lr or check the input data");
            }
            ExitCode::from(2)
        }
    }
}
