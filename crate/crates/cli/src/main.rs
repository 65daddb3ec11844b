//! `attnmask` -- train a decoupled attention model on synthetic feature
//! maps, generate pseudo-annotation masks, refine them with a dense CRF,
//! and evaluate mask quality.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on data errors.

use attnmask_core::error::Error as CoreError;
use attnmask_core::io::DatasetManifest;
use attnmask_core::pipeline::{
    self, annotate_with_checkpoint, evaluate_column, gen_synthetic, load_scenes, primary_column,
    refine_dataset, run_dropout_sweep, run_pipeline, ExperimentSpec,
};
use attnmask_core::{io, Variant};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "attnmask", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand; flags override `--config` values.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Experiment spec as JSON; defaults apply for missing fields.
    #[arg(long, global = false)]
    config: Option<PathBuf>,
    /// Master seed applied to dataset generation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Model dropout rate.
    #[arg(long)]
    dropout: Option<f64>,
    /// Unary confidence for CRF refinement, in (0.5, 1).
    #[arg(long)]
    tau: Option<f64>,
    /// Foreground threshold on min-max normalized attention.
    #[arg(long)]
    thr_fg: Option<f64>,
    /// Background threshold on the normalized feature channel-sum.
    #[arg(long)]
    thr_bg: Option<f64>,
    /// Mean-field iteration count.
    #[arg(long)]
    crf_iters: Option<usize>,
    /// Model variant: decoupled, conventional, or single-stream.
    #[arg(long)]
    variant: Option<String>,
    /// Skip CRF refinement.
    #[arg(long)]
    no_crf: bool,
}

impl Overrides {
    fn build_spec(&self) -> Result<ExperimentSpec, CoreError> {
        let mut spec: ExperimentSpec = match &self.config {
            Some(path) => io::read_json(path)
                .map_err(|e| CoreError::Config(format!("--config: {e}")))?,
            None => ExperimentSpec::default(),
        };
        if let Some(seed) = self.seed {
            spec.reseed(seed);
        }
        if let Some(rate) = self.dropout {
            spec.dropout_rate = rate;
        }
        if let Some(tau) = self.tau {
            spec.tau = tau;
        }
        if let Some(thr) = self.thr_fg {
            spec.thr_fg = thr;
        }
        if let Some(thr) = self.thr_bg {
            spec.thr_bg = thr;
        }
        if let Some(iters) = self.crf_iters {
            spec.crf.n_iters = iters;
        }
        if let Some(variant) = &self.variant {
            spec.variant = variant.parse::<Variant>()?;
        }
        if self.no_crf {
            spec.use_crf = false;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        overrides: Overrides,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes (overrides the config).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model on a dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Dataset directory (from `gen`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint and loss curve.
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce attention maps and raw pseudo-masks with a checkpoint.
    Annotate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory (from `train`).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine a raw mask column with dense-CRF mean-field inference.
    Refine {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        data: PathBuf,
        /// Run directory holding `masks/<column>/` (from `annotate`).
        #[arg(long)]
        run: PathBuf,
        /// Mask column to refine; defaults to the variant's primary column.
        #[arg(long)]
        column: Option<String>,
    },
    /// Score a mask column against the dataset ground truth.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        data: PathBuf,
        /// Run directory holding `masks/<column>/`.
        #[arg(long)]
        run: PathBuf,
        /// Mask column to score; defaults to the variant's primary column.
        #[arg(long)]
        column: Option<String>,
        /// Include the background class in the metric means.
        #[arg(long)]
        include_background: bool,
    },
    /// Train and evaluate once per dropout rate.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated dropout rates (overrides the config list).
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
    /// Run the full pipeline for one variant: train, annotate, refine, eval.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Config(_) | CoreError::Contract(_) => 2,
        _ => 3,
    }
}

fn run(command: Command) -> Result<(), CoreError> {
    match command {
        Command::Gen { overrides, out, count } => {
            let mut spec = overrides.build_spec()?;
            if let Some(count) = count {
                spec.dataset.count = count;
            }
            let manifest = gen_synthetic(&spec.dataset, &out)?;
            println!(
                "wrote {} scenes ({}x{}, {} classes) to {}",
                manifest.scenes.len(),
                manifest.width,
                manifest.height,
                manifest.num_classes,
                out.display()
            );
        }
        Command::Train { overrides, data, out } => {
            let spec = overrides.build_spec()?;
            let manifest = DatasetManifest::load(&data)?;
            let scenes = load_scenes(&data, &manifest)?;
            let started = std::time::Instant::now();
            let (model, report) = pipeline::train_model(&spec, &manifest, &scenes)?;
            std::fs::create_dir_all(&out)?;
            io::save_model(&out.join("checkpoint"), &model, &manifest.class_names)?;
            io::write_json(&out.join("loss_curve.json"), &report)?;
            println!(
                "trained {} model in {:.1}s; final epoch mean loss {:.4}",
                spec.variant,
                started.elapsed().as_secs_f64(),
                report.epoch_mean_loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Annotate { overrides, data, model, out } => {
            let spec = overrides.build_spec()?;
            let columns = annotate_with_checkpoint(&spec, &model, &data, &out)?;
            println!("wrote mask columns: {}", columns.join(", "));
        }
        Command::Refine { overrides, data, run, column } => {
            let spec = overrides.build_spec()?;
            let manifest = DatasetManifest::load(&data)?;
            let scenes = load_scenes(&data, &manifest)?;
            let column = column.unwrap_or_else(|| primary_column(spec.variant).to_string());
            let refined = refine_dataset(&spec, &manifest, &scenes, &run, &column)?;
            println!("wrote refined column: {refined}");
        }
        Command::Eval { overrides, data, run, column, include_background } => {
            let mut spec = overrides.build_spec()?;
            spec.include_background = include_background;
            let manifest = DatasetManifest::load(&data)?;
            let scenes = load_scenes(&data, &manifest)?;
            let column = column.unwrap_or_else(|| primary_column(spec.variant).to_string());
            let scores = evaluate_column(&spec, &manifest, &scenes, &run.join("masks"), &column)?;
            io::write_json(&run.join(format!("scores_{column}.json")), &scores)?;
            print!("{}", scores.to_text(&manifest.class_names));
        }
        Command::Sweep { overrides, data, out, rates } => {
            let mut spec = overrides.build_spec()?;
            if let Some(rates) = rates {
                spec.dropout_rates = rates;
                spec.validate()?;
            }
            let table = run_dropout_sweep(&spec, &data, &out)?;
            print!("{}", table.to_text());
        }
        Command::Ablate { overrides, data, out } => {
            let spec = overrides.build_spec()?;
            let (report, timings) = run_pipeline(&spec, &data, &out)?;
            let manifest = DatasetManifest::load(&data)?;
            print!("{}", report.to_text(&manifest.class_names));
            println!(
                "timings: train {:.1}s, annotate {:.1}s, refine {:.1}s, eval {:.1}s",
                timings.train_seconds,
                timings.annotate_seconds,
                timings.refine_seconds,
                timings.eval_seconds
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
