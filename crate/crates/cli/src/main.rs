//! `clude` — clustering-based depth completion from sparse samples.
//!
//! Exit codes: 0 success, 1 configuration error (including bad
//! arguments), 2 data error (missing or malformed inputs), 3 numeric
//! failure (divergence, non-finite values, failed gradient check).

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "clude",
    version,
    about = "Depth completion via learned depth clustering",
    arg_required_else_help = true
)]
struct Cli {
    /// key=value config file, applied after presets
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Named preset (kitti, void, desk, clude-dagger, clude-dagger-ce);
    /// repeatable, applied in order
    #[arg(long, global = true, value_name = "NAME")]
    preset: Vec<String>,

    /// Single key=value override, applied after --config; repeatable
    #[arg(long, global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and its manifest
    Synth {
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of scenes (defaults to scene.count)
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model on a dataset manifest
    Train {
        /// Path to manifest.txt
        #[arg(long, value_name = "MANIFEST")]
        dataset: PathBuf,
        /// Checkpoint to write
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
        /// Continue from this checkpoint; the model shape comes from
        /// the checkpoint, and optimizer state is restored if present
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Which training stages to run
        #[arg(long, default_value = "all", value_parser = ["1", "2", "all"])]
        stage: String,
        /// Write the per-step loss log as CSV
        #[arg(long, value_name = "FILE")]
        loss_csv: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Path to manifest.txt
        #[arg(long, value_name = "MANIFEST")]
        dataset: PathBuf,
        /// Split metrics into boundary / non-boundary regions
        #[arg(long)]
        split_boundary: bool,
        /// Report MAE bucketed by ground-truth depth
        /// (eval.interval_width meters per bucket)
        #[arg(long)]
        intervals: bool,
        /// Re-evaluate at each density in eval.densities
        #[arg(long)]
        density_sweep: bool,
        /// Include a nearest-neighbor-fill baseline row
        #[arg(long)]
        baseline: bool,
        /// Ablation: skip guidance adjustment (pure clustering decode)
        #[arg(long)]
        no_offsets: bool,
        /// Ablation: feed the offset estimators an all-zero cue
        #[arg(long)]
        zero_cue: bool,
        /// Directory for CSV reports and error maps
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
        /// Write per-scene signed error maps (needs --out-dir)
        #[arg(long)]
        error_maps: bool,
    },
    /// Complete one sparse depth map
    Infer {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Sparse input depth (16-bit grayscale PNG, 0 = missing)
        #[arg(long, value_name = "PNG")]
        sparse: PathBuf,
        /// Aligned RGB image
        #[arg(long, value_name = "PNG")]
        rgb: PathBuf,
        /// Completed depth to write
        #[arg(long, value_name = "PNG")]
        out: PathBuf,
        /// Also write every intermediate prediction here
        #[arg(long, value_name = "DIR")]
        dump_stages: Option<PathBuf>,
    },
    /// Check analytic gradients against central differences on a
    /// reduced copy of the pipeline
    Gradcheck,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };

    let result = dispatch(&cli);
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("clude: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> clude_core::Result<()> {
    let cfg = config::RunConfig::resolve(cli.config.as_deref(), &cli.preset, &cli.set)?;
    match &cli.cmd {
        Cmd::Synth { out, count } => commands::synth(&cfg, out, *count),
        Cmd::Train {
            dataset,
            out,
            resume,
            stage,
            loss_csv,
        } => commands::train_cmd(
            &cfg,
            dataset,
            out,
            resume.as_deref(),
            stage,
            loss_csv.as_deref(),
        ),
        Cmd::Eval {
            checkpoint,
            dataset,
            split_boundary,
            intervals,
            density_sweep,
            baseline,
            no_offsets,
            zero_cue,
            out_dir,
            error_maps,
        } => commands::eval(
            &cfg,
            checkpoint,
            dataset,
            &commands::EvalFlags {
                split_boundary: *split_boundary,
                intervals: *intervals,
                density_sweep: *density_sweep,
                baseline: *baseline,
                no_offsets: *no_offsets,
                zero_cue: *zero_cue,
                error_maps: *error_maps,
            },
            out_dir.as_deref(),
        ),
        Cmd::Infer {
            checkpoint,
            sparse,
            rgb,
            out,
            dump_stages,
        } => commands::infer(checkpoint, sparse, rgb, out, dump_stages.as_deref()),
        Cmd::Gradcheck => commands::gradcheck_cmd(&cfg),
    }
}
