use std::path::PathBuf;
use std::process::ExitCode;

use boweldet::config::{Overrides, RunConfig};
use boweldet::harness::{cmd_evaluate, cmd_predict, cmd_preprocess, cmd_sweep, cmd_train, dataset_stats, MetaInput, Which};
use boweldet::inference::MetaMode;
use boweldet::synth::{generate, SynthSpec};
use boweldet::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Two-stage CNN detector for bowel sounds.
#[derive(Debug, Parser)]
#[command(name = "boweldet", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run configuration; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Classifier probability a window must exceed.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Fraction of the overlap a bin's summed confidence must reach.
    #[arg(long, global = true)]
    vote_fraction: Option<f64>,
    /// Windows covering each bin during the scan.
    #[arg(long, global = true)]
    overlap: Option<usize>,
    /// Directory of WAV files with same-stem annotation files.
    #[arg(long, global = true)]
    dataset_dir: Option<PathBuf>,
    /// Directory for every artifact of the run.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the spectrogram store, manifest and split from the dataset directory.
    Preprocess,
    /// Train the classifier, the regressor, or both.
    Train {
        #[arg(long, default_value = "both")]
        which: Which,
    },
    /// Write detections and intervals for the test split (or the given recordings).
    Predict {
        /// Recording ids to predict; defaults to the test split.
        #[arg(long, value_delimiter = ',')]
        recordings: Option<Vec<String>>,
        /// Combine with external intervals: intersect or sum.
        #[arg(long, requires = "external_intervals")]
        meta: Option<MetaMode>,
        /// Intervals CSV to combine with the model output.
        #[arg(long, requires = "meta")]
        external_intervals: Option<PathBuf>,
        /// Output directory; defaults to `<work-dir>/predictions`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score an intervals CSV against the ground truth.
    Evaluate {
        /// Intervals CSV; defaults to `<work-dir>/predictions/intervals.csv`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Recording ids to evaluate; defaults to the test split.
        #[arg(long, value_delimiter = ',')]
        recordings: Option<Vec<String>>,
        /// Evaluate predictions written under another run config.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate the threshold x overlap x vote-fraction grid over the sweep seeds.
    Sweep,
    /// Print corpus and split counts as JSON.
    DatasetStats,
    /// Write a synthetic corpus of noise bursts over pink noise.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_recordings: usize,
        /// Generator seed.
        #[arg(long = "synth-seed", default_value_t = 7)]
        synth_seed: u64,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("BOWELDET_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::InvalidConfig(format!("BOWELDET_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report types serialize"));
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    if let Command::Synth { out, n_recordings, synth_seed } = &cli.command {
        let spec = SynthSpec { n_recordings: *n_recordings, seed: *synth_seed, ..SynthSpec::default() };
        let recs = generate(&spec, out)?;
        println!("wrote {} recordings to {}", recs.len(), out.display());
        return Ok(());
    }
    let g = &cli.global;
    let overrides = Overrides {
        seed: g.seed,
        threshold: g.threshold,
        vote_fraction: g.vote_fraction,
        overlap: g.overlap,
        work_dir: g.work_dir.clone(),
        dataset_dir: g.dataset_dir.clone(),
    };
    let cfg = RunConfig::load(g.config.as_deref(), &overrides)?;
    println!("config_hash: {}", cfg.hash());
    match cli.command {
        Command::Preprocess => {
            let report = cmd_preprocess(&cfg)?;
            println!("recordings: {}", report.n_recordings);
            println!("skipped: {}", report.skipped.len());
            for s in &report.skipped {
                println!("  {}: {}", s.path.display(), s.reason);
            }
        }
        Command::Train { which } => {
            let report = cmd_train(&cfg, which)?;
            for (head, n) in report.param_counts {
                println!("{head:?} parameters: {n}");
            }
        }
        Command::Predict { recordings, meta, external_intervals, out } => {
            let meta = meta.zip(external_intervals).map(|(mode, external)| MetaInput { mode, external });
            let out = cmd_predict(&cfg, recordings.as_deref(), meta.as_ref(), out.as_deref())?;
            let n: usize = out.intervals.rows.values().map(|s| s.len()).sum();
            println!("recordings: {}", out.intervals.recordings.len());
            println!("intervals: {n}");
            println!("wrote {} and {}", out.detections_path.display(), out.intervals_path.display());
        }
        Command::Evaluate { predictions, recordings, force } => {
            let path = predictions.unwrap_or_else(|| cfg.data.work_dir.join("predictions/intervals.csv"));
            let out = cmd_evaluate(&cfg, &path, recordings.as_deref(), force)?;
            print_json(&out.row);
            println!("wrote {}", out.path.display());
        }
        Command::Sweep => {
            let out = cmd_sweep(&cfg)?;
            let failed = out.averaged.iter().filter(|c| !c.errors.is_empty()).count();
            println!("cells: {} ({failed} with errors)", out.averaged.len());
            println!("wrote {} and {}", out.averaged_path.display(), out.per_seed_path.display());
        }
        Command::DatasetStats => print_json(&dataset_stats(&cfg)?),
        Command::Synth { .. } => unreachable!("handled before loading the run config"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
