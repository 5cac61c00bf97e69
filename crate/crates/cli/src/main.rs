use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ladderlab_cli::config::{resolve_config, ExperimentKind};
use ladderlab_cli::error::CliError;
use ladderlab_cli::runners;

#[derive(Parser)]
#[command(name = "ladderlab", version, about = "Ladder network experiments: denoising functions, linear ICA, and the hierarchical variance model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON config file replacing the bundled defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (also re-derives the trainer seed as seed + 1).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $LADDERLAB_OUT/<experiment> or runs/<experiment>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Check the experiment's acceptance thresholds; exit 4 if any fail.
    #[arg(long)]
    assert: bool,
    /// Allow writing into a directory that already holds a run.
    #[arg(long)]
    force: bool,
    /// Config override as dotted.path=value (repeatable), e.g.
    /// --set optim.learning_rate=0.02 --set ladder.beta0=2.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the five-parameter scalar denoiser to the three source families.
    Denoise1d(RunArgs),
    /// Linear ICA: train with and without the lateral shortcut B.
    Ica(RunArgs),
    /// Hierarchical variance model on the independent-subspace dataset,
    /// including the learning-speed study.
    Variance(RunArgs),
    /// Finite-difference checks of the analytic gradients on all model shapes.
    Gradcheck(RunArgs),
    /// Print a stored training trace as a table.
    ShowTrace {
        /// Path to a trace.jsonl file.
        trace: PathBuf,
        /// Print every n-th epoch.
        #[arg(long, default_value_t = 1)]
        every: usize,
    },
}

fn run(kind: ExperimentKind, args: &RunArgs) -> Result<Vec<String>, CliError> {
    let cfg = resolve_config(
        kind,
        args.config.as_deref(),
        args.seed,
        args.out.as_deref(),
        &args.sets,
    )?;
    let out_dir = runners::resolve_out_dir(&cfg);
    let failures = match kind {
        ExperimentKind::Denoise1d => {
            let art = runners::run_denoise1d(&cfg, &out_dir, args.force)?;
            println!(
                "denoise1d: gaussian max|xhat - xt/2| = {:.4}, laplace oddness {:.4}, sinusoid oddness {:.4}",
                art.gaussian.max_dev_from_half_gain, art.laplace.oddness, art.sinusoid.oddness
            );
            art.assert_failures()
        }
        ExperimentKind::Ica => {
            let art = runners::run_ica(&cfg, &out_dir, args.force)?;
            println!(
                "ica: top-10 dominant loadings {:.4} with B, {:.4} without; leakage {:.4} vs {:.4}; random baseline {:.4}",
                art.with_b.top10_mean,
                art.no_b.top10_mean,
                art.with_b.leakage,
                art.no_b.leakage,
                art.random_baseline_top10
            );
            art.assert_failures()
        }
        ExperimentKind::Variance => {
            let art = runners::run_variance(&cfg, &out_dir, args.force)?;
            println!(
                "variance: within-group mass {:.4} (random {:.4}); speedup on {}/{} seeds",
                art.block_mean_mass,
                art.random_baseline_mass,
                art.speedup.wins,
                art.speedup.rows.len()
            );
            art.assert_failures()
        }
        ExperimentKind::Gradcheck => {
            let art = runners::run_gradcheck(&cfg, &out_dir, args.force)?;
            println!(
                "gradcheck: denoiser {:.3e}; {}",
                art.denoiser.max_rel_err,
                art.shapes
                    .iter()
                    .map(|s| format!("{} {:.3e}", s.shape, s.report.max_rel_err))
                    .collect::<Vec<_>>()
                    .join("; ")
            );
            art.assert_failures()
        }
    };
    println!("artifacts written to {}", out_dir.display());
    Ok(if args.assert { failures } else { Vec::new() })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Denoise1d(args) => run(ExperimentKind::Denoise1d, args),
        Command::Ica(args) => run(ExperimentKind::Ica, args),
        Command::Variance(args) => run(ExperimentKind::Variance, args),
        Command::Gradcheck(args) => run(ExperimentKind::Gradcheck, args),
        Command::ShowTrace { trace, every } => {
            match runners::show_trace(trace, *every) {
                Ok(text) => {
                    print!("{text}");
                    Ok(Vec::new())
                }
                Err(e) => Err(e),
            }
        }
    };
    match result {
        Ok(failures) if failures.is_empty() => ExitCode::SUCCESS,
        Ok(failures) => {
            let err = CliError::Assert(failures);
            eprintln!("{err}");
            ExitCode::from(err.exit_code())
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
