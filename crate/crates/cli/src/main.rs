use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fredft_cli::bench::bench_attention;
use fredft_cli::commands::{self, parse_variant};
use fredft_cli::config::RunConfig;
use fredft_cli::dump::Stage;
use fredft_cli::verify::{self, Suite};
use fredft_cli::{CliError, CliResult};

/// Dual-modality frequency-domain fusion: training, evaluation and checks.
///
/// Threads: FREDFT_THREADS (unset or 0 runs single-threaded).
#[derive(Parser, Debug)]
#[command(name = "fredft", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run numerical checks and print one PASS/FAIL line per check.
    Verify {
        /// fft, gradcheck, oracle, invariants or all.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Train a detector on synthetic data; writes weights and `<out>.log`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "fused_fredft")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trained weights on the held-out synthetic set.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "fused_fredft")]
        variant: String,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every ablation row; prints a CSV table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time MSDA and MFDA forwards over map sizes; prints CSV with slopes.
    BenchAttention {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated square sizes, overriding `bench.sizes`.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write channel-mean feature maps of one eval sample as PGM files.
    DumpFeatures {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "fused_fredft")]
        variant: String,
        #[arg(long)]
        weights: PathBuf,
        /// backbone, lfem, cgmm, mfda or fused.
        #[arg(long)]
        stage: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration as JSON.
    DefaultConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Fault {
    IfftScale,
}

fn load_config(path: Option<&std::path::Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load_or_default(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn init_threads() -> CliResult<()> {
    let threads = match std::env::var("FREDFT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("FREDFT_THREADS={v:?} is not a thread count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    match cli.command {
        Command::Verify { suite, out, inject_fault } => {
            let suite: Suite = suite.parse().map_err(|e: fredft::Error| CliError::Usage(e.to_string()))?;
            if let Some(Fault::IfftScale) = inject_fault {
                fredft::fft::set_ifft_scale_fault(true);
            }
            let report = verify::run(suite);
            let text = report.to_text();
            commands::emit(&text, None)?;
            if let Some(p) = out {
                std::fs::write(&p, &text).map_err(|e| CliError::io(&p, e))?;
            }
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Train { config, seed, variant, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let variant = parse_variant(&variant)?;
            let t = commands::train(&cfg, variant, &out)?;
            eprintln!(
                "wrote {} and {} ({} steps, final loss {:.4})",
                out.display(),
                commands::log_path(&out).display(),
                t.log.entries.len(),
                t.log.final_average(commands::LOSS_WINDOW).unwrap_or(f64::NAN)
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { config, seed, variant, weights, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let variant = parse_variant(&variant)?;
            let (det, store) = commands::load_model(&cfg, variant, &weights)?;
            let report = commands::eval(&cfg, &det, &store)?;
            commands::emit(&commands::eval_text(variant, &report), out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let rows = commands::ablate(&cfg)?;
            commands::emit(&commands::ablation_csv(&rows), out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::BenchAttention { config, seed, sizes, out } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(s) = sizes {
                cfg.bench.sizes = s;
                cfg.validate()?;
            }
            let result = bench_attention(&cfg.bench, cfg.train.seed)?;
            commands::emit(&result.to_csv(), out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::DumpFeatures { config, seed, variant, weights, stage, index, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let variant = parse_variant(&variant)?;
            let stage: Stage = stage.parse()?;
            let (det, store) = commands::load_model(&cfg, variant, &weights)?;
            for p in commands::dump_features(&cfg, &det, &store, index, stage, &out)? {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::DefaultConfig => {
            commands::emit(&(RunConfig::default().to_json() + "\n"), None)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| run(cli));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("fredft: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
