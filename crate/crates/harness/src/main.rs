use std::path::PathBuf;
use std::process::ExitCode;

use bsee_harness::config::{ExperimentConfig, Metric};
use bsee_harness::error::{HarnessError, EXIT_THRESHOLD};
use bsee_harness::report;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bsee", version, about = "Convergence studies for backward stochastic evolution equation schemes")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment matrix described by a JSON config.
    Run {
        config: PathBuf,
        /// Seed for every regression backend (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Write zero instead of measured wall times (byte-reproducible CSV).
        #[arg(long)]
        no_wall_time: bool,
    },
    /// Refit the rates in a results CSV.
    Fit {
        csv: PathBuf,
        #[arg(long, value_enum, default_value = "combined")]
        metric: MetricArg,
    },
    /// List the catalog of reference cases.
    ListCases,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Combined,
    P,
    Z,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Combined => Metric::Combined,
            MetricArg::P => Metric::P,
            MetricArg::Z => Metric::Z,
        }
    }
}

fn execute(cli: Cli) -> Result<i32, HarnessError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            no_wall_time,
        } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            if no_wall_time {
                cfg.record_wall_time = false;
            }
            let out = report::run(&cfg, &out_dir)?;
            for s in &out.summary.series {
                let slope = s.tail.fit.map_or("n/a".to_string(), |f| format!("{:.3}", f.slope));
                println!(
                    "{:<4} scheme {} {:<16} slope {:>6} from J={:<5} {}",
                    s.case,
                    s.scheme,
                    s.backend,
                    slope,
                    s.tail.from_steps,
                    if s.pass { "PASS" } else { "FAIL" }
                );
            }
            if let Some(lq) = &out.summary.lq {
                let slope = lq.report.fit.map_or("n/a".to_string(), |f| format!("{:.3}", f.slope));
                println!("LQ control slope {slope} {}", if lq.pass { "PASS" } else { "FAIL" });
            }
            println!("wrote {} and {}", out.csv_path.display(), out.summary_path.display());
            Ok(if out.summary.all_pass { 0 } else { EXIT_THRESHOLD })
        }
        Command::Fit { csv, metric } => {
            for (case, scheme, backend, tail) in report::fit_csv(&csv, metric.into())? {
                match tail.fit {
                    Some(f) => println!(
                        "{case:<4} scheme {scheme} {backend:<16} slope {:.4} intercept {:.4} r2 {:.4} from J={}",
                        f.slope, f.intercept, f.r2, tail.from_steps
                    ),
                    None => println!(
                        "{case:<4} scheme {scheme} {backend:<16} {}",
                        tail.note.unwrap_or_default()
                    ),
                }
            }
            Ok(0)
        }
        Command::ListCases => {
            for line in report::case_listing() {
                println!("{line}");
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
