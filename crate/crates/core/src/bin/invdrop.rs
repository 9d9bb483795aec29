use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use invdrop::cli::{self, Overrides, SynthParams, VectorSource};

#[derive(Parser)]
#[command(name = "invdrop", version, about = "Federated dropout simulator for stragglers")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write metrics.csv / summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Repeatable; replaces the config's seed list.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = ["none", "random", "ordered", "invariant"])]
        method: Option<String>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Force this dropout rate on every straggler.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Keep-ratio, variance and bound report for a gradient vector.
    AnalyzeVariance {
        /// Comma-separated values, e.g. "2,1,1,1".
        #[arg(long, conflicts_with = "file", required_unless_present = "file")]
        values: Option<String>,
        /// JSON array, captured run gradient, or plain number list.
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        mc_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic blob dataset as CSV.
    GenData {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0.4)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match args.command {
        Command::Run { config, seeds, out, method, rounds, rate } => {
            let overrides = Overrides { seeds, out_dir: out, method, rounds, rate };
            let res = cli::cmd_run(&config, &overrides);
            match &res {
                Ok(o) => eprintln!("wrote {} and {}", o.metrics_csv.display(), o.summary_json.display()),
                Err(e) => eprintln!("error: {e}"),
            }
            cli::exit_code(&res)
        }
        Command::AnalyzeVariance { values, file, k, epsilon, mc_samples, seed, out } => {
            let res = match (values, file) {
                (Some(v), _) => cli::parse_number_list(&v).map(VectorSource::Inline),
                (None, Some(f)) => Ok(VectorSource::File(f)),
                (None, None) => unreachable!("clap requires one source"),
            }
            .and_then(|src| cli::cmd_analyze_variance(&src, k, epsilon, mc_samples, seed, out.as_deref()));
            if let Err(e) = &res {
                eprintln!("error: {e}");
            }
            cli::exit_code(&res)
        }
        Command::GenData { classes, dim, n_per_class, spread, seed, out } => {
            let params = SynthParams { seed, classes, dim, n_per_class, spread };
            let res = cli::cmd_gen_data(&params, &out);
            if let Err(e) = &res {
                eprintln!("error: {e}");
            }
            cli::exit_code(&res)
        }
    };
    ExitCode::from(code as u8)
}
