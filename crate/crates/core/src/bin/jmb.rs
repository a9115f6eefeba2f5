use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use jmb_core::channel::{
    draw_channel, stream_id, stream_rng, write_fixture, CsitConfig, StreamPurpose,
};
use jmb_core::harness::{run_convergence, run_single, run_sweep, ExperimentConfig, Scheme};
use jmb_core::Error;

#[derive(Parser)]
#[command(
    name = "jmb",
    version,
    about = "Robust joint multicast/broadcast precoding experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// ESR versus SNR for every configured scheme and alpha.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Use M = 1000 samples and 100 channels.
        #[arg(long)]
        paper_scale: bool,
    },
    /// AO traces for one channel, several SNRs and initialisations.
    Convergence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One scheme on one channel; prints a JSON summary.
    Single {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scheme: String,
        #[arg(long, allow_hyphen_values = true)]
        snr_db: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
    /// Writes a seeded channel draw as a text fixture.
    DrawChannel {
        #[arg(long)]
        n_t: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &std::path::Path) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::load(path).map_err(|e| {
        eprintln!("jmb: {e}");
        ExitCode::from(2)
    })
}

fn report(e: Error, code: u8) -> ExitCode {
    eprintln!("jmb: {e}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Sweep {
            config,
            out,
            seed,
            threads,
            paper_scale,
        } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            if paper_scale {
                cfg = cfg.paper_scale();
            }
            match run_sweep(&cfg, Some(&out)) {
                Ok(records) => {
                    let failed: usize = records.iter().map(|r| r.failures.len()).sum();
                    if failed > 0 {
                        eprintln!(
                            "jmb: {failed} per-channel runs failed; see esr.csv channel counts"
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e @ Error::Config(_)) => report(e, 2),
                Err(e) => report(e, 1),
            }
        }
        Command::Convergence { config, out } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match run_convergence(&cfg, Some(&out)) {
                Ok(_) => ExitCode::SUCCESS,
                Err(e @ Error::Config(_)) => report(e, 2),
                Err(e) => report(e, 1),
            }
        }
        Command::Single {
            config,
            scheme,
            snr_db,
            alpha,
            channel,
        } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let scheme: Scheme = match scheme.parse() {
                Ok(s) => s,
                Err(e) => return report(e, 2),
            };
            if !(0.0..=1.0).contains(&alpha) || !snr_db.is_finite() {
                return report(
                    Error::Config("alpha must lie in [0, 1] and the SNR must be finite".into()),
                    2,
                );
            }
            match run_single(&cfg, scheme, alpha, snr_db, channel) {
                Ok(run) => {
                    let summary = serde_json::json!({
                        "scheme": scheme.name(),
                        "alpha": alpha,
                        "snr_db": snr_db,
                        "channel": channel,
                        "sum_rate": run.sum_rate,
                        "power": run.precoder.power(),
                        "common_power": run.precoder.common_power(),
                        "ao_iterations": run.trace.as_ref().map(|t| t.len()),
                        "asr": run.trace.as_ref().map(|t| t.final_asr),
                    });
                    println!("{summary}");
                    ExitCode::SUCCESS
                }
                Err(e @ Error::Config(_)) => report(e, 2),
                Err(e) => report(e, 3),
            }
        }
        Command::DrawChannel { n_t, k, seed, out } => {
            let cfg = match CsitConfig::new(n_t, k, 0.0, 1.0, 1.0) {
                Ok(c) => c,
                Err(e) => return report(e, 2),
            };
            let h = draw_channel(
                &mut stream_rng(seed, stream_id(StreamPurpose::Channel, 0, 0, 0)),
                &cfg,
            );
            let result = std::fs::File::create(&out)
                .map_err(Error::from)
                .and_then(|f| write_fixture(std::io::BufWriter::new(f), &h, seed));
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => report(e, 1),
            }
        }
    }
}
