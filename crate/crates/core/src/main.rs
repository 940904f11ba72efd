use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semimnl::io::{self, RunConfig};
use semimnl::Error;

/// Semiparametric multinomial logit: fit, simulate, export probability
/// surfaces, test IIA and scan bandwidths.
#[derive(Parser)]
#[command(name = "semimnl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Bandwidth as a multiple of each smooth covariate's sd
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the configured model and write coefficients, trace and manifest
    Fit(Common),
    /// Draw a synthetic dataset from the [simulate] section
    Simulate(Common),
    /// Export a probability surface from a fit's artifacts
    Surface {
        #[command(flatten)]
        common: Common,
        /// Directory holding the fit artifacts (defaults to the output
        /// directory)
        #[arg(long)]
        fit_dir: Option<PathBuf>,
    },
    /// Hausman–McFadden and Small–Hsiao tests of IIA
    IiaTest(Common),
    /// List bandwidths over a grid of scales, optionally fitting each
    BandwidthGrid {
        #[command(flatten)]
        common: Common,
        /// Fit the semiparametric model at every scale
        #[arg(long)]
        fit: bool,
    },
}

const EXIT_ERROR: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_ESTIMATION: u8 = 3;

fn prepare(common: &Common) -> Result<(RunConfig, PathBuf), Error> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(scale) = common.scale {
        config.model.scale = Some(scale);
        config.model.bandwidths = None;
    }
    config.validate()?;
    let out = match &common.out {
        Some(p) => p.clone(),
        None => config.out_dir(&PathBuf::from("out")),
    };
    Ok((config, out))
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Fit(common) => {
            let (config, out) = prepare(&common)?;
            let outcome = io::run_fit(&config, &out)?;
            if outcome.converged() {
                println!("fit converged; artifacts in {}", out.display());
                Ok(0)
            } else {
                eprintln!("fit did not converge; see {}", out.join(io::MANIFEST).display());
                Ok(EXIT_NOT_CONVERGED)
            }
        }
        Command::Simulate(common) => {
            let (config, out) = prepare(&common)?;
            let data = io::run_simulate(&config, &out)?;
            println!(
                "simulated {} observations into {}",
                data.dataset.n(),
                out.join(io::DATA).display()
            );
            Ok(0)
        }
        Command::Surface { common, fit_dir } => {
            let (config, out) = prepare(&common)?;
            let fit_dir = fit_dir.unwrap_or_else(|| out.clone());
            let rows = io::export_surface(&config, &fit_dir, &out)?;
            println!("wrote {rows} surface rows to {}", out.join(io::SURFACE).display());
            Ok(0)
        }
        Command::IiaTest(common) => {
            let (config, out) = prepare(&common)?;
            let results = io::run_iia(&config, &out)?;
            let failed = results.iter().filter(|(_, r)| r.is_err()).count();
            for (label, r) in &results {
                match r {
                    Ok(t) => println!(
                        "{:<18} drop {label:<12} stat {:>10.4} df {:>3} p {:.4}",
                        t.method, t.statistic, t.df, t.p_value
                    ),
                    Err(e) => println!("drop {label}: {e}"),
                }
            }
            Ok(if failed > 0 { EXIT_ESTIMATION } else { 0 })
        }
        Command::BandwidthGrid { common, fit } => {
            let (config, out) = prepare(&common)?;
            let n = io::run_bandwidth_grid(&config, &out, fit)?;
            println!("{n} scales written to {}", out.join(io::BANDWIDTHS).display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::NonIdentified { .. }
                | Error::NumericalFailure(_)
                | Error::Separation(_)
                | Error::InsufficientData(_)
                | Error::NoLocalData => EXIT_ESTIMATION,
                _ => EXIT_ERROR,
            })
        }
    }
}
