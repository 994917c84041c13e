//! Command line front end: dataset generation, calibration runs, sensitivity
//! sweeps, snapshot pricing, band rebuilding, and the approximation bounds.
//!
//! Exit codes: 0 on success, 2 for configuration mistakes (bad flags, bad
//! config files, malformed inputs), 1 for runtime failures.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use neuralsde::experiment::{
    calibrate, chain_with_cells, generate, iv_band, price_snapshot, read_model, sweep,
    ExperimentConfig, Preset,
};
use neuralsde::posterior::{band, band_csv};
use neuralsde::pricing::{read_price_table, write_price_table};
use neuralsde::uat::{uat_bounds, UatInputs};
use neuralsde::Result;

#[derive(Parser)]
#[command(name = "neuralsde", version, about = "Bayesian calibration of neural SDE market models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a bundled study dataset: quote table, historical series where
    /// the study has one, generator parameters, and a ready-to-run config.
    Generate {
        /// One of: bs-paper, heston-paper, rbergomi-paper, snp-1990s.
        #[arg(long)]
        preset: String,
        /// Dataset directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the calibration described by a TOML config file.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One calibration per (sigma_prior, delta) grid cell, summarized in
    /// comparison.csv; a failed cell is recorded and the rest still run.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated prior widths; defaults to the config's value.
        #[arg(long, value_delimiter = ',')]
        sigma_priors: Vec<f64>,
        /// Comma-separated spread scales; defaults to the config's value.
        #[arg(long, value_delimiter = ',')]
        deltas: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Price a call grid under a saved model snapshot.
    Price {
        /// Model snapshot (model.json) from a calibration run.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        s0: f64,
        #[arg(long)]
        v0: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        strikes: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        maturities: Vec<f64>,
        #[arg(long, default_value_t = 48)]
        steps: usize,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild price and implied-vol bands from a saved trace and the quote
    /// table it was calibrated against.
    Surface {
        /// Trace CSV (trace.csv) from a calibration run.
        #[arg(long)]
        chain: PathBuf,
        /// Quote table the run calibrated against.
        #[arg(long)]
        options: PathBuf,
        #[arg(long)]
        s0: f64,
        #[arg(long, default_value_t = 0.0)]
        r: f64,
        #[arg(long, default_value_t = 0.0)]
        d: f64,
        #[arg(long, default_value_t = 0)]
        burn_in: usize,
        #[arg(long, default_value_t = 0.1)]
        q_lo: f64,
        #[arg(long, default_value_t = 0.9)]
        q_hi: f64,
        /// Directory for bands_prices.csv and bands_iv.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sufficient network width and neuron count for a sup-norm
    /// approximation target.
    UatBound {
        /// Time horizon.
        #[arg(long)]
        t: f64,
        /// Barron constant of the drift and diffusion coefficients.
        #[arg(long)]
        c: f64,
        /// Coefficient Lipschitz constant.
        #[arg(long)]
        l: f64,
        /// Growth constant of the first coefficient derivatives.
        #[arg(long)]
        k1r: f64,
        /// Growth constant of the second coefficient derivatives.
        #[arg(long)]
        k2r: f64,
        /// Norm of the initial state.
        #[arg(long)]
        x0_norm: f64,
        /// Target squared sup-norm error.
        #[arg(long)]
        eps: f64,
        /// Coefficient growth bound.
        #[arg(long)]
        k: f64,
        /// Emit JSON instead of the text summary.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { preset, out, seed } => {
            let preset = Preset::from_name(&preset)?;
            for file in generate(preset, &out, seed)? {
                println!("{}", file.display());
            }
        }
        Command::Calibrate { config, seed, out } => {
            let config = load_config(&config, seed, out)?;
            let summary = calibrate(&config)?;
            println!("run directory: {}", summary.out_dir.display());
            println!("config hash: {}", summary.manifest.config_hash);
            if let Some(g) = summary.final_misfit {
                println!("final G: {g}");
            }
        }
        Command::Sweep {
            config,
            sigma_priors,
            deltas,
            seed,
            out,
        } => {
            let config = load_config(&config, seed, out)?;
            let path = sweep(&config, &sigma_priors, &deltas)?;
            println!("{}", path.display());
        }
        Command::Price {
            model,
            s0,
            v0,
            strikes,
            maturities,
            steps,
            paths,
            seed,
            out,
        } => {
            let model = read_model(&model)?;
            let rows = price_snapshot(&model, s0, v0, &strikes, &maturities, steps, paths, seed)?;
            match out {
                Some(path) => {
                    write_price_table(&path, &rows)?;
                    println!("{}", path.display());
                }
                None => {
                    println!("maturity,strike,price,stderr,implied_vol");
                    for r in &rows {
                        let iv = r.implied_vol.map(|v| v.to_string()).unwrap_or_default();
                        println!("{},{},{},{},{iv}", r.maturity, r.strike, r.price, r.stderr);
                    }
                }
            }
        }
        Command::Surface {
            chain,
            options,
            s0,
            r,
            d,
            burn_in,
            q_lo,
            q_hi,
            out,
        } => {
            let trace = fs::read_to_string(&chain)?;
            let rows = read_price_table(&options)?;
            let tagged = chain_with_cells(&trace, &rows)?;
            fs::create_dir_all(&out)?;
            let prices = band(&tagged, burn_in, q_lo, q_hi)?;
            let path = out.join("bands_prices.csv");
            fs::write(&path, band_csv(&prices))?;
            println!("{}", path.display());
            match iv_band(&tagged, burn_in, q_lo, q_hi, s0, r, d) {
                Ok(ivs) => {
                    let path = out.join("bands_iv.csv");
                    fs::write(&path, band_csv(&ivs))?;
                    println!("{}", path.display());
                }
                Err(err) => log::warn!("implied vol bands skipped: {err}"),
            }
        }
        Command::UatBound {
            t,
            c,
            l,
            k1r,
            k2r,
            x0_norm,
            eps,
            k,
            json,
        } => {
            let inputs = UatInputs {
                t,
                c,
                l,
                k1r,
                k2r,
                x0_norm,
                eps,
                k,
            };
            let result = uat_bounds(&inputs)?;
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "beta": result.beta,
                        "r_min": result.r_min,
                        "p_min": result.p_min,
                        "barron_err": result.barron_err,
                    })
                );
            } else {
                println!("beta (exponent): {}", result.beta);
                println!("r_min (weight radius): {}", result.r_min);
                println!("p_min (neurons): {}", result.p_min);
                println!("barron error at p_min: {}", result.barron_err);
            }
        }
    }
    Ok(())
}

fn load_config(path: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_toml_path(path)?;
    if let Some(seed) = seed {
        config.hyper.seed = seed;
    }
    if let Some(out) = out {
        config.out_dir = out;
    }
    Ok(config)
}
