//! Run orchestration: TOML experiment configs, bundled dataset generators,
//! calibration and sweep drivers, and the artifact files they leave behind.
//!
//! A run directory holds the epoch trace (`trace.csv`, or one file per stage),
//! price and implied-vol band tables, model/hedge snapshots, and a
//! `manifest.json` recording the config hash, the seed, and every artifact, so
//! a finished run can be audited and re-derived. Identical configs (same seed
//! included) produce byte-identical trace files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::{
    staged_calibration, Calibrator, HyperParams, OptionDataset, OptionQuote, TimeSeriesDataset,
};
use crate::error::{Error, Result};
use crate::nets::{Mlp, MlpJson, OutputActivation};
use crate::posterior::{band, band_csv, quantile, trace_csv, BandCell, BandSummary, Chain};
use crate::pricing::{
    implied_vol, mc_price_cv, read_price_table, write_price_table, OptionSpec, PriceRow,
};
use crate::refmodels::bs::{bs_call, gbm_log_series, BsParams};
use crate::refmodels::heston::{heston_simulate, heston_target_prices, HestonParams};
use crate::refmodels::rbergomi::{rbergomi_target_surface, study_cells, RBergomiParams};
use crate::rng::SeedTree;
use crate::sde::{
    zeta_net, BindSpec, Increments, Measure, NeuralSdeModel, Rho, SdeNets, TimeGrid,
};

/// How the posterior is targeted: option quotes alone, quotes plus the
/// historical series, or maturity-staged option calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OptionsOnly,
    Joint,
    Staged,
}

/// Architecture and market constants of the model being calibrated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths shared by every coefficient network.
    pub hidden: Vec<usize>,
    /// Maturity segment ends; the last entry is the model horizon.
    pub segments: Vec<f64>,
    /// Adds the market-price-of-risk network needed by the series likelihood.
    #[serde(default)]
    pub zeta: bool,
    /// Spot/variance correlation: the fixed value, or the starting value of a
    /// free parameter when `rho_trainable` is set.
    pub rho: f64,
    #[serde(default)]
    pub rho_trainable: bool,
    pub r: f64,
    #[serde(default)]
    pub d: f64,
    /// Initial variance state.
    pub v0: f64,
    /// Glorot gain of the prior parameter draw.
    #[serde(default = "default_gain")]
    pub init_gain: f64,
}

fn default_gain() -> f64 {
    1.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Uniform step count over the model horizon; quote maturities (and, for
    /// a latent-variance series, observation times) are inserted as knots.
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub s0: f64,
    /// Quote table `maturity,strike,price,stderr,implied_vol`; relative paths
    /// resolve against the config file's directory.
    #[serde(default)]
    pub options_csv: Option<PathBuf>,
    /// Historical series `time,y[,v]`.
    #[serde(default)]
    pub series_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    /// Spread scale of the option likelihood, in basis points of spot. The
    /// quote tables carry no bid/ask columns, so this is always explicit.
    pub delta: f64,
    pub sigma_prior: f64,
    #[serde(default = "default_eps_step")]
    pub eps_step: f64,
    #[serde(default = "default_adam_lr")]
    pub adam_lr: f64,
    pub epochs: usize,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub burn_in: usize,
    pub seed: u64,
    /// Per-stage prior widths for staged mode; defaults to `sigma_prior`.
    #[serde(default)]
    pub stage_priors: Option<Vec<f64>>,
}

fn default_eps_step() -> f64 {
    1e-6
}

fn default_adam_lr() -> f64 {
    1e-3
}

fn default_n_paths() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HedgeConfig {
    /// Hidden widths of the shared hedge network `(t, S) -> one ratio per
    /// quote`; its output width follows the loaded quote count.
    pub hidden: Vec<usize>,
}

/// Quantile levels of the exported bands. `(0.1, 0.9)` is the default
/// credible band; `(0, 1)` gives the per-cell envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandConfig {
    #[serde(default = "default_q_lo")]
    pub q_lo: f64,
    #[serde(default = "default_q_hi")]
    pub q_hi: f64,
}

fn default_q_lo() -> f64 {
    0.1
}

fn default_q_hi() -> f64 {
    0.9
}

impl Default for BandConfig {
    fn default() -> Self {
        BandConfig {
            q_lo: default_q_lo(),
            q_hi: default_q_hi(),
        }
    }
}

/// One full calibration run, as written in a TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub data: DataConfig,
    pub hyper: HyperConfig,
    #[serde(default)]
    pub hedge: Option<HedgeConfig>,
    #[serde(default)]
    pub bands: BandConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Parses the file and resolves its relative paths against the file's
    /// directory, so a config can be run from anywhere.
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let mut config = Self::from_toml_str(&fs::read_to_string(path)?)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.out_dir]
            .into_iter()
            .chain(self.data.options_csv.as_mut())
            .chain(self.data.series_csv.as_mut())
        {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.segments.is_empty() {
            return Err(Error::Empty {
                what: "maturity segments".to_string(),
            });
        }
        let mut prev = 0.0;
        for &e in &m.segments {
            if !(e.is_finite() && e > prev) {
                return Err(Error::Config(format!(
                    "segment ends must increase from zero, got {:?}",
                    m.segments
                )));
            }
            prev = e;
        }
        if m.rho_trainable {
            if !(m.rho.is_finite() && m.rho.abs() < 1.0) {
                return Err(Error::Config(format!(
                    "trainable correlation must start strictly inside (-1, 1), got {}",
                    m.rho
                )));
            }
        } else if !(m.rho.is_finite() && m.rho.abs() <= 1.0) {
            return Err(Error::Config(format!(
                "correlation {} outside [-1, 1]",
                m.rho
            )));
        }
        if !m.r.is_finite() || !m.d.is_finite() {
            return Err(Error::Config(format!(
                "rates must be finite, got r = {}, d = {}",
                m.r, m.d
            )));
        }
        for (what, value) in [("initial variance", m.v0), ("init gain", m.init_gain)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::NonPositive {
                    what: what.to_string(),
                    value,
                });
            }
        }
        if self.grid.n_steps == 0 {
            return Err(Error::Config("grid needs at least one step".to_string()));
        }
        if !(self.data.s0.is_finite() && self.data.s0 > 0.0) {
            return Err(Error::NonPositive {
                what: "spot".to_string(),
                value: self.data.s0,
            });
        }
        let h = &self.hyper;
        for (what, value) in [
            ("spread scale", h.delta),
            ("prior width", h.sigma_prior),
            ("SGLD step", h.eps_step),
            ("Adam rate", h.adam_lr),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::NonPositive {
                    what: what.to_string(),
                    value,
                });
            }
        }
        if h.n_paths == 0 {
            return Err(Error::Config("need at least one path".to_string()));
        }
        if let Some(priors) = &h.stage_priors {
            if priors.len() != m.segments.len() {
                return Err(Error::ShapeMismatch {
                    op: "stage priors",
                    lhs: vec![priors.len()],
                    rhs: vec![m.segments.len()],
                });
            }
            for &p in priors {
                if !(p.is_finite() && p > 0.0) {
                    return Err(Error::NonPositive {
                        what: "stage prior width".to_string(),
                        value: p,
                    });
                }
            }
        }
        let b = &self.bands;
        if !(b.q_lo.is_finite() && b.q_hi.is_finite())
            || b.q_lo < 0.0
            || b.q_lo > 0.5
            || b.q_hi < 0.5
            || b.q_hi > 1.0
        {
            return Err(Error::Config(format!(
                "band levels ({}, {}) must satisfy 0 <= q_lo <= 0.5 <= q_hi <= 1",
                b.q_lo, b.q_hi
            )));
        }
        match self.mode {
            Mode::OptionsOnly | Mode::Staged => {
                if self.data.options_csv.is_none() {
                    return Err(Error::Config(format!(
                        "{:?} mode needs an option quote table",
                        self.mode
                    )));
                }
                if self.mode == Mode::Staged && self.data.series_csv.is_some() {
                    return Err(Error::Config(
                        "staged mode calibrates option quotes only; drop series_csv".to_string(),
                    ));
                }
            }
            Mode::Joint => {
                if self.data.series_csv.is_none() {
                    return Err(Error::Config(
                        "joint mode needs a historical series".to_string(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Hash of the canonical JSON form; two configs hash equal exactly when
    /// every semantic field matches, independent of TOML formatting.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialization cannot fail");
        let digest = Sha256::digest(&json);
        let mut hex = String::with_capacity(64);
        for byte in digest {
            write!(hex, "{byte:02x}").expect("string writes cannot fail");
        }
        hex
    }
}

/// Audit record of a finished run, written last as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub package: String,
    pub version: String,
    /// Paths relative to the run directory; every entry is checked to exist
    /// by [`RunManifest::verify`].
    pub artifacts: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Errors unless every listed artifact exists under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for name in &self.artifacts {
            if !dir.join(name).is_file() {
                return Err(Error::Config(format!(
                    "manifest lists {name:?} but {} does not contain it",
                    dir.display()
                )));
            }
        }
        Ok(())
    }
}

/// The four bundled studies a dataset can be generated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    BsPaper,
    HestonPaper,
    RbergomiPaper,
    Snp1990s,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::BsPaper,
        Preset::HestonPaper,
        Preset::RbergomiPaper,
        Preset::Snp1990s,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::BsPaper => "bs-paper",
            Preset::HestonPaper => "heston-paper",
            Preset::RbergomiPaper => "rbergomi-paper",
            Preset::Snp1990s => "snp-1990s",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!(
                    "unknown preset {name:?}; known presets: {}",
                    known.join(", ")
                ))
            })
    }
}

const DESK_HIDDEN: [usize; 2] = [32, 32];
const DESK_HEDGE_HIDDEN: [usize; 1] = [32];
const DESK_N_STEPS: usize = 48;
const DESK_EPOCHS: usize = 2000;

/// S&P 500 call surface, December 1995: spot 590, four maturities in years,
/// ten strikes per maturity, mid prices in dollars. Zero entries are quotes
/// outside the reliable wing of the table; the loader drops them.
const SNP_S0: f64 = 590.0;
const SNP_R: f64 = 0.060;
const SNP_D: f64 = 0.026;
const SNP_MATURITIES: [f64; 4] = [0.175, 0.425, 0.695, 0.94];
const SNP_STRIKES: [f64; 10] = [
    501.5, 531.0, 560.5, 590.0, 619.5, 649.0, 678.5, 708.0, 767.0, 826.0,
];
const SNP_PRICES: [[&str; 10]; 4] = [
    ["91.3", "62.8", "35.2", "12.9", "2.1", "0.1", "0.0", "0.0", "0.0", "0.0"],
    ["96.3", "69.0", "44.0", "23.3", "8.5", "2.3", "0.4", "0.2", "0.0", "0.0"],
    ["101.8", "76.1", "52.6", "32.6", "16.4", "5.9", "1.9", "0.6", "0.1", "0.0"],
    ["106.8", "82.2", "59.9", "39.9", "23.8", "11.3", "4.7", "1.8", "0.2", "0.0"],
];
// The S&P study quotes its spread scale as delta = 4.5 on the bps-of-spot
// scale, while the rough-volatility study states the squared value
// delta^2 = 3; both conventions appear in the sensitivity grids, so each
// preset pins its own delta explicitly rather than sharing a default.
const SNP_DELTA: f64 = 4.5;
const SNP_SIGMA_PRIOR: f64 = 4.0;

/// Writes the named study's dataset into `out_dir`: the quote table
/// (`options.csv`), the historical series when the study has one
/// (`series.csv`), the generator parameters (`params.json`), and a
/// ready-to-run calibration config (`config.toml`) pointing at them with its
/// outputs under `run/`. Regenerating with the same seed is byte-identical.
pub fn generate(preset: Preset, out_dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let tree = SeedTree::new(seed);
    let mut files = Vec::new();
    let mut add = |path: PathBuf| files.push(path);

    match preset {
        Preset::BsPaper => {
            let p = BsParams {
                s0: 1.0,
                mu: 0.05,
                sigma: 0.3,
                r: 0.025,
                d: 0.0,
            };
            let grid = TimeGrid::uniform(1.0, DESK_N_STEPS)?;
            let mut rows = Vec::new();
            for idx in [8, 16, 24, 32, 40, 48] {
                let t = grid.times()[idx];
                for i in 0..21 {
                    let k = (80 + 2 * i) as f64 / 100.0;
                    rows.push(PriceRow {
                        maturity: t,
                        strike: k,
                        price: bs_call(p.s0, k, t, p.sigma, p.r, p.d)?,
                        stderr: 0.0,
                        implied_vol: Some(p.sigma),
                    });
                }
            }
            let options = out_dir.join("options.csv");
            write_price_table(&options, &rows)?;
            add(options);

            let y = gbm_log_series(&p, &grid, &tree)?;
            let series = TimeSeriesDataset::new(grid.times().to_vec(), y, None)?;
            let series_path = out_dir.join("series.csv");
            write_series_csv(&series_path, &series)?;
            add(series_path);

            let params = serde_json::json!({
                "preset": preset.name(),
                "s0": p.s0, "mu": p.mu, "sigma": p.sigma, "r": p.r, "d": p.d,
                "delta": 5.0, "sigma_prior": 0.15, "seed": seed,
            });
            add(write_params(out_dir, &params)?);
            add(write_preset_config(preset, out_dir, seed)?);
        }
        Preset::HestonPaper => {
            let p = HestonParams::study();
            let strikes = [0.8, 0.9, 1.0, 1.1, 1.2];
            let maturities = [1.0 / 3.0, 2.0 / 3.0, 1.0];
            let targets = heston_target_prices(&p, &strikes, &maturities, 100_000, 96, &tree)?;
            let rows: Vec<PriceRow> = targets
                .iter()
                .map(|t| PriceRow {
                    maturity: t.maturity,
                    strike: t.strike,
                    price: t.price,
                    stderr: t.stderr,
                    implied_vol: implied_vol(t.price, p.s0, t.strike, t.maturity, p.r, 0.0).ok(),
                })
                .collect();
            let options = out_dir.join("options.csv");
            write_price_table(&options, &rows)?;
            add(options);

            let grid = TimeGrid::uniform(1.0, DESK_N_STEPS)?;
            let batch = heston_simulate(&p, &grid, 1, Measure::Physical, &tree, 0)?;
            let y: Vec<f64> = (0..=grid.n_steps()).map(|n| batch.y_at(n)[0]).collect();
            let series = TimeSeriesDataset::new(grid.times().to_vec(), y, None)?;
            let series_path = out_dir.join("series.csv");
            write_series_csv(&series_path, &series)?;
            add(series_path);

            let params = serde_json::json!({
                "preset": preset.name(),
                "s0": p.s0, "mu": p.mu, "kappa": p.kappa, "theta": p.theta,
                "sigma_volvol": p.sigma_volvol, "v0": p.v0, "rho": p.rho,
                "lambda": p.lambda, "r": p.r,
                "delta": 6.0, "sigma_prior": 0.18, "seed": seed,
            });
            add(write_params(out_dir, &params)?);
            add(write_preset_config(preset, out_dir, seed)?);
        }
        Preset::RbergomiPaper => {
            let p = RBergomiParams::study();
            let (log_strikes, _) = study_cells();
            let maturities = [0.5, 1.0];
            let rows =
                rbergomi_target_surface(&p, &log_strikes, &maturities, DESK_N_STEPS, 100_000, &tree)?;
            let options = out_dir.join("options.csv");
            write_price_table(&options, &rows)?;
            add(options);

            let params = serde_json::json!({
                "preset": preset.name(),
                "a": p.a, "eta": p.eta, "xi0": p.xi0, "rho": p.rho, "s0": p.s0,
                "delta_sq": 3.0, "delta": 3.0f64.sqrt(), "sigma_prior": 0.15, "seed": seed,
            });
            add(write_params(out_dir, &params)?);
            add(write_preset_config(preset, out_dir, seed)?);
        }
        Preset::Snp1990s => {
            let mut text = String::from("maturity,strike,price,stderr,implied_vol\n");
            for (i, &t) in SNP_MATURITIES.iter().enumerate() {
                for (j, &k) in SNP_STRIKES.iter().enumerate() {
                    writeln!(text, "{t},{k},{},0,", SNP_PRICES[i][j])
                        .expect("string writes cannot fail");
                }
            }
            let options = out_dir.join("options.csv");
            fs::write(&options, text)?;
            add(options);

            let params = serde_json::json!({
                "preset": preset.name(),
                "s0": SNP_S0, "r": SNP_R, "d": SNP_D,
                "delta": SNP_DELTA, "sigma_prior": SNP_SIGMA_PRIOR, "seed": seed,
            });
            add(write_params(out_dir, &params)?);
            add(write_preset_config(preset, out_dir, seed)?);
        }
    }
    Ok(files)
}

fn write_params(out_dir: &Path, params: &serde_json::Value) -> Result<PathBuf> {
    let path = out_dir.join("params.json");
    fs::write(&path, serde_json::to_string_pretty(params)?)?;
    Ok(path)
}

fn write_preset_config(preset: Preset, out_dir: &Path, seed: u64) -> Result<PathBuf> {
    let config = preset_config(preset, seed);
    let path = out_dir.join("config.toml");
    let text = toml::to_string_pretty(&config)
        .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
    fs::write(&path, text)?;
    Ok(path)
}

/// The study's calibration config with relative data paths, as written next
/// to the generated dataset. Desk-scale defaults: two hidden layers of 32,
/// 1000 paths, a 48-step base grid.
pub fn preset_config(preset: Preset, seed: u64) -> ExperimentConfig {
    let model = |segments: Vec<f64>, zeta, rho, rho_trainable, r, d, v0| ModelConfig {
        hidden: DESK_HIDDEN.to_vec(),
        segments,
        zeta,
        rho,
        rho_trainable,
        r,
        d,
        v0,
        init_gain: default_gain(),
    };
    let hyper = |delta, sigma_prior, eps_step, adam_lr| HyperConfig {
        delta,
        sigma_prior,
        eps_step,
        adam_lr,
        epochs: DESK_EPOCHS,
        n_paths: default_n_paths(),
        burn_in: DESK_EPOCHS / 2,
        seed,
        stage_priors: None,
    };
    let (mode, model, hyper, series) = match preset {
        Preset::BsPaper => (
            Mode::Joint,
            model(vec![1.0], true, 0.0, false, 0.025, 0.0, 0.04),
            hyper(5.0, 0.15, 2e-6, 0.01),
            true,
        ),
        Preset::HestonPaper => (
            Mode::Joint,
            model(vec![1.0], true, 0.0, true, 0.025, 0.0, 0.04),
            hyper(6.0, 0.18, 2e-6, 0.01),
            true,
        ),
        Preset::RbergomiPaper => (
            Mode::OptionsOnly,
            model(vec![1.0], false, -0.5, true, 0.0, 0.0, 0.055225),
            hyper(3.0f64.sqrt(), 0.15, 2e-6, 0.01),
            false,
        ),
        Preset::Snp1990s => (
            Mode::Staged,
            model(
                SNP_MATURITIES.to_vec(),
                false,
                0.0,
                true,
                SNP_R,
                SNP_D,
                0.04,
            ),
            hyper(SNP_DELTA, SNP_SIGMA_PRIOR, 2e-6, 0.01),
            false,
        ),
    };
    let s0 = if preset == Preset::Snp1990s { SNP_S0 } else { 1.0 };
    ExperimentConfig {
        mode,
        out_dir: PathBuf::from("run"),
        model,
        grid: GridConfig {
            n_steps: DESK_N_STEPS,
        },
        data: DataConfig {
            s0,
            options_csv: Some(PathBuf::from("options.csv")),
            series_csv: series.then(|| PathBuf::from("series.csv")),
        },
        hyper,
        hedge: Some(HedgeConfig {
            hidden: DESK_HEDGE_HIDDEN.to_vec(),
        }),
        bands: BandConfig::default(),
    }
}

/// Builds the calibration dataset from a quote table: rows with non-positive
/// prices are dropped with a log note, every kept maturity must sit on the
/// grid, and the spread column is a unit placeholder — the likelihood spread
/// scale always comes from the config's `delta`. Returns the dataset plus the
/// kept `(maturity, strike)` cells in row order.
pub fn load_option_dataset(
    rows: &[PriceRow],
    s0: f64,
    grid: &TimeGrid,
) -> Result<(OptionDataset, Vec<(f64, f64)>)> {
    let mut quotes = Vec::new();
    let mut cells = Vec::new();
    let mut dropped = 0usize;
    for row in rows {
        if !(row.price > 0.0) {
            dropped += 1;
            continue;
        }
        quotes.push(OptionQuote {
            strike: row.strike,
            maturity: row.maturity,
            maturity_index: grid.index_of(row.maturity)?,
            mid: row.price,
            spread: 1.0,
        });
        cells.push((row.maturity, row.strike));
    }
    if dropped > 0 {
        log::info!("dropped {dropped} quotes with non-positive prices");
    }
    Ok((OptionDataset::new(s0, quotes)?, cells))
}

/// Writes a series as `time,y[,v]` with round-trip-exact values.
pub fn write_series_csv(path: &Path, series: &TimeSeriesDataset) -> Result<()> {
    let mut text = String::from(if series.v.is_some() {
        "time,y,v\n"
    } else {
        "time,y\n"
    });
    for (i, (&t, &y)) in series.times.iter().zip(&series.y).enumerate() {
        match &series.v {
            Some(v) => writeln!(text, "{t},{y},{}", v[i]),
            None => writeln!(text, "{t},{y}"),
        }
        .expect("string writes cannot fail");
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_series_csv(path: &Path) -> Result<TimeSeriesDataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Csv {
        line: 1,
        detail: "empty series file".to_string(),
    })?;
    let has_v = match header.trim() {
        "time,y" => false,
        "time,y,v" => true,
        other => {
            return Err(Error::Csv {
                line: 1,
                detail: format!("unexpected header {other:?}"),
            })
        }
    };
    let mut times = Vec::new();
    let mut y = Vec::new();
    let mut v = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let want = if has_v { 3 } else { 2 };
        if fields.len() != want {
            return Err(Error::Csv {
                line: idx + 1,
                detail: format!("expected {want} fields, got {}", fields.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|e| Error::Csv {
                line: idx + 1,
                detail: format!("{e}: {s:?}"),
            })
        };
        times.push(num(fields[0])?);
        y.push(num(fields[1])?);
        if has_v {
            v.push(num(fields[2])?);
        }
    }
    TimeSeriesDataset::new(times, y, has_v.then_some(v))
}

/// Serialized form of a full market model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelJson {
    pub seg_ends: Vec<f64>,
    pub segments: Vec<SegmentJson>,
    pub zeta: Option<MlpJson>,
    pub rho_trainable: bool,
    /// Fixed correlation value, or the raw (pre-tanh) parameter when trainable.
    pub rho: f64,
    pub r: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentJson {
    pub sigma: MlpJson,
    pub bv: MlpJson,
    pub sigmav: MlpJson,
}

pub fn model_to_json(model: &NeuralSdeModel) -> ModelJson {
    let (rho_trainable, rho) = match model.rho {
        Rho::Fixed(v) => (false, v),
        Rho::Trainable(raw) => (true, raw),
    };
    ModelJson {
        seg_ends: model.seg_ends.clone(),
        segments: model
            .segments
            .iter()
            .map(|s| SegmentJson {
                sigma: s.sigma.to_json(),
                bv: s.bv.to_json(),
                sigmav: s.sigmav.to_json(),
            })
            .collect(),
        zeta: model.zeta.as_ref().map(Mlp::to_json),
        rho_trainable,
        rho,
        r: model.r,
        d: model.d,
    }
}

pub fn model_from_json(json: &ModelJson) -> Result<NeuralSdeModel> {
    let segments = json
        .segments
        .iter()
        .map(|s| {
            Ok(SdeNets {
                sigma: Mlp::from_json(&s.sigma)?,
                bv: Mlp::from_json(&s.bv)?,
                sigmav: Mlp::from_json(&s.sigmav)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let zeta = json.zeta.as_ref().map(Mlp::from_json).transpose()?;
    let rho = if json.rho_trainable {
        Rho::Trainable(json.rho)
    } else {
        Rho::Fixed(json.rho)
    };
    NeuralSdeModel::new(segments, json.seg_ends.clone(), zeta, rho, json.r, json.d)
}

pub fn write_model(path: &Path, model: &NeuralSdeModel) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(&model_to_json(model))?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<NeuralSdeModel> {
    let json: ModelJson = serde_json::from_str(&fs::read_to_string(path)?)?;
    model_from_json(&json)
}

pub fn write_hedge(path: &Path, hedge: &Mlp) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(&hedge.to_json())?)?;
    Ok(())
}

pub fn read_hedge(path: &Path) -> Result<Mlp> {
    let json: MlpJson = serde_json::from_str(&fs::read_to_string(path)?)?;
    Mlp::from_json(&json)
}

/// Where a finished run landed, plus the summary numbers the sweep
/// comparison table wants.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    /// Final-epoch weighted pricing error; absent when no epochs ran.
    pub final_misfit: Option<f64>,
    /// Mean price-band width over cells; absent when bands were skipped.
    pub band_mean_width: Option<f64>,
}

fn check_no_leakage(config: &ExperimentConfig) -> Result<()> {
    let out = config.out_dir.canonicalize()?;
    for path in [&config.data.options_csv, &config.data.series_csv]
        .into_iter()
        .flatten()
    {
        let input = path.canonicalize().map_err(|e| {
            Error::Config(format!("cannot resolve input {}: {e}", path.display()))
        })?;
        if input.starts_with(&out) {
            return Err(Error::Config(format!(
                "input {} lives inside the output directory {}; outputs must not feed back into inputs",
                input.display(),
                out.display()
            )));
        }
    }
    Ok(())
}

fn build_model(m: &ModelConfig) -> Result<NeuralSdeModel> {
    let segments = m
        .segments
        .iter()
        .map(|_| SdeNets::new(&m.hidden))
        .collect::<Result<Vec<_>>>()?;
    let zeta = m.zeta.then(|| zeta_net(&m.hidden)).transpose()?;
    let rho = if m.rho_trainable {
        Rho::Trainable(0.5 * ((1.0 + m.rho) / (1.0 - m.rho)).ln())
    } else {
        Rho::Fixed(m.rho)
    };
    NeuralSdeModel::new(segments, m.segments.clone(), zeta, rho, m.r, m.d)
}

fn build_hedge(hidden: &[usize], n_quotes: usize, tree: &SeedTree) -> Result<Mlp> {
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(2);
    widths.extend_from_slice(hidden);
    widths.push(n_quotes);
    let mut hedge = Mlp::new(&widths, OutputActivation::Identity)?;
    hedge.init_glorot(1.0, &mut tree.stream("init-hedge", &[0]));
    Ok(hedge)
}

fn hyper_params(h: &HyperConfig) -> HyperParams {
    HyperParams {
        delta_override: Some(h.delta),
        sigma_prior: h.sigma_prior,
        eps_step: h.eps_step,
        adam_lr: h.adam_lr,
        epochs: h.epochs,
        n_paths: h.n_paths,
        burn_in: h.burn_in,
        seed: h.seed,
    }
}

/// Splits the quotes by maturity segment: quote `maturity <= seg_ends[k]`
/// (within tolerance) lands in the first such stage, and every stage must
/// receive at least one quote. Cells are returned per stage in quote order.
#[allow(clippy::type_complexity)]
pub fn stage_datasets(
    ds: &OptionDataset,
    cells: &[(f64, f64)],
    seg_ends: &[f64],
) -> Result<(Vec<OptionDataset>, Vec<Vec<(f64, f64)>>)> {
    let mut quote_buckets: Vec<Vec<OptionQuote>> = vec![Vec::new(); seg_ends.len()];
    let mut cell_buckets: Vec<Vec<(f64, f64)>> = vec![Vec::new(); seg_ends.len()];
    for (quote, &cell) in ds.quotes.iter().zip(cells) {
        let k = seg_ends
            .iter()
            .position(|&e| quote.maturity <= e + 1e-9)
            .ok_or_else(|| {
                Error::Config(format!(
                    "quote maturity {} beyond the last segment end {}",
                    quote.maturity,
                    seg_ends[seg_ends.len() - 1]
                ))
            })?;
        quote_buckets[k].push(quote.clone());
        cell_buckets[k].push(cell);
    }
    let mut datasets = Vec::with_capacity(seg_ends.len());
    for (k, bucket) in quote_buckets.into_iter().enumerate() {
        if bucket.is_empty() {
            let lo = if k == 0 { 0.0 } else { seg_ends[k - 1] };
            return Err(Error::Config(format!(
                "maturity segment ({lo}, {}] has no quotes",
                seg_ends[k]
            )));
        }
        datasets.push(OptionDataset::new(ds.s0, bucket)?);
    }
    Ok((datasets, cell_buckets))
}

/// Implied-vol bands per cell: every post-burn-in price draw is inverted and
/// the quantiles are taken on the vol scale. Cells with a draw outside the
/// arbitrage bounds are left out with a log note; an error is returned only
/// when no cell survives.
pub fn iv_band(
    chain: &Chain,
    burn_in: usize,
    q_lo: f64,
    q_hi: f64,
    s0: f64,
    r: f64,
    d: f64,
) -> Result<BandSummary> {
    let len = chain.len();
    if burn_in >= len || len - burn_in < 10 {
        return Err(Error::BurnInTooLarge { burn_in, len });
    }
    let mut cells = Vec::new();
    for label in chain.labels() {
        let Some((maturity, strike)) = label.cell else {
            continue;
        };
        let draws = &chain.series(&label.name).expect("label names its column")[burn_in..];
        let ivs: Result<Vec<f64>> = draws
            .iter()
            .map(|&p| implied_vol(p, s0, strike, maturity, r, d))
            .collect();
        match ivs {
            Ok(ivs) => cells.push(BandCell {
                maturity,
                strike,
                lower: quantile(&ivs, q_lo)?,
                median: quantile(&ivs, 0.5)?,
                upper: quantile(&ivs, q_hi)?,
            }),
            Err(err) => {
                log::warn!("implied vol band skips cell ({maturity}, {strike}): {err}");
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Empty {
            what: "invertible band cells".to_string(),
        });
    }
    Ok(BandSummary { q_lo, q_hi, cells })
}

/// Reattaches `(maturity, strike)` cells to an imported trace using the quote
/// table it was calibrated against (after the same non-positive-price drop
/// rule), so bands can be rebuilt from the files alone.
pub fn chain_with_cells(trace_text: &str, rows: &[PriceRow]) -> Result<Chain> {
    let cells: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.price > 0.0)
        .map(|r| (r.maturity, r.strike))
        .collect();
    crate::posterior::trace_import(trace_text)?.with_cells(&cells)
}

/// Runs the configured calibration end to end and fills the output
/// directory: `trace.csv` (or `trace_stage_<k>.csv` per stage),
/// `bands_prices.csv`/`bands_iv.csv` when enough post-burn-in epochs exist,
/// `model.json` (the prior draw when `epochs = 0`), `hedge.json` when a hedge
/// network is configured, and `manifest.json` last. A failing epoch still
/// flushes the partial trace before the error is returned.
pub fn calibrate(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let start = Instant::now();
    fs::create_dir_all(&config.out_dir)?;
    check_no_leakage(config)?;
    let out = config.out_dir.as_path();

    let option_rows = config
        .data
        .options_csv
        .as_deref()
        .map(read_price_table)
        .transpose()?;
    let series = config
        .data
        .series_csv
        .as_deref()
        .map(read_series_csv)
        .transpose()?
        .unwrap_or_else(TimeSeriesDataset::empty);

    let horizon = *config.model.segments.last().expect("validated non-empty");
    let mut knots: Vec<f64> = config.model.segments.clone();
    if let Some(rows) = &option_rows {
        knots.extend(rows.iter().filter(|r| r.price > 0.0).map(|r| r.maturity));
    }
    if series.v.is_none() {
        knots.extend(series.times.iter().copied().filter(|&t| t > 0.0));
    }
    let grid = TimeGrid::with_knots(horizon, config.grid.n_steps, &knots)?;

    let loaded = option_rows
        .as_deref()
        .map(|rows| load_option_dataset(rows, config.data.s0, &grid))
        .transpose()?;
    let (options, cells) = match loaded {
        Some((ds, cells)) => (Some(ds), cells),
        None => (None, Vec::new()),
    };

    let tree = SeedTree::new(config.hyper.seed);
    let mut model = build_model(&config.model)?;
    model.init_glorot(config.model.init_gain, &tree);
    let hedge = match (&config.hedge, &options) {
        (Some(h), Some(ds)) => Some(build_hedge(&h.hidden, ds.quotes.len(), &tree)?),
        _ => None,
    };
    let hyper = hyper_params(&config.hyper);

    let mut artifacts: Vec<String> = Vec::new();
    let mut band_mean_width = None;

    let (stage_chains, final_misfit): (Vec<(String, Chain)>, Option<f64>) = match config.mode {
        Mode::OptionsOnly | Mode::Joint => {
            let bind = BindSpec::all_trainable(&model);
            let mut cal = Calibrator::new(
                model,
                hedge,
                grid,
                config.data.s0,
                config.model.v0,
                hyper,
                bind,
            )?;
            let mut records = Vec::with_capacity(config.hyper.epochs);
            let mut failure = None;
            for epoch in 0..config.hyper.epochs {
                match cal.epoch_joint(options.as_ref(), &series) {
                    Ok(record) => records.push(record),
                    Err(err) => {
                        log::error!("epoch {epoch} failed: {err}");
                        failure = Some(err);
                        break;
                    }
                }
            }
            let chain = Chain::from_records(&records, &cells)?;
            fs::write(out.join("trace.csv"), trace_csv(&chain))?;
            artifacts.push("trace.csv".to_string());
            if let Some(err) = failure {
                return Err(err);
            }
            let misfit = records.last().map(|r| r.misfit);
            let (model, hedge) = cal.into_parts();
            write_model(&out.join("model.json"), &model)?;
            artifacts.push("model.json".to_string());
            if let Some(hedge) = &hedge {
                write_hedge(&out.join("hedge.json"), hedge)?;
                artifacts.push("hedge.json".to_string());
            }
            (vec![("trace.csv".to_string(), chain)], misfit)
        }
        Mode::Staged => {
            let ds = options.as_ref().expect("validated for staged mode");
            let (datasets, cell_buckets) = stage_datasets(ds, &cells, &config.model.segments)?;
            let hedge_hidden = config.hedge.as_ref().map(|h| h.hidden.as_slice());
            let (model, stage_records) = staged_calibration(
                model,
                &datasets,
                hedge_hidden,
                &grid,
                config.data.s0,
                config.model.v0,
                &hyper,
                config.hyper.stage_priors.as_deref(),
            )?;
            let mut chains = Vec::with_capacity(stage_records.len());
            for (k, (records, stage_cells)) in
                stage_records.iter().zip(&cell_buckets).enumerate()
            {
                let chain = Chain::from_records(records, stage_cells)?;
                let name = format!("trace_stage_{}.csv", k + 1);
                fs::write(out.join(&name), trace_csv(&chain))?;
                artifacts.push(name.clone());
                chains.push((name, chain));
            }
            let misfit = stage_records.last().and_then(|r| r.last()).map(|r| r.misfit);
            write_model(&out.join("model.json"), &model)?;
            artifacts.push("model.json".to_string());
            (chains, misfit)
        }
    };

    if !cells.is_empty() {
        let mut price_cells = Vec::new();
        let mut iv_cells = Vec::new();
        let mut skipped = false;
        for (name, chain) in &stage_chains {
            match band(chain, config.hyper.burn_in, config.bands.q_lo, config.bands.q_hi) {
                Ok(summary) => {
                    price_cells.extend(summary.cells);
                }
                Err(err) => {
                    log::warn!("price bands skipped for {name}: {err}");
                    skipped = true;
                    continue;
                }
            }
            match iv_band(
                chain,
                config.hyper.burn_in,
                config.bands.q_lo,
                config.bands.q_hi,
                config.data.s0,
                config.model.r,
                config.model.d,
            ) {
                Ok(summary) => iv_cells.extend(summary.cells),
                Err(err) => log::warn!("implied vol bands skipped for {name}: {err}"),
            }
        }
        if !price_cells.is_empty() && !skipped {
            let widths: f64 = price_cells.iter().map(|c| c.upper - c.lower).sum();
            band_mean_width = Some(widths / price_cells.len() as f64);
            let summary = BandSummary {
                q_lo: config.bands.q_lo,
                q_hi: config.bands.q_hi,
                cells: price_cells,
            };
            fs::write(out.join("bands_prices.csv"), band_csv(&summary))?;
            artifacts.push("bands_prices.csv".to_string());
        }
        if !iv_cells.is_empty() && !skipped {
            let summary = BandSummary {
                q_lo: config.bands.q_lo,
                q_hi: config.bands.q_hi,
                cells: iv_cells,
            };
            fs::write(out.join("bands_iv.csv"), band_csv(&summary))?;
            artifacts.push("bands_iv.csv".to_string());
        }
    }

    let manifest = RunManifest {
        config_hash: config.config_hash(),
        seed: config.hyper.seed,
        package: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        artifacts,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write(out)?;
    manifest.verify(out)?;
    Ok(RunSummary {
        out_dir: config.out_dir.clone(),
        manifest,
        final_misfit,
        band_mean_width,
    })
}

/// One calibrate run per `(sigma_prior, delta)` cell under
/// `out_dir/cells/...`, all sharing the config's seed, summarized in
/// `comparison.csv`. A failed cell is recorded in the table and the remaining
/// cells still run. Empty grids fall back to the config's own values.
pub fn sweep(
    config: &ExperimentConfig,
    sigma_priors: &[f64],
    deltas: &[f64],
) -> Result<PathBuf> {
    config.validate()?;
    let sigma_priors = if sigma_priors.is_empty() {
        vec![config.hyper.sigma_prior]
    } else {
        sigma_priors.to_vec()
    };
    let deltas = if deltas.is_empty() {
        vec![config.hyper.delta]
    } else {
        deltas.to_vec()
    };
    fs::create_dir_all(&config.out_dir)?;

    let mut table = String::from("sigma_prior,delta,final_g,band_mean_width,status\n");
    let mut widths = Vec::new();
    for &sigma_prior in &sigma_priors {
        for &delta in &deltas {
            let mut cell = config.clone();
            cell.hyper.sigma_prior = sigma_prior;
            cell.hyper.delta = delta;
            cell.out_dir = config
                .out_dir
                .join("cells")
                .join(format!("sigma{sigma_prior}_delta{delta}"));
            let (g, width, status) = match calibrate(&cell) {
                Ok(summary) => {
                    if let Some(w) = summary.band_mean_width {
                        widths.push(w);
                    }
                    (summary.final_misfit, summary.band_mean_width, "ok".to_string())
                }
                Err(err) => {
                    log::error!(
                        "sweep cell (sigma_prior {sigma_prior}, delta {delta}) failed: {err}"
                    );
                    (None, None, format!("error: {err}").replace(',', ";"))
                }
            };
            let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                table,
                "{sigma_prior},{delta},{},{},{status}",
                fmt(g),
                fmt(width)
            )
            .expect("string writes cannot fail");
        }
    }
    if let (Some(min), Some(max)) = (
        widths.iter().copied().reduce(f64::min),
        widths.iter().copied().reduce(f64::max),
    ) {
        if min > 0.0 && (max - min) / min > 0.5 {
            log::warn!(
                "band mean widths vary by more than 50% across the sweep ({min} to {max})"
            );
        }
    }
    let path = config.out_dir.join("comparison.csv");
    fs::write(&path, table)?;
    Ok(path)
}

/// Prices a call grid under a model snapshot by plain Monte Carlo on a fresh
/// increment draw; implied vols are attached where the inversion succeeds.
pub fn price_snapshot(
    model: &NeuralSdeModel,
    s0: f64,
    v0: f64,
    strikes: &[f64],
    maturities: &[f64],
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PriceRow>> {
    if strikes.is_empty() || maturities.is_empty() {
        return Err(Error::Empty {
            what: "price request".to_string(),
        });
    }
    let grid = TimeGrid::with_knots(model.horizon(), n_steps, maturities)?;
    let inc = Increments::draw(&grid, n_paths, &SeedTree::new(seed), 0);
    let batch = model.simulate(&grid, &inc, Measure::RiskNeutral, s0, v0)?;
    let mut rows = Vec::with_capacity(strikes.len() * maturities.len());
    for &t in maturities {
        let idx = grid.index_of(t)?;
        for &k in strikes {
            let spec = OptionSpec::call(k, idx);
            let est = mc_price_cv(&batch, &spec, None, model.r, model.d)?;
            rows.push(PriceRow {
                maturity: t,
                strike: k,
                price: est.mean,
                stderr: est.stderr,
                implied_vol: implied_vol(est.mean, s0, k, t, model.r, model.d).ok(),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(data_dir: &Path, out_dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            mode: Mode::OptionsOnly,
            out_dir: out_dir.to_path_buf(),
            model: ModelConfig {
                hidden: vec![4],
                segments: vec![1.0],
                zeta: false,
                rho: 0.0,
                rho_trainable: false,
                r: 0.025,
                d: 0.0,
                v0: 0.04,
                init_gain: 1.5,
            },
            grid: GridConfig { n_steps: 8 },
            data: DataConfig {
                s0: 1.0,
                options_csv: Some(data_dir.join("options.csv")),
                series_csv: None,
            },
            hyper: HyperConfig {
                delta: 5.0,
                sigma_prior: 0.5,
                eps_step: 1e-6,
                adam_lr: 1e-3,
                epochs: 12,
                n_paths: 16,
                burn_in: 0,
                seed: 7,
                stage_priors: None,
            },
            hedge: None,
            bands: BandConfig::default(),
        }
    }

    fn tiny_quotes(dir: &Path) {
        let rows = vec![
            PriceRow {
                maturity: 0.5,
                strike: 0.95,
                price: 0.09,
                stderr: 0.0,
                implied_vol: None,
            },
            PriceRow {
                maturity: 1.0,
                strike: 1.05,
                price: 0.08,
                stderr: 0.0,
                implied_vol: None,
            },
        ];
        write_price_table(&dir.join("options.csv"), &rows).unwrap();
    }

    #[test]
    fn toml_round_trip_rejects_unknown_fields() {
        let config = preset_config(Preset::BsPaper, 3);
        let text = toml::to_string_pretty(&config).unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, config);

        let bad = format!("typo = 1\n{text}");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.is_config(), "{err}");
        let bad = text.replace("[hyper]", "[hyper]\nunknown_knob = 2.0");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn config_hash_tracks_semantic_fields_only() {
        let config = preset_config(Preset::BsPaper, 3);
        let hash = config.config_hash();
        assert_eq!(hash.len(), 64);
        assert_eq!(hash, config.clone().config_hash());

        let mut reseeded = config.clone();
        reseeded.hyper.seed = 4;
        assert_ne!(hash, reseeded.config_hash());
        let mut moved = config.clone();
        moved.out_dir = PathBuf::from("elsewhere");
        assert_ne!(hash, moved.config_hash());

        let text = toml::to_string_pretty(&config).unwrap();
        let reformatted = format!("# a comment\n{}", text.replace(" = ", "   =  "));
        let back = ExperimentConfig::from_toml_str(&reformatted).unwrap();
        assert_eq!(back.config_hash(), hash);
    }

    #[test]
    fn validation_rejects_inconsistent_configs() {
        let dir = tempfile::tempdir().unwrap();
        let base = tiny_config(dir.path(), &dir.path().join("run"));

        let mut c = base.clone();
        c.mode = Mode::Joint;
        assert!(c.validate().is_err(), "joint needs a series");
        let mut c = base.clone();
        c.mode = Mode::Staged;
        c.data.series_csv = Some(dir.path().join("series.csv"));
        assert!(c.validate().is_err(), "staged is options only");
        let mut c = base.clone();
        c.model.segments = vec![0.5, 0.5];
        assert!(c.validate().is_err(), "segments must increase");
        let mut c = base.clone();
        c.model.rho = 1.0;
        c.model.rho_trainable = true;
        assert!(c.validate().is_err(), "trainable rho must start inside (-1, 1)");
        let mut c = base.clone();
        c.bands = BandConfig { q_lo: 0.6, q_hi: 0.9 };
        assert!(c.validate().is_err(), "levels must straddle the median");
        let mut c = base.clone();
        c.hyper.stage_priors = Some(vec![1.0, 2.0]);
        assert!(c.validate().is_err(), "one prior per segment");
    }

    #[test]
    fn unknown_preset_lists_the_known_names() {
        let err = Preset::from_name("blackscholes").unwrap_err();
        let text = err.to_string();
        for p in Preset::ALL {
            assert!(text.contains(p.name()), "{text}");
        }
        assert_eq!(Preset::from_name("snp-1990s").unwrap(), Preset::Snp1990s);
    }

    #[test]
    fn snp_table_is_emitted_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        generate(Preset::Snp1990s, dir.path(), 0).unwrap();
        let text = fs::read_to_string(dir.path().join("options.csv")).unwrap();
        let prices: Vec<&str> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap())
            .collect();
        let expected: Vec<&str> = SNP_PRICES.iter().flatten().copied().collect();
        assert_eq!(prices, expected);

        let rows = read_price_table(&dir.path().join("options.csv")).unwrap();
        assert_eq!(rows.len(), 40);
        let grid = TimeGrid::with_knots(0.94, 48, &SNP_MATURITIES).unwrap();
        let (ds, cells) = load_option_dataset(&rows, SNP_S0, &grid).unwrap();
        assert_eq!(ds.quotes.len(), 32, "eight zero-price quotes are dropped");
        assert_eq!(cells.len(), 32);
        let (stages, stage_cells) = stage_datasets(&ds, &cells, &SNP_MATURITIES).unwrap();
        let counts: Vec<usize> = stages.iter().map(|s| s.quotes.len()).collect();
        assert_eq!(counts, vec![6, 8, 9, 9]);
        assert_eq!(stage_cells[0].len(), 6);

        let config = ExperimentConfig::from_toml_path(&dir.path().join("config.toml")).unwrap();
        assert_eq!(config.mode, Mode::Staged);
        assert_eq!(config.data.s0, SNP_S0);
        assert_eq!(config.model.segments, SNP_MATURITIES.to_vec());
    }

    #[test]
    fn bs_dataset_round_trips_and_matches_the_closed_form() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate(Preset::BsPaper, dir.path(), 11).unwrap();
        assert!(files.iter().all(|f| f.is_file()));

        let rows = read_price_table(&dir.path().join("options.csv")).unwrap();
        assert_eq!(rows.len(), 21 * 6);
        for row in &rows {
            let price = bs_call(1.0, row.strike, row.maturity, 0.3, 0.025, 0.0).unwrap();
            assert_eq!(row.price.to_bits(), price.to_bits());
            assert!(row.price > 0.0);
        }

        let series = read_series_csv(&dir.path().join("series.csv")).unwrap();
        assert_eq!(series.times.len(), 49);
        assert_eq!(series.y[0], 0.0, "starts at log spot");
        let copy = dir.path().join("series_copy.csv");
        write_series_csv(&copy, &series).unwrap();
        assert_eq!(
            fs::read(&copy).unwrap(),
            fs::read(dir.path().join("series.csv")).unwrap()
        );

        let config = ExperimentConfig::from_toml_path(&dir.path().join("config.toml")).unwrap();
        assert_eq!(config.mode, Mode::Joint);
        assert!(config.data.series_csv.as_ref().unwrap().is_file());
    }

    #[test]
    fn generation_is_reproducible_per_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(Preset::HestonPaper, a.path(), 5).unwrap();
        generate(Preset::HestonPaper, b.path(), 5).unwrap();
        for name in ["options.csv", "series.csv", "params.json", "config.toml"] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
        let c = tempfile::tempdir().unwrap();
        generate(Preset::HestonPaper, c.path(), 6).unwrap();
        assert_ne!(
            fs::read(a.path().join("series.csv")).unwrap(),
            fs::read(c.path().join("series.csv")).unwrap()
        );

        let rows = read_price_table(&a.path().join("options.csv")).unwrap();
        assert_eq!(rows.len(), 15);
        assert!(rows.iter().all(|r| r.stderr > 0.0));
        assert!(rows.iter().filter(|r| r.implied_vol.is_some()).count() >= 12);
    }

    #[test]
    fn zero_epoch_run_writes_the_prior_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        tiny_quotes(dir.path());
        let mut config = tiny_config(dir.path(), &dir.path().join("run"));
        config.hyper.epochs = 0;
        let summary = calibrate(&config).unwrap();
        assert_eq!(summary.final_misfit, None);
        assert_eq!(summary.band_mean_width, None);

        let trace = fs::read_to_string(dir.path().join("run/trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1, "header only");
        assert!(trace.starts_with("epoch,log_post,G,price_1,price_2"));
        assert!(!dir.path().join("run/bands_prices.csv").exists());

        let model = read_model(&dir.path().join("run/model.json")).unwrap();
        let mut expected = build_model(&config.model).unwrap();
        expected.init_glorot(config.model.init_gain, &SeedTree::new(config.hyper.seed));
        assert_eq!(model.flat_params(), expected.flat_params());

        let manifest = RunManifest::read(&dir.path().join("run/manifest.json")).unwrap();
        manifest.verify(&dir.path().join("run")).unwrap();
        assert_eq!(manifest.config_hash, config.config_hash());
    }

    #[test]
    fn identical_configs_write_identical_traces() {
        let dir = tempfile::tempdir().unwrap();
        tiny_quotes(dir.path());
        let mut first = tiny_config(dir.path(), &dir.path().join("a"));
        first.hedge = Some(HedgeConfig { hidden: vec![3] });
        let mut second = first.clone();
        second.out_dir = dir.path().join("b");

        let sa = calibrate(&first).unwrap();
        let sb = calibrate(&second).unwrap();
        let ta = fs::read(dir.path().join("a/trace.csv")).unwrap();
        assert_eq!(ta, fs::read(dir.path().join("b/trace.csv")).unwrap());
        assert_eq!(sa.manifest.config_hash, first.config_hash());
        assert_eq!(
            fs::read(dir.path().join("a/bands_prices.csv")).unwrap(),
            fs::read(dir.path().join("b/bands_prices.csv")).unwrap()
        );
        assert!(sa.band_mean_width.unwrap() >= 0.0);
        assert_eq!(sa.final_misfit.unwrap(), sb.final_misfit.unwrap());
        assert!(dir.path().join("a/hedge.json").is_file());

        let mut reseeded = first.clone();
        reseeded.out_dir = dir.path().join("c");
        reseeded.hyper.seed = 8;
        calibrate(&reseeded).unwrap();
        assert_ne!(ta, fs::read(dir.path().join("c/trace.csv")).unwrap());
    }

    #[test]
    fn bands_rebuild_from_the_artifact_files() {
        let dir = tempfile::tempdir().unwrap();
        tiny_quotes(dir.path());
        let config = tiny_config(dir.path(), &dir.path().join("run"));
        calibrate(&config).unwrap();

        let trace = fs::read_to_string(dir.path().join("run/trace.csv")).unwrap();
        let rows = read_price_table(&dir.path().join("options.csv")).unwrap();
        let chain = chain_with_cells(&trace, &rows).unwrap();
        let summary = band(&chain, 0, 0.1, 0.9).unwrap();
        assert_eq!(
            band_csv(&summary),
            fs::read_to_string(dir.path().join("run/bands_prices.csv")).unwrap()
        );
        let ivs = iv_band(&chain, 0, 0.1, 0.9, 1.0, 0.025, 0.0).unwrap();
        assert_eq!(ivs.cells.len(), 2);
        for cell in &ivs.cells {
            assert!(cell.lower <= cell.median && cell.median <= cell.upper);
        }
    }

    #[test]
    fn inputs_inside_the_output_directory_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        fs::create_dir_all(&out).unwrap();
        tiny_quotes(&out);
        let config = tiny_config(&out, &out);
        let err = calibrate(&config).unwrap_err();
        assert!(err.is_config(), "{err}");
        assert!(err.to_string().contains("output directory"));
    }

    #[test]
    fn staged_run_writes_one_trace_per_stage() {
        let dir = tempfile::tempdir().unwrap();
        tiny_quotes(dir.path());
        let mut config = tiny_config(dir.path(), &dir.path().join("run"));
        config.mode = Mode::Staged;
        config.model.segments = vec![0.5, 1.0];
        config.hyper.epochs = 3;
        config.hyper.stage_priors = Some(vec![0.5, 0.4]);
        calibrate(&config).unwrap();

        for name in ["trace_stage_1.csv", "trace_stage_2.csv", "model.json"] {
            assert!(dir.path().join("run").join(name).is_file(), "{name}");
        }
        assert!(
            !dir.path().join("run/bands_prices.csv").exists(),
            "three epochs cannot clear the ten-draw minimum"
        );
        let text = fs::read_to_string(dir.path().join("run/trace_stage_1.csv")).unwrap();
        assert_eq!(text.lines().count(), 4, "header plus three epochs");
        assert!(text.starts_with("epoch,log_post,G,price_1\n"));
    }

    #[test]
    fn sweep_writes_one_row_per_cell_and_survives_failures() {
        let dir = tempfile::tempdir().unwrap();
        tiny_quotes(dir.path());
        let mut config = tiny_config(dir.path(), &dir.path().join("sweep"));
        config.hyper.epochs = 2;
        let path = sweep(&config, &[0.4, 0.5], &[2.0]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3, "header plus two cells");
        assert!(text.starts_with("sigma_prior,delta,final_g,band_mean_width,status\n"));
        assert_eq!(text.matches(",ok").count(), 2);
        assert!(dir.path().join("sweep/cells/sigma0.4_delta2/trace.csv").is_file());

        let singleton = {
            let mut c = config.clone();
            c.out_dir = dir.path().join("single");
            c.hyper.sigma_prior = 0.4;
            c.hyper.delta = 2.0;
            calibrate(&c).unwrap();
            fs::read(dir.path().join("single/trace.csv")).unwrap()
        };
        assert_eq!(
            singleton,
            fs::read(dir.path().join("sweep/cells/sigma0.4_delta2/trace.csv")).unwrap(),
            "a sweep cell is a plain calibrate run"
        );

        // An unreadable quote table fails that cell but not the sweep.
        let mut broken = config.clone();
        broken.out_dir = dir.path().join("sweep_broken");
        broken.data.options_csv = Some(dir.path().join("missing.csv"));
        let path = sweep(&broken, &[0.4], &[2.0, 3.0]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let failed = text
            .lines()
            .skip(1)
            .filter(|l| l.split(',').nth(4).unwrap().starts_with("error"))
            .count();
        assert_eq!(failed, 2);
    }

    #[test]
    fn model_snapshots_round_trip_bit_for_bit() {
        let mut model = NeuralSdeModel::new(
            vec![SdeNets::new(&[5]).unwrap(), SdeNets::new(&[5]).unwrap()],
            vec![0.5, 1.0],
            Some(zeta_net(&[5]).unwrap()),
            Rho::Trainable(0.3),
            0.02,
            0.01,
        )
        .unwrap();
        model.init_glorot(1.5, &SeedTree::new(9));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        write_model(&path, &model).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(back.flat_params(), model.flat_params());
        assert_eq!(back.seg_ends, model.seg_ends);
        assert_eq!(back.rho, model.rho);
        assert!(back.zeta.is_some());

        let hedge = build_hedge(&[4], 3, &SeedTree::new(9)).unwrap();
        let hpath = dir.path().join("hedge.json");
        write_hedge(&hpath, &hedge).unwrap();
        assert_eq!(read_hedge(&hpath).unwrap().flat_params(), hedge.flat_params());
    }

    #[test]
    fn snapshot_prices_recover_the_flat_vol_surface() {
        let dir = tempfile::tempdir().unwrap();
        tiny_quotes(dir.path());
        let mut config = tiny_config(dir.path(), &dir.path().join("run"));
        config.hyper.epochs = 0;
        calibrate(&config).unwrap();
        let model = read_model(&dir.path().join("run/model.json")).unwrap();
        let rows =
            price_snapshot(&model, 1.0, 0.04, &[0.9, 1.0, 1.1], &[0.5, 1.0], 16, 4000, 3).unwrap();
        assert_eq!(rows.len(), 6);
        for row in &rows {
            assert!(row.price > 0.0 && row.price < 1.0, "{row:?}");
            assert!(row.stderr > 0.0);
        }
        let again =
            price_snapshot(&model, 1.0, 0.04, &[0.9, 1.0, 1.1], &[0.5, 1.0], 16, 4000, 3).unwrap();
        assert_eq!(rows, again, "same seed, same table");
    }
}
