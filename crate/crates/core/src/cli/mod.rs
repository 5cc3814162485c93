//! The `warpcov` command line: fitting, extremes, simulation and plots.
//!
//! Exit codes: 0 on success, 2 for bad input, configuration or files, 3 when
//! a fit did not converge or failed numerically. Non-converged models are
//! still written and flagged.

pub mod io;
mod marginal_cmd;
mod plot;
mod simulate_cmd;
mod warp_cmd;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::Error;
use crate::reml::OuterOptions;
use crate::tiling::FoldPenaltyKind;

pub use plot::{plot_fit_dir, semivariogram_svg};

/// Environment variable read by the binary for the log filter.
pub const LOG_ENV: &str = "WARPCOV_LOG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "warpcov", version, about = "Nonstationary spatial covariance by coordinate warping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the anisotropic (axis-scaled) model.
    FitAniso(FitAnisoArgs),
    /// Fit a spatial deformation, optionally with a fold penalty.
    FitDeform(FitDeformArgs),
    /// Fit a dimension-expansion model with `r` added dimensions.
    FitDimexp(FitDimexpArgs),
    /// Fit threshold and GPD surfaces to station rainfall.
    FitMarginal(FitMarginalArgs),
    /// Pairwise censored correlations, then anisotropic and deformation fits.
    FitDependence(FitDependenceArgs),
    /// Simulate an event catalog from a dependence model and marginals.
    Simulate(SimulateArgs),
    /// Draw SVG figures from a fit output directory.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Wide CSV: optional time column, one column per station id.
    #[arg(long)]
    pub data: PathBuf,
    /// Station CSV with id, lon, lat and optional covariate columns.
    #[arg(long)]
    pub stations: PathBuf,
    /// Remove a per-station linear trend in time before fitting.
    #[arg(long)]
    pub detrend: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Vertices per axis of the warped-grid export and fold tiling.
    #[arg(long, default_value_t = 20)]
    pub grid_nx: usize,
    #[arg(long, default_value_t = 20)]
    pub grid_ny: usize,
    /// Standard-error map extends this fraction beyond the station box.
    #[arg(long, default_value_t = 0.25)]
    pub se_margin: f64,
    /// Standard-error map resolution per axis.
    #[arg(long, default_value_t = 25)]
    pub se_n: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimizerArgs {
    /// Maximum outer (smoothing parameter) iterations.
    #[arg(long, default_value_t = 100)]
    pub max_outer_iter: usize,
    /// Lower and upper bound on log10 lambda.
    #[arg(long, default_value_t = -8.0, allow_hyphen_values = true)]
    pub log10_lambda_min: f64,
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    pub log10_lambda_max: f64,
}

impl OptimizerArgs {
    pub fn options(&self) -> OuterOptions {
        OuterOptions {
            max_iter: self.max_outer_iter,
            log10_lambda_bounds: (self.log10_lambda_min, self.log10_lambda_max),
            ..OuterOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldChoice {
    None,
    Strict,
    Near,
}

impl FoldChoice {
    pub fn kind(self) -> Option<FoldPenaltyKind> {
        match self {
            FoldChoice::None => None,
            FoldChoice::Strict => Some(FoldPenaltyKind::Strict),
            FoldChoice::Near => Some(FoldPenaltyKind::Near),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FoldArgs {
    #[arg(long, value_enum, default_value_t = FoldChoice::None)]
    pub fold_penalty: FoldChoice,
    /// `epsilon` as a fraction of the mean anisotropic warped cell area.
    #[arg(long, default_value_t = 0.1)]
    pub epsilon_frac: f64,
    #[arg(long, default_value_t = 1e6)]
    pub delta: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitAnisoArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitDeformArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    #[command(flatten)]
    pub fold: FoldArgs,
    /// Basis rank per warped coordinate, capped at stations - 1.
    #[arg(long, default_value_t = 10)]
    pub rank: usize,
    /// Anisotropic model file used as the start; fitted when absent.
    #[arg(long)]
    pub aniso: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitDimexpArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    /// Number of added dimensions.
    #[arg(long, default_value_t = 1)]
    pub r: usize,
    #[arg(long, default_value_t = 10)]
    pub rank: usize,
    #[arg(long)]
    pub aniso: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitMarginalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub stations: PathBuf,
    /// Station covariate column entering every surface.
    #[arg(long)]
    pub covariate: Option<String>,
    #[arg(long, default_value_t = 0.03)]
    pub zeta: f64,
    /// Thin plate rank of the spatial smooths; constant surfaces when absent.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Rank of the covariate smooth.
    #[arg(long, default_value_t = 5)]
    pub covariate_rank: usize,
    /// Check-loss smoothing bandwidth relative to the ALD scale.
    #[arg(long, default_value_t = crate::extremes::ald::DEFAULT_BANDWIDTH)]
    pub bandwidth: f64,
    /// Grid CSV (lon, lat, covariate) for the surface export.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Regular surface grid over the station box when no grid file is given.
    #[arg(long, default_value_t = 20)]
    pub grid_nx: usize,
    #[arg(long, default_value_t = 20)]
    pub grid_ny: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitDependenceArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub stations: PathBuf,
    #[arg(long)]
    pub covariate: Option<String>,
    /// Marginal model from fit-marginal.
    #[arg(long)]
    pub marginal: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub rank: usize,
    /// `T` in the Gaussian likelihood: the number of rows, or the effective
    /// sample size implied by the censored pairwise information.
    #[arg(long, value_enum, default_value_t = SampleSize::Rows)]
    pub sample_size: SampleSize,
    /// Distance bins of the empirical semivariance export.
    #[arg(long, default_value_t = crate::extremes::dependence::DEFAULT_BINS)]
    pub bins: usize,
    #[command(flatten)]
    pub fold: FoldArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleSize {
    Rows,
    Effective,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Dependence model file (model.json of any fit).
    #[arg(long)]
    pub model: PathBuf,
    /// Marginal model file.
    #[arg(long)]
    pub marginal: PathBuf,
    /// Grid CSV with lon, lat and optional area and covariate columns.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Covariate column of the grid file.
    #[arg(long)]
    pub covariate: Option<String>,
    /// Regular grid over the station box when no grid file is given.
    #[arg(long, default_value_t = 10)]
    pub nx: usize,
    #[arg(long, default_value_t = 10)]
    pub ny: usize,
    /// Number of simulated days.
    #[arg(long, conflicts_with = "years")]
    pub count: Option<usize>,
    /// Simulated seasons; each contributes --days-per-year events.
    #[arg(long)]
    pub years: Option<usize>,
    #[arg(long, default_value_t = crate::sim::DEFAULT_DAYS_PER_YEAR)]
    pub days_per_year: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub top_k: usize,
    #[arg(long, default_value_t = crate::sim::DEFAULT_MAX_POINTS)]
    pub max_points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlotArgs {
    /// Directory written by a fit command.
    #[arg(long)]
    pub fit: PathBuf,
    /// Where to write the SVGs; the fit directory when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// How a command finished when it did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Outputs written, but at least one fit did not converge.
    NotConverged,
}

impl Status {
    pub fn and(self, other: Status) -> Status {
        if self == Status::Ok { other } else { self }
    }

    pub fn from_converged(converged: bool) -> Status {
        if converged { Status::Ok } else { Status::NotConverged }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidInput(_) | Error::InvalidConfig(_) | Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => {
            EXIT_INPUT
        }
        Error::NotPositiveDefinite(_)
        | Error::RankDeficient(_)
        | Error::NonDifferentiable(_)
        | Error::Contract(_)
        | Error::Convergence(_) => EXIT_NUMERICAL,
    }
}

pub fn execute(command: &Command) -> crate::Result<Status> {
    match command {
        Command::FitAniso(a) => warp_cmd::fit_aniso(a),
        Command::FitDeform(a) => warp_cmd::fit_deform(a),
        Command::FitDimexp(a) => warp_cmd::fit_dimexp(a),
        Command::FitMarginal(a) => marginal_cmd::fit_marginal(a),
        Command::FitDependence(a) => marginal_cmd::fit_dependence(a),
        Command::Simulate(a) => simulate_cmd::simulate(a),
        Command::Plot(a) => plot::plot(a),
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    io::set_invocation(args.iter().map(|a| a.to_string_lossy().into_owned()).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(Status::Ok) => EXIT_OK,
        Ok(Status::NotConverged) => {
            log::error!("fit did not converge; outputs are flagged");
            EXIT_NUMERICAL
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Data("x".into())), EXIT_INPUT);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), EXIT_INPUT);
        assert_eq!(exit_code(&Error::Convergence("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::NotPositiveDefinite("x".into())), EXIT_NUMERICAL);
    }

    #[test]
    fn parses_fit_deform_defaults() {
        let cli = Cli::try_parse_from(["warpcov", "fit-deform", "--data", "d.csv", "--stations", "s.csv", "--out", "o"]).unwrap();
        let Command::FitDeform(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(a.rank, 10);
        assert_eq!(a.fold.fold_penalty, FoldChoice::None);
        assert_eq!(a.fold.epsilon_frac, 0.1);
        assert_eq!(a.fold.delta, 1e6);
    }

    #[test]
    fn bad_flags_exit_two() {
        assert_eq!(run(["warpcov", "fit-deform", "--fold-penalty", "sometimes"]), EXIT_INPUT);
        assert_eq!(run(["warpcov", "plot", "--fit", "/nonexistent/dir"]), EXIT_INPUT);
    }
}
