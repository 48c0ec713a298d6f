//! Command-line front end: `train`, `predict`, `evaluate`, `synth` and
//! `benchmark`.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::artifact::{HrvmModel, Method};
use crate::ep::{fit_ep, EpConfig};
use crate::error::HrvmError;
use crate::io::{
    load_csv, model_from_json, save_model_with_config, synth, synth_split, write_csv, CsvOptions,
    Generator, SynthSpec,
};
use crate::model::{Dataset, KernelFamily, KernelSpec};
use crate::predict::{nlpd, predict, rmse};
use crate::rvm::{fit_rvm, RvmConfig};
use crate::vi::{fit_vi, ViConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "hrvm",
    version,
    about = "Heteroscedastic relevance vector machine"
)]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Fit a model to a CSV file and write it as JSON.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        fit: FitArgs,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict at the rows of a CSV file and write a TSV table.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CSV of inputs; a target column, if named, is copied to `y_true`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        no_header: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report RMSE, NLPD and the basis count of a model on labelled data.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Report file; standard output when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Draw a synthetic dataset.
    Synth {
        #[arg(long, value_enum, default_value_t = GeneratorArg::GoldbergSine)]
        generator: GeneratorArg,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Noise sd of `const-noise`.
        #[arg(long, default_value_t = 0.3)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of the true noise sd per row.
        #[arg(long)]
        truth_out: Option<PathBuf>,
    },
    /// Fit rvm, vi and ep over a list of seeds on a synthetic problem.
    Benchmark {
        #[arg(long, value_enum, default_value_t = GeneratorArg::GoldbergSine)]
        generator: GeneratorArg,
        /// Training points per seed.
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Held-out points per seed.
        #[arg(long, default_value_t = 100)]
        test_n: usize,
        /// Number of seeds, 0..seeds.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 0.3)]
        sigma: f64,
        #[command(flatten)]
        kernel: KernelArgs,
        #[command(flatten)]
        trainer: TrainerArgs,
        /// Report file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorArg {
    GoldbergSine,
    LinearHet,
    ConstNoise,
}

impl From<GeneratorArg> for Generator {
    fn from(g: GeneratorArg) -> Self {
        match g {
            GeneratorArg::GoldbergSine => Generator::GoldbergSine,
            GeneratorArg::LinearHet => Generator::LinearHet,
            GeneratorArg::ConstNoise => Generator::ConstNoise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Rvm,
    Vi,
    Ep,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Rvm => Method::Rvm,
            MethodArg::Vi => Method::Vi,
            MethodArg::Ep => Method::Ep,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelArg {
    Rbf,
    Linear,
    Polynomial,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Input CSV file.
    #[arg(long)]
    pub data: PathBuf,
    /// Target column by header name or zero-based index (default: last).
    #[arg(long)]
    pub target: Option<String>,
    /// The CSV has no header row.
    #[arg(long)]
    pub no_header: bool,
}

impl DataArgs {
    fn options(&self) -> CsvOptions {
        CsvOptions {
            has_header: !self.no_header,
            target_column: self.target.clone(),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KernelArgs {
    #[arg(long, value_enum, default_value_t = KernelArg::Rbf)]
    pub kernel: KernelArg,
    /// Rbf lengthscale in standardized input units.
    #[arg(long, default_value_t = 1.0)]
    pub lengthscale: f64,
    #[arg(long, default_value_t = 2)]
    pub degree: u32,
    /// Drop the constant basis function.
    #[arg(long)]
    pub no_bias: bool,
}

impl KernelArgs {
    pub fn spec(&self) -> KernelSpec {
        let family = match self.kernel {
            KernelArg::Rbf => KernelFamily::Rbf,
            KernelArg::Linear => KernelFamily::Linear,
            KernelArg::Polynomial => KernelFamily::Polynomial,
        };
        KernelSpec {
            family,
            lengthscale: self.lengthscale,
            degree: self.degree,
            include_bias: !self.no_bias,
            signal_variance: 1.0,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainerArgs {
    /// Outer iterations (rvm, vi) or EP passes (ep); trainer default when absent.
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 1e12)]
    pub alpha_threshold: f64,
    /// EP damping on site natural parameters.
    #[arg(long, default_value_t = 0.8)]
    pub damping: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fit in raw units instead of standardized ones.
    #[arg(long)]
    pub no_standardize: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Vi)]
    pub method: MethodArg,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub trainer: TrainerArgs,
}

/// Fits `method` with the trainer settings; shared by `train` and `benchmark`.
pub fn fit(
    method: Method,
    data: &Dataset,
    kernel: &KernelSpec,
    t: &TrainerArgs,
) -> crate::Result<HrvmModel> {
    let standardize = !t.no_standardize;
    match method {
        Method::Rvm => {
            let d = RvmConfig::default();
            let cfg = RvmConfig {
                max_iter: t.max_iter.unwrap_or(d.max_iter),
                tol: t.tol.unwrap_or(d.tol),
                alpha_threshold: t.alpha_threshold,
                standardize,
                ..d
            };
            Ok(fit_rvm(data, kernel, &cfg)?.into())
        }
        Method::Vi => {
            let d = ViConfig::default();
            let cfg = ViConfig {
                max_iter: t.max_iter.unwrap_or(d.max_iter),
                tol: t.tol.unwrap_or(d.tol),
                alpha_threshold: t.alpha_threshold,
                standardize,
                seed: t.seed,
                ..d
            };
            fit_vi(data, kernel, &cfg)
        }
        Method::Ep => {
            let d = EpConfig::default();
            let cfg = EpConfig {
                max_passes: t.max_iter.unwrap_or(d.max_passes),
                tol: t.tol.unwrap_or(d.tol),
                alpha_threshold: t.alpha_threshold,
                damping: t.damping,
                standardize,
                seed: t.seed,
                noise_prior: None,
            };
            fit_ep(data, kernel, &cfg)
        }
    }
}

/// Failure of one stage, carrying the exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

fn stage(name: &str) -> impl Fn(HrvmError) -> CliError + '_ {
    move |e| {
        let code = match &e {
            HrvmError::InvalidParameter(_) => EXIT_USAGE,
            HrvmError::NotPositiveDefinite { .. }
            | HrvmError::Numeric(_)
            | HrvmError::NonFinite(_) => EXIT_NUMERIC,
            HrvmError::Dimension(_)
            | HrvmError::Data(_)
            | HrvmError::Version { .. }
            | HrvmError::Schema { .. }
            | HrvmError::Io(_) => EXIT_DATA,
        };
        CliError {
            code,
            message: format!("{name}: {e}"),
        }
    }
}

fn write_out(path: &Path, text: &str, what: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("{what}: cannot write {}: {e}", path.display()),
    })
}

fn config_json(config: &RunConfig) -> serde_json::Value {
    serde_json::to_value(config).expect("run config serializes")
}

fn load_model_file(path: &Path) -> Result<HrvmModel, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("loading model: cannot read {}: {e}", path.display()),
    })?;
    Ok(model_from_json(&text).map_err(stage("loading model"))?.0)
}

/// Runs a parsed command line.
pub fn run(config: &RunConfig) -> Result<(), CliError> {
    let echo = config_json(config);
    let echo_line = format!("# config: {echo}\n");
    match &config.command {
        Command::Train { data, fit: f, out } => {
            let ds = load_csv(&data.data, &data.options()).map_err(stage("loading data"))?;
            let kernel = f.kernel.spec();
            kernel.validate().map_err(stage("kernel"))?;
            let model =
                fit(f.method.into(), &ds, &kernel, &f.trainer).map_err(stage("training"))?;
            save_model_with_config(&model, Some(echo), out).map_err(stage("writing model"))?;
        }
        Command::Predict {
            model,
            data,
            target,
            no_header,
            out,
        } => {
            let m = load_model_file(model)?;
            let q = m.standardization.x_mean.len();
            let (x, y) = read_inputs(data, target.as_deref(), !*no_header, q)
                .map_err(stage("loading data"))?;
            let pred = predict(&m, &x).map_err(stage("predicting"))?;
            let noise = pred.noise_sd();
            let mut text = echo_line;
            let xnames: Vec<String> = if q == 1 {
                vec!["x".into()]
            } else {
                (1..=q).map(|j| format!("x{j}")).collect()
            };
            let mut header = xnames.join("\t");
            if y.is_some() {
                header.push_str("\ty_true");
            }
            header.push_str("\tpred_mean\tpred_sd_total\tpred_sd_latent\tnoise_sd");
            writeln!(text, "{header}").unwrap();
            for i in 0..x.nrows() {
                let mut cells: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
                if let Some(y) = &y {
                    cells.push(format!("{:?}", y[i]));
                }
                cells.push(format!("{:?}", pred.latent_mean[i]));
                cells.push(format!("{:?}", pred.total_var[i].sqrt()));
                cells.push(format!("{:?}", pred.latent_var[i].sqrt()));
                cells.push(format!("{:?}", noise[i]));
                writeln!(text, "{}", cells.join("\t")).unwrap();
            }
            write_out(out, &text, "writing predictions")?;
        }
        Command::Evaluate {
            model,
            data,
            report,
        } => {
            let m = load_model_file(model)?;
            let ds = load_csv(&data.data, &data.options()).map_err(stage("loading data"))?;
            let pred = predict(&m, &ds.x).map_err(stage("predicting"))?;
            let e_rmse = rmse(&pred.latent_mean, &ds.y).map_err(stage("scoring"))?;
            let e_nlpd = nlpd(&pred, &ds.y).map_err(stage("scoring"))?;
            let mut text = String::new();
            writeln!(text, "config={echo}").unwrap();
            writeln!(text, "method={}", m.method.as_str()).unwrap();
            writeln!(text, "n={}", ds.n()).unwrap();
            writeln!(text, "rmse={e_rmse:?}").unwrap();
            writeln!(text, "nlpd={e_nlpd:?}").unwrap();
            writeln!(text, "active_basis={}", m.active_count()).unwrap();
            writeln!(
                text,
                "status={}",
                serde_json::to_value(m.status)
                    .unwrap()
                    .as_str()
                    .unwrap_or("")
            )
            .unwrap();
            emit(report.as_deref(), &text)?;
        }
        Command::Synth {
            generator,
            n,
            seed,
            sigma,
            out,
            truth_out,
        } => {
            let spec = SynthSpec {
                generator: (*generator).into(),
                n: *n,
                seed: *seed,
                sigma: *sigma,
            };
            let (ds, sd) = synth(&spec).map_err(stage("generating"))?;
            write_csv(out, &ds).map_err(stage("writing data"))?;
            if let Some(path) = truth_out {
                let mut text = String::from("x,noise_sd\n");
                for i in 0..ds.n() {
                    writeln!(text, "{:?},{:?}", ds.x[(i, 0)], sd[i]).unwrap();
                }
                write_out(path, &text, "writing truth")?;
            }
        }
        Command::Benchmark {
            generator,
            n,
            test_n,
            seeds,
            sigma,
            kernel,
            trainer,
            out,
        } => {
            let spec = kernel.spec();
            spec.validate().map_err(stage("kernel"))?;
            let gen: Generator = (*generator).into();
            let rows: Vec<Result<Vec<BenchRow>, CliError>> = (0..*seeds)
                .into_par_iter()
                .map(|seed| bench_seed(gen, *n, *test_n, *sigma, seed, &spec, trainer))
                .collect();
            let mut text = String::new();
            writeln!(text, "config={echo}").unwrap();
            writeln!(text, "method\tseed\trmse\tnlpd\tactive_basis\tstatus").unwrap();
            for r in rows {
                for row in r? {
                    writeln!(
                        text,
                        "{}\t{}\t{:?}\t{:?}\t{}\t{}",
                        row.method, row.seed, row.rmse, row.nlpd, row.active, row.status
                    )
                    .unwrap();
                }
            }
            emit(out.as_deref(), &text)?;
        }
    }
    Ok(())
}

struct BenchRow {
    method: &'static str,
    seed: u64,
    rmse: f64,
    nlpd: f64,
    active: usize,
    status: String,
}

fn bench_seed(
    gen: Generator,
    n: usize,
    test_n: usize,
    sigma: f64,
    seed: u64,
    kernel: &KernelSpec,
    trainer: &TrainerArgs,
) -> Result<Vec<BenchRow>, CliError> {
    let (train, test) = synth_split(gen, n, test_n, seed, sigma).map_err(stage("generating"))?;
    let t = TrainerArgs {
        seed,
        ..trainer.clone()
    };
    [Method::Rvm, Method::Vi, Method::Ep]
        .into_iter()
        .map(|method| {
            let model = fit(method, &train, kernel, &t).map_err(stage(&format!(
                "training {} (seed {seed})",
                method.as_str()
            )))?;
            let pred = predict(&model, &test.x).map_err(stage("predicting"))?;
            Ok(BenchRow {
                method: method.as_str(),
                seed,
                rmse: rmse(&pred.latent_mean, &test.y).map_err(stage("scoring"))?,
                nlpd: nlpd(&pred, &test.y).map_err(stage("scoring"))?,
                active: model.active_count(),
                status: serde_json::to_value(model.status)
                    .unwrap()
                    .as_str()
                    .unwrap_or("")
                    .to_string(),
            })
        })
        .collect()
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write_out(p, text, "writing report"),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_inputs(
    path: &Path,
    target: Option<&str>,
    has_header: bool,
    q: usize,
) -> crate::Result<(nalgebra::DMatrix<f64>, Option<DVector<f64>>)> {
    if target.is_some() {
        let ds = load_csv(
            path,
            &CsvOptions {
                has_header,
                target_column: target.map(str::to_string),
            },
        )?;
        return Ok((ds.x, Some(ds.y)));
    }
    // no target: every column is an input; parse with a dummy target column
    let text = fs::read_to_string(path)
        .map_err(|e| HrvmError::Data(format!("cannot open {}: {e}", path.display())))?;
    let padded: String = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            if i == 0 && has_header {
                format!("{l},__target\n")
            } else {
                format!("{l},0\n")
            }
        })
        .collect();
    let ds = crate::io::parse_csv(
        padded.as_bytes(),
        &CsvOptions {
            has_header,
            target_column: None,
        },
    )?;
    if ds.q() != q {
        return Err(HrvmError::Dimension(format!(
            "inputs have {} columns, model expects {q}",
            ds.q()
        )));
    }
    Ok((ds.x, None))
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let config = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&config) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
