//! CSV ingestion, synthetic generators, model files and plot tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::artifact::{HrvmModel, IterationRecord, Method, NoiseModel};
use crate::error::{HrvmError, Result};
use crate::model::{BasisFunction, Dataset, GpNoisePrior, KernelSpec, Standardization};
use crate::predict::PredictiveDist;
use crate::rvm::FitStatus;
use crate::vi::WeightPosterior;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Header name or zero-based index of the target column; the last
    /// column when `None`.
    pub target_column: Option<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            has_header: true,
            target_column: None,
        }
    }
}

/// Reads a numeric CSV file. Row numbers in errors count data rows from 1.
pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path)
        .map_err(|e| HrvmError::Data(format!("cannot open {}: {e}", path.display())))?;
    parse_csv(file, options)
}

pub fn parse_csv<R: std::io::Read>(reader: R, options: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(options.has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Option<Vec<String>> = if options.has_header {
        let h = rdr
            .headers()
            .map_err(|e| HrvmError::Data(format!("header: {e}")))?;
        Some(h.iter().map(str::to_string).collect())
    } else {
        None
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            HrvmError::Data(format!("row {row} (line {line}): {e}"))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let vals = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        HrvmError::Data(format!(
                            "row {row} (line {line}), column {}: `{cell}` is not a finite number",
                            c + 1
                        ))
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(HrvmError::Data("dataset is empty".into()));
    }
    let width = rows[0].len();
    if width < 2 {
        return Err(HrvmError::Data(
            "need at least one feature column and a target column".into(),
        ));
    }
    let target = match &options.target_column {
        None => width - 1,
        Some(name) => match headers
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
        {
            Some(idx) => idx,
            None => name
                .parse::<usize>()
                .ok()
                .filter(|&i| i < width)
                .ok_or_else(|| HrvmError::Data(format!("target column `{name}` not found")))?,
        },
    };
    let n = rows.len();
    let mut x = DMatrix::zeros(n, width - 1);
    let mut y = DVector::zeros(n);
    for (i, r) in rows.iter().enumerate() {
        let mut c = 0;
        for (j, v) in r.iter().enumerate() {
            if j == target {
                y[i] = *v;
            } else {
                x[(i, c)] = *v;
                c += 1;
            }
        }
    }
    Dataset::new(x, y)
}

/// Writes `x1,...,xQ,y` with a header.
pub fn write_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut out = String::new();
    let names: Vec<String> = (1..=data.q())
        .map(|j| format!("x{j}"))
        .chain(["y".to_string()])
        .collect();
    writeln!(out, "{}", names.join(",")).unwrap();
    for i in 0..data.n() {
        let row: Vec<String> = data
            .row(i)
            .iter()
            .chain([data.y[i]].iter())
            .map(|v| format!("{v:?}"))
            .collect();
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// `x ~ U[0,1]`, `y = 2 sin(2πx) + ε`, `sd(ε) = 0.5 + x`.
    GoldbergSine,
    /// `x ~ U[0,1]`, `y = x + ε`, `sd(ε) = 0.1 + 0.4x`.
    LinearHet,
    /// `x ~ U[0,2π]`, `y = sin(x) + ε`, `sd(ε) = sigma`.
    ConstNoise,
}

impl std::str::FromStr for Generator {
    type Err = HrvmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "goldberg_sine" => Ok(Generator::GoldbergSine),
            "linear_het" => Ok(Generator::LinearHet),
            "const_noise" => Ok(Generator::ConstNoise),
            other => Err(HrvmError::InvalidParameter(format!(
                "unknown generator `{other}` (expected goldberg_sine, linear_het or const_noise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub generator: Generator,
    pub n: usize,
    pub seed: u64,
    /// Noise sd for `const_noise`.
    pub sigma: f64,
}

impl SynthSpec {
    pub fn new(generator: Generator, n: usize, seed: u64) -> Self {
        SynthSpec {
            generator,
            n,
            seed,
            sigma: 0.3,
        }
    }
}

/// Draws a synthetic dataset and the true per-point noise sd.
pub fn synth(spec: &SynthSpec) -> Result<(Dataset, DVector<f64>)> {
    if spec.n < 3 {
        return Err(HrvmError::InvalidParameter(format!(
            "synthetic sets need n >= 3, got {}",
            spec.n
        )));
    }
    if spec.generator == Generator::ConstNoise && !(spec.sigma > 0.0 && spec.sigma.is_finite()) {
        return Err(HrvmError::InvalidParameter(format!(
            "sigma must be positive, got {}",
            spec.sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = Vec::with_capacity(spec.n);
    let mut y = Vec::with_capacity(spec.n);
    let mut sd = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let u: f64 = rng.random();
        let e: f64 = StandardNormal.sample(&mut rng);
        let (xi, fi, si) = match spec.generator {
            Generator::GoldbergSine => (u, 2.0 * (2.0 * std::f64::consts::PI * u).sin(), 0.5 + u),
            Generator::LinearHet => (u, u, 0.1 + 0.4 * u),
            Generator::ConstNoise => {
                let xi = 2.0 * std::f64::consts::PI * u;
                (xi, xi.sin(), spec.sigma)
            }
        };
        x.push(xi);
        y.push(fi + si * e);
        sd.push(si);
    }
    Ok((Dataset::from_1d(&x, &y)?, DVector::from_vec(sd)))
}

/// Training and held-out sets for `seed`; the held-out draws use a
/// disjoint seed stream.
pub fn synth_split(
    generator: Generator,
    n_train: usize,
    n_test: usize,
    seed: u64,
    sigma: f64,
) -> Result<(Dataset, Dataset)> {
    let (train, _) = synth(&SynthSpec {
        generator,
        n: n_train,
        seed,
        sigma,
    })?;
    let (test, _) = synth(&SynthSpec {
        generator,
        n: n_test,
        seed: seed ^ HELD_OUT_STREAM,
        sigma,
    })?;
    Ok((train, test))
}

const HELD_OUT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Noiseless regression function of a generator.
pub fn true_function(generator: Generator, x: f64) -> f64 {
    match generator {
        Generator::GoldbergSine => 2.0 * (2.0 * std::f64::consts::PI * x).sin(),
        Generator::LinearHet => x,
        Generator::ConstNoise => x.sin(),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
    method: Method,
    kernel: KernelSpec,
    basis: Vec<BasisFunction>,
    alpha: Vec<f64>,
    weights: WeightsDoc,
    noise: NoiseDoc,
    standardization: Standardization,
    status: FitStatus,
    training_log: Vec<IterationRecord>,
    fit_log: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsDoc {
    mu_w: Vec<f64>,
    sigma_w: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum NoiseDoc {
    Constant {
        log_variance: f64,
    },
    Process {
        prior: GpNoisePrior,
        inputs: Vec<Vec<f64>>,
        mean_weights: Vec<f64>,
        precision_correction: Vec<Vec<f64>>,
        train_mean: Vec<f64>,
        train_var: Vec<f64>,
    },
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>], cols: Option<usize>, path: &str) -> Result<DMatrix<f64>> {
    let c = cols.unwrap_or_else(|| rows.first().map_or(0, Vec::len));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != c {
            return Err(HrvmError::Schema {
                path: format!("{path}[{i}]"),
                message: format!("expected {c} entries, found {}", r.len()),
            });
        }
    }
    Ok(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

fn schema(path: &str, message: impl Into<String>) -> HrvmError {
    HrvmError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

/// JSON text of a model, optionally embedding the resolved run config.
pub fn model_to_json(model: &HrvmModel, config: Option<serde_json::Value>) -> Result<String> {
    let noise = match &model.noise {
        NoiseModel::Constant { log_variance } => NoiseDoc::Constant {
            log_variance: *log_variance,
        },
        NoiseModel::Process {
            prior,
            inputs,
            mean_weights,
            precision_correction,
            train_mean,
            train_var,
        } => NoiseDoc::Process {
            prior: prior.clone(),
            inputs: rows_of(inputs),
            mean_weights: mean_weights.as_slice().to_vec(),
            precision_correction: rows_of(precision_correction),
            train_mean: train_mean.as_slice().to_vec(),
            train_var: train_var.as_slice().to_vec(),
        },
    };
    let doc = ModelDocument {
        format: "hrvm-model".into(),
        version: FORMAT_VERSION,
        config,
        method: model.method,
        kernel: model.kernel.clone(),
        basis: model.basis.clone(),
        alpha: model.alpha.clone(),
        weights: WeightsDoc {
            mu_w: model.weights.mu_w.as_slice().to_vec(),
            sigma_w: rows_of(&model.weights.sigma_w),
        },
        noise,
        standardization: model.standardization.clone(),
        status: model.status,
        training_log: model.training_log.clone(),
        fit_log: model.fit_log.clone(),
    };
    serde_json::to_string_pretty(&doc)
        .map_err(|e| HrvmError::Numeric(format!("cannot encode model: {e}")))
}

/// Parses a model document; the embedded config, if any, is returned alongside.
pub fn model_from_json(text: &str) -> Result<(HrvmModel, Option<serde_json::Value>)> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| schema("$", e.to_string()))?;
    match value.get("version") {
        Some(v) => {
            let found = v
                .as_u64()
                .ok_or_else(|| schema("version", "expected an unsigned integer"))?;
            if found != FORMAT_VERSION as u64 {
                return Err(HrvmError::Version {
                    found: found.min(u32::MAX as u64) as u32,
                    expected: FORMAT_VERSION,
                });
            }
        }
        None => return Err(schema("version", "missing field")),
    }
    let doc: ModelDocument = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        schema(&path, e.into_inner().to_string())
    })?;
    if doc.format != "hrvm-model" {
        return Err(schema(
            "format",
            format!("expected `hrvm-model`, found `{}`", doc.format),
        ));
    }
    let m = doc.basis.len();
    if doc.alpha.len() != m {
        return Err(schema(
            "alpha",
            format!("{} precisions for {m} basis functions", doc.alpha.len()),
        ));
    }
    if doc.weights.mu_w.len() != m {
        return Err(schema(
            "weights.mu_w",
            format!("{} weights for {m} basis functions", doc.weights.mu_w.len()),
        ));
    }
    if doc.weights.sigma_w.len() != m {
        return Err(schema("weights.sigma_w", format!("expected {m} rows")));
    }
    let sigma_w = matrix_of(&doc.weights.sigma_w, Some(m), "weights.sigma_w")?;
    let noise = match doc.noise {
        NoiseDoc::Constant { log_variance } => NoiseModel::Constant { log_variance },
        NoiseDoc::Process {
            prior,
            inputs,
            mean_weights,
            precision_correction,
            train_mean,
            train_var,
        } => {
            let n = inputs.len();
            let inputs = matrix_of(&inputs, None, "noise.inputs")?;
            for (name, len) in [
                ("noise.mean_weights", mean_weights.len()),
                ("noise.train_mean", train_mean.len()),
                ("noise.train_var", train_var.len()),
            ] {
                if len != n {
                    return Err(schema(name, format!("expected {n} entries, found {len}")));
                }
            }
            if precision_correction.len() != n {
                return Err(schema(
                    "noise.precision_correction",
                    format!("expected {n} rows"),
                ));
            }
            NoiseModel::Process {
                prior,
                inputs,
                mean_weights: DVector::from_vec(mean_weights),
                precision_correction: matrix_of(
                    &precision_correction,
                    Some(n),
                    "noise.precision_correction",
                )?,
                train_mean: DVector::from_vec(train_mean),
                train_var: DVector::from_vec(train_var),
            }
        }
    };
    let model = HrvmModel {
        method: doc.method,
        kernel: doc.kernel,
        basis: doc.basis,
        alpha: doc.alpha,
        weights: WeightPosterior {
            mu_w: DVector::from_vec(doc.weights.mu_w),
            sigma_w,
        },
        noise,
        standardization: doc.standardization,
        training_log: doc.training_log,
        status: doc.status,
        fit_log: doc.fit_log,
    };
    Ok((model, doc.config))
}

pub fn save_model(model: &HrvmModel, path: impl AsRef<Path>) -> Result<()> {
    save_model_with_config(model, None, path)
}

pub fn save_model_with_config(
    model: &HrvmModel,
    config: Option<serde_json::Value>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let text = model_to_json(model, config)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<HrvmModel> {
    let text = fs::read_to_string(path)?;
    Ok(model_from_json(&text)?.0)
}

/// TSV plot table for 1-D inputs: `x y_true pred_mean pred_sd_total
/// pred_sd_latent noise_sd`. `y_true` may be the noiseless function or the
/// observed targets.
pub fn plot_table(x: &[f64], y_true: &[f64], pred: &PredictiveDist) -> Result<String> {
    if x.len() != pred.len() || y_true.len() != pred.len() {
        return Err(HrvmError::Dimension(format!(
            "{} inputs, {} targets, {} predictions",
            x.len(),
            y_true.len(),
            pred.len()
        )));
    }
    let noise = pred.noise_sd();
    let mut out = String::from("x\ty_true\tpred_mean\tpred_sd_total\tpred_sd_latent\tnoise_sd\n");
    for i in 0..x.len() {
        writeln!(
            out,
            "{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
            x[i],
            y_true[i],
            pred.latent_mean[i],
            pred.total_var[i].sqrt(),
            pred.latent_var[i].sqrt(),
            noise[i]
        )
        .unwrap();
    }
    Ok(out)
}
