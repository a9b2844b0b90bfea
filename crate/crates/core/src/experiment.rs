//! Experiment configuration, the runner, and report emission.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coupling::ParticleCoupling;
use crate::error::{Error, Result};
use crate::integrate::IntegratorConfig;
use crate::ot;
use crate::rectify::{
    baseline_cost, smoothed_rectify_iterate, Baseline, FieldSource, IterationConfig, KernelSettings,
    NoiseSchedule, StepRecord, DEFAULT_LOSS_TIME_SAMPLES,
};
use crate::rng;
use crate::scenario::{build_scenario, sample_marginals, ScenarioSpec, ScenarioSummary};

pub const SCHEMA_VERSION: u32 = 1;

/// Column order of the CSV report.
pub const CSV_HEADER: &str = "step,c_i,loss,transport_cost,transport_distance,energy_mu0,energy_mu1";

/// Which field drives the first step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldChoice {
    /// The scenario's exact field when it has one, the kernel estimator otherwise.
    #[default]
    Auto,
    ClosedForm,
    Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineChoice {
    /// `quantile_1d` in one dimension, `discrete_exact` up to the solver's size
    /// limit, `gaussian_closed_form` beyond.
    #[default]
    Auto,
    None,
    DiscreteExact,
    GaussianClosedForm,
    Quantile1d,
}

impl BaselineChoice {
    pub fn resolve(self, n: usize, d: usize) -> Option<Baseline> {
        match self {
            BaselineChoice::Auto if d == 1 => Some(Baseline::Quantile1d),
            BaselineChoice::Auto if n <= ot::MAX_EXACT_POINTS => Some(Baseline::DiscreteExact),
            BaselineChoice::Auto => Some(Baseline::GaussianClosedForm),
            BaselineChoice::None => None,
            BaselineChoice::DiscreteExact => Some(Baseline::DiscreteExact),
            BaselineChoice::GaussianClosedForm => Some(Baseline::GaussianClosedForm),
            BaselineChoice::Quantile1d => Some(Baseline::Quantile1d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricToggles {
    pub energy: bool,
    pub null_test: bool,
    pub baseline: BaselineChoice,
}

impl Default for MetricToggles {
    fn default() -> Self {
        MetricToggles {
            energy: true,
            null_test: false,
            baseline: BaselineChoice::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    /// From the file extension, JSON unless it is `.csv`.
    pub fn from_path(path: &Path) -> ReportFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::Config(format!("unknown report format '{s}' (expected json or csv)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Standard output when absent.
    pub path: Option<PathBuf>,
    /// Inferred from `path` when absent.
    pub format: Option<ReportFormat>,
}

impl OutputConfig {
    pub fn resolved_format(&self) -> ReportFormat {
        self.format
            .or_else(|| self.path.as_deref().map(ReportFormat::from_path))
            .unwrap_or(ReportFormat::Json)
    }
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn one() -> usize {
    1
}

fn loss_samples() -> usize {
    DEFAULT_LOSS_TIME_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub scenario: ScenarioSpec,
    pub n_particles: usize,
    /// Number of rectification steps `K`.
    #[serde(default = "one")]
    pub steps: usize,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub field: FieldChoice,
    #[serde(default)]
    pub kernel: KernelSettings,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    /// SDE noise level, `0` for the ODE.
    #[serde(default)]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "loss_samples")]
    pub loss_time_samples: usize,
    #[serde(default)]
    pub metrics: MetricToggles,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn new(scenario: ScenarioSpec, n_particles: usize) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            scenario,
            n_particles,
            steps: 1,
            schedule: NoiseSchedule::default(),
            field: FieldChoice::Auto,
            kernel: KernelSettings::default(),
            integrator: IntegratorConfig::default(),
            eps: 0.0,
            seed: 0,
            loss_time_samples: DEFAULT_LOSS_TIME_SAMPLES,
            metrics: MetricToggles::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.scenario.validate()?;
        if self.n_particles == 0 {
            return Err(Error::Config("n_particles must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.loss_time_samples == 0 {
            return Err(Error::Config("loss_time_samples must be >= 1".into()));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps {} must be finite and >= 0", self.eps)));
        }
        self.integrator.validate()?;
        self.schedule.values(self.steps)?;
        Ok(())
    }
}

/// Set `key` (dot separated, e.g. `schedule.harmonic`) in a JSON document.
/// Missing intermediate objects are created.
pub fn set_dotted(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut node = doc;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::Config(format!("malformed key '{key}'")));
        }
        let obj = match node {
            Value::Object(m) => m,
            // a scalar or unit variant is replaced by the nested object
            other => {
                *other = Value::Object(Default::default());
                other.as_object_mut().unwrap()
            }
        };
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config("empty key".into()))
}

/// `config` with `key` set to `value`. When the key names an enum variant
/// (`schedule.harmonic` while the schedule is constant) the old variant is
/// dropped.
pub fn override_config(config: &ExperimentConfig, key: &str, value: Value) -> Result<ExperimentConfig> {
    let mut doc = config.to_value();
    set_dotted(&mut doc, key, value.clone())?;
    match ExperimentConfig::from_value(doc) {
        Ok(c) => Ok(c),
        Err(first) => {
            let (parent, leaf) = key.rsplit_once('.').ok_or(first)?;
            let mut doc = config.to_value();
            set_dotted(&mut doc, parent, Value::Object([(leaf.to_string(), value)].into_iter().collect()))?;
            ExperimentConfig::from_value(doc)
        }
    }
}

/// A command-line value as JSON, falling back to a plain string.
pub fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub scenario: u64,
    pub iteration: u64,
    pub reference: u64,
}

impl Seeds {
    pub fn from_master(seed: u64) -> Self {
        Seeds {
            scenario: seed,
            iteration: rng::derive_seed(seed, 1),
            reference: rng::derive_seed(seed, 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub scenario: ScenarioSummary,
    pub dim: usize,
    /// Field used while the coupling stays a fixed point.
    pub field: String,
    pub initial_cost: f64,
    pub initial_distance: f64,
    pub v1: f64,
    pub baseline: Option<Baseline>,
    pub baseline_cost: Option<f64>,
    /// `min_{i <= k} L^i` per step.
    pub min_loss: Vec<f64>,
    /// Smoothed-rectification loss bound per step.
    pub bound: Vec<f64>,
    pub abort_reason: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub meta: ReportMeta,
    pub steps: Vec<StepRecord>,
    pub aborted_at: Option<usize>,
}

impl ExperimentReport {
    pub fn is_partial(&self) -> bool {
        self.aborted_at.is_some()
    }

    pub fn final_record(&self) -> Option<&StepRecord> {
        self.steps.last()
    }
}

/// Report, final coupling, and the error that stopped the iteration if any.
#[derive(Debug)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub coupling: ParticleCoupling,
    pub error: Option<Error>,
}

/// Build the scenario, iterate, and collect metrics. Errors before the first
/// step are returned; errors during the iteration yield a partial report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRun> {
    config.validate()?;
    let seeds = Seeds::from_master(config.seed);
    let n = config.n_particles;
    let (coupling, meta) = build_scenario(&config.scenario, n, seeds.scenario)?;
    let d = coupling.dim();

    let field = match (config.field, &meta.field) {
        (FieldChoice::Kernel, _) | (FieldChoice::Auto, None) => FieldSource::Kernel(config.kernel.clone()),
        (_, Some(f)) => f.clone(),
        (FieldChoice::ClosedForm, None) => {
            return Err(Error::Config(format!(
                "scenario '{}' has no closed-form field",
                config.scenario.name.as_str()
            )))
        }
    };

    let (reference0, reference1) = if config.metrics.energy {
        let m = n.min(ot::energy::MAX_POINTS);
        match sample_marginals(&config.scenario, m, seeds.reference)? {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        }
    } else {
        (None, None)
    };

    let baseline = config.metrics.baseline.resolve(n, d);
    let base_cost = baseline.map(|b| baseline_cost(&coupling, b)).transpose()?;

    let iteration = IterationConfig {
        schedule: config.schedule.clone(),
        steps: config.steps,
        field: field.clone(),
        kernel: config.kernel.clone(),
        integrator: config.integrator.clone(),
        eps: config.eps,
        seed: seeds.iteration,
        loss_time_samples: config.loss_time_samples,
        energy: config.metrics.energy,
        null_test: config.metrics.null_test,
        reference0,
        reference1,
    };
    let outcome = smoothed_rectify_iterate(&coupling, &iteration)?;
    let mut it = outcome.report;
    if let Some(b) = base_cost {
        for s in &mut it.steps {
            s.optimality_gap = Some(s.transport_cost - b);
        }
    }

    let report = ExperimentReport {
        meta: ReportMeta {
            schema_version: SCHEMA_VERSION,
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seeds,
            scenario: meta.summary(),
            dim: d,
            field: field.label().to_string(),
            initial_cost: it.initial_cost,
            initial_distance: it.initial_cost.sqrt(),
            v1: it.v1,
            baseline,
            baseline_cost: base_cost,
            min_loss: it.min_loss,
            bound: it.bound,
            abort_reason: it.abort_reason,
            warnings: it.warnings,
        },
        steps: it.steps,
        aborted_at: it.aborted_at,
    };
    Ok(ExperimentRun {
        report,
        coupling: outcome.coupling,
        error: outcome.error,
    })
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub step: usize,
    pub c_i: f64,
    pub loss: f64,
    pub transport_cost: f64,
    pub transport_distance: f64,
    pub energy_mu0: Option<f64>,
    pub energy_mu1: Option<f64>,
}

impl From<&StepRecord> for CsvRow {
    fn from(s: &StepRecord) -> Self {
        CsvRow {
            step: s.step,
            c_i: s.c_i,
            loss: s.loss,
            transport_cost: s.transport_cost,
            transport_distance: s.transport_distance,
            energy_mu0: s.energy_mu0,
            energy_mu1: s.energy_mu1,
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

pub fn emit_report<W: Write>(report: &ExperimentReport, format: ReportFormat, mut w: W) -> Result<()> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut w, report)?;
            writeln!(w)?;
        }
        ReportFormat::Csv => {
            // the header is written by hand so that it exists for empty reports too
            writeln!(w, "{CSV_HEADER}")?;
            let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(&mut w);
            for s in &report.steps {
                csv.serialize(CsvRow::from(s)).map_err(csv_error)?;
            }
            csv.flush()?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_report(report: &ExperimentReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    emit_report(report, format, BufWriter::new(File::create(path)?))
}

pub fn parse_json<R: Read>(r: R) -> Result<ExperimentReport> {
    Ok(serde_json::from_reader(BufReader::new(r))?)
}

pub fn parse_csv<R: Read>(r: R) -> Result<Vec<CsvRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(csv_error)?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(Error::Parse(format!("unexpected CSV header '{header}'")));
    }
    rdr.deserialize().map(|row| row.map_err(csv_error)).collect()
}
