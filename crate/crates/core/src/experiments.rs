//! Experiment configuration, runners and CSV output for the `stochgrad`
//! binary.
//!
//! Every run is a pure function of its [`ExperimentConfig`] (seed included):
//! sample `i` of a benchmark and step `t` of a training run draw their noise
//! from per-unit streams whose replica index is fixed by `i` or `t` and the
//! example index, and parallel reductions merge fixed-size chunks in order.
//! Wall-clock time is reported on stderr only, so output files are
//! byte-identical across runs.

use std::fs;
use std::io::{self, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boltzmann::{
    bm_pair_gradient, exact_bm_loglik_gradient, reward_correlator_gradient, sample_chain,
    BoltzmannMachine, ChainSchedule, RewardedSample, DEFAULT_BURN_IN, DEFAULT_THIN,
};
use crate::estimators::{
    centered_estimate_with, corrected_estimate, decayed_rate, finite_difference, spsa_estimate,
    straight_through_backward, unbiased_estimate, BaselineTracker, CorrectorModel, CorrectorSample,
    EstimatorKind, GradientEstimate,
};
use crate::network::{
    forward, ForwardTrace, LayerSpec, LayeredNetwork, LossSpec, NetworkSpec, UnitKind,
};
use crate::noise::{NoiseStream, UnitStreams};
use crate::oracle::{
    exact_gradient_over, expected_loss_over, optimal_baselines, DifferenceScheme,
    DEFAULT_GRADIENT_EPSILON,
};
use crate::semihard::{ControllerConfig, FiringRateController};
use crate::stats::Moments;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Column names of an estimator report.
pub const REPORT_HEADER: [&str; 7] = [
    "param_id",
    "estimator_mean",
    "estimator_var",
    "sem",
    "oracle_grad",
    "bias",
    "n_samples",
];

pub const BM_HEADER: [&str; 7] = [
    "parameter",
    "exact_gradient",
    "pair_mean",
    "pair_sem",
    "correlator_mean",
    "correlator_sem",
    "n_pairs",
];

pub const ORACLE_HEADER: [&str; 2] = ["quantity", "value"];

/// Samples per parallel chunk. Fixed so results do not depend on the
/// number of worker threads.
const CHUNK: u64 = 2048;

/// Built-in desk-scale problems, each small enough for the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    /// One stochastic unit driven by a constant input, trained toward
    /// firing with probability 0.8 under `L = (h - 0.8)²`.
    MatchProbability,
    /// Two inputs, two stochastic units, one sigmoid readout fitted to XOR.
    XorTarget,
    /// Four one-hot patterns squeezed through two stochastic units.
    SparseAutoencoder,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [
        TaskId::MatchProbability,
        TaskId::XorTarget,
        TaskId::SparseAutoencoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::MatchProbability => "match-probability",
            TaskId::XorTarget => "xor-target",
            TaskId::SparseAutoencoder => "sparse-autoencoder",
        }
    }

    /// Network description and examples. Layers without explicit weights
    /// are initialised from the run seed.
    pub fn definition(self) -> (NetworkSpec, Vec<Example>) {
        let layer = |units, kind, weights: Option<Vec<Vec<f64>>>| LayerSpec {
            units,
            kind,
            weights,
            biases: None,
        };
        match self {
            TaskId::MatchProbability => (
                NetworkSpec {
                    input_width: 1,
                    layers: vec![layer(1, UnitKind::StochasticBinary, Some(vec![vec![0.0]]))],
                    loss: LossSpec::SquaredError,
                },
                vec![Example::new(vec![1.0], vec![MATCH_TARGET])],
            ),
            TaskId::XorTarget => (
                NetworkSpec {
                    input_width: 2,
                    layers: vec![
                        layer(2, UnitKind::StochasticBinary, None),
                        layer(1, UnitKind::DeterministicSigmoid, None),
                    ],
                    loss: LossSpec::SquaredError,
                },
                [
                    (0.0, 0.0, 0.0),
                    (0.0, 1.0, 1.0),
                    (1.0, 0.0, 1.0),
                    (1.0, 1.0, 0.0),
                ]
                .iter()
                .map(|&(a, b, t)| Example::new(vec![a, b], vec![t]))
                .collect(),
            ),
            TaskId::SparseAutoencoder => (
                NetworkSpec {
                    input_width: 4,
                    layers: vec![
                        layer(2, UnitKind::StochasticBinary, None),
                        layer(4, UnitKind::DeterministicSigmoid, None),
                    ],
                    loss: LossSpec::SquaredError,
                },
                (0..4)
                    .map(|k| {
                        let v: Vec<f64> = (0..4).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
                        Example::new(v.clone(), v)
                    })
                    .collect(),
            ),
        }
    }
}

/// Target firing probability of the match-probability task.
pub const MATCH_TARGET: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub input: Vec<f64>,
    #[serde(default)]
    pub target: Vec<f64>,
}

impl Example {
    pub fn new(input: Vec<f64>, target: Vec<f64>) -> Self {
        Self { input, target }
    }
}

/// Where the centered estimator's per-unit baseline comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Running [`BaselineTracker`], read before each update.
    #[default]
    Tracked,
    /// The same constant for every unit.
    Fixed(f64),
    /// Exact variance-minimising baselines from the oracle.
    Optimal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub baseline: BaselineMode,
    pub baseline_decay: f64,
    /// Benchmark samples used only to warm up a tracked baseline or the
    /// corrector before moments are recorded.
    pub warmup_samples: usize,
    pub corrector_learning_rate: f64,
    /// The corrector's rate at update `t` is `rate / (1 + decay·t)`.
    pub corrector_rate_decay: f64,
    /// Samples per corrector update in benchmarks.
    pub corrector_batch: usize,
    pub corrector_sigma_feature: bool,
    pub spsa_c: f64,
    pub fd_epsilon: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Unbiased,
            baseline: BaselineMode::Tracked,
            baseline_decay: 0.99,
            warmup_samples: 0,
            corrector_learning_rate: 0.5,
            corrector_rate_decay: 1.0,
            corrector_batch: 1,
            corrector_sigma_feature: false,
            spsa_c: 0.1,
            fd_epsilon: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Write a curve row every `log_every` steps.
    pub log_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 0.1,
            log_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoltzmannConfig {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub visible: Vec<usize>,
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Visible assignment whose log-likelihood gradient is estimated.
    pub data: Vec<u8>,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    /// Independent chain pairs the samples are split across.
    #[serde(default = "default_chains")]
    pub chains: usize,
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

fn default_thin() -> usize {
    DEFAULT_THIN
}

fn default_chains() -> usize {
    4
}

fn default_samples() -> usize {
    10_000
}

impl BoltzmannConfig {
    pub fn machine(&self) -> Result<BoltzmannMachine> {
        BoltzmannMachine::new(
            self.weights.clone(),
            self.biases.clone(),
            self.visible.clone(),
            self.hidden.clone(),
        )
    }

    pub fn schedule(&self) -> ChainSchedule {
        ChainSchedule {
            burn_in: self.burn_in,
            thin: self.thin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskId>,
    /// Replaces the task's network when both are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
    /// Replaces the task's examples when both are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub examples: Option<Vec<Example>>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    /// Monte Carlo samples for benchmarks and Boltzmann checks.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Widths for the first stochastic layer in a variance sweep.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unit_sweep: Vec<usize>,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub firing_rate_controller: Option<ControllerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boltzmann: Option<BoltzmannConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Smallest valid configuration for `task`.
    pub fn for_task(task: TaskId) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            task: Some(task),
            network: None,
            examples: None,
            estimator: EstimatorConfig::default(),
            samples: default_samples(),
            unit_sweep: Vec::new(),
            training: TrainingConfig::default(),
            firing_rate_controller: None,
            boltzmann: None,
            output: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            ));
        }
        if self.samples == 0 {
            return bad("samples must be at least 1".into());
        }
        if self.unit_sweep.contains(&0) {
            return bad("unit_sweep entries must be at least 1".into());
        }
        let e = &self.estimator;
        if !(e.baseline_decay > 0.0 && e.baseline_decay <= 1.0) {
            return bad(format!(
                "baseline_decay must lie in (0, 1], got {}",
                e.baseline_decay
            ));
        }
        if !(e.corrector_learning_rate >= 0.0 && e.corrector_learning_rate.is_finite()) {
            return bad("corrector_learning_rate must be finite and >= 0".into());
        }
        if !(e.corrector_rate_decay >= 0.0 && e.corrector_rate_decay.is_finite()) {
            return bad("corrector_rate_decay must be finite and >= 0".into());
        }
        if e.corrector_batch == 0 {
            return bad("corrector_batch must be at least 1".into());
        }
        if !(e.spsa_c > 0.0 && e.spsa_c.is_finite()) {
            return bad("spsa_c must be positive".into());
        }
        if !(e.fd_epsilon > 0.0 && e.fd_epsilon.is_finite()) {
            return bad("fd_epsilon must be positive".into());
        }
        if let BaselineMode::Fixed(v) = e.baseline {
            if !v.is_finite() {
                return bad("fixed baseline must be finite".into());
            }
        }
        let t = &self.training;
        if t.steps == 0 || t.log_every == 0 {
            return bad("training steps and log_every must be at least 1".into());
        }
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0".into());
        }
        if let Some(c) = &self.firing_rate_controller {
            c.validate()
                .map_err(|err| Error::Config(format!("firing_rate_controller: {err}")))?;
        }
        if let Some(b) = &self.boltzmann {
            if b.chains == 0 || b.thin == 0 {
                return bad("boltzmann chains and thin must be at least 1".into());
            }
        }
        Ok(())
    }

    fn network_spec(&self) -> Result<NetworkSpec> {
        match (&self.network, self.task) {
            (Some(spec), _) => Ok(spec.clone()),
            (None, Some(task)) => Ok(task.definition().0),
            (None, None) => Err(Error::Config(
                "config names neither a `task` nor a `network`".into(),
            )),
        }
    }

    fn example_list(&self, net: &LayeredNetwork) -> Vec<Example> {
        if let Some(examples) = &self.examples {
            return examples.clone();
        }
        if let Some(task) = self.task {
            return task.definition().1;
        }
        vec![Example::new(
            vec![0.0; net.input_width()],
            vec![0.0; net.output_width()],
        )]
    }

    /// Builds the network and example list this config describes.
    pub fn problem(&self) -> Result<Problem> {
        self.problem_from(&self.network_spec()?)
    }

    fn problem_from(&self, spec: &NetworkSpec) -> Result<Problem> {
        let network = spec.build(self.seed).map_err(config_error)?;
        let examples: Vec<(Vec<f64>, Vec<f64>)> = self
            .example_list(&network)
            .into_iter()
            .map(|e| (e.input, e.target))
            .collect();
        if examples.is_empty() {
            return Err(Error::Config("examples must not be empty".into()));
        }
        for (x, t) in &examples {
            network.check_io(x, t).map_err(config_error)?;
        }
        Ok(Problem { network, examples })
    }
}

fn config_error(err: Error) -> Error {
    match err {
        Error::InvalidArgument(msg) => Error::Config(msg),
        other => other,
    }
}

/// A network together with the examples its loss is averaged over.
#[derive(Clone, Debug)]
pub struct Problem {
    pub network: LayeredNetwork,
    pub examples: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Problem {
    /// Traces for every example, drawing noise for sample `replica`.
    pub fn traces(
        &self,
        net: &LayeredNetwork,
        seed: u64,
        replica: u64,
    ) -> Result<Vec<ForwardTrace>> {
        let e = self.examples.len() as u64;
        self.examples
            .iter()
            .enumerate()
            .map(|(k, (x, t))| {
                let mut streams = UnitStreams::new(seed, replica * e + k as u64, net.unit_count());
                forward(net, x, t, &mut streams)
            })
            .collect()
    }

    /// Realised mean loss at parameters `theta` with the noise of sample
    /// `replica`; NaN when the forward pass fails.
    pub fn realised_loss(&self, theta: &[f64], seed: u64, replica: u64) -> f64 {
        let mut net = self.network.clone();
        if net.set_params(theta).is_err() {
            return f64::NAN;
        }
        match self.traces(&net, seed, replica) {
            Ok(traces) => mean_loss(&traces),
            Err(_) => f64::NAN,
        }
    }

    pub fn expected_loss(&self, net: &LayeredNetwork) -> Result<f64> {
        expected_loss_over(net, &self.examples)
    }
}

fn mean_loss(traces: &[ForwardTrace]) -> f64 {
    traces.iter().map(|t| t.loss).sum::<f64>() / traces.len() as f64
}

/// Parses a configuration, reporting the offending line on failure.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = serde_json::from_str(text).map_err(|err| {
        let line = err.line();
        let source = text
            .lines()
            .nth(line.saturating_sub(1))
            .map(|l| format!("\n  {line} | {}", l.trim_end()))
            .unwrap_or_default();
        Error::Config(format!("{origin}:{line}:{}: {err}{source}", err.column()))
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|err| Error::Config(format!("cannot read {}: {err}", path.display())))?;
    parse_config(&text, &path.display().to_string())
}

pub fn dump_config(config: &ExperimentConfig) -> Result<String> {
    serde_json::to_string_pretty(config).map_err(|err| Error::Config(err.to_string()))
}

/// Shortest round-trip decimal, switching to exponent form for very large
/// or very small magnitudes.
pub fn format_float(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn opt_float(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

/// Something that can be written as a commented-preamble CSV file.
pub trait CsvReport {
    fn write_to(&self, out: &mut dyn Write) -> Result<()>;
}

/// Writes `report` to `path`, or to stdout when `path` is `None`.
pub fn write_csv(report: &dyn CsvReport, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let mut buf = Vec::new();
            report.write_to(&mut buf)?;
            fs::write(p, buf)?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            report.write_to(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn write_rows<I>(out: &mut dyn Write, preamble: &[String], header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    for line in preamble {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub param_id: String,
    pub mean: f64,
    pub variance: f64,
    pub sem: f64,
    pub oracle: Option<f64>,
    pub bias: Option<f64>,
    pub n_samples: u64,
}

/// Per-parameter moments of one estimator, with the oracle gradient when
/// the network is small enough to enumerate.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorReport {
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub stochastic_units: usize,
    pub rows: Vec<ReportRow>,
    /// Why the oracle columns are empty, if they are.
    pub oracle_note: Option<String>,
    pub wall_clock: std::time::Duration,
}

impl EstimatorReport {
    pub fn oracle_available(&self) -> bool {
        self.oracle_note.is_none()
    }
}

/// The base report followed by any unit-sweep reports.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchOutcome {
    pub base: EstimatorReport,
    pub sweep: Vec<(usize, EstimatorReport)>,
}

impl CsvReport for BenchOutcome {
    fn write_to(&self, out: &mut dyn Write) -> Result<()> {
        let mut preamble = vec![
            format!("seed={}", self.base.seed),
            format!("estimator={}", self.base.estimator.name()),
            format!("stochastic_units={}", self.base.stochastic_units),
        ];
        let mut flagged = vec![("", &self.base)];
        flagged.extend(self.sweep.iter().map(|(_, r)| ("sweep ", r)));
        for (what, r) in flagged {
            if let Some(note) = &r.oracle_note {
                preamble.push(format!("{what}oracle unavailable: {note}"));
            }
        }
        if !self.sweep.is_empty() {
            preamble.push("sweep rows are prefixed with units=<n>/".into());
        }
        let row = |prefix: String, r: &ReportRow| {
            vec![
                format!("{prefix}{}", r.param_id),
                format_float(r.mean),
                format_float(r.variance),
                format_float(r.sem),
                opt_float(r.oracle),
                opt_float(r.bias),
                r.n_samples.to_string(),
            ]
        };
        let rows = self.base.rows.iter().map(|r| row(String::new(), r)).chain(
            self.sweep
                .iter()
                .flat_map(|(n, rep)| rep.rows.iter().map(move |r| row(format!("units={n}/"), r))),
        );
        write_rows(out, &preamble, &REPORT_HEADER, rows)
    }
}

impl CsvReport for EstimatorReport {
    fn write_to(&self, out: &mut dyn Write) -> Result<()> {
        BenchOutcome {
            base: self.clone(),
            sweep: Vec::new(),
        }
        .write_to(out)
    }
}

fn oracle_gradient(problem: &Problem) -> Result<std::result::Result<Vec<f64>, String>> {
    match exact_gradient_over(
        &problem.network,
        &problem.examples,
        DEFAULT_GRADIENT_EPSILON,
        DifferenceScheme::Richardson,
    ) {
        Ok(g) => Ok(Ok(g.values)),
        Err(err @ (Error::Capacity { .. } | Error::Contract(_))) => Ok(Err(err.to_string())),
        Err(err) => Err(err),
    }
}

fn check_finite(estimate: &GradientEstimate, sample: u64) -> Result<()> {
    if estimate.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step: sample as usize,
            detail: "estimator produced a non-finite value".into(),
        })
    }
}

fn average_over(
    traces: &[ForwardTrace],
    f: impl Fn(&ForwardTrace) -> Result<GradientEstimate>,
) -> Result<GradientEstimate> {
    let estimates = traces.iter().map(f).collect::<Result<Vec<_>>>()?;
    GradientEstimate::average(&estimates)
}

/// Runs `f` on samples `range` in fixed chunks and merges in order.
fn parallel_moments<F>(dim: usize, range: Range<u64>, f: F) -> Result<Moments>
where
    F: Fn(u64) -> Result<GradientEstimate> + Sync,
{
    let starts: Vec<u64> = range.clone().step_by(CHUNK as usize).collect();
    let parts: Vec<Result<Moments>> = starts
        .par_iter()
        .map(|&start| {
            let mut m = Moments::new(dim);
            for i in start..(start + CHUNK).min(range.end) {
                let g = f(i)?;
                check_finite(&g, i)?;
                m.push(&g.values);
            }
            Ok(m)
        })
        .collect();
    let mut total = Moments::new(dim);
    for part in parts {
        total.merge(&part?);
    }
    Ok(total)
}

/// Estimate for sample `replica` by a perturbation method, with the loss
/// evaluated under that sample's noise at every probed parameter vector.
fn perturbation_estimate(
    problem: &Problem,
    config: &ExperimentConfig,
    theta: &[f64],
    replica: u64,
) -> Result<GradientEstimate> {
    let seed = config.seed;
    let loss = |p: &[f64]| problem.realised_loss(p, seed, replica);
    match config.estimator.kind {
        EstimatorKind::Spsa => {
            let e = problem.examples.len() as u64;
            let mut signs = NoiseStream::for_unit(seed, replica * e, problem.network.unit_count());
            spsa_estimate(loss, theta, &mut signs, config.estimator.spsa_c)
        }
        _ => finite_difference(loss, theta, config.estimator.fd_epsilon),
    }
}

fn fixed_baselines(
    problem: &Problem,
    net: &LayeredNetwork,
    mode: BaselineMode,
) -> Result<Vec<Vec<f64>>> {
    let units = net.stochastic_unit_count();
    match mode {
        BaselineMode::Fixed(v) => Ok(vec![vec![v; units]; problem.examples.len()]),
        BaselineMode::Optimal => problem
            .examples
            .iter()
            .map(|(x, t)| optimal_baselines(net, x, t))
            .collect::<Result<_>>()
            .map_err(|err| Error::Config(format!("optimal baselines need the oracle: {err}"))),
        BaselineMode::Tracked => Err(Error::contract("tracked baselines are not fixed")),
    }
}

fn bench_problem(config: &ExperimentConfig, problem: &Problem) -> Result<EstimatorReport> {
    let started = std::time::Instant::now();
    let net = &problem.network;
    let dim = net.param_count();
    let seed = config.seed;
    let est = &config.estimator;
    let n = config.samples as u64;
    let warm = est.warmup_samples as u64;
    let oracle = oracle_gradient(problem)?;
    let moments = match est.kind {
        EstimatorKind::Unbiased => parallel_moments(dim, 0..n, |i| {
            average_over(&problem.traces(net, seed, i)?, |t| {
                unbiased_estimate(net, t)
            })
        })?,
        EstimatorKind::StraightThrough => parallel_moments(dim, 0..n, |i| {
            average_over(&problem.traces(net, seed, i)?, |t| {
                straight_through_backward(net, t)
            })
        })?,
        EstimatorKind::Spsa | EstimatorKind::FiniteDiff => {
            let theta = net.params();
            parallel_moments(dim, 0..n, |i| {
                perturbation_estimate(problem, config, &theta, i)
            })?
        }
        EstimatorKind::Centered if est.baseline != BaselineMode::Tracked => {
            let baselines = fixed_baselines(problem, net, est.baseline)?;
            parallel_moments(dim, 0..n, |i| {
                let traces = problem.traces(net, seed, i)?;
                let estimates = traces
                    .iter()
                    .zip(&baselines)
                    .map(|(t, b)| centered_estimate_with(net, t, b))
                    .collect::<Result<Vec<_>>>()?;
                GradientEstimate::average(&estimates)
            })?
        }
        EstimatorKind::Centered => {
            let mut tracker =
                BaselineTracker::new(net.stochastic_unit_count(), est.baseline_decay, 1e-8)
                    .map_err(config_error)?;
            let mut m = Moments::new(dim);
            for i in 0..warm + n {
                let traces = problem.traces(net, seed, i)?;
                let mut estimates = Vec::with_capacity(traces.len());
                for t in &traces {
                    estimates.push(centered_estimate_with(net, t, &tracker.baselines())?);
                    tracker.update(net, t)?;
                }
                if i >= warm {
                    let g = GradientEstimate::average(&estimates)?;
                    check_finite(&g, i)?;
                    m.push(&g.values);
                }
            }
            m
        }
        EstimatorKind::Corrected => {
            let mut model = CorrectorModel::new(
                net.stochastic_unit_count(),
                est.corrector_learning_rate,
                est.corrector_sigma_feature,
            )
            .map_err(config_error)?;
            let mut m = Moments::new(dim);
            let mut batch = Vec::new();
            let mut updates = 0;
            for i in 0..warm + n {
                let traces = problem.traces(net, seed, i)?;
                if i >= warm {
                    let g = average_over(&traces, |t| corrected_estimate(net, t, &model))?;
                    check_finite(&g, i)?;
                    m.push(&g.values);
                }
                for t in &traces {
                    batch.push(CorrectorSample::from_trace(net, t)?);
                }
                if batch.len() >= est.corrector_batch * traces.len() {
                    let rate = decayed_rate(
                        est.corrector_learning_rate,
                        est.corrector_rate_decay,
                        updates,
                    );
                    model.train_step(&batch, rate)?;
                    batch.clear();
                    updates += 1;
                }
            }
            m
        }
    };
    let names = net.param_names();
    let (mean, var, sem) = (moments.mean(), moments.variance(), moments.sem());
    let oracle_values = oracle.as_ref().ok();
    let rows = (0..dim)
        .map(|k| {
            let o = oracle_values.map(|g| g[k]);
            ReportRow {
                param_id: names[k].clone(),
                mean: mean[k],
                variance: var[k],
                sem: sem[k],
                oracle: o,
                bias: o.map(|o| mean[k] - o),
                n_samples: moments.count(),
            }
        })
        .collect();
    Ok(EstimatorReport {
        estimator: est.kind,
        seed,
        stochastic_units: net.stochastic_unit_count(),
        rows,
        oracle_note: oracle.err(),
        wall_clock: started.elapsed(),
    })
}

/// Moments of the configured estimator on the configured problem, plus a
/// report per entry of `unit_sweep`.
pub fn run_variance_bench(config: &ExperimentConfig) -> Result<BenchOutcome> {
    config.validate()?;
    let spec = config.network_spec()?;
    let base = bench_problem(config, &config.problem_from(&spec)?)?;
    let sweep = config
        .unit_sweep
        .iter()
        .map(|&units| {
            let resized = resize_first_stochastic_layer(&spec, units)?;
            Ok((
                units,
                bench_problem(config, &config.problem_from(&resized)?)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(BenchOutcome { base, sweep })
}

fn resize_first_stochastic_layer(spec: &NetworkSpec, units: usize) -> Result<NetworkSpec> {
    let l = spec
        .layers
        .iter()
        .position(|layer| layer.kind != UnitKind::DeterministicSigmoid)
        .ok_or_else(|| Error::Config("unit_sweep needs a stochastic layer".into()))?;
    if l + 1 == spec.layers.len() && spec.loss.uses_target() {
        return Err(Error::Config(
            "unit_sweep cannot resize an output layer compared against a target".into(),
        ));
    }
    let mut out = spec.clone();
    if out.layers[l].weights.is_some() || out.layers[l].biases.is_some() {
        return Err(Error::Config(format!(
            "unit_sweep resizes layer {l}, which has explicit parameters"
        )));
    }
    out.layers[l].units = units;
    if let Some(next) = out.layers.get_mut(l + 1) {
        if next.weights.is_some() {
            return Err(Error::Config(format!(
                "unit_sweep resizes the input of layer {}, which has explicit weights",
                l + 1
            )));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRow {
    pub step: usize,
    /// Exact expected loss at the step's parameters, when enumerable.
    pub expected_loss: Option<f64>,
    /// Mean realised loss over the step's examples.
    pub empirical_loss: f64,
    /// Fraction of the step's examples on which each non-deterministic
    /// unit was active.
    pub firing_rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingCurve {
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub unit_labels: Vec<String>,
    pub rows: Vec<TrainingRow>,
    pub oracle_note: Option<String>,
    /// Set when the run stopped early on a non-finite quantity.
    pub divergence: Option<(usize, String)>,
    pub final_params: Vec<f64>,
}

impl TrainingCurve {
    /// First logged step whose expected loss is within `tolerance` of
    /// `target`.
    pub fn steps_to_reach(&self, target: f64, tolerance: f64) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.expected_loss.is_some_and(|l| l <= target + tolerance))
            .map(|r| r.step)
    }

    pub fn expected_losses(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.expected_loss).collect()
    }

    pub fn into_result(self) -> Result<Self> {
        match &self.divergence {
            Some((step, detail)) => Err(Error::Divergence {
                step: *step,
                detail: detail.clone(),
            }),
            None => Ok(self),
        }
    }
}

impl CsvReport for TrainingCurve {
    fn write_to(&self, out: &mut dyn Write) -> Result<()> {
        let mut preamble = vec![
            format!("seed={}", self.seed),
            format!("estimator={}", self.estimator.name()),
        ];
        if let Some(note) = &self.oracle_note {
            preamble.push(format!("oracle unavailable: {note}"));
        }
        if let Some((step, detail)) = &self.divergence {
            preamble.push(format!("diverged at step {step}: {detail}"));
        }
        let mut header = vec![
            "step".to_string(),
            "expected_loss".into(),
            "empirical_loss".into(),
        ];
        header.extend(self.unit_labels.iter().map(|u| format!("firing_rate_{u}")));
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = self.rows.iter().map(|r| {
            let mut row = vec![
                r.step.to_string(),
                opt_float(r.expected_loss),
                format_float(r.empirical_loss),
            ];
            row.extend(r.firing_rates.iter().map(|&f| format_float(f)));
            row
        });
        write_rows(out, &preamble, &header_refs, rows)
    }
}

/// Units whose activity is logged: every non-deterministic unit.
fn active_units(net: &LayeredNetwork) -> Vec<(usize, usize)> {
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, layer)| layer.kind() != UnitKind::DeterministicSigmoid)
        .flat_map(|(l, layer)| (0..layer.units()).map(move |j| (l, j)))
        .collect()
}

/// SGD on the configured problem with the configured estimator. A
/// divergence ends the run early and is recorded in the curve; use
/// [`TrainingCurve::into_result`] to turn it into an error.
pub fn run_training(config: &ExperimentConfig) -> Result<TrainingCurve> {
    config.validate()?;
    let mut problem = config.problem()?;
    let seed = config.seed;
    let est = &config.estimator;
    let train = &config.training;
    let units = active_units(&problem.network);
    let stochastic = problem.network.stochastic_unit_count();
    let oracle_note = match problem.expected_loss(&problem.network) {
        Ok(_) => None,
        Err(err @ (Error::Capacity { .. } | Error::Contract(_))) => Some(err.to_string()),
        Err(err) => return Err(err),
    };
    let mut tracker =
        BaselineTracker::new(stochastic, est.baseline_decay, 1e-8).map_err(config_error)?;
    let mut corrector = CorrectorModel::new(
        stochastic,
        est.corrector_learning_rate,
        est.corrector_sigma_feature,
    )
    .map_err(config_error)?;
    let mut controller = config
        .firing_rate_controller
        .clone()
        .map(|c| FiringRateController::new(&problem.network, c))
        .transpose()
        .map_err(config_error)?;
    let mut curve = TrainingCurve {
        estimator: est.kind,
        seed,
        unit_labels: units.iter().map(|(l, j)| format!("{l}_{j}")).collect(),
        rows: Vec::new(),
        oracle_note,
        divergence: None,
        final_params: Vec::new(),
    };
    for step in 0..train.steps {
        let net = &problem.network;
        let replica = step as u64;
        let traces = match problem.traces(net, seed, replica) {
            Ok(t) => t,
            Err(err @ (Error::Overflow { .. } | Error::NonFiniteLoss { .. })) => {
                curve.divergence = Some((step, err.to_string()));
                break;
            }
            Err(err) => return Err(err),
        };
        let empirical = mean_loss(&traces);
        if step % train.log_every == 0 {
            let expected = match curve.oracle_note {
                None => Some(problem.expected_loss(net)?),
                Some(_) => None,
            };
            let firing_rates = units
                .iter()
                .map(|&(l, j)| {
                    traces
                        .iter()
                        .filter(|t| t.layers[l].units[j].output > 0.0)
                        .count() as f64
                        / traces.len() as f64
                })
                .collect();
            curve.rows.push(TrainingRow {
                step,
                expected_loss: expected,
                empirical_loss: empirical,
                firing_rates,
            });
        }
        if !empirical.is_finite() {
            curve.divergence = Some((step, "realised loss is not finite".into()));
            break;
        }
        let theta = net.params();
        let gradient = match est.kind {
            EstimatorKind::Unbiased => average_over(&traces, |t| unbiased_estimate(net, t))?,
            EstimatorKind::StraightThrough => {
                average_over(&traces, |t| straight_through_backward(net, t))?
            }
            EstimatorKind::Centered => {
                let baselines = match est.baseline {
                    BaselineMode::Tracked => Vec::new(),
                    mode => fixed_baselines(&problem, net, mode)?,
                };
                let mut estimates = Vec::with_capacity(traces.len());
                for (k, t) in traces.iter().enumerate() {
                    if baselines.is_empty() {
                        estimates.push(centered_estimate_with(net, t, &tracker.baselines())?);
                        tracker.update(net, t)?;
                    } else {
                        estimates.push(centered_estimate_with(net, t, &baselines[k])?);
                    }
                }
                GradientEstimate::average(&estimates)?
            }
            EstimatorKind::Corrected => {
                let g = average_over(&traces, |t| corrected_estimate(net, t, &corrector))?;
                let batch = traces
                    .iter()
                    .map(|t| CorrectorSample::from_trace(net, t))
                    .collect::<Result<Vec<_>>>()?;
                let rate =
                    decayed_rate(est.corrector_learning_rate, est.corrector_rate_decay, step);
                corrector.train_step(&batch, rate)?;
                g
            }
            EstimatorKind::Spsa | EstimatorKind::FiniteDiff => {
                perturbation_estimate(&problem, config, &theta, replica)?
            }
        };
        let updated: Vec<f64> = theta
            .iter()
            .zip(&gradient.values)
            .map(|(p, g)| p - train.learning_rate * g)
            .collect();
        if updated.iter().any(|p| !p.is_finite()) {
            curve.divergence = Some((step, "parameters became non-finite".into()));
            break;
        }
        problem.network.set_params(&updated)?;
        if let Some(c) = &mut controller {
            c.adjust_bias(&mut problem.network, &traces)?;
        }
    }
    curve.final_params = problem.network.params();
    Ok(curve)
}

/// Exact expected loss and gradient of the configured problem.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub seed: u64,
    pub stochastic_units: usize,
    pub expected_loss: f64,
    pub gradient: Vec<(String, f64)>,
}

impl CsvReport for OracleReport {
    fn write_to(&self, out: &mut dyn Write) -> Result<()> {
        let preamble = vec![
            format!("seed={}", self.seed),
            format!("stochastic_units={}", self.stochastic_units),
        ];
        let rows = std::iter::once(vec![
            "expected_loss".to_string(),
            format_float(self.expected_loss),
        ])
        .chain(
            self.gradient
                .iter()
                .map(|(name, g)| vec![format!("grad:{name}"), format_float(*g)]),
        );
        write_rows(out, &preamble, &ORACLE_HEADER, rows)
    }
}

pub fn run_oracle(config: &ExperimentConfig) -> Result<OracleReport> {
    config.validate()?;
    let problem = config.problem()?;
    let net = &problem.network;
    let expected_loss = problem.expected_loss(net)?;
    let gradient = exact_gradient_over(
        net,
        &problem.examples,
        DEFAULT_GRADIENT_EPSILON,
        DifferenceScheme::Richardson,
    )?;
    Ok(OracleReport {
        seed: config.seed,
        stochastic_units: net.stochastic_unit_count(),
        expected_loss,
        gradient: net.param_names().into_iter().zip(gradient.values).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BmRow {
    pub parameter: String,
    pub exact: f64,
    pub pair_mean: f64,
    pub pair_sem: f64,
    pub correlator_mean: f64,
    pub correlator_sem: f64,
    pub n_pairs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BmReport {
    pub seed: u64,
    pub schedule: ChainSchedule,
    pub chains: usize,
    pub rows: Vec<BmRow>,
}

impl CsvReport for BmReport {
    fn write_to(&self, out: &mut dyn Write) -> Result<()> {
        let preamble = vec![
            format!("seed={}", self.seed),
            format!(
                "chains={} burn_in={} thin={}",
                self.chains, self.schedule.burn_in, self.schedule.thin
            ),
        ];
        let rows = self.rows.iter().map(|r| {
            vec![
                r.parameter.clone(),
                format_float(r.exact),
                format_float(r.pair_mean),
                format_float(r.pair_sem),
                format_float(r.correlator_mean),
                format_float(r.correlator_sem),
                r.n_pairs.to_string(),
            ]
        });
        write_rows(out, &preamble, &BM_HEADER, rows)
    }
}

/// Clamped (`+1`) and free (`-1`) samples from `chains` independent chain
/// pairs, `pairs` in total.
pub fn bm_reward_stream(
    bm: &BoltzmannMachine,
    data: &[u8],
    seed: u64,
    schedule: ChainSchedule,
    chains: usize,
    pairs: usize,
) -> Result<Vec<(RewardedSample, RewardedSample)>> {
    let clamp = bm.clamp_visible(data)?;
    let per_chain = pairs.div_ceil(chains);
    let parts: Vec<Result<Vec<_>>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let count = per_chain.min(pairs.saturating_sub(c * per_chain));
            let mut start = vec![0u8; bm.units()];
            for &(i, v) in &clamp {
                start[i] = v;
            }
            let mut pos_stream = NoiseStream::for_unit(seed, c as u64, 0);
            let mut neg_stream = NoiseStream::for_unit(seed, c as u64, 1);
            let pos = sample_chain(bm, &start, &mut pos_stream, Some(&clamp), schedule, count)?;
            let neg = sample_chain(bm, &start, &mut neg_stream, None, schedule, count)?;
            Ok(pos
                .into_iter()
                .zip(neg)
                .map(|(p, n)| (RewardedSample::positive(p), RewardedSample::negative(n)))
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(pairs);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

pub fn run_bm_check(config: &ExperimentConfig) -> Result<BmReport> {
    config.validate()?;
    let bmc = config
        .boltzmann
        .as_ref()
        .ok_or_else(|| Error::Config("bm-check needs a `boltzmann` section".into()))?;
    let bm = bmc.machine().map_err(config_error)?;
    let exact = exact_bm_loglik_gradient(&bm, &bmc.data).map_err(config_error)?;
    let stream = bm_reward_stream(
        &bm,
        &bmc.data,
        config.seed,
        bmc.schedule(),
        bmc.chains,
        config.samples,
    )?;
    let dim = bm.param_count();
    let mut pair_moments = Moments::new(dim);
    let mut corr_moments = Moments::new(dim);
    let mut flat = Vec::with_capacity(2 * stream.len());
    for (pos, neg) in &stream {
        pair_moments.push(&bm_pair_gradient(&pos.state, &neg.state)?.values);
        corr_moments.push(&reward_correlator_gradient(&[pos.clone(), neg.clone()])?.values);
        flat.push(pos.clone());
        flat.push(neg.clone());
    }
    let correlator = reward_correlator_gradient(&flat)?;
    let (pm, ps, cs) = (pair_moments.mean(), pair_moments.sem(), corr_moments.sem());
    let rows = bm
        .param_names()
        .into_iter()
        .enumerate()
        .map(|(k, parameter)| BmRow {
            parameter,
            exact: exact.values[k],
            pair_mean: pm[k],
            pair_sem: ps[k],
            correlator_mean: correlator.values[k],
            correlator_sem: cs[k],
            n_pairs: pair_moments.count(),
        })
        .collect();
    Ok(BmReport {
        seed: config.seed,
        schedule: bmc.schedule(),
        chains: bmc.chains,
        rows,
    })
}
