//! Gradient estimators for networks with stochastic binary units.
//!
//! All estimators consume a [`ForwardTrace`]; none re-runs the network.
//!
//! The score-function estimators attribute to each stochastic unit `i` the
//! value `(h_i - σ(a_i)) · (L - L̄_i)` as its gradient with respect to the
//! activation `a_i`. With `L̄_i = 0` this is the unbiased correlator; any
//! constant `L̄_i` keeps it unbiased, and [`BaselineTracker`] tracks the
//! variance-minimising choice `E[(h-σ)² L] / E[(h-σ)²]`. The value reaches the
//! unit's own bias and weights through `∂a_i/∂b_i = 1`, `∂a_i/∂W_ij = x_ij`.
//! It never crosses another stochastic unit: the loss is only broadcast.
//! Deterministic units are differentiated exactly. Units after the last
//! stochastic layer use the realised loss gradient. Units feeding a
//! stochastic layer only through deterministic paths receive the chain
//! rule of the injected values.

use serde::{Deserialize, Serialize};

use crate::backprop::{reverse_pass, StochasticSite};
use crate::network::{ForwardTrace, LayeredNetwork, UnitRecord};
use crate::noise::NoiseStream;
use crate::{Error, Result};

/// Estimators selectable from the command line and configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Unbiased,
    Centered,
    StraightThrough,
    Corrected,
    Spsa,
    FiniteDiff,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Unbiased,
        EstimatorKind::Centered,
        EstimatorKind::StraightThrough,
        EstimatorKind::Corrected,
        EstimatorKind::Spsa,
        EstimatorKind::FiniteDiff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Unbiased => "unbiased",
            EstimatorKind::Centered => "centered",
            EstimatorKind::StraightThrough => "straight_through",
            EstimatorKind::Corrected => "corrected",
            EstimatorKind::Spsa => "spsa",
            EstimatorKind::FiniteDiff => "finite_diff",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = EstimatorKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown estimator `{s}`, expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// What produced a [`GradientEstimate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    Estimator(EstimatorKind),
    Semihard,
    Enumeration,
    BoltzmannPair,
    RewardCorrelator,
}

impl From<EstimatorKind> for EstimateSource {
    fn from(kind: EstimatorKind) -> Self {
        EstimateSource::Estimator(kind)
    }
}

/// Gradient values aligned with a parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub values: Vec<f64>,
    pub source: EstimateSource,
    pub samples_used: usize,
}

impl GradientEstimate {
    pub fn new(values: Vec<f64>, source: impl Into<EstimateSource>, samples_used: usize) -> Self {
        Self {
            values,
            source: source.into(),
            samples_used,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Arithmetic mean of estimates from independent traces.
    pub fn average(estimates: &[GradientEstimate]) -> Result<GradientEstimate> {
        let first = estimates
            .first()
            .ok_or_else(|| Error::invalid("cannot average zero estimates"))?;
        let dim = first.len();
        if estimates.iter().any(|e| e.len() != dim) {
            return Err(Error::invalid("estimates have different shapes"));
        }
        let mut values = vec![0.0; dim];
        for e in estimates {
            for (v, x) in values.iter_mut().zip(&e.values) {
                *v += x;
            }
        }
        let n = estimates.len() as f64;
        values.iter_mut().for_each(|v| *v /= n);
        Ok(GradientEstimate {
            values,
            source: first.source,
            samples_used: estimates.iter().map(|e| e.samples_used).sum(),
        })
    }
}

fn sigma_of(record: &UnitRecord, index: usize) -> Result<f64> {
    record
        .sigma_a
        .ok_or_else(|| Error::contract(format!("stochastic unit {index} has no recorded σ(a)")))
}

fn check_baselines(net: &LayeredNetwork, baselines: &[f64]) -> Result<()> {
    let units = net.stochastic_unit_count();
    if baselines.len() != units {
        return Err(Error::contract(format!(
            "{} baselines supplied for {units} stochastic units",
            baselines.len()
        )));
    }
    Ok(())
}

fn score_function(
    net: &LayeredNetwork,
    trace: &ForwardTrace,
    baselines: &[f64],
    kind: EstimatorKind,
) -> Result<GradientEstimate> {
    check_baselines(net, baselines)?;
    let loss = trace.loss;
    let values = reverse_pass(net, trace, |site| {
        let s = sigma_of(site.record, site.index)?;
        Ok((site.record.output - s) * (loss - baselines[site.index]))
    })?;
    Ok(GradientEstimate::new(values, kind, 1))
}

/// `(h_i - σ(a_i)) · L` per stochastic unit, mapped to parameters.
pub fn unbiased_estimate(net: &LayeredNetwork, trace: &ForwardTrace) -> Result<GradientEstimate> {
    let zeros = vec![0.0; net.stochastic_unit_count()];
    score_function(net, trace, &zeros, EstimatorKind::Unbiased)
}

/// `(h_i - σ(a_i)) · (L - L̄_i)` with `L̄_i` read from `tracker` as it stands.
/// Update the tracker with this trace only afterwards.
pub fn centered_estimate(
    net: &LayeredNetwork,
    trace: &ForwardTrace,
    tracker: &BaselineTracker,
) -> Result<GradientEstimate> {
    score_function(net, trace, &tracker.baselines(), EstimatorKind::Centered)
}

/// Centered estimator with explicit per-unit constant baselines.
pub fn centered_estimate_with(
    net: &LayeredNetwork,
    trace: &ForwardTrace,
    baselines: &[f64],
) -> Result<GradientEstimate> {
    score_function(net, trace, baselines, EstimatorKind::Centered)
}

/// Per-unit values `(h_i - σ(a_i)) · L`, gradients w.r.t. the activations.
pub fn unbiased_unit_values(net: &LayeredNetwork, trace: &ForwardTrace) -> Result<Vec<f64>> {
    trace
        .stochastic_records(net)
        .into_iter()
        .enumerate()
        .map(|(i, rec)| Ok((rec.output - sigma_of(rec, i)?) * trace.loss))
        .collect()
}

fn straight_through_incoming(site: &StochasticSite<'_>) -> Result<f64> {
    site.incoming
        .ok_or_else(|| Error::contract("straight-through needs a differentiable loss".to_string()))
}

/// Back-propagation treating each binary threshold as the identity.
pub fn straight_through_backward(
    net: &LayeredNetwork,
    trace: &ForwardTrace,
) -> Result<GradientEstimate> {
    if !net.loss().is_differentiable() {
        return Err(Error::contract(format!(
            "straight-through needs a differentiable loss, `{}` is not",
            net.loss().name()
        )));
    }
    let values = reverse_pass(net, trace, straight_through_incoming)?;
    Ok(GradientEstimate::new(
        values,
        EstimatorKind::StraightThrough,
        1,
    ))
}

/// Straight-through values `Ĝ_i` w.r.t. each stochastic unit's activation.
pub fn straight_through_unit_values(
    net: &LayeredNetwork,
    trace: &ForwardTrace,
) -> Result<Vec<f64>> {
    let mut per_unit = vec![0.0; net.stochastic_unit_count()];
    reverse_pass(net, trace, |site| {
        let g = straight_through_incoming(site)?;
        per_unit[site.index] = g;
        Ok(g)
    })?;
    Ok(per_unit)
}

/// Per-unit running estimate of the variance-minimising baseline
/// `L̄_i = E[(h_i - σ(a_i))² L] / E[(h_i - σ(a_i))²]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineTracker {
    numerators: Vec<f64>,
    denominators: Vec<f64>,
    decay: f64,
    epsilon_guard: f64,
    updates: u64,
}

impl BaselineTracker {
    pub const DEFAULT_DECAY: f64 = 0.99;
    pub const DEFAULT_EPSILON_GUARD: f64 = 1e-8;

    /// `decay = 1` gives plain cumulative averages; below 1 the averages are
    /// exponential, with weight `max(1/t, 1 - decay)` on the `t`-th update.
    pub fn new(units: usize, decay: f64, epsilon_guard: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::invalid(format!(
                "baseline decay must lie in (0, 1], got {decay}"
            )));
        }
        if !(epsilon_guard > 0.0) {
            return Err(Error::invalid(format!(
                "epsilon guard must be positive, got {epsilon_guard}"
            )));
        }
        Ok(Self {
            numerators: vec![0.0; units],
            denominators: vec![0.0; units],
            decay,
            epsilon_guard,
            updates: 0,
        })
    }

    pub fn with_defaults(units: usize) -> Self {
        Self::new(units, Self::DEFAULT_DECAY, Self::DEFAULT_EPSILON_GUARD)
            .expect("default tracker parameters are valid")
    }

    pub fn len(&self) -> usize {
        self.numerators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.numerators.is_empty()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn numerators(&self) -> &[f64] {
        &self.numerators
    }

    pub fn denominators(&self) -> &[f64] {
        &self.denominators
    }

    /// Current `L̄_i`; 0 for units whose denominator is within the guard.
    pub fn baselines(&self) -> Vec<f64> {
        self.numerators
            .iter()
            .zip(&self.denominators)
            .map(|(&n, &d)| if d > self.epsilon_guard { n / d } else { 0.0 })
            .collect()
    }

    /// Folds one trace into the running numerator and denominator.
    pub fn update(&mut self, net: &LayeredNetwork, trace: &ForwardTrace) -> Result<()> {
        let records = trace.stochastic_records(net);
        if records.len() != self.len() {
            return Err(Error::contract(format!(
                "tracker covers {} units, trace has {}",
                self.len(),
                records.len()
            )));
        }
        self.updates += 1;
        let weight = (1.0 / self.updates as f64).max(1.0 - self.decay);
        for (i, rec) in records.into_iter().enumerate() {
            let s = sigma_of(rec, i)?;
            let w2 = (rec.output - s).powi(2);
            self.numerators[i] += weight * (w2 * trace.loss - self.numerators[i]);
            self.denominators[i] += weight * (w2 - self.denominators[i]);
        }
        Ok(())
    }
}

/// Learned map from the straight-through value `Ĝ_i` to a prediction of the
/// unbiased value `ĝ_i`: `𝒢_i = α_i Ĝ_i + β_i (+ γ_i σ(a_i))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectorModel {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    /// Coefficient on σ(a_i), present when the optional regressor is on.
    gamma: Option<Vec<f64>>,
    learning_rate: f64,
}

/// Straight-through and unbiased per-unit values from a single trace.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectorSample {
    pub straight_through: Vec<f64>,
    pub unbiased: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl CorrectorSample {
    pub fn from_trace(net: &LayeredNetwork, trace: &ForwardTrace) -> Result<Self> {
        let sigma = trace
            .stochastic_records(net)
            .into_iter()
            .enumerate()
            .map(|(i, rec)| sigma_of(rec, i))
            .collect::<Result<_>>()?;
        Ok(Self {
            straight_through: straight_through_unit_values(net, trace)?,
            unbiased: unbiased_unit_values(net, trace)?,
            sigma,
        })
    }
}

impl CorrectorModel {
    /// Starts as the identity map (`α = 1`, `β = 0`), i.e. plain
    /// straight-through.
    pub fn new(units: usize, learning_rate: f64, sigma_feature: bool) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "corrector learning rate must be >= 0, got {learning_rate}"
            )));
        }
        Ok(Self {
            alpha: vec![1.0; units],
            beta: vec![0.0; units],
            gamma: sigma_feature.then(|| vec![0.0; units]),
            learning_rate,
        })
    }

    pub fn with_coefficients(alpha: Vec<f64>, beta: Vec<f64>, learning_rate: f64) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::invalid("alpha and beta lengths differ"));
        }
        let mut model = Self::new(alpha.len(), learning_rate, false)?;
        model.alpha = alpha;
        model.beta = beta;
        Ok(model)
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn predict(&self, unit: usize, straight_through: f64, sigma: f64) -> f64 {
        let mut out = self.alpha[unit] * straight_through + self.beta[unit];
        if let Some(gamma) = &self.gamma {
            out += gamma[unit] * sigma;
        }
        out
    }

    /// One gradient step with the model's own learning rate.
    pub fn train(&mut self, batch: &[CorrectorSample]) -> Result<()> {
        self.train_step(batch, self.learning_rate)
    }

    /// One gradient-descent step on the batch-mean of
    /// `½ (ĝ_i - 𝒢_i)²`, independently per unit.
    pub fn train_step(&mut self, batch: &[CorrectorSample], learning_rate: f64) -> Result<()> {
        if batch.is_empty() || learning_rate == 0.0 {
            return Ok(());
        }
        let units = self.len();
        if batch.iter().any(|s| {
            s.straight_through.len() != units || s.unbiased.len() != units || s.sigma.len() != units
        }) {
            return Err(Error::contract("corrector sample width mismatch"));
        }
        let scale = learning_rate / batch.len() as f64;
        for i in 0..units {
            let (mut d_alpha, mut d_beta, mut d_gamma) = (0.0, 0.0, 0.0);
            for s in batch {
                let residual = s.unbiased[i] - self.predict(i, s.straight_through[i], s.sigma[i]);
                d_alpha += residual * s.straight_through[i];
                d_beta += residual;
                d_gamma += residual * s.sigma[i];
            }
            self.alpha[i] += scale * d_alpha;
            self.beta[i] += scale * d_beta;
            if let Some(gamma) = &mut self.gamma {
                gamma[i] += scale * d_gamma;
            }
        }
        Ok(())
    }
}

/// `base / (1 + decay · step)`.
pub fn decayed_rate(base: f64, decay: f64, step: usize) -> f64 {
    base / (1.0 + decay * step as f64)
}

/// Straight-through pass with each stochastic unit's `Ĝ_i` replaced by the
/// corrector's prediction before it reaches the unit's parameters.
pub fn corrected_estimate(
    net: &LayeredNetwork,
    trace: &ForwardTrace,
    model: &CorrectorModel,
) -> Result<GradientEstimate> {
    if model.len() != net.stochastic_unit_count() {
        return Err(Error::contract(format!(
            "corrector covers {} units, network has {}",
            model.len(),
            net.stochastic_unit_count()
        )));
    }
    let values = reverse_pass(net, trace, |site| {
        let g = straight_through_incoming(site)?;
        let s = sigma_of(site.record, site.index)?;
        Ok(model.predict(site.index, g, s))
    })?;
    Ok(GradientEstimate::new(values, EstimatorKind::Corrected, 1))
}

/// Simultaneous perturbation: `(f(θ+Δ) - f(θ-Δ)) / (2Δ_i)` with
/// `Δ_i = ±c` drawn as fair signs, so no coordinate is ever near zero.
pub fn spsa_estimate<F>(
    loss_fn: F,
    theta: &[f64],
    stream: &mut NoiseStream,
    c: f64,
) -> Result<GradientEstimate>
where
    F: Fn(&[f64]) -> f64,
{
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::invalid(format!(
            "SPSA scale c must be positive, got {c}"
        )));
    }
    let delta: Vec<f64> = theta.iter().map(|_| c * stream.draw_sign()).collect();
    let plus: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t + d).collect();
    let minus: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t - d).collect();
    let diff = loss_fn(&plus) - loss_fn(&minus);
    let values = delta.iter().map(|d| diff / (2.0 * d)).collect();
    Ok(GradientEstimate::new(values, EstimatorKind::Spsa, 1))
}

/// Central differences, one coordinate at a time.
pub fn finite_difference<F>(loss_fn: F, theta: &[f64], epsilon: f64) -> Result<GradientEstimate>
where
    F: Fn(&[f64]) -> f64,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference epsilon must be positive, got {epsilon}"
        )));
    }
    let mut point = theta.to_vec();
    let values = (0..theta.len())
        .map(|i| {
            point[i] = theta[i] + epsilon;
            let up = loss_fn(&point);
            point[i] = theta[i] - epsilon;
            let down = loss_fn(&point);
            point[i] = theta[i];
            (up - down) / (2.0 * epsilon)
        })
        .collect();
    Ok(GradientEstimate::new(values, EstimatorKind::FiniteDiff, 1))
}
