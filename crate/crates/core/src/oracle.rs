//! Exact expectations for small stochastic networks.
//!
//! Every joint configuration of the stochastic binary units is visited in
//! topological order. A configuration's probability is the product of
//! `σ(a_i)^{h_i} (1 - σ(a_i))^{1 - h_i}`, with each `a_i` computed from the
//! configuration's own upstream values. Deterministic sigmoids and
//! zero-noise rectifiers are evaluated exactly along the way.

use crate::estimators::{
    centered_estimate_with, straight_through_backward, unbiased_estimate, EstimateSource,
    EstimatorKind, GradientEstimate,
};
use crate::network::{sigmoid, ForwardTrace, LayerTrace, LayeredNetwork, UnitKind, UnitRecord};
use crate::{Error, Result};

/// Largest number of stochastic units the oracle will enumerate.
pub const MAX_ENUMERATED_UNITS: usize = 16;

pub const DEFAULT_GRADIENT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Configuration {
    /// Bit `i` holds the output of stochastic unit `i`.
    pub bits: u32,
    pub probability: f64,
    pub loss: f64,
    /// The forward record this configuration corresponds to. Binary units
    /// carry `σ(a)` but no noise.
    pub trace: ForwardTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnumerationResult {
    pub expected_loss: f64,
    pub configurations: Vec<Configuration>,
    pub unit_count: usize,
}

impl EnumerationResult {
    pub fn total_probability(&self) -> f64 {
        self.configurations.iter().map(|c| c.probability).sum()
    }
}

/// Finite-difference scheme applied to the enumerated expected loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DifferenceScheme {
    #[default]
    Central,
    /// `(4 D(ε/2) - D(ε)) / 3` on top of central differences.
    Richardson,
}

fn check_enumerable(net: &LayeredNetwork) -> Result<usize> {
    for (l, layer) in net.layers().iter().enumerate() {
        if let UnitKind::NoisyRectifier { sigma } = layer.kind() {
            if sigma > 0.0 {
                return Err(Error::contract(format!(
                    "layer {l}: noisy rectifier with sigma {sigma} cannot be enumerated"
                )));
            }
        }
    }
    let units = net.stochastic_unit_count();
    if units > MAX_ENUMERATED_UNITS {
        return Err(Error::Capacity {
            units,
            limit: MAX_ENUMERATED_UNITS,
        });
    }
    Ok(units)
}

struct Walk<'a, F> {
    net: &'a LayeredNetwork,
    target: &'a [f64],
    visit: F,
}

impl<F> Walk<'_, F>
where
    F: FnMut(u32, f64, &[LayerTrace], f64),
{
    fn descend(
        &mut self,
        l: usize,
        input: Vec<f64>,
        probability: f64,
        bits: u32,
        stochastic_base: usize,
        done: &mut Vec<LayerTrace>,
    ) -> Result<()> {
        let layers = self.net.layers();
        if l == layers.len() {
            let loss = self.net.loss().value(&input, self.target);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: self.net.loss().name().to_string(),
                    value: loss,
                });
            }
            (self.visit)(bits, probability, done, loss);
            return Ok(());
        }
        let layer = &layers[l];
        let mut activations = Vec::with_capacity(layer.units());
        for j in 0..layer.units() {
            let a = layer.bias(j)
                + layer
                    .weight_row(j)
                    .iter()
                    .zip(&input)
                    .map(|(w, x)| w * x)
                    .sum::<f64>();
            if !a.is_finite() {
                return Err(Error::Overflow { layer: l, unit: j });
            }
            activations.push(a);
        }

        let branches: Vec<(u32, f64, Vec<UnitRecord>)> = match layer.kind() {
            UnitKind::DeterministicSigmoid => vec![(
                0,
                1.0,
                activations
                    .iter()
                    .map(|&a| UnitRecord {
                        activation: a,
                        sigma_a: None,
                        noise: None,
                        output: sigmoid(a),
                    })
                    .collect(),
            )],
            UnitKind::NoisyRectifier { .. } => vec![(
                0,
                1.0,
                activations
                    .iter()
                    .map(|&a| UnitRecord {
                        activation: a,
                        sigma_a: None,
                        noise: Some(0.0),
                        output: a.max(0.0),
                    })
                    .collect(),
            )],
            UnitKind::StochasticBinary => {
                let probs: Vec<f64> = activations.iter().map(|&a| sigmoid(a)).collect();
                (0..1u32 << layer.units())
                    .map(|mask| {
                        let mut p = 1.0;
                        let records = activations
                            .iter()
                            .zip(&probs)
                            .enumerate()
                            .map(|(j, (&a, &s))| {
                                let on = mask >> j & 1 == 1;
                                p *= if on { s } else { 1.0 - s };
                                UnitRecord {
                                    activation: a,
                                    sigma_a: Some(s),
                                    noise: None,
                                    output: if on { 1.0 } else { 0.0 },
                                }
                            })
                            .collect();
                        (mask << stochastic_base, p, records)
                    })
                    .collect()
            }
        };

        let next_base = stochastic_base
            + if layer.kind().is_stochastic_binary() {
                layer.units()
            } else {
                0
            };
        for (mask, p, records) in branches {
            let outputs: Vec<f64> = records.iter().map(|r| r.output).collect();
            done.push(LayerTrace {
                input: input.clone(),
                units: records,
            });
            let result = self.descend(
                l + 1,
                outputs,
                probability * p,
                bits | mask,
                next_base,
                done,
            );
            done.pop();
            result?;
        }
        Ok(())
    }
}

fn walk<F>(net: &LayeredNetwork, x: &[f64], target: &[f64], visit: F) -> Result<()>
where
    F: FnMut(u32, f64, &[LayerTrace], f64),
{
    check_enumerable(net)?;
    net.check_io(x, target)?;
    let mut w = Walk { net, target, visit };
    w.descend(0, x.to_vec(), 1.0, 0, 0, &mut Vec::new())
}

/// Enumerates every configuration and returns `Σ P(config) · L(config)`.
pub fn exact_expected_loss(
    net: &LayeredNetwork,
    x: &[f64],
    target: &[f64],
) -> Result<EnumerationResult> {
    let mut configurations = Vec::new();
    let mut expected_loss = 0.0;
    walk(net, x, target, |bits, probability, layers, loss| {
        expected_loss += probability * loss;
        configurations.push(Configuration {
            bits,
            probability,
            loss,
            trace: ForwardTrace {
                input: x.to_vec(),
                target: target.to_vec(),
                layers: layers.to_vec(),
                loss,
            },
        });
    })?;
    Ok(EnumerationResult {
        expected_loss,
        configurations,
        unit_count: net.stochastic_unit_count(),
    })
}

/// Expected loss alone, without materialising configurations.
pub fn expected_loss(net: &LayeredNetwork, x: &[f64], target: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    walk(net, x, target, |_, p, _, loss| total += p * loss)?;
    Ok(total)
}

/// Expected loss averaged over a list of `(input, target)` examples.
pub fn expected_loss_over(net: &LayeredNetwork, examples: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples supplied"));
    }
    let mut total = 0.0;
    for (x, t) in examples {
        total += expected_loss(net, x, t)?;
    }
    Ok(total / examples.len() as f64)
}

fn central_difference(
    net: &LayeredNetwork,
    eval: &dyn Fn(&LayeredNetwork) -> Result<f64>,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let theta = net.params();
    let mut probe = net.clone();
    let mut point = theta.clone();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        point[i] = theta[i] + epsilon;
        probe.set_params(&point)?;
        let up = eval(&probe)?;
        point[i] = theta[i] - epsilon;
        probe.set_params(&point)?;
        let down = eval(&probe)?;
        point[i] = theta[i];
        grad.push((up - down) / (2.0 * epsilon));
    }
    Ok(grad)
}

fn difference_gradient(
    net: &LayeredNetwork,
    eval: &dyn Fn(&LayeredNetwork) -> Result<f64>,
    epsilon: f64,
    scheme: DifferenceScheme,
) -> Result<GradientEstimate> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let values = match scheme {
        DifferenceScheme::Central => central_difference(net, eval, epsilon)?,
        DifferenceScheme::Richardson => {
            let coarse = central_difference(net, eval, epsilon)?;
            let fine = central_difference(net, eval, epsilon / 2.0)?;
            fine.iter()
                .zip(&coarse)
                .map(|(f, c)| (4.0 * f - c) / 3.0)
                .collect()
        }
    };
    Ok(GradientEstimate::new(
        values,
        EstimateSource::Enumeration,
        0,
    ))
}

/// Gradient of the enumerated expected loss by central differences.
pub fn exact_gradient(
    net: &LayeredNetwork,
    x: &[f64],
    target: &[f64],
    epsilon: f64,
    scheme: DifferenceScheme,
) -> Result<GradientEstimate> {
    check_enumerable(net)?;
    difference_gradient(net, &|n| expected_loss(n, x, target), epsilon, scheme)
}

/// Gradient of [`expected_loss_over`].
pub fn exact_gradient_over(
    net: &LayeredNetwork,
    examples: &[(Vec<f64>, Vec<f64>)],
    epsilon: f64,
    scheme: DifferenceScheme,
) -> Result<GradientEstimate> {
    check_enumerable(net)?;
    difference_gradient(net, &|n| expected_loss_over(n, examples), epsilon, scheme)
}

/// `σ(a)(1 - σ(a)) (L(1) - L(0))`: the derivative of the expected loss of a
/// single stochastic unit with respect to its activation.
pub fn single_unit_gradient(activation: f64, loss_on: f64, loss_off: f64) -> f64 {
    let s = sigmoid(activation);
    s * (1.0 - s) * (loss_on - loss_off)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Exact mean and variance of an estimator over the enumerated
/// configurations. `baseline` is the constant `L̄` used by the centered
/// estimator for every unit.
pub fn exact_estimator_moments(
    net: &LayeredNetwork,
    x: &[f64],
    target: &[f64],
    estimator: EstimatorKind,
    baseline: f64,
) -> Result<ExactMoments> {
    let baselines = vec![baseline; net.stochastic_unit_count()];
    let evaluate = |trace: &ForwardTrace| -> Result<GradientEstimate> {
        match estimator {
            EstimatorKind::Unbiased => unbiased_estimate(net, trace),
            EstimatorKind::Centered => centered_estimate_with(net, trace, &baselines),
            EstimatorKind::StraightThrough => straight_through_backward(net, trace),
            other => Err(Error::contract(format!(
                "exact moments are not defined for the `{}` estimator",
                other.name()
            ))),
        }
    };
    let enumeration = exact_expected_loss(net, x, target)?;
    let values: Vec<(f64, Vec<f64>)> = enumeration
        .configurations
        .iter()
        .map(|c| Ok((c.probability, evaluate(&c.trace)?.values)))
        .collect::<Result<_>>()?;
    let dim = net.param_count();
    let mut mean = vec![0.0; dim];
    for (p, v) in &values {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += p * x;
        }
    }
    let mut variance = vec![0.0; dim];
    for (p, v) in &values {
        for ((var, x), m) in variance.iter_mut().zip(v).zip(&mean) {
            *var += p * (x - m) * (x - m);
        }
    }
    Ok(ExactMoments { mean, variance })
}

/// The variance-minimising baselines `E[(h_i-σ)² L] / E[(h_i-σ)²]`, exactly.
pub fn optimal_baselines(net: &LayeredNetwork, x: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    let units = net.stochastic_units();
    let mut num = vec![0.0; units.len()];
    let mut den = vec![0.0; units.len()];
    walk(net, x, target, |_, p, layers, loss| {
        for (i, &(l, j)) in units.iter().enumerate() {
            let rec = &layers[l].units[j];
            let w = (rec.output - rec.sigma_a.unwrap_or(0.0)).powi(2);
            num[i] += p * w * loss;
            den[i] += p * w;
        }
    })?;
    Ok(num
        .iter()
        .zip(&den)
        .map(|(n, d)| if *d > 0.0 { n / d } else { 0.0 })
        .collect())
}
