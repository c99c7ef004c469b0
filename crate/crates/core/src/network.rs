//! Layered feedforward networks and the forward pass.
//!
//! Unit `i` of a layer computes the activation `a_i = b_i + W_i · x_i` from
//! the previous layer's outputs `x_i`, then applies one of three
//! nonlinearities ([`UnitKind`]). The forward pass records everything the
//! estimators need in a [`ForwardTrace`].

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::noise::{NoiseStream, UnitStreams};
use crate::{Error, Result};

/// Stream id reserved for weight initialisation.
const INIT_STREAM: u64 = u64::MAX;

/// Clamp applied to outputs before taking logarithms in the cross-entropy.
pub const CROSS_ENTROPY_CLAMP: f64 = 1e-6;

/// Logistic sigmoid, stable for any finite input.
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum UnitKind {
    DeterministicSigmoid,
    /// Emits 1 iff `z < σ(a)` with `z ~ U[0,1)`, so `P(h = 1) = σ(a)`.
    StochasticBinary,
    /// `h = max(0, z + a)` with `z ~ N(0, sigma²)`.
    NoisyRectifier {
        sigma: f64,
    },
}

impl UnitKind {
    pub fn is_stochastic_binary(&self) -> bool {
        matches!(self, UnitKind::StochasticBinary)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            UnitKind::NoisyRectifier { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => Err(
                Error::invalid(format!("noisy rectifier sigma must be >= 0, got {sigma}")),
            ),
            _ => Ok(()),
        }
    }
}

type LossFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
type LossGradFn = dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync;

/// A loss supplied as closures. Not loadable from configuration files.
#[derive(Clone)]
pub struct CustomLoss {
    name: String,
    value: Arc<LossFn>,
    gradient: Option<Arc<LossGradFn>>,
}

impl CustomLoss {
    pub fn new(
        name: impl Into<String>,
        value: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
            gradient: None,
        }
    }

    pub fn with_gradient(
        mut self,
        gradient: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }
}

impl fmt::Debug for CustomLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomLoss")
            .field("name", &self.name)
            .field("differentiable", &self.gradient.is_some())
            .finish()
    }
}

/// Scalar loss over the final layer's outputs and a target vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LossSpec {
    /// `Σ (h_k - t_k)²`
    SquaredError,
    /// `-Σ t_k ln p_k + (1 - t_k) ln(1 - p_k)`, `p_k` = output clamped to
    /// `[CROSS_ENTROPY_CLAMP, 1 - CROSS_ENTROPY_CLAMP]`.
    CrossEntropy,
    /// `Σ h_k`; ignores the target.
    Sum,
    /// Parity of the (binary) outputs; not differentiable.
    Parity,
    Custom(CustomLoss),
}

impl LossSpec {
    pub const REGISTERED: [&'static str; 4] = ["squared_error", "cross_entropy", "sum", "parity"];

    pub fn custom(
        name: impl Into<String>,
        value: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        LossSpec::Custom(CustomLoss::new(name, value))
    }

    pub fn name(&self) -> &str {
        match self {
            LossSpec::SquaredError => "squared_error",
            LossSpec::CrossEntropy => "cross_entropy",
            LossSpec::Sum => "sum",
            LossSpec::Parity => "parity",
            LossSpec::Custom(c) => &c.name,
        }
    }

    /// Whether the loss compares outputs against a target of equal width.
    pub fn uses_target(&self) -> bool {
        matches!(self, LossSpec::SquaredError | LossSpec::CrossEntropy)
    }

    pub fn is_differentiable(&self) -> bool {
        match self {
            LossSpec::Parity => false,
            LossSpec::Custom(c) => c.gradient.is_some(),
            _ => true,
        }
    }

    pub fn value(&self, outputs: &[f64], target: &[f64]) -> f64 {
        match self {
            LossSpec::SquaredError => outputs
                .iter()
                .zip(target)
                .map(|(h, t)| (h - t) * (h - t))
                .sum(),
            LossSpec::CrossEntropy => outputs
                .iter()
                .zip(target)
                .map(|(&h, &t)| {
                    let p = h.clamp(CROSS_ENTROPY_CLAMP, 1.0 - CROSS_ENTROPY_CLAMP);
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                })
                .sum(),
            LossSpec::Sum => outputs.iter().sum(),
            LossSpec::Parity => {
                let ones = outputs.iter().filter(|&&h| h > 0.5).count();
                (ones % 2) as f64
            }
            LossSpec::Custom(c) => (c.value)(outputs, target),
        }
    }

    /// `∂L/∂h`, or `None` for non-differentiable losses.
    pub fn gradient(&self, outputs: &[f64], target: &[f64]) -> Option<Vec<f64>> {
        match self {
            LossSpec::SquaredError => Some(
                outputs
                    .iter()
                    .zip(target)
                    .map(|(h, t)| 2.0 * (h - t))
                    .collect(),
            ),
            LossSpec::CrossEntropy => Some(
                outputs
                    .iter()
                    .zip(target)
                    .map(|(&h, &t)| {
                        let p = h.clamp(CROSS_ENTROPY_CLAMP, 1.0 - CROSS_ENTROPY_CLAMP);
                        -t / p + (1.0 - t) / (1.0 - p)
                    })
                    .collect(),
            ),
            LossSpec::Sum => Some(vec![1.0; outputs.len()]),
            LossSpec::Parity => None,
            LossSpec::Custom(c) => c.gradient.as_ref().map(|g| g(outputs, target)),
        }
    }
}

impl TryFrom<String> for LossSpec {
    type Error = String;

    fn try_from(name: String) -> std::result::Result<Self, String> {
        match name.as_str() {
            "squared_error" => Ok(LossSpec::SquaredError),
            "cross_entropy" => Ok(LossSpec::CrossEntropy),
            "sum" => Ok(LossSpec::Sum),
            "parity" => Ok(LossSpec::Parity),
            other => Err(format!(
                "unknown loss `{other}`, expected one of {}",
                LossSpec::REGISTERED.join(", ")
            )),
        }
    }
}

impl PartialEq for LossSpec {
    /// Registered losses compare by identity, custom losses by name.
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (LossSpec::Custom(a), LossSpec::Custom(b)) => a.name == b.name,
            (LossSpec::Custom(_), _) | (_, LossSpec::Custom(_)) => false,
            _ => self.name() == other.name(),
        }
    }
}

impl From<LossSpec> for String {
    fn from(loss: LossSpec) -> String {
        loss.name().to_string()
    }
}

/// One layer: `units` affine units sharing a nonlinearity.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    kind: UnitKind,
    inputs: usize,
    biases: Vec<f64>,
    /// Row-major `units × inputs`.
    weights: Vec<f64>,
}

impl Layer {
    pub fn new(kind: UnitKind, weights: Vec<Vec<f64>>, biases: Vec<f64>) -> Result<Self> {
        kind.validate()?;
        if weights.is_empty() {
            return Err(Error::invalid("layer needs at least one unit"));
        }
        if weights.len() != biases.len() {
            return Err(Error::invalid(format!(
                "layer has {} weight rows but {} biases",
                weights.len(),
                biases.len()
            )));
        }
        let inputs = weights.first().map_or(0, Vec::len);
        if weights.iter().any(|row| row.len() != inputs) {
            return Err(Error::invalid("weight rows have unequal lengths"));
        }
        let layer = Self {
            kind,
            inputs,
            biases,
            weights: weights.into_iter().flatten().collect(),
        };
        if layer
            .biases
            .iter()
            .chain(&layer.weights)
            .any(|p| !p.is_finite())
        {
            return Err(Error::invalid("layer parameters must be finite"));
        }
        Ok(layer)
    }

    /// Zero-initialised layer of the given shape.
    pub fn with_shape(kind: UnitKind, units: usize, inputs: usize) -> Result<Self> {
        kind.validate()?;
        if units == 0 {
            return Err(Error::invalid("layer needs at least one unit"));
        }
        Ok(Self {
            kind,
            inputs,
            biases: vec![0.0; units],
            weights: vec![0.0; units * inputs],
        })
    }

    pub fn kind(&self) -> UnitKind {
        self.kind
    }

    pub fn units(&self) -> usize {
        self.biases.len()
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn bias(&self, unit: usize) -> f64 {
        self.biases[unit]
    }

    pub fn bias_mut(&mut self, unit: usize) -> &mut f64 {
        &mut self.biases[unit]
    }

    pub fn weight(&self, unit: usize, input: usize) -> f64 {
        self.weights[unit * self.inputs + input]
    }

    pub fn weight_mut(&mut self, unit: usize, input: usize) -> &mut f64 {
        &mut self.weights[unit * self.inputs + input]
    }

    pub fn weight_row(&self, unit: usize) -> &[f64] {
        &self.weights[unit * self.inputs..(unit + 1) * self.inputs]
    }

    fn param_count(&self) -> usize {
        self.biases.len() + self.weights.len()
    }

    fn activation(&self, unit: usize, x: &[f64]) -> f64 {
        self.biases[unit]
            + self
                .weight_row(unit)
                .iter()
                .zip(x)
                .map(|(w, xi)| w * xi)
                .sum::<f64>()
    }
}

/// Feedforward stack of layers plus the loss applied to the last layer.
///
/// Parameters are laid out layer by layer; within a layer all biases come
/// first, then the weights row by row.
#[derive(Clone, Debug)]
pub struct LayeredNetwork {
    input_width: usize,
    layers: Vec<Layer>,
    loss: LossSpec,
}

impl LayeredNetwork {
    pub fn new(input_width: usize, layers: Vec<Layer>, loss: LossSpec) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        let mut width = input_width;
        for (l, layer) in layers.iter().enumerate() {
            if layer.inputs != width {
                return Err(Error::invalid(format!(
                    "layer {l} expects {} inputs but receives {width}",
                    layer.inputs
                )));
            }
            width = layer.units();
        }
        Ok(Self {
            input_width,
            layers,
            loss,
        })
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Layer::units)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Layer {
        &mut self.layers[l]
    }

    pub fn loss(&self) -> &LossSpec {
        &self.loss
    }

    pub fn set_loss(&mut self, loss: LossSpec) {
        self.loss = loss;
    }

    pub fn unit_count(&self) -> usize {
        self.layers.iter().map(Layer::units).sum()
    }

    /// `(layer, unit)` of every stochastic binary unit, in topological order.
    pub fn stochastic_units(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, layer)| layer.kind.is_stochastic_binary())
            .flat_map(|(l, layer)| (0..layer.units()).map(move |j| (l, j)))
            .collect()
    }

    pub fn stochastic_unit_count(&self) -> usize {
        self.stochastic_units().len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn layer_offset(&self, l: usize) -> usize {
        self.layers[..l].iter().map(Layer::param_count).sum()
    }

    pub fn bias_index(&self, l: usize, unit: usize) -> usize {
        self.layer_offset(l) + unit
    }

    pub fn weight_index(&self, l: usize, unit: usize, input: usize) -> usize {
        let layer = &self.layers[l];
        self.layer_offset(l) + layer.units() + unit * layer.inputs + input
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|layer| layer.biases.iter().chain(&layer.weights).copied())
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        let mut rest = params;
        for layer in &mut self.layers {
            let (b, tail) = rest.split_at(layer.biases.len());
            let (w, tail) = tail.split_at(layer.weights.len());
            layer.biases.copy_from_slice(b);
            layer.weights.copy_from_slice(w);
            rest = tail;
        }
        Ok(())
    }

    /// Human-readable identifiers such as `L0.b[1]` and `L1.W[0,2]`.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.param_count());
        for (l, layer) in self.layers.iter().enumerate() {
            names.extend((0..layer.units()).map(|j| format!("L{l}.b[{j}]")));
            for j in 0..layer.units() {
                names.extend((0..layer.inputs).map(|k| format!("L{l}.W[{j},{k}]")));
            }
        }
        names
    }

    /// Target width required by the loss, if any.
    pub fn check_io(&self, x: &[f64], target: &[f64]) -> Result<()> {
        if x.len() != self.input_width {
            return Err(Error::invalid(format!(
                "input has width {}, network expects {}",
                x.len(),
                self.input_width
            )));
        }
        if self.loss.uses_target() && target.len() != self.output_width() {
            return Err(Error::invalid(format!(
                "target has width {}, network outputs {}",
                target.len(),
                self.output_width()
            )));
        }
        Ok(())
    }
}

/// Per-unit forward record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub activation: f64,
    /// `σ(a)`, recorded for stochastic binary units only.
    pub sigma_a: Option<f64>,
    /// The realised noise `z`; absent for deterministic units and for
    /// binary configurations produced by enumeration.
    pub noise: Option<f64>,
    pub output: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    /// Inputs `x` seen by every unit of the layer.
    pub input: Vec<f64>,
    pub units: Vec<UnitRecord>,
}

impl LayerTrace {
    pub fn outputs(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.output).collect()
    }
}

/// Complete record of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub layers: Vec<LayerTrace>,
    pub loss: f64,
}

impl ForwardTrace {
    pub fn outputs(&self) -> Vec<f64> {
        self.layers
            .last()
            .map(LayerTrace::outputs)
            .unwrap_or_default()
    }

    /// Records of the stochastic binary units of `net`, in the same order as
    /// [`LayeredNetwork::stochastic_units`].
    pub fn stochastic_records<'a>(&'a self, net: &LayeredNetwork) -> Vec<&'a UnitRecord> {
        net.stochastic_units()
            .into_iter()
            .map(|(l, j)| &self.layers[l].units[j])
            .collect()
    }
}

/// Where a unit sits when [`propagate`] asks for its record.
pub(crate) struct UnitSite {
    pub layer: usize,
    pub unit: usize,
    pub global: usize,
    pub kind: UnitKind,
    pub activation: f64,
}

/// Runs the affine maps layer by layer, delegating each unit's nonlinearity
/// (and noise) to `emit`.
pub(crate) fn propagate<F>(
    net: &LayeredNetwork,
    x: &[f64],
    target: &[f64],
    mut emit: F,
) -> Result<ForwardTrace>
where
    F: FnMut(UnitSite) -> Result<UnitRecord>,
{
    net.check_io(x, target)?;
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut input = x.to_vec();
    let mut global = 0;
    for (l, layer) in net.layers.iter().enumerate() {
        let mut units = Vec::with_capacity(layer.units());
        for j in 0..layer.units() {
            let activation = layer.activation(j, &input);
            if !activation.is_finite() {
                return Err(Error::Overflow { layer: l, unit: j });
            }
            units.push(emit(UnitSite {
                layer: l,
                unit: j,
                global,
                kind: layer.kind,
                activation,
            })?);
            global += 1;
        }
        let next: Vec<f64> = units.iter().map(|u| u.output).collect();
        layers.push(LayerTrace { input, units });
        input = next;
    }
    let loss = net.loss.value(&input, target);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss: net.loss.name().to_string(),
            value: loss,
        });
    }
    Ok(ForwardTrace {
        input: x.to_vec(),
        target: target.to_vec(),
        layers,
        loss,
    })
}

fn stream_for<'a>(streams: &'a mut UnitStreams, site: &UnitSite) -> Result<&'a mut NoiseStream> {
    let available = streams.len();
    streams.get_mut(site.global).ok_or_else(|| {
        Error::invalid(format!(
            "no noise stream for layer {} unit {} (global index {}, {available} streams supplied)",
            site.layer, site.unit, site.global
        ))
    })
}

fn sample_unit(site: UnitSite, streams: &mut UnitStreams) -> Result<UnitRecord> {
    let a = site.activation;
    Ok(match site.kind {
        UnitKind::DeterministicSigmoid => UnitRecord {
            activation: a,
            sigma_a: None,
            noise: None,
            output: sigmoid(a),
        },
        UnitKind::StochasticBinary => {
            let s = sigmoid(a);
            let z = stream_for(streams, &site)?.draw_uniform();
            // Tie z == σ(a) emits 0.
            let h = if z < s { 1.0 } else { 0.0 };
            UnitRecord {
                activation: a,
                sigma_a: Some(s),
                noise: Some(z),
                output: h,
            }
        }
        UnitKind::NoisyRectifier { sigma } => {
            let z = stream_for(streams, &site)?.draw_gaussian(sigma)?;
            UnitRecord {
                activation: a,
                sigma_a: None,
                noise: Some(z),
                output: (z + a).max(0.0),
            }
        }
    })
}

/// Forward pass drawing fresh noise for every stochastic unit from its own
/// stream. Handles all three unit kinds.
pub fn forward(
    net: &LayeredNetwork,
    x: &[f64],
    target: &[f64],
    streams: &mut UnitStreams,
) -> Result<ForwardTrace> {
    propagate(net, x, target, |site| sample_unit(site, streams))
}

/// Forward pass of a network of stochastic binary (and deterministic
/// sigmoid) units.
pub fn forward_stochastic(
    net: &LayeredNetwork,
    x: &[f64],
    target: &[f64],
    streams: &mut UnitStreams,
) -> Result<ForwardTrace> {
    if let Some(l) = net
        .layers
        .iter()
        .position(|layer| matches!(layer.kind, UnitKind::NoisyRectifier { sigma } if sigma > 0.0))
    {
        return Err(Error::contract(format!(
            "forward_stochastic: layer {l} is a noisy rectifier"
        )));
    }
    forward(net, x, target, streams)
}

/// Forward pass of a network of noisy rectifiers (and deterministic
/// sigmoids). The realised Gaussian noise is kept in the trace.
pub fn forward_semihard(
    net: &LayeredNetwork,
    x: &[f64],
    target: &[f64],
    streams: &mut UnitStreams,
) -> Result<ForwardTrace> {
    if let Some(l) = net
        .layers
        .iter()
        .position(|layer| layer.kind.is_stochastic_binary())
    {
        return Err(Error::contract(format!(
            "forward_semihard: layer {l} holds stochastic binary units"
        )));
    }
    forward(net, x, target, streams)
}

/// JSON description of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
    pub loss: LossSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub units: usize,
    pub kind: UnitKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biases: Option<Vec<f64>>,
}

impl NetworkSpec {
    /// Builds the network. Missing weights are drawn from
    /// `N(0, 1/fan_in)` using `seed`; missing biases are zero.
    pub fn build(&self, seed: u64) -> Result<LayeredNetwork> {
        let mut init = NoiseStream::new(seed, INIT_STREAM);
        let mut width = self.input_width;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, spec) in self.layers.iter().enumerate() {
            let mut layer = Layer::with_shape(spec.kind, spec.units, width)?;
            match &spec.weights {
                Some(rows) => {
                    if rows.len() != spec.units || rows.iter().any(|r| r.len() != width) {
                        return Err(Error::invalid(format!(
                            "layer {l}: weights must be {} x {width}",
                            spec.units
                        )));
                    }
                    layer.weights = rows.iter().flatten().copied().collect();
                }
                None => {
                    let sd = 1.0 / (width.max(1) as f64).sqrt();
                    for w in &mut layer.weights {
                        *w = init.draw_gaussian(sd)?;
                    }
                }
            }
            if let Some(b) = &spec.biases {
                if b.len() != spec.units {
                    return Err(Error::invalid(format!(
                        "layer {l}: expected {} biases, got {}",
                        spec.units,
                        b.len()
                    )));
                }
                layer.biases = b.clone();
            }
            if layer
                .biases
                .iter()
                .chain(&layer.weights)
                .any(|p| !p.is_finite())
            {
                return Err(Error::invalid(format!(
                    "layer {l}: parameters must be finite"
                )));
            }
            width = spec.units;
            layers.push(layer);
        }
        LayeredNetwork::new(self.input_width, layers, self.loss.clone())
    }
}
