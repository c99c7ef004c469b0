//! Semi-hard units: `h = max(0, z + a)` with Gaussian `z`.
//!
//! With the realised noise held fixed the unit is an ordinary rectifier, so
//! the loss of a recorded trace is differentiable almost everywhere and its
//! gradient is computed by a plain reverse pass. Units whose argument is
//! negative pass no gradient, which is what makes the gradients sparse.
//!
//! [`FiringRateController`] keeps units from dying by nudging each unit's
//! bias according to a moving average of how often it is active.

use serde::{Deserialize, Serialize};

use crate::backprop::reverse_pass;
use crate::estimators::{EstimateSource, GradientEstimate};
use crate::network::{ForwardTrace, LayeredNetwork, UnitKind};
use crate::{Error, Result};

/// Exact gradient of the trace's loss with its noise held fixed.
pub fn semihard_backward(net: &LayeredNetwork, trace: &ForwardTrace) -> Result<GradientEstimate> {
    if !net.loss().is_differentiable() {
        return Err(Error::contract(format!(
            "semi-hard backward needs a differentiable loss, `{}` is not",
            net.loss().name()
        )));
    }
    let values = reverse_pass(net, trace, |site| {
        Err(Error::contract(format!(
            "stochastic binary unit {} has no pathwise gradient",
            site.index
        )))
    })?;
    Ok(GradientEstimate::new(values, EstimateSource::Semihard, 1))
}

/// How the controller turns a unit's activity average into a bias move.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerRule {
    /// Up below `threshold`, down above `1 - threshold`.
    Threshold,
    /// Up below `target_rate`, down above it. Units below `threshold` are
    /// always below the target, so they are still pushed up every call.
    #[default]
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub target_rate: f64,
    /// Defaults to `target_rate / 2`.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default = "ControllerConfig::default_bias_step")]
    pub bias_step: f64,
    #[serde(default = "ControllerConfig::default_ma_decay")]
    pub ma_decay: f64,
    #[serde(default)]
    pub rule: ControllerRule,
}

impl ControllerConfig {
    fn default_bias_step() -> f64 {
        0.01
    }

    fn default_ma_decay() -> f64 {
        0.99
    }

    pub fn new(target_rate: f64) -> Self {
        Self {
            target_rate,
            threshold: None,
            bias_step: Self::default_bias_step(),
            ma_decay: Self::default_ma_decay(),
            rule: ControllerRule::default(),
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold.unwrap_or(self.target_rate / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let in_open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_open_unit(self.target_rate) {
            return Err(Error::invalid(format!(
                "target_rate must lie in (0, 1), got {}",
                self.target_rate
            )));
        }
        let threshold = self.threshold();
        if !in_open_unit(threshold) {
            return Err(Error::invalid(format!(
                "threshold must lie in (0, 1), got {threshold}"
            )));
        }
        match self.rule {
            ControllerRule::Threshold if threshold >= 0.5 => {
                return Err(Error::invalid("threshold rule needs threshold < 0.5"));
            }
            ControllerRule::Target if threshold > self.target_rate => {
                return Err(Error::invalid("threshold must not exceed target_rate"));
            }
            _ => {}
        }
        if !(self.bias_step > 0.0 && self.bias_step.is_finite()) {
            return Err(Error::invalid("bias_step must be positive"));
        }
        if !in_open_unit(self.ma_decay) {
            return Err(Error::invalid("ma_decay must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Per-unit moving average of `1[h > 0]` and the bias rule acting on it.
/// Governs every noisy rectifier and stochastic binary unit.
#[derive(Clone, Debug, PartialEq)]
pub struct FiringRateController {
    config: ControllerConfig,
    units: Vec<(usize, usize)>,
    rates: Vec<f64>,
}

impl FiringRateController {
    /// Averages start at the target rate.
    pub fn new(net: &LayeredNetwork, config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        let units: Vec<(usize, usize)> = net
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, layer)| !matches!(layer.kind(), UnitKind::DeterministicSigmoid))
            .flat_map(|(l, layer)| (0..layer.units()).map(move |j| (l, j)))
            .collect();
        let rates = vec![config.target_rate; units.len()];
        Ok(Self {
            config,
            units,
            rates,
        })
    }

    pub fn with_rates(mut self, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != self.units.len() || rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid(
                "rates must be in [0, 1], one per governed unit",
            ));
        }
        self.rates = rates;
        Ok(self)
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    /// `(layer, unit)` of each governed unit.
    pub fn units(&self) -> &[(usize, usize)] {
        &self.units
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Folds `recent_traces` into the activity averages, then moves each
    /// governed unit's bias by at most one step.
    pub fn adjust_bias(
        &mut self,
        net: &mut LayeredNetwork,
        recent_traces: &[ForwardTrace],
    ) -> Result<()> {
        let decay = self.config.ma_decay;
        for trace in recent_traces {
            for (rate, &(l, j)) in self.rates.iter_mut().zip(&self.units) {
                let unit = trace
                    .layers
                    .get(l)
                    .and_then(|lt| lt.units.get(j))
                    .ok_or_else(|| {
                        Error::contract("trace does not match the controlled network")
                    })?;
                let active = if unit.output > 0.0 { 1.0 } else { 0.0 };
                *rate = (decay * *rate + (1.0 - decay) * active).clamp(0.0, 1.0);
            }
        }
        let threshold = self.config.threshold();
        let (low, high) = match self.config.rule {
            ControllerRule::Threshold => (threshold, 1.0 - threshold),
            ControllerRule::Target => (self.config.target_rate, self.config.target_rate),
        };
        for (&rate, &(l, j)) in self.rates.iter().zip(&self.units) {
            let bias = net.layer_mut(l).bias_mut(j);
            if rate < low {
                *bias += self.config.bias_step;
            } else if rate > high {
                *bias -= self.config.bias_step;
            }
        }
        Ok(())
    }
}
