//! Reverse pass over a recorded trace.
//!
//! Deterministic sigmoids and noisy rectifiers (with their recorded noise
//! held fixed) are differentiated normally. What flows out of a stochastic
//! binary unit's activation is decided by a caller-supplied rule, which is
//! how straight-through, corrected and score-function estimators share one
//! pass.

use crate::network::{ForwardTrace, LayeredNetwork, UnitKind, UnitRecord};
use crate::{Error, Result};

pub(crate) struct StochasticSite<'a> {
    /// Position among the network's stochastic binary units.
    pub index: usize,
    pub record: &'a UnitRecord,
    /// `∂L/∂h` arriving from above, when the layers above are differentiable.
    pub incoming: Option<f64>,
}

pub(crate) fn check_trace_shape(net: &LayeredNetwork, trace: &ForwardTrace) -> Result<()> {
    let layers = net.layers();
    if trace.layers.len() != layers.len() {
        return Err(Error::contract(format!(
            "trace has {} layers, network has {}",
            trace.layers.len(),
            layers.len()
        )));
    }
    for (l, (layer, lt)) in layers.iter().zip(&trace.layers).enumerate() {
        if lt.units.len() != layer.units() || lt.input.len() != layer.inputs() {
            return Err(Error::contract(format!(
                "trace layer {l} does not match the network's shape"
            )));
        }
    }
    Ok(())
}

/// Returns the gradient over the network's flat parameter vector.
pub(crate) fn reverse_pass<F>(
    net: &LayeredNetwork,
    trace: &ForwardTrace,
    mut stochastic_rule: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&StochasticSite<'_>) -> Result<f64>,
{
    check_trace_shape(net, trace)?;
    let layers = net.layers();
    let mut grads = vec![0.0; net.param_count()];
    let mut delta_h = net.loss().gradient(&trace.outputs(), &trace.target);

    let mut stochastic_base = net.stochastic_unit_count();
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let lt = &trace.layers[l];
        if layer.kind().is_stochastic_binary() {
            stochastic_base -= layer.units();
        }
        let needs_incoming = |j: usize| -> Result<f64> {
            delta_h.as_ref().map(|d| d[j]).ok_or_else(|| {
                Error::contract(format!(
                    "loss `{}` is not differentiable but layer {l} needs ∂L/∂h",
                    net.loss().name()
                ))
            })
        };

        let mut delta_a = Vec::with_capacity(layer.units());
        for (j, rec) in lt.units.iter().enumerate() {
            let d = match layer.kind() {
                UnitKind::DeterministicSigmoid => {
                    needs_incoming(j)? * rec.output * (1.0 - rec.output)
                }
                UnitKind::NoisyRectifier { .. } => {
                    let z = rec.noise.ok_or_else(|| {
                        Error::contract(format!(
                            "rectifier at layer {l}, unit {j} has no recorded noise"
                        ))
                    })?;
                    // Subgradient 0 at the kink.
                    if z + rec.activation > 0.0 {
                        needs_incoming(j)?
                    } else {
                        0.0
                    }
                }
                UnitKind::StochasticBinary => stochastic_rule(&StochasticSite {
                    index: stochastic_base + j,
                    record: rec,
                    incoming: delta_h.as_ref().map(|d| d[j]),
                })?,
            };
            delta_a.push(d);
        }

        let offset = net.layer_offset(l);
        let units = layer.units();
        for (j, &d) in delta_a.iter().enumerate() {
            grads[offset + j] += d;
            let row = offset + units + j * layer.inputs();
            for (k, &x) in lt.input.iter().enumerate() {
                grads[row + k] += d * x;
            }
        }

        delta_h = (l > 0).then(|| {
            (0..layer.inputs())
                .map(|k| {
                    delta_a
                        .iter()
                        .enumerate()
                        .map(|(j, d)| d * layer.weight(j, k))
                        .sum()
                })
                .collect()
        });
    }
    Ok(grads)
}
