//! Fully connected binary Boltzmann machines.
//!
//! `P(X) ∝ exp(Σ_i b_i X_i + Σ_{i<j} W_ij X_i X_j)`. Each unit's conditional
//! is `P(X_i = 1 | X_-i) = σ(b_i + Σ_{j≠i} W_ij X_j)`, which is what a Gibbs
//! sweep samples from.
//!
//! The log-likelihood gradient for a visible assignment `v` is
//! `E[X_i | v] - E[X_i]` for biases and `E[X_i X_j | v] - E[X_i X_j]` for
//! weights; one clamped sample `X⁺` and one free sample `X⁻` estimate it as
//! `X_i⁺ - X_i⁻` and `X_i⁺ X_j⁺ - X_i⁻ X_j⁻`. Labelling clamped samples with
//! reward `+1` and free samples with `-1`, the unnormalised reward
//! correlator `Σ X R` (and `Σ X_i X_j R`) over a balanced stream is the same
//! quantity summed over pairs.
//!
//! Parameters are laid out as all biases, then the upper-triangle weights
//! `W_01, W_02, …, W_12, …` in row order.

use serde::{Deserialize, Serialize};

use crate::estimators::{EstimateSource, GradientEstimate};
use crate::network::sigmoid;
use crate::noise::NoiseStream;
use crate::{Error, Result};

pub const MAX_ENUMERATED_UNITS: usize = 16;

pub const DEFAULT_BURN_IN: usize = 1000;
pub const DEFAULT_THIN: usize = 10;

/// Binary state, one entry (0 or 1) per unit.
pub type State = Vec<u8>;

#[derive(Clone, Debug, PartialEq)]
pub struct BoltzmannMachine {
    units: usize,
    /// Row-major `units × units`, symmetric with zero diagonal.
    weights: Vec<f64>,
    biases: Vec<f64>,
    visible: Vec<usize>,
    hidden: Vec<usize>,
}

impl BoltzmannMachine {
    pub fn new(
        weights: Vec<Vec<f64>>,
        biases: Vec<f64>,
        visible: Vec<usize>,
        hidden: Vec<usize>,
    ) -> Result<Self> {
        let n = biases.len();
        if weights.len() != n || weights.iter().any(|r| r.len() != n) {
            return Err(Error::invalid(format!("weights must be {n} x {n}")));
        }
        for i in 0..n {
            if weights[i][i] != 0.0 {
                return Err(Error::invalid(format!("W[{i},{i}] must be zero")));
            }
            for j in 0..i {
                if weights[i][j] != weights[j][i] {
                    return Err(Error::invalid(format!("W[{i},{j}] != W[{j},{i}]")));
                }
            }
        }
        if weights
            .iter()
            .flatten()
            .chain(&biases)
            .any(|p| !p.is_finite())
        {
            return Err(Error::invalid("parameters must be finite"));
        }
        let mut seen = vec![false; n];
        for &i in visible.iter().chain(&hidden) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!(
                    "unit {i} is out of range or listed twice in visible/hidden"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("every unit must be visible or hidden"));
        }
        Ok(Self {
            units: n,
            weights: weights.into_iter().flatten().collect(),
            biases,
            visible,
            hidden,
        })
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn bias(&self, i: usize) -> f64 {
        self.biases[i]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.units + j]
    }

    pub fn param_count(&self) -> usize {
        param_count(self.units)
    }

    pub fn param_names(&self) -> Vec<String> {
        let n = self.units;
        let mut names: Vec<String> = (0..n).map(|i| format!("b[{i}]")).collect();
        for i in 0..n {
            names.extend((i + 1..n).map(|j| format!("W[{i},{j}]")));
        }
        names
    }

    /// `b_i + Σ_{j≠i} W_ij X_j`.
    pub fn activation(&self, i: usize, state: &[u8]) -> f64 {
        let row = &self.weights[i * self.units..(i + 1) * self.units];
        self.biases[i]
            + row
                .iter()
                .zip(state)
                .filter(|(_, &x)| x == 1)
                .map(|(w, _)| w)
                .sum::<f64>()
    }

    /// Unnormalised log-probability `Σ b_i X_i + Σ_{i<j} W_ij X_i X_j`.
    pub fn log_weight(&self, state: &[u8]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.units {
            if state[i] == 1 {
                total += self.biases[i];
                for j in i + 1..self.units {
                    if state[j] == 1 {
                        total += self.weight(i, j);
                    }
                }
            }
        }
        total
    }

    fn check_state(&self, state: &[u8]) -> Result<()> {
        if state.len() != self.units {
            return Err(Error::invalid(format!(
                "state has {} entries, machine has {} units",
                state.len(),
                self.units
            )));
        }
        if state.iter().any(|&x| x > 1) {
            return Err(Error::invalid("state entries must be 0 or 1"));
        }
        Ok(())
    }

    /// Clamp assigning `values` (aligned with [`Self::visible`]).
    pub fn clamp_visible(&self, values: &[u8]) -> Result<Vec<(usize, u8)>> {
        if values.len() != self.visible.len() || values.iter().any(|&x| x > 1) {
            return Err(Error::invalid(format!(
                "visible assignment must hold {} binary values",
                self.visible.len()
            )));
        }
        Ok(self
            .visible
            .iter()
            .copied()
            .zip(values.iter().copied())
            .collect())
    }
}

fn param_count(units: usize) -> usize {
    units + units * units.saturating_sub(1) / 2
}

/// One ascending sweep over the unclamped units; each is resampled from
/// `Bin(σ(a_i))` given the current values of the others.
pub fn gibbs_step(
    bm: &BoltzmannMachine,
    state: &[u8],
    stream: &mut NoiseStream,
    clamp: Option<&[(usize, u8)]>,
) -> Result<State> {
    bm.check_state(state)?;
    let mut next = state.to_vec();
    let mut clamped = vec![false; bm.units];
    for &(i, value) in clamp.unwrap_or(&[]) {
        if !bm.visible.contains(&i) {
            return Err(Error::contract(format!(
                "clamp assigns non-visible unit {i}"
            )));
        }
        if value > 1 {
            return Err(Error::invalid("clamped values must be 0 or 1"));
        }
        clamped[i] = true;
        next[i] = value;
    }
    for i in 0..bm.units {
        if clamped[i] {
            continue;
        }
        let p = sigmoid(bm.activation(i, &next));
        next[i] = u8::from(stream.draw_uniform() < p);
    }
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSchedule {
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for ChainSchedule {
    fn default() -> Self {
        Self {
            burn_in: DEFAULT_BURN_IN,
            thin: DEFAULT_THIN,
        }
    }
}

/// Runs a chain from `start` and keeps every `thin`-th state after burn-in.
pub fn sample_chain(
    bm: &BoltzmannMachine,
    start: &[u8],
    stream: &mut NoiseStream,
    clamp: Option<&[(usize, u8)]>,
    schedule: ChainSchedule,
    count: usize,
) -> Result<Vec<State>> {
    if schedule.thin == 0 {
        return Err(Error::invalid("thin must be at least 1"));
    }
    let mut state = start.to_vec();
    for _ in 0..schedule.burn_in {
        state = gibbs_step(bm, &state, stream, clamp)?;
    }
    let mut samples = Vec::with_capacity(count);
    while samples.len() < count {
        for _ in 0..schedule.thin {
            state = gibbs_step(bm, &state, stream, clamp)?;
        }
        samples.push(state.clone());
    }
    Ok(samples)
}

/// State with bit `i` of `index` as unit `i`.
pub fn state_from_index(index: usize, units: usize) -> State {
    (0..units).map(|i| (index >> i & 1) as u8).collect()
}

pub fn state_index(state: &[u8]) -> usize {
    state
        .iter()
        .enumerate()
        .map(|(i, &x)| (x as usize) << i)
        .sum()
}

/// Exact Boltzmann distribution, indexed as in [`state_from_index`].
pub fn exact_distribution(bm: &BoltzmannMachine) -> Result<Vec<f64>> {
    if bm.units > MAX_ENUMERATED_UNITS {
        return Err(Error::Capacity {
            units: bm.units,
            limit: MAX_ENUMERATED_UNITS,
        });
    }
    let logs: Vec<f64> = (0..1usize << bm.units)
        .map(|s| bm.log_weight(&state_from_index(s, bm.units)))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / z).collect())
}

/// Sufficient statistics `(X_i, X_i X_j)` in parameter layout.
fn statistics(state: &[u8]) -> Vec<i64> {
    let n = state.len();
    let mut out: Vec<i64> = state.iter().map(|&x| x as i64).collect();
    for i in 0..n {
        for j in i + 1..n {
            out.push((state[i] * state[j]) as i64);
        }
    }
    out
}

/// Exact `∂ log P(V = v) / ∂θ` by enumeration.
pub fn exact_bm_loglik_gradient(bm: &BoltzmannMachine, v: &[u8]) -> Result<GradientEstimate> {
    let clamp = bm.clamp_visible(v)?;
    let dist = exact_distribution(bm)?;
    let dim = bm.param_count();
    let mut free = vec![0.0; dim];
    let mut clamped = vec![0.0; dim];
    let mut clamped_mass = 0.0;
    for (s, &p) in dist.iter().enumerate() {
        let state = state_from_index(s, bm.units);
        let stats = statistics(&state);
        let matches = clamp.iter().all(|&(i, x)| state[i] == x);
        for k in 0..dim {
            free[k] += p * stats[k] as f64;
            if matches {
                clamped[k] += p * stats[k] as f64;
            }
        }
        if matches {
            clamped_mass += p;
        }
    }
    if !(clamped_mass > 0.0) {
        return Err(Error::DegenerateInput(
            "visible assignment has zero probability".to_string(),
        ));
    }
    let values = clamped
        .iter()
        .zip(&free)
        .map(|(c, f)| c / clamped_mass - f)
        .collect();
    Ok(GradientEstimate::new(
        values,
        EstimateSource::Enumeration,
        0,
    ))
}

/// `X⁺ - X⁻` for biases, `X_i⁺ X_j⁺ - X_i⁻ X_j⁻` for weights.
pub fn bm_pair_gradient(positive: &[u8], negative: &[u8]) -> Result<GradientEstimate> {
    if positive.len() != negative.len() {
        return Err(Error::invalid(
            "positive and negative states differ in length",
        ));
    }
    if positive.iter().chain(negative).any(|&x| x > 1) {
        return Err(Error::invalid("states must be binary"));
    }
    let values = statistics(positive)
        .iter()
        .zip(statistics(negative))
        .map(|(p, n)| (p - n) as f64)
        .collect();
    Ok(GradientEstimate::new(
        values,
        EstimateSource::BoltzmannPair,
        1,
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardedSample {
    pub state: State,
    /// `+1` for clamped (data) samples, `-1` for free (model) samples.
    pub reward: i8,
}

impl RewardedSample {
    pub fn positive(state: State) -> Self {
        Self { state, reward: 1 }
    }

    pub fn negative(state: State) -> Self {
        Self { state, reward: -1 }
    }
}

/// `Σ X_i R` and `Σ X_i X_j R` over the stream, divided by the number of
/// `(+, -)` pairs. The stream must hold equally many samples of each sign.
pub fn reward_correlator_gradient(samples: &[RewardedSample]) -> Result<GradientEstimate> {
    let units = samples
        .first()
        .map(|s| s.state.len())
        .ok_or_else(|| Error::DegenerateInput("empty sample stream".to_string()))?;
    let mut sums = vec![0i64; param_count(units)];
    let (mut positives, mut negatives) = (0usize, 0usize);
    for s in samples {
        if s.state.len() != units || s.state.iter().any(|&x| x > 1) {
            return Err(Error::invalid(
                "samples must be binary states of equal length",
            ));
        }
        match s.reward {
            1 => positives += 1,
            -1 => negatives += 1,
            r => return Err(Error::invalid(format!("reward must be +1 or -1, got {r}"))),
        }
        for (acc, x) in sums.iter_mut().zip(statistics(&s.state)) {
            *acc += x * s.reward as i64;
        }
    }
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateInput(
            "rewards all have the same sign".to_string(),
        ));
    }
    if positives != negatives {
        return Err(Error::DegenerateInput(format!(
            "unbalanced stream: {positives} positive vs {negatives} negative samples"
        )));
    }
    let pairs = positives as f64;
    let values = sums.iter().map(|&s| s as f64 / pairs).collect();
    Ok(GradientEstimate::new(
        values,
        EstimateSource::RewardCorrelator,
        positives,
    ))
}
