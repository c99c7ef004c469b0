#![allow(dead_code)]

use stochgrad::boltzmann::BoltzmannMachine;
use stochgrad::experiments::{Example, ExperimentConfig};
use stochgrad::network::{forward_semihard, Layer, LayerSpec, NetworkSpec};
use stochgrad::{LayeredNetwork, LossSpec, NoiseStream, UnitKind, UnitStreams};

pub fn uniform(stream: &mut NoiseStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * stream.draw_uniform()
}

fn random_layer(
    stream: &mut NoiseStream,
    units: usize,
    inputs: usize,
    kind: UnitKind,
) -> LayerSpec {
    LayerSpec {
        units,
        kind,
        weights: Some(
            (0..units)
                .map(|_| (0..inputs).map(|_| uniform(stream, -1.5, 1.5)).collect())
                .collect(),
        ),
        biases: Some((0..units).map(|_| uniform(stream, -1.0, 1.0)).collect()),
    }
}

/// A named network with one example, for checking estimators against the
/// oracle.
pub struct Fixture {
    pub name: String,
    pub spec: NetworkSpec,
    pub example: Example,
}

impl Fixture {
    pub fn network(&self) -> LayeredNetwork {
        self.spec.build(0).unwrap()
    }

    pub fn config(&self, seed: u64, samples: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig::for_task(stochgrad::experiments::TaskId::MatchProbability);
        c.task = None;
        c.seed = seed;
        c.samples = samples;
        c.network = Some(self.spec.clone());
        c.examples = Some(vec![self.example.clone()]);
        c
    }
}

/// Networks with 1 to 8 stochastic binary units in 1 to 3 layers, under
/// the sum, squared-error and cross-entropy losses.
pub fn estimator_fixtures() -> Vec<Fixture> {
    use UnitKind::{DeterministicSigmoid as Sig, StochasticBinary as Bin};
    let shapes: Vec<(&str, usize, Vec<(usize, UnitKind)>, LossSpec)> = vec![
        ("1 unit, sum", 2, vec![(1, Bin)], LossSpec::Sum),
        (
            "3 units, squared error",
            2,
            vec![(3, Bin)],
            LossSpec::SquaredError,
        ),
        (
            "2 units + sigmoid, cross entropy",
            3,
            vec![(2, Bin), (1, Sig)],
            LossSpec::CrossEntropy,
        ),
        ("4 units, sum", 3, vec![(4, Bin)], LossSpec::Sum),
        (
            "2 + 2 units, squared error",
            2,
            vec![(2, Bin), (2, Bin)],
            LossSpec::SquaredError,
        ),
        (
            "3 + 2 units + sigmoid, cross entropy",
            2,
            vec![(3, Bin), (2, Bin), (1, Sig)],
            LossSpec::CrossEntropy,
        ),
        (
            "8 units, squared error",
            2,
            vec![(8, Bin)],
            LossSpec::SquaredError,
        ),
        (
            "4 + 4 units, sum",
            2,
            vec![(4, Bin), (4, Bin)],
            LossSpec::Sum,
        ),
        (
            "2 + 3 + 3 units, squared error",
            2,
            vec![(2, Bin), (3, Bin), (3, Bin)],
            LossSpec::SquaredError,
        ),
        (
            "5 units + 2 sigmoids, squared error",
            3,
            vec![(5, Bin), (2, Sig)],
            LossSpec::SquaredError,
        ),
        (
            "2 sigmoids + 3 units, sum",
            2,
            vec![(2, Sig), (3, Bin)],
            LossSpec::Sum,
        ),
        (
            "6 units + sigmoid, cross entropy",
            2,
            vec![(6, Bin), (1, Sig)],
            LossSpec::CrossEntropy,
        ),
    ];
    shapes
        .into_iter()
        .enumerate()
        .map(|(k, (name, input_width, layers, loss))| {
            let mut stream = NoiseStream::new(1000 + k as u64, 0);
            let mut width = input_width;
            let mut specs = Vec::new();
            for (units, kind) in layers {
                specs.push(random_layer(&mut stream, units, width, kind));
                width = units;
            }
            let input = (0..input_width)
                .map(|_| uniform(&mut stream, -1.0, 1.0))
                .collect();
            let target = (0..width)
                .map(|_| {
                    if stream.draw_uniform() < 0.5 {
                        0.0
                    } else {
                        1.0
                    }
                })
                .collect();
            Fixture {
                name: name.to_string(),
                spec: NetworkSpec {
                    input_width,
                    layers: specs,
                    loss,
                },
                example: Example::new(input, target),
            }
        })
        .collect()
}

/// Single stochastic unit fed by `inputs`, with the given activation.
pub fn single_unit(bias: f64, inputs: &[f64], weights: &[f64], loss: LossSpec) -> LayeredNetwork {
    assert_eq!(inputs.len(), weights.len());
    let layer = Layer::new(
        UnitKind::StochasticBinary,
        vec![weights.to_vec()],
        vec![bias],
    )
    .unwrap();
    LayeredNetwork::new(inputs.len(), vec![layer], loss).unwrap()
}

/// Random network of noisy rectifiers (optionally ending in a sigmoid
/// readout) with one input vector and target.
pub fn semihard_fixture(seed: u64) -> (LayeredNetwork, Vec<f64>, Vec<f64>) {
    let mut s = NoiseStream::new(seed, 1);
    let depth = 1 + (s.draw_uniform() * 3.0) as usize;
    let input_width = 1 + (s.draw_uniform() * 4.0) as usize;
    let mut width = input_width;
    let mut layers = Vec::new();
    for _ in 0..depth {
        let units = 1 + (s.draw_uniform() * 4.0) as usize;
        let sigma = uniform(&mut s, 0.1, 1.5);
        let spec = random_layer(&mut s, units, width, UnitKind::NoisyRectifier { sigma });
        layers.push(Layer::new(spec.kind, spec.weights.unwrap(), spec.biases.unwrap()).unwrap());
        width = units;
    }
    if s.draw_uniform() < 0.5 {
        let spec = random_layer(&mut s, 1, width, UnitKind::DeterministicSigmoid);
        layers.push(Layer::new(spec.kind, spec.weights.unwrap(), spec.biases.unwrap()).unwrap());
        width = 1;
    }
    let x = (0..input_width)
        .map(|_| uniform(&mut s, -1.0, 1.0))
        .collect();
    let t = (0..width).map(|_| uniform(&mut s, 0.0, 1.0)).collect();
    (
        LayeredNetwork::new(input_width, layers, LossSpec::SquaredError).unwrap(),
        x,
        t,
    )
}

/// Realised loss at `theta` with the noise of `(seed, replica)` replayed.
pub fn replayed_loss(
    net: &LayeredNetwork,
    theta: &[f64],
    x: &[f64],
    t: &[f64],
    seed: u64,
    replica: u64,
) -> f64 {
    let mut probe = net.clone();
    probe.set_params(theta).unwrap();
    let mut streams = UnitStreams::new(seed, replica, probe.unit_count());
    forward_semihard(&probe, x, t, &mut streams).unwrap().loss
}

pub fn random_bm(units: usize, seed: u64, visible: usize) -> BoltzmannMachine {
    let mut s = NoiseStream::new(seed, 2);
    let mut w = vec![vec![0.0; units]; units];
    for i in 0..units {
        for j in i + 1..units {
            let v = uniform(&mut s, -1.0, 1.0);
            w[i][j] = v;
            w[j][i] = v;
        }
    }
    let b = (0..units).map(|_| uniform(&mut s, -1.0, 1.0)).collect();
    BoltzmannMachine::new(w, b, (0..visible).collect(), (visible..units).collect()).unwrap()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
