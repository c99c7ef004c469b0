//! Acceptance suite. Each test checks one criterion and prints a single
//! `PASS` or `FAIL` line before asserting, so
//! `cargo test --test acceptance -- --nocapture --test-threads=1` reads as a
//! report.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::*;
use stochgrad::boltzmann::{
    bm_pair_gradient, exact_bm_loglik_gradient, exact_distribution, gibbs_step,
    reward_correlator_gradient, state_index, ChainSchedule, RewardedSample,
};
use stochgrad::estimators::{
    centered_estimate_with, decayed_rate, straight_through_backward, CorrectorModel,
    CorrectorSample,
};
use stochgrad::experiments::{
    bm_reward_stream, run_training, run_variance_bench, BaselineMode, ExperimentConfig, TaskId,
};
use stochgrad::network::{forward, forward_semihard, forward_stochastic, Layer};
use stochgrad::oracle::{
    exact_estimator_moments, exact_gradient, expected_loss, optimal_baselines, DifferenceScheme,
};
use stochgrad::semihard::{semihard_backward, ControllerConfig, FiringRateController};
use stochgrad::stats::{median, Moments};
use stochgrad::{EstimatorKind, LayeredNetwork, LossSpec, NoiseStream, UnitKind, UnitStreams};

fn report(criterion: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("[{verdict}] criterion {criterion} ({title}): {detail}");
}

#[test]
fn criterion_01_unbiasedness() {
    let started = Instant::now();
    let fixtures = estimator_fixtures();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut units = Vec::new();
    for (k, f) in fixtures.iter().enumerate() {
        units.push(f.network().stochastic_unit_count());
        let mut config = f.config(7 + k as u64, 100_000);
        config.estimator.kind = EstimatorKind::Unbiased;
        let outcome = run_variance_bench(&config).unwrap();
        for row in &outcome.base.rows {
            let bias = row.bias.expect("fixture within oracle cap");
            // The oracle is a difference quotient accurate to ~1e-10.
            let z = bias.abs() / (row.sem + 1e-9);
            if z > worst.0 {
                worst = (z, format!("{} / {}", f.name, row.param_id));
            }
            if z > 4.0 {
                failures.push(format!(
                    "{} / {}: |bias| = {:.3} SEM",
                    f.name, row.param_id, z
                ));
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = failures.is_empty() && fixtures.len() >= 10 && elapsed < 120.0;
    report(
        1,
        "unbiasedness",
        pass,
        &format!(
            "{} networks ({}..={} stochastic units), 1e5 samples each, worst |bias| = {:.2} SEM at {}, {elapsed:.1}s",
            fixtures.len(),
            units.iter().min().unwrap(),
            units.iter().max().unwrap(),
            worst.0,
            worst.1
        ),
    );
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_02_exact_moments() {
    let started = Instant::now();
    let cases = [
        (0.0, [1.0, -0.5], 0.3),
        (-1.5, [0.4, 2.0], 0.9),
        (0.7, [-1.0, 0.25], 0.0),
        (2.2, [0.6, 0.6], 1.0),
    ];
    let mut details = Vec::new();
    let mut pass = true;
    for (bias, x, target) in cases {
        let net = single_unit(bias, &x, &[0.3, -0.2], LossSpec::SquaredError);
        let t = [target];
        let plain = exact_estimator_moments(&net, &x, &t, EstimatorKind::Unbiased, 0.0).unwrap();
        let opt = optimal_baselines(&net, &x, &t).unwrap()[0];
        let grid: Vec<f64> = (0..101).map(|k| opt + (k as f64 - 50.0) * 0.02).collect();
        let mut mean_err = 0.0f64;
        let mut var_at = Vec::new();
        for &b in &grid {
            let m = exact_estimator_moments(&net, &x, &t, EstimatorKind::Centered, b).unwrap();
            for (a, c) in m.mean.iter().zip(&plain.mean) {
                mean_err = mean_err.max((a - c).abs());
            }
            var_at.push(m.variance[0]);
        }
        let argmin = (0..grid.len())
            .min_by(|&i, &j| var_at[i].total_cmp(&var_at[j]))
            .unwrap();
        // Variance is quadratic in the baseline: the parabola through three
        // grid points has its vertex at the minimiser.
        let (b0, b1, b2) = (grid[0], grid[50], grid[100]);
        let (v0, v1, v2) = (var_at[0], var_at[50], var_at[100]);
        let vertex = b1
            - 0.5 * ((b1 - b0).powi(2) * (v1 - v2) - (b1 - b2).powi(2) * (v1 - v0))
                / ((b1 - b0) * (v1 - v2) - (b1 - b2) * (v1 - v0));
        let opt_var = exact_estimator_moments(&net, &x, &t, EstimatorKind::Centered, opt).unwrap();
        let ok = mean_err < 1e-9
            && argmin == 50
            && (vertex - opt).abs() < 1e-9
            && opt_var
                .variance
                .iter()
                .zip(&plain.variance)
                .all(|(o, p)| *o <= *p + 1e-15);
        pass &= ok;
        details.push(format!(
            "a={bias}: mean drift {mean_err:.1e}, grid argmin {:+.3e} from optimum, vertex {:.1e}",
            grid[argmin] - opt,
            (vertex - opt).abs()
        ));
    }
    let elapsed = started.elapsed().as_secs_f64();
    pass &= elapsed < 1.0;
    report(
        2,
        "exact moments",
        pass,
        &format!("{}; {elapsed:.3}s", details.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_03_zero_variance() {
    let net = single_unit(0.0, &[], &[], LossSpec::Sum);
    let mut m = Moments::new(1);
    let mut max_dev = 0.0f64;
    for replica in 0..100_000 {
        let mut streams = UnitStreams::new(3, replica, 1);
        let trace = forward_stochastic(&net, &[], &[], &mut streams).unwrap();
        let g = centered_estimate_with(&net, &trace, &[0.5]).unwrap();
        max_dev = max_dev.max((g.values[0] - 0.25).abs());
        m.push(&g.values);
    }
    let exact = exact_estimator_moments(&net, &[], &[], EstimatorKind::Centered, 0.5).unwrap();
    let var = m.variance()[0];
    let pass = var < 1e-12 && max_dev == 0.0 && exact.variance[0] < 1e-12;
    report(
        3,
        "zero-variance showcase",
        pass,
        &format!("1e5 samples, max |g - 0.25| = {max_dev:e}, sample variance {var:e}, exact variance {:e}", exact.variance[0]),
    );
    assert!(pass);
}

#[test]
fn criterion_04_semihard_exactness() {
    let started = Instant::now();
    let eps = 1e-6;
    let (mut worst_rel, mut checked, mut resampled) = (0.0f64, 0usize, 0usize);
    let mut failures = Vec::new();
    let mut seed = 0u64;
    while checked < 100 {
        seed += 1;
        let (net, x, t) = semihard_fixture(seed);
        let mut streams = UnitStreams::new(seed, 0, net.unit_count());
        let trace = forward_semihard(&net, &x, &t, &mut streams).unwrap();
        // The derivative is undefined at a rectifier's kink; a difference
        // quotient straddling one measures nothing.
        let near_kink = trace
            .layers
            .iter()
            .flat_map(|l| &l.units)
            .any(|u| u.noise.is_some_and(|z| (z + u.activation).abs() < 1e-3));
        if near_kink {
            resampled += 1;
            continue;
        }
        checked += 1;
        let g = semihard_backward(&net, &trace).unwrap();
        let theta = net.params();
        let mut point = theta.clone();
        for k in 0..theta.len() {
            point[k] = theta[k] + eps;
            let up = replayed_loss(&net, &point, &x, &t, seed, 0);
            point[k] = theta[k] - eps;
            let down = replayed_loss(&net, &point, &x, &t, seed, 0);
            point[k] = theta[k];
            let fd = (up - down) / (2.0 * eps);
            let diff = (fd - g.values[k]).abs();
            if diff < 1e-8 {
                continue;
            }
            let rel = diff / g.values[k].abs().max(fd.abs());
            worst_rel = worst_rel.max(rel);
            if rel >= 1e-5 {
                failures.push(format!(
                    "fixture {seed} param {k}: backward {} vs fd {fd}",
                    g.values[k]
                ));
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = failures.is_empty() && elapsed < 10.0;
    report(
        4,
        "semi-hard gradient exactness",
        pass,
        &format!("100 fixtures ({resampled} resampled for a kink within 1e-3), worst relative error {worst_rel:.2e}, {elapsed:.2}s"),
    );
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_05_straight_through_sign() {
    let mut checked = 0;
    let mut failures = Vec::new();
    for k in 0..12u64 {
        let mut s = NoiseStream::new(500 + k, 0);
        let units = 1 + (k as usize % 4);
        let inputs = 1 + (k as usize % 3);
        let weights: Vec<Vec<f64>> = (0..units)
            .map(|_| (0..inputs).map(|_| uniform(&mut s, -1.5, 1.5)).collect())
            .collect();
        let biases = (0..units).map(|_| uniform(&mut s, -1.5, 1.5)).collect();
        let loss = if k % 2 == 0 {
            LossSpec::Sum
        } else {
            LossSpec::SquaredError
        };
        let layer = Layer::new(UnitKind::StochasticBinary, weights, biases).unwrap();
        let net = LayeredNetwork::new(inputs, vec![layer], loss).unwrap();
        let x: Vec<f64> = (0..inputs).map(|_| uniform(&mut s, -1.0, 1.0)).collect();
        let t: Vec<f64> = (0..units)
            .map(|_| if s.draw_uniform() < 0.5 { 0.0 } else { 1.0 })
            .collect();
        let oracle = exact_gradient(&net, &x, &t, 1e-5, DifferenceScheme::Richardson).unwrap();
        let mut m = Moments::new(net.param_count());
        for replica in 0..10_000 {
            let mut streams = UnitStreams::new(k, replica, net.unit_count());
            let trace = forward_stochastic(&net, &x, &t, &mut streams).unwrap();
            m.push(&straight_through_backward(&net, &trace).unwrap().values);
        }
        for (p, (&o, &e)) in oracle.values.iter().zip(m.mean()).enumerate() {
            if o.abs() > 1e-6 {
                checked += 1;
                if o.signum() != e.signum() {
                    failures.push(format!("fixture {k} param {p}: oracle {o}, mean {e}"));
                }
            }
        }
    }
    let pass = failures.is_empty();
    report(
        5,
        "straight-through sign",
        pass,
        &format!("12 single-layer fixtures (sum and squared error with binary targets), {checked} parameters checked, {} sign mismatches", failures.len()),
    );
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_06_corrector_convergence() {
    let net = single_unit(0.0, &[], &[], LossSpec::Sum);
    let mut model = CorrectorModel::new(1, 0.5, false).unwrap();
    let batch_size = 16;
    let steps = 100_000;
    let mut replica = 0u64;
    for step in 0..steps {
        let batch: Vec<CorrectorSample> = (0..batch_size)
            .map(|_| {
                let mut streams = UnitStreams::new(11, replica, 1);
                replica += 1;
                let trace = forward_stochastic(&net, &[], &[], &mut streams).unwrap();
                CorrectorSample::from_trace(&net, &trace).unwrap()
            })
            .collect();
        model
            .train_step(&batch, decayed_rate(0.5, 1.0, step))
            .unwrap();
    }
    let prediction = model.predict(0, 1.0, 0.5);
    let err = (prediction - 0.25).abs();
    let pass = err < 1e-3;
    report(
        6,
        "corrector convergence",
        pass,
        &format!(
            "{steps} online steps of {batch_size} samples, rate 0.5/(1+t): prediction {prediction:.6}, |error| {err:.2e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_boltzmann_identity() {
    // (a) pairwise identity, bitwise.
    let mut s = NoiseStream::new(77, 0);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let n = 1 + (s.draw_uniform() * 6.0) as usize;
        let pos: Vec<u8> = (0..n).map(|_| u8::from(s.draw_uniform() < 0.5)).collect();
        let neg: Vec<u8> = (0..n).map(|_| u8::from(s.draw_uniform() < 0.5)).collect();
        let pair = bm_pair_gradient(&pos, &neg).unwrap();
        let corr = reward_correlator_gradient(&[
            RewardedSample::positive(pos),
            RewardedSample::negative(neg),
        ])
        .unwrap();
        let same = pair
            .values
            .iter()
            .zip(&corr.values)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        mismatches += usize::from(!same);
    }

    // (b) Gibbs distribution vs enumeration.
    let sweeps = 10_000;
    let mut worst_tv = 0.0f64;
    for (units, seed) in [(2, 1), (3, 2), (4, 3), (4, 4)] {
        let bm = random_bm(units, seed, units);
        let exact = exact_distribution(&bm).unwrap();
        let mut stream = NoiseStream::new(seed, 9);
        let mut state = vec![0u8; units];
        for _ in 0..1000 {
            state = gibbs_step(&bm, &state, &mut stream, None).unwrap();
        }
        let mut counts = vec![0.0; exact.len()];
        for _ in 0..sweeps {
            state = gibbs_step(&bm, &state, &mut stream, None).unwrap();
            counts[state_index(&state)] += 1.0 / sweeps as f64;
        }
        worst_tv = worst_tv.max(total_variation(&counts, &exact));
    }

    // (c) Monte Carlo gradient vs exact log-likelihood gradient.
    let mut worst_z = 0.0f64;
    for (units, visible, seed) in [(2, 1, 5), (3, 2, 6), (4, 2, 7)] {
        let bm = random_bm(units, seed, visible);
        let data = vec![1u8; visible];
        let exact = exact_bm_loglik_gradient(&bm, &data).unwrap();
        let stream =
            bm_reward_stream(&bm, &data, seed, ChainSchedule::default(), 4, 20_000).unwrap();
        let mut m = Moments::new(bm.param_count());
        for (p, n) in &stream {
            m.push(&bm_pair_gradient(&p.state, &n.state).unwrap().values);
        }
        for ((e, mean), sem) in exact.values.iter().zip(m.mean()).zip(m.sem()) {
            worst_z = worst_z.max((mean - e).abs() / sem);
        }
    }

    let pass = mismatches == 0 && worst_tv <= 0.02 && worst_z <= 4.0;
    report(
        7,
        "Boltzmann identity",
        pass,
        &format!(
            "{mismatches} bitwise mismatches in 1e4 pairs; worst TV {worst_tv:.4} after {sweeps} sweeps on 2-4 unit machines; worst |MC - exact| = {worst_z:.2} SEM"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_firing_rate_controller() {
    let layer = Layer::new(
        UnitKind::NoisyRectifier { sigma: 1.0 },
        vec![vec![]],
        vec![-10.0],
    )
    .unwrap();
    let mut net = LayeredNetwork::new(0, vec![layer], LossSpec::Sum).unwrap();
    let config = ControllerConfig::new(0.2);
    let threshold = config.threshold();
    let mut controller = FiringRateController::new(&net, config).unwrap();
    let batch = 100;
    let cycles = 3000;
    let mut monotone = true;
    let mut replica = 0u64;
    for _ in 0..cycles {
        let traces: Vec<_> = (0..batch)
            .map(|_| {
                let mut streams = UnitStreams::new(21, replica, 1);
                replica += 1;
                forward(&net, &[], &[], &mut streams).unwrap()
            })
            .collect();
        let before = net.layers()[0].bias(0);
        controller.adjust_bias(&mut net, &traces).unwrap();
        if controller.rates()[0] < threshold && net.layers()[0].bias(0) <= before {
            monotone = false;
        }
    }
    let n = 20_000;
    let active = (0..n)
        .filter(|_| {
            let mut streams = UnitStreams::new(22, replica, 1);
            replica += 1;
            forward(&net, &[], &[], &mut streams).unwrap().layers[0].units[0].output > 0.0
        })
        .count();
    let rate = active as f64 / n as f64;
    let pass = monotone && (rate - 0.2).abs() <= 0.05;
    report(
        8,
        "firing-rate controller",
        pass,
        &format!(
            "bias -10 -> {:.3} after {cycles} cycles of {batch} passes, empirical rate {rate:.4} (target 0.2), bias rose on every below-threshold cycle: {monotone}",
            net.layers()[0].bias(0)
        ),
    );
    assert!(pass);
}

fn match_probability_minimum() -> f64 {
    let base = ExperimentConfig::for_task(TaskId::MatchProbability)
        .problem()
        .unwrap();
    let (x, t) = &base.examples[0];
    let mut best = f64::INFINITY;
    for k in 0..=4000 {
        let a = -20.0 + k as f64 * 0.01;
        let mut net = base.network.clone();
        net.set_params(&[a, 0.0]).unwrap();
        best = best.min(expected_loss(&net, x, t).unwrap());
    }
    best
}

#[test]
fn criterion_09_training_demo() {
    let minimum = match_probability_minimum();
    let steps = 5000;
    let run = |kind: EstimatorKind, seed: u64| {
        let mut c = ExperimentConfig::for_task(TaskId::MatchProbability);
        c.seed = seed;
        c.estimator.kind = kind;
        c.estimator.baseline = BaselineMode::Tracked;
        c.training.steps = steps;
        c.training.learning_rate = 1.0;
        run_training(&c).unwrap().into_result().unwrap()
    };
    let mut lines = Vec::new();
    let mut pass = true;
    let mut first_hit = std::collections::BTreeMap::new();
    for kind in [
        EstimatorKind::Unbiased,
        EstimatorKind::Centered,
        EstimatorKind::StraightThrough,
    ] {
        let mut finals = Vec::new();
        let mut hits = Vec::new();
        for seed in 0..20 {
            let curve = run(kind, seed);
            let losses = curve.expected_losses();
            let tail = &losses[losses.len() * 9 / 10..];
            finals.push(tail.iter().sum::<f64>() / tail.len() as f64);
            hits.push(
                curve
                    .steps_to_reach(minimum, 0.01)
                    .map_or(f64::INFINITY, |s| s as f64),
            );
        }
        let reached = finals.iter().filter(|&&l| l <= minimum + 0.01).count();
        pass &= reached == finals.len();
        let med_final = median(&mut finals.clone());
        let med_hit = median(&mut hits.clone());
        first_hit.insert(kind.name(), med_hit);
        lines.push(format!(
            "{}: {reached}/20 seeds settle within 0.01 (median final {med_final:.4}, median first step {med_hit})",
            kind.name()
        ));
    }
    let payoff = first_hit["centered"] <= first_hit["unbiased"];
    pass &= payoff;
    report(
        9,
        "training demo",
        pass,
        &format!(
            "minimum {minimum:.6}, lr 1.0, {steps} steps; {}; centered needs no more steps than unbiased: {payoff}",
            lines.join("; ")
        ),
    );
    assert!(pass);
}

fn cli(args: &[&str], out: &Path, threads: &str) -> (Option<i32>, Vec<u8>) {
    let status = Command::new(env!("CARGO_BIN_EXE_stochgrad"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RAYON_NUM_THREADS", threads)
        .output()
        .unwrap();
    (status.status.code(), std::fs::read(out).unwrap_or_default())
}

#[test]
fn criterion_10_reproducibility() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    let runs: [(&str, &str); 5] = [
        ("estimate", "single-unit-bench.json"),
        ("estimate", "xor-sweep.json"),
        ("train", "xor-target.json"),
        ("bm-check", "bm-check.json"),
        ("oracle", "xor-oracle.json"),
    ];
    let mut pass = true;
    let mut lines = Vec::new();
    for (command, file) in runs {
        let path = configs.join(file);
        let path = path.to_str().unwrap();
        let args = [command, "--config", path, "--seed", "42"];
        let (c1, a) = cli(&args, &dir.path().join("a.csv"), "1");
        let (c2, b) = cli(&args, &dir.path().join("b.csv"), "4");
        let same = c1 == Some(0) && c2 == Some(0) && !a.is_empty() && a == b;
        pass &= same;
        lines.push(format!(
            "{command} {file}: {}",
            if same { "identical" } else { "DIFFERENT" }
        ));
    }
    report(
        10,
        "reproducibility",
        pass,
        &format!("seed 42, 1 vs 4 worker threads; {}", lines.join(", ")),
    );
    assert!(pass);
}
