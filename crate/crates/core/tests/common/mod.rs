#![allow(dead_code)]

use dualcritic::nn::{Activation, CriticLayout, CriticNet, LayerSpec, Mlp, Parameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;

const ACTIVATIONS: [Activation; 4] = [
    Activation::Elu,
    Activation::LeakyRelu,
    Activation::Sigmoid,
    Activation::None,
];

fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= FD_ABS_FLOOR || diff <= FD_REL_TOL * analytic.abs().max(numeric.abs())
}

/// Random chain of at most three layers with widths up to 8.
pub fn random_mlp(seed: u64) -> (Mlp, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=3);
    let mut dims = vec![rng.random_range(1..=8)];
    for _ in 0..depth {
        dims.push(rng.random_range(1..=8));
    }
    let specs: Vec<LayerSpec> = dims
        .windows(2)
        .map(|w| LayerSpec::new(w[0], w[1], ACTIVATIONS[rng.random_range(0..4)]))
        .collect();
    let net = Mlp::new(&specs, &mut rng).unwrap();
    let input = (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
    let upstream = (0..dims[depth]).map(|_| rng.random_range(-1.0..1.0)).collect();
    (net, input, upstream)
}

fn weighted_output(net: &Mlp, input: &[f64], upstream: &[f64]) -> f64 {
    net.predict(input)
        .unwrap()
        .iter()
        .zip(upstream)
        .map(|(o, u)| o * u)
        .sum()
}

/// Compare every analytic gradient of `upstream · net(input)` with central
/// differences.
pub fn fd_check_mlp(net: &Mlp, input: &[f64], upstream: &[f64]) -> Result<(), String> {
    let mut work = net.clone();
    work.forward(input).unwrap();
    let (grads, input_grad) = work.backward(upstream).unwrap();

    for (i, &g) in input_grad.iter().enumerate() {
        let mut plus = input.to_vec();
        let mut minus = input.to_vec();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let n = (weighted_output(net, &plus, upstream) - weighted_output(net, &minus, upstream)) / (2.0 * FD_STEP);
        if !close(g, n) {
            return Err(format!("input {i}: analytic {g} vs numeric {n}"));
        }
    }
    let mut probe = net.clone();
    for (s, slice) in grads.slices().iter().enumerate() {
        for (j, &g) in slice.iter().enumerate() {
            let orig = probe.param_slices()[s][j];
            probe.param_slices_mut()[s][j] = orig + FD_STEP;
            let up = weighted_output(&probe, input, upstream);
            probe.param_slices_mut()[s][j] = orig - FD_STEP;
            let down = weighted_output(&probe, input, upstream);
            probe.param_slices_mut()[s][j] = orig;
            let n = (up - down) / (2.0 * FD_STEP);
            if !close(g, n) {
                return Err(format!("slice {s} entry {j}: analytic {g} vs numeric {n}"));
            }
        }
    }
    Ok(())
}

pub fn small_layout() -> CriticLayout {
    CriticLayout {
        state_widths: vec![6, 5, 4],
        action_widths: vec![5, 4],
        head_widths: vec![3],
    }
}

pub fn random_critic(seed: u64) -> (CriticNet, Vec<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = CriticNet::new(3, 1, &small_layout(), &mut rng).unwrap();
    let s = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    (q, s, rng.random_range(0.0..1.0))
}

/// Finite-difference check of the critic's parameter, state and action
/// gradients.
pub fn fd_check_critic(q: &CriticNet, s: &[f64], a: f64) -> Result<(), String> {
    let mut work = q.clone();
    work.forward(s, &[a]).unwrap();
    let (grads, ds, da) = work.backward(1.0).unwrap();
    let trace = q.trace(s, &[a]).unwrap();
    let da_only = q.action_gradient(&trace).unwrap();
    if da_only != da {
        return Err(format!("action_gradient {da_only:?} differs from backward {da:?}"));
    }
    let value = |q: &CriticNet, s: &[f64], a: f64| q.value(s, &[a]).unwrap();

    let n = (value(q, s, a + FD_STEP) - value(q, s, a - FD_STEP)) / (2.0 * FD_STEP);
    if !close(da[0], n) {
        return Err(format!("action: analytic {} vs numeric {n}", da[0]));
    }
    for i in 0..s.len() {
        let mut plus = s.to_vec();
        let mut minus = s.to_vec();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let n = (value(q, &plus, a) - value(q, &minus, a)) / (2.0 * FD_STEP);
        if !close(ds[i], n) {
            return Err(format!("state {i}: analytic {} vs numeric {n}", ds[i]));
        }
    }
    let mut probe = q.clone();
    for (k, slice) in grads.slices().iter().enumerate() {
        for (j, &g) in slice.iter().enumerate() {
            let orig = probe.param_slices()[k][j];
            probe.param_slices_mut()[k][j] = orig + FD_STEP;
            let up = value(&probe, s, a);
            probe.param_slices_mut()[k][j] = orig - FD_STEP;
            let down = value(&probe, s, a);
            probe.param_slices_mut()[k][j] = orig;
            let n = (up - down) / (2.0 * FD_STEP);
            if !close(g, n) {
                return Err(format!("critic slice {k} entry {j}: analytic {g} vs numeric {n}"));
            }
        }
    }
    Ok(())
}

/// Small networks and short schedules so training tests run in seconds.
pub fn tiny_config(seed: u64) -> dualcritic::config::TrainerConfig {
    dualcritic::config::TrainerConfig {
        seed,
        gop_size: 4,
        episodes: 20,
        batch: 8,
        actor_widths: vec![24, 16],
        critic_layout: CriticLayout {
            state_widths: vec![24, 16, 16],
            action_widths: vec![16, 16],
            head_widths: vec![8],
        },
        clone_min_steps: 500,
        clone_max_steps: 4000,
        checkpoint_every: 0,
        ..Default::default()
    }
}
