//! Finite-difference gradient checks of the denoiser, shared by the
//! gradient tests and the acceptance run.
#![allow(dead_code)]

use liftkit::denoiser::{features_matrix, ChannelTokens, ConditioningMask, DenoiserConfig, DenoiserModel};
use liftkit::pose::ConditioningFeatures;
use liftkit::rng::{normal, rng_from};
use ndarray::Array2;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

pub struct Problem {
    pub model: DenoiserModel<f64>,
    pub noisy: Array2<f64>,
    pub features: Vec<Array2<f64>>,
    pub timesteps: Vec<usize>,
    pub upstream: Array2<f64>,
}

pub fn problem(tokens: ChannelTokens, mask: ConditioningMask, seed: u64) -> Problem {
    let cfg = DenoiserConfig {
        joints: 3,
        levels: 1,
        dim: 8,
        heads: 2,
        p2c_blocks: 2,
        j2j_blocks: 2,
        ff_mult: 2,
        channel_tokens: tokens,
        mask,
    };
    let mut model = DenoiserModel::<f64>::init(cfg.clone(), seed).unwrap();
    // Move normalization parameters and biases off their initial values so
    // their gradients are exercised in a generic position.
    let mut rng = rng_from(seed + 1);
    for t in model.tensors_mut() {
        for v in t.iter_mut() {
            *v += 0.1 * normal(&mut rng);
        }
    }
    let batch = 2;
    let noisy = Array2::from_shape_simple_fn((batch * 3, 3), || normal(&mut rng));
    let features = (0..batch)
        .map(|_| {
            let data = (0..2 * 3 * 8).map(|_| normal(&mut rng) as f32).collect();
            features_matrix(&ConditioningFeatures::new(1, 3, 8, data).unwrap())
        })
        .collect();
    let upstream = Array2::from_shape_simple_fn((batch * 3, 3), || normal(&mut rng));
    Problem {
        model,
        noisy,
        features,
        timesteps: vec![17, 640],
        upstream,
    }
}

pub fn loss(p: &Problem, model: &DenoiserModel<f64>, noisy: &Array2<f64>, features: &[Array2<f64>]) -> f64 {
    let (out, _) = model.forward_matrices(noisy, features, &p.timesteps).unwrap();
    (&out * &p.upstream).sum()
}

pub fn analytic(p: &Problem) -> (DenoiserModel<f64>, Array2<f64>, Vec<Array2<f64>>) {
    let (_, cache) = p
        .model
        .forward_matrices(&p.noisy, &p.features, &p.timesteps)
        .unwrap();
    let mut grads = p.model.zeros_like();
    let inputs = p.model.backward(&cache, &p.upstream, &mut grads).unwrap();
    (grads, inputs.noisy, inputs.features)
}

/// Checks every coordinate of every parameter block; returns the worst
/// relative error seen per block.
pub fn check_all_parameters(p: &Problem) -> Vec<(String, f64)> {
    let (grads, _, _) = analytic(p);
    let names: Vec<String> = p.model.tensors().into_iter().map(|(n, _)| n).collect();
    let grad_values: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
    let mut worst = Vec::new();
    let mut probe = p.model.clone();
    for (block, name) in names.iter().enumerate() {
        let mut max_err = 0.0f64;
        for i in 0..grad_values[block].len() {
            let orig = probe.tensors_mut()[block][i];
            probe.tensors_mut()[block][i] = orig + STEP;
            let up = loss(p, &probe, &p.noisy, &p.features);
            probe.tensors_mut()[block][i] = orig - STEP;
            let down = loss(p, &probe, &p.noisy, &p.features);
            probe.tensors_mut()[block][i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            max_err = max_err.max(rel_err(grad_values[block][i], numeric));
        }
        worst.push((name.clone(), max_err));
    }
    worst
}

