//! Synthetic conditioning-feature extractor.
//!
//! Stands in for an image backbone. The pose channel is a fixed linear lift
//! of each joint's 2D position. Context level `l` is a bank of random Fourier
//! features of the whole 2D pose expressed relative to the joint, with the
//! frequency scale doubling per level, keyed by `context_seed`.

use std::f64::consts::PI;

use rand::Rng;

use super::types::{ConditioningFeatures, Pose2D};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal, rng_from};

/// Fixed key for the pose-channel lift. Part of the extractor definition.
const LIFT_SEED: u64 = 0x5EED_0F_11F7;
const LIFT_GAIN: f64 = 2.5;
const LIFT_BIAS_STD: f64 = 0.1;
const BASE_FREQUENCY: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    levels: usize,
    joints: usize,
    dim: usize,
    context_seed: u64,
    /// `dim x 2`, row-major.
    lift_weight: Vec<f64>,
    lift_bias: Vec<f64>,
    /// Per level: `dim x (2 * joints)` frequencies and `dim` phases.
    frequencies: Vec<Vec<f64>>,
    phases: Vec<Vec<f64>>,
}

impl FeatureExtractor {
    pub fn new(levels: usize, joints: usize, dim: usize, context_seed: u64) -> Result<Self> {
        if joints == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "feature extractor needs joints > 0 and dim > 0, got {joints} and {dim}"
            )));
        }
        let mut lift_rng = rng_from(LIFT_SEED);
        let lift_weight = (0..dim * 2)
            .map(|_| LIFT_GAIN * normal(&mut lift_rng))
            .collect();
        let lift_bias = (0..dim)
            .map(|_| LIFT_BIAS_STD * normal(&mut lift_rng))
            .collect();

        let mut frequencies = Vec::with_capacity(levels);
        let mut phases = Vec::with_capacity(levels);
        for level in 0..levels {
            let mut rng = rng_from(derive_seed(context_seed, level as u64));
            let scale = BASE_FREQUENCY * f64::powi(2.0, level as i32);
            frequencies.push(
                (0..dim * 2 * joints)
                    .map(|_| scale * normal(&mut rng))
                    .collect(),
            );
            phases.push((0..dim).map(|_| rng.random_range(0.0..2.0 * PI)).collect());
        }
        Ok(Self {
            levels,
            joints,
            dim,
            context_seed,
            lift_weight,
            lift_bias,
            frequencies,
            phases,
        })
    }

    /// Same extractor with the pose-channel bias removed.
    pub fn with_zero_bias(mut self) -> Self {
        self.lift_bias.iter_mut().for_each(|b| *b = 0.0);
        self
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context_seed(&self) -> u64 {
        self.context_seed
    }

    pub fn extract(&self, pose2d: &Pose2D) -> Result<ConditioningFeatures> {
        let j = pose2d.joint_count();
        if j != self.joints {
            return Err(Error::Shape(format!(
                "extractor built for {} joints, got a {j}-joint pose",
                self.joints
            )));
        }
        if !pose2d.is_finite() {
            return Err(Error::Shape("2D pose contains non-finite values".into()));
        }
        let d = self.dim;
        let mut feats = ConditioningFeatures::zeros(self.levels, j, d);
        let pose_channel = self.levels;
        for (joint, p) in pose2d.coords.iter().enumerate() {
            let cell = feats.cell_mut(pose_channel, joint);
            for (k, out) in cell.iter_mut().enumerate() {
                let v = self.lift_weight[2 * k] * p[0]
                    + self.lift_weight[2 * k + 1] * p[1]
                    + self.lift_bias[k];
                *out = v as f32;
            }
        }

        let mut relative = vec![0.0; 2 * j];
        for joint in 0..j {
            let anchor = pose2d.coords[joint];
            for (other, p) in pose2d.coords.iter().enumerate() {
                relative[2 * other] = p[0] - anchor[0];
                relative[2 * other + 1] = p[1] - anchor[1];
            }
            for level in 0..self.levels {
                let freqs = &self.frequencies[level];
                let phases = &self.phases[level];
                let cell = feats.cell_mut(level, joint);
                for (k, out) in cell.iter_mut().enumerate() {
                    let row = &freqs[k * 2 * j..(k + 1) * 2 * j];
                    let arg: f64 = row.iter().zip(&relative).map(|(w, x)| w * x).sum();
                    *out = (arg + phases[k]).sin() as f32;
                }
            }
        }
        Ok(feats)
    }
}

/// One-shot extraction with a freshly built extractor.
pub fn extract_features(
    pose2d: &Pose2D,
    context_seed: u64,
    levels: usize,
    dim: usize,
) -> Result<ConditioningFeatures> {
    FeatureExtractor::new(levels, pose2d.joint_count(), dim, context_seed)?.extract(pose2d)
}
