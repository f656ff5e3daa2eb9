//! Noise-regression training loop with Adam, per-epoch learning-rate decay
//! and optional horizontal-flip augmentation.
//!
//! All randomness in epoch `e` comes from a generator seeded with
//! `(seed, e)`, so training resumed from a checkpoint continues exactly as
//! an uninterrupted run would.

mod checkpoint;

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::denoiser::{DenoiserConfig, DenoiserModel, Scalar};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::pose::{horizontal_flip, PoseSample, SkeletonSpec};
use crate::rng::{derive_seed, normal, rng_from, stream};
use crate::schedule::{DiffusionSchedule, ScheduleConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    /// Multiplies the learning rate once per completed epoch.
    pub lr_decay_factor: f64,
    pub flip_prob: f64,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Poses are divided by this before diffusion (millimeters to meters).
    pub coord_scale: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 50,
            lr_start: 6e-4,
            lr_decay_factor: 0.993,
            flip_prob: 0.5,
            seed: 0,
            schedule: ScheduleConfig::default(),
            grad_clip: None,
            coord_scale: 1000.0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_start.is_finite() && self.lr_start >= 0.0) {
            return bad("lr_start must be finite and non-negative");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        if !(self.coord_scale.is_finite() && self.coord_scale > 0.0) {
            return bad("coord_scale must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_start * self.lr_decay_factor.powi(epoch as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub samples: usize,
}

/// Noise-regression loss of one sample: mean over `J x 3` entries of
/// `(eps - eps_hat)^2`, with `y_t` built from the scaled ground truth.
pub fn loss<T: Scalar>(
    model: &DenoiserModel<T>,
    schedule: &DiffusionSchedule,
    sample: &PoseSample,
    t: usize,
    eps: &[f64],
    coord_scale: f64,
) -> Result<f64> {
    let y0: Vec<f64> = sample.pose3d.to_flat().iter().map(|v| v / coord_scale).collect();
    let y_t = schedule.forward_sample(&y0, t, eps)?;
    let noisy = Array2::from_shape_vec((y0.len() / 3, 3), y_t.into_iter().map(T::of).collect())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let pred = model.forward(&noisy, &sample.features, t)?;
    let n = eps.len() as f64;
    let l = pred
        .iter()
        .zip(eps)
        .map(|(p, e)| (p.f64() - e).powi(2))
        .sum::<f64>()
        / n;
    if !l.is_finite() {
        return Err(Error::Numerical {
            stage: "loss",
            message: "non-finite loss".into(),
        });
    }
    Ok(l)
}

/// Complete training state; this is what a checkpoint stores.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: DenoiserModel<f32>,
    pub schedule: DiffusionSchedule,
    pub config: TrainConfig,
    pub skeleton: SkeletonSpec,
    pub optimizer: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

pub type Checkpoint = TrainState;

impl TrainState {
    pub fn new(model: DenoiserConfig, config: TrainConfig, skeleton: SkeletonSpec) -> Result<Self> {
        config.validate()?;
        skeleton.validate()?;
        if model.joints != skeleton.joint_count() {
            return Err(Error::Config(format!(
                "model has {} joints, skeleton `{}` has {}",
                model.joints,
                skeleton.name,
                skeleton.joint_count()
            )));
        }
        let schedule = config.schedule.build()?;
        let model = DenoiserModel::init(model, derive_seed(config.seed, stream::MODEL_INIT))?;
        let sizes: Vec<usize> = model.tensors().iter().map(|(_, t)| t.len()).collect();
        let optimizer = AdamState::new(config.adam, &sizes);
        Ok(Self {
            model,
            schedule,
            config,
            skeleton,
            optimizer,
            epoch: 0,
            history: Vec::new(),
        })
    }

    fn check_data(&self, data: &[PoseSample]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let c = self.model.config();
        for s in data {
            if s.pose3d.joint_count() != c.joints
                || s.features.levels() != c.levels
                || s.features.dim() != c.dim
            {
                return Err(Error::Validation(format!(
                    "sample `{}` does not match the model shape",
                    s.sample_id
                )));
            }
        }
        Ok(())
    }

    /// Runs one epoch over `data` and records its metrics.
    pub fn train_epoch(&mut self, data: &[PoseSample]) -> Result<EpochMetrics> {
        self.check_data(data)?;
        let started = Instant::now();
        let cfg = self.config.clone();
        let lr = cfg.lr_at(self.epoch);
        let joints = self.model.config().joints;
        let steps = self.schedule.steps();
        let mut rng = rng_from(derive_seed(
            derive_seed(cfg.seed, stream::TRAINING),
            self.epoch as u64,
        ));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let mut grads = self.model.zeros_like();
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut flipped: Vec<Option<PoseSample>> = Vec::with_capacity(b);
            let mut timesteps = Vec::with_capacity(b);
            let mut noisy = Array2::<f32>::zeros((b * joints, 3));
            let mut eps_all = Array2::<f32>::zeros((b * joints, 3));
            for (i, &idx) in chunk.iter().enumerate() {
                let flip = cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob;
                flipped.push(flip.then(|| horizontal_flip(&data[idx], &self.skeleton)));
                let sample = flipped[i].as_ref().unwrap_or(&data[idx]);
                let t = rng.random_range(1..=steps);
                let ab = self.schedule.alpha_bar(t);
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                for (j, c) in sample.pose3d.coords.iter().enumerate() {
                    for k in 0..3 {
                        let e = normal(&mut rng);
                        let y0 = c[k] / cfg.coord_scale;
                        noisy[[i * joints + j, k]] = (sa * y0 + sn * e) as f32;
                        eps_all[[i * joints + j, k]] = e as f32;
                    }
                }
                timesteps.push(t);
            }
            let features: Vec<_> = chunk
                .iter()
                .zip(&flipped)
                .map(|(&idx, f)| &f.as_ref().unwrap_or(&data[idx]).features)
                .collect();
            let (pred, cache) = self.model.forward_batch(&noisy, &features, &timesteps)?;
            let diff = &pred - &eps_all;
            let n = diff.len() as f64;
            let batch_loss = diff.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / n;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    message: format!("non-finite loss in epoch {}", self.epoch),
                    last_good: None,
                });
            }
            total += batch_loss * b as f64;
            let d_out = diff.mapv(|v| v * (2.0 / n) as f32);

            grads.fill(0.0);
            self.model.backward(&cache, &d_out, &mut grads)?;
            let mut g = grads.tensors_mut();
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut g, max_norm);
            }
            let g: Vec<&[f32]> = g.into_iter().map(|s| &*s).collect();
            self.optimizer.update(&mut self.model.tensors_mut(), &g, lr)?;
        }
        if !self.model.is_finite() {
            return Err(Error::Diverged {
                message: format!("non-finite parameters after epoch {}", self.epoch),
                last_good: None,
            });
        }
        let metrics = EpochMetrics {
            epoch: self.epoch,
            mean_loss: total / data.len() as f64,
            lr,
            samples: data.len(),
        };
        log::info!(
            "epoch {} loss {:.5} lr {:.3e} ({:.1}s)",
            metrics.epoch,
            metrics.mean_loss,
            lr,
            started.elapsed().as_secs_f64()
        );
        self.epoch += 1;
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    /// Trains until `config.epochs` epochs are complete. With a checkpoint
    /// path, the state is saved there after every epoch; a divergence error
    /// then names the last good file.
    pub fn fit(&mut self, data: &[PoseSample], checkpoint: Option<&Path>) -> Result<()> {
        let mut last_good: Option<PathBuf> = None;
        while self.epoch < self.config.epochs {
            match self.train_epoch(data) {
                Ok(_) => {}
                Err(Error::Diverged { message, .. }) => {
                    return Err(Error::Diverged { message, last_good })
                }
                Err(e) => return Err(e),
            }
            if let Some(path) = checkpoint {
                save_checkpoint(path, self)?;
                last_good = Some(path.to_path_buf());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{generate_synthetic_dataset, GeneratorConfig, Pose3D};

    #[test]
    fn learning_rate_decays_geometrically() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 6e-4);
        for e in [1, 7, 49] {
            assert_eq!(cfg.lr_at(e), 6e-4 * 0.993f64.powi(e as i32));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr_decay_factor: 0.0, ..Default::default() },
            TrainConfig { lr_decay_factor: 1.5, ..Default::default() },
            TrainConfig { lr_start: -1.0, ..Default::default() },
            TrainConfig { flip_prob: 2.0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    fn toy() -> (DenoiserModel<f64>, DiffusionSchedule, PoseSample) {
        let skel = SkeletonSpec::preset("toy8").unwrap();
        let gen = GeneratorConfig {
            feature_levels: 1,
            feature_dim: 8,
            ..Default::default()
        };
        let data = generate_synthetic_dataset(&skel, 1, &gen, 3).unwrap();
        let cfg = DenoiserConfig {
            joints: 8,
            levels: 1,
            dim: 8,
            heads: 2,
            p2c_blocks: 1,
            j2j_blocks: 1,
            ..Default::default()
        };
        let model = DenoiserModel::init(cfg, 1).unwrap();
        let schedule = ScheduleConfig::default().build().unwrap();
        (model, schedule, data.into_iter().next().unwrap())
    }

    #[test]
    fn zero_model_with_unit_noise_has_unit_loss() {
        let (mut model, schedule, sample) = toy();
        model.fill(0.0);
        let l = loss(&model, &schedule, &sample, 10, &[1.0; 24], 1000.0).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn head_bias_equal_to_noise_gives_zero_loss() {
        let (mut model, schedule, sample) = toy();
        model.head.weight.fill(0.0);
        model.head.bias.assign(&ndarray::arr1(&[0.3, -0.2, 1.1]));
        let eps: Vec<f64> = (0..8).flat_map(|_| [0.3, -0.2, 1.1]).collect();
        let l = loss(&model, &schedule, &sample, 500, &eps, 1000.0).unwrap();
        assert!(l < 1e-24);
    }

    #[test]
    fn loss_is_unchanged_by_consistent_joint_permutation() {
        let (mut model, schedule, sample) = toy();
        // A model whose output ignores joint identity: the joint stage is
        // permutation equivariant, so use per-joint channel tokens.
        let mut cfg = model.config().clone();
        cfg.channel_tokens = crate::denoiser::ChannelTokens::PerJoint;
        model = DenoiserModel::init(cfg, 4).unwrap();
        let perm = [3, 1, 0, 2, 7, 5, 6, 4];
        let eps: Vec<f64> = (0..24).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let mut permuted = sample.clone();
        permuted.pose3d = sample.pose3d.permuted(&perm);
        permuted.features = sample.features.permute_joints(&perm);
        let eps_p = Pose3D::from_flat(&eps).unwrap().permuted(&perm).to_flat();
        let a = loss(&model, &schedule, &sample, 321, &eps, 1000.0).unwrap();
        let b = loss(&model, &schedule, &permuted, 321, &eps_p, 1000.0).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn timestep_zero_is_rejected() {
        let (model, schedule, sample) = toy();
        assert!(loss(&model, &schedule, &sample, 0, &[0.0; 24], 1000.0).is_err());
    }
}
