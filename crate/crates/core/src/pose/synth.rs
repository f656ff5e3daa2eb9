//! Synthetic motion data: forward kinematics over random joint angles,
//! pinhole projection and feature extraction.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureExtractor;
use super::skeleton::SkeletonSpec;
use super::types::{Pose2D, Pose3D, PoseSample};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal, rng_from};

/// Pinhole camera looking down +z at the skeleton root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PinholeCamera {
    /// Focal length in normalized image units.
    pub focal: f64,
    pub principal: [f64; 2],
    /// Distance from the camera center to the root joint, millimeters.
    pub root_depth: f64,
}

impl Default for PinholeCamera {
    fn default() -> Self {
        Self {
            focal: 5.0,
            principal: [0.0, 0.0],
            root_depth: 5000.0,
        }
    }
}

impl PinholeCamera {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::Config(format!(
                "camera focal length must be positive, got {}",
                self.focal
            )));
        }
        if !(self.root_depth.is_finite() && self.root_depth > 0.0) {
            return Err(Error::Config(format!(
                "camera root depth must be positive, got {}",
                self.root_depth
            )));
        }
        if !self.principal.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("camera principal point must be finite".into()));
        }
        Ok(())
    }

    /// Projects a root-relative pose placed `root_depth` in front of the camera.
    pub fn project(&self, pose: &Pose3D) -> Result<Pose2D> {
        let mut coords = Vec::with_capacity(pose.joint_count());
        for (j, c) in pose.coords.iter().enumerate() {
            let z = c[2] + self.root_depth;
            if z <= 0.0 {
                return Err(Error::Config(format!(
                    "joint {j} lies behind the camera (depth {z})"
                )));
            }
            coords.push([
                self.focal * c[0] / z + self.principal[0],
                self.focal * c[1] / z + self.principal[1],
            ]);
        }
        Ok(Pose2D::new(coords))
    }
}

/// Symmetric joint-angle limits in radians, per rotation axis (x, y, z).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointLimits {
    pub root: [f64; 3],
    pub limb: [f64; 3],
}

impl Default for JointLimits {
    fn default() -> Self {
        Self {
            root: [0.15, 0.5, 0.15],
            limb: [0.8, 0.4, 0.8],
        }
    }
}

/// A named motion style; scales the joint-angle limits of its samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionProfile {
    pub name: String,
    pub limit_scale: f64,
}

fn default_actions() -> Vec<ActionProfile> {
    [("Relaxed", 0.6), ("Walk", 0.9), ("Reach", 1.2)]
        .into_iter()
        .map(|(name, limit_scale)| ActionProfile {
            name: name.into(),
            limit_scale,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub camera: PinholeCamera,
    pub noise_std_2d: f64,
    pub limits: JointLimits,
    pub actions: Vec<ActionProfile>,
    pub feature_levels: usize,
    pub feature_dim: usize,
    /// Key of the context-feature bank; shared by every sample of a benchmark.
    pub context_seed: u64,
    pub id_prefix: String,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            camera: PinholeCamera::default(),
            noise_std_2d: 0.002,
            limits: JointLimits::default(),
            actions: default_actions(),
            feature_levels: 4,
            feature_dim: 32,
            context_seed: 0xC0_47E7,
            id_prefix: "frame".into(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if !(self.noise_std_2d.is_finite() && self.noise_std_2d >= 0.0) {
            return Err(Error::Config("noise_std_2d must be non-negative".into()));
        }
        if self.actions.is_empty() {
            return Err(Error::Config("at least one action profile is required".into()));
        }
        for a in &self.actions {
            if !(a.limit_scale.is_finite() && a.limit_scale >= 0.0) {
                return Err(Error::Config(format!(
                    "action `{}` has invalid limit scale {}",
                    a.name, a.limit_scale
                )));
            }
        }
        let all_limits = self.limits.root.iter().chain(&self.limits.limb);
        if all_limits.into_iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("joint-angle limits must be non-negative".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Joint positions from per-joint Euler angles (x, y, z order, radians).
///
/// `angles[0]` orients the whole body; every other entry rotates the bone
/// to that joint relative to its parent's frame.
pub fn forward_kinematics(spec: &SkeletonSpec, angles: &[[f64; 3]]) -> Pose3D {
    let j = spec.joint_count();
    let mut frames = vec![Matrix3::<f64>::identity(); j];
    let mut positions = vec![Vector3::<f64>::zeros(); j];
    for idx in spec.topological_order() {
        let a = angles[idx];
        let local = Rotation3::from_axis_angle(&Vector3::x_axis(), a[0])
            * Rotation3::from_axis_angle(&Vector3::y_axis(), a[1])
            * Rotation3::from_axis_angle(&Vector3::z_axis(), a[2]);
        match spec.parents[idx] {
            None => frames[idx] = *local.matrix(),
            Some(p) => {
                let frame = frames[p] * local.matrix();
                let rest = Vector3::from(spec.rest_directions[idx]).normalize();
                positions[idx] = positions[p] + frame * rest * spec.bone_lengths[idx];
                frames[idx] = frame;
            }
        }
    }
    Pose3D::new(positions.iter().map(|v| [v.x, v.y, v.z]).collect())
}

/// Draws `n` samples; sample `i` depends only on `(spec, config, seed, i)`.
pub fn generate_synthetic_dataset(
    spec: &SkeletonSpec,
    n: usize,
    config: &GeneratorConfig,
    seed: u64,
) -> Result<Vec<PoseSample>> {
    spec.validate()?;
    config.validate()?;
    let j = spec.joint_count();
    let extractor = FeatureExtractor::new(
        config.feature_levels,
        j,
        config.feature_dim,
        config.context_seed,
    )?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng_from(derive_seed(seed, i as u64));
        let action = &config.actions[rng.random_range(0..config.actions.len())];
        let angles: Vec<[f64; 3]> = (0..j)
            .map(|idx| {
                let lim = if idx == 0 {
                    config.limits.root
                } else {
                    config.limits.limb
                };
                lim.map(|l| {
                    let bound = l * action.limit_scale;
                    if bound > 0.0 {
                        rng.random_range(-bound..=bound)
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        let pose3d = forward_kinematics(spec, &angles);
        let clean = config.camera.project(&pose3d)?;
        let pose2d = Pose2D::new(
            clean
                .coords
                .iter()
                .map(|c| {
                    let nx = normal(&mut rng);
                    let ny = normal(&mut rng);
                    [
                        c[0] + config.noise_std_2d * nx,
                        c[1] + config.noise_std_2d * ny,
                    ]
                })
                .collect(),
        );
        let features = extractor.extract(&pose2d)?;
        samples.push(PoseSample {
            sample_id: format!("{}_{i:06}", config.id_prefix),
            action_tag: Some(action.name.clone()),
            pose3d,
            pose2d,
            features,
        });
    }
    Ok(samples)
}
