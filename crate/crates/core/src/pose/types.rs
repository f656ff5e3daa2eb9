use serde::{Deserialize, Serialize};

use super::skeleton::SkeletonSpec;
use crate::error::{Error, Result};

/// Root-relative 3D joint positions in millimeters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    pub coords: Vec<[f64; 3]>,
}

impl Pose3D {
    pub fn new(coords: Vec<[f64; 3]>) -> Self {
        Self { coords }
    }

    pub fn zeros(joints: usize) -> Self {
        Self {
            coords: vec![[0.0; 3]; joints],
        }
    }

    /// Builds a pose from a row-major `J * 3` slice.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 3 != 0 {
            return Err(Error::Shape(format!(
                "flat 3D pose length {} is not a multiple of 3",
                values.len()
            )));
        }
        Ok(Self {
            coords: values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.coords.iter().flatten().copied().collect()
    }

    pub fn joint_count(&self) -> usize {
        self.coords.len()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().flatten().all(|v| v.is_finite())
    }

    /// Subtracts the root position from every joint.
    pub fn root_centered(&self) -> Self {
        let root = self.coords.first().copied().unwrap_or([0.0; 3]);
        Self {
            coords: self
                .coords
                .iter()
                .map(|c| [c[0] - root[0], c[1] - root[1], c[2] - root[2]])
                .collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            coords: self
                .coords
                .iter()
                .map(|c| [c[0] * factor, c[1] * factor, c[2] * factor])
                .collect(),
        }
    }

    pub fn translated(&self, offset: [f64; 3]) -> Self {
        Self {
            coords: self
                .coords
                .iter()
                .map(|c| [c[0] + offset[0], c[1] + offset[1], c[2] + offset[2]])
                .collect(),
        }
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            coords: perm.iter().map(|&p| self.coords[p]).collect(),
        }
    }
}

/// 2D joint positions in normalized image units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub coords: Vec<[f64; 2]>,
}

impl Pose2D {
    pub fn new(coords: Vec<[f64; 2]>) -> Self {
        Self { coords }
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 2 != 0 {
            return Err(Error::Shape(format!(
                "flat 2D pose length {} is not a multiple of 2",
                values.len()
            )));
        }
        Ok(Self {
            coords: values.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.coords.iter().flatten().copied().collect()
    }

    pub fn joint_count(&self) -> usize {
        self.coords.len()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().flatten().all(|v| v.is_finite())
    }
}

/// Conditioning descriptor of shape `(levels + 1) x joints x dim`.
///
/// Channels `0..levels` hold context features; channel `levels` is the
/// 2D-pose channel. Stored row-major as `[channel][joint][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningFeatures {
    levels: usize,
    joints: usize,
    dim: usize,
    data: Vec<f32>,
}

impl ConditioningFeatures {
    pub fn new(levels: usize, joints: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        let expected = (levels + 1) * joints * dim;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "feature tensor has {} values, expected ({}+1)*{}*{} = {expected}",
                data.len(),
                levels,
                joints,
                dim
            )));
        }
        Ok(Self {
            levels,
            joints,
            dim,
            data,
        })
    }

    pub fn zeros(levels: usize, joints: usize, dim: usize) -> Self {
        Self {
            levels,
            joints,
            dim,
            data: vec![0.0; (levels + 1) * joints * dim],
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> usize {
        self.levels + 1
    }

    pub fn pose_channel(&self) -> usize {
        self.levels
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// The `d`-vector of one `(channel, joint)` cell.
    pub fn cell(&self, channel: usize, joint: usize) -> &[f32] {
        let start = (channel * self.joints + joint) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn cell_mut(&mut self, channel: usize, joint: usize) -> &mut [f32] {
        let start = (channel * self.joints + joint) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn channel(&self, channel: usize) -> &[f32] {
        let len = self.joints * self.dim;
        &self.data[channel * len..(channel + 1) * len]
    }

    /// Reorders the joint axis: output joint `j` takes input joint `perm[j]`.
    pub fn permute_joints(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for ch in 0..self.channels() {
            for (j, &src) in perm.iter().enumerate() {
                out.cell_mut(ch, j).copy_from_slice(self.cell(ch, src));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    pub sample_id: String,
    pub action_tag: Option<String>,
    pub pose3d: Pose3D,
    pub pose2d: Pose2D,
    pub features: ConditioningFeatures,
}

impl PoseSample {
    pub fn validate(&self) -> Result<()> {
        let j = self.pose3d.joint_count();
        if self.pose2d.joint_count() != j || self.features.joints() != j {
            return Err(Error::Shape(format!(
                "sample `{}`: joint counts differ (3D {}, 2D {}, features {})",
                self.sample_id,
                j,
                self.pose2d.joint_count(),
                self.features.joints()
            )));
        }
        Ok(())
    }
}

/// Mirrors a sample left-to-right.
///
/// Negates x in both poses and reorders joints through the skeleton's
/// mirror map. Feature values are moved along the joint axis only.
pub fn horizontal_flip(sample: &PoseSample, spec: &SkeletonSpec) -> PoseSample {
    let perm = &spec.mirror_map;
    let pose3d = Pose3D {
        coords: perm
            .iter()
            .map(|&p| {
                let c = sample.pose3d.coords[p];
                [-c[0], c[1], c[2]]
            })
            .collect(),
    };
    let pose2d = Pose2D {
        coords: perm
            .iter()
            .map(|&p| {
                let c = sample.pose2d.coords[p];
                [-c[0], c[1]]
            })
            .collect(),
    };
    PoseSample {
        sample_id: sample.sample_id.clone(),
        action_tag: sample.action_tag.clone(),
        pose3d,
        pose2d,
        features: sample.features.permute_joints(perm),
    }
}
