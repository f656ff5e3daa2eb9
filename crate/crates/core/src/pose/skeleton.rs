use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kinematic tree of a human skeleton.
///
/// Joint 0 is the root and is the only joint without a parent. Bone `j`
/// connects `parents[j]` to `j`; `rest_directions[j]` is its direction in the
/// parent frame when all joint angles are zero. The root entries of
/// `bone_lengths` and `rest_directions` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub name: String,
    pub joint_names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    /// Millimeters.
    pub bone_lengths: Vec<f64>,
    pub mirror_map: Vec<usize>,
    pub rest_directions: Vec<[f64; 3]>,
}

impl SkeletonSpec {
    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.parents.len();
        if j == 0 {
            return Err(Error::Config("skeleton has no joints".into()));
        }
        for (what, len) in [
            ("joint_names", self.joint_names.len()),
            ("bone_lengths", self.bone_lengths.len()),
            ("mirror_map", self.mirror_map.len()),
            ("rest_directions", self.rest_directions.len()),
        ] {
            if len != j {
                return Err(Error::Config(format!(
                    "skeleton `{}`: {what} has {len} entries, expected {j}",
                    self.name
                )));
            }
        }
        if self.parents[0].is_some() {
            return Err(Error::Config("joint 0 must be the root".into()));
        }
        for (idx, parent) in self.parents.iter().enumerate().skip(1) {
            match parent {
                None => {
                    return Err(Error::Config(format!(
                        "joint {idx} has no parent; only the root may"
                    )))
                }
                Some(p) if *p >= j || *p == idx => {
                    return Err(Error::Config(format!(
                        "joint {idx} has invalid parent {p}"
                    )))
                }
                _ => {}
            }
        }
        // Walking up from any joint must reach the root within J steps.
        for start in 0..j {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = self.parents[cur] {
                cur = p;
                steps += 1;
                if steps > j {
                    return Err(Error::Config(format!(
                        "parent links starting at joint {start} form a cycle"
                    )));
                }
            }
        }
        for idx in 1..j {
            let len = self.bone_lengths[idx];
            if !(len.is_finite() && len > 0.0) {
                return Err(Error::Config(format!(
                    "bone length of joint {idx} must be positive, got {len}"
                )));
            }
            let d = self.rest_directions[idx];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::Config(format!(
                    "rest direction of joint {idx} must be non-zero"
                )));
            }
        }
        for (idx, &m) in self.mirror_map.iter().enumerate() {
            if m >= j || self.mirror_map[m] != idx {
                return Err(Error::Config(format!(
                    "mirror_map is not an involution at joint {idx}"
                )));
            }
        }
        Ok(())
    }

    /// Joint indices ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let j = self.joint_count();
        let mut children = vec![Vec::new(); j];
        for (idx, parent) in self.parents.iter().enumerate() {
            if let Some(p) = parent {
                children[*p].push(idx);
            }
        }
        let mut order = Vec::with_capacity(j);
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(n) = queue.pop_front() {
            order.push(n);
            queue.extend(children[n].iter().copied());
        }
        order
    }

    /// Eight-joint desk-scale skeleton: pelvis, thorax, elbows, wrists, knees.
    pub fn toy8() -> Self {
        let s = Self {
            name: "toy8".into(),
            joint_names: [
                "pelvis", "thorax", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_knee",
                "r_knee",
            ]
            .map(String::from)
            .to_vec(),
            parents: vec![None, Some(0), Some(1), Some(1), Some(2), Some(3), Some(0), Some(0)],
            bone_lengths: vec![0.0, 500.0, 300.0, 300.0, 250.0, 250.0, 450.0, 450.0],
            mirror_map: vec![0, 1, 3, 2, 5, 4, 7, 6],
            rest_directions: vec![
                [0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, -0.3, 0.0],
                [-1.0, -0.3, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.25, -1.0, 0.0],
                [-0.25, -1.0, 0.0],
            ],
        };
        debug_assert!(s.validate().is_ok());
        s
    }

    /// Seventeen-joint layout following the common Human3.6M joint order.
    pub fn h36m17() -> Self {
        let names = [
            "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine",
            "thorax", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
            "r_elbow", "r_wrist",
        ];
        let s = Self {
            name: "h36m17".into(),
            joint_names: names.map(String::from).to_vec(),
            parents: vec![
                None,
                Some(0),
                Some(1),
                Some(2),
                Some(0),
                Some(4),
                Some(5),
                Some(0),
                Some(7),
                Some(8),
                Some(9),
                Some(8),
                Some(11),
                Some(12),
                Some(8),
                Some(14),
                Some(15),
            ],
            bone_lengths: vec![
                0.0, 133.0, 454.0, 450.0, 133.0, 454.0, 450.0, 233.0, 257.0, 121.0, 115.0, 151.0,
                278.0, 252.0, 151.0, 278.0, 252.0,
            ],
            mirror_map: vec![0, 4, 5, 6, 1, 2, 3, 7, 8, 9, 10, 14, 15, 16, 11, 12, 13],
            rest_directions: vec![
                [0.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, -1.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, -1.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, -1.0, 0.0],
            ],
        };
        debug_assert!(s.validate().is_ok());
        s
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy8" => Ok(Self::toy8()),
            "h36m17" => Ok(Self::h36m17()),
            other => Err(Error::Config(format!("unknown skeleton preset `{other}`"))),
        }
    }
}
