//! Skeleton and pose data model, synthetic data generation, conditioning
//! features and pose-file I/O.

mod features;
pub mod io;
mod skeleton;
mod synth;
mod types;

pub use features::{extract_features, FeatureExtractor};
pub use skeleton::SkeletonSpec;
pub use synth::{
    forward_kinematics, generate_synthetic_dataset, ActionProfile, GeneratorConfig, JointLimits,
    PinholeCamera,
};
pub use types::{horizontal_flip, ConditioningFeatures, Pose2D, Pose3D, PoseSample};
