//! Conditional noise-prediction network with hand-written gradients.
//!
//! Input assembly builds `c = L + 2` channels per joint: `L` context
//! channels and the 2D-pose channel taken from the conditioning features,
//! then the projected noisy pose. The timestep embedding is added to every
//! `(channel, joint)` cell. A channel-token stage attends across the `c`
//! channels, a joint-token stage attends across joints, and the per-joint
//! `c * d` vector is fused to `d` and regressed to 3 values. Both readout
//! maps are linear, so the residual stream reaches the output unnormalized.
//!
//! Batches are laid out as 2D matrices. In the channel layout row
//! `b * c + ch` holds joints side by side (`J * d` columns); in the joint
//! layout row `b * J + j` holds channels side by side (`c * d` columns).

mod attention;
mod embed;
mod layers;

use ndarray::{s, Array2, Array3};
use num_traits::Float;
use serde::{Deserialize, Serialize};

pub use attention::{BlockCache, SelfAttention, TransformerBlock};
pub use embed::embed_timestep;
pub use layers::{gelu, gelu_backward, LayerNorm, LayerNormCache, Linear, LAYER_NORM_EPS};

use crate::error::{Error, Result};
use crate::pose::ConditioningFeatures;
use crate::rng::rng_from;

/// Floating-point element type of a model (`f32` for training, `f64` for
/// gradient checks).
pub trait Scalar:
    Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
}

/// How the channel-token stage forms its tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelTokens {
    /// One token per channel holding all joints (`J * d` wide).
    #[default]
    Flattened,
    /// Attention across channels run separately for each joint (`d` wide).
    PerJoint,
}

/// Which conditioning inputs reach the network. A disabled input is
/// replaced by zeros before the timestep embedding is added.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditioningMask {
    pub context: bool,
    pub pose: bool,
}

impl Default for ConditioningMask {
    fn default() -> Self {
        Self {
            context: true,
            pose: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub joints: usize,
    /// Context levels `L`; the model has `L + 2` channels.
    pub levels: usize,
    pub dim: usize,
    pub heads: usize,
    pub p2c_blocks: usize,
    pub j2j_blocks: usize,
    /// Feed-forward hidden width as a multiple of the token width.
    pub ff_mult: usize,
    pub channel_tokens: ChannelTokens,
    pub mask: ConditioningMask,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            joints: 8,
            levels: 4,
            dim: 32,
            heads: 2,
            p2c_blocks: 2,
            j2j_blocks: 2,
            ff_mult: 2,
            channel_tokens: ChannelTokens::Flattened,
            mask: ConditioningMask::default(),
        }
    }
}

impl DenoiserConfig {
    /// The 17-joint, `d = 128` configuration with four blocks per stage.
    pub fn full_scale() -> Self {
        Self {
            joints: 17,
            dim: 128,
            heads: 4,
            p2c_blocks: 4,
            j2j_blocks: 4,
            ..Self::default()
        }
    }

    pub fn channels(&self) -> usize {
        self.levels + 2
    }

    pub fn p2c_width(&self) -> usize {
        match self.channel_tokens {
            ChannelTokens::Flattened => self.joints * self.dim,
            ChannelTokens::PerJoint => self.dim,
        }
    }

    pub fn j2j_width(&self) -> usize {
        self.channels() * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("denoiser: {m}")));
        if self.joints == 0 || self.dim == 0 || self.heads == 0 || self.ff_mult == 0 {
            return bad("joints, dim, heads and ff_mult must be positive".into());
        }
        for (stage, width) in [("channel", self.p2c_width()), ("joint", self.j2j_width())] {
            if width % self.heads != 0 {
                return bad(format!(
                    "{stage}-token width {width} is not divisible by {} heads",
                    self.heads
                ));
            }
        }
        Ok(())
    }
}

/// Full parameter set. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel<T> {
    config: DenoiserConfig,
    pub pose_in: Linear<T>,
    pub p2c: Vec<TransformerBlock<T>>,
    pub j2j: Vec<TransformerBlock<T>>,
    pub fuse: Linear<T>,
    pub head: Linear<T>,
}

/// Intermediates retained by [`DenoiserModel::forward_batch`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    batch: usize,
    shared_features: bool,
    noisy: Array2<T>,
    p2c: Vec<BlockCache<T>>,
    j2j: Vec<BlockCache<T>>,
    fuse_input: Array2<T>,
    fused: Array2<T>,
}

impl<T> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Gradients with respect to the network inputs.
#[derive(Clone, Debug)]
pub struct InputGradients<T> {
    /// `(B * J) x 3`.
    pub noisy: Array2<T>,
    /// One `(L + 1) x (J * d)` matrix per feature tensor passed in.
    pub features: Vec<Array2<T>>,
}

fn check_finite<T: Scalar>(a: &Array2<T>, stage: &'static str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            stage,
            message: "non-finite activation".into(),
        })
    }
}

/// `(B * c) x (J * d)` to `(B * J) x (c * d)`.
fn channel_to_joint<T: Scalar>(x: &Array2<T>, b: usize, c: usize, j: usize, d: usize) -> Array2<T> {
    let v = x.view().into_shape_with_order((b, c, j, d)).expect("channel layout");
    v.permuted_axes([0, 2, 1, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * j, c * d))
        .expect("joint layout")
}

/// `(B * J) x (c * d)` to `(B * c) x (J * d)`.
fn joint_to_channel<T: Scalar>(x: &Array2<T>, b: usize, c: usize, j: usize, d: usize) -> Array2<T> {
    let v = x.view().into_shape_with_order((b, j, c, d)).expect("joint layout");
    v.permuted_axes([0, 2, 1, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * c, j * d))
        .expect("channel layout")
}

/// Converts conditioning features to an `(L + 1) x (J * d)` matrix.
pub fn features_matrix<T: Scalar>(f: &ConditioningFeatures) -> Array2<T> {
    Array2::from_shape_vec(
        (f.channels(), f.joints() * f.dim()),
        f.as_slice().iter().map(|&v| T::of(v as f64)).collect(),
    )
    .expect("feature tensor layout")
}

impl<T: Scalar> DenoiserModel<T> {
    /// Random initialization; identical seeds give identical parameters for
    /// any element type up to rounding.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let (d, c) = (config.dim, config.channels());
        let pose_in = Linear::init(3, d, &mut rng);
        let p2c = (0..config.p2c_blocks)
            .map(|_| TransformerBlock::init(config.p2c_width(), config.ff_mult, &mut rng))
            .collect();
        let j2j = (0..config.j2j_blocks)
            .map(|_| TransformerBlock::init(config.j2j_width(), config.ff_mult, &mut rng))
            .collect();
        let fuse = Linear::init(c * d, d, &mut rng);
        let head = Linear::init(d, 3, &mut rng);
        Ok(Self {
            config,
            pose_in,
            p2c,
            j2j,
            fuse,
            head,
        })
    }

    /// Same structure as `self`, every value zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(T::zero());
        z
    }

    pub fn fill(&mut self, value: T) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Replaces the conditioning mask; parameters are unaffected.
    pub fn set_mask(&mut self, mask: ConditioningMask) {
        self.config.mask = mask;
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            config: self.config.clone(),
            pose_in: self.pose_in.cast(),
            p2c: self.p2c.iter().map(|b| b.cast()).collect(),
            j2j: self.j2j.iter().map(|b| b.cast()).collect(),
            fuse: self.fuse.cast(),
            head: self.head.cast(),
        }
    }

    /// Named parameter tensors in declaration order.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        self.pose_in.push_tensors("pose_in", &mut out);
        for (i, b) in self.p2c.iter().enumerate() {
            b.push_tensors(&format!("p2c.{i}"), &mut out);
        }
        for (i, b) in self.j2j.iter().enumerate() {
            b.push_tensors(&format!("j2j.{i}"), &mut out);
        }
        self.fuse.push_tensors("fuse", &mut out);
        self.head.push_tensors("head", &mut out);
        out
    }

    /// Mutable parameter tensors in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        self.pose_in.push_tensors_mut(&mut out);
        for b in &mut self.p2c {
            b.push_tensors_mut(&mut out);
        }
        for b in &mut self.j2j {
            b.push_tensors_mut(&mut out);
        }
        self.fuse.push_tensors_mut(&mut out);
        self.head.push_tensors_mut(&mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn check_features(&self, f: &ConditioningFeatures) -> Result<()> {
        let c = &self.config;
        if f.levels() != c.levels || f.joints() != c.joints || f.dim() != c.dim {
            return Err(Error::Shape(format!(
                "features are (L={}, J={}, d={}), model expects (L={}, J={}, d={})",
                f.levels(),
                f.joints(),
                f.dim(),
                c.levels,
                c.joints,
                c.dim
            )));
        }
        Ok(())
    }

    /// Builds the `(B * c) x (J * d)` input in channel layout.
    fn assemble(&self, noisy: &Array2<T>, features: &[Array2<T>], timesteps: &[usize]) -> Array2<T> {
        let cfg = &self.config;
        let (jn, d, c, l) = (cfg.joints, cfg.dim, cfg.channels(), cfg.levels);
        let batch = timesteps.len();
        let proj = self.pose_in.forward(noisy);
        let mut x = Array2::zeros((batch * c, jn * d));
        for (b, &t) in timesteps.iter().enumerate() {
            let f = &features[if features.len() == 1 { 0 } else { b }];
            if cfg.mask.context && l > 0 {
                x.slice_mut(s![b * c..b * c + l, ..])
                    .assign(&f.slice(s![0..l, ..]));
            }
            if cfg.mask.pose {
                x.row_mut(b * c + l).assign(&f.row(l));
            }
            let mut noisy_row = x.row_mut(b * c + l + 1);
            for j in 0..jn {
                noisy_row
                    .slice_mut(s![j * d..(j + 1) * d])
                    .assign(&proj.row(b * jn + j));
            }
            let emb: Vec<T> = embed_timestep(t, d).into_iter().map(T::of).collect();
            for ch in 0..c {
                let mut row = x.row_mut(b * c + ch);
                for j in 0..jn {
                    for k in 0..d {
                        row[j * d + k] += emb[k];
                    }
                }
            }
        }
        x
    }

    /// Assembled input tensor `c x J x d` for a single sample.
    pub fn assemble_input(
        &self,
        noisy: &Array2<T>,
        features: &ConditioningFeatures,
        t: usize,
    ) -> Result<Array3<T>> {
        self.check_features(features)?;
        self.check_noisy(noisy, 1)?;
        let cfg = &self.config;
        let x = self.assemble(noisy, &[features_matrix(features)], &[t]);
        Ok(x
            .into_shape_with_order((cfg.channels(), cfg.joints, cfg.dim))
            .expect("channel layout"))
    }

    fn check_noisy(&self, noisy: &Array2<T>, batch: usize) -> Result<()> {
        if noisy.dim() != (batch * self.config.joints, 3) {
            return Err(Error::Shape(format!(
                "noisy pose batch is {:?}, expected ({}, 3)",
                noisy.dim(),
                batch * self.config.joints
            )));
        }
        Ok(())
    }

    /// Predicts noise for a batch. `noisy` stacks `B` poses of `J` rows;
    /// `features` has one entry shared by every sample or one per sample.
    pub fn forward_batch(
        &self,
        noisy: &Array2<T>,
        features: &[&ConditioningFeatures],
        timesteps: &[usize],
    ) -> Result<(Array2<T>, ForwardCache<T>)> {
        for f in features {
            self.check_features(f)?;
        }
        let mats: Vec<Array2<T>> = features.iter().map(|f| features_matrix(f)).collect();
        self.forward_matrices(noisy, &mats, timesteps)
    }

    /// As [`Self::forward_batch`] with features given as
    /// `(L + 1) x (J * d)` matrices.
    pub fn forward_matrices(
        &self,
        noisy: &Array2<T>,
        features: &[Array2<T>],
        timesteps: &[usize],
    ) -> Result<(Array2<T>, ForwardCache<T>)> {
        let cfg = &self.config;
        let (jn, d, c) = (cfg.joints, cfg.dim, cfg.channels());
        let batch = timesteps.len();
        if batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        self.check_noisy(noisy, batch)?;
        if features.len() != 1 && features.len() != batch {
            return Err(Error::Shape(format!(
                "{} feature tensors for a batch of {batch}",
                features.len()
            )));
        }
        for f in features {
            if f.dim() != (cfg.levels + 1, jn * d) {
                return Err(Error::Shape(format!(
                    "feature matrix is {:?}, expected ({}, {})",
                    f.dim(),
                    cfg.levels + 1,
                    jn * d
                )));
            }
        }

        let x = self.assemble(noisy, features, timesteps);
        check_finite(&x, "input")?;

        let mut p2c_caches = Vec::with_capacity(self.p2c.len());
        let mut z = match cfg.channel_tokens {
            ChannelTokens::Flattened => {
                let mut h = x;
                for blk in &self.p2c {
                    let (y, cache) = blk.forward(&h, c, cfg.heads);
                    h = y;
                    p2c_caches.push(cache);
                }
                check_finite(&h, "pose_to_context")?;
                channel_to_joint(&h, batch, c, jn, d)
            }
            ChannelTokens::PerJoint => {
                let mut h = channel_to_joint(&x, batch, c, jn, d)
                    .into_shape_with_order((batch * jn * c, d))
                    .expect("per-joint tokens");
                for blk in &self.p2c {
                    let (y, cache) = blk.forward(&h, c, cfg.heads);
                    h = y;
                    p2c_caches.push(cache);
                }
                check_finite(&h, "pose_to_context")?;
                h.into_shape_with_order((batch * jn, c * d))
                    .expect("joint layout")
            }
        };

        let mut j2j_caches = Vec::with_capacity(self.j2j.len());
        for blk in &self.j2j {
            let (y, cache) = blk.forward(&z, jn, cfg.heads);
            z = y;
            j2j_caches.push(cache);
        }
        check_finite(&z, "joint_to_joint")?;

        let fused = self.fuse.forward(&z);
        let out = self.head.forward(&fused);
        check_finite(&out, "head")?;
        Ok((
            out,
            ForwardCache {
                batch,
                shared_features: features.len() == 1,
                noisy: noisy.clone(),
                p2c: p2c_caches,
                j2j: j2j_caches,
                fuse_input: z,
                fused,
            },
        ))
    }

    /// Single-sample prediction of the `J x 3` noise.
    pub fn forward(
        &self,
        noisy: &Array2<T>,
        features: &ConditioningFeatures,
        t: usize,
    ) -> Result<Array2<T>> {
        Ok(self.forward_batch(noisy, &[features], &[t])?.0)
    }

    /// Accumulates parameter gradients of `sum(d_out * output)` into `grads`
    /// and returns gradients with respect to the inputs.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_out: &Array2<T>,
        grads: &mut DenoiserModel<T>,
    ) -> Result<InputGradients<T>> {
        let cfg = &self.config;
        let (jn, d, c, l) = (cfg.joints, cfg.dim, cfg.channels(), cfg.levels);
        let batch = cache.batch;
        if d_out.dim() != (batch * jn, 3) {
            return Err(Error::Shape(format!(
                "upstream gradient is {:?}, expected ({}, 3)",
                d_out.dim(),
                batch * jn
            )));
        }
        if cache.p2c.len() != self.p2c.len() || cache.j2j.len() != self.j2j.len() {
            return Err(Error::Shape("forward cache does not match the model".into()));
        }

        let d_fused = self.head.backward(&cache.fused, d_out, &mut grads.head);
        let mut dz = self.fuse.backward(&cache.fuse_input, &d_fused, &mut grads.fuse);
        for ((blk, bc), g) in self
            .j2j
            .iter()
            .zip(&cache.j2j)
            .zip(grads.j2j.iter_mut())
            .rev()
        {
            dz = blk.backward(bc, &dz, jn, cfg.heads, g);
        }

        let dx = match cfg.channel_tokens {
            ChannelTokens::Flattened => {
                let mut dh = joint_to_channel(&dz, batch, c, jn, d);
                for ((blk, bc), g) in self
                    .p2c
                    .iter()
                    .zip(&cache.p2c)
                    .zip(grads.p2c.iter_mut())
                    .rev()
                {
                    dh = blk.backward(bc, &dh, c, cfg.heads, g);
                }
                dh
            }
            ChannelTokens::PerJoint => {
                let mut dh = dz
                    .into_shape_with_order((batch * jn * c, d))
                    .expect("per-joint tokens");
                for ((blk, bc), g) in self
                    .p2c
                    .iter()
                    .zip(&cache.p2c)
                    .zip(grads.p2c.iter_mut())
                    .rev()
                {
                    dh = blk.backward(bc, &dh, c, cfg.heads, g);
                }
                let dh = dh
                    .into_shape_with_order((batch * jn, c * d))
                    .expect("joint layout");
                joint_to_channel(&dh, batch, c, jn, d)
            }
        };

        let mut d_proj = Array2::zeros((batch * jn, d));
        for b in 0..batch {
            let row = dx.row(b * c + l + 1);
            for j in 0..jn {
                d_proj
                    .row_mut(b * jn + j)
                    .assign(&row.slice(s![j * d..(j + 1) * d]));
            }
        }
        let d_noisy = self
            .pose_in
            .backward(&cache.noisy, &d_proj, &mut grads.pose_in);

        let n_feat = if cache.shared_features { 1 } else { batch };
        let mut d_features = vec![Array2::zeros((l + 1, jn * d)); n_feat];
        for b in 0..batch {
            let target = &mut d_features[if cache.shared_features { 0 } else { b }];
            if cfg.mask.context && l > 0 {
                let mut dst = target.slice_mut(s![0..l, ..]);
                dst += &dx.slice(s![b * c..b * c + l, ..]);
            }
            if cfg.mask.pose {
                let mut dst = target.row_mut(l);
                dst += &dx.row(b * c + l);
            }
        }
        Ok(InputGradients {
            noisy: d_noisy,
            features: d_features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, rng_from};

    fn tiny(channel_tokens: ChannelTokens) -> DenoiserConfig {
        DenoiserConfig {
            joints: 3,
            levels: 1,
            dim: 8,
            heads: 2,
            p2c_blocks: 1,
            j2j_blocks: 1,
            ff_mult: 2,
            channel_tokens,
            mask: ConditioningMask::default(),
        }
    }

    fn random_features(cfg: &DenoiserConfig, seed: u64) -> ConditioningFeatures {
        let mut rng = rng_from(seed);
        let n = (cfg.levels + 1) * cfg.joints * cfg.dim;
        let data = (0..n).map(|_| normal(&mut rng) as f32).collect();
        ConditioningFeatures::new(cfg.levels, cfg.joints, cfg.dim, data).unwrap()
    }

    #[test]
    fn preset_configs_validate() {
        DenoiserConfig::default().validate().unwrap();
        let full = DenoiserConfig::full_scale();
        full.validate().unwrap();
        assert_eq!((full.joints, full.dim, full.heads), (17, 128, 4));
    }

    fn random_pose(rows: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from(seed);
        Array2::from_shape_simple_fn((rows, 3), || normal(&mut rng))
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = tiny(ChannelTokens::Flattened);
        let model = DenoiserModel::<f64>::init(cfg.clone(), 1).unwrap();
        let f = random_features(&cfg, 2);
        let (out, cache) = model
            .forward_batch(&random_pose(3, 3), &[&f], &[10])
            .unwrap();
        let mut grads = model.zeros_like();
        let dx = model
            .backward(&cache, &Array2::zeros(out.raw_dim()), &mut grads)
            .unwrap();
        assert!(grads.tensors().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
        assert!(dx.noisy.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny(ChannelTokens::Flattened);
        let a = DenoiserModel::<f32>::init(cfg.clone(), 9).unwrap();
        let b = DenoiserModel::<f32>::init(cfg.clone(), 9).unwrap();
        assert_eq!(a, b);
        let f = random_features(&cfg, 4);
        let y = random_pose(3, 5).mapv(|v| v as f32);
        let ea = a.forward(&y, &f, 500).unwrap();
        let eb = b.forward(&y, &f, 500).unwrap();
        assert_eq!(ea, eb);
        assert_eq!(ea.dim(), (3, 3));
    }

    #[test]
    fn assembled_input_layout() {
        let cfg = tiny(ChannelTokens::Flattened);
        let mut model = DenoiserModel::<f64>::init(cfg.clone(), 1).unwrap();
        model.pose_in.bias.fill(0.0);
        let f = random_features(&cfg, 6);
        let zero = Array2::zeros((3, 3));
        let x = model.assemble_input(&zero, &f, 7).unwrap();
        let emb = embed_timestep(7, 8);
        for j in 0..3 {
            for k in 0..8 {
                assert!((x[[2, j, k]] - emb[k]).abs() < 1e-15);
                for ch in 0..2 {
                    let expect = f.cell(ch, j)[k] as f64;
                    assert!((x[[ch, j, k]] - emb[k] - expect).abs() < 1e-15);
                }
            }
        }
        let x2 = model.assemble_input(&zero, &f, 100).unwrap();
        let emb2 = embed_timestep(100, 8);
        for ((ch, j, k), v) in x2.indexed_iter() {
            let _ = (ch, j);
            assert!((v - x[[ch, j, k]] - (emb2[k] - emb[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_inputs_have_no_effect() {
        let mut cfg = tiny(ChannelTokens::Flattened);
        cfg.mask = ConditioningMask {
            context: false,
            pose: true,
        };
        let model = DenoiserModel::<f64>::init(cfg.clone(), 3).unwrap();
        let f = random_features(&cfg, 7);
        let mut g = f.clone();
        g.cell_mut(0, 1)[3] += 5.0;
        let y = random_pose(3, 8);
        assert_eq!(
            model.forward(&y, &f, 20).unwrap(),
            model.forward(&y, &g, 20).unwrap()
        );
        let (out, cache) = model.forward_batch(&y, &[&f], &[20]).unwrap();
        let mut grads = model.zeros_like();
        let dx = model
            .backward(&cache, &Array2::ones(out.raw_dim()), &mut grads)
            .unwrap();
        assert!(dx.features[0].row(0).iter().all(|&v| v == 0.0));
        assert!(dx.features[0].row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn per_joint_model_is_joint_permutation_equivariant() {
        let mut cfg = tiny(ChannelTokens::PerJoint);
        cfg.joints = 4;
        let model = DenoiserModel::<f64>::init(cfg.clone(), 11).unwrap();
        let f = random_features(&cfg, 12);
        let y = random_pose(4, 13);
        let perm = [2, 0, 3, 1];
        let out = model.forward(&y, &f, 300).unwrap();
        let yp = y.select(ndarray::Axis(0), &perm);
        let outp = model.forward(&yp, &f.permute_joints(&perm), 300).unwrap();
        let expected = out.select(ndarray::Axis(0), &perm);
        for (a, b) in outp.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn joint_layout_round_trip() {
        let x = Array2::from_shape_fn((2 * 3, 4 * 5), |(r, c)| (r * 100 + c) as f64);
        let z = channel_to_joint(&x, 2, 3, 4, 5);
        // batch 1, joint 2, channel 1, k 3 comes from row 1*3+1, column 2*5+3.
        assert_eq!(z[[4 + 2, 5 + 3]], x[[3 + 1, 10 + 3]]);
        assert_eq!(joint_to_channel(&z, 2, 3, 4, 5), x);
    }

    #[test]
    fn shape_errors() {
        let cfg = tiny(ChannelTokens::Flattened);
        let model = DenoiserModel::<f64>::init(cfg.clone(), 1).unwrap();
        let f = random_features(&cfg, 2);
        assert!(matches!(
            model.forward(&random_pose(4, 1), &f, 1),
            Err(Error::Shape(_))
        ));
        let other = ConditioningFeatures::zeros(2, 3, 8);
        assert!(matches!(
            model.forward(&random_pose(3, 1), &other, 1),
            Err(Error::Shape(_))
        ));
        let bad = DenoiserConfig {
            heads: 5,
            ..cfg
        };
        assert!(matches!(
            DenoiserModel::<f64>::init(bad, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_input_reports_stage() {
        let cfg = tiny(ChannelTokens::Flattened);
        let model = DenoiserModel::<f64>::init(cfg.clone(), 1).unwrap();
        let f = random_features(&cfg, 2);
        let mut y = random_pose(3, 3);
        y[[0, 0]] = f64::NAN;
        match model.forward(&y, &f, 1) {
            Err(Error::Numerical { stage, .. }) => assert_eq!(stage, "input"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
