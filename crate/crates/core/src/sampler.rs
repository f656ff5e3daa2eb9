//! Multi-hypothesis reverse diffusion.
//!
//! Hypothesis `h` of a frame starts from Gaussian noise drawn with seed
//! `derive_seed(frame_seed, h)`, so a set of `H` hypotheses is always a
//! prefix of the set for any larger `H`.

use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::{features_matrix, DenoiserModel, Scalar};
use crate::error::{Error, Result};
use crate::pose::{ConditioningFeatures, Pose3D, PoseSample};
use crate::rng::{derive_seed, normal, rng_from, stream};
use crate::schedule::{spacing, DiffusionSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerVariant {
    /// Deterministic DDIM update through the predicted clean pose.
    #[default]
    Ddim,
    /// `y_next = y - eps_hat`, with no schedule coefficients.
    Literal,
}

impl FromStr for SamplerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Self::Ddim),
            "literal" => Ok(Self::Literal),
            other => Err(Error::Config(format!("unknown sampler variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub hypotheses: usize,
    pub steps: usize,
    pub variant: SamplerVariant,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            hypotheses: 20,
            steps: 20,
            variant: SamplerVariant::Ddim,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule_steps: usize) -> Result<()> {
        if self.hypotheses == 0 {
            return Err(Error::Config("sampler: hypotheses must be at least 1".into()));
        }
        if self.steps == 0 || self.steps > schedule_steps {
            return Err(Error::Config(format!(
                "sampler: steps must lie in 1..={schedule_steps}, got {}",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Anything that predicts the noise in a stack of poses. `noisy` holds
/// `H` poses of `J` rows each, `(H * J) x 3`, in model units.
pub trait NoisePredictor {
    fn joints(&self) -> usize;
    fn predict_noise(
        &self,
        noisy: &Array2<f64>,
        features: &ConditioningFeatures,
        t: usize,
    ) -> Result<Array2<f64>>;
}

impl<T: Scalar> NoisePredictor for DenoiserModel<T> {
    fn joints(&self) -> usize {
        self.config().joints
    }

    fn predict_noise(
        &self,
        noisy: &Array2<f64>,
        features: &ConditioningFeatures,
        t: usize,
    ) -> Result<Array2<f64>> {
        let j = self.config().joints;
        if noisy.nrows() % j != 0 {
            return Err(Error::Shape(format!(
                "{} rows is not a multiple of {j} joints",
                noisy.nrows()
            )));
        }
        let h = noisy.nrows() / j;
        let x = noisy.mapv(T::of);
        let f = features_matrix::<T>(features);
        let (out, _) = self.forward_matrices(&x, std::slice::from_ref(&f), &vec![t; h])?;
        Ok(out.mapv(|v| v.f64()))
    }
}

/// Predicts the exact noise that maps a known clean pose to `y_t`.
pub struct OraclePredictor<'a> {
    pub clean: Array2<f64>,
    pub schedule: &'a DiffusionSchedule,
}

impl NoisePredictor for OraclePredictor<'_> {
    fn joints(&self) -> usize {
        self.clean.nrows()
    }

    fn predict_noise(
        &self,
        noisy: &Array2<f64>,
        _features: &ConditioningFeatures,
        t: usize,
    ) -> Result<Array2<f64>> {
        let ab = self.schedule.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let j = self.clean.nrows();
        let mut eps = noisy.clone();
        for (r, mut row) in eps.rows_mut().into_iter().enumerate() {
            let y0 = self.clean.row(r % j);
            for k in 0..3 {
                row[k] = (row[k] - sa * y0[k]) / sn;
            }
        }
        Ok(eps)
    }
}

/// One standard-normal `J x 3` draw per seed, stacked.
pub fn init_from_seeds(seeds: &[u64], joints: usize) -> Array2<f64> {
    let mut y = Array2::zeros((seeds.len() * joints, 3));
    for (h, &s) in seeds.iter().enumerate() {
        let mut rng = rng_from(s);
        for j in 0..joints {
            for k in 0..3 {
                y[[h * joints + j, k]] = normal(&mut rng);
            }
        }
    }
    y
}

pub fn hypothesis_seeds(count: usize, frame_seed: u64) -> Vec<u64> {
    (0..count as u64).map(|h| derive_seed(frame_seed, h)).collect()
}

/// `H` independent unit-Gaussian poses, `(H * J) x 3`.
pub fn init_hypotheses(count: usize, joints: usize, seed: u64) -> Array2<f64> {
    init_from_seeds(&hypothesis_seeds(count, seed), joints)
}

/// A single reverse update from `t_cur` to `t_next` for every stacked pose.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &DiffusionSchedule,
    y: &Array2<f64>,
    t_cur: usize,
    t_next: usize,
    features: &ConditioningFeatures,
    variant: SamplerVariant,
) -> Result<Array2<f64>> {
    let steps = schedule.steps();
    if t_cur < 1 || t_cur > steps {
        return Err(Error::TimestepOutOfRange {
            t: t_cur,
            lo: 1,
            hi: steps,
        });
    }
    if t_next >= t_cur {
        return Err(Error::TimestepOutOfRange {
            t: t_next,
            lo: 0,
            hi: t_cur - 1,
        });
    }
    let eps = model.predict_noise(y, features, t_cur)?;
    let next = match variant {
        SamplerVariant::Literal => y - &eps,
        SamplerVariant::Ddim => {
            let ab_cur = schedule.alpha_bar(t_cur);
            let ab_next = schedule.alpha_bar(t_next);
            let y0_hat = (y - &(&eps * (1.0 - ab_cur).sqrt())) / ab_cur.sqrt();
            y0_hat * ab_next.sqrt() + eps * (1.0 - ab_next).sqrt()
        }
    };
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            stage: "sampler",
            message: format!("non-finite pose after step {t_cur} -> {t_next}"),
        });
    }
    Ok(next)
}

/// Runs the `K`-step reverse chain from the given initial stack.
pub fn reverse_chain<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &DiffusionSchedule,
    init: Array2<f64>,
    features: &ConditioningFeatures,
    steps: usize,
    variant: SamplerVariant,
) -> Result<Array2<f64>> {
    let ts = spacing(schedule.steps(), steps)?;
    let mut y = init;
    for (k, &t_cur) in ts.iter().enumerate() {
        let t_next = ts.get(k + 1).copied().unwrap_or(0);
        y = ddim_step(model, schedule, &y, t_cur, t_next, features, variant)?;
    }
    Ok(y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    pub frame_id: String,
    pub action_tag: Option<String>,
    pub hypotheses: Vec<Pose3D>,
    pub config: SamplerConfig,
}

impl HypothesisSet {
    pub fn count(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn joints(&self) -> usize {
        self.hypotheses.first().map_or(0, |p| p.joint_count())
    }

    /// The first `count` hypotheses; equal to sampling with fewer hypotheses.
    pub fn prefix(&self, count: usize) -> Self {
        let count = count.min(self.hypotheses.len());
        Self {
            hypotheses: self.hypotheses[..count].to_vec(),
            config: SamplerConfig {
                hypotheses: count,
                ..self.config.clone()
            },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joints();
        if self.hypotheses.is_empty() {
            return Err(Error::Validation(format!("frame `{}` has no hypotheses", self.frame_id)));
        }
        if self.hypotheses.iter().any(|h| h.joint_count() != j || !h.is_finite()) {
            return Err(Error::Validation(format!(
                "frame `{}` has inconsistent or non-finite hypotheses",
                self.frame_id
            )));
        }
        Ok(())
    }
}

fn split_poses(y: &Array2<f64>, joints: usize, scale: f64) -> Vec<Pose3D> {
    y.rows()
        .into_iter()
        .map(|r| [r[0] * scale, r[1] * scale, r[2] * scale])
        .collect::<Vec<_>>()
        .chunks(joints)
        .map(|c| Pose3D::new(c.to_vec()))
        .collect()
}

/// Samples hypotheses for one conditioning tensor from explicit per-hypothesis
/// seeds. Poses are returned multiplied by `coord_scale`.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_seeds<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &DiffusionSchedule,
    features: &ConditioningFeatures,
    seeds: &[u64],
    steps: usize,
    variant: SamplerVariant,
    coord_scale: f64,
) -> Result<Vec<Pose3D>> {
    let j = model.joints();
    let y = reverse_chain(model, schedule, init_from_seeds(seeds, j), features, steps, variant)?;
    Ok(split_poses(&y, j, coord_scale))
}

/// Samples `config.hypotheses` poses for one frame seeded by `frame_seed`.
pub fn sample_hypotheses<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &DiffusionSchedule,
    features: &ConditioningFeatures,
    config: &SamplerConfig,
    frame_seed: u64,
    coord_scale: f64,
) -> Result<Vec<Pose3D>> {
    config.validate(schedule.steps())?;
    let seeds = hypothesis_seeds(config.hypotheses, frame_seed);
    sample_with_seeds(model, schedule, features, &seeds, config.steps, config.variant, coord_scale)
}

/// Seed of frame `index` under sampler seed `seed`.
pub fn frame_seed(seed: u64, index: usize) -> u64 {
    derive_seed(derive_seed(seed, stream::SAMPLING), index as u64)
}

/// Samples every frame of a dataset; poses are in the dataset's units.
pub fn sample_dataset<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &DiffusionSchedule,
    samples: &[PoseSample],
    config: &SamplerConfig,
    coord_scale: f64,
) -> Result<Vec<HypothesisSet>> {
    config.validate(schedule.steps())?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let hypotheses = sample_hypotheses(
                model,
                schedule,
                &s.features,
                config,
                frame_seed(config.seed, i),
                coord_scale,
            )?;
            Ok(HypothesisSet {
                frame_id: s.sample_id.clone(),
                action_tag: s.action_tag.clone(),
                hypotheses,
                config: config.clone(),
            })
        })
        .collect()
}
