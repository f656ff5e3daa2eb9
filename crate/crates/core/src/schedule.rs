//! Noise schedule, closed-form forward diffusion, posterior parameters and
//! reverse-loop timestep spacing.
//!
//! Timesteps run over `1..=T`; `t = 0` denotes clean data, with
//! `alpha_bar(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;
const TERMINAL_ALPHA_BAR_WARN: f64 = 1e-3;

/// Parameters from which a [`DiffusionSchedule`] is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::build(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-timestep arrays, stored at index `t - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_betas: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn build(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let betas = match kind {
            ScheduleKind::Linear => {
                if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
                    return Err(Error::Config(format!(
                        "linear schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
                    )));
                }
                if steps == 1 {
                    vec![beta_start]
                } else {
                    let span = beta_end - beta_start;
                    (0..steps)
                        .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                        * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).min(COSINE_MAX_BETA))
                    .collect()
            }
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(b.is_finite() && **b > 0.0 && **b < 1.0))
        {
            return Err(Error::Config(format!(
                "beta at t={} is {b}, must lie in (0, 1)",
                i + 1
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_betas = (0..betas.len())
            .map(|i| {
                if i == 0 {
                    betas[0]
                } else {
                    (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i]) * betas[i]
                }
            })
            .collect();
        let schedule = Self {
            betas,
            alphas,
            alpha_bars,
            posterior_betas,
        };
        let terminal = schedule.alpha_bar(schedule.steps());
        if terminal > TERMINAL_ALPHA_BAR_WARN {
            log::warn!(
                "terminal alpha_bar {terminal:.3e} exceeds {TERMINAL_ALPHA_BAR_WARN:e}; \
                 y_T is not close to a unit Gaussian"
            );
        }
        Ok(schedule)
    }

    /// Rebuilds a schedule from stored arrays, checking them for consistency.
    pub fn from_arrays(
        betas: Vec<f64>,
        alphas: Vec<f64>,
        alpha_bars: Vec<f64>,
        posterior_betas: Vec<f64>,
    ) -> Result<Self> {
        let n = betas.len();
        if n == 0 || alphas.len() != n || alpha_bars.len() != n || posterior_betas.len() != n {
            return Err(Error::Format("schedule arrays have inconsistent lengths".into()));
        }
        let arrays = [&betas, &alphas, &alpha_bars, &posterior_betas];
        if arrays.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::Format("schedule arrays hold non-finite values".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Format("stored betas leave (0, 1)".into()));
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Format("stored alpha_bars are not decreasing".into()));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_betas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_betas(&self) -> &[f64] {
        &self.posterior_betas
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative signal fraction; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_beta(&self, t: usize) -> f64 {
        self.posterior_betas[t - 1]
    }

    /// `y_t = sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps`.
    pub fn forward_sample(&self, y0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t, 1)?;
        if y0.len() != eps.len() {
            return Err(Error::Shape(format!(
                "signal has {} values, noise has {}",
                y0.len(),
                eps.len()
            )));
        }
        let ab = self.alpha_bar(t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(y0.iter().zip(eps).map(|(y, e)| s * y + n * e).collect())
    }

    /// One transition of the Markov chain: `sqrt(1 - beta_t) * y + sqrt(beta_t) * eps`.
    pub fn forward_step(&self, y_prev: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t, 1)?;
        if y_prev.len() != eps.len() {
            return Err(Error::Shape("signal and noise lengths differ".into()));
        }
        let b = self.beta(t);
        let (s, n) = ((1.0 - b).sqrt(), b.sqrt());
        Ok(y_prev.iter().zip(eps).map(|(y, e)| s * y + n * e).collect())
    }

    /// Coefficients `(c0, ct)` of the posterior mean `c0 * y0 + ct * y_t`.
    ///
    /// At `t = 1` they are `(1, 0)`: the posterior collapses onto `y0`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t, 1)?;
        if t == 1 {
            return Ok((1.0, 0.0));
        }
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c0, ct))
    }

    /// Mean and variance of `q(y_{t-1} | y_t, y0)`.
    pub fn posterior_params(&self, y_t: &[f64], y0: &[f64], t: usize) -> Result<(Vec<f64>, f64)> {
        let (c0, ct) = self.posterior_coefficients(t)?;
        if y_t.len() != y0.len() {
            return Err(Error::Shape("y_t and y0 lengths differ".into()));
        }
        let mean = y0.iter().zip(y_t).map(|(a, b)| c0 * a + ct * b).collect();
        Ok((mean, self.posterior_beta(t)))
    }
}

/// `K` strictly decreasing timesteps `round(T * (K - k) / K)`, `k = 0..K`.
pub fn spacing(steps: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > steps {
        return Err(Error::Config(format!(
            "need 1 <= K <= T, got K={k}, T={steps}"
        )));
    }
    let mut out: Vec<usize> = Vec::with_capacity(k);
    for i in 0..k {
        // Integer round-half-up of steps * (k - i) / k.
        let mut t = (2 * steps * (k - i) + k) / (2 * k);
        if let Some(&prev) = out.last() {
            if t >= prev {
                t = prev - 1;
            }
        }
        out.push(t.max(1));
    }
    Ok(out)
}
