//! Adam over a flat list of parameter slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one `f32` buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn check(&self, params: &[&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape(format!("tensor {i} size mismatch")));
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update with step size `lr`.
    pub fn update(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], lr: f64) -> Result<()> {
        self.check(params, grads)?;
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = eps as f32;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f32]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_quadratic_bowl() {
        let mut w = vec![1.5f32, -2.0, 0.7, 3.0];
        let mut state = AdamState::new(AdamConfig::default(), &[4]);
        let mut steps = 0;
        for _ in 0..2000 {
            let g: Vec<f32> = w.iter().map(|x| 2.0 * x).collect();
            state.update(&mut [&mut w[..]], &[&g[..]], 1e-2).unwrap();
            steps += 1;
            let norm = w.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm < 1e-3 {
                break;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!(norm < 1e-3, "norm {norm} after {steps} steps");
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = vec![1.0f32, -1.0];
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        state.update(&mut [&mut w[..]], &[&[0.5, -3.0][..]], 0.1).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut w = vec![0.25f32, 4.0];
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        state.update(&mut [&mut w[..]], &[&[1.0, 1.0][..]], 0.0).unwrap();
        assert_eq!(w, vec![0.25, 4.0]);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let mut w = vec![0.0f32; 3];
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        assert!(state.update(&mut [&mut w[..]], &[&[0.0; 3][..]], 0.1).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut a = vec![3.0f32];
        let mut b = vec![4.0f32];
        let norm = clip_global_norm(&mut [&mut a[..], &mut b[..]], 1.0);
        assert_eq!(norm, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-6 && (b[0] - 0.8).abs() < 1e-6);
    }
}
