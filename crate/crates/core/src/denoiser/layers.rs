use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

use super::Scalar;

/// Affine map `y = x W + b` applied row-wise; `W` is `input x output`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform in `[-1/sqrt(input), 1/sqrt(input))`, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((input, output), || {
            T::of(rng.random_range(-bound..bound))
        });
        Self {
            weight,
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Linear<T>) -> Array2<T> {
        general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.mapv(|v| U::of(v.f64())),
            bias: self.bias.mapv(|v| U::of(v.f64())),
        }
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        out.push((format!("{prefix}.weight"), slice(&self.weight)));
        out.push((format!("{prefix}.bias"), self.bias.as_slice().expect("standard layout")));
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        out.push(self.weight.as_slice_mut().expect("standard layout"));
        out.push(self.bias.as_slice_mut().expect("standard layout"));
    }
}

fn slice<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization with learned gain and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let n = T::of(x.ncols() as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * s);
            *inv = s;
        }
        let mut y = &normalized * &self.gamma;
        y += &self.beta;
        (
            y,
            LayerNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache<T>,
        dy: &Array2<T>,
        grad: &mut LayerNorm<T>,
    ) -> Array2<T> {
        grad.gamma += &(dy * &cache.normalized).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let n = T::of(dy.ncols() as f64);
        let mut dx = dy * &self.gamma;
        Zip::from(dx.rows_mut())
            .and(cache.normalized.rows())
            .and(&cache.inv_std)
            .for_each(|mut g, xhat, &inv| {
                let mean_g = g.sum() / n;
                let mean_gx = g.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                Zip::from(&mut g)
                    .and(&xhat)
                    .for_each(|gv, &xv| *gv = inv * (*gv - mean_g - xv * mean_gx));
            });
        dx
    }

    pub fn cast<U: Scalar>(&self) -> LayerNorm<U> {
        LayerNorm {
            gamma: self.gamma.mapv(|v| U::of(v.f64())),
            beta: self.beta.mapv(|v| U::of(v.f64())),
        }
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        out.push((format!("{prefix}.gamma"), self.gamma.as_slice().expect("standard layout")));
        out.push((format!("{prefix}.beta"), self.beta.as_slice().expect("standard layout")));
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        out.push(self.gamma.as_slice_mut().expect("standard layout"));
        out.push(self.beta.as_slice_mut().expect("standard layout"));
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    x.mapv(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Scalar>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let (c, a, half, three) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5), T::of(3.0));
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|g, &v| {
        let th = (c * (v + a * v * v * v)).tanh();
        let d = half * (T::one() + th)
            + half * v * (T::one() - th * th) * c * (T::one() + three * a * v * v);
        *g *= d;
    });
    dx
}
