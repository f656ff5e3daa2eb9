//! Multi-head self-attention and pre-norm transformer blocks over a batch
//! of token sequences stored as `(batch * seq) x dim` matrices.

use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::layers::{gelu, gelu_backward, LayerNorm, LayerNormCache, Linear};
use super::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention<T> {
    /// Fused query/key/value projection, `dim -> 3 * dim`.
    pub qkv: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    input: Array2<T>,
    qkv: Array2<T>,
    /// Softmax weights per `(batch, head)`, each `seq x seq`.
    probs: Vec<Array2<T>>,
    context: Array2<T>,
}

fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl<T: Scalar> SelfAttention<T> {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            qkv: Linear::init(dim, 3 * dim, rng),
            out: Linear::init(dim, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<T>, seq: usize, heads: usize) -> (Array2<T>, AttentionCache<T>) {
        let (rows, dim) = x.dim();
        let batch = rows / seq;
        let dh = dim / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qkv = self.qkv.forward(x);
        let mut context = Array2::zeros((rows, dim));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let r = b * seq..(b + 1) * seq;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let q = qkv.slice(s![r.clone(), c.clone()]);
                let k = qkv.slice(s![r.clone(), dim + c.start..dim + c.end]);
                let v = qkv.slice(s![r.clone(), 2 * dim + c.start..2 * dim + c.end]);
                let mut p = q.dot(&k.t());
                p.mapv_inplace(|e| e * scale);
                softmax_rows(&mut p);
                context.slice_mut(s![r.clone(), c]).assign(&p.dot(&v));
                probs.push(p);
            }
        }
        let y = self.out.forward(&context);
        (
            y,
            AttentionCache {
                input: x.clone(),
                qkv,
                probs,
                context,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        dy: &Array2<T>,
        seq: usize,
        heads: usize,
        grad: &mut SelfAttention<T>,
    ) -> Array2<T> {
        let (rows, dim) = cache.input.dim();
        let batch = rows / seq;
        let dh = dim / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let d_context = self.out.backward(&cache.context, dy, &mut grad.out);
        let mut d_qkv = Array2::zeros((rows, 3 * dim));
        let qkv = &cache.qkv;
        for b in 0..batch {
            let r = b * seq..(b + 1) * seq;
            for h in 0..heads {
                let p = &cache.probs[b * heads + h];
                let c = h * dh..(h + 1) * dh;
                let kc = dim + c.start..dim + c.end;
                let vc = 2 * dim + c.start..2 * dim + c.end;
                let q = qkv.slice(s![r.clone(), c.clone()]);
                let k = qkv.slice(s![r.clone(), kc.clone()]);
                let v = qkv.slice(s![r.clone(), vc.clone()]);
                let dctx = d_context.slice(s![r.clone(), c.clone()]);

                let dp = dctx.dot(&v.t());
                let dv = p.t().dot(&dctx);
                // Softmax Jacobian: ds = p * (dp - rowsum(dp * p)).
                let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let mut ds = &dp - &row_dot;
                ds *= p;
                ds.mapv_inplace(|e| e * scale);
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);

                d_qkv.slice_mut(s![r.clone(), c]).assign(&dq);
                d_qkv.slice_mut(s![r.clone(), kc]).assign(&dk);
                d_qkv.slice_mut(s![r.clone(), vc]).assign(&dv);
            }
        }
        self.qkv.backward(&cache.input, &d_qkv, &mut grad.qkv)
    }
}

/// `h = x + attn(norm1(x)); y = h + ff_out(gelu(ff_in(norm2(h))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attn: SelfAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    norm1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    norm2: LayerNormCache<T>,
    ff_input: Array2<T>,
    ff_pre: Array2<T>,
    ff_act: Array2<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn init<R: Rng + ?Sized>(dim: usize, ff_mult: usize, rng: &mut R) -> Self {
        let norm1 = LayerNorm::new(dim);
        let attn = SelfAttention::init(dim, rng);
        let norm2 = LayerNorm::new(dim);
        let ff_in = Linear::init(dim, ff_mult * dim, rng);
        let ff_out = Linear::init(ff_mult * dim, dim, rng);
        Self {
            norm1,
            attn,
            norm2,
            ff_in,
            ff_out,
        }
    }

    pub fn forward(&self, x: &Array2<T>, seq: usize, heads: usize) -> (Array2<T>, BlockCache<T>) {
        let (a, norm1) = self.norm1.forward(x);
        let (att, attn) = self.attn.forward(&a, seq, heads);
        let h = x + &att;
        let (ff_input, norm2) = self.norm2.forward(&h);
        let ff_pre = self.ff_in.forward(&ff_input);
        let ff_act = gelu(&ff_pre);
        let y = &h + &self.ff_out.forward(&ff_act);
        (
            y,
            BlockCache {
                norm1,
                attn,
                norm2,
                ff_input,
                ff_pre,
                ff_act,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &BlockCache<T>,
        dy: &Array2<T>,
        seq: usize,
        heads: usize,
        grad: &mut TransformerBlock<T>,
    ) -> Array2<T> {
        let d_act = self.ff_out.backward(&cache.ff_act, dy, &mut grad.ff_out);
        let d_pre = gelu_backward(&cache.ff_pre, &d_act);
        let d_ff_input = self.ff_in.backward(&cache.ff_input, &d_pre, &mut grad.ff_in);
        let dh = dy + &self.norm2.backward(&cache.norm2, &d_ff_input, &mut grad.norm2);
        let d_a = self
            .attn
            .backward(&cache.attn, &dh, seq, heads, &mut grad.attn);
        &dh + &self.norm1.backward(&cache.norm1, &d_a, &mut grad.norm1)
    }

    pub fn cast<U: Scalar>(&self) -> TransformerBlock<U> {
        TransformerBlock {
            norm1: self.norm1.cast(),
            attn: SelfAttention {
                qkv: self.attn.qkv.cast(),
                out: self.attn.out.cast(),
            },
            norm2: self.norm2.cast(),
            ff_in: self.ff_in.cast(),
            ff_out: self.ff_out.cast(),
        }
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        self.norm1.push_tensors(&format!("{prefix}.norm1"), out);
        self.attn.qkv.push_tensors(&format!("{prefix}.attn.qkv"), out);
        self.attn.out.push_tensors(&format!("{prefix}.attn.out"), out);
        self.norm2.push_tensors(&format!("{prefix}.norm2"), out);
        self.ff_in.push_tensors(&format!("{prefix}.ff_in"), out);
        self.ff_out.push_tensors(&format!("{prefix}.ff_out"), out);
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        self.norm1.push_tensors_mut(out);
        self.attn.qkv.push_tensors_mut(out);
        self.attn.out.push_tensors_mut(out);
        self.norm2.push_tensors_mut(out);
        self.ff_in.push_tensors_mut(out);
        self.ff_out.push_tensors_mut(out);
    }
}
