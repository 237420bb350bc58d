use rand::Rng;

use super::{AttentionMap, Ctx};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamId, ParamSet, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: ps.weight(format!("{name}.w"), fan_in, fan_out, rng),
            b: ps.zeros(format!("{name}.b"), fan_out),
        }
    }

    /// Weights and bias start at zero.
    pub fn zeroed(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: ps.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out])),
            b: ps.zeros(format!("{name}.b"), fan_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, b.get(self.w))?;
        g.add(y, b.get(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        Self {
            gain: ps.ones(format!("{name}.gain"), d),
            bias: ps.zeros(format!("{name}.bias"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, b.get(self.gain), b.get(self.bias), LN_EPS)
    }
}

/// Position-wise feed-forward block with a LeakyReLU hidden layer.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        d: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            inner: Linear::new(ps, &format!("{name}.inner"), d, d_ff, rng),
            outer: Linear::new(ps, &format!("{name}.outer"), d_ff, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, b, x)?;
        let h = g.leaky_relu(h);
        self.outer.forward(g, b, h)
    }
}

/// Multi-head scaled dot-product attention without projection biases.
///
/// Head `i` uses columns `i*dk..(i+1)*dk` of the `d × d` projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: ps.weight(format!("{name}.wq"), d_model, d_model, rng),
            wk: ps.weight(format!("{name}.wk"), d_model, d_model, rng),
            wv: ps.weight(format!("{name}.wv"), d_model, d_model, rng),
            wo: ps.weight(format!("{name}.wo"), d_model, d_model, rng),
            heads,
            d_model,
        })
    }

    /// Returns `T_q × d_model`; with `causal`, query `i` only sees keys `<= i`.
    /// Attention matrices are appended to `ctx.record` under `tag` when
    /// recording is enabled.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        causal: bool,
        ctx: &mut Ctx,
        tag: (&str, usize),
    ) -> Result<Var> {
        for v in [q_in, k_in, v_in] {
            if g.shape(v).len() != 2 || g.shape(v)[1] != self.d_model {
                return Err(Error::dim(format!(
                    "attention input {:?}, d_model {}",
                    g.shape(v),
                    self.d_model
                )));
            }
        }
        if g.shape(k_in)[0] != g.shape(v_in)[0] {
            return Err(Error::dim("keys and values differ in length"));
        }
        let dk = self.d_model / self.heads;
        let q = g.matmul(q_in, b.get(self.wq))?;
        let k = g.matmul(k_in, b.get(self.wk))?;
        let v = g.matmul(v_in, b.get(self.wv))?;
        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = g.slice(q, 1, lo, hi)?;
            let kh = g.slice(k, 1, lo, hi)?;
            let vh = g.slice(v, 1, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, inv_sqrt);
            let alpha = g.softmax(scores, causal)?;
            if let Some(rec) = ctx.record.as_deref_mut() {
                rec.push(AttentionMap {
                    stack: tag.0.to_string(),
                    layer: tag.1,
                    head: h,
                    alpha: g.value(alpha).clone(),
                });
            }
            outs.push(g.matmul(alpha, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)?
        };
        g.matmul(cat, b.get(self.wo))
    }
}
