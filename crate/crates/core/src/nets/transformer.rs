use rand::Rng;

use super::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use super::{positional_encoding, Ctx, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamSet, Var};

fn dropout(g: &mut Graph, x: Var, p: f64, ctx: &mut Ctx) -> Result<Var> {
    if !ctx.training || p == 0.0 {
        return Ok(x);
    }
    let rng = ctx
        .rng
        .as_deref_mut()
        .ok_or_else(|| Error::Contract("training forward pass needs an rng".into()))?;
    g.dropout(x, p, true, rng)
}

/// Linear embedding followed by the sinusoidal positional encoding.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub proj: Linear,
    pub features: usize,
    pub d_model: usize,
    pub positional: bool,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        features: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Linear::new(ps, name, features, cfg.d_model, rng),
            features,
            d_model: cfg.d_model,
            positional: cfg.positional_encoding,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.features {
            return Err(Error::dim(format!(
                "input {shape:?}, expected T x {}",
                self.features
            )));
        }
        let e = self.proj.forward(g, b, x)?;
        if !self.positional {
            return Ok(e);
        }
        let pe = g.constant(positional_encoding(shape[0], self.d_model)?);
        g.add(e, pe)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

/// Embedding plus a stack of self-attention layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: Embedding,
    pub layers: Vec<EncoderLayer>,
    pub causal: bool,
    pub dropout: f64,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        features: usize,
        cfg: &ModelConfig,
        causal: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let embed = Embedding::new(ps, &format!("{name}.embed"), features, cfg, rng);
        let layers = (0..cfg.encoder_layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Ok(EncoderLayer {
                    attn: MultiHeadAttention::new(ps, &format!("{p}.attn"), d, cfg.heads, rng)?,
                    norm1: LayerNorm::new(ps, &format!("{p}.norm1"), d),
                    ffn: FeedForward::new(ps, &format!("{p}.ffn"), d, cfg.ff_width(), rng),
                    norm2: LayerNorm::new(ps, &format!("{p}.norm2"), d),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            layers,
            causal,
            dropout: cfg.dropout,
        })
    }

    /// `T × features` to a `T × d_model` memory.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let mut h = self.embed.forward(g, b, x)?;
        h = dropout(g, h, self.dropout, ctx)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let a = layer
                .attn
                .forward(g, b, h, h, h, self.causal, ctx, ("encoder", l))?;
            let a = dropout(g, a, self.dropout, ctx)?;
            let r = g.add(h, a)?;
            h = layer.norm1.forward(g, b, r)?;
            let f = layer.ffn.forward(g, b, h)?;
            let f = dropout(g, f, self.dropout, ctx)?;
            let r = g.add(h, f)?;
            h = layer.norm2.forward(g, b, r)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

/// Causally masked decoder stack cross-attending an encoder memory.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Embedding,
    pub layers: Vec<DecoderLayer>,
    /// Also mask cross-attention so query `i` sees memory rows `<= i`.
    pub causal_cross: bool,
    pub dropout: f64,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        features: usize,
        cfg: &ModelConfig,
        causal_cross: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let embed = Embedding::new(ps, &format!("{name}.embed"), features, cfg, rng);
        let layers = (0..cfg.decoder_layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Ok(DecoderLayer {
                    self_attn: MultiHeadAttention::new(
                        ps,
                        &format!("{p}.self_attn"),
                        d,
                        cfg.heads,
                        rng,
                    )?,
                    norm1: LayerNorm::new(ps, &format!("{p}.norm1"), d),
                    cross_attn: MultiHeadAttention::new(
                        ps,
                        &format!("{p}.cross_attn"),
                        d,
                        cfg.heads,
                        rng,
                    )?,
                    norm2: LayerNorm::new(ps, &format!("{p}.norm2"), d),
                    ffn: FeedForward::new(ps, &format!("{p}.ffn"), d, cfg.ff_width(), rng),
                    norm3: LayerNorm::new(ps, &format!("{p}.norm3"), d),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            layers,
            causal_cross,
            dropout: cfg.dropout,
        })
    }

    /// `T × features` target stream and `T × d_model` memory to `T × d_model`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        tgt: Var,
        memory: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let mut h = self.embed.forward(g, b, tgt)?;
        if g.shape(memory)[0] != g.shape(h)[0] && self.causal_cross {
            return Err(Error::dim(
                "causal cross-attention needs equal target and memory lengths",
            ));
        }
        h = dropout(g, h, self.dropout, ctx)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let a = layer
                .self_attn
                .forward(g, b, h, h, h, true, ctx, ("decoder_self", l))?;
            let a = dropout(g, a, self.dropout, ctx)?;
            let r = g.add(h, a)?;
            h = layer.norm1.forward(g, b, r)?;
            let c = layer.cross_attn.forward(
                g,
                b,
                h,
                memory,
                memory,
                self.causal_cross,
                ctx,
                ("decoder_cross", l),
            )?;
            let c = dropout(g, c, self.dropout, ctx)?;
            let r = g.add(h, c)?;
            h = layer.norm2.forward(g, b, r)?;
            let f = layer.ffn.forward(g, b, h)?;
            let f = dropout(g, f, self.dropout, ctx)?;
            let r = g.add(h, f)?;
            h = layer.norm3.forward(g, b, r)?;
        }
        Ok(h)
    }
}
