//! Row-at-a-time evaluation of the causal position networks.
//!
//! Every block of a position network is causal, so row `k` of the output
//! depends only on input rows `<= k`. Caching projected keys and values
//! lets a window be filled autoregressively at the cost of one forward pass.

use super::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use super::transformer::{Decoder, Embedding, Encoder};
use super::{positional_encoding, Gru, PositionTransformer};
use crate::error::Result;
use crate::tensor::{ParamSet, Tensor, LEAKY_SLOPE};

const LN_EPS: f64 = 1e-5;

/// `x W (+ b)` for one row.
fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let n = w.shape()[1];
    let mut out = match b {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; n],
    };
    for (xi, wr) in x.iter().zip(w.data().chunks(n)) {
        for (o, wv) in out.iter_mut().zip(wr) {
            *o += xi * wv;
        }
    }
    out
}

fn linear(ps: &ParamSet, l: &Linear, x: &[f64]) -> Vec<f64> {
    affine(x, ps.get(l.w), Some(ps.get(l.b)))
}

fn layer_norm(ps: &ParamSet, ln: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let is = 1.0 / (var + LN_EPS).sqrt();
    let (g, b) = (ps.get(ln.gain).data(), ps.get(ln.bias).data());
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * is * g[j] + b[j])
        .collect()
}

fn feed_forward(ps: &ParamSet, f: &FeedForward, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = linear(ps, &f.inner, x)
        .into_iter()
        .map(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v })
        .collect();
    linear(ps, &f.outer, &h)
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Keys and values of the rows seen so far.
#[derive(Default)]
struct KvCache {
    k: Vec<f64>,
    v: Vec<f64>,
}

impl KvCache {
    /// Appends `kv_in`'s projections, then attends from `q_in` over all rows.
    fn step(
        &mut self,
        ps: &ParamSet,
        m: &MultiHeadAttention,
        q_in: &[f64],
        kv_in: &[f64],
    ) -> Vec<f64> {
        let d = m.d_model;
        self.k.extend(affine(kv_in, ps.get(m.wk), None));
        self.v.extend(affine(kv_in, ps.get(m.wv), None));
        let q = affine(q_in, ps.get(m.wq), None);
        let rows = self.k.len() / d;
        let dk = d / m.heads;
        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        let mut cat = vec![0.0; d];
        for h in 0..m.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let scores: Vec<f64> = (0..rows)
                .map(|r| {
                    q[lo..hi]
                        .iter()
                        .zip(&self.k[r * d + lo..r * d + hi])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * inv_sqrt
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = e.iter().sum();
            for (r, er) in e.iter().enumerate() {
                let a = er / sum;
                for (c, o) in cat[lo..hi].iter_mut().enumerate() {
                    *o += a * self.v[r * d + lo + c];
                }
            }
        }
        affine(&cat, ps.get(m.wo), None)
    }
}

fn embed(ps: &ParamSet, e: &Embedding, pe: Option<&Tensor>, k: usize, x: &[f64]) -> Vec<f64> {
    let y = linear(ps, &e.proj, x);
    match pe {
        Some(pe) if e.positional => add(&y, pe.row(k)),
        _ => y,
    }
}

pub(super) struct TransformerState<'a> {
    net: &'a PositionTransformer,
    ps: &'a ParamSet,
    pe: Option<Tensor>,
    enc: Vec<KvCache>,
    dec_self: Vec<KvCache>,
    dec_cross: Vec<KvCache>,
}

impl TransformerState<'_> {
    fn encoder_row(&mut self, enc: &Encoder, k: usize, x: &[f64]) -> Vec<f64> {
        let ps = self.ps;
        let mut h = embed(ps, &enc.embed, self.pe.as_ref(), k, x);
        for (layer, cache) in enc.layers.iter().zip(&mut self.enc) {
            let a = cache.step(ps, &layer.attn, &h, &h);
            h = layer_norm(ps, &layer.norm1, &add(&h, &a));
            let f = feed_forward(ps, &layer.ffn, &h);
            h = layer_norm(ps, &layer.norm2, &add(&h, &f));
        }
        h
    }

    fn decoder_row(&mut self, dec: &Decoder, k: usize, x: &[f64], memory: &[f64]) -> Vec<f64> {
        let ps = self.ps;
        let mut h = embed(ps, &dec.embed, self.pe.as_ref(), k, x);
        for ((layer, sc), cc) in dec
            .layers
            .iter()
            .zip(&mut self.dec_self)
            .zip(&mut self.dec_cross)
        {
            let a = sc.step(ps, &layer.self_attn, &h, &h);
            h = layer_norm(ps, &layer.norm1, &add(&h, &a));
            let c = cc.step(ps, &layer.cross_attn, &h, memory);
            h = layer_norm(ps, &layer.norm2, &add(&h, &c));
            let f = feed_forward(ps, &layer.ffn, &h);
            h = layer_norm(ps, &layer.norm3, &add(&h, &f));
        }
        h
    }

    fn step(&mut self, k: usize, features: &[f64], prior: &[f64]) -> Vec<f64> {
        let net = self.net;
        let mut x = features.to_vec();
        x.extend_from_slice(prior);
        let memory = self.encoder_row(&net.encoder, k, &x);
        let h = self.decoder_row(&net.decoder, k, prior, &memory);
        linear(self.ps, &net.head, &h)
    }
}

pub(super) struct GruState<'a> {
    net: &'a Gru,
    ps: &'a ParamSet,
    h: Vec<Vec<f64>>,
}

impl GruState<'_> {
    fn step(&mut self, features: &[f64], prior: &[f64]) -> Vec<f64> {
        let ps = self.ps;
        let mut x = features.to_vec();
        x.extend_from_slice(prior);
        for (layer, h) in self.net.layers.iter().zip(&mut self.h) {
            let n = layer.hidden;
            let xi = affine(&x, ps.get(layer.w_in), Some(ps.get(layer.b_in)));
            let hh = affine(h, ps.get(layer.w_hid), Some(ps.get(layer.b_hid)));
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            for j in 0..n {
                let r = sig(xi[j] + hh[j]);
                let z = sig(xi[n + j] + hh[n + j]);
                let s = xi[2 * n + j] + r * hh[2 * n + j];
                let cand = if s >= 0.0 { s } else { LEAKY_SLOPE * s };
                h[j] += z * (cand - h[j]);
            }
            x = h.clone();
        }
        linear(ps, &self.net.head, &x)
    }
}

/// Incremental evaluator for one window.
pub(super) enum Stepper<'a> {
    Transformer(TransformerState<'a>),
    Gru(GruState<'a>),
}

impl<'a> Stepper<'a> {
    pub(super) fn transformer(
        net: &'a PositionTransformer,
        ps: &'a ParamSet,
        t: usize,
    ) -> Result<Self> {
        let d = net.encoder.embed.d_model;
        let pe = if net.encoder.embed.positional || net.decoder.embed.positional {
            Some(positional_encoding(t, d)?)
        } else {
            None
        };
        let caches = |n: usize| (0..n).map(|_| KvCache::default()).collect();
        Ok(Stepper::Transformer(TransformerState {
            net,
            ps,
            pe,
            enc: caches(net.encoder.layers.len()),
            dec_self: caches(net.decoder.layers.len()),
            dec_cross: caches(net.decoder.layers.len()),
        }))
    }

    pub(super) fn gru(net: &'a Gru, ps: &'a ParamSet) -> Self {
        Stepper::Gru(GruState {
            net,
            ps,
            h: net.layers.iter().map(|l| vec![0.0; l.hidden]).collect(),
        })
    }

    /// Displacement for row `k` given its feature row and relative prior.
    pub(super) fn step(&mut self, k: usize, features: &[f64], prior: &[f64]) -> Vec<f64> {
        match self {
            Stepper::Transformer(s) => s.step(k, features, prior),
            Stepper::Gru(s) => s.step(features, prior),
        }
    }
}
