use rand::Rng;

use super::layers::Linear;
use super::transformer::{Decoder, Encoder};
use super::{Ctx, ModelConfig};
use crate::error::Result;
use crate::tensor::{Bound, Graph, ParamSet, Var};

/// Encoder-decoder position network.
///
/// The encoder reads `[features | prior]`, the decoder reads the prior
/// stream, and every attention block is causally masked so that row `k`
/// only depends on inputs at rows `<= k`. The head emits a per-row
/// displacement from the prior.
#[derive(Clone, Debug)]
pub struct PositionTransformer {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: Linear,
}

impl PositionTransformer {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        features: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(ps, &format!("{name}.encoder"), features + 3, cfg, true, rng)?,
            decoder: Decoder::new(ps, &format!("{name}.decoder"), 3, cfg, true, rng)?,
            head: Linear::zeroed(ps, &format!("{name}.head"), cfg.d_model, 3),
        })
    }

    /// `features: T × F`, `prior: T × 3` to a `T × 3` displacement.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        features: Var,
        prior: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let x = g.concat(&[features, prior], 1)?;
        let memory = self.encoder.forward(g, b, x, ctx)?;
        let h = self.decoder.forward(g, b, prior, memory, ctx)?;
        self.head.forward(g, b, h)
    }
}

/// Closed-form parameter count of [`PositionTransformer`] with `F` input
/// features (excluding the prior):
///
/// `(F + 3)d + d + 3d + d + L_e (4d² + 4d + 2 d d_ff + d_ff + d)
///  + L_d (8d² + 6d + 2 d d_ff + d_ff + d) + 3d + 3`.
pub fn position_transformer_params(features: usize, cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let ff = cfg.ff_width();
    let ffn = 2 * d * ff + ff + d;
    let enc = 4 * d * d + 4 * d + ffn;
    let dec = 8 * d * d + 6 * d + ffn;
    (features + 3) * d
        + d
        + 3 * d
        + d
        + cfg.encoder_layers * enc
        + cfg.decoder_layers * dec
        + 3 * d
        + 3
}
