use rand::Rng;

use super::layers::Linear;
use super::transformer::{Decoder, Encoder};
use super::{Ctx, ModelConfig};
use crate::error::Result;
use crate::tensor::{Bound, Graph, ParamSet, Tensor, Var};

const NORM_EPS: f64 = 1e-12;

/// Attitude subnet: IMU window to unit quaternions with `w >= 0`.
///
/// The encoder attends over the whole window; the decoder reads the
/// embedded IMU stream under the causal mask.
#[derive(Clone, Debug)]
pub struct AttitudeNet {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: Linear,
}

impl AttitudeNet {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        features: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(ps, &format!("{name}.encoder"), features, cfg, false, rng)?,
            decoder: Decoder::new(ps, &format!("{name}.decoder"), features, cfg, false, rng)?,
            head: Linear::new(ps, &format!("{name}.head"), cfg.d_model, 4, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, imu: Var, ctx: &mut Ctx) -> Result<Var> {
        let memory = self.encoder.forward(g, b, imu, ctx)?;
        let h = self.decoder.forward(g, b, imu, memory, ctx)?;
        let y = self.head.forward(g, b, h)?;
        let y = g.tanh(y);
        quaternion_head(g, y)
    }
}

/// Row-normalizes `T × 4` and flips rows with a negative scalar part.
pub fn quaternion_head(g: &mut Graph, y: Var) -> Result<Var> {
    let sq = g.mul(y, y)?;
    let n2 = g.sum_last(sq)?;
    let n2 = g.add_scalar(n2, NORM_EPS);
    let n = g.sqrt(n2);
    let q = g.div(y, n)?;
    let rows = g.shape(q)[0];
    let signs: Vec<f64> = (0..rows)
        .map(|r| if g.value(q).at(r, 0) < 0.0 { -1.0 } else { 1.0 })
        .collect();
    let s = g.constant(Tensor::new(&[rows, 1], signs)?);
    g.mul(q, s)
}
