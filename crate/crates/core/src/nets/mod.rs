//! Learned architectures: positional encoding, multi-head attention,
//! encoder/decoder stacks, the RIOT and ARIOT transformers and the GRU
//! baseline.
//!
//! Position networks see the prior channel relative to the window's first
//! prior row and predict a per-row displacement that is added back onto
//! the absolute prior. A zero head therefore reproduces the priors.

mod ariot;
mod gru;
mod layers;
mod riot;
mod step;
mod transformer;

#[cfg(test)]
mod tests;

pub use ariot::{quaternion_head, AttitudeNet};
pub use gru::{Gru, GruLayer};
pub use layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use riot::{position_transformer_params, PositionTransformer};
pub use transformer::{Decoder, DecoderLayer, Embedding, Encoder, EncoderLayer};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, IMU_FEATURES};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Riot,
    Ariot,
    Gru,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Riot => "riot",
            ModelKind::Ariot => "ariot",
            ModelKind::Gru => "gru",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "riot" => Ok(ModelKind::Riot),
            "ariot" => Ok(ModelKind::Ariot),
            "gru" => Ok(ModelKind::Gru),
            _ => Err(Error::config(format!(
                "unknown model {s:?}; expected riot, ariot or gru"
            ))),
        }
    }
}

/// Shape of one transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Feed-forward width; `4 * d_model` when unset.
    pub d_ff: Option<usize>,
    pub dropout: f64,
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 224,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            d_ff: None,
            dropout: 0.2,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn attitude_default() -> Self {
        Self {
            d_model: 64,
            ..Self::default()
        }
    }

    pub fn ff_width(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.heads == 0
            || self.encoder_layers == 0
            || self.decoder_layers == 0
            || self.ff_width() == 0
        {
            return Err(Error::config("model extents must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config(format!(
                "d_model {} must be even for the positional encoding",
                self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Full network selection and geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub model: ModelKind,
    /// Window length `T`.
    pub window: usize,
    pub position: ModelConfig,
    pub attitude: ModelConfig,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    /// ARIOT position input `[imu | q | prior]` instead of `[accel | q | prior]`.
    pub ariot_full_imu: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Riot,
            window: 100,
            position: ModelConfig::default(),
            attitude: ModelConfig::attitude_default(),
            gru_hidden: 200,
            gru_layers: 2,
            ariot_full_imu: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::config(format!(
                "window {} must be at least 2",
                self.window
            )));
        }
        match self.model {
            ModelKind::Riot => self.position.validate(),
            ModelKind::Ariot => self
                .position
                .validate()
                .and_then(|_| self.attitude.validate()),
            ModelKind::Gru if self.gru_hidden == 0 || self.gru_layers == 0 => {
                Err(Error::config("GRU extents must be positive"))
            }
            ModelKind::Gru => Ok(()),
        }
    }

    /// Width of the position network input, prior included.
    pub fn input_features(&self) -> usize {
        match self.model {
            ModelKind::Riot | ModelKind::Gru => IMU_FEATURES + 3,
            ModelKind::Ariot if self.ariot_full_imu => IMU_FEATURES + 4 + 3,
            ModelKind::Ariot => 3 + 4 + 3,
        }
    }
}

/// Sinusoidal encoding: `sin(pos / 10000^(2i/d))` in even columns and the
/// matching cosine in odd columns.
pub fn positional_encoding(t: usize, d_model: usize) -> Result<Tensor> {
    if !d_model.is_multiple_of(2) || d_model == 0 {
        return Err(Error::config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    let mut data = vec![0.0; t * d_model];
    for pos in 0..t {
        for i in 0..d_model / 2 {
            let arg = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = arg.sin();
            data[pos * d_model + 2 * i + 1] = arg.cos();
        }
    }
    Tensor::new(&[t, d_model], data)
}

/// One recorded attention matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// `encoder`, `decoder_self` or `decoder_cross`.
    pub stack: String,
    pub layer: usize,
    pub head: usize,
    /// `T_q × T_k`, rows sum to one.
    pub alpha: Tensor,
}

/// Per-call forward options.
#[derive(Default)]
pub struct Ctx<'a> {
    /// Enables dropout.
    pub training: bool,
    pub rng: Option<&'a mut crate::Rng>,
    pub record: Option<&'a mut Vec<AttentionMap>>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(rng: &'a mut crate::Rng) -> Self {
        Self {
            training: true,
            rng: Some(rng),
            record: None,
        }
    }

    pub fn recording(record: &'a mut Vec<AttentionMap>) -> Self {
        Self {
            training: false,
            rng: None,
            record: Some(record),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Arch {
    Riot(PositionTransformer),
    Ariot(PositionTransformer),
    Gru(Gru),
}

/// Attitude subnet and its own parameters.
#[derive(Clone, Debug)]
pub struct AttitudeModel {
    pub net: AttitudeNet,
    pub params: ParamSet,
}

/// A position network with its parameters and input standardization.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetConfig,
    pub arch: Arch,
    pub params: ParamSet,
    pub attitude: Option<AttitudeModel>,
    pub normalizer: Normalizer,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(config: &NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut attitude = None;
        let arch = match config.model {
            ModelKind::Riot => Arch::Riot(PositionTransformer::new(
                &mut params,
                "riot",
                IMU_FEATURES,
                &config.position,
                rng,
            )?),
            ModelKind::Gru => Arch::Gru(Gru::new(
                &mut params,
                "gru",
                IMU_FEATURES + 3,
                config.gru_hidden,
                config.gru_layers,
                rng,
            )?),
            ModelKind::Ariot => {
                let mut ap = ParamSet::new();
                let net =
                    AttitudeNet::new(&mut ap, "attitude", IMU_FEATURES, &config.attitude, rng)?;
                attitude = Some(AttitudeModel { net, params: ap });
                let features = config.input_features() - 3;
                Arch::Ariot(PositionTransformer::new(
                    &mut params,
                    "position",
                    features,
                    &config.position,
                    rng,
                )?)
            }
        };
        Ok(Self {
            config: config.clone(),
            arch,
            params,
            attitude,
            normalizer: Normalizer::identity(IMU_FEATURES),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.model
    }

    pub fn window(&self) -> usize {
        self.config.window
    }

    /// Trainable scalars of the position network plus the attitude subnet.
    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars() + self.attitude.as_ref().map_or(0, |a| a.params.num_scalars())
    }

    /// Attitude estimates `T × 4` for raw IMU rows.
    pub fn attitude_forward(
        &self,
        g: &mut Graph,
        att: &Bound,
        imu: &Tensor,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let model = self.attitude.as_ref().ok_or_else(|| {
            Error::Contract(format!("{} has no attitude subnet", self.kind().name()))
        })?;
        let x = g.constant(self.normalizer.apply(imu)?);
        model.net.forward(g, att, x, ctx)
    }

    /// Absolute position estimates `T × 3` for raw IMU rows `T × 9` and
    /// absolute priors `T × 3` (row `k` is the position at `k - 1`).
    ///
    /// For ARIOT, `quat` substitutes given attitudes for the attitude
    /// subnet; otherwise the subnet runs with `att` or frozen weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        att: Option<&Bound>,
        imu: &Tensor,
        prior: &Tensor,
        quat: Option<&Tensor>,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let (t, c) = imu.dims2()?;
        if c != IMU_FEATURES || prior.shape() != [t, 3] {
            return Err(Error::dim(format!(
                "imu {:?} and prior {:?} do not form a window",
                imu.shape(),
                prior.shape()
            )));
        }
        let anchor = [prior.at(0, 0), prior.at(0, 1), prior.at(0, 2)];
        let rel: Vec<f64> = prior
            .data()
            .chunks(3)
            .flat_map(|r| (0..3).map(move |j| r[j] - anchor[j]))
            .collect();
        let rel = g.constant(Tensor::new(&[t, 3], rel)?);
        let imu_n = self.normalizer.apply(imu)?;
        let delta = match &self.arch {
            Arch::Riot(net) => {
                let x = g.constant(imu_n);
                net.forward(g, b, x, rel, ctx)?
            }
            Arch::Gru(net) => {
                let x = g.constant(imu_n);
                net.forward(g, b, x, rel)?
            }
            Arch::Ariot(net) => {
                let q = match quat {
                    Some(q) => g.constant(q.clone()),
                    None => {
                        let model = self.attitude.as_ref().ok_or_else(|| {
                            Error::Contract("ARIOT without attitude subnet".into())
                        })?;
                        let frozen;
                        let att = match att {
                            Some(a) => a,
                            None => {
                                frozen = model.params.bind(g, false);
                                &frozen
                            }
                        };
                        let x = g.constant(imu_n.clone());
                        let mut eval = Ctx {
                            training: false,
                            rng: None,
                            record: ctx.record.as_deref_mut(),
                        };
                        model.net.forward(g, att, x, &mut eval)?
                    }
                };
                let x = g.constant(imu_n);
                let motion = if self.config.ariot_full_imu {
                    x
                } else {
                    g.slice(x, 1, 3, 6)?
                };
                let feats = g.concat(&[motion, q], 1)?;
                net.forward(g, b, feats, rel, ctx)?
            }
        };
        let p = g.constant(prior.clone());
        g.add(p, delta)
    }

    /// Per-row position-network features (prior excluded) for raw IMU
    /// rows; ARIOT needs the window's attitudes.
    fn row_features(&self, imu: &Tensor, quat: Option<&Tensor>) -> Result<Tensor> {
        let imu_n = self.normalizer.apply(imu)?;
        if !matches!(self.arch, Arch::Ariot(_)) {
            return Ok(imu_n);
        }
        let q = quat.ok_or_else(|| Error::Contract("ARIOT rows need attitudes".into()))?;
        let t = imu_n.shape()[0];
        if q.shape() != [t, 4] {
            return Err(Error::dim(format!(
                "attitudes {:?} for {t} rows",
                q.shape()
            )));
        }
        let cols = if self.config.ariot_full_imu {
            0..IMU_FEATURES
        } else {
            3..6
        };
        let width = cols.len() + 4;
        let data = (0..t)
            .flat_map(|r| {
                imu_n.row(r)[cols.clone()]
                    .iter()
                    .chain(q.row(r))
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(&[t, width], data)
    }

    /// Evaluation-mode estimates for a window whose prior rows `>= n_known`
    /// are unknown. Each unknown prior row is the estimate of the row
    /// before it. Equals [`Network::predict`] on the completed priors.
    pub fn fill_window(
        &self,
        imu: &Tensor,
        prior: &Tensor,
        quat: Option<&Tensor>,
        n_known: usize,
    ) -> Result<Tensor> {
        let (t, c) = imu.dims2()?;
        if c != IMU_FEATURES || prior.shape() != [t, 3] {
            return Err(Error::dim(format!(
                "imu {:?} and prior {:?} do not form a window",
                imu.shape(),
                prior.shape()
            )));
        }
        if n_known == 0 || n_known > t {
            return Err(Error::Contract(format!(
                "{n_known} known prior rows in a window of {t}"
            )));
        }
        let feats = self.row_features(imu, quat)?;
        let mut stepper = match &self.arch {
            Arch::Riot(net) | Arch::Ariot(net) => step::Stepper::transformer(net, &self.params, t)?,
            Arch::Gru(net) => step::Stepper::gru(net, &self.params),
        };
        let anchor = [prior.at(0, 0), prior.at(0, 1), prior.at(0, 2)];
        let mut out = vec![0.0; t * 3];
        for k in 0..t {
            let p: [f64; 3] = if k < n_known {
                [prior.at(k, 0), prior.at(k, 1), prior.at(k, 2)]
            } else {
                [out[3 * k - 3], out[3 * k - 2], out[3 * k - 1]]
            };
            let rel = [p[0] - anchor[0], p[1] - anchor[1], p[2] - anchor[2]];
            let delta = stepper.step(k, feats.row(k), &rel);
            for j in 0..3 {
                out[3 * k + j] = p[j] + delta[j];
            }
        }
        Tensor::new(&[t, 3], out)
    }

    /// Evaluation-mode forward returning plain values.
    pub fn predict(&self, imu: &Tensor, prior: &Tensor, quat: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &b, None, imu, prior, quat, &mut Ctx::eval())?;
        Ok(g.value(out).clone())
    }

    /// Evaluation-mode attitude estimates.
    pub fn predict_attitude(&self, imu: &Tensor) -> Result<Tensor> {
        let model = self.attitude.as_ref().ok_or_else(|| {
            Error::Contract(format!("{} has no attitude subnet", self.kind().name()))
        })?;
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, false);
        let out = self.attitude_forward(&mut g, &b, imu, &mut Ctx::eval())?;
        Ok(g.value(out).clone())
    }

    /// Attention matrices of one evaluation-mode forward pass.
    pub fn attention(&self, imu: &Tensor, prior: &Tensor) -> Result<Vec<AttentionMap>> {
        let mut record = Vec::new();
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        self.forward(
            &mut g,
            &b,
            None,
            imu,
            prior,
            None,
            &mut Ctx::recording(&mut record),
        )?;
        Ok(record)
    }
}
