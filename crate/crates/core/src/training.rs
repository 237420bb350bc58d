//! Training: the teacher-forced first cycle, the recursive-prior second
//! cycle, attitude-subnet training and checkpoints.
//!
//! Every epoch draws its own generator from `(seed, stage, epoch)`, so a
//! resumed run replays exactly the epochs an uninterrupted run would.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, Window};
use crate::error::{Error, Result};
use crate::geometry::{quaternion_loss_graph, QUAT_LOSS_EPS};
use crate::inference::{recursive_infer, Stitch};
use crate::nets::{Ctx, NetConfig, Network};
use crate::sensors::ImuSequence;
use crate::tensor::{
    read_tensor_file, write_tensor_file, Adam, AdamConfig, Graph, ParamSet, Tensor, TensorFile, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Cycle-2 learning rate; `lr` when unset.
    pub cycle2_lr: Option<f64>,
    pub batch_size: usize,
    pub attitude_epochs: usize,
    pub cycle1_epochs: usize,
    pub cycle2_epochs: usize,
    pub seed: u64,
    /// Stop a stage after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Recompute recursive priors every this many cycle-2 epochs.
    pub prior_refresh_every: usize,
    /// Global gradient-norm clip; off when unset.
    pub max_grad_norm: Option<f64>,
    /// Finish each stage on its best-validation parameters.
    pub keep_best: bool,
    /// Standardize IMU channels with training-split statistics.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            cycle2_lr: None,
            batch_size: 64,
            attitude_epochs: 300,
            cycle1_epochs: 120,
            cycle2_epochs: 30,
            seed: 0,
            patience: None,
            prior_refresh_every: 1,
            max_grad_norm: None,
            keep_best: true,
            normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for lr in [Some(self.lr), self.cycle2_lr].into_iter().flatten() {
            if !(lr > 0.0) {
                return Err(Error::config(format!(
                    "learning rate {lr} must be positive"
                )));
            }
        }
        if self.batch_size == 0 || self.prior_refresh_every == 0 {
            return Err(Error::config(
                "batch_size and prior_refresh_every must be at least 1",
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Attitude,
    Cycle1,
    Cycle2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Attitude => "attitude",
            Stage::Cycle1 => "cycle1",
            Stage::Cycle2 => "cycle2",
        }
    }
}

/// One epoch of history; epoch 0 is the evaluation before training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Best {
    stage: Stage,
    epoch: usize,
    val_loss: f64,
}

/// Windows and whole sequences for one training run.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    /// Sources of the windows above, used for recursive priors.
    pub sequences: Vec<ImuSequence>,
    /// Inference stride used when rolling priors forward.
    pub stride: usize,
}

/// Model, optimizer state and history.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: Option<Adam>,
    pub attitude_optimizer: Option<Adam>,
    pub history: Vec<EpochRecord>,
    pub fingerprint: String,
    best: Option<(Best, ParamSet)>,
    /// Parameters after the last trained epoch when the best ones were
    /// restored over them; a resumed stage continues from these.
    latest: Option<(Stage, ParamSet)>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    net: NetConfig,
    fingerprint: String,
    history: Vec<EpochRecord>,
    best: Option<Best>,
    latest: Option<Stage>,
    optimizer: Option<(AdamConfig, u64)>,
    attitude_optimizer: Option<(AdamConfig, u64)>,
    normalizer: Normalizer,
}

const META_KIND: &str = "riot-checkpoint";

impl Checkpoint {
    pub fn new(network: Network, fingerprint: impl Into<String>) -> Self {
        Self {
            network,
            optimizer: None,
            attitude_optimizer: None,
            history: Vec::new(),
            fingerprint: fingerprint.into(),
            best: None,
            latest: None,
        }
    }

    /// Completed epochs of `stage`.
    pub fn epochs_done(&self, stage: Stage) -> usize {
        self.history
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| r.epoch)
            .max()
            .unwrap_or(0)
    }

    pub fn stage_history(&self, stage: Stage) -> Vec<&EpochRecord> {
        self.history.iter().filter(|r| r.stage == stage).collect()
    }

    /// Stage, epoch and score of the retained best parameters.
    pub fn best_epoch(&self) -> Option<(Stage, usize, f64)> {
        self.best
            .as_ref()
            .map(|(b, _)| (b.stage, b.epoch, b.val_loss))
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut entries = Vec::new();
        let mut push_set = |prefix: &str, ps: &ParamSet| {
            for (n, t) in ps.iter() {
                entries.push((format!("{prefix}{n}"), t.clone()));
            }
        };
        push_set("pos.", &self.network.params);
        if let Some(a) = &self.network.attitude {
            push_set("att.", &a.params);
        }
        if let Some((_, ps)) = &self.best {
            push_set("best.", ps);
        }
        if let Some((_, ps)) = &self.latest {
            push_set("last.", ps);
        }
        for (prefix, opt) in [
            ("adam", &self.optimizer),
            ("att_adam", &self.attitude_optimizer),
        ] {
            if let Some(opt) = opt {
                let (m, v) = opt.moments();
                for (i, (mi, vi)) in m.iter().zip(v).enumerate() {
                    entries.push((format!("{prefix}.m.{i}"), mi.clone()));
                    entries.push((format!("{prefix}.v.{i}"), vi.clone()));
                }
            }
        }
        let meta = Meta {
            kind: META_KIND.into(),
            net: self.network.config.clone(),
            fingerprint: self.fingerprint.clone(),
            history: self.history.clone(),
            best: self.best.as_ref().map(|(b, _)| b.clone()),
            latest: self.latest.as_ref().map(|(s, _)| *s),
            optimizer: self.optimizer.as_ref().map(|o| (o.config, o.step_count())),
            attitude_optimizer: self
                .attitude_optimizer
                .as_ref()
                .map(|o| (o.config, o.step_count())),
            normalizer: self.network.normalizer.clone(),
        };
        let meta = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        Ok(TensorFile { meta, entries })
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&file.meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta.kind != META_KIND {
            return Err(Error::Format(format!("not a checkpoint: {:?}", meta.kind)));
        }
        // Parameter values are overwritten below; initialization is irrelevant.
        let mut network = Network::new(&meta.net, &mut crate::seeded_rng(0))?;
        network.normalizer = meta.normalizer;
        network.params.load_from(file.iter(), "pos.")?;
        if let Some(a) = network.attitude.as_mut() {
            a.params.load_from(file.iter(), "att.")?;
        }
        let stored = |b: Stage, prefix: &str| -> Result<ParamSet> {
            let mut ps = match b {
                Stage::Attitude => network
                    .attitude
                    .as_ref()
                    .map(|a| a.params.clone())
                    .ok_or_else(|| {
                        Error::Format("attitude state without attitude subnet".into())
                    })?,
                _ => network.params.clone(),
            };
            ps.load_from(file.iter(), prefix)?;
            Ok(ps)
        };
        let best = meta
            .best
            .map(|b| stored(b.stage, "best.").map(|ps| (b, ps)))
            .transpose()?;
        let latest = meta
            .latest
            .map(|s| stored(s, "last.").map(|ps| (s, ps)))
            .transpose()?;
        let load_adam =
            |prefix: &str, state: Option<(AdamConfig, u64)>, n: usize| -> Result<Option<Adam>> {
                let Some((config, step)) = state else {
                    return Ok(None);
                };
                let get = |k: &str, i: usize| {
                    file.get(&format!("{prefix}.{k}.{i}"))
                        .cloned()
                        .ok_or_else(|| Error::Format(format!("missing {prefix}.{k}.{i}")))
                };
                let m = (0..n).map(|i| get("m", i)).collect::<Result<_>>()?;
                let v = (0..n).map(|i| get("v", i)).collect::<Result<_>>()?;
                Ok(Some(Adam::from_state(config, step, m, v)))
            };
        let optimizer = load_adam("adam", meta.optimizer, network.params.len())?;
        let attitude_optimizer = load_adam(
            "att_adam",
            meta.attitude_optimizer,
            network.attitude.as_ref().map_or(0, |a| a.params.len()),
        )?;
        Ok(Self {
            network,
            optimizer,
            attitude_optimizer,
            history: meta.history,
            fingerprint: meta.fingerprint,
            best,
            latest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensor_file(path, &self.to_tensor_file()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&read_tensor_file(path)?)
    }
}

/// Builds a network and fits the input standardization on `train`.
pub fn init_network(
    net: &NetConfig,
    train: &[Window],
    normalize: bool,
    seed: u64,
) -> Result<Network> {
    let mut network = Network::new(net, &mut crate::seeded_rng(seed))?;
    if normalize && !train.is_empty() {
        network.normalizer = Normalizer::fit(train)?;
    }
    Ok(network)
}

/// `(1/M) Σ ||pred - truth||²` over the `M` rows of `[.., 3]` tensors.
pub fn mse_loss(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(truth) || g.shape(pred).last() != Some(&3) {
        return Err(Error::dim(format!(
            "mse of {:?} and {:?}",
            g.shape(pred),
            g.shape(truth)
        )));
    }
    let rows = g.value(pred).numel() / 3;
    let d = g.sub(pred, truth)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / rows as f64))
}

fn epoch_rng(seed: u64, stage: Stage, epoch: usize) -> crate::Rng {
    let mut z =
        seed ^ ((stage as u64 + 1) << 56) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    crate::seeded_rng(z ^ (z >> 31))
}

fn clip(grads: &mut [Tensor], max_norm: Option<f64>) {
    let Some(max) = max_norm else { return };
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= max / norm;
            }
        }
    }
}

/// Which parameters a stage trains.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Target {
    Position,
    Attitude,
}

/// Loss of one window, scaled by `1/n`, recorded on `g`.
fn window_loss(
    net: &Network,
    target: Target,
    g: &mut Graph,
    bound: &crate::tensor::Bound,
    w: &Window,
    n: usize,
    ctx: &mut Ctx,
) -> Result<Var> {
    let loss = match target {
        Target::Position => {
            let out = net.forward(g, bound, None, &w.imu, &w.prior_pos, None, ctx)?;
            let truth = g.constant(w.target_pos.clone());
            mse_loss(g, out, truth)?
        }
        Target::Attitude => {
            let q = net.attitude_forward(g, bound, &w.imu, ctx)?;
            let truth = g.constant(w.target_quat.clone());
            quaternion_loss_graph(g, q, truth, QUAT_LOSS_EPS)?
        }
    };
    Ok(g.scale(loss, 1.0 / n as f64))
}

fn params_of(net: &Network, target: Target) -> Result<&ParamSet> {
    match target {
        Target::Position => Ok(&net.params),
        Target::Attitude => net
            .attitude
            .as_ref()
            .map(|a| &a.params)
            .ok_or_else(|| Error::Contract("model has no attitude subnet".into())),
    }
}

fn params_of_mut(net: &mut Network, target: Target) -> &mut ParamSet {
    match target {
        Target::Position => &mut net.params,
        Target::Attitude => &mut net.attitude.as_mut().expect("checked by params_of").params,
    }
}

/// Mean loss over `windows` with dropout disabled.
fn evaluate(net: &Network, target: Target, windows: &[Window]) -> Result<Option<f64>> {
    if windows.is_empty() {
        return Ok(None);
    }
    let ps = params_of(net, target)?;
    let mut total = 0.0;
    for w in windows {
        let mut g = Graph::new();
        let b = ps.bind(&mut g, false);
        let l = window_loss(net, target, &mut g, &b, w, windows.len(), &mut Ctx::eval())?;
        total += g.value(l).item();
    }
    Ok(Some(total))
}

/// Mean position loss over `windows` in evaluation mode.
pub fn evaluate_position_loss(net: &Network, windows: &[Window]) -> Result<f64> {
    evaluate(net, Target::Position, windows)?.ok_or(Error::EmptyBatch)
}

/// Mean quaternion loss over `windows` in evaluation mode.
pub fn evaluate_attitude_loss(net: &Network, windows: &[Window]) -> Result<f64> {
    evaluate(net, Target::Attitude, windows)?.ok_or(Error::EmptyBatch)
}

/// One pass over `train`; returns the sample-weighted mean batch loss.
fn run_epoch(
    ckpt: &mut Checkpoint,
    target: Target,
    train: &[Window],
    cfg: &TrainConfig,
    rng: &mut crate::Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let ps = params_of(&ckpt.network, target)?;
        let mut grads: Vec<Tensor> = ps
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut batch_loss = 0.0;
        for &i in batch {
            let mut wrng = crate::seeded_rng(rng.random());
            let mut g = Graph::new();
            let b = ps.bind(&mut g, true);
            let l = window_loss(
                &ckpt.network,
                target,
                &mut g,
                &b,
                &train[i],
                batch.len(),
                &mut Ctx::train(&mut wrng),
            )?;
            batch_loss += g.value(l).item();
            g.backward(l)?;
            for (acc, gi) in grads.iter_mut().zip(ps.grads(&g, &b)) {
                for (a, v) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += v;
                }
            }
        }
        if !batch_loss.is_finite() {
            return Err(Error::TrainingDiverged(format!("loss became {batch_loss}")));
        }
        clip(&mut grads, cfg.max_grad_norm);
        let opt = match target {
            Target::Position => &mut ckpt.optimizer,
            Target::Attitude => &mut ckpt.attitude_optimizer,
        };
        let params = params_of_mut(&mut ckpt.network, target);
        let opt = match opt {
            Some(o) => {
                o.config.lr = cfg.lr;
                o
            }
            None => opt.insert(Adam::new(cfg.adam(), params.tensors())?),
        };
        opt.step(params.tensors_mut(), &grads)?;
        total += batch_loss * batch.len() as f64;
    }
    Ok(total / train.len() as f64)
}

/// Train and validation windows for the network's current parameters.
trait WindowSource {
    /// Called before the first epoch and after each epoch.
    fn refresh(&mut self, net: &Network, epochs_run: usize) -> Result<()>;
    fn train(&self) -> &[Window];
    fn val(&self) -> &[Window];
}

struct Fixed<'a>(&'a TrainData);

impl WindowSource for Fixed<'_> {
    fn refresh(&mut self, _: &Network, _: usize) -> Result<()> {
        Ok(())
    }
    fn train(&self) -> &[Window] {
        &self.0.train
    }
    fn val(&self) -> &[Window] {
        &self.0.val
    }
}

struct Recursive<'a> {
    data: &'a TrainData,
    every: usize,
    train: Vec<Window>,
    val: Vec<Window>,
}

impl WindowSource for Recursive<'_> {
    fn refresh(&mut self, net: &Network, epochs_run: usize) -> Result<()> {
        if self.train.is_empty() || epochs_run.is_multiple_of(self.every) {
            (self.train, self.val) = recursive_windows(net, self.data)?;
        }
        Ok(())
    }
    fn train(&self) -> &[Window] {
        &self.train
    }
    fn val(&self) -> &[Window] {
        &self.val
    }
}

/// Rebuilds train and val windows with priors from recursive inference of
/// the current model. Only each sequence's initial position is taken from
/// the truth. Train targets are shifted row by row by the prior's drift, so
/// the training loss scores the displacement made at each row. Val targets
/// stay absolute, so the val loss is the recursive-evaluation loss.
/// Input windows must carry true priors.
pub fn recursive_windows(net: &Network, data: &TrainData) -> Result<(Vec<Window>, Vec<Window>)> {
    let mut by_id: HashMap<&str, &ImuSequence> = HashMap::new();
    for s in &data.sequences {
        if by_id.insert(s.meta.id.as_str(), s).is_some() {
            return Err(Error::data(format!(
                "duplicate sequence id {:?}",
                s.meta.id
            )));
        }
    }
    let mut needed: BTreeMap<&str, ()> = BTreeMap::new();
    for w in data.train.iter().chain(&data.val) {
        needed.insert(w.seq_id.as_str(), ());
    }
    let mut estimates: HashMap<&str, (Vec<crate::Vec3>, crate::Vec3)> = HashMap::new();
    for id in needed.keys() {
        let seq = by_id
            .get(id)
            .ok_or_else(|| Error::data(format!("window from unknown sequence {id:?}")))?;
        let p0 = seq
            .samples
            .first()
            .ok_or_else(|| Error::data("empty sequence"))?
            .truth
            .p;
        let est = recursive_infer(net, seq, p0, data.stride, Stitch::LastWins)?;
        estimates.insert(id, (est.trajectory.est_pos, p0));
    }
    let rebuild = |ws: &[Window], shift: bool| -> Result<Vec<Window>> {
        ws.iter()
            .map(|w| {
                let (est, p0) = &estimates[w.seq_id.as_str()];
                let mut out = w.with_priors(est, *p0)?;
                if shift {
                    let drift: Vec<f64> = out
                        .prior_pos
                        .data()
                        .iter()
                        .zip(w.prior_pos.data())
                        .map(|(e, t)| e - t)
                        .collect();
                    for (v, d) in out.target_pos.data_mut().iter_mut().zip(drift) {
                        *v += d;
                    }
                }
                Ok(out)
            })
            .collect()
    };
    Ok((rebuild(&data.train, true)?, rebuild(&data.val, false)?))
}

fn run_stage(
    ckpt: &mut Checkpoint,
    stage: Stage,
    target: Target,
    epochs: usize,
    source: &mut dyn WindowSource,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    let done = ckpt.epochs_done(stage);
    if done >= epochs {
        return Ok(());
    }
    if let Some((s, ps)) = ckpt.latest.take() {
        if s == stage {
            *params_of_mut(&mut ckpt.network, target) = ps;
        }
    }
    source.refresh(&ckpt.network, done)?;
    if source.train().is_empty() {
        return Err(Error::EmptyBatch);
    }
    if done == 0 && !ckpt.history.iter().any(|r| r.stage == stage) {
        let train_loss = evaluate(&ckpt.network, target, source.train())?.unwrap_or(f64::NAN);
        let val_loss = evaluate(&ckpt.network, target, source.val())?;
        ckpt.history.push(EpochRecord {
            stage,
            epoch: 0,
            train_loss,
            val_loss,
        });
        let score = val_loss.unwrap_or(train_loss);
        ckpt.best = Some((
            Best {
                stage,
                epoch: 0,
                val_loss: score,
            },
            params_of(&ckpt.network, target)?.clone(),
        ));
    }
    let mut since_best = 0;
    for epoch in done + 1..=epochs {
        let snapshot = (
            params_of(&ckpt.network, target)?.clone(),
            ckpt.optimizer.clone(),
            ckpt.attitude_optimizer.clone(),
        );
        let mut rng = epoch_rng(cfg.seed, stage, epoch);
        let train_loss = match run_epoch(ckpt, target, source.train(), cfg, &mut rng) {
            Ok(l) => l,
            Err(e @ Error::TrainingDiverged(_)) => {
                *params_of_mut(&mut ckpt.network, target) = snapshot.0;
                ckpt.optimizer = snapshot.1;
                ckpt.attitude_optimizer = snapshot.2;
                log::error!(
                    "{} epoch {epoch} diverged; restored the epoch-start state",
                    stage.name()
                );
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        source.refresh(&ckpt.network, epoch)?;
        let val_loss = evaluate(&ckpt.network, target, source.val())?;
        log::info!(
            "{} epoch {epoch}: train {train_loss:.6e} val {val_loss:?}",
            stage.name()
        );
        ckpt.history.push(EpochRecord {
            stage,
            epoch,
            train_loss,
            val_loss,
        });
        let score = val_loss.unwrap_or(train_loss);
        let improved = match &ckpt.best {
            Some((b, _)) if b.stage == stage => score < b.val_loss,
            _ => true,
        };
        if improved {
            ckpt.best = Some((
                Best {
                    stage,
                    epoch,
                    val_loss: score,
                },
                params_of(&ckpt.network, target)?.clone(),
            ));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                log::info!("{} stopped early at epoch {epoch}", stage.name());
                break;
            }
        }
    }
    if let Some((b, ps)) = ckpt.best.as_ref().filter(|_| cfg.keep_best) {
        if b.stage == stage {
            let current = std::mem::replace(params_of_mut(&mut ckpt.network, target), ps.clone());
            if current.tensors() != ps.tensors() {
                ckpt.latest = Some((stage, current));
            }
        }
    }
    Ok(())
}

/// Teacher-forced training with true priors; keeps the best-validation
/// parameters.
pub fn train_cycle1(ckpt: &mut Checkpoint, data: &TrainData, cfg: &TrainConfig) -> Result<()> {
    run_stage(
        ckpt,
        Stage::Cycle1,
        Target::Position,
        cfg.cycle1_epochs,
        &mut Fixed(data),
        cfg,
    )
}

/// Training on priors rolled forward by the model itself. Priors are
/// recomputed every `prior_refresh_every` epochs and enter as constants.
pub fn train_cycle2(ckpt: &mut Checkpoint, data: &TrainData, cfg: &TrainConfig) -> Result<()> {
    let mut source = Recursive {
        data,
        every: cfg.prior_refresh_every,
        train: Vec::new(),
        val: Vec::new(),
    };
    let cfg = TrainConfig {
        lr: cfg.cycle2_lr.unwrap_or(cfg.lr),
        ..cfg.clone()
    };
    run_stage(
        ckpt,
        Stage::Cycle2,
        Target::Position,
        cfg.cycle2_epochs,
        &mut source,
        &cfg,
    )
}

/// Trains the attitude subnet on the quaternion loss.
pub fn train_attitude(ckpt: &mut Checkpoint, data: &TrainData, cfg: &TrainConfig) -> Result<()> {
    run_stage(
        ckpt,
        Stage::Attitude,
        Target::Attitude,
        cfg.attitude_epochs,
        &mut Fixed(data),
        cfg,
    )
}

/// Writes `stage,epoch,train_loss,val_loss`.
pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["stage", "epoch", "train_loss", "val_loss"])?;
    for r in history {
        w.write_record([
            r.stage.name().to_string(),
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_windows;
    use crate::geometry::WorldConstants;
    use crate::nets::{ModelConfig, ModelKind};
    use crate::sensors::{gen_trajectory, simulate_imu, NoiseSpec, TrajectoryKind};

    fn seq(seconds: f64, seed: u64, id: &str) -> ImuSequence {
        let mut r = crate::seeded_rng(seed);
        let poses = gen_trajectory(&TrajectoryKind::default(), seconds, 100.0, &mut r).unwrap();
        let mut s = simulate_imu(
            &poses,
            &NoiseSpec::default(),
            &WorldConstants::default(),
            &mut r,
        )
        .unwrap();
        s.meta.id = id.into();
        s
    }

    fn tiny_net(model: ModelKind) -> NetConfig {
        let m = ModelConfig {
            d_model: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        NetConfig {
            model,
            window: 10,
            position: m.clone(),
            attitude: m,
            gru_hidden: 12,
            gru_layers: 1,
            ..NetConfig::default()
        }
    }

    fn tiny_data(windows: usize) -> TrainData {
        let s = seq(3.0, 5, "s0");
        let mut w = make_windows(&s, 10, 10).unwrap();
        w.truncate(windows + 4);
        let val = w.split_off(windows);
        TrainData {
            train: w,
            val,
            sequences: vec![s],
            stride: 10,
        }
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            batch_size: 4,
            cycle1_epochs: epochs,
            cycle2_epochs: 2,
            attitude_epochs: epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mse_matches_worked_example() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 2.0]).unwrap());
        let t = g.constant(Tensor::zeros(&[1, 3]));
        let l = mse_loss(&mut g, p, t).unwrap();
        assert_eq!(g.value(l).item(), 9.0);
    }

    #[test]
    fn mse_matches_loop_oracle() {
        let mut r = crate::seeded_rng(1);
        let a: Vec<f64> = (0..30).map(|_| r.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..30).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut oracle = 0.0;
        for row in 0..10 {
            for c in 0..3 {
                let d: f64 = a[row * 3 + c] - b[row * 3 + c];
                oracle += d * d;
            }
        }
        oracle /= 10.0;
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(&[10, 3], a).unwrap());
        let t = g.constant(Tensor::new(&[10, 3], b).unwrap());
        let l = mse_loss(&mut g, p, t).unwrap();
        assert!((g.value(l).item() - oracle).abs() < 1e-12);
        let bad = g.constant(Tensor::zeros(&[10, 2]));
        assert!(mse_loss(&mut g, bad, bad).is_err());
    }

    #[test]
    fn tiny_riot_loss_decreases() {
        let data = tiny_data(20);
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 20,
            ..tiny_cfg(200)
        };
        let net = init_network(&tiny_net(ModelKind::Riot), &data.train, true, 3).unwrap();
        let mut ck = Checkpoint::new(net, "t");
        train_cycle1(&mut ck, &data, &cfg).unwrap();
        let losses: Vec<f64> = ck
            .stage_history(Stage::Cycle1)
            .iter()
            .map(|r| r.train_loss)
            .collect();
        assert_eq!(losses.len(), 201);
        let medians: Vec<f64> = losses[1..]
            .chunks(20)
            .map(|c| {
                let mut c = c.to_vec();
                c.sort_by(f64::total_cmp);
                c[c.len() / 2]
            })
            .collect();
        for w in medians.windows(2) {
            assert!(w[1] <= w[0] * 1.0001, "block medians {medians:?}");
        }
        assert!(
            losses[200] < 0.05 * losses[0],
            "initial {} final {}",
            losses[0],
            losses[200]
        );
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = tiny_data(4);
        let net = init_network(&tiny_net(ModelKind::Riot), &data.train, true, 3).unwrap();
        let mut ck = Checkpoint::new(net.clone(), "t");
        train_cycle1(&mut ck, &data, &tiny_cfg(0)).unwrap();
        assert_eq!(ck.network.params.tensors(), net.params.tensors());
        assert!(ck.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let data = tiny_data(6);
        let net = init_network(&tiny_net(ModelKind::Riot), &data.train, true, 3).unwrap();
        let mut a = Checkpoint::new(net.clone(), "t");
        train_cycle1(&mut a, &data, &tiny_cfg(4)).unwrap();
        let mut b = Checkpoint::new(net, "t");
        train_cycle1(&mut b, &data, &tiny_cfg(2)).unwrap();
        let mut b = Checkpoint::from_tensor_file(&b.to_tensor_file().unwrap()).unwrap();
        train_cycle1(&mut b, &data, &tiny_cfg(4)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.network.params.tensors(), b.network.params.tensors());
    }

    #[test]
    fn single_step_decreases_loss_at_small_lr() {
        let data = tiny_data(4);
        let mut ok = 0;
        for trial in 0..100 {
            let net = init_network(&tiny_net(ModelKind::Riot), &data.train, true, trial).unwrap();
            let before = evaluate_position_loss(&net, &data.train).unwrap();
            let mut ck = Checkpoint::new(net, "t");
            let cfg = TrainConfig {
                lr: 1e-4,
                batch_size: 4,
                cycle1_epochs: 1,
                seed: trial,
                ..TrainConfig::default()
            };
            let mut rng = epoch_rng(cfg.seed, Stage::Cycle1, 1);
            run_epoch(&mut ck, Target::Position, &data.train, &cfg, &mut rng).unwrap();
            if evaluate_position_loss(&ck.network, &data.train).unwrap() < before {
                ok += 1;
            }
        }
        assert!(ok >= 95, "{ok}/100");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let data = tiny_data(4);
        for kind in [ModelKind::Riot, ModelKind::Ariot, ModelKind::Gru] {
            let net = init_network(&tiny_net(kind), &data.train, true, 9).unwrap();
            let mut ck = Checkpoint::new(net, "fp");
            train_cycle1(&mut ck, &data, &tiny_cfg(1)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.bin");
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            let w = &data.val[0];
            let q = w.target_quat.clone();
            let quat = (kind == ModelKind::Ariot).then_some(&q);
            assert_eq!(
                ck.network.predict(&w.imu, &w.prior_pos, quat).unwrap(),
                back.network.predict(&w.imu, &w.prior_pos, quat).unwrap()
            );
            assert_eq!(back.history, ck.history);
            assert_eq!(back.fingerprint, "fp");
            assert_eq!(
                back.optimizer.as_ref().unwrap().step_count(),
                ck.optimizer.as_ref().unwrap().step_count()
            );
        }
    }

    #[test]
    fn cycle2_uses_recursive_priors() {
        let data = tiny_data(6);
        let net = init_network(&tiny_net(ModelKind::Riot), &data.train, true, 3).unwrap();
        let (train, _) = recursive_windows(&net, &data).unwrap();
        // An untrained residual model returns its priors, so rolled priors
        // stay at the initial position.
        let p0 = data.sequences[0].samples[0].truth.p;
        for w in &train {
            for r in 0..w.len() {
                for c in 0..3 {
                    assert!((w.prior_pos.at(r, c) - p0[c]).abs() < 1e-12);
                }
            }
        }
        let mut ck = Checkpoint::new(net, "t");
        train_cycle2(&mut ck, &data, &tiny_cfg(1)).unwrap();
        assert_eq!(ck.epochs_done(Stage::Cycle2), 2);
    }

    #[test]
    fn cycle2_initial_val_loss_is_the_recursive_evaluation_loss() {
        let data = tiny_data(6);
        let mut ck = Checkpoint::new(
            init_network(&tiny_net(ModelKind::Riot), &data.train, true, 3).unwrap(),
            "t",
        );
        train_cycle1(&mut ck, &data, &tiny_cfg(5)).unwrap();
        let net = ck.network.clone();
        train_cycle2(&mut ck, &data, &tiny_cfg(5)).unwrap();
        let first = ck.stage_history(Stage::Cycle2)[0].clone();
        assert_eq!(first.epoch, 0);
        // Absolute error of the rolled-forward estimate on each val row.
        let seq = &data.sequences[0];
        let est = recursive_infer(
            &net,
            seq,
            seq.samples[0].truth.p,
            data.stride,
            Stitch::LastWins,
        )
        .unwrap()
        .trajectory
        .est_pos;
        let mut total = 0.0;
        for w in &data.val {
            let rolled = w.with_priors(&est, seq.samples[0].truth.p).unwrap();
            let out = net.predict(&rolled.imu, &rolled.prior_pos, None).unwrap();
            let mut sq = 0.0;
            for r in 0..w.len() {
                for c in 0..3 {
                    sq += (out.at(r, c) - w.target_pos.at(r, c)).powi(2);
                }
            }
            total += sq / w.len() as f64 / data.val.len() as f64;
        }
        let val = first.val_loss.unwrap();
        assert!(
            (val - total).abs() <= 1e-12 * total.max(1.0),
            "{val} vs {total}"
        );
    }

    #[test]
    fn divergence_restores_parameters() {
        let data = tiny_data(4);
        let net = init_network(&tiny_net(ModelKind::Riot), &data.train, true, 3).unwrap();
        let mut ck = Checkpoint::new(net.clone(), "t");
        let mut bad = data.clone();
        bad.train[0].target_pos.data_mut()[0] = f64::NAN;
        let err = train_cycle1(&mut ck, &bad, &tiny_cfg(2)).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged(_)), "{err}");
        assert_eq!(ck.network.params.tensors(), net.params.tensors());
    }

    #[test]
    fn attitude_converges_on_constant_rotation() {
        let mut r = crate::seeded_rng(8);
        let poses = gen_trajectory(
            &TrajectoryKind::Circle {
                radius: 3.0,
                omega: 0.5,
            },
            4.0,
            100.0,
            &mut r,
        )
        .unwrap();
        let mut s = simulate_imu(
            &poses,
            &NoiseSpec::default(),
            &WorldConstants::default(),
            &mut r,
        )
        .unwrap();
        s.meta.id = "c".into();
        let w = make_windows(&s, 10, 10).unwrap();
        let data = TrainData {
            train: w,
            val: Vec::new(),
            sequences: vec![s],
            stride: 10,
        };
        let net = init_network(&tiny_net(ModelKind::Ariot), &data.train, true, 4).unwrap();
        let mut ck = Checkpoint::new(net, "t");
        train_attitude(
            &mut ck,
            &data,
            &TrainConfig {
                batch_size: 8,
                ..tiny_cfg(300)
            },
        )
        .unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for w in &data.train {
            let q = ck.network.predict_attitude(&w.imu).unwrap();
            for k in 0..w.len() {
                let est = crate::Quaternion::new(q.at(k, 0), q.at(k, 1), q.at(k, 2), q.at(k, 3));
                let truth = crate::Quaternion::new(
                    w.target_quat.at(k, 0),
                    w.target_quat.at(k, 1),
                    w.target_quat.at(k, 2),
                    w.target_quat.at(k, 3),
                );
                total += est.angle_to(truth);
                n += 1;
            }
        }
        let mean_deg = (total / n as f64).to_degrees();
        assert!(mean_deg < 5.0, "mean error {mean_deg} deg");
    }

    #[test]
    fn attitude_training_reduces_angle_error() {
        let data = tiny_data(12);
        let net = init_network(&tiny_net(ModelKind::Ariot), &data.train, true, 4).unwrap();
        let before = evaluate_attitude_loss(&net, &data.train).unwrap();
        let mut ck = Checkpoint::new(net, "t");
        train_attitude(&mut ck, &data, &tiny_cfg(60)).unwrap();
        let after = evaluate_attitude_loss(&ck.network, &data.train).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
    }
}
