use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use riot_core::config::RunConfig;
use riot_core::data::{load_sequence, make_windows, split, window_at, write_sequence_csv};
use riot_core::inference::{
    classical_baseline, recursive_infer, write_trajectory_csv, PositionEstimator, TruthReplay,
};
use riot_core::metrics::{cdf, MetricReport, TrajectoryEstimate};
use riot_core::nets::NetConfig;
use riot_core::sensors::{gen_trajectory, simulate_imu};
use riot_core::training::{self, Checkpoint, Stage, TrainData};
use riot_core::{seeded_rng, Error, ImuSequence, Result};
use serde_json::json;

use crate::manifest::Manifest;

pub struct Context {
    pub cfg: RunConfig,
    pub config_text: String,
    pub args: Vec<String>,
}

impl Context {
    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.cfg.out.join(name);
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn manifest(
        &self,
        command: &'static str,
        dir: &Path,
        outputs: Vec<String>,
        details: serde_json::Value,
    ) -> Result<()> {
        Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            args: &self.args,
            config: &self.config_text,
            resolved: self.cfg.to_toml()?,
            seed: self.cfg.train.seed,
            fingerprint: self.cfg.fingerprint()?,
            outputs,
            details,
        }
        .write(dir)
    }

    fn checkpoint_path(&self, given: Option<&Path>) -> PathBuf {
        given
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.cfg.out.join("model").join("checkpoint.bin"))
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Generator for simulated sequence `i`.
fn sequence_rng(seed: u64, i: usize) -> riot_core::Rng {
    seeded_rng(seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn simulate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let sim = &cfg.simulation;
    let dir = ctx.dir("data")?;
    let mut outputs = Vec::new();
    for i in 0..sim.count {
        let mut rng = sequence_rng(sim.seed, i);
        let poses = gen_trajectory(&sim.trajectory, sim.duration_s, cfg.data.rate_hz, &mut rng)?;
        let seq = simulate_imu(&poses, &cfg.noise, &cfg.world, &mut rng)?;
        let path = dir.join(format!("sim_{i:03}.csv"));
        write_sequence_csv(&seq, &path)?;
        log::info!("wrote {} ({} rows)", path.display(), seq.len());
        outputs.push(file_name(&path));
    }
    ctx.manifest(
        "simulate",
        &dir,
        outputs,
        json!({ "count": sim.count, "duration_s": sim.duration_s, "seed": sim.seed }),
    )
}

/// Loads every configured recording; ids must be unique.
fn load_all(cfg: &RunConfig) -> Result<Vec<(ImuSequence, usize)>> {
    let sources = cfg.data.sources()?;
    if sources.is_empty() {
        return Err(Error::Data(
            "no recordings configured: set data.dir or data.sequences".into(),
        ));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for src in sources {
        let id = src.id();
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("duplicate sequence id {id:?}")));
        }
        let mut loaded = load_sequence(
            &src.imu,
            src.truth.as_deref(),
            &cfg.data.columns,
            cfg.data.rate_hz,
        )
        .map_err(|e| match e {
            Error::Io(io) => Error::Data(format!("{}: {io}", src.imu.display())),
            e => e,
        })?;
        loaded.sequence.meta.id = id;
        out.push((loaded.sequence, loaded.dropped));
    }
    Ok(out)
}

fn load_sequences(cfg: &RunConfig) -> Result<Vec<ImuSequence>> {
    Ok(load_all(cfg)?.into_iter().map(|(s, _)| s).collect())
}

pub fn ingest(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let loaded = load_all(cfg)?;
    let t = cfg.net.window;
    let mut per_seq = Vec::new();
    for (s, dropped) in &loaded {
        per_seq.push(json!({ "id": s.meta.id, "rows": s.len(), "dropped": dropped, "windows": make_windows(s, t, cfg.data.stride)?.len() }));
    }
    let seqs: Vec<ImuSequence> = loaded.into_iter().map(|(s, _)| s).collect();
    let splits = split(
        &seqs,
        &cfg.data.split,
        t,
        cfg.data.stride,
        &mut seeded_rng(cfg.train.seed),
    )?;
    let summary = json!({
        "sequences": per_seq,
        "window": t,
        "stride": cfg.data.stride,
        "train_windows": splits.train.len(),
        "val_windows": splits.val.len(),
        "test_windows": splits.test.len(),
        "holdout": splits.holdout.iter().map(|s| s.meta.id.clone()).collect::<Vec<_>>(),
    });
    let dir = ctx.dir("ingest")?;
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("summary.json"), &text)?;
    println!("{text}");
    ctx.manifest("ingest", &dir, vec!["summary.json".into()], summary)
}

/// Net geometry that must agree between a checkpoint and the config.
fn same_geometry(a: &NetConfig, b: &NetConfig) -> bool {
    let strip = |c: &NetConfig| {
        let mut c = c.clone();
        c.position.dropout = 0.0;
        c.attitude.dropout = 0.0;
        c
    };
    strip(a) == strip(b)
}

fn load_checkpoint(ctx: &Context, given: Option<&Path>) -> Result<Checkpoint> {
    let path = ctx.checkpoint_path(given);
    let ckpt = Checkpoint::load(&path)?;
    if !same_geometry(&ckpt.network.config, &ctx.cfg.net) {
        return Err(Error::Config(format!(
            "{} holds a {} network whose geometry differs from the configured net",
            path.display(),
            ckpt.network.kind().name()
        )));
    }
    Ok(ckpt)
}

pub fn train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let seqs = load_sequences(cfg)?;
    let t = cfg.net.window;
    let splits = split(
        &seqs,
        &cfg.data.split,
        t,
        cfg.data.stride,
        &mut seeded_rng(cfg.train.seed),
    )?;
    if splits.train.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    let holdout: HashSet<&str> = splits.holdout.iter().map(|s| s.meta.id.as_str()).collect();
    let data = TrainData {
        train: splits.train,
        val: splits.val,
        sequences: seqs
            .iter()
            .filter(|s| !holdout.contains(s.meta.id.as_str()))
            .cloned()
            .collect(),
        stride: cfg.inference_stride(),
    };
    let dir = ctx.dir("model")?;
    let path = dir.join("checkpoint.bin");
    let fingerprint = cfg.fingerprint()?;
    let mut ckpt = if path.exists() {
        let c = Checkpoint::load(&path)?;
        if c.fingerprint != fingerprint {
            return Err(Error::Config(format!(
                "{} was trained with a different configuration (fingerprint {} vs {fingerprint})",
                path.display(),
                c.fingerprint
            )));
        }
        log::info!("continuing from {}", path.display());
        c
    } else {
        Checkpoint::new(
            training::init_network(&cfg.net, &data.train, cfg.train.normalize, cfg.train.seed)?,
            fingerprint,
        )
    };
    let mut stages: Vec<(
        Stage,
        fn(&mut Checkpoint, &TrainData, &training::TrainConfig) -> Result<()>,
    )> = Vec::new();
    if ckpt.network.attitude.is_some() {
        stages.push((Stage::Attitude, training::train_attitude));
    }
    stages.push((Stage::Cycle1, training::train_cycle1));
    stages.push((Stage::Cycle2, training::train_cycle2));
    for (stage, run) in stages {
        log::info!(
            "{}: {} windows, {} validation",
            stage.name(),
            data.train.len(),
            data.val.len()
        );
        let result = run(&mut ckpt, &data, &cfg.train);
        ckpt.save(&path)?;
        training::write_history_csv(&ckpt.history, &dir.join("losses.csv"))?;
        if let Err(e) = result {
            if let Some(last) = ckpt.history.last() {
                eprintln!(
                    "last completed epoch: {} {} train {:e} val {:?}",
                    last.stage.name(),
                    last.epoch,
                    last.train_loss,
                    last.val_loss
                );
            }
            return Err(e);
        }
    }
    let test_loss = if splits.test.is_empty() {
        None
    } else {
        Some(training::evaluate_position_loss(
            &ckpt.network,
            &splits.test,
        )?)
    };
    let best = ckpt
        .best_epoch()
        .map(|(s, e, v)| json!({ "stage": s.name(), "epoch": e, "score": v }));
    ctx.manifest(
        "train",
        &dir,
        vec!["checkpoint.bin".into(), "losses.csv".into()],
        json!({ "model": ckpt.network.kind().name(), "parameters": ckpt.network.num_scalars(), "test_loss": test_loss, "best": best }),
    )
}

/// Sequences scored by `infer` and `eval`.
fn selected(cfg: &RunConfig) -> Result<Vec<ImuSequence>> {
    let all = load_sequences(cfg)?;
    let wanted: Vec<String> = if !cfg.inference.sequences.is_empty() {
        cfg.inference.sequences.clone()
    } else if !cfg.data.split.holdout.is_empty() {
        cfg.data.split.holdout.clone()
    } else {
        return Ok(all);
    };
    wanted
        .iter()
        .map(|id| {
            all.iter()
                .find(|s| &s.meta.id == id)
                .cloned()
                .ok_or_else(|| Error::Data(format!("unknown sequence id {id:?}")))
        })
        .collect()
}

struct Estimates {
    method: String,
    runs: Vec<(String, TrajectoryEstimate, Option<TrajectoryEstimate>)>,
}

fn estimate(ctx: &Context, checkpoint: Option<&Path>, oracle: bool) -> Result<Estimates> {
    let cfg = &ctx.cfg;
    let seqs = selected(cfg)?;
    let ckpt = if oracle {
        None
    } else {
        Some(load_checkpoint(ctx, checkpoint)?)
    };
    let method = match &ckpt {
        Some(c) => c.network.kind().name().to_string(),
        None => "oracle".to_string(),
    };
    let mut runs = Vec::new();
    for s in &seqs {
        let p0 = s
            .samples
            .first()
            .ok_or_else(|| Error::Data("empty sequence".into()))?
            .truth;
        let replay;
        let model: &dyn PositionEstimator = match &ckpt {
            Some(c) => &c.network,
            None => {
                replay = TruthReplay {
                    window: cfg.net.window,
                    truth: s.true_positions(),
                };
                &replay
            }
        };
        let est = recursive_infer(model, s, p0.p, cfg.inference_stride(), cfg.inference.stitch)?
            .trajectory
            .with_dims(cfg.metrics.dims);
        let base = if cfg.inference.baseline {
            Some(classical_baseline(s, &p0, &cfg.world)?.with_dims(cfg.metrics.dims))
        } else {
            None
        };
        runs.push((s.meta.id.clone(), est, base));
    }
    Ok(Estimates { method, runs })
}

pub fn infer(ctx: &Context, checkpoint: Option<&Path>, oracle: bool) -> Result<()> {
    let est = estimate(ctx, checkpoint, oracle)?;
    let dir = ctx.dir("infer")?;
    let mut outputs = Vec::new();
    for (id, traj, base) in &est.runs {
        let p = dir.join(format!("{id}.csv"));
        write_trajectory_csv(traj, &p, true)?;
        outputs.push(file_name(&p));
        if let Some(b) = base {
            let p = dir.join(format!("{id}.baseline.csv"));
            write_trajectory_csv(b, &p, true)?;
            outputs.push(file_name(&p));
        }
    }
    ctx.manifest("infer", &dir, outputs, json!({ "method": est.method }))
}

pub const BASELINE: &str = "dead-reckoning";

pub fn eval(ctx: &Context, checkpoint: Option<&Path>, oracle: bool) -> Result<()> {
    let horizon = ctx.cfg.metrics.rte_horizon_s;
    let est = estimate(ctx, checkpoint, oracle)?;
    let mut report = MetricReport::default();
    for (id, traj, _) in &est.runs {
        report.push(id, &est.method, traj, horizon)?;
    }
    for (id, _, base) in &est.runs {
        if let Some(b) = base {
            report.push(id, BASELINE, b, horizon)?;
        }
    }
    let dir = ctx.dir("eval")?;
    report.write_csv(fs::File::create(dir.join("metrics.csv"))?)?;
    let table = report.to_table();
    fs::write(dir.join("metrics.txt"), &table)?;
    print!("{table}");
    let mut outputs = vec!["metrics.csv".to_string(), "metrics.txt".to_string()];
    let model: Vec<TrajectoryEstimate> = est.runs.iter().map(|r| r.1.clone()).collect();
    let base: Vec<TrajectoryEstimate> = est.runs.iter().filter_map(|r| r.2.clone()).collect();
    for (name, trajs) in [(est.method.as_str(), model), (BASELINE, base)] {
        if trajs.is_empty() {
            continue;
        }
        let f = format!("cdf_{name}.csv");
        cdf(&trajs)?.write_csv(fs::File::create(dir.join(&f))?)?;
        outputs.push(f);
    }
    let means: serde_json::Map<String, serde_json::Value> = report
        .methods()
        .into_iter()
        .filter_map(|m| {
            report
                .weighted(&m)
                .ok()
                .map(|(a, r)| (m, json!({ "ate_m": a, "rte_m": r })))
        })
        .collect();
    ctx.manifest("eval", &dir, outputs, json!({ "weighted_mean": means }))
}

pub fn export_attention(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let ckpt = load_checkpoint(ctx, checkpoint)?;
    let seqs = selected(cfg)?;
    let seq = match &cfg.attention.sequence {
        Some(id) => load_sequences(cfg)?
            .into_iter()
            .find(|s| &s.meta.id == id)
            .ok_or_else(|| Error::Data(format!("unknown sequence id {id:?}")))?,
        None => seqs
            .into_iter()
            .next()
            .ok_or_else(|| Error::Data("no sequence to export from".into()))?,
    };
    let w = window_at(&seq, cfg.attention.start, cfg.net.window)?;
    let maps = ckpt.network.attention(&w.imu, &w.prior_pos)?;
    if maps.is_empty() {
        return Err(Error::Config(format!(
            "a {} network has no attention",
            ckpt.network.kind().name()
        )));
    }
    let dir = ctx.dir("attention")?;
    let mut outputs = Vec::new();
    let mut index = Vec::new();
    for m in &maps {
        let (rows, cols) = m.alpha.dims2()?;
        let name = format!("{}_l{}_h{}.csv", m.stack, m.layer, m.head);
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join(&name))?);
        writeln!(
            f,
            "# stack={} layer={} head={} T={rows} seq_id={} start={}",
            m.stack, m.layer, m.head, seq.meta.id, w.start_index
        )?;
        for r in 0..rows {
            let line: Vec<String> = (0..cols).map(|c| m.alpha.at(r, c).to_string()).collect();
            writeln!(f, "{}", line.join(","))?;
        }
        f.flush()?;
        index.push(
            json!({ "file": name, "stack": m.stack, "layer": m.layer, "head": m.head, "T": rows }),
        );
        outputs.push(name);
    }
    ctx.manifest(
        "export-attention",
        &dir,
        outputs,
        json!({ "sequence": seq.meta.id, "start": w.start_index, "matrices": index }),
    )
}
