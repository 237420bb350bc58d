//! CSV ingestion, sliding windows, train/val/test splitting and input
//! standardization.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{scale, sub, Pose, Quaternion, Vec3};
use crate::sensors::{ImuSample, ImuSequence, SequenceMeta};
use crate::tensor::Tensor;

/// Number of IMU channels per row: gyro, accel, mag.
pub const IMU_FEATURES: usize = 9;

/// Column names for every field of a recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnMap {
    pub time: String,
    pub gyro: [String; 3],
    pub accel: [String; 3],
    pub mag: [String; 3],
    pub position: [String; 3],
    pub quaternion: [String; 4],
    /// When absent, velocity is differentiated from positions.
    pub velocity: Option<[String; 3]>,
}

fn names<const N: usize>(prefix: &str, axes: [&str; N]) -> [String; N] {
    axes.map(|a| format!("{prefix}_{a}"))
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            time: "t".into(),
            gyro: names("gyro", ["x", "y", "z"]),
            accel: names("accel", ["x", "y", "z"]),
            mag: names("mag", ["x", "y", "z"]),
            position: names("pos", ["x", "y", "z"]),
            quaternion: names("quat", ["w", "x", "y", "z"]),
            velocity: Some(names("vel", ["x", "y", "z"])),
        }
    }
}

impl ColumnMap {
    fn imu_columns(&self) -> Vec<&str> {
        std::iter::once(&self.time)
            .chain(&self.gyro)
            .chain(&self.accel)
            .chain(&self.mag)
            .map(String::as_str)
            .collect()
    }

    fn truth_columns(&self) -> Vec<&str> {
        let mut cols: Vec<&str> = self
            .position
            .iter()
            .chain(&self.quaternion)
            .map(String::as_str)
            .collect();
        if let Some(v) = &self.velocity {
            cols.extend(v.iter().map(String::as_str));
        }
        cols
    }
}

/// Writes a sequence as one combined CSV file in the default column layout.
pub fn write_sequence_csv(seq: &ImuSequence, path: &Path) -> Result<()> {
    let map = ColumnMap::default();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = map.imu_columns();
    header.extend(map.truth_columns());
    w.write_record(&header)?;
    for s in &seq.samples {
        let q = s.truth.q.to_array();
        let row: Vec<String> = std::iter::once(s.t)
            .chain(s.features())
            .chain(s.truth.p)
            .chain(q)
            .chain(s.truth.v)
            .map(|x| x.to_string())
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Result of [`load_sequence`].
#[derive(Clone, Debug)]
pub struct Loaded {
    pub sequence: ImuSequence,
    /// Rows removed because a field was missing or non-finite.
    pub dropped: usize,
}

struct Table {
    rows: Vec<Vec<f64>>,
}

/// Reads the requested columns; unparsable cells become NaN.
fn read_columns(path: &Path, cols: &[&str]) -> Result<Table> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = r.headers()?.clone();
    let idx: Vec<usize> =
        cols.iter()
            .map(|c| {
                header.iter().position(|h| h == *c).ok_or_else(|| {
                    Error::Schema(format!("{}: missing column {c:?}", path.display()))
                })
            })
            .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(
            idx.iter()
                .map(|&i| rec.get(i).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN))
                .collect(),
        );
    }
    Ok(Table { rows })
}

/// Loads one recording from a combined file, or from an IMU file plus a
/// ground-truth file joined on the time column.
pub fn load_sequence(
    imu_path: &Path,
    truth_path: Option<&Path>,
    map: &ColumnMap,
    rate_hz: f64,
) -> Result<Loaded> {
    if !(rate_hz > 0.0) {
        return Err(Error::config(format!("rate {rate_hz} Hz must be positive")));
    }
    let imu_cols = map.imu_columns();
    let truth_cols = map.truth_columns();
    let (rows, mut dropped) = match truth_path {
        None => {
            let all: Vec<&str> = imu_cols.iter().chain(&truth_cols).copied().collect();
            (read_columns(imu_path, &all)?.rows, 0)
        }
        Some(tp) => {
            let imu = read_columns(imu_path, &imu_cols)?;
            let mut tcols = vec![map.time.as_str()];
            tcols.extend(&truth_cols);
            let truth = read_columns(tp, &tcols)?;
            let tol = 1e-3 / rate_hz;
            let keyed: HashMap<i64, &Vec<f64>> = truth
                .rows
                .iter()
                .filter(|r| r[0].is_finite())
                .map(|r| ((r[0] / tol).round() as i64, r))
                .collect();
            let mut unmatched = 0;
            let rows = imu
                .rows
                .into_iter()
                .filter_map(|mut r| match keyed.get(&((r[0] / tol).round() as i64)) {
                    Some(t) if r[0].is_finite() => {
                        r.extend_from_slice(&t[1..]);
                        Some(r)
                    }
                    _ => {
                        unmatched += 1;
                        None
                    }
                })
                .collect();
            (rows, unmatched)
        }
    };
    let total = rows.len();
    let rows: Vec<Vec<f64>> = rows
        .into_iter()
        .filter(|r| r.iter().all(|x| x.is_finite()))
        .collect();
    dropped += total - rows.len();
    if dropped > 0 {
        log::warn!(
            "{}: dropped {dropped} rows with missing or non-finite fields",
            imu_path.display()
        );
    }
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{}: {} usable rows",
            imu_path.display(),
            rows.len()
        )));
    }
    let mut gaps: Vec<f64> = Vec::with_capacity(rows.len() - 1);
    for w in rows.windows(2) {
        let d = w[1][0] - w[0][0];
        if !(d > 0.0) {
            return Err(Error::data(format!(
                "{}: time not increasing at t = {}",
                imu_path.display(),
                w[0][0]
            )));
        }
        gaps.push(d);
    }
    gaps.sort_by(f64::total_cmp);
    let median = gaps[gaps.len() / 2];
    if (median * rate_hz - 1.0).abs() > 0.01 {
        return Err(Error::data(format!(
            "{}: observed rate {:.4} Hz deviates from declared {rate_hz} Hz by more than 1%",
            imu_path.display(),
            1.0 / median
        )));
    }

    let v3 = |r: &[f64], o: usize| [r[o], r[o + 1], r[o + 2]];
    let mut samples: Vec<ImuSample> = rows
        .iter()
        .map(|r| {
            let mut q = Quaternion::new(r[13], r[14], r[15], r[16]);
            if (q.norm() - 1.0).abs() > 1e-12 {
                q = q.normalized();
            }
            let q = q.canonical();
            let v = if map.velocity.is_some() {
                v3(r, 17)
            } else {
                [0.0; 3]
            };
            ImuSample {
                t: r[0],
                gyro: v3(r, 1),
                accel: v3(r, 4),
                mag: v3(r, 7),
                truth: Pose {
                    p: v3(r, 10),
                    v,
                    q,
                    t: r[0],
                },
            }
        })
        .collect();
    if map.velocity.is_none() {
        differentiate_velocity(&mut samples);
    }
    let id = imu_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Loaded {
        sequence: ImuSequence {
            samples,
            rate_hz,
            meta: SequenceMeta {
                id,
                ..Default::default()
            },
        },
        dropped,
    })
}

fn differentiate_velocity(samples: &mut [ImuSample]) {
    let n = samples.len();
    let pos: Vec<(f64, Vec3)> = samples.iter().map(|s| (s.t, s.truth.p)).collect();
    for (k, s) in samples.iter_mut().enumerate() {
        let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
        s.truth.v = scale(sub(pos[b].1, pos[a].1), 1.0 / (pos[b].0 - pos[a].0));
    }
}

/// A fixed-length slice of a sequence with the lagged position prior.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `T × 9`: gyro, accel, mag.
    pub imu: Tensor,
    /// `T × 3`; row `k` is the position at index `start + k - 1`.
    pub prior_pos: Tensor,
    /// `T × 3`
    pub target_pos: Tensor,
    /// `T × 4`, unit norm.
    pub target_quat: Tensor,
    pub seq_id: String,
    pub start_index: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.imu.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replaces the prior channel using per-index positions of the whole
    /// sequence; `pre_pad` stands in for index `-1`.
    pub fn with_priors(&self, positions: &[Vec3], pre_pad: Vec3) -> Result<Window> {
        let prior = lagged(positions, pre_pad, self.start_index, self.len())?;
        Ok(Window {
            prior_pos: prior,
            ..self.clone()
        })
    }
}

fn lagged(positions: &[Vec3], pre_pad: Vec3, start: usize, t: usize) -> Result<Tensor> {
    if start + t > positions.len() + 1 {
        return Err(Error::dim(format!(
            "window [{start}, {}) exceeds {} positions",
            start + t,
            positions.len()
        )));
    }
    let mut out = Vec::with_capacity(t * 3);
    for k in 0..t {
        let p = if start + k == 0 {
            pre_pad
        } else {
            positions[start + k - 1]
        };
        out.extend(p);
    }
    Tensor::new(&[t, 3], out)
}

/// Number of windows [`make_windows`] produces.
pub fn window_count(len: usize, t: usize, stride: usize) -> usize {
    if len < t || stride == 0 {
        0
    } else {
        (len - t) / stride + 1
    }
}

fn check_geometry(t: usize, stride: usize) -> Result<()> {
    if t < 2 || stride < 1 || stride > t {
        return Err(Error::Parameter(format!(
            "window length {t} and stride {stride} need T >= 2 and 1 <= stride <= T"
        )));
    }
    Ok(())
}

/// Builds windows at `0, stride, 2 stride, ...` with true priors; the
/// prior before the first sample is the initial true position.
pub fn make_windows(seq: &ImuSequence, t: usize, stride: usize) -> Result<Vec<Window>> {
    let truth = seq.true_positions();
    let pad = truth.first().copied().unwrap_or([0.0; 3]);
    windows_with_priors(seq, &truth, pad, t, stride)
}

/// Like [`make_windows`] but with priors drawn from `positions`.
pub fn windows_with_priors(
    seq: &ImuSequence,
    positions: &[Vec3],
    pre_pad: Vec3,
    t: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    check_geometry(t, stride)?;
    if positions.len() != seq.len() {
        return Err(Error::dim(format!(
            "{} positions for {} samples",
            positions.len(),
            seq.len()
        )));
    }
    (0..window_count(seq.len(), t, stride))
        .map(|i| build_window(seq, positions, pre_pad, i * stride, t))
        .collect()
}

/// The length-`t` window starting at `start`, with true priors.
pub fn window_at(seq: &ImuSequence, start: usize, t: usize) -> Result<Window> {
    check_geometry(t, 1)?;
    if start + t > seq.len() {
        return Err(Error::InsufficientData(format!(
            "window [{start}, {}) exceeds {} samples",
            start + t,
            seq.len()
        )));
    }
    let truth = seq.true_positions();
    build_window(seq, &truth, truth[0], start, t)
}

fn build_window(
    seq: &ImuSequence,
    positions: &[Vec3],
    pre_pad: Vec3,
    start: usize,
    t: usize,
) -> Result<Window> {
    let rows = &seq.samples[start..start + t];
    Ok(Window {
        imu: Tensor::new(
            &[t, IMU_FEATURES],
            rows.iter().flat_map(|s| s.features()).collect(),
        )?,
        prior_pos: lagged(positions, pre_pad, start, t)?,
        target_pos: Tensor::new(&[t, 3], rows.iter().flat_map(|s| s.truth.p).collect())?,
        target_quat: Tensor::new(
            &[t, 4],
            rows.iter().flat_map(|s| s.truth.q.to_array()).collect(),
        )?,
        seq_id: seq.meta.id.clone(),
        start_index: start,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Sequence ids kept out of every split.
    pub holdout: Vec<String>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.2,
            test: 0.1,
            holdout: Vec::new(),
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::config(format!(
                "split fractions {f:?} must lie in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    pub holdout: Vec<ImuSequence>,
}

/// Window-level random assignment; holdout sequences stay whole.
pub fn split<R: Rng + ?Sized>(
    seqs: &[ImuSequence],
    spec: &SplitSpec,
    t: usize,
    stride: usize,
    rng: &mut R,
) -> Result<Splits> {
    spec.validate()?;
    if seqs.is_empty() {
        return Err(Error::data("no sequences to split"));
    }
    let mut out = Splits::default();
    let mut pool = Vec::new();
    for s in seqs {
        if spec.holdout.contains(&s.meta.id) {
            out.holdout.push(s.clone());
        } else {
            pool.extend(make_windows(s, t, stride)?);
        }
    }
    let (train, val, test) = split_counts(pool.len(), spec);
    debug_assert_eq!(train + val + test, pool.len());
    pool.shuffle(rng);
    out.test = pool.split_off(train + val);
    out.val = pool.split_off(train);
    out.train = pool;
    Ok(out)
}

/// Rounded train and val counts; test takes the remainder.
pub fn split_counts(n: usize, spec: &SplitSpec) -> (usize, usize, usize) {
    let train = ((n as f64 * spec.train).round() as usize).min(n);
    let val = ((n as f64 * spec.val).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Per-channel standardization of the IMU channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Fits on every row of the given windows' IMU block.
    pub fn fit(windows: &[Window]) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let c = IMU_FEATURES;
        let mut n = 0.0;
        let mut mean = vec![0.0; c];
        let mut m2 = vec![0.0; c];
        for w in windows {
            for row in w.imu.data().chunks(c) {
                n += 1.0;
                for j in 0..c {
                    let d = row[j] - mean[j];
                    mean[j] += d / n;
                    m2[j] += d * (row[j] - mean[j]);
                }
            }
        }
        let std = m2
            .iter()
            .map(|m| (m / n).sqrt())
            .map(|s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, imu: &Tensor) -> Result<Tensor> {
        let c = self.mean.len();
        if imu.shape().last() != Some(&c) {
            return Err(Error::dim(format!(
                "normalizer has {c} channels, input shape {:?}",
                imu.shape()
            )));
        }
        let data = imu
            .data()
            .chunks(c)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, x)| (x - self.mean[j]) / self.std[j])
            })
            .collect();
        Tensor::new(imu.shape(), data)
    }
}
