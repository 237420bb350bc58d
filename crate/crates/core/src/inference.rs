//! Sliding-window recursive inference.
//!
//! Windows start at `0, stride, 2 stride, ...`, plus one window aligned to
//! the end of the sequence when the grid leaves a tail uncovered. Each
//! window's prior rows are filled from positions already estimated; rows
//! the previous windows did not reach are rolled forward inside the
//! window from its own estimates. Ground-truth positions are never read.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::IMU_FEATURES;
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3, WorldConstants};
use crate::metrics::TrajectoryEstimate;
use crate::nets::Network;
use crate::sensors::{dead_reckon, ImuSequence};
use crate::tensor::Tensor;

/// A model queried once per window.
pub trait PositionEstimator {
    fn window_len(&self) -> usize;

    /// Returns `T × 3` positions for the window starting at sequence index
    /// `start`. Prior rows `>= n_known` are placeholders the estimator must
    /// fill from its own outputs (row `k` holds the position at `k - 1`).
    fn estimate_window(
        &self,
        start: usize,
        imu: &Tensor,
        prior: &Tensor,
        n_known: usize,
    ) -> Result<Tensor>;
}

impl PositionEstimator for Network {
    fn window_len(&self) -> usize {
        self.window()
    }

    fn estimate_window(
        &self,
        _start: usize,
        imu: &Tensor,
        prior: &Tensor,
        n_known: usize,
    ) -> Result<Tensor> {
        let quat = match self.attitude {
            Some(_) => Some(self.predict_attitude(imu)?),
            None => None,
        };
        self.fill_window(imu, prior, quat.as_ref(), n_known)
    }
}

/// Diagnostic estimator that adds the true per-step displacements to its
/// priors. Recursive inference with it reproduces the truth exactly up to
/// rounding, which exercises the stitching path end to end.
pub struct TruthReplay {
    pub window: usize,
    pub truth: Vec<Vec3>,
}

impl PositionEstimator for TruthReplay {
    fn window_len(&self) -> usize {
        self.window
    }

    fn estimate_window(
        &self,
        start: usize,
        _imu: &Tensor,
        prior: &Tensor,
        n_known: usize,
    ) -> Result<Tensor> {
        if start + self.window > self.truth.len() {
            return Err(Error::dim(format!(
                "window at {start} runs past {} truth rows",
                self.truth.len()
            )));
        }
        let mut out = Vec::with_capacity(self.window * 3);
        let mut prev = [0.0; 3];
        for k in 0..self.window {
            if k < n_known {
                prev = [prior.at(k, 0), prior.at(k, 1), prior.at(k, 2)];
            }
            let i = start + k;
            let d = if i == 0 {
                [0.0; 3]
            } else {
                crate::geometry::sub(self.truth[i], self.truth[i - 1])
            };
            prev = [prev[0] + d[0], prev[1] + d[1], prev[2] + d[2]];
            out.extend(prev);
        }
        Tensor::new(&[self.window, 3], out)
    }
}

/// How overlapping window estimates are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stitch {
    #[default]
    LastWins,
    Average,
}

/// Window start indices covering every sample of a length-`len` sequence.
pub fn window_starts(len: usize, t: usize, stride: usize) -> Vec<usize> {
    if len < t || stride == 0 {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..=(len - t) / stride).map(|i| i * stride).collect();
    if starts.last().is_some_and(|s| s + t < len) {
        starts.push(len - t);
    }
    starts
}

#[derive(Clone, Debug)]
pub struct Inferred {
    pub trajectory: TrajectoryEstimate,
    /// Number of `estimate_window` calls.
    pub calls: usize,
}

/// Recursive inference over a whole sequence from `initial_pos`.
///
/// The estimate at index 0 is pinned to `initial_pos`, which also fills
/// the pre-pad prior slot of the first window.
pub fn recursive_infer(
    model: &dyn PositionEstimator,
    seq: &ImuSequence,
    initial_pos: Vec3,
    stride: usize,
    stitch: Stitch,
) -> Result<Inferred> {
    let t = model.window_len();
    let n = seq.len();
    if n < t {
        return Err(Error::InsufficientData(format!(
            "sequence of {n} samples is shorter than the window {t}"
        )));
    }
    if stride == 0 || stride > t {
        return Err(Error::Parameter(format!("stride {stride} outside 1..={t}")));
    }
    let mut sums = vec![[0.0; 3]; n];
    let mut counts = vec![0usize; n];
    sums[0] = initial_pos;
    counts[0] = 1;
    // Highest index with an estimate.
    let mut reached = 0;
    let mut calls = 0;
    let value = |sums: &[Vec3], counts: &[usize], i: usize| -> Vec3 {
        let c = counts[i] as f64;
        [sums[i][0] / c, sums[i][1] / c, sums[i][2] / c]
    };
    for start in window_starts(n, t, stride) {
        let imu = Tensor::new(
            &[t, IMU_FEATURES],
            seq.samples[start..start + t]
                .iter()
                .flat_map(|s| s.features())
                .collect(),
        )?;
        let mut prior = vec![0.0; t * 3];
        let mut n_known = 0;
        for k in 0..t {
            let p = if start + k == 0 {
                initial_pos
            } else if start + k - 1 <= reached {
                value(&sums, &counts, start + k - 1)
            } else {
                break;
            };
            prior[k * 3..k * 3 + 3].copy_from_slice(&p);
            n_known = k + 1;
        }
        let prior = Tensor::new(&[t, 3], prior)?;
        let est = model.estimate_window(start, &imu, &prior, n_known)?;
        if est.shape() != [t, 3] {
            return Err(Error::dim(format!(
                "estimator returned {:?}, expected [{t}, 3]",
                est.shape()
            )));
        }
        calls += 1;
        for k in 0..t {
            let i = start + k;
            if i == 0 {
                continue;
            }
            let row = [est.at(k, 0), est.at(k, 1), est.at(k, 2)];
            match stitch {
                Stitch::LastWins => {
                    sums[i] = row;
                    counts[i] = 1;
                }
                Stitch::Average => {
                    for j in 0..3 {
                        sums[i][j] += row[j];
                    }
                    counts[i] += 1;
                }
            }
        }
        reached = reached.max(start + t - 1);
    }
    let est_pos = (0..n).map(|i| value(&sums, &counts, i)).collect();
    let trajectory = TrajectoryEstimate::new(seq.timestamps(), est_pos, seq.true_positions())?;
    Ok(Inferred { trajectory, calls })
}

/// Classical strapdown baseline with accelerometer/magnetometer correction.
pub fn classical_baseline(
    seq: &ImuSequence,
    initial: &Pose,
    wc: &WorldConstants,
) -> Result<TrajectoryEstimate> {
    dead_reckon(seq, initial, true, wc)
}

/// Writes `t,px,py,pz` and, with `with_truth`, `true_px,true_py,true_pz`.
pub fn write_trajectory_csv(
    traj: &TrajectoryEstimate,
    path: &Path,
    with_truth: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t", "px", "py", "pz"];
    if with_truth {
        header.extend(["true_px", "true_py", "true_pz"]);
    }
    w.write_record(&header)?;
    for k in 0..traj.len() {
        let mut row: Vec<f64> = vec![traj.timestamps[k]];
        row.extend(traj.est_pos[k]);
        if with_truth {
            row.extend(traj.true_pos[k]);
        }
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
