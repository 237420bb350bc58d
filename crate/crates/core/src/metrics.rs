//! Trajectory accuracy metrics: ATE, RTE and the localisation-error CDF.
//!
//! No alignment is applied before scoring; estimates are compared in the
//! frame they were produced in.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Which position components enter the metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dims {
    /// x and y only.
    #[default]
    #[serde(rename = "2d")]
    Planar,
    #[serde(rename = "3d")]
    Spatial,
}

impl Dims {
    fn count(self) -> usize {
        match self {
            Dims::Planar => 2,
            Dims::Spatial => 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryEstimate {
    pub timestamps: Vec<f64>,
    pub est_pos: Vec<Vec3>,
    pub true_pos: Vec<Vec3>,
    pub dims: Dims,
}

impl TrajectoryEstimate {
    pub fn new(timestamps: Vec<f64>, est_pos: Vec<Vec3>, true_pos: Vec<Vec3>) -> Result<Self> {
        let traj = Self {
            timestamps,
            est_pos,
            true_pos,
            dims: Dims::default(),
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn with_dims(mut self, dims: Dims) -> Self {
        self.dims = dims;
        self
    }

    pub fn len(&self) -> usize {
        self.est_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.est_pos.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.est_pos.len() != self.true_pos.len() || self.est_pos.len() != self.timestamps.len()
        {
            return Err(Error::data(format!(
                "trajectory lengths differ: {} timestamps, {} estimates, {} truths",
                self.timestamps.len(),
                self.est_pos.len(),
                self.true_pos.len()
            )));
        }
        if self.timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::data("trajectory timestamps must strictly increase"));
        }
        Ok(())
    }

    /// Per-sample localisation error over the evaluated dimensions.
    pub fn errors(&self) -> Vec<f64> {
        let d = self.dims.count();
        self.est_pos
            .iter()
            .zip(&self.true_pos)
            .map(|(e, t)| (0..d).map(|i| (e[i] - t[i]).powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    /// Mean sample rate implied by the timestamps.
    pub fn rate_hz(&self) -> Option<f64> {
        let n = self.timestamps.len();
        (n >= 2).then(|| (n - 1) as f64 / (self.timestamps[n - 1] - self.timestamps[0]))
    }
}

/// Root-mean-square position error.
pub fn ate(traj: &TrajectoryEstimate) -> Result<f64> {
    traj.validate()?;
    if traj.is_empty() {
        return Err(Error::data("ATE of an empty trajectory"));
    }
    let sq: f64 = traj.errors().iter().map(|e| e * e).sum();
    Ok((sq / traj.len() as f64).sqrt())
}

/// RMS over `k` of `|(p̂[k+Δ] - p̂[k]) - (p[k+Δ] - p[k])|` with `Δ = delta_steps`.
pub fn rte_steps(traj: &TrajectoryEstimate, delta_steps: usize) -> Result<f64> {
    traj.validate()?;
    if delta_steps == 0 || traj.len() <= delta_steps {
        return Err(Error::data(format!(
            "RTE horizon of {delta_steps} samples needs a longer trajectory than {}",
            traj.len()
        )));
    }
    let d = traj.dims.count();
    let terms = traj.len() - delta_steps;
    let sq: f64 = (0..terms)
        .map(|k| {
            (0..d)
                .map(|i| {
                    let de = traj.est_pos[k + delta_steps][i] - traj.est_pos[k][i];
                    let dt = traj.true_pos[k + delta_steps][i] - traj.true_pos[k][i];
                    (de - dt).powi(2)
                })
                .sum::<f64>()
        })
        .sum();
    Ok((sq / terms as f64).sqrt())
}

/// RTE over a horizon in seconds, converted with the given sample rate.
pub fn rte(traj: &TrajectoryEstimate, delta_t: f64, rate_hz: f64) -> Result<f64> {
    rte_steps(traj, (delta_t * rate_hz).round() as usize)
}

/// Empirical CDF of pooled localisation errors.
#[derive(Clone, Debug, PartialEq)]
pub struct CdfCurve {
    /// Distinct error values, ascending (m).
    pub thresholds: Vec<f64>,
    /// Fraction of errors `<=` the matching threshold.
    pub fractions: Vec<f64>,
}

impl CdfCurve {
    pub fn from_errors(mut errors: Vec<f64>) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::data("CDF of an empty error pool"));
        }
        if errors.iter().any(|e| !e.is_finite()) {
            return Err(Error::data("non-finite localisation error"));
        }
        errors.sort_by(f64::total_cmp);
        let n = errors.len() as f64;
        let mut thresholds = Vec::new();
        let mut fractions = Vec::new();
        for (i, e) in errors.iter().enumerate() {
            if errors.get(i + 1) == Some(e) {
                continue;
            }
            thresholds.push(*e);
            fractions.push((i + 1) as f64 / n);
        }
        *fractions.last_mut().unwrap() = 1.0;
        Ok(Self {
            thresholds,
            fractions,
        })
    }

    /// Fraction of errors `<= x`.
    pub fn fraction_at(&self, x: f64) -> f64 {
        match self.thresholds.partition_point(|t| *t <= x) {
            0 => 0.0,
            i => self.fractions[i - 1],
        }
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "error_m,fraction")?;
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            writeln!(out, "{t},{f}")?;
        }
        Ok(())
    }
}

pub fn cdf(trajs: &[TrajectoryEstimate]) -> Result<CdfCurve> {
    if trajs.is_empty() {
        return Err(Error::data("CDF over no trajectories"));
    }
    CdfCurve::from_errors(trajs.iter().flat_map(TrajectoryEstimate::errors).collect())
}

/// `sum(w_i x_i) / sum(w_i)`.
pub fn weighted_mean(values: &[(f64, f64)]) -> Result<f64> {
    let w: f64 = values.iter().map(|(_, w)| w).sum();
    if values.is_empty() || !(w > 0.0) {
        return Err(Error::data("weighted mean needs positive total weight"));
    }
    Ok(values.iter().map(|(x, w)| x * w).sum::<f64>() / w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sequence: String,
    pub method: String,
    pub samples: usize,
    pub ate_m: f64,
    pub rte_m: f64,
}

/// Per-sequence metrics plus sequence-length-weighted means per method.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(
        &mut self,
        sequence: &str,
        method: &str,
        traj: &TrajectoryEstimate,
        rte_horizon_s: f64,
    ) -> Result<()> {
        let rate = traj
            .rate_hz()
            .ok_or_else(|| Error::data("trajectory too short for a sample rate"))?;
        self.rows.push(MetricRow {
            sequence: sequence.to_owned(),
            method: method.to_owned(),
            samples: traj.len(),
            ate_m: ate(traj)?,
            rte_m: rte(traj, rte_horizon_s, rate)?,
        });
        Ok(())
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = Vec::new();
        for r in &self.rows {
            if !m.contains(&r.method) {
                m.push(r.method.clone());
            }
        }
        m
    }

    /// Length-weighted `(ATE, RTE)` means of one method.
    pub fn weighted(&self, method: &str) -> Result<(f64, f64)> {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.method == method).collect();
        let ate = weighted_mean(
            &rows
                .iter()
                .map(|r| (r.ate_m, r.samples as f64))
                .collect::<Vec<_>>(),
        )?;
        let rte = weighted_mean(
            &rows
                .iter()
                .map(|r| (r.rte_m, r.samples as f64))
                .collect::<Vec<_>>(),
        )?;
        Ok((ate, rte))
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sequence", "method", "samples", "ate_m", "rte_m"])?;
        for r in &self.rows {
            w.write_record([
                &r.sequence,
                &r.method,
                &r.samples.to_string(),
                &r.ate_m.to_string(),
                &r.rte_m.to_string(),
            ])?;
        }
        for m in self.methods() {
            let (a, r) = self.weighted(&m)?;
            let n: usize = self
                .rows
                .iter()
                .filter(|r| r.method == m)
                .map(|r| r.samples)
                .sum();
            w.write_record([
                "weighted_mean",
                &m,
                &n.to_string(),
                &a.to_string(),
                &r.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:<16} {:>9} {:>12} {:>12}",
            "sequence", "method", "samples", "ATE (m)", "RTE (m)"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:<16} {:>9} {:>12.4} {:>12.4}",
                r.sequence, r.method, r.samples, r.ate_m, r.rte_m
            );
        }
        for m in self.methods() {
            if let Ok((a, r)) = self.weighted(&m) {
                let _ = writeln!(
                    s,
                    "{:<24} {:<16} {:>9} {:>12.4} {:>12.4}",
                    "weighted mean", m, "", a, r
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn traj(est: Vec<Vec3>, truth: Vec<Vec3>) -> TrajectoryEstimate {
        let ts = (0..est.len()).map(|k| k as f64 * 0.01).collect();
        TrajectoryEstimate::new(ts, est, truth).unwrap()
    }

    fn random_path(n: usize, r: &mut impl Rng) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                [
                    r.random_range(-5.0..5.0),
                    r.random_range(-5.0..5.0),
                    r.random_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn ate_cases() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p = random_path(50, &mut r);
        assert_eq!(ate(&traj(p.clone(), p.clone())).unwrap(), 0.0);
        let off = [0.3, -0.4, 0.0];
        let shifted: Vec<Vec3> = p
            .iter()
            .map(|v| [v[0] + off[0], v[1] + off[1], v[2]])
            .collect();
        assert!((ate(&traj(shifted, p.clone())).unwrap() - 0.5).abs() < 1e-12);
        assert!(ate(&TrajectoryEstimate::default()).is_err());
    }

    #[test]
    fn rte_cases() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let p = random_path(300, &mut r);
        assert_eq!(rte(&traj(p.clone(), p.clone()), 1.0, 100.0).unwrap(), 0.0);
        let off: Vec<Vec3> = p
            .iter()
            .map(|v| [v[0] + 3.0, v[1] - 7.0, v[2] + 1.0])
            .collect();
        assert!(rte(&traj(off, p.clone()), 1.0, 100.0).unwrap() < 1e-12);
        let drift: Vec<Vec3> = p
            .iter()
            .enumerate()
            .map(|(k, v)| [v[0] + 0.01 * k as f64, v[1], v[2]])
            .collect();
        assert!((rte(&traj(drift, p.clone()), 1.0, 100.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(rte(&traj(p[..100].to_vec(), p[..100].to_vec()), 1.0, 100.0).is_err());
    }

    #[test]
    fn cdf_cases() {
        let p = vec![[0.0; 3]; 4];
        let perfect = cdf(&[traj(p.clone(), p.clone())]).unwrap();
        assert_eq!(perfect.thresholds, vec![0.0]);
        assert_eq!(perfect.fractions, vec![1.0]);
        let est = vec![
            [1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [3.0, 0.0, 0.0],
            [0.0, -4.0, 0.0],
        ];
        let c = cdf(&[traj(est, p)]).unwrap();
        assert_eq!(c.fraction_at(2.0), 0.5);
        assert_eq!(c.fraction_at(0.5), 0.0);
        assert_eq!(c.fraction_at(10.0), 1.0);
        assert!(cdf(&[]).is_err());
    }

    #[test]
    fn planar_mode_ignores_equal_z() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let truth = random_path(200, &mut r);
        let est: Vec<Vec3> = truth
            .iter()
            .map(|v| [v[0] + r.random_range(-0.1..0.1), v[1] + 0.05, v[2]])
            .collect();
        let t2 = traj(est.clone(), truth.clone());
        let t3 = t2.clone().with_dims(Dims::Spatial);
        assert_eq!(ate(&t2).unwrap(), ate(&t3).unwrap());
        assert_eq!(rte_steps(&t2, 100).unwrap(), rte_steps(&t3, 100).unwrap());
    }

    #[test]
    fn report_weighting() {
        let mut report = MetricReport::default();
        let a = traj(vec![[1.0, 0.0, 0.0]; 200], vec![[0.0; 3]; 200]);
        let b = traj(vec![[0.0, 3.0, 0.0]; 600], vec![[0.0; 3]; 600]);
        report.push("a", "riot", &a, 1.0).unwrap();
        report.push("b", "riot", &b, 1.0).unwrap();
        let (wa, wr) = report.weighted("riot").unwrap();
        assert!((wa - (200.0 * 1.0 + 600.0 * 3.0) / 800.0).abs() < 1e-12);
        assert_eq!(wr, 0.0);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text
            .lines()
            .last()
            .unwrap()
            .starts_with("weighted_mean,riot,800,2.5,"));
    }
}
