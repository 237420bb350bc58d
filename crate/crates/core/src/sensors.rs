//! Synthetic ground truth, IMU measurement synthesis and classical
//! strapdown dead reckoning.
//!
//! A trajectory of `n + 1` poses spans `n` sample intervals. IMU sample
//! `k` describes the motion from pose `k` to pose `k + 1`, so a 60 s
//! trajectory at 100 Hz yields 6000 samples.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    accel_mag_correction, add, attitude_step, position_step, scale, sub, Pose, Quaternion, Vec3,
    WorldConstants,
};
use crate::metrics::TrajectoryEstimate;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// White-noise standard deviations per axis.
    pub gyro_sigma: Vec3,
    pub accel_sigma: Vec3,
    pub mag_sigma: Vec3,
    /// Per-step standard deviation of the bias random walks.
    pub gyro_bias_walk_sigma: Vec3,
    pub accel_bias_walk_sigma: Vec3,
    pub gyro_bias0: Vec3,
    pub accel_bias0: Vec3,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            gyro_sigma: [0.005; 3],
            accel_sigma: [0.05; 3],
            mag_sigma: [0.005; 3],
            gyro_bias_walk_sigma: [1e-5; 3],
            accel_bias_walk_sigma: [1e-5; 3],
            gyro_bias0: [0.003, -0.002, 0.001],
            accel_bias0: [0.05, -0.03, 0.02],
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            gyro_sigma: [0.0; 3],
            accel_sigma: [0.0; 3],
            mag_sigma: [0.0; 3],
            gyro_bias_walk_sigma: [0.0; 3],
            accel_bias_walk_sigma: [0.0; 3],
            gyro_bias0: [0.0; 3],
            accel_bias0: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.gyro_sigma,
            self.accel_sigma,
            self.mag_sigma,
            self.gyro_bias_walk_sigma,
            self.accel_bias_walk_sigma,
        ];
        if sigmas
            .iter()
            .flatten()
            .any(|s| !(*s >= 0.0) || !s.is_finite())
        {
            return Err(Error::config(
                "noise standard deviations must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// rad/s
    pub gyro: Vec3,
    /// m/s²
    pub accel: Vec3,
    /// Unitless field direction.
    pub mag: Vec3,
    pub truth: Pose,
}

impl ImuSample {
    /// `[gyro | accel | mag]`.
    pub fn features(&self) -> [f64; 9] {
        let mut f = [0.0; 9];
        f[..3].copy_from_slice(&self.gyro);
        f[3..6].copy_from_slice(&self.accel);
        f[6..].copy_from_slice(&self.mag);
        f
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub id: String,
    pub user: String,
    pub device: String,
    pub activity: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImuSequence {
    pub samples: Vec<ImuSample>,
    pub rate_hz: f64,
    pub meta: SequenceMeta,
}

impl ImuSequence {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn true_positions(&self) -> Vec<Vec3> {
        self.samples.iter().map(|s| s.truth.p).collect()
    }

    /// Checks length and uniform sampling (`|Δt - 1/rate| <= 1e-9`).
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::data("sequence has no samples"));
        }
        let dt = self.dt();
        for w in self.samples.windows(2) {
            if ((w[1].t - w[0].t) - dt).abs() > 1e-9 {
                return Err(Error::data(format!(
                    "non-uniform sampling at t = {}",
                    w[0].t
                )));
            }
        }
        Ok(())
    }
}

/// Ground-truth path families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrajectoryKind {
    /// Constant velocity along `heading` (rad from +x).
    Line { speed: f64, heading: f64 },
    /// Counter-clockwise circle starting at the origin heading +x.
    Circle { radius: f64, omega: f64 },
    /// Lissajous figure-eight `(a sin ωt, a/2 sin 2ωt)`.
    FigureEight { size: f64, omega: f64 },
    /// Walking-like path: band-limited random heading and speed profiles
    /// with a level, heading-aligned body. `max_freq_hz` bounds the spectrum.
    RandomSmooth { speed: f64, max_freq_hz: f64 },
}

impl Default for TrajectoryKind {
    fn default() -> Self {
        TrajectoryKind::RandomSmooth {
            speed: 1.0,
            max_freq_hz: 0.2,
        }
    }
}

/// Sum of `amp * sin(freq t + phase)` terms.
#[derive(Clone, Debug)]
struct Harmonics(Vec<(f64, f64, f64)>);

impl Harmonics {
    fn random<R: Rng + ?Sized>(r: &mut R, n: usize, max_freq: f64, amp_total: f64) -> Self {
        let mut terms: Vec<(f64, f64, f64)> = (0..n)
            .map(|_| {
                let f = r.random_range(0.2..1.0) * max_freq * std::f64::consts::TAU;
                (
                    r.random_range(0.5..1.0),
                    f,
                    r.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let sum: f64 = terms.iter().map(|t| t.0).sum();
        for t in &mut terms {
            t.0 *= amp_total / sum;
        }
        Self(terms)
    }

    fn value(&self, t: f64) -> f64 {
        self.0.iter().map(|(a, f, p)| a * (f * t + p).sin()).sum()
    }
}

struct RandomPath {
    speed: f64,
    heading: Harmonics,
    speed_var: Harmonics,
}

impl RandomPath {
    fn heading(&self, t: f64) -> f64 {
        self.heading.value(t) - self.heading.value(0.0)
    }

    fn speed(&self, t: f64) -> f64 {
        self.speed * (1.0 + self.speed_var.value(t))
    }

    fn velocity(&self, t: f64) -> Vec3 {
        let (s, h) = (self.speed(t), self.heading(t));
        [s * h.cos(), s * h.sin(), 0.0]
    }

    fn attitude(&self, t: f64) -> Quaternion {
        Quaternion::from_axis_angle([0.0, 0.0, 1.0], self.heading(t))
    }
}

/// Five-point Gauss–Legendre integral of `f` over `[a, b]`.
fn gauss5(a: f64, b: f64, f: impl Fn(f64) -> Vec3) -> Vec3 {
    const X: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let (mid, half) = ((a + b) / 2.0, (b - a) / 2.0);
    let mut acc = [0.0; 3];
    for (x, w) in X.iter().zip(W) {
        acc = add(acc, scale(f(mid + half * x), w * half));
    }
    acc
}

/// Samples `round(duration_s * rate_hz) + 1` poses at `t_k = k / rate_hz`.
pub fn gen_trajectory<R: Rng + ?Sized>(
    kind: &TrajectoryKind,
    duration_s: f64,
    rate_hz: f64,
    rng: &mut R,
) -> Result<Vec<Pose>> {
    if !(duration_s > 0.0) || !(rate_hz > 0.0) {
        return Err(Error::Parameter(format!(
            "duration {duration_s} s and rate {rate_hz} Hz must be positive"
        )));
    }
    let n = (duration_s * rate_hz).round() as usize;
    let times = (0..=n).map(|k| k as f64 / rate_hz);
    let yaw = |h: f64| Quaternion::from_axis_angle([0.0, 0.0, 1.0], h);
    let poses = match *kind {
        TrajectoryKind::Line { speed, heading } => {
            let dir = [heading.cos(), heading.sin(), 0.0];
            times
                .map(|t| Pose {
                    p: scale(dir, speed * t),
                    v: scale(dir, speed),
                    q: yaw(heading).canonical(),
                    t,
                })
                .collect()
        }
        TrajectoryKind::Circle { radius, omega } => times
            .map(|t| {
                let (s, c) = (omega * t).sin_cos();
                Pose {
                    p: [radius * s, radius * (1.0 - c), 0.0],
                    v: [radius * omega * c, radius * omega * s, 0.0],
                    q: yaw(omega * t).canonical(),
                    t,
                }
            })
            .collect(),
        TrajectoryKind::FigureEight { size, omega } => times
            .map(|t| {
                let v = [
                    size * omega * (omega * t).cos(),
                    size * omega * (2.0 * omega * t).cos(),
                    0.0,
                ];
                Pose {
                    p: [
                        size * (omega * t).sin(),
                        size / 2.0 * (2.0 * omega * t).sin(),
                        0.0,
                    ],
                    v,
                    q: yaw(v[1].atan2(v[0])).canonical(),
                    t,
                }
            })
            .collect(),
        TrajectoryKind::RandomSmooth { speed, max_freq_hz } => {
            let path = RandomPath {
                speed,
                heading: Harmonics::random(rng, 4, max_freq_hz, 1.5),
                speed_var: Harmonics::random(rng, 3, max_freq_hz, 0.3),
            };
            let mut p = [0.0; 3];
            let mut prev_t = 0.0;
            times
                .map(|t| {
                    if t > prev_t {
                        p = add(p, gauss5(prev_t, t, |s| path.velocity(s)));
                        prev_t = t;
                    }
                    Pose {
                        p,
                        v: path.velocity(t),
                        q: path.attitude(t).canonical(),
                        t,
                    }
                })
                .collect()
        }
    };
    Ok(poses)
}

/// Analytic acceleration of the deterministic path families, for tests
/// and diagnostics. Random paths return `None`.
pub fn analytic_acceleration(kind: &TrajectoryKind, t: f64) -> Option<Vec3> {
    match *kind {
        TrajectoryKind::Line { .. } => Some([0.0; 3]),
        TrajectoryKind::Circle { radius, omega } => {
            let (s, c) = (omega * t).sin_cos();
            Some([-radius * omega * omega * s, radius * omega * omega * c, 0.0])
        }
        TrajectoryKind::FigureEight { size, omega } => Some([
            -size * omega * omega * (omega * t).sin(),
            -2.0 * size * omega * omega * (2.0 * omega * t).sin(),
            0.0,
        ]),
        TrajectoryKind::RandomSmooth { .. } => None,
    }
}

fn gaussian3<R: Rng + ?Sized>(sigma: Vec3, rng: &mut R) -> Vec3 {
    let mut out = [0.0; 3];
    for (o, s) in out.iter_mut().zip(sigma) {
        let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng);
        *o = s * z;
    }
    out
}

/// Synthesizes gyro, accelerometer and magnetometer samples for `truth`.
///
/// The true rate of interval `k` is `2/dt log(q_k* ⊙ q_{k+1})` and the
/// true navigation acceleration is `(v_{k+1} - v_k)/dt`, which keeps the
/// measurements consistent with [`attitude_step`] and [`position_step`].
pub fn simulate_imu<R: Rng + ?Sized>(
    truth: &[Pose],
    noise: &NoiseSpec,
    wc: &WorldConstants,
    rng: &mut R,
) -> Result<ImuSequence> {
    if truth.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} poses; need at least 2",
            truth.len()
        )));
    }
    noise.validate()?;
    wc.validate()?;
    let dt = wc.dt;
    let mut gyro_bias = noise.gyro_bias0;
    let mut accel_bias = noise.accel_bias0;
    let mut samples = Vec::with_capacity(truth.len() - 1);
    for pair in truth.windows(2) {
        let (cur, next) = (&pair[0], &pair[1]);
        let omega = scale(cur.q.conj().mul(next.q).canonical().log(), 2.0 / dt);
        let a_nav = scale(sub(next.v, cur.v), 1.0 / dt);
        let specific = cur.q.rotate_inv(sub(a_nav, wc.gravity));
        let mag_true = cur.q.rotate_inv(wc.mag_local);
        let gyro = add(add(omega, gyro_bias), gaussian3(noise.gyro_sigma, rng));
        let accel = add(add(specific, accel_bias), gaussian3(noise.accel_sigma, rng));
        let mag = add(mag_true, gaussian3(noise.mag_sigma, rng));
        samples.push(ImuSample {
            t: cur.t,
            gyro,
            accel,
            mag,
            truth: *cur,
        });
        gyro_bias = add(gyro_bias, gaussian3(noise.gyro_bias_walk_sigma, rng));
        accel_bias = add(accel_bias, gaussian3(noise.accel_bias_walk_sigma, rng));
    }
    Ok(ImuSequence {
        samples,
        rate_hz: 1.0 / dt,
        meta: SequenceMeta::default(),
    })
}

/// Classical strapdown integration with zero assumed biases.
///
/// Estimate `k` is the state before applying sample `k`, so estimate 0 is
/// `initial` and the trajectory has one entry per sample.
pub fn dead_reckon(
    seq: &ImuSequence,
    initial: &Pose,
    use_mag_correction: bool,
    wc: &WorldConstants,
) -> Result<TrajectoryEstimate> {
    if seq.is_empty() {
        return Err(Error::InsufficientData(
            "dead reckoning needs at least one sample".into(),
        ));
    }
    let wc = WorldConstants {
        dt: seq.dt(),
        ..*wc
    };
    let mut state = *initial;
    let mut est = Vec::with_capacity(seq.len());
    for s in &seq.samples {
        est.push(state.p);
        let corr = if use_mag_correction {
            accel_mag_correction(s.accel, s.mag, state.q, &wc)
        } else {
            [0.0; 3]
        };
        let (p, v) = position_step(&state, s.accel, [0.0; 3], &wc);
        state.q = attitude_step(state.q, s.gyro, [0.0; 3], corr, &wc);
        state.p = p;
        state.v = v;
    }
    TrajectoryEstimate::new(seq.timestamps(), est, seq.true_positions())
}
