//! Quaternion algebra, strapdown attitude/position dynamics and the
//! quaternion loss.
//!
//! Conventions: Hamilton product, scalar-first storage, and
//! `rotmat(q)` maps body-frame vectors into the navigation frame
//! (`R_nb`). The navigation-to-body rotation is its transpose (`R_bn`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Below this rotation-vector norm `quat_exp` switches to its series form.
pub const EXP_SERIES_THRESHOLD: f64 = 1e-8;
/// Default clamp margin of the quaternion loss.
pub const QUAT_LOSS_EPS: f64 = 1e-7;

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, c: f64) -> Vec3 {
    [a[0] * c, a[1] * c, a[2] * c]
}

pub fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    (n > 0.0 && n.is_finite()).then(|| scale(a, 1.0 / n))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn vector(self) -> Vec3 {
        [self.x, self.y, self.z]
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let Some(u) = normalize(axis) else {
            return Self::IDENTITY;
        };
        let (s, c) = (angle / 2.0).sin_cos();
        Self::new(c, s * u[0], s * u[1], s * u[2])
    }

    /// Yaw-pitch-roll (z-y-x intrinsic) attitude.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        let qz = Self::from_axis_angle([0.0, 0.0, 1.0], yaw);
        let qy = Self::from_axis_angle([0.0, 1.0, 0.0], pitch);
        let qx = Self::from_axis_angle([1.0, 0.0, 0.0], roll);
        qz.mul(qy).mul(qx)
    }

    pub fn dot(self, o: Self) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(self, c: f64) -> Self {
        Self::new(self.w * c, self.x * c, self.y * c, self.z * c)
    }

    pub fn normalized(self) -> Self {
        self.scaled(1.0 / self.norm())
    }

    /// Representative with non-negative scalar part.
    pub fn canonical(self) -> Self {
        if self.w < 0.0 {
            self.scaled(-1.0)
        } else {
            self
        }
    }

    pub fn conj(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self ⊙ k`.
    pub fn mul(self, k: Self) -> Self {
        let (j1, j2, j3, j4) = (self.w, self.x, self.y, self.z);
        let (k1, k2, k3, k4) = (k.w, k.x, k.y, k.z);
        Self::new(
            j1 * k1 - j2 * k2 - j3 * k3 - j4 * k4,
            j1 * k2 + j2 * k1 + j3 * k4 - j4 * k3,
            j1 * k3 - j2 * k4 + j3 * k1 + j4 * k2,
            j1 * k4 + j2 * k3 - j3 * k2 + j4 * k1,
        )
    }

    /// `(cos|v|, sin|v| v/|v|)`; the represented rotation angle is `2|v|`.
    pub fn exp(v: Vec3) -> Self {
        let theta = norm(v);
        if theta < EXP_SERIES_THRESHOLD {
            let t2 = theta * theta;
            let s = 1.0 - t2 / 6.0;
            return Self::new(1.0 - t2 / 2.0, s * v[0], s * v[1], s * v[2]);
        }
        let (s, c) = theta.sin_cos();
        let k = s / theta;
        Self::new(c, k * v[0], k * v[1], k * v[2])
    }

    /// Inverse of [`Quaternion::exp`] for unit quaternions.
    pub fn log(self) -> Vec3 {
        let v = self.vector();
        let s = norm(v);
        if s < EXP_SERIES_THRESHOLD {
            return scale(v, 1.0 / self.w);
        }
        let theta = s.atan2(self.w);
        scale(v, theta / s)
    }

    /// Body-to-navigation rotation matrix. Non-unit inputs are normalized
    /// and reported on the `log` warning channel.
    pub fn to_rotmat(self) -> Mat3 {
        let n = self.norm();
        let q = if (n - 1.0).abs() > 1e-6 {
            log::warn!("normalizing non-unit quaternion (|q| = {n})");
            self.scaled(1.0 / n)
        } else {
            self
        };
        q.rotmat_unchecked()
    }

    /// As [`Quaternion::to_rotmat`] but rejects inputs with `||q| - 1| > 1e-6`.
    pub fn to_rotmat_strict(self) -> Result<Mat3> {
        let n = self.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("quaternion norm {n} is not unit")));
        }
        Ok(self.rotmat_unchecked())
    }

    fn rotmat_unchecked(self) -> Mat3 {
        let Self { w, x, y, z } = self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Body → navigation.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        mat_vec(&self.to_rotmat(), v)
    }

    /// Navigation → body.
    pub fn rotate_inv(self, v: Vec3) -> Vec3 {
        mat_t_vec(&self.to_rotmat(), v)
    }

    /// Rotation angle between two attitudes, insensitive to the double cover.
    pub fn angle_to(self, o: Self) -> f64 {
        let d = (self.dot(o) / (self.norm() * o.norm())).abs().min(1.0);
        2.0 * d.acos()
    }

    /// `min(|a - b|, |a + b|)` over components.
    pub fn cover_distance(self, o: Self) -> f64 {
        let a = self.to_array();
        let b = o.to_array();
        let minus: f64 = (0..4).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
        let plus: f64 = (0..4).map(|i| (a[i] + b[i]).powi(2)).sum::<f64>().sqrt();
        minus.min(plus)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub p: Vec3,
    pub v: Vec3,
    pub q: Quaternion,
    pub t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConstants {
    /// Gravity in the navigation frame, m/s².
    pub gravity: Vec3,
    /// Unit local magnetic field direction in the navigation frame.
    pub mag_local: Vec3,
    /// Sample interval, s.
    pub dt: f64,
    /// Gain of [`accel_mag_correction`].
    pub correction_gain: f64,
}

impl Default for WorldConstants {
    fn default() -> Self {
        let dip = 60f64.to_radians();
        Self {
            gravity: [0.0, 0.0, -9.81],
            mag_local: [dip.cos(), 0.0, -dip.sin()],
            dt: 0.01,
            correction_gain: 1.0,
        }
    }
}

impl WorldConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::config(format!(
                "sample interval {} must be positive",
                self.dt
            )));
        }
        if (norm(self.mag_local) - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "local magnetic direction must be a unit vector",
            ));
        }
        Ok(())
    }
}

/// One step of the position dynamics; returns the next `(p, v)`.
///
/// `p' = p + dt v + dt²/2 a_n`, `v' = v + dt a_n` with
/// `a_n = R_nb (accel - bias) + g`.
pub fn position_step(
    pose: &Pose,
    accel_meas: Vec3,
    accel_bias: Vec3,
    wc: &WorldConstants,
) -> (Vec3, Vec3) {
    let a_n = add(pose.q.rotate(sub(accel_meas, accel_bias)), wc.gravity);
    let dt = wc.dt;
    let p = add(add(pose.p, scale(pose.v, dt)), scale(a_n, dt * dt / 2.0));
    let v = add(pose.v, scale(a_n, dt));
    (p, v)
}

/// `q ⊙ exp(dt/2 (gyro - bias)) ⊙ exp(dt/2 corr)`, renormalized with `w >= 0`.
pub fn attitude_step(
    q: Quaternion,
    gyro_meas: Vec3,
    gyro_bias: Vec3,
    corr: Vec3,
    wc: &WorldConstants,
) -> Quaternion {
    let h = wc.dt / 2.0;
    q.mul(Quaternion::exp(scale(sub(gyro_meas, gyro_bias), h)))
        .mul(Quaternion::exp(scale(corr, h)))
        .normalized()
        .canonical()
}

/// Complementary-filter correction rate from the accelerometer and
/// magnetometer: `gain (â × ĝ_pred + m̂ × m_pred)` in the body frame.
/// Returns zero when either measurement has zero magnitude.
pub fn accel_mag_correction(
    accel_meas: Vec3,
    mag_meas: Vec3,
    q: Quaternion,
    wc: &WorldConstants,
) -> Vec3 {
    let (Some(a), Some(m)) = (normalize(accel_meas), normalize(mag_meas)) else {
        return [0.0; 3];
    };
    let Some(up) = normalize(scale(wc.gravity, -1.0)) else {
        return [0.0; 3];
    };
    let g_pred = q.rotate_inv(up);
    let m_pred = q.rotate_inv(wc.mag_local);
    scale(add(cross(a, g_pred), cross(m, m_pred)), wc.correction_gain)
}

/// Mean clamped angle `arccos(clamp(<q1, q2>, -1 + eps, 1 - eps))` over a batch.
pub fn quaternion_loss(q1: &[Quaternion], q2: &[Quaternion], eps: f64) -> Result<f64> {
    if q1.len() != q2.len() {
        return Err(Error::dim(format!(
            "batches of {} and {} quaternions",
            q1.len(),
            q2.len()
        )));
    }
    if q1.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = q1
        .iter()
        .zip(q2)
        .map(|(a, b)| a.dot(*b).clamp(-1.0 + eps, 1.0 - eps).acos())
        .sum();
    Ok(total / q1.len() as f64)
}

/// Differentiable quaternion loss over `[N, 4]` batches recorded on `g`.
pub fn quaternion_loss_graph(g: &mut Graph, q1: Var, q2: Var, eps: f64) -> Result<Var> {
    let s1 = g.shape(q1).to_vec();
    if s1.len() != 2 || s1[1] != 4 || g.shape(q2) != s1.as_slice() {
        return Err(Error::dim(format!(
            "quaternion batches {:?} and {:?}",
            s1,
            g.shape(q2)
        )));
    }
    let prod = g.mul(q1, q2)?;
    let inner = g.sum_last(prod)?;
    let clamped = g.clamp(inner, -1.0 + eps, 1.0 - eps)?;
    let angles = g.acos(clamped);
    Ok(g.mean(angles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(7)
    }

    fn random_unit(r: &mut impl Rng) -> Quaternion {
        Quaternion::new(
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
        )
        .normalized()
    }

    fn mat_close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() <= tol))
    }

    // Rodrigues formula for exp of a skew matrix; rotation angle |w|.
    fn rodrigues(w: Vec3) -> Mat3 {
        let th = norm(w);
        let k = scale(w, 1.0 / th);
        let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
        let kx2 = mat_mul(&kx, &kx);
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = f64::from(u8::from(i == j))
                    + th.sin() * kx[i][j]
                    + (1.0 - th.cos()) * kx2[i][j];
            }
        }
        r
    }

    #[test]
    fn mul_identity_and_basis() {
        let q = Quaternion::new(0.3, -0.2, 0.5, 0.1);
        assert_eq!(Quaternion::IDENTITY.mul(q), q);
        let i = Quaternion::new(0.0, 1.0, 0.0, 0.0);
        let j = Quaternion::new(0.0, 0.0, 1.0, 0.0);
        assert_eq!(i.mul(j), Quaternion::new(0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn mul_matches_rotation_composition() {
        let mut r = rng();
        for _ in 0..200 {
            let (a, b) = (random_unit(&mut r), random_unit(&mut r));
            let lhs = a.mul(b).to_rotmat();
            let rhs = mat_mul(&a.to_rotmat(), &b.to_rotmat());
            assert!(mat_close(&lhs, &rhs, 1e-9));
        }
    }

    #[test]
    fn mul_associative_and_norm_multiplicative() {
        let mut r = rng();
        for _ in 0..200 {
            let s = r.random_range(0.2..3.0);
            let (a, b, c) = (
                random_unit(&mut r).scaled(s),
                random_unit(&mut r),
                random_unit(&mut r).scaled(1.0 / s),
            );
            let l = a.mul(b).mul(c).to_array();
            let rr = a.mul(b.mul(c)).to_array();
            assert!((0..4).all(|i| (l[i] - rr[i]).abs() <= 1e-12));
            assert!((a.mul(b).norm() - a.norm() * b.norm()).abs() <= 1e-12);
        }
    }

    #[test]
    fn exp_values() {
        assert_eq!(Quaternion::exp([0.0; 3]), Quaternion::IDENTITY);
        let q = Quaternion::exp([FRAC_PI_2, 0.0, 0.0]);
        assert!(q.cover_distance(Quaternion::new(0.0, 1.0, 0.0, 0.0)) < 1e-15);
        let tiny = Quaternion::exp([1e-10, -2e-10, 3e-10]);
        assert_eq!(tiny.to_array(), [1.0, 1e-10, -2e-10, 3e-10]);
    }

    #[test]
    fn exp_matches_matrix_exponential() {
        let mut r = rng();
        for _ in 0..200 {
            let v: Vec3 = [
                r.random_range(-0.3..0.3),
                r.random_range(-0.3..0.3),
                r.random_range(-0.3..0.3),
            ];
            // exp(v) rotates by 2|v| about v.
            let lhs = Quaternion::exp(v).to_rotmat();
            assert!(mat_close(&lhs, &rodrigues(scale(v, 2.0)), 1e-9));
            let back = Quaternion::exp(v).log();
            assert!(norm(sub(back, v)) < 1e-12);
        }
    }

    #[test]
    fn rotmat_properties() {
        let id = Quaternion::IDENTITY.to_rotmat();
        assert!(mat_close(
            &id,
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            0.0
        ));
        let h = 0.5f64.sqrt();
        let yaw90 = Quaternion::new(h, 0.0, 0.0, h);
        let v = yaw90.rotate([1.0, 0.0, 0.0]);
        assert!(norm(sub(v, [0.0, 1.0, 0.0])) < 1e-15);
        let mut r = rng();
        for _ in 0..200 {
            let m = random_unit(&mut r).to_rotmat();
            let mtm = mat_mul(&transpose(&m), &m);
            assert!(mat_close(
                &mtm,
                &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                1e-9
            ));
            assert!((det(&m) - 1.0).abs() < 1e-9);
        }
        assert!(Quaternion::new(2.0, 0.0, 0.0, 0.0)
            .to_rotmat_strict()
            .is_err());
        let m = Quaternion::new(2.0, 0.0, 0.0, 0.0).to_rotmat();
        assert!(mat_close(&m, &id, 1e-15));
    }

    #[test]
    fn position_step_stationary_and_kinematic() {
        let wc = WorldConstants::default();
        let mut r = rng();
        let q = random_unit(&mut r);
        let pose = Pose {
            p: [1.0, 2.0, 3.0],
            v: [0.0; 3],
            q,
            t: 0.0,
        };
        let accel = scale(q.rotate_inv(wc.gravity), -1.0);
        let (p, v) = position_step(&pose, accel, [0.0; 3], &wc);
        assert!(norm(sub(p, pose.p)) < 1e-15);
        assert!(norm(v) < 1e-15);

        // a_n = (1, 0, 0) with identity attitude.
        let level = Pose {
            q: Quaternion::IDENTITY,
            ..Pose::default()
        };
        let accel = [1.0, 0.0, 9.81];
        let (p, _) = position_step(&level, accel, [0.0; 3], &wc);
        assert!((p[0] - 5e-5).abs() < 1e-18 && p[1] == 0.0 && p[2].abs() < 1e-18);
    }

    #[test]
    fn position_step_closed_form_discrete_sum() {
        let wc = WorldConstants::default();
        let mut pose = Pose::default();
        let accel = [1.0, 0.0, 9.81];
        for _ in 0..100 {
            let (p, v) = position_step(&pose, accel, [0.0; 3], &wc);
            pose.p = p;
            pose.v = v;
        }
        // sum_{k<n} (dt v_k + dt²/2 a) with v_k = k dt a  =  a (n dt)² / 2 exactly.
        let n = 100.0;
        let expected = 0.5 * (n * wc.dt).powi(2);
        assert!(
            (pose.p[0] - expected).abs() < 1e-12,
            "{} vs {expected}",
            pose.p[0]
        );
    }

    #[test]
    fn attitude_step_cases() {
        let wc = WorldConstants::default();
        let mut r = rng();
        let q = random_unit(&mut r).canonical();
        let same = attitude_step(q, [0.0; 3], [0.0; 3], [0.0; 3], &wc);
        assert!(same.cover_distance(q) < 1e-15);

        for (rate, angle) in [(PI, PI), (FRAC_PI_2, FRAC_PI_2)] {
            let mut q = Quaternion::IDENTITY;
            for _ in 0..100 {
                q = attitude_step(q, [0.0, 0.0, rate], [0.0; 3], [0.0; 3], &wc);
            }
            let expected = Quaternion::from_axis_angle([0.0, 0.0, 1.0], angle);
            assert!(q.angle_to(expected) < 1e-6, "rate {rate}");
        }

        for _ in 0..100 {
            let g: Vec3 = [
                r.random_range(-5.0..5.0),
                r.random_range(-5.0..5.0),
                r.random_range(-5.0..5.0),
            ];
            let c: Vec3 = [
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            ];
            let out = attitude_step(random_unit(&mut r), g, [0.01, 0.0, -0.02], c, &wc);
            assert!((out.norm() - 1.0).abs() <= 1e-12);
            assert!(out.w >= 0.0);
        }
    }

    #[test]
    fn correction_zero_when_consistent() {
        let wc = WorldConstants::default();
        let mut r = rng();
        for _ in 0..50 {
            let q = random_unit(&mut r);
            let accel = scale(q.rotate_inv(wc.gravity), -1.0);
            let mag = q.rotate_inv(wc.mag_local);
            let c = accel_mag_correction(accel, mag, q, &wc);
            assert!(norm(c) < 1e-12);
        }
        assert_eq!(
            accel_mag_correction([0.0, 0.0, 9.81], [0.0; 3], Quaternion::IDENTITY, &wc),
            [0.0; 3]
        );
        assert_eq!(
            accel_mag_correction([0.0; 3], [1.0, 0.0, 0.0], Quaternion::IDENTITY, &wc),
            [0.0; 3]
        );
    }

    #[test]
    fn correction_reduces_small_errors() {
        let wc = WorldConstants::default();
        let mut r = rng();
        for _ in 0..100 {
            let truth = random_unit(&mut r);
            let axis: Vec3 = [
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            ];
            let est = truth
                .mul(Quaternion::from_axis_angle(axis, 0.1))
                .canonical();
            let accel = scale(truth.rotate_inv(wc.gravity), -1.0);
            let mag = truth.rotate_inv(wc.mag_local);
            let corr = accel_mag_correction(accel, mag, est, &wc);
            let next = attitude_step(est, [0.0; 3], [0.0; 3], corr, &wc);
            assert!(next.angle_to(truth) < est.angle_to(truth));
        }
    }

    #[test]
    fn loss_closed_forms() {
        let eps = QUAT_LOSS_EPS;
        let q = Quaternion::from_axis_angle([1.0, 2.0, 3.0], 0.7);
        let same = quaternion_loss(&[q], &[q], eps).unwrap();
        assert!((same - (1.0 - eps).acos()).abs() < 1e-9);
        assert!((same - 4.47e-4).abs() < 1e-6);
        let opp = quaternion_loss(&[q], &[q.scaled(-1.0)], eps).unwrap();
        assert!((opp - (-1.0 + eps).acos()).abs() < 1e-9);
        let h = 0.5f64.sqrt();
        let yaw = quaternion_loss(
            &[Quaternion::IDENTITY],
            &[Quaternion::new(h, 0.0, 0.0, h)],
            eps,
        )
        .unwrap();
        assert!((yaw - PI / 4.0).abs() < 1e-12);
        assert!(matches!(
            quaternion_loss(&[], &[], eps),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn loss_symmetry_and_left_invariance() {
        let mut r = rng();
        for _ in 0..100 {
            let a: Vec<_> = (0..5).map(|_| random_unit(&mut r)).collect();
            let b: Vec<_> = (0..5).map(|_| random_unit(&mut r)).collect();
            let rot = random_unit(&mut r);
            let l = quaternion_loss(&a, &b, QUAT_LOSS_EPS).unwrap();
            assert_eq!(l, quaternion_loss(&b, &a, QUAT_LOSS_EPS).unwrap());
            let ra: Vec<_> = a.iter().map(|q| rot.mul(*q)).collect();
            let rb: Vec<_> = b.iter().map(|q| rot.mul(*q)).collect();
            assert!((quaternion_loss(&ra, &rb, QUAT_LOSS_EPS).unwrap() - l).abs() <= 1e-9);
        }
    }

    #[test]
    fn loss_graph_matches_value_and_finite_differences() {
        let mut r = rng();
        let a: Vec<_> = (0..4).map(|_| random_unit(&mut r)).collect();
        let b: Vec<_> = a
            .iter()
            .map(|q| q.mul(Quaternion::from_axis_angle([1.0, -1.0, 0.5], 0.8)))
            .collect();
        let flat = |qs: &[Quaternion]| {
            Tensor::new(
                &[qs.len(), 4],
                qs.iter().flat_map(|q| q.to_array()).collect(),
            )
            .unwrap()
        };
        let eval = |t1: &Tensor| {
            let mut g = Graph::new();
            let v1 = g.param(t1.clone());
            let v2 = g.constant(flat(&b));
            let l = quaternion_loss_graph(&mut g, v1, v2, QUAT_LOSS_EPS).unwrap();
            (g.value(l).item(), g, v1, l)
        };
        let t1 = flat(&a);
        let (val, mut g, v1, l) = eval(&t1);
        assert!((val - quaternion_loss(&a, &b, QUAT_LOSS_EPS).unwrap()).abs() < 1e-14);
        g.backward(l).unwrap();
        let grad = g.grad(v1).unwrap().clone();
        let h = 1e-5;
        for i in 0..t1.numel() {
            let mut p = t1.clone();
            p.data_mut()[i] += h;
            let mut m = t1.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(&p).0 - eval(&m).0) / (2.0 * h);
            let an = grad.data()[i];
            assert!(
                (fd - an).abs() <= 1e-4 * an.abs().max(1e-3),
                "{i}: {fd} vs {an}"
            );
        }
    }
}
