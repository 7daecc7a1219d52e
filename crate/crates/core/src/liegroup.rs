//! SO(3), SE(3) and Sim(3) group operations.
//!
//! Tangent vectors are ordered `[upsilon (3), omega (3), sigma (1)]`, i.e. the
//! translational part first, then the axis-angle rotation, then log-scale.
//! Increments are applied on the left: `P <- exp(delta) * P`.
//!
//! Poses used throughout the crate map world coordinates into the camera
//! frame (world-to-camera) unless stated otherwise.

use nalgebra::{Matrix3, Matrix4, Quaternion, SMatrix, SVector, UnitQuaternion, Vector3};
use thiserror::Error;

pub type Vector6 = SVector<f64, 6>;
pub type Vector7 = SVector<f64, 7>;
pub type Matrix6 = SMatrix<f64, 6, 6>;
pub type Matrix7 = SMatrix<f64, 7, 7>;

/// Below this rotation angle (or log-scale magnitude) closed forms switch to series.
pub const SMALL_ANGLE: f64 = 1e-8;
/// `log` refuses rotations within this margin of pi.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

// Region in (theta, sigma) where the coupled V matrix is evaluated by its power series.
const SERIES_RADIUS: f64 = 1e-2;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum LieError {
    #[error("rotation angle {angle} rad is too close to pi for a unique logarithm")]
    AngleNearPi { angle: f64 },
}

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let (w, k) = if theta < SMALL_ANGLE {
        (1.0 - theta_sq / 8.0, 0.5 - theta_sq / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    UnitQuaternion::new_normalize(Quaternion::new(w, k * omega.x, k * omega.y, k * omega.z))
}

pub fn so3_log(q: &UnitQuaternion<f64>) -> Result<Vector3<f64>, LieError> {
    let q = q.quaternion();
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = v.norm();
    let angle = 2.0 * n.atan2(w);
    if angle >= std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(LieError::AngleNearPi { angle });
    }
    let k = if n < SMALL_ANGLE {
        // 2 atan(n / w) / n
        2.0 / w * (1.0 - n * n / (3.0 * w * w))
    } else {
        angle / n
    };
    Ok(v * k)
}

/// `W(omega, sigma) = integral_0^1 exp(tau * (sigma I + hat(omega))) dtau`.
///
/// Maps the translational tangent component onto the group translation.
pub fn sim3_v_matrix(omega: &Vector3<f64>, sigma: f64) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let omega_hat = hat(omega);

    if theta < SERIES_RADIUS && sigma.abs() < SERIES_RADIUS {
        let m = Matrix3::identity() * sigma + omega_hat;
        let mut term = Matrix3::identity();
        let mut sum = Matrix3::identity();
        for n in 1..10 {
            term = term * m / (n as f64 + 1.0);
            sum += term;
        }
        return sum;
    }

    let a = if sigma.abs() < SMALL_ANGLE {
        1.0 + sigma / 2.0 + sigma * sigma / 6.0
    } else {
        sigma.exp_m1() / sigma
    };

    let (b, c) = if theta < SMALL_ANGLE {
        // theta -> 0 limits; |sigma| >= SERIES_RADIUS here.
        let es = sigma.exp();
        let s2 = sigma * sigma;
        let b = ((sigma - 1.0) * es + 1.0) / s2;
        let c = (es * (s2 - 2.0 * sigma + 2.0) - 2.0) / (2.0 * s2 * sigma);
        (b, c)
    } else {
        let es = sigma.exp();
        let (st, ct) = theta.sin_cos();
        let denom = sigma * sigma + theta_sq;
        let int_sin = (es * (sigma * st - theta * ct) + theta) / denom;
        let int_cos = (es * (sigma * ct + theta * st) - sigma) / denom;
        (int_sin / theta, (a - int_cos) / theta_sq)
    };

    Matrix3::identity() * a + omega_hat * b + omega_hat * omega_hat * c
}

/// Tangent vector of Sim(3): `(upsilon, omega, sigma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Tangent {
    pub upsilon: Vector3<f64>,
    pub omega: Vector3<f64>,
    pub sigma: f64,
}

impl Sim3Tangent {
    pub fn new(upsilon: Vector3<f64>, omega: Vector3<f64>, sigma: f64) -> Self {
        Self {
            upsilon,
            omega,
            sigma,
        }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros(), 0.0)
    }

    pub fn from_vector(v: &Vector7) -> Self {
        Self::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
            v[6],
        )
    }

    pub fn to_vector(&self) -> Vector7 {
        let u = &self.upsilon;
        let w = &self.omega;
        Vector7::from_column_slice(&[u.x, u.y, u.z, w.x, w.y, w.z, self.sigma])
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }

    /// Matrix of the Lie bracket `[self, .]` in tangent coordinates.
    pub fn ad(&self) -> Matrix7 {
        let mut m = Matrix7::zeros();
        let w_hat = hat(&self.omega);
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(w_hat + Matrix3::identity() * self.sigma));
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat(&self.upsilon));
        m.fixed_view_mut::<3, 1>(0, 6).copy_from(&(-self.upsilon));
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&w_hat);
        m
    }
}

/// Left Jacobian `sum_n ad^n / (n+1)!`, so that
/// `exp(xi + d) ~= exp(J_l(xi) d) exp(xi)`.
pub fn sim3_left_jacobian(xi: &Sim3Tangent) -> Matrix7 {
    let ad = xi.ad();
    let mut term = Matrix7::identity();
    let mut sum = Matrix7::identity();
    for n in 1..80 {
        term = term * ad / (n as f64 + 1.0);
        sum += term;
        if term.amax() < 1e-18 * sum.amax() {
            break;
        }
    }
    sum
}

/// Inverse left Jacobian: `log(exp(d) exp(xi)) ~= xi + J_l^{-1}(xi) d`.
pub fn sim3_left_jacobian_inverse(xi: &Sim3Tangent) -> Matrix7 {
    let jl = sim3_left_jacobian(xi);
    jl.lu().try_inverse().unwrap_or_else(Matrix7::identity)
}

/// 7-DoF similarity transform acting as `x -> scale * R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Default for Sim3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>, scale: f64) -> Self {
        assert!(
            scale > 0.0 && scale.is_finite(),
            "Sim3 scale must be positive and finite, got {scale}"
        );
        Self {
            rotation,
            translation,
            scale,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros(), 1.0)
    }

    pub fn from_se3(p: &SE3Pose) -> Self {
        Self::new(p.rotation, p.translation, 1.0)
    }

    /// Drops the scale component.
    pub fn to_se3(&self) -> SE3Pose {
        SE3Pose::new(self.rotation, self.translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rotation_matrix() * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn exp(xi: &Sim3Tangent) -> Self {
        let rotation = so3_exp(&xi.omega);
        let translation = sim3_v_matrix(&xi.omega, xi.sigma) * xi.upsilon;
        Self::new(rotation, translation, xi.sigma.exp())
    }

    pub fn log(&self) -> Result<Sim3Tangent, LieError> {
        let omega = so3_log(&self.rotation)?;
        let sigma = self.scale.ln();
        let v = sim3_v_matrix(&omega, sigma);
        let upsilon = v
            .lu()
            .solve(&self.translation)
            .unwrap_or_else(|| self.translation);
        Ok(Sim3Tangent::new(upsilon, omega, sigma))
    }

    pub fn compose(&self, other: &Sim3Pose) -> Sim3Pose {
        let rotation = UnitQuaternion::new_normalize((self.rotation * other.rotation).into_inner());
        Sim3Pose {
            rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
            scale: self.scale * other.scale,
        }
    }

    pub fn inverse(&self) -> Sim3Pose {
        let rot_inv = self.rotation.inverse();
        let s_inv = 1.0 / self.scale;
        Sim3Pose {
            rotation: rot_inv,
            translation: -s_inv * (rot_inv * self.translation),
            scale: s_inv,
        }
    }

    pub fn act(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }

    /// Adjoint such that `P exp(xi) P^{-1} = exp(Ad_P xi)`.
    pub fn adjoint(&self) -> Matrix7 {
        let r = self.rotation_matrix();
        let mut m = Matrix7::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r * self.scale));
        m.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * r));
        m.fixed_view_mut::<3, 1>(0, 6).copy_from(&(-self.translation));
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        m[(6, 6)] = 1.0;
        m
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Camera centre when `self` is a world-to-camera pose.
    pub fn camera_center(&self) -> Vector3<f64> {
        self.inverse().translation
    }
}

impl std::ops::Mul for Sim3Pose {
    type Output = Sim3Pose;
    fn mul(self, rhs: Sim3Pose) -> Sim3Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul for &Sim3Pose {
    type Output = Sim3Pose;
    fn mul(self, rhs: &Sim3Pose) -> Sim3Pose {
        self.compose(rhs)
    }
}

/// Rigid transform; all operations are the scale-1 restriction of [`Sim3Pose`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    pub fn to_sim3(&self) -> Sim3Pose {
        Sim3Pose::from_se3(self)
    }

    /// Tangent ordering `[upsilon, omega]`.
    pub fn exp(xi: &Vector6) -> Self {
        let t = Sim3Tangent::new(
            Vector3::new(xi[0], xi[1], xi[2]),
            Vector3::new(xi[3], xi[4], xi[5]),
            0.0,
        );
        Sim3Pose::exp(&t).to_se3()
    }

    pub fn log(&self) -> Result<Vector6, LieError> {
        let t = self.to_sim3().log()?;
        let (u, w) = (t.upsilon, t.omega);
        Ok(Vector6::from_column_slice(&[u.x, u.y, u.z, w.x, w.y, w.z]))
    }

    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        self.to_sim3().compose(&other.to_sim3()).to_se3()
    }

    pub fn inverse(&self) -> SE3Pose {
        self.to_sim3().inverse().to_se3()
    }

    pub fn act(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.to_sim3().act(x)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, LN_2};

    fn matrix_exp_series(m: &Matrix4<f64>, terms: usize) -> Matrix4<f64> {
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for n in 1..terms {
            term = term * m / n as f64;
            sum += term;
        }
        sum
    }

    fn generator(xi: &Sim3Tangent) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(hat(&xi.omega) + Matrix3::identity() * xi.sigma));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.upsilon);
        m
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = Sim3Pose::exp(&Sim3Tangent::zero());
        assert_eq!(p.translation, Vector3::zeros());
        assert_eq!(p.scale, 1.0);
        assert!(p.rotation.angle() < 1e-15);
    }

    #[test]
    fn pure_rotation_about_z() {
        let p = Sim3Pose::exp(&Sim3Tangent::new(
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, FRAC_PI_2),
            0.0,
        ));
        let x = p.act(&Vector3::new(1.0, 0.0, 0.0));
        assert!((x - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert_eq!(p.scale, 1.0);
        assert!(p.translation.norm() < 1e-15);
    }

    #[test]
    fn exp_with_scale_matches_matrix_series() {
        let xi = Sim3Tangent::new(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros(), LN_2);
        let p = Sim3Pose::exp(&xi);
        let oracle = matrix_exp_series(&generator(&xi), 20);
        assert!((p.scale - 2.0).abs() < 1e-12);
        // With R = I the V matrix reduces to (e^sigma - 1) / sigma = 1 / ln 2.
        assert!((p.translation.x - oracle[(0, 3)]).abs() < 1e-10);
        assert!((p.translation.x - 1.0 / LN_2).abs() < 1e-12);
        assert!(p.translation.y.abs() < 1e-15 && p.translation.z.abs() < 1e-15);
    }

    #[test]
    fn exp_matches_matrix_series_for_generic_tangent() {
        let xi = Sim3Tangent::new(
            Vector3::new(0.3, -1.2, 0.7),
            Vector3::new(0.4, 0.9, -0.5),
            -0.35,
        );
        let p = Sim3Pose::exp(&xi).to_matrix();
        let oracle = matrix_exp_series(&generator(&xi), 40);
        assert!((p - oracle).amax() < 1e-12);
    }

    #[test]
    fn log_of_identity_and_pure_scale() {
        let z = Sim3Pose::identity().log().unwrap();
        assert_eq!(z.to_vector(), Vector7::zeros());
        let s = Sim3Pose::new(UnitQuaternion::identity(), Vector3::zeros(), 2.0)
            .log()
            .unwrap();
        assert!((s.sigma - LN_2).abs() < 1e-15);
        assert!(s.upsilon.norm() < 1e-15 && s.omega.norm() < 1e-15);
    }

    #[test]
    fn log_rejects_angle_near_pi() {
        let p = Sim3Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI),
            Vector3::zeros(),
            1.0,
        );
        assert!(matches!(p.log(), Err(LieError::AngleNearPi { .. })));
    }

    #[test]
    fn action_examples() {
        let x = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(Sim3Pose::identity().act(&x), x);
        let p = Sim3Pose::new(UnitQuaternion::identity(), Vector3::new(1.0, 0.0, 0.0), 2.0);
        assert_eq!(p.act(&Vector3::new(1.0, 0.0, 0.0)), Vector3::new(3.0, 0.0, 0.0));
    }

    #[test]
    fn inverse_fields() {
        let p = Sim3Pose::new(
            UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
            Vector3::new(1.0, -2.0, 0.5),
            4.0,
        );
        let inv = p.inverse();
        assert!((inv.scale - 0.25).abs() < 1e-15);
        let expected_t = -(1.0 / 4.0) * (p.rotation_matrix().transpose() * p.translation);
        assert!((inv.translation - expected_t).norm() < 1e-14);
    }

    #[test]
    fn small_tangent_matches_taylor() {
        let xi = Sim3Tangent::new(
            Vector3::new(0.4, -0.2, 0.9),
            Vector3::new(3e-9, -2e-9, 5e-9),
            -4e-9,
        );
        let p = Sim3Pose::exp(&xi);
        let r = p.rotation_matrix();
        let r_taylor = Matrix3::identity() + hat(&xi.omega);
        assert!((r - r_taylor).amax() < 1e-12);
        assert!((p.scale - (1.0 + xi.sigma)).abs() < 1e-12);
        let t_taylor = xi.upsilon + xi.omega.cross(&xi.upsilon) / 2.0 + xi.upsilon * xi.sigma / 2.0;
        assert!((p.translation - t_taylor).norm() < 1e-12);
        let back = p.log().unwrap();
        assert!((back.to_vector() - xi.to_vector()).amax() < 1e-12);
        assert!(back.to_vector().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn v_matrix_continuous_across_branches() {
        let omega_dir = Vector3::new(0.2, -0.5, 0.84).normalize();
        for &sigma in &[0.0, 1e-9, 5e-3, 0.02, -0.7] {
            for &theta in &[0.0, 1e-9, 1e-7, 9.9e-3, 1.01e-2, 0.3] {
                let omega = omega_dir * theta;
                let v = sim3_v_matrix(&omega, sigma);
                let xi = Sim3Tangent::new(Vector3::zeros(), omega, sigma);
                let mut gen = generator(&xi);
                gen.fixed_view_mut::<3, 1>(0, 3).fill(0.0);
                // W = sum M^n / (n+1)!
                let m = gen.fixed_view::<3, 3>(0, 0).into_owned();
                let mut term = Matrix3::identity();
                let mut oracle = Matrix3::identity();
                for n in 1..40 {
                    term = term * m / (n as f64 + 1.0);
                    oracle += term;
                }
                assert!(
                    (v - oracle).amax() < 1e-11,
                    "sigma={sigma} theta={theta} err={}",
                    (v - oracle).amax()
                );
            }
        }
    }

    #[test]
    fn adjoint_conjugates_exponential() {
        let p = Sim3Pose::exp(&Sim3Tangent::new(
            Vector3::new(0.5, 1.0, -0.2),
            Vector3::new(-0.3, 0.2, 0.6),
            0.4,
        ));
        let xi = Sim3Tangent::new(
            Vector3::new(0.01, -0.02, 0.03),
            Vector3::new(0.02, 0.01, -0.01),
            0.015,
        );
        let lhs = p * Sim3Pose::exp(&xi) * p.inverse();
        let rhs = Sim3Pose::exp(&Sim3Tangent::from_vector(&(p.adjoint() * xi.to_vector())));
        assert!((lhs.to_matrix() - rhs.to_matrix()).amax() < 1e-12);
    }

    #[test]
    fn left_jacobian_first_order() {
        let xi = Sim3Tangent::new(
            Vector3::new(0.8, -0.4, 0.3),
            Vector3::new(0.6, 0.9, -1.1),
            0.3,
        );
        let d = Vector7::from_column_slice(&[1e-6, -2e-6, 1e-6, 2e-6, 1e-6, -1e-6, 1.5e-6]);
        let p = Sim3Pose::exp(&Sim3Tangent::from_vector(&d)) * Sim3Pose::exp(&xi);
        let got = p.log().unwrap().to_vector();
        let predicted = xi.to_vector() + sim3_left_jacobian_inverse(&xi) * d;
        assert!((got - predicted).amax() < 1e-10);
    }

    #[test]
    fn se3_agrees_with_sim3_at_unit_scale() {
        let a = SE3Pose::exp(&Vector6::from_column_slice(&[0.1, 0.2, 0.3, 0.4, -0.5, 0.6]));
        let b = SE3Pose::exp(&Vector6::from_column_slice(&[-1.0, 0.5, 2.0, 0.1, 0.2, -0.3]));
        let x = Vector3::new(0.3, -0.7, 2.0);
        assert_eq!(a.compose(&b).to_sim3(), a.to_sim3().compose(&b.to_sim3()));
        assert_eq!(a.inverse().to_sim3(), a.to_sim3().inverse());
        assert_eq!(a.act(&x), a.to_sim3().act(&x));
        let l6 = a.log().unwrap();
        let l7 = a.to_sim3().log().unwrap().to_vector();
        assert_eq!(l6.as_slice(), &l7.as_slice()[..6]);
        assert_eq!(l7[6], 0.0);
    }
}
