//! Rigid-body geometry for a camera moving above a keypoint scene.
//!
//! Poses are camera-to-world transforms: `rotation` maps camera-frame
//! directions into the world frame and `translation` is the camera center in
//! world coordinates. Twists are always expressed in the current camera frame
//! and applied on the right.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Depth below which a point counts as behind (or on) the image plane.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self⁻¹ * other`: the pose of `other` expressed in this frame.
    pub fn relative_to_self(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    /// Maps a point given in this pose's local frame into the parent frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Maps a parent-frame point into this pose's local frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Same orientation, translation multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Pose {
        Pose::new(self.rotation, self.translation * k)
    }

    /// Checks the rotation is orthonormal with unit determinant.
    pub fn is_valid(&self, tol: f64) -> bool {
        let err = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let max = err.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        max < tol
            && (self.rotation.determinant() - 1.0).abs() < tol
            && self.translation.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub nu: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl Twist {
    pub fn new(nu: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Self { nu, omega }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            nu: Vector3::new(v[0], v[1], v[2]),
            omega: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.nu.x,
            self.nu.y,
            self.nu.z,
            self.omega.x,
            self.omega.y,
            self.omega.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.nu.iter().chain(self.omega.iter()).all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        (self.nu.norm_squared() + self.omega.norm_squared()).sqrt()
    }

    pub fn scale(&self, k: f64) -> Twist {
        Twist::new(self.nu * k, self.omega * k)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fx: 540.0,
            fy: 540.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!("invalid camera model {self:?}")));
        }
        Ok(())
    }

    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (self.fx * x + self.cx, self.fy * y + self.cy)
    }

    pub fn pixel_in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Exponential map of so(3): rotation by |phi| about phi/|phi|.
pub fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (a, b) = if theta < 1e-4 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Logarithm of SO(3) as a rotation vector θu with θ ∈ [0, π].
///
/// At θ = π the axis comes from the largest diagonal entry of (R + I)/2 and
/// its sign is chosen so that the largest-magnitude component is positive.
pub fn axis_angle(rotation: &Matrix3<f64>) -> Vector3<f64> {
    let skew_part = vee(&(rotation - rotation.transpose())) * 0.5; // sinθ·u
    let sin_theta = skew_part.norm();
    let cos_theta = ((rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < 1e-12 {
        return Vector3::zeros();
    }
    if cos_theta > 0.0 {
        // θ < π/2: sinθ is well conditioned.
        let scale = if theta < 1e-4 {
            1.0 + theta * theta / 6.0
        } else {
            theta / sin_theta
        };
        return skew_part * scale;
    }

    // Obtuse angles: recover u from the symmetric part, uuᵀ = (S − cosθ I)/(1 − cosθ).
    let sym = (rotation + rotation.transpose()) * 0.5;
    let b = (sym - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
    let mut k = 0;
    for i in 1..3 {
        if b[(i, i)] > b[(k, k)] {
            k = i;
        }
    }
    let mut axis = Vector3::new(b[(0, k)], b[(1, k)], b[(2, k)]);
    axis /= axis.norm();
    let dot = axis.dot(&skew_part);
    if dot < 0.0 || (dot == 0.0 && largest_component(&axis) < 0.0) {
        axis = -axis;
    }
    if sin_theta < 1e-12
        && largest_component(&axis) < 0.0 {
            axis = -axis;
        }
    axis * theta
}

fn largest_component(v: &Vector3<f64>) -> f64 {
    let mut best = v.x;
    for c in [v.y, v.z] {
        if c.abs() > best.abs() {
            best = c;
        }
    }
    best
}

/// Projects a matrix onto SO(3) by Gram–Schmidt on its columns.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = r.column(0).into_owned();
    let c1 = r.column(1).into_owned();
    let x = c0 / c0.norm();
    let y = c1 - x * x.dot(&c1);
    let y = y / y.norm();
    let z = x.cross(&y);
    Matrix3::from_columns(&[x, y, z])
}

/// Integrates a constant body-frame twist over `dt` with the SE(3) exponential.
pub fn se3_step(pose: &Pose, twist: &Twist, dt: f64) -> Result<Pose> {
    if !twist.is_finite() {
        return Err(Error::InvalidTwist(format!("{:?}", twist.to_array())));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidTwist(format!("non-positive time step {dt}")));
    }
    let phi = twist.omega * dt;
    let rho = twist.nu * dt;
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(&phi);
    let (b, c) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let v = Matrix3::identity() + k * b + k * k * c;
    let delta = Pose::new(exp_so3(&phi), v * rho);
    let mut next = pose.compose(&delta);
    next.rotation = orthonormalize(&next.rotation);
    Ok(next)
}

/// Projects world points into the normalized image plane of a camera.
///
/// Points at depth ≤ [`MIN_DEPTH`] get NaN coordinates and are never in view.
pub fn project(
    camera: &CameraModel,
    camera_pose: &Pose,
    points: &[Vector3<f64>],
) -> (Vec<[f64; 2]>, Vec<bool>) {
    let mut keypoints = Vec::with_capacity(points.len());
    let mut in_view = Vec::with_capacity(points.len());
    for p in points {
        let pc = camera_pose.inverse_transform_point(p);
        if !(pc.z > MIN_DEPTH) || !pc.iter().all(|v| v.is_finite()) {
            keypoints.push([f64::NAN, f64::NAN]);
            in_view.push(false);
            continue;
        }
        let x = pc.x / pc.z;
        let y = pc.y / pc.z;
        let (u, v) = camera.to_pixel(x, y);
        keypoints.push([x, y]);
        in_view.push(camera.pixel_in_image(u, v));
    }
    (keypoints, in_view)
}

/// Depths (camera-frame Z) of world points.
pub fn depths(camera_pose: &Pose, points: &[Vector3<f64>]) -> Vec<f64> {
    points
        .iter()
        .map(|p| camera_pose.inverse_transform_point(p).z)
        .collect()
}

/// Geodesic angle between two orientations, degrees in [0, 180].
pub fn rotation_error(a: &Pose, b: &Pose) -> f64 {
    let rel = a.rotation.transpose() * b.rotation;
    axis_angle(&rel).norm().to_degrees()
}

/// Euclidean distance between positions, millimeters.
pub fn translation_error(a: &Pose, b: &Pose) -> f64 {
    (a.translation - b.translation).norm() * 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rz(deg: f64) -> Matrix3<f64> {
        exp_so3(&Vector3::new(0.0, 0.0, deg.to_radians()))
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        exp_so3(&(axis * rng.random_range(0.0..PI)))
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(
            random_rotation(rng),
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        )
    }

    /// RK4 on Ṙ = R[ω]×, ṫ = Rν.
    fn rk4(pose: &Pose, twist: &Twist, t_end: f64, steps: usize) -> Pose {
        let h = t_end / steps as f64;
        let w = skew(&twist.omega);
        let f = |r: &Matrix3<f64>| (r * w, r * twist.nu);
        let mut r = pose.rotation;
        let mut t = pose.translation;
        for _ in 0..steps {
            let (k1r, k1t) = f(&r);
            let (k2r, k2t) = f(&(r + k1r * (h / 2.0)));
            let (k3r, k3t) = f(&(r + k2r * (h / 2.0)));
            let (k4r, k4t) = f(&(r + k3r * h));
            r += (k1r + k2r * 2.0 + k3r * 2.0 + k4r) * (h / 6.0);
            t += (k1t + k2t * 2.0 + k3t * 2.0 + k4t) * (h / 6.0);
        }
        Pose::new(r, t)
    }

    #[test]
    fn zero_twist_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng);
        let q = se3_step(&p, &Twist::zero(), 0.04).unwrap();
        assert!((q.rotation - p.rotation).abs().max() < 1e-15);
        assert!((q.translation - p.translation).abs().max() < 1e-15);
    }

    #[test]
    fn pure_rotation_step() {
        let tw = Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, PI / 2.0));
        let q = se3_step(&Pose::identity(), &tw, 1.0).unwrap();
        assert!((q.rotation - rz(90.0)).abs().max() < 1e-12);
        assert!(q.translation.norm() < 1e-15);
    }

    #[test]
    fn step_matches_rk4() {
        let tw = Twist::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, PI));
        let q = se3_step(&Pose::identity(), &tw, 1.0).unwrap();
        let oracle = rk4(&Pose::identity(), &tw, 1.0, 2000);
        assert!((q.rotation - oracle.rotation).abs().max() < 1e-6);
        assert!((q.translation - oracle.translation).abs().max() < 1e-6);
        // Closed form: a half circle of radius 1/π.
        assert!((q.translation - Vector3::new(0.0, 2.0 / PI, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn step_rejects_non_finite_twist() {
        let tw = Twist::new(Vector3::new(f64::NAN, 0.0, 0.0), Vector3::zeros());
        let err = se3_step(&Pose::identity(), &tw, 0.04).unwrap_err();
        assert!(err.to_string().contains("invalid twist"));
    }

    #[test]
    fn repeated_steps_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = random_pose(&mut rng);
            let tw = Twist::from_array(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let n = 25;
            let mut q = p;
            for _ in 0..n {
                q = se3_step(&q, &tw, 0.04).unwrap();
            }
            let direct = se3_step(&p, &tw, 0.04 * n as f64).unwrap();
            assert!((q.rotation - direct.rotation).abs().max() < 1e-8);
            assert!((q.translation - direct.translation).abs().max() < 1e-8);
            assert!(q.is_valid(1e-9));
        }
    }

    #[test]
    fn projection_examples() {
        let cam = CameraModel::default();
        let pts = [
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.1, 0.0, 1.0),
            Vector3::new(0.0, 0.0, -1.0),
        ];
        let (kp, vis) = project(&cam, &Pose::identity(), &pts);
        assert_eq!(kp[0], [0.0, 0.0]);
        assert!(vis[0]);
        assert!((kp[1][0] - 0.1).abs() < 1e-15 && kp[1][1] == 0.0);
        let (u, _) = cam.to_pixel(kp[1][0], kp[1][1]);
        assert!((u - 374.0).abs() < 1e-12);
        assert!(vis[1]);
        assert!(!vis[2]);
    }

    #[test]
    fn projection_inverts_with_known_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = CameraModel::default();
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let local = Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.2..2.0),
            );
            let world = pose.transform_point(&local);
            let (kp, _) = project(&cam, &pose, &[world]);
            let z = depths(&pose, &[world])[0];
            let back = pose.transform_point(&Vector3::new(kp[0][0] * z, kp[0][1] * z, z));
            assert!((back - world).norm() < 1e-9);
        }
    }

    #[test]
    fn rotation_error_examples() {
        let p = Pose::new(rz(40.0), Vector3::new(1.0, 2.0, 3.0));
        assert!(rotation_error(&p, &p) < 1e-12);
        let q = Pose::new(rz(30.0), Vector3::zeros());
        assert!((rotation_error(&Pose::identity(), &q) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_error_recovers_perturbation_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let r = random_rotation(&mut rng);
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let theta = rng.random_range(0.0..PI);
            let a = Pose::new(r, Vector3::zeros());
            let b = Pose::new(r * exp_so3(&(axis * theta)), Vector3::zeros());
            assert!((rotation_error(&a, &b).to_radians() - theta).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_error_is_a_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (a, b, c) = (
                random_pose(&mut rng),
                random_pose(&mut rng),
                random_pose(&mut rng),
            );
            let ab = rotation_error(&a, &b);
            assert!((ab - rotation_error(&b, &a)).abs() < 1e-9);
            assert!(rotation_error(&a, &c) <= ab + rotation_error(&b, &c) + 1e-9);
        }
    }

    #[test]
    fn translation_error_examples() {
        let p = Pose::from_translation(Vector3::new(0.1, 0.2, 0.3));
        assert_eq!(translation_error(&p, &p), 0.0);
        let q = Pose::from_translation(Vector3::new(0.003, 0.0, 0.0));
        assert!((translation_error(&Pose::identity(), &q) - 3.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let d = a.translation - b.translation;
            let brute = (d.x * d.x + d.y * d.y + d.z * d.z).sqrt() * 1000.0;
            assert!((translation_error(&a, &b) - brute).abs() < 1e-9);
        }
    }

    #[test]
    fn axis_angle_examples() {
        assert_eq!(axis_angle(&Matrix3::identity()), Vector3::zeros());
        let v = axis_angle(&rz(90.0));
        assert!((v - Vector3::new(0.0, 0.0, PI / 2.0)).norm() < 1e-12);
        // θ = π about z: axis from the largest diagonal entry, positive sign.
        let v = axis_angle(&Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0));
        assert!((v - Vector3::new(0.0, 0.0, PI)).norm() < 1e-12);
    }

    #[test]
    fn axis_angle_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..1000 {
            // Include angles at and near the π boundary.
            let r = if i % 10 == 0 {
                let axis = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize();
                exp_so3(&(axis * (PI - rng.random_range(0.0..1e-6))))
            } else {
                random_rotation(&mut rng)
            };
            let v = axis_angle(&r);
            assert!(v.norm() <= PI + 1e-12);
            assert!((exp_so3(&v) - r).abs().max() < 1e-8, "iteration {i}");
        }
    }
}
