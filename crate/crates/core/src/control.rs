//! Classical servo laws: PBVS, IBVS, and the episode stopping rule.

use nalgebra::{Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle, Pose, Twist};

/// Default keypoint-error threshold for [`stopping_criterion`], normalized units.
pub const STOP_THRESHOLD: f64 = 5e-4;
pub const STOP_PATIENCE: usize = 20;
/// Distances below this make the desired pose degenerate for supervision.
pub const MIN_DESIRED_DISTANCE: f64 = 1e-6;

/// Proportional gain in 1/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ControlGain(f64);

impl ControlGain {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda > 0.0 && lambda.is_finite() {
            Ok(Self(lambda))
        } else {
            Err(Error::Config(format!("gain must be positive, got {lambda}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for ControlGain {
    fn default() -> Self {
        Self(1.0)
    }
}

/// Goal-in-current-frame PBVS: ν = λ t, ω = λ θu with (R, t) the desired
/// pose seen from the current camera.
pub fn pbvs(current: &Pose, desired: &Pose, gain: ControlGain) -> Twist {
    let rel = current.relative_to_self(desired);
    let lambda = gain.value();
    Twist::new(rel.translation * lambda, axis_angle(&rel.rotation) * lambda)
}

/// PBVS twist at unit gain with its linear part divided by the distance from
/// the desired camera to the scene center. Returns `(v_dd, d_gt)`.
pub fn pbvs_supervision(current: &Pose, desired: &Pose, scene_center: &Vector3<f64>) -> Result<([f64; 6], f64)> {
    let d_gt = desired.inverse_transform_point(scene_center).norm();
    if !(d_gt >= MIN_DESIRED_DISTANCE) {
        return Err(Error::DegenerateDesiredPose(d_gt));
    }
    let t = pbvs(current, desired, ControlGain(1.0));
    let nu = t.nu / d_gt;
    Ok(([nu.x, nu.y, nu.z, t.omega.x, t.omega.y, t.omega.z], d_gt))
}

/// Point-feature interaction matrix in normalized coordinates.
pub fn interaction_matrix(x: f64, y: f64, z: f64) -> Result<[[f64; 6]; 2]> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::InvalidDepth(z));
    }
    let iz = 1.0 / z;
    Ok([
        [-iz, 0.0, x * iz, x * y, -(1.0 + x * x), y],
        [0.0, -iz, y * iz, 1.0 + y * y, -x * y, -x],
    ])
}

/// IBVS with a Tikhonov-damped pseudo-inverse, μ = 1e-6 · tr(LᵀL) / 6.
pub fn ibvs(
    current_kp: &[[f64; 2]],
    desired_kp: &[[f64; 2]],
    visible: &[bool],
    depths: &[f64],
    gain: ControlGain,
) -> Result<Twist> {
    let n = desired_kp.len();
    if current_kp.len() != n || visible.len() != n || depths.len() != n {
        return Err(Error::Shape {
            op: "ibvs",
            detail: format!(
                "current {} desired {} visible {} depths {}",
                current_kp.len(),
                n,
                visible.len(),
                depths.len()
            ),
        });
    }
    let n_vis = visible.iter().filter(|&&v| v).count();
    if n_vis < 3 {
        return Err(Error::InsufficientFeatures {
            visible: n_vis,
            required: 3,
        });
    }
    let mut ltl = Matrix6::<f64>::zeros();
    let mut lte = Vector6::<f64>::zeros();
    for j in (0..n).filter(|&j| visible[j]) {
        let [x, y] = current_kp[j];
        let l = interaction_matrix(x, y, depths[j])?;
        let e = [x - desired_kp[j][0], y - desired_kp[j][1]];
        for (row, &ei) in l.iter().zip(&e) {
            let r = Vector6::from_row_slice(row);
            ltl += r * r.transpose();
            lte += r * ei;
        }
    }
    let mu = 1e-6 * ltl.trace() / 6.0;
    let damped = ltl + Matrix6::identity() * mu;
    let sol = damped
        .cholesky()
        .map(|c| c.solve(&lte))
        .or_else(|| damped.lu().solve(&lte))
        .ok_or_else(|| Error::Config("ibvs: singular normal equations".into()))?;
    let v = sol * -gain.value();
    Ok(Twist::new(
        Vector3::new(v[0], v[1], v[2]),
        Vector3::new(v[3], v[4], v[5]),
    ))
}

/// True once the latest error is below `threshold` and the running minimum
/// has not decreased during the last `patience` steps.
pub fn stopping_criterion(history: &[f64], threshold: f64, patience: usize) -> bool {
    let Some(&latest) = history.last() else {
        return false;
    };
    if !(latest < threshold) {
        return false;
    }
    let mut best = f64::INFINITY;
    let mut best_at = 0;
    for (i, &e) in history.iter().enumerate() {
        if e < best {
            best = e;
            best_at = i;
        }
    }
    history.len() - 1 - best_at >= patience
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, rotation_error, se3_step, translation_error, CameraModel};
    use crate::scene::{sample_pose_pair, PoseSamplingConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gain(l: f64) -> ControlGain {
        ControlGain::new(l).unwrap()
    }

    #[test]
    fn gain_must_be_positive() {
        assert!(ControlGain::new(0.0).is_err());
        assert!(ControlGain::new(-1.0).is_err());
        assert!(ControlGain::new(f64::NAN).is_err());
    }

    #[test]
    fn pbvs_plug_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, _) = sample_pose_pair(
            &PoseSamplingConfig::initial_default(),
            &PoseSamplingConfig::desired_default(),
            &mut rng,
        );
        assert_eq!(pbvs(&p, &p, gain(1.0)).norm(), 0.0);

        let cur = Pose::identity();
        let des = Pose::from_translation(Vector3::new(0.0, 0.0, 0.1));
        let t = pbvs(&cur, &des, gain(1.0));
        assert_eq!(t.to_array(), [0.0, 0.0, 0.1, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pbvs_scales_with_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (a, b) = sample_pose_pair(
                &PoseSamplingConfig::initial_default(),
                &PoseSamplingConfig::desired_default(),
                &mut rng,
            );
            let l = rng.random_range(0.1..5.0);
            let t1 = pbvs(&a, &b, gain(l)).to_array();
            let t2 = pbvs(&a, &b, gain(2.0 * l)).to_array();
            for k in 0..6 {
                assert!((t2[k] - 2.0 * t1[k]).abs() <= 1e-15 * t2[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn pbvs_closed_loop_is_monotone_and_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (mut cur, des) = sample_pose_pair(
                &PoseSamplingConfig::initial_default(),
                &PoseSamplingConfig::desired_default(),
                &mut rng,
            );
            let mut re = rotation_error(&cur, &des);
            let mut te = translation_error(&cur, &des);
            for _ in 0..1000 {
                cur = se3_step(&cur, &pbvs(&cur, &des, gain(2.5)), 0.04).unwrap();
                let (re2, te2) = (rotation_error(&cur, &des), translation_error(&cur, &des));
                assert!(re2 <= re + 1e-9 && te2 <= te + 1e-9);
                re = re2;
                te = te2;
            }
            assert!(re < 0.1 && te < 1.0);
        }
    }

    #[test]
    fn supervision_plug_in() {
        let des = Pose::identity();
        let center = Vector3::new(0.0, 0.0, 0.5);
        let (v, d) = pbvs_supervision(&des, &des, &center).unwrap();
        assert_eq!(v, [0.0; 6]);
        assert_eq!(d, 0.5);

        let cur = Pose::from_translation(Vector3::new(0.0, 0.0, -0.1));
        let (v, d) = pbvs_supervision(&cur, &des, &center).unwrap();
        assert_eq!(d, 0.5);
        assert!((v[2] - 0.2).abs() < 1e-15);
        assert!(v.iter().enumerate().all(|(k, x)| k == 2 || *x == 0.0));

        let err = pbvs_supervision(&cur, &des, &Vector3::zeros()).unwrap_err();
        assert!(matches!(err, Error::DegenerateDesiredPose(_)));
    }

    #[test]
    fn supervision_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let center = Vector3::zeros();
        for _ in 0..50 {
            let (a, b) = sample_pose_pair(
                &PoseSamplingConfig::initial_default(),
                &PoseSamplingConfig::desired_default(),
                &mut rng,
            );
            let (v, _) = pbvs_supervision(&a, &b, &center).unwrap();
            for k in [0.2, 5.0] {
                let (vk, dk) = pbvs_supervision(&a.scaled(k), &b.scaled(k), &(center * k)).unwrap();
                assert!(dk > 0.0);
                for i in 0..6 {
                    assert!((vk[i] - v[i]).abs() < 1e-12, "{i}: {} vs {}", vk[i], v[i]);
                }
            }
        }
    }

    #[test]
    fn interaction_matrix_plug_in() {
        let l = interaction_matrix(0.0, 0.0, 1.0).unwrap();
        assert_eq!(l, [[-1.0, 0.0, 0.0, 0.0, -1.0, 0.0], [0.0, -1.0, 0.0, 1.0, 0.0, 0.0]]);
        assert!(matches!(interaction_matrix(0.1, 0.1, 0.0), Err(Error::InvalidDepth(_))));
        assert!(interaction_matrix(0.1, 0.1, -2.0).is_err());

        let a = interaction_matrix(0.3, -0.2, 0.7).unwrap();
        let b = interaction_matrix(0.3, -0.2, 1.4).unwrap();
        for r in 0..2 {
            for c in 0..6 {
                let expect = if c < 3 { a[r][c] / 2.0 } else { a[r][c] };
                assert_eq!(b[r][c], expect);
            }
        }
    }

    #[test]
    fn interaction_matrix_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cam = CameraModel::default();
        let h = 1e-6;
        for _ in 0..100 {
            let x: f64 = rng.random_range(-0.5..0.5);
            let y: f64 = rng.random_range(-0.4..0.4);
            let z: f64 = rng.random_range(0.2..3.0);
            let pt = Vector3::new(x * z, y * z, z);
            let l = interaction_matrix(x, y, z).unwrap();
            for c in 0..6 {
                let mut tw = [0.0; 6];
                tw[c] = 1.0;
                let plus = se3_step(&Pose::identity(), &Twist::from_array(tw), h).unwrap();
                tw[c] = -1.0;
                let minus = se3_step(&Pose::identity(), &Twist::from_array(tw), h).unwrap();
                let (kp, _) = project(&cam, &plus, &[pt]);
                let (km, _) = project(&cam, &minus, &[pt]);
                for r in 0..2 {
                    let fd = (kp[0][r] - km[0][r]) / (2.0 * h);
                    assert!((fd - l[r][c]).abs() < 1e-5, "row {r} col {c}: {fd} vs {}", l[r][c]);
                }
            }
        }
    }

    fn grid_points() -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                pts.push(Vector3::new(-0.15 + 0.1 * i as f64, -0.15 + 0.1 * j as f64, 0.05 * ((i + j) % 3) as f64));
            }
        }
        pts
    }

    #[test]
    fn ibvs_zero_error_and_insufficient_features() {
        let kp = vec![[0.1, 0.2], [-0.1, 0.0], [0.0, -0.3], [0.2, 0.2]];
        let t = ibvs(&kp, &kp, &[true; 4], &[1.0; 4], gain(1.0)).unwrap();
        assert_eq!(t.norm(), 0.0);
        let err = ibvs(&kp, &kp, &[true, true, false, false], &[1.0; 4], gain(1.0)).unwrap_err();
        assert!(matches!(err, Error::InsufficientFeatures { visible: 2, required: 3 }));
    }

    #[test]
    fn ibvs_pure_translation_converges_monotonically() {
        let cam = CameraModel::default();
        let pts = grid_points();
        let des = Pose::from_translation(Vector3::new(0.0, 0.0, -0.6));
        let mut cur = Pose::from_translation(Vector3::new(0.0, 0.0, -0.9));
        let (dkp, _) = project(&cam, &des, &pts);
        let mut prev = f64::INFINITY;
        for _ in 0..1000 {
            let (kp, vis) = project(&cam, &cur, &pts);
            let err: f64 = kp
                .iter()
                .zip(&dkp)
                .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err <= prev + 1e-12);
            prev = err;
            let z = crate::geometry::depths(&cur, &pts);
            let tw = ibvs(&kp, &dkp, &vis, &z, gain(1.0)).unwrap();
            cur = se3_step(&cur, &tw, 0.04).unwrap();
        }
        assert!(rotation_error(&cur, &des) < 0.1);
        assert!(translation_error(&cur, &des) < 1.0);
    }

    #[test]
    fn stopping_rule_examples() {
        let dec: Vec<f64> = (0..50).map(|i| 1e-4 / (i + 1) as f64).collect();
        for k in 1..=dec.len() {
            assert!(!stopping_criterion(&dec[..k], STOP_THRESHOLD, STOP_PATIENCE));
        }
        let flat = vec![1e-4; 21];
        assert!(stopping_criterion(&flat, STOP_THRESHOLD, STOP_PATIENCE));
        assert!(!stopping_criterion(&flat[..20], STOP_THRESHOLD, STOP_PATIENCE));
        assert!(!stopping_criterion(&[1e-3; 40], STOP_THRESHOLD, STOP_PATIENCE));
        assert!(!stopping_criterion(&[], STOP_THRESHOLD, STOP_PATIENCE));

        // Dips below threshold at index 4, then plateaus just above the minimum.
        let mut h = vec![5e-3, 2e-3, 9e-4, 6e-4, 3e-4];
        let min_index = h.len() - 1;
        h.extend(std::iter::repeat_n(3.5e-4, 30));
        for step in 0..h.len() {
            let expect = step >= min_index + 20;
            assert_eq!(stopping_criterion(&h[..=step], STOP_THRESHOLD, STOP_PATIENCE), expect, "step {step}");
        }
    }
}
