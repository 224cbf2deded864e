//! Randomized keypoint scenes and camera pose pairs.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, Pose};

/// Dirichlet concentration for splitting clustered points across clusters.
const CLUSTER_SIZE_CONCENTRATION: f64 = 1.0;
/// Attempts per clustered point before falling back to the cluster center.
const MAX_CLUSTER_REJECTIONS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeypointMode {
    /// Object-like clusters plus a uniform residual (CK).
    #[default]
    Clustered,
    /// Every point uniform in the scene cylinder (UK).
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_points_range: [usize; 2],
    pub scene_radius_m: f64,
    pub cluster_height_factor: f64,
    pub residual_fraction_min: f64,
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_points_range: [4, 512],
            scene_radius_m: 0.2,
            cluster_height_factor: 0.1,
            residual_fraction_min: 0.2,
            rng_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.n_points_range;
        if lo < 1 || hi > 10_000 || lo > hi {
            return Err(Error::Config(format!(
                "n_points_range {:?} must lie within [1, 10000]",
                self.n_points_range
            )));
        }
        if !(self.scene_radius_m > 0.0) {
            return Err(Error::Config("scene_radius_m must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.residual_fraction_min) {
            return Err(Error::Config(
                "residual_fraction_min must be in [0, 1)".into(),
            ));
        }
        if !(self.cluster_height_factor > 0.0) {
            return Err(Error::Config("cluster_height_factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub points: Vec<Vector3<f64>>,
    /// 0 marks residual (uniform) points, clusters are numbered from 1.
    pub cluster_id: Vec<usize>,
    pub radius_m: f64,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Scene center, the origin of the sampling cylinder.
    pub fn center(&self) -> Vector3<f64> {
        Vector3::zeros()
    }

    /// Whether `p` lies inside the bounding cylinder S(·, 0, 0, 0, 0.5r, r, r).
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        in_cylinder(p, &Vector3::zeros(), 0.5 * self.radius_m, self.radius_m, self.radius_m)
    }

    /// Uniformly rescales the geometry about the scene center.
    pub fn scaled(&self, k: f64) -> Scene {
        Scene {
            points: self.points.iter().map(|p| p * k).collect(),
            cluster_id: self.cluster_id.clone(),
            radius_m: self.radius_m * k,
        }
    }

    /// Plain-text table, one point per line: `x y z cluster_id`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# radius_m {}", self.radius_m);
        for (p, c) in self.points.iter().zip(&self.cluster_id) {
            let _ = writeln!(out, "{} {} {} {}", p.x, p.y, p.z, c);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Scene> {
        let mut points = Vec::new();
        let mut cluster_id = Vec::new();
        let mut radius_m = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut it = rest.split_whitespace();
                if it.next() == Some("radius_m") {
                    radius_m = it.next().and_then(|v| v.parse::<f64>().ok());
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Config(format!("scene line {}: expected `x y z cluster_id`", lineno + 1));
            if fields.len() != 4 {
                return Err(bad());
            }
            let xyz: Vec<f64> = fields[..3]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            points.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
            cluster_id.push(fields[3].parse::<usize>().map_err(|_| bad())?);
        }
        let radius_m = radius_m.ok_or_else(|| Error::Config("scene text missing `# radius_m` header".into()))?;
        Ok(Scene {
            points,
            cluster_id,
            radius_m,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSamplingConfig {
    pub d_range_m: [f64; 2],
    pub theta_range_deg: [f64; 2],
    pub perturb_max_deg: [f64; 3],
}

impl PoseSamplingConfig {
    pub fn initial_default() -> Self {
        Self {
            d_range_m: [0.5, 0.9],
            theta_range_deg: [30.0, 90.0],
            perturb_max_deg: [10.0, 10.0, 60.0],
        }
    }

    pub fn desired_default() -> Self {
        Self {
            d_range_m: [0.5, 0.9],
            theta_range_deg: [70.0, 90.0],
            perturb_max_deg: [5.0, 5.0, 15.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [d0, d1] = self.d_range_m;
        let [t0, t1] = self.theta_range_deg;
        if !(d0 > 0.0 && d0 <= d1) || !(t0 <= t1) || self.perturb_max_deg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(format!("invalid pose sampling config {self:?}")));
        }
        Ok(())
    }
}

fn in_cylinder(p: &Vector3<f64>, c: &Vector3<f64>, h: f64, a: f64, b: f64) -> bool {
    let dx = (p.x - c.x) / a;
    let dy = (p.y - c.y) / b;
    dx * dx + dy * dy <= 1.0 && (p.z - c.z).abs() <= 0.5 * h
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Uniform samples inside an elliptic cylinder with semi-axes `a`, `b` and
/// height `h`, by rejection from the bounding box.
pub fn sample_cylinder<R: Rng + ?Sized>(
    n: usize,
    center: Vector3<f64>,
    h: f64,
    a: f64,
    b: f64,
    rng: &mut R,
) -> Result<Vec<Vector3<f64>>> {
    if !(h > 0.0 && a > 0.0 && b > 0.0) || !center.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidCylinder(format!("h={h}, a={a}, b={b}")));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(-1.0..1.0);
        if u * u + v * v > 1.0 {
            continue;
        }
        let w: f64 = rng.random_range(-0.5..0.5);
        out.push(center + Vector3::new(u * a, v * b, w * h));
    }
    Ok(out)
}

/// Uniformly distributed rotation (Shoemake's quaternion construction).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = Quaternion::new(
        b * (2.0 * PI * u3).cos(),
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
    );
    UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

/// Number of clusters: uniform on [3, 1 + log₂N], rounded, clamped to [1, N].
pub fn sample_cluster_count<R: Rng + ?Sized>(n: usize, rng: &mut R) -> usize {
    let hi = 1.0 + (n as f64).log2();
    let lo = 3.0_f64;
    let raw = if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        hi.max(1.0).min(lo)
    };
    (raw.round() as usize).clamp(1, n.max(1))
}

/// Splits `total` points over `parts` clusters, each receiving at least one.
fn split_cluster_sizes<R: Rng + ?Sized>(total: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    let gamma = Gamma::new(CLUSTER_SIZE_CONCENTRATION, 1.0).expect("valid gamma");
    let mut w: Vec<f64> = (0..parts).map(|_| gamma.sample(rng)).collect();
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|v| *v /= s);
    } else {
        w.iter_mut().for_each(|v| *v = 1.0 / parts as f64);
    }
    // One point each, the rest by largest remainder.
    let spare = total - parts;
    let mut sizes: Vec<usize> = w.iter().map(|f| 1 + (f * spare as f64).floor() as usize).collect();
    let mut assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..parts).collect();
    order.sort_by(|&i, &j| {
        let ri = w[i] * spare as f64 - (w[i] * spare as f64).floor();
        let rj = w[j] * spare as f64 - (w[j] * spare as f64).floor();
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    let mut k = 0;
    while assigned < total {
        sizes[order[k % parts]] += 1;
        assigned += 1;
        k += 1;
    }
    sizes
}

pub fn sample_scene<R: Rng + ?Sized>(cfg: &SceneConfig, mode: KeypointMode, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let r = cfg.scene_radius_m;
    let [lo, hi] = cfg.n_points_range;
    let n = rng.random_range(lo..=hi);
    let origin = Vector3::zeros();

    let clustered_total = ((1.0 - cfg.residual_fraction_min) * n as f64 + 1e-9).floor() as usize;
    let n_clusters = match mode {
        KeypointMode::Clustered => sample_cluster_count(n, rng).min(clustered_total),
        KeypointMode::Uniform => 0,
    };

    let mut points = Vec::with_capacity(n);
    let mut cluster_id = Vec::with_capacity(n);
    if n_clusters > 0 {
        let sizes = split_cluster_sizes(clustered_total, n_clusters, rng);
        let centers = sample_cylinder(n_clusters, origin, 0.5 * r, r, r, rng)?;
        let log_nc = (n_clusters.max(2) as f64).log2();
        let scene = Scene {
            points: Vec::new(),
            cluster_id: Vec::new(),
            radius_m: r,
        };
        for (i, (&size, center)) in sizes.iter().zip(&centers).enumerate() {
            let a = uniform(rng, 0.3 * r / log_nc, 1.2 * r / log_nc);
            let b = 1.5 * r / log_nc - a;
            let rot = random_rotation(rng);
            let h = cfg.cluster_height_factor * r;
            for _ in 0..size {
                // Rotated cluster points that leave the scene cylinder are redrawn.
                let mut accepted = *center;
                for _ in 0..MAX_CLUSTER_REJECTIONS {
                    let local = sample_cylinder(1, Vector3::zeros(), h, a, b, rng)?[0];
                    let p = center + rot * local;
                    if scene.contains(&p) {
                        accepted = p;
                        break;
                    }
                }
                points.push(accepted);
                cluster_id.push(i + 1);
            }
        }
    }
    let residual = n - points.len();
    points.extend(sample_cylinder(residual, origin, 0.5 * r, r, r, rng)?);
    cluster_id.extend(std::iter::repeat_n(0, residual));
    Ok(Scene {
        points,
        cluster_id,
        radius_m: r,
    })
}

/// Camera pose at distance `d` and elevation `theta` (radians) above the xOy
/// plane with azimuth `azimuth`, optical axis through the origin and x-axis
/// parallel to the world xOy plane.
pub fn look_at_pose(d: f64, theta: f64, azimuth: f64) -> Pose {
    let position = Vector3::new(
        d * theta.cos() * azimuth.cos(),
        d * theta.cos() * azimuth.sin(),
        d * theta.sin(),
    );
    let z = -position / position.norm();
    let horizontal = z.cross(&Vector3::z());
    let x = if horizontal.norm() < 1e-9 {
        Vector3::x()
    } else {
        horizontal.normalize()
    };
    let y = z.cross(&x);
    Pose::new(Matrix3::from_columns(&[x, y, z]), position)
}

/// One pose from a sampling config: look-at base, then a right-multiplied
/// perturbation with per-component axis-angle bounds.
pub fn sample_pose<R: Rng + ?Sized>(cfg: &PoseSamplingConfig, rng: &mut R) -> Pose {
    let d = uniform(rng, cfg.d_range_m[0], cfg.d_range_m[1]);
    let theta = uniform(rng, cfg.theta_range_deg[0], cfg.theta_range_deg[1]).to_radians();
    let azimuth = rng.random_range(0.0..2.0 * PI);
    let base = look_at_pose(d, theta, azimuth);
    let a = Vector3::from_fn(|i, _| {
        let m = cfg.perturb_max_deg[i].to_radians();
        uniform(rng, -m, m)
    });
    Pose::new(base.rotation * exp_so3(&a), base.translation)
}

/// Samples (initial, desired) camera poses.
pub fn sample_pose_pair<R: Rng + ?Sized>(
    initial: &PoseSamplingConfig,
    desired: &PoseSamplingConfig,
    rng: &mut R,
) -> (Pose, Pose) {
    let init = sample_pose(initial, rng);
    let des = sample_pose(desired, rng);
    (init, des)
}
