//! One simulated servo episode: scene, camera poses and the observation pipeline.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::correspondence::AugmentConfig;
use crate::error::{Error, Result};
use crate::geometry::{project, rotation_error, se3_step, translation_error, CameraModel, Pose, Twist};
use crate::graph::{ClusterAssignment, Observer, ServoGraph};
use crate::scene::{sample_pose_pair, sample_scene, PoseSamplingConfig, Scene, SceneConfig};
use crate::SimRng;

/// Episodes need at least this many keypoints in view at both poses.
pub const MIN_EPISODE_KEYPOINTS: usize = 3;
const MAX_EPISODE_DRAWS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub scene: SceneConfig,
    pub initial_pose: PoseSamplingConfig,
    pub desired_pose: PoseSamplingConfig,
    pub augment: AugmentConfig,
    pub camera: CameraModel,
    /// Control period in seconds.
    pub dt: f64,
    /// Group keypoints with Affinity Propagation; off makes every node its own cluster.
    pub clustering: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            initial_pose: PoseSamplingConfig::initial_default(),
            desired_pose: PoseSamplingConfig::desired_default(),
            augment: AugmentConfig::default(),
            camera: CameraModel::default(),
            dt: 0.04,
            clustering: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.initial_pose.validate()?;
        self.desired_pose.validate()?;
        self.augment.validate()?;
        self.camera.validate()?;
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub seed: u64,
    pub scene: Scene,
    pub initial: Pose,
    pub desired: Pose,
    pub current: Pose,
    pub observer: Observer,
    pub step: usize,
    /// Distance from the desired camera to the scene center.
    pub d_gt: f64,
    dt: f64,
    rng: SimRng,
}

impl Episode {
    /// Draws scene and poses from `seed`, redrawing until both poses see at
    /// least [`MIN_EPISODE_KEYPOINTS`] points.
    pub fn new(seed: u64, cfg: &SimConfig) -> Result<Self> {
        let mut rng = SimRng::seed_from_u64(seed);
        for _ in 0..MAX_EPISODE_DRAWS {
            let scene = sample_scene(&cfg.scene, cfg.augment.keypoint_mode, &mut rng)?;
            let (initial, desired) = sample_pose_pair(&cfg.initial_pose, &cfg.desired_pose, &mut rng);
            let seen = |pose: &Pose| project(&cfg.camera, pose, &scene.points).1.iter().filter(|&&v| v).count();
            if seen(&desired) < MIN_EPISODE_KEYPOINTS || seen(&initial) < MIN_EPISODE_KEYPOINTS {
                continue;
            }
            return Self::from_parts(seed, scene, initial, desired, cfg, rng);
        }
        Err(Error::Config(format!("seed {seed}: no episode with visible keypoints")))
    }

    /// Episode from explicit geometry; `rng` drives the observation noise.
    pub fn from_parts(
        seed: u64,
        scene: Scene,
        initial: Pose,
        desired: Pose,
        cfg: &SimConfig,
        mut rng: SimRng,
    ) -> Result<Self> {
        let mut observer = Observer::new(&scene, cfg.camera, desired, initial, cfg.augment.clone(), &mut rng)?;
        if !cfg.clustering {
            observer.clusters = ClusterAssignment::singletons(observer.num_nodes());
        }
        let d_gt = desired.inverse_transform_point(&scene.center()).norm();
        Ok(Self {
            seed,
            scene,
            initial,
            desired,
            current: initial,
            observer,
            step: 0,
            d_gt,
            dt: cfg.dt,
            rng,
        })
    }

    pub fn observe(&mut self) -> ServoGraph {
        self.observer.observe(&self.scene, &self.current, self.dt, &mut self.rng)
    }

    pub fn advance(&mut self, twist: &Twist) -> Result<()> {
        self.current = se3_step(&self.current, twist, self.dt)?;
        self.step += 1;
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn rotation_error(&self) -> f64 {
        rotation_error(&self.current, &self.desired)
    }

    pub fn translation_error(&self) -> f64 {
        translation_error(&self.current, &self.desired)
    }

    /// Camera center to scene center, meters.
    pub fn camera_distance(&self) -> f64 {
        (self.current.translation - self.scene.center()).norm()
    }

    /// Fraction of graph nodes projecting inside the image at the current pose.
    pub fn fraction_in_view(&self) -> f64 {
        let n = self.observer.num_nodes();
        if n == 0 {
            return 0.0;
        }
        let pts: Vec<_> = self.observer.point_index.iter().map(|&i| self.scene.points[i]).collect();
        let (_, in_view) = project(&self.observer.camera, &self.current, &pts);
        in_view.iter().filter(|&&v| v).count() as f64 / n as f64
    }

    /// True depths of the graph nodes at the current pose.
    pub fn node_depths(&self) -> Vec<f64> {
        self.observer.node_depths(&self.scene, &self.current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episodes_are_seeded() {
        let cfg = SimConfig::default();
        let a = Episode::new(7, &cfg).unwrap();
        let b = Episode::new(7, &cfg).unwrap();
        let c = Episode::new(8, &cfg).unwrap();
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.initial, b.initial);
        assert_ne!(a.scene, c.scene);
        assert!(a.observer.num_nodes() >= MIN_EPISODE_KEYPOINTS);
        assert!(a.d_gt > 0.4 && a.d_gt < 1.0);
    }

    #[test]
    fn stepping_moves_the_camera() {
        let mut e = Episode::new(1, &SimConfig::default()).unwrap();
        let before = e.current;
        e.advance(&Twist::from_array([0.1, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(e.step, 1);
        assert!((e.current.translation - before.translation).norm() > 0.0039);
        assert!(e.advance(&Twist::from_array([f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let err = serde_json::from_str::<SimConfig>(r#"{"dt": 0.04, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let cfg: SimConfig = serde_json::from_str(r#"{"augment": {"mismatch_fraction": 0.0}}"#).unwrap();
        assert_eq!(cfg.augment.mismatch_fraction, 0.0);
        assert_eq!(cfg.dt, 0.04);
    }
}
