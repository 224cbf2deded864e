//! Seeded benchmark suites for the neural and classical controllers.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ibvs, pbvs, stopping_criterion, ControlGain, STOP_PATIENCE, STOP_THRESHOLD};
use crate::env::{Episode, SimConfig};
use crate::error::{Error, Result};
use crate::geometry::{project, Twist};
use crate::policy::{decode_velocity, policy_forward, HiddenState, PolicyParams};

/// Quantile of the standard normal used for 95% intervals.
const Z95: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    Cns,
    Pbvs,
    Ibvs,
}

impl Controller {
    pub fn name(self) -> &'static str {
        match self {
            Controller::Cns => "cns",
            Controller::Pbvs => "pbvs",
            Controller::Ibvs => "ibvs",
        }
    }
}

/// Depths fed to the IBVS interaction matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// True depths at the current pose.
    #[default]
    Exact,
    /// Depths at the desired pose, held constant.
    Desired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Half-open seed range `[start, end)`.
    pub seeds: [u64; 2],
    pub re_threshold_deg: f64,
    pub te_threshold_mm: f64,
    pub alt_re_threshold_deg: f64,
    pub alt_te_threshold_mm: f64,
    pub stop_threshold: f64,
    pub stop_patience: usize,
    pub max_steps: usize,
    /// Gain for PBVS and IBVS.
    pub gain: ControlGain,
    /// Distance used to rescale the neural controller's linear velocity;
    /// `None` uses the true desired-camera-to-scene distance.
    pub distance_prior: Option<f64>,
    pub ibvs_depth: DepthMode,
    /// Keep every n-th pose in the record; 0 keeps none.
    pub trajectory_stride: usize,
    pub sim: SimConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seeds: [0, 100],
            re_threshold_deg: 3.0,
            te_threshold_mm: 30.0,
            alt_re_threshold_deg: 10.0,
            alt_te_threshold_mm: 100.0,
            stop_threshold: STOP_THRESHOLD,
            stop_patience: STOP_PATIENCE,
            max_steps: 1000,
            gain: ControlGain::default(),
            distance_prior: None,
            ibvs_depth: DepthMode::Exact,
            trajectory_stride: 0,
            sim: SimConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.seeds[0] >= self.seeds[1] {
            return Err(Error::Config(format!("empty seed range {:?}", self.seeds)));
        }
        for (name, v) in [
            ("re_threshold_deg", self.re_threshold_deg),
            ("te_threshold_mm", self.te_threshold_mm),
            ("alt_re_threshold_deg", self.alt_re_threshold_deg),
            ("alt_te_threshold_mm", self.alt_te_threshold_mm),
            ("stop_threshold", self.stop_threshold),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        if let Some(d) = self.distance_prior {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::InvalidDistancePrior(d));
            }
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (self.seeds[0]..self.seeds[1]).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses JSON, reporting the failing field path and position.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        Error::Config(format!(
            "field `{}` (line {}, column {}): {inner}",
            e.path(),
            inner.line(),
            inner.column()
        ))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub re_deg: f64,
    pub te_mm: f64,
    pub position: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub controller: Controller,
    pub seed: u64,
    pub num_points: usize,
    pub num_nodes: usize,
    pub initial_re_deg: f64,
    pub initial_te_mm: f64,
    pub final_re_deg: f64,
    pub final_te_mm: f64,
    pub steps: usize,
    /// Stopped by the stopping criterion rather than the step cap.
    pub stopped: bool,
    pub success: bool,
    pub success_alt: bool,
    /// Controller compute time per step in milliseconds.
    pub compute_ms: Vec<f64>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub failure: Option<String>,
}

impl EpisodeRecord {
    fn failed(controller: Controller, seed: u64, msg: String) -> Self {
        Self {
            controller,
            seed,
            num_points: 0,
            num_nodes: 0,
            initial_re_deg: f64::NAN,
            initial_te_mm: f64::NAN,
            final_re_deg: f64::NAN,
            final_te_mm: f64::NAN,
            steps: 0,
            stopped: false,
            success: false,
            success_alt: false,
            compute_ms: Vec::new(),
            trajectory: Vec::new(),
            failure: Some(msg),
        }
    }

    pub fn mean_compute_ms(&self) -> f64 {
        mean(&self.compute_ms).unwrap_or(f64::NAN)
    }
}

/// Mean projection error of the in-view graph nodes against their desired
/// keypoints, from the true geometry.
fn true_keypoint_error(ep: &Episode) -> f64 {
    let pts: Vec<_> = ep.observer.point_index.iter().map(|&i| ep.scene.points[i]).collect();
    let (kp, in_view) = project(&ep.observer.camera, &ep.current, &pts);
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((c, d), v) in kp.iter().zip(&ep.observer.desired_kp).zip(&in_view) {
        if *v {
            sum += ((c[0] - d[0]).powi(2) + (c[1] - d[1]).powi(2)).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

struct Policy<'a> {
    params: &'a PolicyParams,
    hidden: HiddenState,
}

/// Runs one episode. The returned record is complete even on failure.
pub fn run_episode(cfg: &BenchmarkConfig, controller: Controller, params: Option<&PolicyParams>, seed: u64) -> EpisodeRecord {
    match run_episode_inner(cfg, controller, params, seed) {
        Ok(r) => r,
        Err(e) => EpisodeRecord::failed(controller, seed, e.to_string()),
    }
}

fn run_episode_inner(
    cfg: &BenchmarkConfig,
    controller: Controller,
    params: Option<&PolicyParams>,
    seed: u64,
) -> Result<EpisodeRecord> {
    let mut ep = Episode::new(seed, &cfg.sim)?;
    let mut policy = match controller {
        Controller::Cns => {
            let params = params.ok_or_else(|| Error::Config("the cns controller needs a checkpoint".into()))?;
            Some(Policy {
                params,
                hidden: HiddenState::zeros(ep.observer.clusters.num_clusters(), params.hidden()),
            })
        }
        _ => None,
    };
    let distance = cfg.distance_prior.unwrap_or(ep.d_gt);
    let desired_depths = crate::geometry::depths(&ep.desired, &ep.observer.point_index.iter().map(|&i| ep.scene.points[i]).collect::<Vec<_>>());
    let mut rec = EpisodeRecord {
        controller,
        seed,
        num_points: ep.scene.len(),
        num_nodes: ep.observer.num_nodes(),
        initial_re_deg: ep.rotation_error(),
        initial_te_mm: ep.translation_error(),
        final_re_deg: f64::NAN,
        final_te_mm: f64::NAN,
        steps: 0,
        stopped: false,
        success: false,
        success_alt: false,
        compute_ms: Vec::with_capacity(cfg.max_steps),
        trajectory: Vec::new(),
        failure: None,
    };
    let mut history = Vec::with_capacity(cfg.max_steps + 1);
    history.push(true_keypoint_error(&ep));
    let record_point = |ep: &Episode, rec: &mut EpisodeRecord| {
        if cfg.trajectory_stride > 0 && ep.step.is_multiple_of(cfg.trajectory_stride) {
            let t = ep.current.translation;
            rec.trajectory.push(TrajectoryPoint {
                step: ep.step,
                re_deg: ep.rotation_error(),
                te_mm: ep.translation_error(),
                position: [t.x, t.y, t.z],
            });
        }
    };
    record_point(&ep, &mut rec);
    while ep.step < cfg.max_steps {
        let start = Instant::now();
        let twist = match controller {
            Controller::Pbvs => pbvs(&ep.current, &ep.desired, cfg.gain),
            Controller::Ibvs => {
                let g = ep.observe();
                let depths = match cfg.ibvs_depth {
                    DepthMode::Exact => ep.node_depths(),
                    DepthMode::Desired => desired_depths.clone(),
                };
                match ibvs(&g.current_kp, &g.desired_kp, &g.visible, &depths, cfg.gain) {
                    Ok(t) => t,
                    Err(Error::InsufficientFeatures { .. }) => Twist::zero(),
                    Err(e) => return Err(e),
                }
            }
            Controller::Cns => {
                let p = policy.as_mut().expect("policy present for cns");
                let g = ep.observe();
                let (out, h) = policy_forward(&g, &p.hidden, p.params)?;
                p.hidden = h;
                decode_velocity(&out, distance)?
            }
        };
        rec.compute_ms.push(start.elapsed().as_secs_f64() * 1e3);
        ep.advance(&twist)?;
        record_point(&ep, &mut rec);
        history.push(true_keypoint_error(&ep));
        if stopping_criterion(&history, cfg.stop_threshold, cfg.stop_patience) {
            rec.stopped = true;
            break;
        }
    }
    rec.steps = ep.step;
    rec.final_re_deg = ep.rotation_error();
    rec.final_te_mm = ep.translation_error();
    rec.success = rec.final_re_deg < cfg.re_threshold_deg && rec.final_te_mm < cfg.te_threshold_mm;
    rec.success_alt = rec.final_re_deg < cfg.alt_re_threshold_deg && rec.final_te_mm < cfg.alt_te_threshold_mm;
    Ok(rec)
}

/// One episode per seed, in parallel, returned in seed order.
pub fn run_seeds(
    cfg: &BenchmarkConfig,
    controller: Controller,
    params: Option<&PolicyParams>,
    seeds: &[u64],
) -> Vec<EpisodeRecord> {
    seeds
        .par_iter()
        .map(|&s| run_episode(cfg, controller, params, s))
        .collect()
}

pub fn run_suite(cfg: &BenchmarkConfig, controller: Controller, params: Option<&PolicyParams>) -> Result<Vec<EpisodeRecord>> {
    cfg.validate()?;
    if controller == Controller::Cns && params.is_none() {
        return Err(Error::Config("the cns controller needs a checkpoint".into()));
    }
    Ok(run_seeds(cfg, controller, params, &cfg.seed_list()))
}

/// Success ratio in percent with a 95% Wald interval clamped to [0, 100].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessRatio {
    pub percent: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn success_ratio(successes: usize, n: usize) -> Result<SuccessRatio> {
    if n == 0 {
        return Err(Error::Empty("success_ratio"));
    }
    let p = successes as f64 / n as f64;
    let half = Z95 * (p * (1.0 - p) / n as f64).sqrt();
    Ok(SuccessRatio {
        percent: 100.0 * p,
        ci_low: (100.0 * (p - half)).clamp(0.0, 100.0),
        ci_high: (100.0 * (p + half)).clamp(0.0, 100.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> Option<MeanStd> {
    let m = mean(v)?;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean: m, std })
}

pub fn median(v: &[f64]) -> Option<f64> {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if s.is_empty() {
        return None;
    }
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Suite metrics. TS, RE and TE statistics are over successful episodes;
/// the medians are over all episodes (failed episodes count as NaN and are
/// skipped).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub controller: Controller,
    pub episodes: usize,
    pub successes: usize,
    pub sr: SuccessRatio,
    pub successes_alt: usize,
    pub sr_alt: SuccessRatio,
    pub ts: Option<MeanStd>,
    pub re_deg: Option<MeanStd>,
    pub te_mm: Option<MeanStd>,
    pub median_final_re_deg: Option<f64>,
    pub median_final_te_mm: Option<f64>,
    pub failures: usize,
}

pub fn aggregate(records: &[EpisodeRecord]) -> Result<Summary> {
    let first = records.first().ok_or(Error::Empty("aggregate"))?;
    let ok: Vec<&EpisodeRecord> = records.iter().filter(|r| r.success).collect();
    let successes_alt = records.iter().filter(|r| r.success_alt).count();
    let col = |f: fn(&EpisodeRecord) -> f64, rs: &[&EpisodeRecord]| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
    let all: Vec<&EpisodeRecord> = records.iter().collect();
    Ok(Summary {
        controller: first.controller,
        episodes: records.len(),
        successes: ok.len(),
        sr: success_ratio(ok.len(), records.len())?,
        successes_alt,
        sr_alt: success_ratio(successes_alt, records.len())?,
        ts: mean_std(&col(|r| r.steps as f64, &ok)),
        re_deg: mean_std(&col(|r| r.final_re_deg, &ok)),
        te_mm: mean_std(&col(|r| r.final_te_mm, &ok)),
        median_final_re_deg: median(&col(|r| r.final_re_deg, &all)),
        median_final_te_mm: median(&col(|r| r.final_te_mm, &all)),
        failures: records.iter().filter(|r| r.failure.is_some()).count(),
    })
}

/// Compute-time statistics in milliseconds over every controller step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub controller: Controller,
    pub steps: usize,
    pub mct_ms: Option<MeanStd>,
}

pub fn timing_summary(records: &[EpisodeRecord]) -> Result<TimingSummary> {
    let first = records.first().ok_or(Error::Empty("timing_summary"))?;
    let all: Vec<f64> = records.iter().flat_map(|r| r.compute_ms.iter().copied()).collect();
    Ok(TimingSummary {
        controller: first.controller,
        steps: all.len(),
        mct_ms: mean_std(&all),
    })
}

/// Column order of `episodes.csv`. The last row has `seed` = `summary`:
/// RE/TE columns hold means over all episodes, `steps` the mean step count
/// and the success columns the success fraction.
pub const EPISODE_CSV_HEADER: [&str; 13] = [
    "controller",
    "seed",
    "num_points",
    "num_nodes",
    "initial_re_deg",
    "initial_te_mm",
    "final_re_deg",
    "final_te_mm",
    "steps",
    "stopped",
    "success",
    "success_alt",
    "failure",
];

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_episode_csv<W: std::io::Write>(w: W, records: &[EpisodeRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(EPISODE_CSV_HEADER)?;
    for r in records {
        out.write_record([
            r.controller.name().to_string(),
            r.seed.to_string(),
            r.num_points.to_string(),
            r.num_nodes.to_string(),
            fmt(r.initial_re_deg),
            fmt(r.initial_te_mm),
            fmt(r.final_re_deg),
            fmt(r.final_te_mm),
            r.steps.to_string(),
            (r.stopped as u8).to_string(),
            (r.success as u8).to_string(),
            (r.success_alt as u8).to_string(),
            r.failure.clone().unwrap_or_default(),
        ])?;
    }
    if let Some(first) = records.first() {
        let n = records.len() as f64;
        let m = |f: fn(&EpisodeRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        out.write_record([
            first.controller.name().to_string(),
            "summary".to_string(),
            fmt(m(|r| r.num_points as f64)),
            fmt(m(|r| r.num_nodes as f64)),
            fmt(m(|r| r.initial_re_deg)),
            fmt(m(|r| r.initial_te_mm)),
            fmt(m(|r| r.final_re_deg)),
            fmt(m(|r| r.final_te_mm)),
            fmt(m(|r| r.steps as f64)),
            fmt(m(|r| r.stopped as u8 as f64)),
            fmt(m(|r| r.success as u8 as f64)),
            fmt(m(|r| r.success_alt as u8 as f64)),
            records.iter().filter(|r| r.failure.is_some()).count().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `episodes.csv`, `summary.json`, `trajectories.jsonl` (when
/// trajectories were kept) and the non-deterministic `timing.csv` /
/// `timing.json` under `dir`.
pub fn write_results(dir: &Path, records: &[EpisodeRecord]) -> Result<Summary> {
    std::fs::create_dir_all(dir)?;
    let summary = aggregate(records)?;
    write_episode_csv(std::fs::File::create(dir.join("episodes.csv"))?, records)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    if records.iter().any(|r| !r.trajectory.is_empty()) {
        let mut text = String::new();
        for r in records {
            let line = serde_json::json!({
                "controller": r.controller,
                "seed": r.seed,
                "success": r.success,
                "trajectory": r.trajectory,
            });
            text.push_str(&line.to_string());
            text.push('\n');
        }
        std::fs::write(dir.join("trajectories.jsonl"), text)?;
    }
    let mut timing = csv::Writer::from_path(dir.join("timing.csv"))?;
    timing.write_record(["controller", "seed", "steps", "mct_ms"])?;
    for r in records {
        timing.write_record([
            r.controller.name().to_string(),
            r.seed.to_string(),
            r.compute_ms.len().to_string(),
            fmt(r.mean_compute_ms()),
        ])?;
    }
    timing.flush()?;
    std::fs::write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(&timing_summary(records)?)? + "\n",
    )?;
    Ok(summary)
}

/// Ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationAxis {
    /// Values: uniform, weighted, off.
    DropoutMode,
    /// Values: mismatch fractions, or on/off for 0.1/0.
    Mismatch,
    /// Values: distances in meters.
    DistancePrior,
    /// Values: on, off.
    Clustering,
}

/// Config for one ablation value.
pub fn ablation_config(base: &BenchmarkConfig, axis: AblationAxis, value: &str) -> Result<BenchmarkConfig> {
    let mut cfg = base.clone();
    let bad = || Error::Config(format!("invalid value `{value}` for axis {axis:?}"));
    let on_off = |v: &str| match v {
        "on" | "true" => Some(true),
        "off" | "false" => Some(false),
        _ => None,
    };
    match axis {
        AblationAxis::DropoutMode => {
            cfg.sim.augment.dropout_mode = serde_json::from_value(serde_json::Value::String(value.into())).map_err(|_| bad())?;
            if cfg.sim.augment.dropout_mode == crate::correspondence::DropoutMode::Off {
                cfg.sim.augment.dropout_fraction = 0.0;
            } else if cfg.sim.augment.dropout_fraction == 0.0 {
                cfg.sim.augment.dropout_fraction = 0.1;
            }
        }
        AblationAxis::Mismatch => {
            cfg.sim.augment.mismatch_fraction = match on_off(value) {
                Some(true) => 0.1,
                Some(false) => 0.0,
                None => value.parse().map_err(|_| bad())?,
            };
        }
        AblationAxis::DistancePrior => {
            cfg.distance_prior = Some(value.parse().map_err(|_| bad())?);
        }
        AblationAxis::Clustering => {
            cfg.sim.clustering = on_off(value).ok_or_else(bad)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::AugmentConfig;

    fn small() -> BenchmarkConfig {
        let mut cfg = BenchmarkConfig {
            seeds: [0, 6],
            max_steps: 300,
            ..Default::default()
        };
        cfg.sim.scene.n_points_range = [8, 64];
        cfg
    }

    #[test]
    fn wald_intervals_match_reported_rows() {
        let r = success_ratio(42, 60).unwrap();
        assert_eq!(format!("{:.2} ({:.2}, {:.2})", r.percent, r.ci_low, r.ci_high), "70.00 (58.40, 81.60)");
        let r = success_ratio(5, 60).unwrap();
        assert_eq!(format!("{:.2} ({:.2}, {:.2})", r.percent, r.ci_low, r.ci_high), "8.33 (1.34, 15.33)");
        let r = success_ratio(60, 60).unwrap();
        assert_eq!((r.percent, r.ci_low, r.ci_high), (100.0, 100.0, 100.0));
        assert!(success_ratio(0, 0).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn pbvs_suite_succeeds_and_is_reproducible() {
        let mut cfg = small();
        cfg.sim.augment = AugmentConfig::clean();
        let a = run_suite(&cfg, Controller::Pbvs, None).unwrap();
        let b = run_suite(&cfg, Controller::Pbvs, None).unwrap();
        assert!(a.iter().all(|r| r.success), "{a:?}");
        let strip = |rs: &[EpisodeRecord]| {
            let mut buf = Vec::new();
            write_episode_csv(&mut buf, rs).unwrap();
            buf
        };
        assert_eq!(strip(&a), strip(&b));
        let s = aggregate(&a).unwrap();
        assert_eq!(s.sr.percent, 100.0);
        assert_eq!(a.iter().map(|r| r.seed).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn success_matches_thresholds() {
        let mut cfg = small();
        cfg.max_steps = 5;
        for r in run_suite(&cfg, Controller::Ibvs, None).unwrap() {
            assert_eq!(r.success, r.final_re_deg < 3.0 && r.final_te_mm < 30.0);
            assert_eq!(r.steps, 5);
        }
    }

    #[test]
    fn cns_without_checkpoint_is_rejected() {
        assert!(run_suite(&small(), Controller::Cns, None).is_err());
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = BenchmarkConfig::from_json("{\n  \"sim\": {\"augment\": {\"dropout_mode\": \"sideways\"}}\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sim.augment.dropout_mode") && msg.contains("line 2"), "{msg}");
        assert!(BenchmarkConfig::from_json(r#"{"seeds": [5, 5]}"#).is_err());
        assert!(BenchmarkConfig::from_json(r#"{"distance_prior": -1.0}"#).is_err());
    }

    #[test]
    fn csv_summary_row_recomputes() {
        let mut cfg = small();
        cfg.sim.augment = AugmentConfig::clean();
        let recs = run_suite(&cfg, Controller::Pbvs, None).unwrap();
        let mut buf = Vec::new();
        write_episode_csv(&mut buf, &recs).unwrap();
        let mut rdr = csv::Reader::from_reader(buf.as_slice());
        assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), EPISODE_CSV_HEADER);
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), recs.len() + 1);
        let last = rows.last().unwrap();
        assert_eq!(&last[1], "summary");
        let steps: f64 = rows[..recs.len()].iter().map(|r| r[8].parse::<f64>().unwrap()).sum::<f64>() / recs.len() as f64;
        assert_eq!(fmt(steps), last[8]);
    }

    #[test]
    fn ablation_values_apply() {
        let base = small();
        let c = ablation_config(&base, AblationAxis::DistancePrior, "0.25").unwrap();
        assert_eq!(c.distance_prior, Some(0.25));
        let c = ablation_config(&base, AblationAxis::Clustering, "off").unwrap();
        assert!(!c.sim.clustering);
        let c = ablation_config(&base, AblationAxis::DropoutMode, "uniform").unwrap();
        assert_eq!(c.sim.augment.dropout_mode, crate::correspondence::DropoutMode::Uniform);
        let c = ablation_config(&base, AblationAxis::Mismatch, "off").unwrap();
        assert_eq!(c.sim.augment.mismatch_fraction, 0.0);
        assert!(ablation_config(&base, AblationAxis::Mismatch, "lots").is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[f64::NAN]), None);
    }
}
