//! On-policy training with truncated backpropagation through time.
//!
//! Each update runs every environment for one window of steps with the
//! current parameters, backpropagates the summed servo loss, and applies one
//! Adam step. Hidden states are carried across windows as constants.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{clip_grad_norm, Adam, Tape, Tensor};
use crate::control::pbvs_supervision;
use crate::env::{Episode, SimConfig};
use crate::error::{Error, Result};
use crate::policy::{
    decode_velocity, desired_branch, forward_step, output_from_tape, servo_loss_on_tape, HiddenState, PolicyConfig, PolicyParams,
};

/// Training episode seeds start here; evaluation seeds stay below it.
pub const TRAIN_SEED_BASE: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_envs: usize,
    pub max_episode_steps: usize,
    pub tbptt_window: usize,
    pub lr: f64,
    /// Learning rate at the end of the cosine schedule.
    pub lr_min: f64,
    pub total_updates: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub policy: PolicyConfig,
    pub sim: SimConfig,
    /// Reached when RE < `reach_re_deg` and TE < `reach_te_mm`.
    pub reach_re_deg: f64,
    pub reach_te_mm: f64,
    pub min_distance_m: f64,
    pub max_distance_m: f64,
    pub min_fraction_in_view: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_envs: 64,
            max_episode_steps: 500,
            tbptt_window: 20,
            lr: 1e-3,
            lr_min: 0.0,
            total_updates: 5000,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 500,
            policy: PolicyConfig::default(),
            sim: SimConfig::default(),
            reach_re_deg: 1.0,
            reach_te_mm: 10.0,
            min_distance_m: 0.1,
            max_distance_m: 2.0,
            min_fraction_in_view: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        let positive = [
            ("batch_envs", self.batch_envs),
            ("max_episode_steps", self.max_episode_steps),
            ("tbptt_window", self.tbptt_window),
            ("total_updates", self.total_updates),
            ("policy.hidden", self.policy.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.tbptt_window > self.max_episode_steps {
            return Err(Error::Config("tbptt_window must not exceed max_episode_steps".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr || !(self.grad_clip > 0.0) {
            return Err(Error::Config("lr, lr_min and grad_clip must be positive with lr_min <= lr".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, recorded in checkpoint manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn lr_at(&self, update: usize) -> f64 {
        let p = update as f64 / self.total_updates as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * p.min(1.0)).cos())
    }
}

/// Why an environment was reset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetReason {
    Reached,
    TooClose,
    TooFar,
    OutOfView,
    Timeout,
    Failure,
}

/// Resampling rule for training environments.
pub fn should_resample(ep: &Episode, cfg: &TrainConfig) -> Option<ResetReason> {
    if ep.rotation_error() < cfg.reach_re_deg && ep.translation_error() < cfg.reach_te_mm {
        return Some(ResetReason::Reached);
    }
    let d = ep.camera_distance();
    if d < cfg.min_distance_m {
        return Some(ResetReason::TooClose);
    }
    if d > cfg.max_distance_m {
        return Some(ResetReason::TooFar);
    }
    if ep.fraction_in_view() < cfg.min_fraction_in_view {
        return Some(ResetReason::OutOfView);
    }
    if ep.step >= cfg.max_episode_steps {
        return Some(ResetReason::Timeout);
    }
    None
}

pub struct TrainEnv {
    pub episode: Episode,
    pub hidden: HiddenState,
}

impl TrainEnv {
    fn new(seed: u64, cfg: &TrainConfig) -> Result<Self> {
        let episode = Episode::new(seed, &cfg.sim)?;
        let hidden = HiddenState::zeros(episode.observer.clusters.num_clusters(), cfg.policy.hidden);
        Ok(Self { episode, hidden })
    }
}

/// Final state of an episode that ended during a window.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpisodeEnd {
    pub seed: u64,
    pub steps: usize,
    pub final_re_deg: f64,
    pub final_te_mm: f64,
    pub reason: ResetReason,
}

struct WindowOutput {
    grads: Vec<Tensor>,
    loss_sum: f64,
    loss_terms: usize,
    steps: usize,
    ended: Vec<EpisodeEnd>,
    /// New episodes needed, in order, for resets inside the window.
    resets: usize,
    failed: bool,
}

/// One training-log line.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LogRecord {
    pub update: usize,
    pub env_steps: u64,
    pub lr: f64,
    /// Mean loss per step; `None` when no step produced a prediction.
    pub loss: Option<f64>,
    pub grad_norm: f64,
    pub skipped: bool,
    pub episodes_ended: usize,
    pub reached: usize,
    pub mean_final_re_deg: Option<f64>,
    pub mean_final_te_mm: Option<f64>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: PolicyParams,
    adam: Adam,
    envs: Vec<TrainEnv>,
    pub update: usize,
    pub env_steps: u64,
    next_seed: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::SimRng::seed_from_u64(cfg.seed);
        let params = PolicyParams::init(cfg.policy, &mut rng)?;
        Self::with_params(cfg, params)
    }

    pub fn with_params(cfg: TrainConfig, params: PolicyParams) -> Result<Self> {
        cfg.validate()?;
        if params.config != cfg.policy {
            return Err(Error::Config("policy config does not match the parameters".into()));
        }
        let adam = Adam::new(params.tensors());
        let mut t = Self {
            cfg,
            params,
            adam,
            envs: Vec::new(),
            update: 0,
            env_steps: 0,
            next_seed: 0,
        };
        for _ in 0..t.cfg.batch_envs {
            let env = t.fresh_env()?;
            t.envs.push(env);
        }
        Ok(t)
    }

    fn take_seed(&mut self) -> u64 {
        let s = TRAIN_SEED_BASE + (self.cfg.seed << 24) + self.next_seed;
        self.next_seed += 1;
        s
    }

    fn fresh_env(&mut self) -> Result<TrainEnv> {
        let seed = self.take_seed();
        TrainEnv::new(seed, &self.cfg)
    }

    /// Runs one window on every environment and applies one optimizer step.
    pub fn step(&mut self) -> Result<LogRecord> {
        let cfg = &self.cfg;
        let params = &self.params;
        let outputs: Vec<WindowOutput> = self
            .envs
            .par_iter_mut()
            .map(|env| run_window(env, params, cfg))
            .collect();

        // Reduce in environment order so the result does not depend on threads.
        let mut grads: Vec<Tensor> = self.params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        let mut loss_sum = 0.0;
        let mut terms = 0usize;
        let mut ended = Vec::new();
        let mut failed_envs = Vec::new();
        for (i, out) in outputs.into_iter().enumerate() {
            self.env_steps += out.steps as u64;
            ended.extend(out.ended.iter().copied());
            if out.failed || !out.loss_sum.is_finite() {
                failed_envs.push(i);
                continue;
            }
            loss_sum += out.loss_sum;
            terms += out.loss_terms;
            for (g, o) in grads.iter_mut().zip(&out.grads) {
                g.axpy(1.0, o);
            }
            for _ in 0..out.resets {
                let env = self.fresh_env()?;
                self.envs[i] = env;
            }
        }
        for &i in &failed_envs {
            warn!("update {}: environment {i} produced a non-finite loss; resetting it", self.update);
            self.envs[i] = self.fresh_env()?;
        }

        let lr = self.cfg.lr_at(self.update);
        let mut skipped = terms == 0;
        let mut grad_norm = 0.0;
        if !skipped {
            let k = 1.0 / terms as f64;
            grads.iter_mut().for_each(|g| g.scale_inplace(k));
            grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
            if grad_norm.is_finite() {
                self.adam.step(self.params.tensors_mut(), &grads, lr);
            } else {
                warn!("update {}: non-finite gradient norm; update skipped", self.update);
                skipped = true;
            }
        }
        let reached = ended.iter().filter(|e| e.reason == ResetReason::Reached).count();
        let mean = |f: fn(&EpisodeEnd) -> f64| {
            (!ended.is_empty()).then(|| ended.iter().map(f).sum::<f64>() / ended.len() as f64)
        };
        let rec = LogRecord {
            update: self.update,
            env_steps: self.env_steps,
            lr,
            loss: (terms > 0).then(|| loss_sum / terms as f64),
            grad_norm,
            skipped,
            episodes_ended: ended.len(),
            reached,
            mean_final_re_deg: mean(|e| e.final_re_deg),
            mean_final_te_mm: mean(|e| e.final_te_mm),
        };
        self.update += 1;
        Ok(rec)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = [
            ("config_sha256".to_string(), self.cfg.hash()),
            ("augment".to_string(), self.cfg.sim.augment.label()),
            ("updates".to_string(), self.update.to_string()),
            ("env_steps".to_string(), self.env_steps.to_string()),
            ("seed".to_string(), self.cfg.seed.to_string()),
        ];
        self.params.save(path, &meta)
    }
}

/// Runs one TBPTT window on one environment. Resets inside the window start
/// a new episode whose seed is assigned by the caller afterwards; until then
/// the environment keeps its finished episode, which is never stepped again.
fn run_window(env: &mut TrainEnv, params: &PolicyParams, cfg: &TrainConfig) -> WindowOutput {
    let mut tape = Tape::new();
    let pv = params.load(&mut tape, true);
    let mut hidden = tape.constant(env.hidden.0.clone());
    let mut total = None;
    let mut out = WindowOutput {
        grads: Vec::new(),
        loss_sum: 0.0,
        loss_terms: 0,
        steps: 0,
        ended: Vec::new(),
        resets: 0,
        failed: false,
    };
    let center = env.episode.scene.center();
    let mut des = None;
    for _ in 0..cfg.tbptt_window {
        let ep = &mut env.episode;
        let graph = ep.observe();
        // The episode cannot change inside a window, so its desired branch is shared.
        let built = match des {
            Some(d) => Ok(d),
            None => desired_branch(&mut tape, &pv, params, &graph),
        };
        let step = match built.and_then(|d| {
            des = Some(d);
            forward_step(&mut tape, &pv, params, &graph, d, hidden)
        }) {
            Ok(s) => s,
            Err(e) => {
                warn!("episode {}: forward failed: {e}", ep.seed);
                out.failed = true;
                break;
            }
        };
        hidden = step.hidden;
        let (v_gt, d_gt) = match pbvs_supervision(&ep.current, &ep.desired, &center) {
            Ok(v) => v,
            Err(e) => {
                warn!("episode {}: {e}", ep.seed);
                out.failed = true;
                break;
            }
        };
        if let Some(o) = step.out {
            let l = servo_loss_on_tape(&mut tape, o, &v_gt).expect("loss shapes");
            total = Some(match total {
                Some(t) => tape.add(t, l).expect("scalar add"),
                None => l,
            });
            out.loss_terms += 1;
        }
        let twist = decode_velocity(&output_from_tape(&tape, step.out), d_gt);
        let advanced = twist.and_then(|t| ep.advance(&t));
        out.steps += 1;
        let reason = match advanced {
            Ok(()) => should_resample(ep, cfg),
            Err(_) => Some(ResetReason::Failure),
        };
        if let Some(reason) = reason {
            out.ended.push(EpisodeEnd {
                seed: ep.seed,
                steps: ep.step,
                final_re_deg: ep.rotation_error(),
                final_te_mm: ep.translation_error(),
                reason,
            });
            out.resets = 1;
            break;
        }
    }
    let grads = match total {
        Some(t) => {
            out.loss_sum = tape.value(t).item();
            let mut g = tape.backward(t);
            pv.iter()
                .zip(params.tensors())
                .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
                .collect()
        }
        None => params.tensors().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
    };
    out.grads = grads;
    if out.resets == 0 && !out.failed {
        env.hidden = HiddenState(tape.value(hidden).clone());
    }
    out
}

/// Where training writes its artifacts.
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("policy.ckpt")
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

/// Trains for `cfg.total_updates` updates, writing a JSONL log and periodic
/// checkpoints under `out_dir`.
pub fn train(cfg: TrainConfig, out_dir: &Path) -> Result<PolicyParams> {
    std::fs::create_dir_all(out_dir)?;
    let outputs = TrainOutputs {
        dir: out_dir.to_path_buf(),
    };
    std::fs::write(out_dir.join("train_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(outputs.log())?);
    let mut trainer = Trainer::new(cfg)?;
    let total = trainer.cfg.total_updates;
    let every = trainer.cfg.checkpoint_every.max(1);
    let start = std::time::Instant::now();
    while trainer.update < total {
        let rec = trainer.step()?;
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        if trainer.update % every == 0 || trainer.update == total {
            log.flush()?;
            trainer.save_checkpoint(&outputs.checkpoint())?;
            info!(
                "update {}/{total}: loss {:.4} env steps {} ({:.0} s)",
                trainer.update,
                rec.loss.unwrap_or(f64::NAN),
                trainer.env_steps,
                start.elapsed().as_secs_f64()
            );
        }
    }
    log.flush()?;
    Ok(trainer.params)
}
