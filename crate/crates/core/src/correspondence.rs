//! Non-ideal correspondence simulation.
//!
//! Each keypoint carries an observability probability driven by three
//! Gaussian kernels that drift across the normalized image plane as the
//! camera moves. Visibility flips follow a two-state kinetic Monte Carlo
//! process whose dwell times scale with that probability. Mismatch and
//! dropout augmentations corrupt the visible set further.

use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::geometry::{axis_angle, Pose};
use crate::scene::KeypointMode;

pub const NUM_KERNELS: usize = 3;
/// Half-width of the normalized-plane window swept by kernel centers.
pub const KERNEL_WINDOW: f64 = 0.4;
/// Kernel width as a multiple of the scene radius, applied in the normalized plane.
pub const KERNEL_SIGMA_FACTOR: f64 = 0.3;
pub const TAU_RANGE: [f64; 2] = [0.5, 5.0];
/// Probabilities this close to 0 or 1 pin the keypoint state.
const PIN_EPS: f64 = 1e-12;
const MAX_FLIPS_PER_STEP: usize = 100_000;

/// One coordinate track of 1-D gradient noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PerlinTrack {
    pub seed: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PerlinTrack {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Gradient at lattice point `i`, uniform in [-1, 1].
    fn gradient(&self, i: i64) -> f64 {
        let h = splitmix64(self.seed ^ splitmix64(i as u64));
        (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Classic 1-D gradient noise, scaled to [-1, 1]. Zero at integer `t`.
pub fn perlin1d(track: &PerlinTrack, t: f64) -> f64 {
    let i0 = t.floor();
    let f = t - i0;
    let i0 = i0 as i64;
    let n0 = track.gradient(i0) * f;
    let n1 = track.gradient(i0 + 1) * (f - 1.0);
    2.0 * (n0 + fade(f) * (n1 - n0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    Uniform,
    #[default]
    Weighted,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub mismatch_fraction: f64,
    pub dropout_fraction: f64,
    pub dropout_mode: DropoutMode,
    pub keypoint_mode: KeypointMode,
    /// Kernel-driven intermittent visibility (the KMC process).
    pub intermittent: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mismatch_fraction: 0.1,
            dropout_fraction: 0.1,
            dropout_mode: DropoutMode::Weighted,
            keypoint_mode: KeypointMode::Clustered,
            intermittent: true,
        }
    }
}

impl AugmentConfig {
    /// Perfect correspondence on clustered scenes.
    pub fn clean() -> Self {
        Self {
            mismatch_fraction: 0.0,
            dropout_fraction: 0.0,
            dropout_mode: DropoutMode::Off,
            keypoint_mode: KeypointMode::Clustered,
            intermittent: false,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        for (name, v) in [
            ("mismatch_fraction", self.mismatch_fraction),
            ("dropout_fraction", self.dropout_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(crate::Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Short label in the CK/UK + UKD/WKD + KM notation.
    pub fn label(&self) -> String {
        let mut parts = vec![match self.keypoint_mode {
            KeypointMode::Clustered => "CK",
            KeypointMode::Uniform => "UK",
        }
        .to_string()];
        if self.dropout_fraction > 0.0 {
            match self.dropout_mode {
                DropoutMode::Uniform => parts.push("UKD".into()),
                DropoutMode::Weighted => parts.push("WKD".into()),
                DropoutMode::Off => {}
            }
        }
        if self.mismatch_fraction > 0.0 {
            parts.push("KM".into());
        }
        parts.join("+")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrState {
    pub p: Vec<f64>,
    pub tau: Vec<f64>,
    pub visible: Vec<bool>,
    pub kernel_centers: [[f64; 2]; NUM_KERNELS],
    /// Tracks for (x₀, y₀, x₁, y₁, x₂, y₂).
    pub perlin_tracks: [PerlinTrack; 2 * NUM_KERNELS],
    /// Per-track lattice offset so kernels start at distinct positions.
    pub track_phase: [f64; 2 * NUM_KERNELS],
    pub motion_origin: Pose,
    pub scene_radius: f64,
}

impl CorrState {
    /// Fresh state for `n` keypoints; all keypoints start visible with p = 1
    /// until [`CorrState::reset_visibility`] is called.
    pub fn new<R: Rng + ?Sized>(n: usize, scene_radius: f64, motion_origin: Pose, rng: &mut R) -> Self {
        let tau = (0..n)
            .map(|_| rng.random_range(TAU_RANGE[0]..TAU_RANGE[1]))
            .collect();
        let perlin_tracks = std::array::from_fn(|_| PerlinTrack::new(rng.random()));
        let track_phase = std::array::from_fn(|_| rng.random_range(0.0..1024.0));
        let mut state = Self {
            p: vec![1.0; n],
            tau,
            visible: vec![true; n],
            kernel_centers: [[0.0; 2]; NUM_KERNELS],
            perlin_tracks,
            track_phase,
            motion_origin,
            scene_radius,
        };
        state.kernel_centers = update_kernels(&state, &motion_origin);
        state
    }

    pub fn sigma(&self) -> f64 {
        KERNEL_SIGMA_FACTOR * self.scene_radius
    }

    /// Recomputes p at the given keypoints and draws visibility from the
    /// stationary distribution (visible with probability p).
    pub fn reset_visibility<R: Rng + ?Sized>(&mut self, keypoints: &[[f64; 2]], rng: &mut R) {
        self.p = observability(keypoints, &self.kernel_centers, self.sigma());
        for (v, &p) in self.visible.iter_mut().zip(&self.p) {
            *v = rng.random::<f64>() < p;
        }
    }
}

/// Kernel-center drift parameter for the motion since the episode start.
pub fn motion_parameter(origin: &Pose, current: &Pose, scene_radius: f64) -> f64 {
    let rel_rot = origin.rotation.transpose() * current.rotation;
    let angle = axis_angle(&rel_rot).norm();
    let dist = (current.translation - origin.translation).norm();
    0.2 / PI * angle + 0.2 / scene_radius * dist
}

/// Kernel centers for the camera's current pose.
pub fn update_kernels(state: &CorrState, current_pose: &Pose) -> [[f64; 2]; NUM_KERNELS] {
    let s = motion_parameter(&state.motion_origin, current_pose, state.scene_radius);
    std::array::from_fn(|j| {
        std::array::from_fn(|c| {
            let k = 2 * j + c;
            KERNEL_WINDOW * perlin1d(&state.perlin_tracks[k], s + state.track_phase[k])
        })
    })
}

/// pᵢ = maxⱼ exp(−‖sᵢ − kⱼ‖² / 2σ²). Non-finite keypoints get p = 0.
pub fn observability(keypoints: &[[f64; 2]], kernel_centers: &[[f64; 2]], sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    keypoints
        .iter()
        .map(|s| {
            if !(s[0].is_finite() && s[1].is_finite()) {
                return 0.0;
            }
            kernel_centers
                .iter()
                .map(|k| {
                    let dx = s[0] - k[0];
                    let dy = s[1] - k[1];
                    (-(dx * dx + dy * dy) * inv).exp()
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KmcFlip {
    pub index: usize,
    /// Time of the flip measured from the start of the step.
    pub offset: f64,
    pub now_visible: bool,
}

/// Advances every keypoint's visibility by `dt` seconds.
///
/// Dwell times are exponential with means pτ (visible) and (1 − p)τ
/// (missing); several flips may occur within one step. Rates are held
/// constant over the step.
pub fn kmc_step<R: Rng + ?Sized>(state: &mut CorrState, dt: f64, rng: &mut R) -> Vec<KmcFlip> {
    assert!(dt > 0.0, "kmc_step requires dt > 0");
    let mut flips = Vec::new();
    for i in 0..state.visible.len() {
        let p = state.p[i];
        if p >= 1.0 - PIN_EPS {
            state.visible[i] = true;
            continue;
        }
        if p <= PIN_EPS {
            state.visible[i] = false;
            continue;
        }
        let tau = state.tau[i];
        let mut elapsed = 0.0;
        for _ in 0..MAX_FLIPS_PER_STEP {
            let mean = if state.visible[i] { p * tau } else { (1.0 - p) * tau };
            let wait: f64 = mean * rng.sample::<f64, _>(Exp1);
            if elapsed + wait >= dt {
                break;
            }
            elapsed += wait;
            state.visible[i] = !state.visible[i];
            flips.push(KmcFlip {
                index: i,
                offset: elapsed,
                now_visible: state.visible[i],
            });
        }
    }
    flips
}

/// Swaps the current-frame sources of ⌊fraction · N_visible⌋ visible keypoints
/// by a random cyclic permutation, so none keeps its own source.
pub fn apply_mismatch<R: Rng + ?Sized>(
    correspondence: &[usize],
    visible: &[bool],
    fraction: f64,
    rng: &mut R,
) -> Vec<usize> {
    let mut out = correspondence.to_vec();
    let candidates: Vec<usize> = (0..visible.len()).filter(|&i| visible[i]).collect();
    let k = (fraction * candidates.len() as f64 + 1e-9).floor() as usize;
    if k < 2 {
        return out;
    }
    let mut chosen: Vec<usize> = index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|j| candidates[j])
        .collect();
    chosen.sort_unstable();
    // Sattolo: a uniformly random single cycle, hence a derangement.
    let mut perm: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    for (slot, &src) in perm.iter().enumerate() {
        out[chosen[slot]] = correspondence[chosen[src]];
    }
    out
}

/// Drops ⌊fraction · N_visible⌋ visible keypoints, uniformly or with weights
/// proportional to 1 − p (sampled without replacement).
pub fn apply_dropout<R: Rng + ?Sized>(
    visible: &[bool],
    p: &[f64],
    fraction: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Vec<bool> {
    let mut out = visible.to_vec();
    if mode == DropoutMode::Off {
        return out;
    }
    let candidates: Vec<usize> = (0..visible.len()).filter(|&i| visible[i]).collect();
    let k = (fraction * candidates.len() as f64 + 1e-9).floor() as usize;
    if k == 0 {
        return out;
    }
    let weights: Vec<f64> = candidates.iter().map(|&i| (1.0 - p[i]).max(0.0)).collect();
    let weighted = mode == DropoutMode::Weighted && weights.iter().filter(|&&w| w > 0.0).count() >= k;
    if weighted {
        // Efraimidis–Spirakis keys: ln(u)/w, keep the k largest.
        let mut keyed: Vec<(f64, usize)> = candidates
            .iter()
            .zip(&weights)
            .map(|(&i, &w)| {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                let key = if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY };
                (key, i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in keyed.iter().take(k) {
            out[i] = false;
        }
    } else {
        for j in index::sample(rng, candidates.len(), k) {
            out[candidates[j]] = false;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state_with(p: f64, tau: f64, n: usize) -> CorrState {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = CorrState::new(n, 0.2, Pose::identity(), &mut rng);
        s.p = vec![p; n];
        s.tau = vec![tau; n];
        s
    }

    #[test]
    fn perlin_vanishes_on_lattice() {
        let track = PerlinTrack::new(42);
        for i in 0..100 {
            assert_eq!(perlin1d(&track, i as f64), 0.0);
        }
    }

    #[test]
    fn perlin_is_lipschitz_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let track = PerlinTrack::new(7);
        let eps = 1e-4;
        for _ in 0..10_000 {
            let t: f64 = rng.random_range(0.0..500.0);
            let a = perlin1d(&track, t);
            let b = perlin1d(&track, t + eps);
            assert!((a - b).abs() <= 4.0 * eps);
            assert!((-1.0..=1.0).contains(&a));
        }
        assert_eq!(perlin1d(&track, 3.7), perlin1d(&PerlinTrack::new(7), 3.7));
    }

    #[test]
    fn kernels_static_without_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let origin = Pose::from_translation(Vector3::new(0.1, 0.2, 0.6));
        let s = CorrState::new(5, 0.2, origin, &mut rng);
        assert_eq!(motion_parameter(&origin, &origin, 0.2), 0.0);
        assert_eq!(update_kernels(&s, &origin), s.kernel_centers);
    }

    #[test]
    fn motion_parameter_examples() {
        let o = Pose::identity();
        let half_turn = Pose::new(exp_so3(&Vector3::new(0.0, PI, 0.0)), Vector3::zeros());
        assert!((motion_parameter(&o, &half_turn, 0.2) - 0.2).abs() < 1e-12);
        let combo = Pose::new(
            exp_so3(&Vector3::new(PI / 2.0, 0.0, 0.0)),
            Vector3::new(0.0, 0.2, 0.0),
        );
        assert!((motion_parameter(&o, &combo, 0.2) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn observability_examples() {
        let k = [[0.1, 0.1], [-0.2, 0.0], [0.3, -0.3]];
        let sigma = 0.06;
        let p = observability(&[[0.1, 0.1], [-0.2 + sigma, 0.0]], &k, sigma);
        assert_eq!(p[0], 1.0);
        assert!((p[1] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((p[1] - 0.6065).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kps: Vec<[f64; 2]> = (0..200)
            .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
            .collect();
        let fast = observability(&kps, &k, sigma);
        for (s, got) in kps.iter().zip(fast) {
            let mut best = 0.0f64;
            for c in &k {
                let d2 = (s[0] - c[0]).powi(2) + (s[1] - c[1]).powi(2);
                best = best.max((-d2 / (2.0 * sigma * sigma)).exp());
            }
            assert!((best - got).abs() < 1e-12);
        }
    }

    #[test]
    fn kmc_pins_degenerate_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = state_with(1.0, 2.0, 10);
        s.visible = vec![false; 10];
        for _ in 0..1000 {
            kmc_step(&mut s, 0.04, &mut rng);
            assert!(s.visible.iter().all(|&v| v));
        }
        let mut s = state_with(0.0, 2.0, 10);
        for _ in 0..1000 {
            kmc_step(&mut s, 0.04, &mut rng);
            assert!(s.visible.iter().all(|&v| !v));
        }
    }

    #[test]
    fn kmc_short_run_dwell_times() {
        // Mean dwell times pτ and (1 − p)τ from flip timestamps.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, tau, dt) = (0.5, 2.0, 0.04);
        let mut s = state_with(p, tau, 1);
        let mut t = 0.0;
        let mut last_flip: Option<f64> = None;
        let (mut vis_sum, mut vis_n, mut mis_sum, mut mis_n) = (0.0, 0usize, 0.0, 0usize);
        while vis_n + mis_n < 20_000 {
            for f in kmc_step(&mut s, dt, &mut rng) {
                let at = t + f.offset;
                if let Some(prev) = last_flip {
                    if f.now_visible {
                        mis_sum += at - prev;
                        mis_n += 1;
                    } else {
                        vis_sum += at - prev;
                        vis_n += 1;
                    }
                }
                last_flip = Some(at);
            }
            t += dt;
        }
        let vis_mean = vis_sum / vis_n as f64;
        let mis_mean = mis_sum / mis_n as f64;
        assert!((vis_mean - 1.0).abs() < 0.05, "{vis_mean}");
        assert!((mis_mean - 1.0).abs() < 0.05, "{mis_mean}");
    }

    #[test]
    fn mismatch_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let id: Vec<usize> = (0..100).collect();
        let vis = vec![true; 100];
        assert_eq!(apply_mismatch(&id, &vis, 0.0, &mut rng), id);
        let out = apply_mismatch(&id, &vis, 0.1, &mut rng);
        let changed: Vec<usize> = (0..100).filter(|&i| out[i] != i).collect();
        assert_eq!(changed.len(), 10);
        let mut a: Vec<usize> = changed.iter().map(|&i| out[i]).collect();
        let mut b = changed.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        // Fewer than two selected: no-op.
        assert_eq!(apply_mismatch(&id[..10], &vis[..10], 0.15, &mut rng), id[..10].to_vec());
    }

    #[test]
    fn dropout_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut vis = vec![true; 50];
        vis.extend(vec![false; 10]);
        let p = vec![0.5; 60];
        assert_eq!(apply_dropout(&vis, &p, 0.0, DropoutMode::Uniform, &mut rng), vis);
        let out = apply_dropout(&vis, &p, 0.1, DropoutMode::Uniform, &mut rng);
        assert_eq!(vis.iter().filter(|&&v| v).count() - out.iter().filter(|&&v| v).count(), 5);
        assert!(out[50..].iter().all(|&v| !v));
        let out = apply_dropout(&vis, &p, 0.1, DropoutMode::Weighted, &mut rng);
        assert_eq!(out.iter().filter(|&&v| v).count(), 45);
        assert_eq!(apply_dropout(&vis, &p, 0.5, DropoutMode::Off, &mut rng), vis);
    }

    #[test]
    fn weighted_dropout_prefers_low_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 20;
        let vis = vec![true; n];
        let p: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let mut counts = vec![0usize; n];
        for _ in 0..10_000 {
            let out = apply_dropout(&vis, &p, 0.1, DropoutMode::Weighted, &mut rng);
            for i in 0..n {
                if !out[i] {
                    counts[i] += 1;
                }
            }
        }
        // Spearman rank correlation between p and drop frequency.
        let ranks = |v: &[f64]| -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            let mut r = vec![0.0; v.len()];
            for (rank, &i) in idx.iter().enumerate() {
                r[i] = rank as f64;
            }
            r
        };
        let rp = ranks(&p);
        let rc = ranks(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
        let m = (n as f64 - 1.0) / 2.0;
        let cov: f64 = rp.iter().zip(&rc).map(|(a, b)| (a - m) * (b - m)).sum();
        let var: f64 = rp.iter().map(|a| (a - m).powi(2)).sum();
        let rho = cov / var;
        assert!(rho < -0.95, "rank correlation {rho}");
        assert!(counts[0] > counts[n - 1]);
    }
}
