//! Graph encoding of keypoints and their correspondence.
//!
//! Keypoints seen at the desired pose are clustered once per episode. Each
//! cluster gets a center keypoint, the member closest to the cluster mean.
//! Edges `E0` run from keypoints to their cluster center and `E1` connect
//! cluster centers. The current-frame edge sets drop keypoints that are
//! missing and clusters with no visible member.

use std::fmt::Write as _;

use log::warn;
use nalgebra::Vector3;
use rand::Rng;

use crate::correspondence::{
    apply_dropout, apply_mismatch, kmc_step, observability, update_kernels, AugmentConfig, CorrState,
};
use crate::error::{Error, Result};
use crate::geometry::{project, CameraModel, Pose};
use crate::scene::Scene;

/// Largest per-iteration message change, relative to the similarity range,
/// below which the exemplar set may be declared converged.
const MESSAGE_TOL: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinityPropagationParams {
    pub damping: f64,
    pub max_iter: usize,
    pub convergence_iter: usize,
}

impl Default for AffinityPropagationParams {
    fn default() -> Self {
        Self {
            damping: 0.9,
            max_iter: 200,
            convergence_iter: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub groups: Vec<Vec<usize>>,
    pub centers: Vec<usize>,
    /// Cluster index of every keypoint.
    pub cluster_of: Vec<usize>,
    /// False when the clustering hit its iteration cap before stabilizing.
    pub converged: bool,
}

impl ClusterAssignment {
    /// Builds an assignment from explicit groups, choosing each center as the
    /// member nearest the group mean (lowest index on ties).
    pub fn from_groups(groups: Vec<Vec<usize>>, keypoints: &[[f64; 2]]) -> Result<Self> {
        let n = keypoints.len();
        let mut cluster_of = vec![usize::MAX; n];
        for (c, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Config(format!("cluster {c} is empty")));
            }
            for &j in g {
                if j >= n {
                    return Err(Error::IndexOutOfRange {
                        op: "ClusterAssignment::from_groups",
                        index: j,
                        len: n,
                    });
                }
                if cluster_of[j] != usize::MAX {
                    return Err(Error::Config(format!("keypoint {j} assigned twice")));
                }
                cluster_of[j] = c;
            }
        }
        if let Some(j) = cluster_of.iter().position(|&c| c == usize::MAX) {
            return Err(Error::Config(format!("keypoint {j} not assigned")));
        }
        let centers = groups.iter().map(|g| center_of(g, keypoints)).collect();
        Ok(Self {
            groups,
            centers,
            cluster_of,
            converged: true,
        })
    }

    /// One cluster per keypoint.
    pub fn singletons(n: usize) -> Self {
        Self {
            groups: (0..n).map(|i| vec![i]).collect(),
            centers: (0..n).collect(),
            cluster_of: (0..n).collect(),
            converged: true,
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.groups.len()
    }

    pub fn num_keypoints(&self) -> usize {
        self.cluster_of.len()
    }
}

/// Distances within this fraction of the group's largest distance count as ties.
const CENTER_TIE_TOL: f64 = 1e-9;

fn center_of(group: &[usize], kp: &[[f64; 2]]) -> usize {
    let inv = 1.0 / group.len() as f64;
    let mx = group.iter().map(|&j| kp[j][0]).sum::<f64>() * inv;
    let my = group.iter().map(|&j| kp[j][1]).sum::<f64>() * inv;
    let mut sorted = group.to_vec();
    sorted.sort_unstable();
    let d: Vec<f64> = sorted.iter().map(|&j| (kp[j][0] - mx).powi(2) + (kp[j][1] - my).powi(2)).collect();
    let d_min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let d_max = d.iter().copied().fold(0.0, f64::max);
    // Lowest index among the near-minimal ones, so rounding noise cannot flip the choice.
    let k = d.iter().position(|&x| x <= d_min + CENTER_TIE_TOL * d_max).unwrap_or(0);
    sorted[k]
}

/// Affinity Propagation on desired keypoints with negative squared Euclidean
/// similarity and the median similarity as preference.
pub fn cluster_desired(desired_kp: &[[f64; 2]], params: &AffinityPropagationParams) -> Result<ClusterAssignment> {
    let n = desired_kp.len();
    if n == 0 {
        return Err(Error::Empty("cluster_desired: no keypoints"));
    }
    if desired_kp.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::Config("cluster_desired: non-finite keypoint".into()));
    }
    if n == 1 {
        return ClusterAssignment::from_groups(vec![vec![0]], desired_kp);
    }

    let mut s = vec![0.0; n * n];
    let mut off_diag = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for k in 0..n {
            if i != k {
                let d = (desired_kp[i][0] - desired_kp[k][0]).powi(2)
                    + (desired_kp[i][1] - desired_kp[k][1]).powi(2);
                s[i * n + k] = -d;
                off_diag.push(-d);
            }
        }
    }
    off_diag.sort_by(|a, b| a.total_cmp(b));
    let m = off_diag.len();
    let preference = if m % 2 == 1 {
        off_diag[m / 2]
    } else {
        0.5 * (off_diag[m / 2 - 1] + off_diag[m / 2])
    };
    for i in 0..n {
        s[i * n + i] = preference;
    }

    let lambda = params.damping;
    let mut r = vec![0.0; n * n];
    let mut a = vec![0.0; n * n];
    let mut prev_exemplars: Vec<bool> = vec![false; n];
    let mut stable = 0;
    let mut converged = false;
    let mut tmp = vec![0.0; n];

    let s_scale = off_diag[0].abs().max(f64::MIN_POSITIVE);
    for _ in 0..params.max_iter {
        let mut max_delta: f64 = 0.0;
        // Responsibilities.
        for i in 0..n {
            let row = i * n;
            let (mut max1, mut max2, mut arg) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for k in 0..n {
                let v = a[row + k] + s[row + k];
                if v > max1 {
                    max2 = max1;
                    max1 = v;
                    arg = k;
                } else if v > max2 {
                    max2 = v;
                }
            }
            for k in 0..n {
                let competitor = if k == arg { max2 } else { max1 };
                let new = s[row + k] - competitor;
                let old = r[row + k];
                r[row + k] = lambda * old + (1.0 - lambda) * new;
                max_delta = max_delta.max((r[row + k] - old).abs());
            }
        }
        // Availabilities.
        for k in 0..n {
            let mut sum_pos = 0.0;
            for i in 0..n {
                let v = r[i * n + k];
                tmp[i] = if i == k { v } else { v.max(0.0) };
                sum_pos += tmp[i];
            }
            for i in 0..n {
                let new = if i == k {
                    sum_pos - tmp[k]
                } else {
                    (sum_pos - tmp[i]).min(0.0)
                };
                let old = a[i * n + k];
                a[i * n + k] = lambda * old + (1.0 - lambda) * new;
                max_delta = max_delta.max((a[i * n + k] - old).abs());
            }
        }
        let exemplars: Vec<bool> = (0..n).map(|k| a[k * n + k] + r[k * n + k] > 0.0).collect();
        // A stable exemplar set only counts once the messages have settled;
        // damped runs can otherwise sit on a transient exemplar set for the
        // whole stability window.
        let settled = max_delta <= MESSAGE_TOL * s_scale;
        if exemplars == prev_exemplars && exemplars.iter().any(|&e| e) && settled {
            stable += 1;
            if stable >= params.convergence_iter {
                converged = true;
                break;
            }
        } else {
            stable = 0;
            prev_exemplars = exemplars;
        }
    }
    if !converged {
        warn!("affinity propagation did not converge on {n} keypoints; using the last assignment");
    }

    let exemplars: Vec<usize> = (0..n).filter(|&k| prev_exemplars[k]).collect();
    let groups = if exemplars.is_empty() {
        vec![(0..n).collect::<Vec<_>>()]
    } else {
        let mut groups = vec![Vec::new(); exemplars.len()];
        for i in 0..n {
            let c = match exemplars.iter().position(|&e| e == i) {
                Some(c) => c,
                None => {
                    let mut best = 0;
                    for (c, &e) in exemplars.iter().enumerate() {
                        if s[i * n + e] > s[i * n + exemplars[best]] {
                            best = c;
                        }
                    }
                    best
                }
            };
            groups[c].push(i);
        }
        groups
    };
    let mut assignment = ClusterAssignment::from_groups(groups, desired_kp)?;
    assignment.converged = converged;
    Ok(assignment)
}

/// Dense boolean adjacency, `get(i, j)` is an edge from source `j` to target `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<bool>,
}

impl EdgeMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged edge matrix");
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v != 0);
            }
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// (source, target) pairs in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.count());
        for i in 0..self.rows {
            for j in 0..self.cols {
                if self.get(i, j) {
                    out.push((j, i));
                }
            }
        }
        out
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j) as u8).collect())
            .collect()
    }
}

pub fn build_desired_edges(clusters: &ClusterAssignment, n: usize) -> (EdgeMatrix, EdgeMatrix) {
    let nc = clusters.num_clusters();
    let mut e0 = EdgeMatrix::zeros(nc, n);
    for (i, g) in clusters.groups.iter().enumerate() {
        for &j in g {
            e0.set(i, j, true);
        }
    }
    let mut e1 = EdgeMatrix::zeros(nc, nc);
    for i in 0..nc {
        for j in 0..nc {
            e1.set(i, j, i != j);
        }
    }
    (e0, e1)
}

pub fn build_current_edges(clusters: &ClusterAssignment, visible: &[bool]) -> (EdgeMatrix, EdgeMatrix) {
    let nc = clusters.num_clusters();
    let n = visible.len();
    let mut e0 = EdgeMatrix::zeros(nc, n);
    let mut active = vec![false; nc];
    for (i, g) in clusters.groups.iter().enumerate() {
        for &j in g {
            if visible[j] {
                e0.set(i, j, true);
                active[i] = true;
            }
        }
    }
    let mut e1 = EdgeMatrix::zeros(nc, nc);
    for i in 0..nc {
        for j in 0..nc {
            e1.set(i, j, i != j && active[i] && active[j]);
        }
    }
    (e0, e1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServoGraph {
    pub desired_kp: Vec<[f64; 2]>,
    /// NaN for keypoints that are not visible; never read those entries.
    pub current_kp: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    pub clusters: ClusterAssignment,
    pub e0_star: EdgeMatrix,
    pub e1_star: EdgeMatrix,
    pub e0_t: EdgeMatrix,
    pub e1_t: EdgeMatrix,
}

impl ServoGraph {
    /// Assembles a graph from desired keypoints, current observations and a
    /// clustering. Invisible current entries are replaced by the sentinel.
    pub fn new(
        desired_kp: Vec<[f64; 2]>,
        mut current_kp: Vec<[f64; 2]>,
        visible: Vec<bool>,
        clusters: ClusterAssignment,
    ) -> Self {
        let n = desired_kp.len();
        assert_eq!(current_kp.len(), n);
        assert_eq!(visible.len(), n);
        for (kp, &v) in current_kp.iter_mut().zip(&visible) {
            if !v {
                *kp = [f64::NAN, f64::NAN];
            }
        }
        let (e0_star, e1_star) = build_desired_edges(&clusters, n);
        let (e0_t, e1_t) = build_current_edges(&clusters, &visible);
        Self {
            desired_kp,
            current_kp,
            visible,
            clusters,
            e0_star,
            e1_star,
            e0_t,
            e1_t,
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.desired_kp.len()
    }

    pub fn num_visible(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// Clusters with at least one visible member.
    pub fn active_clusters(&self) -> Vec<bool> {
        let mut active = vec![false; self.clusters.num_clusters()];
        for (j, &v) in self.visible.iter().enumerate() {
            if v {
                active[self.clusters.cluster_of[j]] = true;
            }
        }
        active
    }

    /// Desired-pose positions of the cluster centers.
    pub fn center_positions(&self) -> Vec<[f64; 2]> {
        self.clusters.centers.iter().map(|&c| self.desired_kp[c]).collect()
    }

    /// Mean distance between visible current and desired keypoints.
    pub fn mean_keypoint_error(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for j in 0..self.num_keypoints() {
            if self.visible[j] {
                let c = self.current_kp[j];
                let d = self.desired_kp[j];
                sum += ((c[0] - d[0]).powi(2) + (c[1] - d[1]).powi(2)).sqrt();
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Plain-text adjacency dump, one `TAG target source` line per edge.
    pub fn adjacency_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# keypoints {} clusters {}", self.num_keypoints(), self.clusters.num_clusters());
        for (tag, m) in [
            ("E0*", &self.e0_star),
            ("E1*", &self.e1_star),
            ("E0t", &self.e0_t),
            ("E1t", &self.e1_t),
        ] {
            for (src, tgt) in m.edges() {
                let _ = writeln!(out, "{tag} {tgt} {src}");
            }
        }
        out
    }
}

/// Parses an adjacency dump into (E0*, E1*, E0t, E1t).
pub fn parse_adjacency(text: &str) -> Result<[EdgeMatrix; 4]> {
    let mut dims = None;
    let mut edges: [Vec<(usize, usize)>; 4] = Default::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_start_matches('#').split_whitespace().collect();
        if line.starts_with('#') {
            if fields.len() == 4 && fields[0] == "keypoints" && fields[2] == "clusters" {
                let n = fields[1].parse::<usize>();
                let c = fields[3].parse::<usize>();
                if let (Ok(n), Ok(c)) = (n, c) {
                    dims = Some((n, c));
                }
            }
            continue;
        }
        let bad = || Error::Config(format!("adjacency line {}: `{line}`", lineno + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let slot = match fields[0] {
            "E0*" => 0,
            "E1*" => 1,
            "E0t" => 2,
            "E1t" => 3,
            _ => return Err(bad()),
        };
        let t = fields[1].parse::<usize>().map_err(|_| bad())?;
        let s = fields[2].parse::<usize>().map_err(|_| bad())?;
        edges[slot].push((t, s));
    }
    let (n, nc) = dims.ok_or_else(|| Error::Config("adjacency dump missing header".into()))?;
    let shapes = [(nc, n), (nc, nc), (nc, n), (nc, nc)];
    let mut out: [EdgeMatrix; 4] = std::array::from_fn(|k| EdgeMatrix::zeros(shapes[k].0, shapes[k].1));
    for k in 0..4 {
        for &(t, s) in &edges[k] {
            if t >= out[k].rows || s >= out[k].cols {
                return Err(Error::IndexOutOfRange {
                    op: "parse_adjacency",
                    index: t.max(s),
                    len: out[k].rows.max(out[k].cols),
                });
            }
            out[k].set(t, s, true);
        }
    }
    Ok(out)
}

/// Per-episode observation pipeline: projects the scene at the current pose,
/// simulates intermittent visibility and augmentations, and builds the graph.
///
/// Graph nodes are the scene points that are in view at the desired pose;
/// the clustering and desired-pose edges are computed once at construction.
#[derive(Clone, Debug)]
pub struct Observer {
    pub camera: CameraModel,
    pub augment: AugmentConfig,
    pub desired_pose: Pose,
    /// Scene point index of every graph node.
    pub point_index: Vec<usize>,
    pub desired_kp: Vec<[f64; 2]>,
    pub clusters: ClusterAssignment,
    pub corr: CorrState,
    started: bool,
}

impl Observer {
    pub fn new<R: Rng + ?Sized>(
        scene: &Scene,
        camera: CameraModel,
        desired_pose: Pose,
        initial_pose: Pose,
        augment: AugmentConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (kp, in_view) = project(&camera, &desired_pose, &scene.points);
        let point_index: Vec<usize> = (0..kp.len()).filter(|&i| in_view[i]).collect();
        let desired_kp: Vec<[f64; 2]> = point_index.iter().map(|&i| kp[i]).collect();
        let clusters = if desired_kp.is_empty() {
            ClusterAssignment {
                groups: Vec::new(),
                centers: Vec::new(),
                cluster_of: Vec::new(),
                converged: true,
            }
        } else {
            cluster_desired(&desired_kp, &AffinityPropagationParams::default())?
        };
        let corr = CorrState::new(desired_kp.len(), scene.radius_m, initial_pose, rng);
        Ok(Self {
            camera,
            augment,
            desired_pose,
            point_index,
            desired_kp,
            clusters,
            corr,
            started: false,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.point_index.len()
    }

    fn node_points(&self, scene: &Scene) -> Vec<Vector3<f64>> {
        self.point_index.iter().map(|&i| scene.points[i]).collect()
    }

    /// Observation at `current_pose` after `dt` seconds since the previous call
    /// (ignored on the first call, which draws the initial visibility).
    pub fn observe<R: Rng + ?Sized>(&mut self, scene: &Scene, current_pose: &Pose, dt: f64, rng: &mut R) -> ServoGraph {
        let pts = self.node_points(scene);
        let (kp, in_view) = project(&self.camera, current_pose, &pts);

        self.corr.kernel_centers = update_kernels(&self.corr, current_pose);
        let p = observability(&kp, &self.corr.kernel_centers, self.corr.sigma());
        self.corr.p = p;
        if self.augment.intermittent {
            if self.started {
                kmc_step(&mut self.corr, dt, rng);
            } else {
                let p = self.corr.p.clone();
                for (v, p) in self.corr.visible.iter_mut().zip(p) {
                    *v = rng.random::<f64>() < p;
                }
            }
        } else {
            self.corr.visible.iter_mut().for_each(|v| *v = true);
        }
        self.started = true;

        let mut visible: Vec<bool> = in_view
            .iter()
            .zip(&self.corr.visible)
            .map(|(&a, &b)| a && b)
            .collect();
        if self.augment.dropout_fraction > 0.0 {
            visible = apply_dropout(
                &visible,
                &self.corr.p,
                self.augment.dropout_fraction,
                self.augment.dropout_mode,
                rng,
            );
        }
        let identity: Vec<usize> = (0..kp.len()).collect();
        let map = if self.augment.mismatch_fraction > 0.0 {
            apply_mismatch(&identity, &visible, self.augment.mismatch_fraction, rng)
        } else {
            identity
        };
        let current: Vec<[f64; 2]> = map.iter().map(|&m| kp[m]).collect();
        ServoGraph::new(self.desired_kp.clone(), current, visible, self.clusters.clone())
    }

    /// True depths of graph nodes at a pose.
    pub fn node_depths(&self, scene: &Scene, pose: &Pose) -> Vec<f64> {
        crate::geometry::depths(pose, &self.node_points(scene))
    }
}
