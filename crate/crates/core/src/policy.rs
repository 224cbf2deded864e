//! Graph servo policy: per-cluster attention over keypoints at both poses,
//! fusion, message passing among cluster centers, a graph-convolutional GRU,
//! and a distance-decoupled velocity head.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Twist;
use crate::graph::ServoGraph;

/// `‖v_gt‖` is clamped to at least this before inverting the norm transform.
pub const MIN_NORM_TARGET: f64 = 1e-4;
pub const NORM_LOSS_WEIGHT: f64 = 0.1;
const NORM_EPS: f64 = 1e-5;
const DIR_EPS: f64 = 1e-12;

/// Normalization applied after each center-propagation layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per node, over features.
    #[default]
    Layer,
    /// Per feature, over the active nodes of the graph, with a learned mean scale.
    Graph,
}

impl NormKind {
    fn as_str(self) -> &'static str {
        match self {
            NormKind::Layer => "layer",
            NormKind::Graph => "graph",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub norm: NormKind,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            norm: NormKind::Layer,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Mlp2 {
    l1: Lin,
    l2: Lin,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    alpha: Option<usize>,
}

/// Edge-MLP message passing with max aggregation and a residual path. The
/// first message layer on `(x_j ‖ x_i ‖ p_j − p_i)` is split into its
/// source, target and position blocks so it runs per node, not per edge.
#[derive(Clone, Copy, Debug)]
struct PerConv {
    msg_src: Lin,
    msg_tgt: usize,
    msg_pos: usize,
    msg2: Lin,
    update: Lin,
    /// Projection for the residual when input width differs from output.
    residual: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    embed: Mlp2,
    query: Lin,
    key: Lin,
    value: Lin,
    pos_enc: Mlp2,
    attn: Mlp2,
    fuse: Mlp2,
    prop: [PerConv; 2],
    prop_norm: [Norm; 2],
    gru_z: PerConv,
    gru_r: PerConv,
    gru_h: PerConv,
    head: Mlp2,
}

/// Learned weights plus the layout that names them.
#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

struct Builder<'a, R: Rng + ?Sized> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        self.weight_block(name, fan_in, fan_out, fan_in)
    }

    /// Glorot-uniform `rows × cols` block of a layer whose full fan-in is `fan_in`.
    fn weight_block(&mut self, name: String, rows: usize, cols: usize, fan_in: usize) -> usize {
        let s = (6.0 / (fan_in + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-s..s)).collect();
        let t = Tensor::new(rows, cols, data).expect("shape");
        self.push(name, t)
    }

    fn lin(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Lin {
        let w = self.weight(format!("{name}.weight"), fan_in, fan_out);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Lin { w, b }
    }

    fn mlp2(&mut self, name: &str, fan_in: usize, mid: usize, out: usize) -> Mlp2 {
        Mlp2 {
            l1: self.lin(&format!("{name}.0"), fan_in, mid),
            l2: self.lin(&format!("{name}.1"), mid, out),
        }
    }

    fn norm(&mut self, name: &str, h: usize, kind: NormKind) -> Norm {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(1, h, 1.0));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(1, h));
        let alpha = match kind {
            NormKind::Layer => None,
            NormKind::Graph => Some(self.push(format!("{name}.alpha"), Tensor::full(1, h, 1.0))),
        };
        Norm { gamma, beta, alpha }
    }

    fn perconv(&mut self, name: &str, din: usize, h: usize) -> PerConv {
        // Blocks of one first layer with fan-in 2·din + 2.
        let joint = 2 * din + 2;
        let msg_src = Lin {
            w: self.weight_block(format!("{name}.msg.0.weight_src"), din, h, joint),
            b: self.push(format!("{name}.msg.0.bias"), Tensor::zeros(1, h)),
        };
        let msg_tgt = self.weight_block(format!("{name}.msg.0.weight_tgt"), din, h, joint);
        let msg_pos = self.weight_block(format!("{name}.msg.0.weight_pos"), 2, h, joint);
        let msg2 = self.lin(&format!("{name}.msg.1"), h, h);
        let update = self.lin(&format!("{name}.update"), h, h);
        let residual = (din != h).then(|| self.weight(format!("{name}.residual"), din, h));
        PerConv {
            msg_src,
            msg_tgt,
            msg_pos,
            msg2,
            update,
            residual,
        }
    }
}

impl PolicyParams {
    pub fn init<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        let h = config.hidden;
        if h == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng,
        };
        let layout = Layout {
            embed: b.mlp2("embed", 2, h, h),
            query: b.lin("ptconv.query", h, h),
            key: b.lin("ptconv.key", h, h),
            value: b.lin("ptconv.value", h, h),
            pos_enc: b.mlp2("ptconv.pos", 2, h, h),
            attn: b.mlp2("ptconv.attn", h, h, h),
            fuse: b.mlp2("fuse", 2 * h, h, h),
            prop: [b.perconv("prop0", h, h), b.perconv("prop1", h, h)],
            prop_norm: [b.norm("prop0.norm", h, config.norm), b.norm("prop1.norm", h, config.norm)],
            gru_z: b.perconv("gru.z", 2 * h, h),
            gru_r: b.perconv("gru.r", 2 * h, h),
            gru_h: b.perconv("gru.h", 2 * h, h),
            head: b.mlp2("head", h, h, 7),
        };
        Ok(Self {
            config,
            names: b.names,
            tensors: b.tensors,
            layout,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Pushes every parameter onto `tape`, as trainable leaves or constants.
    pub fn load(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Writes the tensor file and a `key value` manifest next to it
    /// (`<path>.manifest`). `meta` entries are appended to the manifest.
    pub fn save(&self, path: &Path, meta: &[(String, String)]) -> Result<()> {
        let records: Vec<(String, Tensor)> = self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect();
        checkpoint::save(path, &records)?;
        let mut m = String::new();
        let _ = writeln!(m, "format CNSCKPT1");
        let _ = writeln!(m, "hidden {}", self.config.hidden);
        let _ = writeln!(m, "norm {}", self.config.norm.as_str());
        let _ = writeln!(m, "tensors {}", self.names.len());
        let _ = writeln!(m, "scalars {}", self.num_scalars());
        let _ = writeln!(m, "layers {}", self.layer_names().join(","));
        for (k, v) in meta {
            let _ = writeln!(m, "{k} {v}");
        }
        std::fs::write(manifest_path(path), m)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`PolicyParams::save`].
    pub fn load_file(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let manifest = read_manifest(&manifest_path(path))?;
        let hidden: usize = manifest
            .get("hidden")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("manifest lacks `hidden`".into()))?;
        let norm = match manifest.get("norm").map(String::as_str) {
            None | Some("layer") => NormKind::Layer,
            Some("graph") => NormKind::Graph,
            Some(other) => return Err(Error::Checkpoint(format!("unknown norm `{other}`"))),
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = Self::init(PolicyConfig { hidden, norm }, &mut rng)?;
        let records = checkpoint::load(path)?;
        if records.len() != params.names.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors in file, layout expects {}",
                records.len(),
                params.names.len()
            )));
        }
        for ((name, t), (want, slot)) in records.into_iter().zip(params.names.iter().zip(params.tensors.iter_mut())) {
            if &name != want || t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` {:?} does not match `{want}` {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok((params, manifest))
    }

    /// Distinct layer prefixes in parameter order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in &self.names {
            let layer = n.rsplit_once('.').map_or(n.as_str(), |(a, _)| a).to_string();
            if out.last() != Some(&layer) {
                out.push(layer);
            }
        }
        out
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once(' ') {
            out.insert(k.to_string(), v.to_string());
        }
    }
    Ok(out)
}

/// Per-cluster recurrent state, `N_c × h`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState(pub Tensor);

impl HiddenState {
    pub fn zeros(num_clusters: usize, h: usize) -> Self {
        Self(Tensor::zeros(num_clusters, h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyOutput {
    pub v_dir: [f64; 6],
    pub l_pred: f64,
}

impl PolicyOutput {
    /// Output used when nothing is visible: no direction and a tiny norm.
    pub fn hold() -> Self {
        Self {
            v_dir: [0.0; 6],
            l_pred: norm_transform_inv(MIN_NORM_TARGET),
        }
    }

    fn from_row(v: &[f64]) -> Self {
        Self {
            v_dir: [v[0], v[1], v[2], v[3], v[4], v[5]],
            l_pred: v[6],
        }
    }
}

/// `T(x) = 1 + ELU(x)`.
pub fn norm_transform(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 + x
    } else {
        x.exp()
    }
}

/// Inverse of [`norm_transform`] on `(0, ∞)`.
pub fn norm_transform_inv(y: f64) -> f64 {
    if y >= 1.0 {
        y - 1.0
    } else {
        y.ln()
    }
}

/// Camera twist from a policy output and a scene-distance prior `d`.
pub fn decode_velocity(out: &PolicyOutput, d: f64) -> Result<Twist> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::InvalidDistancePrior(d));
    }
    let n = out.v_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Ok(Twist::zero());
    }
    let s = norm_transform(out.l_pred) / n;
    let v = &out.v_dir;
    Ok(Twist::new(
        Vector3::new(v[0], v[1], v[2]) * (s * d),
        Vector3::new(v[3], v[4], v[5]) * s,
    ))
}

/// `(1 − cos(v_dir, v_gt)) + 0.1 · (l_pred − T⁻¹(max(‖v_gt‖, 1e-4)))²`.
pub fn servo_loss(out: &PolicyOutput, v_gt: &[f64; 6]) -> f64 {
    let gn = v_gt.iter().map(|v| v * v).sum::<f64>().sqrt();
    let vn = (out.v_dir.iter().map(|v| v * v).sum::<f64>() + DIR_EPS).sqrt();
    let l_dir = if gn > 0.0 {
        let dot: f64 = out.v_dir.iter().zip(v_gt).map(|(a, b)| a * b).sum();
        1.0 - dot / (vn * gn)
    } else {
        0.0
    };
    let target = norm_transform_inv(gn.max(MIN_NORM_TARGET));
    l_dir + NORM_LOSS_WEIGHT * (out.l_pred - target).powi(2)
}

/// [`servo_loss`] on the tape for a `1 × 7` output row.
pub fn servo_loss_on_tape(tape: &mut Tape, out: Var, v_gt: &[f64; 6]) -> Result<Var> {
    let gn = v_gt.iter().map(|v| v * v).sum::<f64>().sqrt();
    let l = tape.slice_cols(out, 6, 7)?;
    let target = norm_transform_inv(gn.max(MIN_NORM_TARGET));
    let diff = tape.add_scalar(l, -target);
    let sq = tape.mul(diff, diff)?;
    let l_norm = tape.scale(sq, NORM_LOSS_WEIGHT);
    if gn == 0.0 {
        return Ok(l_norm);
    }
    let v = tape.slice_cols(out, 0, 6)?;
    let g = tape.constant(Tensor::row_vector(v_gt));
    let vg = tape.mul(v, g)?;
    let dot = tape.sum(vg);
    let vv = tape.mul(v, v)?;
    let vv = tape.sum(vv);
    let vv = tape.add_scalar(vv, DIR_EPS);
    let vn = tape.sqrt(vv);
    let cos = tape.div(dot, vn)?;
    let cos = tape.scale(cos, 1.0 / gn);
    let l_dir = tape.rsub_scalar(1.0, cos);
    tape.add(l_dir, l_norm)
}

/// Vars produced by one forward step.
pub struct StepVars {
    /// `1 × 7` output row, `None` when no keypoint is visible.
    pub out: Option<Var>,
    pub hidden: Var,
}

fn linear(t: &mut Tape, pv: &[Var], l: Lin, x: Var) -> Result<Var> {
    let y = t.matmul(x, pv[l.w])?;
    t.add(y, pv[l.b])
}

fn mlp2(t: &mut Tape, pv: &[Var], m: Mlp2, x: Var) -> Result<Var> {
    let y = linear(t, pv, m.l1, x)?;
    let y = t.elu(y);
    linear(t, pv, m.l2, y)
}

fn positions(rows: impl Iterator<Item = [f64; 2]>) -> Tensor {
    let data: Vec<f64> = rows.flatten().collect();
    let n = data.len() / 2;
    Tensor::new(n, 2, data).expect("shape")
}

fn norm(t: &mut Tape, pv: &[Var], n: Norm, x: Var) -> Result<Var> {
    let y = match n.alpha {
        None => {
            let mu = t.mean_cols(x)?;
            let c = t.sub(x, mu)?;
            let c2 = t.mul(c, c)?;
            let var = t.mean_cols(c2)?;
            let var = t.add_scalar(var, NORM_EPS);
            let sd = t.sqrt(var);
            t.div(c, sd)?
        }
        Some(alpha) => {
            let mu = t.mean_rows(x)?;
            let mu = t.mul(mu, pv[alpha])?;
            let c = t.sub(x, mu)?;
            let c2 = t.mul(c, c)?;
            let var = t.mean_rows(c2)?;
            let var = t.add_scalar(var, NORM_EPS);
            let sd = t.sqrt(var);
            t.div(c, sd)?
        }
    };
    let y = t.mul(y, pv[n.gamma])?;
    t.add(y, pv[n.beta])
}

/// Edge lists `(sources, targets)` of the complete directed graph on `n` nodes.
pub fn complete_edges(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::with_capacity(n * n.saturating_sub(1));
    let mut tgt = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                src.push(j);
                tgt.push(i);
            }
        }
    }
    (src, tgt)
}

fn perconv(
    t: &mut Tape,
    pv: &[Var],
    l: &PerConv,
    x: Var,
    pos: Var,
    src: &[usize],
    tgt: &[usize],
) -> Result<Var> {
    let n = t.shape(x)[0];
    let residual = match l.residual {
        Some(p) => t.matmul(x, pv[p])?,
        None => x,
    };
    if src.is_empty() {
        return Ok(residual);
    }
    let a = linear(t, pv, l.msg_src, x)?;
    let b = t.matmul(x, pv[l.msg_tgt])?;
    let pp = t.matmul(pos, pv[l.msg_pos])?;
    let a = t.add(a, pp)?;
    let b = t.sub(b, pp)?;
    let ga = t.gather_rows(a, src)?;
    let gb = t.gather_rows(b, tgt)?;
    let m = t.add(ga, gb)?;
    let m = t.elu(m);
    let m = linear(t, pv, l.msg2, m)?;
    let agg = t.scatter_max_rows(m, tgt, n)?;
    let agg = t.elu(agg);
    let upd = linear(t, pv, l.update, agg)?;
    let mut has_in = vec![0.0; n];
    for &i in tgt {
        has_in[i] = 1.0;
    }
    let upd = if has_in.iter().all(|&v| v == 1.0) {
        upd
    } else {
        let mask = t.constant(Tensor::new(n, 1, has_in)?);
        t.mul(upd, mask)?
    };
    t.add(residual, upd)
}

/// Graph-convolutional GRU update on the given nodes.
fn gconv_gru(
    t: &mut Tape,
    pv: &[Var],
    lay: &Layout,
    h: Var,
    x: Var,
    pos: Var,
    src: &[usize],
    tgt: &[usize],
) -> Result<Var> {
    let xh = t.concat_cols(&[x, h])?;
    let z = perconv(t, pv, &lay.gru_z, xh, pos, src, tgt)?;
    let z = t.sigmoid(z);
    let r = perconv(t, pv, &lay.gru_r, xh, pos, src, tgt)?;
    let r = t.sigmoid(r);
    let rh = t.mul(r, h)?;
    let xrh = t.concat_cols(&[x, rh])?;
    let c = perconv(t, pv, &lay.gru_h, xrh, pos, src, tgt)?;
    let c = t.tanh(c);
    // (1 − z) ⊙ h + z ⊙ h̃
    let d = t.sub(c, h)?;
    let zd = t.mul(z, d)?;
    t.add(h, zd)
}

/// Attention aggregation of source keypoints into their cluster centers.
#[allow(clippy::too_many_arguments)]
fn ptconv(
    t: &mut Tape,
    pv: &[Var],
    lay: &Layout,
    xs: Var,
    src_pos: &[[f64; 2]],
    tgt: &[usize],
    queries: Var,
    center_pos: &[[f64; 2]],
) -> Result<Var> {
    let nc = center_pos.len();
    let k = linear(t, pv, lay.key, xs)?;
    let v = linear(t, pv, lay.value, xs)?;
    let rel = positions(tgt.iter().zip(src_pos).map(|(&c, p)| {
        let q = center_pos[c];
        [q[0] - p[0], q[1] - p[1]]
    }));
    let rel = t.constant(rel);
    let delta = mlp2(t, pv, lay.pos_enc, rel)?;
    let q = t.gather_rows(queries, tgt)?;
    let e = t.sub(q, k)?;
    let e = t.add(e, delta)?;
    let logits = mlp2(t, pv, lay.attn, e)?;
    let w = t.segment_softmax(logits, tgt, nc)?;
    let msg = t.add(v, delta)?;
    let wm = t.mul(w, msg)?;
    t.scatter_add_rows(wm, tgt, nc)
}

/// Desired-image branch. It depends only on the desired keypoints and the
/// clusters, so a caller stepping one episode can build it once and pass it to
/// every [`forward_step`].
#[derive(Clone, Copy, Debug)]
pub struct DesiredVars {
    queries: Var,
    aggregated: Var,
}

/// Builds the desired branch of `graph` on `tape`.
pub fn desired_branch(tape: &mut Tape, pv: &[Var], params: &PolicyParams, graph: &ServoGraph) -> Result<DesiredVars> {
    let t = tape;
    let lay = &params.layout;
    let desired_kp = &graph.desired_kp;
    let centers = &graph.clusters.centers;
    let center_pos: Vec<[f64; 2]> = centers.iter().map(|&c| desired_kp[c]).collect();
    let des_pos = t.constant(positions(desired_kp.iter().copied()));
    let x_des = mlp2(t, pv, lay.embed, des_pos)?;
    let xc = t.gather_rows(x_des, centers)?;
    let queries = linear(t, pv, lay.query, xc)?;
    let aggregated = ptconv(t, pv, lay, x_des, desired_kp, &graph.clusters.cluster_of, queries, &center_pos)?;
    Ok(DesiredVars { queries, aggregated })
}

/// One policy step on `tape`. `hidden` is `N_c × h`; `pv` comes from
/// [`PolicyParams::load`].
pub fn forward_on_tape(
    tape: &mut Tape,
    pv: &[Var],
    params: &PolicyParams,
    graph: &ServoGraph,
    hidden: Var,
) -> Result<StepVars> {
    let des = desired_branch(tape, pv, params, graph)?;
    forward_step(tape, pv, params, graph, des, hidden)
}

/// One policy step reusing a desired branch built from the same episode.
pub fn forward_step(
    tape: &mut Tape,
    pv: &[Var],
    params: &PolicyParams,
    graph: &ServoGraph,
    des: DesiredVars,
    hidden: Var,
) -> Result<StepVars> {
    let t = tape;
    let lay = &params.layout;
    let nc = graph.clusters.num_clusters();
    let h = params.hidden();
    if t.shape(hidden) != [nc, h] {
        return Err(Error::Shape {
            op: "policy_forward",
            detail: format!("hidden {:?}, expected [{nc}, {h}]", t.shape(hidden)),
        });
    }
    if t.shape(des.queries)[0] != nc {
        return Err(Error::Shape {
            op: "policy_forward",
            detail: format!("desired branch has {} clusters, graph has {nc}", t.shape(des.queries)[0]),
        });
    }
    let cluster_of = &graph.clusters.cluster_of;
    let visible: Vec<usize> = (0..graph.num_keypoints()).filter(|&j| graph.visible[j]).collect();
    if visible.is_empty() {
        return Ok(StepVars { out: None, hidden });
    }
    let center_pos: Vec<[f64; 2]> = graph.clusters.centers.iter().map(|&c| graph.desired_kp[c]).collect();
    let DesiredVars { queries, aggregated: a_des } = des;

    // Current branch over visible keypoints only.
    let cur_kp: Vec<[f64; 2]> = visible
        .iter()
        .map(|&j| {
            let p = graph.current_kp[j];
            debug_assert!(p[0].is_finite() && p[1].is_finite(), "sentinel keypoint {j} read");
            p
        })
        .collect();
    let cur_tgt: Vec<usize> = visible.iter().map(|&j| cluster_of[j]).collect();
    let cur_pos = t.constant(positions(cur_kp.iter().copied()));
    let x_cur = mlp2(t, pv, lay.embed, cur_pos)?;
    let a_cur = ptconv(t, pv, lay, x_cur, &cur_kp, &cur_tgt, queries, &center_pos)?;

    // Everything below runs on clusters with at least one visible member.
    let mut is_active = vec![false; nc];
    for &c in &cur_tgt {
        is_active[c] = true;
    }
    let active: Vec<usize> = (0..nc).filter(|&c| is_active[c]).collect();
    let na = active.len();
    let a_des = t.gather_rows(a_des, &active)?;
    let a_cur = t.gather_rows(a_cur, &active)?;
    let diff = t.sub(a_des, a_cur)?;
    let f = t.concat_cols(&[diff, a_des])?;
    let mut x = mlp2(t, pv, lay.fuse, f)?;

    let pos = t.constant(positions(active.iter().map(|&c| center_pos[c])));
    let (src, tgt) = complete_edges(na);
    for k in 0..2 {
        x = perconv(t, pv, &lay.prop[k], x, pos, &src, &tgt)?;
        x = norm(t, pv, lay.prop_norm[k], x)?;
    }

    let h_act = t.gather_rows(hidden, &active)?;
    let h_new = gconv_gru(t, pv, lay, h_act, x, pos, &src, &tgt)?;
    let new_hidden = if na == nc {
        h_new
    } else {
        let d = t.sub(h_new, h_act)?;
        let d = t.scatter_add_rows(d, &active, nc)?;
        t.add(hidden, d)?
    };

    let pooled = t.mean_rows(h_new)?;
    let out = mlp2(t, pv, lay.head, pooled)?;
    Ok(StepVars {
        out: Some(out),
        hidden: new_hidden,
    })
}

/// Gradient-free forward step.
pub fn policy_forward(graph: &ServoGraph, hidden: &HiddenState, params: &PolicyParams) -> Result<(PolicyOutput, HiddenState)> {
    let mut tape = Tape::new();
    let pv = params.load(&mut tape, false);
    let hv = tape.constant(hidden.0.clone());
    let step = forward_on_tape(&mut tape, &pv, params, graph, hv)?;
    let out = match step.out {
        Some(o) => PolicyOutput::from_row(tape.value(o).data()),
        None => PolicyOutput::hold(),
    };
    Ok((out, HiddenState(tape.value(step.hidden).clone())))
}

/// Reads a `1 × 7` output row.
pub fn output_from_tape(tape: &Tape, out: Option<Var>) -> PolicyOutput {
    match out {
        Some(o) => PolicyOutput::from_row(tape.value(o).data()),
        None => PolicyOutput::hold(),
    }
}
