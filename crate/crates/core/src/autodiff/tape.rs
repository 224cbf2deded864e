use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `[1, c]` repeated over rows.
    Row,
    /// `[r, 1]` repeated over columns.
    Col,
    Scalar,
}

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnOp {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Elu,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinOp, Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(UnOp, Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    /// Source row of each output column.
    MaxRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    /// Source row per output element, `usize::MAX` for empty segments.
    ScatterMaxRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape is meant to live for one truncated-backprop window and then be
/// dropped; values that must survive are copied out as new leaves.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn check_index(op: &'static str, idx: &[usize], len: usize) -> Result<()> {
    match idx.iter().find(|&&i| i >= len) {
        Some(&i) => Err(Error::IndexOutOfRange { op, index: i, len }),
        None => Ok(()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, op: BinOp, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        let sb = self.shape(b);
        let bc = if sb == [r, c] {
            Bcast::Same
        } else if sb == [1, 1] {
            Bcast::Scalar
        } else if sb == [1, c] {
            Bcast::Row
        } else if sb == [r, 1] {
            Bcast::Col
        } else {
            return Err(shape_err(name, format!("[{r}, {c}] with [{}, {}]", sb[0], sb[1])));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let y = match bc {
                    Bcast::Same => bv[i * c + j],
                    Bcast::Row => bv[j],
                    Bcast::Col => bv[i],
                    Bcast::Scalar => bv[0],
                };
                out.push(f(av[i * c + j], y));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(r, c, out)?, Op::Binary(op, a, b, bc), ng))
    }

    /// Elementwise sum; `b` may be `[1, c]`, `[r, 1]` or `[1, 1]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, "div", a, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    /// `k - a`.
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, k)
    }

    fn unary(&mut self, op: UnOp, a: Var) -> Var {
        let f = |x: f64| match op {
            UnOp::Exp => x.exp(),
            UnOp::Log => x.ln(),
            UnOp::Tanh => x.tanh(),
            UnOp::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            UnOp::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            UnOp::Sqrt => x.sqrt(),
        };
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(v, Op::Unary(op, a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnOp::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnOp::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnOp::Sigmoid, a)
    }

    /// `x` for `x > 0`, `eˣ − 1` otherwise.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(UnOp::Elu, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnOp::Sqrt, a)
    }

    /// Sum of all entries, `[1, 1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Column sums over rows, `[1, c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [r, c] = t.shape();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(1, c, out).expect("shape"), Op::SumRows(a), ng)
    }

    /// Row sums over columns, `[r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let r = t.rows();
        let out: Vec<f64> = (0..r).map(|i| t.row(i).iter().sum()).collect();
        let ng = self.ng(a);
        self.push(Tensor::new(r, 1, out).expect("shape"), Op::SumCols(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Column means over rows, `[1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a)[0];
        if r == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let s = self.sum_rows(a);
        Ok(self.scale(s, 1.0 / r as f64))
    }

    /// Row means over columns, `[r, 1]`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let c = self.shape(a)[1];
        if c == 0 {
            return Err(Error::Empty("mean_cols"));
        }
        let s = self.sum_cols(a);
        Ok(self.scale(s, 1.0 / c as f64))
    }

    /// Column maxima over rows, `[1, c]`; ties go to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [r, c] = t.shape();
        if r == 0 {
            return Err(Error::Empty("max_rows"));
        }
        let mut out = t.row(0).to_vec();
        let mut arg = vec![0usize; c];
        for i in 1..r {
            for (j, &x) in t.row(i).iter().enumerate() {
                if x > out[j] {
                    out[j] = x;
                    arg[j] = i;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(1, c, out)?, Op::MaxRows(a, arg), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat_cols"));
        };
        let r = self.shape(first)[0];
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != r {
                return Err(shape_err("concat_cols", format!("rows {} and {}", r, s[0])));
            }
            c += s[1];
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(r, c, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if start > end || end > c {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let t = self.value(a);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..end]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(r, end - start, out)?, Op::SliceCols(a, start), ng))
    }

    /// Output row `k` is row `idx[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let [r, c] = self.shape(a);
        check_index("gather_rows", idx, r)?;
        let t = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(idx.len(), c, out)?, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Row `k` of `a` is added into output row `idx[k]` of an `n_out`-row result.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if idx.len() != r {
            return Err(shape_err("scatter_add_rows", format!("{} indices for {r} rows", idx.len())));
        }
        check_index("scatter_add_rows", idx, n_out)?;
        let t = self.value(a);
        let mut out = vec![0.0; n_out * c];
        for (k, &i) in idx.iter().enumerate() {
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(t.row(k)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(n_out, c, out)?, Op::ScatterAddRows(a, idx.to_vec()), ng))
    }

    /// Per-column maximum of the rows sent to each output row; rows that
    /// receive nothing are zero. Ties go to the first source row.
    pub fn scatter_max_rows(&mut self, a: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if idx.len() != r {
            return Err(shape_err("scatter_max_rows", format!("{} indices for {r} rows", idx.len())));
        }
        check_index("scatter_max_rows", idx, n_out)?;
        let t = self.value(a);
        let mut out = vec![0.0; n_out * c];
        let mut arg = vec![usize::MAX; n_out * c];
        for (k, &i) in idx.iter().enumerate() {
            for (j, &x) in t.row(k).iter().enumerate() {
                let o = i * c + j;
                if arg[o] == usize::MAX || x > out[o] {
                    out[o] = x;
                    arg[o] = k;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(n_out, c, out)?, Op::ScatterMaxRows(a, arg), ng))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], n_seg: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if seg.len() != r {
            return Err(shape_err("segment_softmax", format!("{} segment ids for {r} rows", seg.len())));
        }
        check_index("segment_softmax", seg, n_seg)?;
        let t = self.value(a);
        let mut mx = vec![f64::NEG_INFINITY; n_seg * c];
        for (k, &s) in seg.iter().enumerate() {
            for (j, &x) in t.row(k).iter().enumerate() {
                let m = &mut mx[s * c + j];
                if x > *m {
                    *m = x;
                }
            }
        }
        let mut out = vec![0.0; r * c];
        let mut den = vec![0.0; n_seg * c];
        for (k, &s) in seg.iter().enumerate() {
            for (j, &x) in t.row(k).iter().enumerate() {
                let e = (x - mx[s * c + j]).exp();
                out[k * c + j] = e;
                den[s * c + j] += e;
            }
        }
        for (k, &s) in seg.iter().enumerate() {
            for j in 0..c {
                out[k * c + j] /= den[s * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(r, c, out)?, Op::SegmentSoftmax(a, seg.to_vec()), ng))
    }

    /// Reverse pass seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(root) {
            return Gradients { grads };
        }
        let [r, c] = self.shape(root);
        grads[root.0] = Some(Tensor::full(r, c, 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let gd = g.data();
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let [m, k] = self.shape(*a);
                    let n = self.shape(*b)[1];
                    if self.ng(*a) {
                        let ga = acc(&mut grads, *a, m, k);
                        gemm(m, n, k, gd, false, self.value(*b).data(), true, ga, 1.0);
                    }
                    if self.ng(*b) {
                        let gb = acc(&mut grads, *b, k, n);
                        gemm(k, m, n, self.value(*a).data(), true, gd, false, gb, 1.0);
                    }
                }
                Op::Binary(op, a, b, bc) => {
                    let [r, c] = y.shape();
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let bidx = |i: usize, j: usize| match bc {
                        Bcast::Same => i * c + j,
                        Bcast::Row => j,
                        Bcast::Col => i,
                        Bcast::Scalar => 0,
                    };
                    if self.ng(*a) {
                        let ga = acc(&mut grads, *a, r, c);
                        for i in 0..r {
                            for j in 0..c {
                                let o = i * c + j;
                                ga[o] += match op {
                                    BinOp::Add | BinOp::Sub => gd[o],
                                    BinOp::Mul => gd[o] * bv[bidx(i, j)],
                                    BinOp::Div => gd[o] / bv[bidx(i, j)],
                                };
                            }
                        }
                    }
                    if self.ng(*b) {
                        let [br, bcn] = self.shape(*b);
                        let gb = acc(&mut grads, *b, br, bcn);
                        for i in 0..r {
                            for j in 0..c {
                                let o = i * c + j;
                                let bi = bidx(i, j);
                                gb[bi] += match op {
                                    BinOp::Add => gd[o],
                                    BinOp::Sub => -gd[o],
                                    BinOp::Mul => gd[o] * av[o],
                                    BinOp::Div => -gd[o] * av[o] / (bv[bi] * bv[bi]),
                                };
                            }
                        }
                    }
                }
                Op::Scale(a, k) => {
                    let [r, c] = y.shape();
                    let ga = acc(&mut grads, *a, r, c);
                    for (o, x) in ga.iter_mut().zip(gd) {
                        *o += k * x;
                    }
                }
                Op::AddScalar(a) => {
                    let [r, c] = y.shape();
                    let ga = acc(&mut grads, *a, r, c);
                    for (o, x) in ga.iter_mut().zip(gd) {
                        *o += x;
                    }
                }
                Op::Unary(op, a) => {
                    let [r, c] = y.shape();
                    let xv = self.value(*a).data();
                    let yv = y.data();
                    let ga = acc(&mut grads, *a, r, c);
                    for o in 0..r * c {
                        let d = match op {
                            UnOp::Exp => yv[o],
                            UnOp::Log => 1.0 / xv[o],
                            UnOp::Tanh => 1.0 - yv[o] * yv[o],
                            UnOp::Sigmoid => yv[o] * (1.0 - yv[o]),
                            UnOp::Elu => {
                                if xv[o] > 0.0 {
                                    1.0
                                } else {
                                    yv[o] + 1.0
                                }
                            }
                            UnOp::Sqrt => 0.5 / yv[o],
                        };
                        ga[o] += gd[o] * d;
                    }
                }
                Op::Sum(a) => {
                    let [r, c] = self.shape(*a);
                    let ga = acc(&mut grads, *a, r, c);
                    ga.iter_mut().for_each(|o| *o += gd[0]);
                }
                Op::SumRows(a) => {
                    let [r, c] = self.shape(*a);
                    let ga = acc(&mut grads, *a, r, c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gd[j];
                        }
                    }
                }
                Op::SumCols(a) => {
                    let [r, c] = self.shape(*a);
                    let ga = acc(&mut grads, *a, r, c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gd[i];
                        }
                    }
                }
                Op::MaxRows(a, arg) => {
                    let [r, c] = self.shape(*a);
                    let ga = acc(&mut grads, *a, r, c);
                    for (j, &i) in arg.iter().enumerate() {
                        ga[i * c + j] += gd[j];
                    }
                }
                Op::ConcatCols(parts) => {
                    let r = y.rows();
                    let c = y.cols();
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.shape(p)[1];
                        if self.ng(p) {
                            let gp = acc(&mut grads, p, r, pc);
                            for i in 0..r {
                                for j in 0..pc {
                                    gp[i * pc + j] += gd[i * c + off + j];
                                }
                            }
                        }
                        off += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let [r, c] = self.shape(*a);
                    let w = y.cols();
                    let ga = acc(&mut grads, *a, r, c);
                    for i in 0..r {
                        for j in 0..w {
                            ga[i * c + start + j] += gd[i * w + j];
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    let [r, c] = self.shape(*a);
                    let ga = acc(&mut grads, *a, r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[i * c + j] += gd[k * c + j];
                        }
                    }
                }
                Op::ScatterAddRows(a, idx) => {
                    let [r, c] = self.shape(*a);
                    let ga = acc(&mut grads, *a, r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[k * c + j] += gd[i * c + j];
                        }
                    }
                }
                Op::ScatterMaxRows(a, arg) => {
                    let [r, c] = self.shape(*a);
                    let ga = acc(&mut grads, *a, r, c);
                    for (o, &k) in arg.iter().enumerate() {
                        if k != usize::MAX {
                            ga[k * c + o % c] += gd[o];
                        }
                    }
                }
                Op::SegmentSoftmax(a, seg) => {
                    let [r, c] = self.shape(*a);
                    let yv = y.data();
                    let n_seg = seg.iter().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; n_seg * c];
                    for (k, &s) in seg.iter().enumerate() {
                        for j in 0..c {
                            dot[s * c + j] += yv[k * c + j] * gd[k * c + j];
                        }
                    }
                    let ga = acc(&mut grads, *a, r, c);
                    for (k, &s) in seg.iter().enumerate() {
                        for j in 0..c {
                            let o = k * c + j;
                            ga[o] += yv[o] * (gd[o] - dot[s * c + j]);
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradient buffer of `v`, allocated on first use.
fn acc(grads: &mut [Option<Tensor>], v: Var, r: usize, c: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)).data_mut()
}
