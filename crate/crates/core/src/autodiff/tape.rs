//! Define-by-run reverse-mode tape. Every op appends a node holding its value
//! and enough bookkeeping to push gradients back to its inputs.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_bias, matmul_grad_a, matmul_grad_b, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Layout of an alpha-compositing op: `rows` patches of `patch × patch × 4`
/// (RGB + alpha, interleaved) pasted onto `scenes` canvases of
/// `canvas × canvas × 3`. Patch `k` goes onto canvas `scene_of[k]`, in row
/// order.
#[derive(Clone, Debug)]
pub struct CompositeSpec {
    pub canvas: usize,
    pub patch: usize,
    pub scenes: usize,
    pub scene_of: Vec<usize>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Arc<Vec<usize>> },
    ScatterAddRows { x: Var, idx: Arc<Vec<usize>> },
    Sum(Var),
    Mse(Var, Var),
    L1(Var, Var),
    SumSquares(Var),
    Composite { patches: Var, locs: Var, spec: Arc<CompositeSpec> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value_arc(id),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// `x · w + b` with `x: [m,k]`, `w: [k,n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, k) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.rows() != k {
            return Err(shape_err("linear", xv, wv));
        }
        let n = wv.cols();
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != n {
                    return Err(shape_err("linear bias", wv, bv));
                }
                Some(bv.data())
            }
            None => None,
        };
        let out = matmul_bias(xv.data(), wv.data(), bias, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::Linear { x, w, b }))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())
            .expect("unary keeps shape")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), v));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: v.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(rows, len, data), Op::SliceCols { x, start }))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let v = self.value(x);
        let cols = v.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                left: v.shape().to_vec(),
                right: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            data.extend_from_slice(v.row(i));
        }
        let n = idx.len();
        Ok(self.push(Tensor::matrix(n, cols, data), Op::GatherRows { x, idx }))
    }

    /// Sums rows of `x` into `n_out` buckets: `out[idx[e]] += x[e]`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Arc<Vec<usize>>, n_out: usize) -> Result<Var> {
        let v = self.value(x);
        if idx.len() != v.rows() || idx.iter().any(|&i| i >= n_out) {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                left: v.shape().to_vec(),
                right: vec![idx.len(), n_out],
            });
        }
        let cols = v.cols();
        let mut data = vec![0.0; n_out * cols];
        for (e, &i) in idx.iter().enumerate() {
            for (o, &s) in data[i * cols..(i + 1) * cols].iter_mut().zip(v.row(e)) {
                *o += s;
            }
        }
        Ok(self.push(Tensor::matrix(n_out, cols, data), Op::ScatterAddRows { x, idx }))
    }

    /// Set aggregation: sum of the member rows of each set.
    pub fn sum_over_set(&mut self, x: Var, set_of: Arc<Vec<usize>>, n_sets: usize) -> Result<Var> {
        self.scatter_add_rows(x, set_of, n_sets)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mse", a, b, |x, y| (x - y) * (x - y))?;
        let n = t.len().max(1) as f64;
        let s: f64 = t.data().iter().sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b)))
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("l1", a, b, |x, y| (x - y).abs())?;
        let n = t.len().max(1) as f64;
        let s: f64 = t.data().iter().sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Op::L1(a, b)))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a))
    }

    /// Alpha-composites decoded patches onto black canvases at continuous
    /// pixel locations (bilinear resampling of each patch).
    pub fn composite(&mut self, patches: Var, locs: Var, spec: Arc<CompositeSpec>) -> Result<Var> {
        let (pv, lv) = (self.value(patches), self.value(locs));
        let w = spec.patch;
        if pv.cols() != w * w * 4 || lv.cols() != 2 || pv.rows() != lv.rows() || spec.scene_of.len() != pv.rows() {
            return Err(shape_err("composite", pv, lv));
        }
        let out = composite_forward(pv, lv, &spec, None);
        let g = spec.canvas;
        let t = Tensor::matrix(spec.scenes, g * g * 3, out);
        Ok(self.push(t, Op::Composite { patches, locs, spec }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let lv = self.value(loss);
        let mut seed = Tensor::zeros(lv.shape());
        seed.data_mut().iter_mut().for_each(|g| *g = 1.0);
        grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            let slot = &mut grads[v.0];
            let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(t.data_mut());
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                acc(*x, &|dx| matmul_grad_a(gd, wv.data(), dx, m, k, n));
                acc(*w, &|dw| matmul_grad_b(xv.data(), gd, dw, m, k, n));
                if let Some(b) = b {
                    acc(*b, &|db| {
                        for r in 0..m {
                            for (o, &v) in db.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, gd));
                acc(*b, &|d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| add_into(d, gd));
                acc(*b, &|d| d.iter_mut().zip(gd).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| {
                    for ((o, v), y) in d.iter_mut().zip(gd).zip(bv) {
                        *o += v * y;
                    }
                });
                acc(*b, &|d| {
                    for ((o, v), x) in d.iter_mut().zip(gd).zip(av) {
                        *o += v * x;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(o, v)| *o += v * s)),
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                acc(*a, &|d| {
                    for ((o, v), x) in d.iter_mut().zip(gd).zip(xv) {
                        if *x > 0.0 {
                            *o += v;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                acc(*a, &|d| {
                    for ((o, v), y) in d.iter_mut().zip(gd).zip(yv) {
                        *o += v * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = node.value.data();
                acc(*a, &|d| {
                    for ((o, v), y) in d.iter_mut().zip(gd).zip(yv) {
                        *o += v * (1.0 - y * y);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &|d| {
                        for r in 0..rows {
                            add_into(&mut d[r * w..(r + 1) * w], &gd[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &|d| add_into(d, &gd[off..off + n]));
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = (node.value.rows(), node.value.cols());
                let cols = self.value(*x).cols();
                acc(*x, &|d| {
                    for r in 0..rows {
                        add_into(&mut d[r * cols + start..r * cols + start + len], &gd[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let cols = node.value.cols();
                acc(*x, &|d| {
                    for (e, &r) in idx.iter().enumerate() {
                        add_into(&mut d[r * cols..(r + 1) * cols], &gd[e * cols..(e + 1) * cols]);
                    }
                });
            }
            Op::ScatterAddRows { x, idx } => {
                let cols = node.value.cols();
                acc(*x, &|d| {
                    for (e, &r) in idx.iter().enumerate() {
                        add_into(&mut d[e * cols..(e + 1) * cols], &gd[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|d| d.iter_mut().for_each(|o| *o += gd[0])),
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * gd[0] / av.len().max(1) as f64;
                acc(*a, &|d| {
                    for ((o, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *o += s * (x - y);
                    }
                });
                acc(*b, &|d| {
                    for ((o, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *o -= s * (x - y);
                    }
                });
            }
            Op::L1(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = gd[0] / av.len().max(1) as f64;
                let sign = |x: f64, y: f64| {
                    if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(*a, &|d| {
                    for ((o, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *o += s * sign(x, y);
                    }
                });
                acc(*b, &|d| {
                    for ((o, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *o -= s * sign(x, y);
                    }
                });
            }
            Op::SumSquares(a) => {
                let av = self.value(*a).data();
                acc(*a, &|d| {
                    for (o, x) in d.iter_mut().zip(av) {
                        *o += 2.0 * gd[0] * x;
                    }
                });
            }
            Op::Composite { patches, locs, spec } => {
                let (pv, lv) = (self.value(*patches), self.value(*locs));
                let mut dp = vec![0.0; pv.len()];
                let mut dl = vec![0.0; lv.len()];
                composite_backward(pv, lv, spec, gd, &mut dp, &mut dl);
                acc(*patches, &|d| add_into(d, &dp));
                acc(*locs, &|d| add_into(d, &dl));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Sums gradients of all parameter leaves into per-parameter buffers.
    pub fn param_grads(&self, tape: &Tape, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; n_params];
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                match &mut out[id.index()] {
                    Some(t) => t.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

/// Bilinear tap positions and weights for continuous patch coordinates.
struct Taps {
    i0: isize,
    j0: isize,
    fy: f64,
    fx: f64,
}

impl Taps {
    fn new(iy: f64, jx: f64) -> Self {
        let (i0, j0) = (iy.floor(), jx.floor());
        Taps {
            i0: i0 as isize,
            j0: j0 as isize,
            fy: iy - i0,
            fx: jx - j0,
        }
    }

    /// (patch pixel index, weight, d weight / d fy, d weight / d fx)
    fn each(&self, w: usize, mut f: impl FnMut(usize, f64, f64, f64)) {
        let (fy, fx) = (self.fy, self.fx);
        let taps = [
            (0, 0, (1.0 - fy) * (1.0 - fx), -(1.0 - fx), -(1.0 - fy)),
            (0, 1, (1.0 - fy) * fx, -fx, 1.0 - fy),
            (1, 0, fy * (1.0 - fx), 1.0 - fx, -fy),
            (1, 1, fy * fx, fx, fy),
        ];
        for (di, dj, wt, dwy, dwx) in taps {
            let (i, j) = (self.i0 + di, self.j0 + dj);
            if i >= 0 && j >= 0 && (i as usize) < w && (j as usize) < w {
                f(i as usize * w + j as usize, wt, dwy, dwx);
            }
        }
    }
}

/// Canvas pixel range touched by a patch centered at `c` (pixel coords).
fn window(c: f64, w: usize, g: usize) -> std::ops::Range<usize> {
    let half = w as f64 / 2.0;
    let lo = (c - half - 1.0).floor().max(0.0) as usize;
    let hi = ((c + half + 1.0).ceil().max(0.0) as usize).min(g);
    lo.min(hi)..hi
}

fn sample_rgba(patch: &[f64], w: usize, taps: &Taps) -> [f64; 4] {
    let mut v = [0.0; 4];
    taps.each(w, |p, wt, _, _| {
        for c in 0..4 {
            v[c] += wt * patch[p * 4 + c];
        }
    });
    v
}

/// Forward compositing. When `snapshots` is given, it receives the canvas
/// state before each patch is applied.
fn composite_forward(
    pv: &Tensor,
    lv: &Tensor,
    spec: &CompositeSpec,
    mut snapshots: Option<&mut Vec<Vec<f64>>>,
) -> Vec<f64> {
    let (g, w) = (spec.canvas, spec.patch);
    let stride = g * g * 3;
    let mut out = vec![0.0; spec.scenes * stride];
    let half = w as f64 / 2.0;
    for k in 0..pv.rows() {
        let s = spec.scene_of[k];
        let canvas = &mut out[s * stride..(s + 1) * stride];
        if let Some(snaps) = snapshots.as_deref_mut() {
            snaps.push(canvas.to_vec());
        }
        let patch = pv.row(k);
        let (bx, by) = (lv.row(k)[0], lv.row(k)[1]);
        for y in window(by, w, g) {
            for x in window(bx, w, g) {
                let taps = Taps::new(y as f64 - by + half, x as f64 - bx + half);
                let v = sample_rgba(patch, w, &taps);
                let a = v[3];
                if a == 0.0 {
                    continue;
                }
                let base = (y * g + x) * 3;
                for c in 0..3 {
                    canvas[base + c] = canvas[base + c] * (1.0 - a) + v[c] * a;
                }
            }
        }
    }
    out
}

fn composite_backward(
    pv: &Tensor,
    lv: &Tensor,
    spec: &CompositeSpec,
    gout: &[f64],
    dp: &mut [f64],
    dl: &mut [f64],
) {
    let (g, w) = (spec.canvas, spec.patch);
    let stride = g * g * 3;
    let half = w as f64 / 2.0;
    let mut snaps = Vec::with_capacity(pv.rows());
    composite_forward(pv, lv, spec, Some(&mut snaps));
    let mut gcanvas = gout.to_vec();
    let cols = pv.cols();
    for k in (0..pv.rows()).rev() {
        let s = spec.scene_of[k];
        let prev = &snaps[k];
        let gc = &mut gcanvas[s * stride..(s + 1) * stride];
        let patch = pv.row(k);
        let dpatch = &mut dp[k * cols..(k + 1) * cols];
        let (bx, by) = (lv.row(k)[0], lv.row(k)[1]);
        let (mut dbx, mut dby) = (0.0, 0.0);
        for y in window(by, w, g) {
            for x in window(bx, w, g) {
                let taps = Taps::new(y as f64 - by + half, x as f64 - bx + half);
                let v = sample_rgba(patch, w, &taps);
                let a = v[3];
                let base = (y * g + x) * 3;
                let mut dv = [0.0; 4];
                for c in 0..3 {
                    dv[c] = gc[base + c] * a;
                    dv[3] += gc[base + c] * (v[c] - prev[base + c]);
                }
                if dv.iter().all(|&d| d == 0.0) {
                    continue;
                }
                taps.each(w, |p, wt, dwy, dwx| {
                    for c in 0..4 {
                        dpatch[p * 4 + c] += wt * dv[c];
                        // patch coordinate moves opposite to the location
                        dby -= dwy * patch[p * 4 + c] * dv[c];
                        dbx -= dwx * patch[p * 4 + c] * dv[c];
                    }
                });
                for c in 0..3 {
                    gc[base + c] *= 1.0 - a;
                }
            }
        }
        dl[k * 2] += dbx;
        dl[k * 2 + 1] += dby;
    }
}
