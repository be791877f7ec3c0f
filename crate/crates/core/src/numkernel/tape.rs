//! Tensor-level reverse-mode differentiation.
//!
//! Every forward operation appends one node to the [`Tape`]. [`Tape::backward`]
//! replays the nodes in exact reverse order, accumulating adjoints into a
//! [`Gradients`] table. A tape may be replayed once; call [`Tape::reset`] to
//! reuse it.

use crate::error::{dim_err, Error, Result};
use crate::numkernel::ops::{logsumexp_slice, softmax_into, Activation};
use crate::numkernel::{Param, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Affine {
        x: Var,
        scale: T,
    },
    Softmax(Var),
    LogSumExp(Var),
    Pick {
        src: Var,
        coords: Vec<(usize, usize)>,
    },
    ScatterElems {
        src: Var,
        coords: Vec<(usize, usize)>,
    },
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        src: Var,
        rows: Vec<usize>,
    },
    Activation {
        x: Var,
        act: Activation,
        gates: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    /// Row standardization; the node value is the standardized `x`.
    Standardize {
        x: Var,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: usize,
        scale: T,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    replayed: bool,
}

/// Adjoints produced by one backward replay.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of `v`; `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros shaped like `like`.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    /// Adds the adjoint of `v` into `param.grad`.
    pub fn accumulate_into(&self, v: Var, param: &mut Param<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => param.grad.add_assign(g),
            None => Ok(()),
        }
    }

    /// Node indices of the non-leaf operations replayed, in replay order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn broadcast_kind<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<Broadcast> {
    let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
    if ar == br && ac == bc {
        Ok(Broadcast::Same)
    } else if b.len() == 1 {
        Ok(Broadcast::Scalar)
    } else if br == 1 && bc == ac {
        Ok(Broadcast::Row)
    } else if bc == 1 && br == ar {
        Ok(Broadcast::Col)
    } else {
        Err(dim_err!(
            "{what}: cannot broadcast {:?} onto {:?}",
            b.shape(),
            a.shape()
        ))
    }
}

#[inline]
fn bidx(kind: Broadcast, r: usize, c: usize, cols: usize) -> usize {
    match kind {
        Broadcast::Same => r * cols + c,
        Broadcast::Scalar => 0,
        Broadcast::Row => c,
        Broadcast::Col => r,
    }
}

fn matrix_shape(rows: usize, cols: usize) -> Vec<usize> {
    vec![rows, cols]
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            replayed: false,
        }
    }

    /// Clears all recorded operations.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.replayed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, p: &Param<T>) -> Var {
        self.leaf(p.value.clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(dim_err!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), false, bv.data(), false, T::zero(), &mut out);
        let rg = self.requires(a) || self.requires(b);
        self.push(Tensor::new(matrix_shape(m, n), out)?, Op::Matmul(a, b), rg, "matmul")
    }

    /// Elementwise sum; `b` may be a same-shape tensor, a row, a column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    fn binary(&mut self, a: Var, b: Var, product: bool) -> Result<Var> {
        let what = if product { "mul" } else { "add" };
        let (av, bv) = (self.value(a), self.value(b));
        let kind = broadcast_kind(av, bv, what)?;
        let cols = av.cols();
        let mut out = av.clone();
        let bd = bv.data();
        for r in 0..av.rows() {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                let y = bd[bidx(kind, r, c, cols)];
                if product {
                    *o *= y;
                } else {
                    *o += y;
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        let op = if product {
            Op::Mul(a, b, kind)
        } else {
            Op::Add(a, b, kind)
        };
        self.push(out, op, rg, what)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.affine(b, -T::one(), T::zero())?;
        self.add(a, nb)
    }

    /// Sum of several same-shape nodes, left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| dim_err!("add_all of zero terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.requires(x);
        self.push(out, Op::Affine { x, scale }, rg, "affine")
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Result<Var> {
        self.affine(x, scale, T::zero())
    }

    /// Row-wise max-shifted softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() == 0 {
            return Err(dim_err!("softmax over an empty dimension"));
        }
        let mut out = xv.clone();
        let c = xv.cols();
        for r in 0..xv.rows() {
            softmax_into(xv.row(r), &mut out.data_mut()[r * c..(r + 1) * c]);
        }
        let rg = self.requires(x);
        self.push(out, Op::Softmax(x), rg, "softmax")
    }

    /// Row-wise `log sum exp`, producing an `[m x 1]` column.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() == 0 {
            return Err(dim_err!("logsumexp over an empty dimension"));
        }
        let data: Vec<T> = (0..xv.rows()).map(|r| logsumexp_slice(xv.row(r))).collect();
        let out = Tensor::matrix(xv.rows(), 1, data)?;
        let rg = self.requires(x);
        self.push(out, Op::LogSumExp(x), rg, "logsumexp")
    }

    /// Gathers single elements `src[r, c]` into a tensor of `shape`.
    pub fn pick(&mut self, src: Var, coords: Vec<(usize, usize)>, shape: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let n: usize = shape.iter().product();
        if n != coords.len() {
            return Err(dim_err!("pick: {} coordinates for shape {:?}", coords.len(), shape));
        }
        let (rows, cols) = (sv.rows(), sv.cols());
        let mut data = Vec::with_capacity(n);
        for &(r, c) in &coords {
            if r >= rows || c >= cols {
                return Err(Error::Index(format!("pick ({r}, {c}) outside {rows}x{cols}")));
            }
            data.push(sv.at(r, c));
        }
        let rg = self.requires(src);
        self.push(Tensor::new(shape.to_vec(), data)?, Op::Pick { src, coords }, rg, "pick")
    }

    /// Adjoint of [`Tape::pick`]: places the elements of `src` (in order) at
    /// `coords` of a zero tensor of `shape`; duplicates accumulate.
    pub fn scatter_elems(&mut self, src: Var, coords: Vec<(usize, usize)>, shape: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        if sv.len() != coords.len() {
            return Err(dim_err!("scatter: {} values for {} coordinates", sv.len(), coords.len()));
        }
        let mut out = Tensor::zeros(shape);
        let (rows, cols) = (out.rows(), out.cols());
        for (&(r, c), &v) in coords.iter().zip(sv.data()) {
            if r >= rows || c >= cols {
                return Err(Error::Index(format!("scatter ({r}, {c}) outside {rows}x{cols}")));
            }
            out.data_mut()[r * cols + c] += v;
        }
        let rg = self.requires(src);
        self.push(out, Op::ScatterElems { src, coords }, rg, "scatter_elems")
    }

    /// Row selection (also the embedding lookup).
    pub fn gather_rows(&mut self, src: Var, rows: Vec<usize>) -> Result<Var> {
        let sv = self.value(src);
        let c = sv.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            if r >= sv.rows() {
                return Err(Error::Index(format!("row {r} outside {} rows", sv.rows())));
            }
            data.extend_from_slice(sv.row(r));
        }
        let out = Tensor::matrix(rows.len(), c, data)?;
        let rg = self.requires(src);
        self.push(out, Op::GatherRows { src, rows }, rg, "gather_rows")
    }

    /// Adds row `i` of `src` into row `rows[i]` of an `[n_rows x c]` zero tensor.
    pub fn scatter_rows(&mut self, src: Var, rows: Vec<usize>, n_rows: usize) -> Result<Var> {
        let sv = self.value(src);
        if sv.rows() != rows.len() {
            return Err(dim_err!("scatter_rows: {} rows for {} targets", sv.rows(), rows.len()));
        }
        let c = sv.cols();
        let mut out = Tensor::zeros(&[n_rows, c]);
        for (i, &r) in rows.iter().enumerate() {
            if r >= n_rows {
                return Err(Error::Index(format!("row {r} outside {n_rows} rows")));
            }
            for (o, &v) in out.row_mut(r).iter_mut().zip(sv.row(i)) {
                *o += v;
            }
        }
        let rg = self.requires(src);
        self.push(out, Op::ScatterRows { src, rows }, rg, "scatter_rows")
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        let xv = self.value(x);
        let gates: Vec<T> = xv.data().iter().map(|&v| act.gate(v)).collect();
        let data = xv.data().iter().zip(&gates).map(|(&v, &s)| v * s).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.requires(x);
        self.push(out, Op::Activation { x, act, gates }, rg, "activation")
    }

    /// Sum of all elements as a `1 x 1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Mean of all elements as a `1 x 1` tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(dim_err!("mean of an empty tensor"));
        }
        let s: T = xv.data().iter().copied().sum::<T>() / T::lit(xv.len() as f64);
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, "mean")
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)` with the biased variance;
    /// the normalization part of layer norm.
    pub fn standardize(&mut self, x: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if c == 0 {
            return Err(dim_err!("standardize over an empty dimension"));
        }
        let n = T::lit(c as f64);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let rg = self.requires(x);
        self.push(out, Op::Standardize { x, inv_std }, rg, "standardize")
    }

    /// Scaled dot-product attention over `segments` independent blocks.
    ///
    /// `q` holds `segments * Lq` rows, `k` and `v` hold `segments * Lk` rows;
    /// block `s` of the queries only attends to block `s` of the keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || kv.rows() != vv.rows() || segments == 0 {
            return Err(dim_err!(
                "attention shapes q {:?} k {:?} v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            ));
        }
        if qv.rows() % segments != 0 || kv.rows() % segments != 0 {
            return Err(dim_err!("attention rows not divisible into {segments} segments"));
        }
        let (lq, lk, dv) = (qv.rows() / segments, kv.rows() / segments, vv.cols());
        let scale = T::one() / T::lit(d as f64).sqrt();
        let mut probs = vec![T::zero(); segments * lq * lk];
        let mut out = vec![T::zero(); segments * lq * dv];
        let mut scores = vec![T::zero(); lq * lk];
        for s in 0..segments {
            let qs = &qv.data()[s * lq * d..(s + 1) * lq * d];
            let ks = &kv.data()[s * lk * d..(s + 1) * lk * d];
            let vs = &vv.data()[s * lk * dv..(s + 1) * lk * dv];
            T::gemm(lq, d, lk, scale, qs, false, ks, true, T::zero(), &mut scores);
            let ps = &mut probs[s * lq * lk..(s + 1) * lq * lk];
            for r in 0..lq {
                softmax_into(&scores[r * lk..(r + 1) * lk], &mut ps[r * lk..(r + 1) * lk]);
            }
            let os = &mut out[s * lq * dv..(s + 1) * lq * dv];
            T::gemm(lq, lk, dv, T::one(), ps, false, vs, false, T::zero(), os);
        }
        let out = Tensor::matrix(segments * lq, dv, out)?;
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        let op = Op::Attention {
            q,
            k,
            v,
            segments,
            scale,
            probs,
        };
        self.push(out, op, rg, "attention")
    }

    /// Replays the tape backward from the single-element node `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.replayed {
            return Err(Error::Tape(
                "backward already replayed on this tape; reset before reuse".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(dim_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            ));
        }
        self.replayed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        let mut visited = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            if !matches!(node.op, Op::Leaf) {
                visited.push(i);
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.slot(grads, a) {
                    // ga += g * b^T
                    T::gemm(m, n, k, T::one(), g.data(), false, bv.data(), true, T::one(), ga.data_mut());
                }
                if let Some(gb) = self.slot(grads, b) {
                    // gb += a^T * g
                    T::gemm(k, m, n, T::one(), av.data(), true, g.data(), false, T::one(), gb.data_mut());
                }
            }
            &Op::Add(a, b, kind) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.add_assign(g)?;
                }
                let cols = g.cols();
                if let Some(gb) = self.slot(grads, b) {
                    let gbd = gb.data_mut();
                    for r in 0..g.rows() {
                        for (c, &gv) in g.row(r).iter().enumerate() {
                            gbd[bidx(kind, r, c, cols)] += gv;
                        }
                    }
                }
            }
            &Op::Mul(a, b, kind) => {
                let (av, bv) = (self.value(a), self.value(b));
                let cols = g.cols();
                if let Some(ga) = self.slot(grads, a) {
                    let gad = ga.data_mut();
                    let bd = bv.data();
                    for r in 0..g.rows() {
                        for (c, &gv) in g.row(r).iter().enumerate() {
                            gad[r * cols + c] += gv * bd[bidx(kind, r, c, cols)];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    let gbd = gb.data_mut();
                    for r in 0..g.rows() {
                        for (c, (&gv, &x)) in g.row(r).iter().zip(av.row(r)).enumerate() {
                            gbd[bidx(kind, r, c, cols)] += gv * x;
                        }
                    }
                }
            }
            &Op::Affine { x, scale } => {
                if let Some(gx) = self.slot(grads, x) {
                    for (o, &gv) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += scale * gv;
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = &node.value;
                if let Some(gx) = self.slot(grads, x) {
                    let c = y.cols();
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (j, o) in gx.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
                            *o += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSumExp(x) => {
                let xv = self.value(x);
                if let Some(gx) = self.slot(grads, x) {
                    let c = xv.cols();
                    let mut p = vec![T::zero(); c];
                    for r in 0..xv.rows() {
                        softmax_into(xv.row(r), &mut p);
                        let gr = g.data()[r];
                        for (o, &pj) in gx.data_mut()[r * c..(r + 1) * c].iter_mut().zip(&p) {
                            *o += gr * pj;
                        }
                    }
                }
            }
            Op::Pick { src, coords } => {
                if let Some(gs) = self.slot(grads, *src) {
                    let cols = gs.cols();
                    for (&(r, c), &gv) in coords.iter().zip(g.data()) {
                        gs.data_mut()[r * cols + c] += gv;
                    }
                }
            }
            Op::ScatterElems { src, coords } => {
                let cols = g.cols();
                if let Some(gs) = self.slot(grads, *src) {
                    for (o, &(r, c)) in gs.data_mut().iter_mut().zip(coords) {
                        *o += g.data()[r * cols + c];
                    }
                }
            }
            Op::GatherRows { src, rows } => {
                if let Some(gs) = self.slot(grads, *src) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &gv) in gs.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::ScatterRows { src, rows } => {
                if let Some(gs) = self.slot(grads, *src) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &gv) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Activation { x, act, gates } => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for (((o, &gv), &xi), &s) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()).zip(gates) {
                        *o += gv * act.derivative_from_gate(xi, s);
                    }
                }
            }
            &Op::Sum(x) => {
                let gv = g.item();
                if let Some(gx) = self.slot(grads, x) {
                    gx.data_mut().iter_mut().for_each(|o| *o += gv);
                }
            }
            &Op::Mean(x) => {
                let n = T::lit(self.value(x).len() as f64);
                let gv = g.item() / n;
                if let Some(gx) = self.slot(grads, x) {
                    gx.data_mut().iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::Standardize { x, inv_std } => {
                let y = &node.value;
                if let Some(gx) = self.slot(grads, *x) {
                    let c = y.cols();
                    let n = T::lit(c as f64);
                    for (r, &is) in inv_std.iter().enumerate() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let gm = gr.iter().copied().sum::<T>() / n;
                        let gy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for (j, o) in gx.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
                            *o += is * (gr[j] - gm - yr[j] * gy);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                scale,
                probs,
            } => self.backprop_attention(*q, *k, *v, *segments, *scale, probs, g, grads),
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: usize,
        scale: T,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let (lq, lk, dv) = (qv.rows() / segments, kv.rows() / segments, vv.cols());
        let mut dp = vec![T::zero(); lq * lk];
        let mut ds = vec![T::zero(); lq * lk];
        let mut dq_all = self.requires(q).then(|| vec![T::zero(); qv.len()]);
        let mut dk_all = self.requires(k).then(|| vec![T::zero(); kv.len()]);
        let mut dv_all = self.requires(v).then(|| vec![T::zero(); vv.len()]);
        for s in 0..segments {
            let qs = &qv.data()[s * lq * d..(s + 1) * lq * d];
            let ks = &kv.data()[s * lk * d..(s + 1) * lk * d];
            let vs = &vv.data()[s * lk * dv..(s + 1) * lk * dv];
            let ps = &probs[s * lq * lk..(s + 1) * lq * lk];
            let gs = &g.data()[s * lq * dv..(s + 1) * lq * dv];
            if let Some(dv_all) = dv_all.as_mut() {
                let out = &mut dv_all[s * lk * dv..(s + 1) * lk * dv];
                T::gemm(lk, lq, dv, T::one(), ps, true, gs, false, T::one(), out);
            }
            T::gemm(lq, dv, lk, T::one(), gs, false, vs, true, T::zero(), &mut dp);
            for r in 0..lq {
                let pr = &ps[r * lk..(r + 1) * lk];
                let dpr = &dp[r * lk..(r + 1) * lk];
                let dot: T = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
                for j in 0..lk {
                    ds[r * lk + j] = pr[j] * (dpr[j] - dot);
                }
            }
            if let Some(dq_all) = dq_all.as_mut() {
                let out = &mut dq_all[s * lq * d..(s + 1) * lq * d];
                T::gemm(lq, lk, d, scale, &ds, false, ks, false, T::one(), out);
            }
            if let Some(dk_all) = dk_all.as_mut() {
                let out = &mut dk_all[s * lk * d..(s + 1) * lk * d];
                T::gemm(lk, lq, d, scale, &ds, true, qs, false, T::one(), out);
            }
        }
        for (var, delta) in [(q, dq_all), (k, dk_all), (v, dv_all)] {
            if let (Some(delta), Some(slot)) = (delta, self.slot(grads, var)) {
                for (o, d) in slot.data_mut().iter_mut().zip(delta) {
                    *o += d;
                }
            }
        }
    }
}
