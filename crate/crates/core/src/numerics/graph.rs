//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during a forward pass. Values are
//! immutable once recorded; [`Graph::backward`] walks the tape in reverse and
//! accumulates (never overwrites) gradients, so a node consumed twice receives
//! the sum of both contributions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::params::Params;
use crate::numerics::real::{gemm, MatMut, MatRef, Real};
use crate::numerics::tensor::Tensor;

/// Epsilon added to the variance in row normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    /// `a · b`, or `a · bᵀ` when `b_transposed`.
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Scale { x: Var, c: R },
    AddScalar { x: Var },
    Silu(Var),
    Square(Var),
    NormalizeRows { x: Var, inv_std: Vec<R> },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: R,
        probs: Vec<R>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    RepeatRows { x: Var, times: usize },
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    WeightedSum { x: Var, weights: Vec<R> },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
    grad: Option<Vec<R>>,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    params: BTreeMap<String, Var>,
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter. Repeated calls share one node, so
    /// gradients from every use are summed.
    pub fn param(&mut self, store: &Params<R>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
            .clone();
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<R>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches value shape"))
    }

    /// Gradients of every parameter touched by this graph. Parameters that
    /// did not influence the loss get explicit zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<R>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---- forward ops -------------------------------------------------

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.shape(b).len() != 2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![R::zero(); m * n];
        gemm(
            R::one(),
            MatRef::dense(self.value(a).data(), m, k),
            MatRef::dense(self.value(b).data(), k, n),
            R::zero(),
            MatMut::dense(&mut out, m, n),
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                b_transposed: false,
            },
            rg,
        ))
    }

    /// `[m×k] · [n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![R::zero(); m * n];
        gemm(
            R::one(),
            MatRef::dense(self.value(a).data(), m, k),
            MatRef::dense(self.value(b).data(), n, k).t(),
            R::zero(),
            MatMut::dense(&mut out, m, n),
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                b_transposed: true,
            },
            rg,
        ))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(R, R) -> R) -> Result<Tensor<R>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&mut self, op: &'static str, x: Var, row: Var, f: impl Fn(R, R) -> R) -> Result<Tensor<R>> {
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.cols();
        if tr.len() != c {
            return Err(Error::shape(op, tx.shape(), tr.shape()));
        }
        let r = tr.data();
        let data = tx
            .data()
            .chunks_exact(c)
            .flat_map(|xs| xs.iter().zip(r).map(|(&a, &b)| f(a, b)))
            .collect();
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// Adds a `c`-vector to every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", x, row, |a, b| a + b)?;
        let rg = self.needs(&[x, row]);
        Ok(self.push(t, Op::AddRow { x, row }, rg))
    }

    /// Multiplies every row elementwise by a `c`-vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", x, row, |a, b| a * b)?;
        let rg = self.needs(&[x, row]);
        Ok(self.push(t, Op::MulRow { x, row }, rg))
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.needs(&[x]);
        self.push(t, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: R) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.needs(&[x]);
        self.push(t, Op::AddScalar { x }, rg)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v / (R::one() + (-v).exp()));
        let rg = self.needs(&[x]);
        self.push(t, Op::Silu(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        let rg = self.needs(&[x]);
        self.push(t, Op::Square(x), rg)
    }

    /// Per-row zero mean and unit variance (population variance plus
    /// [`LAYER_NORM_EPS`]). Rows with exactly zero spread map to zeros.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let eps = R::of(LAYER_NORM_EPS);
        let n = R::of(c as f64);
        let mut out = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        for row in tx.data().chunks_exact(c) {
            let mean = row.iter().copied().sum::<R>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
            let s = R::one() / (var + eps).sqrt();
            inv_std.push(s);
            let constant = row.iter().all(|&v| v == row[0]);
            if constant {
                out.extend(std::iter::repeat_n(R::zero(), c));
            } else {
                out.extend(row.iter().map(|&v| (v - mean) * s));
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(t, Op::NormalizeRows { x, inv_std }, rg)
    }

    /// Layer normalization with an affine map along the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        for p in [gain, bias] {
            if self.value(p).len() != c {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let n = self.normalize_rows(x);
        let s = self.mul_row(n, gain)?;
        self.add_row(s, bias)
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Multi-head scaled dot-product attention
    /// `softmax(q kᵀ / √d_head + mask) v`, heads split along the channel axis.
    ///
    /// `mask` is additive with entries `0` or `-inf`; a query row whose keys
    /// are all masked is an error.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&Tensor<R>>, heads: usize) -> Result<Var> {
        let (sq, d) = self.dims2(q);
        let (sk, dk) = self.dims2(k);
        let (sv, dv) = self.dims2(v);
        if dk != d || sv != sk {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 || dv % heads != 0 || d == 0 {
            return Err(Error::Config(format!("{heads} heads do not divide widths {d}/{dv}")));
        }
        if let Some(m) = mask {
            if m.rows() != sq || m.cols() != sk {
                return Err(Error::shape("attention mask", m.shape(), &[sq, sk]));
            }
            for (row, vals) in m.data().chunks_exact(sk).enumerate() {
                if vals.iter().all(|x| *x == R::neg_infinity()) {
                    return Err(Error::DegenerateAttention { row });
                }
            }
        }
        let dh = d / heads;
        let dvh = dv / heads;
        let scale = R::one() / R::of(dh as f64).sqrt();
        let mut probs = vec![R::zero(); heads * sq * sk];
        let mut out = vec![R::zero(); sq * dv];
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for h in 0..heads {
            let p = &mut probs[h * sq * sk..(h + 1) * sq * sk];
            gemm(
                scale,
                MatRef::col_block(tq, sq, d, h * dh, dh),
                MatRef::col_block(tk, sk, d, h * dh, dh).t(),
                R::zero(),
                MatMut::dense(p, sq, sk),
            );
            if let Some(m) = mask {
                add_into(p, m.data());
            }
            for row in p.chunks_exact_mut(sk) {
                softmax_in_place(row);
            }
            gemm(
                R::one(),
                MatRef::dense(p, sq, sk),
                MatRef::col_block(tv, sk, dv, h * dvh, dvh),
                R::zero(),
                MatMut::col_block(&mut out, sq, dv, h * dvh, dvh),
            );
        }
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![sq, dv], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p);
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims2(parts[0]).1;
        let mut out = Vec::new();
        for &p in parts {
            if self.dims2(p).1 != cols {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols;
        let rg = self.needs(parts);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let tx = self.value(x);
        let data = (0..r).flat_map(|i| tx.row(i)[start..start + len].iter().copied()).collect();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { x, start }, rg))
    }

    /// Tiles the rows of `x` `times` times.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if times == 0 {
            return Err(Error::shape("repeat_rows", self.shape(x), &[0]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![r * times, c], data)?, Op::RepeatRows { x, times }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Column means: `[r×c] → [1×c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims2(x);
        let mut out = vec![R::zero(); c];
        for row in self.value(x).data().chunks_exact(c) {
            add_into(&mut out, row);
        }
        let inv = R::one() / R::of(r as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.needs(&[x]);
        self.push(Tensor::new(vec![1, c], out).expect("c > 0"), Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::new(vec![1], vec![s]).expect("scalar"), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, R::one() / R::of(n as f64))
    }

    /// `Σ w ⊙ x` for a constant weight tensor of the same size.
    pub fn weighted_sum(&mut self, x: Var, weights: &[R]) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != weights.len() {
            return Err(Error::shape("weighted_sum", tx.shape(), &[weights.len()]));
        }
        let s = tx.data().iter().zip(weights).map(|(&a, &w)| a * w).sum();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![1], vec![s])?,
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// `x · W + b` for `W: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward (scalar loss)", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<R>>> = self.nodes.iter_mut().map(|n| n.grad.take()).collect();
        let mut seed = grads[loss.0].take().unwrap_or_else(|| vec![R::zero()]);
        seed[0] += R::one();
        grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        fn buf<'a, R: Real>(grads: &'a mut [Option<Vec<R>>], nodes: &[Node<R>], v: Var) -> &'a mut Vec<R> {
            grads[v.0].get_or_insert_with(|| vec![R::zero(); nodes[v.0].value.len()])
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, b_transposed } => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let n = out.cols();
                let gm = MatRef::dense(g, m, n);
                let bv = nodes[b.0].value.data();
                let b_as_kn = if b_transposed {
                    MatRef::dense(bv, n, k).t()
                } else {
                    MatRef::dense(bv, k, n)
                };
                if wants(a) {
                    gemm(R::one(), gm, b_as_kn.t(), R::one(), MatMut::dense(buf(grads, nodes, a), m, k));
                }
                if wants(b) {
                    let av = MatRef::dense(nodes[a.0].value.data(), m, k);
                    if b_transposed {
                        gemm(R::one(), gm.t(), av, R::one(), MatMut::dense(buf(grads, nodes, b), n, k));
                    } else {
                        gemm(R::one(), av.t(), gm, R::one(), MatMut::dense(buf(grads, nodes, b), k, n));
                    }
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    add_into(buf(grads, nodes, a), g);
                }
                if wants(b) {
                    add_into(buf(grads, nodes, b), g);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    add_into(buf(grads, nodes, a), g);
                }
                if wants(b) {
                    for (d, &s) in buf(grads, nodes, b).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = nodes[b.0].value.data();
                    for ((d, &s), &y) in buf(grads, nodes, a).iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if wants(b) {
                    let av = nodes[a.0].value.data();
                    for ((d, &s), &x) in buf(grads, nodes, b).iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            &Op::AddRow { x, row } => {
                let c = out.cols();
                if wants(x) {
                    add_into(buf(grads, nodes, x), g);
                }
                if wants(row) {
                    let gr = buf(grads, nodes, row);
                    for gs in g.chunks_exact(c) {
                        add_into(gr, gs);
                    }
                }
            }
            &Op::MulRow { x, row } => {
                let c = out.cols();
                if wants(x) {
                    let rv = nodes[row.0].value.data();
                    let gx = buf(grads, nodes, x);
                    for (gxs, gs) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((d, &s), &r) in gxs.iter_mut().zip(gs).zip(rv) {
                            *d += s * r;
                        }
                    }
                }
                if wants(row) {
                    let xv = nodes[x.0].value.data();
                    let gr = buf(grads, nodes, row);
                    for (xs, gs) in xv.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for ((d, &s), &xx) in gr.iter_mut().zip(gs).zip(xs) {
                            *d += s * xx;
                        }
                    }
                }
            }
            &Op::Scale { x, c } => {
                if wants(x) {
                    for (d, &s) in buf(grads, nodes, x).iter_mut().zip(g) {
                        *d += s * c;
                    }
                }
            }
            &Op::AddScalar { x } | &Op::Reshape(x) => {
                if wants(x) {
                    add_into(buf(grads, nodes, x), g);
                }
            }
            &Op::Silu(x) => {
                if wants(x) {
                    let xv = nodes[x.0].value.data();
                    for ((d, &s), &v) in buf(grads, nodes, x).iter_mut().zip(g).zip(xv) {
                        let sig = R::one() / (R::one() + (-v).exp());
                        *d += s * sig * (R::one() + v * (R::one() - sig));
                    }
                }
            }
            &Op::Square(x) => {
                if wants(x) {
                    let xv = nodes[x.0].value.data();
                    for ((d, &s), &v) in buf(grads, nodes, x).iter_mut().zip(g).zip(xv) {
                        *d += s * (v + v);
                    }
                }
            }
            Op::NormalizeRows { x, inv_std } => {
                let x = *x;
                if wants(x) {
                    let c = out.cols();
                    let n = R::of(c as f64);
                    let gx = buf(grads, nodes, x);
                    for (r, ((gxs, gs), ys)) in gx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(out.data().chunks_exact(c))
                        .enumerate()
                    {
                        let mean_g = gs.iter().copied().sum::<R>() / n;
                        let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<R>() / n;
                        let s = inv_std[r];
                        for ((d, &gg), &y) in gxs.iter_mut().zip(gs).zip(ys) {
                            *d += s * (gg - mean_g - y * mean_gy);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                if wants(x) {
                    let c = out.cols();
                    let gx = buf(grads, nodes, x);
                    for ((gxs, gs), ys) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.data().chunks_exact(c)) {
                        let dot = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<R>();
                        for ((d, &gg), &y) in gxs.iter_mut().zip(gs).zip(ys) {
                            *d += y * (gg - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, *scale, probs, g, grads),
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut start = 0;
                for &p in parts {
                    let c = nodes[p.0].value.cols();
                    if wants(p) {
                        let gp = buf(grads, nodes, p);
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + start..r * total + start + c]);
                        }
                    }
                    start += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if wants(p) {
                        add_into(buf(grads, nodes, p), &g[start..start + n]);
                    }
                    start += n;
                }
            }
            &Op::SliceRows { x, start } => {
                if wants(x) {
                    let c = out.cols();
                    add_into(&mut buf(grads, nodes, x)[start * c..start * c + g.len()], g);
                }
            }
            &Op::SliceCols { x, start } => {
                if wants(x) {
                    let total = nodes[x.0].value.cols();
                    let len = out.cols();
                    let gx = buf(grads, nodes, x);
                    for (r, gs) in g.chunks_exact(len).enumerate() {
                        add_into(&mut gx[r * total + start..r * total + start + len], gs);
                    }
                }
            }
            &Op::RepeatRows { x, times } => {
                if wants(x) {
                    let n = nodes[x.0].value.len();
                    let gx = buf(grads, nodes, x);
                    for t in 0..times {
                        add_into(gx, &g[t * n..(t + 1) * n]);
                    }
                }
            }
            &Op::MeanRows(x) => {
                if wants(x) {
                    let (r, c) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                    let inv = R::one() / R::of(r as f64);
                    let gx = buf(grads, nodes, x);
                    for gxs in gx.chunks_exact_mut(c) {
                        for (d, &s) in gxs.iter_mut().zip(g) {
                            *d += s * inv;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    buf(grads, nodes, x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::WeightedSum { x, weights } => {
                let x = *x;
                if wants(x) {
                    for (d, &w) in buf(grads, nodes, x).iter_mut().zip(weights) {
                        *d += g[0] * w;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: R,
        probs: &[R],
        g: &[R],
        grads: &mut [Option<Vec<R>>],
    ) {
        let nodes = &self.nodes;
        let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let (sq, d) = (tq.rows(), tq.cols());
        let sk = tk.rows();
        let dv = tv.cols();
        let (dh, dvh) = (d / heads, dv / heads);
        let (need_q, need_k, need_v) = (
            nodes[q.0].requires_grad,
            nodes[k.0].requires_grad,
            nodes[v.0].requires_grad,
        );
        let mut gq = need_q.then(|| grads[q.0].take().unwrap_or_else(|| vec![R::zero(); tq.len()]));
        let mut gk = need_k.then(|| grads[k.0].take().unwrap_or_else(|| vec![R::zero(); tk.len()]));
        let mut gv = need_v.then(|| grads[v.0].take().unwrap_or_else(|| vec![R::zero(); tv.len()]));
        let mut dp = vec![R::zero(); sq * sk];
        for h in 0..heads {
            let p = &probs[h * sq * sk..(h + 1) * sq * sk];
            let go = MatRef::col_block(g, sq, dv, h * dvh, dvh);
            if let Some(gv) = gv.as_mut() {
                gemm(
                    R::one(),
                    MatRef::dense(p, sq, sk).t(),
                    go,
                    R::one(),
                    MatMut::col_block(gv, sk, dv, h * dvh, dvh),
                );
            }
            if gq.is_none() && gk.is_none() {
                continue;
            }
            gemm(
                R::one(),
                go,
                MatRef::col_block(tv.data(), sk, dv, h * dvh, dvh).t(),
                R::zero(),
                MatMut::dense(&mut dp, sq, sk),
            );
            for (dps, ps) in dp.chunks_exact_mut(sk).zip(p.chunks_exact(sk)) {
                let dot = dps.iter().zip(ps).map(|(&a, &b)| a * b).sum::<R>();
                for (d, &pp) in dps.iter_mut().zip(ps) {
                    *d = pp * (*d - dot);
                }
            }
            if let Some(gq) = gq.as_mut() {
                gemm(
                    scale,
                    MatRef::dense(&dp, sq, sk),
                    MatRef::col_block(tk.data(), sk, d, h * dh, dh),
                    R::one(),
                    MatMut::col_block(gq, sq, d, h * dh, dh),
                );
            }
            if let Some(gk) = gk.as_mut() {
                gemm(
                    scale,
                    MatRef::dense(&dp, sq, sk).t(),
                    MatRef::col_block(tq.data(), sq, d, h * dh, dh),
                    R::one(),
                    MatMut::col_block(gk, sk, d, h * dh, dh),
                );
            }
        }
        // q, k, v may alias (self-attention on one tensor); merge in order.
        for (var, gbuf) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(gb) = gbuf {
                match grads[var.0].as_mut() {
                    Some(existing) => add_into(existing, &gb),
                    None => grads[var.0] = Some(gb),
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut total = R::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = R::one() / total;
    row.iter_mut().for_each(|x| *x *= inv);
}
