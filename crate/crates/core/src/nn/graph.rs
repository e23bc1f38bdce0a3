//! Minimal dense reverse-mode autodiff.
//!
//! A [`Graph`] records a tape of 2-D tensor nodes; [`Var`] is a cheap handle.
//! Forward values are computed eagerly at op creation; `backward` on a
//! scalar node walks the tape once in reverse and accumulates gradients,
//! returning per-parameter gradients (dense, or sparse row maps for
//! embedding-table gathers).

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;

/// Work threshold below which matmuls stay single-threaded.
const PAR_FLOPS: usize = 1 << 17;

/// C[m,n] += A[m,k] · B[k,n]
fn matmul_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let body = |(row_c, row_a): (&mut [S], &[S])| {
        for (l, &a_il) in row_a.iter().enumerate() {
            if a_il == S::zero() {
                continue;
            }
            let row_b = &b[l * n..(l + 1) * n];
            for (cv, &bv) in row_c.iter_mut().zip(row_b) {
                *cv += a_il * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        c.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(body);
    } else {
        c.chunks_mut(n).zip(a.chunks(k)).for_each(body);
    }
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ
fn matmul_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let body = |(row_c, row_a): (&mut [S], &[S])| {
        for (j, cv) in row_c.iter_mut().enumerate() {
            let row_b = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in row_a.iter().zip(row_b) {
                acc += av * bv;
            }
            *cv += acc;
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        c.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(body);
    } else {
        c.chunks_mut(n).zip(a.chunks(k)).for_each(body);
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]
fn matmul_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    if m * k * n >= PAR_FLOPS && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(l, row_c)| {
            for i in 0..m {
                let a_il = a[i * k + l];
                if a_il == S::zero() {
                    continue;
                }
                let row_b = &b[i * n..(i + 1) * n];
                for (cv, &bv) in row_c.iter_mut().zip(row_b) {
                    *cv += a_il * bv;
                }
            }
        });
    } else {
        for i in 0..m {
            let row_a = &a[i * k..(i + 1) * k];
            let row_b = &b[i * n..(i + 1) * n];
            for (l, &a_il) in row_a.iter().enumerate() {
                if a_il == S::zero() {
                    continue;
                }
                let row_c = &mut c[l * n..(l + 1) * n];
                for (cv, &bv) in row_c.iter_mut().zip(row_b) {
                    *cv += a_il * bv;
                }
            }
        }
    }
}

fn stable_softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// tanh-approximation GELU (the variant differentiated by the backward pass).
fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::of(0.7978845608028654); // sqrt(2/pi)
    let a = S::of(0.044715);
    let u = c * (x + a * x * x * x);
    S::of(0.5) * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::of(0.7978845608028654);
    let a = S::of(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + S::of(3.0) * a * x * x);
    S::of(0.5) * (S::one() + t) + S::of(0.5) * x * (S::one() - t * t) * du
}

const NORM_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    ParamLeaf { param: usize },
    /// Rows gathered from a parameter table; index -1 yields a zero row and
    /// receives no gradient.
    GatherParam { param: usize, indices: Vec<i64> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, S),
    AddRowBroadcast(usize, usize),
    MulScalarNode(usize, usize),
    MulConst(usize, Vec<S>),
    AddConst(usize),
    Matmul(usize, usize),
    MatmulNT(usize, usize),
    RowDot(usize, usize),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    Gelu(usize),
    SumAll(usize),
    MeanAll(usize),
    LogSumExpRows(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize },
    RmsNorm { x: usize, gain: usize },
    GatherRows { x: usize, indices: Vec<usize> },
    ConcatCols(Vec<usize>),
    L2NormRows { x: usize, norms: Vec<S> },
    Dropout(usize, Rc<Vec<S>>),
    TakeDiag(usize),
    Reshape(usize),
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        len: usize,
        heads: usize,
        /// Pre-dropout attention probabilities, [batch·heads·len·len].
        probs: Vec<S>,
        drop_mask: Option<Rc<Vec<S>>>,
    },
}

struct Node<S: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

struct Inner<S: Scalar> {
    nodes: Vec<Node<S>>,
    last_grads: Option<Vec<Option<Vec<S>>>>,
}

/// Tape of recorded operations.
pub struct Graph<S: Scalar> {
    inner: Rc<RefCell<Inner<S>>>,
}

impl<S: Scalar> Clone for Graph<S> {
    fn clone(&self) -> Self {
        Graph { inner: Rc::clone(&self.inner) }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Graph`].
pub struct Var<S: Scalar> {
    graph: Graph<S>,
    pub id: usize,
}

impl<S: Scalar> Clone for Var<S> {
    fn clone(&self) -> Self {
        Var { graph: self.graph.clone(), id: self.id }
    }
}

/// Per-parameter gradients collected by `backward`.
#[derive(Debug, Clone)]
pub struct Gradients<S: Scalar> {
    pub dense: BTreeMap<usize, Vec<S>>,
    /// param id → row index → row gradient
    pub sparse: BTreeMap<usize, BTreeMap<usize, Vec<S>>>,
}

impl<S: Scalar> Default for Gradients<S> {
    fn default() -> Self {
        Gradients { dense: BTreeMap::new(), sparse: BTreeMap::new() }
    }
}

impl<S: Scalar> Gradients<S> {
    pub fn squared_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for g in self.dense.values() {
            for &v in g {
                acc += v.as_f64() * v.as_f64();
            }
        }
        for rows in self.sparse.values() {
            for g in rows.values() {
                for &v in g {
                    acc += v.as_f64() * v.as_f64();
                }
            }
        }
        acc
    }

    pub fn scale(&mut self, factor: f64) {
        let f = S::of(factor);
        for g in self.dense.values_mut() {
            for v in g {
                *v *= f;
            }
        }
        for rows in self.sparse.values_mut() {
            for g in rows.values_mut() {
                for v in g {
                    *v *= f;
                }
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { inner: Rc::new(RefCell::new(Inner { nodes: Vec::new(), last_grads: None })) }
    }

    fn push(&self, rows: usize, cols: usize, data: Vec<S>, op: Op<S>, requires_grad: bool) -> Var<S> {
        debug_assert_eq!(data.len(), rows * cols);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { rows, cols, data, op, requires_grad });
        Var { graph: self.clone(), id }
    }

    /// Constant input (no gradient).
    pub fn constant(&self, rows: usize, cols: usize, data: Vec<S>) -> Var<S> {
        self.push(rows, cols, data, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a registered parameter (gradient
    /// checks use this).
    pub fn leaf(&self, rows: usize, cols: usize, data: Vec<S>) -> Var<S> {
        self.push(rows, cols, data, Op::Leaf, true)
    }

    /// Leaf bound to a dense parameter (data copied onto the tape).
    pub fn param(&self, store: &ParamStore<S>, pid: usize) -> Var<S> {
        let p = store.get(pid);
        self.push(p.rows, p.cols, p.data.clone(), Op::ParamLeaf { param: pid }, true)
    }

    /// Gathers rows of a parameter table; index -1 yields a zero row.
    /// Gradients flow only to the touched rows (collected sparsely).
    pub fn gather_param(&self, store: &ParamStore<S>, pid: usize, indices: &[i64]) -> Var<S> {
        let p = store.get(pid);
        let dim = p.cols;
        let mut data = vec![S::zero(); indices.len() * dim];
        for (t, &idx) in indices.iter().enumerate() {
            if idx >= 0 {
                let r = idx as usize;
                debug_assert!(r < p.rows, "gather index {r} out of {}", p.rows);
                data[t * dim..(t + 1) * dim].copy_from_slice(&p.data[r * dim..(r + 1) * dim]);
            }
        }
        self.push(
            indices.len(),
            dim,
            data,
            Op::GatherParam { param: pid, indices: indices.to_vec() },
            true,
        )
    }

    fn node_shape(&self, id: usize) -> (usize, usize) {
        let inner = self.inner.borrow();
        (inner.nodes[id].rows, inner.nodes[id].cols)
    }

    fn with_data<R>(&self, id: usize, f: impl FnOnce(&[S]) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.nodes[id].data)
    }
}

/// Inverted dropout mask: each entry is 0 with probability `p`, else
/// `1/(1-p)`, preserving the expected value.
pub fn dropout_mask<S: Scalar>(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Rc<Vec<S>> {
    let keep = S::of(1.0 / (1.0 - p));
    Rc::new((0..len).map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep }).collect())
}

impl<S: Scalar> Var<S> {
    pub fn rows(&self) -> usize {
        self.graph.node_shape(self.id).0
    }

    pub fn cols(&self) -> usize {
        self.graph.node_shape(self.id).1
    }

    pub fn value(&self) -> Vec<S> {
        self.graph.with_data(self.id, |d| d.to_vec())
    }

    /// Scalar value of a [1,1] node.
    pub fn scalar(&self) -> S {
        self.graph.with_data(self.id, |d| d[0])
    }

    /// Gradient of this node from the most recent `backward` call.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.graph.inner.borrow().last_grads.as_ref().and_then(|g| g[self.id].clone())
    }

    fn same_graph(&self, o: &Var<S>) {
        assert!(Rc::ptr_eq(&self.graph.inner, &o.graph.inner), "vars from different graphs");
    }

    fn binary_elem(&self, o: &Var<S>, op: fn(usize, usize) -> Op<S>, f: fn(S, S) -> S) -> Var<S> {
        self.same_graph(o);
        let (r, c) = self.graph.node_shape(self.id);
        let (r2, c2) = self.graph.node_shape(o.id);
        assert_eq!((r, c), (r2, c2), "elementwise shape mismatch");
        let data = self.graph.with_data(self.id, |a| {
            self.graph.with_data(o.id, |b| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
        });
        self.graph.push(r, c, data, op(self.id, o.id), true)
    }

    pub fn add(&self, o: &Var<S>) -> Var<S> {
        self.binary_elem(o, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, o: &Var<S>) -> Var<S> {
        self.binary_elem(o, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, o: &Var<S>) -> Var<S> {
        self.binary_elem(o, Op::Mul, |a, b| a * b)
    }

    pub fn neg(&self) -> Var<S> {
        let (r, c) = self.graph.node_shape(self.id);
        let data = self.graph.with_data(self.id, |a| a.iter().map(|&x| -x).collect());
        self.graph.push(r, c, data, Op::Neg(self.id), true)
    }

    pub fn scale(&self, factor: f64) -> Var<S> {
        let s = S::of(factor);
        let (r, c) = self.graph.node_shape(self.id);
        let data = self.graph.with_data(self.id, |a| a.iter().map(|&x| x * s).collect());
        self.graph.push(r, c, data, Op::Scale(self.id, s), true)
    }

    /// `self[m,n] + bias[1,n]` broadcast over rows.
    pub fn add_row(&self, bias: &Var<S>) -> Var<S> {
        self.same_graph(bias);
        let (m, n) = self.graph.node_shape(self.id);
        let (br, bc) = self.graph.node_shape(bias.id);
        assert_eq!((br, bc), (1, n), "bias shape mismatch");
        let data = self.graph.with_data(self.id, |a| {
            self.graph.with_data(bias.id, |b| {
                let mut out = a.to_vec();
                for row in out.chunks_mut(n) {
                    for (v, &bv) in row.iter_mut().zip(b) {
                        *v += bv;
                    }
                }
                out
            })
        });
        self.graph.push(m, n, data, Op::AddRowBroadcast(self.id, bias.id), true)
    }

    /// Multiply every entry by a scalar node [1,1].
    pub fn mul_scalar(&self, s: &Var<S>) -> Var<S> {
        self.same_graph(s);
        assert_eq!(self.graph.node_shape(s.id), (1, 1));
        let (m, n) = self.graph.node_shape(self.id);
        let sv = s.scalar();
        let data = self.graph.with_data(self.id, |a| a.iter().map(|&x| x * sv).collect());
        self.graph.push(m, n, data, Op::MulScalarNode(self.id, s.id), true)
    }

    pub fn mul_const(&self, c: &[S]) -> Var<S> {
        let (m, n) = self.graph.node_shape(self.id);
        assert_eq!(c.len(), m * n);
        let data =
            self.graph.with_data(self.id, |a| a.iter().zip(c).map(|(&x, &y)| x * y).collect());
        self.graph.push(m, n, data, Op::MulConst(self.id, c.to_vec()), true)
    }

    pub fn add_const(&self, c: &[S]) -> Var<S> {
        let (m, n) = self.graph.node_shape(self.id);
        assert_eq!(c.len(), m * n);
        let data =
            self.graph.with_data(self.id, |a| a.iter().zip(c).map(|(&x, &y)| x + y).collect());
        self.graph.push(m, n, data, Op::AddConst(self.id), true)
    }

    pub fn matmul(&self, o: &Var<S>) -> Var<S> {
        self.same_graph(o);
        let (m, k) = self.graph.node_shape(self.id);
        let (k2, n) = self.graph.node_shape(o.id);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut data = vec![S::zero(); m * n];
        self.graph.with_data(self.id, |a| {
            self.graph.with_data(o.id, |b| matmul_nn(a, b, &mut data, m, k, n))
        });
        self.graph.push(m, n, data, Op::Matmul(self.id, o.id), true)
    }

    /// `self[m,k] · o[n,k]ᵀ`
    pub fn matmul_nt(&self, o: &Var<S>) -> Var<S> {
        self.same_graph(o);
        let (m, k) = self.graph.node_shape(self.id);
        let (n, k2) = self.graph.node_shape(o.id);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut data = vec![S::zero(); m * n];
        self.graph.with_data(self.id, |a| {
            self.graph.with_data(o.id, |b| matmul_nt(a, b, &mut data, m, k, n))
        });
        self.graph.push(m, n, data, Op::MatmulNT(self.id, o.id), true)
    }

    /// Row-wise dot product of two [m,n] nodes → [m,1].
    pub fn row_dot(&self, o: &Var<S>) -> Var<S> {
        self.same_graph(o);
        let (m, n) = self.graph.node_shape(self.id);
        assert_eq!((m, n), self.graph.node_shape(o.id));
        let data = self.graph.with_data(self.id, |a| {
            self.graph.with_data(o.id, |b| {
                (0..m)
                    .map(|i| {
                        let mut acc = S::zero();
                        for j in 0..n {
                            acc += a[i * n + j] * b[i * n + j];
                        }
                        acc
                    })
                    .collect()
            })
        });
        self.graph.push(m, 1, data, Op::RowDot(self.id, o.id), true)
    }

    fn unary(&self, op: fn(usize) -> Op<S>, f: fn(S) -> S) -> Var<S> {
        let (r, c) = self.graph.node_shape(self.id);
        let data = self.graph.with_data(self.id, |a| a.iter().map(|&x| f(x)).collect());
        self.graph.push(r, c, data, op(self.id), true)
    }

    pub fn exp(&self) -> Var<S> {
        self.unary(Op::Exp, |x| x.exp())
    }

    pub fn ln(&self) -> Var<S> {
        self.unary(Op::Ln, |x| x.ln())
    }

    pub fn softplus(&self) -> Var<S> {
        self.unary(Op::Softplus, stable_softplus)
    }

    pub fn gelu(&self) -> Var<S> {
        self.unary(Op::Gelu, gelu_fwd)
    }

    pub fn sum(&self) -> Var<S> {
        let data = self.graph.with_data(self.id, |a| vec![a.iter().copied().sum::<S>()]);
        self.graph.push(1, 1, data, Op::SumAll(self.id), true)
    }

    pub fn mean(&self) -> Var<S> {
        let (r, c) = self.graph.node_shape(self.id);
        let inv = S::of(1.0 / (r * c) as f64);
        let data = self.graph.with_data(self.id, |a| vec![a.iter().copied().sum::<S>() * inv]);
        self.graph.push(1, 1, data, Op::MeanAll(self.id), true)
    }

    /// Row-wise log-sum-exp → [m,1].
    pub fn logsumexp_rows(&self) -> Var<S> {
        let (m, n) = self.graph.node_shape(self.id);
        let data = self.graph.with_data(self.id, |a| {
            (0..m)
                .map(|i| {
                    let row = &a[i * n..(i + 1) * n];
                    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let s: S = row.iter().map(|&x| (x - mx).exp()).sum();
                    mx + s.ln()
                })
                .collect()
        });
        self.graph.push(m, 1, data, Op::LogSumExpRows(self.id), true)
    }

    pub fn softmax_rows(&self) -> Var<S> {
        let (m, n) = self.graph.node_shape(self.id);
        let data = self.graph.with_data(self.id, |a| {
            let mut out = vec![S::zero(); m * n];
            for i in 0..m {
                let row = &a[i * n..(i + 1) * n];
                let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                let orow = &mut out[i * n..(i + 1) * n];
                let mut s = S::zero();
                for (o, &x) in orow.iter_mut().zip(row) {
                    *o = (x - mx).exp();
                    s += *o;
                }
                for o in orow.iter_mut() {
                    *o = *o / s;
                }
            }
            out
        });
        self.graph.push(m, n, data, Op::SoftmaxRows(self.id), true)
    }

    pub fn log_softmax_rows(&self) -> Var<S> {
        let (m, n) = self.graph.node_shape(self.id);
        let data = self.graph.with_data(self.id, |a| {
            let mut out = vec![S::zero(); m * n];
            for i in 0..m {
                let row = &a[i * n..(i + 1) * n];
                let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<S>().ln();
                for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o = x - lse;
                }
            }
            out
        });
        self.graph.push(m, n, data, Op::LogSoftmaxRows(self.id), true)
    }

    /// Row-wise layer normalization with learnable gain and bias [1,n].
    pub fn layer_norm(&self, gain: &Var<S>, bias: &Var<S>) -> Var<S> {
        self.same_graph(gain);
        self.same_graph(bias);
        let (m, n) = self.graph.node_shape(self.id);
        assert_eq!(self.graph.node_shape(gain.id), (1, n));
        assert_eq!(self.graph.node_shape(bias.id), (1, n));
        let eps = S::of(NORM_EPS);
        let inv_n = S::of(1.0 / n as f64);
        let data = self.graph.with_data(self.id, |x| {
            self.graph.with_data(gain.id, |g| {
                self.graph.with_data(bias.id, |b| {
                    let mut out = vec![S::zero(); m * n];
                    for i in 0..m {
                        let row = &x[i * n..(i + 1) * n];
                        let mean = row.iter().copied().sum::<S>() * inv_n;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
                        let inv_std = S::one() / (var + eps).sqrt();
                        for j in 0..n {
                            out[i * n + j] = g[j] * ((row[j] - mean) * inv_std) + b[j];
                        }
                    }
                    out
                })
            })
        });
        self.graph.push(m, n, data, Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id }, true)
    }

    /// Row-wise RMS normalization with learnable gain [1,n].
    pub fn rms_norm(&self, gain: &Var<S>) -> Var<S> {
        self.same_graph(gain);
        let (m, n) = self.graph.node_shape(self.id);
        assert_eq!(self.graph.node_shape(gain.id), (1, n));
        let eps = S::of(NORM_EPS);
        let inv_n = S::of(1.0 / n as f64);
        let data = self.graph.with_data(self.id, |x| {
            self.graph.with_data(gain.id, |g| {
                let mut out = vec![S::zero(); m * n];
                for i in 0..m {
                    let row = &x[i * n..(i + 1) * n];
                    let ms = row.iter().map(|&v| v * v).sum::<S>() * inv_n;
                    let inv_rms = S::one() / (ms + eps).sqrt();
                    for j in 0..n {
                        out[i * n + j] = g[j] * row[j] * inv_rms;
                    }
                }
                out
            })
        });
        self.graph.push(m, n, data, Op::RmsNorm { x: self.id, gain: gain.id }, true)
    }

    /// Stacks the selected rows (repeats allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Var<S> {
        let (m, n) = self.graph.node_shape(self.id);
        let data = self.graph.with_data(self.id, |a| {
            let mut out = vec![S::zero(); indices.len() * n];
            for (t, &i) in indices.iter().enumerate() {
                assert!(i < m, "gather_rows index {i} out of {m}");
                out[t * n..(t + 1) * n].copy_from_slice(&a[i * n..(i + 1) * n]);
            }
            out
        });
        self.graph.push(
            indices.len(),
            n,
            data,
            Op::GatherRows { x: self.id, indices: indices.to_vec() },
            true,
        )
    }

    /// Rows scaled to unit L2 norm (norms clamped at 1e-12).
    pub fn l2_normalize_rows(&self) -> Var<S> {
        let (m, n) = self.graph.node_shape(self.id);
        let floor = S::of(1e-12);
        let (data, norms) = self.graph.with_data(self.id, |a| {
            let mut out = vec![S::zero(); m * n];
            let mut norms = vec![S::zero(); m];
            for i in 0..m {
                let row = &a[i * n..(i + 1) * n];
                let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt().max(floor);
                norms[i] = norm;
                for j in 0..n {
                    out[i * n + j] = row[j] / norm;
                }
            }
            (out, norms)
        });
        self.graph.push(m, n, data, Op::L2NormRows { x: self.id, norms }, true)
    }

    pub fn dropout(&self, mask: &Rc<Vec<S>>) -> Var<S> {
        let (m, n) = self.graph.node_shape(self.id);
        assert_eq!(mask.len(), m * n);
        let data = self
            .graph
            .with_data(self.id, |a| a.iter().zip(mask.iter()).map(|(&x, &w)| x * w).collect());
        self.graph.push(m, n, data, Op::Dropout(self.id, Rc::clone(mask)), true)
    }

    /// Same data, new [rows, cols] view (row-major, size preserved).
    pub fn reshape(&self, rows: usize, cols: usize) -> Var<S> {
        let (r, c) = self.graph.node_shape(self.id);
        assert_eq!(r * c, rows * cols, "reshape size mismatch");
        let data = self.value();
        self.graph.push(rows, cols, data, Op::Reshape(self.id), true)
    }

    /// Diagonal of a square matrix → [m,1].
    pub fn take_diag(&self) -> Var<S> {
        let (m, n) = self.graph.node_shape(self.id);
        assert_eq!(m, n, "take_diag needs a square matrix");
        let data = self.graph.with_data(self.id, |a| (0..m).map(|i| a[i * n + i]).collect());
        self.graph.push(m, 1, data, Op::TakeDiag(self.id), true)
    }

    /// Stop-gradient: the values re-enter the graph as a constant.
    pub fn detach(&self) -> Var<S> {
        let (m, n) = self.graph.node_shape(self.id);
        let data = self.value();
        self.graph.constant(m, n, data)
    }
}

/// Column-wise concatenation of nodes with equal row counts.
pub fn concat_cols<S: Scalar>(vars: &[Var<S>]) -> Var<S> {
    assert!(!vars.is_empty());
    let graph = vars[0].graph.clone();
    let m = vars[0].rows();
    let widths: Vec<usize> = vars
        .iter()
        .map(|v| {
            assert_eq!(v.rows(), m, "concat_cols row mismatch");
            v.cols()
        })
        .collect();
    let n: usize = widths.iter().sum();
    let mut data = vec![S::zero(); m * n];
    let mut off = 0usize;
    for (v, &w) in vars.iter().zip(&widths) {
        graph.with_data(v.id, |a| {
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(&a[i * w..(i + 1) * w]);
            }
        });
        off += w;
    }
    graph.push(m, n, data, Op::ConcatCols(vars.iter().map(|v| v.id).collect()), true)
}

/// Causal multi-head self-attention over `batch` packed sequences of length
/// `len`. Inputs are [batch·len, d]; position i attends to positions ≤ i of
/// its own sequence. `drop_mask`, when given, is an inverted dropout mask
/// over the [batch·heads·len·len] attention probabilities.
pub fn causal_self_attention<S: Scalar>(
    q: &Var<S>,
    k: &Var<S>,
    v: &Var<S>,
    batch: usize,
    len: usize,
    heads: usize,
    drop_mask: Option<Rc<Vec<S>>>,
) -> Result<Var<S>> {
    q.same_graph(k);
    q.same_graph(v);
    let (m, d) = q.graph.node_shape(q.id);
    if m != batch * len {
        return Err(Error::shape(format!("attention rows {m} != batch*len {}", batch * len)));
    }
    if q.graph.node_shape(k.id) != (m, d) || q.graph.node_shape(v.id) != (m, d) {
        return Err(Error::shape("attention q/k/v shapes differ"));
    }
    if d % heads != 0 {
        return Err(Error::shape(format!("heads {heads} does not divide dim {d}")));
    }
    if let Some(mask) = &drop_mask {
        if mask.len() != batch * heads * len * len {
            return Err(Error::shape("attention dropout mask size"));
        }
    }
    let dh = d / heads;
    let scale = S::of(1.0 / (dh as f64).sqrt());

    let mut probs = vec![S::zero(); batch * heads * len * len];
    let mut out = vec![S::zero(); m * d];
    let mask_slice: Option<&[S]> = drop_mask.as_deref().map(|m| m.as_slice());
    q.graph.with_data(q.id, |qd| {
        q.graph.with_data(k.id, |kd| {
            q.graph.with_data(v.id, |vd| {
                // deterministic parallelism: each (batch, head) owns a
                // disjoint slice of probs and of the head's output columns
                let jobs: Vec<(usize, usize)> =
                    (0..batch).flat_map(|b| (0..heads).map(move |h| (b, h))).collect();
                let results: Vec<(usize, usize, Vec<S>, Vec<S>)> = jobs
                    .par_iter()
                    .map(|&(b, h)| {
                        let mut p_local = vec![S::zero(); len * len];
                        let mut o_local = vec![S::zero(); len * dh];
                        for i in 0..len {
                            let qrow = &qd[(b * len + i) * d + h * dh..(b * len + i) * d + (h + 1) * dh];
                            // scores over keys 0..=i
                            let mut mx = S::neg_infinity();
                            for j in 0..=i {
                                let krow =
                                    &kd[(b * len + j) * d + h * dh..(b * len + j) * d + (h + 1) * dh];
                                let mut acc = S::zero();
                                for (&a, &bv) in qrow.iter().zip(krow) {
                                    acc += a * bv;
                                }
                                let s = acc * scale;
                                p_local[i * len + j] = s;
                                mx = mx.max(s);
                            }
                            let mut denom = S::zero();
                            for j in 0..=i {
                                let e = (p_local[i * len + j] - mx).exp();
                                p_local[i * len + j] = e;
                                denom += e;
                            }
                            for j in 0..=i {
                                p_local[i * len + j] = p_local[i * len + j] / denom;
                            }
                            for j in 0..=i {
                                let mut w = p_local[i * len + j];
                                if let Some(mask) = mask_slice {
                                    w = w * mask[((b * heads + h) * len + i) * len + j];
                                }
                                if w == S::zero() {
                                    continue;
                                }
                                let vrow =
                                    &vd[(b * len + j) * d + h * dh..(b * len + j) * d + (h + 1) * dh];
                                for (o, &vv) in
                                    o_local[i * dh..(i + 1) * dh].iter_mut().zip(vrow)
                                {
                                    *o += w * vv;
                                }
                            }
                        }
                        (b, h, p_local, o_local)
                    })
                    .collect();
                for (b, h, p_local, o_local) in results {
                    probs[(b * heads + h) * len * len..(b * heads + h + 1) * len * len]
                        .copy_from_slice(&p_local);
                    for i in 0..len {
                        out[(b * len + i) * d + h * dh..(b * len + i) * d + (h + 1) * dh]
                            .copy_from_slice(&o_local[i * dh..(i + 1) * dh]);
                    }
                }
            })
        })
    });
    Ok(q.graph.push(
        m,
        d,
        out,
        Op::CausalAttention { q: q.id, k: k.id, v: v.id, batch, len, heads, probs, drop_mask },
        true,
    ))
}

/// Runs reverse-mode accumulation from a scalar loss node and collects
/// per-parameter gradients. Each tape node is visited exactly once.
pub fn backward<S: Scalar>(loss: &Var<S>) -> Result<Gradients<S>> {
    let graph = loss.graph.clone();
    let mut inner = graph.inner.borrow_mut();
    let n_nodes = inner.nodes.len();
    let (lr, lc) = (inner.nodes[loss.id].rows, inner.nodes[loss.id].cols);
    if (lr, lc) != (1, 1) {
        return Err(Error::shape(format!("backward needs a scalar loss, got [{lr},{lc}]")));
    }

    let mut grads: Vec<Option<Vec<S>>> = vec![None; n_nodes];
    grads[loss.id] = Some(vec![S::one()]);
    let mut out = Gradients::default();

    macro_rules! add_grad {
        ($idx:expr, $apply:expr) => {{
            let idx: usize = $idx;
            if inner.nodes[idx].requires_grad {
                let len = inner.nodes[idx].rows * inner.nodes[idx].cols;
                let slot = grads[idx].get_or_insert_with(|| vec![S::zero(); len]);
                #[allow(clippy::redundant_closure_call)]
                ($apply)(slot.as_mut_slice());
            }
        }};
    }

    for id in (0..n_nodes).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &inner.nodes[id];
        if !node.requires_grad {
            continue;
        }
        let (m, n) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {
                grads[id] = Some(g); // keep for inspection
                continue;
            }
            Op::ParamLeaf { param } => {
                let entry = out.dense.entry(*param).or_insert_with(|| vec![S::zero(); g.len()]);
                for (e, &gv) in entry.iter_mut().zip(&g) {
                    *e += gv;
                }
            }
            Op::GatherParam { param, indices } => {
                let rows = out.sparse.entry(*param).or_default();
                for (t, &idx) in indices.iter().enumerate() {
                    if idx < 0 {
                        continue;
                    }
                    let row = rows.entry(idx as usize).or_insert_with(|| vec![S::zero(); n]);
                    for (r, &gv) in row.iter_mut().zip(&g[t * n..(t + 1) * n]) {
                        *r += gv;
                    }
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                add_grad!(a, |s: &mut [S]| for (sv, &gv) in s.iter_mut().zip(&g) {
                    *sv += gv;
                });
                add_grad!(b, |s: &mut [S]| for (sv, &gv) in s.iter_mut().zip(&g) {
                    *sv += gv;
                });
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                add_grad!(a, |s: &mut [S]| for (sv, &gv) in s.iter_mut().zip(&g) {
                    *sv += gv;
                });
                add_grad!(b, |s: &mut [S]| for (sv, &gv) in s.iter_mut().zip(&g) {
                    *sv -= gv;
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let bd = inner.nodes[b].data.clone();
                let ad = inner.nodes[a].data.clone();
                add_grad!(a, |s: &mut [S]| for ((sv, &gv), &bv) in
                    s.iter_mut().zip(&g).zip(&bd)
                {
                    *sv += gv * bv;
                });
                add_grad!(b, |s: &mut [S]| for ((sv, &gv), &av) in
                    s.iter_mut().zip(&g).zip(&ad)
                {
                    *sv += gv * av;
                });
            }
            Op::Neg(a) => {
                add_grad!(*a, |s: &mut [S]| for (sv, &gv) in s.iter_mut().zip(&g) {
                    *sv -= gv;
                });
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                add_grad!(*a, |s: &mut [S]| for (sv, &gv) in s.iter_mut().zip(&g) {
                    *sv += gv * f;
                });
            }
            Op::AddRowBroadcast(a, b) => {
                let (a, b) = (*a, *b);
                add_grad!(a, |s: &mut [S]| for (sv, &gv) in s.iter_mut().zip(&g) {
                    *sv += gv;
                });
                add_grad!(b, |s: &mut [S]| {
                    for row in g.chunks(n) {
                        for (sv, &gv) in s.iter_mut().zip(row) {
                            *sv += gv;
                        }
                    }
                });
            }
            Op::MulScalarNode(a, sid) => {
                let (a, sid) = (*a, *sid);
                let sval = inner.nodes[sid].data[0];
                let ad = inner.nodes[a].data.clone();
                add_grad!(a, |s: &mut [S]| for (sv, &gv) in s.iter_mut().zip(&g) {
                    *sv += gv * sval;
                });
                add_grad!(sid, |s: &mut [S]| {
                    let mut acc = S::zero();
                    for (&gv, &av) in g.iter().zip(&ad) {
                        acc += gv * av;
                    }
                    s[0] += acc;
                });
            }
            Op::MulConst(a, c) => {
                let c = c.clone();
                add_grad!(*a, |s: &mut [S]| for ((sv, &gv), &cv) in
                    s.iter_mut().zip(&g).zip(&c)
                {
                    *sv += gv * cv;
                });
            }
            Op::AddConst(a) => {
                add_grad!(*a, |s: &mut [S]| for (sv, &gv) in s.iter_mut().zip(&g) {
                    *sv += gv;
                });
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let k = inner.nodes[a].cols;
                let ad = inner.nodes[a].data.clone();
                let bd = inner.nodes[b].data.clone();
                // y[m,n] = a[m,k]·b[k,n]
                add_grad!(a, |s: &mut [S]| matmul_nt(&g, &bd, s, m, n, k));
                add_grad!(b, |s: &mut [S]| matmul_tn(&ad, &g, s, m, k, n));
            }
            Op::MatmulNT(a, b) => {
                let (a, b) = (*a, *b);
                let k = inner.nodes[a].cols;
                let ad = inner.nodes[a].data.clone();
                let bd = inner.nodes[b].data.clone();
                // y[m,n] = a[m,k]·b[n,k]ᵀ
                add_grad!(a, |s: &mut [S]| matmul_nn(&g, &bd, s, m, n, k));
                add_grad!(b, |s: &mut [S]| matmul_tn(&g, &ad, s, m, n, k));
            }
            Op::RowDot(a, b) => {
                let (a, b) = (*a, *b);
                let w = inner.nodes[a].cols;
                let ad = inner.nodes[a].data.clone();
                let bd = inner.nodes[b].data.clone();
                add_grad!(a, |s: &mut [S]| for i in 0..m {
                    let gi = g[i];
                    for j in 0..w {
                        s[i * w + j] += gi * bd[i * w + j];
                    }
                });
                add_grad!(b, |s: &mut [S]| for i in 0..m {
                    let gi = g[i];
                    for j in 0..w {
                        s[i * w + j] += gi * ad[i * w + j];
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.data.clone();
                add_grad!(*a, |s: &mut [S]| for ((sv, &gv), &yv) in
                    s.iter_mut().zip(&g).zip(&y)
                {
                    *sv += gv * yv;
                });
            }
            Op::Ln(a) => {
                let a = *a;
                let ad = inner.nodes[a].data.clone();
                add_grad!(a, |s: &mut [S]| for ((sv, &gv), &av) in
                    s.iter_mut().zip(&g).zip(&ad)
                {
                    *sv += gv / av;
                });
            }
            Op::Softplus(a) => {
                let a = *a;
                let ad = inner.nodes[a].data.clone();
                add_grad!(a, |s: &mut [S]| for ((sv, &gv), &av) in
                    s.iter_mut().zip(&g).zip(&ad)
                {
                    *sv += gv * sigmoid(av);
                });
            }
            Op::Gelu(a) => {
                let a = *a;
                let ad = inner.nodes[a].data.clone();
                add_grad!(a, |s: &mut [S]| for ((sv, &gv), &av) in
                    s.iter_mut().zip(&g).zip(&ad)
                {
                    *sv += gv * gelu_bwd(av);
                });
            }
            Op::SumAll(a) => {
                let gv = g[0];
                add_grad!(*a, |s: &mut [S]| for sv in s.iter_mut() {
                    *sv += gv;
                });
            }
            Op::MeanAll(a) => {
                let a = *a;
                let len = inner.nodes[a].rows * inner.nodes[a].cols;
                let gv = g[0] * S::of(1.0 / len as f64);
                add_grad!(a, |s: &mut [S]| for sv in s.iter_mut() {
                    *sv += gv;
                });
            }
            Op::LogSumExpRows(a) => {
                let a = *a;
                let w = inner.nodes[a].cols;
                let ad = inner.nodes[a].data.clone();
                let y = node.data.clone();
                add_grad!(a, |s: &mut [S]| for i in 0..m {
                    let gi = g[i];
                    for j in 0..w {
                        s[i * w + j] += gi * (ad[i * w + j] - y[i]).exp();
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.data.clone();
                add_grad!(*a, |s: &mut [S]| for i in 0..m {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let mut dot = S::zero();
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        dot += gv * yv;
                    }
                    for j in 0..n {
                        s[i * n + j] += yrow[j] * (grow[j] - dot);
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let y = node.data.clone();
                add_grad!(*a, |s: &mut [S]| for i in 0..m {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let gsum: S = grow.iter().copied().sum();
                    for j in 0..n {
                        s[i * n + j] += grow[j] - yrow[j].exp() * gsum;
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xd = inner.nodes[x].data.clone();
                let gd = inner.nodes[gain].data.clone();
                let eps = S::of(NORM_EPS);
                let inv_n = S::of(1.0 / n as f64);
                // recompute per-row stats
                let mut xhat = vec![S::zero(); m * n];
                let mut inv_std = vec![S::zero(); m];
                for i in 0..m {
                    let row = &xd[i * n..(i + 1) * n];
                    let mean = row.iter().copied().sum::<S>() * inv_n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
                    inv_std[i] = S::one() / (var + eps).sqrt();
                    for j in 0..n {
                        xhat[i * n + j] = (row[j] - mean) * inv_std[i];
                    }
                }
                add_grad!(gain, |s: &mut [S]| for i in 0..m {
                    for j in 0..n {
                        s[j] += g[i * n + j] * xhat[i * n + j];
                    }
                });
                add_grad!(bias, |s: &mut [S]| for i in 0..m {
                    for j in 0..n {
                        s[j] += g[i * n + j];
                    }
                });
                add_grad!(x, |s: &mut [S]| for i in 0..m {
                    let mut mean_d = S::zero();
                    let mut mean_dx = S::zero();
                    for j in 0..n {
                        let d = g[i * n + j] * gd[j];
                        mean_d += d;
                        mean_dx += d * xhat[i * n + j];
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    for j in 0..n {
                        let d = g[i * n + j] * gd[j];
                        s[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
                    }
                });
            }
            Op::RmsNorm { x, gain } => {
                let (x, gain) = (*x, *gain);
                let xd = inner.nodes[x].data.clone();
                let gd = inner.nodes[gain].data.clone();
                let eps = S::of(NORM_EPS);
                let inv_n = S::of(1.0 / n as f64);
                let mut inv_rms = vec![S::zero(); m];
                for i in 0..m {
                    let row = &xd[i * n..(i + 1) * n];
                    let ms = row.iter().map(|&v| v * v).sum::<S>() * inv_n;
                    inv_rms[i] = S::one() / (ms + eps).sqrt();
                }
                add_grad!(gain, |s: &mut [S]| for i in 0..m {
                    for j in 0..n {
                        s[j] += g[i * n + j] * xd[i * n + j] * inv_rms[i];
                    }
                });
                add_grad!(x, |s: &mut [S]| for i in 0..m {
                    let mut dot = S::zero();
                    for j in 0..n {
                        dot += g[i * n + j] * gd[j] * xd[i * n + j];
                    }
                    let r3 = inv_rms[i] * inv_rms[i] * inv_rms[i];
                    for j in 0..n {
                        let d = g[i * n + j] * gd[j];
                        s[i * n + j] += d * inv_rms[i] - xd[i * n + j] * dot * inv_n * r3;
                    }
                });
            }
            Op::GatherRows { x, indices } => {
                let indices = indices.clone();
                add_grad!(*x, |s: &mut [S]| for (t, &i) in indices.iter().enumerate() {
                    for j in 0..n {
                        s[i * n + j] += g[t * n + j];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let widths: Vec<usize> = parts.iter().map(|&p| inner.nodes[p].cols).collect();
                let mut off = 0usize;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let off_here = off;
                    add_grad!(p, |s: &mut [S]| for i in 0..m {
                        for j in 0..w {
                            s[i * w + j] += g[i * n + off_here + j];
                        }
                    });
                    off += w;
                }
            }
            Op::L2NormRows { x, norms } => {
                let norms = norms.clone();
                let y = node.data.clone();
                add_grad!(*x, |s: &mut [S]| for i in 0..m {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let mut dot = S::zero();
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        dot += gv * yv;
                    }
                    for j in 0..n {
                        s[i * n + j] += (grow[j] - yrow[j] * dot) / norms[i];
                    }
                });
            }
            Op::Dropout(a, mask) => {
                let mask = Rc::clone(mask);
                add_grad!(*a, |s: &mut [S]| for ((sv, &gv), &mv) in
                    s.iter_mut().zip(&g).zip(mask.iter())
                {
                    *sv += gv * mv;
                });
            }
            Op::Reshape(a) => {
                add_grad!(*a, |s: &mut [S]| for (sv, &gv) in s.iter_mut().zip(&g) {
                    *sv += gv;
                });
            }
            Op::TakeDiag(a) => {
                let a = *a;
                let w = inner.nodes[a].cols;
                add_grad!(a, |s: &mut [S]| for i in 0..m {
                    s[i * w + i] += g[i];
                });
            }
            Op::CausalAttention { q, k, v, batch, len, heads, probs, drop_mask } => {
                let (q, k, v) = (*q, *k, *v);
                let (batch, len, heads) = (*batch, *len, *heads);
                let d = inner.nodes[q].cols;
                let dh = d / heads;
                let scale = S::of(1.0 / (dh as f64).sqrt());
                let qd = inner.nodes[q].data.clone();
                let kd = inner.nodes[k].data.clone();
                let vd = inner.nodes[v].data.clone();
                let probs = probs.clone();
                let drop_mask = drop_mask.clone();

                let mut dq = vec![S::zero(); qd.len()];
                let mut dk = vec![S::zero(); kd.len()];
                let mut dv = vec![S::zero(); vd.len()];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * len * len;
                        for i in 0..len {
                            let grow = &g[(b * len + i) * d + h * dh..(b * len + i) * d + (h + 1) * dh];
                            // dP (post-mask) and dV
                            let mut dp = vec![S::zero(); i + 1];
                            for j in 0..=i {
                                let mut p_eff = probs[pbase + i * len + j];
                                let mask_w = drop_mask
                                    .as_ref()
                                    .map(|mk| mk[pbase + i * len + j])
                                    .unwrap_or_else(S::one);
                                p_eff = p_eff * mask_w;
                                let vrow =
                                    &vd[(b * len + j) * d + h * dh..(b * len + j) * d + (h + 1) * dh];
                                let mut acc = S::zero();
                                for (&gv, &vv) in grow.iter().zip(vrow) {
                                    acc += gv * vv;
                                }
                                dp[j] = acc * mask_w;
                                if p_eff != S::zero() {
                                    let dvrow = &mut dv[(b * len + j) * d + h * dh
                                        ..(b * len + j) * d + (h + 1) * dh];
                                    for (dvv, &gv) in dvrow.iter_mut().zip(grow) {
                                        *dvv += p_eff * gv;
                                    }
                                }
                            }
                            // softmax backward on the causal row
                            let mut dot = S::zero();
                            for j in 0..=i {
                                dot += dp[j] * probs[pbase + i * len + j];
                            }
                            for j in 0..=i {
                                let ds = probs[pbase + i * len + j] * (dp[j] - dot) * scale;
                                if ds == S::zero() {
                                    continue;
                                }
                                let krow =
                                    &kd[(b * len + j) * d + h * dh..(b * len + j) * d + (h + 1) * dh];
                                let qrow =
                                    &qd[(b * len + i) * d + h * dh..(b * len + i) * d + (h + 1) * dh];
                                let dqrow = &mut dq
                                    [(b * len + i) * d + h * dh..(b * len + i) * d + (h + 1) * dh];
                                for (dqv, &kv) in dqrow.iter_mut().zip(krow) {
                                    *dqv += ds * kv;
                                }
                                let dkrow = &mut dk
                                    [(b * len + j) * d + h * dh..(b * len + j) * d + (h + 1) * dh];
                                for (dkv, &qv) in dkrow.iter_mut().zip(qrow) {
                                    *dkv += ds * qv;
                                }
                            }
                        }
                    }
                }
                add_grad!(q, |s: &mut [S]| for (sv, &gv) in s.iter_mut().zip(&dq) {
                    *sv += gv;
                });
                add_grad!(k, |s: &mut [S]| for (sv, &gv) in s.iter_mut().zip(&dk) {
                    *sv += gv;
                });
                add_grad!(v, |s: &mut [S]| for (sv, &gv) in s.iter_mut().zip(&dv) {
                    *sv += gv;
                });
            }
        }
        grads[id] = Some(g);
    }

    inner.last_grads = Some(grads);
    Ok(out)
}
