//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] is built per forward pass. Model parameters are bound as
//! leaves (binding the same parameter twice returns the same node, so
//! shared weights accumulate gradients correctly), intermediate nodes
//! record a backward rule, and [`Graph::backward`] runs one reverse sweep
//! over the tape. All tensors here are 2-D: scalars are `[1,1]`, row
//! vectors `[1,n]`.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Forward mode: training (with a seeded RNG for dropout masks) or eval.
/// Eval forwards are deterministic and bit-reproducible.
pub enum Mode<'r> {
    Eval,
    Train { rng: &'r RefCell<ChaCha8Rng> },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

// Backward rule: (parent values, own value, own grad) -> per-parent grads.
type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    bound: HashMap<String, NodeId>,
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    inner: RefCell<Inner>,
    flops: Cell<u64>,
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Element operations performed so far (used for work-scaling checks).
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    fn push(&self, value: Tensor, parents: Vec<NodeId>, backward: Option<BackwardFn>) -> NodeId {
        self.flops.set(self.flops.get() + value.len() as u64);
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            parents,
            backward,
        });
        NodeId(inner.nodes.len() - 1)
    }

    fn add_flops(&self, n: u64) {
        self.flops.set(self.flops.get() + n);
    }

    /// A constant leaf; receives no gradient.
    pub fn leaf(&self, value: Tensor) -> NodeId {
        self.push(value, vec![], None)
    }

    /// Bind a parameter as a leaf. Binding the same name again returns the
    /// existing node so gradients from every use site accumulate into it.
    pub fn bind(&self, params: &ParameterSet, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.inner.borrow().bound.get(name) {
            return Ok(id);
        }
        let value = params.get(name)?.value().clone();
        let id = self.push(value, vec![], None);
        self.inner.borrow_mut().bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        self.inner.borrow().nodes[id.0].value.clone()
    }

    pub fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.inner.borrow().nodes[id.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.inner.borrow().nodes[id.0].value.scalar_value()
    }

    fn with2<R>(&self, a: NodeId, b: NodeId, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.nodes[a.0].value, &inner.nodes[b.0].value)
    }

    fn with1<R>(&self, a: NodeId, f: impl FnOnce(&Tensor) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.nodes[a.0].value)
    }

    // ---- elementwise ----

    pub fn add(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.with2(a, b, |x, y| x.zip_map(y, |p, q| p + q));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|_, _, g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.with2(a, b, |x, y| x.zip_map(y, |p, q| p - q));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|_, _, g| vec![g.clone(), g.map(|x| -x)])),
        )
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.with2(a, b, |x, y| x.zip_map(y, |p, q| p * q));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|p, _, g| {
                vec![g.zip_map(p[1], |x, y| x * y), g.zip_map(p[0], |x, y| x * y)]
            })),
        )
    }

    pub fn scale(&self, a: NodeId, c: f64) -> NodeId {
        let v = self.with1(a, |x| x.map(|p| p * c));
        self.push(
            v,
            vec![a],
            Some(Box::new(move |_, _, g| vec![g.map(|x| x * c)])),
        )
    }

    /// Elementwise multiply by a constant tensor (dropout masks).
    pub fn mul_const(&self, a: NodeId, c: Tensor) -> NodeId {
        let v = self.with1(a, |x| x.zip_map(&c, |p, q| p * q));
        self.push(
            v,
            vec![a],
            Some(Box::new(move |_, _, g| vec![g.zip_map(&c, |x, y| x * y)])),
        )
    }

    pub fn relu(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| x.map(|p| p.max(0.0)));
        self.push(
            v,
            vec![a],
            Some(Box::new(|p, _, g| {
                vec![g.zip_map(p[0], |gi, xi| if xi > 0.0 { gi } else { 0.0 })]
            })),
        )
    }

    pub fn tanh(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| x.map(f64::tanh));
        self.push(
            v,
            vec![a],
            Some(Box::new(|_, y, g| {
                vec![g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))]
            })),
        )
    }

    pub fn exp(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| x.map(f64::exp));
        debug_assert!(v.all_finite(), "exp overflow");
        self.push(
            v,
            vec![a],
            Some(Box::new(|_, y, g| vec![g.zip_map(y, |gi, yi| gi * yi)])),
        )
    }

    // ---- broadcast helpers ----

    /// `x[n,d] + b[1,d]` (bias row broadcast over rows).
    pub fn add_row(&self, x: NodeId, b: NodeId) -> NodeId {
        let v = self.with2(x, b, |x, b| {
            debug_assert_eq!(x.cols(), b.cols());
            let mut out = x.clone();
            let d = x.cols();
            for r in 0..x.rows() {
                for c in 0..d {
                    let nv = out.at(r, c) + b.at(0, c);
                    out.set(r, c, nv);
                }
            }
            out
        });
        self.push(
            v,
            vec![x, b],
            Some(Box::new(|p, _, g| {
                let d = g.cols();
                let mut db = Tensor::zeros(&[1, d]);
                for r in 0..g.rows() {
                    for c in 0..d {
                        let nv = db.at(0, c) + g.at(r, c);
                        db.set(0, c, nv);
                    }
                }
                let _ = p;
                vec![g.clone(), db]
            })),
        )
    }

    /// `x[n,d] * a[n,1]` (per-row scalar broadcast over columns).
    pub fn mul_col(&self, x: NodeId, a: NodeId) -> NodeId {
        let v = self.with2(x, a, |x, a| {
            debug_assert_eq!(a.cols(), 1);
            debug_assert_eq!(x.rows(), a.rows());
            let mut out = x.clone();
            for r in 0..x.rows() {
                let s = a.at(r, 0);
                for c in 0..x.cols() {
                    let nv = out.at(r, c) * s;
                    out.set(r, c, nv);
                }
            }
            out
        });
        self.push(
            v,
            vec![x, a],
            Some(Box::new(|p, _, g| {
                let (x, a) = (p[0], p[1]);
                let mut dx = g.clone();
                let mut da = Tensor::zeros(&[g.rows(), 1]);
                for r in 0..g.rows() {
                    let s = a.at(r, 0);
                    let mut acc = 0.0;
                    for c in 0..g.cols() {
                        acc += g.at(r, c) * x.at(r, c);
                        let nv = dx.at(r, c) * s;
                        dx.set(r, c, nv);
                    }
                    da.set(r, 0, acc);
                }
                vec![dx, da]
            })),
        )
    }

    /// `x[n,d] / a[n,1]` (per-row scalar division).
    pub fn div_col(&self, x: NodeId, a: NodeId) -> NodeId {
        let v = self.with2(x, a, |x, a| {
            debug_assert_eq!(a.cols(), 1);
            let mut out = x.clone();
            for r in 0..x.rows() {
                let s = a.at(r, 0);
                for c in 0..x.cols() {
                    let nv = out.at(r, c) / s;
                    out.set(r, c, nv);
                }
            }
            out
        });
        debug_assert!(v.all_finite(), "div_col produced non-finite values");
        self.push(
            v,
            vec![x, a],
            Some(Box::new(|p, y, g| {
                let a = p[1];
                let mut dx = g.clone();
                let mut da = Tensor::zeros(&[g.rows(), 1]);
                for r in 0..g.rows() {
                    let s = a.at(r, 0);
                    let mut acc = 0.0;
                    for c in 0..g.cols() {
                        acc += g.at(r, c) * y.at(r, c);
                        let nv = dx.at(r, c) / s;
                        dx.set(r, c, nv);
                    }
                    da.set(r, 0, -acc / s);
                }
                vec![dx, da]
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.with2(a, b, |x, y| x.matmul(y));
        self.add_flops((v.rows() * v.cols()) as u64 * self.shape_of(a)[1] as u64);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|p, _, g| {
                vec![g.matmul_nt(p[1]), p[0].matmul_tn(g)]
            })),
        )
    }

    /// `a[n,k] · b[m,k]ᵀ -> [n,m]`.
    pub fn matmul_nt(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.with2(a, b, |x, y| x.matmul_nt(y));
        self.add_flops((v.rows() * v.cols()) as u64 * self.shape_of(a)[1] as u64);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|p, _, g| vec![g.matmul(p[1]), g.matmul_tn(p[0])])),
        )
    }

    // ---- structure ----

    /// Select rows by index (duplicates allowed). Backward scatter-adds.
    pub fn gather_rows(&self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let v = self.with1(x, |x| {
            let d = x.cols();
            let mut out = Tensor::zeros(&[idx.len(), d]);
            for (r, &src) in idx.iter().enumerate() {
                debug_assert!(src < x.rows(), "gather index {} out of {} rows", src, x.rows());
                let row = x.row_slice(src).to_vec();
                for c in 0..d {
                    out.set(r, c, row[c]);
                }
            }
            out
        });
        let rows = self.shape_of(x)[0];
        self.push(
            v,
            vec![x],
            Some(Box::new(move |p, _, g| {
                let d = p[0].cols();
                let mut dx = Tensor::zeros(&[rows, d]);
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..d {
                        let nv = dx.at(src, c) + g.at(r, c);
                        dx.set(src, c, nv);
                    }
                }
                vec![dx]
            })),
        )
    }

    pub fn concat_rows(&self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let inner = self.inner.borrow();
        let d = inner.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut blocks = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &inner.nodes[p.0].value;
            debug_assert_eq!(t.cols(), d);
            blocks.push(t.rows());
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        drop(inner);
        let v = Tensor::new(vec![rows, d], data).expect("concat_rows shape");
        self.push(
            v,
            parts.to_vec(),
            Some(Box::new(move |_, _, g| {
                let d = g.cols();
                let mut out = Vec::with_capacity(blocks.len());
                let mut at = 0;
                for &b in &blocks {
                    let mut t = Tensor::zeros(&[b, d]);
                    t.data_mut()
                        .copy_from_slice(&g.data()[at * d..(at + b) * d]);
                    out.push(t);
                    at += b;
                }
                out
            })),
        )
    }

    pub fn concat_cols(&self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let inner = self.inner.borrow();
        let n = inner.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| inner.nodes[p.0].value.cols())
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[n, total]);
        let mut at = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = &inner.nodes[p.0].value;
            debug_assert_eq!(t.rows(), n);
            for r in 0..n {
                for c in 0..w {
                    out.set(r, at + c, t.at(r, c));
                }
            }
            at += w;
        }
        drop(inner);
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |_, _, g| {
                let n = g.rows();
                let mut out = Vec::with_capacity(widths.len());
                let mut at = 0;
                for &w in &widths {
                    let mut t = Tensor::zeros(&[n, w]);
                    for r in 0..n {
                        for c in 0..w {
                            t.set(r, c, g.at(r, at + c));
                        }
                    }
                    out.push(t);
                    at += w;
                }
                out
            })),
        )
    }

    /// Columns `range` of `x`.
    pub fn slice_cols(&self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.with1(x, |x| {
            let mut out = Tensor::zeros(&[x.rows(), end - start]);
            for r in 0..x.rows() {
                for c in start..end {
                    out.set(r, c - start, x.at(r, c));
                }
            }
            out
        });
        let full = self.shape_of(x)[1];
        self.push(
            v,
            vec![x],
            Some(Box::new(move |_, _, g| {
                let mut dx = Tensor::zeros(&[g.rows(), full]);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        dx.set(r, start + c, g.at(r, c));
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Inclusive prefix-sum table: out has n+1 rows, `out[k] = Σ_{i<k} x[i]`.
    /// Row 0 is zero. Together with row gathers this gives constant-time
    /// range sums over rows.
    pub fn prefix_sums(&self, x: NodeId) -> NodeId {
        let v = self.with1(x, |x| {
            let (n, d) = (x.rows(), x.cols());
            let mut out = Tensor::zeros(&[n + 1, d]);
            for r in 0..n {
                for c in 0..d {
                    let nv = out.at(r, c) + x.at(r, c);
                    out.set(r + 1, c, nv);
                }
            }
            out
        });
        self.push(
            v,
            vec![x],
            Some(Box::new(|p, _, g| {
                let (n, d) = (p[0].rows(), p[0].cols());
                let mut dx = Tensor::zeros(&[n, d]);
                let mut acc = vec![0.0; d];
                for r in (0..n).rev() {
                    for c in 0..d {
                        acc[c] += g.at(r + 1, c);
                        dx.set(r, c, acc[c]);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Column-wise sum over rows: `[n,d] -> [1,d]`.
    pub fn sum_rows(&self, x: NodeId) -> NodeId {
        let v = self.with1(x, |x| {
            let d = x.cols();
            let mut out = Tensor::zeros(&[1, d]);
            for r in 0..x.rows() {
                for c in 0..d {
                    let nv = out.at(0, c) + x.at(r, c);
                    out.set(0, c, nv);
                }
            }
            out
        });
        let rows = self.shape_of(x)[0];
        self.push(
            v,
            vec![x],
            Some(Box::new(move |_, _, g| {
                let d = g.cols();
                let mut dx = Tensor::zeros(&[rows, d]);
                for r in 0..rows {
                    for c in 0..d {
                        dx.set(r, c, g.at(0, c));
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Sum of all entries: `[n,d] -> [1,1]`.
    pub fn sum_all(&self, x: NodeId) -> NodeId {
        let v = self.with1(x, |x| Tensor::scalar(x.data().iter().sum()));
        let shape = self.shape_of(x);
        self.push(
            v,
            vec![x],
            Some(Box::new(move |_, _, g| {
                vec![Tensor::full(&shape, g.scalar_value())]
            })),
        )
    }

    // ---- nonlinear blocks ----

    /// Row-wise softmax restricted to positions where `mask` is nonzero.
    /// Masked positions get exactly zero probability; each row must have at
    /// least one valid position.
    pub fn masked_softmax_rows(&self, x: NodeId, mask: Tensor) -> NodeId {
        let v = self.with1(x, |x| {
            debug_assert_eq!(x.shape(), mask.shape());
            let (n, d) = (x.rows(), x.cols());
            let mut out = Tensor::zeros(&[n, d]);
            for r in 0..n {
                let mut m = f64::NEG_INFINITY;
                for c in 0..d {
                    if mask.at(r, c) != 0.0 {
                        m = m.max(x.at(r, c));
                    }
                }
                assert!(
                    m.is_finite(),
                    "softmax row {} has no valid positions",
                    r
                );
                let mut z = 0.0;
                for c in 0..d {
                    if mask.at(r, c) != 0.0 {
                        let e = (x.at(r, c) - m).exp();
                        out.set(r, c, e);
                        z += e;
                    }
                }
                for c in 0..d {
                    let nv = out.at(r, c) / z;
                    out.set(r, c, nv);
                }
            }
            out
        });
        self.push(
            v,
            vec![x],
            Some(Box::new(|_, y, g| {
                let (n, d) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(&[n, d]);
                for r in 0..n {
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += g.at(r, c) * y.at(r, c);
                    }
                    for c in 0..d {
                        dx.set(r, c, y.at(r, c) * (g.at(r, c) - dot));
                    }
                }
                vec![dx]
            })),
        )
    }

    pub fn softmax_rows(&self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x);
        self.masked_softmax_rows(x, Tensor::full(&shape, 1.0))
    }

    /// Layer normalization over the last dimension with learned gain/bias rows.
    pub fn layer_norm(&self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let v = {
            let inner = self.inner.borrow();
            let x = &inner.nodes[x.0].value;
            let gain = &inner.nodes[gain.0].value;
            let bias = &inner.nodes[bias.0].value;
            let (n, d) = (x.rows(), x.cols());
            let mut out = Tensor::zeros(&[n, d]);
            for r in 0..n {
                let row = x.row_slice(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for c in 0..d {
                    out.set(r, c, (row[c] - mean) * inv * gain.at(0, c) + bias.at(0, c));
                }
            }
            out
        };
        self.push(
            v,
            vec![x, gain, bias],
            Some(Box::new(move |p, _, g| {
                let x = p[0];
                let gain = p[1];
                let (n, d) = (x.rows(), x.cols());
                let df = d as f64;
                let mut dx = Tensor::zeros(&[n, d]);
                let mut dgain = Tensor::zeros(&[1, d]);
                let mut dbias = Tensor::zeros(&[1, d]);
                for r in 0..n {
                    let row = x.row_slice(r);
                    let mean = row.iter().sum::<f64>() / df;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gy: Vec<f64> = (0..d).map(|c| g.at(r, c) * gain.at(0, c)).collect();
                    let mean_gy = gy.iter().sum::<f64>() / df;
                    let mean_gy_xhat =
                        gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / df;
                    for c in 0..d {
                        dx.set(r, c, (gy[c] - mean_gy - xhat[c] * mean_gy_xhat) * inv);
                        let ng = dgain.at(0, c) + g.at(r, c) * xhat[c];
                        dgain.set(0, c, ng);
                        let nb = dbias.at(0, c) + g.at(r, c);
                        dbias.set(0, c, nb);
                    }
                }
                vec![dx, dgain, dbias]
            })),
        )
    }

    /// Per-row softmax cross entropy against integer targets: `[n,k] -> [n,1]`.
    /// The gradient w.r.t. each logit row is `softmax(row) − one_hot(target)`.
    pub fn cross_entropy_rows(&self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let (n, k) = {
            let s = self.shape_of(logits);
            (s[0], s[1])
        };
        if targets.len() != n {
            return Err(NnError::Input(format!(
                "{} targets for {} logit rows",
                targets.len(),
                n
            )));
        }
        for (r, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(NnError::Input(format!(
                    "target index {} out of range {} at row {}",
                    t, k, r
                )));
            }
        }
        let v = self.with1(logits, |x| {
            let mut out = Tensor::zeros(&[n, 1]);
            for r in 0..n {
                let row = x.row_slice(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                out.set(r, 0, lse - row[targets[r]]);
            }
            out
        });
        Ok(self.push(
            v,
            vec![logits],
            Some(Box::new(move |p, _, g| {
                let x = p[0];
                let (n, k) = (x.rows(), x.cols());
                let mut dx = Tensor::zeros(&[n, k]);
                for r in 0..n {
                    let row = x.row_slice(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    let gr = g.at(r, 0);
                    for c in 0..k {
                        let p = (row[c] - m).exp() / z;
                        let one = if c == targets[r] { 1.0 } else { 0.0 };
                        dx.set(r, c, gr * (p - one));
                    }
                }
                vec![dx]
            })),
        ))
    }

    /// Inverted-dropout in train mode, identity in eval mode.
    pub fn dropout(&self, x: NodeId, rate: f64, mode: &Mode) -> NodeId {
        debug_assert!((0.0..1.0).contains(&rate));
        match mode {
            Mode::Eval => x,
            Mode::Train { rng } => {
                if rate == 0.0 {
                    return x;
                }
                let shape = self.shape_of(x);
                let keep = 1.0 - rate;
                let mut mask = Tensor::zeros(&shape);
                {
                    let mut rng = rng.borrow_mut();
                    for v in mask.data_mut() {
                        *v = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
                    }
                }
                self.mul_const(x, mask)
            }
        }
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss node. Node ids are created in
    /// topological order, so one reverse pass suffices.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let inner = self.inner.borrow();
        let node_count = inner.nodes.len();
        if !inner.nodes[loss.0].value.is_scalar() {
            return Err(NnError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                inner.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; node_count];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            if let Some(back) = &node.backward {
                let parent_values: Vec<&Tensor> =
                    node.parents.iter().map(|p| &inner.nodes[p.0].value).collect();
                let parent_grads = back(&parent_values, &node.value, &grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_scaled(&pg, 1.0),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    /// Accumulate the gradients of every bound parameter into `params`.
    pub fn apply_grads(&self, grads: &Gradients, params: &mut ParameterSet) -> Result<()> {
        let bound: Vec<(String, NodeId)> = {
            let inner = self.inner.borrow();
            let mut b: Vec<_> = inner.bound.iter().map(|(k, v)| (k.clone(), *v)).collect();
            b.sort_by(|a, b| a.0.cmp(&b.0));
            b
        };
        for (name, id) in bound {
            if let Some(g) = grads.of(id) {
                params.accumulate_grad(&name, g)?;
            }
        }
        Ok(())
    }

    /// `backward` + `apply_grads` in one call; returns the loss value.
    pub fn backward_into(&self, loss: NodeId, params: &mut ParameterSet) -> Result<f64> {
        let grads = self.backward(loss)?;
        self.apply_grads(&grads, params)?;
        Ok(self.scalar_value(loss))
    }
}
