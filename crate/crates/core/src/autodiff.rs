//! Minimal reverse-mode tape over dense vectors.
//!
//! The model is small enough (vectors of dimension `d`, parameter matrices up
//! to `d x 4d`, per-batch tapes of a few tens of thousands of nodes) that a
//! plain eager tape beats pulling in a tensor framework: every summation has
//! a fixed order, the same code instantiates at `f32` for training and `f64`
//! for finite-difference verification, and parameter matrices are read from
//! the [`ParameterStore`] in place instead of being copied onto the tape.
//!
//! Conventions: a "vector" node holds `len` components; a scalar is a
//! length-1 node. Matrix-valued operands are always parameters, referenced
//! by [`ParamId`].

// The forward/backward kernels co-index several arrays per loop; explicit
// indices keep them symmetric with the math.
#![allow(clippy::needless_range_loop)]

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::params::{softmax_in_place, ParamId, ParameterStore};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Const,
    ParamRow { p: ParamId, row: usize },
    ParamVec { p: ParamId },
    MatVec { w: ParamId, x: Var },
    MatTVec { w: ParamId, x: Var },
    Add(Var, Var),
    AddParam { x: Var, b: ParamId },
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { x: Var, c: F },
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Dot(Var, Var),
    Stack(Vec<Var>),
    Softmax(Var),
    WeightedSum { weights: Var, vecs: Vec<Var> },
    MeanVecs(Vec<Var>),
    MeanAll(Var),
    AddIndexed { base: Var, extra: Var, map: Vec<usize> },
    NllFromLogits { logits: Var, target: usize },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::ParamRow { .. } => "param_row",
            Op::ParamVec { .. } => "param_vec",
            Op::MatVec { .. } => "matvec",
            Op::MatTVec { .. } => "matvec_t",
            Op::Add(..) => "add",
            Op::AddParam { .. } => "add_param",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::OneMinus(..) => "one_minus",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Concat(..) => "concat",
            Op::Dot(..) => "dot",
            Op::Stack(..) => "stack",
            Op::Softmax(..) => "softmax",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::MeanVecs(..) => "mean_vecs",
            Op::MeanAll(..) => "mean_all",
            Op::AddIndexed { .. } => "add_indexed",
            Op::NllFromLogits { .. } => "nll_from_logits",
        }
    }
}

struct Node<F> {
    data: Vec<F>,
    op: Op<F>,
}

/// Eager forward tape; `backward` replays it in reverse and accumulates
/// parameter gradients straight into the store's gradient buffers.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn scalar(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, data: Vec<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { data, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, data: Vec<F>) -> Var {
        self.push(data, Op::Const)
    }

    pub fn zeros(&mut self, len: usize) -> Var {
        self.push(vec![F::zero(); len], Op::Const)
    }

    /// Row of a matrix parameter (embedding lookup).
    pub fn param_row(&mut self, store: &ParameterStore<F>, p: ParamId, row: usize) -> Var {
        let data = store.row(p, row).to_vec();
        self.push(data, Op::ParamRow { p, row })
    }

    /// A whole vector parameter.
    pub fn param_vec(&mut self, store: &ParameterStore<F>, p: ParamId) -> Var {
        let data = store.data(p).to_vec();
        self.push(data, Op::ParamVec { p })
    }

    /// y = W x
    pub fn matvec(&mut self, store: &ParameterStore<F>, w: ParamId, x: Var) -> Var {
        let (rows, cols) = store.shape(w);
        let xv = &self.nodes[x.0].data;
        debug_assert_eq!(cols, xv.len());
        let wd = store.data(w);
        let mut y = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = F::zero();
            let base = r * cols;
            for c in 0..cols {
                acc = acc + wd[base + c] * xv[c];
            }
            y.push(acc);
        }
        self.push(y, Op::MatVec { w, x })
    }

    /// y = W^T x
    pub fn matvec_t(&mut self, store: &ParameterStore<F>, w: ParamId, x: Var) -> Var {
        let (rows, cols) = store.shape(w);
        let xv = &self.nodes[x.0].data;
        debug_assert_eq!(rows, xv.len());
        let wd = store.data(w);
        let mut y = vec![F::zero(); cols];
        for r in 0..rows {
            let base = r * cols;
            let xr = xv[r];
            for c in 0..cols {
                y[c] = y[c] + wd[base + c] * xr;
            }
        }
        self.push(y, Op::MatTVec { w, x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        debug_assert_eq!(av.len(), bv.len());
        let y = av.iter().zip(bv).map(|(&x, &z)| x + z).collect();
        self.push(y, Op::Add(a, b))
    }

    pub fn add_param(&mut self, store: &ParameterStore<F>, x: Var, b: ParamId) -> Var {
        let xv = &self.nodes[x.0].data;
        let bd = store.data(b);
        debug_assert_eq!(xv.len(), bd.len());
        let y = xv.iter().zip(bd).map(|(&x, &z)| x + z).collect();
        self.push(y, Op::AddParam { x, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        debug_assert_eq!(av.len(), bv.len());
        let y = av.iter().zip(bv).map(|(&x, &z)| x - z).collect();
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        debug_assert_eq!(av.len(), bv.len());
        let y = av.iter().zip(bv).map(|(&x, &z)| x * z).collect();
        self.push(y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let y = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        self.push(y, Op::Scale { x, c })
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].data.iter().map(|&v| F::one() - v).collect();
        self.push(y, Op::OneMinus(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        self.push(y, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = F::one();
        let y = self.nodes[x.0].data.iter().map(|&v| one / (one + (-v).exp())).collect();
        self.push(y, Op::Sigmoid(x))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut y = Vec::new();
        for &p in parts {
            y.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push(y, Op::Concat(parts.to_vec()))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        debug_assert_eq!(av.len(), bv.len());
        let mut acc = F::zero();
        for i in 0..av.len() {
            acc = acc + av[i] * bv[i];
        }
        self.push(vec![acc], Op::Dot(a, b))
    }

    /// Pack scalars into one vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Var {
        let y = scalars.iter().map(|&s| self.scalar(s)).collect();
        self.push(y, Op::Stack(scalars.to_vec()))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut y = self.nodes[x.0].data.clone();
        softmax_in_place(&mut y);
        self.push(y, Op::Softmax(x))
    }

    /// `y = sum_k weights[k] * vecs[k]`
    pub fn weighted_sum(&mut self, weights: Var, vecs: &[Var]) -> Var {
        let wv = self.nodes[weights.0].data.clone();
        debug_assert_eq!(wv.len(), vecs.len());
        debug_assert!(!vecs.is_empty());
        let len = self.nodes[vecs[0].0].data.len();
        let mut y = vec![F::zero(); len];
        for (k, &v) in vecs.iter().enumerate() {
            let vd = &self.nodes[v.0].data;
            for i in 0..len {
                y[i] = y[i] + wv[k] * vd[i];
            }
        }
        self.push(y, Op::WeightedSum { weights, vecs: vecs.to_vec() })
    }

    pub fn mean_vecs(&mut self, vecs: &[Var]) -> Var {
        debug_assert!(!vecs.is_empty());
        let len = self.nodes[vecs[0].0].data.len();
        let mut y = vec![F::zero(); len];
        for &v in vecs {
            let vd = &self.nodes[v.0].data;
            for i in 0..len {
                y[i] = y[i] + vd[i];
            }
        }
        let inv = F::one() / F::from(vecs.len()).unwrap();
        for v in &mut y {
            *v = *v * inv;
        }
        self.push(y, Op::MeanVecs(vecs.to_vec()))
    }

    /// Mean of the components of one vector, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].data;
        let mut acc = F::zero();
        for &v in xv {
            acc = acc + v;
        }
        let y = acc / F::from(xv.len()).unwrap();
        self.push(vec![y], Op::MeanAll(x))
    }

    /// `y_i = base_i + extra[map[i]]` — used to add a per-level score onto
    /// per-item scores.
    pub fn add_indexed(&mut self, base: Var, extra: Var, map: &[usize]) -> Var {
        let bv = &self.nodes[base.0].data;
        let ev = &self.nodes[extra.0].data;
        debug_assert_eq!(bv.len(), map.len());
        let y = bv.iter().zip(map).map(|(&b, &m)| b + ev[m]).collect();
        self.push(y, Op::AddIndexed { base, extra, map: map.to_vec() })
    }

    /// Cross-entropy against a one-hot target, fused with the softmax:
    /// `loss = logsumexp(logits) - logits[target]`.
    pub fn nll_from_logits(&mut self, logits: Var, target: usize) -> Var {
        let xv = &self.nodes[logits.0].data;
        debug_assert!(target < xv.len());
        let mut max = xv[0];
        for &x in xv.iter() {
            if x > max {
                max = x;
            }
        }
        let mut sum = F::zero();
        for &x in xv.iter() {
            sum = sum + (x - max).exp();
        }
        let loss = max + sum.ln() - xv[target];
        self.push(vec![loss], Op::NllFromLogits { logits, target })
    }

    /// First node holding a non-finite value, if any, with its op name.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.data.iter().any(|v| !v.is_finite()) {
                return Some((i, n.op.name()));
            }
        }
        None
    }

    /// Reverse sweep from `root` (a scalar), accumulating parameter
    /// gradients into `store`.
    pub fn backward(&self, root: Var, store: &mut ParameterStore<F>) {
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![F::one(); self.nodes[root.0].data.len()]);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::ParamRow { p, row } => {
                    let cols = store.shape(*p).1;
                    let gp = store.grad_mut(*p);
                    let base = row * cols;
                    for c in 0..cols {
                        gp[base + c] = gp[base + c] + g[c];
                    }
                }
                Op::ParamVec { p } => {
                    let gp = store.grad_mut(*p);
                    for c in 0..gp.len() {
                        gp[c] = gp[c] + g[c];
                    }
                }
                Op::MatVec { w, x } => {
                    let (rows, cols) = store.shape(*w);
                    let xv = &self.nodes[x.0].data;
                    // dW += g ⊗ x
                    {
                        let gw = store.grad_mut(*w);
                        for r in 0..rows {
                            let base = r * cols;
                            let gr = g[r];
                            for c in 0..cols {
                                gw[base + c] = gw[base + c] + gr * xv[c];
                            }
                        }
                    }
                    // dx += W^T g
                    let wd = store.data(*w);
                    let gx = grads[x.0].get_or_insert_with(|| vec![F::zero(); cols]);
                    for r in 0..rows {
                        let base = r * cols;
                        let gr = g[r];
                        for c in 0..cols {
                            gx[c] = gx[c] + wd[base + c] * gr;
                        }
                    }
                }
                Op::MatTVec { w, x } => {
                    let (rows, cols) = store.shape(*w);
                    let xv = &self.nodes[x.0].data;
                    // dW += x ⊗ g
                    {
                        let gw = store.grad_mut(*w);
                        for r in 0..rows {
                            let base = r * cols;
                            let xr = xv[r];
                            for c in 0..cols {
                                gw[base + c] = gw[base + c] + xr * g[c];
                            }
                        }
                    }
                    // dx += W g
                    let wd = store.data(*w);
                    let gx = grads[x.0].get_or_insert_with(|| vec![F::zero(); rows]);
                    for r in 0..rows {
                        let base = r * cols;
                        let mut acc = F::zero();
                        for c in 0..cols {
                            acc = acc + wd[base + c] * g[c];
                        }
                        gx[r] = gx[r] + acc;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::AddParam { x, b } => {
                    accumulate(&mut grads, *x, &g);
                    let gb = store.grad_mut(*b);
                    for c in 0..gb.len() {
                        gb[c] = gb[c] + g[c];
                    }
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].data.clone();
                    let bv = self.nodes[b.0].data.clone();
                    let ga: Vec<F> = g.iter().zip(&bv).map(|(&gv, &b)| gv * b).collect();
                    let gb: Vec<F> = g.iter().zip(&av).map(|(&gv, &a)| gv * a).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale { x, c } => {
                    let gx: Vec<F> = g.iter().map(|&v| v * *c).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::OneMinus(x) => {
                    let gx: Vec<F> = g.iter().map(|&v| -v).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].data;
                    let gx: Vec<F> =
                        g.iter().zip(y).map(|(&gv, &yv)| gv * (F::one() - yv * yv)).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[i].data;
                    let gx: Vec<F> =
                        g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (F::one() - yv)).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    let parts = parts.clone();
                    for p in parts {
                        let len = self.nodes[p.0].data.len();
                        accumulate(&mut grads, p, &g[off..off + len]);
                        off += len;
                    }
                }
                Op::Dot(a, b) => {
                    let av = self.nodes[a.0].data.clone();
                    let bv = self.nodes[b.0].data.clone();
                    let s = g[0];
                    let ga: Vec<F> = bv.iter().map(|&v| s * v).collect();
                    let gb: Vec<F> = av.iter().map(|&v| s * v).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Stack(scalars) => {
                    for (k, &s) in scalars.clone().iter().enumerate() {
                        accumulate(&mut grads, s, &g[k..k + 1]);
                    }
                }
                Op::Softmax(x) => {
                    let y = &self.nodes[i].data;
                    let mut gy_dot_y = F::zero();
                    for k in 0..y.len() {
                        gy_dot_y = gy_dot_y + g[k] * y[k];
                    }
                    let gx: Vec<F> = g.iter().zip(y).map(|(&gv, &yv)| yv * (gv - gy_dot_y)).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::WeightedSum { weights, vecs } => {
                    let wv = self.nodes[weights.0].data.clone();
                    let vecs = vecs.clone();
                    let mut gw = vec![F::zero(); wv.len()];
                    for (k, &v) in vecs.iter().enumerate() {
                        let vd = self.nodes[v.0].data.clone();
                        let mut acc = F::zero();
                        for i2 in 0..vd.len() {
                            acc = acc + g[i2] * vd[i2];
                        }
                        gw[k] = acc;
                        let gv: Vec<F> = g.iter().map(|&gg| gg * wv[k]).collect();
                        accumulate(&mut grads, v, &gv);
                    }
                    accumulate(&mut grads, *weights, &gw);
                }
                Op::MeanVecs(vecs) => {
                    let inv = F::one() / F::from(vecs.len()).unwrap();
                    let gv: Vec<F> = g.iter().map(|&v| v * inv).collect();
                    for &v in vecs.clone().iter() {
                        accumulate(&mut grads, v, &gv);
                    }
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[x.0].data.len();
                    let inv = g[0] / F::from(n).unwrap();
                    let gx = vec![inv; n];
                    accumulate(&mut grads, *x, &gx);
                }
                Op::AddIndexed { base, extra, map } => {
                    let extra_len = self.nodes[extra.0].data.len();
                    let mut ge = vec![F::zero(); extra_len];
                    for (i2, &m) in map.iter().enumerate() {
                        ge[m] = ge[m] + g[i2];
                    }
                    accumulate(&mut grads, *base, &g);
                    accumulate(&mut grads, *extra, &ge);
                }
                Op::NllFromLogits { logits, target } => {
                    let mut p = self.nodes[logits.0].data.clone();
                    softmax_in_place(&mut p);
                    p[*target] = p[*target] - F::one();
                    let s = g[0];
                    let gx: Vec<F> = p.iter().map(|&v| v * s).collect();
                    accumulate(&mut grads, *logits, &gx);
                }
            }
        }
    }
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<F: Float>(grads: &mut [Option<Vec<F>>], v: Var, g: &[F]) {
    let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); g.len()]);
    for i in 0..g.len() {
        slot[i] = slot[i] + g[i];
    }
}

/// Central finite difference of `f` with respect to one parameter component.
pub fn central_difference<F: Float>(
    store: &mut ParameterStore<F>,
    p: ParamId,
    idx: usize,
    step: F,
    f: &mut dyn FnMut(&ParameterStore<F>) -> F,
) -> F {
    let orig = store.data(p)[idx];
    store.data_mut(p)[idx] = orig + step;
    let hi = f(store);
    store.data_mut(p)[idx] = orig - step;
    let lo = f(store);
    store.data_mut(p)[idx] = orig;
    (hi - lo) / (step + step)
}
