//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every primitive's adjoint is expressed with the same tape primitives, so
//! gradients are themselves differentiable graph nodes. That closure property
//! is what allows losses containing input gradients to be differentiated a
//! second time with respect to the parameters.
//!
//! Values are computed eagerly on op construction; `grad` walks the tape in
//! reverse and appends adjoint expressions.

use std::sync::Arc;

use crate::kernels::{self, ConvMeta};
use crate::tensor::{Scalar, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    /// 1 / max(a, eps); the guard only rescues exact zeros.
    RecipSafe(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    /// sign(a) with sign(0) = 0. Derivative treated as zero everywhere.
    Sign(Var),
    /// 1 if a > 0 else 0. Derivative treated as zero everywhere.
    Step(Var),
    /// 1 if lo < a < hi else 0. Derivative treated as zero everywhere.
    RangeMask(Var),
    Clamp(Var, T, T),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv(Var, Var, ConvMeta),
    ConvBackInput(Var, Var, ConvMeta),
    ConvBackWeight(Var, Var, ConvMeta),
    SumAll(Var),
    BroadcastTo(Var),
    /// (N,K) -> (N): sum over columns.
    RowSum(Var),
    /// (N) -> (N,K): repeat each entry across a row.
    BroadcastCols(Var),
    /// (N,K) -> (K): sum over rows.
    ColSum(Var),
    /// (K) -> (N,K).
    BroadcastRows(Var),
    /// (N,K) -> (N): per-row max, derivative treated as zero.
    RowMax(Var),
    /// (N,K) -> (N): value at a fixed column index per row.
    RowGather(Var, Arc<Vec<usize>>),
    /// (N) -> (N,K): scatter each entry to its column index.
    RowScatter(Var, Arc<Vec<usize>>),
    /// (N,..) -> (N): sum over all trailing axes.
    SampleSum(Var),
    /// (N) -> (N,..).
    SampleBroadcast(Var),
    /// (N,C,H,W) -> (N,C).
    SpatialSum(Var),
    /// (N,C) -> (N,C,H,W).
    SpatialBroadcast(Var),
    /// (N,C,H,W) + (C), broadcast over N,H,W.
    AddChanBias(Var, Var),
    /// (N,C,H,W) -> (C).
    SumNhw(Var),
    /// (C) -> (N,C,H,W).
    ChanBroadcast(Var),
    /// (N,K) + (K), broadcast over rows.
    AddRowVec(Var, Var),
    Reshape(Var),
    /// 2x2 max pooling with stored argmax positions (treated as constant
    /// under differentiation, like Step).
    MaxPool2x2(Var, Arc<Vec<usize>>),
    /// out[idx[i]] += g[i] into a tensor of the given total length.
    ScatterByIndex(Var, Arc<Vec<usize>>),
    /// out[i] = a[idx[i]].
    GatherByIndex(Var, Arc<Vec<usize>>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// New independent node; gradients accumulate here but do not flow past.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copy of a node's value with the graph connection severed.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y).unwrap();
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x - y).unwrap();
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y).unwrap();
        self.push(value, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| -x);
        self.push(value, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.exp());
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.ln());
        self.push(value, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.sqrt());
        self.push(value, Op::Sqrt(a))
    }

    pub fn recip_safe(&mut self, a: Var, eps: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| T::ONE / x.max(eps));
        self.push(value, Op::RecipSafe(a, eps))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| T::ONE / (T::ONE + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.max(T::ZERO));
        self.push(value, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.abs());
        self.push(value, Op::Abs(a))
    }

    pub fn sign(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| {
            if x > T::ZERO {
                T::ONE
            } else if x < T::ZERO {
                -T::ONE
            } else {
                T::ZERO
            }
        });
        self.push(value, Op::Sign(a))
    }

    pub fn step(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| if x > T::ZERO { T::ONE } else { T::ZERO });
        self.push(value, Op::Step(a))
    }

    pub fn range_mask(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value =
            self.nodes[a.0].value.map(|x| if x > lo && x < hi { T::ONE } else { T::ZERO });
        self.push(value, Op::RangeMask(a))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.max(lo).min(hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, ta, tb);
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let meta = ConvMeta::from_shapes(
            self.nodes[x.0].value.shape(),
            self.nodes[w.0].value.shape(),
            stride,
            pad,
        );
        let value = kernels::conv2d(&self.nodes[x.0].value, &self.nodes[w.0].value, &meta);
        self.push(value, Op::Conv(x, w, meta))
    }

    fn conv_back_input(&mut self, gy: Var, w: Var, meta: ConvMeta) -> Var {
        let value =
            kernels::conv2d_back_input(&self.nodes[gy.0].value, &self.nodes[w.0].value, &meta);
        self.push(value, Op::ConvBackInput(gy, w, meta))
    }

    fn conv_back_weight(&mut self, x: Var, gy: Var, meta: ConvMeta) -> Var {
        let value =
            kernels::conv2d_back_weight(&self.nodes[x.0].value, &self.nodes[gy.0].value, &meta);
        self.push(value, Op::ConvBackWeight(x, gy, meta))
    }

    // ---- reductions and broadcasts ----------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll(a))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.len(), 1);
        let v = self.nodes[a.0].value.item();
        self.push(Tensor::filled(shape, v), Op::BroadcastTo(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, T::ONE / T::from_f64(n as f64))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (n, k) = (t.shape()[0], t.shape()[1]);
        let mut out = Tensor::zeros(&[n]);
        for i in 0..n {
            let mut acc = T::ZERO;
            for &v in &t.data()[i * k..(i + 1) * k] {
                acc += v;
            }
            out.data_mut()[i] = acc;
        }
        self.push(out, Op::RowSum(a))
    }

    pub fn broadcast_cols(&mut self, a: Var, k: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let n = t.shape()[0];
        let mut out = Tensor::zeros(&[n, k]);
        for i in 0..n {
            let v = t.data()[i];
            out.data_mut()[i * k..(i + 1) * k].fill(v);
        }
        self.push(out, Op::BroadcastCols(a))
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (n, k) = (t.shape()[0], t.shape()[1]);
        let mut out = Tensor::zeros(&[k]);
        for i in 0..n {
            for j in 0..k {
                out.data_mut()[j] += t.data()[i * k + j];
            }
        }
        self.push(out, Op::ColSum(a))
    }

    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let k = t.shape()[0];
        let mut out = Tensor::zeros(&[n, k]);
        for i in 0..n {
            out.data_mut()[i * k..(i + 1) * k].copy_from_slice(t.data());
        }
        self.push(out, Op::BroadcastRows(a))
    }

    pub fn row_max(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (n, k) = (t.shape()[0], t.shape()[1]);
        let mut out = Tensor::zeros(&[n]);
        for i in 0..n {
            let row = &t.data()[i * k..(i + 1) * k];
            let mut m = row[0];
            for &v in &row[1..] {
                m = m.max(v);
            }
            out.data_mut()[i] = m;
        }
        self.push(out, Op::RowMax(a))
    }

    pub fn row_gather(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let t = &self.nodes[a.0].value;
        let (n, k) = (t.shape()[0], t.shape()[1]);
        debug_assert_eq!(idx.len(), n);
        let mut out = Tensor::zeros(&[n]);
        for i in 0..n {
            out.data_mut()[i] = t.data()[i * k + idx[i]];
        }
        self.push(out, Op::RowGather(a, idx))
    }

    pub fn row_scatter(&mut self, a: Var, idx: Arc<Vec<usize>>, k: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let n = t.shape()[0];
        debug_assert_eq!(idx.len(), n);
        let mut out = Tensor::zeros(&[n, k]);
        for i in 0..n {
            out.data_mut()[i * k + idx[i]] = t.data()[i];
        }
        self.push(out, Op::RowScatter(a, idx))
    }

    pub fn sample_sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let n = t.shape()[0];
        let per = t.len() / n.max(1);
        let mut out = Tensor::zeros(&[n]);
        for i in 0..n {
            let mut acc = T::ZERO;
            for &v in &t.data()[i * per..(i + 1) * per] {
                acc += v;
            }
            out.data_mut()[i] = acc;
        }
        self.push(out, Op::SampleSum(a))
    }

    pub fn sample_broadcast(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = &self.nodes[a.0].value;
        let n = t.shape()[0];
        debug_assert_eq!(shape[0], n);
        let per: usize = shape[1..].iter().product();
        let mut out = Tensor::zeros(shape);
        for i in 0..n {
            let v = t.data()[i];
            out.data_mut()[i * per..(i + 1) * per].fill(v);
        }
        self.push(out, Op::SampleBroadcast(a))
    }

    pub fn spatial_sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[n, c]);
        for p in 0..n * c {
            let mut acc = T::ZERO;
            for &v in &t.data()[p * h * w..(p + 1) * h * w] {
                acc += v;
            }
            out.data_mut()[p] = acc;
        }
        self.push(out, Op::SpatialSum(a))
    }

    pub fn spatial_broadcast(&mut self, a: Var, h: usize, w: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for p in 0..n * c {
            let v = t.data()[p];
            out.data_mut()[p * h * w..(p + 1) * h * w].fill(v);
        }
        self.push(out, Op::SpatialBroadcast(a))
    }

    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let bias = &self.nodes[b.0].value;
        let s = t.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        debug_assert_eq!(bias.len(), c);
        let mut out = t.clone();
        for i in 0..n {
            for ch in 0..c {
                let bv = bias.data()[ch];
                let base = (i * c + ch) * h * w;
                for v in &mut out.data_mut()[base..base + h * w] {
                    *v += bv;
                }
            }
        }
        self.push(out, Op::AddChanBias(x, b))
    }

    pub fn sum_nhw(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[c]);
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                let mut acc = T::ZERO;
                for &v in &t.data()[base..base + h * w] {
                    acc += v;
                }
                out.data_mut()[ch] += acc;
            }
        }
        self.push(out, Op::SumNhw(a))
    }

    pub fn chan_broadcast(&mut self, a: Var, n: usize, h: usize, w: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let c = t.shape()[0];
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for i in 0..n {
            for ch in 0..c {
                let v = t.data()[ch];
                let base = (i * c + ch) * h * w;
                out.data_mut()[base..base + h * w].fill(v);
            }
        }
        self.push(out, Op::ChanBroadcast(a))
    }

    pub fn add_row_vec(&mut self, x: Var, b: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let bias = &self.nodes[b.0].value;
        let (n, k) = (t.shape()[0], t.shape()[1]);
        debug_assert_eq!(bias.len(), k);
        let mut out = t.clone();
        for i in 0..n {
            for j in 0..k {
                out.data_mut()[i * k + j] += bias.data()[j];
            }
        }
        self.push(out, Op::AddRowVec(x, b))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0].value.clone().reshaped(shape).expect("reshape length");
        self.push(value, Op::Reshape(a))
    }

    /// 2x2/stride-2 max pooling over the spatial dims of an NCHW tensor.
    pub fn max_pool_2x2(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        for p in 0..n * c {
            let plane = &t.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (2 * oy) * w + 2 * ox;
                    let mut bv = plane[best];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[idx] > bv {
                            bv = plane[idx];
                            best = idx;
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out.data_mut()[o] = bv;
                    argmax[o] = p * h * w + best;
                }
            }
        }
        self.push(out, Op::MaxPool2x2(a, Arc::new(argmax)))
    }

    fn scatter_by_index(&mut self, a: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let t = &self.nodes[a.0].value;
        debug_assert_eq!(t.len(), idx.len());
        let mut out = Tensor::zeros(shape);
        for (i, &p) in idx.iter().enumerate() {
            out.data_mut()[p] += t.data()[i];
        }
        self.push(out, Op::ScatterByIndex(a, idx))
    }

    fn gather_by_index(&mut self, a: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let t = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(shape);
        for (i, &p) in idx.iter().enumerate() {
            out.data_mut()[i] = t.data()[p];
        }
        self.push(out, Op::GatherByIndex(a, idx))
    }

    // ---- composites -------------------------------------------------------

    /// Row-wise log-softmax of an (N,K) matrix, numerically stabilized with a
    /// detached row max (the detachment does not change the derivative).
    pub fn log_softmax(&mut self, logits: Var) -> Var {
        let k = self.shape(logits)[1];
        let m = self.row_max(logits);
        let mb = self.broadcast_cols(m, k);
        let shifted = self.sub(logits, mb);
        let e = self.exp(shifted);
        let se = self.row_sum(e);
        let lse = self.ln(se);
        let lseb = self.broadcast_cols(lse, k);
        self.sub(shifted, lseb)
    }

    /// x·W + b for x:(N,D), w:(D,K), b:(K).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row_vec(y, b)
    }

    /// Mean over spatial dims: (N,C,H,W) -> (N,C).
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (h, w) = (s[2], s[3]);
        let sum = self.spatial_sum(x);
        self.scale(sum, T::ONE / T::from_f64((h * w) as f64))
    }

    // ---- differentiation ---------------------------------------------------

    /// Reverse-mode gradients of scalar `y` with respect to each var in
    /// `wrt`. Gradient expressions are appended to the tape, so the result
    /// vars can participate in further differentiable computation.
    ///
    /// Vars with no path to `y` receive an explicit zero tensor.
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.nodes[y.0].value.len(), 1, "grad target must be scalar");
        let n = y.0 + 1;

        // Nodes that can influence y (forward closure of wrt) and that y
        // depends on (reverse closure); only their intersection is walked.
        let mut needs = vec![false; n];
        for w in wrt {
            needs[w.0] = true;
        }
        for i in 0..n {
            if !needs[i] {
                let mut any = false;
                self.for_each_parent(i, |p| any |= p.0 < n && needs[p.0]);
                needs[i] = any;
            }
        }
        let mut reach = vec![false; n];
        let mut stack = vec![y.0];
        reach[y.0] = true;
        while let Some(i) = stack.pop() {
            for p in self.parents_of(i) {
                if p.0 < n && !reach[p.0] {
                    reach[p.0] = true;
                    stack.push(p.0);
                }
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        let one = self.leaf(Tensor::scalar(T::ONE));
        adj[y.0] = Some(one);

        for i in (0..n).rev() {
            if !(reach[i] && needs[i]) {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let this = Var(i);
            self.accumulate_parents(&op, this, g, &mut adj, &needs);
        }

        wrt.iter()
            .map(|w| match adj[w.0] {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.nodes[w.0].value.shape());
                    self.leaf(z)
                }
            })
            .collect()
    }

    fn parents_of(&self, i: usize) -> Vec<Var> {
        let mut out = Vec::with_capacity(2);
        self.for_each_parent(i, |p| out.push(p));
        out
    }

    fn for_each_parent(&self, i: usize, mut f: impl FnMut(Var)) {
        use Op::*;
        match &self.nodes[i].op {
            Leaf => {}
            Add(a, b) | Sub(a, b) | Mul(a, b) => {
                f(*a);
                f(*b);
            }
            Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Ln(a) | Sqrt(a)
            | RecipSafe(a, _) | Sigmoid(a) | Relu(a) | Abs(a) | Sign(a) | Step(a)
            | RangeMask(a) | Clamp(a, _, _) | SumAll(a) | BroadcastTo(a) | RowSum(a)
            | BroadcastCols(a) | ColSum(a) | BroadcastRows(a) | RowMax(a)
            | RowGather(a, _) | RowScatter(a, _) | SampleSum(a) | SampleBroadcast(a)
            | SpatialSum(a) | SpatialBroadcast(a) | SumNhw(a)
            | ChanBroadcast(a) | Reshape(a) | MaxPool2x2(a, _) | ScatterByIndex(a, _)
            | GatherByIndex(a, _) => f(*a),
            MatMul { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Conv(a, b, _) | ConvBackInput(a, b, _) | ConvBackWeight(a, b, _)
            | AddChanBias(a, b) | AddRowVec(a, b) => {
                f(*a);
                f(*b);
            }
        }
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contrib: Var) {
        adj[target.0] = Some(match adj[target.0] {
            None => contrib,
            Some(prev) => self.add(prev, contrib),
        });
    }

    fn accumulate_parents(
        &mut self,
        op: &Op<T>,
        this: Var,
        g: Var,
        adj: &mut [Option<Var>],
        needs: &[bool],
    ) {
        use Op::*;
        let want = |v: &Var| needs.get(v.0).copied().unwrap_or(false);
        match op {
            Leaf | Sign(_) | Step(_) | RangeMask(_) | RowMax(_) => {}
            Add(a, b) => {
                if want(a) {
                    self.accumulate(adj, *a, g);
                }
                if want(b) {
                    self.accumulate(adj, *b, g);
                }
            }
            Sub(a, b) => {
                if want(a) {
                    self.accumulate(adj, *a, g);
                }
                if want(b) {
                    let ng = self.neg(g);
                    self.accumulate(adj, *b, ng);
                }
            }
            Mul(a, b) => {
                if want(a) {
                    let c = self.mul(g, *b);
                    self.accumulate(adj, *a, c);
                }
                if want(b) {
                    let c = self.mul(g, *a);
                    self.accumulate(adj, *b, c);
                }
            }
            Neg(a) => {
                if want(a) {
                    let c = self.neg(g);
                    self.accumulate(adj, *a, c);
                }
            }
            Scale(a, c) => {
                if want(a) {
                    let s = self.scale(g, *c);
                    self.accumulate(adj, *a, s);
                }
            }
            AddScalar(a) => {
                if want(a) {
                    self.accumulate(adj, *a, g);
                }
            }
            Exp(a) => {
                if want(a) {
                    let c = self.mul(g, this);
                    self.accumulate(adj, *a, c);
                }
            }
            Ln(a) => {
                if want(a) {
                    let r = self.recip_safe(*a, T::tiny());
                    let c = self.mul(g, r);
                    self.accumulate(adj, *a, c);
                }
            }
            Sqrt(a) => {
                if want(a) {
                    // 0.5 / max(sqrt(a), tiny): subgradient zero exactly at 0.
                    let r = self.recip_safe(this, T::tiny());
                    let h = self.scale(r, T::from_f64(0.5));
                    let c = self.mul(g, h);
                    self.accumulate(adj, *a, c);
                }
            }
            RecipSafe(a, eps) => {
                if want(a) {
                    let y2 = self.mul(this, this);
                    let m = self.range_mask(*a, *eps, T::from_f64(f64::INFINITY));
                    let gy = self.mul(g, y2);
                    let gm = self.mul(gy, m);
                    let c = self.neg(gm);
                    self.accumulate(adj, *a, c);
                }
            }
            Sigmoid(a) => {
                if want(a) {
                    let ny = self.neg(this);
                    let om = self.add_scalar(ny, T::ONE);
                    let yy = self.mul(this, om);
                    let c = self.mul(g, yy);
                    self.accumulate(adj, *a, c);
                }
            }
            Relu(a) => {
                if want(a) {
                    let s = self.step(*a);
                    let c = self.mul(g, s);
                    self.accumulate(adj, *a, c);
                }
            }
            Abs(a) => {
                if want(a) {
                    let s = self.sign(*a);
                    let c = self.mul(g, s);
                    self.accumulate(adj, *a, c);
                }
            }
            Clamp(a, lo, hi) => {
                if want(a) {
                    let m = self.range_mask(*a, *lo, *hi);
                    let c = self.mul(g, m);
                    self.accumulate(adj, *a, c);
                }
            }
            MatMul { a, b, ta, tb } => {
                if want(a) {
                    let ga = match (ta, tb) {
                        (false, false) => self.matmul_t(g, *b, false, true),
                        (false, true) => self.matmul_t(g, *b, false, false),
                        (true, false) => self.matmul_t(*b, g, false, true),
                        (true, true) => self.matmul_t(*b, g, true, true),
                    };
                    self.accumulate(adj, *a, ga);
                }
                if want(b) {
                    let gb = match (ta, tb) {
                        (false, false) => self.matmul_t(*a, g, true, false),
                        (false, true) => self.matmul_t(g, *a, true, false),
                        (true, false) => self.matmul_t(*a, g, false, false),
                        (true, true) => self.matmul_t(g, *a, true, true),
                    };
                    self.accumulate(adj, *b, gb);
                }
            }
            Conv(x, w, meta) => {
                if want(x) {
                    let gx = self.conv_back_input(g, *w, *meta);
                    self.accumulate(adj, *x, gx);
                }
                if want(w) {
                    let gw = self.conv_back_weight(*x, g, *meta);
                    self.accumulate(adj, *w, gw);
                }
            }
            ConvBackInput(gy, w, meta) => {
                if want(gy) {
                    let c = self.conv2d(g, *w, meta.stride, meta.pad);
                    self.accumulate(adj, *gy, c);
                }
                if want(w) {
                    let c = self.conv_back_weight(g, *gy, *meta);
                    self.accumulate(adj, *w, c);
                }
            }
            ConvBackWeight(x, gy, meta) => {
                if want(x) {
                    let c = self.conv_back_input(*gy, g, *meta);
                    self.accumulate(adj, *x, c);
                }
                if want(gy) {
                    let c = self.conv2d(*x, g, meta.stride, meta.pad);
                    self.accumulate(adj, *gy, c);
                }
            }
            SumAll(a) => {
                if want(a) {
                    let shape = self.shape(*a).to_vec();
                    let c = self.broadcast_to(g, &shape);
                    self.accumulate(adj, *a, c);
                }
            }
            BroadcastTo(a) => {
                if want(a) {
                    let c = self.sum_all(g);
                    self.accumulate(adj, *a, c);
                }
            }
            RowSum(a) => {
                if want(a) {
                    let k = self.shape(*a)[1];
                    let c = self.broadcast_cols(g, k);
                    self.accumulate(adj, *a, c);
                }
            }
            BroadcastCols(a) => {
                if want(a) {
                    let c = self.row_sum(g);
                    self.accumulate(adj, *a, c);
                }
            }
            ColSum(a) => {
                if want(a) {
                    let n = self.shape(*a)[0];
                    let c = self.broadcast_rows(g, n);
                    self.accumulate(adj, *a, c);
                }
            }
            BroadcastRows(a) => {
                if want(a) {
                    let c = self.col_sum(g);
                    self.accumulate(adj, *a, c);
                }
            }
            RowGather(a, idx) => {
                if want(a) {
                    let k = self.shape(*a)[1];
                    let c = self.row_scatter(g, idx.clone(), k);
                    self.accumulate(adj, *a, c);
                }
            }
            RowScatter(a, idx) => {
                if want(a) {
                    let c = self.row_gather(g, idx.clone());
                    self.accumulate(adj, *a, c);
                }
            }
            SampleSum(a) => {
                if want(a) {
                    let shape = self.shape(*a).to_vec();
                    let c = self.sample_broadcast(g, &shape);
                    self.accumulate(adj, *a, c);
                }
            }
            SampleBroadcast(a) => {
                if want(a) {
                    let c = self.sample_sum(g);
                    self.accumulate(adj, *a, c);
                }
            }
            SpatialSum(a) => {
                if want(a) {
                    let s = self.shape(*a).to_vec();
                    let c = self.spatial_broadcast(g, s[2], s[3]);
                    self.accumulate(adj, *a, c);
                }
            }
            SpatialBroadcast(a) => {
                if want(a) {
                    let c = self.spatial_sum(g);
                    self.accumulate(adj, *a, c);
                }
            }
            AddChanBias(x, b) => {
                if want(x) {
                    self.accumulate(adj, *x, g);
                }
                if want(b) {
                    let c = self.sum_nhw(g);
                    self.accumulate(adj, *b, c);
                }
            }
            SumNhw(a) => {
                if want(a) {
                    let s = self.shape(*a).to_vec();
                    let c = self.chan_broadcast(g, s[0], s[2], s[3]);
                    self.accumulate(adj, *a, c);
                }
            }
            ChanBroadcast(a) => {
                if want(a) {
                    let c = self.sum_nhw(g);
                    self.accumulate(adj, *a, c);
                }
            }
            AddRowVec(x, b) => {
                if want(x) {
                    self.accumulate(adj, *x, g);
                }
                if want(b) {
                    let c = self.col_sum(g);
                    self.accumulate(adj, *b, c);
                }
            }
            Reshape(a) => {
                if want(a) {
                    let shape = self.shape(*a).to_vec();
                    let c = self.reshape(g, &shape);
                    self.accumulate(adj, *a, c);
                }
            }
            MaxPool2x2(a, idx) => {
                if want(a) {
                    let shape = self.shape(*a).to_vec();
                    let gf = self.reshape(g, &[self.value(g).len()]);
                    let flat: usize = shape.iter().product();
                    let sc = self.scatter_by_index(gf, idx.clone(), &[flat]);
                    let c = self.reshape(sc, &shape);
                    self.accumulate(adj, *a, c);
                }
            }
            ScatterByIndex(a, idx) => {
                if want(a) {
                    let n = self.value(*a).len();
                    let gf = self.reshape(g, &[self.value(g).len()]);
                    let c = self.gather_by_index(gf, idx.clone(), &[n]);
                    self.accumulate(adj, *a, c);
                }
            }
            GatherByIndex(a, idx) => {
                if want(a) {
                    let shape = self.shape(*a).to_vec();
                    let flat: usize = shape.iter().product();
                    let gf = self.reshape(g, &[self.value(g).len()]);
                    let sc = self.scatter_by_index(gf, idx.clone(), &[flat]);
                    let c = self.reshape(sc, &shape);
                    self.accumulate(adj, *a, c);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_var(tape: &mut Tape<f64>, v: f64) -> Var {
        tape.leaf(Tensor::scalar(v))
    }

    #[test]
    fn grad_of_square() {
        // f(w) = w^2 at w = 3 -> df/dw = 6.
        let mut t = Tape::<f64>::new();
        let w = scalar_var(&mut t, 3.0);
        let y = t.mul(w, w);
        let g = t.grad(y, &[w]);
        assert_eq!(t.value(g[0]).item(), 6.0);
    }

    #[test]
    fn grad_through_chain() {
        // f(x) = exp(sin-ish composite): use ln(sqrt(x)) = 0.5 ln x.
        let mut t = Tape::<f64>::new();
        let x = scalar_var(&mut t, 4.0);
        let s = t.sqrt(x);
        let y = t.ln(s);
        let g = t.grad(y, &[x]);
        assert!((t.value(g[0]).item() - 0.5 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn second_order_through_grad_nodes() {
        // g(w) = sum_x (d f/d x)^2 with f(x,w) = w * x^2.
        // df/dx = 2 w x, so g = sum 4 w^2 x^2 and dg/dw = 8 w sum x^2.
        let xs = [1.0, 2.0, -0.5];
        let w0 = 1.7;
        let mut t = Tape::<f64>::new();
        let w = scalar_var(&mut t, w0);
        let x = t.leaf(Tensor::from_vec(&[3], xs.to_vec()).unwrap());
        let x2 = t.mul(x, x);
        let wb = t.broadcast_to(w, &[3]);
        let fx = t.mul(wb, x2);
        let fsum = t.sum_all(fx);
        let gx = t.grad(fsum, &[x])[0];
        let gx2 = t.mul(gx, gx);
        let penalty = t.sum_all(gx2);
        let gw = t.grad(penalty, &[w]);
        let expect = 8.0 * w0 * xs.iter().map(|v| v * v).sum::<f64>();
        assert!(
            (t.value(gw[0]).item() - expect).abs() < 1e-10,
            "got {} want {expect}",
            t.value(gw[0]).item()
        );
    }

    #[test]
    fn grad_unconnected_is_zero() {
        let mut t = Tape::<f64>::new();
        let a = scalar_var(&mut t, 1.0);
        let b = scalar_var(&mut t, 2.0);
        let y = t.mul(a, a);
        let g = t.grad(y, &[b]);
        assert_eq!(t.value(g[0]).item(), 0.0);
    }

    #[test]
    fn log_softmax_rows_sum_to_one_in_prob_space() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let lp = t.log_softmax(x);
        for row in 0..2 {
            let s: f64 = t.value(lp).data()[row * 3..(row + 1) * 3].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    /// Central finite differences over every leaf entry.
    fn fd_check(build: impl Fn(&mut Tape<f64>, &[Var]) -> Var, leaves: &[Tensor<f64>], tol: f64) {
        let mut t = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| t.leaf(l.clone())).collect();
        let y = build(&mut t, &vars);
        let grads = t.grad(y, &vars);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for e in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut t2 = Tape::new();
                    let vars2: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(i, l)| {
                            let mut l = l.clone();
                            if i == li {
                                l.data_mut()[e] += delta;
                            }
                            t2.leaf(l)
                        })
                        .collect();
                    let y2 = build(&mut t2, &vars2);
                    t2.value(y2).item()
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = t.value(grads[li]).data()[e];
                let denom = num.abs().max(ana.abs()).max(1e-8);
                assert!(
                    (num - ana).abs() / denom < tol,
                    "leaf {li} elem {e}: numerical {num} vs analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn fd_matches_conv_relu_linear_composite() {
        let x = Tensor::from_vec(
            &[1, 1, 4, 4],
            (0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.17 + 0.05).collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|i| (i as f64 - 9.0) * 0.09).collect())
            .unwrap();
        let b = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
        let wl = Tensor::from_vec(&[2, 2], vec![0.3, -0.4, 0.5, 0.6]).unwrap();
        fd_check(
            |t, vars| {
                let (x, w, b, wl) = (vars[0], vars[1], vars[2], vars[3]);
                let c = t.conv2d(x, w, 1, 1);
                let cb = t.add_chan_bias(c, b);
                let r = t.relu(cb);
                let p = t.global_avg_pool(r);
                let y = t.matmul(p, wl);
                let lp = t.log_softmax(y);
                let s = t.sum_all(lp);
                t.mean_all(s)
            },
            &[x, w, b, wl],
            1e-5,
        );
    }

    #[test]
    fn fd_matches_max_pool_path() {
        // Distinct values keep FD away from argmax ties.
        let x = Tensor::from_vec(
            &[1, 2, 4, 4],
            (0..32).map(|i| ((i * 11 % 32) as f64) * 0.13 - 1.9).collect(),
        )
        .unwrap();
        fd_check(
            |t, vars| {
                let p = t.max_pool_2x2(vars[0]);
                let sq = t.mul(p, p);
                t.sum_all(sq)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn fd_matches_strided_conv_path() {
        let x = Tensor::from_vec(
            &[2, 2, 5, 5],
            (0..100).map(|i| ((i * 13 % 17) as f64 - 8.0) * 0.11).collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|i| (i as f64 - 27.0) * 0.03).collect())
            .unwrap();
        fd_check(
            |t, vars| {
                let c = t.conv2d(vars[0], vars[1], 2, 1);
                let sq = t.mul(c, c);
                t.sum_all(sq)
            },
            &[x, w],
            1e-5,
        );
    }

    #[test]
    fn fd_matches_second_order_conv_penalty() {
        // Penalty built from an input gradient, then differentiated w.r.t.
        // the weights: the nested path through the conv adjoint family.
        let x = Tensor::from_vec(
            &[1, 1, 4, 4],
            (0..16).map(|i| ((i * 5 % 7) as f64 - 3.0) * 0.21).collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|i| (i as f64 - 4.0) * 0.12).collect())
            .unwrap();

        let build = |t: &mut Tape<f64>, vars: &[Var]| {
            let (x, w) = (vars[0], vars[1]);
            let c = t.conv2d(x, w, 1, 1);
            let sq = t.mul(c, c);
            let f = t.sum_all(sq);
            let gx = t.grad(f, &[x])[0];
            let gx2 = t.mul(gx, gx);
            t.sum_all(gx2)
        };
        // FD only over the weight leaf: perturbing x would change the
        // penalty's own differentiation point, which is fine, but weights
        // are what the second-order path serves.
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w.clone());
        let y = build(&mut t, &[xv, wv]);
        let g = t.grad(y, &[wv])[0];
        let h = 1e-6;
        for e in 0..w.len() {
            let eval = |delta: f64| {
                let mut t2 = Tape::new();
                let xv2 = t2.leaf(x.clone());
                let mut wp = w.clone();
                wp.data_mut()[e] += delta;
                let wv2 = t2.leaf(wp);
                let y2 = build(&mut t2, &[xv2, wv2]);
                t2.value(y2).item()
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let ana = t.value(g).data()[e];
            let denom = num.abs().max(ana.abs()).max(1e-8);
            assert!(
                (num - ana).abs() / denom < 1e-5,
                "weight elem {e}: numerical {num} vs analytic {ana}"
            );
        }
    }
}
