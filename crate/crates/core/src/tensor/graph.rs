use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng as _, SeedableRng};

use super::kernels::{self, ConvGeom};
use super::params::{NormId, NormState, ParamId, ParamStore, BN_EPS};
use super::{numel, probe, Mask, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics observed by a training-mode batch norm, waiting to be
/// folded into the running statistics.
#[derive(Debug, Clone)]
pub struct NormUpdate<T> {
    pub slot: Option<NormId>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, b_shared: bool, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTrailing(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    MaskedFill { a: Var, keep: Arc<Vec<bool>> },
    Conv { x: Var, k: Var, bias: Option<Var>, geom: ConvGeom, relu: bool },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    Cumsum { a: Var, outer: usize, len: usize, inner: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Dropout { a: Var, scale: Vec<T> },
    Embedding { table: Var, ids: Vec<usize>, dim: usize },
    AvgPool2 { x: Var, n: usize, h: usize, w: usize, c: usize },
    PadEven { x: Var, n: usize, h: usize, w: usize, c: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, pad: usize, count: usize, classes: usize },
    SumAll(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddTrailing(..) => "add",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Conv { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::LayerNorm { .. } => "layernorm",
            Op::Cumsum { .. } => "cumsum_exclusive",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Dropout { .. } => "dropout",
            Op::Embedding { .. } => "embedding",
            Op::AvgPool2 { .. } => "avg_pool",
            Op::PadEven { .. } => "pad",
            Op::MaxPool { .. } => "max_pool",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SumAll(_) => "sum",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    param: Option<ParamId>,
}

/// Records a forward computation and differentiates it in reverse.
///
/// A graph is single-threaded and append-only; build a fresh one per step.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: Rng,
    norm_updates: Vec<NormUpdate<T>>,
    bound: HashMap<ParamId, Var>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn resolve_axis(rank: usize, axis: isize, op: &'static str) -> Result<usize> {
    let ax = if axis < 0 { rank as isize + axis } else { axis };
    if ax < 0 || ax as usize >= rank {
        return Err(Error::dim(op, format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(ax as usize)
}

impl<T: Scalar> Graph<T> {
    /// A graph in training mode (dropout active, batch norm uses batch
    /// statistics) or eval mode. `seed` drives dropout.
    pub fn new(training: bool, seed: u64) -> Self {
        Graph { nodes: Vec::new(), training, rng: Rng::seed_from_u64(seed), norm_updates: Vec::new(), bound: HashMap::new() }
    }

    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    /// Detached tensor sharing the node's buffer.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_arc(n.shape.clone(), n.data.clone())
    }

    /// Which side of every non-smooth point each element took: relu and
    /// fused conv+relu outputs as 0/1, max-pool winners by index. Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(_) | Op::Conv { relu: true, .. } => out.extend(n.data.iter().map(|v| usize::from(*v > T::zero()))),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn norm_updates(&self) -> &[NormUpdate<T>] {
        &self.norm_updates
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.nodes.iter().filter_map(|n| match (n.param, n.grad.as_deref()) {
            (Some(p), Some(g)) => Some((p, g)),
            _ => None,
        })
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        probe::record(data.len());
        Ok(self.push_shared(shape, Arc::new(data), op, requires_grad))
    }

    fn push_shared(&mut self, shape: Vec<usize>, data: Arc<Vec<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, data, op, requires_grad, grad: None, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves -----------------------------------------------------------

    /// A leaf that takes part in differentiation if the tensor asks for it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_shared(t.shape().to_vec(), t.data_arc().clone(), Op::Leaf, t.requires_grad())
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push_shared(t.shape().to_vec(), t.data_arc().clone(), Op::Leaf, false)
    }

    /// Binds a stored parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push_shared(t.shape().to_vec(), t.data_arc().clone(), Op::Leaf, t.requires_grad());
        self.nodes[v.0].param = Some(id);
        self.bound.insert(id, v);
        v
    }

    // ---- linear algebra ---------------------------------------------------

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", format!("operands need rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b { (sb[sb.len() - 1], sb[sb.len() - 2]) } else { (sb[sb.len() - 2], sb[sb.len() - 1]) };
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let b_shared = batch_b.is_empty();
        if k != kb || (!b_shared && batch_a != batch_b) {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}{}", if trans_b { "ᵀ" } else { "" })));
        }
        let batch: usize = batch_a.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            if b_shared && !trans_b {
                kernels::gemm_acc(av, bv, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let bi = if b_shared { bv } else { &bv[i * k * n..(i + 1) * k * n] };
                    let ci = &mut out[i * m * n..(i + 1) * m * n];
                    if trans_b {
                        kernels::gemm_nt_acc(ai, bi, ci, m, k, n);
                    } else {
                        kernels::gemm_acc(ai, bi, ci, m, k, n);
                    }
                }
            }
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        self.push(shape, out, Op::MatMul { a, b, batch, m, k, n, b_shared, trans_b }, rg)
    }

    /// `a[.., m, k] · b[.., k, n]`. `b` may be rank 2 (shared across the batch)
    /// or carry the same batch dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[.., m, k] · b[.., n, k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg)
    }

    /// `a + b` where `b`'s shape equals the trailing dims of `a` (bias, positional tables).
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim("add", format!("cannot broadcast {sb:?} over {sa:?}")));
        }
        let bv = self.value(b);
        let nb = bv.len();
        let out: Vec<T> = self.value(a).iter().enumerate().map(|(i, &x)| x + bv[i % nb]).collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::AddTrailing(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), rg)
    }

    /// Inverted dropout: identity in eval mode or for `p == 0`, otherwise
    /// zeroes each value with probability `p` and scales survivors by 1/(1-p).
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(a).len();
        let scale: Vec<T> = (0..n).map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let out = self.value(a).iter().zip(&scale).map(|(&x, &s)| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Dropout { a, scale }, rg)
    }

    // ---- shape ------------------------------------------------------------

    /// Zero-copy reshape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.rg(&[a]);
        Ok(self.push_shared(shape.to_vec(), data, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        let rank = src.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let out = permute_data(self.value(a), &src, perm);
        let rg = self.rg(&[a]);
        self.push(out_shape, out, Op::Permute { a, perm: perm.to_vec() }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: isize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?).to_vec();
        let ax = resolve_axis(first.len(), axis, "concat")?;
        let mut out_shape = first.clone();
        out_shape[ax] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == ax || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("{:?} vs {:?} along axis {ax}", s, first)));
            }
            out_shape[ax] += s[ax];
        }
        let (outer, _, inner) = axis_split(&first, ax);
        let total = out_shape[ax];
        let mut out = vec![T::zero(); outer * total * inner];
        let mut offset = 0;
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            let len = self.shape(p)[ax];
            let v = self.value(p);
            for o in 0..outer {
                let src = &v[o * len * inner..(o + 1) * len * inner];
                out[(o * total + offset) * inner..(o * total + offset + len) * inner].copy_from_slice(src);
            }
            meta.push((p, len));
            offset += len;
        }
        let rg = self.rg(parts);
        self.push(out_shape, out, Op::Concat { parts: meta, outer, inner }, rg)
    }

    // ---- reductions and normalizations -------------------------------------

    /// Softmax along `axis`. Inputs at or below the negative sentinel count as
    /// masked and come out as exactly 0.
    pub fn softmax(&mut self, a: Var, axis: isize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = resolve_axis(shape.len(), axis, "softmax")?;
        let (outer, len, inner) = axis_split(&shape, ax);
        let mut out = vec![T::zero(); outer * len * inner];
        if !kernels::softmax_strided(self.value(a), &mut out, outer, len, inner) {
            return Err(Error::DegenerateSlice);
        }
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Softmax { a, outer, len, inner }, rg)
    }

    /// Replaces positions where `mask` is false with the negative sentinel.
    /// `mask` may broadcast (dims equal or 1).
    pub fn masked_fill(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let full = mask.broadcast_to(&shape)?;
        let keep = full.keep.clone();
        let out = self.value(a).iter().zip(keep.iter()).map(|(&x, &k)| if k { x } else { T::NEG_SENTINEL }).collect();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::MaskedFill { a, keep }, rg)
    }

    /// Exclusive prefix sum along `axis`: `out[0] = 0`, `out[t] = out[t-1] + a[t-1]`.
    pub fn cumsum_exclusive(&mut self, a: Var, axis: isize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = resolve_axis(shape.len(), axis, "cumsum_exclusive")?;
        let (outer, len, inner) = axis_split(&shape, ax);
        let mut out = vec![T::zero(); outer * len * inner];
        let v = self.value(a);
        for o in 0..outer {
            let base = o * len * inner;
            for t in 1..len {
                let (done, rest) = out[base..base + len * inner].split_at_mut(t * inner);
                let prev = &done[(t - 1) * inner..];
                let src = &v[base + (t - 1) * inner..base + t * inner];
                for ((dst, &p), &s) in rest[..inner].iter_mut().zip(prev).zip(src) {
                    *dst = p + s;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Cumsum { a, outer, len, inner }, rg)
    }

    /// Batch normalization over the last (channel) axis. Training mode uses
    /// batch statistics over every other position and records them for the
    /// running estimate; eval mode uses `state` only.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, state: &NormState<T>, slot: Option<NormId>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            return Err(Error::dim("batchnorm", format!("input {shape:?} vs affine {:?}/{:?} and {} running channels", self.shape(gamma), self.shape(beta), state.channels())));
        }
        let n = numel(&shape) / c;
        let eps = BN_EPS;
        let (mean, inv_std) = if self.training {
            let xv = self.value(x);
            let mut mean = vec![0f64; c];
            for row in xv.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v.as_f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0f64; c];
            for row in xv.chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v.as_f64() - m;
                    *s += d * d;
                }
            }
            let biased: Vec<f64> = var.iter().map(|s| s / n as f64).collect();
            let unbiased: Vec<f64> = if n > 1 { var.iter().map(|s| s / (n - 1) as f64).collect() } else { biased.clone() };
            self.norm_updates.push(NormUpdate {
                slot,
                batch_mean: mean.iter().map(|&m| T::of(m)).collect(),
                batch_var: unbiased.iter().map(|&v| T::of(v)).collect(),
            });
            (mean.iter().map(|&m| T::of(m)).collect::<Vec<T>>(), biased.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect::<Vec<T>>())
        } else {
            if !state.initialized {
                return Err(Error::State("batch norm in eval mode has no running statistics".into()));
            }
            (state.running_mean.clone(), state.running_var.iter().map(|&v| T::of(1.0 / (v.as_f64() + eps).sqrt())).collect())
        };
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = Vec::with_capacity(n * c);
        for row in self.value(x).chunks_exact(c) {
            for ch in 0..c {
                out.push((row[ch] - mean[ch]) * inv_std[ch] * g[ch] + b[ch]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let batch_stats = self.training;
        self.push(shape, out, Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats }, rg)
    }

    /// Layer normalization over the last axis (epsilon 1e-5).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layernorm", format!("input {shape:?} vs affine {:?}", self.shape(gamma))));
        }
        let rows = numel(&shape) / d;
        let mut mean = Vec::with_capacity(rows);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        let (g, b) = (self.value(gamma), self.value(beta));
        for row in self.value(x).chunks_exact(d) {
            let m = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / d as f64;
            let (m, is) = (T::of(m), T::of(1.0 / (var + BN_EPS).sqrt()));
            for ch in 0..d {
                out.push((row[ch] - m) * is * g[ch] + b[ch]);
            }
            mean.push(m);
            inv_std.push(is);
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(shape, out, Op::LayerNorm { x, gamma, beta, mean, inv_std }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean token cross-entropy of `logits[.., classes]` against `targets`,
    /// skipping positions whose target equals `pad`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let classes = *shape.last().unwrap();
        let rows = numel(&shape) / classes;
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", format!("{rows} logit rows vs {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::dim("cross_entropy", format!("target {bad} out of range for {classes} classes")));
        }
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(Error::Usage("every target position is padding".into()));
        }
        let mut total = 0f64;
        for (row, &t) in self.value(logits).chunks_exact(classes).zip(targets) {
            if t == pad {
                continue;
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v)).as_f64();
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[t].as_f64();
        }
        let loss = T::of(total / count as f64);
        let rg = self.rg(&[logits]);
        self.push(vec![1], vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), pad, count, classes }, rg)
    }

    // ---- convolution and pooling ------------------------------------------

    /// "Same"-padded 2-D cross-correlation over NHWC input with an
    /// `[k, k, c_in, c_out]` kernel, optional bias and optional fused relu.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, relu: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::dim("conv2d", format!("input {xs:?} and kernel {ks:?} must both be rank 4")));
        }
        if ks[0].is_multiple_of(2) || ks[1].is_multiple_of(2) {
            return Err(Error::dim("conv2d", format!("kernel {ks:?} must have odd spatial size")));
        }
        if xs[3] != ks[2] {
            return Err(Error::dim("conv2d", format!("input has {} channels, kernel expects {}", xs[3], ks[2])));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[3]] {
                return Err(Error::dim("conv2d", format!("bias {:?} vs {} output channels", self.shape(b), ks[3])));
            }
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let geom = ConvGeom { n: xs[0], h: xs[1], w: xs[2], cin: xs[3], cout: ks[3], kh: ks[0], kw: ks[1], stride };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = vec![T::zero(); geom.n * oh * ow * geom.cout];
        let bias_v = bias.map(|b| self.value(b));
        if geom.kh == 1 && geom.kw == 1 && stride == 1 {
            if let Some(bv) = bias_v {
                for o in out.chunks_exact_mut(geom.cout) {
                    o.copy_from_slice(bv);
                }
            }
            kernels::gemm_acc(self.value(x), self.value(kernel), &mut out, geom.n * geom.h * geom.w, geom.cin, geom.cout);
            if relu {
                out.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
        } else {
            kernels::conv2d_forward(&geom, self.value(x), self.value(kernel), bias_v, &mut out, relu);
        }
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        let rg = self.rg(&parents);
        self.push(vec![geom.n, oh, ow, geom.cout], out, Op::Conv { x, k: kernel, bias, geom, relu }, rg)
    }

    /// 2×2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::dim("avg_pool", format!("need NHWC with even spatial dims, got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let v = self.value(x);
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); n * oh * ow * c];
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    let o = ((b * oh + y) * ow + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ch in 0..c {
                            out[o + ch] = out[o + ch] + v[i + ch];
                        }
                    }
                    out[o..o + c].iter_mut().for_each(|v| *v = *v * quarter);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![n, oh, ow, c], out, Op::AvgPool2 { x, n, h, w, c }, rg)
    }

    /// Pads odd spatial dims to even by replicating the last row/column.
    pub fn pad_to_even(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("pad", format!("need NHWC, got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h % 2 == 0 && w % 2 == 0 {
            return Ok(x);
        }
        let (oh, ow) = (h + h % 2, w + w % 2);
        let v = self.value(x);
        let mut out = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = ((b * h + y.min(h - 1)) * w + xx.min(w - 1)) * c;
                    out.extend_from_slice(&v[i..i + c]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![n, oh, ow, c], out, Op::PadEven { x, n, h, w, c }, rg)
    }

    /// 3×3 max pooling, stride 2, padding 1.
    pub fn max_pool3(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("max_pool", format!("need NHWC, got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let v = self.value(x);
        let mut out = vec![T::neg_infinity(); n * oh * ow * c];
        let mut argmax = vec![0usize; n * oh * ow * c];
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    let o = ((b * oh + y) * ow + xx) * c;
                    for ky in 0..3 {
                        let iy = (2 * y + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (2 * xx + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = ((b * h + iy as usize) * w + ix as usize) * c;
                            for ch in 0..c {
                                if v[i + ch] > out[o + ch] {
                                    out[o + ch] = v[i + ch];
                                    argmax[o + ch] = i + ch;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![n, oh, ow, c], out, Op::MaxPool { x, argmax }, rg)
    }

    /// Gathers rows of `table[V, d]`; output shape is `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || numel(lead) != ids.len() {
            return Err(Error::dim("embedding", format!("table {ts:?}, {} ids for lead {lead:?}", ids.len())));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocab(format!("token id {bad} outside vocabulary of size {v}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        self.push(shape, out, Op::Embedding { table, ids: ids.to_vec(), dim: d }, rg)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            match self.nodes[i].grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => self.nodes[i].grad = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &[T] { &nodes[v.0].data };
        // Gradient buffer of a parent, created on first use; None when the
        // parent does not need gradient.
        fn slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].data.len();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
        }
        let out = &nodes[i].data;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n, b_shared, trans_b } => {
                let (av, bv) = (val(a), val(b));
                if let Some(ga) = slot(nodes, grads, a) {
                    for bi in 0..batch {
                        let gi = &g[bi * m * n..(bi + 1) * m * n];
                        let bmat = if b_shared { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
                        let gai = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            kernels::gemm_acc(gi, bmat, gai, m, n, k);
                        } else {
                            kernels::gemm_nt_acc(gi, bmat, gai, m, n, k);
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    if b_shared && !trans_b {
                        kernels::gemm_tn_acc(av, g, gb, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            let gi = &g[bi * m * n..(bi + 1) * m * n];
                            let ai = &av[bi * m * k..(bi + 1) * m * k];
                            let gbi = if b_shared { &mut gb[..] } else { &mut gb[bi * k * n..(bi + 1) * k * n] };
                            if trans_b {
                                kernels::gemm_tn_acc(gi, ai, gbi, m, n, k);
                            } else {
                                kernels::gemm_tn_acc(ai, gi, gbi, m, k, n);
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = slot(nodes, grads, v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a).to_vec(), val(b).to_vec());
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(&bv) {
                        *d = *d + s * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(&av) {
                        *d = *d + s * x;
                    }
                }
            }
            &Op::AddTrailing(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    let nb = gb.len();
                    for chunk in g.chunks_exact(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s * c);
                }
            }
            &Op::Relu(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(out.iter()) {
                        if y > T::zero() {
                            *d = *d + s;
                        }
                    }
                }
            }
            &Op::Tanh(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(out.iter()) {
                        *d = *d + s * (T::one() - y * y);
                    }
                }
            }
            &Op::Softmax { a, outer, len, inner } => {
                if let Some(ga) = slot(nodes, grads, a) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * len * inner + j;
                            let mut s = T::zero();
                            for l in 0..len {
                                let idx = base + l * inner;
                                s = s + g[idx] * out[idx];
                            }
                            for l in 0..len {
                                let idx = base + l * inner;
                                ga[idx] = ga[idx] + out[idx] * (g[idx] - s);
                            }
                        }
                    }
                }
            }
            Op::MaskedFill { a, keep } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &s), &k) in ga.iter_mut().zip(g).zip(keep.iter()) {
                        if k {
                            *d = *d + s;
                        }
                    }
                }
            }
            &Op::Conv { x, k, bias, geom, relu } => {
                let masked: Vec<T>;
                let gy: &[T] = if relu {
                    masked = g.iter().zip(out.iter()).map(|(&s, &y)| if y > T::zero() { s } else { T::zero() }).collect();
                    &masked
                } else {
                    g
                };
                if let Some(b) = bias {
                    if let Some(gb) = slot(nodes, grads, b) {
                        for row in gy.chunks_exact(geom.cout) {
                            gb.iter_mut().zip(row).for_each(|(d, &s)| *d = *d + s);
                        }
                    }
                }
                let (xv, kv) = (val(x), val(k));
                let pointwise = geom.kh == 1 && geom.kw == 1 && geom.stride == 1;
                let rows = geom.n * geom.h * geom.w;
                // x and k are distinct nodes, so the two slots never alias;
                // take them one at a time to satisfy the borrow checker.
                let mut gx_buf = slot(nodes, grads, x).map(std::mem::take);
                {
                    let gk = slot(nodes, grads, k);
                    if pointwise {
                        if let Some(gx) = gx_buf.as_deref_mut() {
                            kernels::gemm_nt_acc(gy, kv, gx, rows, geom.cout, geom.cin);
                        }
                        if let Some(gk) = gk {
                            kernels::gemm_tn_acc(xv, gy, gk, rows, geom.cin, geom.cout);
                        }
                    } else {
                        kernels::conv2d_backward(&geom, xv, kv, gy, gx_buf.as_deref_mut(), gk.map(|v| v.as_mut_slice()));
                    }
                }
                if let Some(buf) = gx_buf {
                    grads[x.0] = Some(buf);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = mean.len();
                let xv = val(x);
                let gv = val(gamma);
                let rows = xv.len() / c;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (row, grow) in xv.chunks_exact(c).zip(g.chunks_exact(c)) {
                    for ch in 0..c {
                        let xh = (row[ch] - mean[ch]) * inv_std[ch];
                        sum_g[ch] = sum_g[ch] + grow[ch];
                        sum_gx[ch] = sum_gx[ch] + grow[ch] * xh;
                    }
                }
                if let Some(gb) = slot(nodes, grads, beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d = *d + s);
                }
                if let Some(gg) = slot(nodes, grads, gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d = *d + s);
                }
                if let Some(gx) = slot(nodes, grads, x) {
                    let nf = T::of(rows as f64);
                    for ((row, grow), gxr) in xv.chunks_exact(c).zip(g.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                        for ch in 0..c {
                            let scale = gv[ch] * inv_std[ch];
                            if *batch_stats {
                                let xh = (row[ch] - mean[ch]) * inv_std[ch];
                                gxr[ch] = gxr[ch] + scale * (grow[ch] - sum_g[ch] / nf - xh * sum_gx[ch] / nf);
                            } else {
                                gxr[ch] = gxr[ch] + scale * grow[ch];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xv = val(x);
                let gv = val(gamma);
                let d = gv.len();
                let df = T::of(d as f64);
                if let Some(gb) = slot(nodes, grads, beta) {
                    for grow in g.chunks_exact(d) {
                        gb.iter_mut().zip(grow).for_each(|(a, &s)| *a = *a + s);
                    }
                }
                if let Some(gg) = slot(nodes, grads, gamma) {
                    for (r, (row, grow)) in xv.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                        for ch in 0..d {
                            gg[ch] = gg[ch] + grow[ch] * (row[ch] - mean[r]) * inv_std[r];
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, x) {
                    for (r, ((row, grow), gxr)) in xv.chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for ch in 0..d {
                            let gh = grow[ch] * gv[ch];
                            let xh = (row[ch] - mean[r]) * inv_std[r];
                            s1 = s1 + gh;
                            s2 = s2 + gh * xh;
                        }
                        for ch in 0..d {
                            let gh = grow[ch] * gv[ch];
                            let xh = (row[ch] - mean[r]) * inv_std[r];
                            gxr[ch] = gxr[ch] + inv_std[r] * (gh - s1 / df - xh * s2 / df);
                        }
                    }
                }
            }
            &Op::Cumsum { a, outer, len, inner } => {
                if let Some(ga) = slot(nodes, grads, a) {
                    // d out[t] / d a[s] = 1 for s < t, so ga[s] = sum_{t > s} g[t].
                    let mut run = vec![T::zero(); inner];
                    for o in 0..outer {
                        run.iter_mut().for_each(|r| *r = T::zero());
                        let base = o * len * inner;
                        for s in (0..len).rev() {
                            let dst = &mut ga[base + s * inner..base + (s + 1) * inner];
                            for (d, &r) in dst.iter_mut().zip(&run) {
                                *d = *d + r;
                            }
                            let src = &g[base + s * inner..base + (s + 1) * inner];
                            run.iter_mut().zip(src).for_each(|(r, &v)| *r = *r + v);
                        }
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    if let Some(gp) = slot(nodes, grads, p) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
            }
            Op::Permute { a, perm } => {
                let src_shape = &nodes[a.0].shape;
                let out_shape = &nodes[i].shape;
                let mut inv = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                let back = permute_data(g, out_shape, &inv);
                debug_assert_eq!(back.len(), numel(src_shape));
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(&back).for_each(|(d, &s)| *d = *d + s);
                }
            }
            Op::Dropout { a, scale } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &s), &k) in ga.iter_mut().zip(g).zip(scale) {
                        *d = *d + s * k;
                    }
                }
            }
            Op::Embedding { table, ids, dim } => {
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * dim..(id + 1) * dim];
                        dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            &Op::AvgPool2 { x, n, h, w, c } => {
                if let Some(gx) = slot(nodes, grads, x) {
                    let (oh, ow) = (h / 2, w / 2);
                    let q = T::of(0.25);
                    for b in 0..n {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let o = ((b * oh + y) * ow + xx) * c;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let ii = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                                    for ch in 0..c {
                                        gx[ii + ch] = gx[ii + ch] + g[o + ch] * q;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            &Op::PadEven { x, n, h, w, c } => {
                if let Some(gx) = slot(nodes, grads, x) {
                    let (oh, ow) = (h + h % 2, w + w % 2);
                    for b in 0..n {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let o = ((b * oh + y) * ow + xx) * c;
                                let ii = ((b * h + y.min(h - 1)) * w + xx.min(w - 1)) * c;
                                for ch in 0..c {
                                    gx[ii + ch] = gx[ii + ch] + g[o + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (&src, &s) in argmax.iter().zip(g) {
                        gx[src] = gx[src] + s;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, pad, count, classes } => {
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let lv = &nodes[logits.0].data;
                    let scale = g[0].as_f64() / *count as f64;
                    for ((row, grow), &t) in lv.chunks_exact(*classes).zip(gl.chunks_exact_mut(*classes)).zip(targets) {
                        if t == *pad {
                            continue;
                        }
                        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v)).as_f64();
                        let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
                        for (c, (gv, &v)) in grow.iter_mut().zip(row).enumerate() {
                            let p = (v.as_f64() - max).exp() / z;
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            *gv = *gv + T::of(scale * (p - onehot));
                        }
                    }
                }
            }
            &Op::SumAll(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
        }
    }
}

/// Reorders row-major data of shape `src` so axis `k` of the result is axis
/// `perm[k]` of the source.
fn permute_data<T: Scalar>(v: &[T], src: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = src.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * src[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n = v.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.extend_from_slice(v);
        return out;
    }
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], out_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&v[base..base + inner_len]);
        } else {
            for j in 0..inner_len {
                out.push(v[base + j * inner_stride]);
            }
        }
        // advance the outer multi-index (all axes except the last)
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            base += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= out_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
