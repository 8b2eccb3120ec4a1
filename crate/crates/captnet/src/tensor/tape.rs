use std::collections::HashMap;
use std::rc::Rc;

use super::data::{Element, TensorData};
use super::kernels::{self, ConvGeom};
use crate::error::{CaptError, Result};

/// Index of a node on one tape. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Stable identifier of a learnable parameter within one model instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub u32);

/// A learnable parameter: id plus at-rest storage. Leased onto a tape per
/// forward pass; mutated only between steps.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub id: ParamId,
    pub value: TensorData<T>,
}

impl<T: Element> Param<T> {
    pub fn new(id: ParamId, value: TensorData<T>) -> Self {
        Param { id, value }
    }
}

/// Walks every parameter of a block or model in a fixed order. `visit` and
/// `visit_mut` must traverse identically; checkpoint load and the optimizer
/// rely on that.
pub trait ParamContainer<T: Element> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.numel());
        n
    }
}

pub(crate) fn qualified(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Value recorded on the tape. Cheap to clone; the buffer is shared.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Rc<[T]>,
    node: NodeId,
}

impl<T: Element> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn to_data(&self) -> TensorData<T> {
        TensorData::new(self.shape.clone(), self.data.to_vec()).expect("tensor shape consistent")
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar(&self) -> T {
        assert_eq!(self.numel(), 1, "scalar() on non-scalar tensor");
        self.data[0]
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    AddBcast { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulBcast { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: T },
    AddScalar { a: NodeId },
    Ln { a: NodeId },
    Recip { a: NodeId },
    MeanAll { a: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: T },
    SoftmaxLast { a: NodeId },
    L2NormLast { a: NodeId, eps: T },
    Bmm { a: NodeId, b: NodeId, batch: usize, m: usize, k: usize, n: usize },
    TransposeLast2 { a: NodeId, batch: usize, m: usize, n: usize },
    Reshape { a: NodeId },
    PixelShuffle { a: NodeId, r: usize },
    PixelUnshuffle { a: NodeId, r: usize },
    Gap { a: NodeId },
    NarrowCh { a: NodeId, start: usize, len: usize },
    ConcatCh { a: NodeId, b: NodeId, ca: usize },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Rc<[T]>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradient of a scalar loss with respect to every tape node that needed one.
pub struct Gradients<T> {
    by_node: Vec<Option<Vec<T>>>,
    leases: HashMap<u32, NodeId>,
}

impl<T: Element> Gradients<T> {
    pub fn by_node(&self, node: NodeId) -> Option<&[T]> {
        self.by_node[node.0].as_deref()
    }

    pub fn for_param(&self, p: &Param<T>) -> Option<&[T]> {
        self.leases.get(&p.id.0).and_then(|&n| self.by_node(n))
    }

    /// Parameters disconnected from the loss get a zero gradient, not an error.
    pub fn param_grad_or_zeros(&self, p: &Param<T>) -> Vec<T> {
        self.for_param(p).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); p.value.numel()])
    }
}

/// Reverse-mode autodiff tape. Records every op during the forward pass;
/// [`Tape::backward`] replays the tape once in reverse.
///
/// Every op validates shapes and rejects non-finite outputs immediately.
/// One tape is single-threaded; build a fresh tape per forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leases: HashMap<u32, NodeId>,
    matmul_macs: u64,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Divisors with magnitude below this are clamped before reciprocation
/// (guards the learnable attention temperature).
pub const RECIP_CLAMP: f64 = 1e-4;

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), leases: HashMap::new(), matmul_macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of every batched matmul recorded so far
    /// (forward passes only).
    pub fn matmul_macs(&self) -> u64 {
        self.matmul_macs
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Tensor<T>> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(CaptError::NonFinite { op: op_name, index });
        }
        let id = NodeId(self.nodes.len());
        let rc: Rc<[T]> = data.into();
        self.nodes.push(Node { shape: shape.clone(), value: rc.clone(), op, needs_grad });
        Ok(Tensor { shape, data: rc, node: id })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn val(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    /// Record a value that does not require gradients (inputs, targets).
    pub fn constant(&mut self, v: &TensorData<T>) -> Result<Tensor<T>> {
        self.push("constant", v.shape().to_vec(), v.as_slice().to_vec(), Op::Leaf, false)
    }

    /// Record a value whose gradient is wanted (gradient-checked inputs).
    pub fn input(&mut self, v: &TensorData<T>) -> Result<Tensor<T>> {
        self.push("input", v.shape().to_vec(), v.as_slice().to_vec(), Op::Leaf, true)
    }

    /// Lease a parameter onto the tape. Idempotent per parameter id: a
    /// second lease returns the original node so gradients accumulate.
    pub fn lease(&mut self, p: &Param<T>) -> Result<Tensor<T>> {
        if let Some(&node) = self.leases.get(&p.id.0) {
            let n = &self.nodes[node.0];
            return Ok(Tensor { shape: n.shape.clone(), data: n.value.clone(), node });
        }
        let t = self.push("lease", p.value.shape().to_vec(), p.value.as_slice().to_vec(), Op::Leaf, true)?;
        self.leases.insert(p.id.0, t.node);
        Ok(t)
    }

    // ----- elementwise -----------------------------------------------------

    /// Elementwise add. `b` may have equal shape or broadcast to `a`'s shape:
    /// shapes are right-aligned and every `b` dim must be 1 or match.
    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_elementwise("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape != b.shape {
            return Err(CaptError::shape("sub", format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x - y).collect();
        let needs = self.needs(a.node) || self.needs(b.node);
        self.push("sub", a.shape.clone(), data, Op::Sub { a: a.node, b: b.node }, needs)
    }

    /// Hadamard product, with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_elementwise("mul", a, b, |x, y| x * y)
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let needs = self.needs(a.node) || self.needs(b.node);
        if a.shape == b.shape {
            let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
            let op = match op_name {
                "add" => Op::Add { a: a.node, b: b.node },
                _ => Op::Mul { a: a.node, b: b.node },
            };
            return self.push(op_name, a.shape.clone(), data, op, needs);
        }
        let strides = bcast_strides(&a.shape, &b.shape).ok_or_else(|| {
            CaptError::shape(op_name, format!("{:?} not broadcastable to {:?}", b.shape, a.shape))
        })?;
        let mut data = vec![T::zero(); a.numel()];
        for_each_bcast(&a.shape, &strides, |ai, bi| data[ai] = f(a.data[ai], b.data[bi]));
        let op = match op_name {
            "add" => Op::AddBcast { a: a.node, b: b.node },
            _ => Op::MulBcast { a: a.node, b: b.node },
        };
        self.push(op_name, a.shape.clone(), data, op, needs)
    }

    /// Multiply by a compile-time constant (not a learnable scalar).
    pub fn scale(&mut self, a: &Tensor<T>, c: f64) -> Result<Tensor<T>> {
        let c = T::from_f64(c);
        let data = a.data.iter().map(|&x| x * c).collect();
        let needs = self.needs(a.node);
        self.push("scale", a.shape.clone(), data, Op::Scale { a: a.node, c }, needs)
    }

    pub fn add_scalar(&mut self, a: &Tensor<T>, c: f64) -> Result<Tensor<T>> {
        let c = T::from_f64(c);
        let data = a.data.iter().map(|&x| x + c).collect();
        let needs = self.needs(a.node);
        self.push("add_scalar", a.shape.clone(), data, Op::AddScalar { a: a.node }, needs)
    }

    pub fn ln(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let data = a.data.iter().map(|&x| x.ln()).collect();
        let needs = self.needs(a.node);
        self.push("ln", a.shape.clone(), data, Op::Ln { a: a.node }, needs)
    }

    /// Elementwise reciprocal with the divisor clamped to |x| >= RECIP_CLAMP.
    pub fn recip(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let data = a.data.iter().map(|&x| T::one() / clamp_divisor(x)).collect();
        let needs = self.needs(a.node);
        self.push("recip", a.shape.clone(), data, Op::Recip { a: a.node }, needs)
    }

    /// Mean over all elements, producing a `[1]` tensor.
    pub fn mean_all(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let inv = T::from_f64(1.0 / a.numel() as f64);
        let mut acc = T::zero();
        for &v in a.data.iter() {
            acc += v;
        }
        let needs = self.needs(a.node);
        self.push("mean_all", vec![1], vec![acc * inv], Op::MeanAll { a: a.node }, needs)
    }

    // ----- convolution & normalization -------------------------------------

    /// 2-D convolution, stride 1. `kernel` 1 (pointwise, no padding) or 3
    /// (zero padding 1, "same" output). `groups` is 1 (dense) or `Cin`
    /// (depthwise, requires Cout == Cin). Weight `[Cout, Cin/groups, k, k]`,
    /// bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: &Tensor<T>,
        kernel: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        let [n, cin, h, wd] = dims4(x, "conv2d")?;
        if kernel != 1 && kernel != 3 {
            return Err(CaptError::invalid("conv2d", format!("kernel {kernel} not in {{1, 3}}")));
        }
        if groups != 1 && groups != cin {
            return Err(CaptError::invalid("conv2d", format!("groups {groups} not in {{1, Cin={cin}}}")));
        }
        if kernel == 1 && groups != 1 {
            return Err(CaptError::invalid("conv2d", "1x1 convolution must be pointwise (groups=1)"));
        }
        if w.shape.len() != 4 || w.shape[1] != cin / groups || w.shape[2] != kernel || w.shape[3] != kernel {
            return Err(CaptError::shape(
                "conv2d",
                format!("weight {:?} inconsistent with Cin={cin}, groups={groups}, k={kernel}", w.shape),
            ));
        }
        let cout = w.shape[0];
        if groups == cin && cin > 1 && cout != cin {
            return Err(CaptError::shape("conv2d", format!("depthwise needs Cout == Cin, got {cout} vs {cin}")));
        }
        if cout % groups != 0 {
            return Err(CaptError::shape("conv2d", format!("Cout {cout} not divisible by groups {groups}")));
        }
        if b.shape != [cout] {
            return Err(CaptError::shape("conv2d", format!("bias {:?}, expected [{cout}]", b.shape)));
        }
        let geom = ConvGeom { n, cin, cout, h, w: wd, kernel, groups };
        let mut out = vec![T::zero(); n * cout * h * wd];
        kernels::conv2d_fwd(&x.data, &w.data, &b.data, geom, &mut out);
        let needs = self.needs(x.node) || self.needs(w.node) || self.needs(b.node);
        self.push(
            "conv2d",
            vec![n, cout, h, wd],
            out,
            Op::Conv2d { x: x.node, w: w.node, b: b.node, geom },
            needs,
        )
    }

    /// Layer normalization over the channel axis, independently per spatial
    /// position, with learnable per-channel affine parameters.
    pub fn layer_norm(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        let [n, c, h, w] = dims4(x, "layer_norm")?;
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(CaptError::shape(
                "layer_norm",
                format!("affine {:?}/{:?}, expected [{c}]", gamma.shape, beta.shape),
            ));
        }
        let eps = T::from_f64(eps);
        let plane = h * w;
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut out = vec![T::zero(); x.numel()];
        for ni in 0..n {
            for p in 0..plane {
                let base = ni * c * plane + p;
                let mut mean = T::zero();
                for ci in 0..c {
                    mean += x.data[base + ci * plane];
                }
                mean = mean * inv_c;
                let mut var = T::zero();
                for ci in 0..c {
                    let d = x.data[base + ci * plane] - mean;
                    var += d * d;
                }
                var = var * inv_c;
                let inv_std = T::one() / (var + eps).sqrt();
                for ci in 0..c {
                    let xhat = (x.data[base + ci * plane] - mean) * inv_std;
                    out[base + ci * plane] = gamma.data[ci] * xhat + beta.data[ci];
                }
            }
        }
        let needs = self.needs(x.node) || self.needs(gamma.node) || self.needs(beta.node);
        self.push(
            "layer_norm",
            x.shape.clone(),
            out,
            Op::LayerNorm { x: x.node, gamma: gamma.node, beta: beta.node, eps },
            needs,
        )
    }

    /// Numerically stabilized softmax along the final axis.
    pub fn softmax_lastdim(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let l = *a.shape.last().ok_or_else(|| CaptError::invalid("softmax_lastdim", "rank-0 tensor"))?;
        let mut out = vec![T::zero(); a.numel()];
        for (row, orow) in a.data.chunks_exact(l).zip(out.chunks_exact_mut(l)) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum += *o;
            }
            let inv = T::one() / sum;
            for o in orow.iter_mut() {
                *o = *o * inv;
            }
        }
        let needs = self.needs(a.node);
        self.push("softmax_lastdim", a.shape.clone(), out, Op::SoftmaxLast { a: a.node }, needs)
    }

    /// L2 normalization along the final axis: x / sqrt(sum(x^2) + eps).
    pub fn l2_normalize_lastdim(&mut self, a: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let l = *a.shape.last().ok_or_else(|| CaptError::invalid("l2_normalize_lastdim", "rank-0 tensor"))?;
        let eps = T::from_f64(eps);
        let mut out = vec![T::zero(); a.numel()];
        for (row, orow) in a.data.chunks_exact(l).zip(out.chunks_exact_mut(l)) {
            let mut sq = T::zero();
            for &v in row {
                sq += v * v;
            }
            let inv = T::one() / (sq + eps).sqrt();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = v * inv;
            }
        }
        let needs = self.needs(a.node);
        self.push("l2_normalize_lastdim", a.shape.clone(), out, Op::L2NormLast { a: a.node, eps }, needs)
    }

    // ----- shape & structure ------------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    /// Leading dims must match exactly. Counts forward MACs.
    pub fn batched_matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape.len() < 2 || b.shape.len() != a.shape.len() {
            return Err(CaptError::shape("batched_matmul", format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        let ra = a.shape.len();
        let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
        let (kb, n) = (b.shape[ra - 2], b.shape[ra - 1]);
        if k != kb || a.shape[..ra - 2] != b.shape[..ra - 2] {
            return Err(CaptError::shape("batched_matmul", format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        let batch: usize = a.shape[..ra - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let macs = kernels::bmm_accum(&a.data, &b.data, &mut out, batch, m, k, n);
        self.matmul_macs += macs;
        let mut shape = a.shape[..ra - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let needs = self.needs(a.node) || self.needs(b.node);
        self.push("batched_matmul", shape, out, Op::Bmm { a: a.node, b: b.node, batch, m, k, n }, needs)
    }

    pub fn transpose_last2(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape.len() < 2 {
            return Err(CaptError::shape("transpose_last2", format!("rank {} < 2", a.shape.len())));
        }
        let ra = a.shape.len();
        let (m, n) = (a.shape[ra - 2], a.shape[ra - 1]);
        let batch: usize = a.shape[..ra - 2].iter().product();
        let mut out = vec![T::zero(); a.numel()];
        kernels::transpose_last2(&a.data, &mut out, batch, m, n);
        let mut shape = a.shape.clone();
        shape[ra - 2] = n;
        shape[ra - 1] = m;
        let needs = self.needs(a.node);
        self.push("transpose_last2", shape, out, Op::TransposeLast2 { a: a.node, batch, m, n }, needs)
    }

    pub fn reshape(&mut self, a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != a.numel() {
            return Err(CaptError::shape("reshape", format!("{:?} -> {:?}", a.shape, shape)));
        }
        let needs = self.needs(a.node);
        self.push("reshape", shape.to_vec(), a.data.to_vec(), Op::Reshape { a: a.node }, needs)
    }

    /// Space-to-channel: `[N, C, H, W] -> [N, C r^2, H/r, W/r]`. The r x r
    /// sub-grid unrolls row-major into the fastest-varying channel index.
    pub fn pixel_unshuffle(&mut self, a: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
        let [n, c, h, w] = dims4(a, "pixel_unshuffle")?;
        if h % r != 0 || w % r != 0 {
            return Err(CaptError::invalid("pixel_unshuffle", format!("H={h}, W={w} not divisible by r={r}")));
        }
        let mut out = vec![T::zero(); a.numel()];
        kernels::pixel_unshuffle(&a.data, &mut out, n, c, h, w, r);
        let needs = self.needs(a.node);
        self.push(
            "pixel_unshuffle",
            vec![n, c * r * r, h / r, w / r],
            out,
            Op::PixelUnshuffle { a: a.node, r },
            needs,
        )
    }

    /// Channel-to-space, the exact inverse of [`Tape::pixel_unshuffle`].
    pub fn pixel_shuffle(&mut self, a: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
        let [n, c, h, w] = dims4(a, "pixel_shuffle")?;
        if c % (r * r) != 0 {
            return Err(CaptError::invalid("pixel_shuffle", format!("C={c} not divisible by r^2={}", r * r)));
        }
        let mut out = vec![T::zero(); a.numel()];
        kernels::pixel_shuffle(&a.data, &mut out, n, c, h, w, r);
        let needs = self.needs(a.node);
        self.push(
            "pixel_shuffle",
            vec![n, c / (r * r), h * r, w * r],
            out,
            Op::PixelShuffle { a: a.node, r },
            needs,
        )
    }

    /// Per-channel spatial mean: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = dims4(a, "global_avg_pool")?;
        let plane = h * w;
        let inv = T::from_f64(1.0 / plane as f64);
        let mut out = vec![T::zero(); n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for &v in &a.data[i * plane..(i + 1) * plane] {
                acc += v;
            }
            *o = acc * inv;
        }
        let needs = self.needs(a.node);
        self.push("global_avg_pool", vec![n, c, 1, 1], out, Op::Gap { a: a.node }, needs)
    }

    /// Split along the channel axis into two equal halves, order preserved.
    pub fn chunk2(&mut self, a: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let [_, c, _, _] = dims4(a, "chunk2")?;
        if c % 2 != 0 {
            return Err(CaptError::invalid("chunk2", format!("odd channel count {c}")));
        }
        let lo = self.narrow_channels(a, 0, c / 2)?;
        let hi = self.narrow_channels(a, c / 2, c / 2)?;
        Ok((lo, hi))
    }

    pub fn narrow_channels(&mut self, a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let [n, c, h, w] = dims4(a, "narrow_channels")?;
        if start + len > c {
            return Err(CaptError::invalid("narrow_channels", format!("{start}+{len} > C={c}")));
        }
        let plane = h * w;
        let mut out = vec![T::zero(); n * len * plane];
        for ni in 0..n {
            let src = &a.data[(ni * c + start) * plane..(ni * c + start + len) * plane];
            out[ni * len * plane..(ni + 1) * len * plane].copy_from_slice(src);
        }
        let needs = self.needs(a.node);
        self.push("narrow_channels", vec![n, len, h, w], out, Op::NarrowCh { a: a.node, start, len }, needs)
    }

    pub fn concat_channels(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, ca, h, w] = dims4(a, "concat_channels")?;
        let [nb, cb, hb, wb] = dims4(b, "concat_channels")?;
        if n != nb || h != hb || w != wb {
            return Err(CaptError::shape("concat_channels", format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        let plane = h * w;
        let mut out = vec![T::zero(); (ca + cb) * n * plane];
        for ni in 0..n {
            let dst = &mut out[ni * (ca + cb) * plane..(ni + 1) * (ca + cb) * plane];
            dst[..ca * plane].copy_from_slice(&a.data[ni * ca * plane..(ni + 1) * ca * plane]);
            dst[ca * plane..].copy_from_slice(&b.data[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        let needs = self.needs(a.node) || self.needs(b.node);
        self.push("concat_channels", vec![n, ca + cb, h, w], out, Op::ConcatCh { a: a.node, b: b.node, ca }, needs)
    }

    // ----- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Visits each node once, newest to
    /// oldest, with a fixed accumulation order.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.numel() != 1 {
            return Err(CaptError::invalid("backward", format!("loss has {} elements, need 1", loss.numel())));
        }
        let mut g: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        g[loss.node.0] = Some(vec![T::one()]);
        for id in (0..=loss.node.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let (before, at) = g.split_at_mut(id);
            let Some(gout) = at[0].as_deref() else { continue };
            self.backprop_node(id, gout, before);
        }
        Ok(Gradients { by_node: g, leases: self.leases.clone() })
    }

    fn backprop_node(&self, id: usize, gout: &[T], g: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accum(g, a, |ga| add_assign(ga, gout));
                self.accum(g, b, |gb| add_assign(gb, gout));
            }
            Op::AddBcast { a, b } => {
                self.accum(g, a, |ga| add_assign(ga, gout));
                let ashape = &self.nodes[a.0].shape;
                let strides = bcast_strides(ashape, &self.nodes[b.0].shape).expect("validated");
                self.accum(g, b, |gb| {
                    for_each_bcast(ashape, &strides, |ai, bi| gb[bi] += gout[ai]);
                });
            }
            Op::Sub { a, b } => {
                self.accum(g, a, |ga| add_assign(ga, gout));
                self.accum(g, b, |gb| {
                    for (x, &v) in gb.iter_mut().zip(gout) {
                        *x -= v;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.val(a), self.val(b));
                self.accum(g, a, |ga| mul_add_assign(ga, gout, vb));
                self.accum(g, b, |gb| mul_add_assign(gb, gout, va));
            }
            Op::MulBcast { a, b } => {
                let (va, vb) = (self.val(a), self.val(b));
                let ashape = &self.nodes[a.0].shape;
                let strides = bcast_strides(ashape, &self.nodes[b.0].shape).expect("validated");
                self.accum(g, a, |ga| {
                    for_each_bcast(ashape, &strides, |ai, bi| ga[ai] += gout[ai] * vb[bi]);
                });
                self.accum(g, b, |gb| {
                    for_each_bcast(ashape, &strides, |ai, bi| gb[bi] += gout[ai] * va[ai]);
                });
            }
            Op::Scale { a, c } => {
                self.accum(g, a, |ga| {
                    for (x, &v) in ga.iter_mut().zip(gout) {
                        *x += v * c;
                    }
                });
            }
            Op::AddScalar { a } => {
                self.accum(g, a, |ga| add_assign(ga, gout));
            }
            Op::Ln { a } => {
                let va = self.val(a);
                self.accum(g, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gout[i] / va[i];
                    }
                });
            }
            Op::Recip { a } => {
                let va = self.val(a);
                self.accum(g, a, |ga| {
                    for i in 0..ga.len() {
                        if va[i].abs().to_f64() >= RECIP_CLAMP {
                            ga[i] += -gout[i] / (va[i] * va[i]);
                        }
                    }
                });
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].value.len();
                let inv = T::from_f64(1.0 / n as f64);
                let seed = gout[0] * inv;
                self.accum(g, a, |ga| {
                    for x in ga.iter_mut() {
                        *x += seed;
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (self.val(x), self.val(w));
                if self.needs(x) {
                    let mut gx = vec![T::zero(); vx.len()];
                    kernels::conv2d_bwd_x(gout, vw, geom, &mut gx);
                    self.accum(g, x, |ga| add_assign(ga, &gx));
                }
                if self.needs(w) {
                    let mut gw = vec![T::zero(); vw.len()];
                    kernels::conv2d_bwd_w(gout, vx, geom, &mut gw);
                    self.accum(g, w, |ga| add_assign(ga, &gw));
                }
                if self.needs(b) {
                    let mut gb = vec![T::zero(); geom.cout];
                    kernels::conv2d_bwd_b(gout, geom, &mut gb);
                    self.accum(g, b, |ga| add_assign(ga, &gb));
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.backprop_layer_norm(gout, x, gamma, beta, eps, g);
            }
            Op::SoftmaxLast { a } => {
                let y = &node.value;
                let l = *node.shape.last().unwrap();
                self.accum(g, a, |ga| {
                    for r in 0..ga.len() / l {
                        let (ys, gs) = (&y[r * l..(r + 1) * l], &gout[r * l..(r + 1) * l]);
                        let mut dot = T::zero();
                        for i in 0..l {
                            dot += gs[i] * ys[i];
                        }
                        let row = &mut ga[r * l..(r + 1) * l];
                        for i in 0..l {
                            row[i] += ys[i] * (gs[i] - dot);
                        }
                    }
                });
            }
            Op::L2NormLast { a, eps } => {
                let va = self.val(a);
                let l = *node.shape.last().unwrap();
                self.accum(g, a, |ga| {
                    for r in 0..ga.len() / l {
                        let (xs, gs) = (&va[r * l..(r + 1) * l], &gout[r * l..(r + 1) * l]);
                        let mut sq = T::zero();
                        let mut dot = T::zero();
                        for i in 0..l {
                            sq += xs[i] * xs[i];
                            dot += gs[i] * xs[i];
                        }
                        let rnorm = (sq + eps).sqrt();
                        let inv = T::one() / rnorm;
                        let inv3 = inv * inv * inv;
                        let row = &mut ga[r * l..(r + 1) * l];
                        for i in 0..l {
                            row[i] += gs[i] * inv - xs[i] * dot * inv3;
                        }
                    }
                });
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (va, vb) = (self.val(a), self.val(b));
                if self.needs(a) {
                    // ga += gout (m x n) * vb^T (n x k)
                    let mut vbt = vec![T::zero(); vb.len()];
                    kernels::transpose_last2(vb, &mut vbt, batch, k, n);
                    let mut ga_new = vec![T::zero(); va.len()];
                    kernels::bmm_accum(gout, &vbt, &mut ga_new, batch, m, n, k);
                    self.accum(g, a, |ga| add_assign(ga, &ga_new));
                }
                if self.needs(b) {
                    // gb += va^T (k x m) * gout (m x n)
                    let mut vat = vec![T::zero(); va.len()];
                    kernels::transpose_last2(va, &mut vat, batch, m, k);
                    let mut gb_new = vec![T::zero(); vb.len()];
                    kernels::bmm_accum(&vat, gout, &mut gb_new, batch, k, m, n);
                    self.accum(g, b, |gb| add_assign(gb, &gb_new));
                }
            }
            Op::TransposeLast2 { a, batch, m, n } => {
                // forward transposed (m, n) -> (n, m); transpose the gradient back
                let mut gt = vec![T::zero(); gout.len()];
                kernels::transpose_last2(gout, &mut gt, batch, n, m);
                self.accum(g, a, |ga| add_assign(ga, &gt));
            }
            Op::Reshape { a } => {
                self.accum(g, a, |ga| add_assign(ga, gout));
            }
            Op::PixelShuffle { a, r } => {
                let [n, c, h, w] = out_dims4(&node.shape);
                let mut ga_new = vec![T::zero(); gout.len()];
                kernels::pixel_unshuffle(gout, &mut ga_new, n, c, h, w, r);
                self.accum(g, a, |ga| add_assign(ga, &ga_new));
            }
            Op::PixelUnshuffle { a, r } => {
                let [n, c, h, w] = out_dims4(&node.shape);
                let mut ga_new = vec![T::zero(); gout.len()];
                kernels::pixel_shuffle(gout, &mut ga_new, n, c, h, w, r);
                self.accum(g, a, |ga| add_assign(ga, &ga_new));
            }
            Op::Gap { a } => {
                let ashape = &self.nodes[a.0].shape;
                let plane = ashape[2] * ashape[3];
                let inv = T::from_f64(1.0 / plane as f64);
                self.accum(g, a, |ga| {
                    for (i, chunk) in ga.chunks_exact_mut(plane).enumerate() {
                        let seed = gout[i] * inv;
                        for x in chunk {
                            *x += seed;
                        }
                    }
                });
            }
            Op::NarrowCh { a, start, len } => {
                let ashape = &self.nodes[a.0].shape;
                let (n, c, plane) = (ashape[0], ashape[1], ashape[2] * ashape[3]);
                self.accum(g, a, |ga| {
                    for ni in 0..n {
                        let dst = &mut ga[(ni * c + start) * plane..(ni * c + start + len) * plane];
                        let src = &gout[ni * len * plane..(ni + 1) * len * plane];
                        add_assign(dst, src);
                    }
                });
            }
            Op::ConcatCh { a, b, ca } => {
                let (n, c, plane) = (node.shape[0], node.shape[1], node.shape[2] * node.shape[3]);
                let cb = c - ca;
                self.accum(g, a, |ga| {
                    for ni in 0..n {
                        let src = &gout[ni * c * plane..ni * c * plane + ca * plane];
                        add_assign(&mut ga[ni * ca * plane..(ni + 1) * ca * plane], src);
                    }
                });
                self.accum(g, b, |gb| {
                    for ni in 0..n {
                        let src = &gout[ni * c * plane + ca * plane..(ni + 1) * c * plane];
                        add_assign(&mut gb[ni * cb * plane..(ni + 1) * cb * plane], src);
                    }
                });
            }
        }
    }

    fn backprop_layer_norm(
        &self,
        gout: &[T],
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        g: &mut [Option<Vec<T>>],
    ) {
        let vx = self.val(x);
        let vgamma = self.val(gamma);
        let shape = &self.nodes[x.0].shape;
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let inv_c = T::from_f64(1.0 / c as f64);

        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        let mut gx = vec![T::zero(); vx.len()];
        let needs_x = self.needs(x);

        let mut xhat = vec![T::zero(); c];
        let mut d = vec![T::zero(); c];
        for ni in 0..n {
            for p in 0..plane {
                let base = ni * c * plane + p;
                let mut mean = T::zero();
                for ci in 0..c {
                    mean += vx[base + ci * plane];
                }
                mean = mean * inv_c;
                let mut var = T::zero();
                for ci in 0..c {
                    let dv = vx[base + ci * plane] - mean;
                    var += dv * dv;
                }
                var = var * inv_c;
                let inv_std = T::one() / (var + eps).sqrt();
                let mut mean_d = T::zero();
                let mut mean_dx = T::zero();
                for ci in 0..c {
                    xhat[ci] = (vx[base + ci * plane] - mean) * inv_std;
                    let go = gout[base + ci * plane];
                    ggamma[ci] += go * xhat[ci];
                    gbeta[ci] += go;
                    d[ci] = go * vgamma[ci];
                    mean_d += d[ci];
                    mean_dx += d[ci] * xhat[ci];
                }
                if needs_x {
                    mean_d = mean_d * inv_c;
                    mean_dx = mean_dx * inv_c;
                    for ci in 0..c {
                        gx[base + ci * plane] = inv_std * (d[ci] - mean_d - xhat[ci] * mean_dx);
                    }
                }
            }
        }
        if needs_x {
            self.accum(g, x, |ga| add_assign(ga, &gx));
        }
        self.accum(g, gamma, |ga| add_assign(ga, &ggamma));
        self.accum(g, beta, |ga| add_assign(ga, &gbeta));
    }

    fn accum(&self, g: &mut [Option<Vec<T>>], target: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.needs(target) {
            return;
        }
        let numel = self.nodes[target.0].value.len();
        let slot = g[target.0].get_or_insert_with(|| vec![T::zero(); numel]);
        f(slot);
    }
}

fn add_assign<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn mul_add_assign<T: Element>(dst: &mut [T], a: &[T], b: &[T]) {
    for i in 0..dst.len() {
        dst[i] += a[i] * b[i];
    }
}

fn clamp_divisor<T: Element>(x: T) -> T {
    let clamp = T::from_f64(RECIP_CLAMP);
    if x.abs() >= clamp {
        x
    } else if x < T::zero() {
        -clamp
    } else {
        clamp
    }
}

fn dims4<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    if t.shape.len() != 4 {
        return Err(CaptError::shape(op, format!("expected rank 4, got {:?}", t.shape)));
    }
    Ok([t.shape[0], t.shape[1], t.shape[2], t.shape[3]])
}

fn out_dims4(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

/// Right-aligned broadcast strides of `b` against `a`'s shape, or `None`
/// if a dim of `b` is neither 1 nor equal to `a`'s dim.
fn bcast_strides(ashape: &[usize], bshape: &[usize]) -> Option<Vec<usize>> {
    if bshape.len() > ashape.len() {
        return None;
    }
    let off = ashape.len() - bshape.len();
    let mut strides = vec![0usize; ashape.len()];
    let mut s = 1;
    for d in (0..bshape.len()).rev() {
        if bshape[d] == ashape[off + d] {
            strides[off + d] = s;
        } else if bshape[d] != 1 {
            return None;
        }
        s *= bshape[d];
    }
    Some(strides)
}

/// Calls `f(flat_index_into_a, flat_index_into_b)` for every element of `a`.
fn for_each_bcast(ashape: &[usize], bstrides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = ashape.len();
    let numel: usize = ashape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut bi = 0usize;
    for ai in 0..numel {
        f(ai, bi);
        for d in (0..rank).rev() {
            idx[d] += 1;
            bi += bstrides[d];
            if idx[d] < ashape[d] {
                break;
            }
            idx[d] = 0;
            bi -= bstrides[d] * ashape[d];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor4(tape: &mut Tape<f64>, n: usize, c: usize, h: usize, w: usize, data: &[f64]) -> Tensor<f64> {
        let td = TensorData::new(vec![n, c, h, w], data.to_vec()).unwrap();
        tape.input(&td).unwrap()
    }

    #[test]
    fn add_identity_and_broadcast() {
        let mut tape = Tape::new();
        let x = tensor4(&mut tape, 1, 2, 1, 2, &[1.0, 2.0, 3.0, 4.0]);
        let zeros = tape.constant(&TensorData::zeros(&[1, 2, 1, 2])).unwrap();
        let same = tape.add(&x, &zeros).unwrap();
        assert_eq!(same.data(), x.data());

        let per_chan = tape.constant(&TensorData::new(vec![1, 2, 1, 1], vec![10.0, 20.0]).unwrap()).unwrap();
        let shifted = tape.add(&x, &per_chan).unwrap();
        assert_eq!(shifted.data(), &[11.0, 12.0, 23.0, 24.0]);
    }

    #[test]
    fn mul_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tensor4(&mut tape, 1, 1, 1, 2, &[2.0, 3.0]);
        let b = tensor4(&mut tape, 1, 1, 1, 2, &[4.0, 5.0]);
        let y = tape.mul(&a, &b).unwrap();
        assert_eq!(y.data(), &[8.0, 15.0]);

        let ones = tape.constant(&TensorData::full(&[1, 1, 1, 2], 1.0)).unwrap();
        let same = tape.mul(&a, &ones).unwrap();
        assert_eq!(same.data(), a.data());
    }

    #[test]
    fn non_broadcastable_shapes_error() {
        let mut tape = Tape::<f64>::new();
        let a = tensor4(&mut tape, 1, 2, 2, 2, &[0.0; 8]);
        let b = tensor4(&mut tape, 1, 3, 1, 1, &[0.0; 3]);
        assert!(tape.add(&a, &b).is_err());
    }

    #[test]
    fn softmax_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .input(&TensorData::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let y = tape.softmax_lastdim(&x).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let x = tape
            .input(&TensorData::new(vec![1, 3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap())
            .unwrap();
        let y = tape.softmax_lastdim(&x).unwrap();
        assert!((y.data()[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((y.data()[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((y.data()[2] - 3.0 / 6.0).abs() < 1e-12);

        // stabilization: no overflow on large logits
        let x = tape.input(&TensorData::new(vec![1, 2], vec![1000.0, 0.0]).unwrap()).unwrap();
        let y = tape.softmax_lastdim(&x).unwrap();
        assert!(y.data()[0] > 0.999_999);
        assert!(y.data()[1] < 1e-6);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..24).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let x = tape.input(&TensorData::new(vec![2, 3, 4], vals).unwrap()).unwrap();
        let y = tape.softmax_lastdim(&x).unwrap();
        for row in y.data().chunks_exact(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_examples() {
        // channel vector (1, 3) -> (-1, 1)
        let mut tape = Tape::new();
        let x = tensor4(&mut tape, 1, 2, 1, 1, &[1.0, 3.0]);
        let gamma = tape.input(&TensorData::full(&[2], 1.0)).unwrap();
        let beta = tape.input(&TensorData::zeros(&[2])).unwrap();
        let y = tape.layer_norm(&x, &gamma, &beta, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);

        // constant vector centers to ~0 without dividing by zero
        let x = tensor4(&mut tape, 1, 2, 1, 1, &[5.0, 5.0]);
        let y = tape.layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
        assert!(y.data()[0].abs() < 1e-9 && y.data()[1].abs() < 1e-9);

        // affine: gamma=2, beta=1 on normalized (-1, 1) -> (-1, 3)
        let x = tensor4(&mut tape, 1, 2, 1, 1, &[1.0, 3.0]);
        let gamma2 = tape.input(&TensorData::full(&[2], 2.0)).unwrap();
        let beta1 = tape.input(&TensorData::full(&[2], 1.0)).unwrap();
        let y = tape.layer_norm(&x, &gamma2, &beta1, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_moments() {
        let mut tape = Tape::new();
        let c = 8;
        let vals: Vec<f64> = (0..2 * c * 3 * 3).map(|i| ((i * 131) % 17) as f64 * 0.3 - 2.0).collect();
        let x = tensor4(&mut tape, 2, c, 3, 3, &vals);
        let gamma = tape.input(&TensorData::full(&[c], 1.0)).unwrap();
        let beta = tape.input(&TensorData::zeros(&[c])).unwrap();
        let y = tape.layer_norm(&x, &gamma, &beta, 1e-9).unwrap();
        let plane = 9;
        for ni in 0..2 {
            for p in 0..plane {
                let mut mean = 0.0;
                let mut var = 0.0;
                for ci in 0..c {
                    mean += y.data()[ni * c * plane + ci * plane + p];
                }
                mean /= c as f64;
                for ci in 0..c {
                    let d = y.data()[ni * c * plane + ci * plane + p] - mean;
                    var += d * d;
                }
                var /= c as f64;
                assert!(mean.abs() < 1e-5, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn conv1x1_identity_and_mix() {
        let mut tape = Tape::new();
        // identity over 2 channels
        let x = tensor4(&mut tape, 1, 2, 2, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let w = tape
            .input(&TensorData::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let b = tape.input(&TensorData::zeros(&[2])).unwrap();
        let y = tape.conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.data(), x.data());

        // w = [2, -1] over channels (3, 1) -> 5 everywhere
        let x = tensor4(&mut tape, 1, 2, 2, 2, &[3.0, 3.0, 3.0, 3.0, 1.0, 1.0, 1.0, 1.0]);
        let w = tape.input(&TensorData::new(vec![1, 2, 1, 1], vec![2.0, -1.0]).unwrap()).unwrap();
        let b = tape.input(&TensorData::zeros(&[1])).unwrap();
        let y = tape.conv2d(&x, &w, &b, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn conv3x3_depthwise_box_filter_matches_sliding_window_oracle() {
        let c = 2.5f64;
        let (h, w) = (4, 5);
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&TensorData::full(&[1, 1, h, w], c)).unwrap();
        let kw = tape.input(&TensorData::full(&[1, 1, 3, 3], 1.0 / 9.0)).unwrap();
        let kb = tape.input(&TensorData::zeros(&[1])).unwrap();
        let y = tape.conv2d(&x, &kw, &kb, 3, 1).unwrap();

        // direct sliding-window oracle with zero padding
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let sy = yy as i64 + ky - 1;
                        let sx = xx as i64 + kx - 1;
                        if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                            acc += c / 9.0;
                        }
                    }
                }
                let got = y.data()[yy * w + xx];
                assert!((got - acc).abs() < 1e-12, "at ({yy},{xx}): {got} vs {acc}");
                if yy > 0 && yy < h - 1 && xx > 0 && xx < w - 1 {
                    assert!((got - c).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_bad_groups() {
        let mut tape = Tape::<f64>::new();
        let x = tensor4(&mut tape, 1, 4, 2, 2, &[0.0; 16]);
        let w = tape.input(&TensorData::zeros(&[4, 2, 3, 3])).unwrap();
        let b = tape.input(&TensorData::zeros(&[4])).unwrap();
        assert!(tape.conv2d(&x, &w, &b, 3, 2).is_err());
    }

    #[test]
    fn pixel_resample_round_trip_and_ordering() {
        let mut tape = Tape::new();
        // 1x1x2x2 [[a,b],[c,d]] -> channels (a, b, c, d)
        let x = tensor4(&mut tape, 1, 1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let u = tape.pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(u.shape(), &[1, 4, 1, 1]);
        assert_eq!(u.data(), &[1.0, 2.0, 3.0, 4.0]);

        let back = tape.pixel_shuffle(&u, 2).unwrap();
        assert_eq!(back.data(), x.data());

        // constant image stays constant over derived channels
        let x = tape.input(&TensorData::full(&[1, 3, 4, 4], 0.7)).unwrap();
        let u = tape.pixel_unshuffle(&x, 2).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.7));

        // divisibility violations
        let x = tensor4(&mut tape, 1, 1, 3, 3, &[0.0; 9]);
        assert!(tape.pixel_unshuffle(&x, 2).is_err());
        let x = tensor4(&mut tape, 1, 3, 2, 2, &[0.0; 12]);
        assert!(tape.pixel_shuffle(&x, 2).is_err());
    }

    #[test]
    fn gap_and_chunk() {
        let mut tape = Tape::new();
        let x = tensor4(&mut tape, 1, 1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = tape.global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert!((y.data()[0] - 2.5).abs() < 1e-12);

        let x = tensor4(&mut tape, 1, 4, 1, 1, &[1.0, 2.0, 3.0, 4.0]);
        let (a, b) = tape.chunk2(&x).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(b.data(), &[3.0, 4.0]);
        let cat = tape.concat_channels(&a, &b).unwrap();
        assert_eq!(cat.data(), x.data());

        let odd = tensor4(&mut tape, 1, 3, 1, 1, &[0.0; 3]);
        assert!(tape.chunk2(&odd).is_err());
    }

    #[test]
    fn matmul_hand_cases() {
        let mut tape = Tape::new();
        let i2 = tape.input(&TensorData::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let b = tape.input(&TensorData::new(vec![2, 2], vec![3.0, 1.0, -2.0, 4.0]).unwrap()).unwrap();
        let y = tape.batched_matmul(&i2, &b).unwrap();
        assert_eq!(y.data(), b.data());

        let a = tape.input(&TensorData::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let c = tape.input(&TensorData::new(vec![2, 1], vec![3.0, 4.0]).unwrap()).unwrap();
        let y = tape.batched_matmul(&a, &c).unwrap();
        assert_eq!(y.data(), &[11.0]);

        let bad = tape.input(&TensorData::new(vec![3, 2], vec![0.0; 6]).unwrap()).unwrap();
        assert!(tape.batched_matmul(&a, &bad).is_err());
    }

    #[test]
    fn backward_linear_and_square() {
        let mut tape = Tape::new();
        let x = tape.input(&TensorData::<f64>::vec_from_f64(&[1.0, -2.0, 3.0])).unwrap();
        let mean = tape.mean_all(&x).unwrap();
        let loss = tape.scale(&mean, 3.0).unwrap(); // sum(x)
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.by_node(x.node()).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.input(&TensorData::<f64>::vec_from_f64(&[1.0, -2.0, 3.0])).unwrap();
        let sq = tape.mul(&x, &x).unwrap();
        let mean = tape.mean_all(&sq).unwrap();
        let loss = tape.scale(&mean, 3.0).unwrap(); // sum(x^2)
        let grads = tape.backward(&loss).unwrap();
        let g = grads.by_node(x.node()).unwrap();
        assert_eq!(g, &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.input(&TensorData::<f64>::vec_from_f64(&[1.0, 2.0])).unwrap();
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn disconnected_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let p = Param::new(ParamId(7), TensorData::<f64>::vec_from_f64(&[1.0, 2.0]));
        let _unused = tape.lease(&p).unwrap();
        let x = tape.input(&TensorData::vec_from_f64(&[3.0])).unwrap();
        let loss = tape.mean_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.for_param(&p).is_none());
        assert_eq!(grads.param_grad_or_zeros(&p), vec![0.0, 0.0]);
    }

    #[test]
    fn nan_is_an_error_not_a_value() {
        let mut tape = Tape::new();
        let x = tape.input(&TensorData::<f64>::vec_from_f64(&[-1.0])).unwrap();
        let err = tape.ln(&x);
        assert!(matches!(err, Err(CaptError::NonFinite { .. })));
    }

    #[test]
    fn ops_are_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let vals: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
            let x = tape.input(&TensorData::new(vec![1, 4, 4, 4], vals).unwrap()).unwrap();
            let s = tape.softmax_lastdim(&x).unwrap();
            let g = tape.global_avg_pool(&s).unwrap();
            g.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lease_is_idempotent_and_accumulates() {
        let mut tape = Tape::new();
        let p = Param::new(ParamId(0), TensorData::<f64>::vec_from_f64(&[2.0]));
        let a = tape.lease(&p).unwrap();
        let b = tape.lease(&p).unwrap();
        assert_eq!(a.node(), b.node());
        // loss = p * p; dloss/dp = 2p = 4 (two uses accumulate)
        let prod = tape.mul(&a, &b).unwrap();
        let loss = tape.mean_all(&prod).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.for_param(&p).unwrap(), &[4.0]);
    }
}
