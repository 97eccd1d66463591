//! Recorded computation graph with reverse-mode differentiation.
//!
//! Ops evaluate eagerly and append a node per result. `backward` emits the
//! gradient computation as new tape nodes built from the same primitive set,
//! so gradients are themselves differentiable: calling `backward` on a scalar
//! function of gradient nodes yields second derivatives (double backward).
//! Every primitive's vjp is closed over the primitive set; data-dependent
//! branch masks (ReLU, softmax shifts) enter as constants, which is exactly
//! the almost-everywhere second derivative of those ops.

use std::sync::Arc;

use crate::archspec::ConvGeom;
use crate::error::{Error, Result};

use super::tensor::Tensor;

pub type NodeId = usize;

/// Forward-pass mode; decides how normalization layers behave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fixed odd-extent filter applied per leading index with replicate padding.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilKernel {
    pub extent: Vec<usize>,
    pub taps: Vec<f64>,
}

impl StencilKernel {
    pub fn new(extent: Vec<usize>, taps: Vec<f64>) -> Self {
        assert_eq!(extent.iter().product::<usize>(), taps.len());
        assert!(extent.iter().all(|e| e % 2 == 1), "stencil extents must be odd");
        StencilKernel { extent, taps }
    }

    pub fn rank(&self) -> usize {
        self.extent.len()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Recip(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Reshape(NodeId),
    ReduceSum(NodeId),
    Broadcast(NodeId),
    Conv { x: NodeId, w: NodeId, geom: Arc<ConvGeom> },
    ConvInputGrad { g: NodeId, w: NodeId, geom: Arc<ConvGeom> },
    ConvWeightGrad { x: NodeId, g: NodeId, geom: Arc<ConvGeom> },
    Stencil { x: NodeId, kernel: Arc<StencilKernel> },
    StencilAdjoint { g: NodeId, kernel: Arc<StencilKernel> },
    Subsample { x: NodeId, stride: Vec<usize> },
    UpsampleZero { g: NodeId, stride: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradient handles produced by one `backward` pass: node ids of the gradient
/// tensors, indexed by the differentiated node's id.
pub struct Grads {
    of: Vec<Option<NodeId>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<NodeId> {
        self.of.get(id).copied().flatten()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    pub mode: Mode,
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Tape { nodes: Vec::new(), mode }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value out of {op:?}");
        self.nodes.push(Node { op, value, requires_grad });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Differentiable input (parameter or network input).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Add(a, b), v, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Sub(a, b), v, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Mul(a, b), v, rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        let rg = self.requires(a);
        self.push(Op::Neg(a), v, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| c * x);
        let rg = self.requires(a);
        self.push(Op::Scale(a, c), v, rg)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / x);
        let rg = self.requires(a);
        self.push(Op::Recip(a), v, rg)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        let rg = self.requires(a);
        self.push(Op::Sqrt(a), v, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let rg = self.requires(a);
        self.push(Op::Exp(a), v, rg)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        let rg = self.requires(a);
        self.push(Op::Log(a), v, rg)
    }

    /// Elementwise max(0, x); the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.requires(a);
        self.push(Op::Relu(a), v, rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(a).reshaped(shape);
        let rg = self.requires(a);
        self.push(Op::Reshape(a), v, rg)
    }

    /// Sum over the masked axes, keeping them as extent-1 dims.
    pub fn reduce_sum(&mut self, a: NodeId, axes: Vec<bool>) -> NodeId {
        let v = reduce_sum_value(self.value(a), &axes);
        let rg = self.requires(a);
        self.push(Op::ReduceSum(a), v, rg)
    }

    /// Sum over every axis down to a single-element tensor of shape `[1]`.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let axes = vec![true; self.value(a).rank()];
        let s = self.reduce_sum(a, axes);
        self.reshape(s, vec![1])
    }

    /// Expands extent-1 axes of `a` to `target` (same rank).
    pub fn broadcast_to(&mut self, a: NodeId, target: Vec<usize>) -> NodeId {
        let v = broadcast_value(self.value(a), &target);
        let rg = self.requires(a);
        self.push(Op::Broadcast(a), v, rg)
    }

    /// Valid/zero-padded convolution per the layer geometry (bias excluded).
    pub fn conv(&mut self, x: NodeId, w: NodeId, geom: Arc<ConvGeom>) -> NodeId {
        let v = conv_value(self.value(x), self.value(w), &geom);
        let rg = self.requires(x) || self.requires(w);
        self.push(Op::Conv { x, w, geom }, v, rg)
    }

    /// Adjoint of `conv` in its input: scatters an output-shaped field back
    /// through the kernel.
    pub fn conv_input_grad(&mut self, g: NodeId, w: NodeId, geom: Arc<ConvGeom>) -> NodeId {
        let v = conv_input_grad_value(self.value(g), self.value(w), &geom);
        let rg = self.requires(g) || self.requires(w);
        self.push(Op::ConvInputGrad { g, w, geom }, v, rg)
    }

    /// Adjoint of `conv` in its weights.
    pub fn conv_weight_grad(&mut self, x: NodeId, g: NodeId, geom: Arc<ConvGeom>) -> NodeId {
        let v = conv_weight_grad_value(self.value(x), self.value(g), &geom);
        let rg = self.requires(x) || self.requires(g);
        self.push(Op::ConvWeightGrad { x, g, geom }, v, rg)
    }

    /// Fixed-kernel filtering over the trailing spatial axes with replicate
    /// padding; applied independently per leading index.
    pub fn stencil(&mut self, x: NodeId, kernel: Arc<StencilKernel>) -> NodeId {
        let v = stencil_value(self.value(x), &kernel, false);
        let rg = self.requires(x);
        self.push(Op::Stencil { x, kernel }, v, rg)
    }

    pub fn stencil_adjoint(&mut self, g: NodeId, kernel: Arc<StencilKernel>) -> NodeId {
        let v = stencil_value(self.value(g), &kernel, true);
        let rg = self.requires(g);
        self.push(Op::StencilAdjoint { g, kernel }, v, rg)
    }

    /// Takes every `stride`-th position along the trailing spatial axes.
    pub fn subsample(&mut self, x: NodeId, stride: Vec<usize>) -> NodeId {
        let v = subsample_value(self.value(x), &stride);
        let rg = self.requires(x);
        self.push(Op::Subsample { x, stride }, v, rg)
    }

    /// Adjoint of `subsample`: zero-fills the skipped positions.
    pub fn upsample_zero(&mut self, g: NodeId, stride: Vec<usize>, out_extent: Vec<usize>) -> NodeId {
        let v = upsample_zero_value(self.value(g), &stride, &out_extent);
        let rg = self.requires(g);
        self.push(Op::UpsampleZero { g, stride }, v, rg)
    }

    /// Dense tensor of the gradient of `id`, zeros when the node is
    /// unreachable from the differentiated output.
    pub fn grad_tensor(&self, grads: &Grads, id: NodeId) -> Tensor {
        match grads.get(id) {
            Some(g) => self.value(g).clone(),
            None => Tensor::zeros(self.value(id).shape().to_vec()),
        }
    }

    /// Reverse pass from a scalar output. Gradient computations are recorded
    /// on the tape, so the returned handles can be differentiated again.
    pub fn backward(&mut self, out: NodeId) -> Result<Grads> {
        if !self.value(out).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let upper = out + 1;
        let mut of: Vec<Option<NodeId>> = vec![None; upper];
        let one_shape = self.value(out).shape().to_vec();
        of[out] = Some(self.constant(Tensor::full(one_shape, 1.0)));

        for id in (0..upper).rev() {
            let Some(g) = of[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut of, a, g);
                    self.accumulate(&mut of, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut of, a, g);
                    let n = self.neg(g);
                    self.accumulate(&mut of, b, n);
                }
                Op::Mul(a, b) => {
                    if self.requires(a) {
                        let ga = self.mul(g, b);
                        self.accumulate(&mut of, a, ga);
                    }
                    if self.requires(b) {
                        let gb = self.mul(g, a);
                        self.accumulate(&mut of, b, gb);
                    }
                }
                Op::Neg(a) => {
                    let n = self.neg(g);
                    self.accumulate(&mut of, a, n);
                }
                Op::Scale(a, c) => {
                    let s = self.scale(g, c);
                    self.accumulate(&mut of, a, s);
                }
                Op::Recip(a) => {
                    // d(1/a) = -1/a^2 = -y^2
                    let y2 = self.mul(id, id);
                    let gy = self.mul(g, y2);
                    let n = self.neg(gy);
                    self.accumulate(&mut of, a, n);
                }
                Op::Sqrt(a) => {
                    // d(sqrt a) = 1/(2 sqrt a)
                    let inv = self.recip(id);
                    let gd = self.mul(g, inv);
                    let h = self.scale(gd, 0.5);
                    self.accumulate(&mut of, a, h);
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, id);
                    self.accumulate(&mut of, a, ga);
                }
                Op::Log(a) => {
                    let inv = self.recip(a);
                    let ga = self.mul(g, inv);
                    self.accumulate(&mut of, a, ga);
                }
                Op::Relu(a) => {
                    // the mask enters as a constant: its derivative is zero
                    // almost everywhere
                    let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let m = self.constant(mask);
                    let ga = self.mul(g, m);
                    self.accumulate(&mut of, a, ga);
                }
                Op::Reshape(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let r = self.reshape(g, shape);
                    self.accumulate(&mut of, a, r);
                }
                Op::ReduceSum(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let b = self.broadcast_to(g, shape);
                    self.accumulate(&mut of, a, b);
                }
                Op::Broadcast(a) => {
                    let in_shape = self.value(a).shape().to_vec();
                    let out_shape = self.value(id).shape().to_vec();
                    let axes: Vec<bool> =
                        in_shape.iter().zip(&out_shape).map(|(&i, &o)| i == 1 && o > 1).collect();
                    let r = self.reduce_sum(g, axes);
                    self.accumulate(&mut of, a, r);
                }
                Op::Conv { x, w, geom } => {
                    if self.requires(x) {
                        let gx = self.conv_input_grad(g, w, geom.clone());
                        self.accumulate(&mut of, x, gx);
                    }
                    if self.requires(w) {
                        let gw = self.conv_weight_grad(x, g, geom);
                        self.accumulate(&mut of, w, gw);
                    }
                }
                Op::ConvInputGrad { g: g0, w, geom } => {
                    if self.requires(g0) {
                        let gg = self.conv(g, w, geom.clone());
                        self.accumulate(&mut of, g0, gg);
                    }
                    if self.requires(w) {
                        let gw = self.conv_weight_grad(g, g0, geom);
                        self.accumulate(&mut of, w, gw);
                    }
                }
                Op::ConvWeightGrad { x, g: g0, geom } => {
                    if self.requires(x) {
                        let gx = self.conv_input_grad(g0, g, geom.clone());
                        self.accumulate(&mut of, x, gx);
                    }
                    if self.requires(g0) {
                        let gg = self.conv(x, g, geom);
                        self.accumulate(&mut of, g0, gg);
                    }
                }
                Op::Stencil { x, kernel } => {
                    let gx = self.stencil_adjoint(g, kernel);
                    self.accumulate(&mut of, x, gx);
                }
                Op::StencilAdjoint { g: g0, kernel } => {
                    let gg = self.stencil(g, kernel);
                    self.accumulate(&mut of, g0, gg);
                }
                Op::Subsample { x, stride } => {
                    let extent = spatial_extent(self.value(x).shape(), stride.len()).to_vec();
                    let gx = self.upsample_zero(g, stride, extent);
                    self.accumulate(&mut of, x, gx);
                }
                Op::UpsampleZero { g: g0, stride, .. } => {
                    let gg = self.subsample(g, stride);
                    self.accumulate(&mut of, g0, gg);
                }
            }
        }
        Ok(Grads { of })
    }

    fn accumulate(&mut self, of: &mut [Option<NodeId>], target: NodeId, contrib: NodeId) {
        if !self.requires(target) {
            return;
        }
        of[target] = Some(match of[target] {
            None => contrib,
            Some(existing) => self.add(existing, contrib),
        });
    }
}

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise ops need identical shapes");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn reduce_sum_value(x: &Tensor, axes: &[bool]) -> Tensor {
    assert_eq!(axes.len(), x.rank());
    let in_shape = x.shape();
    let out_shape: Vec<usize> =
        in_shape.iter().zip(axes).map(|(&e, &m)| if m { 1 } else { e }).collect();
    let mut out = Tensor::zeros(out_shape.clone());
    let mut idx = vec![0usize; in_shape.len()];
    for &v in x.data() {
        let mut o = 0usize;
        for d in 0..in_shape.len() {
            let i = if axes[d] { 0 } else { idx[d] };
            o = o * out_shape[d] + i;
        }
        out.data_mut()[o] += v;
        for d in (0..in_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < in_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn broadcast_value(x: &Tensor, target: &[usize]) -> Tensor {
    let in_shape = x.shape();
    assert_eq!(in_shape.len(), target.len(), "broadcast needs equal rank");
    for (d, (&i, &t)) in in_shape.iter().zip(target).enumerate() {
        assert!(i == t || i == 1, "axis {d}: cannot broadcast {i} to {t}");
    }
    let mut out = Tensor::zeros(target.to_vec());
    let n = out.len();
    let mut idx = vec![0usize; target.len()];
    for o in 0..n {
        let mut src = 0usize;
        for d in 0..target.len() {
            let i = if in_shape[d] == 1 { 0 } else { idx[d] };
            src = src * in_shape[d] + i;
        }
        out.data_mut()[o] = x.data()[src];
        for d in (0..target.len()).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Pads per-dimension geometry vectors out to two spatial dims.
struct Geom2 {
    k: [usize; 2],
    s: [usize; 2],
    d: [usize; 2],
    p: [usize; 2],
    ie: [usize; 2],
    oe: [usize; 2],
    cin: usize,
    cout: usize,
}

fn geom2(g: &ConvGeom) -> Geom2 {
    let pick = |v: &[usize], d: usize, fill: usize| if d < v.len() { v[d] } else { fill };
    Geom2 {
        k: [pick(&g.kernel, 0, 1), pick(&g.kernel, 1, 1)],
        s: [pick(&g.stride, 0, 1), pick(&g.stride, 1, 1)],
        d: [pick(&g.dilation, 0, 1), pick(&g.dilation, 1, 1)],
        p: [pick(&g.padding, 0, 0), pick(&g.padding, 1, 0)],
        ie: [pick(&g.in_extent, 0, 1), pick(&g.in_extent, 1, 1)],
        oe: [pick(&g.out_extent, 0, 1), pick(&g.out_extent, 1, 1)],
        cin: g.in_channels,
        cout: g.out_channels,
    }
}

fn batch_of(x: &Tensor, geom: &ConvGeom) -> usize {
    let expect: usize = geom.in_channels * geom.in_spatial();
    assert_eq!(x.len() % expect, 0, "input length incompatible with conv geometry");
    x.len() / expect
}

fn conv_value(x: &Tensor, w: &Tensor, geom: &ConvGeom) -> Tensor {
    let g = geom2(geom);
    let b = batch_of(x, geom);
    assert_eq!(w.len(), g.cout * g.cin * g.k[0] * g.k[1], "weight length mismatch");
    let mut out_shape = vec![b, g.cout];
    out_shape.extend_from_slice(&geom.out_extent);
    let mut out = Tensor::zeros(out_shape);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for bi in 0..b {
        for co in 0..g.cout {
            for m0 in 0..g.oe[0] {
                for m1 in 0..g.oe[1] {
                    let mut acc = 0.0;
                    for ci in 0..g.cin {
                        for k0 in 0..g.k[0] {
                            let r0 = m0 * g.s[0] + k0 * g.d[0];
                            if r0 < g.p[0] || r0 - g.p[0] >= g.ie[0] {
                                continue;
                            }
                            let i0 = r0 - g.p[0];
                            for k1 in 0..g.k[1] {
                                let r1 = m1 * g.s[1] + k1 * g.d[1];
                                if r1 < g.p[1] || r1 - g.p[1] >= g.ie[1] {
                                    continue;
                                }
                                let i1 = r1 - g.p[1];
                                let xi = ((bi * g.cin + ci) * g.ie[0] + i0) * g.ie[1] + i1;
                                let wi = ((co * g.cin + ci) * g.k[0] + k0) * g.k[1] + k1;
                                acc += xd[xi] * wd[wi];
                            }
                        }
                    }
                    od[((bi * g.cout + co) * g.oe[0] + m0) * g.oe[1] + m1] = acc;
                }
            }
        }
    }
    out
}

fn conv_input_grad_value(gout: &Tensor, w: &Tensor, geom: &ConvGeom) -> Tensor {
    let g = geom2(geom);
    let expect: usize = g.cout * g.oe[0] * g.oe[1];
    assert_eq!(gout.len() % expect, 0);
    let b = gout.len() / expect;
    let mut dx_shape = vec![b, g.cin];
    dx_shape.extend_from_slice(&geom.in_extent);
    let mut dx = Tensor::zeros(dx_shape);
    let gd = gout.data();
    let wd = w.data();
    let dd = dx.data_mut();
    for bi in 0..b {
        for co in 0..g.cout {
            for m0 in 0..g.oe[0] {
                for m1 in 0..g.oe[1] {
                    let gv = gd[((bi * g.cout + co) * g.oe[0] + m0) * g.oe[1] + m1];
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..g.cin {
                        for k0 in 0..g.k[0] {
                            let r0 = m0 * g.s[0] + k0 * g.d[0];
                            if r0 < g.p[0] || r0 - g.p[0] >= g.ie[0] {
                                continue;
                            }
                            let i0 = r0 - g.p[0];
                            for k1 in 0..g.k[1] {
                                let r1 = m1 * g.s[1] + k1 * g.d[1];
                                if r1 < g.p[1] || r1 - g.p[1] >= g.ie[1] {
                                    continue;
                                }
                                let i1 = r1 - g.p[1];
                                let xi = ((bi * g.cin + ci) * g.ie[0] + i0) * g.ie[1] + i1;
                                let wi = ((co * g.cin + ci) * g.k[0] + k0) * g.k[1] + k1;
                                dd[xi] += gv * wd[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_weight_grad_value(x: &Tensor, gout: &Tensor, geom: &ConvGeom) -> Tensor {
    let g = geom2(geom);
    let b = batch_of(x, geom);
    let mut dw_shape = vec![g.cout, g.cin];
    dw_shape.extend(geom.kernel.iter());
    let mut dw = Tensor::zeros(dw_shape);
    let xd = x.data();
    let gd = gout.data();
    let dd = dw.data_mut();
    for bi in 0..b {
        for co in 0..g.cout {
            for m0 in 0..g.oe[0] {
                for m1 in 0..g.oe[1] {
                    let gv = gd[((bi * g.cout + co) * g.oe[0] + m0) * g.oe[1] + m1];
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..g.cin {
                        for k0 in 0..g.k[0] {
                            let r0 = m0 * g.s[0] + k0 * g.d[0];
                            if r0 < g.p[0] || r0 - g.p[0] >= g.ie[0] {
                                continue;
                            }
                            let i0 = r0 - g.p[0];
                            for k1 in 0..g.k[1] {
                                let r1 = m1 * g.s[1] + k1 * g.d[1];
                                if r1 < g.p[1] || r1 - g.p[1] >= g.ie[1] {
                                    continue;
                                }
                                let i1 = r1 - g.p[1];
                                let xi = ((bi * g.cin + ci) * g.ie[0] + i0) * g.ie[1] + i1;
                                let wi = ((co * g.cin + ci) * g.k[0] + k0) * g.k[1] + k1;
                                dd[wi] += gv * xd[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}

fn spatial_extent(shape: &[usize], rank: usize) -> &[usize] {
    &shape[shape.len() - rank..]
}

fn stencil_value(x: &Tensor, kernel: &StencilKernel, adjoint: bool) -> Tensor {
    let rank = kernel.rank();
    assert!(x.rank() >= rank, "stencil rank exceeds tensor rank");
    let sp = spatial_extent(x.shape(), rank);
    let (e0, e1) = if rank == 1 { (sp[0], 1) } else { (sp[0], sp[1]) };
    let (k0, k1) = if rank == 1 { (kernel.extent[0], 1) } else { (kernel.extent[0], kernel.extent[1]) };
    let (c0, c1) = (k0 as isize / 2, k1 as isize / 2);
    let rows = x.len() / (e0 * e1);
    let mut out = Tensor::zeros(x.shape().to_vec());
    let xd = x.data();
    let od = out.data_mut();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for r in 0..rows {
        let base = r * e0 * e1;
        for p0 in 0..e0 {
            for p1 in 0..e1 {
                for o0 in 0..k0 {
                    for o1 in 0..k1 {
                        let t = kernel.taps[o0 * k1 + o1];
                        if t == 0.0 {
                            continue;
                        }
                        let q0 = clamp(p0 as isize + o0 as isize - c0, e0);
                        let q1 = clamp(p1 as isize + o1 as isize - c1, e1);
                        if adjoint {
                            od[base + q0 * e1 + q1] += t * xd[base + p0 * e1 + p1];
                        } else {
                            od[base + p0 * e1 + p1] += t * xd[base + q0 * e1 + q1];
                        }
                    }
                }
            }
        }
    }
    out
}

fn subsample_value(x: &Tensor, stride: &[usize]) -> Tensor {
    let rank = stride.len();
    let sp = spatial_extent(x.shape(), rank);
    let (e0, e1) = if rank == 1 { (sp[0], 1) } else { (sp[0], sp[1]) };
    let (s0, s1) = if rank == 1 { (stride[0], 1) } else { (stride[0], stride[1]) };
    let o0 = (e0 - 1) / s0 + 1;
    let o1 = (e1 - 1) / s1 + 1;
    let rows = x.len() / (e0 * e1);
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - rank] = o0;
    if rank == 2 {
        shape[n - 1] = o1;
    }
    let mut out = Tensor::zeros(shape);
    let xd = x.data();
    let od = out.data_mut();
    for r in 0..rows {
        for p0 in 0..o0 {
            for p1 in 0..o1 {
                od[(r * o0 + p0) * o1 + p1] = xd[(r * e0 + p0 * s0) * e1 + p1 * s1];
            }
        }
    }
    out
}

fn upsample_zero_value(g: &Tensor, stride: &[usize], out_extent: &[usize]) -> Tensor {
    let rank = stride.len();
    let sp = spatial_extent(g.shape(), rank);
    let (i0, i1) = if rank == 1 { (sp[0], 1) } else { (sp[0], sp[1]) };
    let (s0, s1) = if rank == 1 { (stride[0], 1) } else { (stride[0], stride[1]) };
    let (e0, e1) = if rank == 1 { (out_extent[0], 1) } else { (out_extent[0], out_extent[1]) };
    let rows = g.len() / (i0 * i1);
    let mut shape = g.shape().to_vec();
    let n = shape.len();
    shape[n - rank] = e0;
    if rank == 2 {
        shape[n - 1] = e1;
    }
    let mut out = Tensor::zeros(shape);
    let gd = g.data();
    let od = out.data_mut();
    for r in 0..rows {
        for p0 in 0..i0 {
            for p1 in 0..i1 {
                od[(r * e0 + p0 * s0) * e1 + p1 * s1] = gd[(r * i0 + p0) * i1 + p1];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_and_curvature() {
        // f(x) = x^2 at x = 3: f' = 6, f'' = 2
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        let grads = tape.backward(y).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(tape.value(gx).item(), 6.0);
        let grads2 = tape.backward(gx).unwrap();
        let ggx = grads2.get(x).unwrap();
        assert_eq!(tape.value(ggx).item(), 2.0);
    }

    #[test]
    fn relu_values_and_mask() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(tape.value(gx).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn broadcast_reduce_round_trip() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let b = tape.broadcast_to(x, vec![2, 3]);
        assert_eq!(tape.value(b).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = tape.sum_all(b);
        assert_eq!(tape.value(s).item(), 12.0);
        let grads = tape.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(tape.value(gx).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn stencil_constant_field_annihilated() {
        let mut tape = Tape::new(Mode::Eval);
        let kernel = Arc::new(StencilKernel::new(vec![3], vec![1.0, -2.0, 1.0]));
        let x = tape.constant(Tensor::full(vec![7], 5.0));
        let y = tape.stencil(x, kernel);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stencil_adjoint_is_true_adjoint() {
        // <S x, y> == <x, S^T y> for random-ish fields
        let kernel = Arc::new(StencilKernel::new(vec![3, 3], vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]));
        let xs: Vec<f64> = (0..20).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let ys: Vec<f64> = (0..20).map(|i| ((i * 104729) % 11) as f64 - 5.0).collect();
        let x = Tensor::new(vec![4, 5], xs);
        let y = Tensor::new(vec![4, 5], ys);
        let sx = stencil_value(&x, &kernel, false);
        let sty = stencil_value(&y, &kernel, true);
        let lhs: f64 = sx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(sty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn subsample_upsample_adjoint_pair() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(Tensor::new(vec![1, 1, 5], (1..=5).map(f64::from).collect()));
        let y = tape.subsample(x, vec![2]);
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 5.0]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(tape.value(gx).data(), &[1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }
}
