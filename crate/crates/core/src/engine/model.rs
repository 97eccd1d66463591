//! The layer zoo wired onto the tape: conv (rank 1/2), ReLU, BatchNorm in
//! train and eval modes, dense-as-conv, flatten, residual blocks, plus
//! softmax / cross-entropy heads and seeded initialization.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::archspec::{ConvGeom, Lowered, NetworkSpec, ShapeRow};
use crate::error::{Error, Result};

use super::tape::{Mode, NodeId, Tape};
use super::tensor::Tensor;

pub const BN_EPS_DEFAULT: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamRole::Weight,
            "bias" => ParamRole::Bias,
            "gamma" => ParamRole::Gamma,
            "beta" => ParamRole::Beta,
            _ => return None,
        })
    }

    /// BatchNorm trainable parameters are excluded from weight decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::Bias)
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub layer_index: usize,
    pub role: ParamRole,
}

impl Parameter {
    fn new(name: String, value: Tensor, layer_index: usize, role: ParamRole) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter { name, value, grad, layer_index, role }
    }
}

/// Running statistics of one BatchNorm layer.
#[derive(Debug, Clone)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

/// A network instance: spec, resolved pipeline, parameters and BN state.
#[derive(Clone)]
pub struct Model {
    pub spec: NetworkSpec,
    lowered: Arc<Vec<Lowered>>,
    pub params: Vec<Parameter>,
    pub bn_states: Vec<BnState>,
    pub seed: u64,
}

/// Node handles of one recorded forward pass.
pub struct ForwardPass {
    pub output: NodeId,
    pub input: NodeId,
    /// Aligned with `model.params`.
    pub param_nodes: Vec<NodeId>,
}

struct WalkCtx {
    param_cursor: usize,
    bn_cursor: usize,
    param_nodes: Vec<NodeId>,
}

impl Model {
    /// Draws parameters for the spec: weights zero-mean normal with the
    /// scheme's variance, biases zero, gamma one, beta zero. Bit-identical
    /// per seed.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Model> {
        let lowered = spec.lowered()?;
        let variances = spec.layer_variances()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut bn_states = Vec::new();
        let mut conv_idx = 0usize;
        let mut layer_idx = 0usize;
        build_params(&lowered, &variances, &mut rng, &mut params, &mut bn_states, &mut conv_idx, &mut layer_idx);
        Ok(Model { spec: spec.clone(), lowered: Arc::new(lowered), params, bn_states, seed })
    }

    pub fn lowered(&self) -> &[Lowered] {
        &self.lowered
    }

    pub fn output_shape(&self) -> Result<ShapeRow> {
        Ok(crate::archspec::output_shape(&self.spec)?.output().clone())
    }

    /// Number of classes when the network ends in a 1-extent logit vector.
    pub fn num_classes(&self) -> Result<usize> {
        let out = self.output_shape()?;
        if out.extent.iter().any(|&e| e != 1) {
            return Err(Error::Contract(format!(
                "network output {:?} is not a logit vector; end the spec with dense/flatten",
                out
            )));
        }
        Ok(out.channels)
    }

    /// Multiplies every conv/dense weight by `c`.
    pub fn scale_conv_weights(&mut self, c: f64) {
        for p in &mut self.params {
            if p.role == ParamRole::Weight {
                for v in p.value.data_mut() {
                    *v *= c;
                }
            }
        }
    }

    pub fn set_bn_eps(&mut self, eps: f64) {
        for s in &mut self.bn_states {
            s.eps = eps;
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records a forward pass of `input` (shape `[B, C, spatial...]`) on the
    /// tape. Train mode uses batch statistics in BatchNorm and updates the
    /// running estimates; eval mode applies the stored affine transform.
    pub fn forward(&mut self, tape: &mut Tape, input: &Tensor) -> Result<ForwardPass> {
        let in_shape = self.spec.input_shape();
        let expect: Vec<usize> = {
            let mut s = vec![in_shape.channels];
            s.extend_from_slice(&in_shape.extent);
            s
        };
        if input.rank() != expect.len() + 1 || input.shape()[1..] != expect[..] {
            return Err(Error::Dimension(format!(
                "input shape {:?} does not match spec input [B, {:?}]",
                input.shape(),
                expect
            )));
        }
        let x = tape.leaf(input.clone());
        let lowered = self.lowered.clone();
        let mut ctx = WalkCtx { param_cursor: 0, bn_cursor: 0, param_nodes: Vec::new() };
        let out = self.forward_layers(tape, &lowered, x, &mut ctx)?;
        Ok(ForwardPass { output: out, input: x, param_nodes: ctx.param_nodes })
    }

    /// Forward pass ending in a `[B, D]` logit matrix.
    pub fn forward_logits(&mut self, tape: &mut Tape, input: &Tensor) -> Result<ForwardPass> {
        let d = self.num_classes()?;
        let mut pass = self.forward(tape, input)?;
        let b = tape.value(pass.output).shape()[0];
        pass.output = tape.reshape(pass.output, vec![b, d]);
        Ok(pass)
    }

    fn forward_layers(
        &mut self,
        tape: &mut Tape,
        layers: &[Lowered],
        mut x: NodeId,
        ctx: &mut WalkCtx,
    ) -> Result<NodeId> {
        for layer in layers {
            match layer {
                Lowered::Conv(g) => {
                    let geom = Arc::new(g.clone());
                    let w_id = tape.leaf(self.params[ctx.param_cursor].value.clone());
                    ctx.param_nodes.push(w_id);
                    ctx.param_cursor += 1;
                    let mut y = tape.conv(x, w_id, geom);
                    if g.has_bias {
                        let b_id = tape.leaf(self.params[ctx.param_cursor].value.clone());
                        ctx.param_nodes.push(b_id);
                        ctx.param_cursor += 1;
                        let mut bshape = vec![1, g.out_channels];
                        bshape.extend(std::iter::repeat(1).take(g.rank()));
                        let br = tape.reshape(b_id, bshape);
                        let target = tape.value(y).shape().to_vec();
                        let bb = tape.broadcast_to(br, target);
                        y = tape.add(y, bb);
                    }
                    x = y;
                }
                Lowered::Relu => x = tape.relu(x),
                Lowered::BatchNorm { channels } => {
                    let gamma_id = tape.leaf(self.params[ctx.param_cursor].value.clone());
                    let beta_id = tape.leaf(self.params[ctx.param_cursor + 1].value.clone());
                    ctx.param_nodes.push(gamma_id);
                    ctx.param_nodes.push(beta_id);
                    ctx.param_cursor += 2;
                    let bn_idx = ctx.bn_cursor;
                    ctx.bn_cursor += 1;
                    x = self.batchnorm_forward(tape, x, *channels, gamma_id, beta_id, bn_idx)?;
                }
                Lowered::Flatten { to_channels, .. } => {
                    let shape = tape.value(x).shape().to_vec();
                    let rank = shape.len() - 2;
                    let mut target = vec![shape[0], *to_channels];
                    target.extend(std::iter::repeat(1).take(rank));
                    x = tape.reshape(x, target);
                }
                Lowered::Residual { inner, projection_stride, .. } => {
                    let block_in = x;
                    let through = self.forward_layers(tape, inner, x, ctx)?;
                    let skip = if *projection_stride == 1 {
                        block_in
                    } else {
                        let rank = tape.value(block_in).rank() - 2;
                        tape.subsample(block_in, vec![*projection_stride; rank])
                    };
                    x = tape.add(through, skip);
                }
            }
        }
        Ok(x)
    }

    fn batchnorm_forward(
        &mut self,
        tape: &mut Tape,
        x: NodeId,
        channels: usize,
        gamma_id: NodeId,
        beta_id: NodeId,
        bn_idx: usize,
    ) -> Result<NodeId> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() < 2 || shape[1] != channels {
            return Err(Error::Dimension(format!(
                "batchnorm over {channels} channels got input {shape:?}"
            )));
        }
        let mut ch_shape = vec![1usize; shape.len()];
        ch_shape[1] = channels;
        let mut axes = vec![true; shape.len()];
        axes[1] = false;
        let n: usize = shape.iter().product::<usize>() / channels;

        match tape.mode {
            Mode::Train => {
                if n <= 1 {
                    return Err(Error::DegenerateVariance(format!(
                        "batchnorm needs more than one sample per channel, got N={n}"
                    )));
                }
                let sum = tape.reduce_sum(x, axes.clone());
                let mu = tape.scale(sum, 1.0 / n as f64);
                let mu_b = tape.broadcast_to(mu, shape.clone());
                let xc = tape.sub(x, mu_b);
                let sq = tape.mul(xc, xc);
                let ssum = tape.reduce_sum(sq, axes);
                // population variance (divisor N)
                let var = tape.scale(ssum, 1.0 / n as f64);
                let eps = self.bn_states[bn_idx].eps;
                let eps_t = tape.constant(Tensor::full(ch_shape.clone(), eps));
                let var_e = tape.add(var, eps_t);
                let sig = tape.sqrt(var_e);
                let inv = tape.recip(sig);
                let inv_b = tape.broadcast_to(inv, shape.clone());
                let xn = tape.mul(xc, inv_b);
                let g_r = tape.reshape(gamma_id, ch_shape.clone());
                let g_b = tape.broadcast_to(g_r, shape.clone());
                let b_r = tape.reshape(beta_id, ch_shape);
                let b_b = tape.broadcast_to(b_r, shape);
                let scaled = tape.mul(xn, g_b);
                let y = tape.add(scaled, b_b);

                let state = &mut self.bn_states[bn_idx];
                let mu_v = tape.value(mu).data().to_vec();
                let var_v = tape.value(var).data().to_vec();
                for c in 0..channels {
                    state.running_mean[c] = (1.0 - BN_MOMENTUM) * state.running_mean[c] + BN_MOMENTUM * mu_v[c];
                    state.running_var[c] = (1.0 - BN_MOMENTUM) * state.running_var[c] + BN_MOMENTUM * var_v[c];
                }
                Ok(y)
            }
            Mode::Eval => {
                // affine at test time: y = gamma * (x - rm)/sqrt(rv + eps) + beta
                let state = &self.bn_states[bn_idx];
                let inv: Vec<f64> =
                    state.running_var.iter().map(|&v| 1.0 / (v + state.eps).sqrt()).collect();
                let shift: Vec<f64> =
                    state.running_mean.iter().zip(&inv).map(|(&m, &i)| m * i).collect();
                let inv_c = tape.constant(Tensor::new(vec![channels], inv));
                let shift_c = tape.constant(Tensor::new(vec![channels], shift));
                let a = tape.mul(gamma_id, inv_c); // [C]
                let gshift = tape.mul(gamma_id, shift_c);
                let b = tape.sub(beta_id, gshift); // [C]
                let a_r = tape.reshape(a, ch_shape.clone());
                let a_b = tape.broadcast_to(a_r, shape.clone());
                let b_r = tape.reshape(b, ch_shape);
                let b_b = tape.broadcast_to(b_r, shape);
                let ax = tape.mul(x, a_b);
                Ok(tape.add(ax, b_b))
            }
        }
    }

    /// Copies gradient node values into the parameter accumulators
    /// (overwrites). Parameters unreachable from the loss get zeros.
    pub fn absorb_grads(&mut self, tape: &Tape, grads: &super::tape::Grads, pass: &ForwardPass) {
        for (p, &node) in self.params.iter_mut().zip(&pass.param_nodes) {
            p.grad = tape.grad_tensor(grads, node);
        }
    }
}

fn build_params(
    layers: &[Lowered],
    variances: &[f64],
    rng: &mut ChaCha8Rng,
    params: &mut Vec<Parameter>,
    bn_states: &mut Vec<BnState>,
    conv_idx: &mut usize,
    layer_idx: &mut usize,
) {
    for layer in layers {
        let l = *layer_idx;
        match layer {
            Lowered::Conv(g) => {
                let var = variances[*conv_idx];
                *conv_idx += 1;
                let sd = var.sqrt();
                let mut shape = vec![g.out_channels, g.in_channels];
                shape.extend(g.kernel.iter());
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        sd * z
                    })
                    .collect();
                params.push(Parameter::new(format!("l{l}.weight"), Tensor::new(shape, data), l, ParamRole::Weight));
                if g.has_bias {
                    params.push(Parameter::new(
                        format!("l{l}.bias"),
                        Tensor::zeros(vec![g.out_channels]),
                        l,
                        ParamRole::Bias,
                    ));
                }
                *layer_idx += 1;
            }
            Lowered::BatchNorm { channels } => {
                params.push(Parameter::new(
                    format!("l{l}.gamma"),
                    Tensor::full(vec![*channels], 1.0),
                    l,
                    ParamRole::Gamma,
                ));
                params.push(Parameter::new(
                    format!("l{l}.beta"),
                    Tensor::zeros(vec![*channels]),
                    l,
                    ParamRole::Beta,
                ));
                bn_states.push(BnState {
                    running_mean: vec![0.0; *channels],
                    running_var: vec![1.0; *channels],
                    eps: BN_EPS_DEFAULT,
                });
                *layer_idx += 1;
            }
            Lowered::Residual { inner, .. } => {
                *layer_idx += 1;
                build_params(inner, variances, rng, params, bn_states, conv_idx, layer_idx);
            }
            _ => *layer_idx += 1,
        }
    }
}

// ---------------------------------------------------------------------------
// heads
// ---------------------------------------------------------------------------

/// Differentiable softmax over the class axis of a `[B, D]` logit node,
/// stabilized by max subtraction.
pub fn softmax_node(tape: &mut Tape, logits: NodeId) -> NodeId {
    let shape = tape.value(logits).shape().to_vec();
    assert_eq!(shape.len(), 2, "softmax expects [B, D]");
    let (b, d) = (shape[0], shape[1]);
    let mut maxes = vec![0.0f64; b];
    for (m, row) in maxes.iter_mut().zip(tape.value(logits).data().chunks(d)) {
        *m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    let neg_max: Vec<f64> = maxes.iter().map(|&m| -m).collect();
    let nm = tape.constant(Tensor::new(vec![b, 1], neg_max));
    let nm_b = tape.broadcast_to(nm, shape.clone());
    let shifted = tape.add(logits, nm_b);
    let e = tape.exp(shifted);
    let s = tape.reduce_sum(e, vec![false, true]); // [B,1]
    let inv = tape.recip(s);
    let inv_b = tape.broadcast_to(inv, shape);
    tape.mul(e, inv_b)
}

/// Σ over rows of the selected class logit: `Σ_m h[m, class[m]]`.
pub fn select_logits_sum(tape: &mut Tape, logits: NodeId, classes: &[usize]) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    let (b, d) = (shape[0], shape[1]);
    if classes.len() != b {
        return Err(Error::Dimension(format!("{} class picks for batch of {b}", classes.len())));
    }
    let mut hot = Tensor::zeros(vec![b, d]);
    for (m, &y) in classes.iter().enumerate() {
        if y >= d {
            return Err(Error::Contract(format!("class index {y} out of range (D={d})")));
        }
        hot.data_mut()[m * d + y] = 1.0;
    }
    let h = tape.constant(hot);
    let picked = tape.mul(logits, h);
    Ok(tape.sum_all(picked))
}

/// Stabilized cross-entropy of a single `[D]` logit vector; returns the loss
/// node and the probabilities. Probabilities sum to one.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: NodeId, label: usize) -> Result<(NodeId, Vec<f64>)> {
    let d = tape.value(logits).len();
    if tape.value(logits).rank() != 1 {
        return Err(Error::Dimension(format!(
            "softmax_cross_entropy expects a rank-1 logit vector, got {:?}",
            tape.value(logits).shape()
        )));
    }
    let l2 = tape.reshape(logits, vec![1, d]);
    let loss = batched_cross_entropy(tape, l2, &[label])?;
    let p = softmax_node(tape, l2);
    let probs = tape.value(p).data().to_vec();
    Ok((loss, probs))
}

/// Mean cross-entropy over a `[B, D]` batch: `mean_m (logsumexp_m - h[m, y_m])`.
pub fn batched_cross_entropy(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("expected [B, D] logits, got {shape:?}")));
    }
    let (b, d) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::Dimension(format!("{} labels for batch of {b}", labels.len())));
    }
    for &y in labels {
        if y >= d {
            return Err(Error::Contract(format!("label {y} out of range (D={d})")));
        }
    }
    let mut maxes = vec![0.0f64; b];
    for (m, row) in maxes.iter_mut().zip(tape.value(logits).data().chunks(d)) {
        *m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    let nm = tape.constant(Tensor::new(vec![b, 1], maxes.iter().map(|&m| -m).collect()));
    let nm_b = tape.broadcast_to(nm, shape.clone());
    let shifted = tape.add(logits, nm_b);
    let e = tape.exp(shifted);
    let s = tape.reduce_sum(e, vec![false, true]);
    let lse = tape.log(s); // [B,1]
    let picked = select_logits_sum(tape, shifted, labels)?; // scalar Σ picked
    let lse_sum = tape.sum_all(lse);
    let diff = tape.sub(lse_sum, picked);
    Ok(tape.scale(diff, 1.0 / b as f64))
}

/// Plain (off-tape) convolution, the spec-level forward operation.
pub fn conv_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: &ConvGeom) -> Result<Tensor> {
    let mut wshape = vec![geom.out_channels, geom.in_channels];
    wshape.extend(geom.kernel.iter());
    if weight.shape() != wshape.as_slice() {
        return Err(Error::Dimension(format!(
            "weight shape {:?} does not match geometry {:?}",
            weight.shape(),
            wshape
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [geom.out_channels] {
            return Err(Error::Dimension(format!("bias shape {:?} != [{}]", b.shape(), geom.out_channels)));
        }
    }
    let expected_tail: Vec<usize> = {
        let mut s = vec![geom.in_channels];
        s.extend_from_slice(&geom.in_extent);
        s
    };
    if input.rank() != expected_tail.len() + 1 || input.shape()[1..] != expected_tail[..] {
        return Err(Error::Dimension(format!(
            "input shape {:?} does not match geometry [B, {:?}]",
            input.shape(),
            expected_tail
        )));
    }
    let mut tape = Tape::new(Mode::Eval);
    let x = tape.constant(input.clone());
    let w = tape.constant(weight.clone());
    let mut y = tape.conv(x, w, Arc::new(geom.clone()));
    if let Some(bt) = bias {
        let b_id = tape.constant(bt.clone());
        let mut bshape = vec![1, geom.out_channels];
        bshape.extend(std::iter::repeat(1).take(geom.rank()));
        let br = tape.reshape(b_id, bshape);
        let target = tape.value(y).shape().to_vec();
        let bb = tape.broadcast_to(br, target);
        y = tape.add(y, bb);
    }
    Ok(tape.value(y).clone())
}
