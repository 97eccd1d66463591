//! Closed-form predictions of the expected squared input-output derivative at
//! initialization: per-path variance products for linear conv stacks, the ½
//! attenuation per ReLU, and the weight-variance-free form for
//! conv+BatchNorm stacks with its per-layer path ratios.

use num_traits::ToPrimitive;
use serde::Serialize;

use crate::archspec::{ConvGeom, Lowered, NetworkSpec, ShapeRow};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::lattice;

/// What a prediction assumed; rides along as a JSON sidecar.
#[derive(Debug, Clone, Serialize)]
pub struct Assumptions {
    pub regime: String,
    pub relu_layers: usize,
    pub batchnorm_layers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_sizes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_order: Option<String>,
    pub notes: Vec<String>,
}

/// Predicted squared-derivative field over input coordinates
/// (`[channels, spatial...]`, matching measured landscapes).
#[derive(Debug, Clone)]
pub struct TheoryPrediction {
    pub field: Tensor,
    pub assumptions: Assumptions,
}

impl TheoryPrediction {
    pub fn values(&self) -> &[f64] {
        self.field.data()
    }
}

// ---------------------------------------------------------------------------
// weighted path flow
// ---------------------------------------------------------------------------

fn conv_count(layers: &[Lowered]) -> usize {
    layers
        .iter()
        .map(|l| match l {
            Lowered::Conv(_) => 1,
            Lowered::Residual { inner, .. } => conv_count(inner),
            _ => 0,
        })
        .sum()
}

/// Backward flow of per-path variance products: like the path-count DP, but
/// each conv crossing multiplies by that layer's weight variance and each
/// residual skip passes through with weight one.
fn weighted_flow(
    layers: &[Lowered],
    field: Vec<f64>,
    out_shape: &ShapeRow,
    variances: &[f64],
) -> (Vec<f64>, ShapeRow) {
    let mut field = field;
    let mut shape = out_shape.clone();
    let mut remaining = variances;
    for layer in layers.iter().rev() {
        match layer {
            Lowered::Conv(g) => {
                let (head, tail) = remaining.split_at(remaining.len() - 1);
                let s_l = tail[0];
                remaining = head;
                let in_shape = ShapeRow { extent: g.in_extent.clone(), channels: g.in_channels };
                let mut next = vec![0.0f64; in_shape.units()];
                scatter_conv(g, &field, &shape, &mut next, &in_shape, s_l);
                field = next;
                shape = in_shape;
            }
            Lowered::Relu | Lowered::BatchNorm { .. } => {}
            Lowered::Flatten { from, .. } => shape = from.clone(),
            Lowered::Residual { inner, projection_stride, in_shape, .. } => {
                let nvars = conv_count(inner);
                let (head, tail) = remaining.split_at(remaining.len() - nvars);
                remaining = head;
                let (through, _) = weighted_flow(inner, field.clone(), &shape, tail);
                let mut next = through;
                for flat in 0..field.len() {
                    if field[flat] == 0.0 {
                        continue;
                    }
                    let unit = lattice::UnitCoord::from_flat(flat, &shape);
                    let pos: Vec<usize> = unit.pos.iter().map(|&p| p * projection_stride).collect();
                    let cand = lattice::UnitCoord::new(pos, unit.channel);
                    let ok = cand.pos.iter().zip(&in_shape.extent).all(|(&p, &e)| p < e);
                    if ok {
                        next[cand.flat(in_shape)] += field[flat];
                    }
                }
                field = next;
                shape = in_shape.clone();
            }
        }
    }
    (field, shape)
}

fn scatter_conv(
    g: &ConvGeom,
    field: &[f64],
    shape: &ShapeRow,
    next: &mut [f64],
    in_shape: &ShapeRow,
    s_l: f64,
) {
    let rank = g.rank();
    for flat in 0..field.len() {
        if field[flat] == 0.0 {
            continue;
        }
        let unit = lattice::UnitCoord::from_flat(flat, shape);
        let w = field[flat] * s_l;
        let mut offset = vec![0usize; rank];
        'offsets: loop {
            let mut pos = Vec::with_capacity(rank);
            let mut ok = true;
            for d in 0..rank {
                let raw = unit.pos[d] * g.stride[d] + offset[d] * g.dilation[d];
                if raw < g.padding[d] || raw - g.padding[d] >= g.in_extent[d] {
                    ok = false;
                    break;
                }
                pos.push(raw - g.padding[d]);
            }
            if ok {
                for ci in 0..g.in_channels {
                    let f = lattice::UnitCoord::new(pos.clone(), ci).flat(in_shape);
                    next[f] += w;
                }
            }
            let mut d = 0;
            loop {
                if d == rank {
                    break 'offsets;
                }
                offset[d] += 1;
                if offset[d] < g.kernel[d] {
                    break;
                }
                offset[d] = 0;
                d += 1;
            }
        }
    }
}

fn reject_nonlinear(layers: &[Lowered], allow_relu: bool) -> Result<()> {
    for layer in layers {
        match layer {
            Lowered::Relu if !allow_relu => {
                return Err(Error::WrongRegime(
                    "spec contains ReLU; use the ReLU predictor".into(),
                ));
            }
            Lowered::BatchNorm { .. } => {
                return Err(Error::WrongRegime(
                    "spec contains BatchNorm; use the BatchNorm predictor".into(),
                ));
            }
            Lowered::Residual { inner, .. } => reject_nonlinear(inner, allow_relu)?,
            _ => {}
        }
    }
    Ok(())
}

fn count_relu(layers: &[Lowered]) -> usize {
    layers
        .iter()
        .map(|l| match l {
            Lowered::Relu => 1,
            Lowered::Residual { inner, .. } => count_relu(inner),
            _ => 0,
        })
        .sum()
}

fn linear_field(spec: &NetworkSpec, variances: &[f64]) -> Result<Tensor> {
    let lowered = spec.lowered()?;
    let n = conv_count(&lowered);
    if variances.len() != n {
        return Err(Error::Contract(format!(
            "{} variances supplied for {} parameterized layers",
            variances.len(),
            n
        )));
    }
    let out_shape = crate::archspec::output_shape(spec)?.output().clone();
    let z = out_shape.units() as f64;
    let seed = vec![1.0f64; out_shape.units()];
    let (field, in_shape) = weighted_flow(&lowered, seed, &out_shape, variances);
    let mut shape = vec![in_shape.channels];
    shape.extend_from_slice(&in_shape.extent);
    Ok(Tensor::new(shape, field.iter().map(|v| v / z).collect()))
}

/// Prediction for purely linear conv stacks: per-path products of the layer
/// weight variances, averaged over output units. When every path crosses
/// every layer this is `∏ S_l × #p̄`.
pub fn predict_linear(spec: &NetworkSpec, variances: &[f64]) -> Result<TheoryPrediction> {
    reject_nonlinear(&spec.lowered()?, false)?;
    let field = linear_field(spec, variances)?;
    Ok(TheoryPrediction {
        field,
        assumptions: Assumptions {
            regime: "linear".into(),
            relu_layers: 0,
            batchnorm_layers: 0,
            sample_sizes: None,
            error_order: None,
            notes: vec!["zero-mean independent weights per layer".into()],
        },
    })
}

/// Prediction for conv+ReLU stacks: the linear prediction attenuated by ½
/// per ReLU crossed, assuming gradient masks independent of path weights.
pub fn predict_relu(spec: &NetworkSpec, variances: &[f64]) -> Result<TheoryPrediction> {
    let lowered = spec.lowered()?;
    reject_nonlinear(&lowered, true)?;
    let n_relu = count_relu(&lowered);
    let field = linear_field(spec, variances)?;
    let factor = 0.5f64.powi(n_relu as i32);
    Ok(TheoryPrediction {
        field: field.map(|v| factor * v),
        assumptions: Assumptions {
            regime: "relu".into(),
            relu_layers: n_relu,
            batchnorm_layers: 0,
            sample_sizes: None,
            error_order: None,
            notes: vec![
                "zero-mean pre-activations (½ mask expectation per ReLU)".into(),
                "masks treated as independent of downstream path weights".into(),
            ],
        },
    })
}

/// Variance of `ReLU(a)` for `a ~ N(0, S)`: `S·(π−1)/(2π)`.
pub fn relu_output_variance(input_variance: f64) -> Result<f64> {
    if input_variance <= 0.0 || !input_variance.is_finite() {
        return Err(Error::Domain(format!("input variance must be positive, got {input_variance}")));
    }
    Ok(input_variance * (std::f64::consts::PI - 1.0) / (2.0 * std::f64::consts::PI))
}

/// Variance of one conv output channel under iid inputs:
/// `V[h] · Σ_k Σ_cin w²`.
pub fn conv_output_variance(weights: &[f64], input_variance: f64) -> f64 {
    input_variance * weights.iter().map(|w| w * w).sum::<f64>()
}

/// One conv(+BN)(+ReLU) group of a normalized stack.
struct BnGroup {
    geom: ConvGeom,
    relu_after: bool,
}

fn parse_bn_stack(lowered: &[Lowered]) -> Result<Vec<BnGroup>> {
    let mut groups = Vec::new();
    let mut it = lowered.iter().peekable();
    while let Some(layer) = it.next() {
        match layer {
            Lowered::Conv(g) => {
                match it.next() {
                    Some(Lowered::BatchNorm { .. }) => {}
                    _ => {
                        return Err(Error::WrongRegime(
                            "the BatchNorm predictor needs BatchNorm directly after every conv".into(),
                        ));
                    }
                }
                let relu_after = matches!(it.peek(), Some(Lowered::Relu));
                if relu_after {
                    it.next();
                }
                groups.push(BnGroup { geom: g.clone(), relu_after });
            }
            other => {
                return Err(Error::WrongRegime(format!(
                    "only conv+BatchNorm(+ReLU) groups are supported, found {other:?}"
                )));
            }
        }
    }
    if groups.is_empty() {
        return Err(Error::WrongRegime("no conv+BatchNorm groups in the spec".into()));
    }
    Ok(groups)
}

/// Normalized mean-path-count ratio of a single conv layer over its input
/// positions, pulled back to image coordinates through the layers below it.
fn layer_ratio_pulled_back(
    groups: &[BnGroup],
    layer: usize,
    input_shape: &ShapeRow,
) -> Result<Vec<f64>> {
    let g = &groups[layer].geom;
    let conv_in = ShapeRow { extent: g.in_extent.clone(), channels: g.in_channels };
    let conv_out = ShapeRow { extent: g.out_extent.clone(), channels: g.out_channels };
    let single = lattice::field_for_lowered(&[Lowered::Conv(g.clone())], &conv_out);
    let ratios = single.spatial_values();
    let max = ratios.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return Err(Error::Contract("conv layer with no paths".into()));
    }
    let ratios: Vec<f64> = ratios.iter().map(|r| r / max).collect();
    if layer == 0 {
        return Ok(ratios);
    }
    // weight each image position by the exact path counts of the prefix stack
    let prefix: Vec<Lowered> =
        groups[..layer].iter().map(|gr| Lowered::Conv(gr.geom.clone())).collect();
    let in_spatial = input_shape.spatial();
    let mut weighted = vec![0.0f64; in_spatial];
    let mut total = vec![0.0f64; in_spatial];
    for u in 0..conv_in.spatial() {
        // counts are channel-uniform, so one seed unit per position suffices
        let mut seed = vec![num_bigint::BigUint::from(0u32); conv_in.units()];
        seed[lattice::UnitCoord::new(unflatten(u, &conv_in.extent), 0).flat(&conv_in)] =
            num_bigint::BigUint::from(1u32);
        let (row, _) = lattice::flow_counts_from(&prefix, seed, &conv_in);
        for i in 0..in_spatial {
            let mut c = 0.0;
            for ch in 0..input_shape.channels {
                c += row[ch * in_spatial + i].to_f64().unwrap_or(0.0);
            }
            weighted[i] += c * ratios[u];
            total[i] += c;
        }
    }
    Ok((0..in_spatial)
        .map(|i| if total[i] > 0.0 { weighted[i] / total[i] } else { 0.0 })
        .collect())
}

fn unflatten(mut p: usize, extent: &[usize]) -> Vec<usize> {
    let mut pos = vec![0usize; extent.len()];
    for d in (0..extent.len()).rev() {
        pos[d] = p % extent[d];
        p /= extent[d];
    }
    pos
}

/// Prediction for conv+BatchNorm stacks (ReLU optionally interleaved):
/// weight-variance free by construction. Each layer contributes
/// `(N−1)/N · E[γ²] / V[h]` times its normalized path ratio; interleaved
/// ReLUs halve the squared gradient and reshape the variance chain.
pub fn predict_batchnorm(
    spec: &NetworkSpec,
    gamma_second_moments: &[f64],
    input_variance: f64,
    sample_sizes: &[usize],
) -> Result<TheoryPrediction> {
    if input_variance <= 0.0 {
        return Err(Error::Domain("input variance must be positive".into()));
    }
    let lowered = spec.lowered()?;
    let groups = parse_bn_stack(&lowered)?;
    let n_layers = groups.len();
    if sample_sizes.len() != n_layers {
        return Err(Error::Contract(format!(
            "{} sample sizes for {} conv+BatchNorm groups",
            sample_sizes.len(),
            n_layers
        )));
    }
    if gamma_second_moments.len() != n_layers {
        return Err(Error::Contract(format!(
            "{} gamma second moments for {} groups",
            gamma_second_moments.len(),
            n_layers
        )));
    }
    if let Some(n) = sample_sizes.iter().find(|&&n| n <= 1) {
        return Err(Error::DegenerateVariance(format!("sample size {n} is degenerate")));
    }
    let input_shape = spec.input_shape();
    let mut scalar = 1.0f64;
    let mut v_cur = input_variance;
    let mut relu_count = 0usize;
    let mut ratio = vec![1.0f64; input_shape.spatial()];
    for (l, group) in groups.iter().enumerate() {
        let n = sample_sizes[l] as f64;
        scalar *= (n - 1.0) / n * gamma_second_moments[l] / v_cur;
        let pulled = layer_ratio_pulled_back(&groups, l, &input_shape)?;
        for (r, p) in ratio.iter_mut().zip(&pulled) {
            *r *= p;
        }
        v_cur = gamma_second_moments[l];
        if group.relu_after {
            relu_count += 1;
            v_cur = relu_output_variance(v_cur)?;
        }
    }
    scalar *= 0.5f64.powi(relu_count as i32);
    let spatial = input_shape.spatial();
    let mut data = vec![0.0f64; input_shape.units()];
    for ch in 0..input_shape.channels {
        for p in 0..spatial {
            data[ch * spatial + p] = scalar * ratio[p];
        }
    }
    let mut shape = vec![input_shape.channels];
    shape.extend_from_slice(&input_shape.extent);
    let order: Vec<String> = sample_sizes.iter().map(|n| format!("1/{n}")).collect();
    Ok(TheoryPrediction {
        field: Tensor::new(shape, data),
        assumptions: Assumptions {
            regime: "batchnorm".into(),
            relu_layers: relu_count,
            batchnorm_layers: n_layers,
            sample_sizes: Some(sample_sizes.to_vec()),
            error_order: Some(format!("O({})", order.join(" + "))),
            notes: vec![
                "independent of conv weight variance by construction".into(),
                "per-layer path ratios pulled back through exact prefix path counts".into(),
                "iid activations entering each conv".into(),
            ],
        },
    })
}

/// Chooses the predictor matching the spec's layer mix.
pub fn predict_auto(
    spec: &NetworkSpec,
    gamma_second_moments_default: f64,
    input_variance: f64,
    batch: usize,
) -> Result<TheoryPrediction> {
    let lowered = spec.lowered()?;
    let has_bn = lowered.iter().any(|l| matches!(l, Lowered::BatchNorm { .. }));
    if has_bn {
        let groups = parse_bn_stack(&lowered)?;
        let gammas = vec![gamma_second_moments_default; groups.len()];
        let sizes: Vec<usize> =
            groups.iter().map(|g| batch * g.geom.out_spatial()).collect();
        return predict_batchnorm(spec, &gammas, input_variance, &sizes);
    }
    let variances = spec.layer_variances()?;
    if count_relu(&lowered) > 0 {
        predict_relu(spec, &variances)
    } else {
        predict_linear(spec, &variances)
    }
}
