//! The importance landscape: class-probability-weighted squared input
//! gradients I², its RMS-normalized 2D form I′, the discrete Laplacian and
//! its energy, the dataset smoothness target Ŝ, total variation, and the two
//! landscape losses as differentiable tape quantities.
//!
//! Everything here runs the network in evaluation mode: normalization layers
//! are affine there, so differentiating the landscape (double backward) stays
//! cheap and exact.

use std::sync::Arc;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::engine::{
    select_logits_sum, softmax_node, Mode, Model, NodeId, StencilKernel, Tape, Tensor,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Exact,
    MonteCarlo,
}

/// Per-input-coordinate squared-gradient importance, shape `[C, spatial...]`.
#[derive(Debug, Clone)]
pub struct ImportanceLandscape {
    pub field: Tensor,
    pub samples: usize,
    pub estimator: EstimatorKind,
}

/// RMS-1 normalized spatial landscape (`Σ I′² = d_w·d_h`).
#[derive(Debug, Clone)]
pub struct Landscape2D {
    pub field: Tensor,
}

/// Dataset-averaged normalized Laplacian magnitude per pixel location.
#[derive(Debug, Clone)]
pub struct SmoothnessMap {
    pub field: Tensor,
    pub k: usize,
    pub dataset_size: usize,
}

// ---------------------------------------------------------------------------
// estimators
// ---------------------------------------------------------------------------

fn stack_batch(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::Dimension("images in a batch must share one shape".into()));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::new(shape, data))
}

fn batch_axis_mean(tape: &mut Tape, node: NodeId) -> NodeId {
    let shape = tape.value(node).shape().to_vec();
    let b = shape[0];
    let mut axes = vec![false; shape.len()];
    axes[0] = true;
    let summed = tape.reduce_sum(node, axes);
    let scaled = tape.scale(summed, 1.0 / b as f64);
    tape.reshape(scaled, shape[1..].to_vec())
}

/// Builds the I² field of one batch on a live tape (shape `[C, spatial...]`).
/// `classes = None` gives the exact estimator (full probability-weighted sum
/// over classes, differentiable through the probabilities); `classes =
/// Some(y_m)` gives the Monte-Carlo form with one sampled class per image.
pub fn importance_node(
    tape: &mut Tape,
    model: &mut Model,
    batch: &Tensor,
    classes: Option<&[usize]>,
) -> Result<(NodeId, crate::engine::ForwardPass)> {
    if tape.mode != Mode::Eval {
        return Err(Error::Contract("importance landscapes require an eval-mode tape".into()));
    }
    let d = model.num_classes()?;
    let pass = model.forward_logits(tape, batch)?;
    let b = batch.shape()[0];
    let field_shape = batch.shape()[1..].to_vec();
    let per_image = match classes {
        Some(classes) => {
            let sel = select_logits_sum(tape, pass.output, classes)?;
            let grads = tape.backward(sel)?;
            let gx = grads
                .get(pass.input)
                .ok_or_else(|| Error::Contract("output does not depend on the input".into()))?;
            tape.mul(gx, gx)
        }
        None => {
            let probs = softmax_node(tape, pass.output);
            let mut acc: Option<NodeId> = None;
            for y in 0..d {
                let sel = select_logits_sum(tape, pass.output, &vec![y; b])?;
                let grads = tape.backward(sel)?;
                let Some(gx) = grads.get(pass.input) else { continue };
                let sq = tape.mul(gx, gx);
                // weight by p(y | X_m), broadcast over the image axes
                let mut hot = Tensor::zeros(vec![b, d]);
                for m in 0..b {
                    hot.data_mut()[m * d + y] = 1.0;
                }
                let hot_c = tape.constant(hot);
                let picked = tape.mul(probs, hot_c);
                let col = tape.reduce_sum(picked, vec![false, true]); // [B,1]
                let mut col_shape = vec![b];
                col_shape.extend(std::iter::repeat(1).take(field_shape.len()));
                let col_r = tape.reshape(col, col_shape);
                let col_b = tape.broadcast_to(col_r, batch.shape().to_vec());
                let weighted = tape.mul(sq, col_b);
                acc = Some(match acc {
                    None => weighted,
                    Some(a) => tape.add(a, weighted),
                });
            }
            acc.ok_or_else(|| Error::Contract("constant network; importance undefined".into()))?
        }
    };
    Ok((batch_axis_mean(tape, per_image), pass))
}

/// Exact dataset landscape: one backward pass per (image chunk, class),
/// weighted by the class probabilities.
pub fn importance_squared_exact(model: &Model, images: &[Tensor]) -> Result<ImportanceLandscape> {
    if images.is_empty() {
        return Err(Error::Contract("importance over an empty dataset".into()));
    }
    let chunks: Vec<&[Tensor]> = images.chunks(64).collect();
    let fields = chunks
        .par_iter()
        .map(|chunk| -> Result<(usize, Tensor)> {
            let mut m = model.clone();
            let mut tape = Tape::new(Mode::Eval);
            let batch = stack_batch(chunk)?;
            let (node, _) = importance_node(&mut tape, &mut m, &batch, None)?;
            Ok((chunk.len(), tape.value(node).clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = Tensor::zeros(fields[0].1.shape().to_vec());
    let total: usize = fields.iter().map(|(n, _)| n).sum();
    for (n, f) in &fields {
        let w = *n as f64 / total as f64;
        for (a, &v) in acc.data_mut().iter_mut().zip(f.data()) {
            *a += w * v;
        }
    }
    Ok(ImportanceLandscape { field: acc, samples: total, estimator: EstimatorKind::Exact })
}

/// Draws one class per probability row.
pub fn sample_classes(probs: &[f64], d: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    probs
        .chunks(d)
        .map(|row| {
            let u: f64 = rng.random();
            let mut cum = 0.0;
            for (y, &p) in row.iter().enumerate() {
                cum += p;
                if u < cum {
                    return y;
                }
            }
            d - 1
        })
        .collect()
}

/// Monte-Carlo landscape of one batch: one sampled class per image,
/// deterministic per RNG state.
pub fn importance_squared_mc(
    model: &Model,
    images: &[Tensor],
    rng: &mut ChaCha8Rng,
) -> Result<ImportanceLandscape> {
    let batch = stack_batch(images)?;
    let mut m = model.clone();
    let d = m.num_classes()?;
    // probabilities for sampling only
    let probs = {
        let mut tape = Tape::new(Mode::Eval);
        let pass = m.forward_logits(&mut tape, &batch)?;
        let p = softmax_node(&mut tape, pass.output);
        tape.value(p).data().to_vec()
    };
    let classes = sample_classes(&probs, d, rng);
    let mut tape = Tape::new(Mode::Eval);
    let (node, _) = importance_node(&mut tape, &mut m, &batch, Some(&classes))?;
    Ok(ImportanceLandscape {
        field: tape.value(node).clone(),
        samples: images.len(),
        estimator: EstimatorKind::MonteCarlo,
    })
}

// ---------------------------------------------------------------------------
// Laplacian stencils
// ---------------------------------------------------------------------------

fn conv_full_1d(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn conv_full_2d(a: &[f64], (ar, ac): (usize, usize), b: &[f64], (br, bc): (usize, usize)) -> (Vec<f64>, (usize, usize)) {
    let (or_, oc) = (ar + br - 1, ac + bc - 1);
    let mut out = vec![0.0; or_ * oc];
    for i in 0..ar {
        for j in 0..ac {
            for p in 0..br {
                for q in 0..bc {
                    out[(i + p) * oc + (j + q)] += a[i * ac + j] * b[p * bc + q];
                }
            }
        }
    }
    (out, (or_, oc))
}

/// The width-`k` Laplacian stencil: `[1,-2,1]` / the 4-neighbor cross for
/// `k = 3`, binomially smoothed for larger odd widths.
pub fn laplacian_kernel(rank: usize, k: usize) -> Result<StencilKernel> {
    if k % 2 == 0 || k < 3 {
        return Err(Error::Contract(format!("laplacian width must be odd and >= 3, got {k}")));
    }
    let steps = (k - 3) / 2;
    match rank {
        1 => {
            let mut taps = vec![1.0, -2.0, 1.0];
            for _ in 0..steps {
                taps = conv_full_1d(&taps, &[0.25, 0.5, 0.25]);
            }
            Ok(StencilKernel::new(vec![k], taps))
        }
        2 => {
            let mut taps = vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
            let mut ext = (3usize, 3usize);
            let smooth = [
                0.0625, 0.125, 0.0625, //
                0.125, 0.25, 0.125, //
                0.0625, 0.125, 0.0625,
            ];
            for _ in 0..steps {
                let (t, e) = conv_full_2d(&taps, ext, &smooth, (3, 3));
                taps = t;
                ext = e;
            }
            Ok(StencilKernel::new(vec![ext.0, ext.1], taps))
        }
        r => Err(Error::Contract(format!("laplacian supports rank 1 or 2, got {r}"))),
    }
}

/// Discrete Laplacian response on the tape; `spatial_rank` trailing axes are
/// filtered with replicate padding, leading axes pass through.
pub fn laplacian_node(tape: &mut Tape, field: NodeId, k: usize, spatial_rank: usize) -> Result<NodeId> {
    let kernel = Arc::new(laplacian_kernel(spatial_rank, k)?);
    Ok(tape.stencil(field, kernel))
}

/// Empirical variance (divisor n−1) of all entries, on the tape.
pub fn variance_node(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let n = tape.value(x).len();
    if n < 2 {
        return Err(Error::Contract("variance needs at least two entries".into()));
    }
    let shape = tape.value(x).shape().to_vec();
    let s = tape.sum_all(x);
    let mu = tape.scale(s, 1.0 / n as f64);
    let mu_r = tape.reshape(mu, vec![1; shape.len()]);
    let mu_b = tape.broadcast_to(mu_r, shape);
    let xc = tape.sub(x, mu_b);
    let sq = tape.mul(xc, xc);
    let ss = tape.sum_all(sq);
    Ok(tape.scale(ss, 1.0 / (n - 1) as f64))
}

/// I′ on the tape: per-position channel norm of I², scaled to RMS 1 by the
/// Frobenius norm and `sqrt(d_w·d_h)`. Errors on an identically-zero field.
pub fn normalize_node(tape: &mut Tape, i2: NodeId) -> Result<NodeId> {
    let shape = tape.value(i2).shape().to_vec(); // [C, spatial...]
    if tape.value(i2).data().iter().all(|&v| v == 0.0) {
        return Err(Error::Normalization("cannot normalize an identically-zero landscape".into()));
    }
    let spatial: Vec<usize> = shape[1..].to_vec();
    let positions: usize = spatial.iter().product();
    let sq = tape.mul(i2, i2);
    let num = if shape[0] == 1 {
        // single channel: the channel norm is |I²| = I², and skipping the
        // sqrt∘square round trip keeps the operator differentiable at zeros
        i2
    } else {
        let mut ch_axis = vec![false; shape.len()];
        ch_axis[0] = true;
        let num_sq = tape.reduce_sum(sq, ch_axis); // [1, spatial...]
        // clamp with subgradient 0 so dead positions stay differentiable
        let floor = 1e-300;
        let f = tape.constant(Tensor::full(tape.value(num_sq).shape().to_vec(), floor));
        let shifted = tape.sub(num_sq, f);
        let clamped = tape.relu(shifted);
        let lifted = tape.add(clamped, f);
        tape.sqrt(lifted)
    };
    let den_sq = tape.sum_all(sq);
    let den = tape.sqrt(den_sq);
    let den_inv = tape.recip(den); // [1]
    let den_r = tape.reshape(den_inv, vec![1; shape.len()]);
    let den_b = tape.broadcast_to(den_r, tape.value(num).shape().to_vec());
    let ratio = tape.mul(num, den_b);
    let scaled = tape.scale(ratio, (positions as f64).sqrt());
    Ok(tape.reshape(scaled, spatial))
}

/// Curvature loss: empirical variance of the Laplacian response of I′.
pub fn loss_curvature_node(tape: &mut Tape, i_prime: NodeId, k: usize) -> Result<NodeId> {
    let rank = tape.value(i_prime).rank();
    let lap = laplacian_node(tape, i_prime, k, rank)?;
    variance_node(tape, lap)
}

/// Target-cast loss: squared Euclidean distance between I′ and Ŝ.
pub fn loss_target_node(tape: &mut Tape, i_prime: NodeId, target: &SmoothnessMap) -> Result<NodeId> {
    if tape.value(i_prime).shape() != target.field.shape() {
        return Err(Error::Dimension(format!(
            "landscape {:?} vs smoothness target {:?}",
            tape.value(i_prime).shape(),
            target.field.shape()
        )));
    }
    let t = tape.constant(target.field.clone());
    let d = tape.sub(i_prime, t);
    let sq = tape.mul(d, d);
    Ok(tape.sum_all(sq))
}

// ---------------------------------------------------------------------------
// plain (off-tape) forms
// ---------------------------------------------------------------------------

/// Laplacian response of a plain field whose trailing `spatial_rank` axes are
/// spatial.
pub fn laplacian(field: &Tensor, k: usize, spatial_rank: usize) -> Result<Tensor> {
    let mut tape = Tape::new(Mode::Eval);
    let x = tape.constant(field.clone());
    let node = laplacian_node(&mut tape, x, k, spatial_rank)?;
    Ok(tape.value(node).clone())
}

/// Empirical variance of the Laplacian response.
pub fn laplacian_energy(field: &Tensor, k: usize, spatial_rank: usize) -> Result<f64> {
    let mut tape = Tape::new(Mode::Eval);
    let x = tape.constant(field.clone());
    let lap = laplacian_node(&mut tape, x, k, spatial_rank)?;
    let v = variance_node(&mut tape, lap)?;
    Ok(tape.value(v).item())
}

/// I′ of a measured landscape.
pub fn normalize_to_2d(i2: &ImportanceLandscape) -> Result<Landscape2D> {
    let mut tape = Tape::new(Mode::Eval);
    let x = tape.constant(i2.field.clone());
    let node = normalize_node(&mut tape, x)?;
    Ok(Landscape2D { field: tape.value(node).clone() })
}

/// Mean squared difference over all pairs of spatially adjacent entries.
pub fn total_variation(field: &Tensor) -> f64 {
    let shape = field.shape();
    let (rows, cols) = match shape.len() {
        1 => (shape[0], 1),
        2 => (shape[0], shape[1]),
        _ => panic!("total_variation expects a rank-1 or rank-2 field"),
    };
    let at = |r: usize, c: usize| field.data()[r * cols + c];
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for r in 0..rows {
        for c in 0..cols {
            if r + 1 < rows {
                sum += (at(r, c) - at(r + 1, c)).powi(2);
                pairs += 1;
            }
            if c + 1 < cols {
                sum += (at(r, c) - at(r, c + 1)).powi(2);
                pairs += 1;
            }
        }
    }
    if pairs == 0 { 0.0 } else { sum / pairs as f64 }
}

/// Ŝ: dataset-averaged, RMS-normalized Laplacian magnitude per position.
/// Images with an identically-zero Laplacian are skipped with a warning.
pub fn smoothness_target(images: &[Tensor], k: usize) -> Result<SmoothnessMap> {
    let first = images.first().ok_or_else(|| Error::Contract("smoothness of an empty dataset".into()))?;
    let spatial: Vec<usize> = first.shape()[1..].to_vec();
    let rank = spatial.len();
    let positions: usize = spatial.iter().product();
    let channels = first.shape()[0];
    let mut acc = vec![0.0f64; positions];
    let mut used = 0usize;
    for (m, img) in images.iter().enumerate() {
        let lap = laplacian(img, k, rank)?;
        let fro_sq: f64 = lap.data().iter().map(|v| v * v).sum();
        if fro_sq == 0.0 {
            eprintln!("warning: image {m} has a zero Laplacian, skipped in the smoothness target");
            continue;
        }
        let fro = fro_sq.sqrt();
        let scale = (positions as f64).sqrt() / fro;
        for p in 0..positions {
            let ch_sq: f64 = (0..channels).map(|c| lap.data()[c * positions + p].powi(2)).sum();
            acc[p] += scale * ch_sq.sqrt();
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Contract("every image had a zero Laplacian".into()));
    }
    for v in &mut acc {
        *v /= used as f64;
    }
    Ok(SmoothnessMap { field: Tensor::new(spatial, acc), k, dataset_size: used })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::parse_spec;
    use rand::SeedableRng;
    use rand_distr::Distribution;

    fn toy_model(seed: u64) -> Model {
        let spec = parse_spec(
            r#"{"rank":2,"input":[4,4,1],"layers":[
                {"type":"conv","k":3,"c_in":1,"c_out":2},
                {"type":"relu"},
                {"type":"dense","c_in":2,"c_out":3}]}"#,
        )
        .unwrap();
        Model::init(&spec, seed).unwrap()
    }

    fn random_images(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data: Vec<f64> =
                    (0..16).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
                Tensor::new(vec![1, 4, 4], data)
            })
            .collect()
    }

    #[test]
    fn zero_model_gives_zero_landscape() {
        let spec = parse_spec(
            r#"{"rank":1,"input":[5,1],"init":{"custom":[0.0]},
                "layers":[{"type":"dense","c_in":1,"c_out":3}]}"#,
        )
        .unwrap();
        let model = Model::init(&spec, 0).unwrap();
        let imgs = vec![Tensor::new(vec![1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0])];
        let l = importance_squared_exact(&model, &imgs).unwrap();
        assert!(l.field.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_model_landscape_is_weighted_weight_squares() {
        // y = W x (dense): I²(i) = Σ_y p(y)·W[y,i]², independent of x
        let spec = parse_spec(
            r#"{"rank":1,"input":[3,1],"layers":[{"type":"dense","c_in":1,"c_out":2,"bias":false}]}"#,
        )
        .unwrap();
        let model = Model::init(&spec, 5).unwrap();
        let w = model.params[0].value.clone(); // [2,1,3]
        let img = Tensor::new(vec![1, 3], vec![0.3, -0.7, 1.1]);
        let l = importance_squared_exact(&model, &[img.clone()]).unwrap();
        // probabilities at this input
        let logits: Vec<f64> = (0..2)
            .map(|o| (0..3).map(|i| w.data()[o * 3 + i] * img.data()[i]).sum::<f64>())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for i in 0..3 {
            let expect: f64 =
                (0..2).map(|y| e[y] / z * w.data()[y * 3 + i].powi(2)).sum();
            assert!((l.field.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn mc_is_deterministic_and_degenerate_with_one_class() {
        let spec = parse_spec(
            r#"{"rank":1,"input":[4,1],"layers":[{"type":"dense","c_in":1,"c_out":1}]}"#,
        )
        .unwrap();
        let model = Model::init(&spec, 2).unwrap();
        let imgs: Vec<Tensor> =
            (0..3).map(|i| Tensor::new(vec![1, 4], vec![i as f64, 1.0, -1.0, 0.5])).collect();
        let mut rng1 = ChaCha8Rng::seed_from_u64(9);
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let a = importance_squared_mc(&model, &imgs, &mut rng1).unwrap();
        let b = importance_squared_mc(&model, &imgs, &mut rng2).unwrap();
        assert_eq!(a.field.data(), b.field.data());
        // D = 1: identical to the exact estimator
        let exact = importance_squared_exact(&model, &imgs).unwrap();
        for (x, y) in a.field.data().iter().zip(exact.field.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mc_converges_to_exact() {
        let model = toy_model(7);
        let imgs = random_images(8, 8);
        let exact = importance_squared_exact(&model, &imgs).unwrap();
        // average many MC replicates of the same batch and watch the error
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reps = 1250; // 8 images × 1250 ≈ 1e4 samples
        let mut acc = vec![0.0f64; exact.field.len()];
        let mut acc_sq = vec![0.0f64; exact.field.len()];
        for _ in 0..reps {
            let mc = importance_squared_mc(&model, &imgs, &mut rng).unwrap();
            for (i, &v) in mc.field.data().iter().enumerate() {
                acc[i] += v;
                acc_sq[i] += v * v;
            }
        }
        for i in 0..acc.len() {
            let mean = acc[i] / reps as f64;
            let var = (acc_sq[i] / reps as f64 - mean * mean).max(0.0);
            let stderr = (var / reps as f64).sqrt();
            let dev = (mean - exact.field.data()[i]).abs();
            assert!(dev <= 3.0 * stderr + 1e-12, "entry {i}: dev {dev} stderr {stderr}");
        }
    }

    #[test]
    fn mc_error_shrinks_at_sqrt_rate() {
        let model = toy_model(17);
        let imgs = random_images(4, 18);
        let exact = importance_squared_exact(&model, &imgs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let ns = [64usize, 256, 1024, 4096];
        let mut pts = Vec::new();
        for &n in &ns {
            let mut acc = vec![0.0f64; exact.field.len()];
            for _ in 0..n {
                let mc = importance_squared_mc(&model, &imgs, &mut rng).unwrap();
                for (a, &v) in acc.iter_mut().zip(mc.field.data()) {
                    *a += v;
                }
            }
            let err: f64 = acc
                .iter()
                .zip(exact.field.data())
                .map(|(a, &e)| (a / n as f64 - e).powi(2))
                .sum::<f64>()
                .sqrt();
            pts.push(((n as f64).ln(), err.ln()));
        }
        // least-squares slope of log error vs log n
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!((-0.6..=-0.4).contains(&slope), "slope {slope}");
    }

    #[test]
    fn normalize_constant_field_is_one() {
        let i2 = ImportanceLandscape {
            field: Tensor::full(vec![1, 3, 5], 0.37),
            samples: 1,
            estimator: EstimatorKind::Exact,
        };
        let l = normalize_to_2d(&i2).unwrap();
        for &v in l.field.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_single_pixel() {
        let mut f = Tensor::zeros(vec![1, 4, 4]);
        f.data_mut()[5] = 0.9;
        let i2 = ImportanceLandscape { field: f, samples: 1, estimator: EstimatorKind::Exact };
        let l = normalize_to_2d(&i2).unwrap();
        assert!((l.field.data()[5] - 4.0).abs() < 1e-12);
        assert_eq!(l.field.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn normalize_zero_field_errors() {
        let i2 = ImportanceLandscape {
            field: Tensor::zeros(vec![1, 2, 2]),
            samples: 1,
            estimator: EstimatorKind::Exact,
        };
        assert!(matches!(normalize_to_2d(&i2), Err(Error::Normalization(_))));
    }

    #[test]
    fn rms_invariant_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let data: Vec<f64> = (0..24)
                .map(|_| {
                    let v: f64 = rand_distr::StandardNormal.sample(&mut rng);
                    v.abs() + 1e-6
                })
                .collect();
            let i2 = ImportanceLandscape {
                field: Tensor::new(vec![2, 3, 4], data),
                samples: 1,
                estimator: EstimatorKind::Exact,
            };
            let l = normalize_to_2d(&i2).unwrap();
            let sum_sq: f64 = l.field.data().iter().map(|v| v * v).sum();
            assert!((sum_sq - 12.0).abs() < 1e-9 * 12.0);
        }
    }

    #[test]
    fn normalize_is_scale_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let data: Vec<f64> = (0..16)
            .map(|_| {
                let v: f64 = rand_distr::StandardNormal.sample(&mut rng);
                v * v
            })
            .collect();
        let base = ImportanceLandscape {
            field: Tensor::new(vec![1, 4, 4], data.clone()),
            samples: 1,
            estimator: EstimatorKind::Exact,
        };
        let scaled = ImportanceLandscape {
            field: Tensor::new(vec![1, 4, 4], data.iter().map(|v| 73.5 * v).collect()),
            samples: 1,
            estimator: EstimatorKind::Exact,
        };
        let a = normalize_to_2d(&base).unwrap();
        let b = normalize_to_2d(&scaled).unwrap();
        for (x, y) in a.field.data().iter().zip(b.field.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn laplacian_annihilates_constants_and_interior_ramps() {
        let k = 3;
        let constant = Tensor::full(vec![6], 2.5);
        let lap = laplacian(&constant, k, 1).unwrap();
        assert!(lap.data().iter().all(|&v| v == 0.0));

        let ramp = Tensor::new(vec![7], (0..7).map(|i| 3.0 * i as f64 + 1.0).collect());
        let lap = laplacian(&ramp, k, 1).unwrap();
        for i in 1..6 {
            assert_eq!(lap.data()[i], 0.0);
        }

        let ramp2d =
            Tensor::new(vec![5, 5], (0..25).map(|i| (i / 5) as f64 * 2.0 - (i % 5) as f64).collect());
        let lap = laplacian(&ramp2d, k, 2).unwrap();
        for r in 1..4 {
            for c in 1..4 {
                assert_eq!(lap.data()[r * 5 + c], 0.0, "interior ({r},{c})");
            }
        }
    }

    #[test]
    fn laplacian_of_delta_reproduces_kernel() {
        let mut f = Tensor::zeros(vec![7]);
        f.data_mut()[3] = 1.0;
        let lap = laplacian(&f, 3, 1).unwrap();
        assert_eq!(&lap.data()[2..5], &[1.0, -2.0, 1.0]);
    }

    #[test]
    fn wider_kernels_stay_affine_exact() {
        for k in [5usize, 7] {
            let ramp = Tensor::new(vec![11], (0..11).map(|i| 0.5 * i as f64 - 2.0).collect());
            let lap = laplacian(&ramp, k, 1).unwrap();
            let margin = k / 2;
            for i in margin..11 - margin {
                assert!(lap.data()[i].abs() < 1e-12, "k={k} i={i}: {}", lap.data()[i]);
            }
        }
    }

    #[test]
    fn laplacian_rejects_even_width() {
        assert!(laplacian(&Tensor::zeros(vec![5]), 4, 1).is_err());
    }

    #[test]
    fn energy_matches_two_pass_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let data: Vec<f64> = (0..20).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
        let f = Tensor::new(vec![4, 5], data);
        let got = laplacian_energy(&f, 3, 2).unwrap();
        let lap = laplacian(&f, 3, 2).unwrap();
        let n = lap.len() as f64;
        let mean = lap.data().iter().sum::<f64>() / n;
        let expect = lap.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((got - expect).abs() < 1e-12);
        assert_eq!(laplacian_energy(&Tensor::full(vec![3, 3], 4.0), 3, 2).unwrap(), 0.0);
    }

    #[test]
    fn checkerboard_has_more_energy_than_smoothed() {
        let mut checker = Tensor::zeros(vec![6, 6]);
        for r in 0..6 {
            for c in 0..6 {
                checker.data_mut()[r * 6 + c] = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            }
        }
        // 2x-smoothed version: average each entry with its neighbors twice
        let smooth_once = |f: &Tensor| -> Tensor {
            let mut out = f.clone();
            for r in 0..6i64 {
                for c in 0..6i64 {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for (dr, dc) in [(0, 0), (0, 1), (0, -1), (1, 0), (-1, 0)] {
                        let (rr, cc) = (r + dr, c + dc);
                        if (0..6).contains(&rr) && (0..6).contains(&cc) {
                            acc += f.data()[(rr * 6 + cc) as usize];
                            cnt += 1.0;
                        }
                    }
                    out.data_mut()[(r * 6 + c) as usize] = acc / cnt;
                }
            }
            out
        };
        let smoothed = smooth_once(&smooth_once(&checker));
        let e_checker = laplacian_energy(&checker, 3, 2).unwrap();
        let e_smooth = laplacian_energy(&smoothed, 3, 2).unwrap();
        assert!(e_checker > e_smooth);
    }

    #[test]
    fn tv_examples_and_oracle() {
        assert_eq!(total_variation(&Tensor::full(vec![5], 3.3)), 0.0);
        assert_eq!(total_variation(&Tensor::new(vec![3], vec![0.0, 1.0, 0.0])), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let data: Vec<f64> = (0..12).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
        let f = Tensor::new(vec![3, 4], data.clone());
        // naive double loop
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for r in 0..3 {
            for c in 0..4 {
                if r + 1 < 3 {
                    sum += (data[r * 4 + c] - data[(r + 1) * 4 + c]).powi(2);
                    cnt += 1;
                }
                if c + 1 < 4 {
                    sum += (data[r * 4 + c] - data[r * 4 + c + 1]).powi(2);
                    cnt += 1;
                }
            }
        }
        assert!((total_variation(&f) - sum / cnt as f64).abs() < 1e-12);
    }

    #[test]
    fn smoothness_single_image_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let imgs: Vec<Tensor> = (0..4)
            .map(|_| {
                let d: Vec<f64> =
                    (0..18).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
                Tensor::new(vec![2, 3, 3], d)
            })
            .collect();
        // M = 1: Ŝ is that image's normalized Laplacian magnitude
        let s1 = smoothness_target(&imgs[..1], 3).unwrap();
        let lap = laplacian(&imgs[0], 3, 2).unwrap();
        let fro: f64 = lap.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        for p in 0..9 {
            let ch: f64 = (0..2).map(|c| lap.data()[c * 9 + p].powi(2)).sum::<f64>().sqrt();
            let expect = 3.0 * ch / fro;
            assert!((s1.field.data()[p] - expect).abs() < 1e-12);
        }
        // order invariance
        let fwd = smoothness_target(&imgs, 3).unwrap();
        let mut rev = imgs.clone();
        rev.reverse();
        let bwd = smoothness_target(&rev, 3).unwrap();
        for (a, b) in fwd.field.data().iter().zip(bwd.field.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothness_skips_flat_images() {
        let flat = Tensor::full(vec![1, 3, 3], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let noisy = Tensor::new(
            vec![1, 3, 3],
            (0..9).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect(),
        );
        let s = smoothness_target(&[flat.clone(), noisy], 3).unwrap();
        assert_eq!(s.dataset_size, 1);
        assert!(matches!(smoothness_target(&[flat], 3), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_values_on_tape() {
        // uniform I′ has zero curvature loss and zero distance to a uniform target
        let mut tape = Tape::new(Mode::Eval);
        let i = tape.leaf(Tensor::full(vec![4, 4], 1.0));
        let lc = loss_curvature_node(&mut tape, i, 3).unwrap();
        assert_eq!(tape.value(lc).item(), 0.0);
        let target = SmoothnessMap { field: Tensor::full(vec![4, 4], 1.0), k: 3, dataset_size: 1 };
        let lt = loss_target_node(&mut tape, i, &target).unwrap();
        assert_eq!(tape.value(lt).item(), 0.0);
        let bad = SmoothnessMap { field: Tensor::full(vec![3, 3], 1.0), k: 3, dataset_size: 1 };
        assert!(loss_target_node(&mut tape, i, &bad).is_err());
    }

    #[test]
    fn landscape_losses_differentiate_through_double_backward() {
        let model = toy_model(47);
        let imgs = random_images(3, 48);
        let batch = stack_batch(&imgs).unwrap();
        let target = smoothness_target(&imgs, 3).unwrap();

        let loss_value = |m: &Model, curvature: bool| -> f64 {
            let mut m = m.clone();
            let mut tape = Tape::new(Mode::Eval);
            let (i2, _) = importance_node(&mut tape, &mut m, &batch, None).unwrap();
            let ip = normalize_node(&mut tape, i2).unwrap();
            let l = if curvature {
                loss_curvature_node(&mut tape, ip, 3).unwrap()
            } else {
                loss_target_node(&mut tape, ip, &target).unwrap()
            };
            tape.value(l).item()
        };

        for curvature in [true, false] {
            let mut m = model.clone();
            let mut tape = Tape::new(Mode::Eval);
            let (i2, pass) = importance_node(&mut tape, &mut m, &batch, None).unwrap();
            let ip = normalize_node(&mut tape, i2).unwrap();
            let l = if curvature {
                loss_curvature_node(&mut tape, ip, 3).unwrap()
            } else {
                loss_target_node(&mut tape, ip, &target).unwrap()
            };
            let grads = tape.backward(l).unwrap();
            m.absorb_grads(&tape, &grads, &pass);
            let h = 1e-5;
            for pi in 0..m.params.len() {
                for ei in (0..m.params[pi].value.len()).step_by(5) {
                    let mut plus = model.clone();
                    plus.params[pi].value.data_mut()[ei] += h;
                    let mut minus = model.clone();
                    minus.params[pi].value.data_mut()[ei] -= h;
                    let fd = (loss_value(&plus, curvature) - loss_value(&minus, curvature)) / (2.0 * h);
                    let got = m.params[pi].grad.data()[ei];
                    let denom = fd.abs().max(1e-4);
                    assert!(
                        (got - fd).abs() / denom < 1e-3,
                        "curvature={curvature} param {pi} entry {ei}: {got} vs {fd}"
                    );
                }
            }
        }
    }
}
