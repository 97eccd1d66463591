//! Declarative network architecture descriptions.
//!
//! A [`NetworkSpec`] is a validated, ordered list of layers plus an input
//! shape and an initialization scheme. It parses from / serializes to a fixed
//! JSON schema (see [`parse_spec`]) and is the common input of every other
//! module. Convolutions are "valid" (no implicit padding); an optional `pad`
//! key adds explicit symmetric zero padding, which residual blocks need to
//! keep their inner spatial shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a network.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    Relu,
    BatchNorm { channels: usize },
    Dense { in_channels: usize, out_channels: usize, has_bias: bool },
    Flatten,
    Residual { inner: Vec<LayerSpec>, projection_stride: usize },
}

/// Geometry of a convolutional layer. `kernel`, `stride`, `dilation` and
/// `padding` apply per spatial dimension (kernels are square for rank 2).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_bias: bool,
    pub padding: usize,
}

/// Weight initialization scheme.
#[derive(Debug, Clone, PartialEq)]
pub enum InitScheme {
    He,
    Glorot,
    /// Exact variance per parameterized (conv/dense) layer, in traversal
    /// order (residual inner layers included, depth first).
    CustomVariance(Vec<f64>),
}

/// A validated network description.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub spatial_rank: usize,
    /// Spatial extents of the input, `len() == spatial_rank` (d_w then d_h).
    pub input_extent: Vec<usize>,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub init: InitScheme,
}

/// Spatial extents plus channel count at one depth of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRow {
    pub extent: Vec<usize>,
    pub channels: usize,
}

impl ShapeRow {
    pub fn units(&self) -> usize {
        self.extent.iter().product::<usize>() * self.channels
    }
    pub fn spatial(&self) -> usize {
        self.extent.iter().product()
    }
}

/// Per-layer shape table: `rows[l]` is the shape *entering* layer `l`;
/// `rows[L]` is the network output shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTable {
    pub rows: Vec<ShapeRow>,
}

impl ShapeTable {
    pub fn input(&self) -> &ShapeRow {
        &self.rows[0]
    }
    pub fn output(&self) -> &ShapeRow {
        self.rows.last().expect("non-empty shape table")
    }
}

// ---------------------------------------------------------------------------
// Lowered form
// ---------------------------------------------------------------------------

/// Per-dimension convolution geometry with resolved input/output extents.
/// Dense layers lower to a convolution whose kernel covers the whole
/// remaining extent, so path counting and the engine treat them uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGeom {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub dilation: Vec<usize>,
    pub padding: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_bias: bool,
    pub in_extent: Vec<usize>,
    pub out_extent: Vec<usize>,
    pub from_dense: bool,
}

impl ConvGeom {
    pub fn rank(&self) -> usize {
        self.kernel.len()
    }
    /// Number of kernel taps (product over dimensions).
    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
    pub fn in_spatial(&self) -> usize {
        self.in_extent.iter().product()
    }
    pub fn out_spatial(&self) -> usize {
        self.out_extent.iter().product()
    }
}

/// A layer with all shapes resolved; the form every downstream module walks.
#[derive(Debug, Clone, PartialEq)]
pub enum Lowered {
    Conv(ConvGeom),
    Relu,
    BatchNorm { channels: usize },
    /// Relabels (spatial, channel) units into channels of a single position.
    Flatten { from: ShapeRow, to_channels: usize },
    Residual { inner: Vec<Lowered>, projection_stride: usize, in_shape: ShapeRow, out_shape: ShapeRow },
}

fn conv_out_extent(n: usize, k: usize, stride: usize, dilation: usize, pad: usize, layer: usize) -> Result<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = n + 2 * pad;
    if padded < span {
        return Err(Error::Shape {
            layer,
            msg: format!("kernel span {span} exceeds padded extent {padded}"),
        });
    }
    Ok((padded - span) / stride + 1)
}

fn lower_layers(
    layers: &[LayerSpec],
    mut shape: ShapeRow,
    rank: usize,
    base_index: usize,
) -> Result<(Vec<Lowered>, ShapeRow)> {
    let mut out = Vec::with_capacity(layers.len());
    for (off, layer) in layers.iter().enumerate() {
        let l = base_index + off;
        match layer {
            LayerSpec::Conv(c) => {
                if c.kernel == 0 || c.stride == 0 || c.dilation == 0 {
                    return Err(Error::Validation {
                        layer: l,
                        msg: "kernel, stride and dilation must be >= 1".into(),
                    });
                }
                if c.in_channels == 0 || c.out_channels == 0 {
                    return Err(Error::Validation { layer: l, msg: "channel counts must be >= 1".into() });
                }
                if c.in_channels != shape.channels {
                    return Err(Error::Validation {
                        layer: l,
                        msg: format!("c_in={} does not chain with previous c_out={}", c.in_channels, shape.channels),
                    });
                }
                let mut out_extent = Vec::with_capacity(rank);
                for &n in &shape.extent {
                    out_extent.push(conv_out_extent(n, c.kernel, c.stride, c.dilation, c.padding, l)?);
                }
                if out_extent.iter().any(|&e| e == 0) {
                    return Err(Error::Shape { layer: l, msg: "output extent would drop below 1".into() });
                }
                let geom = ConvGeom {
                    kernel: vec![c.kernel; rank],
                    stride: vec![c.stride; rank],
                    dilation: vec![c.dilation; rank],
                    padding: vec![c.padding; rank],
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    has_bias: c.has_bias,
                    in_extent: shape.extent.clone(),
                    out_extent: out_extent.clone(),
                    from_dense: false,
                };
                shape = ShapeRow { extent: out_extent, channels: c.out_channels };
                out.push(Lowered::Conv(geom));
            }
            LayerSpec::Relu => out.push(Lowered::Relu),
            LayerSpec::BatchNorm { channels } => {
                if *channels != shape.channels {
                    return Err(Error::Validation {
                        layer: l,
                        msg: format!("batchnorm channels {} do not match current {}", channels, shape.channels),
                    });
                }
                out.push(Lowered::BatchNorm { channels: *channels });
            }
            LayerSpec::Dense { in_channels, out_channels, has_bias } => {
                if *in_channels != shape.channels {
                    return Err(Error::Validation {
                        layer: l,
                        msg: format!("c_in={} does not chain with previous c_out={}", in_channels, shape.channels),
                    });
                }
                if *out_channels == 0 {
                    return Err(Error::Validation { layer: l, msg: "channel counts must be >= 1".into() });
                }
                let geom = ConvGeom {
                    kernel: shape.extent.clone(),
                    stride: vec![1; rank],
                    dilation: vec![1; rank],
                    padding: vec![0; rank],
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    has_bias: *has_bias,
                    in_extent: shape.extent.clone(),
                    out_extent: vec![1; rank],
                    from_dense: true,
                };
                shape = ShapeRow { extent: vec![1; rank], channels: *out_channels };
                out.push(Lowered::Conv(geom));
            }
            LayerSpec::Flatten => {
                let to_channels = shape.units();
                out.push(Lowered::Flatten { from: shape.clone(), to_channels });
                shape = ShapeRow { extent: vec![1; rank], channels: to_channels };
            }
            LayerSpec::Residual { inner, projection_stride } => {
                if *projection_stride == 0 {
                    return Err(Error::Validation { layer: l, msg: "proj_stride must be >= 1".into() });
                }
                let (lowered_inner, inner_out) = lower_layers(inner, shape.clone(), rank, l)?;
                let skip_extent: Vec<usize> = shape
                    .extent
                    .iter()
                    .map(|&n| (n - 1) / projection_stride + 1)
                    .collect();
                if inner_out.extent != skip_extent {
                    return Err(Error::Validation {
                        layer: l,
                        msg: format!(
                            "residual inner extent {:?} does not match skip extent {:?} (projection_stride {})",
                            inner_out.extent, skip_extent, projection_stride
                        ),
                    });
                }
                if inner_out.channels != shape.channels {
                    return Err(Error::Validation {
                        layer: l,
                        msg: format!(
                            "identity skip needs matching channels, inner ends with {} but block input has {}",
                            inner_out.channels, shape.channels
                        ),
                    });
                }
                let out_shape = ShapeRow { extent: skip_extent, channels: inner_out.channels };
                out.push(Lowered::Residual {
                    inner: lowered_inner,
                    projection_stride: *projection_stride,
                    in_shape: shape.clone(),
                    out_shape: out_shape.clone(),
                });
                shape = out_shape;
            }
        }
    }
    Ok((out, shape))
}

impl NetworkSpec {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_shape(&self) -> ShapeRow {
        ShapeRow { extent: self.input_extent.clone(), channels: self.input_channels }
    }

    /// Validates the spec and returns the resolved layer pipeline.
    pub fn lowered(&self) -> Result<Vec<Lowered>> {
        if self.spatial_rank != 1 && self.spatial_rank != 2 {
            return Err(Error::Validation { layer: 0, msg: format!("rank must be 1 or 2, got {}", self.spatial_rank) });
        }
        if self.input_extent.len() != self.spatial_rank {
            return Err(Error::Validation {
                layer: 0,
                msg: format!("input has {} spatial extents but rank is {}", self.input_extent.len(), self.spatial_rank),
            });
        }
        if self.input_extent.iter().any(|&e| e == 0) || self.input_channels == 0 {
            return Err(Error::Validation { layer: 0, msg: "input extents and channels must be >= 1".into() });
        }
        if let InitScheme::CustomVariance(vs) = &self.init {
            let n = count_parameterized(&self.layers);
            if vs.len() != n {
                return Err(Error::Validation {
                    layer: 0,
                    msg: format!("custom init lists {} variances but the spec has {} parameterized layers", vs.len(), n),
                });
            }
            if vs.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::Validation { layer: 0, msg: "custom variances must be finite and >= 0".into() });
            }
        }
        let (lowered, _) = lower_layers(&self.layers, self.input_shape(), self.spatial_rank, 0)?;
        Ok(lowered)
    }

    pub fn validate(&self) -> Result<()> {
        self.lowered().map(|_| ())
    }

    /// Variance of each parameterized layer under the spec's init scheme,
    /// depth-first traversal order.
    pub fn layer_variances(&self) -> Result<Vec<f64>> {
        let lowered = self.lowered()?;
        match &self.init {
            InitScheme::CustomVariance(vs) => Ok(vs.clone()),
            scheme => {
                let mut out = Vec::new();
                collect_scheme_variances(&lowered, scheme, &mut out);
                Ok(out)
            }
        }
    }
}

fn collect_scheme_variances(layers: &[Lowered], scheme: &InitScheme, out: &mut Vec<f64>) {
    for layer in layers {
        match layer {
            Lowered::Conv(g) => {
                let fan_in = (g.kernel_volume() * g.in_channels) as f64;
                let fan_out = (g.kernel_volume() * g.out_channels) as f64;
                let v = match scheme {
                    InitScheme::He => 2.0 / fan_in,
                    InitScheme::Glorot => 2.0 / (fan_in + fan_out),
                    InitScheme::CustomVariance(_) => unreachable!("handled by caller"),
                };
                out.push(v);
            }
            Lowered::Residual { inner, .. } => collect_scheme_variances(inner, scheme, out),
            _ => {}
        }
    }
}

fn count_parameterized(layers: &[LayerSpec]) -> usize {
    layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv(_) | LayerSpec::Dense { .. } => 1,
            LayerSpec::Residual { inner, .. } => count_parameterized(inner),
            _ => 0,
        })
        .sum()
}

/// Shape table over all layer boundaries, `rows[0]` = input, `rows[L]` = output.
pub fn output_shape(spec: &NetworkSpec) -> Result<ShapeTable> {
    let mut rows = vec![spec.input_shape()];
    let mut shape = spec.input_shape();
    for (l, layer) in spec.layers.iter().enumerate() {
        let (_, next) = lower_layers(std::slice::from_ref(layer), shape, spec.spatial_rank, l)?;
        rows.push(next.clone());
        shape = next;
    }
    Ok(ShapeTable { rows })
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    rank: usize,
    input: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    init: Option<RawInit>,
    layers: Vec<RawLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawInit {
    Name(String),
    Custom { custom: Vec<f64> },
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    #[serde(rename = "type")]
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dilation: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c_in: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c_out: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inner: Option<Vec<RawLayer>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    proj_stride: Option<usize>,
}

fn reject_extras(raw: &RawLayer, layer: usize, allowed: &[&str]) -> Result<()> {
    let mut present: Vec<&str> = Vec::new();
    if raw.k.is_some() {
        present.push("k");
    }
    if raw.stride.is_some() {
        present.push("stride");
    }
    if raw.dilation.is_some() {
        present.push("dilation");
    }
    if raw.c_in.is_some() {
        present.push("c_in");
    }
    if raw.c_out.is_some() {
        present.push("c_out");
    }
    if raw.bias.is_some() {
        present.push("bias");
    }
    if raw.pad.is_some() {
        present.push("pad");
    }
    if raw.inner.is_some() {
        present.push("inner");
    }
    if raw.proj_stride.is_some() {
        present.push("proj_stride");
    }
    for key in present {
        if !allowed.contains(&key) {
            return Err(Error::Validation {
                layer,
                msg: format!("key `{key}` is not valid for layer type `{}`", raw.kind),
            });
        }
    }
    Ok(())
}

fn layer_from_raw(raw: &RawLayer, layer: usize) -> Result<LayerSpec> {
    let missing = |key: &str| Error::Validation {
        layer,
        msg: format!("layer type `{}` requires key `{key}`", raw.kind),
    };
    match raw.kind.as_str() {
        "conv" => {
            reject_extras(raw, layer, &["k", "stride", "dilation", "c_in", "c_out", "bias", "pad"])?;
            Ok(LayerSpec::Conv(ConvSpec {
                kernel: raw.k.ok_or_else(|| missing("k"))?,
                stride: raw.stride.unwrap_or(1),
                dilation: raw.dilation.unwrap_or(1),
                in_channels: raw.c_in.ok_or_else(|| missing("c_in"))?,
                out_channels: raw.c_out.ok_or_else(|| missing("c_out"))?,
                has_bias: raw.bias.unwrap_or(true),
                padding: raw.pad.unwrap_or(0),
            }))
        }
        "relu" => {
            reject_extras(raw, layer, &[])?;
            Ok(LayerSpec::Relu)
        }
        "batchnorm" => {
            reject_extras(raw, layer, &["c_in"])?;
            Ok(LayerSpec::BatchNorm { channels: raw.c_in.ok_or_else(|| missing("c_in"))? })
        }
        "dense" => {
            reject_extras(raw, layer, &["c_in", "c_out", "bias"])?;
            Ok(LayerSpec::Dense {
                in_channels: raw.c_in.ok_or_else(|| missing("c_in"))?,
                out_channels: raw.c_out.ok_or_else(|| missing("c_out"))?,
                has_bias: raw.bias.unwrap_or(true),
            })
        }
        "flatten" => {
            reject_extras(raw, layer, &[])?;
            Ok(LayerSpec::Flatten)
        }
        "residual" => {
            reject_extras(raw, layer, &["inner", "proj_stride"])?;
            let inner_raw = raw.inner.as_ref().ok_or_else(|| missing("inner"))?;
            let inner = inner_raw
                .iter()
                .enumerate()
                .map(|(i, r)| layer_from_raw(r, i))
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerSpec::Residual { inner, projection_stride: raw.proj_stride.unwrap_or(1) })
        }
        other => Err(Error::Validation { layer, msg: format!("unknown layer type `{other}`") }),
    }
}

fn layer_to_raw(layer: &LayerSpec) -> RawLayer {
    match layer {
        LayerSpec::Conv(c) => RawLayer {
            kind: "conv".into(),
            k: Some(c.kernel),
            stride: Some(c.stride),
            dilation: Some(c.dilation),
            c_in: Some(c.in_channels),
            c_out: Some(c.out_channels),
            bias: Some(c.has_bias),
            pad: if c.padding == 0 { None } else { Some(c.padding) },
            ..Default::default()
        },
        LayerSpec::Relu => RawLayer { kind: "relu".into(), ..Default::default() },
        LayerSpec::BatchNorm { channels } => {
            RawLayer { kind: "batchnorm".into(), c_in: Some(*channels), ..Default::default() }
        }
        LayerSpec::Dense { in_channels, out_channels, has_bias } => RawLayer {
            kind: "dense".into(),
            c_in: Some(*in_channels),
            c_out: Some(*out_channels),
            bias: Some(*has_bias),
            ..Default::default()
        },
        LayerSpec::Flatten => RawLayer { kind: "flatten".into(), ..Default::default() },
        LayerSpec::Residual { inner, projection_stride } => RawLayer {
            kind: "residual".into(),
            inner: Some(inner.iter().map(layer_to_raw).collect()),
            proj_stride: Some(*projection_stride),
            ..Default::default()
        },
    }
}

/// Parses an architecture document. The schema: top-level keys `rank` (1|2),
/// `input` (`[extent(,extent),channels]`), optional `init` (`"he"`, `"glorot"`
/// or `{"custom":[S0,...]}`, default `"he"`), and `layers`. Unknown keys are
/// rejected.
pub fn parse_spec(text: &str) -> Result<NetworkSpec> {
    let raw: RawDoc = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: format!("line {} column {}", e.line(), e.column()),
        msg: e.to_string(),
    })?;
    if raw.input.len() != raw.rank + 1 {
        return Err(Error::Validation {
            layer: 0,
            msg: format!("`input` needs {} entries for rank {} ([extents..., channels])", raw.rank + 1, raw.rank),
        });
    }
    let init = match &raw.init {
        None => InitScheme::He,
        Some(RawInit::Name(name)) => match name.as_str() {
            "he" => InitScheme::He,
            "glorot" => InitScheme::Glorot,
            other => {
                return Err(Error::Validation { layer: 0, msg: format!("unknown init scheme `{other}`") });
            }
        },
        Some(RawInit::Custom { custom }) => InitScheme::CustomVariance(custom.clone()),
    };
    let layers = raw
        .layers
        .iter()
        .enumerate()
        .map(|(l, r)| layer_from_raw(r, l))
        .collect::<Result<Vec<_>>>()?;
    let spec = NetworkSpec {
        spatial_rank: raw.rank,
        input_extent: raw.input[..raw.rank].to_vec(),
        input_channels: raw.input[raw.rank],
        layers,
        init,
    };
    spec.validate()?;
    Ok(spec)
}

/// Emits the canonical JSON document; `parse_spec(serialize_spec(s))`
/// structurally equals `s`.
pub fn serialize_spec(spec: &NetworkSpec) -> String {
    let mut input = spec.input_extent.clone();
    input.push(spec.input_channels);
    let raw = RawDoc {
        rank: spec.spatial_rank,
        input,
        init: Some(match &spec.init {
            InitScheme::He => RawInit::Name("he".into()),
            InitScheme::Glorot => RawInit::Name("glorot".into()),
            InitScheme::CustomVariance(vs) => RawInit::Custom { custom: vs.clone() },
        }),
        layers: spec.layers.iter().map(layer_to_raw).collect(),
    };
    serde_json::to_string_pretty(&raw).expect("spec serialization cannot fail")
}

/// Reads and parses a spec file.
pub fn load_spec(path: &std::path::Path) -> Result<NetworkSpec> {
    parse_spec(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1_doc() -> &'static str {
        r#"{"rank":1,"input":[5,1],"layers":[
            {"type":"conv","k":3,"c_in":1,"c_out":1},
            {"type":"conv","k":3,"c_in":1,"c_out":1}]}"#
    }

    #[test]
    fn minimal_doc_shapes() {
        let spec = parse_spec(r#"{"rank":1,"input":[5,1],"layers":[{"type":"conv","k":3,"c_in":1,"c_out":1}]}"#)
            .unwrap();
        assert_eq!(spec.depth(), 1);
        let table = output_shape(&spec).unwrap();
        assert_eq!(table.output().extent, vec![3]);
    }

    #[test]
    fn fig1_network_shapes() {
        let spec = parse_spec(fig1_doc()).unwrap();
        assert_eq!(spec.depth(), 2);
        let table = output_shape(&spec).unwrap();
        assert_eq!(table.rows[1].extent, vec![3]);
        assert_eq!(table.output().extent, vec![1]);
    }

    #[test]
    fn channel_mismatch_names_layer() {
        let err = parse_spec(
            r#"{"rank":1,"input":[9,1],"layers":[
                {"type":"conv","k":3,"c_in":1,"c_out":4},
                {"type":"conv","k":3,"c_in":2,"c_out":2}]}"#,
        )
        .unwrap_err();
        match err {
            Error::Validation { layer, .. } => assert_eq!(layer, 1),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(parse_spec(r#"{"rank":1,"input":[5,1],"layers":[],"extra":1}"#).is_err());
        assert!(parse_spec(r#"{"rank":1,"input":[5,1],"layers":[{"type":"relu","k":3}]}"#).is_err());
    }

    #[test]
    fn round_trip_fig1() {
        let spec = parse_spec(fig1_doc()).unwrap();
        let doc = serialize_spec(&spec);
        assert_eq!(parse_spec(&doc).unwrap(), spec);
    }

    #[test]
    fn round_trip_custom_variance_exact() {
        let spec = NetworkSpec {
            spatial_rank: 1,
            input_extent: vec![7],
            input_channels: 1,
            layers: vec![LayerSpec::Conv(ConvSpec {
                kernel: 3,
                stride: 1,
                dilation: 1,
                in_channels: 1,
                out_channels: 1,
                has_bias: false,
                padding: 0,
            })],
            init: InitScheme::CustomVariance(vec![0.123456789012345678]),
        };
        let back = parse_spec(&serialize_spec(&spec)).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn round_trip_residual_nesting() {
        let doc = r#"{"rank":1,"input":[9,2],"layers":[
            {"type":"residual","inner":[
                {"type":"conv","k":3,"pad":1,"c_in":2,"c_out":2},
                {"type":"relu"}
            ]}]}"#;
        let spec = parse_spec(doc).unwrap();
        let back = parse_spec(&serialize_spec(&spec)).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn strided_shape_matches_placement_count() {
        let spec = parse_spec(r#"{"rank":1,"input":[7,1],"layers":[{"type":"conv","k":3,"stride":2,"c_in":1,"c_out":1}]}"#)
            .unwrap();
        assert_eq!(output_shape(&spec).unwrap().output().extent, vec![3]);
    }

    #[test]
    fn kernel_one_keeps_extent() {
        let spec = parse_spec(r#"{"rank":1,"input":[11,1],"layers":[{"type":"conv","k":1,"c_in":1,"c_out":1}]}"#)
            .unwrap();
        assert_eq!(output_shape(&spec).unwrap().output().extent, vec![11]);
    }

    #[test]
    fn extent_below_one_is_shape_error() {
        let err = parse_spec(r#"{"rank":1,"input":[2,1],"layers":[{"type":"conv","k":3,"c_in":1,"c_out":1}]}"#)
            .unwrap_err();
        match err {
            Error::Shape { layer, .. } => assert_eq!(layer, 0),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn residual_needs_shape_preservation() {
        // valid k=3 conv shrinks the extent, so an unpadded inner block is rejected
        let err = parse_spec(
            r#"{"rank":1,"input":[9,1],"layers":[
                {"type":"residual","inner":[{"type":"conv","k":3,"c_in":1,"c_out":1}]}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn shape_propagation_matches_placement_enumeration() {
        // brute force: count kernel placements that stay inside the padded input
        for n in 1..=16usize {
            for k in 1..=5usize {
                for stride in 1..=3usize {
                    for dilation in 1..=2usize {
                        let doc = format!(
                            r#"{{"rank":1,"input":[{n},1],"layers":[{{"type":"conv","k":{k},"stride":{stride},"dilation":{dilation},"c_in":1,"c_out":1}}]}}"#
                        );
                        let span = dilation * (k - 1) + 1;
                        let mut places = 0usize;
                        let mut start = 0usize;
                        while start + span <= n {
                            places += 1;
                            start += stride;
                        }
                        match parse_spec(&doc) {
                            Ok(spec) => {
                                let got = output_shape(&spec).unwrap().output().extent[0];
                                assert_eq!(got, places, "n={n} k={k} s={stride} d={dilation}");
                            }
                            Err(_) => assert_eq!(places, 0, "n={n} k={k} s={stride} d={dilation}"),
                        }
                    }
                }
            }
        }
    }
}
