//! Exact output-to-input path counting over the network lattice.
//!
//! A path from an output unit to an input unit is a vector of per-layer
//! commands: each command picks a kernel offset plus an (in, out) channel
//! pair, or skips a residual block. Counts are computed two independent
//! ways: a generalized-Pascal dynamic program over unit fields
//! ([`count_paths_dp`]) and exhaustive route enumeration
//! ([`enumerate_routes`]), which cross-validate each other. All counts are
//! exact big integers; averages over output units are exact rationals.

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{ToPrimitive, Zero};

use crate::archspec::{Lowered, NetworkSpec, ShapeRow};
use crate::error::{Error, Result};

/// A unit of some layer: spatial position plus channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitCoord {
    pub pos: Vec<usize>,
    pub channel: usize,
}

impl UnitCoord {
    pub fn new(pos: Vec<usize>, channel: usize) -> Self {
        UnitCoord { pos, channel }
    }

    /// Channel-major flattening, matching the `[channels, spatial...]` tensor
    /// layout: `flat = channel * ΠS + pos_flat` with row-major positions.
    pub fn flat(&self, shape: &ShapeRow) -> usize {
        let mut p = 0usize;
        for (d, &x) in self.pos.iter().enumerate() {
            p = p * shape.extent[d] + x;
        }
        self.channel * shape.spatial() + p
    }

    pub fn from_flat(flat: usize, shape: &ShapeRow) -> Self {
        let spatial = shape.spatial();
        let channel = flat / spatial;
        let mut p = flat % spatial;
        let mut pos = vec![0usize; shape.extent.len()];
        for d in (0..shape.extent.len()).rev() {
            pos[d] = p % shape.extent[d];
            p /= shape.extent[d];
        }
        UnitCoord { pos, channel }
    }

    fn in_bounds(&self, shape: &ShapeRow) -> bool {
        self.pos.len() == shape.extent.len()
            && self.channel < shape.channels
            && self.pos.iter().zip(&shape.extent).all(|(&p, &e)| p < e)
    }
}

/// One step of a route: a weight-tensor index, or a residual bypass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Kernel { offset: Vec<usize>, in_channel: usize, out_channel: usize },
    Skip,
}

/// Exact per-(output unit, input unit) path counts for one layer pair.
#[derive(Debug, Clone)]
pub struct PathCountTable {
    /// `counts[j][i]`, both indices flat per [`UnitCoord::flat`].
    pub counts: Vec<Vec<BigUint>>,
    pub out_shape: ShapeRow,
    pub in_shape: ShapeRow,
    /// Layer indices `(l, l')` the table connects; the full network is `(L, 0)`.
    pub layer_pair: (usize, usize),
}

impl PathCountTable {
    pub fn row(&self, out_unit: usize) -> &[BigUint] {
        &self.counts[out_unit]
    }
}

/// Expected path count per input unit: `#p̄(i) = (1/Z)·Σ_j #p(j→i)`,
/// kept exact as `numer(i) / z`.
#[derive(Debug, Clone)]
pub struct PathField {
    pub numer: Vec<BigUint>,
    /// Number of output units averaged over (spatial positions × channels).
    pub z: u64,
    pub shape: ShapeRow,
}

impl PathField {
    pub fn value(&self, flat: usize) -> f64 {
        self.numer[flat].to_f64().unwrap_or(f64::INFINITY) / self.z as f64
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.numer.len()).map(|i| self.value(i)).collect()
    }

    /// `(numerator, denominator)` with the gcd divided out.
    pub fn reduced(&self, flat: usize) -> (BigUint, BigUint) {
        let num = self.numer[flat].clone();
        let den = BigUint::from(self.z);
        if num.is_zero() {
            return (num, BigUint::from(1u64));
        }
        let g = num.gcd(&den);
        (&num / &g, &den / &g)
    }

    /// Field averaged over input channels, one value per spatial position.
    pub fn spatial_values(&self) -> Vec<f64> {
        let c = self.shape.channels;
        let sp = self.shape.spatial();
        (0..sp)
            .map(|p| (0..c).map(|ch| self.value(ch * sp + p)).sum::<f64>() / c as f64)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// route
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    commands: &'a [Command],
    next: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self) -> Result<&'a Command> {
        let c = self
            .commands
            .get(self.next)
            .ok_or_else(|| Error::InvalidCommand("command vector too short for the crossed layers".into()))?;
        self.next += 1;
        Ok(c)
    }

    fn peek(&self) -> Option<&'a Command> {
        self.commands.get(self.next)
    }
}

fn route_layers(
    layers: &[Lowered],
    mut unit: UnitCoord,
    cursor: &mut Cursor,
) -> Result<Option<UnitCoord>> {
    for layer in layers.iter().rev() {
        match layer {
            Lowered::Conv(g) => {
                let cmd = cursor.take()?;
                let Command::Kernel { offset, in_channel, out_channel } = cmd else {
                    return Err(Error::InvalidCommand("`skip` is only valid at a residual block".into()));
                };
                if offset.len() != g.rank() {
                    return Err(Error::InvalidCommand(format!(
                        "offset has {} dims, layer has {}",
                        offset.len(),
                        g.rank()
                    )));
                }
                for d in 0..g.rank() {
                    if offset[d] >= g.kernel[d] {
                        return Err(Error::InvalidCommand(format!(
                            "kernel offset {} out of range (K={})",
                            offset[d], g.kernel[d]
                        )));
                    }
                }
                if *in_channel >= g.in_channels || *out_channel >= g.out_channels {
                    return Err(Error::InvalidCommand("channel out of range".into()));
                }
                if *out_channel != unit.channel {
                    // the weight entry does not touch this unit: no path
                    return Ok(None);
                }
                let mut pos = Vec::with_capacity(g.rank());
                for d in 0..g.rank() {
                    let raw = unit.pos[d] * g.stride[d] + offset[d] * g.dilation[d];
                    if raw < g.padding[d] {
                        return Ok(None);
                    }
                    let i = raw - g.padding[d];
                    if i >= g.in_extent[d] {
                        return Ok(None);
                    }
                    pos.push(i);
                }
                unit = UnitCoord { pos, channel: *in_channel };
            }
            Lowered::Relu | Lowered::BatchNorm { .. } => {}
            Lowered::Flatten { from, .. } => {
                // invert the relabeling: channel index decomposes into the
                // pre-flatten (position, channel)
                unit = UnitCoord::from_flat(unit.channel, from);
            }
            Lowered::Residual { inner, projection_stride, in_shape, .. } => {
                if matches!(cursor.peek(), Some(Command::Skip)) {
                    cursor.take()?;
                    let pos: Vec<usize> = unit.pos.iter().map(|&p| p * projection_stride).collect();
                    let cand = UnitCoord { pos, channel: unit.channel };
                    if !cand.in_bounds(in_shape) {
                        return Ok(None);
                    }
                    unit = cand;
                } else {
                    match route_layers(inner, unit, cursor)? {
                        Some(u) => unit = u,
                        None => return Ok(None),
                    }
                }
            }
        }
    }
    Ok(Some(unit))
}

/// Walks one command per crossed layer from `out_index` (a unit of the output
/// layer) down to the input layer. Commands are consumed output-side first.
/// Returns `None` when the route leaves the tensor bounds or names a weight
/// entry that does not touch the current unit.
pub fn route(spec: &NetworkSpec, out_index: &UnitCoord, commands: &[Command]) -> Result<Option<UnitCoord>> {
    let lowered = spec.lowered()?;
    let out_shape = crate::archspec::output_shape(spec)?.output().clone();
    if !out_index.in_bounds(&out_shape) {
        return Err(Error::Contract(format!("output index {out_index:?} out of bounds for {out_shape:?}")));
    }
    let mut cursor = Cursor { commands, next: 0 };
    let result = route_layers(&lowered, out_index.clone(), &mut cursor)?;
    if result.is_some() && cursor.next != commands.len() {
        return Err(Error::InvalidCommand(format!(
            "command vector has {} entries but only {} layers were crossed",
            commands.len(),
            cursor.next
        )));
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// enumeration
// ---------------------------------------------------------------------------

/// Size of the raw command product space (all kernel offsets × all channel
/// pairs per layer; residual blocks add one `skip` alternative).
pub fn command_space(layers: &[Lowered]) -> f64 {
    let mut total = 1.0f64;
    for layer in layers {
        match layer {
            Lowered::Conv(g) => {
                total *= (g.kernel_volume() * g.in_channels * g.out_channels) as f64;
            }
            Lowered::Residual { inner, .. } => total *= 1.0 + command_space(inner),
            _ => {}
        }
    }
    total
}

const ENUMERATION_LIMIT: u64 = 10_000_000;

fn enumerate_rec(layers: &[Lowered], unit: &UnitCoord, acc: &mut [BigUint], shape0: &ShapeRow) {
    let Some((layer, rest)) = layers.split_last() else {
        acc[unit.flat(shape0)] += 1u32;
        return;
    };
    match layer {
        Lowered::Conv(g) => {
            // only commands whose out-channel matches reach this unit; the
            // others route to ⊥ and contribute nothing
            let mut offset = vec![0usize; g.rank()];
            loop {
                let mut pos = Vec::with_capacity(g.rank());
                let mut ok = true;
                for d in 0..g.rank() {
                    let raw = unit.pos[d] * g.stride[d] + offset[d] * g.dilation[d];
                    if raw < g.padding[d] || raw - g.padding[d] >= g.in_extent[d] {
                        ok = false;
                        break;
                    }
                    pos.push(raw - g.padding[d]);
                }
                if ok {
                    for ci in 0..g.in_channels {
                        enumerate_rec(rest, &UnitCoord { pos: pos.clone(), channel: ci }, acc, shape0);
                    }
                }
                // advance the mixed-radix offset counter
                let mut d = 0;
                loop {
                    if d == g.rank() {
                        return;
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
        Lowered::Relu | Lowered::BatchNorm { .. } => enumerate_rec(rest, unit, acc, shape0),
        Lowered::Flatten { from, .. } => {
            let u = UnitCoord::from_flat(unit.channel, from);
            enumerate_rec(rest, &u, acc, shape0);
        }
        Lowered::Residual { inner, projection_stride, in_shape, .. } => {
            // skip branch
            let pos: Vec<usize> = unit.pos.iter().map(|&p| p * projection_stride).collect();
            let skip_unit = UnitCoord { pos, channel: unit.channel };
            if skip_unit.in_bounds(in_shape) {
                enumerate_rec(rest, &skip_unit, acc, shape0);
            }
            // through branch: exhaust the inner block, then continue below.
            // Assemble `inner ++ rest` walk by enumerating inner into an
            // intermediate field, then recursing per reached unit.
            let mut mid = vec![BigUint::zero(); in_shape.units()];
            enumerate_rec(inner, unit, &mut mid, in_shape);
            for (flat, count) in mid.iter().enumerate() {
                if count.is_zero() {
                    continue;
                }
                let u = UnitCoord::from_flat(flat, in_shape);
                // counts through the inner block can exceed 1; replay each
                let n = count.to_u64().expect("guarded enumeration fits u64");
                for _ in 0..n {
                    enumerate_rec(rest, &u, acc, shape0);
                }
            }
        }
    }
}

/// Exhaustively enumerates all command vectors from one output unit and
/// tallies the input unit each one reaches. Refuses when the command space
/// exceeds 10^7.
pub fn enumerate_routes(spec: &NetworkSpec, out_index: &UnitCoord) -> Result<Vec<BigUint>> {
    let lowered = spec.lowered()?;
    let space = command_space(&lowered);
    if space > ENUMERATION_LIMIT as f64 {
        return Err(Error::CommandSpaceTooLarge { estimate: space, limit: ENUMERATION_LIMIT });
    }
    let out_shape = crate::archspec::output_shape(spec)?.output().clone();
    if !out_index.in_bounds(&out_shape) {
        return Err(Error::Contract(format!("output index {out_index:?} out of bounds")));
    }
    let in_shape = spec.input_shape();
    let mut acc = vec![BigUint::zero(); in_shape.units()];
    enumerate_rec(&lowered, out_index, &mut acc, &in_shape);
    Ok(acc)
}

// ---------------------------------------------------------------------------
// dynamic program
// ---------------------------------------------------------------------------

/// Input-unit shape of a lowered pipeline.
fn in_shape_of(layers: &[Lowered], out_shape: &ShapeRow) -> ShapeRow {
    match layers.first() {
        None => out_shape.clone(),
        Some(Lowered::Conv(g)) => ShapeRow { extent: g.in_extent.clone(), channels: g.in_channels },
        Some(Lowered::Relu) | Some(Lowered::BatchNorm { .. }) => in_shape_of(&layers[1..], out_shape),
        Some(Lowered::Flatten { from, .. }) => from.clone(),
        Some(Lowered::Residual { in_shape, .. }) => in_shape.clone(),
    }
}

fn shape_after(layers: &[Lowered], input: &ShapeRow) -> ShapeRow {
    let mut shape = input.clone();
    for layer in layers {
        match layer {
            Lowered::Conv(g) => shape = ShapeRow { extent: g.out_extent.clone(), channels: g.out_channels },
            Lowered::Flatten { to_channels, .. } => {
                shape = ShapeRow { extent: vec![1; shape.extent.len()], channels: *to_channels }
            }
            Lowered::Residual { out_shape, .. } => shape = out_shape.clone(),
            _ => {}
        }
    }
    shape
}

/// One backward step of the count field through a layer stack.
fn flow_counts(layers: &[Lowered], field: Vec<BigUint>, out_shape: &ShapeRow) -> (Vec<BigUint>, ShapeRow) {
    let mut field = field;
    let mut shape = out_shape.clone();
    for layer in layers.iter().rev() {
        match layer {
            Lowered::Conv(g) => {
                let in_shape = ShapeRow { extent: g.in_extent.clone(), channels: g.in_channels };
                let mut next = vec![BigUint::zero(); in_shape.units()];
                let rank = g.rank();
                for flat in 0..field.len() {
                    if field[flat].is_zero() {
                        continue;
                    }
                    let unit = UnitCoord::from_flat(flat, &shape);
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
                                let f = UnitCoord { pos: pos.clone(), channel: ci }.flat(&in_shape);
                                next[f] += &field[flat];
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
                field = next;
                shape = in_shape;
            }
            Lowered::Relu | Lowered::BatchNorm { .. } => {}
            Lowered::Flatten { from, .. } => {
                // the flat unit index is preserved by construction
                shape = from.clone();
            }
            Lowered::Residual { inner, projection_stride, in_shape, .. } => {
                let (through, _) = flow_counts(inner, field.clone(), &shape);
                let mut next = through;
                for flat in 0..field.len() {
                    if field[flat].is_zero() {
                        continue;
                    }
                    let unit = UnitCoord::from_flat(flat, &shape);
                    let pos: Vec<usize> = unit.pos.iter().map(|&p| p * projection_stride).collect();
                    let cand = UnitCoord { pos, channel: unit.channel };
                    if cand.in_bounds(in_shape) {
                        next[cand.flat(in_shape)] += &field[flat];
                    }
                }
                field = next;
                shape = in_shape.clone();
            }
        }
    }
    (field, shape)
}

/// Exact big-integer path counts from every output unit to every input unit,
/// computed by the generalized-Pascal dynamic program.
pub fn count_paths_dp(spec: &NetworkSpec) -> Result<PathCountTable> {
    let lowered = spec.lowered()?;
    let out_shape = crate::archspec::output_shape(spec)?.output().clone();
    let in_shape = spec.input_shape();
    let mut counts = Vec::with_capacity(out_shape.units());
    for j in 0..out_shape.units() {
        let mut seed = vec![BigUint::zero(); out_shape.units()];
        seed[j] = BigUint::from(1u32);
        let (row, shape) = flow_counts(&lowered, seed, &out_shape);
        debug_assert_eq!(shape, in_shape);
        counts.push(row);
    }
    Ok(PathCountTable { counts, out_shape, in_shape, layer_pair: (spec.depth(), 0) })
}

/// Expected path counts `#p̄` over output units, exact rationals with
/// `Z = output spatial positions × output channels`.
pub fn path_field(spec: &NetworkSpec) -> Result<PathField> {
    let lowered = spec.lowered()?;
    let out_shape = crate::archspec::output_shape(spec)?.output().clone();
    Ok(field_for_lowered(&lowered, &out_shape))
}

/// [`path_field`] on an already-lowered pipeline slice; used to query
/// sub-networks.
pub fn field_for_lowered(layers: &[Lowered], out_shape: &ShapeRow) -> PathField {
    let seed = vec![BigUint::from(1u32); out_shape.units()];
    let (numer, shape) = flow_counts(layers, seed, out_shape);
    debug_assert_eq!(shape, in_shape_of(layers, out_shape));
    PathField { numer, z: out_shape.units() as u64, shape }
}

/// Output shape of a lowered slice given its input shape.
pub fn lowered_output_shape(layers: &[Lowered], input: &ShapeRow) -> ShapeRow {
    shape_after(layers, input)
}

/// Backward count flow from an arbitrary seeding of the top-layer units;
/// building block for sub-network queries.
pub fn flow_counts_from(
    layers: &[Lowered],
    seed: Vec<BigUint>,
    out_shape: &ShapeRow,
) -> (Vec<BigUint>, ShapeRow) {
    flow_counts(layers, seed, out_shape)
}

// ---------------------------------------------------------------------------
// multinomial closed form
// ---------------------------------------------------------------------------

fn factorial(n: usize) -> BigUint {
    let mut f = BigUint::from(1u32);
    for i in 2..=n {
        f *= i;
    }
    f
}

/// Number of length-`depth` command vectors over offsets `{0..kernel-1}`
/// whose offsets sum to `total_offset`, by the multinomial formula
/// `Σ L!/∏ c_j!` over offset-count combinations. Equals the coefficient of
/// `x^total_offset` in `(1 + x + … + x^{K-1})^L`.
pub fn multinomial_count(depth: usize, kernel: usize, total_offset: i64) -> BigUint {
    if kernel == 0 || depth == 0 {
        return if total_offset == 0 { BigUint::from(1u32) } else { BigUint::zero() };
    }
    if total_offset < 0 || total_offset > (depth * (kernel - 1)) as i64 {
        return BigUint::zero();
    }
    let l_fact = factorial(depth);
    let mut total = BigUint::zero();
    // counts[j] = how many commands picked offset j
    fn rec(
        j: usize,
        kernel: usize,
        remaining: usize,
        offset_left: i64,
        denom: &BigUint,
        l_fact: &BigUint,
        total: &mut BigUint,
    ) {
        if j == kernel - 1 {
            // the last bucket takes everything left; its weighted sum must match
            if remaining as i64 * (kernel as i64 - 1) == offset_left {
                let d = denom * factorial(remaining);
                *total += l_fact / d;
            }
            return;
        }
        for c in 0..=remaining {
            let used = c as i64 * j as i64;
            if used > offset_left {
                break;
            }
            let max_rest = (remaining - c) as i64 * (kernel as i64 - 1);
            if offset_left - used > max_rest {
                continue;
            }
            rec(j + 1, kernel, remaining - c, offset_left - used, &(denom * factorial(c)), l_fact, total);
        }
    }
    rec(0, kernel, depth, total_offset, &BigUint::from(1u32), &l_fact, &mut total);
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::parse_spec;

    fn linear_stack(extent: usize, kernel: usize, depth: usize, channels: usize) -> NetworkSpec {
        let mut layers = Vec::new();
        for l in 0..depth {
            let c_in = if l == 0 { 1 } else { channels };
            let c_out = if l == depth - 1 { 1 } else { channels };
            layers.push(format!(
                r#"{{"type":"conv","k":{kernel},"c_in":{c_in},"c_out":{c_out}}}"#
            ));
        }
        parse_spec(&format!(
            r#"{{"rank":1,"input":[{extent},1],"layers":[{}]}}"#,
            layers.join(",")
        ))
        .unwrap()
    }

    fn fig1() -> NetworkSpec {
        linear_stack(5, 3, 2, 1)
    }

    fn biguints(xs: &[u64]) -> Vec<BigUint> {
        xs.iter().map(|&x| BigUint::from(x)).collect()
    }

    #[test]
    fn fig1_center_route() {
        let spec = fig1();
        let cmd = Command::Kernel { offset: vec![1], in_channel: 0, out_channel: 0 };
        let hit = route(&spec, &UnitCoord::new(vec![0], 0), &[cmd.clone(), cmd]).unwrap();
        assert_eq!(hit, Some(UnitCoord::new(vec![2], 0)));
    }

    #[test]
    fn one_layer_route_is_offset() {
        let spec = linear_stack(7, 3, 1, 1);
        for j in 0..5usize {
            for o in 0..3usize {
                let hit = route(
                    &spec,
                    &UnitCoord::new(vec![j], 0),
                    &[Command::Kernel { offset: vec![o], in_channel: 0, out_channel: 0 }],
                )
                .unwrap();
                assert_eq!(hit, Some(UnitCoord::new(vec![j + o], 0)));
            }
        }
    }

    #[test]
    fn route_is_permutation_invariant() {
        let spec = linear_stack(9, 3, 3, 1);
        let cmds = [0usize, 2, 1]
            .map(|o| Command::Kernel { offset: vec![o], in_channel: 0, out_channel: 0 });
        let permuted = [cmds[2].clone(), cmds[0].clone(), cmds[1].clone()];
        let a = route(&spec, &UnitCoord::new(vec![1], 0), &cmds).unwrap();
        let b = route(&spec, &UnitCoord::new(vec![1], 0), &permuted).unwrap();
        assert_eq!(a, b);
        assert!(a.is_some());
    }

    #[test]
    fn route_rejects_bad_commands() {
        let spec = linear_stack(5, 3, 1, 1);
        let err = route(
            &spec,
            &UnitCoord::new(vec![0], 0),
            &[Command::Kernel { offset: vec![3], in_channel: 0, out_channel: 0 }],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidCommand(_)));
        let err = route(
            &spec,
            &UnitCoord::new(vec![0], 0),
            &[Command::Kernel { offset: vec![0], in_channel: 5, out_channel: 0 }],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidCommand(_)));
    }

    #[test]
    fn fig1_enumeration_counts() {
        let spec = fig1();
        let counts = enumerate_routes(&spec, &UnitCoord::new(vec![0], 0)).unwrap();
        assert_eq!(counts, biguints(&[1, 2, 3, 2, 1]));
    }

    #[test]
    fn single_layer_counts_are_ones() {
        let spec = linear_stack(3, 3, 1, 1);
        let counts = enumerate_routes(&spec, &UnitCoord::new(vec![0], 0)).unwrap();
        assert_eq!(counts, biguints(&[1, 1, 1]));
    }

    #[test]
    fn depth_three_counts() {
        let spec = linear_stack(7, 3, 3, 1);
        let counts = enumerate_routes(&spec, &UnitCoord::new(vec![0], 0)).unwrap();
        assert_eq!(counts, biguints(&[1, 3, 6, 7, 6, 3, 1]));
    }

    #[test]
    fn dp_matches_enumeration_on_fig1() {
        let spec = fig1();
        let table = count_paths_dp(&spec).unwrap();
        let row = enumerate_routes(&spec, &UnitCoord::new(vec![0], 0)).unwrap();
        assert_eq!(table.counts[0], row);
    }

    #[test]
    fn two_channel_counts_double() {
        let spec = parse_spec(
            r#"{"rank":1,"input":[5,1],"layers":[
                {"type":"conv","k":3,"c_in":1,"c_out":2},
                {"type":"conv","k":3,"c_in":2,"c_out":1}]}"#,
        )
        .unwrap();
        let table = count_paths_dp(&spec).unwrap();
        assert_eq!(table.counts[0], biguints(&[2, 4, 6, 4, 2]));
        let row = enumerate_routes(&spec, &UnitCoord::new(vec![0], 0)).unwrap();
        assert_eq!(table.counts[0], row);
    }

    #[test]
    fn residual_skip_adds_single_layer_counts() {
        // conv k=3, then a residual block whose inner conv keeps the shape
        let spec = parse_spec(
            r#"{"rank":1,"input":[5,1],"layers":[
                {"type":"conv","k":3,"c_in":1,"c_out":1},
                {"type":"residual","inner":[{"type":"conv","k":3,"pad":1,"c_in":1,"c_out":1}]}]}"#,
        )
        .unwrap();
        let with_residual = count_paths_dp(&spec).unwrap();
        let enumerated = enumerate_routes(&spec, &UnitCoord::new(vec![1], 0)).unwrap();
        assert_eq!(with_residual.counts[1], enumerated);

        // skip contribution: the plain single-conv counts add on top of the
        // two-conv (padded) stack counts
        let stacked = parse_spec(
            r#"{"rank":1,"input":[5,1],"layers":[
                {"type":"conv","k":3,"c_in":1,"c_out":1},
                {"type":"conv","k":3,"pad":1,"c_in":1,"c_out":1}]}"#,
        )
        .unwrap();
        let single = parse_spec(
            r#"{"rank":1,"input":[5,1],"layers":[{"type":"conv","k":3,"c_in":1,"c_out":1}]}"#,
        )
        .unwrap();
        let two = count_paths_dp(&stacked).unwrap();
        let one = count_paths_dp(&single).unwrap();
        for j in 0..3 {
            for i in 0..5 {
                let expect = &two.counts[j][i] + &one.counts[j][i];
                assert_eq!(with_residual.counts[j][i], expect, "j={j} i={i}");
            }
        }
    }

    #[test]
    fn fig1_path_field() {
        let field = path_field(&fig1()).unwrap();
        assert_eq!(field.z, 1);
        assert_eq!(field.numer, biguints(&[1, 2, 3, 2, 1]));
    }

    #[test]
    fn k1_stack_field_is_channel_power() {
        // L=3 stack of k=1 convs with C=4 intermediates: one spatial path,
        // C^(L-1) channel choices
        let spec = parse_spec(
            r#"{"rank":1,"input":[6,1],"layers":[
                {"type":"conv","k":1,"c_in":1,"c_out":4},
                {"type":"conv","k":1,"c_in":4,"c_out":4},
                {"type":"conv","k":1,"c_in":4,"c_out":1}]}"#,
        )
        .unwrap();
        let field = path_field(&spec).unwrap();
        assert_eq!(field.z, 6);
        for i in 0..6 {
            // each output unit only reaches its own column: Σ_j #p = 16
            assert_eq!(field.numer[i], BigUint::from(16u32));
        }
    }

    #[test]
    fn field_extent7_three_outputs() {
        let spec = linear_stack(7, 3, 2, 1);
        let field = path_field(&spec).unwrap();
        assert_eq!(field.z, 3);
        assert_eq!(field.numer, biguints(&[1, 3, 6, 7, 6, 3, 1]));
        let (num, den) = field.reduced(3);
        assert_eq!((num, den), (BigUint::from(7u32), BigUint::from(3u32)));
    }

    #[test]
    fn multinomial_examples() {
        assert_eq!(multinomial_count(2, 3, 2), BigUint::from(3u32));
        for k in 1..=5usize {
            for o in 0..k as i64 {
                assert_eq!(multinomial_count(1, k, o), BigUint::from(1u32));
            }
        }
        assert_eq!(multinomial_count(3, 3, 3), BigUint::from(7u32));
        assert_eq!(multinomial_count(2, 3, -1), BigUint::zero());
        assert_eq!(multinomial_count(2, 3, 5), BigUint::zero());
    }

    /// Polynomial-expansion oracle for the multinomial closed form.
    fn poly_coefficients(depth: usize, kernel: usize) -> Vec<BigUint> {
        let mut poly = vec![BigUint::from(1u32)];
        for _ in 0..depth {
            let mut next = vec![BigUint::zero(); poly.len() + kernel - 1];
            for (i, c) in poly.iter().enumerate() {
                for j in 0..kernel {
                    next[i + j] += c;
                }
            }
            poly = next;
        }
        poly
    }

    #[test]
    fn multinomial_matches_polynomial_expansion() {
        for depth in 0..=6usize {
            for kernel in 1..=4usize {
                let poly = poly_coefficients(depth, kernel);
                for (o, expect) in poly.iter().enumerate() {
                    assert_eq!(&multinomial_count(depth, kernel, o as i64), expect, "L={depth} K={kernel} o={o}");
                }
            }
        }
    }

    #[test]
    fn enumeration_guard_refuses_large_spaces() {
        let spec = linear_stack(60, 5, 12, 4);
        let err = enumerate_routes(&spec, &UnitCoord::new(vec![0], 0)).unwrap_err();
        assert!(matches!(err, Error::CommandSpaceTooLarge { .. }));
    }

    #[test]
    fn reflection_symmetry() {
        let spec = linear_stack(9, 3, 2, 2);
        let field = path_field(&spec).unwrap();
        let v = field.values();
        for i in 0..v.len() {
            assert_eq!(v[i], v[v.len() - 1 - i]);
        }
    }

    #[test]
    fn row_sums_count_full_command_space() {
        // unpadded stacks keep every route in bounds from any output unit:
        // Σ_i #p(j→i) = Π_l (K_l · C_in,l)
        let spec = parse_spec(
            r#"{"rank":1,"input":[7,2],"layers":[
                {"type":"conv","k":3,"c_in":2,"c_out":2},
                {"type":"conv","k":2,"c_in":2,"c_out":3}]}"#,
        )
        .unwrap();
        let table = count_paths_dp(&spec).unwrap();
        let expect = BigUint::from((3usize * 2) * (2usize * 2));
        for row in &table.counts {
            let sum: BigUint = row.iter().sum();
            assert_eq!(sum, expect);
        }
    }

    #[test]
    fn rank2_counts_are_separable() {
        let spec = parse_spec(
            r#"{"rank":2,"input":[5,5,1],"layers":[
                {"type":"conv","k":3,"c_in":1,"c_out":1},
                {"type":"conv","k":3,"c_in":1,"c_out":1}]}"#,
        )
        .unwrap();
        let field = path_field(&spec).unwrap();
        let expect_1d = [1u64, 2, 3, 2, 1];
        for w in 0..5 {
            for h in 0..5 {
                let flat = w * 5 + h;
                assert_eq!(field.numer[flat], BigUint::from(expect_1d[w] * expect_1d[h]));
            }
        }
    }

    #[test]
    fn clt_shape_approaches_gaussian() {
        // normalized center-row counts: the KS distance to a matched Gaussian
        // shrinks as the stack deepens
        let ks = |depth: usize| -> f64 {
            let extent = 2 * depth + 1;
            let spec = linear_stack(extent, 3, depth, 1);
            let table = count_paths_dp(&spec).unwrap();
            assert_eq!(table.out_shape.units(), 1);
            let row: Vec<f64> = table.counts[0].iter().map(|c| c.to_f64().unwrap()).collect();
            let total: f64 = row.iter().sum();
            let mean: f64 = row.iter().enumerate().map(|(i, c)| i as f64 * c / total).sum();
            let var: f64 =
                row.iter().enumerate().map(|(i, c)| (i as f64 - mean).powi(2) * c / total).sum();
            let normal = statrs::distribution::Normal::new(mean, var.sqrt()).unwrap();
            use statrs::distribution::ContinuousCDF;
            let mut cdf = 0.0;
            let mut maxdev: f64 = 0.0;
            for (i, c) in row.iter().enumerate() {
                cdf += c / total;
                maxdev = maxdev.max((cdf - normal.cdf(i as f64 + 0.5)).abs());
            }
            maxdev
        };
        let d8 = ks(8);
        let d16 = ks(16);
        assert!(d16 < d8, "KS distance should shrink with depth: {d8} -> {d16}");
    }
}
