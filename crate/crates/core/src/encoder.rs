//! Feature tensors: a 19×7×7 stack of one type matrix, nine FLOP matrices
//! and nine parameter matrices.
//!
//! Each matrix is a node vector broadcast along the rows and masked by the
//! padded adjacency matrix, so entry `(i, j)` is non-zero only where the
//! cell has an edge `i -> j`.

use serde::{Deserialize, Serialize};

use crate::cellgraph::{CellGraph, MAX_NODES};
use crate::costmodel::{self, CellCosts, CostError, Skeleton, NUM_SLOTS};

/// Side of the padded matrices.
pub const SIDE: usize = MAX_NODES;
/// Entries per channel.
pub const PLANE: usize = SIDE * SIDE;
/// Type channel plus FLOP and parameter channels for every slot.
pub const CHANNELS: usize = 1 + 2 * NUM_SLOTS;
/// Values per tensor.
pub const TENSOR_LEN: usize = CHANNELS * PLANE;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncodeError {
    #[error("expected {expected} cost profiles of length {nodes}, got {got:?}")]
    CostShapeMismatch { expected: usize, nodes: usize, got: Vec<(usize, usize)> },
    #[error("cannot fit a scaler on an empty tensor list")]
    EmptyInput,
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Which node's value an edge `i -> j` carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Broadcast {
    /// `M[i][j] = v[j] · A[i][j]`.
    #[default]
    Destination,
    /// `M[i][j] = v[i] · A[i][j]`.
    Source,
}

/// Which channel groups are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// Type, FLOP and parameter channels.
    #[default]
    Full,
    /// Type channel only; cost channels are zeroed.
    TypeOnly,
}

/// Adjacency and type ids padded to 7 nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padded {
    pub adj: [[u8; SIDE]; SIDE],
    pub types: [u8; SIDE],
    /// `true` at inserted padding indices.
    pub padding: [bool; SIDE],
}

impl Padded {
    /// Pads a per-node vector of the original cell to length 7.
    pub fn pad_vector(&self, values: &[f64]) -> [f64; SIDE] {
        let mut out = [0.0; SIDE];
        let mut src = values.iter();
        for (slot, is_pad) in out.iter_mut().zip(self.padding) {
            if !is_pad {
                *slot = *src.next().expect("vector shorter than the cell");
            }
        }
        out
    }
}

/// Inserts `7 - n` zero rows and columns at the penultimate index, so
/// `INPUT` stays at 0 and `OUTPUT` lands at 6.
pub fn pad7(g: &CellGraph) -> Padded {
    let n = g.n();
    let pad = SIDE - n;
    // Original node v maps to v for v < n - 1, and OUTPUT maps to 6.
    let place = |v: usize| if v == n - 1 { SIDE - 1 } else { v };
    let mut adj = [[0u8; SIDE]; SIDE];
    let mut types = [0u8; SIDE];
    let mut padding = [false; SIDE];
    for slot in padding.iter_mut().skip(n - 1).take(pad) {
        *slot = true;
    }
    for u in 0..n {
        types[place(u)] = g.ops()[u].id();
        for v in 0..n {
            if g.has_edge(u, v) {
                adj[place(u)][place(v)] = 1;
            }
        }
    }
    Padded { adj, types, padding }
}

/// The 19×7×7 encoding of one cell, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn zeros() -> Self {
        FeatureTensor { data: vec![0.0; TENSOR_LEN] }
    }

    pub fn from_vec(data: Vec<f64>) -> Option<Self> {
        (data.len() == TENSOR_LEN).then_some(FeatureTensor { data })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[channel * PLANE + row * SIDE + col]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        &self.data[channel * PLANE..(channel + 1) * PLANE]
    }

    fn channel_mut(&mut self, channel: usize) -> &mut [f64] {
        &mut self.data[channel * PLANE..(channel + 1) * PLANE]
    }

    /// Nested `[channel][row][col]` form, for JSON output.
    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..CHANNELS)
            .map(|c| self.channel(c).chunks(SIDE).map(<[f64]>::to_vec).collect())
            .collect()
    }

    /// Zeroes every FLOP and parameter channel.
    pub fn keep_type_only(&mut self) {
        self.data[PLANE..].fill(0.0);
    }
}

/// Per-group maxima used to bring all channels to a common scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormScaler {
    pub type_max: f64,
    pub flop_max: f64,
    pub param_max: f64,
}

impl Default for NormScaler {
    fn default() -> Self {
        NormScaler { type_max: 1.0, flop_max: 1.0, param_max: 1.0 }
    }
}

impl NormScaler {
    /// Group maxima of absolute values over unnormalized tensors. A zero
    /// maximum becomes 1.
    pub fn fit<'a>(tensors: impl IntoIterator<Item = &'a FeatureTensor>) -> Result<Self, EncodeError> {
        let mut maxima = [0.0f64; 3];
        let mut seen = false;
        for t in tensors {
            seen = true;
            for c in 0..CHANNELS {
                let group = channel_group(c);
                let m = t.channel(c).iter().fold(0.0f64, |m, x| m.max(x.abs()));
                maxima[group] = maxima[group].max(m);
            }
        }
        if !seen {
            return Err(EncodeError::EmptyInput);
        }
        let guard = |m: f64| if m > 0.0 { m } else { 1.0 };
        Ok(NormScaler { type_max: guard(maxima[0]), flop_max: guard(maxima[1]), param_max: guard(maxima[2]) })
    }

    pub fn apply(&self, t: &mut FeatureTensor) {
        let div = [self.type_max, self.flop_max, self.param_max];
        for c in 0..CHANNELS {
            let d = div[channel_group(c)];
            t.channel_mut(c).iter_mut().for_each(|x| *x /= d);
        }
    }
}

fn channel_group(channel: usize) -> usize {
    match channel {
        0 => 0,
        c if c <= NUM_SLOTS => 1,
        _ => 2,
    }
}

fn broadcast(into: &mut [f64], padded: &Padded, values: &[f64; SIDE], orientation: Broadcast) {
    for i in 0..SIDE {
        for j in 0..SIDE {
            if padded.adj[i][j] == 1 {
                let v = match orientation {
                    Broadcast::Destination => values[j],
                    Broadcast::Source => values[i],
                };
                into[i * SIDE + j] = v;
            }
        }
    }
}

/// Encodes `g` given its nine per-slot cost profiles, using destination
/// broadcasting.
pub fn encode(g: &CellGraph, costs: &[CellCosts], scaler: Option<&NormScaler>) -> Result<FeatureTensor, EncodeError> {
    encode_with(g, costs, scaler, Broadcast::Destination)
}

pub fn encode_with(
    g: &CellGraph,
    costs: &[CellCosts],
    scaler: Option<&NormScaler>,
    orientation: Broadcast,
) -> Result<FeatureTensor, EncodeError> {
    let n = g.n();
    if costs.len() != NUM_SLOTS || costs.iter().any(|c| c.flops.len() != n || c.params.len() != n) {
        return Err(EncodeError::CostShapeMismatch {
            expected: NUM_SLOTS,
            nodes: n,
            got: costs.iter().map(|c| (c.flops.len(), c.params.len())).collect(),
        });
    }
    let padded = pad7(g);
    let mut t = FeatureTensor::zeros();
    let types = padded.types.map(f64::from);
    broadcast(t.channel_mut(0), &padded, &types, orientation);
    for (slot, c) in costs.iter().enumerate() {
        broadcast(t.channel_mut(1 + slot), &padded, &padded.pad_vector(&c.flops), orientation);
        broadcast(t.channel_mut(1 + NUM_SLOTS + slot), &padded, &padded.pad_vector(&c.params), orientation);
    }
    if let Some(s) = scaler {
        s.apply(&mut t);
    }
    Ok(t)
}

/// Cell-to-tensor pipeline with fixed skeleton and encoding options.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Encoder {
    pub skeleton: Skeleton,
    pub broadcast: Broadcast,
    pub features: FeatureSet,
}

impl Encoder {
    /// Unnormalized tensor of `g`.
    pub fn encode_raw(&self, g: &CellGraph) -> Result<FeatureTensor, EncodeError> {
        let costs = costmodel::network_costs(g, &self.skeleton)?;
        let mut t = encode_with(g, &costs, None, self.broadcast)?;
        if self.features == FeatureSet::TypeOnly {
            t.keep_type_only();
        }
        Ok(t)
    }

    /// Tensor of `g` normalized by `scaler`.
    pub fn encode(&self, g: &CellGraph, scaler: &NormScaler) -> Result<FeatureTensor, EncodeError> {
        let mut t = self.encode_raw(g)?;
        scaler.apply(&mut t);
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cellgraph::parse_ops;
    use crate::costmodel::network_costs;

    fn cell(rows: &[&str], ops: &str) -> CellGraph {
        let adj: Vec<Vec<u8>> = rows.iter().map(|r| r.bytes().map(|b| b - b'0').collect()).collect();
        CellGraph::validate(&adj, &parse_ops(ops.split(',')).unwrap()).unwrap()
    }

    fn six_node() -> CellGraph {
        cell(
            &["011000", "000100", "000110", "000001", "000001", "000000"],
            "INPUT,CONV3X3,CONV1X1,CONV3X3,MAXPOOL3X3,OUTPUT",
        )
    }

    #[test]
    fn pad7_full_cell_unchanged() {
        let g = cell(
            &["0100001", "0010000", "0001000", "0000100", "0000010", "0000001", "0000000"],
            "INPUT,CONV3X3,CONV1X1,CONV3X3,MAXPOOL3X3,CONV3X3,OUTPUT",
        );
        let p = pad7(&g);
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(p.adj[i][j], g.has_edge(i, j) as u8);
            }
        }
        assert_eq!(p.padding, [false; 7]);
    }

    #[test]
    fn pad7_six_nodes_pads_index_five() {
        let g = six_node();
        let p = pad7(&g);
        assert_eq!(p.padding, [false, false, false, false, false, true, false]);
        assert_eq!(p.adj[5], [0; 7]);
        assert!(p.adj.iter().all(|row| row[5] == 0));
        assert_eq!(p.types[5], 0);
        assert_eq!(p.types[6], 5);
        // Edges into OUTPUT moved from column 5 to column 6.
        assert_eq!(p.adj[3][6], 1);
        assert_eq!(p.adj[4][6], 1);
    }

    #[test]
    fn pad7_minimal_cell() {
        // Inserting at the penultimate index five times leaves the single
        // edge at (0, 6).
        let p = pad7(&CellGraph::minimal());
        let mut expected = [[0u8; 7]; 7];
        expected[0][6] = 1;
        assert_eq!(p.adj, expected);
        assert_eq!(p.types, [1, 0, 0, 0, 0, 0, 5]);
    }

    #[test]
    fn minimal_cell_tensor() {
        let g = CellGraph::minimal();
        let costs = network_costs(&g, &Skeleton::default()).unwrap();
        let t = encode(&g, &costs, None).unwrap();
        let nonzero: Vec<usize> = (0..TENSOR_LEN).filter(|&k| t.as_slice()[k] != 0.0).collect();
        assert_eq!(nonzero, vec![6]);
        assert_eq!(t.get(0, 0, 6), 5.0);
    }

    #[test]
    fn constant_vector_broadcast() {
        let g = six_node();
        let p = pad7(&g);
        let mut plane = [0.0; PLANE];
        broadcast(&mut plane, &p, &[2.5; SIDE], Broadcast::Destination);
        for i in 0..SIDE {
            for j in 0..SIDE {
                assert_eq!(plane[i * SIDE + j], if p.adj[i][j] == 1 { 2.5 } else { 0.0 });
            }
        }
    }

    #[test]
    fn type_channel_counts_edges() {
        let g = six_node();
        let costs = network_costs(&g, &Skeleton::default()).unwrap();
        let t = encode(&g, &costs, None).unwrap();
        let ones = pad7(&g).adj.iter().flatten().filter(|&&a| a == 1).count();
        assert_eq!(t.channel(0).iter().filter(|x| **x != 0.0).count(), ones);
        assert_eq!(ones, g.edge_count());
    }

    #[test]
    fn orientation_switch() {
        let g = six_node();
        let costs = network_costs(&g, &Skeleton::default()).unwrap();
        let dst = encode_with(&g, &costs, None, Broadcast::Destination).unwrap();
        let src = encode_with(&g, &costs, None, Broadcast::Source).unwrap();
        // Edge 0 -> 1: destination carries CONV3X3 (2), source carries INPUT (1).
        assert_eq!(dst.get(0, 0, 1), 2.0);
        assert_eq!(src.get(0, 0, 1), 1.0);
    }

    #[test]
    fn cost_shape_mismatch() {
        let g = six_node();
        let costs = network_costs(&CellGraph::minimal(), &Skeleton::default()).unwrap();
        assert!(matches!(encode(&g, &costs, None), Err(EncodeError::CostShapeMismatch { .. })));
        assert!(matches!(encode(&g, &costs[..3], None), Err(EncodeError::CostShapeMismatch { .. })));
    }

    #[test]
    fn scaler_fit() {
        assert_eq!(NormScaler::fit([&FeatureTensor::zeros()]).unwrap(), NormScaler::default());
        assert_eq!(NormScaler::fit(std::iter::empty()), Err(EncodeError::EmptyInput));

        let mut data = vec![0.0; TENSOR_LEN];
        data[PLANE + 3] = 1.5e8;
        data[PLANE * 12] = -3.0;
        data[0] = 4.0;
        let t = FeatureTensor::from_vec(data).unwrap();
        let s = NormScaler::fit([&t]).unwrap();
        assert_eq!(s, NormScaler { type_max: 4.0, flop_max: 1.5e8, param_max: 3.0 });
    }

    #[test]
    fn scaler_maps_fitting_set_into_unit_range() {
        let enc = Encoder::default();
        let cells = [CellGraph::minimal(), six_node()];
        let raw: Vec<FeatureTensor> = cells.iter().map(|g| enc.encode_raw(g).unwrap()).collect();
        let s = NormScaler::fit(&raw).unwrap();
        for g in &cells {
            let t = enc.encode(g, &s).unwrap();
            assert!(t.as_slice().iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn type_only_zeroes_costs() {
        let enc = Encoder { features: FeatureSet::TypeOnly, ..Encoder::default() };
        let t = enc.encode_raw(&six_node()).unwrap();
        assert!(t.as_slice()[PLANE..].iter().all(|&x| x == 0.0));
        assert!(t.channel(0).iter().any(|&x| x != 0.0));
    }
}
