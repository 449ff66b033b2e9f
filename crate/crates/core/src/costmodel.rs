//! Per-node FLOP and parameter counts for the nine cell slots of the
//! macro skeleton.
//!
//! Every interior node runs at the slot's channel width. Convolutions count
//! `k² · c · c` weights and `k² · c · c · s²` multiply-accumulates; max-pool
//! counts `9 · c · s²` operations and no weights. Terminals cost nothing.

use serde::{Deserialize, Serialize};

use crate::cellgraph::{CellGraph, Op};

/// Number of cell slots the encoder expects.
pub const NUM_SLOTS: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CostError {
    #[error("slot {slot} out of range, the skeleton has {slots} slots")]
    InvalidSlot { slot: usize, slots: usize },
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
}

/// Fixed macro network: a stem followed by `stacks` stacks of
/// `cells_per_stack` cells, halving the spatial side and doubling the
/// channel width between stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Skeleton {
    pub input_hw: usize,
    pub stem_channels: usize,
    pub stacks: usize,
    pub cells_per_stack: usize,
}

impl Default for Skeleton {
    fn default() -> Self {
        Skeleton { input_hw: 32, stem_channels: 128, stacks: 3, cells_per_stack: 3 }
    }
}

impl Skeleton {
    /// Checks that the skeleton has exactly [`NUM_SLOTS`] slots and that the
    /// spatial side survives every downsampling step.
    pub fn validate(&self) -> Result<(), CostError> {
        if self.stacks * self.cells_per_stack != NUM_SLOTS {
            return Err(CostError::InvalidSkeleton(format!(
                "stacks × cells_per_stack must be {NUM_SLOTS}, got {} × {}",
                self.stacks, self.cells_per_stack
            )));
        }
        if self.stem_channels == 0 || self.input_hw == 0 {
            return Err(CostError::InvalidSkeleton("input_hw and stem_channels must be positive".into()));
        }
        let shrink = 1usize << (self.stacks - 1);
        if self.input_hw % shrink != 0 {
            return Err(CostError::InvalidSkeleton(format!(
                "input_hw {} is not divisible by {shrink}",
                self.input_hw
            )));
        }
        Ok(())
    }

    pub fn num_slots(&self) -> usize {
        self.stacks * self.cells_per_stack
    }

    /// Spatial side and channel width at `slot`.
    pub fn slot_shape(&self, slot: usize) -> Result<(usize, usize), CostError> {
        if slot >= self.num_slots() {
            return Err(CostError::InvalidSlot { slot, slots: self.num_slots() });
        }
        let stack = slot / self.cells_per_stack;
        Ok((self.input_hw >> stack, self.stem_channels << stack))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NodeCost {
    /// Multiply-accumulate count.
    pub flops: f64,
    /// Weight elements.
    pub params: f64,
}

/// FLOP and parameter vectors of one cell instance, one entry per node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellCosts {
    pub flops: Vec<f64>,
    pub params: Vec<f64>,
}

impl CellCosts {
    pub fn total_flops(&self) -> f64 {
        self.flops.iter().sum()
    }

    pub fn total_params(&self) -> f64 {
        self.params.iter().sum()
    }
}

/// Cost of a single node at spatial side `side` and width `channels`.
pub fn node_cost(op: Op, side: usize, channels: usize) -> NodeCost {
    let c = channels as f64;
    let area = (side * side) as f64;
    let conv = |k: f64| {
        let params = k * k * c * c;
        NodeCost { flops: params * area, params }
    };
    match op {
        Op::Input | Op::Output => NodeCost::default(),
        Op::Conv3x3 => conv(3.0),
        Op::Conv1x1 => conv(1.0),
        Op::MaxPool3x3 => NodeCost { flops: 9.0 * c * area, params: 0.0 },
    }
}

/// Costs of `g` placed in `slot` of `skeleton`.
pub fn cell_costs(g: &CellGraph, slot: usize, skeleton: &Skeleton) -> Result<CellCosts, CostError> {
    let (side, channels) = skeleton.slot_shape(slot)?;
    let (flops, params) = g
        .ops()
        .iter()
        .map(|&op| {
            let cost = node_cost(op, side, channels);
            (cost.flops, cost.params)
        })
        .unzip();
    Ok(CellCosts { flops, params })
}

/// Costs of `g` in every slot, in slot order.
pub fn network_costs(g: &CellGraph, skeleton: &Skeleton) -> Result<Vec<CellCosts>, CostError> {
    (0..skeleton.num_slots()).map(|slot| cell_costs(g, slot, skeleton)).collect()
}

/// Sum of per-slot totals: `(flops, params)` of all cells in the network.
pub fn network_totals(g: &CellGraph, skeleton: &Skeleton) -> Result<(f64, f64), CostError> {
    let costs = network_costs(g, skeleton)?;
    Ok(costs.iter().fold((0.0, 0.0), |(f, p), c| (f + c.total_flops(), p + c.total_params())))
}
