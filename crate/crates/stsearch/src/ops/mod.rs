//! Spatial and temporal operators and the three spatial-temporal cells.
//!
//! The spatial operator is a high-order mixed graph convolution: normalized
//! adjacency propagation plus forward/backward transition diffusion plus an
//! adaptive adjacency learned from node embeddings. The temporal operator is
//! multi-head linear attention over the time axis. A cell wires one spatial
//! and one temporal operator together in one of three orders and finishes
//! with a residual feed-forward block.

mod adjacency;
mod cells;
mod params;

pub use adjacency::{build_adjacency_set, AdjacencySet, AdjacencyVars};
pub use cells::{adaptive_adjacency, cell_forward, ffn, linear_attention, mix_gc, spatial_op};
pub use params::{AttnParams, CellKind, CellParams, FfnParams, SpatialParams};

use rand::Rng;

use crate::tensor::{Element, Tensor};

/// Xavier-uniform initialization: `U(-a, a)` with `a = sqrt(6/(fan_in+fan_out))`.
/// Values are drawn in f64 so a given seed produces the same sequence at
/// every precision.
pub(crate) fn xavier<E: Element>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<E> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<E> = (0..rows * cols)
        .map(|_| E::from_real(rng.gen_range(-a..a)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("xavier shape")
}
