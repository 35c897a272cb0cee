//! The spatial operator, temporal operator, feed-forward block, and the
//! three cell compositions, all recorded on a [`Tape`].
//!
//! Inputs are `[..., T, N, C]`: any leading axes (e.g. a mini-batch) are
//! carried through untouched.

use super::{AdjacencyVars, AttnParams, CellKind, CellParams, FfnParams, SpatialParams};
use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tape, Tensor, Var};

/// Adaptive adjacency `softmax_rows(relu(E1 · E2ᵀ))`; differentiable in both
/// embeddings. Rows are non-negative and sum to 1.
pub fn adaptive_adjacency<E: Element>(tape: &mut Tape<E>, e1: Var, e2: Var) -> Result<Var> {
    let e2t = tape.transpose(e2)?;
    let scores = tape.matmul(e1, e2t)?;
    let gated = tape.relu(scores);
    tape.softmax_rows(gated)
}

/// Mixed graph convolution:
/// `Â X W_g + P_f X W_f + P_b X W_b + Â_adp X W_adp`, applied per time step.
/// The adaptive adjacency is recomputed from the current embeddings.
pub fn mix_gc<E: Element>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    x: Var,
    adj: &AdjacencyVars,
    p: &SpatialParams,
) -> Result<Var> {
    let e1 = tape.param(store, &p.e1)?;
    let e2 = tape.param(store, &p.e2)?;
    let adp = adaptive_adjacency(tape, e1, e2)?;

    let mut term = |tape: &mut Tape<E>, a: Var, w_name: &str| -> Result<Var> {
        let w = tape.param(store, w_name)?;
        let ax = tape.matmul_left(a, x)?;
        tape.matmul(ax, w)
    };
    let t_g = term(tape, adj.a_hat, &p.w_g)?;
    let t_f = term(tape, adj.p_f, &p.w_f)?;
    let t_b = term(tape, adj.p_b, &p.w_b)?;
    let t_a = term(tape, adp, &p.w_adp)?;

    let left = tape.add(t_g, t_f)?;
    let right = tape.add(t_b, t_a)?;
    tape.add(left, right)
}

/// High-order spatial operator: the input unchanged at order 0, and
/// `mix_gc` applied to the order `k-1` result above that.
pub fn spatial_op<E: Element>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    x: Var,
    adj: &AdjacencyVars,
    p: &SpatialParams,
    ord: usize,
) -> Result<Var> {
    if ord > p.max_ord {
        return Err(Error::Config(format!(
            "graph order {ord} exceeds configured maximum {}",
            p.max_ord
        )));
    }
    let mut h = x;
    for _ in 0..ord {
        h = mix_gc(tape, store, h, adj, p)?;
    }
    Ok(h)
}

/// Multi-head linear attention over the time axis, per node.
///
/// Per head: `LA = φ(Q)(φ(K)ᵀV) / φ(Q)(φ(K)ᵀ1)` with `φ = elu + 1`; heads
/// are concatenated and projected by `W_O`. Cost is linear in the sequence
/// length.
pub fn linear_attention<E: Element>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    x: Var,
    p: &AttnParams,
) -> Result<Var> {
    if p.heads == 0 || p.attn_dim % p.heads != 0 {
        return Err(Error::Config(format!(
            "attention dim {} not divisible by head count {}",
            p.attn_dim, p.heads
        )));
    }
    let w_q = tape.param(store, &p.w_q)?;
    let w_k = tape.param(store, &p.w_k)?;
    let w_v = tape.param(store, &p.w_v)?;
    let q = tape.matmul(x, w_q)?;
    let k = tape.matmul(x, w_k)?;
    let v = tape.matmul(x, w_v)?;
    let phi_q = tape.elu_plus_one(q);
    let phi_k = tape.elu_plus_one(k);

    let mut ones_shape = tape.shape(phi_q).to_vec();
    *ones_shape.last_mut().unwrap() = 1;
    let ones = tape.constant(Tensor::full(ones_shape, E::one()));

    let head_dim = p.attn_dim / p.heads;
    let mut merged: Option<Var> = None;
    for h in 0..p.heads {
        let start = h * head_dim;
        let qh = tape.slice_last(phi_q, start, head_dim)?;
        let kh = tape.slice_last(phi_k, start, head_dim)?;
        let vh = tape.slice_last(v, start, head_dim)?;
        let kv = tape.time_outer_sum(kh, vh)?;
        let numer = tape.time_apply(qh, kv)?;
        let ksum = tape.time_outer_sum(kh, ones)?;
        let denom = tape.time_apply(qh, ksum)?;
        let out = tape.div(numer, denom)?;
        merged = Some(match merged {
            None => out,
            Some(acc) => tape.concat_last(acc, out)?,
        });
    }
    let w_o = tape.param(store, &p.w_o)?;
    tape.matmul(merged.expect("at least one head"), w_o)
}

/// Position-wise feed-forward block with a residual connection:
/// `x + (relu(x·W1 + b1)·W2 + b2)`.
pub fn ffn<E: Element>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    x: Var,
    p: &FfnParams,
) -> Result<Var> {
    let w1 = tape.param(store, &p.w1)?;
    let b1 = tape.param(store, &p.b1)?;
    let w2 = tape.param(store, &p.w2)?;
    let b2 = tape.param(store, &p.b2)?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, w2)?;
    let core = tape.add(h, b2)?;
    tape.add(x, core)
}

/// One cell forward pass. All three kinds preserve the `[..., T, N, C]`
/// shape; STP restores the width with its merge projection.
pub fn cell_forward<E: Element>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    cp: &CellParams,
    x: Var,
    adj: &AdjacencyVars,
) -> Result<Var> {
    match cp.kind {
        CellKind::Stp => {
            let s = spatial_op(tape, store, x, adj, &cp.spatial, cp.spatial.ord)?;
            let t = linear_attention(tape, store, x, &cp.temporal)?;
            let cat = tape.concat_last(s, t)?;
            let w_m = tape.param(
                store,
                cp.merge.as_deref().ok_or_else(|| {
                    Error::Contract("STP cell without a merge projection".into())
                })?,
            )?;
            let merged = tape.matmul(cat, w_m)?;
            ffn(tape, store, merged, &cp.ffn)
        }
        CellKind::Stt => {
            let s = spatial_op(tape, store, x, adj, &cp.spatial, cp.spatial.ord)?;
            let t = linear_attention(tape, store, s, &cp.temporal)?;
            ffn(tape, store, t, &cp.ffn)
        }
        CellKind::Tts => {
            let t = linear_attention(tape, store, x, &cp.temporal)?;
            let s = spatial_op(tape, store, t, adj, &cp.spatial, cp.spatial.ord)?;
            ffn(tape, store, s, &cp.ffn)
        }
    }
}
