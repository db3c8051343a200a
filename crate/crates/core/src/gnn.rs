//! Graph feature extractors: graph convolution over the reconstructed
//! adjacency, multi-head graph attention over the complete graph of real
//! nodes, and the fusion of both.
//!
//! Per-step features are `[N, F]` matrices with one row per node slot;
//! sequences of steps are slices of such matrices.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::stgraph::row_mask_matrix;

pub const GAT_NEGATIVE_SLOPE: f64 = 0.2;

/// One attention head: `w` is `[F, F′]`, `a` is `[2F′]`.
#[derive(Clone, Copy, Debug)]
pub struct GatHead {
    pub w: Var,
    pub a: Var,
}

fn masked(tape: &mut Tape, x: Var, mask: &[bool]) -> Result<Var> {
    let cols = tape.value(x).shape()[1];
    let m = tape.constant(row_mask_matrix(mask, cols));
    tape.mul(x, m)
}

fn check_steps(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} feature steps against {b} adjacency steps")));
    }
    Ok(())
}

/// `relu(A′_t V_t Ws)` per step, with padded rows zeroed.
pub fn stgcn_layer(
    tape: &mut Tape,
    features: &[Var],
    adjacency: &[Var],
    ws: Var,
    mask: &[bool],
) -> Result<Vec<Var>> {
    check_steps("stgcn_layer", features.len(), adjacency.len())?;
    features
        .iter()
        .zip(adjacency)
        .map(|(&v, &a)| {
            let av = tape.matmul(a, v)?;
            let z = tape.matmul(av, ws)?;
            let r = tape.relu(z)?;
            masked(tape, r, mask)
        })
        .collect()
}

/// Attention coefficients of one head for one step, `[N, N]`.
///
/// `e_ij = LeakyReLU(a₁ᵀ W hᵢ + a₂ᵀ W hⱼ)`, normalized over real `j`.
pub fn gat_attention(tape: &mut Tape, h: Var, head: GatHead, mask: &[bool]) -> Result<Var> {
    let wh = tape.matmul(h, head.w)?;
    attention_from_projected(tape, wh, head.a, mask)
}

fn attention_from_projected(tape: &mut Tape, wh: Var, a: Var, mask: &[bool]) -> Result<Var> {
    let (n, f) = tape.value(wh).dims2("gat_attention")?;
    if tape.value(a).shape() != [2 * f] {
        return Err(Error::shape(
            "gat_attention",
            format!("attention vector {:?} for head width {f}", tape.value(a).shape()),
        ));
    }
    let a_src = tape.take(a, (0..f).map(Some).collect(), &[f, 1])?;
    let a_dst = tape.take(a, (f..2 * f).map(Some).collect(), &[f, 1])?;
    let src = tape.matmul(wh, a_src)?;
    let dst = tape.matmul(wh, a_dst)?;
    let ones_row = tape.constant(Tensor::full(&[1, n], 1.0));
    let ones_col = tape.constant(Tensor::full(&[n, 1], 1.0));
    let dst_t = tape.transpose(dst)?;
    let e_src = tape.matmul(src, ones_row)?;
    let e_dst = tape.matmul(ones_col, dst_t)?;
    let e = tape.add(e_src, e_dst)?;
    let e = tape.leaky_relu(e, GAT_NEGATIVE_SLOPE)?;
    let alpha = tape.softmax_rows(e, Some(mask))?;
    masked(tape, alpha, mask)
}

/// `ELU(Σⱼ αᵢⱼ W hⱼ)` per head, heads concatenated along features.
pub fn gat_step(tape: &mut Tape, h: Var, heads: &[GatHead], mask: &[bool]) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::shape("gat_layer", "no attention heads"));
    }
    let mut outs = Vec::with_capacity(heads.len());
    for &head in heads {
        let wh = tape.matmul(h, head.w)?;
        let alpha = attention_from_projected(tape, wh, head.a, mask)?;
        let agg = tape.matmul(alpha, wh)?;
        let act = tape.elu(agg)?;
        outs.push(masked(tape, act, mask)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

pub fn gat_layer(tape: &mut Tape, features: &[Var], heads: &[GatHead], mask: &[bool]) -> Result<Vec<Var>> {
    features.iter().map(|&h| gat_step(tape, h, heads, mask)).collect()
}

/// `relu([stgcn ‖ gat] W_fuse)` per step, padded rows zeroed.
pub fn fuse(tape: &mut Tape, stgcn: &[Var], gat: &[Var], w: Var, mask: &[bool]) -> Result<Vec<Var>> {
    check_steps("fuse", stgcn.len(), gat.len())?;
    stgcn
        .iter()
        .zip(gat)
        .map(|(&s, &g)| {
            let cat = tape.concat(&[s, g], 1)?;
            let z = tape.matmul(cat, w)?;
            let r = tape.relu(z)?;
            masked(tape, r, mask)
        })
        .collect()
}
