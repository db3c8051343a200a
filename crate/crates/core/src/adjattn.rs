//! Adjacency reconstruction by single-head self-attention over the rows of
//! the normalized adjacency matrix.
//!
//! For one step with normalized adjacency `Ā` (rows `Āᵢ`):
//! `qᵢ = Wq Āᵢ`, `kⱼ = Wk Āⱼ`, `vⱼ = Wv Āⱼ`, `αᵢⱼ = softmaxⱼ(qᵢᵀkⱼ)` over real
//! nodes, and row `i` of the reconstructed matrix is `Σⱼ αᵢⱼ vⱼ`. Rows and
//! columns of padded nodes are forced to zero. The same weights serve every
//! step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::stgraph::{pair_mask_matrix, row_mask_matrix, AdjacencyStack};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjAttnConfig {
    /// Divide scores by `sqrt(d_k)`.
    pub scaled_scores: bool,
    /// Output `Ā + A′` instead of `A′`.
    pub residual_adjacency: bool,
}

/// Projection weights; `wq`/`wk` are `[d_k, n_max]`, `wv` is `[n_max, n_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjAttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl AdjAttnParams {
    /// Uniform on `[-1/sqrt(n_max), 1/sqrt(n_max)]`.
    pub fn init<R: Rng + ?Sized>(n_max: usize, d_k: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_max as f64).sqrt();
        let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        Self {
            wq: draw(&[d_k, n_max]),
            wk: draw(&[d_k, n_max]),
            wv: draw(&[n_max, n_max]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AdjAttnVars {
        AdjAttnVars {
            wq: tape.constant(self.wq.clone()),
            wk: tape.constant(self.wk.clone()),
            wv: tape.constant(self.wv.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdjAttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Row `i` of each output is the projection of row `i` of `adj`.
pub fn project_qkv(tape: &mut Tape, adj: Var, p: &AdjAttnVars) -> Result<(Var, Var, Var)> {
    let wq_t = tape.transpose(p.wq)?;
    let wk_t = tape.transpose(p.wk)?;
    let wv_t = tape.transpose(p.wv)?;
    Ok((
        tape.matmul(adj, wq_t)?,
        tape.matmul(adj, wk_t)?,
        tape.matmul(adj, wv_t)?,
    ))
}

/// Softmax of `q kᵀ` over real columns; rows of padded nodes are zero.
pub fn attention_weights(
    tape: &mut Tape,
    q: Var,
    k: Var,
    mask: &[bool],
    scaled: bool,
) -> Result<Var> {
    let k_t = tape.transpose(k)?;
    let mut scores = tape.matmul(q, k_t)?;
    if scaled {
        let d_k = tape.value(q).shape()[1].max(1) as f64;
        scores = tape.scale(scores, 1.0 / d_k.sqrt())?;
    }
    let alpha = tape.softmax_rows(scores, Some(mask))?;
    let rows = tape.constant(row_mask_matrix(mask, mask.len()));
    tape.mul(alpha, rows)
}

pub struct ReconstructedStep {
    pub adjacency: Var,
    pub weights: Var,
}

pub fn reconstruct_step(
    tape: &mut Tape,
    adj: Var,
    params: &AdjAttnVars,
    mask: &[bool],
    config: AdjAttnConfig,
) -> Result<ReconstructedStep> {
    let n = mask.len();
    if tape.value(adj).shape() != [n, n] {
        return Err(Error::shape(
            "reconstruct",
            format!("adjacency {:?} for mask of {n}", tape.value(adj).shape()),
        ));
    }
    let (q, k, v) = project_qkv(tape, adj, params)?;
    let weights = attention_weights(tape, q, k, mask, config.scaled_scores)?;
    let h = tape.matmul(weights, v)?;
    let pairs = tape.constant(pair_mask_matrix(mask));
    let mut adjacency = tape.mul(h, pairs)?;
    if config.residual_adjacency {
        adjacency = tape.add(adjacency, adj)?;
    }
    Ok(ReconstructedStep { adjacency, weights })
}

/// Reconstructed adjacency and the attention weights behind it, per step.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructedAdjacency {
    /// `[T, n_max, n_max]`.
    pub values: Tensor,
    /// `[T, n_max, n_max]`.
    pub weights: Tensor,
}

/// Evaluates the reconstruction for every step of a padded stack.
pub fn reconstruct(
    stack: &AdjacencyStack,
    params: &AdjAttnParams,
    config: AdjAttnConfig,
) -> Result<ReconstructedAdjacency> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mut values = Vec::with_capacity(stack.steps());
    let mut weights = Vec::with_capacity(stack.steps());
    for t in 0..stack.steps() {
        let adj = tape.constant(stack.normalized.slice0(t));
        let step = reconstruct_step(&mut tape, adj, &vars, &stack.mask, config)?;
        values.push(tape.value(step.adjacency).clone());
        weights.push(tape.value(step.weights).clone());
    }
    Ok(ReconstructedAdjacency {
        values: Tensor::stack(&values)?,
        weights: Tensor::stack(&weights)?,
    })
}
