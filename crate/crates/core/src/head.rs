//! Temporal extrapolation and the trivariate Gaussian output head.
//!
//! The TXP stack treats time as the channel axis of a 1-D convolution that
//! slides along the feature axis of each node. The first layer maps `T_obs`
//! channels to `T_pred` and is linear; later layers add `relu(conv(x))` to
//! their input. Nine raw outputs per node and step decode into a mean and a
//! lower-triangular factor `L` of the covariance `Σ = L Lᵀ`:
//!
//! ```text
//! raw[0..3]  mean
//! raw[3..6]  log of the diagonal of L
//! raw[6..9]  L21, L31, L32
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{forward_substitute, Tape, Tensor, Var};

pub const RAW_WIDTH: usize = 9;
pub const TXP_KERNEL_WIDTH: usize = 3;
/// Smallest diagonal entry of `L` used in the likelihood.
pub const DIAG_FLOOR: f64 = 1e-12;
/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `x` is `[T_obs, N, M]`; `layers[0]` is `[T_pred, T_obs, 3]`, the rest
/// `[T_pred, T_pred, 3]`. Returns `[T_pred, N, M]`.
pub fn txp_forward(tape: &mut Tape, x: Var, layers: &[Var]) -> Result<Var> {
    let (first, rest) = layers
        .split_first()
        .ok_or_else(|| Error::shape("txp_forward", "no layers"))?;
    let mut h = tape.conv1d(x, *first, TXP_KERNEL_WIDTH / 2)?;
    for &w in rest {
        let c = tape.conv1d(h, w, TXP_KERNEL_WIDTH / 2)?;
        let r = tape.relu(c)?;
        h = tape.add(h, r)?;
    }
    Ok(h)
}

/// `[T, N, M]` features times `[M, 9]` into `[T·N, 9]`, rows step-major.
pub fn project_raw(tape: &mut Tape, features: Var, head_w: Var) -> Result<Var> {
    let shape = tape.value(features).shape().to_vec();
    let &[t, n, m] = shape.as_slice() else {
        return Err(Error::shape("emit_gaussians", format!("features {shape:?}")));
    };
    let flat = tape.reshape(features, &[t * n, m])?;
    tape.matmul(flat, head_w)
}

/// Row indices `t·N + i` of real nodes, step-major.
pub fn real_rows(steps: usize, mask: &[bool]) -> Vec<usize> {
    let n = mask.len();
    (0..steps)
        .flat_map(|t| (0..n).filter(|&i| mask[i]).map(move |i| t * n + i))
        .collect()
}

pub fn gather_rows(tape: &mut Tape, a: Var, rows: &[usize]) -> Result<Var> {
    let (_, cols) = tape.value(a).dims2("gather_rows")?;
    let index = rows
        .iter()
        .flat_map(|&r| (0..cols).map(move |c| Some(r * cols + c)))
        .collect();
    tape.take(a, index, &[rows.len(), cols])
}

/// Decoded parameters for a batch of `B` raw rows.
#[derive(Clone, Copy, Debug)]
pub struct DecodedGaussians {
    /// `[B, 3]`.
    pub mu: Var,
    /// `[B, 3, 3]`, zero above the diagonal.
    pub chol: Var,
    /// `[B, 3]`, log of the (floored) diagonal of `chol`.
    pub log_diag: Var,
}

pub fn decode(tape: &mut Tape, raw: Var) -> Result<DecodedGaussians> {
    let (b, w) = tape.value(raw).dims2("decode")?;
    if w != RAW_WIDTH {
        return Err(Error::shape("decode", format!("raw width {w}")));
    }
    let mu = tape.take(raw, (0..b * 3).map(|k| Some((k / 3) * w + k % 3)).collect(), &[b, 3])?;
    let log_raw = tape.take(raw, (0..b * 3).map(|k| Some((k / 3) * w + 3 + k % 3)).collect(), &[b, 3])?;
    let diag = tape.exp(log_raw)?;
    let diag = tape.clamp_min(diag, DIAG_FLOOR)?;
    let log_diag = tape.log(diag)?;
    // [raw ‖ diag] has width 12; diagonal entries live at 9..12.
    let joined = tape.concat(&[raw, diag], 1)?;
    const SOURCE: [Option<usize>; 9] = [
        Some(9), None, None,
        Some(6), Some(10), None,
        Some(7), Some(8), Some(11),
    ];
    let index = (0..b)
        .flat_map(|r| SOURCE.iter().map(move |s| s.map(|c| r * 12 + c)))
        .collect();
    let chol = tape.take(joined, index, &[b, 3, 3])?;
    Ok(DecodedGaussians { mu, chol, log_diag })
}

/// Sum over the batch of `-log N(truth | μ, L Lᵀ)`.
pub fn gaussian_nll_sum(tape: &mut Tape, g: &DecodedGaussians, truth: Var) -> Result<Var> {
    let b = tape.value(g.mu).shape()[0];
    let diff = tape.sub(truth, g.mu)?;
    let z = tape.triangular_solve_lower(g.chol, diff)?;
    let zz = tape.mul(z, z)?;
    let quad = tape.sum(zz)?;
    let quad = tape.scale(quad, 0.5)?;
    let log_det = tape.sum(g.log_diag)?;
    let c = tape.constant(Tensor::scalar(1.5 * LN_2PI * b as f64));
    let s = tape.add(quad, log_det)?;
    tape.add(s, c)
}

/// Forecast for the real nodes of one scene, in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianForecast {
    /// Slot index of each forecast node.
    pub nodes: Vec<usize>,
    /// `[T_pred, n, 3]`.
    pub mu: Tensor,
    /// `[T_pred, n, 3, 3]`.
    pub chol: Tensor,
}

impl GaussianForecast {
    pub fn steps(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn mean(&self, t: usize, i: usize) -> [f64; 3] {
        std::array::from_fn(|c| self.mu.at(&[t, i, c]))
    }

    pub fn factor(&self, t: usize, i: usize) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.chol.at(&[t, i, r, c])))
    }

    pub fn covariance(&self, t: usize, i: usize) -> [[f64; 3]; 3] {
        let l = self.factor(t, i);
        std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| l[r][k] * l[c][k]).sum()))
    }
}

/// Decodes one raw row without flooring the diagonal.
pub fn decode_row(raw: &[f64]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mu = [raw[0], raw[1], raw[2]];
    let l = [
        [raw[3].exp(), 0.0, 0.0],
        [raw[6], raw[4].exp(), 0.0],
        [raw[7], raw[8], raw[5].exp()],
    ];
    (mu, l)
}

/// Decodes `[T_pred, N, 9]` raw outputs for the real nodes.
pub fn forecast_from_raw(raw: &Tensor, mask: &[bool]) -> Result<GaussianForecast> {
    let &[t_pred, n, w] = raw.shape() else {
        return Err(Error::shape("emit_gaussians", format!("raw {:?}", raw.shape())));
    };
    if w != RAW_WIDTH || n != mask.len() {
        return Err(Error::shape("emit_gaussians", format!("raw {:?} for mask of {}", raw.shape(), mask.len())));
    }
    let nodes: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let mut mu = Vec::with_capacity(t_pred * nodes.len() * 3);
    let mut chol = Vec::with_capacity(t_pred * nodes.len() * 9);
    for t in 0..t_pred {
        for &i in &nodes {
            let row = &raw.data()[(t * n + i) * w..(t * n + i + 1) * w];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteOutput { step: t, node: i });
            }
            let (m, l) = decode_row(row);
            mu.extend_from_slice(&m);
            chol.extend(l.iter().flatten());
        }
    }
    let k = nodes.len();
    Ok(GaussianForecast {
        mu: Tensor::new(&[t_pred, k, 3], mu)?,
        chol: Tensor::new(&[t_pred, k, 3, 3], chol)?,
        nodes,
    })
}

/// Projects `[T_pred, N, M]` features through `[M, 9]` and decodes.
pub fn emit_gaussians(features: &Tensor, head_w: &Tensor, mask: &[bool]) -> Result<GaussianForecast> {
    let &[t, n, m] = features.shape() else {
        return Err(Error::shape("emit_gaussians", format!("features {:?}", features.shape())));
    };
    let raw = features.clone().reshaped(&[t * n, m])?.matmul(head_w)?;
    if raw.shape()[1] != RAW_WIDTH {
        return Err(Error::shape("emit_gaussians", format!("projection {:?}", head_w.shape())));
    }
    forecast_from_raw(&raw.reshaped(&[t, n, RAW_WIDTH])?, mask)
}

/// `-log N(x | μ, L Lᵀ)` for one 3-vector.
pub fn step_nll(mu: [f64; 3], l: [[f64; 3]; 3], x: [f64; 3]) -> f64 {
    let mut flat: Vec<f64> = l.iter().flatten().copied().collect();
    for k in 0..3 {
        flat[k * 4] = flat[k * 4].max(DIAG_FLOOR);
    }
    let diff = [x[0] - mu[0], x[1] - mu[1], x[2] - mu[2]];
    let mut z = [0.0; 3];
    forward_substitute(&flat, &diff, &mut z, 3);
    let log_det: f64 = (0..3).map(|k| flat[k * 4].ln()).sum();
    1.5 * LN_2PI + log_det + 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

/// Mean over nodes of the summed per-step NLL. `truth` is `[T_pred, n, 3]`
/// in the forecast's node order.
pub fn nll_loss(forecast: &GaussianForecast, truth: &Tensor) -> Result<f64> {
    if truth.shape() != forecast.mu.shape() {
        return Err(Error::shape(
            "nll_loss",
            format!("truth {:?} for forecast {:?}", truth.shape(), forecast.mu.shape()),
        ));
    }
    let n = forecast.node_count();
    if n == 0 {
        return Err(Error::DataEmpty("nll_loss"));
    }
    let mut total = 0.0;
    for t in 0..forecast.steps() {
        for i in 0..n {
            let x = std::array::from_fn(|c| truth.at(&[t, i, c]));
            total += step_nll(forecast.mean(t, i), forecast.factor(t, i), x);
        }
    }
    Ok(total / n as f64)
}

/// `count` draws `μ + L z`, shape `[count, T_pred, n, 3]`.
pub fn sample_trajectories(forecast: &GaussianForecast, count: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_pred, n) = (forecast.steps(), forecast.node_count());
    let mut out = Vec::with_capacity(count * t_pred * n * 3);
    for _ in 0..count {
        for t in 0..t_pred {
            for i in 0..n {
                let mu = forecast.mean(t, i);
                let l = forecast.factor(t, i);
                let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                for r in 0..3 {
                    out.push(mu[r] + (0..=r).map(|k| l[r][k] * z[k]).sum::<f64>());
                }
            }
        }
    }
    Tensor::new(&[count, t_pred, n, 3], out).expect("sample buffer matches shape")
}
