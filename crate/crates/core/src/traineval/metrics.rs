use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dims {
    /// lon/lat 2-norm.
    Horizontal,
    /// |Δalt|.
    Vertical,
}

pub(crate) fn error_norm(p: [f64; 3], t: [f64; 3], dims: Dims) -> f64 {
    match dims {
        Dims::Horizontal => (p[0] - t[0]).hypot(p[1] - t[1]),
        Dims::Vertical => (p[2] - t[2]).abs(),
    }
}

fn check(op: &'static str, pred: &Tensor, truth: &Tensor) -> Result<(usize, usize)> {
    match (pred.shape(), truth.shape()) {
        (&[t, n, 3], b) if b == pred.shape() && t > 0 && n > 0 => Ok((t, n)),
        (a, b) => Err(Error::shape(op, format!("prediction {a:?} against truth {b:?}"))),
    }
}

fn point(x: &Tensor, t: usize, i: usize) -> [f64; 3] {
    std::array::from_fn(|c| x.at(&[t, i, c]))
}

/// Mean error norm over nodes and steps; inputs are `[T_pred, n, 3]`.
pub fn ade(pred: &Tensor, truth: &Tensor, dims: Dims) -> Result<f64> {
    let (t_pred, n) = check("ade", pred, truth)?;
    let total: f64 = (0..t_pred)
        .flat_map(|t| (0..n).map(move |i| (t, i)))
        .map(|(t, i)| error_norm(point(pred, t, i), point(truth, t, i), dims))
        .sum();
    Ok(total / (t_pred * n) as f64)
}

/// Mean error norm over nodes at the final step.
pub fn fde(pred: &Tensor, truth: &Tensor, dims: Dims) -> Result<f64> {
    let (t_pred, n) = check("fde", pred, truth)?;
    let last = t_pred - 1;
    let total: f64 = (0..n)
        .map(|i| error_norm(point(pred, last, i), point(truth, last, i), dims))
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub units: String,
    pub ade_horizontal: f64,
    pub ade_vertical: f64,
    pub fde_horizontal: f64,
    pub fde_vertical: f64,
    pub scenes: usize,
    pub nodes: usize,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, v) = if self.units == "raw" { ("deg", "m") } else { ("norm", "norm") };
        writeln!(f, "protocol        {}", self.protocol)?;
        writeln!(f, "units           {}", self.units)?;
        writeln!(f, "scenes          {}", self.scenes)?;
        writeln!(f, "nodes           {}", self.nodes)?;
        writeln!(f, "ade_horizontal  {:.6} {h}", self.ade_horizontal)?;
        writeln!(f, "ade_vertical    {:.6} {v}", self.ade_vertical)?;
        writeln!(f, "fde_horizontal  {:.6} {h}", self.fde_horizontal)?;
        write!(f, "fde_vertical    {:.6} {v}", self.fde_vertical)
    }
}
