//! Central finite-difference verification of tape gradients.

use rayon::prelude::*;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub abs_floor: f64,
    /// A coordinate is excluded when a kink input it moves lies within
    /// `kink_factor` times that input's own displacement of the kink.
    pub kink_factor: f64,
    /// Rounding allowance per loss evaluation, in units of `ε · |f|`.
    /// The resulting bound on the difference quotient is subtracted from
    /// the absolute error before dividing.
    pub roundoff_ulps: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            abs_floor: 1e-6,
            kink_factor: 10.0,
            roundoff_ulps: 64.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coordinate {
    pub input: usize,
    pub element: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    /// Maximum relative error per input tensor.
    pub per_input: Vec<f64>,
    pub checked: usize,
    pub excluded_kinks: Vec<Coordinate>,
    /// Tape gradients at the base point, one per input.
    pub analytic: Vec<Tensor>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

struct Evaluation {
    value: f64,
    kinks: Vec<f64>,
}

fn evaluate<F>(f: &F, point: &[Tensor]) -> Result<Evaluation>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(Evaluation {
        value: tape.value(loss).item(),
        kinks: tape.kink_inputs().to_vec(),
    })
}

/// Compares the tape gradient of `f` at `point` against central differences.
///
/// `f` records a scalar on the given tape from one variable per input tensor.
pub fn grad_check<F>(f: F, point: &[Tensor], config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base_kinks = tape.kink_inputs().to_vec();
    let base_value = tape.value(loss).item();
    let grads = tape.gradients(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(point)
        .map(|(&v, t)| {
            grads
                .wrt(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let coords: Vec<Coordinate> = point
        .iter()
        .enumerate()
        .flat_map(|(input, t)| (0..t.len()).map(move |element| Coordinate { input, element }))
        .collect();

    let h = config.step;
    let outcomes: Vec<Result<Option<f64>>> = coords
        .par_iter()
        .map(|c| {
            let mut plus = point.to_vec();
            plus[c.input].data_mut()[c.element] += h;
            let mut minus = point.to_vec();
            minus[c.input].data_mut()[c.element] -= h;
            let p = evaluate(&f, &plus)?;
            let m = evaluate(&f, &minus)?;
            if near_kink(&base_kinks, &p.kinks, &m.kinks, config.kink_factor) {
                return Ok(None);
            }
            let numeric = (p.value - m.value) / (2.0 * h);
            let exact = analytic[c.input].data()[c.element];
            let scale = p.value.abs().max(m.value.abs()).max(base_value.abs());
            let roundoff = config.roundoff_ulps * f64::EPSILON * scale / h;
            let denom = exact.abs().max(numeric.abs()).max(config.abs_floor);
            Ok(Some(((exact - numeric).abs() - roundoff).max(0.0) / denom))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_input: vec![0.0; point.len()],
        checked: 0,
        excluded_kinks: Vec::new(),
        analytic,
    };
    for (c, outcome) in coords.into_iter().zip(outcomes) {
        match outcome? {
            None => report.excluded_kinks.push(c),
            Some(err) => {
                report.checked += 1;
                report.per_input[c.input] = report.per_input[c.input].max(err);
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some(c);
                }
            }
        }
    }
    Ok(report)
}

/// A kink input counts when the perturbation crosses zero or comes within
/// `factor` half-displacements of it. Scaling by the displacement keeps
/// coordinates that barely move a near-zero activation in the check.
fn near_kink(base: &[f64], plus: &[f64], minus: &[f64], factor: f64) -> bool {
    if plus.len() != minus.len() || plus.len() != base.len() {
        return true;
    }
    plus.iter().zip(minus).zip(base).any(|((&p, &m), &b)| {
        let half_move = 0.5 * (p - m).abs();
        half_move > 0.0
            && (p.signum() != m.signum()
                || p.signum() != b.signum()
                || p.abs().min(m.abs()).min(b.abs()) < factor * half_move)
    })
}
