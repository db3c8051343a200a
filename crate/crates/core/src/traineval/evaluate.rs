use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{ade, fde, Dims, MetricsReport};
use crate::error::{Error, Result};
use crate::head::sample_trajectories;
use crate::ingest::{Scalers, Scene};
use crate::model::TrajectoryModel;
use crate::numerics::Tensor;

/// How a point prediction is obtained from the forecast.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// The forecast mean.
    Mean,
    /// Best of `K` candidates (the mean and `K - 1` samples), minimized per
    /// scene and per metric.
    BestOfK(usize),
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Mean => write!(f, "mean"),
            Protocol::BestOfK(k) => write!(f, "best_of_{k}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mean" {
            return Ok(Protocol::Mean);
        }
        s.strip_prefix("best_of_")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k > 0)
            .map(Protocol::BestOfK)
            .ok_or_else(|| Error::Config(format!("protocol must be mean or best_of_<K>, got {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricUnits {
    /// Degrees horizontally, meters vertically.
    Raw,
    /// Per-scene z-scored coordinates.
    Normalized,
}

impl fmt::Display for MetricUnits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricUnits::Raw => "raw",
            MetricUnits::Normalized => "normalized",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub units: MetricUnits,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Mean,
            units: MetricUnits::Raw,
            seed: 0,
        }
    }
}

/// Candidate predictions and the truth for one scene, all `[T_pred, n, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePrediction {
    pub candidates: Vec<Tensor>,
    pub truth: Tensor,
}

/// Pools per-scene metrics; with several candidates each metric takes its
/// per-scene minimum independently.
pub fn evaluate_predictions(
    predictions: &[ScenePrediction],
    protocol: Protocol,
    units: MetricUnits,
) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::DataEmpty("evaluation"));
    }
    let mut sums = [0.0; 4];
    let (mut steps_nodes, mut nodes) = (0usize, 0usize);
    for p in predictions {
        if p.candidates.is_empty() {
            return Err(Error::DataEmpty("evaluation candidates"));
        }
        let &[t, n, _] = p.truth.shape() else {
            return Err(Error::shape("evaluate", format!("truth {:?}", p.truth.shape())));
        };
        let mut best = [f64::INFINITY; 4];
        for c in &p.candidates {
            let scores = [
                ade(c, &p.truth, Dims::Horizontal)?,
                ade(c, &p.truth, Dims::Vertical)?,
                fde(c, &p.truth, Dims::Horizontal)?,
                fde(c, &p.truth, Dims::Vertical)?,
            ];
            for (b, s) in best.iter_mut().zip(scores) {
                *b = b.min(s);
            }
        }
        let weights = [(t * n) as f64, (t * n) as f64, n as f64, n as f64];
        for k in 0..4 {
            sums[k] += best[k] * weights[k];
        }
        steps_nodes += t * n;
        nodes += n;
    }
    Ok(MetricsReport {
        protocol: protocol.to_string(),
        units: units.to_string(),
        ade_horizontal: sums[0] / steps_nodes as f64,
        ade_vertical: sums[1] / steps_nodes as f64,
        fde_horizontal: sums[2] / nodes as f64,
        fde_vertical: sums[3] / nodes as f64,
        scenes: predictions.len(),
        nodes,
    })
}

fn to_units(x: &Tensor, scalers: &Scalers, units: MetricUnits) -> Tensor {
    match units {
        MetricUnits::Normalized => x.clone(),
        MetricUnits::Raw => Tensor::from_fn(x.shape(), |k| scalers.denormalize(k % 3, x.data()[k])),
    }
}

/// Future positions of a scene as `[T_pred, n, 3]`.
pub(crate) fn future_truth(scene: &Scene, units: MetricUnits) -> Tensor {
    let (n, t_obs, steps) = (scene.node_count(), scene.t_obs, scene.steps());
    let raw = Tensor::from_fn(&[scene.t_pred, n, 3], |k| {
        let (t, i, c) = (k / (3 * n), (k / 3) % n, k % 3);
        scene.positions.data()[(c * steps + t_obs + t) * n + i]
    });
    match units {
        MetricUnits::Raw => raw,
        MetricUnits::Normalized => Tensor::from_fn(raw.shape(), |k| scene.scalers.normalize(k % 3, raw.data()[k])),
    }
}

/// Scores a model on scenes under the configured protocol.
pub fn evaluate(model: &TrajectoryModel, scenes: &[Scene], config: EvalConfig) -> Result<MetricsReport> {
    let predictions = scenes
        .par_iter()
        .enumerate()
        .map(|(k, scene)| {
            let prepared = model.prepare(scene)?;
            let forecast = model.predict(&prepared)?;
            let candidates = match config.protocol {
                Protocol::Mean => vec![to_units(&forecast.mu, &scene.scalers, config.units)],
                Protocol::BestOfK(count) => {
                    // the mean is the first candidate, followed by count - 1 draws
                    let seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64);
                    let draws = sample_trajectories(&forecast, count - 1, seed);
                    let per = forecast.mu.len();
                    let shape = forecast.mu.shape().to_vec();
                    let mut candidates = vec![to_units(&forecast.mu, &scene.scalers, config.units)];
                    for j in 0..count - 1 {
                        let x = Tensor::new(&shape, draws.data()[j * per..(j + 1) * per].to_vec())?;
                        candidates.push(to_units(&x, &scene.scalers, config.units));
                    }
                    candidates
                }
            };
            Ok(ScenePrediction {
                candidates,
                truth: future_truth(scene, config.units),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&predictions, config.protocol, config.units)
}
