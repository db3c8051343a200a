use std::fmt;

use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, EvalConfig};
use super::train::{train, TrainConfig};
use crate::error::Result;
use crate::ingest::Scene;
use crate::model::{TrajectoryModel, LAYER_CHOICES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerGridConfig {
    /// Epoch budget per cell; the schedule switch is scaled to the same
    /// fraction of the run as in the base configuration.
    pub epochs: usize,
    pub stgcn_layers: Vec<usize>,
    pub txp_layers: Vec<usize>,
}

impl Default for LayerGridConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            stgcn_layers: LAYER_CHOICES.to_vec(),
            txp_layers: LAYER_CHOICES.to_vec(),
        }
    }
}

/// ADE per layer combination: rows index STGCN depth, columns TXP depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGrid {
    pub stgcn_layers: Vec<usize>,
    pub txp_layers: Vec<usize>,
    pub ade_horizontal: Vec<Vec<f64>>,
    pub ade_vertical: Vec<Vec<f64>>,
    pub epochs: usize,
    pub full_epochs: usize,
}

impl LayerGrid {
    pub fn cell(&self, stgcn: usize, txp: usize) -> Option<(f64, f64)> {
        let r = self.stgcn_layers.iter().position(|&l| l == stgcn)?;
        let c = self.txp_layers.iter().position(|&l| l == txp)?;
        Some((self.ade_horizontal[r][c], self.ade_vertical[r][c]))
    }
}

impl fmt::Display for LayerGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# reduced budget: {} epochs per cell (full schedule: {})",
            self.epochs, self.full_epochs
        )?;
        writeln!(f, "# cells: ADE horizontal (deg) / ADE vertical (m); rows STGCN layers, columns TXP-CNN layers")?;
        write!(f, "stgcn\\txp")?;
        for c in &self.txp_layers {
            write!(f, "\t{c}")?;
        }
        for (r, l) in self.stgcn_layers.iter().enumerate() {
            write!(f, "\n{l}")?;
            for c in 0..self.txp_layers.len() {
                write!(f, "\t{:.6}/{:.3}", self.ade_horizontal[r][c], self.ade_vertical[r][c])?;
            }
        }
        Ok(())
    }
}

/// Trains one model per layer combination from the same seed and scores it
/// on `eval_scenes` with the mean protocol in raw units.
pub fn layer_grid(
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    eval_scenes: &[Scene],
    base: &TrainConfig,
    grid: &LayerGridConfig,
) -> Result<LayerGrid> {
    let switch = (base.lr_switch_epoch * grid.epochs / base.epochs.max(1)).min(grid.epochs.saturating_sub(1));
    let mut out = LayerGrid {
        stgcn_layers: grid.stgcn_layers.clone(),
        txp_layers: grid.txp_layers.clone(),
        ade_horizontal: Vec::new(),
        ade_vertical: Vec::new(),
        epochs: grid.epochs,
        full_epochs: base.epochs,
    };
    for &s in &grid.stgcn_layers {
        let (mut row_h, mut row_v) = (Vec::new(), Vec::new());
        for &t in &grid.txp_layers {
            let mut config = base.clone();
            config.epochs = grid.epochs;
            config.lr_switch_epoch = switch;
            config.model.stgcn_layers = s;
            config.model.txp_layers = t;
            let mut model = TrajectoryModel::new(config.model.clone(), config.seed)?;
            train(&mut model, train_scenes, val_scenes, &config, |_| {})?;
            let report = evaluate(&model, eval_scenes, EvalConfig { seed: config.seed, ..Default::default() })?;
            log::info!("layer grid ({s}, {t}): ade {:.6} / {:.3}", report.ade_horizontal, report.ade_vertical);
            row_h.push(report.ade_horizontal);
            row_v.push(report.ade_vertical);
        }
        out.ade_horizontal.push(row_h);
        out.ade_vertical.push(row_v);
    }
    Ok(out)
}
