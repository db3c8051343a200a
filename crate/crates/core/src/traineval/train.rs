use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::split::SplitFractions;
use crate::error::{Error, Result};
use crate::ingest::Scene;
use crate::model::{ModelConfig, PreparedScene, TrajectoryModel};
use crate::numerics::{adam_step, load_checkpoint, save_checkpoint, AdamConfig, ParamGrads};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_after: f64,
    pub lr_switch_epoch: usize,
    pub clip_grad: bool,
    pub clip_norm: f64,
    pub seed: u64,
    pub split: SplitFractions,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 400,
            lr: 0.001,
            lr_after: 0.0002,
            lr_switch_epoch: 200,
            clip_grad: true,
            clip_norm: 10.0,
            seed: 0,
            split: SplitFractions::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.lr_switch_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "lr_switch_epoch ({}) must be below epochs ({})",
                self.lr_switch_epoch, self.epochs
            )));
        }
        if !(self.lr > 0.0 && self.lr_after > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.clip_grad && !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Step schedule: `lr` before `lr_switch_epoch`, `lr_after` from then on.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    if epoch < config.lr_switch_epoch {
        config.lr
    } else {
        config.lr_after
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over real nodes of the per-node NLL summed over predicted steps.
    pub train_nll: f64,
    /// Same measure on the validation scenes after the epoch; NaN without any.
    pub val_nll: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Pooled NLL of each optimizer step, measured before the update.
    pub step_nll: Vec<f64>,
}

fn pooled_nll(model: &TrajectoryModel, scenes: &[PreparedScene]) -> Result<f64> {
    let sums = scenes
        .par_iter()
        .map(|s| model.scene_nll(s).map(|l| (l, s.n_real())))
        .collect::<Result<Vec<_>>>()?;
    let (loss, nodes) = sums.iter().fold((0.0, 0), |(l, n), &(a, b)| (l + a, n + b));
    Ok(if nodes == 0 { f64::NAN } else { loss / nodes as f64 })
}

fn dropout_rng(seed: u64, epoch: usize, scene: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | scene as u64);
    rng
}

/// Adam over shuffled mini-batches with the configured schedule.
///
/// Per-scene gradients are computed in parallel and summed in batch order,
/// so a fixed seed reproduces every number except wall time. `on_epoch` sees
/// each record as it is produced.
pub fn train(
    model: &mut TrajectoryModel,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_scenes.is_empty() {
        return Err(Error::DataEmpty("training"));
    }
    let prepare = |scenes: &[Scene]| -> Result<Vec<PreparedScene>> {
        scenes.par_iter().map(|s| model.prepare(s)).collect()
    };
    let train_set = prepare(train_scenes)?;
    let val_set = prepare(val_scenes)?;

    let initial = pooled_nll(model, &train_set)?;
    if !initial.is_finite() {
        return Err(Error::NonFinite { op: "initial_loss" });
    }

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut outcome = TrainOutcome {
        log: Vec::with_capacity(config.epochs),
        step_nll: Vec::new(),
    };
    let use_dropout = config.model.dropout > 0.0;
    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch);
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_nodes) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&k| {
                    let mut drop = use_dropout.then(|| dropout_rng(config.seed, epoch, k));
                    model
                        .scene_gradients(&train_set[k], drop.as_mut())
                        .map(|(l, g)| (l, train_set[k].n_real(), g))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = ParamGrads::empty(model.store().len());
            let (mut loss, mut nodes) = (0.0, 0usize);
            for (l, n, g) in &results {
                grads.add_assign(g);
                loss += l;
                nodes += n;
            }
            grads.scale(1.0 / nodes as f64);
            let store = model.store_mut();
            store.accumulate(&grads)?;
            if config.clip_grad {
                let norm = store.grad_norm();
                if !norm.is_finite() {
                    return Err(Error::NonFinite { op: "gradient" });
                }
                if norm > config.clip_norm {
                    store.scale_grads(config.clip_norm / norm);
                }
            }
            adam_step(store, lr, AdamConfig::default());
            if store.entries().any(|e| !e.value.is_finite()) {
                return Err(Error::NonFinite { op: "adam_step" });
            }
            outcome.step_nll.push(loss / nodes as f64);
            epoch_loss += loss;
            epoch_nodes += nodes;
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_nll: epoch_loss / epoch_nodes as f64,
            val_nll: if val_set.is_empty() { f64::NAN } else { pooled_nll(model, &val_set)? },
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {} lr {} train_nll {:.6} val_nll {:.6}",
            record.epoch,
            record.lr,
            record.train_nll,
            record.val_nll
        );
        on_epoch(&record);
        outcome.log.push(record);
    }
    Ok(outcome)
}

/// Tab-separated log with a commented header naming the run shape.
pub fn write_log<W: Write>(mut w: W, config: &TrainConfig, log: &[EpochRecord]) -> Result<()> {
    write_log_header(&mut w, config)?;
    for r in log {
        write_log_record(&mut w, r)?;
    }
    Ok(())
}

pub fn write_log_header<W: Write>(mut w: W, config: &TrainConfig) -> Result<()> {
    let m = &config.model;
    writeln!(
        w,
        "# batch_size={} epochs={} stgcn_layers={} txp_layers={} gat_heads={} recon_heads={} seed={}",
        config.batch_size, config.epochs, m.stgcn_layers, m.txp_layers, m.gat_heads, m.recon_heads, config.seed
    )?;
    writeln!(w, "epoch\tlr\ttrain_nll\tval_nll\twall_time_s")?;
    Ok(())
}

pub fn write_log_record<W: Write>(mut w: W, r: &EpochRecord) -> Result<()> {
    writeln!(
        w,
        "{}\t{}\t{:.9}\t{:.9}\t{:.3}",
        r.epoch, r.lr, r.train_nll, r.val_nll, r.wall_time_s
    )?;
    Ok(())
}

/// Metadata stored alongside the parameters in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epochs_completed: usize,
}

pub fn save_model(path: &Path, model: &TrajectoryModel, meta: &CheckpointMeta) -> Result<()> {
    save_checkpoint(path, model.store(), &serde_json::to_string(meta)?)
}

pub fn load_model(path: &Path) -> Result<(TrajectoryModel, CheckpointMeta)> {
    let (store, meta) = load_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&meta)?;
    Ok((TrajectoryModel::from_store(meta.model.clone(), store)?, meta))
}
