//! Scene shards on disk.
//!
//! A shard is a JSON document whose fields appear in this order:
//! `scene_count`, then `scenes`, each scene carrying `n`, `t_obs`, `t_pred`,
//! `center`, `scale`, `positions` (row-major `[3, t_obs + t_pred, n]`, raw
//! units) followed by bookkeeping fields. Floats round-trip exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Scalers, Scene};
use crate::numerics::Tensor;

pub const SHARD_PREFIX: &str = "scenes-";
pub const DEFAULT_SHARD_SIZE: usize = 1024;

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    n: usize,
    t_obs: usize,
    t_pred: usize,
    center: [f64; 3],
    scale: [f64; 3],
    positions: Vec<f64>,
    aircraft: Vec<u32>,
    start_step: i64,
    source: String,
}

#[derive(Serialize, Deserialize)]
struct ShardFile {
    scene_count: usize,
    scenes: Vec<SceneRecord>,
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        Self {
            n: s.node_count(),
            t_obs: s.t_obs,
            t_pred: s.t_pred,
            center: s.scalers.center,
            scale: s.scalers.scale,
            positions: s.positions.data().to_vec(),
            aircraft: s.aircraft.clone(),
            start_step: s.start_step,
            source: s.source.clone(),
        }
    }
}

impl SceneRecord {
    fn into_scene(self) -> Result<Scene> {
        let steps = self.t_obs + self.t_pred;
        if self.aircraft.len() != self.n {
            return Err(Error::Config(format!(
                "shard scene lists {} aircraft for n = {}",
                self.aircraft.len(),
                self.n
            )));
        }
        let positions = Tensor::new(&[3, steps, self.n], self.positions)?;
        if !positions.is_finite() {
            return Err(Error::NonFinite { op: "load_scenes" });
        }
        Ok(Scene {
            t_obs: self.t_obs,
            t_pred: self.t_pred,
            positions,
            scalers: Scalers {
                center: self.center,
                scale: self.scale,
            },
            aircraft: self.aircraft,
            start_step: self.start_step,
            source: self.source,
        })
    }
}

pub fn encode_shard(scenes: &[Scene]) -> Result<String> {
    let file = ShardFile {
        scene_count: scenes.len(),
        scenes: scenes.iter().map(SceneRecord::from).collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn decode_shard(text: &str) -> Result<Vec<Scene>> {
    let file: ShardFile = serde_json::from_str(text)?;
    if file.scene_count != file.scenes.len() {
        return Err(Error::Config(format!(
            "shard declares {} scenes but holds {}",
            file.scene_count,
            file.scenes.len()
        )));
    }
    file.scenes.into_iter().map(SceneRecord::into_scene).collect()
}

/// Writes `scenes-00000.json`, `scenes-00001.json`, ... into `dir`.
pub fn write_scenes(dir: &Path, scenes: &[Scene], shard_size: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (k, chunk) in scenes.chunks(shard_size.max(1)).enumerate() {
        let path = dir.join(format!("{SHARD_PREFIX}{k:05}.json"));
        fs::write(&path, encode_shard(chunk)?)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Shard files in `dir`, sorted by name.
pub fn shard_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(SHARD_PREFIX) && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads every shard in `dir` in name order.
pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for path in shard_paths(dir)? {
        scenes.extend(decode_shard(&fs::read_to_string(&path)?)?);
    }
    Ok(scenes)
}
