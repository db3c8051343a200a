//! Subcommand bodies. Each writes only under the run's out_dir.

use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dastgcn_core::ingest::{cut_scenes, parse_track_file, resample_to_grid, write_track_csv, IdEncoding};
use dastgcn_core::model::toy_scene;
use dastgcn_core::numerics::GradCheckConfig;
use dastgcn_core::stgraph::split_to_capacity;
use dastgcn_core::store::{load_scenes, shard_paths, write_scenes};
use dastgcn_core::synth::generate_tracks;
use dastgcn_core::traineval::{
    self, evaluate, layer_grid, load_model, save_model, split_scenes, write_log_header, write_log_record,
    CheckpointMeta, DataSplit, SplitFractions,
};
use dastgcn_core::{Error, Result, Scene, TrajectoryModel};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

pub const THREADS_ENV: &str = "DASTGCN_THREADS";
pub const LOCK_FILE: &str = ".dastgcn.lock";

pub enum Status {
    Ok,
    Failed(u8),
}

pub type Runner = fn(&RunConfig, &Path) -> Result<Status>;

pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Takes the out_dir lock, echoes the merged config and runs the command.
pub fn execute(config: &RunConfig, run: Runner) -> Result<Status> {
    let out = config.out_dir();
    fs::create_dir_all(&out)?;
    let lock = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(out.join(LOCK_FILE))?;
    match lock.try_lock() {
        Ok(()) => {}
        Err(TryLockError::WouldBlock) => {
            return Err(Error::Config(format!("{} is in use by another run", out.display())));
        }
        Err(TryLockError::Error(e)) => return Err(e.into()),
    }
    fs::write(out.join("config.toml"), config.to_flat_toml()?)?;
    let status = run(config, &out);
    drop(lock);
    status
}

fn required_path(value: &str, key: &str) -> Result<PathBuf> {
    if value.is_empty() {
        return Err(Error::Config(format!("{key} is required for this command")));
    }
    let path = PathBuf::from(value);
    if !path.exists() {
        return Err(Error::Config(format!("{key} {} does not exist", path.display())));
    }
    Ok(path)
}

/// Scenes from `paths.data_dir`, or from its `scenes` subdirectory.
fn load_data(config: &RunConfig) -> Result<Vec<Scene>> {
    let dir = required_path(&config.paths.data_dir, "paths.data_dir")?;
    let nested = dir.join("scenes");
    let dir = if shard_paths(&dir)?.is_empty() && nested.is_dir() { nested } else { dir };
    let scenes = load_scenes(&dir)?;
    if scenes.is_empty() {
        return Err(Error::DataEmpty("scene shards"));
    }
    Ok(scenes)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_shards(out: &Path, scenes: &[Scene], shard_size: usize) -> Result<Vec<PathBuf>> {
    let dir = out.join("scenes");
    if dir.is_dir() {
        for stale in shard_paths(&dir)? {
            fs::remove_file(stale)?;
        }
    }
    write_scenes(&dir, scenes, shard_size)
}

fn fit_capacity(scenes: Vec<Scene>, config: &RunConfig) -> Result<Vec<Scene>> {
    let mut out = Vec::with_capacity(scenes.len());
    for s in &scenes {
        out.extend(split_to_capacity(s, config.model.n_max, config.prepare.min_aircraft)?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct FileSummary {
    file: String,
    rows_read: usize,
    rows_rejected: usize,
    duplicates_dropped: usize,
    aircraft: usize,
    scenes: usize,
    error: Option<String>,
}

#[derive(Serialize)]
struct PrepareSummary {
    files: Vec<FileSummary>,
    rows_read: usize,
    rows_rejected: usize,
    duplicates_dropped: usize,
    scenes: usize,
    shards: usize,
}

fn prepare_file(path: &Path, config: &RunConfig) -> Result<(FileSummary, Vec<Scene>)> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let parsed = parse_track_file(path, &config.parse_options())?;
    let mut summary = FileSummary {
        file: name.clone(),
        rows_read: parsed.rows_read,
        rows_rejected: parsed.errors.len(),
        duplicates_dropped: parsed.duplicates_dropped,
        aircraft: 0,
        scenes: 0,
        error: None,
    };
    if parsed.points.is_empty() {
        let first = parsed
            .errors
            .first()
            .map(|e| format!(" (line {}: {})", e.line, e.reason))
            .unwrap_or_default();
        summary.error = Some(format!("no valid rows{first}"));
        return Ok((summary, Vec::new()));
    }
    let ids = IdEncoding::from_points(&parsed.points);
    summary.aircraft = ids.len();
    let series = resample_to_grid(&parsed.points, &ids, config.resample_config());
    let scenes = fit_capacity(cut_scenes(&series, config.scene_config(), &name)?, config)?;
    summary.scenes = scenes.len();
    if scenes.is_empty() {
        summary.error = Some("no window with enough simultaneous aircraft".into());
    }
    Ok((summary, scenes))
}

pub fn prepare(config: &RunConfig, out: &Path) -> Result<Status> {
    let dir = required_path(&config.paths.data_dir, "paths.data_dir")?;
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::DataEmpty("csv files in data_dir"));
    }
    let mut summaries = Vec::new();
    let mut scenes = Vec::new();
    for path in &files {
        match prepare_file(path, config) {
            Ok((summary, found)) => {
                summaries.push(summary);
                scenes.extend(found);
            }
            Err(e) => summaries.push(FileSummary {
                file: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                rows_read: 0,
                rows_rejected: 0,
                duplicates_dropped: 0,
                aircraft: 0,
                scenes: 0,
                error: Some(e.to_string()),
            }),
        }
    }
    let shards = if scenes.is_empty() { Vec::new() } else { write_shards(out, &scenes, config.prepare.shard_size)? };
    let summary = PrepareSummary {
        rows_read: summaries.iter().map(|s| s.rows_read).sum(),
        rows_rejected: summaries.iter().map(|s| s.rows_rejected).sum(),
        duplicates_dropped: summaries.iter().map(|s| s.duplicates_dropped).sum(),
        scenes: scenes.len(),
        shards: shards.len(),
        files: summaries,
    };
    write_json(&out.join("summary.json"), &summary)?;
    for f in &summary.files {
        match &f.error {
            Some(reason) => eprintln!("{}: {reason}", f.file),
            None => log::info!("{}: {} rows, {} aircraft, {} scenes", f.file, f.rows_read, f.aircraft, f.scenes),
        }
    }
    if scenes.is_empty() {
        eprintln!("error: no scenes produced");
        return Ok(Status::Failed(2));
    }
    println!("{} scenes in {} shards under {}", summary.scenes, summary.shards, out.join("scenes").display());
    Ok(Status::Ok)
}

pub fn synth(config: &RunConfig, out: &Path) -> Result<Status> {
    let spec = config.synthetic_spec()?;
    let scene_config = config.scene_config();
    let tracks = generate_tracks(&spec, &scene_config)?;
    let mut scenes = Vec::new();
    for t in &tracks {
        scenes.extend(cut_scenes(&t.series, scene_config, &t.source)?);
    }
    let scenes = fit_capacity(scenes, config)?;
    if config.synth.write_csv {
        let points: Vec<_> = tracks.iter().flat_map(|t| t.track_points()).collect();
        write_track_csv(&out.join("tracks.csv"), &points)?;
    }
    let shards = write_shards(out, &scenes, config.prepare.shard_size)?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "kind": spec.kind.name(),
            "instances": spec.instances,
            "aircraft": spec.aircraft,
            "scenes": scenes.len(),
            "shards": shards.len(),
        }),
    )?;
    println!("{} scenes in {} shards under {}", scenes.len(), shards.len(), out.join("scenes").display());
    Ok(Status::Ok)
}

fn pick(scenes: &[Scene], indices: &[usize]) -> Vec<Scene> {
    indices.iter().map(|&i| scenes[i].clone()).collect()
}

fn partition(split: &DataSplit, name: &str, total: usize) -> Vec<usize> {
    match name {
        "train" => split.train.clone(),
        "val" => split.val.clone(),
        "test" => split.test.clone(),
        _ => (0..total).collect(),
    }
}

#[derive(Serialize)]
struct SplitRecord<'a> {
    seed: u64,
    fractions: SplitFractions,
    train: &'a [usize],
    val: &'a [usize],
    test: &'a [usize],
}

fn write_split(out: &Path, split: &DataSplit, fractions: SplitFractions, seed: u64) -> Result<()> {
    write_json(
        &out.join("split.json"),
        &SplitRecord { seed, fractions, train: &split.train, val: &split.val, test: &split.test },
    )
}

pub fn train(config: &RunConfig, out: &Path) -> Result<Status> {
    let train_config = config.train_config();
    let scenes = load_data(config)?;
    let split = split_scenes(&scenes, config.split, config.seed)?;
    write_split(out, &split, config.split, config.seed)?;
    let (train_set, val_set) = (pick(&scenes, &split.train), pick(&scenes, &split.val));
    log::info!("{} training scenes, {} validation scenes", train_set.len(), val_set.len());

    let mut model = TrajectoryModel::new(config.model.clone(), config.seed)?;
    let mut log_file = BufWriter::new(File::create(out.join("train_log.tsv"))?);
    write_log_header(&mut log_file, &train_config)?;
    log_file.flush()?;
    let mut log_error = None;
    let outcome = traineval::train(&mut model, &train_set, &val_set, &train_config, |record| {
        if log_error.is_none() {
            if let Err(e) = write_log_record(&mut log_file, record).and_then(|()| Ok(log_file.flush()?)) {
                log_error = Some(e);
            }
        }
        log::info!("epoch {} train_nll {:.6} val_nll {:.6}", record.epoch, record.train_nll, record.val_nll);
    })?;
    if let Some(e) = log_error {
        return Err(e);
    }
    let meta = CheckpointMeta {
        model: config.model.clone(),
        train: train_config,
        epochs_completed: outcome.log.len(),
    };
    let checkpoint = out.join("checkpoint.bin");
    save_model(&checkpoint, &model, &meta)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} epochs: train_nll {:.6} val_nll {:.6}; checkpoint {}",
            outcome.log.len(),
            last.train_nll,
            last.val_nll,
            checkpoint.display()
        );
    }
    Ok(Status::Ok)
}

/// The checkpoint's model and the scenes of the configured partition,
/// split with the seed and fractions the checkpoint was trained with.
fn checkpoint_and_scenes(config: &RunConfig) -> Result<(TrajectoryModel, Vec<(usize, Scene)>)> {
    let checkpoint = required_path(&config.paths.checkpoint, "paths.checkpoint")?;
    let scenes = load_data(config)?;
    let (model, meta) = load_model(&checkpoint)?;
    let split = split_scenes(&scenes, meta.train.split, meta.train.seed)?;
    let chosen: Vec<(usize, Scene)> = partition(&split, &config.eval.split, scenes.len())
        .into_iter()
        .map(|i| (i, scenes[i].clone()))
        .collect();
    if chosen.is_empty() {
        return Err(Error::DataEmpty("selected partition"));
    }
    Ok((model, chosen))
}

pub fn eval(config: &RunConfig, out: &Path) -> Result<Status> {
    let eval_config = config.eval_config()?;
    let (model, chosen) = checkpoint_and_scenes(config)?;
    let scenes: Vec<Scene> = chosen.into_iter().map(|(_, s)| s).collect();
    let report = evaluate(&model, &scenes, eval_config)?;
    fs::write(out.join("metrics.txt"), format!("{report}\n"))?;
    write_json(&out.join("metrics.json"), &report)?;
    println!("{report}");
    Ok(Status::Ok)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn predict(config: &RunConfig, out: &Path) -> Result<Status> {
    let (model, chosen) = checkpoint_and_scenes(config)?;
    let forecasts = chosen
        .par_iter()
        .map(|(_, s)| model.prepare(s).and_then(|p| model.predict(&p)))
        .collect::<Result<Vec<_>>>()?;

    let mut dump = BufWriter::new(File::create(out.join("forecast.tsv"))?);
    writeln!(dump, "# one row per scene, node and predicted step")?;
    writeln!(dump, "# lon, lat (deg) and alt (m) are the predicted mean in raw units")?;
    writeln!(dump, "# l11..l33 are the lower Cholesky factor entries in normalized units")?;
    writeln!(dump, "scene\tnode\taircraft\tstep\tlon\tlat\talt\tl11\tl21\tl22\tl31\tl32\tl33")?;

    let mut traj = BufWriter::new(File::create(out.join("trajectories.csv"))?);
    writeln!(traj, "scene,node,aircraft,kind,step,lon,lat,alt,var_lon,var_lat,var_alt")?;

    let mut rows = 0usize;
    for ((index, scene), forecast) in chosen.iter().zip(&forecasts) {
        let sc = &scene.scalers;
        for node in 0..scene.node_count() {
            let aircraft = scene.aircraft[node];
            let mut line = |kind: &str, step: usize, p: [f64; 3], var: Option<[f64; 3]>| -> std::io::Result<()> {
                rows += 1;
                writeln!(
                    traj,
                    "{index},{node},{aircraft},{kind},{},{},{},{},{},{},{}",
                    scene.start_step + step as i64,
                    p[0],
                    p[1],
                    p[2],
                    fmt_opt(var.map(|v| v[0])),
                    fmt_opt(var.map(|v| v[1])),
                    fmt_opt(var.map(|v| v[2]))
                )
            };
            for t in 0..scene.t_obs {
                line("observed", t, scene.position(t, node), None)?;
            }
            for t in scene.t_obs..scene.steps() {
                line("truth", t, scene.position(t, node), None)?;
            }
            for t in 0..scene.t_pred {
                let mu = forecast.mean(t, node);
                let raw: [f64; 3] = std::array::from_fn(|c| sc.denormalize(c, mu[c]));
                let cov = forecast.covariance(t, node);
                let var: [f64; 3] = std::array::from_fn(|c| cov[c][c] * sc.scale[c] * sc.scale[c]);
                line("predicted", scene.t_obs + t, raw, Some(var))?;
                let l = forecast.factor(t, node);
                writeln!(
                    dump,
                    "{index}\t{node}\t{aircraft}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    scene.start_step + (scene.t_obs + t) as i64,
                    raw[0],
                    raw[1],
                    raw[2],
                    l[0][0],
                    l[1][0],
                    l[1][1],
                    l[2][0],
                    l[2][1],
                    l[2][2]
                )?;
            }
        }
    }
    dump.flush()?;
    traj.flush()?;
    println!("{} scenes, {rows} trajectory rows written to {}", chosen.len(), out.display());
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct GradcheckSummary<'a> {
    nodes: usize,
    step: f64,
    tolerance: f64,
    max_rel_error: f64,
    checked: usize,
    excluded: usize,
    params: &'a [dastgcn_core::model::ParamCheck],
}

pub fn gradcheck(config: &RunConfig, out: &Path) -> Result<Status> {
    let gc = &config.gradcheck;
    let model = TrajectoryModel::new(config.model.clone(), config.seed)?;
    let scene = model.prepare(&toy_scene(gc.nodes, config.model.t_obs, config.model.t_pred)?)?;
    let check = model.gradient_check(
        &scene,
        GradCheckConfig {
            step: gc.step,
            kink_factor: gc.kink_factor,
            ..GradCheckConfig::default()
        },
    )?;
    let summary = GradcheckSummary {
        nodes: gc.nodes,
        step: gc.step,
        tolerance: gc.tolerance,
        max_rel_error: check.report.max_rel_error,
        checked: check.report.checked,
        excluded: check.report.excluded_kinks.len(),
        params: &check.params,
    };
    write_json(&out.join("gradcheck.json"), &summary)?;
    println!("{:<14} {:>8} {:>8} {:>8} {:>12}", "parameter", "checked", "active", "excluded", "max_rel_err");
    for p in &check.params {
        println!("{:<14} {:>8} {:>8} {:>8} {:>12.3e}", p.name, p.checked, p.active, p.excluded, p.max_rel_error);
    }
    println!("max relative error {:.3e} (tolerance {:.0e})", summary.max_rel_error, gc.tolerance);
    let uncovered: Vec<&str> = check.params.iter().filter(|p| p.active == 0).map(|p| p.name.as_str()).collect();
    if !uncovered.is_empty() {
        log::warn!("no active coordinate checked for {}; try another --seed", uncovered.join(", "));
    }
    if !check.report.passes(gc.tolerance) {
        eprintln!("error: gradient check failed");
        return Ok(Status::Failed(3));
    }
    Ok(Status::Ok)
}

pub fn layergrid(config: &RunConfig, out: &Path) -> Result<Status> {
    let scenes = load_data(config)?;
    let split = split_scenes(&scenes, config.split, config.seed)?;
    write_split(out, &split, config.split, config.seed)?;
    let grid = layer_grid(
        &pick(&scenes, &split.train),
        &pick(&scenes, &split.val),
        &pick(&scenes, &split.test),
        &config.train_config(),
        &config.grid,
    )?;
    fs::write(out.join("layer_grid.txt"), format!("{grid}\n"))?;
    write_json(&out.join("layer_grid.json"), &grid)?;
    println!("{grid}");
    Ok(Status::Ok)
}
