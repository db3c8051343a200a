//! ADS-B track ingestion: parsing, grid resampling, and scene windowing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEET_TO_METERS: f64 = 0.3048;

/// One raw position report.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackPoint {
    pub timestamp: i64,
    pub aircraft_id: String,
    pub lon: f64,
    pub lat: f64,
    /// Meters.
    pub alt: f64,
}

/// Column names of the five fields in a track file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnMap {
    pub timestamp: String,
    pub aircraft_id: String,
    pub lon: String,
    pub lat: String,
    pub alt: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            aircraft_id: "aircraft_id".into(),
            lon: "lon".into(),
            lat: "lat".into(),
            alt: "alt".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParseOptions {
    pub columns: ColumnMap,
    /// Source altitudes are in feet and get converted to meters.
    pub alt_in_feet: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RowError {
    pub line: u64,
    pub reason: String,
}

impl From<RowError> for Error {
    fn from(e: RowError) -> Self {
        Error::MalformedRow {
            line: e.line,
            reason: e.reason,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedTracks {
    /// Sorted by `(aircraft_id, timestamp)`, duplicates removed.
    pub points: Vec<TrackPoint>,
    pub errors: Vec<RowError>,
    pub duplicates_dropped: usize,
    pub rows_read: usize,
}

pub fn parse_track_file(path: &Path, options: &ParseOptions) -> Result<ParsedTracks> {
    let parsed = parse_track_reader(File::open(path)?, path, options)?;
    Ok(parsed)
}

/// Parses CSV track data; `origin` names the source in errors.
pub fn parse_track_reader<R: Read>(
    reader: R,
    origin: &Path,
    options: &ParseOptions,
) -> Result<ParsedTracks> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::HeaderMismatch {
                path: origin.to_path_buf(),
                found: headers.clone(),
                missing: name.to_owned(),
            })
    };
    let c = &options.columns;
    let cols = [
        column(&c.timestamp)?,
        column(&c.aircraft_id)?,
        column(&c.lon)?,
        column(&c.lat)?,
        column(&c.alt)?,
    ];

    let mut out = ParsedTracks::default();
    for record in rdr.records() {
        out.rows_read += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                out.errors.push(RowError {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        match parse_row(&record, cols, options.alt_in_feet) {
            Ok(p) => out.points.push(p),
            Err(reason) => out.errors.push(RowError { line, reason }),
        }
    }
    if out.rows_read == 0 {
        return Err(Error::EmptyFile(origin.to_path_buf()));
    }

    // stable sort keeps the first occurrence of a duplicate first
    out.points
        .sort_by(|a, b| (&a.aircraft_id, a.timestamp).cmp(&(&b.aircraft_id, b.timestamp)));
    let before = out.points.len();
    out.points
        .dedup_by(|b, a| a.aircraft_id == b.aircraft_id && a.timestamp == b.timestamp);
    out.duplicates_dropped = before - out.points.len();
    Ok(out)
}

fn parse_row(record: &csv::StringRecord, cols: [usize; 5], feet: bool) -> Result<TrackPoint, String> {
    let field = |i: usize, name: &str| {
        record
            .get(cols[i])
            .filter(|s| !s.is_empty())
            .ok_or_else(|| format!("missing {name}"))
    };
    let number = |i: usize, name: &str| -> Result<f64, String> {
        let raw = field(i, name)?;
        let v: f64 = raw.parse().map_err(|_| format!("{name} {raw:?} is not a number"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("{name} is not finite"))
        }
    };
    let ts_raw = field(0, "timestamp")?;
    let timestamp: i64 = ts_raw
        .parse()
        .map_err(|_| format!("timestamp {ts_raw:?} is not an integer"))?;
    let aircraft_id = field(1, "aircraft_id")?.to_owned();
    let lon = number(2, "lon")?;
    let lat = number(3, "lat")?;
    let mut alt = number(4, "alt")?;
    if !(-180.0..=180.0).contains(&lon) {
        return Err(format!("lon {lon} outside [-180, 180]"));
    }
    if !(-90.0..=90.0).contains(&lat) {
        return Err(format!("lat {lat} outside [-90, 90]"));
    }
    if feet {
        alt *= FEET_TO_METERS;
    }
    Ok(TrackPoint {
        timestamp,
        aircraft_id,
        lon,
        lat,
        alt,
    })
}

pub fn write_track_csv(path: &Path, points: &[TrackPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["timestamp", "aircraft_id", "lon", "lat", "alt"])?;
    for p in points {
        w.write_record(&[
            p.timestamp.to_string(),
            p.aircraft_id.clone(),
            p.lon.to_string(),
            p.lat.to_string(),
            p.alt.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Maps opaque aircraft identifiers to small integers in ascending string order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdEncoding {
    ids: BTreeMap<String, u32>,
}

impl IdEncoding {
    pub fn from_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut names: Vec<&str> = ids.into_iter().collect();
        names.sort_unstable();
        names.dedup();
        Self {
            ids: names
                .into_iter()
                .enumerate()
                .map(|(i, s)| (s.to_owned(), i as u32))
                .collect(),
        }
    }

    pub fn from_points(points: &[TrackPoint]) -> Self {
        Self::from_ids(points.iter().map(|p| p.aircraft_id.as_str()))
    }

    pub fn get(&self, id: &str) -> Option<u32> {
        self.ids.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSample {
    pub step: i64,
    pub lon: f64,
    pub lat: f64,
    pub alt: f64,
}

impl GridSample {
    pub fn coords(&self) -> [f64; 3] {
        [self.lon, self.lat, self.alt]
    }
}

/// A contiguous run of grid samples for one aircraft.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackSeries {
    pub aircraft_index: u32,
    pub samples: Vec<GridSample>,
}

impl TrackSeries {
    pub fn first_step(&self) -> i64 {
        self.samples[0].step
    }

    pub fn last_step(&self) -> i64 {
        self.samples[self.samples.len() - 1].step
    }

    pub fn covers(&self, start: i64, end: i64) -> bool {
        !self.samples.is_empty() && self.first_step() <= start && self.last_step() >= end
    }

    pub fn at(&self, step: i64) -> Option<&GridSample> {
        let offset = usize::try_from(step - self.samples.first()?.step).ok()?;
        self.samples.get(offset)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResampleConfig {
    /// Grid spacing in seconds.
    pub step: i64,
    /// Report gaps longer than this split a track into separate segments.
    pub gap_limit: i64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            step: 10,
            gap_limit: 60,
        }
    }
}

/// Linearly interpolates each aircraft onto multiples of `config.step`.
///
/// `points` must be sorted by `(aircraft_id, timestamp)` without duplicates,
/// as returned by [`parse_track_file`]. Aircraft missing from `ids` are skipped.
pub fn resample_to_grid(
    points: &[TrackPoint],
    ids: &IdEncoding,
    config: ResampleConfig,
) -> Vec<TrackSeries> {
    let mut out = Vec::new();
    for track in points.chunk_by(|a, b| a.aircraft_id == b.aircraft_id) {
        let Some(index) = ids.get(&track[0].aircraft_id) else {
            continue;
        };
        for segment in track.chunk_by(|a, b| b.timestamp - a.timestamp <= config.gap_limit) {
            let samples = interpolate_segment(segment, config.step);
            if samples.len() >= 2 {
                out.push(TrackSeries {
                    aircraft_index: index,
                    samples,
                });
            }
        }
    }
    out.sort_by_key(|s| (s.aircraft_index, s.first_step()));
    out
}

fn interpolate_segment(segment: &[TrackPoint], step: i64) -> Vec<GridSample> {
    let (first, last) = (segment[0].timestamp, segment[segment.len() - 1].timestamp);
    let start = first.div_euclid(step) + i64::from(first.rem_euclid(step) != 0);
    let end = last.div_euclid(step);
    let mut samples = Vec::new();
    let mut cursor = 0;
    for k in start..=end {
        let t = k * step;
        while cursor + 1 < segment.len() && segment[cursor + 1].timestamp < t {
            cursor += 1;
        }
        if cursor + 1 < segment.len() && segment[cursor + 1].timestamp == t {
            cursor += 1;
        }
        let a = &segment[cursor];
        let sample = if a.timestamp == t || cursor + 1 == segment.len() {
            GridSample {
                step: k,
                lon: a.lon,
                lat: a.lat,
                alt: a.alt,
            }
        } else {
            let b = &segment[cursor + 1];
            let w = (t - a.timestamp) as f64 / (b.timestamp - a.timestamp) as f64;
            GridSample {
                step: k,
                lon: a.lon + w * (b.lon - a.lon),
                lat: a.lat + w * (b.lat - a.lat),
                alt: a.alt + w * (b.alt - a.alt),
            }
        };
        samples.push(sample);
    }
    samples
}

/// Per-coordinate affine normalization `(x - center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scalers {
    pub center: [f64; 3],
    pub scale: [f64; 3],
}

impl Scalers {
    pub const SCALE_FLOOR: f64 = 1e-6;

    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: [1.0; 3],
        }
    }

    pub fn normalize(&self, coord: usize, value: f64) -> f64 {
        (value - self.center[coord]) / self.scale[coord]
    }

    pub fn denormalize(&self, coord: usize, value: f64) -> f64 {
        value * self.scale[coord] + self.center[coord]
    }
}

/// Fixed-roster window of `n` aircraft over `t_obs + t_pred` grid steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub t_obs: usize,
    pub t_pred: usize,
    /// Raw units, shape `[3, t_obs + t_pred, n]`: lon (deg), lat (deg), alt (m).
    pub positions: Tensor,
    pub scalers: Scalers,
    /// Encoded aircraft ids in node order (ascending).
    pub aircraft: Vec<u32>,
    pub start_step: i64,
    pub source: String,
}

impl Scene {
    pub fn node_count(&self) -> usize {
        self.positions.shape()[2]
    }

    pub fn steps(&self) -> usize {
        self.t_obs + self.t_pred
    }

    pub fn position(&self, step: usize, node: usize) -> [f64; 3] {
        std::array::from_fn(|c| self.positions.at(&[c, step, node]))
    }

    /// Builds a scene and fits its scalers on the observation segment.
    pub fn from_positions(
        positions: Tensor,
        t_obs: usize,
        t_pred: usize,
        aircraft: Vec<u32>,
        start_step: i64,
        source: impl Into<String>,
    ) -> Result<Self> {
        match positions.shape() {
            &[3, t, n] if t == t_obs + t_pred && n == aircraft.len() && n >= 1 => {}
            s => {
                return Err(Error::shape(
                    "scene",
                    format!("positions {s:?} for t_obs={t_obs}, t_pred={t_pred}"),
                ))
            }
        }
        let scalers = observation_scalers(&positions, t_obs);
        Ok(Self {
            t_obs,
            t_pred,
            positions,
            scalers,
            aircraft,
            start_step,
            source: source.into(),
        })
    }

    pub fn normalize(&self) -> NormalizedScene {
        let s = self.scalers;
        let steps = self.steps();
        let n = self.node_count();
        let positions = Tensor::from_fn(self.positions.shape(), |k| {
            let c = k / (steps * n);
            s.normalize(c, self.positions.data()[k])
        });
        NormalizedScene {
            t_obs: self.t_obs,
            t_pred: self.t_pred,
            positions,
            scalers: s,
        }
    }

    /// Sub-scene with the given node subset (in the given order), scalers refitted.
    pub fn select_nodes(&self, nodes: &[usize]) -> Result<Scene> {
        let steps = self.steps();
        let m = nodes.len();
        let positions = Tensor::from_fn(&[3, steps, m], |k| {
            let (c, t, j) = (k / (steps * m), (k / m) % steps, k % m);
            self.positions.at(&[c, t, nodes[j]])
        });
        Scene::from_positions(
            positions,
            self.t_obs,
            self.t_pred,
            nodes.iter().map(|&i| self.aircraft[i]).collect(),
            self.start_step,
            self.source.clone(),
        )
    }
}

/// Scene positions after per-coordinate z-scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedScene {
    pub t_obs: usize,
    pub t_pred: usize,
    /// Shape `[3, t_obs + t_pred, n]`.
    pub positions: Tensor,
    pub scalers: Scalers,
}

impl NormalizedScene {
    pub fn node_count(&self) -> usize {
        self.positions.shape()[2]
    }

    /// Inverse transform back to raw units.
    pub fn denormalize(&self) -> Tensor {
        let s = self.scalers;
        let (steps, n) = (self.t_obs + self.t_pred, self.node_count());
        Tensor::from_fn(self.positions.shape(), |k| {
            s.denormalize(k / (steps * n), self.positions.data()[k])
        })
    }
}

/// Mean and population standard deviation per coordinate over all nodes and
/// the first `t_obs` steps; scales are floored at [`Scalers::SCALE_FLOOR`].
pub fn observation_scalers(positions: &Tensor, t_obs: usize) -> Scalers {
    let n = positions.shape()[2];
    let count = (t_obs * n) as f64;
    let mut center = [0.0; 3];
    let mut scale = [0.0; 3];
    for c in 0..3 {
        let values = || (0..t_obs).flat_map(move |t| (0..n).map(move |i| (t, i)));
        let mean = values().map(|(t, i)| positions.at(&[c, t, i])).sum::<f64>() / count;
        let var = values()
            .map(|(t, i)| (positions.at(&[c, t, i]) - mean).powi(2))
            .sum::<f64>()
            / count;
        center[c] = mean;
        scale[c] = var.sqrt().max(Scalers::SCALE_FLOOR);
    }
    Scalers { center, scale }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    pub stride: usize,
    pub min_aircraft: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            t_obs: 4,
            t_pred: 6,
            stride: 1,
            min_aircraft: 2,
        }
    }
}

/// Slides a `t_obs + t_pred` window over the global step grid and keeps the
/// aircraft present at every step of each window.
pub fn cut_scenes(series: &[TrackSeries], config: SceneConfig, source: &str) -> Result<Vec<Scene>> {
    if config.t_obs == 0 || config.t_pred == 0 || config.stride == 0 {
        return Err(Error::Config(
            "t_obs, t_pred and stride must be at least 1".into(),
        ));
    }
    let mut ordered: Vec<&TrackSeries> = series.iter().filter(|s| !s.samples.is_empty()).collect();
    ordered.sort_by_key(|s| (s.aircraft_index, s.first_step()));
    let (Some(lo), Some(hi)) = (
        ordered.iter().map(|s| s.first_step()).min(),
        ordered.iter().map(|s| s.last_step()).max(),
    ) else {
        return Ok(Vec::new());
    };
    let len = (config.t_obs + config.t_pred) as i64;
    let mut scenes = Vec::new();
    let mut start = lo;
    while start + len - 1 <= hi {
        let end = start + len - 1;
        let mut roster: Vec<&TrackSeries> =
            ordered.iter().copied().filter(|s| s.covers(start, end)).collect();
        roster.dedup_by_key(|s| s.aircraft_index);
        if roster.len() >= config.min_aircraft.max(1) {
            let n = roster.len();
            let steps = len as usize;
            let positions = Tensor::from_fn(&[3, steps, n], |k| {
                let (c, t, i) = (k / (steps * n), (k / n) % steps, k % n);
                let sample = roster[i].at(start + t as i64).expect("roster covers window");
                sample.coords()[c]
            });
            scenes.push(Scene::from_positions(
                positions,
                config.t_obs,
                config.t_pred,
                roster.iter().map(|s| s.aircraft_index).collect(),
                start,
                source,
            )?);
        }
        start += config.stride as i64;
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ParsedTracks> {
        parse_track_reader(text.as_bytes(), Path::new("mem.csv"), &ParseOptions::default())
    }

    fn point(ts: i64, id: &str, lon: f64) -> TrackPoint {
        TrackPoint {
            timestamp: ts,
            aircraft_id: id.into(),
            lon,
            lat: 0.0,
            alt: 0.0,
        }
    }

    #[test]
    fn single_valid_row() {
        let p = parse("timestamp,aircraft_id,lon,lat,alt\n1700000000,ABC123,-71.01,42.36,300\n").unwrap();
        assert_eq!(
            p.points,
            vec![TrackPoint {
                timestamp: 1_700_000_000,
                aircraft_id: "ABC123".into(),
                lon: -71.01,
                lat: 42.36,
                alt: 300.0
            }]
        );
        assert!(p.errors.is_empty());
    }

    #[test]
    fn out_of_range_latitude_is_reported_and_skipped() {
        let p = parse(
            "timestamp,aircraft_id,lon,lat,alt\n10,A,1,95,0\n20,A,1,45,0\n",
        )
        .unwrap();
        assert_eq!(p.points.len(), 1);
        assert_eq!(p.errors.len(), 1);
        assert_eq!(p.errors[0].line, 2);
        assert!(p.errors[0].reason.contains("lat"));
    }

    #[test]
    fn header_only_is_empty_and_missing_column_is_rejected() {
        assert!(matches!(
            parse("timestamp,aircraft_id,lon,lat,alt\n"),
            Err(Error::EmptyFile(_))
        ));
        assert!(matches!(
            parse("timestamp,aircraft_id,lon,lat\n1,A,0,0\n"),
            Err(Error::HeaderMismatch { .. })
        ));
    }

    #[test]
    fn feet_are_converted() {
        let opts = ParseOptions {
            alt_in_feet: true,
            ..Default::default()
        };
        let p = parse_track_reader(
            "timestamp,aircraft_id,lon,lat,alt\n1,A,0,0,1000\n".as_bytes(),
            Path::new("x"),
            &opts,
        )
        .unwrap();
        assert!((p.points[0].alt - 304.8).abs() < 1e-12);
    }

    #[test]
    fn midpoint_interpolation() {
        let pts = vec![point(0, "A", 0.0), point(20, "A", 2.0)];
        let ids = IdEncoding::from_points(&pts);
        let s = resample_to_grid(&pts, &ids, ResampleConfig::default());
        assert_eq!(s.len(), 1);
        let lons: Vec<f64> = s[0].samples.iter().map(|g| g.lon).collect();
        let steps: Vec<i64> = s[0].samples.iter().map(|g| g.step).collect();
        assert_eq!(lons, vec![0.0, 1.0, 2.0]);
        assert_eq!(steps, vec![0, 1, 2]);
    }

    #[test]
    fn long_gap_splits_into_degenerate_segments() {
        let pts = vec![point(0, "A", 0.0), point(200, "A", 2.0)];
        let ids = IdEncoding::from_points(&pts);
        assert!(resample_to_grid(&pts, &ids, ResampleConfig::default()).is_empty());
    }

    fn full_series(index: u32, first: i64, last: i64) -> TrackSeries {
        TrackSeries {
            aircraft_index: index,
            samples: (first..=last)
                .map(|k| GridSample {
                    step: k,
                    lon: k as f64 + index as f64,
                    lat: 0.5 * k as f64,
                    alt: 1000.0 + index as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn single_full_window() {
        let series = vec![full_series(0, 0, 9), full_series(1, 0, 9)];
        let scenes = cut_scenes(&series, SceneConfig::default(), "t").unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].node_count(), 2);
        assert_eq!(scenes[0].aircraft, vec![0, 1]);
    }

    #[test]
    fn partially_present_aircraft_is_excluded() {
        let series = vec![full_series(0, 0, 9), full_series(1, 0, 9), full_series(2, 0, 5)];
        let scenes = cut_scenes(&series, SceneConfig::default(), "t").unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].aircraft, vec![0, 1]);
    }

    #[test]
    fn constant_point_normalizes_to_zero() {
        let positions = Tensor::from_fn(&[3, 10, 2], |k| [5.0, -3.0, 900.0][k / 20]);
        let scene = Scene::from_positions(positions, 4, 6, vec![0, 1], 0, "t").unwrap();
        assert_eq!(scene.scalers.scale, [Scalers::SCALE_FLOOR; 3]);
        assert!(scene.normalize().positions.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_scalers_are_identity() {
        let positions = Tensor::from_fn(&[3, 10, 1], |k| k as f64 * 0.37 - 2.0);
        let mut scene = Scene::from_positions(positions.clone(), 4, 6, vec![0], 0, "t").unwrap();
        scene.scalers = Scalers::identity();
        assert_eq!(scene.normalize().positions, positions);
    }
}
