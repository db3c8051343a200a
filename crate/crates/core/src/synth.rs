//! Synthetic multi-aircraft scenarios.
//!
//! Aircraft fly constant-speed legs on a local tangent plane and change
//! heading and altitude at bounded rates. Positions are sampled every grid
//! step, converted to degrees around a reference point, and optionally
//! perturbed with Gaussian noise whose standard deviation is `noise` times the
//! per-coordinate spread of the clean scenario.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{cut_scenes, GridSample, Scene, SceneConfig, TrackPoint, TrackSeries};

const METERS_PER_DEG_LAT: f64 = 111_320.0;
const STEP_SECONDS: f64 = 10.0;
/// Largest heading change per grid step (3 deg/s).
const MAX_TURN: f64 = 30.0 * PI / 180.0;
/// Largest climb or descent per grid step (15 m/s).
const MAX_CLIMB: f64 = 150.0;
const REF_LON: f64 = -71.0;
const REF_LAT: f64 = 42.36;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Crossing,
    Merge,
    ApproachFunnel,
    ClimbConflict,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Crossing,
        ScenarioKind::Merge,
        ScenarioKind::ApproachFunnel,
        ScenarioKind::ClimbConflict,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Crossing => "crossing",
            ScenarioKind::Merge => "merge",
            ScenarioKind::ApproachFunnel => "approach_funnel",
            ScenarioKind::ClimbConflict => "climb_conflict",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: ScenarioKind,
    pub aircraft: usize,
    /// Observation noise std as a fraction of each coordinate's spread.
    pub noise: f64,
    pub duration_steps: usize,
    pub seed: u64,
    /// Independent scenario instances to generate.
    pub instances: usize,
}

impl SyntheticSpec {
    pub fn validate(&self, scenes: &SceneConfig) -> Result<()> {
        if self.aircraft < 2 {
            return Err(Error::Config("synthetic scenarios need at least 2 aircraft".into()));
        }
        if self.duration_steps < scenes.t_obs + scenes.t_pred {
            return Err(Error::Config(format!(
                "duration of {} steps is shorter than one scene ({} steps)",
                self.duration_steps,
                scenes.t_obs + scenes.t_pred
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Tracks of one scenario instance in grid steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioTracks {
    pub source: String,
    pub series: Vec<TrackSeries>,
}

impl ScenarioTracks {
    /// Reports at one per grid step, timestamps `step * 10` seconds.
    pub fn track_points(&self) -> Vec<TrackPoint> {
        let mut points: Vec<TrackPoint> = self
            .series
            .iter()
            .flat_map(|s| {
                s.samples.iter().map(move |g| TrackPoint {
                    timestamp: g.step * STEP_SECONDS as i64,
                    aircraft_id: format!("{}-{:02}", self.source, s.aircraft_index),
                    lon: g.lon,
                    lat: g.lat,
                    alt: g.alt,
                })
            })
            .collect();
        points.sort_by(|a, b| a.aircraft_id.cmp(&b.aircraft_id).then(a.timestamp.cmp(&b.timestamp)));
        points
    }
}

#[derive(Clone, Copy, Debug)]
struct State {
    x: f64,
    y: f64,
    alt: f64,
    heading: f64,
    speed: f64,
}

impl State {
    fn advance(&mut self) {
        self.x += self.speed * STEP_SECONDS * self.heading.sin();
        self.y += self.speed * STEP_SECONDS * self.heading.cos();
    }

    fn steer_towards(&mut self, x: f64, y: f64) {
        let wanted = (x - self.x).atan2(y - self.y);
        self.turn_to(wanted);
    }

    fn turn_to(&mut self, wanted: f64) {
        let delta = wrap_angle(wanted - self.heading);
        self.heading = wrap_angle(self.heading + delta.clamp(-MAX_TURN, MAX_TURN));
    }

    fn climb_to(&mut self, target: f64) {
        self.alt += (target - self.alt).clamp(-MAX_CLIMB, MAX_CLIMB);
    }
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

type Path = Vec<[f64; 3]>;

fn straight(p: (f64, f64), heading: f64, speed: f64, alt: f64, at: usize, steps: usize) -> Path {
    (0..steps)
        .map(|k| {
            let d = speed * STEP_SECONDS * (k as f64 - at as f64);
            [p.0 + d * heading.sin(), p.1 + d * heading.cos(), alt]
        })
        .collect()
}

fn fly(mut s: State, steps: usize, mut control: impl FnMut(usize, &mut State)) -> Path {
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        out.push([s.x, s.y, s.alt]);
        control(k, &mut s);
        s.advance();
    }
    out
}

fn cruiser(rng: &mut ChaCha8Rng, at: usize, steps: usize) -> Path {
    let r = rng.random_range(5_000.0..30_000.0);
    let bearing = rng.random_range(-PI..PI);
    let heading = rng.random_range(-PI..PI);
    let alt = 300.0 * rng.random_range(20..40) as f64;
    straight((r * bearing.sin(), r * bearing.cos()), heading, rng.random_range(180.0..240.0), alt, at, steps)
}

/// The step at which the scripted interaction happens: the middle of the
/// prediction segment of the last window.
fn event_step(steps: usize, scenes: &SceneConfig) -> usize {
    steps - 1 - scenes.t_pred / 2
}

fn crossing(rng: &mut ChaCha8Rng, n: usize, steps: usize, scenes: &SceneConfig) -> Vec<Path> {
    let c = event_step(steps, scenes);
    let p = (rng.random_range(-3_000.0..3_000.0), rng.random_range(-3_000.0..3_000.0));
    let h0 = rng.random_range(-PI..PI);
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let h1 = wrap_angle(h0 + side * rng.random_range(PI / 3.0..2.0 * PI / 3.0));
    let level = 300.0 * rng.random_range(25..35) as f64;
    let mut paths = vec![
        straight(p, h0, rng.random_range(190.0..230.0), level, c, steps),
        straight(p, h1, rng.random_range(190.0..230.0), level + 300.0, c, steps),
    ];
    paths.extend((2..n).map(|_| cruiser(rng, c, steps)));
    paths
}

fn merge(rng: &mut ChaCha8Rng, n: usize, steps: usize) -> Vec<Path> {
    let outbound = rng.random_range(-PI..PI);
    let spread = PI / 2.0;
    (0..n)
        .map(|i| {
            let bearing = wrap_angle(outbound + PI + spread * (i as f64 / (n - 1).max(1) as f64 - 0.5));
            let r = 15_000.0 + 6_000.0 * i as f64;
            let start = State {
                x: r * bearing.sin(),
                y: r * bearing.cos(),
                alt: 300.0 * rng.random_range(15..25) as f64,
                heading: wrap_angle(bearing + PI),
                speed: rng.random_range(150.0..170.0),
            };
            let mut passed = false;
            fly(start, steps, |_, s| {
                passed |= s.x.hypot(s.y) < s.speed * STEP_SECONDS;
                if passed {
                    s.turn_to(outbound);
                } else {
                    s.steer_towards(0.0, 0.0);
                }
                s.climb_to(3_000.0);
            })
        })
        .collect()
}

fn approach_funnel(rng: &mut ChaCha8Rng, n: usize, steps: usize) -> Vec<Path> {
    let course = rng.random_range(-PI..PI);
    let fix = (-10_000.0 * course.sin(), -10_000.0 * course.cos());
    let glide = (3.0f64).to_radians().tan();
    (0..n)
        .map(|_| {
            let bearing = wrap_angle(course + PI + rng.random_range(-PI / 3.0..PI / 3.0));
            let r = rng.random_range(25_000.0..50_000.0);
            let start = State {
                x: r * bearing.sin(),
                y: r * bearing.cos(),
                alt: rng.random_range(3_000.0..6_000.0),
                heading: wrap_angle(bearing + PI),
                speed: rng.random_range(110.0..150.0),
            };
            let mut on_final = false;
            fly(start, steps, |_, s| {
                on_final |= (s.x - fix.0).hypot(s.y - fix.1) < 2.0 * s.speed * STEP_SECONDS;
                if on_final {
                    s.turn_to(course);
                } else {
                    s.steer_towards(fix.0, fix.1);
                }
                let profile = s.x.hypot(s.y) * glide;
                // never climb: descend towards the glide profile at a bounded rate
                s.alt -= (s.alt - profile).clamp(0.0, MAX_CLIMB / 2.0);
            })
        })
        .collect()
}

fn climb_conflict(rng: &mut ChaCha8Rng, n: usize, steps: usize, scenes: &SceneConfig) -> Vec<Path> {
    let c = event_step(steps, scenes);
    let heading = rng.random_range(-PI..PI);
    let level = 300.0 * rng.random_range(25..35) as f64;
    let offset = 2_000.0;
    let speed = rng.random_range(200.0..230.0);
    let lateral = (offset * heading.cos(), -offset * heading.sin());
    let cruise = straight((0.0, 0.0), heading, speed, level, c, steps);
    let rate = rng.random_range(60.0..100.0);
    let climber: Path = straight(lateral, wrap_angle(heading + PI), speed, 0.0, c, steps)
        .into_iter()
        .enumerate()
        .map(|(k, [x, y, _])| [x, y, level + rate * (k as f64 - c as f64)])
        .collect();
    let mut paths = vec![cruise, climber];
    paths.extend((2..n).map(|_| cruiser(rng, c, steps)));
    paths
}

fn to_series(paths: &[Path]) -> Vec<TrackSeries> {
    let lon_scale = METERS_PER_DEG_LAT * REF_LAT.to_radians().cos();
    paths
        .iter()
        .enumerate()
        .map(|(i, path)| TrackSeries {
            aircraft_index: i as u32,
            samples: path
                .iter()
                .enumerate()
                .map(|(k, &[x, y, alt])| GridSample {
                    step: k as i64,
                    lon: REF_LON + x / lon_scale,
                    lat: REF_LAT + y / METERS_PER_DEG_LAT,
                    alt,
                })
                .collect(),
        })
        .collect()
}

fn add_noise(series: &mut [TrackSeries], level: f64, rng: &mut ChaCha8Rng) {
    if level == 0.0 {
        return;
    }
    let samples = || series.iter().flat_map(|s| s.samples.iter());
    let count = samples().count() as f64;
    let spread: [f64; 3] = std::array::from_fn(|c| {
        let mean = samples().map(|g| g.coords()[c]).sum::<f64>() / count;
        let var = samples().map(|g| (g.coords()[c] - mean).powi(2)).sum::<f64>() / count;
        var.sqrt().max(1e-6)
    });
    let noise: [Normal<f64>; 3] =
        std::array::from_fn(|c| Normal::new(0.0, level * spread[c]).expect("finite std"));
    for g in series.iter_mut().flat_map(|s| s.samples.iter_mut()) {
        g.lon += noise[0].sample(rng);
        g.lat += noise[1].sample(rng);
        g.alt += noise[2].sample(rng);
    }
}

pub fn generate_tracks(spec: &SyntheticSpec, scenes: &SceneConfig) -> Result<Vec<ScenarioTracks>> {
    spec.validate(scenes)?;
    let (n, steps) = (spec.aircraft, spec.duration_steps);
    Ok((0..spec.instances)
        .map(|instance| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(instance as u64);
            let paths = match spec.kind {
                ScenarioKind::Crossing => crossing(&mut rng, n, steps, scenes),
                ScenarioKind::Merge => merge(&mut rng, n, steps),
                ScenarioKind::ApproachFunnel => approach_funnel(&mut rng, n, steps),
                ScenarioKind::ClimbConflict => climb_conflict(&mut rng, n, steps, scenes),
            };
            let mut series = to_series(&paths);
            add_noise(&mut series, spec.noise, &mut rng);
            ScenarioTracks {
                source: format!("synth-{}-{instance:04}", spec.kind.name()),
                series,
            }
        })
        .collect())
}

/// Generates the tracks and cuts them into scenes.
pub fn generate_scenes(spec: &SyntheticSpec, scenes: &SceneConfig) -> Result<Vec<Scene>> {
    let mut out = Vec::new();
    for tracks in generate_tracks(spec, scenes)? {
        out.extend(cut_scenes(&tracks.series, *scenes, &tracks.source)?);
    }
    Ok(out)
}
