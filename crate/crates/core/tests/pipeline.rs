mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::rng;
use dastgcn_core::ingest::{
    cut_scenes, parse_track_reader, resample_to_grid, GridSample, IdEncoding, ParseOptions, ResampleConfig,
    SceneConfig, TrackPoint, TrackSeries,
};
use dastgcn_core::synth::{generate_scenes, generate_tracks, ScenarioKind, SyntheticSpec};
use dastgcn_core::traineval::{
    ade, evaluate, evaluate_predictions, fde, train, Dims, EvalConfig, MetricUnits, Protocol, ScenePrediction,
    TrainConfig,
};
use dastgcn_core::{Scene, Tensor, TrajectoryModel};
use proptest::prelude::*;
use rand::Rng;

fn csv_of(rows: &[(i64, String, f64, f64, f64)]) -> String {
    let mut s = String::from("timestamp,aircraft_id,lon,lat,alt\n");
    for (t, id, lon, lat, alt) in rows {
        s.push_str(&format!("{t},{id},{lon},{lat},{alt}\n"));
    }
    s
}

fn report_rows() -> impl Strategy<Value = Vec<(i64, String, f64, f64, f64)>> {
    prop::collection::vec(
        (0i64..40, prop::sample::select(vec!["A1", "B2", "C3"]), -10.0f64..10.0, -10.0f64..10.0, 0.0f64..9000.0)
            .prop_map(|(t, id, lon, lat, alt)| (t * 5, id.to_owned(), lon, lat, alt)),
        1..60,
    )
}

proptest! {
    #[test]
    fn duplicates_keep_the_first_report(rows in report_rows()) {
        let parsed = parse_track_reader(csv_of(&rows).as_bytes(), Path::new("p.csv"), &ParseOptions::default()).unwrap();
        let mut first: BTreeMap<(String, i64), (f64, f64, f64)> = BTreeMap::new();
        for (t, id, lon, lat, alt) in &rows {
            first.entry((id.clone(), *t)).or_insert((*lon, *lat, *alt));
        }
        prop_assert_eq!(parsed.rows_read, rows.len());
        prop_assert_eq!(parsed.duplicates_dropped, rows.len() - first.len());
        let got: Vec<_> = parsed.points.iter().map(|p| ((p.aircraft_id.clone(), p.timestamp), (p.lon, p.lat, p.alt))).collect();
        let want: Vec<_> = first.into_iter().collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn resampling_matches_brute_force_interpolation(
        gaps in prop::collection::vec(1i64..25, 2..12),
        offset in 0i64..30,
        values in prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 12),
    ) {
        let mut t = offset;
        let points: Vec<TrackPoint> = gaps.iter().zip(&values).map(|(g, v)| {
            let p = TrackPoint { timestamp: t, aircraft_id: "X".into(), lon: v[0], lat: v[1], alt: v[2] };
            t += g;
            p
        }).collect();
        let config = ResampleConfig { step: 10, gap_limit: 1000 };
        let series = resample_to_grid(&points, &IdEncoding::from_points(&points), config);
        let (first, last) = (points[0].timestamp, points[points.len() - 1].timestamp);
        let expected: Vec<(i64, [f64; 3])> = (0..=last / 10)
            .map(|k| k * 10)
            .filter(|&g| g >= first)
            .map(|g| {
                let j = points.iter().rposition(|p| p.timestamp <= g).unwrap();
                let a = &points[j];
                let coords = if a.timestamp == g || j + 1 == points.len() {
                    [a.lon, a.lat, a.alt]
                } else {
                    let b = &points[j + 1];
                    let w = (g - a.timestamp) as f64 / (b.timestamp - a.timestamp) as f64;
                    [a.lon + w * (b.lon - a.lon), a.lat + w * (b.lat - a.lat), a.alt + w * (b.alt - a.alt)]
                };
                (g / 10, coords)
            })
            .collect();
        if expected.len() < 2 {
            prop_assert!(series.is_empty());
        } else {
            prop_assert_eq!(series.len(), 1);
            let got: Vec<(i64, [f64; 3])> = series[0].samples.iter().map(|s| (s.step, s.coords())).collect();
            prop_assert_eq!(got.len(), expected.len());
            for ((gs, gc), (es, ec)) in got.iter().zip(&expected) {
                prop_assert_eq!(gs, es);
                for c in 0..3 {
                    prop_assert!((gc[c] - ec[c]).abs() <= 1e-12 * ec[c].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn windows_are_every_fully_covered_interval(
        spans in prop::collection::vec((0i64..20, 2usize..25), 1..5),
        stride in 1usize..4,
    ) {
        let series: Vec<TrackSeries> = spans.iter().enumerate().map(|(i, &(start, len))| TrackSeries {
            aircraft_index: i as u32,
            samples: (0..len as i64).map(|k| GridSample { step: start + k, lon: i as f64, lat: k as f64, alt: 100.0 }).collect(),
        }).collect();
        let config = SceneConfig { t_obs: 3, t_pred: 4, stride, min_aircraft: 2 };
        let scenes = cut_scenes(&series, config, "w").unwrap();
        let lo = spans.iter().map(|s| s.0).min().unwrap();
        let hi = spans.iter().map(|s| s.0 + s.1 as i64 - 1).max().unwrap();
        let mut expected = Vec::new();
        let mut s = lo;
        while s + 6 <= hi {
            let roster: Vec<u32> = spans.iter().enumerate()
                .filter(|(_, &(a, len))| a <= s && a + len as i64 - 1 >= s + 6)
                .map(|(i, _)| i as u32)
                .collect();
            if roster.len() >= 2 {
                expected.push((s, roster));
            }
            s += stride as i64;
        }
        let got: Vec<(i64, Vec<u32>)> = scenes.iter().map(|sc| (sc.start_step, sc.aircraft.clone())).collect();
        prop_assert_eq!(got, expected);
        for sc in &scenes {
            for (i, &a) in sc.aircraft.iter().enumerate() {
                prop_assert_eq!(sc.position(0, i)[1], (sc.start_step - spans[a as usize].0) as f64);
            }
        }
    }

    #[test]
    fn normalization_round_trips(values in prop::collection::vec(-1e4f64..1e4, 3 * 10 * 3)) {
        let scene = Scene::from_positions(Tensor::new(&[3, 10, 3], values).unwrap(), 4, 6, vec![0, 1, 2], 0, "n").unwrap();
        let norm = scene.normalize();
        let back = norm.denormalize();
        for (a, b) in back.data().iter().zip(scene.positions.data()) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
        for c in 0..3 {
            let obs: Vec<f64> = (0..4).flat_map(|t| (0..3).map(move |i| (t, i))).map(|(t, i)| norm.positions.at(&[c, t, i])).collect();
            let mean = obs.iter().sum::<f64>() / 12.0;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn metrics_match_loops_and_ignore_node_order(
        p in prop::collection::vec(-5.0f64..5.0, 4 * 3 * 3),
        q in prop::collection::vec(-5.0f64..5.0, 4 * 3 * 3),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let pred = Tensor::new(&[4, 3, 3], p).unwrap();
        let truth = Tensor::new(&[4, 3, 3], q).unwrap();
        let (mut ah, mut av) = (0.0, 0.0);
        for t in 0..4 {
            for i in 0..3 {
                let d: Vec<f64> = (0..3).map(|c| pred.at(&[t, i, c]) - truth.at(&[t, i, c])).collect();
                ah += (d[0] * d[0] + d[1] * d[1]).sqrt();
                av += d[2].abs();
            }
        }
        prop_assert!((ade(&pred, &truth, Dims::Horizontal).unwrap() - ah / 12.0).abs() < 1e-12);
        prop_assert!((ade(&pred, &truth, Dims::Vertical).unwrap() - av / 12.0).abs() < 1e-12);
        let fh: f64 = (0..3).map(|i| (pred.at(&[3, i, 0]) - truth.at(&[3, i, 0])).hypot(pred.at(&[3, i, 1]) - truth.at(&[3, i, 1]))).sum();
        prop_assert!((fde(&pred, &truth, Dims::Horizontal).unwrap() - fh / 3.0).abs() < 1e-12);

        let shuffle = |x: &Tensor| Tensor::from_fn(&[4, 3, 3], |k| x.at(&[k / 9, perm[(k / 3) % 3], k % 3]));
        for dims in [Dims::Horizontal, Dims::Vertical] {
            let a = ade(&pred, &truth, dims).unwrap();
            let b = ade(&shuffle(&pred), &shuffle(&truth), dims).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert_eq!(ade(&truth, &truth, dims).unwrap(), 0.0);
            prop_assert!(a > 0.0);
        }
    }
}

#[test]
fn pooled_report_matches_manual_recomputation() {
    let mut r = rng(31);
    let mut preds = Vec::new();
    for n in [1usize, 2, 4] {
        let truth = Tensor::from_fn(&[6, n, 3], |_| r.random_range(-1.0..1.0));
        let cands = (0..3).map(|_| Tensor::from_fn(&[6, n, 3], |_| r.random_range(-1.0..1.0))).collect();
        preds.push(ScenePrediction { candidates: cands, truth });
    }
    let report = evaluate_predictions(&preds, Protocol::BestOfK(3), MetricUnits::Normalized).unwrap();
    let best = |p: &ScenePrediction, f: &dyn Fn(&Tensor, &Tensor) -> f64| {
        p.candidates.iter().map(|c| f(c, &p.truth)).fold(f64::INFINITY, f64::min)
    };
    let ade_h = preds.iter().map(|p| best(p, &|c, t| ade(c, t, Dims::Horizontal).unwrap()) * 6.0 * p.truth.shape()[1] as f64).sum::<f64>() / 42.0;
    let fde_v = preds.iter().map(|p| best(p, &|c, t| fde(c, t, Dims::Vertical).unwrap()) * p.truth.shape()[1] as f64).sum::<f64>() / 7.0;
    assert!((report.ade_horizontal - ade_h).abs() < 1e-12);
    assert!((report.fde_vertical - fde_v).abs() < 1e-12);
    assert_eq!((report.scenes, report.nodes), (3, 7));
}

fn corpus(instances: usize, seed: u64) -> Vec<Scene> {
    ScenarioKind::ALL
        .into_iter()
        .flat_map(|kind| {
            let spec = SyntheticSpec { kind, aircraft: 3, noise: 0.02, duration_steps: 12, seed, instances };
            generate_scenes(&spec, &SceneConfig::default()).unwrap()
        })
        .collect()
}

#[test]
fn mean_protocol_report_recomputes_from_predictions() {
    let scenes = corpus(2, 7);
    let model = TrajectoryModel::new(Default::default(), 3).unwrap();
    let report = evaluate(&model, &scenes, EvalConfig { units: MetricUnits::Raw, ..Default::default() }).unwrap();
    let (mut sum, mut count) = (0.0, 0usize);
    for scene in &scenes {
        let f = model.predict(&model.prepare(scene).unwrap()).unwrap();
        let n = scene.node_count();
        for t in 0..scene.t_pred {
            for i in 0..n {
                let p = f.mean(t, i);
                let x = scene.position(scene.t_obs + t, i);
                let s = &scene.scalers;
                sum += (s.denormalize(0, p[0]) - x[0]).hypot(s.denormalize(1, p[1]) - x[1]);
                count += 1;
            }
        }
    }
    assert!((report.ade_horizontal - sum / count as f64).abs() < 1e-12 * report.ade_horizontal.max(1.0));
    assert_eq!(report.nodes, scenes.iter().map(Scene::node_count).sum::<usize>());
}

#[test]
fn best_of_k_does_not_exceed_mean_on_a_trained_model() {
    let scenes = corpus(10, 5);
    assert!(scenes.len() >= 100);
    let config = TrainConfig { batch_size: 16, epochs: 20, lr: 0.01, lr_after: 0.002, lr_switch_epoch: 10, ..Default::default() };
    let mut model = TrajectoryModel::new(config.model.clone(), 0).unwrap();
    train(&mut model, &scenes, &[], &config, |_| {}).unwrap();
    for units in [MetricUnits::Raw, MetricUnits::Normalized] {
        let mean = evaluate(&model, &scenes, EvalConfig { units, protocol: Protocol::Mean, seed: 1 }).unwrap();
        let best = evaluate(&model, &scenes, EvalConfig { units, protocol: Protocol::BestOfK(20), seed: 1 }).unwrap();
        assert!(best.ade_horizontal <= mean.ade_horizontal);
        assert!(best.ade_vertical <= mean.ade_vertical);
        assert!(best.fde_horizontal <= mean.fde_horizontal);
        assert!(best.fde_vertical <= mean.fde_vertical);
        assert!(best.fde_horizontal < mean.fde_horizontal, "sampling never helps: {best} vs {mean}");
    }
}

#[test]
fn crossing_conflict_falls_inside_the_prediction_segment() {
    for seed in 0..20 {
        let spec = SyntheticSpec { kind: ScenarioKind::Crossing, aircraft: 2, noise: 0.0, duration_steps: 10, seed, instances: 1 };
        let scenes = generate_scenes(&spec, &SceneConfig::default()).unwrap();
        assert_eq!(scenes.len(), 1);
        let s = &scenes[0];
        let dist = |t: usize| {
            let (a, b) = (s.position(t, 0), s.position(t, 1));
            (a[0] - b[0]).hypot(a[1] - b[1])
        };
        let closest = (0..s.steps()).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        assert!(closest > s.t_obs && closest < s.steps() - 1, "seed {seed}: closest at {closest}");
    }
}

#[test]
fn funnel_altitudes_never_increase() {
    let spec = SyntheticSpec { kind: ScenarioKind::ApproachFunnel, aircraft: 6, noise: 0.0, duration_steps: 40, seed: 9, instances: 3 };
    for tracks in generate_tracks(&spec, &SceneConfig::default()).unwrap() {
        assert_eq!(tracks.series.len(), 6);
        for s in &tracks.series {
            for w in s.samples.windows(2) {
                assert!(w[1].alt <= w[0].alt, "{} climbs at step {}", tracks.source, w[1].step);
            }
        }
    }
}
