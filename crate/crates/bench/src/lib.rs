//! Fixtures shared by the benchmarks.

use dastgcn_core::ingest::SceneConfig;
use dastgcn_core::synth::{generate_scenes, ScenarioKind, SyntheticSpec};
use dastgcn_core::Scene;

/// One noise-free synthetic scene with `aircraft` nodes.
pub fn scene(aircraft: usize) -> Scene {
    let spec = SyntheticSpec {
        kind: ScenarioKind::Crossing,
        aircraft,
        noise: 0.0,
        duration_steps: 10,
        seed: 1,
        instances: 1,
    };
    generate_scenes(&spec, &SceneConfig::default())
        .expect("valid synthetic spec")
        .remove(0)
}
