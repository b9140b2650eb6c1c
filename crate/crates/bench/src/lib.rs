//! Fixtures shared by the benchmarks.

use slipfit::{Demonstration, GroundTruth, ModelId, NoisePreset, ScenarioSpec};

/// A paper-like-noise demonstration of `id`, fixed by `seed`.
pub fn fixture(id: ModelId, seed: u64) -> (Demonstration, GroundTruth) {
    slipfit::synth::generate(&ScenarioSpec::new(id, seed).with_preset(NoisePreset::PaperLike))
        .expect("default scenario is valid")
}
