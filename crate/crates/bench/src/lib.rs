//! Input generators shared by the benchmarks.

use msbcr_core::cohort::{synth_cohort, SynthConfig};
use msbcr_core::sampler::points_from;
use msbcr_core::survstats::ScoredCohort;
use msbcr_core::{MilConfig, MilParams};
use ndarray::Array2;

/// Patch coordinates of one synthetic slide with `n` patches.
pub fn slide_coords(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let cfg = SynthConfig {
        patients: 1,
        slides_per_patient: 1,
        patches_per_slide: n,
        dim: 4,
        ..SynthConfig::default()
    };
    let out = synth_cohort(&cfg, seed).expect("synthetic slide");
    points_from(out.blocks[0].coords())
}

/// A random bag and a freshly initialised model of matching width.
pub fn bag_and_model(m: usize, cfg: MilConfig, seed: u64) -> (Array2<f64>, MilParams<f64>) {
    let params = MilParams::init(cfg, seed);
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let x = Array2::from_shape_fn((m, cfg.dim), |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    });
    (x, params)
}

/// Two noisy score sets over the same `n` patients.
pub fn paired_scores(n: usize) -> (ScoredCohort, ScoredCohort) {
    let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
    let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let a: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 + f64::from(u8::from(labels[i])) * 0.3).collect();
    let b: Vec<f64> = (0..n).map(|i| ((i * 104_729) % 997) as f64 / 997.0 + f64::from(u8::from(labels[i])) * 0.2).collect();
    (
        ScoredCohort::new(ids.clone(), a, labels.clone()).unwrap(),
        ScoredCohort::new(ids, b, labels).unwrap(),
    )
}
