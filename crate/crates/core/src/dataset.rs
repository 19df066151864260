//! In-memory cohort: patient records plus, per patient, the ordered slides
//! with their feature blocks and cached density profiles.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::cohort::{read_feature_block, read_patients, read_slides, FeatureBlock, PatientRecord, SynthOutput, PATIENTS_FILE, SLIDES_FILE};
use crate::error::{Error, Result};
use crate::sampler::{patch_probabilities_with, points_from, sample_patches, DensityProfile, KdeMode, SlideStrategy, DEFAULT_BANDWIDTH};
use crate::seed;

#[derive(Debug, Clone)]
pub struct Slide {
    pub slide_id: String,
    pub block: FeatureBlock,
    pub profile: DensityProfile,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub patients: Vec<PatientRecord>,
    slides: HashMap<String, Vec<Slide>>,
    dim: usize,
}

impl Dataset {
    /// Builds from `(patient_id, slide_index, slide_id, block)` tuples.
    pub fn from_parts(
        patients: Vec<PatientRecord>,
        slides: Vec<(String, u32, String, FeatureBlock)>,
        mode: KdeMode,
    ) -> Result<Self> {
        let dim = slides
            .first()
            .map(|s| s.3.dim())
            .ok_or_else(|| Error::input("dataset has no slides"))?;
        if let Some(s) = slides.iter().find(|s| s.3.dim() != dim) {
            return Err(Error::input(format!(
                "slide {} has width {} but the cohort uses {dim}",
                s.2,
                s.3.dim()
            )));
        }
        let profiled: Vec<(String, u32, Slide)> = slides
            .into_par_iter()
            .map(|(pid, idx, slide_id, block)| {
                let profile = patch_probabilities_with(&points_from(block.coords()), DEFAULT_BANDWIDTH, mode)?;
                Ok((pid, idx, Slide { slide_id, block, profile }))
            })
            .collect::<Result<_>>()?;
        let mut grouped: HashMap<String, Vec<(u32, Slide)>> = HashMap::new();
        for (pid, idx, s) in profiled {
            grouped.entry(pid).or_default().push((idx, s));
        }
        let slides = grouped
            .into_iter()
            .map(|(pid, mut v)| {
                v.sort_by_key(|(i, _)| *i);
                (pid, v.into_iter().map(|(_, s)| s).collect())
            })
            .collect();
        Ok(Dataset { patients, slides, dim })
    }

    pub fn from_synth(out: &SynthOutput, mode: KdeMode) -> Result<Self> {
        let slides = out
            .slides
            .iter()
            .zip(&out.blocks)
            .map(|(s, b)| (s.patient_id.clone(), s.slide_index, s.slide_id.clone(), b.clone()))
            .collect();
        Self::from_parts(out.patients.clone(), slides, mode)
    }

    /// Loads `patients.jsonl`, `slides.jsonl` and every referenced feature file.
    pub fn load(dir: impl AsRef<Path>, mode: KdeMode) -> Result<Self> {
        let dir = dir.as_ref();
        let patients = read_patients(dir.join(PATIENTS_FILE))?;
        let records = read_slides(dir.join(SLIDES_FILE))?;
        let slides = records
            .into_par_iter()
            .map(|r| {
                let path = dir.join(&r.feature_path);
                let block = read_feature_block(&path)?;
                Ok((r.patient_id, r.slide_index, r.slide_id, block))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(patients, slides, mode)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patient(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == id)
    }

    pub fn slides(&self, patient_id: &str) -> Result<&[Slide]> {
        self.slides
            .get(patient_id)
            .map(Vec::as_slice)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::input(format!("patient {patient_id} has no slides")))
    }

    /// Pooled instances for one patient: slides chosen by `strategy`, then
    /// per-slide density sampling at `ratio` with a slide-keyed seed.
    pub fn patient_instances(&self, patient_id: &str, strategy: SlideStrategy, ratio: f64, seed: u64) -> Result<Array2<f64>> {
        self.instances(patient_id, strategy, ratio, seed, None)
    }

    /// Same draw as [`Dataset::patient_instances`] but re-estimates each
    /// selected slide's density instead of using the cached profile, i.e. the
    /// full per-request cost of a fresh patient.
    pub fn patient_instances_uncached(
        &self,
        patient_id: &str,
        strategy: SlideStrategy,
        ratio: f64,
        seed: u64,
        mode: KdeMode,
    ) -> Result<Array2<f64>> {
        self.instances(patient_id, strategy, ratio, seed, Some(mode))
    }

    fn instances(&self, patient_id: &str, strategy: SlideStrategy, ratio: f64, seed: u64, recompute: Option<KdeMode>) -> Result<Array2<f64>> {
        let slides = self.slides(patient_id)?;
        let chosen = strategy.select(slides.len(), seed::derive_str(seed, patient_id))?;
        let mut parts = Vec::with_capacity(chosen.len());
        for i in chosen {
            let s = &slides[i];
            let fresh;
            let profile = match recompute {
                Some(mode) => {
                    fresh = patch_probabilities_with(&points_from(s.block.coords()), DEFAULT_BANDWIDTH, mode)?;
                    &fresh
                }
                None => &s.profile,
            };
            let idx = sample_patches(profile, ratio, seed::derive_str(seed, &s.slide_id))?;
            parts.push(s.block.features().select(Axis(0), &idx).mapv(f64::from));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::input(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{synth_cohort, SynthConfig};

    #[test]
    fn cached_and_fresh_profiles_draw_the_same_bag() {
        let cfg = SynthConfig {
            patients: 4,
            slides_per_patient: 3,
            patches_per_slide: 30,
            dim: 5,
            ..SynthConfig::default()
        };
        let data = Dataset::from_synth(&synth_cohort(&cfg, 8).unwrap(), KdeMode::Exact).unwrap();
        for p in &data.patients {
            let a = data.patient_instances(&p.patient_id, SlideStrategy::Uniform(2), 0.2, 5).unwrap();
            let b = data
                .patient_instances_uncached(&p.patient_id, SlideStrategy::Uniform(2), 0.2, 5, KdeMode::Exact)
                .unwrap();
            assert_eq!(a, b);
            assert_eq!(a.nrows(), 2 * 6);
        }
        assert!(data.slides("nobody").is_err());
    }
}
