//! Synthetic multi-section cohort.
//!
//! Stands in for the private clinical data. Recurrence-positive patients carry
//! a tumor focus spanning a contiguous run of sections; inside those sections
//! a spatially clustered fraction of patches is shifted along a fixed unit
//! direction by `signal * hot_shift` noise standard deviations. Covariates are
//! drawn per outcome group from the development-cohort statistics below.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution, Gamma, LogNormal, Normal, StandardNormal};
use rayon::prelude::*;

use super::container::{write_feature_block, FeatureBlock};
use super::manifest::{write_patients, write_slides, PATIENTS_FILE, SLIDES_FILE};
use super::{PatientRecord, SlideRecord, TStage};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Patch side length in level-0 pixels.
pub const PATCH_SIZE: f64 = 512.0;

/// Per-group covariate distribution. Continuous covariates use (mean, sd);
/// categorical ones list `(level, weight)`, `None` meaning "unknown".
#[derive(Debug, Clone)]
pub struct CovariateProfile {
    pub age: (f64, f64),
    /// Log-normal moment-matched to this (mean, sd).
    pub psa: (f64, f64),
    /// Beta on [0, 100] moment-matched to this (mean, sd).
    pub tumor_pct: (f64, f64),
    pub t_stage: &'static [(Option<TStage>, f64)],
    pub gleason: &'static [(Option<u8>, f64)],
    pub margin: &'static [(Option<u8>, f64)],
    pub lymphatic: &'static [(Option<u8>, f64)],
    pub pos_ln: &'static [(Option<u32>, f64)],
}

impl CovariateProfile {
    /// Development cohort, patients with recurrence (n = 220).
    /// T1c is folded into T2a; LN-metastasis and unknown stage become missing.
    pub const BCR: CovariateProfile = CovariateProfile {
        age: (66.42, 5.76),
        psa: (16.36, 16.06),
        tumor_pct: (33.69, 24.54),
        t_stage: &[
            (Some(TStage::T2a), 17.0),
            (Some(TStage::T2b), 1.0),
            (Some(TStage::T2c), 66.0),
            (Some(TStage::T3a), 58.0),
            (Some(TStage::T3b), 74.0),
            (Some(TStage::T4), 3.0),
            (None, 4.0),
        ],
        gleason: &[(Some(6), 4.0), (Some(7), 154.0), (Some(8), 22.0), (Some(9), 36.0), (None, 4.0)],
        margin: &[(Some(0), 86.0), (Some(1), 133.0), (None, 1.0)],
        lymphatic: &[(Some(1), 51.0), (Some(0), 166.0), (None, 3.0)],
        pos_ln: &[(Some(0), 199.0), (Some(1), 9.0), (Some(2), 2.0), (Some(5), 1.0), (None, 9.0)],
    };

    /// Development cohort, patients without recurrence (n = 342).
    pub const NON_BCR: CovariateProfile = CovariateProfile {
        age: (66.43, 6.23),
        psa: (8.72, 6.86),
        tumor_pct: (16.65, 15.61),
        t_stage: &[
            (Some(TStage::T2a), 49.0),
            (Some(TStage::T2b), 2.0),
            (Some(TStage::T2c), 195.0),
            (Some(TStage::T3a), 68.0),
            (Some(TStage::T3b), 23.0),
            (Some(TStage::T4), 1.0),
            (None, 5.0),
        ],
        gleason: &[(Some(6), 73.0), (Some(7), 246.0), (Some(8), 12.0), (Some(9), 8.0), (None, 3.0)],
        margin: &[(Some(0), 259.0), (Some(1), 81.0), (None, 2.0)],
        lymphatic: &[(Some(1), 22.0), (Some(0), 315.0), (None, 5.0)],
        pos_ln: &[(Some(0), 316.0), (Some(1), 3.0), (Some(2), 1.0), (None, 22.0)],
    };
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub patients: usize,
    pub slides_per_patient: usize,
    pub patches_per_slide: usize,
    pub dim: usize,
    /// Signal strength in [0, 1]; 0 makes both classes identically distributed.
    pub signal: f64,
    /// Shift applied to hot patches at `signal = 1`, in noise standard deviations.
    pub hot_shift: f64,
    /// Fraction of patches that are hot inside a tumor-bearing section.
    pub hot_fraction: f64,
    /// Fraction of a positive patient's sections that carry the tumor focus.
    pub tumor_slide_fraction: f64,
    pub prevalence: f64,
    /// Recurrence-positive patients recur within this many months.
    pub horizon: f64,
    /// Fraction of horizon-negative patients that recur later.
    pub late_event_fraction: f64,
    /// Fraction of horizon-negative patients censored before the horizon.
    pub short_followup_fraction: f64,
    pub max_followup: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            patients: 200,
            slides_per_patient: 8,
            patches_per_slide: 200,
            dim: 1024,
            signal: 1.0,
            hot_shift: 2.0,
            hot_fraction: 0.6,
            tumor_slide_fraction: 0.75,
            // 299 of 789 patients recurred within two years
            prevalence: 299.0 / 789.0,
            horizon: 24.0,
            late_event_fraction: 0.1,
            short_followup_fraction: 0.0,
            max_followup: 120.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::input(format!("dim must be at least 2, got {}", self.dim)));
        }
        if self.patches_per_slide == 0 || self.slides_per_patient == 0 || self.patients == 0 {
            return Err(Error::input("patients, slides and patches must all be positive"));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.signal)
            || !unit(self.hot_fraction)
            || !unit(self.tumor_slide_fraction)
            || !unit(self.prevalence)
            || !unit(self.late_event_fraction)
            || !unit(self.short_followup_fraction)
        {
            return Err(Error::input("signal and fractions must lie in [0, 1]"));
        }
        if !(self.horizon > 0.0 && self.max_followup > self.horizon) {
            return Err(Error::input("need 0 < horizon < max_followup"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub patients: Vec<PatientRecord>,
    pub slides: Vec<SlideRecord>,
    /// Parallel to `slides`.
    pub blocks: Vec<FeatureBlock>,
    /// Unit direction along which hot patches are shifted.
    pub direction: Array1<f64>,
}

impl SynthOutput {
    /// Writes `patients.jsonl`, `slides.jsonl` and `features/<slide_id>.mswf` under `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.slides
            .par_iter()
            .zip(&self.blocks)
            .try_for_each(|(s, b)| write_feature_block(b, dir.join(&s.feature_path)))?;
        write_slides(dir.join(SLIDES_FILE), &self.slides)?;
        write_patients(dir.join(PATIENTS_FILE), &self.patients)
    }
}

fn pick<T: Copy>(rng: &mut Rng, table: &[(Option<T>, f64)]) -> Option<T> {
    let w = WeightedIndex::new(table.iter().map(|(_, w)| *w)).expect("static weights are valid");
    table[w.sample(rng)].0
}

fn draw_covariates(rec: &mut PatientRecord, prof: &CovariateProfile, rng: &mut Rng) {
    let age = Normal::new(prof.age.0, prof.age.1).unwrap().sample(rng);
    rec.age = Some((age * 10.0).round() / 10.0);

    let (m, s) = prof.psa;
    let var = (1.0 + (s * s) / (m * m)).ln();
    let psa = LogNormal::new(m.ln() - var / 2.0, var.sqrt()).unwrap().sample(rng);
    rec.psa = Some((psa * 100.0).round() / 100.0);

    let (m, s) = (prof.tumor_pct.0 / 100.0, prof.tumor_pct.1 / 100.0);
    let nu = m * (1.0 - m) / (s * s) - 1.0;
    let pct = Beta::new(m * nu, (1.0 - m) * nu).unwrap().sample(rng) * 100.0;
    rec.tumor_pct = Some(((pct * 10.0).round() / 10.0).clamp(0.0, 100.0));

    rec.t_stage = pick(rng, prof.t_stage);
    rec.gleason = pick(rng, prof.gleason);
    rec.margin = pick(rng, prof.margin);
    rec.lymphatic = pick(rng, prof.lymphatic);
    rec.pos_ln = pick(rng, prof.pos_ln);
}

/// Time to recurrence: gamma moment-matched to 6.98 ± 6.6 months, redrawn
/// until it falls within the horizon, rounded up to whole months.
fn draw_event_time(horizon: f64, rng: &mut Rng) -> f64 {
    let (mean, sd) = (6.98f64, 6.6f64);
    let gamma = Gamma::new((mean / sd).powi(2), sd * sd / mean).unwrap();
    loop {
        let t = gamma.sample(rng).ceil().max(1.0);
        if t <= horizon {
            return t;
        }
    }
}

fn slide_coords(n: usize, rng: &mut Rng) -> Array2<f32> {
    let sigma = 0.6 * (n as f64).sqrt();
    let origin = (rng.random_range(40..160) as f64, rng.random_range(40..160) as f64);
    let mut cells = std::collections::BTreeSet::new();
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        let cell = ((origin.0 + sigma * dx).round() as i64, (origin.1 + sigma * dy).round() as i64);
        if cell.0 >= 0 && cell.1 >= 0 && cells.insert(cell) {
            order.push(cell);
        }
    }
    Array2::from_shape_fn((n, 2), |(i, j)| {
        let c = if j == 0 { order[i].0 } else { order[i].1 };
        ((c as f64 + 0.5) * PATCH_SIZE) as f32
    })
}

/// Indices of the `count` patches closest to a focus patch. The focus is
/// drawn from the tenth of patches nearest the tissue centroid, so tumor
/// sits in the dense core of the section.
fn focus_cluster(coords: &Array2<f32>, count: usize, rng: &mut Rng) -> Vec<usize> {
    let n = coords.nrows();
    let by_distance = |fx: f64, fy: f64| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            let d = |i: usize| (coords[[i, 0]] as f64 - fx).powi(2) + (coords[[i, 1]] as f64 - fy).powi(2);
            d(a).total_cmp(&d(b)).then(a.cmp(&b))
        });
        idx
    };
    let cx = coords.column(0).iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let cy = coords.column(1).iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let core = by_distance(cx, cy);
    let f = core[rng.random_range(0..n.div_ceil(10))];
    let mut idx = by_distance(coords[[f, 0]] as f64, coords[[f, 1]] as f64);
    idx.truncate(count);
    idx
}

/// Generates a cohort deterministically from `seed`.
pub fn synth_cohort(cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut dir_rng = seed::rng(seed::derive(seed, &[0xD1]));
    let mut direction = Array1::from_shape_fn(cfg.dim, |_| dir_rng.sample::<f64, _>(StandardNormal));
    let norm = direction.dot(&direction).sqrt();
    direction /= norm;

    let n_pos = (cfg.prevalence * cfg.patients as f64).round() as usize;
    let mut positive = vec![false; cfg.patients];
    positive[..n_pos].iter_mut().for_each(|p| *p = true);
    positive.shuffle(&mut seed::rng(seed::derive(seed, &[0xC0])));

    let width = (cfg.patients.max(2) - 1).to_string().len().max(3);
    let per_patient: Vec<(PatientRecord, Vec<SlideRecord>, Vec<FeatureBlock>)> = (0..cfg.patients)
        .into_par_iter()
        .map(|p| {
            let mut rng = seed::rng(seed::derive(seed, &[0xA0, p as u64]));
            let pid = format!("P{p:0width$}");
            let is_pos = positive[p];
            let mut rec = PatientRecord::bare(pid.clone(), false, 0.0);
            if is_pos {
                rec.event = 1;
                rec.months = draw_event_time(cfg.horizon, &mut rng);
            } else {
                let u: f64 = rng.random();
                let late = u < cfg.late_event_fraction;
                let short = !late && u < cfg.late_event_fraction + cfg.short_followup_fraction;
                let (lo, hi) = if short { (1.0, cfg.horizon) } else { (cfg.horizon, cfg.max_followup) };
                rec.months = rng.random_range(lo..hi).ceil().clamp(lo, hi);
                if short && rec.months >= cfg.horizon {
                    rec.months = (cfg.horizon - 1.0).max(0.5);
                }
                rec.event = u8::from(late && rec.months > cfg.horizon);
            }
            let profile = if is_pos { &CovariateProfile::BCR } else { &CovariateProfile::NON_BCR };
            draw_covariates(&mut rec, profile, &mut rng);

            let n_slides = cfg.slides_per_patient;
            let run = ((cfg.tumor_slide_fraction * n_slides as f64).round() as usize).clamp(1, n_slides);
            let start = rng.random_range(0..=n_slides - run);
            let n_hot = (cfg.hot_fraction * cfg.patches_per_slide as f64).round() as usize;
            let shift = cfg.signal * cfg.hot_shift;

            let mut slides = Vec::with_capacity(n_slides);
            let mut blocks = Vec::with_capacity(n_slides);
            for s in 0..n_slides {
                let coords = slide_coords(cfg.patches_per_slide, &mut rng);
                let mut feats = Array2::from_shape_fn((cfg.patches_per_slide, cfg.dim), |_| {
                    rng.sample::<f64, _>(StandardNormal)
                });
                let tumor = (start..start + run).contains(&s);
                let hot = focus_cluster(&coords, n_hot, &mut rng);
                if is_pos && tumor {
                    for &i in &hot {
                        feats.row_mut(i).scaled_add(shift, &direction);
                    }
                }
                let slide_id = format!("{pid}-S{s:02}");
                blocks.push(FeatureBlock::new(feats.mapv(|v| v as f32), coords).expect("finite by construction"));
                slides.push(SlideRecord {
                    patient_id: pid.clone(),
                    feature_path: format!("features/{slide_id}.mswf"),
                    slide_id,
                    slide_index: s as u32,
                });
            }
            (rec, slides, blocks)
        })
        .collect();

    let mut out = SynthOutput {
        patients: Vec::with_capacity(cfg.patients),
        slides: Vec::new(),
        blocks: Vec::new(),
        direction,
    };
    for (rec, slides, blocks) in per_patient {
        out.patients.push(rec);
        out.slides.extend(slides);
        out.blocks.extend(blocks);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{derive_endpoint_label, read_feature_block, LabelValue};

    fn small(signal: f64) -> SynthConfig {
        SynthConfig {
            patients: 20,
            slides_per_patient: 3,
            patches_per_slide: 30,
            dim: 8,
            signal,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_well_formed() {
        let a = synth_cohort(&small(1.0), 7).unwrap();
        let b = synth_cohort(&small(1.0), 7).unwrap();
        assert_eq!(a.patients, b.patients);
        assert_eq!(a.blocks, b.blocks);
        assert_eq!(a.slides.len(), 60);
        assert_eq!(a.patients.iter().filter(|p| p.has_event() && p.months <= 24.0).count(), 8);
        for p in &a.patients {
            p.validate().unwrap();
            assert_ne!(derive_endpoint_label(p, 24.0).unwrap().value, LabelValue::Excluded);
        }
        for blk in &a.blocks {
            let mut cells: Vec<_> = blk.coords().rows().into_iter().map(|r| (r[0] as i64, r[1] as i64)).collect();
            cells.sort();
            cells.dedup();
            assert_eq!(cells.len(), blk.n(), "patches must not overlap");
        }
        assert_ne!(synth_cohort(&small(1.0), 8).unwrap().blocks, a.blocks);
    }

    #[test]
    fn written_files_are_bit_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let out = synth_cohort(&small(0.5), 3).unwrap();
        out.write_to(d1.path()).unwrap();
        synth_cohort(&small(0.5), 3).unwrap().write_to(d2.path()).unwrap();
        for f in [PATIENTS_FILE, SLIDES_FILE, "features/P004-S01.mswf"] {
            assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap());
        }
        assert_eq!(read_feature_block(d1.path().join("features/P004-S01.mswf")).unwrap(), out.blocks[13]);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(synth_cohort(&SynthConfig { dim: 1, ..small(1.0) }, 1).is_err());
        assert!(synth_cohort(&SynthConfig { patches_per_slide: 0, ..small(1.0) }, 1).is_err());
        assert!(synth_cohort(&SynthConfig { signal: 1.5, ..small(1.0) }, 1).is_err());
    }

    #[test]
    fn signal_shifts_positive_projections() {
        let out = synth_cohort(&SynthConfig { patients: 40, ..small(1.0) }, 11).unwrap();
        let proj = |pos: bool| {
            let (mut s, mut n) = (0.0, 0usize);
            for (sl, b) in out.slides.iter().zip(&out.blocks) {
                let p = out.patients.iter().find(|p| p.patient_id == sl.patient_id).unwrap();
                if p.has_event() && p.months <= 24.0 && pos || !(p.has_event() && p.months <= 24.0) && !pos {
                    for r in b.features().rows() {
                        s += r.iter().zip(&out.direction).map(|(a, d)| *a as f64 * d).sum::<f64>();
                        n += 1;
                    }
                }
            }
            s / n as f64
        };
        assert!(proj(true) - proj(false) > 0.2);
    }

    /// With no signal the per-axis mean embedding difference between the
    /// classes is indistinguishable from zero.
    #[test]
    fn null_signal_two_sample_t() {
        let cfg = SynthConfig {
            patients: 50,
            slides_per_patient: 2,
            patches_per_slide: 100,
            dim: 4,
            signal: 0.0,
            ..SynthConfig::default()
        };
        let out = synth_cohort(&cfg, 5).unwrap();
        let pos: std::collections::HashSet<_> =
            out.patients.iter().filter(|p| p.has_event() && p.months <= 24.0).map(|p| p.patient_id.clone()).collect();
        for axis in 0..cfg.dim {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (sl, blk) in out.slides.iter().zip(&out.blocks) {
                let dst = if pos.contains(&sl.patient_id) { &mut a } else { &mut b };
                dst.extend(blk.features().column(axis).iter().map(|&v| v as f64));
            }
            assert!(a.len() + b.len() == 10_000);
            let stats = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
                (m, var / v.len() as f64)
            };
            let ((ma, va), (mb, vb)) = (stats(&a), stats(&b));
            let t = (ma - mb) / (va + vb).sqrt();
            assert!(t.abs() < 4.0, "axis {axis}: t = {t}");
        }
    }
}
