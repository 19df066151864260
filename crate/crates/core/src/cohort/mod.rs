//! Cohort data model: patient and slide records, endpoint labels, stratified
//! splitting, on-disk manifests and the synthetic cohort generator.

mod container;
mod manifest;
mod synth;

pub use container::{read_feature_block, write_feature_block, FeatureBlock, FEATURE_MAGIC, FEATURE_VERSION};
pub use manifest::{read_patients, read_slides, write_patients, write_slides, PATIENTS_FILE, SLIDES_FILE};
pub use synth::{synth_cohort, CovariateProfile, SynthConfig, SynthOutput};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Pathological T stage. `T2a` is the reference level in regression designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TStage {
    T2a,
    T2b,
    T2c,
    T3a,
    T3b,
    T4,
}

impl TStage {
    pub const ALL: [TStage; 6] = [
        TStage::T2a,
        TStage::T2b,
        TStage::T2c,
        TStage::T3a,
        TStage::T3b,
        TStage::T4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TStage::T2a => "T2a",
            TStage::T2b => "T2b",
            TStage::T2c => "T2c",
            TStage::T3a => "T3a",
            TStage::T3b => "T3b",
            TStage::T4 => "T4",
        }
    }
}

impl fmt::Display for TStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TStage::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::input(format!("unknown T stage {s:?}")))
    }
}

/// One patient: the (months, event) survival pair plus clinical covariates.
/// `None` marks a missing covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    /// 1 = biochemical recurrence observed.
    pub event: u8,
    /// Time to recurrence if `event == 1`, otherwise follow-up time.
    pub months: f64,
    pub age: Option<f64>,
    pub psa: Option<f64>,
    pub gleason: Option<u8>,
    pub t_stage: Option<TStage>,
    pub margin: Option<u8>,
    pub lymphatic: Option<u8>,
    pub tumor_pct: Option<f64>,
    pub pos_ln: Option<u32>,
}

impl PatientRecord {
    /// A record with only the survival pair set.
    pub fn bare(patient_id: impl Into<String>, event: bool, months: f64) -> Self {
        PatientRecord {
            patient_id: patient_id.into(),
            event: u8::from(event),
            months,
            age: None,
            psa: None,
            gleason: None,
            t_stage: None,
            margin: None,
            lymphatic: None,
            tumor_pct: None,
            pos_ln: None,
        }
    }

    pub fn has_event(&self) -> bool {
        self.event == 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::input(format!("patient {}: {what}", self.patient_id)));
        if self.event > 1 {
            return bad("event flag must be 0 or 1");
        }
        if !(self.months.is_finite() && self.months >= 0.0) {
            return bad("months must be finite and non-negative");
        }
        if matches!(self.gleason, Some(g) if !(6..=10).contains(&g)) {
            return bad("gleason outside [6, 10]");
        }
        if matches!(self.tumor_pct, Some(p) if !(0.0..=100.0).contains(&p)) {
            return bad("tumor_pct outside [0, 100]");
        }
        if matches!(self.margin, Some(m) if m > 1) || matches!(self.lymphatic, Some(l) if l > 1) {
            return bad("binary covariate must be 0 or 1");
        }
        Ok(())
    }
}

/// One slide of a patient's multi-section series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub patient_id: String,
    pub slide_id: String,
    /// Anatomical section order within the patient, contiguous from 0.
    pub slide_index: u32,
    /// Relative paths resolve against the manifest directory.
    pub feature_path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelValue {
    Positive,
    Negative,
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndpointLabel {
    pub value: LabelValue,
    pub horizon: f64,
}

impl EndpointLabel {
    /// `Some(true)` for positive, `Some(false)` for negative, `None` when excluded.
    pub fn as_binary(&self) -> Option<bool> {
        match self.value {
            LabelValue::Positive => Some(true),
            LabelValue::Negative => Some(false),
            LabelValue::Excluded => None,
        }
    }
}

/// Classification label at a horizon (months).
///
/// Recurrence at or before the horizon is positive; reaching the horizon
/// without recurrence is negative; censoring before the horizon excludes the
/// patient from classification.
pub fn derive_endpoint_label(rec: &PatientRecord, horizon: f64) -> Result<EndpointLabel> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::input(format!("horizon must be positive, got {horizon}")));
    }
    if !(rec.months.is_finite() && rec.months >= 0.0) {
        return Err(Error::input(format!(
            "patient {}: negative or non-finite months {}",
            rec.patient_id, rec.months
        )));
    }
    let value = if rec.has_event() && rec.months <= horizon {
        LabelValue::Positive
    } else if rec.months >= horizon {
        LabelValue::Negative
    } else {
        LabelValue::Excluded
    };
    Ok(EndpointLabel { value, horizon })
}

fn stratify(patients: &[PatientRecord], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seed::rng(seed);
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
        (0..patients.len()).partition(|&i| patients[i].has_event());
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    (pos, neg)
}

/// Stratified random split into (development, test). The development set
/// holds `round(ratio * n)` patients; both halves keep input order.
pub fn split_cohort(
    patients: &[PatientRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>)> {
    if patients.is_empty() {
        return Err(Error::input("cannot split an empty cohort"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::input(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n = patients.len();
    let n_dev = (ratio * n as f64).round() as usize;
    let (pos, neg) = stratify(patients, seed::derive(seed, &[0x5711]));
    let mut dev_pos = ((ratio * pos.len() as f64).round() as usize).min(n_dev);
    if n_dev - dev_pos > neg.len() {
        dev_pos = n_dev - neg.len();
    }
    let dev_neg = n_dev - dev_pos;

    let mut in_dev = vec![false; n];
    for &i in pos[..dev_pos].iter().chain(&neg[..dev_neg]) {
        in_dev[i] = true;
    }
    let (dev, test): (Vec<_>, Vec<_>) = patients
        .iter()
        .cloned()
        .zip(in_dev)
        .partition(|(_, d)| *d);
    Ok((
        dev.into_iter().map(|(p, _)| p).collect(),
        test.into_iter().map(|(p, _)| p).collect(),
    ))
}

/// Stratified k-fold partition of `development`, returned as index lists
/// (each sorted ascending). Fold sizes differ by at most one.
pub fn make_folds(development: &[PatientRecord], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::input(format!("need at least 2 folds, got {k}")));
    }
    if development.len() < k {
        return Err(Error::input(format!(
            "cannot make {k} folds from {} patients",
            development.len()
        )));
    }
    let (pos, neg) = stratify(development, seed::derive(seed, &[0xF01D]));
    let mut folds = vec![Vec::new(); k];
    for (j, i) in pos.into_iter().chain(neg).enumerate() {
        folds[j % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(n: usize, pos_every: usize) -> Vec<PatientRecord> {
        (0..n)
            .map(|i| PatientRecord::bare(format!("P{i:04}"), i % pos_every == 0, 10.0 + i as f64))
            .collect()
    }

    #[test]
    fn label_examples() {
        let l = |e, m| derive_endpoint_label(&PatientRecord::bare("x", e, m), 24.0).unwrap().value;
        assert_eq!(l(true, 6.0), LabelValue::Positive);
        assert_eq!(l(false, 30.0), LabelValue::Negative);
        assert_eq!(l(false, 10.0), LabelValue::Excluded);
        assert_eq!(l(true, 30.0), LabelValue::Negative);
        assert_eq!(l(true, 24.0), LabelValue::Positive);
        assert_eq!(l(false, 24.0), LabelValue::Negative);
    }

    #[test]
    fn label_rejects_bad_input() {
        assert!(derive_endpoint_label(&PatientRecord::bare("x", true, -1.0), 24.0).is_err());
        assert!(derive_endpoint_label(&PatientRecord::bare("x", true, 1.0), 0.0).is_err());
    }

    #[test]
    fn one_year_positives_are_two_year_positives() {
        for p in cohort(300, 3).iter_mut().map(|p| {
            p.months = (p.months * 7.3) % 40.0;
            p.clone()
        }) {
            let one = derive_endpoint_label(&p, 12.0).unwrap().value;
            let two = derive_endpoint_label(&p, 24.0).unwrap().value;
            if one == LabelValue::Positive {
                assert_eq!(two, LabelValue::Positive);
            }
        }
    }

    #[test]
    fn split_sizes() {
        let c = cohort(789, 3);
        let (d, t) = split_cohort(&c, 0.7, 1).unwrap();
        assert_eq!((d.len(), t.len()), (552, 237));
        // the published 562/227 partition is a 562/789 ratio, not exactly 7:3
        let (d, t) = split_cohort(&c, 562.0 / 789.0, 1).unwrap();
        assert_eq!((d.len(), t.len()), (562, 227));
        let (d, t) = split_cohort(&cohort(10, 2), 0.7, 1).unwrap();
        assert_eq!((d.len(), t.len()), (7, 3));
    }

    #[test]
    fn split_is_deterministic_partition() {
        let c = cohort(101, 4);
        let a = split_cohort(&c, 0.7, 9).unwrap();
        let b = split_cohort(&c, 0.7, 9).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<_> = a.0.iter().chain(&a.1).map(|p| p.patient_id.clone()).collect();
        ids.sort();
        let mut want: Vec<_> = c.iter().map(|p| p.patient_id.clone()).collect();
        want.sort();
        assert_eq!(ids, want);
        assert!(split_cohort(&[], 0.7, 1).is_err());
        assert!(split_cohort(&c, 1.0, 1).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let c = cohort(200, 4);
        let (d, _) = split_cohort(&c, 0.7, 3).unwrap();
        let pos = d.iter().filter(|p| p.has_event()).count();
        assert_eq!(pos, 35);
    }

    #[test]
    fn fold_sizes() {
        let folds = make_folds(&cohort(562, 3), 5, 4).unwrap();
        let mut sizes: Vec<_> = folds.iter().map(Vec::len).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![113, 113, 112, 112, 112]);
        let folds = make_folds(&cohort(5, 2), 5, 4).unwrap();
        assert!(folds.iter().all(|f| f.len() == 1));
        assert_eq!(make_folds(&cohort(50, 2), 5, 8).unwrap(), make_folds(&cohort(50, 2), 5, 8).unwrap());
        assert!(make_folds(&cohort(3, 2), 5, 1).is_err());
        assert!(make_folds(&cohort(3, 2), 1, 1).is_err());
    }

    #[test]
    fn t_stage_parse() {
        assert_eq!("t3b".parse::<TStage>().unwrap(), TStage::T3b);
        assert!("T1c".parse::<TStage>().is_err());
    }
}
