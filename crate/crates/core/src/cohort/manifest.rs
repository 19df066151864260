//! JSON-lines manifests: `patients.jsonl` and `slides.jsonl`.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{PatientRecord, SlideRecord};
use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const PATIENTS_FILE: &str = "patients.jsonl";
pub const SLIDES_FILE: &str = "slides.jsonl";

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    atomic_write(path, |w| {
        for r in records {
            serde_json::to_writer(&mut *w, r).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn read_patients(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    let recs: Vec<PatientRecord> = read_jsonl(path.as_ref())?;
    for r in &recs {
        r.validate()?;
    }
    Ok(recs)
}

pub fn write_patients(path: impl AsRef<Path>, patients: &[PatientRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), patients)
}

/// Reads slide records and checks that each patient's slide indices are
/// unique and contiguous from zero.
pub fn read_slides(path: impl AsRef<Path>) -> Result<Vec<SlideRecord>> {
    let recs: Vec<SlideRecord> = read_jsonl(path.as_ref())?;
    let mut by_patient: std::collections::BTreeMap<&str, Vec<u32>> = Default::default();
    for r in &recs {
        by_patient.entry(&r.patient_id).or_default().push(r.slide_index);
    }
    for (pid, mut idx) in by_patient {
        idx.sort_unstable();
        if idx.iter().enumerate().any(|(i, &v)| v as usize != i) {
            return Err(Error::input(format!(
                "patient {pid}: slide indices must be unique and contiguous from 0, got {idx:?}"
            )));
        }
    }
    Ok(recs)
}

pub fn write_slides(path: impl AsRef<Path>, slides: &[SlideRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), slides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::TStage;

    #[test]
    fn patients_round_trip_with_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(PATIENTS_FILE);
        let mut a = PatientRecord::bare("A", true, 5.0);
        a.t_stage = Some(TStage::T3a);
        a.psa = Some(12.5);
        let b = PatientRecord::bare("B", false, 40.0);
        write_patients(&p, &[a.clone(), b.clone()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().next().unwrap().contains("\"t_stage\":\"T3a\""));
        assert!(text.contains("\"age\":null"));
        assert_eq!(read_patients(&p).unwrap(), vec![a, b]);
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(PATIENTS_FILE);
        std::fs::write(&p, "{\"patient_id\":\"A\",\"event\":1,\"months\":3}\nnot json\n").unwrap();
        match read_patients(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_covariates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(PATIENTS_FILE);
        std::fs::write(&p, "{\"patient_id\":\"A\",\"event\":1,\"months\":3,\"gleason\":5}\n").unwrap();
        assert!(matches!(read_patients(&p), Err(Error::Input(_))));
    }

    #[test]
    fn slide_indices_must_be_contiguous() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(SLIDES_FILE);
        let s = |i: u32| SlideRecord {
            patient_id: "A".into(),
            slide_id: format!("A-{i}"),
            slide_index: i,
            feature_path: format!("f/{i}.mswf"),
        };
        write_slides(&p, &[s(1), s(0)]).unwrap();
        assert_eq!(read_slides(&p).unwrap().len(), 2);
        write_slides(&p, &[s(0), s(2)]).unwrap();
        assert!(read_slides(&p).is_err());
    }
}
