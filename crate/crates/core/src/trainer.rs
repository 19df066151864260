//! Fold training, cross-validated ensembles and ensemble inference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::cohort::{derive_endpoint_label, make_folds, LabelValue, PatientRecord};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::atomic_write_bytes;
use crate::mil::{accumulate_and_step, predict, read_checkpoint, write_checkpoint, AdamConfig, AdamState, Dropout, MilConfig, MilParams, PatientBag};
use crate::sampler::{check_ratio, SlideStrategy};
use crate::seed;
use crate::survstats::{auc, median};

pub const META_FILE: &str = "ensemble.meta";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Classification horizon in months.
    pub horizon: f64,
    pub train_patch_ratio: f64,
    /// Patch ratio for within-fold validation and out-of-fold scoring.
    pub eval_patch_ratio: f64,
    pub epochs: usize,
    /// Patients per optimizer step.
    pub accumulation: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    pub resample_each_epoch: bool,
    pub folds: usize,
    pub embed: usize,
    pub attn: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            horizon: 24.0,
            train_patch_ratio: 0.10,
            eval_patch_ratio: 1.0,
            epochs: 20,
            accumulation: 16,
            lr: 5e-6,
            weight_decay: 5e-7,
            dropout: 0.25,
            seed: 0,
            resample_each_epoch: true,
            folds: 5,
            embed: 512,
            attn: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.train_patch_ratio)?;
        check_ratio(self.eval_patch_ratio)?;
        if self.epochs == 0 || self.accumulation == 0 || self.folds == 0 {
            return Err(Error::input("epochs, accumulation and folds must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::input(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.horizon > 0.0) || !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::input("horizon and lr must be positive, weight decay non-negative"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    fn dropout_for(&self, seed: u64) -> Dropout {
        if self.dropout > 0.0 {
            Dropout::On { rate: self.dropout, seed }
        } else {
            Dropout::Off
        }
    }
}

/// Result of training one fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub params: MilParams<f64>,
    /// 0-based epoch whose checkpoint was kept.
    pub best_epoch: usize,
    /// `None` when the validation patients lack one of the classes.
    pub best_val_auc: Option<f64>,
    pub optimizer_steps: u64,
    pub epoch_losses: Vec<f64>,
}

fn labelled<'a>(patients: &[&'a PatientRecord], horizon: f64) -> Result<Vec<(&'a PatientRecord, LabelValue)>> {
    let mut out = Vec::new();
    for &p in patients {
        let l = derive_endpoint_label(p, horizon)?.value;
        if l != LabelValue::Excluded {
            out.push((p, l));
        }
    }
    Ok(out)
}

fn score_one(data: &Dataset, params: &MilParams<f64>, pid: &str, ratio: f64, seed: u64) -> Result<f64> {
    let x = data.patient_instances(pid, SlideStrategy::All, ratio, seed)?;
    predict(params, x.view())
}

/// Validation AUC and mean cross-entropy; `None` when a class is missing.
fn validation_score(
    data: &Dataset,
    params: &MilParams<f64>,
    val: &[(&PatientRecord, LabelValue)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Option<(f64, f64)>> {
    let pos = val.iter().filter(|(_, l)| *l == LabelValue::Positive).count();
    if pos == 0 || pos == val.len() {
        return Ok(None);
    }
    let scored = val
        .par_iter()
        .map(|(p, l)| Ok((score_one(data, params, &p.patient_id, cfg.eval_patch_ratio, seed)?, *l == LabelValue::Positive)))
        .collect::<Result<Vec<_>>>()?;
    let ce = scored
        .iter()
        .map(|&(s, y)| -(if y { s } else { 1.0 - s }).max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / scored.len() as f64;
    Ok(Some((auc(&scored)?, ce)))
}

/// Trains one model on `train`, keeping the epoch with the best AUC on `validation`.
pub fn train_fold(
    data: &Dataset,
    train: &[&PatientRecord],
    validation: &[&PatientRecord],
    cfg: &TrainConfig,
    fold: u64,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    let train = labelled(train, cfg.horizon)?;
    let val = labelled(validation, cfg.horizon)?;
    let n_pos = train.iter().filter(|(_, l)| *l == LabelValue::Positive).count();
    if n_pos == 0 || n_pos == train.len() {
        return Err(Error::input(format!(
            "fold {fold}: training set needs both classes ({n_pos} positive of {})",
            train.len()
        )));
    }

    let mil_cfg = MilConfig::new(data.dim(), cfg.embed, cfg.attn);
    let mut params = MilParams::<f64>::init(mil_cfg, seed::derive(cfg.seed, &[0x1417, fold]));
    let mut state = AdamState::new(cfg.adam(), &params);
    let eval_seed = seed::derive(cfg.seed, &[0xE7A1, fold]);

    let build_bags = |epoch: u64| -> Result<Vec<PatientBag<f64>>> {
        let bag_seed = seed::derive(cfg.seed, &[0xBA65, fold, epoch]);
        train
            .par_iter()
            .map(|(p, l)| {
                let x = data.patient_instances(&p.patient_id, SlideStrategy::All, cfg.train_patch_ratio, bag_seed)?;
                PatientBag::new(x, *l)
            })
            .collect()
    };

    let mut fixed_bags = if cfg.resample_each_epoch { None } else { Some(build_bags(0)?) };
    let mut best: Option<((f64, f64), usize, MilParams<f64>)> = None;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs as u64 {
        let fresh;
        let bags = match &mut fixed_bags {
            Some(b) => &*b,
            None => {
                fresh = build_bags(epoch)?;
                &fresh
            }
        };
        let mut order: Vec<usize> = (0..bags.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &[0x0DE2, fold, epoch])));

        let mut loss_sum = 0.0;
        for group in order.chunks(cfg.accumulation) {
            let batch: Vec<(&PatientBag<f64>, Dropout)> = group
                .iter()
                .map(|&i| {
                    let d = cfg.dropout_for(seed::derive(cfg.seed, &[0xD809, fold, epoch, i as u64]));
                    (&bags[i], d)
                })
                .collect();
            loss_sum += accumulate_and_step(&mut state, &mut params, &batch)? * group.len() as f64;
        }
        epoch_losses.push(loss_sum / bags.len() as f64);

        if let Some((v, ce)) = validation_score(data, &params, &val, cfg, eval_seed)? {
            // higher AUC wins; equal AUC falls back to lower cross-entropy
            if best.as_ref().is_none_or(|(b, _, _)| v > b.0 || (v == b.0 && ce < b.1)) {
                best = Some(((v, ce), epoch as usize, params.clone()));
            }
        }
    }

    let optimizer_steps = state.t;
    Ok(match best {
        Some(((v, _), e, p)) => FoldOutcome {
            params: p,
            best_epoch: e,
            best_val_auc: Some(v),
            optimizer_steps,
            epoch_losses,
        },
        None => FoldOutcome {
            params,
            best_epoch: cfg.epochs - 1,
            best_val_auc: None,
            optimizer_steps,
            epoch_losses,
        },
    })
}

/// Fold checkpoints plus the development-cohort median risk score.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub models: Vec<MilParams<f64>>,
    pub median_risk: f64,
    pub horizon: f64,
    /// Configuration echo and seeds, written to `ensemble.meta`.
    pub meta: BTreeMap<String, String>,
}

impl EnsembleModel {
    pub fn new(models: Vec<MilParams<f64>>, median_risk: f64, horizon: f64) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::input("ensemble needs at least one model"));
        }
        if !(median_risk > 0.0 && median_risk < 1.0) {
            return Err(Error::numeric(format!("median risk {median_risk} outside (0, 1)")));
        }
        let cfg = models[0].config();
        if models.iter().any(|m| m.config() != cfg) {
            return Err(Error::input("ensemble members have different shapes"));
        }
        Ok(EnsembleModel {
            models,
            median_risk,
            horizon,
            meta: BTreeMap::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.models.len()
    }

    pub fn config(&self) -> MilConfig {
        self.models[0].config()
    }

    /// Writes `fold_{i}.msmp` files and `ensemble.meta`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (i, m) in self.models.iter().enumerate() {
            write_checkpoint(m, dir.join(format!("fold_{i}.msmp")))?;
        }
        let mut text = String::new();
        let mut fields = BTreeMap::new();
        fields.insert("k".to_string(), self.k().to_string());
        fields.insert("horizon".to_string(), self.horizon.to_string());
        fields.insert("median_risk_score".to_string(), self.median_risk.to_string());
        for (k, v) in &self.meta {
            fields.entry(k.clone()).or_insert_with(|| v.clone());
        }
        for (k, v) in &fields {
            let _ = writeln!(text, "{k}={v}");
        }
        atomic_write_bytes(&dir.join(META_FILE), text.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut meta = BTreeMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: "expected key=value".into(),
            })?;
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
        let field = |k: &str| -> Result<f64> {
            meta.get(k)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.clone(),
                    line: 0,
                    message: format!("missing or invalid {k}"),
                })
        };
        let k = field("k")? as usize;
        let horizon = field("horizon")?;
        let median_risk = field("median_risk_score")?;
        let models = (0..k)
            .map(|i| read_checkpoint(dir.join(format!("fold_{i}.msmp"))))
            .collect::<Result<Vec<_>>>()?;
        let mut model = EnsembleModel::new(models, median_risk, horizon)?;
        for key in ["k", "horizon", "median_risk_score"] {
            meta.remove(key);
        }
        model.meta = meta;
        Ok(model)
    }
}

/// Cross-validation result: the ensemble plus out-of-fold development scores.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub model: EnsembleModel,
    /// `(patient_id, score)` for every development patient, in input order.
    pub oof_scores: Vec<(String, f64)>,
    pub folds: Vec<FoldOutcome>,
}

/// Trains one model per held-out fold. With `cfg.folds == 1` a single model
/// is trained and validated on the whole development set.
pub fn train_cv(data: &Dataset, dev: &[PatientRecord], cfg: &TrainConfig) -> Result<CvOutcome> {
    cfg.validate()?;
    let folds: Vec<Vec<usize>> = if cfg.folds == 1 {
        vec![(0..dev.len()).collect()]
    } else {
        make_folds(dev, cfg.folds, cfg.seed)?
    };
    let k = folds.len();
    let outcomes: Vec<(FoldOutcome, Vec<(usize, f64)>)> = (0..k)
        .into_par_iter()
        .map(|f| {
            let held: Vec<&PatientRecord> = folds[f].iter().map(|&i| &dev[i]).collect();
            let train: Vec<&PatientRecord> = if k == 1 {
                held.clone()
            } else {
                folds
                    .iter()
                    .enumerate()
                    .filter(|(g, _)| *g != f)
                    .flat_map(|(_, idx)| idx.iter().map(|&i| &dev[i]))
                    .collect()
            };
            let outcome = train_fold(data, &train, &held, cfg, f as u64)?;
            let oof_seed = seed::derive(cfg.seed, &[0x00F, f as u64]);
            let scores = folds[f]
                .par_iter()
                .map(|&i| Ok((i, score_one(data, &outcome.params, &dev[i].patient_id, cfg.eval_patch_ratio, oof_seed)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok((outcome, scores))
        })
        .collect::<Result<_>>()?;

    let mut oof = vec![f64::NAN; dev.len()];
    let mut fold_outcomes = Vec::with_capacity(k);
    for (outcome, scores) in outcomes {
        for (i, s) in scores {
            oof[i] = s;
        }
        fold_outcomes.push(outcome);
    }
    let median_risk = median(&oof)?;
    let mut model = EnsembleModel::new(fold_outcomes.iter().map(|o| o.params.clone()).collect(), median_risk, cfg.horizon)?;
    model.meta = config_echo(cfg);
    let oof_scores = dev.iter().zip(oof).map(|(p, s)| (p.patient_id.clone(), s)).collect();
    Ok(CvOutcome {
        model,
        oof_scores,
        folds: fold_outcomes,
    })
}

fn config_echo(cfg: &TrainConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("train_patch_ratio", cfg.train_patch_ratio.to_string());
    put("eval_patch_ratio", cfg.eval_patch_ratio.to_string());
    put("epochs", cfg.epochs.to_string());
    put("accumulation", cfg.accumulation.to_string());
    put("lr", cfg.lr.to_string());
    put("weight_decay", cfg.weight_decay.to_string());
    put("dropout", cfg.dropout.to_string());
    put("seed", cfg.seed.to_string());
    put("resample_each_epoch", cfg.resample_each_epoch.to_string());
    put("folds", cfg.folds.to_string());
    put("embed", cfg.embed.to_string());
    put("attn", cfg.attn.to_string());
    m
}

/// Mean recurrence probability over the ensemble members (dropout off).
pub fn ensemble_predict(
    model: &EnsembleModel,
    data: &Dataset,
    patient_id: &str,
    patch_ratio: f64,
    strategy: SlideStrategy,
    seed: u64,
) -> Result<f64> {
    let x = data.patient_instances(patient_id, strategy, patch_ratio, seed)?;
    ensemble_predict_instances(model, x.view())
}

pub fn ensemble_predict_instances(model: &EnsembleModel, x: ndarray::ArrayView2<f64>) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::input("empty bag"));
    }
    let mut total = 0.0;
    for m in &model.models {
        total += predict(m, x)?;
    }
    Ok(total / model.k() as f64)
}

/// Scores many patients in parallel; output order follows `patient_ids`.
pub fn score_patients(
    model: &EnsembleModel,
    data: &Dataset,
    patient_ids: &[String],
    patch_ratio: f64,
    strategy: SlideStrategy,
    seed: u64,
) -> Result<Vec<f64>> {
    check_ratio(patch_ratio)?;
    patient_ids
        .par_iter()
        .map(|id| ensemble_predict(model, data, id, patch_ratio, strategy, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{synth_cohort, SynthConfig};
    use crate::sampler::KdeMode;

    fn tiny_data(patients: usize, seed: u64) -> Dataset {
        let cfg = SynthConfig {
            patients,
            slides_per_patient: 2,
            patches_per_slide: 20,
            dim: 6,
            ..SynthConfig::default()
        };
        Dataset::from_synth(&synth_cohort(&cfg, seed).unwrap(), KdeMode::Exact).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            embed: 6,
            attn: 4,
            lr: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_of_sixteen_patients_is_one_step() {
        let data = tiny_data(16, 1);
        let refs: Vec<&PatientRecord> = data.patients.iter().collect();
        let out = train_fold(&data, &refs, &refs, &quick_cfg(), 0).unwrap();
        assert_eq!(out.optimizer_steps, 1);
        let out = train_fold(&data, &refs, &refs, &TrainConfig { epochs: 3, ..quick_cfg() }, 0).unwrap();
        assert_eq!(out.optimizer_steps, 3);
        assert_eq!(out.epoch_losses.len(), 3);
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let data = tiny_data(16, 1);
        let neg: Vec<&PatientRecord> = data.patients.iter().filter(|p| !p.has_event()).collect();
        assert!(train_fold(&data, &neg, &neg, &quick_cfg(), 0).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data(20, 2);
        let cfg = TrainConfig { epochs: 2, ..quick_cfg() };
        let a = train_cv(&data, &data.patients, &TrainConfig { folds: 2, ..cfg.clone() }).unwrap();
        let b = train_cv(&data, &data.patients, &TrainConfig { folds: 2, ..cfg }).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.oof_scores, b.oof_scores);
        assert_eq!(a.model.k(), 2);
        assert!(a.oof_scores.iter().all(|(_, s)| *s > 0.0 && *s < 1.0));
    }

    #[test]
    fn single_fold_ensemble_matches_its_model() {
        let data = tiny_data(16, 4);
        let cv = train_cv(&data, &data.patients, &TrainConfig { folds: 1, ..quick_cfg() }).unwrap();
        assert_eq!(cv.model.k(), 1);
        let pid = &data.patients[0].patient_id;
        let x = data.patient_instances(pid, SlideStrategy::All, 1.0, 0).unwrap();
        let direct = predict(&cv.model.models[0], x.view()).unwrap();
        let ens = ensemble_predict(&cv.model, &data, pid, 1.0, SlideStrategy::All, 0).unwrap();
        assert_eq!(direct, ens);
    }

    #[test]
    fn identical_members_give_member_score() {
        let data = tiny_data(16, 5);
        let p = MilParams::<f64>::init(MilConfig::new(6, 4, 3), 9);
        let single = EnsembleModel::new(vec![p.clone()], 0.5, 24.0).unwrap();
        let triple = EnsembleModel::new(vec![p.clone(), p.clone(), p], 0.5, 24.0).unwrap();
        for pt in &data.patients {
            let a = ensemble_predict(&single, &data, &pt.patient_id, 0.5, SlideStrategy::Uniform(1), 1).unwrap();
            let b = ensemble_predict(&triple, &data, &pt.patient_id, 0.5, SlideStrategy::Uniform(1), 1).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ensemble_round_trips_through_disk() {
        let p = MilParams::<f64>::init(MilConfig::new(6, 4, 3), 9);
        let mut m = EnsembleModel::new(vec![p.clone(), p], 0.375, 12.0).unwrap();
        m.meta.insert("seed".into(), "7".into());
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert!(dir.path().join("fold_1.msmp").exists());
        let text = std::fs::read_to_string(dir.path().join(META_FILE)).unwrap();
        assert!(text.contains("median_risk_score=0.375") && text.contains("k=2"));
        assert_eq!(EnsembleModel::load(dir.path()).unwrap(), m);
        assert!(EnsembleModel::new(vec![], 0.5, 24.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { train_patch_ratio: 0.0, ..quick_cfg() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..quick_cfg() }.validate().is_err());
        assert!(quick_cfg().validate().is_ok());
    }
}
