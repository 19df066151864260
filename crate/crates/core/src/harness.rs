//! Trade-off sweeps: AUC and per-patient inference time as a function of
//! the patch ratio, the training ratio or the number of slides.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::cohort::{derive_endpoint_label, PatientRecord};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::atomic_write_bytes;
use crate::plot::{Canvas, PALETTE};
use crate::sampler::{check_ratio, KdeMode, SlideStrategy};
use crate::survstats::{auc, bootstrap_auc_ci, AucReport, ScoredCohort};
use crate::trainer::{ensemble_predict_instances, score_patients, train_cv, EnsembleModel, TrainConfig};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "MSBCR_THREADS";

/// Installs the global worker pool, honouring `MSBCR_THREADS` when set.
/// Calling it after the pool exists is a no-op.
pub fn init_thread_pool() -> Result<()> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|n| *n >= 1)
                .ok_or_else(|| Error::input(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let _ = builder.build_global();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    TrainPatchRatio,
    InferPatchRatio,
    SlideCount,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::TrainPatchRatio => "train_patch_ratio",
            SweepAxis::InferPatchRatio => "infer_patch_ratio",
            SweepAxis::SlideCount => "slide_count",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::TrainPatchRatio, SweepAxis::InferPatchRatio, SweepAxis::SlideCount]
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    /// Slide selection; for the slide-count axis only its kind matters.
    pub strategy: SlideStrategy,
    /// Inference patch ratio used when the axis is not the inference ratio.
    pub patch_ratio: f64,
    pub horizon: f64,
    pub seed: u64,
    /// Timing passes over the cohort per grid value.
    pub repetitions: usize,
    pub bootstrap: usize,
    /// Density estimator used inside the timed path.
    pub kde_mode: KdeMode,
}

impl SweepSpec {
    pub fn new(axis: SweepAxis, grid: Vec<f64>, horizon: f64, seed: u64) -> Self {
        SweepSpec {
            axis,
            grid,
            strategy: match axis {
                SweepAxis::SlideCount => SlideStrategy::Uniform(1),
                _ => SlideStrategy::All,
            },
            patch_ratio: 1.0,
            horizon,
            seed,
            repetitions: 5,
            bootstrap: 2000,
            kde_mode: KdeMode::Exact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::input("sweep grid is empty"));
        }
        match self.axis {
            SweepAxis::SlideCount => {
                if let Some(v) = self.grid.iter().find(|v| !(v.fract() == 0.0 && **v >= 1.0)) {
                    return Err(Error::input(format!("slide counts must be integers >= 1, got {v}")));
                }
                if self.strategy == SlideStrategy::All {
                    return Err(Error::input("slide-count sweeps need a uniform or random strategy"));
                }
            }
            _ => {
                for v in &self.grid {
                    check_ratio(*v)?;
                }
            }
        }
        check_ratio(self.patch_ratio)?;
        if self.repetitions == 0 {
            return Err(Error::input("repetitions must be >= 1"));
        }
        if self.bootstrap == 0 {
            return Err(Error::input("bootstrap iterations must be >= 1"));
        }
        Ok(())
    }

    fn point(&self, value: f64) -> (SlideStrategy, f64) {
        match self.axis {
            SweepAxis::InferPatchRatio => (self.strategy, value),
            SweepAxis::SlideCount => (self.strategy.with_count(value as usize), self.patch_ratio),
            SweepAxis::TrainPatchRatio => (self.strategy, self.patch_ratio),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffRow {
    pub value: f64,
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Mean wall time of sampling plus inference per patient.
    pub mean_seconds: f64,
    pub n: usize,
}

/// Rows plus the underlying scores, kept for paired comparisons.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<TradeoffRow>,
    pub cohorts: Vec<ScoredCohort>,
}

/// Labelled members of `patients` at `horizon`: `(ids, labels)`.
pub fn labelled_cohort(patients: &[PatientRecord], horizon: f64) -> Result<(Vec<String>, Vec<bool>)> {
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for p in patients {
        if let Some(l) = derive_endpoint_label(p, horizon)?.as_binary() {
            ids.push(p.patient_id.clone());
            labels.push(l);
        }
    }
    Ok((ids, labels))
}

/// AUC with a bootstrap CI for scored patients; unscored or excluded patients are skipped.
pub fn evaluate_scores(
    scores: &HashMap<String, f64>,
    patients: &[PatientRecord],
    horizon: f64,
    iterations: usize,
    seed: u64,
) -> Result<AucReport> {
    let (ids, labels) = labelled_cohort(patients, horizon)?;
    let mut data = Vec::with_capacity(ids.len());
    for (id, l) in ids.iter().zip(&labels) {
        if let Some(&s) = scores.get(id) {
            data.push((s, *l));
        }
    }
    report(&data, horizon, iterations, seed)
}

fn report(data: &[(f64, bool)], horizon: f64, iterations: usize, seed: u64) -> Result<AucReport> {
    let a = auc(data)?;
    let (ci_low, ci_high) = bootstrap_auc_ci(data, iterations, seed)?;
    Ok(AucReport {
        auc: a,
        ci_low,
        ci_high,
        n: data.len(),
        horizon,
        seed,
    })
}

fn time_path(
    model: &EnsembleModel,
    data: &Dataset,
    ids: &[String],
    strategy: SlideStrategy,
    ratio: f64,
    spec: &SweepSpec,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..spec.repetitions {
        for id in ids {
            let start = Instant::now();
            let x = data.patient_instances_uncached(id, strategy, ratio, spec.seed, spec.kde_mode)?;
            let s = ensemble_predict_instances(model, x.view())?;
            total += start.elapsed().as_secs_f64();
            std::hint::black_box(s);
        }
    }
    Ok(total / (spec.repetitions * ids.len()) as f64)
}

/// Evaluates `model` on the labelled test patients at every grid value.
/// Scores are computed in parallel; timing passes run serially on the
/// calling thread and cover slide selection, density estimation, patch
/// sampling and the ensemble forward pass (features are already in memory).
pub fn sweep(spec: &SweepSpec, model: &EnsembleModel, data: &Dataset, test: &[PatientRecord]) -> Result<SweepOutcome> {
    spec.validate()?;
    if spec.axis == SweepAxis::TrainPatchRatio {
        return Err(Error::input("training-ratio sweeps retrain the model; use train_ratio_sweep"));
    }
    if model.horizon != spec.horizon {
        return Err(Error::input(format!(
            "model was trained for a {}-month horizon, sweep asks for {}",
            model.horizon, spec.horizon
        )));
    }
    let (ids, labels) = labelled_cohort(test, spec.horizon)?;
    let mut out = SweepOutcome {
        rows: Vec::new(),
        cohorts: Vec::new(),
    };
    for &value in &spec.grid {
        let (strategy, ratio) = spec.point(value);
        let row = evaluate_point(model, data, &ids, &labels, strategy, ratio, value, spec)?;
        out.rows.push(row.0);
        out.cohorts.push(row.1);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_point(
    model: &EnsembleModel,
    data: &Dataset,
    ids: &[String],
    labels: &[bool],
    strategy: SlideStrategy,
    ratio: f64,
    value: f64,
    spec: &SweepSpec,
) -> Result<(TradeoffRow, ScoredCohort)> {
    let scores = score_patients(model, data, ids, ratio, strategy, spec.seed)?;
    let cohort = ScoredCohort::new(ids.to_vec(), scores, labels.to_vec())?;
    let r = report(&cohort.pairs(), spec.horizon, spec.bootstrap, spec.seed)?;
    let mean_seconds = time_path(model, data, ids, strategy, ratio, spec)?;
    Ok((
        TradeoffRow {
            value,
            auc: r.auc,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            mean_seconds,
            n: r.n,
        },
        cohort,
    ))
}

/// Trains a cross-validated ensemble per training ratio on `dev` and
/// evaluates each on `test` at the spec's inference ratio and strategy.
pub fn train_ratio_sweep(
    spec: &SweepSpec,
    base: &TrainConfig,
    data: &Dataset,
    dev: &[PatientRecord],
    test: &[PatientRecord],
) -> Result<(SweepOutcome, Vec<EnsembleModel>)> {
    spec.validate()?;
    if spec.axis != SweepAxis::TrainPatchRatio {
        return Err(Error::input("train_ratio_sweep needs the train_patch_ratio axis"));
    }
    let (ids, labels) = labelled_cohort(test, spec.horizon)?;
    let mut out = SweepOutcome {
        rows: Vec::new(),
        cohorts: Vec::new(),
    };
    let mut models = Vec::new();
    for &value in &spec.grid {
        let cfg = TrainConfig {
            train_patch_ratio: value,
            horizon: spec.horizon,
            ..base.clone()
        };
        let model = train_cv(data, dev, &cfg)?.model;
        let (strategy, ratio) = spec.point(value);
        let (row, cohort) = evaluate_point(&model, data, &ids, &labels, strategy, ratio, value, spec)?;
        out.rows.push(row);
        out.cohorts.push(cohort);
        models.push(model);
    }
    Ok((out, models))
}

pub const SCORES_HEADER: &str = "patient_id,risk_score";

/// `patient_id,risk_score` lines in the given order.
pub fn scores_to_csv(scores: &[(String, f64)]) -> String {
    let mut s = format!("{SCORES_HEADER}\n");
    for (id, v) in scores {
        let _ = writeln!(s, "{id},{v}");
    }
    s
}

pub fn parse_scores(text: &str) -> Result<Vec<(String, f64)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SCORES_HEADER => {}
        _ => return Err(Error::input(format!("scores file must start with {SCORES_HEADER:?}"))),
    }
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: String| Error::input(format!("scores line {}: {m}", i + 1));
        let (id, v) = line.split_once(',').ok_or_else(|| bad("expected two fields".into()))?;
        let v: f64 = v.trim().parse().map_err(|e| bad(format!("{v:?}: {e}")))?;
        if !v.is_finite() {
            return Err(bad("score is not finite".into()));
        }
        let id = id.trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(bad(format!("duplicate patient {id}")));
        }
        out.push((id, v));
    }
    Ok(out)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text)
}

pub fn write_scores(scores: &[(String, f64)], path: impl AsRef<Path>) -> Result<()> {
    atomic_write_bytes(path.as_ref(), scores_to_csv(scores).as_bytes())
}

pub const CSV_HEADER: &str = "axis,auc,ci_low,ci_high,mean_seconds,n";

pub fn rows_to_csv(rows: &[TradeoffRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::input("no sweep rows to write"));
    }
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.value, r.auc, r.ci_low, r.ci_high, r.mean_seconds, r.n);
    }
    Ok(s)
}

pub fn parse_csv(text: &str) -> Result<Vec<TradeoffRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        other => {
            return Err(Error::input(format!(
                "expected header {CSV_HEADER:?}, found {:?}",
                other.map(|(_, h)| h).unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: String| Error::input(format!("line {}: {m}", i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", f.len())));
        }
        let num = |k: usize| f[k].trim().parse::<f64>().map_err(|e| bad(format!("{:?}: {e}", f[k])));
        rows.push(TradeoffRow {
            value: num(0)?,
            auc: num(1)?,
            ci_low: num(2)?,
            ci_high: num(3)?,
            mean_seconds: num(4)?,
            n: f[5].trim().parse().map_err(|e| bad(format!("{:?}: {e}", f[5])))?,
        });
    }
    Ok(rows)
}

pub fn emit_csv(rows: &[TradeoffRow], path: impl AsRef<Path>) -> Result<()> {
    atomic_write_bytes(path.as_ref(), rows_to_csv(rows)?.as_bytes())
}

/// Dual-axis chart: AUC with its CI on the left axis, mean seconds per
/// patient on the right. Ratio axes spanning more than a decade use a log scale.
pub fn render_svg(rows: &[TradeoffRow], axis: SweepAxis) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::input("no sweep rows to plot"));
    }
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value));
    let (x_lo, x_hi) = (sorted[0].value, sorted[sorted.len() - 1].value);
    let log_x = axis != SweepAxis::SlideCount && x_lo > 0.0 && x_hi / x_lo > 10.0;
    let t_max = sorted.iter().map(|r| r.mean_seconds).fold(0.0f64, f64::max);
    let y_lo = sorted.iter().map(|r| r.ci_low.min(r.auc)).fold(1.0f64, f64::min);
    let y_lo = (y_lo * 10.0).floor() / 10.0;

    let mut cv = Canvas::new(640.0, 420.0, "AUC and inference time");
    let (pad_lo, pad_hi) = if x_hi > x_lo { (x_lo, x_hi) } else { (x_lo * 0.5, x_hi * 1.5 + 1e-9) };
    if log_x {
        cv.set_x_log(pad_lo, pad_hi, axis.as_str());
    } else {
        cv.set_x(pad_lo, pad_hi, axis.as_str());
    }
    cv.set_y_left(y_lo.min(0.9), 1.0, "AUC");
    cv.set_y_right(0.0, if t_max > 0.0 { t_max * 1.1 } else { 1.0 }, "Mean seconds per patient");
    cv.axes();
    for r in &sorted {
        cv.error_bar(r.value, r.ci_low, r.ci_high, PALETTE[0]);
    }
    cv.polyline_left(&sorted.iter().map(|r| (r.value, r.auc)).collect::<Vec<_>>(), PALETTE[0], true);
    cv.polyline_right(&sorted.iter().map(|r| (r.value, r.mean_seconds)).collect::<Vec<_>>(), PALETTE[1], true);
    cv.legend(0, "AUC (95% CI)", PALETTE[0]);
    cv.legend(1, "seconds / patient", PALETTE[1]);
    Ok(cv.finish())
}

pub fn emit_svg(rows: &[TradeoffRow], axis: SweepAxis, path: impl AsRef<Path>) -> Result<()> {
    atomic_write_bytes(path.as_ref(), render_svg(rows, axis)?.as_bytes())
}
