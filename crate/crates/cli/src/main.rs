use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msbcr_core::cohort::{read_patients, split_cohort, synth_cohort, SynthConfig};
use msbcr_core::harness::{
    emit_csv, emit_svg, evaluate_scores, init_thread_pool, labelled_cohort, read_scores, sweep, train_ratio_sweep,
    write_scores, SweepAxis, SweepSpec,
};
use msbcr_core::io::atomic_write_bytes;
use msbcr_core::sampler::sample_patches;
use msbcr_core::survstats::{
    cox_design, cox_fit, cox_report, delong_test, km_csv, km_estimate, km_svg, logrank_test, stratify_by_median,
    CoxOptions, RiskGroup, ScoredCohort,
};
use msbcr_core::trainer::{score_patients, train_cv};
use msbcr_core::{seed, Dataset, EnsembleModel, Error, KdeMode, PatientRecord, SamplingPlan, SlideStrategy, TrainConfig};

const SPLIT_RATIO_KEY: &str = "split_ratio";
const SPLIT_SEED_KEY: &str = "split_seed";
const OOF_FILE: &str = "oof_scores.csv";

#[derive(Parser)]
#[command(name = "msbcr", version, about = "Density-sampled multiple-instance recurrence prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with feature containers and manifests.
    Synth(SynthArgs),
    /// Write the density-weighted patch selection for every slide.
    Sample(SampleArgs),
    /// Cross-validated training on the development split.
    Train(TrainArgs),
    /// Score patients with a trained ensemble.
    Infer(InferArgs),
    /// AUC with a bootstrap confidence interval.
    Evaluate(EvaluateArgs),
    /// DeLong comparison of two score files over the same patients.
    Compare(CompareArgs),
    /// Multivariable Cox model of clinical covariates plus the risk score.
    Cox(CoxArgs),
    /// Kaplan-Meier curves of median-split risk groups with a log-rank test.
    Km(KmArgs),
    /// AUC / inference-time trade-off sweep.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    patients: usize,
    #[arg(long, default_value_t = 8)]
    slides: usize,
    #[arg(long, default_value_t = 200)]
    patches: usize,
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    signal: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ratio: f64,
    #[arg(long, default_value = "exact")]
    kde: KdeMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 24.0)]
    horizon: f64,
    /// Training patch sub-sampling ratio.
    #[arg(long, default_value_t = 0.10)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ensemble directory (default: <manifest>/ensemble).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args, Clone)]
struct Hyper {
    #[arg(long, default_value_t = 0.7)]
    split_ratio: f64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    accumulation: usize,
    #[arg(long, default_value_t = 5e-6)]
    lr: f64,
    #[arg(long, default_value_t = 5e-7)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.25)]
    dropout: f64,
    #[arg(long, default_value_t = 512)]
    embed: usize,
    #[arg(long, default_value_t = 256)]
    attn: usize,
    /// Patch ratio for validation and out-of-fold scoring.
    #[arg(long, default_value_t = 1.0)]
    eval_ratio: f64,
    /// Sample training bags once instead of every epoch.
    #[arg(long)]
    fixed_bags: bool,
    #[arg(long, default_value = "exact")]
    kde: KdeMode,
}

impl Hyper {
    fn config(&self, horizon: f64, ratio: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            horizon,
            train_patch_ratio: ratio,
            eval_patch_ratio: self.eval_ratio,
            epochs: self.epochs,
            accumulation: self.accumulation,
            lr: self.lr,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            seed,
            resample_each_epoch: !self.fixed_bags,
            folds: self.folds,
            embed: self.embed,
            attn: self.attn,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Split {
    Test,
    Dev,
    All,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    ratio: f64,
    /// all, uniform:K or random:K
    #[arg(long, default_value = "all")]
    slides: SlideStrategy,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long, default_value = "exact")]
    kde: KdeMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    patients: PathBuf,
    #[arg(long, default_value_t = 24.0)]
    horizon: f64,
    #[arg(long, default_value_t = 2000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    patients: PathBuf,
    #[arg(long, default_value_t = 24.0)]
    horizon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CoxArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    patients: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KmArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    patients: PathBuf,
    /// Scores of the training cohort whose median sets the threshold.
    #[arg(long)]
    train_scores: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    out_svg: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Trained ensemble; required unless sweeping the training ratio.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// train_patch_ratio, infer_patch_ratio or slide_count
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
    /// Slide strategy; for slide_count only uniform or random matters.
    #[arg(long)]
    slides: Option<SlideStrategy>,
    /// Inference patch ratio when the axis is not the inference ratio.
    #[arg(long, default_value_t = 1.0)]
    ratio: f64,
    #[arg(long, default_value_t = 24.0)]
    horizon: f64,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 2000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    out_svg: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = init_thread_pool().and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

type Result<T> = msbcr_core::Result<T>;

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Sample(a) => sample(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => compare(a),
        Command::Cox(a) => cox(a),
        Command::Km(a) => km(a),
        Command::Sweep(a) => run_sweep(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write_bytes(path, text.as_bytes())
}

fn emit_json(value: serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&value).map_err(|e| Error::input(e.to_string()))? + "\n";
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::input(e.to_string()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        patients: a.patients,
        slides_per_patient: a.slides,
        patches_per_slide: a.patches,
        dim: a.dim,
        signal: a.signal,
        ..SynthConfig::default()
    };
    let out = synth_cohort(&cfg, a.seed)?;
    out.write_to(&a.out)?;
    println!(
        "wrote {} patients, {} slides to {}",
        out.patients.len(),
        out.slides.len(),
        a.out.display()
    );
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let data = Dataset::load(&a.manifest, a.kde)?;
    let mut entries = Vec::new();
    for p in &data.patients {
        for s in data.slides(&p.patient_id)? {
            let idx = sample_patches(&s.profile, a.ratio, seed::derive_str(a.seed, &s.slide_id))?;
            entries.push((s.slide_id.clone(), idx));
        }
    }
    let plan = SamplingPlan {
        ratio: a.ratio,
        mode: a.kde,
        entries,
    };
    write_text(&a.out, &plan.to_text())?;
    println!("wrote sampling plan for {} slides to {}", plan.entries.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.manifest, a.hyper.kde)?;
    let (dev, _) = split_cohort(&data.patients, a.hyper.split_ratio, a.seed)?;
    let cfg = a.hyper.config(a.horizon, a.ratio, a.seed);
    let cv = train_cv(&data, &dev, &cfg)?;
    let mut model = cv.model;
    model.meta.insert(SPLIT_RATIO_KEY.into(), a.hyper.split_ratio.to_string());
    model.meta.insert(SPLIT_SEED_KEY.into(), a.seed.to_string());
    model.meta.insert("kde".into(), a.hyper.kde.to_string());
    let dir = a.out.unwrap_or_else(|| a.manifest.join("ensemble"));
    model.save(&dir)?;
    write_scores(&cv.oof_scores, dir.join(OOF_FILE))?;
    for (i, f) in cv.folds.iter().enumerate() {
        match f.best_val_auc {
            Some(v) => println!("fold {i}: best epoch {} validation AUC {v:.4}", f.best_epoch),
            None => println!("fold {i}: single-class validation, kept last epoch"),
        }
    }
    println!("median out-of-fold risk {:.6}; ensemble written to {}", model.median_risk, dir.display());
    Ok(())
}

fn split_of(model: &EnsembleModel, patients: &[PatientRecord], split: Split) -> Result<Vec<PatientRecord>> {
    if split == Split::All {
        return Ok(patients.to_vec());
    }
    let get = |k: &str| {
        model
            .meta
            .get(k)
            .ok_or_else(|| Error::input(format!("ensemble.meta lacks {k}; use --split all")))
    };
    let ratio: f64 = get(SPLIT_RATIO_KEY)?.parse().map_err(|_| Error::input("bad split_ratio"))?;
    let seed: u64 = get(SPLIT_SEED_KEY)?.parse().map_err(|_| Error::input("bad split_seed"))?;
    let (dev, test) = split_cohort(patients, ratio, seed)?;
    Ok(if split == Split::Dev { dev } else { test })
}

fn infer(a: InferArgs) -> Result<()> {
    let model = EnsembleModel::load(&a.ensemble)?;
    let data = Dataset::load(&a.manifest, a.kde)?;
    let patients = split_of(&model, &data.patients, a.split)?;
    let ids: Vec<String> = patients.iter().map(|p| p.patient_id.clone()).collect();
    let scores = score_patients(&model, &data, &ids, a.ratio, a.slides, a.seed)?;
    let rows: Vec<(String, f64)> = ids.into_iter().zip(scores).collect();
    write_scores(&rows, &a.out)?;
    println!("scored {} patients -> {}", rows.len(), a.out.display());
    Ok(())
}

fn score_map(path: &Path) -> Result<HashMap<String, f64>> {
    Ok(read_scores(path)?.into_iter().collect())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let patients = read_patients(&a.patients)?;
    let report = evaluate_scores(&score_map(&a.scores)?, &patients, a.horizon, a.bootstrap, a.seed)?;
    emit_json(to_json(&report)?, a.out.as_deref())
}

fn labelled_scores(path: &Path, ids: &[String], labels: &[bool]) -> Result<ScoredCohort> {
    let map = score_map(path)?;
    let mut keep = (Vec::new(), Vec::new(), Vec::new());
    for (id, l) in ids.iter().zip(labels) {
        if let Some(&s) = map.get(id) {
            keep.0.push(id.clone());
            keep.1.push(s);
            keep.2.push(*l);
        }
    }
    ScoredCohort::new(keep.0, keep.1, keep.2)
}

fn compare(a: CompareArgs) -> Result<()> {
    let patients = read_patients(&a.patients)?;
    let (ids, labels) = labelled_cohort(&patients, a.horizon)?;
    let x = labelled_scores(&a.a, &ids, &labels)?;
    let y = labelled_scores(&a.b, &ids, &labels)?;
    emit_json(to_json(&delong_test(&x, &y)?)?, a.out.as_deref())
}

fn cox(a: CoxArgs) -> Result<()> {
    let patients = read_patients(&a.patients)?;
    let scores = score_map(&a.scores)?;
    let scored: Vec<PatientRecord> = patients.into_iter().filter(|p| scores.contains_key(&p.patient_id)).collect();
    let (names, records, dropped) = cox_design(&scored, &scores);
    let fit = cox_fit(&names, &records, CoxOptions::default())?;
    let mut text = cox_report(&fit);
    text.push_str(&format!("n\t{}\nevents\t{}\ndropped_incomplete\t{dropped}\n", fit.n, fit.events));
    match a.out {
        Some(p) => write_text(&p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn km(a: KmArgs) -> Result<()> {
    let patients = read_patients(&a.patients)?;
    let scores = read_scores(&a.scores)?;
    let train: Vec<f64> = read_scores(&a.train_scores)?.into_iter().map(|(_, s)| s).collect();
    let by_id: HashMap<&str, &PatientRecord> = patients.iter().map(|p| (p.patient_id.as_str(), p)).collect();
    let mut rows = Vec::new();
    for (id, s) in &scores {
        let p = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::input(format!("scored patient {id} is not in the manifest")))?;
        rows.push((p.months, p.has_event(), *s));
    }
    let strat = stratify_by_median(&train, &rows.iter().map(|r| r.2).collect::<Vec<_>>())?;
    let group = |g: RiskGroup| -> (Vec<f64>, Vec<bool>) {
        rows.iter()
            .zip(&strat.groups)
            .filter(|(_, x)| **x == g)
            .map(|(r, _)| (r.0, r.1))
            .unzip()
    };
    let (lt, le) = group(RiskGroup::Low);
    let (ht, he) = group(RiskGroup::High);
    if lt.is_empty() || ht.is_empty() {
        return Err(Error::input("median split left one risk group empty"));
    }
    let low = km_estimate(&lt, &le)?;
    let high = km_estimate(&ht, &he)?;
    let lr = logrank_test(&lt, &le, &ht, &he)?;
    let curves = [("low", &low), ("high", &high)];
    write_text(&a.out_csv, &km_csv(&curves))?;
    let note = format!("log-rank p = {:.3e}", lr.p);
    write_text(&a.out_svg, &km_svg(&curves, "Recurrence-free survival by risk group", &note))?;
    let summary = serde_json::json!({
        "threshold": strat.threshold,
        "n_low": lt.len(),
        "n_high": ht.len(),
        "chi2": lr.chi2,
        "p": lr.p,
        "degenerate": lr.degenerate,
    });
    emit_json(summary, None)
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let data = Dataset::load(&a.manifest, a.hyper.kde)?;
    let mut spec = SweepSpec::new(a.axis, a.grid.clone(), a.horizon, a.seed);
    if let Some(s) = a.slides {
        spec.strategy = s;
    }
    spec.patch_ratio = a.ratio;
    spec.repetitions = a.repetitions;
    spec.bootstrap = a.bootstrap;
    spec.kde_mode = a.hyper.kde;
    let outcome = if a.axis == SweepAxis::TrainPatchRatio {
        let (dev, test) = split_cohort(&data.patients, a.hyper.split_ratio, a.seed)?;
        let cfg = a.hyper.config(a.horizon, 0.1, a.seed);
        train_ratio_sweep(&spec, &cfg, &data, &dev, &test)?.0
    } else {
        let dir = a
            .ensemble
            .as_ref()
            .ok_or_else(|| Error::input("--ensemble is required for this axis"))?;
        let model = EnsembleModel::load(dir)?;
        let test = split_of(&model, &data.patients, Split::Test)?;
        sweep(&spec, &model, &data, &test)?
    };
    emit_csv(&outcome.rows, &a.out_csv)?;
    if let Some(p) = &a.out_svg {
        emit_svg(&outcome.rows, a.axis, p)?;
    }
    for r in &outcome.rows {
        println!(
            "{}={} auc={:.4} [{:.4}, {:.4}] {:.3e}s/patient n={}",
            a.axis, r.value, r.auc, r.ci_low, r.ci_high, r.mean_seconds, r.n
        );
    }
    Ok(())
}
