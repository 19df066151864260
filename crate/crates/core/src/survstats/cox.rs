//! Cox proportional hazards by Newton's method on the Efron partial likelihood.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::{harrell_c, normal_two_sided_p, Z_975};
use crate::cohort::{PatientRecord, TStage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord {
    pub time: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoxOptions {
    pub max_iter: usize,
    /// Converged when the largest score component falls below this.
    pub score_tol: f64,
    /// ... or when the relative log-likelihood change falls below this.
    pub loglik_rel_tol: f64,
    /// `|beta_j| * sd(x_j)` above this is treated as a diverging coefficient.
    pub divergence_limit: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        CoxOptions {
            max_iter: 100,
            score_tol: 1e-8,
            loglik_rel_tol: 1e-10,
            divergence_limit: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    /// Inverse observed information at the optimum.
    pub covariance: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub hr: Vec<f64>,
    pub hr_ci_low: Vec<f64>,
    pub hr_ci_high: Vec<f64>,
    pub wald_z: Vec<f64>,
    pub wald_p: Vec<f64>,
    pub loglik: f64,
    pub loglik_null: f64,
    pub c_index: f64,
    pub iterations: usize,
    pub n: usize,
    pub events: usize,
}

/// Sorted-by-time view with covariates centered on their means.
struct Prepared {
    events: Vec<bool>,
    x: Vec<Vec<f64>>,
    /// (start, end) index ranges of equal times, descending time order.
    groups: Vec<(usize, usize)>,
}

fn prepare(records: &[SurvivalRecord]) -> Prepared {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].time.total_cmp(&records[a].time));
    let p = records.first().map_or(0, |r| r.covariates.len());
    let n = records.len() as f64;
    let means: Vec<f64> = (0..p).map(|j| records.iter().map(|r| r.covariates[j]).sum::<f64>() / n).collect();
    let times: Vec<f64> = order.iter().map(|&i| records[i].time).collect();
    let events = order.iter().map(|&i| records[i].event).collect();
    let x = order
        .iter()
        .map(|&i| records[i].covariates.iter().zip(&means).map(|(v, m)| v - m).collect())
        .collect();
    let mut groups = Vec::new();
    let mut i = 0;
    while i < times.len() {
        let mut j = i + 1;
        while j < times.len() && times[j] == times[i] {
            j += 1;
        }
        groups.push((i, j));
        i = j;
    }
    Prepared { events, x, groups }
}

/// Log partial likelihood with Efron ties, its gradient and the observed information.
fn efron(prep: &Prepared, beta: &[f64]) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let p = beta.len();
    let eta: Vec<f64> = prep.x.iter().map(|x| x.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let w: Vec<f64> = eta.iter().map(|e| e.exp()).collect();

    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![vec![0.0; p]; p];
    let mut ll = 0.0;
    let mut grad = vec![0.0; p];
    let mut info = vec![vec![0.0; p]; p];

    for &(lo, hi) in &prep.groups {
        let (mut d0, mut d1, mut d2) = (0.0, vec![0.0; p], vec![vec![0.0; p]; p]);
        let mut d = 0usize;
        for i in lo..hi {
            let xi = &prep.x[i];
            s0 += w[i];
            for a in 0..p {
                s1[a] += w[i] * xi[a];
                for b in 0..p {
                    s2[a][b] += w[i] * xi[a] * xi[b];
                }
            }
            if prep.events[i] {
                d += 1;
                ll += eta[i];
                d0 += w[i];
                for a in 0..p {
                    grad[a] += xi[a];
                    d1[a] += w[i] * xi[a];
                    for b in 0..p {
                        d2[a][b] += w[i] * xi[a] * xi[b];
                    }
                }
            }
        }
        for l in 0..d {
            let f = l as f64 / d as f64;
            let den = s0 - f * d0;
            ll -= den.ln();
            let mean: Vec<f64> = (0..p).map(|a| (s1[a] - f * d1[a]) / den).collect();
            for a in 0..p {
                grad[a] -= mean[a];
                for b in 0..p {
                    info[a][b] += (s2[a][b] - f * d2[a][b]) / den - mean[a] * mean[b];
                }
            }
        }
    }
    (ll, grad, info)
}

/// Efron log partial likelihood at `beta` (covariates used as given).
pub fn efron_loglik(records: &[SurvivalRecord], beta: &[f64]) -> f64 {
    efron(&prepare(records), beta).0
}

fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

fn chol_inverse(l: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = l.len();
    let mut inv = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = chol_solve(l, &e);
        for i in 0..n {
            inv[i][j] = col[i];
        }
    }
    // symmetrize away rounding
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (inv[i][j] + inv[j][i]);
            inv[i][j] = m;
            inv[j][i] = m;
        }
    }
    inv
}

/// Names the first column that is constant or a linear combination of earlier ones.
fn check_rank(names: &[String], x: &[Vec<f64>]) -> Result<()> {
    let p = names.len();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for j in 0..p {
        let mut col: Vec<f64> = x.iter().map(|r| r[j]).collect();
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        for q in &basis {
            let dot: f64 = col.iter().zip(q).map(|(a, b)| a * b).sum();
            col.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 || norm <= 1e-9 * norm0 {
            return Err(Error::input(format!(
                "design matrix is rank deficient: column {:?} is constant or collinear with earlier columns",
                names[j]
            )));
        }
        basis.push(col.into_iter().map(|v| v / norm).collect());
    }
    Ok(())
}

/// Fits the model; `names` labels the covariate columns.
pub fn cox_fit(names: &[String], records: &[SurvivalRecord], opts: CoxOptions) -> Result<CoxFit> {
    let p = names.len();
    if p == 0 {
        return Err(Error::input("Cox model needs at least one covariate"));
    }
    for r in records {
        if r.covariates.len() != p {
            return Err(Error::input(format!("record has {} covariates, expected {p}", r.covariates.len())));
        }
        if !(r.time.is_finite() && r.time >= 0.0) || r.covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("times must be non-negative and covariates finite"));
        }
    }
    let mut event_times: Vec<f64> = records.iter().filter(|r| r.event).map(|r| r.time).collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    if event_times.len() < 2 {
        return Err(Error::input("Cox model needs at least two distinct event times"));
    }
    let prep = prepare(records);
    check_rank(names, &prep.x)?;
    let n = records.len() as f64;
    let sd: Vec<f64> = (0..p)
        .map(|j| (prep.x.iter().map(|r| r[j] * r[j]).sum::<f64>() / n).sqrt())
        .collect();

    let mut beta = vec![0.0; p];
    let (ll0, _, _) = efron(&prep, &beta);
    let (mut ll, mut grad, mut info) = efron(&prep, &beta);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let max_score = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        trace.push(format!("iter {}: loglik {ll:.10} max|score| {max_score:.3e}", it - 1));
        if max_score < opts.score_tol {
            converged = true;
            break;
        }
        let l = cholesky(&info).ok_or_else(|| Error::numeric("information matrix is not positive definite"))?;
        let step = chol_solve(&l, &grad);
        let mut scale = 1.0;
        let (next, nll, ngrad, ninfo) = loop {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let (cl, cg, ci) = efron(&prep, &cand);
            if cl.is_finite() && cl >= ll - 1e-12 * ll.abs().max(1.0) {
                break (cand, cl, cg, ci);
            }
            scale /= 2.0;
            if scale < 1e-10 {
                return Err(Error::numeric(format!("step halving failed\n{}", trace.join("\n"))));
            }
        };
        let rel = (nll - ll).abs() / ll.abs().max(1e-300);
        beta = next;
        ll = nll;
        grad = ngrad;
        info = ninfo;
        if let Some(j) = (0..p).find(|&j| beta[j].abs() * sd[j] > opts.divergence_limit) {
            return Err(Error::numeric(format!(
                "monotone likelihood: coefficient for {:?} diverges (beta = {:.3e})",
                names[j], beta[j]
            )));
        }
        if rel < opts.loglik_rel_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numeric(format!(
            "Cox fit did not converge in {} iterations\n{}",
            opts.max_iter,
            trace.join("\n")
        )));
    }

    let l = cholesky(&info).ok_or_else(|| Error::numeric("information matrix is singular at the optimum"))?;
    let covariance = chol_inverse(&l);
    let se: Vec<f64> = (0..p).map(|j| covariance[j][j].sqrt()).collect();
    let wald_z: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
    let eta: Vec<f64> = records
        .iter()
        .map(|r| r.covariates.iter().zip(&beta).map(|(x, b)| x * b).sum())
        .collect();
    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let events: Vec<bool> = records.iter().map(|r| r.event).collect();
    let c_index = harrell_c(&times, &events, &eta)?.c_index;

    Ok(CoxFit {
        names: names.to_vec(),
        hr: beta.iter().map(|b| b.exp()).collect(),
        hr_ci_low: beta.iter().zip(&se).map(|(b, s)| (b - Z_975 * s).exp()).collect(),
        hr_ci_high: beta.iter().zip(&se).map(|(b, s)| (b + Z_975 * s).exp()).collect(),
        wald_p: wald_z.iter().map(|z| normal_two_sided_p(*z)).collect(),
        wald_z,
        se,
        beta,
        covariance,
        loglik: ll,
        loglik_null: ll0,
        c_index,
        iterations,
        n: records.len(),
        events: events.iter().filter(|e| **e).count(),
    })
}

/// Builds the multivariable design: clinical covariates, T-stage indicators
/// against the T2a reference, then the AI risk score. Patients missing any
/// covariate or score are dropped (complete-case analysis); indicator levels
/// absent from the remaining patients are omitted. Returns `(names, records, dropped)`.
pub fn cox_design(
    patients: &[PatientRecord],
    risk_scores: &HashMap<String, f64>,
) -> (Vec<String>, Vec<SurvivalRecord>, usize) {
    let stages = &TStage::ALL[1..];
    let mut rows = Vec::new();
    let mut dropped = 0;
    for p in patients {
        let row = (|| {
            let stage = p.t_stage?;
            let mut v = vec![
                p.psa?,
                p.gleason? as f64,
                p.margin? as f64,
                p.tumor_pct?,
                p.pos_ln? as f64,
                p.age?,
            ];
            v.extend(stages.iter().map(|s| f64::from(u8::from(stage == *s))));
            v.push(p.lymphatic? as f64);
            v.push(*risk_scores.get(&p.patient_id)?);
            Some(v)
        })();
        match row {
            Some(v) => rows.push(SurvivalRecord {
                time: p.months,
                event: p.has_event(),
                covariates: v,
            }),
            None => dropped += 1,
        }
    }
    let mut names: Vec<String> = ["psa", "gleason", "margin", "tumor_pct", "pos_ln", "age"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend(stages.iter().map(|s| format!("t_stage_{}", &s.as_str()[1..])));
    names.push("lymphatic".into());
    names.push("ai_risk_score".into());

    let first_indicator = 6;
    let keep: Vec<usize> = (0..names.len())
        .filter(|&j| {
            !(first_indicator..first_indicator + stages.len()).contains(&j) || rows.iter().any(|r| r.covariates[j] != 0.0)
        })
        .collect();
    let names = keep.iter().map(|&j| names[j].clone()).collect();
    for r in &mut rows {
        r.covariates = keep.iter().map(|&j| r.covariates[j]).collect();
    }
    (names, rows, dropped)
}

/// Tab-separated table with a trailing C-index line.
pub fn cox_report(fit: &CoxFit) -> String {
    let mut out = String::from("term\tbeta\thr\tci_low\tci_high\twald_p\n");
    for j in 0..fit.names.len() {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}",
            fit.names[j], fit.beta[j], fit.hr[j], fit.hr_ci_low[j], fit.hr_ci_high[j], fit.wald_p[j]
        );
    }
    let _ = writeln!(out, "c_index\t{:.6}", fit.c_index);
    out
}
