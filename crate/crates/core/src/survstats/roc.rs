use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::normal_two_sided_p;
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_BOOTSTRAP_ITERATIONS: usize = 2000;

/// Per-patient scores with binary labels (`true` = positive).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCohort {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredCohort {
    pub fn new(ids: Vec<String>, scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if ids.len() != scores.len() || scores.len() != labels.len() {
            return Err(Error::input("ids, scores and labels differ in length"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::input("scores must be finite"));
        }
        Ok(ScoredCohort { ids, scores, labels })
    }

    pub fn pairs(&self) -> Vec<(f64, bool)> {
        self.scores.iter().copied().zip(self.labels.iter().copied()).collect()
    }

    pub fn auc(&self) -> Result<f64> {
        auc(&self.pairs())
    }
}

/// Midranks (1-based) of `values`, ties sharing the average rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn class_counts(data: &[(f64, bool)]) -> Result<(usize, usize)> {
    if data.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::input("scores must be finite"));
    }
    let pos = data.iter().filter(|(_, y)| *y).count();
    let neg = data.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::input(format!("AUC needs both classes ({pos} positive, {neg} negative)")));
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUC; tied positive/negative pairs count one half.
pub fn auc(data: &[(f64, bool)]) -> Result<f64> {
    let (pos, neg) = class_counts(data)?;
    let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
    let ranks = midranks(&scores);
    let rank_sum: f64 = ranks.iter().zip(data).filter(|(_, d)| d.1).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

fn percentile_sorted(v: &[f64], q: f64) -> f64 {
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Percentile bootstrap 95% CI of the AUC with patient-level resampling.
/// Resamples that miss a class are redrawn.
pub fn bootstrap_auc_ci(data: &[(f64, bool)], iterations: usize, seed: u64) -> Result<(f64, f64)> {
    if iterations == 0 {
        return Err(Error::input("bootstrap needs at least one iteration"));
    }
    class_counts(data)?;
    let n = data.len();
    let mut aucs = (0..iterations as u64)
        .into_par_iter()
        .map(|it| {
            let mut rng = seed::rng(seed::derive(seed, &[0xB007, it]));
            loop {
                let sample: Vec<(f64, bool)> = (0..n).map(|_| data[rng.random_range(0..n)]).collect();
                if sample.iter().any(|d| d.1) && sample.iter().any(|d| !d.1) {
                    return auc(&sample);
                }
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    aucs.sort_by(f64::total_cmp);
    Ok((percentile_sorted(&aucs, 0.025), percentile_sorted(&aucs, 0.975)))
}

/// Evaluation report written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub horizon: f64,
    pub seed: u64,
}

/// Paired comparison of two correlated ROC curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeLong {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p: f64,
    pub variance: f64,
    /// Zero variance of the AUC difference (e.g. identical score orderings).
    pub degenerate: bool,
}

/// Structural components: per-positive (V10) and per-negative (V01) placement values.
fn placements(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let all = midranks(scores);
    let pos_scores: Vec<f64> = scores.iter().zip(labels).filter(|(_, y)| **y).map(|(s, _)| *s).collect();
    let neg_scores: Vec<f64> = scores.iter().zip(labels).filter(|(_, y)| !**y).map(|(s, _)| *s).collect();
    let pos_rank = midranks(&pos_scores);
    let neg_rank = midranks(&neg_scores);
    let (n1, n0) = (pos_scores.len() as f64, neg_scores.len() as f64);
    let all_pos: Vec<f64> = all.iter().zip(labels).filter(|(_, y)| **y).map(|(r, _)| *r).collect();
    let all_neg: Vec<f64> = all.iter().zip(labels).filter(|(_, y)| !**y).map(|(r, _)| *r).collect();
    let v10 = all_pos.iter().zip(&pos_rank).map(|(a, p)| (a - p) / n0).collect();
    let v01 = all_neg.iter().zip(&neg_rank).map(|(a, q)| 1.0 - (a - q) / n1).collect();
    (v10, v01)
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

/// DeLong's test for two score sets over the same patients.
pub fn delong_test(a: &ScoredCohort, b: &ScoredCohort) -> Result<DeLong> {
    if a.ids != b.ids || a.labels != b.labels {
        return Err(Error::input("DeLong comparison needs identical patients and labels in the same order"));
    }
    let (n1, n0) = class_counts(&a.pairs())?;
    class_counts(&b.pairs())?;
    if n1 < 2 || n0 < 2 {
        return Err(Error::input("DeLong variance needs at least two patients per class"));
    }
    let (v10a, v01a) = placements(&a.scores, &a.labels);
    let (v10b, v01b) = placements(&b.scores, &b.labels);
    let auc_a = v10a.iter().sum::<f64>() / n1 as f64;
    let auc_b = v10b.iter().sum::<f64>() / n1 as f64;
    let s10 = covariance(&v10a, &v10a) + covariance(&v10b, &v10b) - 2.0 * covariance(&v10a, &v10b);
    let s01 = covariance(&v01a, &v01a) + covariance(&v01b, &v01b) - 2.0 * covariance(&v01a, &v01b);
    let variance = s10 / n1 as f64 + s01 / n0 as f64;
    let diff = auc_a - auc_b;
    if variance <= 1e-300 {
        if diff.abs() <= 1e-12 {
            return Ok(DeLong {
                auc_a,
                auc_b,
                z: 0.0,
                p: 1.0,
                variance: 0.0,
                degenerate: true,
            });
        }
        return Err(Error::numeric(format!(
            "DeLong variance is zero but AUCs differ ({auc_a} vs {auc_b})"
        )));
    }
    let z = diff / variance.sqrt();
    Ok(DeLong {
        auc_a,
        auc_b,
        z,
        p: normal_two_sided_p(z),
        variance,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(s: &[f64], y: &[u8]) -> Vec<(f64, bool)> {
        s.iter().zip(y).map(|(a, b)| (*a, *b == 1)).collect()
    }

    fn cohort(s: &[f64], y: &[u8]) -> ScoredCohort {
        ScoredCohort::new((0..s.len()).map(|i| i.to_string()).collect(), s.to_vec(), y.iter().map(|v| *v == 1).collect()).unwrap()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&pairs(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auc(&pairs(&[0.5, 0.5], &[1, 0])).unwrap(), 0.5);
        let a = auc(&pairs(&[0.8, 0.6, 0.6, 0.4, 0.3], &[1, 1, 0, 0, 1])).unwrap();
        assert!((a - 3.5 / 6.0).abs() < 1e-15);
        assert!(auc(&pairs(&[0.1, 0.2], &[1, 1])).is_err());
    }

    #[test]
    fn bootstrap_examples() {
        let perfect = pairs(&[0.9, 0.8, 0.7, 0.3, 0.2, 0.1], &[1, 1, 1, 0, 0, 0]);
        assert_eq!(bootstrap_auc_ci(&perfect, 200, 1).unwrap(), (1.0, 1.0));
        let noisy = pairs(&[0.9, 0.4, 0.7, 0.3, 0.6, 0.1, 0.5, 0.55], &[1, 1, 0, 0, 1, 0, 0, 1]);
        let (lo, hi) = bootstrap_auc_ci(&noisy, 500, 3).unwrap();
        assert!(lo <= hi && lo >= 0.0 && hi <= 1.0);
        assert_eq!(bootstrap_auc_ci(&noisy, 500, 3).unwrap(), (lo, hi));
        assert!(bootstrap_auc_ci(&noisy, 0, 3).is_err());
    }

    #[test]
    fn delong_self_comparison_and_antisymmetry() {
        let s = [0.8, 0.6, 0.6, 0.4, 0.3, 0.7];
        let y = [1, 1, 0, 0, 1, 0];
        let a = cohort(&s, &y);
        let r = delong_test(&a, &a).unwrap();
        assert_eq!((r.z, r.p, r.degenerate), (0.0, 1.0, true));

        let mono = cohort(&s.map(|v: f64| (3.0 * v).exp()), &y);
        let r = delong_test(&a, &mono).unwrap();
        assert_eq!((r.z, r.p), (0.0, 1.0));

        let b = cohort(&[0.2, 0.9, 0.1, 0.5, 0.6, 0.3], &y);
        let ab = delong_test(&a, &b).unwrap();
        let ba = delong_test(&b, &a).unwrap();
        assert!((ab.z + ba.z).abs() < 1e-15 && (ab.p - ba.p).abs() < 1e-15);
        assert!(ab.p > 0.0 && ab.p <= 1.0);
    }

    #[test]
    fn delong_rejects_mismatched_patients() {
        let a = cohort(&[0.1, 0.2, 0.3, 0.4], &[1, 0, 1, 0]);
        let mut b = a.clone();
        b.ids[0] = "other".into();
        assert!(delong_test(&a, &b).is_err());
        let mut c = a.clone();
        c.labels[0] = false;
        c.labels[1] = true;
        assert!(delong_test(&a, &c).is_err());
    }

    proptest! {
        #[test]
        fn complement_and_monotone_invariance(v in prop::collection::vec((0u8..20, any::<bool>()), 2..60)) {
            let mut data: Vec<(f64, bool)> = v.iter().map(|(s, y)| (*s as f64 / 7.0, *y)).collect();
            data[0].1 = true;
            data[1].1 = false;
            let a = auc(&data).unwrap();
            let flipped: Vec<_> = data.iter().map(|(s, y)| (*s, !y)).collect();
            prop_assert!((a + auc(&flipped).unwrap() - 1.0).abs() < 1e-12);
            let mono: Vec<_> = data.iter().map(|(s, y)| (s.powi(3) + 2.0 * s, *y)).collect();
            prop_assert!((a - auc(&mono).unwrap()).abs() < 1e-12);
        }
    }
}
