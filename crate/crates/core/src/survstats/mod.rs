//! Statistical evaluation: discrimination (AUC, bootstrap CI, DeLong),
//! Cox proportional hazards with Wald tests, Harrell's C, Kaplan–Meier,
//! log-rank and median-threshold risk groups.

mod concordance;
mod cox;
mod km;
mod roc;

pub use concordance::{harrell_c, Concordance};
pub use cox::{cox_design, cox_fit, cox_report, efron_loglik, CoxFit, CoxOptions, SurvivalRecord};
pub use km::{km_csv, km_estimate, km_svg, logrank_test, stratify_by_median, KmCurve, LogRank, RiskGroup, Stratification};
pub use roc::{auc, bootstrap_auc_ci, delong_test, AucReport, DeLong, ScoredCohort, DEFAULT_BOOTSTRAP_ITERATIONS};

use crate::error::{Error, Result};

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::input("median of an empty list"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("median of non-finite values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Two-sided p-value of a standard normal statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Upper tail of a one-degree-of-freedom chi-square.
pub fn chi2_1df_sf(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        libm::erfc((x / 2.0).sqrt())
    }
}

/// 97.5th percentile of the standard normal.
pub const Z_975: f64 = 1.959_963_984_540_054;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_rules() {
        assert_eq!(median(&[0.4, 0.1, 0.3, 0.2]).unwrap(), 0.25);
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn tail_probabilities() {
        let p = normal_two_sided_p(Z_975);
        assert!((p - 0.05).abs() < 1e-12, "{p}");
        assert_eq!(normal_two_sided_p(0.0), 1.0);
        assert!((chi2_1df_sf(3.841_458_820_694_124) - 0.05).abs() < 1e-12);
    }
}
