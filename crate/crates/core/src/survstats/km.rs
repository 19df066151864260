//! Kaplan–Meier curves, the two-group log-rank test and median risk groups.

use std::fmt::Write as _;

use super::{chi2_1df_sf, median, Z_975};
use crate::error::{Error, Result};
use crate::plot::{Canvas, PALETTE};

/// Product-limit estimate. Index 0 is `t = 0` with survival 1; every later
/// entry is a distinct observed time (event or censoring).
#[derive(Debug, Clone, PartialEq)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    /// Number at risk just before each time.
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
}

impl KmCurve {
    /// Survival at time `t` (right-continuous step function).
    pub fn at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|&x| x <= t);
        if i == 0 {
            1.0
        } else {
            self.survival[i - 1]
        }
    }
}

fn check_times(times: &[f64], events: &[bool]) -> Result<()> {
    if times.len() != events.len() {
        return Err(Error::input("times and events differ in length"));
    }
    if times.is_empty() {
        return Err(Error::input("survival data is empty"));
    }
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::input(format!("invalid survival time {t}")));
    }
    Ok(())
}

/// Distinct times ascending with (events, removed) counts.
fn tabulate(times: &[f64], events: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    for i in order {
        match out.last_mut() {
            Some(last) if last.0 == times[i] => {
                last.1 += usize::from(events[i]);
                last.2 += 1;
            }
            _ => out.push((times[i], usize::from(events[i]), 1)),
        }
    }
    out
}

/// Product-limit estimator with a 95% band from Greenwood's variance on the
/// log-log scale.
pub fn km_estimate(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    check_times(times, events)?;
    let mut curve = KmCurve {
        times: vec![0.0],
        survival: vec![1.0],
        at_risk: vec![times.len()],
        events: vec![0],
        ci_low: vec![1.0],
        ci_high: vec![1.0],
    };
    let mut s = 1.0;
    let mut greenwood = 0.0;
    let mut n = times.len();
    for (t, d, removed) in tabulate(times, events) {
        if d > 0 {
            s *= 1.0 - d as f64 / n as f64;
            if n > d {
                greenwood += d as f64 / (n as f64 * (n - d) as f64);
            }
        }
        let (lo, hi) = band(s, greenwood);
        if t == 0.0 {
            // events at time zero replace the origin point
            curve.times.clear();
            curve.survival.clear();
            curve.at_risk.clear();
            curve.events.clear();
            curve.ci_low.clear();
            curve.ci_high.clear();
        }
        curve.times.push(t);
        curve.survival.push(s);
        curve.at_risk.push(n);
        curve.events.push(d);
        curve.ci_low.push(lo);
        curve.ci_high.push(hi);
        n -= removed;
    }
    Ok(curve)
}

fn band(s: f64, greenwood: f64) -> (f64, f64) {
    if s <= 0.0 {
        return (0.0, 0.0);
    }
    if s >= 1.0 || greenwood == 0.0 {
        return (s, s);
    }
    let ln_s = s.ln();
    let se = greenwood.sqrt() / ln_s.abs();
    let lo = s.powf((Z_975 * se).exp());
    let hi = s.powf((-Z_975 * se).exp());
    (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRank {
    pub chi2: f64,
    pub p: f64,
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
    /// No events overall or zero variance; chi2 = 0 and p = 1 are reported.
    pub degenerate: bool,
}

/// Two-group log-rank test with hypergeometric variance.
pub fn logrank_test(
    times_a: &[f64],
    events_a: &[bool],
    times_b: &[f64],
    events_b: &[bool],
) -> Result<LogRank> {
    check_times(times_a, events_a)?;
    check_times(times_b, events_b)?;
    let times: Vec<f64> = times_a.iter().chain(times_b).copied().collect();
    let events: Vec<bool> = events_a.iter().chain(events_b).copied().collect();
    let in_a: Vec<bool> = (0..times.len()).map(|i| i < times_a.len()).collect();

    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let (mut n_a, mut n) = (times_a.len() as f64, times.len() as f64);
    let (mut obs, mut exp, mut var) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let (mut d, mut d_a, mut r, mut r_a) = (0.0, 0.0, 0.0, 0.0);
        while i < order.len() && times[order[i]] == t {
            let k = order[i];
            r += 1.0;
            if in_a[k] {
                r_a += 1.0;
            }
            if events[k] {
                d += 1.0;
                if in_a[k] {
                    d_a += 1.0;
                }
            }
            i += 1;
        }
        if d > 0.0 {
            obs += d_a;
            exp += d * n_a / n;
            if n > 1.0 {
                var += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0);
            }
        }
        n -= r;
        n_a -= r_a;
    }
    if var <= 0.0 {
        return Ok(LogRank {
            chi2: 0.0,
            p: 1.0,
            observed_a: obs,
            expected_a: exp,
            variance: var,
            degenerate: true,
        });
    }
    let chi2 = (obs - exp).powi(2) / var;
    Ok(LogRank {
        chi2,
        p: chi2_1df_sf(chi2),
        observed_a: obs,
        expected_a: exp,
        variance: var,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RiskGroup {
    Low,
    High,
}

impl RiskGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskGroup::Low => "low",
            RiskGroup::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stratification {
    pub threshold: f64,
    pub groups: Vec<RiskGroup>,
}

/// Threshold at the training median; a score strictly above it is high risk.
pub fn stratify_by_median(training: &[f64], cohort: &[f64]) -> Result<Stratification> {
    let threshold = median(training)?;
    Ok(Stratification {
        threshold,
        groups: cohort
            .iter()
            .map(|&s| if s > threshold { RiskGroup::High } else { RiskGroup::Low })
            .collect(),
    })
}

/// Long-format CSV of one or more labelled curves.
pub fn km_csv(curves: &[(&str, &KmCurve)]) -> String {
    let mut out = String::from("time,survival,ci_low,ci_high,at_risk,group\n");
    for (label, c) in curves {
        for i in 0..c.times.len() {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{},{}",
                c.times[i], c.survival[i], c.ci_low[i], c.ci_high[i], c.at_risk[i], label
            );
        }
    }
    out
}

/// Step curves with shaded confidence bands. Output is deterministic.
pub fn km_svg(curves: &[(&str, &KmCurve)], title: &str, subtitle: &str) -> String {
    let x_max = curves
        .iter()
        .flat_map(|(_, c)| c.times.iter().copied())
        .fold(1.0f64, f64::max);
    let mut cv = Canvas::new(640.0, 420.0, title);
    cv.set_x(0.0, x_max, "Months");
    cv.set_y_left(0.0, 1.0, "Recurrence-free probability");
    cv.axes();
    for (k, (label, c)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let step = |ys: &[f64]| -> Vec<(f64, f64)> {
            let mut pts = Vec::with_capacity(2 * c.times.len() + 1);
            for i in 0..c.times.len() {
                if i > 0 {
                    pts.push((c.times[i], ys[i - 1]));
                }
                pts.push((c.times[i], ys[i]));
            }
            pts.push((x_max, *ys.last().unwrap()));
            pts
        };
        let upper = step(&c.ci_high);
        let mut lower = step(&c.ci_low);
        lower.reverse();
        let polygon: Vec<(f64, f64)> = upper.into_iter().chain(lower).collect();
        cv.band(&polygon, color);
        cv.polyline_left(&step(&c.survival), color, false);
        cv.legend(k, label, color);
    }
    if !subtitle.is_empty() {
        cv.note(subtitle);
    }
    cv.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_events_is_flat() {
        let c = km_estimate(&[1.0, 2.0, 3.0], &[false; 3]).unwrap();
        assert!(c.survival.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn hand_product_limit() {
        let c = km_estimate(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
        assert_eq!(c.times, vec![0.0, 1.0, 2.0, 3.0]);
        assert!((c.at(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.at(2.5), c.at(1.0));
        assert_eq!(c.at(3.0), 0.0);
        assert_eq!(c.at_risk, vec![3, 3, 2, 1]);
        assert_eq!((c.ci_low[3], c.ci_high[3]), (0.0, 0.0));
    }

    #[test]
    fn uncensored_matches_empirical() {
        let t = [4.0, 1.0, 3.0, 2.0, 5.0];
        let c = km_estimate(&t, &[true; 5]).unwrap();
        for &x in &[0.5, 1.0, 2.5, 4.0, 5.0] {
            let emp = t.iter().filter(|&&v| v > x).count() as f64 / 5.0;
            assert!((c.at(x) - emp).abs() < 1e-15);
        }
        for i in 0..c.times.len() {
            assert!(c.ci_low[i] <= c.survival[i] && c.survival[i] <= c.ci_high[i]);
        }
    }

    #[test]
    fn negative_time_rejected() {
        assert!(km_estimate(&[-1.0], &[true]).is_err());
    }

    #[test]
    fn logrank_identical_groups() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let e = [true, false, true, true];
        let r = logrank_test(&t, &e, &t, &e).unwrap();
        assert!(r.chi2.abs() < 1e-15);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn logrank_hand_case() {
        // A: 1,3 events; B: 2 event, 4 censored
        let r = logrank_test(&[1.0, 3.0], &[true, true], &[2.0, 4.0], &[true, false]).unwrap();
        // t=1: n=4, na=2, d=1 -> E=.5 V=.25; t=2: n=3, na=1 -> E=1/3 V=2/9; t=3: n=2, na=1 -> E=.5 V=.25
        let e = 0.5 + 1.0 / 3.0 + 0.5;
        let v = 0.25 + 2.0 / 9.0 + 0.25;
        assert!((r.chi2 - (2.0 - e) * (2.0 - e) / v).abs() < 1e-12);
        let s = logrank_test(&[2.0, 4.0], &[true, false], &[1.0, 3.0], &[true, true]).unwrap();
        assert!((s.chi2 - r.chi2).abs() < 1e-12);
    }

    #[test]
    fn logrank_without_events_is_degenerate() {
        let r = logrank_test(&[1.0], &[false], &[2.0], &[false]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn median_split() {
        let s = stratify_by_median(&[0.1, 0.2, 0.3, 0.4], &[0.3, 0.25, 0.1]).unwrap();
        assert_eq!(s.threshold, 0.25);
        assert_eq!(s.groups, vec![RiskGroup::High, RiskGroup::Low, RiskGroup::Low]);
    }

    #[test]
    fn svg_is_deterministic() {
        let c = km_estimate(&[1.0, 2.0, 3.0, 6.0], &[true, false, true, true]).unwrap();
        let a = km_svg(&[("low", &c)], "t", "p = 0.5");
        assert_eq!(a, km_svg(&[("low", &c)], "t", "p = 0.5"));
        assert!(a.starts_with("<svg"));
        assert!(km_csv(&[("low", &c)]).starts_with("time,survival,ci_low,ci_high,at_risk,group\n0,1.000000"));
    }
}
