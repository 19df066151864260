//! Independent reference implementations used by the integration tests.
//! Each one follows the textbook definition directly and shares no code
//! with the library.

#![allow(dead_code)]

/// Patch probabilities straight from the kernel-density definition:
/// p_i proportional to the sum over j of exp(-|x_i - x_j|^2 / (2 h^2)).
pub fn kde_probs(coords: &[[f64; 2]], h: f64) -> Vec<f64> {
    let d: Vec<f64> = coords
        .iter()
        .map(|a| {
            coords
                .iter()
                .map(|b| {
                    let dx = (a[0] - b[0]) / h;
                    let dy = (a[1] - b[1]) / h;
                    (-(dx * dx + dy * dy) / 2.0).exp()
                })
                .sum()
        })
        .collect();
    let total: f64 = d.iter().sum();
    d.iter().map(|v| v / total).collect()
}

fn psi(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

/// Mann-Whitney AUC by enumerating every positive/negative pair.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                num += psi(scores[i], scores[j]);
                den += 1.0;
            }
        }
    }
    num / den
}

/// DeLong z for two correlated AUCs, placement values computed pair by pair.
pub fn delong_z(a: &[f64], b: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let place = |s: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let v10 = pos.iter().map(|&i| neg.iter().map(|&j| psi(s[i], s[j])).sum::<f64>() / n).collect();
        let v01 = neg.iter().map(|&j| pos.iter().map(|&i| psi(s[i], s[j])).sum::<f64>() / m).collect();
        (v10, v01)
    };
    let (a10, a01) = place(a);
    let (b10, b01) = place(b);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let cov = |x: &[f64], y: &[f64]| {
        let (mx, my) = (mean(x), mean(y));
        x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / (x.len() as f64 - 1.0)
    };
    let var = (cov(&a10, &a10) + cov(&b10, &b10) - 2.0 * cov(&a10, &b10)) / m
        + (cov(&a01, &a01) + cov(&b01, &b01) - 2.0 * cov(&a01, &b01)) / n;
    (mean(&a10) - mean(&b10)) / var.sqrt()
}

/// Harrell's C by scanning all ordered pairs.
pub fn c_index_pairs(times: &[f64], events: &[bool], risk: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..times.len() {
        for j in 0..times.len() {
            if times[i] < times[j] && events[i] {
                den += 1.0;
                num += psi(risk[i], risk[j]);
            }
        }
    }
    num / den
}

/// Efron log partial likelihood for one covariate, by direct summation.
pub fn efron_loglik_1d(times: &[f64], events: &[bool], x: &[f64], beta: f64) -> f64 {
    let mut uniq: Vec<f64> = times.iter().zip(events).filter(|(_, e)| **e).map(|(t, _)| *t).collect();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let mut ll = 0.0;
    for &t in &uniq {
        let dead: Vec<usize> = (0..times.len()).filter(|&i| times[i] == t && events[i]).collect();
        let risk: f64 = (0..times.len()).filter(|&i| times[i] >= t).map(|i| (beta * x[i]).exp()).sum();
        let tied: f64 = dead.iter().map(|&i| (beta * x[i]).exp()).sum();
        let d = dead.len() as f64;
        for &i in &dead {
            ll += beta * x[i];
        }
        for l in 0..dead.len() {
            ll -= (risk - l as f64 / d * tied).ln();
        }
    }
    ll
}

/// Maximiser of a unimodal function: coarse grid, then golden-section search.
pub fn argmax_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let steps = 4000;
    let dx = (hi - lo) / steps as f64;
    let best = (0..=steps)
        .map(|k| lo + k as f64 * dx)
        .max_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap();
    let (mut a, mut b) = (best - dx, best + dx);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    (a + b) / 2.0
}

/// Two-group log-rank chi-square summed over event times, written from the
/// observed-minus-expected definition.
pub fn logrank_chi2(ta: &[f64], ea: &[bool], tb: &[f64], eb: &[bool]) -> f64 {
    let mut times: Vec<f64> = ta.iter().zip(ea).chain(tb.iter().zip(eb)).filter(|(_, e)| **e).map(|(t, _)| *t).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut o_minus_e, mut var) = (0.0, 0.0);
    for &t in &times {
        let na = ta.iter().filter(|&&x| x >= t).count() as f64;
        let nb = tb.iter().filter(|&&x| x >= t).count() as f64;
        let da = ta.iter().zip(ea).filter(|(x, e)| **x == t && **e).count() as f64;
        let db = tb.iter().zip(eb).filter(|(x, e)| **x == t && **e).count() as f64;
        let (n, d) = (na + nb, da + db);
        o_minus_e += da - d * na / n;
        if n > 1.0 {
            var += d * (na / n) * (nb / n) * (n - d) / (n - 1.0);
        }
    }
    o_minus_e * o_minus_e / var
}
