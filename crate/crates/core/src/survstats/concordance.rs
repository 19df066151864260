use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Concordance {
    pub c_index: f64,
    pub concordant: u64,
    pub discordant: u64,
    pub tied_risk: u64,
    pub comparable: u64,
}

/// Fenwick tree over risk ranks.
struct Counts(Vec<u64>);

impl Counts {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< i`.
    fn below(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's concordance index. A pair is comparable when the shorter time
/// ends in an event; the member failing first should carry the higher risk.
/// Tied risks count one half. Runs in O(n log n).
pub fn harrell_c(times: &[f64], events: &[bool], risks: &[f64]) -> Result<Concordance> {
    let n = times.len();
    if events.len() != n || risks.len() != n {
        return Err(Error::input("times, events and risks differ in length"));
    }
    if times.iter().chain(risks).any(|v| !v.is_finite()) {
        return Err(Error::input("times and risks must be finite"));
    }
    let mut distinct: Vec<f64> = risks.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let rank = |r: f64| distinct.partition_point(|&d| d < r);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let mut later = Counts(vec![0; distinct.len() + 1]);
    let mut inserted = 0u64;
    let (mut conc, mut disc, mut tied) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && times[order[j + 1]] == times[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if events[k] {
                let r = rank(risks[k]);
                let below = later.below(r);
                let at_or_below = later.below(r + 1);
                conc += below;
                tied += at_or_below - below;
                disc += inserted - at_or_below;
            }
        }
        for &k in &order[i..=j] {
            later.add(rank(risks[k]));
            inserted += 1;
        }
        i = j + 1;
    }
    let comparable = conc + disc + tied;
    if comparable == 0 {
        return Err(Error::input("no comparable pairs for the concordance index"));
    }
    Ok(Concordance {
        c_index: (conc as f64 + 0.5 * tied as f64) / comparable as f64,
        concordant: conc,
        discordant: disc,
        tied_risk: tied,
        comparable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scan(t: &[f64], e: &[bool], r: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..t.len() {
            for j in 0..t.len() {
                if e[i] && t[i] < t[j] {
                    den += 1.0;
                    if r[i] > r[j] {
                        num += 1.0;
                    } else if r[i] == r[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn examples() {
        assert_eq!(harrell_c(&[5.0, 10.0], &[true, true], &[0.8, 0.2]).unwrap().c_index, 1.0);
        let c = harrell_c(&[2.0, 4.0, 6.0, 8.0], &[true; 4], &[0.9, 0.7, 0.8, 0.1]).unwrap();
        assert!((c.c_index - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(c.comparable, 6);
        let neg = harrell_c(&[2.0, 4.0, 6.0, 8.0], &[true; 4], &[-0.9, -0.7, -0.8, -0.1]).unwrap();
        assert!((neg.c_index - 1.0 / 6.0).abs() < 1e-15);
        assert!(harrell_c(&[1.0, 2.0], &[false, false], &[0.1, 0.2]).is_err());
    }

    proptest! {
        #[test]
        fn matches_pair_scan(v in prop::collection::vec((0u8..15, any::<bool>(), 0u8..8), 2..80)) {
            let t: Vec<f64> = v.iter().map(|x| x.0 as f64).collect();
            let e: Vec<bool> = v.iter().map(|x| x.1).collect();
            let r: Vec<f64> = v.iter().map(|x| x.2 as f64 / 3.0).collect();
            match harrell_c(&t, &e, &r) {
                Ok(c) => prop_assert_eq!(c.c_index, scan(&t, &e, &r)),
                Err(_) => prop_assert!(scan(&t, &e, &r).is_nan()),
            }
        }
    }
}
