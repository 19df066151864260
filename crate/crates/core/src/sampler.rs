//! Density-based patch sub-sampling and slide sub-sampling.
//!
//! Patch probabilities are proportional to a Gaussian kernel density estimate
//! evaluated at each patch center, with bandwidth equal to the patch side. The
//! kernel is left unnormalized: its constant cancels when the densities are
//! normalized, so density values are comparable only within one slide.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed;

/// Default bandwidth in level-0 pixels (the patch side length).
pub const DEFAULT_BANDWIDTH: f64 = 512.0;

/// Cutoff radius of the truncated kernel, in bandwidths.
pub const TRUNCATION_RADIUS: f64 = 6.0;

const PARALLEL_MIN_ROWS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KdeMode {
    #[default]
    Exact,
    /// Kernel contributions beyond [`TRUNCATION_RADIUS`] bandwidths are dropped.
    Truncated,
}

impl FromStr for KdeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" | "exact_kde" => Ok(KdeMode::Exact),
            "truncated" | "truncated_kde" => Ok(KdeMode::Truncated),
            _ => Err(Error::input(format!("unknown KDE mode {s:?} (exact or truncated)"))),
        }
    }
}

impl fmt::Display for KdeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KdeMode::Exact => "exact_kde",
            KdeMode::Truncated => "truncated_kde",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityProfile {
    /// Unnormalized kernel density at each patch center.
    pub densities: Vec<f64>,
    /// Sampling probability of each patch; sums to one.
    pub probs: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityProfile {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Converts a `n x 2` coordinate matrix into points.
pub fn points_from(coords: &Array2<f32>) -> Vec<[f64; 2]> {
    coords.rows().into_iter().map(|r| [r[0] as f64, r[1] as f64]).collect()
}

/// Pairwise (cascade) summation; error grows as O(log n).
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

fn exact_densities(scaled: &[[f64; 2]]) -> Vec<f64> {
    let row = |a: &[f64; 2]| {
        scaled
            .iter()
            .map(|b| {
                let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
                (-0.5 * (dx * dx + dy * dy)).exp()
            })
            .sum::<f64>()
    };
    if scaled.len() >= PARALLEL_MIN_ROWS {
        scaled.par_iter().map(row).collect()
    } else {
        scaled.iter().map(row).collect()
    }
}

fn truncated_densities(scaled: &[[f64; 2]]) -> Vec<f64> {
    let cell = |p: &[f64; 2]| {
        (
            (p[0] / TRUNCATION_RADIUS).floor() as i64,
            (p[1] / TRUNCATION_RADIUS).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in scaled.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let cutoff = TRUNCATION_RADIUS * TRUNCATION_RADIUS;
    let row = |a: &[f64; 2]| {
        let (cx, cy) = cell(a);
        let mut acc = 0.0;
        for gx in cx - 1..=cx + 1 {
            for gy in cy - 1..=cy + 1 {
                for &j in grid.get(&(gx, gy)).map(Vec::as_slice).unwrap_or(&[]) {
                    let b = &scaled[j];
                    let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
                    if d2 <= cutoff {
                        acc += (-0.5 * d2).exp();
                    }
                }
            }
        }
        acc
    };
    if scaled.len() >= PARALLEL_MIN_ROWS {
        scaled.par_iter().map(row).collect()
    } else {
        scaled.iter().map(row).collect()
    }
}

/// Sampling probabilities from the kernel density at each patch center (exact kernel).
pub fn patch_probabilities(coords: &[[f64; 2]], h: f64) -> Result<DensityProfile> {
    patch_probabilities_with(coords, h, KdeMode::Exact)
}

pub fn patch_probabilities_with(coords: &[[f64; 2]], h: f64, mode: KdeMode) -> Result<DensityProfile> {
    if coords.is_empty() {
        return Err(Error::input("need at least one patch coordinate"));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::input(format!("bandwidth must be positive and finite, got {h}")));
    }
    if let Some(i) = coords.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::input(format!("non-finite coordinate at patch {i}")));
    }
    // Center before scaling so large absolute offsets do not cost precision.
    let n = coords.len() as f64;
    let cx = coords.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = coords.iter().map(|p| p[1]).sum::<f64>() / n;
    let scaled: Vec<[f64; 2]> = coords.iter().map(|p| [(p[0] - cx) / h, (p[1] - cy) / h]).collect();
    let densities = match mode {
        KdeMode::Exact => exact_densities(&scaled),
        KdeMode::Truncated => truncated_densities(&scaled),
    };
    let total = pairwise_sum(&densities);
    let probs = densities.iter().map(|d| d / total).collect();
    Ok(DensityProfile {
        densities,
        probs,
        bandwidth: h,
    })
}

/// Number of patches drawn at `ratio`: `max(1, round(ratio * n))`.
pub fn sample_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n.max(1))
}

pub fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::input(format!("sampling ratio must lie in (0, 1], got {ratio}")))
    }
}

/// Probability-weighted sampling without replacement (exponential keys:
/// the `k` largest `ln(u_i) / p_i` form the sample). Returns sorted indices.
pub fn sample_patches(profile: &DensityProfile, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    check_ratio(ratio)?;
    let n = profile.len();
    if n == 0 {
        return Err(Error::input("empty density profile"));
    }
    let k = sample_count(n, ratio);
    if k == n {
        return Ok((0..n).collect());
    }
    let mut rng = seed::rng(seed);
    let mut keyed: Vec<(f64, usize)> = profile
        .probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let u = 1.0 - rng.random::<f64>();
            (u.ln() / p, i)
        })
        .collect();
    let by_key_desc = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    keyed.select_nth_unstable_by(k - 1, by_key_desc);
    let mut picked: Vec<usize> = keyed[..k].iter().map(|&(_, i)| i).collect();
    picked.sort_unstable();
    Ok(picked)
}

fn check_slide_count(n: usize, k: usize) -> Result<()> {
    if k < 1 || k > n {
        Err(Error::input(format!("slide count {k} must lie in [1, {n}]")))
    } else {
        Ok(())
    }
}

/// Equidistant section selection. `k = 1` takes the middle section; otherwise
/// the targets are `round(i (n-1) / (k-1))`, with collisions pushed forward
/// to the next unused index.
pub fn uniform_slide_indices(n: usize, k: usize) -> Result<Vec<usize>> {
    check_slide_count(n, k)?;
    if k == 1 {
        return Ok(vec![(n - 1) / 2]);
    }
    let step = (n - 1) as f64 / (k - 1) as f64;
    let mut used = vec![false; n];
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let mut j = ((i as f64 * step).round() as usize).min(n - 1);
        while used[j] {
            j = (j + 1) % n;
        }
        used[j] = true;
        out.push(j);
    }
    out.sort_unstable();
    Ok(out)
}

pub fn random_slide_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    check_slide_count(n, k)?;
    let mut out = index::sample(&mut seed::rng(seed), n, k).into_vec();
    out.sort_unstable();
    Ok(out)
}

/// How a patient's sections are chosen at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SlideStrategy {
    #[default]
    All,
    Uniform(usize),
    Random(usize),
}

impl SlideStrategy {
    /// Selected indices for a patient with `n` sections. Counts above `n`
    /// are clamped so that short series fall back to all sections.
    pub fn select(self, n: usize, seed: u64) -> Result<Vec<usize>> {
        match self {
            SlideStrategy::All => Ok((0..n).collect()),
            SlideStrategy::Uniform(k) => uniform_slide_indices(n, k.min(n)),
            SlideStrategy::Random(k) => random_slide_indices(n, k.min(n), seed),
        }
    }

    pub fn with_count(self, k: usize) -> Self {
        match self {
            SlideStrategy::All | SlideStrategy::Uniform(_) => SlideStrategy::Uniform(k),
            SlideStrategy::Random(_) => SlideStrategy::Random(k),
        }
    }
}

impl fmt::Display for SlideStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlideStrategy::All => f.write_str("all"),
            SlideStrategy::Uniform(k) => write!(f, "uniform:{k}"),
            SlideStrategy::Random(k) => write!(f, "random:{k}"),
        }
    }
}

impl FromStr for SlideStrategy {
    type Err = Error;

    /// Accepts `all`, `uniform`, `random`, `uniform:K` or `random:K`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, count) = match s.split_once(':') {
            Some((n, c)) => (
                n,
                c.parse::<usize>()
                    .map_err(|_| Error::input(format!("bad slide count in {s:?}")))?,
            ),
            None => (s, 1),
        };
        match name {
            "all" => Ok(SlideStrategy::All),
            "uniform" => Ok(SlideStrategy::Uniform(count)),
            "random" => Ok(SlideStrategy::Random(count)),
            _ => Err(Error::input(format!("unknown slide strategy {s:?}"))),
        }
    }
}

/// Selected patch indices per slide.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub ratio: f64,
    pub mode: KdeMode,
    pub entries: Vec<(String, Vec<usize>)>,
}

impl SamplingPlan {
    /// One line per slide: `slide_id<TAB>i,j,k`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, idx) in &self.entries {
            out.push_str(id);
            out.push('\t');
            let list: Vec<String> = idx.iter().map(usize::to_string).collect();
            out.push_str(&list.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse_entries(text: &str) -> Result<Vec<(String, Vec<usize>)>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                let (id, list) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::input(format!("plan line {}: missing tab", i + 1)))?;
                let idx = list
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::input(format!("plan line {}: bad index {s:?}", i + 1)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((id.to_string(), idx))
            })
            .collect()
    }
}
