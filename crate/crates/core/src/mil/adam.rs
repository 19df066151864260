use rayon::prelude::*;

use super::{loss_and_grad, Dropout, MilParams, PatientBag, Real};
use crate::error::{Error, Result};

/// Adam hyper-parameters. Weight decay is coupled: `wd * theta` is added to
/// the gradient before the moment updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-6,
            weight_decay: 5e-7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub m: MilParams<F>,
    pub v: MilParams<F>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig, like: &MilParams<F>) -> Self {
        AdamState {
            config,
            m: MilParams::zeros(like.config()),
            v: MilParams::zeros(like.config()),
            t: 0,
        }
    }
}

/// One Adam update with bias correction. Fails without touching `state` or
/// `params` if any gradient entry is non-finite.
pub fn adam_step<F: Real>(state: &mut AdamState<F>, params: &mut MilParams<F>, grads: &MilParams<F>) -> Result<()> {
    if !grads.same_shape(params) || !state.m.same_shape(params) {
        return Err(Error::input("gradient, moment and parameter shapes differ"));
    }
    if !grads.all_finite() {
        return Err(Error::numeric("non-finite gradient"));
    }
    let c = state.config;
    let f = F::from_f64_lossy;
    let t = state.t + 1;
    let (b1, b2) = (f(c.beta1), f(c.beta2));
    let bias1 = f(1.0 - c.beta1.powf(t as f64));
    let bias2 = f(1.0 - c.beta2.powf(t as f64));
    let (lr, wd, eps) = (f(c.lr), f(c.weight_decay), f(c.eps));
    let one = F::one();

    for (((p, g), m), v) in params
        .slices_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(state.m.slices_mut())
        .zip(state.v.slices_mut())
    {
        for i in 0..p.len() {
            let gi = g[i] + wd * p[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.t = t;
    Ok(())
}

fn pairwise_mean<F: Real>(grads: &[MilParams<F>]) -> MilParams<F> {
    fn sum<F: Real>(g: &[MilParams<F>]) -> MilParams<F> {
        if g.len() == 1 {
            return g[0].clone();
        }
        let mid = g.len() / 2;
        let mut left = sum(&g[..mid]);
        left.add_scaled(&sum(&g[mid..]), F::one());
        left
    }
    let mut total = sum(grads);
    total.scale(F::one() / F::from_f64_lossy(grads.len() as f64));
    total
}

/// Computes every bag's gradient (in parallel), averages them with a fixed
/// pairwise reduction, and applies a single Adam step. Returns the mean loss.
pub fn accumulate_and_step<F: Real>(
    state: &mut AdamState<F>,
    params: &mut MilParams<F>,
    batch: &[(&PatientBag<F>, Dropout)],
) -> Result<F> {
    if batch.is_empty() {
        return Err(Error::input("accumulation group is empty"));
    }
    let frozen: &MilParams<F> = params;
    let results: Vec<(F, MilParams<F>)> = batch
        .par_iter()
        .map(|(bag, d)| loss_and_grad(frozen, bag, *d))
        .collect::<Result<_>>()?;
    let (losses, grads): (Vec<F>, Vec<MilParams<F>>) = results.into_iter().unzip();
    let mean = pairwise_mean(&grads);
    adam_step(state, params, &mean)?;
    let n = F::from_f64_lossy(losses.len() as f64);
    Ok(losses.into_iter().fold(F::zero(), |a, b| a + b) / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::LabelValue;
    use crate::mil::MilConfig;
    use ndarray::Array2;
    use rand_distr::{Distribution, StandardNormal};

    fn setup(seed: u64) -> (MilParams<f64>, Vec<PatientBag<f64>>) {
        let p = MilParams::init(MilConfig::new(6, 5, 3), seed);
        let mut rng = crate::seed::rng(seed + 1);
        let bags = (0..16)
            .map(|i| {
                let m = 1 + i % 5;
                let label = if i % 3 == 0 { LabelValue::Positive } else { LabelValue::Negative };
                PatientBag::new(Array2::from_shape_simple_fn((m, 6), || StandardNormal.sample(&mut rng)), label).unwrap()
            })
            .collect();
        (p, bags)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut p, _) = setup(1);
        let before = p.clone();
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut st = AdamState::new(cfg, &p);
        let zero = MilParams::zeros(p.config());
        adam_step(&mut st, &mut p, &zero).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let (mut p, _) = setup(2);
        let before = p.clone();
        let cfg = AdamConfig { lr: 1e-3, weight_decay: 0.0, ..AdamConfig::default() };
        let mut st = AdamState::new(cfg, &p);
        let mut g = MilParams::zeros(p.config());
        g.head_b[0] = 0.37;
        g.head_b[1] = -2e-7;
        adam_step(&mut st, &mut p, &g).unwrap();
        // m_hat = g and v_hat = g^2 after bias correction
        for (i, gi) in [0.37f64, -2e-7].into_iter().enumerate() {
            let want = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((p.head_b[i] - before.head_b[i] - want).abs() < 1e-15);
        }
        assert!((p.head_b[0] - before.head_b[0] + 1e-3).abs() < 1e-10);
        assert_eq!(p.embed_w, before.embed_w);
    }

    #[test]
    fn decay_shrinks_parameters() {
        let (mut p, _) = setup(3);
        let norm = |p: &MilParams<f64>| p.slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum::<f64>();
        let cfg = AdamConfig { lr: 1e-3, weight_decay: 1e-2, ..AdamConfig::default() };
        let mut st = AdamState::new(cfg, &p);
        let zero = MilParams::zeros(p.config());
        let n0 = norm(&p);
        adam_step(&mut st, &mut p, &zero).unwrap();
        let n1 = norm(&p);
        adam_step(&mut st, &mut p, &zero).unwrap();
        let n2 = norm(&p);
        assert!(n0 > n1 && n1 > n2);
    }

    #[test]
    fn non_finite_gradient_fails_fast() {
        let (mut p, _) = setup(4);
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let mut g = MilParams::zeros(p.config());
        g.attn_u_w[[0, 0]] = f64::NAN;
        assert!(matches!(adam_step(&mut st, &mut p, &g), Err(Error::Numeric(_))));
        assert_eq!((p, st.t), (before, 0));
    }

    #[test]
    fn accumulation_equals_step_on_mean_gradient() {
        let (p0, bags) = setup(5);
        let cfg = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
        let d = |i: usize| Dropout::On { rate: 0.25, seed: i as u64 };

        let mut p_acc = p0.clone();
        let mut st_acc = AdamState::new(cfg, &p0);
        let batch: Vec<_> = bags.iter().enumerate().map(|(i, b)| (b, d(i))).collect();
        accumulate_and_step(&mut st_acc, &mut p_acc, &batch).unwrap();

        let mut mean = MilParams::zeros(p0.config());
        for (i, b) in bags.iter().enumerate().rev() {
            mean.add_scaled(&loss_and_grad(&p0, b, d(i)).unwrap().1, 1.0 / 16.0);
        }
        let mut p_ref = p0.clone();
        let mut st_ref = AdamState::new(cfg, &p0);
        adam_step(&mut st_ref, &mut p_ref, &mean).unwrap();

        for (a, b) in p_acc.slices().iter().zip(p_ref.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_bags_match_single_bag_step() {
        let (p0, bags) = setup(6);
        let cfg = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
        let batch: Vec<_> = (0..16).map(|_| (&bags[2], Dropout::Off)).collect();
        let mut p_acc = p0.clone();
        let mut st = AdamState::new(cfg, &p0);
        accumulate_and_step(&mut st, &mut p_acc, &batch).unwrap();

        let mut p_one = p0.clone();
        let mut st1 = AdamState::new(cfg, &p0);
        adam_step(&mut st1, &mut p_one, &loss_and_grad(&p0, &bags[2], Dropout::Off).unwrap().1).unwrap();
        for (a, b) in p_acc.slices().iter().zip(p_one.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn short_tail_group_averages_over_its_length() {
        let (p0, bags) = setup(7);
        let cfg = AdamConfig { lr: 1e-3, weight_decay: 0.0, ..AdamConfig::default() };
        let batch: Vec<_> = bags[..3].iter().map(|b| (b, Dropout::Off)).collect();
        let mut p_acc = p0.clone();
        let mut st = AdamState::new(cfg, &p0);
        accumulate_and_step(&mut st, &mut p_acc, &batch).unwrap();

        let mut mean = MilParams::zeros(p0.config());
        for b in &bags[..3] {
            mean.add_scaled(&loss_and_grad(&p0, b, Dropout::Off).unwrap().1, 1.0 / 3.0);
        }
        let mut p_ref = p0.clone();
        let mut st_ref = AdamState::new(cfg, &p0);
        adam_step(&mut st_ref, &mut p_ref, &mean).unwrap();
        assert!(p_acc
            .slices()
            .iter()
            .zip(p_ref.slices())
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)));
        assert!(accumulate_and_step::<f64>(&mut st, &mut p_acc, &[]).is_err());
    }
}
