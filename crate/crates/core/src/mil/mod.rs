//! Gated-attention multiple-instance network.
//!
//! Each instance `x_i` is embedded as `h_i = relu(W_e x_i + b_e)`; attention
//! logits are `w . (tanh(V h_i + b_V) * sigmoid(U h_i + b_U)) + b_w`, softmaxed
//! over instances. The attention-weighted sum of embeddings feeds a two-way
//! head whose softmax gives (non-recurrence, recurrence) probabilities.
//!
//! Dropout, when enabled, masks the embeddings and the gated attention hidden
//! activations with a mask drawn from the supplied seed, so a forward and
//! backward pass under the same [`Dropout`] see the same mask.

mod adam;
mod checkpoint;

pub use adam::{accumulate_and_step, adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt::Debug;

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng as _;

use crate::cohort::LabelValue;
use crate::error::{Error, Result};
use crate::seed;

/// Floating-point type the network can run in (`f64` for training, `f32` opt-in).
pub trait Real: Float + FromPrimitive + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static {
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Index of the recurrence branch in the two-way output.
pub const BCR_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MilConfig {
    pub dim: usize,
    pub embed: usize,
    pub attn: usize,
}

impl MilConfig {
    pub fn new(dim: usize, embed: usize, attn: usize) -> Self {
        MilConfig { dim, embed, attn }
    }
}

impl Default for MilConfig {
    fn default() -> Self {
        MilConfig {
            dim: 1024,
            embed: 512,
            attn: 256,
        }
    }
}

/// All weights of the network. Weight matrices are stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct MilParams<F> {
    pub embed_w: Array2<F>,
    pub embed_b: Array1<F>,
    pub attn_v_w: Array2<F>,
    pub attn_v_b: Array1<F>,
    pub attn_u_w: Array2<F>,
    pub attn_u_b: Array1<F>,
    pub attn_w_w: Array2<F>,
    pub attn_w_b: Array1<F>,
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

/// Number of tensors in a parameter set; also the checkpoint tensor order.
pub const TENSOR_COUNT: usize = 10;

impl<F: Real> MilParams<F> {
    pub fn zeros(cfg: MilConfig) -> Self {
        let MilConfig { dim, embed, attn } = cfg;
        MilParams {
            embed_w: Array2::zeros((embed, dim)),
            embed_b: Array1::zeros(embed),
            attn_v_w: Array2::zeros((attn, embed)),
            attn_v_b: Array1::zeros(attn),
            attn_u_w: Array2::zeros((attn, embed)),
            attn_u_b: Array1::zeros(attn),
            attn_w_w: Array2::zeros((1, attn)),
            attn_w_b: Array1::zeros(1),
            head_w: Array2::zeros((2, embed)),
            head_b: Array1::zeros(2),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(cfg: MilConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = seed::rng(seed);
        for w in [&mut p.embed_w, &mut p.attn_v_w, &mut p.attn_u_w, &mut p.attn_w_w, &mut p.head_w] {
            let (out, inp) = w.dim();
            let limit = (6.0 / (out + inp) as f64).sqrt();
            w.mapv_inplace(|_| F::from_f64_lossy(rng.random_range(-limit..limit)));
        }
        p
    }

    pub fn config(&self) -> MilConfig {
        MilConfig {
            dim: self.embed_w.ncols(),
            embed: self.embed_w.nrows(),
            attn: self.attn_v_w.nrows(),
        }
    }

    /// Matrix products may come back column-major; flat access needs row-major.
    fn make_standard_layout(&mut self) {
        for m in [&mut self.embed_w, &mut self.attn_v_w, &mut self.attn_u_w, &mut self.attn_w_w, &mut self.head_w] {
            if !m.is_standard_layout() {
                *m = m.as_standard_layout().into_owned();
            }
        }
    }

    /// Flat views in checkpoint order.
    pub fn slices(&self) -> [&[F]; TENSOR_COUNT] {
        [
            self.embed_w.as_slice().expect("standard layout"),
            self.embed_b.as_slice().expect("standard layout"),
            self.attn_v_w.as_slice().expect("standard layout"),
            self.attn_v_b.as_slice().expect("standard layout"),
            self.attn_u_w.as_slice().expect("standard layout"),
            self.attn_u_b.as_slice().expect("standard layout"),
            self.attn_w_w.as_slice().expect("standard layout"),
            self.attn_w_b.as_slice().expect("standard layout"),
            self.head_w.as_slice().expect("standard layout"),
            self.head_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [F]; TENSOR_COUNT] {
        [
            self.embed_w.as_slice_mut().expect("standard layout"),
            self.embed_b.as_slice_mut().expect("standard layout"),
            self.attn_v_w.as_slice_mut().expect("standard layout"),
            self.attn_v_b.as_slice_mut().expect("standard layout"),
            self.attn_u_w.as_slice_mut().expect("standard layout"),
            self.attn_u_b.as_slice_mut().expect("standard layout"),
            self.attn_w_w.as_slice_mut().expect("standard layout"),
            self.attn_w_b.as_slice_mut().expect("standard layout"),
            self.head_w.as_slice_mut().expect("standard layout"),
            self.head_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.slices()
            .iter()
            .zip(other.slices())
            .all(|(a, b)| a.len() == b.len())
            && self.config() == other.config()
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y * scale;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    pub fn cast<G: Real>(&self) -> MilParams<G> {
        let c = |a: &Array2<F>| a.mapv(|v| G::from_f64_lossy(v.to_f64().unwrap()));
        let c1 = |a: &Array1<F>| a.mapv(|v| G::from_f64_lossy(v.to_f64().unwrap()));
        MilParams {
            embed_w: c(&self.embed_w),
            embed_b: c1(&self.embed_b),
            attn_v_w: c(&self.attn_v_w),
            attn_v_b: c1(&self.attn_v_b),
            attn_u_w: c(&self.attn_u_w),
            attn_u_b: c1(&self.attn_u_b),
            attn_w_w: c(&self.attn_w_w),
            attn_w_b: c1(&self.attn_w_b),
            head_w: c(&self.head_w),
            head_b: c1(&self.head_b),
        }
    }
}

/// A patient's pooled instances with its endpoint label.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientBag<F> {
    pub instances: Array2<F>,
    pub label: LabelValue,
}

impl<F: Real> PatientBag<F> {
    pub fn new(instances: Array2<F>, label: LabelValue) -> Result<Self> {
        if instances.nrows() == 0 {
            return Err(Error::input("bag needs at least one instance"));
        }
        if instances.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("bag contains non-finite values"));
        }
        Ok(PatientBag { instances, label })
    }

    fn target(&self) -> Result<usize> {
        match self.label {
            LabelValue::Positive => Ok(BCR_CLASS),
            LabelValue::Negative => Ok(1 - BCR_CLASS),
            LabelValue::Excluded => Err(Error::input("cannot train on an excluded-label bag")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Dropout {
    #[default]
    Off,
    On { rate: f64, seed: u64 },
}

struct Masks<F> {
    embed: Array2<F>,
    attn: Array2<F>,
}

fn masks<F: Real>(dropout: Dropout, m: usize, cfg: MilConfig) -> Result<Option<Masks<F>>> {
    match dropout {
        Dropout::Off => Ok(None),
        Dropout::On { rate, .. } if !(0.0..1.0).contains(&rate) => {
            Err(Error::input(format!("dropout rate must lie in [0, 1), got {rate}")))
        }
        Dropout::On { rate, seed } => {
            let mut rng = seed::rng(seed);
            let keep = F::from_f64_lossy(1.0 / (1.0 - rate));
            let mut draw = |shape: (usize, usize)| {
                Array2::from_shape_simple_fn(shape, || {
                    if rng.random::<f64>() < rate {
                        F::zero()
                    } else {
                        keep
                    }
                })
            };
            let embed = draw((m, cfg.embed));
            let attn = draw((m, cfg.attn));
            Ok(Some(Masks { embed, attn }))
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn softmax<F: Real>(v: &Array1<F>) -> Array1<F> {
    let max = v.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let e = v.mapv(|x| (x - max).exp());
    let s = e.sum();
    e / s
}

struct Cache<F> {
    pre: Array2<F>,
    h: Array2<F>,
    av: Array2<F>,
    au: Array2<F>,
    g: Array2<F>,
    attention: Array1<F>,
    pooled: Array1<F>,
    logits: Array1<F>,
    probs: Array1<F>,
    masks: Option<Masks<F>>,
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MilOutput<F> {
    /// `(non-recurrence, recurrence)` probabilities.
    pub probs: [F; 2],
    pub attention: Vec<F>,
}

impl<F: Real> MilOutput<F> {
    pub fn bcr_prob(&self) -> F {
        self.probs[BCR_CLASS]
    }
}

fn run<F: Real>(params: &MilParams<F>, x: ArrayView2<F>, dropout: Dropout) -> Result<Cache<F>> {
    let cfg = params.config();
    if x.ncols() != cfg.dim {
        return Err(Error::input(format!(
            "instance width {} does not match model dim {}",
            x.ncols(),
            cfg.dim
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::input("bag needs at least one instance"));
    }
    let masks = masks::<F>(dropout, x.nrows(), cfg)?;

    let pre = x.dot(&params.embed_w.t()) + &params.embed_b;
    let mut h = pre.mapv(|v| v.max(F::zero()));
    if let Some(mk) = &masks {
        h.zip_mut_with(&mk.embed, |a, &m| *a = *a * m);
    }
    let av = (h.dot(&params.attn_v_w.t()) + &params.attn_v_b).mapv(|v| v.tanh());
    let au = (h.dot(&params.attn_u_w.t()) + &params.attn_u_b).mapv(sigmoid);
    let mut g = &av * &au;
    if let Some(mk) = &masks {
        g.zip_mut_with(&mk.attn, |a, &m| *a = *a * m);
    }
    let scores = g.dot(&params.attn_w_w.row(0)) + params.attn_w_b[0];
    let attention = softmax(&scores);
    let pooled = h.t().dot(&attention);
    let logits = params.head_w.dot(&pooled) + &params.head_b;
    let probs = softmax(&logits);
    Ok(Cache {
        pre,
        h,
        av,
        au,
        g,
        attention,
        pooled,
        logits,
        probs,
        masks,
    })
}

/// Forward pass over a bag of instances (`m x dim`).
pub fn forward<F: Real>(params: &MilParams<F>, instances: ArrayView2<F>, dropout: Dropout) -> Result<MilOutput<F>> {
    let c = run(params, instances, dropout)?;
    Ok(MilOutput {
        probs: [c.probs[0], c.probs[1]],
        attention: c.attention.to_vec(),
    })
}

/// Recurrence-class probability with dropout off.
pub fn predict<F: Real>(params: &MilParams<F>, instances: ArrayView2<F>) -> Result<F> {
    Ok(forward(params, instances, Dropout::Off)?.bcr_prob())
}

/// Cross-entropy loss and its exact gradient under the dropout mask implied by `dropout`.
pub fn loss_and_grad<F: Real>(
    params: &MilParams<F>,
    bag: &PatientBag<F>,
    dropout: Dropout,
) -> Result<(F, MilParams<F>)> {
    let target = bag.target()?;
    let x = bag.instances.view();
    let c = run(params, x, dropout)?;
    let cfg = params.config();

    let max = c.logits.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let lse = max + c.logits.mapv(|v| (v - max).exp()).sum().ln();
    let loss = lse - c.logits[target];

    let mut grads = MilParams::zeros(cfg);

    // head
    let mut d_logits = c.probs.clone();
    d_logits[target] = d_logits[target] - F::one();
    grads.head_w = outer(&d_logits, &c.pooled);
    grads.head_b = d_logits.clone();
    let d_pooled = params.head_w.t().dot(&d_logits);

    // attention softmax
    let d_att = c.h.dot(&d_pooled);
    let mean = c.attention.dot(&d_att);
    let d_scores = Zip::from(&c.attention)
        .and(&d_att)
        .map_collect(|&a, &d| a * (d - mean));

    // pooling contributes a_i * d_pooled to each embedding row
    let mut d_h = outer(&c.attention, &d_pooled);

    // attention scorer
    grads.attn_w_w = c.g.t().dot(&d_scores).insert_axis(Axis(0));
    grads.attn_w_b = Array1::from_elem(1, d_scores.sum());
    let mut d_g = outer(&d_scores, &params.attn_w_w.row(0).to_owned());
    if let Some(mk) = &c.masks {
        d_g.zip_mut_with(&mk.attn, |a, &m| *a = *a * m);
    }
    let d_pre_v = Zip::from(&d_g)
        .and(&c.av)
        .and(&c.au)
        .map_collect(|&dg, &v, &u| dg * u * (F::one() - v * v));
    let d_pre_u = Zip::from(&d_g)
        .and(&c.av)
        .and(&c.au)
        .map_collect(|&dg, &v, &u| dg * v * u * (F::one() - u));
    grads.attn_v_w = d_pre_v.t().dot(&c.h);
    grads.attn_v_b = d_pre_v.sum_axis(Axis(0));
    grads.attn_u_w = d_pre_u.t().dot(&c.h);
    grads.attn_u_b = d_pre_u.sum_axis(Axis(0));
    d_h = d_h + d_pre_v.dot(&params.attn_v_w) + d_pre_u.dot(&params.attn_u_w);

    // embedding
    if let Some(mk) = &c.masks {
        d_h.zip_mut_with(&mk.embed, |a, &m| *a = *a * m);
    }
    Zip::from(&mut d_h).and(&c.pre).for_each(|d, &p| {
        if p <= F::zero() {
            *d = F::zero();
        }
    });
    grads.embed_w = d_h.t().dot(&x);
    grads.embed_b = d_h.sum_axis(Axis(0));

    grads.make_standard_layout();
    debug_assert!(grads.same_shape(params));
    Ok((loss, grads))
}

fn outer<F: Real>(a: &Array1<F>, b: &Array1<F>) -> Array2<F> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row)
}
