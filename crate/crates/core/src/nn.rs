//! Dense layers, the conditional noise-prediction network, and Adam.
//!
//! Everything is generic over the float type so gradient checks can run in
//! double precision while training runs in single precision. Backward passes
//! are written out by hand against cached forward activations.

use std::fmt::Debug;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{GoalCondition, GoalKind};
use crate::instr::{Lexicon, Primitive, PrimitiveKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("token `{0}` is not in the lexicon")]
    UnknownToken(String),
    #[error("diffusion step {0} outside [1, {1}]")]
    StepOutOfRange(usize, usize),
}

pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + FromPrimitive + ToPrimitive + Debug + std::ops::AddAssign + std::ops::SubAssign + std::ops::MulAssign + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

fn c<S: Scalar>(v: f64) -> S {
    S::from_f64(v).unwrap()
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<(), NnError> {
    if expected == got {
        Ok(())
    } else {
        Err(NnError::DimensionMismatch { what, expected, got })
    }
}

fn randn<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<S> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        c(z * std)
    })
}

/// Visitor access to every parameter tensor, in a fixed order.
pub trait ParamSet<S: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&'static str, &[usize], &[S]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&'static str, &[usize], &mut [S]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    fn flatten(&self) -> Vec<Vec<S>> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, d| out.push(d.to_vec()));
        out
    }

    fn fill_zero(&mut self) {
        self.visit_mut(&mut |_, _, d| d.iter_mut().for_each(|x| *x = S::zero()));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, d| ok &= d.iter().all(|x| x.is_finite()));
        ok
    }
}

fn visit2<S: Scalar>(
    name: &'static str,
    a: &Array2<S>,
    f: &mut dyn FnMut(&'static str, &[usize], &[S]),
) {
    f(name, a.shape(), a.as_slice().expect("standard layout"));
}

fn visit2_mut<S: Scalar>(
    name: &'static str,
    a: &mut Array2<S>,
    f: &mut dyn FnMut(&'static str, &[usize], &mut [S]),
) {
    let shape = a.shape().to_vec();
    f(name, &shape, a.as_slice_mut().expect("standard layout"));
}

fn visit1<S: Scalar>(
    name: &'static str,
    a: &Array1<S>,
    f: &mut dyn FnMut(&'static str, &[usize], &[S]),
) {
    f(name, a.shape(), a.as_slice().expect("standard layout"));
}

fn visit1_mut<S: Scalar>(
    name: &'static str,
    a: &mut Array1<S>,
    f: &mut dyn FnMut(&'static str, &[usize], &mut [S]),
) {
    let shape = a.shape().to_vec();
    f(name, &shape, a.as_slice_mut().expect("standard layout"));
}

/// Affine map `y = x W^T + b` over row batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: randn(outputs, inputs, (1.0 / inputs as f64).sqrt(), rng),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &ArrayView2<S>) -> Array2<S> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulate parameter gradients into `grad` and return dL/dx.
    pub fn backward(&self, x: &ArrayView2<S>, dy: &Array2<S>, grad: &mut Linear<S>) -> Array2<S> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

/// Linear layers with SiLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S> {
    pub layers: Vec<Linear<S>>,
}

pub struct MlpCache<S> {
    /// Input to each layer.
    inputs: Vec<Array2<S>>,
    /// Pre-activation output of every hidden layer.
    pre: Vec<Array2<S>>,
}

impl<S: Scalar> Mlp<S> {
    /// `sizes` = [input, hidden..., output]. With `zero_last` the output layer
    /// starts at zero so the initial prediction is exactly zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], zero_last: bool, rng: &mut R) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                if zero_last && i == n - 1 {
                    Linear::zeros(sizes[i], sizes[i + 1])
                } else {
                    Linear::new(sizes[i], sizes[i + 1], rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn forward(&self, x: Array2<S>) -> Array2<S> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h.view());
            if i < last {
                h.mapv_inplace(silu);
            }
        }
        h
    }

    pub fn forward_cached(&self, x: Array2<S>) -> (Array2<S>, MlpCache<S>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h.view());
            inputs.push(h);
            if i < last {
                h = z.mapv(silu);
                pre.push(z);
            } else {
                h = z;
            }
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward(&self, cache: &MlpCache<S>, d_out: &Array2<S>, grad: &mut Mlp<S>) -> Array2<S> {
        let mut d = d_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                d.zip_mut_with(&cache.pre[i], |g, &z| *g = *g * silu_grad(z));
            }
            d = self.layers[i].backward(&cache.inputs[i].view(), &d, &mut grad.layers[i]);
        }
        d
    }
}

impl<S: Scalar> ParamSet<S> for Mlp<S> {
    fn visit(&self, f: &mut dyn FnMut(&'static str, &[usize], &[S])) {
        for l in &self.layers {
            visit2("mlp.weight", &l.weight, f);
            visit1("mlp.bias", &l.bias, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&'static str, &[usize], &mut [S])) {
        for l in &mut self.layers {
            visit2_mut("mlp.weight", &mut l.weight, f);
            visit1_mut("mlp.bias", &mut l.bias, f);
        }
    }
}

/// Row index in the kind-embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CondKind {
    Action = 0,
    Relation = 1,
    GoalImage = 2,
    GoalSketch = 3,
    Null = 4,
}

pub const COND_KINDS: usize = 5;

/// Network-side view of one primitive.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Null,
    Language { kind: CondKind, token_ids: Vec<usize> },
    Goal(GoalCondition),
}

impl Condition {
    pub fn from_primitive(p: &Primitive, lex: &Lexicon) -> Result<Condition, NnError> {
        let kind = match p.kind {
            PrimitiveKind::Action => CondKind::Action,
            PrimitiveKind::Relation => CondKind::Relation,
            _ => {
                return Err(NnError::UnknownToken(format!(
                    "{} primitive needs its goal payload",
                    p.kind
                )))
            }
        };
        let token_ids = p
            .tokens
            .iter()
            .map(|t| lex.token_id(t).ok_or_else(|| NnError::UnknownToken(t.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Condition::Language { kind, token_ids })
    }

    pub fn kind(&self) -> CondKind {
        match self {
            Condition::Null => CondKind::Null,
            Condition::Language { kind, .. } => *kind,
            Condition::Goal(g) => match g.kind {
                GoalKind::GoalImage => CondKind::GoalImage,
                GoalKind::GoalSketch => CondKind::GoalSketch,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserShape {
    pub vocab: usize,
    pub embed: usize,
    pub time_features: usize,
    pub time_embed: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub traj_dim: usize,
    pub frame_dim: usize,
    pub sketch_dim: usize,
    pub steps: usize,
}

impl DenoiserShape {
    pub fn input_dim(&self) -> usize {
        self.traj_dim + self.embed + self.time_embed + self.frame_dim
    }
}

/// Sinusoidal features of a diffusion step: sines then cosines over
/// geometrically spaced frequencies.
pub fn time_features<S: Scalar>(t: usize, width: usize) -> Vec<S> {
    let half = width / 2;
    let mut out = vec![S::zero(); width];
    for k in 0..half {
        let freq = (-(1000f64).ln() * k as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[k] = c(arg.sin());
        out[half + k] = c(arg.cos());
    }
    out
}

/// Conditional noise-prediction network `eps(tau_t, t | cond, x0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<S> {
    pub shape: DenoiserShape,
    pub tokens: Array2<S>,
    pub kinds: Array2<S>,
    pub goal_image: Array2<S>,
    pub goal_sketch: Array2<S>,
    pub time: Linear<S>,
    pub mlp: Mlp<S>,
    /// Per-step elementwise gain on the MLP output.
    pub scale: Array2<S>,
    /// Per-step elementwise gain on the noisy input, added to the output.
    pub skip: Array2<S>,
    /// Per-step elementwise gain on the first frame tiled over the horizon.
    pub anchor: Array2<S>,
}

/// One batch of denoiser inputs; row `i` uses `conds[i]`.
pub struct DenoiseBatch<'a, S> {
    pub noisy: ArrayView2<'a, S>,
    pub steps: &'a [usize],
    pub conds: &'a [&'a Condition],
    pub first_frames: ArrayView2<'a, S>,
}

pub struct DenoiseCache<S> {
    mlp: MlpCache<S>,
    time_in: Array2<S>,
    raw: Array2<S>,
}

impl<S: Scalar> Denoiser<S> {
    pub fn new<R: Rng + ?Sized>(shape: DenoiserShape, rng: &mut R) -> Self {
        let e = shape.embed;
        let mut sizes = vec![shape.input_dim()];
        sizes.extend(std::iter::repeat_n(shape.hidden, shape.hidden_layers));
        sizes.push(shape.traj_dim);
        Self {
            tokens: randn(shape.vocab, e, 1.0, rng),
            kinds: randn(COND_KINDS, e, 1.0, rng),
            goal_image: randn(e, shape.frame_dim, (1.0 / shape.frame_dim as f64).sqrt(), rng),
            goal_sketch: randn(e, shape.sketch_dim, (1.0 / shape.sketch_dim as f64).sqrt(), rng),
            time: Linear::new(shape.time_features, shape.time_embed, rng),
            mlp: Mlp::new(&sizes, true, rng),
            scale: Array2::ones((shape.steps, shape.traj_dim)),
            skip: Array2::zeros((shape.steps, shape.traj_dim)),
            anchor: Array2::zeros((shape.steps, shape.traj_dim)),
            shape,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape,
            tokens: Array2::zeros(self.tokens.raw_dim()),
            kinds: Array2::zeros(self.kinds.raw_dim()),
            goal_image: Array2::zeros(self.goal_image.raw_dim()),
            goal_sketch: Array2::zeros(self.goal_sketch.raw_dim()),
            time: Linear::zeros(self.time.inputs(), self.time.outputs()),
            mlp: self.mlp.zeros_like(),
            scale: Array2::zeros(self.scale.raw_dim()),
            skip: Array2::zeros(self.skip.raw_dim()),
            anchor: Array2::zeros(self.anchor.raw_dim()),
        }
    }

    fn validate_cond(&self, cond: &Condition) -> Result<(), NnError> {
        match cond {
            Condition::Null => Ok(()),
            Condition::Language { token_ids, .. } => {
                if token_ids.is_empty() {
                    return Err(NnError::UnknownToken(String::new()));
                }
                match token_ids.iter().find(|&&t| t >= self.shape.vocab) {
                    Some(t) => Err(NnError::UnknownToken(format!("#{t}"))),
                    None => Ok(()),
                }
            }
            Condition::Goal(g) => {
                let want = match g.kind {
                    GoalKind::GoalImage => self.shape.frame_dim,
                    GoalKind::GoalSketch => self.shape.sketch_dim,
                };
                check("goal condition", want, g.values.len())
            }
        }
    }

    /// Embedding of exactly one primitive.
    pub fn embed(&self, cond: &Condition) -> Result<Array1<S>, NnError> {
        self.validate_cond(cond)?;
        let mut out = self.kinds.row(cond.kind() as usize).to_owned();
        match cond {
            Condition::Null => {}
            Condition::Language { token_ids, .. } => {
                let inv = c::<S>(1.0 / token_ids.len() as f64);
                for &t in token_ids {
                    out.scaled_add(inv, &self.tokens.row(t));
                }
            }
            Condition::Goal(g) => {
                let w = match g.kind {
                    GoalKind::GoalImage => &self.goal_image,
                    GoalKind::GoalSketch => &self.goal_sketch,
                };
                let v: Array1<S> = g.values.iter().map(|&x| c::<S>(x as f64)).collect();
                out += &w.dot(&v);
            }
        }
        Ok(out)
    }

    fn assemble(&self, batch: &DenoiseBatch<S>) -> Result<(Array2<S>, Array2<S>), NnError> {
        let sh = &self.shape;
        let rows = batch.noisy.nrows();
        check("noisy trajectory width", sh.traj_dim, batch.noisy.ncols())?;
        check("step count", rows, batch.steps.len())?;
        check("condition count", rows, batch.conds.len())?;
        check("first-frame rows", rows, batch.first_frames.nrows())?;
        check("first-frame width", sh.frame_dim, batch.first_frames.ncols())?;

        let mut time_in = Array2::zeros((rows, sh.time_features));
        for (i, &t) in batch.steps.iter().enumerate() {
            if t == 0 || t > sh.steps {
                return Err(NnError::StepOutOfRange(t, sh.steps));
            }
            let feats = time_features::<S>(t, sh.time_features);
            time_in.row_mut(i).assign(&Array1::from(feats));
        }
        let time_emb = self.time.forward(&time_in.view());

        let mut x = Array2::zeros((rows, sh.input_dim()));
        let (d, e, te) = (sh.traj_dim, sh.embed, sh.time_embed);
        x.slice_mut(s![.., ..d]).assign(&batch.noisy);
        for (i, cond) in batch.conds.iter().enumerate() {
            x.slice_mut(s![i, d..d + e]).assign(&self.embed(cond)?);
        }
        x.slice_mut(s![.., d + e..d + e + te]).assign(&time_emb);
        x.slice_mut(s![.., d + e + te..]).assign(&batch.first_frames);
        Ok((x, time_in))
    }

    /// `scale_t * mlp + skip_t * noisy + anchor_t * tile(x0)`, elementwise.
    fn precondition(&self, batch: &DenoiseBatch<S>, out: &mut Array2<S>) {
        let f = self.shape.frame_dim;
        for (i, &t) in batch.steps.iter().enumerate() {
            let first = batch.first_frames.row(i);
            let (scale, skip, anchor) = (self.scale.row(t - 1), self.skip.row(t - 1), self.anchor.row(t - 1));
            let noisy = batch.noisy.row(i);
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = scale[k] * *o + skip[k] * noisy[k] + anchor[k] * first[k % f];
            }
        }
    }

    pub fn forward(&self, batch: &DenoiseBatch<S>) -> Result<Array2<S>, NnError> {
        let (x, _) = self.assemble(batch)?;
        let mut out = self.mlp.forward(x);
        self.precondition(batch, &mut out);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFiniteActivation("denoiser output"));
        }
        Ok(out)
    }

    pub fn forward_cached(
        &self,
        batch: &DenoiseBatch<S>,
    ) -> Result<(Array2<S>, DenoiseCache<S>), NnError> {
        let (x, time_in) = self.assemble(batch)?;
        let (raw, mlp) = self.mlp.forward_cached(x);
        let mut out = raw.clone();
        self.precondition(batch, &mut out);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFiniteActivation("denoiser output"));
        }
        Ok((out, DenoiseCache { mlp, time_in, raw }))
    }

    /// Accumulate dL/dparams given dL/doutput for the batch that produced `cache`.
    pub fn backward(
        &self,
        batch: &DenoiseBatch<S>,
        cache: &DenoiseCache<S>,
        d_out: &Array2<S>,
        grad: &mut Denoiser<S>,
    ) {
        let sh = &self.shape;
        let (d, e, te) = (sh.traj_dim, sh.embed, sh.time_embed);
        let mut d_mlp = d_out.clone();
        for (i, &t) in batch.steps.iter().enumerate() {
            ndarray::Zip::from(grad.skip.row_mut(t - 1))
                .and(&d_out.row(i))
                .and(&batch.noisy.row(i))
                .for_each(|g, &dy, &x| *g += dy * x);
            ndarray::Zip::from(grad.scale.row_mut(t - 1))
                .and(&d_out.row(i))
                .and(&cache.raw.row(i))
                .for_each(|g, &dy, &y| *g += dy * y);
            let first = batch.first_frames.row(i);
            let f = sh.frame_dim;
            for (k, (g, &dy)) in grad.anchor.row_mut(t - 1).iter_mut().zip(d_out.row(i)).enumerate() {
                *g += dy * first[k % f];
            }
            ndarray::Zip::from(d_mlp.row_mut(i))
                .and(&self.scale.row(t - 1))
                .for_each(|d, &a| *d *= a);
        }
        let dx = self.mlp.backward(&cache.mlp, &d_mlp, &mut grad.mlp);

        let d_time = dx.slice(s![.., d + e..d + e + te]).to_owned();
        self.time.backward(&cache.time_in.view(), &d_time, &mut grad.time);

        for (i, cond) in batch.conds.iter().enumerate() {
            let de = dx.slice(s![i, d..d + e]);
            let mut kind_row = grad.kinds.row_mut(cond.kind() as usize);
            kind_row += &de;
            match cond {
                Condition::Null => {}
                Condition::Language { token_ids, .. } => {
                    let inv = c::<S>(1.0 / token_ids.len() as f64);
                    for &t in token_ids {
                        grad.tokens.row_mut(t).scaled_add(inv, &de);
                    }
                }
                Condition::Goal(g) => {
                    let w = match g.kind {
                        GoalKind::GoalImage => &mut grad.goal_image,
                        GoalKind::GoalSketch => &mut grad.goal_sketch,
                    };
                    for (r, &dv) in de.iter().enumerate() {
                        for (k, &gv) in g.values.iter().enumerate() {
                            w[(r, k)] = w[(r, k)] + dv * c::<S>(gv as f64);
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> ParamSet<S> for Denoiser<S> {
    fn visit(&self, f: &mut dyn FnMut(&'static str, &[usize], &[S])) {
        visit2("tokens", &self.tokens, f);
        visit2("kinds", &self.kinds, f);
        visit2("goal_image", &self.goal_image, f);
        visit2("goal_sketch", &self.goal_sketch, f);
        visit2("time.weight", &self.time.weight, f);
        visit1("time.bias", &self.time.bias, f);
        self.mlp.visit(f);
        visit2("scale", &self.scale, f);
        visit2("skip", &self.skip, f);
        visit2("anchor", &self.anchor, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&'static str, &[usize], &mut [S])) {
        visit2_mut("tokens", &mut self.tokens, f);
        visit2_mut("kinds", &mut self.kinds, f);
        visit2_mut("goal_image", &mut self.goal_image, f);
        visit2_mut("goal_sketch", &mut self.goal_sketch, f);
        visit2_mut("time.weight", &mut self.time.weight, f);
        visit1_mut("time.bias", &mut self.time.bias, f);
        self.mlp.visit_mut(f);
        visit2_mut("scale", &mut self.scale, f);
        visit2_mut("skip", &mut self.skip, f);
        visit2_mut("anchor", &mut self.anchor, f);
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new<P: ParamSet<S>>(params: &P, lr: f64) -> Self {
        let zeros: Vec<Vec<S>> = params
            .flatten()
            .into_iter()
            .map(|t| vec![S::zero(); t.len()])
            .collect();
        Self {
            lr: c(lr),
            beta1: c(0.9),
            beta2: c(0.999),
            eps: c(1e-8),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<P: ParamSet<S>>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let g = grads.flatten();
        let t = self.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut k = 0;
        params.visit_mut(&mut |_, _, p| {
            let (mk, vk, gk) = (&mut m[k], &mut v[k], &g[k]);
            for i in 0..p.len() {
                mk[i] = b1 * mk[i] + (S::one() - b1) * gk[i];
                vk[i] = b2 * vk[i] + (S::one() - b2) * gk[i] * gk[i];
                let mh = mk[i] / bc1;
                let vh = vk[i] / bc2;
                p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
            }
            k += 1;
        });
    }
}

/// Scale `grads` so that their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<S: Scalar, P: ParamSet<S>>(grads: &mut P, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    grads.visit(&mut |_, _, d| {
        sq += d.iter().map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>()
    });
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale: S = c(max_norm / norm);
        grads.visit_mut(&mut |_, _, d| d.iter_mut().for_each(|x| *x = *x * scale));
    }
    norm
}
