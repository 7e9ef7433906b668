//! DDPM schedule, compositional training and composed-guidance sampling.
//!
//! Each primitive conditions its own evaluation of the shared network. During
//! training the prediction for an item is the mean over a random subset of its
//! primitives; at sampling time the per-primitive predictions are combined
//! with classifier-free guidance around the unconditional prediction.
//!
//! Frame 0 of every trajectory is the starting observation. It is written into
//! the noisy input both in training and after every sampling step, and is
//! excluded from the loss.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{decode_traj, encode_state, GoalCondition, GoalKind};
use crate::gridworld::{Dataset, DatasetRecord, SplitTag, WorldConfig, WorldState};
use crate::instr::{parse, Lexicon, ParsedInstruction};
use crate::nn::{clip_grad_norm, Adam, Condition, DenoiseBatch, Denoiser, NnError, ParamSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("step {0} outside [1, {1}]")]
    StepOutOfRange(usize, usize),
    #[error("non-finite sample at step {step} (request {request}, max |x| = {max_abs})")]
    NonFiniteSample {
        step: usize,
        request: usize,
        max_abs: f32,
    },
    #[error("empty condition set")]
    EmptyConditionSet,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Network(#[from] NnError),
}

type Result<T> = std::result::Result<T, DiffusionError>;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas; `sigma_t = sqrt(beta_t)`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(DiffusionError::InvalidSchedule("zero steps".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// `sqrt(abar_t) tau0 + sqrt(1 - abar_t) eps`; `t = 0` returns `tau0`.
pub fn forward_noise(tau0: &[f32], t: usize, eps: &[f32], sched: &NoiseSchedule) -> Result<Vec<f32>> {
    if tau0.len() != eps.len() {
        return Err(DiffusionError::DimensionMismatch {
            expected: tau0.len(),
            got: eps.len(),
        });
    }
    if t > sched.steps() {
        return Err(DiffusionError::StepOutOfRange(t, sched.steps()));
    }
    let ab = sched.alpha_bar_at(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    Ok(tau0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub w: f64,
    /// Divide the summed guidance by the number of primitives.
    pub normalize_by_n: bool,
    /// Weight for goal primitives; `w` when unset.
    #[serde(default)]
    pub goal_w: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: 1.0,
            normalize_by_n: true,
            goal_w: None,
        }
    }
}

impl GuidanceConfig {
    fn weight(&self, is_goal: bool) -> f64 {
        if is_goal {
            self.goal_w.unwrap_or(self.w)
        } else {
            self.w
        }
    }
}

/// `eps_u + scale * sum_i w_i (eps_i - eps_u)`, `scale = 1/n` when normalizing.
pub fn compose_eps(
    uncond: &[f32],
    conditional: &[&[f32]],
    weights: &[f64],
    normalize_by_n: bool,
) -> Vec<f32> {
    let mut out: Vec<f64> = uncond.iter().map(|&u| u as f64).collect();
    if conditional.is_empty() {
        return uncond.to_vec();
    }
    let scale = if normalize_by_n {
        1.0 / conditional.len() as f64
    } else {
        1.0
    };
    for (eps_i, &w) in conditional.iter().zip(weights) {
        for (o, (&e, &u)) in out.iter_mut().zip(eps_i.iter().zip(uncond)) {
            *o += scale * w * (e as f64 - u as f64);
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubsetPolicy {
    pub p_single: f64,
    pub p_uncond: f64,
    /// Probability that each available goal condition joins an item's pool.
    pub goal_keep: f64,
}

impl Default for SubsetPolicy {
    fn default() -> Self {
        Self {
            p_single: 0.3,
            p_uncond: 0.1,
            goal_keep: 0.5,
        }
    }
}

impl SubsetPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if ok(self.p_single) && ok(self.p_uncond) && ok(self.goal_keep) && self.p_single + self.p_uncond <= 1.0 {
            Ok(())
        } else {
            Err(DiffusionError::InvalidSchedule(format!("bad subset policy {self:?}")))
        }
    }

    /// Indices into `pool` to train on; empty means the Null condition.
    pub fn choose<R: Rng + ?Sized>(&self, pool: usize, rng: &mut R) -> Vec<usize> {
        let u: f64 = rng.random();
        if u < self.p_uncond || pool == 0 {
            Vec::new()
        } else if u < self.p_uncond + self.p_single {
            vec![rng.random_range(0..pool)]
        } else {
            (0..pool).collect()
        }
    }
}

/// Something that predicts noise for rows of noisy trajectories.
pub trait NoisePredictor {
    type Cond;

    fn traj_dim(&self) -> usize;

    /// `conds[i] = None` asks for the unconditional prediction.
    fn predict(
        &self,
        noisy: ArrayView2<f32>,
        step: usize,
        conds: &[Option<&Self::Cond>],
        first_frames: ArrayView2<f32>,
    ) -> Result<Array2<f32>>;
}

/// What the network output estimates. Either way the sampler sees noise
/// predictions: a clean-trajectory estimate `x` at step `t` is converted to
/// `(tau_t - sqrt(abar_t) x) / sqrt(1 - abar_t)`, which is affine in `x`, so
/// composing converted predictions equals converting composed ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Eps,
    #[default]
    Clean,
}

/// A denoiser viewed as a noise predictor.
pub struct EpsModel<'a> {
    pub net: &'a Denoiser<f32>,
    pub sched: &'a NoiseSchedule,
    pub prediction: Prediction,
}

impl NoisePredictor for EpsModel<'_> {
    type Cond = Condition;

    fn traj_dim(&self) -> usize {
        self.net.shape.traj_dim
    }

    fn predict(
        &self,
        noisy: ArrayView2<f32>,
        step: usize,
        conds: &[Option<&Condition>],
        first_frames: ArrayView2<f32>,
    ) -> Result<Array2<f32>> {
        let null = Condition::Null;
        let refs: Vec<&Condition> = conds.iter().map(|c| c.unwrap_or(&null)).collect();
        let steps = vec![step; refs.len()];
        let mut out = self.net.forward(&DenoiseBatch {
            noisy,
            steps: &steps,
            conds: &refs,
            first_frames,
        })?;
        if self.prediction == Prediction::Clean {
            let ab = self.sched.alpha_bar_at(step);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            ndarray::Zip::from(&mut out)
                .and(&noisy)
                .for_each(|o, &x| *o = ((x as f64 - a * *o as f64) / b) as f32);
        }
        Ok(out)
    }
}

pub struct SampleRequest<C> {
    pub conds: Vec<C>,
    /// Per-condition flag selecting the goal guidance weight.
    pub is_goal: Vec<bool>,
    /// Observation clamped into frame 0; its length is the frame width.
    pub first_frame: Vec<f32>,
}

impl<C> SampleRequest<C> {
    pub fn language(conds: Vec<C>, first_frame: Vec<f32>) -> Self {
        let is_goal = vec![false; conds.len()];
        Self {
            conds,
            is_goal,
            first_frame,
        }
    }
}

fn normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Ancestral sampling for a batch of independent requests, each drawing its
/// noise from its own generator. Requests are advanced in lockstep so every
/// network call covers the whole batch.
pub fn sample_batch<P: NoisePredictor>(
    predictor: &P,
    requests: &[SampleRequest<P::Cond>],
    sched: &NoiseSchedule,
    guidance: &GuidanceConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Vec<f32>>> {
    let d = predictor.traj_dim();
    assert_eq!(requests.len(), rngs.len(), "one generator per request");
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let f = requests[0].first_frame.len();
    for r in requests {
        if r.first_frame.len() != f || f > d {
            return Err(DiffusionError::DimensionMismatch {
                expected: f,
                got: r.first_frame.len(),
            });
        }
    }

    let mut taus: Vec<Vec<f32>> = rngs.iter_mut().map(|rng| normal_vec(d, rng)).collect();
    for (tau, r) in taus.iter_mut().zip(requests) {
        tau[..f].copy_from_slice(&r.first_frame);
    }

    let rows: usize = requests.iter().map(|r| 1 + r.conds.len()).sum();
    let mut conds: Vec<Option<&P::Cond>> = Vec::with_capacity(rows);
    let mut first = Array2::<f32>::zeros((rows, f));
    let mut owner = Vec::with_capacity(rows);
    for (ri, r) in requests.iter().enumerate() {
        for c in std::iter::once(None).chain(r.conds.iter().map(Some)) {
            first.row_mut(conds.len()).assign(&ndarray::ArrayView1::from(&r.first_frame[..]));
            conds.push(c);
            owner.push(ri);
        }
    }

    let mut noisy = Array2::<f32>::zeros((rows, d));
    for t in (1..=sched.steps()).rev() {
        for (row, &ri) in owner.iter().enumerate() {
            noisy
                .row_mut(row)
                .assign(&ndarray::ArrayView1::from(&taus[ri][..]));
        }
        let eps = predictor.predict(noisy.view(), t, &conds, first.view())?;
        let i = t - 1;
        let inv_sqrt_alpha = 1.0 / sched.alpha[i].sqrt();
        let coef = sched.beta[i] / (1.0 - sched.alpha_bar[i]).sqrt();
        let mut row = 0;
        for (ri, r) in requests.iter().enumerate() {
            let uncond = eps.row(row);
            let uncond = uncond.as_slice().unwrap();
            let cond_rows: Vec<&[f32]> = (0..r.conds.len())
                .map(|k| eps.row(row + 1 + k).to_slice().unwrap())
                .collect();
            let weights: Vec<f64> = r.is_goal.iter().map(|&g| guidance.weight(g)).collect();
            let eps_tilde = compose_eps(uncond, &cond_rows, &weights, guidance.normalize_by_n);
            row += 1 + r.conds.len();

            let z: Vec<f32> = if t > 1 {
                normal_vec(d, &mut rngs[ri])
            } else {
                vec![0.0; d]
            };
            let tau = &mut taus[ri];
            let sigma = sched.sigma[i];
            for k in 0..d {
                let v = inv_sqrt_alpha * (tau[k] as f64 - coef * eps_tilde[k] as f64)
                    + sigma * z[k] as f64;
                tau[k] = v as f32;
            }
            tau[..f].copy_from_slice(&r.first_frame);
            if !tau.iter().all(|v| v.is_finite()) {
                let max_abs = tau.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                return Err(DiffusionError::NonFiniteSample {
                    step: t,
                    request: ri,
                    max_abs,
                });
            }
        }
    }
    Ok(taus)
}

pub fn sample<P: NoisePredictor>(
    predictor: &P,
    request: SampleRequest<P::Cond>,
    sched: &NoiseSchedule,
    guidance: &GuidanceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    let mut rngs = [rng.clone()];
    let out = sample_batch(predictor, &[request], sched, guidance, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().unwrap())
}

/// Clean trajectory plus its full condition pool.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub traj: Vec<f32>,
    pub first_frame: Vec<f32>,
    pub language: Vec<Condition>,
    pub goals: Vec<Condition>,
}

/// Language conditions for an instruction; `pooled` collapses it to one primitive.
pub fn language_conditions(
    instr: &ParsedInstruction,
    lex: &Lexicon,
    pooled: bool,
) -> std::result::Result<Vec<Condition>, NnError> {
    let instr = if pooled { instr.pooled() } else { instr.clone() };
    instr
        .primitives
        .iter()
        .map(|p| Condition::from_primitive(p, lex))
        .collect()
}

pub fn record_goals(rec: &DatasetRecord) -> [GoalCondition; 2] {
    [
        GoalCondition {
            kind: GoalKind::GoalImage,
            values: rec.goal_image.clone(),
        },
        GoalCondition {
            kind: GoalKind::GoalSketch,
            values: rec.goal_sketch.clone(),
        },
    ]
}

pub fn train_items(ds: &Dataset, lex: &Lexicon, pooled: bool) -> crate::Result<Vec<TrainItem>> {
    let cfg = ds.world();
    ds.split(SplitTag::Train)
        .map(|rec| {
            let instr = parse(&rec.instruction, lex)?;
            let traj = crate::encoding::encode_traj(&rec.states, cfg)?;
            Ok(TrainItem {
                traj: traj.values,
                first_frame: encode_state(rec.start(), cfg).0,
                language: language_conditions(&instr, lex, pooled)?,
                goals: record_goals(rec).into_iter().map(Condition::Goal).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_final_frac: f64,
    pub clip_norm: f64,
    pub policy: SubsetPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 15_000,
            batch: 64,
            lr: 1e-3,
            lr_final_frac: 0.05,
            clip_norm: 1.0,
            policy: SubsetPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.steps.max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
        self.lr * (self.lr_final_frac + (1.0 - self.lr_final_frac) * cos)
    }
}

/// Mutable training state: network, optimizer and generator.
pub struct Trainer {
    pub net: Denoiser<f32>,
    pub prediction: Prediction,
    pub opt: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub sched: NoiseSchedule,
    grads: Denoiser<f32>,
}

impl Trainer {
    pub fn new(net: Denoiser<f32>, prediction: Prediction, sched: NoiseSchedule, lr: f64, rng: ChaCha8Rng) -> Self {
        let opt = Adam::new(&net, lr);
        let grads = net.zeros_like();
        Self {
            net,
            prediction,
            opt,
            rng,
            sched,
            grads,
        }
    }

    pub fn from_parts(
        net: Denoiser<f32>,
        prediction: Prediction,
        opt: Adam<f32>,
        sched: NoiseSchedule,
        rng: ChaCha8Rng,
    ) -> Self {
        let grads = net.zeros_like();
        Self {
            net,
            prediction,
            opt,
            rng,
            sched,
            grads,
        }
    }

    /// Loss and gradients for one batch, without touching the parameters.
    /// The loss is the squared error of the component-mean output against
    /// the drawn noise, or against the clean trajectory for
    /// [`Prediction::Clean`], averaged over every entry outside frame 0.
    pub fn loss_and_grad(&mut self, batch: &[&TrainItem], policy: &SubsetPolicy) -> Result<f32> {
        if batch.is_empty() {
            return Err(DiffusionError::EmptyConditionSet);
        }
        let d = self.net.shape.traj_dim;
        let f = self.net.shape.frame_dim;
        let t_max = self.sched.steps();

        let mut noisy_rows: Vec<Vec<f32>> = Vec::new();
        let mut steps = Vec::new();
        let mut conds: Vec<&Condition> = Vec::new();
        let mut firsts: Vec<&[f32]> = Vec::new();
        let mut spans = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let null = Condition::Null;
        for item in batch {
            if item.traj.len() != d || item.first_frame.len() != f {
                return Err(DiffusionError::DimensionMismatch {
                    expected: d,
                    got: item.traj.len(),
                });
            }
            let t = self.rng.random_range(1..=t_max);
            let eps = normal_vec(d, &mut self.rng);
            let mut noisy = forward_noise(&item.traj, t, &eps, &self.sched)?;
            noisy[..f].copy_from_slice(&item.first_frame);

            let mut pool: Vec<&Condition> = item.language.iter().collect();
            for g in &item.goals {
                if self.rng.random_bool(policy.goal_keep) {
                    pool.push(g);
                }
            }
            let chosen = policy.choose(pool.len(), &mut self.rng);
            let start = conds.len();
            if chosen.is_empty() {
                conds.push(&null);
            } else {
                conds.extend(chosen.iter().map(|&i| pool[i]));
            }
            for _ in start..conds.len() {
                noisy_rows.push(noisy.clone());
                steps.push(t);
                firsts.push(&item.first_frame);
            }
            spans.push(start..conds.len());
            targets.push(match self.prediction {
                Prediction::Eps => eps,
                Prediction::Clean => item.traj.clone(),
            });
        }

        let rows = conds.len();
        let mut noisy = Array2::<f32>::zeros((rows, d));
        let mut first = Array2::<f32>::zeros((rows, f));
        for r in 0..rows {
            noisy.row_mut(r).assign(&ndarray::ArrayView1::from(&noisy_rows[r][..]));
            first.row_mut(r).assign(&ndarray::ArrayView1::from(firsts[r]));
        }
        let dbatch = DenoiseBatch {
            noisy: noisy.view(),
            steps: &steps,
            conds: &conds,
            first_frames: first.view(),
        };
        let (out, cache) = self.net.forward_cached(&dbatch)?;

        let denom = (batch.len() * (d - f)) as f32;
        let mut d_out = Array2::<f32>::zeros((rows, d));
        let mut loss = 0.0f64;
        for (span, target) in spans.iter().zip(&targets) {
            let m = span.len() as f32;
            for k in f..d {
                let mean: f32 = span.clone().map(|r| out[(r, k)]).sum::<f32>() / m;
                let resid = mean - target[k];
                loss += (resid * resid) as f64;
                let g = 2.0 * resid / (denom * m);
                for r in span.clone() {
                    d_out[(r, k)] = g;
                }
            }
        }

        self.grads.fill_zero();
        self.net.backward(&dbatch, &cache, &d_out, &mut self.grads);
        Ok((loss / denom as f64) as f32)
    }

    pub fn train_step(&mut self, batch: &[&TrainItem], cfg: &TrainConfig) -> Result<f32> {
        let loss = self.loss_and_grad(batch, &cfg.policy)?;
        clip_grad_norm(&mut self.grads, cfg.clip_norm);
        self.opt.lr = cfg.lr_at(self.opt.step as usize) as f32;
        self.opt.update(&mut self.net, &self.grads);
        Ok(loss)
    }

    pub fn grads(&self) -> &Denoiser<f32> {
        &self.grads
    }

    /// Run `cfg.steps` steps over uniformly drawn minibatches; `log` sees
    /// (step, running mean loss) every `log_every` steps.
    pub fn fit(
        &mut self,
        items: &[TrainItem],
        cfg: &TrainConfig,
        log_every: usize,
        log: impl FnMut(usize, f32),
    ) -> Result<f32> {
        self.fit_until(items, cfg, cfg.steps, log_every, log)
    }

    /// As [`Trainer::fit`] but stopping once `end` steps are done, with the
    /// learning-rate schedule still spanning `cfg.steps`.
    pub fn fit_until(
        &mut self,
        items: &[TrainItem],
        cfg: &TrainConfig,
        end: usize,
        log_every: usize,
        mut log: impl FnMut(usize, f32),
    ) -> Result<f32> {
        cfg.policy.validate()?;
        if items.is_empty() {
            return Err(DiffusionError::EmptyConditionSet);
        }
        let mut running = 0.0f32;
        let mut count = 0;
        let mut last = f32::NAN;
        let start = self.opt.step as usize;
        for s in start..end.min(cfg.steps) {
            let batch: Vec<&TrainItem> = (0..cfg.batch)
                .map(|_| &items[self.rng.random_range(0..items.len())])
                .collect();
            let loss = self.train_step(&batch, cfg)?;
            running += loss;
            count += 1;
            if log_every > 0 && (s + 1) % log_every == 0 {
                last = running / count as f32;
                log(s + 1, last);
                running = 0.0;
                count = 0;
            }
        }
        if count > 0 {
            last = running / count as f32;
        }
        Ok(last)
    }
}

/// Instruction plus observation (and optional goals) to a decoded plan.
pub struct Planner<'a> {
    pub net: &'a Denoiser<f32>,
    pub sched: &'a NoiseSchedule,
    pub guidance: &'a GuidanceConfig,
    pub lex: &'a Lexicon,
    pub world: &'a WorldConfig,
    pub prediction: Prediction,
    /// Collapse every instruction into one primitive (monolithic baseline).
    pub pooled: bool,
}

pub struct PlanRequest<'a> {
    pub instruction: &'a ParsedInstruction,
    pub observation: &'a WorldState,
    pub goals: &'a [GoalCondition],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub values: Vec<f32>,
    pub states: Vec<WorldState>,
}

impl Planner<'_> {
    pub fn request(&self, req: &PlanRequest) -> crate::Result<SampleRequest<Condition>> {
        let mut conds = language_conditions(req.instruction, self.lex, self.pooled)?;
        let mut is_goal = vec![false; conds.len()];
        for g in req.goals {
            conds.push(Condition::Goal(g.clone()));
            is_goal.push(true);
        }
        Ok(SampleRequest {
            conds,
            is_goal,
            first_frame: encode_state(req.observation, self.world).0,
        })
    }

    pub fn plan_batch(&self, reqs: &[PlanRequest], rngs: &mut [ChaCha8Rng]) -> crate::Result<Vec<Plan>> {
        let samples: Vec<SampleRequest<Condition>> =
            reqs.iter().map(|r| self.request(r)).collect::<crate::Result<_>>()?;
        let model = EpsModel {
            net: self.net,
            sched: self.sched,
            prediction: self.prediction,
        };
        let out = sample_batch(&model, &samples, self.sched, self.guidance, rngs)?;
        out.into_iter()
            .map(|values| {
                let states = decode_traj(&values, self.world)?;
                Ok(Plan { values, states })
            })
            .collect()
    }

    pub fn plan(&self, req: &PlanRequest, rng: &mut ChaCha8Rng) -> crate::Result<Plan> {
        let mut rngs = [rng.clone()];
        let out = self.plan_batch(std::slice::from_ref(req), &mut rngs)?;
        *rng = rngs[0].clone();
        Ok(out.into_iter().next().unwrap())
    }
}
