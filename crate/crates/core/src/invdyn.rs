//! Inverse dynamics: adjacent frames to an action, and the plan executor.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{PlanRequest, Planner};
use crate::encoding::{cell_gap, encode_state, frame_dim, GoalCondition};
use crate::gridworld::{step, Action, Dataset, SplitTag, Task, WorldConfig, WorldState};
use crate::instr::ParsedInstruction;
use crate::nn::{clip_grad_norm, Adam, Mlp, ParamSet};
use crate::util::rng_for;
use crate::Result;

pub const N_ACTIONS: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvDynConfig {
    pub hidden: usize,
    pub layers: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Input jitter during training, as a fraction of the cell gap.
    pub jitter: f64,
    /// Share of each batch drawn from random single transitions instead of
    /// demonstrations.
    pub random_share: f64,
}

impl Default for InvDynConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 2,
            steps: 3000,
            batch: 128,
            lr: 2e-3,
            jitter: 0.25,
            random_share: 0.5,
        }
    }
}

impl InvDynConfig {
    pub fn sigma(&self, world: &WorldConfig) -> f64 {
        self.jitter * cell_gap(world) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvDynModel {
    pub mlp: Mlp<f32>,
    pub frame_dim: usize,
}

impl ParamSet<f32> for InvDynModel {
    fn visit(&self, f: &mut dyn FnMut(&'static str, &[usize], &[f32])) {
        self.mlp.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&'static str, &[usize], &mut [f32])) {
        self.mlp.visit_mut(f)
    }
}

/// One labelled transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub from: Vec<f32>,
    pub to: Vec<f32>,
    pub action: Action,
}

impl InvDynModel {
    pub fn new<R: Rng + ?Sized>(world: &WorldConfig, cfg: &InvDynConfig, rng: &mut R) -> Self {
        let f = frame_dim(world);
        let mut sizes = vec![2 * f];
        sizes.extend(std::iter::repeat_n(cfg.hidden, cfg.layers));
        sizes.push(N_ACTIONS);
        Self {
            mlp: Mlp::new(&sizes, false, rng),
            frame_dim: f,
        }
    }

    fn inputs(&self, pairs: &[(&[f32], &[f32])]) -> Array2<f32> {
        let f = self.frame_dim;
        let mut x = Array2::zeros((pairs.len(), 2 * f));
        for (i, (a, b)) in pairs.iter().enumerate() {
            let mut row = x.row_mut(i);
            let row = row.as_slice_mut().unwrap();
            row[..f].copy_from_slice(a);
            row[f..].copy_from_slice(b);
        }
        x
    }

    pub fn logits(&self, pairs: &[(&[f32], &[f32])]) -> Array2<f32> {
        self.mlp.forward(self.inputs(pairs))
    }

    /// Argmax action per pair; ties go to the lowest action code.
    pub fn predict(&self, pairs: &[(&[f32], &[f32])]) -> Vec<Action> {
        let logits = self.logits(pairs);
        logits
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for k in 1..N_ACTIONS {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                Action::from_code(best as u8).unwrap()
            })
            .collect()
    }
}

/// Demonstration transitions of one split.
pub fn demo_transitions(ds: &Dataset, split: SplitTag) -> Vec<Transition> {
    let world = ds.world();
    let mut out = Vec::new();
    for rec in ds.split(split) {
        for (k, &code) in rec.actions.iter().enumerate() {
            out.push(Transition {
                from: encode_state(&rec.states[k], world).0,
                to: encode_state(&rec.states[k + 1], world).0,
                action: Action::from_code(code).unwrap(),
            });
        }
    }
    out
}

/// A random action applied to a random dataset state. Actions without effect
/// are labelled Noop, since the two frames cannot tell them apart.
pub fn random_transition<R: Rng + ?Sized>(states: &[&WorldState], world: &WorldConfig, rng: &mut R) -> Transition {
    let s = states[rng.random_range(0..states.len())];
    let a = Action::ALL[rng.random_range(0..N_ACTIONS)];
    let next = step(s, a, world);
    Transition {
        from: encode_state(s, world).0,
        to: encode_state(&next, world).0,
        action: if &next == s { Action::Noop } else { a },
    }
}

fn jitter<R: Rng + ?Sized>(v: &[f32], sigma: f64, rng: &mut R) -> Vec<f32> {
    if sigma == 0.0 {
        return v.to_vec();
    }
    let n = Normal::new(0.0, sigma).unwrap();
    v.iter().map(|&x| x + n.sample(rng) as f32).collect()
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> (f32, Array2<f32>) {
    let b = labels.len() as f32;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let m = row.fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        let exp: Vec<f32> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f32 = exp.iter().sum();
        loss -= (exp[labels[i]] / z).ln();
        for k in 0..row.len() {
            let p = exp[k] / z;
            grad[(i, k)] = (p - if k == labels[i] { 1.0 } else { 0.0 }) / b;
        }
    }
    (loss / b, grad)
}

/// Train on demonstration and random transitions with Gaussian input jitter.
pub fn train_invdyn(
    ds: &Dataset,
    cfg: &InvDynConfig,
    rng: &mut ChaCha8Rng,
    mut log: impl FnMut(usize, f32),
) -> Result<InvDynModel> {
    let world = ds.world();
    let demos = demo_transitions(ds, SplitTag::Train);
    if demos.is_empty() {
        return Err(crate::Error::Format("no training transitions".into()));
    }
    let states: Vec<&WorldState> = ds.split(SplitTag::Train).flat_map(|r| r.states.iter()).collect();
    let sigma = cfg.sigma(world);
    let mut model = InvDynModel::new(world, cfg, rng);
    let mut opt = Adam::new(&model, cfg.lr);
    let mut grads = model.clone();
    let mut running = 0.0;
    for s in 0..cfg.steps {
        let batch: Vec<Transition> = (0..cfg.batch)
            .map(|_| {
                let t = if rng.random_bool(cfg.random_share) {
                    random_transition(&states, world, rng)
                } else {
                    demos[rng.random_range(0..demos.len())].clone()
                };
                Transition {
                    from: jitter(&t.from, sigma, rng),
                    to: jitter(&t.to, sigma, rng),
                    action: t.action,
                }
            })
            .collect();
        let pairs: Vec<(&[f32], &[f32])> = batch.iter().map(|t| (&t.from[..], &t.to[..])).collect();
        let labels: Vec<usize> = batch.iter().map(|t| t.action.code() as usize).collect();
        let (out, cache) = model.mlp.forward_cached(model.inputs(&pairs));
        let (loss, d_out) = cross_entropy(&out, &labels);
        grads.fill_zero();
        model.mlp.backward(&cache, &d_out, &mut grads.mlp);
        clip_grad_norm(&mut grads, 1.0);
        let progress = s as f64 / cfg.steps as f64;
        opt.lr = (cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))) as f32;
        opt.update(&mut model, &grads);
        running += loss;
        if (s + 1) % 500 == 0 {
            log(s + 1, running / 500.0);
            running = 0.0;
        }
    }
    Ok(model)
}

/// Fraction of transitions whose argmax matches the label, with optional
/// Gaussian jitter of standard deviation `sigma` on both frames.
pub fn accuracy(model: &InvDynModel, transitions: &[Transition], sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    if transitions.is_empty() {
        return 0.0;
    }
    let jittered: Vec<(Vec<f32>, Vec<f32>)> = transitions
        .iter()
        .map(|t| (jitter(&t.from, sigma, rng), jitter(&t.to, sigma, rng)))
        .collect();
    let pairs: Vec<(&[f32], &[f32])> = jittered.iter().map(|(a, b)| (&a[..], &b[..])).collect();
    let pred = model.predict(&pairs);
    let hits = pred.iter().zip(transitions).filter(|(p, t)| **p == t.action).count();
    hits as f64 / transitions.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutorConfig {
    /// Actions executed from each plan before replanning.
    pub replan_every: usize,
    pub max_steps: usize,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            replan_every: 3,
            max_steps: 24,
        }
    }
}

impl ExecutorConfig {
    /// One plan, executed to its end.
    pub fn open_loop(world: &WorldConfig) -> Self {
        Self {
            replan_every: world.plan_actions(),
            max_steps: world.plan_actions(),
        }
    }
}

pub struct Episode<'a> {
    pub instruction: &'a ParsedInstruction,
    pub start: WorldState,
    pub goals: Vec<GoalCondition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: usize,
    pub plans: usize,
    pub actions: Vec<u8>,
}

/// Run episodes in lockstep: every still-active episode replans together so
/// each sampling call covers the whole batch. Episode `i` draws all of its
/// randomness from `rng_for(seed, [i])`.
pub fn execute(
    planner: &Planner,
    invdyn: &InvDynModel,
    episodes: &[Episode],
    cfg: &ExecutorConfig,
    seed: u64,
) -> Result<Vec<EpisodeOutcome>> {
    let world = planner.world;
    let tasks: Vec<Task> = episodes
        .iter()
        .map(|e| Task::resolve(e.instruction, world))
        .collect::<std::result::Result<_, _>>()?;
    let mut rngs: Vec<ChaCha8Rng> = (0..episodes.len()).map(|i| rng_for(seed, &[i as u64])).collect();
    let mut states: Vec<WorldState> = episodes.iter().map(|e| e.start.clone()).collect();
    let mut outcomes: Vec<EpisodeOutcome> = tasks
        .iter()
        .zip(&states)
        .map(|(t, s)| EpisodeOutcome {
            success: t.satisfied(s),
            steps: 0,
            plans: 0,
            actions: Vec::new(),
        })
        .collect();
    let per_plan = cfg.replan_every.clamp(1, world.plan_actions());

    loop {
        let active: Vec<usize> = (0..episodes.len())
            .filter(|&i| !outcomes[i].success && outcomes[i].steps < cfg.max_steps)
            .collect();
        if active.is_empty() {
            break;
        }
        let reqs: Vec<PlanRequest> = active
            .iter()
            .map(|&i| PlanRequest {
                instruction: episodes[i].instruction,
                observation: &states[i],
                goals: &episodes[i].goals,
            })
            .collect();
        let mut batch_rngs: Vec<ChaCha8Rng> = active.iter().map(|&i| rngs[i].clone()).collect();
        let plans = planner.plan_batch(&reqs, &mut batch_rngs)?;
        drop(reqs);
        for (&i, r) in active.iter().zip(batch_rngs) {
            rngs[i] = r;
        }
        let f = frame_dim(world);
        for (&i, plan) in active.iter().zip(&plans) {
            outcomes[i].plans += 1;
            for k in 0..per_plan {
                if outcomes[i].success || outcomes[i].steps >= cfg.max_steps {
                    break;
                }
                let obs = encode_state(&states[i], world).0;
                let target = &plan.values[(k + 1) * f..(k + 2) * f];
                let a = invdyn.predict(&[(&obs, target)])[0];
                states[i] = step(&states[i], a, world);
                outcomes[i].steps += 1;
                outcomes[i].actions.push(a.code());
                outcomes[i].success = tasks[i].satisfied(&states[i]);
            }
        }
    }
    Ok(outcomes)
}
