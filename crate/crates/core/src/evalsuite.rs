//! Oracles and experiment harnesses.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffusion::{
    record_goals, sample_batch, DiffusionError, GuidanceConfig, NoisePredictor, NoiseSchedule, PlanRequest, Planner,
    Prediction, SampleRequest,
};
use crate::encoding::{encode_state, GoalCondition};
use crate::gridworld::{step, Action, Dataset, DatasetRecord, SplitTag, Task, WorldConfig, WorldState};
use crate::instr::{parse, Lexicon, ParsedInstruction};
use crate::invdyn::{accuracy, demo_transitions, execute, Episode, ExecutorConfig, InvDynModel};
use crate::nn::Denoiser;
use crate::util::rng_for;
use crate::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Expected noise for scalar Gaussian data `N(mu, s2)` diffused to step `t`.
pub fn analytic_eps(x: f64, t: usize, mu: f64, s2: f64, sched: &NoiseSchedule) -> f64 {
    let ab = sched.alpha_bar_at(t);
    (x - ab.sqrt() * mu) * (1.0 - ab).sqrt() / (ab * s2 + 1.0 - ab)
}

/// Exact noise predictions for one-dimensional Gaussian components. The
/// unconditional prediction is that of standard normal data, whose diffused
/// marginal is the sampler's prior at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle<'a> {
    pub means: Vec<f64>,
    pub s2: f64,
    pub sched: &'a NoiseSchedule,
}

impl NoisePredictor for GaussianOracle<'_> {
    type Cond = usize;

    fn traj_dim(&self) -> usize {
        1
    }

    fn predict(
        &self,
        noisy: ArrayView2<f32>,
        step: usize,
        conds: &[Option<&usize>],
        _first_frames: ArrayView2<f32>,
    ) -> std::result::Result<Array2<f32>, DiffusionError> {
        if noisy.ncols() != 1 || noisy.nrows() != conds.len() {
            return Err(DiffusionError::DimensionMismatch {
                expected: conds.len(),
                got: noisy.nrows(),
            });
        }
        Ok(Array2::from_shape_fn((conds.len(), 1), |(i, _)| {
            let x = noisy[(i, 0)] as f64;
            let (mu, s2) = match conds[i] {
                Some(&k) => (self.means[k], self.s2),
                None => (0.0, 1.0),
            };
            analytic_eps(x, step, mu, s2, self.sched) as f32
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    pub means: Vec<f64>,
    pub s2: f64,
    pub samples: usize,
    pub w: f64,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            means: vec![-1.0, 1.0],
            s2: 0.25,
            samples: 10_000,
            w: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub mean: f64,
    pub var: f64,
    pub target_mean: f64,
    pub target_var: f64,
    pub samples: usize,
    pub pass: bool,
}

/// Sample with the components' analytic scores averaged and compare the
/// moments with the normalized product of the component Gaussians.
pub fn oracle_compose_test(sched: &NoiseSchedule, settings: &OracleSettings) -> Result<OracleOutcome> {
    let n = settings.means.len();
    if n == 0 || settings.s2 <= 0.0 {
        return Err(Error::Format("oracle needs at least one component and positive variance".into()));
    }
    let oracle = GaussianOracle {
        means: settings.means.clone(),
        s2: settings.s2,
        sched,
    };
    let guidance = GuidanceConfig {
        w: settings.w,
        normalize_by_n: true,
        goal_w: None,
    };
    let requests: Vec<SampleRequest<usize>> = (0..settings.samples)
        .map(|_| SampleRequest::language((0..n).collect(), Vec::new()))
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..settings.samples)
        .map(|i| rng_for(settings.seed, &[i as u64]))
        .collect();
    let xs: Vec<f64> = sample_batch(&oracle, &requests, sched, &guidance, &mut rngs)?
        .into_iter()
        .map(|v| v[0] as f64)
        .collect();
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    // With w = 1 the composed target is the geometric mean of the components;
    // w = 0 leaves the standard normal prior.
    let (target_mean, target_var) = if settings.w == 0.0 {
        (0.0, 1.0)
    } else {
        (settings.means.iter().sum::<f64>() / n as f64, settings.s2)
    };
    let pass = (mean - target_mean).abs() < 0.05 && ((var - target_var) / target_var).abs() < 0.15;
    Ok(OracleOutcome {
        mean,
        var,
        target_mean,
        target_var,
        samples: settings.samples,
        pass,
    })
}

/// Every adjacent pair of states is one legal step apart.
pub fn legal_plan(states: &[WorldState], world: &WorldConfig) -> bool {
    states
        .windows(2)
        .all(|p| Action::ALL.iter().any(|&a| step(&p[0], a, world) == p[1]))
}

/// `n` records spread evenly over the split, cycling if it is smaller.
pub fn select_records(ds: &Dataset, split: SplitTag, n: usize) -> Vec<&DatasetRecord> {
    let recs: Vec<&DatasetRecord> = ds.split(split).collect();
    if recs.is_empty() {
        return Vec::new();
    }
    (0..n).map(|i| recs[(i * recs.len() / n.max(1)) % recs.len()]).collect()
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub model: String,
    pub split: SplitTag,
    pub condition: String,
    pub index: usize,
    pub record_id: usize,
    pub instruction: String,
    pub success: bool,
    /// Final frame satisfies the instruction (ignoring intermediate frames).
    pub final_ok: bool,
    pub legal: bool,
    /// L2 between the decoded final frame and the expert's final frame.
    pub goal_distance: f64,
    pub goal_match: bool,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub model: String,
    pub split: SplitTag,
    pub condition: String,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    pub final_ok: usize,
    pub goal_match: usize,
    pub mean_goal_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub guidance: GuidanceConfig,
}

impl SamplerSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            steps: cfg.schedule.steps,
            beta_start: cfg.schedule.beta_start,
            beta_end: cfg.schedule.beta_end,
            guidance: cfg.guidance.clone(),
        }
    }
}

/// Study results. Wall-clock is kept out so reports are reproducible byte
/// for byte; callers record it next to the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub study: String,
    pub seed: u64,
    pub config_digest: String,
    pub data_digest: String,
    pub model_digests: BTreeMap<String, String>,
    pub sampler: SamplerSettings,
    pub cells: Vec<CellSummary>,
    pub comparisons: Vec<Comparison>,
    pub metrics: Vec<Metric>,
    pub episodes: Vec<EpisodeRecord>,
}

/// Aggregate episodes into one summary per (model, split, condition), in
/// first-seen order.
pub fn summarize(episodes: &[EpisodeRecord]) -> Vec<CellSummary> {
    let mut order: Vec<(String, SplitTag, String)> = Vec::new();
    for e in episodes {
        let key = (e.model.clone(), e.split, e.condition.clone());
        if !order.contains(&key) {
            order.push(key);
        }
    }
    order
        .into_iter()
        .map(|(model, split, condition)| {
            let eps: Vec<&EpisodeRecord> = episodes
                .iter()
                .filter(|e| e.model == model && e.split == split && e.condition == condition)
                .collect();
            let trials = eps.len();
            let successes = eps.iter().filter(|e| e.success).count();
            CellSummary {
                rate: successes as f64 / trials as f64,
                successes,
                trials,
                final_ok: eps.iter().filter(|e| e.final_ok).count(),
                goal_match: eps.iter().filter(|e| e.goal_match).count(),
                mean_goal_distance: eps.iter().map(|e| e.goal_distance).sum::<f64>() / trials as f64,
                model,
                split,
                condition,
            }
        })
        .collect()
}

impl ExperimentReport {
    pub fn cell(&self, model: &str, split: SplitTag, condition: &str) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.split == split && c.condition == condition)
    }

    pub fn comparison(&self, name: &str) -> Option<f64> {
        self.comparisons.iter().find(|c| c.name == name).map(|c| c.value)
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    /// Summaries recomputed from the episode records match the stored ones.
    pub fn is_consistent(&self) -> bool {
        summarize(&self.episodes) == self.cells
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Append one line to a report log; earlier reports are never rewritten.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", self.to_json_line()?)?;
        Ok(())
    }

    pub fn read_log(path: &Path) -> Result<Vec<ExperimentReport>> {
        std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

/// A trained denoiser under evaluation.
pub struct EvalModel<'a> {
    pub label: String,
    pub net: &'a Denoiser<f32>,
    pub pooled: bool,
    pub prediction: Prediction,
    pub digest: String,
}

/// Shared inputs of every study.
pub struct StudyContext<'a> {
    pub cfg: &'a RunConfig,
    pub lex: &'a Lexicon,
    pub ds: &'a Dataset,
    pub sched: &'a NoiseSchedule,
}

impl StudyContext<'_> {
    fn check_data(&self) -> Result<()> {
        let expected = self.cfg.data_digest();
        if self.ds.header.config_digest != expected {
            return Err(Error::ConfigMismatch {
                what: "dataset".into(),
                expected,
                found: self.ds.header.config_digest.clone(),
            });
        }
        Ok(())
    }

    fn planner<'b>(&'b self, m: &'b EvalModel) -> Planner<'b> {
        Planner {
            net: m.net,
            sched: self.sched,
            guidance: &self.cfg.guidance,
            lex: self.lex,
            world: &self.cfg.world,
            prediction: m.prediction,
            pooled: m.pooled,
        }
    }

    fn report(&self, study: &str, seed: u64, models: &[&EvalModel]) -> ExperimentReport {
        ExperimentReport {
            schema_version: REPORT_SCHEMA_VERSION,
            study: study.into(),
            seed,
            config_digest: self.cfg.digest(),
            data_digest: self.ds.header.config_digest.clone(),
            model_digests: models.iter().map(|m| (m.label.clone(), m.digest.clone())).collect(),
            sampler: SamplerSettings::from_config(self.cfg),
            cells: Vec::new(),
            comparisons: Vec::new(),
            metrics: Vec::new(),
            episodes: Vec::new(),
        }
    }

    /// Plan once per record and score each plan. Episode `i` draws its noise
    /// from `rng_for(seed, [split, i])` whatever the model or condition.
    fn plan_episodes(
        &self,
        model: &EvalModel,
        split: SplitTag,
        condition: &str,
        recs: &[&DatasetRecord],
        goals: impl Fn(&DatasetRecord) -> Vec<GoalCondition>,
        seed: u64,
    ) -> Result<Vec<EpisodeRecord>> {
        let world = &self.cfg.world;
        let instrs: Vec<ParsedInstruction> = recs
            .iter()
            .map(|r| parse(&r.instruction, self.lex))
            .collect::<std::result::Result<_, _>>()?;
        let goal_sets: Vec<Vec<GoalCondition>> = recs.iter().map(|r| goals(r)).collect();
        let reqs: Vec<PlanRequest> = recs
            .iter()
            .enumerate()
            .map(|(i, r)| PlanRequest {
                instruction: &instrs[i],
                observation: r.start(),
                goals: &goal_sets[i],
            })
            .collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..recs.len())
            .map(|i| rng_for(seed, &[split as u64, i as u64]))
            .collect();
        let plans = self.planner(model).plan_batch(&reqs, &mut rngs)?;
        recs.iter()
            .zip(&instrs)
            .zip(&plans)
            .enumerate()
            .map(|(i, ((rec, instr), plan))| {
                let task = Task::resolve(instr, world)?;
                let last = plan.states.last().expect("non-empty plan");
                let final_ok = task.satisfied(last);
                let legal = legal_plan(&plan.states, world);
                let goal = encode_state(rec.goal_state(), world).0;
                Ok(EpisodeRecord {
                    model: model.label.clone(),
                    split,
                    condition: condition.into(),
                    index: i,
                    record_id: rec.id,
                    instruction: rec.instruction.clone(),
                    success: final_ok && legal,
                    final_ok,
                    legal,
                    goal_distance: l2(&encode_state(last, world).0, &goal),
                    goal_match: last == rec.goal_state(),
                    steps: None,
                })
            })
            .collect()
    }
}

pub const TEXT: &str = "t";
pub const TEXT_SKETCH: &str = "t+s";
pub const TEXT_IMAGE: &str = "t+i";

/// Seen and unseen success of every model on identical episodes and seeds.
/// Comparisons are taken as first model minus each later model.
pub fn run_generalization_study(
    ctx: &StudyContext,
    models: &[EvalModel],
    episodes: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    ctx.check_data()?;
    let mut report = ctx.report("generalization", seed, &models.iter().collect::<Vec<_>>());
    for split in [SplitTag::TestSeen, SplitTag::TestUnseen] {
        let recs = select_records(ctx.ds, split, episodes);
        for m in models {
            report
                .episodes
                .extend(ctx.plan_episodes(m, split, TEXT, &recs, |_| Vec::new(), seed)?);
        }
    }
    report.cells = summarize(&report.episodes);
    let rate = |r: &ExperimentReport, m: &str, s| r.cell(m, s, TEXT).map(|c| c.rate).unwrap_or(f64::NAN);
    let mut comparisons = Vec::new();
    for m in models {
        comparisons.push(Comparison {
            name: format!("{}/seen_minus_unseen", m.label),
            value: rate(&report, &m.label, SplitTag::TestSeen) - rate(&report, &m.label, SplitTag::TestUnseen),
        });
    }
    if let Some((first, rest)) = models.split_first() {
        for m in rest {
            for (split, tag) in [(SplitTag::TestSeen, "seen"), (SplitTag::TestUnseen, "unseen")] {
                comparisons.push(Comparison {
                    name: format!("{}_minus_{}/{tag}", first.label, m.label),
                    value: rate(&report, &first.label, split) - rate(&report, &m.label, split),
                });
            }
        }
    }
    report.comparisons = comparisons;
    Ok(report)
}

/// Text only, text plus goal sketch and text plus goal image on the same
/// episodes and seeds, for both evaluation splits.
pub fn run_multimodal_study(
    ctx: &StudyContext,
    model: &EvalModel,
    episodes: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    ctx.check_data()?;
    let mut report = ctx.report("multimodal", seed, &[model]);
    for split in [SplitTag::TestSeen, SplitTag::TestUnseen] {
        let recs = select_records(ctx.ds, split, episodes);
        let conditions: [(&str, fn(&DatasetRecord) -> Vec<GoalCondition>); 3] = [
            (TEXT, |_| Vec::new()),
            (TEXT_SKETCH, |r| vec![record_goals(r)[1].clone()]),
            (TEXT_IMAGE, |r| vec![record_goals(r)[0].clone()]),
        ];
        for (name, goals) in conditions {
            report
                .episodes
                .extend(ctx.plan_episodes(model, split, name, &recs, goals, seed)?);
        }
    }
    report.cells = summarize(&report.episodes);
    for split in [SplitTag::TestSeen, SplitTag::TestUnseen] {
        let tag = if split == SplitTag::TestSeen { "seen" } else { "unseen" };
        let d = |c| report.cell(&model.label, split, c).map(|c| c.mean_goal_distance);
        if let (Some(t), Some(ti)) = (d(TEXT), d(TEXT_IMAGE)) {
            report.comparisons.push(Comparison {
                name: format!("distance_ratio_image_over_text/{tag}"),
                value: if t > 0.0 { ti / t } else { f64::NAN },
            });
        }
    }
    Ok(report)
}

/// Planner plus inverse dynamics in the environment, closed loop against
/// open loop on the same episodes and seeds, with the inverse-dynamics
/// accuracy on held-back demonstration transitions.
pub fn run_execution_study(
    ctx: &StudyContext,
    model: &EvalModel,
    invdyn: &InvDynModel,
    invdyn_digest: &str,
    episodes: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    ctx.check_data()?;
    let world = &ctx.cfg.world;
    let mut report = ctx.report("execution", seed, &[model]);
    report.model_digests.insert("invdyn".into(), invdyn_digest.into());

    let transitions = demo_transitions(ctx.ds, SplitTag::TestSeen);
    let sigma = ctx.cfg.invdyn.sigma(world);
    for (name, s) in [("invdyn_accuracy_clean", 0.0), ("invdyn_accuracy_jitter", sigma)] {
        let mut rng = rng_for(seed, &[7]);
        report.metrics.push(Metric {
            name: name.into(),
            value: accuracy(invdyn, &transitions, s, &mut rng),
            trials: transitions.len(),
        });
    }

    let recs = select_records(ctx.ds, SplitTag::TestSeen, episodes);
    let instrs: Vec<ParsedInstruction> = recs
        .iter()
        .map(|r| parse(&r.instruction, ctx.lex))
        .collect::<std::result::Result<_, _>>()?;
    let eps: Vec<Episode> = recs
        .iter()
        .zip(&instrs)
        .map(|(r, i)| Episode {
            instruction: i,
            start: r.start().clone(),
            goals: Vec::new(),
        })
        .collect();
    let planner = ctx.planner(model);
    let closed = ctx.cfg.executor.clone();
    let open = ExecutorConfig::open_loop(world);
    for (name, exec) in [("closed_loop", &closed), ("open_loop", &open)] {
        let outcomes = execute(&planner, invdyn, &eps, exec, seed)?;
        for (i, (rec, o)) in recs.iter().zip(outcomes).enumerate() {
            let mut s = rec.start().clone();
            for &a in &o.actions {
                s = step(&s, Action::from_code(a).expect("valid code"), world);
            }
            report.episodes.push(EpisodeRecord {
                model: model.label.clone(),
                split: SplitTag::TestSeen,
                condition: name.into(),
                index: i,
                record_id: rec.id,
                instruction: rec.instruction.clone(),
                success: o.success,
                final_ok: o.success,
                legal: true,
                goal_distance: l2(&encode_state(&s, world).0, &encode_state(rec.goal_state(), world).0),
                goal_match: &s == rec.goal_state(),
                steps: Some(o.steps),
            });
        }
    }
    report.cells = summarize(&report.episodes);
    let rate = |c| report.cell(&model.label, SplitTag::TestSeen, c).map(|c| c.rate).unwrap_or(f64::NAN);
    report.comparisons.push(Comparison {
        name: "closed_minus_open".into(),
        value: rate("closed_loop") - rate("open_loop"),
    });
    Ok(report)
}
