use rand::seq::{IndexedRandom, SliceRandom};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    expert_plan_to, expert_to, step, Action, Cell, Demonstration, Goal, SplitTag, Task,
    WorldConfig, WorldError, WorldState,
};
use crate::encoding::{frame_dim, make_goal, sketch_dim, traj_dim, GoalKind};
use crate::instr::{parse, Lexicon, ParsedInstruction};
use crate::util::{digest_json, rng_for};
use crate::{Error, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    /// Task templates expanded over the world's objects and places.
    pub templates: Vec<String>,
    /// Full instructions withheld from training.
    pub holdout: Vec<String>,
    pub n_per_task: usize,
    /// Extra test_seen records per training task.
    pub n_eval_per_task: usize,
    /// Probability that a training record starts part-way through an expert episode.
    pub p_mid_start: f64,
    /// Place objects on random free cells instead of their configured cells.
    pub random_layout: bool,
    /// Near tasks end on a random free cell next to the anchor instead of the
    /// closest one, so the final frame is not implied by instruction and start.
    pub random_near_target: bool,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            templates: vec![
                "pick {obj}".into(),
                "move {obj} near {obj}".into(),
                "place {obj} into {container}".into(),
            ],
            holdout: vec![
                "move red block near yellow block".into(),
                "move yellow block near red block".into(),
                "place green block into top drawer".into(),
            ],
            n_per_task: 200,
            n_eval_per_task: 10,
            p_mid_start: 0.5,
            random_layout: false,
            random_near_target: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub kind: String,
    pub config_digest: String,
    pub lexicon_hash: String,
    pub frame_dim: usize,
    pub traj_dim: usize,
    pub sketch_dim: usize,
    pub horizon: usize,
    pub n_records: usize,
    pub tasks: Vec<String>,
    pub world: WorldConfig,
    pub params: GenerationParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: usize,
    pub task: usize,
    pub instruction: String,
    pub split: SplitTag,
    pub states: Vec<WorldState>,
    pub actions: Vec<u8>,
    pub goal_image: Vec<f32>,
    pub goal_sketch: Vec<f32>,
}

impl DatasetRecord {
    pub fn demonstration(&self, lex: &Lexicon) -> Result<Demonstration> {
        let instruction = parse(&self.instruction, lex)?;
        let actions = self
            .actions
            .iter()
            .map(|&c| Action::from_code(c).ok_or_else(|| Error::Format(format!("bad action code {c}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Demonstration {
            goal_state: self.states.last().cloned().unwrap_or_else(|| self.states[0].clone()),
            states: self.states.clone(),
            actions,
            instruction,
            split_tag: self.split,
        })
    }

    pub fn start(&self) -> &WorldState {
        &self.states[0]
    }

    pub fn goal_state(&self) -> &WorldState {
        self.states.last().expect("non-empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn split(&self, tag: SplitTag) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == tag)
    }

    pub fn world(&self) -> &WorldConfig {
        &self.header.world
    }
}

/// Expand templates over the entities present in `cfg`, in template order.
pub fn world_tasks(cfg: &WorldConfig, lex: &Lexicon, templates: &[String]) -> Result<Vec<String>> {
    let spec = crate::instr::LexiconSpec {
        verbs: lex.verbs().to_vec(),
        prepositions: lex.prepositions().to_vec(),
        objects: cfg.objects.iter().map(|o| o.name.clone()).collect(),
        containers: cfg.containers.iter().map(|o| o.name.clone()).collect(),
        locations: cfg.locations.iter().map(|o| o.name.clone()).collect(),
    };
    let world_lex = Lexicon::new(&spec)?;
    let refs: Vec<&str> = templates.iter().map(String::as_str).collect();
    Ok(crate::instr::enumerate_corpus(&world_lex, &refs)?
        .into_iter()
        .map(|(raw, _)| raw)
        .collect())
}

/// Sample a start from which the expert solves `task` within the horizon,
/// together with the end cell a near task is steered to (when
/// `random_target` is set). Objects sit at their configured cells and the
/// agent at a random cell. When the full expert plan is longer than the
/// horizon allows, the start moves along the expert rollout just far enough
/// to fit; with probability `p_mid` it instead moves to a uniformly chosen
/// later point of the rollout.
fn sample_start(
    task: &Task,
    cfg: &WorldConfig,
    p_mid: f64,
    random_layout: bool,
    random_target: bool,
    rng: &mut ChaCha8Rng,
) -> Option<(WorldState, Option<Cell>)> {
    let budget = cfg.plan_actions();
    let cells: Vec<Cell> = cfg.cells().collect();
    let places = cfg.place_cells();
    for _ in 0..10_000 {
        let mut fresh = cfg.initial_state(cells[rng.random_range(0..cells.len())]);
        if random_layout {
            let mut free: Vec<Cell> = cells.iter().copied().filter(|c| !places.contains(c)).collect();
            free.shuffle(rng);
            fresh.object_pos = free[..cfg.n_objects()].to_vec();
        }
        if task.satisfied(&fresh) {
            continue;
        }
        let target = match task.goal {
            Goal::Near(y) if random_target => {
                let anchor = fresh.object_pos[y];
                let free: Vec<Cell> = cfg
                    .cells()
                    .filter(|c| c.chebyshev(anchor) <= 1)
                    .filter(|c| {
                        (0..cfg.n_objects()).all(|i| i == task.object || fresh.object_pos[i] != *c)
                    })
                    .collect();
                free.choose(rng).copied()
            }
            _ => None,
        };
        let plan = match expert_plan_to(task, &fresh, cfg, target) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let lo = plan.len().saturating_sub(budget);
        let k = if rng.random_bool(p_mid) && plan.len() > 1 {
            rng.random_range(lo.max(1)..plan.len())
        } else {
            lo
        };
        let mut s = fresh;
        for &a in &plan[..k] {
            s = step(&s, a, cfg);
        }
        return Some((s, target));
    }
    None
}

pub fn generate_dataset(
    cfg: &WorldConfig,
    lex: &Lexicon,
    params: &GenerationParams,
) -> Result<Dataset> {
    cfg.validate(lex)?;
    let tasks = world_tasks(cfg, lex, &params.templates)?;
    let parsed: Vec<ParsedInstruction> = tasks
        .iter()
        .map(|t| parse(t, lex))
        .collect::<std::result::Result<_, _>>()?;
    let resolved: Vec<Task> = parsed
        .iter()
        .map(|p| Task::resolve(p, cfg))
        .collect::<std::result::Result<_, _>>()?;

    let mut held_out = vec![false; tasks.len()];
    for h in &params.holdout {
        let normalized = parse(h, lex)?.normalized();
        let i = tasks
            .iter()
            .position(|t| *t == normalized)
            .ok_or_else(|| WorldError::UnknownHoldout(h.clone()))?;
        held_out[i] = true;
    }
    for (i, p) in parsed.iter().enumerate().filter(|(i, _)| held_out[*i]) {
        for prim in &p.primitives {
            let covered = parsed
                .iter()
                .enumerate()
                .any(|(j, q)| !held_out[j] && q.primitives.contains(prim));
            if !covered {
                return Err(WorldError::HoldoutCoversPrimitive {
                    instruction: tasks[i].clone(),
                    primitive: prim.text(),
                }
                .into());
            }
        }
    }

    let mut records = Vec::new();
    for (ti, task) in resolved.iter().enumerate() {
        let plan: Vec<(SplitTag, usize, f64)> = if held_out[ti] {
            vec![(SplitTag::TestUnseen, params.n_per_task, 0.0)]
        } else {
            vec![
                (SplitTag::Train, params.n_per_task, params.p_mid_start),
                (SplitTag::TestSeen, params.n_eval_per_task, 0.0),
            ]
        };
        for (split, count, p_mid) in plan {
            for ri in 0..count {
                let mut rng = rng_for(params.seed, &[ti as u64, split as u64, ri as u64]);
                let (start, target) = sample_start(
                    task,
                    cfg,
                    p_mid,
                    params.random_layout,
                    params.random_near_target,
                    &mut rng,
                )
                .ok_or_else(|| WorldError::NoFeasibleStart(tasks[ti].clone()))?;
                let demo = expert_to(&parsed[ti], &start, cfg, target)?;
                records.push(DatasetRecord {
                    id: records.len(),
                    task: ti,
                    instruction: tasks[ti].clone(),
                    split,
                    goal_image: make_goal(GoalKind::GoalImage, &demo.goal_state, cfg).values,
                    goal_sketch: make_goal(GoalKind::GoalSketch, &demo.goal_state, cfg).values,
                    actions: demo.actions.iter().map(|a| a.code()).collect(),
                    states: demo.states,
                });
            }
        }
    }

    let header = DatasetHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        kind: "dataset".into(),
        config_digest: digest_json(&(cfg, params)),
        lexicon_hash: lex.version_hash().to_owned(),
        frame_dim: frame_dim(cfg),
        traj_dim: traj_dim(cfg),
        sketch_dim: sketch_dim(cfg),
        horizon: cfg.horizon,
        n_records: records.len(),
        tasks,
        world: cfg.clone(),
        params: params.clone(),
    };
    Ok(Dataset { header, records })
}

pub fn write_dataset<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    serde_json::to_writer(&mut w, &ds.header)?;
    w.write_all(b"\n")?;
    for r in &ds.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut lines = BufReader::new(input).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)?;
    if header.schema_version != DATASET_SCHEMA_VERSION || header.kind != "dataset" {
        return Err(Error::Format(format!(
            "unsupported dataset schema {} ({})",
            header.schema_version, header.kind
        )));
    }
    let mut records = Vec::with_capacity(header.n_records);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    if records.len() != header.n_records {
        return Err(Error::Format(format!(
            "header announces {} records, found {}",
            header.n_records,
            records.len()
        )));
    }
    Ok(Dataset { header, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::NamedCell;
    use crate::util::digest_bytes;

    fn blocks_world() -> WorldConfig {
        WorldConfig::default()
    }

    fn near_params(holdout: &[&str], n: usize) -> GenerationParams {
        GenerationParams {
            templates: vec!["move {obj} near {obj}".into()],
            holdout: holdout.iter().map(|s| s.to_string()).collect(),
            n_per_task: n,
            n_eval_per_task: 2,
            p_mid_start: 0.5,
            random_layout: false,
            random_near_target: false,
            seed: 11,
        }
    }

    #[test]
    fn split_counts_and_hygiene() {
        let cfg = blocks_world();
        let lex = Lexicon::default();
        let params = near_params(
            &["move red block near yellow block", "move blue block near green block"],
            50,
        );
        let ds = generate_dataset(&cfg, &lex, &params).unwrap();
        assert_eq!(ds.header.tasks.len(), 12);
        assert_eq!(ds.split(SplitTag::Train).count(), 500);
        assert_eq!(ds.split(SplitTag::TestUnseen).count(), 100);
        assert_eq!(ds.split(SplitTag::TestSeen).count(), 20);

        let unseen: Vec<&str> = ds
            .split(SplitTag::TestUnseen)
            .map(|r| r.instruction.as_str())
            .collect();
        assert!(ds
            .split(SplitTag::Train)
            .all(|r| !unseen.contains(&r.instruction.as_str())));

        // each held-out primitive is still trained
        let train: Vec<String> = ds.split(SplitTag::Train).map(|r| r.instruction.clone()).collect();
        assert!(train.iter().any(|t| t.starts_with("move red block near")));
        assert!(train.iter().any(|t| t.ends_with("near yellow block")));
    }

    #[test]
    fn records_replay_and_succeed() {
        let cfg = blocks_world();
        let lex = Lexicon::default();
        let ds = generate_dataset(&cfg, &lex, &GenerationParams {
            n_per_task: 5,
            n_eval_per_task: 2,
            ..GenerationParams::default()
        })
        .unwrap();
        for r in &ds.records {
            let demo = r.demonstration(&lex).unwrap();
            assert_eq!(demo.states.len(), cfg.horizon);
            assert_eq!(demo.states.len(), demo.actions.len() + 1);
            for (i, &a) in demo.actions.iter().enumerate() {
                assert_eq!(step(&demo.states[i], a, &cfg), demo.states[i + 1]);
            }
            let task = Task::resolve(&demo.instruction, &cfg).unwrap();
            assert!(task.satisfied(&demo.goal_state));
            assert!(!task.satisfied(&demo.states[0]));
            assert!(demo.states.iter().all(|s| s.is_valid(&cfg)));
        }
    }

    #[test]
    fn random_near_targets_vary_the_end_cell() {
        let cfg = blocks_world();
        let lex = Lexicon::default();
        let params = GenerationParams {
            random_near_target: true,
            ..near_params(&[], 40)
        };
        let ds = generate_dataset(&cfg, &lex, &params).unwrap();
        let mut ends = std::collections::HashSet::new();
        for r in ds.split(SplitTag::Train).filter(|r| r.task == 0) {
            let demo = r.demonstration(&lex).unwrap();
            for (i, &a) in demo.actions.iter().enumerate() {
                assert_eq!(step(&demo.states[i], a, &cfg), demo.states[i + 1]);
            }
            let task = Task::resolve(&demo.instruction, &cfg).unwrap();
            assert!(task.satisfied(&demo.goal_state));
            ends.insert(demo.goal_state.object_pos[task.object]);
        }
        assert!(ends.len() > 1, "{ends:?}");

        let nearest = generate_dataset(&cfg, &lex, &near_params(&[], 40)).unwrap();
        assert_ne!(nearest.header.config_digest, ds.header.config_digest);
    }

    #[test]
    fn holdout_must_leave_primitives_in_training() {
        let cfg = WorldConfig {
            objects: vec![
                NamedCell::new("red block", 0, 1),
                NamedCell::new("blue block", 4, 1),
            ],
            ..blocks_world()
        };
        let lex = Lexicon::default();
        let params = near_params(&["move red block near blue block"], 3);
        assert!(matches!(
            generate_dataset(&cfg, &lex, &params),
            Err(Error::World(WorldError::HoldoutCoversPrimitive { .. }))
        ));
        let params = near_params(&["move red block near purple block"], 3);
        assert!(generate_dataset(&cfg, &lex, &params).is_err());
    }

    #[test]
    fn fixed_seed_gives_identical_bytes() {
        let cfg = blocks_world();
        let lex = Lexicon::default();
        let params = near_params(&["move red block near yellow block"], 8);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_dataset(&generate_dataset(&cfg, &lex, &params).unwrap(), &mut a).unwrap();
        write_dataset(&generate_dataset(&cfg, &lex, &params).unwrap(), &mut b).unwrap();
        assert_eq!(digest_bytes(&a), digest_bytes(&b));
        let back = read_dataset(&a[..]).unwrap();
        let mut c = Vec::new();
        write_dataset(&back, &mut c).unwrap();
        assert_eq!(a, c);

        let other = near_params(&["move red block near yellow block"], 8);
        let other = GenerationParams { seed: 12, ..other };
        let mut d = Vec::new();
        write_dataset(&generate_dataset(&cfg, &lex, &other).unwrap(), &mut d).unwrap();
        assert_ne!(a, d);
    }
}
