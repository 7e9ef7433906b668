//! `compworld`: parse, generate, train, sample, execute and evaluate.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use compworld::checkpoint::{load_denoiser, load_invdyn, Checkpoint};
use compworld::config::RunConfig;
use compworld::diffusion::{record_goals, PlanRequest, Planner};
use compworld::evalsuite::{
    legal_plan, oracle_compose_test, run_execution_study, run_generalization_study, run_multimodal_study,
    EvalModel, ExperimentReport, OracleSettings, StudyContext,
};
use compworld::gridworld::{read_dataset, write_dataset, Cell, Dataset, Task};
use compworld::instr::{parse, Lexicon};
use compworld::nn::Denoiser;
use compworld::pipeline::{self, effective};
use compworld::util::rng_for;

#[derive(Parser)]
#[command(name = "compworld", version, about = "Compositional diffusion planning in a symbolic gridworld")]
struct Cli {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Compositional,
    Monolithic,
    Invdyn,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Study {
    Oracle,
    Generalization,
    Multimodal,
}

#[derive(Subcommand)]
enum Command {
    /// Print the primitive decomposition of an instruction, one record per line.
    Parse { instruction: Vec<String> },
    /// Print the effective configuration.
    Config,
    /// Generate the demonstration dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser or the inverse-dynamics model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        out: PathBuf,
        /// Override the number of optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a denoiser checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps (the schedule still spans --steps).
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Sample plans for an instruction.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        instruction: String,
        /// Start from a dataset record (requires --data).
        #[arg(long)]
        record: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Start from the configured layout with the agent at X,Y.
        #[arg(long, value_parser = parse_cell)]
        agent: Option<Cell>,
        /// Condition on the record's goal image.
        #[arg(long)]
        goal_image: bool,
        /// Condition on the record's goal sketch.
        #[arg(long)]
        goal_sketch: bool,
        #[arg(long, default_value_t = 1)]
        samples: usize,
    },
    /// Run planner plus inverse dynamics in the environment.
    Execute {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        planner: PathBuf,
        #[arg(long)]
        invdyn: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// Report log to append to.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run an evaluation study.
    Eval {
        #[arg(long, value_enum)]
        study: Study,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        compositional: Option<PathBuf>,
        #[arg(long)]
        monolithic: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn parse_cell(s: &str) -> std::result::Result<Cell, String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    let p = |v: &str| v.trim().parse::<i32>().map_err(|e| e.to_string());
    Ok(Cell::new(p(x)?, p(y)?))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds.master = s;
    }
    Ok(effective(&cfg))
}

/// Write the effective config next to an output file.
fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut p = out.as_os_str().to_owned();
    p.push(".config.toml");
    std::fs::write(&p, cfg.to_toml()?)?;
    Ok(())
}

fn load_data(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let ds = read_dataset(File::open(path).with_context(|| format!("opening {}", path.display()))?)?;
    pipeline::check_dataset(cfg, &ds)?;
    Ok(ds)
}

fn append_report(report: &ExperimentReport, path: Option<&Path>, cfg: &RunConfig, seconds: f64) -> Result<()> {
    if let Some(p) = path {
        report.append_to(p)?;
        echo_config(cfg, p)?;
        let mut t = p.as_os_str().to_owned();
        t.push(".timing.jsonl");
        let line = json!({"study": report.study, "seed": report.seed, "wall_clock_seconds": seconds});
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(t)?;
        use std::io::Write;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn print_cells(report: &ExperimentReport) {
    for c in &report.cells {
        println!(
            "{}\t{:?}\t{}\t{}/{}\t{:.3}\tdistance {:.3}",
            c.model, c.split, c.condition, c.successes, c.trials, c.rate, c.mean_goal_distance
        );
    }
    for c in &report.comparisons {
        println!("{}\t{:+.3}", c.name, c.value);
    }
    for m in &report.metrics {
        println!("{}\t{:.4}\t({} trials)", m.name, m.value, m.trials);
    }
}

fn eval_model<'a>(label: &str, net: &'a Denoiser<f32>, ck: &Checkpoint) -> EvalModel<'a> {
    EvalModel {
        label: label.into(),
        net,
        pooled: ck.meta.pooled,
        prediction: ck.meta.prediction,
        digest: ck.meta.config_digest.clone(),
    }
}

fn expect_pooling(ck: &Checkpoint, pooled: bool, what: &str) -> Result<()> {
    if ck.meta.pooled != pooled {
        return Err(compworld::Error::ConfigMismatch {
            what: format!("{what} checkpoint pooling"),
            expected: pooled.to_string(),
            found: ck.meta.pooled.to_string(),
        }
        .into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let lex = cfg.lexicon()?;
    match cli.command {
        Command::Parse { instruction } => cmd_parse(&instruction.join(" "), &lex),
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::GenData { out } => {
            let ds = pipeline::generate(&cfg, &lex)?;
            write_dataset(&ds, File::create(&out)?)?;
            echo_config(&cfg, &out)?;
            eprintln!("wrote {} records ({} tasks) to {}", ds.records.len(), ds.header.tasks.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            model,
            out,
            steps,
            resume,
            stop_at,
        } => {
            if let Some(s) = steps {
                match model {
                    ModelArg::Invdyn => cfg.invdyn.steps = s,
                    _ => cfg.train.steps = s,
                }
            }
            let ds = load_data(&cfg, &data)?;
            let log = |s: usize, l: f32| eprintln!("step {s} loss {l:.5}");
            let ck = match model {
                ModelArg::Invdyn => {
                    if resume.is_some() || stop_at.is_some() {
                        bail!("--resume and --stop-at apply to denoisers only");
                    }
                    pipeline::train_inverse_dynamics(&cfg, &lex, &ds, log)?
                }
                _ => {
                    let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
                    let pooled = model == ModelArg::Monolithic;
                    pipeline::train_denoiser(&cfg, &lex, &ds, pooled, resume.as_ref(), stop_at, log)?
                }
            };
            ck.save(&out)?;
            echo_config(&cfg, &out)?;
            eprintln!("wrote {} after {} steps", out.display(), ck.meta.train_steps);
            Ok(())
        }
        Command::Sample {
            checkpoint,
            instruction,
            record,
            data,
            agent,
            goal_image,
            goal_sketch,
            samples,
        } => {
            let (net, ck) = load_denoiser(&checkpoint, &cfg, &lex)?;
            let sched = cfg.schedule.build()?;
            let instr = parse(&instruction, &lex)?;
            let (start, goals) = match (record, agent) {
                (Some(id), None) => {
                    let path = data.context("--record needs --data")?;
                    let ds = load_data(&cfg, &path)?;
                    let rec = ds.records.get(id).context("no such record")?;
                    let [image, sketch] = record_goals(rec);
                    let mut goals = Vec::new();
                    if goal_image {
                        goals.push(image);
                    }
                    if goal_sketch {
                        goals.push(sketch);
                    }
                    (rec.start().clone(), goals)
                }
                (None, Some(cell)) => {
                    if goal_image || goal_sketch {
                        bail!("goal conditions come from a dataset record (--record)");
                    }
                    if !cfg.world.in_bounds(cell) {
                        bail!("agent cell out of bounds");
                    }
                    (cfg.world.initial_state(cell), Vec::new())
                }
                _ => bail!("give exactly one of --record or --agent"),
            };
            let planner = Planner {
                net: &net,
                sched: &sched,
                guidance: &cfg.guidance,
                lex: &lex,
                world: &cfg.world,
                prediction: ck.meta.prediction,
                pooled: ck.meta.pooled,
            };
            let task = Task::resolve(&instr, &cfg.world).ok();
            let reqs: Vec<PlanRequest> = (0..samples)
                .map(|_| PlanRequest {
                    instruction: &instr,
                    observation: &start,
                    goals: &goals,
                })
                .collect();
            let seed = pipeline::eval_seed(&cfg, 10);
            let mut rngs: Vec<_> = (0..samples).map(|i| rng_for(seed, &[i as u64])).collect();
            for (i, plan) in planner.plan_batch(&reqs, &mut rngs)?.iter().enumerate() {
                let success = task.as_ref().map(|t| t.satisfied(plan.states.last().unwrap()));
                let line = json!({
                    "sample": i,
                    "instruction": instr.normalized(),
                    "success": success,
                    "legal": legal_plan(&plan.states, &cfg.world),
                    "states": plan.states,
                });
                println!("{line}");
            }
            Ok(())
        }
        Command::Execute {
            data,
            planner,
            invdyn,
            episodes,
            report,
        } => {
            let t0 = Instant::now();
            let ds = load_data(&cfg, &data)?;
            let sched = cfg.schedule.build()?;
            let (net, ck) = load_denoiser(&planner, &cfg, &lex)?;
            let inv = load_invdyn(&invdyn, &cfg, &lex)?;
            let ctx = StudyContext {
                cfg: &cfg,
                lex: &lex,
                ds: &ds,
                sched: &sched,
            };
            let label = if ck.meta.pooled { "monolithic" } else { "compositional" };
            let r = run_execution_study(
                &ctx,
                &eval_model(label, &net, &ck),
                &inv,
                &cfg.invdyn_digest(),
                episodes.unwrap_or(cfg.eval.execution_episodes),
                pipeline::eval_seed(&cfg, 3),
            )?;
            print_cells(&r);
            append_report(&r, report.as_deref(), &cfg, t0.elapsed().as_secs_f64())
        }
        Command::Eval {
            study,
            data,
            compositional,
            monolithic,
            episodes,
            report,
        } => {
            let t0 = Instant::now();
            let sched = cfg.schedule.build()?;
            if study == Study::Oracle {
                let out = oracle_compose_test(
                    &sched,
                    &OracleSettings {
                        samples: cfg.eval.oracle_samples,
                        seed: pipeline::eval_seed(&cfg, 0),
                        ..OracleSettings::default()
                    },
                )?;
                println!(
                    "{} mean {:.4} var {:.4} (target {:.4}, {:.4}) over {} samples",
                    if out.pass { "PASS" } else { "FAIL" },
                    out.mean,
                    out.var,
                    out.target_mean,
                    out.target_var,
                    out.samples
                );
                if !out.pass {
                    bail!("oracle composition check failed");
                }
                return Ok(());
            }
            let ds = load_data(&cfg, &data.context("--data is required")?)?;
            let ctx = StudyContext {
                cfg: &cfg,
                lex: &lex,
                ds: &ds,
                sched: &sched,
            };
            let comp_path = compositional.context("--compositional is required")?;
            let (comp_net, comp_ck) = load_denoiser(&comp_path, &cfg, &lex)?;
            expect_pooling(&comp_ck, false, "compositional")?;
            let comp = eval_model("compositional", &comp_net, &comp_ck);
            let r = match study {
                Study::Generalization => {
                    let mono_path = monolithic.context("--monolithic is required")?;
                    let (mono_net, mono_ck) = load_denoiser(&mono_path, &cfg, &lex)?;
                    expect_pooling(&mono_ck, true, "monolithic")?;
                    let models = [comp, eval_model("monolithic", &mono_net, &mono_ck)];
                    run_generalization_study(
                        &ctx,
                        &models,
                        episodes.unwrap_or(cfg.eval.episodes_per_cell),
                        pipeline::eval_seed(&cfg, 1),
                    )?
                }
                Study::Multimodal => run_multimodal_study(
                    &ctx,
                    &comp,
                    episodes.unwrap_or(cfg.eval.multimodal_episodes),
                    pipeline::eval_seed(&cfg, 2),
                )?,
                Study::Oracle => unreachable!(),
            };
            print_cells(&r);
            append_report(&r, report.as_deref(), &cfg, t0.elapsed().as_secs_f64())
        }
    }
}

fn cmd_parse(text: &str, lex: &Lexicon) -> Result<()> {
    let p = parse(text, lex)?;
    for (i, prim) in p.primitives.iter().enumerate() {
        println!(
            "{}",
            json!({"index": i, "kind": prim.kind.to_string(), "text": prim.text(), "tokens": prim.tokens})
        );
    }
    Ok(())
}
