use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use ssco_core::config::{EnvKind, RunConfig};
use ssco_core::env::io::{load_aim, load_sop, write_aim, write_sop};
use ssco_core::env::{AimEnv, Environment, SopEnv};
use ssco_core::geometry::MtsLossConfig;
use ssco_core::harness::stats::mean_sem;
use ssco_core::harness::{
    calibration, calibration_pairs, collect_decisions, fingerprint, geometry_diagnostics,
    kendall_protocol, results_table, EvalReport, KendallConfig, ResultRow,
};
use ssco_core::heuristics::{
    aim_heuristic_episode, budget_allocate, ga_optimize, sop_allocation_episode, AimSelector,
    BudgetSchedule, GaConfig,
};
use ssco_core::oracle::{oracle_episode, oracle_solve, Oracle, OracleConfig};
use ssco_core::trainer::{evaluate_agent, Agent, Trainer, EVAL_EPISODE_BASE};
use ssco_core::world_model::AgentCheckpoint;

use crate::Common;

/// Held-out instances use seeds this far above the training seeds.
const HELD_OUT_SEED_OFFSET: u64 = 1_000_000;
/// Minimum kendall tau reported as acceptable by `validate`.
const KENDALL_THRESHOLD: f64 = 0.5;
/// Executed decisions gathered for geometry diagnostics.
const GEOMETRY_TRANSITIONS: usize = 500;

pub enum Outcome {
    Ok,
    ValidationFailed,
}

pub struct ValidateOptions {
    pub checkpoint: Option<PathBuf>,
    pub strict: bool,
    pub held_out: usize,
    pub states: usize,
    pub resamples: usize,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let cfg = match (&c.config, &c.preset) {
        (Some(path), _) => {
            RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?
        }
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::desk(),
    };
    cfg.validate()?;
    Ok(cfg)
}

enum Envs {
    Aim(Vec<AimEnv>),
    Sop(Vec<SopEnv>),
}

fn instance_files(dir: &Path, kind: EnvKind) -> Result<Vec<PathBuf>> {
    let prefix = match kind {
        EnvKind::Aim => "aim-",
        EnvKind::Sop => "sop-",
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with(prefix))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no {prefix}*.json instance files in {}", dir.display());
    }
    Ok(files)
}

/// Training instances: from `--instances` if given, otherwise generated.
fn training_envs(cfg: &RunConfig, c: &Common) -> Result<Envs> {
    let e = &cfg.env;
    if let Some(dir) = &c.instances {
        let files = instance_files(dir, e.kind)?;
        return Ok(match e.kind {
            EnvKind::Aim => Envs::Aim(
                files
                    .iter()
                    .map(|f| Ok(AimEnv::new(load_aim(f)?, e.aim_config())))
                    .collect::<Result<_>>()?,
            ),
            EnvKind::Sop => Envs::Sop(
                files
                    .iter()
                    .map(|f| Ok(SopEnv::new(load_sop(f)?, e.sop_config())))
                    .collect::<Result<_>>()?,
            ),
        });
    }
    generated_envs(cfg, e.instance_seed, e.instances)
}

fn generated_envs(cfg: &RunConfig, seed: u64, count: usize) -> Result<Envs> {
    let e = &cfg.env;
    Ok(match e.kind {
        EnvKind::Aim => Envs::Aim(e.aim_envs(seed, count)?),
        EnvKind::Sop => Envs::Sop(e.sop_envs(seed, count)?),
    })
}

fn held_out_envs(cfg: &RunConfig, count: usize) -> Result<Envs> {
    generated_envs(cfg, cfg.env.instance_seed + HELD_OUT_SEED_OFFSET, count)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn env_label(kind: EnvKind) -> &'static str {
    match kind {
        EnvKind::Aim => "aim",
        EnvKind::Sop => "sop",
    }
}

pub fn gen(c: &Common) -> Result<Outcome> {
    let cfg = load_config(c)?;
    let dir = c.out.join("instances");
    create_out(&dir)?;
    let label = env_label(cfg.env.kind);
    let texts: Vec<String> = match generated_envs(&cfg, cfg.env.instance_seed, cfg.env.instances)? {
        Envs::Aim(envs) => envs.iter().map(|e| write_aim(e.graph())).collect(),
        Envs::Sop(envs) => envs.iter().map(|e| write_sop(e.instance())).collect(),
    };
    for (i, text) in texts.iter().enumerate() {
        let path = dir.join(format!("{label}-{i:03}.json"));
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} instances to {}", texts.len(), dir.display());
    Ok(Outcome::Ok)
}

/// Geometry and ordering diagnostics appended to metrics records.
#[derive(Serialize)]
struct Diagnostics {
    cap_risk: f64,
    mean_displacement: f64,
    margins: Vec<f64>,
    /// `(subgoal, mean duration)` for subgoals chosen in the probe rollouts.
    subgoal_durations: Vec<(usize, f64)>,
    kendall_tau: f64,
}

fn diagnostics<E: Environment>(
    envs: &[E],
    agent: Agent<'_>,
    loss: &MtsLossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Diagnostics> {
    let decisions = collect_decisions(envs, agent, 1, rng)?;
    let g = geometry_diagnostics(envs, agent, &decisions, loss.kappa);
    let kendall = kendall_protocol(
        envs,
        agent,
        &KendallConfig {
            states: 10,
            executions: 5,
        },
        rng,
    )?;
    Ok(Diagnostics {
        cap_risk: g.cap_risk,
        mean_displacement: g.mean_displacement,
        margins: agent.model.margins(),
        subgoal_durations: g
            .subgoals
            .iter()
            .map(|s| (s.subgoal, s.mean_duration))
            .collect(),
        kendall_tau: kendall.mean_tau,
    })
}

fn model_config<E: Environment>(cfg: &RunConfig, env: &E) -> ssco_core::world_model::ModelConfig {
    cfg.model
        .model_config(env.feature_dim(), env.max_decision_budget())
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    fingerprint: String,
    epochs: usize,
    best_epoch: Option<(usize, f64)>,
    eval_mean: f64,
    eval_sem: f64,
    eval_episodes: usize,
}

fn train_on<E: Environment>(
    envs: &[E],
    cfg: &RunConfig,
    seed: u64,
    metrics: Option<&mut dyn Write>,
) -> Result<(AgentCheckpoint, TrainSummary)> {
    let mut trainer = Trainer::new(
        envs,
        model_config(cfg, &envs[0]),
        cfg.model.ll_hidden,
        cfg.train.clone(),
        cfg.search.clone(),
        cfg.loss.clone(),
        seed,
    )?;
    let mut diag_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1a9);
    let mut metrics = metrics;
    for _ in 0..cfg.train.epochs {
        let m = trainer.run_epoch()?;
        if let Some(out) = metrics.as_deref_mut() {
            let mut line = serde_json::to_value(&m)?;
            if m.eval_return_mean.is_some() {
                let d = diagnostics(envs, trainer.agent(), &cfg.loss, &mut diag_rng)?;
                line["diagnostics"] = serde_json::to_value(d)?;
            }
            writeln!(out, "{line}")?;
        }
    }
    let best_epoch = trainer.best_epoch();
    trainer.restore_best();
    let eval = trainer.evaluate(cfg.train.eval_episodes)?;
    let summary = TrainSummary {
        seed,
        fingerprint: fingerprint(cfg)?,
        epochs: cfg.train.epochs,
        best_epoch,
        eval_mean: eval.mean,
        eval_sem: eval.sem,
        eval_episodes: eval.episodes,
    };
    Ok((trainer.checkpoint(), summary))
}

pub fn train(c: &Common) -> Result<Outcome> {
    let cfg = load_config(c)?;
    create_out(&c.out)?;
    let metrics_path = c.out.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(
        fs::File::create(&metrics_path)
            .with_context(|| format!("creating {}", metrics_path.display()))?,
    );
    let (ck, summary) = match training_envs(&cfg, c)? {
        Envs::Aim(envs) => train_on(&envs, &cfg, c.seed, Some(&mut metrics))?,
        Envs::Sop(envs) => train_on(&envs, &cfg, c.seed, Some(&mut metrics))?,
    };
    metrics.flush()?;
    ck.save(&c.out.join("checkpoint.json"))?;
    write_json(&c.out.join("summary.json"), &summary)?;
    fs::write(c.out.join("config.toml"), cfg.to_toml()?)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(Outcome::Ok)
}

fn load_checkpoint(c: &Common, path: Option<PathBuf>) -> Result<AgentCheckpoint> {
    let path = path.unwrap_or_else(|| c.out.join("checkpoint.json"));
    AgentCheckpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn agent<'a>(ck: &'a AgentCheckpoint, cfg: &'a RunConfig) -> Agent<'a> {
    Agent {
        model: &ck.model,
        low_level: &ck.low_level,
        search: &cfg.search,
        ll_discount: cfg.train.ll_discount,
    }
}

fn check_compatible<E: Environment>(ck: &AgentCheckpoint, envs: &[E]) -> Result<()> {
    let mc = &ck.model.config;
    let env = &envs[0];
    if mc.feature_dim != env.feature_dim() || mc.budget.max_budget != env.max_decision_budget() {
        bail!(
            "checkpoint expects feature width {} and budget cap {}, instances have {} and {}",
            mc.feature_dim,
            mc.budget.max_budget,
            env.feature_dim(),
            env.max_decision_budget()
        );
    }
    Ok(())
}

fn eval_on<E: Environment>(
    envs: &[E],
    ck: &AgentCheckpoint,
    cfg: &RunConfig,
    episodes: usize,
) -> Result<Value> {
    check_compatible(ck, envs)?;
    let returns = evaluate_agent(envs, agent(ck, cfg), episodes)?;
    let per_instance: Vec<f64> = returns
        .chunks(episodes.max(1))
        .map(|c| mean_sem(c).0)
        .collect();
    let (mean, sem) = mean_sem(&returns);
    Ok(json!({
        "instances": envs.len(),
        "episodes_per_instance": episodes,
        "mean": mean,
        "sem": sem,
        "per_instance": per_instance,
    }))
}

pub fn eval(c: &Common, checkpoint: Option<PathBuf>, episodes: Option<usize>) -> Result<Outcome> {
    let cfg = load_config(c)?;
    let ck = load_checkpoint(c, checkpoint)?;
    let episodes = episodes.unwrap_or(cfg.train.eval_episodes);
    let report = match training_envs(&cfg, c)? {
        Envs::Aim(envs) => eval_on(&envs, &ck, &cfg, episodes)?,
        Envs::Sop(envs) => eval_on(&envs, &ck, &cfg, episodes)?,
    };
    create_out(&c.out)?;
    write_json(&c.out.join("eval.json"), &report)?;
    println!("{report}");
    Ok(Outcome::Ok)
}

pub fn oracle(c: &Common, rollouts: usize) -> Result<Outcome> {
    let cfg = load_config(c)?;
    let Envs::Aim(envs) = training_envs(&cfg, c)? else {
        bail!("the exact oracle supports AIM instances only");
    };
    create_out(&c.out)?;
    let mut rows = Vec::new();
    for (i, env) in envs.iter().enumerate() {
        let start = Instant::now();
        let res = oracle_solve(env.graph(), env.horizon(), env.total_budget())?;
        let solve_seconds = start.elapsed().as_secs_f64();
        let mut row = json!({
            "instance": i,
            "optimal_value": res.optimal_value,
            "first_allocation": res.optimal_first_allocation,
            "node_expansions": res.node_expansions,
            "solve_seconds": solve_seconds,
        });
        if rollouts > 0 {
            let mut o = Oracle::new(env.graph(), env.horizon(), OracleConfig::default())?;
            let returns = (0..rollouts as u64)
                .map(|e| oracle_episode(&mut o, env, EVAL_EPISODE_BASE + e))
                .collect::<ssco_core::Result<Vec<f64>>>()?;
            let (mean, sem) = mean_sem(&returns);
            row["rollout_mean"] = json!(mean);
            row["rollout_sem"] = json!(sem);
            row["within_3_sem"] = json!((mean - res.optimal_value).abs() <= 3.0 * sem);
        }
        println!("{row}");
        rows.push(row);
    }
    write_json(&c.out.join("oracle.json"), &rows)?;
    Ok(Outcome::Ok)
}

fn heuristic_report(per_instance: Vec<f64>) -> EvalReport {
    EvalReport::from_seed_means(per_instance, String::new())
}

pub fn baselines(c: &Common, episodes: usize, cycle: usize) -> Result<Outcome> {
    let cfg = load_config(c)?;
    let e = &cfg.env;
    let schedules = [
        ("average", BudgetSchedule::average()),
        ("normal", BudgetSchedule::normal()),
        ("static", BudgetSchedule::fixed_cycle(cycle)),
    ];
    let label = env_label(e.kind);
    let mut rows = Vec::new();
    match training_envs(&cfg, c)? {
        Envs::Aim(envs) => {
            for (sname, schedule) in &schedules {
                for (pname, selector) in [
                    ("degree", AimSelector::Degree),
                    ("score", AimSelector::Score),
                ] {
                    let per_instance = envs
                        .iter()
                        .map(|env| {
                            let r = (0..episodes as u64)
                                .map(|ep| {
                                    aim_heuristic_episode(
                                        env,
                                        schedule,
                                        selector,
                                        EVAL_EPISODE_BASE + ep,
                                    )
                                })
                                .collect::<ssco_core::Result<Vec<f64>>>()?;
                            Ok(mean_sem(&r).0)
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    let name = format!("{sname}-{pname}");
                    rows.push(ResultRow::from_report(
                        &name,
                        label,
                        e.nodes,
                        e.horizon,
                        e.budget,
                        &heuristic_report(per_instance),
                    ));
                }
            }
        }
        Envs::Sop(envs) => {
            let cap = e.max_decision_budget.unwrap_or(e.budget).min(e.daily_cap);
            for (sname, schedule) in &schedules {
                let alloc: Vec<usize> = (0..e.horizon)
                    .map(|d| budget_allocate(schedule, e.budget, e.horizon, d).min(cap))
                    .collect();
                let per_instance = envs
                    .iter()
                    .map(|env| {
                        let r = (0..episodes as u64)
                            .map(|ep| sop_allocation_episode(env, &alloc, EVAL_EPISODE_BASE + ep))
                            .collect::<ssco_core::Result<Vec<f64>>>()?;
                        Ok(mean_sem(&r).0)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                rows.push(ResultRow::from_report(
                    &format!("{sname}-greedy"),
                    label,
                    e.nodes,
                    e.horizon,
                    e.budget,
                    &heuristic_report(per_instance),
                ));
            }
            let per_instance = envs
                .iter()
                .map(|env| {
                    // Allocations are searched on training episodes and scored on evaluation ones.
                    let ga = ga_optimize(
                        e.horizon,
                        e.budget,
                        cap,
                        &GaConfig::default(),
                        c.seed,
                        |a, ep| sop_allocation_episode(env, a, ep),
                    )?;
                    let r = (0..episodes as u64)
                        .map(|ep| {
                            sop_allocation_episode(env, &ga.allocation, EVAL_EPISODE_BASE + ep)
                        })
                        .collect::<ssco_core::Result<Vec<f64>>>()?;
                    Ok(mean_sem(&r).0)
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(ResultRow::from_report(
                "ga-greedy",
                label,
                e.nodes,
                e.horizon,
                e.budget,
                &heuristic_report(per_instance),
            ));
        }
    }
    let table = results_table(&rows);
    create_out(&c.out)?;
    fs::write(c.out.join("baselines.tsv"), &table)?;
    print!("{table}");
    Ok(Outcome::Ok)
}

fn validate_on<E: Environment>(
    envs: &[E],
    ck: &AgentCheckpoint,
    cfg: &RunConfig,
    opts: &ValidateOptions,
    seed: u64,
) -> Result<Value> {
    check_compatible(ck, envs)?;
    let agent = agent(ck, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kendall = kendall_protocol(
        envs,
        agent,
        &KendallConfig {
            states: opts.states,
            executions: 5,
        },
        &mut rng,
    )?;
    let per_episode = envs.len() * envs[0].horizon();
    let episodes = GEOMETRY_TRANSITIONS.div_ceil(per_episode.max(1));
    let decisions = collect_decisions(envs, agent, episodes, &mut rng)?;
    let mut geometry = geometry_diagnostics(envs, agent, &decisions, cfg.loss.kappa);
    geometry.kendall_tau = Some(kendall.mean_tau);
    let pairs = calibration_pairs(envs, agent, &decisions);
    let calib = calibration(&pairs, opts.resamples, &mut rng);
    let kendall_ok = kendall.mean_tau >= KENDALL_THRESHOLD;
    let geometry_ok = geometry.holds();
    let mut flags = Vec::new();
    if !kendall_ok {
        flags.push(format!(
            "kendall tau {:.3} below threshold {KENDALL_THRESHOLD}",
            kendall.mean_tau
        ));
    }
    if !geometry_ok {
        flags.push("geometry bounds violated beyond 3 s.e.".to_string());
    }
    Ok(json!({
        "held_out_instances": envs.len(),
        "kendall": kendall,
        "kendall_threshold": KENDALL_THRESHOLD,
        "kendall_ok": kendall_ok,
        "geometry": geometry,
        "geometry_ok": geometry_ok,
        "calibration": calib,
        "flags": flags,
        "passed": kendall_ok && geometry_ok,
    }))
}

pub fn validate(c: &Common, opts: &ValidateOptions) -> Result<Outcome> {
    let cfg = load_config(c)?;
    let ck = load_checkpoint(c, opts.checkpoint.clone())?;
    let report = match held_out_envs(&cfg, opts.held_out.max(1))? {
        Envs::Aim(envs) => validate_on(&envs, &ck, &cfg, opts, c.seed)?,
        Envs::Sop(envs) => validate_on(&envs, &ck, &cfg, opts, c.seed)?,
    };
    create_out(&c.out)?;
    write_json(&c.out.join("validation.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    for f in report["flags"].as_array().into_iter().flatten() {
        eprintln!("warning: {}", f.as_str().unwrap_or_default());
    }
    if opts.strict && report["passed"] != json!(true) {
        return Ok(Outcome::ValidationFailed);
    }
    Ok(Outcome::Ok)
}

fn ablation_variants(base: &MtsLossConfig) -> Vec<(&'static str, MtsLossConfig)> {
    vec![
        ("full", base.clone()),
        (
            "no-pull",
            MtsLossConfig {
                w_cap: 0.0,
                ..base.clone()
            },
        ),
        (
            "no-push",
            MtsLossConfig {
                w_push: 0.0,
                ..base.clone()
            },
        ),
        (
            "no-order",
            MtsLossConfig {
                w_order: 0.0,
                ..base.clone()
            },
        ),
    ]
}

pub fn ablate(c: &Common, seeds: u64) -> Result<Outcome> {
    let cfg = load_config(c)?;
    let envs = training_envs(&cfg, c)?;
    let e = &cfg.env;
    let label = env_label(e.kind);
    let mut rows = Vec::new();
    for (name, loss) in ablation_variants(&cfg.loss) {
        let variant = RunConfig {
            loss,
            ..cfg.clone()
        };
        let mut per_seed = Vec::new();
        for s in 0..seeds {
            let seed = c.seed + s;
            let (_, summary) = match &envs {
                Envs::Aim(v) => train_on(v, &variant, seed, None)?,
                Envs::Sop(v) => train_on(v, &variant, seed, None)?,
            };
            eprintln!("{name} seed {seed}: {:.4}", summary.eval_mean);
            per_seed.push(summary.eval_mean);
        }
        let report = EvalReport::from_seed_means(per_seed, fingerprint(&variant)?);
        rows.push(ResultRow::from_report(
            name, label, e.nodes, e.horizon, e.budget, &report,
        ));
    }
    let table = results_table(&rows);
    create_out(&c.out)?;
    fs::write(c.out.join("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(Outcome::Ok)
}
