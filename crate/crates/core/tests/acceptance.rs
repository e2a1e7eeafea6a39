//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any of them fails.
//!
//! Run with `cargo test -p ssco-core --test acceptance`.

use std::process::ExitCode;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssco_core::config::RunConfig;
use ssco_core::diff::{grad_check, GradCheckConfig, ParameterSet, Tape};
use ssco_core::env::{
    aim_generate, sop_day_profit, AimConfig, AimEnv, AimState, Environment, GraphInstance,
    NodeStatus, SopInstance, SopParams,
};
use ssco_core::geometry::{minimize_order_risk, MtsLossConfig};
use ssco_core::harness::stats::{mean_sem, welch_greater};
use ssco_core::harness::{
    collect_decisions, geometry_diagnostics, kendall_protocol, ExecutedDecision, KendallConfig,
    ToySmdp,
};
use ssco_core::heuristics::{aim_heuristic_episode, AimSelector, BudgetSchedule};
use ssco_core::oracle::{oracle_episode, oracle_solve, Oracle, OracleConfig};
use ssco_core::planner::{run_search, SearchConfig};
use ssco_core::trainer::{
    evaluate_agent_from, hl_loss_frozen, ll_loss, play_episode, train, Agent, Game, HlBatch,
    LlTransition, PlayMode, TrainConfig, Trainer, EVAL_EPISODE_BASE,
};
use ssco_core::world_model::{BudgetConfig, LowLevelQ, ModelConfig, WorldModel};

const SEEDS: u64 = 10;

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        let line = format!(
            "[{}] {id}. {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        println!("{line}");
        self.lines.push((pass, line));
    }
}

fn tiny_env(seed: u64) -> AimEnv {
    AimEnv::new(
        aim_generate(10, seed, 3.0).unwrap(),
        AimConfig {
            horizon: 4,
            budget: 4,
            max_decision_budget: None,
        },
    )
}

fn held_out_tiny() -> Vec<AimEnv> {
    (0..10).map(|i| tiny_env(5000 + i)).collect()
}

fn oracle_calibration(report: &mut Report) {
    let mut worst_z: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    let mut details = Vec::new();
    for i in 0..5 {
        let env = tiny_env(9100 + i);
        let start = Instant::now();
        let solved = oracle_solve(env.graph(), 4, 4).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let mut oracle = Oracle::new(env.graph(), 4, OracleConfig::default()).unwrap();
        let returns: Vec<f64> = (0..200_000)
            .map(|e| oracle_episode(&mut oracle, &env, e).unwrap())
            .collect();
        let (mean, sem) = mean_sem(&returns);
        let z = (mean - solved.optimal_value).abs() / sem.max(1e-12);
        worst_z = worst_z.max(z);
        details.push(format!("{:.3}/{:.3}", solved.optimal_value, mean));
    }
    report.record(
        1,
        "oracle calibration",
        worst_z <= 3.0 && slowest < 60.0,
        format!(
            "optimum/rollout {}; max |z| {worst_z:.2} (<= 3); slowest solve {slowest:.2}s (< 60s)",
            details.join(", ")
        ),
    );
}

/// One trained tiny-AIM model with the desk preset.
struct TinyRun {
    seed: u64,
    ratio: f64,
    kendall: f64,
    geometry_holds: bool,
    transitions: usize,
    tau_violations: usize,
    logged: usize,
    support_violations: usize,
    visit_violations: usize,
}

fn tiny_run(seed: u64) -> (TinyRun, f64) {
    let cfg = RunConfig::desk();
    let envs = cfg.env.aim_envs(cfg.env.instance_seed + seed, 1).unwrap();
    let mc = cfg
        .model
        .model_config(envs[0].feature_dim(), envs[0].max_decision_budget());
    let start = Instant::now();
    let mut tr = Trainer::new(
        &envs,
        mc,
        cfg.model.ll_hidden,
        cfg.train.clone(),
        cfg.search.clone(),
        cfg.loss.clone(),
        seed,
    )
    .unwrap();
    for _ in 0..cfg.train.epochs {
        tr.run_epoch().unwrap();
    }
    tr.restore_best();
    let mean = tr.evaluate(cfg.train.eval_episodes).unwrap().mean;
    let elapsed = start.elapsed().as_secs_f64();
    let optimum = oracle_solve(envs[0].graph(), cfg.env.horizon, cfg.env.budget)
        .unwrap()
        .optimal_value;

    let mut logged = 0;
    let mut tau_violations = 0;
    for g in tr.buffers.hl.iter() {
        for t in &g.transitions {
            logged += 1;
            if t.duration > t.budget || t.budget > t.cap {
                tau_violations += 1;
            }
        }
    }

    let held = held_out_tiny();
    let agent = tr.agent();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kendall = kendall_protocol(&held, agent, &KendallConfig::desk(), &mut rng).unwrap();
    let decisions = collect_decisions(&held, agent, 13, &mut rng).unwrap();
    let geometry = geometry_diagnostics(&held, agent, &decisions, cfg.loss.kappa);
    for d in &decisions {
        logged += 1;
        let t = &d.transition;
        if t.duration > t.budget || t.budget > t.cap {
            tau_violations += 1;
        }
    }
    let (support_violations, visit_violations) =
        planner_invariants(&held, &tr.model, &cfg.search, &decisions, seed);

    let run = TinyRun {
        seed,
        ratio: mean / optimum,
        kendall: kendall.mean_tau,
        geometry_holds: geometry.holds() && geometry.transitions >= 500,
        transitions: geometry.transitions,
        tau_violations,
        logged,
        support_violations,
        visit_violations,
    };
    (run, elapsed)
}

/// Budget support and root visit counts at every seventh executed decision.
fn planner_invariants(
    envs: &[AimEnv],
    model: &WorldModel,
    search: &SearchConfig,
    decisions: &[ExecutedDecision<AimState>],
    seed: u64,
) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut support = 0;
    let mut visits = 0;
    for d in decisions.iter().step_by(7) {
        let env = &envs[d.instance];
        let state = &d.transition.state;
        let h = model.encode(env, state);
        let cap = env.feasible_budget(state);
        for z in 0..model.subgoal_count() {
            // Support is read from the log-probabilities: a peaked actor can
            // push feasible probabilities below the smallest f64.
            let p = model.budget_distribution(&h, z, cap).unwrap();
            let lp = model.budget_log_probs(&h, z, cap).unwrap();
            let ok = p.len() == env.max_decision_budget() + 1
                && lp.len() == p.len()
                && lp
                    .iter()
                    .enumerate()
                    .all(|(b, &x)| (b <= cap) == x.is_finite())
                && p[cap + 1..].iter().all(|&x| x == 0.0)
                && (p.iter().sum::<f64>() - 1.0).abs() < 1e-12;
            if !ok {
                support += 1;
            }
        }
        let left = env.horizon() - env.day(state);
        let result = run_search(model, &h, left, search, true, &mut rng);
        if result.visits.iter().map(|&v| v as usize).sum::<usize>() != search.simulations {
            visits += 1;
        }
    }
    (support, visits)
}

fn tiny_aim_criteria(report: &mut Report) -> Vec<TinyRun> {
    let mut runs = Vec::new();
    let mut training_secs = 0.0;
    for seed in 0..SEEDS {
        let (run, secs) = tiny_run(seed);
        training_secs += secs;
        println!(
            "  seed {seed}: ratio {:.3} tau {:.3} geometry {} ({} transitions) in {secs:.0}s",
            run.ratio, run.kendall, run.geometry_holds, run.transitions
        );
        runs.push(run);
    }
    let ratios: Vec<f64> = runs.iter().map(|r| r.ratio).collect();
    let (ratio, ratio_sem) = mean_sem(&ratios);
    report.record(
        2,
        "tiny-scale optimality",
        ratio >= 0.90 && training_secs < 1800.0,
        format!(
            "mean return ratio {ratio:.3} ± {ratio_sem:.3} over {SEEDS} seeds (>= 0.90); \
             training {training_secs:.0}s (< 1800s)"
        ),
    );
    let taus: Vec<f64> = runs.iter().map(|r| r.kendall).collect();
    let (tau, tau_sem) = mean_sem(&taus);
    report.record(
        4,
        "duration ordering",
        tau >= 0.5,
        format!(
            "mean Kendall tau {tau:.3} ± {tau_sem:.3} (>= 0.5); per seed {:?}",
            taus.iter()
                .map(|t| (t * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>()
        ),
    );
    let failing: Vec<u64> = runs
        .iter()
        .filter(|r| !r.geometry_holds)
        .map(|r| r.seed)
        .collect();
    let fewest = runs.iter().map(|r| r.transitions).min().unwrap_or(0);
    report.record(
        5,
        "geometry invariants",
        failing.is_empty(),
        format!(
            "macro-micro and duration bounds within 3 s.e. on every seed; \
             fewest transitions {fewest} (>= 500); failing seeds {failing:?}"
        ),
    );
    runs
}

fn baseline_ordering(report: &mut Report) {
    let mut cfg = RunConfig::desk();
    cfg.env.nodes = 50;
    cfg.env.horizon = 5;
    cfg.env.budget = 10;
    cfg.env.instances = 4;
    cfg.env.instance_seed = 2000;
    cfg.train.epochs = 300;
    cfg.train.eval_every = 50;
    cfg.train.validation_episodes = 10;
    let episodes = 25;
    let envs = cfg
        .env
        .aim_envs(cfg.env.instance_seed, cfg.env.instances)
        .unwrap();
    let held = cfg.env.aim_envs(3000, 4).unwrap();
    let mc = cfg
        .model
        .model_config(envs[0].feature_dim(), envs[0].max_decision_budget());
    let mut trained = Vec::new();
    let mut heuristic = Vec::new();
    for seed in 0..SEEDS {
        let mut tr = Trainer::new(
            &envs,
            mc.clone(),
            cfg.model.ll_hidden,
            cfg.train.clone(),
            cfg.search.clone(),
            cfg.loss.clone(),
            seed,
        )
        .unwrap();
        for _ in 0..cfg.train.epochs {
            tr.run_epoch().unwrap();
        }
        tr.restore_best();
        let base = EVAL_EPISODE_BASE + seed * episodes as u64;
        let r = evaluate_agent_from(&held, tr.agent(), episodes, base).unwrap();
        trained.push(mean_sem(&r).0);
        let h: Vec<f64> = held
            .iter()
            .flat_map(|env| {
                (0..episodes as u64).map(move |e| {
                    aim_heuristic_episode(
                        env,
                        &BudgetSchedule::average(),
                        AimSelector::Score,
                        base + e,
                    )
                    .unwrap()
                })
            })
            .collect();
        heuristic.push(mean_sem(&h).0);
        println!(
            "  seed {seed}: trained {:.3} heuristic {:.3}",
            trained[trained.len() - 1],
            heuristic[heuristic.len() - 1]
        );
    }
    let welch = welch_greater(&trained, &heuristic);
    let p = welch.as_ref().map_or(1.0, |w| w.p_value);
    report.record(
        3,
        "baseline ordering",
        mean_sem(&trained).0 >= mean_sem(&heuristic).0 && p <= 0.05,
        format!(
            "held-out N=50 T=5 K=10: trained {:.3} vs average-score {:.3}; Welch p {p:.2e} (<= 0.05)",
            mean_sem(&trained).0,
            mean_sem(&heuristic).0
        ),
    );
}

fn order_calibration(report: &mut Report) {
    let mut ok = true;
    let mut parts = Vec::new();
    for eta in [0.2, 0.5, 0.8] {
        let u = minimize_order_risk(eta, 3.0, 600);
        let want = 2.0 * eta - 1.0;
        let agrees = if want == 0.0 {
            u == 0.0
        } else {
            u.signum() == want.signum()
        };
        ok &= agrees;
        parts.push(format!("eta {eta}: u* {u:.3}"));
    }
    report.record(
        6,
        "order-loss calibration",
        ok,
        format!("sign(u*) = sign(2 eta - 1); {}", parts.join(", ")),
    );
}

fn discount_bound(report: &mut Report) {
    let toy = ToySmdp::three_state();
    let mut checked = 0;
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for gamma_ll in [0.5, 0.9, 0.99] {
        for mu_bar in [1.0, 2.0, 2.5, 4.0] {
            for g in toy.discount_gaps(gamma_ll, mu_bar) {
                checked += 1;
                if !g.holds() {
                    violations += 1;
                }
                tightest = tightest.min(g.bound - g.gap());
            }
        }
    }
    report.record(
        7,
        "discount approximation bound",
        violations == 0,
        format!("{checked} (s, z, gamma_LL, mu) cases, {violations} violations; min slack {tightest:.4}"),
    );
}

fn micro_envs() -> Vec<AimEnv> {
    let cfg = AimConfig {
        horizon: 3,
        budget: 4,
        max_decision_budget: None,
    };
    (0..2)
        .map(|i| AimEnv::new(aim_generate(6, 70 + i, 2.0).unwrap(), cfg.clone()))
        .collect()
}

fn micro_model_config(env: &AimEnv) -> ModelConfig {
    ModelConfig {
        feature_dim: env.feature_dim(),
        latent_dim: 4,
        hidden: 6,
        gnn_hidden: 4,
        subgoals: 3,
        budget: BudgetConfig::new(env.max_decision_budget()),
        subgoal_init_scale: 1.0,
        margin_init: -1.0,
    }
}

fn micro_search() -> SearchConfig {
    SearchConfig {
        simulations: 6,
        ..SearchConfig::desk()
    }
}

type Rollouts = (Vec<Game<AimState>>, Vec<LlTransition<AimState>>);

fn micro_rollouts(envs: &[AimEnv], model: &WorldModel, ll: &LowLevelQ) -> Rollouts {
    let search = micro_search();
    let agent = Agent {
        model,
        low_level: ll,
        search: &search,
        ll_discount: 0.997,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut games = Vec::new();
    let mut steps = Vec::new();
    for e in 0..4 {
        let i = e % envs.len();
        let mode = PlayMode::Train {
            epsilon: 0.5,
            warmup: false,
        };
        let rec = play_episode(&envs[i], i, agent, mode, e as u64, false, &mut rng).unwrap();
        games.push(rec.game);
        steps.extend(rec.ll);
    }
    (games, steps)
}

/// Largest relative error over the high-level and low-level losses.
fn gradient_checks() -> (bool, f64) {
    let envs = micro_envs();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = WorldModel::new(micro_model_config(&envs[0]), &mut rng).unwrap();
    let ll = LowLevelQ::new(envs[0].feature_dim(), 4, 5, &mut rng);
    let target = LowLevelQ::new(envs[0].feature_dim(), 4, 5, &mut rng);
    let (games, steps) = micro_rollouts(&envs, &model, &ll);
    let all: Vec<_> = games
        .iter()
        .flat_map(|g| (0..g.transitions.len()).map(move |k| (g, k)))
        .collect();
    let half = all.len() / 2;
    let batch = HlBatch {
        envs: &envs,
        items: all[..half].to_vec(),
        order_partners: all[half..2 * half].to_vec(),
        cap_pairs: steps.iter().take(6).collect(),
    };
    let cfg = TrainConfig {
        unroll: 2,
        ..TrainConfig::default()
    };
    let mts = MtsLossConfig::default();
    let check = GradCheckConfig {
        samples_per_param: 3,
        ..GradCheckConfig::default()
    };
    let frozen = model.clone();
    let hl = grad_check(
        &model.params,
        |ps: &ParameterSet, tape: &mut Tape| {
            let mut m = model.clone();
            m.params = ps.clone();
            hl_loss_frozen(tape, &m, Some(&frozen), &batch, &cfg, &mts, true).0
        },
        &check,
    );
    let ll_batch: Vec<&LlTransition<AimState>> = steps.iter().take(12).collect();
    let low = grad_check(
        &ll.params,
        |ps: &ParameterSet, tape: &mut Tape| {
            let mut q = ll.clone();
            q.params = ps.clone();
            ll_loss(tape, &q, &target, &model, &envs, &ll_batch, 0.997)
        },
        &check,
    );
    let worst = hl.max_rel_error.max(low.max_rel_error);
    (hl.passed() && low.passed() && worst <= 1e-4, worst)
}

fn seeded_determinism() -> bool {
    let envs = vec![tiny_env(7)];
    let mut cfg = RunConfig::desk();
    cfg.train.epochs = 20;
    cfg.train.eval_every = 10;
    cfg.train.validation_episodes = 5;
    cfg.train.eval_episodes = 5;
    let run = |seed| {
        let mut lines = Vec::new();
        let out = train(
            &envs,
            cfg.model
                .model_config(envs[0].feature_dim(), envs[0].max_decision_budget()),
            cfg.model.ll_hidden,
            cfg.train.clone(),
            cfg.search.clone(),
            cfg.loss.clone(),
            seed,
            |m| lines.push(serde_json::to_string(m).unwrap()),
        )
        .unwrap();
        (
            lines,
            out.checkpoint.to_json().unwrap(),
            out.final_eval.mean,
        )
    };
    let a = run(3);
    a == run(3) && a.1 != run(4).1
}

fn mechanical(report: &mut Report, runs: &[TinyRun]) {
    let sum = |f: fn(&TinyRun) -> usize| runs.iter().map(f).sum::<usize>();
    let visits = sum(|r| r.visit_violations);
    let support = sum(|r| r.support_violations);
    let tau = sum(|r| r.tau_violations);
    let logged = sum(|r| r.logged);
    let (grads_ok, worst) = gradient_checks();
    let deterministic = seeded_determinism();
    report.record(
        8,
        "mechanical invariants",
        visits == 0 && support == 0 && tau == 0 && grads_ok && deterministic,
        format!(
            "visit-sum mismatches {visits}; budget-support violations {support}; \
             tau > b on {tau} of {logged} transitions; max grad rel error {worst:.1e}; \
             seeded runs reproducible {deterministic}"
        ),
    );
}

fn environment_statistics(report: &mut Report) {
    let p = 0.3;
    let trials = 100_000;
    let g = GraphInstance::new(2, vec![(0, 1)], vec![p], 0).unwrap();
    let env = AimEnv::new(
        g,
        AimConfig {
            horizon: 1,
            budget: 1,
            max_decision_budget: None,
        },
    );
    let (seeded, _) = env.primitive_step(&env.reset(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let hits = (0..trials)
        .filter(|_| env.end_of_day(&seeded, &mut rng).0.status[1] != NodeStatus::Inactive)
        .count();
    let freq = hits as f64 / trials as f64;
    let z = (freq - p).abs() / (p * (1.0 - p) / trials as f64).sqrt();

    let mut sop_violations = 0;
    let mut cases = 0;
    for seed in 0..5 {
        let inst = SopInstance::generate(6, seed, &SopParams::default()).unwrap();
        let profits = &inst.profit_init;
        let n = profits.len();
        let value = |mask: u32| {
            let chosen: Vec<f64> = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| profits[i])
                .collect();
            sop_day_profit(&chosen, 0.9)
        };
        for s in 0u32..1 << n {
            for t in 0u32..1 << n {
                if t & s != s {
                    continue;
                }
                for x in (0..n).filter(|&x| t & (1 << x) == 0) {
                    cases += 1;
                    let gain_s = value(s | 1 << x) - value(s);
                    let gain_t = value(t | 1 << x) - value(t);
                    if gain_s < -1e-12 || gain_s < gain_t - 1e-9 {
                        sop_violations += 1;
                    }
                }
            }
        }
    }
    report.record(
        9,
        "environment statistics",
        z <= 3.0 && sop_violations == 0,
        format!(
            "2-node IC frequency {freq:.4} vs p {p} (|z| {z:.2} <= 3, {trials} trials); \
             SOP day profit monotone+submodular on {cases} (S, T, x) cases, {sop_violations} violations"
        ),
    );
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut report = Report { lines: Vec::new() };
    oracle_calibration(&mut report);
    let runs = tiny_aim_criteria(&mut report);
    baseline_ordering(&mut report);
    order_calibration(&mut report);
    discount_bound(&mut report);
    mechanical(&mut report, &runs);
    environment_statistics(&mut report);

    report.lines.sort_by_key(|(_, l)| {
        l.split_once("] ")
            .and_then(|(_, r)| r.split_once('.'))
            .and_then(|(n, _)| n.parse::<usize>().ok())
    });
    println!(
        "\nacceptance summary ({:.0}s)",
        start.elapsed().as_secs_f64()
    );
    for (_, line) in &report.lines {
        println!("{line}");
    }
    let failed = report.lines.iter().filter(|(ok, _)| !ok).count();
    println!("{} passed, {failed} failed", report.lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
