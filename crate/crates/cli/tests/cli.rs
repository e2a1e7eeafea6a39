use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn ssco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssco"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Desk environment with a tiny training budget.
const QUICK: &str = r#"
[train]
epochs = 4
episodes_per_epoch = 2
hl_updates_per_epoch = 1
ll_updates_per_epoch = 2
eval_every = 2
validation_episodes = 2
eval_episodes = 2

[search]
simulations = 4

[model]
latent_dim = 8
subgoals = 4
hidden = 8
gnn_hidden = 8
ll_hidden = 8
"#;

fn quick_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let p = dir.join("quick.toml");
    std::fs::write(
        &p,
        QUICK.replace("epochs = 4", &format!("epochs = {epochs}")),
    )
    .unwrap();
    p
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = ssco(&["bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(ssco(&["train", "--preset", "huge"]).status.code(), Some(1));
    assert_eq!(ssco(&["--help"]).status.code(), Some(0));
}

#[test]
fn gen_then_oracle_on_the_desk_preset() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = ssco(&["gen", "--preset", "desk", "--out", path(dir.path())]);
    assert!(out.status.success(), "{out:?}");
    let inst = dir.path().join("instances");
    assert!(inst.join("aim-000.json").exists());
    let out = ssco(&[
        "oracle",
        "--preset",
        "desk",
        "--out",
        path(dir.path()),
        "--instances",
        path(&inst),
    ]);
    assert!(out.status.success(), "{out:?}");
    assert!(start.elapsed().as_secs() < 60);
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("oracle.json")).unwrap())
            .unwrap();
    let v = rows[0]["optimal_value"].as_f64().unwrap();
    assert!(v > 0.0 && v <= 10.0, "{v}");
}

#[test]
fn train_streams_metrics_and_validate_reports_without_asserting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 4);
    let out_dir = dir.path().join("run");
    let out = ssco(&[
        "train",
        "--config",
        path(&cfg),
        "--seed",
        "3",
        "--out",
        path(&out_dir),
    ]);
    assert!(out.status.success(), "{out:?}");
    let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1]["eval_return_mean"].is_number());
    assert!(lines[1]["diagnostics"]["cap_risk"].is_number());
    assert!(lines[0].get("diagnostics").is_none());

    let out = ssco(&[
        "eval",
        "--config",
        path(&cfg),
        "--out",
        path(&out_dir),
        "--episodes",
        "2",
    ]);
    assert!(out.status.success(), "{out:?}");

    let validate = |strict: bool| {
        let mut args = vec![
            "validate",
            "--config",
            path(&cfg),
            "--out",
            path(&out_dir),
            "--held-out",
            "2",
            "--states",
            "4",
            "--resamples",
            "50",
        ];
        if strict {
            args.push("--strict");
        }
        ssco(&args)
    };
    let out = validate(false);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("validation.json")).unwrap())
            .unwrap();
    assert!(report["geometry"]["transitions"].as_u64().unwrap() >= 500);
    assert!(report["kendall"]["mean_tau"].is_number());
    if report["passed"] == false {
        assert!(!report["flags"].as_array().unwrap().is_empty());
        assert_eq!(validate(true).status.code(), Some(2));
    }
}

#[test]
fn untrained_checkpoint_is_flagged_but_not_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 0);
    let out_dir = dir.path().join("run");
    let out = ssco(&["train", "--config", path(&cfg), "--out", path(&out_dir)]);
    assert!(out.status.success(), "{out:?}");
    let out = ssco(&[
        "validate",
        "--config",
        path(&cfg),
        "--out",
        path(&out_dir),
        "--held-out",
        "2",
        "--states",
        "4",
        "--resamples",
        "50",
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("validation.json")).unwrap())
            .unwrap();
    assert_eq!(report["kendall_ok"], false, "{report}");
    assert!(report["flags"][0].as_str().unwrap().contains("kendall"));
}

#[test]
fn baselines_print_a_results_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = ssco(&[
        "baselines",
        "--preset",
        "desk",
        "--out",
        path(dir.path()),
        "--episodes",
        "4",
    ]);
    assert!(out.status.success(), "{out:?}");
    let table = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method\tenv\tN\tT\tK\tmean\tsem\tseeds");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("average-degree\taim\t10\t4\t4\t"));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ssco(&["eval", "--preset", "desk", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}
