//! Frozen values from the first verified run, and shipped preset files.
//!
//! The heuristic value was produced by running the average-budget,
//! score-selector heuristic for 200 episodes on `aim_generate(20, 2024, 3.0)`
//! with T = 5, K = 6, in both debug and release builds. Day-end randomness
//! comes from the per-episode streams, so any change to the cascade
//! simulator, the stream derivation or the heuristic shows up here.

use ssco_core::config::{RunConfig, PRESETS};
use ssco_core::env::{aim_generate, AimConfig, AimEnv};
use ssco_core::heuristics::{aim_heuristic_episode, AimSelector, BudgetSchedule};

#[test]
fn average_score_heuristic_golden_value() {
    let g = aim_generate(20, 2024, 3.0).unwrap();
    let env = AimEnv::new(
        g,
        AimConfig {
            horizon: 5,
            budget: 6,
            max_decision_budget: None,
        },
    );
    let returns: Vec<f64> = (0..200)
        .map(|e| {
            aim_heuristic_episode(&env, &BudgetSchedule::average(), AimSelector::Score, e).unwrap()
        })
        .collect();
    assert_eq!(&returns[..3], &[13.0, 11.0, 13.0]);
    assert_eq!(returns.iter().sum::<f64>(), 2702.0);
}

#[test]
fn shipped_config_files_match_presets() {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    for name in PRESETS {
        let path = std::path::Path::new(root).join(format!("{name}.toml"));
        let file = RunConfig::load(&path).unwrap();
        assert_eq!(file, RunConfig::preset(name).unwrap(), "{name}");
    }
}
