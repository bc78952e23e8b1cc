use std::path::{Path, PathBuf};

use iaas_upgrade::cli::{main_with, EXIT_OK, EXIT_SET_FAILED, EXIT_USAGE};
use iaas_upgrade::engine::ScriptedFailure;
use iaas_upgrade::presets;
use iaas_upgrade::scenario::ScenarioFile;

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/scenarios").join(name)
}

fn run(args: &[&str]) -> i32 {
    main_with(std::iter::once("iaas-upgrade").chain(args.iter().copied()))
}

#[test]
fn bundled_scenarios_match_presets() {
    for (file, s) in [
        ("scenario-a.json", presets::scenario_a()),
        ("scenario-b.json", presets::scenario_b()),
        ("sparse.json", presets::sparse_cluster()),
        ("storage-replacement.json", presets::ppu_scenario()),
        ("two-sets.json", presets::two_set_scenario(4, 2)),
        ("dynamicity.json", presets::dynamicity_scenario()),
        ("suspension.json", presets::suspension_scenario(600_000)),
    ] {
        let loaded = iaas_upgrade::scenario::load_scenario(bundled(file)).unwrap();
        assert_eq!(loaded, s, "{file}");
    }
}

#[test]
fn coordinator_run_writes_artifacts() {
    let out = tempfile::tempdir().unwrap();
    let scenario = bundled("scenario-a.json");
    let code = run(&["--scenario", scenario.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    for f in ["reports.jsonl", "events.jsonl", "metrics.json", "violations.csv", "comparison.csv"] {
        assert!(out.path().join(f).is_file(), "{f}");
    }
    let reports = std::fs::read_to_string(out.path().join("reports.jsonl")).unwrap();
    for line in reports.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn compare_mode_writes_every_batch_size() {
    let out = tempfile::tempdir().unwrap();
    let scenario = bundled("scenario-b.json");
    let code = run(&[
        "--scenario",
        scenario.to_str().unwrap(),
        "--mode",
        "compare",
        "--order-policy",
        "sample-10",
        "--seed",
        "3",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    for b in 1..=4 {
        let text = std::fs::read_to_string(out.path().join(format!("rolling-b{b}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), 10);
    }
    let csv = std::fs::read_to_string(out.path().join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn usage_errors_exit_64() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let a = bundled("scenario-a.json");
    let a = a.to_str().unwrap();
    assert_eq!(run(&["--mode", "rolling"]), EXIT_USAGE);
    assert_eq!(run(&["--scenario", a, "--mode", "rolling", "--out", o]), EXIT_USAGE);
    assert_eq!(run(&["--scenario", a, "--mode", "rolling", "--batch-size", "0", "--out", o]), EXIT_USAGE);
    assert_eq!(run(&["--scenario", a, "--order-policy", "sideways", "--out", o]), EXIT_USAGE);
    assert_eq!(run(&["--scenario", "/nonexistent.json", "--out", o]), EXIT_USAGE);
    let bad = out.path().join("bad.json");
    std::fs::write(&bad, r#"{"hosts": [], "tenants": [], "surprise": 1}"#).unwrap();
    assert_eq!(run(&["--scenario", bad.to_str().unwrap(), "--out", o]), EXIT_USAGE);
}

#[test]
fn failed_change_set_exits_2() {
    let out = tempfile::tempdir().unwrap();
    let mut s: ScenarioFile = presets::two_set_scenario(5, 1);
    s.failure.scripted = vec![ScriptedFailure {
        occurrence: None,
        resource: Some("hv-h01".into()),
        action: Some("install".into()),
        nth: Some(1),
    }];
    let path = out.path().join("failing.json");
    std::fs::write(&path, s.to_json()).unwrap();
    let code = run(&["--scenario", path.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(code, EXIT_SET_FAILED);
}
