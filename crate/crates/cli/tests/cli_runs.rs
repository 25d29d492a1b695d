use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use textate_cli::commands::{JOINTS, MANIFEST, RESULTS, SLICES};
use textate_cli::{execute_text, CliError, Command, Overrides, RunManifest};
use textate_core::providers::{ScriptedReply, StubServer};

fn toy_config(n: usize, drop: f64, extra: &str) -> String {
    format!(
        r#"
[study]
name = "toy"
treatments = ["Drug B", "Drug A"]
outcome_question = "Did the symptoms improve?"
covariates = [{{ name = "severity", categories = ["mild", "severe"] }}]

[dgp]
px = [0.5, 0.5]
e = [0.3, 0.7]
py1 = [0.8, 0.6]
py0 = [0.5, 0.2]

[simulate]
n = {n}
covariate_drop = {drop}
seed = 3

[pipeline]
seed = 3

[estimate]
estimators = ["uncorrected", "ipw", "oi", "n_full", "n_ipw", "n_oi", "n_mc_ipw", "n_mc_oi"]
seeds = [0, 1]
bootstrap = 20
{extra}
"#
    )
}

fn out_in(dir: &Path) -> Overrides {
    Overrides { out: Some(dir.to_path_buf()), workers: Some(4), ..Default::default() }
}

fn run_stages(config: &str, overrides: &Overrides, stages: &[Command]) {
    for &stage in stages {
        execute_text(stage, config, overrides).unwrap_or_else(|e| panic!("{}: {e}", stage.name()));
    }
}

const PIPELINE: [Command; 5] = [Command::Simulate, Command::Filter, Command::Extract, Command::Score, Command::Estimate];

fn results(dir: &Path) -> Vec<(String, u64, f64)> {
    let mut reader = csv::Reader::from_path(dir.join(RESULTS)).unwrap();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap(), r[2].parse().unwrap())
        })
        .collect()
}

fn artifact_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .into_iter()
        .filter(|p| p.file_name().unwrap() != MANIFEST)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn oracle_pipeline_recovers_the_toy_effect() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(20_000, 0.3, "");
    run_stages(&config, &out_in(dir.path()), &PIPELINE);
    let rows = results(dir.path());
    assert_eq!(rows.len(), 16);
    for (name, _, ate) in rows.iter().filter(|r| r.0 != "uncorrected") {
        assert!((ate - 0.35).abs() < 0.03, "{name}: {ate}");
    }
    let n_ipw: Vec<f64> = rows.iter().filter(|r| r.0 == "n_ipw").map(|r| r.2).collect();
    assert!(n_ipw.iter().all(|v| (v - 0.35).abs() < 0.015), "{n_ipw:?}");
    let unc = rows.iter().find(|r| r.0 == "uncorrected").unwrap().2;
    assert!((unc - 0.25).abs() < 0.02, "{unc}");

    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST)).unwrap()).unwrap();
    for (name, _) in artifact_bytes(dir.path()) {
        assert!(manifest.artifacts.contains_key(&name), "{name} missing from manifest");
    }
    assert_eq!(manifest.timings_ms.len(), 5);
}

#[test]
fn reruns_are_byte_identical_and_resumable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let config = toy_config(2_000, 0.5, "");
    run_stages(&config, &out_in(a.path()), &PIPELINE);
    run_stages(&config, &Overrides { workers: Some(1), ..out_in(b.path()) }, &PIPELINE);
    let first = artifact_bytes(a.path());
    assert_eq!(first, artifact_bytes(b.path()));

    for name in [SLICES, JOINTS, RESULTS] {
        fs::remove_file(a.path().join(name)).unwrap();
    }
    run_stages(&config, &out_in(a.path()), &[Command::Score, Command::Estimate]);
    assert_eq!(first, artifact_bytes(a.path()));

    // Re-running a middle stage leaves no duplicated decisions behind.
    run_stages(&config, &out_in(a.path()), &[Command::Extract, Command::Score]);
    assert_eq!(first, artifact_bytes(a.path()));
}

#[test]
fn estimate_without_scores_reports_missing_conditionals() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(500, 0.3, "");
    run_stages(&config, &out_in(dir.path()), &[Command::Simulate, Command::Filter, Command::Extract]);
    let err = execute_text(Command::Estimate, &config, &out_in(dir.path())).unwrap_err();
    assert!(matches!(err, CliError::MissingInput(_)));
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("missing conditionals"), "{err}");
}

#[test]
fn filter_without_raw_records_is_a_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let err = execute_text(Command::Filter, &toy_config(10, 0.0, ""), &out_in(dir.path())).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn provider_exhaustion_exits_with_three() {
    let server = StubServer::scripted(Vec::new(), ScriptedReply::status(500)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let extra = format!("[provider]\nkind = \"remote\"\nurl = \"{}\"\nmax_retries = 1\n", server.url());
    let config = toy_config(5, 0.0, &extra);
    run_stages(&config, &out_in(dir.path()), &[Command::Simulate]);
    let err = execute_text(Command::Filter, &config, &out_in(dir.path())).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(server.request_count() >= 10);
    // Decisions are still written, one provider failure per report.
    let decisions = fs::read_to_string(dir.path().join("decisions.jsonl")).unwrap();
    assert_eq!(decisions.matches("provider_failure").count(), 5);
}

#[test]
fn overrides_replace_seed_and_provider() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let config = toy_config(1_000, 0.3, "");
    run_stages(&config, &Overrides { seed: Some(99), ..out_in(a.path()) }, &PIPELINE);
    run_stages(&config, &out_in(b.path()), &PIPELINE);
    let seeds: Vec<u64> = results(a.path()).iter().map(|r| r.1).collect();
    assert!(seeds.iter().all(|&s| s == 99));
    assert_ne!(fs::read(a.path().join("raw.jsonl")).unwrap(), fs::read(b.path().join("raw.jsonl")).unwrap());

    // A stub provider answers uniformly: nothing passes the strict relevance threshold.
    let c = tempfile::tempdir().unwrap();
    let stub = Overrides { provider: Some(textate_cli::ProviderKind::Stub), ..out_in(c.path()) };
    run_stages(&config, &stub, &[Command::Simulate, Command::Filter]);
    assert_eq!(fs::read_to_string(c.path().join("reports.jsonl")).unwrap(), "");
}

#[test]
fn ablation_switches_change_the_cohort() {
    let study = r#"inclusion = { severity = ["severe"] }"#;
    let base = toy_config(4_000, 0.7, "").replacen(
        "covariates = [{ name = \"severity\", categories = [\"mild\", \"severe\"] }]",
        &format!("covariates = [{{ name = \"severity\", categories = [\"mild\", \"severe\"] }}]\n{study}"),
        1,
    );
    let base = base.replace("[\"uncorrected\", \"ipw\", \"oi\", \"n_full\", \"n_ipw\", \"n_oi\", \"n_mc_ipw\", \"n_mc_oi\"]", "[\"n_ipw\", \"inclusion\"]");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_stages(&base, &out_in(a.path()), &PIPELINE);
    let ablated = base.replace("[pipeline]\nseed = 3", "[pipeline]\nseed = 3\ninclusion_filter = false\n\n[provider]\nkind = \"oracle\"\nimputation = \"uniform\"");
    run_stages(&ablated, &out_in(b.path()), &PIPELINE);
    let count = |dir: &Path| fs::read_to_string(dir.join("reports.jsonl")).unwrap().lines().count();
    assert!(count(a.path()) < count(b.path()));
    assert_eq!(count(b.path()), 4_000);
}

#[test]
fn invalid_configs_list_every_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(10, 0.0, "[bogus]\nx = 1\n").replace("\"n_mc_oi\"]", "\"n_mc_oi\", \"n_ipw2\"]");
    let err = execute_text(Command::Simulate, &config, &out_in(dir.path())).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let text = err.to_string();
    assert!(text.contains("unknown estimator `n_ipw2`"), "{text}");
    assert!(text.contains("unknown section `bogus`"), "{text}");
}

#[test]
fn binary_reports_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.toml");
    fs::write(&config_path, toy_config(200, 0.3, "")).unwrap();
    let out = dir.path().join("out");
    let textate = |args: &[&str]| {
        Process::new(env!("CARGO_BIN_EXE_textate"))
            .args(args)
            .arg("--config")
            .arg(&config_path)
            .arg("--out")
            .arg(&out)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    };
    let missing = textate(&["estimate"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing"));

    let ok = textate(&["all", "--workers", "2", "--seed", "5"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(out.join(RESULTS).is_file());

    fs::write(&config_path, "[study]\nname = 1\n").unwrap();
    assert_eq!(textate(&["simulate"]).status.code(), Some(1));
}
