//! Subcommands. Each reads its inputs from the output directory, writes its
//! artifacts there and records their checksums in `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use textate_core::diagnostics::{self, ConvergenceConfig};
use textate_core::estimators::{
    fit_propensity_conditional, run_estimator, EstimateError, EstimateSettings, EstimationInputs, EstimatorKind,
    InclusionSlice,
};
use textate_core::jsonl::{decode_all, read_jsonl, write_jsonl, JointRecord, SliceRecord};
use textate_core::pipeline::{self, CovariateRecord, FilterDecision, Stage, StageConfig};
use textate_core::providers::{NoisyOracle, OracleProvider, RemoteProvider, StubProvider, UniformImputer};
use textate_core::synth::{RenderOptions, SyntheticStudy, TruthRecord};
use textate_core::{ConditionalSlice, JointTable, Provider, Report, TabularUnit};

use crate::config::{parse_config, ImputationSource, ProviderKind, RunConfig};

pub const RAW: &str = "raw.jsonl";
pub const TRUTH: &str = "truth.jsonl";
pub const DECISIONS: &str = "decisions.jsonl";
pub const REPORTS: &str = "reports.jsonl";
pub const EXTRACTIONS: &str = "extractions.jsonl";
pub const INCLUSION: &str = "inclusion.jsonl";
pub const OBSERVED: &str = "observed.jsonl";
pub const COVARIATES: &str = "covariates.jsonl";
pub const SLICES: &str = "slices.jsonl";
pub const JOINTS: &str = "joints.jsonl";
pub const RESULTS: &str = "results.csv";
pub const CONVERGENCE: &str = "convergence.csv";
pub const CONVERGENCE_PLOT: &str = "convergence.svg";
pub const BALANCE: &str = "balance.csv";
pub const BALANCE_PLOT: &str = "balance.svg";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    MissingInput(String),
    #[error("{0}")]
    Exhausted(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Invalid(_) | CliError::Io(_) => 1,
            CliError::MissingInput(_) => 2,
            CliError::Exhausted(_) => 3,
        }
    }
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

fn estimate_err(e: EstimateError) -> CliError {
    match e {
        EstimateError::MissingInput(_) => CliError::MissingInput(e.to_string()),
        other => CliError::Invalid(other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Filter,
    Extract,
    Score,
    Estimate,
    Diagnose,
    /// simulate through estimate in one go.
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Filter => "filter",
            Command::Extract => "extract",
            Command::Score => "score",
            Command::Estimate => "estimate",
            Command::Diagnose => "diagnose",
            Command::All => "all",
        }
    }
}

/// Command-line overrides applied on top of the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub provider: Option<ProviderKind>,
    pub out: Option<PathBuf>,
}

/// Observed treatment and outcome of a kept report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedRecord {
    pub report_id: String,
    pub t: u8,
    pub y: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_sha256: String,
    /// Artifact file name to SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
    /// Wall time of the most recent run of each command, in milliseconds.
    pub timings_ms: BTreeMap<String, u64>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Run {
    config: RunConfig,
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, what: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(CliError::MissingInput(format!("missing {what}: {} not found", path.display())))
        }
    }

    fn record(&mut self, name: &str) -> Result<(), CliError> {
        let bytes = fs::read(self.path(name)).map_err(io_err)?;
        self.manifest.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn write<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<(), CliError> {
        write_jsonl(&self.path(name), items).map_err(io_err)?;
        self.record(name)
    }

    fn read<T: serde::de::DeserializeOwned>(&self, name: &str, what: &str) -> Result<Vec<T>, CliError> {
        read_jsonl(&self.require(name, what)?).map_err(io_err)
    }

    fn remove(&mut self, name: &str) -> Result<(), CliError> {
        let path = self.path(name);
        if path.exists() {
            fs::remove_file(&path).map_err(io_err)?;
        }
        self.manifest.artifacts.remove(name);
        Ok(())
    }

    fn save_manifest(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(self.path(MANIFEST), text + "\n").map_err(io_err)
    }

    fn stage_config(&self) -> StageConfig {
        StageConfig {
            policy: self.config.provider.policy(),
            relevance_threshold: self.config.pipeline.relevance_threshold,
            mode: self.config.provider.scoring_mode,
            seed: self.config.pipeline.seed,
        }
    }

    fn synthetic_study(&self) -> Result<SyntheticStudy, CliError> {
        let tables = self
            .config
            .dgp_tables
            .clone()
            .ok_or_else(|| CliError::Invalid("this command needs a [dgp] section".into()))?;
        SyntheticStudy::new(self.config.study.clone(), tables).map_err(|e| CliError::Invalid(e.to_string()))
    }

    fn render_options(&self) -> RenderOptions {
        let n_dims = self.config.study.covariates.len();
        match &self.config.simulate {
            Some(sim) => sim.render_options(n_dims),
            None => RenderOptions::uniform(n_dims, 0.0),
        }
    }

    fn provider(&self) -> Result<Box<dyn Provider>, CliError> {
        let section = &self.config.provider;
        let invalid = |e: textate_core::ProviderError| CliError::Invalid(e.to_string());
        let base: Box<dyn Provider> = match section.kind {
            ProviderKind::Oracle => Box::new(OracleProvider::new(self.synthetic_study()?)),
            ProviderKind::NoisyOracle => Box::new(
                NoisyOracle::new(OracleProvider::new(self.synthetic_study()?), section.noise, self.config.pipeline.seed)
                    .map_err(invalid)?,
            ),
            ProviderKind::Stub => Box::new(StubProvider::new()),
            ProviderKind::Remote => {
                let url = section.url.as_deref().ok_or_else(|| CliError::Invalid("remote provider without URL".into()))?;
                Box::new(RemoteProvider::new(url, &section.policy()).map_err(invalid)?)
            }
        };
        Ok(match section.imputation {
            ImputationSource::Provider => base,
            ImputationSource::Uniform => Box::new(UniformImputer::new(base)),
        })
    }

    /// Replaces decisions from `stages` with `fresh`, keeping earlier stages.
    fn merge_decisions(&mut self, stages: &[Stage], fresh: Vec<FilterDecision>) -> Result<(), CliError> {
        let mut decisions: Vec<FilterDecision> = self.read(DECISIONS, "filter decisions")?;
        decisions.retain(|d| !stages.contains(&d.stage));
        decisions.extend(fresh);
        decisions.sort_by(|a, b| a.report_id.cmp(&b.report_id).then(a.stage.cmp(&b.stage)));
        self.write(DECISIONS, &decisions)
    }
}

/// Applies overrides, picks the output directory and loads any existing manifest.
fn prepare(config_text: &str, overrides: &Overrides) -> Result<Run, CliError> {
    let mut config = parse_config(config_text).map_err(CliError::Config)?;
    if let Some(kind) = overrides.provider {
        config.provider.kind = kind;
        if kind == ProviderKind::Remote && config.provider.url.is_none() {
            return Err(CliError::Config(vec!["[provider]: remote provider without URL".into()]));
        }
    }
    if let Some(seed) = overrides.seed {
        if let Some(sim) = config.simulate.as_mut() {
            sim.seed = seed;
        }
        config.pipeline.seed = seed;
        config.estimate.seeds = vec![seed];
    }
    if !config.pipeline.inclusion_filter {
        config.study.inclusion.clear();
    }
    let out = overrides.out.clone().or_else(|| config.paths.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(io_err)?;
    let config_sha256 = sha256_hex(config_text.as_bytes());
    let mut manifest = match fs::read_to_string(out.join(MANIFEST)) {
        Ok(text) => serde_json::from_str::<RunManifest>(&text).unwrap_or_else(|e| {
            warn!("ignoring unreadable manifest: {e}");
            RunManifest::default()
        }),
        Err(_) => RunManifest::default(),
    };
    if !manifest.config_sha256.is_empty() && manifest.config_sha256 != config_sha256 {
        warn!("configuration changed since artifacts in {} were written", out.display());
    }
    manifest.config_sha256 = config_sha256;
    manifest.version = env!("CARGO_PKG_VERSION").to_string();
    Ok(Run { config, out, manifest })
}

/// Reads the configuration file and runs `command`.
pub fn execute(command: Command, config_path: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::MissingInput(format!("missing configuration {}: {e}", config_path.display())))?;
    execute_text(command, &text, overrides)
}

/// Runs `command` with the configuration given as TOML text.
pub fn execute_text(command: Command, config_text: &str, overrides: &Overrides) -> Result<(), CliError> {
    let mut run = prepare(config_text, overrides)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = overrides.workers {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Invalid(e.to_string()))?;
    pool.install(|| {
        let steps: &[Command] = match command {
            Command::All => &[Command::Simulate, Command::Filter, Command::Extract, Command::Score, Command::Estimate],
            _ => std::slice::from_ref(&command),
        };
        for &step in steps {
            let start = Instant::now();
            let result = match step {
                Command::Simulate => simulate(&mut run),
                Command::Filter => filter(&mut run),
                Command::Extract => extract(&mut run),
                Command::Score => score(&mut run),
                Command::Estimate => estimate(&mut run),
                Command::Diagnose => diagnose(&mut run),
                Command::All => unreachable!("expanded above"),
            };
            run.manifest.timings_ms.insert(step.name().to_string(), start.elapsed().as_millis() as u64);
            // Artifacts written before a failure are still listed.
            run.save_manifest()?;
            result?;
            info!("{} finished in {:.1?}", step.name(), start.elapsed());
        }
        Ok(())
    })
}

fn simulate(run: &mut Run) -> Result<(), CliError> {
    let sim = run
        .config
        .simulate
        .clone()
        .ok_or_else(|| CliError::Invalid("simulate needs a [simulate] section".into()))?;
    let study = run.synthetic_study()?;
    let rendered = study
        .generate(sim.n, &run.render_options(), sim.seed)
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let raws: Vec<Value> = rendered
        .iter()
        .map(|r| {
            json!({
                "id": r.report.id,
                "kind": "post",
                "author": "synthetic",
                "score": 1,
                "source": r.report.source,
                "created": r.report.created,
                "body": r.report.body,
            })
        })
        .collect();
    let truth: Vec<TruthRecord> = rendered.iter().map(|r| TruthRecord::from_rendered(r, &study.design.covariates)).collect();
    run.write(RAW, &raws)?;
    run.write(TRUTH, &truth)?;
    info!("simulated {} reports, true ATE {:.4}", raws.len(), study.dgp.true_ate());
    Ok(())
}

fn exhausted(stages: &[Stage]) -> CliError {
    let names: Vec<String> = stages.iter().map(|s| s.to_string()).collect();
    CliError::Exhausted(format!("provider failed for every report at stage(s): {}", names.join(", ")))
}

fn filter(run: &mut Run) -> Result<(), CliError> {
    let raw_path = match &run.config.paths.raw {
        Some(p) if p.is_file() => p.clone(),
        Some(p) => return Err(CliError::MissingInput(format!("missing raw records: {} not found", p.display()))),
        None => run.require(RAW, "raw records")?,
    };
    let raws: Vec<Value> = read_jsonl(&raw_path).map_err(io_err)?;
    let (mut decisions, reports) = pipeline::run_initial(&raws, &run.config.study.keywords);
    let provider = run.provider()?;
    let output = pipeline::run_filters(provider.as_ref(), &reports, &run.config.study, &run.stage_config());
    let failed = output.fully_failed_stages();
    decisions.extend(output.decisions);
    decisions.sort_by(|a, b| a.report_id.cmp(&b.report_id).then(a.stage.cmp(&b.stage)));
    let observed: Vec<ObservedRecord> =
        output.observed.iter().map(|(id, &(t, y))| ObservedRecord { report_id: id.clone(), t, y }).collect();
    run.write(DECISIONS, &decisions)?;
    run.write(REPORTS, &output.kept)?;
    run.write(EXTRACTIONS, &output.extractions)?;
    run.write(INCLUSION, &output.inclusion)?;
    run.write(OBSERVED, &observed)?;
    info!("{} of {} raw records kept", output.kept.len(), raws.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(exhausted(&failed))
    }
}

fn extract(run: &mut Run) -> Result<(), CliError> {
    let reports: Vec<Report> = run.read(REPORTS, "filtered reports")?;
    let inclusion: Vec<CovariateRecord> = run.read(INCLUSION, "extracted covariates")?;
    let provider = run.provider()?;
    let (covariates, failures) =
        pipeline::run_imputation(provider.as_ref(), &reports, &inclusion, &run.config.study, &run.stage_config());
    let all_failed = !reports.is_empty() && failures.len() == reports.len();
    run.write(COVARIATES, &covariates)?;
    run.merge_decisions(&[Stage::Imputation, Stage::Scoring], failures)?;
    if all_failed {
        return Err(exhausted(&[Stage::Imputation]));
    }
    Ok(())
}

fn score(run: &mut Run) -> Result<(), CliError> {
    let reports: Vec<Report> = run.read(REPORTS, "filtered reports")?;
    let covariates: Vec<CovariateRecord> = run.read(COVARIATES, "imputed covariates")?;
    let provider = run.provider()?;
    let design = run.config.study.clone();
    let config = run.stage_config();
    let (slices, mut failures) = pipeline::run_scoring(provider.as_ref(), &reports, &covariates, &design, &config);
    let scored = covariates.len();
    let mut failed_reports: std::collections::BTreeSet<String> = failures.iter().map(|d| d.report_id.clone()).collect();
    let records: Vec<SliceRecord> = slices.iter().map(|s| SliceRecord::new(s, &design)).collect();
    run.write(SLICES, &records)?;
    if run.config.pipeline.joints {
        let with_covariates: std::collections::BTreeSet<&str> = covariates.iter().map(|c| c.report_id.as_str()).collect();
        let cohort: Vec<Report> = reports.iter().filter(|r| with_covariates.contains(r.id.as_str())).cloned().collect();
        let (joints, joint_failures) = pipeline::run_joints(provider.as_ref(), &cohort, &design, &config);
        for d in joint_failures {
            if failed_reports.insert(d.report_id.clone()) {
                failures.push(d);
            }
        }
        let records: Vec<JointRecord> = joints.iter().map(|(id, j)| JointRecord::new(id, j)).collect();
        run.write(JOINTS, &records)?;
    } else {
        run.remove(JOINTS)?;
    }
    failures.sort_by(|a, b| a.report_id.cmp(&b.report_id));
    let all_failed = scored > 0 && failed_reports.len() == scored;
    run.merge_decisions(&[Stage::Scoring], failures)?;
    if all_failed {
        return Err(exhausted(&[Stage::Scoring]));
    }
    Ok(())
}

/// Inputs loaded for estimation, each only if some estimator needs it.
#[derive(Default)]
struct Loaded {
    units: Option<Vec<TabularUnit>>,
    slices: Option<Vec<ConditionalSlice>>,
    joints: Option<Vec<JointTable>>,
    inclusion: Option<Vec<InclusionSlice>>,
}

impl Loaded {
    fn inputs(&self) -> EstimationInputs<'_> {
        EstimationInputs {
            units: self.units.as_deref(),
            slices: self.slices.as_deref(),
            joints: self.joints.as_deref(),
            inclusion: self.inclusion.as_deref(),
        }
    }
}

fn missing_conditionals(run: &Run, name: &str) -> Result<PathBuf, CliError> {
    let path = run.path(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::MissingInput(format!(
            "missing conditionals: {} not found (run `score` first)",
            path.display()
        )))
    }
}

fn load_inputs(run: &Run, kinds: &[EstimatorKind]) -> Result<Loaded, CliError> {
    let design = &run.config.study;
    let mut loaded = Loaded::default();
    let needs = |pred: fn(EstimatorKind) -> bool| kinds.iter().any(|&k| pred(k));
    let slices_needed = needs(|k| matches!(k, EstimatorKind::NIpw | EstimatorKind::NOi | EstimatorKind::Inclusion));
    if needs(|k| !k.is_natural()) {
        let observed: Vec<ObservedRecord> = run.read(OBSERVED, "extracted treatments and outcomes")?;
        let covariates: Vec<CovariateRecord> = run.read(COVARIATES, "imputed covariates")?;
        let observed: BTreeMap<&str, &ObservedRecord> = observed.iter().map(|o| (o.report_id.as_str(), o)).collect();
        let mut units = Vec::with_capacity(covariates.len());
        for c in &covariates {
            if let Some(o) = observed.get(c.report_id.as_str()) {
                let x = c.vector(design).map_err(|e| CliError::Invalid(format!("{}: {e}", c.report_id)))?;
                units.push(TabularUnit::new(x, o.t, o.y));
            }
        }
        loaded.units = Some(units);
    }
    if slices_needed {
        let path = missing_conditionals(run, SLICES)?;
        let records: Vec<SliceRecord> = read_jsonl(&path).map_err(io_err)?;
        loaded.slices = Some(decode_all(&path, &records, |r| r.slice(design)).map_err(io_err)?);
    }
    if needs(|k| matches!(k, EstimatorKind::NFull | EstimatorKind::NMcIpw | EstimatorKind::NMcOi)) {
        let path = missing_conditionals(run, JOINTS)?;
        let records: Vec<JointRecord> = read_jsonl(&path).map_err(io_err)?;
        loaded.joints = Some(decode_all(&path, &records, |r| r.joint(design)).map_err(io_err)?);
    }
    if needs(|k| k == EstimatorKind::Inclusion) {
        let masks: Vec<CovariateRecord> = run.read(INCLUSION, "extracted covariates")?;
        let masks: BTreeMap<String, Vec<bool>> = masks.into_iter().map(|c| (c.report_id, c.known)).collect();
        let slices = loaded.slices.as_deref().unwrap_or_default();
        loaded.inclusion = Some(
            slices
                .iter()
                .map(|s| InclusionSlice {
                    known: masks.get(&s.report_id).cloned().unwrap_or_else(|| vec![false; s.x.values.len()]),
                    slice: s.clone(),
                })
                .collect(),
        );
    }
    Ok(loaded)
}

fn estimate(run: &mut Run) -> Result<(), CliError> {
    let kinds = run.config.estimate.estimators.clone();
    let loaded = load_inputs(run, &kinds)?;
    let inputs = loaded.inputs();
    let schema = &run.config.study.covariates;
    let jobs: Vec<(EstimatorKind, u64)> =
        kinds.iter().flat_map(|&k| run.config.estimate.seeds.iter().map(move |&s| (k, s))).collect();
    let results: Vec<Result<_, CliError>> = jobs
        .par_iter()
        .map(|&(kind, seed)| {
            let settings = EstimateSettings {
                epsilon: run.config.estimate.epsilon,
                seed,
                inclusion: run.config.study.inclusion_box(),
                bootstrap: run.config.estimate.bootstrap,
            };
            run_estimator(kind, &inputs, schema, &settings)
                .map(|e| (kind, seed, e))
                .map_err(|e| match e {
                    EstimateError::MissingInput(_) => estimate_err(e),
                    other => CliError::Invalid(format!("{}: {other}", kind.name())),
                })
        })
        .collect();
    let mut writer = csv::Writer::from_path(run.path(RESULTS)).map_err(io_err)?;
    writer.write_record(["estimator", "seed", "ate", "stderr", "n_used"]).map_err(io_err)?;
    for r in results {
        let (kind, seed, e) = r?;
        info!("{} (seed {seed}): {:.4}", kind.name(), e.value);
        writer
            .write_record([
                kind.name().to_string(),
                seed.to_string(),
                format!("{:.12}", e.value),
                e.stderr.map(|s| format!("{s:.12}")).unwrap_or_default(),
                e.n_used.to_string(),
            ])
            .map_err(io_err)?;
    }
    writer.flush().map_err(io_err)?;
    drop(writer);
    run.record(RESULTS)
}

fn diagnose(run: &mut Run) -> Result<(), CliError> {
    let study = run.synthetic_study()?;
    let diag = run.config.diagnose.clone();
    let config = ConvergenceConfig {
        n_grid: diag.n_grid.clone(),
        seeds: diag.seeds.clone(),
        render: run.render_options(),
        estimator: diag.estimator,
        epsilon: run.config.estimate.epsilon,
    };
    let curve = diagnostics::convergence_study(&study, &config).map_err(|e| CliError::Invalid(e.to_string()))?;
    curve.write_csv(&run.path(CONVERGENCE)).map_err(io_err)?;
    run.record(CONVERGENCE)?;
    if let Ok([kl, kl_e, err]) = curve.trends() {
        info!("Spearman with n: kl_joint {kl:?}, kl_propensity {kl_e:?}, |ATE error| {err:?}");
    }
    if diag.plots {
        diagnostics::plot_convergence(&curve, &run.path(CONVERGENCE_PLOT)).map_err(io_err)?;
        run.record(CONVERGENCE_PLOT)?;
    }

    let slices_path = run.path(SLICES);
    if !slices_path.is_file() {
        warn!("no {SLICES} in {}; skipping balance", run.out.display());
        return Ok(());
    }
    let design = &run.config.study;
    let records: Vec<SliceRecord> = read_jsonl(&slices_path).map_err(io_err)?;
    let slices = decode_all(&slices_path, &records, |r| r.slice(design)).map_err(io_err)?;
    let propensity =
        fit_propensity_conditional(&slices, &design.covariates, run.config.estimate.epsilon).map_err(estimate_err)?;
    let balance = diagnostics::balance_from_slices(&slices, &design.covariates, &propensity)
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    balance.write_csv(&run.path(BALANCE)).map_err(io_err)?;
    run.record(BALANCE)?;
    if diag.plots {
        diagnostics::plot_balance(&balance, &run.path(BALANCE_PLOT)).map_err(io_err)?;
        run.record(BALANCE_PLOT)?;
    }
    Ok(())
}
