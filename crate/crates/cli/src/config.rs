//! Run configuration, read from TOML.
//!
//! Sections: `[study]` (required), `[dgp]`, `[simulate]`, `[provider]`,
//! `[pipeline]`, `[estimate]`, `[diagnose]`, `[paths]`. Each section is
//! checked independently so that one run reports every problem found.

use std::path::PathBuf;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use textate_core::estimators::{EstimatorKind, DEFAULT_BOOTSTRAP, DEFAULT_EPSILON};
use textate_core::providers::{ProviderPolicy, ScoringMode};
use textate_core::synth::{Dgp, DgpTables, RenderOptions};
use textate_core::StudyDesign;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Oracle,
    NoisyOracle,
    Stub,
    Remote,
}

impl ProviderKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "oracle" => Some(ProviderKind::Oracle),
            "noisy_oracle" => Some(ProviderKind::NoisyOracle),
            "stub" => Some(ProviderKind::Stub),
            "remote" => Some(ProviderKind::Remote),
            _ => None,
        }
    }
}

/// Where imputed covariates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputationSource {
    #[default]
    Provider,
    /// Uniform draws over the admissible in-box values.
    Uniform,
}

/// Drop probability for every covariate, or one per covariate.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum DropSpec {
    All(f64),
    PerCovariate(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    #[serde(default = "zero_drop")]
    pub covariate_drop: DropSpec,
    #[serde(default)]
    pub treatment_drop: f64,
    #[serde(default)]
    pub outcome_drop: f64,
    #[serde(default)]
    pub seed: u64,
}

fn zero_drop() -> DropSpec {
    DropSpec::All(0.0)
}

impl SimulateSection {
    pub fn render_options(&self, n_dims: usize) -> RenderOptions {
        let covariate_drop = match &self.covariate_drop {
            DropSpec::All(p) => vec![*p; n_dims],
            DropSpec::PerCovariate(v) => v.clone(),
        };
        RenderOptions { covariate_drop, treatment_drop: self.treatment_drop, outcome_drop: self.outcome_drop }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    pub url: Option<String>,
    /// Dirichlet mixing weight for `noisy_oracle`.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub imputation: ImputationSource,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub scoring_mode: ScoringMode,
}

fn default_retries() -> usize {
    3
}
fn default_timeout() -> f64 {
    30.0
}
fn default_in_flight() -> usize {
    8
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection {
            kind: ProviderKind::Oracle,
            url: None,
            noise: 0.0,
            imputation: ImputationSource::Provider,
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
            scoring_mode: ScoringMode::Chained,
        }
    }
}

impl ProviderSection {
    pub fn policy(&self) -> ProviderPolicy {
        ProviderPolicy {
            max_retries: self.max_retries,
            timeout: Duration::from_secs_f64(self.timeout_secs.max(0.0)),
            max_in_flight: self.max_in_flight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    #[serde(default = "default_threshold")]
    pub relevance_threshold: f64,
    /// When false, reports are not rejected for known out-of-box covariates
    /// and imputation is unconstrained.
    #[serde(default = "yes")]
    pub inclusion_filter: bool,
    /// Also compute full per-report joints, needed by n_full and the n_mc estimators.
    #[serde(default = "yes")]
    pub joints: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_threshold() -> f64 {
    textate_core::pipeline::DEFAULT_RELEVANCE_THRESHOLD
}
fn yes() -> bool {
    true
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection { relevance_threshold: default_threshold(), inclusion_filter: true, joints: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEstimate {
    estimators: Vec<String>,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default = "default_bootstrap")]
    bootstrap: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_bootstrap() -> usize {
    DEFAULT_BOOTSTRAP
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSection {
    pub estimators: Vec<EstimatorKind>,
    pub seeds: Vec<u64>,
    pub epsilon: f64,
    pub bootstrap: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDiagnose {
    #[serde(default = "default_grid")]
    n_grid: Vec<usize>,
    #[serde(default = "default_diag_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_diag_estimator")]
    estimator: String,
    #[serde(default = "yes")]
    plots: bool,
}

fn default_grid() -> Vec<usize> {
    vec![500, 1000, 2000, 4000, 8000, 16000]
}
fn default_diag_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_diag_estimator() -> String {
    "n_full".into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseSection {
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub estimator: EstimatorKind,
    pub plots: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub out: Option<PathBuf>,
    /// Raw records for `filter`; defaults to `raw.jsonl` in the output directory.
    pub raw: Option<PathBuf>,
}

/// A fully validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub study: StudyDesign,
    pub dgp: Option<Dgp>,
    pub dgp_tables: Option<DgpTables>,
    pub simulate: Option<SimulateSection>,
    pub provider: ProviderSection,
    pub pipeline: PipelineSection,
    pub estimate: EstimateSection,
    pub diagnose: DiagnoseSection,
    pub paths: PathsSection,
}

const SECTIONS: [&str; 8] = ["study", "dgp", "simulate", "provider", "pipeline", "estimate", "diagnose", "paths"];

fn section<T: DeserializeOwned>(table: &toml::Table, name: &str, errors: &mut Vec<String>) -> Option<T> {
    let value = table.get(name)?;
    match value.clone().try_into::<T>() {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(format!("[{name}]: {}", e.message().trim()));
            None
        }
    }
}

fn parse_estimators(names: &[String], errors: &mut Vec<String>) -> Vec<EstimatorKind> {
    let mut out = Vec::new();
    for name in names {
        match EstimatorKind::parse(name) {
            Some(k) if !out.contains(&k) => out.push(k),
            Some(_) => {}
            None => errors.push(format!("[estimate]: unknown estimator `{name}`")),
        }
    }
    out
}

/// Parses and validates a configuration, returning every error found.
pub fn parse_config(text: &str) -> Result<RunConfig, Vec<String>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| vec![e.message().trim().to_string()])?;
    let mut errors = Vec::new();
    for key in table.keys() {
        if !SECTIONS.contains(&key.as_str()) {
            errors.push(format!("unknown section `{key}`"));
        }
    }

    if !table.contains_key("study") {
        errors.push("missing required section [study]".into());
    }
    let study = section::<StudyDesign>(&table, "study", &mut errors).and_then(|s| match s.validate() {
        Ok(s) => Some(s),
        Err(es) => {
            errors.extend(es.into_iter().map(|e| format!("[study]: {e}")));
            None
        }
    });

    let dgp_tables = section::<DgpTables>(&table, "dgp", &mut errors);
    let dgp = match (&study, &dgp_tables) {
        (Some(study), Some(tables)) => match Dgp::new(study.covariates.clone(), tables.clone()) {
            Ok(d) => Some(d),
            Err(e) => {
                errors.push(format!("[dgp]: {e}"));
                None
            }
        },
        _ => None,
    };

    let simulate = section::<SimulateSection>(&table, "simulate", &mut errors);
    if let (Some(sim), Some(study)) = (&simulate, &study) {
        if let DropSpec::PerCovariate(v) = &sim.covariate_drop {
            if v.len() != study.covariates.len() {
                errors.push(format!("[simulate]: {} drop probabilities for {} covariates", v.len(), study.covariates.len()));
            }
        }
        let opts = sim.render_options(study.covariates.len());
        if opts.covariate_drop.iter().chain([&opts.treatment_drop, &opts.outcome_drop]).any(|p| !(0.0..=1.0).contains(p)) {
            errors.push("[simulate]: drop probabilities must lie in [0, 1]".into());
        }
        if sim.n == 0 {
            errors.push("[simulate]: n must be positive".into());
        }
    }

    let provider = if table.contains_key("provider") {
        section::<ProviderSection>(&table, "provider", &mut errors).unwrap_or_default()
    } else {
        ProviderSection::default()
    };
    if provider.kind == ProviderKind::Remote && provider.url.as_deref().is_none_or(str::is_empty) {
        errors.push("[provider]: remote provider without URL".into());
    }
    if matches!(provider.kind, ProviderKind::Oracle | ProviderKind::NoisyOracle) && table.get("dgp").is_none() {
        errors.push("[provider]: oracle providers need a [dgp] section".into());
    }
    if !(0.0..=1.0).contains(&provider.noise) {
        errors.push("[provider]: noise must lie in [0, 1]".into());
    }
    if let Err(e) = provider.policy().validate() {
        errors.push(format!("[provider]: {e}"));
    }

    let pipeline = if table.contains_key("pipeline") {
        section::<PipelineSection>(&table, "pipeline", &mut errors).unwrap_or_default()
    } else {
        PipelineSection::default()
    };
    if !(0.0..1.0).contains(&pipeline.relevance_threshold) {
        errors.push("[pipeline]: relevance_threshold must lie in [0, 1)".into());
    }

    let estimate = match section::<RawEstimate>(&table, "estimate", &mut errors) {
        Some(raw) => {
            let estimators = parse_estimators(&raw.estimators, &mut errors);
            if raw.estimators.is_empty() {
                errors.push("[estimate]: at least one estimator required".into());
            }
            if raw.seeds.is_empty() {
                errors.push("[estimate]: at least one seed required".into());
            }
            if !(raw.epsilon > 0.0 && raw.epsilon < 0.5) {
                errors.push("[estimate]: epsilon must lie in (0, 0.5)".into());
            }
            EstimateSection { estimators, seeds: raw.seeds, epsilon: raw.epsilon, bootstrap: raw.bootstrap }
        }
        None => {
            if !table.contains_key("estimate") {
                errors.push("missing required section [estimate]".into());
            }
            EstimateSection { estimators: Vec::new(), seeds: default_seeds(), epsilon: DEFAULT_EPSILON, bootstrap: 0 }
        }
    };

    let raw_diag = if table.contains_key("diagnose") {
        section::<RawDiagnose>(&table, "diagnose", &mut errors)
    } else {
        None
    };
    let raw_diag = raw_diag.unwrap_or(RawDiagnose {
        n_grid: default_grid(),
        seeds: default_diag_seeds(),
        estimator: default_diag_estimator(),
        plots: true,
    });
    let diag_estimator = match EstimatorKind::parse(&raw_diag.estimator) {
        Some(k) if k.is_natural() => k,
        Some(_) => {
            errors.push(format!("[diagnose]: `{}` does not read report distributions", raw_diag.estimator));
            EstimatorKind::NFull
        }
        None => {
            errors.push(format!("[diagnose]: unknown estimator `{}`", raw_diag.estimator));
            EstimatorKind::NFull
        }
    };
    if raw_diag.n_grid.is_empty() || raw_diag.n_grid.windows(2).any(|w| w[0] >= w[1]) {
        errors.push("[diagnose]: n_grid must be non-empty and strictly increasing".into());
    }
    if raw_diag.seeds.len() < 3 {
        errors.push("[diagnose]: at least three seeds required".into());
    }
    let diagnose =
        DiagnoseSection { n_grid: raw_diag.n_grid, seeds: raw_diag.seeds, estimator: diag_estimator, plots: raw_diag.plots };

    let paths = section::<PathsSection>(&table, "paths", &mut errors).unwrap_or_default();

    match study {
        Some(study) if errors.is_empty() => Ok(RunConfig {
            study,
            dgp,
            dgp_tables,
            simulate,
            provider,
            pipeline,
            estimate,
            diagnose,
            paths,
        }),
        _ => Err(errors),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
[study]
name = "toy"
treatments = ["Drug A", "Drug B"]
outcome_question = "Did the symptoms improve?"
covariates = [{ name = "age", categories = ["young", "old"] }]

[dgp]
px = [0.5, 0.5]
e = [0.3, 0.7]
py1 = [0.8, 0.6]
py0 = [0.5, 0.2]

[provider]
kind = "oracle"

[estimate]
estimators = ["n_ipw"]
"#;

    #[test]
    fn minimal_config_parses() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.provider.kind, ProviderKind::Oracle);
        assert_eq!(c.estimate.estimators, vec![EstimatorKind::NIpw]);
        assert_eq!(c.estimate.epsilon, DEFAULT_EPSILON);
        assert!(c.pipeline.inclusion_filter);
    }

    #[test]
    fn unknown_estimator_is_reported() {
        let text = MINIMAL.replace(r#"["n_ipw"]"#, r#"["n_ipw2"]"#);
        let errors = parse_config(&text).unwrap_err();
        assert!(errors.iter().any(|e| e.contains("unknown estimator")), "{errors:?}");
    }

    #[test]
    fn remote_without_url_is_reported() {
        let text = MINIMAL.replace(r#"kind = "oracle""#, r#"kind = "remote""#);
        let errors = parse_config(&text).unwrap_err();
        assert!(errors.iter().any(|e| e.contains("remote provider without URL")), "{errors:?}");
    }

    #[test]
    fn all_errors_reported_together() {
        let text = format!("{}\n[bogus]\nx = 1\n", MINIMAL.replace(r#"["n_ipw"]"#, r#"["nope"]"#))
            .replace(r#"kind = "oracle""#, "kind = \"oracle\"\ncolour = 1");
        let errors = parse_config(&text).unwrap_err();
        assert!(errors.len() >= 3, "{errors:?}");
        assert!(errors.iter().any(|e| e.contains("unknown section `bogus`")));
        assert!(errors.iter().any(|e| e.contains("colour")));
    }

    #[test]
    fn oracle_without_dgp_is_reported() {
        let start = MINIMAL.find("[dgp]").unwrap();
        let end = MINIMAL.find("[provider]").unwrap();
        let text = format!("{}{}", &MINIMAL[..start], &MINIMAL[end..]);
        let errors = parse_config(&text).unwrap_err();
        assert!(errors.iter().any(|e| e.contains("[dgp]")), "{errors:?}");
    }

    #[test]
    fn missing_study_is_reported() {
        let errors = parse_config("[estimate]\nestimators = [\"ipw\"]\n").unwrap_err();
        assert!(errors.iter().any(|e| e.contains("[study]")));
    }

    #[test]
    fn study_validation_errors_propagate() {
        let text = MINIMAL.replace(r#"["Drug A", "Drug B"]"#, r#"["Drug A"]"#);
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn dgp_shape_checked() {
        let text = MINIMAL.replace("px = [0.5, 0.5]", "px = [1.0]");
        let errors = parse_config(&text).unwrap_err();
        assert!(errors.iter().any(|e| e.starts_with("[dgp]")), "{errors:?}");
    }
}
