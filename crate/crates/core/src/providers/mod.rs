//! Conditional-distribution providers.
//!
//! A [`Provider`] answers two kinds of requests: scoring a fixed set of
//! answer options (log-scores, renormalized here) and extracting a record of
//! fields. Each request travels with a structured query describing what is
//! asked, so exact providers (the oracle) can answer without reading the
//! prompt text while text models see only the prompt.
//!
//! Failures that may succeed on retry (transport errors, timeouts, malformed
//! replies) are retried up to [`ProviderPolicy::max_retries`] times; after
//! that the report is excluded, never defaulted.

pub mod oracle;
pub mod prompts;
pub mod remote;
pub mod server;
pub mod stub;

use std::collections::BTreeMap;
use std::time::Duration;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::study::{
    ConditionalSlice, CovariateVector, JointTable, Report, StudyDesign, StudyError, UNKNOWN,
};

pub use oracle::{NoisyOracle, OracleProvider, UniformImputer};
pub use remote::RemoteProvider;
pub use server::{RecordedRequest, ScriptedReply, StubServer};
pub use stub::StubProvider;

/// Allowed-value token marking a free numeric field in an extraction schema.
pub const NUMBER: &str = "<number>";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("provider cannot answer: {0}")]
    Unsupported(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: String },
    #[error(transparent)]
    Study(#[from] StudyError),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport(_) | ProviderError::Timeout | ProviderError::Malformed(_))
    }

    /// True when the error came from running out of attempts.
    pub fn is_exhaustion(&self) -> bool {
        matches!(self, ProviderError::Exhausted { .. })
    }
}

/// Retry, timeout and concurrency limits for one provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProviderPolicy {
    pub max_retries: usize,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl Default for ProviderPolicy {
    fn default() -> Self {
        ProviderPolicy { max_retries: 3, timeout: Duration::from_secs(30), max_in_flight: 8 }
    }
}

impl ProviderPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_retries == 0 || self.timeout.is_zero() || self.max_in_flight == 0 {
            return Err("provider policy values must all be positive".into());
        }
        Ok(())
    }
}

/// Wire body of `POST /score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringRequest {
    pub prompt: String,
    pub options: Vec<String>,
}

impl ScoringRequest {
    pub fn new(prompt: String, options: Vec<String>) -> Result<Self, ProviderError> {
        if options.len() < 2 {
            return Err(ProviderError::Invalid("at least two options required".into()));
        }
        for (i, o) in options.iter().enumerate() {
            if options[..i].contains(o) {
                return Err(ProviderError::Invalid(format!("duplicate option `{o}`")));
            }
        }
        Ok(ScoringRequest { prompt, options })
    }
}

/// Wire reply of `POST /score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringResponse {
    pub log_scores: Vec<f64>,
}

/// Wire body of `POST /extract`: field name to allowed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRequest {
    pub prompt: String,
    pub schema: BTreeMap<String, Vec<String>>,
}

/// Wire reply of `POST /extract`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResponse {
    pub fields: serde_json::Map<String, Value>,
}

/// Softmax of log-scores with max-shift; errors on any non-finite score.
pub fn score_to_distribution(response: &ScoringResponse) -> Result<Vec<f64>, ProviderError> {
    let scores = &response.log_scores;
    if scores.is_empty() {
        return Err(ProviderError::Malformed("no scores".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(ProviderError::Malformed(format!("non-finite score {bad}")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / total).collect())
}

/// What a scoring request asks, in structured form.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreTarget {
    /// Options: `["Yes", "No"]`.
    Relevance,
    /// P(X^dim | report, the known entries of `given`); options are the categories.
    Covariate { dim: usize, given: CovariateVector },
    /// P(T | report, x); options are the treatments.
    Treatment { x: CovariateVector },
    /// P(Y | report, x, T=t); options are the outcome answers.
    Outcome { x: CovariateVector, t: u8 },
    /// P(T, Y | report, x); options are the four (t, y) pairs, t-major.
    TreatmentOutcome { x: CovariateVector },
}

pub struct ScoreQuery<'a> {
    pub report: &'a Report,
    pub design: &'a StudyDesign,
    pub target: ScoreTarget,
}

/// What an extraction request asks, in structured form.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtractTask {
    TreatmentOutcome,
    /// Covariates as stated in the report, `Unknown` allowed.
    Covariates,
    /// Fill every covariate, keeping `known` entries, inside the inclusion box.
    Impute { known: CovariateVector },
}

pub struct ExtractQuery<'a> {
    pub report: &'a Report,
    pub design: &'a StudyDesign,
    pub task: ExtractTask,
    /// Seed for providers that sample.
    pub seed: u64,
    /// Zero-based attempt number; retries see increasing values.
    pub attempt: usize,
}

pub type RawFields = serde_json::Map<String, Value>;

pub trait Provider: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, query: &ScoreQuery<'_>, request: &ScoringRequest) -> Result<ScoringResponse, ProviderError>;

    fn extract(&self, query: &ExtractQuery<'_>, request: &ExtractionRequest) -> Result<RawFields, ProviderError>;

    /// The full P(X, T, Y | report) when the provider can compute it directly.
    fn joint(&self, _report: &Report, _design: &StudyDesign) -> Option<Result<JointTable, ProviderError>> {
        None
    }
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn score(&self, query: &ScoreQuery<'_>, request: &ScoringRequest) -> Result<ScoringResponse, ProviderError> {
        (**self).score(query, request)
    }
    fn extract(&self, query: &ExtractQuery<'_>, request: &ExtractionRequest) -> Result<RawFields, ProviderError> {
        (**self).extract(query, request)
    }
    fn joint(&self, report: &Report, design: &StudyDesign) -> Option<Result<JointTable, ProviderError>> {
        (**self).joint(report, design)
    }
}

/// Scores a request and renormalizes, retrying retryable failures.
pub fn score_with_retry(
    provider: &dyn Provider,
    query: &ScoreQuery<'_>,
    request: &ScoringRequest,
    policy: &ProviderPolicy,
) -> Result<Vec<f64>, ProviderError> {
    let mut last = String::new();
    for attempt in 0..=policy.max_retries {
        let result = provider.score(query, request).and_then(|r| {
            if r.log_scores.len() != request.options.len() {
                return Err(ProviderError::Malformed(format!(
                    "{} scores for {} options",
                    r.log_scores.len(),
                    request.options.len()
                )));
            }
            score_to_distribution(&r)
        });
        match result {
            Ok(p) => return Ok(p),
            Err(e) if e.is_retryable() => {
                debug!("score attempt {} for `{}` failed: {e}", attempt + 1, query.report.id);
                last = e.to_string();
            }
            Err(e) => return Err(e),
        }
    }
    Err(ProviderError::Exhausted { attempts: policy.max_retries + 1, last })
}

/// How the four (t, y) cells are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Treatment question, then the outcome question given each treatment answer.
    #[default]
    Chained,
    /// One question over the four treatment/outcome combinations.
    Joint,
}

/// P(T, Y | report, x) from the provider.
pub fn conditional_slice(
    provider: &dyn Provider,
    report: &Report,
    x: &CovariateVector,
    design: &StudyDesign,
    mode: ScoringMode,
    policy: &ProviderPolicy,
) -> Result<ConditionalSlice, ProviderError> {
    if !x.is_fully_known() {
        return Err(ProviderError::Invalid("conditional slice needs fully known covariates".into()));
    }
    design.covariates.check_shape(x)?;
    let p = match mode {
        ScoringMode::Chained => {
            let request = ScoringRequest::new(
                prompts::conditional_prompt(report, design, x, None),
                design.treatments.clone(),
            )?;
            let query = ScoreQuery { report, design, target: ScoreTarget::Treatment { x: x.clone() } };
            let pt = score_with_retry(provider, &query, &request, policy)?;
            let mut p = [[0.0; 2]; 2];
            for t in 0..2u8 {
                let request = ScoringRequest::new(
                    prompts::conditional_prompt(report, design, x, Some(t)),
                    design.outcome_options.clone(),
                )?;
                let query = ScoreQuery { report, design, target: ScoreTarget::Outcome { x: x.clone(), t } };
                let py = score_with_retry(provider, &query, &request, policy)?;
                p[t as usize] = [pt[t as usize] * py[0], pt[t as usize] * py[1]];
            }
            p
        }
        ScoringMode::Joint => {
            let options = prompts::joint_options(design);
            let request = ScoringRequest::new(prompts::joint_prompt(report, design, x), options)?;
            let query = ScoreQuery { report, design, target: ScoreTarget::TreatmentOutcome { x: x.clone() } };
            let q = score_with_retry(provider, &query, &request, policy)?;
            [[q[0], q[1]], [q[2], q[3]]]
        }
    };
    // Products of normalized factors can miss 1 by a few ulps.
    let total: f64 = p.iter().flatten().sum();
    let p = p.map(|row| row.map(|v| v / total));
    Ok(ConditionalSlice::new(report.id.clone(), x.clone(), p)?)
}

/// P(X, T, Y | report): the provider's own joint if it has one, otherwise
/// the chained covariate scores times the conditional slice of each stratum.
pub fn joint_table(
    provider: &dyn Provider,
    report: &Report,
    design: &StudyDesign,
    mode: ScoringMode,
    policy: &ProviderPolicy,
) -> Result<JointTable, ProviderError> {
    if let Some(joint) = provider.joint(report, design) {
        return joint;
    }
    let schema = &design.covariates;
    let n = schema.n_strata();
    // Prefix probabilities P(x_1..x_d | R), expanded one dimension at a time.
    let mut prefixes: Vec<(CovariateVector, f64)> = vec![(CovariateVector::unknown(schema.len()), 1.0)];
    for dim in 0..schema.len() {
        let mut next = Vec::new();
        for (given, mass) in prefixes {
            let request = ScoringRequest::new(
                prompts::covariate_prompt(report, design, &given, dim),
                schema.dims[dim].categories.clone(),
            )?;
            let query =
                ScoreQuery { report, design, target: ScoreTarget::Covariate { dim, given: given.clone() } };
            let pd = score_with_retry(provider, &query, &request, policy)?;
            for (v, p) in pd.into_iter().enumerate() {
                let mut x = given.clone();
                x.set(dim, v);
                next.push((x, mass * p));
            }
        }
        prefixes = next;
    }
    let mut cells = vec![0.0; n * 4];
    for (x, mass) in prefixes {
        if mass <= 0.0 {
            continue;
        }
        let slice = conditional_slice(provider, report, &x, design, mode, policy)?;
        let s = schema.stratum_index(&x)?;
        for t in 0..2u8 {
            for y in 0..2u8 {
                cells[JointTable::cell_index(s, t, y)] = mass * slice.p(t, y);
            }
        }
    }
    JointTable::from_masses(cells, n).map_err(|e| ProviderError::Malformed(e.to_string()))
}

/// Which variables [`sample_joint`] draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleScope {
    X,
    XT,
    XTY,
}

/// A draw of some of (X, T, Y) for one report.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialUnit {
    pub x: CovariateVector,
    pub t: Option<u8>,
    pub y: Option<u8>,
}

fn draw_index(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc && w > 0.0 {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Draws from the provider's conditional for one report, reproducibly for a seed.
pub fn sample_joint(
    provider: &dyn Provider,
    report: &Report,
    design: &StudyDesign,
    scope: SampleScope,
    policy: &ProviderPolicy,
    seed: u64,
) -> Result<PartialUnit, ProviderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = &design.covariates;
    if let Some(joint) = provider.joint(report, design) {
        let joint = joint?;
        let (x, t, y) = match scope {
            SampleScope::X => (draw_index(&mut rng, &joint.x_marginal()), None, None),
            SampleScope::XT => {
                let cells: Vec<f64> = (0..joint.n_strata())
                    .flat_map(|s| (0..2u8).map(move |t| (s, t)))
                    .map(|(s, t)| joint.get(s, t, 0) + joint.get(s, t, 1))
                    .collect();
                let i = draw_index(&mut rng, &cells);
                (i / 2, Some((i % 2) as u8), None)
            }
            SampleScope::XTY => {
                let i = draw_index(&mut rng, joint.cells());
                (i / 4, Some(((i % 4) / 2) as u8), Some((i % 2) as u8))
            }
        };
        return Ok(PartialUnit { x: schema.decode(x), t, y });
    }
    let imputed = extract_record(
        provider,
        &ExtractQuery {
            report,
            design,
            task: ExtractTask::Impute { known: CovariateVector::unknown(schema.len()) },
            seed,
            attempt: 0,
        },
        &ExtractionRequest {
            prompt: prompts::impute_prompt(report, design, &CovariateVector::unknown(schema.len())),
            schema: covariate_schema(design, false),
        },
        policy,
    )?;
    let x = covariates_from_fields(design, &imputed.fields)?;
    if !x.is_fully_known() {
        return Err(ProviderError::Malformed("sampled covariates incomplete".into()));
    }
    if scope == SampleScope::X {
        return Ok(PartialUnit { x, t: None, y: None });
    }
    let slice = conditional_slice(provider, report, &x, design, ScoringMode::Chained, policy)?;
    let flat = [slice.p(0, 0), slice.p(0, 1), slice.p(1, 0), slice.p(1, 1)];
    let (t, y) = match scope {
        SampleScope::XT => {
            let i = draw_index(&mut rng, &[flat[0] + flat[1], flat[2] + flat[3]]);
            (Some(i as u8), None)
        }
        _ => {
            let i = draw_index(&mut rng, &flat);
            (Some((i / 2) as u8), Some((i % 2) as u8))
        }
    };
    Ok(PartialUnit { x, t, y })
}

/// A validated extracted value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Number(f64),
    Label(String),
}

impl FieldValue {
    pub fn is_unknown(&self) -> bool {
        matches!(self, FieldValue::Label(l) if l == UNKNOWN)
    }

    pub fn as_label(&self) -> Option<&str> {
        match self {
            FieldValue::Label(l) if l != UNKNOWN => Some(l),
            _ => None,
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            FieldValue::Number(v) => Some(*v),
            _ => None,
        }
    }
}

/// Result of [`extract_record`].
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub fields: BTreeMap<String, FieldValue>,
    /// Attempts beyond the first.
    pub retries: usize,
    /// Fields set to `Unknown` after retries ran out.
    pub defaulted: Vec<String>,
}

fn validate_field(allowed: &[String], value: Option<&Value>) -> Result<FieldValue, String> {
    let value = value.ok_or("missing")?;
    let numeric_ok = allowed.iter().any(|a| a == NUMBER);
    match value {
        Value::Number(n) if numeric_ok => {
            let v = n.as_f64().ok_or("not representable")?;
            if v.is_finite() {
                Ok(FieldValue::Number(v))
            } else {
                Err("non-finite number".into())
            }
        }
        Value::String(s) => {
            let s = s.trim();
            if let Some(label) = allowed.iter().find(|a| *a != NUMBER && a.eq_ignore_ascii_case(s)) {
                return Ok(FieldValue::Label(label.clone()));
            }
            if numeric_ok {
                if let Ok(v) = s.parse::<f64>() {
                    if v.is_finite() {
                        return Ok(FieldValue::Number(v));
                    }
                }
            }
            Err(format!("value `{s}` not allowed"))
        }
        other => Err(format!("unexpected value {other}")),
    }
}

/// Runs an extraction, validating every field against its allowed values.
///
/// Invalid replies are retried. Once retries run out, fields that permit
/// `Unknown` fall back to it; an invalid required field excludes the report.
pub fn extract_record(
    provider: &dyn Provider,
    query: &ExtractQuery<'_>,
    request: &ExtractionRequest,
    policy: &ProviderPolicy,
) -> Result<Extraction, ProviderError> {
    let attempts = policy.max_retries + 1;
    let mut last_error = String::new();
    let mut last_fields: Option<RawFields> = None;
    for attempt in 0..attempts {
        let q = ExtractQuery { task: query.task.clone(), attempt, ..*query };
        match provider.extract(&q, request) {
            Ok(raw) => {
                let mut fields = BTreeMap::new();
                let mut invalid = Vec::new();
                for (name, allowed) in &request.schema {
                    match validate_field(allowed, raw.get(name)) {
                        Ok(v) => {
                            fields.insert(name.clone(), v);
                        }
                        Err(why) => invalid.push(format!("{name}: {why}")),
                    }
                }
                if invalid.is_empty() {
                    if attempt > 0 {
                        debug!("extraction for `{}` succeeded after {attempt} retries", query.report.id);
                    }
                    return Ok(Extraction { fields, retries: attempt, defaulted: Vec::new() });
                }
                debug!("extraction attempt {} for `{}` invalid: {}", attempt + 1, query.report.id, invalid.join("; "));
                last_error = invalid.join("; ");
                last_fields = Some(raw);
            }
            Err(e) if e.is_retryable() => last_error = e.to_string(),
            Err(e) => return Err(e),
        }
    }
    let exhausted = || ProviderError::Exhausted { attempts, last: last_error.clone() };
    let raw = last_fields.ok_or_else(exhausted)?;
    let mut fields = BTreeMap::new();
    let mut defaulted = Vec::new();
    for (name, allowed) in &request.schema {
        match validate_field(allowed, raw.get(name)) {
            Ok(v) => {
                fields.insert(name.clone(), v);
            }
            Err(_) if allowed.iter().any(|a| a == UNKNOWN) => {
                warn!("`{}`: field `{name}` defaulted to Unknown after {attempts} attempts", query.report.id);
                fields.insert(name.clone(), FieldValue::Label(UNKNOWN.to_string()));
                defaulted.push(name.clone());
            }
            Err(_) => return Err(exhausted()),
        }
    }
    Ok(Extraction { fields, retries: attempts - 1, defaulted })
}

/// Extraction schema over the design's covariates, restricted to the
/// inclusion box when imputing.
pub fn covariate_schema(design: &StudyDesign, allow_unknown: bool) -> BTreeMap<String, Vec<String>> {
    let inclusion = design.inclusion_box();
    design
        .covariates
        .dims
        .iter()
        .enumerate()
        .map(|(d, dim)| {
            let mut allowed: Vec<String> = if allow_unknown {
                dim.categories.clone()
            } else {
                inclusion
                    .allowed_values(&design.covariates, d)
                    .into_iter()
                    .map(|v| dim.categories[v].clone())
                    .collect()
            };
            if allow_unknown {
                allowed.push(UNKNOWN.to_string());
            }
            (dim.name.clone(), allowed)
        })
        .collect()
}

/// Reads a covariate vector out of validated extraction fields.
pub fn covariates_from_fields(
    design: &StudyDesign,
    fields: &BTreeMap<String, FieldValue>,
) -> Result<CovariateVector, ProviderError> {
    let schema = &design.covariates;
    let mut x = CovariateVector::unknown(schema.len());
    for (d, dim) in schema.dims.iter().enumerate() {
        match fields.get(&dim.name) {
            Some(v) if v.is_unknown() => {}
            Some(v) => {
                let label = v.as_label().ok_or_else(|| ProviderError::Malformed(format!("{}: not a label", dim.name)))?;
                let idx = dim
                    .category_index(label)
                    .ok_or_else(|| ProviderError::Malformed(format!("{}: unknown category {label}", dim.name)))?;
                x.set(d, idx);
            }
            None => return Err(ProviderError::Malformed(format!("missing field {}", dim.name))),
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dist(scores: &[f64]) -> Vec<f64> {
        score_to_distribution(&ScoringResponse { log_scores: scores.to_vec() }).unwrap()
    }

    #[test]
    fn equal_scores_are_uniform() {
        assert_eq!(dist(&[-1.0, -1.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn renormalization_hand_example() {
        // e^-1 / (e^-1 + e^-2) = 1 / (1 + e^-1)
        let p = dist(&[-1.0, -2.0]);
        assert_abs_diff_eq!(p[0], 0.731059, epsilon = 1e-5);
        assert_abs_diff_eq!(p[1], 0.268941, epsilon = 1e-5);
    }

    #[test]
    fn extreme_scores_do_not_overflow() {
        let p = dist(&[0.0, -1000.0]);
        assert_abs_diff_eq!(p[0], 1.0);
        assert!(p[1] < 1e-300);
        let p = dist(&[1e300, 1e300 - 1.0]);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn non_finite_score_rejected() {
        let r = ScoringResponse { log_scores: vec![0.0, f64::NAN] };
        assert!(matches!(score_to_distribution(&r), Err(ProviderError::Malformed(_))));
        let r = ScoringResponse { log_scores: vec![f64::NEG_INFINITY, 0.0] };
        assert!(score_to_distribution(&r).is_err());
    }

    #[test]
    fn scoring_request_invariants() {
        assert!(ScoringRequest::new("p".into(), vec!["a".into()]).is_err());
        assert!(ScoringRequest::new("p".into(), vec!["a".into(), "a".into()]).is_err());
        assert!(ScoringRequest::new("p".into(), vec!["a".into(), "b".into()]).is_ok());
    }

    #[test]
    fn wire_format_is_exact() {
        let req = ScoringRequest { prompt: "q".into(), options: vec!["No".into(), "Yes".into()] };
        assert_eq!(serde_json::to_string(&req).unwrap(), r#"{"prompt":"q","options":["No","Yes"]}"#);
        let resp: ScoringResponse = serde_json::from_str(r#"{"log_scores":[-0.5,-1.5]}"#).unwrap();
        assert_eq!(resp.log_scores, vec![-0.5, -1.5]);
        let mut schema = BTreeMap::new();
        schema.insert("sex".to_string(), vec!["M".to_string(), "F".to_string(), "Unknown".to_string()]);
        let ext = ExtractionRequest { prompt: "q".into(), schema };
        assert_eq!(
            serde_json::to_string(&ext).unwrap(),
            r#"{"prompt":"q","schema":{"sex":["M","F","Unknown"]}}"#
        );
        let r: ExtractionResponse = serde_json::from_str(r#"{"fields":{"sex":"F"}}"#).unwrap();
        assert_eq!(r.fields["sex"], "F");
    }

    #[test]
    fn field_validation() {
        let allowed = vec!["M".to_string(), "F".to_string(), UNKNOWN.to_string()];
        assert_eq!(validate_field(&allowed, Some(&Value::from("f"))), Ok(FieldValue::Label("F".into())));
        assert!(validate_field(&allowed, Some(&Value::from("X"))).is_err());
        assert!(validate_field(&allowed, None).is_err());
        let numeric = vec![NUMBER.to_string(), UNKNOWN.to_string()];
        assert_eq!(validate_field(&numeric, Some(&Value::from(220))), Ok(FieldValue::Number(220.0)));
        assert_eq!(validate_field(&numeric, Some(&Value::from("-3.5"))), Ok(FieldValue::Number(-3.5)));
        assert!(validate_field(&numeric, Some(&Value::from("lots"))).is_err());
    }

    proptest! {
        #[test]
        fn distribution_is_valid(scores in prop::collection::vec(-1e6f64..1e6, 2..12)) {
            let p = dist(&scores);
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
