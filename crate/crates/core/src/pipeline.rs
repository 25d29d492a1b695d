//! Report-processing cascade: a rule-based pre-filter, provider-backed
//! relevance, treatment/outcome and inclusion filters, covariate imputation,
//! per-report conditional scoring, and discretization of numeric covariates.
//!
//! Every batch stage runs reports in parallel and returns its output sorted
//! by report id.

use std::collections::BTreeMap;
use std::fmt;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::providers::oracle::{OUTCOME_FIELD, TREATMENT_FIELD};
use crate::providers::{
    self, covariate_schema, covariates_from_fields, extract_record, prompts, score_with_retry, ExtractQuery,
    ExtractTask, ExtractionRequest, FieldValue, Provider, ProviderError, ProviderPolicy, ScoreQuery, ScoreTarget,
    ScoringMode, ScoringRequest, NUMBER,
};
use crate::study::{
    ConditionalSlice, CovariateVector, JointTable, Keywords, OutcomeRule, Report, StudyDesign, UNKNOWN,
};

/// Pounds per kilogram.
pub const LB_PER_KG: f64 = 2.20462;
pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 0.5;
/// Minimum whitespace-separated tokens in a comment.
pub const MIN_COMMENT_TOKENS: usize = 10;
/// Prefix length that must contain whitespace.
pub const WHITESPACE_WINDOW: usize = 2048;
pub const MIN_ALPHABETIC_SHARE: f64 = 0.5;
/// Decision reason for reports excluded by a provider failure.
pub const PROVIDER_FAILURE: &str = "provider_failure";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Relevance,
    TreatmentOutcome,
    Inclusion,
    Imputation,
    Scoring,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Initial => "initial",
            Stage::Relevance => "relevance",
            Stage::TreatmentOutcome => "treatment_outcome",
            Stage::Inclusion => "inclusion",
            Stage::Imputation => "imputation",
            Stage::Scoring => "scoring",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub report_id: String,
    pub stage: Stage,
    pub kept: bool,
    pub reason: String,
}

impl FilterDecision {
    fn keep(report_id: &str, stage: Stage) -> Self {
        FilterDecision { report_id: report_id.to_string(), stage, kept: true, reason: "kept".into() }
    }

    fn reject(report_id: &str, stage: Stage, reason: impl Into<String>) -> Self {
        FilterDecision { report_id: report_id.to_string(), stage, kept: false, reason: reason.into() }
    }

    fn failure(report_id: &str, stage: Stage, error: &ProviderError) -> Self {
        debug!("{report_id}: {stage} failed: {error}");
        Self::reject(report_id, stage, PROVIDER_FAILURE)
    }

    pub fn is_provider_failure(&self) -> bool {
        !self.kept && self.reason == PROVIDER_FAILURE
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no values to bin for `{0}`")]
    EmptyValues(String),
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
    #[error("cut points for `{0}` must be strictly increasing")]
    UnsortedCuts(String),
    #[error("raw record is not a report: {0}")]
    BadRecord(String),
}

fn text_field<'a>(raw: &'a Value, key: &str) -> Option<&'a str> {
    raw.get(key).and_then(Value::as_str)
}

/// Identifier of a raw record, or a placeholder when it has none.
pub fn raw_id(raw: &Value) -> String {
    match raw.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => "<missing id>".to_string(),
    }
}

fn contains_keyword(text: &str, keywords: &[String]) -> bool {
    // An empty list leaves the rule disabled.
    keywords.is_empty() || keywords.iter().any(|k| text.contains(&k.to_lowercase()))
}

/// Rule-based pre-filter over a raw JSON record.
///
/// Expected keys: `id`, `body`, `score`, `author`, `kind` (`post` or
/// `comment`), and optionally `title` and `author_replies`. Keyword checks
/// are case-insensitive substring matches over title, body and replies.
pub fn initial_filter(raw: &Value, keywords: &Keywords) -> FilterDecision {
    let id = raw_id(raw);
    let reject = |reason: &str| FilterDecision::reject(&id, Stage::Initial, reason);
    let Some(body) = text_field(raw, "body") else {
        return reject("body not a string");
    };
    if raw.get("score").is_none_or(Value::is_null) {
        return reject("missing score");
    }
    if matches!(body.trim(), "[deleted]" | "[removed]") {
        return reject("deleted/removed");
    }
    if text_field(raw, "kind") == Some("comment") && body.split_whitespace().count() < MIN_COMMENT_TOKENS {
        return reject("too short");
    }
    if text_field(raw, "author").is_some_and(|a| a.to_lowercase().contains("bot")) {
        return reject("bot author");
    }
    if !body.chars().take(WHITESPACE_WINDOW).any(char::is_whitespace) {
        return reject("no whitespace");
    }
    let total = body.chars().count();
    let alphabetic = body.chars().filter(|c| c.is_alphabetic()).count();
    if total == 0 || (alphabetic as f64) < MIN_ALPHABETIC_SHARE * total as f64 {
        return reject("mostly non-alphabetic");
    }
    let mut text = body.to_lowercase();
    if let Some(title) = text_field(raw, "title") {
        text.push('\n');
        text.push_str(&title.to_lowercase());
    }
    if let Some(replies) = raw.get("author_replies").and_then(Value::as_array) {
        for r in replies.iter().filter_map(Value::as_str) {
            text.push('\n');
            text.push_str(&r.to_lowercase());
        }
    }
    if !contains_keyword(&text, &keywords.treatment) {
        return reject("no treatment keyword");
    }
    if !contains_keyword(&text, &keywords.outcome) {
        return reject("no outcome keyword");
    }
    FilterDecision::keep(&id, Stage::Initial)
}

/// Converts a raw record that passed [`initial_filter`] into a [`Report`].
pub fn report_from_raw(raw: &Value) -> Result<Report, PipelineError> {
    #[derive(Deserialize)]
    struct Shape {
        source: Option<String>,
        subreddit: Option<String>,
        title: Option<String>,
        created: chrono::DateTime<chrono::Utc>,
        body: String,
        #[serde(default)]
        author_replies: Vec<String>,
    }
    let shape: Shape = serde_json::from_value(raw.clone()).map_err(|e| PipelineError::BadRecord(e.to_string()))?;
    Ok(Report {
        id: raw_id(raw),
        source: shape.source.or(shape.subreddit).unwrap_or_default(),
        title: shape.title,
        created: shape.created,
        body: shape.body,
        author_replies: shape.author_replies,
    })
}

/// Provider-backed relevance check; keeps iff P(Yes) > `threshold`.
pub fn relevance_filter(
    provider: &dyn Provider,
    report: &Report,
    design: &StudyDesign,
    threshold: f64,
    policy: &ProviderPolicy,
) -> FilterDecision {
    let request = ScoringRequest { prompt: prompts::relevance_prompt(report, design), options: vec!["Yes".into(), "No".into()] };
    let query = ScoreQuery { report, design, target: ScoreTarget::Relevance };
    match score_with_retry(provider, &query, &request, policy) {
        Ok(p) if p[0] > threshold => FilterDecision::keep(&report.id, Stage::Relevance),
        Ok(p) => FilterDecision::reject(&report.id, Stage::Relevance, format!("P(Yes) = {:.3}", p[0])),
        Err(e) => FilterDecision::failure(&report.id, Stage::Relevance, &e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightUnit {
    Kg,
    Lb,
}

/// Outcome evidence extracted from a report. Weights are in pounds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFields {
    pub treatment: Option<String>,
    /// Direct answer to the outcome question, for binary-outcome studies.
    pub outcome: Option<String>,
    pub start_weight: Option<f64>,
    pub end_weight: Option<f64>,
    /// Signed change, negative for loss.
    pub weight_change: Option<f64>,
    /// Signed percentage change, negative for loss.
    pub percentage_weight_change: Option<f64>,
    pub weight_unit: Option<WeightUnit>,
}

pub const START_WEIGHT: &str = "start_weight";
pub const END_WEIGHT: &str = "end_weight";
pub const WEIGHT_CHANGE: &str = "weight_change";
pub const PERCENT_CHANGE: &str = "percentage_weight_change";
pub const WEIGHT_UNIT: &str = "weight_unit";
/// Treatment label outside the study arms.
pub const OTHER: &str = "Other";

/// Extraction schema for the treatment/outcome stage.
pub fn outcome_schema(design: &StudyDesign) -> BTreeMap<String, Vec<String>> {
    let with_unknown = |mut v: Vec<String>| {
        v.push(UNKNOWN.to_string());
        v
    };
    let mut treatments = design.treatments.clone();
    treatments.push(OTHER.to_string());
    let mut schema = BTreeMap::new();
    schema.insert(TREATMENT_FIELD.to_string(), with_unknown(treatments));
    match design.outcome_rule {
        OutcomeRule::Binary => {
            schema.insert(OUTCOME_FIELD.to_string(), with_unknown(design.outcome_options.clone()));
        }
        OutcomeRule::WeightLoss { .. } => {
            for field in [START_WEIGHT, END_WEIGHT, WEIGHT_CHANGE, PERCENT_CHANGE] {
                schema.insert(field.to_string(), with_unknown(vec![NUMBER.to_string()]));
            }
            schema.insert(WEIGHT_UNIT.to_string(), with_unknown(vec!["kg".into(), "lb".into()]));
        }
    }
    schema
}

impl OutcomeFields {
    /// Reads validated extraction fields, converting weights to pounds.
    pub fn from_extraction(fields: &BTreeMap<String, FieldValue>) -> Self {
        let label = |k: &str| fields.get(k).and_then(FieldValue::as_label).map(str::to_string);
        let number = |k: &str| fields.get(k).and_then(FieldValue::as_number).filter(|v| v.is_finite());
        let weight_unit = match label(WEIGHT_UNIT).as_deref().map(str::to_ascii_lowercase).as_deref() {
            Some("kg") => Some(WeightUnit::Kg),
            Some("lb") => Some(WeightUnit::Lb),
            _ => None,
        };
        let mut out = OutcomeFields {
            treatment: label(TREATMENT_FIELD),
            outcome: label(OUTCOME_FIELD),
            start_weight: number(START_WEIGHT),
            end_weight: number(END_WEIGHT),
            weight_change: number(WEIGHT_CHANGE),
            percentage_weight_change: number(PERCENT_CHANGE),
            weight_unit,
        };
        if weight_unit == Some(WeightUnit::Kg) {
            for w in [&mut out.start_weight, &mut out.end_weight, &mut out.weight_change] {
                *w = w.map(|v| v * LB_PER_KG);
            }
            out.weight_unit = Some(WeightUnit::Lb);
        }
        out
    }

    /// Percentage of starting weight lost (positive for loss), from the
    /// first usable of: reported percentage, start and end, change and start.
    pub fn loss_percent(&self) -> Option<f64> {
        if let Some(pct) = self.percentage_weight_change {
            return Some(-pct);
        }
        let start = self.start_weight.filter(|s| *s != 0.0);
        if let (Some(start), Some(end)) = (start, self.end_weight) {
            return Some((start - end) / start * 100.0);
        }
        if let (Some(start), Some(change)) = (start, self.weight_change) {
            return Some(-change / start * 100.0);
        }
        None
    }
}

/// Binary outcome implied by the extracted fields, if any.
pub fn infer_outcome(fields: &OutcomeFields, design: &StudyDesign) -> Option<u8> {
    match design.outcome_rule {
        OutcomeRule::Binary => fields.outcome.as_deref().and_then(|o| design.outcome_index(o)),
        OutcomeRule::WeightLoss { threshold_pct } => fields.loss_percent().map(|loss| u8::from(loss >= threshold_pct)),
    }
}

/// Extracted fields for one report, as persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub report_id: String,
    pub fields: BTreeMap<String, FieldValue>,
}

/// Result of the treatment/outcome stage for one report.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentOutcome {
    pub decision: FilterDecision,
    pub extraction: Option<ExtractionRecord>,
    pub observed: Option<(u8, u8)>,
}

pub fn treatment_outcome_filter(
    provider: &dyn Provider,
    report: &Report,
    design: &StudyDesign,
    policy: &ProviderPolicy,
    seed: u64,
) -> TreatmentOutcome {
    let schema = outcome_schema(design);
    let request = ExtractionRequest { prompt: prompts::treatment_outcome_prompt(report, &schema), schema };
    let query = ExtractQuery { report, design, task: ExtractTask::TreatmentOutcome, seed, attempt: 0 };
    let extraction = match extract_record(provider, &query, &request, policy) {
        Ok(e) => e,
        Err(e) => {
            return TreatmentOutcome {
                decision: FilterDecision::failure(&report.id, Stage::TreatmentOutcome, &e),
                extraction: None,
                observed: None,
            }
        }
    };
    let fields = OutcomeFields::from_extraction(&extraction.fields);
    let record = Some(ExtractionRecord { report_id: report.id.clone(), fields: extraction.fields });
    let reject = |reason: &str, extraction| TreatmentOutcome {
        decision: FilterDecision::reject(&report.id, Stage::TreatmentOutcome, reason),
        extraction,
        observed: None,
    };
    let Some(t) = fields.treatment.as_deref().and_then(|t| design.treatment_index(t)) else {
        return reject("treatment not in study", record);
    };
    let Some(y) = infer_outcome(&fields, design) else {
        return reject("outcome not inferable", record);
    };
    TreatmentOutcome {
        decision: FilterDecision::keep(&report.id, Stage::TreatmentOutcome),
        extraction: record,
        observed: Some((t, y)),
    }
}

/// Covariate values for one report, as persisted: labels, with `Unknown`
/// in unknown slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateRecord {
    pub report_id: String,
    pub values: Vec<String>,
    pub known: Vec<bool>,
}

impl CovariateRecord {
    pub fn new(report_id: &str, x: &CovariateVector, design: &StudyDesign) -> Self {
        CovariateRecord { report_id: report_id.to_string(), values: design.covariates.labels(x), known: x.known.clone() }
    }

    pub fn vector(&self, design: &StudyDesign) -> Result<CovariateVector, crate::study::StudyError> {
        design.covariates.parse_labels(&self.values)
    }
}

/// Extracts covariates with `Unknown` allowed and rejects the report iff a
/// known value lies outside the inclusion box.
pub fn inclusion_filter(
    provider: &dyn Provider,
    report: &Report,
    design: &StudyDesign,
    policy: &ProviderPolicy,
    seed: u64,
) -> (FilterDecision, Option<CovariateVector>) {
    let schema = covariate_schema(design, true);
    let request = ExtractionRequest { prompt: prompts::covariate_prompt_extract(report, design, &schema), schema };
    let query = ExtractQuery { report, design, task: ExtractTask::Covariates, seed, attempt: 0 };
    let x = extract_record(provider, &query, &request, policy).and_then(|e| covariates_from_fields(design, &e.fields));
    let x = match x {
        Ok(x) => x,
        Err(e) => return (FilterDecision::failure(&report.id, Stage::Inclusion, &e), None),
    };
    let inclusion = design.inclusion_box();
    if let Some(d) = (0..x.values.len()).find(|&d| x.get(d).is_some_and(|v| !inclusion.allows(d, v))) {
        let reason = format!("{} outside inclusion criteria", design.covariates.dims[d].name);
        return (FilterDecision::reject(&report.id, Stage::Inclusion, reason), Some(x));
    }
    (FilterDecision::keep(&report.id, Stage::Inclusion), Some(x))
}

/// Fills every unknown covariate with an in-box value from the provider.
/// Known entries are kept even if the provider disagrees with them.
pub fn impute_unknowns(
    provider: &dyn Provider,
    report: &Report,
    partial: &CovariateVector,
    design: &StudyDesign,
    policy: &ProviderPolicy,
    seed: u64,
) -> Result<CovariateVector, ProviderError> {
    if partial.is_fully_known() {
        return Ok(partial.clone());
    }
    let schema = covariate_schema(design, false);
    let request = ExtractionRequest { prompt: prompts::impute_prompt(report, design, partial), schema };
    let query = ExtractQuery { report, design, task: ExtractTask::Impute { known: partial.clone() }, seed, attempt: 0 };
    let extraction = extract_record(provider, &query, &request, policy)?;
    let imputed = covariates_from_fields(design, &extraction.fields)?;
    if !imputed.is_fully_known() {
        return Err(ProviderError::Malformed("imputation left Unknown values".into()));
    }
    let mut out = imputed;
    for d in 0..partial.values.len() {
        if let Some(known) = partial.get(d) {
            if out.get(d) != Some(known) {
                warn!(
                    "{}: imputation changed known {} from {} to {}; keeping the known value",
                    report.id,
                    design.covariates.dims[d].name,
                    design.covariates.dims[d].categories[known],
                    out.get(d).map(|v| design.covariates.dims[d].categories[v].as_str()).unwrap_or(UNKNOWN)
                );
                out.set(d, known);
            }
        }
    }
    if !design.inclusion_box().admits_known(&out) {
        return Err(ProviderError::Malformed("imputed profile outside inclusion criteria".into()));
    }
    Ok(out)
}

/// Discretization of one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinKind {
    /// Bin `i` holds values in `(cuts[i-1], cuts[i]]`.
    Cuts { cuts: Vec<f64> },
    /// Raw category label to merged category.
    Merge { map: BTreeMap<String, String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRule {
    pub dimension: String,
    #[serde(flatten)]
    pub kind: BinKind,
}

impl BinRule {
    pub fn cuts(dimension: &str, cuts: Vec<f64>) -> Result<Self, PipelineError> {
        if cuts.iter().any(|c| !c.is_finite()) {
            return Err(PipelineError::NonFinite(dimension.to_string()));
        }
        if cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PipelineError::UnsortedCuts(dimension.to_string()));
        }
        Ok(BinRule { dimension: dimension.to_string(), kind: BinKind::Cuts { cuts } })
    }

    pub fn n_bins(&self) -> usize {
        match &self.kind {
            BinKind::Cuts { cuts } => cuts.len() + 1,
            BinKind::Merge { map } => {
                let mut targets: Vec<&String> = map.values().collect();
                targets.sort();
                targets.dedup();
                targets.len()
            }
        }
    }

    /// Bin index of a numeric value; values equal to a cut go to the lower bin.
    pub fn bin_of(&self, value: f64) -> Option<usize> {
        match &self.kind {
            BinKind::Cuts { cuts } => Some(cuts.partition_point(|&c| c < value)),
            BinKind::Merge { .. } => None,
        }
    }

    /// Category label of a raw value, numeric or categorical.
    pub fn label_of(&self, raw: &FieldValue) -> Option<String> {
        match (&self.kind, raw) {
            (BinKind::Cuts { .. }, FieldValue::Number(v)) => self.bin_of(*v).map(|i| self.labels()[i].clone()),
            (BinKind::Merge { map }, FieldValue::Label(l)) => map.get(l).cloned(),
            _ => None,
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match &self.kind {
            BinKind::Cuts { cuts } => {
                let mut out = Vec::with_capacity(cuts.len() + 1);
                for (i, c) in cuts.iter().enumerate() {
                    out.push(if i == 0 { format!("<={c}") } else { format!("({},{c}]", cuts[i - 1]) });
                }
                out.push(match cuts.last() {
                    Some(c) => format!(">{c}"),
                    None => "all".to_string(),
                });
                out
            }
            BinKind::Merge { map } => {
                let mut targets: Vec<String> = map.values().cloned().collect();
                targets.sort();
                targets.dedup();
                targets
            }
        }
    }
}

/// Quantile cut points giving bins of near-equal counts. Requests for more
/// bins than the data can support yield fewer bins and a warning.
pub fn fit_bins(dimension: &str, values: &[f64], n_bins: usize) -> Result<BinRule, PipelineError> {
    if values.is_empty() || n_bins == 0 {
        return Err(PipelineError::EmptyValues(dimension.to_string()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PipelineError::NonFinite(dimension.to_string()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let max = sorted[n - 1];
    let mut cuts: Vec<f64> = Vec::new();
    for k in 1..n_bins {
        let position = (k * n).div_ceil(n_bins);
        let cut = sorted[position.max(1) - 1];
        if cut < max && cuts.last().is_none_or(|&last| cut > last) {
            cuts.push(cut);
        }
    }
    if cuts.len() + 1 < n_bins {
        warn!("{dimension}: {} bins requested, {} emitted", n_bins, cuts.len() + 1);
    }
    BinRule::cuts(dimension, cuts)
}

/// Shared settings for provider-backed stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub policy: ProviderPolicy,
    pub relevance_threshold: f64,
    pub mode: ScoringMode,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            policy: ProviderPolicy::default(),
            relevance_threshold: DEFAULT_RELEVANCE_THRESHOLD,
            mode: ScoringMode::Chained,
            seed: 0,
        }
    }
}

fn sorted_by_id<T>(mut items: Vec<T>, id: impl Fn(&T) -> &str) -> Vec<T> {
    items.sort_by(|a, b| id(a).cmp(id(b)));
    items
}

/// Output of [`run_filters`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutput {
    pub decisions: Vec<FilterDecision>,
    /// Reports that passed every filter.
    pub kept: Vec<Report>,
    pub extractions: Vec<ExtractionRecord>,
    /// Covariates as extracted, `Unknown` allowed, for kept reports.
    pub inclusion: Vec<CovariateRecord>,
    /// Treatment and outcome read from kept reports.
    pub observed: BTreeMap<String, (u8, u8)>,
}

impl FilterOutput {
    /// Stages at which reports were attempted and every one failed in the provider.
    pub fn fully_failed_stages(&self) -> Vec<Stage> {
        stages_all_failed(&self.decisions)
    }
}

/// Stages where at least one report was attempted and all attempts failed
/// in the provider.
pub fn stages_all_failed(decisions: &[FilterDecision]) -> Vec<Stage> {
    let mut by_stage: BTreeMap<Stage, (usize, usize)> = BTreeMap::new();
    for d in decisions {
        let e = by_stage.entry(d.stage).or_default();
        e.0 += 1;
        e.1 += usize::from(d.is_provider_failure());
    }
    by_stage.into_iter().filter(|(_, (n, f))| *n > 0 && n == f).map(|(s, _)| s).collect()
}

/// Rule-based filter over raw records. Returns decisions and kept reports.
pub fn run_initial(raws: &[Value], keywords: &Keywords) -> (Vec<FilterDecision>, Vec<Report>) {
    let results: Vec<(FilterDecision, Option<Report>)> = raws
        .par_iter()
        .map(|raw| {
            let decision = initial_filter(raw, keywords);
            if !decision.kept {
                return (decision, None);
            }
            match report_from_raw(raw) {
                Ok(report) => (decision, Some(report)),
                Err(e) => (FilterDecision::reject(&decision.report_id, Stage::Initial, e.to_string()), None),
            }
        })
        .collect();
    let (decisions, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    (
        sorted_by_id(decisions, |d| &d.report_id),
        sorted_by_id(reports.into_iter().flatten().collect(), |r| &r.id),
    )
}

/// Relevance, treatment/outcome and inclusion filters over parsed reports.
pub fn run_filters(provider: &dyn Provider, reports: &[Report], design: &StudyDesign, config: &StageConfig) -> FilterOutput {
    struct PerReport {
        decisions: Vec<FilterDecision>,
        kept: Option<Report>,
        extraction: Option<ExtractionRecord>,
        inclusion: Option<CovariateRecord>,
        observed: Option<(u8, u8)>,
    }
    let per_report: Vec<PerReport> = reports
        .par_iter()
        .map(|report| {
            let mut out =
                PerReport { decisions: Vec::new(), kept: None, extraction: None, inclusion: None, observed: None };
            let relevance = relevance_filter(provider, report, design, config.relevance_threshold, &config.policy);
            let relevant = relevance.kept;
            out.decisions.push(relevance);
            if !relevant {
                return out;
            }
            let to = treatment_outcome_filter(provider, report, design, &config.policy, config.seed);
            out.extraction = to.extraction;
            let kept = to.decision.kept;
            out.decisions.push(to.decision);
            if !kept {
                return out;
            }
            let (decision, x) = inclusion_filter(provider, report, design, &config.policy, config.seed);
            let kept = decision.kept;
            out.decisions.push(decision);
            if kept {
                let x = x.expect("kept reports carry covariates");
                out.inclusion = Some(CovariateRecord::new(&report.id, &x, design));
                out.kept = Some(report.clone());
                out.observed = to.observed;
            }
            out
        })
        .collect();
    let mut output = FilterOutput::default();
    for r in per_report {
        output.decisions.extend(r.decisions);
        if let Some(report) = r.kept {
            if let Some(obs) = r.observed {
                output.observed.insert(report.id.clone(), obs);
            }
            output.kept.push(report);
        }
        output.extractions.extend(r.extraction);
        output.inclusion.extend(r.inclusion);
    }
    output.decisions.sort_by(|a, b| a.report_id.cmp(&b.report_id).then(a.stage.cmp(&b.stage)));
    output.kept = sorted_by_id(output.kept, |r| &r.id);
    output.extractions = sorted_by_id(output.extractions, |e| &e.report_id);
    output.inclusion = sorted_by_id(output.inclusion, |c| &c.report_id);
    output
}

/// Imputes unknown covariates for each report. Reports whose imputation
/// fails are excluded with a decision.
pub fn run_imputation(
    provider: &dyn Provider,
    reports: &[Report],
    inclusion: &[CovariateRecord],
    design: &StudyDesign,
    config: &StageConfig,
) -> (Vec<CovariateRecord>, Vec<FilterDecision>) {
    let partial: BTreeMap<&str, &CovariateRecord> = inclusion.iter().map(|c| (c.report_id.as_str(), c)).collect();
    let results: Vec<Result<CovariateRecord, FilterDecision>> = reports
        .par_iter()
        .map(|report| {
            let x = match partial.get(report.id.as_str()) {
                Some(rec) => rec.vector(design).map_err(ProviderError::from),
                None => Ok(CovariateVector::unknown(design.covariates.len())),
            };
            x.and_then(|x| impute_unknowns(provider, report, &x, design, &config.policy, config.seed))
                .map(|x| CovariateRecord::new(&report.id, &x, design))
                .map_err(|e| FilterDecision::failure(&report.id, Stage::Imputation, &e))
        })
        .collect();
    let (mut records, mut decisions) = (Vec::new(), Vec::new());
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(d) => decisions.push(d),
        }
    }
    (sorted_by_id(records, |c| &c.report_id), sorted_by_id(decisions, |d| &d.report_id))
}

/// Scores P(T, Y | report, x) for each report at its imputed covariates.
pub fn run_scoring(
    provider: &dyn Provider,
    reports: &[Report],
    covariates: &[CovariateRecord],
    design: &StudyDesign,
    config: &StageConfig,
) -> (Vec<ConditionalSlice>, Vec<FilterDecision>) {
    let by_id: BTreeMap<&str, &CovariateRecord> = covariates.iter().map(|c| (c.report_id.as_str(), c)).collect();
    let results: Vec<Option<Result<ConditionalSlice, FilterDecision>>> = reports
        .par_iter()
        .map(|report| {
            let rec = by_id.get(report.id.as_str())?;
            let slice = rec.vector(design).map_err(ProviderError::from).and_then(|x| {
                providers::conditional_slice(provider, report, &x, design, config.mode, &config.policy)
            });
            Some(slice.map_err(|e| FilterDecision::failure(&report.id, Stage::Scoring, &e)))
        })
        .collect();
    let (mut slices, mut decisions) = (Vec::new(), Vec::new());
    for r in results.into_iter().flatten() {
        match r {
            Ok(s) => slices.push(s),
            Err(d) => decisions.push(d),
        }
    }
    (sorted_by_id(slices, |s| &s.report_id), sorted_by_id(decisions, |d| &d.report_id))
}

/// Full P(X, T, Y | report) for each report.
pub fn run_joints(
    provider: &dyn Provider,
    reports: &[Report],
    design: &StudyDesign,
    config: &StageConfig,
) -> (Vec<(String, JointTable)>, Vec<FilterDecision>) {
    let results: Vec<Result<(String, JointTable), FilterDecision>> = reports
        .par_iter()
        .map(|report| {
            providers::joint_table(provider, report, design, config.mode, &config.policy)
                .map(|j| (report.id.clone(), j))
                .map_err(|e| FilterDecision::failure(&report.id, Stage::Scoring, &e))
        })
        .collect();
    let (mut joints, mut decisions) = (Vec::new(), Vec::new());
    for r in results {
        match r {
            Ok(j) => joints.push(j),
            Err(d) => decisions.push(d),
        }
    }
    (sorted_by_id(joints, |j| &j.0), sorted_by_id(decisions, |d| &d.report_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{RawFields, ScoringResponse, StubProvider};
    use crate::study::{CovariateDim, CovariateSchema};
    use chrono::{TimeZone, Utc};
    use serde_json::json;

    fn design() -> StudyDesign {
        let mut inclusion = BTreeMap::new();
        inclusion.insert("bmi".to_string(), vec![">=25".to_string()]);
        StudyDesign {
            name: "wl".into(),
            treatments: vec!["Semaglutide".into(), "Tirzepatide".into()],
            outcome_question: "Did the author lose at least 5% of their weight?".into(),
            outcome_options: vec!["No".into(), "Yes".into()],
            outcome_rule: OutcomeRule::WeightLoss { threshold_pct: 5.0 },
            covariates: CovariateSchema::new(vec![
                CovariateDim::new("sex", &["Male", "Female"]),
                CovariateDim::new("bmi", &["<25", ">=25"]),
            ]),
            inclusion,
            inclusion_description: None,
            keywords: Keywords {
                treatment: vec!["ozempic".into(), "semaglutide".into()],
                outcome: vec!["lost".into(), "lb".into()],
            },
        }
        .validate()
        .unwrap()
    }

    fn report(id: &str) -> Report {
        Report {
            id: id.into(),
            source: "test".into(),
            title: None,
            created: Utc.with_ymd_and_hms(2022, 3, 1, 0, 0, 0).unwrap(),
            body: "body".into(),
            author_replies: vec![],
        }
    }

    fn raw(body: &str) -> Value {
        json!({"id": "a1", "body": body, "score": 3, "author": "someone", "kind": "post",
               "created": "2022-05-01T00:00:00Z", "source": "r/test"})
    }

    fn prose(tokens: usize) -> String {
        let words = ["I", "started", "ozempic", "in", "spring", "and", "have", "lost", "weight", "steadily"];
        (0..tokens).map(|i| words[i % words.len()]).collect::<Vec<_>>().join(" ")
    }

    fn fields(pairs: &[(&str, Value)]) -> RawFields {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn initial_rejects_removed_and_bots() {
        let kw = design().keywords;
        let d = initial_filter(&raw("[removed]"), &kw);
        assert!(!d.kept);
        assert_eq!(d.reason, "deleted/removed");
        let mut r = raw(&prose(200));
        r["author"] = json!("helper_bot");
        assert_eq!(initial_filter(&r, &kw).reason, "bot author");
    }

    #[test]
    fn initial_keeps_ordinary_prose() {
        let d = initial_filter(&raw(&prose(200)), &design().keywords);
        assert!(d.kept, "{}", d.reason);
    }

    #[test]
    fn initial_rule_coverage() {
        let kw = design().keywords;
        assert_eq!(initial_filter(&json!({"id": "x", "body": 4, "score": 1}), &kw).reason, "body not a string");
        assert_eq!(initial_filter(&json!({"id": "x", "body": prose(50)}), &kw).reason, "missing score");
        let mut c = raw(&prose(9));
        c["kind"] = json!("comment");
        assert_eq!(initial_filter(&c, &kw).reason, "too short");
        c["body"] = json!(prose(10));
        assert!(initial_filter(&c, &kw).kept);
        assert_eq!(initial_filter(&raw(&"x".repeat(3000)), &kw).reason, "no whitespace");
        assert_eq!(initial_filter(&raw("ozempic lost 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9"), &kw).reason, "mostly non-alphabetic");
        assert_eq!(initial_filter(&raw("I lost a lot of weight on a diet"), &kw).reason, "no treatment keyword");
        assert_eq!(initial_filter(&raw("I started Ozempic this week and feel fine"), &kw).reason, "no outcome keyword");
    }

    #[test]
    fn relevance_threshold_is_strict() {
        let (d, r) = (design(), report("r"));
        let policy = ProviderPolicy::default();
        let yes = StubProvider::new().with_score_fn(|_, _| Ok(ScoringResponse { log_scores: vec![0.0, -10.0] }));
        assert!(relevance_filter(&yes, &r, &d, 0.5, &policy).kept);
        let tie = StubProvider::new();
        assert!(!relevance_filter(&tie, &r, &d, 0.5, &policy).kept);
        let broken = StubProvider::new().with_score_fn(|_, _| Err(ProviderError::Timeout));
        assert!(relevance_filter(&broken, &r, &d, 0.5, &policy).is_provider_failure());
    }

    #[test]
    fn weight_arithmetic() {
        let d = design();
        let f = OutcomeFields { start_weight: Some(220.0), end_weight: Some(200.0), ..Default::default() };
        assert!((f.loss_percent().unwrap() - 100.0 * 20.0 / 220.0).abs() < 1e-12);
        assert_eq!(infer_outcome(&f, &d), Some(1));
        let f = OutcomeFields { percentage_weight_change: Some(-3.0), ..Default::default() };
        assert_eq!(infer_outcome(&f, &d), Some(0));
        let f = OutcomeFields { start_weight: Some(220.0), ..Default::default() };
        assert_eq!(infer_outcome(&f, &d), None);
        let f = OutcomeFields { start_weight: Some(0.0), end_weight: Some(10.0), ..Default::default() };
        assert_eq!(infer_outcome(&f, &d), None);
        let f = OutcomeFields { start_weight: Some(200.0), weight_change: Some(-12.0), ..Default::default() };
        assert!((f.loss_percent().unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn kilograms_convert_to_pounds() {
        let mut raw = BTreeMap::new();
        raw.insert(START_WEIGHT.to_string(), FieldValue::Number(100.0));
        raw.insert(WEIGHT_UNIT.to_string(), FieldValue::Label("kg".into()));
        let f = OutcomeFields::from_extraction(&raw);
        assert!((f.start_weight.unwrap() - 220.462).abs() < 1e-9);
        assert_eq!(f.weight_unit, Some(WeightUnit::Lb));
    }

    #[test]
    fn treatment_outcome_decisions() {
        let (d, r) = (design(), report("r"));
        let policy = ProviderPolicy::default();
        let unknown = json!(UNKNOWN);
        let base = |t: &str, start: Value, end: Value| {
            fields(&[
                (TREATMENT_FIELD, json!(t)),
                (START_WEIGHT, start),
                (END_WEIGHT, end),
                (WEIGHT_CHANGE, unknown.clone()),
                (PERCENT_CHANGE, unknown.clone()),
                (WEIGHT_UNIT, json!("lb")),
            ])
        };
        let stub = StubProvider::new().push_extract(Ok(base("Semaglutide", json!(220), json!(200))));
        let out = treatment_outcome_filter(&stub, &r, &d, &policy, 0);
        assert!(out.decision.kept);
        assert_eq!(out.observed, Some((0, 1)));
        let stub = StubProvider::new().push_extract(Ok(base("Other", json!(220), json!(200))));
        assert_eq!(treatment_outcome_filter(&stub, &r, &d, &policy, 0).decision.reason, "treatment not in study");
        let stub = StubProvider::new().push_extract(Ok(base("Tirzepatide", unknown.clone(), unknown.clone())));
        assert_eq!(treatment_outcome_filter(&stub, &r, &d, &policy, 0).decision.reason, "outcome not inferable");
    }

    #[test]
    fn inclusion_semantics() {
        let (d, r) = (design(), report("r"));
        let policy = ProviderPolicy::default();
        let reply = |sex: &str, bmi: &str| Ok(fields(&[("sex", json!(sex)), ("bmi", json!(bmi))]));
        let stub = StubProvider::new().push_extract(reply("Male", "<25"));
        assert!(!inclusion_filter(&stub, &r, &d, &policy, 0).0.kept);
        let stub = StubProvider::new().push_extract(reply(UNKNOWN, UNKNOWN));
        let (dec, x) = inclusion_filter(&stub, &r, &d, &policy, 0);
        assert!(dec.kept);
        assert_eq!(x.unwrap().n_known(), 0);
        let stub = StubProvider::new().push_extract(reply("Female", ">=25"));
        assert!(inclusion_filter(&stub, &r, &d, &policy, 0).0.kept);
    }

    #[test]
    fn imputation_preserves_known_values() {
        let (d, r) = (design(), report("r"));
        let policy = ProviderPolicy::default();
        let full = CovariateVector::known(vec![1, 1]);
        let stub = StubProvider::new();
        assert_eq!(impute_unknowns(&stub, &r, &full, &d, &policy, 0).unwrap(), full);
        assert_eq!(stub.extract_calls(), 0);
        let mut partial = CovariateVector::unknown(2);
        partial.set(0, 1);
        let stub = StubProvider::new().push_extract(Ok(fields(&[("sex", json!("Male")), ("bmi", json!(">=25"))])));
        let x = impute_unknowns(&stub, &r, &partial, &d, &policy, 0).unwrap();
        assert_eq!(x, CovariateVector::known(vec![1, 1]));
    }

    #[test]
    fn imputation_out_of_box_is_excluded() {
        let (d, r) = (design(), report("r"));
        let stub =
            StubProvider::new().with_extract_fn(|_, _| Ok(fields(&[("sex", json!("Male")), ("bmi", json!("<25"))])));
        let err = impute_unknowns(&stub, &r, &CovariateVector::unknown(2), &d, &ProviderPolicy::default(), 0);
        assert!(err.unwrap_err().is_exhaustion());
    }

    #[test]
    fn bins_median_split() {
        let rule = fit_bins("v", &[1., 2., 3., 4., 5., 6., 7., 8.], 2).unwrap();
        assert_eq!(rule.kind, BinKind::Cuts { cuts: vec![4.0] });
        let counts = (1..=8).fold([0; 2], |mut c, v| {
            c[rule.bin_of(v as f64).unwrap()] += 1;
            c
        });
        assert_eq!(counts, [4, 4]);
    }

    #[test]
    fn bins_degenerate_and_ties() {
        assert_eq!(fit_bins("v", &[3.0; 5], 2).unwrap().n_bins(), 1);
        let values = [1., 1., 1., 1., 2., 3.];
        let rule = fit_bins("v", &values, 2).unwrap();
        assert_eq!(rule.kind, BinKind::Cuts { cuts: vec![1.0] });
        let lower = values.iter().filter(|&&v| rule.bin_of(v) == Some(0)).count();
        assert_eq!(lower, 4);
        assert!(fit_bins("v", &[], 2).is_err());
        assert!(BinRule::cuts("v", vec![2.0, 1.0]).is_err());
    }

    #[test]
    fn bin_labels() {
        let rule = BinRule::cuts("age", vec![30.0, 50.0]).unwrap();
        assert_eq!(rule.labels(), vec!["<=30", "(30,50]", ">50"]);
        assert_eq!(rule.label_of(&FieldValue::Number(50.0)).unwrap(), "(30,50]");
    }

    #[test]
    fn all_failed_stage_detection() {
        let ds = vec![
            FilterDecision::reject("a", Stage::Relevance, PROVIDER_FAILURE),
            FilterDecision::reject("b", Stage::Relevance, PROVIDER_FAILURE),
            FilterDecision::keep("c", Stage::Initial),
        ];
        assert_eq!(stages_all_failed(&ds), vec![Stage::Relevance]);
    }
}
