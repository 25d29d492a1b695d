//! Scripted provider for tests.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::Value;

use super::{
    ExtractQuery, ExtractTask, ExtractionRequest, Provider, ProviderError, RawFields, ScoreQuery, ScoringRequest,
    ScoringResponse, NUMBER,
};
use crate::study::UNKNOWN;

type ScoreFn = dyn Fn(&ScoreQuery<'_>, &ScoringRequest) -> Result<ScoringResponse, ProviderError> + Send + Sync;
type ExtractFn = dyn Fn(&ExtractQuery<'_>, &ExtractionRequest) -> Result<RawFields, ProviderError> + Send + Sync;

/// Replies come from a queued script first, then a closure, then the default:
/// equal scores for every option, and `Unknown` (or the first allowed value
/// when imputing) for every field.
#[derive(Default)]
pub struct StubProvider {
    score_fn: Option<Box<ScoreFn>>,
    extract_fn: Option<Box<ExtractFn>>,
    score_script: Mutex<VecDeque<Result<ScoringResponse, ProviderError>>>,
    extract_script: Mutex<VecDeque<Result<RawFields, ProviderError>>>,
    score_calls: AtomicUsize,
    extract_calls: AtomicUsize,
}

impl StubProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_score_fn(
        mut self,
        f: impl Fn(&ScoreQuery<'_>, &ScoringRequest) -> Result<ScoringResponse, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        self.score_fn = Some(Box::new(f));
        self
    }

    pub fn with_extract_fn(
        mut self,
        f: impl Fn(&ExtractQuery<'_>, &ExtractionRequest) -> Result<RawFields, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        self.extract_fn = Some(Box::new(f));
        self
    }

    pub fn push_score(self, reply: Result<ScoringResponse, ProviderError>) -> Self {
        self.score_script.lock().expect("stub lock").push_back(reply);
        self
    }

    pub fn push_extract(self, reply: Result<RawFields, ProviderError>) -> Self {
        self.extract_script.lock().expect("stub lock").push_back(reply);
        self
    }

    pub fn score_calls(&self) -> usize {
        self.score_calls.load(Ordering::SeqCst)
    }

    pub fn extract_calls(&self) -> usize {
        self.extract_calls.load(Ordering::SeqCst)
    }
}

/// Default extraction reply for a schema.
pub fn default_fields(request: &ExtractionRequest, imputing: bool) -> RawFields {
    request
        .schema
        .iter()
        .map(|(name, allowed)| {
            let unknown_ok = allowed.iter().any(|a| a == UNKNOWN);
            let value = if unknown_ok && !imputing {
                UNKNOWN.to_string()
            } else {
                allowed
                    .iter()
                    .find(|a| *a != UNKNOWN && *a != NUMBER)
                    .cloned()
                    .unwrap_or_else(|| UNKNOWN.to_string())
            };
            (name.clone(), Value::from(value))
        })
        .collect()
}

impl Provider for StubProvider {
    fn name(&self) -> &str {
        "stub"
    }

    fn score(&self, query: &ScoreQuery<'_>, request: &ScoringRequest) -> Result<ScoringResponse, ProviderError> {
        self.score_calls.fetch_add(1, Ordering::SeqCst);
        if let Some(reply) = self.score_script.lock().expect("stub lock").pop_front() {
            return reply;
        }
        match &self.score_fn {
            Some(f) => f(query, request),
            None => Ok(ScoringResponse { log_scores: vec![0.0; request.options.len()] }),
        }
    }

    fn extract(&self, query: &ExtractQuery<'_>, request: &ExtractionRequest) -> Result<RawFields, ProviderError> {
        self.extract_calls.fetch_add(1, Ordering::SeqCst);
        if let Some(reply) = self.extract_script.lock().expect("stub lock").pop_front() {
            return reply;
        }
        match &self.extract_fn {
            Some(f) => f(query, request),
            None => Ok(default_fields(request, matches!(query.task, ExtractTask::Impute { .. }))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{conditional_slice, extract_record, FieldValue, ProviderPolicy, ScoringMode};
    use crate::study::{CovariateDim, CovariateSchema, CovariateVector, Keywords, OutcomeRule, Report, StudyDesign};
    use chrono::{TimeZone, Utc};
    use std::collections::BTreeMap;

    fn design() -> StudyDesign {
        StudyDesign {
            name: "s".into(),
            treatments: vec!["A".into(), "B".into()],
            outcome_question: "Better?".into(),
            outcome_options: vec!["No".into(), "Yes".into()],
            outcome_rule: OutcomeRule::Binary,
            covariates: CovariateSchema::new(vec![CovariateDim::new("sex", &["M", "F"])]),
            inclusion: BTreeMap::new(),
            inclusion_description: None,
            keywords: Keywords::default(),
        }
    }

    fn report() -> Report {
        Report {
            id: "r1".into(),
            source: "test".into(),
            title: None,
            created: Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).unwrap(),
            body: "text".into(),
            author_replies: vec![],
        }
    }

    fn fields(pairs: &[(&str, &str)]) -> RawFields {
        pairs.iter().map(|(k, v)| (k.to_string(), Value::from(*v))).collect()
    }

    fn request() -> ExtractionRequest {
        let mut schema = BTreeMap::new();
        schema.insert("sex".to_string(), vec!["M".to_string(), "F".to_string(), UNKNOWN.to_string()]);
        schema.insert("treatment".to_string(), vec!["A".to_string(), "B".to_string()]);
        ExtractionRequest { prompt: "p".into(), schema }
    }

    #[test]
    fn equal_scores_give_uniform_slice() {
        let stub = StubProvider::new();
        let (d, r) = (design(), report());
        let slice = conditional_slice(&stub, &r, &CovariateVector::known(vec![0]), &d, ScoringMode::Chained, &ProviderPolicy::default())
            .unwrap();
        for t in 0..2 {
            for y in 0..2 {
                assert_eq!(slice.p(t, y), 0.25);
            }
        }
    }

    #[test]
    fn valid_record_parses() {
        let stub = StubProvider::new().push_extract(Ok(fields(&[("sex", "F"), ("treatment", "B")])));
        let (d, r) = (design(), report());
        let q = ExtractQuery { report: &r, design: &d, task: ExtractTask::Covariates, seed: 0, attempt: 0 };
        let out = extract_record(&stub, &q, &request(), &ProviderPolicy::default()).unwrap();
        assert_eq!(out.fields["sex"], FieldValue::Label("F".into()));
        assert_eq!(out.retries, 0);
    }

    #[test]
    fn invalid_twice_then_valid_counts_two_retries() {
        let bad = fields(&[("sex", "X"), ("treatment", "B")]);
        let stub = StubProvider::new()
            .push_extract(Ok(bad.clone()))
            .push_extract(Ok(bad))
            .push_extract(Ok(fields(&[("sex", "M"), ("treatment", "A")])));
        let (d, r) = (design(), report());
        let q = ExtractQuery { report: &r, design: &d, task: ExtractTask::Covariates, seed: 0, attempt: 0 };
        let out = extract_record(&stub, &q, &request(), &ProviderPolicy::default()).unwrap();
        assert_eq!(out.retries, 2);
        assert_eq!(stub.extract_calls(), 3);
        assert_eq!(out.fields["sex"], FieldValue::Label("M".into()));
    }

    #[test]
    fn persistent_bad_required_field_excludes() {
        let stub = StubProvider::new().with_extract_fn(|_, _| Ok(fields(&[("sex", "M"), ("treatment", "Z")])));
        let (d, r) = (design(), report());
        let q = ExtractQuery { report: &r, design: &d, task: ExtractTask::Covariates, seed: 0, attempt: 0 };
        let err = extract_record(&stub, &q, &request(), &ProviderPolicy::default()).unwrap_err();
        assert!(err.is_exhaustion());
        assert_eq!(stub.extract_calls(), 4);
    }

    #[test]
    fn persistent_bad_optional_field_defaults_to_unknown() {
        let stub = StubProvider::new().with_extract_fn(|_, _| Ok(fields(&[("sex", "?"), ("treatment", "A")])));
        let (d, r) = (design(), report());
        let q = ExtractQuery { report: &r, design: &d, task: ExtractTask::Covariates, seed: 0, attempt: 0 };
        let out = extract_record(&stub, &q, &request(), &ProviderPolicy::default()).unwrap();
        assert!(out.fields["sex"].is_unknown());
        assert_eq!(out.defaulted, vec!["sex".to_string()]);
    }

    #[test]
    fn non_retryable_error_is_immediate() {
        let stub = StubProvider::new().push_score(Err(ProviderError::Unsupported("no".into())));
        let (d, r) = (design(), report());
        let err = conditional_slice(&stub, &r, &CovariateVector::known(vec![0]), &d, ScoringMode::Chained, &ProviderPolicy::default())
            .unwrap_err();
        assert!(matches!(err, ProviderError::Unsupported(_)));
        assert_eq!(stub.score_calls(), 1);
    }

    #[test]
    fn score_retries_then_exhausts() {
        let stub = StubProvider::new().with_score_fn(|_, _| Err(ProviderError::Timeout));
        let (d, r) = (design(), report());
        let policy = ProviderPolicy { max_retries: 2, ..Default::default() };
        let err = conditional_slice(&stub, &r, &CovariateVector::known(vec![0]), &d, ScoringMode::Chained, &policy).unwrap_err();
        assert!(err.is_exhaustion());
        assert_eq!(stub.score_calls(), 3);
    }
}
