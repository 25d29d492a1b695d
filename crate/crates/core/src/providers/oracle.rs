//! Exact and perturbed providers backed by a synthetic study's ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde_json::Value;

use super::{
    ExtractQuery, ExtractTask, ExtractionRequest, Provider, ProviderError, RawFields, ScoreQuery, ScoreTarget,
    ScoringRequest, ScoringResponse,
};
use crate::study::{CovariateVector, JointTable, Report, StudyDesign, UNKNOWN};
use crate::synth::{oracle_joint, Mentions, SyntheticStudy};

/// Extraction field carrying the treatment label.
pub const TREATMENT_FIELD: &str = "treatment";
/// Extraction field carrying the outcome label.
pub const OUTCOME_FIELD: &str = "outcome";

/// FNV-1a, used to derive per-report seeds that do not depend on run order.
pub(crate) fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn to_log_scores(p: &[f64]) -> ScoringResponse {
    ScoringResponse { log_scores: p.iter().map(|&v| v.max(f64::MIN_POSITIVE).ln()).collect() }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    } else {
        let n = v.len() as f64;
        v.iter_mut().for_each(|x| *x = 1.0 / n);
    }
    v
}

fn draw(rng: &mut impl Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc && w > 0.0 {
            return Some(i);
        }
    }
    weights.iter().rposition(|&w| w > 0.0)
}

/// Answers every question exactly from the DGP posterior given what the
/// report mentions. Reports must be rendered with the study's templates.
#[derive(Debug, Clone)]
pub struct OracleProvider {
    study: SyntheticStudy,
}

impl OracleProvider {
    pub fn new(study: SyntheticStudy) -> Self {
        OracleProvider { study }
    }

    pub fn study(&self) -> &SyntheticStudy {
        &self.study
    }

    pub fn mentions(&self, report: &Report) -> Result<Mentions, ProviderError> {
        self.study
            .templates
            .parse(&report.body)
            .map_err(|e| ProviderError::Unsupported(format!("{}: {e}", report.id)))
    }

    pub fn posterior(&self, report: &Report) -> Result<JointTable, ProviderError> {
        oracle_joint(&self.mentions(report)?, &self.study.dgp).map_err(|e| ProviderError::Unsupported(e.to_string()))
    }

    /// P(T, Y | x, mentioned T and Y), t-major. Covariate mentions are
    /// superseded by the conditioning value `x`.
    fn treatment_outcome(&self, mentions: &Mentions, x: &CovariateVector) -> Result<[f64; 4], ProviderError> {
        let s = self.study.dgp.schema.stratum_index(x)?;
        let mut cells = [0.0; 4];
        for t in 0..2u8 {
            for y in 0..2u8 {
                let consistent = mentions.treatment.is_none_or(|m| m == t) && mentions.outcome.is_none_or(|m| m == y);
                if consistent {
                    cells[(t * 2 + y) as usize] = self.study.dgp.cell(s, t, y);
                }
            }
        }
        let v = normalized(cells.to_vec());
        Ok([v[0], v[1], v[2], v[3]])
    }

    fn distribution(&self, report: &Report, target: &ScoreTarget) -> Result<Vec<f64>, ProviderError> {
        let mentions = self.mentions(report)?;
        match target {
            ScoreTarget::Relevance => {
                let relevant = !mentions.is_empty();
                Ok(if relevant { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
            }
            ScoreTarget::Covariate { dim, given } => {
                let joint = oracle_joint(&mentions, &self.study.dgp)
                    .map_err(|e| ProviderError::Unsupported(e.to_string()))?;
                let schema = &self.study.dgp.schema;
                let mut p = vec![0.0; schema.dims[*dim].categories.len()];
                for s in 0..joint.n_strata() {
                    let values = self.study.dgp.stratum_values(s);
                    let consistent = (0..schema.len()).all(|d| given.get(d).is_none_or(|g| g == values[d]));
                    if consistent {
                        p[values[*dim]] += joint.stratum_mass(s);
                    }
                }
                Ok(normalized(p))
            }
            ScoreTarget::Treatment { x } => {
                let c = self.treatment_outcome(&mentions, x)?;
                Ok(vec![c[0] + c[1], c[2] + c[3]])
            }
            ScoreTarget::Outcome { x, t } => {
                let without_t = Mentions { treatment: None, ..mentions };
                let c = self.treatment_outcome(&without_t, x)?;
                let t = *t as usize;
                Ok(normalized(vec![c[t * 2], c[t * 2 + 1]]))
            }
            ScoreTarget::TreatmentOutcome { x } => Ok(self.treatment_outcome(&mentions, x)?.to_vec()),
        }
    }

    fn impute_from(
        &self,
        marginal: &[f64],
        design: &StudyDesign,
        known: &CovariateVector,
        rng: &mut impl Rng,
    ) -> Result<CovariateVector, ProviderError> {
        let schema = &design.covariates;
        let inclusion = design.inclusion_box();
        let admissible = |s: usize| {
            let x = schema.decode(s);
            inclusion.contains_stratum(schema, s) && (0..schema.len()).all(|d| known.get(d).is_none_or(|k| Some(k) == x.get(d)))
        };
        let weights: Vec<f64> = (0..marginal.len()).map(|s| if admissible(s) { marginal[s] } else { 0.0 }).collect();
        // A report whose posterior lies outside the box still gets an in-box
        // profile, drawn from the population prior.
        let s = draw(rng, &weights)
            .or_else(|| {
                let prior: Vec<f64> =
                    (0..marginal.len()).map(|s| if admissible(s) { self.study.dgp.px[s] } else { 0.0 }).collect();
                draw(rng, &prior)
            })
            .ok_or_else(|| ProviderError::Unsupported("no admissible covariate profile".into()))?;
        Ok(schema.decode(s))
    }

    fn extract_with(
        &self,
        query: &ExtractQuery<'_>,
        request: &ExtractionRequest,
        marginal: impl FnOnce() -> Result<Vec<f64>, ProviderError>,
    ) -> Result<RawFields, ProviderError> {
        let report = query.report;
        let design = query.design;
        let mentions = self.mentions(report)?;
        let mut fields = RawFields::new();
        let label = |v: Option<&String>| Value::from(v.map(String::as_str).unwrap_or(UNKNOWN));
        match &query.task {
            ExtractTask::TreatmentOutcome => {
                for name in request.schema.keys() {
                    let value = match name.as_str() {
                        TREATMENT_FIELD => label(mentions.treatment.map(|t| &design.treatments[t as usize])),
                        OUTCOME_FIELD => label(mentions.outcome.map(|y| &design.outcome_options[y as usize])),
                        _ => Value::from(UNKNOWN),
                    };
                    fields.insert(name.clone(), value);
                }
            }
            ExtractTask::Covariates => {
                for (d, dim) in design.covariates.dims.iter().enumerate() {
                    let v = mentions.covariates.get(d).copied().flatten();
                    fields.insert(dim.name.clone(), label(v.map(|v| &dim.categories[v])));
                }
            }
            ExtractTask::Impute { known } => {
                let seed = stable_hash(&[&query.seed.to_le_bytes(), report.id.as_bytes(), b"impute"]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = self.impute_from(&marginal()?, design, known, &mut rng)?;
                for (d, label) in design.covariates.labels(&x).into_iter().enumerate() {
                    fields.insert(design.covariates.dims[d].name.clone(), Value::from(label));
                }
            }
        }
        Ok(fields)
    }
}

impl Provider for OracleProvider {
    fn name(&self) -> &str {
        "oracle"
    }

    fn score(&self, query: &ScoreQuery<'_>, request: &ScoringRequest) -> Result<ScoringResponse, ProviderError> {
        let p = self.distribution(query.report, &query.target)?;
        if p.len() != request.options.len() {
            return Err(ProviderError::Invalid("option count does not match the question".into()));
        }
        Ok(to_log_scores(&p))
    }

    fn extract(&self, query: &ExtractQuery<'_>, request: &ExtractionRequest) -> Result<RawFields, ProviderError> {
        self.extract_with(query, request, || Ok(self.posterior(query.report)?.x_marginal()))
    }

    fn joint(&self, report: &Report, _design: &StudyDesign) -> Option<Result<JointTable, ProviderError>> {
        Some(self.posterior(report))
    }
}

/// Oracle whose answers are mixed with Dirichlet(1) noise:
/// `(1 - strength) * p + strength * d`, with `d` fixed per report and question.
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    oracle: OracleProvider,
    strength: f64,
    seed: u64,
}

impl NoisyOracle {
    pub fn new(oracle: OracleProvider, strength: f64, seed: u64) -> Result<Self, ProviderError> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(ProviderError::Invalid(format!("noise strength {strength} outside [0, 1]")));
        }
        Ok(NoisyOracle { oracle, strength, seed })
    }

    fn perturb(&self, p: &[f64], key: &[&[u8]]) -> Vec<f64> {
        if self.strength == 0.0 {
            return p.to_vec();
        }
        let seed_bytes = self.seed.to_le_bytes();
        let mut parts: Vec<&[u8]> = vec![&seed_bytes];
        parts.extend_from_slice(key);
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&parts));
        let noise = normalized((0..p.len()).map(|_| rng.sample::<f64, _>(Exp1)).collect());
        p.iter().zip(noise).map(|(&a, b)| (1.0 - self.strength) * a + self.strength * b).collect()
    }

    fn noisy_joint(&self, report: &Report) -> Result<JointTable, ProviderError> {
        let joint = self.oracle.posterior(report)?;
        let cells = self.perturb(joint.cells(), &[report.id.as_bytes(), b"joint"]);
        JointTable::from_masses(cells, joint.n_strata()).map_err(|e| ProviderError::Malformed(e.to_string()))
    }
}

impl Provider for NoisyOracle {
    fn name(&self) -> &str {
        "noisy-oracle"
    }

    fn score(&self, query: &ScoreQuery<'_>, request: &ScoringRequest) -> Result<ScoringResponse, ProviderError> {
        let p = self.oracle.distribution(query.report, &query.target)?;
        if p.len() != request.options.len() {
            return Err(ProviderError::Invalid("option count does not match the question".into()));
        }
        let key = format!("{:?}", query.target);
        Ok(to_log_scores(&self.perturb(&p, &[query.report.id.as_bytes(), key.as_bytes()])))
    }

    fn extract(&self, query: &ExtractQuery<'_>, request: &ExtractionRequest) -> Result<RawFields, ProviderError> {
        self.oracle.extract_with(query, request, || Ok(self.noisy_joint(query.report)?.x_marginal()))
    }

    fn joint(&self, report: &Report, _design: &StudyDesign) -> Option<Result<JointTable, ProviderError>> {
        Some(self.noisy_joint(report))
    }
}

/// Wraps a provider, replacing its imputation with uniform draws over the
/// admissible in-box profiles. Used to ablate the imputation step.
pub struct UniformImputer<P> {
    inner: P,
}

impl<P: Provider> UniformImputer<P> {
    pub fn new(inner: P) -> Self {
        UniformImputer { inner }
    }
}

impl<P: Provider> Provider for UniformImputer<P> {
    fn name(&self) -> &str {
        "uniform-imputer"
    }

    fn score(&self, query: &ScoreQuery<'_>, request: &ScoringRequest) -> Result<ScoringResponse, ProviderError> {
        self.inner.score(query, request)
    }

    fn extract(&self, query: &ExtractQuery<'_>, request: &ExtractionRequest) -> Result<RawFields, ProviderError> {
        let ExtractTask::Impute { known } = &query.task else {
            return self.inner.extract(query, request);
        };
        let design = query.design;
        let schema = &design.covariates;
        let inclusion = design.inclusion_box();
        let seed = stable_hash(&[&query.seed.to_le_bytes(), query.report.id.as_bytes(), b"uniform"]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fields = RawFields::new();
        for (d, dim) in schema.dims.iter().enumerate() {
            let value = match known.get(d) {
                Some(v) => v,
                None => {
                    let allowed = inclusion.allowed_values(schema, d);
                    allowed[rng.random_range(0..allowed.len())]
                }
            };
            fields.insert(dim.name.clone(), Value::from(dim.categories[value].clone()));
        }
        Ok(fields)
    }

    fn joint(&self, _report: &Report, _design: &StudyDesign) -> Option<Result<JointTable, ProviderError>> {
        None
    }
}
