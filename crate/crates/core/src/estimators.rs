//! ATE estimators over tabular units, per-report conditional slices and
//! per-report joint tables.
//!
//! All estimators work on the discrete stratum space of a [`CovariateSchema`].
//! Propensities are stratum-empirical and clipped to `[eps, 1 - eps]`.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::study::{
    ConditionalSlice, CovariateSchema, CovariateVector, InclusionBox, JointTable, StudyError,
    TabularUnit,
};

/// Default positivity clip applied to every fitted propensity.
pub const DEFAULT_EPSILON: f64 = 0.01;

/// Default number of bootstrap resamples for standard errors.
pub const DEFAULT_BOOTSTRAP: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimateError {
    #[error("no data")]
    Empty,
    #[error("empty {0} arm")]
    EmptyArm(&'static str),
    #[error("no records with T={0}; outcome imputation impossible")]
    MissingArm(u8),
    #[error("positivity breach: propensity {value} in stratum {stratum}")]
    PositivityBreach { stratum: usize, value: f64 },
    #[error("epsilon must lie in (0, 0.5), got {0}")]
    InvalidEpsilon(f64),
    #[error("inclusion contract violated by report `{0}`")]
    InclusionViolated(String),
    #[error("sampled treatment has zero mass in report `{0}`")]
    ZeroMassTreatment(String),
    #[error("missing {0}")]
    MissingInput(&'static str),
    #[error(transparent)]
    Study(#[from] StudyError),
}

/// A point estimate of the ATE on the probability scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AteEstimate {
    pub value: f64,
    pub estimator: String,
    pub n_used: usize,
    pub stderr: Option<f64>,
}

impl AteEstimate {
    fn new(estimator: &str, value: f64, n_used: usize) -> Self {
        AteEstimate { value, estimator: estimator.to_string(), n_used, stderr: None }
    }

    pub fn with_stderr(mut self, stderr: Option<f64>) -> Self {
        self.stderr = stderr;
        self
    }

    /// Value in percentage points.
    pub fn percent(&self) -> f64 {
        self.value * 100.0
    }
}

/// Per-stratum propensity scores with a record of how they were smoothed.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityTable {
    e: Vec<f64>,
    pub epsilon: f64,
    /// Strata with no mass that took the marginal treated share.
    pub fallback_strata: Vec<usize>,
    /// Strata whose raw estimate was moved onto the clip boundary.
    pub clipped_strata: Vec<usize>,
}

impl PropensityTable {
    /// Builds ê(x) = treated(x) / total(x), falling back to the marginal share
    /// for empty strata and clipping to `[epsilon, 1 - epsilon]`.
    pub fn from_masses(treated: &[f64], total: &[f64], epsilon: f64) -> Result<Self, EstimateError> {
        check_epsilon(epsilon)?;
        let all: f64 = total.iter().sum();
        if all <= 0.0 {
            return Err(EstimateError::Empty);
        }
        let marginal = treated.iter().sum::<f64>() / all;
        let mut fallback_strata = Vec::new();
        let mut clipped_strata = Vec::new();
        let e = treated
            .iter()
            .zip(total)
            .enumerate()
            .map(|(s, (&tr, &tot))| {
                let raw = if tot > 0.0 {
                    tr / tot
                } else {
                    fallback_strata.push(s);
                    marginal
                };
                let clipped = raw.clamp(epsilon, 1.0 - epsilon);
                if clipped != raw {
                    clipped_strata.push(s);
                }
                clipped
            })
            .collect();
        Ok(PropensityTable { e, epsilon, fallback_strata, clipped_strata })
    }

    /// Table of known propensities, e.g. the true ones of a simulation.
    pub fn from_values(e: Vec<f64>) -> Self {
        PropensityTable { e, epsilon: 0.0, fallback_strata: Vec::new(), clipped_strata: Vec::new() }
    }

    pub fn get(&self, stratum: usize) -> f64 {
        self.e[stratum]
    }

    pub fn values(&self) -> &[f64] {
        &self.e
    }
}

fn check_epsilon(epsilon: f64) -> Result<(), EstimateError> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(EstimateError::InvalidEpsilon(epsilon));
    }
    Ok(())
}

fn strata_of(units: &[TabularUnit], schema: &CovariateSchema) -> Result<Vec<usize>, EstimateError> {
    units.iter().map(|u| schema.stratum_index(&u.x).map_err(Into::into)).collect()
}

fn ipw_term(t: f64, y: f64, e: f64) -> f64 {
    t * y / e - (1.0 - t) * y / (1.0 - e)
}

/// Mean outcome among treated minus mean outcome among controls.
pub fn difference_in_means(treated: &[u8], control: &[u8]) -> Result<AteEstimate, EstimateError> {
    if treated.is_empty() {
        return Err(EstimateError::EmptyArm("treated"));
    }
    if control.is_empty() {
        return Err(EstimateError::EmptyArm("control"));
    }
    let mean = |v: &[u8]| v.iter().map(|&y| y as f64).sum::<f64>() / v.len() as f64;
    Ok(AteEstimate::new(
        "uncorrected",
        mean(treated) - mean(control),
        treated.len() + control.len(),
    ))
}

/// Difference in means on tabular units, ignoring covariates.
pub fn uncorrected(units: &[TabularUnit]) -> Result<AteEstimate, EstimateError> {
    let treated: Vec<u8> = units.iter().filter(|u| u.t == 1).map(|u| u.y).collect();
    let control: Vec<u8> = units.iter().filter(|u| u.t == 0).map(|u| u.y).collect();
    difference_in_means(&treated, &control)
}

/// Weighted share of treated units per stratum.
pub fn fit_propensity_empirical(
    units: &[TabularUnit],
    schema: &CovariateSchema,
    epsilon: f64,
) -> Result<PropensityTable, EstimateError> {
    if units.is_empty() {
        return Err(EstimateError::Empty);
    }
    let n = schema.n_strata();
    let mut treated = vec![0.0; n];
    let mut total = vec![0.0; n];
    for (u, s) in units.iter().zip(strata_of(units, schema)?) {
        treated[s] += u.weight * u.t as f64;
        total[s] += u.weight;
    }
    PropensityTable::from_masses(&treated, &total, epsilon)
}

/// Mean of P(T=1 | report, x) per stratum.
pub fn fit_propensity_conditional(
    slices: &[ConditionalSlice],
    schema: &CovariateSchema,
    epsilon: f64,
) -> Result<PropensityTable, EstimateError> {
    if slices.is_empty() {
        return Err(EstimateError::Empty);
    }
    let n = schema.n_strata();
    let mut treated = vec![0.0; n];
    let mut total = vec![0.0; n];
    for slice in slices {
        let s = schema.stratum_index(&slice.x)?;
        treated[s] += slice.treated_mass();
        total[s] += 1.0;
    }
    PropensityTable::from_masses(&treated, &total, epsilon)
}

/// Inverse propensity weighting over tabular units.
pub fn ipw_estimate(
    units: &[TabularUnit],
    schema: &CovariateSchema,
    propensity: &PropensityTable,
) -> Result<AteEstimate, EstimateError> {
    if units.is_empty() {
        return Err(EstimateError::Empty);
    }
    let mut acc = 0.0;
    let mut weight = 0.0;
    for (u, s) in units.iter().zip(strata_of(units, schema)?) {
        let e = propensity.get(s);
        if e <= 0.0 || e >= 1.0 {
            return Err(EstimateError::PositivityBreach { stratum: s, value: e });
        }
        acc += u.weight * ipw_term(u.t as f64, u.y as f64, e);
        weight += u.weight;
    }
    Ok(AteEstimate::new("ipw", acc / weight, units.len()))
}

/// Cell means with the arm-marginal fallback for empty (x, t) cells.
struct OutcomeModel {
    mean: Vec<[Option<f64>; 2]>,
    arm_mean: [f64; 2],
}

impl OutcomeModel {
    /// `records` yields (stratum, t, outcome evidence, weight).
    fn fit(n_strata: usize, records: impl Iterator<Item = (usize, u8, f64, f64)>) -> Result<Self, EstimateError> {
        let mut sum = vec![[0.0f64; 2]; n_strata];
        let mut count = vec![[0.0f64; 2]; n_strata];
        let mut arm_sum = [0.0; 2];
        let mut arm_count = [0.0; 2];
        for (s, t, y, w) in records {
            let t = t as usize;
            sum[s][t] += w * y;
            count[s][t] += w;
            arm_sum[t] += w * y;
            arm_count[t] += w;
        }
        if let Some(t) = arm_count.iter().position(|&c| c <= 0.0) {
            return Err(EstimateError::MissingArm(t as u8));
        }
        let mean = sum
            .iter()
            .zip(&count)
            .map(|(s, c)| [(c[0] > 0.0).then(|| s[0] / c[0]), (c[1] > 0.0).then(|| s[1] / c[1])])
            .collect();
        Ok(OutcomeModel { mean, arm_mean: [arm_sum[0] / arm_count[0], arm_sum[1] / arm_count[1]] })
    }

    fn predict(&self, stratum: usize, t: usize) -> f64 {
        match self.mean[stratum][t] {
            Some(m) => m,
            None => {
                debug!("empty cell (stratum {stratum}, t={t}); using arm mean");
                self.arm_mean[t]
            }
        }
    }

    fn average_effect(&self, strata: impl Iterator<Item = (usize, f64)>) -> f64 {
        let mut acc = 0.0;
        let mut weight = 0.0;
        for (s, w) in strata {
            acc += w * (self.predict(s, 1) - self.predict(s, 0));
            weight += w;
        }
        acc / weight
    }
}

/// Outcome imputation: average over units of the within-stratum contrast.
pub fn oi_estimate(units: &[TabularUnit], schema: &CovariateSchema) -> Result<AteEstimate, EstimateError> {
    if units.is_empty() {
        return Err(EstimateError::Empty);
    }
    let strata = strata_of(units, schema)?;
    let model = OutcomeModel::fit(
        schema.n_strata(),
        units.iter().zip(&strata).map(|(u, &s)| (s, u.t, u.y as f64, u.weight)),
    )?;
    let value = model.average_effect(units.iter().zip(&strata).map(|(u, &s)| (s, u.weight)));
    Ok(AteEstimate::new("oi", value, units.len()))
}

/// Both algebraic routes of the full-enumeration estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalFull {
    pub estimate: AteEstimate,
    /// Average over reports of the expected IPW term under each report's joint.
    pub ipw_form: f64,
    /// Stratum-prevalence-weighted contrast of the pooled conditional outcome means.
    pub oi_form: f64,
    pub propensity: PropensityTable,
}

impl NaturalFull {
    /// The two forms coincide whenever no propensity was clipped.
    pub fn forms_must_agree(&self) -> bool {
        self.propensity.clipped_strata.is_empty()
    }
}

/// Full enumeration over (x, t, y) of each report's joint table.
pub fn natural_full(
    joints: &[JointTable],
    schema: &CovariateSchema,
    epsilon: f64,
) -> Result<NaturalFull, EstimateError> {
    if joints.is_empty() {
        return Err(EstimateError::Empty);
    }
    let n_strata = schema.n_strata();
    for j in joints {
        if j.n_strata() != n_strata {
            return Err(StudyError::JointShape { expected: n_strata * 4, got: j.cells().len() }.into());
        }
    }
    // Pooled joint: mean over reports of P(x, t, y | R_i).
    let pooled = JointTable::average(joints).ok_or(EstimateError::Empty)?;
    let mut treated = vec![0.0; n_strata];
    let mut total = vec![0.0; n_strata];
    for s in 0..n_strata {
        treated[s] = pooled.get(s, 1, 0) + pooled.get(s, 1, 1);
        total[s] = pooled.stratum_mass(s);
    }
    let propensity = PropensityTable::from_masses(&treated, &total, epsilon)?;

    let n = joints.len() as f64;
    let mut ipw_acc = 0.0;
    for j in joints {
        for s in 0..n_strata {
            let e = propensity.get(s);
            for t in 0..2u8 {
                // y = 0 cells contribute nothing.
                ipw_acc += j.get(s, t, 1) * ipw_term(t as f64, 1.0, e);
            }
        }
    }
    let ipw_form = ipw_acc / n;

    let ratio = |num: f64, den: f64| if num == 0.0 { 0.0 } else { num / den };
    let mut oi_form = 0.0;
    for s in 0..n_strata {
        let px = total[s];
        if px == 0.0 {
            continue;
        }
        let m1 = treated[s];
        let m0 = px - m1;
        oi_form += px * (ratio(pooled.get(s, 1, 1), m1) - ratio(pooled.get(s, 0, 1), m0));
    }

    let result = NaturalFull {
        estimate: AteEstimate::new("n_full", ipw_form, joints.len()),
        ipw_form,
        oi_form,
        propensity,
    };
    if result.forms_must_agree() {
        debug_assert!(
            (ipw_form - oi_form).abs() <= 1e-9 * (1.0 + ipw_form.abs()),
            "n_full forms disagree: {ipw_form} vs {oi_form}"
        );
    }
    Ok(result)
}

/// Hybrid IPW over slices: the (t, y) expectation of the IPW term per report,
/// with ê(x) the stratum mean of P(T=1 | R, x).
pub fn natural_ipw(
    slices: &[ConditionalSlice],
    schema: &CovariateSchema,
    epsilon: f64,
) -> Result<AteEstimate, EstimateError> {
    let propensity = fit_propensity_conditional(slices, schema, epsilon)?;
    natural_ipw_with(slices, schema, &propensity)
}

/// [`natural_ipw`] with a caller-supplied propensity table.
pub fn natural_ipw_with(
    slices: &[ConditionalSlice],
    schema: &CovariateSchema,
    propensity: &PropensityTable,
) -> Result<AteEstimate, EstimateError> {
    if slices.is_empty() {
        return Err(EstimateError::Empty);
    }
    let mut acc = 0.0;
    for slice in slices {
        let s = schema.stratum_index(&slice.x)?;
        let e = propensity.get(s);
        if e <= 0.0 || e >= 1.0 {
            return Err(EstimateError::PositivityBreach { stratum: s, value: e });
        }
        for t in 0..2u8 {
            acc += slice.p(t, 1) * ipw_term(t as f64, 1.0, e);
        }
    }
    Ok(AteEstimate::new("n_ipw", acc / slices.len() as f64, slices.len()))
}

/// A slice paired with a treatment sampled from it.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatedSlice {
    pub slice: ConditionalSlice,
    pub t: u8,
}

/// Draws T from P(T | report, x) for each slice.
pub fn sample_treatments(slices: &[ConditionalSlice], seed: u64) -> Vec<TreatedSlice> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    slices
        .iter()
        .map(|slice| {
            let t = u8::from(rng.random::<f64>() < slice.treated_mass());
            TreatedSlice { slice: slice.clone(), t }
        })
        .collect()
}

/// Hybrid outcome imputation: cell means of P(Y=1 | R, x, T) over records
/// with a sampled treatment.
pub fn natural_oi(records: &[TreatedSlice], schema: &CovariateSchema) -> Result<AteEstimate, EstimateError> {
    if records.is_empty() {
        return Err(EstimateError::Empty);
    }
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let s = schema.stratum_index(&r.slice.x)?;
        let y = r
            .slice
            .outcome_given(r.t)
            .ok_or_else(|| EstimateError::ZeroMassTreatment(r.slice.report_id.clone()))?;
        rows.push((s, r.t, y, 1.0));
    }
    let model = OutcomeModel::fit(schema.n_strata(), rows.iter().copied())?;
    let value = model.average_effect(rows.iter().map(|&(s, ..)| (s, 1.0)));
    Ok(AteEstimate::new("n_oi", value, records.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McPlugin {
    Ipw,
    Oi,
}

/// Draws one (x, t, y) per joint table.
pub fn sample_units_from_joints(joints: &[JointTable], schema: &CovariateSchema, seed: u64) -> Vec<TabularUnit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    joints
        .iter()
        .map(|j| {
            let u: f64 = rng.random();
            let cells = j.cells();
            let mut acc = 0.0;
            let mut chosen = cells.iter().rposition(|&p| p > 0.0).unwrap_or(0);
            for (i, &p) in cells.iter().enumerate() {
                acc += p;
                if u < acc && p > 0.0 {
                    chosen = i;
                    break;
                }
            }
            TabularUnit::new(schema.decode(chosen / 4), ((chosen % 4) / 2) as u8, (chosen % 2) as u8)
        })
        .collect()
}

/// Monte Carlo estimator: a classical estimator on sampled tabular units.
pub fn natural_mc(
    samples: &[TabularUnit],
    schema: &CovariateSchema,
    plugin: McPlugin,
    epsilon: f64,
) -> Result<AteEstimate, EstimateError> {
    if samples.is_empty() {
        return Err(EstimateError::Empty);
    }
    let (mut estimate, name) = match plugin {
        McPlugin::Ipw => {
            let propensity = fit_propensity_empirical(samples, schema, epsilon)?;
            (ipw_estimate(samples, schema, &propensity)?, "n_mc_ipw")
        }
        McPlugin::Oi => (oi_estimate(samples, schema)?, "n_mc_oi"),
    };
    estimate.estimator = name.to_string();
    Ok(estimate)
}

/// A slice whose covariates were imputed, with the mask of dimensions that
/// were known before imputation.
#[derive(Debug, Clone, PartialEq)]
pub struct InclusionSlice {
    pub slice: ConditionalSlice,
    pub known: Vec<bool>,
}

/// Estimates the ATE inside an inclusion box from filtered, imputed slices.
///
/// Every known covariate must satisfy the box (the filter guarantees it) and
/// every imputed one must too (imputation is conditioned on inclusion).
pub fn inclusion_conditioned_estimate(
    slices: &[InclusionSlice],
    schema: &CovariateSchema,
    inclusion: &InclusionBox,
    epsilon: f64,
) -> Result<AteEstimate, EstimateError> {
    if slices.is_empty() {
        return Err(EstimateError::Empty);
    }
    let mut plain = Vec::with_capacity(slices.len());
    for s in slices {
        let x = &s.slice.x;
        if !x.is_fully_known() || s.known.len() != x.values.len() {
            return Err(StudyError::DimensionMismatch { expected: schema.len(), got: s.known.len() }.into());
        }
        let known_only = CovariateVector { values: x.values.clone(), known: s.known.clone() };
        if !inclusion.admits_known(&known_only) || !inclusion.admits_known(x) {
            return Err(EstimateError::InclusionViolated(s.slice.report_id.clone()));
        }
        plain.push(s.slice.clone());
    }
    let mut estimate = natural_ipw(&plain, schema, epsilon)?;
    estimate.estimator = "inclusion".to_string();
    Ok(estimate)
}

/// Bootstrap standard error of `statistic` over resamples of `items`.
///
/// Resample `b` draws from a stream seeded by `(seed, b)`, so the result does
/// not depend on scheduling. Failed resamples are skipped; fewer than two
/// successes yields `None`.
pub fn bootstrap_stderr<T, F>(items: &[T], resamples: usize, seed: u64, statistic: F) -> Option<f64>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> Result<f64, EstimateError> + Sync,
{
    if items.is_empty() || resamples < 2 {
        return None;
    }
    let values: Vec<Option<f64>> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64 + 1);
            let sample: Vec<T> = (0..items.len())
                .map(|_| items[rng.random_range(0..items.len())].clone())
                .collect();
            statistic(&sample).ok()
        })
        .collect();
    let ok: Vec<f64> = values.into_iter().flatten().collect();
    if ok.len() < 2 {
        return None;
    }
    let mean = ok.iter().sum::<f64>() / ok.len() as f64;
    let var = ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (ok.len() - 1) as f64;
    Some(var.sqrt())
}

/// Every estimator, by its persisted name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EstimatorKind {
    Uncorrected,
    Ipw,
    Oi,
    NFull,
    NIpw,
    NOi,
    NMcIpw,
    NMcOi,
    Inclusion,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 9] = [
        EstimatorKind::Uncorrected,
        EstimatorKind::Ipw,
        EstimatorKind::Oi,
        EstimatorKind::NFull,
        EstimatorKind::NIpw,
        EstimatorKind::NOi,
        EstimatorKind::NMcIpw,
        EstimatorKind::NMcOi,
        EstimatorKind::Inclusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Uncorrected => "uncorrected",
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Oi => "oi",
            EstimatorKind::NFull => "n_full",
            EstimatorKind::NIpw => "n_ipw",
            EstimatorKind::NOi => "n_oi",
            EstimatorKind::NMcIpw => "n_mc_ipw",
            EstimatorKind::NMcOi => "n_mc_oi",
            EstimatorKind::Inclusion => "inclusion",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// True for estimators that read per-report distributions rather than a table.
    pub fn is_natural(self) -> bool {
        !matches!(self, EstimatorKind::Uncorrected | EstimatorKind::Ipw | EstimatorKind::Oi)
    }
}

/// Inputs available to [`run_estimator`]; each estimator reads one of them.
#[derive(Debug, Clone, Copy, Default)]
pub struct EstimationInputs<'a> {
    /// Extracted tabular units, for the classical estimators.
    pub units: Option<&'a [TabularUnit]>,
    pub slices: Option<&'a [ConditionalSlice]>,
    pub joints: Option<&'a [JointTable]>,
    pub inclusion: Option<&'a [InclusionSlice]>,
}

/// Shared estimator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSettings {
    pub epsilon: f64,
    pub seed: u64,
    pub inclusion: InclusionBox,
    /// Bootstrap resamples for the standard error; 0 skips it.
    pub bootstrap: usize,
}

fn estimate_units(kind: EstimatorKind, units: &[TabularUnit], schema: &CovariateSchema, s: &EstimateSettings) -> Result<AteEstimate, EstimateError> {
    match kind {
        EstimatorKind::Uncorrected => uncorrected(units),
        EstimatorKind::Ipw => {
            let propensity = fit_propensity_empirical(units, schema, s.epsilon)?;
            ipw_estimate(units, schema, &propensity)
        }
        _ => oi_estimate(units, schema),
    }
}

fn estimate_slices(kind: EstimatorKind, slices: &[ConditionalSlice], schema: &CovariateSchema, s: &EstimateSettings) -> Result<AteEstimate, EstimateError> {
    match kind {
        EstimatorKind::NIpw => natural_ipw(slices, schema, s.epsilon),
        _ => natural_oi(&sample_treatments(slices, s.seed), schema),
    }
}

fn estimate_joints(kind: EstimatorKind, joints: &[JointTable], schema: &CovariateSchema, s: &EstimateSettings) -> Result<AteEstimate, EstimateError> {
    match kind {
        EstimatorKind::NFull => Ok(natural_full(joints, schema, s.epsilon)?.estimate),
        EstimatorKind::NMcIpw => natural_mc(&sample_units_from_joints(joints, schema, s.seed), schema, McPlugin::Ipw, s.epsilon),
        _ => natural_mc(&sample_units_from_joints(joints, schema, s.seed), schema, McPlugin::Oi, s.epsilon),
    }
}

fn with_bootstrap<T: Clone + Sync>(
    items: &[T],
    settings: &EstimateSettings,
    estimate: impl Fn(&[T]) -> Result<AteEstimate, EstimateError> + Sync,
) -> Result<AteEstimate, EstimateError> {
    let point = estimate(items)?;
    if settings.bootstrap == 0 {
        return Ok(point);
    }
    let stderr = bootstrap_stderr(items, settings.bootstrap, settings.seed, |sample| estimate(sample).map(|e| e.value));
    Ok(point.with_stderr(stderr))
}

/// Runs one estimator on whichever input it needs, with an optional
/// bootstrap standard error over reports.
pub fn run_estimator(
    kind: EstimatorKind,
    inputs: &EstimationInputs<'_>,
    schema: &CovariateSchema,
    settings: &EstimateSettings,
) -> Result<AteEstimate, EstimateError> {
    match kind {
        EstimatorKind::Uncorrected | EstimatorKind::Ipw | EstimatorKind::Oi => {
            let units = inputs.units.ok_or(EstimateError::MissingInput("extracted treatments and outcomes"))?;
            with_bootstrap(units, settings, |u| estimate_units(kind, u, schema, settings))
        }
        EstimatorKind::NIpw | EstimatorKind::NOi => {
            let slices = inputs.slices.ok_or(EstimateError::MissingInput("conditionals"))?;
            with_bootstrap(slices, settings, |s| estimate_slices(kind, s, schema, settings))
        }
        EstimatorKind::NFull | EstimatorKind::NMcIpw | EstimatorKind::NMcOi => {
            let joints = inputs.joints.ok_or(EstimateError::MissingInput("conditionals"))?;
            with_bootstrap(joints, settings, |j| estimate_joints(kind, j, schema, settings))
        }
        EstimatorKind::Inclusion => {
            let slices = inputs.inclusion.ok_or(EstimateError::MissingInput("conditionals"))?;
            with_bootstrap(slices, settings, |s| inclusion_conditioned_estimate(s, schema, &settings.inclusion, settings.epsilon))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::study::CovariateDim;
    use approx::assert_abs_diff_eq;

    fn one_dim(k: usize) -> CovariateSchema {
        let labels: Vec<String> = (0..k).map(|i| i.to_string()).collect();
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        CovariateSchema::new(vec![CovariateDim::new("x", &refs)])
    }

    fn unit(x: usize, t: u8, y: u8) -> TabularUnit {
        TabularUnit::new(CovariateVector::known(vec![x]), t, y)
    }

    #[test]
    fn difference_in_means_examples() {
        assert_abs_diff_eq!(difference_in_means(&[1, 0], &[0, 0]).unwrap().value, 0.5);
        assert_abs_diff_eq!(difference_in_means(&[1, 1], &[1, 1]).unwrap().value, 0.0);
        // (1+1+0+0)/4 - (1+0+0+0)/4
        assert_abs_diff_eq!(difference_in_means(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap().value, 0.25);
        assert_eq!(difference_in_means(&[], &[1]), Err(EstimateError::EmptyArm("treated")));
        assert_eq!(difference_in_means(&[1], &[]), Err(EstimateError::EmptyArm("control")));
    }

    #[test]
    fn propensity_examples() {
        let schema = one_dim(1);
        let units = vec![unit(0, 1, 0), unit(0, 0, 0), unit(0, 0, 1), unit(0, 1, 1)];
        let e = fit_propensity_empirical(&units, &schema, 0.01).unwrap();
        assert_abs_diff_eq!(e.get(0), 0.5);

        let slices = vec![
            ConditionalSlice::new("a", CovariateVector::known(vec![0]), [[0.4, 0.4], [0.1, 0.1]]).unwrap(),
            ConditionalSlice::new("b", CovariateVector::known(vec![0]), [[0.2, 0.2], [0.3, 0.3]]).unwrap(),
        ];
        let e = fit_propensity_conditional(&slices, &schema, 0.01).unwrap();
        assert_abs_diff_eq!(e.get(0), 0.4, epsilon = 1e-12);

        let e = fit_propensity_empirical(&[unit(0, 1, 0), unit(0, 1, 1)], &schema, 0.01).unwrap();
        assert_abs_diff_eq!(e.get(0), 0.99);
        assert_eq!(e.clipped_strata, vec![0]);
    }

    #[test]
    fn empty_strata_take_marginal() {
        let schema = one_dim(3);
        let units = vec![unit(0, 1, 0), unit(0, 0, 0), unit(1, 1, 0), unit(1, 1, 1)];
        let e = fit_propensity_empirical(&units, &schema, 0.01).unwrap();
        assert_abs_diff_eq!(e.get(2), 0.75);
        assert_eq!(e.fallback_strata, vec![2]);
    }

    #[test]
    fn ipw_examples() {
        let schema = one_dim(1);
        let half = PropensityTable::from_values(vec![0.5]);
        let units = vec![unit(0, 1, 1), unit(0, 0, 1), unit(0, 1, 0), unit(0, 0, 0)];
        assert_abs_diff_eq!(ipw_estimate(&units, &schema, &half).unwrap().value, 0.0);
        let quarter = PropensityTable::from_values(vec![0.25]);
        assert_abs_diff_eq!(ipw_estimate(&[unit(0, 1, 1)], &schema, &quarter).unwrap().value, 4.0);
        let bad = PropensityTable::from_values(vec![1.0]);
        assert!(matches!(
            ipw_estimate(&[unit(0, 1, 1)], &schema, &bad),
            Err(EstimateError::PositivityBreach { .. })
        ));
    }

    #[test]
    fn oi_examples() {
        let schema = one_dim(1);
        // 7/10 treated successes, 4/10 control successes.
        let mut units = Vec::new();
        for i in 0..10 {
            units.push(unit(0, 1, u8::from(i < 7)));
            units.push(unit(0, 0, u8::from(i < 4)));
        }
        assert_abs_diff_eq!(oi_estimate(&units, &schema).unwrap().value, 0.3, epsilon = 1e-12);
        let zeros = vec![unit(0, 1, 0), unit(0, 0, 0)];
        assert_abs_diff_eq!(oi_estimate(&zeros, &schema).unwrap().value, 0.0);
        assert_eq!(oi_estimate(&[unit(0, 1, 1)], &schema), Err(EstimateError::MissingArm(0)));
    }

    #[test]
    fn oi_falls_back_to_arm_mean() {
        let schema = one_dim(2);
        // Stratum 1 has no controls: its control prediction is the arm mean 0.5.
        let units = vec![unit(0, 1, 1), unit(0, 0, 1), unit(0, 0, 0), unit(1, 1, 1)];
        let est = oi_estimate(&units, &schema).unwrap();
        // stratum 0: 1 - 0.5 = 0.5 (three units); stratum 1: 1 - 0.5 = 0.5
        assert_abs_diff_eq!(est.value, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn natural_full_symmetric_point_masses() {
        let schema = one_dim(1);
        let joints = vec![JointTable::point_mass(1, 0, 1, 1), JointTable::point_mass(1, 0, 0, 1)];
        let full = natural_full(&joints, &schema, 0.01).unwrap();
        assert_abs_diff_eq!(full.propensity.get(0), 0.5);
        assert_abs_diff_eq!(full.estimate.value, 0.0);
        assert_abs_diff_eq!(full.oi_form, 0.0);
    }

    #[test]
    fn natural_ipw_symmetric_point_masses() {
        let schema = one_dim(1);
        let x = CovariateVector::known(vec![0]);
        let slices = vec![
            ConditionalSlice::point_mass("a", x.clone(), 1, 1),
            ConditionalSlice::point_mass("b", x, 0, 1),
        ];
        assert_abs_diff_eq!(natural_ipw(&slices, &schema, 0.01).unwrap().value, 0.0);
        assert_eq!(natural_ipw(&[], &schema, 0.01), Err(EstimateError::Empty));
    }

    #[test]
    fn natural_oi_hand_example() {
        let schema = one_dim(1);
        let x = CovariateVector::known(vec![0]);
        let rec = |id: &str, t: u8, py1: f64| {
            let mut p = [[0.0; 2]; 2];
            p[t as usize] = [1.0 - py1, py1];
            TreatedSlice { slice: ConditionalSlice::new(id, x.clone(), p).unwrap(), t }
        };
        let records = vec![rec("a", 1, 0.8), rec("b", 1, 0.6), rec("c", 0, 0.5), rec("d", 0, 0.3)];
        assert_abs_diff_eq!(natural_oi(&records, &schema).unwrap().value, 0.3, epsilon = 1e-12);

        let constant = vec![rec("a", 1, 0.4), rec("b", 0, 0.4)];
        assert_abs_diff_eq!(natural_oi(&constant, &schema).unwrap().value, 0.0);
        assert_eq!(natural_oi(&[rec("a", 1, 0.4)], &schema), Err(EstimateError::MissingArm(0)));
    }

    #[test]
    fn natural_mc_point_masses_match_classical() {
        let schema = one_dim(2);
        let truth = [(0, 1, 1), (0, 0, 0), (1, 1, 0), (1, 0, 1), (1, 1, 1), (0, 1, 0)];
        let joints: Vec<_> = truth.iter().map(|&(x, t, y)| JointTable::point_mass(2, x, t, y)).collect();
        let samples = sample_units_from_joints(&joints, &schema, 9);
        let units: Vec<_> = truth.iter().map(|&(x, t, y)| unit(x, t, y)).collect();
        assert_eq!(samples, units);
        let mc = natural_mc(&samples, &schema, McPlugin::Oi, 0.01).unwrap();
        assert_eq!(mc.value, oi_estimate(&units, &schema).unwrap().value);
        assert_eq!(natural_mc(&[], &schema, McPlugin::Ipw, 0.01), Err(EstimateError::Empty));
    }

    #[test]
    fn inclusion_contract_checked() {
        let schema = one_dim(2);
        let mut inclusion = InclusionBox::all(1);
        inclusion.allowed[0] = Some(vec![1]);
        let ok = InclusionSlice {
            slice: ConditionalSlice::point_mass("a", CovariateVector::known(vec![1]), 1, 1),
            known: vec![true],
        };
        let bad = InclusionSlice {
            slice: ConditionalSlice::point_mass("b", CovariateVector::known(vec![0]), 0, 1),
            known: vec![true],
        };
        let err = inclusion_conditioned_estimate(&[ok, bad], &schema, &inclusion, 0.01).unwrap_err();
        assert_eq!(err, EstimateError::InclusionViolated("b".into()));
        assert!(err.to_string().contains("inclusion contract violated"));
    }

    #[test]
    fn inclusion_with_all_known_equals_natural_ipw() {
        let schema = one_dim(2);
        let slices: Vec<_> = [(0, 1, 1), (0, 0, 0), (1, 1, 0), (1, 0, 1), (0, 0, 1)]
            .iter()
            .enumerate()
            .map(|(i, &(x, t, y))| ConditionalSlice::point_mass(i.to_string(), CovariateVector::known(vec![x]), t, y))
            .collect();
        let wrapped: Vec<_> =
            slices.iter().map(|s| InclusionSlice { slice: s.clone(), known: vec![true] }).collect();
        let a = inclusion_conditioned_estimate(&wrapped, &schema, &InclusionBox::all(1), 0.01).unwrap();
        let b = natural_ipw(&slices, &schema, 0.01).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn invalid_epsilon_rejected() {
        let schema = one_dim(1);
        assert_eq!(
            fit_propensity_empirical(&[unit(0, 1, 1)], &schema, 0.0),
            Err(EstimateError::InvalidEpsilon(0.0))
        );
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let items: Vec<f64> = (0..50).map(|i| (i % 7) as f64).collect();
        let mean = |v: &[f64]| Ok(v.iter().sum::<f64>() / v.len() as f64);
        let a = bootstrap_stderr(&items, 100, 3, mean).unwrap();
        let b = bootstrap_stderr(&items, 100, 3, mean).unwrap();
        assert_eq!(a, b);
        // Population sd / sqrt(n) of the sample, roughly.
        assert!(a > 0.1 && a < 0.5, "{a}");
    }
}
