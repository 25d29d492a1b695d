//! Synthetic laboratory: discrete data-generating processes, confounded
//! subsampling, template rendering of reports, and the exact oracle
//! conditional P(X, T, Y | report).
//!
//! Every unit `i` draws its randomness from a ChaCha stream keyed by
//! `(seed, i)`, so corpora are identical no matter how generation is
//! scheduled.

use std::collections::HashMap;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::study::{
    CovariateSchema, CovariateVector, InclusionBox, JointTable, Report, StudyDesign, StudyError,
    TabularUnit, NORMALIZATION_TOL,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid data-generating process: {0}")]
    InvalidDgp(String),
    #[error("infeasible keep constant {c} (largest feasible is {max})")]
    InfeasibleKeep { c: f64, max: f64 },
    #[error("randomization probability must lie in (0, 1), got {0}")]
    InvalidAssignment(f64),
    #[error("template phrase collision: `{0}`")]
    TemplateCollision(String),
    #[error("report `{0}` does not match the data-generating process")]
    Mismatch(String),
    #[error("drop probability {0} outside [0, 1]")]
    InvalidDrop(f64),
    #[error(transparent)]
    Study(#[from] StudyError),
}

/// Per-stratum tables of a discrete DGP, as written in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpTables {
    pub px: Vec<f64>,
    pub e: Vec<f64>,
    pub py1: Vec<f64>,
    pub py0: Vec<f64>,
}

/// Ground-truth process over (X, T, Y). Outcomes depend on (x, t) only, so
/// treatment is ignorable given X by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dgp {
    pub schema: CovariateSchema,
    pub px: Vec<f64>,
    pub e: Vec<f64>,
    pub py1: Vec<f64>,
    pub py0: Vec<f64>,
    strata: Vec<Vec<usize>>,
}

impl Dgp {
    pub fn new(schema: CovariateSchema, tables: DgpTables) -> Result<Self, SynthError> {
        let n = schema.n_strata();
        let DgpTables { px, e, py1, py0 } = tables;
        for (name, v) in [("px", &px), ("e", &e), ("py1", &py1), ("py0", &py0)] {
            if v.len() != n {
                return Err(SynthError::InvalidDgp(format!("{name} has {} entries, schema has {n} strata", v.len())));
            }
        }
        if px.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(SynthError::InvalidDgp("px entries must lie in [0, 1]".into()));
        }
        let total: f64 = px.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(SynthError::InvalidDgp(format!("px sums to {total}")));
        }
        for (name, v) in [("e", &e), ("py1", &py1), ("py0", &py0)] {
            if v.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
                return Err(SynthError::InvalidDgp(format!("{name} entries must lie strictly inside (0, 1)")));
            }
        }
        let strata = (0..n).map(|s| schema.decode(s).values).collect();
        Ok(Dgp { schema, px, e, py1, py0, strata })
    }

    /// One binary covariate, px=(0.5, 0.5), e=(0.3, 0.7), py1=(0.8, 0.6), py0=(0.5, 0.2).
    pub fn toy_2x2(schema: CovariateSchema) -> Result<Self, SynthError> {
        Dgp::new(
            schema,
            DgpTables { px: vec![0.5, 0.5], e: vec![0.3, 0.7], py1: vec![0.8, 0.6], py0: vec![0.5, 0.2] },
        )
    }

    pub fn n_strata(&self) -> usize {
        self.px.len()
    }

    pub fn stratum_values(&self, stratum: usize) -> &[usize] {
        &self.strata[stratum]
    }

    fn py(&self, stratum: usize, t: u8) -> f64 {
        if t == 1 {
            self.py1[stratum]
        } else {
            self.py0[stratum]
        }
    }

    /// P(X=x, T=t, Y=y).
    pub fn cell(&self, stratum: usize, t: u8, y: u8) -> f64 {
        let pt = if t == 1 { self.e[stratum] } else { 1.0 - self.e[stratum] };
        let py = self.py(stratum, t);
        self.px[stratum] * pt * if y == 1 { py } else { 1.0 - py }
    }

    pub fn joint(&self) -> JointTable {
        let n = self.n_strata();
        let mut p = vec![0.0; n * 4];
        for s in 0..n {
            for t in 0..2 {
                for y in 0..2 {
                    p[JointTable::cell_index(s, t, y)] = self.cell(s, t, y);
                }
            }
        }
        JointTable::from_masses(p, n).expect("validated DGP has a normalized joint")
    }

    /// Σ_x px(x) (py1(x) − py0(x)).
    pub fn true_ate(&self) -> f64 {
        (0..self.n_strata()).map(|s| self.px[s] * (self.py1[s] - self.py0[s])).sum()
    }

    /// E[Y | T=1] − E[Y | T=0], the contrast a naive comparison converges to.
    pub fn uncorrected_contrast(&self) -> f64 {
        let (mut y1, mut t1, mut y0, mut t0) = (0.0, 0.0, 0.0, 0.0);
        for s in 0..self.n_strata() {
            t1 += self.px[s] * self.e[s];
            t0 += self.px[s] * (1.0 - self.e[s]);
            y1 += self.cell(s, 1, 1);
            y0 += self.cell(s, 0, 1);
        }
        y1 / t1 - y0 / t0
    }

    /// E[Y(1) − Y(0) | X ∈ box] by enumeration of the strata inside the box.
    pub fn ate_in_box(&self, inclusion: &InclusionBox) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for s in 0..self.n_strata() {
            if inclusion.contains_stratum(&self.schema, s) {
                num += self.px[s] * (self.py1[s] - self.py0[s]);
                den += self.px[s];
            }
        }
        num / den
    }

    fn unit_rng(seed: u64, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        rng
    }

    fn draw_stratum(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (s, &p) in self.px.iter().enumerate() {
            acc += p;
            if u < acc {
                return s;
            }
        }
        self.px.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    fn draw_unit(&self, rng: &mut impl Rng, assignment: Option<f64>) -> TabularUnit {
        let s = self.draw_stratum(rng);
        let pt = assignment.unwrap_or(self.e[s]);
        let t = u8::from(rng.random::<f64>() < pt);
        let y = u8::from(rng.random::<f64>() < self.py(s, t));
        TabularUnit::new(CovariateVector::known(self.strata[s].clone()), t, y)
    }

    /// Observational draws from the DGP.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<TabularUnit> {
        (0..n)
            .into_par_iter()
            .map(|i| self.draw_unit(&mut Self::unit_rng(seed, i), None))
            .collect()
    }

    /// A randomized experiment over the same covariates and outcome model
    /// with assignment probability `p`.
    pub fn sample_randomized(&self, n: usize, p: f64, seed: u64) -> Result<Vec<TabularUnit>, SynthError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(SynthError::InvalidAssignment(p));
        }
        Ok((0..n)
            .into_par_iter()
            .map(|i| self.draw_unit(&mut Self::unit_rng(seed, i), Some(p)))
            .collect())
    }
}

/// Largest c with c·e/p ≤ 1 and c·(1−e)/(1−p) ≤ 1 for every stratum.
pub fn max_keep_constant(p: f64, target_e: &[f64]) -> f64 {
    target_e
        .iter()
        .map(|&e| (p / e).min((1.0 - p) / (1.0 - e)))
        .fold(f64::INFINITY, f64::min)
}

/// Subsamples a randomized experiment so that the retained propensity is
/// `target_e`. Treated units are kept with probability c·e(x)/p and controls
/// with c·(1−e(x))/(1−p); every stratum keeps a fraction c in expectation,
/// so the covariate marginal is unchanged.
pub fn confound_subsample(
    units: &[TabularUnit],
    schema: &CovariateSchema,
    p: f64,
    target_e: &[f64],
    c: Option<f64>,
    seed: u64,
) -> Result<Vec<TabularUnit>, SynthError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(SynthError::InvalidAssignment(p));
    }
    if target_e.len() != schema.n_strata() || target_e.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(SynthError::InvalidDgp("target propensities must lie in (0, 1) per stratum".into()));
    }
    let max = max_keep_constant(p, target_e);
    let c = c.unwrap_or(max);
    if !(c.is_finite() && c > 0.0) || c > max * (1.0 + 1e-12) {
        return Err(SynthError::InfeasibleKeep { c, max });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    for u in units {
        let s = schema.stratum_index(&u.x)?;
        let keep = if u.t == 1 { c * target_e[s] / p } else { c * (1.0 - target_e[s]) / (1.0 - p) };
        if rng.random::<f64>() < keep {
            kept.push(u.clone());
        }
    }
    Ok(kept)
}

/// Which fields a report mentions, and their values.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Mentions {
    pub covariates: Vec<Option<usize>>,
    pub treatment: Option<u8>,
    pub outcome: Option<u8>,
}

impl Mentions {
    pub fn covariate_vector(&self) -> CovariateVector {
        let mut x = CovariateVector::unknown(self.covariates.len());
        for (d, v) in self.covariates.iter().enumerate() {
            if let Some(v) = v {
                x.set(d, *v);
            }
        }
        x
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.iter().all(Option::is_none) && self.treatment.is_none() && self.outcome.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Covariate(usize, usize),
    Treatment(u8),
    Outcome(u8),
}

/// One unambiguous sentence per (field, value), each on its own line.
#[derive(Debug, Clone)]
pub struct Templates {
    pub intro: String,
    covariates: Vec<Vec<String>>,
    treatments: [String; 2],
    outcomes: [String; 2],
    lookup: HashMap<String, Field>,
}

impl Templates {
    pub fn new(design: &StudyDesign) -> Result<Self, SynthError> {
        let covariates: Vec<Vec<String>> = design
            .covariates
            .dims
            .iter()
            .map(|dim| dim.categories.iter().map(|c| format!("My {} is {}.", dim.name, c)).collect())
            .collect();
        let treatments = [
            format!("I was treated with {}.", design.treatments[0]),
            format!("I was treated with {}.", design.treatments[1]),
        ];
        let outcomes = [
            format!("{} {}.", design.outcome_question.trim(), design.outcome_options[0]),
            format!("{} {}.", design.outcome_question.trim(), design.outcome_options[1]),
        ];
        let mut lookup = HashMap::new();
        let mut insert = |phrase: &String, field: Field| -> Result<(), SynthError> {
            if lookup.insert(phrase.clone(), field).is_some() {
                return Err(SynthError::TemplateCollision(phrase.clone()));
            }
            Ok(())
        };
        for (d, phrases) in covariates.iter().enumerate() {
            for (v, phrase) in phrases.iter().enumerate() {
                insert(phrase, Field::Covariate(d, v))?;
            }
        }
        for t in 0..2 {
            insert(&treatments[t], Field::Treatment(t as u8))?;
            insert(&outcomes[t], Field::Outcome(t as u8))?;
        }
        Ok(Templates {
            intro: "Sharing my experience here for anyone considering the same path.".to_string(),
            covariates,
            treatments,
            outcomes,
            lookup,
        })
    }

    pub fn covariate_phrase(&self, dim: usize, value: usize) -> &str {
        &self.covariates[dim][value]
    }

    pub fn treatment_phrase(&self, t: u8) -> &str {
        &self.treatments[t as usize]
    }

    pub fn outcome_phrase(&self, y: u8) -> &str {
        &self.outcomes[y as usize]
    }

    /// Reads the mentioned fields back out of a body. Lines that are not
    /// template phrases are ignored; conflicting mentions are an error.
    pub fn parse(&self, body: &str) -> Result<Mentions, String> {
        let mut m = Mentions { covariates: vec![None; self.covariates.len()], ..Default::default() };
        fn put<T: PartialEq + Copy>(slot: &mut Option<T>, v: T) -> Result<(), String> {
            match slot {
                Some(old) if *old != v => Err("conflicting mentions".to_string()),
                _ => {
                    *slot = Some(v);
                    Ok(())
                }
            }
        }
        for line in body.lines() {
            match self.lookup.get(line.trim()) {
                Some(Field::Covariate(d, v)) => put(&mut m.covariates[*d], *v)?,
                Some(Field::Treatment(t)) => put(&mut m.treatment, *t)?,
                Some(Field::Outcome(y)) => put(&mut m.outcome, *y)?,
                None => {}
            }
        }
        Ok(m)
    }
}

/// Independent per-field drop probabilities. Treatment and outcome are kept
/// by default; dropping them is a diagnostic mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    pub covariate_drop: Vec<f64>,
    pub treatment_drop: f64,
    pub outcome_drop: f64,
}

impl RenderOptions {
    pub fn uniform(n_dims: usize, drop: f64) -> Self {
        RenderOptions { covariate_drop: vec![drop; n_dims], treatment_drop: 0.0, outcome_drop: 0.0 }
    }

    fn validate(&self) -> Result<(), SynthError> {
        for &p in self.covariate_drop.iter().chain([&self.treatment_drop, &self.outcome_drop]) {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::InvalidDrop(p));
            }
        }
        Ok(())
    }
}

/// Ground truth behind a rendered report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truth {
    pub x: Vec<usize>,
    pub t: u8,
    pub y: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub report: Report,
    pub mentioned: Mentions,
    pub truth: Truth,
}

fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).unwrap()
}

pub fn synthetic_id(index: usize) -> String {
    format!("syn-{index:07}")
}

/// Renders one unit as a report. Each field survives independently of its
/// value; survivors appear in a seed-determined order after a fixed intro.
pub fn render_report(
    index: usize,
    unit: &TabularUnit,
    templates: &Templates,
    options: &RenderOptions,
    seed: u64,
) -> Result<RenderedReport, SynthError> {
    options.validate()?;
    let n_dims = unit.x.values.len();
    if options.covariate_drop.len() != n_dims {
        return Err(StudyError::DimensionMismatch { expected: n_dims, got: options.covariate_drop.len() }.into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7e47);
    rng.set_stream(index as u64);

    let mut mentioned = Mentions { covariates: vec![None; n_dims], ..Default::default() };
    let mut phrases: Vec<&str> = Vec::with_capacity(n_dims + 2);
    for d in 0..n_dims {
        let v = unit.x.values[d];
        if rng.random::<f64>() >= options.covariate_drop[d] {
            mentioned.covariates[d] = Some(v);
            phrases.push(templates.covariate_phrase(d, v));
        }
    }
    if rng.random::<f64>() >= options.treatment_drop {
        mentioned.treatment = Some(unit.t);
        phrases.push(templates.treatment_phrase(unit.t));
    }
    if rng.random::<f64>() >= options.outcome_drop {
        mentioned.outcome = Some(unit.y);
        phrases.push(templates.outcome_phrase(unit.y));
    }
    phrases.shuffle(&mut rng);

    let mut body = templates.intro.clone();
    for phrase in phrases {
        body.push('\n');
        body.push_str(phrase);
    }
    let report = Report {
        id: synthetic_id(index),
        source: "synthetic".to_string(),
        title: None,
        created: epoch() + Duration::minutes(index as i64),
        body,
        author_replies: Vec::new(),
    };
    let truth = Truth { x: unit.x.values.clone(), t: unit.t, y: unit.y };
    Ok(RenderedReport { report, mentioned, truth })
}

/// Exact P(X, T, Y | mentions): the DGP joint restricted to the cells that
/// agree with every mentioned value. Valid because fields are dropped
/// independently of their values.
pub fn oracle_joint(mentions: &Mentions, dgp: &Dgp) -> Result<JointTable, SynthError> {
    if mentions.covariates.len() != dgp.schema.len() {
        return Err(StudyError::DimensionMismatch { expected: dgp.schema.len(), got: mentions.covariates.len() }.into());
    }
    let n = dgp.n_strata();
    let mut p = vec![0.0; n * 4];
    for s in 0..n {
        let values = dgp.stratum_values(s);
        if mentions.covariates.iter().zip(values).any(|(m, v)| m.is_some_and(|m| m != *v)) {
            continue;
        }
        for t in 0..2u8 {
            if mentions.treatment.is_some_and(|m| m != t) {
                continue;
            }
            for y in 0..2u8 {
                if mentions.outcome.is_some_and(|m| m != y) {
                    continue;
                }
                p[JointTable::cell_index(s, t, y)] = dgp.cell(s, t, y);
            }
        }
    }
    JointTable::from_masses(p, n).map_err(|_| SynthError::Mismatch("mentions".into()))
}

/// Oracle conditional for a rendered report: parses the body and checks it
/// against the recorded mentions and truth before computing the posterior.
pub fn oracle_conditionals(
    rendered: &RenderedReport,
    dgp: &Dgp,
    templates: &Templates,
) -> Result<JointTable, SynthError> {
    let id = &rendered.report.id;
    let parsed = templates.parse(&rendered.report.body).map_err(|_| SynthError::Mismatch(id.clone()))?;
    if parsed != rendered.mentioned || rendered.truth.x.len() != dgp.schema.len() {
        return Err(SynthError::Mismatch(id.clone()));
    }
    let truth_stratum = dgp.schema.stratum_index(&CovariateVector::known(rendered.truth.x.clone()))?;
    let joint = oracle_joint(&parsed, dgp).map_err(|_| SynthError::Mismatch(id.clone()))?;
    if joint.get(truth_stratum, rendered.truth.t, rendered.truth.y) <= 0.0 {
        return Err(SynthError::Mismatch(id.clone()));
    }
    Ok(joint)
}

/// A design paired with its ground-truth process and rendering templates.
#[derive(Debug, Clone)]
pub struct SyntheticStudy {
    pub design: StudyDesign,
    pub dgp: Dgp,
    pub templates: Templates,
}

impl SyntheticStudy {
    pub fn new(design: StudyDesign, tables: DgpTables) -> Result<Self, SynthError> {
        let dgp = Dgp::new(design.covariates.clone(), tables)?;
        let templates = Templates::new(&design)?;
        Ok(SyntheticStudy { design, dgp, templates })
    }

    /// Draws `n` observational units and renders each as a report.
    pub fn generate(&self, n: usize, options: &RenderOptions, seed: u64) -> Result<Vec<RenderedReport>, SynthError> {
        let units = self.dgp.sample(n, seed);
        self.render_all(&units, options, seed)
    }

    pub fn render_all(
        &self,
        units: &[TabularUnit],
        options: &RenderOptions,
        seed: u64,
    ) -> Result<Vec<RenderedReport>, SynthError> {
        units
            .par_iter()
            .enumerate()
            .map(|(i, u)| render_report(i, u, &self.templates, options, seed))
            .collect()
    }

    pub fn oracle(&self, rendered: &RenderedReport) -> Result<JointTable, SynthError> {
        oracle_conditionals(rendered, &self.dgp, &self.templates)
    }
}

/// Persisted truth line: evaluation only, never read by estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    pub x: Vec<String>,
    pub t: u8,
    pub y: u8,
    pub mentioned: MentionMask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionMask {
    pub covariates: Vec<bool>,
    pub treatment: bool,
    pub outcome: bool,
}

impl TruthRecord {
    pub fn from_rendered(rendered: &RenderedReport, schema: &CovariateSchema) -> Self {
        TruthRecord {
            id: rendered.report.id.clone(),
            x: schema.labels(&CovariateVector::known(rendered.truth.x.clone())),
            t: rendered.truth.t,
            y: rendered.truth.y,
            mentioned: MentionMask {
                covariates: rendered.mentioned.covariates.iter().map(Option::is_some).collect(),
                treatment: rendered.mentioned.treatment.is_some(),
                outcome: rendered.mentioned.outcome.is_some(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::study::{CovariateDim, Keywords, OutcomeRule};
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    pub(crate) fn toy_design() -> StudyDesign {
        StudyDesign {
            name: "toy".into(),
            treatments: vec!["Placebo".into(), "Remedy".into()],
            outcome_question: "Did I recover?".into(),
            outcome_options: vec!["No".into(), "Yes".into()],
            outcome_rule: OutcomeRule::Binary,
            covariates: CovariateSchema::new(vec![CovariateDim::new("severity", &["mild", "severe"])]),
            inclusion: BTreeMap::new(),
            inclusion_description: None,
            keywords: Keywords::default(),
        }
    }

    fn toy() -> SyntheticStudy {
        SyntheticStudy::new(
            toy_design(),
            DgpTables { px: vec![0.5, 0.5], e: vec![0.3, 0.7], py1: vec![0.8, 0.6], py0: vec![0.5, 0.2] },
        )
        .unwrap()
    }

    #[test]
    fn toy_ground_truth() {
        let s = toy();
        // 0.5 * 0.3 + 0.5 * 0.4
        assert_abs_diff_eq!(s.dgp.true_ate(), 0.35, epsilon = 1e-12);
        // (0.3*0.8 + 0.7*0.6) - (0.7*0.5 + 0.3*0.2)
        assert_abs_diff_eq!(s.dgp.uncorrected_contrast(), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn identical_potential_outcomes_have_zero_ate() {
        let d = Dgp::new(
            toy_design().covariates,
            DgpTables { px: vec![0.2, 0.8], e: vec![0.4, 0.6], py1: vec![0.3, 0.9], py0: vec![0.3, 0.9] },
        )
        .unwrap();
        assert_eq!(d.true_ate(), 0.0);
    }

    #[test]
    fn dgp_validation() {
        let schema = toy_design().covariates;
        let bad = |px: Vec<f64>, e: Vec<f64>| {
            Dgp::new(schema.clone(), DgpTables { px, e, py1: vec![0.5, 0.5], py0: vec![0.5, 0.5] })
        };
        assert!(bad(vec![0.5, 0.6], vec![0.5, 0.5]).is_err());
        assert!(bad(vec![0.5, 0.5], vec![0.0, 0.5]).is_err());
        assert!(bad(vec![1.0], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn keep_rule_hand_example() {
        // p = 0.5, e = 0.7, c = 0.5: treated keep 0.7, control keep 0.3, retention 0.5.
        let (p, e, c) = (0.5, 0.7, 0.5);
        let treated_keep = c * e / p;
        let control_keep = c * (1.0 - e) / (1.0 - p);
        assert_abs_diff_eq!(treated_keep, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(control_keep, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(p * treated_keep + (1.0 - p) * control_keep, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(max_keep_constant(0.5, &[0.3, 0.7]), 0.5 / 0.7, epsilon = 1e-12);
    }

    #[test]
    fn keep_constant_bounds_checked() {
        let s = toy();
        let units = s.dgp.sample_randomized(100, 0.5, 1).unwrap();
        let err = confound_subsample(&units, &s.dgp.schema, 0.5, &[0.3, 0.7], Some(0.9), 1).unwrap_err();
        assert!(matches!(err, SynthError::InfeasibleKeep { .. }));
    }

    #[test]
    fn no_op_confounding_keeps_propensity() {
        let s = toy();
        let units = s.dgp.sample_randomized(40_000, 0.5, 4).unwrap();
        let kept = confound_subsample(&units, &s.dgp.schema, 0.5, &[0.5, 0.5], None, 5).unwrap();
        // c = 1 keeps everything.
        assert_eq!(kept.len(), units.len());
    }

    #[test]
    fn render_without_dropping_is_point_mass() {
        let s = toy();
        let unit = TabularUnit::new(CovariateVector::known(vec![1]), 1, 0);
        let r = render_report(3, &unit, &s.templates, &RenderOptions::uniform(1, 0.0), 11).unwrap();
        assert_eq!(r.mentioned.covariates, vec![Some(1)]);
        let j = s.oracle(&r).unwrap();
        assert_eq!(j.get(1, 1, 0), 1.0);
        assert!(r.report.body.contains("My severity is severe."));
        assert!(r.report.body.contains("I was treated with Remedy."));
        assert!(r.report.body.contains("Did I recover? No."));
    }

    #[test]
    fn render_is_deterministic() {
        let s = toy();
        let unit = TabularUnit::new(CovariateVector::known(vec![0]), 0, 1);
        let opts = RenderOptions::uniform(1, 0.5);
        let a = render_report(7, &unit, &s.templates, &opts, 2).unwrap();
        let b = render_report(7, &unit, &s.templates, &opts, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropped_covariate_gives_bayes_posterior() {
        let s = toy();
        let unit = TabularUnit::new(CovariateVector::known(vec![0]), 1, 1);
        let r = render_report(0, &unit, &s.templates, &RenderOptions::uniform(1, 1.0), 0).unwrap();
        assert_eq!(r.mentioned.covariates, vec![None]);
        let j = s.oracle(&r).unwrap();
        // P(x | T=1, Y=1) ∝ px e py1: (0.5*0.3*0.8, 0.5*0.7*0.6) = (0.12, 0.21)
        assert_abs_diff_eq!(j.stratum_mass(0), 0.12 / 0.33, epsilon = 1e-12);
        assert_abs_diff_eq!(j.get(1, 1, 1), 0.21 / 0.33, epsilon = 1e-12);
    }

    #[test]
    fn empty_body_gives_prior() {
        let s = toy();
        let unit = TabularUnit::new(CovariateVector::known(vec![0]), 1, 1);
        let opts = RenderOptions { covariate_drop: vec![1.0], treatment_drop: 1.0, outcome_drop: 1.0 };
        let r = render_report(0, &unit, &s.templates, &opts, 0).unwrap();
        assert!(r.mentioned.is_empty());
        let j = s.oracle(&r).unwrap();
        let prior = s.dgp.joint();
        for (a, b) in j.cells().iter().zip(prior.cells()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn mismatched_pairing_detected() {
        let s = toy();
        let unit = TabularUnit::new(CovariateVector::known(vec![0]), 1, 1);
        let mut r = render_report(0, &unit, &s.templates, &RenderOptions::uniform(1, 0.0), 0).unwrap();
        r.truth.x = vec![1];
        assert!(matches!(s.oracle(&r), Err(SynthError::Mismatch(_))));
    }

    #[test]
    fn box_ate_over_full_box_is_ate() {
        let s = toy();
        assert_abs_diff_eq!(s.dgp.ate_in_box(&InclusionBox::all(1)), s.dgp.true_ate(), epsilon = 1e-12);
        let mut b = InclusionBox::all(1);
        b.allowed[0] = Some(vec![1]);
        assert_abs_diff_eq!(s.dgp.ate_in_box(&b), 0.4, epsilon = 1e-12);
    }
}
