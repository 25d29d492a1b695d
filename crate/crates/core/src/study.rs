//! Study vocabulary: designs, covariate schemas, reports and the probability
//! tables attached to them.
//!
//! Covariates are always discrete. A [`CovariateVector`] carries a value per
//! dimension plus a known mask; an unknown dimension's value slot is
//! meaningless and is never read.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when checking that probability tables are normalized.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Label used by extraction prompts and artifacts for a missing value.
pub const UNKNOWN: &str = "Unknown";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StudyError {
    #[error("duplicate covariate name `{0}`")]
    DuplicateCovariate(String),
    #[error("covariate `{0}` needs at least two categories")]
    TooFewCategories(String),
    #[error("covariate `{dim}` lists category `{label}` twice")]
    DuplicateCategory { dim: String, label: String },
    #[error("binary treatments required (got {0})")]
    BinaryTreatments(usize),
    #[error("treatment labels must be distinct")]
    DuplicateTreatment,
    #[error("binary outcome options required (got {0})")]
    BinaryOutcome(usize),
    #[error("inclusion constraint on unknown dimension `{0}`")]
    UnknownInclusionDimension(String),
    #[error("inclusion constraint on `{dim}` names unknown category `{label}`")]
    UnknownInclusionCategory { dim: String, label: String },
    #[error("inclusion constraint on `{0}` allows no category")]
    EmptyInclusion(String),
    #[error("covariate vector has {got} entries, schema has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("covariate `{0}` is unknown")]
    UnknownEntry(String),
    #[error("category index {index} out of range for covariate `{dim}`")]
    IndexOutOfRange { dim: String, index: usize },
    #[error("probability table is not normalized (total {0})")]
    NotNormalized(f64),
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("joint table has {got} cells, expected {expected}")]
    JointShape { expected: usize, got: usize },
}

/// One discrete covariate dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateDim {
    pub name: String,
    pub categories: Vec<String>,
    /// Question used when conditioning prompts on this covariate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

impl CovariateDim {
    pub fn new(name: &str, categories: &[&str]) -> Self {
        CovariateDim {
            name: name.to_string(),
            categories: categories.iter().map(|c| c.to_string()).collect(),
            question: None,
        }
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }

    pub fn question(&self) -> String {
        self.question
            .clone()
            .unwrap_or_else(|| format!("What is the reported {} of the user?", self.name))
    }
}

/// Ordered list of covariate dimensions; defines the discrete support of X.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CovariateSchema {
    pub dims: Vec<CovariateDim>,
}

impl CovariateSchema {
    pub fn new(dims: Vec<CovariateDim>) -> Self {
        CovariateSchema { dims }
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d.categories.len()).collect()
    }

    /// Number of strata in the full product space (1 for an empty schema).
    pub fn n_strata(&self) -> usize {
        self.dims.iter().map(|d| d.categories.len()).product()
    }

    pub fn dim_index(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }

    pub fn validate(&self) -> Vec<StudyError> {
        let mut errors = Vec::new();
        let mut names = HashSet::new();
        for dim in &self.dims {
            if !names.insert(dim.name.as_str()) {
                errors.push(StudyError::DuplicateCovariate(dim.name.clone()));
            }
            if dim.categories.len() < 2 {
                errors.push(StudyError::TooFewCategories(dim.name.clone()));
            }
            let mut labels = HashSet::new();
            for label in &dim.categories {
                if !labels.insert(label.as_str()) {
                    errors.push(StudyError::DuplicateCategory {
                        dim: dim.name.clone(),
                        label: label.clone(),
                    });
                }
            }
        }
        errors
    }

    /// Row-major index of a fully known vector (last dimension varies fastest).
    pub fn stratum_index(&self, x: &CovariateVector) -> Result<usize, StudyError> {
        self.check_shape(x)?;
        let mut index = 0;
        for (d, dim) in self.dims.iter().enumerate() {
            if !x.known[d] {
                return Err(StudyError::UnknownEntry(dim.name.clone()));
            }
            let v = x.values[d];
            if v >= dim.categories.len() {
                return Err(StudyError::IndexOutOfRange { dim: dim.name.clone(), index: v });
            }
            index = index * dim.categories.len() + v;
        }
        Ok(index)
    }

    /// Inverse of [`stratum_index`](Self::stratum_index).
    pub fn decode(&self, mut stratum: usize) -> CovariateVector {
        let mut values = vec![0; self.dims.len()];
        for (d, dim) in self.dims.iter().enumerate().rev() {
            let k = dim.categories.len();
            values[d] = stratum % k;
            stratum /= k;
        }
        CovariateVector::known(values)
    }

    pub fn check_shape(&self, x: &CovariateVector) -> Result<(), StudyError> {
        if x.values.len() != self.dims.len() || x.known.len() != self.dims.len() {
            return Err(StudyError::DimensionMismatch {
                expected: self.dims.len(),
                got: x.values.len().max(x.known.len()),
            });
        }
        for (d, dim) in self.dims.iter().enumerate() {
            if x.known[d] && x.values[d] >= dim.categories.len() {
                return Err(StudyError::IndexOutOfRange { dim: dim.name.clone(), index: x.values[d] });
            }
        }
        Ok(())
    }

    /// Labels for a vector, with [`UNKNOWN`] in unknown slots.
    pub fn labels(&self, x: &CovariateVector) -> Vec<String> {
        self.dims
            .iter()
            .enumerate()
            .map(|(d, dim)| {
                if x.known[d] {
                    dim.categories[x.values[d]].clone()
                } else {
                    UNKNOWN.to_string()
                }
            })
            .collect()
    }

    /// Parses labels back into a vector; [`UNKNOWN`] marks an unknown slot.
    pub fn parse_labels(&self, labels: &[String]) -> Result<CovariateVector, StudyError> {
        if labels.len() != self.dims.len() {
            return Err(StudyError::DimensionMismatch { expected: self.dims.len(), got: labels.len() });
        }
        let mut x = CovariateVector::unknown(self.dims.len());
        for (d, (dim, label)) in self.dims.iter().zip(labels).enumerate() {
            if label == UNKNOWN {
                continue;
            }
            let v = dim.category_index(label).ok_or_else(|| StudyError::IndexOutOfRange {
                dim: dim.name.clone(),
                index: usize::MAX,
            })?;
            x.set(d, v);
        }
        Ok(x)
    }
}

/// Per-dimension allowed category sets. `None` means every category is allowed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InclusionBox {
    pub allowed: Vec<Option<Vec<usize>>>,
}

impl InclusionBox {
    pub fn all(n_dims: usize) -> Self {
        InclusionBox { allowed: vec![None; n_dims] }
    }

    pub fn is_unconstrained(&self) -> bool {
        self.allowed.iter().all(Option::is_none)
    }

    pub fn allows(&self, dim: usize, value: usize) -> bool {
        match self.allowed.get(dim) {
            Some(Some(set)) => set.contains(&value),
            _ => true,
        }
    }

    /// True when every known entry of `x` lies inside the box.
    pub fn admits_known(&self, x: &CovariateVector) -> bool {
        (0..x.values.len()).all(|d| !x.known[d] || self.allows(d, x.values[d]))
    }

    pub fn contains_stratum(&self, schema: &CovariateSchema, stratum: usize) -> bool {
        self.admits_known(&schema.decode(stratum))
    }

    /// Allowed categories for one dimension.
    pub fn allowed_values(&self, schema: &CovariateSchema, dim: usize) -> Vec<usize> {
        match self.allowed.get(dim) {
            Some(Some(set)) => set.clone(),
            _ => (0..schema.dims[dim].categories.len()).collect(),
        }
    }
}

/// How the binary outcome is read off treatment-outcome extractions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OutcomeRule {
    /// The extraction carries the answer directly (one of the outcome options).
    #[default]
    Binary,
    /// Outcome is 1 when the reported relative weight loss reaches `threshold_pct`.
    WeightLoss { threshold_pct: f64 },
}


#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keywords {
    #[serde(default)]
    pub treatment: Vec<String>,
    #[serde(default)]
    pub outcome: Vec<String>,
}

fn default_outcome_options() -> Vec<String> {
    vec!["No".to_string(), "Yes".to_string()]
}

/// A two-arm study over a binary outcome.
///
/// `treatments[0]` is the comparator (T=0) and `treatments[1]` the treated
/// arm (T=1). `outcome_options` lists the negative answer first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyDesign {
    #[serde(default)]
    pub name: String,
    pub treatments: Vec<String>,
    pub outcome_question: String,
    #[serde(default = "default_outcome_options")]
    pub outcome_options: Vec<String>,
    #[serde(default)]
    pub outcome_rule: OutcomeRule,
    pub covariates: CovariateSchema,
    /// Dimension name to allowed category labels; missing dimensions allow all.
    #[serde(default)]
    pub inclusion: BTreeMap<String, Vec<String>>,
    /// Plain-language description of the inclusion criteria for imputation prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inclusion_description: Option<String>,
    #[serde(default)]
    pub keywords: Keywords,
}

impl StudyDesign {
    /// Returns the design unchanged when every invariant holds, otherwise every violation.
    pub fn validate(self) -> Result<StudyDesign, Vec<StudyError>> {
        let mut errors = self.covariates.validate();
        if self.treatments.len() != 2 {
            errors.push(StudyError::BinaryTreatments(self.treatments.len()));
        } else if self.treatments[0] == self.treatments[1] {
            errors.push(StudyError::DuplicateTreatment);
        }
        if self.outcome_options.len() != 2 {
            errors.push(StudyError::BinaryOutcome(self.outcome_options.len()));
        }
        for (name, labels) in &self.inclusion {
            match self.covariates.dims.iter().find(|d| &d.name == name) {
                None => errors.push(StudyError::UnknownInclusionDimension(name.clone())),
                Some(dim) => {
                    if labels.is_empty() {
                        errors.push(StudyError::EmptyInclusion(name.clone()));
                    }
                    for label in labels {
                        if dim.category_index(label).is_none() {
                            errors.push(StudyError::UnknownInclusionCategory {
                                dim: name.clone(),
                                label: label.clone(),
                            });
                        }
                    }
                }
            }
        }
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(errors)
        }
    }

    pub fn inclusion_box(&self) -> InclusionBox {
        let allowed = self
            .covariates
            .dims
            .iter()
            .map(|dim| {
                self.inclusion.get(&dim.name).map(|labels| {
                    let mut set: Vec<usize> =
                        labels.iter().filter_map(|l| dim.category_index(l)).collect();
                    set.sort_unstable();
                    set.dedup();
                    set
                })
            })
            .collect();
        InclusionBox { allowed }
    }

    pub fn treatment_index(&self, label: &str) -> Option<u8> {
        self.treatments.iter().position(|t| t.eq_ignore_ascii_case(label)).map(|i| i as u8)
    }

    pub fn outcome_index(&self, label: &str) -> Option<u8> {
        self.outcome_options.iter().position(|o| o.eq_ignore_ascii_case(label)).map(|i| i as u8)
    }
}

/// One natural-language record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub source: String,
    #[serde(default)]
    pub title: Option<String>,
    pub created: DateTime<Utc>,
    pub body: String,
    #[serde(default)]
    pub author_replies: Vec<String>,
}

/// Covariate values with a per-dimension known mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CovariateVector {
    pub values: Vec<usize>,
    pub known: Vec<bool>,
}

impl CovariateVector {
    pub fn known(values: Vec<usize>) -> Self {
        let known = vec![true; values.len()];
        CovariateVector { values, known }
    }

    pub fn unknown(n_dims: usize) -> Self {
        CovariateVector { values: vec![0; n_dims], known: vec![false; n_dims] }
    }

    pub fn get(&self, dim: usize) -> Option<usize> {
        self.known[dim].then(|| self.values[dim])
    }

    pub fn set(&mut self, dim: usize, value: usize) {
        self.values[dim] = value;
        self.known[dim] = true;
    }

    pub fn is_fully_known(&self) -> bool {
        self.known.iter().all(|&k| k)
    }

    pub fn n_known(&self) -> usize {
        self.known.iter().filter(|&&k| k).count()
    }
}

impl fmt::Display for CovariateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for d in 0..self.values.len() {
            if d > 0 {
                write!(f, ",")?;
            }
            match self.get(d) {
                Some(v) => write!(f, "{v}")?,
                None => write!(f, "?")?,
            }
        }
        write!(f, ")")
    }
}

/// A fully known tabular observation.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularUnit {
    pub x: CovariateVector,
    pub t: u8,
    pub y: u8,
    pub weight: f64,
}

impl TabularUnit {
    pub fn new(x: CovariateVector, t: u8, y: u8) -> Self {
        TabularUnit { x, t, y, weight: 1.0 }
    }
}

fn check_probability(p: f64) -> Result<(), StudyError> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(StudyError::InvalidProbability(p));
    }
    Ok(())
}

/// P(T=t, Y=y | report, x) for the four (t, y) cells, indexed `p[t][y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSlice {
    pub report_id: String,
    pub x: CovariateVector,
    p: [[f64; 2]; 2],
}

impl ConditionalSlice {
    pub fn new(report_id: impl Into<String>, x: CovariateVector, p: [[f64; 2]; 2]) -> Result<Self, StudyError> {
        let mut total = 0.0;
        for row in &p {
            for &v in row {
                check_probability(v)?;
                total += v;
            }
        }
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(StudyError::NotNormalized(total));
        }
        Ok(ConditionalSlice { report_id: report_id.into(), x, p })
    }

    /// Point mass at an observed (t, y).
    pub fn point_mass(report_id: impl Into<String>, x: CovariateVector, t: u8, y: u8) -> Self {
        let mut p = [[0.0; 2]; 2];
        p[t as usize][y as usize] = 1.0;
        ConditionalSlice { report_id: report_id.into(), x, p }
    }

    pub fn cells(&self) -> &[[f64; 2]; 2] {
        &self.p
    }

    pub fn p(&self, t: u8, y: u8) -> f64 {
        self.p[t as usize][y as usize]
    }

    /// P(T=1 | report, x).
    pub fn treated_mass(&self) -> f64 {
        self.p[1][0] + self.p[1][1]
    }

    /// P(Y=1 | report, x, T=t), or `None` when P(T=t) is zero.
    pub fn outcome_given(&self, t: u8) -> Option<f64> {
        let row = self.p[t as usize];
        let mass = row[0] + row[1];
        (mass > 0.0).then(|| row[1] / mass)
    }
}

/// P(X=x, T=t, Y=y | report) over the full stratum product space.
///
/// Cells are laid out stratum-major: `stratum * 4 + t * 2 + y`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    p: Vec<f64>,
}

impl JointTable {
    pub fn new(p: Vec<f64>, n_strata: usize) -> Result<Self, StudyError> {
        if p.len() != n_strata * 4 {
            return Err(StudyError::JointShape { expected: n_strata * 4, got: p.len() });
        }
        for &v in &p {
            check_probability(v)?;
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(StudyError::NotNormalized(total));
        }
        Ok(JointTable { p })
    }

    /// Builds a table from unnormalized nonnegative masses.
    pub fn from_masses(mut masses: Vec<f64>, n_strata: usize) -> Result<Self, StudyError> {
        let total: f64 = masses.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(StudyError::NotNormalized(total));
        }
        masses.iter_mut().for_each(|m| *m /= total);
        JointTable::new(masses, n_strata)
    }

    pub fn point_mass(n_strata: usize, stratum: usize, t: u8, y: u8) -> Self {
        let mut p = vec![0.0; n_strata * 4];
        p[Self::cell_index(stratum, t, y)] = 1.0;
        JointTable { p }
    }

    pub fn cell_index(stratum: usize, t: u8, y: u8) -> usize {
        stratum * 4 + (t as usize) * 2 + y as usize
    }

    pub fn n_strata(&self) -> usize {
        self.p.len() / 4
    }

    pub fn cells(&self) -> &[f64] {
        &self.p
    }

    pub fn get(&self, stratum: usize, t: u8, y: u8) -> f64 {
        self.p[Self::cell_index(stratum, t, y)]
    }

    pub fn stratum_mass(&self, stratum: usize) -> f64 {
        self.p[stratum * 4..stratum * 4 + 4].iter().sum()
    }

    pub fn x_marginal(&self) -> Vec<f64> {
        (0..self.n_strata()).map(|s| self.stratum_mass(s)).collect()
    }

    /// P(T, Y | report, X = stratum), or `None` if the stratum has no mass.
    pub fn slice_at(&self, stratum: usize) -> Option<[[f64; 2]; 2]> {
        let mass = self.stratum_mass(stratum);
        if mass <= 0.0 {
            return None;
        }
        let c = &self.p[stratum * 4..stratum * 4 + 4];
        Some([[c[0] / mass, c[1] / mass], [c[2] / mass, c[3] / mass]])
    }

    /// Conditions the table on the strata accepted by `keep`.
    pub fn restrict(&self, keep: impl Fn(usize) -> bool) -> Option<JointTable> {
        let n = self.n_strata();
        let masses: Vec<f64> = (0..n)
            .flat_map(|s| {
                let k = keep(s);
                self.p[s * 4..s * 4 + 4].iter().map(move |&v| if k { v } else { 0.0 })
            })
            .collect();
        JointTable::from_masses(masses, n).ok()
    }

    /// Element-wise mean of several tables of the same shape.
    pub fn average(tables: &[JointTable]) -> Option<JointTable> {
        let first = tables.first()?;
        let mut acc = vec![0.0; first.p.len()];
        for table in tables {
            for (a, v) in acc.iter_mut().zip(&table.p) {
                *a += v;
            }
        }
        let n = tables.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Some(JointTable { p: acc })
    }
}
