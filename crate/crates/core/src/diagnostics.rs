//! Evaluation: KL divergence, covariate balance, RMSE, rank correlation,
//! convergence curves over corpus size, and the oracle harness that runs the
//! full pipeline on a synthetic corpus.

use std::io;
use std::path::Path;

use log::warn;
use plotters::prelude::*;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::estimators::{
    natural_full, run_estimator, EstimateError, EstimateSettings, EstimationInputs, EstimatorKind, InclusionSlice,
    PropensityTable,
};
use crate::pipeline::{self, FilterDecision, StageConfig};
use crate::providers::{OracleProvider, Provider, ProviderError};
use crate::study::{ConditionalSlice, CovariateSchema, JointTable, Report, TabularUnit};
use crate::synth::{RenderOptions, RenderedReport, SynthError, SyntheticStudy};

/// Floor applied to zero entries of the second argument of a KL divergence.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no data")]
    Empty,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("plot: {0}")]
    Plot(String),
}

/// Σ p ln(p / q) in nats, and whether any `q` had to be floored.
/// Terms with `p = 0` contribute nothing.
pub fn kl_divergence_flagged(p: &[f64], q: &[f64]) -> Result<(f64, bool), DiagnosticsError> {
    if p.len() != q.len() {
        return Err(DiagnosticsError::LengthMismatch(p.len(), q.len()));
    }
    let mut floored = false;
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a <= 0.0 {
            continue;
        }
        let b = if b <= 0.0 {
            floored = true;
            KL_FLOOR
        } else {
            b
        };
        total += a * (a / b).ln();
    }
    // Rounding can leave tiny negatives for p ≈ q.
    Ok((total.max(0.0), floored))
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, DiagnosticsError> {
    let (value, floored) = kl_divergence_flagged(p, q)?;
    if floored {
        warn!("KL divergence: second distribution floored at {KL_FLOOR} where the first has mass");
    }
    Ok(value)
}

/// Σ_x px(x) · KL(Bernoulli(e(x)) ‖ Bernoulli(ê(x))).
pub fn propensity_kl(px: &[f64], e_true: &[f64], e_hat: &[f64]) -> Result<f64, DiagnosticsError> {
    if px.len() != e_true.len() || px.len() != e_hat.len() {
        return Err(DiagnosticsError::LengthMismatch(px.len(), e_hat.len()));
    }
    let mut total = 0.0;
    for ((&w, &e), &h) in px.iter().zip(e_true).zip(e_hat) {
        let (kl, _) = kl_divergence_flagged(&[e, 1.0 - e], &[h, 1.0 - h])?;
        total += w * kl;
    }
    Ok(total)
}

fn weighted_moments(values: &[(f64, f64)]) -> Option<(f64, f64)> {
    let total: f64 = values.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return None;
    }
    let mean = values.iter().map(|(v, w)| v * w).sum::<f64>() / total;
    let var = values.iter().map(|(v, w)| w * (v - mean).powi(2)).sum::<f64>() / total;
    Some((mean, var))
}

/// Standardized mean difference between two cohorts of `(value, weight)`
/// pairs, using weighted population variances. `Ok(None)` when the pooled
/// variance is zero.
pub fn smd(treated: &[(f64, f64)], control: &[(f64, f64)]) -> Result<Option<f64>, DiagnosticsError> {
    if treated.iter().chain(control).any(|(_, w)| *w < 0.0 || !w.is_finite()) {
        return Err(DiagnosticsError::Config("weights must be finite and nonnegative".into()));
    }
    let (Some((m1, v1)), Some((m0, v0))) = (weighted_moments(treated), weighted_moments(control)) else {
        return Err(DiagnosticsError::Empty);
    };
    let pooled = 0.5 * (v1 + v0);
    if pooled <= 0.0 {
        return Ok(None);
    }
    Ok(Some((m1 - m0) / pooled.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub covariate: String,
    pub level: String,
    pub unweighted: Option<f64>,
    pub weighted: Option<f64>,
}

/// Per-level SMDs before and after inverse-propensity weighting. Binary
/// covariates get one row (indicator of the second category); others get
/// one row per category.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
}

impl BalanceReport {
    pub fn max_abs_unweighted(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.unweighted).map(f64::abs).reduce(f64::max)
    }

    pub fn max_abs_weighted(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.weighted).map(f64::abs).reduce(f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DiagnosticsError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["covariate", "level", "smd_unweighted", "smd_weighted"])?;
        for r in &self.rows {
            w.write_record([r.covariate.clone(), r.level.clone(), fmt_opt(r.unweighted), fmt_opt(r.weighted)])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "undefined".to_string())
}

/// Each member is `(stratum, treated membership, control membership)`;
/// memberships are 0/1 for observed assignments or probabilities for soft ones.
fn balance_from_members(
    members: &[(usize, f64, f64)],
    schema: &CovariateSchema,
    propensity: &PropensityTable,
) -> Result<BalanceReport, DiagnosticsError> {
    if members.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let decoded: Vec<Vec<usize>> = (0..schema.n_strata()).map(|s| schema.decode(s).values).collect();
    let mut rows = Vec::new();
    for (d, dim) in schema.dims.iter().enumerate() {
        let levels: Vec<usize> = if dim.categories.len() == 2 { vec![1] } else { (0..dim.categories.len()).collect() };
        for level in levels {
            let mut cohorts = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
            for &(s, w1, w0) in members {
                let v = f64::from(u8::from(decoded[s][d] == level));
                let e = propensity.get(s);
                cohorts[0].push((v, w1));
                cohorts[1].push((v, w0));
                cohorts[2].push((v, w1 / e));
                cohorts[3].push((v, w0 / (1.0 - e)));
            }
            rows.push(BalanceRow {
                covariate: dim.name.clone(),
                level: dim.categories[level].clone(),
                unweighted: smd(&cohorts[0], &cohorts[1])?,
                weighted: smd(&cohorts[2], &cohorts[3])?,
            });
        }
    }
    Ok(BalanceReport { rows })
}

/// Balance of an observed table, weighting by 1/ê and 1/(1 - ê).
pub fn balance_report(
    units: &[TabularUnit],
    schema: &CovariateSchema,
    propensity: &PropensityTable,
) -> Result<BalanceReport, DiagnosticsError> {
    let members = units
        .iter()
        .map(|u| {
            let s = schema.stratum_index(&u.x).map_err(EstimateError::from)?;
            let t = f64::from(u.t);
            Ok((s, t * u.weight, (1.0 - t) * u.weight))
        })
        .collect::<Result<Vec<_>, DiagnosticsError>>()?;
    balance_from_members(&members, schema, propensity)
}

/// Balance when treatment is known only as P(T | report, x): each report
/// belongs to both cohorts in proportion to its treatment probabilities.
pub fn balance_from_slices(
    slices: &[ConditionalSlice],
    schema: &CovariateSchema,
    propensity: &PropensityTable,
) -> Result<BalanceReport, DiagnosticsError> {
    let members = slices
        .iter()
        .map(|sl| {
            let s = schema.stratum_index(&sl.x).map_err(EstimateError::from)?;
            let t = sl.treated_mass();
            Ok((s, t, 1.0 - t))
        })
        .collect::<Result<Vec<_>, DiagnosticsError>>()?;
    balance_from_members(&members, schema, propensity)
}

pub fn rmse(predictions: &[f64], truth: f64) -> Result<f64, DiagnosticsError> {
    if predictions.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let mse = predictions.iter().map(|p| (p - truth).powi(2)).sum::<f64>() / predictions.len() as f64;
    Ok(mse.sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>, DiagnosticsError> {
    if x.len() != y.len() {
        return Err(DiagnosticsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Ok(None);
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (vx * vy).sqrt()))
}

/// Everything the pipeline produces for one oracle corpus.
#[derive(Debug, Clone)]
pub struct OracleCorpus {
    pub rendered: Vec<RenderedReport>,
    pub kept: Vec<Report>,
    pub decisions: Vec<FilterDecision>,
    /// Imputed covariates with extracted treatment and outcome.
    pub units: Vec<TabularUnit>,
    pub slices: Vec<ConditionalSlice>,
    pub inclusion_slices: Vec<InclusionSlice>,
    /// Per-report joints, present when requested.
    pub joints: Option<Vec<JointTable>>,
}

impl OracleCorpus {
    pub fn inputs(&self) -> EstimationInputs<'_> {
        EstimationInputs {
            units: Some(&self.units),
            slices: Some(&self.slices),
            joints: self.joints.as_deref(),
            inclusion: Some(&self.inclusion_slices),
        }
    }

    /// Ground-truth units of the rendered corpus.
    pub fn truth_units(&self) -> Vec<TabularUnit> {
        self.rendered
            .iter()
            .map(|r| TabularUnit::new(crate::study::CovariateVector::known(r.truth.x.clone()), r.truth.t, r.truth.y))
            .collect()
    }
}

/// Renders a corpus and runs filters, imputation and scoring against
/// `provider` (typically an oracle for the same study).
pub fn run_corpus(
    study: &SyntheticStudy,
    provider: &dyn Provider,
    n: usize,
    render: &RenderOptions,
    config: &StageConfig,
    with_joints: bool,
) -> Result<OracleCorpus, DiagnosticsError> {
    let rendered = study.generate(n, render, config.seed)?;
    let reports: Vec<Report> = rendered.iter().map(|r| r.report.clone()).collect();
    let design = &study.design;
    let filtered = pipeline::run_filters(provider, &reports, design, config);
    let (covariates, mut decisions) = pipeline::run_imputation(provider, &filtered.kept, &filtered.inclusion, design, config);
    let (slices, scoring) = pipeline::run_scoring(provider, &filtered.kept, &covariates, design, config);
    decisions.extend(scoring);
    let known: std::collections::BTreeMap<&str, &Vec<bool>> =
        filtered.inclusion.iter().map(|c| (c.report_id.as_str(), &c.known)).collect();
    let mut units = Vec::with_capacity(slices.len());
    let mut inclusion_slices = Vec::with_capacity(slices.len());
    for slice in &slices {
        if let Some(&(t, y)) = filtered.observed.get(&slice.report_id) {
            units.push(TabularUnit::new(slice.x.clone(), t, y));
        }
        let mask = known.get(slice.report_id.as_str()).map(|k| (*k).clone()).unwrap_or_else(|| vec![false; slice.x.values.len()]);
        inclusion_slices.push(InclusionSlice { slice: slice.clone(), known: mask });
    }
    let joints = if with_joints {
        let (joints, failed) = pipeline::run_joints(provider, &filtered.kept, design, config);
        decisions.extend(failed);
        Some(joints.into_iter().map(|(_, j)| j).collect())
    } else {
        None
    };
    let mut all_decisions = filtered.decisions;
    all_decisions.extend(decisions);
    all_decisions.sort_by(|a, b| a.report_id.cmp(&b.report_id).then(a.stage.cmp(&b.stage)));
    Ok(OracleCorpus {
        rendered,
        kept: filtered.kept,
        decisions: all_decisions,
        units,
        slices,
        inclusion_slices,
        joints,
    })
}

/// [`run_corpus`] with the study's own oracle.
pub fn oracle_corpus(
    study: &SyntheticStudy,
    n: usize,
    render: &RenderOptions,
    config: &StageConfig,
    with_joints: bool,
) -> Result<OracleCorpus, DiagnosticsError> {
    let oracle = OracleProvider::new(study.clone());
    run_corpus(study, &oracle, n, render, config, with_joints)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergencePoint {
    pub n: usize,
    pub kl_joint: f64,
    pub kl_propensity: f64,
    pub abs_ate_error: f64,
}

/// Seed-averaged error measures by corpus size.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ConvergenceCurve {
    pub estimator: String,
    pub points: Vec<ConvergencePoint>,
}

impl ConvergenceCurve {
    /// Spearman correlation of each measure with n: (kl_joint, kl_propensity, abs_ate_error).
    pub fn trends(&self) -> Result<[Option<f64>; 3], DiagnosticsError> {
        let n: Vec<f64> = self.points.iter().map(|p| p.n as f64).collect();
        let column = |f: fn(&ConvergencePoint) -> f64| self.points.iter().map(f).collect::<Vec<_>>();
        Ok([
            spearman(&n, &column(|p| p.kl_joint))?,
            spearman(&n, &column(|p| p.kl_propensity))?,
            spearman(&n, &column(|p| p.abs_ate_error))?,
        ])
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DiagnosticsError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["estimator", "n", "kl_joint", "kl_propensity", "abs_ate_error"])?;
        for p in &self.points {
            w.write_record([
                self.estimator.clone(),
                p.n.to_string(),
                format!("{:.9}", p.kl_joint),
                format!("{:.9}", p.kl_propensity),
                format!("{:.9}", p.abs_ate_error),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceConfig {
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub render: RenderOptions,
    pub estimator: EstimatorKind,
    pub epsilon: f64,
}

/// Runs the oracle pipeline for every (n, seed) cell and averages over seeds.
///
/// The joint error compares the true joint with the average of the
/// per-report joints; the propensity error compares true e with the ê
/// implied by that average.
pub fn convergence_study(study: &SyntheticStudy, config: &ConvergenceConfig) -> Result<ConvergenceCurve, DiagnosticsError> {
    if config.n_grid.is_empty() || config.n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DiagnosticsError::Config("n grid must be non-empty and strictly increasing".into()));
    }
    if config.seeds.len() < 3 {
        return Err(DiagnosticsError::Config("at least three seeds required".into()));
    }
    let truth = study.dgp.joint();
    let tau = study.dgp.true_ate();
    if !config.estimator.is_natural() {
        return Err(DiagnosticsError::Config(format!("{} does not read report distributions", config.estimator.name())));
    }
    let cells: Vec<(usize, u64)> =
        config.n_grid.iter().flat_map(|&n| config.seeds.iter().map(move |&s| (n, s))).collect();
    let results: Vec<Result<(usize, [f64; 3]), DiagnosticsError>> = cells
        .par_iter()
        .map(|&(n, seed)| {
            let stage = StageConfig { seed: seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ n as u64, ..StageConfig::default() };
            let corpus = oracle_corpus(study, n, &config.render, &stage, true)?;
            let joints = corpus.joints.as_deref().ok_or(DiagnosticsError::Empty)?;
            let pooled = JointTable::average(joints).ok_or(DiagnosticsError::Empty)?;
            let kl_joint = kl_divergence_flagged(truth.cells(), pooled.cells())?.0;
            let full = natural_full(joints, &study.dgp.schema, config.epsilon)?;
            let kl_propensity = propensity_kl(&study.dgp.px, &study.dgp.e, full.propensity.values())?;
            let settings = EstimateSettings {
                epsilon: config.epsilon,
                seed: stage.seed,
                inclusion: study.design.inclusion_box(),
                bootstrap: 0,
            };
            let estimate = run_estimator(config.estimator, &corpus.inputs(), &study.dgp.schema, &settings)?;
            Ok((n, [kl_joint, kl_propensity, (estimate.value - tau).abs()]))
        })
        .collect();
    let mut points = Vec::new();
    for &n in &config.n_grid {
        let mut sums = [0.0; 3];
        let mut count = 0.0;
        for r in &results {
            let (m, values) = r.as_ref().map_err(|e| DiagnosticsError::Config(e.to_string()))?;
            if *m == n {
                for k in 0..3 {
                    sums[k] += values[k];
                }
                count += 1.0;
            }
        }
        points.push(ConvergencePoint {
            n,
            kl_joint: sums[0] / count,
            kl_propensity: sums[1] / count,
            abs_ate_error: sums[2] / count,
        });
    }
    Ok(ConvergenceCurve { estimator: config.estimator.name().to_string(), points })
}

fn plot_err<E: std::fmt::Display>(e: E) -> DiagnosticsError {
    DiagnosticsError::Plot(e.to_string())
}

/// Line chart of the three convergence measures against log2(n).
pub fn plot_convergence(curve: &ConvergenceCurve, path: &Path) -> Result<(), DiagnosticsError> {
    if curve.points.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let xs: Vec<f64> = curve.points.iter().map(|p| (p.n as f64).log2()).collect();
    let series: [(&str, Vec<f64>, RGBColor); 3] = [
        ("kl_joint", curve.points.iter().map(|p| p.kl_joint).collect(), RED),
        ("kl_propensity", curve.points.iter().map(|p| p.kl_propensity).collect(), BLUE),
        ("abs_ate_error", curve.points.iter().map(|p| p.abs_ate_error).collect(), BLACK),
    ];
    let y_max = series.iter().flat_map(|s| s.1.iter().copied()).fold(0.0, f64::max).max(1e-9) * 1.1;
    let (x_min, x_max) = (xs[0], xs[xs.len() - 1].max(xs[0] + 1.0));
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("convergence ({})", curve.estimator), ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x_min..x_max, 0.0..y_max)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("log2(n)").y_desc("error").draw().map_err(plot_err)?;
    for (name, ys, color) in series {
        chart
            .draw_series(LineSeries::new(xs.iter().copied().zip(ys), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Paired bars of |SMD| per covariate level, unweighted and weighted.
pub fn plot_balance(report: &BalanceReport, path: &Path) -> Result<(), DiagnosticsError> {
    if report.rows.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let n = report.rows.len();
    let y_max = report.max_abs_unweighted().unwrap_or(0.0).max(report.max_abs_weighted().unwrap_or(0.0)).max(0.1) * 1.1;
    let root = SVGBackend::new(path, (200 + 80 * n as u32, 450)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let labels: Vec<String> = report.rows.iter().map(|r| format!("{}={}", r.covariate, r.level)).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption("covariate balance (|SMD|)", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..n as f64, 0.0..y_max)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| labels.get(x.floor() as usize).cloned().unwrap_or_default())
        .y_desc("|SMD|")
        .draw()
        .map_err(plot_err)?;
    let bars = |offset: f64, pick: fn(&BalanceRow) -> Option<f64>, color: RGBColor| {
        report.rows.iter().enumerate().map(move |(i, r)| {
            let v = pick(r).map(f64::abs).unwrap_or(0.0);
            let x0 = i as f64 + offset;
            Rectangle::new([(x0, 0.0), (x0 + 0.35, v)], color.filled())
        })
    };
    chart
        .draw_series(bars(0.1, |r| r.unweighted, RGBColor(200, 80, 80)))
        .map_err(plot_err)?
        .label("unweighted")
        .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], RGBColor(200, 80, 80).filled()));
    chart
        .draw_series(bars(0.5, |r| r.weighted, RGBColor(60, 90, 200)))
        .map_err(plot_err)?
        .label("weighted")
        .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], RGBColor(60, 90, 200).filled()));
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
