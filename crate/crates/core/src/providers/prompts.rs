//! Prompt builders for each pipeline question.
//!
//! Every prompt embeds the report the same way, so text providers see a
//! stable layout. Wording is plain and generic; study-specific text comes
//! from the design (questions, options, inclusion description).

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::study::{CovariateVector, Report, StudyDesign};

/// Question asked of the treatment in conditional prompts.
pub const TREATMENT_QUESTION: &str = "Which treatment did the author take?";

pub fn report_block(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "## Source\n{}", report.source);
    if let Some(title) = &report.title {
        let _ = writeln!(s, "## Title\n{title}");
    }
    let _ = writeln!(s, "## Created\n{}", report.created.format("%Y-%m-%d"));
    let _ = writeln!(s, "## Report\n{}", report.body);
    if !report.author_replies.is_empty() {
        let _ = writeln!(s, "## Replies by the author");
        for reply in &report.author_replies {
            let _ = writeln!(s, "- {reply}");
        }
    }
    s
}

fn options_line(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}) {o}", (b'a' + (i % 26) as u8) as char))
        .collect::<Vec<_>>()
        .join(" ")
}

fn known_answers(design: &StudyDesign, x: &CovariateVector) -> String {
    let mut s = String::new();
    for (d, dim) in design.covariates.dims.iter().enumerate() {
        if let Some(v) = x.get(d) {
            let _ = writeln!(s, "Q: {} A: {}.", dim.question(), dim.categories[v]);
        }
    }
    s
}

pub fn relevance_prompt(report: &Report, design: &StudyDesign) -> String {
    format!(
        "Decide whether the report below describes the author's own experience with one of these \
         treatments: {}. It is relevant if it could answer: {}\n\n{}\nAnswer Yes or No only.\n",
        design.treatments.join(", "),
        design.outcome_question,
        report_block(report)
    )
}

fn schema_lines(schema: &BTreeMap<String, Vec<String>>) -> String {
    let mut s = String::new();
    for (field, allowed) in schema {
        let _ = writeln!(s, "\"{field}\": one of {:?}", allowed);
    }
    s
}

/// Extraction of the treatment and outcome fields named in `schema`.
pub fn treatment_outcome_prompt(report: &Report, schema: &BTreeMap<String, Vec<String>>) -> String {
    format!(
        "Read the report and return a JSON object with exactly these keys. Use \"Unknown\" when the \
         report does not say. Weight changes are negative for loss.\n\n{}\n{}\nReturn only JSON.\n",
        schema_lines(schema),
        report_block(report)
    )
}

/// Covariates as stated; `Unknown` is permitted.
pub fn covariate_prompt_extract(report: &Report, design: &StudyDesign, schema: &BTreeMap<String, Vec<String>>) -> String {
    let mut questions = String::new();
    for dim in &design.covariates.dims {
        let _ = writeln!(questions, "{}: {}", dim.name, dim.question());
    }
    format!(
        "Fill in each key from the report, choosing only from the listed values. Use \"Unknown\" \
         when the report gives no basis for a value.\n\n{questions}\n{}\n{}\nReturn only JSON.\n",
        schema_lines(schema),
        report_block(report)
    )
}

/// Full covariate profile consistent with the inclusion criteria; no `Unknown`.
pub fn impute_prompt(report: &Report, design: &StudyDesign, known: &CovariateVector) -> String {
    let criteria = design.inclusion_description.clone().unwrap_or_else(|| {
        design
            .inclusion
            .iter()
            .map(|(k, v)| format!("{k} is one of {}", v.join(", ")))
            .collect::<Vec<_>>()
            .join("; ")
    });
    let mut fields = String::new();
    for (d, dim) in design.covariates.dims.iter().enumerate() {
        let _ = writeln!(fields, "{}: {} Options: {}", dim.name, dim.question(), options_line(&dim.categories));
        if let Some(v) = known.get(d) {
            let _ = writeln!(fields, "  (already known: {})", dim.categories[v]);
        }
    }
    format!(
        "Build a plausible profile of the author. The author meets these criteria: {criteria}.\n\
         Give a value for every field below; \"Unknown\" is not allowed.\n\n{fields}\n{}\nReturn only JSON.\n",
        report_block(report)
    )
}

/// Scores the categories of covariate `dim` given the known entries of `given`.
pub fn covariate_prompt(report: &Report, design: &StudyDesign, given: &CovariateVector, dim: usize) -> String {
    let d = &design.covariates.dims[dim];
    format!(
        "Answer the multiple choice question about the report.\n\n{}\n## Known answers\n{}\n## Question\nQ: {}\nOptions: {}\nA:",
        report_block(report),
        known_answers(design, given),
        d.question(),
        options_line(&d.categories)
    )
}

/// Treatment question when `t` is `None`; outcome question after answering `t` otherwise.
pub fn conditional_prompt(report: &Report, design: &StudyDesign, x: &CovariateVector, t: Option<u8>) -> String {
    let mut s = format!(
        "Answer the multiple choice questions about the report.\n\n{}\n## Known answers\n{}\n## Questions\nQ: {TREATMENT_QUESTION}\nOptions: {}\nA:",
        report_block(report),
        known_answers(design, x),
        options_line(&design.treatments)
    );
    if let Some(t) = t {
        let _ = write!(
            s,
            " {}\n\nQ: {}\nOptions: {}\nA:",
            design.treatments[t as usize],
            design.outcome_question,
            options_line(&design.outcome_options)
        );
    }
    s
}

/// The four (treatment, outcome) answers, treatment-major.
pub fn joint_options(design: &StudyDesign) -> Vec<String> {
    let mut out = Vec::with_capacity(4);
    for t in &design.treatments {
        for y in &design.outcome_options {
            out.push(format!("{t}; {y}"));
        }
    }
    out
}

pub fn joint_prompt(report: &Report, design: &StudyDesign, x: &CovariateVector) -> String {
    format!(
        "Answer the multiple choice question about the report.\n\n{}\n## Known answers\n{}\n## Question\nQ: {TREATMENT_QUESTION} {}\nOptions: {}\nA:",
        report_block(report),
        known_answers(design, x),
        design.outcome_question,
        options_line(&joint_options(design))
    )
}
