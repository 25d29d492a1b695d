use criterion::{black_box, criterion_group, criterion_main, Criterion};
use serde_json::json;

use textate_core::diagnostics::{self, OracleCorpus};
use textate_core::estimators::{natural_full, natural_ipw, natural_oi, sample_treatments};
use textate_core::pipeline::StageConfig;
use textate_core::synth::{DgpTables, RenderOptions, SyntheticStudy};
use textate_core::StudyDesign;

fn toy_corpus(n: usize) -> (SyntheticStudy, OracleCorpus) {
    let design: StudyDesign = serde_json::from_value(json!({
        "treatments": ["Drug B", "Drug A"],
        "outcome_question": "Did the symptoms improve?",
        "covariates": [{ "name": "severity", "categories": ["mild", "severe"] }],
    }))
    .unwrap();
    let tables = DgpTables { px: vec![0.5, 0.5], e: vec![0.3, 0.7], py1: vec![0.8, 0.6], py0: vec![0.5, 0.2] };
    let study = SyntheticStudy::new(design.validate().unwrap(), tables).unwrap();
    let corpus =
        diagnostics::oracle_corpus(&study, n, &RenderOptions::uniform(1, 0.3), &StageConfig::default(), true).unwrap();
    (study, corpus)
}

fn estimators(c: &mut Criterion) {
    let (study, corpus) = toy_corpus(20_000);
    let schema = &study.design.covariates;
    let joints = corpus.joints.as_deref().unwrap();
    c.bench_function("n_ipw/20k", |b| b.iter(|| natural_ipw(black_box(&corpus.slices), schema, 0.01).unwrap()));
    c.bench_function("n_oi/20k", |b| {
        b.iter(|| natural_oi(&sample_treatments(black_box(&corpus.slices), 0), schema).unwrap())
    });
    c.bench_function("n_full/20k", |b| b.iter(|| natural_full(black_box(joints), schema, 0.01).unwrap()));
}

fn pipeline(c: &mut Criterion) {
    let mut group = c.benchmark_group("oracle_corpus");
    group.sample_size(10);
    group.bench_function("2k", |b| b.iter(|| toy_corpus(black_box(2_000))));
    group.finish();
}

criterion_group!(benches, estimators, pipeline);
criterion_main!(benches);
