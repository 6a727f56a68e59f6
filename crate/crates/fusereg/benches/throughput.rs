//! Parallel-vs-sequential throughput on the crate's data-parallel loops:
//! simulation replicates, bootstrap resamples, and row-wise moment sums.
//! The sequential path is the same code the `--no-default-features` build
//! runs; results are bit-identical between the two modes by construction.

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DVector;
use std::hint::black_box;

use fusereg::design::parse_terms;
use fusereg::estimating::{u_rows, EstimatorKind, GSpec, SolveOptions};
use fusereg::exec::set_sequential;
use fusereg::inference::{bootstrap_covariance, AnalysisSpec, GDirective};
use fusereg::nuisance::{fit_imputation, fit_propensity, OutcomeFamily, OutcomeModel};
use fusereg::simharness::{
    generate_dataset_stream, run_scenario, DgpParams, Scenario, ScenarioConfig,
};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn bench_scenario(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_scenario_n400_reps16");
    group.sample_size(10);
    for (name, seq) in modes() {
        group.bench_function(name, |b| {
            set_sequential(seq);
            let cfg = ScenarioConfig::new(Scenario::I, 400, 16, 99);
            b.iter(|| black_box(run_scenario(&cfg).unwrap()));
            set_sequential(false);
        });
    }
    group.finish();
}

fn bench_moment_rows(c: &mut Criterion) {
    let ds = generate_dataset_stream(&DgpParams::reference(), 20_000, 3, 0).unwrap();
    let prop = fit_propensity(&ds, &parse_terms(&["1", "A", "C"]).unwrap()).unwrap();
    let imp = fit_imputation(&ds, &parse_terms(&["1", "A", "C", "A*C"]).unwrap()).unwrap();
    let g = GSpec::y_times_terms(parse_terms(&["1", "A", "C", "A*C"]).unwrap());
    let model = OutcomeModel::new(
        OutcomeFamily::LinearNormal,
        parse_terms(&["1", "A", "C"]).unwrap(),
        DVector::from_row_slice(&[0.5, -0.5, 1.0, 1.5]),
        None,
    )
    .unwrap();

    let mut group = c.benchmark_group("dr_moment_rows_n20000");
    for (name, seq) in modes() {
        group.bench_function(name, |b| {
            set_sequential(seq);
            b.iter(|| {
                black_box(
                    u_rows(&ds, EstimatorKind::Dr, &g, &model, Some(&prop), Some(&imp)).unwrap(),
                )
            });
            set_sequential(false);
        });
    }
    group.finish();
}

fn bench_bootstrap(c: &mut Criterion) {
    let ds = generate_dataset_stream(&DgpParams::reference(), 500, 4, 0).unwrap();
    let spec = AnalysisSpec {
        kind: EstimatorKind::Dr,
        family: OutcomeFamily::LinearNormal,
        outcome_v_terms: parse_terms(&["1", "A", "C"]).unwrap(),
        propensity_terms: Some(parse_terms(&["1", "A", "C"]).unwrap()),
        imputation_terms: Some(parse_terms(&["1", "A", "C", "A*C"]).unwrap()),
        g: GDirective::Terms(parse_terms(&["1", "A", "C", "A*C"]).unwrap()),
        solve: SolveOptions::default(),
        ci_level: 0.95,
        estimate_sigma_y: false,
    };
    let mut group = c.benchmark_group("bootstrap_b50_n500");
    group.sample_size(10);
    for (name, seq) in modes() {
        group.bench_function(name, |b| {
            set_sequential(seq);
            b.iter(|| black_box(bootstrap_covariance(&ds, &spec, 50, 17).unwrap()));
            set_sequential(false);
        });
    }
    group.finish();
}

criterion_group!(benches, bench_scenario, bench_moment_rows, bench_bootstrap);
criterion_main!(benches);
