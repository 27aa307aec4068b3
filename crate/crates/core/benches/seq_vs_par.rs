//! Sequential vs rayon execution of the data-parallel stages.
//!
//! `cargo bench -p das-eval --bench seq_vs_par`. Built without the `parallel`
//! feature only the sequential rows are measured.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use das_eval::bisg::{infer_with, BisgSettings, NameParts};
use das_eval::dp_das::{apply_dp_das_with, PrivacyBudget};
use das_eval::par::Execution;
use das_eval::pipeline::PolicySettings;
use das_eval::policy_eval::generate_plans_with;
use das_eval::risk::{mechanism_bound_check, standard_tiny_instances, ReleasedTables};
use das_eval::synth_pop::{extract_voter_file, generate_population, GenerationConfig};
use das_eval::tabulate::tabulate;

fn modes() -> Vec<(&'static str, Execution)> {
    vec![
        ("sequential", Execution::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", Execution::Parallel),
    ]
}

fn stages(c: &mut Criterion) {
    let md = generate_population(&GenerationConfig::default(), 1).unwrap();
    let table = tabulate(&md);
    let voters = extract_voter_file(&md, 0.7, 1).unwrap();
    let budget = PrivacyBudget::new(1.0).unwrap();
    let instances = standard_tiny_instances();
    let plan_settings = PolicySettings {
        n_plans: 10,
        ..PolicySettings::default()
    }
    .plans();

    let mut g = c.benchmark_group("stages");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::new("bisg", name), &exec, |b, &e| {
            b.iter(|| {
                infer_with(
                    e,
                    &voters.records,
                    &md.names,
                    NameParts::FirstMiddleLast,
                    Some(&table),
                    &BisgSettings::default(),
                )
                .unwrap()
            })
        });
        g.bench_with_input(BenchmarkId::new("dp_noise", name), &exec, |b, &e| {
            b.iter(|| apply_dp_das_with(e, &table, &budget, 1).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("mechanism_check", name), &exec, |b, &e| {
            b.iter(|| mechanism_bound_check(&instances, &budget, ReleasedTables::Vap, 1, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("plans", name), &exec, |b, &e| {
            b.iter(|| generate_plans_with(e, table.geography(), &table, &plan_settings, 1).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
