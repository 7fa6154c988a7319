use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pairgee::event_data::assemble_dataset;
use pairgee::exec::Execution;
use pairgee::forest::{fit_forest, oob_predict, ForestConfig, TrainingPanel};
use pairgee::history::{propensity_features, HistoryConfig, Regime};
use pairgee::pseudo_obs::{pseudo_panel, PoMethod};
use pairgee::simulate::correlated::CorrelatedScenario;
use pairgee::simulate::{run_replicates, Method, Scenario, SimConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_pseudo(c: &mut Criterion) {
    let sc = CorrelatedScenario::default();
    let cohort = sc.generate(2000, 1).unwrap();
    let ds = assemble_dataset(&cohort.subjects, &sc.grid(), |s, t| Ok(s.covariates_at(t))).unwrap();
    let mut g = c.benchmark_group("pseudo_panel");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| pseudo_panel(&ds, PoMethod::Fast, exec))
        });
    }
    g.finish();
}

fn bench_forest(c: &mut Criterion) {
    let sc = CorrelatedScenario::default();
    let cohort = sc.generate(750, 2).unwrap();
    let ds = assemble_dataset(&cohort.subjects, &sc.grid(), |s, t| Ok(s.covariates_at(t))).unwrap();
    let hcfg = HistoryConfig::new(Regime::Full, -12.0).unwrap();
    let by_id: std::collections::HashMap<_, _> = cohort.subjects.iter().map(|s| (s.id.as_str(), s)).collect();
    let features: Vec<_> = ds.rows.iter().map(|r| propensity_features(by_id[r.subject_id.as_str()], r.t, &hcfg)).collect();
    let panel = TrainingPanel::new(ds.rows.iter().zip(&features).map(|(r, f)| (r.subject_id.as_str(), r.at_risk, f))).unwrap();
    let cfg = ForestConfig { n_trees: 100, ..Default::default() };
    let mut g = c.benchmark_group("forest_fit_oob");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let f = fit_forest(&panel, &cfg, exec).unwrap();
                oob_predict(&f, &panel, exec)
            })
        });
    }
    g.finish();
}

fn bench_replicates(c: &mut Criterion) {
    let sc = CorrelatedScenario::default();
    let mut g = c.benchmark_group("replicates");
    g.sample_size(10);
    for (name, exec) in MODES {
        let mut cfg = SimConfig::new(300, 4, 3, vec![Method::Unweighted, Method::Pair(Regime::Full)]);
        cfg.forest = ForestConfig { n_trees: 50, ..Default::default() };
        cfg.exec = exec;
        g.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| run_replicates(&sc, cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_pseudo, bench_forest, bench_replicates);
criterion_main!(benches);
