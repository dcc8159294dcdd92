//! Parallel vs sequential throughput of the hot loops.
//!
//! With the default `parallel` feature each workload runs twice: inside a
//! one-thread rayon pool ("sequential") and on the global pool ("parallel").
//! Built with `--no-default-features` only the sequential fallback runs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qroar_core::diagnostics::{tir_activation, tir_weight};
use qroar_core::evaluator::{synth_model, LogitMse, ObjectiveSpec, OutlierSpec, SynthDims};
use qroar_core::search::{
    build_grids, coordinate_search, derive_windows, length_weights, Objective, ScaleMode,
    ScalePlan, SearchConfig,
};
use qroar_core::{diagnose_bundle, partition_log_freq, rope::pair_frequencies, ModelBundle};

fn bundle() -> ModelBundle {
    let dims = SynthDims {
        tokens_per_length: 2048,
        ..SynthDims::default()
    };
    synth_model(0, &dims, &OutlierSpec::default()).unwrap()
}

/// Runs `f` under each available execution mode.
fn modes(c: &mut Criterion, group: &str, f: &(dyn Fn() + Sync)) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        g.bench_function(BenchmarkId::from_parameter("sequential"), |b| {
            b.iter(|| single.install(|| f()))
        });
        let threads = rayon::current_num_threads();
        g.bench_function(BenchmarkId::new("parallel", threads), |b| b.iter(f));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(f));
    g.finish();
}

fn diagnostics(c: &mut Criterion) {
    let bundle = bundle();
    let cache = bundle.activation_cache().unwrap();
    modes(c, "tir_weight", &|| {
        black_box(tir_weight(&bundle.wq, &cache, 0.01).unwrap());
    });
    modes(c, "tir_activation", &|| {
        black_box(tir_activation(&cache, &bundle.rope, &bundle.scheme, 0.01).unwrap());
    });
}

fn objective(c: &mut Criterion) {
    let bundle = bundle();
    let cfg = SearchConfig {
        lengths: length_weights(&bundle.lengths()),
        ..SearchConfig::for_train_window(bundle.rope.train_window)
    };
    let spec = ObjectiveSpec {
        samples_per_length: 1024,
        ..ObjectiveSpec::logit_mse(cfg.lengths.clone(), 0)
    };
    let obj = LogitMse::new(&bundle, &spec).unwrap();
    let part = partition_log_freq(&pair_frequencies(&bundle.rope), 8).unwrap();
    let template = ScalePlan::identity(part.clone(), bundle.rope.pairing, ScaleMode::Symmetric);
    let plan = template.with_scales(vec![1.1; 8]);
    modes(c, "logit_mse", &|| {
        black_box(obj.evaluate(&plan).unwrap());
    });

    let report = diagnose_bundle(&bundle, 8, 0.01).unwrap();
    let grids = build_grids(&derive_windows(&part, &report, &cfg).unwrap(), 5).unwrap();
    let order = report.bands_by_pressure();
    let one_pass = SearchConfig {
        max_passes: 1,
        ..cfg.clone()
    };
    modes(c, "coordinate_search", &|| {
        black_box(coordinate_search(&obj, &template, &grids, &order, &one_pass).unwrap());
    });
}

criterion_group!(benches, diagnostics, objective);
criterion_main!(benches);
