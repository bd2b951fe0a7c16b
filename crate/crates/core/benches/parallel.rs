//! Sequential vs rayon paths: per-node DVR computation rounds, EXTRA
//! gradient rounds, and a seed sweep of independent runs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use dvrlab::baselines::ExtraState;
use dvrlab::dvr::{self, Block, DvrOptions, VirtualStore};
use dvrlab::harness::Budget;
use dvrlab::par::{self, Exec};
use dvrlab::problem::{build_problem, synth_dataset, LossKind, Problem};
use dvrlab::topology::{build_graph, laplacian, GossipMatrix, GraphSpec};

fn instance(n: usize, m: usize, d: usize) -> (Problem, GossipMatrix) {
    let ds = synth_dataset(n * m, d, LossKind::Logistic, 1, 1.0).unwrap();
    let p = build_problem(&ds, n, &[1e-3], LossKind::Logistic, &Default::default()).unwrap();
    let g = laplacian(&build_graph(&GraphSpec::Grid { n }, 0).unwrap());
    (p, g)
}

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn dvr_rounds(c: &mut Criterion) {
    let mut group = c.benchmark_group("dvr_comp_round");
    for d in [200usize, 2000] {
        let (p, g) = instance(16, 32, d);
        for (name, exec) in EXECS {
            let opts = DvrOptions { store: VirtualStore::Margins, exec, ..Default::default() };
            let params = dvr::compute_params(&p, &g, &opts).unwrap();
            let mut state = dvr::init_state(&p, &params, &opts, None, 1).unwrap();
            let block = Block::Comp(vec![0; p.n]);
            group.bench_with_input(BenchmarkId::new(name, d), &d, |b, _| {
                b.iter(|| state.apply_block(&p, &g, &params, black_box(&block)).unwrap())
            });
        }
    }
    group.finish();
}

fn extra_rounds(c: &mut Criterion) {
    let mut group = c.benchmark_group("extra_step");
    let (p, g) = instance(16, 64, 500);
    let eta = dvrlab::baselines::default_extra_step(&p);
    for (name, exec) in EXECS {
        let mut state = ExtraState::new(&p, None);
        state.exec = exec;
        group.bench_function(name, |b| b.iter(|| state.step(&p, &g, black_box(eta)).unwrap()));
    }
    group.finish();
}

fn seed_sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("seed_sweep");
    group.sample_size(10);
    let (p, g) = instance(9, 20, 20);
    let opts = DvrOptions { store: VirtualStore::Margins, ..Default::default() };
    let params = dvr::compute_params(&p, &g, &opts).unwrap();
    let one = |seed: usize| {
        let spec = dvr::RunSpec {
            seed: seed as u64,
            tau: 1.0,
            budget: Budget::iterations(20_000),
            theta_star: None,
            f_star: None,
            cadence: Some(1000),
        };
        dvr::run(&p, &g, &params, &opts, &spec).unwrap().rows.len()
    };
    group.bench_function("sequential", |b| b.iter(|| par::map_indexed_seq(16, one)));
    group.bench_function("parallel", |b| b.iter(|| par::map_indexed(16, one)));
    group.finish();
}

criterion_group!(benches, dvr_rounds, extra_rounds, seed_sweep);
criterion_main!(benches);
