use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ragcurate_bench::{fixture, token_text};
use ragcurate_core::selection::{select_round, SelectionState};
use ragcurate_core::{build_matrix, rouge_l, SelectionConfig, SimilarityMeasure, Strategy};

fn similarity_matrix(c: &mut Criterion) {
    let mut group = c.benchmark_group("similarity_matrix");
    group.sample_size(10);
    for n in [100, 400] {
        let (_, vectors) = fixture(n);
        for measure in [SimilarityMeasure::PromptOnly, SimilarityMeasure::Ras] {
            group.bench_with_input(BenchmarkId::new(measure.as_str(), n), &vectors, |b, v| {
                b.iter(|| build_matrix(v, v, measure).unwrap())
            });
        }
    }
    group.finish();
}

fn idds_round(c: &mut Criterion) {
    let mut group = c.benchmark_group("idds_round");
    for n in [400, 1600] {
        let (corpus, vectors) = fixture(n);
        let matrix = build_matrix(&vectors, &vectors, SimilarityMeasure::Ras).unwrap();
        let ids: Vec<String> = corpus.ids().map(str::to_string).collect();
        let k = n / 20;
        let config = SelectionConfig::new(2 * k, 2, Strategy::Idds, SimilarityMeasure::Ras, 1);
        let mut seeded = SelectionState::new(ids, 1);
        seeded.random_round(k).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &seeded, |b, s| {
            b.iter(|| {
                let mut state = s.clone();
                select_round(&mut state, &config, Some(&matrix), k).unwrap();
                state
            })
        });
    }
    group.finish();
}

fn rouge(c: &mut Criterion) {
    let mut group = c.benchmark_group("rouge_l");
    for len in [32, 256] {
        let a = token_text(len, 1);
        let b = token_text(len, 2);
        group.bench_with_input(BenchmarkId::from_parameter(len), &(a, b), |bench, (a, b)| {
            bench.iter(|| rouge_l(a, b))
        });
    }
    group.finish();
}

criterion_group!(benches, similarity_matrix, idds_round, rouge);
criterion_main!(benches);
