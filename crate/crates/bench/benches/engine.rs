use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use livewatch::dsl::parse;
use livewatch::engine::{StreamItem, StreamProcessor};
use livewatch_bench::batch_record;

const QUERIES: [(&str, &str); 4] = [
    ("map", "map(b -> b.loss)"),
    ("where_map", "where(b -> b.batch % 2 == 0) | map(b -> b.loss * 2)"),
    ("reduce_avg_group", "reduce(avg, b -> b.loss)"),
    ("hist_count_window", "reduce(hist[10], b -> b.duration) | window(count=100)"),
];

fn post(c: &mut Criterion) {
    let items: Vec<StreamItem> = (0..1000).map(|i| StreamItem::new(batch_record(i)).group_end(i % 50 == 49)).collect();
    let mut group = c.benchmark_group("engine_post");
    group.throughput(Throughput::Elements(items.len() as u64));
    for (name, query) in QUERIES {
        let pipeline = parse(query).unwrap();
        group.bench_function(name, |b| {
            b.iter_batched_ref(
                || StreamProcessor::new(&pipeline),
                |p| {
                    for item in &items {
                        std::hint::black_box(p.post(item));
                    }
                },
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn parse_queries(c: &mut Criterion) {
    c.bench_function("parse_queries", |b| {
        b.iter(|| {
            for (_, q) in QUERIES {
                std::hint::black_box(parse(q).unwrap());
            }
        })
    });
}

criterion_group!(benches, post, parse_queries);
criterion_main!(benches);
