use std::hint::black_box;

use boxmr::{
    collect_output, hash64, split_text, Backing, Engine, Executor, MountPoint, Separator, StageSpec, TempSpace,
    WorkerPool,
};
use boxmr_bench::{alignment_text, dna_text, sdf_text};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn splitting(c: &mut Criterion) {
    let mut g = c.benchmark_group("split_text");
    let dna = dna_text(16 << 20);
    g.throughput(Throughput::Bytes(dna.len() as u64));
    for parts in [1usize, 8, 64] {
        g.bench_with_input(BenchmarkId::new("dna_16MiB", parts), &parts, |b, &p| {
            b.iter(|| split_text(dna.clone(), &Separator::newline(), p).unwrap())
        });
    }
    let sdf = sdf_text(20_000);
    g.throughput(Throughput::Bytes(sdf.len() as u64));
    g.bench_function("sdf_20k_records", |b| {
        b.iter(|| split_text(sdf.clone(), &Separator::sdf(), 8).unwrap())
    });
    g.finish();
}

fn hashing(c: &mut Criterion) {
    let keys: Vec<String> = (0..10_000).map(|i| format!("chr{}:{i}", i % 23)).collect();
    c.bench_function("hash64_10k_keys", |b| {
        b.iter(|| keys.iter().fold(0u64, |acc, k| acc ^ hash64(black_box(k.as_bytes()))))
    });
}

fn repartition(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::new(
        Executor::subprocess(4),
        WorkerPool::uniform(4, 1).unwrap(),
        TempSpace::new(dir.path(), Backing::Disk),
    );
    let ds = split_text(alignment_text(100_000), &Separator::newline(), 8).unwrap();
    let key = |r: &[u8]| -> Result<Vec<u8>, String> {
        r.split(|b| *b == b'\t')
            .nth(2)
            .map(<[u8]>::to_vec)
            .ok_or_else(|| "missing field".to_string())
    };
    c.bench_function("repartition_by_100k_records", |b| {
        b.iter(|| engine.repartition_by(&ds, &key, 8).unwrap())
    });
}

fn mounts(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let space = TempSpace::new(dir.path(), Backing::Disk);
    let ds = split_text(dna_text(4 << 20), &Separator::newline(), 1).unwrap();
    let mp = MountPoint::text_file("/dna").unwrap();
    let mut g = c.benchmark_group("mount");
    g.throughput(Throughput::Bytes(4 << 20));
    g.bench_function("materialize_collect_4MiB", |b| {
        b.iter(|| {
            let mut task = space.allocate().unwrap();
            let (path, _) = task.materialize(&ds.partitions()[0], &mp).unwrap();
            collect_output(&mp, &path).unwrap()
        })
    });
    g.finish();
}

fn map_stage(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::new(
        Executor::subprocess(4),
        WorkerPool::uniform(1, 4).unwrap(),
        TempSpace::new(dir.path(), Backing::Disk),
    );
    let ds = split_text(dna_text(1 << 20), &Separator::newline(), 4).unwrap();
    let stage = StageSpec::new(
        MountPoint::text_file("/dna").unwrap(),
        MountPoint::text_file("/count").unwrap(),
        "busybox",
        "grep -o '[GC]' /dna | wc -l > /count",
    )
    .unwrap();
    let mut g = c.benchmark_group("engine");
    g.sample_size(10);
    g.bench_function("gc_map_1MiB_4_partitions", |b| {
        b.iter(|| engine.map(&ds, &stage).unwrap())
    });
    g.finish();
}

criterion_group!(benches, splitting, hashing, repartition, mounts, map_stage);
criterion_main!(benches);
