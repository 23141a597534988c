//! The three primitives: `map`, tree `reduce`, and `repartition_by`.
//!
//! Every transformation of record data is a command run by the executor
//! against a materialized input mount; the engine only moves partitions
//! around and keeps the ledger.

use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use indexmap::IndexMap;

use crate::dataset::{concat, Dataset, Origin, Partition, Record, Separator};
use crate::error::{ConfigError, EngineError, TaskError};
use crate::executor::{Bind, ContainerTask, Executor};
use crate::mountpoint::{collect_output, MountPoint, TempSpace};
use crate::scheduler::{LevelError, LevelTask, OpKind, ShuffleLedger, WorkerPool};

/// One container stage: where data goes in, where results come out, and
/// what runs in between.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub input: MountPoint,
    pub output: MountPoint,
    pub image: String,
    pub command: String,
}

impl StageSpec {
    pub fn new(
        input: MountPoint,
        output: MountPoint,
        image: impl Into<String>,
        command: impl Into<String>,
    ) -> Result<Self, ConfigError> {
        if input.container_path() == output.container_path() {
            return Err(ConfigError::SameMountPath(input.container_path().to_string()));
        }
        Ok(StageSpec {
            input,
            output,
            image: image.into(),
            command: command.into(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReduceConfig {
    pub depth_k: usize,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        ReduceConfig { depth_k: 2 }
    }
}

impl ReduceConfig {
    pub fn new(depth_k: usize) -> Result<Self, ConfigError> {
        if depth_k == 0 {
            return Err(ConfigError::ZeroDepth);
        }
        Ok(ReduceConfig { depth_k })
    }
}

/// Pure mapping from a record to its grouping key.
pub trait KeyFunction: Sync {
    fn key(&self, record: &[u8]) -> Result<Vec<u8>, String>;
}

impl<F> KeyFunction for F
where
    F: Fn(&[u8]) -> Result<Vec<u8>, String> + Sync,
{
    fn key(&self, record: &[u8]) -> Result<Vec<u8>, String> {
        self(record)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the key bytes. Fixed across runs and platforms.
pub fn hash64(key: &[u8]) -> u64 {
    key.iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Target partition for `key` among `num_partitions`.
pub fn partition_for(key: &[u8], num_partitions: usize) -> usize {
    (hash64(key) % num_partitions as u64) as usize
}

/// Partition counts `P_0 ..= P_K` of a depth-`k` tree reduce, where
/// `P_i = max(1, ceil(P_0^((K-i)/K)))`. Computed exactly in integers.
pub fn reduce_schedule(p0: usize, k: usize) -> Vec<usize> {
    assert!(k >= 1, "reduce depth must be at least 1");
    let p0 = p0.max(1);
    (0..=k)
        .map(|i| ceil_root_pow(p0 as u128, (k - i) as u32, k as u32).max(1) as usize)
        .collect()
}

/// Smallest `m` with `m^k >= base^a`.
fn ceil_root_pow(base: u128, a: u32, k: u32) -> u128 {
    if a == 0 || base == 1 {
        return 1;
    }
    if a == k {
        return base;
    }
    let estimate = (base as f64).powf(a as f64 / k as f64).ceil() as u128;
    let target = base.checked_pow(a);
    let at_least = |m: u128| -> bool {
        match (m.checked_pow(k), target) {
            (Some(mk), Some(t)) => mk >= t,
            (None, Some(_)) => true,
            // too large for exact integers; fall back to logarithms
            (_, None) => (m as f64).ln() * k as f64 >= (base as f64).ln() * a as f64 - 1e-12,
        }
    };
    let mut m = estimate.max(1);
    while m > 1 && at_least(m - 1) {
        m -= 1;
    }
    while !at_least(m) {
        m += 1;
    }
    m
}

/// Drives the primitives over one executor, worker pool, and temp space.
#[derive(Debug)]
pub struct Engine {
    executor: Executor,
    pool: WorkerPool,
    temp: TempSpace,
    ledger: Arc<ShuffleLedger>,
    retries: usize,
    timeout: Option<Duration>,
    cpu_limit: Option<u32>,
}

impl Engine {
    pub fn new(executor: Executor, pool: WorkerPool, temp: TempSpace) -> Self {
        Engine {
            executor,
            pool,
            temp,
            ledger: Arc::new(ShuffleLedger::new()),
            retries: 1,
            timeout: None,
            cpu_limit: None,
        }
    }

    /// Extra attempts per failed task before the operation aborts.
    pub fn with_retries(mut self, retries: usize) -> Self {
        self.retries = retries;
        self
    }

    pub fn with_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.timeout = timeout.filter(|t| !t.is_zero());
        self
    }

    pub fn with_cpu_limit(mut self, cpus: Option<u32>) -> Self {
        self.cpu_limit = cpus;
        self
    }

    pub fn ledger(&self) -> &Arc<ShuffleLedger> {
        &self.ledger
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.pool
    }

    pub fn executor(&self) -> &Executor {
        &self.executor
    }

    pub fn temp(&self) -> &TempSpace {
        &self.temp
    }

    /// Transforms each partition with one container run. Partition count
    /// and worker affinity are preserved; nothing is shuffled.
    pub fn map(&self, ds: &Dataset, stage: &StageSpec) -> Result<Dataset, EngineError> {
        let ds = self.pool.assign_affinity(ds);
        let entry = self.ledger.begin(OpKind::Map);
        let started = Instant::now();
        let result = self.run_stage(ds.partitions(), stage, entry, None);
        self.ledger.finish(entry, started.elapsed(), result.is_ok());
        let outputs = result?;
        Ok(Dataset::new(outputs, Origin::Map))
    }

    /// Tree aggregation down to one partition in `cfg.depth_k` merge levels,
    /// followed by a final aggregation of the last partition.
    ///
    /// The stage command must be associative and commutative, and should
    /// shrink its input.
    pub fn reduce(&self, ds: &Dataset, stage: &StageSpec, cfg: ReduceConfig) -> Result<Dataset, EngineError> {
        if cfg.depth_k == 0 {
            return Err(ConfigError::ZeroDepth.into());
        }
        let ds = self.pool.assign_affinity(ds);
        let entry = self.ledger.begin(OpKind::Reduce);
        let started = Instant::now();
        let result = self.reduce_levels(&ds, stage, cfg.depth_k, entry);
        self.ledger.finish(entry, started.elapsed(), result.is_ok());
        let last = result?;
        Ok(Dataset::new(vec![last], Origin::Reduce))
    }

    fn reduce_levels(&self, ds: &Dataset, stage: &StageSpec, k: usize, entry: usize) -> Result<Partition, EngineError> {
        let mut current: Vec<Partition> = ds.partitions().to_vec();
        let mut final_level = 0;
        if current.len() > 1 {
            let schedule = reduce_schedule(current.len(), k);
            for (level, &target) in schedule.iter().skip(1).enumerate() {
                let aggregated = self.run_stage(&current, stage, entry, Some(level))?;
                let (merged, shuffled) = merge_round_robin(aggregated, target);
                self.ledger.record_shuffle(entry, shuffled, true);
                current = merged;
            }
            final_level = k;
        }
        debug_assert_eq!(current.len(), 1);
        let mut out = self.run_stage(&current, stage, entry, Some(final_level))?;
        Ok(out.remove(0))
    }

    /// Moves every record to partition `hash64(key) % num_partitions`.
    /// Equal keys end up contiguous, in source order.
    pub fn repartition_by(
        &self,
        ds: &Dataset,
        key: &dyn KeyFunction,
        num_partitions: usize,
    ) -> Result<Dataset, EngineError> {
        if num_partitions == 0 {
            return Err(ConfigError::ZeroPartitions.into());
        }
        let ds = self.pool.assign_affinity(ds);
        let entry = self.ledger.begin(OpKind::Repartition);
        let started = Instant::now();
        let result = self.group_by_key(&ds, key, num_partitions);
        if let Ok((_, shuffled)) = &result {
            self.ledger.record_shuffle(entry, *shuffled, false);
        }
        self.ledger.finish(entry, started.elapsed(), result.is_ok());
        Ok(result?.0)
    }

    fn group_by_key(&self, ds: &Dataset, key: &dyn KeyFunction, n: usize) -> Result<(Dataset, u64), EngineError> {
        let mut groups: Vec<IndexMap<Vec<u8>, Vec<Record>>> = (0..n).map(|_| IndexMap::new()).collect();
        let mut shuffled = 0u64;
        let mut index = 0;
        for p in ds.partitions() {
            for (offset, r) in p.records().iter().enumerate() {
                let k = key.key(r.as_bytes()).map_err(|message| EngineError::Key {
                    index,
                    partition: p.id(),
                    offset,
                    message,
                })?;
                let target = partition_for(&k, n);
                if p.affinity() != Some(self.pool.round_robin(target)) {
                    shuffled += r.len() as u64;
                }
                groups[target].entry(k).or_default().push(r.clone());
                index += 1;
            }
        }
        let partitions = groups
            .into_iter()
            .enumerate()
            .map(|(t, g)| {
                Partition::new(t, g.into_values().flatten().collect()).with_affinity(Some(self.pool.round_robin(t)))
            })
            .collect();
        Ok((Dataset::new(partitions, Origin::Repartition), shuffled))
    }

    /// One container run per partition, concurrently within the pool.
    /// Results keep each source partition's id and affinity.
    fn run_stage(
        &self,
        partitions: &[Partition],
        stage: &StageSpec,
        entry: usize,
        level: Option<usize>,
    ) -> Result<Vec<Partition>, EngineError> {
        let tasks = partitions
            .iter()
            .map(|p| LevelTask {
                affinity: p.affinity().unwrap_or_else(|| self.pool.round_robin(p.id())),
                job: move || self.run_task(p, stage, entry),
            })
            .collect();
        let outputs = self.pool.run_level(tasks, self.retries).map_err(|e: LevelError| {
            let first = e.failures.into_iter().next().expect("level error has a failure");
            EngineError::Task {
                partition: partitions[first.index].id(),
                level,
                attempts: first.attempts,
                source: first.error,
            }
        })?;
        Ok(partitions
            .iter()
            .zip(outputs)
            .map(|(p, records)| Partition::new(p.id(), records).with_affinity(p.affinity()))
            .collect())
    }

    fn run_task(&self, partition: &Partition, stage: &StageSpec, entry: usize) -> Result<Vec<Record>, TaskError> {
        let mut dir = self.temp.allocate()?;
        let (input, written) = dir.materialize(partition, &stage.input)?;
        let output = dir.prepare_output(&stage.output)?;
        let scratch = dir.scratch()?;
        self.ledger.record_task(entry, written);
        let task = ContainerTask {
            image: stage.image.clone(),
            command: stage.command.clone(),
            binds: vec![
                Bind {
                    host: input,
                    container: stage.input.container_path().to_string(),
                    read_only: true,
                },
                Bind {
                    host: output.clone(),
                    container: stage.output.container_path().to_string(),
                    read_only: false,
                },
            ],
            env: Vec::new(),
            timeout: self.timeout,
            cpu_limit: self.cpu_limit,
            workdir: Some(scratch),
        };
        self.executor.run(&task)?;
        Ok(collect_output(&stage.output, &output)?)
    }
}

/// Sends source partition `j` to target `j % target` and concatenates in
/// source order. Returns the merged partitions and the bytes of records
/// that landed on a different worker.
fn merge_round_robin(sources: Vec<Partition>, target: usize) -> (Vec<Partition>, u64) {
    let mut groups: Vec<Vec<Partition>> = (0..target).map(|_| Vec::new()).collect();
    for (j, p) in sources.into_iter().enumerate() {
        groups[j % target].push(p);
    }
    let mut shuffled = 0u64;
    let merged = groups
        .into_iter()
        .enumerate()
        .map(|(t, group)| {
            let home = group.first().and_then(Partition::affinity);
            shuffled += group
                .iter()
                .filter(|p| p.affinity() != home)
                .map(|p| p.byte_size() as u64)
                .sum::<u64>();
            concat(&group).with_id(t)
        })
        .collect();
    (merged, shuffled)
}

/// All records in partition-id order.
pub fn collect(ds: &Dataset) -> Vec<Record> {
    ds.records().cloned().collect()
}

/// Writes every partition's joined text, in partition order, to `path`.
pub fn save_text(ds: &Dataset, sep: &Separator, path: &Path) -> Result<(), EngineError> {
    let io_err = |source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = io::BufWriter::new(file);
    for r in ds.records() {
        w.write_all(r.as_bytes())
            .and_then(|_| w.write_all(sep.as_bytes()))
            .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Writes one file per record into `dir`, named `part-NNNNN` in collect order.
pub fn save_binary(ds: &Dataset, dir: &Path) -> Result<(), EngineError> {
    fs::create_dir_all(dir).map_err(|source| EngineError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (i, r) in ds.records().enumerate() {
        let path = dir.join(format!("part-{i:05}"));
        fs::write(&path, r.as_bytes()).map_err(|source| EngineError::Io { path, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mountpoint::Backing;
    use crate::scheduler::WorkerId;

    #[test]
    fn fnv1a_reference_vectors() {
        assert_eq!(hash64(b""), 0xcbf29ce484222325);
        assert_eq!(hash64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(hash64(b"foobar"), 0x85944171f73967e8);
    }

    /// Float-free oracle: the smallest m with m^k >= p0^(k-i), by search.
    fn schedule_oracle(p0: usize, k: usize) -> Vec<usize> {
        (0..=k)
            .map(|i| {
                let target = (p0 as u128).pow((k - i) as u32);
                (1u128..).find(|m| m.pow(k as u32) >= target).unwrap() as usize
            })
            .collect()
    }

    #[test]
    fn schedule_matches_integer_oracle() {
        for k in 1..=4 {
            for p0 in 1..=64 {
                assert_eq!(reduce_schedule(p0, k), schedule_oracle(p0, k), "p0={p0} k={k}");
            }
        }
        assert_eq!(reduce_schedule(8, 2), vec![8, 3, 1]);
        assert_eq!(reduce_schedule(8, 3), vec![8, 4, 2, 1]);
        assert_eq!(reduce_schedule(16, 2), vec![16, 4, 1]);
    }

    #[test]
    fn schedule_shape() {
        for k in 1..=6 {
            for p0 in 1..=200 {
                let s = reduce_schedule(p0, k);
                assert_eq!(s.len(), k + 1);
                assert_eq!(s[0], p0);
                assert_eq!(s[k], 1);
                assert!(s.windows(2).all(|w| w[0] >= w[1]));
                if p0 >= 1 << k {
                    assert!(s.windows(2).all(|w| w[0] > w[1]), "p0={p0} k={k} {s:?}");
                }
            }
        }
    }

    #[test]
    fn merge_is_round_robin_and_counts_moved_bytes() {
        let p = |id, r: &str, w| Partition::new(id, vec![r.into()]).with_affinity(Some(WorkerId(w)));
        let (merged, moved) = merge_round_robin(vec![p(0, "aa", 0), p(1, "b", 1), p(2, "ccc", 0), p(3, "d", 1)], 2);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].records(), &[Record::from("aa"), Record::from("ccc")]);
        assert_eq!(merged[1].records(), &[Record::from("b"), Record::from("d")]);
        assert_eq!(moved, 0);
        let (_, moved) = merge_round_robin(vec![p(0, "aa", 0), p(1, "b", 1), p(2, "ccc", 1)], 1);
        assert_eq!(moved, 4);
    }

    fn engine(dir: &Path, workers: usize) -> Engine {
        Engine::new(
            Executor::subprocess(workers),
            WorkerPool::uniform(workers, 1).unwrap(),
            TempSpace::new(dir, Backing::Disk),
        )
    }

    fn text_stage(input: &str, output: &str, cmd: &str) -> StageSpec {
        StageSpec::new(
            MountPoint::text_file(input).unwrap(),
            MountPoint::text_file(output).unwrap(),
            "ubuntu",
            cmd,
        )
        .unwrap()
    }

    fn strs(ds: &Dataset) -> Vec<Vec<String>> {
        ds.partitions()
            .iter()
            .map(|p| {
                p.records()
                    .iter()
                    .map(|r| String::from_utf8_lossy(r.as_bytes()).into_owned())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn same_mount_paths_rejected() {
        let err = StageSpec::new(
            MountPoint::text_file("/x").unwrap(),
            MountPoint::text_file("/x").unwrap(),
            "i",
            "c",
        );
        assert!(matches!(err, Err(ConfigError::SameMountPath(_))));
    }

    #[test]
    fn gc_map_per_partition() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), 2);
        let ds = Dataset::from_records(vec![vec!["GG"], vec!["AC"]]);
        let out = e
            .map(
                &ds,
                &text_stage("/dna", "/count", "grep -o '[GC]' /dna | wc -l > /count"),
            )
            .unwrap();
        let oracle: Vec<Vec<String>> = ["GG", "AC"]
            .iter()
            .map(|s| vec![s.chars().filter(|c| matches!(c, 'G' | 'C')).count().to_string()])
            .collect();
        let got: Vec<Vec<String>> = strs(&out)
            .into_iter()
            .map(|p| p.into_iter().map(|s| s.trim().to_string()).collect())
            .collect();
        assert_eq!(got, oracle);
        let entry = &e.ledger().entries()[0];
        assert_eq!(entry.bytes_shuffled, 0);
        assert_eq!(entry.tasks_run, 2);
    }

    #[test]
    fn identity_map_keeps_partitions_and_affinity() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), 2);
        let ds = Dataset::from_records(vec![vec!["a", "b"], vec![], vec!["c"], vec!["d", "e"]]);
        let out = e.map(&ds, &text_stage("/in", "/out", "cat /in > /out")).unwrap();
        assert_eq!(strs(&out), strs(&ds));
        assert_eq!(out.affinities(), e.pool().assign_affinity(&ds).affinities());
        assert_eq!(out.origin(), Origin::Map);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn empty_partition_still_runs() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), 1);
        let ds = Dataset::from_records(vec![Vec::<&str>::new()]);
        let out = e.map(&ds, &text_stage("/in", "/out", "wc -l < /in > /out")).unwrap();
        assert_eq!(strs(&out)[0][0].trim(), "0");
    }

    #[test]
    fn reduce_sums_to_single_partition() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), 2);
        let ds = Dataset::from_records(vec![vec!["2"], vec!["1"], vec!["3"], vec!["4"]]);
        let out = e
            .reduce(
                &ds,
                &text_stage("/counts", "/sum", "awk '{s+=$1} END {print s}' /counts > /sum"),
                ReduceConfig::default(),
            )
            .unwrap();
        assert_eq!(strs(&out), vec![vec![(2 + 1 + 3 + 4).to_string()]]);
        let entry = &e.ledger().entries()[0];
        assert_eq!(entry.merge_events, 2);
        // 4 + 2 level runs, then the final one
        assert_eq!(entry.tasks_run, 4 + 2 + 1);
    }

    #[test]
    fn reduce_single_partition_runs_once() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), 1);
        let ds = Dataset::from_records(vec![vec!["5", "6"]]);
        for k in 1..=3 {
            let out = e
                .reduce(
                    &ds,
                    &text_stage("/in", "/out", "awk '{s+=$1} END {print s}' /in > /out"),
                    ReduceConfig::new(k).unwrap(),
                )
                .unwrap();
            assert_eq!(strs(&out), vec![vec!["11"]]);
        }
        for entry in e.ledger().entries() {
            assert_eq!(entry.tasks_run, 1);
            assert_eq!(entry.merge_events, 0);
        }
    }

    #[test]
    fn reduce_top_three_matches_flat_sort() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), 2);
        let numbers: Vec<Vec<String>> = (0..4)
            .map(|p| (0..5).map(|i| ((p * 37 + i * 11) % 50).to_string()).collect())
            .collect();
        let ds = Dataset::from_records(numbers.clone());
        let out = e
            .reduce(
                &ds,
                &text_stage("/in", "/out", "sort -rn /in | head -3 > /out"),
                ReduceConfig::default(),
            )
            .unwrap();
        let mut flat: Vec<i64> = numbers.iter().flatten().map(|s| s.parse().unwrap()).collect();
        flat.sort_unstable_by(|a, b| b.cmp(a));
        let oracle: Vec<String> = flat[..3].iter().map(|n| n.to_string()).collect();
        assert_eq!(strs(&out), vec![oracle]);
    }

    #[test]
    fn reduce_rejects_zero_depth() {
        assert_eq!(ReduceConfig::new(0), Err(ConfigError::ZeroDepth));
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), 1);
        let err = e
            .reduce(
                &Dataset::from_records(vec![vec!["1"]]),
                &text_stage("/in", "/out", "cat /in > /out"),
                ReduceConfig { depth_k: 0 },
            )
            .unwrap_err();
        assert!(matches!(err, EngineError::Config(ConfigError::ZeroDepth)));
    }

    #[test]
    fn map_failure_names_partition_after_retry() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), 2);
        let ds = Dataset::from_records(vec![vec!["ok"], vec!["bad"], vec!["ok"]]);
        let err = e
            .map(
                &ds,
                &text_stage("/in", "/out", "if grep -q bad /in; then exit 4; fi; cat /in > /out"),
            )
            .unwrap_err();
        match err {
            EngineError::Task {
                partition,
                attempts,
                level,
                ..
            } => {
                assert_eq!(partition, 1);
                assert_eq!(attempts, 2);
                assert_eq!(level, None);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(!e.ledger().entries()[0].completed);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    fn chrom_key(r: &[u8]) -> Result<Vec<u8>, String> {
        r.split(|b| *b == b'\t')
            .next()
            .map(<[u8]>::to_vec)
            .ok_or_else(|| "empty".into())
    }

    #[test]
    fn repartition_colocates_keys() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), 2);
        let ds = Dataset::from_records(vec![vec!["chr1\ta", "chr2\tb"], vec!["chr1\tc"]]);
        let out = e.repartition_by(&ds, &chrom_key, 2).unwrap();
        assert_eq!(out.num_partitions(), 2);
        let home: Vec<usize> = out
            .partitions()
            .iter()
            .filter(|p| p.records().iter().any(|r| r.as_bytes().starts_with(b"chr1")))
            .map(Partition::id)
            .collect();
        assert_eq!(home.len(), 1);
        let p = &out.partitions()[home[0]];
        let chr1: Vec<_> = p
            .records()
            .iter()
            .filter(|r| r.as_bytes().starts_with(b"chr1"))
            .collect();
        assert_eq!(chr1, vec![&Record::from("chr1\ta"), &Record::from("chr1\tc")]);

        let single = e.repartition_by(&ds, &chrom_key, 1).unwrap();
        assert_eq!(single.num_partitions(), 1);
        assert_eq!(single.num_records(), 3);
        assert!(e.repartition_by(&ds, &chrom_key, 0).is_err());
    }

    #[test]
    fn repartition_groups_match_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), 3);
        let records: Vec<String> = (0..1000).map(|i| format!("k{}\t{i}", (i * 7) % 10)).collect();
        let ds = Dataset::from_records(records.chunks(100).map(|c| c.to_vec()).collect::<Vec<_>>());
        let out = e.repartition_by(&ds, &chrom_key, 10).unwrap();
        // oracle: group-by over the flat record list
        let mut oracle: std::collections::BTreeMap<String, Vec<String>> = Default::default();
        for r in &records {
            oracle
                .entry(r.split('\t').next().unwrap().to_string())
                .or_default()
                .push(r.clone());
        }
        for (key, group) in oracle {
            let holders: Vec<_> = out
                .partitions()
                .iter()
                .filter(|p| {
                    p.records()
                        .iter()
                        .any(|r| r.as_bytes().starts_with(format!("{key}\t").as_bytes()))
                })
                .collect();
            assert_eq!(holders.len(), 1, "key {key} spans partitions");
            let got: Vec<String> = holders[0]
                .records()
                .iter()
                .map(|r| String::from_utf8_lossy(r.as_bytes()).into_owned())
                .filter(|r| r.starts_with(&format!("{key}\t")))
                .collect();
            assert_eq!(got, group);
        }
        assert_eq!(out.num_records(), 1000);
    }

    #[test]
    fn key_failure_reports_record_index() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), 1);
        let ds = Dataset::from_records(vec![vec!["a", "b"], vec!["c", "BAD"]]);
        let key = |r: &[u8]| -> Result<Vec<u8>, String> {
            if r == b"BAD" {
                Err("unparseable".into())
            } else {
                Ok(r.to_vec())
            }
        };
        match e.repartition_by(&ds, &key, 2).unwrap_err() {
            EngineError::Key {
                index,
                partition,
                offset,
                ..
            } => {
                assert_eq!((index, partition, offset), (3, 1, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn collect_and_save() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::from_records(vec![vec!["a"], vec!["b"]]);
        assert_eq!(collect(&ds), vec![Record::from("a"), Record::from("b")]);

        let out = dir.path().join("out.txt");
        save_text(&Dataset::from_records(vec![vec!["7"]]), &Separator::newline(), &out).unwrap();
        assert_eq!(fs::read(&out).unwrap(), b"7\n");

        let bin = dir.path().join("bin");
        save_binary(&Dataset::from_records(vec![vec!["x", "y"], vec!["z"]]), &bin).unwrap();
        assert_eq!(fs::read_dir(&bin).unwrap().count(), 3);
        assert_eq!(fs::read(bin.join("part-00002")).unwrap(), b"z");
    }
}
