//! Local worker pool: slot groups with sticky partition affinity, a
//! slot-bounded runner for one level of tasks, and the shuffle ledger.

use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Partition};
use crate::error::{ConfigError, TaskError};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkerId(pub u32);

impl fmt::Debug for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

#[derive(Debug, Default)]
struct WorkerState {
    running: AtomicUsize,
    high_water: AtomicUsize,
}

/// Workers modeled as slot groups inside this process.
#[derive(Debug)]
pub struct WorkerPool {
    slots: Vec<usize>,
    state: Vec<WorkerState>,
}

impl WorkerPool {
    pub fn new(slots: Vec<usize>) -> Result<Self, ConfigError> {
        if slots.is_empty() || slots.contains(&0) {
            return Err(ConfigError::EmptyPool);
        }
        let state = slots.iter().map(|_| WorkerState::default()).collect();
        Ok(WorkerPool { slots, state })
    }

    pub fn uniform(workers: usize, slots_per_worker: usize) -> Result<Self, ConfigError> {
        if workers == 0 {
            return Err(ConfigError::EmptyPool);
        }
        Self::new(vec![slots_per_worker; workers])
    }

    pub fn workers(&self) -> impl Iterator<Item = WorkerId> + '_ {
        (0..self.slots.len() as u32).map(WorkerId)
    }

    pub fn num_workers(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self, worker: WorkerId) -> usize {
        self.slots[self.index(worker)]
    }

    pub fn total_slots(&self) -> usize {
        self.slots.iter().sum()
    }

    /// Highest number of tasks ever observed running at once on `worker`.
    pub fn high_water(&self, worker: WorkerId) -> usize {
        self.state[self.index(worker)].high_water.load(Ordering::SeqCst)
    }

    pub fn reset_high_water(&self) {
        for s in &self.state {
            s.high_water.store(0, Ordering::SeqCst);
        }
    }

    fn index(&self, worker: WorkerId) -> usize {
        worker.0 as usize % self.slots.len()
    }

    /// Affinity for the `i`-th partition under round-robin placement.
    pub fn round_robin(&self, i: usize) -> WorkerId {
        WorkerId((i % self.slots.len()) as u32)
    }

    /// Gives unassigned partitions a round-robin worker; keeps existing ones.
    pub fn assign_affinity(&self, ds: &Dataset) -> Dataset {
        if ds.partitions().iter().all(|p| p.affinity().is_some()) {
            return ds.clone();
        }
        let partitions: Vec<Partition> = ds
            .partitions()
            .iter()
            .map(|p| match p.affinity() {
                Some(_) => p.clone(),
                None => p.clone().with_affinity(Some(self.round_robin(p.id()))),
            })
            .collect();
        Dataset::new(partitions, ds.origin())
    }

    /// Runs every task with at most `slots(w)` tasks concurrently on each
    /// worker `w`. Each failing task is retried up to `retries` more times.
    /// Outcomes come back in task order; all failures are reported.
    pub fn run_level<T, F>(&self, tasks: Vec<LevelTask<F>>, retries: usize) -> Result<Vec<T>, LevelError>
    where
        F: Fn() -> Result<T, TaskError> + Sync,
        T: Send,
    {
        let n = tasks.len();
        let mut queues: Vec<Mutex<VecDeque<(usize, &F)>>> =
            (0..self.slots.len()).map(|_| Mutex::new(VecDeque::new())).collect();
        for (i, task) in tasks.iter().enumerate() {
            queues[self.index(task.affinity)]
                .get_mut()
                .unwrap()
                .push_back((i, &task.job));
        }
        let results: Vec<Mutex<Option<Result<T, TaskFailure>>>> = (0..n).map(|_| Mutex::new(None)).collect();

        std::thread::scope(|scope| {
            for (w, queue) in queues.iter().enumerate() {
                let pending = queue.lock().unwrap().len();
                let state = &self.state[w];
                for _ in 0..self.slots[w].min(pending) {
                    let results = &results;
                    scope.spawn(move || loop {
                        let Some((index, job)) = queue.lock().unwrap().pop_front() else {
                            break;
                        };
                        let now = state.running.fetch_add(1, Ordering::SeqCst) + 1;
                        state.high_water.fetch_max(now, Ordering::SeqCst);
                        let outcome = run_with_retries(job, retries).map_err(|(attempts, error)| TaskFailure {
                            index,
                            attempts,
                            error,
                        });
                        state.running.fetch_sub(1, Ordering::SeqCst);
                        *results[index].lock().unwrap() = Some(outcome);
                    });
                }
            }
        });

        let mut outcomes = Vec::with_capacity(n);
        let mut failures = Vec::new();
        for slot in results {
            match slot.into_inner().unwrap().expect("every queued task runs") {
                Ok(t) => outcomes.push(t),
                Err(f) => failures.push(f),
            }
        }
        if failures.is_empty() {
            Ok(outcomes)
        } else {
            Err(LevelError { failures })
        }
    }
}

fn run_with_retries<T, F>(job: &F, retries: usize) -> Result<T, (usize, TaskError)>
where
    F: Fn() -> Result<T, TaskError>,
{
    let mut attempts = 0;
    loop {
        attempts += 1;
        match job() {
            Ok(t) => return Ok(t),
            Err(e) if attempts > retries => return Err((attempts, e)),
            Err(e) => log::warn!("task attempt {attempts} failed, retrying: {e}"),
        }
    }
}

pub struct LevelTask<F> {
    pub affinity: WorkerId,
    pub job: F,
}

#[derive(Debug)]
pub struct TaskFailure {
    /// Position of the task in the submitted list.
    pub index: usize,
    pub attempts: usize,
    pub error: TaskError,
}

#[derive(Debug)]
pub struct LevelError {
    /// Sorted by task index.
    pub failures: Vec<TaskFailure>,
}

impl fmt::Display for LevelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} task(s) failed", self.failures.len())?;
        for fail in &self.failures {
            write!(
                f,
                "; task {} after {} attempt(s): {}",
                fail.index, fail.attempts, fail.error
            )?;
        }
        Ok(())
    }
}

impl std::error::Error for LevelError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Map,
    Reduce,
    #[serde(rename = "repartition_by")]
    Repartition,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::Map => "map",
            OpKind::Reduce => "reduce",
            OpKind::Repartition => "repartition_by",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub op: OpKind,
    /// Pipeline stage index, when run under a pipeline.
    pub stage: Option<usize>,
    pub tasks_run: usize,
    pub bytes_materialized: u64,
    /// Bytes of records whose worker affinity changed.
    pub bytes_shuffled: u64,
    /// Data movements between workers: one per reduce merge level or repartition.
    pub shuffle_events: usize,
    pub merge_events: usize,
    pub wall_time_s: f64,
    pub completed: bool,
}

/// Append-only record of what each operation cost. Never reset implicitly.
#[derive(Debug, Default)]
pub struct ShuffleLedger {
    entries: Mutex<Vec<LedgerEntry>>,
    stage: Mutex<Option<usize>>,
}

impl ShuffleLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tags entries opened from now on with a pipeline stage index.
    pub fn set_stage(&self, stage: Option<usize>) {
        *self.stage.lock().unwrap() = stage;
    }

    pub fn begin(&self, op: OpKind) -> usize {
        let stage = *self.stage.lock().unwrap();
        let mut entries = self.entries.lock().unwrap();
        entries.push(LedgerEntry {
            op,
            stage,
            tasks_run: 0,
            bytes_materialized: 0,
            bytes_shuffled: 0,
            shuffle_events: 0,
            merge_events: 0,
            wall_time_s: 0.0,
            completed: false,
        });
        entries.len() - 1
    }

    pub fn record_task(&self, entry: usize, bytes_materialized: u64) {
        let mut entries = self.entries.lock().unwrap();
        entries[entry].tasks_run += 1;
        entries[entry].bytes_materialized += bytes_materialized;
    }

    pub fn record_shuffle(&self, entry: usize, bytes: u64, merge_event: bool) {
        let mut entries = self.entries.lock().unwrap();
        entries[entry].bytes_shuffled += bytes;
        entries[entry].shuffle_events += 1;
        if merge_event {
            entries[entry].merge_events += 1;
        }
    }

    pub fn finish(&self, entry: usize, wall: Duration, completed: bool) {
        let mut entries = self.entries.lock().unwrap();
        entries[entry].wall_time_s = wall.as_secs_f64();
        entries[entry].completed = completed;
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().unwrap().clone()
    }

    pub fn report(&self) -> LedgerReport {
        LedgerReport::from_entries(self.entries())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub tasks_run: usize,
    pub bytes_materialized: u64,
    pub bytes_shuffled: u64,
    pub shuffle_events: usize,
    pub merge_events: usize,
    pub wall_time_s: f64,
}

/// Per-operation rows plus totals, as JSON or a plaintext table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub entries: Vec<LedgerEntry>,
    pub totals: LedgerTotals,
}

impl LedgerReport {
    pub fn from_entries(entries: Vec<LedgerEntry>) -> Self {
        let totals = entries.iter().fold(LedgerTotals::default(), |mut t, e| {
            t.tasks_run += e.tasks_run;
            t.bytes_materialized += e.bytes_materialized;
            t.bytes_shuffled += e.bytes_shuffled;
            t.shuffle_events += e.shuffle_events;
            t.merge_events += e.merge_events;
            t.wall_time_s += e.wall_time_s;
            t
        });
        LedgerReport { entries, totals }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

impl fmt::Display for LedgerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return Ok(());
        }
        writeln!(
            f,
            "{:>5}  {:<14} {:>6} {:>14} {:>14} {:>6} {:>10}",
            "stage", "op", "tasks", "materialized", "shuffled", "merges", "wall_s"
        )?;
        for e in &self.entries {
            let stage = e.stage.map_or_else(|| "-".to_string(), |s| s.to_string());
            let op = if e.completed {
                e.op.to_string()
            } else {
                format!("{} (failed)", e.op)
            };
            writeln!(
                f,
                "{:>5}  {:<14} {:>6} {:>14} {:>14} {:>6} {:>10.3}",
                stage, op, e.tasks_run, e.bytes_materialized, e.bytes_shuffled, e.merge_events, e.wall_time_s
            )?;
        }
        let t = &self.totals;
        writeln!(
            f,
            "{:>5}  {:<14} {:>6} {:>14} {:>14} {:>6} {:>10.3}",
            "", "total", t.tasks_run, t.bytes_materialized, t.bytes_shuffled, t.merge_events, t.wall_time_s
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ExecError;
    use std::sync::atomic::AtomicUsize;

    fn ids(ds: &Dataset) -> Vec<Option<WorkerId>> {
        ds.affinities()
    }

    #[test]
    fn round_robin_affinity() {
        let pool = WorkerPool::uniform(2, 1).unwrap();
        let ds = Dataset::from_records(vec![vec!["a"], vec!["b"], vec!["c"], vec!["d"]]);
        let w = |i| Some(WorkerId(i));
        assert_eq!(ids(&pool.assign_affinity(&ds)), vec![w(0), w(1), w(0), w(1)]);

        let one = Dataset::from_records(vec![vec!["a"]]);
        let pool4 = WorkerPool::uniform(4, 1).unwrap();
        assert_eq!(ids(&pool4.assign_affinity(&one)), vec![w(0)]);
    }

    #[test]
    fn assigned_affinity_is_kept() {
        let pool = WorkerPool::uniform(2, 1).unwrap();
        let ds = Dataset::new(
            vec![
                Partition::new(0, vec![]).with_affinity(Some(WorkerId(1))),
                Partition::new(1, vec![]).with_affinity(Some(WorkerId(1))),
            ],
            crate::dataset::Origin::Map,
        );
        assert_eq!(pool.assign_affinity(&ds), ds);
    }

    #[test]
    fn empty_pool_rejected() {
        assert!(WorkerPool::new(vec![]).is_err());
        assert!(WorkerPool::uniform(2, 0).is_err());
        assert_eq!(WorkerPool::new(vec![1, 3]).unwrap().total_slots(), 4);
    }

    #[test]
    fn slot_ceiling_holds_per_worker() {
        let pool = WorkerPool::uniform(2, 4).unwrap();
        let tasks = (0..16)
            .map(|i| LevelTask {
                affinity: WorkerId(i % 2),
                job: move || {
                    std::thread::sleep(Duration::from_millis(20));
                    Ok::<_, TaskError>(i)
                },
            })
            .collect();
        let out = pool.run_level(tasks, 0).unwrap();
        assert_eq!(out, (0..16).collect::<Vec<_>>());
        for w in pool.workers() {
            assert!(pool.high_water(w) <= 4, "worker {w} exceeded slots");
            assert!(pool.high_water(w) >= 1);
        }
    }

    #[test]
    fn single_task_single_outcome() {
        let pool = WorkerPool::uniform(1, 1).unwrap();
        let out = pool
            .run_level(
                vec![LevelTask {
                    affinity: WorkerId(0),
                    job: || Ok::<_, TaskError>("x"),
                }],
                1,
            )
            .unwrap();
        assert_eq!(out, vec!["x"]);
    }

    #[test]
    fn failing_task_is_named_after_retry() {
        let pool = WorkerPool::uniform(2, 2).unwrap();
        let calls = AtomicUsize::new(0);
        let calls = &calls;
        let tasks = (0..4)
            .map(|i| LevelTask {
                affinity: WorkerId(i as u32 % 2),
                job: move || {
                    if i == 2 {
                        calls.fetch_add(1, Ordering::SeqCst);
                        Err(TaskError::Exec(ExecError::Failed {
                            exit_code: Some(1),
                            stderr_tail: b"boom".to_vec(),
                        }))
                    } else {
                        Ok(i)
                    }
                },
            })
            .collect();
        let err = pool.run_level(tasks, 1).unwrap_err();
        assert_eq!(err.failures.len(), 1);
        assert_eq!(err.failures[0].index, 2);
        assert_eq!(err.failures[0].attempts, 2);
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn ledger_report_rows_and_totals() {
        let ledger = ShuffleLedger::new();
        assert!(ledger.report().entries.is_empty());
        assert_eq!(ledger.report().to_string(), "");

        for _ in 0..2 {
            let e = ledger.begin(OpKind::Map);
            ledger.record_task(e, 10);
            ledger.finish(e, Duration::from_millis(5), true);
        }
        let report = ledger.report();
        assert_eq!(report.entries.len(), 2);
        assert!(report.entries.iter().all(|e| e.op == OpKind::Map));
        assert_eq!(report.totals.bytes_materialized, 20);
        let json = report.to_json();
        assert_eq!(json["entries"][1]["op"], "map");
        assert!(report.to_string().contains("total"));
    }
}
