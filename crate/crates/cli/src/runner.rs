//! Executes a parsed pipeline and produces its JSON report.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use boxmr::{
    save_binary, save_text, BackendChoice, BackendKind, Backing, ConfigError, Dataset, Engine, EngineError, ExecError,
    Executor, IngestError, LedgerReport, MountError, ReduceConfig, Separator, StageSpec, TaskError, TempSpace,
    WorkerPool,
};
use serde::{Deserialize, Serialize};

use crate::pipeline::{PipelineSpec, SinkKind, StageOp};

/// Process exit classes. Codes are disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitClass {
    Ok,
    Validation,
    TaskFailure,
    Io,
    Environment,
}

impl ExitClass {
    pub fn code(self) -> i32 {
        match self {
            ExitClass::Ok => 0,
            ExitClass::Validation => 2,
            ExitClass::TaskFailure => 3,
            ExitClass::Io => 4,
            ExitClass::Environment => 5,
        }
    }
}

/// Command-line settings that take precedence over the pipeline file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub executor: Option<BackendChoice>,
    pub workers: Option<usize>,
    pub slots: Option<usize>,
    pub temp_root: Option<PathBuf>,
    pub keep_temp: bool,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub index: usize,
    pub op: String,
    pub partitions_out: usize,
    pub records_out: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub class: Option<ExitClass>,
    pub message: String,
    pub stage_index: Option<usize>,
    pub op: Option<String>,
    pub partition: Option<usize>,
    pub level: Option<usize>,
    pub attempts: Option<usize>,
    pub exit_code: Option<i32>,
    pub stderr_tail: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: ExitClass,
    pub exit_code: i32,
    pub backend: Option<BackendKind>,
    pub workers: usize,
    pub slots_per_worker: usize,
    pub source_partitions: usize,
    pub source_records: usize,
    pub ingest_s: f64,
    pub total_s: f64,
    pub stages: Vec<StageReport>,
    pub ledger: LedgerReport,
    pub sink: String,
    pub failure: Option<FailureReport>,
}

impl RunReport {
    fn empty(spec: Option<&PipelineSpec>) -> Self {
        RunReport {
            status: ExitClass::Ok,
            exit_code: 0,
            backend: None,
            workers: 0,
            slots_per_worker: 0,
            source_partitions: 0,
            source_records: 0,
            ingest_s: 0.0,
            total_s: 0.0,
            stages: Vec::new(),
            ledger: LedgerReport::default(),
            sink: spec.map(|s| s.sink.path.clone()).unwrap_or_default(),
            failure: None,
        }
    }

    /// Report for a pipeline that never started.
    pub fn rejected(spec: Option<&PipelineSpec>, failure: Failure) -> Self {
        let mut r = Self::empty(spec);
        r.fail(failure);
        r
    }

    fn fail(&mut self, failure: Failure) {
        self.status = failure.class;
        self.exit_code = failure.class.code();
        self.failure = Some(FailureReport {
            class: Some(failure.class),
            ..*failure.report
        });
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut json = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        json.push(b'\n');
        std::fs::write(path, json)
    }
}

/// A classified failure with the details that go into the report.
#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub class: ExitClass,
    pub report: Box<FailureReport>,
}

impl Failure {
    pub fn new(class: ExitClass, message: impl Into<String>) -> Self {
        Failure {
            class,
            report: Box::new(FailureReport {
                message: message.into(),
                ..Default::default()
            }),
        }
    }

    fn in_stage(mut self, index: usize, op: &str) -> Self {
        self.report.stage_index = Some(index);
        self.report.op = Some(op.to_string());
        self
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let (Some(i), Some(op)) = (self.report.stage_index, &self.report.op) {
            write!(f, "stage {i} ({op}): ")?;
        }
        f.write_str(&self.report.message)
    }
}

fn exec_class(e: &ExecError) -> ExitClass {
    match e {
        ExecError::Failed { .. } | ExecError::Timeout { .. } => ExitClass::TaskFailure,
        ExecError::Environment(_) => ExitClass::Environment,
        ExecError::Config(_) => ExitClass::Validation,
        ExecError::Io(_) => ExitClass::Io,
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::Config(_) => Failure::new(ExitClass::Validation, message),
            EngineError::Io { .. } => Failure::new(ExitClass::Io, message),
            EngineError::Key { partition, .. } => {
                let mut f = Failure::new(ExitClass::TaskFailure, message);
                f.report.partition = Some(partition);
                f
            }
            EngineError::Task {
                partition,
                level,
                attempts,
                source,
            } => {
                let class = match &source {
                    TaskError::Exec(e) => exec_class(e),
                    TaskError::Mount(MountError::WrongKind { .. }) => ExitClass::TaskFailure,
                    TaskError::Mount(_) => ExitClass::Io,
                };
                let (exit_code, stderr_tail) = match &source {
                    TaskError::Exec(ExecError::Failed { exit_code, stderr_tail }) => {
                        (*exit_code, Some(String::from_utf8_lossy(stderr_tail).into_owned()))
                    }
                    _ => (None, None),
                };
                Failure {
                    class,
                    report: Box::new(FailureReport {
                        message,
                        partition: Some(partition),
                        level,
                        attempts: Some(attempts),
                        exit_code,
                        stderr_tail,
                        ..Default::default()
                    }),
                }
            }
        }
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        let class = match e {
            IngestError::Config(_) => ExitClass::Validation,
            IngestError::Io { .. } | IngestError::Missing(_) => ExitClass::Io,
        };
        Failure::new(class, format!("ingestion failed: {e}"))
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(ExitClass::Validation, e.to_string())
    }
}

/// Resolved pool shape: `workers` workers with `slots` slots each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolShape {
    pub workers: usize,
    pub slots: usize,
}

impl PoolShape {
    pub fn resolve(spec: &PipelineSpec, ov: &Overrides) -> Self {
        let cores = std::thread::available_parallelism().map_or(1, usize::from);
        PoolShape {
            workers: ov.workers.or(spec.pool.workers).unwrap_or(1).max(1),
            slots: ov.slots.or(spec.pool.slots).unwrap_or(cores).max(1),
        }
    }

    pub fn total(self) -> usize {
        self.workers * self.slots
    }
}

pub fn temp_space(ov: &Overrides) -> TempSpace {
    let space = match &ov.temp_root {
        Some(root) if root.starts_with("/dev/shm") => TempSpace::new(root, Backing::MemoryFs),
        Some(root) => TempSpace::new(root, Backing::Disk),
        None => TempSpace::default_root(),
    };
    space.keep_temp(ov.keep_temp)
}

pub fn build_engine(spec: &PipelineSpec, ov: &Overrides, shape: PoolShape) -> Result<Engine, Failure> {
    let ex = &spec.executor;
    let choice = ov.executor.unwrap_or(ex.backend);
    let executor = Executor::from_choice(choice, &ex.engine, ex.pull, shape.total())
        .map_err(|e| Failure::new(ExitClass::Environment, e.to_string()))?;
    let pool = WorkerPool::uniform(shape.workers, shape.slots)?;
    Ok(Engine::new(executor, pool, temp_space(ov))
        .with_retries(ex.retries)
        .with_timeout(ex.timeout_s.map(Duration::from_secs))
        .with_cpu_limit(ex.cpus))
}

pub fn source_of(spec: &PipelineSpec) -> Result<boxmr::Source, Failure> {
    let src = &spec.source;
    Ok(boxmr::Source {
        kind: src.kind,
        location: src.path.clone(),
        separator: Separator::new(src.separator.clone().into_bytes())?,
        store: src.store.as_ref().map(PathBuf::from),
    })
}

/// Runs every stage in order, appending one entry per stage to `reports`.
pub fn run_stages(
    engine: &Engine,
    spec: &PipelineSpec,
    mut ds: Dataset,
    reports: &mut Vec<StageReport>,
) -> Result<Dataset, Failure> {
    for (index, stage) in spec.stages.iter().enumerate() {
        engine.ledger().set_stage(Some(index));
        let started = Instant::now();
        let op = stage.name();
        ds = run_stage(engine, stage, &ds).map_err(|f| f.in_stage(index, op))?;
        reports.push(StageReport {
            index,
            op: op.to_string(),
            partitions_out: ds.num_partitions(),
            records_out: ds.num_records(),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    engine.ledger().set_stage(None);
    Ok(ds)
}

fn run_stage(engine: &Engine, stage: &StageOp, ds: &Dataset) -> Result<Dataset, Failure> {
    match stage {
        StageOp::Map {
            image,
            command,
            input,
            output,
        } => {
            let st = StageSpec::new(input.to_mount()?, output.to_mount()?, image, command)?;
            Ok(engine.map(ds, &st)?)
        }
        StageOp::Reduce {
            image,
            command,
            input,
            output,
            depth,
        } => {
            let st = StageSpec::new(input.to_mount()?, output.to_mount()?, image, command)?;
            Ok(engine.reduce(ds, &st, ReduceConfig::new(*depth)?)?)
        }
        StageOp::RepartitionBy { partitions, key } => {
            let key = key.compile().map_err(|e| Failure::new(ExitClass::Validation, e))?;
            let n = partitions.unwrap_or(ds.num_partitions());
            Ok(engine.repartition_by(ds, &key, n)?)
        }
    }
}

pub fn write_sink(spec: &PipelineSpec, ds: &Dataset) -> Result<(), Failure> {
    let path = Path::new(&spec.sink.path);
    let written = match spec.sink.kind {
        SinkKind::TextFile => {
            let sep = match &spec.sink.separator {
                Some(s) => Separator::new(s.clone().into_bytes())?,
                None => Separator::newline(),
            };
            save_text(ds, &sep, path)
        }
        SinkKind::BinaryDir => save_binary(ds, path),
    };
    written.map_err(|e| Failure::new(ExitClass::Io, format!("writing sink: {e}")))
}

/// Default report location: next to the sink.
pub fn report_path(spec: &PipelineSpec, ov: &Overrides) -> PathBuf {
    ov.report
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.report.json", spec.sink.path.trim_end_matches('/'))))
}

pub struct RunOutcome {
    pub report: RunReport,
    pub output: Option<Dataset>,
}

/// Ingests, runs all stages and writes the sink. Never panics on task or
/// I/O failures; they are classified into the report.
pub fn run_pipeline(spec: &PipelineSpec, ov: &Overrides) -> RunOutcome {
    let started = Instant::now();
    let mut report = RunReport::empty(Some(spec));
    let shape = PoolShape::resolve(spec, ov);
    report.workers = shape.workers;
    report.slots_per_worker = shape.slots;

    let result = (|| -> Result<Dataset, Failure> {
        spec.validate()
            .map_err(|e| Failure::new(ExitClass::Validation, e.to_string()))?;
        let engine = build_engine(spec, ov, shape)?;
        report.backend = Some(engine.executor().kind());
        log::info!(
            "running {} stage(s) on {} backend, {} worker(s) x {} slot(s)",
            spec.stages.len(),
            engine.executor().kind(),
            shape.workers,
            shape.slots
        );
        let t = Instant::now();
        let partitions = spec.source.partitions.unwrap_or(shape.total());
        let ds = boxmr::ingest(&source_of(spec)?, partitions)?;
        report.ingest_s = t.elapsed().as_secs_f64();
        report.source_partitions = ds.num_partitions();
        report.source_records = ds.num_records();
        let result = run_stages(&engine, spec, ds, &mut report.stages);
        report.ledger = engine.ledger().report();
        let out = result?;
        write_sink(spec, &out)?;
        Ok(out)
    })();

    report.total_s = started.elapsed().as_secs_f64();
    match result {
        Ok(ds) => RunOutcome {
            report,
            output: Some(ds),
        },
        Err(failure) => {
            report.fail(failure);
            RunOutcome { report, output: None }
        }
    }
}

/// [`run_pipeline`] plus writing the report file. A report that cannot be
/// written turns a success into an I/O failure.
pub fn run_and_report(spec: &PipelineSpec, ov: &Overrides) -> (RunOutcome, PathBuf) {
    let mut outcome = run_pipeline(spec, ov);
    let path = report_path(spec, ov);
    if let Err(e) = outcome.report.write(&path) {
        log::error!("cannot write report {}: {e}", path.display());
        if outcome.report.failure.is_none() {
            outcome.report.fail(Failure::new(
                ExitClass::Io,
                format!("cannot write report {}: {e}", path.display()),
            ));
        }
    }
    (outcome, path)
}
