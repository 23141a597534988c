//! Container-backed MapReduce over partitioned text and binary datasets.
//!
//! Unmodified command-line tools run inside isolated tasks that read and
//! write plain files; the engine materializes partitions into those files,
//! schedules tasks on a worker pool and shuffles data between stages.

pub mod dataset;
pub mod engine;
pub mod error;
pub mod executor;
pub mod ingest;
pub mod mountpoint;
pub mod scheduler;

pub use dataset::{
    concat, join_records, join_text, partition_records, split_records, split_text, Dataset, Origin, Partition, Record,
    Separator,
};
pub use engine::{
    collect, hash64, partition_for, reduce_schedule, save_binary, save_text, Engine, KeyFunction, ReduceConfig,
    StageSpec,
};
pub use error::{ConfigError, EngineError, ExecError, IngestError, MountError, TaskError};
pub use executor::{
    probe_backend, Availability, Backend, BackendChoice, BackendKind, BackendReport, Bind, ContainerBackend,
    ContainerTask, Executor, PullPolicy, SubprocessBackend, TaskOutcome,
};
pub use ingest::{
    generate_corpus, ingest, ingest_objects, read_manifest, sample_prefix, CorpusKind, CorpusStats, FsObjectStore,
    Manifest, ObjectStore, Source, SourceKind,
};
pub use mountpoint::{collect_output, Backing, MountKind, MountPoint, TaskDir, TempSpace};
pub use scheduler::{LedgerEntry, LedgerReport, LedgerTotals, OpKind, ShuffleLedger, WorkerId, WorkerPool};
