//! Command-line interface.

use std::path::PathBuf;

use anyhow::Context;
use boxmr::{generate_corpus, probe_backend, BackendChoice, CorpusKind};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{pair, parse_fractions, parse_pools, render_table, run_bench, to_csv};
use crate::demo::{run_demo, Demo, DemoConfig};
use crate::pipeline::{emit, parse_pipeline, PipelineError};
use crate::runner::{report_path, run_and_report, ExitClass, Failure, Overrides, RunReport};

#[derive(Debug, Parser)]
#[command(
    name = "boxmr",
    version,
    about = "Run containerized MapReduce pipelines over partitioned data"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Executor backend: container, subprocess or auto
    #[arg(long, global = true, value_name = "BACKEND")]
    pub executor: Option<BackendChoice>,
    /// Number of workers in the pool
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Concurrent task slots per worker
    #[arg(long, global = true)]
    pub slots: Option<usize>,
    /// Directory for materialized mounts (default /dev/shm, else the system temp dir)
    #[arg(long, global = true, value_name = "DIR")]
    pub temp_root: Option<PathBuf>,
    /// Keep per-task temp directories for inspection
    #[arg(long, global = true)]
    pub keep_temp: bool,
    /// Where to write the JSON report (default: <sink>.report.json)
    #[arg(long, global = true, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// More log output; repeat for debug
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            executor: self.executor,
            workers: self.workers,
            slots: self.slots,
            temp_root: self.temp_root.clone(),
            keep_temp: self.keep_temp,
            report: self.report.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a pipeline file
    Run { pipeline: PathBuf },
    /// Validate a pipeline file, optionally printing its canonical form
    Check {
        pipeline: PathBuf,
        #[arg(long)]
        emit: bool,
    },
    /// Weak-scaling benchmark over paired pool sizes and data fractions
    Bench {
        pipeline: PathBuf,
        /// Comma-separated pool sizes (workers)
        #[arg(long, default_value = "1,2,4")]
        pools: String,
        /// `auto` or comma-separated fractions such as 1/4,1/2,1
        #[arg(long, default_value = "auto")]
        fractions: String,
        /// Also write the table as CSV
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Generate a corpus and run a shipped example pipeline on it
    Demo {
        #[arg(value_enum)]
        which: DemoArg,
        /// Working directory for corpus, outputs and report
        #[arg(long, default_value = "boxmr-demo")]
        dir: PathBuf,
        /// Corpus size, e.g. 8MiB
        #[arg(long, default_value = "8MiB", value_parser = parse_size)]
        size: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Report which executor backends are usable
    Probe {
        #[arg(long, default_value = "docker")]
        engine: String,
    },
    /// Write a seeded synthetic corpus and its manifest
    Generate {
        #[arg(value_enum)]
        kind: CorpusArg,
        #[arg(long, value_parser = parse_size)]
        size: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DemoArg {
    Gc,
    Screening,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CorpusArg {
    Dna,
    SdfLike,
    Numbers,
}

impl From<CorpusArg> for CorpusKind {
    fn from(k: CorpusArg) -> Self {
        match k {
            CorpusArg::Dna => CorpusKind::Dna,
            CorpusArg::SdfLike => CorpusKind::SdfLike,
            CorpusArg::Numbers => CorpusKind::Numbers,
        }
    }
}

/// Byte counts with optional K/M/G (decimal) or KiB/MiB/GiB suffixes.
pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: u64 = num.parse().map_err(|_| format!("invalid size {s:?}"))?;
    let mult: u64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" => 1_000,
        "m" | "mb" => 1_000_000,
        "g" | "gb" => 1_000_000_000,
        "kib" => 1 << 10,
        "mib" => 1 << 20,
        "gib" => 1 << 30,
        other => return Err(format!("unknown size unit {other:?}")),
    };
    match n.checked_mul(mult) {
        Some(0) | None => Err(format!("size {s:?} must be between 1 byte and 2^64")),
        Some(v) => Ok(v),
    }
}

fn report_rejection(err: &PipelineError, ov: &Overrides) -> i32 {
    eprintln!("{err}");
    let class = match err {
        PipelineError::Io { .. } => ExitClass::Io,
        PipelineError::Invalid(_) => ExitClass::Validation,
    };
    if let Some(path) = &ov.report {
        let report = RunReport::rejected(None, Failure::new(class, err.to_string()));
        if let Err(e) = report.write(path) {
            log::error!("cannot write report {}: {e}", path.display());
        }
    }
    class.code()
}

fn fail(f: &Failure) -> i32 {
    eprintln!("error: {f}");
    f.class.code()
}

/// Runs one command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let ov = cli.global.overrides();
    match cli.command {
        Command::Run { pipeline } => {
            let spec = match parse_pipeline(&pipeline) {
                Ok(s) => s,
                Err(e) => return report_rejection(&e, &ov),
            };
            let (outcome, path) = run_and_report(&spec, &ov);
            let r = &outcome.report;
            match &r.failure {
                None => {
                    println!(
                        "ok: {} stage(s), {} record(s) written to {} in {:.3}s",
                        r.stages.len(),
                        outcome.output.as_ref().map_or(0, |d| d.num_records()),
                        spec.sink.path,
                        r.total_s
                    );
                    print!("{}", r.ledger);
                }
                Some(f) => {
                    eprintln!("error: {}", f.message);
                    if let (Some(stage), Some(op)) = (f.stage_index, &f.op) {
                        eprintln!("  stage {stage} ({op}), partition {:?}", f.partition);
                    }
                }
            }
            eprintln!("report: {}", path.display());
            r.exit_code
        }
        Command::Check { pipeline, emit: show } => match parse_pipeline(&pipeline) {
            Ok(spec) => {
                if show {
                    print!("{}", emit(&spec));
                } else {
                    println!("ok: {} stage(s)", spec.stages.len());
                }
                0
            }
            Err(e) => report_rejection(&e, &ov),
        },
        Command::Bench {
            pipeline,
            pools,
            fractions,
            csv,
        } => {
            let spec = match parse_pipeline(&pipeline) {
                Ok(s) => s,
                Err(e) => return report_rejection(&e, &ov),
            };
            let pairs = parse_pools(&pools).and_then(|p| parse_fractions(&fractions, &p).and_then(|f| pair(&p, &f)));
            let pairs = match pairs {
                Ok(p) => p,
                Err(e) => return fail(&Failure::new(ExitClass::Validation, e)),
            };
            match run_bench(&spec, &ov, &pairs) {
                Ok(rows) => {
                    print!("{}", render_table(&rows));
                    if let Some(path) = csv {
                        if let Err(e) = std::fs::write(&path, to_csv(&rows)) {
                            return fail(&Failure::new(ExitClass::Io, format!("{}: {e}", path.display())));
                        }
                    }
                    0
                }
                Err(f) => fail(&f),
            }
        }
        Command::Demo { which, dir, size, seed } => {
            let demo = match which {
                DemoArg::Gc => Demo::Gc,
                DemoArg::Screening => Demo::Screening,
            };
            let mut ov = ov;
            if ov.executor.is_none() {
                ov.executor = Some(BackendChoice::Auto);
            }
            let spec_report = report_path(&crate::demo::demo_spec(demo, &dir), &ov);
            match run_demo(demo, &DemoConfig { dir, size, seed }, &ov) {
                Ok(res) => {
                    if let Some(f) = &res.outcome.report.failure {
                        eprintln!("error: {}", f.message);
                        eprintln!("report: {}", spec_report.display());
                        return res.outcome.report.exit_code;
                    }
                    println!("result:   {}", res.observed.join(" "));
                    println!("manifest: {}", res.expected.join(" "));
                    println!("report:   {}", res.report_path.display());
                    if res.matches() {
                        println!("ok: output matches the corpus manifest");
                        0
                    } else {
                        eprintln!("error: output does not match the corpus manifest");
                        ExitClass::TaskFailure.code()
                    }
                }
                Err(f) => fail(&f),
            }
        }
        Command::Probe { engine } => {
            let report = probe_backend(&engine, ov.executor.unwrap_or_default());
            match serde_json::to_string_pretty(&report) {
                Ok(json) => println!("{json}"),
                Err(e) => return fail(&Failure::new(ExitClass::Io, e.to_string())),
            }
            if report.selected.is_some() {
                0
            } else {
                ExitClass::Environment.code()
            }
        }
        Command::Generate { kind, size, seed, dir } => {
            let result = generate_corpus(kind.into(), size, seed, &dir)
                .with_context(|| format!("generating corpus in {}", dir.display()))
                .and_then(|m| Ok(serde_json::to_string_pretty(&m)?));
            match result {
                Ok(json) => {
                    println!("{json}");
                    0
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitClass::Io.code()
                }
            }
        }
    }
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_parse_after_subcommand() {
        let cli = Cli::try_parse_from([
            "boxmr",
            "run",
            "p.toml",
            "--executor",
            "subprocess",
            "--workers",
            "2",
            "--slots",
            "3",
            "--keep-temp",
        ])
        .unwrap();
        let ov = cli.global.overrides();
        assert_eq!(ov.executor, Some(BackendChoice::Subprocess));
        assert_eq!((ov.workers, ov.slots, ov.keep_temp), (Some(2), Some(3), true));
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_size("64MiB"), Ok(64 << 20));
        assert_eq!(parse_size("2k"), Ok(2000));
        assert_eq!(parse_size("17"), Ok(17));
        assert!(parse_size("0").is_err());
        assert!(parse_size("3 parsecs").is_err());
    }
}
