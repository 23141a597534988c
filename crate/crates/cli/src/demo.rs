//! Shipped end-to-end examples, checked against their corpus manifests.

use std::path::{Path, PathBuf};

use boxmr::{generate_corpus, read_manifest, CorpusKind, Manifest};

use crate::pipeline::{parse_str, PipelineSpec};
use crate::runner::{run_and_report, ExitClass, Failure, Overrides, RunOutcome};

pub const GC_TEMPLATE: &str = include_str!("../pipelines/gc.toml");
pub const SCREENING_TEMPLATE: &str = include_str!("../pipelines/screening.toml");
pub const CHROMOSOMES_TEMPLATE: &str = include_str!("../pipelines/chromosomes.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Demo {
    Gc,
    Screening,
}

impl Demo {
    pub fn template(self) -> &'static str {
        match self {
            Demo::Gc => GC_TEMPLATE,
            Demo::Screening => SCREENING_TEMPLATE,
        }
    }

    pub fn corpus(self) -> CorpusKind {
        match self {
            Demo::Gc => CorpusKind::Dna,
            Demo::Screening => CorpusKind::SdfLike,
        }
    }

    /// Values the sink must contain, from the manifest alone.
    pub fn expected(self, manifest: &Manifest) -> Vec<String> {
        match self {
            Demo::Gc => vec![manifest.stats.gc_count.unwrap_or_default().to_string()],
            Demo::Screening => manifest
                .stats
                .top_scores
                .iter()
                .flatten()
                .take(3)
                .map(u64::to_string)
                .collect(),
        }
    }

    /// Comparable values extracted from the sink text.
    pub fn observed(self, sink: &str) -> Vec<String> {
        sink.lines()
            .filter_map(|l| l.split_whitespace().next())
            .map(str::to_string)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct DemoConfig {
    pub dir: PathBuf,
    pub size: u64,
    pub seed: u64,
}

pub struct DemoResult {
    pub outcome: RunOutcome,
    pub report_path: PathBuf,
    pub manifest: Manifest,
    pub expected: Vec<String>,
    pub observed: Vec<String>,
}

impl DemoResult {
    pub fn matches(&self) -> bool {
        self.outcome.report.failure.is_none() && self.expected == self.observed
    }
}

/// The demo's pipeline with paths resolved under `dir`.
pub fn demo_spec(demo: Demo, dir: &Path) -> PipelineSpec {
    let mut spec = parse_str(demo.template()).expect("shipped templates are valid");
    spec.resolve_paths(dir);
    spec
}

/// Generates the corpus under `<dir>/data` unless an identical one exists.
pub fn prepare_corpus(kind: CorpusKind, cfg: &DemoConfig) -> std::io::Result<Manifest> {
    let data = cfg.dir.join("data");
    if let Ok(m) = read_manifest(&data) {
        if m.kind == kind && m.seed == cfg.seed && m.size == cfg.size && data.join(kind.file_name()).is_file() {
            return Ok(m);
        }
    }
    generate_corpus(kind, cfg.size, cfg.seed, &data)
}

pub fn run_demo(demo: Demo, cfg: &DemoConfig, ov: &Overrides) -> Result<DemoResult, Failure> {
    let manifest = prepare_corpus(demo.corpus(), cfg)
        .map_err(|e| Failure::new(ExitClass::Io, format!("generating corpus: {e}")))?;
    let spec = demo_spec(demo, &cfg.dir);
    let (outcome, report_path) = run_and_report(&spec, ov);
    let observed = std::fs::read_to_string(&spec.sink.path)
        .map(|s| demo.observed(&s))
        .unwrap_or_default();
    Ok(DemoResult {
        outcome,
        report_path,
        expected: demo.expected(&manifest),
        manifest,
        observed,
    })
}
