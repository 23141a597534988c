//! Loading datasets from files or an object store, and generating seeded
//! synthetic corpora with ground-truth manifests.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use bytes::{Bytes, BytesMut};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{partition_records, split_text, Dataset, Origin, Partition, Record, Separator};
use crate::error::{ConfigError, IngestError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    TextFile,
    TextDir,
    BinaryDir,
    ObjectPrefix,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Source {
    pub kind: SourceKind,
    /// File or directory path; the object prefix for `ObjectPrefix`.
    pub location: String,
    pub separator: Separator,
    /// Root of the filesystem-backed object store (`ObjectPrefix` only).
    pub store: Option<PathBuf>,
}

impl Source {
    pub fn text_file(path: impl Into<String>, separator: Separator) -> Self {
        Source {
            kind: SourceKind::TextFile,
            location: path.into(),
            separator,
            store: None,
        }
    }

    pub fn text_dir(path: impl Into<String>, separator: Separator) -> Self {
        Source {
            kind: SourceKind::TextDir,
            ..Self::text_file(path, separator)
        }
    }

    pub fn binary_dir(path: impl Into<String>) -> Self {
        Source {
            kind: SourceKind::BinaryDir,
            ..Self::text_file(path, Separator::newline())
        }
    }

    pub fn object_prefix(store: impl Into<PathBuf>, prefix: impl Into<String>, separator: Separator) -> Self {
        Source {
            kind: SourceKind::ObjectPrefix,
            location: prefix.into(),
            separator,
            store: Some(store.into()),
        }
    }
}

/// Minimal object-store surface: ordered listing and whole-object reads.
pub trait ObjectStore {
    /// Object names starting with `prefix`, in lexicographic order.
    fn list(&self, prefix: &str) -> Result<Vec<String>, IngestError>;
    fn get(&self, name: &str) -> Result<Bytes, IngestError>;
}

/// Object store backed by a local directory: objects are files, names are
/// `/`-separated paths relative to the root.
#[derive(Clone, Debug)]
pub struct FsObjectStore {
    root: PathBuf,
}

impl FsObjectStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FsObjectStore { root: root.into() }
    }

    fn walk(&self, dir: &Path, rel: &str, out: &mut Vec<String>) -> Result<(), IngestError> {
        for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
            let entry = entry.map_err(|e| io_err(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let rel = if rel.is_empty() { name } else { format!("{rel}/{name}") };
            let ty = entry.file_type().map_err(|e| io_err(entry.path(), e))?;
            if ty.is_dir() {
                self.walk(&entry.path(), &rel, out)?;
            } else if ty.is_file() {
                out.push(rel);
            }
        }
        Ok(())
    }
}

impl ObjectStore for FsObjectStore {
    fn list(&self, prefix: &str) -> Result<Vec<String>, IngestError> {
        if !self.root.is_dir() {
            return Err(IngestError::Missing(self.root.clone()));
        }
        let mut names = Vec::new();
        self.walk(&self.root, "", &mut names)?;
        names.retain(|n| n.starts_with(prefix));
        names.sort();
        Ok(names)
    }

    fn get(&self, name: &str) -> Result<Bytes, IngestError> {
        let path = self.root.join(name);
        fs::read(&path).map(Bytes::from).map_err(|e| io_err(path, e))
    }
}

fn io_err(path: impl Into<PathBuf>, source: io::Error) -> IngestError {
    IngestError::Io {
        path: path.into(),
        source,
    }
}

/// Regular files directly inside `dir`, sorted by name.
fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    if !dir.is_dir() {
        return Err(IngestError::Missing(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        if entry.file_type().map_err(|e| io_err(entry.path(), e))?.is_file() {
            files.push(entry.path());
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Concatenates text chunks, making sure a separator sits between chunks.
fn join_chunks(chunks: impl IntoIterator<Item = Bytes>, sep: &Separator) -> Bytes {
    let mut out = BytesMut::new();
    for chunk in chunks {
        if chunk.is_empty() {
            continue;
        }
        out.extend_from_slice(&chunk);
        if !chunk.ends_with(sep.as_bytes()) {
            out.extend_from_slice(sep.as_bytes());
        }
    }
    out.freeze()
}

fn empty_with_warning(what: &str) -> Dataset {
    log::warn!("no input found under {what}; producing an empty dataset");
    Dataset::new(Vec::new(), Origin::Ingested)
}

pub fn ingest(src: &Source, target_partitions: usize) -> Result<Dataset, IngestError> {
    if target_partitions == 0 {
        return Err(ConfigError::ZeroPartitions.into());
    }
    let location = Path::new(&src.location);
    match src.kind {
        SourceKind::TextFile => {
            if !location.exists() {
                return Err(IngestError::Missing(location.to_path_buf()));
            }
            let bytes = fs::read(location).map_err(|e| io_err(location, e))?;
            Ok(split_text(bytes, &src.separator, target_partitions)?)
        }
        SourceKind::TextDir => {
            let files = sorted_files(location)?;
            if files.is_empty() {
                return Ok(empty_with_warning(&src.location));
            }
            let chunks = files
                .iter()
                .map(|f| fs::read(f).map(Bytes::from).map_err(|e| io_err(f, e)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(split_text(
                join_chunks(chunks, &src.separator),
                &src.separator,
                target_partitions,
            )?)
        }
        SourceKind::BinaryDir => {
            let files = sorted_files(location)?;
            if files.is_empty() {
                return Ok(empty_with_warning(&src.location));
            }
            let mut groups: Vec<Vec<Record>> = vec![Vec::new(); target_partitions];
            for (i, f) in files.iter().enumerate() {
                let bytes = fs::read(f).map_err(|e| io_err(f, e))?;
                groups[i % target_partitions].push(Record::from(bytes));
            }
            let partitions = groups
                .into_iter()
                .enumerate()
                .map(|(i, g)| Partition::new(i, g))
                .collect();
            Ok(Dataset::new(partitions, Origin::Ingested))
        }
        SourceKind::ObjectPrefix => {
            let root = src.store.clone().unwrap_or_else(|| PathBuf::from("."));
            ingest_objects(
                &FsObjectStore::new(root),
                &src.location,
                &src.separator,
                target_partitions,
            )
        }
    }
}

/// Text ingestion through any [`ObjectStore`].
pub fn ingest_objects(
    store: &dyn ObjectStore,
    prefix: &str,
    sep: &Separator,
    target_partitions: usize,
) -> Result<Dataset, IngestError> {
    if target_partitions == 0 {
        return Err(ConfigError::ZeroPartitions.into());
    }
    let names = store.list(prefix)?;
    if names.is_empty() {
        return Ok(empty_with_warning(prefix));
    }
    let chunks = names.iter().map(|n| store.get(n)).collect::<Result<Vec<_>, _>>()?;
    Ok(split_text(join_chunks(chunks, sep), sep, target_partitions)?)
}

/// Keeps the first `fraction` of the records (by count, in order, at least
/// one when any exist) and rebalances them into `target_partitions`.
pub fn sample_prefix(ds: &Dataset, fraction: f64, sep_len: usize, target_partitions: usize) -> Dataset {
    let total = ds.num_records();
    let keep = ((total as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let keep = if total == 0 { 0 } else { keep.clamp(1, total) };
    let records: Vec<Record> = ds.records().take(keep).cloned().collect();
    partition_records(records, sep_len, target_partitions, Origin::Ingested)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Dna,
    SdfLike,
    Numbers,
}

impl CorpusKind {
    pub fn file_name(self) -> &'static str {
        match self {
            CorpusKind::Dna => "dna.txt",
            CorpusKind::SdfLike => "library.sdf",
            CorpusKind::Numbers => "numbers.txt",
        }
    }

    pub fn separator(self) -> Separator {
        match self {
            CorpusKind::SdfLike => Separator::sdf(),
            _ => Separator::newline(),
        }
    }
}

/// Ground truth computed while generating.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gc_count: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sum: Option<u64>,
    /// Highest scores, descending (sdf_like only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top_scores: Option<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: CorpusKind,
    pub seed: u64,
    /// Bytes actually written.
    pub size: u64,
    pub files: Vec<String>,
    pub stats: CorpusStats,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const DNA_LINE: usize = 80;
const TOP_SCORES: usize = 10;

/// Writes a deterministic corpus of roughly `size_bytes` into `dir`, plus
/// `manifest.json`. Same arguments always give the same bytes.
pub fn generate_corpus(kind: CorpusKind, size_bytes: u64, seed: u64, dir: &Path) -> io::Result<Manifest> {
    let size_bytes = size_bytes.max(1);
    fs::create_dir_all(dir)?;
    let path = dir.join(kind.file_name());
    let mut w = BufWriter::with_capacity(1 << 20, fs::File::create(&path)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (size, stats) = match kind {
        CorpusKind::Dna => write_dna(&mut w, &mut rng, size_bytes)?,
        CorpusKind::SdfLike => write_sdf(&mut w, &mut rng, size_bytes, seed)?,
        CorpusKind::Numbers => write_numbers(&mut w, &mut rng, size_bytes)?,
    };
    w.flush()?;
    let manifest = Manifest {
        kind,
        seed,
        size,
        files: vec![kind.file_name().to_string()],
        stats,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> io::Result<Manifest> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    serde_json::from_slice(&bytes).map_err(io::Error::other)
}

fn write_dna(w: &mut impl Write, rng: &mut ChaCha8Rng, size: u64) -> io::Result<(u64, CorpusStats)> {
    const BASES: [u8; 4] = *b"ACGT";
    let mut written = 0u64;
    let mut gc = 0u64;
    let mut lines = 0u64;
    let mut line = Vec::with_capacity(DNA_LINE + 1);
    while written < size {
        let len = (size - written - 1).min(DNA_LINE as u64).max(1) as usize;
        line.clear();
        let mut bits = 0u64;
        for i in 0..len {
            if i % 32 == 0 {
                bits = rng.random();
            }
            let base = BASES[(bits & 3) as usize];
            bits >>= 2;
            gc += u64::from(base == b'G' || base == b'C');
            line.push(base);
        }
        line.push(b'\n');
        w.write_all(&line)?;
        written += line.len() as u64;
        lines += 1;
    }
    Ok((
        written,
        CorpusStats {
            records: lines,
            gc_count: Some(gc),
            ..Default::default()
        },
    ))
}

/// Distinct scores: an odd multiplier is a bijection modulo 2^30.
fn sdf_score(i: u64, seed: u64) -> u64 {
    (i.wrapping_mul(0x2545_F491).wrapping_add(seed.wrapping_mul(0x9E37_79B9))) & ((1 << 30) - 1)
}

fn write_sdf(w: &mut impl Write, rng: &mut ChaCha8Rng, size: u64, seed: u64) -> io::Result<(u64, CorpusStats)> {
    const ELEMENTS: [&str; 4] = ["C", "N", "O", "S"];
    let mut written = 0u64;
    let mut records = 0u64;
    let mut top: Vec<u64> = Vec::new();
    while written < size {
        let atoms = rng.random_range(2..6usize);
        let mut mol = format!(
            "MOL{records:08}\n  boxmr-gen\n\n{atoms:>3}{:>3}  0  0  0  0            999 V2000\n",
            atoms - 1
        );
        for _ in 0..atoms {
            let (x, y, z): (f32, f32, f32) = (
                rng.random_range(-9.0..9.0),
                rng.random_range(-9.0..9.0),
                rng.random_range(-9.0..9.0),
            );
            let el = ELEMENTS[rng.random_range(0..ELEMENTS.len())];
            mol.push_str(&format!(
                "{x:>10.4}{y:>10.4}{z:>10.4} {el:<3} 0  0  0  0  0  0  0  0  0  0  0  0\n"
            ));
        }
        for b in 1..atoms {
            mol.push_str(&format!("{:>3}{:>3}  1  0\n", b, b + 1));
        }
        let score = sdf_score(records, seed);
        mol.push_str(&format!("M  END\n> <score>\n{score}\n\n$$$$\n"));
        w.write_all(mol.as_bytes())?;
        written += mol.len() as u64;
        records += 1;
        top.push(score);
        if top.len() > 4 * TOP_SCORES {
            top.sort_unstable_by(|a, b| b.cmp(a));
            top.truncate(TOP_SCORES);
        }
    }
    top.sort_unstable_by(|a, b| b.cmp(a));
    top.truncate(TOP_SCORES);
    Ok((
        written,
        CorpusStats {
            records,
            top_scores: Some(top),
            ..Default::default()
        },
    ))
}

/// A shuffled permutation of `1..=n`, one per line, with `n` as large as
/// fits in `size` bytes.
fn write_numbers(w: &mut impl Write, rng: &mut ChaCha8Rng, size: u64) -> io::Result<(u64, CorpusStats)> {
    let digits = |k: u64| k.checked_ilog10().unwrap_or(0) as u64 + 1;
    let mut n = 0u64;
    let mut bytes = 0u64;
    while bytes + digits(n + 1) < size {
        n += 1;
        bytes += digits(n) + 1;
    }
    let n = n.max(1);
    let mut values: Vec<u64> = (1..=n).collect();
    values.shuffle(rng);
    let mut written = 0u64;
    let mut sum = 0u64;
    for v in values {
        let line = format!("{v}\n");
        w.write_all(line.as_bytes())?;
        written += line.len() as u64;
        sum += v;
    }
    Ok((
        written,
        CorpusStats {
            records: n,
            sum: Some(sum),
            ..Default::default()
        },
    ))
}
