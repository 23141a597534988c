//! Immutable partitioned datasets of opaque byte records.
//!
//! Raw byte streams are cut into records on a literal separator and the
//! records are grouped into contiguous partitions balanced by byte count.
//! Records are never split across partitions.

use std::fmt;
use std::sync::Arc;

use bytes::{Bytes, BytesMut};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::scheduler::WorkerId;

/// An uninterpreted byte payload. Never carries its trailing separator.
#[derive(Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Record(Bytes);

impl Record {
    pub fn new(bytes: impl Into<Bytes>) -> Self {
        Record(bytes.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn bytes(&self) -> &Bytes {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Record({:?})", String::from_utf8_lossy(&self.0))
    }
}

impl From<&str> for Record {
    fn from(s: &str) -> Self {
        Record(Bytes::copy_from_slice(s.as_bytes()))
    }
}

impl From<String> for Record {
    fn from(s: String) -> Self {
        Record(Bytes::from(s))
    }
}

impl From<Vec<u8>> for Record {
    fn from(v: Vec<u8>) -> Self {
        Record(Bytes::from(v))
    }
}

impl From<&[u8]> for Record {
    fn from(v: &[u8]) -> Self {
        Record(Bytes::copy_from_slice(v))
    }
}

impl AsRef<[u8]> for Record {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

/// Literal, non-empty record delimiter. Never interpreted as a pattern.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Separator(Bytes);

impl Separator {
    pub fn new(bytes: impl Into<Bytes>) -> Result<Self, ConfigError> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(ConfigError::EmptySeparator);
        }
        Ok(Separator(bytes))
    }

    /// Single newline, the default for line-oriented text.
    pub fn newline() -> Self {
        Separator(Bytes::from_static(b"\n"))
    }

    /// The molecule terminator used by SDF files.
    pub fn sdf() -> Self {
        Separator(Bytes::from_static(b"\n$$$$\n"))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Default for Separator {
    fn default() -> Self {
        Separator::newline()
    }
}

impl fmt::Debug for Separator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Separator({:?})", String::from_utf8_lossy(&self.0))
    }
}

impl TryFrom<String> for Separator {
    type Error = ConfigError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Separator::new(Bytes::from(s))
    }
}

impl From<Separator> for String {
    fn from(sep: Separator) -> String {
        String::from_utf8_lossy(&sep.0).into_owned()
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Partition {
    id: usize,
    records: Arc<[Record]>,
    affinity: Option<WorkerId>,
}

impl Partition {
    pub fn new(id: usize, records: Vec<Record>) -> Self {
        Partition {
            id,
            records: records.into(),
            affinity: None,
        }
    }

    pub fn with_affinity(mut self, affinity: Option<WorkerId>) -> Self {
        self.affinity = affinity;
        self
    }

    pub(crate) fn with_id(mut self, id: usize) -> Self {
        self.id = id;
        self
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn affinity(&self) -> Option<WorkerId> {
        self.affinity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sum of record payload sizes, separators excluded.
    pub fn byte_size(&self) -> usize {
        self.records.iter().map(Record::len).sum()
    }
}

impl fmt::Debug for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Partition")
            .field("id", &self.id)
            .field("affinity", &self.affinity)
            .field("records", &self.records)
            .finish()
    }
}

/// Which operation produced a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Ingested,
    Map,
    Reduce,
    Repartition,
}

/// An immutable list of partitions whose ids are exactly `0..len`.
#[derive(Clone, PartialEq, Eq)]
pub struct Dataset {
    partitions: Arc<[Partition]>,
    origin: Origin,
}

impl Dataset {
    /// Builds a dataset, renumbering partitions so that ids are `0..len`.
    /// An empty partition list becomes a single empty partition.
    pub fn new(partitions: Vec<Partition>, origin: Origin) -> Self {
        let partitions: Vec<Partition> = if partitions.is_empty() {
            vec![Partition::new(0, Vec::new())]
        } else {
            partitions.into_iter().enumerate().map(|(i, p)| p.with_id(i)).collect()
        };
        Dataset {
            partitions: partitions.into(),
            origin,
        }
    }

    /// Convenience constructor from plain record groups.
    pub fn from_records<R, I>(groups: impl IntoIterator<Item = I>) -> Self
    where
        I: IntoIterator<Item = R>,
        R: Into<Record>,
    {
        let partitions = groups
            .into_iter()
            .enumerate()
            .map(|(i, g)| Partition::new(i, g.into_iter().map(Into::into).collect()))
            .collect();
        Dataset::new(partitions, Origin::Ingested)
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn num_records(&self) -> usize {
        self.partitions.iter().map(Partition::len).sum()
    }

    pub fn byte_size(&self) -> usize {
        self.partitions.iter().map(Partition::byte_size).sum()
    }

    /// All records in partition-id order.
    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.partitions.iter().flat_map(|p| p.records().iter())
    }

    pub fn affinities(&self) -> Vec<Option<WorkerId>> {
        self.partitions.iter().map(Partition::affinity).collect()
    }
}

impl fmt::Debug for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dataset")
            .field("origin", &self.origin)
            .field("partitions", &self.partitions)
            .finish()
    }
}

/// Cuts `stream` into the maximal `sep`-delimited records. A trailing
/// segment after the last separator is a record only when non-empty.
pub fn split_records(stream: &Bytes, sep: &Separator) -> Vec<Record> {
    let mut records = Vec::new();
    let mut start = 0;
    for pos in memchr::memmem::find_iter(stream, sep.as_bytes()) {
        // find_iter yields non-overlapping matches left to right
        records.push(Record(stream.slice(start..pos)));
        start = pos + sep.len();
    }
    if start < stream.len() {
        records.push(Record(stream.slice(start..)));
    }
    records
}

/// Splits a byte stream into records and groups them into at most
/// `target_partitions` contiguous, byte-balanced partitions.
pub fn split_text(stream: impl Into<Bytes>, sep: &Separator, target_partitions: usize) -> Result<Dataset, ConfigError> {
    if target_partitions == 0 {
        return Err(ConfigError::ZeroPartitions);
    }
    let records = split_records(&stream.into(), sep);
    Ok(partition_records(
        records,
        sep.len(),
        target_partitions,
        Origin::Ingested,
    ))
}

/// Groups `records` into at most `target` contiguous partitions.
///
/// Each record weighs its payload plus `sep_len`. For every ideal offset
/// `total * j / target` the cut goes to the record boundary closest to it,
/// ties resolved toward the later boundary. Coinciding cuts collapse, so a
/// record larger than an ideal share ends up alone in an oversized
/// partition rather than being split.
pub fn partition_records(records: Vec<Record>, sep_len: usize, target: usize, origin: Origin) -> Dataset {
    let target = target.max(1);
    if records.is_empty() {
        return Dataset::new(Vec::new(), origin);
    }
    let mut cumulative = Vec::with_capacity(records.len() + 1);
    cumulative.push(0u128);
    for r in &records {
        let last = *cumulative.last().unwrap();
        cumulative.push(last + (r.len() + sep_len) as u128);
    }
    let total = *cumulative.last().unwrap();
    let n = records.len();

    let mut cuts = Vec::with_capacity(target + 1);
    cuts.push(0usize);
    for j in 1..target {
        // compare |cum[b] - total*j/target| scaled by target to stay integral
        let ideal = total * j as u128;
        let scaled = |b: usize| cumulative[b] * target as u128;
        let after = cumulative.partition_point(|&c| c * (target as u128) < ideal);
        let cut = if after == 0 {
            0
        } else if after > n {
            n
        } else {
            let before = after - 1;
            let d_before = ideal - scaled(before);
            let d_after = scaled(after) - ideal;
            if d_before < d_after {
                before
            } else {
                after
            }
        };
        cuts.push(cut.clamp(*cuts.last().unwrap(), n));
    }
    cuts.push(n);
    cuts.dedup();

    let mut iter = records.into_iter();
    let partitions = cuts
        .windows(2)
        .enumerate()
        .map(|(id, w)| Partition::new(id, iter.by_ref().take(w[1] - w[0]).collect()))
        .collect();
    Dataset::new(partitions, origin)
}

/// Joins records with `sep` between them and after the last one.
pub fn join_text(partition: &Partition, sep: &Separator) -> Bytes {
    join_records(partition.records(), sep)
}

pub fn join_records(records: &[Record], sep: &Separator) -> Bytes {
    let size = records.iter().map(|r| r.len() + sep.len()).sum();
    let mut out = BytesMut::with_capacity(size);
    for r in records {
        out.extend_from_slice(r.as_bytes());
        out.extend_from_slice(sep.as_bytes());
    }
    out.freeze()
}

/// Concatenates partitions in input order into a single partition with id 0
/// and the affinity of the first input.
pub fn concat(partitions: &[Partition]) -> Partition {
    let records: Vec<Record> = partitions.iter().flat_map(|p| p.records().iter().cloned()).collect();
    Partition::new(0, records).with_affinity(partitions.first().and_then(Partition::affinity))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(p: &Partition) -> Vec<String> {
        p.records()
            .iter()
            .map(|r| String::from_utf8(r.as_bytes().to_vec()).unwrap())
            .collect()
    }

    fn groups(ds: &Dataset) -> Vec<Vec<String>> {
        ds.partitions().iter().map(strs).collect()
    }

    fn sdf_molecule(i: usize) -> String {
        format!(
            "mol{i}\n  boxmr\n\n  1  0  0  0  0  0            999 V2000\n    0.0000    0.0000    0.0000 C   0  0\nM  END\n> <score>\n{i}\n"
        )
    }

    #[test]
    fn split_newlines_near_midpoint() {
        let ds = split_text("A\nB\nC", &Separator::newline(), 2).unwrap();
        assert_eq!(groups(&ds), vec![vec!["A", "B"], vec!["C"]]);
    }

    #[test]
    fn split_without_separator_is_one_record() {
        let ds = split_text("GGAA", &Separator::newline(), 1).unwrap();
        assert_eq!(groups(&ds), vec![vec!["GGAA"]]);
    }

    #[test]
    fn split_sdf_keeps_molecules_whole() {
        let text = (0..4).map(sdf_molecule).collect::<Vec<_>>().join("\n$$$$\n");
        let ds = split_text(text, &Separator::sdf(), 2).unwrap();
        assert_eq!(ds.num_partitions(), 2);
        for p in ds.partitions() {
            assert_eq!(p.len(), 2);
            for r in p.records() {
                assert!(!String::from_utf8_lossy(r.as_bytes()).contains("$$$$"));
            }
        }
    }

    #[test]
    fn empty_stream_gives_one_empty_partition() {
        let ds = split_text("", &Separator::newline(), 4).unwrap();
        assert_eq!(ds.num_partitions(), 1);
        assert!(ds.partitions()[0].is_empty());
    }

    #[test]
    fn trailing_separator_does_not_fabricate_record() {
        let ds = split_text("A\nB\n", &Separator::newline(), 1).unwrap();
        assert_eq!(groups(&ds), vec![vec!["A", "B"]]);
        // inner empty segments are real records
        let ds = split_text("A\n\nB\n\n", &Separator::newline(), 1).unwrap();
        assert_eq!(groups(&ds), vec![vec!["A", "", "B", ""]]);
    }

    #[test]
    fn empty_separator_is_rejected() {
        assert_eq!(Separator::new(Bytes::new()), Err(ConfigError::EmptySeparator));
    }

    #[test]
    fn zero_partitions_is_rejected() {
        assert_eq!(
            split_text("A", &Separator::newline(), 0),
            Err(ConfigError::ZeroPartitions)
        );
    }

    #[test]
    fn fewer_records_than_partitions() {
        let ds = split_text("A\nB", &Separator::newline(), 8).unwrap();
        assert_eq!(groups(&ds), vec![vec!["A"], vec!["B"]]);
    }

    #[test]
    fn oversized_record_sits_alone() {
        let big = "x".repeat(100);
        let text = format!("a\n{big}\nb\nc");
        let ds = split_text(text, &Separator::newline(), 4).unwrap();
        assert!(ds.partitions().iter().any(|p| p.len() == 1 && p.byte_size() == 100));
        assert_eq!(ds.num_records(), 4);
    }

    #[test]
    fn join_appends_trailing_separator() {
        let p = Partition::new(0, vec!["A".into(), "B".into()]);
        assert_eq!(&join_text(&p, &Separator::newline())[..], b"A\nB\n");
        let empty = Partition::new(0, vec![]);
        assert!(join_text(&empty, &Separator::newline()).is_empty());
    }

    #[test]
    fn joined_sdf_ends_with_terminator_lines() {
        let p = Partition::new(0, vec![sdf_molecule(1).into(), sdf_molecule(2).into()]);
        let text = join_text(&p, &Separator::sdf());
        let text = std::str::from_utf8(&text).unwrap();
        // independent count: lines that are exactly "$$$$"
        let terminators = text.lines().filter(|l| *l == "$$$$").count();
        assert_eq!(terminators, 2);
        assert!(text.ends_with("$$$$\n"));
    }

    #[test]
    fn concat_preserves_order() {
        let a = Partition::new(0, vec!["a".into()]);
        let b = Partition::new(1, vec!["b".into(), "c".into()]);
        assert_eq!(strs(&concat(&[a, b])), vec!["a", "b", "c"]);
        assert!(concat(&[]).is_empty());

        let x = Partition::new(0, (0..3).map(|i| Record::from(format!("x{i}"))).collect());
        let y = Partition::new(1, (0..5).map(|i| Record::from(format!("y{i}"))).collect());
        let joined = strs(&concat(&[x, y]));
        assert_eq!(joined.len(), 8);
        assert_eq!(joined[0], "x0");
        assert_eq!(joined[3], "y0");
        assert_eq!(joined[7], "y4");
    }

    #[test]
    fn dataset_ids_are_dense() {
        let ds = Dataset::new(vec![Partition::new(7, vec![]), Partition::new(3, vec![])], Origin::Map);
        let ids: Vec<_> = ds.partitions().iter().map(Partition::id).collect();
        assert_eq!(ids, vec![0, 1]);
    }
}
