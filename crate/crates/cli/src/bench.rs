//! Weak-scaling harness: runs a pipeline on paired (data fraction, pool
//! size) points and reports weak scaling efficiency and ingestion speedup.

use std::fmt::Write as _;
use std::time::Instant;

use boxmr::sample_prefix;
use serde::{Deserialize, Serialize};

use crate::pipeline::PipelineSpec;
use crate::runner::{build_engine, run_stages, source_of, ExitClass, Failure, Overrides, PoolShape};

/// Measured (or injected) times for one point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub pool: usize,
    pub fraction: f64,
    pub records: usize,
    pub run_s: f64,
    pub ingest_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WseRow {
    pub pool: usize,
    pub fraction: f64,
    pub records: usize,
    pub run_s: f64,
    pub ingest_s: f64,
    pub wse: f64,
    pub ingest_speedup: f64,
}

pub fn parse_pools(s: &str) -> Result<Vec<usize>, String> {
    let pools = s
        .split(',')
        .map(|p| match p.trim().parse::<usize>() {
            Ok(0) => Err("pool sizes must be at least 1".to_string()),
            Ok(n) => Ok(n),
            Err(_) => Err(format!("invalid pool size {p:?}")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if pools.is_empty() {
        return Err("at least one pool size is required".into());
    }
    Ok(pools)
}

/// `auto` pairs pool `p` with fraction `p / max(pools)`; otherwise a
/// comma-separated list of decimals or `a/b` ratios in `(0, 1]`.
pub fn parse_fractions(s: &str, pools: &[usize]) -> Result<Vec<f64>, String> {
    if s.trim() == "auto" {
        let max = *pools.iter().max().ok_or("at least one pool size is required")?;
        return Ok(pools.iter().map(|&p| p as f64 / max as f64).collect());
    }
    s.split(',')
        .map(|f| {
            let f = f.trim();
            let value = match f.split_once('/') {
                Some((a, b)) => {
                    let a: f64 = a.trim().parse().map_err(|_| format!("invalid fraction {f:?}"))?;
                    let b: f64 = b.trim().parse().map_err(|_| format!("invalid fraction {f:?}"))?;
                    a / b
                }
                None => f.parse().map_err(|_| format!("invalid fraction {f:?}"))?,
            };
            if value > 0.0 && value <= 1.0 {
                Ok(value)
            } else {
                Err(format!("fraction {f:?} is outside (0, 1]"))
            }
        })
        .collect()
}

/// Pairs fractions with pools, ordered by pool size.
pub fn pair(pools: &[usize], fractions: &[f64]) -> Result<Vec<(usize, f64)>, String> {
    if pools.len() != fractions.len() {
        return Err(format!(
            "{} pool size(s) but {} fraction(s); the lists must pair up",
            pools.len(),
            fractions.len()
        ));
    }
    let mut pairs: Vec<(usize, f64)> = pools.iter().copied().zip(fractions.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(pairs)
}

/// WSE(row) = T_run(baseline) / T_run(row) and ingestion speedup =
/// T_ingest(baseline) / T_ingest(row), where the baseline is the point
/// with the smallest pool (then smallest fraction).
pub fn wse_table(timings: &[Timing]) -> Vec<WseRow> {
    let Some(base) = timings
        .iter()
        .min_by(|a, b| a.pool.cmp(&b.pool).then(a.fraction.total_cmp(&b.fraction)))
    else {
        return Vec::new();
    };
    timings
        .iter()
        .map(|t| WseRow {
            pool: t.pool,
            fraction: t.fraction,
            records: t.records,
            run_s: t.run_s,
            ingest_s: t.ingest_s,
            wse: base.run_s / t.run_s,
            ingest_speedup: base.ingest_s / t.ingest_s,
        })
        .collect()
}

const HEADER: [&str; 7] = [
    "pool",
    "fraction",
    "records",
    "run_s",
    "ingest_s",
    "wse",
    "ingest_speedup",
];

fn cells(r: &WseRow) -> [String; 7] {
    [
        r.pool.to_string(),
        format!("{:.6}", r.fraction),
        r.records.to_string(),
        format!("{:.6}", r.run_s),
        format!("{:.6}", r.ingest_s),
        format!("{:.6}", r.wse),
        format!("{:.6}", r.ingest_speedup),
    ]
}

pub fn to_csv(rows: &[WseRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).expect("in-memory csv");
    for r in rows {
        w.write_record(cells(r)).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

pub fn render_table(rows: &[WseRow]) -> String {
    let body: Vec<[String; 7]> = rows.iter().map(cells).collect();
    let widths: Vec<usize> = (0..HEADER.len())
        .map(|i| {
            body.iter()
                .map(|c| c[i].len())
                .chain([HEADER[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, cols: &[&str]| {
        let padded: Vec<String> = cols.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  "));
    };
    line(&mut out, &HEADER);
    for c in &body {
        line(&mut out, &c.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// Runs the pipeline's stages once per point; the sink is not written.
/// Pool size `n` means `n` workers with `overrides.slots` (default 1) slots.
pub fn run_bench(spec: &PipelineSpec, ov: &Overrides, pairs: &[(usize, f64)]) -> Result<Vec<WseRow>, Failure> {
    spec.validate()
        .map_err(|e| Failure::new(ExitClass::Validation, e.to_string()))?;
    let source = source_of(spec)?;
    let sep_len = source.separator.len();
    let mut timings = Vec::with_capacity(pairs.len());
    for &(pool, fraction) in pairs {
        let shape = PoolShape {
            workers: pool,
            slots: ov.slots.unwrap_or(1).max(1),
        };
        let engine = build_engine(spec, ov, shape)?;
        let t = Instant::now();
        let full = boxmr::ingest(&source, shape.total())?;
        let ds = sample_prefix(&full, fraction, sep_len, shape.total());
        let ingest_s = t.elapsed().as_secs_f64();
        let records = ds.num_records();
        let t = Instant::now();
        run_stages(&engine, spec, ds, &mut Vec::new())?;
        let run_s = t.elapsed().as_secs_f64();
        log::info!("pool {pool} fraction {fraction:.4}: {records} records, run {run_s:.3}s, ingest {ingest_s:.3}s");
        timings.push(Timing {
            pool,
            fraction,
            records,
            run_s,
            ingest_s,
        });
    }
    Ok(wse_table(&timings))
}
