//! On-disk encodings: feature matrices (text and binary), tree snapshots,
//! coreset blocks, samples, telemetry and tracking runs.
//!
//! Text feature files start with a `dim=<d> rows=<r>` header followed by one
//! whitespace-separated row per line. Binary feature files are the magic
//! `CSTK`, a little-endian `u32` version (1), `u64` rows, `u32` dim, then
//! `rows·dim` little-endian `f64` values in row-major order.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use cstk_core::sampling::RowSource;
use cstk_core::tracker::{FrameRecord, TrackRun};
use cstk_core::{CoresetBlock, CoresetNode, DataBlock, SampleSet, StreamStats, TreeView};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"CSTK";
pub const BINARY_VERSION: u32 = 1;
const BINARY_HEADER: usize = 4 + 4 + 8 + 4;

/// A dense row-major matrix read from a feature file. Unlike `DataBlock` it
/// may hold zero rows, so that "empty input" is reportable by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub rows: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, rows: usize, data: Vec<f64>) -> CliResult<Self> {
        if dim == 0 {
            return Err(CliError::usage("feature dimension must be ≥ 1"));
        }
        if data.len() != rows * dim {
            return Err(CliError::usage(format!(
                "{} values do not fill {rows} rows of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, rows, data })
    }

    pub fn from_block(block: &DataBlock) -> Self {
        Self {
            dim: block.dim(),
            rows: block.rows(),
            data: block.to_row_major(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_block(&self) -> CliResult<DataBlock> {
        if self.rows == 0 {
            return Err(CliError::usage("input holds no rows; nothing to summarize"));
        }
        Ok(DataBlock::from_row_slice(self.rows, self.dim, &self.data)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Text,
    Binary,
}

impl Encoding {
    /// Binary for `.bin`/`.cstk` extensions, text otherwise.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("cstk") => Encoding::Binary,
            _ => Encoding::Text,
        }
    }
}

pub fn read_features(path: &Path) -> CliResult<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_features(&bytes).map_err(|e| match e {
        CliError::Usage(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Decodes either encoding, chosen by the leading magic bytes.
pub fn parse_features(bytes: &[u8]) -> CliResult<FeatureMatrix> {
    if bytes.starts_with(MAGIC) {
        parse_binary(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|e| {
            CliError::usage(format!("not UTF-8 text at byte offset {}", e.valid_up_to()))
        })?;
        parse_text(text)
    }
}

pub fn parse_text(text: &str) -> CliResult<FeatureMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (header_no, header) = lines
        .next()
        .ok_or_else(|| CliError::usage("line 1: missing header `dim=<d> rows=<r>`"))?;
    let (dim, rows) = parse_header(header)
        .map_err(|msg| CliError::usage(format!("line {}: {msg}", header_no + 1)))?;

    let mut data = Vec::with_capacity(rows.saturating_mul(dim).min(1 << 24));
    let mut seen = 0;
    for (no, line) in lines {
        let line_no = no + 1;
        if seen == rows {
            return Err(CliError::usage(format!(
                "line {line_no}: more rows than the {rows} declared in the header"
            )));
        }
        let before = data.len();
        for (col, token) in line.split_whitespace().enumerate() {
            let value: f64 = token.parse().map_err(|_| {
                CliError::usage(format!("line {line_no}, column {}: cannot parse '{token}'", col + 1))
            })?;
            if !value.is_finite() {
                return Err(CliError::usage(format!(
                    "line {line_no}, column {}: non-finite value",
                    col + 1
                )));
            }
            data.push(value);
        }
        let found = data.len() - before;
        if found != dim {
            return Err(CliError::usage(format!(
                "line {line_no}: expected {dim} values, found {found}"
            )));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(CliError::usage(format!(
            "header declares {rows} rows but the file holds {seen}"
        )));
    }
    FeatureMatrix::new(dim, rows, data)
}

fn parse_header(line: &str) -> Result<(usize, usize), String> {
    let mut dim = None;
    let mut rows = None;
    for token in line.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| format!("malformed header token '{token}'; expected `dim=<d> rows=<r>`"))?;
        let parsed: usize = value
            .parse()
            .map_err(|_| format!("header value '{value}' for '{key}' is not a count"))?;
        match key {
            "dim" => dim = Some(parsed),
            "rows" => rows = Some(parsed),
            _ => return Err(format!("unknown header key '{key}'")),
        }
    }
    match (dim, rows) {
        (Some(0), _) => Err("header dim must be ≥ 1".into()),
        (Some(d), Some(r)) => Ok((d, r)),
        _ => Err("malformed header; expected `dim=<d> rows=<r>`".into()),
    }
}

pub fn parse_binary(bytes: &[u8]) -> CliResult<FeatureMatrix> {
    if bytes.len() < BINARY_HEADER {
        return Err(CliError::usage(format!(
            "byte offset {}: truncated header ({BINARY_HEADER} bytes required)",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(CliError::usage("byte offset 0: missing CSTK magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != BINARY_VERSION {
        return Err(CliError::usage(format!(
            "byte offset 4: unsupported version {version}"
        )));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let dim = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
    if dim == 0 {
        return Err(CliError::usage("byte offset 16: dim must be ≥ 1"));
    }
    let rows = usize::try_from(rows)
        .map_err(|_| CliError::usage("byte offset 8: row count does not fit in memory"))?;
    let expected = rows
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| CliError::usage("byte offset 8: rows × dim overflows"))?;
    let body = &bytes[BINARY_HEADER..];
    if body.len() != expected {
        return Err(CliError::usage(format!(
            "byte offset {}: expected {expected} payload bytes, found {}",
            BINARY_HEADER,
            body.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * dim);
    for (i, chunk) in body.chunks_exact(8).enumerate() {
        let value = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !value.is_finite() {
            return Err(CliError::usage(format!(
                "byte offset {}: non-finite value",
                BINARY_HEADER + 8 * i
            )));
        }
        data.push(value);
    }
    FeatureMatrix::new(dim, rows, data)
}

pub fn encode_text(m: &FeatureMatrix) -> String {
    let mut out = format!("dim={} rows={}\n", m.dim, m.rows);
    for i in 0..m.rows {
        let mut first = true;
        for v in m.row(i) {
            if !first {
                out.push(' ');
            }
            first = false;
            // Display of f64 is the shortest string that parses back exactly.
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn encode_binary(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(BINARY_HEADER + 8 * m.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows as u64).to_le_bytes());
    out.extend_from_slice(&(m.dim as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_features(path: &Path, m: &FeatureMatrix, encoding: Encoding) -> CliResult<()> {
    let bytes = match encoding {
        Encoding::Text => encode_text(m).into_bytes(),
        Encoding::Binary => encode_binary(m),
    };
    write_bytes(path, &bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    file.write_all(bytes).map_err(|e| CliError::io(path, e))
}

fn block_rows(block: &DataBlock) -> Vec<Vec<f64>> {
    (0..block.rows()).map(|i| block.row(i)).collect()
}

fn rows_to_block(rows: &[Vec<f64>], dim: usize, what: &str) -> CliResult<DataBlock> {
    if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
        return Err(CliError::usage(format!(
            "{what}: row {bad} has {} values, expected {dim}",
            rows[bad].len()
        )));
    }
    Ok(DataBlock::from_rows(rows)?)
}

/// A reduced block with its additive constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockDocument {
    pub format: String,
    pub dim: usize,
    pub c: f64,
    pub source_rows: usize,
    pub rows: Vec<Vec<f64>>,
}

impl BlockDocument {
    pub const FORMAT: &'static str = "cstk-coreset-block/1";

    pub fn from_block(block: &CoresetBlock) -> Self {
        Self {
            format: Self::FORMAT.into(),
            dim: block.dim(),
            c: block.c(),
            source_rows: block.source_rows(),
            rows: block_rows(block.block()),
        }
    }

    pub fn to_block(&self) -> CliResult<CoresetBlock> {
        if self.format != Self::FORMAT {
            return Err(CliError::usage(format!("unknown block format '{}'", self.format)));
        }
        let block = rows_to_block(&self.rows, self.dim, "block")?;
        Ok(CoresetBlock::new(block, self.c, self.source_rows)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDocument {
    pub level: u32,
    pub span: [usize; 2],
    pub c: f64,
    pub rows: Vec<Vec<f64>>,
}

/// Self-describing JSON form of a tree: parameters, counters, every live
/// node (bottom of the stack first) and the pending buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotDocument {
    pub format: String,
    pub n: usize,
    pub dim: usize,
    pub points_seen: usize,
    pub leaves_seen: usize,
    pub merge_count: u64,
    pub max_live_nodes: usize,
    pub nodes: Vec<NodeDocument>,
    pub pending: Vec<Vec<f64>>,
}

impl SnapshotDocument {
    pub const FORMAT: &'static str = "cstk-tree-snapshot/1";

    pub fn from_view(view: &TreeView) -> Self {
        let nodes = view
            .nodes()
            .iter()
            .map(|node| NodeDocument {
                level: node.level(),
                span: [node.span().start, node.span().end],
                c: node.summary().c(),
                rows: block_rows(node.summary().block()),
            })
            .collect();
        let pending = (0..view.pending().len())
            .map(|i| view.pending().row(i).to_vec())
            .collect();
        Self {
            format: Self::FORMAT.into(),
            n: view.n(),
            dim: view.dim(),
            points_seen: view.points_seen(),
            leaves_seen: view.leaves_seen(),
            merge_count: view.merge_count(),
            max_live_nodes: view.max_live_nodes(),
            nodes,
            pending,
        }
    }

    pub fn to_view(&self) -> CliResult<TreeView> {
        if self.format != Self::FORMAT {
            return Err(CliError::usage(format!("unknown snapshot format '{}'", self.format)));
        }
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (i, doc) in self.nodes.iter().enumerate() {
            let [start, end] = doc.span;
            if end < start {
                return Err(CliError::usage(format!("node {i}: span end precedes start")));
            }
            let block = rows_to_block(&doc.rows, self.dim, &format!("node {i}"))?;
            let summary = CoresetBlock::new(block, doc.c, end - start)?;
            nodes.push(CoresetNode::new(doc.level, summary, start..end)?);
        }
        Ok(TreeView::from_parts(
            self.n,
            self.dim,
            nodes,
            &self.pending,
            self.points_seen,
            self.leaves_seen,
            self.merge_count,
            self.max_live_nodes,
        )?)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::usage(format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

pub fn read_snapshot(path: &Path) -> CliResult<TreeView> {
    read_json::<SnapshotDocument>(path)?.to_view().map_err(|e| match e {
        CliError::Usage(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// One telemetry record: a push, or a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub step: usize,
    pub event: &'static str,
    pub merges_this_step: u32,
    pub cumulative_svd_count: u64,
    pub live_nodes: usize,
    pub push_time_ns: u64,
    pub train_time_ns: u64,
}

pub const TELEMETRY_HEADER: &str =
    "step,event,merges_this_step,cumulative_svd_count,live_nodes,push_time_ns,train_time_ns";

/// One push record per entry of the recorded series.
pub fn telemetry_from_stats(stats: &StreamStats) -> Vec<TelemetryRow> {
    let mut cumulative = 0u64;
    (0..stats.pushes())
        .map(|i| {
            cumulative += u64::from(stats.merges_per_push[i]);
            TelemetryRow {
                step: i + 1,
                event: "push",
                merges_this_step: stats.merges_per_push[i],
                cumulative_svd_count: cumulative,
                live_nodes: stats.live_nodes[i],
                push_time_ns: stats.push_nanos[i],
                train_time_ns: 0,
            }
        })
        .collect()
}

pub fn encode_telemetry(rows: &[TelemetryRow]) -> String {
    let mut out = String::from(TELEMETRY_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step,
            r.event,
            r.merges_this_step,
            r.cumulative_svd_count,
            r.live_nodes,
            r.push_time_ns,
            r.train_time_ns
        )
        .expect("writing to a String");
    }
    out
}

fn source_fields(source: &RowSource) -> (&'static str, String, usize) {
    match *source {
        RowSource::Node { level, row } => ("node", level.to_string(), row),
        RowSource::Pending { row } => ("pending", String::new(), row),
        RowSource::Root { row } => ("root", String::new(), row),
        RowSource::History { index } => ("history", String::new(), index),
    }
}

/// CSV of sampled rows with provenance columns, closed by a comment footer
/// stating the row count and the bound it must respect.
pub fn encode_sample(sample: &SampleSet, bound: usize) -> String {
    let dim = sample.rows().dim();
    let mut out = String::from("source,level,row");
    for j in 0..dim {
        write!(out, ",f{j}").expect("writing to a String");
    }
    out.push('\n');
    for (i, source) in sample.provenance().iter().enumerate() {
        let (kind, level, row) = source_fields(source);
        write!(out, "{kind},{level},{row}").expect("writing to a String");
        for v in sample.rows().row(i) {
            write!(out, ",{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    writeln!(
        out,
        "# rows={} bound={bound} within_bound={}",
        sample.len(),
        sample.len() <= bound
    )
    .expect("writing to a String");
    out
}

pub const RUN_HEADER: &str = "frame,bootstrap,chosen,confidence,estimate_x,estimate_y,correct,model_version,model_data_through,covariance_min_eig";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn encode_run(run: &TrackRun) -> String {
    let mut out = String::from(RUN_HEADER);
    out.push('\n');
    for r in &run.records {
        let FrameRecord {
            frame,
            bootstrap,
            chosen,
            confidence,
            estimate,
            correct,
            model_version,
            model_data_through,
            covariance_min_eig,
        } = r;
        writeln!(
            out,
            "{frame},{},{},{},{},{},{},{},{},{covariance_min_eig}",
            u8::from(*bootstrap),
            opt(*chosen),
            opt(*confidence),
            estimate[0],
            estimate[1],
            u8::from(*correct),
            opt(*model_version),
            opt(*model_data_through),
        )
        .expect("writing to a String");
    }
    writeln!(
        out,
        "# success_rate={} models_trained={}",
        run.success_rate, run.models_trained
    )
    .expect("writing to a String");
    out
}
