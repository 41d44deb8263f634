//! Text and CSV files produced by a run.
//!
//! Every file opens with a version line `# atm-lab <kind> v<major>`. Readers
//! reject files of another kind or another major version. Tabular files are
//! CSV with RFC-4180 quoting, `.` as the decimal separator and LF line
//! endings. Floats in CSV files use the shortest representation that parses
//! back to the same bits (`{:e}`), so exports reload exactly. All writes go
//! through [`write_atomic`].

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::atm::MemoryBank;
use crate::config::TrainConfig;
use crate::error::{AtmError, Result};
use crate::numerics::Matrix;
use crate::pipeline::LossHistory;
use crate::synthbench::{Arm, MetricReport, ProjectionPoint, RunOutcome, StageTimings};

/// Major version shared by every file this build writes.
pub const FORMAT_MAJOR: u32 = 1;

pub fn version_line(kind: &str) -> String {
    format!("# atm-lab {kind} v{FORMAT_MAJOR}")
}

/// Checks a version line of the form `# atm-lab <kind> v<major>[.<minor>]`.
pub fn check_version_line(path: &Path, line: &str, kind: &str) -> Result<()> {
    let line = line.trim_end_matches(['\r', '\n']);
    let rest = line.strip_prefix("# atm-lab ").ok_or_else(|| {
        AtmError::format(
            path,
            format!(
                "missing version line; expected `{}`, found `{}`",
                version_line(kind),
                preview(line)
            ),
        )
    })?;
    let (found_kind, version) = rest
        .rsplit_once(' ')
        .ok_or_else(|| AtmError::format(path, format!("malformed version line `{}`", preview(line))))?;
    if found_kind != kind {
        return Err(AtmError::format(
            path,
            format!("expected a {kind} file, found a {found_kind} file"),
        ));
    }
    let major = version
        .strip_prefix('v')
        .and_then(|v| v.split('.').next())
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| AtmError::format(path, format!("unreadable version `{version}`")))?;
    if major != FORMAT_MAJOR {
        return Err(AtmError::format(
            path,
            format!("major version {major} is not supported (this build reads v{FORMAT_MAJOR})"),
        ));
    }
    Ok(())
}

fn preview(s: &str) -> String {
    s.chars().take(60).collect()
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| AtmError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| AtmError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| AtmError::io(path, e))?;
    tmp.persist(path).map_err(|e| AtmError::io(path, e.error))?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| AtmError::io(path, e))
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .flexible(true)
        .from_writer(Vec::new())
}

/// Serialises `records` under a version line.
fn csv_document<I, R>(kind: &str, records: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv_writer();
    for r in records {
        w.write_record(r).expect("writing to memory cannot fail");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv of utf-8 fields");
    format!("{}\n{body}", version_line(kind))
}

/// Checks the version line and returns the remaining records as strings.
pub fn read_csv_document(path: &Path, text: &str, kind: &str) -> Result<Vec<Vec<String>>> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    check_version_line(path, first, kind)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(rest.as_bytes());
    reader
        .records()
        .enumerate()
        .map(|(i, r)| {
            r.map(|rec| rec.iter().map(str::to_owned).collect())
                .map_err(|e| AtmError::format(path, format!("line {}: {e}", i + 2)))
        })
        .collect()
}

fn float(v: f64) -> String {
    format!("{v:e}")
}

/// Human-readable record of one training run.
///
/// The body (config echo, loss-curve summary, metrics) is deterministic for a
/// given configuration. Wall-clock figures live in a trailing `[timing]`
/// section so comparisons can drop them with [`strip_timing`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: TrainConfig,
    pub history: LossHistory,
    pub metrics: MetricReport,
    pub timings: StageTimings,
}

pub const TIMING_SECTION: &str = "[timing]";

impl RunReport {
    pub fn from_outcome(outcome: &RunOutcome) -> Self {
        Self {
            config: outcome.state.config().clone(),
            history: outcome.state.history().clone(),
            metrics: outcome.report.clone(),
            timings: outcome.timings,
        }
    }

    pub fn body(&self) -> String {
        let mut out = version_line("report");
        out.push_str("\n[config]\n");
        // the echo is the config file minus its own version line
        for line in self.config.to_text().lines().skip(1) {
            out.push_str(line);
            out.push('\n');
        }

        out.push_str("[losses]\n");
        for stage in 1..=3u8 {
            let curve = self.history.stage(stage);
            let _ = writeln!(out, "stage{stage}_steps = {}", curve.len());
            let last = curve.last().map_or_else(|| "none".to_string(), |v| v.to_string());
            let _ = writeln!(out, "stage{stage}_last_loss = {last}");
        }

        let m = &self.metrics;
        let c = &m.composition;
        out.push_str("[metrics]\n");
        let rows: [(&str, f64); 14] = [
            ("gate_accuracy", m.gate_accuracy),
            ("routing_accuracy", m.routing_accuracy),
            ("separation_ratio_raw", m.separation_ratio_raw),
            ("separation_ratio_retrieved", m.separation_ratio_retrieved),
            ("stage2_leading_mean", m.stage2_leading_mean),
            ("stage2_trailing_mean", m.stage2_trailing_mean),
            ("stage2_eval_loss", m.stage2_eval_loss),
            ("final_loss", m.final_loss),
            ("struc_sim", m.struc_sim),
            ("composition_pairs", c.pairs as f64),
            ("composition_subject_error", c.subject_error),
            ("composition_style_error", c.style_error),
            ("composition_subject_baseline", c.subject_baseline),
            ("composition_style_baseline", c.style_baseline),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = self.body();
        out.push_str(TIMING_SECTION);
        out.push('\n');
        for (i, d) in self.timings.stages.iter().enumerate() {
            let _ = writeln!(out, "stage{}_seconds = {:.3}", i + 1, d.as_secs_f64());
        }
        let _ = writeln!(out, "metrics_seconds = {:.3}", self.timings.metrics.as_secs_f64());
        out
    }
}

/// The report text up to (not including) the `[timing]` section.
pub fn strip_timing(report: &str) -> &str {
    match report.find(&format!("\n{TIMING_SECTION}\n")) {
        Some(i) => &report[..=i],
        None => report,
    }
}

/// `stage,step,loss` with one row per optimizer step.
pub fn losses_csv(history: &LossHistory) -> String {
    let header = vec!["stage".to_string(), "step".into(), "loss".into()];
    let rows = (1..=3u8).flat_map(|stage| {
        history
            .stage(stage)
            .iter()
            .enumerate()
            .map(move |(step, &loss)| vec![stage.to_string(), step.to_string(), float(loss)])
    });
    csv_document("losses", std::iter::once(header).chain(rows))
}

/// One row of the ablation table.
///
/// `gate_acc` is the accuracy of the routing actually used at inference:
/// the gate for adaptive arms, the random router for `no_gate`.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub gate_acc: f64,
    pub sep_raw: f64,
    pub sep_retrieved: f64,
    pub final_loss: f64,
    pub struc_sim: f64,
}

pub const ABLATION_COLUMNS: [&str; 7] = [
    "arm",
    "seed",
    "gate_acc",
    "sep_raw",
    "sep_retrieved",
    "final_loss",
    "struc_sim",
];

impl AblationRow {
    pub fn new(arm: Arm, seed: u64, m: &MetricReport) -> Self {
        Self {
            arm,
            seed,
            gate_acc: m.routing_accuracy,
            sep_raw: m.separation_ratio_raw,
            sep_retrieved: m.separation_ratio_retrieved,
            final_loss: m.final_loss,
            struc_sim: m.struc_sim,
        }
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let header = ABLATION_COLUMNS.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let body = rows.iter().map(|r| {
        vec![
            r.arm.name().to_string(),
            r.seed.to_string(),
            float(r.gate_acc),
            float(r.sep_raw),
            float(r.sep_retrieved),
            float(r.final_loss),
            float(r.struc_sim),
        ]
    });
    csv_document("ablation", std::iter::once(header).chain(body))
}

pub fn parse_ablation_csv(path: &Path, text: &str) -> Result<Vec<AblationRow>> {
    let records = read_csv_document(path, text, "ablation")?;
    let (header, rows) = records
        .split_first()
        .ok_or_else(|| AtmError::format(path, "missing header row"))?;
    if header.iter().map(String::as_str).ne(ABLATION_COLUMNS) {
        return Err(AtmError::format(path, format!("unexpected columns {header:?}")));
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let bad = |what: &str| AtmError::format(path, format!("line {}: bad {what}", i + 3));
            if r.len() != ABLATION_COLUMNS.len() {
                return Err(bad("field count"));
            }
            let f = |k: usize| r[k].parse::<f64>().map_err(|_| bad(ABLATION_COLUMNS[k]));
            Ok(AblationRow {
                arm: r[0].parse().map_err(|_| bad("arm"))?,
                seed: r[1].parse().map_err(|_| bad("seed"))?,
                gate_acc: f(2)?,
                sep_raw: f(3)?,
                sep_retrieved: f(4)?,
                final_loss: f(5)?,
                struc_sim: f(6)?,
            })
        })
        .collect()
}

/// One memory item as CSV:
///
/// ```text
/// # atm-lab memory v1
/// n,m,c,item
/// 3,32,32,0
/// <m rows of c floats>
/// ```
pub fn memory_item_csv(n: usize, item: usize, values: &Matrix) -> String {
    let (m, c) = values.shape();
    let head = [
        vec!["n".to_string(), "m".into(), "c".into(), "item".into()],
        vec![n.to_string(), m.to_string(), c.to_string(), item.to_string()],
    ];
    let rows = (0..m).map(|r| values.row(r).iter().map(|&v| float(v)).collect::<Vec<_>>());
    csv_document("memory", head.into_iter().chain(rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemorySnapshot {
    pub n: usize,
    pub item: usize,
    pub values: Matrix,
}

pub fn parse_memory_item(path: &Path, text: &str) -> Result<MemorySnapshot> {
    let records = read_csv_document(path, text, "memory")?;
    if records.len() < 2 || records[0] != ["n", "m", "c", "item"] {
        return Err(AtmError::format(path, "expected header `n,m,c,item`"));
    }
    let dims: Vec<usize> = records[1]
        .iter()
        .map(|v| v.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| AtmError::format(path, "line 3: bad n,m,c,item values"))?;
    let &[n, m, c, item] = dims.as_slice() else {
        return Err(AtmError::format(path, "line 3: expected four values"));
    };
    let rows = &records[2..];
    if rows.len() != m {
        return Err(AtmError::format(
            path,
            format!("expected {m} rows, found {}", rows.len()),
        ));
    }
    let mut data = Vec::with_capacity(m * c);
    for (r, row) in rows.iter().enumerate() {
        if row.len() != c {
            return Err(AtmError::format(path, format!("line {}: expected {c} values", r + 4)));
        }
        for v in row {
            data.push(
                v.parse::<f64>()
                    .map_err(|_| AtmError::format(path, format!("line {}: bad float `{v}`", r + 4)))?,
            );
        }
    }
    let values = Matrix::new(m, c, data).map_err(|e| AtmError::format(path, e.to_string()))?;
    Ok(MemorySnapshot { n, item, values })
}

pub fn memory_item_path(dir: &Path, item: usize) -> PathBuf {
    dir.join(format!("memory_item_{item}.csv"))
}

/// Writes one CSV per memory item into `dir`.
pub fn write_memory_export(dir: &Path, bank: &MemoryBank) -> Result<Vec<PathBuf>> {
    bank.items()
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let path = memory_item_path(dir, i);
            write_atomic(&path, memory_item_csv(bank.len(), i, item).as_bytes())?;
            Ok(path)
        })
        .collect()
}

/// Reads back every item written by [`write_memory_export`].
pub fn read_memory_export(dir: &Path) -> Result<Vec<Matrix>> {
    let first_path = memory_item_path(dir, 0);
    let first = parse_memory_item(&first_path, &read_text(&first_path)?)?;
    let n = first.n;
    let mut items = vec![first.values];
    for i in 1..n {
        let path = memory_item_path(dir, i);
        let snap = parse_memory_item(&path, &read_text(&path)?)?;
        if snap.n != n || snap.item != i || snap.values.shape() != items[0].shape() {
            return Err(AtmError::format(&path, "item does not match the rest of the export"));
        }
        items.push(snap.values);
    }
    Ok(items)
}

/// `x,y,label,kind` per projected point.
pub fn projection_csv(points: &[ProjectionPoint]) -> String {
    let header = vec!["x".to_string(), "y".into(), "label".into(), "kind".into()];
    let rows = points
        .iter()
        .map(|p| vec![float(p.x), float(p.y), p.label.to_string(), p.kind.name().to_string()]);
    csv_document("projection", std::iter::once(header).chain(rows))
}

/// Output rows of `infer`, one line of `d_out` floats per input.
pub fn outputs_csv(outputs: &[Matrix]) -> String {
    let width = outputs.first().map_or(0, Matrix::cols);
    let header: Vec<String> = (0..width).map(|k| format!("y{k}")).collect();
    let rows = outputs
        .iter()
        .map(|o| o.row(0).iter().map(|&v| float(v)).collect::<Vec<_>>());
    csv_document("outputs", std::iter::once(header).chain(rows))
}
