//! CSV artifacts. Every file opens with a `# config_hash=` comment line.

use std::fs;
use std::path::Path;

use epg_core::autodiff::Tensor;
use epg_core::innerloop::{BufferSnapshot, UpdateRecord};
use epg_core::nets::FeatureLayout;
use epg_core::outerloop::EpochLog;
use epg_core::sensitivity::SensitivityRow;

use crate::error::{CliError, Result};
use crate::stats;

pub const TRAINING_LOG_HEADER: [&str; 8] =
    ["epoch", "mean_fitness", "std_fitness", "min_fitness", "max_fitness", "alpha", "lr_out", "wall_seconds"];
pub const TRACE_HEADER: [&str; 4] = ["step", "episode_return", "update_index", "kl"];
pub const SUMMARY_HEADER: [&str; 8] =
    ["update_index", "step", "return_median", "return_q25", "return_q75", "kl_median", "kl_q25", "kl_q75"];
pub const SENSITIVITY_HEADER: [&str; 3] = ["timestep", "channel_kind", "grad_norm"];

/// Shortest round-tripping decimal; NaN becomes an empty field.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn parse_f64(field: &str, path: &Path) -> Result<f64> {
    if field.is_empty() {
        return Ok(f64::NAN);
    }
    field.parse().map_err(|_| CliError::format(path, format!("not a number: `{field}`")))
}

/// Writes `# key=value` comment lines, a header row and data rows.
pub fn write_csv<I, R>(path: &Path, comments: &[(&str, String)], header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut buf = Vec::new();
    for (k, v) in comments {
        buf.extend_from_slice(format!("# {k}={v}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r.into_iter().collect::<Vec<_>>())?;
        }
        w.flush().map_err(CliError::io(path))?;
    }
    crate::checkpoint::write_atomic(path, &buf)
}

/// Comment key/values, header and string records of a CSV artifact.
pub struct CsvTable {
    pub comments: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let comments = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .filter_map(|l| l.trim_start_matches('#').trim().split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| CliError::format(path, e))?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()
            .map_err(|e| CliError::format(path, e))?;
        Ok(Self { comments, header, rows })
    }

    pub fn comment(&self, key: &str) -> Option<&str> {
        self.comments.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn expect_header(&self, want: &[&str], path: &Path) -> Result<()> {
        if self.header.iter().map(String::as_str).ne(want.iter().copied()) {
            return Err(CliError::format(path, format!("header {:?}, expected {want:?}", self.header)));
        }
        Ok(())
    }
}

pub fn write_training_log(path: &Path, hash: &str, rows: &[(EpochLog, f64)]) -> Result<()> {
    write_csv(
        path,
        &[("config_hash", hash.to_string())],
        &TRAINING_LOG_HEADER,
        rows.iter().map(|(l, secs)| {
            vec![
                l.epoch.to_string(),
                fmt_f64(l.mean_fitness),
                fmt_f64(l.std_fitness),
                fmt_f64(l.min_fitness),
                fmt_f64(l.max_fitness),
                fmt_f64(l.alpha),
                fmt_f64(l.lr_out),
                format!("{secs:.3}"),
            ]
        }),
    )
}

/// Training log rows as `(EpochLog, wall_seconds)`. Failure counts are not
/// stored in the file and read back as 0.
pub fn read_training_log(path: &Path) -> Result<Vec<(EpochLog, f64)>> {
    let t = CsvTable::read(path)?;
    t.expect_header(&TRAINING_LOG_HEADER, path)?;
    t.rows
        .iter()
        .map(|r| {
            let f = |i: usize| parse_f64(&r[i], path);
            let epoch = r[0].parse().map_err(|_| CliError::format(path, "bad epoch"))?;
            let log = EpochLog {
                epoch,
                mean_fitness: f(1)?,
                std_fitness: f(2)?,
                min_fitness: f(3)?,
                max_fitness: f(4)?,
                alpha: f(5)?,
                lr_out: f(6)?,
                failures: 0,
            };
            Ok((log, f(7)?))
        })
        .collect()
}

/// One row of a test-time trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub episode_return: f64,
    pub update_index: usize,
    pub kl: f64,
}

impl TraceRow {
    pub fn from_updates(updates: &[UpdateRecord]) -> Vec<TraceRow> {
        updates
            .iter()
            .enumerate()
            .map(|(i, u)| TraceRow { step: u.step, episode_return: u.episode_return, update_index: i, kl: u.kl })
            .collect()
    }
}

pub fn write_trace(path: &Path, hash: &str, rows: &[TraceRow]) -> Result<()> {
    write_csv(
        path,
        &[("config_hash", hash.to_string())],
        &TRACE_HEADER,
        rows.iter()
            .map(|r| vec![r.step.to_string(), fmt_f64(r.episode_return), r.update_index.to_string(), fmt_f64(r.kl)]),
    )
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let t = CsvTable::read(path)?;
    t.expect_header(&TRACE_HEADER, path)?;
    t.rows
        .iter()
        .map(|r| {
            let int =
                |s: &str| s.parse::<usize>().map_err(|_| CliError::format(path, format!("not an integer: `{s}`")));
            Ok(TraceRow {
                step: int(&r[0])?,
                episode_return: parse_f64(&r[1], path)?,
                update_index: int(&r[2])?,
                kl: parse_f64(&r[3], path)?,
            })
        })
        .collect()
}

/// Median and quartile band per update index across traces.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub update_index: usize,
    pub step: usize,
    pub ret: (f64, f64, f64),
    pub kl: (f64, f64, f64),
}

fn band(values: &[f64]) -> (f64, f64, f64) {
    match (stats::median(values), stats::quartiles(values)) {
        (Some(m), Some((lo, hi))) => (m, lo, hi),
        _ => (f64::NAN, f64::NAN, f64::NAN),
    }
}

/// Rows aligned by update index; traces shorter than the longest simply
/// drop out of later rows.
pub fn summarize(traces: &[Vec<TraceRow>]) -> Result<Vec<SummaryRow>> {
    let len = traces.iter().map(Vec::len).max().unwrap_or(0);
    if len == 0 {
        return Err(CliError::Config("no trace rows to summarize".into()));
    }
    Ok((0..len)
        .map(|i| {
            let at: Vec<&TraceRow> = traces.iter().filter_map(|t| t.get(i)).collect();
            let rets: Vec<f64> = at.iter().map(|r| r.episode_return).collect();
            let kls: Vec<f64> = at.iter().map(|r| r.kl).collect();
            SummaryRow { update_index: i, step: at[0].step, ret: band(&rets), kl: band(&kls) }
        })
        .collect())
}

pub fn write_summary(path: &Path, hash: &str, rows: &[SummaryRow]) -> Result<()> {
    write_csv(
        path,
        &[("config_hash", hash.to_string())],
        &SUMMARY_HEADER,
        rows.iter().map(|r| {
            vec![
                r.update_index.to_string(),
                r.step.to_string(),
                fmt_f64(r.ret.0),
                fmt_f64(r.ret.1),
                fmt_f64(r.ret.2),
                fmt_f64(r.kl.0),
                fmt_f64(r.kl.1),
                fmt_f64(r.kl.2),
            ]
        }),
    )
}

pub fn write_final_returns(path: &Path, hash: &str, rows: &[(u64, f64)]) -> Result<()> {
    write_csv(
        path,
        &[("config_hash", hash.to_string())],
        &["seed", "final_return"],
        rows.iter().map(|(s, r)| vec![s.to_string(), fmt_f64(*r)]),
    )
}

pub fn read_final_returns(path: &Path) -> Result<Vec<(u64, f64)>> {
    let t = CsvTable::read(path)?;
    t.expect_header(&["seed", "final_return"], path)?;
    t.rows
        .iter()
        .map(|r| Ok((r[0].parse().map_err(|_| CliError::format(path, "bad seed"))?, parse_f64(&r[1], path)?)))
        .collect()
}

/// Column names of a buffer matrix, e.g. `state_0`, `done`, `memory_31`.
pub fn buffer_columns(layout: &FeatureLayout) -> Vec<String> {
    let mut cols = Vec::new();
    for (kind, width) in layout.groups() {
        if width == 1 {
            cols.push(kind.name().to_string());
        } else {
            cols.extend((0..width).map(|i| format!("{}_{i}", kind.name())));
        }
    }
    cols
}

pub fn write_buffer(path: &Path, hash: &str, layout: &FeatureLayout, snap: &BufferSnapshot) -> Result<()> {
    let cols = buffer_columns(layout);
    let header: Vec<&str> = cols.iter().map(String::as_str).collect();
    let m = &snap.matrix;
    write_csv(
        path,
        &[("config_hash", hash.to_string()), ("window", snap.window.to_string())],
        &header,
        (0..m.rows()).map(|i| m.row(i).iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>()),
    )
}

/// Buffer matrix, head window and column names.
pub fn read_buffer(path: &Path) -> Result<(Tensor, usize, Vec<String>)> {
    let t = CsvTable::read(path)?;
    let window = t
        .comment("window")
        .and_then(|w| w.parse().ok())
        .ok_or_else(|| CliError::format(path, "missing `# window=` comment"))?;
    let cols = t.header.len();
    let mut data = Vec::with_capacity(t.rows.len() * cols);
    for r in &t.rows {
        for f in r {
            data.push(parse_f64(f, path)?);
        }
    }
    let m = Tensor::matrix(t.rows.len(), cols, data)?;
    Ok((m, window, t.header))
}

pub fn write_sensitivity(path: &Path, hash: &str, rows: &[SensitivityRow]) -> Result<()> {
    write_csv(
        path,
        &[("config_hash", hash.to_string())],
        &SENSITIVITY_HEADER,
        rows.iter().map(|r| vec![r.timestep.to_string(), r.kind.clone(), fmt_f64(r.grad_norm)]),
    )
}
