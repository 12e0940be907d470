//! Result files: `# key: value` metadata headers, CSV tables, atomic writes.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use bodyschema::keypoint::format_float;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult, Context};

pub const TOOL: &str = concat!("bodyschema ", env!("CARGO_PKG_VERSION"));

/// Ordered key/value header written at the top of every emitted file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metadata {
    pub entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn new(command: &str) -> Self {
        Self {
            entries: vec![("tool".into(), TOOL.into()), ("command".into(), command.into())],
        }
    }

    pub fn with(mut self, key: &str, value: impl Display) -> Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// `# key: value` lines; also a valid TOML comment block.
    pub fn header(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("# {k}: {v}\n")).collect()
    }

    pub fn parse_header(text: &str) -> Self {
        let entries = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .filter_map(|l| l.trim_start_matches('#').split_once(':'))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        Self { entries }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).context(format!("cannot create {}", dir.display()))?;
    let name = path
        .file_name()
        .ok_or_else(|| CliError::usage(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, contents).context(format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).context(format!("cannot move {} into place", path.display()))?;
    Ok(())
}

/// A header row plus string cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self, meta: &Metadata) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8");
        meta.header() + &body
    }

    pub fn parse(source: &str, text: &str) -> CliResult<(Metadata, Self)> {
        let meta = Metadata::parse_header(text);
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let bad = |e: csv::Error| CliError::usage(format!("{source}: {e}"));
        let header = reader.headers().map_err(bad)?.iter().map(String::from).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(String::from).collect()).map_err(bad))
            .collect::<CliResult<_>>()?;
        Ok((meta, Self { header, rows }))
    }

    pub fn read(path: &Path) -> CliResult<(Metadata, Self)> {
        let text = fs::read_to_string(path).context(format!("cannot read {}", path.display()))?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn column(&self, name: &str) -> CliResult<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::usage(format!("missing column {name:?}")))
    }

    pub fn write(&self, path: &Path, meta: &Metadata) -> CliResult<()> {
        write_atomic(path, self.render(meta).as_bytes())
    }
}

/// Float cell that round-trips exactly.
pub fn cell(v: f64) -> String {
    format_float(v)
}

/// One measurement of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub object: String,
    pub grasp: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Long-format results, in the order rows were pushed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    rows: Vec<ResultRow>,
}

const RESULT_COLUMNS: [&str; 6] = ["experiment", "object", "grasp", "seed", "metric", "value"];

impl ResultsTable {
    pub fn push(&mut self, experiment: &str, object: &str, grasp: usize, seed: u64, metric: &str, value: f64) {
        self.rows.push(ResultRow {
            experiment: experiment.into(),
            object: object.into(),
            grasp,
            seed,
            metric: metric.into(),
            value,
        });
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    /// Values of `metric` for experiments accepted by `select`, in row order.
    pub fn values(&self, metric: &str, select: impl Fn(&ResultRow) -> bool) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric && select(r))
            .map(|r| r.value)
            .collect()
    }

    pub fn to_table(&self) -> CsvTable {
        let mut t = CsvTable::new(&RESULT_COLUMNS);
        for r in &self.rows {
            t.push(vec![
                r.experiment.clone(),
                r.object.clone(),
                r.grasp.to_string(),
                r.seed.to_string(),
                r.metric.clone(),
                cell(r.value),
            ]);
        }
        t
    }

    pub fn from_table(source: &str, t: &CsvTable) -> CliResult<Self> {
        if t.header != RESULT_COLUMNS {
            return Err(CliError::usage(format!(
                "{source}: not a results table (header {:?})",
                t.header
            )));
        }
        let bad = |what: &str, v: &str| CliError::usage(format!("{source}: bad {what} {v:?}"));
        let rows = t
            .rows
            .iter()
            .map(|r| {
                Ok(ResultRow {
                    experiment: r[0].clone(),
                    object: r[1].clone(),
                    grasp: r[2].parse().map_err(|_| bad("grasp", &r[2]))?,
                    seed: r[3].parse().map_err(|_| bad("seed", &r[3]))?,
                    metric: r[4].clone(),
                    value: r[5].parse().map_err(|_| bad("value", &r[5]))?,
                })
            })
            .collect::<CliResult<_>>()?;
        Ok(Self { rows })
    }

    pub fn read(path: &Path) -> CliResult<(Metadata, Self)> {
        let (meta, t) = CsvTable::read(path)?;
        Ok((meta, Self::from_table(&path.display().to_string(), &t)?))
    }
}

/// Wall-clock stages of one command, written apart from the results so
/// those stay byte-identical across runs.
#[derive(Debug, Default)]
pub struct Timings {
    stages: Vec<(String, Duration)>,
}

impl Timings {
    pub fn record(&mut self, stage: &str, elapsed: Duration) {
        self.stages.push((stage.into(), elapsed));
    }

    pub fn path(out: &Path, name: &str) -> PathBuf {
        out.join("timings").join(format!("{name}.csv"))
    }

    pub fn write(&self, out: &Path, name: &str, meta: &Metadata) -> CliResult<()> {
        let mut t = CsvTable::new(&["stage", "seconds"]);
        for (stage, d) in &self.stages {
            t.push(vec![stage.clone(), format!("{:.3}", d.as_secs_f64())]);
        }
        t.write(&Self::path(out, name), meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip_with_header() {
        let mut t = CsvTable::new(&["a", "b"]);
        t.push(vec!["x,y".into(), cell(0.1)]);
        let meta = Metadata::new("test").with("seed", 3);
        let text = t.render(&meta);
        assert!(text.starts_with("# tool: bodyschema "));
        let (m, back) = CsvTable::parse("t", &text).unwrap();
        assert_eq!(back, t);
        assert_eq!(m.get("seed"), Some("3"));
        assert_eq!(back.rows[0][1].parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn results_round_trip() {
        let mut r = ResultsTable::default();
        r.push("placing/kinematic/task1", "box", 2, 4, "rmse_px", 0.125);
        r.push("placing/kinematic/task1", "box", 3, 4, "rmse_px", 1.0 / 3.0);
        let back = ResultsTable::from_table(
            "t",
            &CsvTable::parse("t", &r.to_table().render(&Metadata::new("x")))
                .unwrap()
                .1,
        )
        .unwrap();
        assert_eq!(back, r);
        assert_eq!(back.values("rmse_px", |row| row.grasp == 3), vec![1.0 / 3.0]);
    }

    #[test]
    fn atomic_write_creates_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b/c.txt");
        write_atomic(&p, b"hi").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"hi");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
