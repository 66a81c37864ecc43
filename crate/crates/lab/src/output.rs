//! CSV and JSON writers. Every file carries the experiment spec, the seeds and the
//! build identifier, and floats are written with 17 significant digits so a
//! re-run with the same spec reproduces the files byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{LabError, LabResult};
use crate::spec::ExperimentSpec;

/// `git describe`-style identifier baked in at compile time.
pub fn build_id() -> &'static str {
    env!("NTH_LAB_BUILD")
}

/// Provenance shared by every file of one run.
#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub build: String,
    pub command: String,
    pub base_seed: u64,
    /// `"spec"` or the name of the overriding environment variable.
    pub seed_source: String,
    pub seeds: Vec<u64>,
    pub init_seeds: Vec<u64>,
    pub spec: ExperimentSpec,
}

impl RunMeta {
    pub fn new(spec: &ExperimentSpec, seed_source: &str) -> Self {
        Self {
            build: build_id().to_string(),
            command: spec.command.name().to_string(),
            base_seed: spec.base_seed,
            seed_source: seed_source.to_string(),
            seeds: spec.seeds.clone(),
            init_seeds: spec.init_seeds(),
            spec: spec.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    F(f64),
    U(u64),
    S(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::U(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::U(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::S(if v { "true" } else { "false" }.into())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::S(v)
    }
}

/// 17 significant digits; non-finite values as `NaN`, `inf`, `-inf`.
pub fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::F(v) => format_f64(*v),
            Cell::U(v) => v.to_string(),
            Cell::S(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width differs from header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn ensure_dir(dir: &Path) -> LabResult<()> {
    fs::create_dir_all(dir).map_err(|source| LabError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

/// Writes `<dir>/<name>.csv`: `#` metadata lines, then an RFC-4180 table.
pub fn write_csv(dir: &Path, name: &str, meta: &RunMeta, table: &Table) -> LabResult<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(format!("{name}.csv"));
    let mut buf = Vec::new();
    buf.extend_from_slice(format!("# build: {}\n", meta.build).as_bytes());
    buf.extend_from_slice(format!("# command: {}\n", meta.command).as_bytes());
    buf.extend_from_slice(
        format!("# base_seed: {} (from {})\n", meta.base_seed, meta.seed_source).as_bytes(),
    );
    buf.extend_from_slice(format!("# seeds: {:?}\n", meta.seeds).as_bytes());
    buf.extend_from_slice(format!("# init_seeds: {:?}\n", meta.init_seeds).as_bytes());
    buf.extend_from_slice(format!("# spec: {}\n", meta.spec.to_json()).as_bytes());
    {
        let mut w = csv::WriterBuilder::new().from_writer(&mut buf);
        let csv_err = |source| LabError::Csv {
            path: path.clone(),
            source,
        };
        w.write_record(&table.header).map_err(csv_err)?;
        for row in &table.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(csv_err)?;
        }
        w.flush().map_err(|source| LabError::Write {
            path: path.clone(),
            source,
        })?;
    }
    fs::write(&path, buf).map_err(|source| LabError::Write {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Writes `<dir>/<name>.json` with the metadata, the pass flag and `results`.
pub fn write_json(dir: &Path, name: &str, meta: &RunMeta, passed: bool, results: &Value) -> LabResult<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(format!("{name}.json"));
    let doc = json!({
        "meta": meta,
        "passed": passed,
        "results": results,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("JSON document serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|source| LabError::Write {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Reads back a table written by [`write_csv`], skipping metadata lines.
pub fn read_csv(path: &Path) -> LabResult<(Vec<String>, Vec<Vec<String>>)> {
    let csv_err = |source| LabError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()
        .map_err(csv_err)?;
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::CommandKind;

    #[test]
    fn floats_roundtrip_exactly() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 123456789.12345679] {
            let s = format_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(format_f64(f64::NAN), "NaN");
        assert_eq!(format_f64(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn csv_and_json_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec::preset(CommandKind::Flow);
        let meta = RunMeta::new(&spec, "spec");
        let mut t = Table::new(&["t", "loss", "note"]);
        t.push(vec![0.0.into(), 0.25.into(), "a,b".into()]);
        t.push(vec![0.1.into(), f64::NAN.into(), "plain".into()]);
        let p = write_csv(dir.path(), "flow", &meta, &t).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# build: "));
        assert!(text.contains("# spec: {"));
        assert!(text.contains("\"a,b\""));
        let (h, rows) = read_csv(&p).unwrap();
        assert_eq!(h, vec!["t", "loss", "note"]);
        assert_eq!(rows[0][2], "a,b");
        assert_eq!(rows[1][1], "NaN");
        assert_eq!(rows[0][1].parse::<f64>().unwrap(), 0.25);

        let j = write_json(dir.path(), "flow", &meta, true, &json!({"x": 1.5})).unwrap();
        let v: Value = serde_json::from_str(&std::fs::read_to_string(j).unwrap()).unwrap();
        assert_eq!(v["passed"], json!(true));
        assert_eq!(v["meta"]["spec"]["command"], json!("flow"));
        assert_eq!(v["results"]["x"], json!(1.5));
    }
}
