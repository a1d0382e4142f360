//! Plain-text dataset dump.
//!
//! ```text
//! # vprompt-dataset 1
//! # name synthetic
//! # classes class00 class01 class02 class03
//! id label f0 f1 ... f{D-1}
//! 0 0 0.125 -1.5 ...
//! ```
//!
//! Columns are separated by single spaces. Feature values use Rust's
//! shortest round-trip float formatting, so a dump/load cycle is exact.

use std::fmt::Write as _;
use std::path::Path;

use super::{Dataset, Example};
use crate::error::{Error, Result};

const HEADER: &str = "# vprompt-dataset 1";

pub fn dump_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    let dim = ds.feature_dim();
    writeln!(out, "{HEADER}").unwrap();
    writeln!(out, "# name {}", ds.name).unwrap();
    writeln!(out, "# classes {}", ds.class_names.join(" ")).unwrap();
    out.push_str("id label");
    for j in 0..dim {
        write!(out, " f{j}").unwrap();
    }
    out.push('\n');
    for e in &ds.examples {
        write!(out, "{} {}", e.id, e.label).unwrap();
        for v in &e.features {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let err = |line: usize, message: String| Error::DatasetFile { line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| lines.next().ok_or_else(|| err(0, format!("missing {what}")));
    let (n, header) = next("header")?;
    if header.trim_end() != HEADER {
        return Err(err(n, format!("expected `{HEADER}`")));
    }
    let (n, name_line) = next("name line")?;
    let name = name_line
        .strip_prefix("# name ")
        .ok_or_else(|| err(n, "expected `# name <name>`".into()))?
        .to_string();
    let (n, class_line) = next("class line")?;
    let class_names: Vec<String> = class_line
        .strip_prefix("# classes ")
        .ok_or_else(|| err(n, "expected `# classes ...`".into()))?
        .split_whitespace()
        .map(String::from)
        .collect();
    if class_names.is_empty() {
        return Err(err(n, "no classes listed".into()));
    }
    let (n, columns) = next("column line")?;
    let cols: Vec<&str> = columns.split_whitespace().collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
        return Err(err(n, "expected `id label f0 ...`".into()));
    }
    let dim = cols.len() - 2;
    let mut examples = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != dim + 2 {
            return Err(err(n, format!("expected {} columns, found {}", dim + 2, fields.len())));
        }
        let id = fields[0].parse().map_err(|_| err(n, format!("bad id `{}`", fields[0])))?;
        let label: usize = fields[1].parse().map_err(|_| err(n, format!("bad label `{}`", fields[1])))?;
        if label >= class_names.len() {
            return Err(err(n, format!("label {label} out of range for {} classes", class_names.len())));
        }
        let features = fields[2..]
            .iter()
            .enumerate()
            .map(|(j, s)| match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(n, format!("bad value `{s}` in column f{j}"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        examples.push(Example { id, label, features });
    }
    Ok(Dataset {
        name,
        class_names,
        examples,
    })
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dump_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}
