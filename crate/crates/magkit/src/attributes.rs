//! Attribute label tables.
//!
//! The first non-empty line names the attributes. An optional leading
//! `filename`-like column header is ignored, and so is a lone count line
//! before the header. Each following row is a file name and one flag per
//! attribute, either `-1/1` or `0/1`. Fields are split on commas or
//! whitespace.

use std::path::Path;

use crate::error::{io, parse, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeTable {
    pub names: Vec<String>,
    /// `(file name, labels)` in file order.
    pub rows: Vec<(String, Vec<u8>)>,
}

impl AttributeTable {
    /// Column indices of `subset` in the table, in the subset's order.
    pub fn columns(&self, subset: &[String], origin: &Path) -> Result<Vec<usize>> {
        if subset.is_empty() {
            return Err(magkit_core::Error::Empty("attribute subset").into());
        }
        subset
            .iter()
            .map(|a| self.names.iter().position(|n| n == a).ok_or_else(|| parse(origin, None, format!("no attribute column named {a}"))))
            .collect()
    }
}

fn fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect()
}

pub fn parse_attribute_table(text: &str, origin: &Path) -> Result<AttributeTable> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    if let Some((_, l)) = lines.peek() {
        let f = fields(l);
        if f.len() == 1 && f[0].parse::<usize>().is_ok() {
            lines.next();
        }
    }
    let (_, header) = lines.next().ok_or_else(|| parse(origin, None, "empty attribute table"))?;
    let mut names: Vec<String> = fields(header).into_iter().map(String::from).collect();
    if names.first().is_some_and(|n| matches!(n.to_ascii_lowercase().as_str(), "file" | "filename" | "image" | "image_id" | "name")) {
        names.remove(0);
    }
    if names.is_empty() {
        return Err(parse(origin, Some(1), "header names no attributes"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let row = i + 1;
        let f = fields(line);
        if f.len() != names.len() + 1 {
            return Err(parse(origin, Some(row), format!("expected {} fields, found {}", names.len() + 1, f.len())));
        }
        let labels = f[1..]
            .iter()
            .map(|v| match *v {
                "1" => Ok(1),
                "0" | "-1" => Ok(0),
                other => Err(parse(origin, Some(row), format!("flag {other:?} is not -1, 0 or 1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        rows.push((f[0].to_string(), labels));
    }
    Ok(AttributeTable { names, rows })
}

pub fn read_attribute_table(path: &Path) -> Result<AttributeTable> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    parse_attribute_table(&text, path)
}

/// Writes a comma-separated table with a `filename` header column and 0/1
/// flags.
pub fn write_attribute_table(path: &Path, table: &AttributeTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| parse(path, None, e.to_string()))?;
    let csv_err = |e: csv::Error| parse(path, None, e.to_string());
    let mut header = vec![String::from("filename")];
    header.extend(table.names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (file, labels) in &table.rows {
        let mut rec = vec![file.clone()];
        rec.extend(labels.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io(path))
}
