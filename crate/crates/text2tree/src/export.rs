//! Plain-text matrix exports with `%.17g` values, tab separated.

use std::fmt::Write as _;
use std::path::Path;

use text2tree_core::fmt::g17;
use text2tree_core::label_tree::CodeTree;
use text2tree_core::Matrix;

use crate::error::{content_lines, read, write, FormatError, Result};

/// One node per line: id, then its `d` values.
pub fn write_representations(path: &Path, tree: &CodeTree, h: &Matrix) -> Result<()> {
    let mut out = String::new();
    for (i, node) in tree.nodes().iter().enumerate() {
        out.push_str(&node.id);
        for &v in h.row(i) {
            write!(out, "\t{}", g17(v)).unwrap();
        }
        out.push('\n');
    }
    write(path, &out)
}

pub fn read_representations(path: &Path) -> Result<(Vec<String>, Matrix)> {
    let text = read(path)?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut cols = None;
    for (line, l) in content_lines(&text) {
        let mut fields = l.split('\t');
        ids.push(fields.next().unwrap_or_default().to_string());
        let row = parse_row(path, line, fields)?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(FormatError::parse(path, line, "ragged rows"));
        }
        data.extend(row);
    }
    let cols = cols.unwrap_or(0);
    Ok((ids.clone(), Matrix::from_vec(ids.len(), cols, data)))
}

/// Header line of `N` ids, then `N` rows of `N` values.
pub fn write_square(path: &Path, ids: &[String], m: &Matrix) -> Result<()> {
    assert_eq!(m.shape(), (ids.len(), ids.len()));
    let mut out = ids.join("\t");
    out.push('\n');
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|&v| g17(v)).collect();
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    write(path, &out)
}

pub fn read_square(path: &Path) -> Result<(Vec<String>, Matrix)> {
    let text = read(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines.next().ok_or_else(|| FormatError::parse(path, 1, "missing header"))?;
    let ids: Vec<String> = header.split('\t').map(str::to_string).collect();
    let n = ids.len();
    let mut data = Vec::with_capacity(n * n);
    for (line, l) in lines.by_ref().take(n) {
        let row = parse_row(path, line, l.split('\t'))?;
        if row.len() != n {
            return Err(FormatError::parse(path, line, format!("expected {n} values")));
        }
        data.extend(row);
    }
    if data.len() != n * n {
        return Err(FormatError::parse(path, n + 1, "truncated matrix"));
    }
    Ok((ids, Matrix::from_vec(n, n, data)))
}

fn parse_row<'a>(path: &Path, line: usize, fields: impl Iterator<Item = &'a str>) -> Result<Vec<f64>> {
    fields
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| FormatError::parse(path, line, format!("bad number `{f}`")))
        })
        .collect()
}
