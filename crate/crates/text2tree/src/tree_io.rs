//! Tree files: `child<TAB>parent` per line; targets files: one code per line.
//! Lines starting with `#` are ignored in both.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use text2tree_core::label_tree::CodeTree;

use crate::error::{content_lines, read, write, FormatError, Result};

pub fn read_edges(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read(path)?;
    let mut edges = Vec::new();
    for (line, l) in content_lines(&text) {
        let (child, parent) = l
            .split_once('\t')
            .ok_or_else(|| FormatError::parse(path, line, "expected `child<TAB>parent`"))?;
        let (child, parent) = (child.trim(), parent.trim());
        if child.is_empty() || parent.is_empty() || parent.contains('\t') {
            return Err(FormatError::parse(path, line, "expected `child<TAB>parent`"));
        }
        edges.push((child.to_string(), parent.to_string()));
    }
    Ok(edges)
}

pub fn read_targets(path: &Path) -> Result<Vec<String>> {
    let text = read(path)?;
    Ok(content_lines(&text).map(|(_, l)| l.trim().to_string()).collect())
}

pub fn load_tree(edges: &Path, targets: &Path) -> Result<CodeTree> {
    let e = read_edges(edges)?;
    let t = read_targets(targets)?;
    CodeTree::build_from_edges(&e, &t).map_err(|err| FormatError::invalid(edges, err))
}

pub fn write_edges(path: &Path, tree: &CodeTree) -> Result<()> {
    let mut out = String::new();
    for (child, parent) in tree.to_edges() {
        writeln!(out, "{child}\t{parent}").unwrap();
    }
    write(path, &out)
}

pub fn write_targets(path: &Path, tree: &CodeTree) -> Result<()> {
    let mut out = String::new();
    for code in tree.target_codes() {
        writeln!(out, "{code}").unwrap();
    }
    write(path, &out)
}

/// `code<TAB>text` per line.
pub fn read_label_texts(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = read(path)?;
    let mut out = BTreeMap::new();
    for (line, l) in content_lines(&text) {
        let (code, label) = l
            .split_once('\t')
            .ok_or_else(|| FormatError::parse(path, line, "expected `code<TAB>text`"))?;
        if out.insert(code.trim().to_string(), label.trim().to_string()).is_some() {
            return Err(FormatError::parse(path, line, format!("duplicate code `{}`", code.trim())));
        }
    }
    Ok(out)
}
