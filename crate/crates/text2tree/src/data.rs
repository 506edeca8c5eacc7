//! Line-delimited JSON datasets and vocabulary files.
//!
//! One record per line: `{"text": "...", "labels": ["..."]}`, optionally
//! with `"split": "train" | "dev" | "test"`. Files where every record names
//! its split keep that split; files without split fields are split with the
//! seed.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use text2tree_core::dataset::{Dataset, Record, SplitName, Splits};
use text2tree_core::objectives::Task;
use text2tree_core::text_encoder::Vocabulary;

use crate::error::{content_lines, read, write, FormatError, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    text: String,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

pub fn load_dataset(path: &Path, task: Task, seed: u64) -> Result<Dataset> {
    let text = read(path)?;
    let mut records = Vec::new();
    let mut splits = Splits::default();
    let mut with_split = 0;
    for (line, l) in content_lines(&text) {
        let parsed: Line = serde_json::from_str(l).map_err(|e| FormatError::parse(path, line, e.to_string()))?;
        if parsed.text.trim().is_empty() {
            return Err(FormatError::parse(path, line, "empty text"));
        }
        if parsed.labels.is_empty() {
            return Err(FormatError::parse(path, line, "no labels"));
        }
        if task == Task::MultiClass && parsed.labels.len() != 1 {
            return Err(FormatError::parse(
                path,
                line,
                format!("multi-class record has {} labels", parsed.labels.len()),
            ));
        }
        let index = records.len();
        if let Some(split) = &parsed.split {
            with_split += 1;
            match split.as_str() {
                "train" => splits.train.push(index),
                "dev" => splits.dev.push(index),
                "test" => splits.test.push(index),
                other => return Err(FormatError::parse(path, line, format!("unknown split `{other}`"))),
            }
        }
        records.push(Record {
            text: parsed.text,
            labels: parsed.labels,
        });
    }
    let result = if with_split == 0 {
        Dataset::new(records, task, seed)
    } else if with_split == records.len() {
        Dataset::with_splits(records, task, splits)
    } else {
        return Err(FormatError::parse(path, 0, "some records name a split and some do not"));
    };
    result.map_err(|e| FormatError::invalid(path, e))
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut split_of = vec![""; dataset.len()];
    for name in [SplitName::Train, SplitName::Dev, SplitName::Test] {
        for &i in dataset.split(name) {
            split_of[i] = name.as_str();
        }
    }
    let mut out = String::new();
    for (r, split) in dataset.records.iter().zip(split_of) {
        let line = Line {
            text: r.text.clone(),
            labels: r.labels.clone(),
            split: Some(split.to_string()),
        };
        writeln!(out, "{}", serde_json::to_string(&line).expect("records serialize")).unwrap();
    }
    write(path, &out)
}

/// One token per line; the line number is the id.
pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for t in vocab.tokens() {
        writeln!(out, "{t}").unwrap();
    }
    write(path, &out)
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = read(path)?;
    let tokens: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
    Vocabulary::from_tokens(tokens).map_err(|e| FormatError::invalid(path, e))
}
