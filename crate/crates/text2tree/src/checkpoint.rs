//! Versioned text checkpoints.
//!
//! ```text
//! text2tree-checkpoint 1
//! [config]
//! key = value
//! [vocab] <count>
//! <token>
//! [train_counts] <c0> <c1> ...
//! [block] <name> <rows> <cols>
//! <row of %.17g values>
//! [end]
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use text2tree_core::fmt::g17;
use text2tree_core::hlr::HlrParams;
use text2tree_core::label_tree::CodeTree;
use text2tree_core::metrics;
use text2tree_core::text_encoder::{EncoderParams, Pooling, Vocabulary};
use text2tree_core::trainer::{Model, Trained, TrainingConfig};
use text2tree_core::Matrix;

use crate::error::{read, write, FormatError, Result};

pub const MAGIC: &str = "text2tree-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub vocab: Vocabulary,
    pub train_counts: Vec<usize>,
    pub model: Model,
}

impl Checkpoint {
    pub fn from_trained(config: &TrainingConfig, trained: &Trained) -> Self {
        Self {
            config: config.clone(),
            vocab: trained.vocab.clone(),
            train_counts: trained.train_counts.clone(),
            model: trained.model.clone(),
        }
    }

    pub fn groups(&self) -> Vec<Vec<usize>> {
        metrics::frequency_groups(&self.train_counts)
    }

    /// Checks parameter shapes against a tree.
    pub fn check_tree(&self, tree: &CodeTree) -> text2tree_core::Result<()> {
        self.model.hlr.validate(tree)?;
        self.model.encoder.validate()?;
        if self.model.encoder.num_classes() != tree.num_targets() {
            return Err(text2tree_core::Error::Shape(format!(
                "checkpoint has {} classes, tree has {} targets",
                self.model.encoder.num_classes(),
                tree.num_targets()
            )));
        }
        Ok(())
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{MAGIC} {VERSION}").unwrap();
    writeln!(out, "[config]").unwrap();
    for (k, v) in ckpt.config.to_pairs() {
        writeln!(out, "{k} = {v}").unwrap();
    }
    writeln!(out, "[vocab] {}", ckpt.vocab.len()).unwrap();
    for t in ckpt.vocab.tokens() {
        writeln!(out, "{t}").unwrap();
    }
    let counts: Vec<String> = ckpt.train_counts.iter().map(usize::to_string).collect();
    writeln!(out, "[train_counts] {}", counts.join(" ")).unwrap();
    for (name, m) in ckpt.model.blocks() {
        writeln!(out, "[block] {name} {} {}", m.rows(), m.cols()).unwrap();
        for r in 0..m.rows() {
            let row: Vec<String> = m.row(r).iter().map(|&v| g17(v)).collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
    }
    writeln!(out, "[end]").unwrap();
    write(path, &out)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = read(path)?;
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r')).enumerate().map(|(i, l)| (i + 1, l));
    let bad = |line: usize, m: &str| FormatError::parse(path, line, m.to_string());

    let (line, header) = lines.next().ok_or_else(|| bad(1, "empty checkpoint"))?;
    match header.split_once(' ') {
        Some((MAGIC, v)) if v.trim().parse() == Ok(VERSION) => {}
        Some((MAGIC, v)) => return Err(bad(line, &format!("unsupported checkpoint version `{v}`"))),
        _ => return Err(bad(line, "not a text2tree checkpoint")),
    }
    let (line, l) = lines.next().ok_or_else(|| bad(line + 1, "missing [config]"))?;
    if l != "[config]" {
        return Err(bad(line, "expected [config]"));
    }
    let mut config = TrainingConfig::default();
    let mut line = line;
    let mut l;
    loop {
        (line, l) = lines.next().ok_or_else(|| bad(line + 1, "missing [vocab]"))?;
        if l.starts_with("[vocab]") {
            break;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| bad(line, "expected `key = value`"))?;
        config.set(k, v).map_err(|e| bad(line, &e.to_string()))?;
    }
    let count: usize = l["[vocab]".len()..].trim().parse().map_err(|_| bad(line, "bad vocabulary size"))?;
    let mut tokens = Vec::with_capacity(count);
    for _ in 0..count {
        (line, l) = lines.next().ok_or_else(|| bad(line + 1, "truncated vocabulary"))?;
        tokens.push(l.to_string());
    }
    let vocab = Vocabulary::from_tokens(tokens).map_err(|e| bad(line, &e.to_string()))?;
    (line, l) = lines.next().ok_or_else(|| bad(line + 1, "missing [train_counts]"))?;
    let counts = l
        .strip_prefix("[train_counts]")
        .ok_or_else(|| bad(line, "expected [train_counts]"))?;
    let train_counts = counts
        .split_whitespace()
        .map(|c| c.parse().map_err(|_| bad(line, "bad count")))
        .collect::<Result<Vec<usize>>>()?;

    let mut blocks: BTreeMap<String, Matrix> = BTreeMap::new();
    loop {
        (line, l) = lines.next().ok_or_else(|| bad(line + 1, "missing [end]"))?;
        if l == "[end]" {
            break;
        }
        let fields: Vec<&str> = l.split_whitespace().collect();
        let (name, rows, cols) = match fields.as_slice() {
            ["[block]", name, rows, cols] => (
                name.to_string(),
                rows.parse::<usize>().map_err(|_| bad(line, "bad row count"))?,
                cols.parse::<usize>().map_err(|_| bad(line, "bad column count"))?,
            ),
            _ => return Err(bad(line, "expected `[block] <name> <rows> <cols>`")),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            (line, l) = lines.next().ok_or_else(|| bad(line + 1, "truncated block"))?;
            let before = data.len();
            for v in l.split_whitespace() {
                data.push(v.parse::<f64>().map_err(|_| bad(line, "bad number"))?);
            }
            if data.len() - before != cols {
                return Err(bad(line, &format!("expected {cols} values")));
            }
        }
        if blocks.insert(name.clone(), Matrix::from_vec(rows, cols, data)).is_some() {
            return Err(bad(line, &format!("duplicate block `{name}`")));
        }
    }

    let mut take = |name: &str| {
        blocks
            .remove(name)
            .ok_or_else(|| FormatError::parse(path, 0, format!("missing block `{name}`")))
    };
    let hlr = HlrParams {
        label_embeddings: take("label_embeddings")?,
        w_q: take("hlr_w_q")?,
        w_k: take("hlr_w_k")?,
        w_v: take("hlr_w_v")?,
        gate_logits: take("gate_logits")?,
    };
    let token_embeddings = take("token_embeddings")?;
    let pooling = match config.pooling {
        text2tree_core::text_encoder::PoolingKind::Mean => Pooling::Mean,
        text2tree_core::text_encoder::PoolingKind::SelfAttention => Pooling::SelfAttention {
            w_q: take("enc_w_q")?,
            w_k: take("enc_w_k")?,
            w_v: take("enc_w_v")?,
        },
    };
    let encoder = EncoderParams {
        token_embeddings,
        pooling,
        head_w1: take("head_w1")?,
        head_b1: take("head_b1")?,
        head_w2: take("head_w2")?,
        head_b2: take("head_b2")?,
    };
    if let Some(extra) = blocks.keys().next() {
        return Err(FormatError::parse(path, 0, format!("unexpected block `{extra}`")));
    }
    encoder.validate().map_err(|e| FormatError::invalid(path, e))?;
    if encoder.token_embeddings.rows() != vocab.len() {
        return Err(FormatError::parse(path, 0, "vocabulary and token embeddings disagree"));
    }
    Ok(Checkpoint {
        config,
        vocab,
        train_counts,
        model: Model { hlr, encoder },
    })
}
