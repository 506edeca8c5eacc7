//! Flat `key = value` configuration files. `#` starts a comment line.

use std::path::Path;

use text2tree_core::generator::GeneratorSpec;
use text2tree_core::trainer::{parse_task, TrainingConfig};

use crate::error::{content_lines, read, FormatError, Result};

pub fn parse_pairs(path: &Path, text: &str) -> Result<Vec<(usize, String, String)>> {
    content_lines(text)
        .map(|(line, l)| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| FormatError::parse(path, line, "expected `key = value`"))?;
            Ok((line, k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Applies a training config file on top of `config`.
pub fn apply_training_file(path: &Path, config: &mut TrainingConfig) -> Result<()> {
    let text = read(path)?;
    for (line, k, v) in parse_pairs(path, &text)? {
        config
            .set(&k, &v)
            .map_err(|e| FormatError::parse(path, line, e.to_string()))?;
    }
    Ok(())
}

/// Sets one generator field from text.
pub fn set_generator(spec: &mut GeneratorSpec, key: &str, value: &str) -> std::result::Result<(), String> {
    fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
        v.parse().map_err(|_| format!("bad value `{v}`"))
    }
    match key {
        "branching" => {
            spec.branching = value
                .split(',')
                .map(|s| num(s.trim()))
                .collect::<std::result::Result<_, _>>()?
        }
        "num_labels" => spec.num_labels = num(value)?,
        "num_samples" => spec.num_samples = num(value)?,
        "skew" => spec.skew = num(value)?,
        "tokens_per_label" => spec.tokens_per_label = num(value)?,
        "sibling_overlap" => spec.sibling_overlap = num(value)?,
        "background_tokens" => spec.background_tokens = num(value)?,
        "noise_fraction" => spec.noise_fraction = num(value)?,
        "min_len" => spec.min_len = num(value)?,
        "max_len" => spec.max_len = num(value)?,
        "labels_per_record" => spec.labels_per_record = num(value)?,
        "task" => spec.task = parse_task(value).ok_or_else(|| format!("bad task `{value}`"))?,
        "seed" => spec.seed = num(value)?,
        other => return Err(format!("unknown key `{other}`")),
    }
    Ok(())
}

pub fn apply_generator_file(path: &Path, spec: &mut GeneratorSpec) -> Result<()> {
    let text = read(path)?;
    for (line, k, v) in parse_pairs(path, &text)? {
        set_generator(spec, &k, &v).map_err(|e| FormatError::parse(path, line, e))?;
    }
    Ok(())
}
