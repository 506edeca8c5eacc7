//! Central-difference check of the analytic gradients of the full objective.
//!
//! Detached quantities are replayed from the analytic pass, so the numeric
//! derivative treats them as constants just like backpropagation does. Hard
//! gates are piecewise constant; checks that include the gate logits run
//! with [`GateMode::Soft`].

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::hlr::GateMode;
use crate::label_tree::CodeTree;
use crate::matrix::Matrix;
use crate::rng::{stream, Stream};
use crate::tape::Tape;
use crate::trainer::{loss_on_tape, BatchInput, Model, TrainingConfig, GATE_BLOCK};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Entries checked per block; larger blocks are sampled.
    pub max_entries: usize,
    pub gate_mode: GateMode,
    pub seed: u64,
    /// Multiplies the analytic gradient of one block before comparing.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_entries: 48,
            gate_mode: GateMode::Soft,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn block(&self, name: &str) -> Option<&BlockReport> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn loss_value(
    model: &Model,
    tree: &CodeTree,
    config: &TrainingConfig,
    batch: &BatchInput,
    gate_mode: GateMode,
    replay: &[Matrix],
) -> Result<f64> {
    let mut tape = Tape::with_replay(replay.to_vec());
    let vars = model.register(&mut tape);
    let loss = loss_on_tape(&mut tape, &vars, tree, config, batch, gate_mode)?;
    Ok(tape.value(loss.total).item())
}

/// Compares backpropagated and central-difference gradients of the training
/// loss on one batch, block by block.
pub fn check(
    model: &Model,
    tree: &CodeTree,
    config: &TrainingConfig,
    batch: &BatchInput,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let loss = loss_on_tape(&mut tape, &vars, tree, config, batch, options.gate_mode)?;
    let value = tape.value(loss.total).item();
    let grads = tape.backward(loss.total);
    let replay = tape.detached_values().to_vec();
    let leaves = vars.leaves();
    let mut rng = stream(options.seed, Stream::Check);

    let mut blocks = Vec::new();
    let names: Vec<(&'static str, (usize, usize))> = model.blocks().iter().map(|(n, m)| (*n, m.shape())).collect();
    for (k, &(name, shape)) in names.iter().enumerate() {
        if name == GATE_BLOCK && options.gate_mode == GateMode::StraightThrough {
            continue;
        }
        let mut analytic = grads.get_or_zeros(leaves[k], shape);
        if let Some((target, factor)) = &options.corrupt {
            if target == name {
                analytic = analytic.scale(*factor);
            }
        }
        let entries = pick_entries(&analytic, options.max_entries, &mut rng);
        let mut worst = 0.0f64;
        for &e in &entries {
            let mut plus = model.clone();
            plus.blocks_mut()[k].1.as_mut_slice()[e] += options.step;
            let mut minus = model.clone();
            minus.blocks_mut()[k].1.as_mut_slice()[e] -= options.step;
            let lp = loss_value(&plus, tree, config, batch, options.gate_mode, &replay)?;
            let lm = loss_value(&minus, tree, config, batch, options.gate_mode, &replay)?;
            let numeric = (lp - lm) / (2.0 * options.step);
            if !numeric.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            worst = worst.max(relative_error(analytic.as_slice()[e], numeric, options.floor));
        }
        blocks.push(BlockReport {
            name,
            checked: entries.len(),
            max_rel_error: worst,
            max_abs_analytic: analytic.max_abs(),
        });
    }
    Ok(GradCheckReport { loss: value, blocks })
}

/// Every entry of small blocks; otherwise a sample that favours entries with
/// a nonzero analytic gradient and keeps a few zero ones.
fn pick_entries(analytic: &Matrix, max: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let n = analytic.len();
    if n <= max {
        return (0..n).collect();
    }
    let (live, dead): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| analytic.as_slice()[i] != 0.0);
    let dead_quota = (max / 8).min(dead.len());
    let live_quota = (max - dead_quota).min(live.len());
    let dead_quota = (max - live_quota).min(dead.len());
    let mut out: Vec<usize> = sample(rng, live.len(), live_quota).into_iter().map(|i| live[i]).collect();
    out.extend(sample(rng, dead.len(), dead_quota).into_iter().map(|i| dead[i]));
    out.sort_unstable();
    out
}
