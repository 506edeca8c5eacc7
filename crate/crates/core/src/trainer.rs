//! Training, evaluation and hyperparameter search.
//!
//! One step: encode the batch, compute label representations, turn them
//! into a batch similarity matrix, mix encodings with dissimilarity mixup,
//! classify the mixed encodings and minimise
//! `(1 - lambda_loss) * CE + lambda_loss * SSL`. The gradient policy decides
//! which similarity path (mixing weights or contrastive weights) carries
//! gradient back into the label representations.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::dataset::{Dataset, SplitName};
use crate::error::{Error, Result};
use crate::hlr::{self, EmbedInit, GateMode, HlrParams, HlrVars};
use crate::label_similarity::{self, ClampMode};
use crate::label_tree::CodeTree;
use crate::matrix::Matrix;
use crate::metrics::{self, EpochLog, MetricsReport};
use crate::objectives::{self, Reduction, Task};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{stream, Stream};
use crate::tape::{Tape, Var};
use crate::text_encoder::{self, EncoderParams, EncoderVars, Pooling, PoolingKind, Vocabulary};

/// Temperature grid searched by default.
pub const DEFAULT_TAU_GRID: [f64; 4] = [0.5, 1.0, 2.0, 3.0];
/// Loss-weight grid searched by default.
pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [0.001, 0.005, 0.01, 0.05];
/// Learning rates used with a pretrained backbone; desk-scale encoders
/// usually need larger ones.
pub const PRETRAINED_LR_GRID: [f64; 4] = [5e-6, 1e-5, 3e-5, 5e-5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Label representations, similarity-surrogate loss and dissimilarity mixup.
    Text2Tree,
    /// Cross entropy only.
    Finetune,
    /// Cross entropy plus supervised contrastive loss.
    Scl,
    /// Cross entropy on `Beta(alpha, alpha)`-mixed encodings.
    Mixup { alpha: f64 },
    /// Dissimilarity mixup only; label representations learn through the
    /// mixing weights.
    NoSsl,
    /// Similarity-surrogate loss only, no mixing.
    NoDml,
    /// Supervised contrastive loss plus ordinary mixup.
    NoHlr { alpha: f64 },
}

impl Mode {
    pub fn uses_label_similarity(self) -> bool {
        matches!(self, Mode::Text2Tree | Mode::NoSsl | Mode::NoDml)
    }

    pub fn uses_contrastive(self) -> bool {
        matches!(self, Mode::Text2Tree | Mode::NoDml | Mode::Scl | Mode::NoHlr { .. })
    }

    pub fn uses_dml(self) -> bool {
        matches!(self, Mode::Text2Tree | Mode::NoSsl)
    }

    pub fn mixup_alpha(self) -> Option<f64> {
        match self {
            Mode::Mixup { alpha } | Mode::NoHlr { alpha } => Some(alpha),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Text2Tree => f.write_str("text2tree"),
            Mode::Finetune => f.write_str("finetune"),
            Mode::Scl => f.write_str("scl"),
            Mode::Mixup { alpha } => write!(f, "mixup({alpha})"),
            Mode::NoSsl => f.write_str("no-ssl"),
            Mode::NoDml => f.write_str("no-dml"),
            Mode::NoHlr { alpha } => write!(f, "no-hlr({alpha})"),
        }
    }
}

fn parse_alpha(s: &str, name: &str) -> Option<f64> {
    if s == name {
        return Some(1.0);
    }
    s.strip_prefix(name)?
        .strip_prefix('(')?
        .strip_suffix(')')?
        .trim()
        .parse()
        .ok()
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "text2tree" => Mode::Text2Tree,
            "finetune" => Mode::Finetune,
            "scl" => Mode::Scl,
            "no-ssl" => Mode::NoSsl,
            "no-dml" => Mode::NoDml,
            _ => {
                if let Some(alpha) = parse_alpha(s, "mixup") {
                    Mode::Mixup { alpha }
                } else if let Some(alpha) = parse_alpha(s, "no-hlr") {
                    Mode::NoHlr { alpha }
                } else {
                    return Err(Error::InvalidConfig(alloc::format!("unknown mode `{s}`")));
                }
            }
        })
    }
}

/// Which similarity path is cut from backpropagation into the label
/// representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradPolicy {
    /// Mixing weights are constants; label representations learn through
    /// the contrastive weights only.
    #[default]
    DetachDml,
    DetachSsl,
    NoDetach,
}

impl fmt::Display for GradPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradPolicy::DetachDml => "detach-dml",
            GradPolicy::DetachSsl => "detach-ssl",
            GradPolicy::NoDetach => "no-detach",
        })
    }
}

impl FromStr for GradPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "detach-dml" => Ok(GradPolicy::DetachDml),
            "detach-ssl" => Ok(GradPolicy::DetachSsl),
            "no-detach" => Ok(GradPolicy::NoDetach),
            other => Err(Error::InvalidConfig(alloc::format!("unknown gradient policy `{other}`"))),
        }
    }
}

/// Where batch similarities come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilaritySource {
    /// Cosine of learned label representations.
    #[default]
    Learned,
    /// 1 for identical targets, 0 otherwise.
    Indicator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectMetric {
    #[default]
    Macro,
    Micro,
}

impl SelectMetric {
    pub fn of(self, report: &MetricsReport) -> f64 {
        match self {
            SelectMetric::Macro => report.macro_f1,
            SelectMetric::Micro => report.micro_f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub task: Task,
    pub mode: Mode,
    pub grad_policy: GradPolicy,
    /// Label representation width.
    pub d: usize,
    /// Encoder width.
    pub d_enc: usize,
    pub tau: f64,
    pub lambda_loss: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub sim_clamp: ClampMode,
    pub z_normalize: bool,
    pub similarity: SimilaritySource,
    pub select_metric: SelectMetric,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub gate_init: f64,
    pub embed_std: f64,
    pub label_std: f64,
    pub pooling: PoolingKind,
    pub max_len: usize,
    pub min_freq: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            task: Task::MultiClass,
            mode: Mode::Text2Tree,
            grad_policy: GradPolicy::DetachDml,
            d: 32,
            d_enc: 32,
            tau: 0.5,
            lambda_loss: 0.05,
            lr: 3e-3,
            batch_size: 32,
            max_epochs: 30,
            patience: 10,
            seed: 0,
            sim_clamp: ClampMode::NonNegative,
            z_normalize: false,
            similarity: SimilaritySource::Learned,
            select_metric: SelectMetric::Macro,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gate_init: hlr::DEFAULT_GATE_INIT,
            embed_std: 0.1,
            label_std: 0.5,
            pooling: PoolingKind::Mean,
            max_len: 512,
            min_freq: 2,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if self.mode.uses_contrastive() && self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return bad("batch size and epochs must be positive".into());
        }
        if self.d < 1 || self.d_enc < 1 {
            return bad("dimensions must be positive".into());
        }
        if !(self.tau > 0.0) {
            return bad(alloc::format!("temperature {} must be positive", self.tau));
        }
        objectives::check_lambda_loss(self.lambda_loss)?;
        if let Some(alpha) = self.mode.mixup_alpha() {
            if !(alpha > 0.0) {
                return bad(alloc::format!("mixup alpha {alpha} must be positive"));
            }
        }
        if !(self.lr >= 0.0) || self.max_len < 1 {
            return bad("learning rate must be non-negative and max_len positive".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// `(detach mixing weights, detach contrastive weights)` for this mode.
    pub fn detach_flags(&self) -> (bool, bool) {
        match self.mode {
            Mode::Text2Tree => match self.grad_policy {
                GradPolicy::DetachDml => (true, false),
                GradPolicy::DetachSsl => (false, true),
                GradPolicy::NoDetach => (false, false),
            },
            _ => (false, false),
        }
    }
}

/// Every trainable block: label side and text side.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hlr: HlrParams,
    pub encoder: EncoderParams,
}

pub const GATE_BLOCK: &str = "gate_logits";

impl Model {
    pub fn init(tree: &CodeTree, vocab_size: usize, config: &TrainingConfig) -> Result<Self> {
        let encoder = EncoderParams::init(
            &mut stream(config.seed, Stream::EncoderInit),
            vocab_size,
            config.d_enc,
            tree.num_targets(),
            config.pooling,
            config.embed_std,
        );
        let hlr = HlrParams::init(
            tree,
            config.d,
            &mut stream(config.seed, Stream::HlrInit),
            &EmbedInit::Random {
                std: config.label_std,
            },
            config.gate_init,
        )?;
        Ok(Self { hlr, encoder })
    }

    /// Like [`Model::init`], but label embeddings start as the mean token
    /// embedding of each node's text. Needs `d == d_enc`.
    pub fn init_from_label_texts(
        tree: &CodeTree,
        vocab: &Vocabulary,
        config: &TrainingConfig,
        texts: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let encoder = EncoderParams::init(
            &mut stream(config.seed, Stream::EncoderInit),
            vocab.len(),
            config.d_enc,
            tree.num_targets(),
            config.pooling,
            config.embed_std,
        );
        let hlr = HlrParams::init(
            tree,
            config.d,
            &mut stream(config.seed, Stream::HlrInit),
            &EmbedInit::FromLabelText {
                vocab,
                token_embeddings: &encoder.token_embeddings,
                texts,
                std: config.label_std,
            },
            config.gate_init,
        )?;
        Ok(Self { hlr, encoder })
    }

    /// Named parameter blocks in a fixed order.
    pub fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = alloc::vec![
            ("label_embeddings", &self.hlr.label_embeddings),
            ("hlr_w_q", &self.hlr.w_q),
            ("hlr_w_k", &self.hlr.w_k),
            ("hlr_w_v", &self.hlr.w_v),
            (GATE_BLOCK, &self.hlr.gate_logits),
            ("token_embeddings", &self.encoder.token_embeddings),
        ];
        if let Pooling::SelfAttention { w_q, w_k, w_v } = &self.encoder.pooling {
            out.extend([("enc_w_q", w_q), ("enc_w_k", w_k), ("enc_w_v", w_v)]);
        }
        out.extend([
            ("head_w1", &self.encoder.head_w1),
            ("head_b1", &self.encoder.head_b1),
            ("head_w2", &self.encoder.head_w2),
            ("head_b2", &self.encoder.head_b2),
        ]);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out: Vec<(&'static str, &mut Matrix)> = alloc::vec![
            ("label_embeddings", &mut self.hlr.label_embeddings),
            ("hlr_w_q", &mut self.hlr.w_q),
            ("hlr_w_k", &mut self.hlr.w_k),
            ("hlr_w_v", &mut self.hlr.w_v),
            (GATE_BLOCK, &mut self.hlr.gate_logits),
            ("token_embeddings", &mut self.encoder.token_embeddings),
        ];
        if let Pooling::SelfAttention { w_q, w_k, w_v } = &mut self.encoder.pooling {
            out.push(("enc_w_q", w_q));
            out.push(("enc_w_k", w_k));
            out.push(("enc_w_v", w_v));
        }
        out.push(("head_w1", &mut self.encoder.head_w1));
        out.push(("head_b1", &mut self.encoder.head_b1));
        out.push(("head_w2", &mut self.encoder.head_w2));
        out.push(("head_b2", &mut self.encoder.head_b2));
        out
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            hlr: self.hlr.register(tape, true),
            encoder: self.encoder.register(tape, true),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, m)| m.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub hlr: HlrVars,
    pub encoder: EncoderVars,
}

impl ModelVars {
    /// Leaves in [`Model::blocks`] order.
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = alloc::vec![
            self.hlr.label_embeddings,
            self.hlr.w_q,
            self.hlr.w_k,
            self.hlr.w_v,
            self.hlr.gate_logits,
            self.encoder.token_embeddings,
        ];
        if let Some(att) = self.encoder.attention {
            out.extend(att);
        }
        out.extend([
            self.encoder.head_w1,
            self.encoder.head_b1,
            self.encoder.head_w2,
            self.encoder.head_b2,
        ]);
        out
    }
}

/// One mini-batch in model terms.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInput {
    pub sequences: Vec<Vec<usize>>,
    pub targets: Matrix,
    /// Sorted tree node indices per sample.
    pub label_sets: Vec<Vec<usize>>,
    /// Mixing partner of each sample, for modes that mix.
    pub pairing: Option<Vec<usize>>,
    /// Per-sample weights for ordinary mixup.
    pub mixup_lambda: Option<Vec<f64>>,
}

impl BatchInput {
    /// Draws the pairing permutation and, for mixup modes, one Beta weight
    /// shared by the batch. Modes without mixing leave the batch untouched.
    pub fn sample_mixing<R: rand::Rng + ?Sized>(&mut self, mode: Mode, pairing_rng: &mut R, mixup_rng: &mut R) -> Result<()> {
        let n = self.sequences.len();
        if mode.uses_dml() || mode.mixup_alpha().is_some() {
            let mut pairing: Vec<usize> = (0..n).collect();
            pairing.shuffle(pairing_rng);
            self.pairing = Some(pairing);
        }
        if let Some(alpha) = mode.mixup_alpha() {
            let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidConfig(alloc::format!("{e}")))?;
            let lambda = beta.sample(mixup_rng);
            self.mixup_lambda = Some(alloc::vec![lambda; n]);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub classification: Var,
    pub contrastive: Option<Var>,
}

/// Records the full training objective for one batch.
pub fn loss_on_tape(
    tape: &mut Tape,
    vars: &ModelVars,
    tree: &CodeTree,
    config: &TrainingConfig,
    batch: &BatchInput,
    gate_mode: GateMode,
) -> Result<LossVars> {
    let mode = config.mode;
    let n = batch.sequences.len();
    if mode.uses_contrastive() && n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let z = text_encoder::encode_on_tape(tape, &vars.encoder, &batch.sequences)?;
    let targets = tape.constant(batch.targets.clone());
    let (detach_dml, detach_ssl) = config.detach_flags();

    let sim_raw = if mode.uses_label_similarity() {
        Some(match config.similarity {
            SimilaritySource::Learned => {
                let h = hlr::representations_on_tape(tape, tree, &vars.hlr, gate_mode);
                label_similarity::pairwise_sim_on_tape(tape, h, &batch.label_sets)?
            }
            SimilaritySource::Indicator => tape.constant(objectives::indicator_similarity(&batch.targets).values),
        })
    } else {
        None
    };

    let contrastive = if mode.uses_contrastive() {
        let z_c = if config.z_normalize { tape.row_normalize(z) } else { z };
        let weights = match (mode, sim_raw) {
            (Mode::Text2Tree | Mode::NoDml, Some(raw)) => {
                let s = label_similarity::clamp_on_tape(tape, raw, config.sim_clamp);
                if detach_ssl {
                    tape.detach(s)
                } else {
                    s
                }
            }
            _ => tape.constant(objectives::indicator_similarity(&batch.targets).values),
        };
        Some(tape.contrastive(z_c, weights, config.tau, Reduction::Mean))
    } else {
        None
    };

    let (z_mixed, y_mixed) = if mode.uses_dml() {
        let pairing = batch
            .pairing
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("mixing mode needs a pairing".into()))?;
        objectives::check_permutation(pairing, n)?;
        let raw = sim_raw.expect("mixing modes compute similarities");
        objectives::dml_mix_on_tape(tape, z, targets, raw, pairing, detach_dml)
    } else if mode.mixup_alpha().is_some() {
        let pairing = batch
            .pairing
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("mixing mode needs a pairing".into()))?;
        objectives::check_permutation(pairing, n)?;
        let lambda = batch
            .mixup_lambda
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("mixup needs weights".into()))?;
        let lambda = tape.constant(Matrix::column_vector(lambda));
        (
            tape.row_mix(z, lambda, pairing.clone()),
            tape.row_mix(targets, lambda, pairing.clone()),
        )
    } else {
        (z, targets)
    };

    let logits = text_encoder::classify_on_tape(tape, &vars.encoder, z_mixed);
    let classification = match config.task {
        Task::MultiClass => tape.softmax_ce(logits, y_mixed),
        Task::MultiLabel => tape.bce_logits(logits, y_mixed),
    };
    let total = match contrastive {
        Some(c) => tape.weighted_sum(&[(classification, 1.0 - config.lambda_loss), (c, config.lambda_loss)]),
        None => tape.weighted_sum(&[(classification, 1.0)]),
    };
    if !tape.value(total).item().is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(LossVars {
        total,
        classification,
        contrastive,
    })
}

/// A dataset tokenised against a vocabulary and mapped onto the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub sequences: Vec<Vec<usize>>,
    pub label_sets: Vec<Vec<usize>>,
    pub targets: Matrix,
}

impl Prepared {
    pub fn new(dataset: &Dataset, tree: &CodeTree, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        dataset.check_labels(tree)?;
        let c = tree.num_targets();
        let mut targets = Matrix::zeros(dataset.len(), c);
        let mut sequences = Vec::with_capacity(dataset.len());
        let mut label_sets = Vec::with_capacity(dataset.len());
        for (r, rec) in dataset.records.iter().enumerate() {
            sequences.push(text_encoder::tokenize(&rec.text, vocab, max_len));
            let mut set: Vec<usize> = Vec::with_capacity(rec.labels.len());
            for l in &rec.labels {
                let id = tree.require(l)?;
                let class = tree.class_index(id).ok_or_else(|| Error::LabelNotTarget(l.clone()))?;
                targets[(r, class)] = 1.0;
                set.push(id.0);
            }
            set.sort_unstable();
            set.dedup();
            label_sets.push(set);
        }
        Ok(Self {
            sequences,
            label_sets,
            targets,
        })
    }

    pub fn batch(&self, indices: &[usize]) -> BatchInput {
        BatchInput {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            targets: self.targets.select_rows(indices),
            label_sets: indices.iter().map(|&i| self.label_sets[i].clone()).collect(),
            pairing: None,
            mixup_lambda: None,
        }
    }

    /// Occurrences of each class among `indices`.
    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.targets.cols()];
        for &i in indices {
            for (c, &v) in self.targets.row(i).iter().enumerate() {
                if v > 0.5 {
                    counts[c] += 1;
                }
            }
        }
        counts
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct Trained {
    /// Parameters of the best dev epoch.
    pub model: Model,
    pub vocab: Vocabulary,
    /// Frequency groups from training-split counts, rarest first.
    pub groups: Vec<Vec<usize>>,
    pub train_counts: Vec<usize>,
    /// Dev metrics of the best epoch, with the epoch log of the whole run.
    pub dev_report: MetricsReport,
    /// Total loss of every optimisation step.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

impl Trained {
    pub fn evaluate(&self, dataset: &Dataset, tree: &CodeTree, split: SplitName, max_len: usize) -> Result<MetricsReport> {
        let prepared = Prepared::new(dataset, tree, &self.vocab, max_len)?;
        evaluate(&self.model, &prepared, dataset.split(split), dataset.task, &self.groups)
    }
}

/// Scores `model` on the records `indices` of `prepared`.
pub fn evaluate(
    model: &Model,
    prepared: &Prepared,
    indices: &[usize],
    task: Task,
    groups: &[Vec<usize>],
) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let sequences: Vec<Vec<usize>> = indices.iter().map(|&i| prepared.sequences[i].clone()).collect();
    let z = text_encoder::encode(&sequences, &model.encoder)?;
    let logits = text_encoder::classify(&z, &model.encoder)?;
    let predictions = metrics::predict(&logits, task);
    let gold = metrics::target_table(&prepared.targets.select_rows(indices));
    metrics::score(&predictions, &gold, groups)
}

/// Mutable state of a run, advanced one batch at a time.
struct Run<'a> {
    config: &'a TrainingConfig,
    tree: &'a CodeTree,
    optimizer: AdamW,
    shuffle_rng: ChaCha8Rng,
    pairing_rng: ChaCha8Rng,
    mixup_rng: ChaCha8Rng,
    step_losses: Vec<f64>,
}

impl Run<'_> {
    fn step(&mut self, model: &mut Model, mut batch: BatchInput) -> Result<f64> {
        let mode = self.config.mode;
        batch.sample_mixing(mode, &mut self.pairing_rng, &mut self.mixup_rng)?;
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let loss = loss_on_tape(&mut tape, &vars, self.tree, self.config, &batch, GateMode::StraightThrough)?;
        let value = tape.value(loss.total).item();
        let grads = tape.backward(loss.total);
        let leaves = vars.leaves();
        let label_side = mode.uses_label_similarity() && self.config.similarity == SimilaritySource::Learned;

        let mut params: Vec<&mut Matrix> = Vec::new();
        let mut grad_list = Vec::new();
        let mut decay = Vec::new();
        for ((name, p), &v) in model.blocks_mut().into_iter().zip(&leaves) {
            let is_label_block = matches!(name, "label_embeddings" | "hlr_w_q" | "hlr_w_k" | "hlr_w_v" | GATE_BLOCK);
            if is_label_block && !label_side {
                continue;
            }
            grad_list.push(grads.get_or_zeros(v, p.shape()));
            decay.push(name != GATE_BLOCK);
            params.push(p);
        }
        self.optimizer.step(&mut params, &grad_list, &decay);
        self.step_losses.push(value);
        Ok(value)
    }
}

/// Trains `config.mode` on the train split with early stopping on the dev
/// split; returns the best dev checkpoint.
pub fn train(config: &TrainingConfig, dataset: &Dataset, tree: &CodeTree) -> Result<Trained> {
    train_with(config, dataset, tree, None)
}

/// [`train`] with optional label texts for initialising label embeddings.
pub fn train_with(
    config: &TrainingConfig,
    dataset: &Dataset,
    tree: &CodeTree,
    label_texts: Option<&BTreeMap<String, String>>,
) -> Result<Trained> {
    config.validate()?;
    if config.task != dataset.task {
        return Err(Error::InvalidConfig("config task differs from dataset task".into()));
    }
    dataset.check_labels(tree)?;
    let train_idx = dataset.split(SplitName::Train).to_vec();
    let dev_idx = dataset.split(SplitName::Dev).to_vec();
    if train_idx.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if dev_idx.is_empty() {
        return Err(Error::EmptySplit("dev".into()));
    }
    let vocab = Vocabulary::build(
        train_idx.iter().map(|&i| dataset.records[i].text.as_str()),
        config.min_freq,
    );
    let prepared = Prepared::new(dataset, tree, &vocab, config.max_len)?;
    let train_counts = prepared.class_counts(&train_idx);
    let groups = metrics::frequency_groups(&train_counts);

    let mut model = match label_texts {
        Some(texts) => Model::init_from_label_texts(tree, &vocab, config, texts)?,
        None => Model::init(tree, vocab.len(), config)?,
    };
    let mut run = Run {
        config,
        tree,
        optimizer: AdamW::new(config.adamw()),
        shuffle_rng: stream(config.seed, Stream::Shuffle),
        pairing_rng: stream(config.seed, Stream::Pairing),
        mixup_rng: stream(config.seed, Stream::MixupWeights),
        step_losses: Vec::new(),
    };

    let min_batch = if config.mode.uses_contrastive() { 2 } else { 1 };
    let mut order = train_idx.clone();
    let mut best: Option<(f64, Model, MetricsReport, usize)> = None;
    let mut stale = 0;
    let mut log = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut run.shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            epoch_loss += run.step(&mut model, prepared.batch(chunk))?;
            steps += 1;
        }
        let dev = evaluate(&model, &prepared, &dev_idx, config.task, &groups)?;
        let entry = EpochLog {
            epoch,
            train_loss: epoch_loss / steps.max(1) as f64,
            dev_macro_f1: dev.macro_f1,
            dev_micro_f1: dev.micro_f1,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} dev macro {:.4} micro {:.4}",
            entry.train_loss,
            entry.dev_macro_f1,
            entry.dev_micro_f1
        );
        log.push(entry);
        let metric = config.select_metric.of(&dev);
        match &best {
            Some((b, ..)) if metric <= *b => {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
            _ => {
                best = Some((metric, model.clone(), dev, epoch));
                stale = 0;
            }
        }
    }
    let (_, model, mut dev_report, best_epoch) = best.expect("at least one epoch runs");
    dev_report.epoch_log = log;
    Ok(Trained {
        model,
        vocab,
        groups,
        train_counts,
        dev_report,
        step_losses: run.step_losses,
        best_epoch,
        epochs_run,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub tau: f64,
    pub lambda_loss: f64,
    pub lr: f64,
    pub dev_macro_f1: f64,
    pub dev_micro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best: TrainingConfig,
    pub best_index: usize,
    pub cells: Vec<GridCell>,
}

/// One training run per `(tau, lambda_loss, lr)` cell; the best cell by
/// `template.select_metric` on dev wins, earliest cell on ties.
pub fn grid_search(
    template: &TrainingConfig,
    dataset: &Dataset,
    tree: &CodeTree,
    taus: &[f64],
    lambdas: &[f64],
    lrs: &[f64],
) -> Result<GridResult> {
    if taus.is_empty() || lambdas.is_empty() || lrs.is_empty() {
        return Err(Error::InvalidConfig("grid axes must be non-empty".into()));
    }
    let mut cells = Vec::new();
    let mut best: Option<(f64, usize, TrainingConfig)> = None;
    for &tau in taus {
        for &lambda_loss in lambdas {
            for &lr in lrs {
                let config = TrainingConfig {
                    tau,
                    lambda_loss,
                    lr,
                    ..template.clone()
                };
                let trained = train(&config, dataset, tree)?;
                let metric = template.select_metric.of(&trained.dev_report);
                cells.push(GridCell {
                    tau,
                    lambda_loss,
                    lr,
                    dev_macro_f1: trained.dev_report.macro_f1,
                    dev_micro_f1: trained.dev_report.micro_f1,
                });
                if best.as_ref().is_none_or(|(b, ..)| metric > *b) {
                    best = Some((metric, cells.len() - 1, config));
                }
            }
        }
    }
    let (_, best_index, best) = best.expect("grid is non-empty");
    Ok(GridResult {
        best,
        best_index,
        cells,
    })
}

impl fmt::Display for TrainingConfig {
    /// Flat `key = value` lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

impl TrainingConfig {
    /// Every field as a `(key, value)` pair, in a stable order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        alloc::vec![
            ("task", task_name(self.task).to_string()),
            ("mode", self.mode.to_string()),
            ("grad_policy", self.grad_policy.to_string()),
            ("d", self.d.to_string()),
            ("d_enc", self.d_enc.to_string()),
            ("tau", crate::fmt::g17(self.tau)),
            ("lambda_loss", crate::fmt::g17(self.lambda_loss)),
            ("lr", crate::fmt::g17(self.lr)),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            (
                "sim_clamp",
                match self.sim_clamp {
                    ClampMode::Raw => "raw",
                    ClampMode::NonNegative => "non-negative",
                }
                .to_string()
            ),
            ("z_normalize", self.z_normalize.to_string()),
            (
                "similarity",
                match self.similarity {
                    SimilaritySource::Learned => "learned",
                    SimilaritySource::Indicator => "indicator",
                }
                .to_string()
            ),
            (
                "select_metric",
                match self.select_metric {
                    SelectMetric::Macro => "macro",
                    SelectMetric::Micro => "micro",
                }
                .to_string()
            ),
            ("weight_decay", crate::fmt::g17(self.weight_decay)),
            ("beta1", crate::fmt::g17(self.beta1)),
            ("beta2", crate::fmt::g17(self.beta2)),
            ("eps", crate::fmt::g17(self.eps)),
            ("gate_init", crate::fmt::g17(self.gate_init)),
            ("embed_std", crate::fmt::g17(self.embed_std)),
            ("label_std", crate::fmt::g17(self.label_std)),
            (
                "pooling",
                match self.pooling {
                    PoolingKind::Mean => "mean",
                    PoolingKind::SelfAttention => "attention",
                }
                .to_string()
            ),
            ("max_len", self.max_len.to_string()),
            ("min_freq", self.min_freq.to_string()),
        ]
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = || Error::InvalidConfig(alloc::format!("bad value `{value}` for `{key}`"));
        fn num<T: FromStr>(v: &str, bad: impl Fn() -> Error) -> Result<T> {
            v.parse().map_err(|_| bad())
        }
        match key.trim() {
            "task" => self.task = parse_task(value).ok_or_else(bad)?,
            "mode" => self.mode = value.parse()?,
            "grad_policy" => self.grad_policy = value.parse()?,
            "d" => self.d = num(value, bad)?,
            "d_enc" => self.d_enc = num(value, bad)?,
            "tau" => self.tau = num(value, bad)?,
            "lambda_loss" => self.lambda_loss = num(value, bad)?,
            "lr" => self.lr = num(value, bad)?,
            "batch_size" => self.batch_size = num(value, bad)?,
            "max_epochs" => self.max_epochs = num(value, bad)?,
            "patience" => self.patience = num(value, bad)?,
            "seed" => self.seed = num(value, bad)?,
            "sim_clamp" => {
                self.sim_clamp = match value {
                    "raw" => ClampMode::Raw,
                    "non-negative" => ClampMode::NonNegative,
                    _ => return Err(bad()),
                }
            }
            "z_normalize" => self.z_normalize = num(value, bad)?,
            "similarity" => {
                self.similarity = match value {
                    "learned" => SimilaritySource::Learned,
                    "indicator" => SimilaritySource::Indicator,
                    _ => return Err(bad()),
                }
            }
            "select_metric" => {
                self.select_metric = match value {
                    "macro" => SelectMetric::Macro,
                    "micro" => SelectMetric::Micro,
                    _ => return Err(bad()),
                }
            }
            "weight_decay" => self.weight_decay = num(value, bad)?,
            "beta1" => self.beta1 = num(value, bad)?,
            "beta2" => self.beta2 = num(value, bad)?,
            "eps" => self.eps = num(value, bad)?,
            "gate_init" => self.gate_init = num(value, bad)?,
            "embed_std" => self.embed_std = num(value, bad)?,
            "label_std" => self.label_std = num(value, bad)?,
            "pooling" => {
                self.pooling = match value {
                    "mean" => PoolingKind::Mean,
                    "attention" => PoolingKind::SelfAttention,
                    _ => return Err(bad()),
                }
            }
            "max_len" => self.max_len = num(value, bad)?,
            "min_freq" => self.min_freq = num(value, bad)?,
            other => return Err(Error::InvalidConfig(alloc::format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

pub fn task_name(task: Task) -> &'static str {
    match task {
        Task::MultiClass => "multi-class",
        Task::MultiLabel => "multi-label",
    }
}

pub fn parse_task(s: &str) -> Option<Task> {
    match s.trim() {
        "multi-class" => Some(Task::MultiClass),
        "multi-label" => Some(Task::MultiLabel),
        _ => None,
    }
}
