//! Desk-scale text encoder: word tokenization, token embeddings pooled into
//! one vector per text, and the tanh-affine plus linear classification head
//! that is applied to (possibly mixed) encodings.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::gaussian_matrix;
use crate::tape::{AttnKey, Tape, Var};

pub const UNK: usize = 0;
pub const PAD: usize = 1;
pub const UNK_TOKEN: &str = "<UNK>";
pub const PAD_TOKEN: &str = "<PAD>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary of every token seen at least `min_freq` times, most
    /// frequent first (ties broken lexicographically).
    pub fn build<'a, I>(texts: I, min_freq: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq && w != UNK_TOKEN && w != PAD_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = alloc::vec![UNK_TOKEN.to_string(), PAD_TOKEN.to_string()];
        tokens.extend(kept.into_iter().map(|(w, _)| w));
        Self::from_tokens(tokens).expect("built vocabulary is valid")
    }

    /// Vocabulary from an id-ordered token list whose first two entries are
    /// `<UNK>` and `<PAD>`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[UNK] != UNK_TOKEN || tokens[PAD] != PAD_TOKEN {
            return Err(Error::InvalidArgument(
                "vocabulary must start with <UNK> and <PAD>".into(),
            ));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(alloc::format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }
}

/// Lowercased runs of alphanumeric characters.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Token ids of `text`, truncated to `max_len`. Empty text yields `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = split_words(text)
        .iter()
        .take(max_len.max(1))
        .map(|w| vocab.id(w))
        .collect();
    if ids.is_empty() {
        ids.push(UNK);
    }
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolingKind {
    #[default]
    Mean,
    SelfAttention,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Pooling {
    /// Mean of the token embeddings.
    Mean,
    /// One single-head scaled dot-product self-attention layer over the
    /// tokens of each text, then the mean.
    SelfAttention { w_q: Matrix, w_k: Matrix, w_v: Matrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `V x d_enc`.
    pub token_embeddings: Matrix,
    pub pooling: Pooling,
    /// `d_enc x d_enc`, applied as `z W1^T + b1`.
    pub head_w1: Matrix,
    pub head_b1: Matrix,
    /// `C x d_enc`, applied as `t W2^T + b2`.
    pub head_w2: Matrix,
    pub head_b2: Matrix,
}

impl EncoderParams {
    pub fn init<R: rand::Rng + ?Sized>(
        rng: &mut R,
        vocab_size: usize,
        d_enc: usize,
        num_classes: usize,
        pooling: PoolingKind,
        embed_std: f64,
    ) -> Self {
        let head_std = 1.0 / crate::math::sqrt(d_enc as f64);
        let token_embeddings = gaussian_matrix(rng, vocab_size, d_enc, embed_std);
        let pooling = match pooling {
            PoolingKind::Mean => Pooling::Mean,
            PoolingKind::SelfAttention => Pooling::SelfAttention {
                w_q: gaussian_matrix(rng, d_enc, d_enc, head_std),
                w_k: gaussian_matrix(rng, d_enc, d_enc, head_std),
                w_v: gaussian_matrix(rng, d_enc, d_enc, head_std),
            },
        };
        Self {
            token_embeddings,
            pooling,
            head_w1: gaussian_matrix(rng, d_enc, d_enc, head_std),
            head_b1: Matrix::zeros(1, d_enc),
            head_w2: gaussian_matrix(rng, num_classes, d_enc, head_std),
            head_b2: Matrix::zeros(1, num_classes),
        }
    }

    pub fn d_enc(&self) -> usize {
        self.token_embeddings.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.head_w2.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_enc();
        let square = |m: &Matrix| m.shape() == (d, d);
        let ok = square(&self.head_w1)
            && self.head_b1.shape() == (1, d)
            && self.head_w2.cols() == d
            && self.head_b2.shape() == (1, self.head_w2.rows())
            && match &self.pooling {
                Pooling::Mean => true,
                Pooling::SelfAttention { w_q, w_k, w_v } => square(w_q) && square(w_k) && square(w_v),
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("encoder parameter shapes disagree".into()))
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let token_embeddings = leaf(&self.token_embeddings);
        let attention = match &self.pooling {
            Pooling::Mean => None,
            Pooling::SelfAttention { w_q, w_k, w_v } => Some([leaf(w_q), leaf(w_k), leaf(w_v)]),
        };
        EncoderVars {
            token_embeddings,
            attention,
            head_w1: leaf(&self.head_w1),
            head_b1: leaf(&self.head_b1),
            head_w2: leaf(&self.head_w2),
            head_b2: leaf(&self.head_b2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub token_embeddings: Var,
    pub attention: Option<[Var; 3]>,
    pub head_w1: Var,
    pub head_b1: Var,
    pub head_w2: Var,
    pub head_b2: Var,
}

fn strip_pad(sequences: &[Vec<usize>], vocab_size: usize) -> Result<Vec<Vec<usize>>> {
    if sequences.is_empty() {
        return Err(Error::InvalidArgument("no sequences to encode".into()));
    }
    sequences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let kept: Vec<usize> = s.iter().copied().filter(|&t| t != PAD).collect();
            if kept.is_empty() {
                return Err(Error::EmptySequence(i));
            }
            if let Some(&bad) = kept.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::Shape(alloc::format!(
                    "token id {bad} outside vocabulary of {vocab_size}"
                )));
            }
            Ok(kept)
        })
        .collect()
}

/// Records the encoder on a tape; returns the `N x d_enc` pooled encodings.
pub fn encode_on_tape(tape: &mut Tape, vars: &EncoderVars, sequences: &[Vec<usize>]) -> Result<Var> {
    let vocab_size = tape.value(vars.token_embeddings).rows();
    let seqs = strip_pad(sequences, vocab_size)?;
    match vars.attention {
        None => Ok(tape.row_mean(vars.token_embeddings, seqs)),
        Some([w_q, w_k, w_v]) => {
            let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
            let x = tape.select_rows(vars.token_embeddings, &flat);
            let q = tape.matmul_t(x, w_q);
            let k = tape.matmul_t(x, w_k);
            let v = tape.matmul_t(x, w_v);
            let mut keys = Vec::with_capacity(flat.len());
            let mut groups = Vec::with_capacity(seqs.len());
            let mut offset = 0;
            for s in &seqs {
                let span: Vec<usize> = (offset..offset + s.len()).collect();
                for _ in 0..s.len() {
                    keys.push(span.iter().map(|&r| AttnKey::plain(r)).collect());
                }
                groups.push(span);
                offset += s.len();
            }
            let d = tape.value(w_q).rows() as f64;
            let att = tape.attention(q, k, v, None, keys, 1.0 / crate::math::sqrt(d));
            Ok(tape.row_mean(att, groups))
        }
    }
}

/// Records the classification head on a tape: `W2 tanh(W1 z + b1) + b2`.
pub fn classify_on_tape(tape: &mut Tape, vars: &EncoderVars, z: Var) -> Var {
    let a = tape.matmul_t(z, vars.head_w1);
    let a = tape.add_row(a, vars.head_b1);
    let t = tape.tanh(a);
    let logits = tape.matmul_t(t, vars.head_w2);
    tape.add_row(logits, vars.head_b2)
}

/// Pooled encodings of `sequences`. PAD ids are ignored.
pub fn encode(sequences: &[Vec<usize>], params: &EncoderParams) -> Result<Matrix> {
    params.validate()?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let z = encode_on_tape(&mut tape, &vars, sequences)?;
    Ok(tape.value(z).clone())
}

/// Logits of the classification head for (mixed) encodings.
pub fn classify(z_tilde: &Matrix, params: &EncoderParams) -> Result<Matrix> {
    params.validate()?;
    if z_tilde.cols() != params.d_enc() {
        return Err(Error::Shape(alloc::format!(
            "encodings have width {}, head expects {}",
            z_tilde.cols(),
            params.d_enc()
        )));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let z = tape.constant(z_tilde.clone());
    let logits = classify_on_tape(&mut tape, &vars, z);
    Ok(tape.value(logits).clone())
}
