//! Losses and mixing: supervised contrastive loss, the similarity-weighted
//! surrogate loss, dissimilarity mixup, classification losses and their
//! weighted combination.
//!
//! Everything here works on plain matrices. The `*_grad` functions are the
//! backward passes used by the corresponding [`Tape`](crate::tape::Tape)
//! operations; [`scl_loss`] is a separate implementation kept independent of
//! [`contrastive_value`] so the two can check each other.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::label_similarity::{ClampMode, SimilarityMatrix};
use crate::math;
use crate::matrix::{dot, Matrix};
use crate::tape::{Tape, Var};

/// Samples whose similarity mass is at or below this value are skipped.
pub const SIM_MASS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    MultiClass,
    MultiLabel,
}

/// How per-sample loss terms are reduced over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl Reduction {
    fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }
}

/// Encoder outputs, targets and label sets of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub z: Matrix,
    pub targets: Matrix,
    /// Tree node indices of each sample's labels.
    pub label_sets: Vec<Vec<usize>>,
}

impl EncodedBatch {
    pub fn new(z: Matrix, targets: Matrix, label_sets: Vec<Vec<usize>>, task: Task) -> Result<Self> {
        let n = z.rows();
        if targets.rows() != n || label_sets.len() != n {
            return Err(Error::Shape(format!(
                "batch has {n} encodings, {} target rows, {} label sets",
                targets.rows(),
                label_sets.len()
            )));
        }
        for r in 0..n {
            let row = targets.row(r);
            if row.iter().any(|&t| t != 0.0 && t != 1.0) {
                return Err(Error::InvalidArgument(format!("target row {r} is not 0/1")));
            }
            let ones = row.iter().filter(|&&t| t == 1.0).count();
            match task {
                Task::MultiClass if ones != 1 => {
                    return Err(Error::InvalidArgument(format!(
                        "multi-class target row {r} has {ones} positives"
                    )))
                }
                Task::MultiLabel if ones == 0 => {
                    return Err(Error::InvalidArgument(format!(
                        "multi-label target row {r} has no positive"
                    )))
                }
                _ => {}
            }
            if label_sets[r].is_empty() {
                return Err(Error::EmptyLabelSet);
            }
        }
        Ok(Self {
            z,
            targets,
            label_sets,
        })
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    /// `sim[i][j] = 1` iff samples `i` and `j` have identical targets.
    pub fn indicator_similarity(&self) -> SimilarityMatrix {
        indicator_similarity(&self.targets)
    }
}

/// 0/1 similarity matrix of exact target-row equality.
pub fn indicator_similarity(targets: &Matrix) -> SimilarityMatrix {
    let n = targets.rows();
    let mut values = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if targets.row(i) == targets.row(j) {
                values[(i, j)] = 1.0;
            }
        }
    }
    SimilarityMatrix {
        values,
        clamp_mode: ClampMode::NonNegative,
    }
}

/// Result of mixing every sample with a partner.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub z_tilde: Matrix,
    pub y_tilde: Matrix,
    pub lambda_mix: Vec<f64>,
    pub pairing: Vec<usize>,
}

/// Supervised contrastive loss over the rows of `z`.
///
/// Positives of sample `i` are the other samples whose `labels` compare
/// equal. Samples without positives contribute zero.
pub fn scl_loss<L: PartialEq>(z: &Matrix, labels: &[L], tau: f64, reduction: Reduction) -> Result<f64> {
    let n = z.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    check_tau(tau)?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    let mut total = 0.0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let sims: Vec<f64> = (0..n).map(|a| dot(z.row(i), z.row(a)) / tau).collect();
        let shift = (0..n)
            .filter(|&a| a != i)
            .map(|a| sims[a])
            .fold(f64::NEG_INFINITY, f64::max);
        let partition: f64 = (0..n).filter(|&a| a != i).map(|a| math::exp(sims[a] - shift)).sum();
        let log_partition = shift + math::ln(partition);
        let mut term = 0.0;
        for &p in &positives {
            term += sims[p] - log_partition;
        }
        total += -term / positives.len() as f64;
    }
    Ok(total * reduction.factor(n))
}

/// Similarity-surrogate contrastive loss: every other sample is a positive
/// weighted by its similarity, normalised by the row's similarity mass.
pub fn ssl_loss(z: &Matrix, sim: &SimilarityMatrix, tau: f64, reduction: Reduction) -> Result<f64> {
    let n = z.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    check_tau(tau)?;
    if sim.values.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "similarity is {:?}, batch has {n} samples",
            sim.values.shape()
        )));
    }
    Ok(contrastive_value(z, &sim.values, tau, reduction))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature {tau} must be positive")))
    }
}

/// Row-wise `log softmax` over `a != i` of `z_i . z_a / tau`; the diagonal
/// is left at zero.
fn contrastive_log_probs(z: &Matrix, tau: f64) -> Matrix {
    let n = z.rows();
    let logits = z.matmul_t(z).scale(1.0 / tau);
    let mut lp = Matrix::zeros(n, n);
    for i in 0..n {
        let row = logits.row(i);
        let mut max = f64::NEG_INFINITY;
        for (a, &l) in row.iter().enumerate() {
            if a != i && l > max {
                max = l;
            }
        }
        let mut sum = 0.0;
        for (a, &l) in row.iter().enumerate() {
            if a != i {
                sum += math::exp(l - max);
            }
        }
        let lse = max + math::ln(sum);
        for a in 0..n {
            if a != i {
                lp[(i, a)] = row[a] - lse;
            }
        }
    }
    lp
}

/// Forward value of the weighted contrastive loss. With 0/1 weights of
/// label equality it is the supervised contrastive loss.
pub fn contrastive_value(z: &Matrix, sim: &Matrix, tau: f64, reduction: Reduction) -> f64 {
    let n = z.rows();
    let lp = contrastive_log_probs(z, tau);
    let mut total = 0.0;
    for i in 0..n {
        let (mut mass, mut weighted) = (0.0, 0.0);
        for a in 0..n {
            if a != i {
                mass += sim[(i, a)];
                weighted += sim[(i, a)] * lp[(i, a)];
            }
        }
        if mass > SIM_MASS_EPS {
            total += -weighted / mass;
        }
    }
    total * reduction.factor(n)
}

/// Gradients of [`contrastive_value`] with respect to `z` and, when
/// requested, `sim`.
pub fn contrastive_grad(
    z: &Matrix,
    sim: &Matrix,
    tau: f64,
    reduction: Reduction,
    want_sim: bool,
) -> (Matrix, Option<Matrix>) {
    let n = z.rows();
    let c = reduction.factor(n);
    let lp = contrastive_log_probs(z, tau);
    let mut g_logits = Matrix::zeros(n, n);
    let mut g_sim = want_sim.then(|| Matrix::zeros(n, n));
    for i in 0..n {
        let (mut mass, mut weighted) = (0.0, 0.0);
        for a in 0..n {
            if a != i {
                mass += sim[(i, a)];
                weighted += sim[(i, a)] * lp[(i, a)];
            }
        }
        if mass <= SIM_MASS_EPS {
            continue;
        }
        let loss_i = -weighted / mass;
        for a in 0..n {
            if a == i {
                continue;
            }
            let p = math::exp(lp[(i, a)]);
            g_logits[(i, a)] = c * (p - sim[(i, a)] / mass);
            if let Some(gs) = g_sim.as_mut() {
                gs[(i, a)] = c * (-lp[(i, a)] - loss_i) / mass;
            }
        }
    }
    // logits = z z^T / tau
    let sym = g_logits.zip_map(&g_logits.transpose(), |a, b| a + b);
    let gz = sym.matmul(z).scale(1.0 / tau);
    (gz, g_sim)
}

/// Dissimilarity mixup: `lambda_i = 0.5 (1 + sim[i][pairing[i]])`.
///
/// Pairs with identical labels (similarity 1) are left unchanged; the more
/// dissimilar the partner, the larger its share of the mix.
pub fn dml_mix(batch: &EncodedBatch, sim_raw: &SimilarityMatrix, pairing: &[usize]) -> Result<MixedBatch> {
    let n = batch.len();
    check_permutation(pairing, n)?;
    if sim_raw.values.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "similarity is {:?}, batch has {n} samples",
            sim_raw.values.shape()
        )));
    }
    let lambda_mix: Vec<f64> = pairing
        .iter()
        .enumerate()
        .map(|(i, &j)| dml_weight(sim_raw.values[(i, j)]))
        .collect();
    Ok(MixedBatch {
        z_tilde: mix_rows(&batch.z, &lambda_mix, pairing),
        y_tilde: mix_rows(&batch.targets, &lambda_mix, pairing),
        lambda_mix,
        pairing: pairing.to_vec(),
    })
}

#[inline]
pub fn dml_weight(sim: f64) -> f64 {
    0.5 * (1.0 + sim)
}

pub fn check_permutation(pairing: &[usize], n: usize) -> Result<()> {
    if pairing.len() != n {
        return Err(Error::NotAPermutation(n));
    }
    let mut seen = alloc::vec![false; n];
    for &j in pairing {
        if j >= n || seen[j] {
            return Err(Error::NotAPermutation(n));
        }
        seen[j] = true;
    }
    Ok(())
}

/// `out[i] = lambda[i] * x[i] + (1 - lambda[i]) * x[pairing[i]]`.
pub fn mix_rows(x: &Matrix, lambda: &[f64], pairing: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for (i, &j) in pairing.iter().enumerate() {
        let l = lambda[i];
        for c in 0..x.cols() {
            out[(i, c)] = l * x[(i, c)] + (1.0 - l) * x[(j, c)];
        }
    }
    out
}

/// Records dissimilarity mixup on a tape and returns `(z_tilde, y_tilde)`.
///
/// With `detach_sim` the mixing weights are constants for backpropagation,
/// so no gradient reaches the similarity matrix through this path.
pub fn dml_mix_on_tape(
    tape: &mut Tape,
    z: Var,
    targets: Var,
    sim_raw: Var,
    pairing: &[usize],
    detach_sim: bool,
) -> (Var, Var) {
    let sim = if detach_sim { tape.detach(sim_raw) } else { sim_raw };
    let entries = pairing.iter().enumerate().map(|(i, &j)| (i, j)).collect();
    let picked = tape.gather_entries(sim, entries);
    let lambda = tape.affine(picked, 0.5, 0.5);
    let z_tilde = tape.row_mix(z, lambda, pairing.to_vec());
    let y_tilde = tape.row_mix(targets, lambda, pairing.to_vec());
    (z_tilde, y_tilde)
}

/// Cross entropy for multi-class tasks, mean binary cross entropy for
/// multi-label tasks. Targets may be soft.
pub fn classification_loss(logits: &Matrix, targets: &Matrix, task: Task) -> Result<f64> {
    if logits.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    match task {
        Task::MultiClass => {
            for r in 0..targets.rows() {
                let s: f64 = targets.row(r).iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!("target row {r} sums to {s}")));
                }
            }
            Ok(softmax_ce_value(logits, targets))
        }
        Task::MultiLabel => Ok(bce_logits_value(logits, targets)),
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| math::exp(v - max)).sum();
    max + math::ln(sum)
}

pub fn softmax_ce_value(logits: &Matrix, targets: &Matrix) -> f64 {
    let n = logits.rows();
    let mut total = 0.0;
    for r in 0..n {
        let lse = log_sum_exp(logits.row(r));
        for (&l, &t) in logits.row(r).iter().zip(targets.row(r)) {
            if t != 0.0 {
                total -= t * (l - lse);
            }
        }
    }
    total / n as f64
}

pub fn softmax_ce_grad(logits: &Matrix, targets: &Matrix) -> (Matrix, Matrix) {
    let n = logits.rows();
    let inv_n = 1.0 / n as f64;
    let mut gl = Matrix::zeros(n, logits.cols());
    let mut gt = Matrix::zeros(n, logits.cols());
    for r in 0..n {
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        let mass: f64 = targets.row(r).iter().sum();
        for c in 0..row.len() {
            let log_p = row[c] - lse;
            gl[(r, c)] = inv_n * (math::exp(log_p) * mass - targets[(r, c)]);
            gt[(r, c)] = -inv_n * log_p;
        }
    }
    (gl, gt)
}

pub fn bce_logits_value(logits: &Matrix, targets: &Matrix) -> f64 {
    let mut total = 0.0;
    for (&x, &t) in logits.as_slice().iter().zip(targets.as_slice()) {
        total += math::softplus(x) - t * x;
    }
    total / logits.len() as f64
}

pub fn bce_logits_grad(logits: &Matrix, targets: &Matrix) -> (Matrix, Matrix) {
    let inv = 1.0 / logits.len() as f64;
    let gl = logits.zip_map(targets, |x, t| inv * (math::sigmoid(x) - t));
    let gt = logits.map(|x| -inv * x);
    (gl, gt)
}

/// `(1 - lambda_loss) * l_ce + lambda_loss * l_ssl`.
pub fn combined_loss(l_ce: f64, l_ssl: f64, lambda_loss: f64) -> Result<f64> {
    check_lambda_loss(lambda_loss)?;
    Ok((1.0 - lambda_loss) * l_ce + lambda_loss * l_ssl)
}

pub fn check_lambda_loss(lambda_loss: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda_loss) {
        Ok(())
    } else {
        Err(Error::LambdaOutOfRange(lambda_loss))
    }
}
