//! Supervised contrastive loss over contextualized sentence representations,
//! its discourse-aware variant that weights positives by in-document
//! distance, and the per-label memory bank that extends the contrast pool.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::LabelId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Direction of the sigmoid applied to cosine similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `1 / (1 + exp(cos))`: decreases with similarity.
    Verbatim,
    /// `1 / (1 + exp(-cos))`: increases with similarity.
    #[default]
    Similarity,
}

impl Orientation {
    fn sign<S: Scalar>(self) -> S {
        match self {
            Orientation::Verbatim => -S::one(),
            Orientation::Similarity => S::one(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub orientation: Orientation,
    /// Use `-log(numerator / denominator)` averaged over anchors with a positive
    /// instead of the plain ratio.
    pub log_ratio: bool,
}

fn cosine<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::shape("pair_score", format!("{} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<S>().sqrt();
    if na == S::zero() || nb == S::zero() {
        return Err(Error::domain("pair_score", "cosine undefined for a zero vector"));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x * y).sum::<S>() / (na * nb))
}

/// Sigmoid of (signed) cosine similarity; always in (0, 1).
pub fn pair_score<S: Scalar>(a: &[S], b: &[S], orientation: Orientation) -> Result<S> {
    Ok((orientation.sign::<S>() * cosine(a, b)?).sigmoid())
}

/// Pair scores between every row of `a` (`n x d`) and every row of `b` (`p x d`), `n x p`.
pub fn pair_score_matrix<'t, S: Scalar>(a: Var<'t, S>, b: Var<'t, S>, orientation: Orientation) -> Result<Var<'t, S>> {
    let cos = a.l2_normalize()?.matmul(b.l2_normalize()?.transpose()?)?;
    Ok(match orientation {
        Orientation::Similarity => cos.sigmoid(),
        Orientation::Verbatim => cos.neg().sigmoid(),
    })
}

/// Positional weight between an anchor at `i` and a partner at `j`.
///
/// Same-document pairs get `1/|i-j|`; anything else (other documents, bank
/// entries) gets `1/m` where `m` is the anchor's document length.
pub fn discourse_weight(i: usize, j: usize, same_doc: bool, anchor_doc_len: usize) -> Result<f64> {
    if same_doc {
        if i == j {
            return Err(Error::domain("discourse_weight", format!("self pair at position {i}")));
        }
        Ok(1.0 / i.abs_diff(j) as f64)
    } else {
        if anchor_doc_len == 0 {
            return Err(Error::domain("discourse_weight", "empty anchor document"));
        }
        Ok(1.0 / anchor_doc_len as f64)
    }
}

/// Per-label FIFO queues of detached representations.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<S> {
    capacity: usize,
    queues: Vec<VecDeque<Vec<S>>>,
}

impl<S: Scalar> MemoryBank<S> {
    pub fn new(n_labels: usize, capacity: usize) -> Self {
        Self {
            capacity,
            queues: vec![VecDeque::new(); n_labels],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends to the label's queue, evicting the oldest entry when full.
    pub fn enqueue(&mut self, label: LabelId, vector: Vec<S>) {
        let q = &mut self.queues[label];
        q.push_back(vector);
        while q.len() > self.capacity {
            q.pop_front();
        }
    }

    pub fn queue(&self, label: LabelId) -> &VecDeque<Vec<S>> {
        &self.queues[label]
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All stored entries, grouped by label in label order, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = (LabelId, &[S])> {
        self.queues
            .iter()
            .enumerate()
            .flat_map(|(l, q)| q.iter().map(move |v| (l, v.as_slice())))
    }
}

/// Where an in-batch representation came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SentenceRef {
    pub doc: usize,
    pub position: usize,
    pub label: LabelId,
}

/// Representations participating in one contrastive computation.
///
/// In-batch rows act as anchors and as partners; bank rows are partners only.
pub struct BatchContext<'t, S> {
    /// `N x d` in-batch representations.
    pub batch: Var<'t, S>,
    pub refs: Vec<SentenceRef>,
    /// Sentence count of each document referenced by `refs[..].doc`.
    pub doc_lengths: Vec<usize>,
    /// Detached `(label, vector)` pairs from earlier batches.
    pub bank: Vec<(LabelId, Vec<S>)>,
}

impl<'t, S: Scalar> BatchContext<'t, S> {
    pub fn new(batch: Var<'t, S>, refs: Vec<SentenceRef>, doc_lengths: Vec<usize>) -> Self {
        Self {
            batch,
            refs,
            doc_lengths,
            bank: Vec::new(),
        }
    }

    pub fn with_bank(mut self, bank: &MemoryBank<S>) -> Self {
        self.bank = bank.entries().map(|(l, v)| (l, v.to_vec())).collect();
        self
    }

    fn tape(&self) -> &'t Tape<S> {
        self.batch.tape()
    }
}

/// Supervised contrastive loss with every pair weight equal to 1.
pub fn supcon_loss<'t, S: Scalar>(ctx: &BatchContext<'t, S>, cfg: &ContrastiveConfig) -> Result<Var<'t, S>> {
    contrastive_loss(ctx, cfg, false)
}

/// Contrastive loss with positional pair weights from [`discourse_weight`].
pub fn discourse_supcon_loss<'t, S: Scalar>(ctx: &BatchContext<'t, S>, cfg: &ContrastiveConfig) -> Result<Var<'t, S>> {
    contrastive_loss(ctx, cfg, true)
}

fn contrastive_loss<'t, S: Scalar>(
    ctx: &BatchContext<'t, S>,
    cfg: &ContrastiveConfig,
    discourse: bool,
) -> Result<Var<'t, S>> {
    let tape = ctx.tape();
    let shape = ctx.batch.shape();
    if shape.len() != 2 || shape[0] != ctx.refs.len() {
        return Err(Error::shape(
            "contrastive",
            format!("batch {shape:?} with {} sentence refs", ctx.refs.len()),
        ));
    }
    let (n, dim) = (shape[0], shape[1]);
    if n < 2 {
        log::warn!("contrastive loss needs at least 2 in-batch sentences, got {n}; using 0");
        return Ok(tape.constant(Tensor::scalar(S::zero())));
    }

    let pool = if ctx.bank.is_empty() {
        ctx.batch
    } else {
        let mut rows = Vec::with_capacity(ctx.bank.len() * dim);
        for (_, v) in &ctx.bank {
            if v.len() != dim {
                return Err(Error::shape("contrastive", format!("bank vector of length {}", v.len())));
            }
            rows.extend_from_slice(v);
        }
        let bank = tape.constant(Tensor::new(vec![ctx.bank.len(), dim], rows)?);
        Var::stack(&[ctx.batch, bank])?
    };
    let p = n + ctx.bank.len();
    let pool_label = |j: usize| if j < n { ctx.refs[j].label } else { ctx.bank[j - n].0 };

    let mut num_coef = vec![S::zero(); n * p];
    let mut pos_mask = vec![S::zero(); n * p];
    let mut den_coef = vec![S::zero(); n * p];
    let mut not_self = vec![S::zero(); n * p];
    let mut has_pos = vec![false; n];
    for i in 0..n {
        let a = ctx.refs[i];
        for j in 0..p {
            if j == i {
                continue;
            }
            let same_label = pool_label(j) == a.label;
            let beta = if discourse {
                let same_doc = j < n && ctx.refs[j].doc == a.doc;
                let other_pos = if j < n { ctx.refs[j].position } else { 0 };
                let m = *ctx.doc_lengths.get(a.doc).ok_or_else(|| {
                    Error::shape("contrastive", format!("no length for document {}", a.doc))
                })?;
                S::of(discourse_weight(a.position, other_pos, same_doc, m)?)
            } else {
                S::one()
            };
            let delta = if same_label { S::one() } else { S::zero() };
            let idx = i * p + j;
            not_self[idx] = S::one();
            den_coef[idx] = S::one() - beta * delta;
            if same_label {
                num_coef[idx] = beta;
                pos_mask[idx] = S::one();
                has_pos[i] = true;
            }
        }
    }
    let mat = |v: Vec<S>| Tensor::new(vec![n, p], v).map(|t| tape.constant(t));

    let d = pair_score_matrix(ctx.batch, pool, cfg.orientation)?;
    let numer = d.mul(mat(num_coef)?)?.exp().mul(mat(pos_mask)?)?.sum_last();
    let denom = d.mul(mat(den_coef)?)?.exp().mul(mat(not_self)?)?.sum_last();
    let ratio = numer.div(denom)?;

    if cfg.log_ratio {
        let anchors: Vec<usize> = (0..n).filter(|&i| has_pos[i]).collect();
        if anchors.is_empty() {
            return Ok(tape.constant(Tensor::scalar(S::zero())));
        }
        let picked = ratio.take(&anchors, &[anchors.len()])?;
        Ok(picked.log()?.mean().neg())
    } else {
        let scale = S::one() / S::of((n * n) as f64);
        Ok(ratio.sum().scale(-scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const E: f64 = std::f64::consts::E;

    #[test]
    fn pair_score_values() {
        let (e1, e2) = ([1.0f64, 0.0], [0.0f64, 1.0]);
        for o in [Orientation::Verbatim, Orientation::Similarity] {
            assert!((pair_score(&e1, &e2, o).unwrap() - 0.5).abs() < 1e-15);
        }
        let v = pair_score(&e1, &e1, Orientation::Verbatim).unwrap();
        let s = pair_score(&e1, &e1, Orientation::Similarity).unwrap();
        assert!((v - 1.0 / (1.0 + E)).abs() < 1e-15 && (v - 0.26894).abs() < 1e-5);
        assert!((s - 0.73106).abs() < 1e-5);
        let (a, b) = ([0.3f64, -1.2, 2.0], [1.5f64, 0.2, -0.7]);
        assert_eq!(
            pair_score(&a, &b, Orientation::Similarity).unwrap(),
            pair_score(&b, &a, Orientation::Similarity).unwrap()
        );
        assert!(pair_score(&[0.0f64, 0.0], &e1, Orientation::Similarity).is_err());
    }

    #[test]
    fn discourse_weight_values() {
        assert_eq!(discourse_weight(3, 7, true, 10).unwrap(), 0.25);
        assert_eq!(discourse_weight(4, 5, true, 10).unwrap(), 1.0);
        assert_eq!(discourse_weight(0, 0, false, 10).unwrap(), 0.1);
        assert!(discourse_weight(2, 2, true, 10).is_err());
    }

    #[test]
    fn bank_is_fifo_per_label() {
        let mut bank = MemoryBank::<f64>::new(2, 2);
        bank.enqueue(0, vec![1.0]);
        assert_eq!(bank.queue(0).len(), 1);
        bank.enqueue(1, vec![9.0]);
        bank.enqueue(0, vec![2.0]);
        bank.enqueue(0, vec![3.0]);
        assert_eq!(bank.queue(0).iter().cloned().collect::<Vec<_>>(), vec![vec![2.0], vec![3.0]]);
        assert_eq!(bank.queue(1).len(), 1);
        assert_eq!(bank.len(), 3);
    }

    fn ctx<'t>(tape: &'t Tape<f64>, rows: &[Vec<f64>], refs: &[(usize, usize, usize)], lens: &[usize]) -> BatchContext<'t, f64> {
        let batch = tape.variable(Tensor::from_rows(rows).unwrap());
        let refs = refs
            .iter()
            .map(|&(doc, position, label)| SentenceRef { doc, position, label })
            .collect();
        BatchContext::new(batch, refs, lens.to_vec())
    }

    #[test]
    fn two_orthogonal_positives() {
        let tape = Tape::new();
        let c = ctx(&tape, &[vec![1.0, 0.0], vec![0.0, 1.0]], &[(0, 0, 0), (0, 1, 0)], &[2]);
        let cfg = ContrastiveConfig::default();
        let l = supcon_loss(&c, &cfg).unwrap().item().unwrap();
        assert!((l - (-0.25 * 2.0 * 0.5f64.exp())).abs() < 1e-12);
        assert!((l + 0.82436).abs() < 1e-5);
    }

    #[test]
    fn no_positive_pairs_give_zero() {
        let tape = Tape::new();
        let c = ctx(&tape, &[vec![1.0, 0.0], vec![0.0, 1.0]], &[(0, 0, 0), (0, 1, 1)], &[2]);
        assert_eq!(supcon_loss(&c, &ContrastiveConfig::default()).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn single_sentence_batch_gives_zero() {
        let tape = Tape::new();
        let c = ctx(&tape, &[vec![1.0, 0.0]], &[(0, 0, 0)], &[1]);
        assert_eq!(supcon_loss(&c, &ContrastiveConfig::default()).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn negative_bank_entry_raises_loss_toward_zero() {
        let tape = Tape::new();
        let rows = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let refs = [(0, 0, 0), (0, 1, 0)];
        let base = supcon_loss(&ctx(&tape, &rows, &refs, &[2]), &ContrastiveConfig::default())
            .unwrap()
            .item()
            .unwrap();
        let mut bank = MemoryBank::new(2, 4);
        bank.enqueue(1, vec![1.0, 1.0]);
        let c = ctx(&tape, &rows, &refs, &[2]).with_bank(&bank);
        let with_bank = supcon_loss(&c, &ContrastiveConfig::default()).unwrap().item().unwrap();
        // the bank entry is at 45 degrees from both anchors
        let d = (std::f64::consts::FRAC_1_SQRT_2).sigmoid();
        let expected = -0.25 * 2.0 * 0.5f64.exp() / (1.0 + d.exp());
        assert!((with_bank - expected).abs() < 1e-12);
        assert!(base < with_bank && with_bank < 0.0);
    }

    #[test]
    fn discourse_reduces_to_plain_when_adjacent() {
        let tape = Tape::new();
        let rows = [vec![1.0, 0.2], vec![0.3, 1.0]];
        let c = ctx(&tape, &rows, &[(0, 0, 0), (0, 1, 0)], &[2]);
        let cfg = ContrastiveConfig::default();
        assert_eq!(
            supcon_loss(&c, &cfg).unwrap().item().unwrap(),
            discourse_supcon_loss(&c, &cfg).unwrap().item().unwrap()
        );
    }

    #[test]
    fn discourse_single_positive_at_distance_two() {
        // orthogonal unit vectors: d = 0.5; beta = 1/2 for the only pair
        let tape = Tape::new();
        let c = ctx(&tape, &[vec![1.0, 0.0], vec![0.0, 1.0]], &[(0, 0, 0), (0, 2, 0)], &[3]);
        let l = discourse_supcon_loss(&c, &ContrastiveConfig::default()).unwrap().item().unwrap();
        let per_anchor = (0.5f64 * 0.5).exp() / ((1.0 - 0.5) * 0.5f64).exp();
        assert!((l - (-0.25 * 2.0 * per_anchor)).abs() < 1e-12);
    }

    #[test]
    fn bank_rows_get_no_gradient() {
        let tape = Tape::new();
        let mut bank = MemoryBank::new(2, 4);
        bank.enqueue(0, vec![0.5, 0.5]);
        bank.enqueue(1, vec![-1.0, 0.25]);
        let c = ctx(&tape, &[vec![1.0, 0.0], vec![0.0, 1.0]], &[(0, 0, 0), (0, 1, 1)], &[2]).with_bank(&bank);
        let before = tape.len();
        let loss = supcon_loss(&c, &ContrastiveConfig::default()).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(c.batch).is_some());
        // the bank tensor is the first node recorded by the loss
        let bank_leaf = tape.node(before);
        assert!(!bank_leaf.requires_grad());
        assert!(grads.wrt(bank_leaf).is_none());
    }
}
