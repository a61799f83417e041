//! Linear-chain CRF: partition function, negative log-likelihood, Viterbi
//! decoding and forward-backward posterior marginals.
//!
//! A label sequence `y` over `m` positions scores
//! `start[y0] + Σ emit[t, yt] + Σ trans[y(t-1), yt] + end[y(m-1)]`.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::{argmax, log_sum_exp, Scalar};
use crate::tensor::Tensor;

/// Transition (`from x to`), start and end scores.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfWeights<S> {
    pub transitions: Tensor<S>,
    pub start: Tensor<S>,
    pub end: Tensor<S>,
}

impl<S: Scalar> CrfWeights<S> {
    pub fn zeros(k: usize) -> Self {
        Self {
            transitions: Tensor::zeros(&[k, k]),
            start: Tensor::zeros(&[k]),
            end: Tensor::zeros(&[k]),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.start.numel()
    }

    fn trans(&self, from: usize, to: usize) -> S {
        self.transitions.data()[from * self.num_labels() + to]
    }

    fn check(&self, emissions: &Tensor<S>) -> Result<(usize, usize)> {
        let k = self.num_labels();
        if self.transitions.shape() != [k, k] || self.end.numel() != k {
            return Err(Error::shape("crf", "inconsistent transition/start/end sizes"));
        }
        if emissions.ndim() != 2 || emissions.cols() != k {
            return Err(Error::shape(
                "crf",
                format!("emissions {:?} do not match {k} labels", emissions.shape()),
            ));
        }
        if emissions.rows() == 0 {
            return Err(Error::shape("crf", "empty sequence"));
        }
        Ok((emissions.rows(), k))
    }
}

fn check_gold(gold: &[usize], m: usize, k: usize) -> Result<()> {
    if gold.len() != m {
        return Err(Error::shape("crf", format!("{} gold labels for {m} positions", gold.len())));
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= k) {
        return Err(Error::domain("crf", format!("gold label {g} out of range for {k} labels")));
    }
    Ok(())
}

/// Unnormalized log-score of one label sequence.
pub fn sequence_score<S: Scalar>(emissions: &Tensor<S>, w: &CrfWeights<S>, labels: &[usize]) -> Result<S> {
    let (m, k) = w.check(emissions)?;
    check_gold(labels, m, k)?;
    let mut s = w.start.data()[labels[0]] + w.end.data()[labels[m - 1]];
    for (t, &y) in labels.iter().enumerate() {
        s += emissions.get2(t, y);
        if t > 0 {
            s += w.trans(labels[t - 1], y);
        }
    }
    Ok(s)
}

/// Log-space forward messages, `m x k`.
fn forward<S: Scalar>(emissions: &Tensor<S>, w: &CrfWeights<S>, m: usize, k: usize) -> Vec<Vec<S>> {
    let mut alpha = Vec::with_capacity(m);
    alpha.push((0..k).map(|j| w.start.data()[j] + emissions.get2(0, j)).collect::<Vec<S>>());
    let mut buf = vec![S::zero(); k];
    for t in 1..m {
        let prev: &Vec<S> = &alpha[t - 1];
        let row = (0..k)
            .map(|to| {
                for (from, b) in buf.iter_mut().enumerate() {
                    *b = prev[from] + w.trans(from, to);
                }
                log_sum_exp(&buf) + emissions.get2(t, to)
            })
            .collect();
        alpha.push(row);
    }
    alpha
}

/// Log-space backward messages, `m x k` (last row is the end scores).
fn backward<S: Scalar>(emissions: &Tensor<S>, w: &CrfWeights<S>, m: usize, k: usize) -> Vec<Vec<S>> {
    let mut beta = vec![vec![S::zero(); k]; m];
    beta[m - 1] = w.end.data().to_vec();
    let mut buf = vec![S::zero(); k];
    for t in (0..m - 1).rev() {
        for from in 0..k {
            for (to, b) in buf.iter_mut().enumerate() {
                *b = w.trans(from, to) + emissions.get2(t + 1, to) + beta[t + 1][to];
            }
            beta[t][from] = log_sum_exp(&buf);
        }
    }
    beta
}

pub fn log_partition<S: Scalar>(emissions: &Tensor<S>, w: &CrfWeights<S>) -> Result<S> {
    let (m, k) = w.check(emissions)?;
    let alpha = forward(emissions, w, m, k);
    let last: Vec<S> = (0..k).map(|j| alpha[m - 1][j] + w.end.data()[j]).collect();
    Ok(log_sum_exp(&last))
}

/// Negative log-likelihood of `gold`.
pub fn neg_log_likelihood<S: Scalar>(emissions: &Tensor<S>, w: &CrfWeights<S>, gold: &[usize]) -> Result<S> {
    Ok(log_partition(emissions, w)? - sequence_score(emissions, w, gold)?)
}

/// Highest-scoring label sequence. Ties resolve to the lowest label id at
/// each backtracking step.
pub fn viterbi<S: Scalar>(emissions: &Tensor<S>, w: &CrfWeights<S>) -> Result<Vec<usize>> {
    let (m, k) = w.check(emissions)?;
    let mut score: Vec<S> = (0..k).map(|j| w.start.data()[j] + emissions.get2(0, j)).collect();
    let mut back = vec![vec![0usize; k]; m];
    let mut cand = vec![S::zero(); k];
    for t in 1..m {
        let mut next = vec![S::zero(); k];
        for to in 0..k {
            for (from, c) in cand.iter_mut().enumerate() {
                *c = score[from] + w.trans(from, to);
            }
            let best = argmax(&cand);
            back[t][to] = best;
            next[to] = cand[best] + emissions.get2(t, to);
        }
        score = next;
    }
    for (j, s) in score.iter_mut().enumerate() {
        *s += w.end.data()[j];
    }
    let mut path = vec![argmax(&score); m];
    for t in (1..m).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok(path)
}

/// Posterior `P(y_t = j | x)` for every position, `m x k`.
pub fn marginals<S: Scalar>(emissions: &Tensor<S>, w: &CrfWeights<S>) -> Result<Tensor<S>> {
    let (m, k) = w.check(emissions)?;
    let alpha = forward(emissions, w, m, k);
    let beta = backward(emissions, w, m, k);
    let last: Vec<S> = (0..k).map(|j| alpha[m - 1][j] + w.end.data()[j]).collect();
    let log_z = log_sum_exp(&last);
    let mut out = Vec::with_capacity(m * k);
    for t in 0..m {
        let row: Vec<S> = (0..k).map(|j| (alpha[t][j] + beta[t][j] - log_z).exp()).collect();
        // renormalize away rounding drift
        let z: S = row.iter().copied().sum();
        out.extend(row.into_iter().map(|p| p / z));
    }
    Tensor::new(vec![m, k], out)
}

/// CRF weights bound on a tape.
#[derive(Clone, Copy)]
pub struct CrfVars<'t, S> {
    pub transitions: Var<'t, S>,
    pub start: Var<'t, S>,
    pub end: Var<'t, S>,
}

impl<'t, S: Scalar> CrfVars<'t, S> {
    /// Differentiable log-partition via the forward recursion.
    pub fn log_partition(&self, emissions: Var<'t, S>) -> Result<Var<'t, S>> {
        let shape = emissions.shape();
        let k = self.start.value().numel();
        if shape.len() != 2 || shape[1] != k || shape[0] == 0 {
            return Err(Error::shape("crf", format!("emissions {shape:?} for {k} labels")));
        }
        let m = shape[0];
        // trans_t[to, from] so that adding alpha (indexed by `from`) broadcasts on the last axis
        let trans_t = self.transitions.transpose()?;
        let mut alpha = self.start.add(emissions.row(0)?.reshape(&[k])?)?;
        for t in 1..m {
            let scores = trans_t.add(alpha)?.log_sum_exp();
            alpha = scores.add(emissions.row(t)?.reshape(&[k])?)?;
        }
        Ok(alpha.add(self.end)?.log_sum_exp())
    }

    pub fn sequence_score(&self, emissions: Var<'t, S>, gold: &[usize]) -> Result<Var<'t, S>> {
        let shape = emissions.shape();
        let k = self.start.value().numel();
        check_gold(gold, shape[0], k)?;
        let m = gold.len();
        let emit_idx: Vec<usize> = gold.iter().enumerate().map(|(t, &y)| t * k + y).collect();
        let mut total = emissions.take(&emit_idx, &[m])?.sum();
        if m > 1 {
            let trans_idx: Vec<usize> = gold.windows(2).map(|p| p[0] * k + p[1]).collect();
            total = total.add(self.transitions.take(&trans_idx, &[m - 1])?.sum())?;
        }
        let s = self.start.take(&[gold[0]], &[])?;
        let e = self.end.take(&[gold[m - 1]], &[])?;
        total.add(s)?.add(e)
    }

    /// `log Z - score(gold)`.
    pub fn neg_log_likelihood(&self, emissions: Var<'t, S>, gold: &[usize]) -> Result<Var<'t, S>> {
        let score = self.sequence_score(emissions, gold)?;
        self.log_partition(emissions)?.sub(score)
    }
}
