//! Trainable label prototypes and the losses that tie representations to
//! them: prototype-centric and sample-centric views for one prototype per
//! label, and the diversity and nearest-prototype sample-centric losses for
//! several prototypes per label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::contrastive::{pair_score_matrix, Orientation};
use crate::corpus::LabelId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `n_labels * per_label` prototype rows; label `k` owns rows
/// `k * per_label .. (k + 1) * per_label`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<S> {
    pub prototypes: Tensor<S>,
    pub n_labels: usize,
    pub per_label: usize,
}

impl<S: Scalar> PrototypeSet<S> {
    pub fn label_of(&self, row: usize) -> LabelId {
        row / self.per_label
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }
}

/// Seeded Gaussian prototypes with standard deviation `1/sqrt(dim)`.
pub fn init_prototypes<S: Scalar>(n_labels: usize, per_label: usize, dim: usize, seed: u64) -> Result<PrototypeSet<S>> {
    if n_labels == 0 || per_label == 0 || dim == 0 {
        return Err(Error::Config(format!(
            "prototype set needs positive sizes, got K={n_labels} M={per_label} dim={dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
    let rows = n_labels * per_label;
    let data = (0..rows * dim).map(|_| S::of(normal.sample(&mut rng))).collect();
    Ok(PrototypeSet {
        prototypes: Tensor::new(vec![rows, dim], data)?,
        n_labels,
        per_label,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtoLossConfig {
    /// Similarity threshold of the diversity hinge.
    pub theta: f64,
    pub orientation: Orientation,
    /// Attract the farthest own prototype (literal `min` over log scores)
    /// instead of the nearest one.
    pub literal_min: bool,
}

impl Default for ProtoLossConfig {
    fn default() -> Self {
        Self {
            theta: 0.3,
            orientation: Orientation::Similarity,
            literal_min: false,
        }
    }
}

impl ProtoLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta must lie in [-1, 1], got {}", self.theta)));
        }
        Ok(())
    }
}

/// Prototype rows bound on a tape.
#[derive(Clone, Copy)]
pub struct ProtoVars<'t, S> {
    pub rows: Var<'t, S>,
    pub n_labels: usize,
    pub per_label: usize,
}

impl<'t, S: Scalar> ProtoVars<'t, S> {
    fn check(&self, samples: Var<'t, S>, labels: &[LabelId]) -> Result<usize> {
        let shape = samples.shape();
        if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape(
                "prototype loss",
                format!("samples {shape:?} with {} labels", labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.n_labels) {
            return Err(Error::domain("prototype loss", format!("label {l} out of range")));
        }
        Ok(shape[0])
    }

    fn require_single(&self, op: &'static str) -> Result<()> {
        if self.per_label != 1 {
            return Err(Error::Config(format!("{op} needs one prototype per label, got {}", self.per_label)));
        }
        Ok(())
    }

    /// Prototype-centric view: every prototype whose label occurs in the batch
    /// attracts its samples and repels the rest.
    pub fn pcv_loss(&self, samples: Var<'t, S>, labels: &[LabelId], orientation: Orientation) -> Result<Var<'t, S>> {
        self.require_single("pcv_loss")?;
        let n = self.check(samples, labels)?;
        let k = self.n_labels;
        let mut present = vec![false; k];
        for &l in labels {
            present[l] = true;
        }
        let mut own = vec![S::zero(); k * n];
        let mut other = vec![S::zero(); k * n];
        for j in (0..k).filter(|&j| present[j]) {
            for (c, &l) in labels.iter().enumerate() {
                if l == j {
                    own[j * n + c] = S::one();
                } else {
                    other[j * n + c] = S::one();
                }
            }
        }
        let d = pair_score_matrix(self.rows, samples, orientation)?;
        self.combine(d, own, other, &[k, n], S::one() / S::of(n as f64))
    }

    /// Sample-centric view: each sample is drawn to its prototype and pushed
    /// from the others, weighted `1/K` and averaged over the batch.
    pub fn scv_loss(&self, samples: Var<'t, S>, labels: &[LabelId], orientation: Orientation) -> Result<Var<'t, S>> {
        self.require_single("scv_loss")?;
        let n = self.check(samples, labels)?;
        let k = self.n_labels;
        if k < 2 {
            return Err(Error::Config("scv_loss needs at least two labels".into()));
        }
        let mut own = vec![S::zero(); k * n];
        let mut other = vec![S::zero(); k * n];
        for (c, &l) in labels.iter().enumerate() {
            for j in 0..k {
                if j == l {
                    own[j * n + c] = S::one();
                } else {
                    other[j * n + c] = S::one();
                }
            }
        }
        let d = pair_score_matrix(self.rows, samples, orientation)?;
        self.combine(d, own, other, &[k, n], S::one() / S::of((k * n) as f64))
    }

    /// `-scale * Σ (own ⊙ log d + other ⊙ log(1 - d))`.
    fn combine(&self, d: Var<'t, S>, own: Vec<S>, other: Vec<S>, shape: &[usize], scale: S) -> Result<Var<'t, S>> {
        let tape = d.tape();
        let own = tape.constant(Tensor::new(shape.to_vec(), own)?);
        let other = tape.constant(Tensor::new(shape.to_vec(), other)?);
        let attract = d.log()?.mul(own)?.sum();
        let repel = d.neg().add_scalar(S::one()).log()?.mul(other)?.sum();
        Ok(attract.add(repel)?.scale(-scale))
    }

    /// Hinge on normalized same-label prototype similarities above `theta`,
    /// summed over unordered pairs. Zero when each label has one prototype.
    pub fn diversity_loss(&self, theta: f64) -> Result<Var<'t, S>> {
        let tape = self.rows.tape();
        let m = self.per_label;
        let total = self.n_labels * m;
        let mut pairs = Vec::new();
        for k in 0..self.n_labels {
            for q in k * m..(k + 1) * m {
                for r in q + 1..(k + 1) * m {
                    pairs.push(q * total + r);
                }
            }
        }
        if pairs.is_empty() {
            return Ok(tape.constant(Tensor::scalar(S::zero())));
        }
        let z = self.rows.l2_normalize()?;
        let gram = z.matmul(z.transpose()?)?;
        let sims = gram.take(&pairs, &[pairs.len()])?;
        Ok(sims.add_scalar(S::of(-theta)).relu().sum())
    }

    /// Sample-centric view with several prototypes per label: attract the
    /// nearest own prototype, repel every foreign prototype with weight
    /// `1/((K-1)M)`; averaged over the batch.
    pub fn multi_scv_loss(&self, samples: Var<'t, S>, labels: &[LabelId], cfg: &ProtoLossConfig) -> Result<Var<'t, S>> {
        let n = self.check(samples, labels)?;
        let (k, m) = (self.n_labels, self.per_label);
        if k < 2 {
            return Err(Error::Config("multi_scv_loss needs at least two labels".into()));
        }
        let total = k * m;
        // n x (K*M): sample-major scores
        let d = pair_score_matrix(samples, self.rows, cfg.orientation)?;
        let own_idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .flat_map(|(c, &l)| (l * m..(l + 1) * m).map(move |q| c * total + q))
            .collect();
        let own = d.take(&own_idx, &[n, m])?;
        let chosen = if cfg.literal_min {
            own.neg().max_last().0.neg()
        } else {
            own.max_last().0
        };
        let attract = chosen.log()?.sum().scale(-S::one() / S::of(n as f64));

        let mut other = vec![S::zero(); n * total];
        for (c, &l) in labels.iter().enumerate() {
            for q in 0..total {
                if q / m != l {
                    other[c * total + q] = S::one();
                }
            }
        }
        let other = d.tape().constant(Tensor::new(vec![n, total], other)?);
        let repel = d
            .neg()
            .add_scalar(S::one())
            .log()?
            .mul(other)?
            .sum()
            .scale(-S::one() / S::of((n * (k - 1) * m) as f64));
        attract.add(repel)
    }
}
