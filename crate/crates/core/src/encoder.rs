//! Hierarchical sentence encoder: token BiLSTM, additive attention pooling,
//! sentence BiLSTM. Produces one contextualized vector per sentence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::featurizer::{init_embedding_table, lookup_embeddings, HasherConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What the attention weights average: the tanh-transformed token vectors
/// or the raw token BiLSTM states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSource {
    #[default]
    Transformed,
    LstmState,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub h_tok: usize,
    pub attn_dim: usize,
    pub h_sent: usize,
    pub dropout: f64,
    pub pool_source: PoolSource,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            h_tok: 32,
            attn_dim: 32,
            h_sent: 32,
            dropout: 0.5,
            pool_source: PoolSource::Transformed,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h_tok == 0 || self.attn_dim == 0 || self.h_sent == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Width of the pooled sentence vector.
    pub fn pooled_dim(&self) -> usize {
        match self.pool_source {
            PoolSource::Transformed => self.attn_dim,
            PoolSource::LstmState => 2 * self.h_tok,
        }
    }

    /// Width of the contextualized sentence representation.
    pub fn repr_dim(&self) -> usize {
        2 * self.h_sent
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstmIds {
    pub fwd: LstmIds,
    pub bwd: LstmIds,
}

/// Parameter handles of the encoder inside a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderIds {
    pub embedding: ParamId,
    pub tok: BiLstmIds,
    pub attn_w: ParamId,
    pub attn_b: ParamId,
    pub attn_u: ParamId,
    pub sent: BiLstmIds,
}

fn gaussian<S: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| S::of(normal.sample(rng))).collect()).expect("shape")
}

/// Gaussian init with std `1/sqrt(fan_in)`, the first dimension being fan-in.
pub(crate) fn fan_in_init<S: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<S> {
    gaussian(shape, 1.0 / (shape[0] as f64).sqrt(), rng)
}

fn register_lstm<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LstmIds> {
    let w_ih = store.add(format!("{prefix}.w_ih"), fan_in_init(&[input, 4 * hidden], rng), true)?;
    let w_hh = store.add(format!("{prefix}.w_hh"), fan_in_init(&[hidden, 4 * hidden], rng), true)?;
    let mut bias = Tensor::zeros(&[4 * hidden]);
    // gate order i, f, o, g
    bias.data_mut()[hidden..2 * hidden].fill(S::one());
    let b = store.add(format!("{prefix}.b"), bias, true)?;
    Ok(LstmIds { w_ih, w_hh, b })
}

fn register_bilstm<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BiLstmIds> {
    Ok(BiLstmIds {
        fwd: register_lstm(store, &format!("{prefix}.fwd"), input, hidden, rng)?,
        bwd: register_lstm(store, &format!("{prefix}.bwd"), input, hidden, rng)?,
    })
}

impl EncoderIds {
    /// Adds freshly initialized encoder parameters to `store`.
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        hasher: &HasherConfig,
        cfg: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        hasher.validate()?;
        cfg.validate()?;
        let embedding = store.add("embedding", init_embedding_table(hasher, rng.random())?, true)?;
        let tok = register_bilstm(store, "tok_lstm", hasher.embed_dim, cfg.h_tok, rng)?;
        let attn_w = store.add("attn.w", fan_in_init(&[2 * cfg.h_tok, cfg.attn_dim], rng), true)?;
        let attn_b = store.add("attn.b", Tensor::zeros(&[cfg.attn_dim]), true)?;
        let attn_u = store.add("attn.u", fan_in_init(&[cfg.attn_dim, 1], rng), true)?;
        let sent = register_bilstm(store, "sent_lstm", cfg.pooled_dim(), cfg.h_sent, rng)?;
        Ok(Self {
            embedding,
            tok,
            attn_w,
            attn_b,
            attn_u,
            sent,
        })
    }

    pub fn bind<'t, S: Scalar>(&self, bound: &[Var<'t, S>]) -> EncoderVars<'t, S> {
        let lstm = |ids: &LstmIds| LstmVars {
            w_ih: bound[ids.w_ih],
            w_hh: bound[ids.w_hh],
            b: bound[ids.b],
        };
        let bi = |ids: &BiLstmIds| BiLstmVars {
            fwd: lstm(&ids.fwd),
            bwd: lstm(&ids.bwd),
        };
        EncoderVars {
            embedding: bound[self.embedding],
            tok: bi(&self.tok),
            attn: AttentionVars {
                w: bound[self.attn_w],
                b: bound[self.attn_b],
                u: bound[self.attn_u],
            },
            sent: bi(&self.sent),
        }
    }
}

#[derive(Clone, Copy)]
pub struct LstmVars<'t, S> {
    pub w_ih: Var<'t, S>,
    pub w_hh: Var<'t, S>,
    pub b: Var<'t, S>,
}

#[derive(Clone, Copy)]
pub struct BiLstmVars<'t, S> {
    pub fwd: LstmVars<'t, S>,
    pub bwd: LstmVars<'t, S>,
}

#[derive(Clone, Copy)]
pub struct AttentionVars<'t, S> {
    pub w: Var<'t, S>,
    pub b: Var<'t, S>,
    pub u: Var<'t, S>,
}

#[derive(Clone, Copy)]
pub struct EncoderVars<'t, S> {
    pub embedding: Var<'t, S>,
    pub tok: BiLstmVars<'t, S>,
    pub attn: AttentionVars<'t, S>,
    pub sent: BiLstmVars<'t, S>,
}

impl<'t, S: Scalar> LstmVars<'t, S> {
    fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }

    /// Hidden states for every row of `x` (`[n, input]` -> `[n, h]`), in
    /// input order even when run right to left.
    pub fn run(&self, x: Var<'t, S>, reverse: bool) -> Result<Var<'t, S>> {
        let n = x.shape()[0];
        if n == 0 {
            return Err(Error::shape("lstm", "empty input sequence"));
        }
        let h = self.hidden();
        let xw = x.matmul(self.w_ih)?.add(self.b)?;
        let mut states: Vec<Option<Var<'t, S>>> = vec![None; n];
        let mut prev: Option<(Var<'t, S>, Var<'t, S>)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..n).rev()) } else { Box::new(0..n) };
        for t in order {
            let mut gates = xw.row(t)?;
            if let Some((hp, _)) = prev {
                gates = gates.add(hp.matmul(self.w_hh)?)?;
            }
            let ifo = gates.slice_last(0, 3 * h)?.sigmoid();
            let i = ifo.slice_last(0, h)?;
            let o = ifo.slice_last(2 * h, 3 * h)?;
            let g = gates.slice_last(3 * h, 4 * h)?.tanh();
            let mut c = i.mul(g)?;
            if let Some((_, cp)) = prev {
                c = c.add(ifo.slice_last(h, 2 * h)?.mul(cp)?)?;
            }
            let hn = o.mul(c.tanh())?;
            states[t] = Some(hn);
            prev = Some((hn, c));
        }
        let states: Vec<_> = states.into_iter().map(|s| s.expect("every step visited")).collect();
        Var::stack(&states)
    }
}

impl<'t, S: Scalar> BiLstmVars<'t, S> {
    /// `[n, input]` -> `[n, 2h]`, forward states first.
    pub fn run(&self, x: Var<'t, S>) -> Result<Var<'t, S>> {
        Var::concat(&[self.fwd.run(x, false)?, self.bwd.run(x, true)?])
    }
}

/// Pooled sentence vector `[1, d]` and the attention weights `[1, n]`.
pub fn attention_pool<'t, S: Scalar>(
    inputs: Var<'t, S>,
    attn: &AttentionVars<'t, S>,
    source: PoolSource,
) -> Result<(Var<'t, S>, Var<'t, S>)> {
    let n = inputs.shape()[0];
    let u = inputs.matmul(attn.w)?.add(attn.b)?.tanh();
    let alpha = u.matmul(attn.u)?.reshape(&[1, n])?.softmax();
    let pooled = match source {
        PoolSource::Transformed => alpha.matmul(u)?,
        PoolSource::LstmState => alpha.matmul(inputs)?,
    };
    Ok((pooled, alpha))
}

pub struct Encoded<'t, S> {
    /// Contextualized sentence representations, `[m, 2 * h_sent]`.
    pub c: Var<'t, S>,
    /// Attention weights per sentence.
    pub attention: Vec<Vec<S>>,
}

/// Encodes a document given per-sentence token bucket ids. Dropout on the
/// pooled vectors is applied only when an rng is supplied.
pub fn encode_document<'t, S: Scalar>(
    vars: &EncoderVars<'t, S>,
    cfg: &EncoderConfig,
    sentences: &[Vec<usize>],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Encoded<'t, S>> {
    if sentences.is_empty() {
        return Err(Error::shape("encode_document", "document has no sentences"));
    }
    let mut pooled = Vec::with_capacity(sentences.len());
    let mut attention = Vec::with_capacity(sentences.len());
    for ids in sentences {
        let z = lookup_embeddings(vars.embedding, ids)?;
        let states = vars.tok.run(z)?;
        let (s, alpha) = attention_pool(states, &vars.attn, cfg.pool_source)?;
        pooled.push(s);
        attention.push(alpha.value().data().to_vec());
    }
    let mut s = Var::stack(&pooled)?;
    if let Some(rng) = dropout_rng {
        if cfg.dropout > 0.0 {
            let keep = 1.0 - cfg.dropout;
            let scale = S::of(1.0 / keep);
            let shape = s.shape();
            let n: usize = shape.iter().product();
            let mask = (0..n)
                .map(|_| if rng.random_bool(keep) { scale } else { S::zero() })
                .collect();
            s = s.mul(s.tape().constant(Tensor::new(shape, mask)?))?;
        }
    }
    let c = vars.sent.run(s)?;
    Ok(Encoded { c, attention })
}
