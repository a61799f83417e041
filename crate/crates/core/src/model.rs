//! The full tagger: encoder, emission projection, CRF and optional trainable
//! prototypes, all held in one [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::corpus::{Corpus, Document, LabelId, LabelSet};
use crate::crf::{self, CrfVars, CrfWeights};
use crate::datastore::{self, BaselineDist, Datastore, StoreKind};
use crate::encoder::{encode_document, fan_in_init, EncoderConfig, EncoderIds, EncoderVars};
use crate::error::{Error, Result};
use crate::featurizer::{token_ids, HasherConfig};
use crate::prototypical::{init_prototypes, ProtoVars};
use crate::scalar::{argmax, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hasher: HasherConfig,
    pub encoder: EncoderConfig,
    /// Trainable prototypes per label; 0 disables them.
    pub prototypes_per_label: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.hasher.validate()?;
        self.encoder.validate()
    }
}

/// Token bucket ids of each sentence.
pub type Featurized = Vec<Vec<usize>>;

#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub label_set: LabelSet,
    pub params: ParamStore<S>,
    pub encoder: EncoderIds,
    pub proj: ParamId,
    pub crf: [ParamId; 3],
    pub prototypes: Option<ParamId>,
}

/// A model's parameters bound on one tape.
pub struct BoundModel<'t, S> {
    pub encoder: EncoderVars<'t, S>,
    pub proj: Var<'t, S>,
    pub crf: CrfVars<'t, S>,
    pub prototypes: Option<ProtoVars<'t, S>>,
}

/// Eval-mode outputs for one document.
#[derive(Clone, Debug, PartialEq)]
pub struct DocOutput<S> {
    /// Contextualized sentence representations.
    pub reprs: Tensor<S>,
    pub emissions: Tensor<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, label_set: LabelSet, seed: u64) -> Result<Self> {
        config.validate()?;
        if label_set.len() < 2 {
            return Err(Error::Config("a model needs at least two labels".into()));
        }
        let k = label_set.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = EncoderIds::register(&mut params, &config.hasher, &config.encoder, &mut rng)?;
        let proj = params.add("proj", fan_in_init(&[config.encoder.repr_dim(), k], &mut rng), true)?;
        let crf = [
            params.add("crf.transitions", Tensor::zeros(&[k, k]), true)?,
            params.add("crf.start", Tensor::zeros(&[k]), true)?,
            params.add("crf.end", Tensor::zeros(&[k]), true)?,
        ];
        let prototypes = if config.prototypes_per_label > 0 {
            let set = init_prototypes(k, config.prototypes_per_label, config.encoder.repr_dim(), seed ^ 0x5eed)?;
            Some(params.add("prototypes", set.prototypes, true)?)
        } else {
            None
        };
        Ok(Self {
            config,
            label_set,
            params,
            encoder,
            proj,
            crf,
            prototypes,
        })
    }

    /// Replaces every parameter with the named tensors in `tensors`; the
    /// names and shapes must match this model's layout exactly.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor<S>)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = self
                .params
                .id_of(&name)
                .ok_or_else(|| Error::Config(format!("unknown tensor name {name:?}")))?;
            if self.params.get(id).shape() != t.shape() {
                return Err(Error::shape(
                    "load_tensors",
                    format!("{name}: {:?} vs {:?}", t.shape(), self.params.get(id).shape()),
                ));
            }
            *self.params.get_mut(id) = t;
        }
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.label_set.len()
    }

    pub fn featurize(&self, doc: &Document) -> Featurized {
        doc.sentences
            .iter()
            .map(|s| token_ids(&s.tokens, &self.config.hasher))
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> BoundModel<'t, S> {
        self.bind_vars(&self.params.bind(tape))
    }

    /// Builds the bound view from per-parameter vars indexed like the store.
    pub fn bind_vars<'t>(&self, bound: &[Var<'t, S>]) -> BoundModel<'t, S> {
        BoundModel {
            encoder: self.encoder.bind(bound),
            proj: bound[self.proj],
            crf: CrfVars {
                transitions: bound[self.crf[0]],
                start: bound[self.crf[1]],
                end: bound[self.crf[2]],
            },
            prototypes: self.prototypes.map(|id| ProtoVars {
                rows: bound[id],
                n_labels: self.num_labels(),
                per_label: self.config.prototypes_per_label,
            }),
        }
    }

    pub fn crf_weights(&self) -> CrfWeights<S> {
        CrfWeights {
            transitions: self.params.get(self.crf[0]).clone(),
            start: self.params.get(self.crf[1]).clone(),
            end: self.params.get(self.crf[2]).clone(),
        }
    }

    /// Eval-mode forward pass (no dropout).
    pub fn infer(&self, doc: &Featurized) -> Result<DocOutput<S>> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let (c, e) = bound.forward(&self.config.encoder, doc, None)?;
        Ok(DocOutput {
            reprs: (*c.value()).clone(),
            emissions: (*e.value()).clone(),
        })
    }

    pub fn viterbi(&self, out: &DocOutput<S>) -> Result<Vec<LabelId>> {
        crf::viterbi(&out.emissions, &self.crf_weights())
    }

    /// Per-sentence model label distribution used for interpolation.
    pub fn baseline_distribution(&self, out: &DocOutput<S>, kind: BaselineDist) -> Result<Tensor<S>> {
        match kind {
            BaselineDist::CrfMarginals => crf::marginals(&out.emissions, &self.crf_weights()),
            BaselineDist::EmissionSoftmax => Ok(softmax_rows(&out.emissions)),
        }
    }

    /// kNN datastore with one eval-mode entry per sentence of `corpus`. Keys
    /// are rounded to `f32`, the precision of the store file.
    pub fn build_datastore(&self, corpus: &Corpus, tau: f64) -> Result<Datastore<S>> {
        self.label_set.ensure_same(&corpus.label_set)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for doc in &corpus.documents {
            let out = self.infer(&self.featurize(doc))?;
            rows.extend(out.reprs.data().iter().map(|v| S::of(v.as_f64() as f32 as f64)));
            labels.extend(doc.labels());
        }
        let dim = self.config.encoder.repr_dim();
        let vectors = Tensor::new(vec![labels.len(), dim], rows)?;
        Ok(Datastore::new(StoreKind::Knn, tau, self.label_set.clone(), vectors, labels)?.with_meta(corpus.name.clone(), ""))
    }

    /// Interpolated decoding of one document against a datastore.
    pub fn decode_interpolated(
        &self,
        doc: &Featurized,
        store: &Datastore<S>,
        lambda: f64,
        k: usize,
        baseline: BaselineDist,
    ) -> Result<Vec<LabelId>> {
        self.label_set.ensure_same(&store.label_set)?;
        let out = self.infer(doc)?;
        let p_base = self.baseline_distribution(&out, baseline)?;
        let p_nn = datastore::neighborhood_distributions(store, &out.reprs, k)?;
        datastore::decode_interpolated(&p_base, &p_nn, lambda)
    }
}

pub fn softmax_rows<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let mut out = Vec::with_capacity(t.numel());
    for r in 0..t.outer() {
        let row = t.row(r);
        let m = row[argmax(row)];
        let e: Vec<S> = row.iter().map(|&x| (x - m).exp()).collect();
        let z: S = e.iter().copied().sum();
        out.extend(e.into_iter().map(|x| x / z));
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

impl<'t, S: Scalar> BoundModel<'t, S> {
    /// Contextualized representations and emission scores.
    pub fn forward(
        &self,
        cfg: &EncoderConfig,
        doc: &Featurized,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let c = encode_document(&self.encoder, cfg, doc, dropout_rng)?.c;
        let emissions = c.matmul(self.proj)?;
        Ok((c, emissions))
    }
}
