//! Joint training of the CRF objective with the auxiliary neighborhood
//! losses, a learning-rate sweep and best-epoch model selection.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::contrastive::{discourse_supcon_loss, supcon_loss, BatchContext, ContrastiveConfig, MemoryBank, SentenceRef};
use crate::corpus::{Corpus, LabelId};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::gradcheck::GradCheckReport;
use crate::model::{BoundModel, Featurized, Model, ModelConfig};
use crate::optim::Adam;
use crate::prototypical::ProtoLossConfig;
use crate::scalar::Scalar;

/// Which auxiliary objectives are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodFlags {
    pub contrastive: bool,
    /// Positional pair weights; implies a contrastive term.
    pub discourse: bool,
    pub memory_bank: bool,
    pub single_proto: bool,
    pub multi_proto: bool,
}

impl MethodFlags {
    pub fn uses_contrastive(&self) -> bool {
        self.contrastive || self.discourse
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rates: Vec<f64>,
    pub batch_docs: usize,
    pub model: ModelConfig,
    pub methods: MethodFlags,
    pub w_cont: f64,
    pub w_pcv: f64,
    pub w_scv: f64,
    pub w_div: f64,
    /// Entries per label kept in the memory bank.
    pub bank_capacity: usize,
    /// Prototypes per label when `multi_proto` is on.
    pub prototypes_per_label: usize,
    pub contrastive: ContrastiveConfig,
    pub proto: ProtoLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 40,
            learning_rates: vec![1e-5, 3e-5, 5e-5, 1e-4, 3e-4],
            batch_docs: 2,
            model: ModelConfig::default(),
            methods: MethodFlags::default(),
            w_cont: 1.0,
            w_pcv: 1.0,
            w_scv: 1.0,
            w_div: 1.0,
            bank_capacity: 64,
            prototypes_per_label: 4,
            contrastive: ContrastiveConfig::default(),
            proto: ProtoLossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.proto.validate()?;
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&lr| !(lr > 0.0) || !lr.is_finite()) {
            return bad(format!("learning rates must be positive, got {:?}", self.learning_rates));
        }
        if self.batch_docs == 0 {
            return bad("batch_docs must be at least 1".into());
        }
        for (name, w) in [("w_cont", self.w_cont), ("w_pcv", self.w_pcv), ("w_scv", self.w_scv), ("w_div", self.w_div)] {
            if !(w >= 0.0) || !w.is_finite() {
                return bad(format!("{name} must be a non-negative number, got {w}"));
            }
        }
        let m = &self.methods;
        if m.single_proto && m.multi_proto {
            return bad("single_proto and multi_proto are mutually exclusive".into());
        }
        if m.multi_proto && self.prototypes_per_label < 2 {
            return bad(format!("multi_proto needs at least 2 prototypes per label, got {}", self.prototypes_per_label));
        }
        if m.memory_bank && !m.uses_contrastive() {
            return bad("memory_bank requires contrastive or discourse".into());
        }
        if m.memory_bank && self.bank_capacity == 0 {
            return bad("bank_capacity must be positive".into());
        }
        Ok(())
    }

    /// Model layout implied by the method flags.
    pub fn model_config(&self) -> ModelConfig {
        let per_label = if self.methods.single_proto {
            1
        } else if self.methods.multi_proto {
            self.prototypes_per_label
        } else {
            0
        };
        ModelConfig {
            prototypes_per_label: per_label,
            ..self.model
        }
    }

    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// A document ready for the model: token ids and gold labels.
#[derive(Clone, Debug)]
pub struct PreparedDoc {
    pub ids: Featurized,
    pub labels: Vec<LabelId>,
}

pub fn prepare<S: Scalar>(model: &Model<S>, corpus: &Corpus) -> Vec<PreparedDoc> {
    corpus
        .documents
        .iter()
        .map(|d| PreparedDoc {
            ids: model.featurize(d),
            labels: d.labels(),
        })
        .collect()
}

pub struct LossParts<'t, S> {
    pub total: Var<'t, S>,
    /// Mean CRF negative log-likelihood over the batch documents.
    pub nll: Var<'t, S>,
    /// Stacked representations of every batch sentence with their labels.
    pub reprs: Var<'t, S>,
    pub labels: Vec<LabelId>,
}

/// Mean CRF NLL plus every enabled auxiliary term times its weight.
pub fn total_loss<'t, S: Scalar>(
    bound: &BoundModel<'t, S>,
    cfg: &TrainConfig,
    batch: &[&PreparedDoc],
    bank: Option<&MemoryBank<S>>,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<LossParts<'t, S>> {
    if batch.is_empty() {
        return Err(Error::shape("total_loss", "empty batch"));
    }
    let mut nlls = Vec::with_capacity(batch.len());
    let mut cs = Vec::with_capacity(batch.len());
    let mut refs = Vec::new();
    for (d, doc) in batch.iter().enumerate() {
        let (c, emissions) = bound.forward(&cfg.model.encoder, &doc.ids, dropout.as_deref_mut())?;
        nlls.push(bound.crf.neg_log_likelihood(emissions, &doc.labels)?.reshape(&[1])?);
        cs.push(c);
        refs.extend(doc.labels.iter().enumerate().map(|(position, &label)| SentenceRef {
            doc: d,
            position,
            label,
        }));
    }
    let nll = Var::stack(&nlls)?.mean();
    let reprs = Var::stack(&cs)?;
    let labels: Vec<LabelId> = refs.iter().map(|r| r.label).collect();
    let mut total = nll;
    let m = &cfg.methods;
    if m.uses_contrastive() {
        let mut ctx = BatchContext::new(reprs, refs, batch.iter().map(|d| d.labels.len()).collect());
        if m.memory_bank {
            if let Some(bank) = bank {
                ctx = ctx.with_bank(bank);
            }
        }
        let l = if m.discourse {
            discourse_supcon_loss(&ctx, &cfg.contrastive)?
        } else {
            supcon_loss(&ctx, &cfg.contrastive)?
        };
        total = total.add(l.scale(S::of(cfg.w_cont)))?;
    }
    if m.single_proto || m.multi_proto {
        let protos = bound
            .prototypes
            .ok_or_else(|| Error::Config("prototype losses enabled but the model has no prototypes".into()))?;
        if m.single_proto {
            let pcv = protos.pcv_loss(reprs, &labels, cfg.proto.orientation)?;
            let scv = protos.scv_loss(reprs, &labels, cfg.proto.orientation)?;
            total = total.add(pcv.scale(S::of(cfg.w_pcv)))?;
            total = total.add(scv.scale(S::of(cfg.w_scv)))?;
        } else {
            let scv = protos.multi_scv_loss(reprs, &labels, &cfg.proto)?;
            let div = protos.diversity_loss(cfg.proto.theta)?;
            total = total.add(scv.scale(S::of(cfg.w_scv)))?;
            total = total.add(div.scale(S::of(cfg.w_div)))?;
        }
    }
    Ok(LossParts {
        total,
        nll,
        reprs,
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub learning_rate: f64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub val_micro_f1: f64,
}

pub struct TrainOutcome<S> {
    pub checkpoint: Checkpoint<S>,
    pub history: Vec<EpochRecord>,
    /// Record of the selected epoch; `None` when no epoch ran.
    pub best: Option<EpochRecord>,
}

/// Trains one model per learning rate and keeps the epoch with the highest
/// validation macro-F1 (ties go to the earlier learning rate, then epoch).
pub fn train<S: Scalar>(train: &Corpus, val: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    train.label_set.ensure_same(&val.label_set)?;
    if train.documents.is_empty() || val.documents.is_empty() {
        return Err(Error::Config("training and validation corpora must be non-empty".into()));
    }
    let model_cfg = cfg.model_config();
    let init = Model::<S>::new(model_cfg, train.label_set.clone(), cfg.seed)?;
    let digest = cfg.digest();
    let docs = prepare(&init, train);
    let mut history = Vec::new();
    let mut best: Option<(EpochRecord, Model<S>)> = None;

    for &lr in if cfg.epochs == 0 { &[][..] } else { &cfg.learning_rates[..] } {
        let mut model = init.clone();
        let mut adam = Adam::new(&model.params, lr);
        let mut bank = cfg
            .methods
            .memory_bank
            .then(|| MemoryBank::new(model.num_labels(), cfg.bank_capacity));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..docs.len()).collect();
        let mut step = 0;
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_docs) {
                step += 1;
                let batch: Vec<&PreparedDoc> = chunk.iter().map(|&i| &docs[i]).collect();
                let (loss, grads, reprs, labels) = {
                    let tape = Tape::new();
                    let bound = model.bind(&tape);
                    let parts = total_loss(&bound, cfg, &batch, bank.as_ref(), Some(&mut rng))?;
                    let loss = parts.total.item()?.as_f64();
                    if !loss.is_finite() {
                        return Err(Error::Divergence { epoch, step, loss });
                    }
                    let grads = tape.backward(parts.total)?.for_store(&model.params);
                    (loss, grads, parts.reprs.value(), parts.labels)
                };
                if let Some(g) = grads.iter().find_map(|g| g.check_finite().err()) {
                    warn!("non-finite gradient at epoch {epoch}, step {step}");
                    return Err(g);
                }
                adam.step(&mut model.params, &grads)?;
                if let Some(bank) = bank.as_mut() {
                    for (r, &l) in labels.iter().enumerate() {
                        bank.enqueue(l, reprs.row(r).to_vec());
                    }
                }
                loss_sum += loss;
                batches += 1;
            }
            let report = evaluate(&model, val, &[])?;
            let rec = EpochRecord {
                learning_rate: lr,
                epoch,
                train_loss: loss_sum / batches as f64,
                val_macro_f1: report.macro_f1,
                val_micro_f1: report.micro_f1,
            };
            info!(
                "lr {lr:e} epoch {epoch}: loss {:.4} val macro {:.4} micro {:.4}",
                rec.train_loss, rec.val_macro_f1, rec.val_micro_f1
            );
            history.push(rec);
            if best.as_ref().is_none_or(|(b, _)| rec.val_macro_f1 > b.val_macro_f1) {
                best = Some((rec, model.clone()));
            }
        }
    }

    let (best, model) = match best {
        Some((rec, model)) => (Some(rec), model),
        None => (None, init),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            train_digest: digest,
        },
        history,
        best,
    })
}

/// Method combinations covered by [`toy_gradcheck`].
pub fn gradcheck_suite() -> Vec<(&'static str, MethodFlags)> {
    let none = MethodFlags::default();
    vec![
        ("baseline", none),
        ("contrastive", MethodFlags { contrastive: true, ..none }),
        ("discourse", MethodFlags { discourse: true, ..none }),
        (
            "discourse+bank",
            MethodFlags {
                discourse: true,
                memory_bank: true,
                ..none
            },
        ),
        ("single_proto", MethodFlags { single_proto: true, ..none }),
        ("multi_proto+diversity", MethodFlags { multi_proto: true, ..none }),
    ]
}

/// Finite-difference check of [`total_loss`] on a toy model (embed 4,
/// hidden 3, attention 3, 3 labels, 2 prototypes per label) on one
/// three-sentence document, dropout included with a fixed mask.
pub fn toy_gradcheck(methods: MethodFlags, seed: u64, eps: f64) -> Result<GradCheckReport> {
    use crate::corpus::LabelSet;
    use crate::encoder::EncoderConfig;
    use crate::featurizer::HasherConfig;
    use rand_distr::{Distribution, Normal};

    let cfg = TrainConfig {
        seed,
        model: ModelConfig {
            hasher: HasherConfig {
                hash_buckets: 16,
                hash_seed: seed,
                embed_dim: 4,
                max_tokens: 128,
            },
            encoder: EncoderConfig {
                h_tok: 3,
                attn_dim: 3,
                h_sent: 3,
                ..EncoderConfig::default()
            },
            prototypes_per_label: 0,
        },
        methods,
        prototypes_per_label: 2,
        bank_capacity: 4,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let labels = LabelSet::new(["A", "B", "C"])?;
    let model = Model::<f64>::new(cfg.model_config(), labels, seed)?;
    let doc = |sents: &[&str], labels: Vec<LabelId>| PreparedDoc {
        ids: sents
            .iter()
            .map(|s| crate::featurizer::token_ids(&crate::corpus::tokenize(s), &cfg.model.hasher))
            .collect(),
        labels,
    };
    let docs = [doc(&["the facts were", "it was argued", "facts again ."], vec![0, 1, 0])];
    let batch: Vec<&PreparedDoc> = docs.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.5).expect("positive std");
    let mut bank = MemoryBank::new(3, cfg.bank_capacity);
    for l in [0, 1, 1, 2] {
        bank.enqueue(l, (0..6).map(|_| normal.sample(&mut rng)).collect());
    }
    crate::gradcheck::finite_difference_check(&model.params, eps, |_tape, vars| {
        let bound = model.bind_vars(vars);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0);
        Ok(total_loss(&bound, &cfg, &batch, Some(&bank), Some(&mut mask_rng))?.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig};
    use crate::encoder::EncoderConfig;
    use crate::featurizer::HasherConfig;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            learning_rates: vec![1e-2],
            model: ModelConfig {
                hasher: HasherConfig {
                    hash_buckets: 256,
                    embed_dim: 8,
                    ..HasherConfig::default()
                },
                encoder: EncoderConfig {
                    h_tok: 4,
                    attn_dim: 4,
                    h_sent: 4,
                    ..EncoderConfig::default()
                },
                prototypes_per_label: 0,
            },
            prototypes_per_label: 2,
            bank_capacity: 8,
            ..TrainConfig::default()
        }
    }

    fn corpus(seed: u64, n: usize) -> Corpus {
        generate_synthetic(&SynthConfig {
            seed,
            n_docs: n,
            n_labels: 3,
            mean_sentences: 4,
            mean_tokens: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn toy_gradients_match_finite_differences() {
        for (name, methods) in gradcheck_suite() {
            let r = toy_gradcheck(methods, 0, crate::gradcheck::DEFAULT_EPS).unwrap();
            assert!(r.max_rel_err <= 1e-4, "{name}: {r:?}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        assert!(c.validate().is_ok());
        c.methods.memory_bank = true;
        assert!(c.validate().is_err());
        c.methods.contrastive = true;
        assert!(c.validate().is_ok());
        c.methods.single_proto = true;
        c.methods.multi_proto = true;
        assert!(c.validate().is_err());
        c.methods.single_proto = false;
        c.prototypes_per_label = 1;
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&small_cfg()).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), small_cfg());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochz": 3}"#).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (tr, va) = (corpus(1, 4), corpus(2, 2));
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let out = train::<f64>(&tr, &va, &cfg).unwrap();
        assert!(out.history.is_empty() && out.best.is_none());
        let init = Model::<f64>::new(cfg.model_config(), tr.label_set.clone(), cfg.seed).unwrap();
        for (a, b) in out.checkpoint.model.params.iter().zip(init.params.iter()) {
            assert_eq!(a.tensor, b.tensor);
        }
    }

    #[test]
    fn training_is_deterministic_for_every_method() {
        let (tr, va) = (corpus(1, 6), corpus(2, 2));
        let flags = [
            MethodFlags::default(),
            MethodFlags {
                discourse: true,
                memory_bank: true,
                ..MethodFlags::default()
            },
            MethodFlags {
                single_proto: true,
                ..MethodFlags::default()
            },
            MethodFlags {
                multi_proto: true,
                contrastive: true,
                ..MethodFlags::default()
            },
        ];
        for methods in flags {
            let cfg = TrainConfig { methods, ..small_cfg() };
            let a = train::<f64>(&tr, &va, &cfg).unwrap();
            let b = train::<f64>(&tr, &va, &cfg).unwrap();
            assert_eq!(a.history, b.history);
            assert_eq!(a.history.len(), 2);
            assert!(a.history.iter().all(|r| r.train_loss.is_finite()));
            assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        }
    }

    #[test]
    fn auxiliary_losses_change_the_trained_weights() {
        let (tr, va) = (corpus(1, 6), corpus(2, 2));
        let base = train::<f64>(&tr, &va, &small_cfg()).unwrap().checkpoint.model;
        let id = base.params.id_of("tok_lstm.fwd.w_ih").unwrap();
        for methods in [
            MethodFlags {
                contrastive: true,
                ..MethodFlags::default()
            },
            MethodFlags {
                discourse: true,
                ..MethodFlags::default()
            },
        ] {
            let other = train::<f64>(&tr, &va, &TrainConfig { methods, ..small_cfg() }).unwrap().checkpoint.model;
            assert_ne!(base.params.get(id), other.params.get(id), "{methods:?}");
        }
    }

    #[test]
    fn zero_aux_weights_reduce_to_mean_nll() {
        let tr = corpus(3, 2);
        let cfg = TrainConfig {
            methods: MethodFlags {
                discourse: true,
                multi_proto: true,
                ..MethodFlags::default()
            },
            w_cont: 0.0,
            w_scv: 0.0,
            w_div: 0.0,
            ..small_cfg()
        };
        let model = Model::<f64>::new(cfg.model_config(), tr.label_set.clone(), 0).unwrap();
        let docs = prepare(&model, &tr);
        let batch: Vec<&PreparedDoc> = docs.iter().collect();
        let tape = Tape::new();
        let parts = total_loss(&model.bind(&tape), &cfg, &batch, None, None).unwrap();
        assert_eq!(parts.total.item().unwrap(), parts.nll.item().unwrap());
    }
}
