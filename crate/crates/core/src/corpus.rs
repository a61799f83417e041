//! Labeled documents: JSONL ingestion, document-level splits, label
//! statistics and a seeded synthetic corpus generator.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type LabelId = usize;

/// Ordered set of label names; a label's id is its position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, LabelId>,
}

impl LabelSet {
    pub fn new<I, T>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() {
                return Err(Error::Config("empty label name".into()));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels, index })
    }

    /// One label per line; blank lines are ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.labels.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<LabelId> {
        self.index.get(label).copied()
    }

    pub fn name(&self, id: LabelId) -> &str {
        &self.labels[id]
    }

    pub fn names(&self) -> &[String] {
        &self.labels
    }

    /// Errors unless `other` has the same labels in the same order.
    pub fn ensure_same(&self, other: &LabelSet) -> Result<()> {
        if self.labels == other.labels {
            Ok(())
        } else {
            Err(Error::LabelSetMismatch {
                expected: self.labels.join(", "),
                found: other.labels.join(", "),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub text: String,
    pub tokens: Vec<String>,
    pub label: LabelId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Sentence>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn labels(&self) -> Vec<LabelId> {
        self.sentences.iter().map(|s| s.label).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub label_set: LabelSet,
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn num_sentences(&self) -> usize {
        self.documents.iter().map(Document::len).sum()
    }

    fn with_documents(&self, name: String, documents: Vec<Document>) -> Corpus {
        Corpus {
            name,
            label_set: self.label_set.clone(),
            documents,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DocRecord {
    doc_id: String,
    sentences: Vec<SentenceRecord>,
}

#[derive(Serialize, Deserialize)]
struct SentenceRecord {
    text: String,
    label: String,
}

/// Lowercase, split on whitespace, then peel leading and trailing
/// punctuation characters off each word as tokens of their own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let chars: Vec<char> = word.chars().collect();
        let lead = chars.iter().take_while(|c| c.is_ascii_punctuation()).count();
        if lead == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| c.is_ascii_punctuation()).count();
        out.extend(chars[..lead].iter().map(|c| c.to_string()));
        out.push(chars[lead..chars.len() - trail].iter().collect());
        out.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    out
}

pub fn load_corpus(path: impl AsRef<Path>, label_set: &LabelSet) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    read_corpus(BufReader::new(file), &name, &path.display().to_string(), label_set)
}

/// Parses JSONL from any reader. `origin` is used in error messages.
pub fn read_corpus(reader: impl BufRead, name: &str, origin: &str, label_set: &LabelSet) -> Result<Corpus> {
    let mut documents = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if rec.sentences.is_empty() {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: lineno,
                msg: format!("document {:?} has no sentences", rec.doc_id),
            });
        }
        let mut sentences = Vec::with_capacity(rec.sentences.len());
        for s in rec.sentences {
            let label = label_set.id(&s.label).ok_or_else(|| Error::UnknownLabel {
                label: s.label.clone(),
                line: lineno,
            })?;
            let tokens = tokenize(&s.text);
            if tokens.is_empty() {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: lineno,
                    msg: format!("empty sentence in document {:?}", rec.doc_id),
                });
            }
            sentences.push(Sentence {
                text: s.text,
                tokens,
                label,
            });
        }
        documents.push(Document {
            doc_id: rec.doc_id,
            sentences,
        });
    }
    if documents.is_empty() {
        log::warn!("{origin}: corpus contains no documents");
    }
    Ok(Corpus {
        name: name.to_string(),
        label_set: label_set.clone(),
        documents,
    })
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for doc in &corpus.documents {
        let rec = DocRecord {
            doc_id: doc.doc_id.clone(),
            sentences: doc
                .sentences
                .iter()
                .map(|s| SentenceRecord {
                    text: s.text.clone(),
                    label: corpus.label_set.name(s.label).to_string(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Seeded document-level shuffle and split into (train, val, test).
pub fn split_corpus(corpus: &Corpus, fractions: (f64, f64, f64), seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    let (ft, fv, fe) = fractions;
    if [ft, fv, fe].iter().any(|&f| !(0.0..=1.0).contains(&f)) || ((ft + fv + fe) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got ({ft}, {fv}, {fe})"
        )));
    }
    let n = corpus.documents.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_train = ((ft * n as f64).round() as usize).min(n);
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    for (name, f, count) in [("train", ft, n_train), ("val", fv, n_val), ("test", fe, n_test)] {
        if n > 0 && f > 0.0 && count == 0 {
            return Err(Error::Config(format!(
                "{name} split would be empty ({n} documents, fraction {f})"
            )));
        }
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus.documents[i].clone()).collect::<Vec<_>>();
    let base = &corpus.name;
    Ok((
        corpus.with_documents(format!("{base}.train"), pick(&order[..n_train])),
        corpus.with_documents(format!("{base}.val"), pick(&order[n_train..n_train + n_val])),
        corpus.with_documents(format!("{base}.test"), pick(&order[n_train + n_val..])),
    ))
}

/// Sentence-level label frequencies, indexed by label id.
pub fn label_distribution(corpus: &Corpus) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; corpus.label_set.len()];
    for s in corpus.documents.iter().flat_map(|d| &d.sentences) {
        counts[s.label] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Config(format!("corpus {:?} has no sentences", corpus.name)));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_docs: usize,
    pub n_labels: usize,
    /// Exponent of the Zipf prior over labels; 0 gives a uniform prior.
    pub zipf_exponent: f64,
    pub mean_sentences: usize,
    pub mean_tokens: usize,
    pub vocab_per_label: usize,
    pub shared_vocab: usize,
    /// Probability of repeating the previous sentence's label.
    pub transition_stickiness: f64,
    /// Share of tokens drawn from the label's private pool.
    #[serde(default = "default_private_fraction")]
    pub private_fraction: f64,
    /// Offset of the shared pool's token ids; distinct offsets give disjoint shared pools.
    #[serde(default)]
    pub shared_offset: usize,
}

fn default_private_fraction() -> f64 {
    0.7
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_docs: 100,
            n_labels: 6,
            zipf_exponent: 1.0,
            mean_sentences: 20,
            mean_tokens: 8,
            vocab_per_label: 30,
            shared_vocab: 100,
            transition_stickiness: 0.7,
            private_fraction: default_private_fraction(),
            shared_offset: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic config: {m}")));
        if self.n_labels < 2 {
            return bad("n_labels must be at least 2");
        }
        if self.mean_sentences < 2 {
            return bad("mean_sentences must be at least 2");
        }
        if !(self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.transition_stickiness) {
            return bad("transition_stickiness must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.private_fraction) {
            return bad("private_fraction must lie in [0, 1]");
        }
        if self.mean_tokens < 1 {
            return bad("mean_tokens must be at least 1");
        }
        if self.vocab_per_label == 0 && self.private_fraction > 0.0 {
            return bad("vocab_per_label must be positive when private_fraction > 0");
        }
        if self.shared_vocab == 0 && self.private_fraction < 1.0 {
            return bad("shared_vocab must be positive when private_fraction < 1");
        }
        Ok(())
    }

    /// Normalized Zipf prior `1/r^s`, rank 1 = label 0.
    pub fn label_prior(&self) -> Vec<f64> {
        let w: Vec<f64> = (1..=self.n_labels)
            .map(|r| (r as f64).powf(-self.zipf_exponent))
            .collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    pub fn label_set(&self) -> LabelSet {
        LabelSet::new((0..self.n_labels).map(|k| format!("ROLE_{k}"))).expect("distinct generated labels")
    }
}

fn spread(rng: &mut ChaCha8Rng, mean: usize) -> usize {
    let lo = (mean / 2).max(1);
    let hi = mean + mean / 2;
    rng.random_range(lo..=hi.max(lo))
}

/// Documents whose labels follow a sticky Markov chain over a Zipf prior;
/// tokens are drawn from per-label private pools and a shared pool.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let label_set = cfg.label_set();
    let prior = WeightedIndex::new(cfg.label_prior()).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut documents = Vec::with_capacity(cfg.n_docs);
    for d in 0..cfg.n_docs {
        let m = spread(&mut rng, cfg.mean_sentences);
        let mut sentences = Vec::with_capacity(m);
        let mut label = prior.sample(&mut rng);
        for i in 0..m {
            if i > 0 && !rng.random_bool(cfg.transition_stickiness) {
                label = prior.sample(&mut rng);
            }
            let n = spread(&mut rng, cfg.mean_tokens);
            let words: Vec<String> = (0..n)
                .map(|_| {
                    if rng.random_bool(cfg.private_fraction) {
                        format!("r{label}w{}", rng.random_range(0..cfg.vocab_per_label))
                    } else {
                        format!("s{}", cfg.shared_offset + rng.random_range(0..cfg.shared_vocab))
                    }
                })
                .collect();
            let text = words.join(" ");
            sentences.push(Sentence {
                tokens: words,
                text,
                label,
            });
        }
        documents.push(Document {
            doc_id: format!("syn{}-{d:05}", cfg.seed),
            sentences,
        });
    }
    Ok(Corpus {
        name: format!("synthetic-{}", cfg.seed),
        label_set,
        documents,
    })
}
