//! Metrics and experiment protocols: per-label and macro/micro F1, the
//! prior-sampling random baseline, the λ/k interpolation grid and
//! cross-domain evaluation.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LabelId, LabelSet};
use crate::datastore::{self, knn_distribution, knn_query, BaselineDist, Datastore, StoreKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold occurrences.
    pub support: usize,
    /// Predicted occurrences (a mean for averaged reports).
    pub predicted: f64,
    /// Whether the label counts toward macro-F1.
    pub in_macro: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<LabelMetrics>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// `gold x predicted` counts (means for averaged reports).
    pub confusion: Vec<Vec<f64>>,
    pub n_sentences: usize,
    /// Number of runs averaged into this report.
    pub runs: usize,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Scores predicted against gold label sequences. Labels with neither gold
/// nor predicted occurrences, and labels in `exclude`, are left out of the
/// macro average; micro-F1 covers every sentence.
pub fn score(gold: &[Vec<LabelId>], pred: &[Vec<LabelId>], label_set: &LabelSet, exclude: &[LabelId]) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::shape("score", format!("{} gold vs {} predicted documents", gold.len(), pred.len())));
    }
    let k = label_set.len();
    let mut confusion = vec![vec![0.0; k]; k];
    let mut n = 0;
    for (d, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::shape("score", format!("document {d}: {} gold vs {} predicted", g.len(), p.len())));
        }
        for (&a, &b) in g.iter().zip(p) {
            if a >= k || b >= k {
                return Err(Error::domain("score", format!("label id out of range in document {d}")));
            }
            confusion[a][b] += 1.0;
            n += 1;
        }
    }
    Ok(report_from_confusion(confusion, n, label_set, exclude))
}

fn report_from_confusion(confusion: Vec<Vec<f64>>, n: usize, label_set: &LabelSet, exclude: &[LabelId]) -> EvalReport {
    let k = label_set.len();
    let correct: f64 = (0..k).map(|l| confusion[l][l]).sum();
    let labels: Vec<LabelMetrics> = (0..k)
        .map(|l| {
            let support: f64 = confusion[l].iter().sum();
            let predicted: f64 = confusion.iter().map(|row| row[l]).sum();
            let tp = confusion[l][l];
            let (precision, recall) = (ratio(tp, predicted), ratio(tp, support));
            LabelMetrics {
                label: label_set.name(l).to_string(),
                precision,
                recall,
                f1: f1(precision, recall),
                support: support.round() as usize,
                predicted,
                in_macro: (support > 0.0 || predicted > 0.0) && !exclude.contains(&l),
            }
        })
        .collect();
    let included: Vec<f64> = labels.iter().filter(|m| m.in_macro).map(|m| m.f1).collect();
    EvalReport {
        macro_f1: ratio(included.iter().sum(), included.len() as f64),
        micro_f1: ratio(correct, n as f64),
        labels,
        confusion,
        n_sentences: n,
        runs: 1,
    }
}

/// Mean of several reports over the same gold data, metric by metric.
fn average(reports: &[EvalReport]) -> EvalReport {
    let r = reports.len() as f64;
    let mut out = reports[0].clone();
    let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / r;
    out.macro_f1 = mean(&|x| x.macro_f1);
    out.micro_f1 = mean(&|x| x.micro_f1);
    for (l, m) in out.labels.iter_mut().enumerate() {
        m.precision = mean(&|x| x.labels[l].precision);
        m.recall = mean(&|x| x.labels[l].recall);
        m.f1 = mean(&|x| x.labels[l].f1);
        m.predicted = mean(&|x| x.labels[l].predicted);
        m.in_macro = reports.iter().any(|x| x.labels[l].in_macro);
    }
    for (i, row) in out.confusion.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = mean(&|x| x.confusion[i][j]);
        }
    }
    out.runs = reports.len();
    out
}

/// Samples every test label from `train_dist`; metrics averaged over `runs`.
pub fn random_baseline(train_dist: &[f64], test: &Corpus, runs: usize, seed: u64, exclude: &[LabelId]) -> Result<EvalReport> {
    if train_dist.len() != test.label_set.len() {
        return Err(Error::shape(
            "random_baseline",
            format!("{} probabilities for {} labels", train_dist.len(), test.label_set.len()),
        ));
    }
    if runs == 0 {
        return Err(Error::Config("random_baseline needs at least one run".into()));
    }
    let dist = WeightedIndex::new(train_dist).map_err(|e| Error::domain("random_baseline", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gold: Vec<Vec<LabelId>> = test.documents.iter().map(|d| d.labels()).collect();
    let reports = (0..runs)
        .map(|_| {
            let pred: Vec<Vec<LabelId>> = gold
                .iter()
                .map(|g| g.iter().map(|_| dist.sample(&mut rng)).collect())
                .collect();
            score(&gold, &pred, &test.label_set, exclude)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(average(&reports))
}

/// Viterbi predictions for every document.
pub fn predict_corpus<S: Scalar>(model: &Model<S>, corpus: &Corpus) -> Result<Vec<Vec<LabelId>>> {
    corpus
        .documents
        .iter()
        .map(|d| {
            let out = model.infer(&model.featurize(d))?;
            model.viterbi(&out)
        })
        .collect()
}

/// Standard evaluation of the model on a corpus with the same label set.
pub fn evaluate<S: Scalar>(model: &Model<S>, corpus: &Corpus, exclude: &[LabelId]) -> Result<EvalReport> {
    model.label_set.ensure_same(&corpus.label_set)?;
    let gold: Vec<_> = corpus.documents.iter().map(|d| d.labels()).collect();
    score(&gold, &predict_corpus(model, corpus)?, &corpus.label_set, exclude)
}

/// Zero-shot evaluation on a target domain; the label sets must match exactly.
pub fn cross_domain_eval<S: Scalar>(model: &Model<S>, target: &Corpus, exclude: &[LabelId]) -> Result<EvalReport> {
    evaluate(model, target, exclude)
}

pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn default_k_grid() -> Vec<usize> {
    (3..=8).map(|p| 1 << p).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lambda: f64,
    /// `None` for prototype stores, which use every prototype.
    pub k: Option<usize>,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: GridRow,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,k,macro_f1,micro_f1\n");
        for r in &self.rows {
            let k = r.k.map_or(String::from("all"), |k| k.to_string());
            let _ = writeln!(s, "{:.1},{k},{:.6},{:.6}", r.lambda, r.macro_f1, r.micro_f1);
        }
        s
    }
}

fn better(a: &GridRow, b: &GridRow) -> bool {
    if a.macro_f1 != b.macro_f1 {
        return a.macro_f1 > b.macro_f1;
    }
    if a.lambda != b.lambda {
        return a.lambda > b.lambda;
    }
    a.k.unwrap_or(0) < b.k.unwrap_or(0)
}

/// Evaluates interpolated decoding over the λ × k grid on `val`.
pub fn grid_search_interpolation<S: Scalar>(
    model: &Model<S>,
    store: &Datastore<S>,
    val: &Corpus,
    lambdas: &[f64],
    ks: &[usize],
    baseline: BaselineDist,
    exclude: &[LabelId],
) -> Result<GridResult> {
    model.label_set.ensure_same(&val.label_set)?;
    model.label_set.ensure_same(&store.label_set)?;
    if lambdas.is_empty() || (store.kind == StoreKind::Knn && ks.is_empty()) {
        return Err(Error::Config("empty interpolation grid".into()));
    }
    let ks: Vec<Option<usize>> = match store.kind {
        StoreKind::Knn => ks.iter().map(|&k| Some(k)).collect(),
        _ => vec![None],
    };
    let k_max = ks.iter().flatten().copied().max().unwrap_or(store.len());
    let n_labels = model.num_labels();

    // per document: baseline distribution and each k's neighborhood distribution
    let mut gold = Vec::new();
    let mut base = Vec::new();
    let mut nn: Vec<Vec<Tensor<S>>> = Vec::new();
    for doc in &val.documents {
        let out = model.infer(&model.featurize(doc))?;
        base.push(model.baseline_distribution(&out, baseline)?);
        gold.push(doc.labels());
        let mut per_k = Vec::with_capacity(ks.len());
        match store.kind {
            StoreKind::Knn => {
                let neighbors = (0..out.reprs.rows())
                    .map(|r| knn_query(store, out.reprs.row(r), k_max))
                    .collect::<Result<Vec<_>>>()?;
                for k in ks.iter().flatten() {
                    let mut rows = Vec::with_capacity(neighbors.len() * n_labels);
                    for nb in &neighbors {
                        rows.extend(knn_distribution(&nb[..(*k).min(nb.len())], store.tau, n_labels)?);
                    }
                    per_k.push(Tensor::new(vec![neighbors.len(), n_labels], rows)?);
                }
            }
            _ => per_k.push(datastore::neighborhood_distributions(store, &out.reprs, store.len())?),
        }
        nn.push(per_k);
    }

    let mut rows = Vec::new();
    for &lambda in lambdas {
        for (ki, &k) in ks.iter().enumerate() {
            let pred = base
                .iter()
                .zip(&nn)
                .map(|(b, n)| datastore::decode_interpolated(b, &n[ki], lambda))
                .collect::<Result<Vec<_>>>()?;
            let rep = score(&gold, &pred, &val.label_set, exclude)?;
            rows.push(GridRow {
                lambda,
                k,
                macro_f1: rep.macro_f1,
                micro_f1: rep.micro_f1,
            });
        }
    }
    let best = *rows
        .iter()
        .reduce(|a, b| if better(b, a) { b } else { a })
        .expect("non-empty grid");
    Ok(GridResult { rows, best })
}

impl EvalReport {
    /// Aligned plain-text rendering: per-label table, summary, confusion matrix.
    pub fn to_table(&self) -> String {
        let w = self.labels.iter().map(|m| m.label.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<w$}  {:>9}  {:>9}  {:>9}  {:>7}  {:>9}",
            "label", "precision", "recall", "f1", "support", "predicted"
        );
        for m in &self.labels {
            let mark = if m.in_macro { "" } else { " *" };
            let _ = writeln!(
                s,
                "{:<w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}  {:>9.2}{mark}",
                m.label, m.precision, m.recall, m.f1, m.support, m.predicted
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "macro-F1  {:.4}", self.macro_f1);
        let _ = writeln!(s, "micro-F1  {:.4}", self.micro_f1);
        let _ = writeln!(s, "sentences {}  runs {}", self.n_sentences, self.runs);
        if self.labels.iter().any(|m| !m.in_macro) {
            let _ = writeln!(s, "(* not counted in macro-F1)");
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<w$}", "gold\\pred");
        for m in &self.labels {
            let _ = write!(s, "  {:>w$}", m.label);
        }
        let _ = writeln!(s);
        for (m, row) in self.labels.iter().zip(&self.confusion) {
            let _ = write!(s, "{:<w$}", m.label);
            for v in row {
                let _ = write!(s, "  {:>w$}", format_count(*v));
            }
            let _ = writeln!(s);
        }
        s
    }
}

fn format_count(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, Sentence};

    fn ab() -> LabelSet {
        LabelSet::new(["A", "B", "C"]).unwrap()
    }

    #[test]
    fn hand_scores() {
        let r = score(&[vec![0, 0, 1, 1]], &[vec![0, 0, 0, 1]], &ab(), &[]).unwrap();
        assert!((r.labels[0].f1 - 0.8).abs() < 1e-12);
        assert!((r.labels[1].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.macro_f1 - 0.733_333_333_333).abs() < 1e-9);
        assert_eq!(r.micro_f1, 0.75);
        assert!(!r.labels[2].in_macro);
        for (l, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<f64>() as usize, r.labels[l].support);
        }
    }

    #[test]
    fn perfect_and_excluded() {
        let g = vec![vec![0, 1, 2], vec![2]];
        let r = score(&g, &g, &ab(), &[]).unwrap();
        assert_eq!((r.macro_f1, r.micro_f1), (1.0, 1.0));
        let r = score(&[vec![0, 1]], &[vec![0, 0]], &ab(), &[1]).unwrap();
        assert_eq!(r.macro_f1, 2.0 / 3.0);
        assert!(score(&[vec![0]], &[vec![0, 1]], &ab(), &[]).is_err());
    }

    #[test]
    fn gold_only_label_counts_as_zero() {
        let r = score(&[vec![0, 2]], &[vec![0, 0]], &ab(), &[]).unwrap();
        assert!(r.labels[2].in_macro);
        assert_eq!(r.labels[2].f1, 0.0);
        assert!((r.macro_f1 - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    fn corpus_of(labels: &[usize], ls: LabelSet) -> Corpus {
        Corpus {
            name: "t".into(),
            label_set: ls,
            documents: vec![Document {
                doc_id: "d".into(),
                sentences: labels
                    .iter()
                    .map(|&l| Sentence {
                        text: "x".into(),
                        tokens: vec!["x".into()],
                        label: l,
                    })
                    .collect(),
            }],
        }
    }

    #[test]
    fn random_baseline_properties() {
        let ls = LabelSet::new(["A", "B"]).unwrap();
        let all_a = corpus_of(&[0; 20], ls.clone());
        let r = random_baseline(&[1.0, 0.0], &all_a, 10, 3, &[]).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.runs, 10);
        let mixed: Vec<usize> = (0..2000).map(|i| i % 2).collect();
        let c = corpus_of(&mixed, ls);
        let r = random_baseline(&[0.5, 0.5], &c, 10, 3, &[]).unwrap();
        assert!((r.micro_f1 - 0.5).abs() < 0.05);
        assert_eq!(r, random_baseline(&[0.5, 0.5], &c, 10, 3, &[]).unwrap());
    }

    #[test]
    fn grid_tie_break() {
        let a = GridRow {
            lambda: 0.5,
            k: Some(16),
            macro_f1: 0.7,
            micro_f1: 0.0,
        };
        assert!(better(&GridRow { lambda: 0.6, ..a }, &a));
        assert!(better(&GridRow { k: Some(8), ..a }, &a));
        assert!(!better(&GridRow { lambda: 0.4, k: Some(8), ..a }, &a));
        assert_eq!(default_k_grid(), vec![8, 16, 32, 64, 128, 256]);
        assert_eq!(default_lambda_grid().len(), 11);
    }

    #[test]
    fn table_mentions_every_label() {
        let r = score(&[vec![0, 1]], &[vec![0, 1]], &ab(), &[]).unwrap();
        let t = r.to_table();
        assert!(t.contains("macro-F1  1.0000"));
        assert!(t.lines().any(|l| l.starts_with("C ")));
    }
}
