//! Inference-time neighborhoods: stores of (representation, label) pairs or
//! label prototypes, exact kNN retrieval, k-means, and the interpolation of
//! a neighborhood label distribution with the model's own.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelId, LabelSet};
use crate::error::{Error, Result};
use crate::scalar::{argmax, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RRLSTORE";
pub const STORE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreKind {
    Knn,
    SingleProto,
    MultiProto,
}

impl StoreKind {
    fn code(self) -> u8 {
        match self {
            StoreKind::Knn => 0,
            StoreKind::SingleProto => 1,
            StoreKind::MultiProto => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(StoreKind::Knn),
            1 => Some(StoreKind::SingleProto),
            2 => Some(StoreKind::MultiProto),
            _ => None,
        }
    }
}

/// Which model distribution gets mixed with the neighborhood one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineDist {
    #[default]
    CrfMarginals,
    EmissionSoftmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Datastore<S> {
    pub kind: StoreKind,
    pub tau: f64,
    pub label_set: LabelSet,
    /// `count x dim` keys.
    pub vectors: Tensor<S>,
    pub labels: Vec<LabelId>,
    pub source: String,
    pub checkpoint_hash: String,
}

impl<S: Scalar> Datastore<S> {
    pub fn new(
        kind: StoreKind,
        tau: f64,
        label_set: LabelSet,
        vectors: Tensor<S>,
        labels: Vec<LabelId>,
    ) -> Result<Self> {
        if vectors.ndim() != 2 || vectors.rows() != labels.len() || labels.is_empty() || vectors.cols() == 0 {
            return Err(Error::shape(
                "datastore",
                format!("vectors {:?} with {} labels", vectors.shape(), labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= label_set.len()) {
            return Err(Error::domain("datastore", format!("label id {l} outside the label set")));
        }
        check_tau(tau)?;
        Ok(Self {
            kind,
            tau,
            label_set,
            vectors,
            labels,
            source: String::new(),
            checkpoint_hash: String::new(),
        })
    }

    pub fn with_meta(mut self, source: impl Into<String>, checkpoint_hash: impl Into<String>) -> Self {
        self.source = source.into();
        self.checkpoint_hash = checkpoint_hash.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.label_set.len()
    }

    /// Label distribution for one query: kNN over the `k` nearest entries,
    /// or over every prototype for prototype stores.
    pub fn distribution(&self, query: &[S], k: usize) -> Result<Vec<S>> {
        let k = match self.kind {
            StoreKind::Knn => k,
            StoreKind::SingleProto | StoreKind::MultiProto => self.len(),
        };
        let nn = knn_query(self, query, k)?;
        knn_distribution(&nn, self.tau, self.num_labels())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::domain("temperature", format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// All store entries ordered by euclidean distance to `query`, ties by
/// insertion order, truncated to `k`.
pub fn knn_query<S: Scalar>(store: &Datastore<S>, query: &[S], k: usize) -> Result<Vec<(S, LabelId)>> {
    if k == 0 {
        return Err(Error::domain("knn_query", "k must be at least 1"));
    }
    if query.len() != store.dim() {
        return Err(Error::shape(
            "knn_query",
            format!("query dim {} vs store dim {}", query.len(), store.dim()),
        ));
    }
    let mut d: Vec<(S, usize)> = (0..store.len())
        .map(|i| (sq_dist(store.vectors.row(i), query), i))
        .collect();
    if d.iter().any(|(x, _)| !x.is_finite()) {
        return Err(Error::NonFinite("knn_query distance".into()));
    }
    let k = k.min(d.len());
    let cmp = |a: &(S, usize), b: &(S, usize)| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    Ok(d.into_iter().map(|(s, i)| (s.sqrt(), store.labels[i])).collect())
}

/// `p(l) ∝ Σ exp(-d / τ)` over neighbors labeled `l`.
pub fn knn_distribution<S: Scalar>(neighbors: &[(S, LabelId)], tau: f64, n_labels: usize) -> Result<Vec<S>> {
    check_tau(tau)?;
    if neighbors.is_empty() {
        return Err(Error::domain("knn_distribution", "no neighbors"));
    }
    let tau = S::of(tau);
    // shift by the smallest distance; the normalization cancels it
    let d0 = neighbors.iter().map(|n| n.0).fold(S::infinity(), S::min);
    let mut p = vec![S::zero(); n_labels];
    for &(d, l) in neighbors {
        if l >= n_labels {
            return Err(Error::domain("knn_distribution", format!("label {l} >= {n_labels}")));
        }
        p[l] += (-(d - d0) / tau).exp();
    }
    let z: S = p.iter().copied().sum();
    Ok(p.into_iter().map(|x| x / z).collect())
}

/// `λ p_base + (1 - λ) p_nn`.
pub fn interpolate<S: Scalar>(p_base: &[S], p_nn: &[S], lambda: f64) -> Result<Vec<S>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::domain("interpolate", format!("lambda {lambda} outside [0, 1]")));
    }
    if p_base.len() != p_nn.len() {
        return Err(Error::shape("interpolate", format!("{} vs {}", p_base.len(), p_nn.len())));
    }
    let (a, b) = (S::of(lambda), S::of(1.0 - lambda));
    Ok(p_base.iter().zip(p_nn).map(|(&x, &y)| a * x + b * y).collect())
}

/// Neighborhood distributions for every row of `reprs`.
pub fn neighborhood_distributions<S: Scalar>(store: &Datastore<S>, reprs: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let mut out = Vec::with_capacity(reprs.rows() * store.num_labels());
    for r in 0..reprs.rows() {
        out.extend(store.distribution(reprs.row(r), k)?);
    }
    Tensor::new(vec![reprs.rows(), store.num_labels()], out)
}

/// Per-position argmax of the interpolated distribution, ties to the lowest id.
pub fn decode_interpolated<S: Scalar>(p_base: &Tensor<S>, p_nn: &Tensor<S>, lambda: f64) -> Result<Vec<LabelId>> {
    if p_base.shape() != p_nn.shape() {
        return Err(Error::shape("decode_interpolated", format!("{:?} vs {:?}", p_base.shape(), p_nn.shape())));
    }
    (0..p_base.rows())
        .map(|r| interpolate(p_base.row(r), p_nn.row(r), lambda).map(|p| argmax(&p)))
        .collect()
}

/// Arithmetic mean of rows, summed in order.
fn mean_of<S: Scalar>(rows: &[&[S]]) -> Vec<S> {
    let mut acc = vec![S::zero(); rows[0].len()];
    for row in rows {
        for (a, &x) in acc.iter_mut().zip(*row) {
            *a += x;
        }
    }
    let n = S::of(rows.len() as f64);
    acc.into_iter().map(|a| a / n).collect()
}

fn rows_by_label<S: Scalar>(store: &Datastore<S>) -> Vec<Vec<&[S]>> {
    let mut by = vec![Vec::new(); store.num_labels()];
    for (i, &l) in store.labels.iter().enumerate() {
        by[l].push(store.vectors.row(i));
    }
    by
}

fn proto_store<S: Scalar>(store: &Datastore<S>, kind: StoreKind, protos: Vec<(LabelId, Vec<S>)>) -> Result<Datastore<S>> {
    let rows: Vec<Vec<S>> = protos.iter().map(|(_, v)| v.clone()).collect();
    let labels = protos.iter().map(|(l, _)| *l).collect();
    Ok(Datastore::new(kind, store.tau, store.label_set.clone(), Tensor::from_rows(&rows)?, labels)?
        .with_meta(store.source.clone(), store.checkpoint_hash.clone()))
}

/// One prototype per observed label: the mean of its vectors.
pub fn class_mean_prototypes<S: Scalar>(store: &Datastore<S>) -> Result<Datastore<S>> {
    let protos = rows_by_label(store)
        .into_iter()
        .enumerate()
        .filter(|(_, rows)| !rows.is_empty())
        .map(|(l, rows)| (l, mean_of(&rows)))
        .collect();
    proto_store(store, StoreKind::SingleProto, protos)
}

/// Up to `k_clusters` k-means centroids per observed label.
pub fn multi_prototypes<S: Scalar>(store: &Datastore<S>, k_clusters: usize, seed: u64) -> Result<Datastore<S>> {
    let mut protos = Vec::new();
    for (l, rows) in rows_by_label(store).into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let fit = kmeans_fit(&rows, k_clusters, seed.wrapping_add(l as u64), &KMeansOptions::default())?;
        protos.extend(fit.centroids.into_iter().map(|c| (l, c)));
    }
    proto_store(store, StoreKind::MultiProto, protos)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit<S> {
    pub centroids: Vec<Vec<S>>,
    pub inertia: S,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<S>,
    pub iterations: usize,
}

fn nearest<S: Scalar>(x: &[S], centroids: &[Vec<S>]) -> (usize, S) {
    let mut best = (0, S::infinity());
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations. With fewer distinct
/// points than clusters the distinct points are returned as they are.
pub fn kmeans_fit<S: Scalar>(points: &[&[S]], k: usize, seed: u64, opts: &KMeansOptions) -> Result<KMeansFit<S>> {
    if points.is_empty() {
        return Err(Error::domain("kmeans_fit", "no vectors"));
    }
    if k == 0 {
        return Err(Error::domain("kmeans_fit", "k_clusters must be at least 1"));
    }
    let mut distinct: Vec<&[S]> = Vec::new();
    for p in points {
        if !distinct.contains(p) {
            distinct.push(p);
        }
    }
    if distinct.len() < k {
        return Ok(KMeansFit {
            centroids: distinct.iter().map(|p| p.to_vec()).collect(),
            inertia: S::zero(),
            inertia_history: Vec::new(),
            iterations: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())].to_vec()];
    while centroids.len() < k {
        let w: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1.as_f64()).collect();
        let pick = WeightedIndex::new(&w).map_err(|e| Error::domain("kmeans_fit", e.to_string()))?;
        centroids.push(points[pick.sample(&mut rng)].to_vec());
    }

    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        iterations += 1;
        let assign: Vec<(usize, S)> = points.iter().map(|p| nearest(p, &centroids)).collect();
        history.push(assign.iter().map(|a| a.1).sum());
        let mut members: Vec<Vec<&[S]>> = vec![Vec::new(); k];
        for (p, a) in points.iter().zip(&assign) {
            members[a.0].push(p);
        }
        let mut taken = vec![false; points.len()];
        let mut next = Vec::with_capacity(k);
        for m in &members {
            if m.is_empty() {
                // reseed from the point farthest from its centroid
                let far = (0..points.len())
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if assign[b].1 >= assign[i].1 => Some(b),
                        _ => Some(i),
                    })
                    .expect("more points than clusters");
                taken[far] = true;
                next.push(points[far].to_vec());
            } else {
                next.push(mean_of(m));
            }
        }
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt().as_f64())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < opts.tol {
            break;
        }
    }
    let inertia = points.iter().map(|p| nearest(p, &centroids).1).sum();
    history.push(inertia);
    Ok(KMeansFit {
        centroids,
        inertia,
        inertia_history: history,
        iterations,
    })
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

impl<S: Scalar> Datastore<S> {
    /// Binary image: header, `f32` little-endian keys, `u32` label ids.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.push(self.kind.code());
        buf.extend_from_slice(&self.tau.to_le_bytes());
        buf.extend_from_slice(&(self.label_set.len() as u32).to_le_bytes());
        for name in self.label_set.names() {
            put_str(&mut buf, name);
        }
        put_str(&mut buf, &self.source);
        put_str(&mut buf, &self.checkpoint_hash);
        for &v in self.vectors.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(r.err("not a datastore file"));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::Version {
                found: version,
                expected: STORE_VERSION,
            });
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let kind = StoreKind::from_code(r.take(1)?[0]).ok_or_else(|| r.err("unknown store kind"))?;
        let tau = r.f64()?;
        let n_labels = r.u32()? as usize;
        let names = (0..n_labels).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let source = r.string()?;
        let checkpoint_hash = r.string()?;
        let body = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.err("size overflow"))?;
        let data = r
            .take(body)?
            .chunks_exact(4)
            .map(|c| S::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let labels = r
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        let store = Datastore::new(kind, tau, LabelSet::new(names)?, Tensor::new(vec![count, dim], data)?, labels)?;
        Ok(store.with_meta(source, checkpoint_hash))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub origin: &'a str,
}

impl<'a> Reader<'a> {
    pub fn err(&self, msg: &str) -> Error {
        Error::Format {
            path: self.origin.into(),
            msg: format!("{msg} (at byte {})", self.pos),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> LabelSet {
        LabelSet::new((0..n).map(|i| format!("L{i}"))).unwrap()
    }

    fn store(rows: &[Vec<f64>], ls: &[usize], k: usize) -> Datastore<f64> {
        Datastore::new(StoreKind::Knn, 1.0, labels(k), Tensor::from_rows(rows).unwrap(), ls.to_vec()).unwrap()
    }

    #[test]
    fn hand_knn_query() {
        let s = store(&[vec![0.0, 0.0], vec![3.0, 4.0]], &[0, 1], 2);
        assert_eq!(knn_query(&s, &[0.0, 0.0], 2).unwrap(), vec![(0.0, 0), (5.0, 1)]);
        assert_eq!(knn_query(&s, &[0.0, 0.0], 9).unwrap().len(), 2);
        assert!(knn_query(&s, &[0.0], 1).is_err());
    }

    #[test]
    fn ties_follow_insertion_order() {
        let s = store(&[vec![1.0], vec![-1.0], vec![1.0]], &[2, 1, 0], 3);
        let r = knn_query(&s, &[0.0], 2).unwrap();
        assert_eq!(r, vec![(1.0, 2), (1.0, 1)]);
    }

    #[test]
    fn knn_distribution_hand_values() {
        let p = knn_distribution(&[(0.0, 0), (3f64.ln(), 1)], 1.0, 2).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        assert_eq!(knn_distribution(&[(2.0, 1)], 1.0, 3).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(knn_distribution(&[(0.5, 2), (9.0, 2)], 0.1, 3).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(knn_distribution(&[(0.0, 0)], 0.0, 1).is_err());
        assert!(knn_distribution::<f64>(&[], 1.0, 1).is_err());
    }

    #[test]
    fn interpolation_hand_values() {
        let p = interpolate(&[0.9f64, 0.1], &[0.5, 0.5], 0.3).unwrap();
        assert!((p[0] - 0.62).abs() < 1e-12 && (p[1] - 0.38).abs() < 1e-12);
        assert_eq!(interpolate(&[0.9, 0.1], &[0.5, 0.5], 1.0).unwrap(), vec![0.9, 0.1]);
        assert_eq!(interpolate(&[0.9, 0.1], &[0.5, 0.5], 0.0).unwrap(), vec![0.5, 0.5]);
        assert!(interpolate(&[1.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn class_means() {
        let s = store(&[vec![0.0, 0.0], vec![5.0, 5.0], vec![2.0, 2.0]], &[0, 2, 0], 3);
        let p = class_mean_prototypes(&s).unwrap();
        assert_eq!(p.kind, StoreKind::SingleProto);
        assert_eq!(p.labels, vec![0, 2]);
        assert_eq!(p.vectors.row(0), &[1.0, 1.0]);
        assert_eq!(p.vectors.row(1), &[5.0, 5.0]);
    }

    #[test]
    fn kmeans_two_clusters() {
        let pts = [vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]];
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let fit = kmeans_fit(&refs, 2, 0, &KMeansOptions::default()).unwrap();
        let mut c = fit.centroids.clone();
        c.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(c, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        assert!((fit.inertia - 1.0).abs() < 1e-12);
        assert!(fit.inertia_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn kmeans_small_inputs() {
        let pts = [vec![1.0], vec![1.0], vec![3.0]];
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let fit = kmeans_fit(&refs, 8, 0, &KMeansOptions::default()).unwrap();
        assert_eq!(fit.centroids, vec![vec![1.0], vec![3.0]]);
        let one = kmeans_fit(&refs, 1, 0, &KMeansOptions::default()).unwrap();
        assert_eq!(one.centroids, vec![mean_of(&refs)]);
        assert!(kmeans_fit::<f64>(&[], 1, 0, &KMeansOptions::default()).is_err());
    }

    #[test]
    fn multi_with_one_cluster_is_class_mean() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let ls: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let s = store(&rows, &ls, 4);
        let a = class_mean_prototypes(&s).unwrap();
        let b = multi_prototypes(&s, 1, 5).unwrap();
        assert_eq!(a.vectors, b.vectors);
        assert_eq!(a.labels, b.labels);
        let m = multi_prototypes(&s, 4, 5).unwrap();
        assert_eq!(m.len(), 12);
        assert_eq!(m, multi_prototypes(&s, 4, 5).unwrap());
    }

    #[test]
    fn decode_boundaries() {
        let base = Tensor::from_rows(&[vec![0.6, 0.4], vec![0.5, 0.5]]).unwrap();
        let nn = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(decode_interpolated(&base, &nn, 1.0).unwrap(), vec![0, 0]);
        assert_eq!(decode_interpolated(&base, &nn, 0.0).unwrap(), vec![1, 1]);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let s = store(&[vec![0.25, -1.5], vec![3.0, 4.0]], &[0, 1], 3).with_meta("train", "abc");
        let bytes = s.to_bytes();
        assert_eq!(Datastore::<f64>::from_bytes(&bytes, "mem").unwrap(), s);
        assert!(matches!(
            Datastore::<f64>::from_bytes(&bytes[..bytes.len() - 1], "mem"),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Datastore::<f64>::from_bytes(&bad, "mem"), Err(Error::Version { found: 9, .. })));
    }
}
