//! Leave-one-out cosine retrieval, mAP/Top-1, and descriptor reranking.

use std::collections::{BTreeSet, HashSet};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use crate::encoder::{l2_normalize, PageDescriptor};
use crate::error::{Error, Result};

/// Documents with their writer labels; row `i` of `descriptors` belongs to `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub descriptors: Array2<f64>,
}

impl Corpus {
    pub fn new(ids: Vec<String>, labels: Vec<String>, descriptors: Array2<f64>) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != descriptors.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids, {} labels, {} descriptors",
                ids.len(),
                labels.len(),
                descriptors.nrows()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidParameter(format!("duplicate document id `{dup}`")));
        }
        Ok(Self { ids, labels, descriptors })
    }

    pub fn from_descriptors(descriptors: &[PageDescriptor], labels: Vec<String>) -> Result<Self> {
        let dim = descriptors.first().map(|d| d.values.len()).ok_or(Error::EmptyInput)?;
        if descriptors.iter().any(|d| d.values.len() != dim) {
            return Err(Error::DimensionMismatch("descriptors differ in dimension".into()));
        }
        let views: Vec<_> = descriptors.iter().map(|d| d.values.view().insert_axis(Axis(0))).collect();
        let matrix = ndarray::concatenate(Axis(0), &views).expect("checked widths");
        Self::new(descriptors.iter().map(|d| d.doc_id.clone()).collect(), labels, matrix)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn with_descriptors(&self, descriptors: Array2<f64>) -> Self {
        Self { ids: self.ids.clone(), labels: self.labels.clone(), descriptors }
    }
}

/// `1 - a.b / (|a| |b|)`.
pub fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    let (aa, bb) = (a.dot(&a), b.dot(&b));
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::UndefinedCosineDistance);
    }
    Ok(1.0 - a.dot(&b) / (aa * bb).sqrt())
}

/// Symmetric pairwise cosine distances. Zero descriptors (substituted for blank
/// pages) are placed at distance 1 from everything.
pub fn distance_matrix(descriptors: &Array2<f64>) -> Array2<f64> {
    let n = descriptors.nrows();
    let mut unit = descriptors.clone();
    for mut row in unit.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let sim = unit.dot(&unit.t());
    let zero: Vec<bool> = unit.rows().into_iter().map(|r| r.iter().all(|&v| v == 0.0)).collect();
    let mut dist = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let d = if zero[i] || zero[j] {
                if i == j { 0.0 } else { 1.0 }
            } else if i == j {
                0.0
            } else {
                1.0 - sim[(i, j)]
            };
            dist[(i, j)] = d;
            dist[(j, i)] = d;
        }
    }
    dist
}

/// All other documents in ascending distance from the query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: usize,
    pub ranked: Vec<usize>,
    pub distances: Vec<f64>,
}

fn rank_rows(dist: &Array2<f64>, ids: &[String]) -> Vec<RankedList> {
    (0..dist.nrows())
        .into_par_iter()
        .map(|q| {
            let mut others: Vec<usize> = (0..dist.nrows()).filter(|&j| j != q).collect();
            others.sort_by(|&a, &b| dist[(q, a)].total_cmp(&dist[(q, b)]).then_with(|| ids[a].cmp(&ids[b])));
            let distances = others.iter().map(|&j| dist[(q, j)]).collect();
            RankedList { query: q, ranked: others, distances }
        })
        .collect()
}

/// Leave-one-out rankings; ties are broken by document id.
pub fn rank_all(corpus: &Corpus) -> Result<Vec<RankedList>> {
    if corpus.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "retrieval needs at least 2 documents, got {}",
            corpus.len()
        )));
    }
    Ok(rank_rows(&distance_matrix(&corpus.descriptors), &corpus.ids))
}

/// Average precision of one ranking, `None` when no document shares the query label.
pub fn average_precision<L: PartialEq>(ranking: &RankedList, labels: &[L]) -> Option<f64> {
    let target = &labels[ranking.query];
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &doc) in ranking.ranked.iter().enumerate() {
        if labels[doc] == *target {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// What to do with queries that have no relevant document (singleton writers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SingletonPolicy {
    /// Leave them out of the mean; they still act as distractors.
    #[default]
    Exclude,
    /// Count them with AP 0 and a Top-1 miss.
    CountAsZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query: usize,
    pub average_precision: Option<f64>,
    pub top1_correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub map: f64,
    pub top1: f64,
    pub per_query: Vec<QueryResult>,
}

pub fn evaluate<L: PartialEq>(rankings: &[RankedList], labels: &[L], policy: SingletonPolicy) -> Result<Evaluation> {
    let per_query: Vec<QueryResult> = rankings
        .iter()
        .map(|r| QueryResult {
            query: r.query,
            average_precision: average_precision(r, labels),
            top1_correct: r.ranked.first().is_some_and(|&d| labels[d] == labels[r.query]),
        })
        .collect();
    let counted: Vec<&QueryResult> = per_query
        .iter()
        .filter(|q| policy == SingletonPolicy::CountAsZero || q.average_precision.is_some())
        .collect();
    if per_query.iter().all(|q| q.average_precision.is_none()) {
        return Err(Error::NoRelevantDocuments);
    }
    let n = counted.len() as f64;
    let map = counted.iter().map(|q| q.average_precision.unwrap_or(0.0)).sum::<f64>() / n;
    let top1 = counted.iter().filter(|q| q.top1_correct).count() as f64 / n;
    Ok(Evaluation { map, top1, per_query })
}

/// mAP over queries that have at least one relevant document.
pub fn mean_average_precision<L: PartialEq>(rankings: &[RankedList], labels: &[L]) -> Result<f64> {
    evaluate(rankings, labels, SingletonPolicy::Exclude).map(|e| e.map)
}

/// Fraction of queries (with at least one relevant document) whose first result
/// shares their label; 0 when there are no such queries.
pub fn top1_accuracy<L: PartialEq>(rankings: &[RankedList], labels: &[L]) -> f64 {
    evaluate(rankings, labels, SingletonPolicy::Exclude).map_or(0.0, |e| e.top1)
}

fn neighbor_sets(rankings: &[RankedList], k: usize) -> Vec<BTreeSet<usize>> {
    rankings.iter().map(|r| r.ranked.iter().take(k).copied().collect()).collect()
}

fn average_rows(source: &Array2<f64>, groups: &[Vec<usize>]) -> Array2<f64> {
    let mut out = Array2::zeros(source.raw_dim());
    for (i, group) in groups.iter().enumerate() {
        let mut acc: Array1<f64> = source.row(i).to_owned();
        for &j in group {
            acc += &source.row(j);
        }
        acc /= (group.len() + 1) as f64;
        out.row_mut(i).assign(&l2_normalize(&acc));
    }
    out
}

/// Replaces each descriptor by the L2-normalized mean of itself and its reciprocal
/// `k`-nearest neighbors, all taken from the original descriptors.
pub fn krnn_rerank(corpus: &Corpus, k: usize) -> Result<Corpus> {
    if corpus.len() < 2 {
        return Ok(corpus.with_descriptors(average_rows(&corpus.descriptors, &vec![Vec::new(); corpus.len()])));
    }
    let knn = neighbor_sets(&rank_all(corpus)?, k);
    let groups: Vec<Vec<usize>> = (0..corpus.len())
        .map(|a| knn[a].iter().copied().filter(|&b| knn[b].contains(&a)).collect())
        .collect();
    Ok(corpus.with_descriptors(average_rows(&corpus.descriptors, &groups)))
}

/// kNN-graph propagation. Node `a` aggregates neighbor `b` when `b` is among the `k1`
/// nearest neighbors of `a` and `a` is among the `k2` nearest neighbors of `b`. Each of
/// the `iterations` rounds synchronously replaces every descriptor by the L2-normalized
/// mean of itself and its kept neighbors' current descriptors.
pub fn graph_rerank(corpus: &Corpus, k1: usize, k2: usize, iterations: usize) -> Result<Corpus> {
    if k2 > k1 {
        return Err(Error::InvalidParameter(format!("k1 = {k1} must be >= k2 = {k2}")));
    }
    if iterations == 0 {
        return Ok(corpus.clone());
    }
    let groups: Vec<Vec<usize>> = if corpus.len() < 2 {
        vec![Vec::new(); corpus.len()]
    } else {
        let rankings = rank_all(corpus)?;
        let (n1, n2) = (neighbor_sets(&rankings, k1), neighbor_sets(&rankings, k2));
        (0..corpus.len()).map(|a| n1[a].iter().copied().filter(|&b| n2[b].contains(&a)).collect()).collect()
    };
    let mut current = corpus.descriptors.clone();
    for _ in 0..iterations {
        current = average_rows(&current, &groups);
    }
    Ok(corpus.with_descriptors(current))
}
