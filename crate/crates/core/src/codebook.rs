//! Foreground-token selection and the minibatch k-means codebook.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::sampler::PatchGrid;
use crate::vit::TokenSequence;

/// Foreground tokens of one document, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub doc_id: String,
    pub features: Array2<f64>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// Patch tokens whose patch holds at least `t_fg` foreground pixels, in patch order.
/// The class token is never included.
pub fn extract_foreground_tokens(tokens: &TokenSequence, grid: &PatchGrid, t_fg: u32) -> Result<Array2<f64>> {
    if tokens.patch_tokens.nrows() != grid.fg_counts.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} patch tokens for {} patches",
            tokens.patch_tokens.nrows(),
            grid.fg_counts.len()
        )));
    }
    let keep: Vec<usize> = grid.fg_counts.iter().enumerate().filter(|(_, &c)| c >= t_fg).map(|(i, _)| i).collect();
    Ok(tokens.patch_tokens.select(Axis(0), &keep).mapv(f64::from))
}

/// VLAD codebook: `C x E` centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Array2<f64>,
}

impl Codebook {
    pub fn new(centroids: Array2<f64>) -> Result<Self> {
        if centroids.nrows() == 0 || centroids.ncols() == 0 {
            return Err(Error::EmptyInput);
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook".into()));
        }
        Ok(Self { centroids })
    }

    pub fn clusters(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Index of the nearest centroid (ties to the lowest index) and its squared distance.
    pub fn nearest(&self, x: ArrayView1<f64>) -> (usize, f64) {
        nearest(self.centroids.view(), x)
    }

    /// Sum of squared distances from each row to its nearest centroid.
    pub fn quantization_error(&self, data: ArrayView2<f64>) -> f64 {
        data.rows().into_iter().map(|r| self.nearest(r).1).sum()
    }

    /// Stores the centroids under `centroids` with `C`, `E` and caller-supplied provenance.
    pub fn to_container(&self, provenance: &[(&str, String)]) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        c.set_attr("clusters", self.clusters().to_string());
        c.set_attr("dim", self.dim().to_string());
        for (k, v) in provenance {
            c.set_attr(*k, v.clone());
        }
        c.insert_f64("centroids", &[self.clusters(), self.dim()], self.centroids.iter().copied().collect())?;
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let (dims, data) = c.f64("centroids")?;
        let &[rows, cols] = dims else {
            return Err(Error::DimensionMismatch(format!("centroids must be rank 2, got {dims:?}")));
        };
        Self::new(Array2::from_shape_vec((rows, cols), data.to_vec()).expect("container checked size"))
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: ArrayView2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub clusters: usize,
    pub batch_size: usize,
    /// Number of minibatch updates.
    pub iterations: usize,
    pub seed: u64,
}

impl KMeansParams {
    /// Iteration count covering `epochs` passes over `n` features.
    pub fn iterations_for_epochs(n: usize, batch_size: usize, epochs: usize) -> usize {
        (epochs * n).div_ceil(batch_size.max(1)).max(1)
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// k-means++ seeding on a seeded sample of `max(3 * batch_size, 3 * C)` rows
/// (all rows when the data is smaller).
pub fn init_centroids(features: ArrayView2<f64>, params: &KMeansParams) -> Result<Array2<f64>> {
    let n = features.nrows();
    if params.clusters == 0 || params.batch_size == 0 {
        return Err(Error::InvalidParameter("clusters and batch_size must be >= 1".into()));
    }
    if n < params.clusters {
        return Err(Error::InsufficientDistinctFeatures { needed: params.clusters, found: n });
    }
    let mut rng = rng_stream(params.seed, 0);
    let init_size = n.min((3 * params.batch_size).max(3 * params.clusters));
    let sample: Vec<usize> = if init_size == n {
        (0..n).collect()
    } else {
        let mut s = index::sample(&mut rng, n, init_size).into_vec();
        s.sort_unstable();
        s
    };

    let mut centers = Array2::zeros((params.clusters, features.ncols()));
    let first = sample[rng.random_range(0..sample.len())];
    centers.row_mut(0).assign(&features.row(first));
    let mut d2: Vec<f64> = sample.iter().map(|&i| sq_dist(features.row(i), centers.row(0))).collect();
    for k in 1..params.clusters {
        let pick = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(&mut rng),
            // every sample coincides with a chosen center; duplicates get reseeded after fitting
            Err(_) => rng.random_range(0..sample.len()),
        };
        centers.row_mut(k).assign(&features.row(sample[pick]));
        for (d, &i) in d2.iter_mut().zip(&sample) {
            *d = d.min(sq_dist(features.row(i), centers.row(k)));
        }
    }
    Ok(centers)
}

/// Minibatch k-means with per-center learning rate `1 / n_c`, where `n_c` counts all
/// assignments the center has received so far.
///
/// When `batch_size >= n` every step sees the full data set; counts then restart
/// each step, which makes the update an exact Lloyd iteration, and the loop stops
/// once assignments no longer change. Centers that end up empty, or bit-identical to
/// an earlier center, are moved to random data points distinct from all centers.
pub fn minibatch_kmeans(features: ArrayView2<f64>, params: &KMeansParams) -> Result<Codebook> {
    let mut centers = init_centroids(features, params)?;
    let (n, c) = (features.nrows(), params.clusters);
    let full_batch = params.batch_size >= n;
    let mut rng = rng_stream(params.seed, 1);
    let mut counts = vec![0u64; c];
    let mut last_assign: Vec<usize> = Vec::new();

    for _ in 0..params.iterations {
        let batch: Vec<usize> = if full_batch {
            (0..n).collect()
        } else {
            let mut b = index::sample(&mut rng, n, params.batch_size).into_vec();
            b.sort_unstable();
            b
        };
        let assign: Vec<usize> = batch.iter().map(|&i| nearest(centers.view(), features.row(i)).0).collect();
        if full_batch {
            if assign == last_assign {
                break;
            }
            counts.iter_mut().for_each(|v| *v = 0);
        }
        let mut sums = Array2::<f64>::zeros(centers.raw_dim());
        let mut batch_counts = vec![0u64; c];
        for (&i, &k) in batch.iter().zip(&assign) {
            sums.row_mut(k).scaled_add(1.0, &features.row(i));
            batch_counts[k] += 1;
        }
        for k in 0..c {
            if batch_counts[k] == 0 {
                continue;
            }
            // equivalent to applying x -> (1 - 1/n_c) mu + x / n_c point by point
            let old = counts[k] as f64;
            let total = (counts[k] + batch_counts[k]) as f64;
            let updated = (&centers.row(k) * old + sums.row(k)) / total;
            centers.row_mut(k).assign(&updated);
            counts[k] += batch_counts[k];
        }
        last_assign = assign;
    }

    reseed_degenerate(features, &mut centers, &counts, params.seed)?;
    Codebook::new(centers)
}

fn reseed_degenerate(features: ArrayView2<f64>, centers: &mut Array2<f64>, counts: &[u64], seed: u64) -> Result<()> {
    let c = centers.nrows();
    let same = |a: ArrayView1<f64>, b: ArrayView1<f64>| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    let bad: Vec<usize> = (0..c)
        .filter(|&k| counts[k] == 0 || (0..k).any(|j| same(centers.row(j), centers.row(k))))
        .collect();
    if bad.is_empty() {
        return Ok(());
    }
    let mut order: Vec<usize> = (0..features.nrows()).collect();
    order.shuffle(&mut rng_stream(seed, 2));
    let mut candidates = order.into_iter();
    for k in bad {
        let point = candidates
            .by_ref()
            .find(|&i| (0..c).all(|j| j == k || !same(centers.row(j), features.row(i))))
            .ok_or_else(|| Error::InsufficientDistinctFeatures { needed: c, found: count_distinct(features) })?;
        centers.row_mut(k).assign(&features.row(point));
    }
    Ok(())
}

fn count_distinct(features: ArrayView2<f64>) -> usize {
    let mut rows: Vec<Vec<u64>> = features.rows().into_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

/// Stacks feature sets into one matrix; all sets must share the feature dimension.
pub fn stack_features<'a>(sets: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Array2<f64>> {
    let views: Vec<_> = sets.into_iter().map(|a| a.view()).collect();
    let dim = views.first().map(|v| v.ncols()).ok_or(Error::EmptyInput)?;
    if views.iter().any(|v| v.ncols() != dim) {
        return Err(Error::DimensionMismatch("feature sets differ in dimension".into()));
    }
    Ok(ndarray::concatenate(Axis(0), &views).expect("checked widths"))
}
