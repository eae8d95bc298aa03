//! Page descriptors: VLAD aggregation, power/L2 normalization and whitened PCA.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::codebook::Codebook;
use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::features::{extract_document_tokens, sum_pool, DocumentTokens, ExtractParams};
use crate::preproc::BinaryImage;
use crate::vit::Vit;

/// Concatenated per-centroid residual sums, `C * E` values.
///
/// Each feature goes to its nearest centroid (ties to the lowest index); centroids
/// without features contribute a zero block.
pub fn vlad_encode(features: ArrayView2<f64>, codebook: &Codebook) -> Result<Array1<f64>> {
    if features.nrows() == 0 {
        return Err(Error::NoForegroundTokens(None));
    }
    let e = codebook.dim();
    if features.ncols() != e {
        return Err(Error::DimensionMismatch(format!(
            "features are {}-dim, codebook is {e}-dim",
            features.ncols()
        )));
    }
    let mut v = Array1::zeros(codebook.clusters() * e);
    for f in features.rows() {
        let (k, _) = codebook.nearest(f);
        let mut block = v.slice_mut(ndarray::s![k * e..(k + 1) * e]);
        block += &f;
        block -= &codebook.centroids.row(k);
    }
    Ok(v)
}

/// Scales to unit Euclidean norm; the zero vector is returned unchanged.
pub fn l2_normalize(v: &Array1<f64>) -> Array1<f64> {
    let norm = v.dot(v).sqrt();
    if norm == 0.0 {
        v.clone()
    } else {
        v / norm
    }
}

/// Signed power `sign(x) * |x|^power` per element, then L2 normalization.
pub fn power_l2_normalize(v: &Array1<f64>, power: f64) -> Result<Array1<f64>> {
    if !(power > 0.0) {
        return Err(Error::InvalidParameter(format!("power {power} must be positive")));
    }
    Ok(l2_normalize(&v.mapv(|x| x.signum() * x.abs().powf(power))))
}

/// PCA with whitening, fitted on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `D x dim`, orthonormal rows.
    pub components: Array2<f64>,
    /// Descending, `D` values.
    pub eigenvalues: Array1<f64>,
    pub epsilon: f64,
}

/// Eigenvalues below this fraction of the largest count as zero when determining rank.
const RANK_TOLERANCE: f64 = 1e-10;

/// Fits whitened PCA: top-`d` eigenpairs of the sample covariance (divisor `n - 1`).
///
/// When there are fewer samples than dimensions the eigenproblem is solved on the
/// `n x n` Gram matrix and mapped back. Each direction is signed so that its
/// largest-magnitude coordinate is positive.
pub fn pca_fit(training: ArrayView2<f64>, d: usize, epsilon: f64) -> Result<PcaModel> {
    let (n, dim) = training.dim();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("PCA needs at least 2 samples, got {n}")));
    }
    if d == 0 || d > n.min(dim) {
        return Err(Error::InvalidParameter(format!(
            "D = {d} must lie in [1, min(n = {n}, dim = {dim})]"
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon {epsilon} must be non-negative")));
    }
    let mean = training.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &training - &mean;
    let denom = (n - 1) as f64;

    let gram_route = n < dim;
    let small = if gram_route { centered.dot(&centered.t()) } else { centered.t().dot(&centered) } / denom;
    let m = small.nrows();
    let eig = SymmetricEigen::new(DMatrix::from_fn(m, m, |i, j| small[(i, j)]));
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let top = eig.eigenvalues[order[0]];
    let rank = if top > 0.0 {
        order.iter().filter(|&&i| eig.eigenvalues[i] > top * RANK_TOLERANCE).count()
    } else {
        0
    };
    if d > rank {
        return Err(Error::RankDeficient { requested: d, rank });
    }

    let mut components = Array2::zeros((d, dim));
    let mut eigenvalues = Array1::zeros(d);
    for (row, &i) in order.iter().take(d).enumerate() {
        let lambda = eig.eigenvalues[i];
        let vec = Array1::from_iter(eig.eigenvectors.column(i).iter().copied());
        let mut dir = if gram_route {
            // covariance eigenvector from a Gram eigenvector a: X^T a / sqrt((n-1) lambda)
            centered.t().dot(&vec) / (denom * lambda).sqrt()
        } else {
            vec
        };
        let pivot = dir.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            dir.mapv_inplace(|x| -x);
        }
        components.row_mut(row).assign(&dir);
        eigenvalues[row] = lambda;
    }
    Ok(PcaModel { mean, components, eigenvalues, epsilon })
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Projects onto the principal directions and divides each coordinate by
    /// `sqrt(eigenvalue + epsilon)`.
    pub fn transform(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "PCA expects {}-dim input, got {}",
                self.input_dim(),
                v.len()
            )));
        }
        let centered = &v - &self.mean;
        let projected = self.components.dot(&centered);
        Ok(projected / self.eigenvalues.mapv(|l| (l + self.epsilon).sqrt()))
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        c.set_attr("epsilon", format!("{:e}", self.epsilon));
        c.insert_f64("mean", &[self.input_dim()], self.mean.to_vec())?;
        c.insert_f64(
            "components",
            &[self.output_dim(), self.input_dim()],
            self.components.iter().copied().collect(),
        )?;
        c.insert_f64("eigenvalues", &[self.output_dim()], self.eigenvalues.to_vec())?;
        c.insert_f64("epsilon", &[1], vec![self.epsilon])?;
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let (_, mean) = c.f64("mean")?;
        let (dims, comps) = c.f64("components")?;
        let (_, eig) = c.f64("eigenvalues")?;
        let (_, eps) = c.f64("epsilon")?;
        let &[d, dim] = dims else {
            return Err(Error::DimensionMismatch("components must be rank 2".into()));
        };
        if mean.len() != dim || eig.len() != d || eps.len() != 1 {
            return Err(Error::DimensionMismatch("inconsistent PCA model".into()));
        }
        Ok(Self {
            mean: Array1::from(mean.to_vec()),
            components: Array2::from_shape_vec((d, dim), comps.to_vec()).expect("checked"),
            eigenvalues: Array1::from(eig.to_vec()),
            epsilon: eps[0],
        })
    }
}

pub fn pca_transform(model: &PcaModel, v: ArrayView1<f64>) -> Result<Array1<f64>> {
    model.transform(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageDescriptor {
    pub doc_id: String,
    pub values: Array1<f64>,
}

/// How a document's tokens become a single vector before PCA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// VLAD over foreground patch tokens.
    Vlad,
    /// Sum of foreground patch tokens.
    ForegroundSum,
    /// Sum of per-window class tokens.
    ClsSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeParams {
    pub extract: ExtractParams,
    pub t_fg: u32,
    pub power: f64,
    pub aggregation: Aggregation,
}

impl Default for EncodeParams {
    fn default() -> Self {
        Self { extract: ExtractParams::default(), t_fg: 10, power: 0.5, aggregation: Aggregation::Vlad }
    }
}

/// Aggregated and power/L2-normalized document vector, before PCA.
pub fn aggregate(tokens: &DocumentTokens, codebook: Option<&Codebook>, params: &EncodeParams) -> Result<Array1<f64>> {
    let no_tokens = || Error::NoForegroundTokens(Some(tokens.doc_id.clone()));
    let raw = match params.aggregation {
        Aggregation::Vlad => {
            let codebook = codebook.ok_or_else(|| Error::InvalidParameter("VLAD needs a codebook".into()))?;
            let fg = tokens.foreground(params.t_fg);
            vlad_encode(fg.view(), codebook).map_err(|e| match e {
                Error::NoForegroundTokens(_) => no_tokens(),
                other => other,
            })?
        }
        Aggregation::ForegroundSum => {
            let fg = tokens.foreground(params.t_fg);
            if fg.nrows() == 0 {
                return Err(no_tokens());
            }
            sum_pool(&fg)
        }
        Aggregation::ClsSum => {
            if tokens.num_windows() == 0 {
                return Err(no_tokens());
            }
            sum_pool(&tokens.cls_tokens())
        }
    };
    power_l2_normalize(&raw, params.power)
}

/// Full descriptor from already extracted tokens.
pub fn encode_tokens(
    tokens: &DocumentTokens,
    codebook: Option<&Codebook>,
    pca: &PcaModel,
    params: &EncodeParams,
) -> Result<PageDescriptor> {
    let v = aggregate(tokens, codebook, params)?;
    Ok(PageDescriptor { doc_id: tokens.doc_id.clone(), values: pca.transform(v.view())? })
}

/// Windows -> ViT -> foreground tokens -> aggregation -> power/L2 -> whitened PCA.
pub fn encode_document(
    doc_id: &str,
    doc: &BinaryImage,
    vit: &Vit,
    codebook: Option<&Codebook>,
    pca: &PcaModel,
    params: &EncodeParams,
) -> Result<PageDescriptor> {
    let tokens = extract_document_tokens(doc_id, doc, vit, &params.extract)?;
    encode_tokens(&tokens, codebook, pca, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn brute_vlad(features: &Array2<f64>, centroids: &Array2<f64>) -> Vec<f64> {
        let (c, e) = centroids.dim();
        let mut out = vec![0.0; c * e];
        for f in features.rows() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..c {
                let d: f64 = (0..e).map(|j| (f[j] - centroids[(k, j)]).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            for j in 0..e {
                out[best * e + j] += f[j] - centroids[(best, j)];
            }
        }
        out
    }

    #[test]
    fn vlad_examples() {
        let cb = Codebook::new(array![[0.0], [10.0]]).unwrap();
        assert_eq!(vlad_encode(array![[1.0], [9.0]].view(), &cb).unwrap(), array![1.0, -1.0]);

        let cb = Codebook::new(array![[1.0, 2.0], [5.0, 5.0]]).unwrap();
        assert_eq!(vlad_encode(array![[1.0, 2.0]].view(), &cb).unwrap(), Array1::<f64>::zeros(4));

        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(vlad_encode(empty.view(), &cb), Err(Error::NoForegroundTokens(None))));
        assert!(vlad_encode(array![[1.0]].view(), &cb).is_err());
    }

    #[test]
    fn vlad_ties_go_to_lowest_centroid() {
        let cb = Codebook::new(array![[0.0], [2.0]]).unwrap();
        assert_eq!(vlad_encode(array![[1.0]].view(), &cb).unwrap(), array![1.0, 0.0]);
    }

    #[test]
    fn power_l2_examples() {
        let out = power_l2_normalize(&array![4.0, -4.0], 0.5).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[0] - h).abs() < 1e-15 && (out[1] + h).abs() < 1e-15);
        assert_eq!(power_l2_normalize(&array![0.0, 0.0], 0.5).unwrap(), array![0.0, 0.0]);
        assert_eq!(power_l2_normalize(&array![1.0], 0.3).unwrap(), array![1.0]);
        assert!(power_l2_normalize(&array![1.0], 0.0).is_err());
    }

    #[test]
    fn pca_on_a_line() {
        let data = Array2::from_shape_fn((6, 2), |(i, j)| (i as f64 - 2.0) * if j == 0 { 1.0 } else { 2.0 });
        let m = pca_fit(data.view(), 1, 0.0).unwrap();
        let s5 = 5f64.sqrt();
        assert!((m.components[(0, 0)] - 1.0 / s5).abs() < 1e-12);
        assert!((m.components[(0, 1)] - 2.0 / s5).abs() < 1e-12);
        assert!(matches!(pca_fit(data.view(), 2, 0.0), Err(Error::RankDeficient { requested: 2, rank: 1 })));
    }

    #[test]
    fn pca_rejects_degenerate_input() {
        let same = Array2::from_shape_fn((5, 3), |(_, j)| j as f64);
        assert!(matches!(pca_fit(same.view(), 1, 0.0), Err(Error::RankDeficient { rank: 0, .. })));
        let data = Array2::from_shape_fn((3, 4), |(i, j)| (i * j) as f64);
        assert!(pca_fit(data.view(), 4, 0.0).is_err());
        assert!(pca_fit(data.slice(ndarray::s![..1, ..]), 1, 0.0).is_err());
    }

    #[test]
    fn pca_transform_examples() {
        let m = PcaModel {
            mean: array![0.0],
            components: array![[1.0]],
            eigenvalues: array![4.0],
            epsilon: 0.0,
        };
        assert_eq!(m.transform(array![6.0].view()).unwrap(), array![3.0]);
        assert!(m.transform(array![1.0, 2.0].view()).is_err());
        assert_eq!(PcaModel::from_container(&m.to_container().unwrap()).unwrap(), m);
    }

    #[test]
    fn isotropic_sample_has_unit_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data = Array2::from_shape_simple_fn((10_000, 3), || StandardNormal.sample(&mut rng));
        let m = pca_fit(data.view(), 3, 1e-8).unwrap();
        assert!(m.eigenvalues.iter().all(|&l| (l - 1.0).abs() < 0.1), "{:?}", m.eigenvalues);
    }

    fn check_whitened(data: &Array2<f64>, d: usize) {
        let m = pca_fit(data.view(), d, 1e-12).unwrap();
        for (a, ra) in m.components.rows().into_iter().enumerate() {
            for (b, rb) in m.components.rows().into_iter().enumerate() {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((ra.dot(&rb) - expect).abs() < 1e-5);
            }
        }
        let out = Array2::from_shape_fn((data.nrows(), d), |_| 0.0);
        let mut out = out;
        for (i, r) in data.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&m.transform(r).unwrap());
        }
        let centered = &out - &out.mean_axis(Axis(0)).unwrap();
        let cov = centered.t().dot(&centered) / (data.nrows() - 1) as f64;
        for ((i, j), v) in cov.indexed_iter() {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-3, "cov[{i},{j}] = {v}");
        }
        assert!(m.transform(m.mean.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whitening_via_covariance_and_gram_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tall = Array2::from_shape_fn((200, 6), |(_, j)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * (j + 1) as f64
        });
        check_whitened(&tall, 6);
        let wide = Array2::from_shape_fn((12, 40), |_| StandardNormal.sample(&mut rng));
        check_whitened(&wide, 11);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn vlad_matches_brute_force_and_ignores_order(seed in any::<u64>(), n in 1usize..60, c in 1usize..6, e in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let features = Array2::from_shape_simple_fn((n, e), || StandardNormal.sample(&mut rng));
            let centroids = Array2::from_shape_simple_fn((c, e), || StandardNormal.sample(&mut rng));
            let cb = Codebook::new(centroids.clone()).unwrap();
            let v = vlad_encode(features.view(), &cb).unwrap();
            for (a, b) in v.iter().zip(brute_vlad(&features, &centroids)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let reversed = features.slice(ndarray::s![..;-1, ..]).to_owned();
            let vr = vlad_encode(reversed.view(), &cb).unwrap();
            prop_assert!(v.iter().zip(vr.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
            let doubled = ndarray::concatenate(Axis(0), &[features.view(), features.view()]).unwrap();
            let vd = vlad_encode(doubled.view(), &cb).unwrap();
            prop_assert!(v.iter().zip(vd.iter()).all(|(a, b)| (2.0 * a - b).abs() < 1e-9));
        }

        #[test]
        fn normalized_output_has_unit_norm(v in proptest::collection::vec(-1e3f64..1e3, 1..30), p in 0.1f64..2.0) {
            let out = power_l2_normalize(&Array1::from(v.clone()), p).unwrap();
            if v.iter().any(|&x| x != 0.0) {
                prop_assert!((out.dot(&out) - 1.0).abs() < 1e-12);
            }
        }
    }
}
